#include "modac/env.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace modac::env {

const char* action_name(int a) {
  switch (a) {
    case 0: return "up";
    case 1: return "down";
    case 2: return "left";
    case 3: return "right";
  }
  return "?";
}

std::vector<int> GridLayout::open_cells() const {
  std::vector<int> out;
  for (int c = 0; c < width * height; ++c)
    if (open_cell(c)) out.push_back(c);
  return out;
}

std::vector<int> GridLayout::doorways() const {
  std::vector<int> out;
  for (int y = 1; y + 1 < height; ++y)
    for (int x = 1; x + 1 < width; ++x) {
      if (wall(x, y)) continue;
      const bool ns = wall(x, y - 1) && wall(x, y + 1) && open(x - 1, y) && open(x + 1, y);
      const bool ew = wall(x - 1, y) && wall(x + 1, y) && open(x, y - 1) && open(x, y + 1);
      if (ns || ew) out.push_back(cell(x, y));
    }
  return out;
}

std::vector<std::vector<int>> GridLayout::rooms() const {
  const auto doors = doorways();
  std::set<int> blocked(doors.begin(), doors.end());
  std::vector<int> comp(static_cast<size_t>(width * height), -1);
  std::vector<std::vector<int>> out;
  for (int c = 0; c < width * height; ++c) {
    if (!open_cell(c) || blocked.count(c) || comp[static_cast<size_t>(c)] >= 0) continue;
    std::vector<int> room;
    std::deque<int> q{c};
    comp[static_cast<size_t>(c)] = static_cast<int>(out.size());
    while (!q.empty()) {
      const int cur = q.front();
      q.pop_front();
      room.push_back(cur);
      const int x = cell_x(cur), y = cell_y(cur);
      for (int a = 0; a < kNumActions; ++a) {
        const int nx = x + kActionDx[a], ny = y + kActionDy[a];
        if (nx < 0 || ny < 0 || nx >= width || ny >= height) continue;
        const int nc = cell(nx, ny);
        if (!open(nx, ny) || blocked.count(nc) || comp[static_cast<size_t>(nc)] >= 0) continue;
        comp[static_cast<size_t>(nc)] = static_cast<int>(out.size());
        q.push_back(nc);
      }
    }
    out.push_back(std::move(room));
  }
  return out;
}

void GridLayout::validate() const {
  if (width < 3 || height < 3 || static_cast<int>(walls.size()) != width * height)
    throw std::runtime_error("grid layout: bad dimensions");
  for (int x = 0; x < width; ++x)
    if (!wall(x, 0) || !wall(x, height - 1))
      throw std::runtime_error("grid layout: border must be walls");
  for (int y = 0; y < height; ++y)
    if (!wall(0, y) || !wall(width - 1, y))
      throw std::runtime_error("grid layout: border must be walls");

  const auto cells = open_cells();
  if (cells.empty()) throw std::runtime_error("grid layout: no open cells");
  std::vector<std::uint8_t> seen(walls.size(), 0);
  std::deque<int> q{cells[0]};
  seen[static_cast<size_t>(cells[0])] = 1;
  int count = 0;
  while (!q.empty()) {
    const int cur = q.front();
    q.pop_front();
    ++count;
    const int x = cell_x(cur), y = cell_y(cur);
    for (int a = 0; a < kNumActions; ++a) {
      const int nx = x + kActionDx[a], ny = y + kActionDy[a];
      const int nc = cell(nx, ny);
      if (open(nx, ny) && !seen[static_cast<size_t>(nc)]) {
        seen[static_cast<size_t>(nc)] = 1;
        q.push_back(nc);
      }
    }
  }
  if (count != static_cast<int>(cells.size()))
    throw std::runtime_error("grid layout: open cells are not fully connected");
}

namespace {

constexpr const char* kFourRoomsMap =
    "#############\n"
    "#.....#.....#\n"
    "#.....#.....#\n"
    "#...........#\n"
    "#.....#.....#\n"
    "#.....#.....#\n"
    "##.####.....#\n"
    "#.....###.###\n"
    "#.....#.....#\n"
    "#.....#.....#\n"
    "#...........#\n"
    "#.....#.....#\n"
    "#############\n";

// goal clusters: training in the upper-left, upper-right and lower-right
// rooms; testing in the lower-left room plus one held-out cell each in the
// upper rooms
const std::vector<std::pair<int, int>> kDefaultTrainGoals = {
    {2, 2}, {3, 2}, {2, 3}, {3, 3},      // upper-left
    {9, 2}, {10, 2}, {9, 3}, {10, 3},    // upper-right
    {9, 9}, {10, 9}, {9, 10}, {10, 10},  // lower-right
};
const std::vector<std::pair<int, int>> kDefaultTestGoals = {
    {3, 9},   // lower-left (no training goals in this room)
    {4, 4},   // upper-left, held out
    {8, 4},   // upper-right, held out
    {8, 10},  // lower-right, held out
};

GridLayout layout_from_lines(const std::vector<std::string>& lines,
                             std::vector<int>* train, std::vector<int>* test) {
  GridLayout l;
  l.height = static_cast<int>(lines.size());
  l.width = static_cast<int>(lines[0].size());
  l.walls.assign(static_cast<size_t>(l.width * l.height), 0);
  for (int y = 0; y < l.height; ++y) {
    if (static_cast<int>(lines[static_cast<size_t>(y)].size()) != l.width)
      throw std::runtime_error("grid text: ragged rows");
    for (int x = 0; x < l.width; ++x) {
      const char ch = lines[static_cast<size_t>(y)][static_cast<size_t>(x)];
      switch (ch) {
        case '#': l.walls[static_cast<size_t>(l.cell(x, y))] = 1; break;
        case '.': break;
        case 'T':
          if (train) train->push_back(l.cell(x, y));
          break;
        case 'E':
          if (test) test->push_back(l.cell(x, y));
          break;
        default:
          throw std::runtime_error(std::string("grid text: unexpected character '") + ch + "'");
      }
    }
  }
  l.validate();
  return l;
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  if (lines.empty()) throw std::runtime_error("grid text: empty");
  return lines;
}

std::vector<TaskSpec> make_tasks(const GridLayout& l,
                                 const std::vector<std::pair<int, int>>& cells,
                                 TaskSpec::Phase phase, int id_offset) {
  std::vector<TaskSpec> out;
  for (const auto& [x, y] : cells) {
    if (x < 0 || y < 0 || x >= l.width || y >= l.height || l.wall(x, y))
      throw std::runtime_error("goal cell (" + std::to_string(x) + "," + std::to_string(y) +
                               ") is not an open cell");
    out.push_back({l.cell(x, y), phase, id_offset + static_cast<int>(out.size())});
  }
  return out;
}

}  // namespace

MultiTaskGrid four_rooms(const GoalConfig& goals) {
  auto layout = std::make_shared<GridLayout>(
      layout_from_lines(split_lines(kFourRoomsMap), nullptr, nullptr));
  const auto& train_cells = goals.train.empty() ? kDefaultTrainGoals : goals.train;
  const auto& test_cells = goals.test.empty() ? kDefaultTestGoals : goals.test;
  MultiTaskGrid out;
  out.layout = layout;
  out.train_tasks = make_tasks(*layout, train_cells, TaskSpec::Phase::kTrain, 0);
  out.test_tasks = make_tasks(*layout, test_cells, TaskSpec::Phase::kTest,
                              static_cast<int>(out.train_tasks.size()));
  std::set<int> seen;
  for (const auto& t : out.train_tasks) seen.insert(t.goal_cell);
  for (const auto& t : out.test_tasks)
    if (!seen.insert(t.goal_cell).second)
      throw std::runtime_error("train and test goal sets overlap");
  return out;
}

MultiTaskGrid parse_grid_text(const std::string& text) {
  std::vector<int> train, test;
  auto layout = std::make_shared<GridLayout>(layout_from_lines(split_lines(text), &train, &test));
  MultiTaskGrid out;
  out.layout = layout;
  int id = 0;
  for (int c : train) out.train_tasks.push_back({c, TaskSpec::Phase::kTrain, id++});
  for (int c : test) out.test_tasks.push_back({c, TaskSpec::Phase::kTest, id++});
  return out;
}

MultiTaskGrid load_grid_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open grid file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_grid_text(ss.str());
}

std::string layout_to_text(const GridLayout& l, std::span<const TaskSpec> train,
                           std::span<const TaskSpec> test) {
  std::string out;
  for (int y = 0; y < l.height; ++y) {
    for (int x = 0; x < l.width; ++x) {
      const int c = l.cell(x, y);
      char ch = l.wall(x, y) ? '#' : '.';
      for (const auto& t : train)
        if (t.goal_cell == c) ch = 'T';
      for (const auto& t : test)
        if (t.goal_cell == c) ch = 'E';
      out += ch;
    }
    out += '\n';
  }
  return out;
}

// ---- procedural generation ----

namespace {

// small multi-room grid: one vertical split, horizontal splits per side,
// one doorway per dividing wall
GridLayout generate_simple(rng::Stream& r) {
  const int w = 13, h = 13;
  GridLayout l;
  l.width = w;
  l.height = h;
  l.walls.assign(static_cast<size_t>(w * h), 0);
  for (int x = 0; x < w; ++x) l.walls[static_cast<size_t>(l.cell(x, 0))] =
      l.walls[static_cast<size_t>(l.cell(x, h - 1))] = 1;
  for (int y = 0; y < h; ++y) l.walls[static_cast<size_t>(l.cell(0, y))] =
      l.walls[static_cast<size_t>(l.cell(w - 1, y))] = 1;

  const int sx = 4 + r.uniform_int(5);  // vertical wall column in [4, 8]
  const int door_y = 1 + r.uniform_int(h - 2);
  for (int y = 1; y < h - 1; ++y)
    if (y != door_y) l.walls[static_cast<size_t>(l.cell(sx, y))] = 1;

  auto maybe_hsplit = [&](int x0, int x1) {
    if (!r.bernoulli(0.75)) return;
    const int sy = 4 + r.uniform_int(5);
    if (sy == door_y) return;  // keep the vertical doorway usable
    const int door_x = x0 + r.uniform_int(x1 - x0 + 1);
    for (int x = x0; x <= x1; ++x)
      if (x != door_x) l.walls[static_cast<size_t>(l.cell(x, sy))] = 1;
  };
  maybe_hsplit(1, sx - 1);
  maybe_hsplit(sx + 1, w - 2);
  l.validate();
  return l;
}

// larger maze via recursive backtracker over odd-coordinate cells
GridLayout generate_hard(rng::Stream& r) {
  const int w = 21, h = 21;
  GridLayout l;
  l.width = w;
  l.height = h;
  l.walls.assign(static_cast<size_t>(w * h), 1);
  const int cw = (w - 1) / 2, ch = (h - 1) / 2;
  auto cellxy = [&](int cx, int cy) { return l.cell(2 * cx + 1, 2 * cy + 1); };
  std::vector<std::uint8_t> visited(static_cast<size_t>(cw * ch), 0);
  std::vector<std::pair<int, int>> stack{{r.uniform_int(cw), r.uniform_int(ch)}};
  visited[static_cast<size_t>(stack[0].second * cw + stack[0].first)] = 1;
  l.walls[static_cast<size_t>(cellxy(stack[0].first, stack[0].second))] = 0;
  while (!stack.empty()) {
    auto [cx, cy] = stack.back();
    int dirs[4] = {0, 1, 2, 3};
    for (int i = 3; i > 0; --i) std::swap(dirs[i], dirs[r.uniform_int(i + 1)]);
    bool moved = false;
    for (int d : dirs) {
      const int nx = cx + kActionDx[d], ny = cy + kActionDy[d];
      if (nx < 0 || ny < 0 || nx >= cw || ny >= ch) continue;
      if (visited[static_cast<size_t>(ny * cw + nx)]) continue;
      visited[static_cast<size_t>(ny * cw + nx)] = 1;
      l.walls[static_cast<size_t>(cellxy(nx, ny))] = 0;
      l.walls[static_cast<size_t>(l.cell(2 * cx + 1 + kActionDx[d], 2 * cy + 1 + kActionDy[d]))] = 0;
      stack.emplace_back(nx, ny);
      moved = true;
      break;
    }
    if (!moved) stack.pop_back();
  }
  // knock out a few extra walls so the maze has loops and small rooms
  const int extra = 10 + r.uniform_int(10);
  for (int i = 0; i < extra; ++i) {
    const int x = 1 + r.uniform_int(w - 2), y = 1 + r.uniform_int(h - 2);
    if (!l.wall(x, y)) continue;
    const bool ns = l.open(x, y - 1) && l.open(x, y + 1);
    const bool ew = l.open(x - 1, y) && l.open(x + 1, y);
    if (ns || ew) l.walls[static_cast<size_t>(l.cell(x, y))] = 0;
  }
  l.validate();
  return l;
}

}  // namespace

GeneratedRooms procedural_rooms(Difficulty difficulty, std::uint64_t seed) {
  rng::Stream r(rng::derive(seed, 0xA11CE, difficulty == Difficulty::kSimple ? 1 : 2));
  GridLayout l = difficulty == Difficulty::kSimple ? generate_simple(r) : generate_hard(r);
  const auto cells = l.open_cells();
  GeneratedRooms out;
  out.task.goal_cell = cells[static_cast<size_t>(r.uniform_int(static_cast<int>(cells.size())))];
  out.task.phase = difficulty == Difficulty::kSimple ? TaskSpec::Phase::kTrain
                                                     : TaskSpec::Phase::kTest;
  out.task.task_id = 0;
  out.layout = std::make_shared<GridLayout>(std::move(l));
  return out;
}

// ---- env ----

GridEnv::GridEnv(std::shared_ptr<const GridLayout> layout, int step_cap)
    : layout_(std::move(layout)), step_cap_(step_cap) {
  layout_->validate();
}

void GridEnv::reset(const TaskSpec& task, rng::Stream& rng) {
  const auto cells = layout_->open_cells();
  int cell = task.goal_cell;
  while (cell == task.goal_cell)
    cell = cells[static_cast<size_t>(rng.uniform_int(static_cast<int>(cells.size())))];
  reset_to(task, cell);
}

void GridEnv::reset_to(const TaskSpec& task, int agent_cell) {
  if (!layout_->open_cell(task.goal_cell) || !layout_->open_cell(agent_cell))
    throw std::runtime_error("reset: goal/agent must be on open cells");
  task_ = task;
  agent_cell_ = agent_cell;
  step_count_ = 0;
  done_ = false;
}

GridEnv::StepResult GridEnv::step(int action) {
  if (done_) throw std::logic_error("step called on a finished episode");
  if (action < 0 || action >= kNumActions) throw std::runtime_error("invalid action");
  const int x = layout_->cell_x(agent_cell_), y = layout_->cell_y(agent_cell_);
  const int nx = x + kActionDx[action], ny = y + kActionDy[action];
  if (layout_->open(nx, ny)) agent_cell_ = layout_->cell(nx, ny);
  ++step_count_;
  StepResult out;
  if (agent_cell_ == task_.goal_cell) {
    out.reward = 1.0;
    out.done = true;
  } else if (step_count_ >= step_cap_) {
    out.done = true;
    out.truncated = true;
  }
  done_ = out.done;
  return out;
}

// ---- observations ----

namespace {
void write_obs(const GridLayout& l, int agent_cell, int goal_cell, int channels,
               double* out) {
  const int n = l.width * l.height;
  std::fill(out, out + static_cast<size_t>(n) * channels, 0.0);
  for (int c = 0; c < n; ++c)
    out[static_cast<size_t>(c) * channels + kChanLayout] = l.open_cell(c) ? 0.0 : 1.0;
  out[static_cast<size_t>(agent_cell) * channels + kChanAgent] = 1.0;
  if (channels > kChanGoal && goal_cell >= 0)
    out[static_cast<size_t>(goal_cell) * channels + kChanGoal] = 1.0;
}
}  // namespace

std::vector<double> option_obs(const GridLayout& l, int agent_cell) {
  std::vector<double> out(static_cast<size_t>(l.width * l.height) * 2);
  write_obs(l, agent_cell, -1, 2, out.data());
  return out;
}

std::vector<double> manager_obs(const GridLayout& l, int agent_cell, int goal_cell) {
  std::vector<double> out(static_cast<size_t>(l.width * l.height) * 3);
  write_obs(l, agent_cell, goal_cell, 3, out.data());
  return out;
}

nets::OptionView make_option_view(std::span<const GridLayout* const> layouts,
                                  std::span<const int> agent_cells) {
  const int b = static_cast<int>(agent_cells.size());
  if (b == 0 || layouts.size() != agent_cells.size())
    throw std::runtime_error("make_option_view: bad batch");
  const int h = layouts[0]->height, w = layouts[0]->width;
  std::vector<double> data(static_cast<size_t>(b) * h * w * 2);
  for (int i = 0; i < b; ++i)
    write_obs(*layouts[static_cast<size_t>(i)], agent_cells[static_cast<size_t>(i)], -1, 2,
              data.data() + static_cast<size_t>(i) * h * w * 2);
  return {ad::Tensor::from({b, h, w, 2}, std::move(data))};
}

nets::ManagerView make_manager_view(std::span<const GridLayout* const> layouts,
                                    std::span<const int> agent_cells,
                                    std::span<const int> goal_cells,
                                    nets::TaskEncoding encoding,
                                    std::span<const int> task_ids) {
  const int b = static_cast<int>(agent_cells.size());
  if (b == 0 || layouts.size() != agent_cells.size())
    throw std::runtime_error("make_manager_view: bad batch");
  const int h = layouts[0]->height, w = layouts[0]->width;
  const int channels = encoding == nets::TaskEncoding::kGoalChannel ? 3 : 2;
  std::vector<double> data(static_cast<size_t>(b) * h * w * channels);
  for (int i = 0; i < b; ++i) {
    const int goal = encoding == nets::TaskEncoding::kGoalChannel
                         ? goal_cells[static_cast<size_t>(i)]
                         : -1;
    write_obs(*layouts[static_cast<size_t>(i)], agent_cells[static_cast<size_t>(i)], goal,
              channels, data.data() + static_cast<size_t>(i) * h * w * channels);
  }
  nets::ManagerView v;
  v.obs = ad::Tensor::from({b, h, w, channels}, std::move(data));
  if (encoding == nets::TaskEncoding::kOneHot)
    v.task_ids.assign(task_ids.begin(), task_ids.end());
  return v;
}

nets::OptionView make_option_view(const GridLayout& layout, std::span<const int> agent_cells) {
  std::vector<const GridLayout*> ls(agent_cells.size(), &layout);
  return make_option_view(ls, agent_cells);
}

nets::ManagerView make_manager_view(const GridLayout& layout, std::span<const int> agent_cells,
                                    std::span<const int> goal_cells,
                                    nets::TaskEncoding encoding,
                                    std::span<const int> task_ids) {
  std::vector<const GridLayout*> ls(agent_cells.size(), &layout);
  return make_manager_view(ls, agent_cells, goal_cells, encoding, task_ids);
}

}  // namespace modac::env
