#pragma once

// Multi-task gridworlds: the fixed four-rooms layout with disjoint
// train/test goal sets, a procedural rooms/maze generator, grid file IO,
// and batched observation assembly for the networks.

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "modac/nets.hpp"
#include "modac/rng.hpp"

namespace modac::env {

// observation channel order (channels-last)
inline constexpr int kChanAgent = 0;
inline constexpr int kChanLayout = 1;
inline constexpr int kChanGoal = 2;

// actions: four cardinal moves
inline constexpr int kNumActions = 4;
inline constexpr int kActionDx[kNumActions] = {0, 0, -1, 1};
inline constexpr int kActionDy[kNumActions] = {-1, 1, 0, 0};
const char* action_name(int a);  // up/down/left/right

struct GridLayout {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> walls;  // row-major, 1 = wall

  int cell(int x, int y) const { return y * width + x; }
  int cell_x(int c) const { return c % width; }
  int cell_y(int c) const { return c / width; }
  bool wall(int x, int y) const { return walls[static_cast<size_t>(cell(x, y))] != 0; }
  bool open(int x, int y) const { return !wall(x, y); }
  bool open_cell(int c) const { return walls[static_cast<size_t>(c)] == 0; }

  std::vector<int> open_cells() const;
  // open cells whose two open neighbours lie on opposite sides (N/S or E/W)
  std::vector<int> doorways() const;
  // connected components of open cells after removing the doorways
  std::vector<std::vector<int>> rooms() const;

  // border walls + full connectivity of the open cells
  void validate() const;
};

struct TaskSpec {
  int goal_cell = -1;
  enum class Phase { kTrain, kTest } phase = Phase::kTrain;
  int task_id = 0;
};

struct GoalConfig {
  // (x, y) pairs; empty lists select the built-in defaults
  std::vector<std::pair<int, int>> train;
  std::vector<std::pair<int, int>> test;
};

struct MultiTaskGrid {
  std::shared_ptr<const GridLayout> layout;
  std::vector<TaskSpec> train_tasks;
  std::vector<TaskSpec> test_tasks;
};

// 13x13 classic four-rooms with goal clusters in three rooms for training
// and a disjoint test set centred on the remaining room.
MultiTaskGrid four_rooms(const GoalConfig& goals = {});

// '#' wall, '.' open, 'T' train goal, 'E' test goal
MultiTaskGrid parse_grid_text(const std::string& text);
MultiTaskGrid load_grid_file(const std::string& path);
std::string layout_to_text(const GridLayout& layout,
                           std::span<const TaskSpec> train = {},
                           std::span<const TaskSpec> test = {});

enum class Difficulty { kSimple, kHard };

struct GeneratedRooms {
  std::shared_ptr<const GridLayout> layout;
  TaskSpec task;
};

// per-episode procedurally generated layout; goal reachable by construction
GeneratedRooms procedural_rooms(Difficulty difficulty, std::uint64_t seed);

class GridEnv {
 public:
  GridEnv(std::shared_ptr<const GridLayout> layout, int step_cap = 100);

  void reset(const TaskSpec& task, rng::Stream& rng);
  void reset_to(const TaskSpec& task, int agent_cell);  // tests / visualisation

  struct StepResult {
    double reward = 0.0;
    bool done = false;
    bool truncated = false;  // step cap hit without reaching the goal
  };
  StepResult step(int action);

  const GridLayout& layout() const { return *layout_; }
  std::shared_ptr<const GridLayout> layout_ptr() const { return layout_; }
  void swap_layout(std::shared_ptr<const GridLayout> l) { layout_ = std::move(l); }
  const TaskSpec& task() const { return task_; }
  int agent_cell() const { return agent_cell_; }
  int step_count() const { return step_count_; }
  bool done() const { return done_; }

 private:
  std::shared_ptr<const GridLayout> layout_;
  TaskSpec task_;
  int agent_cell_ = -1;
  int step_count_ = 0;
  int step_cap_ = 100;
  bool done_ = true;
};

// ---- observation assembly ----

// single state vectors, channels-last [H, W, C]
std::vector<double> option_obs(const GridLayout& l, int agent_cell);
std::vector<double> manager_obs(const GridLayout& l, int agent_cell, int goal_cell);

// batched views for the networks; layouts may differ per row (procedural)
nets::OptionView make_option_view(std::span<const GridLayout* const> layouts,
                                  std::span<const int> agent_cells);
nets::ManagerView make_manager_view(std::span<const GridLayout* const> layouts,
                                    std::span<const int> agent_cells,
                                    std::span<const int> goal_cells,
                                    nets::TaskEncoding encoding,
                                    std::span<const int> task_ids);

nets::OptionView make_option_view(const GridLayout& layout, std::span<const int> agent_cells);
nets::ManagerView make_manager_view(const GridLayout& layout, std::span<const int> agent_cells,
                                    std::span<const int> goal_cells,
                                    nets::TaskEncoding encoding,
                                    std::span<const int> task_ids);

}  // namespace modac::env
