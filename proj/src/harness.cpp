#include "modac/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <sstream>

#include <json.hpp>

#include "modac/checks.hpp"

namespace modac::harness {

namespace fs = std::filesystem;

const std::vector<std::string>& ExperimentConfig::known_keys() {
  static const std::vector<std::string> keys = {
      "env.kind", "env.grid_file", "env.step_cap",
      "agent.kind", "agent.num_options",
      "net.torso", "net.mlp_hidden", "net.conv_filters", "net.conv_kernel", "net.dense",
      "net.task_encoding",
      "train.lr", "train.meta_lr", "train.gamma", "train.switching_cost",
      "train.value_coef", "train.entropy_coef", "train.clip_norm", "train.meta_clip_norm",
      "train.rms_decay", "train.rms_epsilon", "train.inner_steps", "train.n_step",
      "train.batch_size", "train.num_envs", "train.frames",
      "train.beta_running_product", "train.meta_last_step_only",
      "transfer.frames",
      "run.seeds", "run.determinism", "run.checkpoint_every", "run.hist_snapshots",
      "baseline.mlsh_duration", "baseline.oc_deliberation_cost",
  };
  return keys;
}

ExperimentConfig ExperimentConfig::load(const config::Config& c) {
  c.require_known(known_keys());
  ExperimentConfig e;
  e.env_kind = c.get_str("env.kind", e.env_kind);
  e.grid_file = c.get_str("env.grid_file", e.grid_file);
  e.step_cap = c.get_int("env.step_cap", e.step_cap);
  e.agent = c.get_str("agent.kind", e.agent);
  e.num_options = c.get_int("agent.num_options", e.num_options);
  e.torso = c.get_str("net.torso", e.torso);
  e.mlp_hidden = c.get_ints("net.mlp_hidden", e.mlp_hidden);
  e.conv_filters = c.get_int("net.conv_filters", e.conv_filters);
  e.conv_kernel = c.get_int("net.conv_kernel", e.conv_kernel);
  e.dense = c.get_int("net.dense", e.dense);
  e.task_encoding = c.get_str("net.task_encoding", e.task_encoding);
  e.hp.lr = c.get_double("train.lr", e.hp.lr);
  e.hp.meta_lr = c.get_double("train.meta_lr", e.hp.meta_lr);
  e.hp.gamma = c.get_double("train.gamma", e.hp.gamma);
  e.hp.switching_cost = c.get_double("train.switching_cost", e.hp.switching_cost);
  e.hp.value_coef = c.get_double("train.value_coef", e.hp.value_coef);
  e.hp.entropy_coef = c.get_double("train.entropy_coef", e.hp.entropy_coef);
  e.hp.clip_norm = c.get_double("train.clip_norm", e.hp.clip_norm);
  e.hp.meta_clip_norm = c.get_double("train.meta_clip_norm", e.hp.meta_clip_norm);
  e.hp.rms_decay = c.get_double("train.rms_decay", e.hp.rms_decay);
  e.hp.rms_epsilon = c.get_double("train.rms_epsilon", e.hp.rms_epsilon);
  e.hp.inner_steps = c.get_int("train.inner_steps", e.hp.inner_steps);
  e.hp.beta_running_product = c.get_bool("train.beta_running_product", false);
  e.hp.meta_last_step_only = c.get_bool("train.meta_last_step_only", false);
  e.n_step = c.get_int("train.n_step", e.n_step);
  e.batch_size = c.get_int("train.batch_size", e.batch_size);
  e.num_envs = c.get_int("train.num_envs", e.num_envs);
  e.train_frames = c.get_long("train.frames", e.train_frames);
  e.transfer_frames = c.get_long("transfer.frames", e.transfer_frames);
  e.seeds = c.get_longs("run.seeds", e.seeds);
  e.determinism = c.get_bool("run.determinism", e.determinism);
  e.checkpoint_every = c.get_long("run.checkpoint_every", e.checkpoint_every);
  e.hist_snapshots = c.get_int("run.hist_snapshots", e.hist_snapshots);
  e.mlsh_duration = c.get_int("baseline.mlsh_duration", e.mlsh_duration);
  e.oc_deliberation_cost =
      c.get_double("baseline.oc_deliberation_cost", e.oc_deliberation_cost);
  e.canonical = c.canonical_text();

  if (e.train_frames <= 0 || e.transfer_frames <= 0)
    throw config::ConfigError("frame budgets must be positive");
  if (e.num_options < 0) throw config::ConfigError("agent.num_options must be >= 0");
  if (e.hp.switching_cost < 0) throw config::ConfigError("switching cost must be >= 0");
  if (e.seeds.empty()) throw config::ConfigError("run.seeds must not be empty");
  (void)e.kind();       // validates the agent name
  (void)e.make_spec();  // validates torso/encoding names
  return e;
}

nets::NetworkSpec ExperimentConfig::make_spec() const {
  nets::NetworkSpec s;
  if (torso == "conv2")
    s.torso = nets::Torso::kConv2;
  else if (torso == "mlp")
    s.torso = nets::Torso::kMlp;
  else
    throw config::ConfigError("net.torso must be conv2 or mlp");
  auto w = world();
  s.grid_h = w.layout->height;
  s.grid_w = w.layout->width;
  s.num_options = agent == "flat" ? 0 : num_options;
  s.num_actions = env::kNumActions;
  s.mlp_hidden = mlp_hidden;
  s.conv_filters = conv_filters;
  s.conv_kernel = conv_kernel;
  s.dense = dense;
  if (task_encoding == "goal_channel")
    s.task_encoding = nets::TaskEncoding::kGoalChannel;
  else if (task_encoding == "onehot")
    s.task_encoding = nets::TaskEncoding::kOneHot;
  else
    throw config::ConfigError("net.task_encoding must be goal_channel or onehot");
  if (s.task_encoding == nets::TaskEncoding::kOneHot)
    s.num_tasks = static_cast<int>(w.train_tasks.size() + w.test_tasks.size());
  return s;
}

env::MultiTaskGrid ExperimentConfig::world() const {
  if (!grid_file.empty()) return env::load_grid_file(grid_file);
  if (env_kind == "four_rooms") return env::four_rooms();
  if (env_kind == "procedural") {
    // fixed-size placeholder for network shapes; actual layouts are
    // generated per episode by the source
    auto gen = env::procedural_rooms(env::Difficulty::kSimple, 0);
    env::MultiTaskGrid g;
    g.layout = gen.layout;
    g.train_tasks = {gen.task};
    g.test_tasks = {gen.task};
    return g;
  }
  throw config::ConfigError("env.kind must be four_rooms or procedural");
}

metalearn::AgentKind ExperimentConfig::kind() const {
  return metalearn::agent_kind_from_name(agent);
}

metalearn::DriverConfig ExperimentConfig::driver_config(std::uint64_t seed,
                                                        bool training_phase) const {
  metalearn::DriverConfig dc;
  dc.kind = kind();
  dc.spec = make_spec();
  dc.hp = hp;
  dc.num_envs = num_envs;
  dc.n_step = n_step;
  dc.batch_size = batch_size;
  dc.step_cap = step_cap;
  dc.frame_budget = training_phase ? train_frames : transfer_frames;
  dc.seed = seed;
  dc.training_phase = training_phase;
  dc.mlsh_duration = mlsh_duration;
  dc.oc_deliberation_cost = oc_deliberation_cost;
  auto w = world();
  if (env_kind == "procedural")
    dc.source = std::make_shared<agent::ProceduralSource>(
        training_phase ? env::Difficulty::kSimple : env::Difficulty::kHard);
  else
    dc.source = std::make_shared<agent::FixedLayoutSource>(
        w.layout, training_phase ? w.train_tasks : w.test_tasks);
  return dc;
}

// ---- CSV ----

namespace {
std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}
}  // namespace

std::string metrics_header(int num_options, int num_actions) {
  std::ostringstream os;
  os << "frames,episode_return_mean,episode_return_sem,option_frac,mean_option_len";
  for (int i = 0; i < num_options + num_actions; ++i) os << ",choice_hist_" << i;
  os << ",meta_grad_norm,loss_policy,loss_value";
  return os.str();
}

std::string metrics_line(const metalearn::MetricsRow& row) {
  std::ostringstream os;
  os << row.frames << "," << fmt(row.episode_return_mean) << ","
     << fmt(row.episode_return_sem) << "," << fmt(row.option_frac) << ","
     << fmt(row.mean_option_len);
  for (double v : row.choice_hist) os << "," << fmt(v);
  os << "," << fmt(row.meta_grad_norm) << "," << fmt(row.loss_policy) << ","
     << fmt(row.loss_value);
  return os.str();
}

std::vector<metalearn::MetricsRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open metrics csv " + path);
  std::string header;
  std::getline(in, header);
  int hist_cols = 0;
  {
    std::istringstream hs(header);
    std::string col;
    while (std::getline(hs, col, ','))
      if (col.rfind("choice_hist_", 0) == 0) ++hist_cols;
  }
  std::vector<metalearn::MetricsRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(ls, cell, ',')) vals.push_back(std::stod(cell));
    if (static_cast<int>(vals.size()) != 8 + hist_cols)
      throw std::runtime_error("metrics csv row has wrong arity in " + path);
    metalearn::MetricsRow r;
    size_t i = 0;
    r.frames = static_cast<long>(vals[i++]);
    r.episode_return_mean = vals[i++];
    r.episode_return_sem = vals[i++];
    r.option_frac = vals[i++];
    r.mean_option_len = vals[i++];
    for (int h = 0; h < hist_cols; ++h) r.choice_hist.push_back(vals[i++]);
    r.meta_grad_norm = vals[i++];
    r.loss_policy = vals[i++];
    r.loss_value = vals[i++];
    rows.push_back(std::move(r));
  }
  return rows;
}

double curve_auc(const std::vector<metalearn::MetricsRow>& rows) {
  if (rows.empty()) return 0.0;
  double area = 0.0;
  long prev = 0;
  for (const auto& r : rows) {
    area += r.episode_return_mean * static_cast<double>(r.frames - prev);
    prev = r.frames;
  }
  return area / static_cast<double>(rows.back().frames);
}

// ---- run record ----

void RunRecord::save() const {
  nlohmann::json js;
  js["config_hash"] = config_hash;
  js["metrics_csvs"] = metrics_csvs;
  js["checkpoints"] = checkpoints;
  js["wall_seconds"] = wall_seconds;
  std::ofstream out(fs::path(dir) / "run_record.json");
  out << js.dump(2) << "\n";
}

RunRecord RunRecord::load(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "run_record.json");
  if (!in) throw std::runtime_error("no run_record.json in " + dir);
  nlohmann::json js = nlohmann::json::parse(in);
  RunRecord r;
  r.dir = dir;
  r.config_hash = js.at("config_hash").get<std::uint64_t>();
  r.metrics_csvs = js.at("metrics_csvs").get<std::vector<std::string>>();
  r.checkpoints = js.at("checkpoints").get<std::vector<std::string>>();
  r.wall_seconds = js.at("wall_seconds").get<double>();
  return r;
}

void RunRecord::validate() const {
  for (const auto& m : metrics_csvs) (void)read_metrics_csv((fs::path(dir) / m).string());
  for (const auto& c : checkpoints) (void)nets::load_checkpoint((fs::path(dir) / c).string());
}

// ---- phases ----

namespace {

void write_config_copy(const ExperimentConfig& cfg, const std::string& dir) {
  std::ofstream out(fs::path(dir) / "config.cfg");
  out << cfg.canonical;
}

nets::Checkpoint bundle_to_checkpoint(const metalearn::ParamBundle& b) {
  nets::Checkpoint ck;
  ck.sets.emplace_back("manager", b.manager.detached());
  if (b.options) ck.sets.emplace_back("options", b.options->detached());
  if (b.rewards) ck.sets.emplace_back("rewards", b.rewards->detached());
  if (b.terminations) ck.sets.emplace_back("terminations", b.terminations->detached());
  return ck;
}

struct UsageSnapshotWriter {
  std::ofstream out;
  long interval = 0;
  long next_at = 0;
  int snapshot = 0;

  UsageSnapshotWriter(const std::string& path, long budget, int snapshots, int hist_cols) {
    out.open(path);
    out << "snapshot,frames";
    for (int i = 0; i < hist_cols; ++i) out << ",choice_hist_" << i;
    out << "\n";
    interval = snapshots > 0 ? std::max<long>(1, budget / snapshots) : budget + 1;
    next_at = interval;
  }

  void maybe_write(const metalearn::MetricsRow& row) {
    if (row.frames < next_at) return;
    out << snapshot++ << "," << row.frames;
    for (double v : row.choice_hist) out << "," << fmt(v);
    out << "\n";
    next_at += interval;
  }
};

}  // namespace

RunRecord train_phase(const ExperimentConfig& cfg, std::uint64_t seed,
                      const std::string& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(out_dir);
  write_config_copy(cfg, out_dir);

  auto dc = cfg.driver_config(seed, /*training_phase=*/true);
  const int hist_cols = dc.spec.num_options + dc.spec.num_actions;

  RunRecord rec;
  rec.dir = out_dir;
  rec.config_hash = config::Config::parse_text(cfg.canonical).hash();

  std::ofstream metrics(fs::path(out_dir) / "train_metrics.csv");
  metrics << metrics_header(dc.spec.num_options, dc.spec.num_actions) << "\n";
  UsageSnapshotWriter snapshots((fs::path(out_dir) / "usage_hist.csv").string(),
                                cfg.train_frames, cfg.hist_snapshots, hist_cols);

  auto on_metrics = [&](const metalearn::MetricsRow& row) {
    metrics << metrics_line(row) << "\n";
    snapshots.maybe_write(row);
  };
  std::function<void(long, const metalearn::ParamBundle&)> on_checkpoint;
  if (cfg.checkpoint_every > 0)
    on_checkpoint = [&](long frames, const metalearn::ParamBundle& b) {
      const std::string name = "checkpoint_" + std::to_string(frames);
      nets::save_checkpoint((fs::path(out_dir) / name).string(), bundle_to_checkpoint(b));
      rec.checkpoints.push_back(name);
    };

  auto result = metalearn::run_phase(dc, nullptr, /*freeze_options=*/false, on_metrics,
                                     on_checkpoint, cfg.checkpoint_every);
  metrics.flush();

  nets::save_checkpoint((fs::path(out_dir) / "checkpoint_final").string(),
                        bundle_to_checkpoint(result.params));
  rec.checkpoints.push_back("checkpoint_final");
  rec.metrics_csvs = {"train_metrics.csv"};
  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  rec.save();
  return rec;
}

RunRecord transfer_phase(const ExperimentConfig& cfg, const std::string& checkpoint_dir,
                         std::uint64_t seed, const std::string& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(out_dir);
  write_config_copy(cfg, out_dir);

  const auto kind = cfg.kind();
  std::optional<nets::Checkpoint> ck;
  if (kind != metalearn::AgentKind::kFlat) {
    if (checkpoint_dir.empty())
      throw std::runtime_error("transfer for a hierarchical agent needs a checkpoint");
    ck = nets::load_checkpoint(checkpoint_dir);
  }

  auto world = cfg.world();
  if (world.test_tasks.empty()) throw std::runtime_error("no test tasks configured");

  RunRecord rec;
  rec.dir = out_dir;
  rec.config_hash = config::Config::parse_text(cfg.canonical).hash();

  std::vector<std::vector<metalearn::MetricsRow>> per_task;
  for (size_t ti = 0; ti < world.test_tasks.size(); ++ti) {
    auto dc = cfg.driver_config(rng::derive(seed, 0x77AA, ti), /*training_phase=*/false);
    dc.source = std::make_shared<agent::FixedLayoutSource>(
        world.layout, std::vector<env::TaskSpec>{world.test_tasks[ti]});

    metalearn::ParamBundle bundle;
    bundle.spec = dc.spec;
    rng::Stream ms(rng::derive(dc.seed, rng::kManagerInit));
    bundle.manager = nets::make_manager_params(dc.spec, ms);
    std::uint64_t frozen_opts = 0, frozen_term = 0;
    if (ck) {
      if (const auto* p = ck->find("options")) bundle.options = p->detached();
      if (const auto* p = ck->find("terminations")) bundle.terminations = p->detached();
      if (kind == metalearn::AgentKind::kModac && (!bundle.options || !bundle.terminations))
        throw std::runtime_error("checkpoint lacks option/termination parameters");
      if (bundle.options) frozen_opts = nets::param_hash(*bundle.options);
      if (bundle.terminations) frozen_term = nets::param_hash(*bundle.terminations);
    }

    const std::string csv_name = "transfer_task_" + std::to_string(ti) + ".csv";
    std::ofstream metrics(fs::path(out_dir) / csv_name);
    metrics << metrics_header(dc.spec.num_options, dc.spec.num_actions) << "\n";
    auto on_metrics = [&](const metalearn::MetricsRow& row) {
      metrics << metrics_line(row) << "\n";
    };
    auto result = metalearn::run_phase(dc, &bundle, /*freeze_options=*/true, on_metrics);
    rec.metrics_csvs.push_back(csv_name);
    per_task.push_back(std::move(result.metrics));

    if (result.params.options && nets::param_hash(*result.params.options) != frozen_opts)
      throw std::logic_error("transfer mutated the option parameters");
    if (result.params.terminations &&
        nets::param_hash(*result.params.terminations) != frozen_term)
      throw std::logic_error("transfer mutated the termination parameters");
  }

  // averaged curve: row-wise mean across the per-task runs
  size_t rows = per_task[0].size();
  for (const auto& t : per_task) rows = std::min(rows, t.size());
  std::ofstream mean_csv(fs::path(out_dir) / "transfer_mean.csv");
  const auto spec = cfg.make_spec();
  mean_csv << metrics_header(spec.num_options, spec.num_actions) << "\n";
  for (size_t i = 0; i < rows; ++i) {
    metalearn::MetricsRow m = per_task[0][i];
    for (size_t t = 1; t < per_task.size(); ++t) {
      const auto& r = per_task[t][i];
      m.episode_return_mean += r.episode_return_mean;
      m.episode_return_sem += r.episode_return_sem;
      m.option_frac += r.option_frac;
      m.mean_option_len += r.mean_option_len;
      for (size_t h = 0; h < m.choice_hist.size(); ++h) m.choice_hist[h] += r.choice_hist[h];
      m.meta_grad_norm += r.meta_grad_norm;
      m.loss_policy += r.loss_policy;
      m.loss_value += r.loss_value;
    }
    const double n = static_cast<double>(per_task.size());
    m.episode_return_mean /= n;
    m.episode_return_sem /= n;
    m.option_frac /= n;
    m.mean_option_len /= n;
    for (auto& h : m.choice_hist) h /= n;
    m.meta_grad_norm /= n;
    m.loss_policy /= n;
    m.loss_value /= n;
    mean_csv << metrics_line(m) << "\n";
  }
  rec.metrics_csvs.push_back("transfer_mean.csv");
  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  rec.save();
  return rec;
}

// ---- sweep ----

double SweepResult::mean_auc(double value) const {
  double sum = 0;
  int n = 0;
  for (const auto& c : cells)
    if (c.value == value) {
      sum += c.transfer_auc;
      ++n;
    }
  return n > 0 ? sum / n : 0.0;
}

SweepResult sweep(const config::Config& base, const std::string& axis,
                  const std::vector<double>& values, const std::string& out_dir, int jobs) {
  {
    const auto& known = ExperimentConfig::known_keys();
    if (std::find(known.begin(), known.end(), axis) == known.end())
      throw config::ConfigError("sweep axis '" + axis + "' is not a config key");
  }
  if (values.empty()) throw config::ConfigError("sweep needs at least one value");
  fs::create_directories(out_dir);

  const ExperimentConfig probe = ExperimentConfig::load(base);
  struct Job {
    double value;
    long seed;
    std::string cell_dir;
  };
  std::vector<Job> jobs_list;
  for (double v : values)
    for (long s : probe.seeds) {
      std::ostringstream dir;
      dir << out_dir << "/v" << v << "_s" << s;
      jobs_list.push_back({v, s, dir.str()});
    }

  auto run_cell = [&](const Job& j) {
    config::Config c = base;
    std::ostringstream vs;
    vs << j.value;
    c.set(axis, vs.str());
    c.set("run.seeds", std::to_string(j.seed));
    ExperimentConfig cfg = ExperimentConfig::load(c);
    SweepCell cell;
    cell.value = j.value;
    cell.seed = j.seed;
    cell.train_dir = j.cell_dir + "/train";
    cell.transfer_dir = j.cell_dir + "/transfer";
    train_phase(cfg, static_cast<std::uint64_t>(j.seed), cell.train_dir);
    transfer_phase(cfg, cell.train_dir + "/checkpoint_final",
                   static_cast<std::uint64_t>(j.seed), cell.transfer_dir);
    auto train_rows = read_metrics_csv(cell.train_dir + "/train_metrics.csv");
    if (!train_rows.empty()) cell.mean_option_len_end = train_rows.back().mean_option_len;
    auto rows = read_metrics_csv(cell.transfer_dir + "/transfer_mean.csv");
    cell.transfer_auc = curve_auc(rows);
    double frac = 0;
    for (const auto& r : rows) {
      double opts = 0;
      for (int h = 0; h < cfg.num_options; ++h) opts += r.choice_hist[static_cast<size_t>(h)];
      frac += opts;
    }
    cell.option_frac_transfer = rows.empty() ? 0.0 : frac / static_cast<double>(rows.size());
    return cell;
  };

  SweepResult result;
  if (jobs <= 1) {
    for (const auto& j : jobs_list) result.cells.push_back(run_cell(j));
  } else {
    std::vector<std::future<SweepCell>> futs;
    size_t next = 0;
    while (next < jobs_list.size() || !futs.empty()) {
      while (next < jobs_list.size() && static_cast<int>(futs.size()) < jobs) {
        futs.push_back(std::async(std::launch::async, run_cell, jobs_list[next]));
        ++next;
      }
      result.cells.push_back(futs.front().get());
      futs.erase(futs.begin());
    }
    std::sort(result.cells.begin(), result.cells.end(), [](const auto& a, const auto& b) {
      return a.value != b.value ? a.value < b.value : a.seed < b.seed;
    });
  }

  result.summary_csv = (fs::path(out_dir) / "sweep_summary.csv").string();
  std::ofstream s(result.summary_csv);
  s << "value,seed,transfer_auc,mean_option_len_end,option_frac_transfer\n";
  for (const auto& c : result.cells)
    s << fmt(c.value) << "," << c.seed << "," << fmt(c.transfer_auc) << ","
      << fmt(c.mean_option_len_end) << "," << fmt(c.option_frac_transfer) << "\n";
  for (double v : values) {
    double sum = 0, n = 0;
    for (const auto& c : result.cells)
      if (c.value == v) {
        sum += c.transfer_auc;
        n += 1;
      }
    s << fmt(v) << ",aggregate," << fmt(n > 0 ? sum / n : 0.0) << ",,\n";
  }
  return result;
}

// ---- selftest ----

int selftest(bool verbose) {
  int failures = 0;
  auto report = [&](const std::string& name, bool pass, const std::string& detail) {
    if (!pass) ++failures;
    if (verbose)
      std::printf("[%s] %s %s\n", pass ? "pass" : "FAIL", name.c_str(), detail.c_str());
  };

  {
    auto r = checks::return_oracle_check(1000, 12345);
    std::ostringstream d;
    d << "max_abs_err=" << r.max_abs_err;
    report("return-oracles", r.pass(1e-12), d.str());
  }
  {
    auto r = checks::autodiff_first_order_check(7);
    std::ostringstream d;
    d << "rel_l2=" << r.rel_l2_err;
    report("autodiff-first-order", r.pass(1e-6), d.str());
  }
  {
    auto r = checks::autodiff_second_order_check(8);
    std::ostringstream d;
    d << "rel_l2=" << r.rel_l2_err;
    report("autodiff-second-order", r.pass(1e-4), d.str());
  }
  for (int k : {1, 2})
    for (int l : {1, 5}) {
      checks::MetaFdConfig cfg;
      cfg.num_options = k;
      cfg.inner_steps = l;
      cfg.seed = static_cast<std::uint64_t>(100 + 10 * k + l);
      auto r = checks::meta_gradient_fd_check(cfg);
      std::ostringstream d;
      d << "K=" << k << " L=" << l << " rel_l2=" << r.rel_l2_err
        << " params=" << r.num_params;
      report("meta-gradient-fd", r.pass(1e-4), d.str());
    }
  return failures;
}

}  // namespace modac::harness
