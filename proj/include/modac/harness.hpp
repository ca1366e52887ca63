#pragma once

// Experiment orchestration: the train -> freeze -> transfer protocol,
// sweeps over one config axis, metrics CSV emission and run records.

#include <optional>
#include <string>
#include <vector>

#include "modac/config.hpp"
#include "modac/metalearn.hpp"

namespace modac::harness {

struct ExperimentConfig {
  // env
  std::string env_kind = "four_rooms";  // four_rooms | procedural
  std::string grid_file;                // optional custom layout/goals
  int step_cap = 100;

  // agent/networks
  std::string agent = "modac";
  int num_options = 4;
  std::string torso = "conv2";  // conv2 | mlp
  std::vector<int> mlp_hidden = {64, 64};
  int conv_filters = 32;
  int conv_kernel = 2;
  int dense = 256;
  std::string task_encoding = "goal_channel";  // goal_channel | onehot

  // optimisation
  metalearn::TrainHp hp;
  int n_step = 20;
  int batch_size = 32;
  int num_envs = 8;
  long train_frames = 2000000;
  long transfer_frames = 200000;
  int mlsh_duration = 5;
  double oc_deliberation_cost = 0.01;

  // run management
  std::vector<long> seeds = {1, 2, 3, 4, 5};
  bool determinism = true;
  long checkpoint_every = 0;  // 0: final checkpoint only
  int hist_snapshots = 3;

  std::string canonical;  // serialized config for provenance

  static ExperimentConfig load(const config::Config& c);
  static const std::vector<std::string>& known_keys();

  nets::NetworkSpec make_spec() const;
  env::MultiTaskGrid world() const;
  metalearn::AgentKind kind() const;
  metalearn::DriverConfig driver_config(std::uint64_t seed, bool training_phase) const;
};

struct RunRecord {
  std::string dir;
  std::uint64_t config_hash = 0;
  std::vector<std::string> metrics_csvs;   // relative to dir
  std::vector<std::string> checkpoints;    // relative to dir
  double wall_seconds = 0.0;

  void save() const;  // <dir>/run_record.json
  static RunRecord load(const std::string& dir);
  void validate() const;  // every referenced file exists and parses
};

// one row per outer iteration:
// frames,episode_return_mean,episode_return_sem,option_frac,mean_option_len,
// choice_hist_0..choice_hist_{K+A-1},meta_grad_norm,loss_policy,loss_value
std::string metrics_header(int num_options, int num_actions);
std::string metrics_line(const metalearn::MetricsRow& row);
std::vector<metalearn::MetricsRow> read_metrics_csv(const std::string& path);

// frame-weighted mean episode return over the whole curve
double curve_auc(const std::vector<metalearn::MetricsRow>& rows);

RunRecord train_phase(const ExperimentConfig& cfg, std::uint64_t seed,
                      const std::string& out_dir);

// Loads the trained checkpoint, freezes every option-side parameter set,
// re-initialises the manager per test task and runs each task independently
// with the switching cost disabled. checkpoint_dir may be empty for the
// flat baseline, which carries nothing across.
RunRecord transfer_phase(const ExperimentConfig& cfg, const std::string& checkpoint_dir,
                         std::uint64_t seed, const std::string& out_dir);

struct SweepCell {
  double value = 0.0;
  long seed = 0;
  double transfer_auc = 0.0;
  double mean_option_len_end = 0.0;
  double option_frac_transfer = 0.0;
  std::string train_dir;
  std::string transfer_dir;
};

struct SweepResult {
  std::vector<SweepCell> cells;
  std::string summary_csv;
  double mean_auc(double value) const;
};

// one train+transfer pipeline per (value, seed); `axis` names a config key
SweepResult sweep(const config::Config& base, const std::string& axis,
                  const std::vector<double>& values, const std::string& out_dir, int jobs = 1);

// finite-difference and oracle suites; returns the number of failures
int selftest(bool verbose = true);

}  // namespace modac::harness
