#pragma once

// Training mathematics: actor-critic inner-loop updates for option policies
// (on discovered option-rewards, discounted by discovered terminations) and
// the manager (on task reward with a switching cost), plus the outer-loop
// meta-update that differentiates the validation objective through the
// recorded inner updates. The driver wires the loops together.

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "modac/agent.hpp"
#include "modac/nets.hpp"
#include "modac/returns.hpp"

namespace modac::metalearn {

struct TrainHp {
  double lr = 0.001;
  double meta_lr = 0.001;
  double gamma = 0.99;
  double switching_cost = 0.05;
  double value_coef = 0.5;     // weight of the value regression relative to the policy term
  double entropy_coef = 0.01;
  double clip_norm = 40.0;
  double meta_clip_norm = 1.0;
  double rms_decay = 0.99;
  double rms_epsilon = 0.01;
  int inner_steps = 5;         // L
  bool beta_running_product = false;  // sensitivity variant of the option return
  bool meta_last_step_only = false;   // truncate the meta-path to the final inner update
};

// maximal run of one manager choice within a chunk
struct ControlSegment {
  int chunk = 0;
  int begin = 0;
  int len = 0;
  int choice = -1;
  bool has_decision = false;   // first row is a fresh manager decision
  bool ends_episode = false;
  bool cost_applies = false;   // ended by an actual termination (beta fired / primitive)
};

std::vector<ControlSegment> extract_control_segments(std::span<const agent::Chunk> chunks,
                                                     int num_options);

struct InnerUpdateStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  int rows = 0;
  bool applied = false;  // false: no usable rows in the batch
};

// stop-gradient values recorded on a reference pass so a finite-difference
// probe of the composite evaluates exactly the function whose derivative
// the implementation computes
struct InnerFreeze {
  std::vector<double> v_baseline;
  std::vector<double> v_boot;
  std::vector<double> value_target;
  std::vector<std::vector<double>> rms_denom;
};

struct InnerUpdateOptions {
  bool differentiable = false;       // record through the update (meta path)
  const InnerFreeze* replay = nullptr;
  InnerFreeze* record = nullptr;
};

// Eq.-style actor-critic update of the option-policy network on its own
// option-rewards; returns the stepped parameters. With differentiable=true
// the caller must hold a Tape scope and the result carries the dependence
// on both eta sets through the option returns.
InnerUpdateStats inner_update_option(nets::ParamSet& theta, const nets::NetworkSpec& spec,
                                     const nets::ParamSet& eta_r, const nets::ParamSet& eta_beta,
                                     std::span<const agent::Chunk> batch, const TrainHp& hp,
                                     nets::RmsPropState& opt_state,
                                     const InnerUpdateOptions& opts = {});

// Manager update on decision states; never differentiable w.r.t. eta.
InnerUpdateStats inner_update_manager(nets::ParamSet& theta_m, const nets::NetworkSpec& spec,
                                      std::span<const agent::Chunk> batch, const TrainHp& hp,
                                      bool training_phase, nets::RmsPropState& opt_state);

struct MetaUpdateStats {
  double grad_norm = 0.0;       // joint norm before clipping
  double outer_objective = 0.0;
  bool had_option_steps = false;
};

// Outer-loop update of the option-reward and option-termination parameters
// by back-propagating the validation objective through the inner updates.
MetaUpdateStats meta_update(nets::ParamSet& eta_r, nets::ParamSet& eta_beta,
                            const nets::ParamSet& theta_updated,
                            const nets::ParamSet& manager, const nets::NetworkSpec& spec,
                            std::span<const agent::Chunk> validation, const TrainHp& hp,
                            bool training_phase, nets::RmsPropState& r_state,
                            nets::RmsPropState& b_state);

// The outer objective J as a graph value: mean over validation option steps
// of sg(G_M - v_M) * log pi_o(a|s; theta'). Undefined tensor when the
// validation batch holds no option steps.
ad::Tensor meta_objective_graph(const nets::ParamSet& theta_updated,
                                const nets::ParamSet& manager, const nets::NetworkSpec& spec,
                                std::span<const agent::Chunk> validation, const TrainHp& hp,
                                bool training_phase, int* rows_out = nullptr);

// ---- driver ----

enum class AgentKind { kModac, kFlat, kMlsh, kOptionCritic };
const char* agent_kind_name(AgentKind k);
AgentKind agent_kind_from_name(const std::string& s);

struct ParamBundle {
  nets::NetworkSpec spec;
  nets::ParamSet manager;
  std::optional<nets::ParamSet> options;
  std::optional<nets::ParamSet> rewards;
  std::optional<nets::ParamSet> terminations;
};

struct MetricsRow {
  long frames = 0;
  double episode_return_mean = 0.0;
  double episode_return_sem = 0.0;
  double option_frac = 0.0;
  double mean_option_len = 0.0;
  std::vector<double> choice_hist;
  double meta_grad_norm = 0.0;
  double loss_policy = 0.0;
  double loss_value = 0.0;
};

struct DriverConfig {
  AgentKind kind = AgentKind::kModac;
  nets::NetworkSpec spec;
  TrainHp hp;
  int num_envs = 8;
  int n_step = 20;
  int batch_size = 32;  // chunks consumed per update
  int step_cap = 100;
  long frame_budget = 2000000;
  std::uint64_t seed = 0;
  bool training_phase = true;  // switching cost active; false for transfer
  int mlsh_duration = 5;
  double oc_deliberation_cost = 0.01;
  std::shared_ptr<agent::EpisodeSource> source;
};

struct PhaseResult {
  ParamBundle params;
  std::vector<MetricsRow> metrics;
  long frames = 0;
};

ParamBundle init_params(const DriverConfig& cfg);

// One train or transfer phase. `initial` supplies starting parameters
// (transfer passes frozen options and a fresh manager); freeze_options
// disables every option-side update.
PhaseResult run_phase(const DriverConfig& cfg, const ParamBundle* initial, bool freeze_options,
                      const std::function<void(const MetricsRow&)>& on_metrics = {},
                      const std::function<void(long, const ParamBundle&)>& on_checkpoint = {},
                      long checkpoint_every = 0);

// the full training loop (inner loops + outer meta-updates) as one call
inline PhaseResult algorithm1_driver(const DriverConfig& cfg,
                                     const std::function<void(const MetricsRow&)>& on_metrics = {}) {
  return run_phase(cfg, nullptr, false, on_metrics);
}

}  // namespace modac::metalearn
