#pragma once

// Parameterised networks for the hierarchical agent: manager, option-policy,
// option-reward and option-termination nets, plus RMSProp and checkpointing.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "modac/rng.hpp"
#include "modac/tensor.hpp"

namespace modac::nets {

enum class Role { kManager, kOptionPolicy, kOptionReward, kOptionTermination, kBaseline };

const char* role_name(Role r);
Role role_from_name(const std::string& s);

// Ordered, named parameter collection for one network.
struct ParamSet {
  Role role = Role::kBaseline;
  std::vector<std::pair<std::string, ad::Tensor>> entries;

  void add(const std::string& name, ad::Tensor t);
  const ad::Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const;
  std::vector<ad::Tensor> tensors() const;
  // same names/role with replaced tensors (inner-loop updated parameters)
  ParamSet with_tensors(std::span<const ad::Tensor> ts) const;
  ParamSet detached() const;

  int num_params() const;
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);
};

std::uint64_t param_hash(const ParamSet& p);

enum class Torso { kConv2, kMlp };
enum class TaskEncoding { kGoalChannel, kOneHot };

struct NetworkSpec {
  Torso torso = Torso::kConv2;
  int grid_h = 13;
  int grid_w = 13;
  int base_channels = 2;          // layout + agent position
  int num_options = 4;            // K
  int num_actions = 4;            // |A|
  int conv_filters = 32;
  int conv_kernel = 2;
  int dense = 256;                // fully-connected layer after the conv torso
  std::vector<int> mlp_hidden = {64, 64};
  TaskEncoding task_encoding = TaskEncoding::kGoalChannel;
  int num_tasks = 0;              // one-hot encoding size
  int task_embed = 16;

  int option_in_channels() const { return base_channels; }
  int manager_in_channels() const {
    return base_channels + (task_encoding == TaskEncoding::kGoalChannel ? 1 : 0);
  }
  int torso_out_dim(int in_channels) const;
  int manager_feature_dim() const;
};

// Batched observation views. Option-side networks accept only OptionView,
// which never carries the goal channel; the constraint is structural.
struct OptionView {
  ad::Tensor obs;  // [B, H, W, base_channels]
  int batch() const { return obs.dim(0); }
};
struct ManagerView {
  ad::Tensor obs;                 // [B, H, W, base(+goal)] per task_encoding
  std::vector<int> task_ids;      // used when task_encoding == kOneHot
  int batch() const { return obs.dim(0); }
};

struct PolicyValue {
  ad::Tensor logits;  // [B, K+A]
  ad::Tensor value;   // [B]
};
struct OptionHeads {
  std::vector<ad::Tensor> logits;  // K x [B, A]
  std::vector<ad::Tensor> values;  // K x [B]
};

ParamSet make_manager_params(const NetworkSpec& spec, rng::Stream& rng);
ParamSet make_option_policy_params(const NetworkSpec& spec, rng::Stream& rng);
ParamSet make_option_reward_params(const NetworkSpec& spec, rng::Stream& rng);
ParamSet make_option_termination_params(const NetworkSpec& spec, rng::Stream& rng);

PolicyValue manager_forward(const ParamSet& p, const NetworkSpec& spec, const ManagerView& v);
OptionHeads option_forward(const ParamSet& p, const NetworkSpec& spec, const OptionView& v);
// K heads of per-action rewards in (-pi/2, pi/2), arctan-activated
std::vector<ad::Tensor> option_reward_forward(const ParamSet& p, const NetworkSpec& spec,
                                              const OptionView& v);
// K termination probabilities in (0,1), sigmoid-activated
std::vector<ad::Tensor> option_termination_forward(const ParamSet& p, const NetworkSpec& spec,
                                                   const OptionView& v);

// split torso/head access so a learner can run one torso pass and evaluate
// only the heads it needs on row subsets
ad::Tensor torso_features(const ParamSet& p, const NetworkSpec& spec, const OptionView& v);
ad::Tensor manager_features(const ParamSet& p, const NetworkSpec& spec, const ManagerView& v);
ad::Tensor option_policy_head(const ParamSet& p, const NetworkSpec& spec,
                              const ad::Tensor& feats, int head);       // [N, A]
ad::Tensor option_value_head(const ParamSet& p, const NetworkSpec& spec,
                             const ad::Tensor& feats, int head);        // [N]
ad::Tensor option_reward_head(const ParamSet& p, const NetworkSpec& spec,
                              const ad::Tensor& feats, int head);       // [N, A]
ad::Tensor option_termination_head(const ParamSet& p, const NetworkSpec& spec,
                                   const ad::Tensor& feats, int head);  // [N]
ad::Tensor manager_policy_head(const ParamSet& p, const ad::Tensor& feats);  // [N, K+A]
ad::Tensor manager_value_head(const ParamSet& p, const ad::Tensor& feats);   // [N]

// ---- optimizer ----

struct RmsPropConfig {
  double lr = 1e-3;
  double decay = 0.99;
  double epsilon = 0.01;
  double momentum = 0.0;
  double clip_norm = 0.0;  // 0 disables clipping
};

struct RmsPropState {
  std::vector<std::vector<double>> acc;  // second-moment accumulators, per entry
  std::vector<std::vector<double>> mom;
  static RmsPropState init(const ParamSet& p);
};

// Functional update: returns the stepped ParamSet and advances `state`.
// Gradients are global-norm clipped first; the step per element is
// lr * g * clip_factor / sqrt(acc + eps). When any grad is on a tape the
// update is built from tape ops so the result stays differentiable through
// the raw gradient path; the clip factor and statistics are constants.
// `step_scale_override` replaces the computed clip_factor/sqrt(acc+eps)
// multipliers and `step_scale_out` records them — finite-difference
// harnesses use the pair to pin a reference run's constants.
ParamSet rmsprop_step(const ParamSet& params, std::span<const ad::Tensor> grads,
                      RmsPropState& state, const RmsPropConfig& cfg,
                      const std::vector<std::vector<double>>* step_scale_override = nullptr,
                      std::vector<std::vector<double>>* step_scale_out = nullptr);

// ---- checkpoints ----

struct Checkpoint {
  int format = 1;
  std::vector<std::pair<std::string, ParamSet>> sets;

  const ParamSet* find(const std::string& name) const;
};

void save_checkpoint(const std::string& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& dir);

}  // namespace modac::nets
