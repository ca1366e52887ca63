#pragma once

// Call-and-return execution of options and primitive actions with full
// per-step trajectory recording for the learner.

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "modac/env.hpp"
#include "modac/nets.hpp"
#include "modac/rng.hpp"

namespace modac::agent {

// manager choice: [0,K) are options, [K, K+|A|) primitive actions
struct ChoiceIndex {
  int value = -1;
  int num_options = 0;

  bool is_option() const { return value >= 0 && value < num_options; }
  int option_id() const { return value; }
  int primitive_action() const { return value - num_options; }
};

struct StepRecord {
  std::shared_ptr<const env::GridLayout> layout;
  int state_cell = -1;   // s_t
  int next_cell = -1;    // s_{t+1}
  int action = -1;       // a_t
  double reward = 0.0;   // task reward r_{t+1}
  int choice = -1;       // active manager choice
  bool decision = false; // the manager chose at this step (switch flag)
  double option_reward = 0.0;  // r^{o_i}(s_t)[a_t] as seen while acting
  double beta_value = 1.0;     // beta^{o_i}(s_{t+1}); 1 for primitives
  bool beta_sample = true;     // Bernoulli draw; primitives always terminate
  bool episode_end = false;    // s_{t+1} terminal (goal reached or cap)
  bool truncated = false;      // cap hit
  bool ended_by_termination = false;  // beta fired / primitive finished
  int goal_cell = -1;
  int task_id = 0;
};

// fixed-length slice of one actor's experience
struct Chunk {
  std::vector<StepRecord> steps;
  // bootstrap state at the cut (== steps.back().next_cell)
  int boot_cell = -1;
  int boot_goal = -1;
  int boot_task_id = 0;
  bool boot_terminal = false;
  std::shared_ptr<const env::GridLayout> boot_layout;
};

// provides (layout, task) for each fresh episode
class EpisodeSource {
 public:
  virtual ~EpisodeSource() = default;
  virtual std::pair<std::shared_ptr<const env::GridLayout>, env::TaskSpec> next(
      int env_index, rng::Stream& rng) = 0;
};

class FixedLayoutSource : public EpisodeSource {
 public:
  FixedLayoutSource(std::shared_ptr<const env::GridLayout> layout,
                    std::vector<env::TaskSpec> tasks)
      : layout_(std::move(layout)), tasks_(std::move(tasks)) {
    if (tasks_.empty()) throw std::runtime_error("episode source needs at least one task");
  }
  std::pair<std::shared_ptr<const env::GridLayout>, env::TaskSpec> next(
      int, rng::Stream& rng) override {
    return {layout_, tasks_[static_cast<size_t>(rng.uniform_int(static_cast<int>(tasks_.size())))]};
  }

 private:
  std::shared_ptr<const env::GridLayout> layout_;
  std::vector<env::TaskSpec> tasks_;
};

class ProceduralSource : public EpisodeSource {
 public:
  explicit ProceduralSource(env::Difficulty d) : difficulty_(d) {}
  std::pair<std::shared_ptr<const env::GridLayout>, env::TaskSpec> next(
      int, rng::Stream& rng) override {
    auto gen = env::procedural_rooms(difficulty_, rng.next_u64());
    return {gen.layout, gen.task};
  }

 private:
  env::Difficulty difficulty_;
};

// parameter snapshot used while acting; forwards never record to a tape
struct ActingNets {
  const nets::NetworkSpec* spec = nullptr;
  const nets::ParamSet* manager = nullptr;
  const nets::ParamSet* options = nullptr;       // null when K == 0
  const nets::ParamSet* rewards = nullptr;       // null: record task reward instead
  const nets::ParamSet* terminations = nullptr;  // null: fixed duration below
  int fixed_duration = 0;                        // >0: options last exactly this many steps
};

struct EpisodeResult {
  double total_reward = 0.0;
  int length = 0;
};

class ActorPool {
 public:
  ActorPool(int num_envs, int n_step, int step_cap, std::shared_ptr<EpisodeSource> source,
            std::uint64_t run_seed);

  // Steps all actors in lockstep until `num_chunks` chunks are ready.
  std::vector<Chunk> collect(int num_chunks, const ActingNets& nets);

  long frames() const { return frames_; }
  // episodes completed since the last drain
  std::vector<EpisodeResult> drain_episodes();

 private:
  struct Actor {
    env::GridEnv env;
    rng::Stream rng;
    ChoiceIndex active;
    int steps_in_option = 0;
    bool need_decision = true;
    bool need_reset = true;
    double episode_reward = 0.0;
    int episode_len = 0;
    std::vector<StepRecord> buffer;
  };

  void step_all(const ActingNets& nets, std::vector<Chunk>& out);

  int n_step_;
  std::shared_ptr<EpisodeSource> source_;
  std::vector<Actor> actors_;
  long frames_ = 0;
  std::vector<EpisodeResult> episodes_;
};

// ---- statistics over recorded experience ----

struct UsageStats {
  std::vector<double> choice_freq;  // length K+|A|, sums to 1 over decisions
  double mean_option_length = 0.0;
  bool option_length_defined = false;
  double option_step_fraction = 0.0;
  long decisions = 0;
  long total_steps = 0;
  long option_invocations = 0;
};

UsageStats option_usage_stats(std::span<const Chunk> chunks, int num_options, int num_actions);

// trajectory trace: step,x,y,action,reward,active_option
void export_trajectory_csv(const std::string& path, std::span<const Chunk> chunks);

// per-cell argmax action and termination probability for one option
struct OptionMap {
  int option = 0;
  std::vector<int> cells;
  std::vector<int> argmax_action;
  std::vector<double> beta;
};

std::vector<OptionMap> option_maps(const nets::NetworkSpec& spec,
                                   const nets::ParamSet& options,
                                   const nets::ParamSet* terminations,
                                   const env::GridLayout& layout);

}  // namespace modac::agent
