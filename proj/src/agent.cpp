#include "modac/agent.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

namespace modac::agent {

using ad::Tensor;

ActorPool::ActorPool(int num_envs, int n_step, int step_cap,
                     std::shared_ptr<EpisodeSource> source, std::uint64_t run_seed)
    : n_step_(n_step), source_(std::move(source)) {
  if (num_envs < 1 || n_step < 1) throw std::runtime_error("actor pool: bad sizes");
  for (int i = 0; i < num_envs; ++i) {
    rng::Stream stream(rng::derive(run_seed, rng::kEnvBase + static_cast<std::uint64_t>(i)));
    auto [layout, task] = source_->next(i, stream);
    Actor a{env::GridEnv(layout, step_cap), std::move(stream), {}, 0, true, false, 0.0, 0, {}};
    a.env.reset(task, a.rng);
    actors_.push_back(std::move(a));
  }
}

std::vector<Chunk> ActorPool::collect(int num_chunks, const ActingNets& nets) {
  std::vector<Chunk> ready;
  ready.reserve(static_cast<size_t>(num_chunks));
  while (static_cast<int>(ready.size()) < num_chunks) step_all(nets, ready);
  return ready;
}

std::vector<EpisodeResult> ActorPool::drain_episodes() {
  std::vector<EpisodeResult> out;
  out.swap(episodes_);
  return out;
}

void ActorPool::step_all(const ActingNets& nets, std::vector<Chunk>& out) {
  ad::RecordPause pause;  // acting never records
  const nets::NetworkSpec& spec = *nets.spec;
  const int K = spec.num_options;
  const int A = spec.num_actions;
  const int n = static_cast<int>(actors_.size());

  // fresh episodes
  for (auto& a : actors_) {
    if (!a.need_reset) continue;
    auto [layout, task] = source_->next(static_cast<int>(&a - actors_.data()), a.rng);
    if (layout.get() != &a.env.layout()) a.env.swap_layout(layout);
    a.env.reset(task, a.rng);
    a.need_decision = true;
    a.need_reset = false;
    a.episode_reward = 0.0;
    a.episode_len = 0;
  }

  // manager decisions
  std::vector<int> deciders;
  for (int i = 0; i < n; ++i)
    if (actors_[static_cast<size_t>(i)].need_decision) deciders.push_back(i);
  if (!deciders.empty()) {
    std::vector<const env::GridLayout*> ls;
    std::vector<int> cells, goals, ids;
    for (int i : deciders) {
      const auto& a = actors_[static_cast<size_t>(i)];
      ls.push_back(&a.env.layout());
      cells.push_back(a.env.agent_cell());
      goals.push_back(a.env.task().goal_cell);
      ids.push_back(a.env.task().task_id);
    }
    auto view = env::make_manager_view(ls, cells, goals, spec.task_encoding, ids);
    auto pv = nets::manager_forward(*nets.manager, spec, view);
    auto probs = ad::softmax_last(pv.logits);
    for (size_t row = 0; row < deciders.size(); ++row) {
      auto& a = actors_[static_cast<size_t>(deciders[row])];
      const std::span<const double> p = probs.data().subspan(row * static_cast<size_t>(K + A),
                                                             static_cast<size_t>(K + A));
      a.active = {a.rng.categorical(p), K};
      a.steps_in_option = 0;
      a.need_decision = false;
    }
  }

  // option action sampling
  std::vector<int> opt_envs;
  for (int i = 0; i < n; ++i)
    if (actors_[static_cast<size_t>(i)].active.is_option()) opt_envs.push_back(i);

  std::vector<int> chosen_action(static_cast<size_t>(n), -1);
  std::vector<double> recorded_opt_reward(static_cast<size_t>(n), 0.0);
  if (!opt_envs.empty()) {
    std::vector<const env::GridLayout*> ls;
    std::vector<int> cells;
    for (int i : opt_envs) {
      ls.push_back(&actors_[static_cast<size_t>(i)].env.layout());
      cells.push_back(actors_[static_cast<size_t>(i)].env.agent_cell());
    }
    auto view = env::make_option_view(ls, cells);
    auto heads = nets::option_forward(*nets.options, spec, view);
    std::vector<Tensor> head_probs;
    for (int k = 0; k < K; ++k) head_probs.push_back(ad::softmax_last(heads.logits[k]));
    std::vector<Tensor> head_rewards;
    if (nets.rewards) head_rewards = nets::option_reward_forward(*nets.rewards, spec, view);
    for (size_t row = 0; row < opt_envs.size(); ++row) {
      auto& a = actors_[static_cast<size_t>(opt_envs[row])];
      const int k = a.active.option_id();
      const std::span<const double> p =
          head_probs[static_cast<size_t>(k)].data().subspan(row * static_cast<size_t>(A),
                                                            static_cast<size_t>(A));
      const int act = a.rng.categorical(p);
      chosen_action[static_cast<size_t>(opt_envs[row])] = act;
      if (nets.rewards)
        recorded_opt_reward[static_cast<size_t>(opt_envs[row])] =
            head_rewards[static_cast<size_t>(k)].data()[row * static_cast<size_t>(A) +
                                                        static_cast<size_t>(act)];
    }
  }
  for (int i = 0; i < n; ++i) {
    auto& a = actors_[static_cast<size_t>(i)];
    if (!a.active.is_option()) chosen_action[static_cast<size_t>(i)] = a.active.primitive_action();
  }

  // environment transition
  std::vector<StepRecord> recs(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto& a = actors_[static_cast<size_t>(i)];
    StepRecord& r = recs[static_cast<size_t>(i)];
    r.layout = a.env.layout_ptr();
    r.state_cell = a.env.agent_cell();
    r.action = chosen_action[static_cast<size_t>(i)];
    r.choice = a.active.value;
    r.decision = a.steps_in_option == 0;
    r.goal_cell = a.env.task().goal_cell;
    r.task_id = a.env.task().task_id;
    const auto res = a.env.step(r.action);
    r.next_cell = a.env.agent_cell();
    r.reward = res.reward;
    r.episode_end = res.done;
    r.truncated = res.truncated;
    r.option_reward = a.active.is_option() && nets.rewards
                          ? recorded_opt_reward[static_cast<size_t>(i)]
                          : r.reward;
    a.episode_reward += res.reward;
    a.episode_len += 1;
    a.steps_in_option += 1;
  }

  // termination query at the successor states
  if (!opt_envs.empty()) {
    std::vector<double> beta_vals(opt_envs.size(), 1.0);
    if (nets.terminations) {
      std::vector<const env::GridLayout*> ls;
      std::vector<int> cells;
      for (int i : opt_envs) {
        ls.push_back(&actors_[static_cast<size_t>(i)].env.layout());
        cells.push_back(recs[static_cast<size_t>(i)].next_cell);
      }
      auto view = env::make_option_view(ls, cells);
      auto betas = nets::option_termination_forward(*nets.terminations, spec, view);
      for (size_t row = 0; row < opt_envs.size(); ++row) {
        const int k = actors_[static_cast<size_t>(opt_envs[row])].active.option_id();
        beta_vals[row] = betas[static_cast<size_t>(k)].data()[row];
      }
    }
    for (size_t row = 0; row < opt_envs.size(); ++row) {
      auto& a = actors_[static_cast<size_t>(opt_envs[row])];
      StepRecord& r = recs[static_cast<size_t>(opt_envs[row])];
      if (nets.terminations) {
        r.beta_value = beta_vals[row];
        r.beta_sample = a.rng.bernoulli(r.beta_value);
      } else {
        // fixed time-scale workers
        r.beta_sample = a.steps_in_option >= nets.fixed_duration;
        r.beta_value = r.beta_sample ? 1.0 : 0.0;
      }
      r.ended_by_termination = r.beta_sample;
    }
  }
  for (int i = 0; i < n; ++i) {
    auto& a = actors_[static_cast<size_t>(i)];
    StepRecord& r = recs[static_cast<size_t>(i)];
    if (!a.active.is_option()) {
      r.beta_value = 1.0;
      r.beta_sample = true;
      r.ended_by_termination = true;
    }
    a.need_decision = r.ended_by_termination || r.episode_end;
    if (r.episode_end) {
      episodes_.push_back({a.episode_reward, a.episode_len});
      a.need_reset = true;
    }
  }

  // buffers and chunk cuts
  frames_ += n;
  for (int i = 0; i < n; ++i) {
    auto& a = actors_[static_cast<size_t>(i)];
    a.buffer.push_back(std::move(recs[static_cast<size_t>(i)]));
    if (static_cast<int>(a.buffer.size()) == n_step_) {
      Chunk ch;
      ch.steps = std::move(a.buffer);
      a.buffer.clear();
      const StepRecord& last = ch.steps.back();
      ch.boot_cell = last.next_cell;
      ch.boot_goal = last.goal_cell;
      ch.boot_task_id = last.task_id;
      ch.boot_terminal = last.episode_end;
      ch.boot_layout = last.layout;
      out.push_back(std::move(ch));
    }
  }
}

UsageStats option_usage_stats(std::span<const Chunk> chunks, int num_options, int num_actions) {
  UsageStats s;
  s.choice_freq.assign(static_cast<size_t>(num_options + num_actions), 0.0);
  long option_steps = 0;
  for (const auto& ch : chunks) {
    for (const auto& r : ch.steps) {
      ++s.total_steps;
      if (r.decision) {
        ++s.decisions;
        s.choice_freq[static_cast<size_t>(r.choice)] += 1.0;
        if (r.choice < num_options) ++s.option_invocations;
      }
      if (r.choice < num_options) ++option_steps;
    }
  }
  if (s.decisions > 0)
    for (auto& f : s.choice_freq) f /= static_cast<double>(s.decisions);
  if (s.option_invocations > 0) {
    s.mean_option_length = static_cast<double>(option_steps) /
                           static_cast<double>(s.option_invocations);
    s.option_length_defined = true;
  }
  if (s.total_steps > 0)
    s.option_step_fraction = static_cast<double>(option_steps) /
                             static_cast<double>(s.total_steps);
  return s;
}

void export_trajectory_csv(const std::string& path, std::span<const Chunk> chunks) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "step,x,y,action,reward,active_option\n";
  long step = 0;
  for (const auto& ch : chunks)
    for (const auto& r : ch.steps) {
      out << step++ << "," << r.layout->cell_x(r.state_cell) << ","
          << r.layout->cell_y(r.state_cell) << "," << r.action << "," << r.reward << ","
          << r.choice << "\n";
    }
}

std::vector<OptionMap> option_maps(const nets::NetworkSpec& spec, const nets::ParamSet& options,
                                   const nets::ParamSet* terminations,
                                   const env::GridLayout& layout) {
  ad::RecordPause pause;
  const auto cells = layout.open_cells();
  auto view = env::make_option_view(layout, cells);
  auto heads = nets::option_forward(options, spec, view);
  std::vector<Tensor> betas;
  if (terminations) betas = nets::option_termination_forward(*terminations, spec, view);
  std::vector<OptionMap> out;
  for (int k = 0; k < spec.num_options; ++k) {
    OptionMap m;
    m.option = k;
    m.cells = cells;
    const auto& logits = heads.logits[static_cast<size_t>(k)];
    for (size_t row = 0; row < cells.size(); ++row) {
      int best = 0;
      for (int a = 1; a < spec.num_actions; ++a)
        if (logits.data()[row * static_cast<size_t>(spec.num_actions) + static_cast<size_t>(a)] >
            logits.data()[row * static_cast<size_t>(spec.num_actions) + static_cast<size_t>(best)])
          best = a;
      m.argmax_action.push_back(best);
      m.beta.push_back(terminations ? betas[static_cast<size_t>(k)].data()[row] : 1.0);
    }
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace modac::agent
