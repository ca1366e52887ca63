#include "modac/metalearn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "learn_common.hpp"
#include "modac/baselines.hpp"

namespace modac::metalearn {

using ad::Tensor;

const char* agent_kind_name(AgentKind k) {
  switch (k) {
    case AgentKind::kModac: return "modac";
    case AgentKind::kFlat: return "flat";
    case AgentKind::kMlsh: return "mlsh";
    case AgentKind::kOptionCritic: return "option_critic";
  }
  return "?";
}

AgentKind agent_kind_from_name(const std::string& s) {
  for (AgentKind k : {AgentKind::kModac, AgentKind::kFlat, AgentKind::kMlsh,
                      AgentKind::kOptionCritic})
    if (s == agent_kind_name(k)) return k;
  throw std::runtime_error("unknown agent kind: " + s);
}

std::vector<ControlSegment> extract_control_segments(std::span<const agent::Chunk> chunks,
                                                     int num_options) {
  (void)num_options;
  std::vector<ControlSegment> out;
  for (size_t c = 0; c < chunks.size(); ++c) {
    const auto& steps = chunks[c].steps;
    size_t i = 0;
    while (i < steps.size()) {
      ControlSegment seg;
      seg.chunk = static_cast<int>(c);
      seg.begin = static_cast<int>(i);
      seg.choice = steps[i].choice;
      seg.has_decision = steps[i].decision;
      size_t j = i;
      for (;;) {
        const auto& r = steps[j];
        seg.len = static_cast<int>(j - i + 1);
        seg.ends_episode = r.episode_end;
        seg.cost_applies = r.ended_by_termination;
        ++j;
        if (r.ended_by_termination || r.episode_end || j == steps.size()) break;
        if (steps[j].decision) break;  // safety: a fresh decision always ends the run
      }
      i = j;
      out.push_back(seg);
    }
  }
  return out;
}

namespace detail {

std::vector<double> worker_boot_values(const nets::ParamSet& theta,
                                       const nets::NetworkSpec& spec,
                                       std::span<const agent::Chunk> chunks,
                                       const OptionRows& rows) {
  ad::RecordPause pause;
  const int K = spec.num_options;
  // goal-reaching is the only true terminal; step-cap truncation bootstraps
  auto true_terminal = [&](const ControlSegment& seg) {
    if (!seg.ends_episode) return false;
    return !segment_last(chunks, seg).truncated;
  };
  std::vector<const env::GridLayout*> ls;
  std::vector<int> cells, seg_option;
  for (int k = 0; k < K; ++k)
    for (const auto* seg : rows.segs[static_cast<size_t>(k)]) {
      if (true_terminal(*seg)) continue;
      const auto& last = segment_last(chunks, *seg);
      ls.push_back(last.layout.get());
      cells.push_back(last.next_cell);
      seg_option.push_back(k);
    }
  std::vector<double> nonterm;
  if (!cells.empty()) {
    auto bview = env::make_option_view(ls, cells);
    Tensor bfeats = nets::torso_features(theta, spec, bview);
    std::vector<Tensor> per_head;
    for (int k = 0; k < K; ++k)
      per_head.push_back(nets::option_value_head(theta, spec, bfeats, k));
    for (size_t i = 0; i < cells.size(); ++i)
      nonterm.push_back(per_head[static_cast<size_t>(seg_option[i])].data()[i]);
  }
  std::vector<double> boots;
  size_t next = 0;
  for (int k = 0; k < K; ++k)
    for (const auto* seg : rows.segs[static_cast<size_t>(k)])
      boots.push_back(true_terminal(*seg) ? 0.0 : nonterm[next++]);
  return boots;
}

}  // namespace detail

using detail::collect_option_rows;
using detail::detach_values;
using detail::row_of;
using detail::segment_last;
using detail::state_view;
using detail::successor_view;
using detail::OptionRows;

namespace {

// Per-step manager returns over every chunk row: an n-step window running
// to the episode end or the chunk horizon, with the switching cost folded
// into the per-step rewards wherever a termination fired (training phase).
// Windows bootstrap the manager's value at the cut state; goal-reaching is
// the only true terminal (value zero), step-cap truncations bootstrap.
std::vector<std::vector<double>> manager_returns_all(std::span<const agent::Chunk> chunks,
                                                     const nets::ParamSet& manager,
                                                     const nets::NetworkSpec& spec,
                                                     const TrainHp& hp, bool training_phase) {
  const double cost = training_phase ? hp.switching_cost : 0.0;

  // boot states: the chunk cut plus every truncation inside the chunk
  std::vector<double> chunk_boot(chunks.size(), 0.0);
  std::vector<std::vector<std::pair<int, double>>> trunc_boot(chunks.size());
  {
    ad::RecordPause pause;
    std::vector<const env::GridLayout*> ls;
    std::vector<int> cells, goals, ids;
    std::vector<std::pair<size_t, int>> where;  // (chunk, row or -1 for the cut)
    for (size_t c = 0; c < chunks.size(); ++c) {
      const auto& steps = chunks[c].steps;
      for (size_t t = 0; t < steps.size(); ++t) {
        if (!steps[t].truncated) continue;
        ls.push_back(steps[t].layout.get());
        cells.push_back(steps[t].next_cell);
        goals.push_back(steps[t].goal_cell);
        ids.push_back(steps[t].task_id);
        where.emplace_back(c, static_cast<int>(t));
      }
      if (!chunks[c].boot_terminal) {
        ls.push_back(chunks[c].boot_layout.get());
        cells.push_back(chunks[c].boot_cell);
        goals.push_back(chunks[c].boot_goal);
        ids.push_back(chunks[c].boot_task_id);
        where.emplace_back(c, -1);
      }
    }
    if (!cells.empty()) {
      auto view = env::make_manager_view(ls, cells, goals, spec.task_encoding, ids);
      Tensor v = nets::manager_value_head(manager, nets::manager_features(manager, spec, view));
      for (size_t i = 0; i < where.size(); ++i) {
        if (where[i].second < 0)
          chunk_boot[where[i].first] = v.data()[i];
        else
          trunc_boot[where[i].first].emplace_back(where[i].second, v.data()[i]);
      }
    }
  }

  std::vector<std::vector<double>> out(chunks.size());
  for (size_t c = 0; c < chunks.size(); ++c) {
    const auto& steps = chunks[c].steps;
    const int t_len = static_cast<int>(steps.size());
    std::vector<double> modified(static_cast<size_t>(t_len));
    for (int t = 0; t < t_len; ++t)
      modified[static_cast<size_t>(t)] =
          steps[static_cast<size_t>(t)].reward -
          (steps[static_cast<size_t>(t)].ended_by_termination ? cost : 0.0);
    auto trunc_value = [&](int row) {
      for (const auto& [r, v] : trunc_boot[c])
        if (r == row) return v;
      return 0.0;
    };
    out[c].resize(static_cast<size_t>(t_len));
    for (int t = 0; t < t_len; ++t) {
      int e = t;
      while (e + 1 < t_len && !steps[static_cast<size_t>(e)].episode_end) ++e;
      const int n = e - t + 1;
      double boot = chunk_boot[c];
      if (steps[static_cast<size_t>(e)].episode_end)
        boot = steps[static_cast<size_t>(e)].truncated ? trunc_value(e) : 0.0;
      out[c][static_cast<size_t>(t)] = manager_return(
          std::span<const double>(modified).subspan(static_cast<size_t>(t)), n, hp.gamma,
          0.0, boot, false);
    }
  }
  return out;
}

}  // namespace

InnerUpdateStats inner_update_option(nets::ParamSet& theta, const nets::NetworkSpec& spec,
                                     const nets::ParamSet& eta_r, const nets::ParamSet& eta_beta,
                                     std::span<const agent::Chunk> batch, const TrainHp& hp,
                                     nets::RmsPropState& opt_state,
                                     const InnerUpdateOptions& opts) {
  const int K = spec.num_options;
  InnerUpdateStats stats;
  auto segments = extract_control_segments(batch, K);
  OptionRows rows = collect_option_rows(segments, K);
  if (rows.total == 0) return stats;

  // local tape when the caller did not open one for the meta path
  std::unique_ptr<ad::Tape> local_tape;
  std::unique_ptr<ad::Tape::Scope> local_scope;
  if (!opts.differentiable) {
    local_tape = std::make_unique<ad::Tape>();
    local_scope = std::make_unique<ad::Tape::Scope>(*local_tape);
  } else if (ad::Tape::current() == nullptr) {
    throw std::runtime_error("inner_update_option: differentiable update needs an open tape");
  }

  auto sview = state_view(batch, rows.rows);
  auto nview = successor_view(batch, rows.rows);
  Tensor pol_feats = nets::torso_features(theta, spec, sview);
  Tensor rew_feats = nets::torso_features(eta_r, spec, sview);
  Tensor term_feats = nets::torso_features(eta_beta, spec, nview);

  // bootstrap values per segment, stop-gradiented (zero at episode ends)
  std::vector<double> boots = detail::worker_boot_values(theta, spec, batch, rows);
  if (opts.replay) boots = opts.replay->v_boot;
  if (opts.record) opts.record->v_boot = boots;

  Tensor policy_term, value_term, entropy_term;
  std::vector<double> baseline_all, target_all;
  size_t boot_idx = 0;
  for (int k = 0; k < K; ++k) {
    const int off = rows.option_offset[static_cast<size_t>(k)];
    const int nk = rows.option_offset[static_cast<size_t>(k) + 1] - off;
    if (nk == 0) continue;
    std::vector<int> actions;
    actions.reserve(static_cast<size_t>(nk));
    for (int i = 0; i < nk; ++i)
      actions.push_back(row_of(batch, rows.rows[static_cast<size_t>(off + i)]).action);

    Tensor feats_k = ad::slice(pol_feats, 0, off, nk);
    Tensor logits = nets::option_policy_head(theta, spec, feats_k, k);
    Tensor v_k = nets::option_value_head(theta, spec, feats_k, k);
    Tensor lsm = ad::log_softmax_last(logits);
    Tensor lp = ad::gather_last(lsm, actions);

    Tensor r_all = nets::option_reward_head(eta_r, spec, ad::slice(rew_feats, 0, off, nk), k);
    Tensor r_a = ad::gather_last(r_all, actions);
    Tensor beta = nets::option_termination_head(eta_beta, spec,
                                                ad::slice(term_feats, 0, off, nk), k);

    std::vector<Tensor> g_parts;
    int seg_off = 0;
    for (const auto* seg : rows.segs[static_cast<size_t>(k)]) {
      Tensor r_seg = ad::slice(r_a, 0, seg_off, seg->len);
      Tensor b_seg = ad::slice(beta, 0, seg_off, seg->len);
      g_parts.push_back(option_returns_graph(r_seg, b_seg, boots[boot_idx++],
                                             hp.beta_running_product));
      seg_off += seg->len;
    }
    Tensor g_k = g_parts.size() == 1 ? g_parts[0] : ad::concat(g_parts, 0);

    std::vector<double> baseline = detach_values(v_k);
    std::vector<double> target = detach_values(g_k);
    if (opts.replay) {
      baseline.assign(opts.replay->v_baseline.begin() + static_cast<std::ptrdiff_t>(off),
                      opts.replay->v_baseline.begin() + static_cast<std::ptrdiff_t>(off + nk));
      target.assign(opts.replay->value_target.begin() + static_cast<std::ptrdiff_t>(off),
                    opts.replay->value_target.begin() + static_cast<std::ptrdiff_t>(off + nk));
    }
    baseline_all.insert(baseline_all.end(), baseline.begin(), baseline.end());
    target_all.insert(target_all.end(), target.begin(), target.end());

    // advantage: live through the option returns, constant in theta
    Tensor adv = ad::sub(g_k, Tensor::from({nk}, std::move(baseline)));
    Tensor pol = ad::sum_all(ad::mul(adv, lp));
    Tensor verr = ad::sub(v_k, Tensor::from({nk}, std::move(target)));
    Tensor val = ad::sum_all(ad::mul(verr, verr));
    Tensor ent = ad::neg(ad::sum_all(ad::mul(ad::softmax_last(logits), lsm)));

    policy_term = policy_term.defined() ? ad::add(policy_term, pol) : pol;
    value_term = value_term.defined() ? ad::add(value_term, val) : val;
    entropy_term = entropy_term.defined() ? ad::add(entropy_term, ent) : ent;
  }
  if (opts.record) {
    opts.record->v_baseline = baseline_all;
    opts.record->value_target = target_all;
  }

  const double inv_n = 1.0 / static_cast<double>(rows.total);
  Tensor loss = ad::add(
      ad::add(ad::smul(policy_term, -inv_n),
              ad::smul(value_term, 0.5 * hp.value_coef * inv_n)),
      ad::smul(entropy_term, -hp.entropy_coef * inv_n));

  auto params = theta.tensors();
  auto g = ad::grad(loss, params, {.create_graph = opts.differentiable});
  nets::RmsPropConfig rc{hp.lr, hp.rms_decay, hp.rms_epsilon, 0.0, hp.clip_norm};
  theta = nets::rmsprop_step(theta, g.grads, opt_state, rc,
                             opts.replay ? &opts.replay->rms_denom : nullptr,
                             opts.record ? &opts.record->rms_denom : nullptr);

  stats.applied = true;
  stats.rows = rows.total;
  stats.policy_loss = policy_term.item() * -inv_n;
  stats.value_loss = value_term.item() * 0.5 * hp.value_coef * inv_n;
  stats.entropy = entropy_term.item() * inv_n;
  return stats;
}

InnerUpdateStats inner_update_manager(nets::ParamSet& theta_m, const nets::NetworkSpec& spec,
                                      std::span<const agent::Chunk> batch, const TrainHp& hp,
                                      bool training_phase, nets::RmsPropState& opt_state) {
  InnerUpdateStats stats;
  std::vector<detail::RowRef> decided;
  for (size_t c = 0; c < batch.size(); ++c)
    for (size_t t = 0; t < batch[c].steps.size(); ++t)
      if (batch[c].steps[t].decision)
        decided.push_back({static_cast<int>(c), static_cast<int>(t)});
  if (decided.empty()) return stats;

  ad::Tape tape;
  ad::Tape::Scope scope(tape);

  const auto returns = manager_returns_all(batch, theta_m, spec, hp, training_phase);
  std::vector<double> g_values(decided.size());
  for (size_t i = 0; i < decided.size(); ++i)
    g_values[i] = returns[static_cast<size_t>(decided[i].chunk)]
                         [static_cast<size_t>(decided[i].step)];

  // forward on the decision states
  std::vector<const env::GridLayout*> ls;
  std::vector<int> cells, goals, ids, choices;
  for (const auto& ref : decided) {
    const auto& rec = row_of(batch, ref);
    ls.push_back(rec.layout.get());
    cells.push_back(rec.state_cell);
    goals.push_back(rec.goal_cell);
    ids.push_back(rec.task_id);
    choices.push_back(rec.choice);
  }
  auto view = env::make_manager_view(ls, cells, goals, spec.task_encoding, ids);
  Tensor feats = nets::manager_features(theta_m, spec, view);
  Tensor logits = nets::manager_policy_head(theta_m, feats);
  Tensor v = nets::manager_value_head(theta_m, feats);
  Tensor lsm = ad::log_softmax_last(logits);
  Tensor lp = ad::gather_last(lsm, choices);

  const int n = static_cast<int>(decided.size());
  std::vector<double> adv(g_values);
  for (size_t i = 0; i < adv.size(); ++i) adv[i] -= v.data()[i];
  Tensor pol = ad::sum_all(ad::mul(Tensor::from({n}, std::move(adv)), lp));
  Tensor verr = ad::sub(v, Tensor::from({n}, std::move(g_values)));
  Tensor val = ad::sum_all(ad::mul(verr, verr));
  Tensor ent = ad::neg(ad::sum_all(ad::mul(ad::softmax_last(logits), lsm)));

  const double inv_n = 1.0 / n;
  Tensor loss =
      ad::add(ad::add(ad::smul(pol, -inv_n), ad::smul(val, 0.5 * hp.value_coef * inv_n)),
              ad::smul(ent, -hp.entropy_coef * inv_n));

  auto params = theta_m.tensors();
  auto g = ad::grad(loss, params);
  nets::RmsPropConfig rc{hp.lr, hp.rms_decay, hp.rms_epsilon, 0.0, hp.clip_norm};
  theta_m = nets::rmsprop_step(theta_m, g.grads, opt_state, rc);

  stats.applied = true;
  stats.rows = n;
  stats.policy_loss = pol.item() * -inv_n;
  stats.value_loss = val.item() * 0.5 * hp.value_coef * inv_n;
  stats.entropy = ent.item() * inv_n;
  return stats;
}

ad::Tensor meta_objective_graph(const nets::ParamSet& theta_updated,
                                const nets::ParamSet& manager, const nets::NetworkSpec& spec,
                                std::span<const agent::Chunk> validation, const TrainHp& hp,
                                bool training_phase, int* rows_out) {
  const int K = spec.num_options;
  auto segments = extract_control_segments(validation, K);
  OptionRows rows = collect_option_rows(segments, K);
  if (rows_out) *rows_out = rows.total;
  if (rows.total == 0) return {};

  // per-step manager returns and the manager's value baseline, all
  // treated as constants of the outer objective
  std::vector<double> outer_adv(static_cast<size_t>(rows.total), 0.0);
  {
    ad::RecordPause pause;
    Tensor v_rows;
    {
      std::vector<const env::GridLayout*> ls;
      std::vector<int> cells, goals, ids;
      for (const auto& ref : rows.rows) {
        const auto& rec = row_of(validation, ref);
        ls.push_back(rec.layout.get());
        cells.push_back(rec.state_cell);
        goals.push_back(rec.goal_cell);
        ids.push_back(rec.task_id);
      }
      auto view = env::make_manager_view(ls, cells, goals, spec.task_encoding, ids);
      Tensor feats = nets::manager_features(manager, spec, view);
      v_rows = nets::manager_value_head(manager, feats);
    }
    const auto returns = manager_returns_all(validation, manager, spec, hp, training_phase);
    for (int i = 0; i < rows.total; ++i) {
      const auto& ref = rows.rows[static_cast<size_t>(i)];
      outer_adv[static_cast<size_t>(i)] =
          returns[static_cast<size_t>(ref.chunk)][static_cast<size_t>(ref.step)] -
          v_rows.data()[static_cast<size_t>(i)];
    }
  }

  // validation log-probs under the updated option policies
  auto sview = state_view(validation, rows.rows);
  Tensor pol_feats = nets::torso_features(theta_updated, spec, sview);
  Tensor objective;
  for (int k = 0; k < K; ++k) {
    const int off = rows.option_offset[static_cast<size_t>(k)];
    const int nk = rows.option_offset[static_cast<size_t>(k) + 1] - off;
    if (nk == 0) continue;
    std::vector<int> actions;
    std::vector<double> adv;
    for (int i = 0; i < nk; ++i) {
      actions.push_back(row_of(validation, rows.rows[static_cast<size_t>(off + i)]).action);
      adv.push_back(outer_adv[static_cast<size_t>(off + i)]);
    }
    Tensor logits = nets::option_policy_head(theta_updated, spec,
                                             ad::slice(pol_feats, 0, off, nk), k);
    Tensor lp = ad::gather_last(ad::log_softmax_last(logits), actions);
    Tensor term = ad::sum_all(ad::mul(Tensor::from({nk}, std::move(adv)), lp));
    objective = objective.defined() ? ad::add(objective, term) : term;
  }
  return ad::smul(objective, 1.0 / static_cast<double>(rows.total));
}

MetaUpdateStats meta_update(nets::ParamSet& eta_r, nets::ParamSet& eta_beta,
                            const nets::ParamSet& theta_updated,
                            const nets::ParamSet& manager, const nets::NetworkSpec& spec,
                            std::span<const agent::Chunk> validation, const TrainHp& hp,
                            bool training_phase, nets::RmsPropState& r_state,
                            nets::RmsPropState& b_state) {
  MetaUpdateStats stats;

  ad::Tape* tape = ad::Tape::current();
  if (tape == nullptr)
    throw std::runtime_error("meta_update: no tape open; inner updates were not recorded");
  bool live = false;
  for (const auto& [n, t] : theta_updated.entries)
    if (t.impl()->tape == tape && t.impl()->node >= 0) live = true;
  if (!live)
    throw std::runtime_error(
        "meta_update: updated option parameters are not differentiable (no tape path)");

  auto eta_tensors = eta_r.tensors();
  auto beta_tensors = eta_beta.tensors();
  std::vector<Tensor> wrt(eta_tensors);
  wrt.insert(wrt.end(), beta_tensors.begin(), beta_tensors.end());

  nets::RmsPropConfig rc{hp.meta_lr, hp.rms_decay, hp.rms_epsilon, 0.0, 0.0};
  Tensor j_mean = meta_objective_graph(theta_updated, manager, spec, validation, hp,
                                       training_phase);
  if (!j_mean.defined()) {
    // zero meta-update, flagged: statistics decay, parameters stay put
    std::vector<Tensor> zr, zb;
    for (const auto& [n, t] : eta_r.entries) zr.push_back(Tensor::zeros(t.shape()));
    for (const auto& [n, t] : eta_beta.entries) zb.push_back(Tensor::zeros(t.shape()));
    eta_r = nets::rmsprop_step(eta_r, zr, r_state, rc);
    eta_beta = nets::rmsprop_step(eta_beta, zb, b_state, rc);
    return stats;
  }
  stats.had_option_steps = true;
  stats.outer_objective = j_mean.item();

  auto g = ad::grad(ad::neg(j_mean), wrt);
  stats.grad_norm = ad::l2_norm(g.grads);
  double scale = 1.0;
  if (hp.meta_clip_norm > 0.0 && stats.grad_norm > hp.meta_clip_norm)
    scale = hp.meta_clip_norm / stats.grad_norm;
  std::vector<Tensor> gr, gb;
  for (size_t i = 0; i < eta_tensors.size(); ++i)
    gr.push_back(ad::smul(g.grads[i].detached(), scale));
  for (size_t i = 0; i < beta_tensors.size(); ++i)
    gb.push_back(ad::smul(g.grads[eta_tensors.size() + i].detached(), scale));
  eta_r = nets::rmsprop_step(eta_r, gr, r_state, rc);
  eta_beta = nets::rmsprop_step(eta_beta, gb, b_state, rc);
  return stats;
}

// ---- driver ----

ParamBundle init_params(const DriverConfig& cfg) {
  ParamBundle b{cfg.spec, {}, {}, {}, {}};
  rng::Stream ms(rng::derive(cfg.seed, rng::kManagerInit));
  b.manager = nets::make_manager_params(cfg.spec, ms);
  const bool has_options = cfg.spec.num_options > 0 && cfg.kind != AgentKind::kFlat;
  if (has_options) {
    rng::Stream os(rng::derive(cfg.seed, rng::kOptionInit));
    b.options = nets::make_option_policy_params(cfg.spec, os);
    if (cfg.kind == AgentKind::kModac) {
      rng::Stream rs(rng::derive(cfg.seed, rng::kOptionRewardInit));
      b.rewards = nets::make_option_reward_params(cfg.spec, rs);
    }
    if (cfg.kind == AgentKind::kModac || cfg.kind == AgentKind::kOptionCritic) {
      rng::Stream ts(rng::derive(cfg.seed, rng::kOptionTerminationInit));
      b.terminations = nets::make_option_termination_params(cfg.spec, ts);
    }
  }
  return b;
}

PhaseResult run_phase(const DriverConfig& cfg, const ParamBundle* initial, bool freeze_options,
                      const std::function<void(const MetricsRow&)>& on_metrics,
                      const std::function<void(long, const ParamBundle&)>& on_checkpoint,
                      long checkpoint_every) {
  if (cfg.frame_budget <= 0) throw std::runtime_error("frame budget must be positive");
  if (!cfg.source) throw std::runtime_error("driver needs an episode source");
  if (cfg.spec.num_actions != env::kNumActions)
    throw std::runtime_error("spec num_actions must match the gridworld action set");

  PhaseResult result;
  result.params = initial ? *initial : init_params(cfg);
  ParamBundle& b = result.params;
  const int K = cfg.spec.num_options;
  const int A = cfg.spec.num_actions;
  const bool has_options = K > 0 && b.options.has_value();
  const bool meta_on = cfg.kind == AgentKind::kModac && has_options && !freeze_options &&
                       b.rewards.has_value() && b.terminations.has_value();

  nets::RmsPropState rms_m = nets::RmsPropState::init(b.manager);
  nets::RmsPropState rms_o, rms_r, rms_b, rms_t;
  if (has_options) rms_o = nets::RmsPropState::init(*b.options);
  if (meta_on) {
    rms_r = nets::RmsPropState::init(*b.rewards);
    rms_b = nets::RmsPropState::init(*b.terminations);
  }
  if (cfg.kind == AgentKind::kOptionCritic && b.terminations)
    rms_t = nets::RmsPropState::init(*b.terminations);

  const std::uint64_t freeze_hash_opts = has_options ? nets::param_hash(*b.options) : 0;
  const std::uint64_t freeze_hash_term =
      b.terminations ? nets::param_hash(*b.terminations) : 0;

  agent::ActorPool pool(cfg.num_envs, cfg.n_step, cfg.step_cap, cfg.source, cfg.seed);
  long next_ckpt = checkpoint_every > 0 ? checkpoint_every : cfg.frame_budget + 1;

  while (pool.frames() < cfg.frame_budget) {
    ad::Tape meta_tape;
    std::optional<ad::Tape::Scope> scope;
    if (meta_on) scope.emplace(meta_tape);

    nets::ParamSet theta_live;
    if (has_options) theta_live = *b.options;

    std::vector<agent::Chunk> iter_chunks;
    InnerUpdateStats opt_stats, man_stats;
    MetaUpdateStats meta_stats;

    for (int l = 0; l < cfg.hp.inner_steps; ++l) {
      agent::ActingNets an;
      an.spec = &cfg.spec;
      an.manager = &b.manager;
      an.options = has_options ? &theta_live : nullptr;
      an.rewards = cfg.kind == AgentKind::kModac && b.rewards ? &*b.rewards : nullptr;
      an.terminations = b.terminations ? &*b.terminations : nullptr;
      an.fixed_duration = cfg.kind == AgentKind::kMlsh ? cfg.mlsh_duration : 0;
      auto batch = pool.collect(cfg.batch_size, an);

      if (has_options && !freeze_options) {
        switch (cfg.kind) {
          case AgentKind::kModac: {
            InnerUpdateOptions o;
            o.differentiable = meta_on && (!cfg.hp.meta_last_step_only ||
                                           l + 1 == cfg.hp.inner_steps);
            opt_stats = inner_update_option(theta_live, cfg.spec, *b.rewards, *b.terminations,
                                            batch, cfg.hp, rms_o, o);
            break;
          }
          case AgentKind::kMlsh:
            opt_stats = baselines::mlsh_step(theta_live, cfg.spec, batch, cfg.hp, rms_o);
            break;
          case AgentKind::kOptionCritic:
            opt_stats = baselines::option_critic_step(theta_live, *b.terminations, b.manager,
                                                      cfg.spec, batch, cfg.hp,
                                                      cfg.oc_deliberation_cost, rms_o, rms_t);
            break;
          case AgentKind::kFlat:
            break;
        }
      }
      man_stats = inner_update_manager(b.manager, cfg.spec, batch, cfg.hp,
                                       cfg.training_phase, rms_m);
      for (auto& c : batch) iter_chunks.push_back(std::move(c));
    }

    if (meta_on) {
      agent::ActingNets an;
      an.spec = &cfg.spec;
      an.manager = &b.manager;
      an.options = &theta_live;
      an.rewards = &*b.rewards;
      an.terminations = &*b.terminations;
      auto vbatch = pool.collect(cfg.batch_size, an);
      meta_stats = meta_update(*b.rewards, *b.terminations, theta_live, b.manager, cfg.spec,
                               vbatch, cfg.hp, cfg.training_phase, rms_r, rms_b);
      for (auto& c : vbatch) iter_chunks.push_back(std::move(c));
    }

    if (has_options && !freeze_options) b.options = theta_live.detached();

    auto usage = agent::option_usage_stats(iter_chunks, K, A);
    auto episodes = pool.drain_episodes();
    MetricsRow row;
    row.frames = pool.frames();
    if (!episodes.empty()) {
      double sum = 0.0;
      for (const auto& e : episodes) sum += e.total_reward;
      row.episode_return_mean = sum / static_cast<double>(episodes.size());
      if (episodes.size() > 1) {
        double ss = 0.0;
        for (const auto& e : episodes) {
          const double d = e.total_reward - row.episode_return_mean;
          ss += d * d;
        }
        row.episode_return_sem = std::sqrt(ss / static_cast<double>(episodes.size() - 1)) /
                                 std::sqrt(static_cast<double>(episodes.size()));
      }
    }
    row.option_frac = usage.option_step_fraction;
    row.mean_option_len = usage.mean_option_length;
    row.choice_hist = usage.choice_freq;
    row.meta_grad_norm = meta_stats.grad_norm;
    row.loss_policy = opt_stats.policy_loss + man_stats.policy_loss;
    row.loss_value = opt_stats.value_loss + man_stats.value_loss;
    result.metrics.push_back(row);
    if (on_metrics) on_metrics(row);

    if (on_checkpoint && pool.frames() >= next_ckpt) {
      on_checkpoint(pool.frames(), b);
      next_ckpt += checkpoint_every;
    }
  }

  if (freeze_options) {
    if (has_options && nets::param_hash(*b.options) != freeze_hash_opts)
      throw std::logic_error("frozen option parameters changed during the phase");
    if (b.terminations && nets::param_hash(*b.terminations) != freeze_hash_term)
      throw std::logic_error("frozen termination parameters changed during the phase");
  }

  result.frames = pool.frames();
  return result;
}

}  // namespace modac::metalearn
