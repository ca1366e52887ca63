#include "modac/baselines.hpp"

#include "learn_common.hpp"

namespace modac::baselines {

using ad::Tensor;
using metalearn::ControlSegment;
using metalearn::InnerUpdateStats;
using metalearn::TrainHp;
namespace detail = metalearn::detail;

InnerUpdateStats flat_step(nets::ParamSet& theta, const nets::NetworkSpec& spec,
                           std::span<const agent::Chunk> batch, const TrainHp& hp,
                           nets::RmsPropState& opt_state) {
  return metalearn::inner_update_manager(theta, spec, batch, hp, /*training_phase=*/false,
                                         opt_state);
}

namespace {

// shared worker update: actor-critic on task rewards over option segments
InnerUpdateStats worker_task_reward_step(nets::ParamSet& theta, const nets::NetworkSpec& spec,
                                         std::span<const agent::Chunk> batch, const TrainHp& hp,
                                         nets::RmsPropState& opt_state) {
  const int K = spec.num_options;
  InnerUpdateStats stats;
  auto segments = metalearn::extract_control_segments(batch, K);
  auto rows = detail::collect_option_rows(segments, K);
  if (rows.total == 0) return stats;

  ad::Tape tape;
  ad::Tape::Scope scope(tape);

  auto sview = detail::state_view(batch, rows.rows);
  Tensor feats = nets::torso_features(theta, spec, sview);
  std::vector<double> boots = detail::worker_boot_values(theta, spec, batch, rows);

  Tensor policy_term, value_term, entropy_term;
  size_t boot_idx = 0;
  for (int k = 0; k < K; ++k) {
    const int off = rows.option_offset[static_cast<size_t>(k)];
    const int nk = rows.option_offset[static_cast<size_t>(k) + 1] - off;
    if (nk == 0) continue;
    std::vector<int> actions;
    for (int i = 0; i < nk; ++i)
      actions.push_back(detail::row_of(batch, rows.rows[static_cast<size_t>(off + i)]).action);

    Tensor feats_k = ad::slice(feats, 0, off, nk);
    Tensor logits = nets::option_policy_head(theta, spec, feats_k, k);
    Tensor v_k = nets::option_value_head(theta, spec, feats_k, k);
    Tensor lsm = ad::log_softmax_last(logits);
    Tensor lp = ad::gather_last(lsm, actions);

    // per-step discounted task-reward returns within each segment
    std::vector<double> g_rows;
    g_rows.reserve(static_cast<size_t>(nk));
    for (const auto* seg : rows.segs[static_cast<size_t>(k)]) {
      std::vector<double> rewards(static_cast<size_t>(seg->len));
      for (int t = 0; t < seg->len; ++t)
        rewards[static_cast<size_t>(t)] = batch[static_cast<size_t>(seg->chunk)]
                                              .steps[static_cast<size_t>(seg->begin + t)]
                                              .reward;
      for (int m = 0; m < seg->len; ++m)
        g_rows.push_back(metalearn::manager_return(
            std::span<const double>(rewards).subspan(static_cast<size_t>(m)), seg->len - m,
            hp.gamma, 0.0, boots[boot_idx], false));
      ++boot_idx;
    }

    std::vector<double> adv(g_rows);
    for (int i = 0; i < nk; ++i) adv[static_cast<size_t>(i)] -= v_k.data()[static_cast<size_t>(i)];
    Tensor pol = ad::sum_all(ad::mul(Tensor::from({nk}, std::move(adv)), lp));
    Tensor verr = ad::sub(v_k, Tensor::from({nk}, std::move(g_rows)));
    Tensor val = ad::sum_all(ad::mul(verr, verr));
    Tensor ent = ad::neg(ad::sum_all(ad::mul(ad::softmax_last(logits), lsm)));
    policy_term = policy_term.defined() ? ad::add(policy_term, pol) : pol;
    value_term = value_term.defined() ? ad::add(value_term, val) : val;
    entropy_term = entropy_term.defined() ? ad::add(entropy_term, ent) : ent;
  }

  const double inv_n = 1.0 / static_cast<double>(rows.total);
  Tensor loss = ad::add(
      ad::add(ad::smul(policy_term, -inv_n),
              ad::smul(value_term, 0.5 * hp.value_coef * inv_n)),
      ad::smul(entropy_term, -hp.entropy_coef * inv_n));
  auto params = theta.tensors();
  auto g = ad::grad(loss, params);
  nets::RmsPropConfig rc{hp.lr, hp.rms_decay, hp.rms_epsilon, 0.0, hp.clip_norm};
  theta = nets::rmsprop_step(theta, g.grads, opt_state, rc);

  stats.applied = true;
  stats.rows = rows.total;
  stats.policy_loss = policy_term.item() * -inv_n;
  stats.value_loss = value_term.item() * 0.5 * hp.value_coef * inv_n;
  stats.entropy = entropy_term.item() * inv_n;
  return stats;
}

// termination loss rows: non-terminal option steps, with the advantage
// coefficient sg(v_w(s') - v_M(s', g) + cost)
struct TerminationBatch {
  detail::OptionRows rows;                 // filtered to non-terminal steps
  std::vector<double> coeff;
  bool empty = true;
};

TerminationBatch termination_batch(const nets::NetworkSpec& spec,
                                   std::span<const agent::Chunk> batch,
                                   const nets::ParamSet& theta, const nets::ParamSet& manager,
                                   double deliberation_cost) {
  const int K = spec.num_options;
  TerminationBatch out;
  auto segments = metalearn::extract_control_segments(batch, K);
  auto all = detail::collect_option_rows(segments, K);
  out.rows.segs = all.segs;
  out.rows.option_offset.push_back(0);
  for (int k = 0; k < K; ++k) {
    const int off = all.option_offset[static_cast<size_t>(k)];
    const int nk = all.option_offset[static_cast<size_t>(k) + 1] - off;
    for (int i = 0; i < nk; ++i) {
      const auto& ref = all.rows[static_cast<size_t>(off + i)];
      if (!detail::row_of(batch, ref).episode_end) out.rows.rows.push_back(ref);
    }
    out.rows.option_offset.push_back(static_cast<int>(out.rows.rows.size()));
  }
  out.rows.total = static_cast<int>(out.rows.rows.size());
  if (out.rows.total == 0) return out;
  out.empty = false;

  ad::RecordPause pause;
  auto nview = detail::successor_view(batch, out.rows.rows);
  Tensor wfeats = nets::torso_features(theta, spec, nview);
  std::vector<Tensor> v_heads;
  for (int k = 0; k < K; ++k) v_heads.push_back(nets::option_value_head(theta, spec, wfeats, k));

  std::vector<const env::GridLayout*> ls;
  std::vector<int> cells, goals, ids;
  for (const auto& ref : out.rows.rows) {
    const auto& rec = detail::row_of(batch, ref);
    ls.push_back(rec.layout.get());
    cells.push_back(rec.next_cell);
    goals.push_back(rec.goal_cell);
    ids.push_back(rec.task_id);
  }
  auto mview = env::make_manager_view(ls, cells, goals, spec.task_encoding, ids);
  Tensor v_m = nets::manager_value_head(manager, nets::manager_features(manager, spec, mview));

  out.coeff.resize(static_cast<size_t>(out.rows.total));
  for (int k = 0; k < K; ++k) {
    const int off = out.rows.option_offset[static_cast<size_t>(k)];
    const int nk = out.rows.option_offset[static_cast<size_t>(k) + 1] - off;
    for (int i = 0; i < nk; ++i) {
      const size_t idx = static_cast<size_t>(off + i);
      out.coeff[idx] = v_heads[static_cast<size_t>(k)].data()[idx] - v_m.data()[idx] +
                       deliberation_cost;
    }
  }
  return out;
}

Tensor termination_loss_graph(const nets::ParamSet& terminations, const nets::NetworkSpec& spec,
                              std::span<const agent::Chunk> batch, const TerminationBatch& tb) {
  auto nview = detail::successor_view(batch, tb.rows.rows);
  Tensor tfeats = nets::torso_features(terminations, spec, nview);
  Tensor loss;
  for (int k = 0; k < spec.num_options; ++k) {
    const int off = tb.rows.option_offset[static_cast<size_t>(k)];
    const int nk = tb.rows.option_offset[static_cast<size_t>(k) + 1] - off;
    if (nk == 0) continue;
    Tensor beta = nets::option_termination_head(terminations, spec,
                                                ad::slice(tfeats, 0, off, nk), k);
    std::vector<double> c(tb.coeff.begin() + off, tb.coeff.begin() + off + nk);
    Tensor term = ad::sum_all(ad::mul(beta, Tensor::from({nk}, std::move(c))));
    loss = loss.defined() ? ad::add(loss, term) : term;
  }
  return ad::smul(loss, 1.0 / static_cast<double>(tb.rows.total));
}

}  // namespace

InnerUpdateStats mlsh_step(nets::ParamSet& theta, const nets::NetworkSpec& spec,
                           std::span<const agent::Chunk> batch, const TrainHp& hp,
                           nets::RmsPropState& opt_state) {
  return worker_task_reward_step(theta, spec, batch, hp, opt_state);
}

InnerUpdateStats option_critic_step(nets::ParamSet& theta, nets::ParamSet& terminations,
                                    const nets::ParamSet& manager,
                                    const nets::NetworkSpec& spec,
                                    std::span<const agent::Chunk> batch, const TrainHp& hp,
                                    double deliberation_cost, nets::RmsPropState& opt_state,
                                    nets::RmsPropState& term_state) {
  // termination coefficients use the pre-update value estimates
  auto tb = termination_batch(spec, batch, theta, manager, deliberation_cost);
  InnerUpdateStats stats = worker_task_reward_step(theta, spec, batch, hp, opt_state);
  if (tb.empty) return stats;
  ad::Tape tape;
  ad::Tape::Scope scope(tape);
  Tensor loss = termination_loss_graph(terminations, spec, batch, tb);
  auto params = terminations.tensors();
  auto g = ad::grad(loss, params);
  nets::RmsPropConfig rc{hp.lr, hp.rms_decay, hp.rms_epsilon, 0.0, hp.clip_norm};
  terminations = nets::rmsprop_step(terminations, g.grads, term_state, rc);
  return stats;
}

double option_critic_termination_loss(const nets::ParamSet& terminations,
                                      const nets::NetworkSpec& spec,
                                      std::span<const agent::Chunk> batch,
                                      const nets::ParamSet& theta,
                                      const nets::ParamSet& manager,
                                      double deliberation_cost) {
  auto tb = termination_batch(spec, batch, theta, manager, deliberation_cost);
  if (tb.empty) return 0.0;
  ad::RecordPause pause;
  return termination_loss_graph(terminations, spec, batch, tb).item();
}

}  // namespace modac::baselines
