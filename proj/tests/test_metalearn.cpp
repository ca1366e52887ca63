#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "modac/baselines.hpp"
#include "modac/checks.hpp"
#include "modac/metalearn.hpp"

using namespace modac;
using ad::Tensor;

namespace {

constexpr const char* kTinyMap =
    "#######\n"
    "#..#..#\n"
    "#.....#\n"
    "#..#..#\n"
    "#######\n";

struct World {
  env::MultiTaskGrid grid;
  nets::NetworkSpec spec;
  metalearn::DriverConfig dc;
  metalearn::ParamBundle bundle;
  std::shared_ptr<agent::EpisodeSource> source;
};

World tiny_world(int K, std::uint64_t seed, metalearn::AgentKind kind = metalearn::AgentKind::kModac) {
  World w;
  w.grid = env::parse_grid_text(kTinyMap);
  const auto open = w.grid.layout->open_cells();
  w.grid.train_tasks = {{open[0], env::TaskSpec::Phase::kTrain, 0},
                        {open.back(), env::TaskSpec::Phase::kTrain, 1}};
  w.spec.torso = nets::Torso::kMlp;
  w.spec.grid_h = w.grid.layout->height;
  w.spec.grid_w = w.grid.layout->width;
  w.spec.mlp_hidden = {4};
  w.spec.num_options = K;
  w.spec.num_actions = 4;
  w.dc.kind = kind;
  w.dc.spec = w.spec;
  w.dc.seed = seed;
  w.dc.num_envs = 2;
  w.dc.n_step = 8;
  w.dc.batch_size = 3;
  w.dc.step_cap = 30;
  w.dc.source = std::make_shared<agent::FixedLayoutSource>(w.grid.layout, w.grid.train_tasks);
  w.bundle = metalearn::init_params(w.dc);
  return w;
}

std::vector<agent::Chunk> collect(World& w, int chunks, std::uint64_t seed) {
  agent::ActingNets an;
  an.spec = &w.spec;
  an.manager = &w.bundle.manager;
  an.options = w.bundle.options ? &*w.bundle.options : nullptr;
  an.rewards = w.bundle.rewards ? &*w.bundle.rewards : nullptr;
  an.terminations = w.bundle.terminations ? &*w.bundle.terminations : nullptr;
  agent::ActorPool pool(w.dc.num_envs, w.dc.n_step, w.dc.step_cap, w.dc.source, seed);
  return pool.collect(chunks, an);
}

}  // namespace

TEST_CASE("control segment extraction") {
  auto w = tiny_world(2, 5);
  auto batch = collect(w, 4, 5);
  auto segs = metalearn::extract_control_segments(batch, 2);
  REQUIRE(!segs.empty());
  long covered = 0;
  for (const auto& s : segs) {
    covered += s.len;
    const auto& chunk = batch[static_cast<size_t>(s.chunk)];
    for (int t = 0; t < s.len; ++t)
      CHECK(chunk.steps[static_cast<size_t>(s.begin + t)].choice == s.choice);
    // interior rows never carry a decision or a termination
    for (int t = 0; t + 1 < s.len; ++t) {
      const auto& r = chunk.steps[static_cast<size_t>(s.begin + t)];
      CHECK_FALSE(r.ended_by_termination);
      CHECK_FALSE(r.episode_end);
    }
    if (s.has_decision) CHECK(chunk.steps[static_cast<size_t>(s.begin)].decision);
    const auto& last = chunk.steps[static_cast<size_t>(s.begin + s.len - 1)];
    CHECK(s.cost_applies == last.ended_by_termination);
    CHECK(s.ends_episode == last.episode_end);
  }
  CHECK(covered == static_cast<long>(batch.size()) * 8);
}

// Reconstructs the inner option loss from its definition with frozen
// stop-gradient constants, finite-differences it over theta, applies the
// optimizer arithmetic by hand and compares against the implementation.
TEST_CASE("inner option update matches a finite-difference oracle of its loss") {
  auto w = tiny_world(2, 11);
  auto batch = collect(w, 3, 11);
  metalearn::TrainHp hp;
  hp.lr = 0.01;
  hp.clip_norm = 40.0;

  // reference pass records the stop-gradient constants
  metalearn::InnerFreeze freeze;
  nets::ParamSet theta_ref = w.bundle.options->detached();
  auto rms_ref = nets::RmsPropState::init(theta_ref);
  {
    metalearn::InnerUpdateOptions o;
    o.record = &freeze;
    nets::ParamSet stepped = theta_ref;
    auto st = metalearn::inner_update_option(stepped, w.spec, *w.bundle.rewards,
                                             *w.bundle.terminations, batch, hp, rms_ref, o);
    REQUIRE(st.applied);
    theta_ref = stepped;  // implementation result
  }

  // the loss as a pure function of theta, every sg() pinned from the freeze
  auto segs = metalearn::extract_control_segments(batch, 2);
  auto loss_value = [&](const nets::ParamSet& theta) {
    ad::RecordPause pause;
    double policy = 0, value = 0, entropy = 0;
    int rows = 0;
    size_t flat_row = 0, boot_idx = 0;
    for (int k = 0; k < 2; ++k) {
      for (const auto& seg : segs) {
        if (seg.choice != k) continue;
        std::vector<int> cells, actions;
        std::vector<const env::GridLayout*> ls;
        const auto& chunk = batch[static_cast<size_t>(seg.chunk)];
        for (int t = 0; t < seg.len; ++t) {
          const auto& rec = chunk.steps[static_cast<size_t>(seg.begin + t)];
          cells.push_back(rec.state_cell);
          actions.push_back(rec.action);
          ls.push_back(rec.layout.get());
        }
        auto view = env::make_option_view(ls, cells);
        Tensor feats = nets::torso_features(theta, w.spec, view);
        Tensor logits = nets::option_policy_head(theta, w.spec, feats, k);
        Tensor v = nets::option_value_head(theta, w.spec, feats, k);
        Tensor lsm = ad::log_softmax_last(logits);
        Tensor probs = ad::softmax_last(logits);
        // option rewards/betas at the reference eta (constants w.r.t. theta)
        std::vector<int> next_cells;
        for (int t = 0; t < seg.len; ++t)
          next_cells.push_back(chunk.steps[static_cast<size_t>(seg.begin + t)].next_cell);
        auto nview = env::make_option_view(ls, next_cells);
        Tensor r_net = nets::option_reward_head(
            *w.bundle.rewards, w.spec,
            nets::torso_features(*w.bundle.rewards, w.spec, view), k);
        Tensor beta = nets::option_termination_head(
            *w.bundle.terminations, w.spec,
            nets::torso_features(*w.bundle.terminations, w.spec, nview), k);
        std::vector<double> rv, bv;
        for (int t = 0; t < seg.len; ++t) {
          rv.push_back(r_net.data()[static_cast<size_t>(t) * 4 +
                                    static_cast<size_t>(actions[static_cast<size_t>(t)])]);
          bv.push_back(beta.data()[static_cast<size_t>(t)]);
        }
        auto g_all = metalearn::option_returns_all(rv, bv, freeze.v_boot[boot_idx]);
        ++boot_idx;
        for (int t = 0; t < seg.len; ++t) {
          const double adv = g_all[static_cast<size_t>(t)] - freeze.v_baseline[flat_row];
          const double lp =
              lsm.data()[static_cast<size_t>(t) * 4 +
                         static_cast<size_t>(actions[static_cast<size_t>(t)])];
          policy += adv * lp;
          const double verr =
              v.data()[static_cast<size_t>(t)] - freeze.value_target[flat_row];
          value += verr * verr;
          for (int a = 0; a < 4; ++a)
            entropy -= probs.data()[static_cast<size_t>(t) * 4 + static_cast<size_t>(a)] *
                       lsm.data()[static_cast<size_t>(t) * 4 + static_cast<size_t>(a)];
          ++flat_row;
          ++rows;
        }
      }
    }
    return (-policy + 0.5 * hp.value_coef * value - hp.entropy_coef * entropy) / rows;
  };

  // finite differences over every parameter of theta
  nets::ParamSet theta0 = w.bundle.options->detached();
  auto flat = theta0.flatten();
  std::vector<double> grad_fd(flat.size());
  const double h = 1e-6;
  for (size_t i = 0; i < flat.size(); ++i) {
    auto fp = flat, fm = flat;
    fp[i] += h;
    fm[i] -= h;
    nets::ParamSet tp = theta0.detached();
    tp.unflatten(fp);
    nets::ParamSet tm = theta0.detached();
    tm.unflatten(fm);
    grad_fd[i] = (loss_value(tp) - loss_value(tm)) / (2 * h);
  }

  // optimizer arithmetic by hand on a fresh accumulator
  double norm = 0;
  for (double g : grad_fd) norm += g * g;
  norm = std::sqrt(norm);
  const double scale = norm > hp.clip_norm ? hp.clip_norm / norm : 1.0;
  std::vector<double> expected(flat.size());
  for (size_t i = 0; i < flat.size(); ++i) {
    const double gc = grad_fd[i] * scale;
    const double acc = (1.0 - hp.rms_decay) * gc * gc;
    expected[i] = flat[i] - hp.lr * gc / std::sqrt(acc + hp.rms_epsilon);
  }

  auto impl = theta_ref.flatten();
  REQUIRE(impl.size() == expected.size());
  for (size_t i = 0; i < impl.size(); ++i)
    CHECK(std::fabs(impl[i] - expected[i]) <= 1e-8);
}

TEST_CASE("manager update matches a finite-difference oracle of its loss") {
  auto w = tiny_world(2, 13);
  auto batch = collect(w, 3, 13);
  metalearn::TrainHp hp;
  hp.lr = 0.01;

  // decision rows and their frozen return targets: an n-step window to the
  // episode end or the chunk cut, switching cost subtracted from the reward
  // at every step whose control terminated
  struct Row {
    int chunk, step;
  };
  std::vector<Row> decided;
  for (size_t c = 0; c < batch.size(); ++c)
    for (size_t t = 0; t < batch[c].steps.size(); ++t)
      if (batch[c].steps[t].decision)
        decided.push_back({static_cast<int>(c), static_cast<int>(t)});
  REQUIRE(!decided.empty());

  nets::ParamSet m0 = w.bundle.manager.detached();
  std::vector<double> g_target(decided.size());
  {
    ad::RecordPause pause;
    for (size_t i = 0; i < decided.size(); ++i) {
      const auto& chunk = batch[static_cast<size_t>(decided[i].chunk)];
      const int t0 = decided[i].step;
      const int t_len = static_cast<int>(chunk.steps.size());
      int e = t0;
      while (e + 1 < t_len && !chunk.steps[static_cast<size_t>(e)].episode_end) ++e;
      double g = 0.0, gp = 1.0;
      for (int t = t0; t <= e; ++t) {
        const auto& rec = chunk.steps[static_cast<size_t>(t)];
        gp *= hp.gamma;
        g += gp * (rec.reward - (rec.ended_by_termination ? hp.switching_cost : 0.0));
      }
      const auto& last = chunk.steps[static_cast<size_t>(e)];
      // bootstrap at the cut or at a truncation; goal-reaching is terminal
      if (!last.episode_end || last.truncated) {
        const int bcell = last.episode_end ? last.next_cell : chunk.boot_cell;
        const int bgoal = last.episode_end ? last.goal_cell : chunk.boot_goal;
        const int bid = last.episode_end ? last.task_id : chunk.boot_task_id;
        std::vector<int> cell{bcell}, goal{bgoal}, id{bid};
        auto view = env::make_manager_view(*chunk.boot_layout, cell, goal,
                                           nets::TaskEncoding::kGoalChannel, id);
        const double boot =
            nets::manager_value_head(m0, nets::manager_features(m0, w.spec, view)).data()[0];
        g += gp * hp.gamma * boot;
      }
      g_target[i] = g;
    }
  }

  // the baseline v(s) inside the advantage is frozen from the reference pass
  std::vector<double> frozen_v(decided.size());
  {
    ad::RecordPause pause;
    std::vector<int> cells, goals, ids;
    std::vector<const env::GridLayout*> ls;
    for (const auto& d : decided) {
      const auto& rec =
          batch[static_cast<size_t>(d.chunk)].steps[static_cast<size_t>(d.step)];
      cells.push_back(rec.state_cell);
      goals.push_back(rec.goal_cell);
      ids.push_back(rec.task_id);
      ls.push_back(rec.layout.get());
    }
    auto view = env::make_manager_view(ls, cells, goals, nets::TaskEncoding::kGoalChannel, ids);
    Tensor v = nets::manager_value_head(m0, nets::manager_features(m0, w.spec, view));
    for (size_t i = 0; i < decided.size(); ++i) frozen_v[i] = v.data()[i];
  }
  auto loss_frozen = [&](const nets::ParamSet& m) {
    ad::RecordPause pause;
    std::vector<int> cells, goals, ids, choices;
    std::vector<const env::GridLayout*> ls;
    for (const auto& d : decided) {
      const auto& rec =
          batch[static_cast<size_t>(d.chunk)].steps[static_cast<size_t>(d.step)];
      cells.push_back(rec.state_cell);
      goals.push_back(rec.goal_cell);
      ids.push_back(rec.task_id);
      choices.push_back(rec.choice);
      ls.push_back(rec.layout.get());
    }
    auto view = env::make_manager_view(ls, cells, goals, nets::TaskEncoding::kGoalChannel, ids);
    Tensor feats = nets::manager_features(m, w.spec, view);
    Tensor logits = nets::manager_policy_head(m, feats);
    Tensor v = nets::manager_value_head(m, feats);
    Tensor lsm = ad::log_softmax_last(logits);
    Tensor probs = ad::softmax_last(logits);
    const int nc = logits.dim(1);
    double policy = 0, value = 0, entropy = 0;
    for (size_t i = 0; i < decided.size(); ++i) {
      policy += (g_target[i] - frozen_v[i]) *
                lsm.data()[i * static_cast<size_t>(nc) + static_cast<size_t>(choices[i])];
      const double verr = v.data()[i] - g_target[i];
      value += verr * verr;
      for (int a = 0; a < nc; ++a)
        entropy -= probs.data()[i * static_cast<size_t>(nc) + static_cast<size_t>(a)] *
                   lsm.data()[i * static_cast<size_t>(nc) + static_cast<size_t>(a)];
    }
    const double n = static_cast<double>(decided.size());
    return (-policy + 0.5 * hp.value_coef * value - hp.entropy_coef * entropy) / n;
  };

  auto flat = m0.flatten();
  std::vector<double> grad_fd(flat.size());
  const double h = 1e-6;
  for (size_t i = 0; i < flat.size(); ++i) {
    auto fp = flat, fm = flat;
    fp[i] += h;
    fm[i] -= h;
    nets::ParamSet mp = m0.detached();
    mp.unflatten(fp);
    nets::ParamSet mm = m0.detached();
    mm.unflatten(fm);
    grad_fd[i] = (loss_frozen(mp) - loss_frozen(mm)) / (2 * h);
  }
  double norm = 0;
  for (double g : grad_fd) norm += g * g;
  norm = std::sqrt(norm);
  const double scale = norm > hp.clip_norm ? hp.clip_norm / norm : 1.0;
  std::vector<double> expected(flat.size());
  for (size_t i = 0; i < flat.size(); ++i) {
    const double gc = grad_fd[i] * scale;
    const double acc = (1.0 - hp.rms_decay) * gc * gc;
    expected[i] = flat[i] - hp.lr * gc / std::sqrt(acc + hp.rms_epsilon);
  }

  nets::ParamSet stepped = w.bundle.manager.detached();
  auto rms = nets::RmsPropState::init(stepped);
  auto st = metalearn::inner_update_manager(stepped, w.spec, batch, hp, true, rms);
  REQUIRE(st.applied);
  auto impl = stepped.flatten();
  for (size_t i = 0; i < impl.size(); ++i) CHECK(std::fabs(impl[i] - expected[i]) <= 1e-8);
}

TEST_CASE("zero advantages leave only the entropy and value paths") {
  auto w = tiny_world(1, 31);
  auto batch = collect(w, 2, 31);
  metalearn::TrainHp hp;
  hp.lr = 0.01;
  hp.value_coef = 0.0;
  hp.entropy_coef = 0.0;

  // record, then replay with baselines set equal to the return values so
  // every advantage is exactly zero; with value and entropy off the update
  // must be the identity
  metalearn::InnerFreeze freeze;
  {
    nets::ParamSet t = w.bundle.options->detached();
    auto rms = nets::RmsPropState::init(t);
    metalearn::InnerUpdateOptions o;
    o.record = &freeze;
    metalearn::inner_update_option(t, w.spec, *w.bundle.rewards, *w.bundle.terminations, batch,
                                   hp, rms, o);
  }
  freeze.v_baseline = freeze.value_target;  // A = G - G = 0
  nets::ParamSet t = w.bundle.options->detached();
  auto before = t.flatten();
  auto rms = nets::RmsPropState::init(t);
  metalearn::InnerUpdateOptions o;
  o.replay = &freeze;
  auto st = metalearn::inner_update_option(t, w.spec, *w.bundle.rewards, *w.bundle.terminations,
                                           batch, hp, rms, o);
  REQUIRE(st.applied);
  auto after = t.flatten();
  for (size_t i = 0; i < before.size(); ++i) CHECK(std::fabs(after[i] - before[i]) <= 1e-15);
}

TEST_CASE("stopped advantages give the value heads zero gradient through the policy term") {
  auto w = tiny_world(2, 37);
  auto batch = collect(w, 3, 37);
  metalearn::TrainHp hp;
  hp.lr = 0.05;
  hp.value_coef = 0.0;   // no value regression
  hp.entropy_coef = 0.0; // no entropy
  nets::ParamSet t = w.bundle.options->detached();
  auto rms = nets::RmsPropState::init(t);
  auto before = t;
  metalearn::inner_update_option(t, w.spec, *w.bundle.rewards, *w.bundle.terminations, batch,
                                 hp, rms, {});
  // policy-only loss: value heads must be untouched because the advantage
  // carries no gradient into theta
  for (const auto& [name, tensor] : t.entries) {
    if (name[0] != 'v') continue;
    const auto& orig = before.at(name);
    for (int i = 0; i < tensor.size(); ++i)
      CHECK(tensor.data()[static_cast<size_t>(i)] == orig.data()[static_cast<size_t>(i)]);
  }
}

TEST_CASE("differentiable updates expose a live eta path") {
  auto w = tiny_world(2, 41);
  auto batch = collect(w, 3, 41);
  metalearn::TrainHp hp;
  hp.lr = 0.05;

  ad::Tape tape;
  ad::Tape::Scope scope(tape);
  nets::ParamSet t = *w.bundle.options;
  auto rms = nets::RmsPropState::init(t);
  metalearn::InnerUpdateOptions o;
  o.differentiable = true;
  auto st = metalearn::inner_update_option(t, w.spec, *w.bundle.rewards, *w.bundle.terminations,
                                           batch, hp, rms, o);
  REQUIRE(st.applied);

  Tensor probe;
  for (const auto& [n, tensor] : t.entries)
    probe = probe.defined() ? ad::add(probe, ad::sum_all(tensor)) : ad::sum_all(tensor);
  auto wrt_r = w.bundle.rewards->tensors();
  auto wrt_b = w.bundle.terminations->tensors();
  auto gr = ad::grad(probe, wrt_r, {.create_graph = false});
  double norm_r = ad::l2_norm(gr.grads);
  CHECK(norm_r > 1e-12);

  // finite-difference spot check on the reward parameter with the largest
  // implemented sensitivity
  double best = 0;
  size_t entry_pick = 0, j_pick = 0;
  for (size_t e = 0; e < gr.grads.size(); ++e)
    for (size_t j = 0; j < gr.grads[e].data().size(); ++j)
      if (std::fabs(gr.grads[e].data()[j]) > best) {
        best = std::fabs(gr.grads[e].data()[j]);
        entry_pick = e;
        j_pick = j;
      }
  REQUIRE(best > 1e-10);

  metalearn::InnerFreeze freeze;
  {
    nets::ParamSet t2 = w.bundle.options->detached();
    auto rms2 = nets::RmsPropState::init(t2);
    metalearn::InnerUpdateOptions rec;
    rec.record = &freeze;
    metalearn::inner_update_option(t2, w.spec, *w.bundle.rewards, *w.bundle.terminations, batch,
                                   hp, rms2, rec);
  }
  auto probe_value = [&](double delta) {
    nets::ParamSet eta = w.bundle.rewards->detached();
    eta.entries[entry_pick].second.mutable_data()[j_pick] += delta;
    nets::ParamSet t2 = w.bundle.options->detached();
    auto rms2 = nets::RmsPropState::init(t2);
    ad::Tape tape2;
    ad::Tape::Scope scope2(tape2);
    metalearn::InnerUpdateOptions rep;
    rep.differentiable = true;
    rep.replay = &freeze;
    metalearn::inner_update_option(t2, w.spec, eta, *w.bundle.terminations, batch, hp, rms2,
                                   rep);
    double s = 0;
    for (const auto& [n, tensor] : t2.entries)
      for (double v : tensor.data()) s += v;
    return s;
  };
  const double h = 1e-5;
  const double fd = (probe_value(h) - probe_value(-h)) / (2 * h);
  CHECK(std::fabs(fd - gr.grads[entry_pick].data()[j_pick]) <=
        1e-4 * std::max(1.0, std::fabs(fd)));
}

TEST_CASE("manager parameters stay off the meta tape") {
  auto w = tiny_world(2, 43);
  auto batch = collect(w, 3, 43);
  metalearn::TrainHp hp;

  ad::Tape tape;
  ad::Tape::Scope scope(tape);
  nets::ParamSet t = *w.bundle.options;
  auto rms_o = nets::RmsPropState::init(t);
  metalearn::InnerUpdateOptions o;
  o.differentiable = true;
  metalearn::inner_update_option(t, w.spec, *w.bundle.rewards, *w.bundle.terminations, batch,
                                 hp, rms_o, o);
  nets::ParamSet m = w.bundle.manager.detached();
  auto rms_m = nets::RmsPropState::init(m);
  metalearn::inner_update_manager(m, w.spec, batch, hp, true, rms_m);
  for (const auto& [n, tensor] : m.entries) {
    const bool live = tensor.impl()->tape == &tape && tensor.impl()->node >= 0;
    CHECK_FALSE(live);
  }
}

TEST_CASE("meta update error paths and zero-step flag") {
  auto w = tiny_world(2, 47);
  auto batch = collect(w, 3, 47);
  metalearn::TrainHp hp;
  auto rms_r = nets::RmsPropState::init(*w.bundle.rewards);
  auto rms_b = nets::RmsPropState::init(*w.bundle.terminations);

  // not differentiable: no tape / detached theta
  nets::ParamSet theta = w.bundle.options->detached();
  CHECK_THROWS(metalearn::meta_update(*w.bundle.rewards, *w.bundle.terminations, theta,
                                      w.bundle.manager, w.spec, batch, hp, true, rms_r, rms_b));
  {
    ad::Tape tape;
    ad::Tape::Scope scope(tape);
    CHECK_THROWS(metalearn::meta_update(*w.bundle.rewards, *w.bundle.terminations, theta,
                                        w.bundle.manager, w.spec, batch, hp, true, rms_r,
                                        rms_b));
  }

  // validation batch with no option steps: flagged, eta unchanged
  ad::Tape tape;
  ad::Tape::Scope scope(tape);
  nets::ParamSet live = *w.bundle.options;
  auto rms_o = nets::RmsPropState::init(live);
  metalearn::InnerUpdateOptions o;
  o.differentiable = true;
  metalearn::inner_update_option(live, w.spec, *w.bundle.rewards, *w.bundle.terminations, batch,
                                 hp, rms_o, o);
  std::vector<agent::Chunk> no_options;
  {
    agent::Chunk ch;
    agent::StepRecord r;
    r.layout = w.grid.layout;
    r.state_cell = w.grid.layout->open_cells()[0];
    r.next_cell = r.state_cell;
    r.action = 0;
    r.choice = 2;  // primitive (K=2)
    r.decision = true;
    r.ended_by_termination = true;
    r.goal_cell = w.grid.layout->open_cells()[1];
    ch.steps.assign(4, r);
    ch.boot_cell = r.state_cell;
    ch.boot_goal = r.goal_cell;
    ch.boot_layout = w.grid.layout;
    no_options.push_back(std::move(ch));
  }
  auto before_r = w.bundle.rewards->flatten();
  auto res = metalearn::meta_update(*w.bundle.rewards, *w.bundle.terminations, live,
                                    w.bundle.manager, w.spec, no_options, hp, true, rms_r,
                                    rms_b);
  CHECK_FALSE(res.had_option_steps);
  CHECK(w.bundle.rewards->flatten() == before_r);
}

TEST_CASE("meta gradient matches finite differences through one inner step") {
  checks::MetaFdConfig cfg;
  cfg.num_options = 1;
  cfg.inner_steps = 1;
  cfg.seed = 2;
  auto rep = checks::meta_gradient_fd_check(cfg);
  CAPTURE(rep.rel_l2_err);
  CAPTURE(rep.grad_norm);
  CHECK(rep.num_params > 0);
  CHECK(rep.grad_norm > 0.0);
  CHECK(rep.pass(1e-4));
}

TEST_CASE("meta learning rate zero keeps eta fixed") {
  auto w = tiny_world(2, 53);
  w.dc.hp.meta_lr = 0.0;
  w.dc.frame_budget = 2 * w.dc.num_envs * w.dc.n_step * w.dc.batch_size *
                      (w.dc.hp.inner_steps + 1);
  auto before_r = w.bundle.rewards->flatten();
  auto before_b = w.bundle.terminations->flatten();
  auto res = metalearn::run_phase(w.dc, &w.bundle, false);
  CHECK(res.params.rewards->flatten() == before_r);
  CHECK(res.params.terminations->flatten() == before_b);
  CHECK(res.metrics.size() >= 1);
}

TEST_CASE("driver frame accounting and metrics stream") {
  auto w = tiny_world(2, 59);
  const long frames_per_iter =
      static_cast<long>(w.dc.n_step) * w.dc.batch_size * (w.dc.hp.inner_steps + 1);
  w.dc.frame_budget = 3 * frames_per_iter - 10;  // forces a partial last iteration
  auto res = metalearn::run_phase(w.dc, nullptr, false);
  CHECK(res.frames >= w.dc.frame_budget);
  CHECK(res.frames - w.dc.frame_budget < frames_per_iter + w.dc.num_envs * w.dc.n_step);
  REQUIRE(res.metrics.size() == 3);
  for (const auto& row : res.metrics) {
    double s = 0;
    for (double v : row.choice_hist) s += v;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(row.frames > 0);
  }
}

TEST_CASE("modac with K=0 is bitwise the flat baseline") {
  auto run = [](metalearn::AgentKind kind) {
    auto w = tiny_world(0, 61, kind);
    w.dc.kind = kind;
    w.dc.hp.switching_cost = 0.0;
    w.dc.frame_budget = 4 * w.dc.num_envs * w.dc.n_step * w.dc.batch_size;
    w.bundle = metalearn::init_params(w.dc);
    return metalearn::run_phase(w.dc, &w.bundle, false);
  };
  auto a = run(metalearn::AgentKind::kModac);
  auto b = run(metalearn::AgentKind::kFlat);
  REQUIRE(a.metrics.size() == b.metrics.size());
  for (size_t i = 0; i < a.metrics.size(); ++i) {
    CHECK(a.metrics[i].frames == b.metrics[i].frames);
    CHECK(a.metrics[i].episode_return_mean == b.metrics[i].episode_return_mean);
    CHECK(a.metrics[i].loss_policy == b.metrics[i].loss_policy);
    CHECK(a.metrics[i].loss_value == b.metrics[i].loss_value);
    CHECK(a.metrics[i].choice_hist == b.metrics[i].choice_hist);
  }
  CHECK(nets::param_hash(a.params.manager) == nets::param_hash(b.params.manager));
}

TEST_CASE("transfer phase freezes option parameters") {
  auto w = tiny_world(2, 67);
  w.dc.frame_budget = 2 * w.dc.num_envs * w.dc.n_step * w.dc.batch_size *
                      (w.dc.hp.inner_steps + 1);
  auto trained = metalearn::run_phase(w.dc, nullptr, false);

  metalearn::DriverConfig tc = w.dc;
  tc.training_phase = false;
  tc.frame_budget = w.dc.num_envs * w.dc.n_step * w.dc.batch_size * 2;
  metalearn::ParamBundle transfer = trained.params;
  rng::Stream fresh(rng::derive(999, rng::kManagerInit));
  transfer.manager = nets::make_manager_params(w.spec, fresh);
  const auto hash_before = nets::param_hash(*transfer.options);
  const auto term_before = nets::param_hash(*transfer.terminations);
  auto res = metalearn::run_phase(tc, &transfer, /*freeze_options=*/true);
  CHECK(nets::param_hash(*res.params.options) == hash_before);
  CHECK(nets::param_hash(*res.params.terminations) == term_before);
  // the manager did learn something (parameters moved)
  CHECK(nets::param_hash(res.params.manager) != nets::param_hash(transfer.manager));
}
