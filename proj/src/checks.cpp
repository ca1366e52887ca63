#include "modac/checks.hpp"

#include <algorithm>
#include <cmath>

#include "modac/agent.hpp"
#include "modac/env.hpp"
#include "modac/rng.hpp"

namespace modac::checks {

using ad::Tensor;

double brute_option_return(std::span<const double> rewards, std::span<const double> betas,
                           int n, double v_boot) {
  double g = 0.0;
  for (int j = 1; j <= n; ++j)
    g += std::pow(1.0 - betas[static_cast<size_t>(j - 1)], j) *
         rewards[static_cast<size_t>(j - 1)];
  g += std::pow(1.0 - betas[static_cast<size_t>(n - 1)], n + 1) * v_boot;
  return g;
}

double brute_option_return_running(std::span<const double> rewards,
                                   std::span<const double> betas, int n, double v_boot) {
  double g = 0.0;
  double prod = 1.0;
  for (int j = 1; j <= n; ++j) {
    prod *= 1.0 - betas[static_cast<size_t>(j - 1)];
    g += prod * rewards[static_cast<size_t>(j - 1)];
  }
  g += prod * (1.0 - betas[static_cast<size_t>(n - 1)]) * v_boot;
  return g;
}

double brute_manager_return(std::span<const double> rewards, int n, double gamma, double cost,
                            double v_boot, bool switched) {
  double g = 0.0;
  for (int j = 1; j <= n; ++j)
    g += std::pow(gamma, j) * rewards[static_cast<size_t>(j - 1)];
  if (switched) g -= std::pow(gamma, n) * cost;
  g += std::pow(gamma, n + 1) * v_boot;
  return g;
}

OracleReport return_oracle_check(int samples, std::uint64_t seed) {
  rng::Stream r(seed);
  OracleReport rep;
  rep.samples = samples;
  for (int s = 0; s < samples; ++s) {
    const int n = 1 + r.uniform_int(20);
    std::vector<double> rewards(static_cast<size_t>(n)), betas(static_cast<size_t>(n));
    for (auto& v : rewards) v = r.uniform(-1.6, 1.6);
    for (auto& v : betas) v = r.uniform(0.0, 1.0);
    const double v_boot = r.uniform(-2.0, 2.0);
    const double gamma = r.uniform(0.5, 1.0);
    const double cost = r.uniform(0.0, 0.2);
    const bool switched = r.bernoulli(0.5);

    const double e1 = std::fabs(metalearn::option_return(rewards, betas, n, v_boot) -
                                brute_option_return(rewards, betas, n, v_boot));
    const double e2 =
        std::fabs(metalearn::option_return(rewards, betas, n, v_boot, true) -
                  brute_option_return_running(rewards, betas, n, v_boot));
    const double e3 = std::fabs(metalearn::manager_return(rewards, n, gamma, cost, v_boot,
                                                          switched) -
                                brute_manager_return(rewards, n, gamma, cost, v_boot, switched));
    rep.max_abs_err = std::max({rep.max_abs_err, e1, e2, e3});

    // the graph route must agree with the per-step plain route as well
    for (bool running : {false, true}) {
      auto all = metalearn::option_returns_all(rewards, betas, v_boot, running);
      Tensor g = metalearn::option_returns_graph(Tensor::from({n}, rewards),
                                                 Tensor::from({n}, betas), v_boot, running);
      for (int m = 0; m < n; ++m) {
        const double brute =
            running ? brute_option_return_running(std::span<const double>(rewards).subspan(
                                                      static_cast<size_t>(m)),
                                                  std::span<const double>(betas).subspan(
                                                      static_cast<size_t>(m)),
                                                  n - m, v_boot)
                    : brute_option_return(std::span<const double>(rewards).subspan(
                                              static_cast<size_t>(m)),
                                          std::span<const double>(betas).subspan(
                                              static_cast<size_t>(m)),
                                          n - m, v_boot);
        rep.max_abs_err = std::max(rep.max_abs_err,
                                   std::fabs(all[static_cast<size_t>(m)] - brute));
        rep.max_abs_err =
            std::max(rep.max_abs_err, std::fabs(g.data()[static_cast<size_t>(m)] - brute));
      }
    }
  }
  return rep;
}

namespace {

double floored_rel(double a, double b, double floor) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), floor});
}

FdReport compare(std::span<const double> ad_grad, std::span<const double> fd_grad) {
  FdReport rep;
  rep.num_params = static_cast<int>(ad_grad.size());
  double diff2 = 0.0, ref2 = 0.0;
  for (size_t i = 0; i < ad_grad.size(); ++i) {
    const double d = ad_grad[i] - fd_grad[i];
    diff2 += d * d;
    ref2 += fd_grad[i] * fd_grad[i];
    rep.max_elem_err = std::max(rep.max_elem_err, floored_rel(ad_grad[i], fd_grad[i], 1e-6));
  }
  rep.grad_norm = std::sqrt(ref2);
  rep.rel_l2_err = std::sqrt(diff2) / std::max(std::sqrt(ref2), 1e-12);
  return rep;
}

Tensor small_mlp(const Tensor& x, const std::vector<Tensor>& p) {
  Tensor h = ad::relu(ad::add_row(ad::matmul(x, p[0]), p[1]));
  return ad::add_row(ad::matmul(h, p[2]), p[3]);
}

}  // namespace

FdReport autodiff_first_order_check(std::uint64_t seed) {
  rng::Stream r(seed);
  const std::vector<ad::Shape> shapes = {{3, 5}, {5}, {5, 2}, {2}};
  std::vector<std::vector<double>> vals;
  for (const auto& s : shapes) {
    std::vector<double> v(static_cast<size_t>(ad::shape_size(s)));
    for (auto& x : v) x = r.uniform(-0.8, 0.8);
    vals.push_back(std::move(v));
  }
  std::vector<double> xin(6);
  for (auto& v : xin) v = r.uniform(-1.0, 1.0);

  auto value = [&](const std::vector<std::vector<double>>& pv) {
    std::vector<Tensor> p;
    for (size_t i = 0; i < shapes.size(); ++i) p.push_back(Tensor::from(shapes[i], pv[i]));
    Tensor out = small_mlp(Tensor::from({2, 3}, xin), p);
    return ad::mean_all(ad::mul(out, out)).item();
  };

  std::vector<double> adg, fdg;
  {
    ad::Tape tape;
    ad::Tape::Scope scope(tape);
    std::vector<Tensor> p;
    for (size_t i = 0; i < shapes.size(); ++i) p.push_back(Tensor::param(shapes[i], vals[i]));
    Tensor out = small_mlp(Tensor::from({2, 3}, xin), p);
    auto g = ad::grad(ad::mean_all(ad::mul(out, out)), p);
    for (const auto& t : g.grads) adg.insert(adg.end(), t.data().begin(), t.data().end());
  }
  const double h = 1e-5;
  for (size_t i = 0; i < shapes.size(); ++i)
    for (size_t j = 0; j < vals[i].size(); ++j) {
      auto vp = vals, vm = vals;
      vp[i][j] += h;
      vm[i][j] -= h;
      fdg.push_back((value(vp) - value(vm)) / (2 * h));
    }
  return compare(adg, fdg);
}

FdReport autodiff_second_order_check(std::uint64_t seed) {
  rng::Stream r(seed);
  const std::vector<ad::Shape> shapes = {{2, 4}, {4}, {4, 1}, {1}};
  std::vector<std::vector<double>> vals;
  for (const auto& s : shapes) {
    std::vector<double> v(static_cast<size_t>(ad::shape_size(s)));
    for (auto& x : v) x = r.uniform(-0.8, 0.8);
    vals.push_back(std::move(v));
  }
  std::vector<double> xin(4);
  for (auto& v : xin) v = r.uniform(-1.0, 1.0);

  auto composite = [&](double c) {
    ad::Tape tape;
    ad::Tape::Scope scope(tape);
    std::vector<Tensor> p;
    for (size_t i = 0; i < shapes.size(); ++i) p.push_back(Tensor::param(shapes[i], vals[i]));
    Tensor x = Tensor::from({2, 2}, xin);
    Tensor f = ad::sum_all(ad::mul(small_mlp(x, p), small_mlp(x, p)));
    auto gf = ad::grad(f, p, {.create_graph = true});
    std::vector<Tensor> p2;
    for (size_t i = 0; i < p.size(); ++i) p2.push_back(ad::add(p[i], ad::smul(gf.grads[i], c)));
    return ad::mean_all(ad::exp(ad::smul(small_mlp(x, p2), 0.1)));
  };

  double adg;
  {
    ad::Tape tape;
    ad::Tape::Scope scope(tape);
    std::vector<Tensor> p;
    for (size_t i = 0; i < shapes.size(); ++i) p.push_back(Tensor::param(shapes[i], vals[i]));
    Tensor c = Tensor::param({}, {0.05});
    Tensor x = Tensor::from({2, 2}, xin);
    Tensor f = ad::sum_all(ad::mul(small_mlp(x, p), small_mlp(x, p)));
    auto gf = ad::grad(f, p, {.create_graph = true});
    std::vector<Tensor> p2;
    for (size_t i = 0; i < p.size(); ++i) p2.push_back(ad::add(p[i], ad::mul_bs(gf.grads[i], c)));
    Tensor obj = ad::mean_all(ad::exp(ad::smul(small_mlp(x, p2), 0.1)));
    adg = ad::grad(obj, std::vector<Tensor>{c}).grads[0].item();
  }
  const double h = 1e-5;
  const double fd = (composite(0.05 + h).item() - composite(0.05 - h).item()) / (2 * h);
  const double adv[1] = {adg}, fdv[1] = {fd};
  return compare(adv, fdv);
}

// ---- meta-gradient finite differences ----

namespace {

// tiny open grid; every network stays under 200 parameters
constexpr const char* kTinyMap =
    "#####\n"
    "#...#\n"
    "#...#\n"
    "#...#\n"
    "#####\n";

struct TinyWorld {
  nets::NetworkSpec spec;
  std::shared_ptr<agent::EpisodeSource> source;
  metalearn::TrainHp hp;
};

TinyWorld make_tiny_world(int num_options) {
  TinyWorld w;
  auto grid = env::parse_grid_text(kTinyMap);
  std::vector<env::TaskSpec> tasks;
  const auto open = grid.layout->open_cells();
  tasks.push_back({open[0], env::TaskSpec::Phase::kTrain, 0});
  tasks.push_back({open.back(), env::TaskSpec::Phase::kTrain, 1});
  w.source = std::make_shared<agent::FixedLayoutSource>(grid.layout, tasks);
  w.spec.torso = nets::Torso::kMlp;
  w.spec.grid_h = grid.layout->height;
  w.spec.grid_w = grid.layout->width;
  w.spec.mlp_hidden = {2};
  w.spec.num_options = num_options;
  w.spec.num_actions = env::kNumActions;
  w.hp.lr = 0.05;  // visible parameter movement so the meta path is exercised
  w.hp.meta_lr = 0.001;
  w.hp.switching_cost = 0.05;
  w.hp.clip_norm = 40.0;
  return w;
}

}  // namespace

FdReport meta_gradient_fd_check(const MetaFdConfig& cfg) {
  TinyWorld w = make_tiny_world(cfg.num_options);
  w.hp.inner_steps = cfg.inner_steps;
  const int L = cfg.inner_steps;

  metalearn::DriverConfig dc;
  dc.spec = w.spec;
  dc.seed = cfg.seed;
  auto bundle = metalearn::init_params(dc);
  if (!bundle.rewards || !bundle.terminations || !bundle.options)
    throw std::logic_error("meta fd check: bundle incomplete");

  // fixed experience: L inner batches plus one validation batch
  std::vector<std::vector<agent::Chunk>> batches;
  {
    agent::ActorPool pool(2, 8, 24, w.source, cfg.seed);
    agent::ActingNets an;
    an.spec = &w.spec;
    an.manager = &bundle.manager;
    an.options = &*bundle.options;
    an.rewards = &*bundle.rewards;
    an.terminations = &*bundle.terminations;
    for (int l = 0; l < L + 1; ++l) batches.push_back(pool.collect(3, an));
  }

  const std::vector<double> r_flat = bundle.rewards->flatten();
  const std::vector<double> b_flat = bundle.terminations->flatten();

  // One composite evaluation. On the reference pass (record=true) the
  // stop-gradient constants are captured; replayed passes re-use them so
  // finite differences probe exactly the function the tape differentiates.
  std::vector<metalearn::InnerFreeze> freezes(static_cast<size_t>(L));
  bool recorded = false;

  struct EvalOut {
    double j = 0.0;
    std::vector<double> grad;  // filled only on the reference pass
  };
  auto evaluate = [&](std::span<const double> rv, std::span<const double> bv,
                      bool reference) {
    nets::ParamSet eta_r = bundle.rewards->detached();
    eta_r.unflatten(rv);
    nets::ParamSet eta_b = bundle.terminations->detached();
    eta_b.unflatten(bv);
    nets::ParamSet theta = bundle.options->detached();
    nets::ParamSet manager = bundle.manager.detached();
    nets::RmsPropState rms_o = nets::RmsPropState::init(theta);
    nets::RmsPropState rms_m = nets::RmsPropState::init(manager);

    ad::Tape tape;
    ad::Tape::Scope scope(tape);
    for (int l = 0; l < L; ++l) {
      metalearn::InnerUpdateOptions opts;
      opts.differentiable = true;
      if (reference)
        opts.record = &freezes[static_cast<size_t>(l)];
      else
        opts.replay = &freezes[static_cast<size_t>(l)];
      metalearn::inner_update_option(theta, w.spec, eta_r, eta_b,
                                     batches[static_cast<size_t>(l)], w.hp, rms_o, opts);
      metalearn::inner_update_manager(manager, w.spec, batches[static_cast<size_t>(l)], w.hp,
                                      true, rms_m);
    }
    Tensor j = metalearn::meta_objective_graph(theta, manager, w.spec, batches.back(), w.hp,
                                               true);
    if (!j.defined()) throw std::runtime_error("meta fd check: no option steps in validation");
    EvalOut out;
    out.j = j.item();
    if (reference) {
      auto wrt = eta_r.tensors();
      auto bt = eta_b.tensors();
      wrt.insert(wrt.end(), bt.begin(), bt.end());
      auto g = ad::grad(j, wrt);
      for (const auto& t : g.grads)
        out.grad.insert(out.grad.end(), t.data().begin(), t.data().end());
    }
    return out;
  };

  EvalOut ref = evaluate(r_flat, b_flat, true);
  recorded = true;
  (void)recorded;

  std::vector<double> fd;
  fd.reserve(r_flat.size() + b_flat.size());
  const double h = cfg.fd_step;
  for (size_t i = 0; i < r_flat.size(); ++i) {
    auto rp = r_flat, rm = r_flat;
    rp[i] += h;
    rm[i] -= h;
    fd.push_back((evaluate(rp, b_flat, false).j - evaluate(rm, b_flat, false).j) / (2 * h));
  }
  for (size_t i = 0; i < b_flat.size(); ++i) {
    auto bp = b_flat, bm = b_flat;
    bp[i] += h;
    bm[i] -= h;
    fd.push_back((evaluate(r_flat, bp, false).j - evaluate(r_flat, bm, false).j) / (2 * h));
  }
  return compare(ref.grad, fd);
}

}  // namespace modac::checks
