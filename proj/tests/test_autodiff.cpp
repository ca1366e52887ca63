#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "modac/rng.hpp"
#include "modac/tensor.hpp"

using namespace modac;
using ad::Tensor;

namespace {

double relerr(double a, double b, double floor = 1e-10) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), floor});
}

// objective: weighted sum of the op output, so every output element matters
double eval_weighted(const std::function<Tensor(std::vector<Tensor>&)>& build,
                     std::vector<std::vector<double>> inputs,
                     const std::vector<ad::Shape>& shapes,
                     const std::vector<double>& weights) {
  std::vector<Tensor> ts;
  for (size_t i = 0; i < inputs.size(); ++i)
    ts.push_back(Tensor::from(shapes[i], inputs[i]));
  Tensor out = build(ts);
  Tensor w = Tensor::from(out.shape(), weights);
  return ad::sum_all(ad::mul(out, w)).item();
}

struct FdCheck {
  std::string name;
  std::vector<ad::Shape> shapes;
  std::function<Tensor(std::vector<Tensor>&)> build;
  // per-input value sampler (index, rng) so restricted domains stay valid
  std::function<double(size_t, rng::Stream&)> sample =
      [](size_t, rng::Stream& r) { return r.uniform(-2.0, 2.0); };
};

void run_fd_check(const FdCheck& c, double tol = 1e-6) {
  rng::Stream r(rng::derive(12345, std::hash<std::string>{}(c.name)));
  std::vector<std::vector<double>> vals;
  for (size_t i = 0; i < c.shapes.size(); ++i) {
    std::vector<double> v(static_cast<size_t>(ad::shape_size(c.shapes[i])));
    for (auto& x : v) x = c.sample(i, r);
    vals.push_back(std::move(v));
  }
  // weights decided after one probe forward to learn the output shape
  std::vector<double> weights;
  {
    std::vector<Tensor> ts;
    for (size_t i = 0; i < vals.size(); ++i) ts.push_back(Tensor::from(c.shapes[i], vals[i]));
    Tensor out = c.build(ts);
    weights.resize(static_cast<size_t>(out.size()));
    for (auto& w : weights) w = r.uniform(0.2, 1.0);
  }

  // reverse-mode gradients
  std::vector<Tensor> params;
  ad::Tape tape;
  ad::Tape::Scope scope(tape);
  for (size_t i = 0; i < vals.size(); ++i)
    params.push_back(Tensor::param(c.shapes[i], vals[i]));
  Tensor out = c.build(params);
  Tensor obj = ad::sum_all(ad::mul(out, Tensor::from(out.shape(), weights)));
  auto g = ad::grad(obj, params);

  const double h = 1e-5;
  for (size_t i = 0; i < vals.size(); ++i) {
    for (size_t j = 0; j < vals[i].size(); ++j) {
      auto vp = vals, vm = vals;
      vp[i][j] += h;
      vm[i][j] -= h;
      const double fd = (eval_weighted(c.build, vp, c.shapes, weights) -
                         eval_weighted(c.build, vm, c.shapes, weights)) /
                        (2 * h);
      const double adg = g.grads[i].data()[j];
      INFO(c.name << " input " << i << " elem " << j << " fd=" << fd << " ad=" << adg);
      CHECK(relerr(fd, adg, 1e-7) <= tol);
    }
  }
}

}  // namespace

TEST_CASE("tensor invariants and errors") {
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1.0, 2.0}), ad::ShapeError);
  CHECK_THROWS_AS(Tensor::from({2}, {1.0, std::nan("")}), ad::NumericError);
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(a.size() == 6);
  CHECK(a.at({1, 2}) == 6.0);
  CHECK_THROWS_AS(ad::add(a, Tensor::zeros({3, 2})), ad::ShapeError);
  CHECK_THROWS_AS(ad::matmul(a, Tensor::zeros({2, 2})), ad::ShapeError);
}

TEST_CASE("activation fixed points and softmax symmetry") {
  Tensor z = Tensor::zeros({1, 3});
  Tensor s = ad::softmax_last(z);
  for (double v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(ad::arctan(Tensor::scalar(0.0)).item() == 0.0);
  CHECK(ad::sigmoid(Tensor::scalar(0.0)).item() == 0.5);
}

TEST_CASE("conv2d with unit 1x1 kernel is the identity map") {
  rng::Stream r(7);
  std::vector<double> img(2 * 4 * 5 * 1);
  for (auto& v : img) v = r.uniform(-1, 1);
  Tensor in = Tensor::from({2, 4, 5, 1}, img);
  Tensor w = Tensor::from({1, 1, 1, 1}, {1.0});
  Tensor b = Tensor::zeros({1});
  Tensor out = ad::conv2d(in, w, b, ad::Padding::kValid);
  REQUIRE(out.shape() == ad::Shape{2, 4, 5, 1});
  for (int i = 0; i < out.size(); ++i) CHECK(out.data()[i] == img[static_cast<size_t>(i)]);
}

TEST_CASE("simple derivatives") {
  ad::Tape tape;
  ad::Tape::Scope scope(tape);
  Tensor x = Tensor::param({}, {3.0});
  Tensor y = ad::mul(x, x);
  auto g = ad::grad(y, std::vector<Tensor>{x});
  CHECK(g.grads[0].item() == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("second derivative through a differentiable backward pass") {
  ad::Tape tape;
  ad::Tape::Scope scope(tape);
  Tensor x = Tensor::param({}, {2.0});
  Tensor y = ad::mul(ad::mul(x, x), x);  // x^3
  auto g = ad::grad(y, std::vector<Tensor>{x}, {.create_graph = true});
  auto g2 = ad::grad(g.grads[0], std::vector<Tensor>{x});
  CHECK(g2.grads[0].item() == doctest::Approx(12.0).epsilon(1e-12));
}

TEST_CASE("stop_gradient") {
  Tensor t = Tensor::from({3}, {1.0, -2.0, 0.5});
  Tensor s = ad::stop_gradient(t);
  for (int i = 0; i < 3; ++i) CHECK(s.data()[i] == t.data()[i]);

  ad::Tape tape;
  ad::Tape::Scope scope(tape);
  Tensor x = Tensor::param({}, {2.0});
  Tensor y = ad::mul(ad::stop_gradient(x), x);  // sg(x)*x -> d/dx = sg(x) = 2
  auto g = ad::grad(y, std::vector<Tensor>{x});
  CHECK(g.grads[0].item() == doctest::Approx(2.0));

  Tensor z = ad::stop_gradient(ad::mul(x, x));
  auto gz = ad::grad(ad::sum_all(z), std::vector<Tensor>{x});
  CHECK(gz.grads[0].item() == 0.0);
  CHECK_FALSE(gz.connected[0]);  // warned, not silent
}

TEST_CASE("grad errors and edge cases") {
  ad::Tape tape;
  ad::Tape::Scope scope(tape);
  Tensor x = Tensor::param({2}, {1.0, 2.0});
  Tensor y = ad::sum_all(ad::mul(x, x));
  CHECK_THROWS_AS(ad::grad(ad::mul(x, x), std::vector<Tensor>{x}), ad::ShapeError);

  // detached parameter: zero gradient, flagged
  Tensor other = Tensor::param({2}, {0.5, 0.5});
  auto g = ad::grad(y, std::vector<Tensor>{x, other});
  CHECK(g.connected[0]);
  CHECK_FALSE(g.connected[1]);
  CHECK(g.grads[1].data()[0] == 0.0);
  CHECK_FALSE(g.all_connected());
}

TEST_CASE("first-order finite differences for every op") {
  auto away_from_zero = [](size_t, rng::Stream& r) {
    double v = r.uniform(-2.0, 2.0);
    while (std::fabs(v) < 0.05) v = r.uniform(-2.0, 2.0);
    return v;
  };
  auto positive = [](size_t, rng::Stream& r) { return r.uniform(0.2, 2.0); };

  std::vector<FdCheck> checks = {
      {"add", {{2, 3}, {2, 3}}, [](auto& t) { return ad::add(t[0], t[1]); }},
      {"sub", {{2, 3}, {2, 3}}, [](auto& t) { return ad::sub(t[0], t[1]); }},
      {"mul", {{2, 3}, {2, 3}}, [](auto& t) { return ad::mul(t[0], t[1]); }},
      {"div", {{2, 3}, {2, 3}}, [](auto& t) { return ad::div(t[0], t[1]); },
       [](size_t i, rng::Stream& r) { return i == 1 ? r.uniform(0.5, 2.0) : r.uniform(-2.0, 2.0); }},
      {"neg", {{4}}, [](auto& t) { return ad::neg(t[0]); }},
      {"smul", {{4}}, [](auto& t) { return ad::smul(t[0], -1.7); }},
      {"sadd", {{4}}, [](auto& t) { return ad::sadd(t[0], 0.3); }},
      {"add_row", {{3, 4}, {4}}, [](auto& t) { return ad::add_row(t[0], t[1]); }},
      {"sub_col", {{3, 4}, {3}}, [](auto& t) { return ad::sub_col(t[0], t[1]); }},
      {"add_col", {{3, 4}, {3}}, [](auto& t) { return ad::add_col(t[0], t[1]); }},
      {"mul_col", {{3, 4}, {3}}, [](auto& t) { return ad::mul_col(t[0], t[1]); }},
      {"matmul", {{3, 4}, {4, 2}}, [](auto& t) { return ad::matmul(t[0], t[1]); }},
      {"transpose", {{3, 4}}, [](auto& t) { return ad::transpose(t[0]); }},
      {"conv2d_valid", {{2, 4, 4, 2}, {3, 2, 2, 2}, {3}},
       [](auto& t) { return ad::conv2d(t[0], t[1], t[2], ad::Padding::kValid); }},
      {"conv2d_same", {{1, 3, 3, 2}, {2, 2, 2, 2}, {2}},
       [](auto& t) { return ad::conv2d(t[0], t[1], t[2], ad::Padding::kSame); }},
      {"relu", {{2, 4}}, [](auto& t) { return ad::relu(t[0]); }, away_from_zero},
      {"arctan", {{5}}, [](auto& t) { return ad::arctan(t[0]); }},
      {"sigmoid", {{5}}, [](auto& t) { return ad::sigmoid(t[0]); }},
      {"log", {{5}}, [](auto& t) { return ad::log(t[0]); }, positive},
      {"exp", {{5}}, [](auto& t) { return ad::exp(t[0]); }},
      {"sqrt", {{5}}, [](auto& t) { return ad::sqrt(t[0]); }, positive},
      {"pow_scalar", {{5}}, [](auto& t) { return ad::pow_scalar(t[0], 3.0); }, positive},
      {"pow_exps", {{4}},
       [](auto& t) { return ad::pow_exps(t[0], {0.0, 1.0, 2.0, 3.0}); }, positive},
      {"softmax_last", {{2, 4}}, [](auto& t) { return ad::softmax_last(t[0]); }},
      {"log_softmax_last", {{2, 4}}, [](auto& t) { return ad::log_softmax_last(t[0]); }},
      {"sum_all", {{2, 3}}, [](auto& t) { return ad::sum_all(t[0]); }},
      {"mean_all", {{2, 3}}, [](auto& t) { return ad::mean_all(t[0]); }},
      {"sum_last", {{3, 4}}, [](auto& t) { return ad::sum_last(t[0]); }},
      {"sum_axis0", {{3, 4}}, [](auto& t) { return ad::sum_axis0(t[0]); }},
      {"bcast_to", {{}}, [](auto& t) { return ad::bcast_to(t[0], {2, 3}); }},
      {"bcast_last", {{3}}, [](auto& t) { return ad::bcast_last(t[0], 4); }},
      {"bcast_axis0", {{3}}, [](auto& t) { return ad::bcast_axis0(t[0], 4); }},
      {"slice", {{3, 5}}, [](auto& t) { return ad::slice(t[0], 1, 1, 3); }},
      {"unslice", {{3, 2}}, [](auto& t) { return ad::unslice(t[0], 1, 2, {3, 5}); }},
      {"concat", {{2, 3}, {2, 2}},
       [](auto& t) { std::vector<Tensor> ps{t[0], t[1]}; return ad::concat(ps, 1); }},
      {"reshape", {{2, 6}}, [](auto& t) { return ad::reshape(t[0], {3, 4}); }},
      {"gather_last", {{3, 4}}, [](auto& t) { return ad::gather_last(t[0], {1, 0, 3}); }},
      {"scatter_last", {{3}}, [](auto& t) { return ad::scatter_last(t[0], {2, 0, 1}, 4); }},
      {"take_rows", {{4, 3}}, [](auto& t) { return ad::take_rows(t[0], {2, 0, 2}); }},
      {"scatter_rows", {{3, 2}}, [](auto& t) { return ad::scatter_rows(t[0], {1, 1, 0}, 4); }},
      {"mul_bs", {{2, 3}, {}}, [](auto& t) { return ad::mul_bs(t[0], t[1]); }},
      {"add_bs", {{2, 3}, {}}, [](auto& t) { return ad::add_bs(t[0], t[1]); }},
  };
  for (const auto& c : checks) {
    CAPTURE(c.name);
    run_fd_check(c);
  }
}

namespace {

// two-layer MLP used by the composite checks below
Tensor mlp_forward(const Tensor& x, std::vector<Tensor>& p) {
  Tensor h = ad::relu(ad::add_row(ad::matmul(x, p[0]), p[1]));
  return ad::add_row(ad::matmul(h, p[2]), p[3]);
}

std::vector<std::vector<double>> random_mlp_params(rng::Stream& r,
                                                   const std::vector<ad::Shape>& shapes) {
  std::vector<std::vector<double>> vals;
  for (const auto& s : shapes) {
    std::vector<double> v(static_cast<size_t>(ad::shape_size(s)));
    for (auto& x : v) x = r.uniform(-0.8, 0.8);
    vals.push_back(std::move(v));
  }
  return vals;
}

}  // namespace

TEST_CASE("random MLP gradient vs central finite differences") {
  const std::vector<ad::Shape> shapes = {{3, 5}, {5}, {5, 2}, {2}};
  rng::Stream r(99);
  auto vals = random_mlp_params(r, shapes);
  std::vector<double> xin(6), target(4);
  for (auto& v : xin) v = r.uniform(-1, 1);
  for (auto& v : target) v = r.uniform(-1, 1);

  auto loss_value = [&](const std::vector<std::vector<double>>& pv) {
    std::vector<Tensor> p;
    for (size_t i = 0; i < shapes.size(); ++i) p.push_back(Tensor::from(shapes[i], pv[i]));
    Tensor x = Tensor::from({2, 3}, xin);
    Tensor out = mlp_forward(x, p);
    Tensor d = ad::sub(out, Tensor::from({2, 2}, target));
    return ad::mean_all(ad::mul(d, d)).item();
  };

  ad::Tape tape;
  ad::Tape::Scope scope(tape);
  std::vector<Tensor> p;
  for (size_t i = 0; i < shapes.size(); ++i) p.push_back(Tensor::param(shapes[i], vals[i]));
  Tensor x = Tensor::from({2, 3}, xin);
  Tensor out = mlp_forward(x, p);
  Tensor d = ad::sub(out, Tensor::from({2, 2}, target));
  auto g = ad::grad(ad::mean_all(ad::mul(d, d)), p);

  const double h = 1e-5;
  for (size_t i = 0; i < shapes.size(); ++i)
    for (size_t j = 0; j < vals[i].size(); ++j) {
      auto vp = vals, vm = vals;
      vp[i][j] += h;
      vm[i][j] -= h;
      const double fd = (loss_value(vp) - loss_value(vm)) / (2 * h);
      INFO("param " << i << " elem " << j);
      CHECK(relerr(fd, g.grads[i].data()[j], 1e-8) <= 1e-6);
    }
}

TEST_CASE("second order: gradient w.r.t. step coefficient of g(theta + c*grad f)") {
  const std::vector<ad::Shape> shapes = {{2, 4}, {4}, {4, 1}, {1}};
  rng::Stream r(2024);
  auto vals = random_mlp_params(r, shapes);
  std::vector<double> xin(4);
  for (auto& v : xin) v = r.uniform(-1, 1);

  auto composite = [&](double c) {
    ad::Tape tape;
    ad::Tape::Scope scope(tape);
    std::vector<Tensor> p;
    for (size_t i = 0; i < shapes.size(); ++i) p.push_back(Tensor::param(shapes[i], vals[i]));
    Tensor x = Tensor::from({2, 2}, xin);
    Tensor f = ad::sum_all(ad::mul(mlp_forward(x, p), mlp_forward(x, p)));
    auto gf = ad::grad(f, p, {.create_graph = true});
    std::vector<Tensor> p2;
    for (size_t i = 0; i < p.size(); ++i) p2.push_back(ad::add(p[i], ad::smul(gf.grads[i], c)));
    // outer objective on the stepped parameters
    Tensor gobj = ad::mean_all(ad::exp(ad::smul(mlp_forward(x, p2), 0.1)));
    return gobj;
  };

  // reverse-mode d(objective)/dc via a parameterised step coefficient
  double ad_deriv;
  {
    ad::Tape tape;
    ad::Tape::Scope scope(tape);
    std::vector<Tensor> p;
    for (size_t i = 0; i < shapes.size(); ++i) p.push_back(Tensor::param(shapes[i], vals[i]));
    Tensor c = Tensor::param({}, {0.05});
    Tensor x = Tensor::from({2, 2}, xin);
    Tensor f = ad::sum_all(ad::mul(mlp_forward(x, p), mlp_forward(x, p)));
    auto gf = ad::grad(f, p, {.create_graph = true});
    std::vector<Tensor> p2;
    for (size_t i = 0; i < p.size(); ++i) p2.push_back(ad::add(p[i], ad::mul_bs(gf.grads[i], c)));
    Tensor gobj = ad::mean_all(ad::exp(ad::smul(mlp_forward(x, p2), 0.1)));
    ad_deriv = ad::grad(gobj, std::vector<Tensor>{c}).grads[0].item();
  }

  const double h = 1e-5;
  const double fd = (composite(0.05 + h).item() - composite(0.05 - h).item()) / (2 * h);
  CHECK(relerr(fd, ad_deriv, 1e-9) <= 1e-4);
}

TEST_CASE("gradient of softmax log-prob equals onehot minus softmax") {
  rng::Stream r(5);
  std::vector<double> logits(6);
  for (auto& v : logits) v = r.uniform(-1.5, 1.5);
  for (int a = 0; a < 6; ++a) {
    ad::Tape tape;
    ad::Tape::Scope scope(tape);
    Tensor l = Tensor::param({1, 6}, logits);
    Tensor lp = ad::gather_last(ad::log_softmax_last(l), {a});
    auto g = ad::grad(ad::sum_all(lp), std::vector<Tensor>{l});
    Tensor p = ad::softmax_last(Tensor::from({1, 6}, logits));
    for (int j = 0; j < 6; ++j) {
      const double expect = (j == a ? 1.0 : 0.0) - p.data()[j];
      CHECK(g.grads[0].data()[j] == doctest::Approx(expect).epsilon(1e-10));
    }
  }
}

TEST_CASE("tape determinism: identical inputs give bit-identical gradients") {
  auto run = [](std::vector<double>& out) {
    rng::Stream r(321);
    const std::vector<ad::Shape> shapes = {{4, 6}, {6}, {6, 3}, {3}};
    auto vals = random_mlp_params(r, shapes);
    std::vector<double> xin(8);
    for (auto& v : xin) v = r.uniform(-1, 1);
    ad::Tape tape;
    ad::Tape::Scope scope(tape);
    std::vector<Tensor> p;
    for (size_t i = 0; i < shapes.size(); ++i) p.push_back(Tensor::param(shapes[i], vals[i]));
    Tensor x = Tensor::from({2, 4}, xin);
    Tensor obj = ad::mean_all(ad::softmax_last(mlp_forward(x, p)));
    auto g = ad::grad(obj, p);
    out.clear();
    for (const auto& t : g.grads) out.insert(out.end(), t.data().begin(), t.data().end());
  };
  std::vector<double> a, b;
  run(a);
  run(b);
  REQUIRE(a.size() == b.size());
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("non-finite results raise a numeric error") {
  Tensor x = Tensor::from({2}, {0.0, 1.0});
  CHECK_THROWS_AS(ad::log(x), ad::NumericError);
}
