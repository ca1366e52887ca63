#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "modac/checks.hpp"
#include "modac/returns.hpp"
#include "modac/rng.hpp"

using namespace modac;

TEST_CASE("option return worked examples") {
  // no termination: plain sum plus bootstrap
  std::vector<double> r{0.5, 0.25}, b{0.0, 0.0};
  CHECK(metalearn::option_return(r, b, 2, 1.0) == doctest::Approx(1.75).epsilon(1e-12));

  // full termination zeroes every factor
  std::vector<double> b1{1.0, 1.0};
  CHECK(metalearn::option_return(r, b1, 2, 1.0) == 0.0);

  // beta = 0.5 everywhere: 0.5*1 + 0.25*1 + 0.125*2 = 1.0
  std::vector<double> r2{1.0, 1.0}, b2{0.5, 0.5};
  CHECK(metalearn::option_return(r2, b2, 2, 2.0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("manager return worked examples") {
  std::vector<double> r1{1.0};
  CHECK(metalearn::manager_return(r1, 1, 1.0, 0.0, 0.0, true) == doctest::Approx(1.0));

  // gamma=0.9, n=2, r=[0,1], c=0.05, v=0.5 -> 0.81 - 0.0405 + 0.3645
  std::vector<double> r2{0.0, 1.0};
  CHECK(metalearn::manager_return(r2, 2, 0.9, 0.05, 0.5, true) ==
        doctest::Approx(1.134).epsilon(1e-12));
}

TEST_CASE("switching cost enters as exactly gamma^n * c") {
  rng::Stream rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + rng.uniform_int(20);
    std::vector<double> rewards(static_cast<size_t>(n));
    for (auto& v : rewards) v = rng.uniform(-1, 1);
    const double gamma = rng.uniform(0.5, 1.0);
    const double c = rng.uniform(0.001, 0.2);
    const double vb = rng.uniform(-1, 1);
    const double with = metalearn::manager_return(rewards, n, gamma, c, vb, true);
    const double without = metalearn::manager_return(rewards, n, gamma, 0.0, vb, true);
    CHECK(std::fabs((without - with) - std::pow(gamma, n) * c) <= 1e-12);
    // and the switch flag alone removes the term entirely
    const double unswitched = metalearn::manager_return(rewards, n, gamma, c, vb, false);
    CHECK(unswitched == without);
  }
}

TEST_CASE("returns match the brute-force evaluators on 1000 random inputs") {
  auto rep = checks::return_oracle_check(1000, 99);
  CHECK(rep.samples == 1000);
  CHECK(rep.max_abs_err <= 1e-12);
}

TEST_CASE("graph route equals plain route, including running-product variant") {
  rng::Stream rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + rng.uniform_int(12);
    std::vector<double> r(static_cast<size_t>(n)), b(static_cast<size_t>(n));
    for (auto& v : r) v = rng.uniform(-1.5, 1.5);
    for (auto& v : b) v = rng.uniform(0.05, 0.95);
    const double vb = rng.uniform(-1, 1);
    for (bool running : {false, true}) {
      auto plain = metalearn::option_returns_all(r, b, vb, running);
      auto graph = metalearn::option_returns_graph(ad::Tensor::from({n}, r),
                                                   ad::Tensor::from({n}, b), vb, running);
      for (int m = 0; m < n; ++m)
        CHECK(std::fabs(plain[static_cast<size_t>(m)] -
                        graph.data()[static_cast<size_t>(m)]) <= 1e-12);
    }
  }
}

TEST_CASE("length mismatches raise") {
  std::vector<double> r{1.0}, b{0.5};
  CHECK_THROWS(metalearn::option_return(r, b, 2, 0.0));
  CHECK_THROWS(metalearn::manager_return(r, 2, 0.9, 0.0, 0.0, false));
  CHECK_THROWS(metalearn::option_returns_graph(ad::Tensor::from({2}, {1.0, 1.0}),
                                               ad::Tensor::from({1}, {0.5}), 0.0));
}

TEST_CASE("option-return gradients flow through rewards and betas") {
  ad::Tape tape;
  ad::Tape::Scope scope(tape);
  const int n = 4;
  ad::Tensor r = ad::Tensor::param({n}, {0.3, -0.2, 0.5, 0.1});
  ad::Tensor b = ad::Tensor::param({n}, {0.2, 0.4, 0.6, 0.3});
  ad::Tensor g = metalearn::option_returns_graph(r, b, 0.7);
  auto grads = ad::grad(ad::sum_all(g), std::vector<ad::Tensor>{r, b});
  REQUIRE(grads.all_connected());

  // finite differences over each coordinate
  auto value = [&](const std::vector<double>& rv, const std::vector<double>& bv) {
    auto all = metalearn::option_returns_all(rv, bv, 0.7);
    double s = 0;
    for (double v : all) s += v;
    return s;
  };
  std::vector<double> rv{0.3, -0.2, 0.5, 0.1}, bv{0.2, 0.4, 0.6, 0.3};
  const double h = 1e-6;
  for (int i = 0; i < n; ++i) {
    auto rp = rv, rm = rv;
    rp[static_cast<size_t>(i)] += h;
    rm[static_cast<size_t>(i)] -= h;
    CHECK(grads.grads[0].data()[static_cast<size_t>(i)] ==
          doctest::Approx((value(rp, bv) - value(rm, bv)) / (2 * h)).epsilon(1e-5));
    auto bp = bv, bm = bv;
    bp[static_cast<size_t>(i)] += h;
    bm[static_cast<size_t>(i)] -= h;
    CHECK(grads.grads[1].data()[static_cast<size_t>(i)] ==
          doctest::Approx((value(rv, bp) - value(rv, bm)) / (2 * h)).epsilon(1e-5));
  }
}
