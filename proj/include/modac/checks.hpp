#pragma once

// Independent oracles and finite-difference verification harnesses. The
// evaluators here are deliberate re-transcriptions kept separate from the
// production return/gradient code paths; the CLI selftest and the
// acceptance suite both run them.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "modac/metalearn.hpp"

namespace modac::checks {

// literal evaluations of the return definitions, written against std::pow
double brute_option_return(std::span<const double> rewards, std::span<const double> betas,
                           int n, double v_boot);
double brute_option_return_running(std::span<const double> rewards,
                                   std::span<const double> betas, int n, double v_boot);
double brute_manager_return(std::span<const double> rewards, int n, double gamma, double cost,
                            double v_boot, bool switched);

struct OracleReport {
  int samples = 0;
  double max_abs_err = 0.0;
  bool pass(double tol) const { return max_abs_err <= tol; }
};

// production returns (plain and graph routes) vs the brute evaluators on
// random inputs
OracleReport return_oracle_check(int samples, std::uint64_t seed);

struct FdReport {
  int num_params = 0;
  double rel_l2_err = 0.0;     // |g_ad - g_fd| / max(|g_fd|, eps)
  double max_elem_err = 0.0;   // worst per-element relative error (floored)
  double grad_norm = 0.0;
  bool pass(double tol) const { return rel_l2_err <= tol; }
};

// first- and second-order autodiff spot checks on a random MLP
FdReport autodiff_first_order_check(std::uint64_t seed);
FdReport autodiff_second_order_check(std::uint64_t seed);

// Meta-gradient verification: collects real experience on a miniature
// multi-room grid with networks under 200 parameters each, runs L recorded
// inner updates followed by the validation objective, and compares the
// implemented d(objective)/d(eta) against central finite differences of the
// same composite with every stop-gradient quantity pinned to the reference
// pass.
struct MetaFdConfig {
  int num_options = 2;   // K
  int inner_steps = 5;   // L
  std::uint64_t seed = 0;
  double fd_step = 1e-5;
};

FdReport meta_gradient_fd_check(const MetaFdConfig& cfg);

}  // namespace modac::checks
