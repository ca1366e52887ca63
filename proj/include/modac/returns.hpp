#pragma once

// n-step returns for the option policies and the manager.
//
// Option return for a segment of length n starting at t (arrays are aligned
// so index j-1 holds the step-(t+j) quantity):
//   G_t = sum_{j=1..n} (1 - beta[t+j])^j * r[t+j] + (1 - beta[t+n])^(n+1) * v_boot
// Each step's own termination is raised to its step offset; the running-
// product form (a true discounted product of distinct terminations) is kept
// behind a flag for sensitivity runs.
//
// Manager return over a control segment of length n (task rewards):
//   G_t = sum_{j=1..n} gamma^j * r[t+j] - gamma^n * c + gamma^(n+1) * v_boot
// with the switching cost c applied only when the segment ended by an
// actual termination during the training phase.

#include <span>
#include <vector>

#include "modac/tensor.hpp"

namespace modac::metalearn {

double option_return(std::span<const double> option_rewards, std::span<const double> betas,
                     int n, double v_boot, bool running_product = false);

// per-step returns for every offset within the segment (index m gives G at
// the m-th segment state, looking ahead to the segment end)
std::vector<double> option_returns_all(std::span<const double> option_rewards,
                                       std::span<const double> betas, double v_boot,
                                       bool running_product = false);

double manager_return(std::span<const double> task_rewards, int n, double gamma,
                      double switching_cost, double v_boot, bool switch_occurred);

// graph-recorded counterpart of option_returns_all over live reward and
// termination tensors (both [n]); this is what the inner loss consumes so
// the meta-gradient path through both networks stays intact
ad::Tensor option_returns_graph(const ad::Tensor& option_rewards, const ad::Tensor& betas,
                                double v_boot, bool running_product = false);

}  // namespace modac::metalearn
