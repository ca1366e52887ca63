#include "modac/returns.hpp"

#include <cmath>
#include <stdexcept>

namespace modac::metalearn {

namespace {
void check_lengths(size_t r, size_t b, int n, const char* who) {
  if (n < 1 || r < static_cast<size_t>(n) || b < static_cast<size_t>(n))
    throw std::runtime_error(std::string(who) + ": need n >= 1 values, got rewards " +
                             std::to_string(r) + " betas " + std::to_string(b) + " n " +
                             std::to_string(n));
}
}  // namespace

double option_return(std::span<const double> option_rewards, std::span<const double> betas,
                     int n, double v_boot, bool running_product) {
  check_lengths(option_rewards.size(), betas.size(), n, "option_return");
  double g = 0.0;
  if (!running_product) {
    for (int j = 1; j <= n; ++j) {
      double f = 1.0;
      const double b1 = 1.0 - betas[static_cast<size_t>(j - 1)];
      for (int k = 0; k < j; ++k) f *= b1;
      g += f * option_rewards[static_cast<size_t>(j - 1)];
    }
    double f = 1.0;
    const double b1 = 1.0 - betas[static_cast<size_t>(n - 1)];
    for (int k = 0; k < n + 1; ++k) f *= b1;
    g += f * v_boot;
  } else {
    double prod = 1.0;
    for (int j = 1; j <= n; ++j) {
      prod *= 1.0 - betas[static_cast<size_t>(j - 1)];
      g += prod * option_rewards[static_cast<size_t>(j - 1)];
    }
    g += prod * (1.0 - betas[static_cast<size_t>(n - 1)]) * v_boot;
  }
  return g;
}

std::vector<double> option_returns_all(std::span<const double> option_rewards,
                                       std::span<const double> betas, double v_boot,
                                       bool running_product) {
  const int n = static_cast<int>(option_rewards.size());
  check_lengths(option_rewards.size(), betas.size(), n, "option_returns_all");
  std::vector<double> out(static_cast<size_t>(n));
  for (int m = 0; m < n; ++m)
    out[static_cast<size_t>(m)] = option_return(option_rewards.subspan(static_cast<size_t>(m)),
                                                betas.subspan(static_cast<size_t>(m)), n - m,
                                                v_boot, running_product);
  return out;
}

double manager_return(std::span<const double> task_rewards, int n, double gamma,
                      double switching_cost, double v_boot, bool switch_occurred) {
  if (n < 1 || task_rewards.size() < static_cast<size_t>(n))
    throw std::runtime_error("manager_return: need n >= 1 rewards, got " +
                             std::to_string(task_rewards.size()) + " n " + std::to_string(n));
  double g = 0.0;
  double gp = 1.0;
  for (int j = 1; j <= n; ++j) {
    gp *= gamma;
    g += gp * task_rewards[static_cast<size_t>(j - 1)];
  }
  if (switch_occurred) g -= gp * switching_cost;
  g += gp * gamma * v_boot;
  return g;
}

ad::Tensor option_returns_graph(const ad::Tensor& option_rewards, const ad::Tensor& betas,
                                double v_boot, bool running_product) {
  if (option_rewards.rank() != 1 || betas.shape() != option_rewards.shape())
    throw ad::ShapeError("option_returns_graph: rewards/betas must be matching vectors");
  const int n = option_rewards.dim(0);
  if (n < 1) throw ad::ShapeError("option_returns_graph: empty segment");
  ad::Tensor keep = ad::sadd(ad::neg(betas), 1.0);  // 1 - beta, in (0,1)

  if (!running_product) {
    // G[m] = sum_{k>=m} keep[k]^(k-m+1) r[k] + keep[n-1]^(n-m+1) v_boot
    ad::Tensor rows = ad::matmul(ad::Tensor::full({n, 1}, 1.0), ad::reshape(keep, {1, n}));
    std::vector<double> exps(static_cast<size_t>(n) * n, 0.0);
    std::vector<double> mask(static_cast<size_t>(n) * n, 0.0);
    for (int m = 0; m < n; ++m)
      for (int k = m; k < n; ++k) {
        exps[static_cast<size_t>(m) * n + k] = static_cast<double>(k - m + 1);
        mask[static_cast<size_t>(m) * n + k] = 1.0;
      }
    ad::Tensor coeff = ad::mul(ad::pow_exps(rows, std::move(exps)),
                               ad::Tensor::from({n, n}, std::move(mask)));
    ad::Tensor g = ad::reshape(ad::matmul(coeff, ad::reshape(option_rewards, {n, 1})), {n});
    std::vector<double> boot_exps(static_cast<size_t>(n));
    for (int m = 0; m < n; ++m) boot_exps[static_cast<size_t>(m)] = static_cast<double>(n - m + 1);
    ad::Tensor boot = ad::smul(
        ad::pow_exps(ad::bcast_to(ad::slice(keep, 0, n - 1, 1), {n}), std::move(boot_exps)),
        v_boot);
    return ad::add(std::move(g), std::move(boot));
  }

  // running product: G[m] = (S[m] + P[n-1]*keep[n-1]*v_boot) / P[m-1],
  // with P the cumulative product of keep and S its weighted suffix sum
  std::vector<ad::Tensor> cps;
  cps.push_back(ad::slice(keep, 0, 0, 1));
  for (int k = 1; k < n; ++k)
    cps.push_back(ad::mul(cps.back(), ad::slice(keep, 0, k, 1)));
  ad::Tensor cp = n == 1 ? cps[0] : ad::concat(cps, 0);
  ad::Tensor weighted = ad::mul(cp, option_rewards);
  std::vector<double> upper(static_cast<size_t>(n) * n, 0.0);
  for (int m = 0; m < n; ++m)
    for (int k = m; k < n; ++k) upper[static_cast<size_t>(m) * n + k] = 1.0;
  ad::Tensor suffix =
      ad::reshape(ad::matmul(ad::Tensor::from({n, n}, std::move(upper)),
                             ad::reshape(weighted, {n, 1})),
                  {n});
  ad::Tensor boot = ad::smul(ad::mul(ad::slice(cp, 0, n - 1, 1), ad::slice(keep, 0, n - 1, 1)),
                             v_boot);
  ad::Tensor numer = ad::add(suffix, ad::bcast_to(boot, {n}));
  std::vector<ad::Tensor> shifted{ad::Tensor::full({1}, 1.0)};
  if (n > 1) shifted.push_back(ad::slice(cp, 0, 0, n - 1));
  ad::Tensor denom = n == 1 ? shifted[0] : ad::concat(shifted, 0);
  return ad::div(numer, denom);
}

}  // namespace modac::metalearn
