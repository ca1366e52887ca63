#pragma once

// Comparison agents: Flat actor-critic, fixed time-scale shared hierarchies
// (MLSH-style), and a multi-task option-critic with deliberation cost. All
// of them share the networks, optimizer, env interfaces and per-frame
// accounting of the main agent.

#include <span>

#include "modac/metalearn.hpp"

namespace modac::baselines {

// standard n-step advantage actor-critic on primitive actions; the driver
// reaches this through the manager update with K = 0
metalearn::InnerUpdateStats flat_step(nets::ParamSet& theta, const nets::NetworkSpec& spec,
                                      std::span<const agent::Chunk> batch,
                                      const metalearn::TrainHp& hp,
                                      nets::RmsPropState& opt_state);

// workers trained on task reward over their fixed-duration segments
metalearn::InnerUpdateStats mlsh_step(nets::ParamSet& theta, const nets::NetworkSpec& spec,
                                      std::span<const agent::Chunk> batch,
                                      const metalearn::TrainHp& hp,
                                      nets::RmsPropState& opt_state);

// workers on task reward plus an advantage-based termination update: the
// termination loss is beta(s') * sg(v_w(s') - v_M(s', g) + deliberation_cost)
metalearn::InnerUpdateStats option_critic_step(
    nets::ParamSet& theta, nets::ParamSet& terminations, const nets::ParamSet& manager,
    const nets::NetworkSpec& spec, std::span<const agent::Chunk> batch,
    const metalearn::TrainHp& hp, double deliberation_cost, nets::RmsPropState& opt_state,
    nets::RmsPropState& term_state);

// exposed for the termination finite-difference test
double option_critic_termination_loss(const nets::ParamSet& terminations,
                                      const nets::NetworkSpec& spec,
                                      std::span<const agent::Chunk> batch,
                                      const nets::ParamSet& theta,
                                      const nets::ParamSet& manager,
                                      double deliberation_cost);

}  // namespace modac::baselines
