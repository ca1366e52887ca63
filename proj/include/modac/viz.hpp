#pragma once

// SVG/CSV artifacts: per-option arrow maps with termination overlays, usage
// histograms, and learning curves. Plots are derived views; every plotted
// number is written to a CSV first.

#include <string>
#include <vector>

#include "modac/agent.hpp"
#include "modac/metalearn.hpp"

namespace modac::viz {

// option_maps.csv plus option_map_<k>.svg per option; one arrow per open
// cell, beta as the cell shading
std::vector<std::string> write_option_maps(const std::string& dir,
                                           const nets::NetworkSpec& spec,
                                           const nets::ParamSet& options,
                                           const nets::ParamSet* terminations,
                                           const env::GridLayout& layout);

// usage histogram in the blue-options / red-primitives style, one panel per
// snapshot row
std::string write_usage_histogram(const std::string& dir,
                                  const std::vector<std::pair<long, std::vector<double>>>&
                                      snapshots,
                                  int num_options, int num_actions);

struct CurveSeries {
  std::string label;
  std::vector<long> frames;
  std::vector<double> mean;
  std::vector<double> band;  // shaded half-width (sem or range)
};

// curve_<name>.csv + curve_<name>.svg; the x axis spans [0, frame_budget]
std::string write_curves(const std::string& dir, const std::string& name,
                         const std::vector<CurveSeries>& series, long frame_budget);

// aggregates per-seed metric rows into mean +- sem at each row index
CurveSeries aggregate_runs(const std::string& label,
                           const std::vector<std::vector<metalearn::MetricsRow>>& runs);

// renders the standard artifacts for one run directory (train or transfer)
void render_run(const std::string& run_dir, const std::string& out_dir);

}  // namespace modac::viz
