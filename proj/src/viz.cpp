#include "modac/viz.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "modac/harness.hpp"

namespace modac::viz {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// unit arrow centred at the origin, pointing per action (up/down/left/right)
std::string arrow_path(int action, double cx, double cy, double r) {
  const double dx = env::kActionDx[action] * r;
  const double dy = env::kActionDy[action] * r;
  // shaft plus a small head
  const double hx = -dy * 0.45, hy = dx * 0.45;
  std::ostringstream os;
  os << "M " << fmt(cx - dx) << " " << fmt(cy - dy) << " L " << fmt(cx + dx) << " "
     << fmt(cy + dy) << " M " << fmt(cx + dx * 0.2 + hx) << " " << fmt(cy + dy * 0.2 + hy)
     << " L " << fmt(cx + dx) << " " << fmt(cy + dy) << " L " << fmt(cx + dx * 0.2 - hx)
     << " " << fmt(cy + dy * 0.2 - hy);
  return os.str();
}

}  // namespace

std::vector<std::string> write_option_maps(const std::string& dir,
                                           const nets::NetworkSpec& spec,
                                           const nets::ParamSet& options,
                                           const nets::ParamSet* terminations,
                                           const env::GridLayout& layout) {
  fs::create_directories(dir);
  auto maps = agent::option_maps(spec, options, terminations, layout);

  std::ofstream csv(fs::path(dir) / "option_maps.csv");
  csv << "option,x,y,argmax_action,beta\n";
  for (const auto& m : maps)
    for (size_t i = 0; i < m.cells.size(); ++i)
      csv << m.option << "," << layout.cell_x(m.cells[i]) << "," << layout.cell_y(m.cells[i])
          << "," << m.argmax_action[i] << "," << fmt(m.beta[i]) << "\n";

  std::vector<std::string> files{(fs::path(dir) / "option_maps.csv").string()};
  const int cell = 24;
  for (const auto& m : maps) {
    const std::string name = "option_map_" + std::to_string(m.option) + ".svg";
    std::ofstream svg(fs::path(dir) / name);
    svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << layout.width * cell
        << "' height='" << layout.height * cell << "' data-option='" << m.option << "'>\n";
    for (int y = 0; y < layout.height; ++y)
      for (int x = 0; x < layout.width; ++x)
        if (layout.wall(x, y))
          svg << "<rect x='" << x * cell << "' y='" << y * cell << "' width='" << cell
              << "' height='" << cell << "' fill='#333333'/>\n";
    for (size_t i = 0; i < m.cells.size(); ++i) {
      const int x = layout.cell_x(m.cells[i]);
      const int y = layout.cell_y(m.cells[i]);
      // termination probability as a red overlay on the open cell
      svg << "<rect class='beta' x='" << x * cell << "' y='" << y * cell << "' width='"
          << cell << "' height='" << cell << "' fill='#d62728' fill-opacity='"
          << fmt(m.beta[i]) << "' data-beta='" << fmt(m.beta[i]) << "'/>\n";
      svg << "<path class='arrow' d='"
          << arrow_path(m.argmax_action[i], (x + 0.5) * cell, (y + 0.5) * cell, cell * 0.32)
          << "' stroke='#111111' stroke-width='1.6' fill='none'/>\n";
    }
    svg << "</svg>\n";
    files.push_back((fs::path(dir) / name).string());
  }
  return files;
}

std::string write_usage_histogram(
    const std::string& dir,
    const std::vector<std::pair<long, std::vector<double>>>& snapshots, int num_options,
    int num_actions) {
  fs::create_directories(dir);
  {
    std::ofstream csv(fs::path(dir) / "usage_hist.csv");
    csv << "snapshot,frames";
    for (int i = 0; i < num_options + num_actions; ++i) csv << ",choice_hist_" << i;
    csv << "\n";
    for (size_t s = 0; s < snapshots.size(); ++s) {
      csv << s << "," << snapshots[s].first;
      for (double v : snapshots[s].second) csv << "," << fmt(v);
      csv << "\n";
    }
  }
  const int bar_w = 22, panel_h = 120, gap = 30;
  const int bars = num_options + num_actions;
  const int panel_w = bars * (bar_w + 4) + 40;
  const int width = panel_w;
  const int height = static_cast<int>(snapshots.size()) * (panel_h + gap) + 20;
  const std::string path = (fs::path(dir) / "usage_hist.svg").string();
  std::ofstream svg(path);
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
      << "'>\n";
  for (size_t s = 0; s < snapshots.size(); ++s) {
    const int top = static_cast<int>(s) * (panel_h + gap) + 10;
    svg << "<text x='4' y='" << top + 10 << "' font-size='11'>frames "
        << snapshots[s].first << "</text>\n";
    for (int i = 0; i < bars; ++i) {
      const double v = snapshots[s].second[static_cast<size_t>(i)];
      const int h = static_cast<int>(std::lround(v * (panel_h - 20)));
      const char* color = i < num_options ? "#1f77b4" : "#d62728";
      svg << "<rect class='bar' x='" << 20 + i * (bar_w + 4) << "' y='"
          << top + panel_h - h << "' width='" << bar_w << "' height='" << h << "' fill='"
          << color << "' data-value='" << fmt(v) << "'/>\n";
    }
  }
  svg << "</svg>\n";
  return path;
}

std::string write_curves(const std::string& dir, const std::string& name,
                         const std::vector<CurveSeries>& series, long frame_budget) {
  if (series.empty()) throw std::runtime_error("write_curves: no series for " + name);
  for (const auto& s : series)
    if (s.frames.empty())
      throw std::runtime_error("write_curves: series '" + s.label + "' has no data");
  fs::create_directories(dir);
  {
    std::ofstream csv(fs::path(dir) / ("curve_" + name + ".csv"));
    csv << "series,frames,mean,band\n";
    for (const auto& s : series)
      for (size_t i = 0; i < s.frames.size(); ++i)
        csv << s.label << "," << s.frames[i] << "," << fmt(s.mean[i]) << "," << fmt(s.band[i])
            << "\n";
  }

  const int width = 560, height = 320, ml = 50, mb = 30, mt = 14, mr = 10;
  double ymax = 1e-9, ymin = 0.0;
  for (const auto& s : series)
    for (size_t i = 0; i < s.mean.size(); ++i) {
      ymax = std::max(ymax, s.mean[i] + s.band[i]);
      ymin = std::min(ymin, s.mean[i] - s.band[i]);
    }
  const double xspan = static_cast<double>(frame_budget);
  auto px = [&](double f) { return ml + (width - ml - mr) * (f / xspan); };
  auto py = [&](double v) {
    return mt + (height - mt - mb) * (1.0 - (v - ymin) / (ymax - ymin));
  };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"};

  const std::string path = (fs::path(dir) / ("curve_" + name + ".svg")).string();
  std::ofstream svg(path);
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
      << "' data-frame-max='" << frame_budget << "'>\n";
  svg << "<line x1='" << ml << "' y1='" << height - mb << "' x2='" << width - mr << "' y2='"
      << height - mb << "' stroke='#444'/>\n";
  svg << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << height - mb
      << "' stroke='#444'/>\n";
  svg << "<text x='" << width - mr - 60 << "' y='" << height - 8 << "' font-size='10'>"
      << frame_budget << " frames</text>\n";
  svg << "<text x='4' y='" << mt + 8 << "' font-size='10'>" << fmt(ymax) << "</text>\n";
  svg << "<text x='4' y='" << height - mb << "' font-size='10'>" << fmt(ymin) << "</text>\n";

  for (size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = palette[si % 5];
    std::ostringstream band, line;
    band << "<path class='band' fill='" << color << "' fill-opacity='0.18' stroke='none' d='M";
    for (size_t i = 0; i < s.frames.size(); ++i)
      band << " " << fmt(px(static_cast<double>(s.frames[i]))) << " "
           << fmt(py(s.mean[i] + s.band[i]));
    for (size_t i = s.frames.size(); i-- > 0;)
      band << " L " << fmt(px(static_cast<double>(s.frames[i]))) << " "
           << fmt(py(s.mean[i] - s.band[i]));
    band << " Z'/>";
    line << "<polyline class='mean' fill='none' stroke='" << color
         << "' stroke-width='1.6' points='";
    for (size_t i = 0; i < s.frames.size(); ++i)
      line << fmt(px(static_cast<double>(s.frames[i]))) << ","
           << fmt(py(s.mean[i])) << " ";
    line << "'/>";
    svg << band.str() << "\n" << line.str() << "\n";
    svg << "<text x='" << ml + 8 << "' y='" << mt + 14 + 14 * static_cast<int>(si)
        << "' font-size='11' fill='" << color << "'>" << s.label << "</text>\n";
  }
  svg << "</svg>\n";
  return path;
}

CurveSeries aggregate_runs(const std::string& label,
                           const std::vector<std::vector<metalearn::MetricsRow>>& runs) {
  CurveSeries out;
  out.label = label;
  if (runs.empty()) return out;
  size_t rows = runs[0].size();
  for (const auto& r : runs) rows = std::min(rows, r.size());
  for (size_t i = 0; i < rows; ++i) {
    double sum = 0;
    for (const auto& r : runs) sum += r[i].episode_return_mean;
    const double mean = sum / static_cast<double>(runs.size());
    double ss = 0;
    for (const auto& r : runs) {
      const double d = r[i].episode_return_mean - mean;
      ss += d * d;
    }
    const double sem = runs.size() > 1 ? std::sqrt(ss / static_cast<double>(runs.size() - 1)) /
                                             std::sqrt(static_cast<double>(runs.size()))
                                       : 0.0;
    out.frames.push_back(runs[0][i].frames);
    out.mean.push_back(mean);
    out.band.push_back(sem);
  }
  return out;
}

void render_run(const std::string& run_dir, const std::string& out_dir) {
  namespace hs = harness;
  auto rec = hs::RunRecord::load(run_dir);
  fs::create_directories(out_dir);

  bool any_curve = false;
  for (const auto& csv : rec.metrics_csvs) {
    auto rows = hs::read_metrics_csv((fs::path(run_dir) / csv).string());
    if (rows.empty()) continue;
    CurveSeries s;
    s.label = fs::path(csv).stem().string();
    for (const auto& r : rows) {
      s.frames.push_back(r.frames);
      s.mean.push_back(r.episode_return_mean);
      s.band.push_back(r.episode_return_sem);
    }
    write_curves(out_dir, s.label, {s}, rows.back().frames);
    any_curve = true;

    // usage snapshots at the start, middle and end of the metric stream
    std::vector<std::pair<long, std::vector<double>>> snaps;
    for (size_t i : {size_t{0}, rows.size() / 2, rows.size() - 1})
      snaps.emplace_back(rows[i].frames, rows[i].choice_hist);
    const int hist = static_cast<int>(rows[0].choice_hist.size());
    write_usage_histogram(out_dir, snaps, hist - env::kNumActions, env::kNumActions);
  }
  if (!any_curve)
    throw std::runtime_error("render_run: no metric series found in " + run_dir);

  // option maps from the final checkpoint, when present
  for (const auto& c : rec.checkpoints) {
    if (c != "checkpoint_final") continue;
    auto ck = nets::load_checkpoint((fs::path(run_dir) / c).string());
    const auto* options = ck.find("options");
    if (!options) break;
    const auto* terminations = ck.find("terminations");
    // the grid comes from the config copy next to the metrics
    auto cfg = harness::ExperimentConfig::load(
        config::Config::parse_file((fs::path(run_dir) / "config.cfg").string()));
    auto world = cfg.world();
    write_option_maps(out_dir, cfg.make_spec(), *options, terminations, *world.layout);
    break;
  }
}

}  // namespace modac::viz
