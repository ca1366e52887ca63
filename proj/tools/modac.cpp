// Command-line front end: train / transfer / sweep / viz / selftest.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "modac/config.hpp"
#include "modac/harness.hpp"
#include "modac/tensor.hpp"
#include "modac/viz.hpp"

namespace {

modac::config::Config load_config(const std::string& path,
                                  const std::vector<std::string>& overrides) {
  modac::config::Config c =
      path.empty() ? modac::config::Config{} : modac::config::Config::parse_file(path);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw modac::config::ConfigError("--set expects key=value, got '" + kv + "'");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"meta-gradient option discovery on gridworlds"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "runs/out", checkpoint_dir, run_dir, axis;
  std::vector<std::string> overrides;
  std::vector<double> sweep_values;
  long seed_flag = -1;
  int jobs = 1;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "config file (key = value lines)");
    cmd->add_option("--set", overrides, "override, e.g. --set train.lr=0.001")->take_all();
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--seed", seed_flag, "override run.seeds with a single seed");
  };

  auto* train = app.add_subcommand("train", "run the training phase");
  add_common(train);
  auto* transfer = app.add_subcommand("transfer", "run the transfer phase on test tasks");
  add_common(transfer);
  transfer->add_option("--checkpoint", checkpoint_dir, "trained checkpoint directory");
  auto* sweep = app.add_subcommand("sweep", "train+transfer over one config axis");
  add_common(sweep);
  sweep->add_option("--axis", axis, "config key to sweep")->required();
  sweep->add_option("--values", sweep_values, "comma-separated values")
      ->required()
      ->delimiter(',');
  sweep->add_option("--jobs", jobs, "parallel pipelines");
  auto* viz = app.add_subcommand("viz", "render CSV/SVG artifacts for a run");
  viz->add_option("--run", run_dir, "run directory")->required();
  viz->add_option("--out", out_dir, "artifact directory");
  auto* selftest = app.add_subcommand("selftest", "finite-difference and oracle suites");

  CLI11_PARSE(app, argc, argv);

  try {
    if (selftest->parsed()) {
      const int failures = modac::harness::selftest(true);
      std::printf("%s\n", failures == 0 ? "selftest: all checks passed"
                                        : "selftest: FAILURES present");
      return failures == 0 ? 0 : 3;
    }
    if (viz->parsed()) {
      modac::viz::render_run(run_dir, out_dir);
      std::printf("artifacts written to %s\n", out_dir.c_str());
      return 0;
    }

    auto raw = load_config(config_path, overrides);
    if (seed_flag >= 0) raw.set("run.seeds", std::to_string(seed_flag));
    auto cfg = modac::harness::ExperimentConfig::load(raw);

    if (train->parsed()) {
      for (long s : cfg.seeds) {
        const std::string dir =
            cfg.seeds.size() == 1 ? out_dir : out_dir + "/seed_" + std::to_string(s);
        auto rec = modac::harness::train_phase(cfg, static_cast<std::uint64_t>(s), dir);
        std::printf("train seed=%ld dir=%s wall=%.1fs\n", s, rec.dir.c_str(),
                    rec.wall_seconds);
      }
      return 0;
    }
    if (transfer->parsed()) {
      for (long s : cfg.seeds) {
        const std::string dir =
            cfg.seeds.size() == 1 ? out_dir : out_dir + "/seed_" + std::to_string(s);
        auto rec = modac::harness::transfer_phase(cfg, checkpoint_dir,
                                                  static_cast<std::uint64_t>(s), dir);
        std::printf("transfer seed=%ld dir=%s wall=%.1fs\n", s, rec.dir.c_str(),
                    rec.wall_seconds);
      }
      return 0;
    }
    if (sweep->parsed()) {
      auto result = modac::harness::sweep(raw, axis, sweep_values, out_dir, jobs);
      std::printf("sweep summary: %s\n", result.summary_csv.c_str());
      for (double v : sweep_values)
        std::printf("  %s=%g mean transfer AUC %.4f\n", axis.c_str(), v, result.mean_auc(v));
      return 0;
    }
  } catch (const modac::config::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const modac::ad::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
