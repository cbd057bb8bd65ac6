// Experiment runner.
//
//   fedmosaic run --config pathological.toml [--modes local_only,fedmosaic]
//                 [--outdir out] [--dry-run]
//
// Exit codes: 0 success, 2 config error, 3 training divergence, 1 other.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedmosaic/experiment.hpp"

namespace fs = std::filesystem;
using namespace fedmosaic;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;

std::vector<Mode> parse_modes(const std::string& list) {
  std::vector<Mode> modes;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      modes.push_back(mode_from_string(item));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("--modes: ") + e.what());
    }
  }
  if (modes.empty()) throw ConfigError("--modes: empty mode list");
  return modes;
}

/// Removes every directory this invocation created, deepest first.
class OutputGuard {
 public:
  void track(const fs::path& p) {
    std::lock_guard lock(mu_);
    fs::path cur;
    for (const auto& part : p) {
      cur /= part;
      if (!fs::exists(cur)) created_.push_back(cur);
    }
  }
  void rollback() {
    for (auto it = created_.rbegin(); it != created_.rend(); ++it) {
      std::error_code ec;
      fs::remove_all(*it, ec);
    }
  }

 private:
  std::mutex mu_;
  std::vector<fs::path> created_;
};

int run(const std::string& config_path, const std::string& modes_arg,
        const std::string& outdir_arg, bool dry_run) {
  ExperimentConfig cfg = load_config(config_path);
  if (!modes_arg.empty()) cfg.modes = parse_modes(modes_arg);
  if (!outdir_arg.empty()) cfg.outdir = outdir_arg;
  if (cfg.protocol.dp &&
      std::find(cfg.modes.begin(), cfg.modes.end(), Mode::kFedMosaic) == cfg.modes.end())
    std::cerr << "note: [dp] ignored, fedmosaic is not among the requested modes\n";

  if (dry_run) {
    std::cout << "modes:";
    for (auto m : cfg.modes) std::cout << ' ' << to_string(m);
    std::cout << "\nrounds: " << cfg.protocol.num_rounds
              << ", sync period: " << cfg.protocol.sync_period << '\n';
    for (auto seed : cfg.seeds) std::cout << resolved_scenario_text(cfg, build_scenario(cfg, seed));
    return 0;
  }

  OutputGuard guard;
  try {
    struct Job {
      std::size_t mode_index;
      std::size_t seed_index;
    };
    std::vector<Job> jobs;
    for (std::size_t mi = 0; mi < cfg.modes.size(); ++mi)
      for (std::size_t si = 0; si < cfg.seeds.size(); ++si) jobs.push_back({mi, si});

    std::vector<Scenario> scenarios;
    for (auto seed : cfg.seeds) scenarios.push_back(build_scenario(cfg, seed));

    std::vector<std::pair<Mode, std::vector<RunRecord>>> records;
    for (auto m : cfg.modes) records.emplace_back(m, std::vector<RunRecord>(cfg.seeds.size()));

    const fs::path outdir(cfg.outdir);
    guard.track(outdir);
    std::mutex log_mu;
    detail::parallel_for(jobs.size(), cfg.jobs, [&](std::size_t k) {
      const auto [mi, si] = jobs[k];
      const Mode mode = cfg.modes[mi];
      const auto& sc = scenarios[si];
      RunRecord rec = run_mode(cfg, sc, mode);
      const fs::path dir = outdir / to_string(mode) / std::to_string(sc.seed);
      guard.track(dir);
      write_run_artifacts(dir, rec, manifest(cfg, sc));
      {
        std::lock_guard lock(log_mu);
        std::cout << to_string(mode) << " seed " << sc.seed << ": mean test accuracy "
                  << rec.mean_final_accuracy() << '\n';
      }
      records[mi].second[si] = std::move(rec);
    });

    std::ofstream summary(outdir / "summary.csv");
    if (!summary) throw std::runtime_error("cannot write summary.csv");
    write_summary_csv(summary, summarize(records));
    std::ofstream(outdir / "config.toml") << serialize_config(cfg);
  } catch (...) {
    guard.rollback();
    throw;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated co-training simulator"};
  app.require_subcommand(1);
  auto* run_cmd = app.add_subcommand("run", "run the experiments described by a config file");
  std::string config_path, modes, outdir;
  bool dry_run = false;
  run_cmd->add_option("--config", config_path, "experiment config (TOML subset)")->required();
  run_cmd->add_option("--modes", modes,
                      "comma-separated modes: fedmosaic,fedct_majority,local_only,centralized");
  run_cmd->add_option("--outdir", outdir, "output directory (overrides the config)");
  run_cmd->add_flag("--dry-run", dry_run, "print the resolved scenario and exit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    return run(config_path, modes, outdir, dry_run);
  } catch (const ConfigError& e) {
    std::cerr << config_path << ": " << e.what() << '\n';
    return kExitConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
