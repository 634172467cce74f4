// Command-line front end for the experiment grid: `run` trains and measures
// every dataset x architecture x seed cell, `analyze` pools existing manifests
// into the statistical report, `ablate` recomputes the grouping ablation from
// saved checkpoints, and `report` re-emits the full CSV/JSON artifact set.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "vaecirc/pipeline.hpp"

namespace {

using namespace vaecirc;

ExperimentConfig load_config(const std::string& config_path, const std::string& out_dir,
                             long long seed_override) {
  ExperimentConfig cfg =
      config_path.empty() ? default_config() : config_from_json_file(config_path);
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  if (seed_override >= 0)
    cfg.seeds = {static_cast<std::uint64_t>(seed_override)};
  return cfg;
}

std::vector<RunManifest> load_manifests(const std::string& out_dir) {
  const std::string dir = out_dir + "/manifests";
  if (!std::filesystem::is_directory(dir))
    throw std::invalid_argument("no manifest directory at " + dir);
  std::vector<std::string> paths;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.path().extension() == ".json") paths.push_back(entry.path().string());
  std::sort(paths.begin(), paths.end());
  std::vector<RunManifest> manifests;
  manifests.reserve(paths.size());
  for (const std::string& p : paths) manifests.push_back(manifest_from_json_file(p));
  return manifests;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text << "\n";
}

int cmd_run(const ExperimentConfig& cfg, std::size_t jobs) {
  const GridResult grid = run_grid(cfg, jobs, /*write_outputs=*/true);
  for (const std::string& w : grid.warnings) std::cerr << "warning: " << w << "\n";
  std::size_t failures = 0;
  for (const RunManifest& m : grid.manifests) {
    if (m.failed) {
      ++failures;
      std::cout << "FAIL " << m.id << ": " << m.error << "\n";
    } else {
      std::printf("ok   %s  mse=%.6g ces=%.4f mod=%.4f fgd=%.4f nis=%g (%.1fs)\n",
                  m.id.c_str(), m.final_mse, m.metrics.ces_mean,
                  m.metrics.modularity_score, m.metrics.fgd_score, m.nis,
                  m.wall_clock_seconds);
    }
  }
  const ComparisonReport report = aggregate(grid.manifests);
  emit_reports(report, grid.manifests, cfg.out_dir);
  std::cout << grid.manifests.size() << " run(s), " << failures << " failure(s); reports in "
            << cfg.out_dir << "\n";
  return failures == 0 ? 0 : 1;
}

int cmd_analyze(const std::string& out_dir) {
  const std::vector<RunManifest> manifests = load_manifests(out_dir);
  const ComparisonReport report = aggregate(manifests);
  for (const std::string& w : report.warnings) std::cerr << "warning: " << w << "\n";
  write_text(out_dir + "/summary.json", report_to_json(report));
  std::cout << "aggregated " << manifests.size() << " manifest(s): "
            << report.pairwise.size() << " pairwise test(s), "
            << report.correlations.size() << " correlation cell(s)\n";
  if (report.ces_mse.defined)
    std::printf("ces vs mse: r=%.4f p=%.4g n=%zu\n", report.ces_mse.r, report.ces_mse.p,
                report.ces_mse.n);
  return 0;
}

int cmd_ablate(const ExperimentConfig& cfg) {
  std::vector<RunManifest> manifests = load_manifests(cfg.out_dir);
  std::map<std::string, DatasetBundle> bundles;
  for (const DatasetSpecConfig& spec : cfg.datasets)
    bundles.emplace(spec.name, build_dataset(spec));
  std::size_t updated = 0;
  for (RunManifest& m : manifests) {
    if (m.failed) continue;
    const auto it = bundles.find(m.dataset);
    if (it == bundles.end()) {
      std::cerr << "warning: " << m.id << ": dataset not in config, skipped\n";
      continue;
    }
    const std::string model_path = cfg.out_dir + "/runs/" + m.id + "/model.bin";
    if (!std::filesystem::exists(model_path)) {
      std::cerr << "warning: " << m.id << ": no checkpoint at " << model_path << "\n";
      continue;
    }
    const TrainedModel model = load_model(model_path);
    InterventionConfig icfg = cfg.intervention;
    icfg.seed = m.seed;
    icfg.eval_rows =
        heldout_split(it->second.n_rows(), cfg.train.heldout_fraction, m.seed).heldout;
    m.ablation = grouping_ablation(model, it->second, icfg, cfg.ablation.permutations);
    write_text(cfg.out_dir + "/manifests/" + m.id + ".json", manifest_to_json(m));
    ++updated;
  }
  const ComparisonReport report = aggregate(manifests);
  emit_reports(report, manifests, cfg.out_dir);
  std::cout << "ablation recomputed for " << updated << " run(s)\n";
  return 0;
}

int cmd_report(const std::string& out_dir) {
  const std::vector<RunManifest> manifests = load_manifests(out_dir);
  const ComparisonReport report = aggregate(manifests);
  emit_reports(report, manifests, out_dir);
  std::cout << "reports written to " << out_dir << " from " << manifests.size()
            << " manifest(s)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"VAE circuit laboratory: train the variant grid, intervene, aggregate"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::size_t jobs = 1;
  long long seed_override = -1;

  auto add_config_flags = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config JSON (defaults built in)");
    sub->add_option("--out", out_dir, "output directory (overrides the config)");
  };

  CLI::App* run = app.add_subcommand("run", "train and measure the full grid");
  add_config_flags(run);
  run->add_option("--jobs", jobs, "max concurrent grid cells")->check(CLI::PositiveNumber);
  run->add_option("--seed-override", seed_override, "replace the seed list with one seed");

  CLI::App* analyze =
      app.add_subcommand("analyze", "aggregate existing manifests into summary.json");
  analyze->add_option("--out", out_dir, "output directory holding manifests/")->required();

  CLI::App* ablate = app.add_subcommand(
      "ablate", "recompute the grouping ablation from saved checkpoints");
  add_config_flags(ablate);

  CLI::App* report =
      app.add_subcommand("report", "re-emit the CSV/JSON reports from manifests");
  report->add_option("--out", out_dir, "output directory holding manifests/")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(load_config(config_path, out_dir, seed_override), jobs);
    if (analyze->parsed()) return cmd_analyze(out_dir);
    if (ablate->parsed()) return cmd_ablate(load_config(config_path, out_dir, -1));
    if (report->parsed()) return cmd_report(out_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
