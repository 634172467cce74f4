#pragma once

// Experiment orchestration: the dataset x architecture x seed grid. Each grid
// cell trains one model, runs the four intervention levels in order, computes
// the circuit metrics and the downstream probe, and lands in a JSON manifest.
// Aggregation pools manifests into paired architecture comparisons (Wilcoxon
// + Holm-Sidak + paired Cohen's d), per-architecture summaries, and
// metric-vs-downstream correlations; report emission writes the CSV/JSON
// artifact set. Identical configs reproduce identical manifests bit for bit,
// wall-clock time excluded.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vaecirc/data.hpp"
#include "vaecirc/interventions.hpp"
#include "vaecirc/metrics.hpp"
#include "vaecirc/probe.hpp"
#include "vaecirc/stats.hpp"
#include "vaecirc/vae.hpp"

namespace vaecirc {

inline constexpr const char* kSoftwareVersion = "vaecirc 0.1.0";

// One dataset entry in a config: a synthetic tabular draw, a generated sprite
// set, or a schema-described CSV file on disk.
struct DatasetSpecConfig {
  std::string name;
  std::string kind;  // "synth_tabular" | "minisprites" | "csv"
  SynthTabularSpec synth;
  MiniSpritesSpec sprites;
  std::uint64_t generator_seed = 1;  // generators; csv row subsampling
  std::string csv_path;              // csv only
  std::string schema_path;
  std::size_t max_rows = 0;  // csv only: seed-deterministic row subsample (0 = all)
};

struct AblationConfig {
  bool enabled = true;
  std::size_t permutations = 10;
};

struct ExperimentConfig {
  std::vector<DatasetSpecConfig> datasets;   // default: both generators
  std::vector<VaeVariant> architectures;     // default: all five variants
  std::vector<std::uint64_t> seeds = {42, 123, 456};
  std::vector<std::size_t> encoder_widths = {256, 128, 64};
  std::size_t latent_dim = 10;
  VaeHyper hyper;
  TrainConfig train;              // per-cell seed overrides train.seed
  InterventionConfig intervention;  // per-cell seed/eval rows filled in
  ProbeConfig probe;
  AblationConfig ablation;
  std::string out_dir = "out";
};

ExperimentConfig default_config();

// Parses a JSON object; absent keys keep their defaults, unknown keys throw.
// Validates: non-empty grid, distinct seeds, known kinds/architectures.
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig config_from_json_file(const std::string& path);

// Canonical JSON with every field resolved (key-sorted, round-trips through
// config_from_json). The config hash is FNV-1a over this text.
std::string config_to_json(const ExperimentConfig& cfg);
std::uint64_t config_hash(const ExperimentConfig& cfg);

DatasetBundle build_dataset(const DatasetSpecConfig& spec);

std::string run_id(const std::string& dataset, VaeVariant arch, std::uint64_t seed);

struct RunManifest {
  std::string dataset;
  std::string architecture;
  std::uint64_t seed = 0;
  std::string id;
  std::uint64_t config_hash = 0;
  std::uint64_t dataset_hash = 0;
  std::string domain_class;  // "tabular" | "image"
  bool failed = false;
  std::string error;

  // Training.
  double final_mse = 0.0;
  std::size_t epochs_run = 0;
  bool converged = false;

  // Level 1.
  std::vector<std::string> group_names;
  Vec linearity_r2;

  // Level 2.
  Vec ces_per_dim;        // calibrated
  Vec ces_fixed_per_dim;
  Vec sigma_eff;

  // Level 3 (mean profile over sampled pairs).
  Vec patch_compound;
  Vec patch_direct;

  // Level 4.
  Matrix mediation_mr;  // G x L
  Vec mediation_te;
  std::size_t mediation_violations = 0;
  double nis = 0.0;

  // Metrics.
  MetricSet metrics;

  // Probe (undefined when the dataset carries no labels).
  bool probe_defined = false;
  ProbeResult probe;

  std::optional<AblationResult> ablation;

  double wall_clock_seconds = 0.0;  // excluded from manifest comparisons
  std::string software_version = kSoftwareVersion;
};

std::string manifest_to_json(const RunManifest& m);
RunManifest manifest_from_json(const std::string& text);
RunManifest manifest_from_json_file(const std::string& path);
// Canonical JSON with the wall-clock field removed; equal strings mean equal
// runs.
std::string manifest_comparable_json(const RunManifest& m);

// Trains and measures one grid cell: train, then intervention levels 1-4 in
// order, then metrics, then the probe. Exceptions are captured into a failed
// manifest; the grid keeps going.
RunManifest run_cell(const ExperimentConfig& cfg, const DatasetBundle& bundle,
                     VaeVariant arch, std::uint64_t seed);

struct GridResult {
  std::vector<RunManifest> manifests;  // ordered by run id
  std::vector<std::string> warnings;
};

// Runs every cell (datasets x architectures x seeds), at most `jobs` cells
// concurrently. When out_dir is non-empty, writes manifests/<id>.json plus
// the per-run intervention CSVs under runs/<id>/. A dataset that fails to
// load yields one error manifest per dependent cell.
GridResult run_grid(const ExperimentConfig& cfg, std::size_t jobs = 1,
                    bool write_outputs = true);

struct ArchSummary {
  std::string architecture;
  std::string domain_class;
  std::size_t n = 0;
  // Parallel mean/std pairs, indexed like kSummaryMetricNames.
  Vec means;
  Vec stds;
};

struct CorrelationCell {
  std::string metric;
  std::string measure;
  CorrelationResult corr;
};

struct ComparisonReport {
  std::uint64_t config_hash = 0;
  std::size_t n_manifests = 0;
  std::vector<ArchSummary> summaries;
  std::vector<PairedComparison> pairwise;
  std::vector<CorrelationCell> correlations;
  CorrelationResult ces_mse;  // causal-effect strength vs reconstruction MSE
  std::vector<std::string> warnings;
};

struct AggregateOptions {
  double alpha = 0.05;
  // false: one Holm-Sidak family across every comparison x metric pair;
  // true: a separate family per metric.
  bool per_metric_family = false;
};

// Names of the per-run scalar metrics pooled by summaries and pairwise tests.
const std::vector<std::string>& summary_metric_names();

ComparisonReport aggregate(const std::vector<RunManifest>& manifests,
                           const AggregateOptions& opts = {});

std::string report_to_json(const ComparisonReport& report);
ComparisonReport report_from_json(const std::string& text);

// Writes metrics.csv, pairwise_tests.csv, correlations.csv, downstream.csv,
// ablation.csv, summary.json, and per-dataset heatmap_ces_<dataset>.csv /
// heatmap_mediation_<dataset>.csv (seed-averaged). An empty manifest set
// still emits every fixed CSV with its header row.
void emit_reports(const ComparisonReport& report,
                  const std::vector<RunManifest>& manifests,
                  const std::string& out_dir);

}  // namespace vaecirc
