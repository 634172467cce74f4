#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "vaecirc/csv.hpp"
#include "vaecirc/pipeline.hpp"

using namespace vaecirc;

namespace {

namespace fs = std::filesystem;

std::string temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("vaecirc_pipeline_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// A config small enough that a full grid cell runs in well under a second.
ExperimentConfig tiny_config() {
  ExperimentConfig cfg = default_config();
  cfg.encoder_widths = {12, 8};
  cfg.latent_dim = 3;
  cfg.seeds = {42};
  cfg.train.max_epochs = 2;
  cfg.train.batch_size = 64;
  cfg.intervention.eval_cap = 40;
  cfg.intervention.sweep_points = 9;
  cfg.intervention.patch_pairs = 10;
  cfg.probe.max_iters = 300;
  cfg.ablation.permutations = 2;
  DatasetSpecConfig tab;
  tab.name = "tab";
  tab.kind = "synth_tabular";
  tab.synth.n_rows = 120;
  tab.generator_seed = 5;
  cfg.datasets = {tab};
  cfg.architectures = {VaeVariant::kStandard};
  return cfg;
}

DatasetSpecConfig tiny_sprites_spec() {
  DatasetSpecConfig img;
  img.name = "img";
  img.kind = "minisprites";
  img.sprites.side = 8;
  img.sprites.scale_levels = 2;
  img.sprites.pos_levels = 3;
  img.sprites.sample_count = 40;
  img.generator_seed = 6;
  return img;
}

// Hand-built manifest for aggregation tests; no training involved.
RunManifest make_manifest(const std::string& dataset, const std::string& arch,
                          std::uint64_t seed, double mse, double ces,
                          double accuracy) {
  RunManifest m;
  m.dataset = dataset;
  m.architecture = arch;
  m.seed = seed;
  m.id = dataset + "__" + arch + "__seed" + std::to_string(seed);
  m.config_hash = 77;
  m.dataset_hash = 99;
  m.domain_class = "tabular";
  m.final_mse = mse;
  m.epochs_run = 5;
  m.converged = true;
  m.group_names = {"g0", "g1"};
  m.linearity_r2 = {0.99, 0.98};
  m.ces_per_dim = {ces, ces};
  m.ces_fixed_per_dim = {ces * 2.0, ces * 2.0};
  m.sigma_eff = {0.5, 0.5};
  m.patch_compound = {1.0, 0.4};
  m.patch_direct = {0.6, 0.4};
  m.mediation_mr = Matrix(2, 2, 1.0);
  m.mediation_te = {0.3, 0.3};
  m.nis = 0.0;
  m.metrics.ces_mean = ces;
  m.metrics.ces_per_dim = m.ces_per_dim;
  m.metrics.specificity = 0.4;
  m.metrics.modularity_score = 0.6;
  m.metrics.fgd_score = 0.7;
  m.metrics.mig_score = 0.2;
  m.probe_defined = true;
  m.probe.accuracy = accuracy;
  m.probe.auc_score = accuracy;
  m.probe.robustness = accuracy - 0.01;
  m.probe.dp.defined = true;
  m.probe.dp.gap = 0.1;
  m.probe.n_train = 80;
  m.probe.n_heldout = 20;
  m.wall_clock_seconds = 1.25;
  return m;
}

}  // namespace

TEST_CASE("default config carries the published training protocol") {
  const ExperimentConfig cfg = default_config();
  REQUIRE(cfg.datasets.size() == 2);
  CHECK(cfg.datasets[0].kind == "synth_tabular");
  CHECK(cfg.datasets[1].kind == "minisprites");
  REQUIRE(cfg.architectures.size() == 5);
  CHECK(cfg.seeds == std::vector<std::uint64_t>{42, 123, 456});
  CHECK(cfg.encoder_widths == std::vector<std::size_t>{256, 128, 64});
  CHECK(cfg.latent_dim == 10);
  CHECK(cfg.hyper.beta == 4.0);
  CHECK(cfg.hyper.tc_weight == 6.0);
  CHECK(cfg.hyper.gamma == 10.0);
  CHECK(cfg.hyper.lambda_od == 10.0);
  CHECK(cfg.hyper.lambda_d == 100.0);
  CHECK(cfg.train.max_epochs == 200);
  CHECK(cfg.train.batch_size == 256);
  CHECK(cfg.train.lr == 1e-3);
  CHECK(cfg.train.plateau_patience == 10);
  CHECK(cfg.train.plateau_factor == 0.5);
  CHECK(cfg.train.early_stop_patience == 20);
  CHECK(cfg.train.heldout_fraction == 0.1);
  CHECK(cfg.intervention.scales == std::vector<double>{0.5, 1.0, 2.0});
  CHECK(cfg.intervention.sweep_points == 51);
  CHECK(cfg.intervention.sweep_half_range == 3.0);
  CHECK(cfg.intervention.eval_cap == 512);
  CHECK(cfg.intervention.patch_pairs == 200);
  CHECK(cfg.probe.l2 == 1e-3);
  CHECK(cfg.probe.noise_sd == 0.5);
  CHECK(cfg.probe.noise_draws == 10);
  CHECK(cfg.ablation.enabled);
  CHECK(cfg.ablation.permutations == 10);
}

TEST_CASE("config json parsing applies overrides and round-trips canonically") {
  const std::string text = R"({
    "out_dir": "results",
    "seeds": [7, 8],
    "latent_dim": 4,
    "encoder_widths": [32, 16],
    "architectures": ["standard", "dip2"],
    "hyper": {"beta": 2.5},
    "train": {"max_epochs": 11, "lr": 0.002},
    "intervention": {"sweep_points": 21, "eval_cap": 64},
    "probe": {"noise_sd": 0.25},
    "ablation": {"enabled": false},
    "datasets": [{"name": "t", "kind": "synth_tabular", "rows": 50, "seed": 3}]
  })";
  const ExperimentConfig cfg = config_from_json(text);
  CHECK(cfg.out_dir == "results");
  CHECK(cfg.seeds == std::vector<std::uint64_t>{7, 8});
  CHECK(cfg.latent_dim == 4);
  CHECK(cfg.encoder_widths == std::vector<std::size_t>{32, 16});
  REQUIRE(cfg.architectures.size() == 2);
  CHECK(cfg.architectures[1] == VaeVariant::kDipTwo);
  CHECK(cfg.hyper.beta == 2.5);
  CHECK(cfg.hyper.gamma == 10.0);  // untouched default
  CHECK(cfg.train.max_epochs == 11);
  CHECK(cfg.train.lr == 0.002);
  CHECK(cfg.train.batch_size == 256);
  CHECK(cfg.intervention.sweep_points == 21);
  CHECK(cfg.intervention.eval_cap == 64);
  CHECK(cfg.probe.noise_sd == 0.25);
  CHECK_FALSE(cfg.ablation.enabled);
  REQUIRE(cfg.datasets.size() == 1);
  CHECK(cfg.datasets[0].synth.n_rows == 50);
  CHECK(cfg.datasets[0].generator_seed == 3);

  // The canonical dump re-parses to an identical config.
  const ExperimentConfig back = config_from_json(config_to_json(cfg));
  CHECK(config_hash(back) == config_hash(cfg));
  CHECK(config_to_json(back) == config_to_json(cfg));

  // An empty object is exactly the default protocol.
  CHECK(config_hash(config_from_json("{}")) == config_hash(default_config()));
}

TEST_CASE("config hash ignores key order but tracks values") {
  const ExperimentConfig a = config_from_json(R"({"latent_dim": 6, "seeds": [1, 2]})");
  const ExperimentConfig b = config_from_json(R"({"seeds": [1, 2], "latent_dim": 6})");
  CHECK(config_hash(a) == config_hash(b));
  const ExperimentConfig c = config_from_json(R"({"latent_dim": 7, "seeds": [1, 2]})");
  CHECK(config_hash(a) != config_hash(c));
}

TEST_CASE("config validation rejects malformed grids") {
  CHECK_THROWS_AS(config_from_json(R"({"seeds": [5, 5]})"), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(R"({"seeds": []})"), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(R"({"architectures": []})"), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(R"({"architectures": ["standard", "standard"]})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(R"({"architectures": ["vanilla"]})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(R"({"datasets": []})"), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(R"({"datasets": [{"kind": "tarot"}]})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      config_from_json(R"({"datasets": [{"kind": "csv", "path": "x.csv"}]})"),
      std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(R"({"datasets": [
        {"name": "d", "kind": "synth_tabular"},
        {"name": "d", "kind": "minisprites"}]})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(R"({"bogus_key": 1})"), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(R"({"train": {"lr": 0.1, "bogus": 2}})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(config_from_json("not json at all"), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(R"({"latent_dim": 0})"), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(R"({"encoder_widths": []})"), std::invalid_argument);
}

TEST_CASE("build_dataset dispatches on the configured kind") {
  DatasetSpecConfig tab;
  tab.name = "renamed";
  tab.kind = "synth_tabular";
  tab.synth.n_rows = 80;
  tab.generator_seed = 9;
  const DatasetBundle tb = build_dataset(tab);
  CHECK(tb.name == "renamed");
  CHECK(tb.n_rows() == 80);
  CHECK(tb.content_hash != 0);

  const DatasetBundle sb = build_dataset(tiny_sprites_spec());
  CHECK(sb.n_rows() == 40);
  CHECK(sb.name == "img");

  const std::string dir = temp_dir("csvds");
  {
    std::ofstream data(dir + "/mini.csv");
    data << "a,b,y\n1.0,2.0,0\n2.0,1.0,1\n3.5,0.5,1\n0.5,3.0,0\n";
    std::ofstream schema(dir + "/mini.json");
    schema << R"({"name": "mini", "columns": [
      {"name": "a", "kind": "continuous", "group": "g"},
      {"name": "b", "kind": "continuous", "group": "g"},
      {"name": "y", "kind": "label", "threshold": 0.5}]})";
  }
  DatasetSpecConfig csv;
  csv.name = "mini";
  csv.kind = "csv";
  csv.csv_path = dir + "/mini.csv";
  csv.schema_path = dir + "/mini.json";
  const DatasetBundle cb = build_dataset(csv);
  CHECK(cb.n_rows() == 4);
  CHECK(cb.labels == std::vector<int>{0, 1, 1, 0});

  DatasetSpecConfig bad;
  bad.kind = "parquet";
  CHECK_THROWS_AS(build_dataset(bad), std::invalid_argument);
}

TEST_CASE("csv datasets subsample rows deterministically via max_rows") {
  const std::string dir = temp_dir("csvsub");
  {
    std::ofstream data(dir + "/wide.csv");
    data << "a,b,y\n";
    for (int r = 0; r < 30; ++r)
      data << r << "," << 29 - r << "," << r % 2 << "\n";
    std::ofstream schema(dir + "/wide.json");
    schema << R"({"name": "wide", "columns": [
      {"name": "a", "kind": "continuous", "group": "g"},
      {"name": "b", "kind": "continuous", "group": "g"},
      {"name": "y", "kind": "label", "threshold": 0.5}]})";
  }
  DatasetSpecConfig spec;
  spec.name = "wide";
  spec.kind = "csv";
  spec.csv_path = dir + "/wide.csv";
  spec.schema_path = dir + "/wide.json";
  spec.max_rows = 10;
  spec.generator_seed = 9;

  const DatasetBundle full = [&] {
    DatasetSpecConfig all = spec;
    all.max_rows = 0;
    return build_dataset(all);
  }();
  const DatasetBundle sub = build_dataset(spec);
  REQUIRE(sub.n_rows() == 10);
  CHECK(sub.labels.size() == 10);
  CHECK(sub.content_hash != full.content_hash);
  CHECK(sub.provenance.find("subsampled to 10 rows") != std::string::npos);

  // Every kept row is one of the original (z-scored) rows, labels aligned.
  for (std::size_t i = 0; i < sub.n_rows(); ++i) {
    bool found = false;
    for (std::size_t r = 0; r < full.n_rows(); ++r) {
      if (sub.X(i, 0) == full.X(r, 0) && sub.X(i, 1) == full.X(r, 1) &&
          sub.labels[i] == full.labels[r]) {
        found = true;
        break;
      }
    }
    CHECK(found);
  }

  const DatasetBundle again = build_dataset(spec);
  CHECK(again.X.data == sub.X.data);
  CHECK(again.labels == sub.labels);
  CHECK(again.content_hash == sub.content_hash);

  DatasetSpecConfig other_seed = spec;
  other_seed.generator_seed = 10;
  CHECK(build_dataset(other_seed).X.data != sub.X.data);

  // max_rows >= n keeps everything.
  DatasetSpecConfig loose = spec;
  loose.max_rows = 500;
  CHECK(build_dataset(loose).n_rows() == 30);

  // The key round-trips through config JSON.
  ExperimentConfig cfg = tiny_config();
  cfg.datasets = {spec};
  const ExperimentConfig parsed = config_from_json(config_to_json(cfg));
  CHECK(parsed.datasets[0].max_rows == 10);
  CHECK(parsed.datasets[0].generator_seed == 9);
  CHECK(config_hash(parsed) == config_hash(cfg));
}

TEST_CASE("run ids are filesystem-safe") {
  CHECK(run_id("tab", VaeVariant::kStandard, 42) == "tab__standard__seed42");
  CHECK(run_id("my ds/1", VaeVariant::kBeta, 7) == "my_ds_1__beta__seed7");
}

TEST_CASE("one grid cell yields a fully populated manifest") {
  const ExperimentConfig cfg = tiny_config();
  const DatasetBundle bundle = build_dataset(cfg.datasets[0]);
  const RunManifest m = run_cell(cfg, bundle, VaeVariant::kStandard, 42);

  REQUIRE_FALSE(m.failed);
  CHECK(m.error.empty());
  CHECK(m.id == "tab__standard__seed42");
  CHECK(m.dataset == "tab");
  CHECK(m.architecture == "standard");
  CHECK(m.seed == 42);
  CHECK(m.config_hash == config_hash(cfg));
  CHECK(m.dataset_hash == bundle.content_hash);
  CHECK(m.domain_class == "tabular");

  CHECK(m.final_mse > 0.0);
  CHECK(m.epochs_run == 2);

  const std::size_t g = bundle.group_count();
  const std::size_t d = cfg.latent_dim;
  const std::size_t layers = cfg.encoder_widths.size();
  CHECK(m.group_names.size() == g);
  CHECK(m.linearity_r2.size() == g);
  CHECK(m.ces_per_dim.size() == d);
  CHECK(m.ces_fixed_per_dim.size() == d);
  CHECK(m.sigma_eff.size() == d);
  CHECK(m.patch_compound.size() == layers);
  CHECK(m.patch_direct.size() == layers);
  CHECK(m.mediation_mr.rows == g);
  CHECK(m.mediation_mr.cols == layers);
  CHECK(m.mediation_te.size() == g);
  CHECK(m.nis >= 0.0);
  CHECK(m.nis <= 1.0);

  CHECK(m.metrics.ces_mean > 0.0);
  CHECK(m.metrics.specificity >= 0.0);
  CHECK(m.metrics.specificity <= 1.0);
  CHECK(m.metrics.modularity_score >= 0.0);
  CHECK(m.metrics.modularity_score <= 1.0);
  CHECK(m.metrics.fgd_score >= 0.0);
  CHECK(m.metrics.fgd_score <= 1.0);
  CHECK(m.metrics.mig_score >= 0.0);
  CHECK(m.metrics.mig_score <= 1.0);
  CHECK_FALSE(m.metrics.dci.has_value());  // grouped features, not singletons

  CHECK(m.probe_defined);
  CHECK(m.probe.accuracy >= 0.0);
  CHECK(m.probe.accuracy <= 1.0);
  CHECK(m.probe.n_train + m.probe.n_heldout == bundle.n_rows());

  REQUIRE(m.ablation.has_value());
  CHECK(m.ablation->random_modularity.size() == 2);

  CHECK(m.wall_clock_seconds > 0.0);
  CHECK(m.software_version == std::string(kSoftwareVersion));
}

TEST_CASE("a cell failure is captured in the manifest instead of thrown") {
  ExperimentConfig cfg = tiny_config();
  DatasetBundle bundle = build_dataset(cfg.datasets[0]);
  bundle.X(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const RunManifest m = run_cell(cfg, bundle, VaeVariant::kStandard, 42);
  CHECK(m.failed);
  CHECK_FALSE(m.error.empty());
  CHECK(m.wall_clock_seconds >= 0.0);
}

TEST_CASE("the full grid enumerates every dataset, architecture and seed") {
  ExperimentConfig cfg = tiny_config();
  cfg.encoder_widths = {8};
  cfg.latent_dim = 2;
  cfg.train.max_epochs = 1;
  cfg.intervention.eval_cap = 24;
  cfg.intervention.sweep_points = 7;
  cfg.intervention.patch_pairs = 8;
  cfg.probe.max_iters = 150;
  cfg.ablation.enabled = false;
  cfg.datasets[0].synth.n_rows = 60;
  cfg.datasets.push_back(tiny_sprites_spec());
  cfg.architectures = {VaeVariant::kStandard, VaeVariant::kBeta, VaeVariant::kBetaTc,
                       VaeVariant::kFactor, VaeVariant::kDipTwo};
  cfg.seeds = {1, 2};

  const GridResult grid = run_grid(cfg, 2, /*write_outputs=*/false);
  REQUIRE(grid.manifests.size() == 20);
  std::set<std::string> ids;
  for (const RunManifest& m : grid.manifests) {
    ids.insert(m.id);
    CHECK_FALSE(m.failed);
  }
  CHECK(ids.size() == 20);  // all distinct
  CHECK(std::is_sorted(grid.manifests.begin(), grid.manifests.end(),
                       [](const RunManifest& a, const RunManifest& b) {
                         return a.id < b.id;
                       }));
}

TEST_CASE("an unloadable dataset yields error manifests while the grid continues") {
  ExperimentConfig cfg = tiny_config();
  DatasetSpecConfig bad;
  bad.name = "ghost";
  bad.kind = "csv";
  bad.csv_path = "/nonexistent/ghost.csv";
  bad.schema_path = "/nonexistent/ghost.json";
  cfg.datasets.push_back(bad);
  cfg.seeds = {1, 2};

  const GridResult grid = run_grid(cfg, 1, /*write_outputs=*/false);
  REQUIRE(grid.manifests.size() == 4);
  std::size_t failed = 0, ok = 0;
  for (const RunManifest& m : grid.manifests) {
    if (m.failed) {
      ++failed;
      CHECK(m.dataset == "ghost");
      CHECK(m.error.find("dataset failed to load") != std::string::npos);
    } else {
      ++ok;
      CHECK(m.dataset == "tab");
    }
  }
  CHECK(failed == 2);
  CHECK(ok == 2);
  REQUIRE_FALSE(grid.warnings.empty());
  CHECK(grid.warnings.front().find("ghost") != std::string::npos);
}

TEST_CASE("rerunning the grid reproduces manifests bit for bit") {
  ExperimentConfig cfg = tiny_config();
  cfg.architectures = {VaeVariant::kStandard, VaeVariant::kBeta};
  const GridResult first = run_grid(cfg, 1, false);
  const GridResult second = run_grid(cfg, 1, false);
  const GridResult threaded = run_grid(cfg, 2, false);
  REQUIRE(first.manifests.size() == 2);
  REQUIRE(second.manifests.size() == 2);
  REQUIRE(threaded.manifests.size() == 2);
  for (std::size_t i = 0; i < first.manifests.size(); ++i) {
    CHECK(manifest_comparable_json(first.manifests[i]) ==
          manifest_comparable_json(second.manifests[i]));
    CHECK(manifest_comparable_json(first.manifests[i]) ==
          manifest_comparable_json(threaded.manifests[i]));
  }
}

TEST_CASE("grid outputs land on disk and re-parse losslessly") {
  ExperimentConfig cfg = tiny_config();
  cfg.out_dir = temp_dir("gridout");
  const GridResult grid = run_grid(cfg, 1, /*write_outputs=*/true);
  REQUIRE(grid.manifests.size() == 1);
  const std::string id = grid.manifests.front().id;

  const std::string manifest_path = cfg.out_dir + "/manifests/" + id + ".json";
  REQUIRE(fs::exists(manifest_path));
  const RunManifest back = manifest_from_json_file(manifest_path);
  CHECK(manifest_comparable_json(back) ==
        manifest_comparable_json(grid.manifests.front()));

  for (const char* name : {"level1.csv", "ces.csv", "patching.csv", "mediation.csv",
                           "model.bin"})
    CHECK(fs::exists(cfg.out_dir + "/runs/" + id + "/" + name));
}

TEST_CASE("manifest json round-trips every field exactly") {
  RunManifest m = make_manifest("ds", "standard", 3, 0.5, 1.25, 0.9);
  m.metrics.dci = 0.77;
  AblationResult ab;
  ab.semantic_modularity = 0.8;
  ab.semantic_fgd = 0.7;
  ab.random_modularity = {0.1, 0.2};
  ab.random_fgd = {0.3, 0.4};
  ab.random_modularity_mean = 0.15;
  ab.random_fgd_mean = 0.35;
  ab.modularity_gap = 0.65;
  ab.fgd_gap = 0.35;
  m.ablation = ab;

  const std::string text = manifest_to_json(m);
  const RunManifest back = manifest_from_json(text);
  CHECK(manifest_to_json(back) == text);
  CHECK(back.metrics.dci.has_value());
  CHECK(*back.metrics.dci == 0.77);
  REQUIRE(back.ablation.has_value());
  CHECK(back.ablation->random_fgd == std::vector<double>{0.3, 0.4});
  CHECK(back.wall_clock_seconds == 1.25);

  // The comparable form drops only the wall clock.
  RunManifest other = back;
  other.wall_clock_seconds = 99.0;
  CHECK(manifest_comparable_json(other) == manifest_comparable_json(back));
  CHECK(manifest_to_json(other) != manifest_to_json(back));

  CHECK_THROWS_AS(manifest_from_json("{{ not json"), std::invalid_argument);
}

TEST_CASE("identical architectures aggregate to p = 1 with degenerate effect sizes") {
  std::vector<RunManifest> manifests;
  for (const char* ds : {"d1", "d2"})
    for (std::uint64_t seed : {1ULL, 2ULL}) {
      manifests.push_back(make_manifest(ds, "standard", seed, 0.5, 1.0, 0.9));
      manifests.push_back(make_manifest(ds, "beta", seed, 0.5, 1.0, 0.9));
    }
  const ComparisonReport report = aggregate(manifests);
  REQUIRE(report.pairwise.size() == summary_metric_names().size());
  for (const PairedComparison& c : report.pairwise) {
    CHECK(c.label == "beta_vs_standard");
    CHECK(c.n == 4);
    CHECK(c.p_raw == 1.0);
    CHECK(c.p_adj == 1.0);
    CHECK(c.degenerate_d);
    CHECK_FALSE(c.significant);
  }
  // Two summaries (one per architecture), four runs each.
  REQUIRE(report.summaries.size() == 2);
  for (const ArchSummary& s : report.summaries) {
    CHECK(s.n == 4);
    CHECK(s.domain_class == "tabular");
    CHECK(s.stds[0] == 0.0);  // identical values
  }
}

TEST_CASE("aggregate recovers a planted ces-mse anticorrelation") {
  std::vector<RunManifest> manifests;
  const double mses[6] = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  for (int i = 0; i < 6; ++i) {
    // CES strictly decreasing in MSE.
    manifests.push_back(make_manifest("d" + std::to_string(i % 3),
                                      i % 2 == 0 ? "standard" : "beta",
                                      static_cast<std::uint64_t>(i / 2), mses[i],
                                      2.0 - mses[i], 0.8));
  }
  const ComparisonReport report = aggregate(manifests);
  REQUIRE(report.ces_mse.defined);
  CHECK(report.ces_mse.r == doctest::Approx(-1.0));
  CHECK(report.ces_mse.n == 6);
}

TEST_CASE("unpaired cells are dropped with a warning") {
  std::vector<RunManifest> manifests;
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    manifests.push_back(make_manifest("d1", "standard", seed, 0.5 + 0.01 * seed,
                                      1.0 + 0.1 * seed, 0.9));
    if (seed != 3)  // beta misses one cell
      manifests.push_back(make_manifest("d1", "beta", seed, 0.6 + 0.02 * seed,
                                        0.8 + 0.05 * seed, 0.85));
  }
  const ComparisonReport report = aggregate(manifests);
  REQUIRE_FALSE(report.pairwise.empty());
  for (const PairedComparison& c : report.pairwise) CHECK(c.n == 2);
  bool warned = false;
  for (const std::string& w : report.warnings)
    warned = warned || w.find("unpaired") != std::string::npos;
  CHECK(warned);
}

TEST_CASE("failed manifests are excluded from aggregation with a warning") {
  std::vector<RunManifest> manifests;
  for (std::uint64_t seed : {1ULL, 2ULL}) {
    manifests.push_back(make_manifest("d1", "standard", seed, 0.5, 1.0, 0.9));
    manifests.push_back(make_manifest("d1", "beta", seed, 0.7, 0.8, 0.8));
  }
  manifests.push_back(make_manifest("d2", "standard", 1, 0.4, 1.2, 0.95));
  manifests.back().failed = true;
  manifests.back().error = "synthetic failure";
  const ComparisonReport report = aggregate(manifests);
  CHECK(report.n_manifests == 5);
  bool warned = false;
  for (const std::string& w : report.warnings)
    warned = warned || w.find("synthetic failure") != std::string::npos;
  CHECK(warned);
  for (const PairedComparison& c : report.pairwise) CHECK(c.n == 2);
}

TEST_CASE("per-metric correction families leave single tests uncorrected") {
  std::vector<RunManifest> manifests;
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL}) {
    manifests.push_back(make_manifest("d1", "standard", seed, 0.50 + 0.011 * seed,
                                      1.0 + 0.13 * seed, 0.9));
    manifests.push_back(make_manifest("d1", "beta", seed, 0.61 + 0.017 * seed,
                                      0.8 - 0.05 * seed, 0.8));
  }
  AggregateOptions per_metric;
  per_metric.per_metric_family = true;
  const ComparisonReport split = aggregate(manifests, per_metric);
  const ComparisonReport global = aggregate(manifests);
  REQUIRE(split.pairwise.size() == global.pairwise.size());
  for (std::size_t i = 0; i < split.pairwise.size(); ++i) {
    CHECK(split.pairwise[i].p_raw == global.pairwise[i].p_raw);
    // One architecture pair -> each per-metric family holds exactly one test.
    CHECK(split.pairwise[i].p_adj == split.pairwise[i].p_raw);
    CHECK(global.pairwise[i].p_adj >= global.pairwise[i].p_raw);
  }
}

TEST_CASE("the comparison report survives a json round-trip exactly") {
  std::vector<RunManifest> manifests;
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    manifests.push_back(
        make_manifest("d1", "standard", seed, 0.5 + 0.03 * seed, 1.0 + 0.2 * seed, 0.9));
    manifests.push_back(
        make_manifest("d1", "beta", seed, 0.8 - 0.01 * seed, 0.7 + 0.1 * seed, 0.82));
  }
  const ComparisonReport report = aggregate(manifests);
  const std::string text = report_to_json(report);
  const ComparisonReport back = report_from_json(text);
  CHECK(report_to_json(back) == text);
  CHECK(back.n_manifests == report.n_manifests);
  CHECK(back.pairwise.size() == report.pairwise.size());
  CHECK_THROWS_AS(report_from_json("]["), std::invalid_argument);
}

TEST_CASE("emit_reports writes the complete artifact family") {
  std::vector<RunManifest> manifests;
  for (const char* arch : {"standard", "beta", "factor"})
    for (std::uint64_t seed : {1ULL, 2ULL})
      manifests.push_back(make_manifest("tab", arch, seed, 0.5 + 0.1 * seed,
                                        1.0 + 0.2 * seed, 0.9));
  // Give one manifest an ablation block so ablation.csv has a body.
  AblationResult ab;
  ab.random_modularity = {0.1, 0.2, 0.3};
  ab.random_fgd = {0.2, 0.3, 0.4};
  manifests[0].ablation = ab;

  const ComparisonReport report = aggregate(manifests);
  const std::string dir = temp_dir("emit");
  emit_reports(report, manifests, dir);

  CHECK(read_csv_file(dir + "/metrics.csv").size() == manifests.size() + 1);
  CHECK(read_csv_file(dir + "/downstream.csv").size() == manifests.size() + 1);
  CHECK(read_csv_file(dir + "/pairwise_tests.csv").size() ==
        report.pairwise.size() + 1);
  CHECK(read_csv_file(dir + "/ablation.csv").size() == 2);
  const CsvTable corr = read_csv_file(dir + "/correlations.csv");
  CHECK(corr.size() == report.correlations.size() + 2);  // header + ces/mse row

  // CES heatmap: one row per architecture, one column per latent dimension.
  const CsvTable heat = read_csv_file(dir + "/heatmap_ces_tab.csv");
  REQUIRE(heat.size() == 3 + 1);
  CHECK(heat[0].size() == 2 + 1);  // "architecture" + two dimensions
  CHECK(heat[0][1] == "dim_0");
  const CsvTable med = read_csv_file(dir + "/heatmap_mediation_tab.csv");
  CHECK(med.size() == 3 * 2 + 1);  // arch x group rows
  CHECK(med[0].size() == 2 + 2);   // labels + two layers

  const ComparisonReport back = report_from_json(slurp(dir + "/summary.json"));
  CHECK(report_to_json(back) == report_to_json(report));
}

TEST_CASE("an empty grid emits headers-only reports") {
  const std::vector<RunManifest> none;
  const ComparisonReport report = aggregate(none);
  const std::string dir = temp_dir("empty");
  emit_reports(report, none, dir);
  for (const char* name : {"metrics.csv", "pairwise_tests.csv", "correlations.csv",
                           "downstream.csv", "ablation.csv"}) {
    const CsvTable table = read_csv_file(dir + "/" + std::string(name));
    REQUIRE(table.size() == 1);
    CHECK_FALSE(table[0].empty());
  }
  const ComparisonReport back = report_from_json(slurp(dir + "/summary.json"));
  CHECK(back.n_manifests == 0);
  CHECK(back.pairwise.empty());
}
