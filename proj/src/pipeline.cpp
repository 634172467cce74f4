#include "vaecirc/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "vaecirc/csv.hpp"

namespace vaecirc {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::string& ctx,
                std::initializer_list<const char*> allowed) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) {
      if (it.key() == k) {
        known = true;
        break;
      }
    }
    require(known, ctx + ": unknown key '" + it.key() + "'");
  }
}

json vec_to_json(const Vec& v) { return json(v); }

Vec vec_from_json(const json& j) { return j.get<Vec>(); }

json matrix_to_json(const Matrix& m) {
  return json{{"rows", m.rows}, {"cols", m.cols}, {"data", m.data}};
}

Matrix matrix_from_json(const json& j) {
  Matrix m(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>());
  m.data = j.at("data").get<std::vector<double>>();
  require(m.data.size() == m.rows * m.cols, "matrix: data size mismatch");
  return m;
}

std::string sanitize_name(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                    (c >= '0' && c <= '9') || c == '-' || c == '_';
    out.push_back(ok ? c : '_');
  }
  return out.empty() ? std::string("dataset") : out;
}

double vec_mean(const Vec& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string domain_class_of(const DatasetBundle& bundle) {
  // Pixel bundles carry no per-column encoders; schema-built tabular data
  // always does.
  return bundle.transform.encoders.empty() ? "image" : "tabular";
}

// ---------------------------------------------------------------------------
// Config JSON.

json dataset_to_json(const DatasetSpecConfig& d) {
  json j{{"name", d.name}, {"kind", d.kind}};
  if (d.kind == "synth_tabular") {
    j["rows"] = d.synth.n_rows;
    j["features_per_group"] = d.synth.features_per_group;
    j["heterogeneous"] = d.synth.heterogeneous;
    j["noise_sd"] = d.synth.noise_sd;
    j["seed"] = d.generator_seed;
  } else if (d.kind == "minisprites") {
    j["side"] = d.sprites.side;
    j["scale_levels"] = d.sprites.scale_levels;
    j["pos_levels"] = d.sprites.pos_levels;
    j["sample_count"] = d.sprites.sample_count;
    j["seed"] = d.generator_seed;
  } else {
    j["path"] = d.csv_path;
    j["schema"] = d.schema_path;
    j["max_rows"] = d.max_rows;
    j["seed"] = d.generator_seed;
  }
  return j;
}

DatasetSpecConfig dataset_from_json(const json& j) {
  require(j.is_object(), "dataset entry must be an object");
  DatasetSpecConfig d;
  d.kind = j.value("kind", std::string());
  require(d.kind == "synth_tabular" || d.kind == "minisprites" || d.kind == "csv",
          "dataset kind must be synth_tabular, minisprites or csv, got '" + d.kind + "'");
  d.name = j.value("name", d.kind);
  if (d.kind == "synth_tabular") {
    check_keys(j, "dataset " + d.name,
               {"name", "kind", "rows", "features_per_group", "heterogeneous",
                "noise_sd", "seed"});
    d.synth.n_rows = j.value("rows", d.synth.n_rows);
    if (j.contains("features_per_group"))
      d.synth.features_per_group = j.at("features_per_group").get<std::vector<std::size_t>>();
    d.synth.heterogeneous = j.value("heterogeneous", d.synth.heterogeneous);
    d.synth.noise_sd = j.value("noise_sd", d.synth.noise_sd);
    d.generator_seed = j.value("seed", d.generator_seed);
  } else if (d.kind == "minisprites") {
    check_keys(j, "dataset " + d.name,
               {"name", "kind", "side", "scale_levels", "pos_levels", "sample_count",
                "seed"});
    d.sprites.side = j.value("side", d.sprites.side);
    d.sprites.scale_levels = j.value("scale_levels", d.sprites.scale_levels);
    d.sprites.pos_levels = j.value("pos_levels", d.sprites.pos_levels);
    d.sprites.sample_count = j.value("sample_count", d.sprites.sample_count);
    d.generator_seed = j.value("seed", d.generator_seed);
  } else {
    check_keys(j, "dataset " + d.name,
               {"name", "kind", "path", "schema", "max_rows", "seed"});
    d.csv_path = j.value("path", std::string());
    d.schema_path = j.value("schema", std::string());
    d.max_rows = j.value("max_rows", d.max_rows);
    d.generator_seed = j.value("seed", d.generator_seed);
    require(!d.csv_path.empty() && !d.schema_path.empty(),
            "csv dataset '" + d.name + "' needs both path and schema");
  }
  return d;
}

void validate_config(const ExperimentConfig& cfg) {
  require(!cfg.datasets.empty(), "config: dataset list is empty");
  require(!cfg.architectures.empty(), "config: architecture list is empty");
  require(!cfg.seeds.empty(), "config: seed list is empty");
  std::set<std::uint64_t> seen_seeds(cfg.seeds.begin(), cfg.seeds.end());
  require(seen_seeds.size() == cfg.seeds.size(), "config: seeds must be distinct");
  std::set<std::string> arch_names;
  for (VaeVariant v : cfg.architectures) arch_names.insert(variant_name(v));
  require(arch_names.size() == cfg.architectures.size(),
          "config: architectures must be distinct");
  std::set<std::string> ds_names;
  for (const auto& d : cfg.datasets) ds_names.insert(d.name);
  require(ds_names.size() == cfg.datasets.size(), "config: dataset names must be distinct");
  require(!cfg.encoder_widths.empty(), "config: encoder_widths is empty");
  require(cfg.latent_dim >= 1, "config: latent_dim must be at least 1");
}

}  // namespace

ExperimentConfig default_config() {
  ExperimentConfig cfg;
  DatasetSpecConfig tab;
  tab.name = "synth_tabular";
  tab.kind = "synth_tabular";
  DatasetSpecConfig img;
  img.name = "minisprites";
  img.kind = "minisprites";
  cfg.datasets = {tab, img};
  cfg.architectures = {VaeVariant::kStandard, VaeVariant::kBeta, VaeVariant::kBetaTc,
                       VaeVariant::kFactor, VaeVariant::kDipTwo};
  return cfg;
}

ExperimentConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: JSON parse failed: ") + e.what());
  }
  require(j.is_object(), "config: top level must be a JSON object");
  check_keys(j, "config",
             {"out_dir", "seeds", "latent_dim", "encoder_widths", "architectures",
              "hyper", "train", "intervention", "probe", "ablation", "datasets"});
  ExperimentConfig cfg = default_config();
  cfg.out_dir = j.value("out_dir", cfg.out_dir);
  if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  cfg.latent_dim = j.value("latent_dim", cfg.latent_dim);
  if (j.contains("encoder_widths"))
    cfg.encoder_widths = j.at("encoder_widths").get<std::vector<std::size_t>>();
  if (j.contains("architectures")) {
    cfg.architectures.clear();
    for (const auto& a : j.at("architectures"))
      cfg.architectures.push_back(variant_from_name(a.get<std::string>()));
  }
  if (j.contains("hyper")) {
    const json& h = j.at("hyper");
    check_keys(h, "hyper", {"beta", "tc_weight", "gamma", "lambda_od", "lambda_d"});
    cfg.hyper.beta = h.value("beta", cfg.hyper.beta);
    cfg.hyper.tc_weight = h.value("tc_weight", cfg.hyper.tc_weight);
    cfg.hyper.gamma = h.value("gamma", cfg.hyper.gamma);
    cfg.hyper.lambda_od = h.value("lambda_od", cfg.hyper.lambda_od);
    cfg.hyper.lambda_d = h.value("lambda_d", cfg.hyper.lambda_d);
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, "train",
               {"max_epochs", "batch_size", "lr", "plateau_patience", "plateau_factor",
                "early_stop_patience", "heldout_fraction", "disc_lr"});
    cfg.train.max_epochs = t.value("max_epochs", cfg.train.max_epochs);
    cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
    cfg.train.lr = t.value("lr", cfg.train.lr);
    cfg.train.plateau_patience = t.value("plateau_patience", cfg.train.plateau_patience);
    cfg.train.plateau_factor = t.value("plateau_factor", cfg.train.plateau_factor);
    cfg.train.early_stop_patience =
        t.value("early_stop_patience", cfg.train.early_stop_patience);
    cfg.train.heldout_fraction = t.value("heldout_fraction", cfg.train.heldout_fraction);
    cfg.train.disc_lr = t.value("disc_lr", cfg.train.disc_lr);
  }
  if (j.contains("intervention")) {
    const json& i = j.at("intervention");
    check_keys(i, "intervention",
               {"scales", "sweep_points", "sweep_half_range", "eval_cap",
                "ces_center_per_sample", "patch_pairs", "mediation_scale"});
    if (i.contains("scales"))
      cfg.intervention.scales = i.at("scales").get<std::vector<double>>();
    cfg.intervention.sweep_points = i.value("sweep_points", cfg.intervention.sweep_points);
    cfg.intervention.sweep_half_range =
        i.value("sweep_half_range", cfg.intervention.sweep_half_range);
    cfg.intervention.eval_cap = i.value("eval_cap", cfg.intervention.eval_cap);
    cfg.intervention.ces_center_per_sample =
        i.value("ces_center_per_sample", cfg.intervention.ces_center_per_sample);
    cfg.intervention.patch_pairs = i.value("patch_pairs", cfg.intervention.patch_pairs);
    cfg.intervention.mediation_scale =
        i.value("mediation_scale", cfg.intervention.mediation_scale);
  }
  if (j.contains("probe")) {
    const json& p = j.at("probe");
    check_keys(p, "probe",
               {"l2", "grad_tol", "max_iters", "heldout_fraction", "seed", "noise_sd",
                "noise_draws"});
    cfg.probe.l2 = p.value("l2", cfg.probe.l2);
    cfg.probe.grad_tol = p.value("grad_tol", cfg.probe.grad_tol);
    cfg.probe.max_iters = p.value("max_iters", cfg.probe.max_iters);
    cfg.probe.heldout_fraction = p.value("heldout_fraction", cfg.probe.heldout_fraction);
    cfg.probe.seed = p.value("seed", cfg.probe.seed);
    cfg.probe.noise_sd = p.value("noise_sd", cfg.probe.noise_sd);
    cfg.probe.noise_draws = p.value("noise_draws", cfg.probe.noise_draws);
  }
  if (j.contains("ablation")) {
    const json& a = j.at("ablation");
    check_keys(a, "ablation", {"enabled", "permutations"});
    cfg.ablation.enabled = a.value("enabled", cfg.ablation.enabled);
    cfg.ablation.permutations = a.value("permutations", cfg.ablation.permutations);
  }
  if (j.contains("datasets")) {
    cfg.datasets.clear();
    for (const auto& d : j.at("datasets")) cfg.datasets.push_back(dataset_from_json(d));
  }
  validate_config(cfg);
  return cfg;
}

ExperimentConfig config_from_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

std::string config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["out_dir"] = cfg.out_dir;
  j["seeds"] = cfg.seeds;
  j["latent_dim"] = cfg.latent_dim;
  j["encoder_widths"] = cfg.encoder_widths;
  json archs = json::array();
  for (VaeVariant v : cfg.architectures) archs.push_back(variant_name(v));
  j["architectures"] = archs;
  j["hyper"] = {{"beta", cfg.hyper.beta},
                {"tc_weight", cfg.hyper.tc_weight},
                {"gamma", cfg.hyper.gamma},
                {"lambda_od", cfg.hyper.lambda_od},
                {"lambda_d", cfg.hyper.lambda_d}};
  j["train"] = {{"max_epochs", cfg.train.max_epochs},
                {"batch_size", cfg.train.batch_size},
                {"lr", cfg.train.lr},
                {"plateau_patience", cfg.train.plateau_patience},
                {"plateau_factor", cfg.train.plateau_factor},
                {"early_stop_patience", cfg.train.early_stop_patience},
                {"heldout_fraction", cfg.train.heldout_fraction},
                {"disc_lr", cfg.train.disc_lr}};
  j["intervention"] = {{"scales", cfg.intervention.scales},
                       {"sweep_points", cfg.intervention.sweep_points},
                       {"sweep_half_range", cfg.intervention.sweep_half_range},
                       {"eval_cap", cfg.intervention.eval_cap},
                       {"ces_center_per_sample", cfg.intervention.ces_center_per_sample},
                       {"patch_pairs", cfg.intervention.patch_pairs},
                       {"mediation_scale", cfg.intervention.mediation_scale}};
  j["probe"] = {{"l2", cfg.probe.l2},
                {"grad_tol", cfg.probe.grad_tol},
                {"max_iters", cfg.probe.max_iters},
                {"heldout_fraction", cfg.probe.heldout_fraction},
                {"seed", cfg.probe.seed},
                {"noise_sd", cfg.probe.noise_sd},
                {"noise_draws", cfg.probe.noise_draws}};
  j["ablation"] = {{"enabled", cfg.ablation.enabled},
                   {"permutations", cfg.ablation.permutations}};
  json ds = json::array();
  for (const auto& d : cfg.datasets) ds.push_back(dataset_to_json(d));
  j["datasets"] = ds;
  return j.dump(2);
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  const std::string text = config_to_json(cfg);
  return fnv1a_bytes(text.data(), text.size());
}

DatasetBundle build_dataset(const DatasetSpecConfig& spec) {
  DatasetBundle bundle;
  if (spec.kind == "synth_tabular") {
    bundle = synth_tabular(spec.synth, spec.generator_seed);
  } else if (spec.kind == "minisprites") {
    bundle = gen_minisprites(spec.sprites, spec.generator_seed);
  } else if (spec.kind == "csv") {
    bundle = load_csv_dataset(spec.csv_path, schema_from_json_file(spec.schema_path));
    if (spec.max_rows > 0 && spec.max_rows < bundle.n_rows()) {
      SeededRng rng(spec.generator_seed ^ 0x5EEDC5A1B2D3E4F5ULL);
      std::vector<std::size_t> keep = rng.permutation(bundle.n_rows());
      keep.resize(spec.max_rows);
      std::sort(keep.begin(), keep.end());
      Matrix x(spec.max_rows, bundle.n_features());
      std::vector<int> labels, protected_attr;
      for (std::size_t i = 0; i < keep.size(); ++i) {
        const auto src = bundle.X.row(keep[i]);
        std::copy(src.begin(), src.end(), x.row(i).begin());
        if (!bundle.labels.empty()) labels.push_back(bundle.labels[keep[i]]);
        if (!bundle.protected_attr.empty())
          protected_attr.push_back(bundle.protected_attr[keep[i]]);
      }
      bundle.X = std::move(x);
      bundle.labels = std::move(labels);
      bundle.protected_attr = std::move(protected_attr);
      bundle.provenance +=
          " (subsampled to " + std::to_string(spec.max_rows) + " rows)";
      std::uint64_t h =
          fnv1a_bytes(bundle.X.data.data(), bundle.X.data.size() * sizeof(double));
      if (!bundle.labels.empty())
        h = fnv1a_bytes(bundle.labels.data(), bundle.labels.size() * sizeof(int), h);
      if (!bundle.protected_attr.empty())
        h = fnv1a_bytes(bundle.protected_attr.data(),
                        bundle.protected_attr.size() * sizeof(int), h);
      if (!bundle.feature_group.empty())
        h = fnv1a_bytes(bundle.feature_group.data(),
                        bundle.feature_group.size() * sizeof(std::size_t), h);
      bundle.content_hash = h;
    }
  } else {
    throw std::invalid_argument("build_dataset: unknown kind '" + spec.kind + "'");
  }
  bundle.name = spec.name;
  return bundle;
}

std::string run_id(const std::string& dataset, VaeVariant arch, std::uint64_t seed) {
  return sanitize_name(dataset) + "__" + variant_name(arch) + "__seed" +
         std::to_string(seed);
}

// ---------------------------------------------------------------------------
// Manifest JSON.

namespace {

json metrics_to_json(const MetricSet& m) {
  json j{{"ces_mean", m.ces_mean},
         {"ces_per_dim", vec_to_json(m.ces_per_dim)},
         {"specificity", m.specificity},
         {"modularity", m.modularity_score},
         {"fgd", m.fgd_score},
         {"mig", m.mig_score}};
  if (m.dci.has_value())
    j["dci"] = *m.dci;
  else
    j["dci"] = nullptr;
  return j;
}

MetricSet metrics_from_json(const json& j) {
  MetricSet m;
  m.ces_mean = j.at("ces_mean").get<double>();
  m.ces_per_dim = vec_from_json(j.at("ces_per_dim"));
  m.specificity = j.at("specificity").get<double>();
  m.modularity_score = j.at("modularity").get<double>();
  m.fgd_score = j.at("fgd").get<double>();
  m.mig_score = j.at("mig").get<double>();
  if (!j.at("dci").is_null()) m.dci = j.at("dci").get<double>();
  return m;
}

json probe_to_json(const ProbeResult& p) {
  json j{{"accuracy", p.accuracy},
         {"auc", p.auc_score},
         {"robustness", p.robustness},
         {"dp_defined", p.dp.defined},
         {"n_train", p.n_train},
         {"n_heldout", p.n_heldout}};
  if (p.dp.defined)
    j["dp_gap"] = p.dp.gap;
  else
    j["dp_gap"] = nullptr;
  return j;
}

ProbeResult probe_from_json(const json& j) {
  ProbeResult p;
  p.accuracy = j.at("accuracy").get<double>();
  p.auc_score = j.at("auc").get<double>();
  p.robustness = j.at("robustness").get<double>();
  p.dp.defined = j.at("dp_defined").get<bool>();
  if (!j.at("dp_gap").is_null()) p.dp.gap = j.at("dp_gap").get<double>();
  p.n_train = j.at("n_train").get<std::size_t>();
  p.n_heldout = j.at("n_heldout").get<std::size_t>();
  return p;
}

json ablation_to_json(const AblationResult& a) {
  return json{{"semantic_modularity", a.semantic_modularity},
              {"semantic_fgd", a.semantic_fgd},
              {"random_modularity", vec_to_json(a.random_modularity)},
              {"random_fgd", vec_to_json(a.random_fgd)},
              {"random_modularity_mean", a.random_modularity_mean},
              {"random_fgd_mean", a.random_fgd_mean},
              {"modularity_gap", a.modularity_gap},
              {"fgd_gap", a.fgd_gap}};
}

AblationResult ablation_from_json(const json& j) {
  AblationResult a;
  a.semantic_modularity = j.at("semantic_modularity").get<double>();
  a.semantic_fgd = j.at("semantic_fgd").get<double>();
  a.random_modularity = vec_from_json(j.at("random_modularity"));
  a.random_fgd = vec_from_json(j.at("random_fgd"));
  a.random_modularity_mean = j.at("random_modularity_mean").get<double>();
  a.random_fgd_mean = j.at("random_fgd_mean").get<double>();
  a.modularity_gap = j.at("modularity_gap").get<double>();
  a.fgd_gap = j.at("fgd_gap").get<double>();
  return a;
}

json manifest_to_json_obj(const RunManifest& m) {
  json j;
  j["dataset"] = m.dataset;
  j["architecture"] = m.architecture;
  j["seed"] = m.seed;
  j["id"] = m.id;
  j["config_hash"] = m.config_hash;
  j["dataset_hash"] = m.dataset_hash;
  j["domain_class"] = m.domain_class;
  j["failed"] = m.failed;
  j["error"] = m.error;
  j["final_mse"] = m.final_mse;
  j["epochs_run"] = m.epochs_run;
  j["converged"] = m.converged;
  j["group_names"] = m.group_names;
  j["linearity_r2"] = vec_to_json(m.linearity_r2);
  j["ces_per_dim"] = vec_to_json(m.ces_per_dim);
  j["ces_fixed_per_dim"] = vec_to_json(m.ces_fixed_per_dim);
  j["sigma_eff"] = vec_to_json(m.sigma_eff);
  j["patch_compound"] = vec_to_json(m.patch_compound);
  j["patch_direct"] = vec_to_json(m.patch_direct);
  j["mediation_mr"] = matrix_to_json(m.mediation_mr);
  j["mediation_te"] = vec_to_json(m.mediation_te);
  j["mediation_violations"] = m.mediation_violations;
  j["nis"] = m.nis;
  j["metrics"] = metrics_to_json(m.metrics);
  j["probe_defined"] = m.probe_defined;
  j["probe"] = m.probe_defined ? probe_to_json(m.probe) : json(nullptr);
  j["ablation"] = m.ablation.has_value() ? ablation_to_json(*m.ablation) : json(nullptr);
  j["wall_clock_seconds"] = m.wall_clock_seconds;
  j["software_version"] = m.software_version;
  return j;
}

}  // namespace

std::string manifest_to_json(const RunManifest& m) {
  return manifest_to_json_obj(m).dump(2);
}

RunManifest manifest_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("manifest: JSON parse failed: ") + e.what());
  }
  RunManifest m;
  m.dataset = j.at("dataset").get<std::string>();
  m.architecture = j.at("architecture").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.id = j.at("id").get<std::string>();
  m.config_hash = j.at("config_hash").get<std::uint64_t>();
  m.dataset_hash = j.at("dataset_hash").get<std::uint64_t>();
  m.domain_class = j.at("domain_class").get<std::string>();
  m.failed = j.at("failed").get<bool>();
  m.error = j.at("error").get<std::string>();
  m.final_mse = j.at("final_mse").get<double>();
  m.epochs_run = j.at("epochs_run").get<std::size_t>();
  m.converged = j.at("converged").get<bool>();
  m.group_names = j.at("group_names").get<std::vector<std::string>>();
  m.linearity_r2 = vec_from_json(j.at("linearity_r2"));
  m.ces_per_dim = vec_from_json(j.at("ces_per_dim"));
  m.ces_fixed_per_dim = vec_from_json(j.at("ces_fixed_per_dim"));
  m.sigma_eff = vec_from_json(j.at("sigma_eff"));
  m.patch_compound = vec_from_json(j.at("patch_compound"));
  m.patch_direct = vec_from_json(j.at("patch_direct"));
  m.mediation_mr = matrix_from_json(j.at("mediation_mr"));
  m.mediation_te = vec_from_json(j.at("mediation_te"));
  m.mediation_violations = j.at("mediation_violations").get<std::size_t>();
  m.nis = j.at("nis").get<double>();
  m.metrics = metrics_from_json(j.at("metrics"));
  m.probe_defined = j.at("probe_defined").get<bool>();
  if (!j.at("probe").is_null()) m.probe = probe_from_json(j.at("probe"));
  if (!j.at("ablation").is_null()) m.ablation = ablation_from_json(j.at("ablation"));
  m.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
  m.software_version = j.at("software_version").get<std::string>();
  return m;
}

RunManifest manifest_from_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("manifest: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return manifest_from_json(ss.str());
}

std::string manifest_comparable_json(const RunManifest& m) {
  json j = manifest_to_json_obj(m);
  j.erase("wall_clock_seconds");
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Grid execution.

namespace {

RunManifest run_cell_impl(const ExperimentConfig& cfg, const DatasetBundle& bundle,
                          VaeVariant arch, std::uint64_t seed,
                          const std::string& run_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  RunManifest man;
  man.dataset = bundle.name;
  man.architecture = variant_name(arch);
  man.seed = seed;
  man.id = run_id(bundle.name, arch, seed);
  man.config_hash = config_hash(cfg);
  man.dataset_hash = bundle.content_hash;
  man.domain_class = domain_class_of(bundle);
  try {
    VaeArchitectureSpec spec;
    spec.variant = arch;
    spec.input_dim = bundle.n_features();
    spec.encoder_widths = cfg.encoder_widths;
    spec.latent_dim = cfg.latent_dim;
    spec.hyper = cfg.hyper;
    TrainConfig train_cfg = cfg.train;
    train_cfg.seed = seed;
    const TrainedModel model = train_vae(spec, bundle.X, train_cfg);
    man.final_mse = model.final_mse;
    man.epochs_run = model.epochs_run;
    man.converged = model.converged;

    InterventionConfig icfg = cfg.intervention;
    icfg.seed = seed;
    icfg.eval_rows =
        heldout_split(bundle.n_rows(), train_cfg.heldout_fraction, seed).heldout;

    const ImportanceMatrix im = level1_scan(model, bundle, icfg);
    man.group_names = bundle.group_names;
    man.linearity_r2 = im.linearity_r2;

    const PosteriorStats stats = posterior_stats(model, bundle, icfg);
    const SweepEffects calibrated = ces_sweep_calibrated(model, bundle, stats, icfg);
    const SweepEffects fixed = ces_sweep_fixed(model, bundle, icfg);
    man.ces_per_dim = calibrated.ces;
    man.ces_fixed_per_dim = fixed.ces;
    man.sigma_eff = stats.sigma_eff;

    const PatchingProfile profile = patching_profile(model, bundle, icfg);
    man.patch_compound = profile.compound;
    man.patch_direct = profile.direct;

    const MediationGrid grid = mediation_scan(model, bundle, icfg);
    man.mediation_mr = grid.mr;
    man.mediation_te = grid.te;
    man.mediation_violations = grid.raw_violations;
    man.nis = grid.nis;

    man.metrics.ces_per_dim = calibrated.ces;
    man.metrics.ces_mean = vec_mean(calibrated.ces);
    man.metrics.specificity = specificity_from_effects(calibrated).overall;
    man.metrics.modularity_score = modularity(im.R);
    man.metrics.fgd_score = fgd(im.R);
    const std::vector<std::size_t> rows = resolve_eval_rows(bundle.n_rows(), icfg);
    Matrix mu_eval(rows.size(), cfg.latent_dim);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const Vec mu = encode_mu(model, bundle.X.row(rows[i]));
      std::copy(mu.begin(), mu.end(), mu_eval.row(i).begin());
    }
    const Matrix proxies = factor_proxies(bundle);
    Matrix factors_eval(rows.size(), proxies.cols);
    for (std::size_t i = 0; i < rows.size(); ++i)
      std::copy(proxies.row(rows[i]).begin(), proxies.row(rows[i]).end(),
                factors_eval.row(i).begin());
    man.metrics.mig_score = mig(mu_eval, factors_eval);
    const bool all_singletons = bundle.group_count() == bundle.n_features();
    if (all_singletons)
      man.metrics.dci = dci_completeness(im.R, bundle.feature_group);

    if (!bundle.labels.empty()) {
      Matrix mu_all(bundle.n_rows(), cfg.latent_dim);
      for (std::size_t r = 0; r < bundle.n_rows(); ++r) {
        const Vec mu = encode_mu(model, bundle.X.row(r));
        std::copy(mu.begin(), mu.end(), mu_all.row(r).begin());
      }
      man.probe = evaluate_probe(mu_all, bundle.labels, bundle.protected_attr, cfg.probe);
      man.probe_defined = true;
    }

    if (cfg.ablation.enabled)
      man.ablation = grouping_ablation(model, bundle, icfg, cfg.ablation.permutations);

    if (!run_dir.empty()) {
      std::filesystem::create_directories(run_dir);
      write_level1_csv(run_dir + "/level1.csv", im, bundle.group_names);
      write_ces_csv(run_dir + "/ces.csv", calibrated, fixed, stats);
      write_patching_csv(run_dir + "/patching.csv", profile);
      write_mediation_csv(run_dir + "/mediation.csv", grid, bundle.group_names);
      save_model(model, run_dir + "/model.bin");
    }
  } catch (const std::exception& e) {
    man.failed = true;
    man.error = e.what();
  }
  const auto t1 = std::chrono::steady_clock::now();
  man.wall_clock_seconds = std::chrono::duration<double>(t1 - t0).count();
  return man;
}

}  // namespace

RunManifest run_cell(const ExperimentConfig& cfg, const DatasetBundle& bundle,
                     VaeVariant arch, std::uint64_t seed) {
  return run_cell_impl(cfg, bundle, arch, seed, "");
}

GridResult run_grid(const ExperimentConfig& cfg, std::size_t jobs, bool write_outputs) {
  validate_config(cfg);
  GridResult result;

  struct LoadedDataset {
    bool ok = false;
    DatasetBundle bundle;
    std::string name;
    std::string error;
  };
  std::vector<LoadedDataset> loaded(cfg.datasets.size());
  for (std::size_t i = 0; i < cfg.datasets.size(); ++i) {
    loaded[i].name = cfg.datasets[i].name;
    try {
      loaded[i].bundle = build_dataset(cfg.datasets[i]);
      loaded[i].ok = true;
    } catch (const std::exception& e) {
      loaded[i].error = e.what();
      result.warnings.push_back("dataset '" + cfg.datasets[i].name +
                                "' failed to load: " + loaded[i].error);
    }
  }

  struct Cell {
    std::size_t dataset_index;
    VaeVariant arch;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (std::size_t di = 0; di < cfg.datasets.size(); ++di)
    for (VaeVariant arch : cfg.architectures)
      for (std::uint64_t seed : cfg.seeds) cells.push_back({di, arch, seed});

  result.manifests.resize(cells.size());
  const std::string runs_root =
      write_outputs ? cfg.out_dir + "/runs" : std::string();

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      const Cell& cell = cells[i];
      const LoadedDataset& ds = loaded[cell.dataset_index];
      if (!ds.ok) {
        RunManifest man;
        man.dataset = ds.name;
        man.architecture = variant_name(cell.arch);
        man.seed = cell.seed;
        man.id = run_id(ds.name, cell.arch, cell.seed);
        man.config_hash = config_hash(cfg);
        man.failed = true;
        man.error = "dataset failed to load: " + ds.error;
        result.manifests[i] = std::move(man);
        continue;
      }
      const std::string run_dir =
          runs_root.empty() ? std::string()
                            : runs_root + "/" + run_id(ds.name, cell.arch, cell.seed);
      result.manifests[i] = run_cell_impl(cfg, ds.bundle, cell.arch, cell.seed, run_dir);
    }
  };

  const std::size_t n_workers =
      std::max<std::size_t>(1, std::min(jobs == 0 ? std::size_t{1} : jobs, cells.size()));
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n_workers);
    for (std::size_t t = 0; t < n_workers; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  std::sort(result.manifests.begin(), result.manifests.end(),
            [](const RunManifest& a, const RunManifest& b) { return a.id < b.id; });

  if (write_outputs) {
    const std::string manifest_dir = cfg.out_dir + "/manifests";
    std::filesystem::create_directories(manifest_dir);
    for (const RunManifest& man : result.manifests) {
      std::ofstream out(manifest_dir + "/" + man.id + ".json", std::ios::binary);
      if (!out)
        throw std::runtime_error("run_grid: cannot write manifest for " + man.id);
      out << manifest_to_json(man) << "\n";
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Aggregation.

namespace {

const std::vector<std::string> kSummaryMetricNames = {
    "mse", "ces", "specificity", "modularity", "fgd", "mig"};

double summary_metric_value(const RunManifest& m, std::size_t k) {
  switch (k) {
    case 0: return m.final_mse;
    case 1: return m.metrics.ces_mean;
    case 2: return m.metrics.specificity;
    case 3: return m.metrics.modularity_score;
    case 4: return m.metrics.fgd_score;
    case 5: return m.metrics.mig_score;
    default: throw std::logic_error("summary_metric_value: bad index");
  }
}

// pearson() rejects n < 3; tiny grids report an undefined cell instead.
CorrelationResult pearson_or_undefined(const Vec& x, const Vec& y) {
  CorrelationResult res;
  res.n = x.size();
  if (x.size() < 3) return res;
  return pearson(x, y);
}

json correlation_to_json(const CorrelationResult& c) {
  return json{{"r", c.r}, {"p", c.p}, {"n", c.n}, {"defined", c.defined}};
}

CorrelationResult correlation_from_json(const json& j) {
  CorrelationResult c;
  c.r = j.at("r").get<double>();
  c.p = j.at("p").get<double>();
  c.n = j.at("n").get<std::size_t>();
  c.defined = j.at("defined").get<bool>();
  return c;
}

}  // namespace

const std::vector<std::string>& summary_metric_names() { return kSummaryMetricNames; }

ComparisonReport aggregate(const std::vector<RunManifest>& manifests,
                           const AggregateOptions& opts) {
  ComparisonReport report;
  report.n_manifests = manifests.size();

  std::vector<const RunManifest*> ok;
  for (const RunManifest& m : manifests) {
    if (m.failed) {
      report.warnings.push_back("run " + m.id + " failed: " + m.error);
      continue;
    }
    ok.push_back(&m);
  }
  if (!ok.empty()) report.config_hash = ok.front()->config_hash;

  // Per-(architecture, domain class) summaries.
  std::map<std::pair<std::string, std::string>, std::vector<const RunManifest*>> by_arch;
  for (const RunManifest* m : ok)
    by_arch[{m->architecture, m->domain_class}].push_back(m);
  for (const auto& [key, runs] : by_arch) {
    ArchSummary s;
    s.architecture = key.first;
    s.domain_class = key.second;
    s.n = runs.size();
    s.means.resize(kSummaryMetricNames.size());
    s.stds.resize(kSummaryMetricNames.size());
    for (std::size_t k = 0; k < kSummaryMetricNames.size(); ++k) {
      double sum = 0.0;
      for (const RunManifest* m : runs) sum += summary_metric_value(*m, k);
      const double mean = sum / static_cast<double>(runs.size());
      double ss = 0.0;
      for (const RunManifest* m : runs) {
        const double d = summary_metric_value(*m, k) - mean;
        ss += d * d;
      }
      s.means[k] = mean;
      s.stds[k] = runs.size() > 1
                      ? std::sqrt(ss / static_cast<double>(runs.size() - 1))
                      : 0.0;
    }
    report.summaries.push_back(std::move(s));
  }

  // Pairwise architecture comparisons over shared (dataset, seed) cells.
  std::map<std::string, std::map<std::pair<std::string, std::uint64_t>, const RunManifest*>>
      cells_by_arch;
  for (const RunManifest* m : ok)
    cells_by_arch[m->architecture][{m->dataset, m->seed}] = m;
  std::vector<std::string> arch_names;
  for (const auto& [name, cells] : cells_by_arch) arch_names.push_back(name);

  for (std::size_t ai = 0; ai < arch_names.size(); ++ai) {
    for (std::size_t bi = ai + 1; bi < arch_names.size(); ++bi) {
      const auto& cells_a = cells_by_arch[arch_names[ai]];
      const auto& cells_b = cells_by_arch[arch_names[bi]];
      std::vector<std::pair<const RunManifest*, const RunManifest*>> shared;
      std::size_t dropped = 0;
      for (const auto& [cell, ma] : cells_a) {
        const auto it = cells_b.find(cell);
        if (it == cells_b.end()) {
          ++dropped;
          continue;
        }
        shared.push_back({ma, it->second});
      }
      for (const auto& [cell, mb] : cells_b)
        if (!cells_a.count(cell)) ++dropped;
      const std::string label = arch_names[ai] + "_vs_" + arch_names[bi];
      if (dropped > 0)
        report.warnings.push_back(label + ": dropped " + std::to_string(dropped) +
                                  " unpaired cell(s)");
      if (shared.size() < 2) {
        report.warnings.push_back(label + ": fewer than 2 shared cells, skipped");
        continue;
      }
      for (std::size_t k = 0; k < kSummaryMetricNames.size(); ++k) {
        Vec va(shared.size()), vb(shared.size());
        for (std::size_t i = 0; i < shared.size(); ++i) {
          va[i] = summary_metric_value(*shared[i].first, k);
          vb[i] = summary_metric_value(*shared[i].second, k);
        }
        PairedComparison cmp;
        cmp.label = label;
        cmp.metric = kSummaryMetricNames[k];
        cmp.n = shared.size();
        const WilcoxonResult w = wilcoxon_signed_rank(va, vb);
        cmp.p_raw = w.p;
        const CohensDResult d = cohens_d_paired(va, vb);
        cmp.cohens_d = d.d;
        cmp.degenerate_d = d.degenerate;
        report.pairwise.push_back(std::move(cmp));
      }
    }
  }

  // Holm-Sidak correction: one family over everything, or one per metric.
  if (opts.per_metric_family) {
    for (const std::string& metric : kSummaryMetricNames) {
      std::vector<std::size_t> idx;
      Vec ps;
      for (std::size_t i = 0; i < report.pairwise.size(); ++i) {
        if (report.pairwise[i].metric != metric) continue;
        idx.push_back(i);
        ps.push_back(report.pairwise[i].p_raw);
      }
      if (ps.empty()) continue;
      const HolmSidakResult h = holm_sidak(ps, opts.alpha);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        report.pairwise[idx[i]].p_adj = h.p_adjusted[i];
        report.pairwise[idx[i]].significant = h.reject[i];
      }
    }
  } else if (!report.pairwise.empty()) {
    Vec ps;
    ps.reserve(report.pairwise.size());
    for (const PairedComparison& c : report.pairwise) ps.push_back(c.p_raw);
    const HolmSidakResult h = holm_sidak(ps, opts.alpha);
    for (std::size_t i = 0; i < report.pairwise.size(); ++i) {
      report.pairwise[i].p_adj = h.p_adjusted[i];
      report.pairwise[i].significant = h.reject[i];
    }
  }

  // Metric-vs-downstream correlation grid.
  const std::vector<std::string> circuit_metrics = {"ces", "specificity", "modularity",
                                                    "fgd", "mig"};
  const std::vector<std::string> downstream = {"accuracy", "auc", "robustness", "dp_gap"};
  auto circuit_value = [](const RunManifest& m, const std::string& name) {
    if (name == "ces") return m.metrics.ces_mean;
    if (name == "specificity") return m.metrics.specificity;
    if (name == "modularity") return m.metrics.modularity_score;
    if (name == "fgd") return m.metrics.fgd_score;
    return m.metrics.mig_score;
  };
  for (const std::string& metric : circuit_metrics) {
    for (const std::string& measure : downstream) {
      Vec xs, ys;
      for (const RunManifest* m : ok) {
        if (!m->probe_defined) continue;
        if (measure == "dp_gap" && !m->probe.dp.defined) continue;
        xs.push_back(circuit_value(*m, metric));
        if (measure == "accuracy")
          ys.push_back(m->probe.accuracy);
        else if (measure == "auc")
          ys.push_back(m->probe.auc_score);
        else if (measure == "robustness")
          ys.push_back(m->probe.robustness);
        else
          ys.push_back(m->probe.dp.gap);
      }
      if (xs.empty()) continue;  // no observations -> no grid cell
      CorrelationCell cell;
      cell.metric = metric;
      cell.measure = measure;
      cell.corr = pearson_or_undefined(xs, ys);
      report.correlations.push_back(std::move(cell));
    }
  }

  Vec ces_all, mse_all;
  for (const RunManifest* m : ok) {
    ces_all.push_back(m->metrics.ces_mean);
    mse_all.push_back(m->final_mse);
  }
  report.ces_mse = pearson_or_undefined(ces_all, mse_all);
  return report;
}

// ---------------------------------------------------------------------------
// Report JSON.

std::string report_to_json(const ComparisonReport& report) {
  json j;
  j["config_hash"] = report.config_hash;
  j["n_manifests"] = report.n_manifests;
  j["metric_names"] = kSummaryMetricNames;
  json summaries = json::array();
  for (const ArchSummary& s : report.summaries)
    summaries.push_back(json{{"architecture", s.architecture},
                             {"domain_class", s.domain_class},
                             {"n", s.n},
                             {"means", vec_to_json(s.means)},
                             {"stds", vec_to_json(s.stds)}});
  j["summaries"] = summaries;
  json pairwise = json::array();
  for (const PairedComparison& c : report.pairwise)
    pairwise.push_back(json{{"comparison", c.label},
                            {"metric", c.metric},
                            {"n", c.n},
                            {"p_raw", c.p_raw},
                            {"p_adj", c.p_adj},
                            {"d", c.cohens_d},
                            {"degenerate_d", c.degenerate_d},
                            {"significant", c.significant}});
  j["pairwise"] = pairwise;
  json correlations = json::array();
  for (const CorrelationCell& c : report.correlations)
    correlations.push_back(json{{"metric", c.metric},
                                {"measure", c.measure},
                                {"corr", correlation_to_json(c.corr)}});
  j["correlations"] = correlations;
  j["ces_mse"] = correlation_to_json(report.ces_mse);
  j["warnings"] = report.warnings;
  return j.dump(2);
}

ComparisonReport report_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("report: JSON parse failed: ") + e.what());
  }
  ComparisonReport report;
  report.config_hash = j.at("config_hash").get<std::uint64_t>();
  report.n_manifests = j.at("n_manifests").get<std::size_t>();
  for (const json& s : j.at("summaries")) {
    ArchSummary sum;
    sum.architecture = s.at("architecture").get<std::string>();
    sum.domain_class = s.at("domain_class").get<std::string>();
    sum.n = s.at("n").get<std::size_t>();
    sum.means = vec_from_json(s.at("means"));
    sum.stds = vec_from_json(s.at("stds"));
    report.summaries.push_back(std::move(sum));
  }
  for (const json& p : j.at("pairwise")) {
    PairedComparison c;
    c.label = p.at("comparison").get<std::string>();
    c.metric = p.at("metric").get<std::string>();
    c.n = p.at("n").get<std::size_t>();
    c.p_raw = p.at("p_raw").get<double>();
    c.p_adj = p.at("p_adj").get<double>();
    c.cohens_d = p.at("d").get<double>();
    c.degenerate_d = p.at("degenerate_d").get<bool>();
    c.significant = p.at("significant").get<bool>();
    report.pairwise.push_back(std::move(c));
  }
  for (const json& c : j.at("correlations")) {
    CorrelationCell cell;
    cell.metric = c.at("metric").get<std::string>();
    cell.measure = c.at("measure").get<std::string>();
    cell.corr = correlation_from_json(c.at("corr"));
    report.correlations.push_back(std::move(cell));
  }
  report.ces_mse = correlation_from_json(j.at("ces_mse"));
  report.warnings = j.at("warnings").get<std::vector<std::string>>();
  return report;
}

// ---------------------------------------------------------------------------
// Report emission.

namespace {

std::string fmt_or_empty(double v, bool defined) {
  return defined ? format_double(v) : std::string();
}

}  // namespace

void emit_reports(const ComparisonReport& report,
                  const std::vector<RunManifest>& manifests, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);

  {
    const CsvRow header = {"run_id",      "dataset",     "architecture",
                           "seed",        "domain",      "failed",
                           "error",       "final_mse",   "epochs_run",
                           "converged",   "ces_mean",    "ces_fixed_mean",
                           "specificity", "modularity",  "fgd",
                           "mig",         "dci",         "nis",
                           "mediation_violations",       "min_linearity_r2",
                           "wall_clock_seconds",         "software_version"};
    std::vector<CsvRow> rows;
    for (const RunManifest& m : manifests) {
      const bool ok = !m.failed;
      double min_r2 = 0.0;
      bool has_r2 = ok && !m.linearity_r2.empty();
      if (has_r2) min_r2 = *std::min_element(m.linearity_r2.begin(), m.linearity_r2.end());
      rows.push_back(
          {m.id, m.dataset, m.architecture, std::to_string(m.seed), m.domain_class,
           m.failed ? "1" : "0", m.error, fmt_or_empty(m.final_mse, ok),
           ok ? std::to_string(m.epochs_run) : std::string(),
           ok ? (m.converged ? "1" : "0") : std::string(),
           fmt_or_empty(m.metrics.ces_mean, ok),
           fmt_or_empty(vec_mean(m.ces_fixed_per_dim), ok),
           fmt_or_empty(m.metrics.specificity, ok),
           fmt_or_empty(m.metrics.modularity_score, ok),
           fmt_or_empty(m.metrics.fgd_score, ok), fmt_or_empty(m.metrics.mig_score, ok),
           fmt_or_empty(m.metrics.dci.value_or(0.0), ok && m.metrics.dci.has_value()),
           fmt_or_empty(m.nis, ok), ok ? std::to_string(m.mediation_violations) : "",
           fmt_or_empty(min_r2, has_r2), format_double(m.wall_clock_seconds),
           m.software_version});
    }
    write_csv_file(out_dir + "/metrics.csv", header, rows);
  }

  {
    const CsvRow header = {"comparison", "metric",       "n",          "p_raw",
                           "p_adj",      "d",            "degenerate_d", "significant"};
    std::vector<CsvRow> rows;
    for (const PairedComparison& c : report.pairwise)
      rows.push_back({c.label, c.metric, std::to_string(c.n), format_double(c.p_raw),
                      format_double(c.p_adj), format_double(c.cohens_d),
                      c.degenerate_d ? "1" : "0", c.significant ? "1" : "0"});
    write_csv_file(out_dir + "/pairwise_tests.csv", header, rows);
  }

  {
    const CsvRow header = {"metric", "measure", "r", "p", "n"};
    std::vector<CsvRow> rows;
    for (const CorrelationCell& c : report.correlations)
      rows.push_back({c.metric, c.measure, fmt_or_empty(c.corr.r, c.corr.defined),
                      fmt_or_empty(c.corr.p, c.corr.defined), std::to_string(c.corr.n)});
    if (report.ces_mse.n > 0)
      rows.push_back({"ces", "final_mse",
                      fmt_or_empty(report.ces_mse.r, report.ces_mse.defined),
                      fmt_or_empty(report.ces_mse.p, report.ces_mse.defined),
                      std::to_string(report.ces_mse.n)});
    write_csv_file(out_dir + "/correlations.csv", header, rows);
  }

  {
    const CsvRow header = {"run_id", "dataset",    "architecture", "seed",
                           "probe_defined", "accuracy", "auc",      "robustness",
                           "dp_defined",    "dp_gap",   "n_train",  "n_heldout"};
    std::vector<CsvRow> rows;
    for (const RunManifest& m : manifests) {
      const bool ok = !m.failed && m.probe_defined;
      rows.push_back({m.id, m.dataset, m.architecture, std::to_string(m.seed),
                      m.probe_defined ? "1" : "0", fmt_or_empty(m.probe.accuracy, ok),
                      fmt_or_empty(m.probe.auc_score, ok),
                      fmt_or_empty(m.probe.robustness, ok),
                      ok ? (m.probe.dp.defined ? "1" : "0") : std::string(),
                      fmt_or_empty(m.probe.dp.gap, ok && m.probe.dp.defined),
                      ok ? std::to_string(m.probe.n_train) : std::string(),
                      ok ? std::to_string(m.probe.n_heldout) : std::string()});
    }
    write_csv_file(out_dir + "/downstream.csv", header, rows);
  }

  {
    const CsvRow header = {"run_id", "dataset", "architecture", "seed",
                           "n_permutations", "semantic_modularity",
                           "random_modularity_mean", "modularity_gap", "semantic_fgd",
                           "random_fgd_mean", "fgd_gap"};
    std::vector<CsvRow> rows;
    for (const RunManifest& m : manifests) {
      if (m.failed || !m.ablation.has_value()) continue;
      const AblationResult& a = *m.ablation;
      rows.push_back({m.id, m.dataset, m.architecture, std::to_string(m.seed),
                      std::to_string(a.random_modularity.size()),
                      format_double(a.semantic_modularity),
                      format_double(a.random_modularity_mean),
                      format_double(a.modularity_gap), format_double(a.semantic_fgd),
                      format_double(a.random_fgd_mean), format_double(a.fgd_gap)});
    }
    write_csv_file(out_dir + "/ablation.csv", header, rows);
  }

  // Heatmaps: per-dataset seed-averaged CES-per-dimension (architecture rows)
  // and mediation-ratio (architecture x group rows, layer columns) matrices.
  std::map<std::string, std::map<std::string, std::vector<const RunManifest*>>> by_ds_arch;
  for (const RunManifest& m : manifests)
    if (!m.failed) by_ds_arch[m.dataset][m.architecture].push_back(&m);
  for (const auto& [dataset, archs] : by_ds_arch) {
    const std::string tag = sanitize_name(dataset);
    {
      std::size_t latent_dim = 0;
      for (const auto& [arch, runs] : archs)
        latent_dim = std::max(latent_dim, runs.front()->ces_per_dim.size());
      CsvRow header = {"architecture"};
      for (std::size_t d = 0; d < latent_dim; ++d)
        header.push_back("dim_" + std::to_string(d));
      std::vector<CsvRow> rows;
      for (const auto& [arch, runs] : archs) {
        Vec mean_ces(latent_dim, 0.0);
        for (const RunManifest* m : runs)
          for (std::size_t d = 0; d < latent_dim && d < m->ces_per_dim.size(); ++d)
            mean_ces[d] += m->ces_per_dim[d];
        CsvRow row = {arch};
        for (std::size_t d = 0; d < latent_dim; ++d)
          row.push_back(format_double(mean_ces[d] / static_cast<double>(runs.size())));
        rows.push_back(std::move(row));
      }
      write_csv_file(out_dir + "/heatmap_ces_" + tag + ".csv", header, rows);
    }
    {
      std::size_t n_layers = 0;
      for (const auto& [arch, runs] : archs)
        n_layers = std::max(n_layers, runs.front()->mediation_mr.cols);
      CsvRow header = {"architecture", "group"};
      for (std::size_t l = 0; l < n_layers; ++l)
        header.push_back("layer_" + std::to_string(l));
      std::vector<CsvRow> rows;
      for (const auto& [arch, runs] : archs) {
        const RunManifest* first = runs.front();
        const std::size_t n_groups = first->mediation_mr.rows;
        for (std::size_t g = 0; g < n_groups; ++g) {
          CsvRow row = {arch, g < first->group_names.size() ? first->group_names[g]
                                                            : std::to_string(g)};
          for (std::size_t l = 0; l < n_layers; ++l) {
            double sum = 0.0;
            std::size_t count = 0;
            for (const RunManifest* m : runs) {
              if (g >= m->mediation_mr.rows || l >= m->mediation_mr.cols) continue;
              sum += m->mediation_mr(g, l);
              ++count;
            }
            row.push_back(count > 0 ? format_double(sum / static_cast<double>(count))
                                    : std::string());
          }
          rows.push_back(std::move(row));
        }
      }
      write_csv_file(out_dir + "/heatmap_mediation_" + tag + ".csv", header, rows);
    }
  }

  {
    std::ofstream out(out_dir + "/summary.json", std::ios::binary);
    if (!out) throw std::runtime_error("emit_reports: cannot write summary.json");
    out << report_to_json(report) << "\n";
  }
}

}  // namespace vaecirc
