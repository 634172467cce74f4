#include "vaecirc/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace vaecirc {

namespace {

using nlohmann::json;

bool is_missing(const std::string& s) { return s.empty() || s == "?" || s == "NA"; }

bool parse_double(const std::string& s, double* out) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    if (pos != s.size()) return false;
    *out = v;
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

ColumnKind kind_from_string(const std::string& s) {
  if (s == "continuous") return ColumnKind::kContinuous;
  if (s == "categorical") return ColumnKind::kCategorical;
  if (s == "label") return ColumnKind::kLabel;
  if (s == "protected") return ColumnKind::kProtected;
  throw std::invalid_argument("schema: unknown column kind '" + s + "'");
}

int binarize(const ColumnSpec& col, const std::string& value) {
  if (!col.positive_value.empty()) return value == col.positive_value ? 1 : 0;
  if (col.threshold.has_value()) {
    double v = 0.0;
    if (!parse_double(value, &v))
      throw std::invalid_argument("column '" + col.name + "': non-numeric value '" + value +
                                  "' under numeric threshold");
    return v >= *col.threshold ? 1 : 0;
  }
  throw std::invalid_argument("column '" + col.name +
                              "': label/protected needs positive_value or threshold");
}

}  // namespace

std::uint64_t fnv1a_bytes(const void* data, std::size_t len, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

DatasetSchema schema_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("schema: JSON parse failure: ") + e.what());
  }
  DatasetSchema schema;
  schema.name = j.value("name", "unnamed");
  const std::string delim = j.value("delimiter", ",");
  if (delim.size() != 1) throw std::invalid_argument("schema: delimiter must be one character");
  schema.delimiter = delim[0];
  if (!j.contains("columns") || !j["columns"].is_array() || j["columns"].empty())
    throw std::invalid_argument("schema: missing non-empty 'columns' array");
  for (const auto& c : j["columns"]) {
    ColumnSpec col;
    col.name = c.at("name").get<std::string>();
    col.kind = kind_from_string(c.at("kind").get<std::string>());
    col.group = c.value("group", "");
    col.positive_value = c.value("positive_value", "");
    if (c.contains("threshold")) col.threshold = c["threshold"].get<double>();
    const bool is_feature =
        col.kind == ColumnKind::kContinuous || col.kind == ColumnKind::kCategorical;
    if (is_feature && col.group.empty())
      throw std::invalid_argument("schema: feature column '" + col.name + "' lacks a group");
    schema.columns.push_back(std::move(col));
  }
  return schema;
}

DatasetSchema schema_from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("schema_from_json_file: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return schema_from_json(buf.str());
}

void validate_partition(const std::vector<std::size_t>& feature_group,
                        std::size_t group_count) {
  require(group_count > 0, "partition: no groups");
  require(!feature_group.empty(), "partition: no features");
  std::vector<std::size_t> sizes(group_count, 0);
  for (std::size_t g : feature_group) {
    require(g < group_count, "partition: group index out of range");
    ++sizes[g];
  }
  for (std::size_t g = 0; g < group_count; ++g)
    require(sizes[g] > 0, "partition: empty group " + std::to_string(g));
}

std::vector<std::vector<std::size_t>> DatasetBundle::groups_expanded() const {
  std::vector<std::vector<std::size_t>> out(group_count());
  for (std::size_t f = 0; f < feature_group.size(); ++f) out[feature_group[f]].push_back(f);
  return out;
}

namespace {

std::uint64_t bundle_hash(const DatasetBundle& b) {
  std::uint64_t h = fnv1a_bytes(b.X.data.data(), b.X.data.size() * sizeof(double));
  if (!b.labels.empty()) h = fnv1a_bytes(b.labels.data(), b.labels.size() * sizeof(int), h);
  if (!b.protected_attr.empty())
    h = fnv1a_bytes(b.protected_attr.data(), b.protected_attr.size() * sizeof(int), h);
  if (!b.feature_group.empty())
    h = fnv1a_bytes(b.feature_group.data(), b.feature_group.size() * sizeof(std::size_t), h);
  return h;
}

}  // namespace

DatasetBundle build_bundle(const CsvTable& rows_with_header, const DatasetSchema& schema,
                           std::string provenance) {
  require(!rows_with_header.empty(), "build_bundle: table has no header row");
  const CsvRow& header = rows_with_header.front();
  std::map<std::string, std::size_t> col_index;
  for (std::size_t i = 0; i < header.size(); ++i) col_index[trim(header[i])] = i;

  std::vector<std::size_t> schema_to_raw(schema.columns.size());
  for (std::size_t c = 0; c < schema.columns.size(); ++c) {
    const auto it = col_index.find(schema.columns[c].name);
    require(it != col_index.end(),
            "build_bundle: schema column '" + schema.columns[c].name + "' missing from header");
    schema_to_raw[c] = it->second;
  }

  DatasetBundle bundle;
  bundle.name = schema.name;
  bundle.provenance = std::move(provenance);

  // Pass 1: keep complete rows, remember their raw fields per schema column.
  std::vector<std::vector<std::string>> kept;
  std::size_t dropped_missing = 0;
  for (std::size_t r = 1; r < rows_with_header.size(); ++r) {
    const CsvRow& row = rows_with_header[r];
    if (row.size() == 1 && row[0].empty()) continue;  // blank line
    if (row.size() < header.size()) {
      ++dropped_missing;
      continue;
    }
    std::vector<std::string> fields(schema.columns.size());
    bool missing = false;
    for (std::size_t c = 0; c < schema.columns.size(); ++c) {
      fields[c] = trim(row[schema_to_raw[c]]);
      if (is_missing(fields[c])) missing = true;
    }
    if (missing) {
      ++dropped_missing;
      continue;
    }
    kept.push_back(std::move(fields));
  }
  if (dropped_missing > 0)
    bundle.warnings.push_back("dropped " + std::to_string(dropped_missing) +
                              " rows with missing values");
  require(!kept.empty(), "build_bundle: no usable rows after dropping missing values");
  const std::size_t n = kept.size();

  // Group names in first-appearance order.
  std::map<std::string, std::size_t> group_id;
  for (const auto& col : schema.columns) {
    if (col.kind != ColumnKind::kContinuous && col.kind != ColumnKind::kCategorical) continue;
    if (group_id.find(col.group) == group_id.end()) {
      group_id[col.group] = bundle.group_names.size();
      bundle.group_names.push_back(col.group);
    }
  }

  // Pass 2: fit encoders.
  PreprocessTransform& t = bundle.transform;
  for (std::size_t c = 0; c < schema.columns.size(); ++c) {
    const ColumnSpec& col = schema.columns[c];
    if (col.kind == ColumnKind::kLabel) {
      bundle.labels.resize(n);
      for (std::size_t r = 0; r < n; ++r) bundle.labels[r] = binarize(col, kept[r][c]);
      continue;
    }
    if (col.kind == ColumnKind::kProtected) {
      bundle.protected_attr.resize(n);
      for (std::size_t r = 0; r < n; ++r) bundle.protected_attr[r] = binarize(col, kept[r][c]);
      continue;
    }
    FeatureEncoder enc;
    enc.kind = col.kind;
    enc.source_name = col.name;
    enc.source_column = c;
    enc.group = group_id.at(col.group);
    if (col.kind == ColumnKind::kContinuous) {
      Vec vals(n);
      for (std::size_t r = 0; r < n; ++r) {
        if (!parse_double(kept[r][c], &vals[r]))
          throw std::invalid_argument("build_bundle: non-numeric value '" + kept[r][c] +
                                      "' in continuous column '" + col.name + "'");
      }
      enc.mean = mean(vals);
      double ss = 0.0;
      for (double v : vals) ss += (v - enc.mean) * (v - enc.mean);
      enc.sd = std::sqrt(ss / static_cast<double>(n));
      if (enc.sd == 0.0) {
        bundle.warnings.push_back("dropped zero-variance column '" + col.name + "'");
        continue;
      }
      t.feature_names.push_back(col.name);
      t.feature_group.push_back(enc.group);
    } else {
      std::set<std::string> levels;
      for (std::size_t r = 0; r < n; ++r) levels.insert(kept[r][c]);
      if (levels.size() < 2) {
        bundle.warnings.push_back("dropped single-level column '" + col.name + "'");
        continue;
      }
      enc.levels.assign(levels.begin(), levels.end());
      for (const auto& lv : enc.levels) {
        t.feature_names.push_back(col.name + "=" + lv);
        t.feature_group.push_back(enc.group);
      }
    }
    t.encoders.push_back(std::move(enc));
  }
  require(!t.feature_names.empty(), "build_bundle: schema yields no feature columns");

  // Drop groups that lost all columns, keeping ids dense.
  {
    std::vector<bool> used(bundle.group_names.size(), false);
    for (std::size_t g : t.feature_group) used[g] = true;
    std::vector<std::size_t> remap(bundle.group_names.size(), 0);
    std::vector<std::string> names;
    for (std::size_t g = 0; g < used.size(); ++g) {
      if (used[g]) {
        remap[g] = names.size();
        names.push_back(bundle.group_names[g]);
      } else {
        bundle.warnings.push_back("dropped empty feature group '" + bundle.group_names[g] + "'");
      }
    }
    for (auto& g : t.feature_group) g = remap[g];
    for (auto& e : t.encoders) e.group = remap[e.group];
    bundle.group_names = std::move(names);
  }

  // Pass 3: encode.
  CsvTable raw_rows(n);
  for (std::size_t r = 0; r < n; ++r) raw_rows[r] = kept[r];
  bundle.X = apply_transform(t, raw_rows, &bundle.warnings);
  bundle.feature_names = t.feature_names;
  bundle.feature_group = t.feature_group;
  validate_partition(bundle.feature_group, bundle.group_names.size());

  // Perturbation scales: empirical spread for continuous features, one full
  // indicator step for one-hot blocks.
  bundle.sigma_per_feature.assign(bundle.X.cols, 1.0);
  std::size_t f = 0;
  for (const auto& enc : t.encoders) {
    if (enc.kind == ColumnKind::kContinuous) {
      double m = 0.0, ss = 0.0;
      for (std::size_t r = 0; r < n; ++r) m += bundle.X(r, f);
      m /= static_cast<double>(n);
      for (std::size_t r = 0; r < n; ++r) ss += (bundle.X(r, f) - m) * (bundle.X(r, f) - m);
      bundle.sigma_per_feature[f] = std::sqrt(ss / static_cast<double>(n));
      ++f;
    } else {
      for (std::size_t k = 0; k < enc.levels.size(); ++k, ++f)
        bundle.sigma_per_feature[f] = 1.0;
    }
  }
  bundle.content_hash = bundle_hash(bundle);
  return bundle;
}

DatasetBundle load_csv_dataset(const std::string& path, const DatasetSchema& schema) {
  CsvTable table = read_csv_file(path, schema.delimiter);
  return build_bundle(table, schema, "csv:" + path);
}

Matrix apply_transform(const PreprocessTransform& t, const CsvTable& raw_rows,
                       std::vector<std::string>* warnings) {
  const std::size_t n = raw_rows.size();
  Matrix x(n, t.feature_names.size());
  std::size_t unknown_levels = 0;
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t f = 0;
    for (const auto& enc : t.encoders) {
      require(enc.source_column < raw_rows[r].size(),
              "apply_transform: row narrower than fitted layout");
      const std::string& field = raw_rows[r][enc.source_column];
      if (enc.kind == ColumnKind::kContinuous) {
        double v = 0.0;
        if (!parse_double(field, &v))
          throw std::invalid_argument("apply_transform: non-numeric value '" + field +
                                      "' in column '" + enc.source_name + "'");
        x(r, f++) = (v - enc.mean) / enc.sd;
      } else {
        const auto it = std::lower_bound(enc.levels.begin(), enc.levels.end(), field);
        const bool known = it != enc.levels.end() && *it == field;
        if (!known) ++unknown_levels;
        for (std::size_t k = 0; k < enc.levels.size(); ++k, ++f)
          x(r, f) = (known && enc.levels[k] == field) ? 1.0 : 0.0;
      }
    }
  }
  if (unknown_levels > 0 && warnings)
    warnings->push_back("mapped " + std::to_string(unknown_levels) +
                        " unknown categorical values to all-zero blocks");
  return x;
}

DatasetBundle synth_tabular(const SynthTabularSpec& spec, std::uint64_t seed) {
  require(spec.n_rows >= 10, "synth_tabular: need at least 10 rows");
  require(!spec.features_per_group.empty(), "synth_tabular: no groups");
  for (std::size_t k : spec.features_per_group)
    require(k >= 1, "synth_tabular: empty group requested");
  const std::size_t g_count = spec.features_per_group.size();
  SeededRng rng(seed);

  const std::size_t n = spec.n_rows;
  Matrix factors(n, g_count);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t g = 0; g < g_count; ++g) factors(r, g) = rng.normal();

  // Column plan: within each group, continuous features at staggered raw
  // scales. Heterogeneous mode converts the final feature of the last group
  // into a 3-level categorical read off the (noisy) factor terciles.
  DatasetSchema schema;
  schema.name = "synth_tabular";
  std::size_t total_features = 0;
  for (std::size_t k : spec.features_per_group) total_features += k;
  const bool with_categorical = spec.heterogeneous && total_features >= 2;

  CsvTable table;
  CsvRow header;
  std::vector<double> scales;
  {
    std::size_t idx = 0;
    for (std::size_t g = 0; g < g_count; ++g) {
      for (std::size_t i = 0; i < spec.features_per_group[g]; ++i, ++idx) {
        ColumnSpec col;
        col.name = "g" + std::to_string(g) + "_f" + std::to_string(i);
        col.group = "group" + std::to_string(g);
        const bool categorical =
            with_categorical && g == g_count - 1 && i == spec.features_per_group[g] - 1;
        col.kind = categorical ? ColumnKind::kCategorical : ColumnKind::kContinuous;
        header.push_back(col.name);
        schema.columns.push_back(col);
        // Raw scales sweep 0.5 .. 5.0 (variance span 100x) in heterogeneous
        // mode; uniform unit scale otherwise.
        const double frac = total_features > 1
                                ? static_cast<double>(idx) / static_cast<double>(total_features - 1)
                                : 0.0;
        scales.push_back(spec.heterogeneous ? 0.5 * std::pow(10.0, frac) : 1.0);
      }
    }
  }
  {
    ColumnSpec label;
    label.name = "label";
    label.kind = ColumnKind::kLabel;
    label.positive_value = "1";
    schema.columns.push_back(label);
    header.push_back("label");
    ColumnSpec prot;
    prot.name = "prot";
    prot.kind = ColumnKind::kProtected;
    prot.positive_value = "1";
    schema.columns.push_back(prot);
    header.push_back("prot");
  }
  table.push_back(header);

  // N(0,1) tercile boundaries for the categorical discretization.
  const double tercile = 0.4307272992954576;
  const std::size_t label_factors = std::min<std::size_t>(2, g_count);

  for (std::size_t r = 0; r < n; ++r) {
    CsvRow row;
    std::size_t idx = 0;
    for (std::size_t g = 0; g < g_count; ++g) {
      for (std::size_t i = 0; i < spec.features_per_group[g]; ++i, ++idx) {
        // Within-group features are positively coherent readings of their
        // factor at staggered loadings, like real grouped columns (age,
        // education-num and hours rise together). Alternating signs would
        // make a joint same-direction group perturbation self-cancel along
        // the factor axis and invert the semantic-vs-random grouping
        // comparison.
        const double loading = 0.7 + 0.3 * static_cast<double>(i % 3);
        const double v = loading * factors(r, g) + spec.noise_sd * rng.normal();
        if (schema.columns[idx].kind == ColumnKind::kCategorical) {
          const double v_std = v / std::hypot(loading, spec.noise_sd);
          row.push_back(v_std < -tercile ? "low" : (v_std > tercile ? "high" : "mid"));
        } else {
          row.push_back(format_double(scales[idx] * v));
        }
      }
    }
    double logit = 0.0;
    for (std::size_t g = 0; g < label_factors; ++g) logit += factors(r, g);
    logit *= 4.0 / std::sqrt(static_cast<double>(label_factors));
    const double p = 1.0 / (1.0 + std::exp(-logit));
    row.push_back(rng.uniform() < p ? "1" : "0");
    row.push_back(factors(r, g_count - 1) > 0.0 ? "1" : "0");
    table.push_back(std::move(row));
  }

  DatasetBundle bundle = build_bundle(
      table, schema,
      "synth_tabular(n=" + std::to_string(n) + ",G=" + std::to_string(g_count) +
          ",heterogeneous=" + (spec.heterogeneous ? "1" : "0") + ",noise=" +
          format_double(spec.noise_sd) + ",seed=" + std::to_string(seed) + ")");
  bundle.factors = std::move(factors);
  for (std::size_t g = 0; g < g_count; ++g)
    bundle.factor_names.push_back("factor" + std::to_string(g));
  bundle.content_hash = fnv1a_bytes(bundle.factors.data.data(),
                                    bundle.factors.data.size() * sizeof(double),
                                    bundle.content_hash);
  return bundle;
}

namespace {

struct SpriteFactors {
  std::size_t shape, scale, px, py;
};

void render_sprite(const MiniSpritesSpec& spec, const SpriteFactors& f, Vec& out) {
  const double side = static_cast<double>(spec.side);
  // Shapes are deliberately large relative to the canvas and may clip at the
  // border: on a miniature canvas the reconstruction signal has to carry
  // enough mass for KL-regularized variants to keep any latent structure.
  const double r_max = side / 3.0;
  const double r_min = side / 6.0;
  const double radius =
      spec.scale_levels > 1
          ? r_min + static_cast<double>(f.scale) * (r_max - r_min) /
                        static_cast<double>(spec.scale_levels - 1)
          : r_max;
  const double margin = side / 8.0;
  const double span = side - 1.0 - 2.0 * margin;
  const double cx =
      margin + (spec.pos_levels > 1
                    ? static_cast<double>(f.px) * span / static_cast<double>(spec.pos_levels - 1)
                    : span / 2.0);
  const double cy =
      margin + (spec.pos_levels > 1
                    ? static_cast<double>(f.py) * span / static_cast<double>(spec.pos_levels - 1)
                    : span / 2.0);

  auto in_triangle = [](double x, double y, double ax, double ay, double bx, double by,
                        double cx2, double cy2) {
    auto cross = [](double ox, double oy, double px, double py, double qx, double qy) {
      return (px - ox) * (qy - oy) - (py - oy) * (qx - ox);
    };
    const double d1 = cross(ax, ay, bx, by, x, y);
    const double d2 = cross(bx, by, cx2, cy2, x, y);
    const double d3 = cross(cx2, cy2, ax, ay, x, y);
    const bool has_neg = (d1 < 0) || (d2 < 0) || (d3 < 0);
    const bool has_pos = (d1 > 0) || (d2 > 0) || (d3 > 0);
    return !(has_neg && has_pos);
  };

  for (std::size_t py = 0; py < spec.side; ++py) {
    for (std::size_t px = 0; px < spec.side; ++px) {
      const double x = static_cast<double>(px);
      const double y = static_cast<double>(py);
      bool on = false;
      switch (f.shape) {
        case 0: {  // square
          on = std::fabs(x - cx) <= 0.8 * radius && std::fabs(y - cy) <= 0.8 * radius;
          break;
        }
        case 1: {  // ellipse
          const double dx = (x - cx) / radius;
          const double dy = (y - cy) / (0.6 * radius);
          on = dx * dx + dy * dy <= 1.0;
          break;
        }
        default: {  // heart proxy: two lobes over a downward point
          const double lx = x - (cx - 0.45 * radius);
          const double rx = x - (cx + 0.45 * radius);
          const double ly = y - (cy - 0.35 * radius);
          const double lobe_r = 0.55 * radius;
          const bool lobes =
              lx * lx + ly * ly <= lobe_r * lobe_r || rx * rx + ly * ly <= lobe_r * lobe_r;
          const bool point = in_triangle(x, y, cx - 0.9 * radius, cy - 0.1 * radius,
                                         cx + 0.9 * radius, cy - 0.1 * radius, cx, cy + radius);
          on = lobes || point;
          break;
        }
      }
      out[py * spec.side + px] = on ? 1.0 : 0.0;
    }
  }
}

}  // namespace

DatasetBundle gen_minisprites(const MiniSpritesSpec& spec, std::uint64_t seed) {
  require(spec.side >= 8, "gen_minisprites: image side must be at least 8");
  require(spec.scale_levels >= 1 && spec.pos_levels >= 1,
          "gen_minisprites: factor levels must be positive");
  constexpr std::size_t kShapes = 3;
  const std::size_t exhaustive =
      kShapes * spec.scale_levels * spec.pos_levels * spec.pos_levels;
  const std::size_t n = spec.sample_count == 0 ? exhaustive : spec.sample_count;

  std::vector<SpriteFactors> combos;
  combos.reserve(n);
  if (spec.sample_count == 0) {
    for (std::size_t s = 0; s < kShapes; ++s)
      for (std::size_t sc = 0; sc < spec.scale_levels; ++sc)
        for (std::size_t px = 0; px < spec.pos_levels; ++px)
          for (std::size_t py = 0; py < spec.pos_levels; ++py)
            combos.push_back({s, sc, px, py});
  } else {
    SeededRng rng(seed);
    for (std::size_t i = 0; i < n; ++i)
      combos.push_back({rng.uniform_index(kShapes), rng.uniform_index(spec.scale_levels),
                        rng.uniform_index(spec.pos_levels), rng.uniform_index(spec.pos_levels)});
  }

  const std::size_t pixels = spec.side * spec.side;
  Matrix all(n, pixels);
  Matrix factors(n, 4);
  Vec buf(pixels);
  for (std::size_t r = 0; r < n; ++r) {
    render_sprite(spec, combos[r], buf);
    std::copy(buf.begin(), buf.end(), all.row(r).begin());
    factors(r, 0) = static_cast<double>(combos[r].shape);
    factors(r, 1) = static_cast<double>(combos[r].scale);
    factors(r, 2) = static_cast<double>(combos[r].px);
    factors(r, 3) = static_cast<double>(combos[r].py);
  }

  DatasetBundle bundle;
  bundle.name = "minisprites";
  bundle.provenance = "gen_minisprites(side=" + std::to_string(spec.side) + ",scales=" +
                      std::to_string(spec.scale_levels) + ",pos=" +
                      std::to_string(spec.pos_levels) + ",n=" + std::to_string(n) +
                      ",seed=" + std::to_string(seed) + ")";

  // Keep only pixels that ever change; constant pixels carry no signal and
  // would break the positive-sigma invariant.
  std::vector<std::size_t> kept_pixels;
  for (std::size_t p = 0; p < pixels; ++p) {
    double m = 0.0;
    for (std::size_t r = 0; r < n; ++r) m += all(r, p);
    m /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t r = 0; r < n; ++r) ss += (all(r, p) - m) * (all(r, p) - m);
    if (ss > 0.0) kept_pixels.push_back(p);
  }
  require(!kept_pixels.empty(), "gen_minisprites: every pixel is constant");
  if (kept_pixels.size() < pixels)
    bundle.warnings.push_back("dropped " + std::to_string(pixels - kept_pixels.size()) +
                              " constant pixels");

  bundle.X = Matrix(n, kept_pixels.size());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < kept_pixels.size(); ++k) bundle.X(r, k) = all(r, kept_pixels[k]);
  for (std::size_t k : kept_pixels) {
    const std::size_t py = k / spec.side, px = k % spec.side;
    bundle.feature_names.push_back("px_" + std::to_string(px) + "_" + std::to_string(py));
  }

  bundle.factors = std::move(factors);
  bundle.factor_names = {"shape", "scale", "posX", "posY"};
  std::vector<std::size_t> grouping = factor_pixel_grouping(bundle.X, bundle.factors);

  // Constant pixels were dropped above, so the background group (id 4) is
  // unreachable here; factors that attract no pixel are removed to keep the
  // partition invariant.
  std::vector<std::size_t> counts(bundle.factor_names.size(), 0);
  for (std::size_t g : grouping) {
    require(g < bundle.factor_names.size(), "gen_minisprites: unexpected background pixel");
    ++counts[g];
  }
  std::vector<std::size_t> remap(counts.size(), 0);
  for (std::size_t g = 0; g < counts.size(); ++g) {
    if (counts[g] > 0) {
      remap[g] = bundle.group_names.size();
      bundle.group_names.push_back(bundle.factor_names[g]);
    } else {
      bundle.warnings.push_back("factor '" + bundle.factor_names[g] +
                                "' attracted no pixels; group dropped");
    }
  }
  bundle.feature_group.resize(grouping.size());
  for (std::size_t f = 0; f < grouping.size(); ++f) bundle.feature_group[f] = remap[grouping[f]];
  validate_partition(bundle.feature_group, bundle.group_names.size());

  bundle.sigma_per_feature.assign(bundle.X.cols, 0.0);
  for (std::size_t f = 0; f < bundle.X.cols; ++f) {
    double m = 0.0;
    for (std::size_t r = 0; r < n; ++r) m += bundle.X(r, f);
    m /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t r = 0; r < n; ++r) ss += (bundle.X(r, f) - m) * (bundle.X(r, f) - m);
    bundle.sigma_per_feature[f] = std::sqrt(ss / static_cast<double>(n));
  }

  bundle.labels.resize(n);
  bundle.protected_attr.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    bundle.labels[r] = bundle.factors(r, 0) == 0.0 ? 1 : 0;  // square vs rest
    bundle.protected_attr[r] =
        bundle.factors(r, 2) >= static_cast<double>(spec.pos_levels) / 2.0 ? 1 : 0;
  }
  bundle.content_hash = bundle_hash(bundle);
  bundle.content_hash = fnv1a_bytes(bundle.factors.data.data(),
                                    bundle.factors.data.size() * sizeof(double),
                                    bundle.content_hash);
  return bundle;
}

std::vector<std::size_t> factor_pixel_grouping(const Matrix& pixels, const Matrix& factors) {
  require(pixels.rows == factors.rows, "factor_pixel_grouping: row count mismatch");
  require(pixels.rows > 0 && factors.cols > 0, "factor_pixel_grouping: empty input");
  const std::size_t n = pixels.rows;
  const std::size_t k_factors = factors.cols;

  // Level index per factor (factors hold small discrete level sets).
  std::vector<std::vector<std::size_t>> level_of(k_factors, std::vector<std::size_t>(n));
  std::vector<std::size_t> level_count(k_factors);
  for (std::size_t k = 0; k < k_factors; ++k) {
    std::vector<double> levels;
    for (std::size_t r = 0; r < n; ++r) levels.push_back(factors(r, k));
    std::sort(levels.begin(), levels.end());
    levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
    level_count[k] = levels.size();
    for (std::size_t r = 0; r < n; ++r) {
      const auto it = std::lower_bound(levels.begin(), levels.end(), factors(r, k));
      level_of[k][r] = static_cast<std::size_t>(it - levels.begin());
    }
  }

  std::vector<std::size_t> grouping(pixels.cols);
  for (std::size_t p = 0; p < pixels.cols; ++p) {
    double m = 0.0;
    for (std::size_t r = 0; r < n; ++r) m += pixels(r, p);
    m /= static_cast<double>(n);
    double total_var = 0.0;
    for (std::size_t r = 0; r < n; ++r) total_var += (pixels(r, p) - m) * (pixels(r, p) - m);
    if (total_var == 0.0) {
      grouping[p] = k_factors;  // background
      continue;
    }
    std::size_t best = 0;
    double best_sens = -1.0;
    for (std::size_t k = 0; k < k_factors; ++k) {
      // Weighted variance of the per-level conditional means.
      std::vector<double> sum(level_count[k], 0.0);
      std::vector<std::size_t> cnt(level_count[k], 0);
      for (std::size_t r = 0; r < n; ++r) {
        sum[level_of[k][r]] += pixels(r, p);
        ++cnt[level_of[k][r]];
      }
      double sens = 0.0;
      for (std::size_t l = 0; l < level_count[k]; ++l) {
        if (cnt[l] == 0) continue;
        const double lm = sum[l] / static_cast<double>(cnt[l]);
        sens += static_cast<double>(cnt[l]) / static_cast<double>(n) * (lm - m) * (lm - m);
      }
      if (sens > best_sens) {  // strict: ties keep the lowest factor index
        best_sens = sens;
        best = k;
      }
    }
    grouping[p] = best;
  }
  return grouping;
}

std::vector<std::size_t> random_partition(const std::vector<std::size_t>& feature_group,
                                          SeededRng& rng) {
  std::vector<std::size_t> out = feature_group;
  rng.shuffle(out);
  return out;
}

SplitIndices heldout_split(std::size_t n, double fraction, std::uint64_t seed) {
  require(n >= 2, "heldout_split: need at least 2 rows");
  require(fraction >= 0.0 && fraction < 1.0, "heldout_split: fraction outside [0, 1)");
  SeededRng rng(seed ^ 0xA5C39EDB0F1E2D3CULL);  // salted: do not alias the training stream
  auto perm = rng.permutation(n);
  std::size_t h = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  if (fraction > 0.0 && h == 0) h = 1;
  if (h >= n) h = n - 1;
  SplitIndices split;
  split.heldout.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(h));
  split.train.assign(perm.begin() + static_cast<std::ptrdiff_t>(h), perm.end());
  std::sort(split.heldout.begin(), split.heldout.end());
  std::sort(split.train.begin(), split.train.end());
  return split;
}

}  // namespace vaecirc
