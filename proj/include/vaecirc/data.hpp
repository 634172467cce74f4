#pragma once

// Dataset ingestion: schema-driven CSV loading with z-scoring and one-hot
// expansion, the synthetic tabular generator with planted feature groups, the
// miniature sprites image generator, and partition utilities shared by the
// intervention and metric layers.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vaecirc/csv.hpp"
#include "vaecirc/rng.hpp"
#include "vaecirc/tensor.hpp"

namespace vaecirc {

enum class ColumnKind { kContinuous, kCategorical, kLabel, kProtected };

struct ColumnSpec {
  std::string name;
  ColumnKind kind = ColumnKind::kContinuous;
  std::string group;  // required for feature columns, ignored for label/protected
  // Binarization for label/protected columns: either a positive level (string
  // match) or a numeric threshold (value >= threshold maps to 1).
  std::string positive_value;
  std::optional<double> threshold;
};

struct DatasetSchema {
  std::string name;
  char delimiter = ',';
  std::vector<ColumnSpec> columns;
};

DatasetSchema schema_from_json(const std::string& text);
DatasetSchema schema_from_json_file(const std::string& path);

// Per-source-column encoder fitted on the training rows.
struct FeatureEncoder {
  ColumnKind kind = ColumnKind::kContinuous;
  std::string source_name;
  std::size_t source_column = 0;  // column index in the raw row layout
  std::size_t group = 0;
  double mean = 0.0;  // continuous
  double sd = 1.0;
  std::vector<std::string> levels;  // categorical, sorted
};

struct PreprocessTransform {
  std::vector<FeatureEncoder> encoders;    // feature columns only, schema order
  std::vector<std::string> feature_names;  // post-expansion
  std::vector<std::size_t> feature_group;  // post-expansion group id per feature
};

struct DatasetBundle {
  std::string name;
  Matrix X;                                 // N x n, preprocessed
  std::vector<int> labels;                  // 0/1; empty when schema has no label
  std::vector<int> protected_attr;          // 0/1; empty when none declared
  Vec sigma_per_feature;                    // perturbation scale per feature
  std::vector<std::size_t> feature_group;   // feature index -> group id
  std::vector<std::string> group_names;
  std::vector<std::string> feature_names;
  Matrix factors;                           // ground-truth factors (generators only)
  std::vector<std::string> factor_names;
  PreprocessTransform transform;            // empty encoders for pixel data
  std::string provenance;
  std::vector<std::string> warnings;
  std::uint64_t content_hash = 0;

  std::size_t n_rows() const { return X.rows; }
  std::size_t n_features() const { return X.cols; }
  std::size_t group_count() const { return group_names.size(); }
  std::vector<std::vector<std::size_t>> groups_expanded() const;
};

// Throws std::invalid_argument unless the assignment is a covering partition
// into non-empty groups.
void validate_partition(const std::vector<std::size_t>& feature_group,
                        std::size_t group_count);

// Builds a bundle from parsed rows (header row first) and a schema. Rows with
// missing values ("", "?", "NA") are dropped and counted in warnings.
DatasetBundle build_bundle(const CsvTable& rows_with_header, const DatasetSchema& schema,
                           std::string provenance);

DatasetBundle load_csv_dataset(const std::string& path, const DatasetSchema& schema);

// Applies a fitted transform to raw feature rows (no header). Unknown
// categorical levels become an all-zero block and append a warning.
Matrix apply_transform(const PreprocessTransform& t, const CsvTable& raw_rows,
                       std::vector<std::string>* warnings = nullptr);

struct SynthTabularSpec {
  std::size_t n_rows = 2000;
  std::vector<std::size_t> features_per_group = {3, 3, 3};
  bool heterogeneous = true;  // mixed scales plus one categorical column
  double noise_sd = 0.05;
};

DatasetBundle synth_tabular(const SynthTabularSpec& spec, std::uint64_t seed);

struct MiniSpritesSpec {
  std::size_t side = 16;           // square image side in pixels
  std::size_t scale_levels = 4;
  std::size_t pos_levels = 6;      // levels for each of posX and posY
  std::size_t sample_count = 0;    // 0 = exhaustive enumeration of all factors
};

// Shapes are square, ellipse and a heart proxy (triangle-over-square lobe
// approximation); pixels are binary. Zero-variance pixels are dropped with a
// warning so every retained feature has positive sigma.
DatasetBundle gen_minisprites(const MiniSpritesSpec& spec, std::uint64_t seed);

// Factor-sensitivity grouping for pixel bundles: each pixel is assigned to
// the factor with the largest variance of conditional means across that
// factor's levels. Ties break toward the lowest factor index; pixels with
// zero total variance go to a trailing background group (index = factor
// count). Returns one group id per pixel column.
std::vector<std::size_t> factor_pixel_grouping(const Matrix& pixels, const Matrix& factors);

// Uniformly re-shuffles the feature -> group assignment while preserving the
// multiset of group sizes.
std::vector<std::size_t> random_partition(const std::vector<std::size_t>& feature_group,
                                          SeededRng& rng);

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> heldout;
};

// Deterministic shuffle split; heldout gets round(fraction * n) rows, at
// least 1 when fraction > 0 and n > 1.
SplitIndices heldout_split(std::size_t n, double fraction, std::uint64_t seed);

std::uint64_t fnv1a_bytes(const void* data, std::size_t len, std::uint64_t h = 1469598103934665603ULL);

}  // namespace vaecirc
