#include "vaecirc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "vaecirc/rng.hpp"

namespace vaecirc {
namespace {

constexpr std::uint64_t kAblationSalt = 0x6A09E667F3BCC908ULL;

double snap_unit(double v) {
  if (std::abs(v) < 1e-12) return 0.0;
  if (std::abs(v - 1.0) < 1e-12) return 1.0;
  return std::clamp(v, 0.0, 1.0);
}

// Entropy in nats of a non-negative weight vector after normalization.
double entropy_of_weights(const double* w, std::size_t n, double mass) {
  double h = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (w[i] <= 0.0) continue;
    const double p = w[i] / mass;
    h -= p * std::log(p);
  }
  return h;
}

double column_mass(const Matrix& R, std::size_t d) {
  double s = 0.0;
  for (std::size_t g = 0; g < R.rows; ++g) s += R(g, d);
  return s;
}

// Equal-frequency discretization; ties are broken by row order, which keeps
// runs of equal values contiguous so category structure survives binning.
std::vector<int> equal_frequency_bins(const Vec& values, std::size_t bins) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<int> out(n, 0);
  for (std::size_t rank = 0; rank < n; ++rank)
    out[order[rank]] = static_cast<int>((rank * bins) / n);
  return out;
}

// Categorical encoding by sorted distinct value; returns the category count.
std::size_t categorize(const Vec& values, std::vector<int>* codes) {
  Vec levels = values;
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  codes->resize(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto it = std::lower_bound(levels.begin(), levels.end(), values[i]);
    (*codes)[i] = static_cast<int>(it - levels.begin());
  }
  return levels.size();
}

// Plug-in mutual information in nats between two discrete codings.
double plugin_mi(const std::vector<int>& a, std::size_t ka, const std::vector<int>& b,
                 std::size_t kb) {
  const std::size_t n = a.size();
  Matrix joint(ka, kb);
  Vec pa(ka, 0.0), pb(kb, 0.0);
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    joint(a[i], b[i]) += inv;
    pa[a[i]] += inv;
    pb[b[i]] += inv;
  }
  double mi = 0.0;
  for (std::size_t i = 0; i < ka; ++i)
    for (std::size_t j = 0; j < kb; ++j) {
      const double p = joint(i, j);
      if (p > 0.0) mi += p * std::log(p / (pa[i] * pb[j]));
    }
  return std::max(0.0, mi);
}

}  // namespace

double modularity(const Matrix& R, std::vector<std::string>* warnings) {
  require(R.rows > 0 && R.cols > 0, "modularity: empty importance matrix");
  for (double v : R.data)
    require(v >= 0.0, "modularity: importance entries must be non-negative");
  const std::size_t n_groups = R.rows;
  if (n_groups < 2) {
    if (warnings)
      warnings->push_back("modularity: single feature group, score set to 0");
    return 0.0;
  }
  const double log_g = std::log(static_cast<double>(n_groups));
  bool any_mass = false;
  double h_sum = 0.0;
  for (std::size_t d = 0; d < R.cols; ++d) {
    Vec col(n_groups);
    for (std::size_t g = 0; g < n_groups; ++g) col[g] = R(g, d);
    const double mass = column_mass(R, d);
    if (mass <= 0.0) {
      h_sum += log_g;  // dead dimension: maximally uninformative
      continue;
    }
    any_mass = true;
    h_sum += entropy_of_weights(col.data(), n_groups, mass);
  }
  if (!any_mass) {
    if (warnings)
      warnings->push_back("modularity: all-zero importance matrix, score set to 0");
    return 0.0;
  }
  return snap_unit(1.0 - h_sum / (static_cast<double>(R.cols) * log_g));
}

double fgd(const Matrix& R, std::vector<std::string>* warnings) {
  require(R.rows > 0 && R.cols > 0, "fgd: empty importance matrix");
  for (double v : R.data)
    require(v >= 0.0, "fgd: importance entries must be non-negative");
  const std::size_t n_groups = R.rows;
  if (n_groups < 2) {
    if (warnings) warnings->push_back("fgd: single feature group, score set to 0");
    return 0.0;
  }
  const double log_g = std::log(static_cast<double>(n_groups));
  double weighted = 0.0, total = 0.0;
  for (std::size_t d = 0; d < R.cols; ++d) {
    const double mass = column_mass(R, d);
    if (mass <= 0.0) continue;
    Vec col(n_groups);
    for (std::size_t g = 0; g < n_groups; ++g) col[g] = R(g, d);
    const double completeness =
        1.0 - entropy_of_weights(col.data(), n_groups, mass) / log_g;
    weighted += mass * completeness;
    total += mass;
  }
  if (total <= 0.0) {
    if (warnings)
      warnings->push_back("fgd: all-zero importance matrix, score set to 0");
    return 0.0;
  }
  return snap_unit(weighted / total);
}

SpecificityResult specificity_from_effects(const SweepEffects& fx) {
  const std::size_t d_lat = fx.per_feature.rows;
  const std::size_t n_out = fx.per_feature.cols;
  require(d_lat > 0 && n_out > 0, "specificity: empty effect matrix");
  SpecificityResult res;
  res.per_dim = Vec(d_lat, 0.0);
  if (n_out < 2) {
    res.overall = 0.0;
    return res;  // one output feature: concentration is not measurable
  }
  const double log_n = std::log(static_cast<double>(n_out));
  double weighted = 0.0, total = 0.0;
  for (std::size_t d = 0; d < d_lat; ++d) {
    double mass = 0.0;
    for (std::size_t f = 0; f < n_out; ++f) mass += fx.per_feature(d, f);
    if (mass <= 0.0) continue;  // dead dimension: specificity 0, weight 0
    const double h = entropy_of_weights(&fx.per_feature.data[d * n_out], n_out, mass);
    res.per_dim[d] = snap_unit(1.0 - h / log_n);
    weighted += fx.ces[d] * res.per_dim[d];
    total += fx.ces[d];
  }
  res.overall = total > 0.0 ? snap_unit(weighted / total) : 0.0;
  return res;
}

double mig(const Matrix& latent_means, const Matrix& factors, std::size_t bins,
           std::vector<std::string>* warnings) {
  require(bins >= 2, "mig: need at least two bins");
  require(latent_means.rows == factors.rows, "mig: row count mismatch");
  require(latent_means.rows >= 2, "mig: need at least two samples");
  const std::size_t d_lat = latent_means.cols;
  const std::size_t n_fac = factors.cols;
  require(d_lat > 0 && n_fac > 0, "mig: empty inputs");

  std::vector<std::vector<int>> lat_codes(d_lat);
  for (std::size_t d = 0; d < d_lat; ++d)
    lat_codes[d] = equal_frequency_bins(latent_means.col_vec(d), bins);

  double gap_sum = 0.0;
  std::size_t used = 0;
  for (std::size_t k = 0; k < n_fac; ++k) {
    const Vec fac = factors.col_vec(k);
    std::vector<int> fac_code;
    std::size_t levels = categorize(fac, &fac_code);
    if (levels < 2) {
      if (warnings)
        warnings->push_back("mig: factor " + std::to_string(k) +
                            " is constant and was skipped");
      continue;
    }
    if (levels > bins) {
      fac_code = equal_frequency_bins(fac, bins);
      levels = bins;
    }
    Vec pf(levels, 0.0);
    for (int c : fac_code) pf[c] += 1.0 / static_cast<double>(fac_code.size());
    double h_factor = 0.0;
    for (double p : pf)
      if (p > 0.0) h_factor -= p * std::log(p);
    if (h_factor <= 0.0) continue;

    double best = 0.0, second = 0.0;
    for (std::size_t d = 0; d < d_lat; ++d) {
      const double mi_val = plugin_mi(lat_codes[d], bins, fac_code, levels);
      if (mi_val > best) {
        second = best;
        best = mi_val;
      } else if (mi_val > second) {
        second = mi_val;
      }
    }
    gap_sum += (best - second) / h_factor;
    ++used;
  }
  if (used == 0) {
    if (warnings) warnings->push_back("mig: no usable factors, score set to 0");
    return 0.0;
  }
  return std::max(0.0, gap_sum / static_cast<double>(used));
}

Matrix factor_proxies(const DatasetBundle& bundle) {
  if (bundle.factors.rows == bundle.n_rows() && bundle.factors.cols > 0)
    return bundle.factors;
  const std::size_t n_groups = bundle.group_count();
  Matrix proxies(bundle.n_rows(), n_groups);
  std::vector<std::size_t> sizes(n_groups, 0);
  for (std::size_t g : bundle.feature_group) ++sizes[g];
  for (std::size_t r = 0; r < bundle.n_rows(); ++r)
    for (std::size_t f = 0; f < bundle.n_features(); ++f)
      proxies(r, bundle.feature_group[f]) +=
          bundle.X(r, f) / static_cast<double>(sizes[bundle.feature_group[f]]);
  return proxies;
}

double dci_completeness(const Matrix& R, const std::vector<std::size_t>& feature_group) {
  if (feature_group.size() != R.rows)
    throw std::logic_error(
        "dci_completeness: grouping must assign exactly one feature per group");
  std::vector<std::size_t> count(R.rows, 0);
  for (std::size_t g : feature_group) {
    if (g >= R.rows)
      throw std::logic_error("dci_completeness: group index out of range");
    ++count[g];
  }
  for (std::size_t c : count)
    if (c != 1)
      throw std::logic_error("dci_completeness: groups must be singletons");

  // Textbook completeness: per-code-dimension factor distribution entropy,
  // weighted by relative dimension importance. Entropy is evaluated through
  // ln(mass) - (1/mass) * sum r ln r, a different path from fgd().
  const double n_factors = static_cast<double>(R.rows);
  double grand = 0.0;
  for (double v : R.data) {
    require(v >= 0.0, "dci_completeness: importance entries must be non-negative");
    grand += v;
  }
  if (grand <= 0.0) return 0.0;
  double score = 0.0;
  for (std::size_t d = 0; d < R.cols; ++d) {
    double mass = 0.0, r_log_r = 0.0;
    for (std::size_t g = 0; g < R.rows; ++g) {
      const double v = R(g, d);
      mass += v;
      if (v > 0.0) r_log_r += v * std::log(v);
    }
    if (mass <= 0.0) continue;
    const double h = std::log(mass) - r_log_r / mass;
    const double completeness = 1.0 - h / std::log(n_factors);
    score += (mass / grand) * completeness;
  }
  return snap_unit(score);
}

AblationResult grouping_ablation(const TrainedModel& m, const DatasetBundle& bundle,
                                 const InterventionConfig& cfg,
                                 std::size_t n_permutations) {
  require(n_permutations > 0, "grouping_ablation: need at least one permutation");
  AblationResult res;
  const auto semantic = level1_scan(m, bundle, cfg);
  res.semantic_modularity = modularity(semantic.R);
  res.semantic_fgd = fgd(semantic.R);

  SeededRng rng(cfg.seed ^ kAblationSalt);
  res.random_modularity = Vec(n_permutations, 0.0);
  res.random_fgd = Vec(n_permutations, 0.0);
  for (std::size_t p = 0; p < n_permutations; ++p) {
    DatasetBundle permuted = bundle;
    permuted.feature_group = random_partition(bundle.feature_group, rng);
    const auto scan = level1_scan(m, permuted, cfg);
    res.random_modularity[p] = modularity(scan.R);
    res.random_fgd[p] = fgd(scan.R);
    res.random_modularity_mean += res.random_modularity[p] / n_permutations;
    res.random_fgd_mean += res.random_fgd[p] / n_permutations;
  }
  res.modularity_gap = res.semantic_modularity - res.random_modularity_mean;
  res.fgd_gap = res.semantic_fgd - res.random_fgd_mean;
  return res;
}

}  // namespace vaecirc
