#include "vaecirc/interventions.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "vaecirc/csv.hpp"
#include "vaecirc/rng.hpp"

namespace vaecirc {
namespace {

constexpr std::uint64_t kRowSubsampleSalt = 0xC13FA9A902A6328FULL;
constexpr std::uint64_t kPatchPairSalt = 0x91E10DA5C79E7B1DULL;

void check_compat(const TrainedModel& m, const DatasetBundle& bundle) {
  require(m.spec.input_dim == bundle.n_features(),
          "intervention: model input width does not match the bundle");
}

double norm_of_difference(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

// Ordinary least squares R^2 of y against x. A constant response is a perfect
// (slope zero) fit; numerically exact fits snap to 1.0 so linear encoders
// report exactly 1.
double linear_fit_r2(const std::vector<double>& x, const Vec& y) {
  const std::size_t n = x.size();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i] / n;
    my += y[i] / n;
  }
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (syy <= 1e-30) return 1.0;
  const double slope = sxy / sxx;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pred = my + slope * (x[i] - mx);
    ss_res += (y[i] - pred) * (y[i] - pred);
  }
  double r2 = 1.0 - ss_res / syy;
  if (1.0 - r2 < 1e-12) r2 = 1.0;
  return r2;
}

Vec linspace_grid(double half_range, std::size_t points) {
  require(points >= 2, "intervention: sweep needs at least two points");
  Vec t(points);
  const double step = 2.0 * half_range / static_cast<double>(points - 1);
  for (std::size_t k = 0; k < points; ++k)
    t[k] = -half_range + step * static_cast<double>(k);
  return t;
}

// Shared sweep driver; calibrated mode reads stats, fixed mode ignores it.
SweepEffects run_sweep(const TrainedModel& m, const DatasetBundle& bundle,
                       const PosteriorStats* stats, const InterventionConfig& cfg) {
  check_compat(m, bundle);
  const auto rows = resolve_eval_rows(bundle.n_rows(), cfg);
  const std::size_t d_lat = m.spec.latent_dim;
  const std::size_t n_feat = bundle.n_features();
  const Vec grid = linspace_grid(cfg.sweep_half_range, cfg.sweep_points);
  const double weight = 1.0 / (static_cast<double>(rows.size()) *
                               static_cast<double>(grid.size()));

  SweepEffects fx;
  fx.per_feature = Matrix(d_lat, n_feat);
  fx.ces = Vec(d_lat, 0.0);
  for (std::size_t r : rows) {
    const Vec mu = encode_mu(m, bundle.X.row(r));
    const Vec base = decode(m, mu);
    Vec z = mu;
    for (std::size_t d = 0; d < d_lat; ++d) {
      const double saved = z[d];
      for (double t : grid) {
        if (stats != nullptr) {
          const double center =
              cfg.ces_center_per_sample ? mu[d] : stats->mu_mean[d];
          z[d] = center + stats->sigma_eff[d] * t;
        } else {
          z[d] = t;
        }
        const Vec out = decode(m, z);
        for (std::size_t f = 0; f < n_feat; ++f)
          fx.per_feature(d, f) += std::abs(out[f] - base[f]) * weight;
      }
      z[d] = saved;
    }
  }
  for (std::size_t d = 0; d < d_lat; ++d) {
    double s = 0.0;
    for (std::size_t f = 0; f < n_feat; ++f) s += fx.per_feature(d, f);
    fx.ces[d] = s / static_cast<double>(n_feat);
  }
  return fx;
}

}  // namespace

std::vector<std::size_t> resolve_eval_rows(std::size_t n_rows,
                                           const InterventionConfig& cfg) {
  std::vector<std::size_t> rows;
  if (cfg.eval_rows.empty()) {
    rows.resize(n_rows);
    for (std::size_t i = 0; i < n_rows; ++i) rows[i] = i;
  } else {
    rows = cfg.eval_rows;
    for (std::size_t r : rows)
      require(r < n_rows, "intervention: explicit evaluation row out of range");
  }
  require(!rows.empty(), "intervention: evaluation row set is empty");
  if (cfg.eval_cap > 0 && rows.size() > cfg.eval_cap) {
    SeededRng rng(cfg.seed ^ kRowSubsampleSalt);
    rng.shuffle(rows);
    rows.resize(cfg.eval_cap);
    std::sort(rows.begin(), rows.end());
  }
  return rows;
}

Vec perturb_group(std::span<const double> x, std::size_t g, double s,
                  const Vec& sigma_per_feature,
                  const std::vector<std::size_t>& feature_group) {
  require(x.size() == sigma_per_feature.size() && x.size() == feature_group.size(),
          "perturb_group: feature metadata width mismatch");
  Vec out(x.begin(), x.end());
  bool seen = false;
  for (std::size_t f = 0; f < out.size(); ++f) {
    if (feature_group[f] == g) {
      out[f] += s * sigma_per_feature[f];
      seen = true;
    }
  }
  require(seen, "perturb_group: group has no features");
  return out;
}

ImportanceMatrix level1_scan(const TrainedModel& m, const DatasetBundle& bundle,
                             const InterventionConfig& cfg) {
  check_compat(m, bundle);
  require(cfg.scales.size() >= 2,
          "level1_scan: at least two scales are needed for the linearity fit");
  const auto rows = resolve_eval_rows(bundle.n_rows(), cfg);
  const std::size_t n_groups = bundle.group_count();
  const std::size_t d_lat = m.spec.latent_dim;
  const std::size_t n_scales = cfg.scales.size();

  ImportanceMatrix im;
  im.R = Matrix(n_groups, d_lat);
  im.scales = cfg.scales;
  im.delta = Matrix(n_groups, n_scales);
  im.linearity_r2 = Vec(n_groups, 0.0);

  const double inv_rows = 1.0 / static_cast<double>(rows.size());
  for (std::size_t r : rows) {
    const auto x = bundle.X.row(r);
    const Vec mu0 = encode_mu(m, x);
    for (std::size_t g = 0; g < n_groups; ++g) {
      for (std::size_t si = 0; si < n_scales; ++si) {
        const Vec xt = perturb_group(x, g, cfg.scales[si], bundle.sigma_per_feature,
                                     bundle.feature_group);
        const Vec mu1 = encode_mu(m, xt);
        im.delta(g, si) += norm_of_difference(mu1, mu0) * inv_rows;
        for (std::size_t d = 0; d < d_lat; ++d)
          im.R(g, d) += std::abs(mu1[d] - mu0[d]) * inv_rows /
                        static_cast<double>(n_scales);
      }
    }
  }
  for (std::size_t g = 0; g < n_groups; ++g) {
    Vec y(n_scales);
    for (std::size_t si = 0; si < n_scales; ++si) y[si] = im.delta(g, si);
    im.linearity_r2[g] = linear_fit_r2(cfg.scales, y);
  }
  return im;
}

PosteriorStats posterior_stats(const TrainedModel& m, const DatasetBundle& bundle,
                               const InterventionConfig& cfg) {
  check_compat(m, bundle);
  const auto rows = resolve_eval_rows(bundle.n_rows(), cfg);
  require(rows.size() >= 2, "posterior_stats: need at least two evaluation rows");
  const std::size_t d_lat = m.spec.latent_dim;

  PosteriorStats st;
  st.mu_mean = Vec(d_lat, 0.0);
  st.mu_std = Vec(d_lat, 0.0);
  st.mean_logvar = Vec(d_lat, 0.0);
  st.sigma_eff = Vec(d_lat, 0.0);

  const double inv = 1.0 / static_cast<double>(rows.size());
  Matrix mu_all(rows.size(), d_lat);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto enc = encode(m, bundle.X.row(rows[i]));
    for (std::size_t d = 0; d < d_lat; ++d) {
      mu_all(i, d) = enc.mu[d];
      st.mu_mean[d] += enc.mu[d] * inv;
      st.mean_logvar[d] += enc.logvar[d] * inv;
    }
  }
  for (std::size_t d = 0; d < d_lat; ++d) {
    double var = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const double c = mu_all(i, d) - st.mu_mean[d];
      var += c * c * inv;
    }
    st.mu_std[d] = std::sqrt(var);
    st.sigma_eff[d] = std::max(st.mu_std[d], std::sqrt(std::exp(st.mean_logvar[d])));
  }
  return st;
}

SweepEffects ces_sweep_calibrated(const TrainedModel& m, const DatasetBundle& bundle,
                                  const PosteriorStats& stats,
                                  const InterventionConfig& cfg) {
  require(stats.sigma_eff.size() == m.spec.latent_dim,
          "ces_sweep_calibrated: stats width mismatch");
  return run_sweep(m, bundle, &stats, cfg);
}

SweepEffects ces_sweep_fixed(const TrainedModel& m, const DatasetBundle& bundle,
                             const InterventionConfig& cfg) {
  return run_sweep(m, bundle, nullptr, cfg);
}

double ces_calibrated(const TrainedModel& m, const DatasetBundle& bundle,
                      const PosteriorStats& stats, std::size_t d,
                      const InterventionConfig& cfg) {
  require(d < m.spec.latent_dim, "ces_calibrated: dimension out of range");
  return ces_sweep_calibrated(m, bundle, stats, cfg).ces[d];
}

double ces_fixed(const TrainedModel& m, const DatasetBundle& bundle, std::size_t d,
                 const InterventionConfig& cfg) {
  require(d < m.spec.latent_dim, "ces_fixed: dimension out of range");
  return ces_sweep_fixed(m, bundle, cfg).ces[d];
}

double patch_compound(const TrainedModel& m, std::span<const double> x_source,
                      std::span<const double> x_target, std::size_t layer) {
  require(layer < m.encoder.size(), "patch_compound: layer index out of range");
  ForwardCache source_cache;
  encode_cached(m, x_source, &source_cache);
  ForwardCache target_cache;
  const auto target = encode_cached(m, x_target, &target_cache);
  const Vec patched = encode_mu_from_layer(m, layer, source_cache.post[layer]);
  return norm_of_difference(patched, target.mu);
}

Vec patch_direct(const Vec& compound) {
  Vec direct(compound.size(), 0.0);
  for (std::size_t l = 0; l < compound.size(); ++l) {
    const double next = (l + 1 < compound.size()) ? compound[l + 1] : 0.0;
    direct[l] = compound[l] - next;
  }
  return direct;
}

PatchingProfile patching_profile_pair(const TrainedModel& m,
                                      std::span<const double> x_source,
                                      std::span<const double> x_target) {
  PatchingProfile p;
  p.compound = Vec(m.encoder.size(), 0.0);
  for (std::size_t l = 0; l < m.encoder.size(); ++l)
    p.compound[l] = patch_compound(m, x_source, x_target, l);
  p.direct = patch_direct(p.compound);
  return p;
}

PatchingProfile patching_profile(const TrainedModel& m, const DatasetBundle& bundle,
                                 const InterventionConfig& cfg) {
  check_compat(m, bundle);
  require(cfg.patch_pairs > 0, "patching_profile: need at least one pair");
  const auto rows = resolve_eval_rows(bundle.n_rows(), cfg);
  SeededRng rng(cfg.seed ^ kPatchPairSalt);

  PatchingProfile mean;
  mean.compound = Vec(m.encoder.size(), 0.0);
  mean.direct = Vec(m.encoder.size(), 0.0);
  const double inv = 1.0 / static_cast<double>(cfg.patch_pairs);
  for (std::size_t p = 0; p < cfg.patch_pairs; ++p) {
    const std::size_t i = rows[rng.uniform_index(rows.size())];
    const std::size_t j = rows[rng.uniform_index(rows.size())];
    const auto pair = patching_profile_pair(m, bundle.X.row(i), bundle.X.row(j));
    for (std::size_t l = 0; l < pair.compound.size(); ++l) {
      mean.compound[l] += pair.compound[l] * inv;
      mean.direct[l] += pair.direct[l] * inv;
    }
  }
  return mean;
}

Vec encode_mu_frozen(const TrainedModel& m, std::span<const double> x,
                     std::size_t layer, std::span<const double> clean_activation) {
  require(layer < m.encoder.size(), "encode_mu_frozen: layer index out of range");
  require(x.size() == m.spec.input_dim, "encode_mu_frozen: input width mismatch");
  require(clean_activation.size() == m.encoder[layer].out_dim(),
          "encode_mu_frozen: activation width mismatch");
  Vec h(x.begin(), x.end());
  for (std::size_t l = 0; l < m.encoder.size(); ++l) {
    h = layer_forward(m.encoder[l], h);
    if (l == layer) h.assign(clean_activation.begin(), clean_activation.end());
  }
  return layer_forward(m.mu_head, h);
}

MediationGrid mediation_scan(const TrainedModel& m, const DatasetBundle& bundle,
                             const InterventionConfig& cfg) {
  check_compat(m, bundle);
  const auto rows = resolve_eval_rows(bundle.n_rows(), cfg);
  const std::size_t n_groups = bundle.group_count();
  const std::size_t n_layers = m.encoder.size();

  MediationGrid grid;
  grid.mr = Matrix(n_groups, n_layers);
  grid.mr_raw = Matrix(n_groups, n_layers);
  grid.te = Vec(n_groups, 0.0);
  grid.group_defined.assign(n_groups, 1);

  Matrix re_sum(n_groups, n_layers);
  Vec te_sum(n_groups, 0.0);
  std::vector<std::size_t> kept(n_groups, 0);

  for (std::size_t r : rows) {
    const auto x = bundle.X.row(r);
    ForwardCache clean;
    const auto e0 = encode_cached(m, x, &clean);
    for (std::size_t g = 0; g < n_groups; ++g) {
      const Vec xt = perturb_group(x, g, cfg.mediation_scale,
                                   bundle.sigma_per_feature, bundle.feature_group);
      const Vec mu1 = encode_mu(m, xt);
      const double te = norm_of_difference(mu1, e0.mu);
      if (te < 1e-12) continue;  // degenerate total effect: skip the sample
      ++kept[g];
      te_sum[g] += te;
      for (std::size_t l = 0; l < n_layers; ++l) {
        const Vec frozen = encode_mu_frozen(m, xt, l, clean.post[l]);
        re_sum(g, l) += norm_of_difference(frozen, e0.mu);
      }
    }
  }

  for (std::size_t g = 0; g < n_groups; ++g) {
    if (kept[g] == 0) {
      grid.group_defined[g] = 0;
      continue;
    }
    grid.te[g] = te_sum[g] / static_cast<double>(kept[g]);
    for (std::size_t l = 0; l < n_layers; ++l) {
      const double re = re_sum(g, l) / static_cast<double>(kept[g]);
      const double raw = (grid.te[g] - re) / grid.te[g];
      grid.mr_raw(g, l) = raw;
      if (raw < -1e-9 || raw > 1.0 + 1e-9) ++grid.raw_violations;
      grid.mr(g, l) = std::clamp(raw, 0.0, 1.0);
    }
  }
  grid.nis = (n_groups * n_layers) == 0
                 ? 0.0
                 : static_cast<double>(grid.raw_violations) /
                       static_cast<double>(n_groups * n_layers);
  return grid;
}

void write_level1_csv(const std::string& path, const ImportanceMatrix& im,
                      const std::vector<std::string>& group_names) {
  require(group_names.size() == im.R.rows, "write_level1_csv: group name mismatch");
  CsvRow header = {"group", "linearity_r2"};
  for (double s : im.scales) header.push_back("delta_scale_" + format_double(s));
  for (std::size_t d = 0; d < im.R.cols; ++d)
    header.push_back("R_dim_" + std::to_string(d));
  CsvTable table;
  for (std::size_t g = 0; g < im.R.rows; ++g) {
    CsvRow row = {group_names[g], format_double(im.linearity_r2[g])};
    for (std::size_t si = 0; si < im.scales.size(); ++si)
      row.push_back(format_double(im.delta(g, si)));
    for (std::size_t d = 0; d < im.R.cols; ++d)
      row.push_back(format_double(im.R(g, d)));
    table.push_back(row);
  }
  write_csv_file(path, header, table);
}

void write_ces_csv(const std::string& path, const SweepEffects& calibrated,
                   const SweepEffects& fixed, const PosteriorStats& stats) {
  const CsvRow header = {"dim",     "ces_calibrated", "ces_fixed",  "sigma_eff",
                         "mu_mean", "mu_std",         "mean_logvar"};
  CsvTable table;
  for (std::size_t d = 0; d < calibrated.ces.size(); ++d) {
    table.push_back({std::to_string(d), format_double(calibrated.ces[d]),
                     format_double(fixed.ces[d]), format_double(stats.sigma_eff[d]),
                     format_double(stats.mu_mean[d]), format_double(stats.mu_std[d]),
                     format_double(stats.mean_logvar[d])});
  }
  write_csv_file(path, header, table);
}

void write_patching_csv(const std::string& path, const PatchingProfile& profile) {
  CsvTable table;
  for (std::size_t l = 0; l < profile.compound.size(); ++l) {
    table.push_back({std::to_string(l), format_double(profile.compound[l]),
                     format_double(profile.direct[l])});
  }
  write_csv_file(path, {"layer", "compound", "direct"}, table);
}

void write_mediation_csv(const std::string& path, const MediationGrid& grid,
                         const std::vector<std::string>& group_names) {
  require(group_names.size() == grid.mr.rows, "write_mediation_csv: group mismatch");
  CsvRow header = {"group", "defined", "total_effect"};
  for (std::size_t l = 0; l < grid.mr.cols; ++l)
    header.push_back("mr_layer_" + std::to_string(l));
  header.push_back("raw_violations");
  header.push_back("nis");
  CsvTable table;
  for (std::size_t g = 0; g < grid.mr.rows; ++g) {
    CsvRow row = {group_names[g], grid.group_defined[g] ? "1" : "0",
                  format_double(grid.te[g])};
    for (std::size_t l = 0; l < grid.mr.cols; ++l)
      row.push_back(format_double(grid.mr(g, l)));
    row.push_back(std::to_string(grid.raw_violations));
    row.push_back(format_double(grid.nis));
    table.push_back(row);
  }
  write_csv_file(path, header, table);
}

}  // namespace vaecirc
