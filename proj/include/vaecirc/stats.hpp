#pragma once

// Nonparametric statistics battery: exact Wilcoxon signed-rank, Holm-Sidak
// step-down correction, paired Cohen's d and Pearson correlation with
// two-sided p-values through an in-repo incomplete beta.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "vaecirc/tensor.hpp"

namespace vaecirc {

struct WilcoxonResult {
  double p = 1.0;
  double w_plus = 0.0;        // signed-rank statistic of positive differences
  std::size_t n_used = 0;     // pairs after dropping zero differences
  std::size_t n_zero_dropped = 0;
  bool all_zero = false;      // test undefined, p reported as 1
  bool exact = false;         // exact null distribution vs normal approximation
};

// Two-sided signed-rank test on paired samples. Zero differences are dropped
// (classic convention). Exact null distribution for n_used <= 25, normal
// approximation with tie correction above that.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b);
WilcoxonResult wilcoxon_signed_rank_diffs(std::span<const double> diffs);

struct HolmSidakResult {
  Vec p_adjusted;
  std::vector<bool> reject;
};

HolmSidakResult holm_sidak(std::span<const double> p_values, double alpha = 0.05);

struct CohensDResult {
  double d = 0.0;
  bool degenerate = false;  // zero-variance differences
};

CohensDResult cohens_d_paired(std::span<const double> a, std::span<const double> b);

struct CorrelationResult {
  double r = 0.0;
  double p = 1.0;
  std::size_t n = 0;
  bool defined = false;
};

CorrelationResult pearson(std::span<const double> x, std::span<const double> y);

struct PairedComparison {
  std::string label;
  std::string metric;
  std::size_t n = 0;
  double p_raw = 1.0;
  double p_adj = 1.0;
  double cohens_d = 0.0;
  bool degenerate_d = false;
  bool significant = false;
};

// Special functions (exposed for the oracle tests).
double regularized_incomplete_beta(double a, double b, double x);
double student_t_sf(double t, double nu);  // one-sided P(T >= t)
double normal_cdf(double x);

}  // namespace vaecirc
