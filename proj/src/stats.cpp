#include "vaecirc/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace vaecirc {

namespace {

// Average ranks of |diffs|; returned doubled so tied half-ranks stay integral.
std::vector<std::int64_t> doubled_ranks(const Vec& abs_diffs) {
  const std::size_t n = abs_diffs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t i, std::size_t j) { return abs_diffs[i] < abs_diffs[j]; });
  std::vector<std::int64_t> ranks2(n, 0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && abs_diffs[order[j + 1]] == abs_diffs[order[i]]) ++j;
    // ranks i+1 .. j+1 tie; doubled average = (i+1) + (j+1)
    const std::int64_t r2 = static_cast<std::int64_t>(i + 1 + j + 1);
    for (std::size_t k = i; k <= j; ++k) ranks2[order[k]] = r2;
    i = j + 1;
  }
  return ranks2;
}

// Exact distribution of the doubled statistic 2*W+ over all sign assignments,
// by subset-sum dynamic programming. counts[w] = number of assignments with
// 2*W+ == w.
std::vector<std::uint64_t> signed_rank_counts(const std::vector<std::int64_t>& ranks2) {
  std::int64_t total = 0;
  for (auto r : ranks2) total += r;
  std::vector<std::uint64_t> counts(static_cast<std::size_t>(total) + 1, 0);
  counts[0] = 1;
  std::int64_t reach = 0;
  for (auto r : ranks2) {
    for (std::int64_t w = reach; w >= 0; --w)
      if (counts[static_cast<std::size_t>(w)])
        counts[static_cast<std::size_t>(w + r)] += counts[static_cast<std::size_t>(w)];
    reach += r;
  }
  return counts;
}

}  // namespace

WilcoxonResult wilcoxon_signed_rank_diffs(std::span<const double> diffs) {
  WilcoxonResult res;
  Vec nonzero;
  nonzero.reserve(diffs.size());
  for (double d : diffs) {
    if (d == 0.0)
      ++res.n_zero_dropped;
    else
      nonzero.push_back(d);
  }
  res.n_used = nonzero.size();
  if (nonzero.empty()) {
    res.all_zero = true;
    res.p = 1.0;
    return res;
  }

  Vec abs_diffs(nonzero.size());
  for (std::size_t i = 0; i < nonzero.size(); ++i) abs_diffs[i] = std::fabs(nonzero[i]);
  const auto ranks2 = doubled_ranks(abs_diffs);

  std::int64_t w2_plus = 0;
  std::int64_t total2 = 0;
  for (std::size_t i = 0; i < nonzero.size(); ++i) {
    total2 += ranks2[i];
    if (nonzero[i] > 0.0) w2_plus += ranks2[i];
  }
  res.w_plus = static_cast<double>(w2_plus) / 2.0;

  const std::size_t n = nonzero.size();
  if (n <= 25) {
    // Exact two-sided p: the null distribution of W+ is symmetric around
    // total/2, so sum the probability of deviations at least as large.
    const auto counts = signed_rank_counts(ranks2);
    const std::int64_t dev2 = std::llabs(2 * w2_plus - total2);  // 2*|W - mu|... in doubled units x2
    std::uint64_t hits = 0;
    for (std::size_t w = 0; w < counts.size(); ++w) {
      const std::int64_t d2 = std::llabs(2 * static_cast<std::int64_t>(w) - total2);
      if (d2 >= dev2) hits += counts[w];
    }
    const double denom = std::ldexp(1.0, static_cast<int>(n));  // 2^n
    res.p = static_cast<double>(hits) / denom;
    res.exact = true;
  } else {
    // Normal approximation with tie correction and continuity correction.
    const double nn = static_cast<double>(n);
    const double mu = nn * (nn + 1.0) / 4.0;
    double tie_term = 0.0;
    {
      Vec sorted = abs_diffs;
      std::sort(sorted.begin(), sorted.end());
      std::size_t i = 0;
      while (i < sorted.size()) {
        std::size_t j = i;
        while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
        const double t = static_cast<double>(j - i + 1);
        tie_term += t * t * t - t;
        i = j + 1;
      }
    }
    const double var = (nn * (nn + 1.0) * (2.0 * nn + 1.0) - tie_term / 2.0) / 24.0;
    const double w = res.w_plus;
    double z = 0.0;
    if (var > 0.0) {
      const double num = std::fabs(w - mu) - 0.5;
      z = (num > 0.0 ? num : 0.0) / std::sqrt(var);
    }
    res.p = 2.0 * (1.0 - normal_cdf(z));
    res.p = std::clamp(res.p, 0.0, 1.0);
    res.exact = false;
  }
  return res;
}

WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw std::invalid_argument("wilcoxon_signed_rank: unequal sample sizes");
  if (a.empty()) throw std::invalid_argument("wilcoxon_signed_rank: empty samples");
  Vec diffs(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) diffs[i] = a[i] - b[i];
  return wilcoxon_signed_rank_diffs(diffs);
}

HolmSidakResult holm_sidak(std::span<const double> p_values, double alpha) {
  const std::size_t m = p_values.size();
  HolmSidakResult res;
  res.p_adjusted.assign(m, 1.0);
  res.reject.assign(m, false);
  if (m == 0) return res;
  for (double p : p_values)
    if (!(p >= 0.0 && p <= 1.0))
      throw std::invalid_argument("holm_sidak: p-value outside [0, 1]");

  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t i, std::size_t j) { return p_values[i] < p_values[j]; });

  double running_max = 0.0;
  bool stopped = false;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t idx = order[i];
    const double exponent = static_cast<double>(m - i);
    double adj = 1.0 - std::pow(1.0 - p_values[idx], exponent);
    adj = std::min(adj, 1.0);
    running_max = std::max(running_max, adj);  // enforce monotonicity
    res.p_adjusted[idx] = running_max;
    if (!stopped && running_max <= alpha)
      res.reject[idx] = true;
    else
      stopped = true;  // step-down: first non-rejection stops the walk
  }
  return res;
}

CohensDResult cohens_d_paired(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw std::invalid_argument("cohens_d_paired: unequal sample sizes");
  if (a.size() < 2) throw std::invalid_argument("cohens_d_paired: need at least 2 pairs");
  const std::size_t n = a.size();
  Vec diffs(n);
  for (std::size_t i = 0; i < n; ++i) diffs[i] = a[i] - b[i];
  const double m = mean(diffs);
  double ss = 0.0;
  for (double d : diffs) ss += (d - m) * (d - m);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  CohensDResult res;
  if (sd == 0.0) {
    res.degenerate = true;
    res.d = (m == 0.0) ? 0.0
                       : std::copysign(std::numeric_limits<double>::infinity(), m);
    return res;
  }
  res.d = m / sd;
  return res;
}

CorrelationResult pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("pearson: unequal sample sizes");
  CorrelationResult res;
  res.n = x.size();
  if (x.size() < 3) throw std::invalid_argument("pearson: need at least 3 observations");
  const double mx = mean(x);
  const double my = mean(y);
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    res.defined = false;
    return res;
  }
  res.defined = true;
  double r = sxy / std::sqrt(sxx * syy);
  r = std::clamp(r, -1.0, 1.0);
  res.r = r;
  const double nu = static_cast<double>(x.size() - 2);
  if (std::fabs(r) >= 1.0) {
    res.p = 0.0;  // limit of the t statistic
    return res;
  }
  const double t = r * std::sqrt(nu / (1.0 - r * r));
  res.p = std::clamp(2.0 * student_t_sf(std::fabs(t), nu), 0.0, 1.0);
  return res;
}

namespace {

double log_gamma(double x) { return std::lgamma(x); }

// Continued fraction for the incomplete beta (Lentz's method).
double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-16;
  constexpr double kFpMin = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
  if (a <= 0.0 || b <= 0.0)
    throw std::invalid_argument("regularized_incomplete_beta: a, b must be positive");
  if (x < 0.0 || x > 1.0)
    throw std::invalid_argument("regularized_incomplete_beta: x outside [0, 1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double ln_front =
      log_gamma(a + b) - log_gamma(a) - log_gamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - std::exp(log_gamma(a + b) - log_gamma(b) - log_gamma(a) + b * std::log1p(-x) +
                        a * std::log(x)) *
                   betacf(b, a, 1.0 - x) / b;
}

double student_t_sf(double t, double nu) {
  if (nu <= 0.0) throw std::invalid_argument("student_t_sf: dof must be positive");
  const double x = nu / (nu + t * t);
  const double half_tail = 0.5 * regularized_incomplete_beta(nu / 2.0, 0.5, x);
  return (t >= 0.0) ? half_tail : 1.0 - half_tail;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace vaecirc
