#include "vaecirc/probe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vaecirc/data.hpp"
#include "vaecirc/rng.hpp"

namespace vaecirc {
namespace {

constexpr std::uint64_t kNoiseSalt = 0xBB67AE8584CAA73BULL;

double sigmoid(double s) { return 1.0 / (1.0 + std::exp(-s)); }

void check_binary(const std::vector<int>& labels, std::span<const std::size_t> rows) {
  bool pos = false, neg = false;
  for (std::size_t r : rows) {
    require(labels[r] == 0 || labels[r] == 1, "probe: labels must be 0/1");
    (labels[r] == 1 ? pos : neg) = true;
  }
  require(pos && neg, "probe: both classes must be present");
}

// Largest singular value squared of [X | 1] over the rows, via power
// iteration on the Gram operator. Deterministic start vector.
double top_gram_eigenvalue(const Matrix& X, std::span<const std::size_t> rows) {
  const std::size_t d = X.cols + 1;
  Vec v(d, 1.0 / std::sqrt(static_cast<double>(d)));
  double lambda = 0.0;
  for (int iter = 0; iter < 50; ++iter) {
    Vec next(d, 0.0);
    for (std::size_t r : rows) {
      double proj = v[d - 1];  // the intercept column
      for (std::size_t c = 0; c < X.cols; ++c) proj += X(r, c) * v[c];
      for (std::size_t c = 0; c < X.cols; ++c) next[c] += proj * X(r, c);
      next[d - 1] += proj;
    }
    lambda = norm2(next);
    if (lambda <= 0.0) return 0.0;
    for (double& x : next) x /= lambda;
    v = std::move(next);
  }
  return lambda;
}

}  // namespace

LogisticProbe fit_logistic(const Matrix& X, const std::vector<int>& labels,
                           std::span<const std::size_t> rows, const ProbeConfig& cfg) {
  require(labels.size() == X.rows, "fit_logistic: label count mismatch");
  require(!rows.empty(), "fit_logistic: empty row set");
  for (std::size_t r : rows)
    require(r < X.rows, "fit_logistic: row index out of range");
  check_binary(labels, rows);

  const std::size_t d = X.cols;
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  // Lipschitz constant of the gradient: sigmoid curvature is at most 1/4.
  const double lipschitz = 0.25 * top_gram_eigenvalue(X, rows) * inv_n + cfg.l2;
  const double step = lipschitz > 0.0 ? 1.0 / lipschitz : 1.0;

  LogisticProbe probe;
  probe.weights = Vec(d, 0.0);
  Vec grad_w(d, 0.0);
  for (std::size_t iter = 0; iter < cfg.max_iters; ++iter) {
    std::fill(grad_w.begin(), grad_w.end(), 0.0);
    double grad_b = 0.0;
    for (std::size_t r : rows) {
      const double resid =
          (sigmoid(probe.bias + dot(probe.weights, X.row(r))) - labels[r]) * inv_n;
      axpy(resid, X.row(r), grad_w);
      grad_b += resid;
    }
    axpy(cfg.l2, probe.weights, grad_w);
    double gnorm = grad_b * grad_b;
    for (double g : grad_w) gnorm += g * g;
    gnorm = std::sqrt(gnorm);
    probe.iterations = iter + 1;
    if (gnorm < cfg.grad_tol) {
      probe.reached_tolerance = true;
      break;
    }
    axpy(-step, grad_w, probe.weights);
    probe.bias -= step * grad_b;
  }
  return probe;
}

double probe_score(const LogisticProbe& probe, std::span<const double> x) {
  require(x.size() == probe.weights.size(), "probe_score: width mismatch");
  return sigmoid(probe.bias + dot(probe.weights, x));
}

double auc(const Vec& scores, const std::vector<int>& labels) {
  require(scores.size() == labels.size(), "auc: size mismatch");
  require(!scores.empty(), "auc: empty input");
  std::size_t n_pos = 0;
  for (int y : labels) {
    require(y == 0 || y == 1, "auc: labels must be 0/1");
    n_pos += static_cast<std::size_t>(y);
  }
  const std::size_t n_neg = scores.size() - n_pos;
  require(n_pos > 0 && n_neg > 0, "auc: both classes must be present");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Tie-averaged ranks (1-based).
  Vec rank(scores.size(), 0.0);
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j + 1);
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double pos_rank_sum = 0.0;
  for (std::size_t k = 0; k < scores.size(); ++k)
    if (labels[k] == 1) pos_rank_sum += rank[k];
  const double np = static_cast<double>(n_pos);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

DpGapResult dp_gap(const std::vector<int>& predictions,
                   const std::vector<int>& protected_attr) {
  require(predictions.size() == protected_attr.size(), "dp_gap: size mismatch");
  double pos[2] = {0.0, 0.0};
  double count[2] = {0.0, 0.0};
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const int a = protected_attr[i];
    require(a == 0 || a == 1, "dp_gap: protected attribute must be 0/1");
    count[a] += 1.0;
    pos[a] += predictions[i];
  }
  DpGapResult res;
  if (count[0] == 0.0 || count[1] == 0.0) return res;  // one group absent
  res.defined = true;
  res.gap = std::abs(pos[0] / count[0] - pos[1] / count[1]);
  return res;
}

ProbeResult evaluate_probe(const Matrix& latent_means, const std::vector<int>& labels,
                           const std::vector<int>& protected_attr,
                           const ProbeConfig& cfg) {
  require(labels.size() == latent_means.rows, "evaluate_probe: label count mismatch");
  require(protected_attr.empty() || protected_attr.size() == latent_means.rows,
          "evaluate_probe: protected attribute count mismatch");
  const auto split = heldout_split(latent_means.rows, cfg.heldout_fraction, cfg.seed);
  require(!split.heldout.empty(), "evaluate_probe: empty held-out split");

  ProbeResult res;
  res.n_train = split.train.size();
  res.n_heldout = split.heldout.size();
  res.probe = fit_logistic(latent_means, labels, split.train, cfg);

  Vec scores(split.heldout.size());
  std::vector<int> preds(split.heldout.size());
  std::vector<int> y(split.heldout.size());
  double correct = 0.0;
  for (std::size_t i = 0; i < split.heldout.size(); ++i) {
    scores[i] = probe_score(res.probe, latent_means.row(split.heldout[i]));
    preds[i] = scores[i] >= 0.5 ? 1 : 0;
    y[i] = labels[split.heldout[i]];
    if (preds[i] == y[i]) correct += 1.0;
  }
  res.accuracy = correct / static_cast<double>(split.heldout.size());
  res.auc_score = auc(scores, y);

  // Robustness: per-dimension latent std estimated on the training rows.
  Vec mean_d(latent_means.cols, 0.0), std_d(latent_means.cols, 0.0);
  const double inv_train = 1.0 / static_cast<double>(split.train.size());
  for (std::size_t r : split.train)
    for (std::size_t c = 0; c < latent_means.cols; ++c)
      mean_d[c] += latent_means(r, c) * inv_train;
  for (std::size_t r : split.train)
    for (std::size_t c = 0; c < latent_means.cols; ++c) {
      const double dv = latent_means(r, c) - mean_d[c];
      std_d[c] += dv * dv * inv_train;
    }
  for (double& v : std_d) v = std::sqrt(v);

  SeededRng noise_rng(cfg.seed ^ kNoiseSalt);
  std::size_t robust_hits = 0;  // pooled count keeps noise_sd = 0 bit-equal
  Vec z(latent_means.cols);
  for (std::size_t draw = 0; draw < cfg.noise_draws; ++draw) {
    for (std::size_t i = 0; i < split.heldout.size(); ++i) {
      const auto row = latent_means.row(split.heldout[i]);
      for (std::size_t c = 0; c < latent_means.cols; ++c)
        z[c] = row[c] + cfg.noise_sd * std_d[c] * noise_rng.normal();
      const int pred = probe_score(res.probe, z) >= 0.5 ? 1 : 0;
      if (pred == y[i]) ++robust_hits;
    }
  }
  res.robustness = cfg.noise_draws > 0
                       ? static_cast<double>(robust_hits) /
                             static_cast<double>(cfg.noise_draws * split.heldout.size())
                       : res.accuracy;

  if (!protected_attr.empty()) {
    std::vector<int> prot(split.heldout.size());
    for (std::size_t i = 0; i < split.heldout.size(); ++i)
      prot[i] = protected_attr[split.heldout[i]];
    res.dp = dp_gap(preds, prot);
  }
  return res;
}

}  // namespace vaecirc
