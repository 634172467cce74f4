#pragma once

// Downstream measures computed from latent means: an L2-regularized logistic
// probe (deterministic full-batch gradient descent), held-out accuracy,
// Mann-Whitney AUC, noise-perturbed robustness, and the demographic-parity
// gap against a protected attribute.

#include <cstdint>
#include <span>
#include <vector>

#include "vaecirc/tensor.hpp"

namespace vaecirc {

struct ProbeConfig {
  double l2 = 1e-3;                // ridge strength on the weights (not bias)
  double grad_tol = 1e-6;          // stop when the gradient norm falls below
  std::size_t max_iters = 5000;
  double heldout_fraction = 0.2;   // evaluation split for the probe measures
  std::uint64_t seed = 7;          // drives the split and the noise draws
  double noise_sd = 0.5;           // robustness noise, in per-dim latent stds
  std::size_t noise_draws = 10;
};

struct LogisticProbe {
  Vec weights;
  double bias = 0.0;
  std::size_t iterations = 0;
  bool reached_tolerance = false;
};

// Fits sigmoid(w.x + b) to binary labels over the given rows by full-batch
// gradient descent with a step size of 1/L (L estimated by power iteration).
// Throws std::invalid_argument when the rows carry fewer than two classes.
LogisticProbe fit_logistic(const Matrix& X, const std::vector<int>& labels,
                           std::span<const std::size_t> rows, const ProbeConfig& cfg);

double probe_score(const LogisticProbe& probe, std::span<const double> x);

// Rank-based Mann-Whitney AUC; tied scores contribute 1/2. Throws
// std::invalid_argument unless both classes are present.
double auc(const Vec& scores, const std::vector<int>& labels);

struct DpGapResult {
  double gap = 0.0;
  bool defined = false;  // false when a protected group is absent
};

// |P(prediction = 1 | A = 0) - P(prediction = 1 | A = 1)|.
DpGapResult dp_gap(const std::vector<int>& predictions,
                   const std::vector<int>& protected_attr);

struct ProbeResult {
  double accuracy = 0.0;     // held-out, threshold 0.5
  double auc_score = 0.0;    // held-out
  double robustness = 0.0;   // mean held-out accuracy under latent noise
  DpGapResult dp;
  LogisticProbe probe;
  std::size_t n_train = 0;
  std::size_t n_heldout = 0;
};

// Full evaluation: split rows, fit on the training part, measure accuracy /
// AUC / robustness / parity gap on the held-out part. Deterministic per seed.
ProbeResult evaluate_probe(const Matrix& latent_means, const std::vector<int>& labels,
                           const std::vector<int>& protected_attr,
                           const ProbeConfig& cfg);

}  // namespace vaecirc
