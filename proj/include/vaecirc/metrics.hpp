#pragma once

// Circuit metrics computed from intervention outputs: importance-matrix
// modularity, feature-group disentanglement (FGD), per-dimension output
// specificity, the mutual-information gap (MIG), DCI completeness for
// singleton groupings, and the random-grouping ablation.
//
// Entropies are in nats and normalized by ln(G) (or ln of the output count),
// so every score lives in [0, 1]. Exact structural endpoints (block-diagonal,
// uniform) snap to exactly 1 / 0 when within 1e-12.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "vaecirc/data.hpp"
#include "vaecirc/interventions.hpp"
#include "vaecirc/tensor.hpp"

namespace vaecirc {

// Importance-matrix modularity: 1 - (1/D) * sum_d H(column d) / ln G.
// Columns with zero mass count as maximally entropic so dead latent
// dimensions cannot inflate the score. All-zero R scores 0 with a warning;
// a single group scores 0 (no structure is measurable).
double modularity(const Matrix& R, std::vector<std::string>* warnings = nullptr);

// Feature-group disentanglement: column completeness 1 - H(column)/ln G,
// weighted by column mass. Zero total mass scores 0 with a warning.
double fgd(const Matrix& R, std::vector<std::string>* warnings = nullptr);

struct SpecificityResult {
  Vec per_dim;     // 1 - H(per-output effect row) / ln(n_outputs)
  double overall;  // CES-weighted mean over dimensions
};

// Output specificity computed from the same latent sweep as the causal-effect
// strength; never reads the feature partition.
SpecificityResult specificity_from_effects(const SweepEffects& fx);

// Mutual-information gap between latent means (N x D) and factor columns
// (N x K): per factor, (I_top1 - I_top2) / H(factor), averaged over factors.
// MI uses plug-in histograms with equal-frequency bins; factor columns with
// at most `bins` distinct values are treated as categorical. Constant factors
// are skipped with a warning.
double mig(const Matrix& latent_means, const Matrix& factors, std::size_t bins = 20,
           std::vector<std::string>* warnings = nullptr);

// Factor proxies for MIG: the bundle's ground-truth factors when present,
// otherwise the per-row mean of each group's (standardized) features.
Matrix factor_proxies(const DatasetBundle& bundle);

// Standard DCI completeness over an importance matrix whose groups are all
// singletons (one feature per group); throws std::logic_error otherwise.
// Coincides with fgd() on such matrices.
double dci_completeness(const Matrix& R, const std::vector<std::size_t>& feature_group);

struct MetricSet {
  double ces_mean = 0.0;
  Vec ces_per_dim;
  double specificity = 0.0;
  double modularity_score = 0.0;
  double fgd_score = 0.0;
  double mig_score = 0.0;
  std::optional<double> dci;  // ground-truth singleton groupings only
};

struct AblationResult {
  double semantic_modularity = 0.0;
  double semantic_fgd = 0.0;
  Vec random_modularity;  // one entry per permutation
  Vec random_fgd;
  double random_modularity_mean = 0.0;
  double random_fgd_mean = 0.0;
  double modularity_gap = 0.0;  // semantic - random mean
  double fgd_gap = 0.0;
};

// Re-runs the group-perturbation scan under size-preserving random
// permutations of the feature-to-group assignment and compares modularity and
// FGD against the semantic grouping.
AblationResult grouping_ablation(const TrainedModel& m, const DatasetBundle& bundle,
                                 const InterventionConfig& cfg,
                                 std::size_t n_permutations = 10);

}  // namespace vaecirc
