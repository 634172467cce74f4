#pragma once

// Four-level causal intervention suite run against a trained model and a
// dataset bundle:
//   level 1 — input perturbations by feature group, yielding the importance
//             matrix R plus per-group response linearity;
//   level 2 — latent sweeps (posterior-calibrated and fixed-range) measuring
//             causal effect strength on the decoded output;
//   level 3 — activation patching between input pairs with the compound /
//             direct telescoping decomposition over encoder layers;
//   level 4 — layer freezing (mediation) quantifying how much of a group's
//             latent effect each layer transmits, plus the nonlinear
//             interaction strength.
// Every operation is a pure function of (model, bundle, config) and is
// deterministic for a fixed config seed.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vaecirc/data.hpp"
#include "vaecirc/tensor.hpp"
#include "vaecirc/vae.hpp"

namespace vaecirc {

struct InterventionConfig {
  std::vector<double> scales = {0.5, 1.0, 2.0};  // level-1 perturbation scales
  std::size_t sweep_points = 51;                 // latent sweep grid size
  double sweep_half_range = 3.0;                 // sweep covers [-a, +a]
  std::size_t eval_cap = 512;      // evaluation rows per intervention (0 = all)
  bool ces_center_per_sample = false;  // center sweeps at each sample's mu_d
                                       // instead of the dataset mean
  std::size_t patch_pairs = 200;   // source/target pairs for level 3
  double mediation_scale = 1.0;    // level-4 perturbation scale
  std::uint64_t seed = 42;         // drives row subsampling and pair draws
  // Explicit evaluation rows (e.g. the training held-out split). Empty means
  // all bundle rows; either way the set is capped at eval_cap by a
  // seed-deterministic subsample.
  std::vector<std::size_t> eval_rows;
};

// Resolves the evaluation row set for a bundle of n_rows rows. Throws
// std::invalid_argument when the resolved set is empty or an explicit row is
// out of range.
std::vector<std::size_t> resolve_eval_rows(std::size_t n_rows,
                                           const InterventionConfig& cfg);

// Adds s * sigma to every feature in group g, leaving the rest bit-identical.
Vec perturb_group(std::span<const double> x, std::size_t g, double s,
                  const Vec& sigma_per_feature,
                  const std::vector<std::size_t>& feature_group);

struct ImportanceMatrix {
  Matrix R;                    // G x D: mean |per-dimension mu shift|, averaged
                               // over evaluation rows and scales
  std::vector<double> scales;  // scales used
  Matrix delta;                // G x S: mean Euclidean mu-shift norm per scale
  Vec linearity_r2;            // per-group R^2 of delta vs scale (1.0 snapped
                               // when the fit is exact to 1e-12)
};

ImportanceMatrix level1_scan(const TrainedModel& m, const DatasetBundle& bundle,
                             const InterventionConfig& cfg);

struct PosteriorStats {
  Vec mu_mean;      // mean of mu_d over the evaluation rows
  Vec mu_std;       // population std of mu_d
  Vec mean_logvar;  // mean of logvar_d
  Vec sigma_eff;    // max(mu_std_d, sqrt(exp(mean_logvar_d)))
};

PosteriorStats posterior_stats(const TrainedModel& m, const DatasetBundle& bundle,
                               const InterventionConfig& cfg);

// Latent sweep outputs shared by the causal-effect strength and specificity
// computations. per_feature(d, f) is the mean absolute change of decoded
// feature f when dimension d is swept; ces[d] is its per-feature mean.
struct SweepEffects {
  Matrix per_feature;  // D x n_features
  Vec ces;             // D
};

// Calibrated sweep: z_d = center_d + sigma_eff_d * t, t in
// linspace(-a, a, sweep_points); center_d is the dataset mu mean (or the
// sample's own mu_d under ces_center_per_sample). All other coordinates stay
// at the sample's posterior mean; the baseline decode is D(mu(x)).
SweepEffects ces_sweep_calibrated(const TrainedModel& m, const DatasetBundle& bundle,
                                  const PosteriorStats& stats,
                                  const InterventionConfig& cfg);
// Fixed-range sweep: z_d = t over the same grid, ignoring the posterior.
SweepEffects ces_sweep_fixed(const TrainedModel& m, const DatasetBundle& bundle,
                             const InterventionConfig& cfg);

double ces_calibrated(const TrainedModel& m, const DatasetBundle& bundle,
                      const PosteriorStats& stats, std::size_t d,
                      const InterventionConfig& cfg);
double ces_fixed(const TrainedModel& m, const DatasetBundle& bundle, std::size_t d,
                 const InterventionConfig& cfg);

// Substitutes the source input's post-activation at encoder layer l into the
// target's forward pass and returns the Euclidean norm of the resulting
// posterior-mean shift.
double patch_compound(const TrainedModel& m, std::span<const double> x_source,
                      std::span<const double> x_target, std::size_t layer);

// direct(l) = compound(l) - compound(l+1), with compound(L) taken as 0; the
// directs telescope back to compound(0) exactly.
Vec patch_direct(const Vec& compound);

struct PatchingProfile {
  Vec compound;  // one entry per encoder layer
  Vec direct;
};

PatchingProfile patching_profile_pair(const TrainedModel& m,
                                      std::span<const double> x_source,
                                      std::span<const double> x_target);
// Mean profile over cfg.patch_pairs random source/target pairs drawn from the
// evaluation rows.
PatchingProfile patching_profile(const TrainedModel& m, const DatasetBundle& bundle,
                                 const InterventionConfig& cfg);

struct MediationGrid {
  Matrix mr;      // G x L mediation ratios, clamped to [0, 1]
  Matrix mr_raw;  // pre-clamp values
  Vec te;         // per-group mean total effect over kept samples
  std::vector<char> group_defined;  // false when every sample was skipped
  std::size_t raw_violations = 0;   // grid cells outside [-1e-9, 1 + 1e-9]
  double nis = 0.0;                 // raw_violations / (G * L)
};

// Runs the posterior-mean forward on a perturbed input while encoder layer l
// is frozen to its clean-input post-activation.
Vec encode_mu_frozen(const TrainedModel& m, std::span<const double> x,
                     std::size_t layer, std::span<const double> clean_activation);

MediationGrid mediation_scan(const TrainedModel& m, const DatasetBundle& bundle,
                             const InterventionConfig& cfg);

// Per-run CSV artifacts (RFC 4180, headers included).
void write_level1_csv(const std::string& path, const ImportanceMatrix& im,
                      const std::vector<std::string>& group_names);
void write_ces_csv(const std::string& path, const SweepEffects& calibrated,
                   const SweepEffects& fixed, const PosteriorStats& stats);
void write_patching_csv(const std::string& path, const PatchingProfile& profile);
void write_mediation_csv(const std::string& path, const MediationGrid& grid,
                         const std::vector<std::string>& group_names);

}  // namespace vaecirc
