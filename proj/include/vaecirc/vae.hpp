#pragma once

// The five fully-connected VAE variants sharing one encoder/decoder backbone:
// plain ELBO, reweighted KL, total-correlation decomposition with an
// upweighted TC term, adversarial total-correlation (two-class discriminator),
// and moment-matching covariance regularization. Training is Adam with
// plateau-halved learning rate and early stopping on a held-out split.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vaecirc/nn.hpp"
#include "vaecirc/rng.hpp"
#include "vaecirc/tensor.hpp"

namespace vaecirc {

enum class VaeVariant { kStandard, kBeta, kBetaTc, kFactor, kDipTwo };

std::string variant_name(VaeVariant v);
VaeVariant variant_from_name(const std::string& name);

struct VaeHyper {
  double beta = 4.0;        // KL weight (kBeta)
  double tc_weight = 6.0;   // total-correlation weight (kBetaTc)
  double gamma = 10.0;      // adversarial TC weight (kFactor)
  double lambda_od = 10.0;  // off-diagonal covariance weight (kDipTwo)
  double lambda_d = 100.0;  // diagonal covariance weight (kDipTwo)
};

struct VaeArchitectureSpec {
  VaeVariant variant = VaeVariant::kStandard;
  std::size_t input_dim = 0;
  std::vector<std::size_t> encoder_widths = {256, 128, 64};
  std::size_t latent_dim = 10;
  VaeHyper hyper;
};

struct TrainedModel {
  VaeArchitectureSpec spec;
  std::vector<DenseLayer> encoder;         // input -> widths, all relu
  DenseLayer mu_head;                      // last width -> D, identity
  DenseLayer logvar_head;                  // last width -> D, identity
  std::vector<DenseLayer> decoder;         // D -> reversed widths -> input, relu hidden
  std::vector<DenseLayer> discriminator;   // kFactor only: D -> 64^3 -> 2 logits
  std::uint64_t seed = 0;
  double final_mse = 0.0;                  // held-out per-feature MSE at the mean decode
  std::size_t epochs_run = 0;
  bool converged = false;
};

// Deterministic initialization; the parameter draw order is fixed so two
// variants with the same seed share identical backbone weights.
TrainedModel init_model(const VaeArchitectureSpec& spec, std::uint64_t seed);

struct EncodeResult {
  Vec mu;
  Vec logvar;
};

EncodeResult encode(const TrainedModel& m, std::span<const double> x);
Vec encode_mu(const TrainedModel& m, std::span<const double> x);
// Variant that also records hidden post-activations for patching/freezing.
EncodeResult encode_cached(const TrainedModel& m, std::span<const double> x,
                           ForwardCache* cache);
// Resumes the encoder after substituting layer `layer`'s post-activation,
// returning the resulting posterior mean.
Vec encode_mu_from_layer(const TrainedModel& m, std::size_t layer,
                         std::span<const double> activation);
Vec decode(const TrainedModel& m, std::span<const double> z);

Vec reparameterize(std::span<const double> mu, std::span<const double> logvar,
                   std::span<const double> eps);
double kl_to_standard_normal(std::span<const double> mu, std::span<const double> logvar);

struct LossTerms {
  double total = 0.0;
  double recon_sum = 0.0;  // per-sample sum of squared errors, batch mean
  double recon_mse = 0.0;  // per-feature mean squared error, batch mean
  double kl = 0.0;         // KL to the standard normal, batch mean
  double mi = 0.0;         // index-code mutual information (kBetaTc)
  double tc = 0.0;         // total correlation (kBetaTc)
  double dwkl = 0.0;       // dimension-wise KL (kBetaTc)
  double dip_od = 0.0;     // sum of squared off-diagonal covariances (kDipTwo)
  double dip_d = 0.0;      // sum of squared diagonal deviations (kDipTwo)
  double tc_disc = 0.0;    // discriminator log-density-ratio estimate (kFactor)
};

struct VaeGrads {
  std::vector<LayerGrads> encoder;
  LayerGrads mu_head;
  LayerGrads logvar_head;
  std::vector<LayerGrads> decoder;
};

VaeGrads make_zero_vae_grads(const TrainedModel& m);

// Evaluates the variant loss on an explicit batch. `rows` index into X; `eps`
// supplies one noise row per batch row; `dataset_size` feeds the
// minibatch-weighted density estimator. Throws std::invalid_argument for
// empty batches, or batches below 2 rows for the covariance/TC variants.
LossTerms vae_batch_loss(const TrainedModel& m, const Matrix& X,
                         std::span<const std::size_t> rows, const Matrix& eps,
                         std::size_t dataset_size);

// Same, also accumulating generator gradients (the discriminator is treated
// as frozen). Exposed so tests can pit the analytic gradients against finite
// differences.
LossTerms vae_batch_loss_and_grads(const TrainedModel& m, const Matrix& X,
                                   std::span<const std::size_t> rows, const Matrix& eps,
                                   std::size_t dataset_size, VaeGrads* grads);

Vec discriminator_logits(const TrainedModel& m, std::span<const double> z);
// Each latent dimension is permuted independently across the batch.
Matrix permute_dims_across_batch(const Matrix& z_batch, SeededRng& rng);
// One cross-entropy update of the discriminator on true-vs-permuted codes;
// returns the mean discriminator loss. Throws std::logic_error for variants
// without a discriminator.
double factorvae_discriminator_step(TrainedModel& m, const Matrix& z_batch, SeededRng& rng,
                                    AdamOptimizer& disc_opt);

struct TrainConfig {
  std::size_t max_epochs = 200;
  std::size_t batch_size = 256;
  double lr = 1e-3;
  std::size_t plateau_patience = 10;   // epochs without improvement before halving lr
  double plateau_factor = 0.5;
  std::size_t early_stop_patience = 20;
  double heldout_fraction = 0.1;
  double disc_lr = 1e-4;
  std::uint64_t seed = 42;
};

// Deterministic end-to-end: identical (spec, data, config) reproduce the
// model bit for bit. Throws std::runtime_error when the loss goes non-finite.
TrainedModel train_vae(const VaeArchitectureSpec& spec, const Matrix& X,
                       const TrainConfig& cfg);

// Held-out per-feature MSE decoding at the posterior mean (no sampling).
double mean_decode_mse(const TrainedModel& m, const Matrix& X,
                       std::span<const std::size_t> rows);

// Binary checkpoint (documented fixed layout); round-trips bit-exactly.
void save_model(const TrainedModel& m, const std::string& path);
TrainedModel load_model(const std::string& path);

}  // namespace vaecirc
