#include "vaecirc/vae.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "vaecirc/data.hpp"

namespace vaecirc {

namespace {

// Distinct RNG streams derived from one seed: initialization, the training
// stream (shuffles, noise, permutations) and the frozen evaluation noise.
constexpr std::uint64_t kTrainSalt = 0x9D2C5680E4B17A35ULL;
constexpr std::uint64_t kEvalSalt = 0x5851F42D4C957F2DULL;

constexpr double kLog2Pi = 1.8378770664093453;  // log(2*pi)

double logsumexp(std::span<const double> v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

constexpr std::size_t kDiscriminatorWidth = 64;  // 3 hidden layers, 2-class output

}  // namespace

std::string variant_name(VaeVariant v) {
  switch (v) {
    case VaeVariant::kStandard: return "standard";
    case VaeVariant::kBeta: return "beta";
    case VaeVariant::kBetaTc: return "beta_tc";
    case VaeVariant::kFactor: return "factor";
    case VaeVariant::kDipTwo: return "dip2";
  }
  throw std::logic_error("variant_name: unknown variant");
}

VaeVariant variant_from_name(const std::string& name) {
  if (name == "standard") return VaeVariant::kStandard;
  if (name == "beta") return VaeVariant::kBeta;
  if (name == "beta_tc") return VaeVariant::kBetaTc;
  if (name == "factor") return VaeVariant::kFactor;
  if (name == "dip2") return VaeVariant::kDipTwo;
  throw std::invalid_argument("variant_from_name: unknown variant '" + name + "'");
}

TrainedModel init_model(const VaeArchitectureSpec& spec, std::uint64_t seed) {
  require(spec.input_dim >= 1, "init_model: input_dim must be set");
  require(spec.latent_dim >= 1, "init_model: latent_dim must be positive");
  require(!spec.encoder_widths.empty(), "init_model: encoder needs at least one hidden layer");
  for (std::size_t w : spec.encoder_widths)
    require(w >= 1, "init_model: zero-width encoder layer");

  TrainedModel m;
  m.spec = spec;
  m.seed = seed;
  SeededRng rng(seed);

  std::size_t in = spec.input_dim;
  for (std::size_t w : spec.encoder_widths) {
    m.encoder.push_back(make_dense(in, w, Activation::kReLU, rng));
    in = w;
  }
  m.mu_head = make_dense(in, spec.latent_dim, Activation::kIdentity, rng);
  m.logvar_head = make_dense(in, spec.latent_dim, Activation::kIdentity, rng);

  std::size_t din = spec.latent_dim;
  for (auto it = spec.encoder_widths.rbegin(); it != spec.encoder_widths.rend(); ++it) {
    m.decoder.push_back(make_dense(din, *it, Activation::kReLU, rng));
    din = *it;
  }
  m.decoder.push_back(make_dense(din, spec.input_dim, Activation::kIdentity, rng));

  if (spec.variant == VaeVariant::kFactor) {
    std::size_t fin = spec.latent_dim;
    for (int i = 0; i < 3; ++i) {
      m.discriminator.push_back(make_dense(fin, kDiscriminatorWidth, Activation::kReLU, rng));
      fin = kDiscriminatorWidth;
    }
    m.discriminator.push_back(make_dense(fin, 2, Activation::kIdentity, rng));
  }
  return m;
}

EncodeResult encode_cached(const TrainedModel& m, std::span<const double> x,
                           ForwardCache* cache) {
  require(x.size() == m.spec.input_dim, "encode: input width mismatch");
  Vec h = forward(m.encoder, Vec(x.begin(), x.end()), cache);
  EncodeResult out;
  out.mu = layer_forward(m.mu_head, h);
  out.logvar = layer_forward(m.logvar_head, h);
  return out;
}

EncodeResult encode(const TrainedModel& m, std::span<const double> x) {
  return encode_cached(m, x, nullptr);
}

Vec encode_mu(const TrainedModel& m, std::span<const double> x) {
  return encode(m, x).mu;
}

Vec encode_mu_from_layer(const TrainedModel& m, std::size_t layer,
                         std::span<const double> activation) {
  require(layer < m.encoder.size(), "encode_mu_from_layer: layer index out of range");
  require(activation.size() == m.encoder[layer].out_dim(),
          "encode_mu_from_layer: activation width mismatch");
  Vec h(activation.begin(), activation.end());
  for (std::size_t l = layer + 1; l < m.encoder.size(); ++l)
    h = layer_forward(m.encoder[l], h);
  return layer_forward(m.mu_head, h);
}

Vec decode(const TrainedModel& m, std::span<const double> z) {
  require(z.size() == m.spec.latent_dim, "decode: latent width mismatch");
  return forward(m.decoder, Vec(z.begin(), z.end()));
}

Vec reparameterize(std::span<const double> mu, std::span<const double> logvar,
                   std::span<const double> eps) {
  require(mu.size() == logvar.size() && mu.size() == eps.size(),
          "reparameterize: width mismatch");
  Vec z(mu.size());
  for (std::size_t d = 0; d < mu.size(); ++d)
    z[d] = mu[d] + std::exp(0.5 * logvar[d]) * eps[d];
  return z;
}

double kl_to_standard_normal(std::span<const double> mu, std::span<const double> logvar) {
  require(mu.size() == logvar.size(), "kl_to_standard_normal: width mismatch");
  double s = 0.0;
  for (std::size_t d = 0; d < mu.size(); ++d)
    s += 0.5 * (mu[d] * mu[d] + std::exp(logvar[d]) - logvar[d] - 1.0);
  return s;
}

VaeGrads make_zero_vae_grads(const TrainedModel& m) {
  VaeGrads g;
  g.encoder = make_zero_grads(m.encoder);
  g.mu_head = {Matrix(m.mu_head.weight.rows, m.mu_head.weight.cols),
               Vec(m.mu_head.bias.size(), 0.0)};
  g.logvar_head = {Matrix(m.logvar_head.weight.rows, m.logvar_head.weight.cols),
                   Vec(m.logvar_head.bias.size(), 0.0)};
  g.decoder = make_zero_grads(m.decoder);
  return g;
}

Vec discriminator_logits(const TrainedModel& m, std::span<const double> z) {
  if (m.discriminator.empty())
    throw std::logic_error("discriminator_logits: model has no discriminator");
  return forward(m.discriminator, Vec(z.begin(), z.end()));
}

Matrix permute_dims_across_batch(const Matrix& z_batch, SeededRng& rng) {
  Matrix out(z_batch.rows, z_batch.cols);
  for (std::size_t d = 0; d < z_batch.cols; ++d) {
    auto perm = rng.permutation(z_batch.rows);
    for (std::size_t i = 0; i < z_batch.rows; ++i) out(i, d) = z_batch(perm[i], d);
  }
  return out;
}

namespace {

struct SampleWork {
  ForwardCache enc_cache;
  ForwardCache dec_cache;
  Vec h;       // encoder top activation
  Vec mu, lv, z, xhat;
};

// Shared forward/backward machinery. When `grads` is non-null the generator
// gradient of the batch loss is accumulated; the discriminator (if any) is
// treated as frozen. Optionally exports the sampled codes via `z_out`.
LossTerms batch_core(const TrainedModel& m, const Matrix& X,
                     std::span<const std::size_t> rows, const Matrix& eps,
                     std::size_t dataset_size, VaeGrads* grads, Matrix* z_out) {
  const std::size_t mb = rows.size();
  const std::size_t d_lat = m.spec.latent_dim;
  const std::size_t n_feat = m.spec.input_dim;
  require(mb > 0, "vae_batch_loss: empty batch");
  require(X.cols == n_feat, "vae_batch_loss: data width mismatch");
  require(eps.rows == mb && eps.cols == d_lat, "vae_batch_loss: eps shape mismatch");
  require(dataset_size >= mb, "vae_batch_loss: dataset_size smaller than batch");
  const VaeVariant variant = m.spec.variant;
  if ((variant == VaeVariant::kBetaTc || variant == VaeVariant::kDipTwo) && mb < 2)
    throw std::invalid_argument(
        "vae_batch_loss: covariance/total-correlation terms need at least 2 rows");
  for (std::size_t r : rows)
    require(r < X.rows, "vae_batch_loss: row index out of range");

  const bool with_grads = grads != nullptr;
  const double inv_m = 1.0 / static_cast<double>(mb);
  const VaeHyper& hp = m.spec.hyper;

  std::vector<SampleWork> work(mb);
  LossTerms terms;

  // Forward pass.
  for (std::size_t i = 0; i < mb; ++i) {
    SampleWork& w = work[i];
    const auto xrow = X.row(rows[i]);
    EncodeResult enc = encode_cached(m, xrow, with_grads ? &w.enc_cache : nullptr);
    w.mu = std::move(enc.mu);
    w.lv = std::move(enc.logvar);
    if (with_grads) w.h = w.enc_cache.post.back();
    w.z = reparameterize(w.mu, w.lv, eps.row(i));
    w.xhat = forward(m.decoder, w.z, with_grads ? &w.dec_cache : nullptr);

    double rec = 0.0;
    for (std::size_t j = 0; j < n_feat; ++j) {
      const double diff = w.xhat[j] - xrow[j];
      rec += diff * diff;
    }
    terms.recon_sum += rec * inv_m;
    terms.kl += kl_to_standard_normal(w.mu, w.lv) * inv_m;
  }
  terms.recon_mse = terms.recon_sum / static_cast<double>(n_feat);
  if (z_out) {
    *z_out = Matrix(mb, d_lat);
    for (std::size_t i = 0; i < mb; ++i)
      std::copy(work[i].z.begin(), work[i].z.end(), z_out->row(i).begin());
  }

  // Direct gradients with respect to mu, logvar and z (before reparam chain).
  std::vector<Vec> g_mu(mb, Vec(d_lat, 0.0));
  std::vector<Vec> g_lv(mb, Vec(d_lat, 0.0));
  std::vector<Vec> g_z(mb, Vec(d_lat, 0.0));

  double kl_weight = 1.0;
  switch (variant) {
    case VaeVariant::kStandard:
      kl_weight = 1.0;
      break;
    case VaeVariant::kBeta:
      kl_weight = hp.beta;
      break;
    case VaeVariant::kFactor:
      kl_weight = 1.0;
      break;
    case VaeVariant::kDipTwo:
      kl_weight = 1.0;
      break;
    case VaeVariant::kBetaTc:
      kl_weight = 0.0;  // replaced by the three-way decomposition
      break;
  }

  if (kl_weight != 0.0 && with_grads) {
    for (std::size_t i = 0; i < mb; ++i) {
      for (std::size_t d = 0; d < d_lat; ++d) {
        g_mu[i][d] += kl_weight * inv_m * work[i].mu[d];
        g_lv[i][d] += kl_weight * inv_m * 0.5 * (std::exp(work[i].lv[d]) - 1.0);
      }
    }
  }

  double regularizer = kl_weight * terms.kl;

  if (variant == VaeVariant::kBetaTc) {
    // Minibatch-weighted estimates of the mutual-information / total
    // correlation / dimension-wise KL split. l[i][j][d] is the Gaussian log
    // density of sample i's code coordinate d under sample j's posterior.
    const double log_mn =
        std::log(static_cast<double>(mb) * static_cast<double>(dataset_size));
    const double lambda = hp.tc_weight;

    std::vector<Matrix> l(mb, Matrix(mb, d_lat));
    Matrix l_joint(mb, mb);  // sums over d
    for (std::size_t i = 0; i < mb; ++i) {
      for (std::size_t j = 0; j < mb; ++j) {
        double s = 0.0;
        for (std::size_t d = 0; d < d_lat; ++d) {
          const double lvjd = work[j].lv[d];
          const double diff = work[i].z[d] - work[j].mu[d];
          const double val = -0.5 * (kLog2Pi + lvjd + diff * diff * std::exp(-lvjd));
          l[i](j, d) = val;
          s += val;
        }
        l_joint(i, j) = s;
      }
    }

    Vec lse_joint(mb);          // logsumexp_j l_joint(i, j)
    Matrix lse_dim(mb, d_lat);  // logsumexp_j l[i](j, d)
    for (std::size_t i = 0; i < mb; ++i) {
      lse_joint[i] = logsumexp(l_joint.row(i));
      for (std::size_t d = 0; d < d_lat; ++d) {
        Vec col(mb);
        for (std::size_t j = 0; j < mb; ++j) col[j] = l[i](j, d);
        lse_dim(i, d) = logsumexp(col);
      }
    }

    double mi = 0.0, tc = 0.0, dwkl = 0.0;
    for (std::size_t i = 0; i < mb; ++i) {
      double log_qzx = l_joint(i, i);
      double log_qz = lse_joint[i] - log_mn;
      double log_prod = 0.0;
      double log_prior = 0.0;
      for (std::size_t d = 0; d < d_lat; ++d) {
        log_prod += lse_dim(i, d) - log_mn;
        log_prior += -0.5 * (kLog2Pi + work[i].z[d] * work[i].z[d]);
      }
      mi += (log_qzx - log_qz) * inv_m;
      tc += (log_qz - log_prod) * inv_m;
      dwkl += (log_prod - log_prior) * inv_m;
    }
    terms.mi = mi;
    terms.tc = tc;
    terms.dwkl = dwkl;
    regularizer = mi + lambda * tc + dwkl;

    if (with_grads) {
      // Variable part: (1/M) sum_i [l_ii + (lambda-1) LSE_i
      //                             + (1-lambda) sum_d LSE_id - log p(z_i)].
      for (std::size_t i = 0; i < mb; ++i) {
        Vec w_joint(mb);
        for (std::size_t j = 0; j < mb; ++j)
          w_joint[j] = std::exp(l_joint(i, j) - lse_joint[i]);
        for (std::size_t d = 0; d < d_lat; ++d) {
          Vec w_dim(mb);
          for (std::size_t j = 0; j < mb; ++j) w_dim[j] = std::exp(l[i](j, d) - lse_dim(i, d));

          // dl_ijd / dz_id = -r_ijd, dl_ijd / dmu_jd = r_ijd,
          // dl_ijd / dlv_jd = -0.5 + 0.5 (z_id - mu_jd) r_ijd.
          double dz = 0.0;
          for (std::size_t j = 0; j < mb; ++j) {
            const double r = (work[i].z[d] - work[j].mu[d]) * std::exp(-work[j].lv[d]);
            double coeff = 0.0;
            if (j == i) coeff += 1.0;                    // l_ii term
            coeff += (lambda - 1.0) * w_joint[j];        // LSE_i term
            coeff += (1.0 - lambda) * w_dim[j];          // LSE_id term
            dz += coeff * (-r);

            const double dmu = coeff * r;
            const double dlv =
                coeff * (-0.5 + 0.5 * (work[i].z[d] - work[j].mu[d]) * r);
            g_mu[j][d] += inv_m * dmu;
            g_lv[j][d] += inv_m * dlv;
          }
          dz += work[i].z[d];  // -log p(z) contributes +z
          g_z[i][d] += inv_m * dz;
        }
      }
    }
  }

  if (variant == VaeVariant::kDipTwo) {
    // Aggregate posterior covariance: Cov(mu) + batch mean of diag(exp(lv)).
    Vec mu_bar(d_lat, 0.0);
    for (std::size_t i = 0; i < mb; ++i)
      for (std::size_t d = 0; d < d_lat; ++d) mu_bar[d] += work[i].mu[d] * inv_m;
    Matrix cov(d_lat, d_lat);
    for (std::size_t i = 0; i < mb; ++i)
      for (std::size_t d = 0; d < d_lat; ++d)
        for (std::size_t e = 0; e < d_lat; ++e)
          cov(d, e) += inv_m * (work[i].mu[d] - mu_bar[d]) * (work[i].mu[e] - mu_bar[e]);
    for (std::size_t i = 0; i < mb; ++i)
      for (std::size_t d = 0; d < d_lat; ++d) cov(d, d) += inv_m * std::exp(work[i].lv[d]);

    for (std::size_t d = 0; d < d_lat; ++d)
      for (std::size_t e = 0; e < d_lat; ++e) {
        if (d == e)
          terms.dip_d += (cov(d, d) - 1.0) * (cov(d, d) - 1.0);
        else
          terms.dip_od += cov(d, e) * cov(d, e);
      }
    regularizer += hp.lambda_od * terms.dip_od + hp.lambda_d * terms.dip_d;

    if (with_grads) {
      // dP/dC as a symmetric matrix, then chain into mu and logvar.
      Matrix a(d_lat, d_lat);
      for (std::size_t d = 0; d < d_lat; ++d)
        for (std::size_t e = 0; e < d_lat; ++e)
          a(d, e) = (d == e) ? 2.0 * hp.lambda_d * (cov(d, d) - 1.0)
                             : 2.0 * hp.lambda_od * cov(d, e);
      for (std::size_t i = 0; i < mb; ++i) {
        for (std::size_t d = 0; d < d_lat; ++d) {
          double acc = 0.0;
          for (std::size_t e = 0; e < d_lat; ++e)
            acc += a(d, e) * (work[i].mu[e] - mu_bar[e]);
          g_mu[i][d] += 2.0 * inv_m * acc;
          g_lv[i][d] += a(d, d) * inv_m * std::exp(work[i].lv[d]);
        }
      }
    }
  }

  if (variant == VaeVariant::kFactor) {
    if (m.discriminator.empty())
      throw std::logic_error("vae_batch_loss: factor variant without discriminator");
    for (std::size_t i = 0; i < mb; ++i) {
      ForwardCache dcache;
      const Vec logits = forward(m.discriminator, work[i].z, with_grads ? &dcache : nullptr);
      const double ratio = logits[0] - logits[1];
      terms.tc_disc += ratio * inv_m;
      if (with_grads && hp.gamma != 0.0) {
        const Vec out_grad = {hp.gamma * inv_m, -hp.gamma * inv_m};
        // Discriminator parameters stay frozen in the generator step.
        Vec dz = backward(m.discriminator, dcache, out_grad, nullptr);
        axpy(1.0, dz, g_z[i]);
      }
    }
    regularizer += hp.gamma * terms.tc_disc;
  }

  terms.total = terms.recon_sum + regularizer;

  if (!with_grads) return terms;

  // Backward pass per sample.
  for (std::size_t i = 0; i < mb; ++i) {
    SampleWork& w = work[i];
    const auto xrow = X.row(rows[i]);
    Vec g_xhat(n_feat);
    for (std::size_t j = 0; j < n_feat; ++j)
      g_xhat[j] = 2.0 * inv_m * (w.xhat[j] - xrow[j]);
    Vec gz_dec = backward(m.decoder, w.dec_cache, g_xhat, &grads->decoder);
    axpy(1.0, gz_dec, g_z[i]);

    // Reparameterization chain: dz/dmu = 1, dz/dlv = 0.5 (z - mu).
    for (std::size_t d = 0; d < d_lat; ++d) {
      g_mu[i][d] += g_z[i][d];
      g_lv[i][d] += g_z[i][d] * 0.5 * (w.z[d] - w.mu[d]);
    }

    // Linear heads backward (shared encoder trunk input).
    Vec g_h = matvec_transposed(m.mu_head.weight, g_mu[i]);
    const Vec g_h2 = matvec_transposed(m.logvar_head.weight, g_lv[i]);
    axpy(1.0, g_h2, g_h);
    add_outer(grads->mu_head.dweight, 1.0, g_mu[i], w.h);
    axpy(1.0, g_mu[i], grads->mu_head.dbias);
    add_outer(grads->logvar_head.dweight, 1.0, g_lv[i], w.h);
    axpy(1.0, g_lv[i], grads->logvar_head.dbias);

    backward(m.encoder, w.enc_cache, g_h, &grads->encoder);
  }
  return terms;
}

}  // namespace

LossTerms vae_batch_loss(const TrainedModel& m, const Matrix& X,
                         std::span<const std::size_t> rows, const Matrix& eps,
                         std::size_t dataset_size) {
  return batch_core(m, X, rows, eps, dataset_size, nullptr, nullptr);
}

LossTerms vae_batch_loss_and_grads(const TrainedModel& m, const Matrix& X,
                                   std::span<const std::size_t> rows, const Matrix& eps,
                                   std::size_t dataset_size, VaeGrads* grads) {
  require(grads != nullptr, "vae_batch_loss_and_grads: null gradient sink");
  return batch_core(m, X, rows, eps, dataset_size, grads, nullptr);
}

double factorvae_discriminator_step(TrainedModel& m, const Matrix& z_batch, SeededRng& rng,
                                    AdamOptimizer& disc_opt) {
  if (m.spec.variant != VaeVariant::kFactor || m.discriminator.empty())
    throw std::logic_error("factorvae_discriminator_step: variant has no discriminator");
  require(z_batch.rows >= 1 && z_batch.cols == m.spec.latent_dim,
          "factorvae_discriminator_step: bad code batch");

  const Matrix z_perm = permute_dims_across_batch(z_batch, rng);
  const std::size_t mb = z_batch.rows;
  const double inv_total = 1.0 / static_cast<double>(2 * mb);

  auto grads = make_zero_grads(m.discriminator);
  double loss = 0.0;
  auto process = [&](const Matrix& batch, int label) {
    for (std::size_t i = 0; i < batch.rows; ++i) {
      ForwardCache cache;
      const Vec logits = forward(m.discriminator, batch.row_vec(i), &cache);
      const double mx = std::max(logits[0], logits[1]);
      const double lse = mx + std::log(std::exp(logits[0] - mx) + std::exp(logits[1] - mx));
      loss += (lse - logits[label]) * inv_total;
      Vec g = {std::exp(logits[0] - lse), std::exp(logits[1] - lse)};
      g[label] -= 1.0;  // softmax cross-entropy gradient
      for (double& v : g) v *= inv_total;
      backward(m.discriminator, cache, g, &grads);
    }
  };
  process(z_batch, 0);   // codes from the posterior
  process(z_perm, 1);    // dimension-permuted codes

  disc_opt.step(param_views(m.discriminator), grad_views(grads));
  return loss;
}

namespace {

std::vector<std::span<double>> generator_params(TrainedModel& m) {
  auto views = param_views(m.encoder);
  views.emplace_back(m.mu_head.weight.data);
  views.emplace_back(m.mu_head.bias);
  views.emplace_back(m.logvar_head.weight.data);
  views.emplace_back(m.logvar_head.bias);
  auto dec = param_views(m.decoder);
  views.insert(views.end(), dec.begin(), dec.end());
  return views;
}

std::vector<std::span<const double>> generator_grad_views(const VaeGrads& g) {
  auto views = grad_views(g.encoder);
  views.emplace_back(g.mu_head.dweight.data);
  views.emplace_back(g.mu_head.dbias);
  views.emplace_back(g.logvar_head.dweight.data);
  views.emplace_back(g.logvar_head.dbias);
  auto dec = grad_views(g.decoder);
  views.insert(views.end(), dec.begin(), dec.end());
  return views;
}

std::size_t generator_param_count(const TrainedModel& m) {
  return param_count(m.encoder) + param_count(m.decoder) +
         m.mu_head.weight.data.size() + m.mu_head.bias.size() +
         m.logvar_head.weight.data.size() + m.logvar_head.bias.size();
}

}  // namespace

double mean_decode_mse(const TrainedModel& m, const Matrix& X,
                       std::span<const std::size_t> rows) {
  require(!rows.empty(), "mean_decode_mse: no rows");
  double total = 0.0;
  for (std::size_t r : rows) {
    require(r < X.rows, "mean_decode_mse: row index out of range");
    const Vec mu = encode_mu(m, X.row(r));
    const Vec xhat = decode(m, mu);
    double s = 0.0;
    for (std::size_t j = 0; j < X.cols; ++j) {
      const double diff = xhat[j] - X(r, j);
      s += diff * diff;
    }
    total += s / static_cast<double>(X.cols);
  }
  return total / static_cast<double>(rows.size());
}

TrainedModel train_vae(const VaeArchitectureSpec& spec_in, const Matrix& X,
                       const TrainConfig& cfg) {
  VaeArchitectureSpec spec = spec_in;
  if (spec.input_dim == 0) spec.input_dim = X.cols;
  require(spec.input_dim == X.cols, "train_vae: spec input_dim disagrees with data");
  require(X.rows >= 4, "train_vae: need at least 4 rows");
  require(cfg.batch_size >= 2, "train_vae: batch_size must be at least 2");
  require(cfg.plateau_factor > 0.0 && cfg.plateau_factor < 1.0,
          "train_vae: plateau_factor outside (0, 1)");

  TrainedModel m = init_model(spec, cfg.seed);

  const SplitIndices split = heldout_split(X.rows, cfg.heldout_fraction, cfg.seed);
  const std::vector<std::size_t>& train_rows = split.train;
  const std::vector<std::size_t>& monitor_rows =
      split.heldout.empty() ? split.train : split.heldout;
  const std::size_t d_lat = spec.latent_dim;

  // Evaluation noise is drawn once and reused every epoch so the monitored
  // loss is comparable across epochs.
  Matrix eval_eps(monitor_rows.size(), d_lat);
  {
    SeededRng eval_rng(cfg.seed ^ kEvalSalt);
    for (double& v : eval_eps.data) v = eval_rng.normal();
  }

  SeededRng rng(cfg.seed ^ kTrainSalt);
  AdamOptimizer opt(generator_param_count(m), AdamConfig{.lr = cfg.lr});
  AdamOptimizer disc_opt(param_count(m.discriminator), AdamConfig{.lr = cfg.disc_lr});

  const bool needs_pairs =
      spec.variant == VaeVariant::kBetaTc || spec.variant == VaeVariant::kDipTwo;

  auto evaluate_monitor = [&]() {
    double total = 0.0;
    std::size_t counted = 0;
    std::size_t pos = 0;
    while (pos < monitor_rows.size()) {
      const std::size_t take = std::min(cfg.batch_size, monitor_rows.size() - pos);
      if (needs_pairs && take < 2 && counted > 0) break;  // drop unusable tail
      std::vector<std::size_t> rows(monitor_rows.begin() + static_cast<std::ptrdiff_t>(pos),
                                    monitor_rows.begin() + static_cast<std::ptrdiff_t>(pos + take));
      Matrix eps(take, d_lat);
      for (std::size_t i = 0; i < take; ++i)
        std::copy(eval_eps.row(pos + i).begin(), eval_eps.row(pos + i).end(),
                  eps.row(i).begin());
      const LossTerms t = vae_batch_loss(m, X, rows, eps, train_rows.size());
      total += t.total * static_cast<double>(take);
      counted += take;
      pos += take;
    }
    return total / static_cast<double>(counted);
  };

  double best = std::numeric_limits<double>::infinity();
  std::size_t plateau_wait = 0;
  std::size_t stop_wait = 0;
  std::size_t epochs_run = 0;

  std::vector<std::size_t> order = train_rows;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    std::size_t pos = 0;
    while (pos < order.size()) {
      const std::size_t take = std::min(cfg.batch_size, order.size() - pos);
      if (needs_pairs && take < 2) break;  // single-row tail; reshuffled next epoch
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                    order.begin() + static_cast<std::ptrdiff_t>(pos + take));
      pos += take;

      Matrix eps(take, d_lat);
      for (double& v : eps.data) v = rng.normal();

      VaeGrads grads = make_zero_vae_grads(m);
      Matrix z_batch;
      const LossTerms t =
          batch_core(m, X, rows, eps, train_rows.size(), &grads, &z_batch);
      if (!std::isfinite(t.total))
        throw std::runtime_error("train_vae: non-finite loss at epoch " +
                                 std::to_string(epoch));
      opt.step(generator_params(m), generator_grad_views(grads));
      if (spec.variant == VaeVariant::kFactor)
        factorvae_discriminator_step(m, z_batch, rng, disc_opt);
    }
    epochs_run = epoch + 1;

    const double monitored = evaluate_monitor();
    if (!std::isfinite(monitored))
      throw std::runtime_error("train_vae: non-finite held-out loss at epoch " +
                               std::to_string(epoch));
    if (monitored < best - 1e-12) {
      best = monitored;
      plateau_wait = 0;
      stop_wait = 0;
    } else {
      ++plateau_wait;
      ++stop_wait;
    }
    if (plateau_wait >= cfg.plateau_patience) {
      opt.set_lr(opt.lr() * cfg.plateau_factor);
      plateau_wait = 0;
    }
    if (stop_wait >= cfg.early_stop_patience) break;
  }

  m.epochs_run = epochs_run;
  m.converged = epochs_run > 0;
  m.final_mse = mean_decode_mse(m, X, monitor_rows);
  return m;
}

namespace {

// Checkpoint layout (little-endian, fixed field order):
//   magic "VCIRCKP1" | u32 version | u8 variant | u64 seed | f64 final_mse |
//   u64 epochs_run | u8 converged | u64 input_dim | u64 latent_dim |
//   u64 width_count | widths... | 5 x f64 hyper | u8 has_discriminator |
//   chains: encoder, mu_head, logvar_head, decoder[, discriminator]
// Each chain: u64 layer_count, then per layer u8 activation | u64 rows |
// u64 cols | weights f64... | u64 bias_len | bias f64...
constexpr char kMagic[8] = {'V', 'C', 'I', 'R', 'C', 'K', 'P', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("load_model: truncated checkpoint");
  return v;
}

void write_layer(std::ofstream& out, const DenseLayer& l) {
  write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(l.activation));
  write_pod<std::uint64_t>(out, l.weight.rows);
  write_pod<std::uint64_t>(out, l.weight.cols);
  out.write(reinterpret_cast<const char*>(l.weight.data.data()),
            static_cast<std::streamsize>(l.weight.data.size() * sizeof(double)));
  write_pod<std::uint64_t>(out, l.bias.size());
  out.write(reinterpret_cast<const char*>(l.bias.data()),
            static_cast<std::streamsize>(l.bias.size() * sizeof(double)));
}

DenseLayer read_layer(std::ifstream& in) {
  DenseLayer l;
  l.activation = static_cast<Activation>(read_pod<std::uint8_t>(in));
  const auto rows = read_pod<std::uint64_t>(in);
  const auto cols = read_pod<std::uint64_t>(in);
  l.weight = Matrix(rows, cols);
  in.read(reinterpret_cast<char*>(l.weight.data.data()),
          static_cast<std::streamsize>(l.weight.data.size() * sizeof(double)));
  const auto blen = read_pod<std::uint64_t>(in);
  l.bias.resize(blen);
  in.read(reinterpret_cast<char*>(l.bias.data()),
          static_cast<std::streamsize>(l.bias.size() * sizeof(double)));
  if (!in) throw std::runtime_error("load_model: truncated layer data");
  return l;
}

void write_chain(std::ofstream& out, const std::vector<DenseLayer>& chain) {
  write_pod<std::uint64_t>(out, chain.size());
  for (const auto& l : chain) write_layer(out, l);
}

std::vector<DenseLayer> read_chain(std::ifstream& in) {
  const auto n = read_pod<std::uint64_t>(in);
  std::vector<DenseLayer> chain;
  chain.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) chain.push_back(read_layer(in));
  return chain;
}

}  // namespace

void save_model(const TrainedModel& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_model: cannot open " + path);
  out.write(kMagic, sizeof(kMagic));
  write_pod(out, kVersion);
  write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(m.spec.variant));
  write_pod<std::uint64_t>(out, m.seed);
  write_pod<double>(out, m.final_mse);
  write_pod<std::uint64_t>(out, m.epochs_run);
  write_pod<std::uint8_t>(out, m.converged ? 1 : 0);
  write_pod<std::uint64_t>(out, m.spec.input_dim);
  write_pod<std::uint64_t>(out, m.spec.latent_dim);
  write_pod<std::uint64_t>(out, m.spec.encoder_widths.size());
  for (std::size_t w : m.spec.encoder_widths) write_pod<std::uint64_t>(out, w);
  write_pod<double>(out, m.spec.hyper.beta);
  write_pod<double>(out, m.spec.hyper.tc_weight);
  write_pod<double>(out, m.spec.hyper.gamma);
  write_pod<double>(out, m.spec.hyper.lambda_od);
  write_pod<double>(out, m.spec.hyper.lambda_d);
  write_pod<std::uint8_t>(out, m.discriminator.empty() ? 0 : 1);
  write_chain(out, m.encoder);
  write_chain(out, {m.mu_head});
  write_chain(out, {m.logvar_head});
  write_chain(out, m.decoder);
  if (!m.discriminator.empty()) write_chain(out, m.discriminator);
  if (!out) throw std::runtime_error("save_model: write failed for " + path);
}

TrainedModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_model: cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::invalid_argument("load_model: not a model checkpoint: " + path);
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kVersion)
    throw std::invalid_argument("load_model: unsupported checkpoint version");
  TrainedModel m;
  m.spec.variant = static_cast<VaeVariant>(read_pod<std::uint8_t>(in));
  m.seed = read_pod<std::uint64_t>(in);
  m.final_mse = read_pod<double>(in);
  m.epochs_run = read_pod<std::uint64_t>(in);
  m.converged = read_pod<std::uint8_t>(in) != 0;
  m.spec.input_dim = read_pod<std::uint64_t>(in);
  m.spec.latent_dim = read_pod<std::uint64_t>(in);
  const auto n_widths = read_pod<std::uint64_t>(in);
  m.spec.encoder_widths.resize(n_widths);
  for (auto& w : m.spec.encoder_widths) w = read_pod<std::uint64_t>(in);
  m.spec.hyper.beta = read_pod<double>(in);
  m.spec.hyper.tc_weight = read_pod<double>(in);
  m.spec.hyper.gamma = read_pod<double>(in);
  m.spec.hyper.lambda_od = read_pod<double>(in);
  m.spec.hyper.lambda_d = read_pod<double>(in);
  const bool has_disc = read_pod<std::uint8_t>(in) != 0;
  m.encoder = read_chain(in);
  auto mu_chain = read_chain(in);
  auto lv_chain = read_chain(in);
  if (mu_chain.size() != 1 || lv_chain.size() != 1)
    throw std::invalid_argument("load_model: malformed head chains");
  m.mu_head = std::move(mu_chain[0]);
  m.logvar_head = std::move(lv_chain[0]);
  m.decoder = read_chain(in);
  if (has_disc) m.discriminator = read_chain(in);
  return m;
}

}  // namespace vaecirc
