#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "vaecirc/data.hpp"
#include "vaecirc/rng.hpp"
#include "vaecirc/vae.hpp"

using namespace vaecirc;

namespace {

VaeArchitectureSpec small_spec(VaeVariant v) {
  VaeArchitectureSpec s;
  s.variant = v;
  s.input_dim = 5;
  s.encoder_widths = {6, 5};
  s.latent_dim = 3;
  return s;
}

Matrix gaussian_rows(std::size_t n, std::size_t f, std::uint64_t seed) {
  SeededRng rng(seed);
  Matrix x(n, f);
  for (double& v : x.data) v = rng.normal();
  return x;
}

Matrix random_eps(std::size_t n, std::size_t d, std::uint64_t seed) {
  SeededRng rng(seed);
  Matrix e(n, d);
  for (double& v : e.data) v = rng.normal();
  return e;
}

std::vector<std::size_t> iota_rows(std::size_t n) {
  std::vector<std::size_t> r(n);
  for (std::size_t i = 0; i < n; ++i) r[i] = i;
  return r;
}

double log_normal_density(double x, double mean, double logvar) {
  const double diff = x - mean;
  return -0.5 * (std::log(2.0 * std::numbers::pi) + logvar + diff * diff * std::exp(-logvar));
}

void zero_parameters(TrainedModel& m) {
  auto wipe = [](std::vector<DenseLayer>& chain) {
    for (auto& l : chain) {
      for (double& v : l.weight.data) v = 0.0;
      for (double& v : l.bias) v = 0.0;
    }
  };
  wipe(m.encoder);
  wipe(m.decoder);
  for (double& v : m.mu_head.weight.data) v = 0.0;
  for (double& v : m.mu_head.bias) v = 0.0;
  for (double& v : m.logvar_head.weight.data) v = 0.0;
  for (double& v : m.logvar_head.bias) v = 0.0;
}

}  // namespace

TEST_CASE("all-zero network encodes everything to the prior parameters") {
  auto m = init_model(small_spec(VaeVariant::kStandard), 1);
  zero_parameters(m);
  const Vec x = {1.0, -2.0, 0.5, 3.0, 0.0};
  const auto enc = encode(m, x);
  for (double v : enc.mu) CHECK(v == 0.0);
  for (double v : enc.logvar) CHECK(v == 0.0);
}

TEST_CASE("encode is deterministic and matches a manual forward replay") {
  const auto m = init_model(small_spec(VaeVariant::kStandard), 9);
  const Vec x = {0.3, -1.1, 0.2, 0.9, -0.4};
  const auto a = encode(m, x);
  const auto b = encode(m, x);
  CHECK(a.mu == b.mu);
  CHECK(a.logvar == b.logvar);
  // Manual replay through the public layer primitives.
  Vec h = x;
  for (const auto& layer : m.encoder) h = layer_forward(layer, h);
  const Vec mu = layer_forward(m.mu_head, h);
  for (std::size_t d = 0; d < mu.size(); ++d) CHECK(mu[d] == a.mu[d]);
}

TEST_CASE("reparameterization follows the closed forms") {
  const Vec mu = {1.0, -2.0};
  const Vec lv0 = {0.0, 0.0};
  const Vec eps0 = {0.0, 0.0};
  CHECK(reparameterize(mu, lv0, eps0) == mu);
  const Vec ones = {1.0, 1.0};
  const Vec z1 = reparameterize(mu, lv0, ones);
  CHECK(z1[0] == doctest::Approx(2.0));
  CHECK(z1[1] == doctest::Approx(-1.0));
  const Vec lv4 = {std::log(4.0), std::log(4.0)};
  const Vec z2 = reparameterize(mu, lv4, ones);
  CHECK(z2[0] == doctest::Approx(3.0));   // mu + 2 * eps
  CHECK(z2[1] == doctest::Approx(0.0));
}

TEST_CASE("reparameterized coordinates reproduce the posterior variance") {
  SeededRng rng(123);
  const Vec mu = {0.5, -1.0};
  const Vec lv = {std::log(0.25), std::log(2.0)};
  const int n = 100000;
  Vec s(2, 0.0), s2(2, 0.0);
  for (int i = 0; i < n; ++i) {
    const Vec eps = {rng.normal(), rng.normal()};
    const Vec z = reparameterize(mu, lv, eps);
    for (int d = 0; d < 2; ++d) {
      s[d] += z[d];
      s2[d] += z[d] * z[d];
    }
  }
  for (int d = 0; d < 2; ++d) {
    const double m = s[d] / n;
    const double var = s2[d] / n - m * m;
    CHECK(var == doctest::Approx(std::exp(lv[d])).epsilon(0.05));
  }
}

TEST_CASE("kl against the standard normal matches closed forms") {
  CHECK(kl_to_standard_normal(Vec{0.0}, Vec{0.0}) == 0.0);
  CHECK(kl_to_standard_normal(Vec{1.0}, Vec{0.0}) == doctest::Approx(0.5));
  const double expected = 0.5 * (4.0 - std::log(4.0) - 1.0);
  CHECK(kl_to_standard_normal(Vec{0.0}, Vec{std::log(4.0)}) ==
        doctest::Approx(expected).epsilon(1e-12));
  CHECK(expected == doctest::Approx(0.8069).epsilon(1e-4));
  SeededRng rng(5);
  for (int t = 0; t < 100; ++t) {
    const Vec mu = {rng.normal(), rng.normal()};
    const Vec lv = {rng.normal(), rng.normal()};
    CHECK(kl_to_standard_normal(mu, lv) >= 0.0);
  }
}

TEST_CASE("loss reduction identities tie the variants to the plain objective") {
  const Matrix x = gaussian_rows(8, 5, 21);
  const Matrix eps = random_eps(8, 3, 22);
  const auto rows = iota_rows(8);

  auto spec_std = small_spec(VaeVariant::kStandard);
  const auto m_std = init_model(spec_std, 77);
  const auto base = vae_batch_loss(m_std, x, rows, eps, 100);

  auto spec_beta = small_spec(VaeVariant::kBeta);
  spec_beta.hyper.beta = 1.0;
  const auto m_beta = init_model(spec_beta, 77);
  CHECK(vae_batch_loss(m_beta, x, rows, eps, 100).total == base.total);

  auto spec_dip = small_spec(VaeVariant::kDipTwo);
  spec_dip.hyper.lambda_od = 0.0;
  spec_dip.hyper.lambda_d = 0.0;
  const auto m_dip = init_model(spec_dip, 77);
  CHECK(vae_batch_loss(m_dip, x, rows, eps, 100).total == base.total);

  auto spec_factor = small_spec(VaeVariant::kFactor);
  spec_factor.hyper.gamma = 0.0;
  const auto m_factor = init_model(spec_factor, 77);
  CHECK(vae_batch_loss(m_factor, x, rows, eps, 100).total == base.total);

  auto spec_b4 = small_spec(VaeVariant::kBeta);
  spec_b4.hyper.beta = 4.0;
  const auto m_b4 = init_model(spec_b4, 77);
  const auto quad = vae_batch_loss(m_b4, x, rows, eps, 100);
  CHECK(quad.total == doctest::Approx(base.recon_sum + 4.0 * base.kl).epsilon(1e-12));
}

TEST_CASE("covariance-penalized loss vanishes exactly at identity covariance") {
  // Bypass the network: evaluate the penalty arithmetic through a model whose
  // posterior is forced to mu = +-1 rows (covariance of means = diag after
  // centering) plus logvar chosen to top the diagonal up to one.
  auto spec = small_spec(VaeVariant::kDipTwo);
  auto m = init_model(spec, 3);
  zero_parameters(m);
  // mu = (w x); x row0 = e0 * c, row1 = -e0 * c. Choose weights so mu spans
  // dimension 0 with spread 0.5, others 0; logvar bias fills the gap.
  m.mu_head.weight(0, 0) = 1.0;
  for (auto& l : m.encoder) {  // identity-ish first column path
    l.weight(0, 0) = 1.0;
  }
  const double spread = 0.5;
  Matrix x(2, 5);
  x(0, 0) = spread;
  x(1, 0) = 0.0;  // relu kills negatives; use {spread, 0} instead of +-spread
  // Var of mu_0 over the batch = (spread/2)^2.
  const double mu_var = spread * spread / 4.0;
  m.logvar_head.bias[0] = std::log(1.0 - mu_var);
  // Dimensions 1..2 have mu = 0, so exp(logvar) must be exactly 1.
  const auto rows = iota_rows(2);
  const Matrix eps = Matrix(2, 3);
  const auto t = vae_batch_loss(m, x, rows, eps, 10);
  CHECK(t.dip_od == doctest::Approx(0.0).scale(1.0));
  CHECK(t.dip_d == doctest::Approx(0.0).scale(1.0));
}

TEST_CASE("total-correlation decomposition matches a brute-force evaluation") {
  auto spec = small_spec(VaeVariant::kBetaTc);
  spec.hyper.tc_weight = 6.0;
  const auto m = init_model(spec, 13);
  const std::size_t mb = 4, d_lat = 3, n_data = 40;
  const Matrix x = gaussian_rows(mb, 5, 31);
  const Matrix eps = random_eps(mb, d_lat, 32);
  const auto rows = iota_rows(mb);
  const auto got = vae_batch_loss(m, x, rows, eps, n_data);

  // Independent evaluation straight from the estimator definition.
  std::vector<Vec> mu(mb), lv(mb), z(mb);
  for (std::size_t i = 0; i < mb; ++i) {
    const auto enc = encode(m, x.row(i));
    mu[i] = enc.mu;
    lv[i] = enc.logvar;
    z[i] = reparameterize(mu[i], lv[i], eps.row(i));
  }
  const double log_mn = std::log(static_cast<double>(mb) * static_cast<double>(n_data));
  double mi = 0.0, tc = 0.0, dwkl = 0.0;
  for (std::size_t i = 0; i < mb; ++i) {
    double q_zx = 0.0;
    for (std::size_t d = 0; d < d_lat; ++d)
      q_zx += log_normal_density(z[i][d], mu[i][d], lv[i][d]);
    double sum_joint = 0.0;
    Vec sum_dim(d_lat, 0.0);
    for (std::size_t j = 0; j < mb; ++j) {
      double joint = 0.0;
      for (std::size_t d = 0; d < d_lat; ++d) {
        const double ld = log_normal_density(z[i][d], mu[j][d], lv[j][d]);
        joint += ld;
        sum_dim[d] += std::exp(ld);
      }
      sum_joint += std::exp(joint);
    }
    const double log_qz = std::log(sum_joint) - log_mn;
    double log_prod = 0.0, log_prior = 0.0;
    for (std::size_t d = 0; d < d_lat; ++d) {
      log_prod += std::log(sum_dim[d]) - log_mn;
      log_prior += log_normal_density(z[i][d], 0.0, 0.0);
    }
    mi += (q_zx - log_qz) / mb;
    tc += (log_qz - log_prod) / mb;
    dwkl += (log_prod - log_prior) / mb;
  }
  CHECK(got.mi == doctest::Approx(mi).epsilon(1e-9));
  CHECK(got.tc == doctest::Approx(tc).epsilon(1e-9));
  CHECK(got.dwkl == doctest::Approx(dwkl).epsilon(1e-9));
  CHECK(got.total ==
        doctest::Approx(got.recon_sum + mi + 6.0 * tc + dwkl).epsilon(1e-9));
}

TEST_CASE("pair-dependent variants reject single-row batches") {
  const Matrix x = gaussian_rows(3, 5, 1);
  const Matrix eps = random_eps(1, 3, 2);
  const std::vector<std::size_t> one = {0};
  for (VaeVariant v : {VaeVariant::kBetaTc, VaeVariant::kDipTwo}) {
    const auto m = init_model(small_spec(v), 4);
    CHECK_THROWS_AS(vae_batch_loss(m, x, one, eps, 10), std::invalid_argument);
  }
  // The plain variant accepts singletons.
  const auto m = init_model(small_spec(VaeVariant::kStandard), 4);
  CHECK_NOTHROW(vae_batch_loss(m, x, one, eps, 10));
}

TEST_CASE("generator gradients match finite differences for every variant") {
  const Matrix x = gaussian_rows(5, 5, 51);
  const Matrix eps = random_eps(5, 3, 52);
  const auto rows = iota_rows(5);
  const std::size_t n_data = 50;

  for (VaeVariant v : {VaeVariant::kStandard, VaeVariant::kBeta, VaeVariant::kBetaTc,
                       VaeVariant::kFactor, VaeVariant::kDipTwo}) {
    const std::string which = variant_name(v);
    CAPTURE(which);
    auto m = init_model(small_spec(v), 61);
    VaeGrads grads = make_zero_vae_grads(m);
    vae_batch_loss_and_grads(m, x, rows, eps, n_data, &grads);

    auto probe = [&](double* param, double analytic) {
      const double h = 1e-5;
      const double saved = *param;
      *param = saved + h;
      const double lp = vae_batch_loss(m, x, rows, eps, n_data).total;
      *param = saved - h;
      const double lm = vae_batch_loss(m, x, rows, eps, n_data).total;
      *param = saved;
      const double fd = (lp - lm) / (2.0 * h);
      CHECK(analytic == doctest::Approx(fd).epsilon(5e-4).scale(1.0));
    };

    // Sample a spread of coordinates from every parameter block.
    for (std::size_t li = 0; li < m.encoder.size(); ++li) {
      auto& w = m.encoder[li].weight.data;
      for (std::size_t k = 0; k < w.size(); k += std::max<std::size_t>(1, w.size() / 5))
        probe(&w[k], grads.encoder[li].dweight.data[k]);
      probe(&m.encoder[li].bias[0], grads.encoder[li].dbias[0]);
    }
    for (std::size_t k = 0; k < m.mu_head.weight.data.size();
         k += std::max<std::size_t>(1, m.mu_head.weight.data.size() / 4))
      probe(&m.mu_head.weight.data[k], grads.mu_head.dweight.data[k]);
    probe(&m.mu_head.bias[1], grads.mu_head.dbias[1]);
    for (std::size_t k = 0; k < m.logvar_head.weight.data.size();
         k += std::max<std::size_t>(1, m.logvar_head.weight.data.size() / 4))
      probe(&m.logvar_head.weight.data[k], grads.logvar_head.dweight.data[k]);
    probe(&m.logvar_head.bias[2], grads.logvar_head.dbias[2]);
    for (std::size_t li = 0; li < m.decoder.size(); ++li) {
      auto& w = m.decoder[li].weight.data;
      for (std::size_t k = 0; k < w.size(); k += std::max<std::size_t>(1, w.size() / 5))
        probe(&w[k], grads.decoder[li].dweight.data[k]);
      probe(&m.decoder[li].bias[0], grads.decoder[li].dbias[0]);
    }
  }
}

TEST_CASE("dimension permutation preserves per-dimension multisets") {
  SeededRng rng(7);
  Matrix z(6, 3);
  for (double& v : z.data) v = rng.normal();
  SeededRng prng(99);
  const Matrix p = permute_dims_across_batch(z, prng);
  for (std::size_t d = 0; d < 3; ++d) {
    Vec a, b;
    for (std::size_t i = 0; i < 6; ++i) {
      a.push_back(z(i, d));
      b.push_back(p(i, d));
    }
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
  }
  SeededRng prng2(99);
  const Matrix p2 = permute_dims_across_batch(z, prng2);
  CHECK(p.data == p2.data);
}

TEST_CASE("discriminator on indistinguishable classes settles at ln 2") {
  auto spec = small_spec(VaeVariant::kFactor);
  auto m = init_model(spec, 15);
  Matrix z(16, 3);
  for (std::size_t i = 0; i < z.rows; ++i)
    for (std::size_t d = 0; d < 3; ++d) z(i, d) = 0.7;  // identical codes
  AdamOptimizer opt(param_count(m.discriminator), AdamConfig{.lr = 1e-3});
  SeededRng rng(8);
  double loss = 0.0;
  for (int step = 0; step < 200; ++step) loss = factorvae_discriminator_step(m, z, rng, opt);
  // Identical inputs bound the cross-entropy below by ln 2; training
  // approaches the bound.
  CHECK(loss >= std::log(2.0) - 1e-9);
  CHECK(loss == doctest::Approx(std::log(2.0)).epsilon(0.02));
}

TEST_CASE("discriminator separates genuinely dependent dimensions") {
  // Codes whose dimensions are strongly correlated: permuting dimensions
  // breaks the dependence, so the discriminator can learn the difference.
  auto spec = small_spec(VaeVariant::kFactor);
  auto m = init_model(spec, 16);
  SeededRng data_rng(44);
  Matrix z(32, 3);
  for (std::size_t i = 0; i < z.rows; ++i) {
    const double u = data_rng.normal() * 2.0;
    for (std::size_t d = 0; d < 3; ++d) z(i, d) = u + 0.05 * data_rng.normal();
  }
  AdamOptimizer opt(param_count(m.discriminator), AdamConfig{.lr = 1e-3});
  SeededRng rng(9);
  double early = 0.0, late = 0.0;
  for (int step = 0; step < 150; ++step) {
    const double loss = factorvae_discriminator_step(m, z, rng, opt);
    if (step < 10) early += loss / 10.0;
    if (step >= 140) late += loss / 10.0;
  }
  CHECK(late < early);
  CHECK(late < std::log(2.0));
}

TEST_CASE("discriminator step refuses non-adversarial variants") {
  auto m = init_model(small_spec(VaeVariant::kStandard), 2);
  Matrix z(4, 3);
  AdamOptimizer opt(1, AdamConfig{});
  SeededRng rng(1);
  CHECK_THROWS_AS(factorvae_discriminator_step(m, z, rng, opt), std::logic_error);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  auto spec = small_spec(VaeVariant::kFactor);
  auto m = init_model(spec, 99);
  m.final_mse = 0.123456789123456789;
  m.epochs_run = 17;
  m.converged = true;
  const std::string path = "ckpt_roundtrip_test.bin";
  save_model(m, path);
  const auto back = load_model(path);
  std::remove(path.c_str());

  CHECK(back.spec.variant == m.spec.variant);
  CHECK(back.spec.input_dim == m.spec.input_dim);
  CHECK(back.spec.latent_dim == m.spec.latent_dim);
  CHECK(back.spec.encoder_widths == m.spec.encoder_widths);
  CHECK(back.seed == m.seed);
  CHECK(back.final_mse == m.final_mse);
  CHECK(back.epochs_run == m.epochs_run);
  CHECK(back.converged == m.converged);
  REQUIRE(back.encoder.size() == m.encoder.size());
  for (std::size_t i = 0; i < m.encoder.size(); ++i) {
    CHECK(back.encoder[i].weight.data == m.encoder[i].weight.data);
    CHECK(back.encoder[i].bias == m.encoder[i].bias);
    CHECK(back.encoder[i].activation == m.encoder[i].activation);
  }
  CHECK(back.mu_head.weight.data == m.mu_head.weight.data);
  CHECK(back.logvar_head.weight.data == m.logvar_head.weight.data);
  REQUIRE(back.decoder.size() == m.decoder.size());
  for (std::size_t i = 0; i < m.decoder.size(); ++i)
    CHECK(back.decoder[i].weight.data == m.decoder[i].weight.data);
  REQUIRE(back.discriminator.size() == m.discriminator.size());
  for (std::size_t i = 0; i < m.discriminator.size(); ++i)
    CHECK(back.discriminator[i].weight.data == m.discriminator[i].weight.data);
}

TEST_CASE("loading garbage fails loudly") {
  const std::string path = "bad_ckpt_test.bin";
  {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    std::fputs("definitely not a checkpoint", f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(load_model(path), std::invalid_argument);
  std::remove(path.c_str());
}

TEST_CASE("zero-epoch budget returns the initialized model unconverged") {
  const Matrix x = gaussian_rows(50, 5, 77);
  TrainConfig cfg;
  cfg.max_epochs = 0;
  cfg.seed = 5;
  const auto m = train_vae(small_spec(VaeVariant::kStandard), x, cfg);
  CHECK_FALSE(m.converged);
  CHECK(m.epochs_run == 0);
  CHECK(m.final_mse >= 0.0);
}

TEST_CASE("short training beats the constant-mean predictor on easy data") {
  // Two strongly coupled features: one latent dimension suffices.
  SeededRng rng(31);
  const std::size_t n = 240;
  Matrix x(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    const double f = rng.normal();
    x(i, 0) = f;
    x(i, 1) = 0.9 * f + 0.1 * rng.normal();
  }
  VaeArchitectureSpec spec;
  spec.variant = VaeVariant::kStandard;
  spec.input_dim = 2;
  spec.encoder_widths = {16};
  spec.latent_dim = 2;
  TrainConfig cfg;
  cfg.max_epochs = 60;
  cfg.batch_size = 32;
  cfg.seed = 7;
  const auto m = train_vae(spec, x, cfg);
  CHECK(m.converged);

  // Mean-predictor baseline on the same held-out rows.
  const auto split = heldout_split(n, cfg.heldout_fraction, cfg.seed);
  Vec col_mean(2, 0.0);
  for (std::size_t r : split.train)
    for (std::size_t c = 0; c < 2; ++c) col_mean[c] += x(r, c) / split.train.size();
  double baseline = 0.0;
  for (std::size_t r : split.heldout)
    for (std::size_t c = 0; c < 2; ++c)
      baseline += (x(r, c) - col_mean[c]) * (x(r, c) - col_mean[c]) / (2.0 * split.heldout.size());
  CHECK(m.final_mse < baseline);
}

TEST_CASE("training is reproducible per seed and varies across seeds") {
  const Matrix x = gaussian_rows(80, 5, 91);
  TrainConfig cfg;
  cfg.max_epochs = 3;
  cfg.batch_size = 16;
  cfg.seed = 11;
  const auto spec = small_spec(VaeVariant::kBeta);
  const auto a = train_vae(spec, x, cfg);
  const auto b = train_vae(spec, x, cfg);
  CHECK(a.final_mse == b.final_mse);
  CHECK(a.encoder[0].weight.data == b.encoder[0].weight.data);
  cfg.seed = 12;
  const auto c = train_vae(spec, x, cfg);
  CHECK(a.final_mse != c.final_mse);
}
