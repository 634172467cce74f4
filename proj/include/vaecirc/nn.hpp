#pragma once

// Fully-connected layers with explicit per-layer backward passes, plus the
// Adam optimizer. The architectures are fixed MLP chains, so there is no
// general tape; each chain keeps a forward cache and replays it in reverse.

#include <cstdint>
#include <span>
#include <vector>

#include "vaecirc/rng.hpp"
#include "vaecirc/tensor.hpp"

namespace vaecirc {

enum class Activation { kReLU, kIdentity };

struct DenseLayer {
  Matrix weight;  // out x in
  Vec bias;       // out
  Activation activation = Activation::kIdentity;

  std::size_t in_dim() const { return weight.cols; }
  std::size_t out_dim() const { return weight.rows; }
};

// Kaiming-uniform fan-in init: U(-sqrt(6/fan_in), +sqrt(6/fan_in)), zero bias.
DenseLayer make_dense(std::size_t in, std::size_t out, Activation act, SeededRng& rng);

struct ForwardCache {
  Vec input;
  std::vector<Vec> pre;   // pre-activation per layer
  std::vector<Vec> post;  // post-activation per layer
  std::uint64_t shape_signature = 0;
};

std::uint64_t chain_signature(const std::vector<DenseLayer>& layers);

Vec layer_forward(const DenseLayer& layer, std::span<const double> x);

// Runs the chain; when cache is non-null every intermediate activation is
// recorded (patching and mediation both need them).
Vec forward(const std::vector<DenseLayer>& layers, const Vec& x, ForwardCache* cache = nullptr);

struct LayerGrads {
  Matrix dweight;
  Vec dbias;
};

std::vector<LayerGrads> make_zero_grads(const std::vector<DenseLayer>& layers);
void scale_grads(std::vector<LayerGrads>& grads, double a);

// Accumulates parameter gradients into `grads` (+=) and returns the gradient
// with respect to the chain input. The cache must come from a forward call on
// the same chain.
Vec backward(const std::vector<DenseLayer>& layers, const ForwardCache& cache,
             const Vec& output_grad, std::vector<LayerGrads>* grads);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class AdamOptimizer {
 public:
  AdamOptimizer(std::size_t param_count, AdamConfig cfg);

  // Bias-corrected update over a flat view of the parameters. Throws
  // std::runtime_error on a non-finite gradient.
  void step(const std::vector<std::span<double>>& params,
            const std::vector<std::span<const double>>& grads);

  long step_count() const { return step_count_; }
  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  AdamConfig cfg_;
  Vec first_moment_;
  Vec second_moment_;
  long step_count_ = 0;
};

// Parameter/gradient views in a fixed order (weight, bias per layer).
std::vector<std::span<double>> param_views(std::vector<DenseLayer>& layers);
std::vector<std::span<const double>> grad_views(const std::vector<LayerGrads>& grads);
std::size_t param_count(const std::vector<DenseLayer>& layers);

}  // namespace vaecirc
