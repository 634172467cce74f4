#include "vaecirc/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace vaecirc {

DenseLayer make_dense(std::size_t in, std::size_t out, Activation act, SeededRng& rng) {
  DenseLayer layer;
  layer.weight = Matrix(out, in);
  layer.bias.assign(out, 0.0);
  layer.activation = act;
  const double bound = std::sqrt(6.0 / static_cast<double>(in));
  for (double& w : layer.weight.data) w = (2.0 * rng.uniform() - 1.0) * bound;
  return layer;
}

std::uint64_t chain_signature(const std::vector<DenseLayer>& layers) {
  // FNV-1a over the layer dimensions and activations.
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](std::uint64_t v) {
    h ^= v;
    h *= 1099511628211ULL;
  };
  mix(layers.size());
  for (const auto& l : layers) {
    mix(l.weight.rows);
    mix(l.weight.cols);
    mix(static_cast<std::uint64_t>(l.activation));
  }
  return h;
}

Vec layer_forward(const DenseLayer& layer, std::span<const double> x) {
  if (x.size() != layer.in_dim())
    throw std::invalid_argument("layer_forward: input width mismatch");
  Vec y = matvec(layer.weight, x);
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] += layer.bias[i];
    if (layer.activation == Activation::kReLU && y[i] < 0.0) y[i] = 0.0;
  }
  return y;
}

Vec forward(const std::vector<DenseLayer>& layers, const Vec& x, ForwardCache* cache) {
  if (!layers.empty() && x.size() != layers.front().in_dim())
    throw std::invalid_argument("forward: input width mismatch");
  if (cache) {
    cache->input = x;
    cache->pre.clear();
    cache->post.clear();
    cache->pre.reserve(layers.size());
    cache->post.reserve(layers.size());
    cache->shape_signature = chain_signature(layers);
  }
  Vec h = x;
  for (const auto& layer : layers) {
    Vec pre = matvec(layer.weight, h);
    for (std::size_t i = 0; i < pre.size(); ++i) pre[i] += layer.bias[i];
    Vec post = pre;
    if (layer.activation == Activation::kReLU)
      for (double& v : post)
        if (v < 0.0) v = 0.0;
    if (cache) {
      cache->pre.push_back(pre);
      cache->post.push_back(post);
    }
    h = std::move(post);
  }
  return h;
}

std::vector<LayerGrads> make_zero_grads(const std::vector<DenseLayer>& layers) {
  std::vector<LayerGrads> grads;
  grads.reserve(layers.size());
  for (const auto& l : layers)
    grads.push_back({Matrix(l.weight.rows, l.weight.cols), Vec(l.bias.size(), 0.0)});
  return grads;
}

void scale_grads(std::vector<LayerGrads>& grads, double a) {
  for (auto& g : grads) {
    for (double& v : g.dweight.data) v *= a;
    for (double& v : g.dbias) v *= a;
  }
}

Vec backward(const std::vector<DenseLayer>& layers, const ForwardCache& cache,
             const Vec& output_grad, std::vector<LayerGrads>* grads) {
  if (cache.shape_signature != chain_signature(layers) || cache.pre.size() != layers.size())
    throw std::logic_error("backward: stale or mismatched forward cache");
  if (!layers.empty() && output_grad.size() != layers.back().out_dim())
    throw std::invalid_argument("backward: output gradient width mismatch");
  if (grads && grads->size() != layers.size())
    throw std::invalid_argument("backward: gradient accumulator size mismatch");

  Vec delta = output_grad;
  for (std::size_t li = layers.size(); li-- > 0;) {
    const auto& layer = layers[li];
    if (layer.activation == Activation::kReLU) {
      const Vec& pre = cache.pre[li];
      for (std::size_t i = 0; i < delta.size(); ++i)
        if (pre[i] <= 0.0) delta[i] = 0.0;
    }
    const Vec& below = (li == 0) ? cache.input : cache.post[li - 1];
    if (grads) {
      add_outer((*grads)[li].dweight, 1.0, delta, below);
      axpy(1.0, delta, (*grads)[li].dbias);
    }
    delta = matvec_transposed(layer.weight, delta);
  }
  return delta;
}

AdamOptimizer::AdamOptimizer(std::size_t param_count, AdamConfig cfg)
    : cfg_(cfg), first_moment_(param_count, 0.0), second_moment_(param_count, 0.0) {}

void AdamOptimizer::step(const std::vector<std::span<double>>& params,
                         const std::vector<std::span<const double>>& grads) {
  if (params.size() != grads.size())
    throw std::invalid_argument("AdamOptimizer::step: view count mismatch");
  ++step_count_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
  std::size_t k = 0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto p = params[t];
    auto g = grads[t];
    if (p.size() != g.size())
      throw std::invalid_argument("AdamOptimizer::step: view shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i, ++k) {
      if (k >= first_moment_.size())
        throw std::invalid_argument("AdamOptimizer::step: more parameters than state");
      const double gi = g[i];
      if (!std::isfinite(gi))
        throw std::runtime_error("AdamOptimizer::step: non-finite gradient");
      first_moment_[k] = cfg_.beta1 * first_moment_[k] + (1.0 - cfg_.beta1) * gi;
      second_moment_[k] = cfg_.beta2 * second_moment_[k] + (1.0 - cfg_.beta2) * gi * gi;
      const double m_hat = first_moment_[k] / bc1;
      const double v_hat = second_moment_[k] / bc2;
      p[i] -= cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.epsilon);
    }
  }
  if (k != first_moment_.size())
    throw std::invalid_argument("AdamOptimizer::step: fewer parameters than state");
}

std::vector<std::span<double>> param_views(std::vector<DenseLayer>& layers) {
  std::vector<std::span<double>> views;
  views.reserve(layers.size() * 2);
  for (auto& l : layers) {
    views.emplace_back(l.weight.data);
    views.emplace_back(l.bias);
  }
  return views;
}

std::vector<std::span<const double>> grad_views(const std::vector<LayerGrads>& grads) {
  std::vector<std::span<const double>> views;
  views.reserve(grads.size() * 2);
  for (const auto& g : grads) {
    views.emplace_back(g.dweight.data);
    views.emplace_back(g.dbias);
  }
  return views;
}

std::size_t param_count(const std::vector<DenseLayer>& layers) {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.data.size() + l.bias.size();
  return n;
}

}  // namespace vaecirc
