#include "distgrid/mlp.hpp"

#include <cmath>
#include <stdexcept>

namespace distgrid {

namespace {

inline double apply_activation(double z, Activation act) {
  switch (act) {
    case Activation::ReLU:
      return z > 0.0 ? z : 0.0;
    case Activation::Sigmoid:
      return 1.0 / (1.0 + std::exp(-z));
    case Activation::None:
      return z;
  }
  return z;
}

inline double activation_grad(double z, Activation act) {
  switch (act) {
    case Activation::ReLU:
      return z > 0.0 ? 1.0 : 0.0;
    case Activation::Sigmoid: {
      const double s = 1.0 / (1.0 + std::exp(-z));
      return s * (1.0 - s);
    }
    case Activation::None:
      return 1.0;
  }
  return 1.0;
}

}  // namespace

Mlp::Mlp(std::span<const uint32_t> widths, Activation hidden_activation, Rng& rng)
    : hidden_activation_(hidden_activation) {
  if (widths.size() < 2) throw std::invalid_argument("mlp: need at least input and output widths");
  layers_.resize(widths.size() - 1);
  for (size_t i = 0; i + 1 < widths.size(); ++i) {
    DenseLayer& layer = layers_[i];
    layer.in_width = widths[i];
    layer.out_width = widths[i + 1];
    layer.weights.resize(size_t(layer.in_width) * layer.out_width);
    layer.bias.assign(layer.out_width, 0.0);
    // Xavier-uniform keeps pre-activations near zero at init, well inside the
    // output clipping range.
    const double bound = std::sqrt(6.0 / double(layer.in_width + layer.out_width));
    for (double& w : layer.weights) w = rng.uniform(-bound, bound);
  }
}

void Mlp::forward(std::span<const double> input, std::span<double> output, MlpCache* cache) const {
  if (input.size() != input_width()) throw std::invalid_argument("mlp: input width mismatch");
  if (output.size() != output_width()) throw std::invalid_argument("mlp: output width mismatch");

  if (cache) {
    cache->input.assign(input.begin(), input.end());
    cache->pre_activations.resize(layers_.size());
  }

  std::vector<double> cur(input.begin(), input.end());
  std::vector<double> next;
  for (size_t li = 0; li < layers_.size(); ++li) {
    const DenseLayer& layer = layers_[li];
    next.assign(layer.out_width, 0.0);
    for (uint32_t r = 0; r < layer.out_width; ++r) {
      const double* wrow = layer.weights.data() + size_t(r) * layer.in_width;
      double acc = layer.bias[r];
      for (uint32_t c = 0; c < layer.in_width; ++c) acc += wrow[c] * cur[c];
      next[r] = acc;
    }
    if (cache) cache->pre_activations[li] = next;
    const bool last = li + 1 == layers_.size();
    if (!last)
      for (double& v : next) v = apply_activation(v, hidden_activation_);
    cur.swap(next);
  }
  std::copy(cur.begin(), cur.end(), output.begin());
}

void Mlp::backward(const MlpCache& cache, std::span<const double> output_grad,
                   std::vector<DenseLayerGrads>& grads, std::span<double> input_grad) const {
  if (cache.pre_activations.size() != layers_.size())
    throw std::invalid_argument("mlp: cache does not match network");
  if (output_grad.size() != output_width())
    throw std::invalid_argument("mlp: output grad width mismatch");

  std::vector<double> delta(output_grad.begin(), output_grad.end());
  std::vector<double> prev_delta;
  for (size_t li = layers_.size(); li-- > 0;) {
    const DenseLayer& layer = layers_[li];
    const std::vector<double>& pre = cache.pre_activations[li];
    const bool last = li + 1 == layers_.size();
    if (!last)
      for (uint32_t r = 0; r < layer.out_width; ++r)
        delta[r] *= activation_grad(pre[r], hidden_activation_);

    // Post-activation input of this layer.
    std::vector<double> layer_input;
    const double* in_ptr;
    if (li == 0) {
      in_ptr = cache.input.data();
    } else {
      layer_input = cache.pre_activations[li - 1];
      for (double& v : layer_input) v = apply_activation(v, hidden_activation_);
      in_ptr = layer_input.data();
    }

    DenseLayerGrads& g = grads[li];
    for (uint32_t r = 0; r < layer.out_width; ++r) {
      const double d = delta[r];
      if (d == 0.0) continue;
      double* wg = g.weights.data() + size_t(r) * layer.in_width;
      for (uint32_t c = 0; c < layer.in_width; ++c) wg[c] += d * in_ptr[c];
      g.bias[r] += d;
    }

    const bool need_input_grad = li > 0 || !input_grad.empty();
    if (need_input_grad) {
      prev_delta.assign(layer.in_width, 0.0);
      for (uint32_t r = 0; r < layer.out_width; ++r) {
        const double d = delta[r];
        if (d == 0.0) continue;
        const double* wrow = layer.weights.data() + size_t(r) * layer.in_width;
        for (uint32_t c = 0; c < layer.in_width; ++c) prev_delta[c] += d * wrow[c];
      }
      delta.swap(prev_delta);
    }
  }
  if (!input_grad.empty()) {
    if (input_grad.size() != input_width())
      throw std::invalid_argument("mlp: input grad width mismatch");
    std::copy(delta.begin(), delta.end(), input_grad.begin());
  }
}

std::vector<DenseLayerGrads> Mlp::make_grads() const {
  std::vector<DenseLayerGrads> grads(layers_.size());
  for (size_t i = 0; i < layers_.size(); ++i) {
    grads[i].weights.assign(layers_[i].weights.size(), 0.0);
    grads[i].bias.assign(layers_[i].bias.size(), 0.0);
  }
  return grads;
}

std::vector<std::span<double>> Mlp::parameter_arrays() {
  std::vector<std::span<double>> arrays;
  for (DenseLayer& layer : layers_) {
    arrays.emplace_back(layer.weights);
    arrays.emplace_back(layer.bias);
  }
  return arrays;
}

}  // namespace distgrid
