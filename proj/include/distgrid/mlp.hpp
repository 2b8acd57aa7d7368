#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "distgrid/rng.hpp"

namespace distgrid {

enum class Activation : uint8_t { None = 0, ReLU = 1, Sigmoid = 2 };

/// Dense layer, weights row-major (out x in).
struct DenseLayer {
  uint32_t in_width = 0;
  uint32_t out_width = 0;
  std::vector<double> weights;
  std::vector<double> bias;
};

struct DenseLayerGrads {
  std::vector<double> weights;
  std::vector<double> bias;
};

/// Per-sample activation cache needed by the backward pass: the input and
/// every pre-activation vector, in layer order.
struct MlpCache {
  std::vector<double> input;
  std::vector<std::vector<double>> pre_activations;
};

/// Small fully connected network with a fixed hidden activation and raw
/// (linear) outputs; output clipping and output activations live with the
/// caller, which also owns their adjoints.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::span<const uint32_t> widths, Activation hidden_activation, Rng& rng);

  uint32_t input_width() const { return layers_.empty() ? 0 : layers_.front().in_width; }
  uint32_t output_width() const { return layers_.empty() ? 0 : layers_.back().out_width; }
  Activation hidden_activation() const { return hidden_activation_; }

  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  void forward(std::span<const double> input, std::span<double> output,
               MlpCache* cache = nullptr) const;

  /// Accumulates parameter gradients into `grads` and, if `input_grad` is
  /// non-empty, writes the gradient w.r.t. the input.
  void backward(const MlpCache& cache, std::span<const double> output_grad,
                std::vector<DenseLayerGrads>& grads, std::span<double> input_grad) const;

  std::vector<DenseLayerGrads> make_grads() const;
  std::vector<std::span<double>> parameter_arrays();

 private:
  std::vector<DenseLayer> layers_;
  Activation hidden_activation_ = Activation::ReLU;
};

}  // namespace distgrid
