#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "distgrid/grid.hpp"
#include "distgrid/mlp.hpp"
#include "distgrid/sh.hpp"
#include "distgrid/vecmath.hpp"

namespace distgrid {

inline constexpr uint32_t kDensityFeatureWidth = 15;
inline constexpr uint32_t kHiddenWidth = 64;
inline constexpr double kOutputClip = 15.0;

enum class CascadeLevel : uint8_t { Fine = 0, Coarse = 1 };

/// Fixed per-image conditioning vectors for the color network. Rows are never
/// trained.
struct AppearanceTable {
  uint32_t dim = 0;
  std::vector<uint32_t> image_ids;
  std::vector<double> rows;  // image-major, image_ids.size() x dim

  std::span<const double> row(uint32_t image_id) const;
  std::vector<double> mean_row() const;  // evaluation-time appearance
};

/// Gram-matrix appearance features: each image is downsampled to 64x64, the
/// 3x3 gram matrix of its channel vectors is flattened, and PCA across the
/// dataset reduces (or zero-pads) to `dim` dimensions. Requires more than 9
/// images. `images` are 8-bit interleaved RGB.
AppearanceTable build_appearance_table(const std::vector<std::vector<uint8_t>>& images,
                                       const std::vector<uint32_t>& widths,
                                       const std::vector<uint32_t>& heights,
                                       const std::vector<uint32_t>& image_ids, uint32_t dim);

/// One sub-field: hash-grid encoding into a density network, whose feature
/// output conditions a color network together with the encoded view
/// direction and the appearance vector. Coarse cascades use sigmoid hidden
/// activations in the color network; fine cascades use ReLU.
struct FieldParams {
  CascadeLevel level = CascadeLevel::Fine;
  HashGrid grid;
  Mlp density_mlp;
  Mlp color_mlp;
  uint32_t appearance_dim = 16;

  FieldParams() = default;
  FieldParams(CascadeLevel level, const GridConfig& grid_config, uint32_t appearance_dim, Rng& rng);

  std::vector<std::span<double>> parameter_arrays();
};

struct FieldGrads {
  HashGridGrads grid;
  std::vector<DenseLayerGrads> density_mlp;
  std::vector<DenseLayerGrads> color_mlp;

  void zero();
};

FieldGrads make_field_grads(const FieldParams& params);

/// Forward caches for one field evaluation, consumed by field_backward.
struct FieldSampleCache {
  Vec3 point;  // normalized
  std::vector<double> encoded;
  MlpCache density_cache;
  std::vector<double> density_raw;  // clipped outputs
  std::vector<double> color_input;
  MlpCache color_cache;
  Vec3 color_raw;  // clipped outputs
  bool density_clipped[16] = {};
  bool color_clipped[3] = {};
};

struct DensityResult {
  double sigma = 0.0;
  std::array<double, kDensityFeatureWidth> feature{};
};

/// sigma = exp(raw[0]) with all raw outputs clipped to [-15, 15]; the other
/// 15 outputs feed the color network. `point` is normalized to the field's
/// unit box.
DensityResult query_density(const Vec3& point, const FieldParams& params,
                            FieldSampleCache* cache = nullptr);

/// rgb = sigmoid(clip(raw)). `direction` must be unit length.
Vec3 query_color(std::span<const double> density_feature, const Vec3& direction,
                 std::span<const double> appearance, const FieldParams& params,
                 FieldSampleCache* cache = nullptr);

/// Adjoint of query_density + query_color for one sample. Accumulates into
/// `grads`; the appearance table receives no gradient.
void field_backward(const FieldParams& params, const FieldSampleCache& cache, double sigma,
                    double sigma_grad, const Vec3& color_grad, FieldGrads& grads);

}  // namespace distgrid
