#include "distgrid/field.hpp"

#include <cmath>
#include <stdexcept>

namespace distgrid {

namespace {

constexpr uint32_t kGramSide = 64;

inline double clip_output(double v, bool& clipped) {
  if (v > kOutputClip) {
    clipped = true;
    return kOutputClip;
  }
  if (v < -kOutputClip) {
    clipped = true;
    return -kOutputClip;
  }
  clipped = false;
  return v;
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

/// Box-filter resample of an 8-bit RGB image to kGramSide^2, one channel sum
/// vector per call site. Returns channel-major doubles in [0, 255].
std::vector<double> downsample_rgb(const std::vector<uint8_t>& image, uint32_t width,
                                   uint32_t height) {
  std::vector<double> out(3 * kGramSide * kGramSide, 0.0);
  for (uint32_t oy = 0; oy < kGramSide; ++oy) {
    const uint32_t y0 = oy * height / kGramSide;
    const uint32_t y1 = std::max((oy + 1) * height / kGramSide, y0 + 1);
    for (uint32_t ox = 0; ox < kGramSide; ++ox) {
      const uint32_t x0 = ox * width / kGramSide;
      const uint32_t x1 = std::max((ox + 1) * width / kGramSide, x0 + 1);
      double acc[3] = {0, 0, 0};
      for (uint32_t y = y0; y < y1; ++y)
        for (uint32_t x = x0; x < x1; ++x)
          for (int c = 0; c < 3; ++c) acc[c] += double(image[(size_t(y) * width + x) * 3 + c]);
      const double inv = 1.0 / double((y1 - y0) * (x1 - x0));
      for (int c = 0; c < 3; ++c)
        out[size_t(c) * kGramSide * kGramSide + size_t(oy) * kGramSide + ox] = acc[c] * inv;
    }
  }
  return out;
}

/// Cyclic Jacobi eigendecomposition of a symmetric n x n matrix (n <= 9
/// here). Eigenvalues descend; eigenvectors are the matching columns of V.
void jacobi_eigh(std::vector<double>& a, int n, std::vector<double>& eigenvalues,
                 std::vector<double>& v) {
  v.assign(size_t(n) * n, 0.0);
  for (int i = 0; i < n; ++i) v[size_t(i) * n + i] = 1.0;
  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += a[size_t(p) * n + q] * a[size_t(p) * n + q];
    if (off < 1e-24) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = a[size_t(p) * n + q];
        if (std::abs(apq) < 1e-300) continue;
        const double app = a[size_t(p) * n + p];
        const double aqq = a[size_t(q) * n + q];
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = a[size_t(k) * n + p];
          const double akq = a[size_t(k) * n + q];
          a[size_t(k) * n + p] = c * akp - s * akq;
          a[size_t(k) * n + q] = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = a[size_t(p) * n + k];
          const double aqk = a[size_t(q) * n + k];
          a[size_t(p) * n + k] = c * apk - s * aqk;
          a[size_t(q) * n + k] = s * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {
          const double vkp = v[size_t(k) * n + p];
          const double vkq = v[size_t(k) * n + q];
          v[size_t(k) * n + p] = c * vkp - s * vkq;
          v[size_t(k) * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  eigenvalues.resize(n);
  for (int i = 0; i < n; ++i) eigenvalues[i] = a[size_t(i) * n + i];
  // Sort descending, carrying eigenvector columns along.
  for (int i = 0; i < n; ++i) {
    int best = i;
    for (int j = i + 1; j < n; ++j)
      if (eigenvalues[j] > eigenvalues[best]) best = j;
    if (best != i) {
      std::swap(eigenvalues[i], eigenvalues[best]);
      for (int k = 0; k < n; ++k) std::swap(v[size_t(k) * n + i], v[size_t(k) * n + best]);
    }
  }
}

}  // namespace

std::span<const double> AppearanceTable::row(uint32_t image_id) const {
  for (size_t i = 0; i < image_ids.size(); ++i)
    if (image_ids[i] == image_id)
      return std::span<const double>(rows.data() + i * dim, dim);
  throw std::out_of_range("appearance: unknown image id");
}

std::vector<double> AppearanceTable::mean_row() const {
  std::vector<double> mean(dim, 0.0);
  if (image_ids.empty()) return mean;
  for (size_t i = 0; i < image_ids.size(); ++i)
    for (uint32_t k = 0; k < dim; ++k) mean[k] += rows[i * dim + k];
  for (double& v : mean) v /= double(image_ids.size());
  return mean;
}

AppearanceTable build_appearance_table(const std::vector<std::vector<uint8_t>>& images,
                                       const std::vector<uint32_t>& widths,
                                       const std::vector<uint32_t>& heights,
                                       const std::vector<uint32_t>& image_ids, uint32_t dim) {
  constexpr uint32_t c = 3;          // gram channels
  constexpr uint32_t gram_dim = c * c;
  const size_t n = images.size();
  if (n <= gram_dim)
    throw std::invalid_argument("appearance: dataset must be larger than c^2 = 9 images");
  if (widths.size() != n || heights.size() != n || image_ids.size() != n)
    throw std::invalid_argument("appearance: image metadata size mismatch");

  // Flattened gram matrix per image.
  std::vector<std::vector<double>> grams(n);
  const double inv_pixels = 1.0 / double(kGramSide * kGramSide);
  for (size_t i = 0; i < n; ++i) {
    const std::vector<double> ch = downsample_rgb(images[i], widths[i], heights[i]);
    std::vector<double>& g = grams[i];
    g.resize(gram_dim);
    for (uint32_t a = 0; a < c; ++a) {
      for (uint32_t b = 0; b < c; ++b) {
        double acc = 0.0;
        const double* pa = ch.data() + size_t(a) * kGramSide * kGramSide;
        const double* pb = ch.data() + size_t(b) * kGramSide * kGramSide;
        for (uint32_t k = 0; k < kGramSide * kGramSide; ++k) acc += pa[k] * pb[k];
        g[a * c + b] = acc * inv_pixels;
      }
    }
  }

  // PCA over the gram vectors: center, eigendecompose the covariance,
  // project onto the leading axes.
  std::vector<double> mean(gram_dim, 0.0);
  for (const auto& g : grams)
    for (uint32_t k = 0; k < gram_dim; ++k) mean[k] += g[k];
  for (double& m : mean) m /= double(n);

  std::vector<double> cov(size_t(gram_dim) * gram_dim, 0.0);
  for (const auto& g : grams)
    for (uint32_t a = 0; a < gram_dim; ++a)
      for (uint32_t b = 0; b < gram_dim; ++b)
        cov[size_t(a) * gram_dim + b] += (g[a] - mean[a]) * (g[b] - mean[b]);
  for (double& v : cov) v /= double(n);

  std::vector<double> eigenvalues, eigenvectors;
  jacobi_eigh(cov, int(gram_dim), eigenvalues, eigenvectors);

  const uint32_t projected = std::min(dim, gram_dim);
  AppearanceTable table;
  table.dim = dim;
  table.image_ids = image_ids;
  table.rows.assign(n * size_t(dim), 0.0);
  for (size_t i = 0; i < n; ++i) {
    for (uint32_t k = 0; k < projected; ++k) {
      double acc = 0.0;
      for (uint32_t a = 0; a < gram_dim; ++a)
        acc += (grams[i][a] - mean[a]) * eigenvectors[size_t(a) * gram_dim + k];
      table.rows[i * dim + k] = acc;
    }
    // Remaining dims (if dim > 9) stay zero.
  }
  return table;
}

FieldParams::FieldParams(CascadeLevel level_, const GridConfig& grid_config,
                         uint32_t appearance_dim_, Rng& rng)
    : level(level_), grid(grid_config, rng), appearance_dim(appearance_dim_) {
  const uint32_t encode_width = grid.feature_width();
  const uint32_t density_widths[] = {encode_width, kHiddenWidth, 1 + kDensityFeatureWidth};
  density_mlp = Mlp(density_widths, Activation::ReLU, rng);
  const uint32_t color_in = kDensityFeatureWidth + kShWidth + appearance_dim;
  const uint32_t color_widths[] = {color_in, kHiddenWidth, kHiddenWidth, 3};
  // Sigmoid hidden units stabilize the coarse cascade.
  const Activation color_act =
      level == CascadeLevel::Coarse ? Activation::Sigmoid : Activation::ReLU;
  color_mlp = Mlp(color_widths, color_act, rng);
}

std::vector<std::span<double>> FieldParams::parameter_arrays() {
  std::vector<std::span<double>> arrays = grid.parameter_arrays();
  for (auto& a : density_mlp.parameter_arrays()) arrays.push_back(a);
  for (auto& a : color_mlp.parameter_arrays()) arrays.push_back(a);
  return arrays;
}

void FieldGrads::zero() {
  grid.zero();
  for (auto& g : density_mlp) {
    std::fill(g.weights.begin(), g.weights.end(), 0.0);
    std::fill(g.bias.begin(), g.bias.end(), 0.0);
  }
  for (auto& g : color_mlp) {
    std::fill(g.weights.begin(), g.weights.end(), 0.0);
    std::fill(g.bias.begin(), g.bias.end(), 0.0);
  }
}

FieldGrads make_field_grads(const FieldParams& params) {
  FieldGrads grads;
  grads.grid = params.grid.make_grads();
  grads.density_mlp = params.density_mlp.make_grads();
  grads.color_mlp = params.color_mlp.make_grads();
  return grads;
}

DensityResult query_density(const Vec3& point, const FieldParams& params,
                            FieldSampleCache* cache) {
  const uint32_t enc_width = params.grid.feature_width();
  std::vector<double> encoded(enc_width);
  params.grid.encode(point, encoded);

  std::vector<double> raw(1 + kDensityFeatureWidth);
  MlpCache local_cache;
  params.density_mlp.forward(encoded, raw, cache ? &local_cache : nullptr);

  DensityResult result;
  bool clipped[16] = {};
  for (uint32_t k = 0; k < raw.size(); ++k) raw[k] = clip_output(raw[k], clipped[k]);
  result.sigma = std::exp(raw[0]);
  for (uint32_t k = 0; k < kDensityFeatureWidth; ++k) result.feature[k] = raw[1 + k];

  if (cache) {
    cache->point = point;
    cache->encoded = std::move(encoded);
    cache->density_cache = std::move(local_cache);
    cache->density_raw = raw;
    std::copy(std::begin(clipped), std::end(clipped), std::begin(cache->density_clipped));
  }
  return result;
}

Vec3 query_color(std::span<const double> density_feature, const Vec3& direction,
                 std::span<const double> appearance, const FieldParams& params,
                 FieldSampleCache* cache) {
  if (density_feature.size() != kDensityFeatureWidth)
    throw std::invalid_argument("field: density feature width");
  if (appearance.size() != params.appearance_dim)
    throw std::invalid_argument("field: appearance width");

  std::vector<double> input(params.color_mlp.input_width());
  std::copy(density_feature.begin(), density_feature.end(), input.begin());
  sh_encode(direction, std::span<double>(input).subspan(kDensityFeatureWidth, kShWidth));
  std::copy(appearance.begin(), appearance.end(),
            input.begin() + kDensityFeatureWidth + kShWidth);

  double raw[3];
  MlpCache local_cache;
  params.color_mlp.forward(input, raw, cache ? &local_cache : nullptr);

  bool clipped[3] = {};
  Vec3 rgb;
  for (int k = 0; k < 3; ++k) {
    raw[k] = clip_output(raw[k], clipped[k]);
    rgb[k] = sigmoid(raw[k]);
  }

  if (cache) {
    cache->color_input = std::move(input);
    cache->color_cache = std::move(local_cache);
    cache->color_raw = Vec3(raw[0], raw[1], raw[2]);
    std::copy(std::begin(clipped), std::end(clipped), std::begin(cache->color_clipped));
  }
  return rgb;
}

void field_backward(const FieldParams& params, const FieldSampleCache& cache, double sigma,
                    double sigma_grad, const Vec3& color_grad, FieldGrads& grads) {
  if (cache.encoded.empty() || cache.density_cache.pre_activations.empty())
    throw std::invalid_argument("field: backward requires a cached forward pass");

  // Color network adjoint: through sigmoid and clip back to its raw outputs,
  // then into the density feature slice of its input.
  std::vector<double> color_input_grad(params.color_mlp.input_width(), 0.0);
  if (color_grad.x != 0.0 || color_grad.y != 0.0 || color_grad.z != 0.0) {
    double color_raw_grad[3];
    for (int k = 0; k < 3; ++k) {
      const double s = sigmoid(cache.color_raw[k]);
      color_raw_grad[k] = cache.color_clipped[k] ? 0.0 : color_grad[k] * s * (1.0 - s);
    }
    params.color_mlp.backward(cache.color_cache, color_raw_grad, grads.color_mlp,
                              color_input_grad);
  }

  // Density network adjoint: sigma path plus the feature path arriving from
  // the color network.
  std::vector<double> density_raw_grad(1 + kDensityFeatureWidth, 0.0);
  density_raw_grad[0] = cache.density_clipped[0] ? 0.0 : sigma_grad * sigma;
  for (uint32_t k = 0; k < kDensityFeatureWidth; ++k)
    density_raw_grad[1 + k] = cache.density_clipped[1 + k] ? 0.0 : color_input_grad[k];

  bool any = false;
  for (double v : density_raw_grad)
    if (v != 0.0) {
      any = true;
      break;
    }
  if (!any) return;

  std::vector<double> encoded_grad(params.grid.feature_width(), 0.0);
  params.density_mlp.backward(cache.density_cache, density_raw_grad, grads.density_mlp,
                              encoded_grad);
  params.grid.encode_backward(cache.point, encoded_grad, grads.grid);
}

}  // namespace distgrid
