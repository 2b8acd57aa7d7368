#include "distgrid/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace distgrid {

double psnr(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("psnr: size mismatch");
  double mse = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    mse += d * d;
  }
  mse /= double(a.size());
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

std::vector<double> gaussian_kernel() {
  std::vector<double> k(kWindow);
  double sum = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double x = double(i - kWindow / 2);
    k[i] = std::exp(-x * x / (2.0 * kSigma * kSigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

/// Separable Gaussian blur with zero-padding outside the image (windows are
/// renormalized by blurring a ones image alongside, handled by the caller
/// restricting means to valid centers).
std::vector<double> blur(std::span<const double> img, uint32_t w, uint32_t h,
                         const std::vector<double>& kernel) {
  std::vector<double> tmp(img.size(), 0.0), out(img.size(), 0.0);
  const int r = kWindow / 2;
  for (uint32_t y = 0; y < h; ++y) {
    for (uint32_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int k = -r; k <= r; ++k) {
        const int xx = int(x) + k;
        if (xx < 0 || xx >= int(w)) continue;
        acc += kernel[size_t(k + r)] * img[size_t(y) * w + uint32_t(xx)];
      }
      tmp[size_t(y) * w + x] = acc;
    }
  }
  for (uint32_t y = 0; y < h; ++y) {
    for (uint32_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int k = -r; k <= r; ++k) {
        const int yy = int(y) + k;
        if (yy < 0 || yy >= int(h)) continue;
        acc += kernel[size_t(k + r)] * tmp[size_t(yy) * w + x];
      }
      out[size_t(y) * w + x] = acc;
    }
  }
  return out;
}

}  // namespace

double ssim(std::span<const double> a, std::span<const double> b, uint32_t width, uint32_t height,
            uint32_t channels) {
  if (a.size() != b.size() || a.size() != size_t(width) * height * channels)
    throw std::invalid_argument("ssim: size mismatch");
  const std::vector<double> kernel = gaussian_kernel();
  const int r = kWindow / 2;

  double total = 0.0;
  uint64_t count = 0;
  std::vector<double> plane_a(size_t(width) * height), plane_b(plane_a.size()),
      plane_aa(plane_a.size()), plane_bb(plane_a.size()), plane_ab(plane_a.size());
  for (uint32_t c = 0; c < channels; ++c) {
    const size_t off = size_t(c) * width * height;
    for (size_t i = 0; i < plane_a.size(); ++i) {
      plane_a[i] = a[off + i];
      plane_b[i] = b[off + i];
      plane_aa[i] = plane_a[i] * plane_a[i];
      plane_bb[i] = plane_b[i] * plane_b[i];
      plane_ab[i] = plane_a[i] * plane_b[i];
    }
    const auto mu_a = blur(plane_a, width, height, kernel);
    const auto mu_b = blur(plane_b, width, height, kernel);
    const auto mu_aa = blur(plane_aa, width, height, kernel);
    const auto mu_bb = blur(plane_bb, width, height, kernel);
    const auto mu_ab = blur(plane_ab, width, height, kernel);

    // Valid centers only, so every window is fully populated.
    for (uint32_t y = uint32_t(r); y + uint32_t(r) < height; ++y) {
      for (uint32_t x = uint32_t(r); x + uint32_t(r) < width; ++x) {
        const size_t i = size_t(y) * width + x;
        const double var_a = mu_aa[i] - mu_a[i] * mu_a[i];
        const double var_b = mu_bb[i] - mu_b[i] * mu_b[i];
        const double cov = mu_ab[i] - mu_a[i] * mu_b[i];
        const double num = (2.0 * mu_a[i] * mu_b[i] + kC1) * (2.0 * cov + kC2);
        const double den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + kC1) * (var_a + var_b + kC2);
        total += num / den;
        ++count;
      }
    }
  }
  if (count == 0) throw std::invalid_argument("ssim: image smaller than the window");
  return total / double(count);
}

}  // namespace distgrid
