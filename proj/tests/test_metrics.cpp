#include <doctest.h>

#include <cmath>

#include "distgrid/metrics.hpp"
#include "distgrid/rng.hpp"
#include "oracles.hpp"

using namespace distgrid;

TEST_CASE("psnr: identical images cap at 100 dB, known MSE checks out") {
  const std::vector<double> a(100, 0.5);
  CHECK(psnr(a, a) == 100.0);
  std::vector<double> b(100, 0.5);
  for (double& v : b) v += 0.1;
  CHECK(psnr(a, b) == doctest::Approx(-10.0 * std::log10(0.01)).epsilon(1e-9));
}

TEST_CASE("ssim: identical images score exactly 1") {
  Rng rng(3);
  const uint32_t w = 24, h = 20;
  std::vector<double> img(size_t(w) * h * 3);
  for (double& v : img) v = rng.uniform();
  CHECK(ssim(img, img, w, h, 3) == doctest::Approx(1.0).epsilon(1e-12));
}

namespace {

/// Windowed-statistics reference: direct per-window means/variances with an
/// explicitly normalized Gaussian mask, no separable shortcut.
double ssim_reference(std::span<const double> a, std::span<const double> b, uint32_t w,
                      uint32_t h, uint32_t channels) {
  const int r = 5;
  double mask[11][11];
  double mask_sum = 0.0;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      mask[dy + r][dx + r] = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
      mask_sum += mask[dy + r][dx + r];
    }
  for (auto& row : mask)
    for (double& v : row) v /= mask_sum;

  double total = 0.0;
  uint64_t count = 0;
  for (uint32_t c = 0; c < channels; ++c) {
    const size_t off = size_t(c) * w * h;
    for (int y = r; y + r < int(h); ++y) {
      for (int x = r; x + r < int(w); ++x) {
        double mu_a = 0, mu_b = 0, aa = 0, bb = 0, ab = 0;
        for (int dy = -r; dy <= r; ++dy) {
          for (int dx = -r; dx <= r; ++dx) {
            const double m = mask[dy + r][dx + r];
            const double va = a[off + size_t(y + dy) * w + size_t(x + dx)];
            const double vb = b[off + size_t(y + dy) * w + size_t(x + dx)];
            mu_a += m * va;
            mu_b += m * vb;
            aa += m * va * va;
            bb += m * vb * vb;
            ab += m * va * vb;
          }
        }
        const double var_a = aa - mu_a * mu_a;
        const double var_b = bb - mu_b * mu_b;
        const double cov = ab - mu_a * mu_b;
        const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
        total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                 ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        ++count;
      }
    }
  }
  return total / double(count);
}

}  // namespace

TEST_CASE("ssim matches the windowed-statistics reference within 1e-6") {
  Rng rng(9);
  const uint32_t w = 32, h = 28;
  std::vector<double> a(size_t(w) * h * 3), b(a.size());
  // Smooth correlated pair with noise: a realistic fixture.
  for (uint32_t c = 0; c < 3; ++c)
    for (uint32_t y = 0; y < h; ++y)
      for (uint32_t x = 0; x < w; ++x) {
        const size_t i = size_t(c) * w * h + size_t(y) * w + x;
        a[i] = 0.5 + 0.4 * std::sin(0.3 * x + 0.2 * y + c);
        b[i] = std::clamp(a[i] + 0.05 * rng.uniform(-1, 1), 0.0, 1.0);
      }
  const double got = ssim(a, b, w, h, 3);
  const double expect = ssim_reference(a, b, w, h, 3);
  CHECK(std::abs(got - expect) < 1e-6);
  CHECK(got < 1.0);
  CHECK(got > 0.5);
}
