#include <doctest.h>

#include <cmath>

#include "distgrid/field.hpp"
#include "oracles.hpp"

using namespace distgrid;

namespace {

GridConfig tiny_grid() {
  GridConfig c;
  c.levels = 3;
  c.table_length = 1u << 8;
  c.features_per_level = 2;
  c.base_resolution = 4;
  c.max_resolution = 16;
  c.aspect = {1.0, 1.0, 1.0};
  return c;
}

FieldParams make_field(CascadeLevel level, uint64_t seed, uint32_t d_app = 4) {
  Rng rng(seed);
  return FieldParams(level, tiny_grid(), d_app, rng);
}

void randomize_tables(FieldParams& f, uint64_t seed, double scale = 0.5) {
  Rng rng(seed);
  for (auto& level : f.grid.levels())
    for (double& v : level.table) v = rng.uniform(-scale, scale);
}

void zero_params(FieldParams& f) {
  for (auto& level : f.grid.levels()) std::fill(level.table.begin(), level.table.end(), 0.0);
  for (auto* mlp : {&f.density_mlp, &f.color_mlp}) {
    for (auto& layer : mlp->layers()) {
      std::fill(layer.weights.begin(), layer.weights.end(), 0.0);
      std::fill(layer.bias.begin(), layer.bias.end(), 0.0);
    }
  }
}

/// Straight-line re-evaluation of the full field forward pass with plain
/// loops; shares no code with the Mlp class.
double oracle_density(const FieldParams& f, const Vec3& p, std::vector<double>* feature) {
  std::vector<double> x(f.grid.feature_width());
  f.grid.encode(p, x);
  for (const DenseLayer& layer : f.density_mlp.layers()) {
    std::vector<double> y(layer.out_width);
    for (uint32_t r = 0; r < layer.out_width; ++r) {
      double acc = layer.bias[r];
      for (uint32_t c = 0; c < layer.in_width; ++c)
        acc += layer.weights[size_t(r) * layer.in_width + c] * x[c];
      y[r] = acc;
    }
    if (&layer != &f.density_mlp.layers().back())
      for (double& v : y) v = v > 0 ? v : 0;  // fine cascade: ReLU hidden
    x = y;
  }
  for (double& v : x) v = std::clamp(v, -15.0, 15.0);
  if (feature) feature->assign(x.begin() + 1, x.end());
  return std::exp(x[0]);
}

Vec3 oracle_color(const FieldParams& f, std::span<const double> feature, const Vec3& dir,
                  std::span<const double> app) {
  std::vector<double> x(f.color_mlp.input_width());
  std::copy(feature.begin(), feature.end(), x.begin());
  sh_encode(dir, std::span<double>(x).subspan(kDensityFeatureWidth, kShWidth));
  std::copy(app.begin(), app.end(), x.begin() + kDensityFeatureWidth + kShWidth);
  const bool sigmoid_hidden = f.level == CascadeLevel::Coarse;
  for (const DenseLayer& layer : f.color_mlp.layers()) {
    std::vector<double> y(layer.out_width);
    for (uint32_t r = 0; r < layer.out_width; ++r) {
      double acc = layer.bias[r];
      for (uint32_t c = 0; c < layer.in_width; ++c)
        acc += layer.weights[size_t(r) * layer.in_width + c] * x[c];
      y[r] = acc;
    }
    if (&layer != &f.color_mlp.layers().back()) {
      for (double& v : y)
        v = sigmoid_hidden ? 1.0 / (1.0 + std::exp(-v)) : (v > 0 ? v : 0);
    }
    x = y;
  }
  Vec3 rgb;
  for (int k = 0; k < 3; ++k) rgb[k] = 1.0 / (1.0 + std::exp(-std::clamp(x[k], -15.0, 15.0)));
  return rgb;
}

}  // namespace

TEST_CASE("query_density: all-zero parameters give sigma = exp(0) = 1") {
  FieldParams f = make_field(CascadeLevel::Fine, 1);
  zero_params(f);
  const DensityResult r = query_density({0.5, 0.5, 0.5}, f);
  CHECK(r.sigma == doctest::Approx(1.0));
  for (double v : r.feature) CHECK(v == 0.0);
}

TEST_CASE("query_density: raw outputs clip at 15 before the exponential") {
  FieldParams f = make_field(CascadeLevel::Fine, 2);
  zero_params(f);
  f.density_mlp.layers().back().bias[0] = 20.0;  // raw 20 -> clipped 15
  const DensityResult r = query_density({0.5, 0.5, 0.5}, f);
  CHECK(r.sigma == doctest::Approx(std::exp(15.0)));
  f.density_mlp.layers().back().bias[0] = -20.0;
  CHECK(query_density({0.5, 0.5, 0.5}, f).sigma == doctest::Approx(std::exp(-15.0)));
}

TEST_CASE("query_color: all-zero weights give mid gray, clipping saturates") {
  FieldParams f = make_field(CascadeLevel::Fine, 3);
  zero_params(f);
  const std::vector<double> feature(kDensityFeatureWidth, 0.0);
  const std::vector<double> app(f.appearance_dim, 0.0);
  const Vec3 dir = normalize(Vec3{0.3, -0.5, 0.8});
  Vec3 rgb = query_color(feature, dir, app, f);
  CHECK(rgb.x == doctest::Approx(0.5));
  CHECK(rgb.y == doctest::Approx(0.5));
  CHECK(rgb.z == doctest::Approx(0.5));

  for (int k = 0; k < 3; ++k) f.color_mlp.layers().back().bias[k] = 40.0;
  rgb = query_color(feature, dir, app, f);
  const double sig15 = 1.0 / (1.0 + std::exp(-15.0));
  for (int k = 0; k < 3; ++k) CHECK(rgb[k] == doctest::Approx(sig15).epsilon(1e-12));
}

TEST_CASE("field forward matches the straight-line oracle on random parameters") {
  for (auto level : {CascadeLevel::Fine, CascadeLevel::Coarse}) {
    FieldParams f = make_field(level, 77 + int(level));
    randomize_tables(f, 99 + int(level));
    Rng rng(1234);
    for (int trial = 0; trial < 25; ++trial) {
      const Vec3 p{rng.uniform(), rng.uniform(), rng.uniform()};
      const Vec3 dir = normalize(Vec3{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
      std::vector<double> app(f.appearance_dim);
      for (double& v : app) v = rng.uniform(-1, 1);

      std::vector<double> oracle_feat;
      const double oracle_sigma = oracle_density(f, p, &oracle_feat);
      const DensityResult got = query_density(p, f);
      CHECK(testing::rel_error(got.sigma, oracle_sigma) < 1e-14);

      const Vec3 oracle_rgb = oracle_color(f, oracle_feat, dir, app);
      const Vec3 got_rgb = query_color(got.feature, dir, app, f);
      for (int k = 0; k < 3; ++k) CHECK(testing::rel_error(got_rgb[k], oracle_rgb[k]) < 1e-14);
    }
  }
}

TEST_CASE("field outputs: sigma positive, rgb in (0,1), deterministic") {
  FieldParams f = make_field(CascadeLevel::Coarse, 9);
  Rng rng(55);
  for (int trial = 0; trial < 50; ++trial) {
    const Vec3 p{rng.uniform(), rng.uniform(), rng.uniform()};
    const Vec3 dir = normalize(Vec3{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    std::vector<double> app(f.appearance_dim, 0.25);
    const DensityResult a = query_density(p, f);
    const DensityResult b = query_density(p, f);
    CHECK(a.sigma > 0.0);
    CHECK(a.sigma == b.sigma);  // bit-identical repeat
    const Vec3 rgb = query_color(a.feature, dir, app, f);
    const Vec3 rgb2 = query_color(b.feature, dir, app, f);
    for (int k = 0; k < 3; ++k) {
      CHECK(rgb[k] > 0.0);
      CHECK(rgb[k] < 1.0);
      CHECK(rgb[k] == rgb2[k]);
    }
  }
}

TEST_CASE("field_backward: zero upstream produces zero gradients") {
  FieldParams f = make_field(CascadeLevel::Fine, 10);
  FieldGrads grads = make_field_grads(f);
  FieldSampleCache cache;
  const DensityResult r = query_density({0.4, 0.2, 0.6}, f, &cache);
  std::vector<double> app(f.appearance_dim, 0.0);
  query_color(r.feature, normalize(Vec3{1, 1, 0}), app, f, &cache);
  field_backward(f, cache, r.sigma, 0.0, Vec3{}, grads);
  for (const auto& g : grads.grid.level_grads)
    for (double v : g) CHECK(v == 0.0);
  for (const auto& g : grads.density_mlp)
    for (double v : g.weights) CHECK(v == 0.0);
}

TEST_CASE("field_backward requires a cached forward") {
  FieldParams f = make_field(CascadeLevel::Fine, 10);
  FieldGrads grads = make_field_grads(f);
  FieldSampleCache empty;
  CHECK_THROWS(field_backward(f, empty, 1.0, 1.0, Vec3{1, 0, 0}, grads));
}

TEST_CASE("field_backward matches finite differences over random draws") {
  // Scalar objective: u . [sigma, rgb] for a random fixed u. 100 random
  // parameter draws, central differences with step 1e-5.
  Rng rng(2024);
  int checked_params = 0;
  for (int draw = 0; draw < 100; ++draw) {
    FieldParams f = make_field(draw % 2 ? CascadeLevel::Fine : CascadeLevel::Coarse, 3000 + draw);
    // Tables at init are +-1e-4, which parks every ReLU pre-activation at the
    // kink; finite differences need parameters away from it.
    randomize_tables(f, 5000 + draw);
    const Vec3 p{rng.uniform(), rng.uniform(), rng.uniform()};
    const Vec3 dir = normalize(Vec3{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    std::vector<double> app(f.appearance_dim);
    for (double& v : app) v = rng.uniform(-0.5, 0.5);
    const double u_sigma = rng.uniform(-1, 1);
    const Vec3 u_rgb{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};

    const auto objective = [&]() {
      const DensityResult r = query_density(p, f);
      const Vec3 rgb = query_color(r.feature, dir, app, f);
      return u_sigma * r.sigma + dot(u_rgb, rgb);
    };

    FieldGrads grads = make_field_grads(f);
    FieldSampleCache cache;
    const DensityResult r = query_density(p, f, &cache);
    query_color(r.feature, dir, app, f, &cache);
    field_backward(f, cache, r.sigma, u_sigma, u_rgb, grads);

    // Probe a few parameters of each kind per draw.
    const double h = 1e-5;
    const auto probe = [&](double* param, double analytic) {
      const double saved = *param;
      *param = saved + h;
      const double fp = objective();
      *param = saved - h;
      const double fm = objective();
      *param = saved;
      const double fd = (fp - fm) / (2.0 * h);
      if (std::abs(fd) < 1e-7 && std::abs(analytic) < 1e-7) return;  // both ~zero
      CHECK(testing::rel_error(analytic, fd) < 1e-4);
      ++checked_params;
    };

    auto& level0 = f.grid.levels()[0];
    for (size_t i = 0; i < level0.table.size(); i += level0.table.size() / 3)
      probe(&level0.table[i], grads.grid.level_grads[0][i]);
    auto& dlayer = f.density_mlp.layers()[0];
    probe(&dlayer.weights[5], grads.density_mlp[0].weights[5]);
    probe(&dlayer.bias[7], grads.density_mlp[0].bias[7]);
    auto& clayer = f.color_mlp.layers()[1];
    probe(&clayer.weights[33], grads.color_mlp[1].weights[33]);
    probe(&clayer.bias[3], grads.color_mlp[1].bias[3]);
  }
  CHECK(checked_params > 200);
}

TEST_CASE("appearance: identical images give all-zero PCA rows") {
  std::vector<std::vector<uint8_t>> images;
  std::vector<uint32_t> widths, heights, ids;
  for (uint32_t i = 0; i < 12; ++i) {
    images.emplace_back(32 * 32 * 3, uint8_t(120));
    widths.push_back(32);
    heights.push_back(32);
    ids.push_back(i);
  }
  const AppearanceTable table = build_appearance_table(images, widths, heights, ids, 6);
  CHECK(table.dim == 6);
  for (double v : table.rows) CHECK(std::abs(v) < 1e-6);
}

TEST_CASE("appearance: black and white images separate with opposite signs") {
  std::vector<std::vector<uint8_t>> images;
  std::vector<uint32_t> widths, heights, ids;
  for (uint32_t i = 0; i < 12; ++i) {
    images.emplace_back(16 * 16 * 3, i % 2 ? uint8_t(255) : uint8_t(0));
    widths.push_back(16);
    heights.push_back(16);
    ids.push_back(i);
  }
  const AppearanceTable table = build_appearance_table(images, widths, heights, ids, 4);
  // First PCA coordinate splits the two groups symmetrically.
  const double a = table.rows[0 * 4 + 0];
  const double b = table.rows[1 * 4 + 0];
  CHECK(a * b < 0.0);
  CHECK(std::abs(a + b) < 1e-6 * std::abs(a));
  // The white gram matrix is 255^2 per entry; centered in a balanced split,
  // each group sits 255^2 * 3 / 2 from the mean along the all-ones direction.
  CHECK(std::abs(std::abs(a) - 255.0 * 255.0 * 3.0 / 2.0) < 1.0);
}

TEST_CASE("appearance: PCA retained variance matches a power-iteration oracle") {
  Rng rng(404);
  std::vector<std::vector<uint8_t>> images;
  std::vector<uint32_t> widths, heights, ids;
  const uint32_t n = 24;
  for (uint32_t i = 0; i < n; ++i) {
    std::vector<uint8_t> img(24 * 24 * 3);
    for (auto& b : img) b = uint8_t(rng.uniform_index(256));
    images.push_back(std::move(img));
    widths.push_back(24);
    heights.push_back(24);
    ids.push_back(i);
  }
  const uint32_t d_app = 4;
  const AppearanceTable table = build_appearance_table(images, widths, heights, ids, d_app);

  // Independent gram vectors: own box-filter downsample to 64x64 plus a
  // direct channel dot product.
  std::vector<std::vector<double>> grams(n, std::vector<double>(9, 0.0));
  for (uint32_t i = 0; i < n; ++i) {
    double ch[3][64 * 64];
    for (uint32_t oy = 0; oy < 64; ++oy) {
      for (uint32_t ox = 0; ox < 64; ++ox) {
        const uint32_t y0 = oy * 24 / 64, y1 = std::max((oy + 1) * 24 / 64, y0 + 1);
        const uint32_t x0 = ox * 24 / 64, x1 = std::max((ox + 1) * 24 / 64, x0 + 1);
        double acc[3] = {0, 0, 0};
        for (uint32_t y = y0; y < y1; ++y)
          for (uint32_t x = x0; x < x1; ++x)
            for (int c = 0; c < 3; ++c) acc[c] += images[i][(size_t(y) * 24 + x) * 3 + c];
        for (int c = 0; c < 3; ++c)
          ch[c][oy * 64 + ox] = acc[c] / double((y1 - y0) * (x1 - x0));
      }
    }
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) {
        double acc = 0.0;
        for (int p = 0; p < 64 * 64; ++p) acc += ch[a][p] * ch[b][p];
        grams[i][a * 3 + b] = acc / (64.0 * 64.0);
      }
  }
  std::vector<double> mean(9, 0.0);
  for (const auto& g : grams)
    for (int k = 0; k < 9; ++k) mean[k] += g[k] / double(n);
  std::vector<double> cov(81, 0.0);
  for (const auto& g : grams)
    for (int a = 0; a < 9; ++a)
      for (int b = 0; b < 9; ++b) cov[a * 9 + b] += (g[a] - mean[a]) * (g[b] - mean[b]) / double(n);

  // Eigendecomposition oracle: power iteration with deflation.
  std::vector<double> eigenvalues;
  std::vector<std::vector<double>> eigenvectors;
  testing::power_iteration_eigh(cov, 9, 9, eigenvalues, eigenvectors);

  // Retained variance (mean squared projected row norm) must equal the top-d
  // eigenvalue sum; equivalently the reconstruction error is the sum of the
  // discarded eigenvalues.
  double retained = 0.0;
  for (uint32_t i = 0; i < n; ++i)
    for (uint32_t k = 0; k < d_app; ++k)
      retained += table.rows[i * d_app + k] * table.rows[i * d_app + k];
  retained /= double(n);
  double top = 0.0, total = 0.0;
  for (int k = 0; k < 9; ++k) total += eigenvalues[k];
  for (uint32_t k = 0; k < d_app; ++k) top += eigenvalues[k];
  CHECK(testing::rel_error(retained, top) < 1e-8);
  CHECK(testing::rel_error(total - retained, total - top) < 1e-6);
}

TEST_CASE("appearance: dataset too small for the PCA constraint is rejected") {
  std::vector<std::vector<uint8_t>> images(9, std::vector<uint8_t>(4 * 4 * 3, 100));
  std::vector<uint32_t> widths(9, 4), heights(9, 4), ids;
  for (uint32_t i = 0; i < 9; ++i) ids.push_back(i);
  CHECK_THROWS(build_appearance_table(images, widths, heights, ids, 4));
}

TEST_CASE("appearance: rows zero-pad when d_app exceeds the gram dimension") {
  Rng rng(3030);
  std::vector<std::vector<uint8_t>> images;
  std::vector<uint32_t> widths, heights, ids;
  for (uint32_t i = 0; i < 16; ++i) {
    std::vector<uint8_t> img(8 * 8 * 3);
    for (auto& b : img) b = uint8_t(rng.uniform_index(256));
    images.push_back(std::move(img));
    widths.push_back(8);
    heights.push_back(8);
    ids.push_back(i + 100);
  }
  const AppearanceTable table = build_appearance_table(images, widths, heights, ids, 16);
  for (uint32_t i = 0; i < 16; ++i)
    for (uint32_t k = 9; k < 16; ++k) CHECK(table.rows[i * 16 + k] == 0.0);
  CHECK_THROWS(table.row(9999));
  const std::vector<double> mean = table.mean_row();
  for (uint32_t k = 0; k < 9; ++k) CHECK(std::abs(mean[k]) < 1e-6);
}
