#include <doctest.h>

#include <cmath>

#include "distgrid/render.hpp"
#include "distgrid/rng.hpp"
#include "oracles.hpp"

using namespace distgrid;

namespace {

std::vector<MarchSample> uniform_samples(double t0, double t1, size_t n) {
  std::vector<MarchSample> samples(n);
  const double dt = (t1 - t0) / double(n);
  for (size_t k = 0; k < n; ++k) samples[k] = {t0 + (double(k) + 0.5) * dt, dt};
  return samples;
}

PartialRender scalar_partial(uint64_t ray, uint32_t region, double color, double transmittance) {
  PartialRender p;
  p.ray_id = ray;
  p.region_id = region;
  p.color = {color, color, color};
  p.transmittance = transmittance;
  return p;
}

}  // namespace

TEST_CASE("ray_aabb_intersect: axis-aligned cases") {
  const Aabb box{{0, 0, 0}, {1, 1, 1}};
  const auto hit = ray_aabb_intersect(Vec3{-1, 0.5, 0.5}, Vec3{1, 0, 0}, box);
  REQUIRE(hit.has_value());
  CHECK(hit->t_near == doctest::Approx(1.0));
  CHECK(hit->t_far == doctest::Approx(2.0));

  // Origin inside: clipped to the ray start.
  const auto inside = ray_aabb_intersect(Vec3{0.5, 0.5, 0.5}, normalize(Vec3{1, 2, 3}), box);
  REQUIRE(inside.has_value());
  CHECK(inside->t_near == 0.0);

  // Zero direction component, origin outside that slab.
  CHECK_FALSE(ray_aabb_intersect(Vec3{-1, 2.0, 0.5}, Vec3{1, 0, 0}, box).has_value());
  // Zero direction component, origin inside the slab.
  CHECK(ray_aabb_intersect(Vec3{-1, 0.5, 0.5}, Vec3{1, 0, 0}, box).has_value());
  // Pointing away.
  CHECK_FALSE(ray_aabb_intersect(Vec3{-1, 0.5, 0.5}, Vec3{-1, 0, 0}, box).has_value());
}

TEST_CASE("ray_aabb_intersect agrees with a dense membership oracle") {
  const Aabb box{{-0.4, 0.1, -1.0}, {0.9, 1.3, 0.2}};
  Rng rng(17);
  int hits = 0;
  for (int trial = 0; trial < 300; ++trial) {
    const Vec3 origin{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
    Vec3 dir{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    if (length(dir) < 1e-9) continue;
    dir = normalize(dir);
    const auto hit = ray_aabb_intersect(origin, dir, box);
    const auto scan = testing::scan_ray_box(origin, dir, box, 0.0, 8.0, 100000);
    if (!hit.has_value()) {
      CHECK_FALSE(scan.any);
      continue;
    }
    ++hits;
    if (scan.any) {
      CHECK(std::abs(hit->t_near - scan.first) < 1e-3);  // oracle step is 8e-5
      CHECK(std::abs(hit->t_far - scan.last) < 1e-3);
      CHECK(hit->t_near <= scan.first + 1e-6);
      CHECK(hit->t_far >= scan.last - 1e-6);
    } else {
      // Grazing hit thinner than the scan resolution.
      CHECK(hit->t_far - hit->t_near < 2e-4);
    }
  }
  CHECK(hits > 25);
}

TEST_CASE("march_segment: fully occupied segment lays the midpoint ladder") {
  const std::vector<RayInterval> occupied{{0.0, 1.0}};
  MarchConfig config;
  config.step = 0.25;
  const auto samples = march_segment(0.0, 1.0, occupied, config, 0);
  REQUIRE(samples.size() == 4);
  for (size_t k = 0; k < 4; ++k) {
    CHECK(samples[k].t == doctest::Approx(0.125 + 0.25 * double(k)));
    CHECK(samples[k].delta == doctest::Approx(0.25));
  }
  CHECK(march_segment(0.0, 1.0, {}, config, 0).empty());
  CHECK_THROWS(march_segment(0.0, 1.0, occupied, MarchConfig{}, 0));
}

TEST_CASE("march_segment: samples restricted to the occupied half, delta truncated") {
  const std::vector<RayInterval> occupied{{0.5, 1.0}};
  MarchConfig config;
  config.step = 0.15;
  const auto samples = march_segment(0.0, 1.0, occupied, config, 0);
  REQUIRE(!samples.empty());
  for (const MarchSample& s : samples) {
    CHECK(s.t >= 0.5);
    CHECK(s.t < 1.0);
    CHECK(s.delta <= 0.15 + 1e-15);
    CHECK(s.delta > 0.0);
    CHECK(s.t - 0.5 * config.step + s.delta <= 1.0 + 1e-12);
  }
}

TEST_CASE("march_segment: training jitter is deterministic per (seed, ray, step)") {
  const std::vector<RayInterval> occupied{{0.0, 1.0}};
  MarchConfig config;
  config.step = 0.1;
  config.jitter = true;
  config.jitter_seed = 42;
  config.jitter_step = 7;
  const auto a = march_segment(0.0, 1.0, occupied, config, 3);
  const auto b = march_segment(0.0, 1.0, occupied, config, 3);
  REQUIRE(a.size() == b.size());
  for (size_t k = 0; k < a.size(); ++k) CHECK(a[k].t == b[k].t);
  const auto c = march_segment(0.0, 1.0, occupied, config, 4);
  bool any_diff = c.size() != a.size();
  for (size_t k = 0; !any_diff && k < std::min(a.size(), c.size()); ++k)
    any_diff = a[k].t != c[k].t;
  CHECK(any_diff);
}

TEST_CASE("local_render: zero sigma gives color 0, transmittance 1") {
  const auto samples = uniform_samples(0.0, 1.0, 16);
  std::vector<ShadedSample> shaded(16, ShadedSample{0.0, {0.7, 0.2, 0.1}});
  const PartialRender p = local_render(0, 0, samples, shaded);
  CHECK(p.color.x == 0.0);
  CHECK(p.transmittance == 1.0);
}

TEST_CASE("local_render converges to the constant-sigma analytic integral") {
  const double sigma = 2.3;
  const Vec3 c{0.6, 0.3, 0.9};
  const double len = 1.7;
  double prev_err = 1e9;
  for (size_t n : {256, 1024, 4096}) {
    const auto samples = uniform_samples(0.0, len, n);
    std::vector<ShadedSample> shaded(n, ShadedSample{sigma, c});
    const PartialRender p = local_render(0, 0, samples, shaded);
    const double expect_t = std::exp(-sigma * len);
    CHECK(testing::rel_error(p.transmittance, expect_t) < 1e-10);  // exact for constant sigma
    const double expect_c = 0.6 * (1.0 - expect_t);
    const double err = std::abs(p.color.x - expect_c);
    CHECK(err < prev_err + 1e-15);
    prev_err = err;
  }
  CHECK(prev_err < 1e-3);
}

TEST_CASE("local_render matches a dense quadrature oracle on a smooth field") {
  // Gaussian density bump along the ray, rendered with the library at
  // dt = len/4096 against an independent 10^5-point evaluation.
  const auto sigma_at = [](double t) { return 5.0 * std::exp(-40.0 * (t - 0.6) * (t - 0.6)); };
  const auto color_at = [](double t) { return Vec3{0.5 + 0.3 * t, 0.9 - 0.4 * t, 0.2}; };
  const double len = 1.2;

  const size_t n = 4096;
  auto samples = uniform_samples(0.0, len, n);
  std::vector<ShadedSample> shaded(n);
  for (size_t k = 0; k < n; ++k) shaded[k] = {sigma_at(samples[k].t), color_at(samples[k].t)};
  const PartialRender got = local_render(0, 0, samples, shaded);

  double transmittance = 1.0;
  Vec3 color;
  const size_t m = 100000;
  const double dt = len / double(m);
  for (size_t k = 0; k < m; ++k) {
    const double t = (double(k) + 0.5) * dt;
    const double alpha = 1.0 - std::exp(-sigma_at(t) * dt);
    color += color_at(t) * (transmittance * alpha);
    transmittance *= 1.0 - alpha;
  }
  CHECK(testing::rel_error(got.transmittance, transmittance) < 1e-3);
  for (int k = 0; k < 3; ++k) CHECK(testing::rel_error(got.color[k], color[k]) < 1e-3);
}

TEST_CASE("transmittance factorization: split products equal the full product") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const size_t n = 1 + rng.uniform_index(40);
    std::vector<double> one_minus_alpha(n);
    for (double& v : one_minus_alpha) v = rng.uniform(0.0, 1.0);
    const size_t split = rng.uniform_index(n + 1);
    double full = 1.0, left = 1.0, right = 1.0;
    for (size_t k = 0; k < n; ++k) full *= one_minus_alpha[k];
    for (size_t k = 0; k < split; ++k) left *= one_minus_alpha[k];
    for (size_t k = split; k < n; ++k) right *= one_minus_alpha[k];
    // Left-to-right evaluation, same sample set: equality holds to roundoff.
    CHECK(testing::rel_error(left * right, full) < 1e-14);
  }
}

TEST_CASE("merge_forward: identity, opaque first segment, and the worked example") {
  const PartialRender single = scalar_partial(1, 0, 0.4, 0.3);
  const MergedRender one = merge_forward(std::span<const PartialRender>(&single, 1));
  CHECK(one.color.x == 0.4);
  CHECK(one.transmittance == 0.3);

  const std::vector<PartialRender> opaque{scalar_partial(2, 0, 0.8, 0.0),
                                          scalar_partial(2, 1, 0.5, 0.7)};
  const MergedRender blocked = merge_forward(opaque);
  CHECK(blocked.color.x == doctest::Approx(0.8));
  CHECK(blocked.transmittance == 0.0);

  const std::vector<PartialRender> three{scalar_partial(3, 0, 0.2, 0.5),
                                         scalar_partial(3, 1, 0.4, 0.5),
                                         scalar_partial(3, 2, 0.8, 0.5)};
  const MergedRender merged = merge_forward(three);
  CHECK(merged.color.x == doctest::Approx(0.6));
  CHECK(merged.transmittance == doctest::Approx(0.125));

  CHECK_THROWS(merge_forward(std::span<const PartialRender>{}));
}

TEST_CASE("merge preserves bounds: transmittance in [0,1], color bounded") {
  Rng rng(33);
  for (int trial = 0; trial < 300; ++trial) {
    const size_t k = 1 + rng.uniform_index(4);
    std::vector<PartialRender> partials;
    double expected_color_bound = 0.0;
    for (size_t i = 0; i < k; ++i) {
      PartialRender p;
      p.ray_id = trial;
      p.region_id = uint32_t(i);
      const double t = rng.uniform();
      p.transmittance = t;
      // Physical partials: color bounded by 1 - T within the segment.
      const double mag = (1.0 - t) * rng.uniform();
      p.color = {mag, mag * rng.uniform(), mag * rng.uniform()};
      partials.push_back(p);
      expected_color_bound += mag;
    }
    const MergedRender merged = merge_forward(partials);
    CHECK(merged.transmittance >= 0.0);
    CHECK(merged.transmittance <= 1.0);
    CHECK(merged.color.x <= expected_color_bound + 1e-12);
    CHECK(merged.color.x >= 0.0);
  }
}

TEST_CASE("merge_backward: prefix products and the occlusion path") {
  // i = 0 sees the raw upstream.
  const std::vector<PartialRender> two{scalar_partial(0, 0, 0.2, 0.5),
                                       scalar_partial(0, 1, 0.4, 0.8)};
  const Vec3 up{1.0, 0.0, 0.0};
  const auto grads = merge_backward(up, 0.0, two);
  CHECK(grads[0].color_grad.x == doctest::Approx(1.0));
  CHECK(grads[1].color_grad.x == doctest::Approx(0.5));
  // dL/dT_0 = upstream . C_1 (single later segment, empty exclusion product).
  CHECK(grads[0].transmittance_grad == doctest::Approx(0.4));
  CHECK(grads[1].transmittance_grad == doctest::Approx(0.0));
}

TEST_CASE("merge_backward matches central finite differences") {
  Rng rng(91);
  int checks = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const size_t k = 2 + rng.uniform_index(3);  // K in {2,3,4}
    std::vector<PartialRender> partials(k);
    for (size_t i = 0; i < k; ++i) {
      partials[i].ray_id = trial;
      partials[i].region_id = uint32_t(i);
      partials[i].color = {rng.uniform(), rng.uniform(), rng.uniform()};
      partials[i].transmittance = rng.uniform(0.05, 0.95);
    }
    const Vec3 color_up{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const double t_up = rng.uniform(-1, 1);
    const auto grads = merge_backward(color_up, t_up, partials);

    const auto objective = [&]() {
      const MergedRender m = merge_forward(partials);
      return dot(color_up, m.color) + t_up * m.transmittance;
    };
    const double h = 1e-6;
    for (size_t i = 0; i < k; ++i) {
      for (int c = 0; c < 3; ++c) {
        const double saved = partials[i].color[c];
        partials[i].color[c] = saved + h;
        const double fp = objective();
        partials[i].color[c] = saved - h;
        const double fm = objective();
        partials[i].color[c] = saved;
        CHECK(testing::rel_error(grads[i].color_grad[c], (fp - fm) / (2.0 * h)) < 1e-6);
      }
      const double saved = partials[i].transmittance;
      partials[i].transmittance = saved + h;
      const double fp = objective();
      partials[i].transmittance = saved - h;
      const double fm = objective();
      partials[i].transmittance = saved;
      // Gradients here are O(1); the floor keeps the FD cancellation noise
      // (~1e-10 absolute) from inflating near-zero components.
      const double fd = (fp - fm) / (2.0 * h);
      const double scale = std::max({1.0, std::abs(fd), std::abs(grads[i].transmittance_grad)});
      CHECK(std::abs(grads[i].transmittance_grad - fd) < 1e-6 * scale);
      ++checks;
    }
  }
  CHECK(checks >= 1000);
}

TEST_CASE("segmented rendering equals monolithic compositing on the union sample set") {
  // Random sample lists split at arbitrary boundaries; merging the per-chunk
  // partials must reproduce the single-pass composite to near roundoff.
  Rng rng(123);
  for (int trial = 0; trial < 200; ++trial) {
    const size_t n = 8 + rng.uniform_index(120);
    auto samples = uniform_samples(0.0, 2.0, n);
    std::vector<ShadedSample> shaded(n);
    for (auto& s : shaded)
      s = {rng.uniform(0.0, 8.0), {rng.uniform(), rng.uniform(), rng.uniform()}};

    const PartialRender whole = local_render(0, 0, samples, shaded);

    const size_t k = 2 + rng.uniform_index(3);
    std::vector<size_t> cuts{0, n};
    for (size_t i = 1; i < k; ++i) cuts.push_back(rng.uniform_index(n + 1));
    std::sort(cuts.begin(), cuts.end());

    std::vector<PartialRender> partials;
    for (size_t i = 0; i + 1 < cuts.size(); ++i) {
      const size_t a = cuts[i], b = cuts[i + 1];
      partials.push_back(local_render(
          0, uint32_t(i), std::span<const MarchSample>(samples).subspan(a, b - a),
          std::span<const ShadedSample>(shaded).subspan(a, b - a)));
    }
    const MergedRender merged = merge_forward(partials);
    for (int c = 0; c < 3; ++c)
      CHECK(testing::rel_error(merged.color[c], whole.color[c]) <= 1e-12);
    CHECK(testing::rel_error(merged.transmittance, whole.transmittance) <= 1e-12);
    CHECK(testing::rel_error(merged.depth, whole.depth_sum) <= 1e-11);
  }
}

TEST_CASE("local_render_backward: zero upstream, single-sample closed form") {
  const auto samples = uniform_samples(0.0, 1.0, 8);
  std::vector<ShadedSample> shaded(8);
  Rng rng(7);
  for (auto& s : shaded) s = {rng.uniform(0.0, 3.0), {rng.uniform(), rng.uniform(), rng.uniform()}};
  LocalRenderCache cache;
  local_render(0, 0, samples, shaded, &cache);
  std::vector<double> dsigma(8);
  std::vector<Vec3> dcolor(8);
  local_render_backward(samples, shaded, cache, Vec3{}, 0.0, {}, dsigma, dcolor);
  for (double v : dsigma) CHECK(v == 0.0);
  for (const Vec3& v : dcolor) CHECK((v.x == 0.0 && v.y == 0.0 && v.z == 0.0));

  // One sample: dC/dsigma = delta * exp(-sigma delta) * c.
  const double sigma = 1.3, delta = 0.4;
  const std::vector<MarchSample> one{{0.2, delta}};
  const std::vector<ShadedSample> one_shaded{{sigma, {0.8, 0.5, 0.2}}};
  LocalRenderCache c1;
  local_render(0, 0, one, one_shaded, &c1);
  std::vector<double> ds(1);
  std::vector<Vec3> dc(1);
  local_render_backward(one, one_shaded, c1, Vec3{1, 0, 0}, 0.0, {}, ds, dc);
  CHECK(ds[0] == doctest::Approx(delta * std::exp(-sigma * delta) * 0.8).epsilon(1e-12));
  CHECK(dc[0].x == doctest::Approx(1.0 - std::exp(-sigma * delta)).epsilon(1e-12));
}

TEST_CASE("local_render_backward matches finite differences, weight channel included") {
  Rng rng(2718);
  for (int trial = 0; trial < 40; ++trial) {
    const size_t n = 1 + rng.uniform_index(24);
    auto samples = uniform_samples(0.0, 1.5, n);
    std::vector<ShadedSample> shaded(n);
    for (auto& s : shaded)
      s = {rng.uniform(0.05, 4.0), {rng.uniform(), rng.uniform(), rng.uniform()}};
    const Vec3 color_up{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const double t_up = rng.uniform(-1, 1);
    std::vector<double> weight_up(n);
    for (double& w : weight_up) w = rng.uniform(-1, 1);

    const auto objective = [&]() {
      LocalRenderCache cache;
      const PartialRender p = local_render(0, 0, samples, shaded, &cache);
      double obj = dot(color_up, p.color) + t_up * p.transmittance;
      for (size_t k = 0; k < n; ++k) obj += weight_up[k] * cache.prefix[k] * cache.alpha[k];
      return obj;
    };

    LocalRenderCache cache;
    local_render(0, 0, samples, shaded, &cache);
    std::vector<double> dsigma(n);
    std::vector<Vec3> dcolor(n);
    local_render_backward(samples, shaded, cache, color_up, t_up, weight_up, dsigma, dcolor);

    const double h = 1e-6;
    for (size_t k = 0; k < n; ++k) {
      double& sigma = shaded[k].sigma;
      const double saved = sigma;
      sigma = saved + h;
      const double fp = objective();
      sigma = saved - h;
      const double fm = objective();
      sigma = saved;
      CHECK(testing::rel_error(dsigma[k], (fp - fm) / (2.0 * h)) < 1e-5);
    }
  }
}
