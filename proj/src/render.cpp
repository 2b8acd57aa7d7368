#include "distgrid/render.hpp"

#include <cmath>
#include <stdexcept>

#include "distgrid/rng.hpp"

namespace distgrid {

std::vector<MarchSample> march_segment(double t_enter, double t_exit,
                                       std::span<const RayInterval> occupied,
                                       const MarchConfig& config, uint64_t ray_id) {
  if (!(config.step > 0.0)) throw std::invalid_argument("march: step must be positive");
  std::vector<MarchSample> samples;
  if (!(t_exit > t_enter)) return samples;

  const double offset = config.jitter
                            ? config.step * counter_uniform(config.jitter_seed, ray_id,
                                                            config.jitter_step)
                            : 0.5 * config.step;

  for (const RayInterval& interval : occupied) {
    const double lo = std::max(interval.t_near, t_enter);
    const double hi = std::min(interval.t_far, t_exit);
    if (!(hi > lo)) continue;
    // First ladder point at or after lo.
    int64_t k = int64_t(std::ceil((lo - t_enter - offset) / config.step));
    if (k < 0) k = 0;
    for (;; ++k) {
      const double t = t_enter + offset + double(k) * config.step;
      if (t >= hi) break;
      const double slab_start = t - 0.5 * config.step;
      samples.push_back({t, std::min(config.step, hi - slab_start)});
    }
  }
  return samples;
}

std::vector<MarchSample> march_segment(const Ray& ray, const RaySegment& segment,
                                       const OccupancyGrid& occ, const MarchConfig& config) {
  const std::vector<RayInterval> occupied =
      occupancy_skip(ray, segment.t_enter, segment.t_exit, occ);
  return march_segment(segment.t_enter, segment.t_exit, occupied, config, segment.ray_id);
}

PartialRender local_render(uint64_t ray_id, uint32_t region_id,
                           std::span<const MarchSample> samples,
                           std::span<const ShadedSample> shaded, LocalRenderCache* cache) {
  if (samples.size() != shaded.size())
    throw std::invalid_argument("render: sample/shading size mismatch");

  PartialRender out;
  out.ray_id = ray_id;
  out.region_id = region_id;
  if (cache) {
    cache->alpha.resize(samples.size());
    cache->prefix.resize(samples.size());
  }

  double prefix = 1.0;  // transmittance accumulated within this segment
  Vec3 color;
  double depth_sum = 0.0;
  for (size_t k = 0; k < samples.size(); ++k) {
    const double alpha = 1.0 - std::exp(-shaded[k].sigma * samples[k].delta);
    if (cache) {
      cache->alpha[k] = alpha;
      cache->prefix[k] = prefix;
    }
    const double w = prefix * alpha;
    color += shaded[k].color * w;
    depth_sum += w * samples[k].t;
    prefix *= 1.0 - alpha;
  }
  out.color = color;
  out.transmittance = prefix;
  out.depth_sum = depth_sum;
  return out;
}

void accumulate_distortion_stats(PartialRender& partial, std::span<const MarchSample> samples,
                                 const LocalRenderCache& cache, double ray_t0, double ray_t1) {
  const double span = ray_t1 - ray_t0;
  if (!(span > 0.0)) return;
  const double inv_span = 1.0 / span;

  // Samples are sorted in t, so the pairwise term reduces to prefix sums.
  double w_sum = 0.0, m_sum = 0.0, pair_sum = 0.0, interval_sum = 0.0;
  for (size_t k = 0; k < samples.size(); ++k) {
    const double w = cache.prefix[k] * cache.alpha[k];
    const double s = (samples[k].t - ray_t0) * inv_span;
    pair_sum += 2.0 * w * (s * w_sum - m_sum);
    interval_sum += w * w * samples[k].delta * inv_span;
    w_sum += w;
    m_sum += w * s;
  }
  partial.weight_sum = w_sum;
  partial.weight_moment = m_sum;
  partial.distortion_local = pair_sum + interval_sum / 3.0;
}

MergedRender merge_forward(std::span<const PartialRender> partials) {
  if (partials.empty()) throw std::invalid_argument("merge: no partials");

  MergedRender merged;
  merged.ray_id = partials[0].ray_id;
  double prefix = 1.0;  // T(t_-1, t_0) = 1
  double depth = 0.0;
  for (size_t i = 0; i < partials.size(); ++i) {
    merged.color += partials[i].color * prefix;
    depth += partials[i].depth_sum * prefix;
    prefix *= partials[i].transmittance;
  }
  merged.transmittance = prefix;
  merged.depth = depth;
  return merged;
}

std::vector<MergeGrad> merge_backward(const Vec3& color_upstream, double transmittance_upstream,
                                      std::span<const PartialRender> partials) {
  const size_t n = partials.size();
  std::vector<MergeGrad> grads(n);

  // Prefix products P_i = prod_{j<i} T_j and suffix products S_i = prod_{j>=i} T_j,
  // so prod_{j != i} T_j = P_i * S_{i+1} without dividing by possibly-zero T_i.
  std::vector<double> prefix(n + 1, 1.0), suffix(n + 1, 1.0);
  for (size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] * partials[i].transmittance;
  for (size_t i = n; i-- > 0;) suffix[i] = partials[i].transmittance * suffix[i + 1];

  for (size_t i = 0; i < n; ++i) {
    grads[i].color_grad = color_upstream * prefix[i];

    double t_grad = transmittance_upstream * prefix[i] * suffix[i + 1];
    // Occlusion path: T_i scales every later segment's color contribution.
    double running = 1.0;  // prod_{i<j<k} T_j
    double color_term = 0.0;
    for (size_t k = i + 1; k < n; ++k) {
      color_term += running * dot(color_upstream, partials[k].color);
      running *= partials[k].transmittance;
    }
    grads[i].transmittance_grad = t_grad + prefix[i] * color_term;
  }
  return grads;
}

void local_render_backward(std::span<const MarchSample> samples,
                           std::span<const ShadedSample> shaded, const LocalRenderCache& cache,
                           const Vec3& color_upstream, double transmittance_upstream,
                           std::span<const double> weight_upstream,
                           std::span<double> sigma_grads, std::span<Vec3> color_grads) {
  const size_t n = samples.size();
  if (cache.alpha.size() != n || cache.prefix.size() != n)
    throw std::invalid_argument("render: backward requires the forward cache");
  if (sigma_grads.size() != n || color_grads.size() != n)
    throw std::invalid_argument("render: gradient output size mismatch");
  if (!weight_upstream.empty() && weight_upstream.size() != n)
    throw std::invalid_argument("render: weight upstream size mismatch");

  // Reverse sweep. `tail_color` carries sum_{m>k} prod_{k<j<m}(1-alpha_j) *
  // alpha_m * u_m where u folds the color dot product and the per-weight
  // upstream; `tail_trans` carries prod_{j>k}(1-alpha_j). Multiplying by the
  // cached prefix reconstructs every term without dividing by (1-alpha).
  double tail_color = 0.0;
  double tail_trans = 1.0;
  for (size_t k = n; k-- > 0;) {
    const double alpha = cache.alpha[k];
    const double prefix = cache.prefix[k];
    const double u = dot(color_upstream, shaded[k].color) +
                     (weight_upstream.empty() ? 0.0 : weight_upstream[k]);

    const double alpha_grad =
        prefix * (u - tail_color) - transmittance_upstream * prefix * tail_trans;
    // d alpha / d sigma = delta * exp(-sigma delta) = delta * (1 - alpha)
    sigma_grads[k] = alpha_grad * samples[k].delta * (1.0 - alpha);
    color_grads[k] = color_upstream * (prefix * alpha);

    tail_color = alpha * u + (1.0 - alpha) * tail_color;
    tail_trans *= 1.0 - alpha;
  }
}

}  // namespace distgrid
