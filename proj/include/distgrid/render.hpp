#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "distgrid/geometry.hpp"
#include "distgrid/grid.hpp"
#include "distgrid/vecmath.hpp"

namespace distgrid {

/// One ray restricted to one region. Consecutive segments of a ray share
/// their boundary t values exactly (computed once, reused).
struct RaySegment {
  uint64_t ray_id = 0;
  uint32_t region_id = 0;
  uint32_t order_index = 0;  // position along the ray, 0..K-1
  double t_enter = 0.0;
  double t_exit = 0.0;
};

/// Per-(ray, region) rendering result; the only quantity exchanged between
/// workers during training.
struct PartialRender {
  uint64_t ray_id = 0;
  uint32_t region_id = 0;
  Vec3 color;
  double transmittance = 1.0;
  // Auxiliary (not exchanged unless enabled): expected-termination sum and
  // distortion aggregates over local compositing weights.
  double depth_sum = 0.0;
  double weight_sum = 0.0;       // sum of local weights
  double weight_moment = 0.0;    // sum of local weight * midpoint
  double distortion_local = 0.0; // pairwise + interval term over local weights
};

struct MergedRender {
  uint64_t ray_id = 0;
  Vec3 color;
  double transmittance = 1.0;
  double depth = 0.0;
};

/// Quadrature sample: midpoint t, covered length delta, and the position.
struct MarchSample {
  double t = 0.0;
  double delta = 0.0;
};

struct MarchConfig {
  double step = 0.0;          // delta t, > 0
  bool jitter = false;        // training mode: uniform ladder offset in [0, step)
  uint64_t jitter_seed = 0;   // combined with the ray id and step index
  uint64_t jitter_step = 0;   // training iteration
};

/// Samples the ladder t_enter + offset + k*step restricted to the occupied
/// intervals; offset is step/2 in evaluation mode and uniform in [0, step) in
/// training mode. delta is truncated at each interval's end.
std::vector<MarchSample> march_segment(double t_enter, double t_exit,
                                       std::span<const RayInterval> occupied,
                                       const MarchConfig& config, uint64_t ray_id);

/// Convenience overload walking a single occupancy grid.
std::vector<MarchSample> march_segment(const Ray& ray, const RaySegment& segment,
                                       const OccupancyGrid& occ, const MarchConfig& config);

/// Density/color pairs attached to march samples.
struct ShadedSample {
  double sigma = 0.0;
  Vec3 color;
};

/// Alpha-compositing caches kept for the backward pass.
struct LocalRenderCache {
  std::vector<double> alpha;
  std::vector<double> prefix;  // transmittance before each sample, within the segment
};

/// Standard alpha-compositing quadrature over one segment's samples:
/// alpha_k = 1 - exp(-sigma_k * delta_k), color = sum prefix_k alpha_k c_k,
/// transmittance = prod (1 - alpha_k).
PartialRender local_render(uint64_t ray_id, uint32_t region_id,
                           std::span<const MarchSample> samples,
                           std::span<const ShadedSample> shaded,
                           LocalRenderCache* cache = nullptr);

/// Adds the distortion aggregates (weight sums, first moments, pairwise term)
/// to a partial, with sample midpoints normalized by the ray's global span.
void accumulate_distortion_stats(PartialRender& partial, std::span<const MarchSample> samples,
                                 const LocalRenderCache& cache, double ray_t0, double ray_t1);

/// Merge of ordered per-segment partials:
///   C = sum_i (prod_{j<i} T_j) C_i,   T = prod_i T_i.
/// Throws on missing or duplicated order indices.
MergedRender merge_forward(std::span<const PartialRender> partials);

struct MergeGrad {
  Vec3 color_grad;          // dL/dC_i
  double transmittance_grad = 0.0;  // dL/dT_i
};

/// Manual adjoint of merge_forward:
///   dL/dC_i = dL/dC * prod_{j<i} T_j
///   dL/dT_i = dL/dT * prod_{j!=i} T_j + dL/dC . sum_{k>i} (prod_{j<k,j!=i} T_j) C_k
std::vector<MergeGrad> merge_backward(const Vec3& color_upstream, double transmittance_upstream,
                                      std::span<const PartialRender> partials);

/// Adjoint of local_render, extended with an optional per-sample upstream on
/// the local compositing weight w_k = prefix_k * alpha_k (used by the
/// distortion loss). Writes dL/dsigma_k and dL/dc_k.
void local_render_backward(std::span<const MarchSample> samples,
                           std::span<const ShadedSample> shaded, const LocalRenderCache& cache,
                           const Vec3& color_upstream, double transmittance_upstream,
                           std::span<const double> weight_upstream,
                           std::span<double> sigma_grads, std::span<Vec3> color_grads);

}  // namespace distgrid
