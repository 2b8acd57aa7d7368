#pragma once

#include <cstdint>

#include "distgrid/geometry.hpp"
#include "distgrid/scene.hpp"

namespace distgrid {

struct OracleResult {
  Vec3 color;
  double transmittance = 1.0;
};

/// Dense uniform quadrature of the volume rendering integral over the
/// analytic scene, with no occupancy skipping and no partitioning. This is
/// the independent reference for every rendering path; it deliberately shares
/// no sampling code with the training renderer.
OracleResult oracle_render(const SyntheticScene& scene, const Ray& ray, double t0, double t1,
                           uint64_t n_samples = 100000);

/// Oracle over the ray's intersection with the scene's outer box; rays that
/// miss return background (color 0, transmittance 1).
OracleResult oracle_render(const SyntheticScene& scene, const Ray& ray,
                           uint64_t n_samples = 100000);

}  // namespace distgrid
