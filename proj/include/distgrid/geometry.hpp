#pragma once

#include <cstdint>
#include <optional>

#include "distgrid/vecmath.hpp"

namespace distgrid {

/// A world-space ray with unit direction. pixel_id/image_id identify the
/// supervising pixel when the ray comes from a dataset.
struct Ray {
  Vec3 origin;
  Vec3 dir;  // unit length
  uint64_t pixel_id = 0;
  uint32_t image_id = 0;

  Vec3 at(double t) const { return origin + dir * t; }
};

struct RayInterval {
  double t_near = 0.0;
  double t_far = 0.0;
};

/// Slab-method ray/AABB intersection. Zero direction components follow the
/// +-inf slab convention. The returned interval is clipped to t >= 0; an
/// empty overlap is a miss, not an error.
std::optional<RayInterval> ray_aabb_intersect(const Vec3& origin, const Vec3& dir, const Aabb& box);

inline std::optional<RayInterval> ray_aabb_intersect(const Ray& ray, const Aabb& box) {
  return ray_aabb_intersect(ray.origin, ray.dir, box);
}

}  // namespace distgrid
