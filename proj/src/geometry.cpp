#include "distgrid/geometry.hpp"

#include <cmath>

namespace distgrid {

std::optional<RayInterval> ray_aabb_intersect(const Vec3& origin, const Vec3& dir, const Aabb& box) {
  double t_near = 0.0;  // rays start at their origin
  double t_far = std::numeric_limits<double>::infinity();

  for (int axis = 0; axis < 3; ++axis) {
    const double o = origin[axis];
    const double d = dir[axis];
    const double lo = box.lo[axis];
    const double hi = box.hi[axis];
    if (d == 0.0) {
      if (o < lo || o > hi) return std::nullopt;
      continue;  // slab spans (-inf, +inf)
    }
    double t0 = (lo - o) / d;
    double t1 = (hi - o) / d;
    if (t0 > t1) std::swap(t0, t1);
    t_near = std::max(t_near, t0);
    t_far = std::min(t_far, t1);
    if (t_near > t_far) return std::nullopt;
  }
  return RayInterval{t_near, t_far};
}

}  // namespace distgrid
