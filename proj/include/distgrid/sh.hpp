#pragma once

#include <span>

#include "distgrid/vecmath.hpp"

namespace distgrid {

inline constexpr int kShDegree = 4;
inline constexpr int kShWidth = kShDegree * kShDegree;  // 16

/// Real spherical-harmonics basis up to degree 4 (bands l = 0..3), evaluated
/// at a unit direction. Coefficient order is (l, m) ascending.
inline void sh_encode(const Vec3& d, std::span<double> out) {
  const double x = d.x, y = d.y, z = d.z;
  const double xy = x * y, xz = x * z, yz = y * z;
  const double x2 = x * x, y2 = y * y, z2 = z * z;

  out[0] = 0.28209479177387814;
  out[1] = -0.48860251190291987 * y;
  out[2] = 0.48860251190291987 * z;
  out[3] = -0.48860251190291987 * x;
  out[4] = 1.0925484305920792 * xy;
  out[5] = -1.0925484305920792 * yz;
  out[6] = 0.31539156525252005 * (3.0 * z2 - 1.0);
  out[7] = -1.0925484305920792 * xz;
  out[8] = 0.5462742152960396 * (x2 - y2);
  out[9] = -0.5900435899266435 * y * (3.0 * x2 - y2);
  out[10] = 2.890611442640554 * xy * z;
  out[11] = -0.4570457994644658 * y * (5.0 * z2 - 1.0);
  out[12] = 0.3731763325901154 * z * (5.0 * z2 - 3.0);
  out[13] = -0.4570457994644658 * x * (5.0 * z2 - 1.0);
  out[14] = 1.445305721320277 * z * (x2 - y2);
  out[15] = -0.5900435899266435 * x * (x2 - 3.0 * y2);
}

}  // namespace distgrid
