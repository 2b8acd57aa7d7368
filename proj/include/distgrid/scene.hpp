#pragma once

#include <string>
#include <vector>

#include "distgrid/vecmath.hpp"

namespace distgrid {

/// Analytic volumetric test scene: a sum of Gaussian blobs and constant-sigma
/// boxes (plus an optional ground slab, which is just a box). sigma(x) >= 0
/// everywhere, and the emitted color is the sigma-weighted mix of primitive
/// colors.
struct GaussianBlob {
  Vec3 center;
  Vec3 stddev;  // per-axis, positive
  double peak = 1.0;
  Vec3 color;
};

struct DensityBox {
  Aabb box;
  double sigma = 1.0;
  Vec3 color;
};

struct SyntheticScene {
  std::vector<GaussianBlob> blobs;
  std::vector<DensityBox> boxes;
  Aabb outer_box;
  double ground_altitude = 0.0;

  double sigma_at(const Vec3& p) const;
  /// sigma-weighted color; zero where sigma is zero.
  Vec3 color_at(const Vec3& p) const;

  std::string to_json() const;
  static SyntheticScene from_json(const std::string& text);

  /// Four blobs over a ground slab, centered in a 4 x 4 x 2 box. The standard
  /// small training fixture.
  static SyntheticScene blob4_preset();
};

}  // namespace distgrid
