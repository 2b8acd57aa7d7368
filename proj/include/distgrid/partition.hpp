#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "distgrid/render.hpp"
#include "distgrid/vecmath.hpp"

namespace distgrid {

/// Camera-to-world pose plus pinhole intrinsics. Image x is right, image y is
/// down, camera +z looks forward; world z is altitude.
struct CameraPose {
  uint32_t image_id = 0;
  Mat3 rotation;     // camera-to-world
  Vec3 translation;  // camera position, scene units
  double fx = 0.0, fy = 0.0;
  double cx = 0.0, cy = 0.0;
  uint32_t width = 0, height = 0;

  /// Throws unless the rotation is orthonormal with determinant +1 (1e-6).
  void validate() const;

  /// World-space unit direction through pixel (x, y).
  Vec3 pixel_ray_dir(double x, double y) const;
};

/// One region: the fine box is the carefully reconstructed core, the coarse
/// box extends it to the outer bounds on scene-edge sides. fine is contained
/// in coarse; both share the global altitude range.
struct RegionBox {
  uint32_t region_id = 0;
  Aabb fine;
  Aabb coarse;
  std::vector<uint32_t> neighbor_ids;
};

struct PartitionManifest {
  uint32_t kx = 1, ky = 1;
  Aabb inner;  // union of fine boxes
  Aabb outer;  // union of coarse boxes
  double ground_altitude = 0.0;
  std::vector<RegionBox> regions;
  // Interior split planes, shared verbatim by all adjacent boxes.
  std::vector<double> x_planes;  // size kx + 1, includes inner bounds
  std::vector<double> y_planes;  // size ky + 1

  uint32_t region_count() const { return kx * ky; }
  uint32_t region_at(double x, double y) const;

  /// Verifies the closely-paved tiling: boundaries shared exactly, fine boxes
  /// cover the inner box, coarse boxes cover the outer box. Throws on any
  /// overlap or gap.
  void validate() const;

  std::string to_json() const;
  static PartitionManifest from_json(const std::string& text);
};

/// Intersection of the four image-corner rays with the ground plane
/// z = ground_altitude, in consistent winding order. Throws when a corner ray
/// is parallel to the plane or diverges from it.
std::array<Vec3, 4> project_fov_footprint(const CameraPose& pose, double ground_altitude);

struct SceneBoxes {
  Aabb inner;
  Aabb outer;
  uint32_t skipped_poses = 0;  // cameras whose footprint was unusable
};

/// Outer box wraps all usable camera footprints and camera positions,
/// expanded vertically by altitude_margin; the inner box wraps the camera
/// x/y positions over the same altitude range. Degenerate inner extents are
/// widened to min_inner_fraction of the outer extent.
SceneBoxes compute_boxes(const std::vector<CameraPose>& poses, double ground_altitude,
                         double altitude_margin, double min_inner_fraction = 0.01);

/// Cuts the inner box at equally spaced x/y planes into kx*ky fine boxes; the
/// outer box is cut at the same plane coordinates, so edge regions' coarse
/// boxes extend to the outer bounds.
PartitionManifest split_regions(const Aabb& inner, const Aabb& outer, uint32_t kx, uint32_t ky,
                                double ground_altitude);

/// Splits a ray by the manifest's interior planes into per-region segments
/// ordered by t_enter. Consecutive segments share boundary t values exactly.
/// Rays missing the outer box produce an empty list.
std::vector<RaySegment> segment_ray(const Ray& ray, const PartitionManifest& manifest);

}  // namespace distgrid
