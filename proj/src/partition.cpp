#include "distgrid/partition.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace distgrid {

using nlohmann::json;

void CameraPose::validate() const {
  const Mat3 rt = rotation.transposed();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) acc += rotation(r, k) * rt(k, c);
      const double expect = r == c ? 1.0 : 0.0;
      if (std::abs(acc - expect) > 1e-6)
        throw std::invalid_argument("pose: rotation is not orthonormal");
    }
  }
  if (std::abs(rotation.det() - 1.0) > 1e-6)
    throw std::invalid_argument("pose: rotation determinant is not +1");
  if (fx <= 0.0 || fy <= 0.0 || width == 0 || height == 0)
    throw std::invalid_argument("pose: invalid intrinsics");
}

Vec3 CameraPose::pixel_ray_dir(double x, double y) const {
  const Vec3 cam{(x - cx) / fx, (y - cy) / fy, 1.0};
  return normalize(rotation * cam);
}

uint32_t PartitionManifest::region_at(double x, double y) const {
  auto locate = [](const std::vector<double>& planes, double v) {
    // Index of the cell containing v; interior plane hits resolve to the
    // higher cell, out-of-range clamps to the edge cells.
    const auto it = std::upper_bound(planes.begin() + 1, planes.end() - 1, v);
    return uint32_t(it - planes.begin() - 1);
  };
  const uint32_t ix = locate(x_planes, x);
  const uint32_t iy = locate(y_planes, y);
  return iy * kx + ix;
}

void PartitionManifest::validate() const {
  if (regions.size() != size_t(kx) * ky) throw std::runtime_error("manifest: region count");
  if (x_planes.size() != kx + 1 || y_planes.size() != ky + 1)
    throw std::runtime_error("manifest: plane count");
  if (x_planes.front() != inner.lo.x || x_planes.back() != inner.hi.x ||
      y_planes.front() != inner.lo.y || y_planes.back() != inner.hi.y)
    throw std::runtime_error("manifest: planes do not span the inner box");
  for (size_t i = 0; i + 1 < x_planes.size(); ++i)
    if (!(x_planes[i] < x_planes[i + 1])) throw std::runtime_error("manifest: x planes not increasing");
  for (size_t i = 0; i + 1 < y_planes.size(); ++i)
    if (!(y_planes[i] < y_planes[i + 1])) throw std::runtime_error("manifest: y planes not increasing");

  double fine_volume = 0.0;
  for (uint32_t iy = 0; iy < ky; ++iy) {
    for (uint32_t ix = 0; ix < kx; ++ix) {
      const RegionBox& r = regions[size_t(iy) * kx + ix];
      if (r.region_id != iy * kx + ix) throw std::runtime_error("manifest: region id order");
      // Shared boundaries must be the plane values verbatim.
      if (r.fine.lo.x != x_planes[ix] || r.fine.hi.x != x_planes[ix + 1] ||
          r.fine.lo.y != y_planes[iy] || r.fine.hi.y != y_planes[iy + 1])
        throw std::runtime_error("manifest: fine box not aligned to planes (overlap or gap)");
      if (r.fine.lo.z != inner.lo.z || r.fine.hi.z != inner.hi.z)
        throw std::runtime_error("manifest: altitude range not shared");
      if (!(r.coarse.contains(r.fine))) throw std::runtime_error("manifest: fine not inside coarse");
      const double exp_lo_x = ix == 0 ? outer.lo.x : x_planes[ix];
      const double exp_hi_x = ix == kx - 1 ? outer.hi.x : x_planes[ix + 1];
      const double exp_lo_y = iy == 0 ? outer.lo.y : y_planes[iy];
      const double exp_hi_y = iy == ky - 1 ? outer.hi.y : y_planes[iy + 1];
      if (r.coarse.lo.x != exp_lo_x || r.coarse.hi.x != exp_hi_x || r.coarse.lo.y != exp_lo_y ||
          r.coarse.hi.y != exp_hi_y)
        throw std::runtime_error("manifest: coarse box not aligned to planes (overlap or gap)");
      if (r.coarse.lo.z != outer.lo.z || r.coarse.hi.z != outer.hi.z)
        throw std::runtime_error("manifest: coarse altitude range");
      fine_volume += r.fine.volume();
    }
  }
  if (std::abs(fine_volume - inner.volume()) > 1e-9 * std::max(1.0, inner.volume()))
    throw std::runtime_error("manifest: fine boxes do not tile the inner box");
}

namespace {

json aabb_to_json(const Aabb& b) {
  return json{{"min", {b.lo.x, b.lo.y, b.lo.z}}, {"max", {b.hi.x, b.hi.y, b.hi.z}}};
}

Aabb aabb_from_json(const json& j) {
  Aabb b;
  b.lo = {j.at("min").at(0), j.at("min").at(1), j.at("min").at(2)};
  b.hi = {j.at("max").at(0), j.at("max").at(1), j.at("max").at(2)};
  return b;
}

}  // namespace

std::string PartitionManifest::to_json() const {
  json j;
  j["k"] = {kx, ky};
  j["inner"] = aabb_to_json(inner);
  j["outer"] = aabb_to_json(outer);
  j["ground_altitude"] = ground_altitude;
  j["x_planes"] = x_planes;
  j["y_planes"] = y_planes;
  j["regions"] = json::array();
  for (const RegionBox& r : regions) {
    j["regions"].push_back(json{{"id", r.region_id},
                                {"fine", aabb_to_json(r.fine)},
                                {"coarse", aabb_to_json(r.coarse)},
                                {"neighbors", r.neighbor_ids}});
  }
  return j.dump(2);
}

PartitionManifest PartitionManifest::from_json(const std::string& text) {
  const json j = json::parse(text);
  PartitionManifest m;
  m.kx = j.at("k").at(0);
  m.ky = j.at("k").at(1);
  m.inner = aabb_from_json(j.at("inner"));
  m.outer = aabb_from_json(j.at("outer"));
  m.ground_altitude = j.at("ground_altitude");
  m.x_planes = j.at("x_planes").get<std::vector<double>>();
  m.y_planes = j.at("y_planes").get<std::vector<double>>();
  for (const json& rj : j.at("regions")) {
    RegionBox r;
    r.region_id = rj.at("id");
    r.fine = aabb_from_json(rj.at("fine"));
    r.coarse = aabb_from_json(rj.at("coarse"));
    r.neighbor_ids = rj.at("neighbors").get<std::vector<uint32_t>>();
    m.regions.push_back(std::move(r));
  }
  m.validate();
  return m;
}

std::array<Vec3, 4> project_fov_footprint(const CameraPose& pose, double ground_altitude) {
  const double w = double(pose.width), h = double(pose.height);
  const std::array<std::pair<double, double>, 4> corners{
      {{0.0, 0.0}, {w, 0.0}, {w, h}, {0.0, h}}};
  std::array<Vec3, 4> footprint;
  for (size_t i = 0; i < 4; ++i) {
    const Vec3 dir = pose.pixel_ray_dir(corners[i].first, corners[i].second);
    const double dz = dir.z;
    const double height_above = pose.translation.z - ground_altitude;
    if (dz == 0.0) throw std::runtime_error("footprint: corner ray parallel to the ground plane");
    const double t = (ground_altitude - pose.translation.z) / dz;
    if (!(t > 0.0) || !std::isfinite(t) || height_above <= 0.0)
      throw std::runtime_error("footprint: corner ray does not reach the ground plane");
    footprint[i] = pose.translation + dir * t;
  }
  return footprint;
}

SceneBoxes compute_boxes(const std::vector<CameraPose>& poses, double ground_altitude,
                         double altitude_margin, double min_inner_fraction) {
  SceneBoxes out;
  Aabb outer;
  Aabb camera_xy;
  bool any = false;
  for (const CameraPose& pose : poses) {
    std::array<Vec3, 4> footprint;
    try {
      footprint = project_fov_footprint(pose, ground_altitude);
    } catch (const std::runtime_error&) {
      ++out.skipped_poses;
      continue;
    }
    any = true;
    for (const Vec3& p : footprint) outer.expand(p);
    outer.expand(pose.translation);
    camera_xy.expand(pose.translation);
  }
  if (!any) throw std::runtime_error("compute_boxes: no usable poses");

  outer.lo.z = std::min(outer.lo.z, ground_altitude) - altitude_margin;
  outer.hi.z += altitude_margin;

  Aabb inner;
  inner.lo = {camera_xy.lo.x, camera_xy.lo.y, outer.lo.z};
  inner.hi = {camera_xy.hi.x, camera_xy.hi.y, outer.hi.z};

  // Degenerate camera layouts (single camera, a line of cameras) get a
  // minimum footprint so the fine grid has volume.
  for (int axis = 0; axis < 2; ++axis) {
    const double min_extent = min_inner_fraction * (outer.hi[axis] - outer.lo[axis]);
    if (inner.hi[axis] - inner.lo[axis] < min_extent) {
      const double mid = 0.5 * (inner.lo[axis] + inner.hi[axis]);
      inner.lo[axis] = mid - 0.5 * min_extent;
      inner.hi[axis] = mid + 0.5 * min_extent;
    }
    // Keep the inner box inside the outer box.
    inner.lo[axis] = std::max(inner.lo[axis], outer.lo[axis]);
    inner.hi[axis] = std::min(inner.hi[axis], outer.hi[axis]);
  }
  out.inner = inner;
  out.outer = outer;
  return out;
}

PartitionManifest split_regions(const Aabb& inner, const Aabb& outer, uint32_t kx, uint32_t ky,
                                double ground_altitude) {
  if (kx < 1 || ky < 1) throw std::invalid_argument("split_regions: kx, ky must be >= 1");
  PartitionManifest m;
  m.kx = kx;
  m.ky = ky;
  m.inner = inner;
  m.outer = outer;
  m.ground_altitude = ground_altitude;

  // Plane coordinates are computed once; every adjacent box reuses the same
  // value so shared boundaries compare equal bitwise.
  m.x_planes.resize(kx + 1);
  m.y_planes.resize(ky + 1);
  for (uint32_t i = 0; i <= kx; ++i)
    m.x_planes[i] = i == 0 ? inner.lo.x
                  : i == kx ? inner.hi.x
                            : inner.lo.x + (inner.hi.x - inner.lo.x) * double(i) / double(kx);
  for (uint32_t i = 0; i <= ky; ++i)
    m.y_planes[i] = i == 0 ? inner.lo.y
                  : i == ky ? inner.hi.y
                            : inner.lo.y + (inner.hi.y - inner.lo.y) * double(i) / double(ky);

  for (uint32_t iy = 0; iy < ky; ++iy) {
    for (uint32_t ix = 0; ix < kx; ++ix) {
      RegionBox r;
      r.region_id = iy * kx + ix;
      r.fine.lo = {m.x_planes[ix], m.y_planes[iy], inner.lo.z};
      r.fine.hi = {m.x_planes[ix + 1], m.y_planes[iy + 1], inner.hi.z};
      r.coarse.lo = {ix == 0 ? outer.lo.x : m.x_planes[ix],
                     iy == 0 ? outer.lo.y : m.y_planes[iy], outer.lo.z};
      r.coarse.hi = {ix == kx - 1 ? outer.hi.x : m.x_planes[ix + 1],
                     iy == ky - 1 ? outer.hi.y : m.y_planes[iy + 1], outer.hi.z};
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          if (dx == 0 && dy == 0) continue;
          const int nx = int(ix) + dx, ny = int(iy) + dy;
          if (nx >= 0 && nx < int(kx) && ny >= 0 && ny < int(ky))
            r.neighbor_ids.push_back(uint32_t(ny) * kx + uint32_t(nx));
        }
      }
      m.regions.push_back(std::move(r));
    }
  }
  m.validate();
  return m;
}

std::vector<RaySegment> segment_ray(const Ray& ray, const PartitionManifest& manifest) {
  std::vector<RaySegment> segments;
  const auto hit = ray_aabb_intersect(ray, manifest.outer);
  if (!hit || !(hit->t_far > hit->t_near)) return segments;

  // Boundary t values: the outer-box entry/exit plus every interior plane
  // crossing inside the interval. Each value is computed exactly once and
  // shared by the two segments it separates.
  std::vector<double> cuts{hit->t_near, hit->t_far};
  auto add_plane_crossings = [&](const std::vector<double>& planes, int axis) {
    const double d = ray.dir[axis];
    if (d == 0.0) return;
    for (size_t i = 1; i + 1 < planes.size(); ++i) {
      const double t = (planes[i] - ray.origin[axis]) / d;
      if (t > hit->t_near && t < hit->t_far) cuts.push_back(t);
    }
  };
  add_plane_crossings(manifest.x_planes, 0);
  add_plane_crossings(manifest.y_planes, 1);
  std::sort(cuts.begin(), cuts.end());

  uint32_t order = 0;
  for (size_t i = 0; i + 1 < cuts.size(); ++i) {
    if (!(cuts[i + 1] > cuts[i])) continue;  // coincident crossings collapse
    const double t_mid = 0.5 * (cuts[i] + cuts[i + 1]);
    const Vec3 p = ray.at(t_mid);
    RaySegment seg;
    seg.ray_id = ray.pixel_id;
    seg.region_id = manifest.region_at(p.x, p.y);
    seg.order_index = order++;
    seg.t_enter = cuts[i];
    seg.t_exit = cuts[i + 1];
    // Merge consecutive cuts that landed in the same region (can happen when
    // a crossing sits exactly on the outer boundary).
    if (!segments.empty() && segments.back().region_id == seg.region_id) {
      segments.back().t_exit = seg.t_exit;
      --order;
    } else {
      segments.push_back(seg);
    }
  }
  return segments;
}

}  // namespace distgrid
