#include "distgrid/grid.hpp"

#include <cmath>
#include <stdexcept>

namespace distgrid {

namespace {

constexpr uint32_t kHashPrimeY = 2654435761u;
constexpr uint32_t kHashPrimeZ = 805459861u;

bool is_power_of_two(uint32_t v) { return v != 0 && (v & (v - 1)) == 0; }

struct CornerWeights {
  // Per axis: low index, high index (clamped), fractional weight on high.
  uint32_t i0[3];
  uint32_t i1[3];
  double frac[3];
};

CornerWeights lattice_weights(const Vec3& point, const LevelShape& shape) {
  const uint32_t extents[3] = {shape.nx, shape.ny, shape.nz};
  CornerWeights cw;
  for (int axis = 0; axis < 3; ++axis) {
    const uint32_t n = extents[axis];
    if (n == 1) {  // degenerate axis: all weight on index 0
      cw.i0[axis] = 0;
      cw.i1[axis] = 0;
      cw.frac[axis] = 0.0;
      continue;
    }
    const double pos = point[axis] * double(n - 1);
    uint32_t i0 = uint32_t(std::floor(pos));
    if (i0 > n - 1) i0 = n - 1;
    cw.i0[axis] = i0;
    cw.i1[axis] = std::min(i0 + 1, n - 1);
    cw.frac[axis] = pos - double(i0);
  }
  return cw;
}

}  // namespace

void GridConfig::validate() const {
  if (levels < 1) throw std::invalid_argument("grid: levels must be >= 1");
  if (!is_power_of_two(table_length))
    throw std::invalid_argument("grid: table_length must be a power of two");
  if (features_per_level < 1) throw std::invalid_argument("grid: features_per_level must be >= 1");
  if (base_resolution > max_resolution)
    throw std::invalid_argument("grid: base_resolution must be <= max_resolution");
  if (!(aspect.x > 0.0 && aspect.y > 0.0 && aspect.z > 0.0))
    throw std::invalid_argument("grid: aspect components must be positive");
}

uint32_t GridConfig::level_resolution(uint32_t level) const {
  if (level >= levels) throw std::out_of_range("grid: level index out of range");
  if (levels == 1) return base_resolution;
  const double growth =
      std::exp((std::log(double(max_resolution)) - std::log(double(base_resolution))) /
               double(levels - 1));
  return uint32_t(std::llround(double(base_resolution) * std::pow(growth, double(level))));
}

LevelShape grid_shape(const GridConfig& config, uint32_t level) {
  const double n = double(config.level_resolution(level));
  const double s = max_component(config.aspect);
  LevelShape shape;
  shape.nx = uint32_t(std::ceil(config.aspect.x / s * n));
  shape.ny = uint32_t(std::ceil(config.aspect.y / s * n));
  shape.nz = uint32_t(std::ceil(config.aspect.z / s * n));
  return shape;
}

uint32_t table_index(uint32_t ix, uint32_t iy, uint32_t iz, const HashGridLevel& level) {
  if (ix >= level.shape.nx || iy >= level.shape.ny || iz >= level.shape.nz)
    throw std::out_of_range("grid: voxel coordinate out of range");
  if (level.mapping_mode == MappingMode::OneToOne)
    return ix + level.shape.nx * (iy + level.shape.ny * iz);
  // Wrapping uint32 multiplies keep the low bits exact, which is all the
  // power-of-two mask observes.
  const uint32_t h = ix ^ (iy * kHashPrimeY) ^ (iz * kHashPrimeZ);
  return h & (level.rows() - 1);
}

void HashGridGrads::zero() {
  for (auto& g : level_grads) std::fill(g.begin(), g.end(), 0.0);
}

HashGrid::HashGrid(const GridConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  levels_.resize(config_.levels);
  for (uint32_t l = 0; l < config_.levels; ++l) {
    HashGridLevel& level = levels_[l];
    level.shape = grid_shape(config_, l);
    level.features = config_.features_per_level;
    const uint64_t voxels = level.shape.voxel_count();
    level.mapping_mode =
        voxels <= config_.table_length ? MappingMode::OneToOne : MappingMode::Hashed;
    const uint64_t rows =
        level.mapping_mode == MappingMode::OneToOne ? voxels : config_.table_length;
    level.table.resize(rows * level.features);
    for (double& v : level.table) v = rng.uniform(-1e-4, 1e-4);
  }
}

void HashGrid::encode(const Vec3& point, std::span<double> out) const {
  if (point.x < 0.0 || point.x > 1.0 || point.y < 0.0 || point.y > 1.0 || point.z < 0.0 ||
      point.z > 1.0)
    throw std::invalid_argument("grid: encode point outside the unit box");
  if (out.size() != feature_width()) throw std::invalid_argument("grid: encode output size");

  const uint32_t f = config_.features_per_level;
  for (uint32_t l = 0; l < config_.levels; ++l) {
    const HashGridLevel& level = levels_[l];
    const CornerWeights cw = lattice_weights(point, level.shape);
    double* dst = out.data() + size_t(l) * f;
    for (uint32_t k = 0; k < f; ++k) dst[k] = 0.0;
    for (int corner = 0; corner < 8; ++corner) {
      const int cx = corner & 1, cy = (corner >> 1) & 1, cz = (corner >> 2) & 1;
      const double w = (cx ? cw.frac[0] : 1.0 - cw.frac[0]) * (cy ? cw.frac[1] : 1.0 - cw.frac[1]) *
                       (cz ? cw.frac[2] : 1.0 - cw.frac[2]);
      if (w == 0.0) continue;
      const uint32_t row = table_index(cx ? cw.i1[0] : cw.i0[0], cy ? cw.i1[1] : cw.i0[1],
                                       cz ? cw.i1[2] : cw.i0[2], level);
      const double* src = level.table.data() + size_t(row) * f;
      for (uint32_t k = 0; k < f; ++k) dst[k] += w * src[k];
    }
  }
}

void HashGrid::encode_backward(const Vec3& point, std::span<const double> upstream,
                               HashGridGrads& grads) const {
  if (point.x < 0.0 || point.x > 1.0 || point.y < 0.0 || point.y > 1.0 || point.z < 0.0 ||
      point.z > 1.0)
    throw std::invalid_argument("grid: encode point outside the unit box");
  if (upstream.size() != feature_width())
    throw std::invalid_argument("grid: encode_backward upstream size");

  const uint32_t f = config_.features_per_level;
  for (uint32_t l = 0; l < config_.levels; ++l) {
    const HashGridLevel& level = levels_[l];
    const CornerWeights cw = lattice_weights(point, level.shape);
    const double* up = upstream.data() + size_t(l) * f;
    std::vector<double>& g = grads.level_grads[l];
    for (int corner = 0; corner < 8; ++corner) {
      const int cx = corner & 1, cy = (corner >> 1) & 1, cz = (corner >> 2) & 1;
      const double w = (cx ? cw.frac[0] : 1.0 - cw.frac[0]) * (cy ? cw.frac[1] : 1.0 - cw.frac[1]) *
                       (cz ? cw.frac[2] : 1.0 - cw.frac[2]);
      if (w == 0.0) continue;
      const uint32_t row = table_index(cx ? cw.i1[0] : cw.i0[0], cy ? cw.i1[1] : cw.i0[1],
                                       cz ? cw.i1[2] : cw.i0[2], level);
      double* dst = g.data() + size_t(row) * f;
      for (uint32_t k = 0; k < f; ++k) dst[k] += w * up[k];
    }
  }
}

HashGridGrads HashGrid::make_grads() const {
  HashGridGrads grads;
  grads.level_grads.reserve(levels_.size());
  for (const HashGridLevel& level : levels_) grads.level_grads.emplace_back(level.table.size(), 0.0);
  return grads;
}

std::vector<std::span<double>> HashGrid::parameter_arrays() {
  std::vector<std::span<double>> arrays;
  arrays.reserve(levels_.size());
  for (HashGridLevel& level : levels_) arrays.emplace_back(level.table);
  return arrays;
}

OccupancyGrid::OccupancyGrid(const Aabb& box, uint32_t longest_axis_resolution, double decay,
                             double threshold)
    : box_(box), decay_(decay), threshold_(threshold) {
  GridConfig cfg;
  cfg.aspect = box.extent();
  cfg.base_resolution = cfg.max_resolution = longest_axis_resolution;
  cfg.levels = 1;
  shape_ = grid_shape(cfg, 0);
  density_.assign(shape_.voxel_count(), 0.0);
  bitfield_.assign(shape_.voxel_count(), 0);
}

void OccupancyGrid::set_threshold(double t) {
  threshold_ = t;
  recompute_bitfield();
}

Aabb OccupancyGrid::cell_box(uint32_t ix, uint32_t iy, uint32_t iz) const {
  const Vec3 cell = box_.extent() / Vec3(double(shape_.nx), double(shape_.ny), double(shape_.nz));
  const Vec3 lo = box_.lo + cell * Vec3(double(ix), double(iy), double(iz));
  return {lo, lo + cell};
}

void OccupancyGrid::fill_occupied() {
  std::fill(density_.begin(), density_.end(), threshold_);
  std::fill(bitfield_.begin(), bitfield_.end(), uint8_t(1));
}

void OccupancyGrid::decay_and_update(const std::function<double(const Vec3&)>& density_at,
                                     uint64_t step, bool warm_up, Rng& rng) {
  (void)step;
  const uint64_t total = cell_count();

  auto sample_cell = [&](uint64_t idx) {
    const uint32_t ix = uint32_t(idx % shape_.nx);
    const uint32_t iy = uint32_t((idx / shape_.nx) % shape_.ny);
    const uint32_t iz = uint32_t(idx / (uint64_t(shape_.nx) * shape_.ny));
    const Aabb cell = cell_box(ix, iy, iz);
    const Vec3 p{rng.uniform(cell.lo.x, cell.hi.x), rng.uniform(cell.lo.y, cell.hi.y),
                 rng.uniform(cell.lo.z, cell.hi.z)};
    density_[idx] = std::max(density_[idx] * decay_, density_at(p));
  };

  if (warm_up) {
    for (uint64_t i = 0; i < total; ++i) sample_cell(i);
  } else {
    std::vector<uint64_t> occupied;
    occupied.reserve(total / 4);
    for (uint64_t i = 0; i < total; ++i)
      if (bitfield_[i]) occupied.push_back(i);
    const uint64_t n_uniform = std::max<uint64_t>(total / 4, 1);
    for (uint64_t i = 0; i < n_uniform; ++i) sample_cell(rng.uniform_index(total));
    if (!occupied.empty())
      for (uint64_t i = 0; i < n_uniform; ++i) sample_cell(occupied[rng.uniform_index(occupied.size())]);
  }
  recompute_bitfield();
}

void OccupancyGrid::recompute_bitfield() {
  for (uint64_t i = 0; i < density_.size(); ++i) bitfield_[i] = density_[i] >= threshold_ ? 1 : 0;
}

std::vector<RayInterval> occupancy_skip(const Ray& ray, double t0, double t1,
                                        const OccupancyGrid& occ) {
  std::vector<RayInterval> intervals;
  if (!(t1 > t0)) return intervals;

  const LevelShape shape = occ.shape();
  const uint32_t extents[3] = {shape.nx, shape.ny, shape.nz};
  const Vec3 cell_size =
      occ.box().extent() / Vec3(double(shape.nx), double(shape.ny), double(shape.nz));

  // Amanatides-Woo walk. Cell indices come from the clamped entry point;
  // per-axis crossing times advance in lockstep with the index steps.
  int idx[3];
  double t_next[3];
  double t_delta[3];
  int step[3];
  const Vec3 entry = ray.at(t0);
  for (int axis = 0; axis < 3; ++axis) {
    const double local = (entry[axis] - occ.box().lo[axis]) / cell_size[axis];
    idx[axis] = std::clamp(int(std::floor(local)), 0, int(extents[axis]) - 1);
    const double d = ray.dir[axis];
    if (d > 0.0) {
      step[axis] = 1;
      t_delta[axis] = cell_size[axis] / d;
      const double boundary = occ.box().lo[axis] + cell_size[axis] * double(idx[axis] + 1);
      t_next[axis] = t0 + (boundary - entry[axis]) / d;
    } else if (d < 0.0) {
      step[axis] = -1;
      t_delta[axis] = -cell_size[axis] / d;
      const double boundary = occ.box().lo[axis] + cell_size[axis] * double(idx[axis]);
      t_next[axis] = t0 + (boundary - entry[axis]) / d;
    } else {
      step[axis] = 0;
      t_delta[axis] = std::numeric_limits<double>::infinity();
      t_next[axis] = std::numeric_limits<double>::infinity();
    }
  }

  double t_cur = t0;
  bool run_open = false;
  double run_start = 0.0;
  while (t_cur < t1) {
    // Exit time of the current cell.
    int exit_axis = 0;
    if (t_next[1] < t_next[exit_axis]) exit_axis = 1;
    if (t_next[2] < t_next[exit_axis]) exit_axis = 2;
    const double t_exit = std::min(t_next[exit_axis], t1);

    const bool occupied =
        occ.cell_occupied(occ.cell_index(uint32_t(idx[0]), uint32_t(idx[1]), uint32_t(idx[2])));
    if (occupied && !run_open) {
      run_open = true;
      run_start = t_cur;
    } else if (!occupied && run_open) {
      run_open = false;
      intervals.push_back({run_start, t_cur});
    }

    if (t_exit >= t1) {
      t_cur = t1;
      break;
    }
    t_cur = t_exit;
    idx[exit_axis] += step[exit_axis];
    if (idx[exit_axis] < 0 || idx[exit_axis] >= int(extents[exit_axis])) break;  // left the grid
    t_next[exit_axis] += t_delta[exit_axis];
  }
  if (run_open) intervals.push_back({run_start, t_cur});
  return intervals;
}

}  // namespace distgrid
