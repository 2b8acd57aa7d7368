#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "distgrid/geometry.hpp"
#include "distgrid/rng.hpp"
#include "distgrid/vecmath.hpp"

namespace distgrid {

/// Multi-resolution hash grid configuration. The bounding box may have an
/// arbitrary aspect ratio; per-level lattice shapes shrink the short axes so
/// voxels stay roughly cubic and one-to-one levels stay small.
struct GridConfig {
  uint32_t levels = 8;
  uint32_t table_length = 1u << 15;  // power of two
  uint32_t features_per_level = 2;
  uint32_t base_resolution = 16;
  uint32_t max_resolution = 512;
  Vec3 aspect{1.0, 1.0, 1.0};  // positive; only ratios matter

  void validate() const;

  /// Resolution of the longest axis at `level`: geometric progression from
  /// base_resolution to max_resolution inclusive.
  uint32_t level_resolution(uint32_t level) const;
};

enum class MappingMode : uint8_t { OneToOne = 0, Hashed = 1 };

struct LevelShape {
  uint32_t nx = 0, ny = 0, nz = 0;
  uint64_t voxel_count() const { return uint64_t(nx) * ny * nz; }
};

/// Lattice shape at `level`: ceil((axis/s) * N_level) per axis with
/// s = max(aspect). The longest axis gets exactly N_level; every extent is
/// at least 1.
LevelShape grid_shape(const GridConfig& config, uint32_t level);

struct HashGridLevel {
  LevelShape shape;
  MappingMode mapping_mode = MappingMode::OneToOne;
  uint32_t features = 2;
  std::vector<double> table;  // rows() x features, row-major

  uint32_t rows() const { return uint32_t(table.size() / features); }
};

/// Index of a lattice vertex in the level's feature table. One-to-one levels
/// use the row-major index; hashed levels use the XOR spatial hash with
/// primes (1, 2654435761, 805459861) masked to the table length.
uint32_t table_index(uint32_t ix, uint32_t iy, uint32_t iz, const HashGridLevel& level);

/// Sparse gradient sink for encode_backward: same shapes as the tables.
struct HashGridGrads {
  std::vector<std::vector<double>> level_grads;

  void zero();
};

class HashGrid {
 public:
  HashGrid() = default;
  /// Builds all levels; tables initialized uniform in [-1e-4, 1e-4].
  HashGrid(const GridConfig& config, Rng& rng);

  const GridConfig& config() const { return config_; }
  std::vector<HashGridLevel>& levels() { return levels_; }
  const std::vector<HashGridLevel>& levels() const { return levels_; }
  uint32_t feature_width() const { return config_.levels * config_.features_per_level; }

  /// Concatenated per-level trilinear interpolation of the feature tables.
  /// `point` must already be normalized to the grid's unit box.
  void encode(const Vec3& point, std::span<double> out) const;

  /// Adjoint of encode: deposits upstream * weight on each of the eight
  /// corners per level. Weights per corner sum to one per level.
  void encode_backward(const Vec3& point, std::span<const double> upstream,
                       HashGridGrads& grads) const;

  HashGridGrads make_grads() const;

  /// Parameter arrays exposed for the optimizer (one per level).
  std::vector<std::span<double>> parameter_arrays();

 private:
  GridConfig config_;
  std::vector<HashGridLevel> levels_;
};

/// Density field marking cells above a scheduled threshold; used to skip
/// empty space during ray marching. The lattice shape follows the same
/// aspect-ratio rule as the hash grid.
class OccupancyGrid {
 public:
  OccupancyGrid() = default;
  OccupancyGrid(const Aabb& box, uint32_t longest_axis_resolution, double decay = 0.99,
                double threshold = 0.6);

  const Aabb& box() const { return box_; }
  LevelShape shape() const { return shape_; }
  double threshold() const { return threshold_; }
  void set_threshold(double t);
  double decay() const { return decay_; }
  uint64_t cell_count() const { return shape_.voxel_count(); }

  std::vector<double>& density() { return density_; }
  const std::vector<double>& density() const { return density_; }
  const std::vector<uint8_t>& bitfield() const { return bitfield_; }

  bool cell_occupied(uint64_t idx) const { return bitfield_[idx] != 0; }
  uint64_t cell_index(uint32_t ix, uint32_t iy, uint32_t iz) const {
    return ix + uint64_t(shape_.nx) * (iy + uint64_t(shape_.ny) * iz);
  }
  Aabb cell_box(uint32_t ix, uint32_t iy, uint32_t iz) const;

  /// Marks every cell occupied (the warm-up / untrained state).
  void fill_occupied();

  /// density[i] <- max(density[i] * decay, sigma at a jittered point of cell i)
  /// for the sampled cell set, then recompute the bitfield. Warm-up sweeps all
  /// cells; afterwards half the samples are drawn from currently occupied
  /// cells.
  void decay_and_update(const std::function<double(const Vec3&)>& density_at, uint64_t step,
                        bool warm_up, Rng& rng);

  void recompute_bitfield();

 private:
  Aabb box_;
  LevelShape shape_;
  std::vector<double> density_;
  std::vector<uint8_t> bitfield_;
  double decay_ = 0.99;
  double threshold_ = 0.6;
};

/// Occupied sub-intervals of [t0, t1] along the ray, in increasing t.
/// Intervals are disjoint and merged across consecutive occupied cells. The
/// caller guarantees [t0, t1] lies inside the grid's box.
std::vector<RayInterval> occupancy_skip(const Ray& ray, double t0, double t1,
                                        const OccupancyGrid& occ);

}  // namespace distgrid
