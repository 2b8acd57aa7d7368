#pragma once

#include <cstdint>
#include <string>

#include "distgrid/train.hpp"

namespace distgrid {

/// Everything a run needs, merged into one validated view. The hash of the
/// canonical serialization is stamped into every output; resuming against a
/// different config refuses to run.
struct RunConfig {
  std::string dataset_dir;
  std::string out_dir = "out";
  uint32_t partitions_x = 1;
  uint32_t partitions_y = 1;
  std::string transport = "local";  // local | tcp
  uint16_t tcp_base_port = 29700;
  uint64_t seed = 1;
  bool wire_f32 = false;  // 32-bit wire payloads (benchmark mode)

  // Hash grids.
  uint32_t fine_table_log2 = 15;
  uint32_t coarse_table_log2 = 12;
  uint32_t grid_levels = 8;
  uint32_t grid_features = 2;
  uint32_t base_resolution = 16;
  uint32_t max_resolution = 512;
  uint32_t appearance_dim = 16;

  // Ray marching: step = longest outer axis / divisor.
  double march_step_divisor = 1024.0;

  // Occupancy grids.
  uint32_t occ_resolution = 128;
  double occ_decay = 0.99;
  uint64_t occ_warmup_steps = 4096;
  uint64_t occ_update_interval = 16;
  double occ_threshold_early = 0.6;
  double occ_threshold_late = 60.0;
  uint64_t occ_threshold_switch_step = 10000;
  double occ_threshold_scale = 1.0;

  // Training.
  uint64_t total_steps = 20000;
  uint32_t batch_size = 4096;
  uint64_t cache_capacity = 1ull << 20;
  uint64_t cache_refresh_interval = 64;
  uint64_t cache_refresh_count = 16384;
  LossConfig loss;
  double lr_start = 0.05;
  double lr_end = 0.005;
  bool distortion_cross_correction = false;

  // Partitioning.
  double altitude_margin = 0.25;

  // Evaluation.
  bool eval_early_termination = false;
  double eval_termination_threshold = 1e-4;

  // Logging and checkpoints.
  uint64_t log_interval = 100;
  uint64_t checkpoint_interval = 0;  // 0: final checkpoint only

  void validate() const;
  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
  static RunConfig load(const std::string& path);
  void save(const std::string& path) const;

  /// FNV-1a of the canonical serialization.
  uint64_t hash() const;

  /// Small-scene training preset used by the synthetic fixtures.
  static RunConfig blob4_preset();
};

uint64_t fnv1a(const void* data, size_t size);

}  // namespace distgrid
