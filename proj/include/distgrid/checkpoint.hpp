#pragma once

#include <filesystem>

#include "distgrid/field.hpp"
#include "distgrid/train.hpp"

namespace distgrid {

/// Per-worker checkpoint: both cascade fields (feature tables and MLP weights
/// as little-endian 32-bit floats behind shape headers), both occupancy
/// grids, and the optimizer state needed to resume.
struct WorkerCheckpoint {
  uint64_t config_hash = 0;
  uint64_t step = 0;
  uint32_t region_id = 0;
  FieldParams fine;
  FieldParams coarse;
  OccupancyGrid occ_fine;
  OccupancyGrid occ_coarse;
  AdamState adam;
};

void save_worker_checkpoint(const std::filesystem::path& path, const WorkerCheckpoint& ckpt);
WorkerCheckpoint load_worker_checkpoint(const std::filesystem::path& path);

void save_appearance_table(const std::filesystem::path& path, const AppearanceTable& table);
AppearanceTable load_appearance_table(const std::filesystem::path& path);

}  // namespace distgrid
