#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "distgrid/partition.hpp"
#include "distgrid/scene.hpp"

namespace distgrid {

/// 8-bit RGB image, row-major, top-left origin.
struct Image {
  uint32_t width = 0;
  uint32_t height = 0;
  std::vector<uint8_t> rgb;  // 3 bytes per pixel

  double pixel_channel(uint32_t x, uint32_t y, int c) const {
    return double(rgb[(size_t(y) * width + x) * 3 + c]) / 255.0;
  }
};

/// Per-pixel ground-truth transmittance, stored alongside images so the
/// transmittance supervision has a reference on synthetic data.
struct TransmittanceMap {
  uint32_t width = 0;
  uint32_t height = 0;
  std::vector<float> values;
};

struct Dataset {
  std::vector<Image> images;
  std::vector<TransmittanceMap> transmittance;  // optional, may be empty
  std::vector<CameraPose> poses;                // index-aligned with images
  std::vector<uint8_t> is_train;                // 1 = train split, 0 = val

  size_t size() const { return images.size(); }
  std::vector<uint32_t> split_ids(bool train) const;
};

// ---- binary PPM (P6) ----
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

// ---- float transmittance maps ----
void write_tmap(const std::filesystem::path& path, const TransmittanceMap& map);
TransmittanceMap read_tmap(const std::filesystem::path& path);

// ---- pose text files ----
// One line per image: image id, 12 reals (row-major 3x4 camera-to-world),
// fx fy cx cy w h. Values print with 17 significant digits.
void write_poses(const std::filesystem::path& path, const std::vector<CameraPose>& poses);
std::vector<CameraPose> read_poses(const std::filesystem::path& path);

/// Camera rig presets for synthetic captures.
struct RigSpec {
  uint32_t ring_cameras = 28;       // oblique ring
  double ring_radius = 1.2;         // scene units
  double ring_altitude = 1.5;
  uint32_t nadir_grid = 2;          // nadir_grid^2 downward cameras
  double nadir_altitude = 1.8;
  uint32_t image_size = 64;         // square images
  double fov_degrees = 70.0;
  double val_fraction = 0.125;      // strided validation tagging
};

/// Renders a synthetic dataset with the quadrature oracle. Deterministic for
/// a fixed scene/rig/seed. Throws if a rig camera falls outside the scene's
/// outer box.
Dataset generate_dataset(const SyntheticScene& scene, const RigSpec& rig, uint64_t seed,
                         uint64_t oracle_samples = 4096);

/// Directory layout: images/NNNN.ppm, trans/NNNN.tmap, poses.txt, split.txt.
void save_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& dir);

/// Supervised ray through a pixel center, with the pixel's ground truth.
struct SupervisedRay {
  Ray ray;
  Vec3 color_gt;
  uint32_t image_id = 0;
};

SupervisedRay make_pixel_ray(const Dataset& dataset, uint32_t image_index, uint32_t x, uint32_t y);

}  // namespace distgrid
