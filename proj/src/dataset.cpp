#include "distgrid/dataset.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "distgrid/oracle.hpp"

namespace distgrid {

namespace fs = std::filesystem;

std::vector<uint32_t> Dataset::split_ids(bool train) const {
  std::vector<uint32_t> ids;
  for (size_t i = 0; i < poses.size(); ++i)
    if ((is_train[i] != 0) == train) ids.push_back(poses[i].image_id);
  return ids;
}

void write_ppm(const fs::path& path, const Image& image) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("ppm: cannot open for writing: " + path.string());
  f << "P6\n" << image.width << " " << image.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(image.rgb.data()), std::streamsize(image.rgb.size()));
  if (!f) throw std::runtime_error("ppm: write failed: " + path.string());
}

Image read_ppm(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("ppm: cannot open: " + path.string());
  std::string magic;
  f >> magic;
  if (magic != "P6") throw std::runtime_error("ppm: not a binary PPM (P6): " + path.string());
  uint32_t width = 0, height = 0, maxval = 0;
  f >> width >> height >> maxval;
  if (!f || width == 0 || height == 0 || maxval != 255)
    throw std::runtime_error("ppm: unsupported header in " + path.string());
  f.get();  // single whitespace after maxval
  Image image;
  image.width = width;
  image.height = height;
  image.rgb.resize(size_t(width) * height * 3);
  f.read(reinterpret_cast<char*>(image.rgb.data()), std::streamsize(image.rgb.size()));
  if (f.gcount() != std::streamsize(image.rgb.size()))
    throw std::runtime_error("ppm: truncated pixel data in " + path.string());
  return image;
}

void write_tmap(const fs::path& path, const TransmittanceMap& map) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("tmap: cannot open for writing: " + path.string());
  f.write("TMAP", 4);
  const uint32_t wh[2] = {map.width, map.height};
  f.write(reinterpret_cast<const char*>(wh), sizeof wh);
  f.write(reinterpret_cast<const char*>(map.values.data()),
          std::streamsize(map.values.size() * sizeof(float)));
}

TransmittanceMap read_tmap(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("tmap: cannot open: " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (std::memcmp(magic, "TMAP", 4) != 0) throw std::runtime_error("tmap: bad magic");
  uint32_t wh[2];
  f.read(reinterpret_cast<char*>(wh), sizeof wh);
  TransmittanceMap map;
  map.width = wh[0];
  map.height = wh[1];
  map.values.resize(size_t(map.width) * map.height);
  f.read(reinterpret_cast<char*>(map.values.data()),
         std::streamsize(map.values.size() * sizeof(float)));
  if (!f) throw std::runtime_error("tmap: truncated data in " + path.string());
  return map;
}

void write_poses(const fs::path& path, const std::vector<CameraPose>& poses) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("poses: cannot open for writing: " + path.string());
  char buf[64];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    f << " " << buf;
  };
  for (const CameraPose& p : poses) {
    f << p.image_id;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) put(p.rotation(r, c));
      put(p.translation[r]);
    }
    put(p.fx);
    put(p.fy);
    put(p.cx);
    put(p.cy);
    f << " " << p.width << " " << p.height << "\n";
  }
}

std::vector<CameraPose> read_poses(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("poses: cannot open: " + path.string());
  std::vector<CameraPose> poses;
  std::string line;
  size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    CameraPose p;
    std::vector<double> vals;
    double v;
    uint64_t image_id;
    if (!(ss >> image_id))
      throw std::runtime_error("poses: line " + std::to_string(line_no) + ": missing image id");
    while (ss >> v) vals.push_back(v);
    if (vals.size() != 18)
      throw std::runtime_error("poses: line " + std::to_string(line_no) + ": expected 18 values, got " +
                               std::to_string(vals.size()));
    p.image_id = uint32_t(image_id);
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) p.rotation(r, c) = vals[size_t(r) * 4 + c];
      p.translation[r] = vals[size_t(r) * 4 + 3];
    }
    p.fx = vals[12];
    p.fy = vals[13];
    p.cx = vals[14];
    p.cy = vals[15];
    p.width = uint32_t(vals[16]);
    p.height = uint32_t(vals[17]);
    p.validate();
    poses.push_back(p);
  }
  return poses;
}

namespace {

Mat3 look_at_rotation(const Vec3& eye, const Vec3& target) {
  const Vec3 forward = normalize(target - eye);
  const Vec3 world_up{0.0, 0.0, 1.0};
  Vec3 right = cross(forward, world_up);
  const double len = length(right);
  if (len < 1e-9) {
    // Straight down (or up): pin the image x axis to world x.
    right = {1.0, 0.0, 0.0};
  } else {
    right = right / len;
  }
  const Vec3 down = cross(forward, right);
  // Columns are the camera axes in world coordinates: x right, y down
  // (image convention), z forward.
  return Mat3::from_columns(right, down, forward);
}

CameraPose make_camera(uint32_t image_id, const Vec3& eye, const Vec3& target, uint32_t size,
                       double fov_degrees) {
  CameraPose p;
  p.image_id = image_id;
  p.translation = eye;
  p.rotation = look_at_rotation(eye, target);
  p.width = p.height = size;
  const double f = double(size) / (2.0 * std::tan(fov_degrees * M_PI / 180.0 / 2.0));
  p.fx = p.fy = f;
  p.cx = p.cy = double(size) / 2.0;
  p.validate();
  return p;
}

}  // namespace

Dataset generate_dataset(const SyntheticScene& scene, const RigSpec& rig, uint64_t seed,
                         uint64_t oracle_samples) {
  Dataset dataset;
  const Vec3 center = scene.outer_box.center();
  const Vec3 look_target{center.x, center.y, scene.ground_altitude};

  uint32_t next_id = 0;
  Rng rng(seed);
  for (uint32_t i = 0; i < rig.ring_cameras; ++i) {
    // Deterministic small azimuth jitter decorrelates pixel grids across views.
    const double angle = 2.0 * M_PI * (double(i) + 0.3 * rng.uniform()) / double(rig.ring_cameras);
    const Vec3 eye{center.x + rig.ring_radius * std::cos(angle),
                   center.y + rig.ring_radius * std::sin(angle),
                   scene.ground_altitude + rig.ring_altitude};
    dataset.poses.push_back(make_camera(next_id++, eye, look_target, rig.image_size,
                                        rig.fov_degrees));
  }
  for (uint32_t gy = 0; gy < rig.nadir_grid; ++gy) {
    for (uint32_t gx = 0; gx < rig.nadir_grid; ++gx) {
      const double u = rig.nadir_grid == 1 ? 0.5 : double(gx) / double(rig.nadir_grid - 1);
      const double v = rig.nadir_grid == 1 ? 0.5 : double(gy) / double(rig.nadir_grid - 1);
      const Vec3 inner_lo = scene.outer_box.lo * 0.5 + center * 0.5;
      const Vec3 inner_hi = scene.outer_box.hi * 0.5 + center * 0.5;
      const Vec3 eye{inner_lo.x + u * (inner_hi.x - inner_lo.x),
                     inner_lo.y + v * (inner_hi.y - inner_lo.y),
                     scene.ground_altitude + rig.nadir_altitude};
      dataset.poses.push_back(make_camera(next_id++, eye, Vec3{eye.x, eye.y, scene.ground_altitude},
                                          rig.image_size, rig.fov_degrees));
    }
  }

  for (const CameraPose& p : dataset.poses)
    if (!scene.outer_box.contains(p.translation))
      throw std::runtime_error("generate_dataset: camera outside the scene's outer box");

  dataset.images.resize(dataset.poses.size());
  dataset.transmittance.resize(dataset.poses.size());

  const unsigned n_threads = std::max(1u, std::thread::hardware_concurrency());
  for (size_t idx = 0; idx < dataset.poses.size(); ++idx) {
    const CameraPose& pose = dataset.poses[idx];
    Image& image = dataset.images[idx];
    TransmittanceMap& tmap = dataset.transmittance[idx];
    image.width = image.height = rig.image_size;
    image.rgb.assign(size_t(rig.image_size) * rig.image_size * 3, 0);
    tmap.width = tmap.height = rig.image_size;
    tmap.values.assign(size_t(rig.image_size) * rig.image_size, 1.0f);

    auto render_rows = [&](uint32_t y0, uint32_t y1) {
      for (uint32_t y = y0; y < y1; ++y) {
        for (uint32_t x = 0; x < rig.image_size; ++x) {
          Ray ray;
          ray.origin = pose.translation;
          ray.dir = pose.pixel_ray_dir(double(x) + 0.5, double(y) + 0.5);
          const OracleResult r = oracle_render(scene, ray, oracle_samples);
          const size_t p = size_t(y) * rig.image_size + x;
          for (int c = 0; c < 3; ++c)
            image.rgb[p * 3 + c] =
                uint8_t(std::lround(std::clamp(r.color[c], 0.0, 1.0) * 255.0));
          tmap.values[p] = float(r.transmittance);
        }
      }
    };
    std::vector<std::thread> threads;
    const uint32_t rows_per = (rig.image_size + n_threads - 1) / n_threads;
    for (unsigned t = 0; t < n_threads; ++t) {
      const uint32_t y0 = t * rows_per;
      const uint32_t y1 = std::min(rig.image_size, y0 + rows_per);
      if (y0 < y1) threads.emplace_back(render_rows, y0, y1);
    }
    for (auto& t : threads) t.join();
  }

  // Strided split keeps validation views spread over the rig.
  dataset.is_train.assign(dataset.poses.size(), 1);
  if (rig.val_fraction > 0.0) {
    const size_t stride = std::max<size_t>(2, size_t(std::lround(1.0 / rig.val_fraction)));
    for (size_t i = stride - 1; i < dataset.poses.size(); i += stride) dataset.is_train[i] = 0;
  }
  return dataset;
}

void save_dataset(const fs::path& dir, const Dataset& dataset) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "trans");
  char name[32];
  for (size_t i = 0; i < dataset.images.size(); ++i) {
    std::snprintf(name, sizeof name, "%04u.ppm", dataset.poses[i].image_id);
    write_ppm(dir / "images" / name, dataset.images[i]);
    if (i < dataset.transmittance.size() && !dataset.transmittance[i].values.empty()) {
      std::snprintf(name, sizeof name, "%04u.tmap", dataset.poses[i].image_id);
      write_tmap(dir / "trans" / name, dataset.transmittance[i]);
    }
  }
  write_poses(dir / "poses.txt", dataset.poses);
  std::ofstream split(dir / "split.txt");
  for (size_t i = 0; i < dataset.poses.size(); ++i)
    split << dataset.poses[i].image_id << " " << (dataset.is_train[i] ? "train" : "val") << "\n";
}

Dataset load_dataset(const fs::path& dir) {
  Dataset dataset;
  dataset.poses = read_poses(dir / "poses.txt");

  std::ifstream split(dir / "split.txt");
  if (!split) throw std::runtime_error("dataset: missing split.txt in " + dir.string());
  std::vector<std::pair<uint32_t, bool>> tags;
  uint32_t id;
  std::string tag;
  while (split >> id >> tag) tags.emplace_back(id, tag == "train");

  char name[32];
  for (const CameraPose& pose : dataset.poses) {
    std::snprintf(name, sizeof name, "%04u.ppm", pose.image_id);
    Image image = read_ppm(dir / "images" / name);
    if (image.width != pose.width || image.height != pose.height)
      throw std::runtime_error("dataset: image size does not match intrinsics for image " +
                               std::to_string(pose.image_id));
    dataset.images.push_back(std::move(image));
    std::snprintf(name, sizeof name, "%04u.tmap", pose.image_id);
    if (fs::exists(dir / "trans" / name))
      dataset.transmittance.push_back(read_tmap(dir / "trans" / name));
    bool found = false;
    for (const auto& [tid, is_train] : tags) {
      if (tid == pose.image_id) {
        dataset.is_train.push_back(is_train ? 1 : 0);
        found = true;
        break;
      }
    }
    if (!found) throw std::runtime_error("dataset: image missing from split.txt: " +
                                         std::to_string(pose.image_id));
  }
  return dataset;
}

SupervisedRay make_pixel_ray(const Dataset& dataset, uint32_t image_index, uint32_t x, uint32_t y) {
  const CameraPose& pose = dataset.poses[image_index];
  const Image& image = dataset.images[image_index];
  SupervisedRay s;
  s.ray.origin = pose.translation;
  s.ray.dir = pose.pixel_ray_dir(double(x) + 0.5, double(y) + 0.5);
  s.ray.image_id = pose.image_id;
  s.ray.pixel_id = uint64_t(pose.image_id) << 32 | (uint64_t(y) * image.width + x);
  s.color_gt = {image.pixel_channel(x, y, 0), image.pixel_channel(x, y, 1),
                image.pixel_channel(x, y, 2)};
  s.image_id = pose.image_id;
  return s;
}

}  // namespace distgrid
