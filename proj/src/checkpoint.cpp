#include "distgrid/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace distgrid {

namespace {

constexpr char kWorkerMagic[4] = {'D', 'G', 'C', 'W'};
constexpr char kAppearanceMagic[4] = {'D', 'G', 'C', 'A'};
constexpr uint32_t kVersion = 1;

class BinWriter {
 public:
  explicit BinWriter(const std::filesystem::path& path) : f_(path, std::ios::binary) {
    if (!f_) throw std::runtime_error("checkpoint: cannot open for writing: " + path.string());
  }

  void raw(const void* p, size_t n) { f_.write(static_cast<const char*>(p), std::streamsize(n)); }
  void u8(uint8_t v) { raw(&v, 1); }
  void u32(uint32_t v) { raw(&v, 4); }
  void u64(uint64_t v) { raw(&v, 8); }
  void f64(double v) { raw(&v, 8); }
  void f32_array(std::span<const double> values) {
    u64(values.size());
    for (double v : values) {
      const float f = float(v);
      raw(&f, 4);
    }
  }
  void f64_array(std::span<const double> values) {
    u64(values.size());
    raw(values.data(), values.size() * 8);
  }

  void check() const {
    if (!f_) throw std::runtime_error("checkpoint: write failed");
  }

 private:
  std::ofstream f_;
};

class BinReader {
 public:
  explicit BinReader(const std::filesystem::path& path) : f_(path, std::ios::binary) {
    if (!f_) throw std::runtime_error("checkpoint: cannot open: " + path.string());
  }

  void raw(void* p, size_t n) {
    f_.read(static_cast<char*>(p), std::streamsize(n));
    if (f_.gcount() != std::streamsize(n)) throw std::runtime_error("checkpoint: truncated file");
  }
  uint8_t u8() {
    uint8_t v;
    raw(&v, 1);
    return v;
  }
  uint32_t u32() {
    uint32_t v;
    raw(&v, 4);
    return v;
  }
  uint64_t u64() {
    uint64_t v;
    raw(&v, 8);
    return v;
  }
  double f64() {
    double v;
    raw(&v, 8);
    return v;
  }
  std::vector<double> f32_array() {
    const uint64_t n = u64();
    std::vector<double> out(n);
    for (uint64_t i = 0; i < n; ++i) {
      float f;
      raw(&f, 4);
      out[i] = double(f);
    }
    return out;
  }
  std::vector<double> f64_array() {
    const uint64_t n = u64();
    std::vector<double> out(n);
    raw(out.data(), n * 8);
    return out;
  }

 private:
  std::ifstream f_;
};

void write_grid(BinWriter& w, const HashGrid& grid) {
  const GridConfig& c = grid.config();
  w.u32(c.levels);
  w.u32(c.table_length);
  w.u32(c.features_per_level);
  w.u32(c.base_resolution);
  w.u32(c.max_resolution);
  w.f64(c.aspect.x);
  w.f64(c.aspect.y);
  w.f64(c.aspect.z);
  for (uint32_t l = 0; l < c.levels; ++l) {
    const HashGridLevel& level = grid.levels()[l];
    w.u32(l);
    w.u32(level.shape.nx);
    w.u32(level.shape.ny);
    w.u32(level.shape.nz);
    w.u8(uint8_t(level.mapping_mode));
    w.u32(level.features);
    w.f32_array(level.table);  // row-major feature rows
  }
}

HashGrid read_grid(BinReader& r) {
  GridConfig c;
  c.levels = r.u32();
  c.table_length = r.u32();
  c.features_per_level = r.u32();
  c.base_resolution = r.u32();
  c.max_resolution = r.u32();
  c.aspect.x = r.f64();
  c.aspect.y = r.f64();
  c.aspect.z = r.f64();
  Rng throwaway(0);
  HashGrid grid(c, throwaway);
  for (uint32_t l = 0; l < c.levels; ++l) {
    const uint32_t index = r.u32();
    if (index != l) throw std::runtime_error("checkpoint: level index out of order");
    HashGridLevel& level = grid.levels()[l];
    const uint32_t nx = r.u32(), ny = r.u32(), nz = r.u32();
    const MappingMode mode = MappingMode(r.u8());
    const uint32_t features = r.u32();
    if (nx != level.shape.nx || ny != level.shape.ny || nz != level.shape.nz ||
        mode != level.mapping_mode || features != level.features)
      throw std::runtime_error("checkpoint: level shape does not match its config");
    std::vector<double> table = r.f32_array();
    if (table.size() != level.table.size())
      throw std::runtime_error("checkpoint: table size mismatch");
    level.table = std::move(table);
  }
  return grid;
}

void write_mlp(BinWriter& w, const Mlp& mlp) {
  w.u8(uint8_t(mlp.hidden_activation()));
  w.u32(uint32_t(mlp.layers().size()));
  for (const DenseLayer& layer : mlp.layers()) {
    w.u32(layer.out_width);
    w.u32(layer.in_width);
    w.f32_array(layer.weights);
    w.f32_array(layer.bias);
  }
}

Mlp read_mlp(BinReader& r) {
  const Activation act = Activation(r.u8());
  const uint32_t n_layers = r.u32();
  std::vector<uint32_t> widths;
  std::vector<std::vector<double>> weights(n_layers), biases(n_layers);
  std::vector<uint32_t> outs(n_layers), ins(n_layers);
  for (uint32_t i = 0; i < n_layers; ++i) {
    outs[i] = r.u32();
    ins[i] = r.u32();
    weights[i] = r.f32_array();
    biases[i] = r.f32_array();
    if (weights[i].size() != size_t(outs[i]) * ins[i] || biases[i].size() != outs[i])
      throw std::runtime_error("checkpoint: layer shape mismatch");
  }
  widths.push_back(ins[0]);
  for (uint32_t i = 0; i < n_layers; ++i) widths.push_back(outs[i]);
  Rng throwaway(0);
  Mlp mlp(widths, act, throwaway);
  for (uint32_t i = 0; i < n_layers; ++i) {
    mlp.layers()[i].weights = std::move(weights[i]);
    mlp.layers()[i].bias = std::move(biases[i]);
  }
  return mlp;
}

void write_field(BinWriter& w, const FieldParams& field) {
  w.u8(uint8_t(field.level));
  w.u32(field.appearance_dim);
  write_grid(w, field.grid);
  write_mlp(w, field.density_mlp);
  write_mlp(w, field.color_mlp);
}

FieldParams read_field(BinReader& r) {
  FieldParams field;
  field.level = CascadeLevel(r.u8());
  field.appearance_dim = r.u32();
  field.grid = read_grid(r);
  field.density_mlp = read_mlp(r);
  field.color_mlp = read_mlp(r);
  return field;
}

void write_occupancy(BinWriter& w, const OccupancyGrid& occ) {
  w.f64(occ.box().lo.x);
  w.f64(occ.box().lo.y);
  w.f64(occ.box().lo.z);
  w.f64(occ.box().hi.x);
  w.f64(occ.box().hi.y);
  w.f64(occ.box().hi.z);
  w.u32(occ.shape().nx);
  w.u32(occ.shape().ny);
  w.u32(occ.shape().nz);
  w.f64(occ.decay());
  w.f32_array(occ.density());
  const float threshold = float(occ.threshold());
  w.raw(&threshold, 4);
}

OccupancyGrid read_occupancy(BinReader& r) {
  Aabb box;
  box.lo = {r.f64(), r.f64(), r.f64()};
  box.hi = {r.f64(), r.f64(), r.f64()};
  const uint32_t nx = r.u32(), ny = r.u32(), nz = r.u32();
  const double decay = r.f64();
  std::vector<double> density = r.f32_array();
  float threshold;
  r.raw(&threshold, 4);
  const uint32_t longest = std::max(nx, std::max(ny, nz));
  OccupancyGrid occ(box, longest, decay, double(threshold));
  if (occ.shape().nx != nx || occ.shape().ny != ny || occ.shape().nz != nz)
    throw std::runtime_error("checkpoint: occupancy shape mismatch");
  if (density.size() != occ.density().size())
    throw std::runtime_error("checkpoint: occupancy density size mismatch");
  occ.density() = std::move(density);
  occ.recompute_bitfield();
  return occ;
}

}  // namespace

void save_worker_checkpoint(const std::filesystem::path& path, const WorkerCheckpoint& ckpt) {
  BinWriter w(path);
  w.raw(kWorkerMagic, 4);
  w.u32(kVersion);
  w.u64(ckpt.config_hash);
  w.u64(ckpt.step);
  w.u32(ckpt.region_id);
  write_field(w, ckpt.fine);
  write_field(w, ckpt.coarse);
  write_occupancy(w, ckpt.occ_fine);
  write_occupancy(w, ckpt.occ_coarse);
  // Optimizer state keeps full precision; it is internal to resume.
  w.u64(ckpt.adam.step_count());
  w.u32(uint32_t(ckpt.adam.first_moments().size()));
  for (const auto& m : ckpt.adam.first_moments()) w.f64_array(m);
  for (const auto& v : ckpt.adam.second_moments()) w.f64_array(v);
  w.check();
}

WorkerCheckpoint load_worker_checkpoint(const std::filesystem::path& path) {
  BinReader r(path);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kWorkerMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  if (r.u32() != kVersion) throw std::runtime_error("checkpoint: unsupported version");
  WorkerCheckpoint ckpt;
  ckpt.config_hash = r.u64();
  ckpt.step = r.u64();
  ckpt.region_id = r.u32();
  ckpt.fine = read_field(r);
  ckpt.coarse = read_field(r);
  ckpt.occ_fine = read_occupancy(r);
  ckpt.occ_coarse = read_occupancy(r);
  const uint64_t adam_steps = r.u64();
  const uint32_t n_arrays = r.u32();
  ckpt.adam.first_moments().resize(n_arrays);
  ckpt.adam.second_moments().resize(n_arrays);
  for (uint32_t i = 0; i < n_arrays; ++i) ckpt.adam.first_moments()[i] = r.f64_array();
  for (uint32_t i = 0; i < n_arrays; ++i) ckpt.adam.second_moments()[i] = r.f64_array();
  ckpt.adam.set_step_count(adam_steps);
  return ckpt;
}

void save_appearance_table(const std::filesystem::path& path, const AppearanceTable& table) {
  BinWriter w(path);
  w.raw(kAppearanceMagic, 4);
  w.u32(kVersion);
  w.u32(table.dim);
  w.u32(uint32_t(table.image_ids.size()));
  for (uint32_t id : table.image_ids) w.u32(id);
  w.f32_array(table.rows);
  w.check();
}

AppearanceTable load_appearance_table(const std::filesystem::path& path) {
  BinReader r(path);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kAppearanceMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad appearance magic in " + path.string());
  if (r.u32() != kVersion) throw std::runtime_error("checkpoint: unsupported version");
  AppearanceTable table;
  table.dim = r.u32();
  const uint32_t n = r.u32();
  table.image_ids.resize(n);
  for (uint32_t& id : table.image_ids) id = r.u32();
  table.rows = r.f32_array();
  if (table.rows.size() != size_t(n) * table.dim)
    throw std::runtime_error("checkpoint: appearance row size mismatch");
  return table;
}

}  // namespace distgrid
