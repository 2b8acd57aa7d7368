#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "distgrid/checkpoint.hpp"

using namespace distgrid;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  const fs::path dir = fs::temp_directory_path() / "distgrid_tests" / "ckpt";
  fs::create_directories(dir);
  return dir;
}

WorkerCheckpoint make_checkpoint() {
  GridConfig g;
  g.levels = 3;
  g.table_length = 1u << 8;
  g.features_per_level = 2;
  g.base_resolution = 4;
  g.max_resolution = 16;
  g.aspect = {1.5, 1.0, 0.5};

  Rng rng(42);
  WorkerCheckpoint ckpt;
  ckpt.config_hash = 0xdeadbeefcafef00dull;
  ckpt.step = 123;
  ckpt.region_id = 2;
  ckpt.fine = FieldParams(CascadeLevel::Fine, g, 4, rng);
  ckpt.coarse = FieldParams(CascadeLevel::Coarse, g, 4, rng);
  ckpt.occ_fine = OccupancyGrid({{0, 0, 0}, {1.5, 1.0, 0.5}}, 8, 0.99, 0.7);
  ckpt.occ_coarse = OccupancyGrid({{-1, -1, 0}, {2.5, 2.0, 0.5}}, 8, 0.99, 0.7);
  for (double& d : ckpt.occ_fine.density()) d = rng.uniform();
  ckpt.occ_fine.recompute_bitfield();

  std::vector<size_t> sizes;
  for (auto& a : ckpt.fine.parameter_arrays()) sizes.push_back(a.size());
  for (auto& a : ckpt.coarse.parameter_arrays()) sizes.push_back(a.size());
  ckpt.adam = AdamState(sizes);
  ckpt.adam.first_moments()[0][0] = 0.125;
  ckpt.adam.set_step_count(123);
  return ckpt;
}

}  // namespace

TEST_CASE("worker checkpoint: save/load round trip") {
  const fs::path path = temp_dir() / "w.dgcw";
  const WorkerCheckpoint ckpt = make_checkpoint();
  save_worker_checkpoint(path, ckpt);
  const WorkerCheckpoint back = load_worker_checkpoint(path);

  CHECK(back.config_hash == ckpt.config_hash);
  CHECK(back.step == 123);
  CHECK(back.region_id == 2);
  CHECK(back.fine.level == CascadeLevel::Fine);
  CHECK(back.coarse.level == CascadeLevel::Coarse);
  CHECK(back.coarse.color_mlp.hidden_activation() == Activation::Sigmoid);

  // Tables are stored as f32: the round trip equals the f32-quantized source.
  for (size_t l = 0; l < ckpt.fine.grid.levels().size(); ++l) {
    const auto& src = ckpt.fine.grid.levels()[l];
    const auto& dst = back.fine.grid.levels()[l];
    REQUIRE(dst.table.size() == src.table.size());
    CHECK(dst.mapping_mode == src.mapping_mode);
    for (size_t i = 0; i < src.table.size(); ++i) CHECK(dst.table[i] == double(float(src.table[i])));
  }
  for (size_t i = 0; i < ckpt.fine.density_mlp.layers()[0].weights.size(); ++i)
    CHECK(back.fine.density_mlp.layers()[0].weights[i] ==
          double(float(ckpt.fine.density_mlp.layers()[0].weights[i])));

  CHECK(back.occ_fine.shape().nx == ckpt.occ_fine.shape().nx);
  CHECK(back.occ_fine.threshold() == doctest::Approx(0.7));
  for (size_t i = 0; i < 8; ++i)
    CHECK(back.occ_fine.density()[i] == double(float(ckpt.occ_fine.density()[i])));
  CHECK(back.occ_fine.bitfield() == ckpt.occ_fine.bitfield());

  // Optimizer state keeps full precision.
  CHECK(back.adam.first_moments()[0][0] == 0.125);
  CHECK(back.adam.step_count() == 123);

  // A second save of the loaded state is idempotent (f32 fixed point).
  const fs::path path2 = temp_dir() / "w2.dgcw";
  save_worker_checkpoint(path2, back);
  const WorkerCheckpoint again = load_worker_checkpoint(path2);
  CHECK(again.fine.grid.levels()[0].table == back.fine.grid.levels()[0].table);
}

TEST_CASE("worker checkpoint: corrupted magic is rejected") {
  const fs::path path = temp_dir() / "bad.dgcw";
  std::ofstream f(path, std::ios::binary);
  f << "NOPE12345678";
  f.close();
  CHECK_THROWS(load_worker_checkpoint(path));
}

TEST_CASE("appearance table: save/load round trip") {
  const fs::path path = temp_dir() / "a.dgca";
  AppearanceTable table;
  table.dim = 3;
  table.image_ids = {5, 9, 12, 44};
  table.rows = {1.0, -2.0, 3.0, 0.5, 0.25, -0.125, 7.0, 8.0, 9.0, -1.0, -2.0, -3.0};
  save_appearance_table(path, table);
  const AppearanceTable back = load_appearance_table(path);
  CHECK(back.dim == 3);
  CHECK(back.image_ids == table.image_ids);
  for (size_t i = 0; i < table.rows.size(); ++i)
    CHECK(back.rows[i] == double(float(table.rows[i])));
  CHECK(back.row(9)[0] == 0.5);
}
