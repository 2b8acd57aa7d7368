#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "distgrid/checkpoint.hpp"
#include "distgrid/config.hpp"
#include "distgrid/dataset.hpp"
#include "distgrid/metrics.hpp"
#include "distgrid/oracle.hpp"
#include "distgrid/partition.hpp"
#include "distgrid/scene.hpp"
#include "distgrid/worker.hpp"

namespace fs = std::filesystem;
using namespace distgrid;

namespace {

int log_level() {
  const char* env = std::getenv("DISTGRID_LOG");
  return env ? std::atoi(env) : 1;
}

SyntheticScene load_scene(const std::string& spec) {
  if (spec == "blob4") return SyntheticScene::blob4_preset();
  if (spec == "empty") {
    SyntheticScene s;
    s.outer_box = {{-2.0, -2.0, 0.0}, {2.0, 2.0, 2.0}};
    return s;
  }
  std::ifstream f(spec);
  if (!f) throw std::runtime_error("cannot open scene spec: " + spec);
  std::stringstream ss;
  ss << f.rdbuf();
  return SyntheticScene::from_json(ss.str());
}

PartitionManifest build_manifest(const RunConfig& config, const Dataset& dataset,
                                 double ground_altitude) {
  const SceneBoxes boxes = compute_boxes(dataset.poses, ground_altitude, config.altitude_margin);
  if (boxes.skipped_poses > 0 && log_level() >= 1)
    std::cerr << "warning: skipped " << boxes.skipped_poses
              << " poses with unusable ground footprints\n";
  return split_regions(boxes.inner, boxes.outer, config.partitions_x, config.partitions_y,
                       ground_altitude);
}

double dataset_ground_altitude(const fs::path& dataset_dir) {
  const fs::path scene_path = dataset_dir / "scene.json";
  std::ifstream f(scene_path);
  if (!f) throw std::runtime_error("missing " + scene_path.string() +
                                   " (generate the dataset with gen-scene)");
  std::stringstream ss;
  ss << f.rdbuf();
  return SyntheticScene::from_json(ss.str()).ground_altitude;
}

AppearanceTable build_appearance(const Dataset& dataset, uint32_t dim) {
  std::vector<std::vector<uint8_t>> images;
  std::vector<uint32_t> widths, heights, ids;
  for (size_t i = 0; i < dataset.size(); ++i) {
    if (!dataset.is_train[i]) continue;
    images.push_back(dataset.images[i].rgb);
    widths.push_back(dataset.images[i].width);
    heights.push_back(dataset.images[i].height);
    ids.push_back(dataset.poses[i].image_id);
  }
  return build_appearance_table(images, widths, heights, ids, dim);
}

struct RunArtifacts {
  RunConfig config;
  PartitionManifest manifest;
  AppearanceTable appearance;
};

RunArtifacts load_run_artifacts(const fs::path& run_dir) {
  RunArtifacts a;
  a.config = RunConfig::load((run_dir / "config.json").string());
  std::ifstream mf(run_dir / "manifest.json");
  if (!mf) throw std::runtime_error("missing manifest.json in " + run_dir.string());
  std::stringstream ss;
  ss << mf.rdbuf();
  a.manifest = PartitionManifest::from_json(ss.str());
  a.appearance = load_appearance_table(run_dir / "appearance.dgca");
  return a;
}

fs::path checkpoint_path(const fs::path& dir, uint64_t step, uint32_t region) {
  char name[64];
  std::snprintf(name, sizeof name, "ckpt_%06llu_r%u.dgcw", (unsigned long long)step, region);
  return dir / name;
}

void load_checkpoints_into(DistributedRun& run, const fs::path& dir, uint64_t step,
                           uint64_t config_hash) {
  for (uint32_t r = 0; r < run.worker_count(); ++r) {
    const WorkerCheckpoint ckpt = load_worker_checkpoint(checkpoint_path(dir, step, r));
    if (ckpt.config_hash != config_hash)
      throw std::runtime_error("checkpoint config hash mismatch; refusing to run");
    run.worker(r).load_state(ckpt);
  }
}

uint64_t latest_checkpoint_step(const fs::path& dir) {
  uint64_t best = 0;
  bool found = false;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    unsigned long long step;
    unsigned region;
    if (std::sscanf(name.c_str(), "ckpt_%llu_r%u.dgcw", &step, &region) == 2) {
      found = true;
      best = std::max(best, uint64_t(step));
    }
  }
  if (!found) throw std::runtime_error("no checkpoints found in " + dir.string());
  return best;
}

void write_eval_image(const fs::path& path, const EvalImage& image) {
  Image out;
  out.width = image.width;
  out.height = image.height;
  out.rgb.resize(size_t(image.width) * image.height * 3);
  for (size_t p = 0; p < image.color.size(); ++p)
    for (int c = 0; c < 3; ++c)
      out.rgb[p * 3 + c] = uint8_t(std::lround(std::clamp(image.color[p][c], 0.0, 1.0) * 255.0));
  write_ppm(path, out);
}

void write_gray_image(const fs::path& path, uint32_t width, uint32_t height,
                      std::span<const double> values, double lo, double hi) {
  Image out;
  out.width = width;
  out.height = height;
  out.rgb.resize(size_t(width) * height * 3);
  const double scale = hi > lo ? 1.0 / (hi - lo) : 1.0;
  for (size_t p = 0; p < values.size(); ++p) {
    const double v = std::clamp((values[p] - lo) * scale, 0.0, 1.0);
    const uint8_t b = uint8_t(std::lround(v * 255.0));
    out.rgb[p * 3 + 0] = out.rgb[p * 3 + 1] = out.rgb[p * 3 + 2] = b;
  }
  write_ppm(path, out);
}

void write_vec_image(const fs::path& path, uint32_t width, uint32_t height,
                     std::span<const Vec3> values) {
  Image out;
  out.width = width;
  out.height = height;
  out.rgb.resize(size_t(width) * height * 3);
  for (size_t p = 0; p < values.size(); ++p)
    for (int c = 0; c < 3; ++c)
      out.rgb[p * 3 + c] = uint8_t(std::lround(std::clamp(values[p][c], 0.0, 1.0) * 255.0));
  write_ppm(path, out);
}

int cmd_gen_scene(const std::string& spec, const std::string& out_dir, RigSpec rig, uint64_t seed,
                  uint64_t oracle_samples) {
  const SyntheticScene scene = load_scene(spec);
  fs::create_directories(out_dir);
  {
    std::ofstream f(fs::path(out_dir) / "scene.json");
    f << scene.to_json() << "\n";
  }
  const Dataset dataset = generate_dataset(scene, rig, seed, oracle_samples);
  save_dataset(out_dir, dataset);
  if (log_level() >= 1)
    std::cerr << "wrote " << dataset.size() << " images to " << out_dir << "\n";
  return 0;
}

int cmd_train(RunConfig config, bool resume) {
  config.validate();
  const fs::path out_dir = config.out_dir;
  fs::create_directories(out_dir);

  const Dataset dataset = load_dataset(config.dataset_dir);
  const double ground = dataset_ground_altitude(config.dataset_dir);
  const PartitionManifest manifest = build_manifest(config, dataset, ground);
  const AppearanceTable appearance = build_appearance(dataset, config.appearance_dim);
  const uint64_t config_hash = config.hash();

  uint64_t start_step = 0;
  if (resume) {
    const RunConfig previous = RunConfig::load((out_dir / "config.json").string());
    if (previous.hash() != config_hash)
      throw std::runtime_error("resume: config hash mismatch with " +
                               (out_dir / "config.json").string() + "; refusing to run");
    start_step = latest_checkpoint_step(out_dir);
  } else {
    config.save((out_dir / "config.json").string());
    std::ofstream mf(out_dir / "manifest.json");
    mf << manifest.to_json() << "\n";
    save_appearance_table(out_dir / "appearance.dgca", appearance);
  }

  DistributedRun run(config, manifest, appearance);
  if (resume) load_checkpoints_into(run, out_dir, start_step, config_hash);
  run.start();

  RayCache cache(config.cache_capacity, config.seed);
  std::ofstream metrics(out_dir / "metrics.log", resume ? std::ios::app : std::ios::trunc);
  char line[256];

  TrainLoopHooks hooks;
  hooks.on_log = [&](const StepStats& s) {
    std::snprintf(line, sizeof line,
                  "step=%llu lrgb=%.8g lt=%.8g ldist=%.8g lr=%.6g bytes=%llu dropped=%llu",
                  (unsigned long long)s.step, s.loss_rgb, s.loss_transmittance, s.loss_distortion,
                  s.lr, (unsigned long long)s.bytes_sent, (unsigned long long)s.dropped_rays);
    metrics << line << "\n";
    metrics.flush();
    if (log_level() >= 1) std::cerr << line << "\n";
  };
  hooks.on_checkpoint = [&](uint64_t step) {
    for (uint32_t r = 0; r < run.worker_count(); ++r)
      save_worker_checkpoint(checkpoint_path(out_dir, step, r),
                             run.worker(r).make_checkpoint(config_hash));
  };

  train_loop(run, cache, dataset, config, start_step, hooks);

  // Per-image validation PSNR, recomputable later from the checkpoint.
  const std::vector<double> eval_vec = appearance.mean_row();
  for (size_t i = 0; i < dataset.size(); ++i) {
    if (dataset.is_train[i]) continue;
    const EvalImage image = run.evaluate_image(dataset.poses[i], eval_vec);
    std::vector<double> a, b;
    for (uint32_t p = 0; p < image.width * image.height; ++p) {
      for (int c = 0; c < 3; ++c) {
        a.push_back(std::clamp(image.color[p][c], 0.0, 1.0));
        b.push_back(dataset.images[i].pixel_channel(p % image.width, p / image.width, c));
      }
    }
    std::snprintf(line, sizeof line, "final_psnr image=%u psnr=%.6f config=%016llx",
                  dataset.poses[i].image_id, psnr(a, b), (unsigned long long)config_hash);
    metrics << line << "\n";
    if (log_level() >= 1) std::cerr << line << "\n";
  }

  run.stop();
  return 0;
}

struct LoadedRun {
  RunArtifacts artifacts;
  std::unique_ptr<DistributedRun> run;
};

LoadedRun open_run(const fs::path& run_dir, int64_t step) {
  LoadedRun lr;
  lr.artifacts = load_run_artifacts(run_dir);
  const uint64_t use_step = step >= 0 ? uint64_t(step) : latest_checkpoint_step(run_dir);
  lr.run = std::make_unique<DistributedRun>(lr.artifacts.config, lr.artifacts.manifest,
                                            lr.artifacts.appearance);
  load_checkpoints_into(*lr.run, run_dir, use_step, lr.artifacts.config.hash());
  lr.run->start();
  return lr;
}

int cmd_render(const std::string& run_dir, const std::string& dataset_dir, uint32_t image_id,
               int64_t step, const std::string& out_image, const std::string& out_depth,
               const std::string& out_attribution) {
  LoadedRun lr = open_run(run_dir, step);
  const std::vector<CameraPose> poses = read_poses(fs::path(dataset_dir) / "poses.txt");
  const CameraPose* pose = nullptr;
  for (const CameraPose& p : poses)
    if (p.image_id == image_id) pose = &p;
  if (!pose) throw std::runtime_error("image id not found in pose file");

  const std::vector<double> eval_vec = lr.artifacts.appearance.mean_row();
  const EvalImage image = lr.run->evaluate_image(*pose, eval_vec);
  write_eval_image(out_image, image);
  if (!out_depth.empty()) {
    double lo = 1e300, hi = -1e300;
    for (double d : image.depth) {
      lo = std::min(lo, d);
      hi = std::max(hi, d);
    }
    write_gray_image(out_depth, image.width, image.height, image.depth, lo, hi);
  }
  if (!out_attribution.empty())
    write_vec_image(out_attribution, image.width, image.height, image.attribution);
  lr.run->stop();
  return 0;
}

int cmd_eval(const std::string& run_dir, const std::string& dataset_dir, const std::string& split,
             int64_t step) {
  LoadedRun lr = open_run(run_dir, step);
  const Dataset dataset = load_dataset(dataset_dir);
  const std::vector<double> eval_vec = lr.artifacts.appearance.mean_row();
  const bool want_train = split == "train";

  double psnr_sum = 0.0, ssim_sum = 0.0;
  uint32_t count = 0;
  std::printf("%-8s %-10s %-10s\n", "image", "psnr", "ssim");
  for (size_t i = 0; i < dataset.size(); ++i) {
    if ((dataset.is_train[i] != 0) != want_train) continue;
    const EvalImage image = lr.run->evaluate_image(dataset.poses[i], eval_vec);
    const uint32_t w = image.width, h = image.height;
    std::vector<double> a(size_t(w) * h * 3), b(a.size());
    for (uint32_t y = 0; y < h; ++y) {
      for (uint32_t x = 0; x < w; ++x) {
        for (int c = 0; c < 3; ++c) {
          a[size_t(c) * w * h + size_t(y) * w + x] =
              std::clamp(image.color[size_t(y) * w + x][c], 0.0, 1.0);
          b[size_t(c) * w * h + size_t(y) * w + x] = dataset.images[i].pixel_channel(x, y, c);
        }
      }
    }
    const double p = psnr(a, b);
    const double s = ssim(a, b, w, h, 3);
    std::printf("%-8u %-10.4f %-10.6f\n", dataset.poses[i].image_id, p, s);
    psnr_sum += p;
    ssim_sum += s;
    ++count;
  }
  if (count == 0) throw std::runtime_error("eval: split is empty");
  std::printf("%-8s %-10.4f %-10.6f\n", "mean", psnr_sum / count, ssim_sum / count);
  lr.run->stop();
  return 0;
}

int cmd_bench(RunConfig config, uint64_t steps) {
  config.validate();
  const Dataset dataset = load_dataset(config.dataset_dir);
  const double ground = dataset_ground_altitude(config.dataset_dir);
  const AppearanceTable appearance = build_appearance(dataset, config.appearance_dim);

  std::printf("%-4s %-6s %-12s %-14s %-14s\n", "K", "grid", "ms/step", "bytes/step",
              "scatter B/ray");
  const std::pair<uint32_t, uint32_t> grids[] = {{1, 1}, {2, 1}, {2, 2}};
  for (const auto& [kx, ky] : grids) {
    RunConfig c = config;
    c.partitions_x = kx;
    c.partitions_y = ky;
    c.total_steps = std::max<uint64_t>(c.total_steps, steps);
    const PartitionManifest manifest = build_manifest(c, dataset, ground);
    DistributedRun run(c, manifest, appearance);
    run.start();
    RayCache cache(c.cache_capacity, c.seed);
    cache.refresh(dataset, std::min<uint64_t>(c.cache_capacity, 1ull << 16));

    const auto t0 = std::chrono::steady_clock::now();
    const uint64_t bytes0 = run.worker_bytes_sent();
    for (uint64_t s = 0; s < steps; ++s)
      run.training_step(cache.draw_batch(c.batch_size), s);
    const auto t1 = std::chrono::steady_clock::now();
    const double ms =
        std::chrono::duration_cast<std::chrono::microseconds>(t1 - t0).count() / 1000.0 /
        double(steps);
    const uint64_t bytes = (run.worker_bytes_sent() - bytes0) / steps;
    const uint64_t entries = run.scatter_entries();
    const double per_ray =
        entries == 0 ? 0.0 : double(run.scatter_payload_bytes()) / double(entries);
    std::printf("%-4u %ux%-4u %-12.2f %-14llu %-14.1f\n", kx * ky, kx, ky, ms,
                (unsigned long long)bytes, per_ray);
    run.stop();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"distgrid: distributed multi-resolution hash grid reconstruction"};
  app.require_subcommand(1);

  // gen-scene
  auto* gen = app.add_subcommand("gen-scene", "generate a synthetic scene and dataset");
  std::string gen_spec = "blob4", gen_out = "dataset";
  RigSpec rig;
  uint64_t gen_seed = 1, gen_oracle_samples = 4096;
  gen->add_option("--spec", gen_spec, "scene spec path or preset name (blob4, empty)");
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_option("--seed", gen_seed, "rig seed");
  gen->add_option("--size", rig.image_size, "image size in pixels");
  gen->add_option("--ring-cameras", rig.ring_cameras, "oblique ring camera count");
  gen->add_option("--nadir-grid", rig.nadir_grid, "nadir camera grid side");
  gen->add_option("--oracle-samples", gen_oracle_samples, "quadrature samples per ray");

  // train
  auto* train = app.add_subcommand("train", "run distributed training");
  std::string train_config;
  bool resume = false;
  std::vector<uint32_t> partitions;
  std::string transport_override, out_override;
  int64_t seed_override = -1;
  int precision = 0;
  train->add_option("--config", train_config, "run config JSON")->required();
  train->add_flag("--resume", resume, "continue from the latest checkpoint");
  train->add_option("--partitions", partitions, "override partition grid: kx ky")->expected(2);
  train->add_option("--transport", transport_override, "override transport: local | tcp");
  train->add_option("--seed", seed_override, "override seed");
  train->add_option("--precision", precision, "wire precision: 32 | 64");
  train->add_option("--out", out_override, "override output directory");

  // render
  auto* render = app.add_subcommand("render", "render one pose from a checkpoint");
  std::string render_run, render_dataset, render_out, render_depth, render_attr;
  uint32_t render_image = 0;
  int64_t render_step = -1;
  render->add_option("--run", render_run, "training output directory")->required();
  render->add_option("--dataset", render_dataset, "dataset directory with poses.txt")->required();
  render->add_option("--image-id", render_image, "pose image id")->required();
  render->add_option("--step", render_step, "checkpoint step (default: latest)");
  render->add_option("--out", render_out, "output PPM")->required();
  render->add_option("--depth", render_depth, "optional depth map PPM");
  render->add_option("--attribution", render_attr, "optional region attribution PPM");

  // eval
  auto* eval = app.add_subcommand("eval", "PSNR/SSIM over a dataset split");
  std::string eval_run, eval_dataset, eval_split = "val";
  int64_t eval_step = -1;
  eval->add_option("--run", eval_run, "training output directory")->required();
  eval->add_option("--dataset", eval_dataset, "dataset directory")->required();
  eval->add_option("--split", eval_split, "train | val");
  eval->add_option("--step", eval_step, "checkpoint step (default: latest)");

  // bench
  auto* bench = app.add_subcommand("bench", "step time and transport bytes vs partition count");
  std::string bench_config;
  uint64_t bench_steps = 10;
  bench->add_option("--config", bench_config, "run config JSON")->required();
  bench->add_option("--steps", bench_steps, "training steps per partition setting");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return cmd_gen_scene(gen_spec, gen_out, rig, gen_seed, gen_oracle_samples);
    if (train->parsed()) {
      RunConfig config = RunConfig::load(train_config);
      if (!partitions.empty()) {
        config.partitions_x = partitions[0];
        config.partitions_y = partitions[1];
      }
      if (!transport_override.empty()) config.transport = transport_override;
      if (seed_override >= 0) config.seed = uint64_t(seed_override);
      if (precision != 0) config.wire_f32 = precision == 32;
      if (!out_override.empty()) config.out_dir = out_override;
      return cmd_train(config, resume);
    }
    if (render->parsed())
      return cmd_render(render_run, render_dataset, render_image, render_step, render_out,
                        render_depth, render_attr);
    if (eval->parsed()) return cmd_eval(eval_run, eval_dataset, eval_split, eval_step);
    if (bench->parsed()) return cmd_bench(RunConfig::load(bench_config), bench_steps);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
