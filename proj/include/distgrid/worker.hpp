#pragma once

#include <chrono>
#include <functional>
#include <memory>
#include <thread>

#include "distgrid/checkpoint.hpp"
#include "distgrid/config.hpp"
#include "distgrid/dataset.hpp"
#include "distgrid/field.hpp"
#include "distgrid/partition.hpp"
#include "distgrid/render.hpp"
#include "distgrid/train.hpp"
#include "distgrid/transport.hpp"

namespace distgrid {

/// March sample tagged with the cascade that shades it.
struct CascadeSample {
  MarchSample sample;
  uint8_t cascade = 0;  // 0 fine, 1 coarse
};

/// Splits [t0, t1] at the fine-box boundary, walks the matching occupancy
/// grid on each side, and lays one sample ladder over the union of occupied
/// intervals. Every caller (worker and monolithic reference) shares this
/// routine so their sample sets coincide exactly.
std::vector<CascadeSample> cascade_march(const Ray& ray, const RegionBox& region,
                                         const OccupancyGrid& occ_fine,
                                         const OccupancyGrid& occ_coarse, double t0, double t1,
                                         const MarchConfig& config, uint64_t ray_id);

/// Per-region parameter bundle used by the monolithic reference renderer.
struct RegionFieldView {
  const RegionBox* region = nullptr;
  const FieldParams* fine = nullptr;
  const FieldParams* coarse = nullptr;
  const OccupancyGrid* occ_fine = nullptr;
  const OccupancyGrid* occ_coarse = nullptr;
};

/// Renders a ray by concatenating every segment's samples into one list and
/// compositing once; no merge is involved. This is the single-model reference
/// the segmented pipeline must reproduce.
MergedRender render_ray_monolithic(const PartitionManifest& manifest,
                                   std::span<const RegionFieldView> fields, const Ray& ray,
                                   const MarchConfig& march, std::span<const double> appearance);

struct BatchPlan {
  std::vector<RayDispatchMsg> per_worker;
  std::vector<std::vector<ScheduleEntry>> schedules;  // per batch ray, may be empty
  uint64_t dropped = 0;                               // rays missing the outer box
};

/// Segments every ray and assigns it, with its full schedule, to the dispatch
/// set of each region it intersects.
BatchPlan plan_batch(std::span<const SupervisedRay> batch, const PartitionManifest& manifest);

/// One region owner: both cascade fields, occupancy, optimizer state, and a
/// transport endpoint. All mutable state is touched only by the owning thread
/// between start() and join.
class Worker {
 public:
  struct Setup {
    uint32_t region_id = 0;
    WireConfig wire;
    double march_step = 1e-2;
    uint64_t seed = 1;
    uint64_t occ_warmup_steps = 4096;
    uint64_t occ_update_interval = 16;
    double occ_threshold_early = 0.6;
    double occ_threshold_late = 60.0;
    double occ_threshold_scale = 1.0;
    uint64_t occ_threshold_switch_step = 10000;
    uint32_t occ_resolution = 128;
    double occ_decay = 0.99;
    LossConfig loss;
    LrSchedule lr;
    AdamConfig adam;
    bool distortion_cross_correction = false;
    std::chrono::milliseconds recv_timeout{120000};
  };

  Worker(const Setup& setup, const PartitionManifest& manifest, const GridConfig& fine_grid,
         const GridConfig& coarse_grid, uint32_t appearance_dim, const AppearanceTable* appearance,
         std::unique_ptr<Transport> transport);

  /// Message loop; returns on a Stop frame. Any protocol failure throws and
  /// is re-raised on join.
  void run();

  // State access for the main thread (pre-start / post-join only).
  FieldParams& fine_field() { return fine_; }
  FieldParams& coarse_field() { return coarse_; }
  const FieldParams& fine_field() const { return fine_; }
  const FieldParams& coarse_field() const { return coarse_; }
  OccupancyGrid& occ_fine() { return occ_fine_; }
  OccupancyGrid& occ_coarse() { return occ_coarse_; }
  const OccupancyGrid& occ_fine() const { return occ_fine_; }
  const OccupancyGrid& occ_coarse() const { return occ_coarse_; }
  uint64_t step() const { return step_; }
  uint32_t region_id() const { return setup_.region_id; }
  const RegionBox& region() const { return region_; }
  Transport& transport() { return *transport_; }

  WorkerCheckpoint make_checkpoint(uint64_t config_hash) const;
  void load_state(const WorkerCheckpoint& ckpt);

  /// Merged colors of the most recent training batch, every ray this worker
  /// merged (post-join test hook).
  const std::vector<std::pair<uint64_t, Vec3>>& last_merged() const { return last_merged_; }

 private:
  struct RayWork;

  ControlSyncMsg handle_training_batch(const RayDispatchMsg& msg);
  void handle_eval_request(const EvalRequestMsg& msg);
  void shade_samples(const Ray& ray, std::span<const CascadeSample> samples,
                     std::span<const double> appearance, std::vector<ShadedSample>& shaded,
                     std::vector<FieldSampleCache>* caches);
  void backward_ray(const RayWork& work, std::span<const PartialRender> partials,
                    const Vec3& color_gt);
  void apply_updates();
  void update_occupancy();
  std::span<const double> appearance_row(uint32_t image_id) const;
  double density_at(const Vec3& world_point, bool fine_cascade);

  Setup setup_;
  PartitionManifest manifest_;
  RegionBox region_;
  FieldParams fine_;
  FieldParams coarse_;
  OccupancyGrid occ_fine_;
  OccupancyGrid occ_coarse_;
  FieldGrads grads_fine_;
  FieldGrads grads_coarse_;
  AdamState adam_;
  const AppearanceTable* appearance_ = nullptr;
  std::unique_ptr<Transport> transport_;
  Rng occ_rng_;
  uint64_t step_ = 0;

  std::vector<std::pair<uint64_t, Vec3>> last_merged_;

  // Raw (pre-weight) loss sums for the current batch.
  double batch_loss_rgb_ = 0.0;
  double batch_loss_t_ = 0.0;
  double batch_loss_dist_ = 0.0;
  uint64_t batch_rays_owned_ = 0;
};

struct StepStats {
  uint64_t step = 0;
  double loss_rgb = 0.0;
  double loss_transmittance = 0.0;
  double loss_distortion = 0.0;
  double lr = 0.0;
  uint64_t rays = 0;
  uint64_t dropped_rays = 0;
  uint64_t bytes_sent = 0;  // sum over workers, this step's delta
};

struct EvalImage {
  uint32_t width = 0;
  uint32_t height = 0;
  std::vector<Vec3> color;
  std::vector<double> transmittance;
  std::vector<double> depth;
  std::vector<Vec3> attribution;  // per-region palette blend, optional use
};

/// Hosts K workers (threads over an in-process or loopback-TCP transport)
/// plus the driver endpoint that plans batches, aggregates metrics, and acts
/// as the evaluation master.
class DistributedRun {
 public:
  DistributedRun(const RunConfig& config, const PartitionManifest& manifest,
                 const AppearanceTable& appearance);
  ~DistributedRun();

  DistributedRun(const DistributedRun&) = delete;
  DistributedRun& operator=(const DistributedRun&) = delete;

  uint32_t worker_count() const { return uint32_t(workers_.size()); }
  Worker& worker(uint32_t region) { return *workers_.at(region); }

  /// Spawns worker threads. Worker state must not be touched until stop().
  void start();
  /// Sends Stop to every worker and joins; rethrows the first worker error.
  void stop();
  bool running() const { return running_; }

  /// Lock-step training iteration across all workers.
  StepStats training_step(std::span<const SupervisedRay> batch, uint64_t step);

  /// Master-slave evaluation render of one camera pose.
  EvalImage evaluate_image(const CameraPose& pose, std::span<const double> appearance_vec);

  /// Per-ray merged colors for the given rays (diagnostic / test hook; uses
  /// the same dispatch + merge path as evaluate_image).
  std::vector<MergedRender> evaluate_rays(std::span<const Ray> rays,
                                          std::span<const double> appearance_vec);

  Transport& driver_transport() { return *driver_; }
  uint64_t worker_bytes_sent() const;
  uint64_t scatter_payload_bytes() const;
  uint64_t scatter_entries() const;

 private:
  std::vector<MergedRender> dispatch_eval(std::span<const Ray> rays,
                                          std::span<const double> appearance_vec,
                                          std::vector<std::vector<ScheduleEntry>>* schedules_out,
                                          std::vector<std::vector<PartialEntry>>* partials_out);

  RunConfig config_;
  PartitionManifest manifest_;
  const AppearanceTable* appearance_;
  WireConfig wire_;
  std::unique_ptr<LocalTransportGroup> local_group_;
  std::vector<std::unique_ptr<Worker>> workers_;
  std::vector<std::thread> threads_;
  std::vector<std::exception_ptr> worker_errors_;
  std::unique_ptr<Transport> driver_;
  bool running_ = false;
  uint64_t eval_batch_counter_ = 0;
};

/// Grid configs for one region derived from the run config and its boxes.
GridConfig make_fine_grid_config(const RunConfig& config, const Aabb& fine_box);
GridConfig make_coarse_grid_config(const RunConfig& config, const Aabb& coarse_box);
double march_step_for(const RunConfig& config, const Aabb& outer_box);

struct TrainLoopHooks {
  std::function<void(const StepStats&)> on_log;       // every log_interval steps
  std::function<void(uint64_t step)> on_checkpoint;   // checkpoint cadence + final step
};

/// Drives the cache-refresh / draw / training_step cycle from start_step to
/// config.total_steps. The run must already be started.
void train_loop(DistributedRun& run, RayCache& cache, const Dataset& dataset,
                const RunConfig& config, uint64_t start_step, const TrainLoopHooks& hooks = {});

/// Mean PSNR of the run's renders against the dataset images of one split.
double evaluate_split_psnr(DistributedRun& run, const Dataset& dataset,
                           std::span<const double> appearance_vec, bool train_split);

}  // namespace distgrid
