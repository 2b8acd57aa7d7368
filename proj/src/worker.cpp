#include "distgrid/worker.hpp"

#include "distgrid/metrics.hpp"

#include <cmath>
#include <map>
#include <stdexcept>
#include <unordered_map>

namespace distgrid {

namespace {

constexpr std::chrono::milliseconds kDriverRecvTimeout{600000};

uint64_t digest_color(uint64_t digest, uint64_t ray_id, const Vec3& c) {
  digest = fnv1a(&ray_id, sizeof ray_id) ^ (digest * 0x100000001b3ull);
  double v[3] = {c.x, c.y, c.z};
  return digest ^ fnv1a(v, sizeof v);
}

PartialRender to_partial(const PartialEntry& e) {
  PartialRender p;
  p.ray_id = e.ray_id;
  p.region_id = e.region_id;
  p.color = e.color;
  p.transmittance = e.transmittance;
  p.weight_sum = e.weight_sum;
  p.weight_moment = e.weight_moment;
  p.distortion_local = e.distortion_local;
  p.depth_sum = e.depth_sum;
  return p;
}

void shade_cascade_samples(const RegionBox& region, const FieldParams& fine,
                           const FieldParams& coarse, const Ray& ray,
                           std::span<const CascadeSample> samples,
                           std::span<const double> appearance, std::vector<ShadedSample>& shaded,
                           std::vector<FieldSampleCache>* caches) {
  shaded.resize(samples.size());
  if (caches) caches->resize(samples.size());
  for (size_t k = 0; k < samples.size(); ++k) {
    const bool is_fine = samples[k].cascade == 0;
    const FieldParams& params = is_fine ? fine : coarse;
    const Aabb& box = is_fine ? region.fine : region.coarse;
    const Vec3 p = clamp(box.to_unit(ray.at(samples[k].sample.t)), 0.0, 1.0);
    FieldSampleCache* cache = caches ? &(*caches)[k] : nullptr;
    const DensityResult density = query_density(p, params, cache);
    const Vec3 rgb = query_color(density.feature, ray.dir, appearance, params, cache);
    shaded[k] = {density.sigma, rgb};
  }
}

std::vector<MarchSample> plain_samples(std::span<const CascadeSample> samples) {
  std::vector<MarchSample> out(samples.size());
  for (size_t k = 0; k < samples.size(); ++k) out[k] = samples[k].sample;
  return out;
}

/// Distortion aggregates over one segment's local weights: weight sum, first
/// moment of the normalized midpoints, and the local distortion value.
void local_distortion_inputs(std::span<const MarchSample> samples, const LocalRenderCache& cache,
                             double ray_t0, double ray_t1, std::vector<double>& weights,
                             std::vector<double>& midpoints, std::vector<double>& intervals) {
  const double inv_span = 1.0 / (ray_t1 - ray_t0);
  const size_t n = samples.size();
  weights.resize(n);
  midpoints.resize(n);
  intervals.resize(n);
  for (size_t k = 0; k < n; ++k) {
    weights[k] = cache.prefix[k] * cache.alpha[k];
    midpoints[k] = (samples[k].t - ray_t0) * inv_span;
    intervals[k] = samples[k].delta * inv_span;
  }
}

}  // namespace

std::vector<CascadeSample> cascade_march(const Ray& ray, const RegionBox& region,
                                         const OccupancyGrid& occ_fine,
                                         const OccupancyGrid& occ_coarse, double t0, double t1,
                                         const MarchConfig& config, uint64_t ray_id) {
  std::vector<RayInterval> occupied;
  double fine_a = t1, fine_b = t1;
  bool has_fine = false;
  if (const auto hit = ray_aabb_intersect(ray, region.fine)) {
    fine_a = std::clamp(hit->t_near, t0, t1);
    fine_b = std::clamp(hit->t_far, t0, t1);
    has_fine = fine_b > fine_a;
  }

  auto append = [&occupied](std::vector<RayInterval>&& list) {
    for (RayInterval& r : list) occupied.push_back(r);
  };
  if (has_fine) {
    if (fine_a > t0) append(occupancy_skip(ray, t0, fine_a, occ_coarse));
    append(occupancy_skip(ray, fine_a, fine_b, occ_fine));
    if (fine_b < t1) append(occupancy_skip(ray, fine_b, t1, occ_coarse));
  } else {
    append(occupancy_skip(ray, t0, t1, occ_coarse));
  }

  const std::vector<MarchSample> flat = march_segment(t0, t1, occupied, config, ray_id);
  std::vector<CascadeSample> out(flat.size());
  for (size_t k = 0; k < flat.size(); ++k) {
    out[k].sample = flat[k];
    out[k].cascade = (has_fine && flat[k].t >= fine_a && flat[k].t < fine_b) ? 0 : 1;
  }
  return out;
}

MergedRender render_ray_monolithic(const PartitionManifest& manifest,
                                   std::span<const RegionFieldView> fields, const Ray& ray,
                                   const MarchConfig& march, std::span<const double> appearance) {
  const std::vector<RaySegment> segments = segment_ray(ray, manifest);
  MergedRender merged;
  merged.ray_id = ray.pixel_id;
  if (segments.empty()) return merged;

  std::vector<MarchSample> all_samples;
  std::vector<ShadedSample> all_shaded;
  std::vector<ShadedSample> shaded;
  for (const RaySegment& seg : segments) {
    const RegionFieldView& rf = fields[seg.region_id];
    const std::vector<CascadeSample> samples = cascade_march(
        ray, *rf.region, *rf.occ_fine, *rf.occ_coarse, seg.t_enter, seg.t_exit, march, seg.ray_id);
    shade_cascade_samples(*rf.region, *rf.fine, *rf.coarse, ray, samples, appearance, shaded,
                          nullptr);
    for (size_t k = 0; k < samples.size(); ++k) {
      all_samples.push_back(samples[k].sample);
      all_shaded.push_back(shaded[k]);
    }
  }
  const PartialRender whole = local_render(ray.pixel_id, 0, all_samples, all_shaded);
  merged.color = whole.color;
  merged.transmittance = whole.transmittance;
  merged.depth = whole.depth_sum;
  return merged;
}

BatchPlan plan_batch(std::span<const SupervisedRay> batch, const PartitionManifest& manifest) {
  BatchPlan plan;
  plan.per_worker.resize(manifest.region_count());
  plan.schedules.resize(batch.size());
  for (size_t idx = 0; idx < batch.size(); ++idx) {
    const SupervisedRay& sray = batch[idx];
    const std::vector<RaySegment> segments = segment_ray(sray.ray, manifest);
    if (segments.empty()) {
      ++plan.dropped;
      continue;
    }
    DispatchRay d;
    d.ray_id = idx;
    d.origin = sray.ray.origin;
    d.dir = sray.ray.dir;
    d.color_gt = sray.color_gt;
    d.image_id = sray.image_id;
    d.schedule.reserve(segments.size());
    for (const RaySegment& seg : segments)
      d.schedule.push_back({uint16_t(seg.region_id), seg.t_enter, seg.t_exit});
    plan.schedules[idx] = d.schedule;
    for (const RaySegment& seg : segments) plan.per_worker[seg.region_id].rays.push_back(d);
  }
  return plan;
}

// ---- Worker ----

struct Worker::RayWork {
  DispatchRay ray;
  uint32_t my_order = 0;
  double ray_t0 = 0.0;
  double ray_t1 = 0.0;
  std::vector<CascadeSample> samples;
  PartialEntry own_entry;  // wire-quantized, as every peer sees it
};

Worker::Worker(const Setup& setup, const PartitionManifest& manifest, const GridConfig& fine_grid,
               const GridConfig& coarse_grid, uint32_t appearance_dim,
               const AppearanceTable* appearance, std::unique_ptr<Transport> transport)
    : setup_(setup),
      manifest_(manifest),
      region_(manifest.regions.at(setup.region_id)),
      appearance_(appearance),
      transport_(std::move(transport)),
      occ_rng_(counter_hash(setup.seed, 0x0cc0, setup.region_id)) {
  Rng init_fine(counter_hash(setup_.seed, 0xf1e1d, setup_.region_id));
  Rng init_coarse(counter_hash(setup_.seed, 0xc0a45e, setup_.region_id));
  fine_ = FieldParams(CascadeLevel::Fine, fine_grid, appearance_dim, init_fine);
  coarse_ = FieldParams(CascadeLevel::Coarse, coarse_grid, appearance_dim, init_coarse);
  grads_fine_ = make_field_grads(fine_);
  grads_coarse_ = make_field_grads(coarse_);

  const double initial_threshold = setup_.occ_threshold_early * setup_.occ_threshold_scale;
  occ_fine_ = OccupancyGrid(region_.fine, setup_.occ_resolution, setup_.occ_decay,
                            initial_threshold);
  occ_coarse_ = OccupancyGrid(region_.coarse, setup_.occ_resolution, setup_.occ_decay,
                              initial_threshold);
  occ_fine_.fill_occupied();
  occ_coarse_.fill_occupied();

  std::vector<size_t> sizes;
  for (auto& a : fine_.parameter_arrays()) sizes.push_back(a.size());
  for (auto& a : coarse_.parameter_arrays()) sizes.push_back(a.size());
  adam_ = AdamState(sizes);
}

std::span<const double> Worker::appearance_row(uint32_t image_id) const {
  return appearance_->row(image_id);
}

double Worker::density_at(const Vec3& world_point, bool fine_cascade) {
  const FieldParams& params = fine_cascade ? fine_ : coarse_;
  const Aabb& box = fine_cascade ? region_.fine : region_.coarse;
  const Vec3 p = clamp(box.to_unit(world_point), 0.0, 1.0);
  return query_density(p, params).sigma;
}

void Worker::run() {
  const uint32_t driver = transport_->world_size() - 1;
  while (true) {
    const std::vector<uint8_t> frame = transport_->recv(driver, setup_.recv_timeout);
    const DecodedFrame decoded = decode_frame(frame);
    switch (decoded.tag) {
      case MessageTag::RayDispatch: {
        const RayDispatchMsg msg = decode_ray_dispatch(decoded, setup_.wire);
        const ControlSyncMsg sync = handle_training_batch(msg);
        transport_->send(driver, encode_control_sync(sync, setup_.wire));
        break;
      }
      case MessageTag::EvalRequest: {
        handle_eval_request(decode_eval_request(decoded, setup_.wire));
        break;
      }
      case MessageTag::Stop:
        return;
      default:
        throw std::runtime_error("worker " + std::to_string(setup_.region_id) +
                                 ": unexpected message tag " +
                                 std::to_string(int(decoded.tag)));
    }
  }
}

void Worker::shade_samples(const Ray& ray, std::span<const CascadeSample> samples,
                           std::span<const double> appearance, std::vector<ShadedSample>& shaded,
                           std::vector<FieldSampleCache>* caches) {
  shade_cascade_samples(region_, fine_, coarse_, ray, samples, appearance, shaded, caches);
}

ControlSyncMsg Worker::handle_training_batch(const RayDispatchMsg& msg) {
  const uint32_t me = setup_.region_id;
  const uint32_t n_workers = transport_->world_size() - 1;
  batch_loss_rgb_ = batch_loss_t_ = batch_loss_dist_ = 0.0;
  batch_rays_owned_ = 0;
  uint64_t digest = 0xcbf29ce484222325ull;

  MarchConfig march;
  march.step = setup_.march_step;
  march.jitter = true;
  march.jitter_seed = setup_.seed;
  march.jitter_step = msg.batch_id;

  // Phase 1: march and render the local segment of every dispatched ray.
  std::vector<RayWork> work;
  work.reserve(msg.rays.size());
  std::vector<ShadedSample> shaded;
  for (const DispatchRay& dray : msg.rays) {
    RayWork item;
    item.ray = dray;
    int my_order = -1;
    for (size_t i = 0; i < dray.schedule.size(); ++i)
      if (dray.schedule[i].region_id == me) my_order = int(i);
    if (my_order < 0)
      throw std::runtime_error("worker " + std::to_string(me) + ": dispatched ray " +
                               std::to_string(dray.ray_id) + " does not intersect this region");
    item.my_order = uint32_t(my_order);
    item.ray_t0 = dray.schedule.front().t_enter;
    item.ray_t1 = dray.schedule.back().t_exit;

    Ray ray{dray.origin, dray.dir, dray.ray_id, dray.image_id};
    const ScheduleEntry& mine = dray.schedule[item.my_order];
    item.samples = cascade_march(ray, region_, occ_fine_, occ_coarse_, mine.t_enter, mine.t_exit,
                                 march, dray.ray_id);

    LocalRenderCache cache;
    const std::vector<MarchSample> flat = plain_samples(item.samples);
    shade_samples(ray, item.samples, appearance_row(dray.image_id), shaded, nullptr);
    PartialRender partial = local_render(dray.ray_id, me, flat, shaded, &cache);
    if (setup_.distortion_cross_correction) {
      std::vector<double> w, s, ds;
      local_distortion_inputs(flat, cache, item.ray_t0, item.ray_t1, w, s, ds);
      partial.weight_sum = 0.0;
      partial.weight_moment = 0.0;
      for (size_t k = 0; k < w.size(); ++k) {
        partial.weight_sum += w[k];
        partial.weight_moment += w[k] * s[k];
      }
      partial.distortion_local = loss_distortion(w, s, ds);
    }

    PartialEntry entry;
    entry.ray_id = dray.ray_id;
    entry.region_id = uint16_t(me);
    entry.color = partial.color;
    entry.transmittance = partial.transmittance;
    entry.weight_sum = partial.weight_sum;
    entry.weight_moment = partial.weight_moment;
    entry.distortion_local = partial.distortion_local;
    item.own_entry = quantize_partial(entry, setup_.wire);
    work.push_back(std::move(item));
  }

  // Phase 2: scatter the local partials to every other region each ray
  // intersects, then gather theirs.
  std::vector<std::vector<PartialEntry>> outgoing(n_workers);
  std::vector<uint64_t> expected(n_workers, 0);
  for (const RayWork& item : work) {
    for (const ScheduleEntry& e : item.ray.schedule) {
      if (e.region_id == me) continue;
      outgoing[e.region_id].push_back(item.own_entry);
      ++expected[e.region_id];
    }
  }
  for (uint32_t peer = 0; peer < n_workers; ++peer) {
    if (peer == me || outgoing[peer].empty()) continue;
    PartialScatterMsg scatter;
    scatter.batch_id = msg.batch_id;
    scatter.with_distortion = setup_.distortion_cross_correction;
    scatter.entries = std::move(outgoing[peer]);
    std::vector<uint8_t> frame = encode_partial_scatter(scatter, setup_.wire);
    transport_->note_scatter(frame.size(), scatter.entries.size());
    transport_->send(peer, std::move(frame));
  }

  std::unordered_map<uint64_t, std::map<uint32_t, PartialEntry>> received;
  for (uint32_t peer = 0; peer < n_workers; ++peer) {
    if (peer == me || expected[peer] == 0) continue;
    std::vector<uint8_t> frame;
    try {
      frame = transport_->recv(peer, setup_.recv_timeout);
    } catch (const TransportTimeout&) {
      throw std::runtime_error("worker " + std::to_string(me) +
                               ": step aborted, missing PartialScatter from worker " +
                               std::to_string(peer) + " for batch " +
                               std::to_string(msg.batch_id));
    }
    const DecodedFrame decoded = decode_frame(frame);
    if (decoded.tag != MessageTag::PartialScatter || decoded.batch_id != msg.batch_id)
      throw std::runtime_error("worker " + std::to_string(me) +
                               ": unexpected frame while gathering partials for batch " +
                               std::to_string(msg.batch_id));
    const PartialScatterMsg scatter = decode_partial_scatter(decoded, setup_.wire);
    if (scatter.entries.size() != expected[peer])
      throw std::runtime_error("worker " + std::to_string(me) + ": expected " +
                               std::to_string(expected[peer]) + " partials from worker " +
                               std::to_string(peer) + ", got " +
                               std::to_string(scatter.entries.size()));
    for (const PartialEntry& e : scatter.entries) received[e.ray_id][e.region_id] = e;
  }

  // Phase 3: merge, supervise, and back-propagate into local parameters.
  last_merged_.clear();
  for (const RayWork& item : work) {
    std::vector<PartialRender> partials;
    partials.reserve(item.ray.schedule.size());
    for (const ScheduleEntry& e : item.ray.schedule) {
      if (e.region_id == me) {
        partials.push_back(to_partial(item.own_entry));
      } else {
        const auto ray_it = received.find(item.ray.ray_id);
        if (ray_it == received.end() || !ray_it->second.count(e.region_id))
          throw std::runtime_error("worker " + std::to_string(me) + ": missing partial (ray " +
                                   std::to_string(item.ray.ray_id) + ", region " +
                                   std::to_string(e.region_id) + ") in batch " +
                                   std::to_string(msg.batch_id));
        partials.push_back(to_partial(ray_it->second.at(e.region_id)));
      }
    }
    backward_ray(item, partials, item.ray.color_gt);
    const MergedRender merged = merge_forward(partials);
    last_merged_.emplace_back(item.ray.ray_id, merged.color);
    if (item.ray.schedule.front().region_id == me)
      digest = digest_color(digest, item.ray.ray_id, merged.color);
  }

  apply_updates();
  step_ = msg.batch_id + 1;
  update_occupancy();

  ControlSyncMsg sync;
  sync.batch_id = msg.batch_id;
  sync.iteration = step_;
  sync.loss_rgb = batch_loss_rgb_;
  sync.loss_transmittance = batch_loss_t_;
  sync.loss_distortion = batch_loss_dist_;
  sync.rays_owned = batch_rays_owned_;
  sync.bytes_sent = transport_->bytes_sent();
  sync.merged_color_digest = digest;
  return sync;
}

void Worker::backward_ray(const RayWork& item, std::span<const PartialRender> partials,
                          const Vec3& color_gt) {
  const uint32_t me = setup_.region_id;
  const size_t n_segments = partials.size();
  const MergedRender merged = merge_forward(partials);

  const bool first_owner = item.ray.schedule.front().region_id == me;
  if (first_owner) {
    const Vec3 diff = merged.color - color_gt;
    batch_loss_rgb_ += dot(diff, diff);
    batch_loss_t_ +=
        loss_transmittance_single(merged.transmittance, setup_.loss.transmittance_clamp);
    ++batch_rays_owned_;
  }

  const Vec3 color_up = loss_rgb_grad(merged.color, color_gt);
  const double t_up = setup_.loss.lambda_transmittance *
                      loss_transmittance_grad(merged.transmittance,
                                              setup_.loss.transmittance_clamp);
  const std::vector<MergeGrad> merge_grads = merge_backward(color_up, t_up, partials);
  MergeGrad mine = merge_grads[item.my_order];

  // Recompute the local forward with activation caches; the inputs match
  // phase 1 exactly, so alpha/prefix reproduce bit for bit.
  Ray ray{item.ray.origin, item.ray.dir, item.ray.ray_id, item.ray.image_id};
  std::vector<ShadedSample> shaded;
  std::vector<FieldSampleCache> field_caches;
  shade_samples(ray, item.samples, appearance_row(item.ray.image_id), shaded, &field_caches);
  const std::vector<MarchSample> flat = plain_samples(item.samples);
  LocalRenderCache cache;
  local_render(item.ray.ray_id, me, flat, shaded, &cache);

  // Distortion. Without the cross-segment correction the loss is the
  // per-segment pairwise term over local weights, so its gradient stays
  // entirely local. With the correction, the exchanged aggregates make every
  // cross term (and the T_i path through later prefixes) computable here.
  const size_t n = flat.size();
  std::vector<double> weights, midpoints, intervals;
  local_distortion_inputs(flat, cache, item.ray_t0, item.ray_t1, weights, midpoints, intervals);
  std::vector<double> weight_up(n, 0.0);
  const double lambda_dist = setup_.loss.lambda_distortion;
  if (!setup_.distortion_cross_correction) {
    if (n > 0) {
      batch_loss_dist_ += loss_distortion(weights, midpoints, intervals);
      if (lambda_dist > 0.0) {
        loss_distortion_grad(weights, midpoints, intervals, weight_up);
        for (double& g : weight_up) g *= lambda_dist;
      }
    }
  } else {
    std::vector<double> prefix(n_segments + 1, 1.0);
    for (size_t i = 0; i < n_segments; ++i)
      prefix[i + 1] = prefix[i] * partials[i].transmittance;
    const size_t i_mine = item.my_order;
    const double p_mine = prefix[i_mine];

    if (first_owner) {
      double full = 0.0;
      for (size_t m = 0; m < n_segments; ++m)
        full += prefix[m] * prefix[m] * partials[m].distortion_local;
      for (size_t i2 = 0; i2 < n_segments; ++i2)
        for (size_t m = i2 + 1; m < n_segments; ++m)
          full += 2.0 * prefix[i2] * prefix[m] *
                  (partials[i2].weight_sum * partials[m].weight_moment -
                   partials[i2].weight_moment * partials[m].weight_sum);
      batch_loss_dist_ += full;
    }

    if (lambda_dist > 0.0) {
      if (n > 0) {
        loss_distortion_grad(weights, midpoints, intervals, weight_up);  // dQ'/dw
        double later_w = 0.0, later_m = 0.0, earlier_w = 0.0, earlier_m = 0.0;
        for (size_t m = 0; m < n_segments; ++m) {
          const double pw = prefix[m] * partials[m].weight_sum;
          const double pm = prefix[m] * partials[m].weight_moment;
          if (m > i_mine) {
            later_w += pw;
            later_m += pm;
          } else if (m < i_mine) {
            earlier_w += pw;
            earlier_m += pm;
          }
        }
        for (size_t k = 0; k < n; ++k) {
          const double cross = 2.0 * p_mine *
                               (later_m - midpoints[k] * later_w + midpoints[k] * earlier_w -
                                earlier_m);
          weight_up[k] = lambda_dist * (p_mine * p_mine * weight_up[k] + cross);
        }
      }

      // d L_dist / d T_mine: T_mine scales the prefix of every later segment.
      double t_grad = 0.0;
      for (size_t m = i_mine + 1; m < n_segments; ++m) {
        double dL_dPm = 2.0 * prefix[m] * partials[m].distortion_local;
        for (size_t i2 = 0; i2 < m; ++i2)
          dL_dPm += 2.0 * prefix[i2] * (partials[i2].weight_sum * partials[m].weight_moment -
                                        partials[i2].weight_moment * partials[m].weight_sum);
        for (size_t m2 = m + 1; m2 < n_segments; ++m2)
          dL_dPm += 2.0 * prefix[m2] * (partials[m].weight_sum * partials[m2].weight_moment -
                                        partials[m].weight_moment * partials[m2].weight_sum);
        double prod_excl = 1.0;  // prod_{j<m, j != mine} T_j
        for (size_t j = 0; j < m; ++j)
          if (j != i_mine) prod_excl *= partials[j].transmittance;
        t_grad += dL_dPm * prod_excl;
      }
      mine.transmittance_grad += lambda_dist * t_grad;
    }
  }

  std::vector<double> sigma_grads(n);
  std::vector<Vec3> color_grads(n);
  local_render_backward(flat, shaded, cache, mine.color_grad, mine.transmittance_grad, weight_up,
                        sigma_grads, color_grads);
  for (size_t k = 0; k < n; ++k) {
    const bool is_fine = item.samples[k].cascade == 0;
    field_backward(is_fine ? fine_ : coarse_, field_caches[k], shaded[k].sigma, sigma_grads[k],
                   color_grads[k], is_fine ? grads_fine_ : grads_coarse_);
  }
}

void Worker::apply_updates() {
  std::vector<std::span<double>> params;
  for (auto& a : fine_.parameter_arrays()) params.push_back(a);
  for (auto& a : coarse_.parameter_arrays()) params.push_back(a);

  std::vector<std::span<const double>> grads;
  auto add_grads = [&grads](FieldGrads& g) {
    for (auto& level : g.grid.level_grads) grads.emplace_back(level);
    for (auto& layer : g.density_mlp) {
      grads.emplace_back(layer.weights);
      grads.emplace_back(layer.bias);
    }
    for (auto& layer : g.color_mlp) {
      grads.emplace_back(layer.weights);
      grads.emplace_back(layer.bias);
    }
  };
  add_grads(grads_fine_);
  add_grads(grads_coarse_);

  adam_.step(params, grads, setup_.lr.at(step_), setup_.adam);
  grads_fine_.zero();
  grads_coarse_.zero();
}

void Worker::update_occupancy() {
  if (step_ == 0 || step_ % setup_.occ_update_interval != 0) return;
  const double threshold =
      (step_ < setup_.occ_threshold_switch_step ? setup_.occ_threshold_early
                                                : setup_.occ_threshold_late) *
      setup_.occ_threshold_scale;
  occ_fine_.set_threshold(threshold);
  occ_coarse_.set_threshold(threshold);
  const bool warm_up = step_ <= setup_.occ_warmup_steps;
  occ_fine_.decay_and_update([this](const Vec3& p) { return density_at(p, true); }, step_,
                             warm_up, occ_rng_);
  occ_coarse_.decay_and_update([this](const Vec3& p) { return density_at(p, false); }, step_,
                               warm_up, occ_rng_);
}

void Worker::handle_eval_request(const EvalRequestMsg& msg) {
  const uint32_t me = setup_.region_id;
  const uint32_t driver = transport_->world_size() - 1;
  MarchConfig march;
  march.step = setup_.march_step;
  march.jitter = false;

  PartialScatterMsg reply;
  reply.tag = MessageTag::EvalReply;
  reply.batch_id = msg.batch_id;
  reply.with_depth = true;
  reply.entries.reserve(msg.rays.size());
  std::vector<ShadedSample> shaded;
  for (const DispatchRay& dray : msg.rays) {
    int my_order = -1;
    for (size_t i = 0; i < dray.schedule.size(); ++i)
      if (dray.schedule[i].region_id == me) my_order = int(i);
    if (my_order < 0)
      throw std::runtime_error("worker " + std::to_string(me) +
                               ": eval ray does not intersect this region");
    const ScheduleEntry& mine = dray.schedule[size_t(my_order)];
    Ray ray{dray.origin, dray.dir, dray.ray_id, dray.image_id};
    const std::vector<CascadeSample> samples = cascade_march(
        ray, region_, occ_fine_, occ_coarse_, mine.t_enter, mine.t_exit, march, dray.ray_id);
    shade_samples(ray, samples, msg.appearance, shaded, nullptr);
    const PartialRender partial =
        local_render(dray.ray_id, me, plain_samples(samples), shaded);
    PartialEntry entry;
    entry.ray_id = dray.ray_id;
    entry.region_id = uint16_t(me);
    entry.color = partial.color;
    entry.transmittance = partial.transmittance;
    entry.depth_sum = partial.depth_sum;
    reply.entries.push_back(quantize_partial(entry, setup_.wire));
  }
  transport_->send(driver, encode_partial_scatter(reply, setup_.wire));
}

WorkerCheckpoint Worker::make_checkpoint(uint64_t config_hash) const {
  WorkerCheckpoint ckpt;
  ckpt.config_hash = config_hash;
  ckpt.step = step_;
  ckpt.region_id = setup_.region_id;
  ckpt.fine = fine_;
  ckpt.coarse = coarse_;
  ckpt.occ_fine = occ_fine_;
  ckpt.occ_coarse = occ_coarse_;
  ckpt.adam = adam_;
  return ckpt;
}

void Worker::load_state(const WorkerCheckpoint& ckpt) {
  if (ckpt.region_id != setup_.region_id)
    throw std::runtime_error("worker: checkpoint region mismatch");
  fine_ = ckpt.fine;
  coarse_ = ckpt.coarse;
  occ_fine_ = ckpt.occ_fine;
  occ_coarse_ = ckpt.occ_coarse;
  adam_ = ckpt.adam;
  step_ = ckpt.step;
  grads_fine_ = make_field_grads(fine_);
  grads_coarse_ = make_field_grads(coarse_);
}

// ---- DistributedRun ----

DistributedRun::DistributedRun(const RunConfig& config, const PartitionManifest& manifest,
                               const AppearanceTable& appearance)
    : config_(config), manifest_(manifest), appearance_(&appearance) {
  wire_.reals_f32 = config.wire_f32;
  const uint32_t n_workers = manifest.region_count();
  const uint32_t world = n_workers + 1;
  const uint64_t manifest_hash = [&] {
    const std::string text = manifest.to_json();
    return fnv1a(text.data(), text.size());
  }();

  std::vector<std::unique_ptr<Transport>> endpoints(world);
  if (config.transport == "tcp") {
    std::vector<std::thread> connectors;
    std::vector<std::exception_ptr> errors(world);
    for (uint32_t id = 0; id < world; ++id) {
      connectors.emplace_back([&, id] {
        try {
          endpoints[id] = TcpTransportGroup::connect(id, world, config.tcp_base_port,
                                                     manifest_hash, wire_,
                                                     std::chrono::milliseconds(30000));
        } catch (...) {
          errors[id] = std::current_exception();
        }
      });
    }
    for (auto& t : connectors) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  } else {
    local_group_ = std::make_unique<LocalTransportGroup>(world);
    for (uint32_t id = 0; id < world; ++id) endpoints[id] = local_group_->endpoint(id);
  }

  const double step = march_step_for(config, manifest.outer);
  for (uint32_t region = 0; region < n_workers; ++region) {
    Worker::Setup setup;
    setup.region_id = region;
    setup.wire = wire_;
    setup.march_step = step;
    setup.seed = config.seed;
    setup.occ_warmup_steps = config.occ_warmup_steps;
    setup.occ_update_interval = config.occ_update_interval;
    setup.occ_threshold_early = config.occ_threshold_early;
    setup.occ_threshold_late = config.occ_threshold_late;
    setup.occ_threshold_scale = config.occ_threshold_scale;
    setup.occ_threshold_switch_step = config.occ_threshold_switch_step;
    setup.occ_resolution = config.occ_resolution;
    setup.occ_decay = config.occ_decay;
    setup.loss = config.loss;
    setup.lr = LrSchedule{config.lr_start, config.lr_end, config.total_steps};
    setup.distortion_cross_correction = config.distortion_cross_correction;
    const RegionBox& box = manifest.regions[region];
    workers_.push_back(std::make_unique<Worker>(
        setup, manifest, make_fine_grid_config(config, box.fine),
        make_coarse_grid_config(config, box.coarse), config.appearance_dim, appearance_,
        std::move(endpoints[region])));
  }
  driver_ = std::move(endpoints[n_workers]);
  worker_errors_.resize(n_workers);
}

DistributedRun::~DistributedRun() {
  if (running_) {
    try {
      stop();
    } catch (...) {
      // Destructor swallows shutdown errors; stop() reports them when called
      // explicitly.
    }
  }
}

void DistributedRun::start() {
  if (running_) throw std::logic_error("run already started");
  running_ = true;
  for (uint32_t i = 0; i < workers_.size(); ++i) {
    Worker* w = workers_[i].get();
    worker_errors_[i] = nullptr;
    threads_.emplace_back([this, w, i] {
      try {
        w->run();
      } catch (...) {
        worker_errors_[i] = std::current_exception();
      }
    });
  }
}

void DistributedRun::stop() {
  if (!running_) return;
  for (uint32_t i = 0; i < workers_.size(); ++i)
    driver_->send(i, encode_frame(MessageTag::Stop, 0, {}));
  for (auto& t : threads_) t.join();
  threads_.clear();
  running_ = false;
  for (auto& e : worker_errors_)
    if (e) std::rethrow_exception(e);
}

StepStats DistributedRun::training_step(std::span<const SupervisedRay> batch, uint64_t step) {
  BatchPlan plan = plan_batch(batch, manifest_);
  const uint64_t bytes_before = worker_bytes_sent();
  for (uint32_t w = 0; w < workers_.size(); ++w) {
    plan.per_worker[w].batch_id = step;
    driver_->send(w, encode_ray_dispatch(plan.per_worker[w], wire_));
  }

  StepStats stats;
  stats.step = step;
  stats.dropped_rays = plan.dropped;
  stats.rays = batch.size() - plan.dropped;
  for (uint32_t w = 0; w < workers_.size(); ++w) {
    const std::vector<uint8_t> frame = driver_->recv(w, kDriverRecvTimeout);
    const DecodedFrame decoded = decode_frame(frame);
    if (decoded.tag != MessageTag::ControlSync || decoded.batch_id != step)
      throw std::runtime_error("driver: unexpected frame from worker " + std::to_string(w));
    const ControlSyncMsg sync = decode_control_sync(decoded, wire_);
    stats.loss_rgb += sync.loss_rgb;
    stats.loss_transmittance += sync.loss_transmittance;
    stats.loss_distortion += sync.loss_distortion;
  }
  stats.lr = LrSchedule{config_.lr_start, config_.lr_end, config_.total_steps}.at(step);
  stats.bytes_sent = worker_bytes_sent() - bytes_before;
  return stats;
}

std::vector<MergedRender> DistributedRun::dispatch_eval(
    std::span<const Ray> rays, std::span<const double> appearance_vec,
    std::vector<std::vector<ScheduleEntry>>* schedules_out,
    std::vector<std::vector<PartialEntry>>* partials_out) {
  const uint64_t batch_id = (1ull << 63) | eval_batch_counter_++;
  const uint32_t n_workers = uint32_t(workers_.size());

  std::vector<EvalRequestMsg> requests(n_workers);
  std::vector<std::vector<ScheduleEntry>> schedules(rays.size());
  for (uint32_t w = 0; w < n_workers; ++w) {
    requests[w].batch_id = batch_id;
    requests[w].appearance.assign(appearance_vec.begin(), appearance_vec.end());
  }
  for (size_t idx = 0; idx < rays.size(); ++idx) {
    const std::vector<RaySegment> segments = segment_ray(rays[idx], manifest_);
    if (segments.empty()) continue;
    DispatchRay d;
    d.ray_id = idx;
    d.origin = rays[idx].origin;
    d.dir = rays[idx].dir;
    d.image_id = rays[idx].image_id;
    for (const RaySegment& seg : segments)
      d.schedule.push_back({uint16_t(seg.region_id), seg.t_enter, seg.t_exit});
    schedules[idx] = d.schedule;
    for (const RaySegment& seg : segments) requests[seg.region_id].rays.push_back(d);
  }
  for (uint32_t w = 0; w < n_workers; ++w)
    driver_->send(w, encode_eval_request(requests[w], wire_));

  std::unordered_map<uint64_t, std::map<uint32_t, PartialEntry>> received;
  for (uint32_t w = 0; w < n_workers; ++w) {
    std::vector<uint8_t> frame;
    try {
      frame = driver_->recv(w, kDriverRecvTimeout);
    } catch (const TransportTimeout&) {
      throw std::runtime_error("eval: region " + std::to_string(w) + " unreachable");
    }
    const DecodedFrame decoded = decode_frame(frame);
    if (decoded.tag != MessageTag::EvalReply || decoded.batch_id != batch_id)
      throw std::runtime_error("eval: unexpected frame from worker " + std::to_string(w));
    const PartialScatterMsg reply = decode_partial_scatter(decoded, wire_);
    for (const PartialEntry& e : reply.entries) received[e.ray_id][e.region_id] = e;
  }

  std::vector<MergedRender> out(rays.size());
  if (partials_out) partials_out->resize(rays.size());
  for (size_t idx = 0; idx < rays.size(); ++idx) {
    out[idx].ray_id = idx;
    if (schedules[idx].empty()) continue;  // missed the scene: background
    std::vector<PartialRender> partials;
    std::vector<PartialEntry> entries;
    double prefix = 1.0;
    for (const ScheduleEntry& e : schedules[idx]) {
      const auto ray_it = received.find(idx);
      if (ray_it == received.end() || !ray_it->second.count(e.region_id))
        throw std::runtime_error("eval: missing partial for ray " + std::to_string(idx) +
                                 " from region " + std::to_string(e.region_id));
      const PartialEntry& entry = ray_it->second.at(e.region_id);
      partials.push_back(to_partial(entry));
      entries.push_back(entry);
      if (config_.eval_early_termination) {
        prefix *= entry.transmittance;
        if (prefix < config_.eval_termination_threshold) break;  // evaluation-only skip
      }
    }
    const MergedRender merged = merge_forward(partials);
    out[idx] = merged;
    out[idx].ray_id = idx;
    if (partials_out) (*partials_out)[idx] = std::move(entries);
  }
  if (schedules_out) *schedules_out = std::move(schedules);
  return out;
}

std::vector<MergedRender> DistributedRun::evaluate_rays(std::span<const Ray> rays,
                                                        std::span<const double> appearance_vec) {
  return dispatch_eval(rays, appearance_vec, nullptr, nullptr);
}

EvalImage DistributedRun::evaluate_image(const CameraPose& pose,
                                         std::span<const double> appearance_vec) {
  std::vector<Ray> rays;
  rays.reserve(size_t(pose.width) * pose.height);
  for (uint32_t y = 0; y < pose.height; ++y) {
    for (uint32_t x = 0; x < pose.width; ++x) {
      Ray ray;
      ray.origin = pose.translation;
      ray.dir = pose.pixel_ray_dir(double(x) + 0.5, double(y) + 0.5);
      ray.pixel_id = size_t(y) * pose.width + x;
      ray.image_id = pose.image_id;
      rays.push_back(ray);
    }
  }

  std::vector<std::vector<PartialEntry>> partials;
  const std::vector<MergedRender> merged = dispatch_eval(rays, appearance_vec, nullptr, &partials);

  EvalImage image;
  image.width = pose.width;
  image.height = pose.height;
  image.color.resize(rays.size());
  image.transmittance.assign(rays.size(), 1.0);
  image.depth.assign(rays.size(), 0.0);
  image.attribution.resize(rays.size());
  for (size_t i = 0; i < rays.size(); ++i) {
    image.color[i] = merged[i].color;
    image.transmittance[i] = merged[i].transmittance;
    image.depth[i] = merged[i].depth;
    // Region attribution: weight each region by the transmittance it absorbs
    // after the ray reaches it.
    Vec3 attribution;
    double prefix = 1.0;
    for (const PartialEntry& e : partials[i]) {
      const double weight = prefix * (1.0 - e.transmittance);
      const double hue = double(e.region_id) * 0.61803398875;
      const Vec3 palette{0.5 + 0.5 * std::cos(6.2831853 * hue),
                         0.5 + 0.5 * std::cos(6.2831853 * (hue + 1.0 / 3.0)),
                         0.5 + 0.5 * std::cos(6.2831853 * (hue + 2.0 / 3.0))};
      attribution += palette * weight;
      prefix *= e.transmittance;
    }
    image.attribution[i] = attribution;
  }
  return image;
}

uint64_t DistributedRun::worker_bytes_sent() const {
  uint64_t total = 0;
  for (const auto& w : workers_) total += w->transport().bytes_sent();
  return total;
}

uint64_t DistributedRun::scatter_payload_bytes() const {
  uint64_t total = 0;
  for (const auto& w : workers_) total += w->transport().scatter_payload_bytes();
  return total;
}

uint64_t DistributedRun::scatter_entries() const {
  uint64_t total = 0;
  for (const auto& w : workers_) total += w->transport().scatter_entries();
  return total;
}

GridConfig make_fine_grid_config(const RunConfig& config, const Aabb& fine_box) {
  GridConfig g;
  g.levels = config.grid_levels;
  g.table_length = 1u << config.fine_table_log2;
  g.features_per_level = config.grid_features;
  g.base_resolution = config.base_resolution;
  g.max_resolution = config.max_resolution;
  g.aspect = fine_box.extent();
  return g;
}

GridConfig make_coarse_grid_config(const RunConfig& config, const Aabb& coarse_box) {
  GridConfig g;
  g.levels = config.grid_levels;
  g.table_length = 1u << config.coarse_table_log2;
  g.features_per_level = config.grid_features;
  g.base_resolution = config.base_resolution;
  g.max_resolution = config.max_resolution;
  g.aspect = coarse_box.extent();
  return g;
}

double march_step_for(const RunConfig& config, const Aabb& outer_box) {
  return max_component(outer_box.extent()) / config.march_step_divisor;
}

void train_loop(DistributedRun& run, RayCache& cache, const Dataset& dataset,
                const RunConfig& config, uint64_t start_step, const TrainLoopHooks& hooks) {
  if (cache.size() == 0) cache.refresh(dataset, cache.capacity());

  StepStats window{};
  uint64_t window_steps = 0;
  for (uint64_t step = start_step; step < config.total_steps; ++step) {
    if (step > start_step && config.cache_refresh_interval != 0 &&
        step % config.cache_refresh_interval == 0)
      cache.refresh(dataset, config.cache_refresh_count);

    const std::vector<SupervisedRay> batch = cache.draw_batch(config.batch_size);
    const StepStats stats = run.training_step(batch, step);

    window.loss_rgb += stats.loss_rgb;
    window.loss_transmittance += stats.loss_transmittance;
    window.loss_distortion += stats.loss_distortion;
    window.rays += stats.rays;
    window.dropped_rays += stats.dropped_rays;
    window.bytes_sent += stats.bytes_sent;
    ++window_steps;

    const bool last = step + 1 == config.total_steps;
    if (hooks.on_log && (last || (step + 1) % config.log_interval == 0)) {
      StepStats logged = window;
      logged.step = step + 1;
      logged.lr = stats.lr;
      const double denom = double(std::max<uint64_t>(window.rays, 1));
      logged.loss_rgb /= denom;
      logged.loss_transmittance /= denom;
      logged.loss_distortion /= denom;
      hooks.on_log(logged);
      window = StepStats{};
      window_steps = 0;
    }
    if (hooks.on_checkpoint &&
        (last || (config.checkpoint_interval != 0 && (step + 1) % config.checkpoint_interval == 0)))
      hooks.on_checkpoint(step + 1);
  }
}

double evaluate_split_psnr(DistributedRun& run, const Dataset& dataset,
                           std::span<const double> appearance_vec, bool train_split) {
  std::vector<double> rendered, reference;
  for (size_t i = 0; i < dataset.size(); ++i) {
    if ((dataset.is_train[i] != 0) != train_split) continue;
    const EvalImage image = run.evaluate_image(dataset.poses[i], appearance_vec);
    const Image& gt = dataset.images[i];
    for (uint32_t p = 0; p < image.width * image.height; ++p) {
      for (int c = 0; c < 3; ++c) {
        rendered.push_back(std::clamp(image.color[p][c], 0.0, 1.0));
        reference.push_back(gt.pixel_channel(p % image.width, p / image.width, c));
      }
    }
  }
  if (rendered.empty()) throw std::runtime_error("evaluate_split_psnr: split is empty");
  return psnr(rendered, reference);
}

}  // namespace distgrid
