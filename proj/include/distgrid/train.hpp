#pragma once

#include <cstdint>
#include <mutex>
#include <span>
#include <vector>

#include "distgrid/dataset.hpp"
#include "distgrid/rng.hpp"
#include "distgrid/vecmath.hpp"

namespace distgrid {

struct LossConfig {
  double lambda_transmittance = 1e-3;
  double lambda_distortion = 1e-3;
  double transmittance_clamp = 1e-6;  // keeps -log(1 - T) finite at T = 1
};

/// Squared L2 color error, summed over the batch. Gradient per ray is
/// 2 (C - C_gt).
double loss_rgb(std::span<const Vec3> rendered, std::span<const Vec3> ground_truth);
Vec3 loss_rgb_grad(const Vec3& rendered, const Vec3& ground_truth);

/// -sum log(1 - min(T, 1 - eps)): drives final transmittance toward zero.
double loss_transmittance(std::span<const double> transmittance, double eps = 1e-6);
double loss_transmittance_single(double transmittance, double eps = 1e-6);
double loss_transmittance_grad(double transmittance, double eps = 1e-6);

/// Distortion loss over one ray's compositing weights w_k at normalized
/// midpoints s_k with interval lengths ds_k (all sorted in s):
///   sum_{i,j} w_i w_j |s_i - s_j| + (1/3) sum_k w_k^2 ds_k.
double loss_distortion(std::span<const double> weights, std::span<const double> midpoints,
                       std::span<const double> interval_lengths);

/// d loss_distortion / d w_k for the same inputs.
void loss_distortion_grad(std::span<const double> weights, std::span<const double> midpoints,
                          std::span<const double> interval_lengths, std::span<double> grads);

/// Cosine learning-rate schedule from 0.05 down to 0.005 across total steps.
struct LrSchedule {
  double lr_start = 0.05;
  double lr_end = 0.005;
  uint64_t total_steps = 1;

  double at(uint64_t step) const;
};

/// Adam with bias correction; moments are per parameter array.
struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-15;
};

class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(std::span<const size_t> array_sizes);

  void step(std::span<const std::span<double>> params,
            std::span<const std::span<const double>> grads, double lr,
            const AdamConfig& config = {});

  uint64_t step_count() const { return step_count_; }
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void set_step_count(uint64_t t) { step_count_ = t; }

 private:
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  uint64_t step_count_ = 0;
};

/// In-memory reservoir of supervised rays, refreshed in place from the
/// dataset. Refresh replaces the oldest entries (ring cursor); batch draws
/// are uniform over current contents. Refresh may run concurrently with
/// draws: entries swap atomically at entry granularity, so a draw never sees
/// a half-written ray.
class RayCache {
 public:
  RayCache(size_t capacity, uint64_t seed);

  size_t size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
  }
  size_t capacity() const { return capacity_; }

  /// Replaces `count` oldest entries with rays sampled uniformly over
  /// (train image, pixel) pairs.
  void refresh(const Dataset& dataset, size_t count);

  /// Uniform draw with replacement from current contents.
  std::vector<SupervisedRay> draw_batch(size_t batch_size);

  std::vector<SupervisedRay> snapshot() const;

 private:
  size_t capacity_;
  std::vector<SupervisedRay> entries_;
  size_t cursor_ = 0;
  Rng refresh_rng_;
  Rng draw_rng_;
  mutable std::mutex mutex_;
};

}  // namespace distgrid
