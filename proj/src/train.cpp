#include "distgrid/train.hpp"

#include <cmath>
#include <stdexcept>

namespace distgrid {

double loss_rgb(std::span<const Vec3> rendered, std::span<const Vec3> ground_truth) {
  if (rendered.size() != ground_truth.size())
    throw std::invalid_argument("loss: batch size mismatch");
  double total = 0.0;
  for (size_t i = 0; i < rendered.size(); ++i) {
    const Vec3 d = rendered[i] - ground_truth[i];
    total += dot(d, d);
  }
  return total;
}

Vec3 loss_rgb_grad(const Vec3& rendered, const Vec3& ground_truth) {
  return (rendered - ground_truth) * 2.0;
}

double loss_transmittance_single(double transmittance, double eps) {
  return -std::log(1.0 - std::min(transmittance, 1.0 - eps));
}

double loss_transmittance(std::span<const double> transmittance, double eps) {
  double total = 0.0;
  for (double t : transmittance) total += loss_transmittance_single(t, eps);
  return total;
}

double loss_transmittance_grad(double transmittance, double eps) {
  // Clamped subgradient: positive everywhere, bounded by 1/eps.
  return 1.0 / (1.0 - std::min(transmittance, 1.0 - eps));
}

double loss_distortion(std::span<const double> weights, std::span<const double> midpoints,
                       std::span<const double> interval_lengths) {
  const size_t n = weights.size();
  if (midpoints.size() != n || interval_lengths.size() != n)
    throw std::invalid_argument("loss: distortion input size mismatch");
  // Midpoints arrive sorted (samples are ordered along the ray), so the
  // double sum collapses to prefix sums.
  double w_prefix = 0.0, m_prefix = 0.0;
  double pair_term = 0.0, interval_term = 0.0;
  for (size_t k = 0; k < n; ++k) {
    pair_term += 2.0 * weights[k] * (midpoints[k] * w_prefix - m_prefix);
    interval_term += weights[k] * weights[k] * interval_lengths[k];
    w_prefix += weights[k];
    m_prefix += weights[k] * midpoints[k];
  }
  return pair_term + interval_term / 3.0;
}

void loss_distortion_grad(std::span<const double> weights, std::span<const double> midpoints,
                          std::span<const double> interval_lengths, std::span<double> grads) {
  const size_t n = weights.size();
  if (grads.size() != n) throw std::invalid_argument("loss: distortion grad size mismatch");
  double w_total = 0.0, m_total = 0.0;
  for (size_t k = 0; k < n; ++k) {
    w_total += weights[k];
    m_total += weights[k] * midpoints[k];
  }
  double w_prefix = 0.0, m_prefix = 0.0;
  for (size_t k = 0; k < n; ++k) {
    const double w_suffix = w_total - w_prefix - weights[k];
    const double m_suffix = m_total - m_prefix - weights[k] * midpoints[k];
    grads[k] = 2.0 * (midpoints[k] * w_prefix - m_prefix) +
               2.0 * (m_suffix - midpoints[k] * w_suffix) +
               (2.0 / 3.0) * weights[k] * interval_lengths[k];
    w_prefix += weights[k];
    m_prefix += weights[k] * midpoints[k];
  }
}

double LrSchedule::at(uint64_t step) const {
  const double progress = total_steps == 0 ? 1.0 : double(step) / double(total_steps);
  return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + std::cos(M_PI * progress));
}

AdamState::AdamState(std::span<const size_t> array_sizes) {
  m_.reserve(array_sizes.size());
  v_.reserve(array_sizes.size());
  for (size_t n : array_sizes) {
    m_.emplace_back(n, 0.0);
    v_.emplace_back(n, 0.0);
  }
}

void AdamState::step(std::span<const std::span<double>> params,
                     std::span<const std::span<const double>> grads, double lr,
                     const AdamConfig& config) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    throw std::invalid_argument("adam: array count mismatch");
  ++step_count_;
  const double bias1 = 1.0 - std::pow(config.beta1, double(step_count_));
  const double bias2 = 1.0 - std::pow(config.beta2, double(step_count_));
  for (size_t a = 0; a < params.size(); ++a) {
    if (params[a].size() != m_[a].size() || grads[a].size() != m_[a].size())
      throw std::invalid_argument("adam: parameter shape mismatch");
    double* p = params[a].data();
    const double* g = grads[a].data();
    double* m = m_[a].data();
    double* v = v_[a].data();
    const size_t n = params[a].size();
    for (size_t i = 0; i < n; ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bias1;
      const double v_hat = v[i] / bias2;
      p[i] -= lr * m_hat / (std::sqrt(v_hat) + config.eps);
    }
  }
}

RayCache::RayCache(size_t capacity, uint64_t seed)
    : capacity_(capacity),
      refresh_rng_(splitmix64(seed ^ 0x5261794361636865ull)),
      draw_rng_(splitmix64(seed ^ 0x4261746368447277ull)) {
  if (capacity == 0) throw std::invalid_argument("ray cache: capacity must be positive");
}

void RayCache::refresh(const Dataset& dataset, size_t count) {
  std::vector<uint32_t> train_indices;
  for (size_t i = 0; i < dataset.size(); ++i)
    if (dataset.is_train[i]) train_indices.push_back(uint32_t(i));
  if (train_indices.empty()) throw std::invalid_argument("ray cache: dataset has no train images");

  for (size_t i = 0; i < count; ++i) {
    const uint32_t image_index = train_indices[refresh_rng_.uniform_index(train_indices.size())];
    const Image& image = dataset.images[image_index];
    const uint32_t x = uint32_t(refresh_rng_.uniform_index(image.width));
    const uint32_t y = uint32_t(refresh_rng_.uniform_index(image.height));
    SupervisedRay ray = make_pixel_ray(dataset, image_index, x, y);
    std::lock_guard lock(mutex_);  // entry-granular: a ray is never half-written
    if (entries_.size() < capacity_) {
      entries_.push_back(ray);
    } else {
      entries_[cursor_] = ray;
      cursor_ = (cursor_ + 1) % capacity_;
    }
  }
}

std::vector<SupervisedRay> RayCache::snapshot() const {
  std::lock_guard lock(mutex_);
  return entries_;
}

std::vector<SupervisedRay> RayCache::draw_batch(size_t batch_size) {
  std::lock_guard lock(mutex_);
  if (entries_.empty()) throw std::runtime_error("ray cache: empty");
  std::vector<SupervisedRay> batch;
  batch.reserve(batch_size);
  for (size_t i = 0; i < batch_size; ++i)
    batch.push_back(entries_[draw_rng_.uniform_index(entries_.size())]);
  return batch;
}

}  // namespace distgrid
