#include "distgrid/oracle.hpp"

#include <cmath>
#include <stdexcept>

namespace distgrid {

OracleResult oracle_render(const SyntheticScene& scene, const Ray& ray, double t0, double t1,
                           uint64_t n_samples) {
  if (n_samples < 1) throw std::invalid_argument("oracle: n_samples must be >= 1");
  OracleResult out;
  if (!(t1 > t0)) return out;

  const double dt = (t1 - t0) / double(n_samples);
  double transmittance = 1.0;
  Vec3 color;
  for (uint64_t k = 0; k < n_samples; ++k) {
    const double t = t0 + (double(k) + 0.5) * dt;
    const Vec3 p = ray.at(t);
    const double sigma = scene.sigma_at(p);
    if (sigma > 0.0) {
      const double alpha = 1.0 - std::exp(-sigma * dt);
      color += scene.color_at(p) * (transmittance * alpha);
      transmittance *= 1.0 - alpha;
    }
  }
  out.color = color;
  out.transmittance = transmittance;
  return out;
}

OracleResult oracle_render(const SyntheticScene& scene, const Ray& ray, uint64_t n_samples) {
  const auto hit = ray_aabb_intersect(ray, scene.outer_box);
  if (!hit) return {};
  return oracle_render(scene, ray, hit->t_near, hit->t_far, n_samples);
}

}  // namespace distgrid
