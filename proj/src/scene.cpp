#include "distgrid/scene.hpp"

#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace distgrid {

using nlohmann::json;

double SyntheticScene::sigma_at(const Vec3& p) const {
  double sigma = 0.0;
  for (const GaussianBlob& b : blobs) {
    const Vec3 d = (p - b.center) / b.stddev;
    sigma += b.peak * std::exp(-0.5 * dot(d, d));
  }
  for (const DensityBox& b : boxes)
    if (b.box.contains(p)) sigma += b.sigma;
  return sigma;
}

Vec3 SyntheticScene::color_at(const Vec3& p) const {
  double sigma = 0.0;
  Vec3 weighted;
  for (const GaussianBlob& b : blobs) {
    const Vec3 d = (p - b.center) / b.stddev;
    const double s = b.peak * std::exp(-0.5 * dot(d, d));
    sigma += s;
    weighted += b.color * s;
  }
  for (const DensityBox& b : boxes) {
    if (b.box.contains(p)) {
      sigma += b.sigma;
      weighted += b.color * b.sigma;
    }
  }
  if (sigma <= 0.0) return {};
  return weighted / sigma;
}

std::string SyntheticScene::to_json() const {
  json j;
  j["outer_box"] = {{"min", {outer_box.lo.x, outer_box.lo.y, outer_box.lo.z}},
                    {"max", {outer_box.hi.x, outer_box.hi.y, outer_box.hi.z}}};
  j["ground_altitude"] = ground_altitude;
  j["blobs"] = json::array();
  for (const GaussianBlob& b : blobs)
    j["blobs"].push_back(json{{"center", {b.center.x, b.center.y, b.center.z}},
                              {"stddev", {b.stddev.x, b.stddev.y, b.stddev.z}},
                              {"peak", b.peak},
                              {"color", {b.color.x, b.color.y, b.color.z}}});
  j["boxes"] = json::array();
  for (const DensityBox& b : boxes)
    j["boxes"].push_back(json{{"min", {b.box.lo.x, b.box.lo.y, b.box.lo.z}},
                              {"max", {b.box.hi.x, b.box.hi.y, b.box.hi.z}},
                              {"sigma", b.sigma},
                              {"color", {b.color.x, b.color.y, b.color.z}}});
  return j.dump(2);
}

SyntheticScene SyntheticScene::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("scene: parse error: ") + e.what());
  }
  SyntheticScene s;
  auto vec3_of = [](const json& a) { return Vec3{a.at(0), a.at(1), a.at(2)}; };
  s.outer_box.lo = vec3_of(j.at("outer_box").at("min"));
  s.outer_box.hi = vec3_of(j.at("outer_box").at("max"));
  s.ground_altitude = j.at("ground_altitude");
  for (const json& bj : j.value("blobs", json::array())) {
    GaussianBlob b;
    b.center = vec3_of(bj.at("center"));
    b.stddev = vec3_of(bj.at("stddev"));
    b.peak = bj.at("peak");
    b.color = vec3_of(bj.at("color"));
    if (!(b.stddev.x > 0 && b.stddev.y > 0 && b.stddev.z > 0) || b.peak < 0)
      throw std::runtime_error("scene: invalid blob");
    s.blobs.push_back(b);
  }
  for (const json& bj : j.value("boxes", json::array())) {
    DensityBox b;
    b.box.lo = vec3_of(bj.at("min"));
    b.box.hi = vec3_of(bj.at("max"));
    b.sigma = bj.at("sigma");
    b.color = vec3_of(bj.at("color"));
    if (!b.box.valid() || b.sigma < 0) throw std::runtime_error("scene: invalid box");
    s.boxes.push_back(b);
  }
  return s;
}

SyntheticScene SyntheticScene::blob4_preset() {
  SyntheticScene s;
  s.outer_box = {{-2.0, -2.0, 0.0}, {2.0, 2.0, 2.0}};
  s.ground_altitude = 0.0;
  const double peak = 40.0;
  s.blobs = {
      {{-0.9, -0.9, 0.55}, {0.30, 0.30, 0.25}, peak, {0.85, 0.25, 0.20}},
      {{0.9, -0.8, 0.45}, {0.35, 0.25, 0.22}, peak, {0.20, 0.70, 0.90}},
      {{-0.8, 0.9, 0.50}, {0.25, 0.35, 0.28}, peak, {0.95, 0.80, 0.15}},
      {{0.85, 0.85, 0.60}, {0.28, 0.28, 0.30}, peak, {0.35, 0.85, 0.30}},
  };
  // Ground slab: keeps downward rays terminating inside the box.
  s.boxes = {{{{-2.0, -2.0, 0.0}, {2.0, 2.0, 0.08}}, 80.0, {0.45, 0.42, 0.38}}};
  return s;
}

}  // namespace distgrid
