#include "distgrid/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace distgrid {

using nlohmann::json;

uint64_t fnv1a(const void* data, size_t size) {
  const uint8_t* p = static_cast<const uint8_t*>(data);
  uint64_t h = 0xcbf29ce484222325ull;
  for (size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

void RunConfig::validate() const {
  if (partitions_x < 1 || partitions_y < 1)
    throw std::invalid_argument("config: partitions must be >= 1");
  if (transport != "local" && transport != "tcp")
    throw std::invalid_argument("config: transport must be 'local' or 'tcp'");
  if (batch_size == 0 || total_steps == 0)
    throw std::invalid_argument("config: batch_size and total_steps must be positive");
  if (march_step_divisor <= 0.0)
    throw std::invalid_argument("config: march_step_divisor must be positive");
  if (!(loss.transmittance_clamp > 0.0 && loss.transmittance_clamp < 1.0))
    throw std::invalid_argument("config: transmittance clamp must be in (0,1)");
  if (loss.lambda_transmittance < 0.0 || loss.lambda_distortion < 0.0)
    throw std::invalid_argument("config: loss weights must be non-negative");
}

std::string RunConfig::to_json() const {
  json j;
  j["dataset_dir"] = dataset_dir;
  j["out_dir"] = out_dir;
  j["partitions"] = {partitions_x, partitions_y};
  j["transport"] = transport;
  j["tcp_base_port"] = tcp_base_port;
  j["seed"] = seed;
  j["precision"] = wire_f32 ? 32 : 64;
  j["grid"] = {{"fine_table_log2", fine_table_log2},
               {"coarse_table_log2", coarse_table_log2},
               {"levels", grid_levels},
               {"features", grid_features},
               {"base_resolution", base_resolution},
               {"max_resolution", max_resolution}};
  j["appearance_dim"] = appearance_dim;
  j["march_step_divisor"] = march_step_divisor;
  j["occupancy"] = {{"resolution", occ_resolution},
                    {"decay", occ_decay},
                    {"warmup_steps", occ_warmup_steps},
                    {"update_interval", occ_update_interval},
                    {"threshold_early", occ_threshold_early},
                    {"threshold_late", occ_threshold_late},
                    {"threshold_switch_step", occ_threshold_switch_step},
                    {"threshold_scale", occ_threshold_scale}};
  j["train"] = {{"total_steps", total_steps},
                {"batch_size", batch_size},
                {"cache_capacity", cache_capacity},
                {"cache_refresh_interval", cache_refresh_interval},
                {"cache_refresh_count", cache_refresh_count},
                {"lambda_transmittance", loss.lambda_transmittance},
                {"lambda_distortion", loss.lambda_distortion},
                {"transmittance_clamp", loss.transmittance_clamp},
                {"lr_start", lr_start},
                {"lr_end", lr_end},
                {"distortion_cross_correction", distortion_cross_correction}};
  j["altitude_margin"] = altitude_margin;
  j["eval"] = {{"early_termination", eval_early_termination},
               {"termination_threshold", eval_termination_threshold}};
  j["log_interval"] = log_interval;
  j["checkpoint_interval"] = checkpoint_interval;
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("config: parse error: ") + e.what());
  }
  RunConfig c;
  c.dataset_dir = j.value("dataset_dir", c.dataset_dir);
  c.out_dir = j.value("out_dir", c.out_dir);
  if (j.contains("partitions")) {
    c.partitions_x = j["partitions"].at(0);
    c.partitions_y = j["partitions"].at(1);
  }
  c.transport = j.value("transport", c.transport);
  c.tcp_base_port = j.value("tcp_base_port", c.tcp_base_port);
  c.seed = j.value("seed", c.seed);
  c.wire_f32 = j.value("precision", 64) == 32;
  if (j.contains("grid")) {
    const json& g = j["grid"];
    c.fine_table_log2 = g.value("fine_table_log2", c.fine_table_log2);
    c.coarse_table_log2 = g.value("coarse_table_log2", c.coarse_table_log2);
    c.grid_levels = g.value("levels", c.grid_levels);
    c.grid_features = g.value("features", c.grid_features);
    c.base_resolution = g.value("base_resolution", c.base_resolution);
    c.max_resolution = g.value("max_resolution", c.max_resolution);
  }
  c.appearance_dim = j.value("appearance_dim", c.appearance_dim);
  c.march_step_divisor = j.value("march_step_divisor", c.march_step_divisor);
  if (j.contains("occupancy")) {
    const json& o = j["occupancy"];
    c.occ_resolution = o.value("resolution", c.occ_resolution);
    c.occ_decay = o.value("decay", c.occ_decay);
    c.occ_warmup_steps = o.value("warmup_steps", c.occ_warmup_steps);
    c.occ_update_interval = o.value("update_interval", c.occ_update_interval);
    c.occ_threshold_early = o.value("threshold_early", c.occ_threshold_early);
    c.occ_threshold_late = o.value("threshold_late", c.occ_threshold_late);
    c.occ_threshold_switch_step = o.value("threshold_switch_step", c.occ_threshold_switch_step);
    c.occ_threshold_scale = o.value("threshold_scale", c.occ_threshold_scale);
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    c.total_steps = t.value("total_steps", c.total_steps);
    c.batch_size = t.value("batch_size", c.batch_size);
    c.cache_capacity = t.value("cache_capacity", c.cache_capacity);
    c.cache_refresh_interval = t.value("cache_refresh_interval", c.cache_refresh_interval);
    c.cache_refresh_count = t.value("cache_refresh_count", c.cache_refresh_count);
    c.loss.lambda_transmittance = t.value("lambda_transmittance", c.loss.lambda_transmittance);
    c.loss.lambda_distortion = t.value("lambda_distortion", c.loss.lambda_distortion);
    c.loss.transmittance_clamp = t.value("transmittance_clamp", c.loss.transmittance_clamp);
    c.lr_start = t.value("lr_start", c.lr_start);
    c.lr_end = t.value("lr_end", c.lr_end);
    c.distortion_cross_correction =
        t.value("distortion_cross_correction", c.distortion_cross_correction);
  }
  c.altitude_margin = j.value("altitude_margin", c.altitude_margin);
  if (j.contains("eval")) {
    c.eval_early_termination = j["eval"].value("early_termination", c.eval_early_termination);
    c.eval_termination_threshold =
        j["eval"].value("termination_threshold", c.eval_termination_threshold);
  }
  c.log_interval = j.value("log_interval", c.log_interval);
  c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return from_json(ss.str());
}

void RunConfig::save(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("config: cannot write " + path);
  f << to_json() << "\n";
}

uint64_t RunConfig::hash() const {
  const std::string canonical = to_json();
  return fnv1a(canonical.data(), canonical.size());
}

RunConfig RunConfig::blob4_preset() {
  RunConfig c;
  c.partitions_x = 2;
  c.partitions_y = 2;
  c.fine_table_log2 = 13;
  c.coarse_table_log2 = 12;
  c.grid_levels = 8;
  c.base_resolution = 16;
  c.max_resolution = 256;
  c.march_step_divisor = 256.0;
  c.occ_resolution = 64;
  c.occ_warmup_steps = 256;
  c.occ_threshold_scale = 0.02;
  c.occ_threshold_switch_step = 1000;
  c.total_steps = 5000;
  c.batch_size = 1024;
  c.cache_capacity = 1ull << 17;
  c.cache_refresh_interval = 32;
  c.cache_refresh_count = 1ull << 14;
  c.log_interval = 100;
  return c;
}

}  // namespace distgrid
