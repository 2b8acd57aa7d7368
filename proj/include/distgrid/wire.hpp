#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "distgrid/render.hpp"
#include "distgrid/vecmath.hpp"

namespace distgrid {

static_assert(std::endian::native == std::endian::little,
              "wire format assumes a little-endian host");

/// Frame layout: 4-byte length (bytes after the length field), 1-byte tag,
/// 8-byte batch id, payload. Reals are IEEE-754 little-endian; the width is
/// fixed per run by the precision flag.
enum class MessageTag : uint8_t {
  Hello = 1,
  RayDispatch = 2,
  PartialScatter = 3,
  ControlSync = 4,
  EvalRequest = 5,
  EvalReply = 6,
  Stop = 7,
};

struct WireConfig {
  bool reals_f32 = false;  // false: 64-bit payload reals (test default)
};

class WireError : public std::runtime_error {
 public:
  WireError(const std::string& what, size_t offset)
      : std::runtime_error(what + " (frame offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  size_t offset() const { return offset_; }

 private:
  size_t offset_;
};

class WireWriter {
 public:
  explicit WireWriter(WireConfig config) : config_(config) {}

  void u8(uint8_t v) { buf_.push_back(v); }
  void u16(uint16_t v) { append(&v, 2); }
  void u32(uint32_t v) { append(&v, 4); }
  void u64(uint64_t v) { append(&v, 8); }
  void real(double v) {
    if (config_.reals_f32) {
      const float f = float(v);
      append(&f, 4);
    } else {
      append(&v, 8);
    }
  }
  void vec3(const Vec3& v) {
    real(v.x);
    real(v.y);
    real(v.z);
  }

  std::vector<uint8_t>& bytes() { return buf_; }
  const WireConfig& config() const { return config_; }

 private:
  void append(const void* p, size_t n) {
    const size_t off = buf_.size();
    buf_.resize(off + n);
    std::memcpy(buf_.data() + off, p, n);
  }

  WireConfig config_;
  std::vector<uint8_t> buf_;
};

class WireReader {
 public:
  WireReader(std::span<const uint8_t> data, WireConfig config) : data_(data), config_(config) {}

  uint8_t u8() { return take<uint8_t>(); }
  uint16_t u16() { return take<uint16_t>(); }
  uint32_t u32() { return take<uint32_t>(); }
  uint64_t u64() { return take<uint64_t>(); }
  double real() { return config_.reals_f32 ? double(take<float>()) : take<double>(); }
  Vec3 vec3() {
    Vec3 v;
    v.x = real();
    v.y = real();
    v.z = real();
    return v;
  }

  size_t remaining() const { return data_.size() - pos_; }
  size_t position() const { return pos_; }
  void expect_exhausted() const {
    if (pos_ != data_.size()) throw WireError("trailing bytes in frame", pos_);
  }

 private:
  template <typename T>
  T take() {
    if (pos_ + sizeof(T) > data_.size()) throw WireError("truncated frame", pos_);
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::span<const uint8_t> data_;
  WireConfig config_;
  size_t pos_ = 0;
};

// ---- messages ----

struct ScheduleEntry {
  uint16_t region_id = 0;
  double t_enter = 0.0;
  double t_exit = 0.0;
};

struct DispatchRay {
  uint64_t ray_id = 0;  // batch-local index
  Vec3 origin;
  Vec3 dir;
  Vec3 color_gt;
  uint32_t image_id = 0;
  std::vector<ScheduleEntry> schedule;  // ordered by t_enter
};

struct RayDispatchMsg {
  uint64_t batch_id = 0;
  std::vector<DispatchRay> rays;
};

struct PartialEntry {
  uint64_t ray_id = 0;
  uint16_t region_id = 0;
  Vec3 color;
  double transmittance = 1.0;
  // Optional distortion aggregates, present only when the cross-segment
  // correction is enabled (adds three scalars to the payload).
  double weight_sum = 0.0;
  double weight_moment = 0.0;
  double distortion_local = 0.0;
  // Expected-termination sum; carried by evaluation replies only.
  double depth_sum = 0.0;
};

struct PartialScatterMsg {
  uint64_t batch_id = 0;
  bool with_distortion = false;
  bool with_depth = false;
  std::vector<PartialEntry> entries;
  MessageTag tag = MessageTag::PartialScatter;  // PartialScatter or EvalReply
};

struct ControlSyncMsg {
  uint64_t batch_id = 0;
  uint64_t iteration = 0;
  double loss_rgb = 0.0;
  double loss_transmittance = 0.0;
  double loss_distortion = 0.0;
  uint64_t rays_owned = 0;  // rays whose first segment this worker owns
  uint64_t bytes_sent = 0;
  uint64_t merged_color_digest = 0;  // FNV over owned rays' merged colors
};

struct HelloMsg {
  uint64_t manifest_hash = 0;
  uint32_t sender = 0;
  uint8_t reals_f32 = 0;
};

struct EvalRequestMsg {
  uint64_t batch_id = 0;
  std::vector<double> appearance;  // evaluation appearance vector
  std::vector<DispatchRay> rays;   // color_gt unused
};

// EvalReply reuses the PartialScatter payload.

std::vector<uint8_t> encode_frame(MessageTag tag, uint64_t batch_id,
                                  std::span<const uint8_t> payload);

struct DecodedFrame {
  MessageTag tag;
  uint64_t batch_id = 0;
  std::vector<uint8_t> payload;
};

/// Splits a full frame back into tag/batch/payload; validates the length
/// prefix against the buffer.
DecodedFrame decode_frame(std::span<const uint8_t> frame);

std::vector<uint8_t> encode_ray_dispatch(const RayDispatchMsg& msg, WireConfig config);
RayDispatchMsg decode_ray_dispatch(const DecodedFrame& frame, WireConfig config);

std::vector<uint8_t> encode_partial_scatter(const PartialScatterMsg& msg, WireConfig config);
PartialScatterMsg decode_partial_scatter(const DecodedFrame& frame, WireConfig config);

std::vector<uint8_t> encode_control_sync(const ControlSyncMsg& msg, WireConfig config);
ControlSyncMsg decode_control_sync(const DecodedFrame& frame, WireConfig config);

std::vector<uint8_t> encode_hello(const HelloMsg& msg);
HelloMsg decode_hello(const DecodedFrame& frame);

std::vector<uint8_t> encode_eval_request(const EvalRequestMsg& msg, WireConfig config);
EvalRequestMsg decode_eval_request(const DecodedFrame& frame, WireConfig config);

/// Round-trips a partial through the wire encoding so every worker (including
/// the producer) merges the identical representation.
PartialEntry quantize_partial(const PartialEntry& entry, WireConfig config);

}  // namespace distgrid
