#include "distgrid/wire.hpp"

namespace distgrid {

std::vector<uint8_t> encode_frame(MessageTag tag, uint64_t batch_id,
                                  std::span<const uint8_t> payload) {
  std::vector<uint8_t> frame;
  const uint32_t length = uint32_t(1 + 8 + payload.size());
  frame.resize(4 + length);
  std::memcpy(frame.data(), &length, 4);
  frame[4] = uint8_t(tag);
  std::memcpy(frame.data() + 5, &batch_id, 8);
  std::memcpy(frame.data() + 13, payload.data(), payload.size());
  return frame;
}

DecodedFrame decode_frame(std::span<const uint8_t> frame) {
  if (frame.size() < 13) throw WireError("frame shorter than header", frame.size());
  uint32_t length;
  std::memcpy(&length, frame.data(), 4);
  if (size_t(length) + 4 != frame.size()) throw WireError("length prefix mismatch", 0);
  DecodedFrame out;
  out.tag = MessageTag(frame[4]);
  std::memcpy(&out.batch_id, frame.data() + 5, 8);
  out.payload.assign(frame.begin() + 13, frame.end());
  return out;
}

std::vector<uint8_t> encode_ray_dispatch(const RayDispatchMsg& msg, WireConfig config) {
  WireWriter w(config);
  w.u32(uint32_t(msg.rays.size()));
  for (const DispatchRay& ray : msg.rays) {
    w.u64(ray.ray_id);
    w.vec3(ray.origin);
    w.vec3(ray.dir);
    w.vec3(ray.color_gt);
    w.u32(ray.image_id);
    w.u16(uint16_t(ray.schedule.size()));
    for (const ScheduleEntry& e : ray.schedule) {
      w.u16(e.region_id);
      w.real(e.t_enter);
      w.real(e.t_exit);
    }
  }
  return encode_frame(MessageTag::RayDispatch, msg.batch_id, w.bytes());
}

RayDispatchMsg decode_ray_dispatch(const DecodedFrame& frame, WireConfig config) {
  WireReader r(frame.payload, config);
  RayDispatchMsg msg;
  msg.batch_id = frame.batch_id;
  const uint32_t n = r.u32();
  msg.rays.resize(n);
  for (DispatchRay& ray : msg.rays) {
    ray.ray_id = r.u64();
    ray.origin = r.vec3();
    ray.dir = r.vec3();
    ray.color_gt = r.vec3();
    ray.image_id = r.u32();
    const uint16_t k = r.u16();
    ray.schedule.resize(k);
    for (ScheduleEntry& e : ray.schedule) {
      e.region_id = r.u16();
      e.t_enter = r.real();
      e.t_exit = r.real();
    }
  }
  r.expect_exhausted();
  return msg;
}

std::vector<uint8_t> encode_partial_scatter(const PartialScatterMsg& msg, WireConfig config) {
  WireWriter w(config);
  const uint8_t flags = (msg.with_distortion ? 1 : 0) | (msg.with_depth ? 2 : 0);
  w.u8(flags);
  w.u32(uint32_t(msg.entries.size()));
  for (const PartialEntry& e : msg.entries) {
    w.u64(e.ray_id);
    w.u16(e.region_id);
    w.vec3(e.color);
    w.real(e.transmittance);
    if (msg.with_distortion) {
      w.real(e.weight_sum);
      w.real(e.weight_moment);
      w.real(e.distortion_local);
    }
    if (msg.with_depth) w.real(e.depth_sum);
  }
  return encode_frame(msg.tag, msg.batch_id, w.bytes());
}

PartialScatterMsg decode_partial_scatter(const DecodedFrame& frame, WireConfig config) {
  WireReader r(frame.payload, config);
  PartialScatterMsg msg;
  msg.tag = frame.tag;
  msg.batch_id = frame.batch_id;
  const uint8_t flags = r.u8();
  msg.with_distortion = (flags & 1) != 0;
  msg.with_depth = (flags & 2) != 0;
  const uint32_t n = r.u32();
  msg.entries.resize(n);
  for (PartialEntry& e : msg.entries) {
    e.ray_id = r.u64();
    e.region_id = r.u16();
    e.color = r.vec3();
    e.transmittance = r.real();
    if (msg.with_distortion) {
      e.weight_sum = r.real();
      e.weight_moment = r.real();
      e.distortion_local = r.real();
    }
    if (msg.with_depth) e.depth_sum = r.real();
  }
  r.expect_exhausted();
  return msg;
}

std::vector<uint8_t> encode_control_sync(const ControlSyncMsg& msg, WireConfig config) {
  WireWriter w(config);
  w.u64(msg.iteration);
  w.real(msg.loss_rgb);
  w.real(msg.loss_transmittance);
  w.real(msg.loss_distortion);
  w.u64(msg.rays_owned);
  w.u64(msg.bytes_sent);
  w.u64(msg.merged_color_digest);
  return encode_frame(MessageTag::ControlSync, msg.batch_id, w.bytes());
}

ControlSyncMsg decode_control_sync(const DecodedFrame& frame, WireConfig config) {
  WireReader r(frame.payload, config);
  ControlSyncMsg msg;
  msg.batch_id = frame.batch_id;
  msg.iteration = r.u64();
  msg.loss_rgb = r.real();
  msg.loss_transmittance = r.real();
  msg.loss_distortion = r.real();
  msg.rays_owned = r.u64();
  msg.bytes_sent = r.u64();
  msg.merged_color_digest = r.u64();
  r.expect_exhausted();
  return msg;
}

std::vector<uint8_t> encode_hello(const HelloMsg& msg) {
  WireWriter w(WireConfig{});
  w.u64(msg.manifest_hash);
  w.u32(msg.sender);
  w.u8(msg.reals_f32);
  return encode_frame(MessageTag::Hello, 0, w.bytes());
}

HelloMsg decode_hello(const DecodedFrame& frame) {
  WireReader r(frame.payload, WireConfig{});
  HelloMsg msg;
  msg.manifest_hash = r.u64();
  msg.sender = r.u32();
  msg.reals_f32 = r.u8();
  r.expect_exhausted();
  return msg;
}

std::vector<uint8_t> encode_eval_request(const EvalRequestMsg& msg, WireConfig config) {
  WireWriter w(config);
  w.u32(uint32_t(msg.appearance.size()));
  for (double v : msg.appearance) w.real(v);
  w.u32(uint32_t(msg.rays.size()));
  for (const DispatchRay& ray : msg.rays) {
    w.u64(ray.ray_id);
    w.vec3(ray.origin);
    w.vec3(ray.dir);
    w.u16(uint16_t(ray.schedule.size()));
    for (const ScheduleEntry& e : ray.schedule) {
      w.u16(e.region_id);
      w.real(e.t_enter);
      w.real(e.t_exit);
    }
  }
  return encode_frame(MessageTag::EvalRequest, msg.batch_id, w.bytes());
}

EvalRequestMsg decode_eval_request(const DecodedFrame& frame, WireConfig config) {
  WireReader r(frame.payload, config);
  EvalRequestMsg msg;
  msg.batch_id = frame.batch_id;
  const uint32_t dim = r.u32();
  msg.appearance.resize(dim);
  for (double& v : msg.appearance) v = r.real();
  const uint32_t n = r.u32();
  msg.rays.resize(n);
  for (DispatchRay& ray : msg.rays) {
    ray.ray_id = r.u64();
    ray.origin = r.vec3();
    ray.dir = r.vec3();
    const uint16_t k = r.u16();
    ray.schedule.resize(k);
    for (ScheduleEntry& e : ray.schedule) {
      e.region_id = r.u16();
      e.t_enter = r.real();
      e.t_exit = r.real();
    }
  }
  r.expect_exhausted();
  return msg;
}

PartialEntry quantize_partial(const PartialEntry& entry, WireConfig config) {
  if (!config.reals_f32) return entry;
  PartialEntry q = entry;
  q.color = {double(float(entry.color.x)), double(float(entry.color.y)),
             double(float(entry.color.z))};
  q.transmittance = double(float(entry.transmittance));
  q.weight_sum = double(float(entry.weight_sum));
  q.weight_moment = double(float(entry.weight_moment));
  q.distortion_local = double(float(entry.distortion_local));
  return q;
}

}  // namespace distgrid
