#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "distgrid/wire.hpp"

namespace distgrid {

class TransportTimeout : public std::runtime_error {
 public:
  TransportTimeout(uint32_t peer, const std::string& what)
      : std::runtime_error(what), peer_(peer) {}
  uint32_t peer() const { return peer_; }

 private:
  uint32_t peer_;
};

/// Reliable, order-preserving duplex channel per endpoint pair. Each endpoint
/// is owned by one logical thread of control; delivery never reorders frames
/// within a pair.
class Transport {
 public:
  virtual ~Transport() = default;

  virtual uint32_t self() const = 0;
  virtual uint32_t world_size() const = 0;

  virtual void send(uint32_t to, std::vector<uint8_t> frame) = 0;
  virtual std::vector<uint8_t> recv(uint32_t from, std::chrono::milliseconds timeout) = 0;

  uint64_t bytes_sent() const { return bytes_sent_.load(std::memory_order_relaxed); }
  uint64_t bytes_received() const { return bytes_received_.load(std::memory_order_relaxed); }
  uint64_t scatter_payload_bytes() const {
    return scatter_payload_bytes_.load(std::memory_order_relaxed);
  }
  uint64_t scatter_entries() const { return scatter_entries_.load(std::memory_order_relaxed); }

  /// Called by senders of PartialScatter frames so the bandwidth bound is
  /// observable per (ray, direction).
  void note_scatter(uint64_t payload_bytes, uint64_t entries) {
    scatter_payload_bytes_.fetch_add(payload_bytes, std::memory_order_relaxed);
    scatter_entries_.fetch_add(entries, std::memory_order_relaxed);
  }

 protected:
  std::atomic<uint64_t> bytes_sent_{0};
  std::atomic<uint64_t> bytes_received_{0};
  std::atomic<uint64_t> scatter_payload_bytes_{0};
  std::atomic<uint64_t> scatter_entries_{0};
};

/// All endpoints in one process: a mutex/condvar frame queue per ordered
/// pair. Frames still pass through the wire encode, so the semantics match
/// TCP byte for byte.
class LocalTransportGroup {
 public:
  explicit LocalTransportGroup(uint32_t world_size);

  std::unique_ptr<Transport> endpoint(uint32_t id);

  struct Mailbox {
    std::mutex mutex;
    std::condition_variable cv;
    std::deque<std::vector<uint8_t>> frames;
  };

  Mailbox& mailbox(uint32_t from, uint32_t to) {
    return *mailboxes_[size_t(from) * world_size_ + to];
  }

 private:
  uint32_t world_size_;
  std::vector<std::unique_ptr<Mailbox>> mailboxes_;  // [from * world + to]
};

/// Full-mesh loopback TCP with length-prefixed frames. Construction performs
/// the rendezvous: every endpoint exchanges a hello carrying the manifest
/// hash and real width and aborts on any mismatch.
class TcpTransportGroup {
 public:
  /// Endpoint `id` listens on base_port + id. All endpoints must be
  /// constructed concurrently (each connects to lower ids and accepts from
  /// higher ids).
  static std::unique_ptr<Transport> connect(uint32_t id, uint32_t world_size, uint16_t base_port,
                                            uint64_t manifest_hash, WireConfig wire,
                                            std::chrono::milliseconds timeout);
};

}  // namespace distgrid
