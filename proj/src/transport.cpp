#include "distgrid/transport.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <unordered_map>
#include <stdexcept>

namespace distgrid {

namespace {

class LocalTransport : public Transport {
 public:
  LocalTransport(LocalTransportGroup* group, uint32_t id, uint32_t world)
      : group_(group), id_(id), world_(world) {}

  uint32_t self() const override { return id_; }
  uint32_t world_size() const override { return world_; }

  void send(uint32_t to, std::vector<uint8_t> frame) override {
    if (to >= world_) throw std::invalid_argument("transport: peer id out of range");
    bytes_sent_.fetch_add(frame.size(), std::memory_order_relaxed);
    auto& box = group_->mailbox(id_, to);
    {
      std::lock_guard lock(box.mutex);
      box.frames.push_back(std::move(frame));
    }
    box.cv.notify_one();
  }

  std::vector<uint8_t> recv(uint32_t from, std::chrono::milliseconds timeout) override {
    if (from >= world_) throw std::invalid_argument("transport: peer id out of range");
    auto& box = group_->mailbox(from, id_);
    std::unique_lock lock(box.mutex);
    if (!box.cv.wait_for(lock, timeout, [&] { return !box.frames.empty(); }))
      throw TransportTimeout(from, "transport: timeout waiting for frame from endpoint " +
                                       std::to_string(from));
    std::vector<uint8_t> frame = std::move(box.frames.front());
    box.frames.pop_front();
    bytes_received_.fetch_add(frame.size(), std::memory_order_relaxed);
    return frame;
  }

 private:
  LocalTransportGroup* group_;
  uint32_t id_;
  uint32_t world_;
};

}  // namespace

LocalTransportGroup::LocalTransportGroup(uint32_t world_size) : world_size_(world_size) {
  mailboxes_.resize(size_t(world_size) * world_size);
  for (auto& box : mailboxes_) box = std::make_unique<Mailbox>();
}

std::unique_ptr<Transport> LocalTransportGroup::endpoint(uint32_t id) {
  if (id >= world_size_) throw std::invalid_argument("transport: endpoint id out of range");
  return std::make_unique<LocalTransport>(this, id, world_size_);
}

// ---- TCP ----

namespace {

void set_nodelay(int fd) {
  int one = 1;
  setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

class TcpTransport : public Transport {
 public:
  TcpTransport(uint32_t id, uint32_t world) : id_(id), world_(world), sockets_(world, -1) {
    inboxes_.resize(world);
  }

  ~TcpTransport() override {
    for (int fd : sockets_)
      if (fd >= 0) ::close(fd);
  }

  uint32_t self() const override { return id_; }
  uint32_t world_size() const override { return world_; }

  void set_socket(uint32_t peer, int fd) { sockets_[peer] = fd; }
  int socket_for(uint32_t peer) const { return sockets_[peer]; }

  void send(uint32_t to, std::vector<uint8_t> frame) override {
    const int fd = sockets_.at(to);
    if (fd < 0) throw std::runtime_error("transport: no connection to endpoint " + std::to_string(to));
    bytes_sent_.fetch_add(frame.size(), std::memory_order_relaxed);
    size_t off = 0;
    while (off < frame.size()) {
      const ssize_t n = ::send(fd, frame.data() + off, frame.size() - off, MSG_NOSIGNAL);
      if (n > 0) {
        off += size_t(n);
        continue;
      }
      if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) {
        // Drain incoming frames while the send buffer is full; both sides may
        // be mid-scatter and neither may stall the other.
        drain_readable(std::chrono::milliseconds(100));
        continue;
      }
      throw std::runtime_error("transport: send to endpoint " + std::to_string(to) +
                               " failed: " + std::strerror(errno));
    }
  }

  std::vector<uint8_t> recv(uint32_t from, std::chrono::milliseconds timeout) override {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (true) {
      if (!inboxes_[from].empty()) {
        std::vector<uint8_t> frame = std::move(inboxes_[from].front());
        inboxes_[from].pop_front();
        bytes_received_.fetch_add(frame.size(), std::memory_order_relaxed);
        return frame;
      }
      const auto now = std::chrono::steady_clock::now();
      if (now >= deadline)
        throw TransportTimeout(from, "transport: timeout waiting for frame from endpoint " +
                                         std::to_string(from));
      drain_readable(std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now));
    }
  }

 private:
  /// Polls every peer socket once and appends complete frames to the inboxes.
  void drain_readable(std::chrono::milliseconds wait) {
    std::vector<pollfd> fds;
    std::vector<uint32_t> peers;
    for (uint32_t p = 0; p < world_; ++p) {
      if (sockets_[p] < 0) continue;
      fds.push_back({sockets_[p], POLLIN | POLLOUT, 0});
      peers.push_back(p);
    }
    const int rc = ::poll(fds.data(), nfds_t(fds.size()), int(wait.count()));
    if (rc < 0) throw std::runtime_error(std::string("transport: poll failed: ") + std::strerror(errno));
    for (size_t i = 0; i < fds.size(); ++i) {
      if (!(fds[i].revents & POLLIN)) continue;
      read_available(peers[i]);
    }
  }

  void read_available(uint32_t peer) {
    const int fd = sockets_[peer];
    std::vector<uint8_t>& pending = pending_bytes_[peer];
    uint8_t buf[65536];
    while (true) {
      const ssize_t n = ::recv(fd, buf, sizeof buf, 0);
      if (n > 0) {
        pending.insert(pending.end(), buf, buf + n);
        continue;
      }
      if (n == 0) throw std::runtime_error("transport: endpoint " + std::to_string(peer) +
                                           " closed the connection");
      if (errno == EAGAIN || errno == EWOULDBLOCK) break;
      throw std::runtime_error("transport: recv failed: " + std::string(std::strerror(errno)));
    }
    // Slice complete frames off the front.
    size_t off = 0;
    while (pending.size() - off >= 4) {
      uint32_t length;
      std::memcpy(&length, pending.data() + off, 4);
      if (length < 9) throw WireError("frame length below header size", off);
      if (pending.size() - off < 4 + size_t(length)) break;
      inboxes_[peer].emplace_back(pending.begin() + long(off), pending.begin() + long(off + 4 + length));
      off += 4 + size_t(length);
    }
    pending.erase(pending.begin(), pending.begin() + long(off));
  }

  uint32_t id_;
  uint32_t world_;
  std::vector<int> sockets_;
  std::vector<std::deque<std::vector<uint8_t>>> inboxes_;
  std::unordered_map<uint32_t, std::vector<uint8_t>> pending_bytes_;
};

int listen_on(uint16_t port) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw std::runtime_error("transport: socket() failed");
  int one = 1;
  setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    ::close(fd);
    throw std::runtime_error("transport: bind to port " + std::to_string(port) +
                             " failed: " + std::strerror(errno));
  }
  if (::listen(fd, 64) != 0) {
    ::close(fd);
    throw std::runtime_error("transport: listen failed");
  }
  return fd;
}

int connect_to(uint16_t port, std::chrono::milliseconds timeout) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  while (true) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw std::runtime_error("transport: socket() failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0) return fd;
    ::close(fd);
    if (std::chrono::steady_clock::now() >= deadline)
      throw std::runtime_error("transport: connect to port " + std::to_string(port) + " timed out");
    ::usleep(5000);  // peer's listener may not be up yet
  }
}

std::vector<uint8_t> read_one_frame_blocking(int fd) {
  auto read_exact = [&](uint8_t* dst, size_t n) {
    size_t off = 0;
    while (off < n) {
      const ssize_t r = ::recv(fd, dst + off, n - off, 0);
      if (r <= 0) throw std::runtime_error("transport: connection lost during rendezvous");
      off += size_t(r);
    }
  };
  uint8_t header[4];
  read_exact(header, 4);
  uint32_t length;
  std::memcpy(&length, header, 4);
  std::vector<uint8_t> frame(4 + length);
  std::memcpy(frame.data(), header, 4);
  read_exact(frame.data() + 4, length);
  return frame;
}

void set_nonblocking(int fd) {
  const int flags = fcntl(fd, F_GETFL, 0);
  fcntl(fd, F_SETFL, flags | O_NONBLOCK);
}

}  // namespace

std::unique_ptr<Transport> TcpTransportGroup::connect(uint32_t id, uint32_t world_size,
                                                      uint16_t base_port, uint64_t manifest_hash,
                                                      WireConfig wire,
                                                      std::chrono::milliseconds timeout) {
  auto transport = std::make_unique<TcpTransport>(id, world_size);

  // Accept from higher ids, connect to lower ids. The hello frame names the
  // sender so accepted sockets can be assigned to the right peer.
  const int listener = id + 1 < world_size ? listen_on(uint16_t(base_port + id)) : -1;

  HelloMsg hello;
  hello.manifest_hash = manifest_hash;
  hello.sender = id;
  hello.reals_f32 = wire.reals_f32 ? 1 : 0;
  const std::vector<uint8_t> hello_frame = encode_hello(hello);

  auto check_peer_hello = [&](const std::vector<uint8_t>& frame) -> uint32_t {
    const DecodedFrame decoded = decode_frame(frame);
    if (decoded.tag != MessageTag::Hello)
      throw std::runtime_error("transport: rendezvous expected a hello frame");
    const HelloMsg peer = decode_hello(decoded);
    if (peer.manifest_hash != manifest_hash)
      throw std::runtime_error("transport: manifest hash mismatch with endpoint " +
                               std::to_string(peer.sender) + "; refusing to run");
    if ((peer.reals_f32 != 0) != wire.reals_f32)
      throw std::runtime_error("transport: precision mode mismatch with endpoint " +
                               std::to_string(peer.sender));
    return peer.sender;
  };

  for (uint32_t lower = 0; lower < id; ++lower) {
    const int fd = connect_to(uint16_t(base_port + lower), timeout);
    set_nodelay(fd);
    size_t off = 0;
    while (off < hello_frame.size()) {
      const ssize_t n = ::send(fd, hello_frame.data() + off, hello_frame.size() - off, MSG_NOSIGNAL);
      if (n <= 0) throw std::runtime_error("transport: hello send failed");
      off += size_t(n);
    }
    const uint32_t peer = check_peer_hello(read_one_frame_blocking(fd));
    if (peer != lower) throw std::runtime_error("transport: unexpected peer in rendezvous");
    set_nonblocking(fd);
    transport->set_socket(lower, fd);
  }

  for (uint32_t higher = id + 1; higher < world_size; ++higher) {
    const int fd = ::accept(listener, nullptr, nullptr);
    if (fd < 0) throw std::runtime_error("transport: accept failed");
    set_nodelay(fd);
    const uint32_t peer = check_peer_hello(read_one_frame_blocking(fd));
    size_t off = 0;
    while (off < hello_frame.size()) {
      const ssize_t n = ::send(fd, hello_frame.data() + off, hello_frame.size() - off, MSG_NOSIGNAL);
      if (n <= 0) throw std::runtime_error("transport: hello send failed");
      off += size_t(n);
    }
    set_nonblocking(fd);
    transport->set_socket(peer, fd);
  }
  if (listener >= 0) ::close(listener);
  return transport;
}

}  // namespace distgrid
