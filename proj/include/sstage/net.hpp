#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "sstage/bytes.hpp"

namespace sstage::net {

struct Endpoint {
  std::string host;
  std::uint16_t port = 0;

  /// "host:port"
  std::string token() const;
  static Endpoint parse(std::string_view token);

  friend bool operator==(const Endpoint&, const Endpoint&) = default;
};

/// Owning TCP socket descriptor.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  ~Socket() { close(); }
  Socket(Socket&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
  Socket& operator=(Socket&& o) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;

  bool valid() const { return fd_ >= 0; }
  int fd() const { return fd_; }

  void send_all(std::span<const std::byte> data);
  /// Throws ConnectionLost on EOF or error.
  void recv_all(std::span<std::byte> data);
  /// Unblocks any thread in recv/send on this socket without releasing the fd.
  void shutdown();
  void close();

 private:
  int fd_ = -1;
};

class Listener {
 public:
  explicit Listener(const std::string& host = "127.0.0.1", std::uint16_t port = 0);

  Endpoint endpoint() const { return endpoint_; }
  /// Blocks; throws ConnectionLost once shutdown() was called.
  Socket accept();
  void shutdown();

 private:
  Socket sock_;
  Endpoint endpoint_;
};

/// Connects, retrying refused connections until `timeout_secs` elapse.
Socket connect(const Endpoint& ep, double timeout_secs = 0);

/// Wire framing shared by control and data messages:
///   u32 payload length | u16 message type | u16 flags | payload   (little-endian)
inline constexpr std::size_t kFrameHeaderSize = 8;
inline constexpr std::uint32_t kMaxFramePayload = 1u << 31;

struct Frame {
  std::uint16_t type = 0;
  std::uint16_t flags = 0;
  Bytes payload;
};

Bytes encode_frame_header(std::uint16_t type, std::uint16_t flags, std::uint32_t payload_len);
void write_frame(Socket& s, std::uint16_t type, std::uint16_t flags,
                 std::span<const std::byte> payload);
Frame read_frame(Socket& s);

/// A socket plus a background thread that delivers every incoming frame to a
/// handler. Sends are serialized and may come from any thread.
class Connection : public std::enable_shared_from_this<Connection> {
 public:
  using FrameHandler = std::function<void(Connection&, Frame&&)>;
  using CloseHandler = std::function<void(Connection&)>;

  static std::shared_ptr<Connection> start(Socket sock, FrameHandler on_frame,
                                           CloseHandler on_close);
  ~Connection();

  void send(std::uint16_t type, std::uint16_t flags, std::span<const std::byte> payload);
  void send(std::uint16_t type, std::span<const std::byte> payload) { send(type, 0, payload); }
  bool is_open() const { return open_.load(); }
  /// Shuts the socket down and joins the handler thread (unless called from it).
  void close();

  /// Arbitrary per-connection tag set by the owner (e.g. peer identity).
  std::atomic<std::uint64_t> tag{~0ull};

 private:
  Connection(Socket sock, FrameHandler on_frame, CloseHandler on_close);
  void run();

  Socket sock_;
  FrameHandler on_frame_;
  CloseHandler on_close_;
  std::mutex send_mu_;
  std::atomic<bool> open_{true};
  std::thread thread_;
};

/// Listener + accept thread; each accepted socket becomes a Connection.
class Server {
 public:
  Server(Connection::FrameHandler on_frame, Connection::CloseHandler on_close,
         const std::string& host = "127.0.0.1");
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  Endpoint endpoint() const { return listener_.endpoint(); }
  void stop();

 private:
  Listener listener_;
  Connection::FrameHandler on_frame_;
  Connection::CloseHandler on_close_;
  std::mutex mu_;
  std::vector<std::shared_ptr<Connection>> conns_;
  bool stopped_ = false;
  std::thread accept_thread_;
};

}  // namespace sstage::net
