#include "sstage/net.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>

#include <spdlog/spdlog.h>

namespace sstage::net {

namespace {

[[noreturn]] void sys_fail(ErrorCode code, const std::string& what) {
  throw Error(code, what + ": " + std::strerror(errno));
}

sockaddr_in make_addr(const std::string& host, std::uint16_t port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (host.empty() || host == "*") {
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
  } else if (inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    addrinfo* res = nullptr;
    if (getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || !res) {
      throw Error(ErrorCode::IoError, "cannot resolve host '" + host + "'");
    }
    addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
    freeaddrinfo(res);
  }
  return addr;
}

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

}  // namespace

std::string Endpoint::token() const { return host + ":" + std::to_string(port); }

Endpoint Endpoint::parse(std::string_view token) {
  const auto colon = token.rfind(':');
  if (colon == std::string_view::npos || colon == 0) {
    throw Error(ErrorCode::ParseError, "bad endpoint '" + std::string(token) + "'");
  }
  Endpoint ep;
  ep.host = std::string(token.substr(0, colon));
  const auto port = std::string(token.substr(colon + 1));
  char* end = nullptr;
  const long v = std::strtol(port.c_str(), &end, 10);
  if (port.empty() || *end != '\0' || v < 0 || v > 65535) {
    throw Error(ErrorCode::ParseError, "bad port in endpoint '" + std::string(token) + "'");
  }
  ep.port = static_cast<std::uint16_t>(v);
  return ep;
}

Socket& Socket::operator=(Socket&& o) noexcept {
  if (this != &o) {
    close();
    fd_ = o.fd_;
    o.fd_ = -1;
  }
  return *this;
}

void Socket::send_all(std::span<const std::byte> data) {
  while (!data.empty()) {
    const auto n = ::send(fd_, data.data(), data.size(), MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      sys_fail(ErrorCode::ConnectionLost, "send");
    }
    data = data.subspan(static_cast<std::size_t>(n));
  }
}

void Socket::recv_all(std::span<std::byte> data) {
  while (!data.empty()) {
    const auto n = ::recv(fd_, data.data(), data.size(), 0);
    if (n == 0) throw Error(ErrorCode::ConnectionLost, "peer closed the connection");
    if (n < 0) {
      if (errno == EINTR) continue;
      sys_fail(ErrorCode::ConnectionLost, "recv");
    }
    data = data.subspan(static_cast<std::size_t>(n));
  }
}

void Socket::shutdown() {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

void Socket::close() {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

Listener::Listener(const std::string& host, std::uint16_t port) {
  sock_ = Socket(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!sock_.valid()) sys_fail(ErrorCode::IoError, "socket");
  int one = 1;
  ::setsockopt(sock_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  auto addr = make_addr(host, port);
  if (::bind(sock_.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    sys_fail(ErrorCode::IoError, "bind " + host + ":" + std::to_string(port));
  }
  if (::listen(sock_.fd(), 128) != 0) sys_fail(ErrorCode::IoError, "listen");
  socklen_t len = sizeof addr;
  ::getsockname(sock_.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
  endpoint_.host = (host.empty() || host == "*" || host == "0.0.0.0") ? "127.0.0.1" : host;
  endpoint_.port = ntohs(addr.sin_port);
}

Socket Listener::accept() {
  while (true) {
    const int fd = ::accept4(sock_.fd(), nullptr, nullptr, SOCK_CLOEXEC);
    if (fd >= 0) {
      set_nodelay(fd);
      return Socket(fd);
    }
    if (errno == EINTR || errno == ECONNABORTED) continue;
    sys_fail(ErrorCode::ConnectionLost, "accept");
  }
}

void Listener::shutdown() { sock_.shutdown(); }

Socket connect(const Endpoint& ep, double timeout_secs) {
  const auto deadline =
      std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_secs);
  auto addr = make_addr(ep.host, ep.port);
  while (true) {
    Socket s(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
    if (!s.valid()) sys_fail(ErrorCode::IoError, "socket");
    if (::connect(s.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0) {
      set_nodelay(s.fd());
      return s;
    }
    const bool retry = errno == ECONNREFUSED || errno == EINTR || errno == EAGAIN;
    if (!retry || std::chrono::steady_clock::now() >= deadline) {
      sys_fail(ErrorCode::ConnectionLost, "connect " + ep.token());
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
}

Bytes encode_frame_header(std::uint16_t type, std::uint16_t flags, std::uint32_t payload_len) {
  Bytes h;
  h.reserve(kFrameHeaderSize);
  ByteWriter w(h);
  w.u32(payload_len);
  w.u16(type);
  w.u16(flags);
  return h;
}

void write_frame(Socket& s, std::uint16_t type, std::uint16_t flags,
                 std::span<const std::byte> payload) {
  if (payload.size() > kMaxFramePayload) {
    throw Error(ErrorCode::ProtocolError, "frame payload too large");
  }
  auto header = encode_frame_header(type, flags, static_cast<std::uint32_t>(payload.size()));
  if (payload.size() <= 64 * 1024) {
    header.insert(header.end(), payload.begin(), payload.end());
    s.send_all(header);
  } else {
    s.send_all(header);
    s.send_all(payload);
  }
}

Frame read_frame(Socket& s) {
  std::byte header[kFrameHeaderSize];
  s.recv_all(header);
  ByteReader r(header);
  const auto len = r.u32();
  Frame f;
  f.type = r.u16();
  f.flags = r.u16();
  if (len > kMaxFramePayload) throw Error(ErrorCode::ProtocolError, "oversized frame");
  f.payload.resize(len);
  s.recv_all(f.payload);
  return f;
}

Connection::Connection(Socket sock, FrameHandler on_frame, CloseHandler on_close)
    : sock_(std::move(sock)), on_frame_(std::move(on_frame)), on_close_(std::move(on_close)) {}

std::shared_ptr<Connection> Connection::start(Socket sock, FrameHandler on_frame,
                                              CloseHandler on_close) {
  std::shared_ptr<Connection> c(
      new Connection(std::move(sock), std::move(on_frame), std::move(on_close)));
  c->thread_ = std::thread([self = c] { self->run(); });
  return c;
}

Connection::~Connection() {
  sock_.shutdown();
  if (thread_.joinable()) {
    if (thread_.get_id() == std::this_thread::get_id()) {
      thread_.detach();
    } else {
      thread_.join();
    }
  }
}

void Connection::run() {
  auto keep_alive = shared_from_this();
  try {
    while (true) {
      auto f = read_frame(sock_);
      on_frame_(*this, std::move(f));
    }
  } catch (const Error& e) {
    if (e.code() != ErrorCode::ConnectionLost) {
      spdlog::warn("connection handler stopped: {}", e.what());
    }
  } catch (const std::exception& e) {
    spdlog::warn("connection handler stopped: {}", e.what());
  }
  open_ = false;
  sock_.shutdown();
  if (on_close_) on_close_(*this);
  // Drop the callbacks so captured state does not outlive the owner's close().
  on_frame_ = nullptr;
  on_close_ = nullptr;
}

void Connection::send(std::uint16_t type, std::uint16_t flags,
                      std::span<const std::byte> payload) {
  std::lock_guard lk(send_mu_);
  if (!open_) throw Error(ErrorCode::ConnectionLost, "send on closed connection");
  try {
    write_frame(sock_, type, flags, payload);
  } catch (const Error&) {
    open_ = false;
    sock_.shutdown();
    throw;
  }
}

void Connection::close() {
  open_ = false;
  sock_.shutdown();
  if (thread_.joinable() && thread_.get_id() != std::this_thread::get_id()) thread_.join();
}

Server::Server(Connection::FrameHandler on_frame, Connection::CloseHandler on_close,
               const std::string& host)
    : listener_(host), on_frame_(std::move(on_frame)), on_close_(std::move(on_close)) {
  accept_thread_ = std::thread([this] {
    while (true) {
      Socket s;
      try {
        s = listener_.accept();
      } catch (const Error&) {
        return;
      }
      std::lock_guard lk(mu_);
      if (stopped_) return;
      conns_.push_back(Connection::start(std::move(s), on_frame_, on_close_));
    }
  });
}

Server::~Server() { stop(); }

void Server::stop() {
  std::vector<std::shared_ptr<Connection>> conns;
  {
    std::lock_guard lk(mu_);
    if (stopped_) return;
    stopped_ = true;
    conns.swap(conns_);
  }
  listener_.shutdown();
  if (accept_thread_.joinable()) accept_thread_.join();
  for (auto& c : conns) c->close();
}

}  // namespace sstage::net
