#include "otbed/interop.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <map>
#include <stdexcept>

namespace otbed::interop {

namespace {

using Clock = std::chrono::steady_clock;

struct Fd {
  int fd = -1;
  explicit Fd(int f = -1) : fd(f) {}
  Fd(Fd&& o) noexcept : fd(o.fd) { o.fd = -1; }
  Fd& operator=(Fd&& o) noexcept {
    std::swap(fd, o.fd);
    return *this;
  }
  ~Fd() {
    if (fd >= 0) ::close(fd);
  }
};

void nonblocking(int fd) { ::fcntl(fd, F_SETFL, ::fcntl(fd, F_GETFL, 0) | O_NONBLOCK); }

int remaining_ms(Clock::time_point deadline) {
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
  return ms < 0 ? 0 : static_cast<int>(ms);
}

sockaddr_in resolve(const Endpoint& ep) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(ep.host.c_str(), nullptr, &hints, &res) != 0 || !res)
    throw std::runtime_error("cannot resolve " + ep.host);
  sockaddr_in a = *reinterpret_cast<sockaddr_in*>(res->ai_addr);
  ::freeaddrinfo(res);
  a.sin_port = htons(ep.port);
  return a;
}

enum class Connect { ok, refused, timeout };

// Non-blocking connect bounded by the deadline.
Connect connect_to(Fd& s, const sockaddr_in& addr, Clock::time_point deadline) {
  s = Fd(::socket(AF_INET, SOCK_STREAM, 0));
  if (s.fd < 0) throw std::runtime_error(std::string("socket: ") + std::strerror(errno));
  nonblocking(s.fd);
  if (::connect(s.fd, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) == 0) return Connect::ok;
  if (errno == ECONNREFUSED) return Connect::refused;
  if (errno != EINPROGRESS) return Connect::timeout;
  pollfd p{s.fd, POLLOUT, 0};
  if (::poll(&p, 1, remaining_ms(deadline)) <= 0) return Connect::timeout;
  int err = 0;
  socklen_t len = sizeof err;
  ::getsockopt(s.fd, SOL_SOCKET, SO_ERROR, &err, &len);
  if (err == 0) return Connect::ok;
  return err == ECONNREFUSED ? Connect::refused : Connect::timeout;
}

bool send_all(int fd, const modbus::Bytes& b, Clock::time_point deadline) {
  std::size_t off = 0;
  while (off < b.size()) {
    const auto n = ::send(fd, b.data() + off, b.size() - off, MSG_NOSIGNAL);
    if (n > 0) {
      off += static_cast<std::size_t>(n);
      continue;
    }
    if (n < 0 && errno != EAGAIN && errno != EWOULDBLOCK) return false;
    pollfd p{fd, POLLOUT, 0};
    if (::poll(&p, 1, remaining_ms(deadline)) <= 0) return false;
  }
  return true;
}

}  // namespace

Endpoint parse_endpoint(const std::string& s, std::uint16_t default_port) {
  Endpoint ep;
  ep.port = default_port;
  const auto colon = s.rfind(':');
  ep.host = colon == std::string::npos ? s : s.substr(0, colon);
  if (colon != std::string::npos) {
    const auto p = s.substr(colon + 1);
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(p, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (p.empty() || used != p.size() || v == 0 || v > 65535) throw std::invalid_argument("bad port in " + s);
    ep.port = static_cast<std::uint16_t>(v);
  }
  if (ep.host.empty()) throw std::invalid_argument("missing host in " + s);
  return ep;
}

attacks::ForgeResult forge_write(const Endpoint& target, const attacks::CoilForgery& spec,
                                 std::chrono::milliseconds timeout) {
  using Status = attacks::ForgeResult::Status;
  const auto request = attacks::forgery_request(spec);
  const auto frame = modbus::encode_frame(modbus::make_frame(0, spec.unit, request));
  const auto deadline = Clock::now() + timeout;
  attacks::ForgeResult out;

  Fd s;
  switch (connect_to(s, resolve(target), deadline)) {
    case Connect::refused: out.status = Status::refused; return out;
    case Connect::timeout: out.status = Status::timeout; return out;
    case Connect::ok: break;
  }
  out.status = Status::timeout;
  if (!send_all(s.fd, frame, deadline)) return out;

  modbus::Bytes rx;
  for (;;) {
    const auto r = modbus::decode_frame(rx, modbus::Direction::response);
    if (const auto* d = std::get_if<modbus::Decoded>(&r)) {
      out.response = d->frame.pdu;
      out.status = std::holds_alternative<modbus::ExceptionResponse>(d->frame.pdu) ? Status::exception : Status::echoed;
      return out;
    }
    if (std::holds_alternative<modbus::Invalid>(r)) return out;
    pollfd p{s.fd, POLLIN, 0};
    if (::poll(&p, 1, remaining_ms(deadline)) <= 0) return out;
    std::uint8_t buf[512];
    const auto n = ::recv(s.fd, buf, sizeof buf, 0);
    if (n <= 0) return out;
    rx.insert(rx.end(), buf, buf + n);
  }
}

std::vector<attacks::ReconEntry> connect_scan(fabric::Ipv4 network, int prefix, std::uint16_t port,
                                              std::chrono::milliseconds timeout) {
  if (prefix < 16 || prefix > 32) throw std::invalid_argument("prefix must be 16..32");
  const std::uint32_t mask = prefix == 32 ? 0xFFFFFFFFu : ~((1u << (32 - prefix)) - 1);
  const std::uint32_t base = network & mask;
  const std::uint32_t size = prefix == 32 ? 1 : 1u << (32 - prefix);
  std::uint32_t first = 0, last = size - 1;
  if (prefix < 31) {
    first = 1;
    last = size - 2;
  }

  std::vector<attacks::ReconEntry> out;
  constexpr std::uint32_t batch = 256;
  for (std::uint32_t lo = first; lo <= last; lo += batch) {
    const std::uint32_t hi = std::min(last, lo + batch - 1);
    const auto deadline = Clock::now() + timeout;
    std::vector<Fd> socks;
    std::vector<pollfd> polls;
    std::vector<std::size_t> index;  // polls[i] belongs to out[index[i]]
    for (std::uint32_t h = lo; h <= hi; ++h) {
      attacks::ReconEntry e;
      e.address = base + h;
      out.push_back(e);
      sockaddr_in a{};
      a.sin_family = AF_INET;
      a.sin_port = htons(port);
      a.sin_addr.s_addr = htonl(e.address);
      Fd s(::socket(AF_INET, SOCK_STREAM, 0));
      if (s.fd < 0) throw std::runtime_error(std::string("socket: ") + std::strerror(errno));
      nonblocking(s.fd);
      if (::connect(s.fd, reinterpret_cast<const sockaddr*>(&a), sizeof a) == 0) {
        out.back().open = true;
      } else if (errno == EINPROGRESS) {
        polls.push_back({s.fd, POLLOUT, 0});
        index.push_back(out.size() - 1);
        socks.push_back(std::move(s));
      }
    }
    std::size_t pending = polls.size();
    while (pending > 0) {
      const int n = ::poll(polls.data(), polls.size(), remaining_ms(deadline));
      if (n <= 0) break;
      for (std::size_t i = 0; i < polls.size(); ++i) {
        if (polls[i].fd < 0 || polls[i].revents == 0) continue;
        int err = 0;
        socklen_t len = sizeof err;
        ::getsockopt(polls[i].fd, SOL_SOCKET, SO_ERROR, &err, &len);
        out[index[i]].open = err == 0;
        polls[i].fd = -1;  // poll ignores negative descriptors
        --pending;
      }
    }
  }
  return out;
}

BridgeServer::BridgeServer(bridge::Bridge& bridge, const std::string& host, std::uint16_t port) : bridge_(bridge) {
  listener_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listener_ < 0) throw std::runtime_error(std::string("socket: ") + std::strerror(errno));
  int one = 1;
  ::setsockopt(listener_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in a = resolve({host, port});
  if (::bind(listener_, reinterpret_cast<sockaddr*>(&a), sizeof a) != 0 || ::listen(listener_, 16) != 0) {
    const std::string why = std::strerror(errno);
    ::close(listener_);
    throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port) + ": " + why);
  }
  socklen_t len = sizeof a;
  ::getsockname(listener_, reinterpret_cast<sockaddr*>(&a), &len);
  port_ = ntohs(a.sin_port);
  nonblocking(listener_);
}

BridgeServer::~BridgeServer() {
  if (listener_ >= 0) ::close(listener_);
}

void BridgeServer::serve(const std::atomic<bool>& stop) {
  struct Client {
    Fd fd;
    fabric::Ipv4 peer = 0;
    modbus::Bytes rx;
  };
  std::map<int, Client> clients;
  while (!stop.load()) {
    std::vector<pollfd> polls{{listener_, POLLIN, 0}};
    for (const auto& [fd, c] : clients) polls.push_back({fd, POLLIN, 0});
    if (::poll(polls.data(), polls.size(), 50) <= 0) continue;

    if (polls[0].revents & POLLIN) {
      sockaddr_in a{};
      socklen_t len = sizeof a;
      const int fd = ::accept(listener_, reinterpret_cast<sockaddr*>(&a), &len);
      if (fd >= 0) {
        int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        clients[fd] = Client{Fd(fd), ntohl(a.sin_addr.s_addr), {}};
      }
    }
    for (std::size_t i = 1; i < polls.size(); ++i) {
      if (polls[i].revents == 0) continue;
      auto& c = clients.at(polls[i].fd);
      std::uint8_t buf[1024];
      const auto n = ::recv(c.fd.fd, buf, sizeof buf, 0);
      bool drop = n <= 0;
      if (!drop) c.rx.insert(c.rx.end(), buf, buf + n);
      while (!drop) {
        const auto r = modbus::decode_frame(c.rx, modbus::Direction::request);
        if (std::holds_alternative<modbus::Incomplete>(r)) break;
        const auto* d = std::get_if<modbus::Decoded>(&r);
        if (!d) {
          drop = true;
          break;
        }
        ++requests_;
        const auto resp = bridge_.route(c.peer, d->frame.pdu);
        const auto out = modbus::encode_frame(
            modbus::make_frame(d->frame.header.transaction_id, d->frame.header.unit_id, resp));
        c.rx.erase(c.rx.begin(), c.rx.begin() + static_cast<std::ptrdiff_t>(d->consumed));
        drop = !send_all(c.fd.fd, out, Clock::now() + std::chrono::seconds(2));
      }
      if (drop) clients.erase(polls[i].fd);
    }
  }
}

}  // namespace otbed::interop
