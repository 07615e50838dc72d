#pragma once

// Real-socket counterparts of the forgery and recon attacks, and a real-socket
// front for the bridge. Demo-only: nothing here is mirrored or captured.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "otbed/attacks.hpp"
#include "otbed/bridge.hpp"

namespace otbed::interop {

struct Endpoint {
  std::string host;
  std::uint16_t port = 502;
};

// "host" or "host:port". Throws std::invalid_argument.
[[nodiscard]] Endpoint parse_endpoint(const std::string& s, std::uint16_t default_port = 502);

// One connection, one write frame (transaction 0), one response.
[[nodiscard]] attacks::ForgeResult forge_write(const Endpoint& target, const attacks::CoilForgery& spec,
                                               std::chrono::milliseconds timeout = std::chrono::milliseconds(2000));

// TCP connect scan of every host address in network/prefix (network and
// broadcast addresses skipped below /31), ascending.
[[nodiscard]] std::vector<attacks::ReconEntry> connect_scan(fabric::Ipv4 network, int prefix, std::uint16_t port,
                                                            std::chrono::milliseconds timeout = std::chrono::milliseconds(500));

// Modbus/TCP server on a real socket, routing through a Bridge. Single
// threaded; malformed frames drop the connection.
class BridgeServer {
 public:
  // port 0 picks a free one. Throws std::runtime_error when binding fails.
  BridgeServer(bridge::Bridge& bridge, const std::string& host, std::uint16_t port);
  ~BridgeServer();
  BridgeServer(const BridgeServer&) = delete;
  BridgeServer& operator=(const BridgeServer&) = delete;

  [[nodiscard]] std::uint16_t port() const { return port_; }
  // Serves until stop becomes true (checked every 50 ms).
  void serve(const std::atomic<bool>& stop);
  [[nodiscard]] std::uint64_t requests() const { return requests_; }

 private:
  bridge::Bridge& bridge_;
  int listener_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<std::uint64_t> requests_{0};
};

}  // namespace otbed::interop
