#pragma once

// Modbus/TCP sessions carried over the emulated fabric.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>

#include "otbed/fabric.hpp"
#include "otbed/modbus.hpp"

namespace otbed::link {

// Returns the response PDU, or nullopt to drop the connection.
using RequestHandler =
    std::function<std::optional<modbus::Pdu>(fabric::ConnId, fabric::Ipv4 peer, const modbus::Frame& request)>;

class Host;

class ClientSession {
 public:
  ClientSession(Host& host, fabric::Ipv4 server, std::uint16_t port, std::uint8_t unit);

  [[nodiscard]] bool connected() const;
  bool connect();
  void drop();
  // Sends one request and flushes the fabric. nullopt when nothing decodable
  // came back (lost, livelocked, malformed, or not connected).
  std::optional<modbus::Pdu> transact(const modbus::Pdu& request);

  [[nodiscard]] fabric::Ipv4 server() const { return server_; }
  [[nodiscard]] std::optional<fabric::ConnId> conn() const { return conn_; }
  [[nodiscard]] std::uint16_t next_transaction() const { return txn_.peek(); }
  [[nodiscard]] fabric::ConnectResult::Status last_connect() const { return last_connect_; }

 private:
  friend class Host;
  void deliver(std::span<const std::uint8_t> bytes);

  Host& host_;
  fabric::Ipv4 server_;
  std::uint16_t port_;
  std::uint8_t unit_;
  std::optional<fabric::ConnId> conn_;
  modbus::TransactionCounter txn_;
  modbus::Bytes rx_;
  std::optional<modbus::Frame> pending_;
  std::uint16_t expect_ = 0;
  fabric::ConnectResult::Status last_connect_ = fabric::ConnectResult::Status::timeout;
};

// Owns the fabric data handler of one node. Not movable: the handler
// captures this.
class Host {
 public:
  Host(fabric::Fabric& fab, fabric::NodeId node);
  Host(const Host&) = delete;
  Host& operator=(const Host&) = delete;

  void serve(std::uint16_t port, RequestHandler handler);
  ClientSession& open(fabric::Ipv4 server, std::uint16_t port, std::uint8_t unit);

  [[nodiscard]] fabric::Fabric& fabric() { return fab_; }
  [[nodiscard]] fabric::NodeId node() const { return node_; }
  [[nodiscard]] std::uint64_t dropped_malformed() const { return dropped_malformed_; }

 private:
  friend class ClientSession;
  void on_data(fabric::ConnId conn, fabric::Side receiver, std::span<const std::uint8_t> bytes);

  fabric::Fabric& fab_;
  fabric::NodeId node_;
  std::map<std::uint16_t, RequestHandler> servers_;
  std::map<fabric::ConnId, modbus::Bytes> server_rx_;
  std::vector<std::unique_ptr<ClientSession>> sessions_;
  std::map<fabric::ConnId, ClientSession*> by_conn_;
  std::uint64_t dropped_malformed_ = 0;
};

}  // namespace otbed::link
