#include "otbed/link.hpp"

namespace otbed::link {

using fabric::ConnId;
using fabric::Side;

ClientSession::ClientSession(Host& host, fabric::Ipv4 server, std::uint16_t port, std::uint8_t unit)
    : host_(host), server_(server), port_(port), unit_(unit) {}

bool ClientSession::connected() const {
  return conn_ && host_.fab_.connection(*conn_).client_state == fabric::ConnState::established;
}

bool ClientSession::connect() {
  if (connected()) return true;
  if (conn_) host_.by_conn_.erase(*conn_);
  conn_.reset();
  rx_.clear();
  const auto r = host_.fab_.tcp_connect(host_.node_, server_, port_);
  last_connect_ = r.status;
  if (!r.ok()) return false;
  conn_ = r.conn;
  host_.by_conn_[r.conn] = this;
  return true;
}

void ClientSession::drop() {
  if (!conn_) return;
  host_.fab_.reset(*conn_, Side::client);
  host_.by_conn_.erase(*conn_);
  conn_.reset();
  rx_.clear();
}

std::optional<modbus::Pdu> ClientSession::transact(const modbus::Pdu& request) {
  if (!connected()) return std::nullopt;
  expect_ = txn_.next();
  pending_.reset();
  auto bytes = modbus::encode_frame(modbus::make_frame(expect_, unit_, request));
  host_.fab_.send(*conn_, Side::client, std::move(bytes));
  host_.fab_.flush();
  if (!pending_) return std::nullopt;
  auto pdu = std::move(pending_->pdu);
  pending_.reset();
  return pdu;
}

void ClientSession::deliver(std::span<const std::uint8_t> bytes) {
  rx_.insert(rx_.end(), bytes.begin(), bytes.end());
  for (;;) {
    auto r = modbus::decode_frame(rx_, modbus::Direction::response);
    if (std::holds_alternative<modbus::Incomplete>(r)) return;
    if (std::holds_alternative<modbus::Invalid>(r)) {
      ++host_.dropped_malformed_;
      drop();
      return;
    }
    auto& d = std::get<modbus::Decoded>(r);
    rx_.erase(rx_.begin(), rx_.begin() + static_cast<std::ptrdiff_t>(d.consumed));
    if (d.frame.header.transaction_id == expect_) pending_ = std::move(d.frame);
  }
}

Host::Host(fabric::Fabric& fab, fabric::NodeId node) : fab_(fab), node_(node) {
  fab_.on_data(node_, [this](ConnId c, Side s, std::span<const std::uint8_t> b) { on_data(c, s, b); });
}

void Host::serve(std::uint16_t port, RequestHandler handler) {
  fab_.listen(node_, port);
  servers_[port] = std::move(handler);
}

ClientSession& Host::open(fabric::Ipv4 server, std::uint16_t port, std::uint8_t unit) {
  sessions_.push_back(std::make_unique<ClientSession>(*this, server, port, unit));
  return *sessions_.back();
}

void Host::on_data(ConnId conn, Side receiver, std::span<const std::uint8_t> bytes) {
  if (receiver == Side::client) {
    if (auto it = by_conn_.find(conn); it != by_conn_.end()) it->second->deliver(bytes);
    return;
  }
  const auto c = fab_.connection(conn);
  auto handler = servers_.find(c.server_port);
  if (handler == servers_.end()) return;
  auto& rx = server_rx_[conn];
  rx.insert(rx.end(), bytes.begin(), bytes.end());
  for (;;) {
    auto r = modbus::decode_frame(rx, modbus::Direction::request);
    if (std::holds_alternative<modbus::Incomplete>(r)) return;
    if (std::holds_alternative<modbus::Invalid>(r)) {
      ++dropped_malformed_;
      server_rx_.erase(conn);
      fab_.reset(conn, Side::server);
      return;
    }
    auto& d = std::get<modbus::Decoded>(r);
    rx.erase(rx.begin(), rx.begin() + static_cast<std::ptrdiff_t>(d.consumed));
    auto response = handler->second(conn, c.client_ip, d.frame);
    if (!response) {
      server_rx_.erase(conn);
      fab_.reset(conn, Side::server);
      return;
    }
    fab_.send(conn, Side::server,
              modbus::encode_frame(modbus::make_frame(d.frame.header.transaction_id, d.frame.header.unit_id,
                                                      std::move(*response))));
  }
}

}  // namespace otbed::link
