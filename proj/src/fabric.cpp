#include "otbed/fabric.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace otbed::fabric {
namespace {

void put16(Bytes& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v >> 8));
  b.push_back(static_cast<std::uint8_t>(v));
}
void put32(Bytes& b, std::uint32_t v) {
  put16(b, static_cast<std::uint16_t>(v >> 16));
  put16(b, static_cast<std::uint16_t>(v));
}
std::uint16_t get16(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint16_t>((b[at] << 8) | b[at + 1]);
}
std::uint32_t get32(std::span<const std::uint8_t> b, std::size_t at) {
  return (static_cast<std::uint32_t>(get16(b, at)) << 16) | get16(b, at + 2);
}

}  // namespace

Ipv4 parse_ip(const std::string& dotted) {
  std::istringstream in(dotted);
  Ipv4 ip = 0;
  for (int i = 0; i < 4; ++i) {
    int octet = -1;
    if (!(in >> octet) || octet < 0 || octet > 255) throw std::invalid_argument("bad IPv4 address: " + dotted);
    ip = (ip << 8) | static_cast<Ipv4>(octet);
    if (i < 3) {
      char dot = 0;
      if (!(in >> dot) || dot != '.') throw std::invalid_argument("bad IPv4 address: " + dotted);
    }
  }
  if (in >> std::ws; !in.eof()) throw std::invalid_argument("bad IPv4 address: " + dotted);
  return ip;
}

std::string format_ip(Ipv4 ip) {
  std::ostringstream out;
  out << (ip >> 24) << '.' << ((ip >> 16) & 0xFF) << '.' << ((ip >> 8) & 0xFF) << '.' << (ip & 0xFF);
  return out.str();
}

std::uint16_t ipv4_checksum(std::span<const std::uint8_t> header) {
  std::uint32_t sum = 0;
  for (std::size_t i = 0; i + 1 < header.size(); i += 2) sum += get16(header, i);
  if (header.size() % 2) sum += static_cast<std::uint32_t>(header.back()) << 8;
  while (sum >> 16) sum = (sum & 0xFFFF) + (sum >> 16);
  return static_cast<std::uint16_t>(~sum);
}

Bytes render(const Packet& p) {
  Bytes b;
  b.reserve(p.frame_size());
  b.insert(b.end(), p.dst_mac.begin(), p.dst_mac.end());
  b.insert(b.end(), p.src_mac.begin(), p.src_mac.end());
  put16(b, 0x0800);

  const std::size_t ip_start = b.size();
  b.push_back(0x45);
  b.push_back(0x00);
  put16(b, static_cast<std::uint16_t>(40 + p.payload.size()));
  put16(b, p.ip_id);
  put16(b, 0x4000);  // DF
  b.push_back(p.ttl);
  b.push_back(6);  // TCP
  put16(b, 0);
  put32(b, p.src_ip);
  put32(b, p.dst_ip);
  const auto csum = ipv4_checksum(std::span(b).subspan(ip_start, 20));
  b[ip_start + 10] = static_cast<std::uint8_t>(csum >> 8);
  b[ip_start + 11] = static_cast<std::uint8_t>(csum);

  put16(b, p.tcp.src_port);
  put16(b, p.tcp.dst_port);
  put32(b, p.tcp.seq);
  put32(b, p.tcp.ack);
  b.push_back(0x50);  // data offset 5 words
  b.push_back(p.tcp.flags);
  put16(b, p.tcp.window);
  put16(b, 0);  // checksum: not computed
  put16(b, 0);
  b.insert(b.end(), p.payload.begin(), p.payload.end());
  return b;
}

std::optional<Packet> parse_rendered(std::span<const std::uint8_t> f, Timestamp ts) {
  if (f.size() < header_bytes || get16(f, 12) != 0x0800) return std::nullopt;
  const auto ip = f.subspan(14);
  if (ip[0] != 0x45 || ip[9] != 6) return std::nullopt;
  const std::size_t total = get16(ip, 2);
  if (total < 40 || 14 + total > f.size()) return std::nullopt;
  const auto tcp = ip.subspan(20);
  if ((tcp[12] >> 4) != 5) return std::nullopt;

  Packet p;
  p.ts = ts;
  std::copy_n(f.begin(), 6, p.dst_mac.begin());
  std::copy_n(f.begin() + 6, 6, p.src_mac.begin());
  p.ip_id = get16(ip, 4);
  p.ttl = ip[8];
  p.src_ip = get32(ip, 12);
  p.dst_ip = get32(ip, 16);
  p.tcp.src_port = get16(tcp, 0);
  p.tcp.dst_port = get16(tcp, 2);
  p.tcp.seq = get32(tcp, 4);
  p.tcp.ack = get32(tcp, 8);
  p.tcp.flags = tcp[13];
  p.tcp.window = get16(tcp, 14);
  p.payload.assign(tcp.begin() + 20, tcp.begin() + static_cast<std::ptrdiff_t>(total - 20));
  return p;
}

Fabric::Fabric(FabricConfig cfg) : cfg_(cfg), rng_(static_cast<std::mt19937::result_type>(cfg.seed)) {}

NodeId Fabric::attach(NodeConfig cfg) {
  if (cfg.ip != 0 && node_for_ip(cfg.ip)) throw std::invalid_argument("duplicate IP " + format_ip(cfg.ip));
  Node n;
  const auto id = nodes_.size();
  n.mac = {0x02, 0x00, 0x00, 0x00, static_cast<std::uint8_t>((id + 1) >> 8),
           static_cast<std::uint8_t>(id + 1)};
  n.next_port = cfg.ephemeral_base;
  n.cfg = std::move(cfg);
  nodes_.push_back(std::move(n));
  return id;
}

void Fabric::detach(NodeId node) { nodes_.at(node).attached = false; }
void Fabric::reattach(NodeId node) { nodes_.at(node).attached = true; }

bool Fabric::attached(NodeId node) const { return node < nodes_.size() && nodes_[node].attached; }

std::optional<NodeId> Fabric::node_for_ip(Ipv4 ip) const {
  for (NodeId i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].cfg.ip == ip && ip != 0) return i;
  return std::nullopt;
}

const NodeConfig& Fabric::node_config(NodeId node) const { return nodes_.at(node).cfg; }
Mac Fabric::mac_of(NodeId node) const { return nodes_.at(node).mac; }

void Fabric::listen(NodeId node, std::uint16_t port) { nodes_.at(node).listeners[port]; }

bool Fabric::listening(NodeId node, std::uint16_t port) const {
  return nodes_.at(node).listeners.contains(port);
}

std::size_t Fabric::half_open(NodeId node, std::uint16_t port) const {
  const auto& ls = nodes_.at(node).listeners;
  auto it = ls.find(port);
  return it == ls.end() ? 0 : it->second.half_open.size();
}

void Fabric::on_data(NodeId node, DataHandler handler) { nodes_.at(node).handler = std::move(handler); }

std::size_t Fabric::budget(const Node& n) const { return n.cfg.rx_budget.value_or(cfg_.rx_budget); }

bool Fabric::overloaded(NodeId node) const {
  const auto& n = nodes_.at(node);
  return std::max(n.rx_prev_tick, n.rx_this_tick) > budget(n);
}

void Fabric::begin_tick(Tick tick) {
  tick_ = tick;
  seq_ = 0;
  for (auto& n : nodes_) {
    n.rx_prev_tick = n.rx_this_tick;
    n.rx_this_tick = 0;
    for (auto& [port, l] : n.listeners) {
      l.admitted_this_tick = 0;
      std::erase_if(l.half_open, [&](const auto& kv) { return kv.second.born + cfg_.syn_rcvd_timeout <= tick; });
    }
  }
}

Packet Fabric::make_packet(NodeId from, Ipv4 dst_ip, const TcpHeader& tcp, Bytes payload) {
  auto& n = nodes_.at(from);
  Packet p;
  p.src_mac = n.mac;
  p.src_ip = n.cfg.ip;
  p.dst_ip = dst_ip;
  p.ip_id = n.ip_id++;
  p.tcp = tcp;
  p.payload = std::move(payload);
  return p;
}

void Fabric::enqueue(Packet p, NodeId from, Provenance prov) {
  if (prov == Provenance::normal) {
    // ARP resolution, including a poisoned entry while interposed.
    const auto& ip = interposition_;
    const bool victim_pair = (p.src_ip == ip.victim_a && p.dst_ip == ip.victim_b) ||
                             (p.src_ip == ip.victim_b && p.dst_ip == ip.victim_a);
    if (ip.active && victim_pair && from != ip.attacker) {
      p.dst_mac = nodes_.at(ip.attacker).mac;
    } else if (auto dst = node_for_ip(p.dst_ip)) {
      p.dst_mac = nodes_[*dst].mac;
    } else {
      p.dst_mac = Mac{};
    }
  }
  queue_.push_back(Queued{std::move(p), from, prov});
}

void Fabric::send_control(NodeId from, Ipv4 dst, std::uint16_t sport, std::uint16_t dport, std::uint32_t seq,
                          std::uint32_t ack, std::uint8_t flags) {
  TcpHeader h{sport, dport, seq, ack, flags, nodes_.at(from).cfg.window};
  enqueue(make_packet(from, dst, h, {}), from);
}

bool Fabric::is_attacker_traffic(const Packet& p, NodeId from, Provenance prov) const {
  if (prov == Provenance::rewritten) return true;
  if (prov == Provenance::relay) return false;
  if (nodes_.at(from).cfg.attacker) return true;
  auto dst = node_for_ip(p.dst_ip);
  return dst && nodes_[*dst].cfg.attacker;
}

void Fabric::flush() {
  while (!queue_.empty()) {
    Queued q = std::move(queue_.front());
    queue_.pop_front();
    forward(std::move(q));
  }
}

void Fabric::forward(Queued q) {
  Packet& p = q.packet;
  std::optional<NodeId> dst;
  for (NodeId i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].attached && nodes_[i].mac == p.dst_mac) dst = i;
  if (!dst || !nodes_.at(q.from).attached) {
    ++counters_.dropped_unknown;
    return;
  }

  p.ts = Timestamp{tick_, seq_};
  seq_ += cfg_.latency_subticks;
  const bool label = is_attacker_traffic(p, q.from, q.provenance);
  ++counters_.forwarded;
  if (capture_enabled_) {
    capture_.packets.push_back(p);
    capture_.malicious.push_back(label ? 1 : 0);
  }
  if (mirror_) mirror_(p, label);

  auto& node = nodes_[*dst];
  ++node.rx_this_tick;

  const auto& ip = interposition_;
  if (ip.active && *dst == ip.attacker && p.dst_ip != node.cfg.ip) {
    FilterOutcome out = ip.filter ? ip.filter(p) : FilterOutcome{p, false};
    out.packet.src_mac = node.mac;
    auto real = node_for_ip(out.packet.dst_ip);
    out.packet.dst_mac = real ? nodes_[*real].mac : Mac{};
    ++counters_.relayed;
    if (out.rewritten) ++counters_.rewritten;
    queue_.push_back(Queued{std::move(out.packet), ip.attacker,
                            out.rewritten ? Provenance::rewritten : Provenance::relay});
    return;
  }
  host_receive(*dst, p);
}

void Fabric::host_receive(NodeId id, const Packet& p) {
  auto& node = nodes_[id];
  if (p.dst_ip != node.cfg.ip) {
    ++counters_.dropped_host;
    return;
  }
  const auto flags = p.tcp.flags;
  const ConnKey local{p.dst_ip, p.tcp.dst_port, p.src_ip, p.tcp.src_port};

  if (flags & tcp_flags::rst) {
    if (auto it = conn_index_.find(local); it != conn_index_.end()) {
      auto& c = conns_[it->second.first];
      c.client_state = ConnState::closed_rst;
      c.server_state = ConnState::closed_rst;
      conn_index_.erase(it);
    }
    if (auto l = node.listeners.find(p.tcp.dst_port); l != node.listeners.end())
      l->second.half_open.erase({p.src_ip, p.tcp.src_port});
    return;
  }

  if ((flags & tcp_flags::syn) && !(flags & tcp_flags::ack)) {
    auto l = node.listeners.find(p.tcp.dst_port);
    if (l == node.listeners.end()) {
      send_control(id, p.src_ip, p.tcp.dst_port, p.tcp.src_port, 0, p.tcp.seq + 1,
                   tcp_flags::rst | tcp_flags::ack);
      return;
    }
    auto& lst = l->second;
    const std::pair<Ipv4, std::uint16_t> key{p.src_ip, p.tcp.src_port};
    auto existing = lst.half_open.find(key);
    if (existing == lst.half_open.end()) {
      if (lst.half_open.size() >= cfg_.backlog || lst.admitted_this_tick >= cfg_.accept_budget) {
        ++counters_.dropped_syn;
        return;
      }
      ++lst.admitted_this_tick;
      existing = lst.half_open.emplace(key, HalfOpen{p.tcp.seq, static_cast<std::uint32_t>(rng_()), tick_}).first;
    }
    send_control(id, p.src_ip, p.tcp.dst_port, p.tcp.src_port, existing->second.server_isn,
                 existing->second.client_isn + 1, tcp_flags::syn | tcp_flags::ack);
    return;
  }

  if ((flags & tcp_flags::syn) && (flags & tcp_flags::ack)) {
    auto it = conn_index_.find(local);
    if (it == conn_index_.end() || it->second.second != Side::client) return;  // unsolicited
    auto& c = conns_[it->second.first];
    if (c.client_state != ConnState::syn_sent) return;
    if (overloaded(id)) {
      ++counters_.dropped_host;
      return;
    }
    c.client_state = ConnState::established;
    c.server_next = p.tcp.seq + 1;
    c.client_next = p.tcp.ack;
    send_control(id, p.src_ip, c.client_port, c.server_port, c.client_next, c.server_next, tcp_flags::ack);
    return;
  }

  if (p.payload.empty()) {
    // Final ACK of a handshake.
    auto l = node.listeners.find(p.tcp.dst_port);
    if (l == node.listeners.end()) return;
    auto h = l->second.half_open.find({p.src_ip, p.tcp.src_port});
    if (h == l->second.half_open.end() || p.tcp.ack != h->second.server_isn + 1) return;
    l->second.half_open.erase(h);
    auto client = conn_index_.find(ConnKey{p.src_ip, p.tcp.src_port, p.dst_ip, p.tcp.dst_port});
    if (client == conn_index_.end()) return;
    auto& c = conns_[client->second.first];
    c.server = id;
    c.server_state = ConnState::established;
    conn_index_[local] = {client->second.first, Side::server};
    return;
  }

  auto it = conn_index_.find(local);
  if (it == conn_index_.end()) {
    ++counters_.dropped_host;
    return;
  }
  const auto [cid, side] = it->second;
  const auto& c = conns_[cid];
  const auto state = side == Side::client ? c.client_state : c.server_state;
  if (state != ConnState::established || overloaded(id)) {
    ++counters_.dropped_host;
    return;
  }
  if (node.handler) node.handler(cid, side, p.payload);
}

ConnectResult Fabric::tcp_connect(NodeId client, Ipv4 server_ip, std::uint16_t port) {
  auto& n = nodes_.at(client);
  const std::uint16_t sport = n.next_port;
  n.next_port = n.next_port == 65535 ? n.cfg.ephemeral_base : static_cast<std::uint16_t>(n.next_port + 1);

  Connection c;
  c.client = client;
  c.server = node_for_ip(server_ip).value_or(static_cast<NodeId>(-1));
  c.client_ip = n.cfg.ip;
  c.server_ip = server_ip;
  c.client_port = sport;
  c.server_port = port;
  c.client_next = static_cast<std::uint32_t>(rng_());
  c.client_state = ConnState::syn_sent;
  const ConnId id = conns_.size();
  conns_.push_back(c);
  const ConnKey key{c.client_ip, sport, server_ip, port};
  conn_index_[key] = {id, Side::client};

  const std::uint32_t isn = c.client_next;
  for (int attempt = 0; attempt <= cfg_.connect_retries; ++attempt) {
    send_control(client, server_ip, sport, port, isn, 0, tcp_flags::syn);
    flush();
    const auto state = conns_[id].client_state;
    if (state == ConnState::established) return {ConnectResult::Status::established, id};
    if (state == ConnState::closed_rst) return {ConnectResult::Status::refused, id};
  }
  conns_[id].client_state = ConnState::closed;
  conn_index_.erase(key);
  return {ConnectResult::Status::timeout, id};
}

bool Fabric::send(ConnId cid, Side from, Bytes payload) {
  auto& c = conns_.at(cid);
  const bool client = from == Side::client;
  if ((client ? c.client_state : c.server_state) != ConnState::established) return false;
  const NodeId node = client ? c.client : c.server;
  auto& seq = client ? c.client_next : c.server_next;
  TcpHeader h{client ? c.client_port : c.server_port, client ? c.server_port : c.client_port, seq,
              client ? c.server_next : c.client_next, static_cast<std::uint8_t>(tcp_flags::psh | tcp_flags::ack),
              nodes_.at(node).cfg.window};
  seq += static_cast<std::uint32_t>(payload.size());
  enqueue(make_packet(node, client ? c.server_ip : c.client_ip, h, std::move(payload)), node);
  return true;
}

void Fabric::reset(ConnId cid, Side from) {
  auto& c = conns_.at(cid);
  const bool client = from == Side::client;
  auto& state = client ? c.client_state : c.server_state;
  if (state == ConnState::closed || state == ConnState::closed_rst) return;
  const NodeId node = client ? c.client : c.server;
  send_control(node, client ? c.server_ip : c.client_ip, client ? c.client_port : c.server_port,
               client ? c.server_port : c.client_port, client ? c.client_next : c.server_next,
               client ? c.server_next : c.client_next, tcp_flags::rst | tcp_flags::ack);
  state = ConnState::closed_rst;
  conn_index_.erase(client ? ConnKey{c.client_ip, c.client_port, c.server_ip, c.server_port}
                           : ConnKey{c.server_ip, c.server_port, c.client_ip, c.client_port});
}

void Fabric::inject(NodeId from, Packet p) {
  const auto& n = nodes_.at(from);
  p.src_mac = n.mac;
  p.src_ip = n.cfg.ip;
  p.ip_id = nodes_[from].ip_id++;
  enqueue(std::move(p), from);
}

}  // namespace otbed::fabric
