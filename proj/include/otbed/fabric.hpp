#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace otbed::fabric {

using Bytes = std::vector<std::uint8_t>;
using Tick = std::uint64_t;
using Ipv4 = std::uint32_t;
using Mac = std::array<std::uint8_t, 6>;
using NodeId = std::size_t;  // doubles as the switch port id
using ConnId = std::size_t;

inline constexpr std::size_t header_bytes = 14 + 20 + 20;  // Ethernet II + IPv4 + TCP

namespace tcp_flags {
inline constexpr std::uint8_t fin = 0x01;
inline constexpr std::uint8_t syn = 0x02;
inline constexpr std::uint8_t rst = 0x04;
inline constexpr std::uint8_t psh = 0x08;
inline constexpr std::uint8_t ack = 0x10;
}  // namespace tcp_flags

// Total order over everything the switch forwards: the tick plus a sub-tick
// sequence number that resets every tick.
struct Timestamp {
  Tick tick = 0;
  std::uint32_t seq = 0;
  auto operator<=>(const Timestamp&) const = default;
};

struct TcpHeader {
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;
  std::uint32_t seq = 0;
  std::uint32_t ack = 0;
  std::uint8_t flags = 0;
  std::uint16_t window = 0;
  bool operator==(const TcpHeader&) const = default;
};

struct Packet {
  Timestamp ts;
  Mac src_mac{};
  Mac dst_mac{};
  Ipv4 src_ip = 0;
  Ipv4 dst_ip = 0;
  std::uint16_t ip_id = 0;
  std::uint8_t ttl = 64;
  TcpHeader tcp;
  Bytes payload;

  [[nodiscard]] std::size_t frame_size() const { return header_bytes + payload.size(); }
  bool operator==(const Packet&) const = default;
};

[[nodiscard]] Ipv4 parse_ip(const std::string& dotted);  // throws std::invalid_argument
[[nodiscard]] std::string format_ip(Ipv4 ip);
[[nodiscard]] std::uint16_t ipv4_checksum(std::span<const std::uint8_t> header);

// Ethernet II / IPv4 (valid header checksum) / TCP (checksum left 0) / payload.
[[nodiscard]] Bytes render(const Packet& p);
// Inverse of render; nullopt for anything that is not Ethernet/IPv4/TCP with
// 20-byte headers.
[[nodiscard]] std::optional<Packet> parse_rendered(std::span<const std::uint8_t> frame, Timestamp ts);

struct FabricConfig {
  std::uint32_t latency_subticks = 1;
  std::size_t backlog = 128;            // half-open table capacity per listener
  std::size_t accept_budget = 64;       // SYNs admitted per listener per tick
  Tick syn_rcvd_timeout = 300;          // half-open entry lifetime
  std::size_t rx_budget = 32;           // packets per tick a host processes before livelock
  int connect_retries = 3;
  std::uint64_t seed = 1;
};

struct NodeConfig {
  std::string name;
  Ipv4 ip = 0;
  std::uint16_t ephemeral_base = 49152;
  std::uint16_t window = 64240;
  std::optional<std::size_t> rx_budget;  // overrides FabricConfig::rx_budget
  bool attacker = false;                 // ground-truth labelling of its traffic
};

enum class ConnState { closed, syn_sent, syn_rcvd, established, closed_rst };
enum class Side { client, server };

struct ConnectResult {
  enum class Status { established, refused, timeout };
  Status status = Status::timeout;
  ConnId conn = 0;
  [[nodiscard]] bool ok() const { return status == Status::established; }
};

struct Connection {
  NodeId client = 0;
  NodeId server = 0;
  Ipv4 client_ip = 0;
  Ipv4 server_ip = 0;
  std::uint16_t client_port = 0;
  std::uint16_t server_port = 0;
  std::uint32_t client_next = 0;  // next sequence number the client sends
  std::uint32_t server_next = 0;
  ConnState client_state = ConnState::closed;
  ConnState server_state = ConnState::closed;
};

// Returned by an interposition filter: the (possibly rewritten) packet and
// whether anything changed.
struct FilterOutcome {
  Packet packet;
  bool rewritten = false;
};
using RelayFilter = std::function<FilterOutcome(const Packet&)>;

// Topology-level stand-in for ARP poisoning: while active, frames between
// the two victims are addressed to the attacker, which relays them once.
struct Interposition {
  NodeId attacker = 0;
  Ipv4 victim_a = 0;
  Ipv4 victim_b = 0;
  RelayFilter filter;
  bool active = false;
};

struct Capture {
  std::vector<Packet> packets;
  std::vector<std::uint8_t> malicious;  // ground truth, parallel to packets
};

struct Counters {
  std::uint64_t forwarded = 0;
  std::uint64_t dropped_unknown = 0;  // no port owns the destination
  std::uint64_t dropped_host = 0;     // host livelocked or not addressed
  std::uint64_t dropped_syn = 0;      // half-open table full or budget spent
  std::uint64_t relayed = 0;
  std::uint64_t rewritten = 0;
};

using DataHandler = std::function<void(ConnId, Side receiver, std::span<const std::uint8_t>)>;
using MirrorSink = std::function<void(const Packet&, bool malicious)>;

class Fabric {
 public:
  explicit Fabric(FabricConfig cfg = {});

  NodeId attach(NodeConfig cfg);
  void detach(NodeId node);
  void reattach(NodeId node);
  [[nodiscard]] bool attached(NodeId node) const;
  [[nodiscard]] std::optional<NodeId> node_for_ip(Ipv4 ip) const;
  [[nodiscard]] const NodeConfig& node_config(NodeId node) const;
  [[nodiscard]] Mac mac_of(NodeId node) const;
  [[nodiscard]] std::size_t node_count() const { return nodes_.size(); }

  void listen(NodeId node, std::uint16_t port);
  [[nodiscard]] bool listening(NodeId node, std::uint16_t port) const;
  [[nodiscard]] std::size_t half_open(NodeId node, std::uint16_t port) const;

  void on_data(NodeId node, DataHandler handler);
  void set_mirror(MirrorSink sink) { mirror_ = std::move(sink); }
  void set_capture_enabled(bool on) { capture_enabled_ = on; }

  // Synchronous three-way handshake with retries; every packet it takes is
  // forwarded (and captured) before it returns.
  ConnectResult tcp_connect(NodeId client, Ipv4 server_ip, std::uint16_t port);
  // Queues one PSH|ACK segment. False when the sending side is not established.
  bool send(ConnId conn, Side from, Bytes payload);
  void reset(ConnId conn, Side from);
  [[nodiscard]] const Connection& connection(ConnId conn) const { return conns_.at(conn); }

  // Raw injection for crafted packets (SYN floods). Source addresses and IP id
  // are filled from the node; destination MAC is resolved from dst_ip.
  void inject(NodeId from, Packet p);

  void set_interposition(Interposition ip) { interposition_ = std::move(ip); }
  void clear_interposition() { interposition_.active = false; }
  [[nodiscard]] const Interposition& interposition() const { return interposition_; }

  void begin_tick(Tick tick);
  void flush();
  [[nodiscard]] Tick now() const { return tick_; }

  [[nodiscard]] bool overloaded(NodeId node) const;
  [[nodiscard]] const Capture& capture() const { return capture_; }
  [[nodiscard]] const Counters& counters() const { return counters_; }
  [[nodiscard]] const FabricConfig& config() const { return cfg_; }

 private:
  enum class Provenance { normal, relay, rewritten };

  struct HalfOpen {
    std::uint32_t client_isn = 0;
    std::uint32_t server_isn = 0;
    Tick born = 0;
  };
  struct Listener {
    std::map<std::pair<Ipv4, std::uint16_t>, HalfOpen> half_open;
    std::size_t admitted_this_tick = 0;
  };
  struct Node {
    NodeConfig cfg;
    Mac mac{};
    bool attached = true;
    std::uint16_t next_port = 0;
    std::uint16_t ip_id = 0;
    std::map<std::uint16_t, Listener> listeners;
    DataHandler handler;
    std::size_t rx_this_tick = 0;
    std::size_t rx_prev_tick = 0;
  };
  struct Queued {
    Packet packet;
    NodeId from = 0;
    Provenance provenance = Provenance::normal;
  };
  // (local ip, local port, remote ip, remote port)
  using ConnKey = std::tuple<Ipv4, std::uint16_t, Ipv4, std::uint16_t>;

  Packet make_packet(NodeId from, Ipv4 dst_ip, const TcpHeader& tcp, Bytes payload);
  void enqueue(Packet p, NodeId from, Provenance prov = Provenance::normal);
  void forward(Queued q);
  void host_receive(NodeId node, const Packet& p);
  void send_control(NodeId from, Ipv4 dst, std::uint16_t sport, std::uint16_t dport, std::uint32_t seq,
                    std::uint32_t ack, std::uint8_t flags);
  [[nodiscard]] std::size_t budget(const Node& n) const;
  [[nodiscard]] bool is_attacker_traffic(const Packet& p, NodeId from, Provenance prov) const;

  FabricConfig cfg_;
  std::vector<Node> nodes_;
  std::vector<Connection> conns_;
  std::map<ConnKey, std::pair<ConnId, Side>> conn_index_;
  std::deque<Queued> queue_;
  Interposition interposition_;
  Capture capture_;
  bool capture_enabled_ = true;
  MirrorSink mirror_;
  Counters counters_;
  Tick tick_ = 0;
  std::uint32_t seq_ = 0;
  std::mt19937 rng_;
};

}  // namespace otbed::fabric
