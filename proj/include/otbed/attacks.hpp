#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "otbed/fabric.hpp"
#include "otbed/link.hpp"
#include "otbed/modbus.hpp"

namespace otbed::attacks {

using fabric::Bytes;
using fabric::Ipv4;
using fabric::Tick;

struct Replacement {
  Bytes search;
  Bytes replace;
  bool operator==(const Replacement&) const = default;
};

// Applies when a TCP payload to dst_port contains trigger; then every
// replacement runs in order over the payload.
struct FilterRule {
  std::uint16_t dst_port = 502;
  Bytes trigger;
  std::vector<Replacement> replacements;
  bool operator==(const FilterRule&) const = default;
};

// The belt-reversal filter: guard on FF CE, five equal-length replacements.
[[nodiscard]] FilterRule belt_reversal_rule();

// Throws std::invalid_argument for empty patterns or unequal-length pairs.
void validate(const FilterRule& rule);

// Non-overlapping, left to right, no rescan of substituted bytes.
std::size_t replace_all(Bytes& data, const Bytes& search, const Bytes& replace);

// Bit-identical copy when the rule does not trigger.
[[nodiscard]] fabric::FilterOutcome mitm_apply(const FilterRule& rule, const fabric::Packet& packet);
[[nodiscard]] fabric::FilterOutcome mitm_apply(const std::vector<FilterRule>& rules, const fabric::Packet& packet);

struct Recon {
  Ipv4 network = 0;
  int prefix = 24;
  std::uint16_t port = 502;
  bool operator==(const Recon&) const = default;
};

struct SynFlood {
  Ipv4 target = 0;
  std::uint16_t port = 502;
  std::uint32_t rate = 50;          // packets per tick
  std::uint32_t payload_len = 120;  // bytes of filler per SYN
  Tick duration = 6000;
  bool operator==(const SynFlood&) const = default;
};

struct CoilForgery {
  Ipv4 target = 0;
  std::uint16_t port = 502;
  std::uint8_t unit = 0;
  modbus::FunctionCode function = modbus::FunctionCode::write_single_coil;
  std::uint16_t address = 34;
  std::vector<bool> values{true};
  bool operator==(const CoilForgery&) const = default;
};

struct MitmFilter {
  Ipv4 victim_a = 0;
  Ipv4 victim_b = 0;
  std::vector<FilterRule> rules{belt_reversal_rule()};
  Tick duration = 6000;
  bool operator==(const MitmFilter&) const = default;
};

using AttackSpec = std::variant<Recon, SynFlood, CoilForgery, MitmFilter>;
[[nodiscard]] const char* kind_name(const AttackSpec& spec);

struct ScheduledAttack {
  Tick start = 0;
  AttackSpec spec;
  bool operator==(const ScheduledAttack&) const = default;
};

// Build the frame a forgery sends. Throws std::invalid_argument when the
// values do not fit the function (one value for FC05).
[[nodiscard]] modbus::Pdu forgery_request(const CoilForgery& spec);

struct ReconEntry {
  Ipv4 address = 0;
  bool open = false;
  bool operator==(const ReconEntry&) const = default;
};

struct ForgeResult {
  enum class Status { echoed, exception, timeout, refused };
  Status status = Status::timeout;
  std::optional<modbus::Pdu> response;
};
[[nodiscard]] const char* to_string(ForgeResult::Status s);

struct FloodStats {
  std::uint64_t sent = 0;
  std::vector<std::size_t> occupancy;  // victim half-open entries after each tick
};

struct AttackEvent {
  Tick tick = 0;
  std::string kind;
  std::string detail;
};

class Attacker {
 public:
  Attacker(fabric::Fabric& fab, fabric::NodeId node, std::uint64_t seed);
  Attacker(const Attacker&) = delete;
  Attacker& operator=(const Attacker&) = delete;

  // Hosts in the subnet that answered a connection attempt, ascending.
  std::vector<ReconEntry> recon_scan(const Recon& spec);
  ForgeResult forge_write(const CoilForgery& spec);
  // Queues one tick worth of SYNs.
  std::uint64_t flood_step(const SynFlood& spec);
  void mitm_start(const MitmFilter& spec);
  void mitm_stop();

  void schedule(ScheduledAttack a);
  // Runs whatever is due at this tick; call between PLC cycles and the
  // fabric flush.
  void step(Tick now);
  // Records the flooded listener's occupancy; call after the flush.
  void after_flush();

  [[nodiscard]] const std::vector<AttackEvent>& events() const { return events_; }
  [[nodiscard]] std::vector<std::string> active(Tick now) const;
  [[nodiscard]] const std::vector<ScheduledAttack>& timeline() const { return timeline_; }
  [[nodiscard]] const std::vector<ReconEntry>& last_recon() const { return last_recon_; }
  [[nodiscard]] const FloodStats& flood_stats() const { return flood_; }
  [[nodiscard]] fabric::NodeId node() const { return node_; }

 private:
  fabric::Fabric& fab_;
  fabric::NodeId node_;
  link::Host host_;
  std::mt19937 rng_;
  std::uint16_t flood_port_;
  std::vector<ScheduledAttack> timeline_;
  std::vector<AttackEvent> events_;
  std::vector<ReconEntry> last_recon_;
  FloodStats flood_;
  std::optional<SynFlood> flooding_;
  Tick now_ = 0;
  bool mitm_active_ = false;
};

// Standalone flood driver: owns the clock for `duration` ticks.
FloodStats syn_flood(fabric::Fabric& fab, Attacker& attacker, const SynFlood& spec, Tick first_tick);

}  // namespace otbed::attacks
