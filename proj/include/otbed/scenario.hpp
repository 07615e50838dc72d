#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "otbed/attacks.hpp"
#include "otbed/factory.hpp"
#include "otbed/fabric.hpp"
#include "otbed/monitor.hpp"
#include "otbed/plc.hpp"

namespace otbed::scenario {

struct PlcSpec {
  std::string name;
  std::uint8_t unit = 1;
  fabric::Ipv4 ip = 0;
  fabric::Tick period = 5;  // scan every `period` ticks ...
  fabric::Tick phase = 0;   // ... when tick % period == phase
  int stale_after = 3;
  std::vector<plc::OutputBlock> outputs;
  std::vector<std::string> rungs;
  bool operator==(const PlcSpec&) const = default;
};

struct Network {
  fabric::Ipv4 factory = 0;
  fabric::Ipv4 bridge = 0;
  fabric::Ipv4 attacker = 0;
  int prefix = 24;
  bool operator==(const Network&) const = default;
};

struct Outputs {
  std::string pcap;
  std::string report;
  std::string labels;
  std::string alerts;
  bool operator==(const Outputs&) const = default;
};

struct ScenarioConfig {
  std::uint64_t seed = 1;
  std::uint32_t tick_ms = 10;
  fabric::Tick duration = 60000;
  Network network;
  fabric::FabricConfig fabric;
  fabric::Tick factory_poll = 1;
  factory::FactoryConfig factory;
  bool enforce_ownership = true;
  std::size_t table_size = 1024;
  std::vector<PlcSpec> plcs;
  std::vector<attacks::ScheduledAttack> attacks;
  monitor::DetectorConfig monitor;
  fabric::Tick snapshot_period = 10;
  fabric::Tick sample_period = 100;
  Outputs outputs;
};

// All validation problems, not just the first.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> errors);
  [[nodiscard]] const std::vector<std::string>& errors() const { return errors_; }

 private:
  std::vector<std::string> errors_;
};

// The built-in testbed: four cells, four PLCs, one bridge, idle attacker.
[[nodiscard]] ScenarioConfig default_config();
[[nodiscard]] std::vector<PlcSpec> default_plcs();

// Strict: unknown keys and wrong types are errors. Missing keys keep the
// default_config() value. Throws ConfigError.
[[nodiscard]] ScenarioConfig load_config(const std::string& text);
[[nodiscard]] ScenarioConfig load_config(const nlohmann::json& j);
[[nodiscard]] inline ScenarioConfig load_config(const char* text) { return load_config(std::string(text)); }
[[nodiscard]] ScenarioConfig load_config_file(const std::string& path);

// Cross-field checks on an assembled config; empty when valid.
[[nodiscard]] std::vector<std::string> validate(const ScenarioConfig& cfg);

[[nodiscard]] nlohmann::json to_json(const ScenarioConfig& cfg);
[[nodiscard]] nlohmann::json attack_to_json(const attacks::ScheduledAttack& a);
// Parses one attack record ({"start": .., "kind": .., ...}). Throws ConfigError.
[[nodiscard]] attacks::ScheduledAttack attack_from_json(const nlohmann::json& j, fabric::Tick default_start = 0);

// FNV-1a 64 over the canonical (sorted-key) JSON form, as 16 hex digits.
[[nodiscard]] std::string digest(const nlohmann::json& j);
[[nodiscard]] std::string config_digest(const ScenarioConfig& cfg);

[[nodiscard]] fabric::Bytes parse_hex(const std::string& s);  // "FF CE" or "ffce"; throws std::invalid_argument
[[nodiscard]] std::string format_hex(const fabric::Bytes& b);  // "FF CE"

}  // namespace otbed::scenario
