#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "otbed/fabric.hpp"
#include "otbed/modbus.hpp"
#include "otbed/plc.hpp"

namespace otbed::bridge {

struct BridgeConfig {
  fabric::Ipv4 factory_ip = 0;
  // Write ownership: which blocks each PLC (by source address) may write.
  std::map<fabric::Ipv4, std::vector<plc::OutputBlock>> owners;
  bool enforce_ownership = true;
  std::size_t table_size = modbus::DataStore::default_size;
};

struct BridgeStats {
  std::uint64_t requests = 0;
  std::uint64_t exceptions = 0;
  std::uint64_t ownership_rejections = 0;
  std::uint64_t sensor_updates = 0;
};

// The shared Modbus server between the factory and the PLCs.
//
// The factory connection is privileged: its FC15 writes land in the
// discrete-input table and its FC16 writes in the input-register table,
// which ordinary Modbus cannot write. Everyone else gets standard server
// semantics, with PLC writes restricted to the blocks they own. Traffic from
// addresses that are neither the factory nor a PLC is not restricted.
class Bridge {
 public:
  explicit Bridge(BridgeConfig cfg);

  [[nodiscard]] modbus::Pdu route(fabric::Ipv4 peer, const modbus::Pdu& request);

  [[nodiscard]] const modbus::DataStore& store() const { return store_; }
  [[nodiscard]] modbus::DataStore& store() { return store_; }
  [[nodiscard]] const BridgeStats& stats() const { return stats_; }
  [[nodiscard]] const BridgeConfig& config() const { return cfg_; }

 private:
  [[nodiscard]] modbus::Pdu from_factory(const modbus::Pdu& request);
  [[nodiscard]] bool owns(fabric::Ipv4 peer, const modbus::Pdu& request) const;
  modbus::Pdu counted(modbus::Pdu response);

  BridgeConfig cfg_;
  modbus::DataStore store_;
  BridgeStats stats_;
};

}  // namespace otbed::bridge
