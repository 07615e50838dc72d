#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "otbed/attacks.hpp"
#include "otbed/bridge.hpp"
#include "otbed/fabric.hpp"
#include "otbed/factory.hpp"
#include "otbed/link.hpp"
#include "otbed/monitor.hpp"
#include "otbed/plc.hpp"
#include "otbed/scenario.hpp"

namespace otbed::sim {

struct AlertRecord {
  std::uint64_t id = 0;
  fabric::Tick tick = 0;
  std::size_t packet = 0;
  std::string detector;
  double score = 0.0;
  double threshold = 0.0;
  bool acked = false;
};

struct Sample {
  fabric::Tick tick = 0;
  factory::ProductionMetrics metrics;
  std::array<std::int16_t, factory::conveyor_count> speeds{};
};

struct FactoryLinkStats {
  std::uint64_t polls = 0;
  std::uint64_t failures = 0;
};

// One testbed instance. Everything advances inside step(); commands are
// applied between steps.
class Simulation {
 public:
  explicit Simulation(scenario::ScenarioConfig cfg);
  ~Simulation();
  Simulation(const Simulation&) = delete;
  Simulation& operator=(const Simulation&) = delete;

  // Runs tick now() + 1: factory, PLCs by unit id, attacks, fabric, monitor.
  void step();
  void run_to_end();
  [[nodiscard]] fabric::Tick now() const { return tick_; }
  [[nodiscard]] bool finished() const { return tick_ >= cfg_.duration; }

  // estop {on}, crane_reset, launch {attack}, ack {alert}. Replies
  // {"ok": true, ...} or {"ok": false, "error": ...}; never throws.
  nlohmann::json command(const nlohmann::json& cmd);

  [[nodiscard]] nlohmann::json snapshot() const;
  // Closes the monitor (fits if it never got past the split) and evaluates.
  void finish();
  [[nodiscard]] nlohmann::json report() const;

  [[nodiscard]] const scenario::ScenarioConfig& config() const { return cfg_; }
  [[nodiscard]] const fabric::Fabric& fabric() const { return fab_; }
  [[nodiscard]] const fabric::Capture& capture() const { return fab_.capture(); }
  [[nodiscard]] const factory::FactoryState& factory_state() const { return state_; }
  [[nodiscard]] const bridge::Bridge& bridge() const { return *bridge_; }
  [[nodiscard]] const plc::Runtime& plc(const std::string& name) const;
  [[nodiscard]] const attacks::Attacker& attacker() const { return *attacker_; }
  [[nodiscard]] const monitor::Monitor& monitor() const { return *monitor_; }
  [[nodiscard]] const std::vector<AlertRecord>& alerts() const { return alerts_; }
  [[nodiscard]] const std::vector<Sample>& samples() const { return samples_; }
  [[nodiscard]] const FactoryLinkStats& factory_link() const { return link_stats_; }
  [[nodiscard]] std::uint32_t tick_us() const { return cfg_.tick_ms * 1000; }

 private:
  struct PlcNode;

  void poll_actuators();
  void write_sensors();
  void take_sample();
  void collect_alerts();

  scenario::ScenarioConfig cfg_;
  fabric::Fabric fab_;
  fabric::NodeId factory_node_ = 0, bridge_node_ = 0, attacker_node_ = 0;
  std::unique_ptr<bridge::Bridge> bridge_;
  std::unique_ptr<link::Host> bridge_host_;
  std::unique_ptr<link::Host> factory_host_;
  link::ClientSession* factory_session_ = nullptr;
  std::vector<std::unique_ptr<PlcNode>> plcs_;  // sorted by unit id
  std::unique_ptr<attacks::Attacker> attacker_;
  std::unique_ptr<monitor::Monitor> monitor_;

  factory::FactoryState state_;
  modbus::DataStore actuators_;
  fabric::Tick tick_ = 0;
  FactoryLinkStats link_stats_;
  std::vector<Sample> samples_;
  std::vector<AlertRecord> alerts_;
  std::vector<std::uint64_t> plc_stale_ticks_;
  nlohmann::json transcript_ = nlohmann::json::array();
  bool finished_ = false;
  std::optional<monitor::Scores> kmeans_scores_, ewma_scores_;
  std::size_t ewma_alerts_ = 0;
};

struct RunOutcome {
  nlohmann::json report;
  bool artifacts_ok = true;
  std::vector<std::string> artifact_errors;
};

// Headless run: seeds, runs to the end, writes whichever outputs the config
// names. The report's wall_clock_ms is the only non-deterministic field.
RunOutcome run(const scenario::ScenarioConfig& cfg);
// The tail of run() for a simulation driven elsewhere (the control server).
RunOutcome finalize(Simulation& sim, std::chrono::steady_clock::time_point started);

// Labels CSV: frame,tick,seq,malicious (frame numbers from 1).
void write_labels(std::ostream& out, const fabric::Capture& capture);
// Reads the malicious column back; throws std::runtime_error on bad input.
[[nodiscard]] std::vector<std::uint8_t> read_labels(std::istream& in);

// {tp, fp, fn, tn, precision, recall, f1}; undefined ratios are null.
[[nodiscard]] nlohmann::json scores_json(const monitor::Scores& s);

// Report with the wall-clock field removed, for determinism checks.
[[nodiscard]] nlohmann::json without_wall_clock(nlohmann::json report);

}  // namespace otbed::sim
