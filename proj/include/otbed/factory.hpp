#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "otbed/modbus.hpp"

namespace otbed::factory {

using Tick = std::uint64_t;

enum class CellKind { infeed = 0, sorting = 1, combine = 2, palletize = 3 };
inline constexpr std::size_t cell_count = 4;
[[nodiscard]] const char* to_string(CellKind c);

enum class Table { coil, discrete_input, holding_register, input_register };
[[nodiscard]] const char* to_string(Table t);
[[nodiscard]] std::optional<Table> table_from_string(const std::string& s);

struct IoAddress {
  Table table = Table::coil;
  std::uint16_t address = 0;
  auto operator<=>(const IoAddress&) const = default;
};

// Named sensor/actuator roles bound to Modbus addresses. Roles are fixed by
// the factory; addresses are configuration.
namespace role {
inline constexpr const char* estop = "estop";
inline constexpr const char* spawn_enable = "infeed.spawn_enable";
inline constexpr const char* infeed_speed = "conveyor.infeed.speed";
inline constexpr const char* main_speed = "conveyor.main.speed";
inline constexpr const char* a_lane_speed = "conveyor.a_lane.speed";
inline constexpr const char* b_lane_speed = "conveyor.b_lane.speed";
inline constexpr const char* palletize_speed = "conveyor.palletize.speed";
inline constexpr const char* arm_velocity = "sorting.arm.velocity";
inline constexpr const char* item_at_divert = "sorting.item_at_divert";
inline constexpr const char* b_at_divert = "sorting.b_at_divert";
inline constexpr const char* arm_extended = "sorting.arm_extended";
inline constexpr const char* arm_retracted = "sorting.arm_retracted";
inline constexpr const char* crane_grab = "crane.grab";
inline constexpr const char* crane_rotate = "crane.rotate";
inline constexpr const char* crane_ready = "crane.ready";
inline constexpr const char* crane_holding = "crane.holding";
inline constexpr const char* crane_at_place = "crane.at_place";
inline constexpr const char* crane_placed = "crane.placed";
inline constexpr const char* crane_misaligned = "crane.misaligned";
inline constexpr const char* pusher = "palletize.pusher";
inline constexpr const char* item_at_end = "palletize.item_at_end";
inline constexpr const char* light_red = "light.red";
inline constexpr const char* light_yellow = "light.yellow";
inline constexpr const char* light_green = "light.green";
inline constexpr const char* completed_prefix = "counter.completed.";  // + cell name
inline constexpr const char* scrapped_prefix = "counter.scrapped.";
}  // namespace role

// Every role the factory reads or writes, with the table it must live in.
[[nodiscard]] const std::vector<std::pair<std::string, Table>>& required_roles();

class IoMap {
 public:
  // Throws std::invalid_argument when the role or the (table, address) is taken.
  void bind(const std::string& role, IoAddress where);
  [[nodiscard]] const IoAddress& at(const std::string& role) const;
  [[nodiscard]] bool has(const std::string& role) const { return roles_.contains(role); }
  [[nodiscard]] const std::map<std::string, IoAddress>& roles() const { return roles_; }
  [[nodiscard]] bool mapped(IoAddress where) const { return taken_.contains(where); }
  // Highest mapped address + 1 per table (0 if none).
  [[nodiscard]] std::size_t extent(Table t) const;
  // Lowest mapped address per table.
  [[nodiscard]] std::optional<std::uint16_t> lowest(Table t) const;
  // Problems with required roles: missing or bound to the wrong table.
  [[nodiscard]] std::vector<std::string> validate() const;

  [[nodiscard]] static IoMap defaults();

  bool operator==(const IoMap&) const = default;

 private:
  std::map<std::string, IoAddress> roles_;
  std::map<IoAddress, std::string> taken_;
};

enum class ConveyorId { infeed = 0, main = 1, a_lane = 2, b_lane = 3, palletize = 4 };
inline constexpr std::size_t conveyor_count = 5;
[[nodiscard]] const char* to_string(ConveyorId c);
[[nodiscard]] CellKind owning_cell(ConveyorId c);

struct FactoryConfig {
  std::uint32_t tick_ms = 10;
  double conveyor_length_mm = 5000.0;
  Tick spawn_period = 200;
  Tick spawn_jitter = 0;  // max extra ticks, drawn from the seed
  std::uint64_t seed = 1;
  double divert_window_start_mm = 4600.0;  // window runs to the end of the main belt
  double arm_travel_mm = 50.0;
  Tick crane_grab_ticks = 30;
  Tick crane_rotate_ticks = 50;
  Tick crane_return_ticks = 50;
  Tick metrics_window = 6000;
  IoMap io = IoMap::defaults();
};

enum class ItemKind { a, b, combined };
enum class ItemStatus { in_transit, in_machine, completed, scrapped };

struct Item {
  std::uint32_t id = 0;
  ItemKind kind = ItemKind::a;
  ItemStatus status = ItemStatus::in_transit;
  ConveyorId conveyor = ConveyorId::infeed;
  double offset_mm = 0.0;
  bool operator==(const Item&) const = default;
};

struct Conveyor {
  ConveyorId id = ConveyorId::infeed;
  double length_mm = 5000.0;
  std::int16_t speed = 0;  // mm/s, two's complement of the register
  bool operator==(const Conveyor&) const = default;
};

enum class CranePhase { idle, grabbing, holding, rotating, at_place, placed, returning };
[[nodiscard]] const char* to_string(CranePhase p);

struct Crane {
  int angle = 0;  // degrees, one of 0/90/180/270
  CranePhase phase = CranePhase::idle;
  Tick timer = 0;
  std::optional<std::uint32_t> held;
  bool misaligned = false;
  [[nodiscard]] bool busy() const { return phase != CranePhase::idle; }
  bool operator==(const Crane&) const = default;
};

enum class Light { green, yellow, red };
[[nodiscard]] const char* to_string(Light l);

struct CellMetrics {
  std::uint64_t produced = 0;   // items that entered the cell
  std::uint64_t completed = 0;  // items the cell finished
  std::uint64_t scrapped = 0;
  bool blocked = false;
  bool operator==(const CellMetrics&) const = default;
};

struct FactoryState {
  Tick tick = 0;
  std::uint64_t seed = 1;
  std::array<Conveyor, conveyor_count> conveyors{};
  double arm_position_mm = 0.0;
  std::int16_t arm_velocity = 0;
  Crane crane;
  std::deque<std::uint32_t> combine_buffer;
  std::vector<Item> items;
  bool estop = false;
  Light warning_light = Light::green;
  std::array<CellMetrics, cell_count> cells{};
  std::array<std::deque<Tick>, cell_count> completion_ticks{};
  std::deque<Tick> scrap_ticks;
  std::uint64_t spawned = 0;
  Tick next_spawn = 0;
  bool prev_grab = false;
  bool prev_rotate = false;
  bool prev_pusher = false;

  bool operator==(const FactoryState&) const = default;
};

[[nodiscard]] FactoryState initial_state(const FactoryConfig& cfg);

// Advances one tick. Pure in (state, actuators, dt). Throws
// std::invalid_argument when dt differs from the configured tick length.
[[nodiscard]] FactoryState tick(FactoryState state, const FactoryConfig& cfg, const modbus::DataStore& actuators,
                                std::uint32_t dt_ms);

// Operator recovery: crane back home and aligned, a held item returned to the
// buffer, Combine unblocked.
void reset_crane(FactoryState& state);

struct SensorTables {
  std::vector<bool> discrete_inputs;
  std::vector<std::uint16_t> input_registers;
  bool operator==(const SensorTables&) const = default;
};
[[nodiscard]] SensorTables read_sensors(const FactoryState& state, const FactoryConfig& cfg);

struct CellReport {
  double throughput_per_min = 0.0;
  std::uint64_t completed = 0;
  std::uint64_t scrapped = 0;
  bool blocked = false;
};
struct ProductionMetrics {
  std::array<CellReport, cell_count> cells{};
  std::uint64_t scrapped_total = 0;
  Light light = Light::green;
};
[[nodiscard]] ProductionMetrics production_metrics(const FactoryState& state, const FactoryConfig& cfg);

struct StatusCounts {
  std::size_t in_transit = 0, in_machine = 0, completed = 0, scrapped = 0;
};
[[nodiscard]] StatusCounts count_statuses(const FactoryState& state);

// Items sitting in the divert window of the main belt.
[[nodiscard]] bool in_divert_window(const Item& item, const FactoryConfig& cfg);

}  // namespace otbed::factory
