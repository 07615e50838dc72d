#include "otbed/factory.hpp"

#include <algorithm>
#include <stdexcept>

namespace otbed::factory {

const char* to_string(CellKind c) {
  switch (c) {
    case CellKind::infeed: return "infeed";
    case CellKind::sorting: return "sorting";
    case CellKind::combine: return "combine";
    case CellKind::palletize: return "palletize";
  }
  return "?";
}

const char* to_string(Table t) {
  switch (t) {
    case Table::coil: return "coil";
    case Table::discrete_input: return "discrete_input";
    case Table::holding_register: return "holding_register";
    case Table::input_register: return "input_register";
  }
  return "?";
}

std::optional<Table> table_from_string(const std::string& s) {
  for (Table t : {Table::coil, Table::discrete_input, Table::holding_register, Table::input_register})
    if (s == to_string(t)) return t;
  return std::nullopt;
}

const char* to_string(ConveyorId c) {
  switch (c) {
    case ConveyorId::infeed: return "infeed";
    case ConveyorId::main: return "main";
    case ConveyorId::a_lane: return "a_lane";
    case ConveyorId::b_lane: return "b_lane";
    case ConveyorId::palletize: return "palletize";
  }
  return "?";
}

CellKind owning_cell(ConveyorId c) {
  switch (c) {
    case ConveyorId::infeed: return CellKind::infeed;
    case ConveyorId::main: return CellKind::sorting;
    case ConveyorId::a_lane: return CellKind::combine;
    case ConveyorId::b_lane:
    case ConveyorId::palletize: return CellKind::palletize;
  }
  return CellKind::infeed;
}

const char* to_string(CranePhase p) {
  switch (p) {
    case CranePhase::idle: return "idle";
    case CranePhase::grabbing: return "grabbing";
    case CranePhase::holding: return "holding";
    case CranePhase::rotating: return "rotating";
    case CranePhase::at_place: return "at_place";
    case CranePhase::placed: return "placed";
    case CranePhase::returning: return "returning";
  }
  return "?";
}

const char* to_string(Light l) {
  switch (l) {
    case Light::green: return "green";
    case Light::yellow: return "yellow";
    case Light::red: return "red";
  }
  return "?";
}

const std::vector<std::pair<std::string, Table>>& required_roles() {
  static const std::vector<std::pair<std::string, Table>> roles = [] {
    std::vector<std::pair<std::string, Table>> r = {
        {role::estop, Table::discrete_input},
        {role::item_at_divert, Table::discrete_input},
        {role::b_at_divert, Table::discrete_input},
        {role::arm_extended, Table::discrete_input},
        {role::arm_retracted, Table::discrete_input},
        {role::crane_ready, Table::discrete_input},
        {role::crane_holding, Table::discrete_input},
        {role::crane_at_place, Table::discrete_input},
        {role::crane_placed, Table::discrete_input},
        {role::crane_misaligned, Table::discrete_input},
        {role::item_at_end, Table::discrete_input},
        {role::spawn_enable, Table::coil},
        {role::crane_grab, Table::coil},
        {role::crane_rotate, Table::coil},
        {role::pusher, Table::coil},
        {role::light_red, Table::coil},
        {role::light_yellow, Table::coil},
        {role::light_green, Table::coil},
        {role::infeed_speed, Table::holding_register},
        {role::arm_velocity, Table::holding_register},
        {role::main_speed, Table::holding_register},
        {role::a_lane_speed, Table::holding_register},
        {role::b_lane_speed, Table::holding_register},
        {role::palletize_speed, Table::holding_register},
    };
    for (std::size_t c = 0; c < cell_count; ++c) {
      r.emplace_back(std::string(role::completed_prefix) + to_string(CellKind(c)), Table::input_register);
      r.emplace_back(std::string(role::scrapped_prefix) + to_string(CellKind(c)), Table::input_register);
    }
    return r;
  }();
  return roles;
}

void IoMap::bind(const std::string& name, IoAddress where) {
  if (roles_.contains(name)) throw std::invalid_argument("role bound twice: " + name);
  if (auto it = taken_.find(where); it != taken_.end())
    throw std::invalid_argument("address " + std::string(to_string(where.table)) + " " +
                                std::to_string(where.address) + " already bound to " + it->second);
  roles_.emplace(name, where);
  taken_.emplace(where, name);
}

const IoAddress& IoMap::at(const std::string& name) const {
  auto it = roles_.find(name);
  if (it == roles_.end()) throw std::out_of_range("unmapped role: " + name);
  return it->second;
}

std::size_t IoMap::extent(Table t) const {
  std::size_t n = 0;
  for (const auto& [where, _] : taken_)
    if (where.table == t) n = std::max<std::size_t>(n, std::size_t(where.address) + 1);
  return n;
}

std::optional<std::uint16_t> IoMap::lowest(Table t) const {
  for (const auto& [where, _] : taken_)
    if (where.table == t) return where.address;
  return std::nullopt;
}

std::vector<std::string> IoMap::validate() const {
  std::vector<std::string> errors;
  for (const auto& [name, table] : required_roles()) {
    auto it = roles_.find(name);
    if (it == roles_.end())
      errors.push_back("missing role " + name);
    else if (it->second.table != table)
      errors.push_back("role " + name + " must be a " + to_string(table));
  }
  return errors;
}

IoMap IoMap::defaults() {
  IoMap m;
  auto di = [&](const char* r, std::uint16_t a) { m.bind(r, {Table::discrete_input, a}); };
  auto co = [&](const char* r, std::uint16_t a) { m.bind(r, {Table::coil, a}); };
  auto hr = [&](const char* r, std::uint16_t a) { m.bind(r, {Table::holding_register, a}); };
  di(role::estop, 0);
  di(role::b_at_divert, 10);
  di(role::arm_extended, 11);
  di(role::arm_retracted, 12);
  di(role::item_at_divert, 13);
  di(role::crane_ready, 20);
  di(role::crane_holding, 21);
  di(role::crane_at_place, 22);
  di(role::crane_placed, 23);
  di(role::crane_misaligned, 24);
  di(role::item_at_end, 30);
  co(role::spawn_enable, 10);
  co(role::crane_grab, 33);
  co(role::crane_rotate, 34);
  co(role::light_red, 40);
  co(role::light_yellow, 41);
  co(role::light_green, 42);
  co(role::pusher, 50);
  hr(role::infeed_speed, 100);
  hr(role::arm_velocity, 110);
  hr(role::main_speed, 111);
  hr(role::a_lane_speed, 112);
  hr(role::b_lane_speed, 113);
  hr(role::palletize_speed, 130);
  for (std::uint16_t c = 0; c < cell_count; ++c) {
    m.bind(std::string(role::completed_prefix) + to_string(CellKind(c)), {Table::input_register, c});
    m.bind(std::string(role::scrapped_prefix) + to_string(CellKind(c)),
           {Table::input_register, std::uint16_t(c + cell_count)});
  }
  return m;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

Tick spawn_gap(const FactoryConfig& cfg, std::uint64_t seed, std::uint64_t index) {
  Tick gap = cfg.spawn_period;
  if (cfg.spawn_jitter > 0) gap += splitmix64(seed ^ (index * 0x632BE59BD9B4E019ULL)) % (cfg.spawn_jitter + 1);
  return std::max<Tick>(gap, 1);
}

// Out-of-range actuator addresses read as zero.
bool coil(const modbus::DataStore& s, const IoMap& io, const char* r) {
  const auto a = io.at(r).address;
  return a < s.coil_count() && s.coil(a);
}
std::int16_t reg(const modbus::DataStore& s, const IoMap& io, const char* r) {
  const auto a = io.at(r).address;
  return a < s.holding_register_count() ? std::int16_t(s.holding_register(a)) : std::int16_t(0);
}

const char* speed_role(ConveyorId c) {
  switch (c) {
    case ConveyorId::infeed: return role::infeed_speed;
    case ConveyorId::main: return role::main_speed;
    case ConveyorId::a_lane: return role::a_lane_speed;
    case ConveyorId::b_lane: return role::b_lane_speed;
    case ConveyorId::palletize: return role::palletize_speed;
  }
  return role::infeed_speed;
}

void record_completion(FactoryState& s, CellKind c) {
  s.cells[std::size_t(c)].completed++;
  s.completion_ticks[std::size_t(c)].push_back(s.tick);
}

void scrap(FactoryState& s, Item& item) {
  item.status = ItemStatus::scrapped;
  s.cells[std::size_t(owning_cell(item.conveyor))].scrapped++;
  s.scrap_ticks.push_back(s.tick);
}

void move_onto(FactoryState& s, Item& item, ConveyorId next, double offset) {
  if (owning_cell(next) != owning_cell(item.conveyor)) s.cells[std::size_t(owning_cell(next))].produced++;
  item.conveyor = next;
  item.offset_mm = offset;
}

void step_conveyors(FactoryState& s, const FactoryConfig& cfg, double dt_s) {
  for (auto& item : s.items) {
    if (item.status != ItemStatus::in_transit) continue;
    const Conveyor& belt = s.conveyors[std::size_t(item.conveyor)];
    item.offset_mm += belt.speed * dt_s;
    if (item.offset_mm < 0.0) {
      scrap(s, item);
      continue;
    }
    if (item.offset_mm < belt.length_mm) continue;
    const double carry = item.offset_mm - belt.length_mm;
    switch (item.conveyor) {
      case ConveyorId::infeed:
        record_completion(s, CellKind::infeed);
        move_onto(s, item, ConveyorId::main, carry);
        break;
      case ConveyorId::main:
        record_completion(s, CellKind::sorting);
        move_onto(s, item, s.arm_position_mm >= cfg.arm_travel_mm ? ConveyorId::b_lane : ConveyorId::a_lane, carry);
        break;
      case ConveyorId::a_lane:
        item.status = ItemStatus::in_machine;
        item.offset_mm = belt.length_mm;
        s.combine_buffer.push_back(item.id);
        break;
      case ConveyorId::b_lane:
        move_onto(s, item, ConveyorId::palletize, carry);
        break;
      case ConveyorId::palletize:
        item.offset_mm = belt.length_mm;  // waits for the pusher
        break;
    }
  }
}

void step_crane(FactoryState& s, const FactoryConfig& cfg, bool grab, bool rotate) {
  Crane& c = s.crane;
  if (s.estop) return;  // frozen; edges are not observed while stopped
  const bool grab_rise = grab && !s.prev_grab, grab_fall = !grab && s.prev_grab;
  const bool rot_rise = rotate && !s.prev_rotate, rot_fall = !rotate && s.prev_rotate;
  s.prev_grab = grab;
  s.prev_rotate = rotate;
  if (c.misaligned) return;

  if (rot_rise) {
    if (c.phase == CranePhase::holding) {
      c.phase = CranePhase::rotating;
      c.timer = cfg.crane_rotate_ticks;
    } else {
      c.misaligned = true;
      c.angle = (c.angle + 90) % 360;
      s.cells[std::size_t(CellKind::combine)].blocked = true;
      return;
    }
  }
  if (grab_rise && c.phase == CranePhase::idle && !s.combine_buffer.empty()) {
    c.phase = CranePhase::grabbing;
    c.timer = cfg.crane_grab_ticks;
  }
  if (grab_fall && c.phase == CranePhase::at_place && c.held) {
    Item& held = s.items.at(*c.held);
    held.status = ItemStatus::completed;
    Item combined;
    combined.id = std::uint32_t(s.items.size());
    combined.kind = ItemKind::combined;
    combined.status = ItemStatus::completed;
    combined.conveyor = ConveyorId::a_lane;
    combined.offset_mm = held.offset_mm;
    s.items.push_back(combined);
    c.held.reset();
    c.phase = CranePhase::placed;
    record_completion(s, CellKind::combine);
  }
  if (rot_fall && c.phase == CranePhase::placed) {
    c.phase = CranePhase::returning;
    c.timer = cfg.crane_return_ticks;
  }

  if (c.timer > 0 && --c.timer == 0) {
    switch (c.phase) {
      case CranePhase::grabbing:
        c.held = s.combine_buffer.front();
        s.combine_buffer.pop_front();
        c.phase = CranePhase::holding;
        break;
      case CranePhase::rotating:
        c.angle = 90;
        c.phase = CranePhase::at_place;
        break;
      case CranePhase::returning:
        c.angle = 0;
        c.phase = CranePhase::idle;
        break;
      default: break;
    }
  }
}

void prune(std::deque<Tick>& q, Tick now, Tick window) {
  while (!q.empty() && q.front() + window <= now) q.pop_front();
}

}  // namespace

FactoryState initial_state(const FactoryConfig& cfg) {
  if (auto errors = cfg.io.validate(); !errors.empty()) throw std::invalid_argument(errors.front());
  FactoryState s;
  s.seed = cfg.seed;
  for (std::size_t i = 0; i < conveyor_count; ++i) {
    s.conveyors[i].id = ConveyorId(i);
    s.conveyors[i].length_mm = cfg.conveyor_length_mm;
  }
  s.next_spawn = spawn_gap(cfg, cfg.seed, 0);
  return s;
}

FactoryState tick(FactoryState s, const FactoryConfig& cfg, const modbus::DataStore& act, std::uint32_t dt_ms) {
  if (dt_ms != cfg.tick_ms)
    throw std::invalid_argument("dt " + std::to_string(dt_ms) + " ms does not match tick " +
                                std::to_string(cfg.tick_ms) + " ms");
  const IoMap& io = cfg.io;
  const double dt_s = dt_ms / 1000.0;
  s.tick++;

  for (auto& belt : s.conveyors) belt.speed = reg(act, io, speed_role(belt.id));
  s.arm_velocity = reg(act, io, role::arm_velocity);

  step_conveyors(s, cfg, dt_s);
  s.arm_position_mm = std::clamp(s.arm_position_mm + s.arm_velocity * dt_s, 0.0, cfg.arm_travel_mm);

  const bool pusher = coil(act, io, role::pusher);
  if (pusher && !s.prev_pusher) {
    for (auto& item : s.items) {
      if (item.conveyor == ConveyorId::palletize && item.status == ItemStatus::in_transit &&
          item.offset_mm >= s.conveyors[std::size_t(ConveyorId::palletize)].length_mm) {
        item.status = ItemStatus::completed;
        record_completion(s, CellKind::palletize);
        break;
      }
    }
  }
  s.prev_pusher = pusher;

  step_crane(s, cfg, coil(act, io, role::crane_grab), coil(act, io, role::crane_rotate));

  if (coil(act, io, role::spawn_enable) && s.tick >= s.next_spawn) {
    Item item;
    item.id = std::uint32_t(s.items.size());
    item.kind = s.spawned % 2 == 0 ? ItemKind::a : ItemKind::b;
    s.items.push_back(item);
    s.cells[std::size_t(CellKind::infeed)].produced++;
    s.spawned++;
    s.next_spawn = s.tick + spawn_gap(cfg, s.seed, s.spawned);
  }

  for (auto& q : s.completion_ticks) prune(q, s.tick, cfg.metrics_window);
  prune(s.scrap_ticks, s.tick, cfg.metrics_window);

  bool blocked = false;
  for (const auto& c : s.cells) blocked = blocked || c.blocked;
  if (blocked || s.estop || coil(act, io, role::light_red))
    s.warning_light = Light::red;
  else if (!s.scrap_ticks.empty() || coil(act, io, role::light_yellow))
    s.warning_light = Light::yellow;
  else
    s.warning_light = Light::green;
  return s;
}

bool in_divert_window(const Item& item, const FactoryConfig& cfg) {
  return item.status == ItemStatus::in_transit && item.conveyor == ConveyorId::main &&
         item.offset_mm >= cfg.divert_window_start_mm && item.offset_mm < cfg.conveyor_length_mm;
}

void reset_crane(FactoryState& s) {
  if (s.crane.held) s.combine_buffer.push_front(*s.crane.held);
  s.crane = Crane{};
  s.cells[std::size_t(CellKind::combine)].blocked = false;
}

SensorTables read_sensors(const FactoryState& s, const FactoryConfig& cfg) {
  const IoMap& io = cfg.io;
  SensorTables t;
  t.discrete_inputs.assign(io.extent(Table::discrete_input), false);
  t.input_registers.assign(io.extent(Table::input_register), 0);
  auto di = [&](const char* r, bool v) { t.discrete_inputs.at(io.at(r).address) = v; };

  bool any = false, b = false, at_end = false;
  for (const auto& item : s.items) {
    if (in_divert_window(item, cfg)) {
      any = true;
      b = b || item.kind == ItemKind::b;
    }
    at_end = at_end || (item.conveyor == ConveyorId::palletize && item.status == ItemStatus::in_transit &&
                        item.offset_mm >= s.conveyors[std::size_t(ConveyorId::palletize)].length_mm);
  }
  const Crane& c = s.crane;
  di(role::estop, s.estop);
  di(role::item_at_divert, any);
  di(role::b_at_divert, b);
  di(role::arm_extended, s.arm_position_mm >= cfg.arm_travel_mm);
  di(role::arm_retracted, s.arm_position_mm <= 0.0);
  di(role::crane_ready, c.phase == CranePhase::idle && !c.misaligned && !s.combine_buffer.empty());
  di(role::crane_holding, c.phase == CranePhase::holding);
  di(role::crane_at_place, c.phase == CranePhase::at_place);
  di(role::crane_placed, c.phase == CranePhase::placed);
  di(role::crane_misaligned, c.misaligned);
  di(role::item_at_end, at_end);
  for (std::size_t i = 0; i < cell_count; ++i) {
    const std::string name = to_string(CellKind(i));
    t.input_registers.at(io.at(role::completed_prefix + name).address) = std::uint16_t(s.cells[i].completed);
    t.input_registers.at(io.at(role::scrapped_prefix + name).address) = std::uint16_t(s.cells[i].scrapped);
  }
  return t;
}

ProductionMetrics production_metrics(const FactoryState& s, const FactoryConfig& cfg) {
  ProductionMetrics m;
  const double window_min = double(cfg.metrics_window) * cfg.tick_ms / 60000.0;
  for (std::size_t i = 0; i < cell_count; ++i) {
    std::size_t recent = 0;
    for (Tick t : s.completion_ticks[i])
      if (t + cfg.metrics_window > s.tick) recent++;
    m.cells[i].throughput_per_min = window_min > 0 ? double(recent) / window_min : 0.0;
    m.cells[i].completed = s.cells[i].completed;
    m.cells[i].scrapped = s.cells[i].scrapped;
    m.cells[i].blocked = s.cells[i].blocked;
    m.scrapped_total += s.cells[i].scrapped;
  }
  m.light = s.warning_light;
  return m;
}

StatusCounts count_statuses(const FactoryState& s) {
  StatusCounts c;
  for (const auto& item : s.items) {
    switch (item.status) {
      case ItemStatus::in_transit: c.in_transit++; break;
      case ItemStatus::in_machine: c.in_machine++; break;
      case ItemStatus::completed: c.completed++; break;
      case ItemStatus::scrapped: c.scrapped++; break;
    }
  }
  return c;
}

}  // namespace otbed::factory
