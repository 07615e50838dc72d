#include <gtest/gtest.h>

#include <random>

#include "otbed/factory.hpp"

using namespace otbed;
using namespace otbed::factory;

namespace {

modbus::DataStore running(std::uint16_t speed = 250) {
  modbus::DataStore a;
  for (std::uint16_t r : {100, 111, 112, 113, 130}) a.set_holding_register(r, speed);
  a.set_coil(10, true);
  return a;
}

FactoryState run(FactoryState s, const FactoryConfig& cfg, const modbus::DataStore& a, int ticks) {
  for (int i = 0; i < ticks; ++i) s = tick(std::move(s), cfg, a, cfg.tick_ms);
  return s;
}

Item place(FactoryState& s, ConveyorId c, double offset, ItemKind k = ItemKind::a) {
  Item i;
  i.id = std::uint32_t(s.items.size());
  i.kind = k;
  i.conveyor = c;
  i.offset_mm = offset;
  s.items.push_back(i);
  return i;
}

}  // namespace

TEST(Factory, NegativeSpeedRegisterScrapsItemNearStart) {
  FactoryConfig cfg;
  auto s = initial_state(cfg);
  place(s, ConveyorId::infeed, 10.0);
  modbus::DataStore a;
  a.set_holding_register(100, 0xFB1D);  // -1251 mm/s
  s = tick(s, cfg, a, 10);
  EXPECT_EQ(s.items[0].status, ItemStatus::scrapped);
  EXPECT_EQ(s.cells[0].scrapped, 1u);
  EXPECT_EQ(s.warning_light, Light::yellow);
}

TEST(Factory, WrongDtRejected) {
  FactoryConfig cfg;
  auto s = initial_state(cfg);
  EXPECT_THROW((void)tick(s, cfg, modbus::DataStore{}, 20), std::invalid_argument);
}

TEST(Factory, SpawnsAlternateKindsAtConfiguredPeriod) {
  FactoryConfig cfg;
  auto s = run(initial_state(cfg), cfg, running(), 1000);
  ASSERT_EQ(s.spawned, 5u);
  EXPECT_EQ(s.items[0].kind, ItemKind::a);
  EXPECT_EQ(s.items[1].kind, ItemKind::b);
  EXPECT_EQ(s.items[4].kind, ItemKind::a);
  // item spawned at tick 200 has moved 800 ticks * 2.5 mm
  EXPECT_NEAR(s.items[0].offset_mm, 2000.0, 1e-6);
}

TEST(Factory, SpawnJitterIsSeeded) {
  FactoryConfig cfg;
  cfg.spawn_jitter = 40;
  auto a = run(initial_state(cfg), cfg, running(), 3000);
  auto b = run(initial_state(cfg), cfg, running(), 3000);
  EXPECT_EQ(a, b);
  cfg.seed = 99;
  auto c = run(initial_state(cfg), cfg, running(), 3000);
  EXPECT_NE(a.items.size() == c.items.size() && a.items == c.items, true);
}

TEST(Factory, ZeroSpeedHoldsItems) {
  FactoryConfig cfg;
  auto s = initial_state(cfg);
  place(s, ConveyorId::main, 1234.5);
  s = run(s, cfg, modbus::DataStore{}, 500);
  EXPECT_EQ(s.items[0].offset_mm, 1234.5);
  EXPECT_EQ(s.items[0].status, ItemStatus::in_transit);
}

TEST(Factory, EndOfMainBeltRoutesByArmPosition) {
  FactoryConfig cfg;
  auto s = initial_state(cfg);
  place(s, ConveyorId::main, 4999.0);
  auto a = running();
  a.set_coil(10, false);
  auto retracted = tick(s, cfg, a, 10);
  EXPECT_EQ(retracted.items[0].conveyor, ConveyorId::a_lane);
  EXPECT_NEAR(retracted.items[0].offset_mm, 1.5, 1e-9);
  s.arm_position_mm = cfg.arm_travel_mm;
  auto extended = tick(s, cfg, a, 10);
  EXPECT_EQ(extended.items[0].conveyor, ConveyorId::b_lane);
  EXPECT_EQ(extended.cells[std::size_t(CellKind::sorting)].completed, 1u);
}

TEST(Factory, ArmVelocityIntegratesAndClamps) {
  FactoryConfig cfg;
  auto s = initial_state(cfg);
  modbus::DataStore a;
  a.set_holding_register(110, 0x32);  // 50 mm/s
  s = run(s, cfg, a, 40);
  EXPECT_NEAR(s.arm_position_mm, 20.0, 1e-9);
  s = run(s, cfg, a, 200);
  EXPECT_EQ(s.arm_position_mm, 50.0);
  a.set_holding_register(110, 0xFFCE);  // -50 mm/s
  s = run(s, cfg, a, 500);
  EXPECT_EQ(s.arm_position_mm, 0.0);
}

TEST(Factory, SensorWindowMatchesOracle) {
  FactoryConfig cfg;
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> pos(4000.0, 5000.0);
  for (int trial = 0; trial < 200; ++trial) {
    auto s = initial_state(cfg);
    const int n = int(rng() % 4);
    bool expect_any = false, expect_b = false;
    for (int i = 0; i < n; ++i) {
      const double off = pos(rng);
      const auto kind = rng() % 2 ? ItemKind::b : ItemKind::a;
      place(s, ConveyorId::main, off, kind);
      if (off >= 4600.0 && off < 5000.0) {
        expect_any = true;
        expect_b = expect_b || kind == ItemKind::b;
      }
    }
    const auto t = read_sensors(s, cfg);
    EXPECT_EQ(t.discrete_inputs[13], expect_any);
    EXPECT_EQ(t.discrete_inputs[10], expect_b);
  }
}

TEST(Factory, SensorEdgesOfWindow) {
  FactoryConfig cfg;
  auto s = initial_state(cfg);
  place(s, ConveyorId::main, 4599.999, ItemKind::b);
  EXPECT_FALSE(read_sensors(s, cfg).discrete_inputs[10]);
  s.items[0].offset_mm = 4600.0;
  EXPECT_TRUE(read_sensors(s, cfg).discrete_inputs[10]);
}

TEST(Factory, ConservationHoldsEveryTick) {
  FactoryConfig cfg;
  auto s = initial_state(cfg);
  auto a = running();
  for (int t = 0; t < 8000; ++t) {
    if (t == 3000) a.set_holding_register(111, 0xFB1D);
    if (t == 3500) a.set_holding_register(111, 250);
    s = tick(s, cfg, a, 10);
    const auto c = count_statuses(s);
    ASSERT_EQ(c.in_transit + c.in_machine + c.completed + c.scrapped, s.items.size());
    std::uint64_t scrapped = 0;
    for (const auto& cell : s.cells) scrapped += cell.scrapped;
    ASSERT_EQ(scrapped, c.scrapped);
  }
  EXPECT_GT(count_statuses(s).scrapped, 0u);
}

TEST(Factory, ReversalDoesNotUndoCompletions) {
  FactoryConfig cfg;
  auto s = run(initial_state(cfg), cfg, running(), 5000);
  const auto before = s.cells;
  auto a = running(0xFB1D);
  for (int t = 0; t < 1000; ++t) {
    s = tick(s, cfg, a, 10);
    for (std::size_t c = 0; c < cell_count; ++c) ASSERT_GE(s.cells[c].completed, before[c].completed);
  }
  EXPECT_GT(s.cells[0].scrapped + s.cells[1].scrapped, 0u);
}

TEST(Factory, SteadyInfeedThroughputMatchesSpawnRate) {
  FactoryConfig cfg;
  auto s = run(initial_state(cfg), cfg, running(), 12000);
  const auto m = production_metrics(s, cfg);
  // one item per 200 ticks over a 6000-tick window
  EXPECT_NEAR(m.cells[0].throughput_per_min, 30.0, 1.0);
  EXPECT_EQ(m.light, Light::green);
}

namespace {

struct CraneRig {
  FactoryConfig cfg;
  FactoryState s = initial_state(cfg);
  modbus::DataStore a;
  CraneRig() {
    place(s, ConveyorId::a_lane, 4999.0);
    a.set_holding_register(112, 250);
    step(1);
  }
  void step(int n) { s = run(s, cfg, a, n); }
};

}  // namespace

TEST(Factory, CraneCycleCombinesOneItem) {
  CraneRig r;
  ASSERT_EQ(r.s.combine_buffer.size(), 1u);
  EXPECT_TRUE(read_sensors(r.s, r.cfg).discrete_inputs[20]);
  r.a.set_coil(33, true);
  r.step(30);
  EXPECT_EQ(r.s.crane.phase, CranePhase::holding);
  EXPECT_TRUE(read_sensors(r.s, r.cfg).discrete_inputs[21]);
  r.a.set_coil(34, true);
  r.step(50);
  EXPECT_EQ(r.s.crane.phase, CranePhase::at_place);
  EXPECT_EQ(r.s.crane.angle, 90);
  r.a.set_coil(33, false);
  r.step(1);
  EXPECT_EQ(r.s.crane.phase, CranePhase::placed);
  EXPECT_EQ(r.s.cells[std::size_t(CellKind::combine)].completed, 1u);
  r.a.set_coil(34, false);
  r.step(50);
  EXPECT_EQ(r.s.crane.phase, CranePhase::idle);
  EXPECT_EQ(r.s.crane.angle, 0);
  EXPECT_FALSE(r.s.crane.misaligned);
  ASSERT_EQ(r.s.items.size(), 2u);
  EXPECT_EQ(r.s.items[1].kind, ItemKind::combined);
}

TEST(Factory, RotateWhileNotHoldingMisalignsAndBlocks) {
  CraneRig r;
  r.a.set_coil(34, true);
  r.step(1);
  EXPECT_TRUE(r.s.crane.misaligned);
  EXPECT_EQ(r.s.crane.angle, 90);
  EXPECT_TRUE(r.s.cells[std::size_t(CellKind::combine)].blocked);
  EXPECT_EQ(r.s.warning_light, Light::red);
  EXPECT_TRUE(read_sensors(r.s, r.cfg).discrete_inputs[24]);
  // stays blocked whatever the actuators do
  r.a.set_coil(34, false);
  r.a.set_coil(33, true);
  for (int i = 0; i < 500; ++i) {
    r.step(1);
    ASSERT_TRUE(r.s.cells[std::size_t(CellKind::combine)].blocked);
  }
  EXPECT_EQ(r.s.cells[std::size_t(CellKind::combine)].completed, 0u);
}

TEST(Factory, EstopFreezesCraneAndTurnsLightRed) {
  CraneRig r;
  r.a.set_coil(33, true);
  r.step(10);
  r.s.estop = true;
  const auto frozen = r.s.crane;
  r.step(100);
  EXPECT_EQ(r.s.crane, frozen);
  EXPECT_EQ(r.s.warning_light, Light::red);
  EXPECT_TRUE(read_sensors(r.s, r.cfg).discrete_inputs[0]);
  r.s.estop = false;
  r.step(20);
  EXPECT_EQ(r.s.crane.phase, CranePhase::holding);
}

TEST(Factory, PusherPalletizesOnePerRisingEdge) {
  FactoryConfig cfg;
  auto s = initial_state(cfg);
  place(s, ConveyorId::palletize, 5000.0);
  place(s, ConveyorId::palletize, 5000.0);
  EXPECT_TRUE(read_sensors(s, cfg).discrete_inputs[30]);
  modbus::DataStore a;
  a.set_coil(50, true);
  s = run(s, cfg, a, 20);  // held high: one edge
  EXPECT_EQ(s.cells[std::size_t(CellKind::palletize)].completed, 1u);
  a.set_coil(50, false);
  s = run(s, cfg, a, 1);
  a.set_coil(50, true);
  s = run(s, cfg, a, 1);
  EXPECT_EQ(s.cells[std::size_t(CellKind::palletize)].completed, 2u);
  EXPECT_FALSE(read_sensors(s, cfg).discrete_inputs[30]);
}

TEST(Factory, CountersExposedAsInputRegisters) {
  FactoryConfig cfg;
  auto s = initial_state(cfg);
  s.cells[2].completed = 7;
  s.cells[3].scrapped = 65537;  // registers wrap
  const auto t = read_sensors(s, cfg);
  EXPECT_EQ(t.input_registers[2], 7);
  EXPECT_EQ(t.input_registers[7], 1);
}

TEST(Factory, DeterministicAcrossRuns) {
  FactoryConfig cfg;
  auto a = running();
  auto x = run(initial_state(cfg), cfg, a, 7000);
  auto y = run(initial_state(cfg), cfg, a, 7000);
  EXPECT_EQ(x, y);
}

TEST(IoMap, RejectsDuplicateBindings) {
  IoMap m;
  m.bind("x", {Table::coil, 1});
  EXPECT_THROW(m.bind("x", {Table::coil, 2}), std::invalid_argument);
  EXPECT_THROW(m.bind("y", {Table::coil, 1}), std::invalid_argument);
  m.bind("y", {Table::discrete_input, 1});
}

TEST(IoMap, DefaultsCoverRequiredRolesAndCustomMapsAreChecked) {
  EXPECT_TRUE(IoMap::defaults().validate().empty());
  IoMap m;
  m.bind(role::estop, {Table::coil, 0});
  const auto errors = m.validate();
  EXPECT_EQ(errors.size(), required_roles().size());
  FactoryConfig cfg;
  cfg.io = m;
  EXPECT_THROW((void)initial_state(cfg), std::invalid_argument);
}

TEST(IoMap, RemappedAddressesDriveTheSimulation) {
  FactoryConfig cfg;
  IoMap m;
  const IoMap base = IoMap::defaults();
  for (const auto& [r, where] : base.roles()) {
    IoAddress w = where;
    if (r == role::infeed_speed) w.address = 500;
    m.bind(r, w);
  }
  cfg.io = m;
  auto s = initial_state(cfg);
  place(s, ConveyorId::infeed, 0.0);
  modbus::DataStore a;
  a.set_holding_register(500, 1000);
  s = tick(s, cfg, a, 10);
  EXPECT_NEAR(s.items[0].offset_mm, 10.0, 1e-9);
}
