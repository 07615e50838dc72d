#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "otbed/factory.hpp"
#include "otbed/link.hpp"

namespace otbed::plc {

using factory::Table;

// Rung language. One rung per line:
//
//   <condition> -> <action>[, <action>...]
//
// Conditions combine DIn, Cn, Tname (timer done) and comparisons such as
// IRn >= 3 or HRn == -50 with and/or/not and parentheses. Actions are
// out Cn, set Cn, reset Cn, mov HRn <value> and ton Tname <scans>.
struct Operand {
  enum class Kind { literal, discrete_input, input_register, coil, holding_register, timer };
  Kind kind = Kind::literal;
  std::uint16_t value = 0;  // literal or address
  std::string timer;
  bool operator==(const Operand&) const = default;
};

struct Expr {
  enum class Op { operand, not_, and_, or_, eq, ne, lt, le, gt, ge };
  Op op = Op::operand;
  Operand leaf;
  std::vector<Expr> kids;
  bool operator==(const Expr&) const = default;
};

struct Action {
  enum class Kind { out, set, reset, mov, ton };
  Kind kind = Kind::out;
  std::uint16_t address = 0;
  std::uint16_t value = 0;  // mov value or ton preset
  std::string timer;
  bool operator==(const Action&) const = default;
};

struct Rung {
  Expr condition;
  std::vector<Action> actions;
  std::string text;
};

// A contiguous run of outputs written in one request.
struct OutputBlock {
  Table table = Table::coil;  // coil or holding_register
  std::uint16_t start = 0;
  std::uint16_t count = 1;
  bool operator==(const OutputBlock&) const = default;
};

class ProgramError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Program {
  std::string name;
  std::uint8_t unit = 1;
  std::vector<OutputBlock> outputs;
  std::vector<Rung> rungs;
  std::set<std::uint16_t> discrete_inputs;  // referenced by any rung
  std::set<std::uint16_t> input_registers;
  std::set<std::string> timers;
};

// Parses and checks a program against the factory I/O map. Throws
// ProgramError naming the rung for syntax errors, reads of unmapped
// addresses, and writes outside the declared output blocks.
[[nodiscard]] Program load_program(std::string name, std::uint8_t unit, const std::vector<std::string>& rungs,
                                   const std::vector<OutputBlock>& outputs, const factory::IoMap& io);

[[nodiscard]] Expr parse_condition(const std::string& text);  // throws ProgramError

struct Inputs {
  std::map<std::uint16_t, bool> discrete_inputs;
  std::map<std::uint16_t, std::uint16_t> input_registers;
};

struct Outputs {
  std::map<std::uint16_t, bool> coils;
  std::map<std::uint16_t, std::uint16_t> holding_registers;
  bool operator==(const Outputs&) const = default;
};

struct TimerState {
  std::uint16_t accumulated = 0;
  bool done = false;
  bool operator==(const TimerState&) const = default;
};

struct ScanState {
  Outputs outputs;
  std::map<std::string, TimerState> timers;
  bool operator==(const ScanState&) const = default;
};

// Declared outputs zeroed, timers cleared.
[[nodiscard]] ScanState initial_scan_state(const Program& p);

// One pass over the rungs in order. Pure. Missing inputs read as 0.
[[nodiscard]] ScanState scan(const Program& p, const Inputs& in, const ScanState& prev);

// Values of one block in address order.
[[nodiscard]] std::vector<std::uint16_t> block_values(const OutputBlock& b, const Outputs& o);

// The request that writes a block: FC05/06 for one address, FC15/16 otherwise.
[[nodiscard]] modbus::Pdu write_request(const OutputBlock& b, const Outputs& o);

struct CycleStats {
  std::uint64_t cycles = 0;
  std::uint64_t scans = 0;
  std::uint64_t writes = 0;
  std::uint64_t timeouts = 0;
  std::uint64_t reconnects = 0;
};

// A PLC attached to the fabric: polls its inputs from the bridge, scans,
// and writes back only the blocks whose values differ from what the bridge
// last acknowledged. After stale_after consecutive failed cycles it is
// marked stale and keeps its last outputs (nothing is written).
class Runtime {
 public:
  Runtime(Program program, link::ClientSession& session, int stale_after = 3);

  // Returns true when a scan ran this cycle.
  bool run_cycle();

  [[nodiscard]] const Program& program() const { return program_; }
  [[nodiscard]] const ScanState& state() const { return state_; }
  [[nodiscard]] bool stale() const { return missed_ >= stale_after_; }
  [[nodiscard]] int missed() const { return missed_; }
  [[nodiscard]] const CycleStats& stats() const { return stats_; }
  [[nodiscard]] const std::vector<std::optional<std::vector<std::uint16_t>>>& confirmed() const { return confirmed_; }

 private:
  bool fail();
  std::optional<Inputs> read_inputs();

  Program program_;
  link::ClientSession& session_;
  int stale_after_;
  int missed_ = 0;
  ScanState state_;
  std::vector<std::optional<std::vector<std::uint16_t>>> confirmed_;  // per block
  CycleStats stats_;
};

// Local Modbus view of a PLC's output image, served on its own port.
[[nodiscard]] modbus::DataStore image_store(const ScanState& s);

}  // namespace otbed::plc
