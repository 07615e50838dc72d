#include "otbed/plc.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>

namespace otbed::plc {

namespace {

struct Token {
  enum class Kind { word, number, symbol, end };
  Kind kind = Kind::end;
  std::string text;
  long number = 0;
};

std::vector<Token> tokenize(const std::string& s) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const char c = s[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
    } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t j = i;
      while (j < s.size() && (std::isalnum(static_cast<unsigned char>(s[j])) || s[j] == '_')) ++j;
      out.push_back({Token::Kind::word, s.substr(i, j - i), 0});
      i = j;
    } else if (std::isdigit(static_cast<unsigned char>(c)) ||
               (c == '-' && i + 1 < s.size() && std::isdigit(static_cast<unsigned char>(s[i + 1])))) {
      std::size_t j = i + 1;
      while (j < s.size() && std::isalnum(static_cast<unsigned char>(s[j]))) ++j;
      const std::string lit = s.substr(i, j - i);
      long v = 0;
      int base = 10;
      std::string_view digits = lit;
      bool neg = false;
      if (digits.front() == '-') {
        neg = true;
        digits.remove_prefix(1);
      }
      if (digits.size() > 2 && digits[0] == '0' && (digits[1] == 'x' || digits[1] == 'X')) {
        base = 16;
        digits.remove_prefix(2);
      }
      auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v, base);
      if (ec != std::errc{} || p != digits.data() + digits.size()) throw ProgramError("bad number '" + lit + "'");
      out.push_back({Token::Kind::number, lit, neg ? -v : v});
      i = j;
    } else {
      static const char* two[] = {"->", "==", "!=", "<=", ">="};
      bool matched = false;
      for (const char* t : two) {
        if (s.compare(i, 2, t) == 0) {
          out.push_back({Token::Kind::symbol, t, 0});
          i += 2;
          matched = true;
          break;
        }
      }
      if (matched) continue;
      if (std::string("()<>,").find(c) == std::string::npos)
        throw ProgramError(std::string("unexpected character '") + c + "'");
      out.push_back({Token::Kind::symbol, std::string(1, c), 0});
      ++i;
    }
  }
  out.push_back({Token::Kind::end, "", 0});
  return out;
}

std::uint16_t to_u16(long v) {
  if (v < -32768 || v > 65535) throw ProgramError("value " + std::to_string(v) + " does not fit 16 bits");
  return static_cast<std::uint16_t>(v);
}

std::optional<Operand> classify(const std::string& w) {
  auto numbered = [&](const char* prefix, Operand::Kind k) -> std::optional<Operand> {
    const std::size_t n = std::char_traits<char>::length(prefix);
    if (w.size() <= n || w.compare(0, n, prefix) != 0) return std::nullopt;
    unsigned long v = 0;
    auto [p, ec] = std::from_chars(w.data() + n, w.data() + w.size(), v);
    if (ec != std::errc{} || p != w.data() + w.size() || v > 65535) return std::nullopt;
    return Operand{k, static_cast<std::uint16_t>(v), {}};
  };
  if (auto o = numbered("DI", Operand::Kind::discrete_input)) return o;
  if (auto o = numbered("IR", Operand::Kind::input_register)) return o;
  if (auto o = numbered("HR", Operand::Kind::holding_register)) return o;
  if (auto o = numbered("C", Operand::Kind::coil)) return o;
  if (w.size() > 1 && w[0] == 'T') return Operand{Operand::Kind::timer, 0, w};
  return std::nullopt;
}

bool boolean_operand(const Operand& o) {
  return o.kind == Operand::Kind::discrete_input || o.kind == Operand::Kind::coil || o.kind == Operand::Kind::timer;
}

class Parser {
 public:
  explicit Parser(std::vector<Token> t) : t_(std::move(t)) {}

  Expr condition() {
    Expr e = disjunction();
    if (peek().kind != Token::Kind::end) throw ProgramError("unexpected '" + peek().text + "'");
    return e;
  }

 private:
  const Token& peek() const { return t_[pos_]; }
  bool accept_word(const char* w) {
    if (peek().kind == Token::Kind::word && peek().text == w) {
      ++pos_;
      return true;
    }
    return false;
  }
  bool accept_symbol(const char* s) {
    if (peek().kind == Token::Kind::symbol && peek().text == s) {
      ++pos_;
      return true;
    }
    return false;
  }

  Expr disjunction() {
    Expr e = conjunction();
    while (accept_word("or")) e = Expr{Expr::Op::or_, {}, {std::move(e), conjunction()}};
    return e;
  }
  Expr conjunction() {
    Expr e = unary();
    while (accept_word("and")) e = Expr{Expr::Op::and_, {}, {std::move(e), unary()}};
    return e;
  }
  Expr unary() {
    if (accept_word("not")) return Expr{Expr::Op::not_, {}, {unary()}};
    return primary();
  }
  Expr primary() {
    if (accept_symbol("(")) {
      Expr e = disjunction();
      if (!accept_symbol(")")) throw ProgramError("missing ')'");
      return e;
    }
    if (accept_word("true")) return Expr{Expr::Op::operand, Operand{Operand::Kind::literal, 1, {}}, {}};
    if (accept_word("false")) return Expr{Expr::Op::operand, Operand{Operand::Kind::literal, 0, {}}, {}};
    Operand lhs = operand();
    static const std::pair<const char*, Expr::Op> rel[] = {{"==", Expr::Op::eq}, {"!=", Expr::Op::ne},
                                                           {"<=", Expr::Op::le}, {">=", Expr::Op::ge},
                                                           {"<", Expr::Op::lt},  {">", Expr::Op::gt}};
    for (const auto& [sym, op] : rel) {
      if (accept_symbol(sym)) {
        Operand rhs = operand();
        return Expr{op, {}, {Expr{Expr::Op::operand, lhs, {}}, Expr{Expr::Op::operand, rhs, {}}}};
      }
    }
    if (!boolean_operand(lhs)) throw ProgramError("register or number used as a condition");
    return Expr{Expr::Op::operand, lhs, {}};
  }
  Operand operand() {
    const Token& t = peek();
    if (t.kind == Token::Kind::number) {
      ++pos_;
      return Operand{Operand::Kind::literal, to_u16(t.number), {}};
    }
    if (t.kind == Token::Kind::word) {
      if (auto o = classify(t.text)) {
        ++pos_;
        return *o;
      }
      throw ProgramError("unknown operand '" + t.text + "'");
    }
    throw ProgramError(t.kind == Token::Kind::end ? "condition ends early" : "unexpected '" + t.text + "'");
  }

  std::vector<Token> t_;
  std::size_t pos_ = 0;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

std::vector<std::string> split_actions(const std::string& s) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  for (;;) {
    const auto comma = s.find(',', start);
    parts.push_back(trim(s.substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
    if (comma == std::string::npos) return parts;
    start = comma + 1;
  }
}

Action parse_action(const std::string& text) {
  auto toks = tokenize(text);
  toks.pop_back();  // end marker
  if (toks.empty() || toks[0].kind != Token::Kind::word) throw ProgramError("empty action");
  const std::string& verb = toks[0].text;
  auto target = [&](Operand::Kind want, const char* what) {
    if (toks.size() < 2 || toks[1].kind != Token::Kind::word) throw ProgramError(verb + " needs " + what);
    auto o = classify(toks[1].text);
    if (!o || o->kind != want) throw ProgramError(verb + " needs " + what + ", got '" + toks[1].text + "'");
    return *o;
  };
  auto arity = [&](std::size_t n) {
    if (toks.size() != n) throw ProgramError("wrong number of arguments to " + verb);
  };
  Action a;
  if (verb == "out" || verb == "set" || verb == "reset") {
    arity(2);
    a.kind = verb == "out" ? Action::Kind::out : verb == "set" ? Action::Kind::set : Action::Kind::reset;
    a.address = target(Operand::Kind::coil, "a coil").value;
  } else if (verb == "mov") {
    arity(3);
    a.kind = Action::Kind::mov;
    a.address = target(Operand::Kind::holding_register, "a holding register").value;
    if (toks[2].kind != Token::Kind::number) throw ProgramError("mov needs a number");
    a.value = to_u16(toks[2].number);
  } else if (verb == "ton") {
    arity(3);
    a.kind = Action::Kind::ton;
    a.timer = target(Operand::Kind::timer, "a timer").timer;
    if (toks[2].kind != Token::Kind::number || toks[2].number < 1 || toks[2].number > 65535)
      throw ProgramError("ton needs a preset between 1 and 65535");
    a.value = static_cast<std::uint16_t>(toks[2].number);
  } else {
    throw ProgramError("unknown action '" + verb + "'");
  }
  return a;
}

void collect(const Expr& e, std::vector<Operand>& out) {
  if (e.op == Expr::Op::operand) {
    out.push_back(e.leaf);
    return;
  }
  for (const auto& k : e.kids) collect(k, out);
}

bool in_block(const std::vector<OutputBlock>& blocks, Table t, std::uint16_t a) {
  return std::any_of(blocks.begin(), blocks.end(), [&](const OutputBlock& b) {
    return b.table == t && a >= b.start && std::uint32_t(a) < std::uint32_t(b.start) + b.count;
  });
}

std::uint16_t value_of(const Operand& o, const Inputs& in, const ScanState& s) {
  auto lookup = [](const auto& m, std::uint16_t a) {
    auto it = m.find(a);
    return it == m.end() ? decltype(it->second){} : it->second;
  };
  switch (o.kind) {
    case Operand::Kind::literal: return o.value;
    case Operand::Kind::discrete_input: return lookup(in.discrete_inputs, o.value);
    case Operand::Kind::input_register: return lookup(in.input_registers, o.value);
    case Operand::Kind::coil: return lookup(s.outputs.coils, o.value);
    case Operand::Kind::holding_register: return lookup(s.outputs.holding_registers, o.value);
    case Operand::Kind::timer: {
      auto it = s.timers.find(o.timer);
      return it != s.timers.end() && it->second.done;
    }
  }
  return 0;
}

bool eval(const Expr& e, const Inputs& in, const ScanState& s) {
  auto v = [&](std::size_t k) { return value_of(e.kids[k].leaf, in, s); };
  switch (e.op) {
    case Expr::Op::operand: return value_of(e.leaf, in, s) != 0;
    case Expr::Op::not_: return !eval(e.kids[0], in, s);
    case Expr::Op::and_: return eval(e.kids[0], in, s) && eval(e.kids[1], in, s);
    case Expr::Op::or_: return eval(e.kids[0], in, s) || eval(e.kids[1], in, s);
    case Expr::Op::eq: return v(0) == v(1);
    case Expr::Op::ne: return v(0) != v(1);
    case Expr::Op::lt: return v(0) < v(1);
    case Expr::Op::le: return v(0) <= v(1);
    case Expr::Op::gt: return v(0) > v(1);
    case Expr::Op::ge: return v(0) >= v(1);
  }
  return false;
}

}  // namespace

Expr parse_condition(const std::string& text) { return Parser(tokenize(text)).condition(); }

Program load_program(std::string name, std::uint8_t unit, const std::vector<std::string>& rungs,
                     const std::vector<OutputBlock>& outputs, const factory::IoMap& io) {
  Program p;
  p.name = std::move(name);
  p.unit = unit;
  p.outputs = outputs;
  auto fail = [&](std::size_t rung, const std::string& why) {
    throw ProgramError(p.name + " rung " + std::to_string(rung + 1) + ": " + why);
  };

  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const auto& b = outputs[i];
    const std::string label = p.name + " output block " + std::to_string(i + 1);
    if (b.table != Table::coil && b.table != Table::holding_register)
      throw ProgramError(label + ": outputs must be coils or holding registers");
    const auto limit = b.table == Table::coil ? modbus::max_write_bits : modbus::max_write_registers;
    if (b.count == 0 || b.count > limit || std::uint32_t(b.start) + b.count > 65536)
      throw ProgramError(label + ": bad count");
    for (std::uint32_t a = b.start; a < std::uint32_t(b.start) + b.count; ++a) {
      if (!io.mapped({b.table, std::uint16_t(a)}))
        throw ProgramError(label + ": unmapped " + factory::to_string(b.table) + " " + std::to_string(a));
      for (std::size_t j = 0; j < i; ++j)
        if (in_block({outputs[j]}, b.table, std::uint16_t(a)))
          throw ProgramError(label + ": overlaps block " + std::to_string(j + 1));
    }
  }

  std::map<std::string, std::size_t> timer_defs;
  std::vector<std::pair<std::size_t, std::string>> timer_uses;
  for (std::size_t i = 0; i < rungs.size(); ++i) {
    Rung r;
    r.text = rungs[i];
    const auto arrow = r.text.find("->");
    if (arrow == std::string::npos) fail(i, "missing '->'");
    try {
      r.condition = parse_condition(r.text.substr(0, arrow));
      for (const auto& part : split_actions(r.text.substr(arrow + 2))) r.actions.push_back(parse_action(part));
    } catch (const ProgramError& e) {
      fail(i, e.what());
    }

    std::vector<Operand> refs;
    collect(r.condition, refs);
    for (const auto& o : refs) {
      switch (o.kind) {
        case Operand::Kind::discrete_input:
          if (!io.mapped({Table::discrete_input, o.value})) fail(i, "unmapped discrete input " + std::to_string(o.value));
          p.discrete_inputs.insert(o.value);
          break;
        case Operand::Kind::input_register:
          if (!io.mapped({Table::input_register, o.value})) fail(i, "unmapped input register " + std::to_string(o.value));
          p.input_registers.insert(o.value);
          break;
        case Operand::Kind::coil:
          if (!in_block(outputs, Table::coil, o.value)) fail(i, "coil " + std::to_string(o.value) + " is not an output");
          break;
        case Operand::Kind::holding_register:
          if (!in_block(outputs, Table::holding_register, o.value))
            fail(i, "holding register " + std::to_string(o.value) + " is not an output");
          break;
        case Operand::Kind::timer: timer_uses.emplace_back(i, o.timer); break;
        case Operand::Kind::literal: break;
      }
    }
    for (const auto& a : r.actions) {
      if (a.kind == Action::Kind::ton) {
        if (timer_defs.contains(a.timer)) fail(i, "timer " + a.timer + " defined twice");
        timer_defs[a.timer] = i;
        p.timers.insert(a.timer);
      } else {
        const Table t = a.kind == Action::Kind::mov ? Table::holding_register : Table::coil;
        if (!in_block(outputs, t, a.address))
          fail(i, std::string("write to ") + factory::to_string(t) + " " + std::to_string(a.address) +
                      " outside the declared outputs");
      }
    }
    p.rungs.push_back(std::move(r));
  }
  for (const auto& [i, t] : timer_uses)
    if (!timer_defs.contains(t)) fail(i, "timer " + t + " is never started");

  auto span_ok = [](const std::set<std::uint16_t>& s, std::uint16_t limit) {
    return s.empty() || *s.rbegin() - *s.begin() + 1 <= limit;
  };
  if (!span_ok(p.discrete_inputs, modbus::max_read_bits) || !span_ok(p.input_registers, modbus::max_read_registers))
    throw ProgramError(p.name + ": inputs span more than one read request");
  return p;
}

ScanState initial_scan_state(const Program& p) {
  ScanState s;
  for (const auto& b : p.outputs)
    for (std::uint32_t a = b.start; a < std::uint32_t(b.start) + b.count; ++a) {
      if (b.table == Table::coil)
        s.outputs.coils[std::uint16_t(a)] = false;
      else
        s.outputs.holding_registers[std::uint16_t(a)] = 0;
    }
  for (const auto& t : p.timers) s.timers[t] = {};
  return s;
}

ScanState scan(const Program& p, const Inputs& in, const ScanState& prev) {
  ScanState s = prev;
  for (const auto& r : p.rungs) {
    const bool on = eval(r.condition, in, s);
    for (const auto& a : r.actions) {
      switch (a.kind) {
        case Action::Kind::out: s.outputs.coils[a.address] = on; break;
        case Action::Kind::set:
          if (on) s.outputs.coils[a.address] = true;
          break;
        case Action::Kind::reset:
          if (on) s.outputs.coils[a.address] = false;
          break;
        case Action::Kind::mov:
          if (on) s.outputs.holding_registers[a.address] = a.value;
          break;
        case Action::Kind::ton: {
          auto& t = s.timers[a.timer];
          if (on) {
            if (t.accumulated < a.value) ++t.accumulated;
            t.done = t.accumulated >= a.value;
          } else {
            t = {};
          }
          break;
        }
      }
    }
  }
  return s;
}

std::vector<std::uint16_t> block_values(const OutputBlock& b, const Outputs& o) {
  std::vector<std::uint16_t> v;
  for (std::uint32_t a = b.start; a < std::uint32_t(b.start) + b.count; ++a) {
    if (b.table == Table::coil) {
      auto it = o.coils.find(std::uint16_t(a));
      v.push_back(it != o.coils.end() && it->second);
    } else {
      auto it = o.holding_registers.find(std::uint16_t(a));
      v.push_back(it != o.holding_registers.end() ? it->second : 0);
    }
  }
  return v;
}

modbus::Pdu write_request(const OutputBlock& b, const Outputs& o) {
  const auto v = block_values(b, o);
  if (b.table == Table::coil) {
    if (b.count == 1) return modbus::WriteSingleCoil{b.start, v[0] != 0};
    std::vector<bool> bits(v.begin(), v.end());
    return modbus::WriteMultipleCoils{b.start, bits};
  }
  if (b.count == 1) return modbus::WriteSingleRegister{b.start, v[0]};
  return modbus::WriteMultipleRegisters{b.start, v};
}

modbus::DataStore image_store(const ScanState& s) {
  modbus::DataStore d;
  for (const auto& [a, v] : s.outputs.coils)
    if (a < d.coil_count()) d.set_coil(a, v);
  for (const auto& [a, v] : s.outputs.holding_registers)
    if (a < d.holding_register_count()) d.set_holding_register(a, v);
  return d;
}

Runtime::Runtime(Program program, link::ClientSession& session, int stale_after)
    : program_(std::move(program)),
      session_(session),
      stale_after_(stale_after),
      state_(initial_scan_state(program_)),
      confirmed_(program_.outputs.size()) {}

bool Runtime::fail() {
  ++missed_;
  ++stats_.timeouts;
  return false;
}

namespace {

bool echo_matches(const modbus::Pdu& req, const modbus::Pdu& resp) {
  if (std::holds_alternative<modbus::WriteSingleCoil>(req) || std::holds_alternative<modbus::WriteSingleRegister>(req))
    return req == resp;
  const auto* r = std::get_if<modbus::WriteMultipleResponse>(&resp);
  if (!r) return false;
  if (const auto* c = std::get_if<modbus::WriteMultipleCoils>(&req))
    return r->function == modbus::FunctionCode::write_multiple_coils && r->address == c->address &&
           r->count == c->bits.size();
  const auto& w = std::get<modbus::WriteMultipleRegisters>(req);
  return r->function == modbus::FunctionCode::write_multiple_registers && r->address == w.address &&
         r->count == w.values.size();
}

}  // namespace

std::optional<Inputs> Runtime::read_inputs() {
  Inputs in;
  if (!program_.discrete_inputs.empty()) {
    const auto lo = *program_.discrete_inputs.begin();
    const auto n = std::uint16_t(*program_.discrete_inputs.rbegin() - lo + 1);
    auto r = session_.transact(modbus::ReadRequest{modbus::FunctionCode::read_discrete_inputs, lo, n});
    const auto* bits = r ? std::get_if<modbus::ReadBitsResponse>(&*r) : nullptr;
    if (!bits || bits->packed.size() != std::size_t((n + 7) / 8)) return std::nullopt;
    for (auto a : program_.discrete_inputs) in.discrete_inputs[a] = bits->bit(a - lo);
  }
  if (!program_.input_registers.empty()) {
    const auto lo = *program_.input_registers.begin();
    const auto n = std::uint16_t(*program_.input_registers.rbegin() - lo + 1);
    auto r = session_.transact(modbus::ReadRequest{modbus::FunctionCode::read_input_registers, lo, n});
    const auto* regs = r ? std::get_if<modbus::ReadRegistersResponse>(&*r) : nullptr;
    if (!regs || regs->values.size() != n) return std::nullopt;
    for (auto a : program_.input_registers) in.input_registers[a] = regs->values[a - lo];
  }
  return in;
}

bool Runtime::run_cycle() {
  ++stats_.cycles;
  if (!session_.connected()) {
    ++stats_.reconnects;
    if (!session_.connect()) return fail();
  }
  auto in = read_inputs();
  if (!in) {
    session_.drop();
    return fail();
  }
  state_ = scan(program_, *in, state_);
  ++stats_.scans;
  for (std::size_t i = 0; i < program_.outputs.size(); ++i) {
    const auto& b = program_.outputs[i];
    auto values = block_values(b, state_.outputs);
    if (confirmed_[i] == values) continue;
    const auto req = write_request(b, state_.outputs);
    auto resp = session_.transact(req);
    if (!resp || !echo_matches(req, *resp)) {
      session_.drop();
      fail();
      return true;
    }
    confirmed_[i] = std::move(values);
    ++stats_.writes;
  }
  missed_ = 0;
  return true;
}

}  // namespace otbed::plc
