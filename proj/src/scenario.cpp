#include "otbed/scenario.hpp"

#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace otbed::scenario {

using nlohmann::json;

namespace {

std::string join(const std::vector<std::string>& errs) {
  std::string s = "invalid scenario:";
  for (const auto& e : errs) s += "\n  " + e;
  return s;
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> errors) : std::runtime_error(join(errors)), errors_(std::move(errors)) {}

fabric::Bytes parse_hex(const std::string& s) {
  fabric::Bytes out;
  std::string digits;
  for (char c : s) {
    if (c == ' ' || c == ':' || c == '_') continue;
    if (!std::isxdigit(static_cast<unsigned char>(c))) throw std::invalid_argument("bad hex digit in '" + s + "'");
    digits += c;
  }
  if (digits.size() % 2) throw std::invalid_argument("odd number of hex digits in '" + s + "'");
  for (std::size_t i = 0; i < digits.size(); i += 2)
    out.push_back(static_cast<std::uint8_t>(std::stoi(digits.substr(i, 2), nullptr, 16)));
  return out;
}

std::string format_hex(const fabric::Bytes& b) {
  std::string s;
  char buf[4];
  for (std::size_t i = 0; i < b.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%02X", b[i]);
    if (i) s += ' ';
    s += buf;
  }
  return s;
}

std::vector<PlcSpec> default_plcs() {
  using factory::Table;
  const auto ip = [](const char* s) { return fabric::parse_ip(s); };
  return {
      {"infeed", 1, ip("192.168.1.21"), 5, 1, 3,
       {{Table::holding_register, 100, 1}, {Table::coil, 10, 1}, {Table::coil, 40, 3}},
       {
           "true -> mov HR100 250",
           "not DI0 -> out C10",
           "DI0 -> out C40",
           "not DI0 -> out C42",
           "DI0 -> mov HR100 0",
       }},
      {"sorting", 2, ip("192.168.1.22"), 5, 2, 3,
       {{Table::holding_register, 110, 4}},
       {
           "true -> mov HR110 0, mov HR111 250, mov HR112 250, mov HR113 250",
           "DI10 and not DI11 -> mov HR110 50, mov HR111 0, mov HR112 0",
           "not DI10 and not DI12 -> mov HR110 -50",
           "DI0 -> mov HR110 0, mov HR111 0, mov HR112 0, mov HR113 0",
       }},
      {"combine", 3, ip("192.168.1.23"), 5, 3, 3,
       {{Table::coil, 33, 1}, {Table::coil, 34, 1}},
       {
           "DI20 -> set C33",
           "DI21 and C33 -> set C34",
           "DI22 -> reset C33",
           "DI23 -> reset C34",
       }},
      {"palletize", 4, ip("192.168.1.24"), 5, 4, 3,
       {{Table::holding_register, 130, 1}, {Table::coil, 50, 1}},
       {
           "true -> mov HR130 250",
           "DI30 and not T2 -> ton T1 3",
           "T1 -> ton T2 3",
           "T1 and not T2 -> out C50",
           "DI0 -> mov HR130 0",
       }},
  };
}

ScenarioConfig default_config() {
  ScenarioConfig c;
  c.network.factory = fabric::parse_ip("192.168.1.10");
  c.network.bridge = fabric::parse_ip("192.168.1.62");
  c.network.attacker = fabric::parse_ip("192.168.1.66");
  c.plcs = default_plcs();
  // every tick keeps the factory's transaction ids cycling through the full
  // range inside the training window; k = 5 leaves a band of them outside
  // the threshold, 6..8 do not
  c.factory_poll = 1;
  c.monitor.fit.k = 8;
  c.monitor.fit.restarts = 10;
  c.factory.seed = c.seed;
  c.factory.tick_ms = c.tick_ms;
  return c;
}

namespace {

using Errors = std::vector<std::string>;

template <class T>
bool as_int(const json& v, T& out) {
  if (!v.is_number_integer()) return false;
  if (v.is_number_unsigned()) {
    const auto u = v.get<std::uint64_t>();
    if (u > static_cast<std::uint64_t>(std::numeric_limits<T>::max())) return false;
    out = static_cast<T>(u);
    return true;
  }
  const auto i = v.get<std::int64_t>();
  if constexpr (std::is_unsigned_v<T>) {
    if (i < 0) return false;
    if (static_cast<std::uint64_t>(i) > static_cast<std::uint64_t>(std::numeric_limits<T>::max())) return false;
  } else {
    if (i < std::numeric_limits<T>::min() || i > std::numeric_limits<T>::max()) return false;
  }
  out = static_cast<T>(i);
  return true;
}

// Object reader that remembers which keys were consumed; whatever is left
// is reported as unknown.
class Obj {
 public:
  Obj(const json& j, std::string path, Errors& errs) : j_(j), path_(std::move(path)), errs_(errs) {
    ok_ = j.is_object();
    if (!ok_) errs_.push_back(where() + ": expected an object");
  }
  Obj(const Obj&) = delete;
  ~Obj() {
    if (!ok_) return;
    for (const auto& [k, v] : j_.items())
      if (!seen_.contains(k)) errs_.push_back(path_ + (path_.empty() ? "" : ".") + k + ": unknown key");
  }

  [[nodiscard]] bool ok() const { return ok_; }
  [[nodiscard]] std::string at(const std::string& key) const { return path_ + (path_.empty() ? "" : ".") + key; }

  const json* find(const std::string& key) {
    if (!ok_) return nullptr;
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  template <class T>
  void integer(const std::string& key, T& out) {
    if (const json* v = find(key); v && !as_int(*v, out))
      errs_.push_back(at(key) + ": expected an integer in range");
  }
  void number(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (v->is_number())
        out = v->get<double>();
      else
        errs_.push_back(at(key) + ": expected a number");
    }
  }
  void boolean(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (v->is_boolean())
        out = v->get<bool>();
      else
        errs_.push_back(at(key) + ": expected true or false");
    }
  }
  void string(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (v->is_string())
        out = v->get<std::string>();
      else
        errs_.push_back(at(key) + ": expected a string");
    }
  }
  void ip(const std::string& key, fabric::Ipv4& out) {
    std::string s;
    const bool present = j_.is_object() && j_.contains(key);
    string(key, s);
    if (!present || s.empty()) return;
    try {
      out = fabric::parse_ip(s);
    } catch (const std::exception&) {
      errs_.push_back(at(key) + ": not a dotted IPv4 address: " + s);
    }
  }
  void hex(const std::string& key, fabric::Bytes& out) {
    std::string s;
    const bool present = j_.is_object() && j_.contains(key);
    string(key, s);
    if (!present) return;
    try {
      out = parse_hex(s);
    } catch (const std::exception& e) {
      errs_.push_back(at(key) + ": " + e.what());
    }
  }
  const json* array(const std::string& key) {
    const json* v = find(key);
    if (v && !v->is_array()) {
      errs_.push_back(at(key) + ": expected an array");
      return nullptr;
    }
    return v;
  }

  Errors& errors() { return errs_; }

 private:
  std::string where() const { return path_.empty() ? "scenario" : path_; }

  const json& j_;
  std::string path_;
  Errors& errs_;
  std::set<std::string> seen_;
  bool ok_ = false;
};

void read_rules(const json& arr, const std::string& path, std::vector<attacks::FilterRule>& out, Errors& errs) {
  out.clear();
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string p = path + "[" + std::to_string(i) + "]";
    Obj o(arr[i], p, errs);
    if (!o.ok()) continue;
    attacks::FilterRule r;
    o.integer("dst_port", r.dst_port);
    o.hex("trigger", r.trigger);
    if (const json* reps = o.array("replacements")) {
      for (std::size_t k = 0; k < reps->size(); ++k) {
        Obj ro((*reps)[k], p + ".replacements[" + std::to_string(k) + "]", errs);
        attacks::Replacement rep;
        ro.hex("search", rep.search);
        ro.hex("replace", rep.replace);
        r.replacements.push_back(std::move(rep));
      }
    }
    out.push_back(std::move(r));
  }
}

std::optional<attacks::ScheduledAttack> read_attack(const json& j, const std::string& path, Errors& errs,
                                                    fabric::Tick default_start) {
  Obj o(j, path, errs);
  if (!o.ok()) return std::nullopt;
  attacks::ScheduledAttack a;
  a.start = default_start;
  o.integer("start", a.start);
  std::string kind;
  o.string("kind", kind);
  if (kind == "recon") {
    attacks::Recon r;
    r.network = fabric::parse_ip("192.168.1.0");
    o.ip("network", r.network);
    o.integer("prefix", r.prefix);
    o.integer("port", r.port);
    a.spec = r;
  } else if (kind == "syn_flood") {
    attacks::SynFlood f;
    o.ip("target", f.target);
    o.integer("port", f.port);
    o.integer("rate", f.rate);
    o.integer("payload_len", f.payload_len);
    o.integer("duration", f.duration);
    a.spec = f;
  } else if (kind == "coil_forgery") {
    attacks::CoilForgery f;
    o.ip("target", f.target);
    o.integer("port", f.port);
    o.integer("unit", f.unit);
    std::uint8_t fn = 5;
    o.integer("function", fn);
    f.function = static_cast<modbus::FunctionCode>(fn);
    o.integer("address", f.address);
    if (const json* vals = o.array("values")) {
      f.values.clear();
      for (const auto& v : *vals) {
        if (v.is_boolean())
          f.values.push_back(v.get<bool>());
        else if (v.is_number_integer() && (v.get<std::int64_t>() == 0 || v.get<std::int64_t>() == 1))
          f.values.push_back(v.get<std::int64_t>() == 1);
        else
          errs.push_back(o.at("values") + ": coil values are true/false or 0/1");
      }
    }
    a.spec = f;
  } else if (kind == "mitm") {
    attacks::MitmFilter m;
    o.ip("victim_a", m.victim_a);
    o.ip("victim_b", m.victim_b);
    o.integer("duration", m.duration);
    if (const json* rules = o.array("rules")) read_rules(*rules, o.at("rules"), m.rules, errs);
    a.spec = m;
  } else {
    errs.push_back(o.at("kind") + ": unknown attack kind '" + kind + "' (recon, syn_flood, coil_forgery, mitm)");
    // swallow the remaining keys so the error list stays about the kind
    for (const auto& [k, v] : j.items()) (void)o.find(k);
    return std::nullopt;
  }
  return a;
}

void read_io(const json& j, const std::string& path, factory::IoMap& io, Errors& errs) {
  Obj o(j, path, errs);
  if (!o.ok()) return;
  factory::IoMap m;
  for (const auto& [role, v] : j.items()) {
    (void)o.find(role);
    Obj e(v, path + "." + role, errs);
    if (!e.ok()) continue;
    std::string table;
    std::uint16_t address = 0;
    e.string("table", table);
    e.integer("address", address);
    const auto t = factory::table_from_string(table);
    if (!t) {
      errs.push_back(e.at("table") + ": unknown table '" + table + "'");
      continue;
    }
    try {
      m.bind(role, {*t, address});
    } catch (const std::exception& ex) {
      errs.push_back(path + "." + role + ": " + ex.what());
    }
  }
  io = std::move(m);
}

void read_plcs(const json& arr, const std::string& path, std::vector<PlcSpec>& out, Errors& errs) {
  out.clear();
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string p = path + "[" + std::to_string(i) + "]";
    Obj o(arr[i], p, errs);
    if (!o.ok()) continue;
    PlcSpec s;
    s.phase = 0;
    o.string("name", s.name);
    o.integer("unit", s.unit);
    o.ip("ip", s.ip);
    o.integer("period", s.period);
    o.integer("phase", s.phase);
    o.integer("stale_after", s.stale_after);
    if (const json* outs = o.array("outputs")) {
      for (std::size_t k = 0; k < outs->size(); ++k) {
        Obj b((*outs)[k], p + ".outputs[" + std::to_string(k) + "]", errs);
        std::string table;
        plc::OutputBlock blk;
        b.string("table", table);
        b.integer("start", blk.start);
        b.integer("count", blk.count);
        if (const auto t = factory::table_from_string(table))
          blk.table = *t;
        else
          errs.push_back(b.at("table") + ": unknown table '" + table + "'");
        s.outputs.push_back(blk);
      }
    }
    if (const json* rungs = o.array("rungs")) {
      for (const auto& r : *rungs) {
        if (r.is_string())
          s.rungs.push_back(r.get<std::string>());
        else
          errs.push_back(o.at("rungs") + ": rungs are strings");
      }
    }
    if (s.name.empty()) errs.push_back(p + ".name: required");
    if (s.ip == 0) errs.push_back(p + ".ip: required");
    out.push_back(std::move(s));
  }
}

void read_monitor(const json& j, const std::string& path, monitor::DetectorConfig& m, Errors& errs) {
  Obj o(j, path, errs);
  std::string schema = monitor::to_string(m.schema);
  o.string("schema", schema);
  if (const auto s = monitor::schema_from_string(schema))
    m.schema = *s;
  else
    errs.push_back(o.at("schema") + ": expected full10 or subset4");
  o.integer("k", m.fit.k);
  o.integer("seed", m.fit.seed);
  o.integer("max_iter", m.fit.max_iter);
  o.number("tol", m.fit.tol);
  o.integer("restarts", m.fit.restarts);
  o.number("sigmas", m.sigmas);
  o.number("train_split", m.train_split);
  if (const json* e = o.find("ewma")) {
    Obj eo(*e, o.at("ewma"), errs);
    eo.number("alpha", m.ewma.alpha);
    eo.number("sigmas", m.ewma.sigmas);
    eo.number("sigma_floor", m.ewma.sigma_floor);
    eo.integer("warmup", m.ewma.warmup);
  }
}

}  // namespace

attacks::ScheduledAttack attack_from_json(const json& j, fabric::Tick default_start) {
  Errors errs;
  std::optional<attacks::ScheduledAttack> a;
  {
    a = read_attack(j, "attack", errs, default_start);
  }
  if (a) {
    try {
      if (const auto* m = std::get_if<attacks::MitmFilter>(&a->spec))
        for (const auto& r : m->rules) attacks::validate(r);
      if (const auto* f = std::get_if<attacks::CoilForgery>(&a->spec)) (void)attacks::forgery_request(*f);
    } catch (const std::exception& e) {
      errs.push_back(std::string("attack: ") + e.what());
    }
  }
  if (!errs.empty() || !a) throw ConfigError(errs.empty() ? Errors{"attack: invalid"} : errs);
  return *a;
}

ScenarioConfig load_config(const json& j) {
  ScenarioConfig c = default_config();
  Errors errs;
  {
    Obj o(j, "", errs);
    o.integer("seed", c.seed);
    o.integer("tick_ms", c.tick_ms);
    o.integer("duration", c.duration);
    if (const json* n = o.find("network")) {
      Obj no(*n, "network", errs);
      no.ip("factory", c.network.factory);
      no.ip("bridge", c.network.bridge);
      no.ip("attacker", c.network.attacker);
      no.integer("prefix", c.network.prefix);
    }
    if (const json* f = o.find("fabric")) {
      Obj fo(*f, "fabric", errs);
      fo.integer("latency_subticks", c.fabric.latency_subticks);
      fo.integer("backlog", c.fabric.backlog);
      fo.integer("accept_budget", c.fabric.accept_budget);
      fo.integer("syn_rcvd_timeout", c.fabric.syn_rcvd_timeout);
      fo.integer("rx_budget", c.fabric.rx_budget);
    }
    if (const json* f = o.find("factory")) {
      Obj fo(*f, "factory", errs);
      fo.integer("poll_period", c.factory_poll);
      fo.number("conveyor_length_mm", c.factory.conveyor_length_mm);
      fo.integer("spawn_period", c.factory.spawn_period);
      fo.integer("spawn_jitter", c.factory.spawn_jitter);
      fo.number("divert_window_start_mm", c.factory.divert_window_start_mm);
      fo.number("arm_travel_mm", c.factory.arm_travel_mm);
      fo.integer("crane_grab_ticks", c.factory.crane_grab_ticks);
      fo.integer("crane_rotate_ticks", c.factory.crane_rotate_ticks);
      fo.integer("crane_return_ticks", c.factory.crane_return_ticks);
      fo.integer("metrics_window", c.factory.metrics_window);
      if (const json* io = fo.find("io")) read_io(*io, "factory.io", c.factory.io, errs);
    }
    if (const json* b = o.find("bridge")) {
      Obj bo(*b, "bridge", errs);
      bo.boolean("enforce_ownership", c.enforce_ownership);
      bo.integer("table_size", c.table_size);
    }
    if (const json* p = o.array("plcs")) read_plcs(*p, "plcs", c.plcs, errs);
    if (const json* a = o.array("attacks")) {
      for (std::size_t i = 0; i < a->size(); ++i)
        if (auto at = read_attack((*a)[i], "attacks[" + std::to_string(i) + "]", errs, 0)) c.attacks.push_back(*at);
    }
    if (const json* m = o.find("monitor")) read_monitor(*m, "monitor", c.monitor, errs);
    o.integer("snapshot_period", c.snapshot_period);
    o.integer("sample_period", c.sample_period);
    if (const json* out = o.find("outputs")) {
      Obj oo(*out, "outputs", errs);
      oo.string("pcap", c.outputs.pcap);
      oo.string("report", c.outputs.report);
      oo.string("labels", c.outputs.labels);
      oo.string("alerts", c.outputs.alerts);
    }
  }
  c.factory.seed = c.seed;
  c.factory.tick_ms = c.tick_ms;
  // fields that failed to parse kept their defaults, so this is safe
  auto more = validate(c);
  errs.insert(errs.end(), more.begin(), more.end());
  if (!errs.empty()) throw ConfigError(std::move(errs));
  return c;
}

ScenarioConfig load_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError({std::string("not valid JSON: ") + e.what()});
  }
  return load_config(j);
}

ScenarioConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot read scenario file " + path});
  std::stringstream ss;
  ss << in.rdbuf();
  return load_config(ss.str());
}

std::vector<std::string> validate(const ScenarioConfig& c) {
  Errors errs;
  if (c.duration == 0) errs.push_back("duration: must be at least 1 tick");
  if (c.tick_ms == 0) errs.push_back("tick_ms: must be positive");
  if (c.factory_poll == 0) errs.push_back("factory.poll_period: must be at least 1");
  if (c.snapshot_period == 0) errs.push_back("snapshot_period: must be at least 1");
  if (c.sample_period == 0) errs.push_back("sample_period: must be at least 1");
  if (c.network.prefix < 0 || c.network.prefix > 32) errs.push_back("network.prefix: 0..32");
  for (const auto& e : c.factory.io.validate()) errs.push_back("factory.io: " + e);
  if (c.monitor.fit.k == 0) errs.push_back("monitor.k: must be at least 1");
  if (!(c.monitor.train_split > 0 && c.monitor.train_split < 1)) errs.push_back("monitor.train_split: must be in (0, 1)");
  if (c.monitor.fit.max_iter < 1) errs.push_back("monitor.max_iter: must be at least 1");
  if (c.monitor.fit.restarts < 1) errs.push_back("monitor.restarts: must be at least 1");

  std::map<fabric::Ipv4, std::string> hosts{{c.network.factory, "factory"}};
  auto claim = [&](fabric::Ipv4 ip, const std::string& who) {
    auto [it, fresh] = hosts.emplace(ip, who);
    if (!fresh) errs.push_back(who + ": address " + fabric::format_ip(ip) + " already used by " + it->second);
  };
  claim(c.network.bridge, "network.bridge");
  claim(c.network.attacker, "network.attacker");

  std::set<std::string> names;
  std::set<int> units;
  std::vector<std::pair<std::string, plc::OutputBlock>> blocks;
  const bool io_ok = c.factory.io.validate().empty();
  for (std::size_t i = 0; i < c.plcs.size(); ++i) {
    const auto& p = c.plcs[i];
    const std::string where = "plcs[" + std::to_string(i) + "] (" + p.name + ")";
    if (!names.insert(p.name).second) errs.push_back(where + ": duplicate name");
    if (!units.insert(p.unit).second) errs.push_back(where + ": duplicate unit id " + std::to_string(p.unit));
    claim(p.ip, where);
    if (p.period == 0) errs.push_back(where + ": period must be at least 1");
    else if (p.phase >= p.period) errs.push_back(where + ": phase must be below period");
    if (p.stale_after < 1) errs.push_back(where + ": stale_after must be at least 1");
    if (io_ok) {
      try {
        (void)plc::load_program(p.name, p.unit, p.rungs, p.outputs, c.factory.io);
      } catch (const std::exception& e) {
        errs.push_back(where + ": " + e.what());
      }
    }
    for (const auto& b : p.outputs) {
      for (const auto& [other, ob] : blocks)
        if (ob.table == b.table && b.start < ob.start + ob.count && ob.start < b.start + b.count)
          errs.push_back(where + ": output block at " + std::to_string(b.start) + " overlaps one owned by " + other);
      blocks.emplace_back(p.name, b);
    }
  }

  for (std::size_t i = 0; i < c.attacks.size(); ++i) {
    const auto& a = c.attacks[i];
    const std::string where = std::string("attacks[") + std::to_string(i) + "] (" + attacks::kind_name(a.spec) + ")";
    if (a.start == 0) errs.push_back(where + ": start must be at least 1 (tick 0 is the initial state)");
    if (a.start >= c.duration)
      errs.push_back(where + ": start " + std::to_string(a.start) + " is not before duration " + std::to_string(c.duration));
    try {
      if (const auto* m = std::get_if<attacks::MitmFilter>(&a.spec)) {
        for (const auto& r : m->rules) attacks::validate(r);
        if (!hosts.contains(m->victim_a) || !hosts.contains(m->victim_b) || m->victim_a == m->victim_b)
          errs.push_back(where + ": victims must be two distinct testbed hosts");
        if (m->victim_a == c.network.attacker || m->victim_b == c.network.attacker)
          errs.push_back(where + ": the attacker cannot be a victim");
      }
      if (const auto* f = std::get_if<attacks::CoilForgery>(&a.spec)) (void)attacks::forgery_request(*f);
      if (const auto* f = std::get_if<attacks::SynFlood>(&a.spec); f && f->rate == 0)
        errs.push_back(where + ": rate must be positive");
      if (const auto* r = std::get_if<attacks::Recon>(&a.spec); r && (r->prefix < 16 || r->prefix > 32))
        errs.push_back(where + ": prefix must be 16..32");
    } catch (const std::exception& e) {
      errs.push_back(where + ": " + e.what());
    }
  }
  return errs;
}

json attack_to_json(const attacks::ScheduledAttack& a) {
  json j;
  j["start"] = a.start;
  j["kind"] = attacks::kind_name(a.spec);
  std::visit(
      [&](const auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, attacks::Recon>) {
          j["network"] = fabric::format_ip(s.network);
          j["prefix"] = s.prefix;
          j["port"] = s.port;
        } else if constexpr (std::is_same_v<T, attacks::SynFlood>) {
          j["target"] = fabric::format_ip(s.target);
          j["port"] = s.port;
          j["rate"] = s.rate;
          j["payload_len"] = s.payload_len;
          j["duration"] = s.duration;
        } else if constexpr (std::is_same_v<T, attacks::CoilForgery>) {
          j["target"] = fabric::format_ip(s.target);
          j["port"] = s.port;
          j["unit"] = s.unit;
          j["function"] = static_cast<int>(s.function);
          j["address"] = s.address;
          j["values"] = s.values;
        } else {
          j["victim_a"] = fabric::format_ip(s.victim_a);
          j["victim_b"] = fabric::format_ip(s.victim_b);
          j["duration"] = s.duration;
          json rules = json::array();
          for (const auto& r : s.rules) {
            json rj{{"dst_port", r.dst_port}, {"trigger", format_hex(r.trigger)}};
            rj["replacements"] = json::array();
            for (const auto& rep : r.replacements)
              rj["replacements"].push_back({{"search", format_hex(rep.search)}, {"replace", format_hex(rep.replace)}});
            rules.push_back(rj);
          }
          j["rules"] = rules;
        }
      },
      a.spec);
  return j;
}

json to_json(const ScenarioConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["tick_ms"] = c.tick_ms;
  j["duration"] = c.duration;
  j["network"] = {{"factory", fabric::format_ip(c.network.factory)},
                  {"bridge", fabric::format_ip(c.network.bridge)},
                  {"attacker", fabric::format_ip(c.network.attacker)},
                  {"prefix", c.network.prefix}};
  j["fabric"] = {{"latency_subticks", c.fabric.latency_subticks},
                 {"backlog", c.fabric.backlog},
                 {"accept_budget", c.fabric.accept_budget},
                 {"syn_rcvd_timeout", c.fabric.syn_rcvd_timeout},
                 {"rx_budget", c.fabric.rx_budget}};
  json io = json::object();
  for (const auto& [role, where] : c.factory.io.roles())
    io[role] = {{"table", factory::to_string(where.table)}, {"address", where.address}};
  j["factory"] = {{"poll_period", c.factory_poll},
                  {"conveyor_length_mm", c.factory.conveyor_length_mm},
                  {"spawn_period", c.factory.spawn_period},
                  {"spawn_jitter", c.factory.spawn_jitter},
                  {"divert_window_start_mm", c.factory.divert_window_start_mm},
                  {"arm_travel_mm", c.factory.arm_travel_mm},
                  {"crane_grab_ticks", c.factory.crane_grab_ticks},
                  {"crane_rotate_ticks", c.factory.crane_rotate_ticks},
                  {"crane_return_ticks", c.factory.crane_return_ticks},
                  {"metrics_window", c.factory.metrics_window},
                  {"io", io}};
  j["bridge"] = {{"enforce_ownership", c.enforce_ownership}, {"table_size", c.table_size}};
  j["plcs"] = json::array();
  for (const auto& p : c.plcs) {
    json outs = json::array();
    for (const auto& b : p.outputs)
      outs.push_back({{"table", factory::to_string(b.table)}, {"start", b.start}, {"count", b.count}});
    j["plcs"].push_back({{"name", p.name},
                         {"unit", p.unit},
                         {"ip", fabric::format_ip(p.ip)},
                         {"period", p.period},
                         {"phase", p.phase},
                         {"stale_after", p.stale_after},
                         {"outputs", outs},
                         {"rungs", p.rungs}});
  }
  j["attacks"] = json::array();
  for (const auto& a : c.attacks) j["attacks"].push_back(attack_to_json(a));
  const auto& m = c.monitor;
  j["monitor"] = {{"schema", monitor::to_string(m.schema)},
                  {"k", m.fit.k},
                  {"seed", m.fit.seed},
                  {"max_iter", m.fit.max_iter},
                  {"tol", m.fit.tol},
                  {"restarts", m.fit.restarts},
                  {"sigmas", m.sigmas},
                  {"train_split", m.train_split},
                  {"ewma",
                   {{"alpha", m.ewma.alpha},
                    {"sigmas", m.ewma.sigmas},
                    {"sigma_floor", m.ewma.sigma_floor},
                    {"warmup", m.ewma.warmup}}}};
  j["snapshot_period"] = c.snapshot_period;
  j["sample_period"] = c.sample_period;
  j["outputs"] = {{"pcap", c.outputs.pcap},
                  {"report", c.outputs.report},
                  {"labels", c.outputs.labels},
                  {"alerts", c.outputs.alerts}};
  return j;
}

std::string digest(const json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_digest(const ScenarioConfig& cfg) {
  auto j = to_json(cfg);
  j.erase("outputs");  // where artifacts go does not change what happens
  return digest(j);
}

}  // namespace otbed::scenario
