#include "otbed/simulation.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <random>
#include <sstream>

#include "otbed/pcap.hpp"

namespace otbed::sim {

using nlohmann::json;

namespace {

fabric::NodeConfig host(std::string name, fabric::Ipv4 ip) {
  fabric::NodeConfig c;
  c.name = std::move(name);
  c.ip = ip;
  return c;
}

}  // namespace

struct Simulation::PlcNode {
  scenario::PlcSpec spec;
  fabric::NodeId node = 0;
  std::unique_ptr<link::Host> host;
  std::unique_ptr<plc::Runtime> runtime;
};

Simulation::Simulation(scenario::ScenarioConfig cfg) : cfg_(std::move(cfg)), fab_(cfg_.fabric) {
  if (auto errs = scenario::validate(cfg_); !errs.empty()) throw scenario::ConfigError(std::move(errs));
  cfg_.factory.seed = cfg_.seed;
  cfg_.factory.tick_ms = cfg_.tick_ms;
  const auto& net = cfg_.network;

  factory_node_ = fab_.attach(host("factory", net.factory));
  bridge_node_ = fab_.attach(host("bridge", net.bridge));

  bridge::BridgeConfig bc;
  bc.factory_ip = net.factory;
  bc.enforce_ownership = cfg_.enforce_ownership;
  bc.table_size = cfg_.table_size;
  for (const auto& p : cfg_.plcs) bc.owners[p.ip] = p.outputs;
  bridge_ = std::make_unique<bridge::Bridge>(bc);
  bridge_host_ = std::make_unique<link::Host>(fab_, bridge_node_);
  bridge_host_->serve(502, [this](fabric::ConnId, fabric::Ipv4 peer, const modbus::Frame& f) {
    return std::optional<modbus::Pdu>(bridge_->route(peer, f.pdu));
  });

  factory_host_ = std::make_unique<link::Host>(fab_, factory_node_);
  factory_session_ = &factory_host_->open(net.bridge, 502, 0);

  auto specs = cfg_.plcs;
  std::sort(specs.begin(), specs.end(), [](const auto& a, const auto& b) { return a.unit < b.unit; });
  for (auto& s : specs) {
    auto n = std::make_unique<PlcNode>();
    n->spec = s;
    n->node = fab_.attach(host(s.name, s.ip));
    n->host = std::make_unique<link::Host>(fab_, n->node);
    auto program = plc::load_program(s.name, s.unit, s.rungs, s.outputs, cfg_.factory.io);
    auto& session = n->host->open(net.bridge, 502, s.unit);
    n->runtime = std::make_unique<plc::Runtime>(std::move(program), session, s.stale_after);
    // Serves a read view of its output image, as a real PLC answers on 502.
    plc::Runtime* rt = n->runtime.get();
    n->host->serve(502, [rt](fabric::ConnId, fabric::Ipv4, const modbus::Frame& f) {
      auto view = plc::image_store(rt->state());
      return std::optional<modbus::Pdu>(modbus::apply_request(view, f.pdu));
    });
    plcs_.push_back(std::move(n));
  }
  plc_stale_ticks_.assign(plcs_.size(), 0);

  std::mt19937_64 rng(cfg_.seed ^ 0x5eed0a77ac4e5ULL);
  auto ac = host("attacker", net.attacker);
  ac.ephemeral_base = static_cast<std::uint16_t>(32768 + rng() % (60999 - 32768 + 1));
  ac.rx_budget = std::size_t(1) << 20;
  ac.attacker = true;
  attacker_node_ = fab_.attach(ac);
  attacker_ = std::make_unique<attacks::Attacker>(fab_, attacker_node_, cfg_.seed);
  for (const auto& a : cfg_.attacks) attacker_->schedule(a);

  monitor_ = std::make_unique<monitor::Monitor>(cfg_.monitor, 1, cfg_.duration, tick_us());
  fab_.set_capture_enabled(true);
  fab_.set_mirror([this](const fabric::Packet& p, bool malicious) { monitor_->ingest(p, malicious); });

  state_ = factory::initial_state(cfg_.factory);
  actuators_ = modbus::DataStore(cfg_.table_size);
}

Simulation::~Simulation() = default;

const plc::Runtime& Simulation::plc(const std::string& name) const {
  for (const auto& n : plcs_)
    if (n->spec.name == name) return *n->runtime;
  throw std::out_of_range("no PLC named " + name);
}

void Simulation::poll_actuators() {
  auto& s = *factory_session_;
  ++link_stats_.polls;
  if (!s.connected() && !s.connect()) {
    ++link_stats_.failures;
    return;
  }
  const auto& io = cfg_.factory.io;
  using factory::Table;
  bool ok = true;
  if (const auto lo = io.lowest(Table::coil)) {
    const auto n = static_cast<std::uint16_t>(io.extent(Table::coil) - *lo);
    const auto r = s.transact(modbus::ReadRequest{modbus::FunctionCode::read_coils, *lo, n});
    if (const auto* bits = r ? std::get_if<modbus::ReadBitsResponse>(&*r) : nullptr) {
      for (std::uint16_t i = 0; i < n; ++i) actuators_.set_coil(*lo + i, bits->bit(i));
    } else {
      ok = false;
    }
  }
  if (const auto lo = io.lowest(Table::holding_register)) {
    const auto n = static_cast<std::uint16_t>(io.extent(Table::holding_register) - *lo);
    const auto r = s.transact(modbus::ReadRequest{modbus::FunctionCode::read_holding_registers, *lo, n});
    const auto* regs = r ? std::get_if<modbus::ReadRegistersResponse>(&*r) : nullptr;
    if (regs && regs->values.size() == n) {
      for (std::uint16_t i = 0; i < n; ++i) actuators_.set_holding_register(*lo + i, regs->values[i]);
    } else {
      ok = false;
    }
  }
  // the factory keeps running on the last values it saw
  if (!ok) ++link_stats_.failures;
}

void Simulation::write_sensors() {
  auto& s = *factory_session_;
  if (!s.connected()) return;
  const auto t = factory::read_sensors(state_, cfg_.factory);
  bool ok = true;
  if (!t.discrete_inputs.empty()) ok = s.transact(modbus::WriteMultipleCoils{0, t.discrete_inputs}).has_value();
  if (!t.input_registers.empty())
    ok = s.transact(modbus::WriteMultipleRegisters{0, t.input_registers}).has_value() && ok;
  if (!ok) ++link_stats_.failures;
}

void Simulation::take_sample() {
  Sample s;
  s.tick = tick_;
  s.metrics = factory::production_metrics(state_, cfg_.factory);
  for (std::size_t i = 0; i < factory::conveyor_count; ++i) s.speeds[i] = state_.conveyors[i].speed;
  samples_.push_back(s);
}

void Simulation::collect_alerts() {
  const auto& found = monitor_->alerts();
  const auto& packets = fab_.capture().packets;
  for (std::size_t i = alerts_.size(); i < found.size(); ++i) {
    AlertRecord r;
    r.id = i + 1;
    r.packet = found[i].packet;
    r.tick = r.packet < packets.size() ? packets[r.packet].ts.tick : tick_;
    r.detector = found[i].detector;
    r.score = found[i].score;
    r.threshold = found[i].threshold;
    alerts_.push_back(std::move(r));
  }
}

void Simulation::step() {
  if (finished()) return;
  const fabric::Tick t = ++tick_;
  fab_.begin_tick(t);

  const bool poll = t % cfg_.factory_poll == 0;
  if (poll) poll_actuators();
  state_ = factory::tick(std::move(state_), cfg_.factory, actuators_, cfg_.tick_ms);
  if (poll) write_sensors();

  for (std::size_t i = 0; i < plcs_.size(); ++i) {
    auto& n = *plcs_[i];
    if (t % n.spec.period == n.spec.phase) n.runtime->run_cycle();
    if (n.runtime->stale()) ++plc_stale_ticks_[i];
  }

  attacker_->step(t);
  fab_.flush();
  attacker_->after_flush();

  collect_alerts();
  if (t % cfg_.sample_period == 0) take_sample();
}

void Simulation::run_to_end() {
  while (!finished()) step();
}

json Simulation::command(const json& cmd) {
  auto fail = [](const std::string& why) { return json{{"ok", false}, {"error", why}}; };
  if (!cmd.is_object() || !cmd.contains("cmd") || !cmd["cmd"].is_string())
    return fail("command must be an object with a string 'cmd'");
  const std::string name = cmd["cmd"].get<std::string>();
  auto allowed = [&](std::initializer_list<const char*> keys) -> std::optional<std::string> {
    for (const auto& [k, v] : cmd.items())
      if (k != "cmd" && std::find_if(keys.begin(), keys.end(), [&](const char* a) { return k == a; }) == keys.end())
        return "unknown field '" + k + "' for " + name;
    return std::nullopt;
  };
  json reply{{"ok", true}, {"tick", tick_}};
  if (name == "estop") {
    if (auto e = allowed({"on"})) return fail(*e);
    if (!cmd.contains("on") || !cmd["on"].is_boolean()) return fail("estop needs a boolean 'on'");
    state_.estop = cmd["on"].get<bool>();
  } else if (name == "crane_reset") {
    if (auto e = allowed({})) return fail(*e);
    factory::reset_crane(state_);
  } else if (name == "launch") {
    if (auto e = allowed({"attack"})) return fail(*e);
    if (!cmd.contains("attack")) return fail("launch needs an 'attack' object");
    try {
      json spec = cmd["attack"];
      if (spec.is_object() && spec.contains("start"))
        return fail("launched attacks start at the next tick; drop 'start' or script it in the timeline");
      auto a = scenario::attack_from_json(spec, tick_ + 1);
      if (a.start >= cfg_.duration) return fail("scenario ends before the attack could start");
      attacker_->schedule(a);
      reply["start"] = a.start;
    } catch (const scenario::ConfigError& e) {
      json r = fail("invalid attack");
      r["errors"] = e.errors();
      return r;
    } catch (const std::exception& e) {
      return fail(e.what());
    }
  } else if (name == "ack") {
    if (auto e = allowed({"alert"})) return fail(*e);
    if (!cmd.contains("alert") || !cmd["alert"].is_number_integer()) return fail("ack needs an integer alert id");
    const auto id = cmd["alert"].get<std::int64_t>();
    if (id < 1 || static_cast<std::uint64_t>(id) > alerts_.size()) return fail("no alert with id " + std::to_string(id));
    alerts_[id - 1].acked = true;
  } else {
    return fail("unknown command '" + name + "'");
  }
  transcript_.push_back({{"tick", tick_}, {"command", cmd}});
  return reply;
}

namespace {

json cells_json(const factory::ProductionMetrics& m) {
  json cells = json::array();
  for (std::size_t i = 0; i < factory::cell_count; ++i) {
    const auto& c = m.cells[i];
    cells.push_back({{"name", factory::to_string(factory::CellKind(i))},
                     {"completed", c.completed},
                     {"scrapped", c.scrapped},
                     {"throughput_per_min", c.throughput_per_min},
                     {"blocked", c.blocked}});
  }
  return cells;
}

json speeds_json(const std::array<std::int16_t, factory::conveyor_count>& s) {
  json j = json::object();
  for (std::size_t i = 0; i < factory::conveyor_count; ++i) j[factory::to_string(factory::ConveyorId(i))] = s[i];
  return j;
}

json alert_json(const AlertRecord& a) {
  return {{"id", a.id},       {"tick", a.tick},           {"packet", a.packet}, {"detector", a.detector},
          {"score", a.score}, {"threshold", a.threshold}, {"acked", a.acked}};
}

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

json scores_json(const monitor::Scores& s) {
  return {{"tp", s.tp},
          {"fp", s.fp},
          {"fn", s.fn},
          {"tn", s.tn},
          {"precision", opt(s.precision)},
          {"recall", opt(s.recall)},
          {"f1", opt(s.f1)}};
}

json Simulation::snapshot() const {
  const auto m = factory::production_metrics(state_, cfg_.factory);
  std::array<std::int16_t, factory::conveyor_count> speeds{};
  for (std::size_t i = 0; i < factory::conveyor_count; ++i) speeds[i] = state_.conveyors[i].speed;
  const auto counts = factory::count_statuses(state_);
  json plcs = json::array();
  for (const auto& n : plcs_)
    plcs.push_back({{"name", n->spec.name}, {"stale", n->runtime->stale()}, {"missed", n->runtime->missed()}});
  json recent = json::array();
  for (std::size_t i = alerts_.size() > 10 ? alerts_.size() - 10 : 0; i < alerts_.size(); ++i)
    recent.push_back(alert_json(alerts_[i]));
  std::size_t unacked = 0;
  for (const auto& a : alerts_) unacked += a.acked ? 0 : 1;
  return {{"tick", tick_},
          {"duration", cfg_.duration},
          {"estop", state_.estop},
          {"light", factory::to_string(m.light)},
          {"speeds", speeds_json(speeds)},
          {"arm_position_mm", state_.arm_position_mm},
          {"crane",
           {{"angle", state_.crane.angle},
            {"phase", factory::to_string(state_.crane.phase)},
            {"misaligned", state_.crane.misaligned}}},
          {"cells", cells_json(m)},
          {"scrapped_total", m.scrapped_total},
          {"items",
           {{"in_transit", counts.in_transit},
            {"in_machine", counts.in_machine},
            {"completed", counts.completed},
            {"scrapped", counts.scrapped}}},
          {"plcs", plcs},
          {"active_attacks", attacker_->active(tick_)},
          {"recent_alerts", recent},
          {"alerts_total", alerts_.size()},
          {"alerts_unacked", unacked}};
}

void Simulation::finish() {
  if (finished_) return;
  finished_ = true;
  monitor_->finish();
  const auto& cap = fab_.capture();
  kmeans_scores_ = monitor_->scores();
  const auto ewma = monitor::ewma_baseline(cap.packets, cfg_.monitor.ewma, monitor_->first_scored());
  ewma_alerts_ = ewma.size();
  ewma_scores_ = monitor::evaluate(ewma, cap.malicious, monitor_->first_scored(), cap.packets.size());
}

json Simulation::report() const {
  json r;
  r["config_digest"] = scenario::config_digest(cfg_);
  r["seed"] = cfg_.seed;
  r["duration"] = cfg_.duration;
  r["ticks_run"] = tick_;
  r["tick_ms"] = cfg_.tick_ms;
  json order = json::array({"factory"});
  for (const auto& n : plcs_) order.push_back("plc:" + n->spec.name);
  for (const char* s : {"attacks", "fabric", "monitor"}) order.push_back(s);
  r["schedule"] = order;

  const auto m = factory::production_metrics(state_, cfg_.factory);
  std::array<std::int16_t, factory::conveyor_count> speeds{};
  for (std::size_t i = 0; i < factory::conveyor_count; ++i) speeds[i] = state_.conveyors[i].speed;
  r["final"] = {{"cells", cells_json(m)},
                {"light", factory::to_string(m.light)},
                {"scrapped_total", m.scrapped_total},
                {"speeds", speeds_json(speeds)},
                {"crane", {{"angle", state_.crane.angle}, {"misaligned", state_.crane.misaligned}}},
                {"spawned", state_.spawned}};

  json series = json::array();
  for (const auto& s : samples_) {
    json cells = json::object();
    for (std::size_t i = 0; i < factory::cell_count; ++i) {
      const auto& c = s.metrics.cells[i];
      cells[factory::to_string(factory::CellKind(i))] = {
          {"completed", c.completed}, {"scrapped", c.scrapped}, {"throughput_per_min", c.throughput_per_min}};
    }
    series.push_back({{"tick", s.tick}, {"cells", cells}, {"light", factory::to_string(s.metrics.light)},
                      {"speeds", speeds_json(s.speeds)}});
  }
  r["series"] = series;

  json events = json::array();
  for (const auto& e : attacker_->events()) events.push_back({{"tick", e.tick}, {"kind", e.kind}, {"detail", e.detail}});
  r["attack_events"] = events;
  json timeline = json::array();
  for (const auto& a : attacker_->timeline()) timeline.push_back(scenario::attack_to_json(a));
  r["attacks"] = timeline;
  json recon = json::array();
  for (const auto& e : attacker_->last_recon())
    if (e.open) recon.push_back(fabric::format_ip(e.address));
  r["recon_open"] = recon;
  const auto& fs = attacker_->flood_stats();
  const std::size_t peak = fs.occupancy.empty() ? 0 : *std::max_element(fs.occupancy.begin(), fs.occupancy.end());
  r["flood"] = {{"sent", fs.sent}, {"peak_half_open", peak}};

  constexpr std::size_t listed = 1000;
  json alerts = json::array();
  for (std::size_t i = 0; i < std::min(listed, alerts_.size()); ++i) alerts.push_back(alert_json(alerts_[i]));
  r["alerts"] = {{"total", alerts_.size()}, {"listed", alerts}, {"truncated", alerts_.size() > listed}};

  json det{{"schema", monitor::to_string(cfg_.monitor.schema)},
           {"trained", monitor_->trained()},
           {"split_tick", monitor_->split()},
           {"first_scored_packet", monitor_->first_scored()},
           {"threshold", opt(monitor_->threshold())}};
  if (monitor_->model()) {
    det["inertia"] = monitor_->model()->inertia;
    det["iterations"] = monitor_->model()->iterations;
  }
  if (kmeans_scores_) det["scores"] = scores_json(*kmeans_scores_);
  r["detector"] = det;
  if (ewma_scores_) r["ewma"] = {{"alerts", ewma_alerts_}, {"scores", scores_json(*ewma_scores_)}};

  const auto& cap = fab_.capture();
  std::size_t malicious = 0;
  for (auto b : cap.malicious) malicious += b;
  r["packets"] = {{"total", cap.packets.size()}, {"malicious", malicious}};

  const auto& fc = fab_.counters();
  json plcs = json::array();
  for (std::size_t i = 0; i < plcs_.size(); ++i) {
    const auto& st = plcs_[i]->runtime->stats();
    plcs.push_back({{"name", plcs_[i]->spec.name},
                    {"cycles", st.cycles},
                    {"scans", st.scans},
                    {"writes", st.writes},
                    {"timeouts", st.timeouts},
                    {"reconnects", st.reconnects},
                    {"stale_ticks", plc_stale_ticks_[i]},
                    {"stale_at_end", plcs_[i]->runtime->stale()}});
  }
  const auto& bs = bridge_->stats();
  r["counters"] = {{"fabric",
                    {{"forwarded", fc.forwarded},
                     {"dropped_unknown", fc.dropped_unknown},
                     {"dropped_host", fc.dropped_host},
                     {"dropped_syn", fc.dropped_syn},
                     {"relayed", fc.relayed},
                     {"rewritten", fc.rewritten}}},
                   {"bridge",
                    {{"requests", bs.requests},
                     {"exceptions", bs.exceptions},
                     {"ownership_rejections", bs.ownership_rejections},
                     {"sensor_updates", bs.sensor_updates}}},
                   {"factory_link", {{"polls", link_stats_.polls}, {"failures", link_stats_.failures}}},
                   {"plcs", plcs}};
  r["commands"] = transcript_;
  return r;
}

void write_labels(std::ostream& out, const fabric::Capture& capture) {
  out << "frame,tick,seq,malicious\n";
  for (std::size_t i = 0; i < capture.packets.size(); ++i) {
    const auto& p = capture.packets[i];
    out << (i + 1) << ',' << p.ts.tick << ',' << p.ts.seq << ',' << int(capture.malicious[i]) << '\n';
  }
}

std::vector<std::uint8_t> read_labels(std::istream& in) {
  std::vector<std::uint8_t> out;
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("labels file is empty");
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    const std::string v = comma == std::string::npos ? line : line.substr(comma + 1);
    if (v != "0" && v != "1") throw std::runtime_error("labels line " + std::to_string(n) + ": last column must be 0 or 1");
    out.push_back(v == "1" ? 1 : 0);
  }
  return out;
}

json without_wall_clock(json report) {
  report.erase("wall_clock_ms");
  return report;
}

RunOutcome run(const scenario::ScenarioConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  Simulation sim(cfg);
  sim.run_to_end();
  return finalize(sim, t0);
}

RunOutcome finalize(Simulation& sim, std::chrono::steady_clock::time_point started) {
  const auto& cfg = sim.config();
  const auto t0 = started;
  sim.finish();
  RunOutcome out;
  out.report = sim.report();

  json artifacts = json::object();
  auto emit = [&](const std::string& what, const std::string& path, auto&& body) {
    if (path.empty()) return;
    std::ofstream f(path, std::ios::binary);
    if (f) body(f);
    f.flush();
    const bool ok = static_cast<bool>(f);
    artifacts[what] = ok;
    if (!ok) {
      out.artifacts_ok = false;
      out.artifact_errors.push_back("cannot write " + what + " to " + path);
    }
  };
  const auto& cap = sim.capture();
  emit("pcap", cfg.outputs.pcap, [&](std::ostream& f) { pcap::write(f, cap.packets, sim.tick_us()); });
  emit("labels", cfg.outputs.labels, [&](std::ostream& f) { write_labels(f, cap); });
  emit("alerts", cfg.outputs.alerts, [&](std::ostream& f) {
    for (const auto& a : sim.alerts())
      f << json{{"id", a.id}, {"tick", a.tick}, {"packet", a.packet}, {"detector", a.detector}, {"score", a.score},
                {"threshold", a.threshold}}
               .dump()
        << '\n';
  });
  out.report["artifacts"] = artifacts;
  out.report["complete"] = out.artifacts_ok;
  out.report["wall_clock_ms"] =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  emit("report", cfg.outputs.report, [&](std::ostream& f) { f << out.report.dump(2) << '\n'; });
  return out;
}

}  // namespace otbed::sim
