// otbed: run scenarios, detect on captures, attack real Modbus endpoints.

#include <csignal>
#include <fstream>
#include <iostream>
#include <pthread.h>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "otbed/interop.hpp"
#include "otbed/pcap.hpp"
#include "otbed/scenario.hpp"
#include "otbed/server.hpp"
#include "otbed/simulation.hpp"

using namespace otbed;
using nlohmann::json;

namespace {

constexpr int exit_ok = 0;
constexpr int exit_invalid = 2;
constexpr int exit_failed = 3;

struct Invalid : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Blocks SIGINT/SIGTERM in every thread and calls on_signal from a watcher.
// The watcher exits when the returned guard is destroyed.
class SignalWatch {
 public:
  explicit SignalWatch(std::function<void()> on_signal) {
    sigemptyset(&set_);
    sigaddset(&set_, SIGINT);
    sigaddset(&set_, SIGTERM);
    sigaddset(&set_, SIGUSR1);
    pthread_sigmask(SIG_BLOCK, &set_, nullptr);
    watcher_ = std::thread([this, f = std::move(on_signal)] {
      int sig = 0;
      sigwait(&set_, &sig);
      if (sig != SIGUSR1) f();
    });
  }
  ~SignalWatch() {
    pthread_kill(watcher_.native_handle(), SIGUSR1);
    watcher_.join();
  }

 private:
  sigset_t set_;
  std::thread watcher_;
};

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Invalid("cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Invalid(path + ": not valid JSON: " + e.what());
  }
}

struct RunArgs {
  std::string scenario;
  std::optional<std::uint64_t> seed;
  std::string pcap, report, labels, alerts, serve;
  double rate = 0;
  bool paused = false;
};

int cmd_run(const RunArgs& a) {
  auto cfg = a.scenario.empty() ? scenario::default_config() : scenario::load_config_file(a.scenario);
  if (a.seed) {
    cfg.seed = *a.seed;
    cfg.factory.seed = *a.seed;
  }
  if (!a.pcap.empty()) cfg.outputs.pcap = a.pcap;
  if (!a.report.empty()) cfg.outputs.report = a.report;
  if (!a.labels.empty()) cfg.outputs.labels = a.labels;
  if (!a.alerts.empty()) cfg.outputs.alerts = a.alerts;
  if (const auto errs = scenario::validate(cfg); !errs.empty()) throw scenario::ConfigError(errs);

  const auto t0 = std::chrono::steady_clock::now();
  sim::Simulation sim(cfg);
  if (!a.serve.empty()) {
    server::ServerOptions o;
    const auto ep = interop::parse_endpoint(a.serve, 8080);
    o.host = ep.host;
    o.port = ep.port;
    o.ticks_per_second = a.rate;
    o.start_paused = a.paused;
    server::ControlServer srv(sim, o);
    const int port = srv.start();
    std::cerr << "control API on http://" << o.host << ":" << port << "\n";
    SignalWatch watch([&] { srv.stop(); });
    srv.run();
  } else {
    SignalWatch watch([] { std::_Exit(exit_failed); });
    sim.run_to_end();
  }
  const auto out = sim::finalize(sim, t0);
  for (const auto& e : out.artifact_errors) std::cerr << "error: " << e << "\n";
  if (cfg.outputs.report.empty())
    std::cout << out.report.dump(2) << "\n";
  else
    std::cout << json{{"ticks_run", out.report["ticks_run"]},
                      {"config_digest", out.report["config_digest"]},
                      {"packets", out.report["packets"]},
                      {"alerts", out.report["alerts"]["total"]},
                      {"complete", out.report["complete"]}}
                     .dump()
              << "\n";
  if (!sim.finished()) return exit_failed;  // interrupted
  return out.artifacts_ok ? exit_ok : exit_failed;
}

struct DetectArgs {
  std::string pcap, labels, schema = "subset4", report, alerts;
  std::size_t k = 0;
  double split = 0;
  double sigmas = 0;
  std::uint64_t seed = 0;
  int restarts = 1;
  std::uint32_t tick_ms = 10;
  fabric::Tick duration = 0;
};

int cmd_detect(const DetectArgs& a) {
  monitor::DetectorConfig cfg;
  const auto schema = monitor::schema_from_string(a.schema);
  if (!schema) throw Invalid("--schema must be full10 or subset4");
  cfg.schema = *schema;
  cfg.fit.k = a.k;
  cfg.fit.seed = a.seed;
  cfg.fit.restarts = a.restarts;
  cfg.train_split = a.split;
  cfg.sigmas = a.sigmas;
  if (a.k == 0) throw Invalid("--k must be at least 1");
  if (!(a.split > 0 && a.split < 1)) throw Invalid("--train-split must be in (0, 1)");
  if (a.tick_ms == 0) throw Invalid("--tick-ms must be positive");
  const std::uint32_t tick_us = a.tick_ms * 1000;

  std::ifstream pin(a.pcap, std::ios::binary);
  if (!pin) throw Invalid("cannot read " + a.pcap);
  std::ifstream lin(a.labels);
  if (!lin) throw Invalid("cannot read " + a.labels);
  std::vector<fabric::Packet> packets;
  std::vector<std::uint8_t> labels;
  try {
    packets = pcap::read(pin, tick_us);
    labels = sim::read_labels(lin);
  } catch (const std::exception& e) {
    throw Invalid(e.what());
  }
  if (labels.size() != packets.size())
    throw Invalid("labels list " + std::to_string(labels.size()) + " packets, capture has " +
                  std::to_string(packets.size()));
  std::optional<std::pair<fabric::Tick, fabric::Tick>> span;
  if (a.duration > 0) span = std::pair<fabric::Tick, fabric::Tick>{1, a.duration};

  const auto r = monitor::detect(packets, labels, cfg, tick_us, span);
  json out{{"schema", monitor::to_string(r.schema)},
           {"k", r.model.k},
           {"seed", r.model.seed},
           {"split_tick", r.split},
           {"first_scored_packet", r.first_scored},
           {"threshold", r.threshold},
           {"inertia", r.model.inertia},
           {"iterations", r.model.iterations},
           {"packets", packets.size()},
           {"alerts", r.alerts.size()}};
  if (r.kmeans_scores) out["scores"] = sim::scores_json(*r.kmeans_scores);
  if (r.ewma_scores) out["ewma"] = {{"alerts", r.ewma_alerts.size()}, {"scores", sim::scores_json(*r.ewma_scores)}};

  if (!a.alerts.empty()) {
    std::ofstream f(a.alerts);
    for (const auto& al : r.alerts)
      f << json{{"packet", al.packet}, {"tick", packets[al.packet].ts.tick}, {"detector", al.detector},
                {"score", al.score}, {"threshold", al.threshold}}
               .dump()
        << '\n';
    if (!f) throw std::runtime_error("cannot write " + a.alerts);
  }
  if (!a.report.empty()) {
    std::ofstream f(a.report);
    f << out.dump(2) << '\n';
    if (!f) throw std::runtime_error("cannot write " + a.report);
  }
  std::cout << out.dump(2) << "\n";
  return exit_ok;
}

struct AttackArgs {
  std::string spec, target;
  int timeout_ms = 2000;
};

int cmd_attack(const AttackArgs& a) {
  auto j = read_json_file(a.spec);
  if (j.is_object()) j.erase("start");
  const auto atk = scenario::attack_from_json(j, 1);
  const auto timeout = std::chrono::milliseconds(a.timeout_ms);
  if (auto* f = std::get_if<attacks::CoilForgery>(&atk.spec)) {
    const auto ep = interop::parse_endpoint(a.target, f->port);
    const auto r = interop::forge_write(ep, *f, timeout);
    json out{{"kind", "coil_forgery"}, {"target", ep.host + ":" + std::to_string(ep.port)},
             {"status", attacks::to_string(r.status)}};
    if (r.response) out["response"] = scenario::format_hex(modbus::encode_frame(modbus::make_frame(0, f->unit, *r.response)));
    std::cout << out.dump() << "\n";
    return r.status == attacks::ForgeResult::Status::echoed ? exit_ok : exit_failed;
  }
  if (auto* rc = std::get_if<attacks::Recon>(&atk.spec)) {
    // --target a.b.c.d/len overrides the spec's network
    auto network = rc->network;
    int prefix = rc->prefix;
    if (!a.target.empty()) {
      const auto slash = a.target.find('/');
      try {
        network = fabric::parse_ip(a.target.substr(0, slash));
        if (slash != std::string::npos) prefix = std::stoi(a.target.substr(slash + 1));
      } catch (const std::exception&) {
        throw Invalid("--target for recon is a.b.c.d[/prefix]");
      }
    }
    json open = json::array();
    for (const auto& e : interop::connect_scan(network, prefix, rc->port, timeout))
      if (e.open) open.push_back(fabric::format_ip(e.address));
    std::cout << json{{"kind", "recon"}, {"port", rc->port}, {"open", open}}.dump() << "\n";
    return exit_ok;
  }
  throw Invalid(std::string(attacks::kind_name(atk.spec)) +
                " needs the emulated fabric; use it in a scenario timeline or the control API");
}

struct BridgeArgs {
  std::string listen = "127.0.0.1:5020";
  std::string scenario;
};

int cmd_bridge(const BridgeArgs& a) {
  const auto cfg = a.scenario.empty() ? scenario::default_config() : scenario::load_config_file(a.scenario);
  bridge::BridgeConfig bc;
  bc.factory_ip = cfg.network.factory;
  bc.enforce_ownership = cfg.enforce_ownership;
  bc.table_size = cfg.table_size;
  for (const auto& p : cfg.plcs) bc.owners[p.ip] = p.outputs;
  bridge::Bridge br(bc);
  const auto ep = interop::parse_endpoint(a.listen, 5020);
  interop::BridgeServer srv(br, ep.host, ep.port);
  std::cerr << "modbus bridge on " << ep.host << ":" << srv.port() << "\n";
  std::atomic<bool> stop{false};
  SignalWatch watch([&] { stop = true; });
  srv.serve(stop);
  std::cout << json{{"requests", srv.requests()}}.dump() << "\n";
  return exit_ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"OT security testbed: factory, PLCs, Modbus bridge, attacks and anomaly detection"};
  app.require_subcommand(1);

  RunArgs ra;
  auto* run = app.add_subcommand("run", "Run a scenario headless or behind the control API");
  run->add_option("--scenario", ra.scenario, "Scenario JSON (defaults when omitted)")->check(CLI::ExistingFile);
  run->add_option("--seed", ra.seed, "Override the scenario seed");
  run->add_option("--pcap", ra.pcap, "Write the mirrored capture here");
  run->add_option("--report", ra.report, "Write the run report here");
  run->add_option("--labels", ra.labels, "Write ground-truth labels (CSV) here");
  run->add_option("--alerts", ra.alerts, "Write the alert log (JSON lines) here");
  run->add_option("--serve", ra.serve, "Serve the control API on host[:port]");
  run->add_option("--rate", ra.rate, "Ticks per second when serving (0 = unpaced)")->check(CLI::NonNegativeNumber);
  run->add_flag("--paused", ra.paused, "Start paused when serving");

  DetectArgs da;
  {
    const auto dm = scenario::default_config().monitor;
    da.k = dm.fit.k;
    da.seed = dm.fit.seed;
    da.restarts = dm.fit.restarts;
    da.split = dm.train_split;
    da.sigmas = dm.sigmas;
  }
  auto* det = app.add_subcommand("detect", "Offline k-means detection on a capture");
  det->add_option("--pcap", da.pcap, "Capture to score")->required();
  det->add_option("--labels", da.labels, "Ground-truth labels CSV")->required();
  det->add_option("--schema", da.schema, "full10 or subset4")->capture_default_str();
  det->add_option("--k", da.k, "Clusters")->capture_default_str();
  det->add_option("--train-split", da.split, "Fraction of the tick span used for training")->capture_default_str();
  det->add_option("--sigmas", da.sigmas, "Threshold = mean + sigmas * std of training scores")->capture_default_str();
  det->add_option("--seed", da.seed, "k-means seed")->capture_default_str();
  det->add_option("--restarts", da.restarts, "k-means++ restarts, best inertia kept")->capture_default_str();
  det->add_option("--tick-ms", da.tick_ms, "Tick length the capture was written with")->capture_default_str();
  det->add_option("--duration", da.duration, "Scenario length in ticks (span 1..N); default: packet span");
  det->add_option("--report", da.report, "Also write the summary here");
  det->add_option("--alerts", da.alerts, "Write alerts (JSON lines) here");

  AttackArgs aa;
  auto* atk = app.add_subcommand("attack", "Forge a write or scan over real sockets");
  atk->add_option("--spec", aa.spec, "Attack JSON (coil_forgery or recon)")->required();
  atk->add_option("--target", aa.target, "host[:port] for a forgery, a.b.c.d[/prefix] for recon");
  atk->add_option("--timeout-ms", aa.timeout_ms, "Connect and reply timeout")->capture_default_str();

  BridgeArgs ba;
  auto* brg = app.add_subcommand("bridge", "Serve the Modbus bridge on a real TCP socket");
  brg->add_option("--listen", ba.listen, "host[:port]")->capture_default_str();
  brg->add_option("--scenario", ba.scenario, "Scenario JSON for addresses and ownership")->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return exit_invalid;
  }

  try {
    if (*run) return cmd_run(ra);
    if (*det) return cmd_detect(da);
    if (*atk) {
      if (aa.target.empty()) {
        // forgery needs somewhere to go; recon can scan the spec's network
        const auto j = read_json_file(aa.spec);
        if (!j.is_object() || j.value("kind", "") != "recon") throw Invalid("--target is required");
      }
      return cmd_attack(aa);
    }
    if (*brg) return cmd_bridge(ba);
  } catch (const scenario::ConfigError& e) {
    for (const auto& m : e.errors()) std::cerr << "invalid: " << m << "\n";
    return exit_invalid;
  } catch (const Invalid& e) {
    std::cerr << "invalid: " << e.what() << "\n";
    return exit_invalid;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid: " << e.what() << "\n";
    return exit_invalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_failed;
  }
  return exit_invalid;
}
