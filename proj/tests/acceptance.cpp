// Scenario-level acceptance checks. One PASS/FAIL line per criterion; the
// exit status is non-zero when any fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <set>
#include <string>

#include "kmeans_oracle.hpp"
#include "modbus_gen.hpp"
#include "otbed/modbus.hpp"
#include "otbed/pcap.hpp"
#include "otbed/simulation.hpp"
#include "pcap_oracle.hpp"

using namespace otbed;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// pinned limits
constexpr double codec_budget_s = 5.0;
constexpr int codec_frames = 10000;
constexpr double run_budget_s = 30.0;
constexpr double detect_budget_s = 20.0;
constexpr double throughput_tolerance = 0.05;
constexpr double min_recall = 0.8;
constexpr double min_precision = 0.5;
constexpr double inertia_tolerance = 1e-9;
constexpr fabric::Tick scrap_window = 500;
constexpr std::int16_t reversed_speed = static_cast<std::int16_t>(0xFB1D);

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int n, bool ok, const std::string& detail) {
  std::printf("criterion %d %s: %s\n", n, ok ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void run_until(sim::Simulation& s, fabric::Tick t) {
  while (s.now() < t && !s.finished()) s.step();
}

using Completed = std::array<std::uint64_t, factory::cell_count>;

Completed completed(const sim::Simulation& s) {
  const auto m = factory::production_metrics(s.factory_state(), s.config().factory);
  Completed c{};
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = m.cells[i].completed;
  return c;
}

const char* cell_name(std::size_t i) { return factory::to_string(factory::CellKind(i)); }

fs::path scratch_dir() {
  auto d = fs::temp_directory_path() / ("otbed-acceptance-" + std::to_string(::getpid()));
  fs::create_directories(d);
  return d;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Completed counts at both ends of [from, to].
struct Window {
  Completed at_from{}, at_to{};
  std::uint64_t delta(std::size_t cell) const { return at_to[cell] - at_from[cell]; }
};

Window measure(const scenario::ScenarioConfig& cfg, fabric::Tick from, fabric::Tick to) {
  sim::Simulation s(cfg);
  Window w;
  run_until(s, from);
  w.at_from = completed(s);
  run_until(s, to);
  w.at_to = completed(s);
  return w;
}

// |attack - base| <= tolerance * base for every cell except `skip`.
bool others_within(const Window& base, const Window& atk, std::size_t skip, std::string& detail) {
  bool ok = true;
  for (std::size_t c = 0; c < factory::cell_count; ++c) {
    if (c == skip) continue;
    const double b = static_cast<double>(base.delta(c)), a = static_cast<double>(atk.delta(c));
    const bool cell_ok = b > 0 && std::abs(a - b) <= throughput_tolerance * b;
    ok = ok && cell_ok;
    detail += fmt(" %s %.0f/%.0f", cell_name(c), a, b);
  }
  return ok;
}

// ---------------------------------------------------------------------------

void codec() {
  using namespace modbus;
  const auto t0 = Clock::now();
  // unit 0, coil 34 (0x0022), on = FF00
  const Bytes single{0x00, 0x00, 0x00, 0x00, 0x00, 0x06, 0x00, 0x05, 0x00, 0x22, 0xFF, 0x00};
  // FC15, one coil, one data byte 01
  const Bytes multiple{0x00, 0x00, 0x00, 0x00, 0x00, 0x08, 0x00, 0x0F, 0x00, 0x22, 0x00, 0x01, 0x01, 0x01};
  const Frame f5 = make_frame(0, 0, WriteSingleCoil{34, true});
  const Frame f15 = make_frame(0, 0, WriteMultipleCoils{34, {true}});
  bool ok = encode_frame(f5) == single && encode_frame(f15) == multiple;
  for (const auto& [bytes, frame] : {std::pair{single, f5}, std::pair{multiple, f15}}) {
    const auto d = decode_frame(bytes, Direction::request);
    ok = ok && std::holds_alternative<Decoded>(d) && std::get<Decoded>(d).frame == frame &&
         std::get<Decoded>(d).consumed == bytes.size();
  }
  const bool golden = ok;

  std::mt19937 rng(20240601);
  int round_trips = 0;
  for (int i = 0; i < codec_frames; ++i) {
    Direction dir;
    const auto frame = testing::random_frame(rng, dir);
    const auto bytes = encode_frame(frame);
    const auto d = decode_frame(bytes, dir);
    if (std::holds_alternative<Decoded>(d) && std::get<Decoded>(d).frame == frame &&
        std::get<Decoded>(d).consumed == bytes.size())
      ++round_trips;
  }
  const double secs = seconds_since(t0);
  ok = golden && round_trips == codec_frames && secs < codec_budget_s;
  report(1, ok, fmt("golden FC05/FC15 %s, %d/%d frames round-trip, %.2f s (limit %.0f s)", golden ? "match" : "differ",
                    round_trips, codec_frames, secs, codec_budget_s));
}

void determinism(const fs::path& dir) {
  double worst = 0;
  std::vector<std::vector<std::uint8_t>> pcaps;
  std::vector<json> reports;
  for (int i = 0; i < 2; ++i) {
    auto cfg = scenario::default_config();
    cfg.outputs.pcap = (dir / ("det" + std::to_string(i) + ".pcap")).string();
    cfg.outputs.report = (dir / ("det" + std::to_string(i) + ".json")).string();
    const auto t0 = Clock::now();
    const auto out = sim::run(cfg);
    worst = std::max(worst, seconds_since(t0));
    pcaps.push_back(slurp(cfg.outputs.pcap));
    reports.push_back(sim::without_wall_clock(json::parse(std::ifstream(cfg.outputs.report))));
    if (!out.artifacts_ok) pcaps.back().clear();
  }
  const bool same_pcap = !pcaps[0].empty() && pcaps[0] == pcaps[1];
  const bool same_report = reports[0] == reports[1];
  report(2, same_pcap && same_report && worst < run_budget_s,
         fmt("pcap %zu bytes %s, report %s, slowest run %.2f s (limit %.0f s)", pcaps[0].size(),
             same_pcap ? "identical" : "differs", same_report ? "identical" : "differs", worst, run_budget_s));
}

void flood() {
  // start once every cell is in steady production
  constexpr fabric::Tick start = 20000, length = 6000, end = 30000;
  const auto victim = factory::CellKind::palletize;
  auto base_cfg = scenario::default_config();
  base_cfg.duration = end;
  auto atk_cfg = base_cfg;
  attacks::SynFlood f;
  for (const auto& p : base_cfg.plcs)
    if (p.name == "palletize") f.target = p.ip;
  f.rate = 50;
  f.duration = length;
  atk_cfg.attacks.push_back({start, f});

  const auto base = measure(base_cfg, start, start + length);
  const auto atk = measure(atk_cfg, start, start + length);
  const auto v = static_cast<std::size_t>(victim);
  std::string detail = fmt("%s delta %llu during the flood (baseline %llu); others attack/base:", cell_name(v),
                           static_cast<unsigned long long>(atk.delta(v)),
                           static_cast<unsigned long long>(base.delta(v)));
  const bool others = others_within(base, atk, v, detail);
  report(3, f.target != 0 && atk.delta(v) == 0 && base.delta(v) > 0 && others, detail);
}

void forgery() {
  constexpr fabric::Tick at = 20000;
  auto base_cfg = scenario::default_config();
  auto atk_cfg = base_cfg;
  attacks::CoilForgery f;  // unit 0, FC05, coil 34 on
  f.target = base_cfg.network.bridge;
  atk_cfg.attacks.push_back({at, f});

  sim::Simulation s(atk_cfg);
  run_until(s, at - 1);
  const bool aligned_before = !s.factory_state().crane.misaligned;
  run_until(s, at + atk_cfg.factory_poll);
  const bool misaligned = s.factory_state().crane.misaligned;
  Window atk;
  atk.at_from = completed(s);
  const auto combine = static_cast<std::size_t>(factory::CellKind::combine);
  bool constant = true;
  while (!s.finished()) {
    s.step();
    constant = constant && completed(s)[combine] == atk.at_from[combine];
  }
  atk.at_to = completed(s);

  const auto base = measure(base_cfg, at + atk_cfg.factory_poll, base_cfg.duration);
  std::string detail = fmt("misaligned %s within %llu tick(s); combine %s at %llu to tick %llu; others attack/base:",
                           misaligned ? "yes" : "no", static_cast<unsigned long long>(atk_cfg.factory_poll),
                           constant ? "constant" : "moved", static_cast<unsigned long long>(atk.at_from[combine]),
                           static_cast<unsigned long long>(base_cfg.duration));
  const bool others = others_within(base, atk, combine, detail);
  report(4, aligned_before && misaligned && constant && others, detail);
}

// The five belt-reversal replacements in order, with the same left-to-right, non-overlapping,
// no-rescan semantics, written out independently of the library.
fabric::Bytes oracle_rewrite(fabric::Bytes data) {
  const std::vector<std::pair<fabric::Bytes, fabric::Bytes>> pairs{
      {{0x00, 0x00, 0x00, 0xFA}, {0xFB, 0x1D, 0xFB, 0x1D}},
      {{0x00, 0x32, 0x00, 0x00, 0x00, 0x00}, {0xFB, 0x1D, 0xFB, 0x1D, 0xFB, 0x1D}},
      {{0x00, 0xFA}, {0xFB, 0x1D}},
      {{0x00, 0x32}, {0xFB, 0x1D}},
      {{0xFF, 0xCE}, {0x01, 0xFA}},
  };
  for (const auto& [from, to] : pairs) {
    std::size_t i = 0;
    while (i + from.size() <= data.size()) {
      if (std::equal(from.begin(), from.end(), data.begin() + static_cast<std::ptrdiff_t>(i))) {
        std::copy(to.begin(), to.end(), data.begin() + static_cast<std::ptrdiff_t>(i));
        i += from.size();
      } else {
        ++i;
      }
    }
  }
  return data;
}

bool has_trigger(const fabric::Packet& p) {
  if (p.tcp.dst_port != 502) return false;
  for (std::size_t i = 0; i + 1 < p.payload.size(); ++i)
    if (p.payload[i] == 0xFF && p.payload[i + 1] == 0xCE) return true;
  return false;
}

void mitm() {
  constexpr fabric::Tick start = 3000, length = 6000, end = 12000;
  auto cfg = scenario::default_config();
  cfg.duration = end;
  attacks::MitmFilter m;  // belt-reversal rule
  for (const auto& p : cfg.plcs)
    if (p.name == "sorting") m.victim_a = p.ip;
  m.victim_b = cfg.network.bridge;
  m.duration = length;
  cfg.attacks.push_back({start, m});

  sim::Simulation s(cfg);
  std::vector<std::pair<fabric::Tick, std::uint64_t>> scrap;  // per tick
  std::optional<fabric::Tick> reversed_at;
  while (!s.finished()) {
    s.step();
    scrap.emplace_back(s.now(), s.snapshot()["scrapped_total"].get<std::uint64_t>());
    if (!reversed_at)
      for (const auto& c : s.factory_state().conveyors)
        if (c.speed == reversed_speed) reversed_at = s.now();
  }

  // pair each frame sent to the attacker with its relayed copy, in order
  const auto amac = s.fabric().mac_of(s.attacker().node());
  const auto& pk = s.capture().packets;
  std::vector<const fabric::Packet*> into, out;
  for (const auto& p : pk) {
    const bool pair = (p.src_ip == m.victim_a && p.dst_ip == m.victim_b) ||
                      (p.src_ip == m.victim_b && p.dst_ip == m.victim_a);
    if (!pair) continue;
    if (p.dst_mac == amac) into.push_back(&p);
    if (p.src_mac == amac) out.push_back(&p);
  }
  std::size_t triggered = 0, exact = 0, untouched = 0, identical = 0;
  std::optional<fabric::Tick> first_rewrite;
  for (std::size_t i = 0; i < std::min(into.size(), out.size()); ++i) {
    auto expect = *into[i];
    if (has_trigger(expect)) {
      ++triggered;
      expect.payload = oracle_rewrite(expect.payload);
      if (!first_rewrite) first_rewrite = out[i]->ts.tick;
    } else {
      ++untouched;
    }
    // only the link-layer addresses and the timestamp may differ
    expect.src_mac = out[i]->src_mac;
    expect.dst_mac = out[i]->dst_mac;
    expect.ts = out[i]->ts;
    if (expect == *out[i]) (has_trigger(*into[i]) ? exact : identical) += 1;
  }
  const bool paired = !into.empty() && into.size() == out.size();

  bool scrap_up = false;
  if (first_rewrite) {
    std::uint64_t before = 0;
    for (const auto& [t, n] : scrap) {
      if (t == *first_rewrite) before = n;
      if (t > *first_rewrite && t <= *first_rewrite + scrap_window && n > before) scrap_up = true;
    }
  }
  const bool ok = paired && triggered > 0 && exact == triggered && identical == untouched && reversed_at &&
                  scrap_up;
  report(5, ok,
         fmt("%zu relayed; %zu/%zu triggered rewritten byte-exact; %zu/%zu others bit-identical; speed 0xFB1D "
             "%s%s; scrap %s within %llu ticks of the first rewrite (tick %llu)",
             out.size(), exact, triggered, identical, untouched, reversed_at ? "at tick " : "never",
             reversed_at ? std::to_string(*reversed_at).c_str() : "", scrap_up ? "rises" : "flat",
             static_cast<unsigned long long>(scrap_window),
             static_cast<unsigned long long>(first_rewrite.value_or(0))));
}

// Also criterion 8: the run's capture file goes through the PCAP oracle. Its
// line is printed later to keep the output in order.
std::pair<bool, std::string> pcap_result;

void detection_and_pcap(const fs::path& dir) {
  auto cfg = scenario::load_config_file(std::string(OTBED_SCENARIO_DIR) + "/detection.json");
  cfg.outputs.pcap = (dir / "detection.pcap").string();

  const auto t0 = Clock::now();
  sim::Simulation s(cfg);
  s.run_to_end();
  const auto out = sim::finalize(s, t0);
  const double secs = seconds_since(t0);

  // confusion matrix over the scored packets, from alerts and ground truth
  const auto& cap = s.capture();
  const std::size_t first = s.monitor().first_scored();
  std::vector<std::uint8_t> flagged(cap.packets.size(), 0);
  for (const auto& a : s.alerts()) flagged.at(a.packet) = 1;
  std::uint64_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = first; i < cap.packets.size(); ++i) {
    tp += flagged[i] && cap.malicious[i];
    fp += flagged[i] && !cap.malicious[i];
    fn += !flagged[i] && cap.malicious[i];
  }
  const double precision = tp + fp ? double(tp) / double(tp + fp) : 0.0;
  const double recall = tp + fn ? double(tp) / double(tp + fn) : 0.0;
  const auto& rs = out.report["detector"]["scores"];
  const bool agrees = rs["tp"] == tp && rs["fp"] == fp && rs["fn"] == fn;

  auto full = cfg.monitor;
  full.schema = monitor::Schema::full10;
  const auto f10 = monitor::detect(cap.packets, cap.malicious, full, s.tick_us(),
                                   std::pair<fabric::Tick, fabric::Tick>{1, cfg.duration});
  const auto& fs10 = *f10.kmeans_scores;
  std::string f1 = fs10.f1 ? fmt("%.4f", *fs10.f1) : "undefined";

  report(6, recall >= min_recall && precision >= min_precision && agrees && secs < detect_budget_s,
         fmt("subset4 precision %.4f (min %.1f) recall %.4f (min %.1f) tp %llu fp %llu fn %llu, report %s; "
             "full10 F1 %s (reported only); %.2f s (limit %.0f s)",
             precision, min_precision, recall, min_recall, static_cast<unsigned long long>(tp),
             static_cast<unsigned long long>(fp), static_cast<unsigned long long>(fn),
             agrees ? "agrees" : "disagrees", f1.c_str(), secs, detect_budget_s));

  const auto parsed = testing::oracle_parse_pcap(slurp(cfg.outputs.pcap));
  std::size_t matching = 0;
  const std::uint64_t tick_us = s.tick_us();
  const bool header = parsed.magic == 0xA1B2C3D4 && parsed.major == 2 && parsed.minor == 4 && parsed.linktype == 1;
  for (std::size_t i = 0; i < std::min(parsed.records.size(), cap.packets.size()); ++i) {
    const auto& r = parsed.records[i];
    const auto& p = cap.packets[i];
    const std::uint64_t us = p.ts.tick * tick_us + std::min<std::uint64_t>(p.ts.seq, tick_us - 1);
    const bool same = r.ts_sec == us / 1'000'000 && r.ts_usec == us % 1'000'000 &&
                      r.incl_len == r.orig_len && r.incl_len == 54 + p.payload.size() &&
                      std::equal(p.src_mac.begin(), p.src_mac.end(), r.src_mac.begin()) &&
                      std::equal(p.dst_mac.begin(), p.dst_mac.end(), r.dst_mac.begin()) && r.src_ip == p.src_ip &&
                      r.dst_ip == p.dst_ip && r.ip_id == p.ip_id && r.ttl == p.ttl && r.ip_checksum_ok &&
                      r.sport == p.tcp.src_port && r.dport == p.tcp.dst_port && r.seq == p.tcp.seq &&
                      r.ack == p.tcp.ack && r.flags == p.tcp.flags && r.window == p.tcp.window &&
                      r.payload == p.payload;
    matching += same;
  }
  const bool all = parsed.error.empty() && header && parsed.records.size() == cap.packets.size() &&
                   matching == cap.packets.size();
  pcap_result = {all && out.artifacts_ok,
         fmt("%zu records parsed by the oracle%s, %zu/%zu equal the in-memory packets", parsed.records.size(),
             parsed.error.empty() ? "" : (" (" + parsed.error + ")").c_str(), matching, cap.packets.size())};
}

void kmeans_oracle() {
  std::mt19937 rng(4242);
  std::uniform_int_distribution<int> npts(4, 12), kk(1, 3);
  std::uniform_real_distribution<double> u(-10, 10);
  double worst = 0;
  int equal = 0;
  constexpr int instances = 10;
  for (int t = 0; t < instances; ++t) {
    const std::size_t n = static_cast<std::size_t>(npts(rng));
    const std::size_t k = static_cast<std::size_t>(kk(rng));
    std::vector<monitor::FeatureVector> pts;
    for (std::size_t i = 0; i < n; ++i) pts.push_back({monitor::Schema::subset4, {u(rng), u(rng), u(rng), u(rng)}});
    monitor::FitOptions opt;
    opt.k = k;
    opt.seed = 1;
    opt.restarts = 256;
    const double got = monitor::kmeans_fit(pts, opt).inertia;
    const double want = testing::brute_force_inertia(pts, k);
    worst = std::max(worst, std::abs(got - want));
    equal += std::abs(got - want) <= inertia_tolerance;
  }
  report(7, equal == instances,
         fmt("%d/%d instances at the exhaustive optimum, worst gap %.3g (tolerance %.0e)", equal, instances, worst,
             inertia_tolerance));
}

void recon() {
  auto cfg = scenario::default_config();
  cfg.duration = 200;
  attacks::Recon r;
  r.network = cfg.network.bridge & 0xFFFFFF00u;
  r.prefix = cfg.network.prefix;
  cfg.attacks.push_back({100, r});
  sim::Simulation s(cfg);
  s.run_to_end();

  std::set<fabric::Ipv4> expected{cfg.network.bridge};
  for (const auto& p : cfg.plcs) expected.insert(p.ip);
  std::set<fabric::Ipv4> open;
  for (const auto& e : s.attacker().last_recon())
    if (e.open) open.insert(e.address);
  std::string seen;
  for (auto a : open) seen += " " + fabric::format_ip(a);
  report(9, !open.empty() && open == expected,
         fmt("open on 502:%s (expected %zu listeners)", seen.c_str(), expected.size()));
}

}  // namespace

int main() {
  const auto dir = scratch_dir();
  codec();
  determinism(dir);
  flood();
  forgery();
  mitm();
  detection_and_pcap(dir);
  kmeans_oracle();
  report(8, pcap_result.first, pcap_result.second);
  recon();
  fs::remove_all(dir);
  std::printf("%d failed\n", failures);
  return failures == 0 ? 0 : 1;
}
