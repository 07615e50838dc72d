#include "otbed/attacks.hpp"

#include <algorithm>
#include <stdexcept>

namespace otbed::attacks {

FilterRule belt_reversal_rule() {
  FilterRule r;
  r.dst_port = 502;
  r.trigger = {0xFF, 0xCE};
  r.replacements = {
      {{0x00, 0x00, 0x00, 0xFA}, {0xFB, 0x1D, 0xFB, 0x1D}},
      {{0x00, 0x32, 0x00, 0x00, 0x00, 0x00}, {0xFB, 0x1D, 0xFB, 0x1D, 0xFB, 0x1D}},
      {{0x00, 0xFA}, {0xFB, 0x1D}},
      {{0x00, 0x32}, {0xFB, 0x1D}},
      {{0xFF, 0xCE}, {0x01, 0xFA}},
  };
  return r;
}

void validate(const FilterRule& rule) {
  if (rule.trigger.empty()) throw std::invalid_argument("filter trigger is empty");
  for (std::size_t i = 0; i < rule.replacements.size(); ++i) {
    const auto& r = rule.replacements[i];
    if (r.search.empty()) throw std::invalid_argument("replacement " + std::to_string(i + 1) + " has an empty pattern");
    if (r.search.size() != r.replace.size())
      throw std::invalid_argument("replacement " + std::to_string(i + 1) + " changes the payload length");
  }
}

std::size_t replace_all(Bytes& data, const Bytes& search, const Bytes& replace) {
  std::size_t n = 0;
  if (search.empty() || search.size() > data.size()) return 0;
  for (std::size_t i = 0; i + search.size() <= data.size();) {
    if (std::equal(search.begin(), search.end(), data.begin() + static_cast<std::ptrdiff_t>(i))) {
      std::copy(replace.begin(), replace.end(), data.begin() + static_cast<std::ptrdiff_t>(i));
      i += search.size();
      ++n;
    } else {
      ++i;
    }
  }
  return n;
}

fabric::FilterOutcome mitm_apply(const FilterRule& rule, const fabric::Packet& packet) {
  fabric::FilterOutcome out{packet, false};
  if (packet.tcp.dst_port != rule.dst_port) return out;
  const auto& p = packet.payload;
  if (std::search(p.begin(), p.end(), rule.trigger.begin(), rule.trigger.end()) == p.end()) return out;
  for (const auto& r : rule.replacements) replace_all(out.packet.payload, r.search, r.replace);
  out.rewritten = out.packet.payload != packet.payload;
  return out;
}

fabric::FilterOutcome mitm_apply(const std::vector<FilterRule>& rules, const fabric::Packet& packet) {
  fabric::FilterOutcome out{packet, false};
  for (const auto& r : rules) {
    auto step = mitm_apply(r, out.packet);
    out.packet = std::move(step.packet);
  }
  out.rewritten = out.packet.payload != packet.payload;
  return out;
}

const char* kind_name(const AttackSpec& spec) {
  switch (spec.index()) {
    case 0: return "recon";
    case 1: return "syn_flood";
    case 2: return "coil_forgery";
    case 3: return "mitm";
  }
  return "?";
}

const char* to_string(ForgeResult::Status s) {
  switch (s) {
    case ForgeResult::Status::echoed: return "echoed";
    case ForgeResult::Status::exception: return "exception";
    case ForgeResult::Status::timeout: return "timeout";
    case ForgeResult::Status::refused: return "refused";
  }
  return "?";
}

modbus::Pdu forgery_request(const CoilForgery& spec) {
  if (spec.function == modbus::FunctionCode::write_single_coil) {
    if (spec.values.size() != 1) throw std::invalid_argument("write single coil takes exactly one value");
    return modbus::WriteSingleCoil{spec.address, spec.values[0]};
  }
  if (spec.function == modbus::FunctionCode::write_multiple_coils) {
    if (spec.values.empty() || spec.values.size() > modbus::max_write_bits)
      throw std::invalid_argument("write multiple coils takes 1 to 1968 values");
    return modbus::WriteMultipleCoils{spec.address, spec.values};
  }
  throw std::invalid_argument("forgery function must be 0x05 or 0x0F");
}

Attacker::Attacker(fabric::Fabric& fab, fabric::NodeId node, std::uint64_t seed)
    : fab_(fab), node_(node), host_(fab, node), rng_(static_cast<std::uint32_t>(seed ^ (seed >> 32))) {
  flood_port_ = static_cast<std::uint16_t>(1024 + rng_() % 30000);
}

std::vector<ReconEntry> Attacker::recon_scan(const Recon& spec) {
  std::vector<ReconEntry> found;
  if (spec.prefix < 0 || spec.prefix > 32) throw std::invalid_argument("bad prefix length");
  const std::uint32_t mask = spec.prefix == 0 ? 0 : ~std::uint32_t(0) << (32 - spec.prefix);
  const std::uint32_t base = spec.network & mask;
  const std::uint64_t size = std::uint64_t(1) << (32 - spec.prefix);
  const std::uint64_t first = size > 2 ? 1 : 0, last = size > 2 ? size - 2 : size - 1;
  const Ipv4 self = fab_.node_config(node_).ip;
  for (std::uint64_t i = first; i <= last; ++i) {
    const Ipv4 ip = base + static_cast<std::uint32_t>(i);
    if (ip == self) continue;
    const auto r = fab_.tcp_connect(node_, ip, spec.port);
    if (r.status == fabric::ConnectResult::Status::timeout) continue;
    found.push_back({ip, r.ok()});
    if (r.ok()) {
      fab_.reset(r.conn, fabric::Side::client);
      fab_.flush();
    }
  }
  last_recon_ = found;
  return found;
}

ForgeResult Attacker::forge_write(const CoilForgery& spec) {
  const auto request = forgery_request(spec);
  ForgeResult out;
  auto& session = host_.open(spec.target, spec.port, spec.unit);
  if (!session.connect()) {
    out.status = session.last_connect() == fabric::ConnectResult::Status::refused ? ForgeResult::Status::refused
                                                                                 : ForgeResult::Status::timeout;
    return out;
  }
  out.response = session.transact(request);
  session.drop();
  fab_.flush();
  if (!out.response)
    out.status = ForgeResult::Status::timeout;
  else if (std::holds_alternative<modbus::ExceptionResponse>(*out.response))
    out.status = ForgeResult::Status::exception;
  else
    out.status = ForgeResult::Status::echoed;
  return out;
}

std::uint64_t Attacker::flood_step(const SynFlood& spec) {
  for (std::uint32_t i = 0; i < spec.rate; ++i) {
    fabric::Packet p;
    p.dst_ip = spec.target;
    p.tcp.src_port = flood_port_;
    flood_port_ = flood_port_ == 65535 ? 1024 : static_cast<std::uint16_t>(flood_port_ + 1);
    p.tcp.dst_port = spec.port;
    p.tcp.seq = static_cast<std::uint32_t>(rng_());
    p.tcp.flags = fabric::tcp_flags::syn;
    p.tcp.window = 512;
    p.payload.assign(spec.payload_len, 'X');
    fab_.inject(node_, std::move(p));
  }
  flood_.sent += spec.rate;
  return spec.rate;
}

void Attacker::mitm_start(const MitmFilter& spec) {
  for (const auto& r : spec.rules) validate(r);
  fabric::Interposition ip;
  ip.attacker = node_;
  ip.victim_a = spec.victim_a;
  ip.victim_b = spec.victim_b;
  ip.filter = [rules = spec.rules](const fabric::Packet& p) { return mitm_apply(rules, p); };
  ip.active = true;
  fab_.set_interposition(std::move(ip));
  mitm_active_ = true;
}

void Attacker::mitm_stop() {
  fab_.clear_interposition();
  mitm_active_ = false;
}

void Attacker::schedule(ScheduledAttack a) {
  if (const auto* m = std::get_if<MitmFilter>(&a.spec))
    for (const auto& r : m->rules) validate(r);
  if (const auto* f = std::get_if<CoilForgery>(&a.spec)) (void)forgery_request(*f);
  timeline_.push_back(std::move(a));
}

namespace {

Tick duration_of(const AttackSpec& s) {
  if (const auto* f = std::get_if<SynFlood>(&s)) return f->duration;
  if (const auto* m = std::get_if<MitmFilter>(&s)) return m->duration;
  return 1;
}

}  // namespace

void Attacker::step(Tick now) {
  now_ = now;
  flooding_.reset();
  for (const auto& a : timeline_) {
    const Tick end = a.start + duration_of(a.spec);
    if (now < a.start || now > end) continue;
    std::visit(
        [&](const auto& spec) {
          using T = std::decay_t<decltype(spec)>;
          if constexpr (std::is_same_v<T, Recon>) {
            if (now != a.start) return;
            const auto found = recon_scan(spec);
            std::string detail;
            for (const auto& e : found)
              if (e.open) detail += (detail.empty() ? "" : " ") + fabric::format_ip(e.address);
            events_.push_back({now, "recon", "open: " + (detail.empty() ? std::string("none") : detail)});
          } else if constexpr (std::is_same_v<T, CoilForgery>) {
            if (now != a.start) return;
            const auto r = forge_write(spec);
            events_.push_back({now, "coil_forgery", to_string(r.status)});
          } else if constexpr (std::is_same_v<T, SynFlood>) {
            if (now == a.start) events_.push_back({now, "syn_flood", "start " + fabric::format_ip(spec.target)});
            if (now == end) {
              events_.push_back({now, "syn_flood", "stop, sent " + std::to_string(flood_.sent)});
              return;
            }
            flood_step(spec);
            flooding_ = spec;
          } else {
            if (now == a.start) {
              mitm_start(spec);
              events_.push_back({now, "mitm", "start " + fabric::format_ip(spec.victim_a) + " <-> " +
                                                  fabric::format_ip(spec.victim_b)});
            } else if (now == end) {
              mitm_stop();
              events_.push_back({now, "mitm", "stop"});
            }
          }
        },
        a.spec);
  }
}

void Attacker::after_flush() {
  if (!flooding_) return;
  const auto victim = fab_.node_for_ip(flooding_->target);
  flood_.occupancy.push_back(victim ? fab_.half_open(*victim, flooding_->port) : 0);
}

std::vector<std::string> Attacker::active(Tick now) const {
  std::vector<std::string> out;
  for (const auto& a : timeline_) {
    const Tick end = a.start + duration_of(a.spec);
    if (now >= a.start && now < end) out.push_back(kind_name(a.spec));
  }
  return out;
}

FloodStats syn_flood(fabric::Fabric& fab, Attacker& attacker, const SynFlood& spec, Tick first_tick) {
  FloodStats stats;
  const auto victim = fab.node_for_ip(spec.target);
  for (Tick t = 0; t < spec.duration; ++t) {
    fab.begin_tick(first_tick + t);
    stats.sent += attacker.flood_step(spec);
    fab.flush();
    stats.occupancy.push_back(victim ? fab.half_open(*victim, spec.port) : 0);
  }
  return stats;
}

}  // namespace otbed::attacks
