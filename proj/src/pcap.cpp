#include "otbed/pcap.hpp"

#include <array>

namespace otbed::pcap {
namespace {

void le32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                              static_cast<char>(v >> 24)};
  out.write(b.data(), 4);
}
void le16(std::ostream& out, std::uint16_t v) {
  const std::array<char, 2> b{static_cast<char>(v), static_cast<char>(v >> 8)};
  out.write(b.data(), 2);
}

bool read_le32(std::istream& in, std::uint32_t& v) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) return false;
  v = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

}  // namespace

void write(std::ostream& out, std::span<const fabric::Packet> packets, std::uint32_t tick_us) {
  le32(out, magic);
  le16(out, 2);
  le16(out, 4);
  le32(out, 0);  // thiszone
  le32(out, 0);  // sigfigs
  le32(out, snaplen);
  le32(out, linktype_ethernet);
  for (const auto& p : packets) {
    const std::uint64_t us = p.ts.tick * tick_us + std::min<std::uint64_t>(p.ts.seq, tick_us - 1);
    const auto frame = fabric::render(p);
    le32(out, static_cast<std::uint32_t>(us / 1'000'000));
    le32(out, static_cast<std::uint32_t>(us % 1'000'000));
    le32(out, static_cast<std::uint32_t>(frame.size()));
    le32(out, static_cast<std::uint32_t>(frame.size()));
    out.write(reinterpret_cast<const char*>(frame.data()), static_cast<std::streamsize>(frame.size()));
  }
  if (!out) throw PcapError("pcap write failed");
}

std::vector<fabric::Packet> read(std::istream& in, std::uint32_t tick_us) {
  std::uint32_t m = 0;
  if (!read_le32(in, m) || m != magic) throw PcapError("not a little-endian microsecond pcap");
  std::array<char, 20> rest{};
  if (!in.read(rest.data(), rest.size())) throw PcapError("truncated pcap header");
  const auto link = static_cast<unsigned char>(rest[16]) | (static_cast<unsigned char>(rest[17]) << 8);
  if (link != linktype_ethernet) throw PcapError("unsupported link type");

  std::vector<fabric::Packet> packets;
  for (;;) {
    std::uint32_t sec = 0, usec = 0, incl = 0, orig = 0;
    if (!read_le32(in, sec)) break;
    if (!read_le32(in, usec) || !read_le32(in, incl) || !read_le32(in, orig)) throw PcapError("truncated record");
    if (incl > snaplen) throw PcapError("record exceeds snaplen");
    fabric::Bytes frame(incl);
    if (!in.read(reinterpret_cast<char*>(frame.data()), incl)) throw PcapError("truncated frame");
    const std::uint64_t us = static_cast<std::uint64_t>(sec) * 1'000'000 + usec;
    const fabric::Timestamp ts{us / tick_us, static_cast<std::uint32_t>(us % tick_us)};
    auto p = fabric::parse_rendered(frame, ts);
    if (!p) throw PcapError("frame is not Ethernet/IPv4/TCP");
    packets.push_back(std::move(*p));
  }
  return packets;
}

}  // namespace otbed::pcap
