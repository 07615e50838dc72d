#pragma once

// Independent PCAP/Ethernet/IPv4/TCP reader used as a test oracle. It shares
// no code with the library's writer or reader.

#include <cstdint>
#include <string>
#include <vector>

namespace otbed::testing {

struct OracleRecord {
  std::uint32_t ts_sec = 0;
  std::uint32_t ts_usec = 0;
  std::uint32_t incl_len = 0;
  std::uint32_t orig_len = 0;
  std::vector<std::uint8_t> src_mac, dst_mac;
  std::uint32_t src_ip = 0, dst_ip = 0;
  std::uint16_t ip_id = 0;
  std::uint8_t ttl = 0;
  bool ip_checksum_ok = false;
  std::uint16_t sport = 0, dport = 0;
  std::uint32_t seq = 0, ack = 0;
  std::uint8_t flags = 0;
  std::uint16_t window = 0;
  std::vector<std::uint8_t> payload;
};

struct OracleCapture {
  std::uint32_t magic = 0;
  std::uint16_t major = 0, minor = 0;
  std::uint32_t snaplen = 0, linktype = 0;
  std::vector<OracleRecord> records;
  std::string error;  // empty when the whole file parsed
};

inline OracleCapture oracle_parse_pcap(const std::vector<std::uint8_t>& f) {
  OracleCapture c;
  std::size_t pos = 0;
  auto le32 = [&](std::size_t at) -> std::uint32_t {
    return std::uint32_t(f[at]) | std::uint32_t(f[at + 1]) << 8 | std::uint32_t(f[at + 2]) << 16 |
           std::uint32_t(f[at + 3]) << 24;
  };
  auto be16 = [&](std::size_t at) -> std::uint16_t { return std::uint16_t(f[at] << 8 | f[at + 1]); };
  auto be32 = [&](std::size_t at) -> std::uint32_t { return std::uint32_t(be16(at)) << 16 | be16(at + 2); };

  if (f.size() < 24) {
    c.error = "short global header";
    return c;
  }
  c.magic = le32(0);
  c.major = std::uint16_t(f[4] | f[5] << 8);
  c.minor = std::uint16_t(f[6] | f[7] << 8);
  c.snaplen = le32(16);
  c.linktype = le32(20);
  pos = 24;
  while (pos < f.size()) {
    if (pos + 16 > f.size()) {
      c.error = "short record header";
      return c;
    }
    OracleRecord r;
    r.ts_sec = le32(pos);
    r.ts_usec = le32(pos + 4);
    r.incl_len = le32(pos + 8);
    r.orig_len = le32(pos + 12);
    pos += 16;
    if (pos + r.incl_len > f.size() || r.incl_len < 54) {
      c.error = "bad record length";
      return c;
    }
    const std::size_t e = pos;
    r.dst_mac.assign(f.begin() + e, f.begin() + e + 6);
    r.src_mac.assign(f.begin() + e + 6, f.begin() + e + 12);
    if (be16(e + 12) != 0x0800) {
      c.error = "not IPv4";
      return c;
    }
    const std::size_t ip = e + 14;
    const std::size_t ihl = (f[ip] & 0x0F) * 4;
    const std::uint16_t total = be16(ip + 2);
    std::uint32_t sum = 0;
    for (std::size_t i = 0; i < ihl; i += 2) sum += be16(ip + i);
    while (sum >> 16) sum = (sum & 0xFFFF) + (sum >> 16);
    r.ip_checksum_ok = sum == 0xFFFF;
    r.ip_id = be16(ip + 4);
    r.ttl = f[ip + 8];
    r.src_ip = be32(ip + 12);
    r.dst_ip = be32(ip + 16);
    const std::size_t tcp = ip + ihl;
    r.sport = be16(tcp);
    r.dport = be16(tcp + 2);
    r.seq = be32(tcp + 4);
    r.ack = be32(tcp + 8);
    const std::size_t doff = (f[tcp + 12] >> 4) * 4;
    r.flags = f[tcp + 13];
    r.window = be16(tcp + 14);
    r.payload.assign(f.begin() + tcp + doff, f.begin() + ip + total);
    c.records.push_back(std::move(r));
    pos += c.records.back().incl_len;
  }
  return c;
}

}  // namespace otbed::testing
