#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

#include "otbed/fabric.hpp"

namespace otbed::pcap {

inline constexpr std::uint32_t magic = 0xA1B2C3D4;
inline constexpr std::uint32_t snaplen = 65535;
inline constexpr std::uint32_t linktype_ethernet = 1;

class PcapError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Classic little-endian PCAP. A packet's timestamp in microseconds is
// tick * tick_us + seq, so sub-tick order survives as long as fewer than
// tick_us packets share a tick.
void write(std::ostream& out, std::span<const fabric::Packet> packets, std::uint32_t tick_us);
[[nodiscard]] std::vector<fabric::Packet> read(std::istream& in, std::uint32_t tick_us);

}  // namespace otbed::pcap
