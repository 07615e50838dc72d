#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace otbed::modbus {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::uint16_t default_port = 502;

enum class FunctionCode : std::uint8_t {
  read_coils = 0x01,
  read_discrete_inputs = 0x02,
  read_holding_registers = 0x03,
  read_input_registers = 0x04,
  write_single_coil = 0x05,
  write_single_register = 0x06,
  write_multiple_coils = 0x0F,
  write_multiple_registers = 0x10,
};

enum class ExceptionCode : std::uint8_t {
  illegal_function = 0x01,
  illegal_data_address = 0x02,
  illegal_data_value = 0x03,
};

// Protocol limits from the Modbus application protocol.
inline constexpr std::uint16_t max_read_bits = 2000;
inline constexpr std::uint16_t max_read_registers = 125;
inline constexpr std::uint16_t max_write_bits = 1968;
inline constexpr std::uint16_t max_write_registers = 123;

struct MbapHeader {
  std::uint16_t transaction_id = 0;
  std::uint16_t protocol_id = 0;
  std::uint16_t length = 0;  // unit id + PDU bytes
  std::uint8_t unit_id = 0;
  bool operator==(const MbapHeader&) const = default;
};

// Requests.
struct ReadRequest {
  FunctionCode function = FunctionCode::read_coils;  // one of the four read codes
  std::uint16_t address = 0;
  std::uint16_t count = 0;
  bool operator==(const ReadRequest&) const = default;
};

struct WriteSingleCoil {
  std::uint16_t address = 0;
  bool on = false;
  bool operator==(const WriteSingleCoil&) const = default;
};

struct WriteSingleRegister {
  std::uint16_t address = 0;
  std::uint16_t value = 0;
  bool operator==(const WriteSingleRegister&) const = default;
};

struct WriteMultipleCoils {
  std::uint16_t address = 0;
  std::vector<bool> bits;
  bool operator==(const WriteMultipleCoils&) const = default;
};

struct WriteMultipleRegisters {
  std::uint16_t address = 0;
  std::vector<std::uint16_t> values;
  bool operator==(const WriteMultipleRegisters&) const = default;
};

// Responses. Single writes echo the request, so WriteSingleCoil and
// WriteSingleRegister double as their own responses.
struct ReadBitsResponse {
  FunctionCode function = FunctionCode::read_coils;
  Bytes packed;  // LSB-first bit packing, as on the wire

  [[nodiscard]] bool bit(std::size_t i) const {
    return (packed.at(i / 8) >> (i % 8)) & 1U;
  }
  bool operator==(const ReadBitsResponse&) const = default;
};

struct ReadRegistersResponse {
  FunctionCode function = FunctionCode::read_holding_registers;
  std::vector<std::uint16_t> values;
  bool operator==(const ReadRegistersResponse&) const = default;
};

struct WriteMultipleResponse {
  FunctionCode function = FunctionCode::write_multiple_coils;
  std::uint16_t address = 0;
  std::uint16_t count = 0;
  bool operator==(const WriteMultipleResponse&) const = default;
};

struct ExceptionResponse {
  std::uint8_t function = 0;  // request function | 0x80
  ExceptionCode code = ExceptionCode::illegal_function;
  bool operator==(const ExceptionResponse&) const = default;
};

using Pdu = std::variant<ReadRequest, WriteSingleCoil, WriteSingleRegister, WriteMultipleCoils,
                         WriteMultipleRegisters, ReadBitsResponse, ReadRegistersResponse,
                         WriteMultipleResponse, ExceptionResponse>;

struct Frame {
  MbapHeader header;
  Pdu pdu;
  bool operator==(const Frame&) const = default;
};

// Requests and responses share function codes but not layouts, so the
// decoder needs to know which side of the conversation it is parsing.
enum class Direction { request, response };

class CodecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

[[nodiscard]] std::uint8_t function_byte(const Pdu& pdu);
[[nodiscard]] bool is_request(const Pdu& pdu);
[[nodiscard]] std::size_t pdu_size(const Pdu& pdu);

// Builds a header with the length field derived from the PDU.
[[nodiscard]] Frame make_frame(std::uint16_t transaction_id, std::uint8_t unit_id, Pdu pdu);

// Throws CodecError when the header disagrees with the PDU or the PDU
// violates protocol limits.
[[nodiscard]] Bytes encode_frame(const MbapHeader& header, const Pdu& pdu);
[[nodiscard]] inline Bytes encode_frame(const Frame& f) { return encode_frame(f.header, f.pdu); }

struct Decoded {
  Frame frame;
  std::size_t consumed = 0;
};
struct Incomplete {};
struct Invalid {
  std::string reason;
};
using DecodeResult = std::variant<Decoded, Incomplete, Invalid>;

[[nodiscard]] DecodeResult decode_frame(std::span<const std::uint8_t> bytes, Direction dir);

// Peeks at the MBAP header only; used by the monitor to pull transaction ids
// without committing to a direction.
[[nodiscard]] bool peek_header(std::span<const std::uint8_t> bytes, MbapHeader& out);

class DataStore {
 public:
  static constexpr std::size_t default_size = 1024;

  DataStore() : DataStore(default_size) {}
  explicit DataStore(std::size_t size_per_table)
      : DataStore(size_per_table, size_per_table, size_per_table, size_per_table) {}
  DataStore(std::size_t coils, std::size_t discrete_inputs, std::size_t holding,
            std::size_t input_registers)
      : coils_(coils), discrete_inputs_(discrete_inputs), holding_(holding), input_(input_registers) {}

  [[nodiscard]] std::size_t coil_count() const { return coils_.size(); }
  [[nodiscard]] std::size_t discrete_input_count() const { return discrete_inputs_.size(); }
  [[nodiscard]] std::size_t holding_register_count() const { return holding_.size(); }
  [[nodiscard]] std::size_t input_register_count() const { return input_.size(); }

  // Bounds-checked accessors; throw std::out_of_range.
  [[nodiscard]] bool coil(std::size_t a) const { return coils_.at(a); }
  [[nodiscard]] bool discrete_input(std::size_t a) const { return discrete_inputs_.at(a); }
  [[nodiscard]] std::uint16_t holding_register(std::size_t a) const { return holding_.at(a); }
  [[nodiscard]] std::uint16_t input_register(std::size_t a) const { return input_.at(a); }
  void set_coil(std::size_t a, bool v) { coils_.at(a) = v; }
  void set_discrete_input(std::size_t a, bool v) { discrete_inputs_.at(a) = v; }
  void set_holding_register(std::size_t a, std::uint16_t v) { holding_.at(a) = v; }
  void set_input_register(std::size_t a, std::uint16_t v) { input_.at(a) = v; }

  bool operator==(const DataStore&) const = default;

 private:
  std::vector<bool> coils_;
  std::vector<bool> discrete_inputs_;
  std::vector<std::uint16_t> holding_;
  std::vector<std::uint16_t> input_;
};

// Server-side semantics. Total: malformed or out-of-range requests come back
// as ExceptionResponse, never as a throw.
[[nodiscard]] Pdu apply_request(DataStore& store, const Pdu& request);

[[nodiscard]] ExceptionResponse make_exception(std::uint8_t request_function, ExceptionCode code);

// Per-connection transaction id source; wraps 65535 -> 0.
class TransactionCounter {
 public:
  TransactionCounter() = default;
  explicit TransactionCounter(std::uint16_t start) : next_(start) {}
  std::uint16_t next() { return next_++; }
  [[nodiscard]] std::uint16_t peek() const { return next_; }

 private:
  std::uint16_t next_ = 0;
};

Bytes pack_bits(const std::vector<bool>& bits);

}  // namespace otbed::modbus
