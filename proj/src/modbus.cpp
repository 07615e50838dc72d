#include "otbed/modbus.hpp"

#include <algorithm>

namespace otbed::modbus {
namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

void put16(Bytes& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
}

std::uint16_t get16(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint16_t>((b[at] << 8) | b[at + 1]);
}

bool is_bit_read(FunctionCode f) {
  return f == FunctionCode::read_coils || f == FunctionCode::read_discrete_inputs;
}
bool is_register_read(FunctionCode f) {
  return f == FunctionCode::read_holding_registers || f == FunctionCode::read_input_registers;
}

bool known_function(std::uint8_t f) {
  switch (f) {
    case 0x01: case 0x02: case 0x03: case 0x04:
    case 0x05: case 0x06: case 0x0F: case 0x10:
      return true;
    default:
      return false;
  }
}

// Empty string means valid.
std::string validate(const Pdu& pdu) {
  return std::visit(
      overloaded{
          [](const ReadRequest& r) -> std::string {
            if (is_bit_read(r.function))
              return (r.count >= 1 && r.count <= max_read_bits) ? "" : "count";
            if (is_register_read(r.function))
              return (r.count >= 1 && r.count <= max_read_registers) ? "" : "count";
            return "function code";
          },
          [](const WriteSingleCoil&) -> std::string { return ""; },
          [](const WriteSingleRegister&) -> std::string { return ""; },
          [](const WriteMultipleCoils& w) -> std::string {
            return (!w.bits.empty() && w.bits.size() <= max_write_bits) ? "" : "count";
          },
          [](const WriteMultipleRegisters& w) -> std::string {
            return (!w.values.empty() && w.values.size() <= max_write_registers) ? "" : "count";
          },
          [](const ReadBitsResponse& r) -> std::string {
            if (!is_bit_read(r.function)) return "function code";
            return (!r.packed.empty() && r.packed.size() <= 250) ? "" : "count";
          },
          [](const ReadRegistersResponse& r) -> std::string {
            if (!is_register_read(r.function)) return "function code";
            return (!r.values.empty() && r.values.size() <= max_read_registers) ? "" : "count";
          },
          [](const WriteMultipleResponse& r) -> std::string {
            if (r.function == FunctionCode::write_multiple_coils)
              return (r.count >= 1 && r.count <= max_write_bits) ? "" : "count";
            if (r.function == FunctionCode::write_multiple_registers)
              return (r.count >= 1 && r.count <= max_write_registers) ? "" : "count";
            return "function code";
          },
          [](const ExceptionResponse& e) -> std::string {
            if ((e.function & 0x80) == 0 || !known_function(e.function & 0x7F)) return "function code";
            return "";
          },
      },
      pdu);
}

void encode_pdu(Bytes& out, const Pdu& pdu) {
  out.push_back(function_byte(pdu));
  std::visit(overloaded{
                 [&](const ReadRequest& r) {
                   put16(out, r.address);
                   put16(out, r.count);
                 },
                 [&](const WriteSingleCoil& w) {
                   put16(out, w.address);
                   put16(out, w.on ? 0xFF00 : 0x0000);
                 },
                 [&](const WriteSingleRegister& w) {
                   put16(out, w.address);
                   put16(out, w.value);
                 },
                 [&](const WriteMultipleCoils& w) {
                   put16(out, w.address);
                   put16(out, static_cast<std::uint16_t>(w.bits.size()));
                   auto packed = pack_bits(w.bits);
                   out.push_back(static_cast<std::uint8_t>(packed.size()));
                   out.insert(out.end(), packed.begin(), packed.end());
                 },
                 [&](const WriteMultipleRegisters& w) {
                   put16(out, w.address);
                   put16(out, static_cast<std::uint16_t>(w.values.size()));
                   out.push_back(static_cast<std::uint8_t>(w.values.size() * 2));
                   for (auto v : w.values) put16(out, v);
                 },
                 [&](const ReadBitsResponse& r) {
                   out.push_back(static_cast<std::uint8_t>(r.packed.size()));
                   out.insert(out.end(), r.packed.begin(), r.packed.end());
                 },
                 [&](const ReadRegistersResponse& r) {
                   out.push_back(static_cast<std::uint8_t>(r.values.size() * 2));
                   for (auto v : r.values) put16(out, v);
                 },
                 [&](const WriteMultipleResponse& r) {
                   put16(out, r.address);
                   put16(out, r.count);
                 },
                 [&](const ExceptionResponse& e) { out.push_back(static_cast<std::uint8_t>(e.code)); },
             },
             pdu);
}

// Parses exactly `b` as a PDU. Empty reason on success.
std::variant<Pdu, Invalid> decode_pdu(std::span<const std::uint8_t> b, Direction dir) {
  if (b.empty()) return Invalid{"length"};
  const std::uint8_t fc = b[0];
  const auto body = b.subspan(1);
  auto need = [&](std::size_t n) { return body.size() == n; };

  if (fc & 0x80) {
    if (dir != Direction::response || !known_function(fc & 0x7F)) return Invalid{"function code"};
    if (!need(1)) return Invalid{"length"};
    return Pdu{ExceptionResponse{fc, static_cast<ExceptionCode>(body[0])}};
  }
  if (!known_function(fc)) return Invalid{"function code"};
  const auto f = static_cast<FunctionCode>(fc);

  if (f == FunctionCode::write_single_coil) {
    if (!need(4)) return Invalid{"length"};
    const auto v = get16(body, 2);
    if (v != 0xFF00 && v != 0x0000) return Invalid{"coil value"};
    return Pdu{WriteSingleCoil{get16(body, 0), v == 0xFF00}};
  }
  if (f == FunctionCode::write_single_register) {
    if (!need(4)) return Invalid{"length"};
    return Pdu{WriteSingleRegister{get16(body, 0), get16(body, 2)}};
  }

  if (dir == Direction::request) {
    if (is_bit_read(f) || is_register_read(f)) {
      if (!need(4)) return Invalid{"length"};
      ReadRequest r{f, get16(body, 0), get16(body, 2)};
      if (auto why = validate(r); !why.empty()) return Invalid{why};
      return Pdu{r};
    }
    if (body.size() < 5) return Invalid{"length"};
    const auto addr = get16(body, 0);
    const auto count = get16(body, 2);
    const std::size_t byte_count = body[4];
    if (body.size() != 5 + byte_count) return Invalid{"length"};
    if (f == FunctionCode::write_multiple_coils) {
      if (count < 1 || count > max_write_bits) return Invalid{"count"};
      if (byte_count != (count + 7u) / 8u) return Invalid{"byte count"};
      WriteMultipleCoils w{addr, std::vector<bool>(count)};
      for (std::size_t i = 0; i < count; ++i) w.bits[i] = (body[5 + i / 8] >> (i % 8)) & 1U;
      return Pdu{std::move(w)};
    }
    if (count < 1 || count > max_write_registers) return Invalid{"count"};
    if (byte_count != count * 2u) return Invalid{"byte count"};
    WriteMultipleRegisters w{addr, std::vector<std::uint16_t>(count)};
    for (std::size_t i = 0; i < count; ++i) w.values[i] = get16(body, 5 + 2 * i);
    return Pdu{std::move(w)};
  }

  // Response direction.
  if (is_bit_read(f) || is_register_read(f)) {
    if (body.empty()) return Invalid{"length"};
    const std::size_t byte_count = body[0];
    if (body.size() != 1 + byte_count) return Invalid{"length"};
    if (is_bit_read(f)) {
      if (byte_count < 1 || byte_count > 250) return Invalid{"count"};
      return Pdu{ReadBitsResponse{f, Bytes(body.begin() + 1, body.end())}};
    }
    if (byte_count % 2 != 0 || byte_count < 2 || byte_count > 2 * max_read_registers)
      return Invalid{"count"};
    ReadRegistersResponse r{f, std::vector<std::uint16_t>(byte_count / 2)};
    for (std::size_t i = 0; i < r.values.size(); ++i) r.values[i] = get16(body, 1 + 2 * i);
    return Pdu{std::move(r)};
  }
  if (!need(4)) return Invalid{"length"};
  WriteMultipleResponse r{f, get16(body, 0), get16(body, 2)};
  if (auto why = validate(r); !why.empty()) return Invalid{why};
  return Pdu{r};
}

}  // namespace

Bytes pack_bits(const std::vector<bool>& bits) {
  Bytes packed((bits.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < bits.size(); ++i)
    if (bits[i]) packed[i / 8] |= static_cast<std::uint8_t>(1U << (i % 8));
  return packed;
}

std::uint8_t function_byte(const Pdu& pdu) {
  return std::visit(overloaded{
                        [](const ReadRequest& r) { return static_cast<std::uint8_t>(r.function); },
                        [](const WriteSingleCoil&) { return std::uint8_t{0x05}; },
                        [](const WriteSingleRegister&) { return std::uint8_t{0x06}; },
                        [](const WriteMultipleCoils&) { return std::uint8_t{0x0F}; },
                        [](const WriteMultipleRegisters&) { return std::uint8_t{0x10}; },
                        [](const ReadBitsResponse& r) { return static_cast<std::uint8_t>(r.function); },
                        [](const ReadRegistersResponse& r) { return static_cast<std::uint8_t>(r.function); },
                        [](const WriteMultipleResponse& r) { return static_cast<std::uint8_t>(r.function); },
                        [](const ExceptionResponse& e) { return e.function; },
                    },
                    pdu);
}

bool is_request(const Pdu& pdu) {
  return std::holds_alternative<ReadRequest>(pdu) || std::holds_alternative<WriteSingleCoil>(pdu) ||
         std::holds_alternative<WriteSingleRegister>(pdu) ||
         std::holds_alternative<WriteMultipleCoils>(pdu) ||
         std::holds_alternative<WriteMultipleRegisters>(pdu);
}

std::size_t pdu_size(const Pdu& pdu) {
  return std::visit(overloaded{
                        [](const ReadRequest&) -> std::size_t { return 5; },
                        [](const WriteSingleCoil&) -> std::size_t { return 5; },
                        [](const WriteSingleRegister&) -> std::size_t { return 5; },
                        [](const WriteMultipleCoils& w) -> std::size_t { return 6 + (w.bits.size() + 7) / 8; },
                        [](const WriteMultipleRegisters& w) -> std::size_t { return 6 + 2 * w.values.size(); },
                        [](const ReadBitsResponse& r) -> std::size_t { return 2 + r.packed.size(); },
                        [](const ReadRegistersResponse& r) -> std::size_t { return 2 + 2 * r.values.size(); },
                        [](const WriteMultipleResponse&) -> std::size_t { return 5; },
                        [](const ExceptionResponse&) -> std::size_t { return 2; },
                    },
                    pdu);
}

Frame make_frame(std::uint16_t transaction_id, std::uint8_t unit_id, Pdu pdu) {
  const auto len = static_cast<std::uint16_t>(1 + pdu_size(pdu));
  return Frame{MbapHeader{transaction_id, 0, len, unit_id}, std::move(pdu)};
}

Bytes encode_frame(const MbapHeader& header, const Pdu& pdu) {
  if (header.protocol_id != 0) throw CodecError("protocol id must be 0");
  if (auto why = validate(pdu); !why.empty()) throw CodecError("invalid pdu: " + why);
  const std::size_t size = pdu_size(pdu);
  if (header.length != size + 1) throw CodecError("header length does not match pdu");
  if (header.length < 2 || header.length > 254) throw CodecError("length out of range");
  Bytes out;
  out.reserve(6 + header.length);
  put16(out, header.transaction_id);
  put16(out, header.protocol_id);
  put16(out, header.length);
  out.push_back(header.unit_id);
  encode_pdu(out, pdu);
  return out;
}

bool peek_header(std::span<const std::uint8_t> bytes, MbapHeader& out) {
  if (bytes.size() < 7) return false;
  out = MbapHeader{get16(bytes, 0), get16(bytes, 2), get16(bytes, 4), bytes[6]};
  return true;
}

DecodeResult decode_frame(std::span<const std::uint8_t> bytes, Direction dir) {
  MbapHeader h;
  if (!peek_header(bytes, h)) {
    // A protocol id mismatch is detectable before the header is complete.
    if (bytes.size() >= 4 && get16(bytes, 2) != 0) return Invalid{"protocol id"};
    return Incomplete{};
  }
  if (h.protocol_id != 0) return Invalid{"protocol id"};
  if (h.length < 2 || h.length > 254) return Invalid{"length"};
  const std::size_t total = 6 + h.length;
  if (bytes.size() < total) return Incomplete{};
  auto pdu = decode_pdu(bytes.subspan(7, h.length - 1), dir);
  if (auto* bad = std::get_if<Invalid>(&pdu)) return *bad;
  return Decoded{Frame{h, std::move(std::get<Pdu>(pdu))}, total};
}

ExceptionResponse make_exception(std::uint8_t request_function, ExceptionCode code) {
  return ExceptionResponse{static_cast<std::uint8_t>(request_function | 0x80), code};
}

Pdu apply_request(DataStore& store, const Pdu& request) {
  const auto fc = function_byte(request);
  if (!is_request(request)) return make_exception(fc & 0x7F, ExceptionCode::illegal_function);
  if (!validate(request).empty()) return make_exception(fc, ExceptionCode::illegal_data_value);

  auto in_range = [](std::size_t addr, std::size_t count, std::size_t size) {
    return addr + count <= size;
  };

  return std::visit(
      overloaded{
          [&](const ReadRequest& r) -> Pdu {
            switch (r.function) {
              case FunctionCode::read_coils:
              case FunctionCode::read_discrete_inputs: {
                const bool coils = r.function == FunctionCode::read_coils;
                const auto size = coils ? store.coil_count() : store.discrete_input_count();
                if (!in_range(r.address, r.count, size))
                  return make_exception(fc, ExceptionCode::illegal_data_address);
                std::vector<bool> bits(r.count);
                for (std::size_t i = 0; i < r.count; ++i)
                  bits[i] = coils ? store.coil(r.address + i) : store.discrete_input(r.address + i);
                return ReadBitsResponse{r.function, pack_bits(bits)};
              }
              default: {
                const bool holding = r.function == FunctionCode::read_holding_registers;
                const auto size = holding ? store.holding_register_count() : store.input_register_count();
                if (!in_range(r.address, r.count, size))
                  return make_exception(fc, ExceptionCode::illegal_data_address);
                ReadRegistersResponse resp{r.function, std::vector<std::uint16_t>(r.count)};
                for (std::size_t i = 0; i < r.count; ++i)
                  resp.values[i] = holding ? store.holding_register(r.address + i)
                                           : store.input_register(r.address + i);
                return resp;
              }
            }
          },
          [&](const WriteSingleCoil& w) -> Pdu {
            if (!in_range(w.address, 1, store.coil_count()))
              return make_exception(fc, ExceptionCode::illegal_data_address);
            store.set_coil(w.address, w.on);
            return w;
          },
          [&](const WriteSingleRegister& w) -> Pdu {
            if (!in_range(w.address, 1, store.holding_register_count()))
              return make_exception(fc, ExceptionCode::illegal_data_address);
            store.set_holding_register(w.address, w.value);
            return w;
          },
          [&](const WriteMultipleCoils& w) -> Pdu {
            if (!in_range(w.address, w.bits.size(), store.coil_count()))
              return make_exception(fc, ExceptionCode::illegal_data_address);
            for (std::size_t i = 0; i < w.bits.size(); ++i) store.set_coil(w.address + i, w.bits[i]);
            return WriteMultipleResponse{FunctionCode::write_multiple_coils, w.address,
                                         static_cast<std::uint16_t>(w.bits.size())};
          },
          [&](const WriteMultipleRegisters& w) -> Pdu {
            if (!in_range(w.address, w.values.size(), store.holding_register_count()))
              return make_exception(fc, ExceptionCode::illegal_data_address);
            for (std::size_t i = 0; i < w.values.size(); ++i)
              store.set_holding_register(w.address + i, w.values[i]);
            return WriteMultipleResponse{FunctionCode::write_multiple_registers, w.address,
                                         static_cast<std::uint16_t>(w.values.size())};
          },
          [&](const auto&) -> Pdu { return make_exception(fc, ExceptionCode::illegal_function); },
      },
      request);
}

}  // namespace otbed::modbus
