#include <gtest/gtest.h>

#include <random>

#include "modbus_gen.hpp"
#include "otbed/modbus.hpp"

using namespace otbed::modbus;

namespace {

Bytes hex(std::initializer_list<int> v) {
  Bytes b;
  for (int x : v) b.push_back(static_cast<std::uint8_t>(x));
  return b;
}

Decoded expect_decoded(const DecodeResult& r) {
  EXPECT_TRUE(std::holds_alternative<Decoded>(r));
  return std::get<Decoded>(r);
}

}  // namespace

TEST(ModbusCodec, WriteSingleCoilGolden) {
  // Hand-computed: MBAP 0001 0000 0006 00, PDU 05 0022 FF00.
  const auto bytes = encode_frame(make_frame(1, 0, WriteSingleCoil{34, true}));
  EXPECT_EQ(bytes, hex({0x00, 0x01, 0x00, 0x00, 0x00, 0x06, 0x00, 0x05, 0x00, 0x22, 0xFF, 0x00}));
}

TEST(ModbusCodec, WriteMultipleCoilsGolden) {
  const auto bytes = encode_frame(make_frame(1, 0, WriteMultipleCoils{34, {true}}));
  EXPECT_EQ(bytes, hex({0x00, 0x01, 0x00, 0x00, 0x00, 0x08, 0x00, 0x0F, 0x00, 0x22, 0x00, 0x01,
                        0x01, 0x01}));
}

TEST(ModbusCodec, ReadCoilsFrameIsTwelveBytes) {
  const auto bytes = encode_frame(make_frame(0, 0, ReadRequest{FunctionCode::read_coils, 0, 1}));
  ASSERT_EQ(bytes.size(), 12u);
  EXPECT_EQ(bytes[4], 0x00);
  EXPECT_EQ(bytes[5], 0x06);
}

TEST(ModbusCodec, DecodeGolden) {
  const auto in = hex({0x00, 0x01, 0x00, 0x00, 0x00, 0x06, 0x00, 0x05, 0x00, 0x22, 0xFF, 0x00});
  auto d = expect_decoded(decode_frame(in, Direction::request));
  EXPECT_EQ(d.consumed, 12u);
  EXPECT_EQ(d.frame.header.transaction_id, 1);
  EXPECT_EQ(std::get<WriteSingleCoil>(d.frame.pdu), (WriteSingleCoil{34, true}));
}

TEST(ModbusCodec, EmptyAndShortInputsAreIncomplete) {
  EXPECT_TRUE(std::holds_alternative<Incomplete>(decode_frame({}, Direction::request)));
  const auto full = encode_frame(make_frame(3, 1, ReadRequest{FunctionCode::read_holding_registers, 100, 4}));
  for (std::size_t n = 0; n < full.size(); ++n) {
    std::span<const std::uint8_t> prefix(full.data(), n);
    EXPECT_TRUE(std::holds_alternative<Incomplete>(decode_frame(prefix, Direction::request))) << n;
  }
}

TEST(ModbusCodec, RejectsProtocolId) {
  const auto in = hex({0x00, 0x01, 0x00, 0x01, 0x00, 0x06, 0x00, 0x05, 0x00, 0x22, 0xFF, 0x00});
  auto r = decode_frame(in, Direction::request);
  ASSERT_TRUE(std::holds_alternative<Invalid>(r));
  EXPECT_EQ(std::get<Invalid>(r).reason, "protocol id");
}

TEST(ModbusCodec, RejectsUnknownFunctionAndBadCounts) {
  auto bad_fc = hex({0, 1, 0, 0, 0, 6, 0, 0x2B, 0, 0, 0, 1});
  EXPECT_EQ(std::get<Invalid>(decode_frame(bad_fc, Direction::request)).reason, "function code");
  auto zero_count = hex({0, 1, 0, 0, 0, 6, 0, 0x03, 0, 0, 0, 0});
  EXPECT_EQ(std::get<Invalid>(decode_frame(zero_count, Direction::request)).reason, "count");
  auto too_many = hex({0, 1, 0, 0, 0, 6, 0, 0x01, 0, 0, 0x07, 0xD1});  // 2001 coils
  EXPECT_EQ(std::get<Invalid>(decode_frame(too_many, Direction::request)).reason, "count");
  auto coil_value = hex({0, 1, 0, 0, 0, 6, 0, 0x05, 0, 0x22, 0x12, 0x34});
  EXPECT_EQ(std::get<Invalid>(decode_frame(coil_value, Direction::request)).reason, "coil value");
}

TEST(ModbusCodec, DecoderStopsAtDeclaredLength) {
  auto a = encode_frame(make_frame(7, 0, WriteSingleRegister{110, 0xFFCE}));
  auto with_garbage = a;
  with_garbage.push_back(0xAA);
  auto d = expect_decoded(decode_frame(with_garbage, Direction::request));
  EXPECT_EQ(d.consumed, a.size());
}

TEST(ModbusCodec, EncodeRejectsInconsistentHeader) {
  MbapHeader h{1, 0, 9, 0};
  EXPECT_THROW((void)encode_frame(h, WriteSingleCoil{34, true}), CodecError);
  MbapHeader proto{1, 1, 6, 0};
  EXPECT_THROW((void)encode_frame(proto, WriteSingleCoil{34, true}), CodecError);
  EXPECT_THROW((void)encode_frame(make_frame(1, 0, WriteMultipleCoils{0, {}})), CodecError);
}

TEST(ModbusCodec, RoundTripProperty) {
  std::mt19937 rng(12345);
  for (int i = 0; i < 10000; ++i) {
    Direction dir;
    const auto frame = otbed::testing::random_frame(rng, dir);
    const auto bytes = encode_frame(frame);
    ASSERT_EQ(bytes.size(), 7 + frame.header.length - 1u);
    auto d = expect_decoded(decode_frame(bytes, dir));
    ASSERT_EQ(d.frame, frame);
    ASSERT_EQ(d.consumed, bytes.size());
  }
}

TEST(ModbusCodec, ConcatenatedFramesDecodeInOrder) {
  std::mt19937 rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Frame> frames;
    Bytes buf;
    const int k = std::uniform_int_distribution<int>(1, 6)(rng);
    for (int i = 0; i < k; ++i) {
      Direction dir;
      Frame f;
      do f = otbed::testing::random_frame(rng, dir); while (dir != Direction::request);
      auto b = encode_frame(f);
      buf.insert(buf.end(), b.begin(), b.end());
      frames.push_back(f);
    }
    std::size_t at = 0;
    for (const auto& expected : frames) {
      auto d = expect_decoded(decode_frame(std::span(buf).subspan(at), Direction::request));
      ASSERT_EQ(d.frame, expected);
      at += d.consumed;
    }
    EXPECT_EQ(at, buf.size());
  }
}

TEST(ModbusServer, WriteThenRead) {
  DataStore s;
  auto echo = apply_request(s, WriteSingleCoil{34, true});
  EXPECT_EQ(std::get<WriteSingleCoil>(echo), (WriteSingleCoil{34, true}));
  auto r = std::get<ReadBitsResponse>(apply_request(s, ReadRequest{FunctionCode::read_coils, 34, 1}));
  EXPECT_TRUE(r.bit(0));
  EXPECT_EQ(r.packed, Bytes{0x01});
}

TEST(ModbusServer, OutOfRangeIsIllegalDataAddress) {
  DataStore s;
  auto r = apply_request(s, ReadRequest{FunctionCode::read_holding_registers,
                                        static_cast<std::uint16_t>(s.holding_register_count()), 1});
  auto e = std::get<ExceptionResponse>(r);
  EXPECT_EQ(e.code, ExceptionCode::illegal_data_address);
  EXPECT_EQ(e.function, 0x83);
  // Straddling the end is rejected too, never wrapped.
  auto w = apply_request(s, WriteMultipleRegisters{1023, {1, 2}});
  EXPECT_EQ(std::get<ExceptionResponse>(w).code, ExceptionCode::illegal_data_address);
  EXPECT_EQ(s, DataStore{});
}

TEST(ModbusServer, WriteMultipleCoilsEchoesAddressAndCount) {
  DataStore s;
  auto r = std::get<WriteMultipleResponse>(apply_request(s, WriteMultipleCoils{34, {true}}));
  EXPECT_EQ(r.address, 34);
  EXPECT_EQ(r.count, 1);
  EXPECT_TRUE(s.coil(34));
}

TEST(ModbusServer, ResponsesAsRequestsAreIllegalFunction) {
  DataStore s;
  auto e = std::get<ExceptionResponse>(apply_request(s, WriteMultipleResponse{}));
  EXPECT_EQ(e.code, ExceptionCode::illegal_function);
  EXPECT_EQ(e.function, 0x8F);
}

TEST(ModbusServer, ReadsArePureAndExceptionsCarryHighBit) {
  std::mt19937 rng(7);
  DataStore s(64);
  for (int i = 0; i < 2000; ++i) {
    Direction dir;
    auto f = otbed::testing::random_frame(rng, dir);
    if (dir != Direction::request) continue;
    // Shrink addresses so some land in range.
    std::visit([&](auto& p) {
      if constexpr (requires { p.address; }) p.address %= 80;
    }, f.pdu);
    const DataStore before = s;
    auto resp = apply_request(s, f.pdu);
    if (std::holds_alternative<ReadRequest>(f.pdu)) EXPECT_EQ(s, before);
    if (auto* e = std::get_if<ExceptionResponse>(&resp)) {
      EXPECT_EQ(e->function, function_byte(f.pdu) + 0x80);
    }
  }
}

TEST(ModbusClient, TransactionIdsIncreaseAndWrap) {
  TransactionCounter a, b;
  EXPECT_EQ(a.next(), 0);
  EXPECT_EQ(a.next(), 1);
  EXPECT_EQ(a.next(), 2);
  EXPECT_EQ(b.next(), 0);
  TransactionCounter w(65535);
  EXPECT_EQ(w.next(), 65535);
  EXPECT_EQ(w.next(), 0);
}
