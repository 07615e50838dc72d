#include <gtest/gtest.h>

#include "otbed/bridge.hpp"
#include "otbed/link.hpp"

using namespace otbed;
using factory::Table;

namespace {

const fabric::Ipv4 factory_ip = fabric::parse_ip("192.168.1.10");
const fabric::Ipv4 combine_ip = fabric::parse_ip("192.168.1.23");
const fabric::Ipv4 stranger_ip = fabric::parse_ip("192.168.1.66");

bridge::Bridge make(bool enforce = true) {
  bridge::BridgeConfig cfg;
  cfg.factory_ip = factory_ip;
  cfg.owners[combine_ip] = {{Table::coil, 33, 1}, {Table::coil, 34, 1}};
  cfg.enforce_ownership = enforce;
  return bridge::Bridge(cfg);
}

bool is_exception(const modbus::Pdu& p, modbus::ExceptionCode c) {
  const auto* e = std::get_if<modbus::ExceptionResponse>(&p);
  return e && e->code == c;
}

}  // namespace

TEST(Bridge, FactoryWritesLandInSensorTables) {
  auto b = make();
  auto r = b.route(factory_ip, modbus::WriteMultipleCoils{20, {true, false, true}});
  EXPECT_EQ(r, modbus::Pdu(modbus::WriteMultipleResponse{modbus::FunctionCode::write_multiple_coils, 20, 3}));
  EXPECT_TRUE(b.store().discrete_input(20));
  EXPECT_TRUE(b.store().discrete_input(22));
  EXPECT_FALSE(b.store().coil(20));
  (void)b.route(factory_ip, modbus::WriteMultipleRegisters{0, {5, 6}});
  EXPECT_EQ(b.store().input_register(1), 6);
  EXPECT_EQ(b.store().holding_register(1), 0);
  EXPECT_EQ(b.stats().sensor_updates, 2u);
}

TEST(Bridge, FactoryReadsActuatorsAndCannotUseSingleWrites) {
  auto b = make();
  b.store().set_coil(34, true);
  auto r = b.route(factory_ip, modbus::ReadRequest{modbus::FunctionCode::read_coils, 30, 8});
  ASSERT_TRUE(std::holds_alternative<modbus::ReadBitsResponse>(r));
  EXPECT_TRUE(std::get<modbus::ReadBitsResponse>(r).bit(4));
  EXPECT_TRUE(is_exception(b.route(factory_ip, modbus::WriteSingleCoil{1, true}), modbus::ExceptionCode::illegal_function));
  EXPECT_TRUE(is_exception(b.route(factory_ip, modbus::WriteMultipleCoils{1020, {1, 1, 1, 1, 1, 1}}),
                           modbus::ExceptionCode::illegal_data_address));
}

TEST(Bridge, PlcWritesOutsideOwnedBlocksRejected) {
  auto b = make();
  EXPECT_EQ(b.route(combine_ip, modbus::WriteSingleCoil{34, true}), modbus::Pdu(modbus::WriteSingleCoil{34, true}));
  EXPECT_TRUE(b.store().coil(34));
  auto r = b.route(combine_ip, modbus::WriteSingleRegister{100, 0});
  EXPECT_TRUE(is_exception(r, modbus::ExceptionCode::illegal_data_address));
  EXPECT_EQ(std::get<modbus::ExceptionResponse>(r).function, 0x86);
  EXPECT_TRUE(is_exception(b.route(combine_ip, modbus::WriteMultipleCoils{33, {true, true, true}}),
                           modbus::ExceptionCode::illegal_data_address));
  EXPECT_EQ(b.stats().ownership_rejections, 2u);
  // reads are unrestricted
  EXPECT_TRUE(std::holds_alternative<modbus::ReadRegistersResponse>(
      b.route(combine_ip, modbus::ReadRequest{modbus::FunctionCode::read_holding_registers, 100, 1})));
}

TEST(Bridge, OwnershipCanBeDisabled) {
  auto b = make(false);
  (void)b.route(combine_ip, modbus::WriteSingleRegister{100, 9});
  EXPECT_EQ(b.store().holding_register(100), 9);
}

TEST(Bridge, UnknownPeersAreUnrestricted) {
  auto b = make();
  EXPECT_EQ(b.route(stranger_ip, modbus::WriteMultipleCoils{0x22, {true}}),
            modbus::Pdu(modbus::WriteMultipleResponse{modbus::FunctionCode::write_multiple_coils, 0x22, 1}));
  EXPECT_TRUE(b.store().coil(34));
  EXPECT_TRUE(is_exception(b.route(stranger_ip, modbus::ReadBitsResponse{}), modbus::ExceptionCode::illegal_function));
}

TEST(Link, MalformedFrameDropsConnection) {
  fabric::Fabric fab;
  auto bn = fab.attach({"bridge", fabric::parse_ip("192.168.1.62")});
  auto cn = fab.attach({"client", stranger_ip});
  auto b = make();
  link::Host host{fab, bn};
  host.serve(502, [&](fabric::ConnId, fabric::Ipv4 peer, const modbus::Frame& f) {
    return std::optional<modbus::Pdu>(b.route(peer, f.pdu));
  });
  auto c = fab.tcp_connect(cn, fabric::parse_ip("192.168.1.62"), 502);
  ASSERT_TRUE(c.ok());
  fab.send(c.conn, fabric::Side::client, {0, 1, 0, 7, 0, 6, 1, 5, 0, 34, 0xFF, 0x00});  // protocol id 7
  fab.flush();
  EXPECT_EQ(host.dropped_malformed(), 1u);
  EXPECT_EQ(fab.connection(c.conn).server_state, fabric::ConnState::closed_rst);
  EXPECT_EQ(fab.connection(c.conn).client_state, fabric::ConnState::closed_rst);
  EXPECT_FALSE(b.store().coil(34));
}

TEST(Link, SessionTransactsAndAdvancesTransactionIds) {
  fabric::Fabric fab;
  const auto bip = fabric::parse_ip("192.168.1.62");
  auto bn = fab.attach({"bridge", bip});
  auto cn = fab.attach({"client", stranger_ip});
  auto b = make();
  link::Host server{fab, bn};
  server.serve(502, [&](fabric::ConnId, fabric::Ipv4 peer, const modbus::Frame& f) {
    return std::optional<modbus::Pdu>(b.route(peer, f.pdu));
  });
  link::Host client{fab, cn};
  auto& s = client.open(bip, 502, 1);
  EXPECT_FALSE(s.transact(modbus::WriteSingleCoil{1, true}));  // not connected yet
  ASSERT_TRUE(s.connect());
  EXPECT_EQ(s.transact(modbus::WriteSingleCoil{1, true}), modbus::Pdu(modbus::WriteSingleCoil{1, true}));
  EXPECT_EQ(s.next_transaction(), 1);
  s.drop();
  EXPECT_FALSE(s.connected());
  ASSERT_TRUE(s.connect());
  EXPECT_TRUE(s.transact(modbus::ReadRequest{modbus::FunctionCode::read_coils, 0, 8}));
}
