#include <gtest/gtest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <thread>

#include "otbed/interop.hpp"

using namespace otbed;

namespace {

struct LiveBridge {
  bridge::Bridge bridge{bridge::BridgeConfig{}};
  interop::BridgeServer server{bridge, "127.0.0.1", 0};
  std::atomic<bool> stop{false};
  std::thread loop{[this] { server.serve(stop); }};
  ~LiveBridge() {
    stop = true;
    loop.join();
  }
  interop::Endpoint endpoint() const { return {"127.0.0.1", server.port()}; }
};

std::uint16_t closed_port() {
  // bind, read the port, close: nothing listens there afterwards
  bridge::Bridge b{bridge::BridgeConfig{}};
  interop::BridgeServer s{b, "127.0.0.1", 0};
  return s.port();
}

}  // namespace

TEST(Interop, ParsesEndpoints) {
  const auto a = interop::parse_endpoint("10.0.0.5");
  EXPECT_EQ(a.host, "10.0.0.5");
  EXPECT_EQ(a.port, 502);
  const auto b = interop::parse_endpoint("localhost:5020");
  EXPECT_EQ(b.host, "localhost");
  EXPECT_EQ(b.port, 5020);
  EXPECT_THROW((void)interop::parse_endpoint("host:0"), std::invalid_argument);
  EXPECT_THROW((void)interop::parse_endpoint("host:http"), std::invalid_argument);
  EXPECT_THROW((void)interop::parse_endpoint(":502"), std::invalid_argument);
}

TEST(Interop, ForgedCoilOverARealSocket) {
  LiveBridge live;
  attacks::CoilForgery f;  // FC05 coil 34 on, unit 0
  const auto r = interop::forge_write(live.endpoint(), f);
  ASSERT_EQ(r.status, attacks::ForgeResult::Status::echoed);
  // FC05 answers with an echo of the request
  EXPECT_EQ(*r.response, attacks::forgery_request(f));
  EXPECT_TRUE(live.bridge.store().coil(34));
  EXPECT_EQ(live.server.requests(), 1u);
}

TEST(Interop, MultipleCoilsAndOutOfRangeAddress) {
  LiveBridge live;
  attacks::CoilForgery f;
  f.function = modbus::FunctionCode::write_multiple_coils;
  f.address = 40;
  f.values = {true, false, true};
  ASSERT_EQ(interop::forge_write(live.endpoint(), f).status, attacks::ForgeResult::Status::echoed);
  EXPECT_TRUE(live.bridge.store().coil(40));
  EXPECT_FALSE(live.bridge.store().coil(41));
  EXPECT_TRUE(live.bridge.store().coil(42));

  attacks::CoilForgery far;
  far.address = 5000;
  const auto r = interop::forge_write(live.endpoint(), far);
  ASSERT_EQ(r.status, attacks::ForgeResult::Status::exception);
  const auto& ex = std::get<modbus::ExceptionResponse>(*r.response);
  EXPECT_EQ(ex.function, 0x85);
  EXPECT_EQ(ex.code, modbus::ExceptionCode::illegal_data_address);
}

TEST(Interop, NobodyListening) {
  attacks::CoilForgery f;
  const auto r = interop::forge_write({"127.0.0.1", closed_port()}, f, std::chrono::milliseconds(500));
  EXPECT_EQ(r.status, attacks::ForgeResult::Status::refused);
  EXPECT_FALSE(r.response);
}

TEST(Interop, MalformedFrameDropsTheConnection) {
  LiveBridge live;
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in a{};
  a.sin_family = AF_INET;
  a.sin_port = htons(live.server.port());
  a.sin_addr.s_addr = htonl(fabric::parse_ip("127.0.0.1"));
  ASSERT_EQ(::connect(fd, reinterpret_cast<sockaddr*>(&a), sizeof a), 0);
  // protocol id 0x1234 instead of 0
  const std::uint8_t bad[] = {0x00, 0x01, 0x12, 0x34, 0x00, 0x06, 0x00, 0x05, 0x00, 0x22, 0xFF, 0x00};
  ASSERT_EQ(::send(fd, bad, sizeof bad, 0), static_cast<ssize_t>(sizeof bad));
  timeval tv{2, 0};
  ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
  std::uint8_t buf[64];
  EXPECT_EQ(::recv(fd, buf, sizeof buf, 0), 0);  // orderly close, no reply
  ::close(fd);
  EXPECT_FALSE(live.bridge.store().coil(34));
  // the server keeps serving others
  attacks::CoilForgery f;
  EXPECT_EQ(interop::forge_write(live.endpoint(), f).status, attacks::ForgeResult::Status::echoed);
}

TEST(Interop, ConnectScanFindsTheListener) {
  LiveBridge live;
  const auto hits = interop::connect_scan(fabric::parse_ip("127.0.0.0"), 30, live.server.port());
  ASSERT_EQ(hits.size(), 2u);
  EXPECT_EQ(hits[0].address, fabric::parse_ip("127.0.0.1"));
  EXPECT_TRUE(hits[0].open);
  EXPECT_EQ(hits[1].address, fabric::parse_ip("127.0.0.2"));
  EXPECT_FALSE(hits[1].open);
  EXPECT_THROW((void)interop::connect_scan(0, 8, 502), std::invalid_argument);
}
