#include "doctest.h"
#include "step/wire.hpp"

using namespace step;

TEST_CASE("frame round-trip") {
  Frame f;
  f.type = MsgType::HEARTBEAT;
  f.payload = {1, 2, 3, 4, 5};
  Bytes wire = encode_frame(f);
  CHECK(wire.size() == 12);
  CHECK(wire[0] == 0x53);
  CHECK(wire[1] == 0x54);
  size_t off = 0;
  auto g = try_decode_frame(wire, off);
  REQUIRE(g.has_value());
  CHECK(g->type == MsgType::HEARTBEAT);
  CHECK(g->payload == f.payload);
  CHECK(off == wire.size());
}

TEST_CASE("partial frame is not consumed") {
  Frame f;
  f.type = MsgType::KV_GET;
  f.payload = Bytes(100, 7);
  Bytes wire = encode_frame(f);
  Bytes cut(wire.begin(), wire.begin() + 20);
  size_t off = 0;
  CHECK(!try_decode_frame(cut, off).has_value());
  CHECK(off == 0);
}

TEST_CASE("unknown message type is a protocol error") {
  Bytes wire = {0x53, 0x54, 0xEE, 0, 0, 0, 0};
  size_t off = 0;
  CHECK_THROWS_AS((void)try_decode_frame(wire, off), Error);
}

TEST_CASE("bad magic is a protocol error") {
  Bytes wire = {0x00, 0x54, 0x05, 0, 0, 0, 0};
  size_t off = 0;
  CHECK_THROWS_AS((void)try_decode_frame(wire, off), Error);
}

TEST_CASE("writer/reader scalar round-trip") {
  Writer w;
  w.u8(200).u32(123456).u64(0xFFFFFFFF00000000ull).i64(-5).f32(3.14f).f64(-2.5).str("hi");
  Bytes b = w.take();
  Reader r(b);
  CHECK(r.u8() == 200);
  CHECK(r.u32() == 123456);
  CHECK(r.u64() == 0xFFFFFFFF00000000ull);
  CHECK(r.i64() == -5);
  CHECK(r.f32() == 3.14f);
  CHECK(r.f64() == -2.5);
  CHECK(r.str() == "hi");
  CHECK(r.done());
}

TEST_CASE("reader bounds checked") {
  Bytes b = {1, 2};
  Reader r(b);
  CHECK_THROWS_AS(r.u32(), Error);
}
