#include "doctest.h"
#include "step/kv.hpp"
#include "step/sim.hpp"

using namespace step;

namespace {

// One sim world with `shards` served stores and one client node at endpoint 0.
struct KvFixture {
  SimWorld world;
  NodeRuntime client_rt;
  std::vector<std::unique_ptr<NodeRuntime>> shard_rts;
  std::vector<std::unique_ptr<KvService>> services;
  std::unique_ptr<KvClient> client;

  explicit KvFixture(size_t shards, uint64_t capacity = 0, uint64_t seed = 1)
      : world(seed), client_rt(world, 0, 0) {
    client_rt.attach();
    std::vector<EndpointId> eps;
    for (size_t i = 0; i < shards; ++i) {
      EndpointId ep = EndpointId(100 + i);
      shard_rts.push_back(std::make_unique<NodeRuntime>(world, ep, 0));
      shard_rts.back()->attach();
      services.push_back(std::make_unique<KvService>(*shard_rts.back(), capacity));
      eps.push_back(ep);
    }
    client = std::make_unique<KvClient>(client_rt, eps);
  }

  void run(std::function<void()> fn) {
    world.spawn(0, std::move(fn));
    world.run_to_completion();
  }
};

}  // namespace

TEST_CASE("get/set/overwrite/delete basics") {
  KvFixture f(1);
  f.run([&] {
    CHECK(!f.client->get(42).has_value());
    f.client->set(42, {1, 2, 3});
    CHECK(f.client->get(42) == Bytes{1, 2, 3});
    f.client->set(42, {9});
    CHECK(f.client->get(42) == Bytes{9});  // last write wins
    CHECK(f.client->erase(42));
    CHECK(!f.client->erase(42));
    CHECK(!f.client->get(42).has_value());
    CHECK(f.client->insert(42, {5}));  // insert after delete succeeds
  });
}

TEST_CASE("insert is first-wins") {
  KvFixture f(2);
  f.run([&] {
    CHECK(f.client->insert(7, {1}));
    CHECK(!f.client->insert(7, {2}));
    CHECK(f.client->get(7) == Bytes{1});
  });
}

TEST_CASE("inc/dec semantics") {
  KvFixture f(1);
  f.run([&] {
    f.client->set(5, encode_i64(0));
    CHECK(f.client->inc(5, 1) == 1);
    CHECK(f.client->inc(5, 41) == 42);
    f.client->set(6, encode_i64(3));
    CHECK(f.client->dec(6, 5) == -2);
    CHECK_THROWS_AS(f.client->inc(77, 1), Error);  // missing key
    f.client->set(8, {1, 2});                      // malformed width
    CHECK_THROWS_AS(f.client->inc(8, 1), Error);
  });
}

TEST_CASE("mget matches element-wise gets and preserves order") {
  KvFixture f(3);
  f.run([&] {
    CHECK(f.client->mget({}).empty());
    f.client->set(1, {10});
    f.client->set(2, {20});
    f.client->set(5, {50});
    auto r = f.client->mget({5, 3, 1, 2});
    REQUIRE(r.size() == 4);
    CHECK(r[0] == Bytes{50});
    CHECK(!r[1].has_value());
    CHECK(r[2] == Bytes{10});
    CHECK(r[3] == Bytes{20});
  });
}

TEST_CASE("capacity overflow raises out-of-memory on the overflowing set") {
  KvFixture f(1, 1024);
  f.run([&] {
    Bytes half(512, 0xCC);
    f.client->set(1, half);
    f.client->set(2, half);  // exactly at capacity
    try {
      f.client->set(3, Bytes(1, 0));
      FAIL("expected out-of-memory");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::out_of_memory);
    }
    // overwrite at same size still fine; state unchanged by the failed set
    f.client->set(1, half);
    CHECK(!f.client->get(3).has_value());
  });
}

TEST_CASE("eviction never happens: keys only vanish via delete") {
  KvFixture f(2);
  f.run([&] {
    for (uint64_t k = 0; k < 200; ++k) f.client->set(k, {uint8_t(k)});
    for (uint64_t k = 0; k < 200; ++k) CHECK(f.client->get(k) == Bytes{uint8_t(k)});
  });
}

TEST_CASE("concurrent inserts to one key: exactly one winner") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    SimWorld world(seed);
    std::vector<std::unique_ptr<NodeRuntime>> rts;
    NodeRuntime shard_rt(world, 100, 0);
    shard_rt.attach();
    KvService svc(shard_rt);
    int winners = 0;
    for (int c = 0; c < 8; ++c) {
      rts.push_back(std::make_unique<NodeRuntime>(world, EndpointId(c), NodeId(c)));
      rts.back()->attach();
    }
    for (int c = 0; c < 8; ++c) {
      auto* rt = rts[c].get();
      world.spawn(EndpointId(c), [rt, c, &winners] {
        KvClient cl(*rt, {100});
        if (cl.insert(99, {uint8_t(c)})) ++winners;
      });
    }
    world.run_to_completion();
    CHECK(winners == 1);
  }
}

TEST_CASE("concurrent increments all land") {
  SimWorld world(11);
  NodeRuntime shard_rt(world, 100, 0);
  shard_rt.attach();
  KvService svc(shard_rt);
  svc.shard().set(0, encode_i64(0));
  std::vector<std::unique_ptr<NodeRuntime>> rts;
  for (int c = 0; c < 4; ++c) {
    rts.push_back(std::make_unique<NodeRuntime>(world, EndpointId(c), NodeId(c)));
    rts.back()->attach();
    auto* rt = rts.back().get();
    world.spawn(EndpointId(c), [rt] {
      KvClient cl(*rt, {100});
      for (int i = 0; i < 25; ++i) cl.inc(0, 1);
    });
  }
  world.run_to_completion();
  CHECK(decode_i64(*svc.shard().get(0)) == 100);
}

TEST_CASE("snapshot/restore round-trip") {
  KvFixture f(2);
  f.run([&] {
    for (uint64_t k = 0; k < 20; ++k) f.client->set(k, Bytes(k % 5, uint8_t(k)));
    auto snap = f.client->snapshot_all();
    f.client->set(3, {0xEE});
    f.client->erase(4);
    f.client->restore_all(snap);
    auto snap2 = f.client->snapshot_all();
    CHECK(snap == snap2);
  });
}
