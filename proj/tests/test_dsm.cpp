#include "doctest.h"
#include "fixtures.hpp"

using namespace step;
using step::testing::MiniCluster;

TEST_CASE("address compose/decompose") {
  CHECK(compose_addr(3, 7) == 0x0000000300000007ull);
  CHECK(compose_addr(0, 12) == 0x000000000000000Cull);
  auto [o, f] = decompose_addr(0xFFFFFFFF00000000ull);
  CHECK(o == 0xFFFFFFFFull);
  CHECK(f == 0);
  // identity
  for (uint64_t oid : {0ull, 1ull, 77ull}) {
    for (uint64_t fid : {0ull, 31ull, 12345ull}) {
      auto [a, b] = decompose_addr(compose_addr(oid, fid));
      CHECK(a == oid);
      CHECK(b == fid);
    }
  }
  CHECK_THROWS_AS(compose_addr(1ull << 33, 0, 32), Error);
  CHECK_THROWS_AS(compose_addr(0, 1ull << 40, 32), Error);
  // non-default split
  CHECK(compose_addr(5, 9, 16) == ((5ull << 48) | 9));
}

TEST_CASE("watcher mapping") {
  CHECK(watcher_of(10, 4) == 2);
  CHECK(watcher_of(5, 16) == 5);
  CHECK(watcher_of(123456789, 1) == 0);
}

TEST_CASE("unwritten DSM reads as zero") {
  MiniCluster c(2);
  c.run(0, [&] {
    auto v = c.dsm(0).read_words(compose_addr(9, 100), 5);
    CHECK(v == std::vector<Word>(5, 0));
  });
}

static void write_read_visibility(DsmMode mode) {
  MiniCluster c(3, 2, DsmConfig{.mode = mode});
  Addr a = compose_addr(4, 2);
  c.spawn_on(1, [&] { c.dsm(1).write_words(a, {0xDEADBEEF}); });
  c.world.run_to_completion();
  c.run(2, [&] { CHECK(c.dsm(2).read_word(a) == 0xDEADBEEF); });
}

TEST_CASE("write-through visibility, coarse") { write_read_visibility(DsmMode::coarse); }
TEST_CASE("write-through visibility, fine") { write_read_visibility(DsmMode::fine); }

TEST_CASE("cache hit costs zero wire bytes") {
  MiniCluster c(2);
  Addr a = compose_addr(1, 0);
  c.run(1, [&] { c.dsm(1).write_words(a, {7}); });
  c.run(0, [&] { CHECK(c.dsm(0).read_word(a) == 7); });
  uint64_t before = c.world.total_bytes();
  c.run(0, [&] {
    CHECK(c.dsm(0).read_word(a) == 7);
    CHECK(c.dsm(0).read_words(a, 1)[0] == 7);
  });
  CHECK(c.world.total_bytes() == before);
}

TEST_CASE("write updates local cache copy") {
  MiniCluster c(2);
  Addr a = compose_addr(2, 5);
  c.run(0, [&] {
    (void)c.dsm(0).read_word(a);  // install
    c.dsm(0).write_words(a, {123});
  });
  uint64_t before = c.world.total_bytes();
  c.run(0, [&] { CHECK(c.dsm(0).read_word(a) == 123); });
  CHECK(c.world.total_bytes() == before);  // served from the updated copy
}

TEST_CASE("remote write invalidates cached copies") {
  for (uint64_t seed = 0; seed < 50; ++seed) {
    MiniCluster c(3, 1, {}, seed);
    Addr a = compose_addr(6, 3);
    c.run(0, [&] { (void)c.dsm(0).read_word(a); });  // node 0 caches the block
    c.run(1, [&] { c.dsm(1).write_words(a, {42}); });
    uint64_t hits_before = c.world.total_bytes();
    c.run(0, [&] { CHECK(c.dsm(0).read_word(a) == 42); });
    CHECK(c.world.total_bytes() > hits_before);  // had to refetch: copy was dead
  }
}

TEST_CASE("sole sharer write sends no invalidations") {
  MiniCluster c(3);
  Addr a = compose_addr(6, 3);
  c.run(1, [&] {
    (void)c.dsm(1).read_word(a);
    c.dsm(1).write_words(a, {1});
  });
  CHECK(c.world.frames_by_type(MsgType::CACHE_INVALIDATE) == 0);
  c.run(2, [&] { (void)c.dsm(2).read_word(a); });
  c.run(1, [&] { c.dsm(1).write_words(a, {2}); });
  CHECK(c.world.frames_by_type(MsgType::CACHE_INVALIDATE) == 1);
}

TEST_CASE("atomic counters") {
  MiniCluster c(3);
  Addr ctr = compose_addr(0, 0xFFFFFFF0ull);
  c.run(0, [&] { CHECK(c.dsm(0).atomic_inc(ctr, 1) == 1); });
  for (NodeId n = 0; n < 3; ++n) {
    c.spawn_on(n, [&, n] {
      for (int i = 0; i < 50; ++i) c.dsm(n).atomic_inc(ctr, 1);
    });
  }
  c.world.run_to_completion();
  c.run(1, [&] { CHECK(c.dsm(1).atomic_read(ctr) == 151); });
  c.run(2, [&] { CHECK(c.dsm(2).atomic_dec(ctr, 151) == 0); });
}

TEST_CASE("remote atomic_inc invalidates the counter's cached block") {
  MiniCluster c(2);
  Addr ctr = compose_addr(0, 0xFFFFFFF0ull);
  Addr neighbor = ctr + 2;
  c.run(0, [&] { (void)c.dsm(0).read_word(neighbor); });  // caches the block
  CHECK(c.dsm(0).cache().resident() == 1);
  c.run(1, [&] { c.dsm(1).atomic_inc(ctr, 5); });
  CHECK(c.dsm(0).cache().resident() == 0);
  c.run(0, [&] { CHECK(c.dsm(0).atomic_read(ctr) == 5); });
}

TEST_CASE("strict LRU eviction with watcher dereg") {
  DsmConfig cfg;
  cfg.cache_blocks = 4;
  MiniCluster c(2, 1, cfg);
  auto addr_of_block = [](uint64_t i) { return compose_addr(8, i * kBlockWords); };
  c.run(0, [&] {
    for (uint64_t i = 0; i < 4; ++i) (void)c.dsm(0).read_word(addr_of_block(i));
    CHECK(c.dsm(0).cache().resident() == 4);
    (void)c.dsm(0).read_word(addr_of_block(0));  // touch block 0
    (void)c.dsm(0).read_word(addr_of_block(4));  // evicts block 1 (LRU)
  });
  CHECK(c.dsm(0).cache().resident() == 4);
  CHECK(c.dsm(0).cache().peek(block_of(addr_of_block(0))) != nullptr);
  CHECK(c.dsm(0).cache().peek(block_of(addr_of_block(1))) == nullptr);
  // watcher no longer lists node 0 for the evicted block
  c.world.run_until_quiescent();
  uint64_t evicted = block_of(addr_of_block(1));
  NodeId w = watcher_of(evicted, 2);
  CHECK(c.dsm(w).directory(w).sharers_of(evicted).count(0) == 0);
  // and still lists it for a resident one
  uint64_t kept = block_of(addr_of_block(0));
  CHECK(c.dsm(watcher_of(kept, 2)).directory(watcher_of(kept, 2)).sharers_of(kept).count(0) == 1);
}

TEST_CASE("explicit evict_lru on empty cache") {
  MiniCluster c(1);
  CHECK(!c.dsm(0).evict_lru().has_value());
}

TEST_CASE("coarse partial-package writes do not lose concurrent updates") {
  for (uint64_t seed = 0; seed < 60; ++seed) {
    MiniCluster c(3, 2, {}, seed);
    Addr base = compose_addr(3, 0);
    c.spawn_on(1, [&] { c.dsm(1).write_words(base + 1, {111}); });
    c.spawn_on(2, [&] { c.dsm(2).write_words(base + 2, {222}); });
    c.world.run_to_completion();
    c.run(0, [&] {
      auto v = c.dsm(0).read_words(base, 4);
      CHECK(v[1] == 111);
      CHECK(v[2] == 222);
    });
  }
}

TEST_CASE("fine-mode multi-word writes are not torn by writers") {
  for (uint64_t seed = 0; seed < 60; ++seed) {
    DsmConfig cfg;
    cfg.mode = DsmMode::fine;
    MiniCluster c(3, 2, cfg, seed);
    Addr a = compose_addr(5, 8);
    c.spawn_on(1, [&] { c.dsm(1).write_words(a, {1, 1}); });
    c.spawn_on(2, [&] { c.dsm(2).write_words(a, {2, 2}); });
    c.world.run_to_completion();
    c.run(0, [&] {
      auto v = c.dsm(0).read_words(a, 2);
      bool ok = (v[0] == 1 && v[1] == 1) || (v[0] == 2 && v[1] == 2);
      CHECK(ok);
    });
  }
}

TEST_CASE("erase_range restores zero-fill and kills caches") {
  MiniCluster c(2);
  Addr a = compose_addr(7, 0);
  c.run(0, [&] { c.dsm(0).write_words(a, {1, 2, 3}); });
  c.run(1, [&] { CHECK(c.dsm(1).read_words(a, 3) == std::vector<Word>{1, 2, 3}); });
  c.run(0, [&] { c.dsm(0).erase_range(a, 3); });
  c.run(1, [&] { CHECK(c.dsm(1).read_words(a, 3) == std::vector<Word>(3, 0)); });
}

TEST_CASE("multi-block read/write round-trips") {
  for (DsmMode mode : {DsmMode::coarse, DsmMode::fine}) {
    DsmConfig cfg;
    cfg.mode = mode;
    cfg.package_words = 8;
    MiniCluster c(2, 3, cfg);
    Addr a = compose_addr(11, 17);  // unaligned start
    std::vector<Word> data(200);
    for (size_t i = 0; i < data.size(); ++i) data[i] = Word(i * 7 + 1);
    c.run(0, [&] { c.dsm(0).write_words(a, data); });
    c.run(1, [&] { CHECK(c.dsm(1).read_words(a, 200) == data); });
    // partially overlapping read
    c.run(1, [&] {
      auto v = c.dsm(1).read_words(a + 5, 20);
      for (int i = 0; i < 20; ++i) CHECK(v[i] == data[i + 5]);
    });
  }
}

TEST_CASE("directory soundness at quiescence") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    MiniCluster c(3, 1, {}, seed);
    Addr a = compose_addr(1, 0);
    for (NodeId n = 0; n < 3; ++n) {
      c.spawn_on(n, [&, n] {
        for (int i = 0; i < 5; ++i) {
          (void)c.dsm(n).read_words(a + (n * 16) % 64, 3);
          c.dsm(n).write_words(a + (i * 8) % 64, {Word(n * 100 + i)});
        }
      });
    }
    c.world.run_to_completion();
    // every cached block must appear in its watcher's directory
    for (NodeId n = 0; n < 3; ++n) {
      for (uint64_t b : c.dsm(n).cache().resident_blocks()) {
        NodeId w = watcher_of(b, 3);
        CHECK(c.dsm(w).directory(w).sharers_of(b).count(n) == 1);
      }
    }
  }
}
