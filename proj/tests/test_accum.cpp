#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace step;
using step::testing::MiniCluster;
using step::testing::grouped_sum;

TEST_CASE("chunk ranges: ceiling-first even split") {
  auto r = chunk_ranges(10, 3);
  REQUIRE(r.size() == 3);
  CHECK(r[0].lo == 0);
  CHECK(r[0].hi == 4);
  CHECK(r[1].lo == 4);
  CHECK(r[1].hi == 7);
  CHECK(r[2].lo == 7);
  CHECK(r[2].hi == 10);
  auto e = chunk_ranges(2, 4);
  CHECK(e[0].size() == 1);
  CHECK(e[1].size() == 1);
  CHECK(e[2].size() == 0);
  CHECK(e[3].size() == 0);
  CHECK(nonempty_ranges(2, 4) == 2);
  CHECK(nonempty_ranges(0, 4) == 0);
}

TEST_CASE("sparse encoding") {
  std::vector<int32_t> v = {0, 0, 5, 0};
  auto pairs = AccumService::encode_sparse(reinterpret_cast<const uint8_t*>(v.data()), 4,
                                           ElemKind::i32);
  REQUIRE(pairs.size() == 1);
  CHECK(pairs[0].first == 2);
  CHECK(int32_t(pairs[0].second) == 5);
}

TEST_CASE("auto mode picks the cheaper encoding") {
  // all-zero: sparse costs 0 bytes
  std::vector<int32_t> zeros(16, 0);
  CHECK(AccumService::pick_sparse(reinterpret_cast<const uint8_t*>(zeros.data()), 16,
                                  ElemKind::i32, AccumMode::auto_pick));
  // 60 of 100 nonzero, 32-bit: sparse 60*8=480 > dense 400
  std::vector<int32_t> dense_ish(100, 0);
  for (int i = 0; i < 60; ++i) dense_ish[i] = i + 1;
  CHECK(!AccumService::pick_sparse(reinterpret_cast<const uint8_t*>(dense_ish.data()), 100,
                                   ElemKind::i32, AccumMode::auto_pick));
  // exactly at the break-even point the dense form wins
  std::vector<int32_t> half(16, 0);
  for (int i = 0; i < 8; ++i) half[i] = 1;
  CHECK(!AccumService::pick_sparse(reinterpret_cast<const uint8_t*>(half.data()), 16,
                                   ElemKind::i32, AccumMode::auto_pick));
}

namespace {

// Runs one accumulate round with the given per-participant vectors, spreading
// participants over the nodes round-robin-by-block, and returns the output
// array contents.
template <typename T>
std::vector<T> run_accum(MiniCluster& c, uint32_t nparts, uint32_t len, AccumMode mode,
                         const std::vector<std::vector<T>>& vecs,
                         const std::vector<uint32_t>& group_of,
                         const std::vector<NodeId>& placement) {
  ArrayHandle<T> out;
  AccumInfo info;
  c.run(0, [&] {
    out = c.shm(0).new_array<T>(len);
    info = c.accum_controller->create(nparts, out.object_id, len, ElemTraits<T>::kind, mode,
                                      group_of);
  });
  for (uint32_t p = 0; p < nparts; ++p) {
    NodeId node = placement[p];
    c.spawn_on(node, [&, p, node] {
      c.accum(node).accumulate<T>(info.accum_id, p, vecs[p]);
    });
  }
  c.world.run_to_completion();
  std::vector<T> result(len);
  c.run(0, [&] { c.shm(0).copy_to(out, result.data(), 0, len); });
  return result;
}

}  // namespace

TEST_CASE("three participants sum elementwise") {
  MiniCluster c(3);
  std::vector<std::vector<int32_t>> vecs = {{1, 2}, {3, 4}, {5, 6}};
  auto out = run_accum<int32_t>(c, 3, 2, AccumMode::dense, vecs, {0, 1, 2}, {0, 1, 2});
  CHECK(out == std::vector<int32_t>{9, 12});
}

TEST_CASE("single participant copies through") {
  MiniCluster c(2);
  std::vector<std::vector<float>> vecs = {{1.5f, -2.5f, 0.0f}};
  auto out = run_accum<float>(c, 1, 3, AccumMode::dense, vecs, {0}, {1});
  CHECK(out == vecs[0]);
}

TEST_CASE("zero-length accumulate is a pure barrier") {
  MiniCluster c(2);
  ArrayHandle<float> out;
  AccumInfo info;
  c.run(0, [&] {
    out = c.shm(0).new_array<float>(1);
    info = c.accum_controller->create(3, out.object_id, 0, ElemKind::f32, AccumMode::dense,
                                      {0, 0, 1});
  });
  int done = 0;
  for (uint32_t p = 0; p < 3; ++p) {
    NodeId node = p < 2 ? 0 : 1;
    c.spawn_on(node, [&, p, node] {
      std::vector<float> empty;
      c.accum(node).accumulate<float>(info.accum_id, p, empty);
      ++done;
    });
  }
  c.world.run_to_completion();
  CHECK(done == 3);
}

TEST_CASE("dense, sparse and auto agree; floats bitwise-match the grouped oracle") {
  std::mt19937 rng(77);
  for (int rep = 0; rep < 12; ++rep) {
    uint32_t nparts = 1 + rng() % 6;
    uint32_t len = 1 + rng() % 400;
    std::uniform_real_distribution<float> dist(-5, 5);
    std::vector<std::vector<float>> vecs(nparts, std::vector<float>(len));
    for (auto& v : vecs) {
      for (auto& x : v) x = (rng() % 4 == 0) ? 0.0f : dist(rng);
    }
    std::vector<NodeId> placement(nparts);
    std::vector<uint32_t> group_of(nparts);
    for (uint32_t p = 0; p < nparts; ++p) {
      placement[p] = NodeId(rng() % 3);
      group_of[p] = placement[p];
    }
    auto expect = grouped_sum(vecs, group_of);
    std::vector<std::vector<float>> results;
    for (AccumMode mode : {AccumMode::dense, AccumMode::sparse, AccumMode::auto_pick}) {
      MiniCluster c(3, 2, {}, 1000 + rep);
      results.push_back(run_accum<float>(c, nparts, len, mode, vecs, group_of, placement));
    }
    CHECK(results[0] == expect);  // bitwise: same grouping, same order
    CHECK(results[1] == expect);
    CHECK(results[2] == expect);
  }
}

TEST_CASE("pre-combined group contributions are bitwise identical") {
  std::mt19937 rng(5);
  uint32_t len = 101;
  // 4 participants: group 0 = {0,1} on node 1, group 1 = {2,3} on node 2
  std::vector<std::vector<float>> vecs(4, std::vector<float>(len));
  std::uniform_real_distribution<float> dist(-1, 1);
  for (auto& v : vecs) {
    for (auto& x : v) x = dist(rng);
  }
  std::vector<uint32_t> group_of = {1, 1, 2, 2};

  MiniCluster c1(3);
  auto individual =
      run_accum<float>(c1, 4, len, AccumMode::dense, vecs, group_of, {1, 1, 2, 2});

  // combined: one leader per node pre-sums member vectors in ordinal order
  MiniCluster c2(3);
  ArrayHandle<float> out;
  AccumInfo info;
  c2.run(0, [&] {
    out = c2.shm(0).new_array<float>(len);
    info = c2.accum_controller->create(4, out.object_id, len, ElemKind::f32, AccumMode::dense,
                                       group_of);
  });
  for (NodeId node : {NodeId(1), NodeId(2)}) {
    c2.spawn_on(node, [&, node] {
      std::vector<float> partial(len, 0.0f);
      for (uint32_t p = node == 1 ? 0u : 2u; p < (node == 1 ? 2u : 4u); ++p) {
        for (uint32_t i = 0; i < len; ++i) partial[i] += vecs[p][i];
      }
      c2.accum(node).accumulate_combined<float>(info.accum_id, node, partial);
    });
    // the non-leader member of the group still joins the round
    c2.spawn_on(node, [&, node] { c2.accum(node).join_round(info.accum_id); });
  }
  c2.world.run_to_completion();
  std::vector<float> combined(len);
  c2.run(0, [&] { c2.shm(0).copy_to(out, combined.data(), 0, len); });

  CHECK(combined == individual);
}

TEST_CASE("same-node chunks never touch the wire") {
  MiniCluster c(1);  // single node: every chunk is local
  std::vector<std::vector<int32_t>> vecs = {{1, 2, 3}, {4, 5, 6}};
  auto out = run_accum<int32_t>(c, 2, 3, AccumMode::dense, vecs, {0, 0}, {0, 0});
  CHECK(out == std::vector<int32_t>{5, 7, 9});
  CHECK(c.world.frames_by_type(MsgType::ACCUM_CHUNK) == 0);
}

TEST_CASE("sparse payload is smaller on sparse data, dense on dense data") {
  auto measure = [&](AccumMode mode, double zero_frac) {
    MiniCluster c(3);
    std::mt19937 rng(9);
    uint32_t len = 900;
    std::vector<std::vector<float>> vecs(2, std::vector<float>(len, 0.0f));
    for (auto& v : vecs) {
      for (auto& x : v) {
        if (std::uniform_real_distribution<double>(0, 1)(rng) >= zero_frac) x = 1.5f;
      }
    }
    run_accum<float>(c, 2, len, mode, vecs, {0, 1}, {1, 2});
    return c.world.bytes_by_type(MsgType::ACCUM_CHUNK);
  };
  CHECK(measure(AccumMode::sparse, 0.9) < measure(AccumMode::dense, 0.9));
  CHECK(measure(AccumMode::auto_pick, 0.9) == measure(AccumMode::sparse, 0.9));
  CHECK(measure(AccumMode::auto_pick, 0.05) == measure(AccumMode::dense, 0.05));
}

TEST_CASE("rounds advance and reuse the accumulator") {
  MiniCluster c(2);
  ArrayHandle<int32_t> out;
  AccumInfo info;
  c.run(0, [&] {
    out = c.shm(0).new_array<int32_t>(4);
    info = c.accum_controller->create(2, out.object_id, 4, ElemKind::i32, AccumMode::dense,
                                      {0, 1});
  });
  std::vector<std::vector<int32_t>> finals(2);
  for (uint32_t p = 0; p < 2; ++p) {
    NodeId node = NodeId(p);
    c.spawn_on(node, [&, p, node] {
      std::vector<int32_t> v(4);
      for (int round = 0; round < 5; ++round) {
        for (int i = 0; i < 4; ++i) v[i] = int32_t((p + 1) * (round + 1));
        c.accum(node).accumulate<int32_t>(info.accum_id, p, v);
        std::vector<int32_t> got(4);
        c.shm(node).copy_to(out, got.data(), 0, 4);
        finals[p] = got;
      }
    });
  }
  c.world.run_to_completion();
  // last round: (1+2)*5 = 15 everywhere, visible to both participants
  CHECK(finals[0] == std::vector<int32_t>(4, 15));
  CHECK(finals[1] == std::vector<int32_t>(4, 15));
}
