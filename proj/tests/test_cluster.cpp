#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "step/cluster.hpp"
#include "step/fault.hpp"

using namespace step;

namespace {

ClusterConfig sim_config(uint32_t slaves, uint32_t stores = 1) {
  ClusterConfig cfg;
  cfg.master = "sim";
  for (uint32_t i = 0; i < slaves; ++i) cfg.slaves.push_back("sim" + std::to_string(i + 1));
  for (uint32_t i = 0; i < stores; ++i) cfg.stores.push_back("simstore" + std::to_string(i));
  cfg.heartbeat_ms = 50;
  cfg.failure_timeout_ms = 250;
  return cfg;
}

}  // namespace

TEST_CASE("config parsing: values, defaults, round-trip") {
  std::string text =
      "# a comment\n"
      "master = 127.0.0.1:7000\n"
      "slaves = 127.0.0.1:7001, 127.0.0.1:7002\n"
      "dsm_mode = fine\n"
      "checkpoint_every = 5\n";
  ClusterConfig cfg = ClusterConfig::parse_text(text);
  CHECK(cfg.master == "127.0.0.1:7000");
  CHECK(cfg.slaves.size() == 2);
  CHECK(cfg.node_count() == 3);
  CHECK(cfg.dsm_mode == DsmMode::fine);
  CHECK(cfg.package_words == 32);      // defaults
  CHECK(cfg.cache_blocks == 1024);
  CHECK(cfg.heartbeat_ms == 500);
  CHECK(cfg.failure_timeout_ms == 2500);
  CHECK(cfg.accum_mode == AccumMode::auto_pick);
  CHECK(cfg.checkpoint_every == 5);
  // round-trip
  ClusterConfig again = ClusterConfig::parse_text(cfg.serialize());
  CHECK(again.serialize() == cfg.serialize());
}

TEST_CASE("config parsing: errors name the line") {
  CHECK_THROWS_WITH_AS(ClusterConfig::parse_text("slaves = a\nslaves = b\n"),
                       doctest::Contains(":2"), Error);
  CHECK_THROWS_WITH_AS(ClusterConfig::parse_text("bogus_key = 1\n"),
                       doctest::Contains("unknown key"), Error);
  CHECK_THROWS_AS(ClusterConfig::parse_text(""), Error);  // missing slaves
  CHECK_THROWS_AS(ClusterConfig::parse_text("slaves = a\npackage_words = nope\n"), Error);
  CHECK_THROWS_AS(ClusterConfig::parse_text("slaves = a\ndsm_mode = medium\n"), Error);
}

TEST_CASE("handshake reaches ready on all nodes") {
  SimCluster c(sim_config(2), nullptr, {});
  CHECK(c.master().config().node_count() == 3);
  CHECK(c.node(1).config().node_count() == 3);
  bool ran = false;
  c.run_main([&](ClusterNode& m) {
    ran = true;
    CHECK(m.is_master());
    CHECK(m.detect_failures().empty());
    m.close_cluster();
    m.close_cluster();  // idempotent
  });
  CHECK(ran);
}

TEST_CASE("digest mismatch aborts init") {
  // Build nodes by hand so one of them declares different shared data.
  ClusterConfig cfg = sim_config(2);
  SimWorld world(1);
  std::vector<std::unique_ptr<NodeRuntime>> shard_rts;
  std::vector<std::unique_ptr<KvService>> shards;
  shard_rts.push_back(std::make_unique<NodeRuntime>(world, shard_endpoint(0), 0));
  shard_rts.back()->attach();
  shards.push_back(std::make_unique<KvService>(*shard_rts.back()));
  struct NoDecls : AppDecls {};
  AppSpec plain{"plain",
                [](Catalog&, const std::vector<std::string>&) {
                  return std::make_unique<NoDecls>();
                },
                {}};
  AppSpec other{"plain",
                [](Catalog& cat, const std::vector<std::string>&) {
                  cat.declare_global_raw("extra", ElemKind::i32);
                  return std::make_unique<NoDecls>();
                },
                {}};
  std::vector<std::unique_ptr<ClusterNode>> nodes;
  for (NodeId id = 0; id < 3; ++id) {
    nodes.push_back(std::make_unique<ClusterNode>(world, id, cfg));
    nodes.back()->apply_app(id == 2 ? other : plain, {});
  }
  bool mismatch = false;
  bool done = false;
  world.spawn(0, [&] {
    try {
      nodes[0]->master_init();
    } catch (const Error& e) {
      mismatch = e.code() == Errc::digest_mismatch;
    }
    done = true;
  });
  // a ready slave's heartbeat timer keeps the world alive; drive until the
  // master task finished instead of until quiescence
  for (int i = 0; i < 100000 && !done; ++i) {
    if (world.step() == SimWorld::kStepNone) break;
  }
  CHECK(done);
  CHECK(mismatch);
}

namespace {

// Test app: each worker raises a DSM flag cell for its param and exits.
struct FlagDecls : AppDecls {
  Global<ObjRef> flags;
};

AppSpec flag_app() {
  AppSpec app;
  app.name = "flags";
  app.declare = [](Catalog& cat, const std::vector<std::string>&) {
    auto d = std::make_unique<FlagDecls>();
    d->flags = cat.declare_global<ObjRef>("flag_array");
    return d;
  };
  app.register_entries = [](EntryRegistry& reg) {
    reg.add("flag_worker", [](Worker& w) {
      auto* d = w.decls<FlagDecls>();
      auto arr = w.shm().array_from_ref<int32_t>(w.shm().get(d->flags));
      w.shm().set_elem<int32_t>(arr, w.param(), int32_t(w.param()) * 10 + 1);
    });
  };
  return app;
}

}  // namespace

TEST_CASE("workers observe their params; states progress to completed") {
  AppSpec app = flag_app();
  SimCluster c(sim_config(2), &app, {});
  c.run_main([&](ClusterNode& m) {
    auto* decls = dynamic_cast<FlagDecls*>(m.decls());
    REQUIRE(decls != nullptr);
    auto arr = m.shm().new_array<int32_t>(4);
    m.shm().set(decls->flags, arr.ref());
    uint32_t func = m.registry().id_of("flag_worker");
    std::vector<ThreadHandle> hs;
    for (uint32_t t = 0; t < 4; ++t) hs.push_back(m.create_thread(func, 1 + t % 2, t));
    m.wait_all_threads();
    for (uint32_t t = 0; t < 4; ++t) {
      CHECK(m.get_state(hs[t]) == ThreadState::completed);
      CHECK(m.shm().get_elem(arr, t) == int32_t(t) * 10 + 1);
    }
    CHECK_THROWS_AS(m.create_thread(func, 0, 0), Error);    // master hosts no workers
    CHECK_THROWS_AS(m.create_thread(func, 9, 0), Error);    // no such node
    CHECK_THROWS_AS(m.create_thread(99, 1, 0), Error);      // unknown entry
    m.close_cluster();
  });
}

TEST_CASE("failure detection reports a silenced slave") {
  AppSpec app = flag_app();
  SimCluster c(sim_config(2), &app, {});
  c.world().set_drop_from(2, true);
  bool detected = false;
  c.master().on_failure = [&](const std::vector<NodeId>& dead) {
    detected = dead == std::vector<NodeId>{2};
  };
  c.run_main([&](ClusterNode& m) {
    RunCtx g(m.world());
    m.world().wait([&] { return !m.detect_failures().empty(); });
    CHECK(m.world().now_ms() >= m.config().failure_timeout_ms);
    m.close_cluster();
  });
  CHECK(detected);
}

// --- iterative app used for checkpoint/recovery tests ------------------------------

namespace {

struct IterDecls : AppDecls {
  Global<ObjRef> out_ref;
  Global<int32_t> iters;
  Global<int32_t> accum_id;
  Global<int32_t> nparts;
};

constexpr uint32_t kIterDim = 6;

// Each worker contributes a vector derived from the previous round's output,
// so any divergence compounds and recovery mistakes become visible.
void iter_worker(Worker& w) {
  auto* d = w.decls<IterDecls>();
  struct Hook : Checkpoint {
    int32_t next_iter = 0;
    Bytes do_checkpoint() override {
      Writer wr;
      wr.u32(uint32_t(next_iter));
      return wr.take();
    }
    void do_restart(const Bytes& saved) override {
      Reader r(saved);
      next_iter = int32_t(r.u32());
    }
  } hook;
  w.maybe_restart(&hook);

  auto& shm = w.shm();
  auto arr = shm.array_from_ref<double>(shm.get(d->out_ref));
  int32_t iters = shm.get(d->iters);
  uint32_t accum = uint32_t(shm.get(d->accum_id));
  double carry = 0;
  if (hook.next_iter > 0) {
    // output of the previous round is part of the restored store
    double prev[kIterDim];
    shm.copy_to(arr, prev, 0, kIterDim);
    carry = prev[0];
  }
  for (int32_t it = hook.next_iter; it < iters; ++it) {
    std::vector<double> vec(kIterDim);
    for (uint32_t j = 0; j < kIterDim; ++j) {
      vec[j] = carry / 8 + double(w.param() + 1) * double(it + 1) + j;
    }
    hook.next_iter = it + 1;
    w.accum().accumulate<double>(accum, w.ordinal(), vec);
    double out[kIterDim];
    shm.copy_to(arr, out, 0, kIterDim);
    carry = out[0];
  }
}

AppSpec iter_app() {
  AppSpec app;
  app.name = "iter";
  app.declare = [](Catalog& cat, const std::vector<std::string>&) {
    auto d = std::make_unique<IterDecls>();
    d->out_ref = cat.declare_global<ObjRef>("iter_out");
    d->iters = cat.declare_global<int32_t>("iter_count");
    d->accum_id = cat.declare_global<int32_t>("iter_accum");
    d->nparts = cat.declare_global<int32_t>("iter_nparts");
    return d;
  };
  app.register_entries = [](EntryRegistry& reg) { reg.add("iter_worker", iter_worker); };
  return app;
}

// Master main for the iter app; returns the final output vector.
std::vector<double> iter_main(ClusterNode& m, uint32_t nparts, int32_t iters,
                              uint32_t checkpoint_every) {
  auto* d = dynamic_cast<IterDecls*>(m.decls());
  auto arr = m.shm().new_array<double>(kIterDim);
  m.shm().set(d->out_ref, arr.ref());
  m.shm().set(d->iters, iters);
  m.shm().set(d->nparts, int32_t(nparts));
  uint32_t nodes = m.config().node_count();
  std::vector<uint32_t> group_of(nparts);
  for (uint32_t p = 0; p < nparts; ++p) group_of[p] = 1 + p % (nodes - 1);
  AccumInfo info = m.accum_controller().create(nparts, arr.object_id, kIterDim, ElemKind::f64,
                                               AccumMode::auto_pick, group_of);
  m.shm().set(d->accum_id, int32_t(info.accum_id));
  if (checkpoint_every > 0) {
    m.fault().checkpoint_at_barrier(info.barrier_id, checkpoint_every);
    m.fault().initial_checkpoint();
  }
  uint32_t func = m.registry().id_of("iter_worker");
  for (uint32_t p = 0; p < nparts; ++p) m.create_thread(func, 1 + p % (nodes - 1), p);
  m.wait_all_threads();
  std::vector<double> out(kIterDim);
  m.shm().copy_to(arr, out.data(), 0, kIterDim);
  m.close_cluster();
  return out;
}

}  // namespace

TEST_CASE("checkpoints land on the configured epochs and round-trip") {
  AppSpec app = iter_app();
  ClusterConfig cfg = sim_config(2);
  cfg.checkpoint_dir = "/tmp/step_test_ckpt_a";
  std::filesystem::remove_all(cfg.checkpoint_dir);
  SimCluster c(cfg, &app, {});
  std::vector<double> out;
  c.run_main([&](ClusterNode& m) { out = iter_main(m, 4, 10, 2); });
  // initial image + one every 2 epochs over 10 epochs
  CHECK(c.master().fault().images_taken() == 6);
  auto latest = load_latest(cfg.checkpoint_dir);
  REQUIRE(latest.has_value());
  CHECK(latest->id == 5);
  CHECK(latest->iteration == 10);
  // image round-trip: encode/decode identity on the latest image
  auto again = CheckpointImage::decode(latest->encode());
  CHECK(again.encode() == latest->encode());
  CHECK(again.store == latest->store);
  // a torn image (bad digest) is ignored by the loader
  {
    std::ofstream bad(cfg.checkpoint_dir + "/ckpt_9.dat", std::ios::binary);
    bad << "garbage";
    std::ofstream badm(cfg.checkpoint_dir + "/ckpt_9.manifest");
    badm << "id 9\niteration 99\ndigest 0123456789abcdef\n";
  }
  auto still = load_latest(cfg.checkpoint_dir);
  REQUIRE(still.has_value());
  CHECK(still->id == 5);
}

TEST_CASE("recovery reproduces the failure-free result") {
  AppSpec app = iter_app();
  // failure-free reference
  std::vector<double> clean;
  {
    ClusterConfig cfg = sim_config(2);
    cfg.checkpoint_dir = "/tmp/step_test_ckpt_clean";
    std::filesystem::remove_all(cfg.checkpoint_dir);
    SimCluster c(cfg, &app, {});
    c.run_main([&](ClusterNode& m) { clean = iter_main(m, 4, 10, 5); });
  }
  for (RecoveryPolicy policy : {RecoveryPolicy::single, RecoveryPolicy::multi}) {
    ClusterConfig cfg = sim_config(3);  // 3 slaves so one can die
    cfg.recovery_policy = policy;
    cfg.checkpoint_dir = policy == RecoveryPolicy::single ? "/tmp/step_test_ckpt_s"
                                                          : "/tmp/step_test_ckpt_m";
    std::filesystem::remove_all(cfg.checkpoint_dir);
    SimCluster c(cfg, &app, {});
    // Kill slave 2 once iteration 6 is under way.
    bool killed = false;
    c.world().spawn(0, [&] {
      RunCtx g(c.world());
      c.world().wait([&] {
        for (auto& [id, thr, epoch] : c.master().controller().barrier_states()) {
          if (epoch >= 6) return true;
        }
        return false;
      });
      c.world().kill_endpoint(2);
      killed = true;
    });
    std::vector<double> recovered;
    c.run_main([&](ClusterNode& m) { recovered = iter_main(m, 4, 10, 5); });
    CHECK(killed);
    REQUIRE(c.master().report().recoveries.size() == 1);
    CHECK(c.master().report().recoveries[0].replaced_threads > 0);
    CHECK(c.master().report().recoveries[0].policy ==
          (policy == RecoveryPolicy::single ? "single" : "multi"));
    for (uint32_t j = 0; j < kIterDim; ++j) {
      CHECK(recovered[j] == clean[j]);  // bitwise: deterministic fixed-order arithmetic
    }
  }
}

TEST_CASE("failure before the first interval checkpoint restarts from the initial image") {
  AppSpec app = iter_app();
  std::vector<double> clean;
  {
    ClusterConfig cfg = sim_config(2);
    cfg.checkpoint_dir = "/tmp/step_test_ckpt_c0";
    std::filesystem::remove_all(cfg.checkpoint_dir);
    SimCluster c(cfg, &app, {});
    c.run_main([&](ClusterNode& m) { clean = iter_main(m, 4, 6, 100); });
  }
  ClusterConfig cfg = sim_config(3);
  cfg.checkpoint_dir = "/tmp/step_test_ckpt_e";
  std::filesystem::remove_all(cfg.checkpoint_dir);
  SimCluster c(cfg, &app, {});
  c.world().spawn(0, [&] {
    RunCtx g(c.world());
    c.world().wait([&] {
      for (auto& [id, thr, epoch] : c.master().controller().barrier_states()) {
        if (epoch >= 2) return true;
      }
      return false;
    });
    c.world().kill_endpoint(3);
  });
  std::vector<double> recovered;
  c.run_main([&](ClusterNode& m) { recovered = iter_main(m, 4, 6, 100); });
  REQUIRE(c.master().report().recoveries.size() == 1);
  for (uint32_t j = 0; j < kIterDim; ++j) CHECK(recovered[j] == clean[j]);
}

// --- virtual barrier ------------------------------------------------------------------

namespace {

struct PlainDecls : AppDecls {
  Global<ObjRef> cells;
  Global<int32_t> rounds;
};

// No sync primitives at all: pure compute + DSM writes, the case the virtual
// barrier exists for.
AppSpec nosync_app() {
  AppSpec app;
  app.name = "nosync";
  app.declare = [](Catalog& cat, const std::vector<std::string>&) {
    auto d = std::make_unique<PlainDecls>();
    d->cells = cat.declare_global<ObjRef>("cells");
    d->rounds = cat.declare_global<int32_t>("rounds");
    return d;
  };
  app.register_entries = [](EntryRegistry& reg) {
    reg.add("nosync_worker", [](Worker& w) {
      auto* d = w.decls<PlainDecls>();
      auto arr = w.shm().array_from_ref<int32_t>(w.shm().get(d->cells));
      int32_t rounds = w.shm().get(d->rounds);
      for (int32_t i = 0; i < rounds; ++i) {
        int32_t v = w.shm().get_elem(arr, w.param());
        w.shm().set_elem(arr, w.param(), v + 1);
      }
    });
  };
  return app;
}

}  // namespace

TEST_CASE("virtual barrier pauses workers and images a consistent store") {
  AppSpec app = nosync_app();
  ClusterConfig cfg = sim_config(2);
  cfg.checkpoint_dir = "/tmp/step_test_ckpt_v";
  std::filesystem::remove_all(cfg.checkpoint_dir);
  SimCluster c(cfg, &app, {});
  c.run_main([&](ClusterNode& m) {
    auto* d = dynamic_cast<PlainDecls*>(m.decls());
    auto arr = m.shm().new_array<int32_t>(4);
    m.shm().set(d->cells, arr.ref());
    m.shm().set(d->rounds, 200);
    uint32_t func = m.registry().id_of("nosync_worker");
    for (uint32_t t = 0; t < 4; ++t) m.create_thread(func, 1 + t % 2, t);
    auto id1 = m.fault().checkpoint_command();
    auto id2 = m.fault().checkpoint_command();  // back-to-back: two ordered images
    CHECK(id1.has_value());
    CHECK(id2.has_value());
    CHECK(*id2 == *id1 + 1);
    m.wait_all_threads();
    for (uint32_t t = 0; t < 4; ++t) CHECK(m.shm().get_elem(arr, t) == 200);
    // idle cluster: immediate image
    auto id3 = m.fault().checkpoint_command();
    CHECK(*id3 == *id2 + 1);
    m.close_cluster();
  });
  auto latest = load_latest(cfg.checkpoint_dir);
  REQUIRE(latest.has_value());
  CHECK(latest->id == 2);
}
