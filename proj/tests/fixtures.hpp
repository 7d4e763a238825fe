// Shared test scaffolding: a simulator world populated with n DSM nodes and
// a set of served store shards, without the full cluster handshake.
#pragma once

#include <functional>
#include <memory>

#include "step/accum.hpp"
#include "step/dsm.hpp"
#include "step/sim.hpp"
#include "step/sync.hpp"

namespace step::testing {

inline constexpr EndpointId kShardBase = 1000;

struct MiniCluster {
  SimWorld world;
  struct Node {
    std::unique_ptr<NodeRuntime> rt;
    std::unique_ptr<KvClient> kv;
    std::unique_ptr<DsmNode> dsm;
    std::unique_ptr<SyncClient> sync;
    std::unique_ptr<SharedMem> shm;
    std::unique_ptr<AccumService> accum;
  };
  Catalog catalog;
  std::vector<Node> nodes;
  std::vector<std::unique_ptr<NodeRuntime>> shard_rts;
  std::vector<std::unique_ptr<KvService>> shards;
  std::unique_ptr<SyncController> controller;
  std::unique_ptr<AccumController> accum_controller;

  explicit MiniCluster(uint32_t n, uint32_t nshards = 1, DsmConfig cfg = {}, uint64_t seed = 1)
      : world(seed) {
    cfg.node_count = n;
    std::vector<EndpointId> shard_eps;
    for (uint32_t s = 0; s < nshards; ++s) {
      EndpointId ep = kShardBase + s;
      shard_rts.push_back(std::make_unique<NodeRuntime>(world, ep, 0));
      shard_rts.back()->attach();
      shards.push_back(std::make_unique<KvService>(*shard_rts.back()));
      shard_eps.push_back(ep);
    }
    std::vector<EndpointId> node_eps;
    for (uint32_t i = 0; i < n; ++i) node_eps.push_back(EndpointId(i));
    for (uint32_t i = 0; i < n; ++i) {
      Node nd;
      nd.rt = std::make_unique<NodeRuntime>(world, EndpointId(i), NodeId(i));
      nd.rt->attach();
      nd.kv = std::make_unique<KvClient>(*nd.rt, shard_eps);
      nd.dsm = std::make_unique<DsmNode>(*nd.rt, *nd.kv, cfg);
      nd.sync = std::make_unique<SyncClient>(*nd.rt, EndpointId(0));
      nd.shm = std::make_unique<SharedMem>(*nd.dsm, catalog);
      nd.accum = std::make_unique<AccumService>(*nd.rt, *nd.dsm, *nd.sync);
      nodes.push_back(std::move(nd));
    }
    controller = std::make_unique<SyncController>(*nodes[0].rt);
    accum_controller =
        std::make_unique<AccumController>(*nodes[0].rt, *controller, node_eps);
  }

  DsmNode& dsm(NodeId i) { return *nodes[i].dsm; }
  SharedMem& shm(NodeId i) { return *nodes[i].shm; }
  SyncClient& sync(NodeId i) { return *nodes[i].sync; }
  AccumService& accum(NodeId i) { return *nodes[i].accum; }

  void spawn_on(NodeId i, std::function<void()> fn) { world.spawn(EndpointId(i), std::move(fn)); }

  void run(NodeId i, std::function<void()> fn) {
    spawn_on(i, std::move(fn));
    world.run_to_completion();
  }
};

}  // namespace step::testing
