#include <cmath>

#include "step/apps/apps.hpp"

namespace step::apps {

namespace {

struct PrDecls : AppDecls {
  Global<int32_t> vertices;
  Global<ObjRef> rank_ref;    // V doubles
  Global<ObjRef> credit_ref;  // V + 2: credits, dangling mass, rank-sum probe
  Global<ObjRef> sums_ref;    // per-iteration rank sums (conservation history)
  Global<int32_t> accum_id;
};

struct PrHook : Checkpoint {
  int32_t next_iter = 0;
  Bytes do_checkpoint() override {
    Writer w;
    w.u32(uint32_t(next_iter));
    return w.take();
  }
  void do_restart(const Bytes& saved) override { next_iter = int32_t(Reader(saved).u32()); }
};

void pagerank_worker(Worker& w) {
  auto* d = w.decls<PrDecls>();
  PagerankParams p = PagerankParams::from_args(w.cluster().app_args());
  uint32_t slaves = w.cluster().config().node_count() - 1;
  uint32_t nthreads = p.threads_per_node * slaves;
  uint32_t tid = w.param();

  uint32_t v_count = uint32_t(w.shm().get(d->vertices));
  auto [vlo, vhi] = partition_bounds(v_count, tid, nthreads);
  uint32_t mine = uint32_t(vhi - vlo);

  // Adjacency restricted to this thread's vertices.
  std::vector<std::vector<uint32_t>> adj(mine);
  for (const auto& [s, dst] : read_edges(p.data).edges) {
    if (s >= vlo && s < vhi) adj[s - vlo].push_back(dst);
  }
  w.mark_load_done();

  auto rank_arr = w.shm().array_from_ref<double>(w.shm().get(d->rank_ref));
  auto credit_arr = w.shm().array_from_ref<double>(w.shm().get(d->credit_ref));
  auto sums_arr = w.shm().array_from_ref<double>(w.shm().get(d->sums_ref));
  uint32_t accum = uint32_t(w.shm().get(d->accum_id));
  uint32_t vec_len = v_count + 2;
  double dmp = p.damping;

  PrHook hook;
  w.maybe_restart(&hook);

  std::vector<double> rank(mine);
  std::vector<double> credit_out(mine);
  if (hook.next_iter == 0) {
    std::fill(rank.begin(), rank.end(), 1.0 / double(v_count));
  } else {
    // Rebuild rank(next_iter) from the checkpointed credits.
    std::vector<double> cred(mine);
    if (mine) w.shm().copy_to(credit_arr, cred.data(), uint32_t(vlo), mine);
    double tail[2];
    w.shm().copy_to(credit_arr, tail, v_count, 2);
    double dangling = tail[0];
    for (uint32_t i = 0; i < mine; ++i) {
      rank[i] = (1.0 - dmp) / double(v_count) + dmp * (cred[i] + dangling / double(v_count));
    }
  }

  std::vector<double> credits(vec_len);
  for (int32_t iter = hook.next_iter; iter < int32_t(p.iterations); ++iter) {
    std::fill(credits.begin(), credits.end(), 0.0);
    for (uint32_t i = 0; i < mine; ++i) {
      credits[v_count + 1] += rank[i];  // conservation probe
      if (adj[i].empty()) {
        credits[v_count] += rank[i];  // dangling mass, redistributed uniformly
        continue;
      }
      double share = rank[i] / double(adj[i].size());
      for (uint32_t dst : adj[i]) credits[dst] += share;
    }
    hook.next_iter = iter + 1;
    w.accum().accumulate<double>(accum, tid, credits);

    std::vector<double> cred(mine);
    if (mine) w.shm().copy_to(credit_arr, cred.data(), uint32_t(vlo), mine);
    double tail[2];
    w.shm().copy_to(credit_arr, tail, v_count, 2);
    double dangling = tail[0];
    for (uint32_t i = 0; i < mine; ++i) {
      rank[i] = (1.0 - dmp) / double(v_count) + dmp * (cred[i] + dangling / double(v_count));
    }
    if (mine) w.shm().copy_from(rank_arr, rank.data(), uint32_t(vlo), mine);
    if (tid == 0) w.shm().set_elem(sums_arr, uint32_t(iter), tail[1]);
  }

  // Phase 3: each worker writes its own slice; the main thread optionally
  // collects the full vector from DSM afterwards.
  if (!p.out.empty() && mine) {
    write_double_column(p.out + ".part" + std::to_string(tid),
                        std::vector<double>(rank.begin(), rank.end()));
  }
}

}  // namespace

PagerankParams PagerankParams::from_args(const std::vector<std::string>& args) {
  auto kv = parse_kv_args(args);
  PagerankParams p;
  check(kv.count("data"), Errc::argument, "pagerank needs data=<path>");
  p.data = kv.at("data");
  if (kv.count("vertices")) p.vertices = uint32_t(std::stoul(kv.at("vertices")));
  if (kv.count("iterations")) p.iterations = uint32_t(std::stoul(kv.at("iterations")));
  if (kv.count("damping")) p.damping = std::stod(kv.at("damping"));
  if (kv.count("threads_per_node"))
    p.threads_per_node = uint32_t(std::stoul(kv.at("threads_per_node")));
  if (kv.count("checkpoint_every"))
    p.checkpoint_every = uint32_t(std::stoul(kv.at("checkpoint_every")));
  if (kv.count("out")) p.out = kv.at("out");
  return p;
}

std::vector<std::string> PagerankParams::to_args() const {
  std::vector<std::string> a = {
      "data=" + data,
      "vertices=" + std::to_string(vertices),
      "iterations=" + std::to_string(iterations),
      "damping=" + fmt_f64(damping),
      "threads_per_node=" + std::to_string(threads_per_node),
      "checkpoint_every=" + std::to_string(checkpoint_every),
  };
  if (!out.empty()) a.push_back("out=" + out);
  return a;
}

AppSpec pagerank_app() {
  AppSpec app;
  app.name = "pagerank";
  app.declare = [](Catalog& cat, const std::vector<std::string>&) {
    auto d = std::make_unique<PrDecls>();
    d->vertices = cat.declare_global<int32_t>("pr_vertices");
    d->rank_ref = cat.declare_global<ObjRef>("pr_rank");
    d->credit_ref = cat.declare_global<ObjRef>("pr_credit");
    d->sums_ref = cat.declare_global<ObjRef>("pr_sums");
    d->accum_id = cat.declare_global<int32_t>("pr_accum");
    return d;
  };
  app.register_entries = [](EntryRegistry& reg) {
    reg.add("pagerank_worker", pagerank_worker);
  };
  return app;
}

PagerankResult run_pagerank(ClusterNode& m) {
  PagerankParams p = PagerankParams::from_args(m.app_args());
  auto* d = dynamic_cast<PrDecls*>(m.decls());
  check(d != nullptr, Errc::internal, "pagerank declarations missing");

  uint32_t v_count = p.vertices;
  if (v_count == 0) v_count = read_edges(p.data).vertices;
  check(v_count >= 1, Errc::argument, "graph has no vertices");
  uint32_t slaves = m.config().node_count() - 1;
  uint32_t nthreads = p.threads_per_node * slaves;

  auto rank_arr = m.shm().new_array<double>(v_count);
  auto credit_arr = m.shm().new_array<double>(v_count + 2);
  auto sums_arr = m.shm().new_array<double>(p.iterations);
  m.shm().set(d->vertices, int32_t(v_count));
  m.shm().set(d->rank_ref, rank_arr.ref());
  m.shm().set(d->credit_ref, credit_arr.ref());
  m.shm().set(d->sums_ref, sums_arr.ref());
  AccumInfo accum = m.accum_controller().create(nthreads, credit_arr.object_id, v_count + 2,
                                                ElemKind::f64, m.config().accum_mode,
                                                placement_groups(nthreads, p.threads_per_node));
  m.shm().set(d->accum_id, int32_t(accum.accum_id));

  launch_workers(m, LaunchPlan{nthreads, p.threads_per_node, accum.barrier_id,
                               p.checkpoint_every, true},
                 "pagerank_worker");
  m.wait_all_threads();

  PagerankResult res;
  res.ranks.resize(v_count);
  m.shm().copy_to(rank_arr, res.ranks.data(), 0, v_count);
  res.rank_sums.resize(p.iterations);
  m.shm().copy_to(sums_arr, res.rank_sums.data(), 0, p.iterations);
  if (!p.out.empty()) write_double_column(p.out, res.ranks);
  m.close_cluster();
  return res;
}

}  // namespace step::apps
