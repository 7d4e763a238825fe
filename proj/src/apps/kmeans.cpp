#include <cmath>

#include "step/apps/apps.hpp"

namespace step::apps {

namespace {

struct KmDecls : AppDecls {
  Global<int32_t> k;
  Global<int32_t> dim;
  Global<ObjRef> sums_ref;     // accumulator output: k*dim sums then k counts
  Global<ObjRef> centers_ref;  // k*dim, the centers the current round starts from
  Global<int32_t> accum_id;
};

struct KmHook : Checkpoint {
  int32_t next_iter = 0;
  Bytes do_checkpoint() override {
    Writer w;
    w.u32(uint32_t(next_iter));
    return w.take();
  }
  void do_restart(const Bytes& saved) override { next_iter = int32_t(Reader(saved).u32()); }
};

// centers <- sums/counts, empty clusters keep their previous center.
void apply_center_update(std::vector<double>& centers, const std::vector<double>& acc,
                         uint32_t k, uint32_t dim) {
  for (uint32_t c = 0; c < k; ++c) {
    double count = acc[size_t(k) * dim + c];
    if (count > 0) {
      for (uint32_t j = 0; j < dim; ++j) {
        centers[size_t(c) * dim + j] = acc[size_t(c) * dim + j] / count;
      }
    }
  }
}

void kmeans_worker(Worker& w) {
  auto* d = w.decls<KmDecls>();
  KmeansParams p = KmeansParams::from_args(w.cluster().app_args());
  uint32_t slaves = w.cluster().config().node_count() - 1;
  uint32_t nthreads = p.threads_per_node * slaves;
  uint32_t tid = w.param();

  size_t rows = count_rows(p.data);
  auto [lo, hi] = partition_bounds(rows, tid, nthreads);
  auto mine = read_row_range(p.data, lo, hi);
  uint32_t k = uint32_t(w.shm().get(d->k));
  auto init_rows = read_first_rows(p.data, k);  // initial centers: first k points
  w.mark_load_done();

  uint32_t dim = uint32_t(w.shm().get(d->dim));
  auto sums_arr = w.shm().array_from_ref<double>(w.shm().get(d->sums_ref));
  auto centers_arr = w.shm().array_from_ref<double>(w.shm().get(d->centers_ref));
  uint32_t accum = uint32_t(w.shm().get(d->accum_id));
  uint32_t vec_len = k * dim + k;

  KmHook hook;
  w.maybe_restart(&hook);

  std::vector<double> centers(size_t(k) * dim);
  if (hook.next_iter == 0) {
    for (uint32_t c = 0; c < k; ++c) {
      for (uint32_t j = 0; j < dim; ++j) centers[size_t(c) * dim + j] = init_rows[c][j];
    }
  } else {
    // The image holds the centers round `next_iter - 1` started from plus
    // that round's sums; replaying the update reproduces the working set.
    std::vector<double> acc(vec_len);
    w.shm().copy_to(centers_arr, centers.data(), 0, uint32_t(centers.size()));
    w.shm().copy_to(sums_arr, acc.data(), 0, vec_len);
    apply_center_update(centers, acc, k, dim);
  }

  std::vector<double> local(vec_len);
  for (int32_t iter = hook.next_iter; iter < int32_t(p.iterations); ++iter) {
    if (tid == 0) {
      w.shm().copy_from(centers_arr, centers.data(), 0, uint32_t(centers.size()));
    }
    std::fill(local.begin(), local.end(), 0.0);
    for (const auto& row : mine) {
      uint32_t best = 0;
      double best_d2 = 0;
      for (uint32_t c = 0; c < k; ++c) {
        double d2 = 0;
        for (uint32_t j = 0; j < dim; ++j) {
          double diff = row[j] - centers[size_t(c) * dim + j];
          d2 += diff * diff;
        }
        if (c == 0 || d2 < best_d2) {  // ties keep the lowest index
          best = c;
          best_d2 = d2;
        }
      }
      for (uint32_t j = 0; j < dim; ++j) local[size_t(best) * dim + j] += row[j];
      local[size_t(k) * dim + best] += 1.0;
    }
    hook.next_iter = iter + 1;
    w.accum().accumulate<double>(accum, tid, local);
    std::vector<double> acc(vec_len);
    w.shm().copy_to(sums_arr, acc.data(), 0, vec_len);
    apply_center_update(centers, acc, k, dim);
  }

  if (tid == 0) {
    // publish the final centers
    w.shm().copy_from(centers_arr, centers.data(), 0, uint32_t(centers.size()));
  }
}

}  // namespace

KmeansParams KmeansParams::from_args(const std::vector<std::string>& args) {
  auto kv = parse_kv_args(args);
  KmeansParams p;
  check(kv.count("data"), Errc::argument, "kmeans needs data=<path>");
  p.data = kv.at("data");
  if (kv.count("k")) p.k = uint32_t(std::stoul(kv.at("k")));
  if (kv.count("iterations")) p.iterations = uint32_t(std::stoul(kv.at("iterations")));
  if (kv.count("threads_per_node"))
    p.threads_per_node = uint32_t(std::stoul(kv.at("threads_per_node")));
  if (kv.count("checkpoint_every"))
    p.checkpoint_every = uint32_t(std::stoul(kv.at("checkpoint_every")));
  if (kv.count("out")) p.out = kv.at("out");
  return p;
}

std::vector<std::string> KmeansParams::to_args() const {
  std::vector<std::string> a = {
      "data=" + data,
      "k=" + std::to_string(k),
      "iterations=" + std::to_string(iterations),
      "threads_per_node=" + std::to_string(threads_per_node),
      "checkpoint_every=" + std::to_string(checkpoint_every),
  };
  if (!out.empty()) a.push_back("out=" + out);
  return a;
}

AppSpec kmeans_app() {
  AppSpec app;
  app.name = "kmeans";
  app.declare = [](Catalog& cat, const std::vector<std::string>&) {
    auto d = std::make_unique<KmDecls>();
    d->k = cat.declare_global<int32_t>("km_k");
    d->dim = cat.declare_global<int32_t>("km_dim");
    d->sums_ref = cat.declare_global<ObjRef>("km_sums");
    d->centers_ref = cat.declare_global<ObjRef>("km_centers");
    d->accum_id = cat.declare_global<int32_t>("km_accum");
    return d;
  };
  app.register_entries = [](EntryRegistry& reg) { reg.add("kmeans_worker", kmeans_worker); };
  return app;
}

KmeansResult run_kmeans(ClusterNode& m) {
  KmeansParams p = KmeansParams::from_args(m.app_args());
  auto* d = dynamic_cast<KmDecls*>(m.decls());
  check(d != nullptr, Errc::internal, "kmeans declarations missing");
  check(p.k >= 1, Errc::argument, "k must be at least 1");

  auto first = read_first_rows(p.data, p.k);
  check(first.size() == p.k, Errc::argument, "k exceeds the point count");
  uint32_t dim = uint32_t(first[0].size());
  uint32_t slaves = m.config().node_count() - 1;
  uint32_t nthreads = p.threads_per_node * slaves;
  uint32_t vec_len = p.k * dim + p.k;

  auto sums_arr = m.shm().new_array<double>(vec_len);
  auto centers_arr = m.shm().new_array<double>(p.k * dim);
  m.shm().set(d->k, int32_t(p.k));
  m.shm().set(d->dim, int32_t(dim));
  m.shm().set(d->sums_ref, sums_arr.ref());
  m.shm().set(d->centers_ref, centers_arr.ref());
  AccumInfo accum =
      m.accum_controller().create(nthreads, sums_arr.object_id, vec_len, ElemKind::f64,
                                  m.config().accum_mode,
                                  placement_groups(nthreads, p.threads_per_node));
  m.shm().set(d->accum_id, int32_t(accum.accum_id));

  launch_workers(m, LaunchPlan{nthreads, p.threads_per_node, accum.barrier_id,
                               p.checkpoint_every, true},
                 "kmeans_worker");
  m.wait_all_threads();

  KmeansResult res;
  res.k = p.k;
  res.dim = dim;
  res.centers.resize(size_t(p.k) * dim);
  m.shm().copy_to(centers_arr, res.centers.data(), 0, uint32_t(res.centers.size()));
  if (!p.out.empty()) write_double_matrix(p.out, res.centers, p.k, dim);
  m.close_cluster();
  return res;
}

}  // namespace step::apps
