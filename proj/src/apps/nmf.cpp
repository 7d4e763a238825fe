#include <algorithm>
#include <cmath>

#include "step/apps/apps.hpp"

namespace step::apps {

namespace {

struct NmfDecls : AppDecls {
  Global<int32_t> rows;
  Global<int32_t> cols;
  Global<int32_t> rank;
  Global<ObjRef> q_ref;       // rank x cols, row-major
  Global<ObjRef> dq_ref;      // accumulator output for the Q-gradient
  Global<ObjRef> loss_ref;    // length-1 accumulator output
  Global<ObjRef> losses_ref;  // per-epoch loss history
  Global<int32_t> dq_accum;
  Global<int32_t> loss_accum;
  Global<ObjRef> p_ref;  // n x rank result rows, published at the end
};

// Deterministic symmetric-breaking nonnegative init.
double p_init(uint32_t i, uint32_t r) { return 0.1 + 0.01 * double((i * 31 + r) % 7); }
double q_init(uint32_t r, uint32_t j) { return 0.1 + 0.01 * double((r * 17 + j) % 5); }

struct NmfHook : Checkpoint {
  int32_t next_epoch = 0;
  std::vector<double>* p_rows;
  Bytes do_checkpoint() override {
    Writer w;
    w.u32(uint32_t(next_epoch));
    w.u32(uint32_t(p_rows->size()));
    for (double v : *p_rows) w.f64(v);
    return w.take();
  }
  void do_restart(const Bytes& saved) override {
    Reader r(saved);
    next_epoch = int32_t(r.u32());
    p_rows->resize(r.u32());
    for (auto& v : *p_rows) v = r.f64();
  }
};

void nmf_worker(Worker& w) {
  auto* d = w.decls<NmfDecls>();
  NmfParams p = NmfParams::from_args(w.cluster().app_args());
  uint32_t slaves = w.cluster().config().node_count() - 1;
  uint32_t nthreads = p.threads_per_node * slaves;
  uint32_t tid = w.param();

  uint32_t n = uint32_t(w.shm().get(d->rows));
  uint32_t m = uint32_t(w.shm().get(d->cols));
  uint32_t k = uint32_t(w.shm().get(d->rank));
  auto [rlo, rhi] = partition_bounds(n, tid, nthreads);

  // Keep only this thread's rows, in file order.
  std::vector<Triplet> mine;
  for (const auto& t : read_triplets(p.data)) {
    if (t.i >= rlo && t.i < rhi) mine.push_back(t);
  }
  w.mark_load_done();

  auto q_arr = w.shm().array_from_ref<double>(w.shm().get(d->q_ref));
  auto dq_arr = w.shm().array_from_ref<double>(w.shm().get(d->dq_ref));
  auto loss_arr = w.shm().array_from_ref<double>(w.shm().get(d->loss_ref));
  auto losses_arr = w.shm().array_from_ref<double>(w.shm().get(d->losses_ref));
  uint32_t dq_accum = uint32_t(w.shm().get(d->dq_accum));
  uint32_t loss_accum = uint32_t(w.shm().get(d->loss_accum));
  uint32_t qn = k * m;

  std::vector<double> p_local(size_t(rhi - rlo) * k);
  for (uint32_t i = rlo; i < rhi; ++i) {
    for (uint32_t r = 0; r < k; ++r) p_local[size_t(i - rlo) * k + r] = p_init(i, r);
  }
  NmfHook hook;
  hook.p_rows = &p_local;
  w.maybe_restart(&hook);

  std::vector<double> q(qn), dq(qn), qnew(qn);
  if (hook.next_epoch > 0 && tid == 0) {
    // The loss of the checkpointed epoch is the restored output value;
    // replaying it keeps the history gap-free.
    double saved[1];
    w.shm().copy_to(loss_arr, saved, 0, 1);
    w.shm().set_elem(losses_arr, uint32_t(hook.next_epoch - 1), saved[0] / double(n));
  }

  auto [qlo, qhi] = partition_bounds(qn, tid, nthreads);
  for (int32_t epoch = hook.next_epoch; epoch < int32_t(p.iterations); ++epoch) {
    w.shm().copy_to(q_arr, q.data(), 0, qn);
    std::fill(dq.begin(), dq.end(), 0.0);
    for (const auto& t : mine) {
      double* pi = &p_local[size_t(t.i - rlo) * k];
      double pred = 0;
      for (uint32_t r = 0; r < k; ++r) pred += pi[r] * q[size_t(r) * m + t.j];
      double e = t.v - pred;
      for (uint32_t r = 0; r < k; ++r) {
        double po = pi[r];
        double qo = q[size_t(r) * m + t.j];
        pi[r] = std::max(0.0, po + p.step_size * e * qo);
        dq[size_t(r) * m + t.j] += p.step_size * e * po;
      }
    }
    w.accum().accumulate<double>(dq_accum, tid, dq);
    std::vector<double> dsum(qn);
    w.shm().copy_to(dq_arr, dsum.data(), 0, qn);
    for (uint32_t x = 0; x < qn; ++x) qnew[x] = std::max(0.0, q[x] + dsum[x]);
    if (qhi > qlo) {
      w.shm().copy_from(q_arr, qnew.data() + qlo, uint32_t(qlo), uint32_t(qhi - qlo));
    }

    double local_loss = 0;
    for (const auto& t : mine) {
      const double* pi = &p_local[size_t(t.i - rlo) * k];
      double pred = 0;
      for (uint32_t r = 0; r < k; ++r) pred += pi[r] * qnew[size_t(r) * m + t.j];
      double e = t.v - pred;
      local_loss += e * e;
    }
    hook.next_epoch = epoch + 1;
    std::vector<double> lvec = {local_loss};
    w.accum().accumulate<double>(loss_accum, tid, lvec);
    double total[1];
    w.shm().copy_to(loss_arr, total, 0, 1);
    double loss = total[0] / double(n);
    if (tid == 0) w.shm().set_elem(losses_arr, uint32_t(epoch), loss);
    check(loss <= 1e12, Errc::divergence,
          "loss blew up (" + fmt_f64(loss) + "); use a smaller step size");
  }

  // Publish this thread's P rows.
  if (rhi > rlo) {
    auto p_arr = w.shm().array_from_ref<double>(w.shm().get(d->p_ref));
    w.shm().copy_from(p_arr, p_local.data(), uint32_t(rlo * k), uint32_t(p_local.size()));
  }
}

}  // namespace

NmfParams NmfParams::from_args(const std::vector<std::string>& args) {
  auto kv = parse_kv_args(args);
  NmfParams p;
  check(kv.count("data"), Errc::argument, "nmf needs data=<path>");
  p.data = kv.at("data");
  if (kv.count("rows")) p.rows = uint32_t(std::stoul(kv.at("rows")));
  if (kv.count("cols")) p.cols = uint32_t(std::stoul(kv.at("cols")));
  if (kv.count("rank")) p.rank = uint32_t(std::stoul(kv.at("rank")));
  if (kv.count("iterations")) p.iterations = uint32_t(std::stoul(kv.at("iterations")));
  if (kv.count("step_size")) p.step_size = std::stod(kv.at("step_size"));
  if (kv.count("threads_per_node"))
    p.threads_per_node = uint32_t(std::stoul(kv.at("threads_per_node")));
  if (kv.count("checkpoint_every"))
    p.checkpoint_every = uint32_t(std::stoul(kv.at("checkpoint_every")));
  if (kv.count("out")) p.out = kv.at("out");
  return p;
}

std::vector<std::string> NmfParams::to_args() const {
  std::vector<std::string> a = {
      "data=" + data,
      "rows=" + std::to_string(rows),
      "cols=" + std::to_string(cols),
      "rank=" + std::to_string(rank),
      "iterations=" + std::to_string(iterations),
      "step_size=" + fmt_f64(step_size),
      "threads_per_node=" + std::to_string(threads_per_node),
      "checkpoint_every=" + std::to_string(checkpoint_every),
  };
  if (!out.empty()) a.push_back("out=" + out);
  return a;
}

AppSpec nmf_app() {
  AppSpec app;
  app.name = "nmf";
  app.declare = [](Catalog& cat, const std::vector<std::string>&) {
    auto d = std::make_unique<NmfDecls>();
    d->rows = cat.declare_global<int32_t>("nmf_rows");
    d->cols = cat.declare_global<int32_t>("nmf_cols");
    d->rank = cat.declare_global<int32_t>("nmf_rank");
    d->q_ref = cat.declare_global<ObjRef>("nmf_q");
    d->dq_ref = cat.declare_global<ObjRef>("nmf_dq");
    d->loss_ref = cat.declare_global<ObjRef>("nmf_loss");
    d->losses_ref = cat.declare_global<ObjRef>("nmf_losses");
    d->dq_accum = cat.declare_global<int32_t>("nmf_dq_accum");
    d->loss_accum = cat.declare_global<int32_t>("nmf_loss_accum");
    d->p_ref = cat.declare_global<ObjRef>("nmf_p");
    return d;
  };
  app.register_entries = [](EntryRegistry& reg) { reg.add("nmf_worker", nmf_worker); };
  return app;
}

NmfResult run_nmf(ClusterNode& m) {
  NmfParams p = NmfParams::from_args(m.app_args());
  auto* d = dynamic_cast<NmfDecls*>(m.decls());
  check(d != nullptr, Errc::internal, "nmf declarations missing");

  auto triplets = read_triplets(p.data);
  check(!triplets.empty(), Errc::data, "empty matrix");
  uint32_t n = p.rows, cols = p.cols;
  if (n == 0 || cols == 0) {
    for (const auto& t : triplets) {
      n = std::max(n, t.i + 1);
      cols = std::max(cols, t.j + 1);
    }
  }
  uint32_t k = p.rank;
  uint32_t qn = k * cols;
  uint32_t slaves = m.config().node_count() - 1;
  uint32_t nthreads = p.threads_per_node * slaves;

  auto q_arr = m.shm().new_array<double>(qn);
  auto dq_arr = m.shm().new_array<double>(qn);
  auto loss_arr = m.shm().new_array<double>(1);
  auto losses_arr = m.shm().new_array<double>(p.iterations);
  auto p_arr = m.shm().new_array<double>(size_t(n) * k);
  std::vector<double> q0(qn);
  for (uint32_t r = 0; r < k; ++r) {
    for (uint32_t j = 0; j < cols; ++j) q0[size_t(r) * cols + j] = q_init(r, j);
  }
  m.shm().copy_from(q_arr, q0.data(), 0, qn);
  m.shm().set(d->rows, int32_t(n));
  m.shm().set(d->cols, int32_t(cols));
  m.shm().set(d->rank, int32_t(k));
  m.shm().set(d->q_ref, q_arr.ref());
  m.shm().set(d->dq_ref, dq_arr.ref());
  m.shm().set(d->loss_ref, loss_arr.ref());
  m.shm().set(d->losses_ref, losses_arr.ref());
  m.shm().set(d->p_ref, p_arr.ref());

  auto groups = placement_groups(nthreads, p.threads_per_node);
  AccumInfo dq_accum = m.accum_controller().create(nthreads, dq_arr.object_id, qn,
                                                   ElemKind::f64, m.config().accum_mode, groups);
  AccumInfo loss_accum = m.accum_controller().create(nthreads, loss_arr.object_id, 1,
                                                     ElemKind::f64, AccumMode::dense, groups);
  m.shm().set(d->dq_accum, int32_t(dq_accum.accum_id));
  m.shm().set(d->loss_accum, int32_t(loss_accum.accum_id));

  launch_workers(m, LaunchPlan{nthreads, p.threads_per_node, loss_accum.barrier_id,
                               p.checkpoint_every, true},
                 "nmf_worker");
  m.wait_all_threads();

  NmfResult res;
  res.rows = n;
  res.cols = cols;
  res.rank = k;
  res.q.resize(qn);
  m.shm().copy_to(q_arr, res.q.data(), 0, qn);
  res.p.resize(size_t(n) * k);
  m.shm().copy_to(p_arr, res.p.data(), 0, uint32_t(res.p.size()));
  res.losses.resize(p.iterations);
  m.shm().copy_to(losses_arr, res.losses.data(), 0, p.iterations);
  if (!p.out.empty()) {
    write_double_matrix(p.out + ".P", res.p, n, k);
    write_double_matrix(p.out + ".Q", res.q, k, cols);
  }
  m.close_cluster();
  return res;
}

}  // namespace step::apps
