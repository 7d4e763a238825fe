#include <cmath>
#include <cstring>

#include "step/apps/apps.hpp"

namespace step::apps {

namespace {

struct LrDecls : AppDecls {
  Global<int32_t> param_len;
  Global<ObjRef> grad_ref;
  Global<ObjRef> theta_ref;
  Global<int32_t> accum_id;
};

struct LrPoint {
  float y;
  std::vector<float> x;
};

std::vector<LrPoint> load_points(const std::string& path, size_t lo, size_t hi) {
  auto rows = read_row_range(path, lo, hi);
  std::vector<LrPoint> pts;
  pts.reserve(rows.size());
  for (const auto& row : rows) {
    check(row.size() >= 2, Errc::data, "classification rows need a label and features");
    LrPoint p;
    p.y = float(row[0]);
    p.x.assign(row.begin() + 1, row.end());
    pts.push_back(std::move(p));
  }
  return pts;
}

struct LrHook : Checkpoint {
  int32_t next_iter = 0;
  std::vector<float>* theta;
  Bytes do_checkpoint() override {
    Writer w;
    w.u32(uint32_t(next_iter));
    w.u32(uint32_t(theta->size()));
    for (float v : *theta) w.f32(v);
    return w.take();
  }
  void do_restart(const Bytes& saved) override {
    Reader r(saved);
    next_iter = int32_t(r.u32());
    theta->resize(r.u32());
    for (auto& v : *theta) v = r.f32();
  }
};

void lr_worker(Worker& w) {
  auto* d = w.decls<LrDecls>();
  LrParams p = LrParams::from_args(w.cluster().app_args());
  uint32_t slaves = w.cluster().config().node_count() - 1;
  uint32_t nthreads = p.threads_per_node * slaves;
  uint32_t tid = w.param();

  size_t rows = count_rows(p.data);
  auto [lo, hi] = partition_bounds(rows, tid, nthreads);
  auto points = load_points(p.data, lo, hi);
  w.mark_load_done();

  int32_t dim = w.shm().get(d->param_len);
  auto grad_arr = w.shm().array_from_ref<float>(w.shm().get(d->grad_ref));
  uint32_t accum = uint32_t(w.shm().get(d->accum_id));

  std::vector<float> theta(dim, 0.0f), local_grad(dim), grad(dim);
  LrHook hook;
  hook.theta = &theta;
  w.maybe_restart(&hook);

  uint32_t tpn = p.threads_per_node;
  uint32_t local_ix = tid % tpn;
  bool leader = local_ix == 0;
  float* shared_grad = nullptr;
  float* partials = nullptr;
  if (p.variant == LrVariant::onefetch) {
    shared_grad = static_cast<float*>(w.node_scratch("lr_grad", sizeof(float) * dim).first);
  } else if (p.variant == LrVariant::combine) {
    partials =
        static_cast<float*>(w.node_scratch("lr_partials", sizeof(float) * dim * tpn).first);
  }
  LocalBarrier* lb = nullptr;
  if (p.variant != LrVariant::baseline) lb = &w.local_barrier("lr", tpn);

  for (int32_t iter = hook.next_iter; iter < int32_t(p.iterations); ++iter) {
    std::fill(local_grad.begin(), local_grad.end(), 0.0f);
    for (const auto& pt : points) {
      double dot = 0;
      for (int32_t j = 0; j < dim; ++j) dot += double(theta[j]) * double(pt.x[j]);
      double sig = 1.0 / (1.0 + std::exp(-dot));
      float coef = float(double(pt.y) - sig);
      for (int32_t j = 0; j < dim; ++j) local_grad[j] += coef * pt.x[j];
    }
    hook.next_iter = iter + 1;

    switch (p.variant) {
      case LrVariant::baseline:
      case LrVariant::onefetch:
        w.accum().accumulate<float>(accum, tid, local_grad);
        break;
      case LrVariant::combine: {
        // One thread per node pre-sums the node's gradients in tid order and
        // contributes them as the node's group; same grouping the chunk
        // owners use, so the result is bit-identical.
        std::memcpy(partials + size_t(local_ix) * dim, local_grad.data(),
                    sizeof(float) * dim);
        lb->enter();
        if (leader) {
          std::vector<float> combined(dim, 0.0f);
          for (uint32_t t = 0; t < tpn; ++t) {
            const float* part = partials + size_t(t) * dim;
            for (int32_t j = 0; j < dim; ++j) combined[j] += part[j];
          }
          w.accum().accumulate_combined<float>(accum, w.node_id(), combined);
        } else {
          w.accum().join_round(accum);
        }
        lb->enter();  // slots may be reused next iteration
        break;
      }
    }

    if (p.variant == LrVariant::onefetch) {
      // A single fetch of the global gradient per node, shared locally.
      if (leader) w.shm().copy_to(grad_arr, shared_grad, 0, uint32_t(dim));
      lb->enter();
      std::memcpy(grad.data(), shared_grad, sizeof(float) * dim);
      lb->enter();
    } else {
      w.shm().copy_to(grad_arr, grad.data(), 0, uint32_t(dim));
    }

    for (int32_t j = 0; j < dim; ++j) theta[j] += p.step_size * grad[j];
  }

  if (tid == 0) {
    auto theta_arr = w.shm().array_from_ref<float>(w.shm().get(d->theta_ref));
    w.shm().copy_from(theta_arr, theta.data(), 0, uint32_t(dim));
  }
}

}  // namespace

LrVariant parse_lr_variant(const std::string& s) {
  if (s == "baseline") return LrVariant::baseline;
  if (s == "onefetch") return LrVariant::onefetch;
  if (s == "combine") return LrVariant::combine;
  fail(Errc::argument, "unknown lr variant " + s);
}

LrParams LrParams::from_args(const std::vector<std::string>& args) {
  auto kv = parse_kv_args(args);
  LrParams p;
  check(kv.count("data"), Errc::argument, "lr needs data=<path>");
  p.data = kv.at("data");
  if (kv.count("iterations")) p.iterations = uint32_t(std::stoul(kv.at("iterations")));
  if (kv.count("step_size")) p.step_size = std::stof(kv.at("step_size"));
  if (kv.count("threads_per_node"))
    p.threads_per_node = uint32_t(std::stoul(kv.at("threads_per_node")));
  if (kv.count("variant")) p.variant = parse_lr_variant(kv.at("variant"));
  if (kv.count("checkpoint_every"))
    p.checkpoint_every = uint32_t(std::stoul(kv.at("checkpoint_every")));
  if (kv.count("out")) p.out = kv.at("out");
  return p;
}

std::vector<std::string> LrParams::to_args() const {
  const char* variants[] = {"baseline", "onefetch", "combine"};
  std::vector<std::string> a = {
      "data=" + data,
      "iterations=" + std::to_string(iterations),
      "step_size=" + fmt_f32(step_size),
      "threads_per_node=" + std::to_string(threads_per_node),
      std::string("variant=") + variants[int(variant)],
      "checkpoint_every=" + std::to_string(checkpoint_every),
  };
  if (!out.empty()) a.push_back("out=" + out);
  return a;
}

AppSpec lr_app() {
  AppSpec app;
  app.name = "lr";
  app.declare = [](Catalog& cat, const std::vector<std::string>&) {
    auto d = std::make_unique<LrDecls>();
    d->param_len = cat.declare_global<int32_t>("lr_param_len");
    d->grad_ref = cat.declare_global<ObjRef>("lr_grad");
    d->theta_ref = cat.declare_global<ObjRef>("lr_theta");
    d->accum_id = cat.declare_global<int32_t>("lr_accum");
    return d;
  };
  app.register_entries = [](EntryRegistry& reg) { reg.add("lr_worker", lr_worker); };
  return app;
}

LrResult run_lr(ClusterNode& m) {
  LrParams p = LrParams::from_args(m.app_args());
  auto* d = dynamic_cast<LrDecls*>(m.decls());
  check(d != nullptr, Errc::internal, "lr declarations missing");

  auto first = read_first_rows(p.data, 1);
  check(!first.empty() && first[0].size() >= 2, Errc::data, "empty training set");
  uint32_t dim = uint32_t(first[0].size() - 1);
  uint32_t slaves = m.config().node_count() - 1;
  uint32_t nthreads = p.threads_per_node * slaves;

  auto grad_arr = m.shm().new_array<float>(dim);
  auto theta_arr = m.shm().new_array<float>(dim);
  m.shm().set(d->param_len, int32_t(dim));
  m.shm().set(d->grad_ref, grad_arr.ref());
  m.shm().set(d->theta_ref, theta_arr.ref());
  AccumInfo accum =
      m.accum_controller().create(nthreads, grad_arr.object_id, dim, ElemKind::f32,
                                  m.config().accum_mode,
                                  placement_groups(nthreads, p.threads_per_node));
  m.shm().set(d->accum_id, int32_t(accum.accum_id));

  launch_workers(m, LaunchPlan{nthreads, p.threads_per_node, accum.barrier_id,
                               p.checkpoint_every, true},
                 "lr_worker");
  m.wait_all_threads();

  LrResult res;
  res.theta.resize(dim);
  m.shm().copy_to(theta_arr, res.theta.data(), 0, dim);

  auto rows = read_rows(p.data);
  size_t correct = 0;
  for (const auto& row : rows) {
    double dot = 0;
    for (uint32_t j = 0; j < dim; ++j) dot += double(res.theta[j]) * row[j + 1];
    double sig = 1.0 / (1.0 + std::exp(-dot));
    if ((sig > 0.5 ? 1.0 : 0.0) == row[0]) ++correct;
  }
  res.train_accuracy = rows.empty() ? 0 : double(correct) / double(rows.size());

  if (!p.out.empty()) write_float_column(p.out, res.theta);
  m.close_cluster();
  return res;
}

}  // namespace step::apps
