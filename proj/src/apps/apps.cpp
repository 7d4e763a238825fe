#include "step/apps/apps.hpp"

#include <chrono>

#include "step/fault.hpp"

namespace step::apps {

std::map<std::string, std::string> parse_kv_args(const std::vector<std::string>& args) {
  std::map<std::string, std::string> out;
  for (const auto& a : args) {
    size_t eq = a.find('=');
    check(eq != std::string::npos, Errc::argument, "app argument '" + a + "' is not key=value");
    out[a.substr(0, eq)] = a.substr(eq + 1);
  }
  return out;
}

std::pair<size_t, size_t> partition_bounds(size_t rows, uint32_t tid, uint32_t nthreads) {
  size_t q = rows / nthreads, r = rows % nthreads;
  size_t lo = size_t(tid) * q + std::min<size_t>(tid, r);
  return {lo, lo + q + (tid < r ? 1 : 0)};
}

std::vector<uint32_t> placement_groups(uint32_t nthreads, uint32_t threads_per_node) {
  std::vector<uint32_t> g(nthreads);
  for (uint32_t t = 0; t < nthreads; ++t) g[t] = node_of_tid(t, threads_per_node);
  return g;
}

void launch_workers(ClusterNode& m, const LaunchPlan& plan, const std::string& entry) {
  uint32_t slaves = m.config().node_count() - 1;
  check(plan.nthreads == plan.threads_per_node * slaves, Errc::argument,
        "thread count must equal threads_per_node * slaves");
  if (plan.track_iterations) {
    auto start = std::make_shared<std::chrono::steady_clock::time_point>(
        std::chrono::steady_clock::now());
    m.controller().set_release_observer(
        [&m, barrier = plan.checkpoint_barrier, start](uint32_t id, uint32_t epoch) {
          if (id != barrier) return;
          auto now = std::chrono::steady_clock::now();
          double ms = std::chrono::duration<double, std::milli>(now - *start).count();
          *start = now;
          m.report().iterations.push_back(RunReport::Iteration{epoch + 1, ms});
        });
  }
  if (plan.checkpoint_every > 0 && !m.config().checkpoint_dir.empty()) {
    m.fault().checkpoint_at_barrier(plan.checkpoint_barrier, plan.checkpoint_every);
    m.fault().initial_checkpoint();
  }
  uint32_t func = m.registry().id_of(entry);
  for (uint32_t t = 0; t < plan.nthreads; ++t) {
    m.create_thread(func, node_of_tid(t, plan.threads_per_node), t);
  }
}

const std::vector<const AppSpec*>& all_apps() {
  static const AppSpec lr = lr_app();
  static const AppSpec km = kmeans_app();
  static const AppSpec nmf = nmf_app();
  static const AppSpec pr = pagerank_app();
  static const std::vector<const AppSpec*> apps = {&lr, &km, &nmf, &pr};
  return apps;
}

const AppSpec* find_app(const std::string& name) {
  for (const AppSpec* a : all_apps()) {
    if (a->name == name) return a;
  }
  return nullptr;
}

void register_all_entries(EntryRegistry& reg) {
  for (const AppSpec* a : all_apps()) {
    if (a->register_entries) a->register_entries(reg);
  }
}

}  // namespace step::apps
