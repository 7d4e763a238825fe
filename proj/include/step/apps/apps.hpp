// Reference applications: logistic regression, K-means, NMF, PageRank, plus
// seeded dataset generators. Each app provides an AppSpec (declarations +
// entry functions) and a master-side run function that reads its parameters
// from the app argument list broadcast at init.
//
// Workers are placed contiguously: thread tid runs on slave 1 + tid/tpn, and
// tid doubles as the participant ordinal and its contribution group is its
// initial node, so accumulator results do not depend on later placement.
#pragma once

#include <map>

#include "step/apps/dataio.hpp"
#include "step/cluster.hpp"

namespace step::apps {

std::map<std::string, std::string> parse_kv_args(const std::vector<std::string>& args);

// Contiguous ceiling-first block partition of `rows` among `nthreads`.
std::pair<size_t, size_t> partition_bounds(size_t rows, uint32_t tid, uint32_t nthreads);

inline NodeId node_of_tid(uint32_t tid, uint32_t threads_per_node) {
  return 1 + tid / threads_per_node;
}
std::vector<uint32_t> placement_groups(uint32_t nthreads, uint32_t threads_per_node);

// Applies --checkpoint-every wiring and spawns the workers; shared by every
// run function.
struct LaunchPlan {
  uint32_t nthreads;
  uint32_t threads_per_node;
  uint32_t checkpoint_barrier;  // barrier whose epochs count iterations
  uint32_t checkpoint_every;
  bool track_iterations = true;
};
void launch_workers(ClusterNode& m, const LaunchPlan& plan, const std::string& entry);

// --- logistic regression ---------------------------------------------------------

enum class LrVariant : uint8_t { baseline = 0, onefetch = 1, combine = 2 };
LrVariant parse_lr_variant(const std::string& s);

struct LrParams {
  std::string data;
  uint32_t iterations = 50;
  float step_size = 0.1f;
  uint32_t threads_per_node = 2;
  LrVariant variant = LrVariant::baseline;
  uint32_t checkpoint_every = 0;
  std::string out;

  static LrParams from_args(const std::vector<std::string>& args);
  std::vector<std::string> to_args() const;
};
struct LrResult {
  std::vector<float> theta;
  double train_accuracy = 0;
};
AppSpec lr_app();
LrResult run_lr(ClusterNode& master);

// --- K-means ----------------------------------------------------------------------

struct KmeansParams {
  std::string data;
  uint32_t k = 3;
  uint32_t iterations = 10;
  uint32_t threads_per_node = 2;
  uint32_t checkpoint_every = 0;
  std::string out;

  static KmeansParams from_args(const std::vector<std::string>& args);
  std::vector<std::string> to_args() const;
};
struct KmeansResult {
  uint32_t k = 0, dim = 0;
  std::vector<double> centers;  // k x dim row-major
};
AppSpec kmeans_app();
KmeansResult run_kmeans(ClusterNode& master);

// --- NMF --------------------------------------------------------------------------

struct NmfParams {
  std::string data;
  uint32_t rows = 0, cols = 0;  // 0: inferred from the triplets
  uint32_t rank = 3;
  uint32_t iterations = 100;  // epochs
  double step_size = 0.001;
  uint32_t threads_per_node = 2;
  uint32_t checkpoint_every = 0;
  std::string out;  // writes <out>.P and <out>.Q

  static NmfParams from_args(const std::vector<std::string>& args);
  std::vector<std::string> to_args() const;
};
struct NmfResult {
  uint32_t rows = 0, cols = 0, rank = 0;
  std::vector<double> p;       // rows x rank
  std::vector<double> q;       // rank x cols
  std::vector<double> losses;  // per epoch
};
AppSpec nmf_app();
NmfResult run_nmf(ClusterNode& master);

// --- PageRank ---------------------------------------------------------------------

struct PagerankParams {
  std::string data;
  uint32_t vertices = 0;  // 0: inferred (max endpoint + 1)
  uint32_t iterations = 50;
  double damping = 0.85;
  uint32_t threads_per_node = 2;
  uint32_t checkpoint_every = 0;
  std::string out;  // final ranks; workers also write <out>.part<tid>

  static PagerankParams from_args(const std::vector<std::string>& args);
  std::vector<std::string> to_args() const;
};
struct PagerankResult {
  std::vector<double> ranks;
  std::vector<double> rank_sums;  // per iteration, should all be 1
};
AppSpec pagerank_app();
PagerankResult run_pagerank(ClusterNode& master);

// --- registry ----------------------------------------------------------------------

const std::vector<const AppSpec*>& all_apps();
const AppSpec* find_app(const std::string& name);
void register_all_entries(EntryRegistry& reg);

// --- generators ----------------------------------------------------------------------

// Linearly separable two-class set, labels in {0,1}, label-first rows.
void gen_lr(const std::string& path, uint32_t n, uint32_t dim, uint64_t seed,
            double margin = 0.2);
// k Gaussian blobs, means spaced `spacing` apart per coordinate, rows
// interleaved so the first k rows hit k distinct blobs. Writes <path>.means.
void gen_blobs(const std::string& path, uint32_t k, uint32_t per_cluster, uint32_t dim,
               double sigma, double spacing, uint64_t seed);
// Nonnegative rank-`rank` matrix written as n*m triplets.
void gen_lowrank(const std::string& path, uint32_t n, uint32_t m, uint32_t rank, uint64_t seed);
// Zipf-out-degree random graph with exactly `edges` edges, no self loops.
void gen_graph(const std::string& path, uint32_t vertices, uint64_t edges, uint64_t seed);

}  // namespace step::apps
