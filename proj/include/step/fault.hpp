// Checkpoint-based fault tolerance.
//
// A checkpoint is a consistent image of the run: the full store contents,
// controller state (barrier epochs, semaphore counts, accumulator
// registrations, the thread table) and the per-thread payloads produced by
// user Checkpoint hooks. Images are taken either right before a chosen
// barrier's release (every k-th epoch; the arrivals stay parked until the
// image is durable) or through a virtual barrier that pauses every worker at
// its next DSM-operation boundary.
//
// Recovery after a heartbeat-detected failure runs in phases over the
// surviving nodes: prepare (tear down workers), drain (fence every live link
// so no stale frame survives), commit (reset caches/directories/round state,
// adopt the dead node's endpoint), then restore the store from the latest
// image, rewind controller state, re-register accumulators at the rewound
// round, and respawn every incomplete thread - replacements placed on one
// node (single policy) or spread round-robin (multi).
#pragma once

#include <optional>

#include "step/cluster.hpp"

namespace step {

struct CheckpointImage {
  uint64_t id = 0;
  uint64_t iteration = 0;
  std::vector<std::pair<uint64_t, Bytes>> store;  // sorted by key
  std::vector<std::tuple<uint32_t, uint32_t, uint32_t>> barriers;  // id, threshold, epoch
  std::vector<std::pair<uint32_t, int64_t>> semaphores;
  std::vector<AccumInfo> accums;
  std::vector<ClusterNode::ThreadInfo> threads;
  std::map<uint32_t, Bytes> payloads;  // thread record oid -> user bytes

  Bytes encode() const;
  static CheckpointImage decode(const Bytes& data);
};

// Atomic write: temp file + rename; the manifest carries an integrity digest.
void write_image(const std::string& dir, const CheckpointImage& image);
std::optional<CheckpointImage> load_image(const std::string& dir, uint64_t id);
std::optional<CheckpointImage> load_latest(const std::string& dir);

class FaultManager {
 public:
  explicit FaultManager(ClusterNode& master);

  // Image id 0, taken at the checkpoint-enable point (right before workers
  // spawn); defines recovery for failures preceding the first real image.
  void initial_checkpoint();
  // Checkpoints every k-th epoch of the given barrier, before its release.
  void checkpoint_at_barrier(uint32_t barrier_id, uint32_t every_k);
  // Virtual barrier: pause everywhere, image, resume. Returns the image id.
  std::optional<uint64_t> checkpoint_command();

  void recover(const std::vector<NodeId>& failed, RecoveryPolicy policy);
  uint64_t images_taken() const { return next_id_; }
  bool recovering() const { return recovering_; }

 private:
  std::optional<uint64_t> take_checkpoint(uint64_t iteration, uint8_t mode);
  std::map<uint32_t, Bytes> collect_payloads(uint8_t mode);
  void resume_all();
  uint64_t last_known_iteration() const;

  ClusterNode& m_;
  uint64_t next_id_ = 0;
  bool recovering_ = false;
  uint64_t failure_seen_ms_ = 0;
};

}  // namespace step
