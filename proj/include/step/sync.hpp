// Distributed barriers and counting semaphores. All state transitions are
// serialized at the master's sync controller; per-node clients block the
// calling worker only. Barriers are reusable: each release advances an epoch,
// and enters carry the epoch so duplicate or stale arrivals are protocol
// errors. A timed-out participant retracts its arrival with a cancel message;
// if the release won the race the cancel fails and the participant takes the
// release instead (semaphores give the raced grant back with a release).
#pragma once

#include <deque>

#include "step/runtime.hpp"

namespace step {

enum class SyncOutcome { released, timed_out };

class SyncController {
 public:
  explicit SyncController(NodeRuntime& rt);

  // Direct creation (master-side task) — same path the SYNC_CREATE message uses.
  uint32_t create_barrier(uint32_t threshold);
  uint32_t create_semaphore(uint32_t count);

  struct Arrival {
    EndpointId src;
    uint64_t reqid;
    uint32_t node;
    uint32_t task;
  };
  struct Barrier {
    uint32_t threshold = 0;
    uint32_t epoch = 0;
    std::vector<Arrival> arrived;
    bool release_deferred = false;  // a checkpoint is being taken
  };
  struct Semaphore {
    int64_t count = 0;
    std::deque<Arrival> waiters;
    std::vector<std::pair<uint32_t, uint32_t>> enqueue_log;  // (node, task)
    std::vector<std::pair<uint32_t, uint32_t>> grant_log;
  };

  const Barrier& barrier(uint32_t id) const;
  const Semaphore& semaphore(uint32_t id) const;

  // Invoked when a barrier reaches its threshold, before any release is
  // sent. Returning true defers the release; the interceptor must later call
  // release_barrier(id). Used for checkpoint-at-barrier.
  using Interceptor = std::function<bool(uint32_t barrier_id, uint32_t epoch)>;
  void set_barrier_interceptor(Interceptor f) { interceptor_ = std::move(f); }
  // Called on every release (after the interceptor, if any); used for
  // iteration timing in run reports.
  using ReleaseObserver = std::function<void(uint32_t barrier_id, uint32_t epoch)>;
  void set_release_observer(ReleaseObserver f) { observer_ = std::move(f); }
  void release_barrier(uint32_t id);

  // Checkpoint support: barrier epochs and semaphore counts.
  std::vector<std::tuple<uint32_t, uint32_t, uint32_t>> barrier_states() const;  // id,thr,epoch
  std::vector<std::pair<uint32_t, int64_t>> semaphore_states() const;            // id,count
  void restore(const std::vector<std::tuple<uint32_t, uint32_t, uint32_t>>& barriers,
               const std::vector<std::pair<uint32_t, int64_t>>& semaphores);
  // Drops queued arrivals/waiters without replying (their tasks are being
  // torn down by recovery).
  void clear_queues();

 private:
  void on_sync_create(EndpointId src, Reader& r);
  void on_barrier_enter(EndpointId src, Reader& r);
  void on_barrier_cancel(EndpointId src, Reader& r);
  void on_sem_acquire(EndpointId src, Reader& r);
  void on_sem_release(EndpointId src, Reader& r);
  void on_sem_cancel(EndpointId src, Reader& r);
  void maybe_release(uint32_t id);
  void grant(uint32_t sem_id, const Arrival& a);

  NodeRuntime& rt_;
  std::map<uint32_t, Barrier> barriers_;
  std::map<uint32_t, Semaphore> semaphores_;
  uint32_t next_id_ = 1;
  Interceptor interceptor_;
  ReleaseObserver observer_;
};

class SyncClient {
 public:
  SyncClient(NodeRuntime& rt, EndpointId controller);

  uint32_t barrier_create(uint32_t threshold);
  uint32_t sem_create(uint32_t count);

  // timeout_ms < 0 means wait forever.
  SyncOutcome barrier_enter(uint32_t barrier_id, int64_t timeout_ms = -1);
  // Entry at an explicit epoch; used by services whose epoch is the round
  // number rather than a per-task counter. wait=false sends the arrival
  // without blocking for the release.
  SyncOutcome barrier_enter_at(uint32_t barrier_id, uint32_t epoch, int64_t timeout_ms = -1,
                               bool wait = true);
  SyncOutcome sem_acquire(uint32_t sem_id, int64_t timeout_ms = -1);
  void sem_release(uint32_t sem_id);

  // Forgets per-task epochs (respawned workers start over after recovery).
  void reset();

  EndpointId controller() const { return controller_; }

 private:
  uint32_t next_epoch(uint32_t barrier_id);

  NodeRuntime& rt_;
  EndpointId controller_;
  std::map<std::pair<uint32_t, uint32_t>, uint32_t> epochs_;  // (task, barrier) -> epoch
};

}  // namespace step
