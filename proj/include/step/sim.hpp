// Deterministic in-process simulator. All endpoints live in one SimWorld;
// logical threads are OS threads gated by a single run token, so exactly one
// of {driver, task} executes at any instant. Progress is made by the driver:
//
//   1. run ready tasks to their next park point (FIFO),
//   2. else deliver one pending frame, link chosen by seeded RNG
//      (per-link FIFO always preserved),
//   3. else advance the virtual clock to the next timer.
//
// Identical seeds therefore reproduce identical delivery traces. Per-link and
// per-message-type payload byte counters support traffic assertions.
#pragma once

#include <condition_variable>
#include <deque>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <thread>
#include <vector>

#include "step/world.hpp"

namespace step {

class SimWorld : public World {
 public:
  using LinkKey = std::pair<EndpointId, EndpointId>;

  explicit SimWorld(uint64_t seed = 0);
  ~SimWorld() override;

  bool simulated() const override { return true; }

  void register_endpoint(EndpointId ep, FrameHandler h) override;
  bool endpoint_registered(EndpointId ep) const;

  void send(EndpointId src, EndpointId dst, Frame f) override;
  void spawn(EndpointId ep, std::function<void()> fn) override;
  void wait(const std::function<bool()>& pred) override;
  bool wait_for(uint64_t ms, const std::function<bool()>& pred) override;
  void wake() override;

  uint64_t now_ms() const override { return now_ms_; }
  uint64_t add_timer(EndpointId owner, uint64_t delay_ms, std::function<void()> cb) override;
  void cancel_timer(uint64_t timer_id) override;
  void abort_task(uint32_t task_id) override;

  void lock() override {}    // the run token is the lock
  void unlock() override {}

  // --- driving (test / runner side; call without the token) ---

  // One unit of progress; kStepNone when quiescent (nothing ready, pending
  // or timed).
  enum StepKind { kStepNone = 0, kStepTask = 1, kStepFrame = 2, kStepTimer = 3 };
  StepKind step();
  void run_until_quiescent();
  // run_until_quiescent, then throws if a live task is still blocked on a
  // non-dead endpoint (protocol deadlock) or any task failed.
  void run_to_completion();

  // Fine-grained driving for schedule exploration.
  bool drain_ready();                        // true if any task ran
  std::vector<LinkKey> pending_links() const;
  void deliver_one(const LinkKey& link);     // head frame of the link
  bool fire_next_timer();
  // Overrides seeded link selection; return index into the sorted link list.
  void set_link_chooser(std::function<size_t(const std::vector<LinkKey>&)> f);

  // --- failure injection ---
  void set_drop_from(EndpointId ep, bool drop);
  void kill_endpoint(EndpointId ep);         // drop from + blackhole to + abort tasks
  bool endpoint_dead(EndpointId ep) const { return dead_.count(ep) > 0; }

  // --- accounting ---
  uint64_t bytes_sent(EndpointId src, EndpointId dst) const;
  uint64_t total_bytes() const { return total_bytes_; }
  uint64_t bytes_by_type(MsgType t) const { return type_bytes_[size_t(t)]; }
  uint64_t frames_by_type(MsgType t) const { return type_frames_[size_t(t)]; }
  uint64_t frames_delivered() const { return frames_delivered_; }

  std::vector<std::string> task_errors() const { return task_errors_; }
  size_t live_task_count() const;

 private:
  struct Task {
    uint32_t uid;
    EndpointId owner;
    std::function<void()> fn;
    std::thread th;
    enum class St { fresh, ready, running, blocked, done } st = St::fresh;
    std::condition_variable cv;
    bool has_token = false;
    bool abort = false;
  };

  struct QueuedFrame {
    Frame frame;
  };

  void task_main(Task* t);
  void run_one_ready();
  void park_current();                        // task side: yield token to driver
  void make_ready(Task* t);                   // driver/task side
  void hand_token_and_wait(Task* t);          // driver side
  Task* expect_current() const;
  void teardown_tasks();

  // token machinery
  mutable std::mutex mu_;
  std::condition_variable driver_cv_;
  bool driver_has_token_ = true;

  uint64_t seed_;
  std::mt19937_64 rng_;
  std::function<size_t(const std::vector<LinkKey>&)> chooser_;

  std::map<EndpointId, FrameHandler> endpoints_;
  std::map<LinkKey, std::deque<QueuedFrame>> links_;
  std::set<EndpointId> drop_from_;
  std::set<EndpointId> dead_;

  std::vector<std::unique_ptr<Task>> tasks_;
  std::deque<Task*> ready_;
  uint32_t next_task_uid_ = 1;

  uint64_t now_ms_ = 0;
  uint64_t next_timer_id_ = 1;
  struct Timer {
    EndpointId owner;
    std::function<void()> cb;
  };
  std::map<std::pair<uint64_t, uint64_t>, Timer> timers_;  // (deadline, id)
  std::map<uint64_t, uint64_t> timer_deadline_;

  std::map<LinkKey, uint64_t> link_bytes_;
  uint64_t total_bytes_ = 0;
  uint64_t frames_delivered_ = 0;
  uint64_t type_bytes_[256] = {};
  uint64_t type_frames_[256] = {};

  std::vector<std::string> task_errors_;
};

}  // namespace step
