// Execution backend abstraction. A World owns message delivery, logical
// threads (tasks), timers and the runtime lock. Two implementations exist:
// SimWorld (deterministic single-token scheduler, in-process) and SockWorld
// (real threads and stream sockets, one World per OS process).
//
// Locking discipline: module state is only touched in "runtime context",
// i.e. with the world lock held. Handlers and timer callbacks are invoked
// in runtime context. Task-side public APIs acquire it via RunCtx.
#pragma once

#include <functional>
#include <memory>

#include "step/wire.hpp"

namespace step {

class World;

// Identity of the current logical thread. Workers, the master's main thread
// and short-lived service tasks all carry one.
struct TaskCtx {
  World* world = nullptr;
  EndpointId endpoint = 0;
  uint32_t task_id = 0;
  bool aborted = false;
};

TaskCtx* current_task();

class World {
 public:
  using FrameHandler = std::function<void(EndpointId src, const Frame&)>;

  virtual ~World() = default;

  virtual bool simulated() const = 0;

  // Registers/replaces the demultiplexer for an endpoint.
  virtual void register_endpoint(EndpointId ep, FrameHandler h) = 0;

  // Runtime context required. Throws Errc::unreachable for unknown endpoints.
  virtual void send(EndpointId src, EndpointId dst, Frame f) = 0;

  // Spawns fn as a schedulable logical thread owned by endpoint ep.
  virtual void spawn(EndpointId ep, std::function<void()> fn) = 0;

  // Blocks the current task until pred() holds. Runtime context required;
  // the lock is released while parked. Throws Errc::aborted when the task
  // is torn down.
  virtual void wait(const std::function<bool()>& pred) = 0;
  // Returns false on timeout (ms of backend time).
  virtual bool wait_for(uint64_t ms, const std::function<bool()>& pred) = 0;
  // Re-evaluates the predicates of parked tasks after a state change.
  virtual void wake() = 0;

  virtual uint64_t now_ms() const = 0;
  // Timers are owned by an endpoint so failure injection can silence them.
  virtual uint64_t add_timer(EndpointId owner, uint64_t delay_ms, std::function<void()> cb) = 0;
  virtual void cancel_timer(uint64_t timer_id) = 0;

  // Tears down one logical thread: it throws Errc::aborted at its next
  // blocking point.
  virtual void abort_task(uint32_t task_id) = 0;

  virtual void lock() = 0;
  virtual void unlock() = 0;
};

// RAII entry into runtime context for task-side APIs.
class RunCtx {
 public:
  explicit RunCtx(World& w) : w_(w) { w_.lock(); }
  ~RunCtx() { w_.unlock(); }
  RunCtx(const RunCtx&) = delete;
  RunCtx& operator=(const RunCtx&) = delete;

 private:
  World& w_;
};

}  // namespace step
