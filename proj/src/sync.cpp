#include "step/sync.hpp"

#include <limits>

namespace step {

SyncController::SyncController(NodeRuntime& rt) : rt_(rt) {
  rt_.set_handler(MsgType::SYNC_CREATE, [this](EndpointId s, Reader& r) { on_sync_create(s, r); });
  rt_.set_handler(MsgType::BARRIER_ENTER,
                  [this](EndpointId s, Reader& r) { on_barrier_enter(s, r); });
  rt_.set_handler(MsgType::BARRIER_CANCEL,
                  [this](EndpointId s, Reader& r) { on_barrier_cancel(s, r); });
  rt_.set_handler(MsgType::SEM_ACQUIRE, [this](EndpointId s, Reader& r) { on_sem_acquire(s, r); });
  rt_.set_handler(MsgType::SEM_RELEASE, [this](EndpointId s, Reader& r) { on_sem_release(s, r); });
  rt_.set_handler(MsgType::SEM_CANCEL, [this](EndpointId s, Reader& r) { on_sem_cancel(s, r); });
}

uint32_t SyncController::create_barrier(uint32_t threshold) {
  check(threshold >= 1, Errc::argument, "barrier threshold must be >= 1");
  uint32_t id = next_id_++;
  barriers_[id].threshold = threshold;
  return id;
}

uint32_t SyncController::create_semaphore(uint32_t count) {
  uint32_t id = next_id_++;
  semaphores_[id].count = count;
  return id;
}

const SyncController::Barrier& SyncController::barrier(uint32_t id) const {
  auto it = barriers_.find(id);
  check(it != barriers_.end(), Errc::argument, "unknown barrier " + std::to_string(id));
  return it->second;
}

const SyncController::Semaphore& SyncController::semaphore(uint32_t id) const {
  auto it = semaphores_.find(id);
  check(it != semaphores_.end(), Errc::argument, "unknown semaphore " + std::to_string(id));
  return it->second;
}

void SyncController::on_sync_create(EndpointId src, Reader& r) {
  uint64_t reqid = r.u64();
  uint8_t kind = r.u8();
  uint32_t arg = r.u32();
  Errc status = Errc::ok;
  uint32_t id = 0;
  try {
    id = kind == 0 ? create_barrier(arg) : create_semaphore(arg);
  } catch (const Error& e) {
    status = e.code();
  }
  rt_.reply(src, MsgType::REPLY, reqid, status, [&](Writer& w) { w.u32(id); });
}

void SyncController::on_barrier_enter(EndpointId src, Reader& r) {
  uint64_t reqid = r.u64();
  uint32_t id = r.u32();
  uint32_t epoch = r.u32();
  uint32_t node = r.u32();
  uint32_t task = r.u32();
  auto it = barriers_.find(id);
  if (it == barriers_.end()) {
    rt_.reply(src, MsgType::BARRIER_RELEASE, reqid, Errc::argument);
    return;
  }
  Barrier& b = it->second;
  if (epoch != b.epoch) {
    rt_.reply(src, MsgType::BARRIER_RELEASE, reqid, Errc::protocol);
    return;
  }
  for (const auto& a : b.arrived) {
    if (a.node == node && a.task == task) {
      rt_.reply(src, MsgType::BARRIER_RELEASE, reqid, Errc::protocol);
      return;
    }
  }
  b.arrived.push_back(Arrival{src, reqid, node, task});
  maybe_release(id);
}

void SyncController::maybe_release(uint32_t id) {
  Barrier& b = barriers_.at(id);
  if (b.arrived.size() < b.threshold || b.release_deferred) return;
  if (interceptor_ && interceptor_(id, b.epoch)) {
    b.release_deferred = true;  // interceptor will call release_barrier
    return;
  }
  release_barrier(id);
}

void SyncController::release_barrier(uint32_t id) {
  Barrier& b = barriers_.at(id);
  uint32_t epoch = b.epoch;
  auto arrived = std::move(b.arrived);
  b.arrived.clear();
  b.epoch += 1;
  b.release_deferred = false;
  for (const auto& a : arrived) {
    rt_.reply(a.src, MsgType::BARRIER_RELEASE, a.reqid, Errc::ok,
              [&](Writer& w) { w.u32(epoch); });
  }
  if (observer_) observer_(id, epoch);
}

void SyncController::on_barrier_cancel(EndpointId src, Reader& r) {
  uint64_t reqid = r.u64();
  uint32_t id = r.u32();
  uint32_t epoch = r.u32();
  uint32_t node = r.u32();
  uint32_t task = r.u32();
  uint8_t rolled_back = 0;
  auto it = barriers_.find(id);
  if (it != barriers_.end() && it->second.epoch == epoch && !it->second.release_deferred) {
    auto& arr = it->second.arrived;
    for (size_t i = 0; i < arr.size(); ++i) {
      if (arr[i].node == node && arr[i].task == task) {
        arr.erase(arr.begin() + i);
        rolled_back = 1;
        break;
      }
    }
  }
  rt_.reply(src, MsgType::REPLY, reqid, Errc::ok, [&](Writer& w) { w.u8(rolled_back); });
}

void SyncController::grant(uint32_t sem_id, const Arrival& a) {
  semaphores_.at(sem_id).grant_log.emplace_back(a.node, a.task);
  rt_.reply(a.src, MsgType::SEM_GRANT, a.reqid, Errc::ok);
}

void SyncController::on_sem_acquire(EndpointId src, Reader& r) {
  uint64_t reqid = r.u64();
  uint32_t id = r.u32();
  uint32_t node = r.u32();
  uint32_t task = r.u32();
  auto it = semaphores_.find(id);
  if (it == semaphores_.end()) {
    rt_.reply(src, MsgType::SEM_GRANT, reqid, Errc::argument);
    return;
  }
  Arrival a{src, reqid, node, task};
  if (it->second.count > 0) {
    it->second.count -= 1;
    grant(id, a);
  } else {
    it->second.waiters.push_back(a);
    it->second.enqueue_log.emplace_back(node, task);
  }
}

void SyncController::on_sem_release(EndpointId src, Reader& r) {
  uint64_t reqid = r.u64();
  uint32_t id = r.u32();
  auto it = semaphores_.find(id);
  if (it == semaphores_.end()) {
    rt_.reply(src, MsgType::REPLY, reqid, Errc::argument);
    return;
  }
  Semaphore& s = it->second;
  if (!s.waiters.empty()) {
    // Increment plus grant-with-auto-decrement collapses to handing the unit
    // to the FIFO head.
    Arrival a = s.waiters.front();
    s.waiters.pop_front();
    grant(id, a);
  } else {
    if (s.count >= std::numeric_limits<int32_t>::max()) {
      rt_.reply(src, MsgType::REPLY, reqid, Errc::range);
      return;
    }
    s.count += 1;
  }
  rt_.reply(src, MsgType::REPLY, reqid, Errc::ok);
}

void SyncController::on_sem_cancel(EndpointId src, Reader& r) {
  uint64_t reqid = r.u64();
  uint32_t id = r.u32();
  uint64_t acquire_reqid = r.u64();
  uint8_t cancelled = 0;
  auto it = semaphores_.find(id);
  if (it != semaphores_.end()) {
    auto& q = it->second.waiters;
    for (size_t i = 0; i < q.size(); ++i) {
      if (q[i].src == src && q[i].reqid == acquire_reqid) {
        q.erase(q.begin() + i);
        cancelled = 1;
        break;
      }
    }
  }
  rt_.reply(src, MsgType::REPLY, reqid, Errc::ok, [&](Writer& w) { w.u8(cancelled); });
}

std::vector<std::tuple<uint32_t, uint32_t, uint32_t>> SyncController::barrier_states() const {
  std::vector<std::tuple<uint32_t, uint32_t, uint32_t>> out;
  for (const auto& [id, b] : barriers_) out.emplace_back(id, b.threshold, b.epoch);
  return out;
}

std::vector<std::pair<uint32_t, int64_t>> SyncController::semaphore_states() const {
  std::vector<std::pair<uint32_t, int64_t>> out;
  for (const auto& [id, s] : semaphores_) out.emplace_back(id, s.count);
  return out;
}

void SyncController::restore(
    const std::vector<std::tuple<uint32_t, uint32_t, uint32_t>>& barriers,
    const std::vector<std::pair<uint32_t, int64_t>>& semaphores) {
  barriers_.clear();
  semaphores_.clear();
  uint32_t max_id = 0;
  for (const auto& [id, thr, epoch] : barriers) {
    barriers_[id].threshold = thr;
    barriers_[id].epoch = epoch;
    max_id = std::max(max_id, id);
  }
  for (const auto& [id, count] : semaphores) {
    semaphores_[id].count = count;
    max_id = std::max(max_id, id);
  }
  next_id_ = std::max(next_id_, max_id + 1);
}

void SyncController::clear_queues() {
  for (auto& [id, b] : barriers_) {
    b.arrived.clear();
    b.release_deferred = false;
  }
  for (auto& [id, s] : semaphores_) s.waiters.clear();
}

// --- client --------------------------------------------------------------------

SyncClient::SyncClient(NodeRuntime& rt, EndpointId controller)
    : rt_(rt), controller_(controller) {}

uint32_t SyncClient::barrier_create(uint32_t threshold) {
  check(threshold >= 1, Errc::argument, "barrier threshold must be >= 1");
  Bytes b = rt_.call(controller_, MsgType::SYNC_CREATE, [&](Writer& w) {
    w.u8(0);
    w.u32(threshold);
  });
  return Reader(b).u32();
}

uint32_t SyncClient::sem_create(uint32_t count) {
  Bytes b = rt_.call(controller_, MsgType::SYNC_CREATE, [&](Writer& w) {
    w.u8(1);
    w.u32(count);
  });
  return Reader(b).u32();
}

uint32_t SyncClient::next_epoch(uint32_t barrier_id) {
  TaskCtx* t = current_task();
  check(t != nullptr, Errc::internal, "barrier_enter outside a task");
  return epochs_[{t->task_id, barrier_id}];
}

SyncOutcome SyncClient::barrier_enter(uint32_t barrier_id, int64_t timeout_ms) {
  uint32_t epoch = next_epoch(barrier_id);
  SyncOutcome out = barrier_enter_at(barrier_id, epoch, timeout_ms);
  if (out == SyncOutcome::released) {
    TaskCtx* t = current_task();
    epochs_[{t->task_id, barrier_id}] = epoch + 1;
  }
  return out;
}

SyncOutcome SyncClient::barrier_enter_at(uint32_t barrier_id, uint32_t epoch, int64_t timeout_ms,
                                         bool wait) {
  uint32_t node = rt_.node();
  uint32_t task = current_task()->task_id;
  uint64_t reqid;
  {
    RunCtx g(rt_.world());
    reqid = rt_.send_request(controller_, MsgType::BARRIER_ENTER, [&](Writer& w) {
      w.u32(barrier_id);
      w.u32(epoch);
      w.u32(node);
      w.u32(task);
    });
  }
  if (!wait) {
    RunCtx g(rt_.world());
    rt_.drop_request(reqid);
    return SyncOutcome::released;
  }
  if (timeout_ms < 0) {
    rt_.await(reqid);
    return SyncOutcome::released;
  }
  if (rt_.await_for(reqid, uint64_t(timeout_ms))) return SyncOutcome::released;
  // Timed out: retract the arrival. If the release won the race, the cancel
  // fails and FIFO ordering guarantees the release is already here.
  Bytes cb = rt_.call(controller_, MsgType::BARRIER_CANCEL, [&](Writer& w) {
    w.u32(barrier_id);
    w.u32(epoch);
    w.u32(node);
    w.u32(task);
  });
  if (Reader(cb).u8()) {
    RunCtx g(rt_.world());
    rt_.drop_request(reqid);
    return SyncOutcome::timed_out;
  }
  rt_.await(reqid);
  return SyncOutcome::released;
}

SyncOutcome SyncClient::sem_acquire(uint32_t sem_id, int64_t timeout_ms) {
  uint32_t node = rt_.node();
  uint32_t task = current_task()->task_id;
  uint64_t reqid;
  {
    RunCtx g(rt_.world());
    reqid = rt_.send_request(controller_, MsgType::SEM_ACQUIRE, [&](Writer& w) {
      w.u32(sem_id);
      w.u32(node);
      w.u32(task);
    });
  }
  if (timeout_ms < 0) {
    rt_.await(reqid);
    return SyncOutcome::released;
  }
  if (rt_.await_for(reqid, uint64_t(timeout_ms))) return SyncOutcome::released;
  Bytes cb = rt_.call(controller_, MsgType::SEM_CANCEL, [&](Writer& w) {
    w.u32(sem_id);
    w.u64(reqid);
  });
  if (Reader(cb).u8()) {
    RunCtx g(rt_.world());
    rt_.drop_request(reqid);
    return SyncOutcome::timed_out;
  }
  // The grant raced the timeout; take it and hand it straight back.
  rt_.await(reqid);
  sem_release(sem_id);
  return SyncOutcome::timed_out;
}

void SyncClient::sem_release(uint32_t sem_id) {
  rt_.call(controller_, MsgType::SEM_RELEASE, [&](Writer& w) { w.u32(sem_id); });
}

void SyncClient::reset() { epochs_.clear(); }

}  // namespace step
