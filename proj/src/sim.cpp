#include "step/sim.hpp"

#include <algorithm>
#include <sstream>

namespace step {

namespace {
thread_local TaskCtx* g_current_ctx = nullptr;
}  // namespace

TaskCtx* current_task() { return g_current_ctx; }

namespace {
thread_local SimWorld* g_current_sim = nullptr;
thread_local void* g_current_sim_task = nullptr;
}  // namespace

SimWorld::SimWorld(uint64_t seed) : seed_(seed), rng_(seed) {}

SimWorld::~SimWorld() { teardown_tasks(); }

void SimWorld::register_endpoint(EndpointId ep, FrameHandler h) {
  endpoints_[ep] = std::move(h);
  dead_.erase(ep);
  drop_from_.erase(ep);
}

bool SimWorld::endpoint_registered(EndpointId ep) const { return endpoints_.count(ep) > 0; }

void SimWorld::send(EndpointId src, EndpointId dst, Frame f) {
  TaskCtx* ctx = current_task();
  if (ctx && ctx->aborted) fail(Errc::aborted, "send from torn-down task");
  if (drop_from_.count(src) || dead_.count(src)) return;  // injected failure
  check(endpoints_.count(dst) > 0, Errc::unreachable,
        "endpoint " + std::to_string(dst) + " not registered");
  if (dead_.count(dst)) return;  // blackhole, detection is the heartbeat's job
  uint64_t n = f.payload.size();
  link_bytes_[{src, dst}] += n;
  total_bytes_ += n;
  type_bytes_[size_t(f.type)] += n;
  type_frames_[size_t(f.type)] += 1;
  links_[{src, dst}].push_back(QueuedFrame{std::move(f)});
}

void SimWorld::spawn(EndpointId ep, std::function<void()> fn) {
  auto t = std::make_unique<Task>();
  t->uid = next_task_uid_++;
  t->owner = ep;
  t->fn = std::move(fn);
  Task* raw = t.get();
  tasks_.push_back(std::move(t));
  raw->th = std::thread([this, raw] { task_main(raw); });
  std::lock_guard lk(mu_);
  raw->st = Task::St::ready;
  ready_.push_back(raw);
}

void SimWorld::task_main(Task* t) {
  {
    std::unique_lock lk(mu_);
    t->cv.wait(lk, [&] { return t->has_token; });
    t->st = Task::St::running;
  }
  TaskCtx ctx;
  ctx.world = this;
  ctx.endpoint = t->owner;
  ctx.task_id = t->uid;
  g_current_ctx = &ctx;
  g_current_sim = this;
  g_current_sim_task = t;
  try {
    if (t->abort) fail(Errc::aborted, "aborted before start");
    t->fn();
  } catch (const Error& e) {
    if (e.code() != Errc::aborted) {
      task_errors_.push_back("task " + std::to_string(t->uid) + " (endpoint " +
                             std::to_string(t->owner) + "): " + e.what());
    }
  } catch (const std::exception& e) {
    task_errors_.push_back("task " + std::to_string(t->uid) + ": " + e.what());
  }
  g_current_ctx = nullptr;
  g_current_sim = nullptr;
  g_current_sim_task = nullptr;
  std::lock_guard lk(mu_);
  t->st = Task::St::done;
  t->has_token = false;
  driver_has_token_ = true;
  driver_cv_.notify_all();
}

void SimWorld::park_current() {
  Task* t = static_cast<Task*>(g_current_sim_task);
  std::unique_lock lk(mu_);
  t->st = Task::St::blocked;
  t->has_token = false;
  driver_has_token_ = true;
  driver_cv_.notify_all();
  t->cv.wait(lk, [&] { return t->has_token; });
  t->st = Task::St::running;
}

void SimWorld::make_ready(Task* t) {
  std::lock_guard lk(mu_);
  if (t->st == Task::St::blocked) {
    t->st = Task::St::ready;
    ready_.push_back(t);
  }
}

void SimWorld::hand_token_and_wait(Task* t) {
  std::unique_lock lk(mu_);
  driver_has_token_ = false;
  t->has_token = true;
  t->cv.notify_all();
  driver_cv_.wait(lk, [&] { return driver_has_token_; });
}

SimWorld::Task* SimWorld::expect_current() const {
  check(g_current_sim == this && g_current_sim_task != nullptr, Errc::internal,
        "blocking call outside a simulator task");
  return static_cast<Task*>(g_current_sim_task);
}

void SimWorld::wait(const std::function<bool()>& pred) {
  Task* t = expect_current();
  for (;;) {
    if (t->abort) {
      current_task()->aborted = true;
      fail(Errc::aborted, "task torn down while waiting");
    }
    if (pred()) return;
    park_current();
  }
}

bool SimWorld::wait_for(uint64_t ms, const std::function<bool()>& pred) {
  Task* t = expect_current();
  bool timed_out = false;
  uint64_t id = add_timer(t->owner, ms, [this, t, &timed_out] {
    timed_out = true;
    make_ready(t);
  });
  for (;;) {
    if (t->abort) {
      cancel_timer(id);
      current_task()->aborted = true;
      fail(Errc::aborted, "task torn down while waiting");
    }
    if (pred()) {
      cancel_timer(id);
      return true;
    }
    if (timed_out) return false;
    park_current();
  }
}

void SimWorld::wake() {
  for (auto& t : tasks_) {
    if (t->st == Task::St::blocked) make_ready(t.get());
  }
}

uint64_t SimWorld::add_timer(EndpointId owner, uint64_t delay_ms, std::function<void()> cb) {
  uint64_t id = next_timer_id_++;
  uint64_t deadline = now_ms_ + delay_ms;
  timers_[{deadline, id}] = Timer{owner, std::move(cb)};
  timer_deadline_[id] = deadline;
  return id;
}

void SimWorld::abort_task(uint32_t task_id) {
  for (auto& t : tasks_) {
    if (t->uid == task_id && t->st != Task::St::done) {
      t->abort = true;
      if (t->st == Task::St::blocked) make_ready(t.get());
    }
  }
}

void SimWorld::cancel_timer(uint64_t timer_id) {
  auto it = timer_deadline_.find(timer_id);
  if (it == timer_deadline_.end()) return;
  timers_.erase({it->second, timer_id});
  timer_deadline_.erase(it);
}

bool SimWorld::drain_ready() {
  bool any = false;
  while (!ready_.empty()) {
    run_one_ready();
    any = true;
  }
  return any;
}

void SimWorld::run_one_ready() {
  Task* t = ready_.front();
  ready_.pop_front();
  hand_token_and_wait(t);
}

std::vector<SimWorld::LinkKey> SimWorld::pending_links() const {
  std::vector<LinkKey> out;
  out.reserve(links_.size());
  for (const auto& [k, q] : links_) {
    if (!q.empty()) out.push_back(k);
  }
  return out;
}

void SimWorld::deliver_one(const LinkKey& link) {
  auto it = links_.find(link);
  check(it != links_.end() && !it->second.empty(), Errc::internal, "no frame on link");
  Frame f = std::move(it->second.front().frame);
  it->second.pop_front();
  if (it->second.empty()) links_.erase(it);
  ++frames_delivered_;
  if (dead_.count(link.second)) return;  // killed after the frame was queued
  auto h = endpoints_.find(link.second);
  if (h == endpoints_.end()) return;
  try {
    h->second(link.first, f);
  } catch (const std::exception& e) {
    task_errors_.push_back("handler on endpoint " + std::to_string(link.second) + " for " +
                           msg_type_name(f.type) + ": " + e.what());
  }
}

bool SimWorld::fire_next_timer() {
  if (timers_.empty()) return false;
  auto it = timers_.begin();
  now_ms_ = std::max(now_ms_, it->first.first);
  auto cb = std::move(it->second.cb);
  timer_deadline_.erase(it->first.second);
  timers_.erase(it);
  cb();
  return true;
}

void SimWorld::set_link_chooser(std::function<size_t(const std::vector<LinkKey>&)> f) {
  chooser_ = std::move(f);
}

SimWorld::StepKind SimWorld::step() {
  if (!ready_.empty()) {
    run_one_ready();
    return kStepTask;
  }
  if (!links_.empty()) {
    auto ls = pending_links();
    size_t idx = chooser_ ? chooser_(ls) : size_t(rng_() % ls.size());
    check(idx < ls.size(), Errc::internal, "link chooser out of range");
    deliver_one(ls[idx]);
    return kStepFrame;
  }
  return fire_next_timer() ? kStepTimer : kStepNone;
}

void SimWorld::run_until_quiescent() {
  while (step()) {
  }
}

void SimWorld::run_to_completion() {
  run_until_quiescent();
  if (!task_errors_.empty()) fail(Errc::internal, "task failed: " + task_errors_.front());
  std::ostringstream stuck;
  for (auto& t : tasks_) {
    if (t->st != Task::St::done && !dead_.count(t->owner)) {
      stuck << " task " << t->uid << "@" << t->owner;
    }
  }
  if (!stuck.str().empty()) fail(Errc::internal, "deadlock; blocked:" + stuck.str());
}

void SimWorld::set_drop_from(EndpointId ep, bool drop) {
  if (drop)
    drop_from_.insert(ep);
  else
    drop_from_.erase(ep);
}

void SimWorld::kill_endpoint(EndpointId ep) {
  dead_.insert(ep);
  drop_from_.insert(ep);
  for (auto it = links_.begin(); it != links_.end();) {
    if (it->first.first == ep)
      it = links_.erase(it);
    else
      ++it;
  }
  for (auto it = timers_.begin(); it != timers_.end();) {
    if (it->second.owner == ep) {
      timer_deadline_.erase(it->first.second);
      it = timers_.erase(it);
    } else {
      ++it;
    }
  }
  for (auto& t : tasks_) {
    if (t->owner == ep && t->st != Task::St::done) {
      t->abort = true;
      if (t->st == Task::St::blocked) make_ready(t.get());
    }
  }
}

uint64_t SimWorld::bytes_sent(EndpointId src, EndpointId dst) const {
  auto it = link_bytes_.find({src, dst});
  return it == link_bytes_.end() ? 0 : it->second;
}

size_t SimWorld::live_task_count() const {
  size_t n = 0;
  for (auto& t : tasks_) {
    if (t->st != Task::St::done) ++n;
  }
  return n;
}

void SimWorld::teardown_tasks() {
  for (auto& t : tasks_) {
    if (t->st != Task::St::done) {
      t->abort = true;
      if (t->st == Task::St::blocked) make_ready(t.get());
    }
  }
  // Cycle the token until every task has unwound.
  for (int guard = 0; guard < 1 << 20; ++guard) {
    bool alive = false;
    {
      std::lock_guard lk(mu_);
      alive = !ready_.empty();
    }
    if (!alive) {
      bool any = false;
      for (auto& t : tasks_) {
        if (t->st != Task::St::done) {
          any = true;
          if (t->st == Task::St::blocked) make_ready(t.get());
        }
      }
      if (!any) break;
    }
    if (!ready_.empty()) run_one_ready();
  }
  for (auto& t : tasks_) {
    if (t->th.joinable()) t->th.join();
  }
}

}  // namespace step
