#include "step/runtime.hpp"

namespace step {

NodeRuntime::NodeRuntime(World& w, EndpointId ep, NodeId node)
    : world_(w), endpoint_(ep), node_(node) {
  set_handler(MsgType::FENCE, [this](EndpointId src, Reader& r) {
    uint64_t reqid = r.u64();
    reply_ok(src, reqid);
  });
}

void NodeRuntime::set_handler(MsgType t, Handler h) {
  handlers_[uint8_t(t)] = std::move(h);
}

void NodeRuntime::attach() {
  EndpointId ep = endpoint_;
  world_.register_endpoint(
      ep, [this, ep](EndpointId src, const Frame& f) { on_frame(ep, src, f); });
}

void NodeRuntime::adopt_endpoint(EndpointId ep) {
  world_.register_endpoint(
      ep, [this, ep](EndpointId src, const Frame& f) { on_frame(ep, src, f); });
}

void NodeRuntime::on_frame(EndpointId dst, EndpointId src, const Frame& f) {
  Reader r(f.payload);
  if (is_reply_type(f.type)) {
    uint64_t reqid = r.u64();
    auto it = pending_.find(reqid);
    if (it == pending_.end()) return;  // cancelled or already torn down
    Errc status = static_cast<Errc>(r.u8());
    if (it->second.cb) {
      auto cb = std::move(it->second.cb);
      pending_.erase(it);
      cb(status, r);
      return;
    }
    it->second.status = status;
    size_t n = r.remaining();
    const uint8_t* rest = r.take(n);
    it->second.body.assign(rest, rest + n);
    it->second.done = true;
    world_.wake();
    return;
  }
  auto h = handlers_.find(uint8_t(f.type));
  check(h != handlers_.end(), Errc::protocol,
        std::string("no handler for ") + msg_type_name(f.type));
  EndpointId prev = handling_;
  handling_ = dst;
  h->second(src, r);
  handling_ = prev;
}

uint64_t NodeRuntime::send_request(EndpointId dst, MsgType t,
                                   const std::function<void(Writer&)>& body) {
  uint64_t id = next_reqid_++;
  if (abort_raised_) fail(Errc::aborted, "run torn down");
  pending_[id] = Pending{};
  Writer w;
  w.u64(id);
  if (body) body(w);
  try {
    world_.send(endpoint_, dst, Frame{t, w.take()});
  } catch (...) {
    pending_.erase(id);
    throw;
  }
  return id;
}

void NodeRuntime::send_request_cb(EndpointId dst, MsgType t,
                                  const std::function<void(Writer&)>& body,
                                  std::function<void(Errc, Reader&)> cb) {
  uint64_t id = next_reqid_++;
  pending_[id].cb = std::move(cb);
  Writer w;
  w.u64(id);
  if (body) body(w);
  try {
    world_.send(endpoint_, dst, Frame{t, w.take()});
  } catch (const Error& e) {
    auto entry = std::move(pending_.at(id));
    pending_.erase(id);
    Reader empty(nullptr, 0);
    entry.cb(e.code(), empty);
  }
}

NodeRuntime::Pending& NodeRuntime::expect_pending(uint64_t reqid) {
  auto it = pending_.find(reqid);
  check(it != pending_.end(), Errc::internal, "await on unknown reqid");
  return it->second;
}

Bytes NodeRuntime::consume(uint64_t reqid) {
  Pending p = std::move(pending_.at(reqid));
  pending_.erase(reqid);
  if (p.status != Errc::ok) throw Error(p.status, "request failed");
  return std::move(p.body);
}

Bytes NodeRuntime::await(uint64_t reqid) {
  Pending& p = expect_pending(reqid);
  world_.wait([&] { return p.done; });
  return consume(reqid);
}

std::optional<Bytes> NodeRuntime::await_for(uint64_t reqid, uint64_t ms) {
  Pending& p = expect_pending(reqid);
  if (!world_.wait_for(ms, [&] { return p.done; })) return std::nullopt;
  return consume(reqid);
}

Bytes NodeRuntime::call(EndpointId dst, MsgType t, const std::function<void(Writer&)>& body) {
  return await(send_request(dst, t, body));
}

void NodeRuntime::await_all(const std::vector<uint64_t>& reqids) {
  for (uint64_t id : reqids) {
    Pending& p = expect_pending(id);
    world_.wait([&] { return p.done; });
  }
  std::optional<Errc> failed;
  for (uint64_t id : reqids) {
    Pending p = std::move(pending_.at(id));
    pending_.erase(id);
    if (p.status != Errc::ok && !failed) failed = p.status;
  }
  if (failed) throw Error(*failed, "batched request failed");
}

bool NodeRuntime::request_done(uint64_t reqid) const {
  auto it = pending_.find(reqid);
  return it != pending_.end() && it->second.done;
}

void NodeRuntime::drop_request(uint64_t reqid) { pending_.erase(reqid); }

void NodeRuntime::post(EndpointId dst, MsgType t, const std::function<void(Writer&)>& body) {
  Writer w;
  if (body) body(w);
  world_.send(endpoint_, dst, Frame{t, w.take()});
}

void NodeRuntime::post_raw(EndpointId dst, Frame f) { world_.send(endpoint_, dst, std::move(f)); }

void NodeRuntime::reply(EndpointId dst, MsgType tag, uint64_t reqid, Errc status,
                        const std::function<void(Writer&)>& body) {
  Writer w;
  w.u64(reqid);
  w.u8(uint8_t(status));
  if (body) body(w);
  world_.send(endpoint_, dst, Frame{tag, w.take()});
}

void NodeRuntime::abort_pending() {
  abort_raised_ = true;
  // Callback entries belong to protocol state that is being reset wholesale;
  // drop them instead of firing half-torn-down continuations.
  for (auto it = pending_.begin(); it != pending_.end();) {
    if (it->second.cb) {
      it = pending_.erase(it);
    } else {
      if (!it->second.done) {
        it->second.done = true;
        it->second.status = Errc::aborted;
      }
      ++it;
    }
  }
  world_.wake();
}

void NodeRuntime::reset_abort() { abort_raised_ = false; }

}  // namespace step
