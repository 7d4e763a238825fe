// Per-endpoint runtime: demultiplexes incoming frames to module handlers and
// provides blocking request/reply for tasks. Every request payload starts
// with a u64 reqid; replies echo it followed by a status byte and the reply
// body. Replies are routed by reqid through the pending table regardless of
// their tag.
#pragma once

#include <map>
#include <optional>

#include "step/world.hpp"

namespace step {

class NodeRuntime {
 public:
  using Handler = std::function<void(EndpointId src, Reader& r)>;

  NodeRuntime(World& w, EndpointId ep, NodeId node);

  World& world() { return world_; }
  EndpointId endpoint() const { return endpoint_; }
  NodeId node() const { return node_; }

  void set_handler(MsgType t, Handler h);
  // Demux entry; runtime context. Registered with the world by attach().
  void on_frame(EndpointId dst, EndpointId src, const Frame& f);
  void attach();                 // register endpoint() with the world
  void adopt_endpoint(EndpointId ep);  // serve a second id (recovery takeover)
  // The endpoint the frame being dispatched was addressed to.
  EndpointId handling_endpoint() const { return handling_; }

  // --- task side (runtime context handled internally) -------------------

  // Sends a request; body writes the payload after the reqid.
  uint64_t send_request(EndpointId dst, MsgType t, const std::function<void(Writer&)>& body);
  // Callback form for protocol state machines (invoked in runtime context).
  void send_request_cb(EndpointId dst, MsgType t, const std::function<void(Writer&)>& body,
                       std::function<void(Errc, Reader&)> cb);
  Bytes await(uint64_t reqid);   // throws the status' Errc on failure
  // nullopt on timeout; the pending entry stays live for a later await.
  std::optional<Bytes> await_for(uint64_t reqid, uint64_t ms);
  Bytes call(EndpointId dst, MsgType t, const std::function<void(Writer&)>& body);
  void await_all(const std::vector<uint64_t>& reqids);  // throws on any failure
  bool request_done(uint64_t reqid) const;
  void drop_request(uint64_t reqid);

  // --- either side -------------------------------------------------------

  void post(EndpointId dst, MsgType t, const std::function<void(Writer&)>& body);
  void post_raw(EndpointId dst, Frame f);
  void reply(EndpointId dst, MsgType tag, uint64_t reqid, Errc status,
             const std::function<void(Writer&)>& body = {});
  void reply_ok(EndpointId dst, uint64_t reqid, const std::function<void(Writer&)>& body = {}) {
    reply(dst, MsgType::REPLY, reqid, Errc::ok, body);
  }

  // Fails every pending request with Errc::aborted (recovery/shutdown path).
  void abort_pending();
  // Clears the abort condition for a fresh run segment.
  void reset_abort();
  bool abort_raised() const { return abort_raised_; }

 private:
  struct Pending {
    bool done = false;
    Errc status = Errc::ok;
    Bytes body;
    std::function<void(Errc, Reader&)> cb;
  };

  Pending& expect_pending(uint64_t reqid);
  Bytes consume(uint64_t reqid);

  World& world_;
  EndpointId endpoint_;
  NodeId node_;
  EndpointId handling_ = 0;
  std::map<uint8_t, Handler> handlers_;
  std::map<uint64_t, Pending> pending_;
  uint64_t next_reqid_ = 1;
  bool abort_raised_ = false;
};

}  // namespace step
