// Framed message protocol: magic 'S' 'T', one type byte, u32-LE payload length.
// Payload field encodings are little-endian throughout; see docs/protocol.md
// for the per-message layouts. Both backends serialize identically.
#pragma once

#include <bit>
#include <cstring>
#include <optional>

#include "step/common.hpp"

namespace step {

enum class MsgType : uint8_t {
  // cluster control
  HELLO = 0x01,
  CONFIG = 0x02,
  CREATE_THREAD = 0x03,
  THREAD_DONE = 0x04,
  HEARTBEAT = 0x05,
  SHUTDOWN = 0x06,
  // synchronization
  BARRIER_ENTER = 0x10,
  BARRIER_RELEASE = 0x11,
  BARRIER_CANCEL = 0x12,
  SEM_ACQUIRE = 0x13,
  SEM_GRANT = 0x14,
  SEM_RELEASE = 0x15,
  SEM_CANCEL = 0x16,
  SYNC_CREATE = 0x17,
  // accumulator
  ACCUM_CREATE = 0x20,
  ACCUM_REG = 0x21,
  ACCUM_CHUNK = 0x22,
  // dsm cache coherence
  CACHE_MISS = 0x30,
  CACHE_WRITE = 0x31,
  CACHE_INVALIDATE = 0x32,
  BLOCK_LOCK = 0x33,
  BLOCK_GRANT = 0x34,
  // fault tolerance
  RECOVERY = 0x40,
  CHECKPOINT_CMD = 0x41,
  RESUME = 0x42,
  // key-value store (Table-style API served over the transport)
  KV_GET = 0x50,
  KV_SET = 0x51,
  KV_MGET = 0x52,
  KV_INSERT = 0x53,
  KV_INC = 0x54,
  KV_DEC = 0x55,
  KV_DELETE = 0x56,
  KV_SNAPSHOT = 0x57,  // admin: full dump, checkpointing only
  KV_RESTORE = 0x58,   // admin: replace contents, recovery only
  KV_REPLY = 0x5F,
  // generic reply to any request that has no dedicated reply tag
  REPLY = 0x60,
  // link-drain probe used by recovery; handled by the runtime itself
  FENCE = 0x61,
};

const char* msg_type_name(MsgType t);
bool msg_type_known(uint8_t raw);

// True for tags that complete a pending request (routed by reqid).
inline bool is_reply_type(MsgType t) {
  switch (t) {
    case MsgType::REPLY:
    case MsgType::KV_REPLY:
    case MsgType::BARRIER_RELEASE:
    case MsgType::SEM_GRANT:
    case MsgType::BLOCK_GRANT:
      return true;
    default:
      return false;
  }
}

struct Frame {
  MsgType type{MsgType::REPLY};
  Bytes payload;

  size_t wire_size() const { return 7 + payload.size(); }
};

inline constexpr uint8_t kFrameMagic0 = 0x53;  // 'S'
inline constexpr uint8_t kFrameMagic1 = 0x54;  // 'T'

Bytes encode_frame(const Frame& f);
// Consumes one frame from buf if complete; throws Error(protocol) on bad
// magic or unknown tag (never silently dropped).
std::optional<Frame> try_decode_frame(const Bytes& buf, size_t& offset);

// --- payload builder/parser -------------------------------------------------

class Writer {
 public:
  Bytes take() { return std::move(buf_); }
  const Bytes& bytes() const { return buf_; }

  Writer& u8(uint8_t v) {
    buf_.push_back(v);
    return *this;
  }
  Writer& u16(uint16_t v) { return raw_le(&v, 2); }
  Writer& u32(uint32_t v) { return raw_le(&v, 4); }
  Writer& u64(uint64_t v) { return raw_le(&v, 8); }
  Writer& i64(int64_t v) { return u64(std::bit_cast<uint64_t>(v)); }
  Writer& f32(float v) { return u32(std::bit_cast<uint32_t>(v)); }
  Writer& f64(double v) { return u64(std::bit_cast<uint64_t>(v)); }
  Writer& bytes(const Bytes& b) {
    u32(static_cast<uint32_t>(b.size()));
    buf_.insert(buf_.end(), b.begin(), b.end());
    return *this;
  }
  Writer& str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
    return *this;
  }
  Writer& raw(const void* p, size_t n) {
    const uint8_t* b = static_cast<const uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
    return *this;
  }

 private:
  Writer& raw_le(const void* p, size_t n) {
    static_assert(std::endian::native == std::endian::little,
                  "wire encoding assumes a little-endian host");
    return raw(p, n);
  }
  Bytes buf_;
};

class Reader {
 public:
  explicit Reader(const Bytes& b) : p_(b.data()), n_(b.size()) {}
  Reader(const uint8_t* p, size_t n) : p_(p), n_(n) {}

  uint8_t u8() { return *take(1); }
  uint16_t u16() { return load<uint16_t>(); }
  uint32_t u32() { return load<uint32_t>(); }
  uint64_t u64() { return load<uint64_t>(); }
  int64_t i64() { return std::bit_cast<int64_t>(u64()); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  Bytes bytes() {
    uint32_t n = u32();
    const uint8_t* p = take(n);
    return Bytes(p, p + n);
  }
  std::string str() {
    uint32_t n = u32();
    const uint8_t* p = take(n);
    return std::string(p, p + n);
  }
  const uint8_t* take(size_t n) {
    check(off_ + n <= n_, Errc::protocol, "payload truncated");
    const uint8_t* r = p_ + off_;
    off_ += n;
    return r;
  }
  size_t remaining() const { return n_ - off_; }
  bool done() const { return off_ == n_; }
  void expect_done() const { check(done(), Errc::protocol, "trailing payload bytes"); }

 private:
  template <typename T>
  T load() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  const uint8_t* p_;
  size_t n_;
  size_t off_ = 0;
};

}  // namespace step
