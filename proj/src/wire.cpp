#include "step/wire.hpp"

namespace step {

const char* errc_name(Errc c) {
  switch (c) {
    case Errc::ok: return "ok";
    case Errc::unreachable: return "unreachable";
    case Errc::protocol: return "protocol error";
    case Errc::out_of_memory: return "out of memory";
    case Errc::missing_key: return "missing key";
    case Errc::type_error: return "type error";
    case Errc::range: return "range error";
    case Errc::argument: return "argument error";
    case Errc::bounds: return "bounds error";
    case Errc::role: return "role error";
    case Errc::layout: return "layout error";
    case Errc::missing_object: return "missing object";
    case Errc::init: return "init error";
    case Errc::digest_mismatch: return "incompatible binary";
    case Errc::data: return "data error";
    case Errc::divergence: return "divergence";
    case Errc::aborted: return "aborted";
    case Errc::checkpoint: return "checkpoint error";
    case Errc::unrecoverable: return "unrecoverable";
    case Errc::unsupported: return "unsupported operation";
    case Errc::config: return "config error";
    case Errc::internal: return "internal error";
  }
  return "unknown error";
}

const char* msg_type_name(MsgType t) {
  switch (t) {
    case MsgType::HELLO: return "HELLO";
    case MsgType::CONFIG: return "CONFIG";
    case MsgType::CREATE_THREAD: return "CREATE_THREAD";
    case MsgType::THREAD_DONE: return "THREAD_DONE";
    case MsgType::HEARTBEAT: return "HEARTBEAT";
    case MsgType::SHUTDOWN: return "SHUTDOWN";
    case MsgType::BARRIER_ENTER: return "BARRIER_ENTER";
    case MsgType::BARRIER_RELEASE: return "BARRIER_RELEASE";
    case MsgType::BARRIER_CANCEL: return "BARRIER_CANCEL";
    case MsgType::SEM_ACQUIRE: return "SEM_ACQUIRE";
    case MsgType::SEM_GRANT: return "SEM_GRANT";
    case MsgType::SEM_RELEASE: return "SEM_RELEASE";
    case MsgType::SEM_CANCEL: return "SEM_CANCEL";
    case MsgType::SYNC_CREATE: return "SYNC_CREATE";
    case MsgType::ACCUM_CREATE: return "ACCUM_CREATE";
    case MsgType::ACCUM_REG: return "ACCUM_REG";
    case MsgType::ACCUM_CHUNK: return "ACCUM_CHUNK";
    case MsgType::CACHE_MISS: return "CACHE_MISS";
    case MsgType::CACHE_WRITE: return "CACHE_WRITE";
    case MsgType::CACHE_INVALIDATE: return "CACHE_INVALIDATE";
    case MsgType::BLOCK_LOCK: return "BLOCK_LOCK";
    case MsgType::BLOCK_GRANT: return "BLOCK_GRANT";
    case MsgType::RECOVERY: return "RECOVERY";
    case MsgType::CHECKPOINT_CMD: return "CHECKPOINT_CMD";
    case MsgType::RESUME: return "RESUME";
    case MsgType::KV_GET: return "KV_GET";
    case MsgType::KV_SET: return "KV_SET";
    case MsgType::KV_MGET: return "KV_MGET";
    case MsgType::KV_INSERT: return "KV_INSERT";
    case MsgType::KV_INC: return "KV_INC";
    case MsgType::KV_DEC: return "KV_DEC";
    case MsgType::KV_DELETE: return "KV_DELETE";
    case MsgType::KV_SNAPSHOT: return "KV_SNAPSHOT";
    case MsgType::KV_RESTORE: return "KV_RESTORE";
    case MsgType::KV_REPLY: return "KV_REPLY";
    case MsgType::REPLY: return "REPLY";
    case MsgType::FENCE: return "FENCE";
  }
  return "?";
}

bool msg_type_known(uint8_t raw) {
  return std::string(msg_type_name(static_cast<MsgType>(raw))) != "?";
}

Bytes encode_frame(const Frame& f) {
  Bytes out;
  out.reserve(f.wire_size());
  out.push_back(kFrameMagic0);
  out.push_back(kFrameMagic1);
  out.push_back(static_cast<uint8_t>(f.type));
  uint32_t len = static_cast<uint32_t>(f.payload.size());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(len >> (8 * i)));
  out.insert(out.end(), f.payload.begin(), f.payload.end());
  return out;
}

std::optional<Frame> try_decode_frame(const Bytes& buf, size_t& offset) {
  if (buf.size() - offset < 7) return std::nullopt;
  const uint8_t* p = buf.data() + offset;
  check(p[0] == kFrameMagic0 && p[1] == kFrameMagic1, Errc::protocol, "bad frame magic");
  check(msg_type_known(p[2]), Errc::protocol,
        "unknown message type " + std::to_string(int(p[2])));
  uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= uint32_t(p[3 + i]) << (8 * i);
  if (buf.size() - offset < 7 + size_t(len)) return std::nullopt;
  Frame f;
  f.type = static_cast<MsgType>(p[2]);
  f.payload.assign(p + 7, p + 7 + len);
  offset += 7 + len;
  return f;
}

}  // namespace step
