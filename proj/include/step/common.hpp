// Core types and the error model shared by every module.
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace step {

using NodeId = uint32_t;      // dense 0..n-1, node 0 is the master
using EndpointId = uint32_t;  // transport address: nodes first, then store shards
using Word = uint32_t;        // 32-bit DSM granule
using Addr = uint64_t;        // 64-bit shared memory address
using Bytes = std::vector<uint8_t>;

enum class Errc : uint8_t {
  ok = 0,
  unreachable,      // destination not registered / connection lost
  protocol,         // malformed frame, unknown tag, double barrier enter...
  out_of_memory,    // store capacity exceeded
  missing_key,      // inc/dec on absent key
  type_error,       // inc/dec on non 8-byte value
  range,            // id outside bit width
  argument,
  bounds,
  role,             // master-only API invoked on a slave (or vice versa)
  layout,           // unknown field / duplicate declaration
  missing_object,
  init,             // cluster bring-up failure
  digest_mismatch,  // incompatible binaries in one cluster
  data,             // unreadable/malformed input file
  divergence,       // NMF loss blow-up
  aborted,          // run torn down by recovery/shutdown
  checkpoint,
  unrecoverable,
  unsupported,
  config,
  internal,
};

const char* errc_name(Errc c);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void check(bool ok, Errc code, const std::string& what) {
  if (!ok) fail(code, what);
}

// FNV-1a, used for registry digests and checkpoint integrity.
inline uint64_t fnv1a(const uint8_t* p, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}
inline uint64_t fnv1a(const Bytes& b, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a(b.data(), b.size(), h);
}
inline uint64_t fnv1a_str(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a(reinterpret_cast<const uint8_t*>(s.data()), s.size(), h);
}

}  // namespace step
