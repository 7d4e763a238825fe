// In-memory key-value store: the bottom DSM layer. A KvShard is the plain
// state machine (usable embedded); KvService serves one shard at a transport
// endpoint, one request at a time; KvClient routes by key modulo the shard
// count and offers both blocking and pipelined calls.
//
// Values are opaque bytes. Inc/Dec require the existing value to be an
// 8-byte little-endian signed integer. Nothing is ever evicted; a configured
// capacity (value bytes) makes overflowing writes fail instead.
#pragma once

#include <map>
#include <optional>

#include "step/runtime.hpp"

namespace step {

class KvShard {
 public:
  explicit KvShard(uint64_t capacity_bytes = 0) : capacity_(capacity_bytes) {}

  std::optional<Bytes> get(uint64_t key) const;
  void set(uint64_t key, Bytes value);          // throws out_of_memory
  bool insert(uint64_t key, Bytes value);       // false: already present
  int64_t inc(uint64_t key, int64_t delta);     // throws missing_key / type_error
  int64_t dec(uint64_t key, int64_t delta) { return inc(key, -delta); }
  bool erase(uint64_t key);                     // false: was absent

  std::vector<std::pair<uint64_t, Bytes>> snapshot() const;  // sorted by key
  void restore(std::vector<std::pair<uint64_t, Bytes>> records);

  size_t key_count() const { return data_.size(); }
  uint64_t used_bytes() const { return used_; }

 private:
  void reserve(uint64_t more, uint64_t freed);

  std::map<uint64_t, Bytes> data_;
  uint64_t capacity_;  // 0 = unlimited
  uint64_t used_ = 0;
};

// Registers KV_* handlers on the runtime owning the shard's endpoint.
class KvService {
 public:
  KvService(NodeRuntime& rt, uint64_t capacity_bytes = 0);
  KvShard& shard() { return shard_; }

 private:
  void install();
  NodeRuntime& rt_;
  KvShard shard_;
};

class KvClient {
 public:
  KvClient(NodeRuntime& rt, std::vector<EndpointId> shards);

  size_t shard_count() const { return shards_.size(); }
  EndpointId shard_of(uint64_t key) const { return shards_[key % shards_.size()]; }

  std::optional<Bytes> get(uint64_t key);
  void set(uint64_t key, const Bytes& value);
  std::vector<std::optional<Bytes>> mget(const std::vector<uint64_t>& keys);
  bool insert(uint64_t key, const Bytes& value);
  int64_t inc(uint64_t key, int64_t delta);
  int64_t dec(uint64_t key, int64_t delta);
  bool erase(uint64_t key);

  // Pipelined: one frame per entry, all in flight before the first await.
  void set_many(const std::vector<std::pair<uint64_t, Bytes>>& kvs);
  void erase_many(const std::vector<uint64_t>& keys);

  // Admin surface for checkpoint/recovery.
  std::vector<std::pair<uint64_t, Bytes>> snapshot_all();
  void restore_all(const std::vector<std::pair<uint64_t, Bytes>>& records);

 private:
  NodeRuntime& rt_;
  std::vector<EndpointId> shards_;
};

// Helpers for the 8-byte integer representation shared by inc/dec users.
Bytes encode_i64(int64_t v);
int64_t decode_i64(const Bytes& b);

}  // namespace step
