#include "step/kv.hpp"

#include <algorithm>
#include <cstring>

namespace step {

Bytes encode_i64(int64_t v) {
  Bytes b(8);
  std::memcpy(b.data(), &v, 8);
  return b;
}

int64_t decode_i64(const Bytes& b) {
  check(b.size() == 8, Errc::type_error, "integer value must be 8 bytes");
  int64_t v;
  std::memcpy(&v, b.data(), 8);
  return v;
}

// --- KvShard -----------------------------------------------------------------

void KvShard::reserve(uint64_t more, uint64_t freed) {
  if (capacity_ == 0) return;
  check(used_ - freed + more <= capacity_, Errc::out_of_memory,
        "store capacity " + std::to_string(capacity_) + " exceeded");
}

std::optional<Bytes> KvShard::get(uint64_t key) const {
  auto it = data_.find(key);
  if (it == data_.end()) return std::nullopt;
  return it->second;
}

void KvShard::set(uint64_t key, Bytes value) {
  auto it = data_.find(key);
  uint64_t freed = it == data_.end() ? 0 : it->second.size();
  reserve(value.size(), freed);
  used_ = used_ - freed + value.size();
  data_[key] = std::move(value);
}

bool KvShard::insert(uint64_t key, Bytes value) {
  if (data_.count(key)) return false;
  reserve(value.size(), 0);
  used_ += value.size();
  data_.emplace(key, std::move(value));
  return true;
}

int64_t KvShard::inc(uint64_t key, int64_t delta) {
  auto it = data_.find(key);
  check(it != data_.end(), Errc::missing_key, "inc on absent key");
  int64_t v = decode_i64(it->second) + delta;
  std::memcpy(it->second.data(), &v, 8);
  return v;
}

bool KvShard::erase(uint64_t key) {
  auto it = data_.find(key);
  if (it == data_.end()) return false;
  used_ -= it->second.size();
  data_.erase(it);
  return true;
}

std::vector<std::pair<uint64_t, Bytes>> KvShard::snapshot() const {
  std::vector<std::pair<uint64_t, Bytes>> out;
  out.reserve(data_.size());
  for (const auto& [k, v] : data_) out.emplace_back(k, v);
  return out;
}

void KvShard::restore(std::vector<std::pair<uint64_t, Bytes>> records) {
  data_.clear();
  used_ = 0;
  for (auto& [k, v] : records) {
    used_ += v.size();
    data_[k] = std::move(v);
  }
}

// --- KvService ---------------------------------------------------------------

KvService::KvService(NodeRuntime& rt, uint64_t capacity_bytes) : rt_(rt), shard_(capacity_bytes) {
  install();
}

void KvService::install() {
  auto wrap = [this](const std::function<void(Reader&, Writer&)>& op) {
    return [this, op](EndpointId src, Reader& r) {
      uint64_t reqid = r.u64();
      Writer body;
      Errc status = Errc::ok;
      try {
        op(r, body);
      } catch (const Error& e) {
        status = e.code();
        body = Writer{};
      }
      rt_.reply(src, MsgType::KV_REPLY, reqid, status,
                [&](Writer& w) { w.raw(body.bytes().data(), body.bytes().size()); });
    };
  };

  rt_.set_handler(MsgType::KV_GET, wrap([this](Reader& r, Writer& w) {
                    auto v = shard_.get(r.u64());
                    w.u8(v.has_value() ? 1 : 0);
                    if (v) w.bytes(*v);
                  }));
  rt_.set_handler(MsgType::KV_SET, wrap([this](Reader& r, Writer&) {
                    uint64_t key = r.u64();
                    shard_.set(key, r.bytes());
                  }));
  rt_.set_handler(MsgType::KV_MGET, wrap([this](Reader& r, Writer& w) {
                    uint32_t n = r.u32();
                    w.u32(n);
                    for (uint32_t i = 0; i < n; ++i) {
                      auto v = shard_.get(r.u64());
                      w.u8(v.has_value() ? 1 : 0);
                      if (v) w.bytes(*v);
                    }
                  }));
  rt_.set_handler(MsgType::KV_INSERT, wrap([this](Reader& r, Writer& w) {
                    uint64_t key = r.u64();
                    w.u8(shard_.insert(key, r.bytes()) ? 1 : 0);
                  }));
  rt_.set_handler(MsgType::KV_INC, wrap([this](Reader& r, Writer& w) {
                    uint64_t key = r.u64();
                    w.i64(shard_.inc(key, r.i64()));
                  }));
  rt_.set_handler(MsgType::KV_DEC, wrap([this](Reader& r, Writer& w) {
                    uint64_t key = r.u64();
                    w.i64(shard_.dec(key, r.i64()));
                  }));
  rt_.set_handler(MsgType::KV_DELETE, wrap([this](Reader& r, Writer& w) {
                    w.u8(shard_.erase(r.u64()) ? 1 : 0);
                  }));
  rt_.set_handler(MsgType::KV_SNAPSHOT, wrap([this](Reader&, Writer& w) {
                    auto recs = shard_.snapshot();
                    w.u32(uint32_t(recs.size()));
                    for (auto& [k, v] : recs) {
                      w.u64(k);
                      w.bytes(v);
                    }
                  }));
  rt_.set_handler(MsgType::KV_RESTORE, wrap([this](Reader& r, Writer&) {
                    uint32_t n = r.u32();
                    std::vector<std::pair<uint64_t, Bytes>> recs;
                    recs.reserve(n);
                    for (uint32_t i = 0; i < n; ++i) {
                      uint64_t k = r.u64();
                      recs.emplace_back(k, r.bytes());
                    }
                    shard_.restore(std::move(recs));
                  }));
}

// --- KvClient ----------------------------------------------------------------

KvClient::KvClient(NodeRuntime& rt, std::vector<EndpointId> shards)
    : rt_(rt), shards_(std::move(shards)) {
  check(!shards_.empty(), Errc::argument, "at least one store endpoint required");
}

std::optional<Bytes> KvClient::get(uint64_t key) {
  Bytes b = rt_.call(shard_of(key), MsgType::KV_GET, [&](Writer& w) { w.u64(key); });
  Reader r(b);
  if (!r.u8()) return std::nullopt;
  return r.bytes();
}

void KvClient::set(uint64_t key, const Bytes& value) {
  rt_.call(shard_of(key), MsgType::KV_SET, [&](Writer& w) {
    w.u64(key);
    w.bytes(value);
  });
}

std::vector<std::optional<Bytes>> KvClient::mget(const std::vector<uint64_t>& keys) {
  // Split per shard, pipeline, then reassemble in request order.
  std::map<EndpointId, std::vector<size_t>> by_shard;
  for (size_t i = 0; i < keys.size(); ++i) by_shard[shard_of(keys[i])].push_back(i);
  std::vector<std::pair<uint64_t, const std::vector<size_t>*>> reqs;
  for (auto& [ep, ix] : by_shard) {
    uint64_t id = rt_.send_request(ep, MsgType::KV_MGET, [&](Writer& w) {
      w.u32(uint32_t(ix.size()));
      for (size_t i : ix) w.u64(keys[i]);
    });
    reqs.emplace_back(id, &ix);
  }
  std::vector<std::optional<Bytes>> out(keys.size());
  for (auto& [id, ix] : reqs) {
    Bytes b = rt_.await(id);
    Reader r(b);
    uint32_t n = r.u32();
    check(n == ix->size(), Errc::protocol, "mget arity mismatch");
    for (size_t i : *ix) {
      if (r.u8())
        out[i] = r.bytes();
      else
        out[i] = std::nullopt;
    }
  }
  return out;
}

bool KvClient::insert(uint64_t key, const Bytes& value) {
  Bytes b = rt_.call(shard_of(key), MsgType::KV_INSERT, [&](Writer& w) {
    w.u64(key);
    w.bytes(value);
  });
  return Reader(b).u8() != 0;
}

int64_t KvClient::inc(uint64_t key, int64_t delta) {
  Bytes b = rt_.call(shard_of(key), MsgType::KV_INC, [&](Writer& w) {
    w.u64(key);
    w.i64(delta);
  });
  return Reader(b).i64();
}

int64_t KvClient::dec(uint64_t key, int64_t delta) {
  Bytes b = rt_.call(shard_of(key), MsgType::KV_DEC, [&](Writer& w) {
    w.u64(key);
    w.i64(delta);
  });
  return Reader(b).i64();
}

bool KvClient::erase(uint64_t key) {
  Bytes b = rt_.call(shard_of(key), MsgType::KV_DELETE, [&](Writer& w) { w.u64(key); });
  return Reader(b).u8() != 0;
}

void KvClient::set_many(const std::vector<std::pair<uint64_t, Bytes>>& kvs) {
  std::vector<uint64_t> ids;
  ids.reserve(kvs.size());
  for (auto& [k, v] : kvs) {
    ids.push_back(rt_.send_request(shard_of(k), MsgType::KV_SET, [&](Writer& w) {
      w.u64(k);
      w.bytes(v);
    }));
  }
  rt_.await_all(ids);
}

void KvClient::erase_many(const std::vector<uint64_t>& keys) {
  std::vector<uint64_t> ids;
  ids.reserve(keys.size());
  for (uint64_t k : keys) {
    ids.push_back(rt_.send_request(shard_of(k), MsgType::KV_DELETE, [&](Writer& w) { w.u64(k); }));
  }
  rt_.await_all(ids);
}

std::vector<std::pair<uint64_t, Bytes>> KvClient::snapshot_all() {
  std::vector<std::pair<uint64_t, Bytes>> out;
  for (EndpointId ep : shards_) {
    Bytes b = rt_.call(ep, MsgType::KV_SNAPSHOT, {});
    Reader r(b);
    uint32_t n = r.u32();
    for (uint32_t i = 0; i < n; ++i) {
      uint64_t k = r.u64();
      out.emplace_back(k, r.bytes());
    }
  }
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  return out;
}

void KvClient::restore_all(const std::vector<std::pair<uint64_t, Bytes>>& records) {
  std::vector<std::vector<const std::pair<uint64_t, Bytes>*>> per(shards_.size());
  for (const auto& rec : records) per[rec.first % shards_.size()].push_back(&rec);
  std::vector<uint64_t> ids;
  for (size_t s = 0; s < shards_.size(); ++s) {
    ids.push_back(rt_.send_request(shards_[s], MsgType::KV_RESTORE, [&](Writer& w) {
      w.u32(uint32_t(per[s].size()));
      for (auto* rec : per[s]) {
        w.u64(rec->first);
        w.bytes(rec->second);
      }
    }));
  }
  rt_.await_all(ids);
}

}  // namespace step
