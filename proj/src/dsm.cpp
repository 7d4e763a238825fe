#include "step/dsm.hpp"

#include <algorithm>
#include <cstring>

namespace step {

void DsmConfig::validate() const {
  check(address_split_x >= 1 && address_split_x <= 63, Errc::config, "address split out of range");
  check(package_words >= 1 && package_words <= kBlockWords &&
            (package_words & (package_words - 1)) == 0,
        Errc::config, "package_words must be a power of two <= 32");
  check(cache_blocks >= 1, Errc::config, "cache_blocks must be positive");
  check(node_count >= 1, Errc::config, "node_count must be positive");
}

Addr compose_addr(uint64_t object_id, uint64_t field_id, uint32_t x) {
  uint32_t field_bits = 64 - x;
  check(x == 64 || object_id < (1ull << x), Errc::range, "object_id exceeds split width");
  check(field_bits == 64 || field_id < (1ull << field_bits), Errc::range,
        "field_id exceeds split width");
  return (object_id << field_bits) | field_id;
}

std::pair<uint64_t, uint64_t> decompose_addr(Addr a, uint32_t x) {
  uint32_t field_bits = 64 - x;
  uint64_t mask = field_bits == 64 ? ~0ull : ((1ull << field_bits) - 1);
  return {a >> field_bits, a & mask};
}

// --- DsmCache ------------------------------------------------------------------

DsmCache::Block* DsmCache::find(uint64_t block) {
  auto it = blocks_.find(block);
  if (it == blocks_.end()) return nullptr;
  it->second.last_use = ++tick_;
  return &it->second;
}

const DsmCache::Block* DsmCache::peek(uint64_t block) const {
  auto it = blocks_.find(block);
  return it == blocks_.end() ? nullptr : &it->second;
}

std::optional<uint64_t> DsmCache::install(uint64_t block,
                                          const std::array<Word, kBlockWords>& words) {
  std::optional<uint64_t> evicted;
  if (!blocks_.count(block) && blocks_.size() >= capacity_) evicted = evict_lru();
  Block& b = blocks_[block];
  b.words = words;
  b.last_use = ++tick_;
  return evicted;
}

bool DsmCache::invalidate(uint64_t block) { return blocks_.erase(block) > 0; }

std::optional<uint64_t> DsmCache::evict_lru() {
  if (blocks_.empty()) return std::nullopt;
  auto victim = blocks_.begin();
  for (auto it = blocks_.begin(); it != blocks_.end(); ++it) {
    if (it->second.last_use < victim->second.last_use) victim = it;
  }
  uint64_t block = victim->first;
  blocks_.erase(victim);
  return block;
}

std::vector<uint64_t> DsmCache::resident_blocks() const {
  std::vector<uint64_t> out;
  out.reserve(blocks_.size());
  for (const auto& [k, v] : blocks_) out.push_back(k);
  return out;
}

// --- DsmNode ---------------------------------------------------------------------

namespace {
constexpr uint8_t kWriteFlagRemoveSharer = 1;  // pure deregistration, no round
constexpr uint8_t kWriteFlagReleaseTicket = 2;

void bytes_to_words(const Bytes& b, Word* out, size_t nwords) {
  size_t have = std::min(b.size() / 4, nwords);
  std::memcpy(out, b.data(), have * 4);
  for (size_t i = have; i < nwords; ++i) out[i] = 0;
}

Bytes words_to_bytes(const Word* w, size_t nwords) {
  Bytes b(nwords * 4);
  std::memcpy(b.data(), w, nwords * 4);
  return b;
}
}  // namespace

DsmNode::DsmNode(NodeRuntime& rt, KvClient& kv, DsmConfig cfg)
    : rt_(rt), kv_(kv), cfg_(cfg), cache_(cfg.cache_blocks) {
  cfg_.validate();
  rt_.set_handler(MsgType::CACHE_MISS, [this](EndpointId s, Reader& r) { on_cache_miss(s, r); });
  rt_.set_handler(MsgType::CACHE_WRITE, [this](EndpointId s, Reader& r) { on_cache_write(s, r); });
  rt_.set_handler(MsgType::CACHE_INVALIDATE,
                  [this](EndpointId s, Reader& r) { on_cache_invalidate(s, r); });
  rt_.set_handler(MsgType::BLOCK_LOCK, [this](EndpointId s, Reader& r) { on_block_lock(s, r); });
}

WatcherDirectory& DsmNode::directory(EndpointId as) {
  return dirs_[as == EndpointId(-1) ? rt_.endpoint() : as];
}

void DsmNode::reset() {
  cache_ = DsmCache(cfg_.cache_blocks);
  dirs_.clear();
  inval_seq_.clear();
}

std::optional<uint64_t> DsmNode::evict_lru() {
  auto victim = cache_.evict_lru();
  if (victim) {
    // Keep the watcher's sharer set tight; fire-and-forget (reqid 0).
    Writer w;
    w.u64(0);
    w.u64(*victim);
    w.u8(kWriteFlagRemoveSharer);
    rt_.post_raw(watcher_of(*victim, cfg_.node_count), Frame{MsgType::CACHE_WRITE, w.take()});
  }
  return victim;
}

void DsmNode::install_block(uint64_t block, const std::array<Word, kBlockWords>& words) {
  while (cache_.resident() >= cache_.capacity() && !cache_.peek(block)) evict_lru();
  cache_.install(block, words);
}

std::vector<uint64_t> DsmNode::block_word_keys(uint64_t block) const {
  // Store keys covering one cache block: per-word in fine mode, per-package
  // in coarse mode.
  std::vector<uint64_t> keys;
  Addr base = block_base(block);
  if (cfg_.mode == DsmMode::fine) {
    for (uint32_t i = 0; i < kBlockWords; ++i) keys.push_back(base + i);
  } else {
    for (uint32_t i = 0; i < kBlockWords; i += cfg_.package_words) keys.push_back(base + i);
  }
  return keys;
}

void DsmNode::fetch_blocks(const std::vector<uint64_t>& blocks,
                           std::map<uint64_t, std::array<Word, kBlockWords>>& out) {
  std::vector<uint64_t> keys;
  for (uint64_t b : blocks) {
    auto ks = block_word_keys(b);
    keys.insert(keys.end(), ks.begin(), ks.end());
  }
  auto values = kv_.mget(keys);
  size_t ki = 0;
  uint32_t words_per_key = cfg_.mode == DsmMode::fine ? 1 : cfg_.package_words;
  for (uint64_t b : blocks) {
    auto& words = out[b];
    words = {};
    for (uint32_t off = 0; off < kBlockWords; off += words_per_key, ++ki) {
      if (values[ki]) bytes_to_words(*values[ki], words.data() + off, words_per_key);
    }
  }
}

std::vector<Word> DsmNode::read_words(Addr addr, uint32_t count) {
  if (op_hook_) op_hook_();
  check(count >= 1, Errc::argument, "read_words needs count >= 1");
  std::vector<Word> result(count);
  std::vector<uint64_t> misses;
  std::map<uint64_t, uint64_t> seq_at_start;
  {
    RunCtx g(rt_.world());
    for (uint64_t b = block_of(addr); b <= block_of(addr + count - 1); ++b) {
      if (auto* blk = cache_.find(b)) {
        Addr lo = std::max<Addr>(addr, block_base(b));
        Addr hi = std::min<Addr>(addr + count, block_base(b) + kBlockWords);
        for (Addr a = lo; a < hi; ++a) result[a - addr] = blk->words[block_offset(a)];
      } else {
        misses.push_back(b);
        seq_at_start[b] = inval_seq_[b];
      }
    }
  }
  if (misses.empty()) return result;

  // Register with each block's watcher before touching the store, so a
  // racing write is guaranteed to either invalidate us or be visible in the
  // fetched data.
  std::vector<uint64_t> regs;
  {
    RunCtx g(rt_.world());
    for (uint64_t b : misses) {
      regs.push_back(rt_.send_request(watcher_of(b, cfg_.node_count), MsgType::CACHE_MISS,
                                      [&](Writer& w) { w.u64(b); }));
    }
  }
  rt_.await_all(regs);

  std::map<uint64_t, std::array<Word, kBlockWords>> fetched;
  fetch_blocks(misses, fetched);

  RunCtx g(rt_.world());
  for (uint64_t b : misses) {
    const auto& words = fetched[b];
    if (inval_seq_[b] == seq_at_start[b]) {
      install_block(b, words);
    } else {
      // Poisoned by a concurrent invalidation: still serves this read (the
      // ops overlapped), but must not linger; deregister asynchronously.
      Writer w;
      w.u64(0);
      w.u64(b);
      w.u8(kWriteFlagRemoveSharer);
      rt_.post_raw(watcher_of(b, cfg_.node_count), Frame{MsgType::CACHE_WRITE, w.take()});
    }
    Addr lo = std::max<Addr>(addr, block_base(b));
    Addr hi = std::min<Addr>(addr + count, block_base(b) + kBlockWords);
    for (Addr a = lo; a < hi; ++a) result[a - addr] = words[block_offset(a)];
  }
  return result;
}

bool DsmNode::needs_ticket(uint64_t block, Addr addr, uint32_t count) const {
  Addr lo = std::max<Addr>(addr, block_base(block));
  Addr hi = std::min<Addr>(addr + uint64_t(count), block_base(block) + kBlockWords);
  uint32_t span = uint32_t(hi - lo);
  if (cfg_.mode == DsmMode::fine) return span > 1;  // multi-key update
  // Coarse: a partially covered package needs read-modify-write.
  uint32_t pw = cfg_.package_words;
  return lo % pw != 0 || hi % pw != 0;
}

void DsmNode::write_block_span(uint64_t block, Addr addr, const Word* words, uint32_t count) {
  Addr lo = std::max<Addr>(addr, block_base(block));
  Addr hi = std::min<Addr>(addr + uint64_t(count), block_base(block) + kBlockWords);
  const Word* src = words + (lo - addr);
  uint32_t span = uint32_t(hi - lo);

  bool ticket = needs_ticket(block, addr, count);
  EndpointId watcher = watcher_of(block, cfg_.node_count);

  {
    // Update a resident copy before the write-through: any invalidation that
    // lands later simply drops the block, so the cache can never end up
    // stale relative to a write that completed after ours. The sequence bump
    // poisons in-flight local fetches, which the watcher round cannot reach
    // (it excludes the writing node).
    RunCtx g(rt_.world());
    ++inval_seq_[block];
    if (auto* blk = cache_.find(block)) {
      for (uint32_t i = 0; i < span; ++i) blk->words[block_offset(lo + i)] = src[i];
    }
  }

  if (ticket) {
    uint64_t id;
    {
      RunCtx g(rt_.world());
      id = rt_.send_request(watcher, MsgType::BLOCK_LOCK, [&](Writer& w) { w.u64(block); });
    }
    rt_.await(id);
  }

  // Write through.
  if (cfg_.mode == DsmMode::fine) {
    std::vector<std::pair<uint64_t, Bytes>> kvs;
    for (uint32_t i = 0; i < span; ++i) kvs.emplace_back(lo + i, words_to_bytes(src + i, 1));
    kv_.set_many(kvs);
  } else {
    uint32_t pw = cfg_.package_words;
    std::vector<std::pair<uint64_t, Bytes>> full;
    for (Addr pkg = lo / pw * pw; pkg < hi; pkg += pw) {
      Addr plo = std::max(lo, pkg);
      Addr phi = std::min<Addr>(hi, pkg + pw);
      if (plo == pkg && phi == pkg + pw) {
        full.emplace_back(pkg, words_to_bytes(src + (pkg - lo), pw));
      } else {
        // Partial package: read-modify-write, serialized by the ticket.
        std::vector<Word> buf(pw, 0);
        auto cur = kv_.get(pkg);
        if (cur) bytes_to_words(*cur, buf.data(), pw);
        for (Addr a = plo; a < phi; ++a) buf[a - pkg] = src[a - lo];
        kv_.set(pkg, words_to_bytes(buf.data(), pw));
      }
    }
    if (!full.empty()) kv_.set_many(full);
  }

  // A local fetch that started inside the write window may have installed a
  // pre-write snapshot; bump again and re-apply so the resident copy can
  // never miss this write.
  {
    RunCtx g(rt_.world());
    ++inval_seq_[block];
    if (auto* blk = cache_.find(block)) {
      for (uint32_t i = 0; i < span; ++i) blk->words[block_offset(lo + i)] = src[i];
    }
  }

  // Notify the watcher; this returns only after every other sharer
  // acknowledged its invalidation, which is what makes a completed write
  // globally visible.
  uint64_t id;
  {
    RunCtx g(rt_.world());
    id = rt_.send_request(watcher, MsgType::CACHE_WRITE, [&](Writer& w) {
      w.u64(block);
      w.u8(ticket ? kWriteFlagReleaseTicket : 0);
    });
  }
  rt_.await(id);
}

void DsmNode::write_words(Addr addr, const std::vector<Word>& words) {
  if (op_hook_) op_hook_();
  if (words.empty()) return;
  // Ascending block order keeps ticketed writers deadlock-free.
  for (uint64_t b = block_of(addr); b <= block_of(addr + words.size() - 1); ++b) {
    write_block_span(b, addr, words.data(), uint32_t(words.size()));
  }
}

int64_t DsmNode::atomic_inc(Addr addr, int64_t delta) {
  if (op_hook_) op_hook_();
  int64_t value;
  try {
    value = kv_.inc(addr, delta);
  } catch (const Error& e) {
    if (e.code() != Errc::missing_key) throw;
    kv_.insert(addr, encode_i64(0));  // losing the insert race is fine
    value = kv_.inc(addr, delta);
  }
  // Stale cached copies of the counter's block die exactly like on a write.
  uint64_t block = block_of(addr);
  uint64_t id;
  {
    RunCtx g(rt_.world());
    id = rt_.send_request(watcher_of(block, cfg_.node_count), MsgType::CACHE_WRITE,
                          [&](Writer& w) {
                            w.u64(block);
                            w.u8(0);
                          });
  }
  rt_.await(id);
  return value;
}

int64_t DsmNode::atomic_read(Addr addr) {
  if (op_hook_) op_hook_();
  auto v = kv_.get(addr);
  return v ? decode_i64(*v) : 0;
}

void DsmNode::erase_range(Addr addr, uint32_t count) {
  if (op_hook_) op_hook_();
  if (count == 0) return;
  std::vector<uint64_t> keys;
  if (cfg_.mode == DsmMode::fine) {
    for (Addr a = addr; a < addr + count; ++a) keys.push_back(a);
  } else {
    uint32_t pw = cfg_.package_words;
    for (Addr pkg = addr / pw * pw; pkg < addr + count; pkg += pw) keys.push_back(pkg);
  }
  kv_.erase_many(keys);
  std::vector<uint64_t> ids;
  {
    RunCtx g(rt_.world());
    for (uint64_t b = block_of(addr); b <= block_of(addr + count - 1); ++b) {
      // Unlike a write, a delete leaves the local copy wrong as well.
      cache_.invalidate(b);
      ++inval_seq_[b];
      ids.push_back(rt_.send_request(watcher_of(b, cfg_.node_count), MsgType::CACHE_WRITE,
                                     [&](Writer& w) {
                                       w.u64(b);
                                       w.u8(0);
                                     }));
    }
  }
  rt_.await_all(ids);
}

// --- watcher side ----------------------------------------------------------------

void DsmNode::on_cache_miss(EndpointId src, Reader& r) {
  uint64_t reqid = r.u64();
  uint64_t block = r.u64();
  directory(rt_.handling_endpoint()).blocks[block].sharers.insert(NodeId(src));
  rt_.reply_ok(src, reqid);
}

void DsmNode::on_cache_write(EndpointId src, Reader& r) {
  uint64_t reqid = r.u64();
  uint64_t block = r.u64();
  uint8_t flags = r.u8();
  EndpointId dir_ep = rt_.handling_endpoint();
  auto& st = directory(dir_ep).blocks[block];

  if (flags & kWriteFlagRemoveSharer) {
    st.sharers.erase(NodeId(src));
    if (reqid != 0) rt_.reply_ok(src, reqid);
    return;
  }
  if (flags & kWriteFlagReleaseTicket) grant_next_ticket(dir_ep, block);

  WatcherDirectory::WriteRound round;
  round.writer = src;
  round.reqid = reqid;
  for (NodeId n : st.sharers) {
    if (EndpointId(n) != src) round.waiting.insert(n);
  }
  st.write_queue.push_back(std::move(round));
  if (st.write_queue.size() == 1) start_write_round(dir_ep, block);
}

void DsmNode::start_write_round(EndpointId dir_ep, uint64_t block) {
  auto& st = directory(dir_ep).blocks[block];
  check(!st.write_queue.empty(), Errc::internal, "no active write round");
  auto waiting = st.write_queue.front().waiting;
  if (waiting.empty()) {
    finish_write_round(dir_ep, block);
    return;
  }
  for (NodeId sharer : waiting) {
    rt_.send_request_cb(
        EndpointId(sharer), MsgType::CACHE_INVALIDATE, [&](Writer& w) { w.u64(block); },
        [this, dir_ep, block, sharer](Errc, Reader&) {
          auto& s = directory(dir_ep).blocks[block];
          if (s.write_queue.empty()) return;  // reset raced the ack
          s.write_queue.front().waiting.erase(sharer);
          if (s.write_queue.front().waiting.empty()) finish_write_round(dir_ep, block);
        });
  }
}

void DsmNode::finish_write_round(EndpointId dir_ep, uint64_t block) {
  auto& st = directory(dir_ep).blocks[block];
  auto round = st.write_queue.front();
  st.write_queue.erase(st.write_queue.begin());
  rt_.reply(round.writer, MsgType::REPLY, round.reqid, Errc::ok);
  if (!st.write_queue.empty()) start_write_round(dir_ep, block);
}

void DsmNode::on_cache_invalidate(EndpointId src, Reader& r) {
  uint64_t reqid = r.u64();
  uint64_t block = r.u64();
  ++inval_seq_[block];  // poisons any in-flight fetch of this block
  cache_.invalidate(block);
  rt_.reply_ok(src, reqid);
}

void DsmNode::on_block_lock(EndpointId src, Reader& r) {
  uint64_t reqid = r.u64();
  uint64_t block = r.u64();
  auto& st = directory(rt_.handling_endpoint()).blocks[block];
  if (!st.ticket_held) {
    st.ticket_held = true;
    rt_.reply(src, MsgType::BLOCK_GRANT, reqid, Errc::ok);
  } else {
    st.ticket_queue.emplace_back(src, reqid);
  }
}

void DsmNode::grant_next_ticket(EndpointId dir_ep, uint64_t block) {
  auto& st = directory(dir_ep).blocks[block];
  if (st.ticket_queue.empty()) {
    st.ticket_held = false;
    return;
  }
  auto [ep, reqid] = st.ticket_queue.front();
  st.ticket_queue.erase(st.ticket_queue.begin());
  rt_.reply(ep, MsgType::BLOCK_GRANT, reqid, Errc::ok);
}

}  // namespace step
