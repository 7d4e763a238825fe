// Distributed shared memory over the key-value store.
//
// Addresses are 64-bit: a high-order object_id (x bits, default 32) and a
// low-order field_id naming one 32-bit word. Store keying depends on the
// mode: fine keeps one word per key, coarse keeps one package (default 32
// words) per package-aligned key. Unwritten DSM reads as zero.
//
// Each node runs a write-through cache of 32-word blocks with LRU
// replacement, kept coherent by a directory-based write-invalidate protocol.
// The watcher of a block is the node with id == block address mod n; it
// records the sharer set and serializes invalidation rounds. Ordering rules
// that make the protocol sound on FIFO links:
//   * a reader registers with the watcher before fetching from the store,
//     and installs nothing if an invalidation raced the fetch;
//   * a writer updates its resident copy, then writes the store through,
//     then notifies the watcher; the write returns only after every other
//     sharer acknowledged its invalidation;
//   * writes that cannot be expressed as single whole-key sets (partial
//     packages, multi-word fine-mode values) first take the block's write
//     ticket at the watcher, released with the write notification.
// Atomic counters live under their own key (8-byte integer) in both modes,
// bypass the cache entirely, and still trigger an invalidation round.
#pragma once

#include <array>
#include <optional>
#include <set>

#include "step/kv.hpp"

namespace step {

inline constexpr uint32_t kBlockWords = 32;

enum class DsmMode : uint8_t { fine = 0, coarse = 1 };

struct DsmConfig {
  DsmMode mode = DsmMode::coarse;
  uint32_t address_split_x = 32;  // object_id bits
  uint32_t package_words = 32;    // power of two, 1..32
  uint32_t cache_blocks = 1024;
  uint32_t node_count = 1;

  void validate() const;
};

// --- address arithmetic -------------------------------------------------------

Addr compose_addr(uint64_t object_id, uint64_t field_id, uint32_t x = 32);
std::pair<uint64_t, uint64_t> decompose_addr(Addr a, uint32_t x = 32);

inline uint64_t block_of(Addr a) { return a >> 5; }
inline Addr block_base(uint64_t block) { return block << 5; }
inline uint32_t block_offset(Addr a) { return uint32_t(a & 31); }
inline NodeId watcher_of(uint64_t block, uint32_t node_count) {
  return NodeId(block % node_count);
}

// --- per-node cache -----------------------------------------------------------

class DsmCache {
 public:
  explicit DsmCache(uint32_t capacity) : capacity_(capacity) {}

  struct Block {
    std::array<Word, kBlockWords> words{};
    uint64_t last_use = 0;
  };

  Block* find(uint64_t block);                    // touches LRU
  const Block* peek(uint64_t block) const;        // no touch
  // Installs (or overwrites) a block; returns the evicted block, if any.
  std::optional<uint64_t> install(uint64_t block, const std::array<Word, kBlockWords>& words);
  bool invalidate(uint64_t block);
  std::optional<uint64_t> evict_lru();

  size_t resident() const { return blocks_.size(); }
  uint32_t capacity() const { return capacity_; }
  std::vector<uint64_t> resident_blocks() const;

 private:
  std::map<uint64_t, Block> blocks_;
  uint64_t tick_ = 0;
  uint32_t capacity_;
};

// --- watcher directory (one per endpoint this node answers for) ---------------

class WatcherDirectory {
 public:
  struct WriteRound {
    EndpointId writer;
    uint64_t reqid;
    std::set<NodeId> waiting;
  };
  struct BlockState {
    std::set<NodeId> sharers;
    std::vector<WriteRound> write_queue;  // front is active
    bool ticket_held = false;
    std::vector<std::pair<EndpointId, uint64_t>> ticket_queue;
  };

  std::map<uint64_t, BlockState> blocks;

  std::set<NodeId> sharers_of(uint64_t block) const {
    auto it = blocks.find(block);
    return it == blocks.end() ? std::set<NodeId>{} : it->second.sharers;
  }
};

// --- the per-node DSM service --------------------------------------------------

class DsmNode {
 public:
  DsmNode(NodeRuntime& rt, KvClient& kv, DsmConfig cfg);

  const DsmConfig& config() const { return cfg_; }
  // Invoked at the start of every task-side operation; the cluster layer
  // hooks checkpoint pause points in here.
  void set_op_hook(std::function<void()> f) { op_hook_ = std::move(f); }

  // task side
  std::vector<Word> read_words(Addr addr, uint32_t count);
  Word read_word(Addr addr) { return read_words(addr, 1)[0]; }
  void write_words(Addr addr, const std::vector<Word>& words);
  void write_word(Addr addr, Word w) { write_words(addr, {w}); }
  int64_t atomic_inc(Addr addr, int64_t delta);
  int64_t atomic_dec(Addr addr, int64_t delta) { return atomic_inc(addr, -delta); }
  int64_t atomic_read(Addr addr);
  // Deletes backing store keys for [addr, addr+count) and invalidates all
  // cached copies cluster-wide.
  void erase_range(Addr addr, uint32_t count);

  // introspection / tests
  DsmCache& cache() { return cache_; }
  WatcherDirectory& directory(EndpointId as = EndpointId(-1));
  std::optional<uint64_t> evict_lru();
  // Drops all local protocol state (cache, directories, fetch bookkeeping);
  // recovery path.
  void reset();

 private:
  struct PkgSpan {
    uint64_t key;
    uint32_t first;  // word offset within package covered by the write
    uint32_t last;   // exclusive
  };

  void install_block(uint64_t block, const std::array<Word, kBlockWords>& words);
  void fetch_blocks(const std::vector<uint64_t>& blocks,
                    std::map<uint64_t, std::array<Word, kBlockWords>>& out);
  std::vector<uint64_t> block_word_keys(uint64_t block) const;
  bool needs_ticket(uint64_t block, Addr addr, uint32_t count) const;
  void write_block_span(uint64_t block, Addr addr, const Word* words, uint32_t count);

  // handlers
  void on_cache_miss(EndpointId src, Reader& r);
  void on_cache_write(EndpointId src, Reader& r);
  void on_cache_invalidate(EndpointId src, Reader& r);
  void on_block_lock(EndpointId src, Reader& r);
  void start_write_round(EndpointId dir_ep, uint64_t block);
  void finish_write_round(EndpointId dir_ep, uint64_t block);
  void grant_next_ticket(EndpointId dir_ep, uint64_t block);

  NodeRuntime& rt_;
  KvClient& kv_;
  DsmConfig cfg_;
  DsmCache cache_;
  std::map<EndpointId, WatcherDirectory> dirs_;
  std::map<uint64_t, uint64_t> inval_seq_;
  std::function<void()> op_hook_;
};

}  // namespace step
