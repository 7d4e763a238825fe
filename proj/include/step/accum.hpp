// Vector-sum reduction across worker threads. Each participant splits its
// local vector into one contiguous chunk per node (ceiling-first even split;
// chunk i belongs to node i) and scatters them; chunks for the local node are
// handed off without touching the wire. Each chunk owner sums the
// contributions for its range and writes the result into the output shared
// array through DSM, then arrives at the round's internal barrier (threshold:
// participants + owners of non-empty ranges), whose release completes the
// round for everyone.
//
// Summation order is part of the contract: contributions are grouped by a
// participant->group map frozen at creation (normally the initial node
// placement), groups are added in ascending order and members in ascending
// participant order, all in the element type. A group's members may be
// pre-combined locally and contributed as one vector without changing the
// result bit for bit, and recovery may move participants between nodes
// without changing it either.
//
// Encodings: dense (the raw range slice) or sparse ((index, value) pairs,
// ascending). Auto picks per participant per round whichever costs fewer
// payload bytes.
#pragma once

#include <span>

#include "step/dsm.hpp"
#include "step/shm.hpp"
#include "step/sync.hpp"

namespace step {

enum class AccumMode : uint8_t { dense = 0, sparse = 1, auto_pick = 2 };

AccumMode parse_accum_mode(const std::string& s);
const char* accum_mode_name(AccumMode m);

struct ChunkRange {
  uint32_t lo = 0, hi = 0;
  uint32_t size() const { return hi - lo; }
};

// Ceiling-first even split of [0, length) into node_count ranges.
std::vector<ChunkRange> chunk_ranges(uint32_t length, uint32_t node_count);
uint32_t nonempty_ranges(uint32_t length, uint32_t node_count);

struct AccumInfo {
  uint32_t accum_id = 0;
  uint32_t participants = 0;
  uint32_t out_object = 0;
  uint32_t vector_length = 0;
  ElemKind elem = ElemKind::f32;
  AccumMode mode = AccumMode::auto_pick;
  uint32_t barrier_id = 0;
  uint32_t round_base = 0;
  std::vector<uint32_t> group_of;  // participant ordinal -> group

  uint32_t group_size(uint32_t g) const;
  uint32_t group_count() const;
};

// Master-side registrar: assigns ids, creates the internal barrier and
// broadcasts the registration to every node.
class AccumController {
 public:
  AccumController(NodeRuntime& rt, SyncController& sync, std::vector<EndpointId> nodes);

  // Task side (used directly by the master's main thread).
  AccumInfo create(uint32_t participants, uint32_t out_object, uint32_t vector_length,
                   ElemKind elem, AccumMode mode, std::vector<uint32_t> group_of,
                   uint32_t round_base = 0);
  // Re-broadcasts every known accumulator at new round bases (recovery).
  void rebroadcast(const std::map<uint32_t, uint32_t>& base_by_accum);
  std::vector<AccumInfo> known() const;
  void restore(const std::vector<AccumInfo>& infos);

 private:
  void on_create(EndpointId src, Reader& r);
  void broadcast(const AccumInfo& info);

  NodeRuntime& rt_;
  SyncController& sync_;
  std::vector<EndpointId> nodes_;
  std::map<uint32_t, AccumInfo> accums_;
  uint32_t next_id_ = 1;
};

// Per-node service: participant API plus the chunk-owner state machine.
class AccumService {
 public:
  AccumService(NodeRuntime& rt, DsmNode& dsm, SyncClient& sync);

  const AccumInfo& info(uint32_t accum_id) const;
  bool registered(uint32_t accum_id) const { return regs_.count(accum_id) > 0; }

  // Participant calls; ordinal is the caller's participant index.
  template <typename T>
  void accumulate(uint32_t accum_id, uint32_t ordinal, std::span<const T> vec) {
    static_assert(sizeof(T) == 4 || sizeof(T) == 8);
    contribute(accum_id, ordinal, false, reinterpret_cast<const uint8_t*>(vec.data()),
               uint32_t(vec.size()), ElemTraits<T>::kind);
  }
  // One pre-combined vector standing for every member of `group`.
  template <typename T>
  void accumulate_combined(uint32_t accum_id, uint32_t group, std::span<const T> vec) {
    contribute(accum_id, group, true, reinterpret_cast<const uint8_t*>(vec.data()),
               uint32_t(vec.size()), ElemTraits<T>::kind);
  }
  // Round participation without data (non-leader threads of a combined group).
  void join_round(uint32_t accum_id);

  // Owner service tasks currently in flight (write + barrier arrival).
  size_t active_tasks() const { return active_tasks_; }

  // Sparse helpers, exposed for tests and the mode decision.
  static std::vector<std::pair<uint32_t, uint64_t>> encode_sparse(const uint8_t* data,
                                                                  uint32_t count, ElemKind elem);
  static bool pick_sparse(const uint8_t* data, uint32_t count, ElemKind elem, AccumMode mode);

  void reset();

 private:
  struct Contribution {
    uint32_t key;  // ordinal, or group id when combined
    bool combined;
    std::vector<uint8_t> dense;  // decoded slice for this owner's range
  };
  struct OwnerRound {
    std::vector<Contribution> contribs;
  };
  struct Reg {
    AccumInfo info;
    // per owned endpoint: round -> buffered contributions
    std::map<EndpointId, std::map<uint32_t, OwnerRound>> rounds;
    std::map<uint32_t, uint32_t> task_calls;  // task id -> completed rounds
  };

  void on_reg(EndpointId src, Reader& r);
  void on_chunk(EndpointId src, Reader& r);
  void contribute(uint32_t accum_id, uint32_t key, bool combined, const uint8_t* data,
                  uint32_t count, ElemKind elem);
  uint32_t begin_round(uint32_t accum_id);
  void deliver(EndpointId owner, uint32_t accum_id, uint32_t round, uint32_t key, bool combined,
               std::vector<uint8_t> dense);
  bool round_complete(const Reg& reg, const OwnerRound& r) const;
  void finish_round(EndpointId owner, uint32_t accum_id, uint32_t round);

  NodeRuntime& rt_;
  DsmNode& dsm_;
  SyncClient& sync_;
  std::map<uint32_t, Reg> regs_;
  size_t active_tasks_ = 0;
};

}  // namespace step
