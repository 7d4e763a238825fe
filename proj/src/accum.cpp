#include "step/accum.hpp"

#include <algorithm>
#include <cstring>

namespace step {

AccumMode parse_accum_mode(const std::string& s) {
  if (s == "dense") return AccumMode::dense;
  if (s == "sparse") return AccumMode::sparse;
  if (s == "auto") return AccumMode::auto_pick;
  fail(Errc::config, "unknown accumulator mode " + s);
}

const char* accum_mode_name(AccumMode m) {
  switch (m) {
    case AccumMode::dense: return "dense";
    case AccumMode::sparse: return "sparse";
    case AccumMode::auto_pick: return "auto";
  }
  return "?";
}

std::vector<ChunkRange> chunk_ranges(uint32_t length, uint32_t node_count) {
  std::vector<ChunkRange> out(node_count);
  uint32_t q = length / node_count;
  uint32_t r = length % node_count;
  uint32_t at = 0;
  for (uint32_t i = 0; i < node_count; ++i) {
    uint32_t size = q + (i < r ? 1 : 0);
    out[i] = ChunkRange{at, at + size};
    at += size;
  }
  return out;
}

uint32_t nonempty_ranges(uint32_t length, uint32_t node_count) {
  return std::min(length, node_count);
}

uint32_t AccumInfo::group_size(uint32_t g) const {
  uint32_t n = 0;
  for (uint32_t x : group_of) n += (x == g);
  return n;
}

uint32_t AccumInfo::group_count() const {
  uint32_t m = 0;
  for (uint32_t x : group_of) m = std::max(m, x + 1);
  return m;
}

namespace {

void add_slice(ElemKind k, uint8_t* acc, const uint8_t* in, uint32_t count) {
  switch (k) {
    case ElemKind::f32: {
      auto* a = reinterpret_cast<float*>(acc);
      auto* b = reinterpret_cast<const float*>(in);
      for (uint32_t i = 0; i < count; ++i) a[i] += b[i];
      break;
    }
    case ElemKind::f64: {
      auto* a = reinterpret_cast<double*>(acc);
      auto* b = reinterpret_cast<const double*>(in);
      for (uint32_t i = 0; i < count; ++i) a[i] += b[i];
      break;
    }
    case ElemKind::i32: {
      auto* a = reinterpret_cast<int32_t*>(acc);
      auto* b = reinterpret_cast<const int32_t*>(in);
      for (uint32_t i = 0; i < count; ++i) a[i] += b[i];
      break;
    }
    case ElemKind::i64: {
      auto* a = reinterpret_cast<int64_t*>(acc);
      auto* b = reinterpret_cast<const int64_t*>(in);
      for (uint32_t i = 0; i < count; ++i) a[i] += b[i];
      break;
    }
    case ElemKind::ref:
      fail(Errc::argument, "cannot accumulate references");
  }
}

void write_info(Writer& w, const AccumInfo& info) {
  w.u32(info.accum_id);
  w.u32(info.participants);
  w.u32(info.out_object);
  w.u32(info.vector_length);
  w.u8(uint8_t(info.elem));
  w.u8(uint8_t(info.mode));
  w.u32(info.barrier_id);
  w.u32(info.round_base);
  w.u32(uint32_t(info.group_of.size()));
  for (uint32_t g : info.group_of) w.u32(g);
}

AccumInfo read_info(Reader& r) {
  AccumInfo info;
  info.accum_id = r.u32();
  info.participants = r.u32();
  info.out_object = r.u32();
  info.vector_length = r.u32();
  info.elem = ElemKind(r.u8());
  info.mode = AccumMode(r.u8());
  info.barrier_id = r.u32();
  info.round_base = r.u32();
  uint32_t n = r.u32();
  info.group_of.resize(n);
  for (uint32_t i = 0; i < n; ++i) info.group_of[i] = r.u32();
  return info;
}

}  // namespace

// --- controller ------------------------------------------------------------------

AccumController::AccumController(NodeRuntime& rt, SyncController& sync,
                                 std::vector<EndpointId> nodes)
    : rt_(rt), sync_(sync), nodes_(std::move(nodes)) {
  rt_.set_handler(MsgType::ACCUM_CREATE, [this](EndpointId s, Reader& r) { on_create(s, r); });
}

AccumInfo AccumController::create(uint32_t participants, uint32_t out_object,
                                  uint32_t vector_length, ElemKind elem, AccumMode mode,
                                  std::vector<uint32_t> group_of, uint32_t round_base) {
  check(participants >= 1, Errc::argument, "accumulator needs at least one participant");
  check(group_of.size() == participants, Errc::argument, "group map must cover participants");
  AccumInfo info;
  info.participants = participants;
  info.out_object = out_object;
  info.vector_length = vector_length;
  info.elem = elem;
  info.mode = mode;
  info.round_base = round_base;
  info.group_of = std::move(group_of);
  {
    RunCtx g(rt_.world());
    info.accum_id = next_id_++;
    info.barrier_id =
        sync_.create_barrier(participants + nonempty_ranges(vector_length, uint32_t(nodes_.size())));
    accums_[info.accum_id] = info;
  }
  broadcast(info);
  return info;
}

void AccumController::broadcast(const AccumInfo& info) {
  std::vector<uint64_t> ids;
  {
    RunCtx g(rt_.world());
    for (EndpointId ep : nodes_) {
      ids.push_back(
          rt_.send_request(ep, MsgType::ACCUM_REG, [&](Writer& w) { write_info(w, info); }));
    }
  }
  rt_.await_all(ids);
}

void AccumController::on_create(EndpointId src, Reader& r) {
  uint64_t reqid = r.u64();
  AccumInfo info = read_info(r);
  if (info.participants < 1 || info.group_of.size() != info.participants) {
    rt_.reply(src, MsgType::REPLY, reqid, Errc::argument);
    return;
  }
  info.accum_id = next_id_++;
  info.barrier_id = sync_.create_barrier(
      info.participants + nonempty_ranges(info.vector_length, uint32_t(nodes_.size())));
  accums_[info.accum_id] = info;
  // Ack the creator only after every node holds the registration.
  auto remaining = std::make_shared<size_t>(nodes_.size());
  for (EndpointId ep : nodes_) {
    rt_.send_request_cb(
        ep, MsgType::ACCUM_REG, [&](Writer& w) { write_info(w, accums_.at(info.accum_id)); },
        [this, src, reqid, remaining, id = info.accum_id, bid = info.barrier_id](Errc, Reader&) {
          if (--*remaining == 0) {
            rt_.reply(src, MsgType::REPLY, reqid, Errc::ok, [&](Writer& w) {
              w.u32(id);
              w.u32(bid);
            });
          }
        });
  }
}

void AccumController::rebroadcast(const std::map<uint32_t, uint32_t>& base_by_accum) {
  for (auto& [id, info] : accums_) {
    auto it = base_by_accum.find(id);
    if (it != base_by_accum.end()) info.round_base = it->second;
  }
  for (auto& [id, info] : accums_) broadcast(info);
}

std::vector<AccumInfo> AccumController::known() const {
  std::vector<AccumInfo> out;
  for (const auto& [id, info] : accums_) out.push_back(info);
  return out;
}

void AccumController::restore(const std::vector<AccumInfo>& infos) {
  accums_.clear();
  uint32_t max_id = 0;
  for (const auto& info : infos) {
    accums_[info.accum_id] = info;
    max_id = std::max(max_id, info.accum_id);
  }
  next_id_ = std::max(next_id_, max_id + 1);
}

// --- per-node service --------------------------------------------------------------

AccumService::AccumService(NodeRuntime& rt, DsmNode& dsm, SyncClient& sync)
    : rt_(rt), dsm_(dsm), sync_(sync) {
  rt_.set_handler(MsgType::ACCUM_REG, [this](EndpointId s, Reader& r) { on_reg(s, r); });
  rt_.set_handler(MsgType::ACCUM_CHUNK, [this](EndpointId s, Reader& r) { on_chunk(s, r); });
}

const AccumInfo& AccumService::info(uint32_t accum_id) const {
  auto it = regs_.find(accum_id);
  check(it != regs_.end(), Errc::argument, "unknown accumulator " + std::to_string(accum_id));
  return it->second.info;
}

void AccumService::on_reg(EndpointId src, Reader& r) {
  uint64_t reqid = r.u64();
  AccumInfo info = read_info(r);
  Reg& reg = regs_[info.accum_id];  // re-registration resets round bookkeeping
  reg.info = std::move(info);
  reg.rounds.clear();
  reg.task_calls.clear();
  rt_.reply_ok(src, reqid);
}

std::vector<std::pair<uint32_t, uint64_t>> AccumService::encode_sparse(const uint8_t* data,
                                                                       uint32_t count,
                                                                       ElemKind elem) {
  uint32_t eb = elem_bytes(elem);
  std::vector<std::pair<uint32_t, uint64_t>> out;
  for (uint32_t i = 0; i < count; ++i) {
    uint64_t raw = 0;
    std::memcpy(&raw, data + size_t(i) * eb, eb);
    if (raw != 0) out.emplace_back(i, raw);
  }
  return out;
}

bool AccumService::pick_sparse(const uint8_t* data, uint32_t count, ElemKind elem,
                               AccumMode mode) {
  if (mode == AccumMode::dense) return false;
  if (mode == AccumMode::sparse) return true;
  uint32_t eb = elem_bytes(elem);
  uint64_t nonzero = 0;
  for (uint32_t i = 0; i < count; ++i) {
    uint64_t raw = 0;
    std::memcpy(&raw, data + size_t(i) * eb, eb);
    nonzero += (raw != 0);
  }
  // Pair entry costs index bytes + element bytes against element bytes alone.
  return nonzero * (4 + uint64_t(eb)) < uint64_t(count) * eb;
}

uint32_t AccumService::begin_round(uint32_t accum_id) {
  auto it = regs_.find(accum_id);
  check(it != regs_.end(), Errc::argument, "unknown accumulator " + std::to_string(accum_id));
  TaskCtx* t = current_task();
  check(t != nullptr, Errc::internal, "accumulate outside a task");
  uint32_t& calls = it->second.task_calls[t->task_id];
  return it->second.info.round_base + calls++;
}

void AccumService::join_round(uint32_t accum_id) {
  uint32_t round;
  uint32_t barrier;
  {
    RunCtx g(rt_.world());
    round = begin_round(accum_id);
    barrier = regs_.at(accum_id).info.barrier_id;
  }
  sync_.barrier_enter_at(barrier, round);
}

void AccumService::contribute(uint32_t accum_id, uint32_t key, bool combined, const uint8_t* data,
                              uint32_t count, ElemKind elem) {
  uint32_t round;
  uint32_t barrier;
  {
    RunCtx g(rt_.world());
    auto it = regs_.find(accum_id);
    check(it != regs_.end(), Errc::argument, "unknown accumulator " + std::to_string(accum_id));
    const AccumInfo& info = it->second.info;
    check(elem == info.elem, Errc::argument, "element kind mismatch");
    check(count == info.vector_length, Errc::argument, "vector length mismatch");
    round = begin_round(accum_id);
    barrier = info.barrier_id;

    uint32_t eb = elem_bytes(elem);
    bool sparse = pick_sparse(data, count, elem, info.mode);
    auto ranges = chunk_ranges(info.vector_length, dsm_.config().node_count);
    for (uint32_t node = 0; node < ranges.size(); ++node) {
      const ChunkRange& cr = ranges[node];
      if (cr.size() == 0) continue;
      if (EndpointId(node) == rt_.endpoint()) {
        std::vector<uint8_t> dense(data + size_t(cr.lo) * eb, data + size_t(cr.hi) * eb);
        deliver(EndpointId(node), accum_id, round, key, combined, std::move(dense));
        continue;
      }
      Writer w;
      w.u32(accum_id);
      w.u32(round);
      w.u32(key);
      w.u8(uint8_t(combined ? 2 : 0) | uint8_t(sparse ? 1 : 0));
      if (sparse) {
        uint32_t entries = 0;
        for (uint32_t i = cr.lo; i < cr.hi; ++i) {
          uint64_t raw = 0;
          std::memcpy(&raw, data + size_t(i) * eb, eb);
          entries += (raw != 0);
        }
        w.u32(entries);
        for (uint32_t i = cr.lo; i < cr.hi; ++i) {
          uint64_t raw = 0;
          std::memcpy(&raw, data + size_t(i) * eb, eb);
          if (raw != 0) {
            w.u32(i);
            w.raw(data + size_t(i) * eb, eb);
          }
        }
      } else {
        w.u32(cr.size());
        w.raw(data + size_t(cr.lo) * eb, size_t(cr.size()) * eb);
      }
      rt_.post_raw(EndpointId(node), Frame{MsgType::ACCUM_CHUNK, w.take()});
    }
  }
  sync_.barrier_enter_at(barrier, round);
}

void AccumService::on_chunk(EndpointId, Reader& r) {
  uint32_t accum_id = r.u32();
  uint32_t round = r.u32();
  uint32_t key = r.u32();
  uint8_t flags = r.u8();
  uint32_t count = r.u32();
  auto it = regs_.find(accum_id);
  check(it != regs_.end(), Errc::protocol, "chunk for unregistered accumulator");
  const AccumInfo& info = it->second.info;
  uint32_t eb = elem_bytes(info.elem);
  EndpointId owner = rt_.handling_endpoint();
  auto ranges = chunk_ranges(info.vector_length, dsm_.config().node_count);
  check(owner < ranges.size(), Errc::protocol, "chunk addressed to a non-node endpoint");
  const ChunkRange& cr = ranges[owner];

  std::vector<uint8_t> dense(size_t(cr.size()) * eb, 0);
  if (flags & 1) {
    for (uint32_t e = 0; e < count; ++e) {
      uint32_t idx = r.u32();
      check(idx >= cr.lo && idx < cr.hi, Errc::protocol, "sparse index outside chunk range");
      std::memcpy(dense.data() + size_t(idx - cr.lo) * eb, r.take(eb), eb);
    }
  } else {
    check(count == cr.size(), Errc::protocol, "dense chunk size mismatch");
    std::memcpy(dense.data(), r.take(size_t(count) * eb), size_t(count) * eb);
  }
  deliver(owner, accum_id, round, key, (flags & 2) != 0, std::move(dense));
}

void AccumService::deliver(EndpointId owner, uint32_t accum_id, uint32_t round, uint32_t key,
                           bool combined, std::vector<uint8_t> dense) {
  Reg& reg = regs_.at(accum_id);
  if (round < reg.info.round_base) return;  // stale frame from before a recovery
  OwnerRound& orow = reg.rounds[owner][round];
  for (const auto& c : orow.contribs) {
    check(!(c.key == key && c.combined == combined), Errc::protocol,
          "duplicate contribution in round " + std::to_string(round));
  }
  orow.contribs.push_back(Contribution{key, combined, std::move(dense)});
  if (round_complete(reg, orow)) finish_round(owner, accum_id, round);
}

bool AccumService::round_complete(const Reg& reg, const OwnerRound& r) const {
  const AccumInfo& info = reg.info;
  std::map<uint32_t, uint32_t> member_count;
  std::set<uint32_t> combined_groups;
  for (const auto& c : r.contribs) {
    if (c.combined) {
      combined_groups.insert(c.key);
    } else {
      check(c.key < info.group_of.size(), Errc::protocol, "participant ordinal out of range");
      member_count[info.group_of[c.key]] += 1;
    }
  }
  std::set<uint32_t> groups(info.group_of.begin(), info.group_of.end());
  for (uint32_t g : groups) {
    if (combined_groups.count(g)) continue;
    auto it = member_count.find(g);
    if (it == member_count.end() || it->second < info.group_size(g)) return false;
  }
  return true;
}

void AccumService::finish_round(EndpointId owner, uint32_t accum_id, uint32_t round) {
  Reg& reg = regs_.at(accum_id);
  AccumInfo info = reg.info;
  std::vector<Contribution> contribs = std::move(reg.rounds[owner][round].contribs);
  reg.rounds[owner].erase(round);

  ++active_tasks_;
  rt_.world().spawn(rt_.endpoint(), [this, owner, info = std::move(info), round,
                                     contribs = std::move(contribs)]() mutable {
    struct Guard {
      AccumService* s;
      ~Guard() {
        RunCtx g(s->rt_.world());
        --s->active_tasks_;
        s->rt_.world().wake();
      }
    } guard{this};
    auto ranges = chunk_ranges(info.vector_length, dsm_.config().node_count);
    const ChunkRange& cr = ranges[owner];
    uint32_t eb = elem_bytes(info.elem);
    std::vector<uint8_t> acc(size_t(cr.size()) * eb, 0);

    // Fixed order: groups ascending, members ascending within a group; a
    // pre-combined vector stands for its whole group. The two-level grouping
    // is what keeps results identical when a group is combined locally.
    std::set<uint32_t> groups(info.group_of.begin(), info.group_of.end());
    for (uint32_t g : groups) {
      std::vector<const Contribution*> members;
      const Contribution* whole = nullptr;
      for (const auto& c : contribs) {
        if (c.combined && c.key == g) whole = &c;
        if (!c.combined && info.group_of[c.key] == g) members.push_back(&c);
      }
      if (whole) {
        add_slice(info.elem, acc.data(), whole->dense.data(), cr.size());
        continue;
      }
      std::sort(members.begin(), members.end(),
                [](const Contribution* a, const Contribution* b) { return a->key < b->key; });
      std::vector<uint8_t> partial(size_t(cr.size()) * eb, 0);
      for (const auto* m : members) add_slice(info.elem, partial.data(), m->dense.data(), cr.size());
      add_slice(info.elem, acc.data(), partial.data(), cr.size());
    }

    uint32_t width = elem_width(info.elem);
    std::vector<Word> words(size_t(cr.size()) * width);
    std::memcpy(words.data(), acc.data(), acc.size());
    Addr out = compose_addr(info.out_object, uint64_t(cr.lo) * width,
                            dsm_.config().address_split_x);
    dsm_.write_words(out, words);
    sync_.barrier_enter_at(info.barrier_id, round, -1, /*wait=*/false);
  });
}

void AccumService::reset() { regs_.clear(); }

}  // namespace step
