#include "step/fault.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace step {

namespace fs = std::filesystem;

// --- image serialization -------------------------------------------------------------

Bytes CheckpointImage::encode() const {
  Writer w;
  w.u32(0x504B4353);  // "SCKP"
  w.u32(1);           // version
  w.u64(id);
  w.u64(iteration);
  w.u32(uint32_t(store.size()));
  for (const auto& [k, v] : store) {
    w.u64(k);
    w.bytes(v);
  }
  w.u32(uint32_t(barriers.size()));
  for (const auto& [bid, thr, epoch] : barriers) {
    w.u32(bid);
    w.u32(thr);
    w.u32(epoch);
  }
  w.u32(uint32_t(semaphores.size()));
  for (const auto& [sid, count] : semaphores) {
    w.u32(sid);
    w.i64(count);
  }
  w.u32(uint32_t(accums.size()));
  for (const auto& a : accums) {
    w.u32(a.accum_id);
    w.u32(a.participants);
    w.u32(a.out_object);
    w.u32(a.vector_length);
    w.u8(uint8_t(a.elem));
    w.u8(uint8_t(a.mode));
    w.u32(a.barrier_id);
    w.u32(a.round_base);
    w.u32(uint32_t(a.group_of.size()));
    for (uint32_t g : a.group_of) w.u32(g);
  }
  w.u32(uint32_t(threads.size()));
  for (const auto& t : threads) {
    w.u32(t.oid);
    w.u32(t.node);
    w.u32(t.func_id);
    w.u32(t.param);
    w.u8(uint8_t(int32_t(t.state)));
  }
  w.u32(uint32_t(payloads.size()));
  for (const auto& [oid, b] : payloads) {
    w.u32(oid);
    w.bytes(b);
  }
  return w.take();
}

CheckpointImage CheckpointImage::decode(const Bytes& data) {
  Reader r(data);
  check(r.u32() == 0x504B4353, Errc::checkpoint, "bad image magic");
  check(r.u32() == 1, Errc::checkpoint, "unsupported image version");
  CheckpointImage img;
  img.id = r.u64();
  img.iteration = r.u64();
  for (uint32_t i = 0, n = r.u32(); i < n; ++i) {
    uint64_t k = r.u64();
    img.store.emplace_back(k, r.bytes());
  }
  for (uint32_t i = 0, n = r.u32(); i < n; ++i) {
    uint32_t id = r.u32(), thr = r.u32(), epoch = r.u32();
    img.barriers.emplace_back(id, thr, epoch);
  }
  for (uint32_t i = 0, n = r.u32(); i < n; ++i) {
    uint32_t id = r.u32();
    img.semaphores.emplace_back(id, r.i64());
  }
  for (uint32_t i = 0, n = r.u32(); i < n; ++i) {
    AccumInfo a;
    a.accum_id = r.u32();
    a.participants = r.u32();
    a.out_object = r.u32();
    a.vector_length = r.u32();
    a.elem = ElemKind(r.u8());
    a.mode = AccumMode(r.u8());
    a.barrier_id = r.u32();
    a.round_base = r.u32();
    a.group_of.resize(r.u32());
    for (auto& g : a.group_of) g = r.u32();
    img.accums.push_back(std::move(a));
  }
  for (uint32_t i = 0, n = r.u32(); i < n; ++i) {
    ClusterNode::ThreadInfo t;
    t.oid = r.u32();
    t.node = r.u32();
    t.func_id = r.u32();
    t.param = r.u32();
    t.state = ThreadState(int32_t(r.u8()));
    img.threads.push_back(t);
  }
  for (uint32_t i = 0, n = r.u32(); i < n; ++i) {
    uint32_t oid = r.u32();
    img.payloads[oid] = r.bytes();
  }
  r.expect_done();
  return img;
}

void write_image(const std::string& dir, const CheckpointImage& image) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  Bytes data = image.encode();
  uint64_t digest = fnv1a(data);
  std::string base = dir + "/ckpt_" + std::to_string(image.id);
  {
    std::ofstream out(base + ".dat.tmp", std::ios::binary | std::ios::trunc);
    check(out.good(), Errc::checkpoint, "cannot write " + base + ".dat.tmp");
    out.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size()));
    check(out.good(), Errc::checkpoint, "short write to " + base + ".dat.tmp");
  }
  fs::rename(base + ".dat.tmp", base + ".dat", ec);
  check(!ec, Errc::checkpoint, "rename failed for " + base + ".dat");
  {
    std::ofstream out(base + ".manifest.tmp", std::ios::trunc);
    check(out.good(), Errc::checkpoint, "cannot write manifest");
    char hex[17];
    snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(digest));
    out << "id " << image.id << "\niteration " << image.iteration << "\ndigest " << hex << "\n";
    check(out.good(), Errc::checkpoint, "short manifest write");
  }
  fs::rename(base + ".manifest.tmp", base + ".manifest", ec);
  check(!ec, Errc::checkpoint, "rename failed for " + base + ".manifest");
}

std::optional<CheckpointImage> load_image(const std::string& dir, uint64_t id) {
  std::string base = dir + "/ckpt_" + std::to_string(id);
  std::ifstream mf(base + ".manifest");
  if (!mf.good()) return std::nullopt;
  uint64_t mid = 0, iter = 0;
  std::string digest_hex;
  std::string key;
  while (mf >> key) {
    if (key == "id")
      mf >> mid;
    else if (key == "iteration")
      mf >> iter;
    else if (key == "digest")
      mf >> digest_hex;
  }
  std::ifstream df(base + ".dat", std::ios::binary);
  if (!df.good() || digest_hex.empty() || mid != id) return std::nullopt;
  Bytes data((std::istreambuf_iterator<char>(df)), std::istreambuf_iterator<char>());
  char hex[17];
  snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a(data)));
  if (digest_hex != hex) return std::nullopt;  // torn or corrupt image
  try {
    return CheckpointImage::decode(data);
  } catch (const Error&) {
    return std::nullopt;
  }
}

std::optional<CheckpointImage> load_latest(const std::string& dir) {
  std::error_code ec;
  std::optional<uint64_t> best;
  for (const auto& e : fs::directory_iterator(dir, ec)) {
    std::string name = e.path().filename().string();
    if (name.rfind("ckpt_", 0) != 0) continue;
    size_t dot = name.find(".manifest");
    if (dot == std::string::npos) continue;
    uint64_t id = 0;
    try {
      id = std::stoull(name.substr(5, dot - 5));
    } catch (...) {
      continue;
    }
    if (!best || id > *best) {
      if (load_image(dir, id)) best = id;  // only count valid images
    }
  }
  if (!best) return std::nullopt;
  return load_image(dir, *best);
}

// --- FaultManager ----------------------------------------------------------------------

FaultManager::FaultManager(ClusterNode& master) : m_(master) {
  m_.on_failure = [this](const std::vector<NodeId>& dead) {
    if (recovering_) return;
    recovering_ = true;
    failure_seen_ms_ = m_.world().now_ms();
    std::vector<NodeId> failed = dead;
    m_.world().spawn(m_.rt().endpoint(), [this, failed] {
      try {
        recover(failed, m_.config().recovery_policy);
      } catch (const Error& e) {
        std::cerr << "recovery failed: " << e.what() << "\n";
        m_.mark_unrecoverable(e.what());
      }
      recovering_ = false;
    });
  };
}

std::map<uint32_t, Bytes> FaultManager::collect_payloads(uint8_t mode) {
  std::map<uint32_t, Bytes> payloads;
  std::vector<uint64_t> reqs;
  {
    RunCtx g(m_.world());
    for (NodeId s : m_.live_slaves()) {
      reqs.push_back(m_.rt().send_request(EndpointId(s), MsgType::CHECKPOINT_CMD,
                                          [&](Writer& w) { w.u8(mode); }));
    }
  }
  for (uint64_t id : reqs) {
    Bytes b = m_.rt().await(id);
    Reader r(b);
    for (uint32_t i = 0, n = r.u32(); i < n; ++i) {
      uint32_t oid = r.u32();
      payloads[oid] = r.bytes();
    }
  }
  return payloads;
}

std::optional<uint64_t> FaultManager::take_checkpoint(uint64_t iteration, uint8_t mode) {
  auto t0 = std::chrono::steady_clock::now();
  CheckpointImage img;
  img.iteration = iteration;
  try {
    img.payloads = collect_payloads(mode);
    img.store = m_.kv().snapshot_all();
    img.barriers = m_.controller().barrier_states();
    img.semaphores = m_.controller().semaphore_states();
    img.accums = m_.accum_controller().known();
    for (const auto& [oid, info] : m_.thread_table()) img.threads.push_back(info);
    img.id = next_id_;
    write_image(m_.config().checkpoint_dir, img);
    ++next_id_;
  } catch (const Error& e) {
    // The run continues without the image.
    std::cerr << "checkpoint " << next_id_ << " failed: " << e.what() << "\n";
    if (mode == 1) {
      resume_all();
    }
    return std::nullopt;
  }
  if (mode == 1) resume_all();
  double ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  m_.report().checkpoints.push_back(RunReport::CheckpointTiming{img.id, iteration, ms});
  return img.id;
}

void FaultManager::resume_all() {
  std::vector<uint64_t> reqs;
  {
    RunCtx g(m_.world());
    for (NodeId s : m_.live_slaves()) {
      reqs.push_back(m_.rt().send_request(EndpointId(s), MsgType::RESUME, {}));
    }
  }
  m_.rt().await_all(reqs);
}

void FaultManager::initial_checkpoint() {
  check(next_id_ == 0, Errc::checkpoint, "initial checkpoint must be first");
  take_checkpoint(0, 0);
}

void FaultManager::checkpoint_at_barrier(uint32_t barrier_id, uint32_t every_k) {
  check(every_k >= 1, Errc::argument, "checkpoint interval must be >= 1");
  m_.controller().set_barrier_interceptor([this, barrier_id, every_k](uint32_t id,
                                                                      uint32_t epoch) {
    if (recovering_ || id != barrier_id || (epoch + 1) % every_k != 0) return false;
    // Defer the release until the image is durable.
    m_.world().spawn(m_.rt().endpoint(), [this, id, epoch] {
      take_checkpoint(epoch + 1, 0);
      m_.controller().release_barrier(id);
    });
    return true;
  });
}

std::optional<uint64_t> FaultManager::checkpoint_command() {
  return take_checkpoint(last_known_iteration(), 1);
}

uint64_t FaultManager::last_known_iteration() const {
  uint64_t best = 0;
  for (const auto& [id, thr, epoch] : m_.controller().barrier_states()) {
    best = std::max(best, uint64_t(epoch));
  }
  return best;
}

void FaultManager::recover(const std::vector<NodeId>& failed, RecoveryPolicy policy) {
  auto t0 = std::chrono::steady_clock::now();
  RunReport::Recovery rec;
  rec.policy = policy == RecoveryPolicy::single ? "single" : "multi";
  rec.detect_ms = double(m_.world().now_ms() - failure_seen_ms_);

  std::vector<NodeId> live = m_.live_slaves();
  check(!live.empty(), Errc::unrecoverable, "no healthy slave left");

  // Phase 0 (prepare): every live node tears its workers down and quiesces.
  m_.prepare_local();
  {
    std::vector<uint64_t> reqs;
    {
      RunCtx g(m_.world());
      for (NodeId s : live) {
        reqs.push_back(m_.rt().send_request(EndpointId(s), MsgType::RECOVERY,
                                            [&](Writer& w) { w.u8(0); }));
      }
    }
    m_.rt().await_all(reqs);
  }

  // Phase 1 (drain): fence every live link so no stale frame outlives the
  // dead run segment.
  std::vector<EndpointId> targets;
  targets.push_back(0);
  for (NodeId s : live) targets.push_back(EndpointId(s));
  for (uint32_t sh = 0; sh < m_.config().shard_count(); ++sh)
    targets.push_back(shard_endpoint(sh));
  m_.fence(targets);
  {
    std::vector<uint64_t> reqs;
    {
      RunCtx g(m_.world());
      for (NodeId s : live) {
        reqs.push_back(m_.rt().send_request(EndpointId(s), MsgType::RECOVERY, [&](Writer& w) {
          w.u8(1);
          w.u32(uint32_t(targets.size()));
          for (EndpointId t : targets) w.u32(t);
        }));
      }
    }
    m_.rt().await_all(reqs);
  }

  // Phase 2 (commit): reset protocol state; adopt dead endpoints round-robin
  // over the healthy slaves so the watcher mapping keeps working.
  std::map<NodeId, std::vector<EndpointId>> adopts;
  {
    size_t i = 0;
    for (NodeId d : failed) adopts[live[i++ % live.size()]].push_back(EndpointId(d));
  }
  m_.recovery_commit(adopts.count(0) ? adopts[0] : std::vector<EndpointId>{});
  {
    std::vector<uint64_t> reqs;
    {
      RunCtx g(m_.world());
      for (NodeId s : live) {
        auto& list = adopts[s];
        reqs.push_back(m_.rt().send_request(EndpointId(s), MsgType::RECOVERY, [&](Writer& w) {
          w.u8(2);
          w.u32(uint32_t(list.size()));
          for (EndpointId a : list) w.u32(a);
        }));
      }
    }
    m_.rt().await_all(reqs);
  }

  // Restore the latest image.
  auto image = load_latest(m_.config().checkpoint_dir);
  check(image.has_value(), Errc::unrecoverable, "no valid checkpoint image");
  m_.kv().restore_all(image->store);
  m_.controller().restore(image->barriers, image->semaphores);
  m_.accum_controller().restore(image->accums);
  std::map<uint32_t, uint32_t> bases;
  for (const auto& a : image->accums) {
    bases[a.accum_id] = m_.controller().barrier(a.barrier_id).epoch;
  }
  m_.accum_controller().rebroadcast(bases);
  next_id_ = image->id + 1;

  // The allocator counter was rewound with the store; records allocated
  // after the image keep their ids, so push the counter past them.
  auto table = m_.thread_table();
  int64_t max_oid = 0;
  for (const auto& [oid, info] : table) max_oid = std::max<int64_t>(max_oid, oid);
  int64_t have = m_.shm().allocated_count();
  if (max_oid > have) m_.dsm().atomic_inc(compose_addr(0, m_.catalog().alloc_counter_fid(),
                                                       m_.catalog().split_x()),
                                          max_oid - have);

  // Mark threads of dead nodes failed (observable), then respawn every
  // incomplete thread from the checkpoint.
  std::set<NodeId> dead_set(failed.begin(), failed.end());
  for (const auto& [oid, info] : table) {
    if (dead_set.count(info.node) && info.state != ThreadState::completed) {
      m_.dsm().write_word(compose_addr(oid, 0, m_.catalog().split_x()),
                          Word(int32_t(ThreadState::failed)));
    }
  }
  rec.restore_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

  size_t rr = 0;
  NodeId single_target = live.front();
  for (const auto& [oid, info] : table) {
    if (info.state == ThreadState::completed) continue;
    NodeId target;
    if (!dead_set.count(info.node)) {
      target = info.node;
    } else if (policy == RecoveryPolicy::single) {
      target = single_target;
      ++rec.replaced_threads;
    } else {
      target = live[rr++ % live.size()];
      ++rec.replaced_threads;
    }
    Bytes payload;
    auto p = image->payloads.find(oid);
    if (p != image->payloads.end()) payload = p->second;
    m_.create_thread_restarted(info.func_id, target, info.param, ObjRef{oid}, payload);
  }
  {
    RunCtx g(m_.world());
    m_.report().recoveries.push_back(rec);
  }
}

}  // namespace step
