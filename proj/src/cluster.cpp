#include "step/cluster.hpp"

#include <fstream>
#include <sstream>

#include "step/fault.hpp"
#include "step/sim.hpp"

namespace step {

// --- config ------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

uint64_t parse_uint(const std::string& v, const std::string& where) {
  try {
    size_t pos = 0;
    uint64_t x = std::stoull(v, &pos);
    check(pos == v.size(), Errc::config, where + ": malformed number '" + v + "'");
    return x;
  } catch (const Error&) {
    throw;
  } catch (...) {
    fail(Errc::config, where + ": malformed number '" + v + "'");
  }
}

}  // namespace

ClusterConfig ClusterConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), Errc::init, "cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_text(ss.str(), path);
}

ClusterConfig ClusterConfig::parse_text(const std::string& text, const std::string& origin) {
  ClusterConfig cfg;
  std::set<std::string> seen;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    std::string where = origin + ":" + std::to_string(lineno);
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    check(eq != std::string::npos, Errc::config, where + ": expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    check(seen.insert(key).second, Errc::config, where + ": duplicate key '" + key + "'");
    if (key == "master") {
      cfg.master = value;
    } else if (key == "slaves") {
      cfg.slaves = split_list(value);
    } else if (key == "stores") {
      cfg.stores = split_list(value);
    } else if (key == "dsm_mode") {
      if (value == "fine")
        cfg.dsm_mode = DsmMode::fine;
      else if (value == "coarse")
        cfg.dsm_mode = DsmMode::coarse;
      else
        fail(Errc::config, where + ": dsm_mode must be fine or coarse");
    } else if (key == "package_words") {
      cfg.package_words = uint32_t(parse_uint(value, where));
    } else if (key == "cache_blocks") {
      cfg.cache_blocks = uint32_t(parse_uint(value, where));
    } else if (key == "address_split_x") {
      cfg.address_split_x = uint32_t(parse_uint(value, where));
    } else if (key == "heartbeat_ms") {
      cfg.heartbeat_ms = uint32_t(parse_uint(value, where));
    } else if (key == "failure_timeout_ms") {
      cfg.failure_timeout_ms = uint32_t(parse_uint(value, where));
    } else if (key == "checkpoint_dir") {
      cfg.checkpoint_dir = value;
    } else if (key == "checkpoint_every") {
      cfg.checkpoint_every = uint32_t(parse_uint(value, where));
    } else if (key == "recovery_policy") {
      if (value == "single")
        cfg.recovery_policy = RecoveryPolicy::single;
      else if (value == "multi")
        cfg.recovery_policy = RecoveryPolicy::multi;
      else
        fail(Errc::config, where + ": recovery_policy must be single or multi");
    } else if (key == "accum_mode") {
      cfg.accum_mode = parse_accum_mode(value);
    } else if (key == "store_capacity") {
      cfg.store_capacity = parse_uint(value, where);
    } else {
      fail(Errc::config, where + ": unknown key '" + key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

void ClusterConfig::validate() const {
  check(!slaves.empty(), Errc::config, "at least one slave required");
  check(heartbeat_ms > 0 && failure_timeout_ms > 0, Errc::config,
        "heartbeat intervals must be positive");
  dsm_config().validate();
}

std::string ClusterConfig::serialize() const {
  std::ostringstream os;
  auto join = [](const std::vector<std::string>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
    return s;
  };
  os << "master = " << master << "\n";
  os << "slaves = " << join(slaves) << "\n";
  if (!stores.empty()) os << "stores = " << join(stores) << "\n";
  os << "dsm_mode = " << (dsm_mode == DsmMode::fine ? "fine" : "coarse") << "\n";
  os << "package_words = " << package_words << "\n";
  os << "cache_blocks = " << cache_blocks << "\n";
  os << "address_split_x = " << address_split_x << "\n";
  os << "heartbeat_ms = " << heartbeat_ms << "\n";
  os << "failure_timeout_ms = " << failure_timeout_ms << "\n";
  if (!checkpoint_dir.empty()) os << "checkpoint_dir = " << checkpoint_dir << "\n";
  os << "checkpoint_every = " << checkpoint_every << "\n";
  os << "recovery_policy = " << (recovery_policy == RecoveryPolicy::single ? "single" : "multi")
     << "\n";
  os << "accum_mode = " << accum_mode_name(accum_mode) << "\n";
  os << "store_capacity = " << store_capacity << "\n";
  return os.str();
}

// --- registry ------------------------------------------------------------------------

uint32_t EntryRegistry::add(const std::string& name, EntryFn fn) {
  for (const auto& [n, f] : entries_) {
    check(n != name, Errc::layout, "duplicate entry function " + name);
  }
  entries_.emplace_back(name, std::move(fn));
  return uint32_t(entries_.size() - 1);
}

uint32_t EntryRegistry::id_of(const std::string& name) const {
  for (uint32_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first == name) return i;
  }
  fail(Errc::argument, "unknown entry function " + name);
}

const EntryRegistry::EntryFn& EntryRegistry::fn(uint32_t id) const {
  check(id < entries_.size(), Errc::argument, "unknown entry function id " + std::to_string(id));
  return entries_[id].second;
}

uint64_t EntryRegistry::digest() const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [n, f] : entries_) h = fnv1a_str(n, h);
  return h;
}

// --- local coordination -----------------------------------------------------------------

void LocalBarrier::enter() {
  RunCtx g(world_);
  uint32_t my_epoch = epoch_;
  if (++arrived_ == count_) {
    arrived_ = 0;
    ++epoch_;
    world_.wake();
    return;
  }
  world_.wait([&] { return epoch_ != my_epoch; });
}

// --- Worker ---------------------------------------------------------------------------

Worker::Worker(ClusterNode& node, uint32_t param, uint32_t ordinal, ObjRef record)
    : started_(std::chrono::steady_clock::now()),
      node_(node),
      param_(param),
      ordinal_(ordinal),
      record_(record) {}

NodeId Worker::node_id() const { return node_.id(); }
SharedMem& Worker::shm() { return node_.shm(); }
DsmNode& Worker::dsm() { return node_.dsm(); }
SyncClient& Worker::sync() { return node_.sync(); }
AccumService& Worker::accum() { return node_.accum(); }

void Worker::set_checkpoint(Checkpoint* hook) {
  RunCtx g(node_.world());
  node_.hooks_[record_.object_id] = hook;
}

void Worker::maybe_restart(Checkpoint* hook) {
  set_checkpoint(hook);
  if (!restart_payload_.empty()) hook->do_restart(restart_payload_);
}

LocalBarrier& Worker::local_barrier(const std::string& name, uint32_t count) {
  RunCtx g(node_.world());
  auto& slot = node_.local_barriers_[name];
  if (!slot) slot = std::make_unique<LocalBarrier>(node_.world(), count);
  return *slot;
}

std::pair<void*, bool> Worker::node_scratch(const std::string& name, size_t bytes) {
  RunCtx g(node_.world());
  auto it = node_.scratch_.find(name);
  if (it != node_.scratch_.end()) return {it->second.data(), false};
  auto& buf = node_.scratch_[name];
  buf.assign(bytes, 0);
  return {buf.data(), true};
}

void Worker::mark_load_done() {
  load_ms_ = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                       started_)
                 .count();
}

// --- ClusterNode -------------------------------------------------------------------------

ClusterNode::ClusterNode(World& world, NodeId id, const ClusterConfig& cfg)
    : world_(world), id_(id), cfg_(cfg), rt_(world, EndpointId(id), id),
      catalog_(cfg.address_split_x) {
  cfg_.validate();
  rt_.attach();
  std::vector<EndpointId> shard_eps;
  for (uint32_t s = 0; s < cfg_.shard_count(); ++s) shard_eps.push_back(shard_endpoint(s));
  kv_ = std::make_unique<KvClient>(rt_, shard_eps);
  dsm_ = std::make_unique<DsmNode>(rt_, *kv_, cfg_.dsm_config());
  dsm_->set_op_hook([this] { pause_point(); });
  shm_ = std::make_unique<SharedMem>(*dsm_, catalog_);
  sync_ = std::make_unique<SyncClient>(rt_, EndpointId(0));
  accum_ = std::make_unique<AccumService>(rt_, *dsm_, *sync_);
  if (is_master()) {
    controller_ = std::make_unique<SyncController>(rt_);
    std::vector<EndpointId> node_eps;
    for (NodeId n = 0; n < cfg_.node_count(); ++n) node_eps.push_back(EndpointId(n));
    accum_ctl_ = std::make_unique<AccumController>(rt_, *controller_, node_eps);
    fault_ = std::make_unique<FaultManager>(*this);
  }
  dthread_layout_ = &catalog_.define_class("DThread")
                         .field("state", ElemKind::i32)
                         .field("node_id", ElemKind::i32)
                         .field("func_id", ElemKind::i32)
                         .field("param", ElemKind::i32);
  install_handlers();
}

ClusterNode::~ClusterNode() = default;

SyncController& ClusterNode::controller() {
  check(controller_ != nullptr, Errc::role, "sync controller lives on the master");
  return *controller_;
}

AccumController& ClusterNode::accum_controller() {
  check(accum_ctl_ != nullptr, Errc::role, "accumulator controller lives on the master");
  return *accum_ctl_;
}

FaultManager& ClusterNode::fault() {
  check(fault_ != nullptr, Errc::role, "fault manager lives on the master");
  return *fault_;
}

void ClusterNode::apply_app(const AppSpec& app, const std::vector<std::string>& args) {
  check(decls_ == nullptr, Errc::init, "app already applied");
  if (app.declare) decls_ = app.declare(catalog_, args);
  catalog_.freeze();
}

void ClusterNode::install_handlers() {
  rt_.set_handler(MsgType::HELLO, [this](EndpointId s, Reader& r) { on_hello(s, r); });
  rt_.set_handler(MsgType::CONFIG, [this](EndpointId s, Reader& r) { on_config(s, r); });
  rt_.set_handler(MsgType::CREATE_THREAD,
                  [this](EndpointId s, Reader& r) { on_create_thread(s, r); });
  rt_.set_handler(MsgType::THREAD_DONE, [this](EndpointId s, Reader& r) { on_thread_done(s, r); });
  rt_.set_handler(MsgType::HEARTBEAT, [this](EndpointId s, Reader& r) { on_heartbeat(s, r); });
  rt_.set_handler(MsgType::SHUTDOWN, [this](EndpointId s, Reader& r) { on_shutdown(s, r); });
  rt_.set_handler(MsgType::CHECKPOINT_CMD,
                  [this](EndpointId s, Reader& r) { on_checkpoint_cmd(s, r); });
  rt_.set_handler(MsgType::RECOVERY, [this](EndpointId s, Reader& r) { on_recovery(s, r); });
  rt_.set_handler(MsgType::RESUME, [this](EndpointId s, Reader& r) { on_resume(s, r); });
}

void ClusterNode::on_hello(EndpointId src, Reader& r) {
  uint64_t reqid = r.u64();
  uint32_t assigned = r.u32();
  uint32_t n = r.u32();
  check(assigned == id_ && n == cfg_.node_count(), Errc::protocol, "hello id mismatch");
  rt_.reply_ok(src, reqid, [&](Writer& w) { w.u64(registry_.digest()); });
}

void ClusterNode::on_config(EndpointId src, Reader& r) {
  uint64_t reqid = r.u64();
  std::string serialized = r.str();
  std::string app_name = r.str();
  uint32_t nargs = r.u32();
  std::vector<std::string> args(nargs);
  for (auto& a : args) a = r.str();
  Errc status = Errc::ok;
  if (serialized != cfg_.serialize()) status = Errc::digest_mismatch;
  if (status == Errc::ok) {
    app_name_ = app_name;
    app_args_ = args;
  }
  if (status == Errc::ok && decls_ == nullptr && app_resolver_) {
    const AppSpec* app = app_resolver_(app_name);
    if (app) {
      apply_app(*app, args);
    } else {
      status = Errc::argument;
    }
  }
  if (status == Errc::ok) {
    ready_ = true;
    slave_start();
  }
  rt_.reply(src, MsgType::REPLY, reqid, status,
            [&](Writer& w) { w.u64(catalog_.digest()); });
}

void ClusterNode::master_init() {
  check(is_master(), Errc::role, "master_init on a slave");
  uint64_t my_reg = registry_.digest();
  uint64_t my_cat = catalog_.digest();
  for (NodeId s = 1; s < cfg_.node_count(); ++s) {
    Bytes b;
    try {
      b = rt_.call(EndpointId(s), MsgType::HELLO, [&](Writer& w) {
        w.u32(s);
        w.u32(cfg_.node_count());
      });
    } catch (const Error& e) {
      fail(Errc::init, "slave " + std::to_string(s) + " unreachable: " + e.what());
    }
    check(Reader(b).u64() == my_reg, Errc::digest_mismatch,
          "slave " + std::to_string(s) + " runs an incompatible binary (entry registry)");
  }
  for (NodeId s = 1; s < cfg_.node_count(); ++s) {
    Bytes b = rt_.call(EndpointId(s), MsgType::CONFIG, [&](Writer& w) {
      w.str(cfg_.serialize());
      w.str(app_name_);
      w.u32(uint32_t(app_args_.size()));
      for (const auto& a : app_args_) w.str(a);
    });
    check(Reader(b).u64() == my_cat, Errc::digest_mismatch,
          "slave " + std::to_string(s) + " declares different shared data");
  }
  {
    RunCtx g(world_);
    ready_ = true;
    for (NodeId s = 1; s < cfg_.node_count(); ++s) last_heartbeat_[s] = world_.now_ms();
    arm_failure_check();
  }
}

void ClusterNode::set_app_identity(const std::string& name, std::vector<std::string> args) {
  app_name_ = name;
  app_args_ = std::move(args);
}

void ClusterNode::set_app_resolver(std::function<const AppSpec*(const std::string&)> f) {
  app_resolver_ = std::move(f);
}

ThreadHandle ClusterNode::create_thread(uint32_t func_id, NodeId node, uint32_t param) {
  check(is_master(), Errc::role, "create_thread is master-only");
  check(node != 0, Errc::role, "worker threads run on slaves");
  check(node < cfg_.node_count(), Errc::argument, "no such node");
  {
    RunCtx g(world_);
    check(!dead_.count(node), Errc::argument,
          "node " + std::to_string(node) + " has failed");
  }
  registry_.fn(func_id);  // validates the id
  ObjRef rec = shm_->new_object(*dthread_layout_);
  dsm_->write_words(compose_addr(rec.object_id, 0, cfg_.address_split_x),
                    {Word(int32_t(ThreadState::created)), Word(node), Word(func_id),
                     Word(param)});
  {
    RunCtx g(world_);
    threads_[rec.object_id] =
        ThreadInfo{rec.object_id, node, func_id, param, ThreadState::created, false};
  }
  rt_.call(EndpointId(node), MsgType::CREATE_THREAD, [&](Writer& w) {
    w.u32(rec.object_id);
    w.u32(func_id);
    w.u32(param);
    w.u8(0);
    w.bytes({});
  });
  return ThreadHandle{rec};
}

ThreadHandle ClusterNode::create_thread_restarted(uint32_t func_id, NodeId node, uint32_t param,
                                                  ObjRef record, const Bytes& payload) {
  check(is_master(), Errc::role, "create_thread is master-only");
  dsm_->write_words(compose_addr(record.object_id, 0, cfg_.address_split_x),
                    {Word(int32_t(ThreadState::created)), Word(node), Word(func_id),
                     Word(param)});
  {
    RunCtx g(world_);
    threads_[record.object_id] =
        ThreadInfo{record.object_id, node, func_id, param, ThreadState::created, true};
  }
  rt_.call(EndpointId(node), MsgType::CREATE_THREAD, [&](Writer& w) {
    w.u32(record.object_id);
    w.u32(func_id);
    w.u32(param);
    w.u8(1);
    w.bytes(payload);
  });
  return ThreadHandle{record};
}

ThreadState ClusterNode::get_state(const ThreadHandle& h) {
  check(!h.record.null(), Errc::missing_object, "null thread record");
  shm_->allocated_count();  // cheap allocation check happens inside get_field
  int32_t v = shm_->get_field<int32_t>(h.record, *dthread_layout_, "state");
  return ThreadState(v);
}

void ClusterNode::on_create_thread(EndpointId src, Reader& r) {
  uint64_t reqid = r.u64();
  uint32_t oid = r.u32();
  uint32_t func_id = r.u32();
  uint32_t param = r.u32();
  bool restarted = r.u8() != 0;
  Bytes payload = r.bytes();
  spawn_worker(oid, func_id, param, restarted, std::move(payload));
  rt_.reply_ok(src, reqid);
}

void ClusterNode::spawn_worker(uint32_t oid, uint32_t func_id, uint32_t param, bool restarted,
                               Bytes payload) {
  ++live_workers_;
  world_.spawn(rt_.endpoint(), [this, oid, func_id, param, restarted,
                                payload = std::move(payload)]() mutable {
    Worker w(*this, param, param, ObjRef{oid});
    w.restarted_ = restarted;
    w.restart_payload_ = std::move(payload);
    uint32_t task_id = current_task()->task_id;
    {
      RunCtx g(world_);
      active_workers_[task_id] = &w;
    }
    Addr state_addr = compose_addr(oid, 0, cfg_.address_split_x);
    bool ok = true;
    std::string what;
    try {
      dsm_->write_word(state_addr, Word(int32_t(ThreadState::running)));
      registry_.fn(func_id)(w);
      dsm_->write_word(state_addr, Word(int32_t(ThreadState::completed)));
    } catch (const Error& e) {
      ok = false;
      what = e.what();
      if (e.code() == Errc::aborted) {
        cleanup_worker(task_id, oid);
        throw;  // recovery tear-down: no THREAD_DONE
      }
    } catch (const std::exception& e) {
      ok = false;
      what = e.what();
    }
    double total =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - w.started_)
            .count();
    double compute = total - w.load_ms_;
    cleanup_worker(task_id, oid);
    RunCtx g(world_);
    rt_.post(EndpointId(0), MsgType::THREAD_DONE, [&](Writer& wr) {
      wr.u32(oid);
      wr.u8(ok ? 1 : 0);
      wr.f64(w.load_ms_);
      wr.f64(compute);
      wr.str(what);
    });
  });
}

void ClusterNode::cleanup_worker(uint32_t task_id, uint32_t oid) {
  RunCtx g(world_);
  active_workers_.erase(task_id);
  hooks_.erase(oid);
  --live_workers_;
  world_.wake();
}

void ClusterNode::on_thread_done(EndpointId src, Reader& r) {
  (void)src;
  uint32_t oid = r.u32();
  bool ok = r.u8() != 0;
  double load_ms = r.f64();
  double compute_ms = r.f64();
  std::string what = r.str();
  auto it = threads_.find(oid);
  if (it == threads_.end()) return;  // record replaced during recovery
  it->second.state = ok ? ThreadState::completed : ThreadState::failed;
  report_.threads.push_back(RunReport::ThreadTiming{oid, load_ms, compute_ms,
                                                    it->second.recovered});
  if (it->second.recovered && !report_.recoveries.empty()) {
    auto& rec = report_.recoveries.back();
    rec.load_ms = std::max(rec.load_ms, load_ms);
    rec.recompute_ms = std::max(rec.recompute_ms, compute_ms);
  }
  if (!ok && !what.empty()) worker_failures_.push_back(what);
  world_.wake();
}

void ClusterNode::wait_all_threads() {
  check(is_master(), Errc::role, "wait_all_threads is master-only");
  RunCtx g(world_);
  world_.wait([&] {
    for (const auto& [oid, info] : threads_) {
      if (info.state != ThreadState::completed && info.state != ThreadState::failed) return false;
    }
    return true;
  });
  if (!worker_failures_.empty()) {
    fail(Errc::internal, "worker failed: " + worker_failures_.front());
  }
}

void ClusterNode::close_cluster() {
  check(is_master(), Errc::role, "close_cluster can only be invoked by the master");
  if (shutdown_) return;  // idempotent
  shutdown_ = true;
  {
    RunCtx g(world_);
    if (failure_timer_) world_.cancel_timer(failure_timer_);
  }
  std::vector<uint64_t> ids;
  {
    RunCtx g(world_);
    for (NodeId s = 1; s < cfg_.node_count(); ++s) {
      if (dead_.count(s)) continue;
      ids.push_back(rt_.send_request(EndpointId(s), MsgType::SHUTDOWN, {}));
    }
  }
  rt_.await_all(ids);
}

void ClusterNode::on_shutdown(EndpointId src, Reader& r) {
  uint64_t reqid = r.u64();
  shutdown_ = true;
  if (heartbeat_timer_) {
    world_.cancel_timer(heartbeat_timer_);
    heartbeat_timer_ = 0;
  }
  world_.wake();  // socket slaves block on shutdown_received()
  rt_.reply_ok(src, reqid);
}

void ClusterNode::slave_start() {
  if (id_ == 0 || heartbeat_timer_ != 0) return;
  start_heartbeat();
}

void ClusterNode::start_heartbeat() {
  heartbeat_timer_ = world_.add_timer(rt_.endpoint(), cfg_.heartbeat_ms, [this] {
    if (shutdown_) return;
    rt_.post(EndpointId(0), MsgType::HEARTBEAT, [&](Writer& w) {
      w.u32(id_);
      w.u32(heartbeat_seq_++);
    });
    start_heartbeat();
  });
}

void ClusterNode::on_heartbeat(EndpointId src, Reader& r) {
  uint32_t node = r.u32();
  (void)r.u32();  // seq
  (void)src;
  last_heartbeat_[NodeId(node)] = world_.now_ms();
}

void ClusterNode::arm_failure_check() {
  failure_timer_ = world_.add_timer(rt_.endpoint(), cfg_.heartbeat_ms, [this] {
    if (shutdown_) return;
    std::vector<NodeId> newly;
    uint64_t now = world_.now_ms();
    for (NodeId s = 1; s < cfg_.node_count(); ++s) {
      if (dead_.count(s)) continue;
      if (now - last_heartbeat_[s] > cfg_.failure_timeout_ms) newly.push_back(s);
    }
    if (!newly.empty()) {
      for (NodeId s : newly) dead_.insert(s);
      world_.wake();
      if (on_failure) on_failure(newly);
    }
    arm_failure_check();
  });
}

std::vector<NodeId> ClusterNode::detect_failures() const {
  return std::vector<NodeId>(dead_.begin(), dead_.end());
}

std::vector<NodeId> ClusterNode::live_slaves() const {
  std::vector<NodeId> out;
  for (NodeId s = 1; s < cfg_.node_count(); ++s) {
    if (!dead_.count(s)) out.push_back(s);
  }
  return out;
}

void ClusterNode::abort_workers() {
  std::vector<uint32_t> tasks;
  for (const auto& [task_id, w] : active_workers_) tasks.push_back(task_id);
  for (uint32_t t : tasks) world_.abort_task(t);
  rt_.abort_pending();
}

void ClusterNode::prepare_local() {
  {
    RunCtx g(world_);
    abort_workers();
  }
  {
    RunCtx g(world_);
    world_.wait([&] { return live_workers_ == 0 && accum_->active_tasks() == 0; });
    rt_.reset_abort();
  }
}

void ClusterNode::fence(const std::vector<EndpointId>& targets) {
  std::vector<uint64_t> reqs;
  {
    RunCtx g(world_);
    for (EndpointId t : targets) {
      if (t == rt_.endpoint()) continue;
      if (auto* sim = dynamic_cast<SimWorld*>(&world_); sim && sim->endpoint_dead(t)) continue;
      reqs.push_back(rt_.send_request(t, MsgType::FENCE, {}));
    }
  }
  rt_.await_all(reqs);
}

void ClusterNode::recovery_commit(const std::vector<EndpointId>& adopt) {
  RunCtx g(world_);
  dsm_->reset();
  accum_->reset();
  sync_->reset();
  hooks_.clear();
  local_barriers_.clear();
  scratch_.clear();
  pausing_ = false;
  paused_ = 0;
  for (EndpointId a : adopt) rt_.adopt_endpoint(a);
  world_.wake();
}

void ClusterNode::mark_unrecoverable(const std::string& why) {
  RunCtx g(world_);
  worker_failures_.push_back("unrecoverable: " + why);
  for (auto& [oid, info] : threads_) {
    if (info.state != ThreadState::completed) info.state = ThreadState::failed;
  }
  world_.wake();
}

void ClusterNode::on_checkpoint_cmd(EndpointId src, Reader& r) {
  uint64_t reqid = r.u64();
  uint8_t mode = r.u8();
  if (mode == 0) {
    // Barrier checkpoint: workers are already parked at the barrier.
    Bytes body = hook_payloads();
    rt_.reply_ok(src, reqid, [&](Writer& w) { w.raw(body.data(), body.size()); });
    return;
  }
  // Virtual barrier: stop every worker at its next DSM-operation boundary.
  set_pause(true);
  world_.spawn(rt_.endpoint(), [this, src, reqid] {
    {
      RunCtx g(world_);
      world_.wait([&] { return paused_quiescent(); });
    }
    Bytes body;
    {
      RunCtx g(world_);
      body = hook_payloads();
      rt_.reply_ok(src, reqid, [&](Writer& w) { w.raw(body.data(), body.size()); });
    }
  });
}

Bytes ClusterNode::hook_payloads() {
  Writer w;
  w.u32(uint32_t(hooks_.size()));
  for (auto& [oid, hook] : hooks_) {
    w.u32(oid);
    w.bytes(hook->do_checkpoint());
  }
  return w.take();
}

void ClusterNode::on_resume(EndpointId src, Reader& r) {
  uint64_t reqid = r.u64();
  set_pause(false);
  rt_.reply_ok(src, reqid);
}

void ClusterNode::on_recovery(EndpointId src, Reader& r) {
  uint64_t reqid = r.u64();
  uint8_t phase = r.u8();
  if (phase == 0) {
    world_.spawn(rt_.endpoint(), [this, src, reqid] {
      prepare_local();
      RunCtx g(world_);
      rt_.reply_ok(src, reqid);
    });
    return;
  }
  if (phase == 1) {
    std::vector<EndpointId> targets(r.u32());
    for (auto& t : targets) t = r.u32();
    world_.spawn(rt_.endpoint(), [this, src, reqid, targets] {
      fence(targets);
      RunCtx g(world_);
      rt_.reply_ok(src, reqid);
    });
    return;
  }
  std::vector<EndpointId> adopt(r.u32());
  for (auto& a : adopt) a = r.u32();
  recovery_commit(adopt);
  rt_.reply_ok(src, reqid);
}

std::map<uint32_t, Checkpoint*> ClusterNode::worker_hooks() { return hooks_; }

void ClusterNode::set_pause(bool pausing) {
  pausing_ = pausing;
  world_.wake();
}

bool ClusterNode::paused_quiescent() const { return pausing_ && paused_ >= live_workers_; }

void ClusterNode::pause_point() {
  TaskCtx* t = current_task();
  if (!t) return;
  RunCtx g(world_);
  if (!pausing_ || !active_workers_.count(t->task_id)) return;
  ++paused_;
  world_.wake();
  world_.wait([&] { return !pausing_; });
  --paused_;
}

void ClusterNode::override_thread_table(const std::vector<ThreadInfo>& infos) {
  threads_.clear();
  for (const auto& i : infos) threads_[i.oid] = i;
}

// --- SimCluster -----------------------------------------------------------------------------

SimCluster::SimCluster(const ClusterConfig& cfg, const AppSpec* app,
                       std::vector<std::string> app_args, uint64_t seed) {
  world_ = std::make_unique<SimWorld>(seed);
  for (uint32_t s = 0; s < cfg.shard_count(); ++s) {
    shard_rts_.push_back(std::make_unique<NodeRuntime>(*world_, shard_endpoint(s), 0));
    shard_rts_.back()->attach();
    shards_.push_back(std::make_unique<KvService>(*shard_rts_.back(), cfg.store_capacity));
  }
  for (NodeId id = 0; id < cfg.node_count(); ++id) {
    nodes_.push_back(std::make_unique<ClusterNode>(*world_, id, cfg));
    if (app) {
      if (app->register_entries) app->register_entries(nodes_.back()->registry());
      nodes_.back()->apply_app(*app, app_args);
    } else {
      nodes_.back()->apply_app(AppSpec{}, {});
    }
  }
  master().set_app_identity(app ? app->name : "", app_args);
  // The handshake still runs over messages so both backends take one path.
  std::exception_ptr err;
  bool done = false;
  world_->spawn(0, [&] {
    try {
      master().master_init();
    } catch (...) {
      err = std::current_exception();
    }
    done = true;
  });
  while (!done && world_->step() != SimWorld::kStepNone) {
  }
  if (err) std::rethrow_exception(err);
  check(done, Errc::init, "handshake never completed");
}

SimCluster::~SimCluster() = default;

void SimCluster::spawn_main(std::function<void(ClusterNode&)> fn) {
  world_->spawn(0, [this, fn = std::move(fn)] { fn(master()); });
}

void SimCluster::run_main(std::function<void(ClusterNode&)> fn) {
  bool done = false;
  std::exception_ptr err;
  auto t0 = std::chrono::steady_clock::now();
  world_->spawn(0, [&, fn = std::move(fn)] {
    try {
      fn(master());
    } catch (...) {
      err = std::current_exception();
    }
    done = true;
  });
  uint64_t timer_only = 0;
  while (!done) {
    SimWorld::StepKind k = world_->step();
    if (k == SimWorld::kStepNone) break;
    if (k == SimWorld::kStepTask) {
      timer_only = 0;
    } else if (++timer_only > 5'000'000) {
      fail(Errc::internal, "simulation stalled: heartbeat-only progress with no task runnable");
    }
  }
  if (err) std::rethrow_exception(err);
  check(done, Errc::internal, "main never completed: cluster deadlocked");
  // Drain shutdown traffic; bounded in case stray timers survive.
  for (int i = 0; i < 100000 && world_->step() != SimWorld::kStepNone; ++i) {
  }
  auto& rep = master().report();
  rep.total_wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  for (NodeId a = 0; a < master().config().node_count(); ++a) {
    for (NodeId b = 0; b < master().config().node_count(); ++b) {
      uint64_t n = world_->bytes_sent(EndpointId(a), EndpointId(b));
      if (n) rep.link_bytes[{a, b}] = n;
    }
  }
}

}  // namespace step
