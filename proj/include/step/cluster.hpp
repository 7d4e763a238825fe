// Master/slave runtime: configuration, the init handshake, distributed thread
// creation and lifecycle, heartbeats and shutdown.
//
// One binary serves every role. Entry functions are referenced by a registry
// id (function pointers have no cross-process meaning); registration order and
// shared-data declarations must be identical everywhere, which the handshake
// verifies with digests. Worker threads run only on slaves; the master hosts
// the main thread, the sync controller, the DSM directory for its share of
// blocks, and (socket mode) the store shards.
#pragma once

#include <atomic>
#include <chrono>

#include "step/accum.hpp"
#include "step/report.hpp"
#include "step/shm.hpp"
#include "step/sim.hpp"
#include "step/sync.hpp"

namespace step {

// --- configuration ---------------------------------------------------------------

enum class RecoveryPolicy : uint8_t { single = 0, multi = 1 };

struct ClusterConfig {
  std::string master;                // host:port (socket backend)
  std::vector<std::string> slaves;   // at least one
  std::vector<std::string> stores;   // store shard endpoints; default: one, master-hosted
  DsmMode dsm_mode = DsmMode::coarse;
  uint32_t package_words = 32;
  uint32_t cache_blocks = 1024;
  uint32_t address_split_x = 32;
  uint32_t heartbeat_ms = 500;
  uint32_t failure_timeout_ms = 2500;
  std::string checkpoint_dir;
  uint32_t checkpoint_every = 0;     // iterations between checkpoints; 0 = off
  RecoveryPolicy recovery_policy = RecoveryPolicy::single;
  AccumMode accum_mode = AccumMode::auto_pick;
  uint64_t store_capacity = 0;       // bytes per shard; 0 = unlimited

  uint32_t node_count() const { return 1 + uint32_t(slaves.size()); }
  uint32_t shard_count() const { return stores.empty() ? 1 : uint32_t(stores.size()); }

  static ClusterConfig parse_file(const std::string& path);
  static ClusterConfig parse_text(const std::string& text, const std::string& origin = "config");
  std::string serialize() const;
  void validate() const;

  DsmConfig dsm_config() const {
    return DsmConfig{dsm_mode, address_split_x, package_words, cache_blocks, node_count()};
  }
};

// Store shards get endpoint ids above every node id.
inline EndpointId shard_endpoint(uint32_t shard_index) { return 1u << 16 | shard_index; }

// --- app plumbing ------------------------------------------------------------------

class Worker;

// Per-node storage for the handles an app declares (globals, layouts).
struct AppDecls {
  virtual ~AppDecls() = default;
};

class EntryRegistry {
 public:
  using EntryFn = std::function<void(Worker&)>;

  uint32_t add(const std::string& name, EntryFn fn);
  uint32_t id_of(const std::string& name) const;
  const EntryFn& fn(uint32_t id) const;
  uint64_t digest() const;

 private:
  std::vector<std::pair<std::string, EntryFn>> entries_;
};

// User hook carrying extra per-thread state across checkpoint/recovery.
class Checkpoint {
 public:
  virtual ~Checkpoint() = default;
  virtual Bytes do_checkpoint() = 0;
  virtual void do_restart(const Bytes& saved) = 0;
};

// In-process barrier among the workers of one node (no wire traffic).
class LocalBarrier {
 public:
  LocalBarrier(World& w, uint32_t count) : world_(w), count_(count) {}
  void enter();

 private:
  World& world_;
  uint32_t count_;
  uint32_t arrived_ = 0;
  uint32_t epoch_ = 0;
};

enum class ThreadState : int32_t { created = 0, running = 1, completed = 2, failed = 3 };

struct ThreadHandle {
  ObjRef record;
};

class ClusterNode;
class FaultManager;

// Context handed to entry functions (and, in master form, to the main thread).
class Worker {
 public:
  Worker(ClusterNode& node, uint32_t param, uint32_t ordinal, ObjRef record);

  NodeId node_id() const;
  uint32_t param() const { return param_; }
  uint32_t ordinal() const { return ordinal_; }  // participant index == tid
  ObjRef record() const { return record_; }

  SharedMem& shm();
  DsmNode& dsm();
  SyncClient& sync();
  AccumService& accum();
  ClusterNode& cluster() { return node_; }
  template <typename T>
  T* decls();

  // fault integration
  bool restarted() const { return !restart_payload_.empty() || restarted_; }
  const Bytes& restart_payload() const { return restart_payload_; }
  void set_checkpoint(Checkpoint* hook);
  void maybe_restart(Checkpoint* hook);  // set + do_restart if a payload exists

  // node-local coordination
  LocalBarrier& local_barrier(const std::string& name, uint32_t count);
  // Zero-initialized shared buffer; second = true for the creating caller.
  std::pair<void*, bool> node_scratch(const std::string& name, size_t bytes);

  // timing reported with THREAD_DONE
  void mark_load_done();

  Bytes restart_payload_;
  bool restarted_ = false;
  std::chrono::steady_clock::time_point started_;
  double load_ms_ = 0;

 private:
  ClusterNode& node_;
  uint32_t param_;
  uint32_t ordinal_;
  ObjRef record_;
};

struct AppSpec {
  std::string name;
  // Declares shared variables/classes; same order on every node.
  std::function<std::unique_ptr<AppDecls>(Catalog&, const std::vector<std::string>& args)> declare;
  // Registers entry functions; runs for every app at node construction.
  std::function<void(EntryRegistry&)> register_entries;
};

// --- the per-node stack --------------------------------------------------------------

class ClusterNode {
 public:
  ClusterNode(World& world, NodeId id, const ClusterConfig& cfg);
  ~ClusterNode();

  NodeId id() const { return id_; }
  bool is_master() const { return id_ == 0; }
  World& world() { return world_; }
  NodeRuntime& rt() { return rt_; }
  const ClusterConfig& config() const { return cfg_; }

  Catalog& catalog() { return catalog_; }
  EntryRegistry& registry() { return registry_; }
  KvClient& kv() { return *kv_; }
  DsmNode& dsm() { return *dsm_; }
  SharedMem& shm() { return *shm_; }
  SyncClient& sync() { return *sync_; }
  AccumService& accum() { return *accum_; }
  SyncController& controller();          // master only
  AccumController& accum_controller();   // master only
  FaultManager& fault();                 // master only
  AppDecls* decls() { return decls_.get(); }

  // Declares the selected app (catalog freeze happens afterwards).
  void apply_app(const AppSpec& app, const std::vector<std::string>& args);
  // Master: the app identity broadcast in CONFIG. Slave (socket mode): how a
  // CONFIG-announced app name is resolved to declarations.
  void set_app_identity(const std::string& name, std::vector<std::string> args);
  void set_app_resolver(std::function<const AppSpec*(const std::string&)> f);
  const std::vector<std::string>& app_args() const { return app_args_; }

  // --- master-side cluster management (task context) ---
  void master_init();  // handshake with every slave, digest checks
  ThreadHandle create_thread(uint32_t func_id, NodeId node, uint32_t param);
  ThreadHandle create_thread_restarted(uint32_t func_id, NodeId node, uint32_t param,
                                       ObjRef record, const Bytes& payload);
  ThreadState get_state(const ThreadHandle& h);
  void wait_all_threads();
  void close_cluster();
  std::vector<NodeId> detect_failures() const;
  std::vector<NodeId> live_slaves() const;

  // --- slave side ---
  void slave_start();  // begins heartbeats (socket mode: after CONFIG applied)
  bool shutdown_received() const { return shutdown_; }

  // fault-module plumbing (both sides)
  void prepare_local();   // abort workers, quiesce, re-arm the request path
  void fence(const std::vector<EndpointId>& targets);
  void recovery_commit(const std::vector<EndpointId>& adopt);
  void mark_unrecoverable(const std::string& why);
  void abort_workers();
  size_t live_worker_count() const { return live_workers_; }
  std::map<uint32_t, Checkpoint*> worker_hooks();  // record oid -> hook
  void set_pause(bool pausing);
  bool paused_quiescent() const;
  void pause_point();  // called from DSM op boundaries

  RunReport& report() { return report_; }
  // master bookkeeping of every thread record
  struct ThreadInfo {
    uint32_t oid;
    NodeId node;
    uint32_t func_id;
    uint32_t param;
    ThreadState state;
    bool recovered = false;
  };
  const std::map<uint32_t, ThreadInfo>& thread_table() const { return threads_; }
  void override_thread_table(const std::vector<ThreadInfo>& infos);

  std::function<void(const std::vector<NodeId>&)> on_failure;  // set by FaultManager

 private:
  friend class Worker;
  void install_handlers();
  void on_hello(EndpointId src, Reader& r);
  void on_config(EndpointId src, Reader& r);
  void on_create_thread(EndpointId src, Reader& r);
  void on_thread_done(EndpointId src, Reader& r);
  void on_heartbeat(EndpointId src, Reader& r);
  void on_shutdown(EndpointId src, Reader& r);
  void on_checkpoint_cmd(EndpointId src, Reader& r);
  void on_recovery(EndpointId src, Reader& r);
  void on_resume(EndpointId src, Reader& r);
  Bytes hook_payloads();
  void spawn_worker(uint32_t oid, uint32_t func_id, uint32_t param, bool restarted,
                    Bytes payload);
  void cleanup_worker(uint32_t task_id, uint32_t oid);
  void start_heartbeat();
  void arm_failure_check();

  World& world_;
  NodeId id_;
  ClusterConfig cfg_;
  NodeRuntime rt_;
  Catalog catalog_;
  EntryRegistry registry_;
  std::unique_ptr<KvClient> kv_;
  std::unique_ptr<DsmNode> dsm_;
  std::unique_ptr<SharedMem> shm_;
  std::unique_ptr<SyncClient> sync_;
  std::unique_ptr<AccumService> accum_;
  std::unique_ptr<SyncController> controller_;
  std::unique_ptr<AccumController> accum_ctl_;
  std::unique_ptr<FaultManager> fault_;
  std::unique_ptr<AppDecls> decls_;
  const ClassLayout* dthread_layout_ = nullptr;
  std::string app_name_;
  std::vector<std::string> app_args_;
  std::function<const AppSpec*(const std::string&)> app_resolver_;
  std::vector<std::string> worker_failures_;

  // master state
  std::map<uint32_t, ThreadInfo> threads_;
  std::map<NodeId, uint64_t> last_heartbeat_;
  std::set<NodeId> dead_;
  bool ready_ = false;
  uint64_t failure_timer_ = 0;

  // slave state
  bool shutdown_ = false;
  uint64_t heartbeat_timer_ = 0;
  uint32_t heartbeat_seq_ = 0;

  // worker bookkeeping (slave side)
  size_t live_workers_ = 0;
  std::map<uint32_t, Worker*> active_workers_;        // task id -> ctx
  std::map<uint32_t, Checkpoint*> hooks_;             // record oid -> hook
  bool pausing_ = false;
  size_t paused_ = 0;
  std::map<std::string, std::unique_ptr<LocalBarrier>> local_barriers_;
  std::map<std::string, std::vector<uint8_t>> scratch_;

  RunReport report_;
};

template <typename T>
T* Worker::decls() {
  return dynamic_cast<T*>(node_.decls());
}

// --- simulator bring-up ---------------------------------------------------------------

class SimCluster {
 public:
  SimCluster(const ClusterConfig& cfg, const AppSpec* app, std::vector<std::string> app_args,
             uint64_t seed = 1);
  ~SimCluster();

  SimWorld& world() { return *world_; }
  ClusterNode& node(NodeId id) { return *nodes_[id]; }
  ClusterNode& master() { return *nodes_[0]; }

  // Spawns the master main function and drives the world to completion.
  void run_main(std::function<void(ClusterNode&)> fn);
  // Lower-level: spawn without driving (tests drive the world themselves).
  void spawn_main(std::function<void(ClusterNode&)> fn);

 private:
  std::unique_ptr<SimWorld> world_;
  std::vector<std::unique_ptr<NodeRuntime>> shard_rts_;
  std::vector<std::unique_ptr<KvService>> shards_;
  std::vector<std::unique_ptr<ClusterNode>> nodes_;
};

}  // namespace step
