// Run metrics emitted as a line-oriented report (see docs/report.md).
#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "step/common.hpp"

namespace step {

struct RunReport {
  struct Iteration {
    uint32_t index;
    double wall_ms;
  };
  struct CheckpointTiming {
    uint64_t id;
    uint64_t iteration;
    double wall_ms;
  };
  struct ThreadTiming {
    uint32_t record_oid;
    double load_ms;
    double compute_ms;
    bool recovered;  // respawned by recovery rather than the initial spawn
  };
  struct Recovery {
    double detect_ms = 0;   // failure detection to recovery start
    double restore_ms = 0;  // store + state restoration
    double load_ms = 0;     // replacement threads: data loading
    double recompute_ms = 0;
    uint32_t replaced_threads = 0;
    std::string policy;
  };

  std::vector<Iteration> iterations;
  std::map<std::pair<EndpointId, EndpointId>, uint64_t> link_bytes;  // simulator only
  std::vector<CheckpointTiming> checkpoints;
  std::vector<ThreadTiming> threads;
  std::vector<Recovery> recoveries;
  double total_wall_ms = 0;

  void print(std::ostream& os) const;
  void write_file(const std::string& path) const;
};

}  // namespace step
