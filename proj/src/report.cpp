#include "step/report.hpp"

#include <fstream>
#include <ostream>

namespace step {

void RunReport::print(std::ostream& os) const {
  for (const auto& it : iterations) {
    os << "iter " << it.index << " wall_ms " << it.wall_ms << "\n";
  }
  for (const auto& [link, bytes] : link_bytes) {
    os << "link " << link.first << " " << link.second << " bytes " << bytes << "\n";
  }
  for (const auto& c : checkpoints) {
    os << "checkpoint " << c.id << " iter " << c.iteration << " wall_ms " << c.wall_ms << "\n";
  }
  for (const auto& t : threads) {
    os << "thread " << t.record_oid << (t.recovered ? " recovered" : "") << " load_ms "
       << t.load_ms << " compute_ms " << t.compute_ms << "\n";
  }
  for (const auto& r : recoveries) {
    os << "recovery policy " << r.policy << " replaced " << r.replaced_threads << " detect_ms "
       << r.detect_ms << " restore_ms " << r.restore_ms << " load_ms " << r.load_ms
       << " recompute_ms " << r.recompute_ms << "\n";
  }
  os << "total wall_ms " << total_wall_ms << "\n";
}

void RunReport::write_file(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  check(out.good(), Errc::data, "cannot write report to " + path);
  print(out);
}

}  // namespace step
