#include "step/apps/dataio.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace step::apps {

namespace {

std::ifstream open_or_fail(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), Errc::data, "cannot read " + path);
  return in;
}

std::vector<double> parse_row(const std::string& line, const std::string& path) {
  std::vector<double> row;
  const char* p = line.data();
  const char* end = p + line.size();
  while (p < end) {
    while (p < end && (*p == ' ' || *p == '\t' || *p == '\r')) ++p;
    if (p >= end) break;
    double v;
    auto [next, ec] = std::from_chars(p, end, v);
    check(ec == std::errc(), Errc::data, path + ": malformed number in '" + line + "'");
    row.push_back(v);
    p = next;
  }
  return row;
}

}  // namespace

std::vector<std::vector<double>> read_rows(const std::string& path) {
  return read_row_range(path, 0, size_t(-1));
}

std::vector<std::vector<double>> read_first_rows(const std::string& path, size_t limit) {
  return read_row_range(path, 0, limit);
}

std::vector<std::vector<double>> read_row_range(const std::string& path, size_t lo, size_t hi) {
  auto in = open_or_fail(path);
  std::vector<std::vector<double>> rows;
  std::string line;
  size_t index = 0;
  while (index < hi && std::getline(in, line)) {
    if (line.empty()) continue;
    if (index >= lo) rows.push_back(parse_row(line, path));
    ++index;
  }
  return rows;
}

size_t count_rows(const std::string& path) {
  auto in = open_or_fail(path);
  size_t n = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) ++n;
  }
  return n;
}

std::vector<Triplet> read_triplets(const std::string& path) {
  auto in = open_or_fail(path);
  std::vector<Triplet> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto row = parse_row(line, path);
    check(row.size() == 3, Errc::data, path + ": triplet rows need 'i j value'");
    out.push_back(Triplet{uint32_t(row[0]), uint32_t(row[1]), row[2]});
  }
  return out;
}

EdgeList read_edges(const std::string& path) {
  auto in = open_or_fail(path);
  EdgeList g;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto row = parse_row(line, path);
    check(row.size() == 2, Errc::data, path + ": edge rows need 'src dst'");
    uint32_t s = uint32_t(row[0]), d = uint32_t(row[1]);
    g.edges.emplace_back(s, d);
    g.vertices = std::max(g.vertices, std::max(s, d) + 1);
  }
  return g;
}

std::string fmt_f32(float v) {
  char buf[64];
  snprintf(buf, sizeof buf, "%.9g", double(v));
  return buf;
}

std::string fmt_f64(double v) {
  char buf[64];
  snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_rows(const std::string& path, const std::vector<std::vector<double>>& rows) {
  std::ofstream out(path, std::ios::trunc);
  check(out.good(), Errc::data, "cannot write " + path);
  for (const auto& row : rows) {
    for (size_t i = 0; i < row.size(); ++i) {
      if (i) out << ' ';
      out << fmt_f64(row[i]);
    }
    out << '\n';
  }
  check(out.good(), Errc::data, "short write to " + path);
}

void write_float_column(const std::string& path, const std::vector<float>& values) {
  std::ofstream out(path, std::ios::trunc);
  check(out.good(), Errc::data, "cannot write " + path);
  for (float v : values) out << fmt_f32(v) << '\n';
  check(out.good(), Errc::data, "short write to " + path);
}

void write_double_column(const std::string& path, const std::vector<double>& values) {
  std::ofstream out(path, std::ios::trunc);
  check(out.good(), Errc::data, "cannot write " + path);
  for (double v : values) out << fmt_f64(v) << '\n';
  check(out.good(), Errc::data, "short write to " + path);
}

void write_double_matrix(const std::string& path, const std::vector<double>& values, size_t rows,
                         size_t cols) {
  check(values.size() == rows * cols, Errc::argument, "matrix shape mismatch");
  std::ofstream out(path, std::ios::trunc);
  check(out.good(), Errc::data, "cannot write " + path);
  for (size_t r = 0; r < rows; ++r) {
    for (size_t c = 0; c < cols; ++c) {
      if (c) out << ' ';
      out << fmt_f64(values[r * cols + c]);
    }
    out << '\n';
  }
  check(out.good(), Errc::data, "short write to " + path);
}

}  // namespace step::apps
