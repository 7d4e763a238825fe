// Text dataset formats: rows of space-separated floats (label first for
// classification data), `i j value` triplets for matrices, `src dst` edge
// lists for graphs. Floats are printed with enough digits to re-parse
// bit-exactly.
#pragma once

#include <string>
#include <vector>

#include "step/common.hpp"

namespace step::apps {

std::vector<std::vector<double>> read_rows(const std::string& path);
std::vector<std::vector<double>> read_first_rows(const std::string& path, size_t limit);
// Rows [lo, hi) only; whole-file scan, keeps just the requested slice.
std::vector<std::vector<double>> read_row_range(const std::string& path, size_t lo, size_t hi);
size_t count_rows(const std::string& path);

struct Triplet {
  uint32_t i, j;
  double v;
};
std::vector<Triplet> read_triplets(const std::string& path);

struct EdgeList {
  uint32_t vertices = 0;  // max endpoint + 1
  std::vector<std::pair<uint32_t, uint32_t>> edges;
};
EdgeList read_edges(const std::string& path);

std::string fmt_f32(float v);   // %.9g
std::string fmt_f64(double v);  // %.17g

void write_rows(const std::string& path, const std::vector<std::vector<double>>& rows);
void write_float_column(const std::string& path, const std::vector<float>& values);
void write_double_column(const std::string& path, const std::vector<double>& values);
void write_double_matrix(const std::string& path, const std::vector<double>& values,
                         size_t rows, size_t cols);

}  // namespace step::apps
