#include <cmath>
#include <fstream>
#include <random>

#include "step/apps/apps.hpp"

namespace step::apps {

namespace {

double uniform01(std::mt19937_64& rng) {
  return double(rng() >> 11) * 0x1.0p-53;  // 53 uniform bits
}

// Box-Muller; self-contained so generated files depend only on the seed.
double gauss(std::mt19937_64& rng) {
  double u1 = uniform01(rng);
  double u2 = uniform01(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  check(out.good(), Errc::data, "cannot write " + path);
  return out;
}

}  // namespace

void gen_lr(const std::string& path, uint32_t n, uint32_t dim, uint64_t seed, double margin) {
  std::mt19937_64 rng(seed);
  std::vector<double> w(dim);
  double norm = 0;
  for (auto& v : w) {
    v = gauss(rng);
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (auto& v : w) v /= norm;
  auto out = open_out(path);
  for (uint32_t i = 0; i < n; ++i) {
    std::vector<double> x(dim);
    double dot;
    do {
      dot = 0;
      for (uint32_t j = 0; j < dim; ++j) {
        x[j] = gauss(rng);
        dot += w[j] * x[j];
      }
    } while (std::abs(dot) < margin);  // enforce separability
    out << (dot > 0 ? 1 : 0);
    for (uint32_t j = 0; j < dim; ++j) out << ' ' << fmt_f64(x[j]);
    out << '\n';
  }
  check(out.good(), Errc::data, "short write to " + path);
}

void gen_blobs(const std::string& path, uint32_t k, uint32_t per_cluster, uint32_t dim,
               double sigma, double spacing, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<double>> means(k, std::vector<double>(dim));
  for (uint32_t c = 0; c < k; ++c) {
    for (uint32_t j = 0; j < dim; ++j) means[c][j] = spacing * c;
  }
  auto out = open_out(path);
  // Interleave rows over clusters so the first k rows cover k distinct blobs
  // (they are the deterministic initial centers downstream).
  for (uint32_t i = 0; i < per_cluster; ++i) {
    for (uint32_t c = 0; c < k; ++c) {
      for (uint32_t j = 0; j < dim; ++j) {
        if (j) out << ' ';
        out << fmt_f64(means[c][j] + sigma * gauss(rng));
      }
      out << '\n';
    }
  }
  check(out.good(), Errc::data, "short write to " + path);
  auto mf = open_out(path + ".means");
  for (uint32_t c = 0; c < k; ++c) {
    for (uint32_t j = 0; j < dim; ++j) {
      if (j) mf << ' ';
      mf << fmt_f64(means[c][j]);
    }
    mf << '\n';
  }
}

void gen_lowrank(const std::string& path, uint32_t n, uint32_t m, uint32_t rank, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> p(size_t(n) * rank), q(size_t(rank) * m);
  for (auto& v : p) v = uniform01(rng);
  for (auto& v : q) v = uniform01(rng);
  auto out = open_out(path);
  for (uint32_t i = 0; i < n; ++i) {
    for (uint32_t j = 0; j < m; ++j) {
      double v = 0;
      for (uint32_t r = 0; r < rank; ++r) v += p[size_t(i) * rank + r] * q[size_t(r) * m + j];
      out << i << ' ' << j << ' ' << fmt_f64(v) << '\n';
    }
  }
  check(out.good(), Errc::data, "short write to " + path);
}

void gen_graph(const std::string& path, uint32_t vertices, uint64_t edges, uint64_t seed) {
  check(vertices >= 2, Errc::argument, "graph needs at least two vertices");
  std::mt19937_64 rng(seed);
  // Zipf weights over sources give the power-law out-degree shape.
  std::vector<double> cum(vertices);
  double total = 0;
  for (uint32_t v = 0; v < vertices; ++v) {
    total += 1.0 / double(v + 1);
    cum[v] = total;
  }
  check(edges >= 1, Errc::argument, "graph needs at least one edge");
  auto out = open_out(path);
  bool last_seen = false;
  for (uint64_t e = 0; e < edges; ++e) {
    double pick = uniform01(rng) * total;
    uint32_t src = uint32_t(std::lower_bound(cum.begin(), cum.end(), pick) - cum.begin());
    if (src >= vertices) src = vertices - 1;
    if (e + 1 == edges && !last_seen) src = vertices - 1;  // pin the vertex count
    uint32_t dst = src;
    while (dst == src) dst = uint32_t(rng() % vertices);
    out << src << ' ' << dst << '\n';
    last_seen = last_seen || src == vertices - 1 || dst == vertices - 1;
  }
  check(out.good(), Errc::data, "short write to " + path);
}

}  // namespace step::apps
