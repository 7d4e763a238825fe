// Independent reference implementations used by tests. Plain loops only; no
// framework code, so they stay valid oracles for the distributed paths.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <vector>

namespace step::testing {

// Fixed-order vector sum: groups ascending, members ascending within each
// group, accumulated in the element type.
template <typename T>
std::vector<T> grouped_sum(const std::vector<std::vector<T>>& vecs,
                           const std::vector<uint32_t>& group_of) {
  if (vecs.empty()) return {};
  size_t len = vecs[0].size();
  std::vector<T> total(len, T(0));
  std::set<uint32_t> groups(group_of.begin(), group_of.end());
  for (uint32_t g : groups) {
    std::vector<T> partial(len, T(0));
    for (size_t p = 0; p < vecs.size(); ++p) {
      if (group_of[p] != g) continue;
      for (size_t i = 0; i < len; ++i) partial[i] += vecs[p][i];
    }
    for (size_t i = 0; i < len; ++i) total[i] += partial[i];
  }
  return total;
}

// Contiguous ceiling-first partition, mirroring the documented rule.
inline std::pair<size_t, size_t> partition_bounds(size_t rows, uint32_t tid, uint32_t nthreads) {
  size_t q = rows / nthreads, r = rows % nthreads;
  size_t lo = size_t(tid) * q + std::min<size_t>(tid, r);
  size_t hi = lo + q + (tid < r ? 1 : 0);
  return {lo, hi};
}

// ---------------------------------------------------------------------------
// Serial oracles for the reference applications. The learning oracles mirror
// the documented arithmetic order (per-thread partials combined group-by-
// group); the PageRank oracle is an independent straight power iteration.

namespace lr_oracle_detail {
inline std::vector<uint32_t> groups(uint32_t nthreads, uint32_t tpn) {
  std::vector<uint32_t> g(nthreads);
  for (uint32_t t = 0; t < nthreads; ++t) g[t] = 1 + t / tpn;
  return g;
}
}  // namespace lr_oracle_detail

// rows: label-first; returns theta after `iters` rounds.
inline std::vector<float> lr_oracle(const std::vector<std::vector<double>>& rows, uint32_t dim,
                                    uint32_t iters, float step, uint32_t nthreads,
                                    uint32_t tpn) {
  // fixed per-thread slices and float feature storage, as in the real app
  std::vector<std::vector<std::pair<float, std::vector<float>>>> parts(nthreads);
  for (uint32_t t = 0; t < nthreads; ++t) {
    auto [lo, hi] = partition_bounds(rows.size(), t, nthreads);
    for (size_t i = lo; i < hi; ++i) {
      std::vector<float> x(rows[i].begin() + 1, rows[i].end());
      parts[t].emplace_back(float(rows[i][0]), std::move(x));
    }
  }
  auto groups = lr_oracle_detail::groups(nthreads, tpn);
  std::vector<float> theta(dim, 0.0f);
  for (uint32_t iter = 0; iter < iters; ++iter) {
    std::vector<std::vector<float>> local(nthreads, std::vector<float>(dim, 0.0f));
    for (uint32_t t = 0; t < nthreads; ++t) {
      for (const auto& [y, x] : parts[t]) {
        double dot = 0;
        for (uint32_t j = 0; j < dim; ++j) dot += double(theta[j]) * double(x[j]);
        double sig = 1.0 / (1.0 + std::exp(-dot));
        float coef = float(double(y) - sig);
        for (uint32_t j = 0; j < dim; ++j) local[t][j] += coef * x[j];
      }
    }
    auto grad = grouped_sum(local, groups);
    for (uint32_t j = 0; j < dim; ++j) theta[j] += step * grad[j];
  }
  return theta;
}

// Returns k x dim centers; same init, tie and empty-cluster rules as the app.
inline std::vector<double> kmeans_oracle(const std::vector<std::vector<double>>& rows,
                                         uint32_t k, uint32_t dim, uint32_t iters,
                                         uint32_t nthreads, uint32_t tpn) {
  auto groups = lr_oracle_detail::groups(nthreads, tpn);
  std::vector<double> centers(size_t(k) * dim);
  for (uint32_t c = 0; c < k; ++c) {
    for (uint32_t j = 0; j < dim; ++j) centers[size_t(c) * dim + j] = rows[c][j];
  }
  uint32_t vec_len = k * dim + k;
  for (uint32_t iter = 0; iter < iters; ++iter) {
    std::vector<std::vector<double>> local(nthreads, std::vector<double>(vec_len, 0.0));
    for (uint32_t t = 0; t < nthreads; ++t) {
      auto [lo, hi] = partition_bounds(rows.size(), t, nthreads);
      for (size_t i = lo; i < hi; ++i) {
        uint32_t best = 0;
        double best_d2 = 0;
        for (uint32_t c = 0; c < k; ++c) {
          double d2 = 0;
          for (uint32_t j = 0; j < dim; ++j) {
            double diff = rows[i][j] - centers[size_t(c) * dim + j];
            d2 += diff * diff;
          }
          if (c == 0 || d2 < best_d2) {
            best = c;
            best_d2 = d2;
          }
        }
        for (uint32_t j = 0; j < dim; ++j) local[t][size_t(best) * dim + j] += rows[i][j];
        local[t][size_t(k) * dim + best] += 1.0;
      }
    }
    auto acc = grouped_sum(local, groups);
    for (uint32_t c = 0; c < k; ++c) {
      double count = acc[size_t(k) * dim + c];
      if (count > 0) {
        for (uint32_t j = 0; j < dim; ++j) {
          centers[size_t(c) * dim + j] = acc[size_t(c) * dim + j] / count;
        }
      }
    }
  }
  return centers;
}

struct NmfOracleResult {
  std::vector<double> p, q, losses;
};

// Projected SGD with epoch-synchronous Q aggregation, same init and order.
inline NmfOracleResult nmf_oracle(const std::vector<std::tuple<uint32_t, uint32_t, double>>& trips,
                                  uint32_t n, uint32_t m, uint32_t k, uint32_t epochs,
                                  double eta, uint32_t nthreads, uint32_t tpn) {
  auto groups = lr_oracle_detail::groups(nthreads, tpn);
  auto p_init = [](uint32_t i, uint32_t r) { return 0.1 + 0.01 * double((i * 31 + r) % 7); };
  auto q_init = [](uint32_t r, uint32_t j) { return 0.1 + 0.01 * double((r * 17 + j) % 5); };
  NmfOracleResult res;
  res.p.resize(size_t(n) * k);
  res.q.resize(size_t(k) * m);
  for (uint32_t i = 0; i < n; ++i) {
    for (uint32_t r = 0; r < k; ++r) res.p[size_t(i) * k + r] = p_init(i, r);
  }
  for (uint32_t r = 0; r < k; ++r) {
    for (uint32_t j = 0; j < m; ++j) res.q[size_t(r) * m + j] = q_init(r, j);
  }
  uint32_t qn = k * m;
  for (uint32_t epoch = 0; epoch < epochs; ++epoch) {
    std::vector<std::vector<double>> dq(nthreads, std::vector<double>(qn, 0.0));
    for (uint32_t t = 0; t < nthreads; ++t) {
      auto [rlo, rhi] = partition_bounds(n, t, nthreads);
      for (const auto& [i, j, v] : trips) {
        if (i < rlo || i >= rhi) continue;
        double* pi = &res.p[size_t(i) * k];
        double pred = 0;
        for (uint32_t r = 0; r < k; ++r) pred += pi[r] * res.q[size_t(r) * m + j];
        double e = v - pred;
        for (uint32_t r = 0; r < k; ++r) {
          double po = pi[r];
          double qo = res.q[size_t(r) * m + j];
          pi[r] = std::max(0.0, po + eta * e * qo);
          dq[t][size_t(r) * m + j] += eta * e * po;
        }
      }
    }
    auto dsum = grouped_sum(dq, groups);
    for (uint32_t x = 0; x < qn; ++x) res.q[x] = std::max(0.0, res.q[x] + dsum[x]);
    double loss = 0;
    for (const auto& [i, j, v] : trips) {
      const double* pi = &res.p[size_t(i) * k];
      double pred = 0;
      for (uint32_t r = 0; r < k; ++r) pred += pi[r] * res.q[size_t(r) * m + j];
      loss += (v - pred) * (v - pred);
    }
    res.losses.push_back(loss / double(n));
  }
  return res;
}

// Independent straight power iteration, natural vertex order.
inline std::vector<double> pagerank_oracle(
    uint32_t v_count, const std::vector<std::pair<uint32_t, uint32_t>>& edges, uint32_t iters,
    double dmp) {
  std::vector<std::vector<uint32_t>> adj(v_count);
  for (auto [s, d] : edges) adj[s].push_back(d);
  std::vector<double> rank(v_count, 1.0 / v_count), next(v_count);
  for (uint32_t it = 0; it < iters; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    double dangling = 0;
    for (uint32_t u = 0; u < v_count; ++u) {
      if (adj[u].empty()) {
        dangling += rank[u];
        continue;
      }
      double share = rank[u] / double(adj[u].size());
      for (uint32_t d : adj[u]) next[d] += share;
    }
    for (uint32_t v = 0; v < v_count; ++v) {
      rank[v] = (1.0 - dmp) / v_count + dmp * (next[v] + dangling / v_count);
    }
  }
  return rank;
}

}  // namespace step::testing
