// Copyright 2026 The esft-serve Authors
// SPDX-License-Identifier: Apache-2.0

// Batched rerouting: rewrites router-emitted base expert IDs into virtual
// slot IDs with the expert map and the per-token adapter ID (AID) array.
//
//   out[t, j] = ids[t, j]                if aid[t] == -1
//             = Pi[aid[t], ids[t, j]]    otherwise
//
// The map table carries an identity row in front of the adapter rows, so the
// fused kernel is a single gather at (aid + 1) * M + id with no branches.

#pragma once

#include <chrono>
#include <cstdint>
#include <span>
#include <vector>

#include "esft/adapter.hpp"
#include "esft/error.hpp"
#include "esft/tensor.hpp"

namespace esft {

/// One layer of the expert map: (N+1) x M, identity row first.
struct ExpertMapView {
  std::span<const std::int32_t> table;
  int max_adapters = 0;
  int num_experts = 0;

  static ExpertMapView of(const ExpertMapSnapshot& snap, int layer) {
    return {snap.layer_table(layer), snap.max_adapters(), snap.num_experts()};
  }
};

/// Per-batch AID validation; runs once at scheduling time, never in the kernel.
inline void validate_aid(std::span<const std::int32_t> aid, int max_adapters) {
  for (std::size_t t = 0; t < aid.size(); ++t)
    if (aid[t] < -1 || aid[t] >= max_adapters)
      raise(ErrorKind::kValidation, "token " + std::to_string(t) + " has AID " + std::to_string(aid[t]) + " outside {-1} U [0, " +
                                        std::to_string(max_adapters) + ")");
}

/// Fused single-pass reroute into `out` (may alias `ids`).
inline void batched_reroute(std::span<const std::int32_t> ids, std::size_t k, std::span<const std::int32_t> aid, const ExpertMapView& map,
                            std::span<std::int32_t> out) {
  const std::size_t b = aid.size();
  const std::int32_t* table = map.table.data();
  const auto m = static_cast<std::size_t>(map.num_experts);
  for (std::size_t t = 0; t < b; ++t) {
    const std::int32_t* row = table + static_cast<std::size_t>(aid[t] + 1) * m;
    const std::int32_t* src = ids.data() + t * k;
    std::int32_t* dst = out.data() + t * k;
    for (std::size_t j = 0; j < k; ++j) dst[j] = row[src[j]];
  }
}

inline Matrix<std::int32_t> batched_reroute(const Matrix<std::int32_t>& ids, std::span<const std::int32_t> aid, const ExpertMapView& map) {
  require(ids.rows() == aid.size(), ErrorKind::kConfig, "top-k rows and AID length differ");
  Matrix<std::int32_t> out(ids.rows(), ids.cols());
  batched_reroute(ids.flat(), ids.cols(), aid, map, out.flat());
  return out;
}

/// Debug variant: validates AIDs, input IDs and every produced entry.
inline Matrix<std::int32_t> batched_reroute_checked(const Matrix<std::int32_t>& ids, std::span<const std::int32_t> aid,
                                                    const ExpertMapView& map) {
  validate_aid(aid, map.max_adapters);
  require(map.table.size() == static_cast<std::size_t>(map.max_adapters + 1) * map.num_experts, ErrorKind::kInvariant,
          "expert map table has the wrong size");
  for (std::int32_t id : ids.flat())
    require(id >= 0 && id < map.num_experts, ErrorKind::kValidation, "top-k id " + std::to_string(id) + " outside [0, M)");
  Matrix<std::int32_t> out = batched_reroute(ids, aid, map);
  const std::int32_t limit = map.num_experts + 0x7fff;  // loose sanity bound; exact bound lives in the registry
  for (std::int32_t v : out.flat()) require(v >= 0 && v < limit, ErrorKind::kInvariant, "rerouted id out of range");
  return out;
}

/// The same rewrite as a chain of generic whole-array operations
/// (broadcast, mask, clamp, offset, gather, select), each materializing its
/// result. This is the unfused baseline for benchmarking.
inline Matrix<std::int32_t> reroute_multi_op(const Matrix<std::int32_t>& ids, std::span<const std::int32_t> aid, const ExpertMapView& map) {
  const std::size_t b = ids.rows(), k = ids.cols(), n = b * k;
  const auto m = static_cast<std::int32_t>(map.num_experts);
  std::vector<std::int32_t> aid_b(n);
  for (std::size_t p = 0; p < n; ++p) aid_b[p] = aid[p / k];
  std::vector<std::uint8_t> mask(n);
  for (std::size_t p = 0; p < n; ++p) mask[p] = aid_b[p] >= 0;
  std::vector<std::int32_t> safe(n);
  for (std::size_t p = 0; p < n; ++p) safe[p] = aid_b[p] < 0 ? 0 : aid_b[p];
  std::vector<std::int64_t> offset(n);
  for (std::size_t p = 0; p < n; ++p) offset[p] = (static_cast<std::int64_t>(safe[p]) + 1) * m + ids.flat()[p];
  std::vector<std::int32_t> gathered(n);
  for (std::size_t p = 0; p < n; ++p) gathered[p] = map.table[static_cast<std::size_t>(offset[p])];
  Matrix<std::int32_t> out(b, k);
  for (std::size_t p = 0; p < n; ++p) out.flat()[p] = mask[p] ? gathered[p] : ids.flat()[p];
  return out;
}

/// Forward-pass hook: reroutes every layer with one map snapshot.
struct RerouteHook {
  const ExpertMapSnapshot* map = nullptr;

  void operator()(int layer, Matrix<std::int32_t>& ids, std::span<const std::int32_t> aid) const {
    batched_reroute(ids.flat(), ids.cols(), aid, ExpertMapView::of(*map, layer), ids.flat());
  }
};

struct RerouteBenchRecord {
  std::size_t batch = 0;
  std::size_t k = 0;
  int max_adapters = 0;
  int e_max = 0;
  double fused_ns_per_token = 0;
  double multi_op_ns_per_token = 0;
  double fused_total_ns = 0;
  double multi_op_total_ns = 0;
  bool identical = false;
};

struct RerouteBenchConfig {
  std::vector<std::size_t> batches{1, 4, 16, 64, 256, 1024, 4096, 16384};
  int top_k = 6;
  int num_experts = 64;
  int max_adapters = 20;
  int e_max = 8;
  int trials = 7;                          // best-of
  std::size_t min_tokens_per_trial = 1 << 16;  // repeat small batches
  std::uint64_t seed = 1;
};

/// Random map and batch with the given shape; used by the bench and tests.
struct RerouteCase {
  Matrix<std::int32_t> ids;
  std::vector<std::int32_t> aid;
  std::vector<std::int32_t> table;  // (N+1) x M
  int max_adapters = 0;
  int num_experts = 0;

  ExpertMapView view() const { return {table, max_adapters, num_experts}; }

  static RerouteCase random(Rng& rng, std::size_t batch, int k, int num_experts, int max_adapters, int e_max) {
    RerouteCase c;
    c.max_adapters = max_adapters;
    c.num_experts = num_experts;
    const auto m = static_cast<std::size_t>(num_experts);
    c.table.resize(static_cast<std::size_t>(max_adapters + 1) * m);
    std::vector<std::int32_t> perm(m);
    for (int r = 0; r <= max_adapters; ++r) {
      std::int32_t* row = c.table.data() + static_cast<std::size_t>(r) * m;
      for (std::size_t j = 0; j < m; ++j) row[j] = static_cast<std::int32_t>(j);
      if (r == 0) continue;
      const int e = static_cast<int>(rng.uniform_int(0, std::min(e_max, num_experts)));
      std::iota(perm.begin(), perm.end(), 0);
      for (int q = 0; q < e; ++q) std::swap(perm[static_cast<std::size_t>(q)], perm[static_cast<std::size_t>(rng.uniform_int(q, num_experts - 1))]);
      std::sort(perm.begin(), perm.begin() + e);
      for (int q = 0; q < e; ++q) row[perm[static_cast<std::size_t>(q)]] = num_experts + (r - 1) * e_max + q;
    }
    c.ids = Matrix<std::int32_t>(batch, static_cast<std::size_t>(k));
    for (std::size_t t = 0; t < batch; ++t) {
      // distinct ids per row, as a router would produce
      std::iota(perm.begin(), perm.end(), 0);
      for (int q = 0; q < k; ++q) {
        std::swap(perm[static_cast<std::size_t>(q)], perm[static_cast<std::size_t>(rng.uniform_int(q, num_experts - 1))]);
        c.ids(t, static_cast<std::size_t>(q)) = perm[static_cast<std::size_t>(q)];
      }
    }
    c.aid.resize(batch);
    for (auto& a : c.aid) a = static_cast<std::int32_t>(rng.uniform_int(-1, max_adapters - 1));
    return c;
  }
};

namespace detail {
template <typename T>
inline void do_not_optimize(T const& value) {
  asm volatile("" : : "r,m"(value) : "memory");
}
}  // namespace detail

/// Times the fused kernel against the multi-op composition over a batch sweep.
inline std::vector<RerouteBenchRecord> fused_reroute_bench(const RerouteBenchConfig& cfg) {
  using clock = std::chrono::steady_clock;
  std::vector<RerouteBenchRecord> out;
  Rng rng(cfg.seed);
  for (std::size_t b : cfg.batches) {
    RerouteBenchRecord rec{b, static_cast<std::size_t>(cfg.top_k), cfg.max_adapters, cfg.e_max};
    const RerouteCase c = RerouteCase::random(rng, b, cfg.top_k, cfg.num_experts, cfg.max_adapters, cfg.e_max);
    const ExpertMapView view = c.view();
    rec.identical = batched_reroute(c.ids, c.aid, view) == reroute_multi_op(c.ids, c.aid, view);
    if (b == 0) {
      out.push_back(rec);
      continue;
    }
    const std::size_t reps = std::max<std::size_t>(1, cfg.min_tokens_per_trial / b);
    Matrix<std::int32_t> sink(b, static_cast<std::size_t>(cfg.top_k));
    double best_fused = 1e300, best_multi = 1e300;
    for (int trial = 0; trial < cfg.trials; ++trial) {
      auto t0 = clock::now();
      for (std::size_t r = 0; r < reps; ++r) {
        batched_reroute(c.ids.flat(), c.ids.cols(), c.aid, view, sink.flat());
        detail::do_not_optimize(sink.data());
      }
      auto t1 = clock::now();
      for (std::size_t r = 0; r < reps; ++r) {
        auto res = reroute_multi_op(c.ids, c.aid, view);
        detail::do_not_optimize(res.data());
      }
      auto t2 = clock::now();
      best_fused = std::min(best_fused, std::chrono::duration<double, std::nano>(t1 - t0).count() / static_cast<double>(reps));
      best_multi = std::min(best_multi, std::chrono::duration<double, std::nano>(t2 - t1).count() / static_cast<double>(reps));
    }
    rec.fused_total_ns = best_fused;
    rec.multi_op_total_ns = best_multi;
    rec.fused_ns_per_token = best_fused / static_cast<double>(b);
    rec.multi_op_ns_per_token = best_multi / static_cast<double>(b);
    out.push_back(rec);
  }
  return out;
}

}  // namespace esft
