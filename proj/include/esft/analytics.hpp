// Copyright 2026 The esft-serve Authors
// SPDX-License-Identifier: Apache-2.0

// Padding-layout analytics: adapter sparsity, fragmentation of the padded
// layout, and a dry run of the virtual layout's page accounting.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "esft/error.hpp"
#include "esft/expert_memory.hpp"
#include "esft/moe.hpp"
#include "esft/random.hpp"

namespace esft {

/// Fine-tuned expert counts of one adapter: either per layer, or only the
/// (max, average) summary.
struct AdapterProfile {
  std::string name;
  std::vector<int> layer_counts;
  int summary_max = 0;
  double summary_avg = 0.0;

  static AdapterProfile from_counts(std::string name, std::vector<int> counts) {
    return {std::move(name), std::move(counts), 0, 0.0};
  }
  static AdapterProfile from_summary(std::string name, int max_experts, double avg_experts) {
    return {std::move(name), {}, max_experts, avg_experts};
  }

  bool has_layer_counts() const { return !layer_counts.empty(); }

  int max_experts() const {
    return has_layer_counts() ? *std::max_element(layer_counts.begin(), layer_counts.end()) : summary_max;
  }

  double avg_experts() const {
    if (!has_layer_counts()) return summary_avg;
    return static_cast<double>(std::accumulate(layer_counts.begin(), layer_counts.end(), 0L)) /
           static_cast<double>(layer_counts.size());
  }
};

/// Share of padded slots inside the adapter's own per-layer maximum:
/// sum_l (E - e_l) / (L * E), or 1 - avg/E in summary form.
inline double sparsity_factor(const AdapterProfile& p) {
  const int e_max = p.max_experts();
  if (e_max <= 0) raise(ErrorKind::kInput, "adapter '" + p.name + "' has no fine-tuned experts; sparsity is undefined");
  if (!p.has_layer_counts()) {
    require(p.summary_avg >= 0 && p.summary_avg <= e_max, ErrorKind::kInput, "adapter '" + p.name + "': average exceeds maximum");
    return 1.0 - p.summary_avg / e_max;
  }
  long gap = 0;
  for (int e : p.layer_counts) {
    require(e >= 0, ErrorKind::kInput, "negative expert count in '" + p.name + "'");
    gap += e_max - e;
  }
  return static_cast<double>(gap) / (static_cast<double>(p.layer_counts.size()) * e_max);
}

inline void check_padding_feasible(const std::vector<AdapterProfile>& profiles, int e_max) {
  for (const auto& p : profiles)
    if (p.max_experts() > e_max)
      raise(ErrorKind::kInput, "E_max=" + std::to_string(e_max) + " is smaller than " + std::to_string(p.max_experts()) +
                                   " experts in a layer of '" + p.name + "'; padding is infeasible");
}

/// Allocated over used expert slots in the padded layout
/// L*(M + N*E_max) / sum_l (M + sum_i e_i^l). Uses per-adapter averages when
/// any profile is summary-only (L cancels).
inline double fragmentation_factor(const std::vector<AdapterProfile>& profiles, int num_experts, int e_max) {
  require(num_experts >= 1, ErrorKind::kInput, "M must be >= 1");
  check_padding_feasible(profiles, e_max);
  const auto n = static_cast<double>(profiles.size());
  const double m = num_experts;
  const bool all_counts =
      !profiles.empty() && std::all_of(profiles.begin(), profiles.end(), [&](const AdapterProfile& p) {
        return p.has_layer_counts() && p.layer_counts.size() == profiles.front().layer_counts.size();
      });
  if (!all_counts) {
    double used = m;
    for (const auto& p : profiles) used += p.avg_experts();
    return (m + n * e_max) / used;
  }
  const std::size_t layers = profiles.front().layer_counts.size();
  double used = 0.0;
  for (std::size_t l = 0; l < layers; ++l) {
    double layer_used = m;
    for (const auto& p : profiles) layer_used += p.layer_counts[l];
    used += layer_used;
  }
  return static_cast<double>(layers) * (m + n * e_max) / used;
}

/// Per-layer counts with exactly the given maximum and round(avg*L) total.
/// One random layer is pinned at the maximum; the rest is spread at random.
inline std::vector<int> synthesize_layer_counts(int max_experts, double avg_experts, int num_layers, Rng& rng) {
  require(num_layers >= 1 && max_experts >= 0, ErrorKind::kInput, "bad synthesis target");
  std::vector<int> counts(static_cast<std::size_t>(num_layers), 0);
  if (max_experts == 0) return counts;
  long total = std::lround(avg_experts * num_layers);
  total = std::clamp<long>(total, max_experts, static_cast<long>(max_experts) * num_layers);
  const auto pinned = static_cast<std::size_t>(rng.uniform_int(0, num_layers - 1));
  counts[pinned] = max_experts;
  long rest = total - max_experts;
  const long others = num_layers - 1;
  if (others == 0) return counts;
  for (std::size_t l = 0; l < counts.size(); ++l)
    if (l != pinned) counts[l] = static_cast<int>(rest / others);
  long extra = rest % others;
  while (extra > 0) {
    const auto l = static_cast<std::size_t>(rng.uniform_int(0, num_layers - 1));
    if (l == pinned || counts[l] >= max_experts) continue;
    ++counts[l];
    --extra;
  }
  // Shuffle mass between layers so the profile is not flat.
  for (int iter = 0; iter < num_layers * 4; ++iter) {
    const auto a = static_cast<std::size_t>(rng.uniform_int(0, num_layers - 1));
    const auto b = static_cast<std::size_t>(rng.uniform_int(0, num_layers - 1));
    if (a == b || a == pinned || b == pinned || counts[a] == 0 || counts[b] >= max_experts) continue;
    --counts[a];
    ++counts[b];
  }
  return counts;
}

struct DryRunReport {
  std::size_t expert_size = 0;
  std::size_t page_size = 0;
  std::uint64_t padded_bytes = 0;     // L * N * E_max * expert_size
  std::uint64_t padded_page_bytes = 0;  // padded adapter region rounded out to whole pages
  std::uint64_t used_bytes = 0;       // sum of loaded adapter experts * expert_size
  std::uint64_t mapped_bytes = 0;     // pages covering loaded adapter ranges * page_size
  std::uint64_t pages_mapped = 0;     // adapter pages over all layers
  std::uint64_t base_pages = 0;       // pages covering the base experts over all layers
  std::int64_t kv_budget_delta = 0;   // bytes handed back to the KV cache vs padding
  std::vector<std::uint64_t> adapter_pages;  // per adapter, own range cover summed over layers

  double savings_ratio() const {
    return padded_bytes == 0 ? 0.0 : 1.0 - static_cast<double>(mapped_bytes) / static_cast<double>(padded_bytes);
  }
  double mapped_over_padded() const {
    return padded_bytes == 0 ? 0.0 : static_cast<double>(mapped_bytes) / static_cast<double>(padded_bytes);
  }
};

/// Replays adapter loading into accounting-only virtual tensors and compares
/// the page bill with the padded layout. Summary-only profiles are expanded
/// to per-layer counts with `seed`.
inline DryRunReport dry_run_accounting(const std::vector<AdapterProfile>& profiles, const ModelConfig& cfg, std::size_t page_size,
                                       int e_max, std::uint64_t seed = 0) {
  cfg.validate(/*for_compute=*/false);
  check_padding_feasible(profiles, e_max);
  require(page_size > 0, ErrorKind::kConfig, "page_size must be > 0");
  const std::size_t n = profiles.size();
  const std::size_t m = static_cast<std::size_t>(cfg.num_experts);
  const std::size_t es = cfg.expert_bytes();
  const std::size_t slots = m + n * static_cast<std::size_t>(e_max);

  std::vector<std::vector<int>> counts;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = profiles[i];
    if (p.has_layer_counts()) {
      require(p.layer_counts.size() == static_cast<std::size_t>(cfg.num_layers), ErrorKind::kInput,
              "profile '" + p.name + "' has " + std::to_string(p.layer_counts.size()) + " layers, model has " +
                  std::to_string(cfg.num_layers));
      counts.push_back(p.layer_counts);
    } else {
      Rng rng(mix_seed(seed, fnv1a(p.name) + i));
      counts.push_back(synthesize_layer_counts(p.summary_max, p.summary_avg, cfg.num_layers, rng));
    }
  }

  DryRunReport rep;
  rep.expert_size = es;
  rep.page_size = page_size;
  rep.adapter_pages.assign(n, 0);
  rep.padded_bytes = static_cast<std::uint64_t>(cfg.num_layers) * n * static_cast<std::uint64_t>(e_max) * es;

  const std::uint64_t span_pages = page_cover(0, static_cast<std::uint64_t>(slots) * es, page_size).size();
  for (int l = 0; l < cfg.num_layers; ++l) {
    PhysicalMemoryPool base_pool({page_size, span_pages}, Backing::kAccountingOnly);
    VirtualWeightTensor base_only(base_pool, slots, es, l);
    base_only.map_experts({l, 0, m});
    rep.base_pages += base_only.pages_mapped();

    PhysicalMemoryPool pool({page_size, span_pages}, Backing::kAccountingOnly);
    VirtualWeightTensor adapters_only(pool, slots, es, l);
    for (std::size_t i = 0; i < n; ++i) {
      const auto e = static_cast<std::size_t>(counts[i][static_cast<std::size_t>(l)]);
      const std::size_t delta = m + i * static_cast<std::size_t>(e_max);
      const std::uint64_t a = static_cast<std::uint64_t>(delta) * es;
      rep.adapter_pages[i] += page_cover(a, a + e * es, page_size).size();
      adapters_only.map_experts({l, delta, e});
      rep.used_bytes += e * es;
    }
    rep.pages_mapped += adapters_only.pages_mapped();
    const std::uint64_t region = static_cast<std::uint64_t>(m) * es;
    rep.padded_page_bytes += page_cover(region, static_cast<std::uint64_t>(slots) * es, page_size).size() * page_size;
  }
  rep.mapped_bytes = rep.pages_mapped * page_size;
  rep.kv_budget_delta = static_cast<std::int64_t>(rep.padded_bytes) - static_cast<std::int64_t>(rep.mapped_bytes);
  return rep;
}

}  // namespace esft
