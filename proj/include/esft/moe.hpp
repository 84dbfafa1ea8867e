// Copyright 2026 The esft-serve Authors
// SPDX-License-Identifier: Apache-2.0

// Minimal MoE layer: top-k router, token dispatch, grouped expert FFN and
// weighted combine. Nothing in here knows about adapters; rerouting enters
// through the hook argument of forward_layer.
//
// All reductions accumulate sequentially in float over the contraction
// dimension, so results are bit-identical regardless of how tokens are
// grouped. Builds must not enable -ffast-math or FP contraction.

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "esft/error.hpp"
#include "esft/random.hpp"
#include "esft/tensor.hpp"

namespace esft {

enum class DType { kF32, kF16, kBF16 };

inline std::size_t dtype_bytes(DType t) { return t == DType::kF32 ? 4 : 2; }

inline const char* dtype_name(DType t) {
  switch (t) {
    case DType::kF32: return "f32";
    case DType::kF16: return "f16";
    case DType::kBF16: return "bf16";
  }
  return "?";
}

inline DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::kF32;
  if (s == "f16") return DType::kF16;
  if (s == "bf16") return DType::kBF16;
  raise(ErrorKind::kInput, "unknown dtype '" + s + "'");
}

struct ModelConfig {
  int num_layers = 4;
  int num_experts = 64;
  int top_k = 6;
  int hidden = 64;
  int intermediate = 32;
  int vocab = 256;  // pseudo-embedding / readout table size
  DType dtype = DType::kF32;

  /// Checks the shape invariants. Compute paths additionally need f32.
  void validate(bool for_compute = true) const {
    require(num_layers >= 1, ErrorKind::kConfig, "num_layers must be >= 1");
    require(num_experts >= 1, ErrorKind::kConfig, "num_experts must be >= 1");
    require(top_k >= 1 && top_k <= num_experts, ErrorKind::kConfig, "top_k must be in [1, num_experts]");
    require(hidden >= 1 && intermediate >= 1, ErrorKind::kConfig, "hidden and intermediate must be >= 1");
    require(vocab >= 1, ErrorKind::kConfig, "vocab must be >= 1");
    if (for_compute) require(dtype == DType::kF32, ErrorKind::kConfig, "only f32 models can be executed");
  }

  std::size_t expert_floats() const { return 3 * static_cast<std::size_t>(hidden) * intermediate; }
  std::size_t expert_bytes() const { return expert_floats() * dtype_bytes(dtype); }

  /// Hash over the shape fields; adapters carry it to bind to a base model.
  std::uint64_t fingerprint() const {
    const std::string key = std::to_string(num_layers) + ":" + std::to_string(num_experts) + ":" +
                            std::to_string(top_k) + ":" + std::to_string(hidden) + ":" +
                            std::to_string(intermediate) + ":" + std::to_string(vocab) + ":" +
                            dtype_name(dtype);
    return fnv1a(key);
  }

  bool operator==(const ModelConfig&) const = default;
};

/// One expert FFN. Packed layout is gate_proj [I,H], up_proj [I,H],
/// down_proj [H,I], all row-major and contiguous.
struct ExpertWeights {
  MatrixF gate_proj;
  MatrixF up_proj;
  MatrixF down_proj;

  static ExpertWeights zeros(const ModelConfig& cfg) {
    const auto h = static_cast<std::size_t>(cfg.hidden), i = static_cast<std::size_t>(cfg.intermediate);
    return {MatrixF(i, h), MatrixF(i, h), MatrixF(h, i)};
  }

  static ExpertWeights random(const ModelConfig& cfg, Rng& rng) {
    ExpertWeights w = zeros(cfg);
    const float sh = 1.0f / std::sqrt(static_cast<float>(cfg.hidden));
    const float si = 1.0f / std::sqrt(static_cast<float>(cfg.intermediate));
    for (float& v : w.gate_proj.flat()) v = rng.uniform_float(-sh, sh);
    for (float& v : w.up_proj.flat()) v = rng.uniform_float(-sh, sh);
    for (float& v : w.down_proj.flat()) v = rng.uniform_float(-si, si);
    return w;
  }

  std::vector<float> pack() const {
    std::vector<float> out;
    out.reserve(gate_proj.flat().size() * 3);
    for (const MatrixF* m : {&gate_proj, &up_proj, &down_proj}) out.insert(out.end(), m->flat().begin(), m->flat().end());
    return out;
  }

  static ExpertWeights unpack(const ModelConfig& cfg, std::span<const float> packed) {
    require(packed.size() == cfg.expert_floats(), ErrorKind::kConfig, "packed expert has wrong size");
    ExpertWeights w = zeros(cfg);
    std::size_t off = 0;
    for (MatrixF* m : {&w.gate_proj, &w.up_proj, &w.down_proj}) {
      std::copy_n(packed.begin() + static_cast<std::ptrdiff_t>(off), m->flat().size(), m->flat().begin());
      off += m->flat().size();
    }
    return w;
  }

  bool all_finite() const {
    for (const MatrixF* m : {&gate_proj, &up_proj, &down_proj})
      for (float v : m->flat())
        if (!std::isfinite(v)) return false;
    return true;
  }
};

/// Flattened token batch. aid[t] is -1 for base-model tokens.
struct TokenBatch {
  MatrixF hidden;
  std::vector<std::int32_t> aid;
  std::vector<std::int64_t> token_origin;

  std::size_t size() const { return hidden.rows(); }
};

struct TopKAssignment {
  Matrix<std::int32_t> ids;  // [B, K] expert slot indices
  MatrixF weights;           // [B, K] gate weights, rows sum to 1

  std::size_t tokens() const { return ids.rows(); }
  std::size_t k() const { return ids.cols(); }
};

/// Tokens replicated K times and grouped by target slot.
struct PermutedTokens {
  MatrixF rows;                           // [B*K, H], grouped by ascending slot
  std::vector<std::int32_t> row_slot;     // slot of each permuted row
  std::vector<std::size_t> row_pair;      // permuted row -> pair index t*K+j
  std::vector<std::size_t> inverse_perm;  // pair index -> permuted row
  std::vector<std::size_t> group_sizes;   // per slot
};

/// Softmax over all experts, top-K with ascending-index tie-break, and
/// renormalization of the selected probabilities.
inline TopKAssignment route(const MatrixF& hidden, const MatrixF& router_weights, int top_k) {
  const std::size_t b = hidden.rows(), m = router_weights.rows(), h = hidden.cols();
  require(router_weights.cols() == h, ErrorKind::kConfig,
          "router weights have " + std::to_string(router_weights.cols()) + " columns, hidden has " + std::to_string(h));
  require(top_k >= 1 && static_cast<std::size_t>(top_k) <= m, ErrorKind::kConfig, "top_k must be in [1, M]");
  const auto k = static_cast<std::size_t>(top_k);

  TopKAssignment out{Matrix<std::int32_t>(b, k), MatrixF(b, k)};
  std::vector<float> probs(m);
  std::vector<std::int32_t> order(m);
  for (std::size_t t = 0; t < b; ++t) {
    const auto x = hidden.row(t);
    float max_logit = -INFINITY;
    for (std::size_t e = 0; e < m; ++e) {
      const auto w = router_weights.row(e);
      float acc = 0.0f;
      for (std::size_t d = 0; d < h; ++d) acc += w[d] * x[d];
      probs[e] = acc;
      max_logit = std::max(max_logit, acc);
    }
    float denom = 0.0f;
    for (std::size_t e = 0; e < m; ++e) {
      probs[e] = std::exp(probs[e] - max_logit);
      denom += probs[e];
    }
    for (std::size_t e = 0; e < m; ++e) probs[e] /= denom;

    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::int32_t a, std::int32_t c) { return probs[a] > probs[c] || (probs[a] == probs[c] && a < c); });
    float selected = 0.0f;
    for (std::size_t j = 0; j < k; ++j) selected += probs[order[j]];
    for (std::size_t j = 0; j < k; ++j) {
      out.ids(t, j) = order[j];
      out.weights(t, j) = probs[order[j]] / selected;
    }
  }
  return out;
}

/// Stable counting sort of the B*K (token, k) pairs by target slot.
inline PermutedTokens dispatch(const MatrixF& hidden, const TopKAssignment& topk, std::size_t num_slots) {
  const std::size_t b = topk.tokens(), k = topk.k(), h = hidden.cols();
  require(hidden.rows() == b, ErrorKind::kConfig, "hidden/top-k batch size mismatch");
  PermutedTokens p;
  p.group_sizes.assign(num_slots, 0);
  for (std::int32_t id : topk.ids.flat()) {
    require(id >= 0 && static_cast<std::size_t>(id) < num_slots, ErrorKind::kInvariant,
            "dispatch: slot id " + std::to_string(id) + " out of range [0, " + std::to_string(num_slots) + ")");
    ++p.group_sizes[static_cast<std::size_t>(id)];
  }
  std::vector<std::size_t> cursor(num_slots, 0);
  std::exclusive_scan(p.group_sizes.begin(), p.group_sizes.end(), cursor.begin(), std::size_t{0});

  const std::size_t n = b * k;
  p.rows = MatrixF(n, h);
  p.row_slot.resize(n);
  p.row_pair.resize(n);
  p.inverse_perm.resize(n);
  for (std::size_t pair = 0; pair < n; ++pair) {
    const auto slot = static_cast<std::size_t>(topk.ids.flat()[pair]);
    const std::size_t r = cursor[slot]++;
    p.row_slot[r] = static_cast<std::int32_t>(slot);
    p.row_pair[r] = pair;
    p.inverse_perm[pair] = r;
    const auto src = hidden.row(pair / k);
    std::copy(src.begin(), src.end(), p.rows.row(r).begin());
  }
  return p;
}

/// Anything that can hand out packed expert weights by slot index.
/// expert_data may copy into `scratch` when the expert is not contiguous and
/// throws a memory-fault error for slots that are not backed.
template <typename W>
concept ExpertWeightSource = requires(const W& w, std::size_t slot, std::vector<float>& scratch) {
  { w.num_slots() } -> std::convertible_to<std::size_t>;
  { w.expert_data(slot, scratch) } -> std::same_as<const float*>;
};

/// Plain stacked tensor [num_slots, expert] in host memory. Used for merged
/// models and as the reference layout for tests.
class StackedExperts {
 public:
  StackedExperts() = default;
  StackedExperts(const ModelConfig& cfg, std::size_t num_slots)
      : expert_floats_(cfg.expert_floats()), num_slots_(num_slots), data_(num_slots * expert_floats_, 0.0f) {}
  StackedExperts(const ModelConfig& cfg, std::vector<float> packed)
      : expert_floats_(cfg.expert_floats()), num_slots_(packed.size() / cfg.expert_floats()), data_(std::move(packed)) {
    require(data_.size() == num_slots_ * expert_floats_, ErrorKind::kConfig, "stacked tensor size is not a multiple of the expert size");
  }

  std::size_t num_slots() const { return num_slots_; }

  void set(std::size_t slot, std::span<const float> packed) {
    require(slot < num_slots_ && packed.size() == expert_floats_, ErrorKind::kConfig, "stacked set: bad slot or size");
    std::copy(packed.begin(), packed.end(), data_.begin() + static_cast<std::ptrdiff_t>(slot * expert_floats_));
  }

  std::span<const float> expert(std::size_t slot) const { return {data_.data() + slot * expert_floats_, expert_floats_}; }

  const float* expert_data(std::size_t slot, std::vector<float>&) const {
    require(slot < num_slots_, ErrorKind::kMemoryFault, "stacked tensor has no slot " + std::to_string(slot));
    return data_.data() + slot * expert_floats_;
  }

 private:
  std::size_t expert_floats_ = 0;
  std::size_t num_slots_ = 0;
  std::vector<float> data_;
};

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

namespace detail {

// y = down · (silu(gate · x) ⊙ (up · x)) for one row.
inline void expert_ffn_row(const float* packed, int hidden, int intermediate, std::span<const float> x, std::span<float> y,
                           std::vector<float>& act) {
  const auto h = static_cast<std::size_t>(hidden), n = static_cast<std::size_t>(intermediate);
  const float* gate = packed;
  const float* up = packed + n * h;
  const float* down = packed + 2 * n * h;
  act.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    float g = 0.0f, u = 0.0f;
    const float* gr = gate + i * h;
    const float* ur = up + i * h;
    for (std::size_t d = 0; d < h; ++d) {
      g += gr[d] * x[d];
      u += ur[d] * x[d];
    }
    act[i] = silu(g) * u;
  }
  for (std::size_t o = 0; o < h; ++o) {
    const float* dr = down + o * n;
    float acc = 0.0f;
    for (std::size_t i = 0; i < n; ++i) acc += dr[i] * act[i];
    y[o] = acc;
  }
}

}  // namespace detail

/// Runs each slot's FFN over its contiguous group of permuted rows.
template <ExpertWeightSource W>
MatrixF grouped_matmul(const PermutedTokens& permuted, const W& weights, const ModelConfig& cfg) {
  const std::size_t n = permuted.rows.rows();
  require(permuted.group_sizes.size() <= weights.num_slots(), ErrorKind::kConfig, "more groups than weight slots");
  const std::size_t total = std::accumulate(permuted.group_sizes.begin(), permuted.group_sizes.end(), std::size_t{0});
  require(total == n, ErrorKind::kInvariant, "group sizes do not sum to the permuted row count");

  MatrixF out(n, static_cast<std::size_t>(cfg.hidden));
  std::vector<float> scratch, act;
  std::size_t row = 0;
  for (std::size_t slot = 0; slot < permuted.group_sizes.size(); ++slot) {
    const std::size_t count = permuted.group_sizes[slot];
    if (count == 0) continue;
    const float* packed = weights.expert_data(slot, scratch);
    for (std::size_t r = row; r < row + count; ++r)
      detail::expert_ffn_row(packed, cfg.hidden, cfg.intermediate, permuted.rows.row(r), out.row(r), act);
    row += count;
  }
  return out;
}

/// output[t] = sum_j weights[t,j] * expert_out[row of (t,j)], j ascending.
inline MatrixF combine(const MatrixF& expert_out, const TopKAssignment& topk, std::span<const std::size_t> inverse_perm) {
  const std::size_t b = topk.tokens(), k = topk.k(), h = expert_out.cols();
  require(expert_out.rows() == b * k && inverse_perm.size() == b * k, ErrorKind::kConfig, "combine: expert output must have B*K rows");
  MatrixF out(b, h);
  for (std::size_t t = 0; t < b; ++t) {
    auto dst = out.row(t);
    for (std::size_t j = 0; j < k; ++j) {
      const float w = topk.weights(t, j);
      const auto src = expert_out.row(inverse_perm[t * k + j]);
      for (std::size_t d = 0; d < h; ++d) dst[d] += w * src[d];
    }
  }
  return out;
}

/// Hook applied to router output before dispatch; identity for base-only serving.
struct IdentityHook {
  void operator()(int /*layer*/, Matrix<std::int32_t>& /*ids*/, std::span<const std::int32_t> /*aid*/) const {}
};

/// route -> hook -> dispatch -> grouped_matmul -> combine.
template <ExpertWeightSource W, typename Hook = IdentityHook>
MatrixF forward_layer(const MatrixF& hidden, std::span<const std::int32_t> aid, int layer, const MatrixF& router_weights,
                      const W& weights, const ModelConfig& cfg, Hook&& hook = {}) {
  require(hidden.cols() == static_cast<std::size_t>(cfg.hidden), ErrorKind::kConfig, "hidden width does not match model");
  TopKAssignment topk = route(hidden, router_weights, cfg.top_k);
  hook(layer, topk.ids, aid);
  const PermutedTokens permuted = dispatch(hidden, topk, weights.num_slots());
  const MatrixF expert_out = grouped_matmul(permuted, weights, cfg);
  return combine(expert_out, topk, permuted.inverse_perm);
}

}  // namespace esft
