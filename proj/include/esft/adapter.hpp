// Copyright 2026 The esft-serve Authors
// SPDX-License-Identifier: Apache-2.0

// Adapter files, the per-layer expert store, and the adapter registry that
// owns slot assignment and the expert map.
//
// Layout of one layer's virtual tensor (slots):
//
//   [0, M)                         base experts, loaded once, never evicted
//   [M + i*E_max, M + (i+1)*E_max) adapter i; only the first e_i^l are backed
//
// Adapter i's fine-tuned experts are placed in ascending base-expert-ID
// order, so expert j with rank r among the layer's fine-tuned IDs lands in
// slot M + i*E_max + r.

#pragma once

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "esft/analytics.hpp"
#include "esft/expert_memory.hpp"
#include "esft/io.hpp"
#include "esft/model.hpp"

namespace esft {

struct AdapterManifest {
  std::string name;
  std::uint64_t base_model_fingerprint = 0;
  DType dtype = DType::kF32;
  std::vector<std::vector<std::int32_t>> layers;  // fine-tuned base-expert IDs, ascending

  std::vector<int> counts() const {
    std::vector<int> c;
    for (const auto& ids : layers) c.push_back(static_cast<int>(ids.size()));
    return c;
  }

  std::size_t total_experts() const {
    std::size_t n = 0;
    for (const auto& ids : layers) n += ids.size();
    return n;
  }

  AdapterProfile profile() const { return AdapterProfile::from_counts(name, counts()); }

  /// Structural checks against a base model; E_max is checked at load time.
  void validate(const ModelConfig& cfg) const {
    require(base_model_fingerprint == cfg.fingerprint(), ErrorKind::kManifest,
            "adapter '" + name + "' was built for base model " + hex64(base_model_fingerprint) + ", serving " +
                hex64(cfg.fingerprint()));
    require(dtype == cfg.dtype, ErrorKind::kManifest, "adapter '" + name + "' dtype does not match the base model");
    require(layers.size() == static_cast<std::size_t>(cfg.num_layers), ErrorKind::kManifest,
            "adapter '" + name + "' has " + std::to_string(layers.size()) + " layers, model has " + std::to_string(cfg.num_layers));
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& ids = layers[l];
      for (std::size_t k = 0; k < ids.size(); ++k) {
        require(ids[k] >= 0 && ids[k] < cfg.num_experts, ErrorKind::kManifest,
                "adapter '" + name + "' layer " + std::to_string(l) + ": expert id " + std::to_string(ids[k]) + " out of range");
        require(k == 0 || ids[k - 1] < ids[k], ErrorKind::kManifest,
                "adapter '" + name + "' layer " + std::to_string(l) + ": expert ids not strictly ascending");
      }
    }
  }

  std::size_t weight_floats(const ModelConfig& cfg) const { return total_experts() * cfg.expert_floats(); }

  nlohmann::json to_json() const {
    return {{"format", "esft-adapter-v1"},
            {"name", name},
            {"base_model_fingerprint", hex64(base_model_fingerprint)},
            {"dtype", dtype_name(dtype)},
            {"num_layers", layers.size()},
            {"layers", layers}};
  }

  static AdapterManifest from_json(const nlohmann::json& j) {
    AdapterManifest m;
    try {
      m.name = j.at("name").get<std::string>();
      m.base_model_fingerprint = parse_hex64(j.at("base_model_fingerprint").get<std::string>());
      m.dtype = parse_dtype(j.value("dtype", std::string("f32")));
      m.layers = j.at("layers").get<std::vector<std::vector<std::int32_t>>>();
      if (j.contains("num_layers"))
        require(j.at("num_layers").get<std::size_t>() == m.layers.size(), ErrorKind::kManifest, "num_layers disagrees with layers");
    } catch (const nlohmann::json::exception& e) {
      raise(ErrorKind::kManifest, std::string("malformed adapter manifest: ") + e.what());
    }
    return m;
  }
};

/// Adapter directory: manifest.json + weights.bin (per layer ascending, per
/// fine-tuned expert ascending ID, gate/up/down row-major little-endian f32).
struct AdapterFiles {
  AdapterManifest manifest;
  std::vector<float> weights;

  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    io::write_text(dir / "manifest.json", manifest.to_json().dump(2) + "\n");
    io::write_f32_le(dir / "weights.bin", weights);
  }

  static AdapterFiles load(const std::filesystem::path& dir) {
    AdapterFiles f;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(io::read_text(dir / "manifest.json"));
    } catch (const nlohmann::json::exception& e) {
      raise(ErrorKind::kManifest, dir.string() + "/manifest.json: " + e.what());
    }
    f.manifest = AdapterManifest::from_json(j);
    f.weights = io::read_f32_le(dir / "weights.bin");
    return f;
  }
};

/// Per-layer expert counts requested from the synthesizer.
struct SyntheticTarget {
  std::optional<std::vector<int>> layer_counts;
  int max_experts = 0;    // used with avg_experts or sparsity
  double avg_experts = -1.0;
  double sparsity = -1.0;  // 1 - avg/max
};

/// Deterministic random adapter for a base model. Expert IDs per layer are a
/// seeded sample of [0, M); weights are fresh random experts.
inline AdapterFiles generate_synthetic_adapter(std::uint64_t seed, const ModelConfig& cfg, const SyntheticTarget& target,
                                               std::string name = {}) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0xADA));
  std::vector<int> counts;
  if (target.layer_counts) {
    counts = *target.layer_counts;
    require(counts.size() == static_cast<std::size_t>(cfg.num_layers), ErrorKind::kInput, "layer count list has wrong length");
  } else {
    double avg = target.avg_experts;
    if (avg < 0) {
      require(target.sparsity >= 0 && target.sparsity < 1, ErrorKind::kInput, "synthetic target needs avg or sparsity in [0,1)");
      avg = target.max_experts * (1.0 - target.sparsity);
    }
    counts = synthesize_layer_counts(target.max_experts, avg, cfg.num_layers, rng);
  }
  AdapterFiles f;
  f.manifest.name = name.empty() ? "synthetic-" + std::to_string(seed) : std::move(name);
  f.manifest.base_model_fingerprint = cfg.fingerprint();
  f.manifest.dtype = cfg.dtype;
  std::vector<std::int32_t> pool(static_cast<std::size_t>(cfg.num_experts));
  for (int c : counts) {
    require(c >= 0 && c <= cfg.num_experts, ErrorKind::kInput, "expert count outside [0, M]");
    std::iota(pool.begin(), pool.end(), 0);
    for (int k = 0; k < c; ++k) {
      const auto pick = static_cast<std::size_t>(rng.uniform_int(k, cfg.num_experts - 1));
      std::swap(pool[static_cast<std::size_t>(k)], pool[pick]);
    }
    std::vector<std::int32_t> ids(pool.begin(), pool.begin() + c);
    std::sort(ids.begin(), ids.end());
    f.manifest.layers.push_back(std::move(ids));
  }
  for (std::size_t e = 0; e < f.manifest.total_experts(); ++e) {
    const auto packed = ExpertWeights::random(cfg, rng).pack();
    f.weights.insert(f.weights.end(), packed.begin(), packed.end());
  }
  return f;
}

/// Base weights with the adapter's experts substituted at their original
/// indices. Built straight from the manifest, independent of the registry.
inline std::vector<StackedExperts> build_merged_model(const BaseModel& base, const AdapterFiles* adapter) {
  std::vector<StackedExperts> merged = base.experts;
  if (!adapter) return merged;
  const ModelConfig& cfg = base.config;
  adapter->manifest.validate(cfg);
  require(adapter->weights.size() == adapter->manifest.weight_floats(cfg), ErrorKind::kManifest, "weights blob size mismatch");
  const std::size_t ef = cfg.expert_floats();
  std::size_t off = 0;
  for (std::size_t l = 0; l < adapter->manifest.layers.size(); ++l) {
    for (std::int32_t j : adapter->manifest.layers[l]) {
      merged[l].set(static_cast<std::size_t>(j), std::span<const float>(adapter->weights).subspan(off, ef));
      off += ef;
    }
  }
  return merged;
}

/// Pool plus one virtual weight tensor per layer sized for M + N*E_max slots.
/// The base experts are mapped and written at construction.
class ExpertStore {
 public:
  ExpertStore(const BaseModel& base, int max_adapters, int e_max, PageConfig page_cfg, Backing backing = Backing::kMemory)
      : config_(base.config), max_adapters_(max_adapters), e_max_(e_max), pool_(page_cfg, backing) {
    require(max_adapters >= 0, ErrorKind::kConfig, "N must be >= 0");
    require(e_max >= 1, ErrorKind::kConfig, "E_max must be >= 1");
    const std::size_t m = static_cast<std::size_t>(config_.num_experts);
    const std::size_t slots = m + static_cast<std::size_t>(max_adapters) * static_cast<std::size_t>(e_max);
    for (int l = 0; l < config_.num_layers; ++l) {
      layers_.emplace_back(pool_, slots, config_.expert_bytes(), l);
      auto& t = layers_.back();
      t.map_experts({l, 0, m});
      if (pool_.backed())
        for (std::size_t e = 0; e < m; ++e) t.write_expert(e, base.experts[static_cast<std::size_t>(l)].expert(e));
    }
  }

  ExpertStore(const ExpertStore&) = delete;
  ExpertStore& operator=(const ExpertStore&) = delete;

  const ModelConfig& config() const { return config_; }
  int max_adapters() const { return max_adapters_; }
  int e_max() const { return e_max_; }
  std::size_t num_slots() const { return layers_.front().num_slots(); }
  PhysicalMemoryPool& pool() { return pool_; }
  const PhysicalMemoryPool& pool() const { return pool_; }
  VirtualWeightTensor& layer(int l) { return layers_[static_cast<std::size_t>(l)]; }
  const VirtualWeightTensor& layer(int l) const { return layers_[static_cast<std::size_t>(l)]; }

  std::size_t pages_mapped() const {
    std::size_t n = 0;
    for (const auto& t : layers_) n += t.pages_mapped();
    return n;
  }

  /// Pages the base model needs (for sizing pools).
  static std::size_t base_pages(const ModelConfig& cfg, std::size_t page_size) {
    return cfg.num_layers * page_cover(0, static_cast<std::uint64_t>(cfg.num_experts) * cfg.expert_bytes(), page_size).size();
  }

  /// Pages for the whole virtual span of every layer: enough for any load mix.
  static std::size_t full_span_pages(const ModelConfig& cfg, int max_adapters, int e_max, std::size_t page_size) {
    const std::uint64_t slots = static_cast<std::uint64_t>(cfg.num_experts) + static_cast<std::uint64_t>(max_adapters) * e_max;
    return cfg.num_layers * page_cover(0, slots * cfg.expert_bytes(), page_size).size();
  }

 private:
  ModelConfig config_;
  int max_adapters_;
  int e_max_;
  PhysicalMemoryPool pool_;
  std::vector<VirtualWeightTensor> layers_;
};

/// Immutable expert map for every layer. Each layer's table has N+1 rows of
/// M entries; row 0 is the identity used for base-model tokens (AID -1), row
/// i+1 is adapter i. Forward passes hold one snapshot for a whole step.
class ExpertMapSnapshot {
 public:
  ExpertMapSnapshot(int num_layers, int max_adapters, int num_experts, std::uint64_t version = 0)
      : layers_(num_layers), n_(max_adapters), m_(num_experts), version_(version),
        tables_(static_cast<std::size_t>(num_layers) * (max_adapters + 1) * num_experts) {
    for (int l = 0; l < layers_; ++l)
      for (int r = 0; r <= n_; ++r)
        for (int j = 0; j < m_; ++j) tables_[index(l, r, j)] = j;
  }

  int num_layers() const { return layers_; }
  int max_adapters() const { return n_; }
  int num_experts() const { return m_; }
  std::uint64_t version() const { return version_; }

  /// Pi^l[i, j]; i = -1 yields j.
  std::int32_t at(int layer, int adapter, int expert) const { return tables_[index(layer, adapter + 1, expert)]; }

  /// (N+1) x M table of one layer, identity row first.
  std::span<const std::int32_t> layer_table(int layer) const {
    const std::size_t rows = static_cast<std::size_t>(n_ + 1) * m_;
    return {tables_.data() + static_cast<std::size_t>(layer) * rows, rows};
  }

  /// Row i (adapter) of Pi^l.
  std::span<const std::int32_t> row(int layer, int adapter) const {
    return layer_table(layer).subspan(static_cast<std::size_t>(adapter + 1) * m_, static_cast<std::size_t>(m_));
  }

  bool operator==(const ExpertMapSnapshot& o) const {
    return layers_ == o.layers_ && n_ == o.n_ && m_ == o.m_ && tables_ == o.tables_;
  }

 private:
  friend class AdapterRegistry;
  std::size_t index(int l, int row, int j) const {
    return (static_cast<std::size_t>(l) * (n_ + 1) + static_cast<std::size_t>(row)) * m_ + static_cast<std::size_t>(j);
  }
  std::int32_t& mut(int l, int adapter, int j) { return tables_[index(l, adapter + 1, j)]; }

  int layers_, n_, m_;
  std::uint64_t version_;
  std::vector<std::int32_t> tables_;
};

/// Slot assignment and adapter lifecycle over an ExpertStore. Mutations are
/// serialized by an internal mutex and must happen between inference steps.
class AdapterRegistry {
 public:
  explicit AdapterRegistry(ExpertStore& store)
      : store_(&store), slots_(static_cast<std::size_t>(store.max_adapters())), pins_(slots_.size(), 0) {
    const ModelConfig& c = store.config();
    snapshot_ = std::make_shared<const ExpertMapSnapshot>(c.num_layers, store.max_adapters(), c.num_experts, 0);
  }

  int capacity() const { return store_->max_adapters(); }
  int e_max() const { return store_->e_max(); }
  ExpertStore& store() { return *store_; }
  const ExpertStore& store() const { return *store_; }

  /// Delta_i = M + i * E_max.
  std::size_t slot_offset(int adapter) const {
    return static_cast<std::size_t>(store_->config().num_experts) + static_cast<std::size_t>(adapter) * e_max();
  }

  bool is_loaded(int adapter) const {
    std::lock_guard lock(mu_);
    return valid_index(adapter) && slots_[static_cast<std::size_t>(adapter)].has_value();
  }

  int loaded_count() const {
    std::lock_guard lock(mu_);
    return static_cast<int>(std::count_if(slots_.begin(), slots_.end(), [](const auto& s) { return s.has_value(); }));
  }

  std::optional<AdapterManifest> manifest(int adapter) const {
    std::lock_guard lock(mu_);
    if (!valid_index(adapter) || !slots_[static_cast<std::size_t>(adapter)]) return std::nullopt;
    return slots_[static_cast<std::size_t>(adapter)]->manifest;
  }

  /// Maps and fills adapter slots layer by layer, then publishes a new map.
  /// Returns the adapter index (first free slot). On any failure every layer
  /// already mapped is unmapped again.
  int load_adapter(const AdapterManifest& manifest, std::span<const float> weights) {
    std::lock_guard lock(mu_);
    const ModelConfig& cfg = store_->config();
    manifest.validate(cfg);
    for (std::size_t l = 0; l < manifest.layers.size(); ++l)
      require(manifest.layers[l].size() <= static_cast<std::size_t>(e_max()), ErrorKind::kManifest,
              "adapter '" + manifest.name + "' has " + std::to_string(manifest.layers[l].size()) + " experts in layer " +
                  std::to_string(l) + ", E_max is " + std::to_string(e_max()));
    // Accounting-only stores never read weights, so an empty blob is accepted.
    const bool skip_weights = !store_->pool().backed() && weights.empty();
    require(skip_weights || weights.size() == manifest.weight_floats(cfg), ErrorKind::kManifest,
            "adapter '" + manifest.name + "': weights hold " + std::to_string(weights.size()) + " floats, expected " +
                std::to_string(manifest.weight_floats(cfg)));
    const auto free_it = std::find_if(slots_.begin(), slots_.end(), [](const auto& s) { return !s.has_value(); });
    if (free_it == slots_.end())
      raise(ErrorKind::kCapacity, "no free adapter slot (capacity " + std::to_string(capacity()) + ")");
    const int index = static_cast<int>(free_it - slots_.begin());
    const std::size_t delta = slot_offset(index);

    int mapped_layers = 0;
    try {
      const std::size_t ef = cfg.expert_floats();
      std::size_t off = 0;
      for (int l = 0; l < cfg.num_layers; ++l) {
        const auto& ids = manifest.layers[static_cast<std::size_t>(l)];
        auto& tensor = store_->layer(l);
        tensor.map_experts({l, delta, ids.size()});
        ++mapped_layers;
        if (store_->pool().backed())
          for (std::size_t r = 0; r < ids.size(); ++r, off += ef) tensor.write_expert(delta + r, weights.subspan(off, ef));
      }
    } catch (...) {
      for (int l = 0; l < mapped_layers; ++l)
        store_->layer(l).unmap_experts({l, delta, manifest.layers[static_cast<std::size_t>(l)].size()});
      throw;
    }
    slots_[static_cast<std::size_t>(index)] = Loaded{manifest};
    publish();
    return index;
  }

  /// Unmaps the adapter's ranges and resets its map rows to identity.
  void evict_adapter(int adapter) {
    std::lock_guard lock(mu_);
    require(valid_index(adapter) && slots_[static_cast<std::size_t>(adapter)], ErrorKind::kUsage,
            "adapter " + std::to_string(adapter) + " is not loaded");
    require(pins_[static_cast<std::size_t>(adapter)] == 0, ErrorKind::kUsage,
            "adapter " + std::to_string(adapter) + " has " + std::to_string(pins_[static_cast<std::size_t>(adapter)]) +
                " in-flight requests");
    const auto& manifest = slots_[static_cast<std::size_t>(adapter)]->manifest;
    const std::size_t delta = slot_offset(adapter);
    for (int l = 0; l < store_->config().num_layers; ++l)
      store_->layer(l).unmap_experts({l, delta, manifest.layers[static_cast<std::size_t>(l)].size()});
    slots_[static_cast<std::size_t>(adapter)].reset();
    publish();
  }

  /// In-flight reference counting; pinned adapters cannot be evicted.
  void pin(int adapter) {
    std::lock_guard lock(mu_);
    require(valid_index(adapter) && slots_[static_cast<std::size_t>(adapter)], ErrorKind::kUsage,
            "cannot pin unloaded adapter " + std::to_string(adapter));
    ++pins_[static_cast<std::size_t>(adapter)];
  }
  void unpin(int adapter) {
    std::lock_guard lock(mu_);
    require(valid_index(adapter) && pins_[static_cast<std::size_t>(adapter)] > 0, ErrorKind::kInvariant,
            "unpin without pin on adapter " + std::to_string(adapter));
    --pins_[static_cast<std::size_t>(adapter)];
  }
  int pins(int adapter) const {
    std::lock_guard lock(mu_);
    return pins_[static_cast<std::size_t>(adapter)];
  }

  /// Current expert map; rows of unloaded adapters are identity.
  std::shared_ptr<const ExpertMapSnapshot> snapshot() const {
    std::lock_guard lock(mu_);
    return snapshot_;
  }

  std::uint64_t version() const {
    std::lock_guard lock(mu_);
    return snapshot_->version();
  }

 private:
  struct Loaded {
    AdapterManifest manifest;
  };

  bool valid_index(int adapter) const { return adapter >= 0 && static_cast<std::size_t>(adapter) < slots_.size(); }

  // Rebuilds every row from the loaded manifests.
  void publish() {
    const ModelConfig& cfg = store_->config();
    auto next = std::make_shared<ExpertMapSnapshot>(cfg.num_layers, capacity(), cfg.num_experts, snapshot_->version() + 1);
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      if (!slots_[i]) continue;
      const std::size_t delta = slot_offset(static_cast<int>(i));
      for (int l = 0; l < cfg.num_layers; ++l) {
        const auto& ids = slots_[i]->manifest.layers[static_cast<std::size_t>(l)];
        for (std::size_t r = 0; r < ids.size(); ++r) next->mut(l, static_cast<int>(i), ids[r]) = static_cast<std::int32_t>(delta + r);
      }
    }
    snapshot_ = std::move(next);
  }

  ExpertStore* store_;
  mutable std::mutex mu_;
  std::vector<std::optional<Loaded>> slots_;
  std::vector<int> pins_;
  std::shared_ptr<const ExpertMapSnapshot> snapshot_;
};

/// Expert map of the registry's loaded adapters.
inline std::shared_ptr<const ExpertMapSnapshot> build_expert_map(const AdapterRegistry& registry) { return registry.snapshot(); }

}  // namespace esft
