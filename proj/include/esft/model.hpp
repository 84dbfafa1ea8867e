// Copyright 2026 The esft-serve Authors
// SPDX-License-Identifier: Apache-2.0

// Toy MoE language model: a stack of MoE layers with residual connections
// between a pseudo-embedding of token IDs and a tied argmax readout. There are
// no attention layers; each token's computation is independent.

#pragma once

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "esft/io.hpp"
#include "esft/moe.hpp"
#include "esft/random.hpp"

namespace esft {

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

inline std::uint64_t parse_hex64(const std::string& s) {
  require(!s.empty() && s.size() <= 16, ErrorKind::kInput, "bad fingerprint '" + s + "'");
  std::size_t pos = 0;
  const std::uint64_t v = std::stoull(s, &pos, 16);
  require(pos == s.size(), ErrorKind::kInput, "bad fingerprint '" + s + "'");
  return v;
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"num_layers", c.num_layers}, {"num_experts", c.num_experts}, {"top_k", c.top_k},
          {"hidden", c.hidden},         {"intermediate", c.intermediate}, {"vocab", c.vocab},
          {"dtype", dtype_name(c.dtype)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.num_layers = j.at("num_layers").get<int>();
  c.num_experts = j.at("num_experts").get<int>();
  c.top_k = j.at("top_k").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.intermediate = j.at("intermediate").get<int>();
  c.vocab = j.value("vocab", c.vocab);
  c.dtype = parse_dtype(j.value("dtype", std::string("f32")));
  return c;
}

struct BaseModel {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::vector<MatrixF> routers;         // per layer [M, H]
  std::vector<StackedExperts> experts;  // per layer, M slots
  MatrixF embedding;                    // [V, H], derived from seed

  static MatrixF make_embedding(const ModelConfig& cfg, std::uint64_t seed) {
    MatrixF e(static_cast<std::size_t>(cfg.vocab), static_cast<std::size_t>(cfg.hidden));
    Rng rng(mix_seed(seed, 0xE11B));
    for (float& v : e.flat()) v = rng.uniform_float(-1.0f, 1.0f);
    return e;
  }

  static BaseModel generate(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    BaseModel m;
    m.config = cfg;
    m.seed = seed;
    const auto ne = static_cast<std::size_t>(cfg.num_experts), h = static_cast<std::size_t>(cfg.hidden);
    for (int l = 0; l < cfg.num_layers; ++l) {
      Rng rng(mix_seed(seed, 0x1000 + static_cast<std::uint64_t>(l)));
      MatrixF router(ne, h);
      for (float& v : router.flat()) v = rng.uniform_float(-0.5f, 0.5f);
      m.routers.push_back(std::move(router));
      StackedExperts stack(cfg, ne);
      for (std::size_t e = 0; e < ne; ++e) stack.set(e, ExpertWeights::random(cfg, rng).pack());
      m.experts.push_back(std::move(stack));
    }
    m.embedding = make_embedding(cfg, seed);
    return m;
  }

  std::span<const float> embed(std::int32_t token) const {
    require(token >= 0 && token < config.vocab, ErrorKind::kInput, "token id " + std::to_string(token) + " outside vocab");
    return embedding.row(static_cast<std::size_t>(token));
  }

  /// Argmax of the tied readout; ties go to the lower token id.
  std::int32_t next_token(std::span<const float> hidden) const {
    std::int32_t best = 0;
    float best_score = -INFINITY;
    for (std::size_t v = 0; v < embedding.rows(); ++v) {
      const auto e = embedding.row(v);
      float acc = 0.0f;
      for (std::size_t d = 0; d < e.size(); ++d) acc += e[d] * hidden[d];
      if (acc > best_score) {
        best_score = acc;
        best = static_cast<std::int32_t>(v);
      }
    }
    return best;
  }

  /// Checkpoint: model.json, router.bin and one layer_NNN.bin per layer
  /// holding the M experts in ascending ID order (gate, up, down; row-major
  /// little-endian f32).
  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json j = to_json(config);
    j["format"] = "esft-base-v1";
    j["seed"] = seed;
    j["fingerprint"] = hex64(config.fingerprint());
    io::write_text(dir / "model.json", j.dump(2) + "\n");
    std::vector<float> router_blob;
    for (const auto& r : routers) router_blob.insert(router_blob.end(), r.flat().begin(), r.flat().end());
    io::write_f32_le(dir / "router.bin", router_blob);
    for (int l = 0; l < config.num_layers; ++l) {
      std::vector<float> blob;
      const auto& s = experts[static_cast<std::size_t>(l)];
      for (std::size_t e = 0; e < s.num_slots(); ++e) blob.insert(blob.end(), s.expert(e).begin(), s.expert(e).end());
      io::write_f32_le(dir / layer_file(l), blob);
    }
  }

  static BaseModel load(const std::filesystem::path& dir) {
    const auto j = nlohmann::json::parse(io::read_text(dir / "model.json"));
    BaseModel m;
    m.config = model_config_from_json(j);
    m.config.validate();
    m.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("fingerprint"))
      require(parse_hex64(j.at("fingerprint").get<std::string>()) == m.config.fingerprint(), ErrorKind::kInput,
              dir.string() + ": fingerprint does not match the model config");
    const auto ne = static_cast<std::size_t>(m.config.num_experts), h = static_cast<std::size_t>(m.config.hidden);
    const auto router_blob = io::read_f32_le(dir / "router.bin");
    require(router_blob.size() == static_cast<std::size_t>(m.config.num_layers) * ne * h, ErrorKind::kInput,
            "router.bin has the wrong size");
    for (int l = 0; l < m.config.num_layers; ++l) {
      const auto first = router_blob.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(l) * ne * h);
      m.routers.emplace_back(ne, h, std::vector<float>(first, first + static_cast<std::ptrdiff_t>(ne * h)));
      auto blob = io::read_f32_le(dir / layer_file(l));
      require(blob.size() == ne * m.config.expert_floats(), ErrorKind::kInput, layer_file(l) + " has the wrong size");
      m.experts.emplace_back(m.config, std::move(blob));
    }
    m.embedding = make_embedding(m.config, m.seed);
    return m;
  }

  static std::string layer_file(int l) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "layer_%03d.bin", l);
    return buf;
  }
};

/// Runs the layer stack: h <- h + moe_l(h). `weights_for_layer(l)` returns the
/// expert source used for layer l; `hook` is applied to every layer's router
/// output.
/// `per_layer`, when given, receives the hidden state after every layer.
template <typename WeightsForLayer, typename Hook = IdentityHook>
MatrixF forward_hidden(const BaseModel& model, std::span<const std::int32_t> tokens, std::span<const std::int32_t> aid,
                       WeightsForLayer&& weights_for_layer, Hook&& hook = {}, std::vector<MatrixF>* per_layer = nullptr) {
  const ModelConfig& cfg = model.config;
  require(aid.size() == tokens.size(), ErrorKind::kConfig, "token and AID arrays differ in length");
  MatrixF h(tokens.size(), static_cast<std::size_t>(cfg.hidden));
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto e = model.embed(tokens[t]);
    std::copy(e.begin(), e.end(), h.row(t).begin());
  }
  for (int l = 0; l < cfg.num_layers; ++l) {
    const MatrixF out = forward_layer(h, aid, l, model.routers[static_cast<std::size_t>(l)], weights_for_layer(l), cfg, hook);
    auto dst = h.flat();
    const auto src = out.flat();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    if (per_layer) per_layer->push_back(h);
  }
  return h;
}

}  // namespace esft
