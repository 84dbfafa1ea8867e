// Copyright 2026 The esft-serve Authors
// SPDX-License-Identifier: Apache-2.0

// Subcommands of the esft command-line tool. run_cli() is the whole program
// minus main(), so tests can drive it in-process.
//
// Exit codes: 0 success, 1 validation failure (an oracle check failed),
// 2 usage / input / configuration error, 3 internal invariant violation.

#pragma once

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "esft/adapter.hpp"
#include "esft/analytics.hpp"
#include "esft/config.hpp"
#include "esft/profile_io.hpp"
#include "esft/reroute.hpp"
#include "esft/serving.hpp"
#include "esft/workload.hpp"

namespace esft::cli {

enum ExitCode : int { kOk = 0, kValidationFailure = 1, kUsageError = 2, kInternalError = 3 };

inline int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::kValidation: return kValidationFailure;
    case ErrorKind::kInvariant:
    case ErrorKind::kMemoryFault: return kInternalError;
    default: return kUsageError;
  }
}

/// Human text to `out`; JSON-lines records to a file, or to `out` in place of
/// the text when the path is "-".
class Reporter {
 public:
  Reporter(std::ostream& out, const std::string& jsonl_path) : out_(&out) {
    if (jsonl_path == "-") {
      json_ = out_;
      quiet_ = true;
    } else if (!jsonl_path.empty()) {
      file_ = std::make_unique<std::ofstream>(jsonl_path, std::ios::trunc);
      require(static_cast<bool>(*file_), ErrorKind::kInput, "cannot open " + jsonl_path + " for writing");
      json_ = file_.get();
    }
  }

  void record(const nlohmann::json& j) {
    if (json_) *json_ << j.dump() << '\n';
  }

  std::ostream& text() { return quiet_ ? null_ : *out_; }

 private:
  std::ostream* out_;
  std::ostream* json_ = nullptr;
  std::unique_ptr<std::ofstream> file_;
  bool quiet_ = false;
  std::ostringstream null_;
};

/// Flags shared by the subcommands that build an engine. Each maps onto one
/// EngineConfig field and only overrides it when given.
struct EngineFlags {
  std::string config_path;
  std::string model_dir;
  std::vector<std::string> adapter_dirs;
  int layers = 0, experts = 0, top_k = 0, hidden = 0, intermediate = 0, vocab = 0;
  std::string dtype;
  std::size_t page_size = 0, pool_capacity = 0;
  int max_adapters = 0, e_max = 0;
  std::uint64_t seed = 0;
  int token_budget = 0;
  std::string clock;
  double alpha = 0, rate = 0, duration = 0;

  std::vector<std::pair<CLI::Option*, std::function<void(EngineConfig&)>>> setters;
  bool pool_capacity_given = false;
  bool max_adapters_given = false;

  template <typename T>
  void add(CLI::App* app, const std::string& name, T& var, const std::string& help, std::function<void(EngineConfig&)> apply) {
    setters.emplace_back(app->add_option(name, var, help), std::move(apply));
  }

  void add_config(CLI::App* app) {
    app->add_option("--config", config_path, "engine config file (JSON)")->check(CLI::ExistingFile);
    add(app, "--seed", seed, "random seed", [this](EngineConfig& c) { c.seed = seed; });
  }

  void add_model(CLI::App* app) {
    add(app, "--model", model_dir, "base model checkpoint directory", [this](EngineConfig& c) { c.model_dir = model_dir; });
    add(app, "--layers", layers, "L, number of MoE layers", [this](EngineConfig& c) { c.model.num_layers = layers; });
    add(app, "--experts", experts, "M, routed experts per layer", [this](EngineConfig& c) { c.model.num_experts = experts; });
    add(app, "--top-k", top_k, "K, experts per token", [this](EngineConfig& c) { c.model.top_k = top_k; });
    add(app, "--hidden", hidden, "H, hidden size", [this](EngineConfig& c) { c.model.hidden = hidden; });
    add(app, "--intermediate", intermediate, "I, expert intermediate size",
        [this](EngineConfig& c) { c.model.intermediate = intermediate; });
    add(app, "--vocab", vocab, "token vocabulary size", [this](EngineConfig& c) { c.model.vocab = vocab; });
    add(app, "--dtype", dtype, "f32 | f16 | bf16 (non-f32 only for accounting)",
        [this](EngineConfig& c) { c.model.dtype = parse_dtype(dtype); });
  }

  void add_adapters(CLI::App* app) {
    add(app, "--adapter", adapter_dirs, "adapter directory (repeatable)", [this](EngineConfig& c) {
      c.adapter_dirs.assign(adapter_dirs.begin(), adapter_dirs.end());
    });
  }

  void add_memory(CLI::App* app) {
    add(app, "--page-size", page_size, "physical page size in bytes", [this](EngineConfig& c) { c.page.page_size = page_size; });
    add(app, "--pool-capacity", pool_capacity, "physical pool capacity in pages (default: whole virtual span)",
        [this](EngineConfig& c) {
          c.page.pool_capacity = pool_capacity;
          pool_capacity_given = true;
        });
    add(app, "--e-max", e_max, "E_max, expert slots per adapter per layer", [this](EngineConfig& c) { c.e_max = e_max; });
    add(app, "--max-adapters", max_adapters, "N, adapter capacity", [this](EngineConfig& c) {
      c.max_adapters = max_adapters;
      max_adapters_given = true;
    });
  }

  void add_scheduler(CLI::App* app) {
    add(app, "--token-budget", token_budget, "tokens per scheduler step",
        [this](EngineConfig& c) { c.scheduler.token_budget = token_budget; });
    add(app, "--clock", clock, "simulated | wall", [this](EngineConfig& c) { c.scheduler.clock = parse_clock(clock); });
    add(app, "--alpha", alpha, "power-law skew in (0, 1]", [this](EngineConfig& c) { c.workload.alpha = alpha; });
    add(app, "--rate", rate, "aggregate arrival rate lambda (requests/s)", [this](EngineConfig& c) { c.workload.rate = rate; });
    add(app, "--duration", duration, "trace horizon (s)", [this](EngineConfig& c) { c.workload.duration = duration; });
  }

  EngineConfig resolve() {
    EngineConfig c;
    if (!config_path.empty()) {
      c = EngineConfig::load(config_path);
      const auto j = nlohmann::json::parse(io::read_text(config_path));
      pool_capacity_given = j.contains("page") && j.at("page").contains("pool_capacity");
      max_adapters_given = j.contains("max_adapters");
    }
    for (auto& [opt, apply] : setters)
      if (opt->count() > 0) apply(c);
    c.validate();
    return c;
  }
};

inline BaseModel load_or_generate_model(const EngineConfig& c) {
  if (c.model_dir) return BaseModel::load(*c.model_dir);
  return BaseModel::generate(c.model, c.seed);
}

/// Adapters from the configured directories, or `count` synthetic ones with
/// up to E_max experts per layer.
inline std::vector<AdapterFiles> load_or_generate_adapters(const EngineConfig& c, const BaseModel& model, int count) {
  std::vector<AdapterFiles> out;
  for (const auto& d : c.adapter_dirs) out.push_back(AdapterFiles::load(d));
  if (!out.empty()) return out;
  SyntheticTarget target;
  target.max_experts = std::min(c.e_max, model.config.num_experts);
  target.sparsity = 0.35;
  for (int i = 0; i < count; ++i)
    out.push_back(generate_synthetic_adapter(mix_seed(c.seed, 0xA000 + static_cast<std::uint64_t>(i)), model.config, target,
                                             "synthetic-" + std::to_string(i)));
  return out;
}

inline PageConfig effective_pages(const EngineConfig& c, const EngineFlags& f, const ModelConfig& model, int max_adapters) {
  PageConfig p = c.page;
  if (!f.pool_capacity_given) p.pool_capacity = std::max<std::size_t>(1, ExpertStore::full_span_pages(model, max_adapters, c.e_max, p.page_size));
  return p;
}

inline std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

// ---------------------------------------------------------------- analyze

struct AnalyzeArgs {
  EngineFlags engine;
  std::string profiles;
  std::string jsonl;
  int e_max = 0;
};

inline int cmd_analyze(AnalyzeArgs& a, std::ostream& out) {
  EngineConfig c = a.engine.resolve();
  Reporter rep(out, a.jsonl);
  std::vector<AdapterProfile> profiles;
  if (!a.profiles.empty()) profiles = parse_profiles(io::read_text(a.profiles));
  for (const auto& d : c.adapter_dirs) {
    try {
      profiles.push_back(AdapterManifest::from_json(nlohmann::json::parse(io::read_text(d / "manifest.json"))).profile());
    } catch (const nlohmann::json::exception& e) {
      raise(ErrorKind::kManifest, d.string() + "/manifest.json: " + e.what());
    }
  }
  // Without an explicit E_max the smallest feasible one is used.
  int e_max = 1;
  for (const auto& p : profiles) e_max = std::max(e_max, p.max_experts());
  if (a.e_max > 0) e_max = a.e_max;
  check_padding_feasible(profiles, e_max);
  const int m = c.model.num_experts;

  auto& t = rep.text();
  t << std::left << std::setw(22) << "adapter" << std::right << std::setw(6) << "max" << std::setw(9) << "avg" << std::setw(10)
    << "sparsity" << '\n';
  for (const auto& p : profiles) {
    const double s = sparsity_factor(p);
    t << std::left << std::setw(22) << p.name << std::right << std::setw(6) << p.max_experts() << std::setw(9) << fixed(p.avg_experts(), 2)
      << std::setw(10) << fixed(s, 3) << '\n';
    rep.record({{"record", "adapter"}, {"name", p.name}, {"max_experts", p.max_experts()}, {"avg_experts", p.avg_experts()}, {"sparsity", s}});
  }
  const double f = fragmentation_factor(profiles, m, e_max);
  t << "M=" << m << " N=" << profiles.size() << " E_max=" << e_max << "  F_mem=" << fixed(f, 3) << '\n';
  rep.record({{"record", "fragmentation"}, {"num_experts", m}, {"num_adapters", profiles.size()}, {"e_max", e_max}, {"f_mem", f}});

  // Profiles with per-layer counts must match the model depth for the dry run.
  bool depth_ok = true;
  for (const auto& p : profiles)
    if (p.has_layer_counts() && p.layer_counts.size() != static_cast<std::size_t>(c.model.num_layers)) depth_ok = false;
  if (!depth_ok) {
    t << "dry run skipped: profile depth differs from --layers " << c.model.num_layers << '\n';
    return kOk;
  }
  const DryRunReport d = dry_run_accounting(profiles, c.model, c.page.page_size, e_max, c.seed);
  t << "dry run: L=" << c.model.num_layers << " expert=" << d.expert_size << " B page=" << d.page_size << " B\n"
    << "  padded adapter bytes  " << d.padded_bytes << '\n'
    << "  used adapter bytes    " << d.used_bytes << '\n'
    << "  mapped adapter bytes  " << d.mapped_bytes << " (" << d.pages_mapped << " pages)\n"
    << "  mapped / padded       " << fixed(d.mapped_over_padded(), 4) << '\n'
    << "  returned to KV cache  " << d.kv_budget_delta << " B\n";
  rep.record({{"record", "dry_run"},
              {"num_layers", c.model.num_layers},
              {"expert_bytes", d.expert_size},
              {"page_size", d.page_size},
              {"padded_bytes", d.padded_bytes},
              {"padded_page_bytes", d.padded_page_bytes},
              {"used_bytes", d.used_bytes},
              {"mapped_bytes", d.mapped_bytes},
              {"pages_mapped", d.pages_mapped},
              {"base_pages", d.base_pages},
              {"kv_budget_delta", d.kv_budget_delta},
              {"mapped_over_padded", d.mapped_over_padded()},
              {"adapter_pages", d.adapter_pages}});
  return kOk;
}

// ---------------------------------------------------------------- gen-model

struct GenModelArgs {
  EngineFlags engine;
  std::string out_dir;
};

inline int cmd_gen_model(GenModelArgs& a, std::ostream& out) {
  EngineConfig c = a.engine.resolve();
  const BaseModel m = BaseModel::generate(c.model, c.seed);
  m.save(a.out_dir);
  out << "wrote " << a.out_dir << " (L=" << m.config.num_layers << " M=" << m.config.num_experts << " K=" << m.config.top_k
      << " H=" << m.config.hidden << " I=" << m.config.intermediate << ", fingerprint " << hex64(m.config.fingerprint()) << ")\n";
  return kOk;
}

// ---------------------------------------------------------------- gen-adapters

struct GenAdaptersArgs {
  EngineFlags engine;
  std::string out_dir;
  std::string profiles;
  int count = 3;
  int max_experts = 0;
  double sparsity = 0.35;
};

inline int cmd_gen_adapters(GenAdaptersArgs& a, std::ostream& out) {
  EngineConfig c = a.engine.resolve();
  const BaseModel model = load_or_generate_model(c);
  const ModelConfig& cfg = model.config;
  std::vector<std::pair<std::string, SyntheticTarget>> targets;
  if (!a.profiles.empty()) {
    for (const auto& p : parse_profiles(io::read_text(a.profiles))) {
      SyntheticTarget t;
      if (p.has_layer_counts()) {
        t.layer_counts = p.layer_counts;
      } else {
        t.max_experts = p.summary_max;
        t.avg_experts = p.summary_avg;
      }
      targets.emplace_back(p.name, t);
    }
  } else {
    require(a.count >= 0, ErrorKind::kInput, "--count must be >= 0");
    for (int i = 0; i < a.count; ++i) {
      SyntheticTarget t;
      t.max_experts = a.max_experts > 0 ? a.max_experts : std::min(c.e_max, cfg.num_experts);
      t.sparsity = a.sparsity;
      targets.emplace_back("adapter-" + std::to_string(i), t);
    }
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& [name, target] = targets[i];
    const AdapterFiles f = generate_synthetic_adapter(mix_seed(c.seed, fnv1a(name) + i), cfg, target, name);
    const auto dir = std::filesystem::path(a.out_dir) / name;
    f.save(dir);
    const AdapterProfile p = f.manifest.profile();
    out << dir.string() << ": " << f.manifest.total_experts() << " experts, max " << p.max_experts() << ", avg "
        << fixed(p.avg_experts(), 2) << '\n';
  }
  return kOk;
}

// ---------------------------------------------------------------- verify

struct VerifyArgs {
  EngineFlags engine;
  int synthetic = 3;
  VerifySpec spec;
  std::string jsonl;
};

inline int cmd_verify(VerifyArgs& a, std::ostream& out) {
  EngineConfig c = a.engine.resolve();
  Reporter rep(out, a.jsonl);
  const BaseModel model = load_or_generate_model(c);
  const auto adapters = load_or_generate_adapters(c, model, a.synthetic);
  const int n = static_cast<int>(adapters.size());
  const VerifyReport r = verify_equivalence(model, adapters, effective_pages(c, a.engine, model.config, n), c.e_max, a.spec);
  rep.text() << "verify: " << r.trials << " trials, " << r.tokens << " tokens, " << adapters.size() << " adapters, "
             << r.adapter_slot_hits << " adapter-slot routings\n"
             << "max |deviation| = " << r.max_abs_deviation << (r.passed() ? "  PASS" : "  FAIL") << '\n';
  for (const auto& line : r.triage) rep.text() << "  " << line << '\n';
  rep.record({{"record", "verify"},
              {"trials", r.trials},
              {"tokens", r.tokens},
              {"adapters", adapters.size()},
              {"adapter_slot_hits", r.adapter_slot_hits},
              {"max_abs_deviation", r.max_abs_deviation},
              {"bit_identical", r.bit_identical},
              {"passed", r.passed()},
              {"triage", r.triage}});
  return r.passed() ? kOk : kValidationFailure;
}

// ---------------------------------------------------------------- serve-bench

struct ServeBenchArgs {
  EngineFlags engine;
  int num_adapters = 5;
  std::string trace_in;
  std::string trace_out;
  std::string jsonl;
  bool per_request = false;
  bool overhead = false;
  std::vector<int> sweep{5, 10, 20};
  std::vector<double> alphas;
  int repeats = 3;
};

inline void print_summary(std::ostream& t, const std::string& title, const MetricsReport& m) {
  t << title << ": " << m.completed << " completed, " << m.rejected << " rejected, " << m.output_tokens << " output tokens over "
    << fixed(m.duration, 3) << " s\n"
    << "  prefill " << fixed(m.prefill_throughput, 1) << " tok/s, decode " << fixed(m.decode_throughput, 1) << " tok/s\n"
    << "  TTFT ms  p50 " << fixed(m.ttft.p50 * 1e3, 3) << "  p90 " << fixed(m.ttft.p90 * 1e3, 3) << "  p99 " << fixed(m.ttft.p99 * 1e3, 3)
    << '\n'
    << "  TPOT ms  p50 " << fixed(m.tpot.p50 * 1e3, 3) << "  p90 " << fixed(m.tpot.p90 * 1e3, 3) << "  p99 " << fixed(m.tpot.p99 * 1e3, 3)
    << '\n';
}

inline int cmd_serve_bench(ServeBenchArgs& a, std::ostream& out) {
  EngineConfig c = a.engine.resolve();
  Reporter rep(out, a.jsonl);
  const BaseModel model = load_or_generate_model(c);
  require(a.num_adapters >= 0, ErrorKind::kInput, "--adapters must be >= 0");

  if (a.overhead) {
    const int pool_size = *std::max_element(a.sweep.begin(), a.sweep.end());
    const auto pool = load_or_generate_adapters(c, model, std::min(std::max(pool_size, 1), 10));
    OverheadSpec spec;
    spec.adapter_counts = a.sweep;
    spec.alphas = a.alphas.empty() ? std::vector<double>{c.workload.alpha} : a.alphas;
    spec.workload = c.workload;
    spec.workload.seed = c.seed;
    spec.scheduler = c.scheduler;
    spec.page = c.page;
    spec.e_max = c.e_max;
    spec.repeats = a.repeats;
    auto& t = rep.text();
    t << std::setw(6) << "N" << std::setw(8) << "alpha" << std::setw(12) << "TTFT p50" << std::setw(12) << "TPOT p50" << std::setw(12)
      << "TPOT p90" << std::setw(10) << "tokens" << "   (multi / base-only)\n";
    for (const auto& r : bench_overhead(model, pool, spec)) {
      t << std::setw(6) << r.num_adapters << std::setw(8) << fixed(r.alpha, 2) << std::setw(12) << fixed(r.ttft_ratio_p50, 3)
        << std::setw(12) << fixed(r.tpot_ratio_p50, 3) << std::setw(12) << fixed(r.tpot_ratio_p90, 3) << std::setw(10) << r.multi_tokens
        << '\n';
      rep.record(r.to_json());
    }
    return kOk;
  }

  std::vector<Request> trace;
  if (!a.trace_in.empty()) {
    trace = trace_from_jsonl(io::read_text(a.trace_in));
  } else {
    WorkloadSpec w = c.workload;
    w.num_adapters = std::max(1, a.num_adapters);
    w.base_only = a.num_adapters == 0;
    w.vocab = model.config.vocab;
    w.seed = c.seed;
    trace = generate_trace(w);
  }
  if (!a.trace_out.empty()) io::write_text(a.trace_out, trace_to_jsonl(trace));

  int needed = a.num_adapters;
  for (const auto& r : trace) needed = std::max(needed, r.adapter + 1);
  const int capacity = std::max(needed, c.adapter_dirs.empty() ? 0 : static_cast<int>(c.adapter_dirs.size()));
  const auto adapters = load_or_generate_adapters(c, model, needed);
  ExpertStore store(model, capacity, c.e_max, effective_pages(c, a.engine, model.config, capacity));
  AdapterRegistry registry(store);
  for (int i = 0; i < needed && !adapters.empty(); ++i) {
    const auto& f = adapters[static_cast<std::size_t>(i) % adapters.size()];
    registry.load_adapter(f.manifest, f.weights);
  }
  ServingEngine engine(model, registry, c.scheduler);
  const ServeResult res = engine.serve(trace);
  if (a.per_request)
    for (const auto& q : res.requests) rep.record(esft::to_json(q));
  nlohmann::json summary = res.metrics.to_json();
  summary["steps"] = res.steps;
  summary["tokens_processed"] = res.tokens_processed;
  summary["clock"] = clock_name(c.scheduler.clock);
  summary["num_adapters"] = needed;
  rep.record(summary);
  print_summary(rep.text(), std::to_string(trace.size()) + " requests, " + std::to_string(needed) + " adapters, " +
                                clock_name(c.scheduler.clock) + " clock",
                res.metrics);
  return kOk;
}

// ---------------------------------------------------------------- dump-map

struct DumpMapArgs {
  EngineFlags engine;
  int layer = 0;
  bool all_layers = false;
  bool changed_only = false;
  std::string jsonl;
};

inline void render_row(std::ostream& t, std::span<const std::int32_t> row, bool changed_only) {
  bool first = true;
  for (std::size_t j = 0; j < row.size(); ++j) {
    if (changed_only && row[j] == static_cast<std::int32_t>(j)) continue;
    t << (first ? "" : " ");
    first = false;
    if (row[j] != static_cast<std::int32_t>(j)) t << j << "->" << row[j];
    else t << j;
  }
  if (first) t << "(identity)";
  t << '\n';
}

inline int cmd_dump_map(DumpMapArgs& a, std::ostream& out) {
  EngineConfig c = a.engine.resolve();
  Reporter rep(out, a.jsonl);
  // Only the map is needed, so weights are never materialized.
  BaseModel model;
  std::vector<AdapterManifest> manifests;
  if (c.model_dir) {
    model.config = model_config_from_json(nlohmann::json::parse(io::read_text(*c.model_dir / "model.json")));
  } else {
    model.config = c.model;
  }
  for (const auto& d : c.adapter_dirs) {
    try {
      manifests.push_back(AdapterManifest::from_json(nlohmann::json::parse(io::read_text(d / "manifest.json"))));
    } catch (const nlohmann::json::exception& e) {
      raise(ErrorKind::kManifest, d.string() + "/manifest.json: " + e.what());
    }
  }
  const ModelConfig& cfg = model.config;
  cfg.validate(/*for_compute=*/false);
  // Empty slots are shown only when a capacity is asked for.
  const int n = std::max(a.engine.max_adapters_given ? c.max_adapters : 0, static_cast<int>(manifests.size()));
  PageConfig pages = c.page;
  pages.pool_capacity = ExpertStore::full_span_pages(cfg, n, c.e_max, pages.page_size);
  model.experts.assign(static_cast<std::size_t>(cfg.num_layers), StackedExperts(cfg, 0));
  ExpertStore store(model, n, c.e_max, pages, Backing::kAccountingOnly);
  AdapterRegistry registry(store);
  for (const auto& m : manifests) registry.load_adapter(m, {});
  const auto snap = registry.snapshot();
  require(a.layer >= 0 && a.layer < cfg.num_layers, ErrorKind::kInput, "--layer outside [0, " + std::to_string(cfg.num_layers) + ")");
  const int first = a.all_layers ? 0 : a.layer, last = a.all_layers ? cfg.num_layers : a.layer + 1;
  auto& t = rep.text();
  for (int l = first; l < last; ++l) {
    t << "layer " << l << "  M=" << cfg.num_experts << " N=" << n << " E_max=" << c.e_max << '\n';
    for (int i = 0; i < n; ++i) {
      const auto row = snap->row(l, i);
      const auto name = registry.manifest(i);
      t << "  Pi[" << i << "]" << (name ? " " + name->name : std::string(" (empty)")) << "  Delta=" << registry.slot_offset(i) << ": ";
      render_row(t, row, a.changed_only);
      rep.record({{"record", "expert_map"},
                  {"layer", l},
                  {"adapter", i},
                  {"name", name ? name->name : ""},
                  {"slot_offset", registry.slot_offset(i)},
                  {"row", std::vector<std::int32_t>(row.begin(), row.end())}});
    }
  }
  return kOk;
}

// ---------------------------------------------------------------- bench-reroute

struct BenchRerouteArgs {
  RerouteBenchConfig cfg;
  std::string jsonl;
};

inline int cmd_bench_reroute(BenchRerouteArgs& a, std::ostream& out) {
  Reporter rep(out, a.jsonl);
  auto& t = rep.text();
  t << std::setw(8) << "batch" << std::setw(14) << "fused ns/tok" << std::setw(16) << "multi-op ns/tok" << std::setw(10) << "equal" << '\n';
  bool all_equal = true;
  for (const auto& r : fused_reroute_bench(a.cfg)) {
    t << std::setw(8) << r.batch << std::setw(14) << fixed(r.fused_ns_per_token, 3) << std::setw(16) << fixed(r.multi_op_ns_per_token, 3)
      << std::setw(10) << (r.identical ? "yes" : "NO") << '\n';
    rep.record({{"record", "reroute_bench"},
                {"batch", r.batch},
                {"top_k", r.k},
                {"max_adapters", r.max_adapters},
                {"e_max", r.e_max},
                {"fused_ns_per_token", r.fused_ns_per_token},
                {"multi_op_ns_per_token", r.multi_op_ns_per_token},
                {"identical", r.identical}});
    all_equal = all_equal && r.identical;
  }
  return all_equal ? kOk : kValidationFailure;
}

// ---------------------------------------------------------------- entry point

inline int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-adapter MoE serving over a shared base model with virtual expert weights", "esft"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "esft 0.1.0");

  AnalyzeArgs analyze;
  auto* sa = app.add_subcommand("analyze", "sparsity, fragmentation and dry-run page accounting for adapter profiles");
  analyze.engine.add_config(sa);
  analyze.engine.add_model(sa);
  analyze.engine.add_adapters(sa);
  analyze.engine.add(sa, "--page-size", analyze.engine.page_size, "page size for the dry run (bytes)",
                     [&](EngineConfig& c) { c.page.page_size = analyze.engine.page_size; });
  sa->add_option("--profiles", analyze.profiles, "profile file")->check(CLI::ExistingFile);
  sa->add_option("--e-max", analyze.e_max, "E_max (default: smallest feasible)");
  sa->add_option("--jsonl", analyze.jsonl, "write JSON-lines records here ('-' for stdout)");

  GenModelArgs gen_model;
  auto* sm = app.add_subcommand("gen-model", "write a random base model checkpoint");
  gen_model.engine.add_config(sm);
  gen_model.engine.add_model(sm);
  sm->add_option("--out", gen_model.out_dir, "checkpoint directory")->required();

  GenAdaptersArgs gen_adapters;
  auto* sg = app.add_subcommand("gen-adapters", "write synthetic adapters for a base model");
  gen_adapters.engine.add_config(sg);
  gen_adapters.engine.add_model(sg);
  gen_adapters.engine.add(sg, "--e-max", gen_adapters.engine.e_max, "default max experts per layer",
                          [&](EngineConfig& c) { c.e_max = gen_adapters.engine.e_max; });
  sg->add_option("--out", gen_adapters.out_dir, "output directory; one subdirectory per adapter")->required();
  sg->add_option("--profiles", gen_adapters.profiles, "per-adapter targets (profile file)")->check(CLI::ExistingFile);
  sg->add_option("--count", gen_adapters.count, "number of adapters without --profiles");
  sg->add_option("--max-experts", gen_adapters.max_experts, "max experts in any layer without --profiles");
  sg->add_option("--sparsity", gen_adapters.sparsity, "target sparsity without --profiles");

  VerifyArgs verify;
  auto* sv = app.add_subcommand("verify", "compare mixed-adapter serving with per-adapter merged models");
  verify.engine.add_config(sv);
  verify.engine.add_model(sv);
  verify.engine.add_adapters(sv);
  verify.engine.add_memory(sv);
  sv->add_option("--synthetic", verify.synthetic, "synthetic adapters when no --adapter is given");
  sv->add_option("--trials", verify.spec.trials, "randomized batches");
  sv->add_option("--max-batch", verify.spec.max_batch, "max tokens per batch");
  sv->add_option("--jsonl", verify.jsonl, "write JSON-lines records here ('-' for stdout)");

  ServeBenchArgs serve;
  auto* ss = app.add_subcommand("serve-bench", "serve a Poisson trace and report latency and throughput");
  serve.engine.add_config(ss);
  serve.engine.add_model(ss);
  serve.engine.add_adapters(ss);
  serve.engine.add_memory(ss);
  serve.engine.add_scheduler(ss);
  ss->add_option("-n,--adapters", serve.num_adapters, "N, adapters receiving traffic (0 = base model only)");
  ss->add_option("--trace", serve.trace_in, "replay a trace file instead of generating one")->check(CLI::ExistingFile);
  ss->add_option("--trace-out", serve.trace_out, "write the served trace as JSON-lines");
  ss->add_option("--jsonl", serve.jsonl, "write JSON-lines records here ('-' for stdout)");
  ss->add_flag("--per-request", serve.per_request, "emit one record per request");
  ss->add_flag("--overhead", serve.overhead, "compare base-only and multi-adapter serving over --sweep");
  ss->add_option("--sweep", serve.sweep, "adapter counts for --overhead")->delimiter(',');
  ss->add_option("--alphas", serve.alphas, "alpha values for --overhead")->delimiter(',');
  ss->add_option("--repeats", serve.repeats, "repeats per arm for --overhead");

  DumpMapArgs dump;
  auto* sd = app.add_subcommand("dump-map", "print the expert map rows of one layer");
  dump.engine.add_config(sd);
  dump.engine.add_model(sd);
  dump.engine.add_adapters(sd);
  dump.engine.add_memory(sd);
  sd->add_option("--layer", dump.layer, "layer index");
  sd->add_flag("--all-layers", dump.all_layers, "print every layer");
  sd->add_flag("--changed-only", dump.changed_only, "print only rerouted entries");
  sd->add_option("--jsonl", dump.jsonl, "write JSON-lines records here ('-' for stdout)");

  BenchRerouteArgs bench;
  auto* sb = app.add_subcommand("bench-reroute", "time the fused reroute kernel against the multi-op composition");
  sb->add_option("--batches", bench.cfg.batches, "batch sizes")->delimiter(',');
  sb->add_option("--top-k", bench.cfg.top_k, "K");
  sb->add_option("--experts", bench.cfg.num_experts, "M");
  sb->add_option("--max-adapters", bench.cfg.max_adapters, "N");
  sb->add_option("--e-max", bench.cfg.e_max, "E_max");
  sb->add_option("--trials", bench.cfg.trials, "best-of trials");
  sb->add_option("--seed", bench.cfg.seed, "random seed");
  sb->add_option("--jsonl", bench.jsonl, "write JSON-lines records here ('-' for stdout)");

  std::reverse(args.begin(), args.end());  // CLI11 consumes from the back
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::CallForVersion& e) {
    out << e.what() << '\n';
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "esft: " << e.what() << '\n';
    return kUsageError;
  }

  try {
    if (sa->parsed()) return cmd_analyze(analyze, out);
    if (sm->parsed()) return cmd_gen_model(gen_model, out);
    if (sg->parsed()) return cmd_gen_adapters(gen_adapters, out);
    if (sv->parsed()) return cmd_verify(verify, out);
    if (ss->parsed()) return cmd_serve_bench(serve, out);
    if (sd->parsed()) return cmd_dump_map(dump, out);
    if (sb->parsed()) return cmd_bench_reroute(bench, out);
  } catch (const Error& e) {
    err << "esft: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "esft: internal error: " << e.what() << '\n';
    return kInternalError;
  }
  return kUsageError;
}

}  // namespace esft::cli
