// Copyright 2026 The esft-serve Authors
// SPDX-License-Identifier: Apache-2.0

// Online serving over one shared base model with many adapters.
//
// The scheduler runs token-level continuous batching: every step carries one
// decode token per decoding request plus FIFO prefill chunks, up to a token
// budget. Tokens of different adapters share a step; each token's adapter ID
// selects its expert map row during rerouting.
//
// Registry mutations (load / evict) are fenced to step boundaries: commands
// are queued and applied by the scheduler between steps, and every step runs
// against one immutable expert map snapshot.

#pragma once

#include <chrono>
#include <cmath>
#include <cstring>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "esft/adapter.hpp"
#include "esft/metrics.hpp"
#include "esft/model.hpp"
#include "esft/reroute.hpp"
#include "esft/workload.hpp"

namespace esft {

enum class ClockMode { kSimulated, kWallClock };

struct SchedulerConfig {
  int token_budget = 512;
  ClockMode clock = ClockMode::kSimulated;
  double step_cost_fixed = 2e-3;       // simulated seconds per step
  double step_cost_per_token = 1e-4;   // simulated seconds per batched token
};

struct AdminCommand {
  enum class Op { kLoad, kEvict };
  Op op = Op::kLoad;
  std::shared_ptr<const AdapterFiles> adapter;  // for kLoad
  int index = -1;                               // for kEvict
};

struct AdminOutcome {
  AdminCommand::Op op = AdminCommand::Op::kLoad;
  int index = -1;  // slot loaded into, or slot evicted
  bool ok = false;
  std::string error;
  std::size_t before_step = 0;
};

/// Thread-safe FIFO of registry commands for the scheduler to apply.
class AdminQueue {
 public:
  void post(AdminCommand cmd) {
    std::lock_guard lock(mu_);
    queue_.push_back(std::move(cmd));
  }

  std::vector<AdminCommand> drain() {
    std::lock_guard lock(mu_);
    std::vector<AdminCommand> out(std::make_move_iterator(queue_.begin()), std::make_move_iterator(queue_.end()));
    queue_.clear();
    return out;
  }

 private:
  std::mutex mu_;
  std::deque<AdminCommand> queue_;
};

/// What a step ran with; handed to the optional observer.
struct StepView {
  std::size_t index = 0;
  double start = 0, end = 0;
  std::size_t prefill_tokens = 0;
  std::size_t decode_tokens = 0;
  std::span<const std::int32_t> tokens;
  std::span<const std::int32_t> aid;
  std::span<const std::int64_t> request_ids;
  const ExpertMapSnapshot* map = nullptr;
};

struct ServeResult {
  MetricsReport metrics;
  std::vector<RequestResult> requests;  // in trace order
  std::vector<AdminOutcome> admin;
  std::size_t steps = 0;
  std::size_t tokens_processed = 0;
};

class ServingEngine {
 public:
  ServingEngine(const BaseModel& model, AdapterRegistry& registry, SchedulerConfig cfg)
      : model_(&model), registry_(&registry), cfg_(cfg) {
    require(cfg_.token_budget >= 1, ErrorKind::kConfig, "token budget must be >= 1");
    require(model.config == registry.store().config(), ErrorKind::kConfig, "registry store was built for another model");
  }

  AdminQueue& admin_queue() { return admin_; }

  /// Deterministic admin command applied at the first step boundary at or
  /// after `at_time` (engine clock).
  void schedule_admin(double at_time, AdminCommand cmd) { scheduled_.emplace(at_time, std::move(cmd)); }

  /// Called after every forward pass, before finished requests are released.
  std::function<void(const StepView&)> step_observer;

  ServeResult serve(const std::vector<Request>& trace) {
    using clock = std::chrono::steady_clock;
    ServeResult out;
    out.requests.resize(trace.size());
    std::vector<std::size_t> order(trace.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return trace[a].arrival_time < trace[b].arrival_time; });

    std::deque<Active> prefilling;
    std::vector<Active> decoding;

    double now = 0.0;
    std::size_t next = 0;
    std::vector<std::int32_t> tokens, aid;
    std::vector<std::int64_t> req_ids;
    struct Emit {
      std::size_t idx;
      std::size_t row;
      bool first;
    };
    std::vector<Emit> emits;

    while (true) {
      apply_admin(now, out);
      while (next < order.size() && trace[order[next]].arrival_time <= now) admit(trace, order[next++], now, out, prefilling);
      if (prefilling.empty() && decoding.empty()) {
        if (next >= order.size()) break;
        now = std::max(now, trace[order[next]].arrival_time);
        continue;
      }

      tokens.clear();
      aid.clear();
      req_ids.clear();
      emits.clear();
      std::size_t budget = static_cast<std::size_t>(cfg_.token_budget);
      std::size_t decode_n = 0, prefill_n = 0;
      for (const Active& d : decoding) {
        if (budget == 0) break;
        const RequestResult& rr = out.requests[d.idx];
        emits.push_back({d.idx, tokens.size(), false});
        tokens.push_back(rr.output.back());
        aid.push_back(trace[d.idx].adapter);
        req_ids.push_back(trace[d.idx].id);
        --budget;
        ++decode_n;
      }
      std::size_t decode_served = decode_n;
      std::vector<std::pair<std::size_t, std::size_t>> chunks;  // prefilling position, chunk length
      for (std::size_t q = 0; q < prefilling.size() && budget > 0; ++q) {
        Active& p = prefilling[q];
        const Request& r = trace[p.idx];
        const std::size_t chunk = std::min(budget, r.prompt.size() - p.prefilled);
        for (std::size_t t = 0; t < chunk; ++t) {
          tokens.push_back(r.prompt[p.prefilled + t]);
          aid.push_back(r.adapter);
          req_ids.push_back(r.id);
        }
        if (p.prefilled + chunk == r.prompt.size()) emits.push_back({p.idx, tokens.size() - 1, true});
        chunks.emplace_back(q, chunk);
        budget -= chunk;
        prefill_n += chunk;
      }

      validate_aid(aid, registry_->capacity());
      const std::shared_ptr<const ExpertMapSnapshot> snap = registry_->snapshot();
      const ExpertStore& store = registry_->store();
      const auto t0 = clock::now();
      const MatrixF hidden = forward_hidden(
          *model_, tokens, aid, [&](int l) -> const VirtualWeightTensor& { return store.layer(l); }, RerouteHook{snap.get()});
      std::vector<std::int32_t> next_tok(emits.size());
      for (std::size_t e = 0; e < emits.size(); ++e) next_tok[e] = model_->next_token(hidden.row(emits[e].row));
      const auto t1 = clock::now();
      const double dt = cfg_.clock == ClockMode::kWallClock
                            ? std::chrono::duration<double>(t1 - t0).count()
                            : cfg_.step_cost_fixed + cfg_.step_cost_per_token * static_cast<double>(tokens.size());
      const double start = now;
      now += dt;
      ++out.steps;
      out.tokens_processed += tokens.size();

      // Requests of this step are still pinned while the observer runs.
      if (step_observer)
        step_observer(StepView{out.steps - 1, start, now, prefill_n, decode_n, tokens, aid, req_ids, snap.get()});

      for (auto [q, chunk] : chunks) prefilling[q].prefilled += chunk;
      std::vector<Active> still_decoding;
      for (std::size_t e = 0; e < emits.size(); ++e) {
        RequestResult& rr = out.requests[emits[e].idx];
        rr.output.push_back(next_tok[e]);
        if (emits[e].first) rr.first_token_time = now;
      }
      for (std::size_t d = 0; d < decoding.size(); ++d) {
        const Active& a = decoding[d];
        if (d < decode_served && finished(trace, out, a.idx)) finish(trace, a.idx, now, out);
        else still_decoding.push_back(a);
      }
      while (!prefilling.empty() && prefilling.front().prefilled == trace[prefilling.front().idx].prompt.size()) {
        const Active a = prefilling.front();
        prefilling.pop_front();
        if (finished(trace, out, a.idx)) finish(trace, a.idx, now, out);
        else still_decoding.push_back(a);
      }
      decoding = std::move(still_decoding);

    }
    // Commands posted after the last step still take effect.
    apply_admin(INFINITY, out);
    out.metrics = MetricsReport::from(out.requests);
    return out;
  }

 private:
  struct Active {
    std::size_t idx;
    std::size_t prefilled = 0;
  };

  static bool finished(const std::vector<Request>& trace, const ServeResult& out, std::size_t idx) {
    return out.requests[idx].output.size() >= static_cast<std::size_t>(trace[idx].max_output_tokens);
  }

  void finish(const std::vector<Request>& trace, std::size_t idx, double now, ServeResult& out) {
    out.requests[idx].finish_time = now;
    if (trace[idx].adapter >= 0) registry_->unpin(trace[idx].adapter);
  }

  void admit(const std::vector<Request>& trace, std::size_t idx, double now, ServeResult& out, std::deque<Active>& prefilling) {
    const Request& r = trace[idx];
    RequestResult& rr = out.requests[idx];
    rr.id = r.id;
    rr.adapter = r.adapter;
    rr.arrival_time = r.arrival_time;
    rr.admit_time = now;
    rr.prompt_len = r.prompt.size();
    const bool ok = !r.prompt.empty() && r.max_output_tokens >= 1 &&
                    (r.adapter == -1 || (r.adapter >= 0 && r.adapter < registry_->capacity() && registry_->is_loaded(r.adapter)));
    if (!ok) {
      rr.rejected = true;
      return;
    }
    if (r.adapter >= 0) {
      registry_->pin(r.adapter);
      rr.adapter_name = registry_->manifest(r.adapter)->name;
    }
    prefilling.push_back({idx, 0});
  }

  void apply_admin(double now, ServeResult& out) {
    std::vector<AdminCommand> cmds;
    while (!scheduled_.empty() && scheduled_.begin()->first <= now) {
      cmds.push_back(std::move(scheduled_.begin()->second));
      scheduled_.erase(scheduled_.begin());
    }
    for (auto& c : admin_.drain()) cmds.push_back(std::move(c));
    for (const AdminCommand& c : cmds) {
      AdminOutcome o{c.op, c.index, false, {}, out.steps};
      try {
        if (c.op == AdminCommand::Op::kLoad) o.index = registry_->load_adapter(c.adapter->manifest, c.adapter->weights);
        else registry_->evict_adapter(c.index);
        o.ok = true;
      } catch (const Error& e) {
        o.error = e.what();
      }
      out.admin.push_back(std::move(o));
    }
  }

  const BaseModel* model_;
  AdapterRegistry* registry_;
  SchedulerConfig cfg_;
  AdminQueue admin_;
  std::multimap<double, AdminCommand> scheduled_;
};

/// Greedy generation for one request on a plain stacked model; the isolated
/// reference for batching transparency.
inline std::vector<std::int32_t> generate_isolated(const BaseModel& model, const std::vector<StackedExperts>& layers,
                                                   std::span<const std::int32_t> prompt, int max_output_tokens) {
  auto weights = [&](int l) -> const StackedExperts& { return layers[static_cast<std::size_t>(l)]; };
  std::vector<std::int32_t> base_aid(prompt.size(), -1);
  const MatrixF h = forward_hidden(model, prompt, base_aid, weights);
  std::vector<std::int32_t> out{model.next_token(h.row(h.rows() - 1))};
  const std::int32_t one_aid[1] = {-1};
  while (out.size() < static_cast<std::size_t>(max_output_tokens)) {
    const std::int32_t tok[1] = {out.back()};
    const MatrixF d = forward_hidden(model, tok, one_aid, weights);
    out.push_back(model.next_token(d.row(0)));
  }
  return out;
}

struct VerifySpec {
  int trials = 100;
  int max_batch = 256;
  std::uint64_t seed = 0;
};

struct VerifyReport {
  std::size_t trials = 0;
  std::size_t tokens = 0;
  std::size_t adapter_slot_hits = 0;  // rerouted (token, k) entries landing on adapter slots
  double max_abs_deviation = 0.0;
  bool bit_identical = true;
  std::vector<std::string> triage;

  bool passed() const { return bit_identical && max_abs_deviation == 0.0; }
};

namespace detail {

struct CountingRerouteHook {
  RerouteHook inner;
  int num_experts;
  std::size_t* hits;
  std::vector<Matrix<std::int32_t>>* record = nullptr;

  void operator()(int layer, Matrix<std::int32_t>& ids, std::span<const std::int32_t> aid) const {
    inner(layer, ids, aid);
    for (std::int32_t v : ids.flat()) *hits += v >= num_experts ? 1 : 0;
    if (record) record->push_back(ids);
  }
};

inline bool same_bits(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size_bytes()) == 0;
}

}  // namespace detail

/// Compares mixed-adapter batches served through the virtual store with
/// per-adapter merged models run in isolation. Every output float must match
/// bit for bit.
inline VerifyReport verify_equivalence(const BaseModel& model, const std::vector<AdapterFiles>& adapters, const PageConfig& page_cfg,
                                       int e_max, const VerifySpec& spec) {
  const ModelConfig& cfg = model.config;
  const int n = static_cast<int>(adapters.size());
  ExpertStore store(model, n, e_max, page_cfg);
  AdapterRegistry registry(store);
  std::vector<int> slot_of(adapters.size());
  for (std::size_t a = 0; a < adapters.size(); ++a) slot_of[a] = registry.load_adapter(adapters[a].manifest, adapters[a].weights);
  const auto snap = registry.snapshot();

  std::vector<std::vector<StackedExperts>> merged;  // index a+1; 0 = base
  merged.push_back(build_merged_model(model, nullptr));
  for (const auto& a : adapters) merged.push_back(build_merged_model(model, &a));

  VerifyReport rep;
  Rng rng(spec.seed);
  auto store_weights = [&](int l) -> const VirtualWeightTensor& { return store.layer(l); };
  for (int trial = 0; trial < spec.trials; ++trial) {
    const auto b = static_cast<std::size_t>(rng.uniform_int(1, spec.max_batch));
    std::vector<std::int32_t> tokens(b), aid(b);
    for (std::size_t t = 0; t < b; ++t) {
      tokens[t] = static_cast<std::int32_t>(rng.uniform_int(0, cfg.vocab - 1));
      const auto a = static_cast<int>(rng.uniform_int(-1, n - 1));
      aid[t] = a < 0 ? -1 : slot_of[static_cast<std::size_t>(a)];
    }
    validate_aid(aid, registry.capacity());
    const MatrixF woven =
        forward_hidden(model, tokens, aid, store_weights, detail::CountingRerouteHook{RerouteHook{snap.get()}, cfg.num_experts, &rep.adapter_slot_hits});

    for (int a = -1; a < n; ++a) {
      const std::int32_t slot = a < 0 ? -1 : slot_of[static_cast<std::size_t>(a)];
      std::vector<std::size_t> rows;
      std::vector<std::int32_t> sub_tokens;
      for (std::size_t t = 0; t < b; ++t)
        if (aid[t] == slot) {
          rows.push_back(t);
          sub_tokens.push_back(tokens[t]);
        }
      if (rows.empty()) continue;
      const auto& layers = merged[static_cast<std::size_t>(a + 1)];
      std::vector<std::int32_t> base_aid(rows.size(), -1);
      const MatrixF ref = forward_hidden(model, sub_tokens, base_aid, [&](int l) -> const StackedExperts& { return layers[static_cast<std::size_t>(l)]; });
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto got = woven.row(rows[r]);
        const auto want = ref.row(r);
        for (std::size_t d = 0; d < got.size(); ++d)
          rep.max_abs_deviation = std::max(rep.max_abs_deviation, static_cast<double>(std::fabs(got[d] - want[d])));
        if (!detail::same_bits(got, want)) {
          rep.bit_identical = false;
          if (rep.triage.size() < 8) {
            // Re-run this token alone through both paths, layer by layer.
            const std::int32_t tok[1] = {tokens[rows[r]]};
            const std::int32_t one_aid[1] = {aid[rows[r]]};
            const std::int32_t base_one[1] = {-1};
            std::vector<MatrixF> lw, lr;
            std::vector<Matrix<std::int32_t>> ids;
            std::size_t ignore = 0;
            forward_hidden(model, tok, one_aid, store_weights,
                           detail::CountingRerouteHook{RerouteHook{snap.get()}, cfg.num_experts, &ignore, &ids}, &lw);
            forward_hidden(model, tok, base_one, [&](int l) -> const StackedExperts& { return layers[static_cast<std::size_t>(l)]; },
                           IdentityHook{}, &lr);
            std::size_t layer = 0;
            while (layer < lw.size() && detail::same_bits(lw[layer].flat(), lr[layer].flat())) ++layer;
            std::string slots;
            if (layer < ids.size())
              for (std::int32_t v : ids[layer].flat()) slots += (slots.empty() ? "" : ",") + std::to_string(v);
            rep.triage.push_back("trial " + std::to_string(trial) + " token " + std::to_string(rows[r]) + " adapter " + std::to_string(a) +
                                 ": first divergence at layer " + std::to_string(layer) + ", slots [" + slots + "]");
          }
        }
      }
    }
    ++rep.trials;
    rep.tokens += b;
  }
  return rep;
}

struct OverheadSpec {
  std::vector<int> adapter_counts{5, 10, 20};
  std::vector<double> alphas{1.0};
  WorkloadSpec workload;
  SchedulerConfig scheduler;
  PageConfig page;
  int e_max = 8;
  int repeats = 3;
};

struct OverheadRecord {
  int num_adapters = 0;
  double alpha = 1.0;
  MetricsReport base;
  MetricsReport multi;
  double ttft_ratio_p50 = 1.0;
  double tpot_ratio_p50 = 1.0;
  double tpot_ratio_p90 = 1.0;
  std::size_t base_tokens = 0;
  std::size_t multi_tokens = 0;

  nlohmann::json to_json() const {
    return {{"record", "overhead"},
            {"num_adapters", num_adapters},
            {"alpha", alpha},
            {"ttft_ratio_p50", ttft_ratio_p50},
            {"tpot_ratio_p50", tpot_ratio_p50},
            {"tpot_ratio_p90", tpot_ratio_p90},
            {"base_tpot_p50_s", base.tpot.p50},
            {"multi_tpot_p50_s", multi.tpot.p50},
            {"base_ttft_p50_s", base.ttft.p50},
            {"multi_ttft_p50_s", multi.ttft.p50},
            {"base_tokens", base_tokens},
            {"multi_tokens", multi_tokens}};
  }
};

namespace detail {

inline ServeResult run_arm(const BaseModel& model, const std::vector<AdapterFiles>& pool, int n, const OverheadSpec& spec,
                           const std::vector<Request>& trace) {
  PageConfig page = spec.page;
  page.pool_capacity = std::max(page.pool_capacity, ExpertStore::full_span_pages(model.config, n, spec.e_max, page.page_size));
  ExpertStore store(model, n, spec.e_max, page);
  AdapterRegistry registry(store);
  for (int i = 0; i < n; ++i) {
    const auto& a = pool[static_cast<std::size_t>(i) % pool.size()];
    registry.load_adapter(a.manifest, a.weights);
  }
  ServingEngine engine(model, registry, spec.scheduler);
  return engine.serve(trace);
}

inline double median(std::vector<double> v) { return percentile(std::move(v), 50); }

}  // namespace detail

/// Serves identical traces base-only (every request to the base model) and
/// with N adapters loaded, and reports latency ratios. Adapters beyond the
/// pool size are replicas. Arms alternate across repeats.
inline std::vector<OverheadRecord> bench_overhead(const BaseModel& model, const std::vector<AdapterFiles>& adapter_pool,
                                                  const OverheadSpec& spec) {
  std::vector<OverheadRecord> out;
  for (double alpha : spec.alphas) {
    for (int n : spec.adapter_counts) {
      OverheadRecord rec;
      rec.num_adapters = n;
      rec.alpha = alpha;
      WorkloadSpec w = spec.workload;
      w.alpha = alpha;
      w.vocab = model.config.vocab;
      w.num_adapters = std::max(1, n);
      w.base_only = true;
      const auto base_trace = generate_trace(w);
      w.base_only = n == 0;
      const auto multi_trace = generate_trace(w);
      std::vector<double> b_ttft, m_ttft, b_tpot, m_tpot, b_tpot90, m_tpot90;
      for (int r = 0; r < std::max(1, spec.repeats); ++r) {
        const ServeResult base = detail::run_arm(model, adapter_pool, 0, spec, base_trace);
        const ServeResult multi = n == 0 ? base : detail::run_arm(model, adapter_pool, n, spec, multi_trace);
        b_ttft.push_back(base.metrics.ttft.p50);
        m_ttft.push_back(multi.metrics.ttft.p50);
        b_tpot.push_back(base.metrics.tpot.p50);
        m_tpot.push_back(multi.metrics.tpot.p50);
        b_tpot90.push_back(base.metrics.tpot.p90);
        m_tpot90.push_back(multi.metrics.tpot.p90);
        if (r == 0) {
          rec.base = base.metrics;
          rec.multi = multi.metrics;
          rec.base_tokens = base.tokens_processed;
          rec.multi_tokens = multi.tokens_processed;
        }
      }
      if (n != 0) {
        rec.ttft_ratio_p50 = detail::median(m_ttft) / detail::median(b_ttft);
        rec.tpot_ratio_p50 = detail::median(m_tpot) / detail::median(b_tpot);
        rec.tpot_ratio_p90 = detail::median(m_tpot90) / detail::median(b_tpot90);
      }
      out.push_back(rec);
    }
  }
  return out;
}

}  // namespace esft
