// Copyright 2026 The esft-serve Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace esft {

/// Linear interpolation between closest ranks; q in [0, 100].
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) return std::nan("");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

struct RequestResult {
  std::int64_t id = 0;
  std::int32_t adapter = -1;
  std::string adapter_name;  // manifest served at admission; empty for base
  double arrival_time = 0.0;
  double admit_time = 0.0;
  double first_token_time = 0.0;
  double finish_time = 0.0;
  std::size_t prompt_len = 0;
  std::vector<std::int32_t> output;
  bool rejected = false;

  double ttft() const { return first_token_time - arrival_time; }
  double queueing_delay() const { return admit_time - arrival_time; }
  /// Defined only with at least two output tokens.
  std::optional<double> tpot() const {
    if (rejected || output.size() < 2) return std::nullopt;
    return (finish_time - first_token_time) / static_cast<double>(output.size() - 1);
  }
};

struct Distribution {
  std::size_t count = 0;
  double mean = 0, p50 = 0, p90 = 0, p99 = 0, max = 0;

  static Distribution of(const std::vector<double>& v) {
    Distribution d;
    d.count = v.size();
    if (v.empty()) return d;
    for (double x : v) d.mean += x;
    d.mean /= static_cast<double>(v.size());
    d.p50 = percentile(v, 50);
    d.p90 = percentile(v, 90);
    d.p99 = percentile(v, 99);
    d.max = *std::max_element(v.begin(), v.end());
    return d;
  }

  nlohmann::json to_json() const {
    return {{"count", count}, {"mean", mean}, {"p50", p50}, {"p90", p90}, {"p99", p99}, {"max", max}};
  }
};

struct AdapterMetrics {
  std::size_t requests = 0;
  std::size_t output_tokens = 0;
  double decode_throughput = 0;  // output tokens / duration
};

struct MetricsReport {
  std::size_t completed = 0;
  std::size_t rejected = 0;
  std::size_t prompt_tokens = 0;
  std::size_t output_tokens = 0;
  double duration = 0;             // first arrival to last completion, seconds
  double prefill_throughput = 0;   // prompt tokens / duration
  double decode_throughput = 0;    // output tokens / duration
  Distribution ttft;
  Distribution tpot;
  std::map<std::int32_t, AdapterMetrics> per_adapter;

  static MetricsReport from(const std::vector<RequestResult>& results) {
    MetricsReport r;
    std::vector<double> ttfts, tpots;
    double first = INFINITY, last = 0;
    for (const auto& q : results) {
      if (q.rejected) {
        ++r.rejected;
        continue;
      }
      ++r.completed;
      r.prompt_tokens += q.prompt_len;
      r.output_tokens += q.output.size();
      ttfts.push_back(q.ttft());
      if (auto t = q.tpot()) tpots.push_back(*t);
      first = std::min(first, q.arrival_time);
      last = std::max(last, q.finish_time);
      auto& a = r.per_adapter[q.adapter];
      ++a.requests;
      a.output_tokens += q.output.size();
    }
    r.duration = r.completed ? last - first : 0.0;
    if (r.duration > 0) {
      r.prefill_throughput = static_cast<double>(r.prompt_tokens) / r.duration;
      r.decode_throughput = static_cast<double>(r.output_tokens) / r.duration;
      for (auto& [id, a] : r.per_adapter) a.decode_throughput = static_cast<double>(a.output_tokens) / r.duration;
    }
    r.ttft = Distribution::of(ttfts);
    r.tpot = Distribution::of(tpots);
    return r;
  }

  nlohmann::json to_json() const {
    nlohmann::json adapters = nlohmann::json::object();
    for (const auto& [id, a] : per_adapter)
      adapters[std::to_string(id)] = {{"requests", a.requests}, {"output_tokens", a.output_tokens}, {"decode_throughput", a.decode_throughput}};
    return {{"record", "summary"},
            {"completed", completed},
            {"rejected", rejected},
            {"prompt_tokens", prompt_tokens},
            {"output_tokens", output_tokens},
            {"duration_s", duration},
            {"prefill_throughput_tok_s", prefill_throughput},
            {"decode_throughput_tok_s", decode_throughput},
            {"ttft_s", ttft.to_json()},
            {"tpot_s", tpot.to_json()},
            {"per_adapter", adapters}};
  }
};

inline nlohmann::json to_json(const RequestResult& q) {
  nlohmann::json j = {{"record", "request"},   {"id", q.id},
                      {"adapter", q.adapter},  {"rejected", q.rejected},
                      {"arrival_s", q.arrival_time}, {"prompt_len", q.prompt_len},
                      {"output_len", q.output.size()}};
  if (!q.rejected) {
    j["ttft_s"] = q.ttft();
    if (auto t = q.tpot()) j["tpot_s"] = *t;
  }
  return j;
}

}  // namespace esft
