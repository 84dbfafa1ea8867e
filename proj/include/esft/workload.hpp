// Copyright 2026 The esft-serve Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "esft/error.hpp"
#include "esft/io.hpp"
#include "esft/random.hpp"

namespace esft {

/// Request shares from an equal-bin partition of the CDF x^alpha on [0, 1]:
/// share_i = (i/N)^alpha - ((i-1)/N)^alpha. Uniform at alpha = 1, increasingly
/// skewed towards the first adapter as alpha shrinks. Returned hottest first.
inline std::vector<double> power_law_shares(int n, double alpha) {
  require(n >= 1, ErrorKind::kInput, "power-law shares need N >= 1");
  require(alpha > 0 && alpha <= 1, ErrorKind::kInput, "alpha must be in (0, 1], got " + std::to_string(alpha));
  std::vector<double> shares(static_cast<std::size_t>(n));
  const double dn = n;
  for (int i = 1; i <= n; ++i) shares[static_cast<std::size_t>(i - 1)] = std::pow(i / dn, alpha) - std::pow((i - 1) / dn, alpha);
  std::sort(shares.begin(), shares.end(), std::greater<>());
  return shares;
}

struct LengthRange {
  int min = 1;
  int max = 1;
};

struct WorkloadSpec {
  int num_adapters = 1;       // N; adapters are numbered by descending share
  double alpha = 1.0;
  double rate = 1.0;          // aggregate lambda, requests/s
  double duration = 100.0;    // seconds
  LengthRange prompt_len{16, 64};
  LengthRange output_len{8, 32};
  int vocab = 256;
  int num_domains = 5;        // prompt token bands; adapter i draws from domain i % num_domains
  bool base_only = false;     // send every request to the base model (AID -1)
  std::uint64_t seed = 0;
};

struct Request {
  std::int64_t id = 0;
  std::int32_t adapter = -1;
  std::vector<std::int32_t> prompt;
  int max_output_tokens = 1;
  double arrival_time = 0.0;
  int domain = 0;  // prompt source tag
};

/// Synthetic prompt for `domain`: tokens drawn from that domain's band of the
/// vocabulary, so prompts of the same domain share statistics.
inline std::vector<std::int32_t> domain_prompt(std::uint64_t seed, std::int64_t request_id, int domain, int num_domains, int vocab,
                                               int length) {
  Rng rng(mix_seed(seed, 0x9000000ull + static_cast<std::uint64_t>(request_id)));
  const int band = std::max(1, vocab / std::max(1, num_domains));
  const int lo = std::min(vocab - band, (domain % std::max(1, num_domains)) * band);
  std::vector<std::int32_t> out(static_cast<std::size_t>(length));
  for (auto& t : out) t = static_cast<std::int32_t>(lo + rng.uniform_int(0, band - 1));
  return out;
}

/// One Poisson process per adapter with rate lambda * share_i over
/// [0, duration), merged and sorted by arrival time. Request IDs follow the
/// merged order.
inline std::vector<Request> generate_trace(const WorkloadSpec& spec) {
  require(spec.rate >= 0 && spec.duration >= 0, ErrorKind::kInput, "rate and duration must be >= 0");
  require(spec.prompt_len.min >= 1 && spec.prompt_len.max >= spec.prompt_len.min, ErrorKind::kInput, "bad prompt length range");
  require(spec.output_len.min >= 1 && spec.output_len.max >= spec.output_len.min, ErrorKind::kInput, "bad output length range");
  std::vector<Request> trace;
  if (spec.rate == 0 || spec.duration == 0) return trace;
  const auto shares = power_law_shares(spec.num_adapters, spec.alpha);
  for (int a = 0; a < spec.num_adapters; ++a) {
    const double rate = spec.rate * shares[static_cast<std::size_t>(a)];
    if (rate <= 0) continue;
    Rng rng(mix_seed(spec.seed, 0x7000 + static_cast<std::uint64_t>(a)));
    double t = rng.exponential(rate);
    while (t < spec.duration) {
      Request r;
      r.adapter = spec.base_only ? -1 : a;
      r.arrival_time = t;
      r.prompt.resize(static_cast<std::size_t>(rng.uniform_int(spec.prompt_len.min, spec.prompt_len.max)));
      r.max_output_tokens = static_cast<int>(rng.uniform_int(spec.output_len.min, spec.output_len.max));
      r.domain = a % std::max(1, spec.num_domains);
      trace.push_back(std::move(r));
      t += rng.exponential(rate);
    }
  }
  std::stable_sort(trace.begin(), trace.end(), [](const Request& x, const Request& y) { return x.arrival_time < y.arrival_time; });
  for (std::size_t i = 0; i < trace.size(); ++i) {
    Request& r = trace[i];
    r.id = static_cast<std::int64_t>(i);
    r.prompt = domain_prompt(spec.seed, r.id, r.domain, spec.num_domains, spec.vocab, static_cast<int>(r.prompt.size()));
  }
  return trace;
}

/// Trace file: one JSON object per line with id, arrival_time, adapter,
/// domain, prompt_len, output_len and the prompt tokens.
inline std::string trace_to_jsonl(const std::vector<Request>& trace) {
  std::ostringstream out;
  for (const auto& r : trace) {
    nlohmann::json j = {{"id", r.id},
                        {"arrival_time", r.arrival_time},
                        {"adapter", r.adapter},
                        {"domain", r.domain},
                        {"prompt_len", r.prompt.size()},
                        {"output_len", r.max_output_tokens},
                        {"prompt", r.prompt}};
    out << j.dump() << '\n';
  }
  return out.str();
}

inline std::vector<Request> trace_from_jsonl(const std::string& text) {
  std::vector<Request> trace;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Request r;
      r.id = j.at("id").get<std::int64_t>();
      r.arrival_time = j.at("arrival_time").get<double>();
      r.adapter = j.at("adapter").get<std::int32_t>();
      r.domain = j.value("domain", 0);
      r.max_output_tokens = j.at("output_len").get<int>();
      r.prompt = j.at("prompt").get<std::vector<std::int32_t>>();
      require(r.prompt.size() == j.at("prompt_len").get<std::size_t>(), ErrorKind::kInput, "prompt_len disagrees with prompt");
      require(!r.prompt.empty() && r.max_output_tokens >= 1, ErrorKind::kInput, "empty prompt or output_len < 1");
      trace.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      raise(ErrorKind::kInput, "trace line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return trace;
}

}  // namespace esft
