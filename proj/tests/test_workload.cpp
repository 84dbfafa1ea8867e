// Copyright 2026 The esft-serve Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "esft/workload.hpp"

namespace esft {
namespace {

// Shares straight from the CDF partition, in bin order.
std::vector<double> cdf_bins(int n, double alpha) {
  std::vector<double> s;
  for (int i = 1; i <= n; ++i) s.push_back(std::pow(double(i) / n, alpha) - std::pow(double(i - 1) / n, alpha));
  return s;
}

TEST(Shares, TwoAdaptersHalfAlpha) {
  const auto s = power_law_shares(2, 0.5);
  ASSERT_EQ(s.size(), 2u);
  // The first CDF bin is the largest for a concave CDF.
  EXPECT_NEAR(s[0], std::sqrt(0.5), 1e-12);
  EXPECT_NEAR(s[1], 1.0 - std::sqrt(0.5), 1e-12);
}

TEST(Shares, EightyTwentyAnchor) {
  const auto s = power_law_shares(2, 0.32);
  EXPECT_NEAR(s[0], 0.801, 0.001);
  EXPECT_NEAR(s[1], 0.199, 0.001);
}

TEST(Shares, SumToOneAndSortedDescending) {
  for (int n : {1, 2, 5, 10, 20})
    for (double alpha : {0.1, 0.3, 0.5, 0.9, 1.0}) {
      const auto s = power_law_shares(n, alpha);
      EXPECT_NEAR(std::accumulate(s.begin(), s.end(), 0.0), 1.0, 1e-12);
      EXPECT_TRUE(std::is_sorted(s.begin(), s.end(), std::greater<>()));
      auto want = cdf_bins(n, alpha);
      std::sort(want.begin(), want.end(), std::greater<>());
      for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(s[i], want[i], 1e-12);
    }
}

TEST(Shares, UniformAtAlphaOne) {
  for (double v : power_law_shares(7, 1.0)) EXPECT_NEAR(v, 1.0 / 7, 1e-12);
}

TEST(Shares, RejectsBadArguments) {
  EXPECT_THROW(power_law_shares(0, 0.5), Error);
  EXPECT_THROW(power_law_shares(3, 0.0), Error);
  EXPECT_THROW(power_law_shares(3, 1.5), Error);
}

WorkloadSpec spec(int n, double alpha, double rate, double duration, std::uint64_t seed) {
  WorkloadSpec w;
  w.num_adapters = n;
  w.alpha = alpha;
  w.rate = rate;
  w.duration = duration;
  w.seed = seed;
  return w;
}

TEST(Trace, ZeroRateOrDurationIsEmpty) {
  EXPECT_TRUE(generate_trace(spec(3, 0.5, 0.0, 10, 1)).empty());
  EXPECT_TRUE(generate_trace(spec(3, 0.5, 5.0, 0, 1)).empty());
}

TEST(Trace, SortedDeterministicAndWellFormed) {
  const auto w = spec(5, 0.4, 50, 20, 9);
  const auto a = generate_trace(w);
  const auto b = generate_trace(w);
  ASSERT_FALSE(a.empty());
  EXPECT_EQ(trace_to_jsonl(a), trace_to_jsonl(b));
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, static_cast<std::int64_t>(i));
    if (i) EXPECT_LE(a[i - 1].arrival_time, a[i].arrival_time);
    EXPECT_GE(a[i].arrival_time, 0.0);
    EXPECT_LT(a[i].arrival_time, 20.0);
    EXPECT_GE(a[i].adapter, 0);
    EXPECT_LT(a[i].adapter, 5);
    EXPECT_GE(static_cast<int>(a[i].prompt.size()), w.prompt_len.min);
    EXPECT_LE(static_cast<int>(a[i].prompt.size()), w.prompt_len.max);
    EXPECT_GE(a[i].max_output_tokens, w.output_len.min);
    EXPECT_LE(a[i].max_output_tokens, w.output_len.max);
    for (auto t : a[i].prompt) {
      EXPECT_GE(t, 0);
      EXPECT_LT(t, w.vocab);
    }
  }
  EXPECT_NE(trace_to_jsonl(a), trace_to_jsonl(generate_trace(spec(5, 0.4, 50, 20, 10))));
}

TEST(Trace, BaseOnlyUsesMinusOne) {
  auto w = spec(3, 1.0, 30, 5, 2);
  w.base_only = true;
  for (const auto& r : generate_trace(w)) EXPECT_EQ(r.adapter, -1);
}

TEST(Trace, JsonlRoundTrip) {
  const auto a = generate_trace(spec(4, 0.7, 20, 5, 3));
  const auto b = trace_from_jsonl(trace_to_jsonl(a));
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, b[i].id);
    EXPECT_EQ(a[i].adapter, b[i].adapter);
    EXPECT_EQ(a[i].prompt, b[i].prompt);
    EXPECT_EQ(a[i].max_output_tokens, b[i].max_output_tokens);
    EXPECT_DOUBLE_EQ(a[i].arrival_time, b[i].arrival_time);
  }
}

TEST(Trace, MalformedLinesAreInputErrors) {
  for (const char* text : {"{\"id\": 1}\n", "not json\n",
                           "{\"id\":0,\"arrival_time\":0,\"adapter\":0,\"output_len\":1,\"prompt_len\":2,\"prompt\":[1]}\n"}) {
    try {
      trace_from_jsonl(text);
      ADD_FAILURE() << text;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kInput);
    }
  }
}

// Per-adapter arrival counts over a long window sit within 3 sigma of the
// Poisson mean lambda * share * T for nearly every seed.
TEST(Trace, PoissonCountsNearExpectation) {
  const int n = 4;
  const double rate = 40, duration = 100, alpha = 0.5;
  const auto shares = power_law_shares(n, alpha);
  int outside = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::vector<int> counts(n, 0);
    for (const auto& r : generate_trace(spec(n, alpha, rate, duration, seed))) ++counts[static_cast<std::size_t>(r.adapter)];
    for (int a = 0; a < n; ++a) {
      const double mean = rate * shares[static_cast<std::size_t>(a)] * duration;
      outside += std::abs(counts[static_cast<std::size_t>(a)] - mean) > 3 * std::sqrt(mean);
      ++total;
    }
  }
  // P(|Z| > 3) ~ 0.27%; allow one excursion in 80.
  EXPECT_LE(outside, 1) << "of " << total;
}

TEST(Trace, SameDomainPromptsShareBand) {
  auto w = spec(10, 1.0, 50, 5, 4);
  w.num_domains = 5;
  for (const auto& r : generate_trace(w)) {
    EXPECT_EQ(r.domain, r.adapter % 5);
    const int band = w.vocab / 5;
    for (auto t : r.prompt) {
      EXPECT_GE(t, r.domain * band);
      EXPECT_LT(t, (r.domain + 1) * band);
    }
  }
}

}  // namespace
}  // namespace esft
