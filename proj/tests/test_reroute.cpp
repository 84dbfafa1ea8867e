// Copyright 2026 The esft-serve Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <numeric>

#include "esft/reroute.hpp"
#include "oracles.hpp"

namespace esft {
namespace {

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::kInvariant;
}

std::vector<std::vector<std::int32_t>> rows_of(const RerouteCase& c) {
  std::vector<std::vector<std::int32_t>> rows;
  const auto m = static_cast<std::size_t>(c.num_experts);
  for (int i = 0; i < c.max_adapters; ++i) {
    const auto first = c.table.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(i + 1) * m);
    rows.emplace_back(first, first + static_cast<std::ptrdiff_t>(m));
  }
  return rows;
}

// M = 64, E_max = 8, adapter 0 fine-tuned {3, 17, 42}.
RerouteCase fig5() {
  RerouteCase c;
  c.num_experts = 64;
  c.max_adapters = 2;
  c.table.resize(3 * 64);
  for (int r = 0; r < 3; ++r)
    for (int j = 0; j < 64; ++j) c.table[static_cast<std::size_t>(r * 64 + j)] = j;
  c.table[64 + 3] = 64;
  c.table[64 + 17] = 65;
  c.table[64 + 42] = 66;
  return c;
}

TEST(Reroute, Fig5Example) {
  RerouteCase c = fig5();
  c.ids = Matrix<std::int32_t>(1, 6, {3, 5, 17, 20, 42, 60});
  c.aid = {0};
  const auto out = batched_reroute(c.ids, c.aid, c.view());
  EXPECT_EQ(std::vector<std::int32_t>(out.flat().begin(), out.flat().end()), (std::vector<std::int32_t>{64, 5, 65, 20, 66, 60}));
  c.aid = {-1};
  EXPECT_EQ(batched_reroute(c.ids, c.aid, c.view()), c.ids);
  c.aid = {1};  // empty adapter row
  EXPECT_EQ(batched_reroute(c.ids, c.aid, c.view()), c.ids);
}

TEST(Reroute, AllBaseTokensAreIdentity) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    RerouteCase c = RerouteCase::random(rng, 100, 6, 64, 20, 8);
    std::fill(c.aid.begin(), c.aid.end(), -1);
    EXPECT_EQ(batched_reroute(c.ids, c.aid, c.view()), c.ids);
    EXPECT_EQ(reroute_multi_op(c.ids, c.aid, c.view()), c.ids);
  }
}

TEST(Reroute, EmptyBatch) {
  Rng rng(1);
  RerouteCase c = RerouteCase::random(rng, 0, 6, 64, 4, 8);
  const auto out = batched_reroute(c.ids, c.aid, c.view());
  EXPECT_EQ(out.rows(), 0u);
  EXPECT_EQ(reroute_multi_op(c.ids, c.aid, c.view()).rows(), 0u);
  EXPECT_NO_THROW(validate_aid(c.aid, 4));
}

// Fused, multi-op and the scalar definition agree on random shapes.
TEST(Reroute, FusedMatchesMultiOpAndScalar) {
  Rng rng(2024);
  for (int trial = 0; trial < 300; ++trial) {
    const int m = static_cast<int>(rng.uniform_int(1, 96));
    const int k = static_cast<int>(rng.uniform_int(1, std::min(m, 8)));
    const int n = static_cast<int>(rng.uniform_int(1, 24));
    const int e_max = static_cast<int>(rng.uniform_int(1, m));
    const auto b = static_cast<std::size_t>(rng.uniform_int(0, 300));
    const RerouteCase c = RerouteCase::random(rng, b, k, m, n, e_max);
    const auto rows = rows_of(c);
    const auto fused = batched_reroute(c.ids, c.aid, c.view());
    ASSERT_EQ(fused, reroute_multi_op(c.ids, c.aid, c.view()));
    ASSERT_EQ(fused, batched_reroute_checked(c.ids, c.aid, c.view()));
    for (std::size_t t = 0; t < b; ++t)
      for (std::size_t j = 0; j < static_cast<std::size_t>(k); ++j)
        ASSERT_EQ(fused(t, j), oracle::reroute_one(c.ids(t, j), c.aid[t], rows));
  }
}

// Invariant: the output is a row permutation of the input when the batch is
// permuted along with its AIDs.
TEST(Reroute, CommutesWithRowPermutation) {
  Rng rng(8);
  const RerouteCase c = RerouteCase::random(rng, 257, 6, 64, 20, 8);
  std::vector<std::size_t> perm(257);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
  RerouteCase p = c;
  for (std::size_t t = 0; t < perm.size(); ++t) {
    for (std::size_t j = 0; j < 6; ++j) p.ids(t, j) = c.ids(perm[t], j);
    p.aid[t] = c.aid[perm[t]];
  }
  const auto a = batched_reroute(c.ids, c.aid, c.view());
  const auto b = batched_reroute(p.ids, p.aid, p.view());
  for (std::size_t t = 0; t < perm.size(); ++t)
    for (std::size_t j = 0; j < 6; ++j) ASSERT_EQ(b(t, j), a(perm[t], j));
}

// Tokens of adapter i land either on their base ID or inside adapter i's
// own slot range; distinct inputs stay distinct.
TEST(Reroute, OutputsStayInOwnRange) {
  Rng rng(12);
  const int m = 64, n = 20, e_max = 8;
  const RerouteCase c = RerouteCase::random(rng, 2048, 6, m, n, e_max);
  const auto out = batched_reroute(c.ids, c.aid, c.view());
  for (std::size_t t = 0; t < c.ids.rows(); ++t) {
    std::set<std::int32_t> seen;
    for (std::size_t j = 0; j < 6; ++j) {
      const std::int32_t v = out(t, j);
      seen.insert(v);
      if (v < m) {
        EXPECT_EQ(v, c.ids(t, j));
      } else {
        ASSERT_GE(c.aid[t], 0);
        EXPECT_GE(v, m + c.aid[t] * e_max);
        EXPECT_LT(v, m + (c.aid[t] + 1) * e_max);
      }
    }
    EXPECT_EQ(seen.size(), 6u);
  }
}

TEST(Reroute, InPlaceAliasing) {
  Rng rng(5);
  const RerouteCase c = RerouteCase::random(rng, 64, 4, 32, 6, 5);
  Matrix<std::int32_t> ids = c.ids;
  batched_reroute(ids.flat(), ids.cols(), c.aid, c.view(), ids.flat());
  EXPECT_EQ(ids, batched_reroute(c.ids, c.aid, c.view()));
}

TEST(Validation, AidOutOfRange) {
  const std::vector<std::int32_t> ok{-1, 0, 3};
  EXPECT_NO_THROW(validate_aid(ok, 4));
  EXPECT_EQ(kind_of([] { validate_aid(std::vector<std::int32_t>{0, 4}, 4); }), ErrorKind::kValidation);
  EXPECT_EQ(kind_of([] { validate_aid(std::vector<std::int32_t>{-2}, 4); }), ErrorKind::kValidation);
  EXPECT_EQ(kind_of([] { validate_aid(std::vector<std::int32_t>{0}, 0); }), ErrorKind::kValidation);
}

TEST(Validation, CheckedVariantRejectsBadIds) {
  RerouteCase c = fig5();
  c.ids = Matrix<std::int32_t>(1, 2, {3, 64});
  c.aid = {0};
  EXPECT_EQ(kind_of([&] { batched_reroute_checked(c.ids, c.aid, c.view()); }), ErrorKind::kValidation);
  c.ids = Matrix<std::int32_t>(1, 2, {3, 4});
  c.aid = {2};
  EXPECT_EQ(kind_of([&] { batched_reroute_checked(c.ids, c.aid, c.view()); }), ErrorKind::kValidation);
  c.aid = {0, 0};
  EXPECT_EQ(kind_of([&] { batched_reroute(c.ids, c.aid, c.view()); }), ErrorKind::kConfig);
}

TEST(Snapshot, ViewMatchesRegistryTable) {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.num_experts = 16;
  cfg.top_k = 4;
  cfg.hidden = 4;
  cfg.intermediate = 4;
  cfg.vocab = 16;
  const BaseModel base = BaseModel::generate(cfg, 1);
  ExpertStore store(base, 3, 4, {4096, 256});
  AdapterRegistry reg(store);
  const auto a = generate_synthetic_adapter(8, cfg, {std::vector<int>{4, 2}}, "a");
  reg.load_adapter(a.manifest, a.weights);
  reg.load_adapter(a.manifest, a.weights);
  const auto snap = reg.snapshot();
  Rng rng(4);
  Matrix<std::int32_t> ids(50, 4);
  std::vector<std::int32_t> aid(50);
  for (std::size_t t = 0; t < 50; ++t) {
    aid[t] = static_cast<std::int32_t>(rng.uniform_int(-1, 2));
    for (std::size_t j = 0; j < 4; ++j) ids(t, j) = static_cast<std::int32_t>(rng.uniform_int(0, 15));
  }
  for (int l = 0; l < 2; ++l) {
    Matrix<std::int32_t> hooked = ids;
    RerouteHook{snap.get()}(l, hooked, aid);
    for (std::size_t t = 0; t < 50; ++t)
      for (std::size_t j = 0; j < 4; ++j) ASSERT_EQ(hooked(t, j), snap->at(l, aid[t], ids(t, j)));
  }
}

TEST(Bench, RecordsAreIdenticalAndComplete) {
  RerouteBenchConfig cfg;
  cfg.batches = {0, 1, 64, 1024};
  cfg.trials = 2;
  cfg.min_tokens_per_trial = 1024;
  const auto recs = fused_reroute_bench(cfg);
  ASSERT_EQ(recs.size(), 4u);
  for (const auto& r : recs) {
    EXPECT_TRUE(r.identical) << r.batch;
    if (r.batch > 0) {
      EXPECT_GT(r.fused_total_ns, 0.0);
    }
  }
}

}  // namespace
}  // namespace esft
