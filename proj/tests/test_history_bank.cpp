// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "tkc/history_bank.hpp"

using namespace tkc;

namespace {

/// Feature that encodes (sample, epoch) so any fetch can be traced back.
std::vector<double> tag(std::size_t i, std::size_t epoch, std::size_t d) {
  std::vector<double> v(d);
  for (std::size_t c = 0; c < d; ++c) v[c] = static_cast<double>(1000 * epoch + 10 * i + c);
  return v;
}

void fill_epoch(HistoryBank& b) {
  for (std::size_t i = 0; i < b.samples(); ++i) b.write(i, tag(i, b.epoch(), b.dim()));
  b.advance_epoch();
}

}  // namespace

TEST(HistoryBank, WriteThenReadRoundTrip) {
  HistoryBank b(4, 2, 3, 1);
  const auto f = tag(2, 0, 3);
  b.write(2, f);
  const auto c = b.cell(2, b.cursor());
  EXPECT_TRUE(std::equal(c.begin(), c.end(), f.begin()));
  EXPECT_EQ(b.stamp(2, b.cursor()), 0);
  EXPECT_EQ(b.stamp(1, b.cursor()), -1);
}

TEST(HistoryBank, OverwriteWithinAnEpochKeepsLatest) {
  HistoryBank b(2, 1, 2, 1);
  b.write(0, std::vector<double>{1, 2});
  b.write(0, std::vector<double>{3, 4});
  EXPECT_EQ(b.cell(0, 0)[0], 3.0);
  EXPECT_EQ(b.cell(0, 0)[1], 4.0);
}

TEST(HistoryBank, ColumnBecomesValidOnlyAfterEverySampleWrote) {
  HistoryBank b(3, 2, 2, 1);
  b.write(0, tag(0, 0, 2));
  b.write(1, tag(1, 0, 2));
  EXPECT_FALSE(b.column_valid(0));
  b.write(1, tag(1, 0, 2));
  EXPECT_FALSE(b.column_valid(0));
  b.write(2, tag(2, 0, 2));
  EXPECT_TRUE(b.column_valid(0));
  EXPECT_EQ(b.column_epoch(0), 0);
  EXPECT_FALSE(b.column_valid(1));
}

TEST(HistoryBank, CursorCyclesThroughColumns) {
  HistoryBank b(2, 2, 1, 1);
  std::vector<std::size_t> seen;
  for (int e = 0; e < 4; ++e) {
    seen.push_back(b.cursor());
    fill_epoch(b);
  }
  EXPECT_EQ(seen, (std::vector<std::size_t>{0, 1, 0, 1}));
}

TEST(HistoryBank, FootprintIsConstant) {
  HistoryBank b(5, 3, 4, 1);
  const auto before = b.footprint();
  EXPECT_EQ(before, 5u * 3 * 4);
  for (int e = 0; e < 7; ++e) fill_epoch(b);
  EXPECT_EQ(b.footprint(), before);
}

TEST(HistoryBank, FetchBeforeWarmupThrows) {
  HistoryBank b(3, 2, 2, 1);
  EXPECT_THROW(b.fetch_row(0), WarmupIncomplete);
  fill_epoch(b);
  EXPECT_THROW(b.fetch_row(0), WarmupIncomplete);
  fill_epoch(b);
  EXPECT_NO_THROW(b.fetch_row(0));
}

TEST(HistoryBank, SingleColumnFetchReturnsPreviousEpoch) {
  HistoryBank b(3, 1, 2, 1);
  fill_epoch(b);
  const Tensor r = b.fetch_row(1);
  EXPECT_EQ(r.rows(), 1u);
  EXPECT_EQ(r.at(0, 0), tag(1, 0, 2)[0]);
}

TEST(HistoryBank, FetchIsOldestFirstAcrossManyEpochs) {
  const std::size_t n = 4, h = 3, d = 2;
  HistoryBank b(n, h, d, 1);
  for (std::size_t e = 0; e < 9; ++e) {
    if (b.epoch() >= h) {
      for (std::size_t i = 0; i < n; ++i) {
        const Tensor r = b.fetch_row(i);
        for (std::size_t k = 0; k < h; ++k)
          for (std::size_t c = 0; c < d; ++c) EXPECT_EQ(r.at(k, c), tag(i, e - h + k, d)[c]) << e << " " << i << " " << k;
      }
    }
    fill_epoch(b);
  }
}

TEST(HistoryBank, FetchMidEpochStillSeesFullWindowForUnwrittenRows) {
  HistoryBank b(3, 2, 1, 1);
  fill_epoch(b);
  fill_epoch(b);
  b.write(0, tag(0, 2, 1));
  EXPECT_THROW(b.fetch_row(0), WarmupIncomplete);
  const Tensor r = b.fetch_row(1);
  EXPECT_EQ(r.at(0, 0), tag(1, 0, 1)[0]);
  EXPECT_EQ(r.at(1, 0), tag(1, 1, 1)[0]);
}

TEST(HistoryBank, OldestColumnStaysReadableUntilRewritten) {
  HistoryBank b(3, 2, 1, 1);
  fill_epoch(b);
  fill_epoch(b);
  EXPECT_TRUE(b.column_valid(b.physical_column(0)));
  b.write(0, tag(0, 2, 1));
  EXPECT_TRUE(b.column_valid(b.physical_column(0)));
  EXPECT_EQ(b.cell(1, b.physical_column(0))[0], tag(1, 0, 1)[0]);
}

TEST(HistoryBank, PreviousEpochFeature) {
  HistoryBank b(2, 2, 1, 1);
  EXPECT_FALSE(b.previous(0).has_value());
  fill_epoch(b);
  ASSERT_TRUE(b.previous(1).has_value());
  EXPECT_EQ((*b.previous(1))[0], tag(1, 0, 1)[0]);
}

TEST(HistoryBankNegatives, ExhaustiveDrawIsEveryOtherSample) {
  const std::size_t n = 9;
  HistoryBank b(n, 2, 1, 3);
  fill_epoch(b);
  fill_epoch(b);
  for (std::size_t ex = 0; ex < n; ++ex) {
    auto idx = b.sample_negative_indices(1, ex, n - 1);
    std::set<std::uint32_t> s(idx.begin(), idx.end());
    EXPECT_EQ(s.size(), n - 1);
    EXPECT_FALSE(s.count(static_cast<std::uint32_t>(ex)));
  }
}

TEST(HistoryBankNegatives, DistinctAndNeverTheAnchor) {
  HistoryBank b(50, 1, 1, 5);
  fill_epoch(b);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t ex = static_cast<std::size_t>(trial) % 50;
    auto idx = b.sample_negative_indices(0, ex, 12);
    std::set<std::uint32_t> s(idx.begin(), idx.end());
    EXPECT_EQ(s.size(), 12u);
    EXPECT_FALSE(s.count(static_cast<std::uint32_t>(ex)));
    for (auto v : idx) EXPECT_LT(v, 50u);
  }
}

TEST(HistoryBankNegatives, RoughlyUniformOverThePool) {
  const std::size_t n = 10;
  HistoryBank b(n, 1, 1, 7);
  fill_epoch(b);
  std::vector<int> hits(n, 0);
  const int trials = 20000;
  for (int t = 0; t < trials; ++t)
    for (auto v : b.sample_negative_indices(0, 0, 3)) ++hits[v];
  EXPECT_EQ(hits[0], 0);
  const double expect = trials * 3.0 / 9.0;
  for (std::size_t i = 1; i < n; ++i) EXPECT_NEAR(hits[i], expect, 0.05 * expect);
}

TEST(HistoryBankNegatives, DeterministicUnderSeed) {
  HistoryBank a(20, 2, 1, 11), b(20, 2, 1, 11);
  for (int e = 0; e < 2; ++e) {
    fill_epoch(a);
    fill_epoch(b);
  }
  for (int t = 0; t < 10; ++t) EXPECT_EQ(a.sample_negative_indices(0, 3, 7), b.sample_negative_indices(0, 3, 7));
}

TEST(HistoryBankNegatives, FeaturesComeFromTheRequestedEpoch) {
  HistoryBank b(6, 2, 1, 13);
  fill_epoch(b);
  fill_epoch(b);
  const Tensor older = b.sample_negatives(0, 0, 5);
  const Tensor newer = b.sample_negatives(1, 0, 5);
  for (std::size_t r = 0; r < 5; ++r) {
    EXPECT_LT(older.at(r, 0), 1000.0);
    EXPECT_GE(newer.at(r, 0), 1000.0);
  }
}

TEST(HistoryBankNegatives, InvalidRequestsThrow) {
  HistoryBank b(5, 2, 1, 1);
  EXPECT_THROW(b.sample_negative_indices(0, 0, 2), WarmupIncomplete);
  fill_epoch(b);
  fill_epoch(b);
  EXPECT_THROW(b.sample_negative_indices(0, 0, 5), ValueError);
  EXPECT_THROW(b.sample_negative_indices(2, 0, 2), ShapeError);
  EXPECT_THROW(b.sample_negative_indices(0, 5, 2), ShapeError);
}

TEST(HistoryBank, SaveLoadRestoresStateAndStream) {
  HistoryBank a(6, 2, 3, 17);
  fill_epoch(a);
  fill_epoch(a);
  a.write(0, tag(0, 2, 3));
  ByteWriter w;
  a.save(w);
  const std::string bytes = w.take();
  ByteReader r(bytes);
  HistoryBank b = HistoryBank::load(r);
  EXPECT_TRUE(r.done());
  EXPECT_EQ(b.epoch(), a.epoch());
  EXPECT_TRUE(b.fetch_row(3).same_values(a.fetch_row(3)));
  EXPECT_EQ(b.sample_negative_indices(1, 2, 4), a.sample_negative_indices(1, 2, 4));
  ByteWriter w2;
  b.save(w2);
  ByteWriter w3;
  a.save(w3);
  EXPECT_EQ(w2.take(), w3.take());
}

TEST(HistoryBank, BadExtentsThrow) {
  EXPECT_THROW(HistoryBank(0, 1, 1, 1), ShapeError);
  EXPECT_THROW(HistoryBank(1, 0, 1, 1), ShapeError);
  HistoryBank b(2, 1, 2, 1);
  EXPECT_THROW(b.write(0, std::vector<double>{1}), ShapeError);
  EXPECT_THROW(b.write(2, std::vector<double>{1, 2}), ShapeError);
}

TEST(TeacherSnapshots, KeepsLastHOldestFirst) {
  TeacherSnapshots s(2);
  EXPECT_FALSE(s.ready());
  for (std::uint64_t seed = 1; seed <= 3; ++seed) s.push(init_params({3, 2}, seed));
  ASSERT_TRUE(s.ready());
  EXPECT_TRUE(s.at(0).same_values(init_params({3, 2}, 2)));
  EXPECT_TRUE(s.at(1).same_values(init_params({3, 2}, 3)));
  EXPECT_EQ(s.targets(Tensor({4, 3})).size(), 2u);
}
