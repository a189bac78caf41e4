#include <gtest/gtest.h>

#include "cnnfix/error.hpp"
#include "cnnfix/eval.hpp"
#include "oracles.hpp"

using namespace cnnfix;

namespace {

HeatMap map_of(int w, int h, std::vector<float> v) { return HeatMap{w, h, std::move(v)}; }

// Ten records: 3 failures (wrong class; IoU 1/7; no box).
std::vector<LocalizationRecord> ten_records() {
  const BoundingBox gt{0, 0, 9, 9};
  std::vector<LocalizationRecord> r;
  for (int i = 0; i < 7; ++i) r.push_back({i % 3, i % 3, gt, {gt}});
  r.push_back({1, 2, gt, {gt}});
  r.push_back({0, 0, BoundingBox{5, 5, 14, 14}, {gt}});
  r.push_back({0, 0, std::nullopt, {gt}});
  return r;
}

}  // namespace

TEST(Iou, Identities) {
  const BoundingBox a{0, 0, 9, 9}, b{5, 5, 14, 14}, c{20, 20, 25, 25};
  EXPECT_EQ(iou(a, a), 1.0);
  EXPECT_EQ(iou(a, c), 0.0);
  EXPECT_DOUBLE_EQ(iou(a, b), 25.0 / 175.0);
  EXPECT_EQ(iou(a, b), iou(b, a));
  EXPECT_EQ(iou({3, 3, 3, 3}, {3, 3, 3, 3}), 1.0);
}

TEST(Iou, SymmetricOnRandomBoxes) {
  oracle::Rng rng(1);
  for (int n = 0; n < 500; ++n) {
    auto box = [&] {
      const int x = rng.integer(0, 30), y = rng.integer(0, 30);
      return BoundingBox{x, y, x + rng.integer(0, 20), y + rng.integer(0, 20)};
    };
    const BoundingBox a = box(), b = box();
    EXPECT_EQ(iou(a, b), iou(b, a));
    EXPECT_GE(iou(a, b), 0.0);
    EXPECT_LE(iou(a, b), 1.0);
  }
}

TEST(LocalizationError, Counting) {
  const BoundingBox gt{0, 0, 9, 9};
  std::vector<LocalizationRecord> perfect = {{0, 0, gt, {gt}}, {1, 1, gt, {gt}}};
  EXPECT_EQ(localization_error(perfect), 0.0);
  std::vector<LocalizationRecord> low = {{0, 0, BoundingBox{0, 0, 9, 3}, {gt}}};
  EXPECT_EQ(localization_error(low), 100.0);
  EXPECT_DOUBLE_EQ(localization_error(ten_records()), 30.0);
  EXPECT_THROW(localization_error({}), DataError);
}

TEST(LocalizationError, AnyInstanceMatches) {
  const BoundingBox a{0, 0, 9, 9}, b{30, 30, 39, 39};
  std::vector<LocalizationRecord> r = {{2, 2, b, {a, b}}};
  EXPECT_TRUE(localized(r[0]));
  EXPECT_EQ(localization_error(r), 0.0);
}

TEST(LocalizationError, Monotone) {
  std::vector<LocalizationRecord> r = ten_records();
  double prev = localization_error(r);
  for (auto& rec : r) {
    rec.predicted_class = rec.true_class + 1;
    const double now = localization_error(r);
    EXPECT_GE(now, prev);
    prev = now;
  }
  EXPECT_EQ(prev, 100.0);
}

TEST(PrecisionAtEer, ExactAndComplement) {
  const std::vector<std::uint8_t> mask = {1, 1, 0, 0, 1, 0};
  EXPECT_EQ(precision_at_eer(map_of(3, 2, {1, 1, 0, 0, 1, 0}), mask), 1.0);
  EXPECT_EQ(precision_at_eer(map_of(3, 2, {0, 0, 1, 1, 0, 1}), mask), 0.0);
  EXPECT_EQ(precision_at_eer(map_of(3, 2, {0, 0, 0, 0, 0, 0}), mask), 0.0);
  EXPECT_THROW(precision_at_eer(map_of(3, 2, {0, 0, 0, 0, 0, 0}), std::vector<std::uint8_t>(5)), ShapeError);
}

TEST(PrecisionAtEer, TiesPreferHigherThreshold) {
  // Counts 1 (t=0.9) and 3 (t=0.5) are both 1 away from the target of 2.
  const std::vector<std::uint8_t> mask = {1, 1, 0, 0};
  EXPECT_EQ(precision_at_eer(map_of(4, 1, {0.9f, 0.5f, 0.5f, 0.0f}), mask), 1.0);
}

TEST(PrecisionAtEer, MatchesSortOracle) {
  oracle::Rng rng(2);
  for (int n = 0; n < 100; ++n) {
    const int w = rng.integer(3, 20), h = rng.integer(3, 20);
    std::vector<float> values(static_cast<std::size_t>(w * h));
    std::vector<std::uint8_t> mask(values.size());
    for (auto& v : values) v = rng.integer(0, 3) == 0 ? 0.0f : static_cast<float>(rng.lattice(0, 10, 0.1));
    for (auto& m : mask) m = rng.integer(0, 2) == 0;
    mask[0] = 1;
    const double got = precision_at_eer(map_of(w, h, values), mask);
    EXPECT_NEAR(got, oracle::precision_at_eer(values, mask), 1e-9);
    EXPECT_GE(got, 0.0);
    EXPECT_LE(got, 1.0);
  }
}

TEST(ProposalMetrics, PerfectAndEmpty) {
  const BoundingBox gt{0, 0, 9, 9}, far{50, 50, 60, 60};
  std::vector<LocalizationRecord> perfect = {{0, 0, gt, {gt}}, {1, 1, gt, {gt}}};
  ProposalMetrics p = proposal_metrics(perfect);
  EXPECT_EQ(p.mean_recall, 1.0);
  EXPECT_EQ(p.mean_precision, 1.0);
  std::vector<LocalizationRecord> none = {{0, 0, far, {gt}}, {1, 1, far, {gt}}};
  p = proposal_metrics(none);
  EXPECT_EQ(p.mean_recall, 0.0);
  EXPECT_EQ(p.mean_precision, 0.0);
  EXPECT_THROW(proposal_metrics({}), DataError);
}

TEST(ProposalMetrics, TwoClassHandFixture) {
  // Class 0: image A has two objects, the proposal hits one; image B's
  //   proposal misses. Recall 1/3, precision 1/2.
  // Class 1: one image, proposal hits its only object. Recall 1, precision 1.
  const BoundingBox a1{0, 0, 9, 9}, a2{20, 20, 29, 29}, b1{0, 0, 9, 9}, c1{10, 10, 19, 19};
  std::vector<LocalizationRecord> r = {
      {0, 0, BoundingBox{0, 0, 9, 8}, {a1, a2}},
      {0, 0, BoundingBox{30, 30, 39, 39}, {b1}},
      {1, 1, BoundingBox{10, 10, 19, 19}, {c1}},
  };
  ProposalMetrics p = proposal_metrics(r);
  ASSERT_EQ(p.per_class.size(), 2u);
  EXPECT_DOUBLE_EQ(p.per_class[0].recall, 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(p.per_class[0].precision, 0.5);
  EXPECT_EQ(p.per_class[1].recall, 1.0);
  EXPECT_EQ(p.per_class[1].precision, 1.0);
  EXPECT_DOUBLE_EQ(p.mean_recall, (1.0 / 3.0 + 1.0) / 2.0);
  EXPECT_DOUBLE_EQ(p.mean_precision, 0.75);
}
