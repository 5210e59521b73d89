#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace xmoda;

namespace {

LabelMask line(std::initializer_list<std::uint8_t> v) {
  LabelMask m({1, 1, static_cast<int>(v.size())}, {1, 1, 1});
  m.data = v;
  return m;
}

}  // namespace

TEST(Metrics, OracleSuite) {
  const auto r = oracle::metric_suite();
  EXPECT_TRUE(r.pass) << r.detail;
}

TEST(Metrics, DiceConventions) {
  const auto e = line({0, 0, 0});
  EXPECT_EQ(dice(e, e, 1), 1.0);
  EXPECT_EQ(dice(e, line({1, 0, 0}), 1), 0.0);
  EXPECT_EQ(dice(line({2, 2, 0}), line({2, 0, 0}), 2), 2.0 / 3.0);
  EXPECT_THROW(dice(e, line({0, 0}), 1), Error);
  Rng rng(1);
  for (int t = 0; t < 30; ++t) {
    const auto a = oracle::random_mask(rng, {3, 4, 5}, 1), b = oracle::random_mask(rng, {3, 4, 5}, 1);
    const double d = dice(a, b, 1);
    EXPECT_EQ(d, dice(b, a, 1));
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0);
  }
}

TEST(Metrics, AssdExamples) {
  LabelMask a({1, 1, 7}, {1, 1, 1}), b({1, 1, 7}, {1, 1, 1});
  a.data[1] = 1;
  b.data[4] = 1;
  EXPECT_DOUBLE_EQ(assd(a, b, 1, {1, 1, 1}), 3.0);
  EXPECT_EQ(assd(a, a, 1, {1, 1, 1}), 0.0);
  try {
    assd(a, b, 2, {1, 1, 1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::EmptyMask);
  }
}

TEST(Metrics, AssdSymmetryAndScaling) {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const auto a = oracle::random_mask(rng, {4, 5, 6}, 2), b = oracle::random_mask(rng, {4, 5, 6}, 2);
    const Spacing3 sp{rng.uniform(0.5, 2), rng.uniform(0.5, 2), rng.uniform(0.5, 2)};
    const double v = assd(a, b, 2, sp);
    EXPECT_NEAR(v, assd(b, a, 2, sp), 1e-12);
    EXPECT_GE(v, 0.0);
    EXPECT_NEAR(assd(a, b, 2, {2 * sp[0], 2 * sp[1], 2 * sp[2]}), 2 * v, 1e-9);
  }
}

TEST(Metrics, AssdZeroForSameSurfaceDifferentInterior) {
  // A 5^3 cube and the same cube with one interior voxel removed: the hole
  // becomes surface in the second mask, so distances are not all zero, but
  // two masks with identical surfaces give 0.
  LabelMask a({5, 5, 5}, {1, 1, 1});
  std::fill(a.data.begin(), a.data.end(), 1);
  EXPECT_EQ(assd(a, a, 1, {1, 1, 1}), 0.0);
  LabelMask b = a;
  b.at(2, 2, 2) = 0;
  EXPECT_GT(assd(a, b, 1, {1, 1, 1}), 0.0);
}

TEST(Metrics, TTestExamples) {
  const auto z = paired_ttest({-1, 0, 1}, {0, 0, 0});
  EXPECT_EQ(z.t, 0.0);
  EXPECT_NEAR(z.p, 1.0, 1e-12);
  const auto r = paired_ttest({1, 2, 3}, {0, 0, 0});
  EXPECT_NEAR(r.t, 3.4641, 1e-4);
  EXPECT_NEAR(r.p, 0.0742, 1e-4);
  EXPECT_EQ(r.df, 2);
  try {
    paired_ttest({2, 3, 4}, {1, 2, 3});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ZeroVariance);
  }
  try {
    paired_ttest({1, 2}, {1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::LengthMismatch);
  }
  try {
    paired_ttest({1}, {2});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::TooFewSamples);
  }
}

TEST(Metrics, TTestAgreesWithBoostAndIsAntisymmetric) {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 2 + rng.below(30);
    std::vector<double> xs(n), ys(n);
    const double shift = rng.uniform(-1, 1);
    for (std::size_t i = 0; i < n; ++i) {
      xs[i] = rng.normal();
      ys[i] = xs[i] + shift + rng.normal(0, 0.5);
    }
    const auto a = paired_ttest(xs, ys), b = paired_ttest(ys, xs);
    const auto ref = oracle::boost_paired_ttest(xs, ys);
    EXPECT_NEAR(a.t, ref.t, 1e-9 * std::max(1.0, std::abs(ref.t)));
    EXPECT_NEAR(a.p, ref.p, 1e-10);
    EXPECT_EQ(a.t, -b.t);
    EXPECT_EQ(a.p, b.p);
  }
}

TEST(Metrics, EvaluateCasesShape) {
  PhantomParams p;
  const auto c = generate_case(p, 0);
  const auto perfect = evaluate_cases({c.mask}, {c.mask}, c.mask.spacing, {"x"});
  ASSERT_EQ(perfect.cases.size(), 1u);
  EXPECT_EQ(perfect.cases[0].dice_mean, 1.0);
  EXPECT_EQ(perfect.cases[0].assd_vs, 0.0);
  EXPECT_EQ(perfect.cases[0].assd_cochlea, 0.0);
  EXPECT_EQ(perfect.agg("dice_mean").sd, 0.0);
  EXPECT_EQ(ResultsTable::table_columns(),
            (std::vector<std::string>{"dice_vs", "dice_cochlea", "dice_mean", "assd_vs", "assd_cochlea"}));

  // A second case where the prediction misses the VS.
  const auto d = generate_case(p, 1);
  LabelMask miss = d.mask;
  for (auto& v : miss.data)
    if (v == 1) v = 0;
  const auto t = evaluate_cases({c.mask, miss}, {c.mask, d.mask}, c.mask.spacing, {"a", "b"});
  EXPECT_EQ(t.cases[1].dice_vs, 0.0);
  EXPECT_FALSE(t.cases[1].assd_vs.has_value());
  EXPECT_DOUBLE_EQ(t.agg("dice_vs").mean, 0.5);
  EXPECT_DOUBLE_EQ(t.agg("dice_mean").mean, (t.cases[0].dice_mean + t.cases[1].dice_mean) / 2);
  EXPECT_EQ(t.agg("assd_vs").n, 1);
}
