#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace xmoda;
using oracle::random_array;

namespace {

PatchSet random_set(Rng& rng, int d, int n, double tau) {
  PatchSet ps;
  ps.tau = tau;
  auto vec = [&] {
    std::vector<double> v(static_cast<std::size_t>(d));
    for (auto& x : v) x = rng.normal(0.0, 0.5);
    return v;
  };
  ps.q = vec();
  ps.k_pos = vec();
  for (int i = 1; i < n; ++i) ps.k_negs.push_back(vec());
  return ps;
}

}  // namespace

TEST(Losses, UnitSuite) {
  const auto r = oracle::loss_unit_suite();
  EXPECT_TRUE(r.pass) << r.detail;
}

TEST(Losses, GradientSuite) {
  const auto r = oracle::gradient_suite();
  EXPECT_TRUE(r.pass) << r.detail;
  EXPECT_GT(r.checks, 50 * 7);
}

TEST(Losses, PatchNceKnownValues) {
  // Uniform similarities, N = 4.
  PatchSet ps;
  ps.tau = 0.5;
  ps.k_pos = {0.0, 1.0};
  ps.q = {1.0, 0.0};
  ps.k_negs = {{0.0, 2.0}, {0.0, -1.0}, {0.0, 0.3}};
  EXPECT_NEAR(patchnce_loss(ps).value, 1.3862944, 1e-7);
}

TEST(Losses, PatchNceMatchesDirectFormula) {
  Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    const auto ps = random_set(rng, 1 + static_cast<int>(rng.below(16)), 2 + static_cast<int>(rng.below(10)),
                               rng.uniform(0.2, 2.0));
    EXPECT_NEAR(patchnce_loss(ps).value, oracle::nce_direct(ps), 1e-12);
  }
}

TEST(Losses, PatchNceIsShiftInvariantAndMonotone) {
  Rng rng(9);
  for (int t = 0; t < 20; ++t) {
    auto ps = random_set(rng, 6, 5, 0.1);
    // With q = e0, adding c to the first coordinate of every key adds c/tau
    // to every logit.
    std::fill(ps.q.begin(), ps.q.end(), 0.0);
    ps.q[0] = 1.0;
    const double base = patchnce_loss(ps).value;
    auto shifted = ps;
    shifted.k_pos[0] += 0.37;
    for (auto& k : shifted.k_negs) k[0] += 0.37;
    EXPECT_NEAR(patchnce_loss(shifted).value, base, 1e-10);
    auto closer = ps;
    closer.k_pos[0] += 0.05;
    EXPECT_LT(patchnce_loss(closer).value, base);
    EXPECT_GT(base, 0.0);
  }
}

TEST(Losses, PatchNceRejectsBadSets) {
  PatchSet ps;
  ps.tau = 0.07;
  ps.q = {1, 0};
  ps.k_pos = {1, 0};
  EXPECT_THROW(patchnce_loss(ps), Error);  // no negatives
  ps.k_negs = {{0, std::nan("")}};
  try {
    patchnce_loss(ps);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NonFiniteInput);
  }
  ps.k_negs = {{0, 1, 2}};
  EXPECT_THROW(patchnce_loss(ps), Error);
  ps.k_negs = {{0, 1}};
  ps.tau = 0;
  EXPECT_THROW(patchnce_loss(ps), Error);
}

TEST(Losses, CycleValues) {
  NdArray<double> zeros({3, 7}, 0.0), ones({3, 7}, 1.0);
  EXPECT_DOUBLE_EQ(cycle_loss(zeros, zeros, ones, zeros).value, 1.0);

  Rng rng(10);
  for (int t = 0; t < 20; ++t) {
    const auto a = random_array({3, 3}, rng), b = random_array({3, 3}, rng);
    const auto c = random_array({3, 3}, rng), d = random_array({3, 3}, rng);
    double s1 = 0, s2 = 0;
    for (int i = 0; i < 9; ++i) {
      s1 += std::abs(c[i] - a[i]);
      s2 += std::abs(d[i] - b[i]);
    }
    const auto v = cycle_loss(a, b, c, d);
    EXPECT_NEAR(v.value, s1 / 9 + s2 / 9, 1e-12);
    EXPECT_GT(v.value, 0.0);
  }
  try {
    cycle_loss(zeros, zeros, NdArray<double>({2, 7}), zeros);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ShapeMismatch);
  }
}

TEST(Losses, CycleSubgradientAtTiesIsZero) {
  NdArray<double> x({1, 2}, std::vector<double>{0.5, -0.5});
  const auto v = cycle_loss(x, x, x, x);
  for (double g : v.grads.at("fg_xs").data) EXPECT_EQ(g, 0.0);
}

TEST(Losses, AdversarialValues) {
  NdArray<double> d({2}, 0.0);
  EXPECT_DOUBLE_EQ(adversarial_loss(d, true).value, 1.0);
  EXPECT_DOUBLE_EQ(adversarial_loss(d, false).value, 0.0);
  Rng rng(11);
  const auto r = random_array({4, 4}, rng);
  double s = 0;
  for (double v : r.data) s += (v - 1) * (v - 1);
  EXPECT_NEAR(adversarial_loss(r, true).value, s / 16, 1e-12);
  d[0] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(adversarial_loss(d, true), Error);
}

TEST(Losses, FdGradientBasics) {
  const NdArray<double> x({2}, std::vector<double>{1, 2});
  const auto g = fd_gradient([](const NdArray<double>& v) { return v[0] * v[0] + v[1] * v[1]; }, x);
  EXPECT_NEAR(g[0], 2.0, 1e-8);
  EXPECT_NEAR(g[1], 4.0, 1e-8);
  const auto z = fd_gradient([](const NdArray<double>&) { return 3.0; }, x);
  EXPECT_EQ(z[0], 0.0);
  EXPECT_EQ(z[1], 0.0);
  EXPECT_THROW(fd_gradient([](const NdArray<double>&) { return 0.0; }, x, 0.0), Error);
}

TEST(Losses, FdGradientAgreesWithPatchNceGradient) {
  Rng rng(12);
  const auto ps = random_set(rng, 8, 5, 0.3);
  const auto g = fd_gradient(
      [&](const NdArray<double>& q) {
        PatchSet p = ps;
        p.q = q.data;
        return patchnce_loss(p).value;
      },
      oracle::from_vec(ps.q));
  EXPECT_LT(oracle::rel_err(g, patchnce_loss(ps).grads.at("q")), 1e-4);
}

TEST(Losses, DiceCeTermsAndErrors) {
  // Perfectly confident correct logits: both terms near 0.
  NdArray<double> logits({3, 1, 3}, -30.0);
  const std::vector<std::uint8_t> labels{0, 1, 2};
  for (int v = 0; v < 3; ++v) logits[labels[static_cast<std::size_t>(v)] * 3 + v] = 30.0;
  const auto lv = dice_ce_loss(logits, labels);
  EXPECT_LT(lv.terms.at("ce"), 1e-12);
  EXPECT_LT(lv.terms.at("dice"), 1e-9);
  EXPECT_NEAR(lv.value, lv.terms.at("ce") + lv.terms.at("dice"), 1e-15);
  EXPECT_THROW(dice_ce_loss(logits, {0, 1}), Error);
  EXPECT_THROW(dice_ce_loss(logits, {0, 1, 3}), Error);
}
