#include <gtest/gtest.h>

#include <deque>

#include "xmoda/phantom.hpp"

using namespace xmoda;

namespace {

int components(const LabelMask& m, int label) {
  std::vector<char> seen(m.data.size(), 0);
  int n = 0;
  const auto [D, H, W] = m.shape;
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (m.at(z, y, x) != label || seen[static_cast<std::size_t>(m.index(z, y, x))]) continue;
        ++n;
        std::deque<Index3> q{{z, y, x}};
        seen[static_cast<std::size_t>(m.index(z, y, x))] = 1;
        while (!q.empty()) {
          const auto p = q.front();
          q.pop_front();
          for (const Index3 d : {Index3{1, 0, 0}, Index3{-1, 0, 0}, Index3{0, 1, 0}, Index3{0, -1, 0},
                                 Index3{0, 0, 1}, Index3{0, 0, -1}}) {
            const int a = p[0] + d[0], b = p[1] + d[1], c = p[2] + d[2];
            if (a < 0 || b < 0 || c < 0 || a >= D || b >= H || c >= W) continue;
            const auto i = static_cast<std::size_t>(m.index(a, b, c));
            if (m.data[i] == label && !seen[i]) {
              seen[i] = 1;
              q.push_back({a, b, c});
            }
          }
        }
      }
  return n;
}

double mean_over(const Volume& v, const LabelMask& m, int label) {
  double s = 0;
  int n = 0;
  for (std::size_t i = 0; i < v.data.size(); ++i)
    if (m.data[i] == label) {
      s += v.data[i];
      ++n;
    }
  return s / n;
}

}  // namespace

TEST(Phantom, Deterministic) {
  PhantomParams p;
  const auto a = generate_case(p, 3), b = generate_case(p, 3);
  EXPECT_EQ(a.source, b.source);
  EXPECT_EQ(a.target, b.target);
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_NE(generate_case(p, 4).mask, a.mask);
  p.seed = 8;
  EXPECT_NE(generate_case(p, 3).source, a.source);
}

TEST(Phantom, StructureCountsAndIntensityOrder) {
  PhantomParams p;
  for (int i = 0; i < 20; ++i) {
    const auto c = generate_case(p, i);
    EXPECT_EQ(components(c.mask, 1), 1) << i;
    EXPECT_EQ(components(c.mask, 2), 2) << i;
    EXPECT_EQ(c.source.shape, p.volume_shape);
    EXPECT_EQ(c.source.spacing, p.spacing);
    for (const Volume* v : {&c.source, &c.target})
      for (float x : v->data) {
        ASSERT_GE(x, -1.0f);
        ASSERT_LE(x, 1.0f);
      }
    // S: tumour brightest. T: tumour darkest, cochlea brightest.
    EXPECT_GT(mean_over(c.source, c.mask, 1), mean_over(c.source, c.mask, 2)) << i;
    EXPECT_GT(mean_over(c.source, c.mask, 2), mean_over(c.source, c.mask, 0)) << i;
    EXPECT_LT(mean_over(c.target, c.mask, 1), mean_over(c.target, c.mask, 0)) << i;
    EXPECT_GT(mean_over(c.target, c.mask, 2), mean_over(c.target, c.mask, 0)) << i;
  }
}

TEST(Phantom, RejectsTooSmallShapes) {
  PhantomParams p;
  p.volume_shape = {4, 12, 12};
  try {
    generate_case(p, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ShapeTooSmall);
  }
  p = PhantomParams{};
  p.spacing[2] = 0;
  EXPECT_THROW(generate_case(p, 0), Error);
}

TEST(Phantom, DatasetManifest) {
  const fs::path dir = fs::temp_directory_path() / "xmoda_phantom_dataset";
  fs::remove_all(dir);
  PhantomParams p;
  p.volume_shape = {12, 40, 40};
  p.vs_radius_range = {4, 5};
  p.cochlea_radius_range = {2, 2.5};
  const auto m = generate_dataset(p, 2, 3, 1, dir);
  EXPECT_EQ(m.with_role(kRoleSourceLabeled).size(), 2u);
  EXPECT_EQ(m.with_role(kRoleTargetUnlabeled).size(), 3u);
  EXPECT_EQ(m.with_role(kRoleValidationPaired).size(), 1u);
  std::set<std::int64_t> ids;
  for (const auto& e : m.entries) ids.insert(e.case_id);
  EXPECT_EQ(ids.size(), 6u);

  const auto r = read_dataset_manifest(dir / "manifest.json");
  ASSERT_EQ(r.entries.size(), 6u);
  EXPECT_EQ(r.params.volume_shape, p.volume_shape);
  const auto val = r.with_role(kRoleValidationPaired).front();
  const auto c = generate_case(p, val.case_id);
  EXPECT_EQ(load_volume(dir / val.path), c.source);
  EXPECT_EQ(load_volume(dir / val.target_path), c.target);
  EXPECT_EQ(load_mask(dir / val.mask_path), c.mask);
  EXPECT_FALSE(r.with_role(kRoleTargetUnlabeled).front().has_mask);
  fs::remove_all(dir);
}
