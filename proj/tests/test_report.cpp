#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "xmoda/report.hpp"

using namespace xmoda;

namespace {

ResultsTable table(std::vector<double> dice_vs, bool with_assd = true) {
  std::vector<CaseMetrics> cs;
  for (std::size_t i = 0; i < dice_vs.size(); ++i) {
    CaseMetrics c;
    c.case_id = "c" + std::to_string(i);
    c.dice_vs = dice_vs[i];
    c.dice_cochlea = 0.5;
    c.dice_mean = 0.5 * (c.dice_vs + c.dice_cochlea);
    if (with_assd) c.assd_vs = 1.25;
    cs.push_back(c);
  }
  return aggregate_cases(cs);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Slice2D tile(int h, int w, float v) {
  Slice2D s;
  s.height = h;
  s.width = w;
  s.data.assign(static_cast<std::size_t>(h) * w, v);
  return s;
}

}  // namespace

TEST(Report, SignificanceThresholds) {
  EXPECT_EQ(significance(0.5), "n.s.");
  EXPECT_EQ(significance(0.05), "n.s.");
  EXPECT_EQ(significance(0.0499), "*");
  EXPECT_EQ(significance(1e-4), "*");
  EXPECT_EQ(significance(0.99e-4), "****");
}

TEST(Report, CompareTables) {
  const auto a = table({0.9, 0.8, 0.7}), b = table({0.8, 0.6, 0.4});
  const auto c = compare_tables("a", a, "b", b, "dice_vs");
  EXPECT_EQ(c.n, 3);
  ASSERT_TRUE(c.test.has_value());
  EXPECT_EQ(c.test->df, 2);
  EXPECT_NEAR(c.mean_a, 0.8, 1e-12);
  EXPECT_NEAR(c.mean_b, 0.6, 1e-12);
  EXPECT_EQ(c.annotation, significance(c.test->p));
  EXPECT_EQ(c.flag, "");

  const auto same = compare_tables("a", a, "a2", a, "dice_vs");
  EXPECT_FALSE(same.test.has_value());
  EXPECT_EQ(same.annotation, "n.s.");
  EXPECT_EQ(same.flag, "zero_variance");
  EXPECT_NE(comparisons_csv({same}).find(",NA,NA,NA,n.s.,zero_variance\n"), std::string::npos);
}

TEST(Report, MetricsCsvRows) {
  const auto csv = metrics_csv({{"arm/round0", table({1.0, 0.5})}, {"x", table({0.25}, false)}});
  const std::string expect =
      "case_id,dice_vs,dice_cochlea,dice_mean,assd_vs,assd_cochlea\n"
      "arm/round0/c0,1.000000,0.500000,0.750000,1.250000,NA\n"
      "arm/round0/c1,0.500000,0.500000,0.500000,1.250000,NA\n"
      "arm/round0/AGG_mean,0.750000,0.500000,0.625000,1.250000,NA\n";
  EXPECT_EQ(csv.substr(0, expect.size()), expect);
  EXPECT_NE(csv.find("x/c0,0.250000,0.500000,0.375000,NA,NA\n"), std::string::npos);
  EXPECT_NE(csv.find("x/AGG_mean,0.250000,0.500000,0.375000,NA,NA\n"), std::string::npos);
}

TEST(Report, MontageLayout) {
  // Two rows, four columns of 5x6 tiles.
  std::vector<std::vector<Slice2D>> rows(2);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 4; ++c) rows[r].push_back(tile(5, 6, c == 0 ? -1.0f : (c == 3 ? 1.0f : 0.0f)));
  const auto img = montage(rows, {"S", "CG", "QS", "T"});
  EXPECT_EQ(img.width, 4 * 6 + 3 * kMontageGap);
  EXPECT_EQ(img.height, kMontageHeader + 2 * 5 + kMontageGap);
  EXPECT_EQ(img.at(kMontageHeader, 0), 0);
  EXPECT_EQ(img.at(kMontageHeader, 6 + kMontageGap), 128);
  EXPECT_EQ(img.at(img.height - 1, img.width - 1), 255);
  EXPECT_THROW(montage(rows, {"a"}), Error);
  rows[1][2] = tile(4, 6, 0);
  EXPECT_THROW(montage(rows, {"S", "CG", "QS", "T"}), Error);
}

TEST(Report, PgmRoundTrip) {
  GrayImage img(3, 4);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(i * 20);
  img.pixels[5] = '\n';
  const auto bytes = encode_pgm(img, "columns: a b");
  EXPECT_EQ(bytes.rfind("P5\n# columns: a b\n4 3\n255\n", 0), 0u);
  const auto back = decode_pgm(bytes);
  EXPECT_EQ(back.width, 4);
  EXPECT_EQ(back.height, 3);
  EXPECT_EQ(back.pixels, img.pixels);
  EXPECT_THROW(decode_pgm("P2\n1 1\n255\n0"), Error);
  EXPECT_THROW(decode_pgm(bytes.substr(0, bytes.size() - 1)), Error);
}

TEST(Report, EmitReport) {
  const fs::path dir = fs::temp_directory_path() / "xmoda_report_test";
  fs::remove_all(dir);
  const std::vector<std::pair<std::string, ResultsTable>> tables{{"a", table({0.9, 0.7})}};
  EXPECT_EQ(emit_report(tables, {}, {}, dir), (std::vector<std::string>{"metrics.csv"}));
  EXPECT_FALSE(fs::exists(dir / "comparisons.csv"));
  EXPECT_EQ(slurp(dir / "metrics.csv"), metrics_csv(tables));

  MontageSpec m{"examples", {"S", "T"}, {{tile(4, 4, 0), tile(4, 4, 1)}}};
  const auto cmp = compare_tables("a", tables[0].second, "b", table({0.5, 0.6}), "dice_vs");
  const auto files = emit_report(tables, {cmp}, {m}, dir);
  EXPECT_EQ(files, (std::vector<std::string>{"metrics.csv", "comparisons.csv", "examples.pgm"}));
  const auto img = decode_pgm(slurp(dir / "examples.pgm"));
  EXPECT_EQ(img.width, 4 + kMontageGap + 4);
  EXPECT_EQ(slurp(dir / "comparisons.csv"), comparisons_csv({cmp}));
  fs::remove_all(dir);
}
