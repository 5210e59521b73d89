#include <gtest/gtest.h>

#include <zlib.h>

#include "oracles.hpp"
#include "xmoda/nifti.hpp"

using namespace xmoda;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("xmoda_vio_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                        "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

template <class F>
Errc code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return Errc::InvalidArgument;
}

Volume ramp(Index3 shape, Spacing3 sp) {
  Volume v(shape, sp, "ramp");
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = static_cast<float>(i);
  return v;
}

// Minimal single-file NIfTI-1 writer for the loader tests.
std::string nifti_bytes(std::array<std::int16_t, 3> dim, std::array<float, 3> pixdim, const std::vector<float>& values,
                        const float* srow = nullptr) {
  std::string h(352, '\0');
  auto put = [&](std::size_t off, auto v) { std::memcpy(h.data() + off, &v, sizeof(v)); };
  put(0, std::int32_t{348});
  put(40, std::int16_t{3});
  for (int a = 0; a < 3; ++a) put(42 + 2 * a, dim[a]);
  put(70, std::int16_t{16});
  put(72, std::int16_t{32});
  put(76, 1.0f);
  for (int a = 0; a < 3; ++a) put(80 + 4 * a, pixdim[a]);
  put(108, 352.0f);
  if (srow) {
    put(254, std::int16_t{1});
    for (int i = 0; i < 12; ++i) put(280 + 4 * i, srow[i]);
  }
  std::memcpy(h.data() + 344, "n+1", 4);
  h.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(float));
  return h;
}

}  // namespace

TEST(VolumeIo, PreprocessingSuite) {
  const auto r = oracle::preprocessing_suite();
  EXPECT_TRUE(r.pass) << r.detail;
}

TEST(VolumeIo, SaveLoadRoundTrip) {
  TempDir tmp;
  Rng rng(1);
  const auto v = oracle::random_volume(rng, {4, 4, 4}, {1.5, 0.5, 0.75}, "v");
  save_volume(v, tmp.path / "v.json");
  EXPECT_EQ(load_volume(tmp.path / "v.json"), v);
  EXPECT_TRUE(fs::exists(tmp.path / "v.raw"));

  LabelMask m({2, 3, 4}, {1, 1, 2});
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = static_cast<std::uint8_t>(i % 3);
  save_mask(m, tmp.path / "m.json");
  EXPECT_EQ(load_mask(tmp.path / "m.json"), m);
  EXPECT_THROW(load_volume(tmp.path / "m.json"), Error);
}

TEST(VolumeIo, LoadErrors) {
  TempDir tmp;
  EXPECT_EQ(code_of([&] { load_volume(tmp.path / "absent.json"); }), Errc::MissingFile);

  const auto v = ramp({2, 2, 2}, {1, 1, 1});
  save_volume(v, tmp.path / "v.json");
  {
    // Header says 8 scalars, payload holds 7.
    std::ofstream os(tmp.path / "v.raw", std::ios::binary | std::ios::trunc);
    std::vector<float> seven(7, 1.0f);
    os.write(reinterpret_cast<const char*>(seven.data()), 7 * 4);
  }
  EXPECT_EQ(code_of([&] { load_volume(tmp.path / "v.json"); }), Errc::CorruptHeader);
  {
    std::vector<float> eight(8, 0.0f);
    eight[3] = std::nanf("");
    std::ofstream os(tmp.path / "v.raw", std::ios::binary | std::ios::trunc);
    os.write(reinterpret_cast<const char*>(eight.data()), 8 * 4);
  }
  EXPECT_EQ(code_of([&] { load_volume(tmp.path / "v.json"); }), Errc::NonFiniteData);
  {
    std::ofstream os(tmp.path / "v.json", std::ios::trunc);
    os << "{\"format\": \"VVOL\"";
  }
  EXPECT_EQ(code_of([&] { load_volume(tmp.path / "v.json"); }), Errc::CorruptHeader);

  Volume bad = v;
  bad.spacing[1] = 0;
  EXPECT_EQ(code_of([&] { save_volume(bad, tmp.path / "b.json"); }), Errc::InvalidSpacing);
  bad = v;
  bad.data[0] = INFINITY;
  EXPECT_EQ(code_of([&] { save_volume(bad, tmp.path / "b.json"); }), Errc::NonFiniteData);
}

TEST(VolumeIo, ResampleIdentityAndConstant) {
  Rng rng(2);
  const auto v = oracle::random_volume(rng, {3, 5, 4}, {2, 1, 1}, "v");
  EXPECT_EQ(resample(v, v.spacing), v);

  Volume c({4, 6, 6}, {1, 1, 1}, "c", 0.25f);
  const auto r = resample(c, {2, 0.5, 1.5});
  EXPECT_EQ(r.shape, (Index3{2, 12, 4}));
  for (float x : r.data) EXPECT_EQ(x, 0.25f);
  EXPECT_EQ(code_of([&] { resample(c, {1, -1, 1}); }), Errc::InvalidSpacing);
}

TEST(VolumeIo, ResampleRampMatchesCenterFormula) {
  // Downsampling by 2 along x: output o samples input coordinate 2o + 0.5.
  const auto v = ramp({1, 1, 8}, {1, 1, 1});
  const auto r = resample(v, {1, 1, 2});
  ASSERT_EQ(r.shape, (Index3{1, 1, 4}));
  for (int o = 0; o < 4; ++o) EXPECT_FLOAT_EQ(r.data[o], 2.0f * o + 0.5f);

  // Upsampling by 2: coordinate (o + 0.5) / 2 - 0.5, clamped at both ends.
  const auto u = resample(ramp({1, 1, 4}, {1, 1, 1}), {1, 1, 0.5});
  ASSERT_EQ(u.shape, (Index3{1, 1, 8}));
  for (int o = 0; o < 8; ++o) EXPECT_FLOAT_EQ(u.data[o], static_cast<float>(std::clamp((o + 0.5) / 2 - 0.5, 0.0, 3.0)));

  // Nearest mode never invents values.
  const auto n = resample(ramp({1, 3, 3}, {1, 1, 1}), {1, 0.4, 0.7}, Interp::Nearest);
  for (float x : n.data) EXPECT_EQ(x, std::round(x));
}

TEST(VolumeIo, MaskResampleKeepsLabels) {
  LabelMask m({2, 4, 4}, {1, 1, 1});
  m.at(0, 1, 1) = 1;
  m.at(1, 2, 2) = 2;
  const auto up = resample(m, {0.5, 0.5, 0.5});
  EXPECT_EQ(up.shape, (Index3{4, 8, 8}));
  EXPECT_EQ(oracle::label_set(up), oracle::label_set(m));
  EXPECT_EQ(resample(up, {1, 1, 1}), m);
}

TEST(VolumeIo, SliceMetadataAndMerge) {
  const auto v = ramp({3, 4, 5}, {2, 1, 1});
  const auto sl = slice_axial(v);
  ASSERT_EQ(sl.size(), 3u);
  for (int z = 0; z < 3; ++z) {
    EXPECT_EQ(sl[z].z_index, z);
    EXPECT_EQ(sl[z].parent_id, "ramp");
    EXPECT_EQ(sl[z].crop_box, (CropBox{0, 0, 4, 5}));
    EXPECT_EQ(sl[z].at(1, 2), v.at(z, 1, 2));
  }
  EXPECT_EQ(merge_slices(sl, meta_of(v)), v);

  auto reversed = sl;
  std::reverse(reversed.begin(), reversed.end());
  EXPECT_EQ(merge_slices(reversed, meta_of(v)), v);

  auto dup = sl;
  dup[2].z_index = 1;
  EXPECT_EQ(code_of([&] { merge_slices(dup, meta_of(v)); }), Errc::DuplicateSlice);
  auto missing = sl;
  missing.pop_back();
  EXPECT_EQ(code_of([&] { merge_slices(missing, meta_of(v)); }), Errc::MissingSlice);
  auto other = sl;
  other[0].parent_id = "other";
  EXPECT_EQ(code_of([&] { merge_slices(other, meta_of(v)); }), Errc::MixedParents);
}

TEST(VolumeIo, CenterCrop) {
  Slice2D s = slice_axial(ramp({1, 4, 4}, {1, 1, 1}))[0];
  const auto c = center_crop_resize(s, {2, 2}, {2, 2});
  EXPECT_EQ(c.crop_box, (CropBox{1, 1, 2, 2}));
  EXPECT_EQ(c.data, (std::vector<float>{5, 6, 9, 10}));

  // Odd margins round down: a 5-wide slice cropped to 2 starts at column 1.
  Slice2D w = slice_axial(ramp({1, 1, 5}, {1, 1, 1}))[0];
  EXPECT_EQ(center_crop_resize(w, {1, 2}, {1, 2}).data, (std::vector<float>{1, 2}));

  EXPECT_EQ(code_of([&] { center_crop_resize(s, {5, 2}, {2, 2}); }), Errc::CropTooLarge);

  // Crop, resize up, merge back: the cropped window survives exactly and
  // everything outside it is zero.
  Volume v = ramp({1, 6, 6}, {1, 1, 1});
  auto up = center_crop_resize(slice_axial(v)[0], {4, 4}, {8, 8}, Interp::Nearest);
  const auto back = merge_slices({up}, meta_of(v), Interp::Nearest);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) {
      const bool inside = y >= 1 && y < 5 && x >= 1 && x < 5;
      EXPECT_EQ(back.at(0, y, x), inside ? v.at(0, y, x) : 0.0f) << y << "," << x;
    }
}

TEST(VolumeIo, ResizeCheckerboardBilinear) {
  // 2x2 checkerboard upsampled to 4x4; each output is the bilinear blend at
  // (o + 0.5) / 2 - 0.5 clamped to [0, 1].
  const std::vector<float> img{0, 1, 1, 0};
  const auto out = resize_image(img, 2, 2, 4, 4, Interp::Linear);
  auto coord = [](int o) { return std::clamp((o + 0.5) / 2 - 0.5, 0.0, 1.0); };
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      const double ty = coord(y), tx = coord(x);
      const double expect = (1 - ty) * tx + ty * (1 - tx);
      EXPECT_NEAR(out[static_cast<std::size_t>(y * 4 + x)], expect, 1e-6);
    }
}

TEST(VolumeIo, NormalizeIntensity) {
  Volume c({1, 2, 2}, {1, 1, 1}, "c", 7.0f);
  for (float x : normalize_intensity(c).data) EXPECT_EQ(x, 0.0f);

  Volume r({1, 1, 101}, {1, 1, 1}, "r");
  for (int i = 0; i <= 100; ++i) r.data[i] = static_cast<float>(i);
  EXPECT_DOUBLE_EQ(percentile(r.data, 37.5), 37.5);
  const auto full = normalize_intensity(r, 0, 100);
  EXPECT_FLOAT_EQ(full.data[0], -1.0f);
  EXPECT_FLOAT_EQ(full.data[50], 0.0f);
  EXPECT_FLOAT_EQ(full.data[100], 1.0f);
  const auto clip = normalize_intensity(r, 10, 90);
  EXPECT_FLOAT_EQ(clip.data[5], -1.0f);
  EXPECT_FLOAT_EQ(clip.data[50], 0.0f);
  EXPECT_FLOAT_EQ(clip.data[95], 1.0f);

  Rng rng(3);
  const auto v = oracle::random_volume(rng, {2, 5, 5}, {1, 1, 1}, "v");
  const auto n = normalize_intensity(v);
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    EXPECT_GE(n.data[i], -1.0f);
    EXPECT_LE(n.data[i], 1.0f);
    for (std::size_t j = 0; j < v.data.size(); ++j)
      if (v.data[i] < v.data[j]) EXPECT_LE(n.data[i], n.data[j]);
  }
  EXPECT_THROW(normalize_intensity(v, 50, 10), Error);
}

TEST(VolumeIo, NiftiAxisAlignedAndFlipped) {
  TempDir tmp;
  std::vector<float> vals(12);
  for (int i = 0; i < 12; ++i) vals[i] = static_cast<float>(i);
  {
    std::ofstream os(tmp.path / "a.nii", std::ios::binary);
    os << nifti_bytes({3, 2, 2}, {1, 2, 3}, vals);
  }
  const auto a = load_nifti(tmp.path / "a.nii").volume;
  EXPECT_EQ(a.shape, (Index3{2, 2, 3}));
  EXPECT_EQ(a.spacing, (Spacing3{3, 2, 1}));
  for (int k = 0; k < 2; ++k)
    for (int j = 0; j < 2; ++j)
      for (int i = 0; i < 3; ++i) EXPECT_EQ(a.at(k, j, i), vals[(k * 2 + j) * 3 + i]);

  // sform with a negative x axis: columns are mirrored. Written gzipped.
  const float srow[12] = {-1, 0, 0, 0, 0, 2, 0, 0, 0, 0, 3, 0};
  const std::string b = nifti_bytes({3, 2, 2}, {1, 2, 3}, vals, srow);
  gzFile gz = gzopen((tmp.path / "b.nii.gz").string().c_str(), "wb");
  gzwrite(gz, b.data(), static_cast<unsigned>(b.size()));
  gzclose(gz);
  const auto f = load_nifti(tmp.path / "b.nii.gz").volume;
  for (int k = 0; k < 2; ++k)
    for (int j = 0; j < 2; ++j)
      for (int i = 0; i < 3; ++i) EXPECT_EQ(f.at(k, j, 2 - i), vals[(k * 2 + j) * 3 + i]);

  {
    std::ofstream os(tmp.path / "short.nii", std::ios::binary);
    os << nifti_bytes({3, 2, 2}, {1, 2, 3}, vals).substr(0, 360);
  }
  EXPECT_EQ(code_of([&] { load_nifti(tmp.path / "short.nii"); }), Errc::CorruptHeader);
  EXPECT_EQ(code_of([&] { load_nifti(tmp.path / "none.nii"); }), Errc::MissingFile);
}
