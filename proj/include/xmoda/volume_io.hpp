#pragma once

// Volume containers, the VVOL file format, and the slice-level preprocessing
// chain: resample -> normalize -> slice -> crop/resize -> (translate) -> merge.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "xmoda/error.hpp"

namespace xmoda {

namespace fs = std::filesystem;

using Index3 = std::array<int, 3>;       // (z, y, x)
using Spacing3 = std::array<double, 3>;  // mm, (z, y, x)

enum class Interp { Linear, Nearest };

inline std::int64_t voxel_count(const Index3& s) {
  return std::int64_t{s[0]} * s[1] * s[2];
}

struct Volume {
  Index3 shape{1, 1, 1};
  Spacing3 spacing{1.0, 1.0, 1.0};
  std::vector<float> data;
  std::string origin_id;

  Volume() : data(1, 0.0f) {}
  Volume(Index3 s, Spacing3 sp, std::string id, float fill = 0.0f)
      : shape(s), spacing(sp), data(static_cast<std::size_t>(voxel_count(s)), fill), origin_id(std::move(id)) {}

  std::int64_t index(int z, int y, int x) const {
    return (std::int64_t{z} * shape[1] + y) * shape[2] + x;
  }
  float& at(int z, int y, int x) { return data[static_cast<std::size_t>(index(z, y, x))]; }
  float at(int z, int y, int x) const { return data[static_cast<std::size_t>(index(z, y, x))]; }
  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }

  friend bool operator==(const Volume&, const Volume&) = default;
};

struct LabelMask {
  Index3 shape{1, 1, 1};
  Spacing3 spacing{1.0, 1.0, 1.0};
  std::vector<std::uint8_t> data;

  LabelMask() : data(1, 0) {}
  LabelMask(Index3 s, Spacing3 sp)
      : shape(s), spacing(sp), data(static_cast<std::size_t>(voxel_count(s)), 0) {}

  std::int64_t index(int z, int y, int x) const {
    return (std::int64_t{z} * shape[1] + y) * shape[2] + x;
  }
  std::uint8_t& at(int z, int y, int x) { return data[static_cast<std::size_t>(index(z, y, x))]; }
  std::uint8_t at(int z, int y, int x) const { return data[static_cast<std::size_t>(index(z, y, x))]; }

  friend bool operator==(const LabelMask&, const LabelMask&) = default;
};

struct VolumeMeta {
  Index3 shape{1, 1, 1};
  Spacing3 spacing{1.0, 1.0, 1.0};
  std::string origin_id;
};

inline VolumeMeta meta_of(const Volume& v) { return {v.shape, v.spacing, v.origin_id}; }

struct CropBox {
  int y0 = 0;
  int x0 = 0;
  int h = 0;
  int w = 0;
  friend bool operator==(const CropBox&, const CropBox&) = default;
};

struct Slice2D {
  int height = 0;
  int width = 0;
  std::vector<float> data;
  int z_index = 0;
  std::string parent_id;
  Index3 parent_shape{1, 1, 1};
  CropBox crop_box;

  float at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  float& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }

  friend bool operator==(const Slice2D&, const Slice2D&) = default;
};

inline void validate(const Volume& v) {
  for (int a = 0; a < 3; ++a) {
    if (v.shape[a] < 1) throw Error(Errc::InvalidArgument, "volume dimensions must be >= 1");
    if (!(v.spacing[a] > 0.0) || !std::isfinite(v.spacing[a]))
      throw Error(Errc::InvalidSpacing, "volume spacing must be positive");
  }
  if (v.size() != voxel_count(v.shape)) throw Error(Errc::ShapeMismatch, "volume payload size");
  for (float f : v.data)
    if (!std::isfinite(f)) throw Error(Errc::NonFiniteData, "volume " + v.origin_id + " holds a non-finite value");
}

inline void validate(const LabelMask& m) {
  if (static_cast<std::int64_t>(m.data.size()) != voxel_count(m.shape))
    throw Error(Errc::ShapeMismatch, "mask payload size");
  for (auto l : m.data)
    if (l > 2) throw Error(Errc::InvalidArgument, "mask label outside {0,1,2}");
}

// ---------------------------------------------------------------------------
// VVOL: JSON sidecar header + raw little-endian payload.

namespace detail {

template <class T>
void write_le(std::ofstream& os, const std::vector<T>& values) {
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(T)));
  } else {
    for (T v : values) {
      auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
      std::reverse(bytes.begin(), bytes.end());
      os.write(bytes.data(), sizeof(T));
    }
  }
}

template <class T>
std::vector<T> read_le(const std::string& bytes) {
  std::vector<T> out(bytes.size() / sizeof(T));
  std::memcpy(out.data(), bytes.data(), out.size() * sizeof(T));
  if constexpr (std::endian::native != std::endian::little && sizeof(T) > 1) {
    for (T& v : out) {
      auto b = std::bit_cast<std::array<char, sizeof(T)>>(v);
      std::reverse(b.begin(), b.end());
      v = std::bit_cast<T>(b);
    }
  }
  return out;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw Error(Errc::MissingFile, p.string());
  return std::string(std::istreambuf_iterator<char>(is), {});
}

inline fs::path payload_path(const fs::path& header) {
  fs::path p = header;
  p.replace_extension(".raw");
  return p;
}

inline void write_header(const fs::path& header, const Index3& shape, const Spacing3& spacing,
                         const std::string& dtype, const std::string& origin_id) {
  nlohmann::ordered_json h;
  h["format"] = "VVOL";
  h["version"] = 1;
  h["shape"] = shape;
  h["spacing"] = spacing;
  h["dtype"] = dtype;
  h["byte_order"] = "little";
  h["origin_id"] = origin_id;
  h["payload"] = payload_path(header).filename().string();
  if (header.has_parent_path()) fs::create_directories(header.parent_path());
  std::ofstream os(header, std::ios::binary);
  if (!os) throw Error(Errc::IoFailure, "cannot write " + header.string());
  os << h.dump(2) << '\n';
}

struct Header {
  Index3 shape{};
  Spacing3 spacing{};
  std::string dtype;
  std::string origin_id;
  fs::path payload;
};

inline Header read_header(const fs::path& header) {
  if (!fs::exists(header)) throw Error(Errc::MissingFile, header.string());
  Header out;
  try {
    const auto h = nlohmann::json::parse(read_file(header));
    if (h.at("format").get<std::string>() != "VVOL") throw Error(Errc::CorruptHeader, "not a VVOL header");
    if (h.at("byte_order").get<std::string>() != "little")
      throw Error(Errc::CorruptHeader, "unsupported byte order");
    out.shape = h.at("shape").get<Index3>();
    out.spacing = h.at("spacing").get<Spacing3>();
    out.dtype = h.at("dtype").get<std::string>();
    out.origin_id = h.value("origin_id", std::string{});
    out.payload = header.parent_path() / h.at("payload").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::CorruptHeader, header.string() + ": " + e.what());
  }
  for (int a = 0; a < 3; ++a) {
    if (out.shape[a] < 1) throw Error(Errc::CorruptHeader, "non-positive dimension");
    if (!(out.spacing[a] > 0.0)) throw Error(Errc::InvalidSpacing, "non-positive spacing in header");
  }
  return out;
}

}  // namespace detail

inline void save_volume(const Volume& v, const fs::path& header) {
  validate(v);
  detail::write_header(header, v.shape, v.spacing, "f32", v.origin_id);
  std::ofstream os(detail::payload_path(header), std::ios::binary);
  if (!os) throw Error(Errc::IoFailure, "cannot write payload for " + header.string());
  detail::write_le(os, v.data);
  if (!os) throw Error(Errc::IoFailure, "short write for " + header.string());
}

inline Volume load_volume(const fs::path& header) {
  const auto h = detail::read_header(header);
  if (h.dtype != "f32") throw Error(Errc::CorruptHeader, "expected dtype f32, got " + h.dtype);
  const std::string bytes = detail::read_file(h.payload);
  const auto n = voxel_count(h.shape);
  if (static_cast<std::int64_t>(bytes.size()) != n * 4)
    throw Error(Errc::CorruptHeader, "header declares " + std::to_string(n) + " scalars, payload holds " +
                                         std::to_string(bytes.size() / 4.0));
  Volume v;
  v.shape = h.shape;
  v.spacing = h.spacing;
  v.origin_id = h.origin_id;
  v.data = detail::read_le<float>(bytes);
  for (float f : v.data)
    if (!std::isfinite(f)) throw Error(Errc::NonFiniteData, header.string());
  return v;
}

inline void save_mask(const LabelMask& m, const fs::path& header, const std::string& origin_id = {}) {
  validate(m);
  detail::write_header(header, m.shape, m.spacing, "u8", origin_id);
  std::ofstream os(detail::payload_path(header), std::ios::binary);
  if (!os) throw Error(Errc::IoFailure, "cannot write payload for " + header.string());
  detail::write_le(os, m.data);
}

inline LabelMask load_mask(const fs::path& header) {
  const auto h = detail::read_header(header);
  if (h.dtype != "u8") throw Error(Errc::CorruptHeader, "expected dtype u8, got " + h.dtype);
  const std::string bytes = detail::read_file(h.payload);
  if (static_cast<std::int64_t>(bytes.size()) != voxel_count(h.shape))
    throw Error(Errc::CorruptHeader, "mask payload size mismatch in " + header.string());
  LabelMask m;
  m.shape = h.shape;
  m.spacing = h.spacing;
  m.data.assign(bytes.begin(), bytes.end());
  for (auto l : m.data)
    if (l > 2) throw Error(Errc::CorruptHeader, "label outside {0,1,2} in " + header.string());
  return m;
}

// ---------------------------------------------------------------------------
// Resampling. Voxel o of an axis with n_out samples maps to the input
// coordinate c = (o + 0.5) * ratio - 0.5 (voxel centers, extents aligned),
// clamped to [0, n_in - 1].

namespace detail {

inline double source_coord(int o, double ratio, int n_in) {
  const double c = (o + 0.5) * ratio - 0.5;
  return std::clamp(c, 0.0, static_cast<double>(n_in - 1));
}

template <class T>
std::vector<T> resample_axis(const std::vector<T>& in, const Index3& shape, int axis, int n_out, double ratio,
                             Interp mode) {
  Index3 out_shape = shape;
  out_shape[axis] = n_out;
  std::vector<T> out(static_cast<std::size_t>(voxel_count(out_shape)));
  const int n_in = shape[axis];
  const std::int64_t stride_in = axis == 0 ? std::int64_t{shape[1]} * shape[2] : (axis == 1 ? shape[2] : 1);
  const std::int64_t stride_out =
      axis == 0 ? std::int64_t{out_shape[1]} * out_shape[2] : (axis == 1 ? out_shape[2] : 1);

  struct Tap {
    int i0, i1;
    double t;
  };
  std::vector<Tap> taps(static_cast<std::size_t>(n_out));
  for (int o = 0; o < n_out; ++o) {
    const double c = source_coord(o, ratio, n_in);
    if (mode == Interp::Nearest) {
      const int i = std::min(static_cast<int>(std::floor(c + 0.5)), n_in - 1);
      taps[o] = {i, i, 0.0};
    } else {
      const int i0 = static_cast<int>(std::floor(c));
      taps[o] = {i0, std::min(i0 + 1, n_in - 1), c - i0};
    }
  }

  // Iterate over all lines parallel to `axis`.
  const int a1 = axis == 0 ? 1 : 0;
  const int a2 = axis == 2 ? 1 : 2;
  auto stride_of = [](const Index3& s, int ax) -> std::int64_t {
    return ax == 0 ? std::int64_t{s[1]} * s[2] : (ax == 1 ? s[2] : 1);
  };
  for (int p = 0; p < shape[a1]; ++p) {
    for (int q = 0; q < shape[a2]; ++q) {
      const std::int64_t base_in = p * stride_of(shape, a1) + q * stride_of(shape, a2);
      const std::int64_t base_out = p * stride_of(out_shape, a1) + q * stride_of(out_shape, a2);
      for (int o = 0; o < n_out; ++o) {
        const Tap& tp = taps[o];
        const T a = in[static_cast<std::size_t>(base_in + tp.i0 * stride_in)];
        T v;
        if (mode == Interp::Nearest || tp.t == 0.0) {
          v = a;
        } else {
          const T b = in[static_cast<std::size_t>(base_in + tp.i1 * stride_in)];
          v = static_cast<T>((1.0 - tp.t) * static_cast<double>(a) + tp.t * static_cast<double>(b));
        }
        out[static_cast<std::size_t>(base_out + o * stride_out)] = v;
      }
    }
  }
  return out;
}

template <class T>
std::vector<T> resample_grid(std::vector<T> data, Index3 shape, const Index3& out_shape,
                             const std::array<double, 3>& ratio, Interp mode) {
  for (int axis = 0; axis < 3; ++axis) {
    if (out_shape[axis] == shape[axis] && ratio[axis] == 1.0) continue;
    data = resample_axis(data, shape, axis, out_shape[axis], ratio[axis], mode);
    shape[axis] = out_shape[axis];
  }
  return data;
}

inline int round_half_away(double v) { return static_cast<int>(std::round(v)); }

inline Index3 resampled_shape(const Index3& shape, const Spacing3& from, const Spacing3& to) {
  Index3 out{};
  for (int a = 0; a < 3; ++a) out[a] = std::max(1, round_half_away(shape[a] * from[a] / to[a]));
  return out;
}

inline void check_spacing(const Spacing3& s) {
  for (double v : s)
    if (!(v > 0.0) || !std::isfinite(v)) throw Error(Errc::InvalidSpacing, "target spacing must be positive");
}

}  // namespace detail

/// Output shape is round(in_shape * in_spacing / target_spacing), at least 1.
/// Coordinates scale by target/input spacing so the physical extent stays
/// centered on the same region.
inline Volume resample(const Volume& vol, const Spacing3& target_spacing, Interp mode = Interp::Linear) {
  detail::check_spacing(target_spacing);
  const Index3 out_shape = detail::resampled_shape(vol.shape, vol.spacing, target_spacing);
  std::array<double, 3> ratio{};
  for (int a = 0; a < 3; ++a)
    ratio[a] = vol.spacing[a] == target_spacing[a] ? 1.0 : target_spacing[a] / vol.spacing[a];
  Volume out;
  out.shape = out_shape;
  out.spacing = target_spacing;
  out.origin_id = vol.origin_id;
  out.data = detail::resample_grid(vol.data, vol.shape, out_shape, ratio, mode);
  return out;
}

/// Masks are always resampled with nearest-neighbour lookup.
inline LabelMask resample(const LabelMask& mask, const Spacing3& target_spacing) {
  detail::check_spacing(target_spacing);
  const Index3 out_shape = detail::resampled_shape(mask.shape, mask.spacing, target_spacing);
  std::array<double, 3> ratio{};
  for (int a = 0; a < 3; ++a)
    ratio[a] = mask.spacing[a] == target_spacing[a] ? 1.0 : target_spacing[a] / mask.spacing[a];
  LabelMask out;
  out.shape = out_shape;
  out.spacing = target_spacing;
  out.data = detail::resample_grid(mask.data, mask.shape, out_shape, ratio, Interp::Nearest);
  return out;
}

inline std::vector<Slice2D> slice_axial(const Volume& vol) {
  std::vector<Slice2D> out;
  out.reserve(static_cast<std::size_t>(vol.shape[0]));
  const std::size_t plane = static_cast<std::size_t>(vol.shape[1]) * vol.shape[2];
  for (int z = 0; z < vol.shape[0]; ++z) {
    Slice2D s;
    s.height = vol.shape[1];
    s.width = vol.shape[2];
    s.data.assign(vol.data.begin() + static_cast<std::ptrdiff_t>(z * plane),
                  vol.data.begin() + static_cast<std::ptrdiff_t>((z + 1) * plane));
    s.z_index = z;
    s.parent_id = vol.origin_id;
    s.parent_shape = vol.shape;
    s.crop_box = {0, 0, vol.shape[1], vol.shape[2]};
    out.push_back(std::move(s));
  }
  return out;
}

/// Resize a (h, w) image to (out_h, out_w) with the voxel-center convention
/// used by `resample`.
inline std::vector<float> resize_image(const std::vector<float>& img, int h, int w, int out_h, int out_w,
                                       Interp mode) {
  if (h == out_h && w == out_w) return img;
  const Index3 in_shape{1, h, w};
  const Index3 out_shape{1, out_h, out_w};
  return detail::resample_grid(img, in_shape, out_shape,
                               {1.0, static_cast<double>(h) / out_h, static_cast<double>(w) / out_w}, mode);
}

/// Crops the centered (crop_h, crop_w) window, offset floor((dim - crop) / 2),
/// then resizes it to (out_h, out_w). The crop box is stored relative to the
/// parent slice so merge_slices can paste the result back.
inline Slice2D center_crop_resize(const Slice2D& s, std::array<int, 2> crop_hw, std::array<int, 2> out_hw,
                                  Interp mode = Interp::Linear) {
  const auto [ch, cw] = crop_hw;
  if (ch < 1 || cw < 1 || ch > s.height || cw > s.width)
    throw Error(Errc::CropTooLarge, "crop " + std::to_string(ch) + "x" + std::to_string(cw) + " exceeds slice " +
                                        std::to_string(s.height) + "x" + std::to_string(s.width));
  if (out_hw[0] < 1 || out_hw[1] < 1) throw Error(Errc::InvalidArgument, "output size must be >= 1");
  const int y0 = (s.height - ch) / 2;
  const int x0 = (s.width - cw) / 2;
  std::vector<float> crop(static_cast<std::size_t>(ch) * cw);
  for (int y = 0; y < ch; ++y)
    for (int x = 0; x < cw; ++x) crop[static_cast<std::size_t>(y) * cw + x] = s.at(y0 + y, x0 + x);

  Slice2D out = s;
  out.height = out_hw[0];
  out.width = out_hw[1];
  out.data = resize_image(crop, ch, cw, out_hw[0], out_hw[1], mode);
  out.crop_box = {s.crop_box.y0 + y0, s.crop_box.x0 + x0, ch, cw};
  return out;
}

/// Linear-interpolated percentile (the "linear" method of common numeric
/// libraries) of an unsorted sample.
inline double percentile(std::vector<float> values, double pct) {
  std::sort(values.begin(), values.end());
  const double pos = pct / 100.0 * static_cast<double>(values.size() - 1);
  const auto i0 = static_cast<std::size_t>(std::floor(pos));
  const std::size_t i1 = std::min(i0 + 1, values.size() - 1);
  const double t = pos - static_cast<double>(i0);
  return (1.0 - t) * values[i0] + t * values[i1];
}

/// Clip to the [lo_pct, hi_pct] percentile range and map affinely onto
/// [-1, 1]. A degenerate range maps everything to 0.
inline Volume normalize_intensity(const Volume& vol, double lo_pct = 0.5, double hi_pct = 99.5) {
  if (!(lo_pct >= 0.0 && lo_pct < hi_pct && hi_pct <= 100.0))
    throw Error(Errc::InvalidArgument, "percentiles must satisfy 0 <= lo < hi <= 100");
  Volume out = vol;
  const double lo = percentile(vol.data, lo_pct);
  const double hi = percentile(vol.data, hi_pct);
  if (!(hi > lo)) {
    std::fill(out.data.begin(), out.data.end(), 0.0f);
    return out;
  }
  const double scale = 2.0 / (hi - lo);
  for (float& v : out.data) {
    const double c = std::clamp(static_cast<double>(v), lo, hi);
    v = static_cast<float>(std::clamp((c - lo) * scale - 1.0, -1.0, 1.0));
  }
  return out;
}

/// Undo center_crop_resize for every slice and stack the planes by z_index.
/// Voxels outside a slice's crop box are filled with 0.
inline Volume merge_slices(const std::vector<Slice2D>& slices, const VolumeMeta& target,
                           Interp mode = Interp::Linear) {
  const int depth = target.shape[0];
  std::vector<const Slice2D*> by_z(static_cast<std::size_t>(depth), nullptr);
  for (const auto& s : slices) {
    if (s.parent_id != target.origin_id)
      throw Error(Errc::MixedParents, "slice from '" + s.parent_id + "' merged into '" + target.origin_id + "'");
    if (s.z_index < 0 || s.z_index >= depth)
      throw Error(Errc::InvalidArgument, "z_index " + std::to_string(s.z_index) + " outside target depth");
    if (by_z[s.z_index]) throw Error(Errc::DuplicateSlice, "z_index " + std::to_string(s.z_index));
    by_z[s.z_index] = &s;
  }
  for (int z = 0; z < depth; ++z)
    if (!by_z[z]) throw Error(Errc::MissingSlice, "z_index " + std::to_string(z));

  Volume out(target.shape, target.spacing, target.origin_id, 0.0f);
  for (int z = 0; z < depth; ++z) {
    const Slice2D& s = *by_z[z];
    const CropBox& cb = s.crop_box;
    if (cb.y0 < 0 || cb.x0 < 0 || cb.y0 + cb.h > target.shape[1] || cb.x0 + cb.w > target.shape[2])
      throw Error(Errc::ShapeMismatch, "crop box outside target plane");
    const auto plane = resize_image(s.data, s.height, s.width, cb.h, cb.w, mode);
    for (int y = 0; y < cb.h; ++y)
      for (int x = 0; x < cb.w; ++x) out.at(z, cb.y0 + y, cb.x0 + x) = plane[static_cast<std::size_t>(y) * cb.w + x];
  }
  return out;
}

}  // namespace xmoda
