#pragma once

// NIfTI-1 import (plain .nii or gzip-compressed .nii.gz) into a Volume.
//
// The voxel-to-world matrix is taken from the sform when sform_code > 0,
// else from the qform when qform_code > 0, else from pixdim alone. Each voxel
// axis is assigned to the world axis it is most aligned with and flipped if
// it runs against that axis, so the resulting (z, y, x) array is ordered
// (inferior->superior, posterior->anterior, left->right) in RAS terms.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <zlib.h>

#include "xmoda/error.hpp"
#include "xmoda/volume_io.hpp"

namespace xmoda {

struct NiftiImport {
  Volume volume;
  /// Human-readable record of the permutation/flips, e.g. "i->x+ j->y- k->z+".
  std::string reorientation;
};

namespace detail {

inline std::string read_maybe_gz(const fs::path& path) {
  if (!fs::exists(path)) throw Error(Errc::MissingFile, path.string());
  gzFile f = gzopen(path.string().c_str(), "rb");  // transparently reads plain files too
  if (!f) throw Error(Errc::IoFailure, "cannot open " + path.string());
  std::string out;
  std::array<char, 1 << 16> buf{};
  int n = 0;
  while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) out.append(buf.data(), n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw Error(Errc::CorruptHeader, "gzip stream error in " + path.string());
  return out;
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, bool swap) : b_(bytes), swap_(swap) {}

  template <class T>
  T get(std::size_t offset) const {
    if (offset + sizeof(T) > b_.size()) throw Error(Errc::CorruptHeader, "truncated NIfTI file");
    std::array<char, sizeof(T)> raw{};
    std::memcpy(raw.data(), b_.data() + offset, sizeof(T));
    if (swap_) std::reverse(raw.begin(), raw.end());
    T v;
    std::memcpy(&v, raw.data(), sizeof(T));
    return v;
  }

 private:
  const std::string& b_;
  bool swap_;
};

}  // namespace detail

inline NiftiImport load_nifti(const fs::path& path) {
  const std::string bytes = detail::read_maybe_gz(path);
  if (bytes.size() < 348) throw Error(Errc::CorruptHeader, "file shorter than a NIfTI-1 header");

  std::int32_t sizeof_hdr = 0;
  std::memcpy(&sizeof_hdr, bytes.data(), 4);
  bool swap = false;
  if (sizeof_hdr != 348) {
    std::array<char, 4> r{};
    std::memcpy(r.data(), bytes.data(), 4);
    std::reverse(r.begin(), r.end());
    std::memcpy(&sizeof_hdr, r.data(), 4);
    if (sizeof_hdr != 348) throw Error(Errc::CorruptHeader, "not a NIfTI-1 header");
    swap = true;
  }
  const detail::ByteReader rd(bytes, swap);
  const std::string magic(bytes.data() + 344, 3);
  if (magic != "n+1" && magic != "ni1") throw Error(Errc::CorruptHeader, "bad NIfTI magic");
  if (magic == "ni1") throw Error(Errc::CorruptHeader, "two-file NIfTI (.hdr/.img) is not supported");

  std::array<int, 3> n{};
  const int ndim = rd.get<std::int16_t>(40);
  if (ndim < 1 || ndim > 7) throw Error(Errc::CorruptHeader, "dim[0] out of range");
  for (int a = 0; a < 3; ++a) n[a] = a < ndim ? rd.get<std::int16_t>(42 + 2 * a) : 1;
  for (int a = 3; a < ndim; ++a)
    if (rd.get<std::int16_t>(42 + 2 * a) > 1) throw Error(Errc::CorruptHeader, "only 3-D NIfTI volumes are supported");
  for (int a = 0; a < 3; ++a)
    if (n[a] < 1) throw Error(Errc::CorruptHeader, "non-positive dimension");

  const int datatype = rd.get<std::int16_t>(70);
  std::array<double, 4> pixdim{};
  for (int a = 0; a < 4; ++a) pixdim[a] = rd.get<float>(76 + 4 * a);
  const auto vox_offset = static_cast<std::size_t>(rd.get<float>(108));
  double slope = rd.get<float>(112);
  const double inter = rd.get<float>(116);
  if (slope == 0.0 || !std::isfinite(slope)) slope = 1.0;

  // Columns of the 3x3 voxel->world matrix.
  std::array<std::array<double, 3>, 3> col{};
  const int qform_code = rd.get<std::int16_t>(252);
  const int sform_code = rd.get<std::int16_t>(254);
  if (sform_code > 0) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) col[c][r] = rd.get<float>(280 + 16 * r + 4 * c);
  } else if (qform_code > 0) {
    const double b = rd.get<float>(256), c = rd.get<float>(260), d = rd.get<float>(264);
    const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
    const double qfac = pixdim[0] < 0 ? -1.0 : 1.0;
    const double R[3][3] = {{a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)},
                            {2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)},
                            {2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b}};
    for (int r = 0; r < 3; ++r) {
      col[0][r] = R[r][0] * pixdim[1];
      col[1][r] = R[r][1] * pixdim[2];
      col[2][r] = R[r][2] * pixdim[3] * qfac;
    }
  } else {
    for (int a = 0; a < 3; ++a) col[a][a] = std::abs(pixdim[a + 1]) > 0 ? std::abs(pixdim[a + 1]) : 1.0;
  }

  // Assign each voxel axis (i, j, k) to a world axis (x, y, z) and a sign.
  std::array<int, 3> world_of{0, 1, 2};
  std::array<int, 3> sign{1, 1, 1};
  std::array<double, 3> spacing_of{};
  {
    std::array<bool, 3> taken{};
    bool ok = true;
    for (int ax = 0; ax < 3; ++ax) {
      int best = 0;
      for (int w = 1; w < 3; ++w)
        if (std::abs(col[ax][w]) > std::abs(col[ax][best])) best = w;
      if (taken[best]) ok = false;
      taken[best] = true;
      world_of[ax] = best;
      sign[ax] = col[ax][best] < 0 ? -1 : 1;
      spacing_of[ax] = std::sqrt(col[ax][0] * col[ax][0] + col[ax][1] * col[ax][1] + col[ax][2] * col[ax][2]);
      if (!(spacing_of[ax] > 0)) spacing_of[ax] = 1.0;
    }
    if (!ok) {
      world_of = {0, 1, 2};
      sign = {1, 1, 1};
    }
  }

  std::size_t elem = 0;
  switch (datatype) {
    case 2: case 256: elem = 1; break;
    case 4: case 512: elem = 2; break;
    case 8: case 16: case 768: elem = 4; break;
    case 64: elem = 8; break;
    default: throw Error(Errc::CorruptHeader, "unsupported NIfTI datatype " + std::to_string(datatype));
  }
  const std::size_t count = static_cast<std::size_t>(n[0]) * n[1] * n[2];
  const std::size_t offset = std::max<std::size_t>(vox_offset, 348);
  if (bytes.size() < offset + count * elem) throw Error(Errc::CorruptHeader, "NIfTI payload shorter than header declares");

  auto value_at = [&](std::size_t idx) -> double {
    const std::size_t off = offset + idx * elem;
    switch (datatype) {
      case 2: return static_cast<std::uint8_t>(bytes[off]);
      case 256: return static_cast<std::int8_t>(bytes[off]);
      case 4: return rd.get<std::int16_t>(off);
      case 512: return rd.get<std::uint16_t>(off);
      case 8: return rd.get<std::int32_t>(off);
      case 768: return rd.get<std::uint32_t>(off);
      case 16: return rd.get<float>(off);
      default: return rd.get<double>(off);
    }
  };

  // Output axis for world axis w: z (superior) -> 0, y (anterior) -> 1, x (right) -> 2.
  Index3 out_shape{};
  Spacing3 out_spacing{};
  for (int ax = 0; ax < 3; ++ax) {
    out_shape[2 - world_of[ax]] = n[ax];
    out_spacing[2 - world_of[ax]] = spacing_of[ax];
  }
  NiftiImport result;
  result.volume = Volume(out_shape, out_spacing, fs::path(path).filename().string());
  for (int k = 0; k < n[2]; ++k)
    for (int j = 0; j < n[1]; ++j)
      for (int i = 0; i < n[0]; ++i) {
        const std::array<int, 3> vox{i, j, k};
        Index3 o{};
        for (int ax = 0; ax < 3; ++ax) {
          const int p = sign[ax] > 0 ? vox[ax] : n[ax] - 1 - vox[ax];
          o[2 - world_of[ax]] = p;
        }
        const std::size_t src = (static_cast<std::size_t>(k) * n[1] + j) * n[0] + i;
        const double v = value_at(src) * slope + inter;
        if (!std::isfinite(v)) throw Error(Errc::NonFiniteData, path.string());
        result.volume.at(o[0], o[1], o[2]) = static_cast<float>(v);
      }

  static constexpr char kAxisName[3] = {'x', 'y', 'z'};
  static constexpr char kVoxName[3] = {'i', 'j', 'k'};
  for (int ax = 0; ax < 3; ++ax) {
    if (ax) result.reorientation += ' ';
    result.reorientation += kVoxName[ax];
    result.reorientation += "->";
    result.reorientation += kAxisName[world_of[ax]];
    result.reorientation += sign[ax] > 0 ? '+' : '-';
  }
  return result;
}

}  // namespace xmoda
