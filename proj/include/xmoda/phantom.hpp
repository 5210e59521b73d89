#pragma once

// Synthetic two-domain phantoms with ground-truth masks.
//
// Each case has one geometry (a lobed ellipsoidal VS and two spiral-textured
// cochleas placed bilaterally) rendered twice:
//   domain S: bright VS, smooth background, faint noise
//   domain T: dark VS, textured background, multiplicative bias field
// Both renders are normalized to [-1, 1] with normalize_intensity.
//
// Randomness: every case draws from Rng(derive_seed(seed, case_index)) for
// geometry and from independent sub-streams for each domain's appearance, so
// the geometry never depends on the appearance draws.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"

#include "xmoda/error.hpp"
#include "xmoda/rng.hpp"
#include "xmoda/volume_io.hpp"

namespace xmoda {

struct PhantomParams {
  Index3 volume_shape{16, 48, 48};
  Spacing3 spacing{1.5, 1.0, 1.0};
  std::array<double, 2> vs_radius_range{5.0, 8.0};
  std::array<double, 2> cochlea_radius_range{2.5, 3.5};
  std::array<double, 2> vs_intensity{0.8, -0.5};  // (domain S, domain T)
  double texture_noise_sd = 0.08;
  double bias_field_strength = 0.15;
  std::uint64_t seed = 7;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PhantomParams, volume_shape, spacing, vs_radius_range,
                                                cochlea_radius_range, vs_intensity, texture_noise_sd,
                                                bias_field_strength, seed)

struct PhantomCase {
  Volume source;  // domain S
  Volume target;  // domain T
  LabelMask mask;
};

struct PhantomGeometry {
  std::array<double, 3> vs_center{};  // mm, (z, y, x)
  std::array<double, 3> vs_radii{};
  double lobe_amplitude = 0.0;
  int lobe_order = 3;
  std::array<double, 2> lobe_phase{};
  std::array<std::array<double, 3>, 2> cochlea_center{};
  std::array<double, 2> cochlea_radius{};
  std::array<double, 2> spiral_phase{};
};

namespace detail {

constexpr double kLobeMax = 0.12;
constexpr double kJitterMm = 1.0;

inline std::array<double, 3> extent(const PhantomParams& p) {
  return {p.volume_shape[0] * p.spacing[0], p.volume_shape[1] * p.spacing[1], p.volume_shape[2] * p.spacing[2]};
}

inline void check_params(const PhantomParams& p) {
  for (int a = 0; a < 3; ++a) {
    if (p.volume_shape[a] < 1) throw Error(Errc::InvalidArgument, "phantom shape must be positive");
    if (!(p.spacing[a] > 0)) throw Error(Errc::InvalidSpacing, "phantom spacing must be positive");
  }
  if (!(p.vs_radius_range[0] > 0 && p.vs_radius_range[0] <= p.vs_radius_range[1]) ||
      !(p.cochlea_radius_range[0] > 0 && p.cochlea_radius_range[0] <= p.cochlea_radius_range[1]))
    throw Error(Errc::InvalidArgument, "radius ranges must be positive and ordered");

  // Worst case: largest radii, maximal jitter toward each other / the border.
  const auto e = extent(p);
  const double vs_r = p.vs_radius_range[1] * (1.0 + kLobeMax);
  const double co_r = p.cochlea_radius_range[1];
  const double margin = std::max({p.spacing[0], p.spacing[1], p.spacing[2]});
  const double zj = 0.5 * p.spacing[0];
  const bool fits_z = e[0] / 2 - zj - vs_r >= margin * 0.5 && e[0] / 2 + zj + vs_r <= e[0] - margin * 0.5 &&
                      e[0] / 2 - zj - co_r >= 0 && e[0] / 2 + zj + co_r <= e[0];
  const bool fits_vs_y = 0.30 * e[1] - kJitterMm - vs_r >= margin * 0.5;
  const bool fits_co_y = 0.66 * e[1] + kJitterMm + co_r <= e[1] - margin * 0.5;
  const bool fits_co_x = 0.25 * e[2] - kJitterMm - co_r >= margin * 0.5;
  const bool fits_vs_x = 0.5 * e[2] + 0.08 * e[2] + kJitterMm + vs_r <= e[2] - margin * 0.5;
  const double gap_y = (0.66 - 0.30) * e[1] - 2 * kJitterMm;
  const bool separated = gap_y >= vs_r + co_r + margin;
  const bool cochleas_apart = 0.5 * e[2] - 2 * kJitterMm >= 2 * co_r + margin;
  if (!(fits_z && fits_vs_y && fits_co_y && fits_co_x && fits_vs_x && separated && cochleas_apart))
    throw Error(Errc::ShapeTooSmall, "volume shape cannot contain the configured structures");
}

inline double smooth_field(const std::array<double, 3>& p, const std::array<double, 3>& e,
                           const std::array<double, 6>& phase) {
  const double two_pi = 2.0 * std::numbers::pi;
  return std::sin(two_pi * p[2] / e[2] + phase[0]) * std::cos(two_pi * p[1] / e[1] + phase[1]) +
         0.5 * std::sin(two_pi * 0.5 * p[0] / e[0] + phase[2]) +
         0.5 * std::cos(two_pi * (p[1] + p[2]) / (e[1] + e[2]) + phase[3]);
}

}  // namespace detail

inline PhantomGeometry phantom_geometry(const PhantomParams& p, std::int64_t case_index) {
  detail::check_params(p);
  Rng rng(derive_seed(p.seed, static_cast<std::uint64_t>(case_index)));
  const auto e = detail::extent(p);
  PhantomGeometry g;
  const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
  const double zj = 0.5 * p.spacing[0];
  g.vs_center = {e[0] / 2 + rng.uniform(-zj, zj), 0.30 * e[1] + rng.uniform(-detail::kJitterMm, detail::kJitterMm),
                 0.5 * e[2] + side * 0.08 * e[2] + rng.uniform(-detail::kJitterMm, detail::kJitterMm)};
  const double r = rng.uniform(p.vs_radius_range[0], p.vs_radius_range[1]);
  g.vs_radii = {r * rng.uniform(0.85, 1.0), r * rng.uniform(0.8, 1.0), r};
  g.lobe_amplitude = rng.uniform(0.05, detail::kLobeMax);
  g.lobe_order = 2 + static_cast<int>(rng.below(2));
  g.lobe_phase = {rng.uniform(0.0, 2 * std::numbers::pi), rng.uniform(0.0, 2 * std::numbers::pi)};
  for (int c = 0; c < 2; ++c) {
    const double cx = (c == 0 ? 0.25 : 0.75) * e[2];
    g.cochlea_center[c] = {e[0] / 2 + rng.uniform(-zj, zj),
                           0.66 * e[1] + rng.uniform(-detail::kJitterMm, detail::kJitterMm),
                           cx + rng.uniform(-detail::kJitterMm, detail::kJitterMm)};
    g.cochlea_radius[c] = rng.uniform(p.cochlea_radius_range[0], p.cochlea_radius_range[1]);
    g.spiral_phase[c] = rng.uniform(0.0, 2 * std::numbers::pi);
  }
  return g;
}

/// Rasterize the label mask of a geometry (1 = VS, 2 = cochlea).
inline LabelMask rasterize(const PhantomParams& p, const PhantomGeometry& g) {
  LabelMask m(p.volume_shape, p.spacing);
  for (int z = 0; z < p.volume_shape[0]; ++z)
    for (int y = 0; y < p.volume_shape[1]; ++y)
      for (int x = 0; x < p.volume_shape[2]; ++x) {
        const std::array<double, 3> pos{(z + 0.5) * p.spacing[0], (y + 0.5) * p.spacing[1], (x + 0.5) * p.spacing[2]};
        const double dz = (pos[0] - g.vs_center[0]) / g.vs_radii[0];
        const double dy = (pos[1] - g.vs_center[1]) / g.vs_radii[1];
        const double dx = (pos[2] - g.vs_center[2]) / g.vs_radii[2];
        const double rho = std::sqrt(dz * dz + dy * dy + dx * dx);
        const double theta = std::atan2(dy, dx);
        const double phi = std::atan2(dz, std::sqrt(dy * dy + dx * dx));
        const double bound = 1.0 + g.lobe_amplitude * std::sin(g.lobe_order * theta + g.lobe_phase[0]) *
                                       std::cos(2.0 * phi + g.lobe_phase[1]);
        if (rho <= bound) {
          m.at(z, y, x) = 1;
          continue;
        }
        for (int c = 0; c < 2; ++c) {
          const auto& cc = g.cochlea_center[c];
          const double d2 = (pos[0] - cc[0]) * (pos[0] - cc[0]) + (pos[1] - cc[1]) * (pos[1] - cc[1]) +
                            (pos[2] - cc[2]) * (pos[2] - cc[2]);
          if (d2 <= g.cochlea_radius[c] * g.cochlea_radius[c]) m.at(z, y, x) = 2;
        }
      }
  return m;
}

namespace detail {

inline double spiral(const PhantomGeometry& g, const std::array<double, 3>& pos) {
  // Pick the nearer cochlea; the pattern is an Archimedean spiral in-plane.
  int c = 0;
  double best = 1e300;
  for (int i = 0; i < 2; ++i) {
    const auto& cc = g.cochlea_center[i];
    const double d2 = (pos[1] - cc[1]) * (pos[1] - cc[1]) + (pos[2] - cc[2]) * (pos[2] - cc[2]) +
                      (pos[0] - cc[0]) * (pos[0] - cc[0]);
    if (d2 < best) {
      best = d2;
      c = i;
    }
  }
  const auto& cc = g.cochlea_center[c];
  const double dy = pos[1] - cc[1], dx = pos[2] - cc[2];
  const double rho = std::sqrt(dy * dy + dx * dx) / g.cochlea_radius[c];
  return std::cos(std::atan2(dy, dx) + 2.0 * std::numbers::pi * 1.5 * rho + g.spiral_phase[c]);
}

inline Volume render(const PhantomParams& p, const PhantomGeometry& g, const LabelMask& m, bool target_domain,
                     Rng rng, const std::string& id) {
  const auto e = extent(p);
  std::array<double, 6> phase{};
  for (double& v : phase) v = rng.uniform(0.0, 2 * std::numbers::pi);
  // Bias field: linear ramp along a random in-plane direction.
  const double bias_angle = rng.uniform(0.0, 2 * std::numbers::pi);
  const double hf_period = rng.uniform(2.5, 3.5);

  Volume v(p.volume_shape, p.spacing, id);
  for (int z = 0; z < p.volume_shape[0]; ++z)
    for (int y = 0; y < p.volume_shape[1]; ++y)
      for (int x = 0; x < p.volume_shape[2]; ++x) {
        const std::array<double, 3> pos{(z + 0.5) * p.spacing[0], (y + 0.5) * p.spacing[1], (x + 0.5) * p.spacing[2]};
        const int label = m.at(z, y, x);
        const double noise = rng.normal();
        double val = 0.0;
        if (!target_domain) {
          const double bg = 0.05 * smooth_field(pos, e, phase);
          if (label == 1)
            val = p.vs_intensity[0] + bg;
          else if (label == 2)
            val = 0.35 + 0.1 * spiral(g, pos);
          else
            val = bg;
          val += 0.25 * p.texture_noise_sd * noise;
        } else {
          const double texture =
              p.texture_noise_sd * (noise + 0.75 * std::sin(2 * std::numbers::pi * (pos[1] + 0.7 * pos[2]) / hf_period));
          if (label == 1)
            val = p.vs_intensity[1] + 0.5 * texture;
          else if (label == 2)
            val = 0.9 + 0.15 * spiral(g, pos) + 0.25 * texture;
          else
            val = 0.3 + 0.05 * smooth_field(pos, e, phase) + texture;
          const double u = ((pos[2] / e[2]) * 2 - 1) * std::cos(bias_angle) + ((pos[1] / e[1]) * 2 - 1) * std::sin(bias_angle);
          val *= 1.0 + p.bias_field_strength * u;
        }
        v.at(z, y, x) = static_cast<float>(val);
      }
  return normalize_intensity(v);
}

inline std::string case_name(std::int64_t idx) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%04lld", static_cast<long long>(idx));
  return buf;
}

}  // namespace detail

inline PhantomCase generate_case(const PhantomParams& p, std::int64_t case_index) {
  const PhantomGeometry g = phantom_geometry(p, case_index);
  const std::uint64_t case_seed = derive_seed(p.seed, static_cast<std::uint64_t>(case_index));
  const std::string name = detail::case_name(case_index);
  PhantomCase out;
  out.mask = rasterize(p, g);
  out.source = detail::render(p, g, out.mask, false, Rng(derive_seed(case_seed, "domain-S")), name + "_S");
  out.target = detail::render(p, g, out.mask, true, Rng(derive_seed(case_seed, "domain-T")), name + "_T");
  return out;
}

// ---------------------------------------------------------------------------

inline constexpr const char* kRoleSourceLabeled = "source-labeled";
inline constexpr const char* kRoleTargetUnlabeled = "target-unlabeled";
inline constexpr const char* kRoleValidationPaired = "validation-paired";

struct ManifestEntry {
  std::string role;
  std::int64_t case_id = 0;
  std::string path;         // primary volume (S for labeled/validation, T for unlabeled)
  std::string target_path;  // validation only: the T-domain volume
  std::string mask_path;
  bool has_mask = false;
};

struct DatasetManifest {
  PhantomParams params;
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> with_role(const std::string& role) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
      if (e.role == role) out.push_back(e);
    return out;
  }
};

inline nlohmann::ordered_json to_json(const DatasetManifest& m) {
  nlohmann::ordered_json j;
  j["format"] = "xmoda-dataset";
  j["version"] = 1;
  j["params"] = nlohmann::json(m.params);
  j["entries"] = nlohmann::ordered_json::array();
  for (const auto& e : m.entries) {
    nlohmann::ordered_json je;
    je["role"] = e.role;
    je["case_id"] = e.case_id;
    je["path"] = e.path;
    if (!e.target_path.empty()) je["target_path"] = e.target_path;
    je["has_mask"] = e.has_mask;
    if (e.has_mask) je["mask_path"] = e.mask_path;
    j["entries"].push_back(je);
  }
  return j;
}

inline DatasetManifest dataset_manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.params = j.at("params").get<PhantomParams>();
  for (const auto& je : j.at("entries")) {
    ManifestEntry e;
    e.role = je.at("role").get<std::string>();
    e.case_id = je.at("case_id").get<std::int64_t>();
    e.path = je.at("path").get<std::string>();
    e.target_path = je.value("target_path", std::string{});
    e.has_mask = je.at("has_mask").get<bool>();
    e.mask_path = je.value("mask_path", std::string{});
    m.entries.push_back(e);
  }
  return m;
}

inline DatasetManifest read_dataset_manifest(const fs::path& path) {
  try {
    return dataset_manifest_from_json(nlohmann::json::parse(detail::read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::CorruptHeader, path.string() + ": " + e.what());
  }
}

/// Writes VVOL files and `manifest.json` under out_dir. Case indices are laid
/// out as [0, n_s) for labeled source, [n_s, n_s + n_t) for unlabeled target
/// and the remainder for validation, so the two training sets never share a
/// case.
inline DatasetManifest generate_dataset(const PhantomParams& p, int n_train_s, int n_train_t, int n_val,
                                        const fs::path& out_dir) {
  if (n_train_s < 0 || n_train_t < 0 || n_val < 0) throw Error(Errc::InvalidArgument, "counts must be >= 0");
  detail::check_params(p);
  DatasetManifest m;
  m.params = p;
  try {
    fs::create_directories(out_dir);
  } catch (const fs::filesystem_error& e) {
    throw Error(Errc::IoFailure, e.what());
  }
  std::int64_t idx = 0;
  for (int i = 0; i < n_train_s; ++i, ++idx) {
    const auto c = generate_case(p, idx);
    const std::string n = detail::case_name(idx);
    ManifestEntry e{kRoleSourceLabeled, idx, "source/" + n + "_S.vvol", "", "source/" + n + "_mask.vvol", true};
    save_volume(c.source, out_dir / e.path);
    save_mask(c.mask, out_dir / e.mask_path, n + "_mask");
    m.entries.push_back(e);
  }
  for (int i = 0; i < n_train_t; ++i, ++idx) {
    const auto c = generate_case(p, idx);
    const std::string n = detail::case_name(idx);
    ManifestEntry e{kRoleTargetUnlabeled, idx, "target/" + n + "_T.vvol", "", "", false};
    save_volume(c.target, out_dir / e.path);
    m.entries.push_back(e);
  }
  for (int i = 0; i < n_val; ++i, ++idx) {
    const auto c = generate_case(p, idx);
    const std::string n = detail::case_name(idx);
    ManifestEntry e{kRoleValidationPaired, idx, "val/" + n + "_S.vvol", "val/" + n + "_T.vvol",
                    "val/" + n + "_mask.vvol", true};
    save_volume(c.source, out_dir / e.path);
    save_volume(c.target, out_dir / e.target_path);
    save_mask(c.mask, out_dir / e.mask_path, n + "_mask");
    m.entries.push_back(e);
  }
  std::ofstream os(out_dir / "manifest.json", std::ios::binary);
  if (!os) throw Error(Errc::IoFailure, "cannot write manifest in " + out_dir.string());
  os << to_json(m).dump(2) << '\n';
  return m;
}

}  // namespace xmoda
