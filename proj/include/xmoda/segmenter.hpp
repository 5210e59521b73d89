#pragma once

// Fixed-configuration U-Net segmenter: patch training with foreground
// oversampling and a Dice + cross-entropy loss, sliding-window inference
// with half-window overlap, and softmax-averaging ensembles.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "xmoda/checkpoint.hpp"
#include "xmoda/losses.hpp"
#include "xmoda/nn/networks.hpp"
#include "xmoda/nn/optim.hpp"
#include "xmoda/nn/train_util.hpp"
#include "xmoda/volume_io.hpp"

namespace xmoda {

struct SegConfig {
  std::string mode = "3d";  // 2d | 3d
  int base_width = 8;
  int depth = 2;
  int epochs = 10;
  double lr = 1e-2;
  std::array<int, 3> patch_size{16, 32, 32};  // (z, y, x); z ignored in 2d mode
  std::uint64_t seed = 0;
  int n_classes = 3;
  int iters_per_epoch = 40;
  int batch_size = 1;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SegConfig, mode, base_width, depth, epochs, lr, patch_size, seed,
                                                n_classes, iters_per_epoch, batch_size)

inline void check(const SegConfig& c) {
  if (c.mode != "2d" && c.mode != "3d") throw Error(Errc::ConfigInvalid, "segmenter mode must be 2d or 3d");
  if (c.base_width < 1 || c.depth < 0 || c.epochs < 0 || !(c.lr > 0) || c.n_classes < 2 || c.iters_per_epoch < 1 ||
      c.batch_size < 1)
    throw Error(Errc::ConfigInvalid, "segmenter config values must be positive");
  const int m = 1 << c.depth;
  for (int a = c.mode == "2d" ? 1 : 0; a < 3; ++a)
    if (c.patch_size[a] < 1 || c.patch_size[a] % m != 0)
      throw Error(Errc::ConfigInvalid, "patch_size must be divisible by 2^depth");
}

struct LabeledCase {
  Volume image;
  LabelMask mask;
};

/// Patch origin and extent in (z, y, x).
struct PatchBox {
  std::array<int, 3> start{0, 0, 0};
  std::array<int, 3> size{1, 1, 1};
  bool forced_foreground = false;
};

namespace detail {

inline std::array<int, 3> patch_extent(const SegConfig& cfg) {
  return cfg.mode == "2d" ? std::array<int, 3>{1, cfg.patch_size[1], cfg.patch_size[2]} : cfg.patch_size;
}

/// Start of a window of length `w` containing voxel `v`, centered where
/// possible, on an axis padded to at least `w`.
inline int centered_start(int v, int w, int n) { return std::clamp(v - w / 2, 0, std::max(n - w, 0)); }

/// Copies a (possibly out-of-range) box from a volume; outside voxels are 0.
template <class T>
std::vector<T> extract_box(const std::vector<T>& data, const Index3& shape, const std::array<int, 3>& start,
                           const std::array<int, 3>& size) {
  std::vector<T> out(static_cast<std::size_t>(size[0]) * size[1] * size[2], T{});
  for (int z = 0; z < size[0]; ++z) {
    const int sz = start[0] + z;
    if (sz < 0 || sz >= shape[0]) continue;
    for (int y = 0; y < size[1]; ++y) {
      const int sy = start[1] + y;
      if (sy < 0 || sy >= shape[1]) continue;
      for (int x = 0; x < size[2]; ++x) {
        const int sx = start[2] + x;
        if (sx < 0 || sx >= shape[2]) continue;
        out[(static_cast<std::size_t>(z) * size[1] + y) * size[2] + x] =
            data[(static_cast<std::size_t>(sz) * shape[1] + sy) * shape[2] + sx];
      }
    }
  }
  return out;
}

inline Shape net_input_shape(const SegConfig& cfg, const std::array<int, 3>& size) {
  if (cfg.mode == "2d") return {1, size[1], size[2]};
  return {1, size[0], size[1], size[2]};
}

/// Foreground voxel indices per class 1..C-1 for every case.
inline std::vector<std::vector<std::vector<std::int64_t>>> foreground_index(const std::vector<LabeledCase>& cases,
                                                                             int n_classes) {
  std::vector<std::vector<std::vector<std::int64_t>>> out(cases.size());
  for (std::size_t i = 0; i < cases.size(); ++i) {
    out[i].resize(static_cast<std::size_t>(n_classes));
    const auto& d = cases[i].mask.data;
    for (std::size_t v = 0; v < d.size(); ++v)
      if (d[v] > 0 && d[v] < n_classes) out[i][d[v]].push_back(static_cast<std::int64_t>(v));
  }
  return out;
}

}  // namespace detail

/// Draws a training patch. Forced-foreground patches are centered on a
/// voxel of a uniformly chosen foreground class present in the case.
inline PatchBox sample_patch(const LabeledCase& c, const std::vector<std::vector<std::int64_t>>& fg, const SegConfig& cfg,
                             bool force_foreground, Rng& rng) {
  PatchBox box;
  box.size = detail::patch_extent(cfg);
  const auto& s = c.image.shape;
  std::vector<int> present;
  for (std::size_t k = 1; k < fg.size(); ++k)
    if (!fg[k].empty()) present.push_back(static_cast<int>(k));
  if (force_foreground && !present.empty()) {
    const int cls = present[rng.below(present.size())];
    const std::int64_t v = fg[static_cast<std::size_t>(cls)][rng.below(fg[static_cast<std::size_t>(cls)].size())];
    const int z = static_cast<int>(v / (std::int64_t{s[1]} * s[2]));
    const int y = static_cast<int>((v / s[2]) % s[1]);
    const int x = static_cast<int>(v % s[2]);
    box.start = {cfg.mode == "2d" ? z : detail::centered_start(z, box.size[0], s[0]),
                 detail::centered_start(y, box.size[1], s[1]), detail::centered_start(x, box.size[2], s[2])};
    box.forced_foreground = true;
    return box;
  }
  for (int a = 0; a < 3; ++a) {
    const int room = s[a] - box.size[a];
    box.start[a] = room > 0 ? static_cast<int>(rng.below(static_cast<std::uint64_t>(room) + 1)) : 0;
  }
  return box;
}

inline nn::UNet build_unet(const SegConfig& cfg, Rng& rng) {
  return nn::UNet({cfg.mode == "2d" ? 2 : 3, cfg.base_width, cfg.depth, 1, cfg.n_classes}, rng);
}

/// Hooks mirror the translator trainers'.
struct SegHooks {
  std::function<void(const Checkpoint&)> on_epoch;
  std::function<void(const Checkpoint&)> on_divergence;
  std::function<void(const PatchBox&, const std::vector<std::uint8_t>&)> on_patch;  // sampling audit
  int stop_after_epoch = -1;
};

inline Checkpoint train_segmenter(const std::vector<LabeledCase>& cases, const SegConfig& cfg,
                                  const SegHooks& hooks = {}, const Checkpoint* resume_from = nullptr) {
  check(cfg);
  if (cases.empty()) throw Error(Errc::EmptyDataset, "segmenter needs at least one labeled case");
  for (const auto& c : cases) {
    validate(c.image);
    if (c.image.shape != c.mask.shape) throw Error(Errc::ShapeMismatch, "image and mask shapes differ");
  }
  Rng init_rng(derive_seed(cfg.seed, "init"));
  nn::UNet net = build_unet(cfg, init_rng);
  nn::Adam opt(0.9, 0.999);
  Rng rng(derive_seed(cfg.seed, "train"));
  const auto fg = detail::foreground_index(cases, cfg.n_classes);

  Checkpoint state;
  state.kind = "segmenter";
  state.config = cfg;
  auto snapshot = [&] {
    state.arrays.clear();
    state.extra = nlohmann::json::object();
    store_params(state, net.params);
    store_adam(state, "opt", opt);
    state.rng_state = rng.state();
  };
  if (resume_from) {
    if (resume_from->kind != state.kind || resume_from->config != nlohmann::json(cfg))
      throw Error(Errc::IncompatibleCheckpoint, "checkpoint does not match this segmenter config");
    load_params(*resume_from, net.params);
    load_adam(*resume_from, "opt", opt);
    rng.set_state(resume_from->rng_state);
    state.epoch = resume_from->epoch;
    state.loss_history = resume_from->loss_history;
  }
  snapshot();

  auto diverge = [&](int epoch) {
    if (hooks.on_divergence) hooks.on_divergence(state);
    throw Error(Errc::DivergenceDetected, "non-finite segmenter loss during epoch " + std::to_string(epoch + 1));
  };
  const double inv_b = 1.0 / cfg.batch_size;
  for (int epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    if (hooks.stop_after_epoch >= 0 && epoch >= hooks.stop_after_epoch) break;
    // Polynomial decay, exponent 0.9.
    const double lr = cfg.lr * std::pow(1.0 - static_cast<double>(epoch) / cfg.epochs, 0.9);
    std::map<std::string, double> sums;
    for (int it = 0; it < cfg.iters_per_epoch; ++it) {
      net.params.zero_grad();
      std::map<std::string, double> terms;
      for (int b = 0; b < cfg.batch_size; ++b) {
        const std::size_t ci = rng.below(cases.size());
        const auto& c = cases[ci];
        const bool force = ((it * cfg.batch_size + b) % 2) == 0;
        const PatchBox box = sample_patch(c, fg[ci], cfg, force, rng);
        auto img = detail::extract_box(c.image.data, c.image.shape, box.start, box.size);
        auto lab = detail::extract_box(c.mask.data, c.mask.shape, box.start, box.size);
        if (hooks.on_patch) hooks.on_patch(box, lab);
        nn::Tensor x = nn::Tensor::from(detail::net_input_shape(cfg, box.size), std::move(img));
        nn::Tensor logits = net.forward(x);
        NdArray<double> ld(logits.shape());
        for (std::size_t i = 0; i < ld.data.size(); ++i) ld.data[i] = logits.value()[i];
        if (!ld.all_finite()) diverge(epoch);
        const auto lv = dice_ce_loss(ld, lab);
        nn::backward(logits, detail::scaled_seed(lv.grads.at("logits"), inv_b));
        terms["loss"] += lv.value * inv_b;
        terms["dice"] += lv.terms.at("dice") * inv_b;
        terms["ce"] += lv.terms.at("ce") * inv_b;
      }
      if (!detail::all_finite(terms)) diverge(epoch);
      opt.step(net.params, lr);
      for (const auto& [k, v] : terms) sums[k] += v;
    }
    for (auto& [k, v] : sums) v /= cfg.iters_per_epoch;
    state.loss_history.push_back(sums);
    state.epoch = epoch + 1;
    snapshot();
    if (hooks.on_epoch) hooks.on_epoch(state);
  }
  return state;
}

/// Per-class probabilities (C, D, H, W) as floats.
struct ProbabilityMap {
  int n_classes = 0;
  Index3 shape{1, 1, 1};
  std::vector<float> data;
};

struct Prediction {
  LabelMask mask;
  Volume confidence;
};

inline SegConfig segmenter_config(const Checkpoint& ckpt) {
  if (ckpt.kind != "segmenter") throw Error(Errc::IncompatibleCheckpoint, "checkpoint kind " + ckpt.kind + " is not a segmenter");
  try {
    SegConfig cfg = ckpt.config.get<SegConfig>();
    check(cfg);
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::IncompatibleCheckpoint, std::string("segmenter config: ") + e.what());
  }
}

namespace detail {

/// Window starts along one axis of length n (>= w): evenly spaced with a
/// step of at most w/2, first at 0 and last at n - w.
inline std::vector<int> window_starts(int n, int w) {
  if (n <= w) return {0};
  const int step = std::max(w / 2, 1);
  const int count = (n - w + step - 1) / step + 1;
  std::vector<int> out(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    out[static_cast<std::size_t>(i)] =
        static_cast<int>(std::lround(static_cast<double>(i) * (n - w) / static_cast<double>(count - 1)));
  return out;
}

inline int round_up(int v, int m) { return (v + m - 1) / m * m; }

}  // namespace detail

/// Sliding-window softmax with half-window overlap and uniform weights.
/// Windows are min(patch, axis rounded up to 2^depth); axes shorter than the
/// window are zero-padded and cropped back.
inline ProbabilityMap predict_proba(const Checkpoint& ckpt, const Volume& vol) {
  const SegConfig cfg = segmenter_config(ckpt);
  validate(vol);
  Rng rng(0);
  nn::UNet net = build_unet(cfg, rng);
  load_params(ckpt, net.params);

  const int m = 1 << cfg.depth;
  const auto patch = detail::patch_extent(cfg);
  std::array<int, 3> win{}, padded{};
  for (int a = 0; a < 3; ++a) {
    if (cfg.mode == "2d" && a == 0) {
      win[0] = 1;
      padded[0] = vol.shape[0];
      continue;
    }
    win[a] = std::min(patch[a], detail::round_up(vol.shape[a], m));
    padded[a] = std::max(vol.shape[a], win[a]);
  }
  const auto zs = detail::window_starts(padded[0], win[0]);
  const auto ys = detail::window_starts(padded[1], win[1]);
  const auto xs = detail::window_starts(padded[2], win[2]);

  const std::int64_t nvox = voxel_count(vol.shape);
  const int C = cfg.n_classes;
  std::vector<double> acc(static_cast<std::size_t>(C * nvox), 0.0);
  std::vector<double> cnt(static_cast<std::size_t>(nvox), 0.0);
  nn::NoGradGuard ng;
  for (int z0 : zs)
    for (int y0 : ys)
      for (int x0 : xs) {
        const std::array<int, 3> start{z0, y0, x0};
        auto img = detail::extract_box(vol.data, vol.shape, start, win);
        nn::Tensor logits = net.forward(nn::Tensor::from(detail::net_input_shape(cfg, win), std::move(img)));
        const std::int64_t wv = std::int64_t{win[0]} * win[1] * win[2];
        const auto& lv = logits.value();
        for (int z = 0; z < win[0]; ++z) {
          const int vz = z0 + z;
          if (vz >= vol.shape[0]) continue;
          for (int y = 0; y < win[1]; ++y) {
            const int vy = y0 + y;
            if (vy >= vol.shape[1]) continue;
            for (int x = 0; x < win[2]; ++x) {
              const int vx = x0 + x;
              if (vx >= vol.shape[2]) continue;
              const std::int64_t wi = (std::int64_t{z} * win[1] + y) * win[2] + x;
              const std::int64_t vi = vol.index(vz, vy, vx);
              double mx = lv[static_cast<std::size_t>(wi)];
              for (int c = 1; c < C; ++c) mx = std::max(mx, static_cast<double>(lv[static_cast<std::size_t>(c * wv + wi)]));
              double zsum = 0.0;
              for (int c = 0; c < C; ++c) zsum += std::exp(lv[static_cast<std::size_t>(c * wv + wi)] - mx);
              for (int c = 0; c < C; ++c)
                acc[static_cast<std::size_t>(c * nvox + vi)] += std::exp(lv[static_cast<std::size_t>(c * wv + wi)] - mx) / zsum;
              cnt[static_cast<std::size_t>(vi)] += 1.0;
            }
          }
        }
      }
  ProbabilityMap out;
  out.n_classes = C;
  out.shape = vol.shape;
  out.data.resize(acc.size());
  for (int c = 0; c < C; ++c)
    for (std::int64_t v = 0; v < nvox; ++v)
      out.data[static_cast<std::size_t>(c * nvox + v)] =
          static_cast<float>(acc[static_cast<std::size_t>(c * nvox + v)] / cnt[static_cast<std::size_t>(v)]);
  return out;
}

/// Argmax (ties to the lower label) and max probability.
inline Prediction argmax_prediction(const ProbabilityMap& p, const Spacing3& spacing, const std::string& origin_id) {
  Prediction out;
  out.mask = LabelMask(p.shape, spacing);
  out.confidence = Volume(p.shape, spacing, origin_id);
  const std::int64_t nvox = voxel_count(p.shape);
  for (std::int64_t v = 0; v < nvox; ++v) {
    int best = 0;
    float bp = p.data[static_cast<std::size_t>(v)];
    for (int c = 1; c < p.n_classes; ++c) {
      const float q = p.data[static_cast<std::size_t>(c * nvox + v)];
      if (q > bp) {
        bp = q;
        best = c;
      }
    }
    out.mask.data[static_cast<std::size_t>(v)] = static_cast<std::uint8_t>(best);
    out.confidence.data[static_cast<std::size_t>(v)] = bp;
  }
  return out;
}

inline Prediction predict(const Checkpoint& ckpt, const Volume& vol) {
  return argmax_prediction(predict_proba(ckpt, vol), vol.spacing, vol.origin_id);
}

/// Member-wise mean of probability maps, in member order.
inline ProbabilityMap average_probabilities(const std::vector<ProbabilityMap>& maps) {
  if (maps.empty()) throw Error(Errc::EmptyEnsemble, "ensemble has no members");
  ProbabilityMap out = maps.front();
  std::vector<double> acc(out.data.begin(), out.data.end());
  for (std::size_t i = 1; i < maps.size(); ++i) {
    if (maps[i].shape != out.shape || maps[i].n_classes != out.n_classes)
      throw Error(Errc::IncompatibleCheckpoint, "ensemble members disagree on classes or shape");
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += maps[i].data[j];
  }
  const double inv = 1.0 / static_cast<double>(maps.size());
  for (std::size_t j = 0; j < acc.size(); ++j) out.data[j] = static_cast<float>(acc[j] * inv);
  return out;
}

inline Prediction ensemble_predict_full(const std::vector<Checkpoint>& ckpts, const Volume& vol) {
  if (ckpts.empty()) throw Error(Errc::EmptyEnsemble, "ensemble has no members");
  std::vector<ProbabilityMap> maps;
  for (const auto& c : ckpts) maps.push_back(predict_proba(c, vol));
  return argmax_prediction(average_probabilities(maps), vol.spacing, vol.origin_id);
}

inline LabelMask ensemble_predict(const std::vector<Checkpoint>& ckpts, const Volume& vol) {
  return ensemble_predict_full(ckpts, vol).mask;
}

}  // namespace xmoda
