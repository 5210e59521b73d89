#pragma once

// Desk-scale network architectures:
//   ResnetGenerator    - stem, n_down strided convs, residual blocks,
//                        n_down upsample+conv stages, tanh head; optionally a
//                        global identity skip (zero-initialized head => identity map)
//   PatchDiscriminator - strided 4x4 convs ending in a 1-channel patch map
//   UNet               - 2-D or 3-D encoder/decoder with skip connections

#include <string>
#include <vector>

#include "json.hpp"

#include "xmoda/nn/layers.hpp"

namespace xmoda::nn {

struct NetSpec {
  std::string kind = "generator";  // generator | discriminator
  int base_width = 16;
  int n_down = 2;
  int n_resblocks = 2;
  int in_channels = 1;
  int out_channels = 1;
  // tanh(head + atanh(x)). Saturated inputs get almost no gradient through
  // the skip, so large contrast changes are slow to learn with it on.
  bool identity_skip = false;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(NetSpec, kind, base_width, n_down, n_resblocks, in_channels,
                                                out_channels, identity_skip)

inline void check(const NetSpec& s) {
  if (s.base_width < 1 || s.n_down < 1 || s.n_resblocks < 0 || s.in_channels < 1 || s.out_channels < 1)
    throw Error(Errc::ConfigInvalid, "network widths and depths must be >= 1");
  if (s.kind != "generator" && s.kind != "discriminator")
    throw Error(Errc::ConfigInvalid, "network kind must be generator or discriminator");
}

class ResnetGenerator {
 public:
  ResnetGenerator(const NetSpec& spec, Rng& rng, const std::string& prefix = "") : spec_(spec) {
    check(spec);
    if (spec.identity_skip && spec.in_channels != spec.out_channels)
      throw Error(Errc::ConfigInvalid, "generator identity skip needs in_channels == out_channels");
    const int w = spec.base_width;
    stem_ = ConvLayer(params, prefix + "stem", 2, spec.in_channels, w, 7, 1, 3, Init::Normal002, rng);
    int c = w;
    for (int i = 0; i < spec.n_down; ++i) {
      down_.emplace_back(params, prefix + "down" + std::to_string(i), 2, c, c * 2, 3, 2, 1, Init::Normal002, rng);
      c *= 2;
    }
    for (int i = 0; i < spec.n_resblocks; ++i) {
      const std::string n = prefix + "res" + std::to_string(i);
      res_.push_back({ConvLayer(params, n + ".a", 2, c, c, 3, 1, 1, Init::Normal002, rng),
                      ConvLayer(params, n + ".b", 2, c, c, 3, 1, 1, Init::Normal002, rng)});
    }
    for (int i = 0; i < spec.n_down; ++i) {
      up_.emplace_back(params, prefix + "up" + std::to_string(i), 2, c, c / 2, 3, 1, 1, Init::Normal002, rng);
      c /= 2;
    }
    head_ = ConvLayer(params, prefix + "head", 2, c, spec.out_channels, 7, 1, 3,
                      spec.identity_skip ? Init::Zero : Init::Normal002, rng);
  }

  const NetSpec& spec() const { return spec_; }

  /// Number of feature taps: input, stem, each down stage, each residual block.
  int tap_count() const { return 2 + spec_.n_down + spec_.n_resblocks; }

  std::int64_t tap_channels(int tap) const {
    if (tap == 0) return spec_.in_channels;
    return static_cast<std::int64_t>(spec_.base_width) << std::min(tap - 1, spec_.n_down);
  }

  /// Input spatial dims must be divisible by 2^n_down.
  Tensor forward(const Tensor& x) const {
    Tensor h = encode_to(x, tap_count() - 1, nullptr, {});
    for (const auto& u : up_) h = relu(instance_norm(u(upsample_nearest(h, {1, 2, 2}))));
    return spec_.identity_skip ? tanh(add(head_(h), atanh_clamped(x))) : tanh(head_(h));
  }

  /// Encoder features at the requested taps (see tap_count()).
  std::vector<Tensor> encode(const Tensor& x, const std::vector<int>& taps) const {
    int last = 0;
    for (int t : taps) {
      if (t < 0 || t >= tap_count()) throw Error(Errc::ConfigInvalid, "encoder tap " + std::to_string(t) + " out of range");
      last = std::max(last, t);
    }
    std::vector<Tensor> out(taps.size());
    encode_to(x, last, &out, taps);
    return out;
  }

  ParamStore params;

 private:
  struct ResBlock {
    ConvLayer a, b;
  };

  Tensor encode_to(const Tensor& x, int last_tap, std::vector<Tensor>* out, const std::vector<int>& taps) const {
    auto record = [&](int tap, const Tensor& t) {
      if (!out) return;
      for (std::size_t i = 0; i < taps.size(); ++i)
        if (taps[i] == tap) (*out)[i] = t;
    };
    int tap = 0;
    record(tap, x);
    if (last_tap == tap) return x;
    Tensor h = relu(instance_norm(stem_(x)));
    record(++tap, h);
    if (last_tap == tap) return h;
    for (const auto& d : down_) {
      h = relu(instance_norm(d(h)));
      record(++tap, h);
      if (last_tap == tap) return h;
    }
    for (const auto& r : res_) {
      h = add(h, instance_norm(r.b(relu(instance_norm(r.a(h))))));
      record(++tap, h);
      if (last_tap == tap) return h;
    }
    return h;
  }

  NetSpec spec_;
  ConvLayer stem_;
  std::vector<ConvLayer> down_;
  std::vector<ResBlock> res_;
  std::vector<ConvLayer> up_;
  ConvLayer head_;
};

class PatchDiscriminator {
 public:
  PatchDiscriminator(const NetSpec& spec, Rng& rng, const std::string& prefix = "") : spec_(spec) {
    check(spec);
    int c = spec.in_channels;
    int w = spec.base_width;
    for (int i = 0; i < spec.n_down; ++i) {
      layers_.emplace_back(params, prefix + "conv" + std::to_string(i), 2, c, w, 4, 2, 1, Init::Normal002, rng);
      c = w;
      w *= 2;
    }
    out_ = ConvLayer(params, prefix + "out", 2, c, 1, 4, 1, 1, Init::Normal002, rng);
  }

  Tensor forward(const Tensor& x) const {
    Tensor h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i](h);
      if (i > 0) h = instance_norm(h);
      h = leaky_relu(h, 0.2f);
    }
    return out_(h);
  }

  const NetSpec& spec() const { return spec_; }
  ParamStore params;

 private:
  NetSpec spec_;
  std::vector<ConvLayer> layers_;
  ConvLayer out_;
};

struct UNetSpec {
  int dims = 3;  // 2 or 3
  int base_width = 8;
  int depth = 2;  // number of downsamplings
  int in_channels = 1;
  int n_classes = 3;
};

class UNet {
 public:
  UNet(const UNetSpec& spec, Rng& rng) : spec_(spec) {
    if ((spec.dims != 2 && spec.dims != 3) || spec.base_width < 1 || spec.depth < 0 || spec.n_classes < 2)
      throw Error(Errc::ConfigInvalid, "invalid U-Net spec");
    const int d = spec.dims;
    int cin = spec.in_channels;
    for (int l = 0; l <= spec.depth; ++l) {
      const int w = width(l);
      const std::string n = "enc" + std::to_string(l);
      enc_.push_back({ConvLayer(params, n + ".a", d, cin, w, 3, l == 0 ? 1 : 2, 1, Init::KaimingNormal, rng),
                      ConvLayer(params, n + ".b", d, w, w, 3, 1, 1, Init::KaimingNormal, rng)});
      cin = w;
    }
    for (int l = spec.depth - 1; l >= 0; --l) {
      const int w = width(l);
      const std::string n = "dec" + std::to_string(l);
      dec_.push_back({ConvLayer(params, n + ".up", d, width(l + 1), w, 1, 1, 0, Init::KaimingNormal, rng),
                      ConvLayer(params, n + ".a", d, 2 * w, w, 3, 1, 1, Init::KaimingNormal, rng),
                      ConvLayer(params, n + ".b", d, w, w, 3, 1, 1, Init::KaimingNormal, rng)});
    }
    out_ = ConvLayer(params, "out", d, width(0), spec.n_classes, 1, 1, 0, Init::KaimingNormal, rng);
  }

  const UNetSpec& spec() const { return spec_; }

  /// (1, [D,] H, W) -> logits (n_classes, [D,] H, W). Spatial dims must be
  /// divisible by 2^depth.
  Tensor forward(const Tensor& x) const {
    std::vector<Tensor> skips;
    Tensor h = x;
    for (const auto& e : enc_) {
      h = block(e.a, h);
      h = block(e.b, h);
      skips.push_back(h);
    }
    const Vec3i f = spec_.dims == 3 ? Vec3i{2, 2, 2} : Vec3i{1, 2, 2};
    for (std::size_t i = 0; i < dec_.size(); ++i) {
      const auto& dl = dec_[i];
      const Tensor& skip = skips[skips.size() - 2 - i];
      Tensor up = dl.up(upsample_nearest(h, f));
      h = block(dl.a, concat_channels(skip, up));
      h = block(dl.b, h);
    }
    return out_(h);
  }

  ParamStore params;

 private:
  struct Enc {
    ConvLayer a, b;
  };
  struct Dec {
    ConvLayer up, a, b;
  };

  int width(int level) const { return spec_.base_width * (1 << std::min(level, 3)); }

  static Tensor block(const ConvLayer& c, const Tensor& x) { return leaky_relu(instance_norm(c(x)), 0.01f); }

  UNetSpec spec_;
  std::vector<Enc> enc_;
  std::vector<Dec> dec_;
  ConvLayer out_;
};

}  // namespace xmoda::nn
