#pragma once

// Unpaired S->T translators: a cycle-consistency trainer (G: S->T, F: T->S,
// discriminators on both domains, image history pools) and a query-selected
// contrastive trainer (one generator, one discriminator, attention-routed
// PatchNCE on encoder features). Both train on 2-D axial slices with batch
// accumulation, record per-epoch mean losses and emit Checkpoints that can
// be resumed.

#include <algorithm>
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
#include "xmoda/qs_attn.hpp"
#include "xmoda/volume_io.hpp"

namespace xmoda {

struct TrainConfig {
  int epochs = 5;
  int batch_size = 1;
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double lambda_cycle = 10.0;
  double lambda_identity = 0.0;  // relative to lambda_cycle, as in CycleGAN
  double lambda_nce = 1.0;
  bool nce_idt = true;
  double tau = 0.07;
  int image_pool_size = 50;
  std::uint64_t seed = 0;
  int image_size = 48;
  int iters_per_epoch = 0;  // 0: max(|S|, |T|)
  std::vector<int> nce_layers{2, 3};
  int n_negatives = 63;
  int nce_head_width = 64;  // projection on routed features; 0 contrasts raw features
  nn::NetSpec generator{};
  nn::NetSpec discriminator{"discriminator", 16, 3, 0, 1, 1};
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, epochs, batch_size, lr, beta1, beta2, lambda_cycle,
                                                lambda_identity, lambda_nce, nce_idt, tau, image_pool_size, seed,
                                                image_size, iters_per_epoch, nce_layers, n_negatives, nce_head_width,
                                                generator, discriminator)

inline void check(const TrainConfig& c) {
  if (c.epochs < 0 || c.batch_size < 1 || !(c.lr > 0) || c.image_pool_size < 0 || c.image_size < 1 ||
      c.iters_per_epoch < 0 || !(c.tau > 0) || c.lambda_cycle < 0 || c.lambda_nce < 0 || c.lambda_identity < 0 ||
      c.n_negatives < 1 || c.nce_head_width < 0)
    throw Error(Errc::ConfigInvalid, "translator config values must be positive");
  if (c.image_size % (1 << c.generator.n_down) != 0)
    throw Error(Errc::ConfigInvalid, "image_size must be divisible by 2^n_down");
  nn::check(c.generator);
  nn::check(c.discriminator);
}

/// Optional instrumentation for the trainers.
struct TrainHooks {
  std::function<void(const Checkpoint&)> on_epoch;       // after every completed epoch
  std::function<void(const Checkpoint&)> on_divergence;  // receives the last finite checkpoint
  int stop_after_epoch = -1;                             // return early (for resume tests)
  bool nce_trans_equals_src = false;                     // debug: contrast source features with themselves
};

/// History buffer of generated images for discriminator updates.
class ImagePool {
 public:
  explicit ImagePool(int capacity = 0) : capacity_(capacity) {
    if (capacity < 0) throw Error(Errc::InvalidArgument, "pool capacity must be >= 0");
  }

  std::vector<float> push(std::vector<float> img, Rng& rng) {
    if (capacity_ == 0) return img;
    if (static_cast<int>(images_.size()) < capacity_) {
      images_.push_back(img);
      return img;
    }
    if (rng.uniform() < 0.5) return img;
    const auto j = static_cast<std::size_t>(rng.below(images_.size()));
    std::swap(images_[j], img);
    return img;
  }

  int capacity() const { return capacity_; }
  const std::vector<std::vector<float>>& images() const { return images_; }
  std::vector<std::vector<float>>& images() { return images_; }

 private:
  int capacity_;
  std::vector<std::vector<float>> images_;
};

inline std::vector<float> image_pool_push(ImagePool& pool, std::vector<float> img, Rng& rng) {
  return pool.push(std::move(img), rng);
}

/// Axial slices of a preprocessed volume, center-cropped to `crop` and
/// resized to image_size x image_size.
inline std::vector<Slice2D> prepare_slices(const Volume& vol, std::array<int, 2> crop, int image_size) {
  std::vector<Slice2D> out;
  for (const auto& s : slice_axial(vol)) out.push_back(center_crop_resize(s, crop, {image_size, image_size}));
  return out;
}

namespace detail {

inline nn::Tensor slice_tensor(const Slice2D& s) {
  return nn::Tensor::from({1, s.height, s.width}, s.data);
}

inline void check_dataset(const std::vector<Slice2D>& s, const std::vector<Slice2D>& t, const TrainConfig& cfg) {
  if (s.empty() || t.empty()) throw Error(Errc::EmptyDataset, "translator needs slices in both domains");
  for (const auto* set : {&s, &t})
    for (const auto& sl : *set)
      if (sl.height != cfg.image_size || sl.width != cfg.image_size)
        throw Error(Errc::ShapeMismatch, "slice is " + std::to_string(sl.height) + "x" + std::to_string(sl.width) +
                                             ", config expects image_size " + std::to_string(cfg.image_size));
}

struct EpochMeans {
  std::map<std::string, double> sum;
  int count = 0;
  void add(const std::map<std::string, double>& terms) {
    for (const auto& [k, v] : terms) sum[k] += v;
    ++count;
  }
  std::map<std::string, double> mean() const {
    std::map<std::string, double> out;
    for (const auto& [k, v] : sum) out[k] = v / std::max(count, 1);
    return out;
  }
};

/// Mean absolute difference with its gradient on `a`.
inline double l1(const nn::Tensor& a, const nn::Tensor& b, std::vector<float>& grad, double scale) {
  const double n = static_cast<double>(a.value().size());
  grad.assign(a.value().size(), 0.0f);
  double acc = 0.0;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double d = static_cast<double>(a.value()[i]) - b.value()[i];
    acc += std::abs(d);
    grad[i] = static_cast<float>(scale * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) / n);
  }
  return acc / n;
}

inline void store_pool(Checkpoint& c, const std::string& key, const ImagePool& pool, const Shape& shape) {
  c.extra["pools"][key] = pool.images().size();
  for (std::size_t i = 0; i < pool.images().size(); ++i) {
    char idx[24];
    std::snprintf(idx, sizeof idx, "%06zu", i);
    c.arrays["pool." + key + "." + idx] = NdArray<float>{shape, pool.images()[i]};
  }
}

inline void load_pool(const Checkpoint& c, const std::string& key, ImagePool& pool) {
  pool.images().clear();
  const std::size_t n = c.extra.contains("pools") ? c.extra["pools"].value(key, std::size_t{0}) : 0;
  for (std::size_t i = 0; i < n; ++i) {
    char idx[24];
    std::snprintf(idx, sizeof idx, "%06zu", i);
    auto it = c.arrays.find("pool." + key + "." + idx);
    if (it == c.arrays.end()) throw Error(Errc::IncompatibleCheckpoint, "checkpoint pool " + key + " is incomplete");
    pool.images().push_back(it->second.data);
  }
}

inline void check_resume(const Checkpoint& c, const std::string& kind, const TrainConfig& cfg) {
  if (c.kind != kind) throw Error(Errc::IncompatibleCheckpoint, "checkpoint kind " + c.kind + ", expected " + kind);
  if (c.config != nlohmann::json(cfg))
    throw Error(Errc::IncompatibleCheckpoint, "checkpoint was written with a different training config");
  if (c.epoch < 0 || c.epoch > cfg.epochs) throw Error(Errc::IncompatibleCheckpoint, "checkpoint epoch out of range");
}

inline int iterations(const TrainConfig& cfg, std::size_t ns, std::size_t nt) {
  return cfg.iters_per_epoch > 0 ? cfg.iters_per_epoch : static_cast<int>(std::max(ns, nt));
}

[[noreturn]] inline void diverged(const TrainHooks& hooks, const Checkpoint& last, int epoch) {
  if (hooks.on_divergence) hooks.on_divergence(last);
  throw Error(Errc::DivergenceDetected, "non-finite loss during epoch " + std::to_string(epoch + 1));
}

}  // namespace detail

/// Networks of the cycle-consistency model. Parameter names carry the
/// prefixes "G.", "F.", "Dt.", "Ds.".
struct CycleGanModel {
  nn::ResnetGenerator G, F;
  nn::PatchDiscriminator Dt, Ds;
  nn::ParamStore gen, disc;

  CycleGanModel(const TrainConfig& cfg, Rng& rng)
      : G(cfg.generator, rng, "G."),
        F(cfg.generator, rng, "F."),
        Dt(cfg.discriminator, rng, "Dt."),
        Ds(cfg.discriminator, rng, "Ds."),
        gen(nn::ParamStore::join({&G.params, &F.params})),
        disc(nn::ParamStore::join({&Dt.params, &Ds.params})) {}
};

/// Networks of the contrastive model; prefixes "G." and "D.".
/// Two 1x1 layers with a ReLU, applied to routed query features.
struct NceHead {
  nn::ConvLayer a, b;
  nn::Tensor operator()(const nn::Tensor& x) const { return b(nn::relu(a(x))); }
};

struct QsAttnModel {
  nn::ResnetGenerator G;
  nn::PatchDiscriminator D;
  nn::ParamStore H;
  std::vector<NceHead> heads;  // one per nce layer, empty when nce_head_width == 0

  QsAttnModel(const TrainConfig& cfg, Rng& rng) : G(cfg.generator, rng, "G."), D(cfg.discriminator, rng, "D.") {
    if (cfg.nce_head_width == 0) return;
    for (int l : cfg.nce_layers) {
      if (l < 0 || l >= G.tap_count()) continue;  // reported by the trainer
      const std::string n = "H" + std::to_string(l);
      const std::int64_t w = cfg.nce_head_width;
      heads.push_back({nn::ConvLayer(H, n + ".a", 2, G.tap_channels(l), w, 1, 1, 0, nn::Init::Normal002, rng),
                       nn::ConvLayer(H, n + ".b", 2, w, w, 1, 1, 0, nn::Init::Normal002, rng)});
    }
  }
};

inline Checkpoint train_cyclegan(const std::vector<Slice2D>& slices_s, const std::vector<Slice2D>& slices_t,
                                 const TrainConfig& cfg, const TrainHooks& hooks = {},
                                 const Checkpoint* resume_from = nullptr) {
  check(cfg);
  detail::check_dataset(slices_s, slices_t, cfg);
  Rng init_rng(derive_seed(cfg.seed, "init"));
  CycleGanModel m(cfg, init_rng);
  Rng rng(derive_seed(cfg.seed, "train"));
  nn::Adam opt_g(cfg.beta1, cfg.beta2), opt_d(cfg.beta1, cfg.beta2);
  ImagePool pool_t(cfg.image_pool_size), pool_s(cfg.image_pool_size);
  const Shape img_shape{1, cfg.image_size, cfg.image_size};

  Checkpoint state;
  state.kind = "cyclegan";
  state.config = cfg;
  auto snapshot = [&] {
    state.arrays.clear();
    state.extra = nlohmann::json::object();
    store_params(state, m.gen);
    store_params(state, m.disc);
    store_adam(state, "gen", opt_g);
    store_adam(state, "disc", opt_d);
    detail::store_pool(state, "t", pool_t, img_shape);
    detail::store_pool(state, "s", pool_s, img_shape);
    state.rng_state = rng.state();
  };
  if (resume_from) {
    detail::check_resume(*resume_from, state.kind, cfg);
    load_params(*resume_from, m.gen);
    load_params(*resume_from, m.disc);
    load_adam(*resume_from, "gen", opt_g);
    load_adam(*resume_from, "disc", opt_d);
    detail::load_pool(*resume_from, "t", pool_t);
    detail::load_pool(*resume_from, "s", pool_s);
    rng.set_state(resume_from->rng_state);
    state.epoch = resume_from->epoch;
    state.loss_history = resume_from->loss_history;
  }
  snapshot();

  const int iters = detail::iterations(cfg, slices_s.size(), slices_t.size());
  const double lam = cfg.lambda_cycle;
  const double lam_idt = cfg.lambda_cycle * cfg.lambda_identity;
  const double inv_b = 1.0 / cfg.batch_size;
  for (int epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    if (hooks.stop_after_epoch >= 0 && epoch >= hooks.stop_after_epoch) break;
    const double lr = nn::linear_decay_lr(cfg.lr, epoch, cfg.epochs);
    detail::EpochMeans means;
    for (int it = 0; it < iters; ++it) {
      std::vector<nn::Tensor> reals_s, reals_t, fakes_t, fakes_s;
      for (int b = 0; b < cfg.batch_size; ++b) {
        reals_s.push_back(detail::slice_tensor(slices_s[rng.below(slices_s.size())]));
        reals_t.push_back(detail::slice_tensor(slices_t[rng.below(slices_t.size())]));
      }
      std::map<std::string, double> terms;
      try {
        // Generator step, discriminators frozen.
        m.disc.set_requires_grad(false);
        m.gen.zero_grad();
        for (int b = 0; b < cfg.batch_size; ++b) {
          const auto& xs = reals_s[b];
          const auto& xt = reals_t[b];
          nn::Tensor fake_t = m.G.forward(xs);
          nn::Tensor rec_s = m.F.forward(fake_t);
          nn::Tensor fake_s = m.F.forward(xt);
          nn::Tensor rec_t = m.G.forward(fake_s);
          nn::Tensor dt_fake = m.Dt.forward(fake_t);
          nn::Tensor ds_fake = m.Ds.forward(fake_s);
          const auto adv_g = adversarial_loss(detail::as_double(dt_fake), true);
          const auto adv_f = adversarial_loss(detail::as_double(ds_fake), true);
          const auto cyc = cycle_loss(detail::as_double(xs), detail::as_double(xt), detail::as_double(rec_s),
                                      detail::as_double(rec_t));
          std::vector<std::pair<nn::Tensor, std::vector<float>>> seeds{
              {dt_fake, detail::scaled_seed(adv_g.grads.at("d_out"), inv_b)},
              {ds_fake, detail::scaled_seed(adv_f.grads.at("d_out"), inv_b)},
              {rec_s, detail::scaled_seed(cyc.grads.at("fg_xs"), lam * inv_b)},
              {rec_t, detail::scaled_seed(cyc.grads.at("gf_xt"), lam * inv_b)}};
          terms["adv_G"] += adv_g.value * inv_b;
          terms["adv_F"] += adv_f.value * inv_b;
          terms["cycle"] += cyc.value * inv_b;
          if (lam_idt > 0) {
            nn::Tensor idt_t = m.G.forward(xt);
            nn::Tensor idt_s = m.F.forward(xs);
            std::vector<float> gi_t, gi_s;
            const double li = detail::l1(idt_t, xt, gi_t, lam_idt * inv_b) + detail::l1(idt_s, xs, gi_s, lam_idt * inv_b);
            seeds.emplace_back(idt_t, std::move(gi_t));
            seeds.emplace_back(idt_s, std::move(gi_s));
            terms["identity"] += li * inv_b;
          }
          nn::backward(seeds);
          fakes_t.push_back(fake_t.detach());
          fakes_s.push_back(fake_s.detach());
        }
        opt_g.step(m.gen, lr);

        // Discriminator step on pooled fakes.
        m.disc.set_requires_grad(true);
        m.disc.zero_grad();
        for (int b = 0; b < cfg.batch_size; ++b) {
          nn::Tensor pooled_t = nn::Tensor::from(img_shape, pool_t.push(fakes_t[b].value(), rng));
          nn::Tensor pooled_s = nn::Tensor::from(img_shape, pool_s.push(fakes_s[b].value(), rng));
          nn::Tensor dt_real = m.Dt.forward(reals_t[b]);
          nn::Tensor dt_fake = m.Dt.forward(pooled_t);
          nn::Tensor ds_real = m.Ds.forward(reals_s[b]);
          nn::Tensor ds_fake = m.Ds.forward(pooled_s);
          const auto a1 = adversarial_loss(detail::as_double(dt_real), true);
          const auto a2 = adversarial_loss(detail::as_double(dt_fake), false);
          const auto a3 = adversarial_loss(detail::as_double(ds_real), true);
          const auto a4 = adversarial_loss(detail::as_double(ds_fake), false);
          nn::backward({{dt_real, detail::scaled_seed(a1.grads.at("d_out"), 0.5 * inv_b)},
                        {dt_fake, detail::scaled_seed(a2.grads.at("d_out"), 0.5 * inv_b)},
                        {ds_real, detail::scaled_seed(a3.grads.at("d_out"), 0.5 * inv_b)},
                        {ds_fake, detail::scaled_seed(a4.grads.at("d_out"), 0.5 * inv_b)}});
          terms["D_t"] += 0.5 * (a1.value + a2.value) * inv_b;
          terms["D_s"] += 0.5 * (a3.value + a4.value) * inv_b;
        }
        opt_d.step(m.disc, lr);
      } catch (const Error& e) {
        if (e.code() != Errc::NonFiniteInput) throw;
        detail::diverged(hooks, state, epoch);
      }
      if (!detail::all_finite(terms)) detail::diverged(hooks, state, epoch);
      means.add(terms);
    }
    state.loss_history.push_back(means.mean());
    state.epoch = epoch + 1;
    snapshot();
    if (hooks.on_epoch) hooks.on_epoch(state);
  }
  return state;
}

namespace detail {

inline NdArray<double> rows_of(const nn::Tensor& t) {
  // (D, k, 1) -> (k, D)
  const std::int64_t d = t.dim(0), k = t.dim(1);
  NdArray<double> out({k, d});
  for (std::int64_t c = 0; c < d; ++c)
    for (std::int64_t i = 0; i < k; ++i) out[i * d + c] = t.value()[static_cast<std::size_t>(c * k + i)];
  return out;
}

inline std::vector<float> seed_of(const NdArray<double>& g, double scale) {
  const std::int64_t k = g.dim(0), d = g.dim(1);
  std::vector<float> out(static_cast<std::size_t>(k * d));
  for (std::int64_t c = 0; c < d; ++c)
    for (std::int64_t i = 0; i < k; ++i) out[static_cast<std::size_t>(c * k + i)] = static_cast<float>(g[i * d + c] * scale);
  return out;
}

// Selection and routing come from the source map; both routed sets pass
// through the head before the loss.
inline double projected_nce(const FeatureMap& fs, const nn::Tensor& src, const nn::Tensor& trans,
                            const NceHead& head, const TrainConfig& cfg, std::uint64_t seed, double scale,
                            std::vector<std::pair<nn::Tensor, std::vector<float>>>& seeds) {
  const auto attn = global_attention(fs);
  const std::int64_t k = std::max<std::int64_t>(2, attn.n / 4);
  const auto sel = select_queries(attn, row_entropy(attn), k);
  const nn::Tensor zs = head(nn::mix_positions(src, sel.reduced_attention.data, k));
  const nn::Tensor zt = head(nn::mix_positions(trans, sel.reduced_attention.data, k));
  const auto r = routed_nce(rows_of(zs), rows_of(zt), cfg.tau, std::min<std::int64_t>(cfg.n_negatives, k - 1), seed);
  if (zs.requires_grad()) seeds.emplace_back(zs, seed_of(r.grad_src, scale));
  if (zt.requires_grad()) seeds.emplace_back(zt, seed_of(r.grad_trans, scale));
  return r.loss;
}

}  // namespace detail

/// Query-selected PatchNCE between `src` and its translation `trans`,
/// averaged over the configured encoder layers. Returns the loss and adds
/// seeds (scaled by `scale`) on the translated-branch feature taps to
/// `seeds`. The source branch is evaluated without gradient.
inline double qsattn_nce_term(const nn::ResnetGenerator& g, const nn::Tensor& src, const nn::Tensor& trans,
                              const TrainConfig& cfg, Rng& rng, double scale,
                              std::vector<std::pair<nn::Tensor, std::vector<float>>>& seeds,
                              bool trans_equals_src = false, const std::vector<NceHead>* heads = nullptr) {
  std::vector<nn::Tensor> feat_src;
  {
    nn::NoGradGuard ng;
    feat_src = g.encode(src, cfg.nce_layers);
  }
  std::vector<nn::Tensor> feat_trans = g.encode(trans, cfg.nce_layers);
  const double inv_l = 1.0 / static_cast<double>(cfg.nce_layers.size());
  double total = 0.0;
  for (std::size_t l = 0; l < cfg.nce_layers.size(); ++l) {
    FeatureMap fs{detail::as_double(feat_src[l]), cfg.nce_layers[l]};
    if (heads && !heads->empty()) {
      total += detail::projected_nce(fs, feat_src[l], trans_equals_src ? feat_src[l] : feat_trans[l],
                                     (*heads)[l], cfg, rng.next(), scale * inv_l, seeds) *
               inv_l;
      continue;
    }
    FeatureMap ft = trans_equals_src ? fs : FeatureMap{detail::as_double(feat_trans[l]), fs.layer_id};
    const auto r = nce_layer_loss(fs, ft, cfg.tau, cfg.n_negatives, rng.next());
    total += r.loss * inv_l;
    if (!trans_equals_src && feat_trans[l].requires_grad())
      seeds.emplace_back(feat_trans[l], detail::scaled_seed(r.grad_trans, scale * inv_l));
  }
  return total;
}

inline Checkpoint train_qsattn(const std::vector<Slice2D>& slices_s, const std::vector<Slice2D>& slices_t,
                               const TrainConfig& cfg, const TrainHooks& hooks = {},
                               const Checkpoint* resume_from = nullptr) {
  check(cfg);
  detail::check_dataset(slices_s, slices_t, cfg);
  if (cfg.nce_layers.empty()) throw Error(Errc::ConfigInvalid, "nce_layers must not be empty");
  Rng init_rng(derive_seed(cfg.seed, "init"));
  QsAttnModel m(cfg, init_rng);
  for (int l : cfg.nce_layers)
    if (l < 1 || l >= m.G.tap_count()) throw Error(Errc::ConfigInvalid, "nce layer " + std::to_string(l) + " out of range");
  Rng rng(derive_seed(cfg.seed, "train"));
  nn::Adam opt_g(cfg.beta1, cfg.beta2), opt_d(cfg.beta1, cfg.beta2), opt_h(cfg.beta1, cfg.beta2);

  Checkpoint state;
  state.kind = "qsattn";
  state.config = cfg;
  auto snapshot = [&] {
    state.arrays.clear();
    state.extra = nlohmann::json::object();
    store_params(state, m.G.params);
    store_params(state, m.D.params);
    store_params(state, m.H);
    store_adam(state, "gen", opt_g);
    store_adam(state, "disc", opt_d);
    store_adam(state, "head", opt_h);
    state.rng_state = rng.state();
  };
  if (resume_from) {
    detail::check_resume(*resume_from, state.kind, cfg);
    load_params(*resume_from, m.G.params);
    load_params(*resume_from, m.D.params);
    load_params(*resume_from, m.H);
    load_adam(*resume_from, "gen", opt_g);
    load_adam(*resume_from, "disc", opt_d);
    load_adam(*resume_from, "head", opt_h);
    rng.set_state(resume_from->rng_state);
    state.epoch = resume_from->epoch;
    state.loss_history = resume_from->loss_history;
  }
  snapshot();

  const int iters = detail::iterations(cfg, slices_s.size(), slices_t.size());
  const double inv_b = 1.0 / cfg.batch_size;
  const double nce_w = cfg.lambda_nce * (cfg.nce_idt ? 0.5 : 1.0);
  for (int epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    if (hooks.stop_after_epoch >= 0 && epoch >= hooks.stop_after_epoch) break;
    const double lr = nn::linear_decay_lr(cfg.lr, epoch, cfg.epochs);
    detail::EpochMeans means;
    for (int it = 0; it < iters; ++it) {
      std::vector<nn::Tensor> reals_s, reals_t;
      for (int b = 0; b < cfg.batch_size; ++b) {
        reals_s.push_back(detail::slice_tensor(slices_s[rng.below(slices_s.size())]));
        reals_t.push_back(detail::slice_tensor(slices_t[rng.below(slices_t.size())]));
      }
      std::map<std::string, double> terms;
      try {
        std::vector<nn::Tensor> fakes;
        for (int b = 0; b < cfg.batch_size; ++b) fakes.push_back(m.G.forward(reals_s[b]));

        // Discriminator step.
        m.D.params.set_requires_grad(true);
        m.D.params.zero_grad();
        for (int b = 0; b < cfg.batch_size; ++b) {
          nn::Tensor d_real = m.D.forward(reals_t[b]);
          nn::Tensor d_fake = m.D.forward(fakes[b].detach());
          const auto a1 = adversarial_loss(detail::as_double(d_real), true);
          const auto a2 = adversarial_loss(detail::as_double(d_fake), false);
          nn::backward({{d_real, detail::scaled_seed(a1.grads.at("d_out"), 0.5 * inv_b)},
                        {d_fake, detail::scaled_seed(a2.grads.at("d_out"), 0.5 * inv_b)}});
          terms["D"] += 0.5 * (a1.value + a2.value) * inv_b;
        }
        opt_d.step(m.D.params, lr);

        // Generator step, discriminator frozen.
        m.D.params.set_requires_grad(false);
        m.G.params.zero_grad();
        m.H.zero_grad();
        for (int b = 0; b < cfg.batch_size; ++b) {
          std::vector<std::pair<nn::Tensor, std::vector<float>>> seeds;
          nn::Tensor d_fake = m.D.forward(fakes[b]);
          const auto adv = adversarial_loss(detail::as_double(d_fake), true);
          seeds.emplace_back(d_fake, detail::scaled_seed(adv.grads.at("d_out"), inv_b));
          terms["adv"] += adv.value * inv_b;
          if (cfg.lambda_nce > 0) {
            const double nce = qsattn_nce_term(m.G, reals_s[b], fakes[b], cfg, rng, nce_w * inv_b, seeds,
                                               hooks.nce_trans_equals_src, &m.heads);
            terms["nce"] += nce * inv_b;
            if (cfg.nce_idt) {
              nn::Tensor idt = m.G.forward(reals_t[b]);
              const double nce_y = qsattn_nce_term(m.G, reals_t[b], idt, cfg, rng, nce_w * inv_b, seeds,
                                                   hooks.nce_trans_equals_src, &m.heads);
              terms["nce_idt"] += nce_y * inv_b;
            }
          }
          nn::backward(seeds);
        }
        opt_g.step(m.G.params, lr);
        if (!m.heads.empty()) opt_h.step(m.H, lr);
        m.D.params.set_requires_grad(true);
      } catch (const Error& e) {
        if (e.code() != Errc::NonFiniteInput) throw;
        detail::diverged(hooks, state, epoch);
      }
      if (!detail::all_finite(terms)) detail::diverged(hooks, state, epoch);
      means.add(terms);
    }
    state.loss_history.push_back(means.mean());
    state.epoch = epoch + 1;
    snapshot();
    if (hooks.on_epoch) hooks.on_epoch(state);
  }
  return state;
}

/// Rebuilds the S->T generator stored in a translator checkpoint.
inline nn::ResnetGenerator load_translator(const Checkpoint& ckpt) {
  if (ckpt.kind != "cyclegan" && ckpt.kind != "qsattn")
    throw Error(Errc::IncompatibleCheckpoint, "checkpoint kind " + ckpt.kind + " holds no S->T generator");
  TrainConfig cfg;
  try {
    cfg = ckpt.config.get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::IncompatibleCheckpoint, std::string("translator config: ") + e.what());
  }
  Rng rng(0);
  nn::ResnetGenerator g(cfg.generator, rng, "G.");
  load_params(ckpt, g.params);
  return g;
}

/// Slice-wise S->T translation of a preprocessed volume. Each axial slice is
/// center-cropped to `crop` (full slice when {0,0}), resized to the
/// checkpoint's image_size, translated, and merged back onto the input grid.
inline Volume translate_volume(const Checkpoint& ckpt, const Volume& vol, std::array<int, 2> crop = {0, 0}) {
  validate(vol);
  const nn::ResnetGenerator g = load_translator(ckpt);
  const int image_size = ckpt.config.at("image_size").get<int>();
  if (crop[0] == 0) crop = {vol.shape[1], vol.shape[2]};
  auto slices = prepare_slices(vol, crop, image_size);
  nn::NoGradGuard ng;
  for (auto& s : slices) {
    nn::Tensor y = g.forward(detail::slice_tensor(s));
    s.data = y.value();
  }
  Volume out = merge_slices(slices, meta_of(vol));
  for (float& v : out.data) v = std::clamp(v, -1.0f, 1.0f);
  return out;
}

}  // namespace xmoda
