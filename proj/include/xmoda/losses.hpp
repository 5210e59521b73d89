#pragma once

// Loss functions with analytic gradients, evaluated in double precision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "xmoda/error.hpp"
#include "xmoda/ndarray.hpp"

namespace xmoda {

struct LossValue {
  double value = 0.0;
  std::map<std::string, NdArray<double>> grads;
  /// Named additive parts of `value`, where a loss has more than one.
  std::map<std::string, double> terms;
};

namespace detail {

inline void require_finite(const NdArray<double>& a, const char* what) {
  if (!a.all_finite()) throw Error(Errc::NonFiniteInput, std::string(what) + " contains a non-finite value");
}

/// mean |a - b| and its gradient with respect to a.
inline double mean_abs_diff(const NdArray<double>& a, const NdArray<double>& b, NdArray<double>& grad) {
  const double n = static_cast<double>(a.numel());
  grad = NdArray<double>(a.shape);
  double acc = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    acc += std::abs(d);
    grad[i] = d > 0 ? 1.0 / n : (d < 0 ? -1.0 / n : 0.0);
  }
  return acc / n;
}

}  // namespace detail

/// Cycle-consistency loss, mean-reduced L1 per term:
///   mean|F(G(x_s)) - x_s| + mean|G(F(x_t)) - x_t|.
/// Gradients are returned for "fg_xs" and "gf_xt"; the L1 subgradient at an
/// exact tie is 0.
inline LossValue cycle_loss(const NdArray<double>& x_s, const NdArray<double>& x_t, const NdArray<double>& fg_xs,
                            const NdArray<double>& gf_xt) {
  if (fg_xs.shape != x_s.shape || gf_xt.shape != x_t.shape)
    throw Error(Errc::ShapeMismatch, "reconstruction shape differs from its input");
  if (x_s.numel() == 0 || x_t.numel() == 0) throw Error(Errc::ShapeMismatch, "empty image");
  LossValue out;
  NdArray<double> g_s, g_t;
  const double a = detail::mean_abs_diff(fg_xs, x_s, g_s);
  const double b = detail::mean_abs_diff(gf_xt, x_t, g_t);
  out.value = a + b;
  out.terms["source_cycle"] = a;
  out.terms["target_cycle"] = b;
  out.grads["fg_xs"] = std::move(g_s);
  out.grads["gf_xt"] = std::move(g_t);
  return out;
}

/// Anchor q, one positive and N-1 negatives, all of dimension D.
struct PatchSet {
  std::vector<double> q;
  std::vector<double> k_pos;
  std::vector<std::vector<double>> k_negs;
  double tau = 0.07;
};

/// InfoNCE over one PatchSet:
///   -log( exp(q.k+/tau) / (exp(q.k+/tau) + sum_i exp(q.k-_i/tau)) )
/// evaluated as logsumexp(l) - l_0 with max subtraction.
/// Gradients: "q" (D), "k_pos" (D), "k_negs" (N-1, D).
inline LossValue patchnce_loss(const PatchSet& ps) {
  const std::size_t d = ps.q.size();
  if (ps.k_negs.empty()) throw Error(Errc::InvalidArgument, "PatchSet needs at least one negative");
  if (!(ps.tau > 0.0) || !std::isfinite(ps.tau)) throw Error(Errc::InvalidArgument, "temperature must be positive");
  if (ps.k_pos.size() != d) throw Error(Errc::ShapeMismatch, "k_pos dimension differs from q");
  auto finite = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
  };
  if (!finite(ps.q) || !finite(ps.k_pos)) throw Error(Errc::NonFiniteInput, "PatchSet anchor/positive");
  for (const auto& k : ps.k_negs) {
    if (k.size() != d) throw Error(Errc::ShapeMismatch, "negative dimension differs from q");
    if (!finite(k)) throw Error(Errc::NonFiniteInput, "PatchSet negative");
  }

  auto dot = [d](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += a[i] * b[i];
    return s;
  };
  const std::size_t n = ps.k_negs.size() + 1;
  std::vector<double> logits(n);
  logits[0] = dot(ps.q, ps.k_pos) / ps.tau;
  for (std::size_t i = 1; i < n; ++i) logits[i] = dot(ps.q, ps.k_negs[i - 1]) / ps.tau;
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - m);
  const double lse = m + std::log(z);

  LossValue out;
  out.value = lse - logits[0];
  // dL/dl_i = p_i - [i == 0]
  std::vector<double> dl(n);
  for (std::size_t i = 0; i < n; ++i) dl[i] = std::exp(logits[i] - lse) - (i == 0 ? 1.0 : 0.0);

  NdArray<double> gq({static_cast<std::int64_t>(d)});
  NdArray<double> gk({static_cast<std::int64_t>(d)});
  NdArray<double> gn({static_cast<std::int64_t>(n - 1), static_cast<std::int64_t>(d)});
  for (std::size_t j = 0; j < d; ++j) {
    double acc = dl[0] * ps.k_pos[j];
    for (std::size_t i = 1; i < n; ++i) acc += dl[i] * ps.k_negs[i - 1][j];
    gq[j] = acc / ps.tau;
    gk[j] = dl[0] * ps.q[j] / ps.tau;
  }
  for (std::size_t i = 1; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      gn[static_cast<std::int64_t>((i - 1) * d + j)] = dl[i] * ps.q[j] / ps.tau;
  out.grads["q"] = std::move(gq);
  out.grads["k_pos"] = std::move(gk);
  out.grads["k_negs"] = std::move(gn);
  return out;
}

/// Least-squares GAN objective: mean((d_out - t)^2), t = 1 for "real".
inline LossValue adversarial_loss(const NdArray<double>& d_out, bool target_real) {
  detail::require_finite(d_out, "discriminator output");
  if (d_out.numel() == 0) throw Error(Errc::InvalidArgument, "empty discriminator output");
  const double t = target_real ? 1.0 : 0.0;
  const double n = static_cast<double>(d_out.numel());
  LossValue out;
  NdArray<double> g(d_out.shape);
  double acc = 0.0;
  for (std::int64_t i = 0; i < d_out.numel(); ++i) {
    const double r = d_out[i] - t;
    acc += r * r;
    g[i] = 2.0 * r / n;
  }
  out.value = acc / n;
  out.grads["d_out"] = std::move(g);
  return out;
}

/// Central-difference gradient of a scalar function.
inline NdArray<double> fd_gradient(const std::function<double(const NdArray<double>&)>& f, const NdArray<double>& x,
                                   double eps = 1e-5) {
  if (!(eps > 0.0)) throw Error(Errc::InvalidArgument, "eps must be positive");
  NdArray<double> g(x.shape);
  NdArray<double> probe = x;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = f(probe);
    probe[i] = orig - eps;
    const double fm = f(probe);
    probe[i] = orig;
    g[i] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

/// Soft-Dice + cross-entropy over logits shaped (classes, spatial...).
///
/// Dice term: 1 - mean over foreground classes c >= 1 of
///   (2 sum p_c g_c + eps) / (sum p_c + sum g_c + eps),  eps = 1e-5.
/// CE term: mean over voxels of -log softmax(logits)[label].
/// Gradient is returned as "logits".
inline LossValue dice_ce_loss(const NdArray<double>& logits, const std::vector<std::uint8_t>& labels,
                              double smooth = 1e-5) {
  if (logits.rank() < 2) throw Error(Errc::ShapeMismatch, "logits need a class axis and spatial axes");
  const std::int64_t c_count = logits.dim(0);
  const std::int64_t v_count = logits.numel() / std::max<std::int64_t>(c_count, 1);
  if (c_count < 2 || static_cast<std::int64_t>(labels.size()) != v_count)
    throw Error(Errc::ShapeMismatch, "labels do not match logits' spatial size");
  detail::require_finite(logits, "logits");
  for (auto l : labels)
    if (l >= c_count) throw Error(Errc::InvalidArgument, "label outside class range");

  NdArray<double> prob(logits.shape);
  double ce = 0.0;
  for (std::int64_t v = 0; v < v_count; ++v) {
    double m = logits[v];
    for (std::int64_t c = 1; c < c_count; ++c) m = std::max(m, logits[c * v_count + v]);
    double z = 0.0;
    for (std::int64_t c = 0; c < c_count; ++c) z += std::exp(logits[c * v_count + v] - m);
    const double lse = m + std::log(z);
    for (std::int64_t c = 0; c < c_count; ++c) prob[c * v_count + v] = std::exp(logits[c * v_count + v] - lse);
    ce += lse - logits[labels[static_cast<std::size_t>(v)] * v_count + v];
  }
  ce /= static_cast<double>(v_count);

  // dL/dp for the Dice term.
  NdArray<double> dp(logits.shape, 0.0);
  const std::int64_t n_fg = c_count - 1;
  double dice_sum = 0.0;
  for (std::int64_t c = 1; c < c_count; ++c) {
    double inter = 0.0, psum = 0.0, gsum = 0.0;
    for (std::int64_t v = 0; v < v_count; ++v) {
      const double p = prob[c * v_count + v];
      const double g = labels[static_cast<std::size_t>(v)] == c ? 1.0 : 0.0;
      inter += p * g;
      psum += p;
      gsum += g;
    }
    const double den = psum + gsum + smooth;
    const double num = 2.0 * inter + smooth;
    dice_sum += num / den;
    for (std::int64_t v = 0; v < v_count; ++v) {
      const double g = labels[static_cast<std::size_t>(v)] == c ? 1.0 : 0.0;
      dp[c * v_count + v] = -(2.0 * g * den - num) / (den * den) / static_cast<double>(n_fg);
    }
  }
  const double dice_term = 1.0 - dice_sum / static_cast<double>(n_fg);

  NdArray<double> grad(logits.shape);
  const double inv_v = 1.0 / static_cast<double>(v_count);
  for (std::int64_t v = 0; v < v_count; ++v) {
    double dot = 0.0;
    for (std::int64_t c = 0; c < c_count; ++c) dot += prob[c * v_count + v] * dp[c * v_count + v];
    const auto label = labels[static_cast<std::size_t>(v)];
    for (std::int64_t c = 0; c < c_count; ++c) {
      const double p = prob[c * v_count + v];
      grad[c * v_count + v] = p * (dp[c * v_count + v] - dot) + (p - (label == c ? 1.0 : 0.0)) * inv_v;
    }
  }

  LossValue out;
  out.value = dice_term + ce;
  out.terms["dice"] = dice_term;
  out.terms["ce"] = ce;
  out.grads["logits"] = std::move(grad);
  return out;
}

}  // namespace xmoda
