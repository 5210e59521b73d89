#pragma once

// Query-selected attention.
//
// Source features (C, H, W) are flattened to HW vectors of dimension C. The
// global attention matrix is the row softmax of their dot-product similarity.
// Rows are ranked by entropy, ascending; the k lowest-entropy rows are kept
// and used to route BOTH the source and the translated features, so the two
// domains are pooled with identical weights. The routed vectors feed the
// patch-wise contrastive loss.
//
// Memory: the attention matrix is HW x HW doubles. kMaxAttentionPositions
// bounds HW (32 x 32 feature maps, an 8 MiB matrix).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "xmoda/error.hpp"
#include "xmoda/linalg.hpp"
#include "xmoda/losses.hpp"
#include "xmoda/ndarray.hpp"
#include "xmoda/rng.hpp"

namespace xmoda {

inline constexpr std::int64_t kMaxAttentionPositions = 1024;

struct FeatureMap {
  NdArray<double> data;  // (C, H, W)
  int layer_id = 0;

  std::int64_t channels() const { return data.dim(0); }
  std::int64_t positions() const { return data.dim(1) * data.dim(2); }
};

/// Row-stochastic (HW, HW) matrix.
struct AttentionMatrix {
  std::int64_t n = 0;
  std::vector<double> data;

  double operator()(std::int64_t i, std::int64_t j) const { return data[static_cast<std::size_t>(i * n + j)]; }
};

struct EntropyVector {
  std::vector<double> data;
};

struct QuerySelection {
  std::vector<std::int64_t> indices;
  NdArray<double> reduced_attention;  // (k, HW), rows in selection order
};

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void check_feature_map(const FeatureMap& f) {
  if (f.data.rank() != 3 || f.data.dim(0) < 1 || f.data.dim(1) < 1 || f.data.dim(2) < 1)
    throw Error(Errc::ShapeMismatch, "feature map must be (C, H, W) with positive extents");
  if (!f.data.all_finite()) throw Error(Errc::NonFiniteInput, "feature map contains a non-finite value");
  if (f.positions() > kMaxAttentionPositions)
    throw Error(Errc::InvalidArgument, "feature map has " + std::to_string(f.positions()) +
                                           " positions; attention supports at most " +
                                           std::to_string(kMaxAttentionPositions));
}

/// (C, HW) view of a feature map.
inline Eigen::Map<const RowMatrix> channel_major(const FeatureMap& f) {
  return {f.data.data.data(), f.channels(), f.positions()};
}

}  // namespace detail

/// In-place, numerically stable softmax of each row of an (n, n) logit matrix.
inline AttentionMatrix row_softmax(std::int64_t n, std::vector<double> logits) {
  AttentionMatrix a{n, std::move(logits)};
  for (std::int64_t i = 0; i < n; ++i) {
    double* row = a.data.data() + i * n;
    const double m = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - m);
      z += row[j];
    }
    for (std::int64_t j = 0; j < n; ++j) row[j] /= z;
  }
  return a;
}

inline AttentionMatrix global_attention(const FeatureMap& feat) {
  detail::check_feature_map(feat);
  const auto x = detail::channel_major(feat);
  const std::int64_t n = feat.positions();
  std::vector<double> logits(static_cast<std::size_t>(n * n));
  Eigen::Map<detail::RowMatrix> s(logits.data(), n, n);
  linalg::product(s, x.transpose(), x, false);
  return row_softmax(n, std::move(logits));
}

/// H(i) = -sum_j A(i,j) ln A(i,j), with 0 ln 0 = 0.
inline EntropyVector row_entropy(const AttentionMatrix& a) {
  EntropyVector h;
  h.data.resize(static_cast<std::size_t>(a.n));
  for (std::int64_t i = 0; i < a.n; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < a.n; ++j) {
      const double p = a(i, j);
      if (p > 0.0) acc -= p * std::log(p);
    }
    h.data[static_cast<std::size_t>(i)] = std::clamp(acc, 0.0, std::log(static_cast<double>(a.n)));
  }
  return h;
}

/// The k rows of smallest entropy, ordered by (entropy, index) ascending.
inline QuerySelection select_queries(const AttentionMatrix& a, const EntropyVector& h, std::int64_t k) {
  if (k < 1 || k > a.n) throw Error(Errc::KOutOfRange, "k=" + std::to_string(k) + " outside [1, " + std::to_string(a.n) + "]");
  if (static_cast<std::int64_t>(h.data.size()) != a.n) throw Error(Errc::ShapeMismatch, "entropy length");
  std::vector<std::int64_t> order(static_cast<std::size_t>(a.n));
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](std::int64_t x, std::int64_t y) {
    const double hx = h.data[static_cast<std::size_t>(x)], hy = h.data[static_cast<std::size_t>(y)];
    return hx < hy || (hx == hy && x < y);
  });
  QuerySelection sel;
  sel.indices.assign(order.begin(), order.begin() + k);
  sel.reduced_attention = NdArray<double>({k, a.n});
  for (std::int64_t r = 0; r < k; ++r)
    std::copy_n(a.data.begin() + sel.indices[static_cast<std::size_t>(r)] * a.n, a.n,
                sel.reduced_attention.data.begin() + r * a.n);
  return sel;
}

/// Routed features: reduced_attention (k, HW) x features (HW, C) -> (k, C).
inline NdArray<double> route_features(const FeatureMap& feat, const QuerySelection& sel) {
  const std::int64_t k = sel.reduced_attention.dim(0);
  const std::int64_t n = sel.reduced_attention.dim(1);
  if (feat.positions() != n) throw Error(Errc::ShapeMismatch, "selection and feature map disagree on HW");
  NdArray<double> out({k, feat.channels()});
  Eigen::Map<const detail::RowMatrix> r(sel.reduced_attention.data.data(), k, n);
  Eigen::Map<detail::RowMatrix> o(out.data.data(), k, feat.channels());
  linalg::product(o, r, detail::channel_major(feat).transpose(), false);
  return out;
}

/// For each of k queries, n_neg distinct other query slots drawn with a
/// partial Fisher-Yates shuffle from Rng(seed), queries in order.
inline std::vector<std::vector<std::int64_t>> sample_negatives(std::int64_t k, std::int64_t n_neg, std::uint64_t seed) {
  if (n_neg < 1 || n_neg > k - 1)
    throw Error(Errc::TooFewNegatives, "need " + std::to_string(n_neg) + " negatives from " + std::to_string(k - 1) +
                                           " other selected queries");
  Rng rng(seed);
  std::vector<std::vector<std::int64_t>> out(static_cast<std::size_t>(k));
  std::vector<std::int64_t> pool(static_cast<std::size_t>(k - 1));
  for (std::int64_t i = 0; i < k; ++i) {
    for (std::int64_t j = 0, w = 0; j < k; ++j)
      if (j != i) pool[static_cast<std::size_t>(w++)] = j;
    for (std::int64_t t = 0; t < n_neg; ++t) {
      const auto pick = t + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(k - 1 - t)));
      std::swap(pool[static_cast<std::size_t>(t)], pool[static_cast<std::size_t>(pick)]);
    }
    out[static_cast<std::size_t>(i)].assign(pool.begin(), pool.begin() + n_neg);
  }
  return out;
}

namespace detail {

inline std::vector<double> unit_row(const NdArray<double>& m, std::int64_t row) {
  const std::int64_t c = m.dim(1);
  std::vector<double> v(m.data.begin() + row * c, m.data.begin() + (row + 1) * c);
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::max(std::sqrt(norm), 1e-12);
  for (double& x : v) x /= norm;
  return v;
}

}  // namespace detail

/// One PatchSet per selected query: q from the translated features, k+ and
/// the negatives from the source features, all routed through the same
/// source-derived attention rows and L2-normalized.
inline std::vector<PatchSet> build_patch_sets(const FeatureMap& feat_src, const FeatureMap& feat_trans,
                                              const QuerySelection& sel, double tau, std::int64_t n_neg,
                                              std::uint64_t rng_seed) {
  if (feat_src.data.shape != feat_trans.data.shape)
    throw Error(Errc::ShapeMismatch, "source and translated feature maps differ in shape");
  detail::check_feature_map(feat_src);
  detail::check_feature_map(feat_trans);
  const std::int64_t k = static_cast<std::int64_t>(sel.indices.size());
  const auto negs = sample_negatives(k, n_neg, rng_seed);
  const auto src = route_features(feat_src, sel);
  const auto trans = route_features(feat_trans, sel);
  std::vector<std::vector<double>> src_unit(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < k; ++i) src_unit[static_cast<std::size_t>(i)] = detail::unit_row(src, i);

  std::vector<PatchSet> out(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < k; ++i) {
    PatchSet& ps = out[static_cast<std::size_t>(i)];
    ps.tau = tau;
    ps.q = detail::unit_row(trans, i);
    ps.k_pos = src_unit[static_cast<std::size_t>(i)];
    for (auto j : negs[static_cast<std::size_t>(i)]) ps.k_negs.push_back(src_unit[static_cast<std::size_t>(j)]);
  }
  return out;
}

/// Back-propagate gradients on the normalized queries (k, C) to the
/// translated feature map (C, H, W). `routed_trans` is route_features of the
/// translated map (before normalization).
inline NdArray<double> query_feature_grad(const QuerySelection& sel, const NdArray<double>& routed_trans,
                                          const NdArray<double>& grad_q, const Shape& feat_shape) {
  const std::int64_t k = routed_trans.dim(0);
  const std::int64_t c = routed_trans.dim(1);
  const std::int64_t n = sel.reduced_attention.dim(1);
  NdArray<double> du({k, c});
  for (std::int64_t i = 0; i < k; ++i) {
    const double* u = routed_trans.data.data() + i * c;
    const double* g = grad_q.data.data() + i * c;
    double norm = 0.0;
    for (std::int64_t j = 0; j < c; ++j) norm += u[j] * u[j];
    norm = std::sqrt(norm);
    if (norm < 1e-12) continue;
    double qg = 0.0;
    for (std::int64_t j = 0; j < c; ++j) qg += u[j] / norm * g[j];
    for (std::int64_t j = 0; j < c; ++j) du[i * c + j] = (g[j] - u[j] / norm * qg) / norm;
  }
  NdArray<double> out(feat_shape);
  Eigen::Map<const detail::RowMatrix> r(sel.reduced_attention.data.data(), k, n);
  Eigen::Map<const detail::RowMatrix> dum(du.data.data(), k, c);
  Eigen::Map<detail::RowMatrix> o(out.data.data(), c, n);
  linalg::product(o, dum.transpose(), r, false);
  return out;
}

namespace detail {

// Gradient through v -> v / |v| for one row.
inline void unit_row_backward(const double* u, const double* g, std::int64_t c, double* du) {
  double norm = 0.0;
  for (std::int64_t j = 0; j < c; ++j) norm += u[j] * u[j];
  norm = std::sqrt(norm);
  if (norm < 1e-12) return;
  double qg = 0.0;
  for (std::int64_t j = 0; j < c; ++j) qg += u[j] / norm * g[j];
  for (std::int64_t j = 0; j < c; ++j) du[j] += (g[j] - u[j] / norm * qg) / norm;
}

}  // namespace detail

struct RoutedNceResult {
  double loss = 0.0;
  NdArray<double> grad_src;    // (k, D), before normalization
  NdArray<double> grad_trans;  // (k, D)
};

/// PatchNCE over already-routed (and possibly projected) query rows: row i of
/// `trans` is the query, row i of `src` its positive, n_neg other source rows
/// the negatives. Mean over rows.
inline RoutedNceResult routed_nce(const NdArray<double>& src, const NdArray<double>& trans, double tau,
                                  std::int64_t n_neg, std::uint64_t seed) {
  if (src.shape != trans.shape || src.shape.size() != 2)
    throw Error(Errc::ShapeMismatch, "routed_nce expects two (k, D) matrices of equal shape");
  const std::int64_t k = src.dim(0), d = src.dim(1);
  const auto negs = sample_negatives(k, n_neg, seed);
  std::vector<std::vector<double>> su(static_cast<std::size_t>(k)), tu(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < k; ++i) {
    su[static_cast<std::size_t>(i)] = detail::unit_row(src, i);
    tu[static_cast<std::size_t>(i)] = detail::unit_row(trans, i);
  }
  NdArray<double> gsu({k, d}), gtu({k, d});
  RoutedNceResult res;
  const double inv_k = 1.0 / static_cast<double>(k);
  for (std::int64_t i = 0; i < k; ++i) {
    const auto& ni = negs[static_cast<std::size_t>(i)];
    PatchSet ps;
    ps.tau = tau;
    ps.q = tu[static_cast<std::size_t>(i)];
    ps.k_pos = su[static_cast<std::size_t>(i)];
    for (auto j : ni) ps.k_negs.push_back(su[static_cast<std::size_t>(j)]);
    const auto lv = patchnce_loss(ps);
    res.loss += lv.value * inv_k;
    const auto& gq = lv.grads.at("q");
    const auto& gk = lv.grads.at("k_pos");
    const auto& gn = lv.grads.at("k_negs");
    for (std::int64_t j = 0; j < d; ++j) {
      gtu[i * d + j] += gq[j] * inv_k;
      gsu[i * d + j] += gk[j] * inv_k;
    }
    for (std::size_t t = 0; t < ni.size(); ++t)
      for (std::int64_t j = 0; j < d; ++j)
        gsu[ni[t] * d + j] += gn[static_cast<std::int64_t>(t) * d + j] * inv_k;
  }
  res.grad_src = NdArray<double>({k, d});
  res.grad_trans = NdArray<double>({k, d});
  for (std::int64_t i = 0; i < k; ++i) {
    detail::unit_row_backward(src.data.data() + i * d, gsu.data.data() + i * d, d, res.grad_src.data.data() + i * d);
    detail::unit_row_backward(trans.data.data() + i * d, gtu.data.data() + i * d, d,
                              res.grad_trans.data.data() + i * d);
  }
  return res;
}

struct NceLayerResult {
  double loss = 0.0;              // mean PatchNCE over the layer's queries
  NdArray<double> grad_trans;     // d loss / d translated features, (C, H, W)
  std::vector<std::int64_t> selected;
};

/// Full query-selected contrastive loss for one encoder layer. k queries are
/// selected (k = HW / 4 when `k` is 0) and each is contrasted against
/// min(n_neg, k - 1) negatives.
inline NceLayerResult nce_layer_loss(const FeatureMap& feat_src, const FeatureMap& feat_trans, double tau,
                                     std::int64_t n_neg, std::uint64_t seed, std::int64_t k = 0) {
  const auto attn = global_attention(feat_src);
  const auto ent = row_entropy(attn);
  if (k == 0) k = std::max<std::int64_t>(2, attn.n / 4);
  const auto sel = select_queries(attn, ent, k);
  const std::int64_t negs = std::min(n_neg, k - 1);
  const auto sets = build_patch_sets(feat_src, feat_trans, sel, tau, negs, seed);
  const auto routed = route_features(feat_trans, sel);

  NceLayerResult res;
  res.selected = sel.indices;
  NdArray<double> gq({k, feat_src.channels()});
  const double inv_k = 1.0 / static_cast<double>(k);
  for (std::int64_t i = 0; i < k; ++i) {
    const auto lv = patchnce_loss(sets[static_cast<std::size_t>(i)]);
    res.loss += lv.value * inv_k;
    const auto& g = lv.grads.at("q");
    for (std::int64_t j = 0; j < g.numel(); ++j) gq[i * g.numel() + j] = g[j] * inv_k;
  }
  res.grad_trans = query_feature_grad(sel, routed, gq, feat_trans.data.shape);
  return res;
}

}  // namespace xmoda
