#pragma once

// Differentiable ops on (C, H, W) and (C, D, H, W) tensors, batch size 1.

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "xmoda/linalg.hpp"
#include "xmoda/nn/tensor.hpp"

namespace xmoda::nn {

using Vec3i = std::array<int, 3>;  // (d, h, w)

namespace detail {

using RowMajorF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Spatial extent of a channel-first tensor; rank-3 tensors have depth 1.
inline std::array<std::int64_t, 3> spatial(const Shape& s) {
  if (s.size() == 3) return {1, s[1], s[2]};
  if (s.size() == 4) return {s[1], s[2], s[3]};
  throw Error(Errc::ShapeMismatch, "expected a (C,H,W) or (C,D,H,W) tensor, got " + shape_str(s));
}

inline Shape with_spatial(std::int64_t c, const std::array<std::int64_t, 3>& sp, std::size_t rank) {
  if (rank == 3) return {c, sp[1], sp[2]};
  return {c, sp[0], sp[1], sp[2]};
}

struct ConvGeom {
  std::int64_t cin, cout;
  std::array<std::int64_t, 3> in, out, k, s, p;
  std::int64_t rows() const { return cin * k[0] * k[1] * k[2]; }
  std::int64_t in_plane() const { return in[0] * in[1] * in[2]; }
  std::int64_t out_plane() const { return out[0] * out[1] * out[2]; }
  bool pointwise() const {
    return k[0] == 1 && k[1] == 1 && k[2] == 1 && s[0] == 1 && s[1] == 1 && s[2] == 1 && p[0] == 0 && p[1] == 0 &&
           p[2] == 0;
  }
};

inline void im2col(const float* x, const ConvGeom& g, float* cols) {
  const std::int64_t P = g.out_plane();
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < g.cin; ++c) {
    const float* xc = x + c * g.in_plane();
    for (std::int64_t kz = 0; kz < g.k[0]; ++kz)
      for (std::int64_t ky = 0; ky < g.k[1]; ++ky)
        for (std::int64_t kx = 0; kx < g.k[2]; ++kx, ++row) {
          float* dst = cols + row * P;
          // Valid output-x range for this kx.
          std::int64_t ox_lo = 0, ox_hi = g.out[2];
          while (ox_lo < ox_hi && ox_lo * g.s[2] - g.p[2] + kx < 0) ++ox_lo;
          while (ox_hi > ox_lo && (ox_hi - 1) * g.s[2] - g.p[2] + kx >= g.in[2]) --ox_hi;
          for (std::int64_t oz = 0; oz < g.out[0]; ++oz) {
            const std::int64_t iz = oz * g.s[0] - g.p[0] + kz;
            for (std::int64_t oy = 0; oy < g.out[1]; ++oy) {
              float* d = dst + (oz * g.out[1] + oy) * g.out[2];
              const std::int64_t iy = oy * g.s[1] - g.p[1] + ky;
              if (iz < 0 || iz >= g.in[0] || iy < 0 || iy >= g.in[1]) {
                std::fill(d, d + g.out[2], 0.0f);
                continue;
              }
              const float* src = xc + (iz * g.in[1] + iy) * g.in[2] - g.p[2] + kx;
              std::fill(d, d + ox_lo, 0.0f);
              if (g.s[2] == 1) {
                std::copy(src + ox_lo, src + ox_hi, d + ox_lo);
              } else {
                for (std::int64_t ox = ox_lo; ox < ox_hi; ++ox) d[ox] = src[ox * g.s[2]];
              }
              std::fill(d + ox_hi, d + g.out[2], 0.0f);
            }
          }
        }
  }
}

inline void col2im(const float* cols, const ConvGeom& g, float* dx) {
  const std::int64_t P = g.out_plane();
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < g.cin; ++c) {
    float* xc = dx + c * g.in_plane();
    for (std::int64_t kz = 0; kz < g.k[0]; ++kz)
      for (std::int64_t ky = 0; ky < g.k[1]; ++ky)
        for (std::int64_t kx = 0; kx < g.k[2]; ++kx, ++row) {
          const float* srcrow = cols + row * P;
          std::int64_t ox_lo = 0, ox_hi = g.out[2];
          while (ox_lo < ox_hi && ox_lo * g.s[2] - g.p[2] + kx < 0) ++ox_lo;
          while (ox_hi > ox_lo && (ox_hi - 1) * g.s[2] - g.p[2] + kx >= g.in[2]) --ox_hi;
          for (std::int64_t oz = 0; oz < g.out[0]; ++oz) {
            const std::int64_t iz = oz * g.s[0] - g.p[0] + kz;
            if (iz < 0 || iz >= g.in[0]) continue;
            for (std::int64_t oy = 0; oy < g.out[1]; ++oy) {
              const std::int64_t iy = oy * g.s[1] - g.p[1] + ky;
              if (iy < 0 || iy >= g.in[1]) continue;
              const float* s = srcrow + (oz * g.out[1] + oy) * g.out[2];
              float* d = xc + (iz * g.in[1] + iy) * g.in[2] - g.p[2] + kx;
              for (std::int64_t ox = ox_lo; ox < ox_hi; ++ox) d[ox * g.s[2]] += s[ox];
            }
          }
        }
  }
}

}  // namespace detail

/// N-d convolution with zero padding. `x` is (Cin, [D,] H, W); `w` is
/// (Cout, Cin, [kd,] kh, kw); `b` is (Cout) or undefined.
inline Tensor conv(const Tensor& x, const Tensor& w, const Tensor& b, Vec3i stride = {1, 1, 1},
                   Vec3i pad = {0, 0, 0}) {
  const std::size_t rank = x.rank();
  if (w.rank() != rank + 1) throw Error(Errc::ShapeMismatch, "conv weight rank does not match input");
  if (w.dim(1) != x.dim(0)) throw Error(Errc::ShapeMismatch, "conv input channels mismatch");
  detail::ConvGeom g{};
  g.cin = x.dim(0);
  g.cout = w.dim(0);
  g.in = detail::spatial(x.shape());
  if (rank == 3) {
    g.k = {1, w.dim(2), w.dim(3)};
    g.s = {1, stride[1], stride[2]};
    g.p = {0, pad[1], pad[2]};
  } else {
    g.k = {w.dim(2), w.dim(3), w.dim(4)};
    g.s = {stride[0], stride[1], stride[2]};
    g.p = {pad[0], pad[1], pad[2]};
  }
  for (int a = 0; a < 3; ++a) {
    g.out[a] = (g.in[a] + 2 * g.p[a] - g.k[a]) / g.s[a] + 1;
    if (g.out[a] < 1) throw Error(Errc::ShapeMismatch, "conv output would be empty for input " + shape_str(x.shape()));
  }
  const std::int64_t K = g.rows(), P = g.out_plane();

  std::vector<float> cols;
  const float* colp = x.value().data();
  if (!g.pointwise()) {
    cols.resize(static_cast<std::size_t>(K * P));
    detail::im2col(x.value().data(), g, cols.data());
    colp = cols.data();
  }
  std::vector<float> out(static_cast<std::size_t>(g.cout * P));
  {
    Eigen::Map<const detail::RowMajorF> W(w.value().data(), g.cout, K);
    Eigen::Map<const detail::RowMajorF> C(colp, K, P);
    Eigen::Map<detail::RowMajorF> O(out.data(), g.cout, P);
    linalg::product(O, W, C, false);
    if (b.defined())
      for (std::int64_t co = 0; co < g.cout; ++co) O.row(co).array() += b.value()[static_cast<std::size_t>(co)];
  }
  const bool keep_cols = w.requires_grad() && grad_enabled() && !g.pointwise();
  if (!keep_cols) std::vector<float>().swap(cols);

  std::vector<Tensor> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_result(detail::with_spatial(g.cout, g.out, rank), std::move(out), parents,
                     [g, cols = std::move(cols), has_bias = b.defined()](Node& self) {
                       const std::int64_t K = g.rows(), P = g.out_plane();
                       Node& xn = *self.parents[0];
                       Node& wn = *self.parents[1];
                       Eigen::Map<const detail::RowMajorF> GO(self.grad.data(), g.cout, P);
                       if (wn.requires_grad) {
                         const float* colp = g.pointwise() ? xn.value.data() : cols.data();
                         Eigen::Map<const detail::RowMajorF> C(colp, K, P);
                         Eigen::Map<detail::RowMajorF> GW(wn.grad.data(), g.cout, K);
                         linalg::product(GW, GO, C.transpose(), true);
                       }
                       if (has_bias && self.parents[2]->requires_grad) {
                         Node& bn = *self.parents[2];
                         for (std::int64_t co = 0; co < g.cout; ++co) {
                           const float* go = self.grad.data() + co * P;
                           float acc = 0.0f;
                           for (std::int64_t j = 0; j < P; ++j) acc += go[j];
                           bn.grad[static_cast<std::size_t>(co)] += acc;
                         }
                       }
                       if (xn.requires_grad) {
                         Eigen::Map<const detail::RowMajorF> W(wn.value.data(), g.cout, K);
                         if (g.pointwise()) {
                           Eigen::Map<detail::RowMajorF> GX(xn.grad.data(), K, P);
                           linalg::product(GX, W.transpose(), GO, true);
                         } else {
                           detail::RowMajorF dcols(K, P);
                           linalg::product(dcols, W.transpose(), GO, false);
                           detail::col2im(dcols.data(), g, xn.grad.data());
                         }
                       }
                     });
}

/// Per-channel normalization over all spatial positions (no affine part).
inline Tensor instance_norm(const Tensor& x, float eps = 1e-5f) {
  const std::int64_t c_count = x.dim(0);
  const std::int64_t s = x.numel() / c_count;
  std::vector<float> y(x.value().size());
  std::vector<float> inv_std(static_cast<std::size_t>(c_count));
  const float* xv = x.value().data();
  for (std::int64_t c = 0; c < c_count; ++c) {
    const float* xc = xv + c * s;
    double mean = 0.0;
    for (std::int64_t i = 0; i < s; ++i) mean += xc[i];
    mean /= static_cast<double>(s);
    double var = 0.0;
    for (std::int64_t i = 0; i < s; ++i) var += (xc[i] - mean) * (xc[i] - mean);
    var /= static_cast<double>(s);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(c)] = static_cast<float>(is);
    float* yc = y.data() + c * s;
    for (std::int64_t i = 0; i < s; ++i) yc[i] = static_cast<float>((xc[i] - mean) * is);
  }
  return make_result(x.shape(), std::move(y), {x}, [c_count, s, inv_std = std::move(inv_std)](Node& self) {
    Node& xn = *self.parents[0];
    for (std::int64_t c = 0; c < c_count; ++c) {
      const float* gy = self.grad.data() + c * s;
      const float* yc = self.value.data() + c * s;
      double mg = 0.0, mgy = 0.0;
      for (std::int64_t i = 0; i < s; ++i) {
        mg += gy[i];
        mgy += static_cast<double>(gy[i]) * yc[i];
      }
      mg /= static_cast<double>(s);
      mgy /= static_cast<double>(s);
      float* gx = xn.grad.data() + c * s;
      const float is = inv_std[static_cast<std::size_t>(c)];
      for (std::int64_t i = 0; i < s; ++i)
        gx[i] += static_cast<float>(is * (gy[i] - mg - yc[i] * mgy));
    }
  });
}

inline Tensor leaky_relu(const Tensor& x, float slope) {
  std::vector<float> y(x.value());
  for (float& v : y)
    if (v < 0) v *= slope;
  return make_result(x.shape(), std::move(y), {x}, [slope](Node& self) {
    Node& xn = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      xn.grad[i] += xn.value[i] > 0 ? self.grad[i] : slope * self.grad[i];
  });
}

inline Tensor relu(const Tensor& x) { return leaky_relu(x, 0.0f); }

inline Tensor tanh(const Tensor& x) {
  std::vector<float> y(x.value().size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::tanh(x.value()[i]);
  return make_result(x.shape(), std::move(y), {x}, [](Node& self) {
    Node& xn = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      xn.grad[i] += self.grad[i] * (1.0f - self.value[i] * self.value[i]);
  });
}

/// atanh(clamp(x, -limit, limit)); the inverse of the generator's output
/// squashing, used for its global identity skip.
inline Tensor atanh_clamped(const Tensor& x, float limit = 0.995f) {
  std::vector<float> y(x.value().size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::atanh(std::clamp(x.value()[i], -limit, limit));
  return make_result(x.shape(), std::move(y), {x}, [limit](Node& self) {
    Node& xn = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const float v = xn.value[i];
      if (v > -limit && v < limit) xn.grad[i] += self.grad[i] / (1.0f - v * v);
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw Error(Errc::ShapeMismatch, "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<float> y(a.value());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return make_result(a.shape(), std::move(y), {a, b}, [](Node& self) {
    for (int p = 0; p < 2; ++p) {
      Node& n = *self.parents[static_cast<std::size_t>(p)];
      if (!n.requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) n.grad[i] += self.grad[i];
    }
  });
}

/// Concatenate along the channel axis.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || detail::spatial(a.shape()) != detail::spatial(b.shape()))
    throw Error(Errc::ShapeMismatch, "concat: spatial extents differ");
  Shape s = a.shape();
  s[0] += b.dim(0);
  std::vector<float> y;
  y.reserve(a.value().size() + b.value().size());
  y.insert(y.end(), a.value().begin(), a.value().end());
  y.insert(y.end(), b.value().begin(), b.value().end());
  const std::size_t na = a.value().size();
  return make_result(std::move(s), std::move(y), {a, b}, [na](Node& self) {
    Node& an = *self.parents[0];
    Node& bn = *self.parents[1];
    if (an.requires_grad)
      for (std::size_t i = 0; i < na; ++i) an.grad[i] += self.grad[i];
    if (bn.requires_grad)
      for (std::size_t i = 0; i < bn.value.size(); ++i) bn.grad[i] += self.grad[na + i];
  });
}

/// Weighted sums over positions: out(c, i) = sum_p r(i, p) x(c, p), with r a
/// constant row-major (k, P) matrix. Output shape (C, k, 1).
inline Tensor mix_positions(const Tensor& x, const std::vector<double>& r, std::int64_t k) {
  const std::int64_t c_count = x.dim(0);
  const std::int64_t p_count = static_cast<std::int64_t>(x.value().size()) / c_count;
  if (static_cast<std::int64_t>(r.size()) != k * p_count)
    throw Error(Errc::ShapeMismatch, "mix_positions: weights do not match " + shape_str(x.shape()));
  std::vector<float> y(static_cast<std::size_t>(c_count * k));
  for (std::int64_t c = 0; c < c_count; ++c) {
    const float* xc = x.value().data() + c * p_count;
    for (std::int64_t i = 0; i < k; ++i) {
      const double* ri = r.data() + i * p_count;
      double s = 0.0;
      for (std::int64_t p = 0; p < p_count; ++p) s += ri[p] * xc[p];
      y[static_cast<std::size_t>(c * k + i)] = static_cast<float>(s);
    }
  }
  return make_result({c_count, k, 1}, std::move(y), {x}, [r, k, c_count, p_count](Node& self) {
    Node& xn = *self.parents[0];
    for (std::int64_t c = 0; c < c_count; ++c)
      for (std::int64_t i = 0; i < k; ++i) {
        const float g = self.grad[static_cast<std::size_t>(c * k + i)];
        if (g == 0.0f) continue;
        const double* ri = r.data() + i * p_count;
        float* dx = xn.grad.data() + c * p_count;
        for (std::int64_t p = 0; p < p_count; ++p) dx[p] += static_cast<float>(ri[p] * g);
      }
  });
}

/// Nearest-neighbour upsampling by integer factors (d, h, w).
inline Tensor upsample_nearest(const Tensor& x, Vec3i factor) {
  const std::size_t rank = x.rank();
  if (rank == 3) factor[0] = 1;
  const auto in = detail::spatial(x.shape());
  const std::array<std::int64_t, 3> out{in[0] * factor[0], in[1] * factor[1], in[2] * factor[2]};
  const std::int64_t c_count = x.dim(0);
  const std::int64_t in_plane = in[0] * in[1] * in[2], out_plane = out[0] * out[1] * out[2];
  std::vector<float> y(static_cast<std::size_t>(c_count * out_plane));
  // Source index of every output position within one channel.
  std::vector<std::int64_t> src(static_cast<std::size_t>(out_plane));
  for (std::int64_t z = 0, o = 0; z < out[0]; ++z)
    for (std::int64_t yy = 0; yy < out[1]; ++yy)
      for (std::int64_t xx = 0; xx < out[2]; ++xx, ++o)
        src[static_cast<std::size_t>(o)] = ((z / factor[0]) * in[1] + yy / factor[1]) * in[2] + xx / factor[2];
  for (std::int64_t c = 0; c < c_count; ++c)
    for (std::int64_t o = 0; o < out_plane; ++o)
      y[static_cast<std::size_t>(c * out_plane + o)] = x.value()[static_cast<std::size_t>(c * in_plane + src[static_cast<std::size_t>(o)])];
  return make_result(detail::with_spatial(c_count, out, rank), std::move(y), {x},
                     [c_count, in_plane, out_plane, src = std::move(src)](Node& self) {
                       Node& xn = *self.parents[0];
                       for (std::int64_t c = 0; c < c_count; ++c)
                         for (std::int64_t o = 0; o < out_plane; ++o)
                           xn.grad[static_cast<std::size_t>(c * in_plane + src[static_cast<std::size_t>(o)])] +=
                               self.grad[static_cast<std::size_t>(c * out_plane + o)];
                     });
}

}  // namespace xmoda::nn
