#pragma once

// Segmentation metrics (Dice, ASSD) and the paired t-test.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "xmoda/error.hpp"
#include "xmoda/volume_io.hpp"

namespace xmoda {

inline constexpr int kLabelVS = 1;
inline constexpr int kLabelCochlea = 2;

/// 2|A & B| / (|A| + |B|); both empty -> 1, exactly one empty -> 0.
inline double dice(const LabelMask& pred, const LabelMask& gt, int label) {
  if (pred.shape != gt.shape) throw Error(Errc::ShapeMismatch, "dice: mask shapes differ");
  if (label < 1 || label > 2) throw Error(Errc::InvalidArgument, "dice: label must be 1 or 2");
  std::int64_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool pa = pred.data[i] == label;
    const bool pb = gt.data[i] == label;
    a += pa;
    b += pb;
    both += pa && pb;
  }
  if (a == 0 && b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

/// Foreground voxels with at least one face neighbour outside the label
/// (voxels on the volume boundary count as having one).
inline std::vector<std::uint8_t> surface_of(const LabelMask& m, int label) {
  std::vector<std::uint8_t> s(m.data.size(), 0);
  const auto [nz, ny, nx] = m.shape;
  auto fg = [&](int z, int y, int x) {
    if (z < 0 || y < 0 || x < 0 || z >= nz || y >= ny || x >= nx) return false;
    return m.at(z, y, x) == label;
  };
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        if (!fg(z, y, x)) continue;
        if (!fg(z - 1, y, x) || !fg(z + 1, y, x) || !fg(z, y - 1, x) || !fg(z, y + 1, x) || !fg(z, y, x - 1) ||
            !fg(z, y, x + 1))
          s[static_cast<std::size_t>(m.index(z, y, x))] = 1;
      }
  return s;
}

namespace detail {

/// Exact 1-D squared distance transform (lower envelope of parabolas) over
/// samples at physical positions i * step. `f` holds +inf for "no site".
inline void edt_1d(std::vector<double>& f, double step, std::vector<int>& v, std::vector<double>& zb,
                   std::vector<double>& out) {
  const int n = static_cast<int>(f.size());
  constexpr double inf = std::numeric_limits<double>::infinity();
  int k = -1;
  auto pos = [step](int i) { return i * step; };
  for (int q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      zb[0] = -inf;
      zb[1] = inf;
      continue;
    }
    double s = 0.0;
    while (true) {
      const int p = v[k];
      s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
      if (s > zb[k]) break;
      --k;  // zb[0] is -inf, so k never drops below 0
    }
    ++k;
    v[k] = q;
    zb[k] = s;
    zb[k + 1] = inf;
  }
  if (k < 0) {
    std::fill(out.begin(), out.end(), inf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (zb[j + 1] < pos(q)) ++j;
    const double d = pos(q) - pos(v[j]);
    out[q] = d * d + f[v[j]];
  }
}

/// Squared Euclidean distance (mm^2) from every voxel to the nearest site.
inline std::vector<double> squared_distance_to(const std::vector<std::uint8_t>& sites, const Index3& shape,
                                               const Spacing3& spacing) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> d(sites.size());
  for (std::size_t i = 0; i < sites.size(); ++i) d[i] = sites[i] ? 0.0 : inf;
  const std::array<std::int64_t, 3> stride{std::int64_t{shape[1]} * shape[2], shape[2], 1};
  for (int axis = 0; axis < 3; ++axis) {
    const int n = shape[axis];
    std::vector<double> f(static_cast<std::size_t>(n)), out(static_cast<std::size_t>(n)), zb(static_cast<std::size_t>(n + 1));
    std::vector<int> v(static_cast<std::size_t>(n));
    const int a1 = axis == 0 ? 1 : 0;
    const int a2 = axis == 2 ? 1 : 2;
    for (int p = 0; p < shape[a1]; ++p)
      for (int q = 0; q < shape[a2]; ++q) {
        const std::int64_t base = p * stride[a1] + q * stride[a2];
        for (int i = 0; i < n; ++i) f[i] = d[static_cast<std::size_t>(base + i * stride[axis])];
        edt_1d(f, spacing[axis], v, zb, out);
        for (int i = 0; i < n; ++i) d[static_cast<std::size_t>(base + i * stride[axis])] = out[i];
      }
  }
  return d;
}

inline double mean_surface_distance(const std::vector<std::uint8_t>& from, const std::vector<double>& sq_dist_to) {
  double acc = 0.0;
  std::int64_t n = 0;
  for (std::size_t i = 0; i < from.size(); ++i)
    if (from[i]) {
      acc += std::sqrt(sq_dist_to[i]);
      ++n;
    }
  return acc / static_cast<double>(n);
}

}  // namespace detail

/// Average symmetric surface distance in mm: the mean of the two directed
/// average surface-to-surface distances.
inline double assd(const LabelMask& pred, const LabelMask& gt, int label, const Spacing3& spacing) {
  if (pred.shape != gt.shape) throw Error(Errc::ShapeMismatch, "assd: mask shapes differ");
  const auto sa = surface_of(pred, label);
  const auto sb = surface_of(gt, label);
  const bool empty_a = std::none_of(sa.begin(), sa.end(), [](auto v) { return v != 0; });
  const bool empty_b = std::none_of(sb.begin(), sb.end(), [](auto v) { return v != 0; });
  if (empty_a || empty_b) throw Error(Errc::EmptyMask, "assd undefined: label " + std::to_string(label) + " absent");
  const auto da = detail::squared_distance_to(sa, pred.shape, spacing);
  const auto db = detail::squared_distance_to(sb, gt.shape, spacing);
  return 0.5 * (detail::mean_surface_distance(sa, db) + detail::mean_surface_distance(sb, da));
}

// ---------------------------------------------------------------------------
// Student t distribution.

namespace detail {

/// Continued fraction for the regularized incomplete beta function
/// (modified Lentz evaluation).
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace detail

/// I_x(a, b), the regularized incomplete beta function.
inline double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

/// Two-sided tail probability P(|T| >= |t|) for Student's t with df degrees
/// of freedom: I_{df / (df + t^2)}(df / 2, 1 / 2).
inline double student_t_two_sided_p(double t, double df) {
  if (!std::isfinite(t)) return 0.0;
  return incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
}

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  int df = 0;
};

/// Paired two-sided t-test on xs - ys.
inline TTestResult paired_ttest(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw Error(Errc::LengthMismatch, "paired samples differ in length");
  const std::size_t n = xs.size();
  if (n < 2) throw Error(Errc::TooFewSamples, "paired t-test needs n >= 2");
  std::vector<double> d(n);
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    d[i] = xs[i] - ys[i];
    mean += d[i];
  }
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (!(sd > 0.0)) throw Error(Errc::ZeroVariance, "differences have zero variance");
  TTestResult r;
  r.df = static_cast<int>(n - 1);
  r.t = mean * std::sqrt(static_cast<double>(n)) / sd;
  r.p = student_t_two_sided_p(r.t, r.df);
  return r;
}

// ---------------------------------------------------------------------------
// Table-shaped evaluation.

struct CaseMetrics {
  std::string case_id;
  double dice_vs = 0.0;
  double dice_cochlea = 0.0;
  double dice_mean = 0.0;
  std::optional<double> assd_vs;
  std::optional<double> assd_cochlea;

  bool operator==(const CaseMetrics&) const = default;
};

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;
  int n = 0;

  bool operator==(const MeanSd&) const = default;
};

inline MeanSd mean_sd(const std::vector<double>& v) {
  MeanSd r;
  r.n = static_cast<int>(v.size());
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

struct ResultsTable {
  std::vector<CaseMetrics> cases;
  // Aggregates in column order of table_columns().
  std::vector<MeanSd> aggregate;

  bool operator==(const ResultsTable&) const = default;

  static const std::vector<std::string>& table_columns() {
    static const std::vector<std::string> cols{"dice_vs", "dice_cochlea", "dice_mean", "assd_vs", "assd_cochlea"};
    return cols;
  }

  std::vector<double> column(const std::string& name) const {
    std::vector<double> out;
    for (const auto& c : cases) {
      if (name == "dice_vs") out.push_back(c.dice_vs);
      else if (name == "dice_cochlea") out.push_back(c.dice_cochlea);
      else if (name == "dice_mean") out.push_back(c.dice_mean);
      else if (name == "assd_vs") { if (c.assd_vs) out.push_back(*c.assd_vs); }
      else if (name == "assd_cochlea") { if (c.assd_cochlea) out.push_back(*c.assd_cochlea); }
      else throw Error(Errc::InvalidArgument, "unknown metric column " + name);
    }
    return out;
  }

  const MeanSd& agg(const std::string& name) const {
    const auto& cols = table_columns();
    const auto it = std::find(cols.begin(), cols.end(), name);
    if (it == cols.end()) throw Error(Errc::InvalidArgument, "unknown metric column " + name);
    return aggregate.at(static_cast<std::size_t>(it - cols.begin()));
  }
};

inline CaseMetrics evaluate_case(const std::string& id, const LabelMask& pred, const LabelMask& gt,
                                 const Spacing3& spacing) {
  CaseMetrics m;
  m.case_id = id;
  m.dice_vs = dice(pred, gt, kLabelVS);
  m.dice_cochlea = dice(pred, gt, kLabelCochlea);
  m.dice_mean = 0.5 * (m.dice_vs + m.dice_cochlea);
  try {
    m.assd_vs = assd(pred, gt, kLabelVS, spacing);
  } catch (const Error& e) {
    if (e.code() != Errc::EmptyMask) throw;
  }
  try {
    m.assd_cochlea = assd(pred, gt, kLabelCochlea, spacing);
  } catch (const Error& e) {
    if (e.code() != Errc::EmptyMask) throw;
  }
  return m;
}

inline ResultsTable aggregate_cases(std::vector<CaseMetrics> cases) {
  ResultsTable t;
  t.cases = std::move(cases);
  for (const auto& col : ResultsTable::table_columns()) t.aggregate.push_back(mean_sd(t.column(col)));
  return t;
}

/// Per-case Dice/ASSD plus mean and sample standard deviation per column.
/// ASSD is missing (not 0) for a case where either mask lacks the label.
inline ResultsTable evaluate_cases(const std::vector<LabelMask>& preds, const std::vector<LabelMask>& gts,
                                   const Spacing3& spacing, const std::vector<std::string>& ids = {}) {
  if (preds.size() != gts.size()) throw Error(Errc::LengthMismatch, "prediction and ground-truth counts differ");
  std::vector<CaseMetrics> cases;
  for (std::size_t i = 0; i < preds.size(); ++i)
    cases.push_back(evaluate_case(i < ids.size() ? ids[i] : "case_" + std::to_string(i), preds[i], gts[i], spacing));
  return aggregate_cases(std::move(cases));
}

}  // namespace xmoda
