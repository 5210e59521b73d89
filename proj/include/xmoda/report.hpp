#pragma once

// Metric tables, arm comparisons and montage images written by the pipeline.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "xmoda/checkpoint.hpp"
#include "xmoda/error.hpp"
#include "xmoda/metrics.hpp"
#include "xmoda/volume_io.hpp"

namespace xmoda {

namespace fs = std::filesystem;

inline std::string fixed6(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string fixed6(const std::optional<double>& v) { return v ? fixed6(*v) : std::string("NA"); }

/// Significance marks at the two reported levels.
inline std::string significance(double p) {
  if (p < 1e-4) return "****";
  if (p < 0.05) return "*";
  return "n.s.";
}

struct Comparison {
  std::string a;
  std::string b;
  std::string metric;
  int n = 0;
  double mean_a = 0.0;
  double mean_b = 0.0;
  std::optional<TTestResult> test;  // empty when the differences have no variance
  std::string annotation;
  std::string flag;  // "" or "zero_variance"
};

/// Paired comparison of one metric column between two tables over the same
/// cases (matched by position).
inline Comparison compare_tables(const std::string& name_a, const ResultsTable& a, const std::string& name_b,
                                 const ResultsTable& b, const std::string& metric) {
  const auto xs = a.column(metric);
  const auto ys = b.column(metric);
  Comparison c;
  c.a = name_a;
  c.b = name_b;
  c.metric = metric;
  c.n = static_cast<int>(xs.size());
  c.mean_a = mean_sd(xs).mean;
  c.mean_b = mean_sd(ys).mean;
  try {
    c.test = paired_ttest(xs, ys);
    c.annotation = significance(c.test->p);
  } catch (const Error& e) {
    if (e.code() != Errc::ZeroVariance) throw;
    c.annotation = "n.s.";
    c.flag = "zero_variance";
  }
  return c;
}

/// Per-case rows then `AGG_mean` / `AGG_sd` rows for every labelled table.
/// The label is prefixed onto case_id as "<label>/<case_id>".
inline std::string metrics_csv(const std::vector<std::pair<std::string, ResultsTable>>& tables) {
  std::string out = "case_id,dice_vs,dice_cochlea,dice_mean,assd_vs,assd_cochlea\n";
  for (const auto& [label, t] : tables) {
    const std::string pre = label.empty() ? "" : label + "/";
    for (const auto& c : t.cases)
      out += pre + c.case_id + "," + fixed6(c.dice_vs) + "," + fixed6(c.dice_cochlea) + "," + fixed6(c.dice_mean) +
             "," + fixed6(c.assd_vs) + "," + fixed6(c.assd_cochlea) + "\n";
    for (const char* which : {"mean", "sd"}) {
      out += pre + "AGG_" + which;
      for (const auto& col : ResultsTable::table_columns()) {
        const MeanSd& m = t.agg(col);
        out += "," + (m.n == 0 ? std::string("NA") : fixed6(which[0] == 'm' ? m.mean : m.sd));
      }
      out += "\n";
    }
  }
  return out;
}

inline std::string comparisons_csv(const std::vector<Comparison>& cs) {
  std::string out = "arm_a,arm_b,metric,n,mean_a,mean_b,t,p,df,annotation,flag\n";
  for (const auto& c : cs) {
    out += c.a + "," + c.b + "," + c.metric + "," + std::to_string(c.n) + "," + fixed6(c.mean_a) + "," +
           fixed6(c.mean_b) + ",";
    if (c.test) {
      out += fixed6(c.test->t) + "," + fixed6(c.test->p) + "," + std::to_string(c.test->df);
    } else {
      out += "NA,NA,NA";
    }
    out += "," + c.annotation + "," + c.flag + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grayscale montage.

struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  GrayImage() = default;
  GrayImage(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}
  std::uint8_t& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

namespace detail {

// 3x5 glyphs, one row per entry, bit 2 = left column.
inline const std::uint8_t* glyph(char ch) {
  static const std::uint8_t digits[10][5] = {
      {7, 5, 5, 5, 7}, {2, 6, 2, 2, 7}, {7, 1, 7, 4, 7}, {7, 1, 7, 1, 7}, {5, 5, 7, 1, 1},
      {7, 4, 7, 1, 7}, {7, 4, 7, 5, 7}, {7, 1, 1, 1, 1}, {7, 5, 7, 5, 7}, {7, 5, 7, 1, 7}};
  static const std::uint8_t letters[26][5] = {
      {2, 5, 7, 5, 5}, {6, 5, 6, 5, 6}, {3, 4, 4, 4, 3}, {6, 5, 5, 5, 6}, {7, 4, 6, 4, 7}, {7, 4, 6, 4, 4},
      {3, 4, 5, 5, 3}, {5, 5, 7, 5, 5}, {7, 2, 2, 2, 7}, {1, 1, 1, 5, 2}, {5, 5, 6, 5, 5}, {4, 4, 4, 4, 7},
      {5, 7, 7, 5, 5}, {6, 5, 5, 5, 5}, {2, 5, 5, 5, 2}, {6, 5, 6, 4, 4}, {2, 5, 5, 6, 3}, {6, 5, 6, 5, 5},
      {3, 4, 2, 1, 6}, {7, 2, 2, 2, 2}, {5, 5, 5, 5, 7}, {5, 5, 5, 5, 2}, {5, 5, 7, 7, 5}, {5, 5, 2, 5, 5},
      {5, 5, 2, 2, 2}, {7, 1, 2, 4, 7}};
  static const std::uint8_t dash[5] = {0, 0, 7, 0, 0};
  static const std::uint8_t blank[5] = {0, 0, 0, 0, 0};
  if (ch >= '0' && ch <= '9') return digits[ch - '0'];
  if (ch >= 'a' && ch <= 'z') ch = static_cast<char>(ch - 'a' + 'A');
  if (ch >= 'A' && ch <= 'Z') return letters[ch - 'A'];
  if (ch == '-' || ch == '_') return dash;
  return blank;
}

}  // namespace detail

/// Draws `text` with its top-left corner at (y, x), clipped to the image.
inline void draw_text(GrayImage& img, int y, int x, const std::string& text, std::uint8_t ink = 255) {
  for (std::size_t i = 0; i < text.size(); ++i) {
    const std::uint8_t* g = detail::glyph(text[i]);
    const int x0 = x + static_cast<int>(i) * 4;
    for (int r = 0; r < 5; ++r)
      for (int c = 0; c < 3; ++c)
        if ((g[r] >> (2 - c)) & 1) {
          const int yy = y + r, xx = x0 + c;
          if (yy >= 0 && yy < img.height && xx >= 0 && xx < img.width) img.at(yy, xx) = ink;
        }
  }
}

inline constexpr int kMontageHeader = 9;
inline constexpr int kMontageGap = 2;

/// Tiles rows x columns of equally sized slices with column labels above.
/// Intensities in [-1, 1] map to [0, 255].
inline GrayImage montage(const std::vector<std::vector<Slice2D>>& rows, const std::vector<std::string>& labels) {
  if (rows.empty() || rows.front().empty()) throw Error(Errc::InvalidArgument, "montage needs at least one tile");
  const std::size_t ncol = rows.front().size();
  if (labels.size() != ncol) throw Error(Errc::LengthMismatch, "one label per montage column");
  const int th = rows.front().front().height, tw = rows.front().front().width;
  for (const auto& r : rows) {
    if (r.size() != ncol) throw Error(Errc::ShapeMismatch, "montage rows differ in length");
    for (const auto& s : r)
      if (s.height != th || s.width != tw) throw Error(Errc::ShapeMismatch, "montage tiles differ in size");
  }
  const int W = static_cast<int>(ncol) * (tw + kMontageGap) - kMontageGap;
  const int H = kMontageHeader + static_cast<int>(rows.size()) * (th + kMontageGap) - kMontageGap;
  GrayImage img(H, W, 0);
  for (std::size_t c = 0; c < ncol; ++c) draw_text(img, 2, static_cast<int>(c) * (tw + kMontageGap) + 1, labels[c]);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < ncol; ++c) {
      const int y0 = kMontageHeader + static_cast<int>(r) * (th + kMontageGap);
      const int x0 = static_cast<int>(c) * (tw + kMontageGap);
      const auto& s = rows[r][c];
      for (int y = 0; y < th; ++y)
        for (int x = 0; x < tw; ++x) {
          const double v = std::clamp((static_cast<double>(s.at(y, x)) + 1.0) * 127.5, 0.0, 255.0);
          img.at(y0 + y, x0 + x) = static_cast<std::uint8_t>(std::lround(v));
        }
    }
  return img;
}

/// Binary PGM (P5) with the column labels in a header comment.
inline std::string encode_pgm(const GrayImage& img, const std::string& comment = {}) {
  std::string out = "P5\n";
  if (!comment.empty()) out += "# " + comment + "\n";
  out += std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

inline GrayImage decode_pgm(const std::string& bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t b = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(b, pos - b);
  };
  if (token() != "P5") throw Error(Errc::CorruptHeader, "not a binary PGM");
  GrayImage img;
  try {
    img.width = std::stoi(token());
    img.height = std::stoi(token());
    if (std::stoi(token()) != 255) throw Error(Errc::CorruptHeader, "PGM maxval must be 255");
  } catch (const std::logic_error&) {
    throw Error(Errc::CorruptHeader, "bad PGM header");
  }
  ++pos;
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
  if (pos + n > bytes.size()) throw Error(Errc::CorruptHeader, "truncated PGM");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

struct MontageSpec {
  std::string name;  // file stem
  std::vector<std::string> labels;
  std::vector<std::vector<Slice2D>> rows;
};

/// Writes metrics.csv, comparisons.csv (only when there are comparisons) and
/// one PGM per montage. Returns the written paths relative to out_dir.
inline std::vector<std::string> emit_report(const std::vector<std::pair<std::string, ResultsTable>>& tables,
                                            const std::vector<Comparison>& comparisons,
                                            const std::vector<MontageSpec>& montages, const fs::path& out_dir) {
  std::vector<std::string> written;
  try {
    fs::create_directories(out_dir);
  } catch (const fs::filesystem_error& e) {
    throw Error(Errc::IoFailure, e.what());
  }
  write_file_atomic(out_dir / "metrics.csv", metrics_csv(tables));
  written.push_back("metrics.csv");
  if (!comparisons.empty()) {
    write_file_atomic(out_dir / "comparisons.csv", comparisons_csv(comparisons));
    written.push_back("comparisons.csv");
  }
  for (const auto& m : montages) {
    std::string comment = "columns:";
    for (const auto& l : m.labels) comment += " " + l;
    write_file_atomic(out_dir / (m.name + ".pgm"), encode_pgm(montage(m.rows, m.labels), comment));
    written.push_back(m.name + ".pgm");
  }
  return written;
}

}  // namespace xmoda
