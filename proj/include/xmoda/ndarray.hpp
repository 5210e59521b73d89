#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "xmoda/error.hpp"

namespace xmoda {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Dense row-major n-d array. The last axis is contiguous.
template <class T>
struct NdArray {
  Shape shape;
  std::vector<T> data;

  NdArray() = default;
  explicit NdArray(Shape s, T fill = T{})
      : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), fill) {}
  NdArray(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
      throw Error(Errc::ShapeMismatch, "payload size does not match shape " + shape_str(shape));
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  std::int64_t dim(std::size_t axis) const { return shape.at(axis); }
  std::size_t rank() const { return shape.size(); }

  T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

  std::span<T> span() { return data; }
  std::span<const T> span() const { return data; }

  bool all_finite() const {
    for (const T& v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  friend bool operator==(const NdArray&, const NdArray&) = default;
};

template <class To, class From>
NdArray<To> cast_array(const NdArray<From>& a) {
  NdArray<To> out;
  out.shape = a.shape;
  out.data.assign(a.data.begin(), a.data.end());
  return out;
}

}  // namespace xmoda
