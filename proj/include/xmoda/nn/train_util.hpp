#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "xmoda/ndarray.hpp"
#include "xmoda/nn/tensor.hpp"

namespace xmoda::detail {

inline NdArray<double> as_double(const nn::Tensor& t) {
  NdArray<double> out(t.shape());
  for (std::size_t i = 0; i < t.value().size(); ++i) out.data[i] = t.value()[i];
  return out;
}

inline std::vector<float> scaled_seed(const NdArray<double>& g, double scale) {
  std::vector<float> out(g.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(g.data[i] * scale);
  return out;
}

inline bool all_finite(const std::map<std::string, double>& terms) {
  return std::all_of(terms.begin(), terms.end(), [](const auto& kv) { return std::isfinite(kv.second); });
}

}  // namespace xmoda::detail
