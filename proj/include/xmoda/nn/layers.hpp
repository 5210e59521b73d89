#pragma once

#include <cmath>
#include <initializer_list>
#include <map>
#include <string>
#include <vector>

#include "xmoda/nn/ops.hpp"
#include "xmoda/rng.hpp"

namespace xmoda::nn {

/// Named parameters of a network, ordered by name.
class ParamStore {
 public:
  Tensor add(const std::string& name, Shape shape) {
    if (params_.count(name)) throw Error(Errc::InvalidArgument, "duplicate parameter " + name);
    Tensor t = Tensor::zeros(std::move(shape), true);
    params_.emplace(name, t);
    return t;
  }

  /// Registers an existing tensor (shared, not copied) under `name`.
  void insert(const std::string& name, const Tensor& t) {
    if (!params_.emplace(name, t).second) throw Error(Errc::InvalidArgument, "duplicate parameter " + name);
  }

  /// Union of several stores; parameter names must be disjoint.
  static ParamStore join(std::initializer_list<const ParamStore*> stores) {
    ParamStore out;
    for (const ParamStore* s : stores)
      for (const auto& [n, t] : s->all()) out.insert(n, t);
    return out;
  }

  const std::map<std::string, Tensor>& all() const { return params_; }
  std::map<std::string, Tensor>& all() { return params_; }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }
  void set_requires_grad(bool r) {
    for (auto& [_, t] : params_) t.set_requires_grad(r);
  }
  std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
  }

 private:
  std::map<std::string, Tensor> params_;
};

enum class Init { Normal002, KaimingNormal, Zero };

/// Convolution with a bias; weight shape (cout, cin, k...) where the number
/// of kernel axes is 2 or 3.
struct ConvLayer {
  Tensor w, b;
  Vec3i stride{1, 1, 1};
  Vec3i pad{0, 0, 0};

  ConvLayer() = default;
  ConvLayer(ParamStore& ps, const std::string& name, int dims, std::int64_t cin, std::int64_t cout, int k, int s,
            int p, Init init, Rng& rng) {
    Shape ws{cout, cin};
    for (int i = 0; i < dims; ++i) ws.push_back(k);
    w = ps.add(name + ".w", ws);
    b = ps.add(name + ".b", {cout});
    stride = {s, s, s};
    pad = {p, p, p};
    const double fan_in = static_cast<double>(cin) * std::pow(k, dims);
    for (float& v : w.value()) {
      switch (init) {
        case Init::Normal002: v = static_cast<float>(rng.normal(0.0, 0.02)); break;
        case Init::KaimingNormal: v = static_cast<float>(rng.normal(0.0, std::sqrt(2.0 / fan_in))); break;
        case Init::Zero: v = 0.0f; break;
      }
    }
  }

  Tensor operator()(const Tensor& x) const { return conv(x, w, b, stride, pad); }
};

}  // namespace xmoda::nn
