#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "xmoda/nn/layers.hpp"

namespace xmoda::nn {

/// Adam with bias correction. State is keyed by parameter name so it can be
/// written to and restored from a checkpoint.
class Adam {
 public:
  struct Slot {
    std::vector<float> m, v;
  };

  Adam(double beta1 = 0.5, double beta2 = 0.999, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore& ps, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& [name, p] : ps.all()) {
      if (!p.has_grad()) continue;
      Slot& s = slots_[name];
      const std::size_t n = p.value().size();
      if (s.m.size() != n) {
        s.m.assign(n, 0.0f);
        s.v.assign(n, 0.0f);
      }
      auto& g = p.grad();
      auto& w = p.value();
      for (std::size_t i = 0; i < n; ++i) {
        const double gi = g[i];
        s.m[i] = static_cast<float>(beta1_ * s.m[i] + (1.0 - beta1_) * gi);
        s.v[i] = static_cast<float>(beta2_ * s.v[i] + (1.0 - beta2_) * gi * gi);
        const double mhat = s.m[i] / bc1;
        const double vhat = s.v[i] / bc2;
        w[i] = static_cast<float>(w[i] - lr * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }
  std::map<std::string, Slot>& slots() { return slots_; }
  const std::map<std::string, Slot>& slots() const { return slots_; }

 private:
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::map<std::string, Slot> slots_;
};

/// Constant for the first half of training, then linear decay towards zero
/// (CycleGAN/CUT "linear" policy with n_epochs == n_epochs_decay).
inline double linear_decay_lr(double base, int epoch, int total_epochs) {
  const int keep = total_epochs / 2;
  const int decay = total_epochs - keep;
  if (decay <= 0) return base;
  const int past = std::max(0, epoch + 1 - keep);
  return base * (1.0 - static_cast<double>(past) / static_cast<double>(decay + 1));
}

}  // namespace xmoda::nn
