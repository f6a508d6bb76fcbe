#pragma once

#include <cmath>
#include <vector>

#include "idn/autograd.hpp"

namespace idn {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over a fixed list of leaf variables. Moments are kept in double.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Var<T>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    if (!(cfg_.lr > 0)) throw std::invalid_argument("learning rate must be > 0");
    for (const auto& p : params_) {
      m_.emplace_back(p.value().size(), 0.0);
      v_.emplace_back(p.value().size(), 0.0);
    }
  }

  // Applies the accumulated gradients, then clears them. Parameters without a
  // gradient this step are left untouched (their moments do not decay).
  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Var<T>& p = params_[k];
      if (!p.has_grad()) continue;
      const BasicTensor<T> g = p.grad();
      auto w = p.mutable_value().values();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i];
        m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * gi * gi;
        w[i] = static_cast<T>(w[i] - cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps));
      }
      p.zero_grad();
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const std::vector<Var<T>>& params() const { return params_; }
  std::size_t steps() const { return t_; }

 private:
  std::vector<Var<T>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace idn
