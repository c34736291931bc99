#pragma once

#include <cmath>

#include "decloud/nn.hpp"

namespace decloud::optim {

/// Adaptive-moment optimizer without weight decay.
template <class T>
class Adam {
 public:
  Adam(nn::ParamList<T> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto& [name, v] : params_) {
      m_.emplace_back(v.shape());
      v_.emplace_back(v.shape());
    }
  }

  /// Parameters without a gradient this step are left untouched.
  void step() {
    ++t_;
    double c1 = 1.0 - std::pow(beta1_, t_);
    double c2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t p = 0; p < params_.size(); ++p) {
      auto& var = params_[p].second;
      const auto& g = var.grad();
      if (g.empty()) continue;
      auto& val = var.mutable_value();
      auto& m = m_[p];
      auto& v = v_[p];
      for (std::size_t i = 0; i < val.size(); ++i) {
        double gi = g[i];
        m[i] = static_cast<T>(beta1_ * m[i] + (1 - beta1_) * gi);
        v[i] = static_cast<T>(beta2_ * v[i] + (1 - beta2_) * gi * gi);
        double mhat = m[i] / c1, vhat = v[i] / c2;
        val[i] -= static_cast<T>(lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  void zero_grad() { nn::zero_grad(params_); }
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  long steps() const { return t_; }
  const nn::ParamList<T>& params() const { return params_; }

 private:
  nn::ParamList<T> params_;
  std::vector<Tensor<T>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace decloud::optim
