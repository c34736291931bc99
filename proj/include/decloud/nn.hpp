#pragma once

#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "decloud/autograd.hpp"

namespace decloud::nn {

using ag::Var;

template <class T>
using ParamList = std::vector<std::pair<std::string, Var<T>>>;

template <class T>
std::size_t parameter_count(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& [name, v] : params) n += v.value().size();
  return n;
}

template <class T>
std::uint64_t parameter_checksum(const ParamList<T>& params) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& [name, v] : params) h = checksum<T>(v.value().span(), h);
  return h;
}

template <class T>
void zero_grad(const ParamList<T>& params) {
  for (auto [name, v] : params) v.zero_grad();
}

template <class T, class Rng>
Var<T> uniform_param(Shape s, T bound, Rng& rng) {
  return Var<T>(Tensor<T>::uniform(std::move(s), rng, -bound, bound), true);
}

template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  /// Default init draws from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); zero_init gives an all-zero layer.
  template <class Rng>
  Conv2d(int in_ch, int out_ch, int kernel, Rng& rng, int stride = 1, bool zero_init = false)
      : stride_(stride), pad_(kernel / 2) {
    T bound = T(1) / std::sqrt(static_cast<T>(in_ch * kernel * kernel));
    if (zero_init) {
      weight_ = Var<T>(Tensor<T>({out_ch, in_ch, kernel, kernel}), true);
      bias_ = Var<T>(Tensor<T>({out_ch}), true);
    } else {
      weight_ = uniform_param<T>({out_ch, in_ch, kernel, kernel}, bound, rng);
      bias_ = uniform_param<T>({out_ch}, bound, rng);
    }
  }

  Var<T> operator()(const Var<T>& x) const { return ag::conv2d(x, weight_, bias_, stride_, pad_); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".weight", weight_);
    out.emplace_back(prefix + ".bias", bias_);
  }
  int out_channels() const { return weight_.value().dim(0); }

 private:
  Var<T> weight_, bias_;
  int stride_ = 1, pad_ = 0;
};

template <class T>
class Linear {
 public:
  Linear() = default;
  template <class Rng>
  Linear(int in_f, int out_f, Rng& rng) {
    T bound = T(1) / std::sqrt(static_cast<T>(in_f));
    weight_ = uniform_param<T>({out_f, in_f}, bound, rng);
    bias_ = uniform_param<T>({out_f}, bound, rng);
  }
  Var<T> operator()(const Var<T>& x) const { return ag::linear(x, weight_, bias_); }
  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".weight", weight_);
    out.emplace_back(prefix + ".bias", bias_);
  }

 private:
  Var<T> weight_, bias_;
};

template <class T>
class GroupNorm {
 public:
  GroupNorm() = default;
  /// The group count is reduced to gcd(max_groups, channels) so any width is accepted.
  GroupNorm(int channels, int max_groups)
      : gamma_(Tensor<T>::ones({channels}), true),
        beta_(Tensor<T>::zeros({channels}), true),
        groups_(std::gcd(max_groups, channels)) {}
  Var<T> operator()(const Var<T>& x) const { return ag::group_norm(x, gamma_, beta_, groups_); }
  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".gamma", gamma_);
    out.emplace_back(prefix + ".beta", beta_);
  }

 private:
  Var<T> gamma_, beta_;
  int groups_ = 1;
};

}  // namespace decloud::nn
