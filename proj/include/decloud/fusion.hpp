#pragma once

#include <stdexcept>

#include "decloud/tensor.hpp"

namespace decloud {

/// Per-pixel, per-channel trust in the reference prediction.
template <class T>
struct WeightMap {
  Tensor<T> w;
  double eta = 0.0;
  bool clamped = false;
};

struct FusionConfig {
  double eta = 0.3;
  bool enabled = true;
};

inline void check_eta(double eta) {
  if (!(eta >= 0.0 && eta < 1.0)) throw std::invalid_argument("eta must lie in [0, 1), got " + std::to_string(eta));
}

/// Floors the weight map at eta. eta = 0 leaves it untouched.
template <class T>
WeightMap<T> clamp_weight(const WeightMap<T>& raw, double eta) {
  check_eta(eta);
  T floor = static_cast<T>(eta);
  return {map(raw.w, [floor](T v) { return std::max(v, floor); }), eta, true};
}

/// (1 - W) * x0_eps + W * x0_ref
template <class T>
Tensor<T> fuse(const Tensor<T>& x0_eps, const Tensor<T>& x0_ref, const WeightMap<T>& w) {
  require_same_shape(x0_eps, x0_ref, "fuse");
  require_same_shape(x0_eps, w.w, "fuse");
  Tensor<T> out(x0_eps.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (T(1) - w.w[i]) * x0_eps[i] + w.w[i] * x0_ref[i];
  return out;
}

}  // namespace decloud
