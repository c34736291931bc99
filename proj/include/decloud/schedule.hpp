#pragma once

// Closed-form diffusion mathematics: noise schedules, forward noising, clean-image
// recovery from predicted noise, the ancestral posterior step and the deterministic
// DDIM step. Step indices run 1..T; index 0 denotes the clean endpoint (alpha_bar = 1).

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "decloud/tensor.hpp"

namespace decloud {

enum class NoiseCoeff { sqrt_beta_tilde, beta_tilde };

inline std::string to_string(NoiseCoeff c) { return c == NoiseCoeff::sqrt_beta_tilde ? "sqrt_beta_tilde" : "beta_tilde"; }
inline NoiseCoeff noise_coeff_from_string(const std::string& s) {
  if (s == "sqrt_beta_tilde" || s == "sqrt") return NoiseCoeff::sqrt_beta_tilde;
  if (s == "beta_tilde") return NoiseCoeff::beta_tilde;
  throw std::invalid_argument("unknown noise_coeff '" + s + "'");
}

/// Self-describing schedule parameters, stored in configs and checkpoints.
struct ScheduleDescriptor {
  int steps = 1000;
  std::string kind = "linear";
  double beta_start = 1e-4;
  double beta_end = 0.02;

  bool operator==(const ScheduleDescriptor&) const = default;
};

/// Immutable table of per-step constants. Vectors are indexed by step t in 0..T,
/// with the t = 0 entry holding the alpha_bar_0 = 1 convention.
class Schedule {
 public:
  int steps() const noexcept { return static_cast<int>(beta_.size()) - 1; }
  double beta(int t) const { return beta_.at(check(t)); }
  double alpha(int t) const { return alpha_.at(check(t)); }
  double alpha_bar(int t) const { return alpha_bar_.at(t); }  // t = 0 allowed
  double beta_tilde(int t) const { return beta_tilde_.at(check(t)); }
  const ScheduleDescriptor& descriptor() const noexcept { return desc_; }

  friend Schedule make_schedule(int steps, const std::string& kind, double beta_start, double beta_end);

 private:
  int check(int t) const {
    if (t < 1 || t > steps()) throw std::out_of_range("step " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
    return t;
  }

  ScheduleDescriptor desc_;
  std::vector<double> beta_, alpha_, alpha_bar_, beta_tilde_;
};

/// Builds a schedule. Kinds: "linear" (beta interpolated from start to end),
/// "cosine" (squared-cosine alpha_bar, betas capped at beta_end).
inline Schedule make_schedule(int steps, const std::string& kind, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("schedule needs at least one step");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
    throw std::invalid_argument("beta bounds must satisfy 0 < beta_start <= beta_end < 1");
  Schedule s;
  s.desc_ = {steps, kind, beta_start, beta_end};
  s.beta_.assign(steps + 1, 0.0);
  if (kind == "linear") {
    for (int t = 1; t <= steps; ++t) {
      double f = steps == 1 ? 0.0 : double(t - 1) / double(steps - 1);
      s.beta_[t] = beta_start + f * (beta_end - beta_start);
    }
  } else if (kind == "cosine") {
    auto f = [steps](double t) {
      double v = std::cos((t / steps + 0.008) / 1.008 * M_PI / 2);
      return v * v;
    };
    for (int t = 1; t <= steps; ++t) s.beta_[t] = std::clamp(1.0 - f(t) / f(t - 1), beta_start, beta_end);
  } else {
    throw std::invalid_argument("unknown schedule kind '" + kind + "'");
  }
  s.alpha_.assign(steps + 1, 1.0);
  s.alpha_bar_.assign(steps + 1, 1.0);
  s.beta_tilde_.assign(steps + 1, 0.0);
  for (int t = 1; t <= steps; ++t) {
    s.alpha_[t] = 1.0 - s.beta_[t];
    s.alpha_bar_[t] = s.alpha_bar_[t - 1] * s.alpha_[t];
    s.beta_tilde_[t] = (1.0 - s.alpha_bar_[t - 1]) / (1.0 - s.alpha_bar_[t]) * s.beta_[t];
  }
  return s;
}

inline Schedule make_schedule(const ScheduleDescriptor& d) {
  return make_schedule(d.steps, d.kind, d.beta_start, d.beta_end);
}

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
template <class T>
Tensor<T> forward_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const Schedule& s) {
  require_same_shape(x0, eps, "forward_sample");
  if (t < 1 || t > s.steps()) throw std::out_of_range("forward_sample: step out of range");
  T a = static_cast<T>(std::sqrt(s.alpha_bar(t)));
  T b = static_cast<T>(std::sqrt(1.0 - s.alpha_bar(t)));
  return zip(x0, eps, [a, b](T x, T e) { return a * x + b * e; });
}

/// Per-sample steps: sample i of the batch is noised to steps[i].
template <class T>
Tensor<T> forward_sample(const Tensor<T>& x0, const std::vector<int>& steps, const Tensor<T>& eps, const Schedule& s) {
  require_same_shape(x0, eps, "forward_sample");
  if (static_cast<int>(steps.size()) != x0.dim(0)) throw ShapeError("forward_sample: one step per sample required");
  Tensor<T> out(x0.shape());
  std::size_t per = x0.size() / steps.size();
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (steps[i] < 1 || steps[i] > s.steps()) throw std::out_of_range("forward_sample: step out of range");
    T a = static_cast<T>(std::sqrt(s.alpha_bar(steps[i])));
    T b = static_cast<T>(std::sqrt(1.0 - s.alpha_bar(steps[i])));
    for (std::size_t k = i * per; k < (i + 1) * per; ++k) out[k] = a * x0[k] + b * eps[k];
  }
  return out;
}

/// x0 estimate from the noisy state and predicted noise.
template <class T>
Tensor<T> predict_x0(const Tensor<T>& xt, const Tensor<T>& eps_hat, int t, const Schedule& s) {
  require_same_shape(xt, eps_hat, "predict_x0");
  if (t < 1 || t > s.steps()) throw std::out_of_range("predict_x0: step out of range");
  double ab = s.alpha_bar(t);
  T inv = static_cast<T>(1.0 / std::sqrt(ab));
  T b = static_cast<T>(std::sqrt(1.0 - ab));
  return zip(xt, eps_hat, [inv, b](T x, T e) { return (x - b * e) * inv; });
}

template <class T>
Tensor<T> predict_x0(const Tensor<T>& xt, const Tensor<T>& eps_hat, const std::vector<int>& steps, const Schedule& s) {
  require_same_shape(xt, eps_hat, "predict_x0");
  if (static_cast<int>(steps.size()) != xt.dim(0)) throw ShapeError("predict_x0: one step per sample required");
  Tensor<T> out(xt.shape());
  std::size_t per = xt.size() / steps.size();
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (steps[i] < 1 || steps[i] > s.steps()) throw std::out_of_range("predict_x0: step out of range");
    double ab = s.alpha_bar(steps[i]);
    T inv = static_cast<T>(1.0 / std::sqrt(ab));
    T b = static_cast<T>(std::sqrt(1.0 - ab));
    for (std::size_t k = i * per; k < (i + 1) * per; ++k) out[k] = (xt[k] - b * eps_hat[k]) * inv;
  }
  return out;
}

/// Ancestral transition x_t -> x_{t-1} given a clean-image estimate.
/// No noise is injected at t = 1 regardless of z.
template <class T>
Tensor<T> posterior_step(const Tensor<T>& x0t, const Tensor<T>& xt, int t, const Tensor<T>& z, const Schedule& s,
                         NoiseCoeff coeff = NoiseCoeff::sqrt_beta_tilde) {
  require_same_shape(x0t, xt, "posterior_step");
  require_same_shape(xt, z, "posterior_step");
  if (t < 1 || t > s.steps()) throw std::out_of_range("posterior_step: step out of range");
  double ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t - 1);
  T c0 = static_cast<T>(std::sqrt(ab_prev) * s.beta(t) / (1.0 - ab));
  T ct = static_cast<T>(std::sqrt(s.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab));
  double bt = s.beta_tilde(t);
  T cz = t == 1 ? T(0) : static_cast<T>(coeff == NoiseCoeff::sqrt_beta_tilde ? std::sqrt(bt) : bt);
  Tensor<T> out(xt.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c0 * x0t[i] + ct * xt[i] + cz * z[i];
  return out;
}

/// Deterministic DDIM transition from t to t_prev (t_prev = 0 returns x0t).
template <class T>
Tensor<T> ddim_step(const Tensor<T>& x0t, const Tensor<T>& eps_hat, int t, int t_prev, const Schedule& s) {
  require_same_shape(x0t, eps_hat, "ddim_step");
  if (t_prev >= t) throw std::invalid_argument("ddim_step: t_prev must be smaller than t");
  if (t < 1 || t > s.steps() || t_prev < 0) throw std::out_of_range("ddim_step: step out of range");
  if (t_prev == 0) return x0t;
  double abp = s.alpha_bar(t_prev);
  T a = static_cast<T>(std::sqrt(abp));
  T b = static_cast<T>(std::sqrt(1.0 - abp));
  return zip(x0t, eps_hat, [a, b](T x, T e) { return a * x + b * e; });
}

/// Uniformly strided, descending DDIM timesteps over [1, T]; the final step
/// transitions to 0. E.g. T = 1000, n = 50 gives 1000, 980, ..., 20.
inline std::vector<int> ddim_timesteps(int total_steps, int n) {
  if (n < 1 || n > total_steps) throw std::invalid_argument("ddim steps must lie in [1, T]");
  std::vector<int> ts;
  ts.reserve(n);
  for (int i = n; i >= 1; --i) {
    int t = static_cast<int>(std::llround(static_cast<double>(i) * total_steps / n));
    ts.push_back(std::max(1, t));
  }
  return ts;
}

}  // namespace decloud
