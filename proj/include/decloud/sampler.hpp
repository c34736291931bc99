#pragma once

// Reference-guided reverse diffusion. Each step predicts noise, recovers the
// diffusion branch's clean estimate, blends it with the reference prediction
// through the clamped weight map, and advances with the ancestral or DDIM rule.

#include <chrono>
#include <functional>
#include <memory>
#include <optional>
#include <set>

#include "decloud/fusion.hpp"
#include "decloud/reference.hpp"
#include "decloud/schedule.hpp"
#include "decloud/unet.hpp"

namespace decloud {

/// CNP + WA + frozen reference, sharing one band count and one schedule.
template <class T>
struct DenoiserBundle {
  int bands;
  UNet<T> cnp;
  UNet<T> wa;
  std::shared_ptr<ReferenceModel<T>> reference;
  Schedule schedule;
  std::vector<std::string> completed_stages;

  bool has_stage(const std::string& s) const {
    return std::find(completed_stages.begin(), completed_stages.end(), s) != completed_stages.end();
  }

  void validate() const {
    if (cnp.spec().in_channels != 2 * bands || cnp.spec().out_channels != bands)
      throw std::invalid_argument("bundle: CNP channels inconsistent with " + std::to_string(bands) + " bands");
    if (wa.spec().in_channels != 3 * bands || wa.spec().out_channels != bands)
      throw std::invalid_argument("bundle: WA channels inconsistent with " + std::to_string(bands) + " bands");
    if (!reference) throw std::invalid_argument("bundle: no reference model");
    if (reference->bands() && reference->bands() != bands)
      throw std::invalid_argument("bundle: reference expects " + std::to_string(reference->bands()) + " bands");
  }
};

template <class T, class Rng>
DenoiserBundle<T> make_bundle(int bands, const UNetSpec& cnp_spec, const UNetSpec& wa_spec,
                              std::shared_ptr<ReferenceModel<T>> reference, const ScheduleDescriptor& schedule,
                              Rng& rng) {
  auto cnp = build_cnp<T>(bands, cnp_spec, rng);
  auto wa = build_wa<T>(bands, wa_spec, rng);
  DenoiserBundle<T> b{bands, std::move(cnp), std::move(wa), std::move(reference), make_schedule(schedule), {}};
  b.validate();
  return b;
}

enum class SamplerMode { ancestral, ddim };

inline std::string to_string(SamplerMode m) { return m == SamplerMode::ddim ? "ddim" : "ancestral"; }
inline SamplerMode sampler_mode_from_string(const std::string& s) {
  if (s == "ddim") return SamplerMode::ddim;
  if (s == "ancestral") return SamplerMode::ancestral;
  throw std::invalid_argument("unknown sampler mode '" + s + "'");
}

struct SamplerConfig {
  SamplerMode mode = SamplerMode::ddim;
  int ddim_steps = 50;
  double eta = 0.3;
  bool fusion_enabled = true;
  std::uint64_t seed = 0;
  bool record_trajectory = true;
  bool clip_intermediate = true;
  NoiseCoeff noise_coeff = NoiseCoeff::sqrt_beta_tilde;
  std::set<int> snapshot_steps;  // steps t whose fused x0 estimate is kept

  void validate(int total_steps) const {
    check_eta(eta);
    if (mode == SamplerMode::ddim && (ddim_steps < 1 || ddim_steps > total_steps))
      throw std::invalid_argument("ddim_steps must lie in [1, " + std::to_string(total_steps) + "]");
  }
};

/// Debug hooks; override_weight may rewrite the raw weight map before clamping.
template <class T>
struct SamplerHooks {
  std::function<void(Tensor<T>& w, int t)> override_weight;
};

struct TrajectoryStep {
  int t = 0;
  int t_prev = 0;
  std::optional<double> mean_w;  // absent when fusion is off
  double seconds = 0.0;
};

template <class T>
struct TrajectoryRecord {
  std::vector<TrajectoryStep> steps;
  std::vector<std::pair<int, Tensor<T>>> snapshots;
};

/// Step indices visited by the sampler and the index each one transitions to.
inline std::vector<std::pair<int, int>> sampling_plan(const SamplerConfig& cfg, int total_steps) {
  std::vector<std::pair<int, int>> plan;
  if (cfg.mode == SamplerMode::ancestral) {
    for (int t = total_steps; t >= 1; --t) plan.emplace_back(t, t - 1);
  } else {
    auto ts = ddim_timesteps(total_steps, cfg.ddim_steps);
    for (std::size_t i = 0; i < ts.size(); ++i) plan.emplace_back(ts[i], i + 1 < ts.size() ? ts[i + 1] : 0);
  }
  return plan;
}

/// One transition x_t -> x_{t_prev}. `z` is the ancestral noise draw (ignored in DDIM mode).
template <class T>
Tensor<T> denoise_step(const DenoiserBundle<T>& bundle, const Tensor<T>& xt, const Tensor<T>& y,
                       const Tensor<T>& x0_ref, int t, int t_prev, const SamplerConfig& cfg, const Tensor<T>& z,
                       const SamplerHooks<T>& hooks = {}, TrajectoryStep* rec = nullptr,
                       Tensor<T>* fused_out = nullptr) {
  const int n = xt.n();
  std::vector<int> steps(n, t);
  Tensor<T> eps_hat = bundle.cnp.predict(concat_channels<T>({&xt, &y}), steps);
  Tensor<T> x0_eps = predict_x0(xt, eps_hat, t, bundle.schedule);
  if (cfg.clip_intermediate) x0_eps = clip(x0_eps, T(-1), T(1));
  Tensor<T> x0t;
  if (cfg.fusion_enabled) {
    WeightMap<T> raw{bundle.wa.predict(concat_channels<T>({&xt, &y, &x0_ref}), steps), 0.0, false};
    if (hooks.override_weight) hooks.override_weight(raw.w, t);
    auto w = clamp_weight(raw, cfg.eta);
    if (rec) rec->mean_w = static_cast<double>(w.w.mean());
    x0t = fuse(x0_eps, x0_ref, w);
    if (cfg.clip_intermediate) x0t = clip(x0t, T(-1), T(1));
  } else {
    x0t = std::move(x0_eps);
  }
  if (fused_out) *fused_out = x0t;
  if (cfg.mode == SamplerMode::ancestral) {
    if (t_prev != t - 1) throw std::invalid_argument("ancestral step must move to t - 1");
    return posterior_step(x0t, xt, t, z, bundle.schedule, cfg.noise_coeff);
  }
  return ddim_step(x0t, eps_hat, t, t_prev, bundle.schedule);
}

/// Full reverse process from pure noise, conditioned on the cloudy batch y.
template <class T>
std::pair<Tensor<T>, TrajectoryRecord<T>> sample(const DenoiserBundle<T>& bundle, const Tensor<T>& y,
                                                 const SamplerConfig& cfg, const SamplerHooks<T>& hooks = {}) {
  bundle.validate();
  if (y.rank() != 4 || y.c() != bundle.bands)
    throw std::invalid_argument("sample: input has shape " + shape_str(y.shape()) + ", bundle expects " +
                                std::to_string(bundle.bands) + " bands");
  cfg.validate(bundle.schedule.steps());
  std::mt19937_64 rng(cfg.seed);
  Tensor<T> x = Tensor<T>::randn(y.shape(), rng);
  Tensor<T> x0_ref = cfg.fusion_enabled ? predict_reference(*bundle.reference, y, bundle.bands) : Tensor<T>();
  TrajectoryRecord<T> record;
  Tensor<T> zero(y.shape());
  for (auto [t, t_prev] : sampling_plan(cfg, bundle.schedule.steps())) {
    auto start = std::chrono::steady_clock::now();
    Tensor<T> z = (cfg.mode == SamplerMode::ancestral && t > 1) ? Tensor<T>::randn(y.shape(), rng) : zero;
    TrajectoryStep rec{t, t_prev, std::nullopt, 0.0};
    Tensor<T> fused;
    bool snap = cfg.snapshot_steps.count(t) > 0;
    x = denoise_step(bundle, x, y, x0_ref, t, t_prev, cfg, z, hooks, &rec, snap ? &fused : nullptr);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (cfg.record_trajectory) record.steps.push_back(rec);
    if (snap) record.snapshots.emplace_back(t, std::move(fused));
  }
  return {clip(x, T(-1), T(1)), std::move(record)};
}

/// Plain conditional diffusion sampler (no reference, no weighting), sharing the
/// noise stream convention of `sample`.
template <class T>
Tensor<T> sample_vanilla(const UNet<T>& cnp, const Schedule& schedule, const Tensor<T>& y, const SamplerConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  Tensor<T> x = Tensor<T>::randn(y.shape(), rng);
  for (auto [t, t_prev] : sampling_plan(cfg, schedule.steps())) {
    Tensor<T> z = (cfg.mode == SamplerMode::ancestral && t > 1) ? Tensor<T>::randn(y.shape(), rng) : Tensor<T>(y.shape());
    std::vector<int> steps(y.n(), t);
    Tensor<T> eps_hat = cnp.predict(concat_channels<T>({&x, &y}), steps);
    Tensor<T> x0 = predict_x0(x, eps_hat, t, schedule);
    if (cfg.clip_intermediate) x0 = clip(x0, T(-1), T(1));
    x = cfg.mode == SamplerMode::ancestral ? posterior_step(x0, x, t, z, schedule, cfg.noise_coeff)
                                           : ddim_step(x0, eps_hat, t, t_prev, schedule);
  }
  return clip(x, T(-1), T(1));
}

}  // namespace decloud
