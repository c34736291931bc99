#pragma once

// Losses and the three-stage coarse-to-fine protocol:
//   cnp_small  CNP alone on reduced-size images (noise-prediction L2)
//   wa_frozen  WA alone against the frozen CNP (L1 on the fused estimate)
//   joint      both networks at full size, lambda * L_ddpm + L_wa

#include <functional>
#include <numeric>

#include "decloud/optim.hpp"
#include "decloud/sampler.hpp"

namespace decloud {

enum class StageKind { cnp_small, wa_frozen, joint };

inline std::string to_string(StageKind s) {
  switch (s) {
    case StageKind::cnp_small: return "cnp_small";
    case StageKind::wa_frozen: return "wa_frozen";
    case StageKind::joint: return "joint";
  }
  return "?";
}

inline StageKind stage_from_string(const std::string& s) {
  if (s == "cnp_small") return StageKind::cnp_small;
  if (s == "wa_frozen") return StageKind::wa_frozen;
  if (s == "joint") return StageKind::joint;
  throw std::invalid_argument("unknown stage '" + s + "' (expected cnp_small, wa_frozen or joint)");
}

/// Stages that must have completed before `s` may run.
inline std::vector<StageKind> stage_prerequisites(StageKind s) {
  switch (s) {
    case StageKind::cnp_small: return {};
    case StageKind::wa_frozen: return {StageKind::cnp_small};
    case StageKind::joint: return {StageKind::cnp_small, StageKind::wa_frozen};
  }
  return {};
}

struct StageConfig {
  StageKind stage = StageKind::cnp_small;
  int image_size = 32;
  int batch_size = 8;
  double learning_rate = 1e-5;
  int iterations = 1000;
  double lambda = 1.0;
  bool clip_x0 = true;          // clip x0_eps to [-1, 1] as the sampler does
  bool plateau_stop = false;    // stop once the loss stops improving
  int plateau_window = 200;
  double plateau_tolerance = 0.01;
  std::uint64_t seed = 0;

  bool trains_cnp() const { return stage != StageKind::wa_frozen; }
  bool trains_wa() const { return stage != StageKind::cnp_small; }

  void validate() const {
    if (image_size < 1 || batch_size < 1 || iterations < 0) throw std::invalid_argument("StageConfig: bad sizes");
    if (!(learning_rate > 0)) throw std::invalid_argument("StageConfig: learning_rate must be positive");
    if (!(lambda > 0)) throw std::invalid_argument("StageConfig: lambda must be positive");
    if (plateau_window < 1) throw std::invalid_argument("StageConfig: plateau_window must be positive");
  }
};

/// Training failure (e.g. a non-finite loss).
class StageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A stage was requested before the stages it builds on.
class PrerequisiteError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct LossReport {
  std::string stage;
  std::vector<double> ddpm, wa, total;
  bool stopped_on_plateau = false;

  std::size_t iterations() const { return total.size(); }

  /// Mean of `series` over iterations [begin, end).
  static double window_mean(const std::vector<double>& series, std::size_t begin, std::size_t end) {
    end = std::min(end, series.size());
    if (begin >= end) return std::numeric_limits<double>::quiet_NaN();
    return std::accumulate(series.begin() + begin, series.begin() + end, 0.0) / double(end - begin);
  }

  /// Trailing running average of the total loss at each iteration.
  std::vector<double> running_average(std::size_t window) const {
    std::vector<double> out(total.size());
    double acc = 0;
    for (std::size_t i = 0; i < total.size(); ++i) {
      acc += total[i];
      if (i >= window) acc -= total[i - window];
      out[i] = acc / double(std::min(i + 1, window));
    }
    return out;
  }

  std::string csv(std::size_t window = 100) const {
    std::string s = "iteration,l_ddpm,l_wa,total,running_total\n";
    auto run = running_average(window);
    auto cell = [](const std::vector<double>& v, std::size_t i) {
      return i < v.size() ? std::to_string(v[i]) : std::string();
    };
    for (std::size_t i = 0; i < total.size(); ++i)
      s += std::to_string(i + 1) + "," + cell(ddpm, i) + "," + cell(wa, i) + "," + std::to_string(total[i]) + "," +
           std::to_string(run[i]) + "\n";
    return s;
  }
};

/// Noise-prediction loss: mean squared error between eps and the CNP's estimate.
template <class T>
ag::Var<T> loss_ddpm(const UNet<T>& cnp, const Tensor<T>& x0, const Tensor<T>& y, const std::vector<int>& steps,
                     const Tensor<T>& eps, const Schedule& s, bool training = true) {
  require_same_shape(x0, y, "loss_ddpm(x0, y)");
  require_same_shape(x0, eps, "loss_ddpm(x0, eps)");
  auto xt = forward_sample(x0, steps, eps, s);
  auto eps_hat = cnp.forward(ag::constant(concat_channels<T>({&xt, &y})), steps, training);
  return ag::mse(eps_hat, ag::constant(eps));
}

/// L1 between the clean target and (1 - W) * x0_eps + W * x0_ref, with W from the WA.
/// x0_eps enters as a constant, so only WA parameters receive gradient.
template <class T>
ag::Var<T> loss_wa(const UNet<T>& wa, const Tensor<T>& x0_eps, const Tensor<T>& x0_ref, const Tensor<T>& x0_true,
                   const Tensor<T>& xt, const Tensor<T>& y, const std::vector<int>& steps, bool training = true) {
  require_same_shape(x0_eps, x0_ref, "loss_wa(x0_eps, x0_ref)");
  require_same_shape(x0_eps, x0_true, "loss_wa(x0_eps, x0_true)");
  auto w = wa.forward(ag::constant(concat_channels<T>({&xt, &y, &x0_ref})), steps, training);
  // x0_eps + W * (x0_ref - x0_eps) == (1 - W) * x0_eps + W * x0_ref
  auto fused = ag::add(ag::constant(x0_eps), ag::mul(w, ag::constant(x0_ref - x0_eps)));
  return ag::mean_abs(fused, ag::constant(x0_true));
}

template <class T>
ag::Var<T> loss_joint(const ag::Var<T>& l_ddpm, const ag::Var<T>& l_wa, double lambda) {
  if (!std::isfinite(l_ddpm.item()) || !std::isfinite(l_wa.item()))
    throw std::invalid_argument("loss_joint: non-finite input");
  return ag::add(ag::scale(l_ddpm, static_cast<T>(lambda)), l_wa);
}

inline double loss_joint(double l_ddpm, double l_wa, double lambda) {
  if (!std::isfinite(l_ddpm) || !std::isfinite(l_wa)) throw std::invalid_argument("loss_joint: non-finite input");
  return lambda * l_ddpm + l_wa;
}

struct StageCallbacks {
  std::function<void(int iteration, double loss)> on_iteration;
  int checkpoint_every = 0;
  std::function<void(int iteration)> on_checkpoint;
};

/// Runs one training stage in place on `bundle` and marks it completed.
/// Frozen components are verified unchanged by checksum.
template <class T>
LossReport run_stage(const StageConfig& cfg, DenoiserBundle<T>& bundle, const std::vector<PairedSample<T>>& dataset,
                     const StageCallbacks& callbacks = {}) {
  cfg.validate();
  bundle.validate();
  for (auto pre : stage_prerequisites(cfg.stage))
    if (!bundle.has_stage(to_string(pre)))
      throw PrerequisiteError("stage " + to_string(cfg.stage) + " requires completed stage " + to_string(pre));
  if (dataset.empty()) throw std::invalid_argument("run_stage: empty dataset");
  for (const auto& s : dataset) {
    validate_sample(s);
    if (s.bands() != bundle.bands)
      throw std::invalid_argument("run_stage: sample '" + s.id + "' has " + std::to_string(s.bands()) +
                                  " bands, bundle expects " + std::to_string(bundle.bands));
  }

  bool same_size = std::all_of(dataset.begin(), dataset.end(), [&](const PairedSample<T>& s) {
    return s.height() == cfg.image_size && s.width() == cfg.image_size;
  });
  const auto data = same_size ? dataset : resize_dataset(dataset, cfg.image_size);

  // The reference is frozen and deterministic, so its predictions are cached once.
  std::vector<Tensor<T>> ref_cache;
  if (cfg.trains_wa()) {
    for (const auto& s : data) {
      auto in = s.cloudy.reshaped({1, s.bands(), s.height(), s.width()});
      ref_cache.push_back(predict_reference(*bundle.reference, in, bundle.bands).reshaped(s.clear.shape()));
    }
  }

  auto cnp_sum = nn::parameter_checksum(bundle.cnp.parameters());
  auto wa_sum = nn::parameter_checksum(bundle.wa.parameters());
  auto ref_sum = nn::parameter_checksum(bundle.reference->parameters());

  nn::ParamList<T> params;
  if (cfg.trains_cnp()) params = bundle.cnp.parameters();
  if (cfg.trains_wa())
    for (auto& p : bundle.wa.parameters()) params.push_back(p);
  optim::Adam<T> opt(params, cfg.learning_rate);
  nn::zero_grad(bundle.cnp.parameters());
  nn::zero_grad(bundle.wa.parameters());

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<int> pick_t(1, bundle.schedule.steps());
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  LossReport report;
  report.stage = to_string(cfg.stage);
  for (int it = 0; it < cfg.iterations; ++it) {
    std::vector<std::size_t> idx;
    while (static_cast<int>(idx.size()) < std::min<int>(cfg.batch_size, data.size())) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    auto [y, x0] = make_batch(data, idx);
    std::vector<int> steps(idx.size());
    for (auto& t : steps) t = pick_t(rng);
    auto eps = Tensor<T>::randn(x0.shape(), rng);
    auto xt = forward_sample(x0, steps, eps, bundle.schedule);
    Tensor<T> x0_ref;
    if (cfg.trains_wa()) {
      std::vector<Tensor<T>> refs;
      for (auto i : idx) refs.push_back(ref_cache[i]);
      x0_ref = stack_batch(refs);
    }

    opt.zero_grad();
    ag::Var<T> loss;
    double l_ddpm = std::numeric_limits<double>::quiet_NaN(), l_wa = l_ddpm;
    auto x0_from = [&](const Tensor<T>& eps_hat) {
      auto e = predict_x0(xt, eps_hat, steps, bundle.schedule);
      return cfg.clip_x0 ? clip(e, T(-1), T(1)) : e;
    };
    switch (cfg.stage) {
      case StageKind::cnp_small: {
        loss = ag::mse(bundle.cnp.forward(ag::constant(concat_channels<T>({&xt, &y})), steps, true),
                       ag::constant(eps));
        l_ddpm = loss.item();
        break;
      }
      case StageKind::wa_frozen: {
        auto eps_hat = bundle.cnp.predict(concat_channels<T>({&xt, &y}), steps);
        loss = loss_wa(bundle.wa, x0_from(eps_hat), x0_ref, x0, xt, y, steps, true);
        l_wa = loss.item();
        break;
      }
      case StageKind::joint: {
        auto eps_hat = bundle.cnp.forward(ag::constant(concat_channels<T>({&xt, &y})), steps, true);
        auto ld = ag::mse(eps_hat, ag::constant(eps));
        auto lw = loss_wa(bundle.wa, x0_from(eps_hat.value()), x0_ref, x0, xt, y, steps, true);
        l_ddpm = ld.item();
        l_wa = lw.item();
        if (!std::isfinite(l_ddpm) || !std::isfinite(l_wa)) {
          loss = ag::constant(Tensor<T>({1}, std::numeric_limits<T>::quiet_NaN()));
          break;
        }
        loss = loss_joint(ld, lw, cfg.lambda);
        break;
      }
    }
    double total = loss.item();
    if (!std::isfinite(total))
      throw StageError("stage " + report.stage + ": non-finite loss at iteration " + std::to_string(it + 1) +
                       " (l_ddpm=" + std::to_string(l_ddpm) + ", l_wa=" + std::to_string(l_wa) + ")");
    ag::backward(loss);
    opt.step();

    if (!std::isnan(l_ddpm)) report.ddpm.push_back(l_ddpm);
    if (!std::isnan(l_wa)) report.wa.push_back(l_wa);
    report.total.push_back(total);
    if (callbacks.on_iteration) callbacks.on_iteration(it + 1, total);
    if (callbacks.checkpoint_every > 0 && callbacks.on_checkpoint && (it + 1) % callbacks.checkpoint_every == 0)
      callbacks.on_checkpoint(it + 1);

    const std::size_t win = cfg.plateau_window, n = report.total.size();
    if (cfg.plateau_stop && n >= 2 * win && n % win == 0) {
      double prev = LossReport::window_mean(report.total, n - 2 * win, n - win);
      double cur = LossReport::window_mean(report.total, n - win, n);
      if ((prev - cur) / std::abs(prev) < cfg.plateau_tolerance) {
        report.stopped_on_plateau = true;
        break;
      }
    }
  }

  if (!cfg.trains_cnp() && nn::parameter_checksum(bundle.cnp.parameters()) != cnp_sum)
    throw std::logic_error("run_stage: frozen CNP was modified");
  if (!cfg.trains_wa() && nn::parameter_checksum(bundle.wa.parameters()) != wa_sum)
    throw std::logic_error("run_stage: frozen WA was modified");
  if (nn::parameter_checksum(bundle.reference->parameters()) != ref_sum)
    throw std::logic_error("run_stage: frozen reference was modified");
  nn::zero_grad(bundle.cnp.parameters());
  nn::zero_grad(bundle.wa.parameters());

  if (!bundle.has_stage(report.stage)) bundle.completed_stages.push_back(report.stage);
  return report;
}

}  // namespace decloud
