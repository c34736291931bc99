#pragma once

// Image-quality metrics on (bands, height, width) images.

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>

#include "decloud/nn.hpp"

namespace decloud {

inline constexpr double kPsnrCap = 100.0;

/// Maps the internal [-1, 1] range to the [0, 1] storage scale.
template <class T>
Tensor<T> to_unit_range(const Tensor<T>& x) {
  return map(x, [](T v) { return (v + T(1)) / T(2); });
}

/// 10 log10(peak^2 / MSE) over all bands; identical images give the 100 dB cap.
template <class T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak) {
  require_same_shape(a, b, "psnr");
  if (!(peak > 0)) throw std::invalid_argument("psnr: peak must be positive");
  if (a.empty()) throw std::invalid_argument("psnr: empty image");
  double se = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = double(a[i]) - double(b[i]);
    se += d * d;
  }
  double mse = se / double(a.size());
  if (mse == 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;
};

/// Mean local SSIM with a Gaussian window over valid positions, averaged per band.
template <class T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, const SsimOptions& o = {}) {
  require_same_shape(a, b, "ssim");
  if (a.rank() != 3) throw ShapeError("ssim: expected (bands, height, width)");
  const int c = a.dim(0), h = a.dim(1), w = a.dim(2), k = o.window;
  if (k < 1 || h < k || w < k)
    throw std::invalid_argument("ssim: image " + std::to_string(h) + "x" + std::to_string(w) + " smaller than window " +
                                std::to_string(k));
  std::vector<double> g(k);
  double gs = 0;
  for (int i = 0; i < k; ++i) gs += g[i] = std::exp(-0.5 * std::pow((i - (k - 1) / 2.0) / o.sigma, 2));
  for (auto& v : g) v /= gs;
  const double c1 = std::pow(o.k1 * o.data_range, 2), c2 = std::pow(o.k2 * o.data_range, 2);
  const int oh = h - k + 1, ow = w - k + 1;

  // separable filtering of one plane into the valid region
  auto filter = [&](const std::vector<double>& src) {
    std::vector<double> rows(static_cast<std::size_t>(h) * ow), out(static_cast<std::size_t>(oh) * ow);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < ow; ++x) {
        double s = 0;
        for (int i = 0; i < k; ++i) s += g[i] * src[static_cast<std::size_t>(y) * w + x + i];
        rows[static_cast<std::size_t>(y) * ow + x] = s;
      }
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double s = 0;
        for (int i = 0; i < k; ++i) s += g[i] * rows[static_cast<std::size_t>(y + i) * ow + x];
        out[static_cast<std::size_t>(y) * ow + x] = s;
      }
    return out;
  };

  const std::size_t hw = static_cast<std::size_t>(h) * w;
  double total = 0;
  for (int band = 0; band < c; ++band) {
    std::vector<double> x(hw), y(hw), xx(hw), yy(hw), xy(hw);
    for (std::size_t i = 0; i < hw; ++i) {
      x[i] = a[band * hw + i];
      y[i] = b[band * hw + i];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    auto mx = filter(x), my = filter(y), sxx = filter(xx), syy = filter(yy), sxy = filter(xy);
    double acc = 0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
      acc += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    total += acc / double(mx.size());
  }
  return total / c;
}

/// Pluggable perceptual distance (LPIPS-style). Inputs are on the [-1, 1] scale.
class PerceptualBackend {
 public:
  virtual ~PerceptualBackend() = default;
  virtual std::string name() const = 0;
  virtual double distance(const Tensor<float>& a, const Tensor<float>& b) const = 0;
};

struct PerceptualResult {
  std::optional<double> value;
  std::string diagnostic;
  bool available() const { return value.has_value(); }
};

/// Never substitutes a number when no backend is configured or the backend fails.
template <class T>
PerceptualResult perceptual_distance(const Tensor<T>& a, const Tensor<T>& b, const PerceptualBackend* backend) {
  require_same_shape(a, b, "perceptual_distance");
  if (!backend) return {std::nullopt, "unavailable: no perceptual backend configured"};
  try {
    double d = backend->distance(a.template cast<float>(), b.template cast<float>());
    if (!std::isfinite(d)) return {std::nullopt, "unavailable: backend '" + backend->name() + "' returned non-finite"};
    return {d, {}};
  } catch (const std::exception& e) {
    return {std::nullopt, "unavailable: backend '" + backend->name() + "' failed: " + e.what()};
  }
}

/// LPIPS-form distance over a stack of 3x3 conv + ReLU feature layers: features are
/// unit-normalized across channels, squared differences averaged spatially and summed
/// over layers. Weights come from a trained network; the seeded constructor gives a
/// random-feature instance useful only for testing the plumbing.
class FeatureDistanceBackend final : public PerceptualBackend {
 public:
  FeatureDistanceBackend(int bands, std::vector<int> widths, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    int in = bands;
    for (int wd : widths) {
      layers_.emplace_back(in, wd, 3, rng, 1);
      in = wd;
    }
  }

  std::string name() const override { return "feature_distance"; }

  double distance(const Tensor<float>& a, const Tensor<float>& b) const override {
    require_same_shape(a, b, "feature_distance");
    Shape s = a.shape();
    if (s.size() == 3) s.insert(s.begin(), 1);
    ag::NoGradGuard guard;
    ag::Var<float> fa = ag::constant(a.reshaped(s)), fb = ag::constant(b.reshaped(s));
    double total = 0;
    for (const auto& layer : layers_) {
      fa = ag::constant(map(layer(fa).value(), [](float v) { return std::max(v, 0.0f); }));
      fb = ag::constant(map(layer(fb).value(), [](float v) { return std::max(v, 0.0f); }));
      total += layer_distance(fa.value(), fb.value());
    }
    return total;
  }

  nn::ParamList<float> parameters() const {
    nn::ParamList<float> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(out, "layer." + std::to_string(i));
    return out;
  }

 private:
  static double layer_distance(const Tensor<float>& x, const Tensor<float>& y) {
    const int n = x.n(), c = x.c();
    const std::size_t hw = static_cast<std::size_t>(x.h()) * x.w();
    double acc = 0;
    for (int b = 0; b < n; ++b)
      for (std::size_t p = 0; p < hw; ++p) {
        double nx = 0, ny = 0;
        for (int ch = 0; ch < c; ++ch) {
          nx += std::pow(x[(static_cast<std::size_t>(b) * c + ch) * hw + p], 2);
          ny += std::pow(y[(static_cast<std::size_t>(b) * c + ch) * hw + p], 2);
        }
        nx = std::sqrt(nx) + 1e-10;
        ny = std::sqrt(ny) + 1e-10;
        for (int ch = 0; ch < c; ++ch) {
          double d = x[(static_cast<std::size_t>(b) * c + ch) * hw + p] / nx -
                     y[(static_cast<std::size_t>(b) * c + ch) * hw + p] / ny;
          acc += d * d;
        }
      }
    return acc / double(hw * n);
  }

  std::vector<nn::Conv2d<float>> layers_;
};

struct ImageMetrics {
  std::string id;
  double psnr = 0;
  double ssim = 0;
  std::optional<double> lpips;
};

/// Mean with a canonical summation order, so it is bitwise invariant to the
/// order in which images were evaluated.
inline double order_invariant_mean(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  long double s = 0;
  for (double x : v) s += x;
  return static_cast<double>(s / v.size());
}

struct MetricReport {
  std::string method;
  double peak = 1.0;
  std::vector<ImageMetrics> images;
  std::string lpips_status = "unavailable";

  bool has_lpips() const {
    return !images.empty() && std::all_of(images.begin(), images.end(), [](const auto& m) { return m.lpips.has_value(); });
  }
  double mean_psnr() const { return collect([](const ImageMetrics& m) { return m.psnr; }); }
  double mean_ssim() const { return collect([](const ImageMetrics& m) { return m.ssim; }); }
  std::optional<double> mean_lpips() const {
    if (!has_lpips()) return std::nullopt;
    return collect([](const ImageMetrics& m) { return *m.lpips; });
  }

 private:
  template <class F>
  double collect(F f) const {
    std::vector<double> v;
    for (const auto& m : images) v.push_back(f(m));
    return order_invariant_mean(std::move(v));
  }
};

/// Scores one prediction against its target; both on the internal [-1, 1] scale.
/// PSNR and SSIM are computed on the [0, 1] storage scale (peak 1).
template <class T>
ImageMetrics score_image(const std::string& id, const Tensor<T>& pred, const Tensor<T>& target,
                         const PerceptualBackend* backend = nullptr) {
  auto p = to_unit_range(pred), t = to_unit_range(target);
  ImageMetrics m{id, psnr(p, t, 1.0), ssim(p, t), std::nullopt};
  if (backend) m.lpips = perceptual_distance(pred, target, backend).value;
  return m;
}

}  // namespace decloud
