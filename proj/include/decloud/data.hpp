#pragma once

// Paired cloudy/clear samples, dataset splitting, cloud masks and coverage
// statistics, resolution changes, and the synthetic scene/cloud generators used
// for desk-scale runs. Single images are rank-3 tensors (bands, height, width)
// with values normalized to [-1, 1].

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "decloud/tensor.hpp"

namespace decloud {

template <class T>
struct PairedSample {
  Tensor<T> cloudy;
  Tensor<T> clear;
  std::string id;
  double resolution = 0.5;  // meters per pixel

  int bands() const { return clear.dim(0); }
  int height() const { return clear.dim(1); }
  int width() const { return clear.dim(2); }
};

template <class T>
void validate_sample(const PairedSample<T>& s) {
  if (s.clear.rank() != 3) throw ShapeError("sample '" + s.id + "': images must be (bands, height, width)");
  require_same_shape(s.cloudy, s.clear, "paired sample");
}

/// Binary cloud mask; 0 marks cloudy pixels, 1 marks cloud-free pixels.
struct CloudMask {
  int height = 0, width = 0;
  std::vector<std::uint8_t> values;

  CloudMask() = default;
  CloudMask(int h, int w, std::uint8_t fill = 1) : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}
  std::uint8_t& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

/// Cloud coverage probability: the fraction of cloudy (0) pixels.
inline double compute_ccp(const CloudMask& mask) {
  if (mask.values.empty()) throw std::invalid_argument("compute_ccp: empty mask");
  std::size_t cloudy = 0;
  for (auto v : mask.values) {
    if (v > 1) throw std::invalid_argument("compute_ccp: mask entries must be 0 or 1");
    cloudy += v == 0;
  }
  return static_cast<double>(cloudy) / static_cast<double>(mask.values.size());
}

/// Flags pixels whose mean band brightness (on a [0, 1] scale) exceeds the
/// threshold, then applies one 3x3 majority vote over the in-bounds neighborhood.
template <class T>
CloudMask threshold_cloud_mask(const Tensor<T>& image, double threshold) {
  if (image.rank() != 3) throw ShapeError("threshold_cloud_mask: expected (bands, height, width)");
  int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<std::uint8_t> bright(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double lum = 0;
      for (int b = 0; b < c; ++b) lum += (image[(static_cast<std::size_t>(b) * h + y) * w + x] + 1.0) / 2.0;
      bright[static_cast<std::size_t>(y) * w + x] = lum / c > threshold;
    }
  CloudMask mask(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int votes = 0, total = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          ++total;
          votes += bright[static_cast<std::size_t>(yy) * w + xx];
        }
      mask.at(y, x) = 2 * votes > total ? 0 : 1;
    }
  return mask;
}

/// Deterministic shuffled partition. The train side receives round(ratio * n) items,
/// clamped so both sides are nonempty when n >= 2.
template <class Item>
std::pair<std::vector<Item>, std::vector<Item>> split_dataset(const std::vector<Item>& items, double ratio,
                                                              std::uint64_t seed) {
  if (items.empty()) throw std::invalid_argument("split_dataset: empty input");
  if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("split_dataset: ratio must lie in (0, 1)");
  std::size_t n = items.size();
  auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  if (n >= 2) n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::pair<std::vector<Item>, std::vector<Item>> out;
  for (std::size_t i = 0; i < n; ++i) (i < n_train ? out.first : out.second).push_back(items[order[i]]);
  return out;
}

/// Multi-octave value noise on an h x w grid, rescaled to [0, 1].
/// `cells` is the lattice period of the coarsest octave in pixels.
inline std::vector<double> value_noise(int h, int w, double cells, int octaves, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> field(static_cast<std::size_t>(h) * w, 0.0);
  double amp = 1.0, period = cells;
  auto smooth = [](double t) { return t * t * (3 - 2 * t); };
  for (int o = 0; o < octaves; ++o) {
    int gh = static_cast<int>(std::ceil(h / period)) + 2, gw = static_cast<int>(std::ceil(w / period)) + 2;
    std::vector<double> lattice(static_cast<std::size_t>(gh) * gw);
    for (auto& v : lattice) v = u(rng);
    double oy = u(rng), ox = u(rng);
    for (int y = 0; y < h; ++y) {
      double fy = y / period + oy;
      int iy = static_cast<int>(fy);
      double ty = smooth(fy - iy);
      for (int x = 0; x < w; ++x) {
        double fx = x / period + ox;
        int ix = static_cast<int>(fx);
        double tx = smooth(fx - ix);
        auto L = [&](int a, int b) { return lattice[static_cast<std::size_t>(a) * gw + b]; };
        double top = L(iy, ix) * (1 - tx) + L(iy, ix + 1) * tx;
        double bot = L(iy + 1, ix) * (1 - tx) + L(iy + 1, ix + 1) * tx;
        field[static_cast<std::size_t>(y) * w + x] += amp * (top * (1 - ty) + bot * ty);
      }
    }
    amp *= 0.5;
    period = std::max(1.0, period / 2);
  }
  auto [mn, mx] = std::minmax_element(field.begin(), field.end());
  double lo = *mn, span = std::max(*mx - *mn, 1e-12);
  for (auto& v : field) v = (v - lo) / span;
  return field;
}

/// Smooth cloud opacity field whose mean equals coverage * thickness (to bisection
/// precision). Values lie in [0, thickness].
inline std::vector<double> cloud_alpha(int h, int w, double coverage, double thickness, std::uint64_t seed) {
  if (!(coverage >= 0 && coverage <= 1) || !(thickness >= 0 && thickness <= 1))
    throw std::invalid_argument("cloud_alpha: coverage and thickness must lie in [0, 1]");
  std::size_t n = static_cast<std::size_t>(h) * w;
  if (coverage == 0.0 || thickness == 0.0) return std::vector<double>(n, 0.0);
  if (coverage == 1.0) return std::vector<double>(n, thickness);
  auto noise = value_noise(h, w, std::max(4.0, std::min(h, w) / 2.0), 4, seed);
  const double softness = 0.15;
  auto profile = [&](double q, std::vector<double>* out) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double a = std::clamp((noise[i] - q) / softness + 0.5, 0.0, 1.0);
      if (out) (*out)[i] = thickness * a;
      s += a;
    }
    return s / n;
  };
  // mean profile is nonincreasing in q; bracket covers both saturated ends
  double lo = -1.0, hi = 2.0;
  for (int it = 0; it < 80; ++it) {
    double mid = 0.5 * (lo + hi);
    (profile(mid, nullptr) > coverage ? lo : hi) = mid;
  }
  std::vector<double> alpha(n);
  profile(0.5 * (lo + hi), &alpha);
  return alpha;
}

/// Overlays a synthetic cloud: cloudy = (1 - a) * clear + a * white.
template <class T>
PairedSample<T> synth_cloud(const Tensor<T>& clear, double coverage, double thickness, std::uint64_t seed,
                            std::string id = {}, double resolution = 0.5) {
  if (clear.rank() != 3) throw ShapeError("synth_cloud: expected (bands, height, width)");
  int c = clear.dim(0), h = clear.dim(1), w = clear.dim(2);
  auto alpha = cloud_alpha(h, w, coverage, thickness, seed);
  PairedSample<T> s{clear, clear, std::move(id), resolution};
  if (coverage == 0.0 || thickness == 0.0) return s;
  std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int b = 0; b < c; ++b)
    for (std::size_t i = 0; i < hw; ++i) {
      T& v = s.cloudy[b * hw + i];
      v = static_cast<T>((1.0 - alpha[i]) * v + alpha[i] * 1.0);
    }
  return s;
}

/// Procedural multispectral scene: land-cover classes from a smooth field, each
/// with a band signature, plus fine texture and a few linear features.
template <class T>
Tensor<T> synth_scene(int bands, int size, std::uint64_t seed) {
  if (bands < 1 || size < 2) throw std::invalid_argument("synth_scene: bad dimensions");
  std::mt19937_64 rng(seed);
  // blue, green, red, nir reflectance on [0, 1]
  static constexpr std::array<std::array<double, 4>, 4> signatures{{
      {0.20, 0.25, 0.15, 0.05},  // water
      {0.10, 0.35, 0.15, 0.70},  // vegetation
      {0.30, 0.35, 0.45, 0.40},  // bare soil
      {0.45, 0.45, 0.45, 0.35},  // built-up
  }};
  auto cover = value_noise(size, size, size / 2.0, 2, rng());
  auto moisture = value_noise(size, size, size / 3.0, 2, rng());
  auto texture = value_noise(size, size, 3.0, 2, rng());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::array<double, 3> cuts{0.3 + 0.1 * u(rng), 0.55 + 0.1 * u(rng), 0.8 + 0.05 * u(rng)};
  double tilt = 0.1 * (u(rng) - 0.5);

  // up to two straight roads
  int roads = static_cast<int>(u(rng) * 3);
  std::vector<std::array<double, 3>> lines;
  for (int r = 0; r < roads; ++r) {
    double th = u(rng) * M_PI;
    lines.push_back({std::cos(th), std::sin(th), (u(rng) - 0.5) * size * 0.8});
  }

  Tensor<T> img({bands, size, size});
  std::size_t hw = static_cast<std::size_t>(size) * size;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      std::size_t i = static_cast<std::size_t>(y) * size + x;
      double v = cover[i];
      int cls = v < cuts[0] ? 0 : v < cuts[1] ? 1 : v < cuts[2] ? 2 : 3;
      bool road = false;
      for (auto& l : lines)
        road = road || std::abs(l[0] * (x - size / 2.0) + l[1] * (y - size / 2.0) - l[2]) < 0.8;
      for (int b = 0; b < bands; ++b) {
        double base = road ? 0.55 : signatures[cls][b % 4];
        double refl = base * (0.85 + 0.3 * moisture[i]) + 0.12 * (texture[i] - 0.5) + tilt * (b % 4 == 3 ? 1 : 0);
        img[b * hw + i] = static_cast<T>(std::clamp(refl, 0.0, 1.0) * 2.0 - 1.0);
      }
    }
  return img;
}

/// Builds `count` synthetic pairs with independent scenes and clouds.
template <class T>
std::vector<PairedSample<T>> synth_dataset(int count, int bands, int size, double coverage, double thickness,
                                           std::uint64_t seed, double resolution = 0.5) {
  std::vector<PairedSample<T>> out;
  out.reserve(count);
  std::mt19937_64 rng(seed);
  for (int i = 0; i < count; ++i) {
    auto scene_seed = rng(), cloud_seed = rng();
    char id[32];
    std::snprintf(id, sizeof id, "synth_%05d", i);
    out.push_back(synth_cloud(synth_scene<T>(bands, size, scene_seed), coverage, thickness, cloud_seed, id, resolution));
  }
  return out;
}

/// Bilinear resampling with half-pixel centers (a 2x reduction averages 2x2 blocks).
template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& img, int out_h, int out_w) {
  if (img.rank() != 3) throw ShapeError("resize_bilinear: expected (bands, height, width)");
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize_bilinear: empty target");
  int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (out_h == h && out_w == w) return img;
  Tensor<T> out({c, out_h, out_w});
  double sy = double(h) / out_h, sx = double(w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(h - 1));
    int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, h - 1);
    double ty = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(w - 1));
      int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, w - 1);
      double tx = fx - x0;
      for (int b = 0; b < c; ++b) {
        const T* p = img.data() + static_cast<std::size_t>(b) * h * w;
        double top = p[y0 * w + x0] * (1 - tx) + p[y0 * w + x1] * tx;
        double bot = p[y1 * w + x0] * (1 - tx) + p[y1 * w + x1] * tx;
        out[(static_cast<std::size_t>(b) * out_h + y) * out_w + x] = static_cast<T>(top * (1 - ty) + bot * ty);
      }
    }
  }
  return out;
}

template <class T>
Tensor<T> crop(const Tensor<T>& img, int top, int left, int size) {
  int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (top < 0 || left < 0 || top + size > h || left + size > w)
    throw std::invalid_argument("crop of " + std::to_string(size) + " at (" + std::to_string(top) + ", " +
                                std::to_string(left) + ") exceeds " + std::to_string(h) + "x" + std::to_string(w));
  Tensor<T> out({c, size, size});
  for (int b = 0; b < c; ++b)
    for (int y = 0; y < size; ++y)
      std::copy_n(img.data() + (static_cast<std::size_t>(b) * h + top + y) * w + left, size,
                  out.data() + (static_cast<std::size_t>(b) * size + y) * size);
  return out;
}

/// Downscales both members to the target ground resolution, then takes the same
/// square crop from each (centered unless an explicit offset is given).
template <class T>
PairedSample<T> resize_and_crop(const PairedSample<T>& s, double target_resolution, int crop_size, int top = -1,
                                int left = -1) {
  validate_sample(s);
  if (!(target_resolution >= s.resolution * (1 - 1e-9)))
    throw std::invalid_argument("resize_and_crop: target resolution must be coarser than or equal to the source");
  double factor = target_resolution / s.resolution;
  int nh = static_cast<int>(std::lround(s.height() / factor));
  int nw = static_cast<int>(std::lround(s.width() / factor));
  if (crop_size > nh || crop_size > nw)
    throw std::invalid_argument("resize_and_crop: crop " + std::to_string(crop_size) + " exceeds resized extent " +
                                std::to_string(nh) + "x" + std::to_string(nw));
  if (top < 0) top = (nh - crop_size) / 2;
  if (left < 0) left = (nw - crop_size) / 2;
  PairedSample<T> out;
  out.id = s.id;
  out.resolution = target_resolution;
  out.cloudy = crop(resize_bilinear(s.cloudy, nh, nw), top, left, crop_size);
  out.clear = crop(resize_bilinear(s.clear, nh, nw), top, left, crop_size);
  return out;
}

/// Stacks the chosen samples into (cloudy, clear) batches.
template <class T>
std::pair<Tensor<T>, Tensor<T>> make_batch(const std::vector<PairedSample<T>>& data,
                                           const std::vector<std::size_t>& indices) {
  std::vector<Tensor<T>> cloudy, clear;
  for (auto i : indices) {
    cloudy.push_back(data.at(i).cloudy);
    clear.push_back(data.at(i).clear);
  }
  return {stack_batch(cloudy), stack_batch(clear)};
}

/// Uniformly resizes every member (used for reduced-size training phases).
template <class T>
std::vector<PairedSample<T>> resize_dataset(const std::vector<PairedSample<T>>& data, int size) {
  std::vector<PairedSample<T>> out;
  out.reserve(data.size());
  for (const auto& s : data) {
    PairedSample<T> r = s;
    r.resolution = s.resolution * double(s.height()) / size;
    r.cloudy = resize_bilinear(s.cloudy, size, size);
    r.clear = resize_bilinear(s.clear, size, size);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace decloud
