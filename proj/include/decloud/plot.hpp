#pragma once

// Minimal raster line charts for the numeric figure-analogue outputs. No text:
// the CSV/JSON files carry the numbers, the image only shows the shape.

#include <array>
#include <cmath>

#include "decloud/tensor.hpp"

namespace decloud::plot {

struct Series {
  std::vector<double> x, y;
};

using Rgb = std::array<float, 3>;

inline const std::vector<Rgb>& palette() {
  static const std::vector<Rgb> p{{0.12f, 0.47f, 0.71f}, {1.0f, 0.5f, 0.05f}, {0.17f, 0.63f, 0.17f},
                                  {0.84f, 0.15f, 0.16f}, {0.58f, 0.4f, 0.74f}};
  return p;
}

/// Renders series on shared axes into a (3, height, width) image on [-1, 1].
/// `bars` draws vertical bars instead of polylines (histograms).
inline Tensor<float> line_chart(const std::vector<Series>& series, int width = 640, int height = 400, bool bars = false) {
  if (width < 64 || height < 64) throw std::invalid_argument("line_chart: canvas too small");
  Tensor<float> img({3, height, width}, 1.0f);
  const std::size_t hw = static_cast<std::size_t>(height) * width;
  auto put = [&](int x, int y, const Rgb& c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    for (int b = 0; b < 3; ++b) img[b * hw + static_cast<std::size_t>(y) * width + x] = c[b] * 2 - 1;
  };
  auto line = [&](int x0, int y0, int x1, int y1, const Rgb& c) {
    int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0), sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1, err = dx + dy;
    while (true) {
      put(x0, y0, c);
      put(x0, y0 + 1, c);
      if (x0 == x1 && y0 == y1) break;
      int e2 = 2 * err;
      if (e2 >= dy) err += dy, x0 += sx;
      if (e2 <= dx) err += dx, y0 += sy;
    }
  };

  double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw std::invalid_argument("line_chart: x/y length mismatch");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      xmin = std::min(xmin, s.x[i]), xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]), ymax = std::max(ymax, s.y[i]);
    }
  }
  if (!std::isfinite(xmin)) throw std::invalid_argument("line_chart: no finite points");
  if (bars) ymin = std::min(ymin, 0.0);
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  const int left = 40, right = width - 16, top = 16, bottom = height - 32;
  auto px = [&](double x) { return left + static_cast<int>(std::lround((x - xmin) / (xmax - xmin) * (right - left))); };
  auto py = [&](double y) { return bottom - static_cast<int>(std::lround((y - ymin) / (ymax - ymin) * (bottom - top))); };

  const Rgb grid{0.85f, 0.85f, 0.85f}, axis{0.2f, 0.2f, 0.2f};
  for (int k = 1; k < 5; ++k) {
    int y = top + k * (bottom - top) / 5;
    line(left, y, right, y, grid);
  }
  line(left, bottom, right, bottom, axis);
  line(left, top, left, bottom, axis);

  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const Rgb& c = palette()[si % palette().size()];
    int prev_x = -1, prev_y = -1;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      int x = px(s.x[i]), y = py(s.y[i]);
      if (bars) {
        int half = std::max(1, (right - left) / int(4 * std::max<std::size_t>(1, s.x.size())));
        for (int xx = x - half; xx <= x + half; ++xx) line(xx, py(std::max(0.0, ymin)), xx, y, c);
        continue;
      }
      if (prev_x >= 0) line(prev_x, prev_y, x, y, c);
      for (int d = -2; d <= 2; ++d) put(x + d, y, c), put(x, y + d, c);
      prev_x = x, prev_y = y;
    }
  }
  return img;
}

/// Side-by-side strip of (C, H, W) images with a 2-pixel white gutter; the first
/// three bands (or band 0 for single-band data) become RGB.
template <class T>
Tensor<float> image_strip(const std::vector<Tensor<T>>& images, std::array<int, 3> rgb_bands = {2, 1, 0}) {
  if (images.empty()) throw std::invalid_argument("image_strip: no images");
  const int h = images.front().dim(1), w = images.front().dim(2), gap = 2;
  const int n = static_cast<int>(images.size());
  Tensor<float> out({3, h, n * w + (n - 1) * gap}, 1.0f);
  const int ow = out.dim(2);
  for (int k = 0; k < n; ++k) {
    const auto& im = images[k];
    if (im.rank() != 3 || im.dim(1) != h || im.dim(2) != w) throw ShapeError("image_strip: images differ in size");
    for (int b = 0; b < 3; ++b) {
      int src = im.dim(0) >= 3 ? std::min(rgb_bands[b], im.dim(0) - 1) : 0;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          out[(static_cast<std::size_t>(b) * h + y) * ow + k * (w + gap) + x] =
              static_cast<float>(im[(static_cast<std::size_t>(src) * h + y) * w + x]);
    }
  }
  return out;
}

}  // namespace decloud::plot
