#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace decloud {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ')';
  return os.str();
}

/// Dense row-major array. Rank-4 tensors are laid out (batch, channel, height, width).
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    for (int d : shape_)
      if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape_));
  }
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("data size " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor ones(Shape s) { return Tensor(std::move(s), T(1)); }
  static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }

  template <class Rng>
  static Tensor randn(Shape s, Rng& rng, T stddev = T(1)) {
    Tensor t(std::move(s));
    std::normal_distribution<double> nd(0.0, 1.0);
    for (auto& v : t.data_) v = static_cast<T>(nd(rng)) * stddev;
    return t;
  }
  template <class Rng>
  static Tensor uniform(Shape s, Rng& rng, T lo, T hi) {
    Tensor t(std::move(s));
    std::uniform_real_distribution<double> ud(lo, hi);
    for (auto& v : t.data_) v = static_cast<T>(ud(rng));
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  int dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  std::vector<T>& vec() noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // rank-4 accessors
  int n() const { return shape_.at(0); }
  int c() const { return shape_.at(1); }
  int h() const { return shape_.at(2); }
  int w() const { return shape_.at(3); }
  T& at(int b, int ch, int y, int x) { return data_[index4(b, ch, y, x)]; }
  const T& at(int b, int ch, int y, int x) const { return data_[index4(b, ch, y, x)]; }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != size()) throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  /// Samples [begin, end) along the leading axis.
  Tensor slice_batch(int begin, int end) const {
    if (rank() == 0 || begin < 0 || end > shape_[0] || begin > end) throw ShapeError("bad batch slice");
    std::size_t per = shape_[0] ? size() / shape_[0] : 0;
    Shape s = shape_;
    s[0] = end - begin;
    return Tensor(s, std::vector<T>(data_.begin() + begin * per, data_.begin() + end * per));
  }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(*this, o, "+=");
    for (std::size_t i = 0; i < size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    require_same_shape(*this, o, "-=");
    for (std::size_t i = 0; i < size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }
  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(Tensor a, T s) { return a *= s; }
  friend Tensor operator*(T s, Tensor a) { return a *= s; }

  bool operator==(const Tensor& o) const = default;

  T sum() const { return std::accumulate(data_.begin(), data_.end(), T(0)); }
  T mean() const { return data_.empty() ? T(0) : sum() / static_cast<T>(data_.size()); }
  T min() const { return *std::min_element(data_.begin(), data_.end()); }
  T max() const { return *std::max_element(data_.begin(), data_.end()); }
  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape_ != b.shape_)
      throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape_) + " vs " + shape_str(b.shape_));
  }

 private:
  std::size_t index4(int b, int ch, int y, int x) const {
    return ((static_cast<std::size_t>(b) * shape_[1] + ch) * shape_[2] + y) * shape_[3] + x;
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Elementwise map over one or more same-shape tensors.
template <class T, class F>
Tensor<T> map(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <class T, class F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, F f) {
  require_same_shape(a, b, "zip");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

template <class T>
Tensor<T> clip(const Tensor<T>& a, T lo, T hi) {
  return map(a, [=](T v) { return std::clamp(v, lo, hi); });
}

/// Concatenate rank-4 tensors along the channel axis.
template <class T>
Tensor<T> concat_channels(std::initializer_list<const Tensor<T>*> parts) {
  const Tensor<T>& first = **parts.begin();
  int n = first.n(), h = first.h(), w = first.w(), c = 0;
  for (auto* p : parts) {
    if (p->rank() != 4 || p->n() != n || p->h() != h || p->w() != w)
      throw ShapeError("concat_channels: incompatible " + shape_str(p->shape()));
    c += p->c();
  }
  Tensor<T> out({n, c, h, w});
  std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int b = 0; b < n; ++b) {
    T* dst = out.data() + static_cast<std::size_t>(b) * c * hw;
    for (auto* p : parts) {
      const T* src = p->data() + static_cast<std::size_t>(b) * p->c() * hw;
      dst = std::copy(src, src + p->c() * hw, dst);
    }
  }
  return out;
}

/// Stack rank-3 (C, H, W) or rank-4 single-sample tensors into one batch.
template <class T>
Tensor<T> stack_batch(const std::vector<Tensor<T>>& items) {
  if (items.empty()) throw ShapeError("stack_batch: empty");
  Shape inner = items.front().shape();
  if (inner.size() == 4) {
    if (inner[0] != 1) throw ShapeError("stack_batch: rank-4 items must have batch 1");
    inner.erase(inner.begin());
  }
  Shape s = inner;
  s.insert(s.begin(), static_cast<int>(items.size()));
  Tensor<T> out(s);
  std::size_t per = shape_numel(inner);
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].size() != per) throw ShapeError("stack_batch: size mismatch");
    std::copy(items[i].data(), items[i].data() + per, out.data() + i * per);
  }
  return out;
}

/// FNV-1a over the raw bytes; used to assert parameters stayed bitwise unchanged.
template <class T>
std::uint64_t checksum(std::span<const T> values, std::uint64_t h = 1469598103934665603ull) {
  auto bytes = std::as_bytes(values);
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace decloud
