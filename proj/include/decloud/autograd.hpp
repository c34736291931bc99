#pragma once

// Minimal reverse-mode automatic differentiation over Tensor<T>.
//
// Every op records its parents and a backward closure when gradient tracking is
// enabled and at least one input requires a gradient. Leaves created with
// requires_grad = true accumulate gradients; the optimizer clears them.

#include <functional>
#include <memory>
#include <unordered_set>

#include "decloud/blas.hpp"
#include "decloud/tensor.hpp"

namespace decloud::ag {

namespace detail {
inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording for its lifetime (inference, stop-gradient branches).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled()) { detail::grad_enabled() = false; }
  ~NoGradGuard() { detail::grad_enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled(); }

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Tensor<T>& g) {
    if (!requires_grad) return;
    if (grad.empty() && !g.empty()) {
      grad = g;
    } else {
      grad += g;
    }
  }
  void accumulate(Tensor<T>&& g) {
    if (!requires_grad) return;
    if (grad.empty() && !g.empty()) {
      grad = std::move(g);
    } else {
      grad += g;
    }
  }
  /// Lazily zero-initialized gradient buffer for in-place accumulation.
  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  void zero_grad() { node_->grad = Tensor<T>(); }
  T item() const {
    if (node_->value.size() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
    return node_->value[0];
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
Var<T> constant(Tensor<T> v) {
  return Var<T>(std::move(v), false);
}

/// Same value, severed from the graph.
template <class T>
Var<T> detach(const Var<T>& v) {
  return Var<T>(v.value(), false);
}

/// Builds a result node; records the graph only when some input needs a gradient.
template <class T>
Var<T> make_result(Tensor<T> value, std::vector<std::shared_ptr<Node<T>>> parents,
                   std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (auto& p : parents) any = any || p->requires_grad;
    if (any) {
      node->requires_grad = true;
      node->parents = std::move(parents);
      node->backward = std::move(backward);
    }
  }
  return Var<T>(std::move(node));
}

/// Backpropagates from a scalar root; the graph is released afterwards.
template <class T>
void backward(const Var<T>& root) {
  if (root.value().size() != 1) throw ShapeError("backward() requires a scalar root");
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* p = node->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->grad = Tensor<T>(root.shape(), T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  for (Node<T>* n : order) {
    if (n->backward) {
      n->backward = nullptr;
      n->parents.clear();
      n->grad = Tensor<T>();
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "add");
  return make_result<T>(a.value() + b.value(), {a.node(), b.node()}, [](Node<T>& self) {
    self.parents[0]->accumulate(self.grad);
    self.parents[1]->accumulate(self.grad);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "sub");
  return make_result<T>(a.value() - b.value(), {a.node(), b.node()}, [](Node<T>& self) {
    self.parents[0]->accumulate(self.grad);
    if (self.parents[1]->requires_grad) self.parents[1]->accumulate(self.grad * T(-1));
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  auto out = zip(a.value(), b.value(), [](T x, T y) { return x * y; });
  return make_result<T>(std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) pa.accumulate(zip(self.grad, pb.value, [](T g, T y) { return g * y; }));
    if (pb.requires_grad) pb.accumulate(zip(self.grad, pa.value, [](T g, T x) { return g * x; }));
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  return make_result<T>(a.value() * s, {a.node()}, [s](Node<T>& self) { self.parents[0]->accumulate(self.grad * s); });
}

template <class T>
Var<T> silu(const Var<T>& a) {
  auto out = map(a.value(), [](T x) { return x / (T(1) + std::exp(-x)); });
  return make_result<T>(std::move(out), {a.node()}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    p.accumulate(zip(self.grad, p.value, [](T g, T x) {
      T s = T(1) / (T(1) + std::exp(-x));
      return g * s * (T(1) + x * (T(1) - s));
    }));
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  auto out = map(a.value(), [](T x) { return T(1) / (T(1) + std::exp(-x)); });
  return make_result<T>(std::move(out), {a.node()}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    p.accumulate(zip(self.grad, self.value, [](T g, T s) { return g * s * (T(1) - s); }));
  });
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  auto out = map(a.value(), [](T x) { return std::tanh(x); });
  return make_result<T>(std::move(out), {a.node()}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    p.accumulate(zip(self.grad, self.value, [](T g, T y) { return g * (T(1) - y * y); }));
  });
}

/// Hard squash into [lo, hi]; gradient passes only strictly inside the interval.
template <class T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  auto out = map(a.value(), [=](T x) { return std::clamp(x, lo, hi); });
  return make_result<T>(std::move(out), {a.node()}, [lo, hi](Node<T>& self) {
    auto& p = *self.parents[0];
    p.accumulate(zip(self.grad, p.value, [=](T g, T x) { return (x > lo && x < hi) ? g : T(0); }));
  });
}

/// Inverted dropout; identity when p == 0 or when not training.
template <class T, class Rng>
Var<T> dropout(const Var<T>& a, T p, bool training, Rng& rng) {
  if (!training || p <= T(0)) return a;
  Tensor<T> mask(a.shape());
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  for (auto& m : mask.vec()) m = keep(rng) ? T(1) / (T(1) - p) : T(0);
  auto out = zip(a.value(), mask, [](T x, T m) { return x * m; });
  return make_result<T>(std::move(out), {a.node()}, [mask = std::move(mask)](Node<T>& self) {
    self.parents[0]->accumulate(zip(self.grad, mask, [](T g, T m) { return g * m; }));
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses (scalar results of shape {1})

template <class T>
Var<T> mean(const Var<T>& a) {
  T n = static_cast<T>(a.value().size());
  return make_result<T>(Tensor<T>({1}, a.value().mean()), {a.node()}, [n](Node<T>& self) {
    auto& p = *self.parents[0];
    p.accumulate(Tensor<T>(p.value.shape(), self.grad[0] / n));
  });
}

/// Mean squared error between a prediction and a target.
template <class T>
Var<T> mse(const Var<T>& pred, const Var<T>& target) {
  require_same_shape(pred.value(), target.value(), "mse");
  const auto& a = pred.value();
  const auto& b = target.value();
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += double(a[i] - b[i]) * double(a[i] - b[i]);
  T n = static_cast<T>(a.size());
  return make_result<T>(Tensor<T>({1}, static_cast<T>(acc / a.size())), {pred.node(), target.node()},
                        [n](Node<T>& self) {
                          auto& pa = *self.parents[0];
                          auto& pb = *self.parents[1];
                          T k = T(2) * self.grad[0] / n;
                          auto d = zip(pa.value, pb.value, [k](T x, T y) { return k * (x - y); });
                          if (pb.requires_grad) pb.accumulate(d * T(-1));
                          pa.accumulate(std::move(d));
                        });
}

/// Mean absolute error; the subgradient at zero is taken as zero.
template <class T>
Var<T> mean_abs(const Var<T>& pred, const Var<T>& target) {
  require_same_shape(pred.value(), target.value(), "mean_abs");
  const auto& a = pred.value();
  const auto& b = target.value();
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(double(a[i]) - double(b[i]));
  T n = static_cast<T>(a.size());
  return make_result<T>(Tensor<T>({1}, static_cast<T>(acc / a.size())), {pred.node(), target.node()},
                        [n](Node<T>& self) {
                          auto& pa = *self.parents[0];
                          auto& pb = *self.parents[1];
                          T k = self.grad[0] / n;
                          auto d = zip(pa.value, pb.value, [k](T x, T y) { return x > y ? k : (x < y ? -k : T(0)); });
                          if (pb.requires_grad) pb.accumulate(d * T(-1));
                          pa.accumulate(std::move(d));
                        });
}

// ---------------------------------------------------------------------------
// Shape plumbing

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  auto out = decloud::concat_channels<T>({&a.value(), &b.value()});
  return make_result<T>(std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    int n = self.value.n(), ca = pa.value.c(), cb = pb.value.c();
    std::size_t hw = static_cast<std::size_t>(self.value.h()) * self.value.w();
    Tensor<T> ga(pa.value.shape()), gb(pb.value.shape());
    for (int i = 0; i < n; ++i) {
      const T* src = self.grad.data() + static_cast<std::size_t>(i) * (ca + cb) * hw;
      std::copy(src, src + ca * hw, ga.data() + i * ca * hw);
      std::copy(src + ca * hw, src + (ca + cb) * hw, gb.data() + i * cb * hw);
    }
    pa.accumulate(std::move(ga));
    pb.accumulate(std::move(gb));
  });
}

template <class T>
Var<T> upsample_nearest2x(const Var<T>& a) {
  const auto& x = a.value();
  int n = x.n(), c = x.c(), h = x.h(), w = x.w();
  Tensor<T> out({n, c, 2 * h, 2 * w});
  for (int p = 0; p < n * c; ++p) {
    const T* src = x.data() + static_cast<std::size_t>(p) * h * w;
    T* dst = out.data() + static_cast<std::size_t>(p) * 4 * h * w;
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
  }
  return make_result<T>(std::move(out), {a.node()}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    int n = p.value.n(), c = p.value.c(), h = p.value.h(), w = p.value.w();
    Tensor<T> g(p.value.shape());
    for (int q = 0; q < n * c; ++q) {
      const T* src = self.grad.data() + static_cast<std::size_t>(q) * 4 * h * w;
      T* dst = g.data() + static_cast<std::size_t>(q) * h * w;
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx) dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
    }
    p.accumulate(std::move(g));
  });
}

/// x[N,C,H,W] + e[N,C] broadcast over space (time-embedding injection).
template <class T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& e) {
  const auto& xv = x.value();
  const auto& ev = e.value();
  if (ev.rank() != 2 || ev.dim(0) != xv.n() || ev.dim(1) != xv.c())
    throw ShapeError("add_channel_bias: " + shape_str(xv.shape()) + " vs " + shape_str(ev.shape()));
  Tensor<T> out = xv;
  std::size_t hw = static_cast<std::size_t>(xv.h()) * xv.w();
  for (std::size_t p = 0; p < ev.size(); ++p) {
    T b = ev[p];
    T* dst = out.data() + p * hw;
    for (std::size_t i = 0; i < hw; ++i) dst[i] += b;
  }
  return make_result<T>(std::move(out), {x.node(), e.node()}, [hw](Node<T>& self) {
    self.parents[0]->accumulate(self.grad);
    auto& pe = *self.parents[1];
    if (!pe.requires_grad) return;
    Tensor<T> g(pe.value.shape());
    for (std::size_t p = 0; p < g.size(); ++p) {
      const T* src = self.grad.data() + p * hw;
      T s = 0;
      for (std::size_t i = 0; i < hw; ++i) s += src[i];
      g[p] = s;
    }
    pe.accumulate(std::move(g));
  });
}

// ---------------------------------------------------------------------------
// Dense layers

/// x[N,In] * W[Out,In]^T + b[Out]
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  int n = xv.dim(0), in = xv.dim(1), out_f = wv.dim(0);
  if (wv.dim(1) != in) throw ShapeError("linear: input features " + std::to_string(in));
  Tensor<T> out({n, out_f});
  for (int i = 0; i < n; ++i) std::copy(bias.value().data(), bias.value().data() + out_f, out.data() + i * out_f);
  blas::gemm<T>(false, true, n, out_f, in, T(1), xv.data(), wv.data(), T(1), out.data());
  return make_result<T>(std::move(out), {x.node(), weight.node(), bias.node()}, [n, in, out_f](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pb = *self.parents[2];
    if (px.requires_grad)
      blas::gemm<T>(false, false, n, in, out_f, T(1), self.grad.data(), pw.value.data(), T(1),
                    px.grad_buffer().data());
    if (pw.requires_grad)
      blas::gemm<T>(true, false, out_f, in, n, T(1), self.grad.data(), px.value.data(), T(1),
                    pw.grad_buffer().data());
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (int i = 0; i < n; ++i)
        for (int o = 0; o < out_f; ++o) gb[o] += self.grad[i * out_f + o];
    }
  });
}

namespace detail {

struct ConvGeometry {
  int n, ci, h, w, co, k, stride, pad, ho, wo;
  std::size_t rows() const { return static_cast<std::size_t>(ci) * k * k; }
  std::size_t cols() const { return static_cast<std::size_t>(n) * ho * wo; }
};

// Output columns [lo, hi) read in-bounds input for kernel offset kx.
inline void valid_range(int wo, int w, int stride, int pad, int kx, int& lo, int& hi) {
  lo = 0;
  while (lo < wo && lo * stride - pad + kx < 0) ++lo;
  hi = wo;
  while (hi > lo && (hi - 1) * stride - pad + kx >= w) --hi;
}

// cols[(c*k + ky)*k + kx][(b*ho + oy)*wo + ox]
template <class T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  std::size_t ncols = g.cols();
  for (int c = 0; c < g.ci; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        int lo, hi;
        valid_range(g.wo, g.w, g.stride, g.pad, kx, lo, hi);
        T* row = cols + ((static_cast<std::size_t>(c) * g.k + ky) * g.k + kx) * ncols;
        for (int b = 0; b < g.n; ++b) {
          const T* plane = x + (static_cast<std::size_t>(b) * g.ci + c) * g.h * g.w;
          T* dst = row + static_cast<std::size_t>(b) * g.ho * g.wo;
          for (int oy = 0; oy < g.ho; ++oy) {
            int iy = oy * g.stride - g.pad + ky;
            T* d = dst + oy * g.wo;
            if (iy < 0 || iy >= g.h) {
              std::fill(d, d + g.wo, T(0));
              continue;
            }
            const T* src = plane + iy * g.w - g.pad + kx;
            std::fill(d, d + lo, T(0));
            if (g.stride == 1) {
              std::copy(src + lo, src + hi, d + lo);
            } else {
              for (int ox = lo; ox < hi; ++ox) d[ox] = src[ox * g.stride];
            }
            std::fill(d + hi, d + g.wo, T(0));
          }
        }
      }
}

template <class T>
void col2im(const T* cols, const ConvGeometry& g, T* x) {
  std::size_t ncols = g.cols();
  for (int c = 0; c < g.ci; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        int lo, hi;
        valid_range(g.wo, g.w, g.stride, g.pad, kx, lo, hi);
        const T* row = cols + ((static_cast<std::size_t>(c) * g.k + ky) * g.k + kx) * ncols;
        for (int b = 0; b < g.n; ++b) {
          T* plane = x + (static_cast<std::size_t>(b) * g.ci + c) * g.h * g.w;
          const T* src = row + static_cast<std::size_t>(b) * g.ho * g.wo;
          for (int oy = 0; oy < g.ho; ++oy) {
            int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            const T* s = src + oy * g.wo;
            T* dst = plane + iy * g.w - g.pad + kx;
            if (g.stride == 1) {
              for (int ox = lo; ox < hi; ++ox) dst[ox] += s[ox];
            } else {
              for (int ox = lo; ox < hi; ++ox) dst[ox * g.stride] += s[ox];
            }
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution with square kernel, zero padding and integer stride.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride = 1, int pad = 0) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  if (xv.rank() != 4 || wv.rank() != 4 || wv.dim(1) != xv.c() || wv.dim(2) != wv.dim(3))
    throw ShapeError("conv2d: input " + shape_str(xv.shape()) + " weight " + shape_str(wv.shape()));
  detail::ConvGeometry g{xv.n(), xv.c(), xv.h(), xv.w(), wv.dim(0), wv.dim(2), stride, pad, 0, 0};
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  std::size_t hw_out = static_cast<std::size_t>(g.ho) * g.wo;
  const bool pointwise = g.k == 1 && stride == 1 && pad == 0;

  // Channel-major input (ci, n*h*w) is exactly the column matrix of a 1x1 conv.
  auto columns = [g, pointwise](const Tensor<T>& in) {
    std::vector<T> cols(g.rows() * g.cols());
    if (pointwise) {
      std::size_t hw = static_cast<std::size_t>(g.h) * g.w;
      for (int b = 0; b < g.n; ++b)
        for (int c = 0; c < g.ci; ++c)
          std::copy(in.data() + (static_cast<std::size_t>(b) * g.ci + c) * hw,
                    in.data() + (static_cast<std::size_t>(b) * g.ci + c + 1) * hw,
                    cols.data() + c * g.cols() + b * hw);
    } else {
      detail::im2col(in.data(), g, cols.data());
    }
    return cols;
  };

  std::vector<T> cols = columns(xv);
  std::vector<T> ymat(static_cast<std::size_t>(g.co) * g.cols());
  blas::gemm<T>(false, false, g.co, static_cast<int>(g.cols()), static_cast<int>(g.rows()), T(1), wv.data(),
                cols.data(), T(0), ymat.data());
  Tensor<T> out({g.n, g.co, g.ho, g.wo});
  const T* bv = bias.defined() ? bias.value().data() : nullptr;
  for (int o = 0; o < g.co; ++o) {
    T bo = bv ? bv[o] : T(0);
    for (int b = 0; b < g.n; ++b) {
      const T* src = ymat.data() + o * g.cols() + b * hw_out;
      T* dst = out.data() + (static_cast<std::size_t>(b) * g.co + o) * hw_out;
      for (std::size_t i = 0; i < hw_out; ++i) dst[i] = src[i] + bo;
    }
  }
  std::vector<std::shared_ptr<Node<T>>> parents{x.node(), weight.node()};
  if (bias.defined()) parents.push_back(bias.node());
  return make_result<T>(std::move(out), std::move(parents), [g, hw_out, pointwise, columns](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    std::vector<T> gmat(static_cast<std::size_t>(g.co) * g.cols());
    for (int o = 0; o < g.co; ++o)
      for (int b = 0; b < g.n; ++b) {
        const T* src = self.grad.data() + (static_cast<std::size_t>(b) * g.co + o) * hw_out;
        std::copy(src, src + hw_out, gmat.data() + o * g.cols() + b * hw_out);
      }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      auto& gb = self.parents[2]->grad_buffer();
      for (int o = 0; o < g.co; ++o) {
        const T* row = gmat.data() + o * g.cols();
        T s = 0;
        for (std::size_t i = 0; i < g.cols(); ++i) s += row[i];
        gb[o] += s;
      }
    }
    if (pw.requires_grad) {
      std::vector<T> cols = columns(px.value);
      blas::gemm<T>(false, true, g.co, static_cast<int>(g.rows()), static_cast<int>(g.cols()), T(1), gmat.data(),
                    cols.data(), T(1), pw.grad_buffer().data());
    }
    if (px.requires_grad) {
      std::vector<T> dcols(g.rows() * g.cols());
      blas::gemm<T>(true, false, static_cast<int>(g.rows()), static_cast<int>(g.cols()), g.co, T(1),
                    pw.value.data(), gmat.data(), T(0), dcols.data());
      auto& gx = px.grad_buffer();
      if (pointwise) {
        std::size_t hw = static_cast<std::size_t>(g.h) * g.w;
        for (int b = 0; b < g.n; ++b)
          for (int c = 0; c < g.ci; ++c) {
            const T* src = dcols.data() + c * g.cols() + b * hw;
            T* dst = gx.data() + (static_cast<std::size_t>(b) * g.ci + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) dst[i] += src[i];
          }
      } else {
        detail::col2im(dcols.data(), g, gx.data());
      }
    }
  });
}

/// Group normalization with per-channel affine parameters.
template <class T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps = T(1e-5)) {
  const auto& xv = x.value();
  int n = xv.n(), c = xv.c();
  if (groups <= 0 || c % groups != 0)
    throw ShapeError("group_norm: " + std::to_string(c) + " channels not divisible into " + std::to_string(groups));
  int cpg = c / groups;
  std::size_t hw = static_cast<std::size_t>(xv.h()) * xv.w();
  std::size_t gsize = cpg * hw;
  Tensor<T> xhat(xv.shape());
  std::vector<T> inv_std(static_cast<std::size_t>(n) * groups);
  Tensor<T> out(xv.shape());
  for (int b = 0; b < n; ++b)
    for (int g = 0; g < groups; ++g) {
      std::size_t off = (static_cast<std::size_t>(b) * c + g * cpg) * hw;
      const T* src = xv.data() + off;
      double m = 0, v = 0;
      for (std::size_t i = 0; i < gsize; ++i) m += src[i];
      m /= gsize;
      for (std::size_t i = 0; i < gsize; ++i) v += (src[i] - m) * (src[i] - m);
      v /= gsize;
      T is = static_cast<T>(1.0 / std::sqrt(v + eps));
      inv_std[b * groups + g] = is;
      for (int cc = 0; cc < cpg; ++cc) {
        int ch = g * cpg + cc;
        T ga = gamma.value()[ch], be = beta.value()[ch];
        for (std::size_t i = 0; i < hw; ++i) {
          std::size_t k = off + cc * hw + i;
          T xh = (xv[k] - static_cast<T>(m)) * is;
          xhat[k] = xh;
          out[k] = xh * ga + be;
        }
      }
    }
  return make_result<T>(
      std::move(out), {x.node(), gamma.node(), beta.node()},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, groups, cpg, hw, gsize](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& dy = self.grad;
        if (pg.requires_grad || pb.requires_grad) {
          auto& gg = pg.grad_buffer();
          auto& gb = pb.grad_buffer();
          for (int b = 0; b < n; ++b)
            for (int ch = 0; ch < c; ++ch) {
              std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
              T sg = 0, sb = 0;
              for (std::size_t i = 0; i < hw; ++i) {
                sg += dy[off + i] * xhat[off + i];
                sb += dy[off + i];
              }
              gg[ch] += sg;
              gb[ch] += sb;
            }
        }
        if (!px.requires_grad) return;
        auto& gx = px.grad_buffer();
        for (int b = 0; b < n; ++b)
          for (int g = 0; g < groups; ++g) {
            std::size_t off = (static_cast<std::size_t>(b) * c + g * cpg) * hw;
            double mean_d = 0, mean_dx = 0;
            for (int cc = 0; cc < cpg; ++cc) {
              T ga = pg.value[g * cpg + cc];
              for (std::size_t i = 0; i < hw; ++i) {
                std::size_t k = off + cc * hw + i;
                double d = dy[k] * ga;
                mean_d += d;
                mean_dx += d * xhat[k];
              }
            }
            mean_d /= gsize;
            mean_dx /= gsize;
            T is = inv_std[b * groups + g];
            for (int cc = 0; cc < cpg; ++cc) {
              T ga = pg.value[g * cpg + cc];
              for (std::size_t i = 0; i < hw; ++i) {
                std::size_t k = off + cc * hw + i;
                gx[k] += is * static_cast<T>(dy[k] * ga - mean_d - xhat[k] * mean_dx);
              }
            }
          }
      });
}

/// Multi-head self-attention over spatial positions.
///
/// qkv is (N, 3C, H, W) with each head's channels laid out as contiguous
/// [q | k | v] blocks of C/heads channels. Returns (N, C, H, W).
template <class T>
Var<T> spatial_attention(const Var<T>& qkv, int heads) {
  const auto& in = qkv.value();
  int n = in.n(), c3 = in.c();
  if (c3 % (3 * heads) != 0) throw ShapeError("spatial_attention: channels not divisible by 3*heads");
  int d = c3 / (3 * heads);
  int len = in.h() * in.w();
  T scale = T(1) / std::sqrt(static_cast<T>(d));
  Tensor<T> out({n, d * heads, in.h(), in.w()});
  std::vector<T> probs(static_cast<std::size_t>(n) * heads * len * len);
  for (int b = 0; b < n; ++b)
    for (int hd = 0; hd < heads; ++hd) {
      const T* q = in.data() + (static_cast<std::size_t>(b) * c3 + hd * 3 * d) * len;
      const T* k = q + static_cast<std::size_t>(d) * len;
      const T* v = k + static_cast<std::size_t>(d) * len;
      T* p = probs.data() + (static_cast<std::size_t>(b) * heads + hd) * len * len;
      // scores[t, s] = sum_d q[d, t] k[d, s]
      blas::gemm<T>(true, false, len, len, d, scale, q, k, T(0), p);
      for (int t = 0; t < len; ++t) {
        T* row = p + static_cast<std::size_t>(t) * len;
        T mx = *std::max_element(row, row + len);
        T sum = 0;
        for (int s = 0; s < len; ++s) sum += (row[s] = std::exp(row[s] - mx));
        for (int s = 0; s < len; ++s) row[s] /= sum;
      }
      T* a = out.data() + (static_cast<std::size_t>(b) * d * heads + hd * d) * len;
      // a[d, t] = sum_s v[d, s] p[t, s]
      blas::gemm<T>(false, true, d, len, len, T(1), v, p, T(0), a);
    }
  return make_result<T>(std::move(out), {qkv.node()},
                        [probs = std::move(probs), n, heads, d, len, c3, scale](Node<T>& self) {
                          auto& px = *self.parents[0];
                          auto& gx = px.grad_buffer();
                          std::vector<T> dp(static_cast<std::size_t>(len) * len);
                          for (int b = 0; b < n; ++b)
                            for (int hd = 0; hd < heads; ++hd) {
                              std::size_t qoff = (static_cast<std::size_t>(b) * c3 + hd * 3 * d) * len;
                              const T* q = px.value.data() + qoff;
                              const T* k = q + static_cast<std::size_t>(d) * len;
                              const T* v = k + static_cast<std::size_t>(d) * len;
                              T* dq = gx.data() + qoff;
                              T* dk = dq + static_cast<std::size_t>(d) * len;
                              T* dv = dk + static_cast<std::size_t>(d) * len;
                              const T* p = probs.data() + (static_cast<std::size_t>(b) * heads + hd) * len * len;
                              const T* da =
                                  self.grad.data() + (static_cast<std::size_t>(b) * d * heads + hd * d) * len;
                              blas::gemm<T>(false, false, d, len, len, T(1), da, p, T(1), dv);
                              blas::gemm<T>(true, false, len, len, d, T(1), da, v, T(0), dp.data());
                              for (int t = 0; t < len; ++t) {
                                T* row = dp.data() + static_cast<std::size_t>(t) * len;
                                const T* prow = p + static_cast<std::size_t>(t) * len;
                                T dot = 0;
                                for (int s = 0; s < len; ++s) dot += row[s] * prow[s];
                                for (int s = 0; s < len; ++s) row[s] = prow[s] * (row[s] - dot);
                              }
                              blas::gemm<T>(false, true, d, len, len, scale, k, dp.data(), T(1), dq);
                              blas::gemm<T>(false, false, d, len, len, scale, q, dp.data(), T(1), dk);
                            }
                        });
}

}  // namespace decloud::ag
