#pragma once

// Time-conditioned U-shaped encoder-decoder used for both the conditional noise
// predictor (CNP) and the weight allocation (WA) network.

#include <algorithm>
#include <memory>
#include <random>
#include <set>

#include "decloud/nn.hpp"

namespace decloud {

enum class OutputHead { linear, sigmoid };

struct UNetSpec {
  int base_channels = 96;
  int depth = 2;  // residual blocks per resolution
  std::vector<int> channel_multipliers{1, 1, 2, 2, 3};
  std::vector<int> attention_resolutions{4, 8};  // downsample factors
  int heads = 4;
  double dropout = 0.0;
  int in_channels = 8;
  int out_channels = 4;
  int norm_groups = 32;
  OutputHead head = OutputHead::linear;
  bool zero_init_output = true;

  bool operator==(const UNetSpec&) const = default;

  int required_divisor() const { return 1 << (static_cast<int>(channel_multipliers.size()) - 1); }

  void validate() const {
    if (base_channels <= 0) throw std::invalid_argument("UNetSpec: base_channels must be positive");
    if (depth < 1) throw std::invalid_argument("UNetSpec: depth must be at least 1");
    if (channel_multipliers.empty()) throw std::invalid_argument("UNetSpec: channel_multipliers must be nonempty");
    if (heads < 1) throw std::invalid_argument("UNetSpec: heads must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("UNetSpec: dropout must lie in [0, 1)");
    if (in_channels < 1 || out_channels < 1) throw std::invalid_argument("UNetSpec: channel counts must be positive");
    for (int m : channel_multipliers)
      if (m < 1) throw std::invalid_argument("UNetSpec: multipliers must be positive");
  }
};

/// Full-size presets and desk-scale variants.
namespace presets {
inline UNetSpec cnp_full(int bands) {
  UNetSpec s;
  s.base_channels = 96;
  s.depth = 2;
  s.channel_multipliers = {1, 1, 2, 2, 3};
  s.attention_resolutions = {4, 8};
  s.heads = 4;
  s.in_channels = 2 * bands;
  s.out_channels = bands;
  return s;
}
inline UNetSpec wa_full(int bands) {
  UNetSpec s;
  s.base_channels = 64;
  s.depth = 2;
  s.channel_multipliers = {1, 1, 2};
  s.attention_resolutions = {4, 8};
  s.heads = 1;
  s.in_channels = 3 * bands;
  s.out_channels = bands;
  s.head = OutputHead::sigmoid;
  s.zero_init_output = false;
  return s;
}
inline UNetSpec cnp_tiny(int bands) {
  UNetSpec s = cnp_full(bands);
  s.base_channels = 32;
  s.depth = 1;
  s.channel_multipliers = {1, 1, 2};
  s.attention_resolutions = {4};
  s.norm_groups = 8;
  return s;
}
inline UNetSpec wa_tiny(int bands) {
  UNetSpec s = wa_full(bands);
  s.base_channels = 16;
  s.depth = 1;
  s.channel_multipliers = {1, 1, 2};
  s.attention_resolutions = {4};
  s.norm_groups = 8;
  return s;
}
}  // namespace presets

/// Sinusoidal embedding: first dim/2 entries are cos(t * f_i), the rest sin(t * f_i),
/// with f_i = 10000^(-i / (dim/2)).
template <class T = double>
std::vector<T> time_embedding(double t, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw std::invalid_argument("time_embedding: dim must be positive and even");
  if (t < 0) throw std::invalid_argument("time_embedding: negative step");
  int half = dim / 2;
  std::vector<T> e(dim);
  for (int i = 0; i < half; ++i) {
    double f = std::exp(-std::log(10000.0) * i / half);
    e[i] = static_cast<T>(std::cos(t * f));
    e[half + i] = static_cast<T>(std::sin(t * f));
  }
  return e;
}

namespace detail {

template <class T>
class ResBlock {
 public:
  template <class Rng>
  ResBlock(int in_ch, int out_ch, int emb_dim, const UNetSpec& spec, Rng& rng)
      : norm_in_(in_ch, spec.norm_groups),
        conv_in_(in_ch, out_ch, 3, rng),
        emb_(emb_dim, out_ch, rng),
        norm_out_(out_ch, spec.norm_groups),
        conv_out_(out_ch, out_ch, 3, rng, 1, /*zero_init=*/true),
        dropout_(static_cast<T>(spec.dropout)) {
    if (in_ch != out_ch) skip_ = std::make_unique<nn::Conv2d<T>>(in_ch, out_ch, 1, rng);
  }

  template <class Rng>
  ag::Var<T> operator()(const ag::Var<T>& x, const ag::Var<T>& emb_act, bool training, Rng& rng) const {
    auto h = conv_in_(ag::silu(norm_in_(x)));
    h = ag::add_channel_bias(h, emb_(emb_act));
    h = conv_out_(ag::dropout(ag::silu(norm_out_(h)), dropout_, training, rng));
    return ag::add(skip_ ? (*skip_)(x) : x, h);
  }

  void collect(nn::ParamList<T>& out, const std::string& p) const {
    norm_in_.collect(out, p + ".norm_in");
    conv_in_.collect(out, p + ".conv_in");
    emb_.collect(out, p + ".emb");
    norm_out_.collect(out, p + ".norm_out");
    conv_out_.collect(out, p + ".conv_out");
    if (skip_) skip_->collect(out, p + ".skip");
  }

 private:
  nn::GroupNorm<T> norm_in_;
  nn::Conv2d<T> conv_in_;
  nn::Linear<T> emb_;
  nn::GroupNorm<T> norm_out_;
  nn::Conv2d<T> conv_out_;
  std::unique_ptr<nn::Conv2d<T>> skip_;
  T dropout_;
};

template <class T>
class AttentionBlock {
 public:
  template <class Rng>
  AttentionBlock(int ch, const UNetSpec& spec, Rng& rng)
      : norm_(ch, spec.norm_groups), qkv_(ch, 3 * ch, 1, rng), proj_(ch, ch, 1, rng, 1, true), heads_(spec.heads) {
    if (ch % heads_ != 0)
      throw std::invalid_argument("attention: " + std::to_string(ch) + " channels not divisible by heads");
  }
  ag::Var<T> operator()(const ag::Var<T>& x) const {
    return ag::add(x, proj_(ag::spatial_attention(qkv_(norm_(x)), heads_)));
  }
  void collect(nn::ParamList<T>& out, const std::string& p) const {
    norm_.collect(out, p + ".norm");
    qkv_.collect(out, p + ".qkv");
    proj_.collect(out, p + ".proj");
  }

 private:
  nn::GroupNorm<T> norm_;
  nn::Conv2d<T> qkv_, proj_;
  int heads_;
};

}  // namespace detail

template <class T>
class UNet {
 public:
  template <class Rng>
  UNet(const UNetSpec& spec, Rng& rng) : spec_(spec), dropout_rng_(rng()) {
    spec_.validate();
    const int base = spec.base_channels;
    emb_dim_ = 4 * base;
    time_in_ = nn::Linear<T>(base, emb_dim_, rng);
    time_out_ = nn::Linear<T>(emb_dim_, emb_dim_, rng);
    std::set<int> attn(spec.attention_resolutions.begin(), spec.attention_resolutions.end());

    conv_in_ = nn::Conv2d<T>(spec.in_channels, base, 3, rng);
    std::vector<int> skip_ch{base};
    int ch = base, ds = 1;
    const int levels = static_cast<int>(spec.channel_multipliers.size());
    for (int level = 0; level < levels; ++level) {
      for (int i = 0; i < spec.depth; ++i) {
        Stage st;
        int out = base * spec.channel_multipliers[level];
        st.res = std::make_unique<detail::ResBlock<T>>(ch, out, emb_dim_, spec, rng);
        ch = out;
        if (attn.count(ds)) st.attn = std::make_unique<detail::AttentionBlock<T>>(ch, spec, rng);
        down_.push_back(std::move(st));
        skip_ch.push_back(ch);
      }
      if (level != levels - 1) {
        Stage st;
        st.resample = std::make_unique<nn::Conv2d<T>>(ch, ch, 3, rng, 2);
        down_.push_back(std::move(st));
        skip_ch.push_back(ch);
        ds *= 2;
      }
    }
    mid_res1_ = std::make_unique<detail::ResBlock<T>>(ch, ch, emb_dim_, spec, rng);
    mid_attn_ = std::make_unique<detail::AttentionBlock<T>>(ch, spec, rng);
    mid_res2_ = std::make_unique<detail::ResBlock<T>>(ch, ch, emb_dim_, spec, rng);
    for (int level = levels - 1; level >= 0; --level) {
      for (int i = 0; i <= spec.depth; ++i) {
        Stage st;
        int out = base * spec.channel_multipliers[level];
        int in = ch + skip_ch.back();
        skip_ch.pop_back();
        st.res = std::make_unique<detail::ResBlock<T>>(in, out, emb_dim_, spec, rng);
        ch = out;
        if (attn.count(ds)) st.attn = std::make_unique<detail::AttentionBlock<T>>(ch, spec, rng);
        if (level > 0 && i == spec.depth) {
          st.resample = std::make_unique<nn::Conv2d<T>>(ch, ch, 3, rng);
          ds /= 2;
        }
        up_.push_back(std::move(st));
      }
    }
    norm_out_ = nn::GroupNorm<T>(ch, spec.norm_groups);
    conv_out_ = nn::Conv2d<T>(ch, spec.out_channels, 3, rng, 1, spec.zero_init_output);
  }

  /// x: (N, in_channels, H, W); steps: one diffusion step per sample.
  ag::Var<T> forward(const ag::Var<T>& x, const std::vector<int>& steps, bool training = false) const {
    const auto& xv = x.value();
    if (xv.rank() != 4 || xv.c() != spec_.in_channels)
      throw ShapeError("UNet: expected " + std::to_string(spec_.in_channels) + " input channels, got " +
                       shape_str(xv.shape()));
    int div = spec_.required_divisor();
    if (xv.h() % div != 0 || xv.w() % div != 0)
      throw ShapeError("UNet: spatial size " + std::to_string(xv.h()) + "x" + std::to_string(xv.w()) +
                       " not divisible by " + std::to_string(div));
    if (static_cast<int>(steps.size()) != xv.n()) throw ShapeError("UNet: one step per sample required");

    Tensor<T> temb({xv.n(), spec_.base_channels});
    for (int i = 0; i < xv.n(); ++i) {
      auto e = time_embedding<T>(steps[i], spec_.base_channels);
      std::copy(e.begin(), e.end(), temb.data() + i * spec_.base_channels);
    }
    auto emb = time_out_(ag::silu(time_in_(ag::constant(std::move(temb)))));
    auto emb_act = ag::silu(emb);

    auto h = conv_in_(x);
    std::vector<ag::Var<T>> skips{h};
    for (const auto& st : down_) {
      if (st.resample) {
        h = (*st.resample)(h);
      } else {
        h = (*st.res)(h, emb_act, training, dropout_rng_);
        if (st.attn) h = (*st.attn)(h);
      }
      skips.push_back(h);
    }
    h = (*mid_res1_)(h, emb_act, training, dropout_rng_);
    h = (*mid_attn_)(h);
    h = (*mid_res2_)(h, emb_act, training, dropout_rng_);
    for (const auto& st : up_) {
      h = (*st.res)(ag::concat_channels(h, skips.back()), emb_act, training, dropout_rng_);
      skips.pop_back();
      if (st.attn) h = (*st.attn)(h);
      if (st.resample) h = (*st.resample)(ag::upsample_nearest2x(h));
    }
    auto out = conv_out_(ag::silu(norm_out_(h)));
    return spec_.head == OutputHead::sigmoid ? ag::sigmoid(out) : out;
  }

  /// Inference without graph recording.
  Tensor<T> predict(const Tensor<T>& x, const std::vector<int>& steps) const {
    ag::NoGradGuard guard;
    return forward(ag::constant(x), steps, false).value();
  }

  nn::ParamList<T> parameters() const {
    nn::ParamList<T> out;
    time_in_.collect(out, "time.in");
    time_out_.collect(out, "time.out");
    conv_in_.collect(out, "conv_in");
    for (std::size_t i = 0; i < down_.size(); ++i) down_[i].collect(out, "down." + std::to_string(i));
    mid_res1_->collect(out, "mid.res1");
    mid_attn_->collect(out, "mid.attn");
    mid_res2_->collect(out, "mid.res2");
    for (std::size_t i = 0; i < up_.size(); ++i) up_[i].collect(out, "up." + std::to_string(i));
    norm_out_.collect(out, "norm_out");
    conv_out_.collect(out, "conv_out");
    return out;
  }

  std::size_t parameter_count() const { return nn::parameter_count(parameters()); }
  const UNetSpec& spec() const noexcept { return spec_; }

 private:
  struct Stage {
    std::unique_ptr<detail::ResBlock<T>> res;
    std::unique_ptr<detail::AttentionBlock<T>> attn;
    std::unique_ptr<nn::Conv2d<T>> resample;

    void collect(nn::ParamList<T>& out, const std::string& p) const {
      if (res) res->collect(out, p + ".res");
      if (attn) attn->collect(out, p + ".attn");
      if (resample) resample->collect(out, p + ".resample");
    }
  };

  UNetSpec spec_;
  int emb_dim_ = 0;
  mutable std::mt19937_64 dropout_rng_;
  nn::Linear<T> time_in_, time_out_;
  nn::Conv2d<T> conv_in_;
  std::vector<Stage> down_, up_;
  std::unique_ptr<detail::ResBlock<T>> mid_res1_, mid_res2_;
  std::unique_ptr<detail::AttentionBlock<T>> mid_attn_;
  nn::GroupNorm<T> norm_out_;
  nn::Conv2d<T> conv_out_;
};

/// Conditional noise predictor: input is x_t and y concatenated (2C channels).
template <class T, class Rng>
UNet<T> build_cnp(int bands, UNetSpec spec, Rng& rng) {
  if (bands < 1) throw std::invalid_argument("build_cnp: band count must be positive");
  spec.in_channels = 2 * bands;
  spec.out_channels = bands;
  spec.head = OutputHead::linear;
  spec.zero_init_output = true;
  return UNet<T>(spec, rng);
}

/// Weight allocation network: input is x_t, y and x0_ref concatenated (3C channels),
/// output squashed to [0, 1] per band.
template <class T, class Rng>
UNet<T> build_wa(int bands, UNetSpec spec, Rng& rng) {
  if (bands < 1) throw std::invalid_argument("build_wa: band count must be positive");
  spec.in_channels = 3 * bands;
  spec.out_channels = bands;
  spec.head = OutputHead::sigmoid;
  return UNet<T>(spec, rng);
}

}  // namespace decloud
