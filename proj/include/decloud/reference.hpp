#pragma once

// End-to-end reference models producing the cloud-free prior x0_ref = E(y).

#include <memory>
#include <random>
#include <string>

#include "decloud/data.hpp"
#include "decloud/nn.hpp"
#include "decloud/optim.hpp"

namespace decloud {

template <class T>
class ReferenceModel {
 public:
  virtual ~ReferenceModel() = default;
  virtual std::string name() const = 0;
  virtual bool trainable() const = 0;
  /// Band count the model was built for; 0 accepts any.
  virtual int bands() const = 0;
  /// Graph-recording forward pass over a (N, C, H, W) batch.
  virtual ag::Var<T> forward(const ag::Var<T>& y) const = 0;
  virtual nn::ParamList<T> parameters() const { return {}; }

  Tensor<T> predict(const Tensor<T>& y) const {
    ag::NoGradGuard guard;
    return forward(ag::constant(y)).value();
  }
};

/// Pass-through baseline: x0_ref = y.
template <class T>
class IdentityReference final : public ReferenceModel<T> {
 public:
  std::string name() const override { return "identity"; }
  bool trainable() const override { return false; }
  int bands() const override { return 0; }
  ag::Var<T> forward(const ag::Var<T>& y) const override { return y; }
};

/// Compact residual CNN: conv-in, `blocks` residual 3x3 conv blocks, zero-initialized
/// conv-out added to the input, hard-clamped to [-1, 1].
template <class T>
class ResidualCnnReference final : public ReferenceModel<T> {
 public:
  template <class Rng>
  ResidualCnnReference(int bands, int features, int blocks, Rng& rng)
      : bands_(bands), features_(features), conv_in_(bands, features, 3, rng), conv_out_(features, bands, 3, rng, 1, true) {
    if (bands < 1 || features < 1 || blocks < 1) throw std::invalid_argument("ResidualCnnReference: bad sizes");
    for (int i = 0; i < blocks; ++i) blocks_.emplace_back(features, features, 3, rng);
  }

  std::string name() const override { return "residual_cnn"; }
  bool trainable() const override { return true; }
  int bands() const override { return bands_; }
  int features() const { return features_; }
  int blocks() const { return static_cast<int>(blocks_.size()); }

  ag::Var<T> forward(const ag::Var<T>& y) const override {
    auto h = ag::silu(conv_in_(y));
    for (const auto& conv : blocks_) h = ag::add(h, ag::silu(conv(h)));
    return ag::clamp(ag::add(y, conv_out_(h)), T(-1), T(1));
  }

  nn::ParamList<T> parameters() const override {
    nn::ParamList<T> out;
    conv_in_.collect(out, "conv_in");
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, "block." + std::to_string(i));
    conv_out_.collect(out, "conv_out");
    return out;
  }

 private:
  int bands_, features_;
  nn::Conv2d<T> conv_in_;
  std::vector<nn::Conv2d<T>> blocks_;
  nn::Conv2d<T> conv_out_;
};

/// Validated reference prediction for a (N, C, H, W) batch.
template <class T>
Tensor<T> predict_reference(const ReferenceModel<T>& model, const Tensor<T>& y, int expected_bands = 0) {
  if (y.rank() != 4) throw ShapeError("predict_reference: expected (N, C, H, W)");
  if (expected_bands && y.c() != expected_bands)
    throw std::invalid_argument("predict_reference: input has " + std::to_string(y.c()) + " bands, bundle expects " +
                                std::to_string(expected_bands));
  if (model.bands() && y.c() != model.bands())
    throw std::invalid_argument("predict_reference: model '" + model.name() + "' expects " +
                                std::to_string(model.bands()) + " bands");
  if (!y.all_finite()) throw std::invalid_argument("predict_reference: non-finite input");
  return model.predict(y);
}

/// Serializable description of a built-in reference model.
struct ReferenceSpec {
  std::string name = "residual_cnn";  // or "identity"
  int bands = 4;
  int features = 32;
  int blocks = 4;

  bool operator==(const ReferenceSpec&) const = default;
};

template <class T, class Rng>
std::shared_ptr<ReferenceModel<T>> build_reference(const ReferenceSpec& spec, Rng& rng) {
  if (spec.name == "identity") return std::make_shared<IdentityReference<T>>();
  if (spec.name == "residual_cnn")
    return std::make_shared<ResidualCnnReference<T>>(spec.bands, spec.features, spec.blocks, rng);
  throw std::invalid_argument("unknown reference model '" + spec.name + "' (expected identity or residual_cnn)");
}

template <class T>
ReferenceSpec describe_reference(const ReferenceModel<T>& model) {
  ReferenceSpec s;
  s.name = model.name();
  s.bands = model.bands();
  if (auto* r = dynamic_cast<const ResidualCnnReference<T>*>(&model)) {
    s.features = r->features();
    s.blocks = r->blocks();
  }
  return s;
}

struct ReferenceTrainConfig {
  int epochs = 10;
  int batch_size = 8;
  double learning_rate = 1e-3;
  int max_iterations = 0;  // 0: no cap beyond epochs
  std::uint64_t seed = 0;
};

/// L1 training of a trainable reference on (cloudy -> clear) pairs.
/// Returns the per-iteration training loss.
template <class T>
std::vector<double> train_reference(ReferenceModel<T>& model, const std::vector<PairedSample<T>>& data,
                                    const ReferenceTrainConfig& cfg) {
  if (!model.trainable()) throw std::invalid_argument("train_reference: model '" + model.name() + "' is not trainable");
  if (data.empty()) throw std::invalid_argument("train_reference: empty dataset");
  std::vector<double> losses;
  if (cfg.epochs <= 0) return losses;
  optim::Adam<T> opt(model.parameters(), cfg.learning_rate);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  int iteration = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      if (cfg.max_iterations && iteration >= cfg.max_iterations) return losses;
      std::vector<std::size_t> idx(order.begin() + start,
                                   order.begin() + std::min(order.size(), start + cfg.batch_size));
      auto [y, x0] = make_batch(data, idx);
      opt.zero_grad();
      auto loss = ag::mean_abs(model.forward(ag::constant(y)), ag::constant(x0));
      if (!std::isfinite(loss.item())) throw std::runtime_error("train_reference: non-finite loss");
      losses.push_back(loss.item());
      ag::backward(loss);
      opt.step();
      ++iteration;
    }
  }
  return losses;
}

}  // namespace decloud
