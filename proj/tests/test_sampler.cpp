#include <gtest/gtest.h>

#include <random>

#include "decloud/sampler.hpp"

using namespace decloud;

namespace {

constexpr int kBands = 3;

UNetSpec small_spec() {
  UNetSpec s;
  s.base_channels = 8;
  s.depth = 1;
  s.channel_multipliers = {1, 2};
  s.attention_resolutions = {2};
  s.heads = 1;
  s.norm_groups = 4;
  return s;
}

// Fresh networks have zero-initialized outputs; jitter every parameter so the
// sampler exercises nontrivial predictions.
template <class T>
void perturb(const nn::ParamList<T>& params, std::mt19937_64& rng, double scale = 0.05) {
  std::normal_distribution<double> nd(0.0, scale);
  for (auto [name, v] : params)
    for (auto& x : v.mutable_value().vec()) x += static_cast<T>(nd(rng));
}

/// Counts predict calls to check the reference runs once per sample call.
template <class T>
class CountingReference final : public ReferenceModel<T> {
 public:
  explicit CountingReference(std::shared_ptr<ReferenceModel<T>> inner) : inner_(std::move(inner)) {}
  std::string name() const override { return "counting"; }
  bool trainable() const override { return false; }
  int bands() const override { return inner_->bands(); }
  ag::Var<T> forward(const ag::Var<T>& y) const override {
    ++calls;
    return inner_->forward(y);
  }
  mutable int calls = 0;

 private:
  std::shared_ptr<ReferenceModel<T>> inner_;
};

template <class T>
DenoiserBundle<T> make_test_bundle(std::uint64_t seed, std::shared_ptr<ReferenceModel<T>> ref = nullptr) {
  std::mt19937_64 rng(seed);
  if (!ref) ref = build_reference<T>({"residual_cnn", kBands, 8, 5}, rng);
  auto b = make_bundle<T>(kBands, small_spec(), small_spec(), ref, ScheduleDescriptor{}, rng);
  perturb(b.cnp.parameters(), rng);
  perturb(b.wa.parameters(), rng);
  perturb(b.reference->parameters(), rng, 0.02);
  return b;
}

template <class T>
Tensor<T> cloudy_batch(std::uint64_t seed, int n = 2, int size = 8) {
  std::mt19937_64 rng(seed);
  return Tensor<T>::uniform({n, kBands, size, size}, rng, T(-1), T(1));
}

SamplerConfig ddim_cfg(int steps = 10) {
  SamplerConfig c;
  c.mode = SamplerMode::ddim;
  c.ddim_steps = steps;
  c.seed = 17;
  return c;
}

SamplerConfig ancestral_cfg() {
  SamplerConfig c;
  c.mode = SamplerMode::ancestral;
  c.seed = 17;
  return c;
}

}  // namespace

TEST(SamplingPlan, DdimAndAncestral) {
  auto plan = sampling_plan(ddim_cfg(50), 1000);
  ASSERT_EQ(plan.size(), 50u);
  EXPECT_EQ(plan.front(), std::make_pair(1000, 980));
  EXPECT_EQ(plan.back(), std::make_pair(20, 0));
  auto anc = sampling_plan(ancestral_cfg(), 5);
  EXPECT_EQ(anc, (std::vector<std::pair<int, int>>{{5, 4}, {4, 3}, {3, 2}, {2, 1}, {1, 0}}));
}

TEST(Sampler, DeterministicUnderSeed) {
  auto bundle = make_test_bundle<float>(1);
  auto y = cloudy_batch<float>(2);
  for (auto cfg : {ddim_cfg(), ancestral_cfg()}) {
    if (cfg.mode == SamplerMode::ancestral) {
      bundle.schedule = make_schedule(50, "linear", 1e-4, 0.2);
    }
    auto [a, ra] = sample(bundle, y, cfg);
    auto [b, rb] = sample(bundle, y, cfg);
    EXPECT_EQ(a.vec(), b.vec());
    ASSERT_EQ(ra.steps.size(), rb.steps.size());
    for (std::size_t i = 0; i < ra.steps.size(); ++i) EXPECT_EQ(ra.steps[i].mean_w, rb.steps[i].mean_w);
    auto other = cfg;
    other.seed = 18;
    EXPECT_NE(sample(bundle, y, other).first.vec(), a.vec());
  }
}

TEST(Sampler, OutputClippedAndTrajectoryRecorded) {
  auto bundle = make_test_bundle<float>(2);
  auto y = cloudy_batch<float>(3);
  auto cfg = ddim_cfg(10);
  cfg.snapshot_steps = {1000, 100};
  auto [x, rec] = sample(bundle, y, cfg);
  EXPECT_EQ(x.shape(), y.shape());
  for (float v : x.vec()) ASSERT_TRUE(v >= -1.f && v <= 1.f);
  ASSERT_EQ(rec.steps.size(), 10u);
  for (const auto& s : rec.steps) {
    ASSERT_TRUE(s.mean_w.has_value());
    EXPECT_GE(*s.mean_w, cfg.eta);
    EXPECT_LE(*s.mean_w, 1.0);
    EXPECT_GE(s.seconds, 0.0);
  }
  ASSERT_EQ(rec.snapshots.size(), 2u);
  EXPECT_EQ(rec.snapshots[0].first, 1000);
  EXPECT_EQ(rec.snapshots[1].first, 100);
  EXPECT_EQ(rec.snapshots[1].second.shape(), y.shape());

  cfg.fusion_enabled = false;
  auto [x2, rec2] = sample(bundle, y, cfg);
  for (const auto& s : rec2.steps) EXPECT_FALSE(s.mean_w.has_value());
  cfg.record_trajectory = false;
  EXPECT_TRUE(sample(bundle, y, cfg).second.steps.empty());
}

TEST(Sampler, FusionOffMatchesVanilla) {
  auto bundle = make_test_bundle<float>(3);
  auto y = cloudy_batch<float>(4);
  auto cfg = ddim_cfg(25);
  cfg.fusion_enabled = false;
  EXPECT_EQ(sample(bundle, y, cfg).first.vec(), sample_vanilla(bundle.cnp, bundle.schedule, y, cfg).vec());

  bundle.schedule = make_schedule(40, "linear", 1e-4, 0.2);
  auto anc = ancestral_cfg();
  anc.fusion_enabled = false;
  EXPECT_EQ(sample(bundle, y, anc).first.vec(), sample_vanilla(bundle.cnp, bundle.schedule, y, anc).vec());
}

TEST(Sampler, FullTrustReturnsReference) {
  auto bundle = make_test_bundle<float>(4);
  auto y = cloudy_batch<float>(5);
  SamplerHooks<float> hooks;
  hooks.override_weight = [](Tensor<float>& w, int) { w.fill(1.0f); };
  auto [x, rec] = sample(bundle, y, ddim_cfg(50), hooks);
  auto ref = predict_reference(*bundle.reference, y, kBands);
  EXPECT_EQ(x.vec(), ref.vec());
  for (const auto& s : rec.steps) EXPECT_EQ(*s.mean_w, 1.0);
}

TEST(Sampler, ReferenceEvaluatedOnce) {
  std::mt19937_64 rng(5);
  auto counting = std::make_shared<CountingReference<float>>(build_reference<float>({"residual_cnn", kBands, 8, 5}, rng));
  auto bundle = make_test_bundle<float>(5, counting);
  sample(bundle, cloudy_batch<float>(6), ddim_cfg(10));
  EXPECT_EQ(counting->calls, 1);
  auto cfg = ddim_cfg(10);
  cfg.fusion_enabled = false;
  sample(bundle, cloudy_batch<float>(6), cfg);
  EXPECT_EQ(counting->calls, 1);
}

TEST(Sampler, RejectsBadInputs) {
  auto bundle = make_test_bundle<float>(6);
  EXPECT_THROW(sample(bundle, Tensor<float>({1, kBands + 1, 8, 8}), ddim_cfg()), std::invalid_argument);
  EXPECT_THROW(sample(bundle, cloudy_batch<float>(7), ddim_cfg(1001)), std::invalid_argument);
  auto cfg = ddim_cfg();
  cfg.eta = 1.0;
  EXPECT_THROW(sample(bundle, cloudy_batch<float>(7), cfg), std::invalid_argument);
}

TEST(DenoiseStep, ZeroWeightAtZeroEtaIsPureDiffusion) {
  auto bundle = make_test_bundle<double>(7);
  auto y = cloudy_batch<double>(8);
  std::mt19937_64 rng(9);
  auto xt = Tensor<double>::randn(y.shape(), rng), z = Tensor<double>::randn(y.shape(), rng);
  auto ref = predict_reference(*bundle.reference, y);
  SamplerHooks<double> zero;
  zero.override_weight = [](Tensor<double>& w, int) { w.fill(0.0); };
  for (auto cfg : {ddim_cfg(), ancestral_cfg()}) {
    cfg.eta = 0.0;
    int t = 600, t_prev = cfg.mode == SamplerMode::ddim ? 400 : 599;
    auto fused = denoise_step(bundle, xt, y, ref, t, t_prev, cfg, z, zero);
    auto off = cfg;
    off.fusion_enabled = false;
    EXPECT_EQ(fused.vec(), denoise_step(bundle, xt, y, ref, t, t_prev, off, z).vec());
  }
}

TEST(DenoiseStep, FinalAncestralStepAddsNoNoise) {
  auto bundle = make_test_bundle<double>(8);
  auto y = cloudy_batch<double>(9);
  std::mt19937_64 rng(10);
  auto xt = Tensor<double>::randn(y.shape(), rng);
  auto ref = predict_reference(*bundle.reference, y);
  auto a = denoise_step(bundle, xt, y, ref, 1, 0, ancestral_cfg(), Tensor<double>::randn(y.shape(), rng));
  auto b = denoise_step(bundle, xt, y, ref, 1, 0, ancestral_cfg(), Tensor<double>(y.shape()));
  EXPECT_EQ(a.vec(), b.vec());
  EXPECT_THROW(denoise_step(bundle, xt, y, ref, 5, 3, ancestral_cfg(), Tensor<double>(y.shape())),
               std::invalid_argument);
}

TEST(DenoiseStep, MatchesInlineComposition) {
  auto bundle = make_test_bundle<double>(9);
  auto y = cloudy_batch<double>(10);
  std::mt19937_64 rng(11);
  auto xt = Tensor<double>::randn(y.shape(), rng), z = Tensor<double>::randn(y.shape(), rng);
  auto ref = predict_reference(*bundle.reference, y);
  const auto& s = bundle.schedule;
  for (auto cfg : {ddim_cfg(), ancestral_cfg()}) {
    const int t = 700, t_prev = cfg.mode == SamplerMode::ddim ? 650 : 699;
    std::vector<int> steps(y.n(), t);

    // oracle: recompute each stage scalar by scalar from the network outputs
    auto eps = bundle.cnp.predict(concat_channels<double>({&xt, &y}), steps);
    auto w = bundle.wa.predict(concat_channels<double>({&xt, &y, &ref}), steps);
    double ab = s.alpha_bar(t), abp = s.alpha_bar(t_prev), b = s.beta(t);
    Tensor<double> expected(y.shape());
    for (std::size_t i = 0; i < y.size(); ++i) {
      double x0e = std::clamp((xt[i] - std::sqrt(1 - ab) * eps[i]) / std::sqrt(ab), -1.0, 1.0);
      double wi = std::max(w[i], cfg.eta);
      double x0 = std::clamp((1 - wi) * x0e + wi * ref[i], -1.0, 1.0);
      if (cfg.mode == SamplerMode::ddim) {
        expected[i] = std::sqrt(abp) * x0 + std::sqrt(1 - abp) * eps[i];
      } else {
        double bt = (1 - abp) / (1 - ab) * b;
        expected[i] = std::sqrt(abp) * b / (1 - ab) * x0 + std::sqrt(1 - b) * (1 - abp) / (1 - ab) * xt[i] +
                      std::sqrt(bt) * z[i];
      }
    }
    TrajectoryStep rec;
    Tensor<double> fused;
    auto got = denoise_step(bundle, xt, y, ref, t, t_prev, cfg, z, {}, &rec, &fused);
    for (std::size_t i = 0; i < y.size(); ++i) ASSERT_NEAR(got[i], expected[i], 1e-12);
    double mean_w = 0;
    for (double v : w.vec()) mean_w += std::max(v, cfg.eta);
    EXPECT_NEAR(*rec.mean_w, mean_w / w.size(), 1e-12);
    EXPECT_EQ(fused.shape(), y.shape());
  }
}

TEST(Bundle, ValidatesBandConsistency) {
  std::mt19937_64 rng(12);
  auto ref = build_reference<float>({"residual_cnn", kBands + 1, 8, 5}, rng);
  EXPECT_THROW(make_bundle<float>(kBands, small_spec(), small_spec(), ref, ScheduleDescriptor{}, rng),
               std::invalid_argument);
  EXPECT_THROW(make_bundle<float>(kBands, small_spec(), small_spec(), nullptr, ScheduleDescriptor{}, rng),
               std::invalid_argument);
}
