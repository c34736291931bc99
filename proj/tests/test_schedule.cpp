#include <gtest/gtest.h>

#include <random>

#include "decloud/schedule.hpp"

using namespace decloud;

namespace {

Tensor<double> random_image(std::uint64_t seed, Shape s = {2, 3, 5, 4}) {
  std::mt19937_64 rng(seed);
  return Tensor<double>::uniform(s, rng, -1.0, 1.0);
}

}  // namespace

TEST(Schedule, LinearEndpointMatchesDirectProduct) {
  auto s = make_schedule(1000, "linear", 1e-4, 0.02);
  long double prod = 1;
  for (int t = 1; t <= 1000; ++t) prod *= 1.0L - (1e-4L + (0.02L - 1e-4L) * (t - 1) / 999.0L);
  EXPECT_NEAR(s.alpha_bar(1000), static_cast<double>(prod), 1e-12);
  EXPECT_NEAR(s.alpha_bar(1000), 4.04e-5, 0.01e-5);
}

TEST(Schedule, SingleStep) {
  auto s = make_schedule(1, "linear", 0.5, 0.5);
  EXPECT_EQ(s.steps(), 1);
  EXPECT_DOUBLE_EQ(s.beta(1), 0.5);
  EXPECT_DOUBLE_EQ(s.alpha_bar(1), 0.5);
  EXPECT_DOUBLE_EQ(s.beta_tilde(1), 0.0);
}

TEST(Schedule, TwoSteps) {
  auto s = make_schedule(2, "linear", 0.1, 0.3);
  EXPECT_NEAR(s.alpha_bar(1), 0.9, 1e-15);
  EXPECT_NEAR(s.alpha_bar(2), 0.63, 1e-15);
}

TEST(Schedule, Invariants) {
  for (const char* kind : {"linear", "cosine"}) {
    auto s = make_schedule(1000, kind, 1e-4, 0.02);
    EXPECT_EQ(s.alpha_bar(0), 1.0);
    EXPECT_EQ(s.beta_tilde(1), 0.0);
    for (int t = 1; t <= 1000; ++t) {
      EXPECT_GT(s.beta(t), 0.0);
      EXPECT_LT(s.beta(t), 1.0);
      EXPECT_EQ(s.alpha(t), 1.0 - s.beta(t));
      EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
      EXPECT_NEAR(s.alpha_bar(t) / s.alpha_bar(t - 1), s.alpha(t), 1e-12);
      double closed = (1 - s.alpha_bar(t - 1)) / (1 - s.alpha_bar(t)) * s.beta(t);
      EXPECT_NEAR(s.beta_tilde(t), closed, 1e-15);
      EXPECT_GE(s.beta_tilde(t), 0.0);
    }
  }
}

TEST(Schedule, RejectsBadArguments) {
  EXPECT_THROW(make_schedule(0, "linear", 1e-4, 0.02), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, "linear", 0.0, 0.02), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, "linear", 1e-4, 1.0), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, "linear", 0.2, 0.1), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, "quadratic", 1e-4, 0.02), std::invalid_argument);
  auto s = make_schedule(10, "linear", 1e-4, 0.02);
  EXPECT_THROW(s.beta(0), std::out_of_range);
  EXPECT_THROW(s.beta(11), std::out_of_range);
}

TEST(ForwardSample, ZeroNoiseScaling) {
  // a single step with beta = 0.75 gives alpha_bar = 0.25
  auto s = make_schedule(1, "linear", 0.75, 0.75);
  auto x0 = random_image(1);
  auto xt = forward_sample(x0, 1, Tensor<double>(x0.shape()), s);
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(xt[i], 0.5 * x0[i], 1e-15);
}

TEST(ForwardSample, NearIdentityAtFirstStep) {
  auto s = make_schedule(1000, "linear", 1e-8, 0.02);
  auto x0 = random_image(2), eps = random_image(3);
  auto xt = forward_sample(x0, 1, eps, s);
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(xt[i], x0[i], 2e-4);
}

TEST(ForwardSample, MonteCarloVariance) {
  auto s = make_schedule(1000, "linear", 1e-4, 0.02);
  const int t = 300;
  std::mt19937_64 rng(11);
  auto eps = Tensor<double>::randn({1, 1, 1, 100000}, rng);
  auto xt = forward_sample(Tensor<double>(eps.shape()), t, eps, s);
  double mean = xt.mean(), var = 0;
  for (std::size_t i = 0; i < xt.size(); ++i) var += (xt[i] - mean) * (xt[i] - mean);
  var /= double(xt.size() - 1);
  double expected = 1 - s.alpha_bar(t);
  double se = expected * std::sqrt(2.0 / (xt.size() - 1));  // std. error of a Gaussian variance estimate
  EXPECT_NEAR(var, expected, 3 * se);
}

TEST(ForwardSample, PerSampleSteps) {
  auto s = make_schedule(100, "linear", 1e-4, 0.02);
  auto x0 = random_image(4), eps = random_image(5);
  auto both = forward_sample(x0, std::vector<int>{10, 90}, eps, s);
  auto a = forward_sample(x0.slice_batch(0, 1), 10, eps.slice_batch(0, 1), s);
  auto b = forward_sample(x0.slice_batch(1, 2), 90, eps.slice_batch(1, 2), s);
  EXPECT_EQ(both.slice_batch(0, 1).vec(), a.vec());
  EXPECT_EQ(both.slice_batch(1, 2).vec(), b.vec());
  EXPECT_THROW(forward_sample(x0, std::vector<int>{10}, eps, s), ShapeError);
  EXPECT_THROW(forward_sample(x0, 0, eps, s), std::out_of_range);
  EXPECT_THROW(forward_sample(x0, 1, random_image(6, {1, 1, 1, 1}), s), ShapeError);
}

TEST(PredictX0, RoundTripAllSteps) {
  auto s = make_schedule(1000, "linear", 1e-4, 0.02);
  std::mt19937_64 rng(7);
  auto x0 = Tensor<double>::uniform({1, 4, 8, 8}, rng, -1.0, 1.0);
  auto eps = Tensor<double>::randn({1, 4, 8, 8}, rng);
  for (int t = 1; t <= 1000; ++t) {
    auto back = predict_x0(forward_sample(x0, t, eps, s), eps, t, s);
    for (std::size_t i = 0; i < x0.size(); ++i) ASSERT_NEAR(back[i], x0[i], 1e-5) << "t=" << t;
  }
}

TEST(PredictX0, FloatRoundTripWithinRoundingAmplification) {
  // dividing by sqrt(alpha_bar) magnifies float rounding by up to ~160x at t = 1000
  auto s = make_schedule(1000, "linear", 1e-4, 0.02);
  std::mt19937_64 rng(7);
  auto x0 = Tensor<float>::uniform({1, 4, 8, 8}, rng, -1.f, 1.f);
  auto eps = Tensor<float>::randn({1, 4, 8, 8}, rng);
  for (int t = 1; t <= 1000; ++t) {
    auto back = predict_x0(forward_sample(x0, t, eps, s), eps, t, s);
    double tol = 8 * std::numeric_limits<float>::epsilon() * 4 / std::sqrt(s.alpha_bar(t));
    for (std::size_t i = 0; i < x0.size(); ++i) ASSERT_NEAR(back[i], x0[i], tol) << "t=" << t;
  }
}

TEST(PredictX0, ZeroNoiseBranch) {
  auto s = make_schedule(50, "linear", 1e-4, 0.02);
  auto xt = random_image(8);
  auto x0 = predict_x0(xt, Tensor<double>(xt.shape()), 20, s);
  for (std::size_t i = 0; i < xt.size(); ++i) EXPECT_NEAR(x0[i], xt[i] / std::sqrt(s.alpha_bar(20)), 1e-14);
}

TEST(PredictX0, MatchesScalarEvaluation) {
  auto s = make_schedule(1000, "cosine", 1e-4, 0.999);
  auto xt = random_image(9), e = random_image(10);
  for (int t : {1, 37, 500, 999}) {
    auto x0 = predict_x0(xt, e, t, s);
    long double ab = 1;
    for (int k = 1; k <= t; ++k) ab *= 1.0L - s.beta(k);
    for (std::size_t i = 0; i < xt.size(); ++i) {
      long double ref = (xt[i] - std::sqrt(1.0L - ab) * e[i]) / std::sqrt(ab);
      EXPECT_NEAR(x0[i], static_cast<double>(ref), 1e-9 * std::max(1.0L, std::abs(ref)));
    }
  }
}

TEST(PosteriorStep, NoiselessTrajectoryStaysNoiseless) {
  auto s = make_schedule(100, "linear", 1e-4, 0.02);
  auto x0 = random_image(12);
  Tensor<double> zero(x0.shape());
  auto x = x0 * std::sqrt(s.alpha_bar(100));
  for (int t = 100; t >= 1; --t) {
    x = posterior_step(x0, x, t, zero, s);
    double scale = std::sqrt(s.alpha_bar(t - 1));
    for (std::size_t i = 0; i < x0.size(); ++i) ASSERT_NEAR(x[i], scale * x0[i], 1e-12) << "t=" << t;
  }
}

TEST(PosteriorStep, ZeroInputs) {
  auto s = make_schedule(10, "linear", 1e-4, 0.02);
  Tensor<double> z({1, 1, 2, 2});
  auto out = posterior_step(z, z, 5, z, s);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], 0.0);
}

TEST(PosteriorStep, MatchesScalarEvaluation) {
  auto s = make_schedule(1000, "linear", 1e-4, 0.02);
  auto x0 = random_image(13), xt = random_image(14), z = random_image(15);
  for (auto coeff : {NoiseCoeff::sqrt_beta_tilde, NoiseCoeff::beta_tilde})
    for (int t : {1, 2, 400, 1000}) {
      auto out = posterior_step(x0, xt, t, z, s, coeff);
      double ab = s.alpha_bar(t), abp = s.alpha_bar(t - 1), b = s.beta(t);
      double bt = (1 - abp) / (1 - ab) * b;
      double cz = t == 1 ? 0.0 : (coeff == NoiseCoeff::sqrt_beta_tilde ? std::sqrt(bt) : bt);
      for (std::size_t i = 0; i < out.size(); ++i) {
        double ref = std::sqrt(abp) * b / (1 - ab) * x0[i] + std::sqrt(1 - b) * (1 - abp) / (1 - ab) * xt[i] + cz * z[i];
        EXPECT_NEAR(out[i], ref, 1e-12);
      }
    }
}

TEST(PosteriorStep, NoNoiseAtFinalStep) {
  auto s = make_schedule(10, "linear", 1e-4, 0.02);
  auto x0 = random_image(16), xt = random_image(17);
  auto a = posterior_step(x0, xt, 1, random_image(18), s);
  auto b = posterior_step(x0, xt, 1, Tensor<double>(x0.shape()), s);
  EXPECT_EQ(a.vec(), b.vec());
}

TEST(DdimStep, FinalStepReturnsEstimate) {
  auto s = make_schedule(1000, "linear", 1e-4, 0.02);
  auto x0 = random_image(19);
  auto out = ddim_step(x0, random_image(20), 20, 0, s);
  EXPECT_EQ(out.vec(), x0.vec());
}

TEST(DdimStep, ZeroNoise) {
  auto s = make_schedule(1000, "linear", 1e-4, 0.02);
  auto x0 = random_image(21);
  auto out = ddim_step(x0, Tensor<double>(x0.shape()), 500, 480, s);
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(out[i], std::sqrt(s.alpha_bar(480)) * x0[i], 1e-15);
}

TEST(DdimStep, ConsistentInputsFollowForwardProcess) {
  auto s = make_schedule(1000, "linear", 1e-4, 0.02);
  auto x0 = random_image(22), eps = random_image(23);
  auto out = ddim_step(x0, eps, 700, 300, s);
  auto ref = forward_sample(x0, 300, eps, s);
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-14);
}

TEST(DdimStep, RejectsNonDecreasingSteps) {
  auto s = make_schedule(100, "linear", 1e-4, 0.02);
  auto x = random_image(24);
  EXPECT_THROW(ddim_step(x, x, 10, 10, s), std::invalid_argument);
  EXPECT_THROW(ddim_step(x, x, 10, 20, s), std::invalid_argument);
}

TEST(DdimTimesteps, UniformStride) {
  auto ts = ddim_timesteps(1000, 50);
  ASSERT_EQ(ts.size(), 50u);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(ts[i], 1000 - 20 * i);
  EXPECT_EQ(ddim_timesteps(10, 10), (std::vector<int>{10, 9, 8, 7, 6, 5, 4, 3, 2, 1}));
  EXPECT_EQ(ddim_timesteps(1000, 1), std::vector<int>{1000});
  EXPECT_THROW(ddim_timesteps(10, 11), std::invalid_argument);
  EXPECT_THROW(ddim_timesteps(10, 0), std::invalid_argument);
}

TEST(DdimTrajectory, Deterministic) {
  auto s = make_schedule(1000, "linear", 1e-4, 0.02);
  auto run = [&] {
    std::mt19937_64 rng(99);
    auto x = Tensor<float>::randn({1, 2, 4, 4}, rng);
    auto ts = ddim_timesteps(1000, 50);
    for (std::size_t i = 0; i < ts.size(); ++i) {
      auto eps_hat = map(x, [](float v) { return 0.3f * v; });
      auto x0 = clip(predict_x0(x, eps_hat, ts[i], s), -1.f, 1.f);
      x = ddim_step(x0, eps_hat, ts[i], i + 1 < ts.size() ? ts[i + 1] : 0, s);
    }
    return x;
  };
  EXPECT_EQ(run().vec(), run().vec());
}
