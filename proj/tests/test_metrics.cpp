#include <gtest/gtest.h>

#include <random>

#include "decloud/data.hpp"
#include "decloud/metrics.hpp"

using namespace decloud;

namespace {

Tensor<double> texture(std::uint64_t seed, int bands = 3, int size = 32) {
  std::mt19937_64 rng(seed);
  return Tensor<double>::uniform({bands, size, size}, rng, 0.0, 1.0);
}

}  // namespace

TEST(Psnr, ClosedFormCases) {
  Tensor<double> a({3, 8, 8}, 100.0);
  EXPECT_EQ(psnr(a, a, 255.0), kPsnrCap);
  EXPECT_NEAR(psnr(a, Tensor<double>({3, 8, 8}, 101.0), 255.0), 20 * std::log10(255.0), 1e-12);
  EXPECT_NEAR(psnr(a, Tensor<double>({3, 8, 8}, 101.0), 255.0), 48.13, 0.005);
  EXPECT_NEAR(psnr(Tensor<double>({1, 4, 4}), Tensor<double>({1, 4, 4}, 255.0), 255.0), 0.0, 1e-12);
}

TEST(Psnr, SymmetricAndDecreasingInError) {
  auto a = texture(1), b = texture(2);
  EXPECT_EQ(psnr(a, b, 1.0), psnr(b, a, 1.0));
  double prev = kPsnrCap + 1;
  for (double d : {0.001, 0.01, 0.1, 0.5}) {
    double p = psnr(a, a + Tensor<double>(a.shape(), d), 1.0);
    EXPECT_LT(p, prev);
    prev = p;
  }
}

TEST(Psnr, Errors) {
  EXPECT_THROW(psnr(texture(1), texture(2, 2), 1.0), ShapeError);
  EXPECT_THROW(psnr(texture(1), texture(2), 0.0), std::invalid_argument);
}

TEST(Ssim, SelfSimilarityIsOne) {
  auto a = texture(3);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  Tensor<double> c({2, 16, 16}, 0.4);
  EXPECT_NEAR(ssim(c, c), 1.0, 1e-12);
}

TEST(Ssim, InvertedTextureIsNegative) {
  // photometric inverse on [0, 1]: same local means, anticorrelated structure
  auto a = texture(4);
  auto inv = map(a, [](double v) { return 1.0 - v; });
  EXPECT_LT(ssim(a, inv), -0.5);
}

TEST(Ssim, SymmetricBoundedAndOrdered) {
  auto a = texture(5), b = texture(6);
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-12);
  EXPECT_GE(ssim(a, b), -1.0);
  EXPECT_LE(ssim(a, b), 1.0);
  std::mt19937_64 rng(7);
  auto light = a + Tensor<double>::randn(a.shape(), rng, 0.02);
  auto heavy = a + Tensor<double>::randn(a.shape(), rng, 0.2);
  EXPECT_GT(ssim(a, light), ssim(a, heavy));
}

TEST(Ssim, MultibandIsMeanOfBands) {
  auto a = texture(8, 2), b = texture(9, 2);
  auto band = [](const Tensor<double>& t, int i) {
    return Tensor<double>({1, 32, 32}, std::vector<double>(t.vec().begin() + i * 1024, t.vec().begin() + (i + 1) * 1024));
  };
  EXPECT_NEAR(ssim(a, b), (ssim(band(a, 0), band(b, 0)) + ssim(band(a, 1), band(b, 1))) / 2, 1e-12);
}

TEST(Ssim, RejectsSmallImages) {
  EXPECT_THROW(ssim(texture(1, 1, 8), texture(2, 1, 8)), std::invalid_argument);
}

TEST(Perceptual, UnavailableWithoutBackend) {
  auto r = perceptual_distance(texture(1), texture(2), nullptr);
  EXPECT_FALSE(r.available());
  EXPECT_NE(r.diagnostic.find("unavailable"), std::string::npos);
}

TEST(Perceptual, FeatureBackend) {
  FeatureDistanceBackend backend(3, {8, 16}, 1);
  auto a = map(texture(10), [](double v) { return 2 * v - 1; });
  EXPECT_EQ(*perceptual_distance(a, a, &backend).value, 0.0);
  std::mt19937_64 rng(11);
  auto noise = Tensor<double>::randn(a.shape(), rng);
  double light = *perceptual_distance(a, a + noise * 0.05, &backend).value;
  double heavy = *perceptual_distance(a, a + noise * 0.5, &backend).value;
  EXPECT_GT(heavy, light);
  EXPECT_GT(light, 0.0);
}

TEST(Perceptual, BackendFailureSurfacesAsUnavailable) {
  struct Broken final : PerceptualBackend {
    std::string name() const override { return "broken"; }
    double distance(const Tensor<float>&, const Tensor<float>&) const override { throw std::runtime_error("boom"); }
  } broken;
  auto r = perceptual_distance(texture(1), texture(2), &broken);
  EXPECT_FALSE(r.available());
  EXPECT_NE(r.diagnostic.find("boom"), std::string::npos);
}

TEST(Report, MeansInvariantToOrder) {
  std::vector<ImageMetrics> imgs;
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(10, 40);
  for (int i = 0; i < 100; ++i) imgs.push_back({std::to_string(i), u(rng), u(rng) / 40, std::nullopt});
  MetricReport a{"m", 1.0, imgs}, b = a;
  std::shuffle(b.images.begin(), b.images.end(), rng);
  std::reverse(a.images.begin(), a.images.end());
  EXPECT_EQ(a.mean_psnr(), b.mean_psnr());
  EXPECT_EQ(a.mean_ssim(), b.mean_ssim());
  EXPECT_FALSE(a.mean_lpips().has_value());
}

TEST(Report, ScoreImageUsesUnitScale) {
  Tensor<double> a({1, 16, 16}, -1.0), b({1, 16, 16}, -0.98);
  // a difference of 0.02 on [-1, 1] is 0.01 on [0, 1]: 40 dB at peak 1
  auto m = score_image("x", a, b);
  EXPECT_NEAR(m.psnr, 40.0, 1e-9);
  EXPECT_FALSE(m.lpips.has_value());
  EXPECT_NEAR(score_image("y", a, a).ssim, 1.0, 1e-12);
}
