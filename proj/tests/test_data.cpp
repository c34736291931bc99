#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "decloud/data.hpp"
#include "decloud/experiment.hpp"

using namespace decloud;

namespace {

std::vector<int> iota_items(int n) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

// Dark scene with a white disk covering `fraction` of the area.
Tensor<double> disk_image(int size, double fraction, int bands = 4) {
  Tensor<double> img({bands, size, size}, -0.6);
  double r = std::sqrt(fraction * size * size / M_PI), c = (size - 1) / 2.0;
  for (int b = 0; b < bands; ++b)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        if ((y - c) * (y - c) + (x - c) * (x - c) <= r * r) img[(b * size + y) * size + x] = 1.0;
  return img;
}

}  // namespace

TEST(Split, Counts) {
  auto [a, b] = split_dataset(iota_items(668), 0.8, 1);
  EXPECT_EQ(a.size(), 534u);
  EXPECT_EQ(b.size(), 134u);
  // round(0.8 * 559) = 447; see the README for the 448 / 111 split quoted for this corpus size
  auto [c, d] = split_dataset(iota_items(559), 0.8, 1);
  EXPECT_EQ(c.size(), 447u);
  EXPECT_EQ(d.size(), 112u);
}

TEST(Split, DeterministicDisjointExhaustive) {
  for (std::uint64_t seed : {0ull, 1ull, 99ull}) {
    auto items = iota_items(10);
    auto first = split_dataset(items, 0.8, seed), second = split_dataset(items, 0.8, seed);
    EXPECT_EQ(first, second);
    std::set<int> all(first.first.begin(), first.first.end());
    for (int v : first.second) EXPECT_TRUE(all.insert(v).second) << "item on both sides";
    EXPECT_EQ(all.size(), 10u);
  }
  EXPECT_NE(split_dataset(iota_items(50), 0.8, 1), split_dataset(iota_items(50), 0.8, 2));
}

TEST(Split, Errors) {
  EXPECT_THROW(split_dataset(std::vector<int>{}, 0.8, 1), std::invalid_argument);
  EXPECT_THROW(split_dataset(iota_items(4), 0.0, 1), std::invalid_argument);
  EXPECT_THROW(split_dataset(iota_items(4), 1.0, 1), std::invalid_argument);
  auto [a, b] = split_dataset(iota_items(2), 0.99, 1);
  EXPECT_EQ(a.size(), 1u);
  EXPECT_EQ(b.size(), 1u);
}

TEST(Ccp, AnalyticMasks) {
  EXPECT_EQ(compute_ccp(CloudMask(8, 8, 0)), 1.0);
  EXPECT_EQ(compute_ccp(CloudMask(8, 8, 1)), 0.0);
  CloudMask checker(8, 8);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) checker.at(y, x) = (x + y) % 2;
  EXPECT_EQ(compute_ccp(checker), 0.5);
}

TEST(Ccp, PermutationInvariantAndBounded) {
  std::mt19937_64 rng(3);
  CloudMask m(16, 16);
  std::bernoulli_distribution coin(0.3);
  for (auto& v : m.values) v = coin(rng);
  double base = compute_ccp(m);
  EXPECT_GE(base, 0.0);
  EXPECT_LE(base, 1.0);
  std::shuffle(m.values.begin(), m.values.end(), rng);
  EXPECT_EQ(compute_ccp(m), base);
}

TEST(Ccp, Errors) {
  EXPECT_THROW(compute_ccp(CloudMask()), std::invalid_argument);
  CloudMask m(2, 2);
  m.values[0] = 2;
  EXPECT_THROW(compute_ccp(m), std::invalid_argument);
}

TEST(ThresholdMask, UniformImages) {
  Tensor<double> white({3, 8, 8}, 1.0), black({3, 8, 8}, -1.0);
  EXPECT_EQ(compute_ccp(threshold_cloud_mask(white, 0.8)), 1.0);
  EXPECT_EQ(compute_ccp(threshold_cloud_mask(black, 0.8)), 0.0);
}

TEST(ThresholdMask, RecoversDiskCoverage) {
  auto img = disk_image(128, 0.30);
  EXPECT_NEAR(compute_ccp(threshold_cloud_mask(img, 0.8)), 0.30, 0.03);
}

TEST(ThresholdMask, MajorityRemovesSpeckle) {
  Tensor<double> img({1, 9, 9}, -1.0);
  img[4 * 9 + 4] = 1.0;  // isolated bright pixel
  EXPECT_EQ(compute_ccp(threshold_cloud_mask(img, 0.5)), 0.0);
}

TEST(SynthCloud, ZeroCoverageIsIdentity) {
  auto clear = synth_scene<double>(4, 32, 1);
  auto s = synth_cloud(clear, 0.0, 0.8, 2);
  EXPECT_EQ(s.cloudy.vec(), clear.vec());
  EXPECT_EQ(s.clear.vec(), clear.vec());
}

TEST(SynthCloud, FullCoverageSaturates) {
  auto s = synth_cloud(synth_scene<double>(4, 32, 3), 1.0, 1.0, 4);
  for (double v : s.cloudy.vec()) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(SynthCloud, MeanAlphaMatchesTarget) {
  for (double thickness : {1.0, 0.6})
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto a = cloud_alpha(64, 64, 0.5, thickness, seed);
      double mean = std::accumulate(a.begin(), a.end(), 0.0) / a.size();
      EXPECT_NEAR(mean, 0.5 * thickness, 0.05);
      for (double v : a) ASSERT_TRUE(v >= 0 && v <= thickness);
    }
}

TEST(SynthCloud, OverlayFormula) {
  auto clear = synth_scene<double>(2, 16, 5);
  auto s = synth_cloud(clear, 0.4, 0.7, 6, "x");
  auto a = cloud_alpha(16, 16, 0.4, 0.7, 6);
  for (int b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < a.size(); ++i)
      EXPECT_NEAR(s.cloudy[b * a.size() + i], (1 - a[i]) * clear[b * a.size() + i] + a[i], 1e-12);
  EXPECT_EQ(s.id, "x");
}

TEST(SynthCloud, DeterministicAndValidated) {
  auto clear = synth_scene<float>(4, 16, 7);
  EXPECT_EQ(synth_cloud(clear, 0.5, 0.5, 8).cloudy.vec(), synth_cloud(clear, 0.5, 0.5, 8).cloudy.vec());
  EXPECT_THROW(synth_cloud(clear, 1.5, 0.5, 8), std::invalid_argument);
  EXPECT_THROW(synth_cloud(clear, 0.5, -0.1, 8), std::invalid_argument);
}

TEST(SynthScene, RangeAndDeterminism) {
  auto a = synth_scene<float>(4, 32, 9);
  EXPECT_EQ(a.shape(), (Shape{4, 32, 32}));
  for (float v : a.vec()) ASSERT_TRUE(v >= -1.f && v <= 1.f);
  EXPECT_EQ(a.vec(), synth_scene<float>(4, 32, 9).vec());
  EXPECT_NE(a.vec(), synth_scene<float>(4, 32, 10).vec());
  auto ds = synth_dataset<float>(3, 4, 16, 0.5, 0.5, 11);
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds[2].id, "synth_00002");
}

TEST(ResizeAndCrop, ResolutionArithmetic) {
  PairedSample<float> s{Tensor<float>({1, 512, 512}), Tensor<float>({1, 512, 512}), "s", 0.5};
  auto one = resize_and_crop(s, 1.0, 256);
  EXPECT_EQ(one.clear.shape(), (Shape{1, 256, 256}));
  EXPECT_EQ(one.resolution, 1.0);
  auto two = resize_and_crop(s, 2.0, 128);
  EXPECT_EQ(two.clear.shape(), (Shape{1, 128, 128}));
  EXPECT_THROW(resize_and_crop(s, 2.0, 129), std::invalid_argument);
  EXPECT_THROW(resize_and_crop(s, 0.25, 64), std::invalid_argument);
}

TEST(ResizeAndCrop, IdentityKeepsSample) {
  auto s = synth_cloud(synth_scene<float>(4, 32, 12), 0.5, 0.5, 13, "id");
  auto out = resize_and_crop(s, 0.5, 32);
  EXPECT_EQ(out.clear.vec(), s.clear.vec());
  EXPECT_EQ(out.cloudy.vec(), s.cloudy.vec());
}

TEST(ResizeAndCrop, AlignmentPreserved) {
  PairedSample<double> s{Tensor<double>({2, 64, 64}), Tensor<double>({2, 64, 64}), "m", 0.5};
  // mark the same 2x2 block in both members; after a 2x reduction it is one pixel
  for (int b = 0; b < 2; ++b)
    for (int y = 20; y < 22; ++y)
      for (int x = 36; x < 38; ++x) {
        s.cloudy[(b * 64 + y) * 64 + x] = 1.0;
        s.clear[(b * 64 + y) * 64 + x] = 0.5;
      }
  auto out = resize_and_crop(s, 1.0, 16, 4, 12);
  for (int b = 0; b < 2; ++b) {
    EXPECT_DOUBLE_EQ(out.cloudy[(b * 16 + 6) * 16 + 6], 1.0);
    EXPECT_DOUBLE_EQ(out.clear[(b * 16 + 6) * 16 + 6], 0.5);
  }
  EXPECT_DOUBLE_EQ(out.cloudy.sum(), 2.0);
  EXPECT_DOUBLE_EQ(out.clear.sum(), 1.0);
}

TEST(ResizeBilinear, HalvingAveragesBlocks) {
  Tensor<double> img({1, 2, 4}, std::vector<double>{1, 3, 5, 7, 2, 4, 6, 8});
  auto out = resize_bilinear(img, 1, 2);
  EXPECT_DOUBLE_EQ(out[0], 2.5);
  EXPECT_DOUBLE_EQ(out[1], 6.5);
}

TEST(ResizeDataset, UpdatesResolution) {
  auto ds = synth_dataset<float>(2, 4, 32, 0.5, 0.5, 14);
  auto small = resize_dataset(ds, 8);
  EXPECT_EQ(small[0].clear.shape(), (Shape{4, 8, 8}));
  EXPECT_DOUBLE_EQ(small[0].resolution, 2.0);
}

TEST(MakeBatch, StacksSelection) {
  auto ds = synth_dataset<float>(3, 2, 8, 0.5, 0.5, 15);
  auto [y, x0] = make_batch(ds, {2, 0});
  EXPECT_EQ(y.shape(), (Shape{2, 2, 8, 8}));
  EXPECT_EQ(y.slice_batch(0, 1).vec(), ds[2].cloudy.vec());
  EXPECT_EQ(x0.slice_batch(1, 2).vec(), ds[0].clear.vec());
}

TEST(AtResolution, TilesEveryCrop) {
  auto data = synth_dataset<float>(2, 3, 16, 0.5, 0.5, 7, 0.5);
  auto fine = at_resolution(data, 0.5, 8);
  ASSERT_EQ(fine.size(), 8u);
  EXPECT_EQ(fine[1].id, data[0].id + "_0_1");
  EXPECT_EQ(fine[3].clear.vec(), crop(data[0].clear, 8, 8, 8).vec());
  auto coarse = at_resolution(data, 1.0, 8);
  ASSERT_EQ(coarse.size(), 2u);
  EXPECT_EQ(coarse[0].id, data[0].id);
  EXPECT_EQ(coarse[0].resolution, 1.0);
  EXPECT_THROW(at_resolution(data, 2.0, 8), std::invalid_argument);
  EXPECT_THROW(at_resolution(data, 0.25, 8), std::invalid_argument);
}
