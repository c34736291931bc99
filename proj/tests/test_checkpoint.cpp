#include <gtest/gtest.h>

#include <fstream>

#include "decloud/checkpoint.hpp"
#include "tempdir.hpp"

using namespace decloud;
using decloud::testkit::TempDir;

namespace {

UNetSpec spec(int in, int out, OutputHead head) {
  UNetSpec s;
  s.base_channels = 8;
  s.depth = 1;
  s.channel_multipliers = {1, 2};
  s.attention_resolutions = {2};
  s.heads = 1;
  s.norm_groups = 4;
  s.in_channels = in;
  s.out_channels = out;
  s.head = head;
  return s;
}

template <class T>
void perturb(const nn::ParamList<T>& ps, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0, 0.1);
  for (auto [name, v] : ps)
    for (auto& x : v.mutable_value().vec()) x += static_cast<T>(n(rng));
}

template <class T>
DenoiserBundle<T> bundle(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto ref = build_reference<T>({"residual_cnn", 2, 8, 2}, rng);
  auto b = make_bundle<T>(2, spec(4, 2, OutputHead::linear), spec(6, 2, OutputHead::sigmoid), ref,
                          ScheduleDescriptor{200, "cosine", 1e-4, 0.02}, rng);
  perturb(b.cnp.parameters(), rng);
  perturb(b.wa.parameters(), rng);
  perturb(b.reference->parameters(), rng);
  b.completed_stages = {"cnp_small", "wa_frozen"};
  return b;
}

template <class T>
void expect_same_params(const nn::ParamList<T>& a, const nn::ParamList<T>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_EQ(a[i].second.value().vec(), b[i].second.value().vec()) << a[i].first;
  }
}

}  // namespace

TEST(Checkpoint, BundleRoundTripIsBitExact) {
  TempDir dir("ckpt");
  auto b = bundle<float>(1);
  save_bundle(dir / "b.ckpt", b);
  auto back = load_bundle<float>(dir / "b.ckpt");
  EXPECT_EQ(back.bands, 2);
  EXPECT_EQ(back.cnp.spec(), b.cnp.spec());
  EXPECT_EQ(back.wa.spec(), b.wa.spec());
  EXPECT_EQ(back.schedule.descriptor(), b.schedule.descriptor());
  EXPECT_EQ(back.completed_stages, b.completed_stages);
  expect_same_params(back.cnp.parameters(), b.cnp.parameters());
  expect_same_params(back.wa.parameters(), b.wa.parameters());
  expect_same_params(back.reference->parameters(), b.reference->parameters());
  EXPECT_EQ(nn::parameter_checksum(back.cnp.parameters()), nn::parameter_checksum(b.cnp.parameters()));
}

TEST(Checkpoint, DoubleRoundTripAndPredictionsMatch) {
  TempDir dir("ckpt");
  auto b = bundle<double>(2);
  save_bundle(dir / "b.ckpt", b);
  auto back = load_bundle<double>(dir / "b.ckpt");
  std::mt19937_64 rng(3);
  auto x = Tensor<double>::randn({1, 4, 8, 8}, rng);
  EXPECT_EQ(back.cnp.predict(x, {17}).vec(), b.cnp.predict(x, {17}).vec());
}

TEST(Checkpoint, ReferenceRoundTrip) {
  TempDir dir("ckpt");
  std::mt19937_64 rng(4);
  auto ref = build_reference<float>({"residual_cnn", 3, 8, 2}, rng);
  perturb(ref->parameters(), rng);
  save_reference(dir / "r.ckpt", *ref);
  auto back = load_reference<float>(dir / "r.ckpt");
  EXPECT_EQ(describe_reference(*back), describe_reference(*ref));
  expect_same_params(back->parameters(), ref->parameters());
  auto id = build_reference<float>({"identity", 3, 8, 2}, rng);
  save_reference(dir / "i.ckpt", *id);
  EXPECT_EQ(describe_reference(*load_reference<float>(dir / "i.ckpt")).name, "identity");
}

TEST(Checkpoint, RejectsBadFiles) {
  TempDir dir("ckpt");
  EXPECT_THROW(load_bundle<float>(dir / "missing.ckpt"), CheckpointError);
  std::ofstream(dir / "junk.ckpt") << "definitely not a checkpoint";
  EXPECT_THROW(load_bundle<float>(dir / "junk.ckpt"), CheckpointError);

  std::mt19937_64 rng(5);
  save_reference(dir / "r.ckpt", *build_reference<float>({"residual_cnn", 2, 8, 2}, rng));
  EXPECT_THROW(load_bundle<float>(dir / "r.ckpt"), CheckpointError);
  save_bundle(dir / "b.ckpt", bundle<float>(6));
  EXPECT_THROW(load_reference<float>(dir / "b.ckpt"), CheckpointError);

  // truncate the parameter payload
  auto size = std::filesystem::file_size(dir / "b.ckpt");
  std::filesystem::resize_file(dir / "b.ckpt", size - 64);
  EXPECT_THROW(load_bundle<float>(dir / "b.ckpt"), CheckpointError);
  // corrupt the header
  {
    std::fstream f(dir / "r.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(16);
    f.write("@@@@", 4);
  }
  EXPECT_THROW(load_reference<float>(dir / "r.ckpt"), CheckpointError);
}
