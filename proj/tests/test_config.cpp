#include <gtest/gtest.h>

#include <fstream>

#include "decloud/config.hpp"
#include "tempdir.hpp"

using namespace decloud;
using decloud::testkit::TempDir;

TEST(Config, DefaultsAreValid) {
  ExperimentConfig c;
  c.apply_seed();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.schedule.steps, 1000);
  EXPECT_EQ(c.cnp_small.image_size, 8);
  EXPECT_EQ(c.joint.image_size, 32);
  EXPECT_EQ(c.cnp_small.learning_rate, 1e-5);
  EXPECT_EQ(c.sampler.eta, 0.3);
  EXPECT_TRUE(c.sampler.fusion_enabled);
}

TEST(Config, SerializeParseIsFixedPoint) {
  auto c = parse_config(R"(
seed = 42
output_dir = "runs/x"
[schedule]
kind = "cosine"
[cnp]
base_channels = 16
[stages.joint]
learning_rate = 3e-5
lambda = 0.25
[sampler]
mode = "ancestral"
eta = 0.2
[data]
coverage = 0.3
)");
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.schedule.kind, "cosine");
  EXPECT_EQ(c.cnp.base_channels, 16);
  EXPECT_EQ(c.joint.lambda, 0.25);
  EXPECT_EQ(c.sampler.mode, SamplerMode::ancestral);
  EXPECT_EQ(c.data.coverage, 0.3);
  auto text = serialize_config(c);
  auto again = parse_config(text);
  EXPECT_EQ(serialize_config(again), text);
  EXPECT_EQ(again.cnp, c.cnp);
  EXPECT_EQ(again.wa, c.wa);
  EXPECT_EQ(again.schedule, c.schedule);
  EXPECT_EQ(again.data, c.data);
}

TEST(Config, PresetSelection) {
  auto c = parse_config("bands = 3\n[cnp]\npreset = \"full\"\n[wa]\npreset = \"full\"\n");
  EXPECT_EQ(c.cnp, presets::cnp_full(3));
  EXPECT_EQ(c.wa, presets::wa_full(3));
  EXPECT_EQ(c.reference.bands, 3);
}

TEST(Config, SeedDerivation) {
  auto a = parse_config("seed = 7\n"), b = parse_config("seed = 7\n"), c = parse_config("seed = 8\n");
  EXPECT_EQ(a.cnp_small.seed, b.cnp_small.seed);
  EXPECT_EQ(a.reference_training.seed, b.reference_training.seed);
  EXPECT_NE(a.cnp_small.seed, c.cnp_small.seed);
  EXPECT_NE(a.cnp_small.seed, a.wa_frozen.seed);
  EXPECT_EQ(a.sampler.seed, 7u);
}

TEST(Config, ParseErrors) {
  EXPECT_THROW(parse_config("seed = "), ConfigError);
  EXPECT_THROW(parse_config("seed = \"x\"\n"), ConfigError);
  EXPECT_THROW(parse_config("cnp = 3\n"), ConfigError);
  EXPECT_THROW(parse_config("[cnp]\npreset = \"huge\"\n"), ConfigError);
  EXPECT_THROW(parse_config("[sampler]\nmode = \"euler\"\n"), ConfigError);
  EXPECT_THROW(parse_config("version = 2\n"), ConfigError);
}

TEST(Config, ValidationErrors) {
  auto invalid = [](const char* text) {
    auto c = parse_config(text);
    EXPECT_THROW(c.validate(), ConfigError) << text;
  };
  invalid("[sampler]\neta = 1.5\n");
  invalid("[stages.cnp_small]\nlearning_rate = -1.0\n");
  invalid("[stages.joint]\nimage_size = 30\n");
  invalid("[stages.wa_frozen]\nimage_size = 64\n");
  invalid("[data]\nsplit_ratio = 1.0\n");
  invalid("[data]\ncoverage = 2.0\n");
  invalid("[wa]\nhead = \"linear\"\n");
  invalid("[reference]\nname = \"magic\"\n");
  invalid("[schedule]\nsteps = 0\n");
}

TEST(Config, LoadFromFile) {
  TempDir dir("cfg");
  try {
    load_config(dir / "absent.toml");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("absent.toml"), std::string::npos);
  }
  std::ofstream(dir / "c.toml") << "seed = 5\n";
  EXPECT_EQ(load_config(dir / "c.toml").seed, 5u);
  std::ofstream(dir / "bad.toml") << "[[[";
  try {
    load_config(dir / "bad.toml");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line"), std::string::npos);
  }
}
