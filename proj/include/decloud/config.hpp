#pragma once

// Versioned TOML experiment configuration. Serialization always writes every
// field explicitly, so serialize -> parse -> serialize is a fixed point.

#include <filesystem>
#include <sstream>

#include <toml.hpp>

#include "decloud/reference.hpp"
#include "decloud/sampler.hpp"
#include "decloud/training.hpp"

namespace decloud {

inline constexpr int kConfigVersion = 1;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::string dataset;  // manifest or directory; empty selects synthetic data
  double split_ratio = 0.8;
  double resolution = 0.5;
  int synthetic_train = 200;
  int synthetic_test = 40;
  int image_size = 32;
  double coverage = 0.5;
  double thickness = 0.8;

  bool operator==(const DataConfig&) const = default;
};

struct MetricsConfig {
  int ssim_window = 11;
  double ssim_k1 = 0.01;
  double ssim_k2 = 0.03;
  std::string perceptual_weights;  // empty: perceptual distance unavailable

  bool operator==(const MetricsConfig&) const = default;
};

struct ExperimentConfig {
  int version = kConfigVersion;
  std::uint64_t seed = 0;
  int bands = 4;
  std::string output_dir = "runs/default";
  ScheduleDescriptor schedule;
  UNetSpec cnp = presets::cnp_tiny(4);
  UNetSpec wa = presets::wa_tiny(4);
  ReferenceSpec reference;
  std::string reference_checkpoint;  // empty: train the built-in baseline into output_dir
  ReferenceTrainConfig reference_training;
  StageConfig cnp_small{StageKind::cnp_small, 8, 16, 1e-5, 2000};
  StageConfig wa_frozen{StageKind::wa_frozen, 32, 16, 1e-5, 1000};
  StageConfig joint{StageKind::joint, 32, 16, 1e-5, 1000};
  int checkpoint_every = 0;
  SamplerConfig sampler;
  DataConfig data;
  MetricsConfig metrics;

  StageConfig& stage(StageKind k) { return k == StageKind::cnp_small ? cnp_small : k == StageKind::wa_frozen ? wa_frozen : joint; }
  const StageConfig& stage(StageKind k) const {
    return k == StageKind::cnp_small ? cnp_small : k == StageKind::wa_frozen ? wa_frozen : joint;
  }

  /// Derives the per-component seeds from the experiment seed.
  void apply_seed() {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
    std::array<std::uint32_t, 4> s;
    seq.generate(s.begin(), s.end());
    cnp_small.seed = s[0];
    wa_frozen.seed = s[1];
    joint.seed = s[2];
    reference_training.seed = s[3];
    sampler.seed = seed;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("invalid config: " + m); };
    if (version != kConfigVersion) fail("unsupported version " + std::to_string(version));
    if (bands < 1) fail("bands must be positive");
    try {
      cnp.validate();
      wa.validate();
      for (auto k : {StageKind::cnp_small, StageKind::wa_frozen, StageKind::joint}) stage(k).validate();
      make_schedule(schedule);
      sampler.validate(schedule.steps);
    } catch (const std::invalid_argument& e) {
      fail(e.what());
    }
    if (cnp.in_channels != 2 * bands || cnp.out_channels != bands) fail("cnp channels must be 2*bands -> bands");
    if (wa.in_channels != 3 * bands || wa.out_channels != bands) fail("wa channels must be 3*bands -> bands");
    if (wa.head != OutputHead::sigmoid) fail("wa head must be sigmoid");
    if (reference.name != "identity" && reference.name != "residual_cnn") fail("unknown reference '" + reference.name + "'");
    if (reference.name == "residual_cnn" && reference.bands != bands) fail("reference bands differ from bands");
    for (auto k : {StageKind::cnp_small, StageKind::wa_frozen, StageKind::joint}) {
      const auto& s = stage(k);
      int div = std::max(cnp.required_divisor(), k == StageKind::cnp_small ? 1 : wa.required_divisor());
      if (s.image_size % div != 0)
        fail(to_string(k) + ".image_size " + std::to_string(s.image_size) + " not divisible by " + std::to_string(div));
      if (s.stage != k) fail("stage block mislabeled");
    }
    if (wa_frozen.image_size != joint.image_size) fail("wa_frozen and joint must share the full image size");
    if (data.dataset.empty() && data.image_size != joint.image_size)
      fail("data.image_size must equal the full training size " + std::to_string(joint.image_size));
    if (!(data.split_ratio > 0 && data.split_ratio < 1)) fail("data.split_ratio must lie in (0, 1)");
    if (data.synthetic_train < 1 || data.synthetic_test < 0) fail("synthetic counts must be positive");
    if (!(data.coverage >= 0 && data.coverage <= 1 && data.thickness >= 0 && data.thickness <= 1))
      fail("coverage and thickness must lie in [0, 1]");
  }
};

namespace config_detail {

template <class V>
toml::array to_array(const std::vector<V>& v) {
  toml::array a;
  for (const auto& x : v) a.push_back(x);
  return a;
}

inline toml::table spec_table(const UNetSpec& s) {
  return toml::table{{"base_channels", s.base_channels},
                     {"depth", s.depth},
                     {"channel_multipliers", to_array(s.channel_multipliers)},
                     {"attention_resolutions", to_array(s.attention_resolutions)},
                     {"heads", s.heads},
                     {"dropout", s.dropout},
                     {"in_channels", s.in_channels},
                     {"out_channels", s.out_channels},
                     {"norm_groups", s.norm_groups},
                     {"head", s.head == OutputHead::sigmoid ? "sigmoid" : "linear"},
                     {"zero_init_output", s.zero_init_output}};
}

inline toml::table stage_table(const StageConfig& s) {
  return toml::table{{"image_size", s.image_size},       {"batch_size", s.batch_size},
                     {"learning_rate", s.learning_rate}, {"iterations", s.iterations},
                     {"lambda", s.lambda},               {"clip_x0", s.clip_x0},
                     {"plateau_stop", s.plateau_stop},   {"plateau_window", s.plateau_window},
                     {"plateau_tolerance", s.plateau_tolerance}};
}

/// Typed lookup keeping the default when absent; wrong types are errors.
class Reader {
 public:
  Reader(const toml::table& t, std::string where) : t_(t), where_(std::move(where)) {}

  template <class V>
  void get(const char* key, V& out) const {
    const toml::node* n = t_.get(key);
    if (!n) return;
    if constexpr (std::is_same_v<V, bool>) {
      out = require(n->value<bool>(), key, "boolean");
    } else if constexpr (std::is_integral_v<V>) {
      out = static_cast<V>(require(n->value<std::int64_t>(), key, "integer"));
    } else if constexpr (std::is_floating_point_v<V>) {
      out = require(n->value<double>(), key, "number");
    } else if constexpr (std::is_same_v<V, std::string>) {
      out = require(n->value<std::string>(), key, "string");
    } else {
      const auto* arr = n->as_array();
      if (!arr) throw ConfigError(where_ + "." + key + " must be an array");
      out.clear();
      for (const auto& e : *arr) out.push_back(static_cast<int>(require(e.value<std::int64_t>(), key, "integer array")));
    }
  }

  Reader sub(const char* key) const {
    const toml::node* n = t_.get(key);
    if (!n) return Reader(empty(), where_ + "." + key);
    if (!n->is_table()) throw ConfigError(where_ + "." + key + " must be a table");
    return Reader(*n->as_table(), where_ + "." + key);
  }

  bool has(const char* key) const { return t_.contains(key); }

 private:
  template <class O>
  auto require(const O& opt, const char* key, const char* type) const {
    if (!opt) throw ConfigError(where_ + "." + key + " must be a " + type);
    return *opt;
  }
  static const toml::table& empty() {
    static const toml::table t;
    return t;
  }

  const toml::table& t_;
  std::string where_;
};

inline UNetSpec read_spec(const Reader& r, UNetSpec s, int bands, bool cnp) {
  std::string preset;
  r.get("preset", preset);
  if (preset == "full") s = cnp ? presets::cnp_full(bands) : presets::wa_full(bands);
  else if (preset == "tiny") s = cnp ? presets::cnp_tiny(bands) : presets::wa_tiny(bands);
  else if (!preset.empty()) throw ConfigError("unknown network preset '" + preset + "' (expected full or tiny)");
  else {
    s.in_channels = (cnp ? 2 : 3) * bands;
    s.out_channels = bands;
  }
  r.get("base_channels", s.base_channels);
  r.get("depth", s.depth);
  r.get("channel_multipliers", s.channel_multipliers);
  r.get("attention_resolutions", s.attention_resolutions);
  r.get("heads", s.heads);
  r.get("dropout", s.dropout);
  r.get("in_channels", s.in_channels);
  r.get("out_channels", s.out_channels);
  r.get("norm_groups", s.norm_groups);
  std::string head = s.head == OutputHead::sigmoid ? "sigmoid" : "linear";
  r.get("head", head);
  if (head != "sigmoid" && head != "linear") throw ConfigError("head must be sigmoid or linear");
  s.head = head == "sigmoid" ? OutputHead::sigmoid : OutputHead::linear;
  r.get("zero_init_output", s.zero_init_output);
  return s;
}

inline void read_stage(const Reader& r, StageConfig& s) {
  r.get("image_size", s.image_size);
  r.get("batch_size", s.batch_size);
  r.get("learning_rate", s.learning_rate);
  r.get("iterations", s.iterations);
  r.get("lambda", s.lambda);
  r.get("clip_x0", s.clip_x0);
  r.get("plateau_stop", s.plateau_stop);
  r.get("plateau_window", s.plateau_window);
  r.get("plateau_tolerance", s.plateau_tolerance);
}

}  // namespace config_detail

inline toml::table to_toml(const ExperimentConfig& c) {
  using namespace config_detail;
  toml::table sampler{{"mode", to_string(c.sampler.mode)},
                      {"ddim_steps", c.sampler.ddim_steps},
                      {"eta", c.sampler.eta},
                      {"fusion", c.sampler.fusion_enabled},
                      {"record_trajectory", c.sampler.record_trajectory},
                      {"clip_intermediate", c.sampler.clip_intermediate},
                      {"noise_coeff", to_string(c.sampler.noise_coeff)}};
  return toml::table{
      {"version", c.version},
      {"seed", static_cast<std::int64_t>(c.seed)},
      {"bands", c.bands},
      {"output_dir", c.output_dir},
      {"checkpoint_every", c.checkpoint_every},
      {"schedule",
       toml::table{{"steps", c.schedule.steps},
                   {"kind", c.schedule.kind},
                   {"beta_start", c.schedule.beta_start},
                   {"beta_end", c.schedule.beta_end}}},
      {"cnp", spec_table(c.cnp)},
      {"wa", spec_table(c.wa)},
      {"reference",
       toml::table{{"name", c.reference.name},
                   {"features", c.reference.features},
                   {"blocks", c.reference.blocks},
                   {"checkpoint", c.reference_checkpoint},
                   {"epochs", c.reference_training.epochs},
                   {"batch_size", c.reference_training.batch_size},
                   {"learning_rate", c.reference_training.learning_rate},
                   {"max_iterations", c.reference_training.max_iterations}}},
      {"stages",
       toml::table{{"cnp_small", stage_table(c.cnp_small)},
                   {"wa_frozen", stage_table(c.wa_frozen)},
                   {"joint", stage_table(c.joint)}}},
      {"sampler", sampler},
      {"data",
       toml::table{{"dataset", c.data.dataset},
                   {"split_ratio", c.data.split_ratio},
                   {"resolution", c.data.resolution},
                   {"synthetic_train", c.data.synthetic_train},
                   {"synthetic_test", c.data.synthetic_test},
                   {"image_size", c.data.image_size},
                   {"coverage", c.data.coverage},
                   {"thickness", c.data.thickness}}},
      {"metrics",
       toml::table{{"ssim_window", c.metrics.ssim_window},
                   {"ssim_k1", c.metrics.ssim_k1},
                   {"ssim_k2", c.metrics.ssim_k2},
                   {"perceptual_weights", c.metrics.perceptual_weights}}},
  };
}

inline std::string serialize_config(const ExperimentConfig& c) {
  std::ostringstream os;
  os << to_toml(c) << "\n";
  return os.str();
}

/// Missing keys keep their defaults. Seeds of sub-components derive from `seed`.
inline ExperimentConfig config_from_toml(const toml::table& t) {
  using namespace config_detail;
  ExperimentConfig c;
  Reader r(t, "config");
  r.get("version", c.version);
  if (c.version != kConfigVersion)
    throw ConfigError("unsupported config version " + std::to_string(c.version) + " (expected " +
                      std::to_string(kConfigVersion) + ")");
  r.get("seed", c.seed);
  r.get("bands", c.bands);
  r.get("output_dir", c.output_dir);
  r.get("checkpoint_every", c.checkpoint_every);
  auto sch = r.sub("schedule");
  sch.get("steps", c.schedule.steps);
  sch.get("kind", c.schedule.kind);
  sch.get("beta_start", c.schedule.beta_start);
  sch.get("beta_end", c.schedule.beta_end);
  c.cnp = read_spec(r.sub("cnp"), presets::cnp_tiny(c.bands), c.bands, true);
  c.wa = read_spec(r.sub("wa"), presets::wa_tiny(c.bands), c.bands, false);
  auto ref = r.sub("reference");
  ref.get("name", c.reference.name);
  ref.get("features", c.reference.features);
  ref.get("blocks", c.reference.blocks);
  ref.get("checkpoint", c.reference_checkpoint);
  ref.get("epochs", c.reference_training.epochs);
  ref.get("batch_size", c.reference_training.batch_size);
  ref.get("learning_rate", c.reference_training.learning_rate);
  ref.get("max_iterations", c.reference_training.max_iterations);
  c.reference.bands = c.bands;
  auto st = r.sub("stages");
  read_stage(st.sub("cnp_small"), c.cnp_small);
  read_stage(st.sub("wa_frozen"), c.wa_frozen);
  read_stage(st.sub("joint"), c.joint);
  auto sm = r.sub("sampler");
  std::string mode = to_string(c.sampler.mode), coeff = to_string(c.sampler.noise_coeff);
  sm.get("mode", mode);
  sm.get("ddim_steps", c.sampler.ddim_steps);
  sm.get("eta", c.sampler.eta);
  sm.get("fusion", c.sampler.fusion_enabled);
  sm.get("record_trajectory", c.sampler.record_trajectory);
  sm.get("clip_intermediate", c.sampler.clip_intermediate);
  sm.get("noise_coeff", coeff);
  try {
    c.sampler.mode = sampler_mode_from_string(mode);
    c.sampler.noise_coeff = noise_coeff_from_string(coeff);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  auto d = r.sub("data");
  d.get("dataset", c.data.dataset);
  d.get("split_ratio", c.data.split_ratio);
  d.get("resolution", c.data.resolution);
  d.get("synthetic_train", c.data.synthetic_train);
  d.get("synthetic_test", c.data.synthetic_test);
  d.get("image_size", c.data.image_size);
  d.get("coverage", c.data.coverage);
  d.get("thickness", c.data.thickness);
  auto m = r.sub("metrics");
  m.get("ssim_window", c.metrics.ssim_window);
  m.get("ssim_k1", c.metrics.ssim_k1);
  m.get("ssim_k2", c.metrics.ssim_k2);
  m.get("perceptual_weights", c.metrics.perceptual_weights);
  c.apply_seed();
  return c;
}

inline ExperimentConfig parse_config(std::string_view text, const std::string& source = "config") {
  try {
    return config_from_toml(toml::parse(text, source));
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << "cannot parse " << source << ": " << e.description() << " at line " << e.source().begin.line;
    throw ConfigError(os.str());
  }
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw ConfigError("config file '" + path.string() + "' not found");
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

}  // namespace decloud
