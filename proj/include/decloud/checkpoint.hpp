#pragma once

// Self-describing binary checkpoints:
//   8-byte magic "DECLOUD\1", u64 header length, JSON header, raw little-endian
//   parameter data in header order. The header carries every spec needed to
//   rebuild the networks, so loading needs nothing but the file.

#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "decloud/sampler.hpp"

namespace decloud {

using json = nlohmann::json;

inline constexpr char kCheckpointMagic[8] = {'D', 'E', 'C', 'L', 'O', 'U', 'D', '\1'};
inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline json to_json(const UNetSpec& s) {
  return {{"base_channels", s.base_channels},
          {"depth", s.depth},
          {"channel_multipliers", s.channel_multipliers},
          {"attention_resolutions", s.attention_resolutions},
          {"heads", s.heads},
          {"dropout", s.dropout},
          {"in_channels", s.in_channels},
          {"out_channels", s.out_channels},
          {"norm_groups", s.norm_groups},
          {"head", s.head == OutputHead::sigmoid ? "sigmoid" : "linear"},
          {"zero_init_output", s.zero_init_output}};
}

inline UNetSpec unet_spec_from_json(const json& j) {
  UNetSpec s;
  s.base_channels = j.at("base_channels");
  s.depth = j.at("depth");
  s.channel_multipliers = j.at("channel_multipliers").get<std::vector<int>>();
  s.attention_resolutions = j.at("attention_resolutions").get<std::vector<int>>();
  s.heads = j.at("heads");
  s.dropout = j.at("dropout");
  s.in_channels = j.at("in_channels");
  s.out_channels = j.at("out_channels");
  s.norm_groups = j.at("norm_groups");
  s.head = j.at("head") == "sigmoid" ? OutputHead::sigmoid : OutputHead::linear;
  s.zero_init_output = j.at("zero_init_output");
  return s;
}

inline json to_json(const ScheduleDescriptor& d) {
  return {{"steps", d.steps}, {"kind", d.kind}, {"beta_start", d.beta_start}, {"beta_end", d.beta_end}};
}

inline ScheduleDescriptor schedule_from_json(const json& j) {
  return {j.at("steps").get<int>(), j.at("kind").get<std::string>(), j.at("beta_start").get<double>(),
          j.at("beta_end").get<double>()};
}

inline json to_json(const ReferenceSpec& r) {
  return {{"name", r.name}, {"bands", r.bands}, {"features", r.features}, {"blocks", r.blocks}};
}

inline ReferenceSpec reference_spec_from_json(const json& j) {
  return {j.at("name").get<std::string>(), j.at("bands").get<int>(), j.at("features").get<int>(),
          j.at("blocks").get<int>()};
}

namespace detail {

template <class T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

template <class T>
void write_checkpoint(const std::filesystem::path& path, json header, const std::vector<nn::ParamList<T>>& groups,
                      const std::vector<std::string>& prefixes) {
  json tensors = json::array();
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (const auto& [name, v] : groups[g]) tensors.push_back({{"name", prefixes[g] + name}, {"shape", v.shape()}});
  header["format_version"] = kCheckpointVersion;
  header["dtype"] = dtype_name<T>();
  header["tensors"] = tensors;
  std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint '" + path.string() + "'");
    std::uint64_t len = text.size();
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& group : groups)
      for (const auto& [name, v] : group)
        out.write(reinterpret_cast<const char*>(v.value().data()), static_cast<std::streamsize>(v.value().size() * sizeof(T)));
    if (!out) throw CheckpointError("short write to '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

struct CheckpointFile {
  json header;
  std::ifstream body;
};

inline CheckpointFile open_checkpoint(const std::filesystem::path& path) {
  CheckpointFile f{json(), std::ifstream(path, std::ios::binary)};
  if (!f.body) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  char magic[8];
  std::uint64_t len = 0;
  f.body.read(magic, sizeof magic);
  f.body.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!f.body || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw CheckpointError("'" + path.string() + "' is not a checkpoint");
  if (len > (1u << 26)) throw CheckpointError("'" + path.string() + "': implausible header size");
  std::string text(len, '\0');
  f.body.read(text.data(), static_cast<std::streamsize>(len));
  try {
    f.header = json::parse(text);
  } catch (const json::exception& e) {
    throw CheckpointError("'" + path.string() + "': corrupt header: " + e.what());
  }
  if (f.header.value("format_version", 0) != kCheckpointVersion)
    throw CheckpointError("'" + path.string() + "': unsupported format version");
  return f;
}

/// Reads parameter data into the given groups, checking names and shapes.
template <class T>
void read_parameters(CheckpointFile& f, const std::vector<nn::ParamList<T>>& groups,
                     const std::vector<std::string>& prefixes, const std::string& what) {
  const auto& tensors = f.header.at("tensors");
  bool wide = f.header.at("dtype") == "f64";
  std::size_t k = 0;
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (auto [name, v] : groups[g]) {
      if (k >= tensors.size()) throw CheckpointError(what + ": missing tensor " + prefixes[g] + name);
      const auto& entry = tensors[k++];
      if (entry.at("name") != prefixes[g] + name || entry.at("shape").get<Shape>() != v.shape())
        throw CheckpointError(what + ": tensor " + std::to_string(k - 1) + " is " + entry.at("name").get<std::string>() +
                              ", expected " + prefixes[g] + name + " " + shape_str(v.shape()));
      auto& dst = v.mutable_value();
      if (wide) {
        std::vector<double> buf(dst.size());
        f.body.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(double)));
        for (std::size_t i = 0; i < buf.size(); ++i) dst[i] = static_cast<T>(buf[i]);
      } else {
        std::vector<float> buf(dst.size());
        f.body.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
        for (std::size_t i = 0; i < buf.size(); ++i) dst[i] = static_cast<T>(buf[i]);
      }
      if (!f.body) throw CheckpointError(what + ": truncated data");
    }
  if (k != tensors.size()) throw CheckpointError(what + ": unexpected extra tensors");
}

}  // namespace detail

template <class T>
void save_reference(const std::filesystem::path& path, const ReferenceModel<T>& model) {
  json header{{"kind", "reference"}, {"reference", to_json(describe_reference(model))}};
  detail::write_checkpoint<T>(path, header, {model.parameters()}, {""});
}

template <class T>
std::shared_ptr<ReferenceModel<T>> load_reference(const std::filesystem::path& path) {
  auto f = detail::open_checkpoint(path);
  if (f.header.at("kind") != "reference") throw CheckpointError("'" + path.string() + "' is not a reference checkpoint");
  std::mt19937_64 rng(0);
  auto model = build_reference<T>(reference_spec_from_json(f.header.at("reference")), rng);
  detail::read_parameters<T>(f, {model->parameters()}, {""}, path.string());
  return model;
}

/// Bundle checkpoints embed the reference parameters so they are self-contained.
template <class T>
void save_bundle(const std::filesystem::path& path, const DenoiserBundle<T>& b) {
  json header{{"kind", "bundle"},
              {"bands", b.bands},
              {"schedule", to_json(b.schedule.descriptor())},
              {"cnp", to_json(b.cnp.spec())},
              {"wa", to_json(b.wa.spec())},
              {"reference", to_json(describe_reference(*b.reference))},
              {"stages_completed", b.completed_stages}};
  detail::write_checkpoint<T>(path, header, {b.cnp.parameters(), b.wa.parameters(), b.reference->parameters()},
                              {"cnp.", "wa.", "reference."});
}

template <class T>
DenoiserBundle<T> load_bundle(const std::filesystem::path& path) {
  auto f = detail::open_checkpoint(path);
  const auto& h = f.header;
  if (h.at("kind") != "bundle") throw CheckpointError("'" + path.string() + "' is not a bundle checkpoint");
  try {
    std::mt19937_64 rng(0);
    auto desc = schedule_from_json(h.at("schedule"));
    auto ref = build_reference<T>(reference_spec_from_json(h.at("reference")), rng);
    int bands = h.at("bands");
    DenoiserBundle<T> b{bands,
                        UNet<T>(unet_spec_from_json(h.at("cnp")), rng),
                        UNet<T>(unet_spec_from_json(h.at("wa")), rng),
                        ref,
                        make_schedule(desc),
                        h.at("stages_completed").get<std::vector<std::string>>()};
    b.validate();
    detail::read_parameters<T>(f, {b.cnp.parameters(), b.wa.parameters(), b.reference->parameters()},
                               {"cnp.", "wa.", "reference."}, path.string());
    return b;
  } catch (const json::exception& e) {
    throw CheckpointError("'" + path.string() + "': malformed header: " + e.what());
  }
}

}  // namespace decloud
