#pragma once

// Raster and dataset I/O. Stored integers map to [-1, 1] through the fixed range of
// their dtype (8-bit: 0..255, 16-bit: 0..65535); float TIFFs are taken as [0, 1].

#include <png.h>
#include <tiffio.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

#include "decloud/data.hpp"

namespace decloud::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string lower_ext(const fs::path& p) {
  auto e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e;
}

inline bool is_image_file(const fs::path& p) {
  auto e = lower_ext(p);
  return e == ".png" || e == ".tif" || e == ".tiff";
}

template <class T>
T from_storage(double v, double max) {
  return static_cast<T>(v / max * 2.0 - 1.0);
}

template <class T>
double to_storage(T v, double max) {
  return std::round(std::clamp((double(v) + 1.0) / 2.0, 0.0, 1.0) * max);
}

template <class T>
Tensor<T> read_png(const fs::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw IoError("cannot read PNG '" + path.string() + "': " + img.message);
  int bands = (img.format & PNG_FORMAT_FLAG_COLOR) ? 3 : 1;
  if (img.format & PNG_FORMAT_FLAG_ALPHA) ++bands;
  img.format = bands == 1 ? PNG_FORMAT_GRAY : bands == 2 ? PNG_FORMAT_GA : bands == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_RGBA;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw IoError("cannot decode PNG '" + path.string() + "': " + msg);
  }
  const int h = img.height, w = img.width;
  Tensor<T> out({bands, h, w});
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (std::size_t p = 0; p < hw; ++p)
    for (int b = 0; b < bands; ++b) out[b * hw + p] = from_storage<T>(buf[p * bands + b], 255.0);
  return out;
}

/// 8-bit PNG with 1 (gray), 3 (RGB) or 4 (RGBA) bands.
template <class T>
void write_png(const fs::path& path, const Tensor<T>& image) {
  if (image.rank() != 3) throw ShapeError("write_png: expected (bands, height, width)");
  const int bands = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (bands != 1 && bands != 3 && bands != 4)
    throw IoError("write_png: " + std::to_string(bands) + " bands cannot be stored as PNG (use .tif)");
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = w;
  img.height = h;
  img.format = bands == 1 ? PNG_FORMAT_GRAY : bands == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_RGBA;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<png_byte> buf(hw * bands);
  for (std::size_t p = 0; p < hw; ++p)
    for (int b = 0; b < bands; ++b) buf[p * bands + b] = static_cast<png_byte>(to_storage(image[b * hw + p], 255.0));
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr))
    throw IoError("cannot write PNG '" + path.string() + "': " + img.message);
}

namespace detail {
struct TiffCloser {
  void operator()(TIFF* t) const { TIFFClose(t); }
};
using TiffPtr = std::unique_ptr<TIFF, TiffCloser>;

inline void quiet_tiff() {
  static bool once = [] {
    TIFFSetWarningHandler(nullptr);
    TIFFSetErrorHandler(nullptr);
    return true;
  }();
  (void)once;
}
}  // namespace detail

/// Multi-band TIFF (GeoTIFF tags are ignored): 8/16-bit unsigned or 32-bit float,
/// contiguous or separate planes.
template <class T>
Tensor<T> read_tiff(const fs::path& path) {
  detail::quiet_tiff();
  detail::TiffPtr tif(TIFFOpen(path.c_str(), "r"));
  if (!tif) throw IoError("cannot open TIFF '" + path.string() + "'");
  uint32_t w = 0, h = 0;
  uint16_t spp = 1, bps = 8, fmt = SAMPLEFORMAT_UINT, planar = PLANARCONFIG_CONTIG;
  TIFFGetField(tif.get(), TIFFTAG_IMAGEWIDTH, &w);
  TIFFGetField(tif.get(), TIFFTAG_IMAGELENGTH, &h);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_SAMPLESPERPIXEL, &spp);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_BITSPERSAMPLE, &bps);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_SAMPLEFORMAT, &fmt);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_PLANARCONFIG, &planar);
  if (TIFFIsTiled(tif.get())) throw IoError("'" + path.string() + "': tiled TIFFs are not supported");
  bool ok = (fmt == SAMPLEFORMAT_UINT && (bps == 8 || bps == 16)) || (fmt == SAMPLEFORMAT_IEEEFP && bps == 32);
  if (!ok || w == 0 || h == 0 || spp == 0)
    throw IoError("'" + path.string() + "': unsupported TIFF layout (" + std::to_string(bps) + "-bit, format " +
                  std::to_string(fmt) + ")");
  const int bands = spp;
  Tensor<T> out({bands, static_cast<int>(h), static_cast<int>(w)});
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<unsigned char> line(TIFFScanlineSize(tif.get()));
  auto sample = [&](std::size_t i) -> T {
    if (bps == 8) return from_storage<T>(line[i], 255.0);
    if (bps == 16) {
      uint16_t v;
      std::memcpy(&v, line.data() + 2 * i, 2);
      return from_storage<T>(v, 65535.0);
    }
    float v;
    std::memcpy(&v, line.data() + 4 * i, 4);
    return static_cast<T>(double(v) * 2.0 - 1.0);
  };
  if (planar == PLANARCONFIG_CONTIG) {
    for (uint32_t y = 0; y < h; ++y) {
      if (TIFFReadScanline(tif.get(), line.data(), y, 0) < 0) throw IoError("'" + path.string() + "': read error");
      for (uint32_t x = 0; x < w; ++x)
        for (int b = 0; b < bands; ++b) out[b * hw + y * w + x] = sample(static_cast<std::size_t>(x) * bands + b);
    }
  } else {
    for (int b = 0; b < bands; ++b)
      for (uint32_t y = 0; y < h; ++y) {
        if (TIFFReadScanline(tif.get(), line.data(), y, static_cast<uint16_t>(b)) < 0)
          throw IoError("'" + path.string() + "': read error");
        for (uint32_t x = 0; x < w; ++x) out[b * hw + y * w + x] = sample(x);
      }
  }
  return out;
}

/// 16-bit unsigned, band-interleaved TIFF.
template <class T>
void write_tiff(const fs::path& path, const Tensor<T>& image) {
  if (image.rank() != 3) throw ShapeError("write_tiff: expected (bands, height, width)");
  detail::quiet_tiff();
  const int bands = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  detail::TiffPtr tif(TIFFOpen(path.c_str(), "w"));
  if (!tif) throw IoError("cannot create TIFF '" + path.string() + "'");
  TIFFSetField(tif.get(), TIFFTAG_IMAGEWIDTH, static_cast<uint32_t>(w));
  TIFFSetField(tif.get(), TIFFTAG_IMAGELENGTH, static_cast<uint32_t>(h));
  TIFFSetField(tif.get(), TIFFTAG_SAMPLESPERPIXEL, static_cast<uint16_t>(bands));
  TIFFSetField(tif.get(), TIFFTAG_BITSPERSAMPLE, static_cast<uint16_t>(16));
  TIFFSetField(tif.get(), TIFFTAG_SAMPLEFORMAT, SAMPLEFORMAT_UINT);
  TIFFSetField(tif.get(), TIFFTAG_PLANARCONFIG, PLANARCONFIG_CONTIG);
  TIFFSetField(tif.get(), TIFFTAG_PHOTOMETRIC, bands >= 3 ? PHOTOMETRIC_RGB : PHOTOMETRIC_MINISBLACK);
  if (bands > 3) {
    std::vector<uint16_t> extra(bands - 3, EXTRASAMPLE_UNSPECIFIED);
    TIFFSetField(tif.get(), TIFFTAG_EXTRASAMPLES, static_cast<uint16_t>(extra.size()), extra.data());
  } else if (bands == 2) {
    uint16_t extra = EXTRASAMPLE_UNSPECIFIED;
    TIFFSetField(tif.get(), TIFFTAG_EXTRASAMPLES, 1, &extra);
  }
  TIFFSetField(tif.get(), TIFFTAG_ROWSPERSTRIP, static_cast<uint32_t>(h));
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<uint16_t> line(static_cast<std::size_t>(w) * bands);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int b = 0; b < bands; ++b)
        line[static_cast<std::size_t>(x) * bands + b] =
            static_cast<uint16_t>(to_storage(image[b * hw + static_cast<std::size_t>(y) * w + x], 65535.0));
    if (TIFFWriteScanline(tif.get(), line.data(), y, 0) < 0) throw IoError("'" + path.string() + "': write error");
  }
}

template <class T>
Tensor<T> read_image(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("image '" + path.string() + "' does not exist");
  auto e = lower_ext(path);
  if (e == ".png") return read_png<T>(path);
  if (e == ".tif" || e == ".tiff") return read_tiff<T>(path);
  throw IoError("'" + path.string() + "': unsupported image format (expected .png, .tif or .tiff)");
}

template <class T>
void write_image(const fs::path& path, const Tensor<T>& image) {
  auto e = lower_ext(path);
  if (e == ".png") return write_png(path, image);
  if (e == ".tif" || e == ".tiff") return write_tiff(path, image);
  throw IoError("'" + path.string() + "': unsupported image format (expected .png, .tif or .tiff)");
}

/// Paired samples with optional split labels ("train", "test" or empty).
template <class T>
struct Dataset {
  std::vector<PairedSample<T>> samples;
  std::vector<std::string> splits;

  bool has_splits() const {
    return !splits.empty() && std::none_of(splits.begin(), splits.end(), [](const auto& s) { return s.empty(); });
  }

  std::vector<PairedSample<T>> subset(const std::string& split) const {
    std::vector<PairedSample<T>> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (splits[i] == split) out.push_back(samples[i]);
    return out;
  }

  int bands() const { return samples.empty() ? 0 : samples.front().bands(); }
};

template <class T>
PairedSample<T> load_pair(const fs::path& cloudy, const fs::path& clear, std::string id, double resolution) {
  PairedSample<T> s{read_image<T>(cloudy), read_image<T>(clear), std::move(id), resolution};
  try {
    validate_sample(s);
  } catch (const std::exception& e) {
    throw IoError("pair '" + s.id + "': " + e.what());
  }
  return s;
}

/// Accepts a manifest JSON file, a directory holding manifest.json, or a directory
/// with `cloud/` and `label/` subfolders whose files pair up by name.
template <class T>
Dataset<T> load_dataset(const fs::path& path, double default_resolution = 0.5) {
  if (!fs::exists(path)) throw IoError("dataset '" + path.string() + "' does not exist");
  fs::path manifest = fs::is_directory(path) ? path / "manifest.json" : path;
  Dataset<T> ds;
  if (fs::is_regular_file(manifest)) {
    json j;
    try {
      std::ifstream in(manifest);
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw IoError("manifest '" + manifest.string() + "': " + e.what());
    }
    fs::path root = manifest.parent_path();
    double res = j.value("resolution", default_resolution);
    for (const auto& e : j.at("samples")) {
      ds.samples.push_back(load_pair<T>(root / e.at("cloudy").get<std::string>(), root / e.at("clear").get<std::string>(),
                                        e.at("id").get<std::string>(), e.value("resolution", res)));
      ds.splits.push_back(e.value("split", std::string()));
    }
  } else {
    fs::path cloud = path / "cloud", label = path / "label";
    if (!fs::is_directory(cloud) || !fs::is_directory(label))
      throw IoError("dataset '" + path.string() + "' has neither manifest.json nor cloud/ and label/ subfolders");
    std::map<std::string, fs::path> clear;
    for (const auto& e : fs::directory_iterator(label))
      if (is_image_file(e.path())) clear[e.path().filename().string()] = e.path();
    std::vector<fs::path> cloudy;
    for (const auto& e : fs::directory_iterator(cloud))
      if (is_image_file(e.path())) cloudy.push_back(e.path());
    std::sort(cloudy.begin(), cloudy.end());
    for (const auto& c : cloudy) {
      auto it = clear.find(c.filename().string());
      if (it == clear.end()) throw IoError("'" + c.string() + "' has no matching file in label/");
      ds.samples.push_back(load_pair<T>(c, it->second, c.stem().string(), default_resolution));
      ds.splits.emplace_back();
    }
  }
  if (!ds.samples.empty()) {
    int bands = ds.bands();
    for (const auto& s : ds.samples)
      if (s.bands() != bands) throw IoError("dataset '" + path.string() + "': inconsistent band counts");
  }
  return ds;
}

/// Writes `cloud/`, `label/` and manifest.json. Multi-band data goes to 16-bit TIFF.
template <class T>
void write_dataset(const fs::path& dir, const Dataset<T>& ds, const std::string& ext = ".tif") {
  fs::create_directories(dir / "cloud");
  fs::create_directories(dir / "label");
  json samples = json::array();
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    std::string file = s.id + ext;
    write_image(dir / "cloud" / file, s.cloudy);
    write_image(dir / "label" / file, s.clear);
    json e{{"id", s.id}, {"cloudy", "cloud/" + file}, {"clear", "label/" + file}, {"resolution", s.resolution}};
    if (i < ds.splits.size() && !ds.splits[i].empty()) e["split"] = ds.splits[i];
    samples.push_back(e);
  }
  json j{{"version", 1}, {"samples", samples}};
  std::ofstream(dir / "manifest.json") << j.dump(2) << "\n";
}

}  // namespace decloud::io
