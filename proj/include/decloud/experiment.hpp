#pragma once

// End-to-end building blocks shared by the command-line tool and the acceptance
// suite: data preparation, reference preparation, the staged training pipeline,
// evaluation, the eta sweep and the resolution-gap grid.

#include <chrono>
#include <iostream>

#include "decloud/checkpoint.hpp"
#include "decloud/config.hpp"
#include "decloud/io.hpp"
#include "decloud/metrics.hpp"

namespace decloud {

template <class T>
struct DataSplits {
  std::vector<PairedSample<T>> train, test;
};

/// Synthetic sets draw train and test from independent seeds; on-disk datasets use
/// their manifest split labels when present, otherwise a seeded ratio split.
template <class T>
DataSplits<T> prepare_data(const ExperimentConfig& cfg) {
  const auto& d = cfg.data;
  if (d.dataset.empty()) {
    std::mt19937_64 rng(cfg.seed ^ 0x5eedda7aull);
    auto train_seed = rng(), test_seed = rng();
    auto train = synth_dataset<T>(d.synthetic_train, cfg.bands, d.image_size, d.coverage, d.thickness, train_seed, d.resolution);
    auto test = synth_dataset<T>(d.synthetic_test, cfg.bands, d.image_size, d.coverage, d.thickness, test_seed, d.resolution);
    for (auto& s : test) s.id = "test_" + s.id.substr(s.id.find('_') + 1);
    return {std::move(train), std::move(test)};
  }
  auto ds = io::load_dataset<T>(d.dataset, d.resolution);
  if (ds.samples.empty()) throw io::IoError("dataset '" + d.dataset + "' is empty");
  if (ds.bands() != cfg.bands)
    throw std::invalid_argument("dataset has " + std::to_string(ds.bands()) + " bands, config expects " +
                                std::to_string(cfg.bands));
  if (ds.has_splits()) return {ds.subset("train"), ds.subset("test")};
  auto [train, test] = split_dataset(ds.samples, d.split_ratio, cfg.seed);
  return {std::move(train), std::move(test)};
}

using LogFn = std::function<void(const std::string&)>;

inline LogFn stderr_log() {
  return [](const std::string& m) { std::cerr << m << std::endl; };
}

template <class T>
struct ReferencePrep {
  std::shared_ptr<ReferenceModel<T>> model;
  std::vector<double> losses;  // empty unless trained here
};

/// Loads the configured reference checkpoint, builds the identity baseline, or
/// trains the built-in residual CNN on the training pairs.
template <class T>
ReferencePrep<T> prepare_reference(const ExperimentConfig& cfg, const std::vector<PairedSample<T>>& train,
                                   const LogFn& log = {}) {
  if (!cfg.reference_checkpoint.empty()) {
    auto m = load_reference<T>(cfg.reference_checkpoint);
    if (m->bands() && m->bands() != cfg.bands)
      throw std::invalid_argument("reference checkpoint expects " + std::to_string(m->bands()) + " bands");
    return {m, {}};
  }
  std::mt19937_64 rng(cfg.reference_training.seed);
  auto m = build_reference<T>(cfg.reference, rng);
  if (!m->trainable()) return {m, {}};
  if (log) log("training reference '" + m->name() + "'");
  auto losses = train_reference(*m, train, cfg.reference_training);
  if (log && !losses.empty())
    log("reference: " + std::to_string(losses.size()) + " iterations, final L1 " + std::to_string(losses.back()));
  return {m, std::move(losses)};
}

template <class T>
DenoiserBundle<T> init_bundle(const ExperimentConfig& cfg, std::shared_ptr<ReferenceModel<T>> ref) {
  std::mt19937_64 rng(cfg.seed ^ 0xb0d1e5ull);
  return make_bundle<T>(cfg.bands, cfg.cnp, cfg.wa, std::move(ref), cfg.schedule, rng);
}

/// Runs one stage with progress logging every `log_every` iterations.
template <class T>
LossReport train_stage(const ExperimentConfig& cfg, StageKind kind, DenoiserBundle<T>& bundle,
                       const std::vector<PairedSample<T>>& train, const LogFn& log = {}, int log_every = 100,
                       std::function<void(int)> on_checkpoint = {}) {
  StageCallbacks cb;
  auto start = std::chrono::steady_clock::now();
  double acc = 0;
  int count = 0;
  cb.on_iteration = [&](int it, double loss) {
    acc += loss;
    ++count;
    if (log && log_every > 0 && it % log_every == 0) {
      double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      log(to_string(kind) + " it " + std::to_string(it) + " loss " + std::to_string(acc / count) + " (" +
          std::to_string(secs) + " s)");
      acc = 0;
      count = 0;
    }
  };
  cb.checkpoint_every = cfg.checkpoint_every;
  cb.on_checkpoint = std::move(on_checkpoint);
  return run_stage(cfg.stage(kind), bundle, train, cb);
}

/// Stacks samples [begin, end) into batches.
template <class T>
std::pair<Tensor<T>, Tensor<T>> batch_range(const std::vector<PairedSample<T>>& data, std::size_t begin,
                                            std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return make_batch(data, idx);
}

template <class T>
Tensor<T> batch_item(const Tensor<T>& batch, int i) {
  return batch.slice_batch(i, i + 1).reshaped({batch.c(), batch.h(), batch.w()});
}

struct EvalOptions {
  SamplerConfig sampler;
  int batch_size = 40;
  bool include_baselines = true;  // cloudy input and reference-only rows
  std::string label;              // DE row label; derived from sampler settings when empty
  const PerceptualBackend* perceptual = nullptr;
  SsimOptions ssim;
};

template <class T>
struct EvalResult {
  std::vector<MetricReport> reports;
  std::vector<TrajectoryRecord<T>> trajectories;  // one per batch
  std::vector<Tensor<T>> outputs;                 // DE outputs, (C, H, W) each
};

inline std::string default_label(const SamplerConfig& s) {
  if (!s.fusion_enabled) return "DE(fusion=off)";
  char buf[64];
  std::snprintf(buf, sizeof buf, "DE(eta=%.2f)", s.eta);
  return buf;
}

/// Scores the DE sampler (and optionally the cloudy input and the reference alone)
/// on the test pairs. The sampling seed is offset per batch.
template <class T>
EvalResult<T> evaluate(const DenoiserBundle<T>& bundle, const std::vector<PairedSample<T>>& test, const EvalOptions& opt) {
  if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
  for (const auto& s : test)
    if (s.bands() != bundle.bands)
      throw std::invalid_argument("evaluate: sample '" + s.id + "' has " + std::to_string(s.bands()) +
                                  " bands, checkpoint expects " + std::to_string(bundle.bands));
  opt.sampler.validate(bundle.schedule.steps());
  auto peak_report = [&](std::string method) {
    MetricReport r;
    r.method = std::move(method);
    r.peak = 1.0;
    r.lpips_status = opt.perceptual ? opt.perceptual->name() : "unavailable";
    return r;
  };
  MetricReport cloudy = peak_report("cloudy"), ref = peak_report("reference"),
               de = peak_report(opt.label.empty() ? default_label(opt.sampler) : opt.label);
  EvalResult<T> result;
  auto score = [&](const std::string& id, const Tensor<T>& p, const Tensor<T>& t) {
    auto pu = to_unit_range(p), tu = to_unit_range(t);
    ImageMetrics m{id, psnr(pu, tu, 1.0), ssim(pu, tu, opt.ssim), std::nullopt};
    if (opt.perceptual) m.lpips = perceptual_distance(p, t, opt.perceptual).value;
    return m;
  };
  const std::size_t bs = std::max(1, opt.batch_size);
  for (std::size_t b = 0; b < test.size(); b += bs) {
    std::size_t e = std::min(test.size(), b + bs);
    auto [y, x0] = batch_range(test, b, e);
    auto cfg = opt.sampler;
    cfg.seed = opt.sampler.seed + b;
    auto [out, traj] = sample(bundle, y, cfg);
    Tensor<T> x0_ref = opt.include_baselines ? predict_reference(*bundle.reference, y, bundle.bands) : Tensor<T>();
    for (std::size_t i = b; i < e; ++i) {
      int k = static_cast<int>(i - b);
      auto target = batch_item(x0, k);
      auto pred = batch_item(out, k);
      de.images.push_back(score(test[i].id, pred, target));
      if (opt.include_baselines) {
        cloudy.images.push_back(score(test[i].id, test[i].cloudy, target));
        ref.images.push_back(score(test[i].id, batch_item(x0_ref, k), target));
      }
      result.outputs.push_back(std::move(pred));
    }
    result.trajectories.push_back(std::move(traj));
  }
  if (opt.include_baselines) {
    result.reports.push_back(std::move(cloudy));
    result.reports.push_back(std::move(ref));
  }
  result.reports.push_back(std::move(de));
  return result;
}

inline const std::vector<double>& default_eta_sweep() {
  static const std::vector<double> v{0.1, 0.3, 0.5, 0.7, 0.9};
  return v;
}

/// One DE report per eta value.
template <class T>
std::vector<MetricReport> eta_sweep(const DenoiserBundle<T>& bundle, const std::vector<PairedSample<T>>& test,
                                    EvalOptions opt, const std::vector<double>& etas) {
  std::vector<MetricReport> rows;
  opt.include_baselines = false;
  opt.sampler.fusion_enabled = true;
  for (double eta : etas) {
    opt.sampler.eta = eta;
    opt.label.clear();
    rows.push_back(evaluate(bundle, test, opt).reports.back());
  }
  return rows;
}

/// Mean of W at the first and last executed sampling steps, averaged over batches.
template <class T>
std::pair<double, double> w_trend_endpoints(const std::vector<TrajectoryRecord<T>>& trajs) {
  double first = 0, last = 0;
  int n = 0;
  for (const auto& t : trajs) {
    if (t.steps.empty() || !t.steps.front().mean_w || !t.steps.back().mean_w) continue;
    first += *t.steps.front().mean_w;
    last += *t.steps.back().mean_w;
    ++n;
  }
  if (!n) throw std::invalid_argument("w_trend_endpoints: no fused trajectory recorded");
  return {first / n, last / n};
}

// ---- resolution-gap experiment ----

struct ResGapOptions {
  std::vector<double> train_resolutions;  // meters per pixel
  std::vector<double> test_resolutions;
  int crop = 32;
  ReferenceSpec reference;
  ReferenceTrainConfig training;
};

struct ResGapCell {
  double train_resolution, test_resolution;
  double psnr, ssim;
};

/// Resamples every sample to `res` and cuts it into all non-overlapping
/// crop x crop tiles, so finer resolutions yield more patches per scene.
/// Ratio of target to source resolution must be >= 1 and map the image to an
/// integral size.
template <class T>
std::vector<PairedSample<T>> at_resolution(const std::vector<PairedSample<T>>& data, double res, int crop) {
  std::vector<PairedSample<T>> out;
  for (const auto& s : data) {
    if (res < s.resolution * (1 - 1e-9))
      throw std::invalid_argument("unsupported resolution ratio: " + std::to_string(res) + " m is finer than the " +
                                  std::to_string(s.resolution) + " m source");
    double scaled = s.height() * s.resolution / res;
    if (std::abs(scaled - std::round(scaled)) > 1e-6)
      throw std::invalid_argument("unsupported resolution ratio: " + std::to_string(s.resolution) + " -> " +
                                  std::to_string(res) + " m gives a fractional image size");
    int nh = static_cast<int>(std::lround(scaled));
    int nw = static_cast<int>(std::lround(s.width() * s.resolution / res));
    if (crop > nh || crop > nw)
      throw std::invalid_argument("crop " + std::to_string(crop) + " exceeds the " + std::to_string(nh) + "x" +
                                  std::to_string(nw) + " image at " + std::to_string(res) + " m");
    auto cloudy = resize_bilinear(s.cloudy, nh, nw), clear = resize_bilinear(s.clear, nh, nw);
    int n = nh / crop, m = nw / crop;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) {
        PairedSample<T> tile;
        tile.id = n * m > 1 ? s.id + "_" + std::to_string(i) + "_" + std::to_string(j) : s.id;
        tile.resolution = res;
        tile.cloudy = decloud::crop(cloudy, i * crop, j * crop, crop);
        tile.clear = decloud::crop(clear, i * crop, j * crop, crop);
        out.push_back(std::move(tile));
      }
  }
  return out;
}

/// Trains the built-in reference at each training resolution and scores it at each
/// test resolution. Rows are ordered train-major.
template <class T>
std::vector<ResGapCell> resolution_gap(const std::vector<PairedSample<T>>& train, const std::vector<PairedSample<T>>& test,
                                       const ResGapOptions& opt, const LogFn& log = {}) {
  if (opt.train_resolutions.empty() || opt.test_resolutions.empty())
    throw std::invalid_argument("resolution_gap: need at least one train and one test resolution");
  std::vector<std::vector<PairedSample<T>>> test_sets;
  for (double r : opt.test_resolutions) test_sets.push_back(at_resolution(test, r, opt.crop));
  std::vector<ResGapCell> grid;
  for (double tr : opt.train_resolutions) {
    auto tr_set = at_resolution(train, tr, opt.crop);
    std::mt19937_64 rng(opt.training.seed);
    auto model = build_reference<T>(opt.reference, rng);
    if (model->trainable()) train_reference(*model, tr_set, opt.training);
    if (log) log("resgap: trained at " + std::to_string(tr) + " m");
    for (std::size_t k = 0; k < opt.test_resolutions.size(); ++k) {
      MetricReport rep;
      const auto& ts = test_sets[k];
      auto [y, x0] = batch_range(ts, 0, ts.size());
      auto pred = predict_reference(*model, y, y.c());
      for (std::size_t i = 0; i < ts.size(); ++i) {
        auto p = to_unit_range(batch_item(pred, i)), t = to_unit_range(batch_item(x0, i));
        rep.images.push_back({ts[i].id, psnr(p, t, 1.0), ssim(p, t), std::nullopt});
      }
      grid.push_back({tr, opt.test_resolutions[k], rep.mean_psnr(), rep.mean_ssim()});
    }
  }
  return grid;
}

// ---- report emission ----

inline std::string fmt_num(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

inline std::string summary_csv(const std::vector<MetricReport>& reports) {
  bool lpips = !reports.empty() && std::all_of(reports.begin(), reports.end(), [](const auto& r) { return r.has_lpips(); });
  std::string s = lpips ? "method,psnr,ssim,lpips,images\n" : "method,psnr,ssim,images\n";
  for (const auto& r : reports) {
    s += r.method + "," + fmt_num(r.mean_psnr()) + "," + fmt_num(r.mean_ssim());
    if (lpips) s += "," + fmt_num(*r.mean_lpips());
    s += "," + std::to_string(r.images.size()) + "\n";
  }
  return s;
}

inline std::string per_image_csv(const std::vector<MetricReport>& reports) {
  bool lpips = !reports.empty() && std::all_of(reports.begin(), reports.end(), [](const auto& r) { return r.has_lpips(); });
  std::string s = lpips ? "method,id,psnr,ssim,lpips\n" : "method,id,psnr,ssim\n";
  for (const auto& r : reports)
    for (const auto& m : r.images) {
      s += r.method + "," + m.id + "," + fmt_num(m.psnr) + "," + fmt_num(m.ssim);
      if (lpips) s += "," + fmt_num(*m.lpips);
      s += "\n";
    }
  return s;
}

inline json summary_json(const std::vector<MetricReport>& reports) {
  json rows = json::array();
  for (const auto& r : reports) {
    json row{{"method", r.method}, {"psnr", r.mean_psnr()}, {"ssim", r.mean_ssim()}, {"images", r.images.size()},
             {"peak", r.peak}};
    if (auto l = r.mean_lpips()) row["lpips"] = *l;
    else row["lpips"] = "unavailable";
    rows.push_back(row);
  }
  return rows;
}

template <class T>
json trajectory_json(const TrajectoryRecord<T>& t) {
  json steps = json::array();
  for (const auto& s : t.steps) {
    json j{{"t", s.t}, {"t_prev", s.t_prev}, {"seconds", s.seconds}};
    j["mean_w"] = s.mean_w ? json(*s.mean_w) : json(nullptr);
    steps.push_back(j);
  }
  json snaps = json::array();
  for (const auto& [t, img] : t.snapshots) snaps.push_back(t);
  return {{"steps", steps}, {"snapshot_steps", snaps}};
}

inline std::string resgap_csv(const std::vector<ResGapCell>& grid) {
  std::string s = "train_resolution,test_resolution,psnr,ssim\n";
  for (const auto& c : grid)
    s += fmt_num(c.train_resolution, 3) + "," + fmt_num(c.test_resolution, 3) + "," + fmt_num(c.psnr) + "," +
         fmt_num(c.ssim) + "\n";
  return s;
}

}  // namespace decloud
