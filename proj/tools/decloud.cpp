// decloud: train, sample, evaluate, analyze, resgap, plot, synth.
// Exit codes: 0 success, 1 user error, 2 internal error.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "decloud/experiment.hpp"
#include "decloud/plot.hpp"
#include "decloud/runtime.hpp"

using namespace decloud;
namespace fs = std::filesystem;
using Real = float;

namespace {

struct UserError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw UserError("cannot write '" + path.string() + "'");
  out << text;
}

std::vector<double> parse_list(const std::string& s, const char* what) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UserError(std::string("bad value '") + item + "' in " + what);
    }
  }
  if (out.empty()) throw UserError(std::string(what) + " is empty");
  return out;
}

bool parse_on_off(const std::string& v) {
  if (v == "on") return true;
  if (v == "off") return false;
  throw UserError("expected on or off, got '" + v + "'");
}

// ---- train ----

struct TrainArgs {
  std::string config, stage = "all", output;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
  auto cfg = load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  if (!a.output.empty()) cfg.output_dir = a.output;
  cfg.apply_seed();
  cfg.validate();
  const fs::path out = cfg.output_dir;
  fs::create_directories(out);
  write_text(out / "config.toml", serialize_config(cfg));
  auto log = stderr_log();

  std::vector<StageKind> stages;
  if (a.stage == "all") stages = {StageKind::cnp_small, StageKind::wa_frozen, StageKind::joint};
  else stages = {stage_from_string(a.stage)};

  auto ckpt = [&](StageKind k) { return out / (to_string(k) + ".ckpt"); };
  auto data = prepare_data<Real>(cfg);
  std::optional<DenoiserBundle<Real>> bundle;
  if (stages.front() == StageKind::cnp_small) {
    auto ref = prepare_reference<Real>(cfg, data.train, log);
    if (ref.model->trainable() && cfg.reference_checkpoint.empty()) {
      save_reference(out / "reference.ckpt", *ref.model);
      std::string csv = "iteration,l1\n";
      for (std::size_t i = 0; i < ref.losses.size(); ++i) csv += std::to_string(i + 1) + "," + std::to_string(ref.losses[i]) + "\n";
      write_text(out / "loss_reference.csv", csv);
    }
    bundle.emplace(init_bundle<Real>(cfg, ref.model));
  } else {
    auto prev = stages.front() == StageKind::wa_frozen ? StageKind::cnp_small : StageKind::wa_frozen;
    if (!fs::exists(ckpt(prev)))
      throw PrerequisiteError("stage " + to_string(stages.front()) + " needs the " + to_string(prev) +
                              " checkpoint '" + ckpt(prev).string() + "'; run that stage first");
    bundle.emplace(load_bundle<Real>(ckpt(prev)));
    if (bundle->bands != cfg.bands) throw UserError("checkpoint band count differs from config");
  }
  for (auto k : stages) {
    auto report = train_stage(cfg, k, *bundle, data.train, log, 100, [&](int it) {
      save_bundle(out / (to_string(k) + ".iter" + std::to_string(it) + ".ckpt"), *bundle);
    });
    save_bundle(ckpt(k), *bundle);
    write_text(out / ("loss_" + to_string(k) + ".csv"), report.csv());
    log("wrote " + ckpt(k).string() + (report.stopped_on_plateau ? " (stopped on plateau)" : ""));
  }
  return 0;
}

// ---- sample ----

struct SampleArgs {
  std::string checkpoint, input, output, mode = "ddim", fusion = "on", trajectory, snapshots, format = ".tif";
  int steps = 50;
  double eta = 0.3;
  std::uint64_t seed = 0;
};

int cmd_sample(const SampleArgs& a) {
  auto bundle = load_bundle<Real>(a.checkpoint);
  SamplerConfig sc;
  sc.mode = sampler_mode_from_string(a.mode);
  sc.ddim_steps = a.steps;
  sc.eta = a.eta;
  sc.fusion_enabled = parse_on_off(a.fusion);
  sc.seed = a.seed;
  sc.record_trajectory = true;
  if (!a.snapshots.empty())
    for (double t : parse_list(a.snapshots, "--snapshots")) sc.snapshot_steps.insert(static_cast<int>(t));
  sc.validate(bundle.schedule.steps());

  std::vector<std::pair<std::string, Tensor<Real>>> inputs;
  if (fs::is_directory(a.input)) {
    auto ds = io::load_dataset<Real>(a.input);
    for (auto& s : ds.samples) inputs.emplace_back(s.id, s.cloudy);
  } else {
    inputs.emplace_back(fs::path(a.input).stem().string(), io::read_image<Real>(a.input));
  }
  if (inputs.empty()) throw UserError("no input images in '" + a.input + "'");
  for (auto& [id, img] : inputs)
    if (img.dim(0) != bundle.bands)
      throw UserError("input '" + id + "' has " + std::to_string(img.dim(0)) + " bands, checkpoint expects " +
                      std::to_string(bundle.bands));

  json trajectories = json::array();
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& [id, img] = inputs[i];
    auto y = img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)});
    auto cfg = sc;
    cfg.seed = sc.seed + i;
    auto [out, traj] = sample(bundle, y, cfg);
    io::write_image(fs::path(a.output) / (id + a.format), batch_item(out, 0));
    if (!traj.snapshots.empty()) {
      std::vector<Tensor<Real>> frames;
      for (auto& [t, snap] : traj.snapshots) frames.push_back(batch_item(snap, 0));
      io::write_png(fs::path(a.output) / (id + "_x0_strip.png"), plot::image_strip(frames));
    }
    auto j = trajectory_json(traj);
    j["id"] = id;
    trajectories.push_back(j);
  }
  if (!a.trajectory.empty())
    write_text(a.trajectory, json{{"mode", a.mode}, {"eta", a.eta}, {"fusion", sc.fusion_enabled}, {"seed", a.seed},
                                  {"images", trajectories}}
                                 .dump(2) + "\n");
  return 0;
}

// ---- evaluate ----

struct EvalArgs {
  std::string checkpoint, config, dataset, output, fusion = "on", eta_sweep, mode = "ddim", split = "test",
                                                 perceptual_weights;
  double eta = 0.3;
  int steps = 50, batch = 40;
  std::uint64_t seed = 0;
};

int cmd_evaluate(const EvalArgs& a) {
  std::vector<PairedSample<Real>> test;
  if (!a.dataset.empty()) {
    auto ds = io::load_dataset<Real>(a.dataset);
    test = ds.has_splits() ? ds.subset(a.split) : ds.samples;
  } else if (!a.config.empty()) {
    auto cfg = load_config(a.config);
    cfg.apply_seed();
    cfg.validate();
    test = prepare_data<Real>(cfg).test;
  } else {
    throw UserError("evaluate needs --dataset or --config");
  }
  if (test.empty()) throw UserError("the test set is empty");
  auto bundle = load_bundle<Real>(a.checkpoint);
  for (const auto& s : test)
    if (s.bands() != bundle.bands)
      throw UserError("sample '" + s.id + "' has " + std::to_string(s.bands()) + " bands, checkpoint expects " +
                      std::to_string(bundle.bands));
  if (!a.perceptual_weights.empty())
    throw UserError("--perceptual-weights: no pretrained perceptual backend is bundled with this build");

  EvalOptions opt;
  opt.sampler.mode = sampler_mode_from_string(a.mode);
  opt.sampler.ddim_steps = a.steps;
  opt.sampler.eta = a.eta;
  opt.sampler.seed = a.seed;
  opt.batch_size = a.batch;
  std::vector<bool> fusion_modes;
  if (a.fusion == "both") fusion_modes = {true, false};
  else fusion_modes = {parse_on_off(a.fusion)};

  const fs::path out = a.output;
  std::vector<MetricReport> rows;
  std::string w_trend = "t,mean_w\n";
  for (std::size_t k = 0; k < fusion_modes.size(); ++k) {
    opt.sampler.fusion_enabled = fusion_modes[k];
    opt.include_baselines = k == 0;
    auto res = evaluate(bundle, test, opt);
    if (fusion_modes[k] && !res.trajectories.empty())
      for (const auto& s : res.trajectories.front().steps) w_trend += std::to_string(s.t) + "," + fmt_num(*s.mean_w, 6) + "\n";
    for (auto& r : res.reports) rows.push_back(std::move(r));
  }
  write_text(out / "metrics_per_image.csv", per_image_csv(rows));
  write_text(out / "summary.csv", summary_csv(rows));
  if (std::find(fusion_modes.begin(), fusion_modes.end(), true) != fusion_modes.end())
    write_text(out / "w_trend.csv", w_trend);
  json summary{{"checkpoint", a.checkpoint}, {"seed", a.seed}, {"steps", a.steps}, {"mode", a.mode}, {"rows", summary_json(rows)}};

  if (!a.eta_sweep.empty()) {
    auto etas = parse_list(a.eta_sweep, "--eta-sweep");
    for (double e : etas) check_eta(e);
    auto sweep = eta_sweep(bundle, test, opt, etas);
    std::string csv = "eta,psnr,ssim\n";
    for (std::size_t i = 0; i < etas.size(); ++i)
      csv += fmt_num(etas[i], 2) + "," + fmt_num(sweep[i].mean_psnr()) + "," + fmt_num(sweep[i].mean_ssim()) + "\n";
    write_text(out / "eta_sweep.csv", csv);
    summary["eta_sweep"] = summary_json(sweep);
  }
  write_text(out / "summary.json", summary.dump(2) + "\n");
  std::cout << summary_csv(rows);
  return 0;
}

// ---- analyze ----

struct AnalyzeArgs {
  std::string dataset, output;
  double threshold = 0.6;
  int bins = 10;
};

int cmd_analyze(const AnalyzeArgs& a) {
  if (a.bins < 1) throw UserError("--bins must be positive");
  if (!(a.threshold >= 0 && a.threshold <= 1)) throw UserError("--threshold must lie in [0, 1]");
  auto ds = io::load_dataset<Real>(a.dataset);
  if (ds.samples.empty()) throw UserError("dataset '" + a.dataset + "' is empty");
  std::vector<int> counts(a.bins, 0);
  std::string per_image = "id,ccp\n";
  std::vector<double> values;
  for (const auto& s : ds.samples) {
    double ccp = compute_ccp(threshold_cloud_mask(s.cloudy, a.threshold));
    values.push_back(ccp);
    per_image += s.id + "," + fmt_num(ccp) + "\n";
    counts[std::min(a.bins - 1, static_cast<int>(ccp * a.bins))]++;
  }
  std::string hist = "bin_low,bin_high,count,fraction\n";
  for (int b = 0; b < a.bins; ++b)
    hist += fmt_num(double(b) / a.bins, 3) + "," + fmt_num(double(b + 1) / a.bins, 3) + "," + std::to_string(counts[b]) +
            "," + fmt_num(double(counts[b]) / values.size()) + "\n";
  double mean = order_invariant_mean(values);
  fs::path out = a.output;
  write_text(out / "ccp_histogram.csv", hist);
  write_text(out / "ccp_per_image.csv", per_image);
  write_text(out / "ccp_summary.json",
             json{{"images", values.size()}, {"mean_ccp", mean}, {"threshold", a.threshold}, {"bins", counts}}.dump(2) + "\n");
  std::cout << "mean CCP " << fmt_num(mean) << " over " << values.size() << " images\n";
  return 0;
}

// ---- resgap ----

struct ResGapArgs {
  std::string config, output, train_res = "0.5,1.0", test_res = "0.5,1.0";
  int crop = 32, source_size = 0;
  std::optional<std::uint64_t> seed;
};

int cmd_resgap(const ResGapArgs& a) {
  auto cfg = load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  cfg.apply_seed();
  ResGapOptions opt;
  opt.train_resolutions = parse_list(a.train_res, "--train-res");
  opt.test_resolutions = parse_list(a.test_res, "--test-res");
  opt.crop = a.crop;
  opt.reference = cfg.reference;
  if (opt.reference.name != "residual_cnn") throw UserError("resgap trains the built-in residual_cnn reference");
  opt.training = cfg.reference_training;
  DataSplits<Real> data;
  if (cfg.data.dataset.empty()) {
    double coarsest = 0;
    for (double r : opt.train_resolutions) coarsest = std::max(coarsest, r);
    for (double r : opt.test_resolutions) coarsest = std::max(coarsest, r);
    int size = a.source_size ? a.source_size : static_cast<int>(std::ceil(a.crop * coarsest / cfg.data.resolution));
    cfg.data.image_size = size;
    cfg.data.dataset.clear();
    std::mt19937_64 rng(cfg.seed ^ 0x5eedda7aull);
    auto s1 = rng(), s2 = rng();
    data.train = synth_dataset<Real>(cfg.data.synthetic_train, cfg.bands, size, cfg.data.coverage, cfg.data.thickness, s1,
                                     cfg.data.resolution);
    data.test = synth_dataset<Real>(cfg.data.synthetic_test, cfg.bands, size, cfg.data.coverage, cfg.data.thickness, s2,
                                    cfg.data.resolution);
  } else {
    data = prepare_data<Real>(cfg);
  }
  if (data.test.empty()) throw UserError("the test set is empty");
  auto grid = resolution_gap(data.train, data.test, opt, stderr_log());
  write_text(a.output, resgap_csv(grid));
  std::cout << resgap_csv(grid);
  return 0;
}

// ---- plot ----

struct PlotArgs {
  std::string input, output, x, y;
  bool bars = false;
};

/// Reads named numeric columns from a CSV with a header row.
std::pair<std::vector<double>, std::vector<double>> csv_columns(const fs::path& path, std::string xcol, std::string ycol) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot read '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  std::vector<std::string> header;
  std::stringstream hs(line);
  for (std::string c; std::getline(hs, c, ',');) header.push_back(c);
  if (header.size() < 2) throw UserError("'" + path.string() + "' needs at least two columns");
  if (xcol.empty()) xcol = header[0];
  if (ycol.empty()) {
    for (std::size_t i = 1; i < header.size() && ycol.empty(); ++i)
      if (header[i] != "method" && header[i] != "id") ycol = header[i];
  }
  auto col = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw UserError("column '" + name + "' not in '" + path.string() + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  std::size_t xi = col(xcol), yi = col(ycol);
  std::vector<double> xs, ys;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    if (cells.size() <= std::max(xi, yi)) continue;
    try {
      xs.push_back(std::stod(cells[xi]));
      ys.push_back(std::stod(cells[yi]));
    } catch (const std::exception&) {
      xs.push_back(double(xs.size()));
      try {
        ys.push_back(std::stod(cells[yi]));
      } catch (const std::exception&) {
        xs.pop_back();
      }
    }
  }
  return {xs, ys};
}

int cmd_plot(const PlotArgs& a) {
  std::vector<plot::Series> series;
  if (io::lower_ext(a.input) == ".json") {
    std::ifstream in(a.input);
    if (!in) throw UserError("cannot read '" + a.input + "'");
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw UserError("'" + a.input + "': " + e.what());
    }
    if (!j.contains("images")) throw UserError("'" + a.input + "' is not a trajectory record");
    for (const auto& img : j.at("images")) {
      plot::Series s;
      for (const auto& st : img.at("steps"))
        if (!st.at("mean_w").is_null()) {
          s.x.push_back(-st.at("t").get<double>());  // left to right follows sampling order
          s.y.push_back(st.at("mean_w").get<double>());
        }
      series.push_back(std::move(s));
    }
  } else {
    auto [x, y] = csv_columns(a.input, a.x, a.y);
    series.push_back({std::move(x), std::move(y)});
  }
  io::write_png(a.output, plot::line_chart(series, 640, 400, a.bars));
  return 0;
}

// ---- synth ----

struct SynthArgs {
  std::string output, format = ".tif";
  int train = 200, test = 40, bands = 4, size = 32;
  double coverage = 0.5, thickness = 0.8, resolution = 0.5;
  std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a) {
  if (!(a.coverage >= 0 && a.coverage <= 1 && a.thickness >= 0 && a.thickness <= 1))
    throw UserError("coverage and thickness must lie in [0, 1]");
  std::mt19937_64 rng(a.seed);
  auto s1 = rng(), s2 = rng();
  io::Dataset<Real> ds;
  for (auto& s : synth_dataset<Real>(a.train, a.bands, a.size, a.coverage, a.thickness, s1, a.resolution)) {
    s.id = "train_" + s.id.substr(s.id.find('_') + 1);
    ds.samples.push_back(std::move(s));
    ds.splits.push_back("train");
  }
  for (auto& s : synth_dataset<Real>(a.test, a.bands, a.size, a.coverage, a.thickness, s2, a.resolution)) {
    s.id = "test_" + s.id.substr(s.id.find('_') + 1);
    ds.samples.push_back(std::move(s));
    ds.splits.push_back("test");
  }
  io::write_dataset(a.output, ds, a.format);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Reference-guided diffusion cloud removal"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "decloud 1.0");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Run training stages");
  train->add_option("--config", ta.config, "Experiment TOML")->required();
  train->add_option("--stage", ta.stage, "cnp_small | wa_frozen | joint | all")
      ->check(CLI::IsMember({"cnp_small", "wa_frozen", "joint", "all"}));
  train->add_option("--output", ta.output, "Output directory (overrides output_dir)");
  train->add_option("--seed", ta.seed, "Experiment seed (overrides config)");

  SampleArgs sa;
  auto* smp = app.add_subcommand("sample", "Remove clouds from images");
  smp->add_option("--checkpoint", sa.checkpoint)->required()->check(CLI::ExistingFile);
  smp->add_option("--input", sa.input, "Image file or dataset directory")->required()->check(CLI::ExistingPath);
  smp->add_option("--output", sa.output, "Output directory")->required();
  smp->add_option("--mode", sa.mode)->check(CLI::IsMember({"ddim", "ancestral"}));
  smp->add_option("--steps", sa.steps, "DDIM steps");
  smp->add_option("--eta", sa.eta, "Weight floor in [0, 1)");
  smp->add_option("--fusion", sa.fusion)->check(CLI::IsMember({"on", "off"}));
  smp->add_option("--seed", sa.seed);
  smp->add_option("--record-trajectory", sa.trajectory, "Trajectory JSON path");
  smp->add_option("--snapshots", sa.snapshots, "Comma-separated steps whose fused x0 estimate is saved");
  smp->add_option("--format", sa.format)->check(CLI::IsMember({".tif", ".png"}));

  EvalArgs ea;
  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on a test set");
  ev->add_option("--checkpoint", ea.checkpoint)->required()->check(CLI::ExistingFile);
  ev->add_option("--dataset", ea.dataset, "Dataset directory or manifest");
  ev->add_option("--config", ea.config, "Experiment TOML (synthetic test split)");
  ev->add_option("--split", ea.split, "Split label used when the manifest has splits");
  ev->add_option("--output", ea.output)->required();
  ev->add_option("--fusion", ea.fusion)->check(CLI::IsMember({"on", "off", "both"}));
  ev->add_option("--eta", ea.eta);
  ev->add_option("--eta-sweep", ea.eta_sweep, "Comma-separated eta values, e.g. 0.1,0.3,0.5,0.7,0.9");
  ev->add_option("--mode", ea.mode)->check(CLI::IsMember({"ddim", "ancestral"}));
  ev->add_option("--steps", ea.steps);
  ev->add_option("--batch", ea.batch)->check(CLI::PositiveNumber);
  ev->add_option("--seed", ea.seed);
  ev->add_option("--perceptual-weights", ea.perceptual_weights, "Pretrained perceptual backend weights");

  AnalyzeArgs aa;
  auto* an = app.add_subcommand("analyze", "Cloud-coverage statistics of a dataset");
  an->add_option("--dataset", aa.dataset)->required()->check(CLI::ExistingPath);
  an->add_option("--output", aa.output, "Output directory")->required();
  an->add_option("--threshold", aa.threshold, "Brightness threshold on [0, 1]");
  an->add_option("--bins", aa.bins);

  ResGapArgs ra;
  auto* rg = app.add_subcommand("resgap", "Resolution-gap grid with the built-in reference");
  rg->add_option("--config", ra.config)->required();
  rg->add_option("--output", ra.output, "CSV path")->required();
  rg->add_option("--train-res", ra.train_res, "Training resolutions in m/pixel");
  rg->add_option("--test-res", ra.test_res, "Test resolutions in m/pixel");
  rg->add_option("--crop", ra.crop)->check(CLI::PositiveNumber);
  rg->add_option("--source-size", ra.source_size, "Synthetic source size (default: fits the coarsest resolution)");
  rg->add_option("--seed", ra.seed);

  PlotArgs pa;
  auto* pl = app.add_subcommand("plot", "Render a CSV column or a trajectory JSON to PNG");
  pl->add_option("--input", pa.input)->required()->check(CLI::ExistingFile);
  pl->add_option("--output", pa.output, "PNG path")->required();
  pl->add_option("--x", pa.x, "CSV x column");
  pl->add_option("--y", pa.y, "CSV y column");
  pl->add_flag("--bars", pa.bars, "Bar chart");

  SynthArgs ya;
  auto* sy = app.add_subcommand("synth", "Write a synthetic paired dataset");
  sy->add_option("--output", ya.output)->required();
  sy->add_option("--train", ya.train)->check(CLI::NonNegativeNumber);
  sy->add_option("--test", ya.test)->check(CLI::NonNegativeNumber);
  sy->add_option("--bands", ya.bands)->check(CLI::PositiveNumber);
  sy->add_option("--size", ya.size)->check(CLI::Range(2, 4096));
  sy->add_option("--coverage", ya.coverage);
  sy->add_option("--thickness", ya.thickness);
  sy->add_option("--resolution", ya.resolution);
  sy->add_option("--seed", ya.seed);
  sy->add_option("--format", ya.format)->check(CLI::IsMember({".tif", ".png"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    select_device();
    if (*train) return cmd_train(ta);
    if (*smp) return cmd_sample(sa);
    if (*ev) return cmd_evaluate(ea);
    if (*an) return cmd_analyze(aa);
    if (*rg) return cmd_resgap(ra);
    if (*pl) return cmd_plot(pa);
    if (*sy) return cmd_synth(ya);
  } catch (const UserError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const io::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {  // includes prerequisite and shape errors
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
