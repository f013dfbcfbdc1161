#pragma once

// Experiment drivers shared by the command-line tool and the acceptance
// runner: detector persistence, cached (resumable) training runs, the
// lines-dataset ablation table and the in-plane rotation sweep.

#include <algorithm>
#include <array>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "strek/checkpoint.hpp"
#include "strek/config.hpp"
#include "strek/descriptor.hpp"
#include "strek/detector.hpp"
#include "strek/geometry.hpp"
#include "strek/metrics.hpp"
#include "strek/rl.hpp"

namespace strek {

// ---------------------------------------------------------------------------
// Detector persistence: checkpoint plus a key = value sidecar describing the
// architecture, so a checkpoint can be loaded without the training config.
// ---------------------------------------------------------------------------

inline void write_detector_config(std::ostream& os, const DetectorConfig& c) {
  os << "arch = " << (c.arch == DetectorArch::recnn ? "recnn" : "cnn") << "\n"
     << "fields = " << c.fields << "\n"
     << "cnn_channels = " << c.cnn_channels << "\n"
     << "cyclicity = " << c.cyclicity << "\n"
     << "max_frequency = " << c.max_frequency << "\n"
     << "regular_layers = " << c.regular_layers << "\n"
     << "kernel_size = " << c.kernel_size << "\n"
     << "leaky_slope = " << std::setprecision(17) << c.slope << "\n";
}

inline DetectorConfig read_detector_config(const std::string& path) {
  auto kv = KeyValueConfig::from_file(path);
  DetectorConfig c;
  const std::string arch = kv.get_string("arch", "recnn");
  if (arch != "recnn" && arch != "cnn") throw ConfigError(path + ": arch must be recnn or cnn");
  c.arch = arch == "recnn" ? DetectorArch::recnn : DetectorArch::cnn;
  c.fields = static_cast<std::size_t>(kv.get_int("fields", static_cast<long long>(c.fields)));
  c.cnn_channels = static_cast<std::size_t>(kv.get_int("cnn_channels", static_cast<long long>(c.cnn_channels)));
  c.cyclicity = static_cast<int>(kv.get_int("cyclicity", c.cyclicity));
  c.max_frequency = static_cast<int>(kv.get_int("max_frequency", c.max_frequency));
  c.regular_layers = static_cast<std::size_t>(kv.get_int("regular_layers", static_cast<long long>(c.regular_layers)));
  c.kernel_size = static_cast<std::size_t>(kv.get_int("kernel_size", static_cast<long long>(c.kernel_size)));
  c.slope = kv.get_double("leaky_slope", c.slope);
  kv.ensure_consumed();
  return c;
}

template <class T>
void save_detector(const std::string& path, const DetectorNet<T>& net) {
  save_checkpoint(path, net.params());
  std::ofstream os(path + ".cfg");
  if (!os) throw std::runtime_error("cannot write " + path + ".cfg");
  write_detector_config(os, net.config());
}

/// Loads a detector saved by save_detector (architecture from the sidecar).
template <class T>
std::unique_ptr<DetectorNet<T>> load_detector(const std::string& path) {
  if (!std::filesystem::exists(path + ".cfg")) throw std::runtime_error("missing architecture sidecar " + path + ".cfg");
  auto net = std::make_unique<DetectorNet<T>>(read_detector_config(path + ".cfg"), 0);
  load_checkpoint(path, net->params());
  return net;
}

template <class T>
void save_descriptor(const std::string& path, const DescriptorNet<T>& net) {
  save_checkpoint(path, net.params());
  std::ofstream os(path + ".cfg");
  if (!os) throw std::runtime_error("cannot write " + path + ".cfg");
  const auto& c = net.config();
  os << "widths = ";
  for (std::size_t i = 0; i < c.widths.size(); ++i) os << (i ? "," : "") << c.widths[i];
  os << "\ndim = " << c.dim << "\nkernel_size = " << c.kernel_size << "\n";
}

template <class T>
std::unique_ptr<DescriptorNet<T>> load_descriptor(const std::string& path) {
  if (!std::filesystem::exists(path + ".cfg")) throw std::runtime_error("missing architecture sidecar " + path + ".cfg");
  auto kv = KeyValueConfig::from_file(path + ".cfg");
  DescriptorConfig c;
  std::vector<long long> def(c.widths.begin(), c.widths.end());
  const auto w = kv.get_int_list("widths", def);
  c.widths.assign(w.begin(), w.end());
  c.dim = static_cast<std::size_t>(kv.get_int("dim", static_cast<long long>(c.dim)));
  c.kernel_size = static_cast<std::size_t>(kv.get_int("kernel_size", static_cast<long long>(c.kernel_size)));
  kv.ensure_consumed();
  auto net = std::make_unique<DescriptorNet<T>>(c, 0);
  load_checkpoint(path, net->params());
  return net;
}

/// Inference settings from `prefix`-qualified keys (e.g. "levels" or
/// "detect_levels").
inline DetectOptions detect_options_from(KeyValueConfig& kv, DetectOptions d, const std::string& prefix = "") {
  d.levels = static_cast<int>(kv.get_int(prefix + "levels", d.levels));
  d.scale_factor = kv.get_double(prefix + "scale_factor", d.scale_factor);
  d.nms_radius = static_cast<int>(kv.get_int(prefix + "nms_radius", d.nms_radius));
  d.max_keypoints = static_cast<std::size_t>(kv.get_int(prefix + "max_keypoints", static_cast<long long>(d.max_keypoints)));
  const std::string mode = kv.get_string(prefix + "select", d.mode == SelectMode::topk ? "topk" : "adaptive");
  if (mode != "topk" && mode != "adaptive") throw ConfigError(prefix + "select must be topk or adaptive, got '" + mode + "'");
  d.mode = mode == "topk" ? SelectMode::topk : SelectMode::adaptive;
  d.temperature = kv.get_double(prefix + "temperature", d.temperature);
  const std::string norm = kv.get_string(prefix + "norm", d.norm == HeatmapNorm::softmax ? "softmax" : "sigmoid_sum");
  if (norm != "softmax" && norm != "sigmoid_sum") throw ConfigError(prefix + "norm must be softmax or sigmoid_sum");
  d.norm = norm == "softmax" ? HeatmapNorm::softmax : HeatmapNorm::sigmoid_sum;
  d.avoidance_radius = static_cast<int>(kv.get_int(prefix + "avoidance_radius", d.avoidance_radius));
  d.stop_mass = kv.get_double(prefix + "stop_mass", d.stop_mass);
  if (d.levels < 1) throw ConfigError(prefix + "levels must be >= 1");
  if (d.levels > 1 && !(d.scale_factor > 0 && d.scale_factor < 1)) throw ConfigError(prefix + "scale_factor must be in (0,1)");
  if (d.nms_radius < 0 || d.avoidance_radius < 1) throw ConfigError(prefix + "nms_radius >= 0 and avoidance_radius >= 1 required");
  if (d.max_keypoints < 1) throw ConfigError(prefix + "max_keypoints must be >= 1");
  if (!(d.temperature > 0)) throw ConfigError(prefix + "temperature must be positive");
  if (!(d.stop_mass > 0 && d.stop_mass < 1)) throw ConfigError(prefix + "stop_mass must be in (0,1)");
  if (d.mode == SelectMode::adaptive && d.levels > 1) throw ConfigError(prefix + "adaptive selection is single-scale only");
  return d;
}

/// Single- or multi-scale detection depending on opt.levels.
template <class T>
KeypointSet detect_any(const DetectorNet<T>& net, const Image& image, const DetectOptions& opt) {
  return opt.levels > 1 ? detect_multiscale(net, image, opt) : detect(net, image, opt);
}

// ---------------------------------------------------------------------------
// Detector evaluation on held-out pairs
// ---------------------------------------------------------------------------

inline constexpr std::array<double, 3> kRepThresholds{1.0, 2.0, 3.0};

struct DetectorEvaluation {
  std::array<double, 3> rep_max{kNaN, kNaN, kNaN};  // at 1, 2, 3 px
  std::array<double, 3> rep_sym{kNaN, kNaN, kNaN};
  double mean_keypoints = 0;
};

template <class T>
DetectorEvaluation evaluate_detector(const DetectorNet<T>& net, const std::vector<ImagePair>& pairs, const DetectOptions& opt) {
  const auto detected = detect_pairs(net, pairs, opt);
  DetectorEvaluation e;
  for (std::size_t i = 0; i < kRepThresholds.size(); ++i) {
    const auto s = summarize_repeatability(detected, kRepThresholds[i]);
    e.rep_max[i] = s.rep_max;
    e.rep_sym[i] = s.rep_sym;
    e.mean_keypoints = s.mean_keypoints;
  }
  return e;
}

// ---------------------------------------------------------------------------
// Cached training runs
// ---------------------------------------------------------------------------

/// Wall-clock seconds spent reaching given iteration counts, persisted next to
/// the run so interrupted runs keep an honest total.
struct RunTiming {
  std::vector<std::pair<std::size_t, double>> marks;  // (iterations done, seconds)

  double at(std::size_t iters) const {
    for (const auto& [i, s] : marks)
      if (i == iters) return s;
    return kNaN;
  }
  static RunTiming read(const std::string& path) {
    RunTiming t;
    std::ifstream is(path);
    std::size_t i = 0;
    double s = 0;
    while (is >> i >> s) t.marks.emplace_back(i, s);
    return t;
  }
  void write(const std::string& path) const {
    std::ofstream os(path);
    os << std::setprecision(12);
    for (const auto& [i, s] : marks) os << i << " " << s << "\n";
  }
};

struct CachedRun {
  std::string name;
  std::string dir;

  std::string checkpoint() const { return (std::filesystem::path(dir) / (name + ".strk")).string(); }
  std::string snapshot(std::size_t iters) const {
    return (std::filesystem::path(dir) / (name + "@" + std::to_string(iters) + ".strk")).string();
  }
  std::string state() const { return (std::filesystem::path(dir) / (name + ".strs")).string(); }
  std::string log() const { return state() + ".log"; }
  std::string timing() const { return (std::filesystem::path(dir) / (name + ".time")).string(); }
  bool complete() const { return std::filesystem::exists(checkpoint()); }
};

/// Trains (or resumes, or reuses) a detector run whose artifacts live in
/// `dir`. Snapshots at the requested iteration counts are saved as separate
/// checkpoints. Returns the run handle; the final weights are in
/// run.checkpoint().
inline CachedRun train_detector_cached(const std::string& name, const DetectorTrainConfig& cfg, const std::string& dir,
                                       const std::vector<std::size_t>& snapshots, std::ostream* progress) {
  std::filesystem::create_directories(dir);
  CachedRun run{name, dir};
  if (run.complete()) return run;
  RunTiming timing = RunTiming::read(run.timing());
  // Training resumes from the last state save; marks are written at the same
  // cadence, so the last mark is the time already spent.
  const double base_seconds = timing.marks.empty() ? 0.0 : timing.marks.back().second;
  DetectorNet<float> net(cfg.net, cfg.seed);
  TrainHooks hooks;
  hooks.state_path = run.state();
  hooks.state_every = 100;
  hooks.abort_checkpoint = (std::filesystem::path(dir) / (name + "_abort.strk")).string();
  hooks.progress = progress;
  hooks.progress_every = 50;
  for (std::size_t i = hooks.state_every; i <= cfg.iterations; i += hooks.state_every) hooks.snapshot_at.push_back(i);
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return base_seconds + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  hooks.on_snapshot = [&](std::size_t done, const ParameterSet<float>& params) {
    if (std::find(snapshots.begin(), snapshots.end(), done) != snapshots.end()) {
      save_checkpoint(run.snapshot(done), params);
      std::ofstream os(run.snapshot(done) + ".cfg");
      write_detector_config(os, cfg.net);
    }
    timing.marks.emplace_back(done, elapsed());
    timing.write(run.timing());
  };
  train_detector(net, cfg, synthetic_pair_source(cfg.data, cfg.seed), hooks);
  if (timing.marks.empty() || timing.marks.back().first != cfg.iterations) {
    timing.marks.emplace_back(cfg.iterations, elapsed());
    timing.write(run.timing());
  }
  save_detector(run.checkpoint(), net);
  return run;
}

/// Descriptor counterpart of train_detector_cached, trained at the keypoints
/// of a frozen detector.
template <class D>
CachedRun train_descriptor_cached(const std::string& name, const DescriptorTrainConfig& cfg, const DetectorNet<D>& detector,
                                  const DetectOptions& det, const std::string& dir, std::ostream* progress) {
  std::filesystem::create_directories(dir);
  CachedRun run{name, dir};
  if (run.complete()) return run;
  RunTiming timing = RunTiming::read(run.timing());
  const double base_seconds = timing.marks.empty() ? 0.0 : timing.marks.back().second;
  DescriptorNet<float> net(cfg.net, cfg.seed);
  DescriptorTrainHooks hooks;
  hooks.state_path = run.state();
  hooks.state_every = 250;
  hooks.abort_checkpoint = (std::filesystem::path(dir) / (name + "_abort.strk")).string();
  hooks.progress = progress;
  hooks.progress_every = 100;
  const auto t0 = std::chrono::steady_clock::now();
  train_descriptor(net, cfg, detector, det, hooks);
  timing.marks.emplace_back(cfg.iterations,
                            base_seconds + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  timing.write(run.timing());
  save_descriptor(run.checkpoint(), net);
  return run;
}

// ---------------------------------------------------------------------------
// Ablation table
// ---------------------------------------------------------------------------

struct AblationVariant {
  std::string name;          // cache key
  std::string architecture;  // table column
  std::string training;      // table column
  DetectorTrainConfig cfg;
};

/// Desk-scale defaults for the lines-dataset experiments.
inline DetectorTrainConfig lines_experiment_config() {
  DetectorTrainConfig c;
  c.net.fields = 5;
  c.reward.max_samples = 100;
  c.reward.temperature = 1.0;
  c.iterations = 5000;
  c.data.height = c.data.width = 128;
  c.val_every = 100;
  c.val_pairs = 16;
  c.seed = 1;
  return c;
}

/// Rows of the comparison table: sequential sampling with several sample
/// budgets, the peaky + similarity baseline at several windows, and plain
/// CNN controls, all sharing one seed and iteration budget.
inline std::vector<AblationVariant> table_variants(const DetectorTrainConfig& base, bool include_cnn_equivalent) {
  std::vector<AblationVariant> v;
  for (std::size_t n : {50u, 100u, 200u}) {
    auto c = base;
    c.loss = DetectorLoss::sequential;
    c.reward.max_samples = n;
    v.push_back({"recnn_seq" + std::to_string(n), "ReCNN", "Sequential n. samples " + std::to_string(n), c});
  }
  for (std::size_t w : {32u, 64u, 96u}) {
    auto c = base;
    c.loss = DetectorLoss::peaky;
    c.peaky_window = w;
    v.push_back({"recnn_peaky" + std::to_string(w), "ReCNN", "Peaky + Similarity W " + std::to_string(w), c});
  }
  {
    auto c = base;
    c.net = cnn_same_channels(base.net);
    v.push_back({"cnn_same_seq100", "CNN same channels", "Sequential n. samples 100", c});
  }
  if (include_cnn_equivalent) {
    auto c = base;
    c.net = cnn_equivalent(base.net);
    v.push_back({"cnn_equiv_seq100", "CNN equivalent", "Sequential n. samples 100", c});
  }
  return v;
}

struct AblationRow {
  std::string architecture, training;
  DetectorEvaluation eval;
  std::size_t parameters = 0;
};

inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "architecture,training,n_kpts,rep_max_1px,rep_max_2px,rep_max_3px,rep_sym_1px,rep_sym_2px,rep_sym_3px,parameters\n";
  os << std::setprecision(6);
  for (const auto& r : rows) {
    os << r.architecture << "," << r.training << "," << r.eval.mean_keypoints;
    for (double v : r.eval.rep_max) os << "," << v;
    for (double v : r.eval.rep_sym) os << "," << v;
    os << "," << r.parameters << "\n";
  }
}

// ---------------------------------------------------------------------------
// Rotation sweep
// ---------------------------------------------------------------------------

struct RotationSweepConfig {
  std::size_t images = 10;
  std::size_t crop = 224;
  std::size_t base_size = 320;  // large enough that every rotated crop is fully covered
  std::size_t keypoints = 50;
  double threshold = 3.0;
  double noise_sigma = 0.01;
  std::size_t smoothing = 15;  // degrees, circular moving average
  int nms_radius = 3;
  // Same line density as the 256x256 base images behind 128x128 training views.
  LinesParams lines{.min_lines = 31, .max_lines = 62};
  std::uint64_t seed = 0;

  void validate() const {
    if (images == 0 || keypoints == 0) throw std::invalid_argument("rotation sweep: images and keypoints must be positive");
    if (static_cast<double>(base_size) < std::sqrt(2.0) * static_cast<double>(crop))
      throw std::invalid_argument("rotation sweep: base_size must be at least sqrt(2) * crop");
  }
};

struct RotationSweepResult {
  std::vector<double> angles;       // 0..359
  std::vector<double> mean_rep;     // mean over images, per angle
  std::vector<double> smoothed;     // circular moving average of mean_rep
  std::vector<std::vector<double>> per_image;

  double band() const {
    const auto [lo, hi] = std::minmax_element(smoothed.begin(), smoothed.end());
    return *hi - *lo;
  }
  double mean() const {
    double s = 0;
    for (double v : smoothed) s += v;
    return smoothed.empty() ? kNaN : s / static_cast<double>(smoothed.size());
  }
};

/// Synthetic base images for the sweep, one per (seed, index).
inline std::vector<Image> sweep_base_images(const RotationSweepConfig& cfg) {
  cfg.validate();
  std::vector<Image> out;
  for (std::size_t i = 0; i < cfg.images; ++i) {
    Rng rng = make_rng(cfg.seed, {0x5eeb, i});
    out.push_back(gen_lines_image(rng, cfg.base_size, cfg.base_size, cfg.lines));
  }
  return out;
}

/// For each base image and each integer angle, rotates about the centre,
/// crops the central window, adds light noise, detects a fixed budget of
/// keypoints and measures symmetric repeatability against the 0-degree crop.
template <class T>
RotationSweepResult rotation_sweep(const DetectorNet<T>& net, const std::vector<Image>& bases, const RotationSweepConfig& cfg,
                                   const DetectOptions& base_opt, std::ostream* progress = nullptr) {
  if (bases.empty()) throw std::invalid_argument("rotation sweep: no images");
  const double min_side = std::sqrt(2.0) * static_cast<double>(cfg.crop);
  for (const auto& b : bases)
    if (static_cast<double>(std::min(b.height, b.width)) < min_side)
      throw std::invalid_argument("rotation sweep: images must be at least " + std::to_string(std::lround(std::ceil(min_side))) +
                                  " px on each side for a " + std::to_string(cfg.crop) + " px crop");
  DetectOptions opt = base_opt;
  opt.mode = SelectMode::topk;
  opt.levels = 1;
  opt.max_keypoints = cfg.keypoints;
  opt.nms_radius = cfg.nms_radius;
  RotationSweepResult res;
  for (int a = 0; a < 360; ++a) res.angles.push_back(a);
  res.mean_rep.assign(360, 0.0);
  for (std::size_t i = 0; i < bases.size(); ++i) {
    auto view = [&](int angle) {
      auto rc = rotate_and_center_crop(bases[i], angle, cfg.crop, cfg.crop);
      Rng noise = make_rng(cfg.seed, {0x5eeb, i, static_cast<std::uint64_t>(angle)});
      add_gaussian_noise(rc.image, cfg.noise_sigma, noise);
      return rc;
    };
    const auto ref = view(0);
    const KeypointSet ref_kps = detect(net, ref.image, opt);
    std::vector<double> reps(360);
    for (int a = 0; a < 360; ++a) {
      const auto v = a == 0 ? ref : view(a);
      EvalPair e;
      e.a = ref_kps;
      e.b = a == 0 ? ref_kps : detect(net, v.image, opt);
      e.a_to_b = v.original_to_crop * ref.original_to_crop.inverse();
      e.height_a = e.height_b = cfg.crop;
      e.width_a = e.width_b = cfg.crop;
      const double r = repeatability(e, cfg.threshold).symmetric;
      reps[static_cast<std::size_t>(a)] = std::isnan(r) ? 0.0 : r;
      res.mean_rep[static_cast<std::size_t>(a)] += reps[static_cast<std::size_t>(a)] / static_cast<double>(bases.size());
    }
    res.per_image.push_back(std::move(reps));
    if (progress) *progress << "rotation sweep: image " << i + 1 << "/" << bases.size() << " done" << std::endl;
  }
  res.smoothed = moving_average(res.mean_rep, cfg.smoothing, true);
  return res;
}

template <class T>
RotationSweepResult rotation_sweep(const DetectorNet<T>& net, const RotationSweepConfig& cfg, const DetectOptions& base_opt,
                                   std::ostream* progress = nullptr) {
  return rotation_sweep(net, sweep_base_images(cfg), cfg, base_opt, progress);
}

inline void write_rotation_sweep_csv(std::ostream& os, const RotationSweepResult& r) {
  os << "angle,repeatability,smoothed";
  for (std::size_t i = 0; i < r.per_image.size(); ++i) os << ",image" << i;
  os << "\n" << std::setprecision(6);
  for (std::size_t a = 0; a < r.angles.size(); ++a) {
    os << r.angles[a] << "," << r.mean_rep[a] << "," << r.smoothed[a];
    for (const auto& img : r.per_image) os << "," << img[a];
    os << "\n";
  }
}

}  // namespace strek
