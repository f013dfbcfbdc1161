// strek: dataset generation, training, inference and evaluation.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <CLI11.hpp>

#include <Eigen/Core>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "strek/experiments.hpp"

using namespace strek;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config;
  std::optional<long long> seed;
  std::string out = ".";
  int threads = 1;
};

KeyValueConfig load_config(const Globals& g) {
  KeyValueConfig kv = g.config.empty() ? KeyValueConfig::from_string("") : KeyValueConfig::from_file(g.config);
  if (g.seed) kv.set("seed", std::to_string(*g.seed));
  return kv;
}

std::string require_path(KeyValueConfig& kv, const std::string& key) {
  const std::string v = kv.get_string(key, "");
  if (v.empty()) throw ConfigError("config key '" + key + "' is required");
  return v;
}

void require_file(const std::string& path) {
  if (!fs::exists(path)) throw std::runtime_error("no such file: " + path);
}

fs::path make_out(const Globals& g) {
  fs::create_directories(g.out);
  return fs::path(g.out);
}

std::string stem(const std::string& path) { return fs::path(path).stem().string(); }

void write_homography(std::ostream& os, const Homography& h) {
  os << std::setprecision(17);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) os << ',' << h.matrix()(r, c);
}

// --------------------------------------------------------------------------

struct DatasetPair {
  std::string id, image_a, image_b;
  Homography a_to_b;
};

std::vector<DatasetPair> read_manifest(const std::string& dir) {
  const auto path = fs::path(dir) / "manifest.csv";
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(is, line);
  if (line.rfind("id,image_a,image_b,h00", 0) != 0) throw FormatError(path.string() + ": unexpected header");
  std::vector<DatasetPair> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::vector<std::string> f;
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    if (f.size() != 12) throw FormatError(path.string() + ": expected 12 fields, got " + std::to_string(f.size()));
    Eigen::Matrix3d m;
    for (int k = 0; k < 9; ++k) m(k / 3, k % 3) = std::stod(f[3 + static_cast<std::size_t>(k)]);
    out.push_back({f[0], (fs::path(dir) / f[1]).string(), (fs::path(dir) / f[2]).string(), Homography(m)});
  }
  return out;
}

int cmd_gen_dataset(const Globals& g) {
  auto kv = load_config(g);
  const auto count = kv.get_int("count", 100);
  const auto size = kv.get_int("image_size", 128);
  PairParams p;
  p.noise_sigma = kv.get_double("noise_sigma", p.noise_sigma);
  p.extra_rotation_deg = kv.get_double("extra_rotation_deg", p.extra_rotation_deg);
  p.bounds.max_rotation_deg = kv.get_double("max_rotation_deg", p.bounds.max_rotation_deg);
  const auto seed = static_cast<std::uint64_t>(kv.get_int("seed", 0));
  kv.ensure_consumed();
  if (count < 1) throw ConfigError("count must be >= 1");
  if (size < 16) throw ConfigError("image_size must be >= 16");
  p.height = p.width = static_cast<std::size_t>(size);

  const auto out = make_out(g);
  std::ofstream manifest(out / "manifest.csv");
  if (!manifest) throw std::runtime_error("cannot write " + (out / "manifest.csv").string());
  manifest << "id,image_a,image_b,h00,h01,h02,h10,h11,h12,h20,h21,h22\n";
  for (long long i = 0; i < count; ++i) {
    Rng rng = make_rng(seed, {0xda7a5e7, static_cast<std::uint64_t>(i)});
    const ImagePair pair = gen_pair(rng, p);
    std::ostringstream id;
    id << "pair_" << std::setw(5) << std::setfill('0') << i;
    const std::string a = id.str() + "_a.pgm", b = id.str() + "_b.pgm";
    write_pgm((out / a).string(), pair.image_a);
    write_pgm((out / b).string(), pair.image_b);
    manifest << id.str() << ',' << a << ',' << b;
    write_homography(manifest, pair.a_to_b);
    manifest << '\n';
  }
  std::cout << "wrote " << count << " pairs to " << out.string() << "\n";
  return 0;
}

int cmd_train_detector(const Globals& g) {
  auto kv = load_config(g);
  DetectorTrainConfig cfg;
  cfg.apply(kv);
  const bool resume = kv.get_bool("resume", true);
  kv.ensure_consumed();

  const auto out = make_out(g);
  DetectorNet<float> net(cfg.net, cfg.seed);
  TrainHooks hooks;
  if (resume) hooks.state_path = (out / "detector.strs").string();
  hooks.abort_checkpoint = (out / "detector_abort.strk").string();
  hooks.progress = &std::cout;
  std::cout << "detector parameters " << net.parameter_count() << "\n";
  const auto result = train_detector(net, cfg, synthetic_pair_source(cfg.data, cfg.seed), hooks);
  save_detector((out / "detector.strk").string(), net);
  std::ofstream log(out / "detector_log.csv");
  write_train_log(log, result.log);
  return 0;
}

int cmd_train_descriptor(const Globals& g) {
  auto kv = load_config(g);
  const std::string det_path = require_path(kv, "detector");
  DescriptorTrainConfig cfg;
  cfg.apply(kv);
  DetectOptions d;
  d.mode = SelectMode::adaptive;
  d.max_keypoints = 100;
  d.temperature = 1.0;
  const DetectOptions det = detect_options_from(kv, d, "detect_");
  const bool resume = kv.get_bool("resume", true);
  kv.ensure_consumed();
  require_file(det_path);

  const auto out = make_out(g);
  const auto detector = load_detector<float>(det_path);
  DescriptorNet<float> net(cfg.net, cfg.seed);
  DescriptorTrainHooks hooks;
  if (resume) hooks.state_path = (out / "descriptor.strs").string();
  hooks.abort_checkpoint = (out / "descriptor_abort.strk").string();
  hooks.progress = &std::cout;
  const auto result = train_descriptor(net, cfg, *detector, det, hooks);
  save_descriptor((out / "descriptor.strk").string(), net);
  std::ofstream log(out / "descriptor_log.csv");
  write_descriptor_log(log, result.log);
  return 0;
}

int cmd_detect(const Globals& g, const std::vector<std::string>& images) {
  auto kv = load_config(g);
  const std::string det_path = require_path(kv, "detector");
  const DetectOptions opt = detect_options_from(kv, DetectOptions{});
  kv.ensure_consumed();
  if (images.empty()) throw UsageError("detect: no images given");
  require_file(det_path);
  for (const auto& p : images) require_file(p);

  const auto out = make_out(g);
  const auto net = load_detector<float>(det_path);
  for (const auto& p : images) {
    const auto kps = detect_any(*net, read_pgm(p), opt);
    write_keypoints_csv((out / (stem(p) + ".kpts.csv")).string(), kps);
    std::cout << p << ": " << kps.size() << " keypoints\n";
  }
  return 0;
}

int cmd_extract(const Globals& g, const std::vector<std::string>& images) {
  auto kv = load_config(g);
  const std::string det_path = require_path(kv, "detector");
  const std::string desc_path = require_path(kv, "descriptor");
  const DetectOptions opt = detect_options_from(kv, DetectOptions{});
  const std::string format = kv.get_string("format", "csv");
  kv.ensure_consumed();
  if (format != "csv" && format != "binary") throw ConfigError("format must be csv or binary");
  if (images.empty()) throw UsageError("extract: no images given");
  require_file(det_path);
  require_file(desc_path);
  for (const auto& p : images) require_file(p);

  const auto out = make_out(g);
  const auto det = load_detector<float>(det_path);
  const auto desc = load_descriptor<float>(desc_path);
  for (const auto& p : images) {
    const Image img = read_pgm(p);
    FeatureSet f;
    f.keypoints = detect_any(*det, img, opt);
    f.descriptors = extract_padded(*desc, img).gather(f.keypoints);
    write_features((out / (stem(p) + (format == "csv" ? ".feat.csv" : ".strd"))).string(), f);
    std::cout << p << ": " << f.keypoints.size() << " features\n";
  }
  return 0;
}

std::string feature_file(const std::string& dir, const std::string& image) {
  for (const char* ext : {".feat.csv", ".strd", ".kpts.csv"}) {
    const auto p = fs::path(dir) / (stem(image) + ext);
    if (fs::exists(p)) return p.string();
  }
  throw std::runtime_error("no features for " + image + " in " + dir);
}

int cmd_eval(const Globals& g, const std::string& dataset, const std::string& features) {
  auto kv = load_config(g);
  const double min_score = kv.get_double("min_match_score", -std::numeric_limits<double>::infinity());
  const double auc_threshold = kv.get_double("auc_threshold", 10.0);
  kv.ensure_consumed();
  if (dataset.empty() || features.empty()) throw UsageError("eval: --dataset and --features are required");
  if (!(auc_threshold > 0)) throw ConfigError("auc_threshold must be positive");
  const auto pairs = read_manifest(dataset);
  if (pairs.empty()) throw std::runtime_error("eval: empty dataset");

  std::vector<MetricReport> reports;
  std::vector<double> corner_errors;
  for (const auto& p : pairs) {
    const Image a = read_pgm(p.image_a), b = read_pgm(p.image_b);
    EvalPair e;
    e.a_to_b = p.a_to_b;
    e.height_a = a.height;
    e.width_a = a.width;
    e.height_b = b.height;
    e.width_b = b.width;
    bool with_matches = true;
    for (int side = 0; side < 2; ++side) {
      const std::string file = feature_file(features, side == 0 ? p.image_a : p.image_b);
      if (file.ends_with(".kpts.csv")) {
        (side == 0 ? e.a : e.b) = read_keypoints_csv(file);
        with_matches = false;
      } else {
        const auto f = read_features(file);
        (side == 0 ? e.a : e.b) = f.keypoints;
        (side == 0 ? e.desc_a : e.desc_b) = f.descriptors;
      }
    }
    reports.push_back(evaluate_pair(e, p.id, with_matches, min_score));
    corner_errors.push_back(reports.back().corner_error);
  }
  const auto out = make_out(g);
  std::ofstream os(out / "report.csv");
  write_report_csv(os, reports);
  const auto agg = aggregate_reports(reports);
  std::cout << std::setprecision(4) << "pairs " << reports.size() << ", repeatability@3px " << agg.rep[2];
  if (std::isfinite(agg.corner_error)) std::cout << ", homography AUC@" << auc_threshold << "px " << homography_auc(corner_errors, auc_threshold);
  std::cout << "\n";
  return 0;
}

int cmd_rotation_sweep(const Globals& g, const std::vector<std::string>& images) {
  auto kv = load_config(g);
  const std::string det_path = require_path(kv, "detector");
  RotationSweepConfig sc;
  sc.images = static_cast<std::size_t>(kv.get_int("images", static_cast<long long>(sc.images)));
  sc.crop = static_cast<std::size_t>(kv.get_int("crop", static_cast<long long>(sc.crop)));
  sc.base_size = static_cast<std::size_t>(kv.get_int("base_size", static_cast<long long>(sc.base_size)));
  sc.keypoints = static_cast<std::size_t>(kv.get_int("keypoints", static_cast<long long>(sc.keypoints)));
  sc.threshold = kv.get_double("threshold", sc.threshold);
  sc.noise_sigma = kv.get_double("noise_sigma", sc.noise_sigma);
  sc.smoothing = static_cast<std::size_t>(kv.get_int("smoothing", static_cast<long long>(sc.smoothing)));
  sc.nms_radius = static_cast<int>(kv.get_int("nms_radius", sc.nms_radius));
  sc.seed = static_cast<std::uint64_t>(kv.get_int("seed", 0));
  DetectOptions d;
  d.temperature = kv.get_double("temperature", 1.0);
  kv.ensure_consumed();
  sc.validate();
  if (!(d.temperature > 0)) throw ConfigError("temperature must be positive");
  if (sc.smoothing < 1) throw ConfigError("smoothing must be >= 1");
  require_file(det_path);
  for (const auto& p : images) require_file(p);

  const auto out = make_out(g);
  const auto net = load_detector<float>(det_path);
  std::vector<Image> bases;
  for (const auto& p : images) bases.push_back(read_pgm(p));
  const auto res = images.empty() ? rotation_sweep(*net, sc, d, &std::cout) : rotation_sweep(*net, bases, sc, d, &std::cout);
  std::ofstream csv(out / "rotation_sweep.csv");
  write_rotation_sweep_csv(csv, res);
  std::ofstream svg(out / "rotation_sweep.svg");
  write_svg_plot(svg, res.angles, {{"repeatability", res.smoothed}}, "rotation (deg)", "repeatability", 0.0, 1.0);
  std::cout << std::setprecision(4) << "smoothed mean " << res.mean() << ", max - min " << res.band() << "\n";
  return 0;
}

int cmd_ablation(const Globals& g) {
  auto kv = load_config(g);
  DetectorTrainConfig base = lines_experiment_config();
  base.iterations = 2000;
  base.apply(kv);
  const std::string list = kv.get_string(
      "variants", "recnn_seq50,recnn_seq100,recnn_seq200,recnn_peaky32,recnn_peaky64,recnn_peaky96,cnn_same_seq100");
  const auto eval_count = static_cast<std::size_t>(kv.get_int("eval_pairs", 64));
  const auto eval_seed = static_cast<std::uint64_t>(kv.get_int("eval_seed", 271828));
  kv.ensure_consumed();

  const auto all = table_variants(base, true);
  std::vector<AblationVariant> chosen;
  std::stringstream ss(list);
  for (std::string name; std::getline(ss, name, ',');) {
    const auto it = std::find_if(all.begin(), all.end(), [&](const AblationVariant& v) { return v.name == name; });
    if (it == all.end()) {
      std::string known;
      for (const auto& v : all) known += (known.empty() ? "" : ", ") + v.name;
      throw ConfigError("unknown variant '" + name + "' (known: " + known + ")");
    }
    it->cfg.validate();
    chosen.push_back(*it);
  }
  if (chosen.empty()) throw ConfigError("variants is empty");
  if (eval_count < 1) throw ConfigError("eval_pairs must be >= 1");

  const auto out = make_out(g);
  const auto cache = (out / "models").string();
  const auto pairs = validation_pairs(base.data, eval_count, eval_seed);
  std::vector<AblationRow> rows;
  for (const auto& v : chosen) {
    std::cout << "variant " << v.name << std::endl;
    const auto run = train_detector_cached(v.name, v.cfg, cache, {}, &std::cout);
    const auto net = load_detector<float>(run.checkpoint());
    rows.push_back({v.architecture, v.training, evaluate_detector(*net, pairs, v.cfg.detect_options()), net->parameter_count()});
  }
  std::ofstream os(out / "ablation.csv");
  write_ablation_csv(os, rows);
  write_ablation_csv(std::cout, rows);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"strek: rotation-equivariant keypoint detection and description"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "key = value configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "overrides the config seed");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--threads", g.threads, "worker threads (computation is single-threaded)")->check(CLI::PositiveNumber);

  std::vector<std::string> images;
  std::string dataset, features;
  auto* gen = app.add_subcommand("gen-dataset", "write synthetic line pairs as PGM plus a manifest");
  auto* tdet = app.add_subcommand("train-detector", "train the detector with sequential sampling or the peaky baseline");
  auto* tdesc = app.add_subcommand("train-descriptor", "train the descriptor at a frozen detector's keypoints");
  auto* det = app.add_subcommand("detect", "detect keypoints in PGM images");
  det->add_option("images", images, "input images")->required();
  auto* ext = app.add_subcommand("extract", "detect keypoints and compute descriptors");
  ext->add_option("images", images, "input images")->required();
  auto* ev = app.add_subcommand("eval", "evaluate features on a dataset directory");
  ev->add_option("--dataset", dataset, "dataset directory with manifest.csv")->required();
  ev->add_option("--features", features, "directory of feature or keypoint files")->required();
  auto* rot = app.add_subcommand("rotation-sweep", "repeatability over 360 one-degree rotations");
  rot->add_option("images", images, "base images (default: synthetic lines)");
  auto* abl = app.add_subcommand("ablation", "train and compare detector variants");

  // CLI11 exits 106/109 etc. on usage errors; map everything to 1.
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  Eigen::setNbThreads(g.threads);

  try {
    if (*gen) return cmd_gen_dataset(g);
    if (*tdet) return cmd_train_detector(g);
    if (*tdesc) return cmd_train_descriptor(g);
    if (*det) return cmd_detect(g, images);
    if (*ext) return cmd_extract(g, images);
    if (*ev) return cmd_eval(g, dataset, features);
    if (*rot) return cmd_rotation_sweep(g, images);
    if (*abl) return cmd_ablation(g);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
