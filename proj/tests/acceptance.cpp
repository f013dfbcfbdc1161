// Acceptance runner: one PASS/FAIL line per criterion.
//
//   strek_acceptance [--cache DIR] [--only 1,3,...] [--train-only] [--no-train]
//
// Criteria 3-6 and 10 need trained models. They are read from the cache
// directory and trained there (resumably) when missing; --train-only fills
// the cache without evaluating anything.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "strek/experiments.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace strek;
namespace fs = std::filesystem;
using strek::testing::grad_check;
using strek::testing::random_leaf;
using strek::testing::random_leaf_away_from_zero;

namespace {

// ---------------------------------------------------------------------------
// Pinned tolerances
// ---------------------------------------------------------------------------

constexpr int kGradSeeds = 20;
constexpr double kGradTol = 1e-3;
constexpr double kGradBudgetS = 120;

constexpr std::size_t kEquivImages = 50;
constexpr std::size_t kEquivSize = 64;
constexpr double kEquivTol = 1e-4;
constexpr double kEquivBudgetS = 60;

constexpr std::size_t kMainIterations = 5000;
constexpr std::size_t kSmokeIterations = 2000;
constexpr double kRepMain = 0.85;
constexpr double kRepSmoke = 0.75;
constexpr double kKptsLo = 30, kKptsHi = 80;
constexpr double kMainBudgetS = 6 * 3600;
constexpr double kSmokeBudgetS = 90 * 60;
constexpr std::size_t kEvalPairs = 64;
constexpr std::uint64_t kEvalSeed = 271828;  // disjoint from training and validation seeds

constexpr double kAblationMargin = 0.03;
constexpr double kSequentialSpread = 2.0;

constexpr double kSweepBand = 0.15;
constexpr double kSweepMean = 0.6;

constexpr std::size_t kSamplerMaps = 1000;
constexpr std::size_t kChiDraws = 10000;
constexpr double kChiP = 0.01;
constexpr std::size_t kMonotoneCases = 100;
constexpr double kSamplerBudgetS = 60;

constexpr std::size_t kMetricInstances = 200;
constexpr double kMetricBudgetS = 60;

constexpr std::size_t kRansacSets = 100;
constexpr std::size_t kRansacPoints = 200;
constexpr double kRansacOutliers = 0.2;
constexpr double kRansacNoisePx = 0.5;  // inlier localisation noise
constexpr double kRansacThreshold = 2.0;
constexpr double kRansacCornerPx = 0.5;
constexpr std::size_t kRansacRequired = 99;
constexpr double kRansacBudgetS = 60;

constexpr std::size_t kDescriptorIterations = 10000;
constexpr double kDescriptorMma = 0.6;
constexpr double kDescriptorMs = 0.3;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Training plan
// ---------------------------------------------------------------------------

struct Plan {
  std::string cache;
  bool allow_training = true;
  std::ostream* progress = &std::cout;

  DetectorTrainConfig base() const {
    auto c = lines_experiment_config();
    c.iterations = kSmokeIterations;
    return c;
  }
  DetectorTrainConfig main_config() const {
    auto c = base();
    c.iterations = kMainIterations;
    return c;
  }
  DetectorTrainConfig cnn_config() const {
    auto c = main_config();
    c.net = cnn_same_channels(c.net);
    return c;
  }
  DescriptorTrainConfig descriptor_config() const {
    DescriptorTrainConfig c;
    c.iterations = kDescriptorIterations;
    c.data = base().data;
    c.seed = 1;
    return c;
  }

  // Variants trained for the ablation only (the main and CNN runs provide
  // their own 2k snapshots).
  std::vector<AblationVariant> ablation_only() const {
    std::vector<AblationVariant> out;
    for (auto& v : table_variants(base(), false))
      if (v.name != "recnn_seq100" && v.name != "cnn_same_seq100") out.push_back(v);
    return out;
  }

  CachedRun detector(const std::string& name, const DetectorTrainConfig& cfg, std::vector<std::size_t> snaps = {}) const {
    CachedRun run{name, cache};
    if (run.complete()) return run;
    if (!allow_training) throw std::runtime_error("model " + run.checkpoint() + " is not in the cache");
    if (progress) *progress << "training " << name << " (" << cfg.iterations << " iterations)" << std::endl;
    return train_detector_cached(name, cfg, cache, snaps, progress);
  }
  CachedRun main_run() const { return detector("recnn_seq100", main_config(), {kSmokeIterations}); }
  CachedRun cnn_run() const { return detector("cnn_same_seq100", cnn_config(), {kSmokeIterations}); }

  CachedRun descriptor_run() const {
    CachedRun run{"descriptor", cache};
    if (run.complete()) return run;
    if (!allow_training) throw std::runtime_error("model " + run.checkpoint() + " is not in the cache");
    const auto det = load_detector<float>(main_run().checkpoint());
    if (progress) *progress << "training descriptor (" << kDescriptorIterations << " iterations)" << std::endl;
    return train_descriptor_cached("descriptor", descriptor_config(), *det, main_config().detect_options(), cache, progress);
  }

  void train_everything() const {
    main_run();
    descriptor_run();
    cnn_run();
    for (const auto& v : ablation_only()) detector(v.name, v.cfg);
  }

  std::string results_dir() const {
    const auto d = fs::path(cache) / "results";
    fs::create_directories(d);
    return d.string();
  }
};

std::vector<ImagePair> eval_pairs(const DetectorTrainConfig& cfg) { return validation_pairs(cfg.data, kEvalPairs, kEvalSeed); }

// Evaluations are cached in memory so criteria 3-5 share them.
std::map<std::string, DetectorEvaluation> g_evals;

DetectorEvaluation evaluate_checkpoint(const std::string& path, const DetectorTrainConfig& cfg) {
  if (auto it = g_evals.find(path); it != g_evals.end()) return it->second;
  const auto net = load_detector<float>(path);
  const auto e = evaluate_detector(*net, eval_pairs(cfg), cfg.detect_options());
  g_evals[path] = e;
  return e;
}

// ---------------------------------------------------------------------------
// 1. Gradient suite
// ---------------------------------------------------------------------------

using TD = Tensor<double>;
using Inputs = std::vector<TD>;

TD weighted_sum(const TD& y, unsigned seed) {
  std::mt19937_64 rng(seed * 7919ULL + 17);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> w(y.size());
  for (auto& x : w) x = u(rng);
  return sum(mul(y, TD(y.shape(), w)));
}

struct GradTally {
  double worst = 0;
  std::string where;
  std::size_t checks = 0;

  void add(const std::string& name, int seed, const strek::testing::GradCheckResult& r) {
    ++checks;
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      where = name + " seed " + std::to_string(seed) + " (" + r.worst + ")";
    }
  }
};

Outcome criterion_gradients() {
  GradTally t;
  struct Unary {
    const char* name;
    std::function<TD(const TD&)> op;
    int domain;  // 0 any, 1 away from zero, 2 positive
  };
  const std::vector<Unary> unary = {
      {"relu", [](const TD& x) { return relu(x); }, 1},
      {"leaky_relu", [](const TD& x) { return leaky_relu(x, 0.1); }, 1},
      {"log", [](const TD& x) { return log(x); }, 2},
      {"exp", [](const TD& x) { return exp(x); }, 0},
      {"sqrt", [](const TD& x) { return sqrt(x); }, 2},
      {"sigmoid", [](const TD& x) { return sigmoid(x); }, 0},
      {"scale", [](const TD& x) { return scale(x, -2.5); }, 0},
      {"add_scalar", [](const TD& x) { return add_scalar(x, 3.0); }, 0},
      {"sum_axis", [](const TD& x) { return sum_axis(x, 1); }, 0},
      {"mean_axis", [](const TD& x) { return mean_axis(x, 2); }, 0},
      {"mean", [](const TD& x) { return mean(x); }, 0},
      {"reshape", [](const TD& x) { return reshape(x, Shape{x.size()}); }, 0},
      {"max_pool2", [](const TD& x) { return max_pool2(x); }, 0},
      {"upsample2", [](const TD& x) { return upsample2(x); }, 0},
      {"l2_normalize_channels", [](const TD& x) { return l2_normalize_channels(x); }, 0},
      {"gather", [](const TD& x) { return gather(x, 1, 2); }, 0},
      {"gather_points", [](const TD& x) { return gather_points(x, {0, 5, 5, 11}); }, 0},
      {"softmax_temperature", [](const TD& x) { return softmax_temperature(reshape(x, Shape{12, 4}), 0.7); }, 0},
  };
  const auto windows = tile_windows(8, 8, 4, 2);
  auto sparse = std::make_shared<SparseMatrix<double>>();
  {
    sparse->cols = 6;
    std::mt19937_64 mrng(1);
    std::uniform_real_distribution<double> u(-1, 1);
    for (int r = 0; r < 10; ++r) {
      for (int c = 0; c < 6; ++c)
        if ((r + c) % 3 != 0) sparse->push(c, u(mrng));
      sparse->end_row();
    }
  }
  std::shared_ptr<const SparseMatrix<double>> csparse = sparse;

  DetectorConfig dcfg;
  dcfg.fields = 1;
  dcfg.regular_layers = 1;
  DescriptorConfig scfg;
  scfg.widths = {2, 4};
  scfg.dim = 4;

  for (int s = 0; s < kGradSeeds; ++s) {
    const unsigned us = static_cast<unsigned>(s);
    std::mt19937_64 rng(1000 + static_cast<std::uint64_t>(s));
    for (const auto& u : unary) {
      TD x = u.domain == 2 ? random_leaf({3, 4, 4}, rng, 0.2, 2.0)
             : u.domain == 1 ? random_leaf_away_from_zero({3, 4, 4}, rng)
                             : random_leaf({3, 4, 4}, rng);
      t.add(u.name, s, grad_check({x}, [&](const Inputs& in) { return weighted_sum(u.op(in[0]), us); }));
    }
    const std::vector<std::pair<const char*, std::function<TD(const TD&, const TD&)>>> binary = {
        {"add", [](const TD& a, const TD& b) { return add(a, b); }},
        {"sub", [](const TD& a, const TD& b) { return sub(a, b); }},
        {"mul", [](const TD& a, const TD& b) { return mul(a, b); }},
        {"div", [](const TD& a, const TD& b) { return div(a, b); }},
        {"concat_channels", [](const TD& a, const TD& b) { return concat_channels(a, b); }},
        {"add_n", [](const TD& a, const TD& b) { return add_n<double>({a, b, a}); }},
        {"dot", [](const TD& a, const TD& b) { return dot(a, b); }},
    };
    for (const auto& [name, op] : binary) {
      TD a = random_leaf({2, 3, 3}, rng), b = random_leaf({2, 3, 3}, rng, 0.5, 1.5);
      t.add(name, s, grad_check({a, b}, [&, op = op](const Inputs& in) { return weighted_sum(op(in[0], in[1]), us); }));
    }
    t.add("conv2d", s, grad_check({random_leaf({3, 7, 6}, rng), random_leaf({2, 3, 3, 3}, rng)}, [&](const Inputs& in) {
            return weighted_sum(conv2d(in[0], in[1], s % 2), us);
          }));
    t.add("add_channel_bias", s, grad_check({random_leaf({3, 4, 5}, rng), random_leaf({3}, rng)}, [&](const Inputs& in) {
            return weighted_sum(add_channel_bias(in[0], in[1]), us);
          }));
    t.add("sparse_linear", s, grad_check({random_leaf({6}, rng)}, [&](const Inputs& in) {
            return weighted_sum(sparse_linear(in[0], csparse, Shape{2, 5}), us);
          }));
    t.add("window_max/mean", s, grad_check({random_leaf({8, 8}, rng)}, [&](const Inputs& in) {
            return add(weighted_sum(window_max(in[0], windows), us), weighted_sum(window_mean(in[0], windows), us + 1));
          }));
    {
      TD sp = random_leaf({7}, rng), sn = random_leaf({7}, rng);
      t.add("triplet_loss", s, grad_check({sp, sn}, [](const Inputs& in) { return triplet_loss(in[0], in[1], 0.5, nullptr); }));
    }

    // Detector network: input and a subset of every parameter tensor.
    {
      DetectorNet<double> net(dcfg, static_cast<std::uint64_t>(s));
      const TD x = random_leaf({1, 14, 14}, rng, 0.0, 1.0);
      t.add("detector input", s, grad_check({x}, [&](const Inputs& in) { return weighted_sum(net.forward(in[0]), us); }, 1e-6, 8, us));
      Inputs params;
      for (auto& p : net.params().items()) params.push_back(p.tensor);
      t.add("detector params", s,
            grad_check(params, [&](const Inputs&) { return weighted_sum(net.forward(x), us); }, 1e-6, 3, us));
    }
    // Descriptor network.
    {
      DescriptorNet<double> net(scfg, static_cast<std::uint64_t>(s));
      const TD x = random_leaf({1, 8, 8}, rng, 0.0, 1.0);
      const std::vector<std::size_t> pix{0, 9, 27, 63};
      t.add("descriptor input", s, grad_check({x}, [&](const Inputs& in) {
              return weighted_sum(gather_points(net.forward(in[0]), pix), us);
            }, 1e-6, 8, us));
      Inputs params;
      for (auto& p : net.params().items()) params.push_back(p.tensor);
      t.add("descriptor params", s, grad_check(params, [&](const Inputs&) {
              return weighted_sum(gather_points(net.forward(x), pix), us);
            }, 1e-6, 3, us));
    }
    // Policy-gradient surrogate with frozen samples and rewards.
    {
      TD ra = random_leaf({6, 6}, rng, -2, 2), rb = random_leaf({6, 6}, rng, -2, 2);
      const double temp = 0.5 + s % 3;
      RewardConfig rc;
      rc.avoidance_radius = 1;
      rc.max_samples = 4;
      rc.stop_mass_threshold = 1e-9;
      rc.temperature = temp;
      Rng sr(static_cast<std::uint64_t>(s) + 77);
      const auto sa = sequential_sample(Heatmap::from_tensor(ra), rc, sr);
      const auto sb = sequential_sample(Heatmap::from_tensor(rb), rc, sr);
      std::vector<RewardRecord> wa(sa.pixels.size()), wb(sb.pixels.size());
      std::uniform_real_distribution<double> ur(-1, 3);
      for (auto& w : wa) w.reward = ur(rng);
      for (auto& w : wb) w.reward = ur(rng);
      t.add("policy gradient surrogate", s, grad_check({ra, rb}, [&](const Inputs& in) {
              return policy_gradient_loss(softmax_temperature(in[0], temp), sa, wa, softmax_temperature(in[1], temp), sb, wb);
            }));
    }
    // Peaky + similarity baseline loss.
    {
      TD a = random_leaf({12, 12}, rng, -2, 2), b = random_leaf({12, 12}, rng, -2, 2);
      Rng hr(static_cast<std::uint64_t>(s));
      HomographyBounds hb;
      hb.max_rotation_deg = 20;
      const Homography g = random_homography(hr, hb, 12, 12);
      t.add("peaky + similarity", s, grad_check({a, b}, [&](const Inputs& in) {
              return peaky_similarity_loss(sigmoid(in[0]), sigmoid(in[1]), g, 4 + static_cast<std::size_t>(s % 3) * 2);
            }));
    }
  }
  Outcome o;
  o.pass = t.worst < kGradTol;
  o.detail = std::to_string(t.checks) + " checks over " + std::to_string(kGradSeeds) + " seeds, worst relative error " +
             sci(t.worst) + (t.where.empty() ? "" : " at " + t.where) + " (tolerance " + sci(kGradTol) + ")";
  return o;
}

// ---------------------------------------------------------------------------
// 2. Equivariance suite
// ---------------------------------------------------------------------------

Outcome criterion_equivariance() {
  double worst = 0;
  const DetectorConfig cfg;
  const std::size_t S = kEquivSize, border = cfg.receptive_field() / 2;
  for (std::size_t i = 0; i < kEquivImages; ++i) {
    DetectorNet<float> net(cfg, 5000 + i);
    std::mt19937_64 rng(6000 + i);
    std::uniform_real_distribution<float> u(0, 1);
    Image x(S, S);
    for (auto& p : x.pixels) p = u(rng);
    const auto d0 = net.forward(x).values();
    const std::vector<float> d(d0.begin(), d0.end());
    for (int k = 1; k < 4; ++k) {
      const auto dr0 = net.forward(rotate_image_90k(x, k)).values();
      const std::vector<float> dr(dr0.begin(), dr0.end());
      const auto expect = rotate_grid_90k(d, S, S, k);
      double err = 0, scale = 0;
      for (std::size_t r = border; r + border < S; ++r)
        for (std::size_t c = border; c + border < S; ++c) {
          err = std::max(err, static_cast<double>(std::abs(dr[r * S + c] - expect[r * S + c])));
          scale = std::max(scale, static_cast<double>(std::abs(expect[r * S + c])));
        }
      worst = std::max(worst, scale > 0 ? err / scale : err);
    }
  }
  return {worst < kEquivTol, std::to_string(kEquivImages) + " random nets/images " + std::to_string(S) + "x" +
                                 std::to_string(S) + ", k=1..3, interior border " + std::to_string(border) +
                                 " px, worst relative error " + sci(worst) + " (tolerance " + sci(kEquivTol) + ")"};
}

// ---------------------------------------------------------------------------
// 3-5. Synthetic-lines training and ablation
// ---------------------------------------------------------------------------

Outcome criterion_training(const Plan& plan) {
  const auto run = plan.main_run();
  const auto cfg = plan.main_config();
  const auto full = evaluate_checkpoint(run.checkpoint(), cfg);
  const auto smoke = evaluate_checkpoint(run.snapshot(kSmokeIterations), cfg);
  const auto timing = RunTiming::read(run.timing());
  const double t_full = timing.at(kMainIterations), t_smoke = timing.at(kSmokeIterations);
  const bool rep_ok = full.rep_max[1] >= kRepMain;
  const bool kpt_ok = full.mean_keypoints >= kKptsLo && full.mean_keypoints <= kKptsHi;
  const bool smoke_ok = smoke.rep_max[1] >= kRepSmoke;
  const bool time_ok = t_full < kMainBudgetS;
  const bool smoke_time_ok = t_smoke < kSmokeBudgetS;
  std::ostringstream os;
  os << "5k: Rep-max@1/2/3px " << fmt(full.rep_max[0]) << "/" << fmt(full.rep_max[1]) << "/" << fmt(full.rep_max[2])
     << " (need @2px >= " << kRepMain << (rep_ok ? "" : ", MISSED") << "), keypoints " << fmt(full.mean_keypoints, 1)
     << " (need [" << kKptsLo << "," << kKptsHi << "]" << (kpt_ok ? "" : ", MISSED") << "), train time "
     << fmt(t_full / 60, 1) << " min (budget " << kMainBudgetS / 60 << (time_ok ? "" : ", MISSED") << "); 2k: Rep-max@2px "
     << fmt(smoke.rep_max[1]) << " (need >= " << kRepSmoke << (smoke_ok ? "" : ", MISSED") << "), train time "
     << fmt(t_smoke / 60, 1) << " min (budget " << kSmokeBudgetS / 60 << (smoke_time_ok ? "" : ", MISSED") << ")";
  return {rep_ok && kpt_ok && smoke_ok && time_ok && smoke_time_ok, os.str()};
}

struct AblationResults {
  AblationRow seq[3];    // n = 50, 100, 200
  AblationRow peaky[3];  // W = 32, 64, 96
  AblationRow cnn;
};

AblationResults ablation(const Plan& plan) {
  AblationResults r;
  const auto base = plan.base();
  std::vector<AblationRow> rows;
  auto row_for = [&](const std::string& path, const AblationVariant& v) {
    AblationRow row;
    row.architecture = v.architecture;
    row.training = v.training;
    row.eval = evaluate_checkpoint(path, v.cfg);
    row.parameters = DetectorNet<float>(v.cfg.net, 0).parameter_count();
    rows.push_back(row);
    return row;
  };
  const auto variants = table_variants(base, false);
  for (const auto& v : variants) {
    std::string path;
    // a 2k snapshot is usable before its 5k run finishes
    auto snapshot = [&](const std::string& name, auto&& run) {
      const auto snap = CachedRun{name, plan.cache}.snapshot(kSmokeIterations);
      return fs::exists(snap) ? snap : run().snapshot(kSmokeIterations);
    };
    if (v.name == "recnn_seq100") path = snapshot(v.name, [&] { return plan.main_run(); });
    else if (v.name == "cnn_same_seq100") path = snapshot(v.name, [&] { return plan.cnn_run(); });
    else path = plan.detector(v.name, v.cfg).checkpoint();
    const auto row = row_for(path, v);
    if (v.name == "recnn_seq50") r.seq[0] = row;
    if (v.name == "recnn_seq100") r.seq[1] = row;
    if (v.name == "recnn_seq200") r.seq[2] = row;
    if (v.name == "recnn_peaky32") r.peaky[0] = row;
    if (v.name == "recnn_peaky64") r.peaky[1] = row;
    if (v.name == "recnn_peaky96") r.peaky[2] = row;
    if (v.name == "cnn_same_seq100") r.cnn = row;
  }
  std::ofstream os(fs::path(plan.results_dir()) / "ablation.csv");
  write_ablation_csv(os, rows);
  return r;
}

Outcome criterion_ablation(const Plan& plan) {
  const auto r = ablation(plan);
  const double seq = r.seq[1].eval.rep_max[1];
  std::size_t best = 0;
  for (std::size_t i = 1; i < 3; ++i)
    if (r.peaky[i].eval.rep_max[1] > r.peaky[best].eval.rep_max[1]) best = i;
  const double peaky = r.peaky[best].eval.rep_max[1];
  const double cnn = r.cnn.eval.rep_max[1];
  const bool a = seq - peaky >= kAblationMargin, b = seq - cnn >= kAblationMargin;
  std::ostringstream os;
  os << "at " << kSmokeIterations << " iterations, Rep-max@2px: sequential n=100 " << fmt(seq) << ", best peaky ("
     << r.peaky[best].training << ") " << fmt(peaky) << " (margin " << fmt(seq - peaky) << (a ? "" : ", MISSED")
     << "), CNN same channels " << fmt(cnn) << " (margin " << fmt(seq - cnn) << (b ? "" : ", MISSED") << "); need >= "
     << kAblationMargin;
  return {a && b, os.str()};
}

Outcome criterion_keypoint_stability(const Plan& plan) {
  const auto r = ablation(plan);
  auto spread = [](const AblationRow* rows, std::string& list) {
    double lo = std::numeric_limits<double>::infinity(), hi = 0;
    for (int i = 0; i < 3; ++i) {
      lo = std::min(lo, rows[i].eval.mean_keypoints);
      hi = std::max(hi, rows[i].eval.mean_keypoints);
      list += (i ? "/" : "") + fmt(rows[i].eval.mean_keypoints, 1);
    }
    return lo > 0 ? hi / lo : std::numeric_limits<double>::infinity();
  };
  std::string sl, pl;
  const double s = spread(r.seq, sl), p = spread(r.peaky, pl);
  const bool a = s <= kSequentialSpread, b = s < p;
  std::ostringstream os;
  os << "mean keypoints sequential n=50/100/200: " << sl << " (max/min " << fmt(s) << ", need <= " << kSequentialSpread
     << (a ? "" : ", MISSED") << "); peaky W=32/64/96: " << pl << " (max/min " << fmt(p) << "; sequential must be smaller"
     << (b ? "" : ", MISSED") << ")";
  return {a && b, os.str()};
}

// ---------------------------------------------------------------------------
// 6. Rotation sweep
// ---------------------------------------------------------------------------

Outcome criterion_rotation(const Plan& plan) {
  RotationSweepConfig sc;
  sc.seed = 4242;
  const auto recnn = load_detector<float>(plan.main_run().checkpoint());
  const auto cnn = load_detector<float>(plan.cnn_run().checkpoint());
  const auto opt = plan.main_config().detect_options();
  const auto a = rotation_sweep(*recnn, sc, opt);
  const auto b = rotation_sweep(*cnn, sc, opt);
  const auto dir = fs::path(plan.results_dir());
  {
    std::ofstream os(dir / "rotation_sweep_recnn.csv");
    write_rotation_sweep_csv(os, a);
    std::ofstream os2(dir / "rotation_sweep_cnn.csv");
    write_rotation_sweep_csv(os2, b);
    std::ofstream svg(dir / "rotation_sweep.svg");
    write_svg_plot(svg, a.angles, {{"ReCNN", a.smoothed}, {"CNN same channels", b.smoothed, "#d62728"}}, "rotation (deg)",
                   "repeatability@3px", 0.0, 1.0);
  }
  const bool band_ok = a.band() <= kSweepBand, mean_ok = a.mean() >= kSweepMean, control_ok = b.band() > kSweepBand;
  std::ostringstream os;
  os << "ReCNN smoothed repeatability@3px band " << fmt(a.band()) << " (need <= " << kSweepBand << (band_ok ? "" : ", MISSED")
     << "), mean " << fmt(a.mean()) << " (need >= " << kSweepMean << (mean_ok ? "" : ", MISSED") << "); CNN control band "
     << fmt(b.band()) << ", mean " << fmt(b.mean()) << " (must exceed " << kSweepBand << (control_ok ? "" : ", MISSED")
     << ")";
  return {band_ok && mean_ok && control_ok, os.str()};
}

// ---------------------------------------------------------------------------
// 7. Sampler properties
// ---------------------------------------------------------------------------

double chi2_upper_tail_df2(double x) { return std::exp(-x / 2); }

Outcome criterion_sampler() {
  std::mt19937_64 gen(77);
  std::uniform_real_distribution<double> u(0, 1);
  std::size_t violations = 0;
  for (std::size_t t = 0; t < kSamplerMaps; ++t) {
    const std::size_t h = 8 + gen() % 57, w = 8 + gen() % 57;
    Heatmap raw(h, w);
    for (auto& v : raw.values) v = 5 * u(gen);
    RewardConfig c;
    c.avoidance_radius = 1 + static_cast<int>(gen() % 8);
    c.max_samples = 1 + gen() % 300;
    c.stop_mass_threshold = 0.001 + 0.3 * u(gen);
    c.temperature = 0.2 + 2 * u(gen);
    Rng rng(gen());
    const auto s = sequential_sample(raw, c, rng);
    for (std::size_t i = 0; i < s.points.size(); ++i)
      for (std::size_t j = i + 1; j < s.points.size(); ++j)
        if (std::max(std::abs(s.points[i].row - s.points[j].row), std::abs(s.points[i].col - s.points[j].col)) <=
            c.avoidance_radius)
          ++violations;
  }

  Heatmap p(30, 30, 0.0);
  const std::array<double, 3> q{0.2, 0.3, 0.5};
  const std::array<int, 3> rows{3, 15, 26};
  for (int i = 0; i < 3; ++i) p.at(static_cast<std::size_t>(rows[i]), static_cast<std::size_t>(rows[i])) = q[i];
  std::array<double, 3> n{0, 0, 0};
  RewardConfig one;
  one.avoidance_radius = 2;
  one.max_samples = 1;
  one.stop_mass_threshold = 1e-6;
  for (std::size_t t = 0; t < kChiDraws; ++t) {
    Rng rng = make_rng(31, {t});
    const auto s = sample_normalized(p, one, rng);
    for (int i = 0; i < 3; ++i)
      if (s.points[0].row == rows[i]) ++n[i];
  }
  double x2 = 0;
  for (int i = 0; i < 3; ++i) x2 += std::pow(n[i] - kChiDraws * q[i], 2) / (kChiDraws * q[i]);
  const double pval = chi2_upper_tail_df2(x2);

  std::size_t monotone_fail = 0;
  for (std::size_t t = 0; t < kMonotoneCases; ++t) {
    Heatmap raw(24 + gen() % 16, 24 + gen() % 16);
    for (auto& v : raw.values) v = 4 * u(gen);
    const auto pm = normalize_heatmap(raw, 0.5 + u(gen));
    double lo = 0.001 + 0.5 * u(gen), hi = 0.001 + 0.5 * u(gen);
    if (lo > hi) std::swap(lo, hi);
    const std::uint64_t seed = gen();
    RewardConfig c;
    c.avoidance_radius = 2;
    c.max_samples = 10000;
    c.stop_mass_threshold = lo;
    Rng r1(seed);
    const auto n_lo = sample_normalized(pm, c, r1).points.size();
    c.stop_mass_threshold = hi;
    Rng r2(seed);
    const auto n_hi = sample_normalized(pm, c, r2).points.size();
    if (n_hi > n_lo) ++monotone_fail;
  }
  const bool ok = violations == 0 && pval > kChiP && monotone_fail == 0;
  std::ostringstream os;
  os << "exclusion violations " << violations << " over " << kSamplerMaps << " maps; 3-candidate chi-square p = "
     << fmt(pval, 4) << " over " << kChiDraws << " draws (need > " << kChiP << "); monotonicity failures " << monotone_fail
     << " over " << kMonotoneCases << " cases";
  return {ok, os.str()};
}

// ---------------------------------------------------------------------------
// 8. Metric oracles
// ---------------------------------------------------------------------------

Outcome criterion_metrics() {
  std::mt19937_64 rng(2024);
  std::size_t mismatches = 0, compared = 0;
  std::string first;
  auto note = [&](bool same, const std::string& what, std::size_t i) {
    ++compared;
    if (same) return;
    ++mismatches;
    if (first.empty()) first = what + " on instance " + std::to_string(i);
  };
  auto same_value = [](double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; };
  for (std::size_t i = 0; i < kMetricInstances; ++i) {
    const EvalPair p = oracle::random_instance(rng, 200);
    const auto m = mnn_match(p.desc_a, p.desc_b);
    const auto om = oracle::mutual_nn(p.desc_a, p.desc_b);
    std::vector<std::pair<std::size_t, std::size_t>> got;
    for (const auto& x : m) got.emplace_back(x.a, x.b);
    note(got == om, "MNN matching", i);
    for (double t : {1.0, 2.0, 3.0}) {
      note(same_value(repeatability(p, t).symmetric, oracle::symmetric_rep(p, t)), "repeatability", i);
      const auto a = mma(p, m, t);
      note(same_value(a.defined ? a.value : kNaN, om.empty() ? kNaN : oracle::mma(p, om, t)), "MMA", i);
      const auto s = matching_score(p, m, t);
      note(same_value(s.defined ? s.value : kNaN, oracle::matching_score(p, om, t)), "matching score", i);
    }
  }
  return {mismatches == 0, std::to_string(compared) + " exact comparisons on " + std::to_string(kMetricInstances) +
                               " instances (up to 200 keypoints), mismatches " + std::to_string(mismatches) +
                               (first.empty() ? "" : ", first: " + first)};
}

// ---------------------------------------------------------------------------
// 9. RANSAC
// ---------------------------------------------------------------------------

Outcome criterion_ransac() {
  const std::size_t H = 240, W = 320;
  std::size_t good = 0;
  double worst = 0;
  for (std::size_t t = 0; t < kRansacSets; ++t) {
    Rng gen = make_rng(909, {t});
    HomographyBounds b;
    b.max_rotation_deg = 180;
    b.max_scale_delta = 0.3;
    b.max_perspective = 5e-4;
    const Homography h = random_homography(gen, b, W, H);
    std::uniform_real_distribution<double> ux(0, W), uy(0, H);
    std::normal_distribution<double> noise(0, kRansacNoisePx);
    std::vector<Match> m;
    const auto n_out = static_cast<std::size_t>(std::lround(kRansacOutliers * kRansacPoints));
    for (std::size_t i = 0; i < kRansacPoints; ++i) {
      const Point p(ux(gen), uy(gen));
      if (i < n_out) {
        m.push_back({p, Point(ux(gen), uy(gen))});
      } else {
        const Point q = h.project(p);
        m.push_back({p, Point(q.x() + noise(gen), q.y() + noise(gen))});
      }
    }
    std::shuffle(m.begin(), m.end(), gen);
    double err = std::numeric_limits<double>::infinity();
    try {
      Rng rr = make_rng(910, {t});
      err = corner_error(estimate_homography_ransac(m, kRansacThreshold, 2000, rr).h, h, H, W);
    } catch (const EstimationFailed&) {
    }
    worst = std::max(worst, err);
    if (err < kRansacCornerPx) ++good;
  }
  return {good >= kRansacRequired, std::to_string(good) + "/" + std::to_string(kRansacSets) + " sets with corner error < " +
                                       fmt(kRansacCornerPx, 2) + " px (need >= " + std::to_string(kRansacRequired) +
                                       "); " + std::to_string(kRansacPoints) + " matches, " +
                                       fmt(100 * kRansacOutliers, 0) + "% outliers, inlier noise sigma " +
                                       fmt(kRansacNoisePx, 2) + " px, worst " + fmt(worst, 3) + " px"};
}

// ---------------------------------------------------------------------------
// 10. Descriptor
// ---------------------------------------------------------------------------

Outcome criterion_descriptor(const Plan& plan) {
  const auto run = plan.descriptor_run();
  const auto det = load_detector<float>(plan.main_run().checkpoint());
  const auto desc = load_descriptor<float>(run.checkpoint());
  const auto cfg = plan.descriptor_config();
  const auto pairs =
      detected_pairs(*det, plan.main_config().detect_options(), cfg.augmented_data(), kEvalPairs, kEvalSeed, 0x7e57);
  const auto s = evaluate_descriptor(*desc, pairs, 3.0);
  const bool a = s.mma >= kDescriptorMma, b = s.ms >= kDescriptorMs;
  std::ostringstream os;
  os << kEvalPairs << " held-out pairs (+-" << cfg.rotation_deg << " deg extra rotation): MMA@3px " << fmt(s.mma)
     << " (need >= " << kDescriptorMma << (a ? "" : ", MISSED") << "), MS@3px " << fmt(s.ms) << " (need >= "
     << kDescriptorMs << (b ? "" : ", MISSED") << "), mean matches " << fmt(s.mean_matches, 1);
  return {a && b, os.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"strek acceptance runner"};
  Plan plan;
  plan.cache = "acceptance_cache";
  std::string only;
  bool train_only = false, no_train = false;
  app.add_option("--cache", plan.cache, "directory holding trained models");
  app.add_option("--only", only, "comma-separated criteria to run");
  app.add_flag("--train-only", train_only, "train every model into the cache and exit");
  app.add_flag("--no-train", no_train, "fail instead of training missing models");
  CLI11_PARSE(app, argc, argv);
  plan.allow_training = !no_train;

  if (train_only) {
    plan.train_everything();
    return 0;
  }

  std::set<int> selected;
  if (!only.empty()) {
    std::stringstream ss(only);
    for (std::string item; std::getline(ss, item, ',');) selected.insert(std::stoi(item));
  }
  struct Criterion {
    int id;
    const char* title;
    double budget_s;  // 0: no runtime bound checked here
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient suite", kGradBudgetS, criterion_gradients},
      {2, "equivariance suite", kEquivBudgetS, criterion_equivariance},
      {3, "synthetic-lines training", 0, [&] { return criterion_training(plan); }},
      {4, "ablation ordering", 0, [&] { return criterion_ablation(plan); }},
      {5, "keypoint-count stability", 0, [&] { return criterion_keypoint_stability(plan); }},
      {6, "rotation sweep stability", 0, [&] { return criterion_rotation(plan); }},
      {7, "sampler property suite", kSamplerBudgetS, criterion_sampler},
      {8, "metric oracle suite", kMetricBudgetS, criterion_metrics},
      {9, "RANSAC recovery", kRansacBudgetS, criterion_ransac},
      {10, "descriptor quality", 0, [&] { return criterion_descriptor(plan); }},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double s = seconds_since(t0);
    if (c.budget_s > 0 && s >= c.budget_s) {
      o.pass = false;
      o.detail += "; runtime over budget";
    }
    std::cout << "criterion " << std::setw(2) << c.id << " [" << (o.pass ? "PASS" : "FAIL") << "] " << c.title << ": "
              << o.detail << " (" << fmt(s, 1) << " s";
    if (c.budget_s > 0) std::cout << ", budget " << fmt(c.budget_s, 0) << " s";
    std::cout << ")" << std::endl;
    if (!o.pass) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
