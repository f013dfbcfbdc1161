#pragma once

// Detector training by policy gradient: sequential sampling from the
// normalized heatmap, repeatability rewards, the REINFORCE surrogate loss
// and schedules. Also the peaky + similarity baseline losses.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "strek/checkpoint.hpp"
#include "strek/config.hpp"
#include "strek/detector.hpp"
#include "strek/geometry.hpp"
#include "strek/metrics.hpp"
#include "strek/optim.hpp"
#include "strek/random.hpp"
#include "strek/tensor.hpp"

namespace strek {

struct RewardConfig {
  double d_max = 3.0;
  double r_n = 0.0;
  int avoidance_radius = 6;
  std::size_t max_samples = 1000;
  double stop_mass_threshold = 0.05;
  double temperature = 100.0;

  void validate() const {
    if (!(d_max > 0)) throw std::invalid_argument("reward config: d_max must be positive");
    if (avoidance_radius < 1) throw std::invalid_argument("reward config: avoidance_radius must be >= 1");
    if (!(stop_mass_threshold > 0 && stop_mass_threshold < 1))
      throw std::invalid_argument("reward config: stop_mass_threshold must be in (0,1)");
    if (!(temperature > 0)) throw std::invalid_argument("reward config: temperature must be positive");
    if (max_samples < 1) throw std::invalid_argument("reward config: max_samples must be >= 1");
  }
};

struct SampledKeypointSet {
  KeypointSet points;               // score = p(k) read from the normalized map
  std::vector<std::size_t> pixels;  // flat index row * W + col, same order
  bool stopped_early = false;
  double residual_mass = 1.0;
};

/// Draws keypoints one at a time with probability proportional to the
/// remaining weights, zeroing a square of half-width avoidance_radius around
/// each draw. Stops at max_samples or when the remaining mass falls below the
/// threshold. `probs` must already be normalized.
inline SampledKeypointSet sample_normalized(const Heatmap& probs, const RewardConfig& cfg, Rng& rng) {
  cfg.validate();
  const int H = static_cast<int>(probs.height), W = static_cast<int>(probs.width);
  std::vector<double> rem = probs.values;
  double mass = 0;
  for (double v : rem) mass += v;
  SampledKeypointSet out;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  while (true) {
    if (mass < cfg.stop_mass_threshold) {
      out.stopped_early = true;
      break;
    }
    if (out.points.size() >= cfg.max_samples) break;
    const double u = unit(rng) * mass;
    double cum = 0;
    std::size_t pick = rem.size();
    for (std::size_t i = 0; i < rem.size(); ++i) {
      if (rem[i] <= 0) continue;
      cum += rem[i];
      pick = i;
      if (cum > u) break;
    }
    if (pick == rem.size()) {
      out.stopped_early = true;
      break;
    }
    const int y = static_cast<int>(pick) / W, x = static_cast<int>(pick) % W;
    out.points.push_back({y, x, probs.values[pick], 1.0});
    out.pixels.push_back(pick);
    for (int yy = std::max(0, y - cfg.avoidance_radius); yy <= std::min(H - 1, y + cfg.avoidance_radius); ++yy)
      for (int xx = std::max(0, x - cfg.avoidance_radius); xx <= std::min(W - 1, x + cfg.avoidance_radius); ++xx) {
        double& v = rem[static_cast<std::size_t>(yy * W + xx)];
        mass -= v;
        v = 0;
      }
    mass = std::max(mass, 0.0);
  }
  out.residual_mass = mass;
  return out;
}

/// Normalizes a raw heatmap with the temperature softmax, then samples.
inline SampledKeypointSet sequential_sample(const Heatmap& raw, const RewardConfig& cfg, Rng& rng) {
  return sample_normalized(normalize_heatmap(raw, cfg.temperature), cfg, rng);
}

// ---------------------------------------------------------------------------
// Rewards
// ---------------------------------------------------------------------------

struct RewardRecord {
  double reward = 0;
  std::optional<double> distance;  // to the nearest keypoint of the other set
  bool repeatable = false;
  bool outside = false;  // projection left the other image: neutral reward 0
};

struct PairRewards {
  std::vector<RewardRecord> a, b;
};

inline std::vector<RewardRecord> directional_rewards(const KeypointSet& from, const KeypointSet& to,
                                                     const Homography& g, std::size_t to_h, std::size_t to_w,
                                                     const RewardConfig& cfg) {
  std::vector<RewardRecord> out;
  out.reserve(from.size());
  for (const auto& k : from) {
    RewardRecord r;
    const Point p = g.project(k.xy());
    if (!inside_image(p, to_h, to_w)) {
      r.outside = true;
      out.push_back(r);
      continue;
    }
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : to) best = std::min(best, (q.xy() - p).squaredNorm());
    if (std::isfinite(best)) r.distance = std::sqrt(best);
    if (r.distance && *r.distance <= cfg.d_max) {
      r.repeatable = true;
      r.reward = cfg.d_max - *r.distance;
    } else {
      r.reward = cfg.r_n;
    }
    out.push_back(r);
  }
  return out;
}

/// Rewards for both sets: A projected by g into B, B by g^-1 into A.
inline PairRewards compute_rewards(const KeypointSet& a, const KeypointSet& b, const Homography& g_ab,
                                   const RewardConfig& cfg, std::size_t h_a, std::size_t w_a, std::size_t h_b,
                                   std::size_t w_b) {
  return {directional_rewards(a, b, g_ab, h_b, w_b, cfg), directional_rewards(b, a, g_ab.inverse(), h_a, w_a, cfg)};
}

inline PairRewards compute_rewards(const SampledKeypointSet& a, const SampledKeypointSet& b, const Homography& g_ab,
                                   const RewardConfig& cfg, std::size_t h_a, std::size_t w_a, std::size_t h_b,
                                   std::size_t w_b) {
  return compute_rewards(a.points, b.points, g_ab, cfg, h_a, w_a, h_b, w_b);
}

// ---------------------------------------------------------------------------
// Surrogate loss and schedules
// ---------------------------------------------------------------------------

/// mean_k log p(k) * r_k for one image; undefined (nullopt) for no samples.
template <class T>
std::optional<Tensor<T>> reinforce_term(const Tensor<T>& probs, const SampledKeypointSet& s,
                                        const std::vector<RewardRecord>& rewards) {
  if (s.pixels.size() != rewards.size()) throw std::invalid_argument("reinforce: samples and rewards differ in length");
  if (s.pixels.empty()) return std::nullopt;
  const Tensor<T> p = gather_points(probs, s.pixels);
  std::vector<T> r(rewards.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = static_cast<T>(rewards[i].reward);
  const std::size_t n = r.size();
  return mean(mul(log(p), Tensor<T>(Shape{n}, std::move(r))));
}

/// -(mean_A log p r + mean_B log p r). Rewards are constants.
template <class T>
Tensor<T> policy_gradient_loss(const Tensor<T>& probs_a, const SampledKeypointSet& sa, const std::vector<RewardRecord>& ra,
                               const Tensor<T>& probs_b, const SampledKeypointSet& sb,
                               const std::vector<RewardRecord>& rb) {
  auto ta = reinforce_term(probs_a, sa, ra);
  auto tb = reinforce_term(probs_b, sb, rb);
  if (ta && tb) return scale(add(*ta, *tb), T(-1));
  if (ta) return scale(*ta, T(-1));
  if (tb) return scale(*tb, T(-1));
  return Tensor<T>::scalar(T(0));
}

/// 0 before `start`, then linear with the given slope.
inline double negative_reward_schedule(std::size_t iteration, std::size_t start = 1000, double slope = -1e-5) {
  if (iteration < start) return 0.0;
  return slope * static_cast<double>(iteration - start);
}

// ---------------------------------------------------------------------------
// Peaky + similarity baseline
// ---------------------------------------------------------------------------

/// mean over windows of 1 - (max - mean); windows of side `window` tiled
/// with stride window/2.
template <class T>
Tensor<T> peaky_term(const Tensor<T>& map, std::size_t window) {
  if (map.rank() != 2) throw ShapeError("peaky_term: expected [H,W], got " + shape_str(map.shape()));
  if (window > map.dim(0) || window > map.dim(1))
    throw std::invalid_argument("peaky loss: window " + std::to_string(window) + " larger than image " +
                                shape_str(map.shape()));
  const auto windows = tile_windows(map.dim(0), map.dim(1), window, std::max<std::size_t>(1, window / 2));
  const auto spread = sub(window_max(map, windows), window_mean(map, windows));
  return mean(add_scalar(scale(spread, T(-1)), T(1)));
}

/// Bilinear resampling of an A-frame map into B's frame: row i of the matrix
/// gives B pixel i as a combination of A pixels. `valid` marks B pixels whose
/// source lies inside A.
template <class T>
std::shared_ptr<const SparseMatrix<T>> warp_matrix(const Homography& g_ab, std::size_t h_a, std::size_t w_a,
                                                   std::size_t h_b, std::size_t w_b, std::vector<unsigned char>& valid) {
  auto m = std::make_shared<SparseMatrix<T>>();
  m->cols = h_a * w_a;
  valid.assign(h_b * w_b, 0);
  const Homography inv = g_ab.inverse();
  const double maxx = static_cast<double>(w_a) - 1, maxy = static_cast<double>(h_a) - 1;
  for (std::size_t r = 0; r < h_b; ++r)
    for (std::size_t c = 0; c < w_b; ++c) {
      const Eigen::Vector3d q = inv.matrix() * Eigen::Vector3d(static_cast<double>(c), static_cast<double>(r), 1.0);
      if (q.z() > 1e-12) {
        const double x = q.x() / q.z(), y = q.y() / q.z();
        if (x >= 0 && y >= 0 && x <= maxx && y <= maxy) {
          const auto x0 = static_cast<std::size_t>(std::floor(x)), y0 = static_cast<std::size_t>(std::floor(y));
          const std::size_t x1 = std::min(x0 + 1, w_a - 1), y1 = std::min(y0 + 1, h_a - 1);
          const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
          m->push(y0 * w_a + x0, static_cast<T>((1 - fx) * (1 - fy)));
          m->push(y0 * w_a + x1, static_cast<T>(fx * (1 - fy)));
          m->push(y1 * w_a + x0, static_cast<T>((1 - fx) * fy));
          m->push(y1 * w_a + x1, static_cast<T>(fx * fy));
          valid[r * w_b + c] = 1;
        }
      }
      m->end_row();
    }
  return m;
}

/// 1 - cosine similarity between map A warped into B and map B, restricted
/// to valid pixels.
template <class T>
Tensor<T> similarity_term(const Tensor<T>& map_a, const Tensor<T>& map_b, const Homography& g_ab) {
  if (map_a.rank() != 2 || map_b.rank() != 2) throw ShapeError("similarity_term: expected [H,W] maps");
  std::vector<unsigned char> valid;
  const auto wm = warp_matrix<T>(g_ab, map_a.dim(0), map_a.dim(1), map_b.dim(0), map_b.dim(1), valid);
  const std::size_t n = map_b.size();
  const Tensor<T> warped = sparse_linear(reshape(map_a, Shape{map_a.size()}), wm, Shape{n});
  const Tensor<T> mask(Shape{n}, std::vector<T>(valid.begin(), valid.end()));
  const Tensor<T> b = mul(reshape(map_b, Shape{n}), mask);
  const Tensor<T> ab = sum(mul(warped, b));
  const Tensor<T> norms = sqrt(mul(sum(mul(warped, warped)), sum(mul(b, b))));
  return add_scalar(scale(div(ab, add_scalar(norms, T(1e-12))), T(-1)), T(1));
}

/// Peaky term of both maps plus the similarity term. Maps are expected in
/// [0,1] (the trainer feeds sigmoid(D)).
template <class T>
Tensor<T> peaky_similarity_loss(const Tensor<T>& map_a, const Tensor<T>& map_b, const Homography& g_ab,
                                std::size_t window) {
  return add_n<T>({peaky_term(map_a, window), peaky_term(map_b, window), similarity_term(map_a, map_b, g_ab)});
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class DetectorLoss { sequential, peaky };

struct DetectorTrainConfig {
  DetectorConfig net;
  RewardConfig reward;
  DetectorLoss loss = DetectorLoss::sequential;
  std::size_t peaky_window = 64;
  std::size_t iterations = 5000;
  std::size_t batch_pairs = 4;
  AdamOptions adam;
  std::size_t negative_start = 1000;
  double negative_slope = -1e-5;
  std::size_t val_every = 100;
  std::size_t val_pairs = 16;
  std::uint64_t val_seed = 7919;
  double val_threshold = 2.0;
  PairParams data;
  std::uint64_t seed = 0;

  /// Detection settings matching the training normalization and spacing.
  DetectOptions detect_options() const {
    DetectOptions d;
    d.mode = SelectMode::adaptive;
    d.max_keypoints = reward.max_samples;
    d.avoidance_radius = reward.avoidance_radius;
    d.stop_mass = reward.stop_mass_threshold;
    d.temperature = reward.temperature;
    d.norm = loss == DetectorLoss::peaky ? HeatmapNorm::sigmoid_sum : HeatmapNorm::softmax;
    return d;
  }

  void apply(KeyValueConfig& kv) {
    const std::string arch = kv.get_string("arch", net.arch == DetectorArch::recnn ? "recnn" : "cnn");
    if (arch == "recnn") net.arch = DetectorArch::recnn;
    else if (arch == "cnn") net.arch = DetectorArch::cnn;
    else throw ConfigError("arch must be recnn or cnn, got '" + arch + "'");
    net.fields = static_cast<std::size_t>(kv.get_int("fields", static_cast<long long>(net.fields)));
    net.cnn_channels = static_cast<std::size_t>(kv.get_int("cnn_channels", static_cast<long long>(net.cnn_channels)));
    net.cyclicity = static_cast<int>(kv.get_int("cyclicity", net.cyclicity));
    net.max_frequency = static_cast<int>(kv.get_int("max_frequency", net.max_frequency));
    net.regular_layers = static_cast<std::size_t>(kv.get_int("regular_layers", static_cast<long long>(net.regular_layers)));
    net.kernel_size = static_cast<std::size_t>(kv.get_int("kernel_size", static_cast<long long>(net.kernel_size)));
    net.slope = kv.get_double("leaky_slope", net.slope);
    reward.d_max = kv.get_double("d_max", reward.d_max);
    reward.r_n = kv.get_double("r_n", reward.r_n);
    reward.avoidance_radius = static_cast<int>(kv.get_int("avoidance_radius", reward.avoidance_radius));
    reward.max_samples = static_cast<std::size_t>(kv.get_int("max_samples", static_cast<long long>(reward.max_samples)));
    reward.stop_mass_threshold = kv.get_double("stop_mass_threshold", reward.stop_mass_threshold);
    reward.temperature = kv.get_double("temperature", reward.temperature);
    const std::string l = kv.get_string("loss", loss == DetectorLoss::sequential ? "sequential" : "peaky");
    if (l == "sequential") loss = DetectorLoss::sequential;
    else if (l == "peaky") loss = DetectorLoss::peaky;
    else throw ConfigError("loss must be sequential or peaky, got '" + l + "'");
    peaky_window = static_cast<std::size_t>(kv.get_int("peaky_window", static_cast<long long>(peaky_window)));
    iterations = static_cast<std::size_t>(kv.get_int("iterations", static_cast<long long>(iterations)));
    batch_pairs = static_cast<std::size_t>(kv.get_int("batch_pairs", static_cast<long long>(batch_pairs)));
    adam.lr = kv.get_double("lr", adam.lr);
    adam.beta1 = kv.get_double("beta1", adam.beta1);
    adam.beta2 = kv.get_double("beta2", adam.beta2);
    adam.eps = kv.get_double("eps", adam.eps);
    negative_start = static_cast<std::size_t>(kv.get_int("negative_start", static_cast<long long>(negative_start)));
    negative_slope = kv.get_double("negative_slope", negative_slope);
    val_every = static_cast<std::size_t>(kv.get_int("val_every", static_cast<long long>(val_every)));
    val_pairs = static_cast<std::size_t>(kv.get_int("val_pairs", static_cast<long long>(val_pairs)));
    val_seed = static_cast<std::uint64_t>(kv.get_int("val_seed", static_cast<long long>(val_seed)));
    val_threshold = kv.get_double("val_threshold", val_threshold);
    const auto size = static_cast<std::size_t>(kv.get_int("image_size", static_cast<long long>(data.height)));
    data.height = data.width = size;
    data.noise_sigma = kv.get_double("noise_sigma", data.noise_sigma);
    seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(seed)));
    validate();
  }

  void validate() const {
    reward.validate();
    if (batch_pairs < 1) throw ConfigError("batch_pairs must be >= 1");
    if (loss == DetectorLoss::peaky && (peaky_window < 2 || peaky_window > std::min(data.height, data.width)))
      throw ConfigError("peaky_window must fit inside the image");
    if (!(adam.lr > 0)) throw ConfigError("lr must be positive");
  }
};

struct TrainLogRow {
  std::size_t iter = 0;
  double mean_reward = kNaN;
  double n_samples_a = 0;
  double n_samples_b = 0;
  double r_n = 0;
  double val_repeatability = kNaN;
};

inline void write_train_log(std::ostream& os, const std::vector<TrainLogRow>& rows) {
  os << "iter,mean_reward,n_samples_a,n_samples_b,r_n,val_repeatability\n";
  os << std::setprecision(9);
  for (const auto& r : rows)
    os << r.iter << ',' << r.mean_reward << ',' << r.n_samples_a << ',' << r.n_samples_b << ',' << r.r_n << ','
       << r.val_repeatability << '\n';
}

inline std::vector<TrainLogRow> read_train_log(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open training log " + path);
  std::string line;
  std::getline(is, line);
  std::vector<TrainLogRow> rows;
  auto num = [](const std::string& s) { return s == "nan" || s == "-nan" ? kNaN : std::stod(s); };
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[6];
    for (auto& x : f) std::getline(ss, x, ',');
    rows.push_back({static_cast<std::size_t>(std::stoull(f[0])), num(f[1]), num(f[2]), num(f[3]), num(f[4]), num(f[5])});
  }
  return rows;
}

struct ValidationSummary {
  double rep_max = kNaN;    // mean Rep-max at the validation threshold
  double rep_sym = kNaN;    // mean symmetric repeatability
  double mean_keypoints = 0;
};

/// Held-out pairs drawn from their own seed so every variant sees the same set.
inline std::vector<ImagePair> validation_pairs(const PairParams& params, std::size_t count, std::uint64_t seed) {
  std::vector<ImagePair> out;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = make_rng(seed, {0x7a11da7e, i});
    out.push_back(gen_pair(rng, params));
  }
  return out;
}

template <class T>
std::vector<EvalPair> detect_pairs(const DetectorNet<T>& net, const std::vector<ImagePair>& pairs, const DetectOptions& opt) {
  std::vector<EvalPair> out;
  for (const auto& p : pairs) {
    EvalPair e;
    e.a = detect(net, p.image_a, opt);
    e.b = detect(net, p.image_b, opt);
    e.a_to_b = p.a_to_b;
    e.height_a = p.image_a.height;
    e.width_a = p.image_a.width;
    e.height_b = p.image_b.height;
    e.width_b = p.image_b.width;
    out.push_back(std::move(e));
  }
  return out;
}

inline ValidationSummary summarize_repeatability(const std::vector<EvalPair>& pairs, double threshold) {
  ValidationSummary s;
  double sum_max = 0, sum_sym = 0, kp = 0;
  std::size_t n_max = 0, n_sym = 0;
  for (const auto& e : pairs) {
    const auto r = repeatability(e, threshold);
    if (std::isfinite(r.max)) {
      sum_max += r.max;
      ++n_max;
    }
    if (std::isfinite(r.symmetric)) {
      sum_sym += r.symmetric;
      ++n_sym;
    }
    kp += static_cast<double>(e.a.size() + e.b.size());
  }
  if (n_max) s.rep_max = sum_max / static_cast<double>(n_max);
  if (n_sym) s.rep_sym = sum_sym / static_cast<double>(n_sym);
  if (!pairs.empty()) s.mean_keypoints = kp / (2.0 * static_cast<double>(pairs.size()));
  return s;
}

template <class T>
ValidationSummary validate_detector(const DetectorNet<T>& net, const std::vector<ImagePair>& pairs,
                                    const DetectOptions& opt, double threshold) {
  return summarize_repeatability(detect_pairs(net, pairs, opt), threshold);
}

class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Source of training pairs: index -> pair. The default draws fresh
/// synthetic pairs from (seed, index).
using PairSource = std::function<ImagePair(std::uint64_t index)>;

inline PairSource synthetic_pair_source(const PairParams& params, std::uint64_t seed) {
  return [params, seed](std::uint64_t index) {
    Rng rng = make_rng(seed, {0xda7a, index});
    return gen_pair(rng, params);
  };
}

struct TrainHooks {
  std::vector<std::size_t> snapshot_at;  // iteration counts
  std::function<void(std::size_t, const ParameterSet<float>&)> on_snapshot;
  std::string state_path;  // resumable state, empty to disable
  std::size_t state_every = 250;
  std::string abort_checkpoint = "detector_abort.strk";
  std::ostream* progress = nullptr;
  std::size_t progress_every = 50;
};

struct DetectorTrainResult {
  std::vector<TrainLogRow> log;
};

/// Trains the detector in place. Deterministic for a fixed config: all
/// randomness derives from cfg.seed split per (iteration, pair, image).
inline DetectorTrainResult train_detector(DetectorNet<float>& net, const DetectorTrainConfig& cfg, const PairSource& source,
                                          const TrainHooks& hooks = {}) {
  cfg.validate();
  auto& params = net.params();
  Adam<float> adam(cfg.adam);
  DetectorTrainResult result;
  std::size_t start = 0;
  if (!hooks.state_path.empty() && std::filesystem::exists(hooks.state_path)) {
    start = static_cast<std::size_t>(load_training_state(hooks.state_path, params, adam));
    const std::string log_path = hooks.state_path + ".log";
    if (std::filesystem::exists(log_path))
      for (const auto& row : read_train_log(log_path))
        if (row.iter < start) result.log.push_back(row);
    if (result.log.size() != start) throw FormatError("training state log is inconsistent with " + hooks.state_path);
    if (hooks.progress) *hooks.progress << "resuming detector training at iteration " << start << "\n";
  }
  const auto val = validation_pairs(cfg.data, cfg.val_pairs, cfg.val_seed);
  const DetectOptions det = cfg.detect_options();
  const float inv_batch = 1.0f / static_cast<float>(cfg.batch_pairs);
  ParameterSet<float> last_good;
  for (const auto& p : params.items()) last_good.add(p.name, p.tensor.shape(), p.tensor.values());

  auto save_state = [&](std::size_t done) {
    if (hooks.state_path.empty()) return;
    save_training_state(hooks.state_path, done, params, adam);
    std::ofstream os(hooks.state_path + ".log");
    write_train_log(os, result.log);
  };
  auto abort = [&](const std::string& why, std::size_t iter) {
    params.copy_values_from(last_good);
    save_checkpoint(hooks.abort_checkpoint, params);
    throw TrainingAborted("detector training aborted at iteration " + std::to_string(iter) + ": " + why +
                          " (last good state saved to " + hooks.abort_checkpoint + ")");
  };

  for (std::size_t it = start; it < cfg.iterations; ++it) {
    RewardConfig rc = cfg.reward;
    rc.r_n = cfg.reward.r_n + negative_reward_schedule(it, cfg.negative_start, cfg.negative_slope);
    TrainLogRow row;
    row.iter = it;
    row.r_n = rc.r_n;
    double reward_sum = 0, loss_sum = 0;
    std::size_t reward_n = 0;
    params.zero_grad();
    for (std::size_t b = 0; b < cfg.batch_pairs; ++b) {
      const ImagePair pair = source(static_cast<std::uint64_t>(it * cfg.batch_pairs + b));
      const Tensor<float> da = net.forward(pair.image_a);
      const Tensor<float> db = net.forward(pair.image_b);
      for (const auto* d : {&da, &db})
        if (!std::all_of(d->values().begin(), d->values().end(), [](float v) { return std::isfinite(v); }))
          abort("non-finite heatmap", it);
      Tensor<float> loss;
      if (cfg.loss == DetectorLoss::sequential) {
        const Tensor<float> pa = softmax_temperature(da, static_cast<float>(rc.temperature));
        const Tensor<float> pb = softmax_temperature(db, static_cast<float>(rc.temperature));
        Rng rng_a = make_rng(cfg.seed, {it, b, 0});
        Rng rng_b = make_rng(cfg.seed, {it, b, 1});
        const auto sa = sample_normalized(Heatmap::from_tensor(pa, rc.temperature), rc, rng_a);
        const auto sb = sample_normalized(Heatmap::from_tensor(pb, rc.temperature), rc, rng_b);
        const auto rw = compute_rewards(sa, sb, pair.a_to_b, rc, pair.image_a.height, pair.image_a.width,
                                        pair.image_b.height, pair.image_b.width);
        for (const auto* list : {&rw.a, &rw.b})
          for (const auto& r : *list) {
            reward_sum += r.reward;
            ++reward_n;
          }
        row.n_samples_a += static_cast<double>(sa.points.size()) / static_cast<double>(cfg.batch_pairs);
        row.n_samples_b += static_cast<double>(sb.points.size()) / static_cast<double>(cfg.batch_pairs);
        loss = policy_gradient_loss(pa, sa, rw.a, pb, sb, rw.b);
      } else {
        loss = peaky_similarity_loss(sigmoid(da), sigmoid(db), pair.a_to_b, cfg.peaky_window);
      }
      if (!std::isfinite(loss.item())) abort("non-finite loss", it);
      loss_sum += loss.item();
      backward(scale(loss, inv_batch));
    }
    row.mean_reward = cfg.loss == DetectorLoss::sequential ? (reward_n ? reward_sum / static_cast<double>(reward_n) : 0.0)
                                                           : kNaN;
    for (const auto& p : params.items()) {
      if (!p.tensor.has_grad()) continue;
      for (float g : p.tensor.grad())
        if (!std::isfinite(g)) abort("non-finite gradient in " + p.name, it);
    }
    for (auto& p : params.items())
      if (!p.tensor.has_grad()) p.tensor.mutable_grad();
    adam.step(params);
    if (!params.all_finite()) abort("non-finite parameters", it);
    last_good.copy_values_from(params);

    const std::size_t done = it + 1;
    double val_keypoints = kNaN;
    if (cfg.val_every > 0 && (done % cfg.val_every == 0 || done == cfg.iterations)) {
      const auto v = validate_detector(net, val, det, cfg.val_threshold);
      row.val_repeatability = v.rep_max;
      val_keypoints = v.mean_keypoints;
    }
    result.log.push_back(row);
    if (hooks.progress && (done % hooks.progress_every == 0 || done == cfg.iterations)) {
      *hooks.progress << "detector iter " << done << "/" << cfg.iterations << " loss " << loss_sum / static_cast<double>(cfg.batch_pairs)
                      << " reward " << row.mean_reward << " samples " << row.n_samples_a << "/" << row.n_samples_b;
      if (std::isfinite(row.val_repeatability))
        *hooks.progress << " val_rep " << row.val_repeatability << " val_kp " << val_keypoints;
      *hooks.progress << std::endl;
    }
    if (hooks.on_snapshot && std::find(hooks.snapshot_at.begin(), hooks.snapshot_at.end(), done) != hooks.snapshot_at.end())
      hooks.on_snapshot(done, params);
    if (hooks.state_every > 0 && (done % hooks.state_every == 0 || done == cfg.iterations)) save_state(done);
  }
  return result;
}

}  // namespace strek
