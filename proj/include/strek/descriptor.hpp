#pragma once

// Dense descriptor extractor: a small four-level U-Net with one convolution
// per level and an L2-normalized 1x1 head, trained with a hinged triplet
// loss at keypoints chosen by a frozen detector.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "strek/checkpoint.hpp"
#include "strek/config.hpp"
#include "strek/detector.hpp"
#include "strek/equivariant.hpp"
#include "strek/geometry.hpp"
#include "strek/metrics.hpp"
#include "strek/optim.hpp"
#include "strek/random.hpp"
#include "strek/tensor.hpp"

namespace strek {

struct DescriptorConfig {
  std::vector<std::size_t> widths{8, 16, 32, 64};  // encoder channels per level
  std::size_t dim = 128;
  std::size_t kernel_size = 3;

  std::size_t divisor() const { return std::size_t{1} << (widths.size() - 1); }
};

template <class T>
class DescriptorNet {
 public:
  explicit DescriptorNet(const DescriptorConfig& cfg = {}, std::uint64_t seed = 0) : cfg_(cfg) {
    if (cfg.widths.size() < 2) throw std::invalid_argument("descriptor: need at least two levels");
    if (cfg.dim == 0) throw std::invalid_argument("descriptor: dimension must be positive");
    Rng rng(derive_seed(seed, {0xde5c}));
    const std::size_t L = cfg.widths.size();
    for (std::size_t i = 0; i < L; ++i) {
      enc_.emplace_back(i == 0 ? 1 : cfg.widths[i - 1], cfg.widths[i], cfg.kernel_size);
      enc_.back().register_parameters(params_, "desc.enc" + std::to_string(i), rng);
    }
    for (std::size_t i = L - 1; i-- > 0;) {
      dec_.emplace_back(cfg.widths[i + 1] + cfg.widths[i], cfg.widths[i], cfg.kernel_size);
      dec_.back().register_parameters(params_, "desc.dec" + std::to_string(i), rng);
    }
    head_ = PlainConvLayer<T>(cfg.widths[0], cfg.dim, 1);
    head_.register_parameters(params_, "desc.head", rng, 1.0);
    // A nonzero head bias keeps all-zero feature columns (flat image
    // regions with dead units) away from the normalization singularity.
    auto& bias = params_.items().back().tensor;
    std::normal_distribution<double> nd(0.0, 0.1);
    for (auto& v : bias.values()) v = static_cast<T>(nd(rng));
  }

  DescriptorNet(const DescriptorNet&) = delete;
  DescriptorNet& operator=(const DescriptorNet&) = delete;

  const DescriptorConfig& config() const { return cfg_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }
  std::size_t parameter_count() const { return params_.count(); }

  /// [1,H,W] -> [d,H,W], unit norm along d.
  Tensor<T> forward(const Tensor<T>& image) const {
    const std::size_t div = cfg_.divisor();
    if (image.rank() != 3 || image.dim(0) != 1)
      throw ShapeError("descriptor: expected a single-channel [1,H,W] image, got " + shape_str(image.shape()));
    if (image.dim(1) % div != 0 || image.dim(2) % div != 0)
      throw ShapeError("descriptor: image " + std::to_string(image.dim(1)) + "x" + std::to_string(image.dim(2)) +
                       " must have sides divisible by " + std::to_string(div) + "; pad it first (pad_to_multiple)");
    std::vector<Tensor<T>> skips;
    Tensor<T> x = image;
    for (std::size_t i = 0; i < enc_.size(); ++i) {
      if (i > 0) x = max_pool2(x);
      x = relu(enc_[i].forward(x));
      skips.push_back(x);
    }
    for (std::size_t j = 0; j < dec_.size(); ++j) {
      const std::size_t level = enc_.size() - 2 - j;
      x = relu(dec_[j].forward(concat_channels(upsample2(x), skips[level])));
    }
    return l2_normalize_channels(head_.forward(x));
  }

  Tensor<T> forward(const Image& image) const { return forward(image.template to_tensor<T>()); }

 private:
  DescriptorConfig cfg_;
  ParameterSet<T> params_;
  std::vector<PlainConvLayer<T>> enc_, dec_;
  PlainConvLayer<T> head_{1, 1, 1};
};

/// Dense descriptors stored channel-major [d][H][W].
struct DescriptorVolume {
  std::size_t height = 0, width = 0, dim = 0;
  std::vector<float> values;

  float at(std::size_t ch, std::size_t r, std::size_t c) const { return values[(ch * height + r) * width + c]; }

  Eigen::VectorXf descriptor(std::size_t r, std::size_t c) const {
    if (r >= height || c >= width) throw std::out_of_range("descriptor: pixel outside volume");
    Eigen::VectorXf v(dim);
    for (std::size_t ch = 0; ch < dim; ++ch) v[static_cast<Eigen::Index>(ch)] = at(ch, r, c);
    return v;
  }

  /// One row per keypoint, read at the integer keypoint location.
  DescriptorMatrix gather(const KeypointSet& kps) const {
    DescriptorMatrix m(static_cast<Eigen::Index>(kps.size()), static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < kps.size(); ++i) {
      if (kps[i].row < 0 || kps[i].col < 0) throw std::out_of_range("descriptor: negative keypoint coordinate");
      const auto r = static_cast<std::size_t>(kps[i].row), c = static_cast<std::size_t>(kps[i].col);
      if (r >= height || c >= width) throw std::out_of_range("descriptor: keypoint outside volume");
      for (std::size_t ch = 0; ch < dim; ++ch) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(ch)) = at(ch, r, c);
    }
    return m;
  }
};

template <class T>
DescriptorVolume to_volume(const Tensor<T>& v) {
  if (v.rank() != 3) throw ShapeError("descriptor volume: expected [d,H,W], got " + shape_str(v.shape()));
  return {v.dim(1), v.dim(2), v.dim(0), std::vector<float>(v.values().begin(), v.values().end())};
}

template <class T>
DescriptorVolume extract(const DescriptorNet<T>& net, const Image& image) {
  NoGradGuard guard;
  return to_volume(net.forward(image));
}

/// Zero-pads bottom and right so both sides are multiples of `multiple`.
inline Image pad_to_multiple(const Image& image, std::size_t multiple) {
  const std::size_t h = (image.height + multiple - 1) / multiple * multiple;
  const std::size_t w = (image.width + multiple - 1) / multiple * multiple;
  Image out(h, w, 0.0f);
  for (std::size_t r = 0; r < image.height; ++r)
    for (std::size_t c = 0; c < image.width; ++c) out.at(r, c) = image.at(r, c);
  return out;
}

/// extract() on any image size: pads, runs and crops back.
template <class T>
DescriptorVolume extract_padded(const DescriptorNet<T>& net, const Image& image) {
  const DescriptorVolume full = extract(net, pad_to_multiple(image, net.config().divisor()));
  if (full.height == image.height && full.width == image.width) return full;
  DescriptorVolume out{image.height, image.width, full.dim, std::vector<float>(full.dim * image.height * image.width)};
  for (std::size_t ch = 0; ch < full.dim; ++ch)
    for (std::size_t r = 0; r < image.height; ++r)
      for (std::size_t c = 0; c < image.width; ++c) out.values[(ch * image.height + r) * image.width + c] = full.at(ch, r, c);
  return out;
}

// ---------------------------------------------------------------------------
// Triplets
// ---------------------------------------------------------------------------

struct TripletPoint {
  int image = 0;  // 0 = A, 1 = B
  std::size_t row = 0, col = 0;
};

struct Triplet {
  TripletPoint anchor, positive, negative;
  std::size_t anchor_index = 0, positive_index = 0, negative_index = 0;  // into the keypoint sets
  double s_p = 0, s_n = 0;
};

/// Anchors from `ka` (image `anchor_image`), positives and negatives from
/// `kb` in the other image. A positive is the closest keypoint within
/// `radius` of the anchor's projection; negatives are the keypoints farther
/// than `radius` from it. With probability `random_negative_prob` the
/// negative is uniform among them, otherwise the most similar one.
inline std::vector<Triplet> build_triplets(const DescriptorMatrix& da, const DescriptorMatrix& db, const KeypointSet& ka,
                                           const KeypointSet& kb, const Homography& g_ab, std::size_t h_b, std::size_t w_b,
                                           double radius, Rng& rng, double random_negative_prob, int anchor_image = 0) {
  if (static_cast<std::size_t>(da.rows()) != ka.size() || static_cast<std::size_t>(db.rows()) != kb.size())
    throw std::invalid_argument("build_triplets: descriptor rows do not match keypoint counts");
  if (!(radius > 0)) throw std::invalid_argument("build_triplets: radius must be positive");
  const double r2 = radius * radius;
  std::bernoulli_distribution pick_random(std::clamp(random_negative_prob, 0.0, 1.0));
  std::vector<Triplet> out;
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < ka.size(); ++i) {
    const Point p = g_ab.project(ka[i].xy());
    if (!inside_image(p, h_b, w_b)) continue;
    std::size_t pos = kb.size();
    double best = r2;
    candidates.clear();
    for (std::size_t j = 0; j < kb.size(); ++j) {
      const double d2 = (kb[j].xy() - p).squaredNorm();
      if (d2 <= best) {
        best = d2;
        pos = j;
      }
      if (d2 > r2) candidates.push_back(j);
    }
    if (pos == kb.size() || candidates.size() < 2) continue;
    std::size_t neg = candidates.front();
    const bool random = pick_random(rng);
    if (random) {
      neg = candidates[std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng)];
    } else {
      float best_s = -std::numeric_limits<float>::infinity();
      for (std::size_t j : candidates) {
        const float s = da.row(static_cast<Eigen::Index>(i)).dot(db.row(static_cast<Eigen::Index>(j)));
        if (s > best_s) {
          best_s = s;
          neg = j;
        }
      }
    }
    Triplet t;
    const int other = 1 - anchor_image;
    t.anchor = {anchor_image, static_cast<std::size_t>(ka[i].row), static_cast<std::size_t>(ka[i].col)};
    t.positive = {other, static_cast<std::size_t>(kb[pos].row), static_cast<std::size_t>(kb[pos].col)};
    t.negative = {other, static_cast<std::size_t>(kb[neg].row), static_cast<std::size_t>(kb[neg].col)};
    t.anchor_index = i;
    t.positive_index = pos;
    t.negative_index = neg;
    t.s_p = da.row(static_cast<Eigen::Index>(i)).dot(db.row(static_cast<Eigen::Index>(pos)));
    t.s_n = da.row(static_cast<Eigen::Index>(i)).dot(db.row(static_cast<Eigen::Index>(neg)));
    out.push_back(t);
  }
  return out;
}

inline std::vector<Triplet> build_triplets(const DescriptorVolume& va, const DescriptorVolume& vb, const KeypointSet& ka,
                                           const KeypointSet& kb, const Homography& g_ab, double radius, Rng& rng,
                                           double random_negative_prob) {
  return build_triplets(va.gather(ka), vb.gather(kb), ka, kb, g_ab, vb.height, vb.width, radius, rng, random_negative_prob);
}

/// Mean of max(0, m + s_n - s_p) over the given score vectors.
template <class T>
Tensor<T> triplet_loss(const Tensor<T>& s_p, const Tensor<T>& s_n, double margin, std::ostream* warn = &std::cerr) {
  if (s_p.shape() != s_n.shape()) throw ShapeError("triplet_loss: " + shape_str(s_p.shape()) + " vs " + shape_str(s_n.shape()));
  if (s_p.size() == 0) {
    if (warn) *warn << "warning: empty triplet pool, loss is 0\n";
    return Tensor<T>(Shape{}, T(0));
  }
  return mean(relu(add_scalar(sub(s_n, s_p), static_cast<T>(margin))));
}

/// Differentiable s_p, s_n for triplets whose anchors all lie in the image
/// of `anchor_volume`.
template <class T>
std::pair<Tensor<T>, Tensor<T>> triplet_scores(const Tensor<T>& anchor_volume, const Tensor<T>& other_volume,
                                               const std::vector<Triplet>& triplets) {
  const std::size_t w_a = anchor_volume.dim(2), w_b = other_volume.dim(2);
  std::vector<std::size_t> ia, ip, in;
  for (const auto& t : triplets) {
    ia.push_back(t.anchor.row * w_a + t.anchor.col);
    ip.push_back(t.positive.row * w_b + t.positive.col);
    in.push_back(t.negative.row * w_b + t.negative.col);
  }
  const Tensor<T> a = gather_points(anchor_volume, ia);
  const Tensor<T> p = gather_points(other_volume, ip);
  const Tensor<T> n = gather_points(other_volume, in);
  return {sum_axis(mul(a, p), 1), sum_axis(mul(a, n), 1)};
}

/// Loss over triplets anchored in either image of a pair.
template <class T>
Tensor<T> triplet_loss(const Tensor<T>& vol_a, const Tensor<T>& vol_b, const std::vector<Triplet>& triplets, double margin,
                       std::ostream* warn = &std::cerr) {
  std::vector<Triplet> from_a, from_b;
  for (const auto& t : triplets) (t.anchor.image == 0 ? from_a : from_b).push_back(t);
  if (triplets.empty()) return triplet_loss(Tensor<T>(Shape{0}), Tensor<T>(Shape{0}), margin, warn);
  std::vector<Tensor<T>> sums;
  for (int side = 0; side < 2; ++side) {
    const auto& list = side == 0 ? from_a : from_b;
    if (list.empty()) continue;
    const auto [sp, sn] = side == 0 ? triplet_scores(vol_a, vol_b, list) : triplet_scores(vol_b, vol_a, list);
    sums.push_back(sum(relu(add_scalar(sub(sn, sp), static_cast<T>(margin)))));
  }
  return scale(add_n(sums), static_cast<T>(1.0 / static_cast<double>(triplets.size())));
}

/// Probability of drawing a random (instead of hardest) negative.
inline double random_negative_schedule(std::size_t iteration, double tau = 2000.0, std::size_t cutoff = 10000) {
  if (iteration >= cutoff) return 0.0;
  return std::exp(-static_cast<double>(iteration) / tau);
}

// ---------------------------------------------------------------------------
// Feature files
// ---------------------------------------------------------------------------

struct FeatureSet {
  KeypointSet keypoints;
  DescriptorMatrix descriptors;  // one row per keypoint
};

inline void write_features_csv(std::ostream& os, const FeatureSet& f) {
  const auto d = static_cast<std::size_t>(f.descriptors.cols());
  if (static_cast<std::size_t>(f.descriptors.rows()) != f.keypoints.size())
    throw std::invalid_argument("features: descriptor rows do not match keypoints");
  os << "row,col,score,scale";
  for (std::size_t j = 0; j < d; ++j) os << ",desc" << j;
  os << "\n";
  for (std::size_t i = 0; i < f.keypoints.size(); ++i) {
    const auto& k = f.keypoints[i];
    os << k.row << "," << k.col << "," << std::setprecision(17) << k.score << "," << k.scale << std::setprecision(9);
    for (std::size_t j = 0; j < d; ++j) os << "," << f.descriptors(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    os << "\n";
  }
}

inline FeatureSet read_features_csv(std::istream& is, const std::string& source = "<features>") {
  std::string line;
  if (!std::getline(is, line) || line.rfind("row,col,score,scale", 0) != 0)
    throw FormatError(source + ": missing feature header");
  const std::size_t d = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) - 3;
  FeatureSet f;
  std::vector<std::vector<float>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string tok;
    std::vector<std::string> cells;
    while (std::getline(ss, tok, ',')) cells.push_back(tok);
    if (cells.size() != d + 4) throw FormatError(source + ": bad feature row '" + line.substr(0, 40) + "'");
    try {
      f.keypoints.push_back({std::stoi(cells[0]), std::stoi(cells[1]), std::stod(cells[2]), std::stod(cells[3])});
      std::vector<float> v(d);
      for (std::size_t j = 0; j < d; ++j) v[j] = std::stof(cells[4 + j]);
      rows.push_back(std::move(v));
    } catch (const std::logic_error&) {
      throw FormatError(source + ": unparsable feature row");
    }
  }
  f.descriptors.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) f.descriptors(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return f;
}

inline void write_features_binary(std::ostream& os, const FeatureSet& f) {
  if (static_cast<std::size_t>(f.descriptors.rows()) != f.keypoints.size())
    throw std::invalid_argument("features: descriptor rows do not match keypoints");
  os.write("STRD", 4);
  io::write_u64(os, f.keypoints.size());
  io::write_u32(os, static_cast<std::uint32_t>(f.descriptors.cols()));
  for (std::size_t i = 0; i < f.keypoints.size(); ++i) {
    const auto& k = f.keypoints[i];
    io::write_i32(os, k.row);
    io::write_i32(os, k.col);
    io::write_f64(os, k.score);
    io::write_f64(os, k.scale);
    for (Eigen::Index j = 0; j < f.descriptors.cols(); ++j) io::write_f32(os, f.descriptors(static_cast<Eigen::Index>(i), j));
  }
}

inline FeatureSet read_features_binary(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "STRD") throw FormatError("features: bad magic (expected STRD)");
  const std::uint64_t n = io::read_u64(is);
  const std::uint32_t d = io::read_u32(is);
  FeatureSet f;
  f.descriptors.resize(static_cast<Eigen::Index>(n), d);
  for (std::uint64_t i = 0; i < n; ++i) {
    Keypoint k;
    k.row = io::read_i32(is);
    k.col = io::read_i32(is);
    k.score = io::read_f64(is);
    k.scale = io::read_f64(is);
    f.keypoints.push_back(k);
    for (std::uint32_t j = 0; j < d; ++j) f.descriptors(static_cast<Eigen::Index>(i), j) = io::read_f32(is);
  }
  return f;
}

inline void write_features(const std::string& path, const FeatureSet& f) {
  const bool binary = std::filesystem::path(path).extension() == ".strd";
  std::ofstream os(path, binary ? std::ios::binary : std::ios::out);
  if (!os) throw std::runtime_error("cannot write " + path);
  binary ? write_features_binary(os, f) : write_features_csv(os, f);
}

inline FeatureSet read_features(const std::string& path) {
  const bool binary = std::filesystem::path(path).extension() == ".strd";
  std::ifstream is(path, binary ? std::ios::binary : std::ios::in);
  if (!is) throw std::runtime_error("cannot read " + path);
  return binary ? read_features_binary(is) : read_features_csv(is, path);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct DetectedPair {
  ImagePair pair;
  KeypointSet a, b;
};

struct DescriptorTrainConfig {
  DescriptorConfig net;
  std::size_t iterations = 10000;
  std::size_t batch_pairs = 4;
  AdamOptions adam;
  double margin = 0.5;
  double pairing_radius = 3.0;
  double negative_tau = 2000.0;
  std::size_t negative_cutoff = 10000;
  double rotation_deg = 30.0;
  std::size_t pool_size = 2000;  // detected training pairs, cycled through
  std::size_t val_every = 500;
  std::size_t val_pairs = 16;
  std::uint64_t val_seed = 104729;
  double val_threshold = 3.0;
  PairParams data;
  std::uint64_t seed = 0;

  PairParams augmented_data() const {
    PairParams p = data;
    p.extra_rotation_deg = rotation_deg;
    return p;
  }

  void apply(KeyValueConfig& kv) {
    std::vector<long long> w(net.widths.begin(), net.widths.end());
    w = kv.get_int_list("widths", w);
    for (long long x : w)
      if (x < 1) throw ConfigError("widths must be positive");
    net.widths.assign(w.begin(), w.end());
    net.dim = static_cast<std::size_t>(kv.get_int("dim", static_cast<long long>(net.dim)));
    net.kernel_size = static_cast<std::size_t>(kv.get_int("kernel_size", static_cast<long long>(net.kernel_size)));
    iterations = static_cast<std::size_t>(kv.get_int("iterations", static_cast<long long>(iterations)));
    batch_pairs = static_cast<std::size_t>(kv.get_int("batch_pairs", static_cast<long long>(batch_pairs)));
    adam.lr = kv.get_double("lr", adam.lr);
    adam.beta1 = kv.get_double("beta1", adam.beta1);
    adam.beta2 = kv.get_double("beta2", adam.beta2);
    adam.eps = kv.get_double("eps", adam.eps);
    margin = kv.get_double("margin", margin);
    pairing_radius = kv.get_double("pairing_radius", pairing_radius);
    negative_tau = kv.get_double("negative_tau", negative_tau);
    negative_cutoff = static_cast<std::size_t>(kv.get_int("negative_cutoff", static_cast<long long>(negative_cutoff)));
    rotation_deg = kv.get_double("rotation_deg", rotation_deg);
    pool_size = static_cast<std::size_t>(kv.get_int("pool_size", static_cast<long long>(pool_size)));
    val_every = static_cast<std::size_t>(kv.get_int("val_every", static_cast<long long>(val_every)));
    val_pairs = static_cast<std::size_t>(kv.get_int("val_pairs", static_cast<long long>(val_pairs)));
    val_seed = static_cast<std::uint64_t>(kv.get_int("val_seed", static_cast<long long>(val_seed)));
    val_threshold = kv.get_double("val_threshold", val_threshold);
    const auto size = static_cast<std::size_t>(kv.get_int("image_size", static_cast<long long>(data.height)));
    data.height = data.width = size;
    data.noise_sigma = kv.get_double("noise_sigma", data.noise_sigma);
    seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(seed)));
    if (net.widths.size() < 2) throw ConfigError("widths needs at least two levels");
    if (net.dim < 1 || net.kernel_size % 2 == 0) throw ConfigError("dim must be positive and kernel_size odd");
    if (!(adam.lr > 0)) throw ConfigError("lr must be positive");
    validate();
  }

  void validate() const {
    if (iterations > 0 && batch_pairs == 0) throw std::invalid_argument("descriptor training: batch_pairs must be positive");
    if (!(margin >= 0)) throw std::invalid_argument("descriptor training: margin must be non-negative");
    if (!(pairing_radius > 0)) throw std::invalid_argument("descriptor training: pairing radius must be positive");
    if (!(negative_tau > 0)) throw std::invalid_argument("descriptor training: negative_tau must be positive");
    if (rotation_deg < 0 || rotation_deg > 180) throw std::invalid_argument("descriptor training: rotation_deg in [0,180]");
    if (pool_size == 0) throw std::invalid_argument("descriptor training: pool_size must be positive");
    if (data.height % net.divisor() != 0 || data.width % net.divisor() != 0)
      throw std::invalid_argument("descriptor training: image size must be divisible by " + std::to_string(net.divisor()));
  }
};

struct DescriptorLogRow {
  std::size_t iter = 0;
  double loss = 0;
  double n_triplets = 0;
  double random_negative_prob = 0;
  double val_mma = kNaN;
  double val_ms = kNaN;
};

inline void write_descriptor_log(std::ostream& os, const std::vector<DescriptorLogRow>& rows) {
  os << "iter,loss,n_triplets,random_negative_prob,val_mma,val_ms\n" << std::setprecision(9);
  for (const auto& r : rows)
    os << r.iter << "," << r.loss << "," << r.n_triplets << "," << r.random_negative_prob << "," << r.val_mma << "," << r.val_ms
       << "\n";
}

inline std::vector<DescriptorLogRow> read_descriptor_log(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::string line;
  std::getline(is, line);
  std::vector<DescriptorLogRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> c;
    while (std::getline(ss, cell, ',')) c.push_back(cell);
    if (c.size() != 6) throw FormatError(path + ": bad descriptor log row");
    auto num = [](const std::string& s) { return s == "nan" || s == "-nan" ? kNaN : std::stod(s); };
    rows.push_back({static_cast<std::size_t>(std::stoull(c[0])), num(c[1]), num(c[2]), num(c[3]), num(c[4]), num(c[5])});
  }
  return rows;
}

/// Draws `count` pairs from (seed, tag, index) and detects keypoints on both.
template <class D>
std::vector<DetectedPair> detected_pairs(const DetectorNet<D>& detector, const DetectOptions& opt, const PairParams& params,
                                         std::size_t count, std::uint64_t seed, std::uint64_t tag) {
  std::vector<DetectedPair> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = make_rng(seed, {tag, i});
    DetectedPair d;
    d.pair = gen_pair(rng, params);
    d.a = detect(detector, d.pair.image_a, opt);
    d.b = detect(detector, d.pair.image_b, opt);
    out.push_back(std::move(d));
  }
  return out;
}

inline EvalPair to_eval_pair(const DetectedPair& d) {
  EvalPair e;
  e.a = d.a;
  e.b = d.b;
  e.a_to_b = d.pair.a_to_b;
  e.height_a = d.pair.image_a.height;
  e.width_a = d.pair.image_a.width;
  e.height_b = d.pair.image_b.height;
  e.width_b = d.pair.image_b.width;
  return e;
}

struct DescriptorSummary {
  double mma = kNaN;  // mean over pairs with at least one match
  double ms = kNaN;
  double mean_matches = 0;
};

template <class T>
DescriptorSummary evaluate_descriptor(const DescriptorNet<T>& net, const std::vector<DetectedPair>& pairs, double threshold) {
  DescriptorSummary s;
  double sum_mma = 0, sum_ms = 0, matches = 0;
  std::size_t n_mma = 0, n_ms = 0;
  for (const auto& d : pairs) {
    EvalPair e = to_eval_pair(d);
    e.desc_a = extract(net, d.pair.image_a).gather(d.a);
    e.desc_b = extract(net, d.pair.image_b).gather(d.b);
    const auto m = mnn_match(e.desc_a, e.desc_b);
    matches += static_cast<double>(m.size());
    const auto a = mma(e, m, threshold);
    if (a.defined) {
      sum_mma += a.value;
      ++n_mma;
    }
    const auto b = matching_score(e, m, threshold);
    if (b.defined) {
      sum_ms += b.value;
      ++n_ms;
    }
  }
  if (n_mma) s.mma = sum_mma / static_cast<double>(n_mma);
  if (n_ms) s.ms = sum_ms / static_cast<double>(n_ms);
  if (!pairs.empty()) s.mean_matches = matches / static_cast<double>(pairs.size());
  return s;
}

struct DescriptorTrainHooks {
  std::string state_path;  // resumable state, empty to disable
  std::size_t state_every = 500;
  std::string abort_checkpoint = "descriptor_abort.strk";
  std::ostream* progress = nullptr;
  std::size_t progress_every = 100;
};

struct DescriptorTrainResult {
  std::vector<DescriptorLogRow> log;
};

/// Trains the descriptor at keypoints of a frozen detector. Training pairs
/// come from a pool of `pool_size` augmented pairs detected once up front.
template <class D>
DescriptorTrainResult train_descriptor(DescriptorNet<float>& net, const DescriptorTrainConfig& cfg,
                                       const DetectorNet<D>& detector, const DetectOptions& det,
                                       const DescriptorTrainHooks& hooks = {}) {
  cfg.validate();
  auto& params = net.params();
  Adam<float> adam(cfg.adam);
  DescriptorTrainResult result;
  std::size_t start = 0;
  if (!hooks.state_path.empty() && std::filesystem::exists(hooks.state_path)) {
    start = static_cast<std::size_t>(load_training_state(hooks.state_path, params, adam));
    const std::string log_path = hooks.state_path + ".log";
    if (std::filesystem::exists(log_path))
      for (const auto& row : read_descriptor_log(log_path))
        if (row.iter < start) result.log.push_back(row);
    if (result.log.size() != start) throw FormatError("training state log is inconsistent with " + hooks.state_path);
    if (hooks.progress) *hooks.progress << "resuming descriptor training at iteration " << start << "\n";
  }
  if (start >= cfg.iterations) return result;

  const PairParams data = cfg.augmented_data();
  if (hooks.progress) *hooks.progress << "detecting keypoints on " << cfg.pool_size << " training pairs" << std::endl;
  const auto pool = detected_pairs(detector, det, data, cfg.pool_size, cfg.seed, 0xde5c7a1);
  const auto val = detected_pairs(detector, det, data, cfg.val_pairs, cfg.val_seed, 0xde5c7a1);
  const float inv_batch = 1.0f / static_cast<float>(cfg.batch_pairs);

  auto save_state = [&](std::size_t done) {
    if (hooks.state_path.empty()) return;
    save_training_state(hooks.state_path, done, params, adam);
    std::ofstream os(hooks.state_path + ".log");
    write_descriptor_log(os, result.log);
  };

  for (std::size_t it = start; it < cfg.iterations; ++it) {
    DescriptorLogRow row;
    row.iter = it;
    row.random_negative_prob = random_negative_schedule(it, cfg.negative_tau, cfg.negative_cutoff);
    params.zero_grad();
    double loss_sum = 0;
    for (std::size_t b = 0; b < cfg.batch_pairs; ++b) {
      const DetectedPair& d = pool[(it * cfg.batch_pairs + b) % pool.size()];
      const Tensor<float> va = net.forward(d.pair.image_a);
      const Tensor<float> vb = net.forward(d.pair.image_b);
      const DescriptorVolume xa = to_volume(va), xb = to_volume(vb);
      const DescriptorMatrix ma = xa.gather(d.a), mb = xb.gather(d.b);
      Rng rng = make_rng(cfg.seed, {it, b});
      auto triplets = build_triplets(ma, mb, d.a, d.b, d.pair.a_to_b, xb.height, xb.width, cfg.pairing_radius, rng,
                                     row.random_negative_prob, 0);
      auto back = build_triplets(mb, ma, d.b, d.a, d.pair.a_to_b.inverse(), xa.height, xa.width, cfg.pairing_radius, rng,
                                 row.random_negative_prob, 1);
      triplets.insert(triplets.end(), back.begin(), back.end());
      row.n_triplets += static_cast<double>(triplets.size()) / static_cast<double>(cfg.batch_pairs);
      if (triplets.empty()) continue;
      const Tensor<float> loss = triplet_loss(va, vb, triplets, cfg.margin, nullptr);
      if (!std::isfinite(loss.item())) {
        save_checkpoint(hooks.abort_checkpoint, params);
        throw std::runtime_error("descriptor training aborted at iteration " + std::to_string(it) +
                                 ": non-finite loss (state saved to " + hooks.abort_checkpoint + ")");
      }
      loss_sum += loss.item();
      backward(scale(loss, inv_batch));
    }
    row.loss = loss_sum / static_cast<double>(cfg.batch_pairs);
    for (auto& p : params.items())
      if (!p.tensor.has_grad()) p.tensor.mutable_grad();
    adam.step(params);
    if (!params.all_finite()) {
      save_checkpoint(hooks.abort_checkpoint, params);
      throw std::runtime_error("descriptor training aborted at iteration " + std::to_string(it) + ": non-finite parameters");
    }
    const std::size_t done = it + 1;
    if (cfg.val_every > 0 && (done % cfg.val_every == 0 || done == cfg.iterations)) {
      const auto s = evaluate_descriptor(net, val, cfg.val_threshold);
      row.val_mma = s.mma;
      row.val_ms = s.ms;
    }
    result.log.push_back(row);
    if (hooks.progress && (done % hooks.progress_every == 0 || done == cfg.iterations)) {
      *hooks.progress << "descriptor iter " << done << "/" << cfg.iterations << " loss " << row.loss << " triplets "
                      << row.n_triplets;
      if (std::isfinite(row.val_mma)) *hooks.progress << " val_mma " << row.val_mma << " val_ms " << row.val_ms;
      *hooks.progress << std::endl;
    }
    if (hooks.state_every > 0 && (done % hooks.state_every == 0 || done == cfg.iterations)) save_state(done);
  }
  return result;
}

}  // namespace strek
