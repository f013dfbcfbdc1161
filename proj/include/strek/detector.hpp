#pragma once

// Keypoint detector: a stack of equivariant convolutions (or a plain CNN
// control) producing a single-channel heatmap, and deterministic inference:
// NMS top-k, greedy adaptive selection and a multi-scale pyramid.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <memory>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "strek/equivariant.hpp"
#include "strek/geometry.hpp"
#include "strek/image.hpp"
#include "strek/optim.hpp"
#include "strek/random.hpp"
#include "strek/tensor.hpp"

namespace strek {

enum class DetectorArch { recnn, cnn };

struct DetectorConfig {
  DetectorArch arch = DetectorArch::recnn;
  int cyclicity = 8;
  int max_frequency = 3;
  std::size_t fields = 5;          // regular fields per hidden layer (recnn)
  std::size_t cnn_channels = 5;    // channels per hidden layer (cnn)
  std::size_t regular_layers = 5;  // hidden-to-hidden layers
  std::size_t kernel_size = 5;
  double slope = 0.1;

  std::size_t layer_count() const { return regular_layers + 2; }
  std::size_t receptive_field() const { return layer_count() * (kernel_size - 1) + 1; }
};

/// The two plain-CNN controls: same hidden channel count as the field count,
/// or the expanded channel count of the regular representation.
inline DetectorConfig cnn_same_channels(DetectorConfig c) {
  c.arch = DetectorArch::cnn;
  c.cnn_channels = c.fields;
  return c;
}
inline DetectorConfig cnn_equivalent(DetectorConfig c) {
  c.arch = DetectorArch::cnn;
  c.cnn_channels = c.fields * static_cast<std::size_t>(c.cyclicity);
  return c;
}

template <class T>
class DetectorNet {
 public:
  explicit DetectorNet(const DetectorConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    if (cfg.kernel_size % 2 == 0) throw std::invalid_argument("detector: kernel size must be odd");
    Rng rng(derive_seed(seed, {0xde7ec7}));
    const std::size_t L = cfg.layer_count();
    if (cfg.arch == DetectorArch::recnn) {
      BasisOptions bo;
      bo.kernel_size = static_cast<int>(cfg.kernel_size);
      bo.cyclicity = cfg.cyclicity;
      bo.max_frequency = cfg.max_frequency;
      basis_ = std::make_shared<const SteerableBasis>(build_basis(bo));
      for (std::size_t i = 0; i < L; ++i) {
        const ReConvKind kind = i == 0 ? ReConvKind::lifting : i + 1 == L ? ReConvKind::projection : ReConvKind::regular;
        const std::size_t fin = i == 0 ? 1 : cfg.fields;
        const std::size_t fout = i + 1 == L ? 1 : cfg.fields;
        recnn_.emplace_back(kind, fin, fout, basis_);
        recnn_.back().register_parameters(params_, "det." + std::to_string(i), rng);
      }
    } else {
      for (std::size_t i = 0; i < L; ++i) {
        const std::size_t cin = i == 0 ? 1 : cfg.cnn_channels;
        const std::size_t cout = i + 1 == L ? 1 : cfg.cnn_channels;
        cnn_.emplace_back(cin, cout, cfg.kernel_size);
        cnn_.back().register_parameters(params_, "det." + std::to_string(i), rng, i + 1 == L ? 1.0 : 2.0);
      }
    }
  }

  DetectorNet(const DetectorNet&) = delete;
  DetectorNet& operator=(const DetectorNet&) = delete;

  const DetectorConfig& config() const { return cfg_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }
  std::size_t parameter_count() const { return params_.count(); }
  const std::vector<ReConvLayer<T>>& recnn_layers() const { return recnn_; }

  /// Raw heatmap D [H,W] for a [1,H,W] input.
  Tensor<T> forward(const Tensor<T>& image) const {
    if (image.rank() != 3 || image.dim(0) != 1)
      throw ShapeError("detector: expected a single-channel [1,H,W] image, got " + shape_str(image.shape()) +
                       " (convert to grayscale first)");
    Tensor<T> x = image;
    const std::size_t L = cfg_.layer_count();
    for (std::size_t i = 0; i < L; ++i) {
      x = cfg_.arch == DetectorArch::recnn ? recnn_[i].forward(x) : cnn_[i].forward(x);
      if (i + 1 < L) x = leaky_relu(x, static_cast<T>(cfg_.slope));
    }
    return reshape(x, Shape{image.dim(1), image.dim(2)});
  }

  Tensor<T> forward(const Image& image) const { return forward(image.template to_tensor<T>()); }

 private:
  DetectorConfig cfg_;
  ParameterSet<T> params_;
  std::shared_ptr<const SteerableBasis> basis_;
  std::vector<ReConvLayer<T>> recnn_;
  std::vector<PlainConvLayer<T>> cnn_;
};

// ---------------------------------------------------------------------------
// Heatmaps and keypoints
// ---------------------------------------------------------------------------

/// Non-differentiable heatmap used at inference time.
struct Heatmap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;
  double temperature = 100.0;

  Heatmap() = default;
  Heatmap(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), values(h * w, fill) {}

  double at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
  double& at(std::size_t r, std::size_t c) { return values[r * width + c]; }

  template <class T>
  static Heatmap from_tensor(const Tensor<T>& d, double temperature = 100.0) {
    if (d.rank() != 2) throw ShapeError("heatmap: expected [H,W], got " + shape_str(d.shape()));
    Heatmap h(d.dim(0), d.dim(1));
    h.temperature = temperature;
    std::copy(d.values().begin(), d.values().end(), h.values.begin());
    return h;
  }

  bool all_finite() const {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
  }
};

/// How raw detector scores become a probability map. Models trained with
/// sequential sampling use the temperature softmax; models trained with the
/// peaky baseline use sigmoid(D) divided by its sum.
enum class HeatmapNorm { softmax, sigmoid_sum };

/// Normalizes one or several maps jointly (the masses of all maps sum to 1).
inline std::vector<Heatmap> normalize_heatmaps(const std::vector<Heatmap>& maps, double temperature,
                                               HeatmapNorm norm = HeatmapNorm::softmax) {
  if (temperature <= 0) throw std::invalid_argument("normalize_heatmaps: temperature must be positive");
  double mx = -std::numeric_limits<double>::infinity();
  for (const auto& m : maps)
    for (double v : m.values) mx = std::max(mx, v);
  double z = 0;
  std::vector<Heatmap> out = maps;
  for (auto& m : out)
    for (double& v : m.values) {
      v = norm == HeatmapNorm::softmax ? std::exp((v - mx) / temperature) : 1.0 / (1.0 + std::exp(-v));
      z += v;
    }
  for (auto& m : out) {
    m.temperature = temperature;
    for (double& v : m.values) v /= z;
  }
  return out;
}

inline Heatmap normalize_heatmap(const Heatmap& map, double temperature, HeatmapNorm norm = HeatmapNorm::softmax) {
  return normalize_heatmaps({map}, temperature, norm).front();
}

struct Keypoint {
  int row = 0;
  int col = 0;
  double score = 0;
  double scale = 1.0;

  Point xy() const { return {static_cast<double>(col), static_cast<double>(row)}; }
  bool operator==(const Keypoint&) const = default;
};

using KeypointSet = std::vector<Keypoint>;

/// Descending score, then (row, col) ascending.
inline bool keypoint_order(const Keypoint& a, const Keypoint& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.row != b.row) return a.row < b.row;
  return a.col < b.col;
}

namespace detail {

/// Sliding maximum over a window of half-width r along rows then columns.
inline std::vector<double> window_max_filter(const Heatmap& h, int r) {
  const int H = static_cast<int>(h.height), W = static_cast<int>(h.width);
  std::vector<double> tmp(h.values.size()), out(h.values.size());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double m = -std::numeric_limits<double>::infinity();
      for (int dx = std::max(0, x - r); dx <= std::min(W - 1, x + r); ++dx) m = std::max(m, h.values[y * W + dx]);
      tmp[y * W + x] = m;
    }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double m = -std::numeric_limits<double>::infinity();
      for (int dy = std::max(0, y - r); dy <= std::min(H - 1, y + r); ++dy) m = std::max(m, tmp[dy * W + x]);
      out[y * W + x] = m;
    }
  return out;
}

}  // namespace detail

/// Local maxima within a Chebyshev radius. A pixel survives when no pixel in
/// its window scores higher, no earlier (row, col) pixel in the window ties
/// it, and at least one pixel in the window scores strictly lower (plateaus
/// and flat background are not keypoints).
inline KeypointSet nms_topk(const Heatmap& h, int radius, std::size_t k, double scale = 1.0) {
  if (radius < 1) throw std::invalid_argument("nms_topk: radius must be >= 1");
  if (k < 1) throw std::invalid_argument("nms_topk: k must be >= 1");
  const int H = static_cast<int>(h.height), W = static_cast<int>(h.width);
  const auto mx = detail::window_max_filter(h, radius);
  KeypointSet out;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double v = h.values[y * W + x];
      if (v < mx[y * W + x]) continue;
      bool keep = true, lower = false;
      for (int yy = std::max(0, y - radius); yy <= std::min(H - 1, y + radius) && keep; ++yy)
        for (int xx = std::max(0, x - radius); xx <= std::min(W - 1, x + radius); ++xx) {
          const double u = h.values[yy * W + xx];
          if (u < v) lower = true;
          else if (u == v && (yy < y || (yy == y && xx < x))) {
            keep = false;
            break;
          }
        }
      if (keep && lower) out.push_back({y, x, v, scale});
    }
  std::sort(out.begin(), out.end(), keypoint_order);
  if (out.size() > k) out.resize(k);
  return out;
}

/// Deterministic counterpart of sequential sampling: repeatedly takes the
/// highest remaining pixel of a normalized map, zeroes the square of
/// half-width `avoidance_radius` around it, and stops at `max_count` or when
/// the remaining mass drops below `stop_mass`.
inline KeypointSet greedy_adaptive_select(const Heatmap& normalized, int avoidance_radius, std::size_t max_count,
                                          double stop_mass) {
  const int H = static_cast<int>(normalized.height), W = static_cast<int>(normalized.width);
  std::vector<double> rem = normalized.values;
  double mass = 0;
  for (double v : rem) mass += v;
  // Candidates in descending order; zeroed ones are skipped lazily.
  std::vector<std::size_t> order(rem.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  std::vector<unsigned char> zeroed(rem.size(), 0);
  KeypointSet out;
  for (std::size_t idx : order) {
    if (out.size() >= max_count || mass < stop_mass) break;
    if (zeroed[idx]) continue;
    const int y = static_cast<int>(idx) / W, x = static_cast<int>(idx) % W;
    out.push_back({y, x, normalized.values[idx], 1.0});
    for (int yy = std::max(0, y - avoidance_radius); yy <= std::min(H - 1, y + avoidance_radius); ++yy)
      for (int xx = std::max(0, x - avoidance_radius); xx <= std::min(W - 1, x + avoidance_radius); ++xx) {
        const std::size_t j = static_cast<std::size_t>(yy * W + xx);
        if (!zeroed[j]) {
          zeroed[j] = 1;
          mass -= rem[j];
        }
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

enum class SelectMode { topk, adaptive };

struct DetectOptions {
  int levels = 1;
  double scale_factor = 1.0 / std::numbers::sqrt2;
  int nms_radius = 3;
  std::size_t max_keypoints = 1000;
  SelectMode mode = SelectMode::topk;
  double temperature = 100.0;
  HeatmapNorm norm = HeatmapNorm::softmax;
  int avoidance_radius = 6;  // adaptive mode
  double stop_mass = 0.05;   // adaptive mode
};

/// Bilinear resize (pixel centres aligned by scaling about the origin).
inline Image resize_image(const Image& image, std::size_t out_h, std::size_t out_w) {
  const double sx = static_cast<double>(out_w) / static_cast<double>(image.width);
  const double sy = static_cast<double>(out_h) / static_cast<double>(image.height);
  Image out(out_h, out_w);
  for (std::size_t r = 0; r < out_h; ++r)
    for (std::size_t c = 0; c < out_w; ++c) {
      const double x = std::clamp((static_cast<double>(c) + 0.5) / sx - 0.5, 0.0, static_cast<double>(image.width - 1));
      const double y = std::clamp((static_cast<double>(r) + 0.5) / sy - 0.5, 0.0, static_cast<double>(image.height - 1));
      out.at(r, c) = static_cast<float>(*sample_bilinear(image, x, y));
    }
  return out;
}

template <class T>
Heatmap detector_heatmap(const DetectorNet<T>& net, const Image& image, double temperature = 100.0) {
  NoGradGuard guard;
  return Heatmap::from_tensor(net.forward(image), temperature);
}

/// Single-scale detection.
template <class T>
KeypointSet detect(const DetectorNet<T>& net, const Image& image, const DetectOptions& opt) {
  const Heatmap d = detector_heatmap(net, image, opt.temperature);
  const Heatmap p = normalize_heatmap(d, opt.temperature, opt.norm);
  if (opt.mode == SelectMode::adaptive) return greedy_adaptive_select(p, opt.avoidance_radius, opt.max_keypoints, opt.stop_mass);
  return nms_topk(p, opt.nms_radius, opt.max_keypoints);
}

struct PyramidLevel {
  Image image;
  double scale = 1.0;  // level size / level-0 size
};

inline std::vector<PyramidLevel> build_pyramid(const Image& image, int levels, double factor, std::size_t min_side,
                                               std::ostream* warn = &std::cerr) {
  if (levels < 1) throw std::invalid_argument("pyramid: levels must be >= 1");
  if (!(factor > 0 && factor < 1) && levels > 1) throw std::invalid_argument("pyramid: scale factor must be in (0,1)");
  std::vector<PyramidLevel> out{{image, 1.0}};
  double s = 1.0;
  for (int l = 1; l < levels; ++l) {
    s *= factor;
    const auto h = static_cast<std::size_t>(std::lround(static_cast<double>(image.height) * s));
    const auto w = static_cast<std::size_t>(std::lround(static_cast<double>(image.width) * s));
    if (h < min_side || w < min_side) {
      if (warn) *warn << "warning: dropping pyramid level " << l << " (" << h << "x" << w << ") below detector support\n";
      break;
    }
    out.push_back({resize_image(image, h, w), s});
  }
  return out;
}

inline KeypointSet merge_across_scales(KeypointSet all, int radius, std::size_t k) {
  std::stable_sort(all.begin(), all.end(), [](const Keypoint& a, const Keypoint& b) {
    if (keypoint_order(a, b)) return true;
    if (keypoint_order(b, a)) return false;
    return a.scale > b.scale;
  });
  KeypointSet kept;
  for (const auto& kp : all) {
    if (kept.size() >= k) break;
    const bool dup = std::any_of(kept.begin(), kept.end(), [&](const Keypoint& q) {
      return std::abs(q.row - kp.row) <= radius && std::abs(q.col - kp.col) <= radius;
    });
    if (!dup) kept.push_back(kp);
  }
  return kept;
}

/// Multi-scale detection. Heatmaps of all levels are normalized jointly; each
/// level runs NMS, points are mapped to level-0 pixels by dividing by the
/// cumulative scale and rounding, and cross-level duplicates within the NMS
/// radius are removed keeping the higher score.
template <class T>
KeypointSet detect_multiscale(const DetectorNet<T>& net, const Image& image, const DetectOptions& opt,
                              std::ostream* warn = &std::cerr) {
  const auto pyramid = build_pyramid(image, opt.levels, opt.scale_factor, net.config().kernel_size, warn);
  std::vector<Heatmap> raw;
  for (const auto& lvl : pyramid) raw.push_back(detector_heatmap(net, lvl.image, opt.temperature));
  const auto norm = normalize_heatmaps(raw, opt.temperature, opt.norm);
  KeypointSet all;
  for (std::size_t l = 0; l < pyramid.size(); ++l) {
    for (auto kp : nms_topk(norm[l], opt.nms_radius, opt.max_keypoints, pyramid[l].scale)) {
      kp.row = std::clamp(static_cast<int>(std::lround(kp.row / pyramid[l].scale)), 0, static_cast<int>(image.height) - 1);
      kp.col = std::clamp(static_cast<int>(std::lround(kp.col / pyramid[l].scale)), 0, static_cast<int>(image.width) - 1);
      all.push_back(kp);
    }
  }
  return merge_across_scales(std::move(all), opt.nms_radius, opt.max_keypoints);
}

// ---------------------------------------------------------------------------
// Keypoint CSV
// ---------------------------------------------------------------------------

inline void write_keypoints_csv(std::ostream& os, const KeypointSet& kps) {
  os << "row,col,score,scale\n";
  os << std::setprecision(17);
  for (const auto& k : kps) os << k.row << ',' << k.col << ',' << k.score << ',' << k.scale << '\n';
}

inline void write_keypoints_csv(const std::string& path, const KeypointSet& kps) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  write_keypoints_csv(os, kps);
}

inline KeypointSet read_keypoints_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line.rfind("row,col,score,scale", 0) != 0)
    throw std::runtime_error(path + ": missing keypoint header");
  KeypointSet out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    Keypoint k;
    char c1 = 0, c2 = 0, c3 = 0;
    if (!(ls >> k.row >> c1 >> k.col >> c2 >> k.score >> c3 >> k.scale) || c1 != ',' || c2 != ',' || c3 != ',')
      throw std::runtime_error(path + ": malformed keypoint row '" + line + "'");
    out.push_back(k);
  }
  return out;
}

}  // namespace strek
