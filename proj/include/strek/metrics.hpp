#pragma once

// Evaluation metrics: repeatability, mutual nearest neighbour matching,
// mean matching accuracy, matching score and homography-accuracy AUC.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "strek/detector.hpp"
#include "strek/geometry.hpp"

namespace strek {

using DescriptorMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct EvalPair {
  KeypointSet a, b;
  Homography a_to_b;
  std::size_t height_a = 0, width_a = 0, height_b = 0, width_b = 0;
  DescriptorMatrix desc_a, desc_b;  // one row per keypoint (optional)
};

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct DirectionalRepeatability {
  double value = kNaN;  // NaN when no keypoint projects inside
  std::size_t counted = 0;
  std::size_t repeated = 0;
};

struct RepeatabilityResult {
  DirectionalRepeatability a_to_b, b_to_a;
  double symmetric = kNaN;  // mean of the defined directions
  double max = kNaN;        // best of the two directions
};

/// Fraction of `from` keypoints whose projection lands inside the target
/// image and has a `to` keypoint within `threshold` (Euclidean).
inline DirectionalRepeatability repeatability_directional(const KeypointSet& from, const KeypointSet& to,
                                                          const Homography& g, std::size_t to_h, std::size_t to_w,
                                                          double threshold) {
  if (!(threshold > 0)) throw std::invalid_argument("repeatability: threshold must be positive");
  DirectionalRepeatability r;
  const double t2 = threshold * threshold;
  for (const auto& k : from) {
    const Point p = g.project(k.xy());
    if (!inside_image(p, to_h, to_w)) continue;
    ++r.counted;
    for (const auto& q : to) {
      if ((q.xy() - p).squaredNorm() <= t2) {
        ++r.repeated;
        break;
      }
    }
  }
  if (r.counted > 0) r.value = static_cast<double>(r.repeated) / static_cast<double>(r.counted);
  return r;
}

inline RepeatabilityResult repeatability(const EvalPair& pair, double threshold) {
  RepeatabilityResult r;
  r.a_to_b = repeatability_directional(pair.a, pair.b, pair.a_to_b, pair.height_b, pair.width_b, threshold);
  r.b_to_a = repeatability_directional(pair.b, pair.a, pair.a_to_b.inverse(), pair.height_a, pair.width_a, threshold);
  const double x = r.a_to_b.value, y = r.b_to_a.value;
  if (std::isnan(x) && std::isnan(y)) return r;
  if (std::isnan(x)) {
    r.symmetric = r.max = y;
  } else if (std::isnan(y)) {
    r.symmetric = r.max = x;
  } else {
    r.symmetric = 0.5 * (x + y);
    r.max = std::max(x, y);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Matching
// ---------------------------------------------------------------------------

struct DescriptorMatch {
  std::size_t a = 0, b = 0;
  double score = 0;
  bool operator==(const DescriptorMatch&) const = default;
};

/// Mutual nearest neighbours by dot-product similarity; ties go to the lower
/// index. Matches scoring below `min_score` are dropped.
inline std::vector<DescriptorMatch> mnn_match(const DescriptorMatrix& da, const DescriptorMatrix& db,
                                              double min_score = -std::numeric_limits<double>::infinity()) {
  std::vector<DescriptorMatch> out;
  if (da.rows() == 0 || db.rows() == 0) return out;
  if (da.cols() != db.cols()) throw std::invalid_argument("mnn_match: descriptor dimensions differ");
  const Eigen::MatrixXf s = da * db.transpose();
  std::vector<Eigen::Index> best_b(static_cast<std::size_t>(s.rows())), best_a(static_cast<std::size_t>(s.cols()));
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    Eigen::Index arg = 0;
    for (Eigen::Index j = 1; j < s.cols(); ++j)
      if (s(i, j) > s(i, arg)) arg = j;
    best_b[static_cast<std::size_t>(i)] = arg;
  }
  for (Eigen::Index j = 0; j < s.cols(); ++j) {
    Eigen::Index arg = 0;
    for (Eigen::Index i = 1; i < s.rows(); ++i)
      if (s(i, j) > s(arg, j)) arg = i;
    best_a[static_cast<std::size_t>(j)] = arg;
  }
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const Eigen::Index j = best_b[static_cast<std::size_t>(i)];
    if (best_a[static_cast<std::size_t>(j)] != i) continue;
    if (s(i, j) < min_score) continue;
    out.push_back({static_cast<std::size_t>(i), static_cast<std::size_t>(j), static_cast<double>(s(i, j))});
  }
  return out;
}

struct MatchStats {
  double value = kNaN;  // NaN when undefined
  std::size_t n_matches = 0;
  std::size_t n_correct = 0;
  bool defined = false;
};

inline std::size_t count_correct(const EvalPair& pair, const std::vector<DescriptorMatch>& matches, double threshold) {
  std::size_t n = 0;
  for (const auto& m : matches) {
    const Point p = pair.a_to_b.project(pair.a.at(m.a).xy());
    if ((p - pair.b.at(m.b).xy()).norm() <= threshold) ++n;
  }
  return n;
}

/// Correct matches over proposed matches. Zero matches gives value 0 with
/// `defined` false.
inline MatchStats mma(const EvalPair& pair, const std::vector<DescriptorMatch>& matches, double threshold) {
  MatchStats s;
  s.n_matches = matches.size();
  s.n_correct = count_correct(pair, matches, threshold);
  if (s.n_matches == 0) {
    s.value = 0.0;
    return s;
  }
  s.defined = true;
  s.value = static_cast<double>(s.n_correct) / static_cast<double>(s.n_matches);
  return s;
}

/// Keypoints of `kps` whose projection lands inside the other image.
inline std::size_t count_in_overlap(const KeypointSet& kps, const Homography& g, std::size_t h, std::size_t w) {
  std::size_t n = 0;
  for (const auto& k : kps)
    if (inside_image(g.project(k.xy()), h, w)) ++n;
  return n;
}

/// Correct matches over the mean number of keypoints in the overlap area.
inline MatchStats matching_score(const EvalPair& pair, const std::vector<DescriptorMatch>& matches, double threshold) {
  MatchStats s;
  s.n_matches = matches.size();
  s.n_correct = count_correct(pair, matches, threshold);
  const double na = static_cast<double>(count_in_overlap(pair.a, pair.a_to_b, pair.height_b, pair.width_b));
  const double nb = static_cast<double>(count_in_overlap(pair.b, pair.a_to_b.inverse(), pair.height_a, pair.width_a));
  const double denom = 0.5 * (na + nb);
  if (denom <= 0) return s;
  s.defined = true;
  s.value = static_cast<double>(s.n_correct) / denom;
  return s;
}

/// Area under the cumulative success-rate curve over [0, max_threshold],
/// normalized to [0,1]. Failed estimates carry an infinite error.
inline double homography_auc(const std::vector<double>& corner_errors, double max_threshold) {
  if (corner_errors.empty()) throw std::invalid_argument("homography_auc: empty list");
  if (!(max_threshold > 0)) throw std::invalid_argument("homography_auc: threshold must be positive");
  double acc = 0;
  for (double e : corner_errors)
    if (e < max_threshold) acc += (max_threshold - std::max(0.0, e)) / max_threshold;
  return acc / static_cast<double>(corner_errors.size());
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline constexpr std::array<double, 3> kMetricThresholds{1.0, 2.0, 3.0};

struct MetricReport {
  std::string pair_id;
  std::array<double, 3> rep{kNaN, kNaN, kNaN};      // symmetric
  std::array<double, 3> rep_max{kNaN, kNaN, kNaN};  // best direction
  std::array<double, 3> rep_ab{kNaN, kNaN, kNaN};
  std::array<double, 3> rep_ba{kNaN, kNaN, kNaN};
  std::array<double, 3> mma{kNaN, kNaN, kNaN};
  std::array<double, 3> ms{kNaN, kNaN, kNaN};
  std::size_t n_kpts_a = 0, n_kpts_b = 0;
  std::size_t n_matches = 0, n_correct = 0;  // at 3px
  double corner_error = kNaN;                // +inf on estimation failure
};

inline MetricReport evaluate_pair(const EvalPair& pair, const std::string& id, bool with_matches,
                                  double min_match_score = -std::numeric_limits<double>::infinity()) {
  MetricReport r;
  r.pair_id = id;
  r.n_kpts_a = pair.a.size();
  r.n_kpts_b = pair.b.size();
  for (std::size_t i = 0; i < kMetricThresholds.size(); ++i) {
    const auto rep = repeatability(pair, kMetricThresholds[i]);
    r.rep[i] = rep.symmetric;
    r.rep_max[i] = rep.max;
    r.rep_ab[i] = rep.a_to_b.value;
    r.rep_ba[i] = rep.b_to_a.value;
  }
  if (with_matches) {
    const auto matches = mnn_match(pair.desc_a, pair.desc_b, min_match_score);
    for (std::size_t i = 0; i < kMetricThresholds.size(); ++i) {
      r.mma[i] = mma(pair, matches, kMetricThresholds[i]).value;
      r.ms[i] = matching_score(pair, matches, kMetricThresholds[i]).value;
    }
    r.n_matches = matches.size();
    r.n_correct = count_correct(pair, matches, 3.0);
  }
  return r;
}

/// Mean over pairs, skipping undefined (NaN) entries per column.
inline MetricReport aggregate_reports(const std::vector<MetricReport>& rows) {
  MetricReport agg;
  agg.pair_id = "mean";
  auto mean_of = [&](auto getter) {
    double s = 0;
    std::size_t n = 0;
    for (const auto& r : rows) {
      const double v = getter(r);
      if (std::isfinite(v)) {
        s += v;
        ++n;
      }
    }
    return n ? s / static_cast<double>(n) : kNaN;
  };
  for (std::size_t i = 0; i < 3; ++i) {
    agg.rep[i] = mean_of([i](const MetricReport& r) { return r.rep[i]; });
    agg.rep_max[i] = mean_of([i](const MetricReport& r) { return r.rep_max[i]; });
    agg.rep_ab[i] = mean_of([i](const MetricReport& r) { return r.rep_ab[i]; });
    agg.rep_ba[i] = mean_of([i](const MetricReport& r) { return r.rep_ba[i]; });
    agg.mma[i] = mean_of([i](const MetricReport& r) { return r.mma[i]; });
    agg.ms[i] = mean_of([i](const MetricReport& r) { return r.ms[i]; });
  }
  for (const auto& r : rows) {
    agg.n_kpts_a += r.n_kpts_a;
    agg.n_kpts_b += r.n_kpts_b;
    agg.n_matches += r.n_matches;
    agg.n_correct += r.n_correct;
  }
  if (!rows.empty()) {
    agg.n_kpts_a /= rows.size();
    agg.n_kpts_b /= rows.size();
  }
  agg.corner_error = mean_of([](const MetricReport& r) { return r.corner_error; });
  return agg;
}

inline void write_report_csv(std::ostream& os, const std::vector<MetricReport>& rows, bool with_aggregate = true) {
  os << "pair";
  for (const char* m : {"rep", "rep_max", "rep_ab", "rep_ba", "mma", "ms"})
    for (int t = 1; t <= 3; ++t) os << ',' << m << '@' << t;
  os << ",n_kpts_a,n_kpts_b,n_matches,n_correct,corner_error\n";
  auto emit = [&](const MetricReport& r) {
    os << r.pair_id;
    for (const auto* arr : {&r.rep, &r.rep_max, &r.rep_ab, &r.rep_ba, &r.mma, &r.ms})
      for (double v : *arr) os << ',' << v;
    os << ',' << r.n_kpts_a << ',' << r.n_kpts_b << ',' << r.n_matches << ',' << r.n_correct << ',' << r.corner_error
       << '\n';
  };
  os << std::setprecision(6);
  for (const auto& r : rows) emit(r);
  if (with_aggregate) emit(aggregate_reports(rows));
}

// ---------------------------------------------------------------------------
// Curves
// ---------------------------------------------------------------------------

/// Centered moving average of odd window `window`. `circular` wraps around
/// (for periodic sweeps such as 0..359 degrees).
inline std::vector<double> moving_average(const std::vector<double>& v, std::size_t window, bool circular) {
  if (window <= 1 || v.empty()) return v;
  const auto n = static_cast<long>(v.size());
  const long half = static_cast<long>(window / 2);
  std::vector<double> out(v.size());
  for (long i = 0; i < n; ++i) {
    double s = 0;
    long c = 0;
    for (long j = i - half; j <= i + half; ++j) {
      long k = j;
      if (circular) k = ((j % n) + n) % n;
      else if (j < 0 || j >= n) continue;
      s += v[static_cast<std::size_t>(k)];
      ++c;
    }
    out[static_cast<std::size_t>(i)] = s / static_cast<double>(c);
  }
  return out;
}

struct SvgSeries {
  std::string label;
  std::vector<double> y;
  std::string color = "#1f77b4";
};

/// Minimal SVG line chart with shared x values and y in [y_min, y_max].
inline void write_svg_plot(std::ostream& os, const std::vector<double>& x, const std::vector<SvgSeries>& series,
                           const std::string& x_label, const std::string& y_label, double y_min = 0.0,
                           double y_max = 1.0) {
  const double W = 640, H = 400, L = 60, R = 20, T = 20, B = 50;
  const double x0 = x.empty() ? 0 : x.front(), x1 = x.empty() ? 1 : x.back();
  auto px = [&](double v) { return L + (v - x0) / (x1 - x0 == 0 ? 1 : x1 - x0) * (W - L - R); };
  auto py = [&](double v) { return H - B - (v - y_min) / (y_max - y_min) * (H - T - B); };
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = y_min + (y_max - y_min) * i / 4.0;
    os << "<text x=\"" << L - 8 << "\" y=\"" << py(v) + 4 << "\" font-size=\"11\" text-anchor=\"end\">" << v << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" font-size=\"12\" text-anchor=\"middle\">" << x_label
     << "</text>\n";
  os << "<text x=\"14\" y=\"" << (T + H - B) / 2 << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
     << (T + H - B) / 2 << ")\">" << y_label << "</text>\n";
  int idx = 0;
  for (const auto& s : series) {
    os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < x.size() && i < s.y.size(); ++i)
      if (std::isfinite(s.y[i])) os << px(x[i]) << ',' << py(std::clamp(s.y[i], y_min, y_max)) << ' ';
    os << "\"/>\n";
    os << "<text x=\"" << W - R - 4 << "\" y=\"" << T + 14 + 14 * idx << "\" font-size=\"11\" text-anchor=\"end\" fill=\""
       << s.color << "\">" << s.label << "</text>\n";
    ++idx;
  }
  os << "</svg>\n";
}

}  // namespace strek
