#pragma once

// Brute-force O(N^2) reference implementations of the evaluation metrics,
// written directly from their definitions, and random instance generators.

#include <cmath>
#include <random>
#include <vector>

#include "strek/metrics.hpp"

namespace strek::oracle {

inline bool in_frame(double x, double y, std::size_t h, std::size_t w) {
  return x >= -0.5 && y >= -0.5 && x < static_cast<double>(w) - 0.5 && y < static_cast<double>(h) - 0.5;
}

inline void apply(const Eigen::Matrix3d& m, double x, double y, double& ox, double& oy) {
  const double u = m(0, 0) * x + m(0, 1) * y + m(0, 2);
  const double v = m(1, 0) * x + m(1, 1) * y + m(1, 2);
  const double w = m(2, 0) * x + m(2, 1) * y + m(2, 2);
  ox = u / w;
  oy = v / w;
}

/// Fraction of `from` keypoints (projecting inside) with any `to` keypoint
/// within t. Returns NaN when nothing projects inside.
inline double directional_rep(const KeypointSet& from, const KeypointSet& to, const Eigen::Matrix3d& m, std::size_t h,
                              std::size_t w, double t) {
  int counted = 0, hit = 0;
  for (const auto& k : from) {
    double x, y;
    apply(m, k.col, k.row, x, y);
    if (!in_frame(x, y, h, w)) continue;
    ++counted;
    bool any = false;
    for (const auto& q : to) {
      const double dx = q.col - x, dy = q.row - y;
      if (dx * dx + dy * dy <= t * t) any = true;
    }
    hit += any ? 1 : 0;
  }
  return counted ? static_cast<double>(hit) / counted : std::nan("");
}

inline double symmetric_rep(const EvalPair& p, double t) {
  const double ab = directional_rep(p.a, p.b, p.a_to_b.matrix(), p.height_b, p.width_b, t);
  const double ba = directional_rep(p.b, p.a, p.a_to_b.inverse().matrix(), p.height_a, p.width_a, t);
  if (std::isnan(ab)) return ba;
  if (std::isnan(ba)) return ab;
  return (ab + ba) / 2;
}

/// Mutual argmax over the full similarity table; lowest index wins ties.
inline std::vector<std::pair<std::size_t, std::size_t>> mutual_nn(const DescriptorMatrix& da, const DescriptorMatrix& db) {
  const auto na = static_cast<std::size_t>(da.rows()), nb = static_cast<std::size_t>(db.rows());
  std::vector<std::vector<float>> s(na, std::vector<float>(nb));
  for (std::size_t i = 0; i < na; ++i)
    for (std::size_t j = 0; j < nb; ++j) {
      float acc = 0;
      for (Eigen::Index c = 0; c < da.cols(); ++c) acc += da(static_cast<Eigen::Index>(i), c) * db(static_cast<Eigen::Index>(j), c);
      s[i][j] = acc;
    }
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < na; ++i) {
    std::size_t bj = 0;
    for (std::size_t j = 0; j < nb; ++j)
      if (s[i][j] > s[i][bj]) bj = j;
    std::size_t bi = 0;
    for (std::size_t k = 0; k < na; ++k)
      if (s[k][bj] > s[bi][bj]) bi = k;
    if (bi == i) out.emplace_back(i, bj);
  }
  return out;
}

inline int correct(const EvalPair& p, const std::vector<std::pair<std::size_t, std::size_t>>& m, double t) {
  int n = 0;
  for (const auto& [i, j] : m) {
    double x, y;
    apply(p.a_to_b.matrix(), p.a[i].col, p.a[i].row, x, y);
    const double dx = p.b[j].col - x, dy = p.b[j].row - y;
    if (std::sqrt(dx * dx + dy * dy) <= t) ++n;
  }
  return n;
}

inline double mma(const EvalPair& p, const std::vector<std::pair<std::size_t, std::size_t>>& m, double t) {
  return m.empty() ? 0.0 : static_cast<double>(correct(p, m, t)) / static_cast<double>(m.size());
}

inline double matching_score(const EvalPair& p, const std::vector<std::pair<std::size_t, std::size_t>>& m, double t) {
  int na = 0, nb = 0;
  const Eigen::Matrix3d inv = p.a_to_b.inverse().matrix();
  for (const auto& k : p.a) {
    double x, y;
    apply(p.a_to_b.matrix(), k.col, k.row, x, y);
    na += in_frame(x, y, p.height_b, p.width_b);
  }
  for (const auto& k : p.b) {
    double x, y;
    apply(inv, k.col, k.row, x, y);
    nb += in_frame(x, y, p.height_a, p.width_a);
  }
  if (na + nb == 0) return std::nan("");
  return correct(p, m, t) / (0.5 * (na + nb));
}

/// Random instance: keypoints near projected positions (so that all metric
/// branches are exercised), random unit descriptors with planted matches.
inline EvalPair random_instance(std::mt19937_64& rng, std::size_t max_kps = 200, std::size_t dim = 16) {
  std::uniform_real_distribution<double> u(0, 1);
  const std::size_t h = 48 + rng() % 80, w = 48 + rng() % 80;
  EvalPair p;
  p.height_a = p.height_b = h;
  p.width_a = p.width_b = w;
  Rng hr(rng());
  HomographyBounds b;
  b.max_rotation_deg = 30;
  p.a_to_b = random_homography(hr, b, static_cast<double>(w), static_cast<double>(h));
  const std::size_t na = 1 + rng() % max_kps, nb = 1 + rng() % max_kps;
  for (std::size_t i = 0; i < na; ++i)
    p.a.push_back({static_cast<int>(rng() % h), static_cast<int>(rng() % w), u(rng), 1.0});
  for (std::size_t j = 0; j < nb; ++j) {
    if (j < na && u(rng) < 0.6) {
      double x, y;
      apply(p.a_to_b.matrix(), p.a[j].col, p.a[j].row, x, y);
      const int r = static_cast<int>(std::lround(y + 3 * (u(rng) - 0.5)));
      const int c = static_cast<int>(std::lround(x + 3 * (u(rng) - 0.5)));
      if (r >= 0 && c >= 0 && r < static_cast<int>(h) && c < static_cast<int>(w)) {
        p.b.push_back({r, c, u(rng), 1.0});
        continue;
      }
    }
    p.b.push_back({static_cast<int>(rng() % h), static_cast<int>(rng() % w), u(rng), 1.0});
  }
  std::normal_distribution<float> nd;
  p.desc_a.resize(static_cast<Eigen::Index>(na), static_cast<Eigen::Index>(dim));
  p.desc_b.resize(static_cast<Eigen::Index>(nb), static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < p.desc_a.rows(); ++i) {
    for (Eigen::Index c = 0; c < p.desc_a.cols(); ++c) p.desc_a(i, c) = nd(rng);
    p.desc_a.row(i).normalize();
  }
  for (Eigen::Index j = 0; j < p.desc_b.rows(); ++j) {
    if (j < p.desc_a.rows() && u(rng) < 0.5) {
      for (Eigen::Index c = 0; c < p.desc_b.cols(); ++c) p.desc_b(j, c) = p.desc_a(j, c) + 0.3f * nd(rng);
    } else {
      for (Eigen::Index c = 0; c < p.desc_b.cols(); ++c) p.desc_b(j, c) = nd(rng);
    }
    p.desc_b.row(j).normalize();
  }
  // Quantized duplicates exercise the tie-breaking rule.
  if (na > 3 && u(rng) < 0.3) p.desc_a.row(1) = p.desc_a.row(0);
  return p;
}

}  // namespace strek::oracle
