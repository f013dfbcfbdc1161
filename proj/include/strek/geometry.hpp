#pragma once

// Planar geometry and synthetic data: homographies, bilinear warping,
// random homographies, the synthetic lines generator, pair synthesis,
// rotate-and-crop and DLT + RANSAC homography estimation.
//
// Coordinates are (x, y) = (col, row) with pixel centres at integers.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "strek/image.hpp"
#include "strek/random.hpp"

namespace strek {

using Point = Eigen::Vector2d;

class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Homography {
 public:
  Homography() : m_(Eigen::Matrix3d::Identity()) {}

  explicit Homography(const Eigen::Matrix3d& m) : m_(m) {
    if (std::abs(m_(2, 2)) > 1e-12) {
      m_ /= m_(2, 2);
    } else {
      const double n = m_.norm();
      if (n == 0.0) throw GeometryError("homography: zero matrix");
      m_ /= n;
    }
    if (!m_.allFinite()) throw GeometryError("homography: non-finite entries");
    if (std::abs(m_.determinant()) < 1e-12) throw GeometryError("homography: singular matrix");
  }

  static Homography identity() { return {}; }

  static Homography translation(double tx, double ty) {
    Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
    m(0, 2) = tx;
    m(1, 2) = ty;
    return Homography(m);
  }

  /// Counter-clockwise (in the image's visual frame, y pointing down)
  /// rotation by `degrees` about (cx, cy).
  static Homography rotation_about(double degrees, double cx, double cy) {
    const double a = degrees * std::numbers::pi / 180.0;
    const double c = std::cos(a), s = std::sin(a);
    Eigen::Matrix3d r;
    r << c, s, 0, -s, c, 0, 0, 0, 1;
    return translation(cx, cy) * Homography(r) * translation(-cx, -cy);
  }

  const Eigen::Matrix3d& matrix() const { return m_; }
  double operator()(int r, int c) const { return m_(r, c); }

  Homography inverse() const { return Homography(m_.inverse()); }

  /// Composition: (a * b).project(p) == a.project(b.project(p)).
  Homography operator*(const Homography& other) const { return Homography(m_ * other.m_); }

  Point project(const Point& p) const {
    const Eigen::Vector3d q = m_ * Eigen::Vector3d(p.x(), p.y(), 1.0);
    if (std::abs(q.z()) < 1e-12) throw GeometryError("homography: point maps to infinity");
    return {q.x() / q.z(), q.y() / q.z()};
  }

 private:
  Eigen::Matrix3d m_;
};

inline Point project(const Homography& h, const Point& p) { return h.project(p); }

inline bool inside_image(const Point& p, std::size_t height, std::size_t width) {
  return p.x() >= -0.5 && p.y() >= -0.5 && p.x() < static_cast<double>(width) - 0.5 &&
         p.y() < static_cast<double>(height) - 0.5;
}

// ---------------------------------------------------------------------------
// Warping
// ---------------------------------------------------------------------------

struct WarpResult {
  Image image;
  std::vector<unsigned char> valid;  // 1 where the source was sampled
};

/// Bilinear sample with validity: the point must lie within the hull of
/// pixel centres (a small tolerance absorbs rounding).
inline std::optional<double> sample_bilinear(const Image& img, double x, double y) {
  constexpr double tol = 1e-7;
  const double maxx = static_cast<double>(img.width) - 1.0, maxy = static_cast<double>(img.height) - 1.0;
  if (x < -tol || y < -tol || x > maxx + tol || y > maxy + tol) return std::nullopt;
  x = std::clamp(x, 0.0, maxx);
  y = std::clamp(y, 0.0, maxy);
  const auto x0 = static_cast<std::size_t>(std::floor(x)), y0 = static_cast<std::size_t>(std::floor(y));
  const std::size_t x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
  const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
  const double top = img.at(y0, x0) * (1 - fx) + img.at(y0, x1) * fx;
  const double bot = img.at(y1, x0) * (1 - fx) + img.at(y1, x1) * fx;
  return top * (1 - fy) + bot * fy;
}

/// out(x) = image(h^-1 x): h maps source coordinates to output coordinates.
inline WarpResult warp_image(const Image& image, const Homography& h, std::size_t out_height, std::size_t out_width) {
  const Homography inv = h.inverse();
  WarpResult res{Image(out_height, out_width), std::vector<unsigned char>(out_height * out_width, 0)};
  for (std::size_t r = 0; r < out_height; ++r)
    for (std::size_t c = 0; c < out_width; ++c) {
      const Eigen::Vector3d q = inv.matrix() * Eigen::Vector3d(static_cast<double>(c), static_cast<double>(r), 1.0);
      if (std::abs(q.z()) < 1e-12) continue;
      if (auto v = sample_bilinear(image, q.x() / q.z(), q.y() / q.z())) {
        res.image.at(r, c) = static_cast<float>(*v);
        res.valid[r * out_width + c] = 1;
      }
    }
  return res;
}

// ---------------------------------------------------------------------------
// Random homographies
// ---------------------------------------------------------------------------

struct HomographyBounds {
  double max_rotation_deg = 25.0;
  double max_translation_frac = 0.10;
  double max_perspective = 1e-4;
  double max_scale_delta = 0.15;
};

struct HomographyDraw {
  double rotation_deg, scale, tx, ty, px, py;
};

/// Centered composition T(c) * translation * rotation * scale * perspective * T(-c)
/// on a width x height frame, parameters uniform in their bounds.
inline Homography compose_homography(const HomographyDraw& d, double width, double height) {
  const double cx = (width - 1) / 2.0, cy = (height - 1) / 2.0;
  const double a = d.rotation_deg * std::numbers::pi / 180.0;
  Eigen::Matrix3d rs;
  rs << d.scale * std::cos(a), d.scale * std::sin(a), 0, -d.scale * std::sin(a), d.scale * std::cos(a), 0, 0, 0, 1;
  Eigen::Matrix3d persp = Eigen::Matrix3d::Identity();
  persp(2, 0) = d.px;
  persp(2, 1) = d.py;
  return Homography::translation(cx + d.tx, cy + d.ty) * Homography(rs * persp) * Homography::translation(-cx, -cy);
}

inline HomographyDraw draw_homography_params(Rng& rng, const HomographyBounds& b, double width, double height) {
  if (b.max_rotation_deg < 0 || b.max_translation_frac < 0 || b.max_perspective < 0 || b.max_scale_delta < 0)
    throw std::invalid_argument("random_homography: bounds must be non-negative");
  HomographyDraw d{};
  d.rotation_deg = uniform(rng, -b.max_rotation_deg, b.max_rotation_deg);
  d.scale = 1.0 + uniform(rng, -b.max_scale_delta, b.max_scale_delta);
  d.tx = uniform(rng, -b.max_translation_frac, b.max_translation_frac) * width;
  d.ty = uniform(rng, -b.max_translation_frac, b.max_translation_frac) * height;
  d.px = uniform(rng, -b.max_perspective, b.max_perspective);
  d.py = uniform(rng, -b.max_perspective, b.max_perspective);
  return d;
}

inline Homography random_homography(Rng& rng, const HomographyBounds& bounds, double width, double height) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    const auto d = draw_homography_params(rng, bounds, width, height);
    try {
      Homography h = compose_homography(d, width, height);
      // Reject draws that send the frame corners through the line at infinity.
      const std::array<Point, 4> corners{Point(0, 0), Point(width - 1, 0), Point(width - 1, height - 1), Point(0, height - 1)};
      bool ok = true;
      for (const auto& c : corners) {
        const double w = h.matrix().row(2).dot(Eigen::Vector3d(c.x(), c.y(), 1.0));
        ok = ok && w > 0.1;
      }
      if (ok) return h;
    } catch (const GeometryError&) {
    }
  }
  throw GeometryError("random_homography: no valid draw");
}

// ---------------------------------------------------------------------------
// Synthetic lines
// ---------------------------------------------------------------------------

struct LinesParams {
  int min_lines = 20;
  int max_lines = 40;
  double min_intensity = 0.0;
  double max_intensity = 1.0;
  double min_contrast = 0.15;  // |intensity - background| lower bound
  double min_width = 1.0;
  double max_width = 3.0;
  double background = 0.5;
  double noise_sigma = 0.0;
};

inline void add_gaussian_noise(Image& img, double sigma, Rng& rng) {
  if (sigma <= 0) return;
  std::normal_distribution<double> n(0.0, sigma);
  for (auto& v : img.pixels) v = static_cast<float>(std::clamp(static_cast<double>(v) + n(rng), 0.0, 1.0));
}

/// Anti-aliased random line segments on a flat background plus Gaussian noise.
inline Image gen_lines_image(Rng& rng, std::size_t height, std::size_t width, const LinesParams& p) {
  if (height < 32 || width < 32) throw std::invalid_argument("gen_lines_image: dimensions must be >= 32");
  Image img(height, width, static_cast<float>(p.background));
  const int n = p.max_lines > p.min_lines ? std::uniform_int_distribution<int>(p.min_lines, p.max_lines)(rng) : p.min_lines;
  const double W = static_cast<double>(width), H = static_cast<double>(height);
  for (int i = 0; i < n; ++i) {
    const Point a(uniform(rng, 0, W - 1), uniform(rng, 0, H - 1));
    const Point b(uniform(rng, 0, W - 1), uniform(rng, 0, H - 1));
    double intensity = uniform(rng, p.min_intensity, p.max_intensity);
    for (int t = 0; t < 32 && std::abs(intensity - p.background) < p.min_contrast; ++t)
      intensity = uniform(rng, p.min_intensity, p.max_intensity);
    const double half = uniform(rng, p.min_width, p.max_width) / 2.0;
    const Point ab = b - a;
    const double len2 = std::max(ab.squaredNorm(), 1e-12);
    const double reach = half + 1.0;
    const auto r0 = static_cast<std::size_t>(std::max(0.0, std::floor(std::min(a.y(), b.y()) - reach)));
    const auto r1 = static_cast<std::size_t>(std::min(H - 1, std::ceil(std::max(a.y(), b.y()) + reach)));
    const auto c0 = static_cast<std::size_t>(std::max(0.0, std::floor(std::min(a.x(), b.x()) - reach)));
    const auto c1 = static_cast<std::size_t>(std::min(W - 1, std::ceil(std::max(a.x(), b.x()) + reach)));
    for (std::size_t r = r0; r <= r1; ++r)
      for (std::size_t c = c0; c <= c1; ++c) {
        const Point q(static_cast<double>(c), static_cast<double>(r));
        const double t = std::clamp((q - a).dot(ab) / len2, 0.0, 1.0);
        const double d = (a + t * ab - q).norm();
        const double cover = std::clamp(half + 0.5 - d, 0.0, 1.0);
        if (cover <= 0) continue;
        float& px = img.at(r, c);
        px = static_cast<float>(px * (1.0 - cover) + intensity * cover);
      }
  }
  add_gaussian_noise(img, p.noise_sigma, rng);
  return img;
}

// ---------------------------------------------------------------------------
// Pair synthesis
// ---------------------------------------------------------------------------

struct ImagePair {
  Image image_a, image_b;
  Homography a_to_b;
  std::vector<unsigned char> valid;  // pixels of A that project inside B
};

struct PairParams {
  std::size_t height = 128;
  std::size_t width = 128;
  double base_margin = 2.0;  // base lines image is this many times the view size
  LinesParams lines{};
  HomographyBounds bounds{};
  double noise_sigma = 0.02;
  double min_overlap = 0.3;
  int max_retries = 20;
  double extra_rotation_deg = 0.0;  // view B additionally rotated, uniform in +-this
};

/// Pixels of an h x w image whose projection lands inside an h2 x w2 image.
inline std::vector<unsigned char> overlap_mask(const Homography& g, std::size_t h, std::size_t w, std::size_t h2, std::size_t w2) {
  std::vector<unsigned char> mask(h * w, 0);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const Eigen::Vector3d q = g.matrix() * Eigen::Vector3d(static_cast<double>(c), static_cast<double>(r), 1.0);
      if (q.z() <= 1e-12) continue;
      mask[r * w + c] = inside_image(Point(q.x() / q.z(), q.y() / q.z()), h2, w2) ? 1 : 0;
    }
  return mask;
}

/// Maps base-image coordinates to view coordinates for a random view.
inline Homography random_view(Rng& rng, const PairParams& p, std::size_t base_h, std::size_t base_w) {
  const Homography local = random_homography(rng, p.bounds, static_cast<double>(p.width), static_cast<double>(p.height));
  const double dx = (static_cast<double>(base_w) - static_cast<double>(p.width)) / 2.0;
  const double dy = (static_cast<double>(base_h) - static_cast<double>(p.height)) / 2.0;
  return local * Homography::translation(-dx, -dy);
}

/// Builds a pair from an explicit base image and base-to-view homographies.
inline ImagePair make_pair(const Image& base, const Homography& h_a, const Homography& h_b, const PairParams& p,
                           Rng& noise_rng) {
  ImagePair pair;
  pair.image_a = warp_image(base, h_a, p.height, p.width).image;
  pair.image_b = warp_image(base, h_b, p.height, p.width).image;
  pair.a_to_b = h_b * h_a.inverse();
  pair.valid = overlap_mask(pair.a_to_b, p.height, p.width, p.height, p.width);
  add_gaussian_noise(pair.image_a, p.noise_sigma, noise_rng);
  add_gaussian_noise(pair.image_b, p.noise_sigma, noise_rng);
  return pair;
}

inline ImagePair gen_pair(Rng& rng, const PairParams& p) {
  const auto base_h = static_cast<std::size_t>(std::lround(static_cast<double>(p.height) * p.base_margin));
  const auto base_w = static_cast<std::size_t>(std::lround(static_cast<double>(p.width) * p.base_margin));
  LinesParams lines = p.lines;
  lines.noise_sigma = 0.0;
  const Image base = gen_lines_image(rng, base_h, base_w, lines);
  Homography h_a, h_b;
  for (int attempt = 0;; ++attempt) {
    h_a = random_view(rng, p, base_h, base_w);
    h_b = random_view(rng, p, base_h, base_w);
    if (p.extra_rotation_deg > 0)
      h_b = Homography::rotation_about(uniform(rng, -p.extra_rotation_deg, p.extra_rotation_deg),
                                       (static_cast<double>(p.width) - 1) / 2.0, (static_cast<double>(p.height) - 1) / 2.0) *
            h_b;
    const auto mask = overlap_mask(h_b * h_a.inverse(), p.height, p.width, p.height, p.width);
    const double frac = static_cast<double>(std::count(mask.begin(), mask.end(), 1)) / static_cast<double>(mask.size());
    if (frac >= p.min_overlap) break;
    if (attempt + 1 >= p.max_retries) throw GeometryError("gen_pair: overlap below threshold after retries");
  }
  return make_pair(base, h_a, h_b, p, rng);
}

// ---------------------------------------------------------------------------
// Rotation with largest-rectangle crop
// ---------------------------------------------------------------------------

struct RotatedCrop {
  Image image;
  Homography original_to_crop;
};

/// Scale s such that an (s*w, s*h) axis-aligned rectangle fits inside a
/// w x h rectangle rotated by `degrees` about a shared centre.
inline double largest_rect_scale(double w, double h, double degrees) {
  const double a = degrees * std::numbers::pi / 180.0;
  const double c = std::abs(std::cos(a)), s = std::abs(std::sin(a));
  return std::min(w / (w * c + h * s), h / (w * s + h * c));
}

inline RotatedCrop rotate_and_crop_largest_rect(const Image& image, double degrees) {
  if (std::abs(degrees) > 180.0) throw std::invalid_argument("rotate_and_crop: |angle| must be <= 180");
  // Work on the span of pixel centres so every output centre samples validly.
  const double sw = static_cast<double>(image.width) - 1.0, sh = static_cast<double>(image.height) - 1.0;
  const double s = largest_rect_scale(sw, sh, degrees);
  const auto out_w = static_cast<std::size_t>(std::floor(s * sw + 1e-9)) + 1;
  const auto out_h = static_cast<std::size_t>(std::floor(s * sh + 1e-9)) + 1;
  const double cx = sw / 2.0, cy = sh / 2.0;
  const double ocx = (static_cast<double>(out_w) - 1.0) / 2.0, ocy = (static_cast<double>(out_h) - 1.0) / 2.0;
  const Homography h = Homography::translation(ocx - cx, ocy - cy) * Homography::rotation_about(degrees, cx, cy);
  auto warped = warp_image(image, h, out_h, out_w);
  return {std::move(warped.image), h};
}

/// Rotates about the image centre and keeps a centred out_h x out_w window.
inline RotatedCrop rotate_and_center_crop(const Image& image, double degrees, std::size_t out_h, std::size_t out_w) {
  const double cx = (static_cast<double>(image.width) - 1.0) / 2.0, cy = (static_cast<double>(image.height) - 1.0) / 2.0;
  const double ocx = (static_cast<double>(out_w) - 1.0) / 2.0, ocy = (static_cast<double>(out_h) - 1.0) / 2.0;
  const Homography h = Homography::translation(ocx - cx, ocy - cy) * Homography::rotation_about(degrees, cx, cy);
  auto warped = warp_image(image, h, out_h, out_w);
  return {std::move(warped.image), h};
}

// ---------------------------------------------------------------------------
// DLT + RANSAC
// ---------------------------------------------------------------------------

struct Match {
  Point a, b;  // a in the source image, b in the target image
};

struct RansacResult {
  Homography h;
  std::vector<unsigned char> inliers;
  std::size_t n_inliers = 0;
};

class EstimationFailed : public GeometryError {
 public:
  using GeometryError::GeometryError;
};

namespace detail {

// Similarity transform moving the centroid to 0 and the mean distance to sqrt(2).
inline Eigen::Matrix3d hartley_normalizer(const std::vector<Point>& pts) {
  Point c = Point::Zero();
  for (const auto& p : pts) c += p;
  c /= static_cast<double>(pts.size());
  double md = 0;
  for (const auto& p : pts) md += (p - c).norm();
  md /= static_cast<double>(pts.size());
  const double s = md > 1e-12 ? std::numbers::sqrt2 / md : 1.0;
  Eigen::Matrix3d t;
  t << s, 0, -s * c.x(), 0, s, -s * c.y(), 0, 0, 1;
  return t;
}

inline double triangle_area2(const Point& a, const Point& b, const Point& c) {
  return std::abs((b - a).x() * (c - a).y() - (b - a).y() * (c - a).x());
}

inline bool has_collinear_triple(const std::array<Point, 4>& p, double tol) {
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j)
      for (int k = j + 1; k < 4; ++k)
        if (triangle_area2(p[i], p[j], p[k]) < tol) return true;
  return false;
}

}  // namespace detail

/// Normalized DLT from >= 4 correspondences; nullopt when degenerate.
inline std::optional<Homography> fit_homography_dlt(const std::vector<Match>& matches) {
  if (matches.size() < 4) return std::nullopt;
  std::vector<Point> pa, pb;
  for (const auto& m : matches) {
    pa.push_back(m.a);
    pb.push_back(m.b);
  }
  const Eigen::Matrix3d ta = detail::hartley_normalizer(pa), tb = detail::hartley_normalizer(pb);
  Eigen::MatrixXd A(2 * matches.size(), 9);
  for (std::size_t i = 0; i < matches.size(); ++i) {
    const Eigen::Vector3d a = ta * Eigen::Vector3d(pa[i].x(), pa[i].y(), 1.0);
    const Eigen::Vector3d b = tb * Eigen::Vector3d(pb[i].x(), pb[i].y(), 1.0);
    const double x = a.x() / a.z(), y = a.y() / a.z(), u = b.x() / b.z(), v = b.y() / b.z();
    A.row(static_cast<Eigen::Index>(2 * i)) << -x, -y, -1, 0, 0, 0, u * x, u * y, u;
    A.row(static_cast<Eigen::Index>(2 * i + 1)) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const Eigen::VectorXd s = svd.singularValues();
  // Rank below 8 means the system does not pin down a unique homography.
  if (s.size() >= 8 && s(7) < 1e-9 * std::max(1.0, s(0))) return std::nullopt;
  const Eigen::VectorXd hv = svd.matrixV().col(8);
  Eigen::Matrix3d hn;
  hn << hv(0), hv(1), hv(2), hv(3), hv(4), hv(5), hv(6), hv(7), hv(8);
  const Eigen::Matrix3d h = tb.inverse() * hn * ta;
  if (!h.allFinite()) return std::nullopt;
  try {
    return Homography(h);
  } catch (const GeometryError&) {
    return std::nullopt;
  }
}

inline double reprojection_error(const Homography& h, const Match& m) {
  const Eigen::Vector3d q = h.matrix() * Eigen::Vector3d(m.a.x(), m.a.y(), 1.0);
  if (std::abs(q.z()) < 1e-12) return std::numeric_limits<double>::infinity();
  return (Point(q.x() / q.z(), q.y() / q.z()) - m.b).norm();
}

inline RansacResult estimate_homography_ransac(const std::vector<Match>& matches, double threshold_px, int iterations, Rng& rng) {
  if (matches.size() < 4) throw EstimationFailed("ransac: need at least 4 matches, got " + std::to_string(matches.size()));
  const std::size_t n = matches.size();
  std::optional<Homography> best;
  std::size_t best_count = 0;
  double best_err = std::numeric_limits<double>::infinity();
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  auto score = [&](const Homography& h, std::vector<unsigned char>* flags) {
    std::size_t count = 0;
    double err_sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = reprojection_error(h, matches[i]);
      const bool in = e < threshold_px;
      if (flags) (*flags)[i] = in ? 1 : 0;
      if (in) {
        ++count;
        err_sum += e;
      }
    }
    return std::pair{count, err_sum};
  };
  for (int it = 0; it < iterations; ++it) {
    std::array<std::size_t, 4> idx{};
    for (int k = 0; k < 4; ++k) {
      bool dup = true;
      while (dup) {
        idx[k] = pick(rng);
        dup = std::find(idx.begin(), idx.begin() + k, idx[k]) != idx.begin() + k;
      }
    }
    std::array<Point, 4> pa{}, pb{};
    std::vector<Match> sample;
    for (int k = 0; k < 4; ++k) {
      pa[k] = matches[idx[k]].a;
      pb[k] = matches[idx[k]].b;
      sample.push_back(matches[idx[k]]);
    }
    if (detail::has_collinear_triple(pa, 1e-6) || detail::has_collinear_triple(pb, 1e-6)) continue;
    const auto h = fit_homography_dlt(sample);
    if (!h) continue;
    const auto [count, err] = score(*h, nullptr);
    if (count > best_count || (count == best_count && count > 0 && err < best_err)) {
      best = h;
      best_count = count;
      best_err = err;
    }
  }
  if (!best || best_count < 4) throw EstimationFailed("ransac: all sampled models were degenerate");
  RansacResult res{*best, std::vector<unsigned char>(n, 0), 0};
  score(*best, &res.inliers);
  std::vector<Match> inl;
  for (std::size_t i = 0; i < n; ++i)
    if (res.inliers[i]) inl.push_back(matches[i]);
  // Least-squares refit on the consensus set, repeated until the set settles.
  // The refit may hold fewer points under the threshold than the minimal
  // model that won the count; it is still the better estimate.
  for (int round = 0; round < 5; ++round) {
    const auto refit = fit_homography_dlt(inl);
    if (!refit) break;
    std::vector<unsigned char> flags(n, 0);
    const auto [count, err] = score(*refit, &flags);
    if (count < 4) break;
    res.h = *refit;
    const bool settled = flags == res.inliers;
    res.inliers = std::move(flags);
    if (settled) break;
    inl.clear();
    for (std::size_t i = 0; i < n; ++i)
      if (res.inliers[i]) inl.push_back(matches[i]);
  }
  res.n_inliers = static_cast<std::size_t>(std::count(res.inliers.begin(), res.inliers.end(), 1));
  return res;
}

/// Mean distance between the four image corners mapped by two homographies.
inline double corner_error(const Homography& estimated, const Homography& truth, std::size_t height, std::size_t width) {
  const double w = static_cast<double>(width) - 1.0, h = static_cast<double>(height) - 1.0;
  const std::array<Point, 4> corners{Point(0, 0), Point(w, 0), Point(w, h), Point(0, h)};
  double acc = 0;
  for (const auto& c : corners) acc += (estimated.project(c) - truth.project(c)).norm();
  return acc / 4.0;
}

}  // namespace strek
