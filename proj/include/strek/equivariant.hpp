#pragma once

// Rotation-equivariant convolutions for the cyclic group C_N.
//
// Filters are weighted sums of fixed steerable atoms: a radial ring profile
// times an angular harmonic cos(m phi) / sin(m phi). Rotated copies are
// produced by an analytic phase shift, so a rotation by a multiple of 90
// degrees is an exact pixel permutation of the atom.
//
// Channel layout of a regular field: field f occupies channels
// [f*N, (f+1)*N), channel f*N + r holding the response to rotation r.

#include <cmath>
#include <memory>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "strek/image.hpp"
#include "strek/optim.hpp"
#include "strek/tensor.hpp"

namespace strek {

struct BasisAtom {
  double radius = 0;
  int frequency = 0;
  bool is_sine = false;
};

struct BasisOptions {
  int kernel_size = 5;
  int cyclicity = 8;
  int max_frequency = 3;
  bool include_center = true;  // ring of radius 0 (isotropic only)
  double ring_offset = 0.2;    // ring j sits at radius j + offset
  double ring_sigma = 0.4;
};

class SteerableBasis {
 public:
  SteerableBasis() = default;

  int kernel_size() const { return kernel_size_; }
  int cyclicity() const { return cyclicity_; }
  int max_frequency() const { return max_frequency_; }
  std::size_t size() const { return atoms_.size(); }
  const std::vector<BasisAtom>& atoms() const { return atoms_; }

  /// k*k samples of atom `a` rotated by `r` steps of 2*pi/N.
  const std::vector<double>& rotated(std::size_t a, int r) const {
    return rotated_[a][static_cast<std::size_t>(((r % cyclicity_) + cyclicity_) % cyclicity_)];
  }

  /// Samples atom `a` at an arbitrary rotation (analytic phase shift).
  std::vector<double> sample(std::size_t a, double angle) const { return sample_atom(a, angle); }

  /// One group step applied to copy `r` of atom `a`: phase shift by 2*pi/N.
  std::vector<double> rotate_copy(std::size_t a, int r) const {
    return sample_atom(a, 2.0 * std::numbers::pi * (r + 1) / cyclicity_);
  }

  friend SteerableBasis build_basis(const BasisOptions& opts);

 private:
  std::vector<double> sample_atom(std::size_t index, double angle) const {
    const BasisAtom& atom = atoms_[index];
    const int k = kernel_size_, c = k / 2;
    std::vector<double> out(static_cast<std::size_t>(k * k));
    for (int row = 0; row < k; ++row)
      for (int col = 0; col < k; ++col) {
        const double x = col - c, y = -(row - c);
        const double rho = std::hypot(x, y);
        double v = std::exp(-(rho - atom.radius) * (rho - atom.radius) / (2 * sigma_ * sigma_));
        if (atom.frequency > 0) {
          if (rho == 0.0) {
            v = 0.0;  // angle undefined at the centre
          } else {
            const double phase = atom.frequency * (std::atan2(y, x) - angle);
            v *= atom.is_sine ? std::sin(phase) : std::cos(phase);
          }
        }
        out[static_cast<std::size_t>(row * k + col)] = v * scales_[index];
      }
    return out;
  }

  int kernel_size_ = 0, cyclicity_ = 0, max_frequency_ = 0;
  double sigma_ = 0.4;
  std::vector<BasisAtom> atoms_;
  std::vector<double> scales_;
  std::vector<std::vector<std::vector<double>>> rotated_;
};

inline SteerableBasis build_basis(const BasisOptions& opts) {
  if (opts.kernel_size < 1 || opts.kernel_size % 2 == 0)
    throw std::invalid_argument("build_basis: kernel size must be odd, got " + std::to_string(opts.kernel_size));
  if (opts.cyclicity != 4 && opts.cyclicity != 8 && opts.cyclicity != 16)
    throw std::invalid_argument("build_basis: unsupported cyclicity " + std::to_string(opts.cyclicity));
  if (opts.max_frequency < 0 || 2 * opts.max_frequency >= opts.cyclicity)
    throw std::invalid_argument("build_basis: max frequency must be below cyclicity/2");
  SteerableBasis b;
  b.kernel_size_ = opts.kernel_size;
  b.cyclicity_ = opts.cyclicity;
  b.max_frequency_ = opts.max_frequency;
  b.sigma_ = opts.ring_sigma;
  if (opts.include_center) b.atoms_.push_back({0.0, 0, false});
  for (int ring = 1; ring <= opts.kernel_size / 2; ++ring) {
    const double radius = ring + opts.ring_offset;
    for (int m = 0; m <= opts.max_frequency; ++m) {
      b.atoms_.push_back({radius, m, false});
      if (m > 0) b.atoms_.push_back({radius, m, true});
    }
  }
  if (b.atoms_.empty()) throw std::invalid_argument("build_basis: empty basis");
  // Unit Frobenius norm at the reference orientation.
  b.scales_.assign(b.atoms_.size(), 1.0);
  for (std::size_t i = 0; i < b.atoms_.size(); ++i) {
    const auto v = b.sample_atom(i, 0.0);
    double n2 = 0;
    for (double x : v) n2 += x * x;
    if (n2 <= 0) throw std::logic_error("build_basis: zero atom");
    b.scales_[i] = 1.0 / std::sqrt(n2);
  }
  b.rotated_.resize(b.atoms_.size());
  for (std::size_t i = 0; i < b.atoms_.size(); ++i)
    for (int r = 0; r < opts.cyclicity; ++r)
      b.rotated_[i].push_back(b.sample_atom(i, 2.0 * std::numbers::pi * r / opts.cyclicity));
  return b;
}

inline SteerableBasis build_basis(int kernel_size, int cyclicity, int max_frequency) {
  return build_basis(BasisOptions{kernel_size, cyclicity, max_frequency});
}

// ---------------------------------------------------------------------------
// ReCONV layers
// ---------------------------------------------------------------------------

enum class ReConvKind { lifting, regular, projection };

inline const char* to_string(ReConvKind k) {
  switch (k) {
    case ReConvKind::lifting: return "lifting";
    case ReConvKind::regular: return "regular";
    default: return "projection";
  }
}

/// Equivariant layer parametrized by basis coefficients.
///   lifting:    scalar image -> out_fields regular fields
///   regular:    in_fields regular -> out_fields regular
///   projection: in_fields regular -> one invariant scalar field (group mean)
template <class T>
class ReConvLayer {
 public:
  ReConvLayer(ReConvKind kind, std::size_t in_fields, std::size_t out_fields,
              std::shared_ptr<const SteerableBasis> basis)
      : kind_(kind), in_fields_(in_fields), out_fields_(out_fields), basis_(std::move(basis)) {
    if (kind_ == ReConvKind::lifting && in_fields_ != 1) throw std::invalid_argument("lifting layer takes one scalar channel");
    if (kind_ == ReConvKind::projection && out_fields_ != 1) throw std::invalid_argument("projection layer yields one scalar channel");
    build_maps();
  }

  ReConvKind kind() const { return kind_; }
  std::size_t in_fields() const { return in_fields_; }
  std::size_t out_fields() const { return out_fields_; }
  const SteerableBasis& basis() const { return *basis_; }

  std::size_t in_channels() const { return kind_ == ReConvKind::lifting ? 1 : in_fields_ * n(); }
  std::size_t out_channels() const { return kind_ == ReConvKind::projection ? 1 : out_fields_ * n(); }

  /// Basis functions available per (in-field, out-field) pair: the atoms for
  /// a lifting layer, the atoms times their N cyclic channel shifts otherwise.
  std::size_t atoms_per_pair() const { return kind_ == ReConvKind::lifting ? basis_->size() : basis_->size() * n(); }

  Shape weight_shape() const {
    const std::size_t a = basis_->size();
    switch (kind_) {
      case ReConvKind::lifting: return {out_fields_, a};
      case ReConvKind::regular: return {out_fields_, in_fields_, n(), a};
      default: return {in_fields_, n(), a};
    }
  }
  Shape kernel_shape() const {
    const auto k = static_cast<std::size_t>(basis_->kernel_size());
    return {out_channels(), in_channels(), k, k};
  }
  std::size_t coefficient_count() const { return numel(weight_shape()); }
  std::size_t bias_count() const { return out_fields_; }

  template <class Rng>
  void register_parameters(ParameterSet<T>& params, const std::string& prefix, Rng& rng) {
    const double a = static_cast<double>(basis_->size());
    double stddev = 0;
    switch (kind_) {
      case ReConvKind::lifting: stddev = std::sqrt(2.0 / a); break;
      case ReConvKind::regular: stddev = std::sqrt(2.0 / (a * static_cast<double>(in_fields_ * n()))); break;
      default: stddev = std::sqrt(1.0 / (a * static_cast<double>(in_fields_))); break;
    }
    weights_ = params.add_normal(prefix + ".weight", weight_shape(), stddev, rng);
    bias_ = params.add(prefix + ".bias", Shape{out_fields_}, std::vector<T>(out_fields_, T(0)));
  }

  void bind(Tensor<T> weights, Tensor<T> bias) {
    if (weights.shape() != weight_shape()) throw ShapeError("ReConvLayer: weight shape " + shape_str(weights.shape()));
    weights_ = std::move(weights);
    bias_ = std::move(bias);
  }

  const Tensor<T>& weights() const { return weights_; }

  Tensor<T> materialize_kernel() const { return sparse_linear(weights_, kernel_map_, kernel_shape()); }

  Tensor<T> expanded_bias() const { return sparse_linear(bias_, bias_map_, Shape{out_channels()}); }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (x.rank() != 3 || x.dim(0) != in_channels())
      throw ShapeError(std::string("ReConvLayer(") + to_string(kind_) + "): expected " + std::to_string(in_channels()) +
                       " channels, got " + shape_str(x.shape()));
    const auto pad = static_cast<std::size_t>(basis_->kernel_size() / 2);
    return add_channel_bias(conv2d(x, materialize_kernel(), pad), expanded_bias());
  }

 private:
  std::size_t n() const { return static_cast<std::size_t>(basis_->cyclicity()); }

  void build_maps() {
    const std::size_t N = n(), A = basis_->size();
    const auto k = static_cast<std::size_t>(basis_->kernel_size());
    const std::size_t kk = k * k;
    auto km = std::make_shared<SparseMatrix<T>>();
    km->cols = coefficient_count();
    const auto cout = out_channels(), cin = in_channels();
    for (std::size_t oc = 0; oc < cout; ++oc)
      for (std::size_t ic = 0; ic < cin; ++ic)
        for (std::size_t p = 0; p < kk; ++p) {
          switch (kind_) {
            case ReConvKind::lifting: {
              const std::size_t f = oc / N, r = oc % N;
              for (std::size_t a = 0; a < A; ++a)
                km->push(f * A + a, static_cast<T>(basis_->rotated(a, static_cast<int>(r))[p]));
              break;
            }
            case ReConvKind::regular: {
              const std::size_t fo = oc / N, r = oc % N, fi = ic / N, s = ic % N;
              const std::size_t shift = (s + N - r) % N;
              for (std::size_t a = 0; a < A; ++a)
                km->push(((fo * in_fields_ + fi) * N + shift) * A + a,
                         static_cast<T>(basis_->rotated(a, static_cast<int>(r))[p]));
              break;
            }
            default: {
              const std::size_t fi = ic / N, s = ic % N;
              for (std::size_t r = 0; r < N; ++r) {
                const std::size_t shift = (s + N - r) % N;
                for (std::size_t a = 0; a < A; ++a)
                  km->push((fi * N + shift) * A + a,
                           static_cast<T>(basis_->rotated(a, static_cast<int>(r))[p] / static_cast<double>(N)));
              }
              break;
            }
          }
          km->end_row();
        }
    kernel_map_ = km;

    auto bm = std::make_shared<SparseMatrix<T>>();
    bm->cols = out_fields_;
    for (std::size_t oc = 0; oc < cout; ++oc) {
      bm->push(kind_ == ReConvKind::projection ? 0 : oc / N, T(1));
      bm->end_row();
    }
    bias_map_ = bm;
  }

  ReConvKind kind_;
  std::size_t in_fields_, out_fields_;
  std::shared_ptr<const SteerableBasis> basis_;
  std::shared_ptr<const SparseMatrix<T>> kernel_map_, bias_map_;
  Tensor<T> weights_, bias_;
};

/// Plain convolution with the same interface, for non-equivariant controls.
template <class T>
class PlainConvLayer {
 public:
  PlainConvLayer(std::size_t in_channels, std::size_t out_channels, std::size_t kernel_size)
      : cin_(in_channels), cout_(out_channels), k_(kernel_size) {}

  std::size_t in_channels() const { return cin_; }
  std::size_t out_channels() const { return cout_; }

  template <class Rng>
  void register_parameters(ParameterSet<T>& params, const std::string& prefix, Rng& rng, double gain = 2.0) {
    const double stddev = std::sqrt(gain / static_cast<double>(cin_ * k_ * k_));
    kernel_ = params.add_normal(prefix + ".weight", Shape{cout_, cin_, k_, k_}, stddev, rng);
    bias_ = params.add(prefix + ".bias", Shape{cout_}, std::vector<T>(cout_, T(0)));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (x.rank() != 3 || x.dim(0) != cin_)
      throw ShapeError("PlainConvLayer: expected " + std::to_string(cin_) + " channels, got " + shape_str(x.shape()));
    return add_channel_bias(conv2d(x, kernel_, k_ / 2), bias_);
  }

 private:
  std::size_t cin_, cout_, k_;
  Tensor<T> kernel_, bias_;
};

// ---------------------------------------------------------------------------
// Debug contact sheet: one row per atom, one column per rotation.
// ---------------------------------------------------------------------------

inline Image basis_contact_sheet(const SteerableBasis& basis, std::size_t cell_scale = 8) {
  const auto k = static_cast<std::size_t>(basis.kernel_size());
  const auto n = static_cast<std::size_t>(basis.cyclicity());
  const std::size_t cell = k * cell_scale, gap = 2;
  Image sheet(basis.size() * (cell + gap) + gap, n * (cell + gap) + gap, 0.5f);
  for (std::size_t a = 0; a < basis.size(); ++a) {
    double peak = 1e-12;
    for (std::size_t r = 0; r < n; ++r)
      for (double v : basis.rotated(a, static_cast<int>(r))) peak = std::max(peak, std::abs(v));
    for (std::size_t r = 0; r < n; ++r) {
      const auto& v = basis.rotated(a, static_cast<int>(r));
      for (std::size_t y = 0; y < cell; ++y)
        for (std::size_t x = 0; x < cell; ++x) {
          const double val = v[(y / cell_scale) * k + x / cell_scale];
          sheet.at(gap + a * (cell + gap) + y, gap + r * (cell + gap) + x) = static_cast<float>(0.5 + 0.5 * val / peak);
        }
    }
  }
  return sheet;
}

}  // namespace strek
