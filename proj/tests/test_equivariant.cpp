#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "strek/detector.hpp"
#include "strek/equivariant.hpp"

using namespace strek;

namespace {

Image random_image(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image im(h, w);
  for (auto& p : im.pixels) p = u(rng);
  return im;
}

// Rotates every channel of a [C,H,W] tensor by k quarter turns.
std::vector<double> rotate_channels(const Tensor<double>& x, int k) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  std::vector<double> out;
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<double> ch(x.values().begin() + static_cast<long>(c * H * W),
                           x.values().begin() + static_cast<long>((c + 1) * H * W));
    const auto r = rotate_grid_90k(ch, H, W, k);
    out.insert(out.end(), r.begin(), r.end());
  }
  return out;
}

double max_abs(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace

TEST(Basis, AtomCountByEnumeration) {
  BasisOptions o;
  o.kernel_size = 5;
  o.cyclicity = 8;
  o.max_frequency = 3;
  o.include_center = false;
  const auto b = build_basis(o);
  // Enumerate (ring, frequency, cos/sin) independently of the builder.
  std::size_t expected = 0;
  for (int ring = 1; ring <= 2; ++ring)
    for (int m = 0; m <= 3; ++m) expected += m == 0 ? 1 : 2;
  EXPECT_EQ(expected, 14u);
  EXPECT_EQ(b.size(), expected);
  o.include_center = true;
  EXPECT_EQ(build_basis(o).size(), expected + 1);
}

TEST(Basis, RejectsBadArguments) {
  EXPECT_THROW(build_basis(4, 8, 3), std::invalid_argument);
  EXPECT_THROW(build_basis(5, 6, 2), std::invalid_argument);
  EXPECT_THROW(build_basis(5, 8, 4), std::invalid_argument);
  EXPECT_NO_THROW(build_basis(5, 4, 1));
  EXPECT_NO_THROW(build_basis(7, 16, 7));
}

// Normalized at the reference orientation; the quarter-turn copies are pixel
// permutations of it. Off-grid copies share the same scale factor.
TEST(Basis, UnitNormAtoms) {
  const auto b = build_basis(5, 8, 3);
  for (std::size_t a = 0; a < b.size(); ++a)
    for (int r = 0; r < 8; r += 2) {
      double n2 = 0;
      for (double v : b.rotated(a, r)) n2 += v * v;
      EXPECT_NEAR(n2, 1.0, 1e-12) << "atom " << a << " rotation " << r;
    }
}

TEST(Basis, IsotropicAtomsIgnoreRotation) {
  const auto b = build_basis(5, 8, 3);
  for (std::size_t a = 0; a < b.size(); ++a) {
    if (b.atoms()[a].frequency != 0) continue;
    for (int r = 1; r < 8; ++r) EXPECT_EQ(b.rotated(a, r), b.rotated(a, 0)) << "atom " << a;
  }
}

TEST(Basis, RotationStepReproducesNextCopy) {
  const auto b = build_basis(5, 8, 3);
  for (std::size_t a = 0; a < b.size(); ++a)
    for (int r = 0; r < 8; ++r) {
      const auto next = b.rotate_copy(a, r);
      const auto& stored = b.rotated(a, r + 1);
      for (std::size_t i = 0; i < next.size(); ++i) EXPECT_NEAR(next[i], stored[i], 1e-12);
    }
}

TEST(Basis, FullCycleReturnsOriginal) {
  for (int n : {4, 8, 16}) {
    const auto b = build_basis(5, n, n / 2 - 1);
    for (std::size_t a = 0; a < b.size(); ++a) {
      const auto back = b.sample(a, 2.0 * std::numbers::pi);
      const auto& orig = b.rotated(a, 0);
      for (std::size_t i = 0; i < back.size(); ++i) EXPECT_LT(std::abs(back[i] - orig[i]), 1e-10);
    }
  }
}

TEST(Basis, QuarterTurnIsPixelPermutation) {
  // Two group steps at N=8 equal the lossless grid rotation.
  const auto b = build_basis(5, 8, 3);
  for (std::size_t a = 0; a < b.size(); ++a) {
    const auto rot = rotate_grid_90k(b.rotated(a, 0), 5, 5, 1);
    const auto& stored = b.rotated(a, 2);
    for (std::size_t i = 0; i < rot.size(); ++i) EXPECT_NEAR(rot[i], stored[i], 1e-12) << "atom " << a;
  }
}

TEST(Basis, GramMatrixNearlyOrthonormal) {
  const auto b = build_basis(5, 8, 3);
  for (std::size_t i = 0; i < b.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) {
      double g = 0;
      const auto& u = b.rotated(i, 0);
      const auto& v = b.rotated(j, 0);
      for (std::size_t p = 0; p < u.size(); ++p) g += u[p] * v[p];
      if (i == j) EXPECT_NEAR(g, 1.0, 1e-12);
      else EXPECT_LT(std::abs(g), 0.3) << i << "," << j;
    }
}

TEST(Basis, ContactSheetShape) {
  const auto b = build_basis(5, 8, 3);
  const Image sheet = basis_contact_sheet(b, 4);
  EXPECT_EQ(sheet.height, b.size() * 22 + 2);
  EXPECT_EQ(sheet.width, 8u * 22 + 2);
  for (float p : sheet.pixels) {
    EXPECT_GE(p, 0.0f);
    EXPECT_LE(p, 1.0f);
  }
}

TEST(ReConv, LiftingSingleAtomGivesRotatedCopies) {
  auto basis = std::make_shared<const SteerableBasis>(build_basis(5, 8, 3));
  std::size_t atom = 0;
  for (std::size_t a = 0; a < basis->size(); ++a)
    if (basis->atoms()[a].frequency == 1 && !basis->atoms()[a].is_sine) {
      atom = a;
      break;
    }
  ReConvLayer<double> layer(ReConvKind::lifting, 1, 1, basis);
  std::vector<double> w(layer.coefficient_count(), 0.0);
  w[atom] = 1.0;
  layer.bind(Tensor<double>(layer.weight_shape(), w), Tensor<double>(Shape{1}, 0.0));
  const auto k = layer.materialize_kernel();
  ASSERT_EQ(k.shape(), (Shape{8, 1, 5, 5}));
  for (int r = 0; r < 8; ++r)
    for (std::size_t p = 0; p < 25; ++p) EXPECT_DOUBLE_EQ(k.values()[static_cast<std::size_t>(r) * 25 + p], basis->rotated(atom, r)[p]);
}

TEST(ReConv, KernelShapes) {
  auto basis = std::make_shared<const SteerableBasis>(build_basis(5, 8, 3));
  Rng rng(1);
  ParameterSet<double> ps;
  ReConvLayer<double> lift(ReConvKind::lifting, 1, 3, basis), reg(ReConvKind::regular, 3, 2, basis),
      proj(ReConvKind::projection, 2, 1, basis);
  lift.register_parameters(ps, "l", rng);
  reg.register_parameters(ps, "r", rng);
  proj.register_parameters(ps, "p", rng);
  EXPECT_EQ(lift.materialize_kernel().shape(), (Shape{24, 1, 5, 5}));
  EXPECT_EQ(reg.materialize_kernel().shape(), (Shape{16, 24, 5, 5}));
  EXPECT_EQ(proj.materialize_kernel().shape(), (Shape{1, 16, 5, 5}));
  // Lifting coefficients do not depend on N.
  EXPECT_EQ(lift.coefficient_count(), basis->size() * 1 * 3);
  auto b4 = std::make_shared<const SteerableBasis>(build_basis(5, 4, 1));
  auto b16 = std::make_shared<const SteerableBasis>(build_basis(5, 16, 1));
  EXPECT_EQ(ReConvLayer<double>(ReConvKind::lifting, 1, 3, b4).coefficient_count(),
            ReConvLayer<double>(ReConvKind::lifting, 1, 3, b16).coefficient_count());
  EXPECT_THROW(lift.forward(Tensor<double>(Shape{2, 8, 8})), ShapeError);
}

TEST(ReConv, ZeroWeightsGiveZeroOutput) {
  auto basis = std::make_shared<const SteerableBasis>(build_basis(5, 8, 3));
  for (auto kind : {ReConvKind::lifting, ReConvKind::regular, ReConvKind::projection}) {
    ReConvLayer<double> layer(kind, kind == ReConvKind::lifting ? 1 : 2, kind == ReConvKind::projection ? 1 : 2, basis);
    layer.bind(Tensor<double>(layer.weight_shape(), 0.0), Tensor<double>(Shape{layer.bias_count()}, 0.0));
    const auto kernel = layer.materialize_kernel();
    for (double v : kernel.values()) EXPECT_EQ(v, 0.0);
    std::mt19937_64 rng(3);
    const auto x = random_image(12, 12, rng);
    Tensor<double> in = kind == ReConvKind::lifting ? x.to_tensor<double>() : Tensor<double>(Shape{16, 12, 12}, 1.0);
    const auto out = layer.forward(in);
    for (double v : out.values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(ReConv, ParameterEconomy) {
  auto basis = std::make_shared<const SteerableBasis>(build_basis(5, 8, 3));
  for (std::size_t f : {1u, 2u, 4u, 5u, 8u}) {
    ReConvLayer<double> reg(ReConvKind::regular, f, f, basis);
    const std::size_t plain = (f * 8) * (f * 8) * 25;
    EXPECT_LT(reg.coefficient_count() + reg.bias_count(), plain + f * 8) << "fields " << f;
    ReConvLayer<double> lift(ReConvKind::lifting, 1, f, basis);
    EXPECT_LT(lift.coefficient_count() + lift.bias_count(), (f * 8) * 25 + f * 8);
  }
}

// Rotating the input by a quarter turn rotates every channel and cyclically
// shifts the group index of each regular field by two steps (at N = 8).
TEST(ReConv, LayerwiseQuarterTurnEquivariance) {
  auto basis = std::make_shared<const SteerableBasis>(build_basis(5, 8, 3));
  Rng prng(11);
  ParameterSet<double> ps;
  ReConvLayer<double> lift(ReConvKind::lifting, 1, 2, basis), reg(ReConvKind::regular, 2, 2, basis);
  lift.register_parameters(ps, "l", prng);
  reg.register_parameters(ps, "r", prng);
  std::mt19937_64 rng(5);
  const std::size_t S = 20;
  const Image x = random_image(S, S, rng);
  for (int k = 1; k < 4; ++k) {
    const Tensor<double> y = reg.forward(leaky_relu(lift.forward(x.to_tensor<double>()), 0.1));
    const Tensor<double> yr = reg.forward(leaky_relu(lift.forward(rotate_image_90k(x, k).to_tensor<double>()), 0.1));
    const auto expect = rotate_channels(y, k);
    const std::size_t HW = S * S;
    double err = 0;
    for (std::size_t f = 0; f < 2; ++f)
      for (std::size_t r = 0; r < 8; ++r) {
        const std::size_t src = f * 8 + (r + 8 - 2 * static_cast<std::size_t>(k)) % 8, dst = f * 8 + r;
        // interior only: padding breaks symmetry near the border
        for (std::size_t i = 5; i + 5 < S; ++i)
          for (std::size_t j = 5; j + 5 < S; ++j)
            err = std::max(err, std::abs(yr.values()[dst * HW + i * S + j] - expect[src * HW + i * S + j]));
      }
    EXPECT_LT(err, 1e-10 * std::max(1.0, max_abs(expect))) << "k=" << k;
  }
}

TEST(Detector, DefaultParameterCountInBand) {
  DetectorNet<float> net(DetectorConfig{}, 0);
  EXPECT_GE(net.parameter_count(), 15000u);
  EXPECT_LE(net.parameter_count(), 25000u);
  EXPECT_EQ(net.config().layer_count(), 7u);
}

TEST(Detector, OutputShapeMatchesInput) {
  DetectorNet<float> net(DetectorConfig{}, 0);
  std::mt19937_64 rng(1);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{32, 32}, {24, 40}}) {
    const auto d = net.forward(random_image(h, w, rng));
    EXPECT_EQ(d.shape(), (Shape{h, w}));
  }
  EXPECT_THROW(net.forward(Tensor<float>(Shape{3, 16, 16})), ShapeError);
}

TEST(Detector, QuarterTurnEquivariance) {
  DetectorConfig cfg;
  cfg.fields = 2;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    DetectorNet<double> net(cfg, seed);
    std::mt19937_64 rng(seed + 100);
    const std::size_t S = 48, border = cfg.receptive_field() / 2;
    const Image x = random_image(S, S, rng);
    const auto d = net.forward(x).values();
    for (int k = 1; k < 4; ++k) {
      const auto dr = net.forward(rotate_image_90k(x, k)).values();
      const auto expect = rotate_grid_90k(d, S, S, k);
      double err = 0, scale = 0;
      for (std::size_t i = border; i + border < S; ++i)
        for (std::size_t j = border; j + border < S; ++j) {
          err = std::max(err, std::abs(dr[i * S + j] - expect[i * S + j]));
          scale = std::max(scale, std::abs(expect[i * S + j]));
        }
      EXPECT_LT(err, 1e-4 * scale) << "seed " << seed << " k " << k;
    }
  }
}

TEST(Detector, ConstantImageZeroBiasGivesConstantInterior) {
  DetectorNet<double> net(DetectorConfig{}, 2);
  const std::size_t S = 40, border = net.config().receptive_field() / 2;
  const auto d = net.forward(Image(S, S, 0.6f)).values();
  const double ref = d[(S / 2) * S + S / 2];
  for (std::size_t i = border; i + border < S; ++i)
    for (std::size_t j = border; j + border < S; ++j) EXPECT_NEAR(d[i * S + j], ref, 1e-9);
}

TEST(Detector, CnnControlsParameterCounts) {
  const DetectorConfig base;
  DetectorNet<float> same(cnn_same_channels(base), 0), equiv(cnn_equivalent(base), 0), recnn(base, 0);
  EXPECT_LT(same.parameter_count(), recnn.parameter_count());
  EXPECT_GT(equiv.parameter_count(), recnn.parameter_count());
}
