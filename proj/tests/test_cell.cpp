#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "pampere/cell.hpp"

using namespace pampere;

namespace {

constexpr double kPi = std::numbers::pi;

PeriodicField bump2d(int N, double amp) {
  return sample_function(
      [amp](const Vector& x) { return 1.0 + amp * std::cos(2 * kPi * x[0]) * std::cos(2 * kPi * x[1]); },
      TorusGrid::unit(2, N));
}

}  // namespace

TEST(SpatialCorrector, ConstantDensityGivesZero) {
  auto f1 = sample_function([](const Vector&) { return 1.0; }, TorusGrid::unit(2, 16));
  auto res = solve_spatial_corrector({SPDMatrix::identity(2), f1});
  EXPECT_EQ(res.iterations, 0);
  for (double v : res.xi.values()) EXPECT_EQ(v, 0.0);
}

TEST(SpatialCorrector, OneDimensionalClosedForm) {
  // xi'' = f1 - 1 with f1 = 1 + cos(2 pi x) / 2
  const int N = 256;
  auto g = TorusGrid::unit(1, N);
  auto f1 = sample_function([](const Vector& x) { return 1.0 + 0.5 * std::cos(2 * kPi * x[0]); }, g);
  auto res = solve_spatial_corrector({SPDMatrix::identity(1), f1});
  // the three-point Laplacian maps cos(2 pi x) to -lambda_h cos(2 pi x)
  const double h = 1.0 / N;
  const double lambda_h = 4.0 * std::pow(std::sin(kPi * h), 2) / (h * h);
  double err = 0.0, err_discrete = 0.0;
  for (std::size_t k = 0; k < g.size(); ++k) {
    const double x = g.coord(k)[0];
    err = std::max(err, std::abs(res.xi[k] - (1.0 - std::cos(2 * kPi * x)) / (8 * kPi * kPi)));
    err_discrete = std::max(err_discrete, std::abs(res.xi[k] - (1.0 - std::cos(2 * kPi * x)) / (2 * lambda_h)));
  }
  EXPECT_LT(err_discrete, 1e-12);
  // O(h^2): 2 * amplitude * (pi h)^2 / 3
  EXPECT_LT(err, 1.3e-6);
  EXPECT_LE(res.residual, 1e-10);
}

TEST(SpatialCorrector, TwoDimensionalConvergesQuickly) {
  auto f1 = bump2d(64, 0.3);
  auto res = solve_spatial_corrector({SPDMatrix::identity(2), f1});
  EXPECT_LE(res.iterations, 30);
  EXPECT_LE(res.residual, 1e-8);
  EXPECT_LE(cell_residual(SPDMatrix::identity(2), f1, res.xi), 1e-8);
  EXPECT_EQ(res.xi[0], 0.0);
  // residual history decreases strictly
  for (std::size_t k = 1; k < res.residual_history.size(); ++k)
    EXPECT_LT(res.residual_history[k], res.residual_history[k - 1]);
}

TEST(SpatialCorrector, GridRefinementAgreesOnCommonNodes) {
  auto coarse = solve_spatial_corrector({SPDMatrix::identity(2), bump2d(64, 0.3)});
  auto fine = solve_spatial_corrector({SPDMatrix::identity(2), bump2d(128, 0.3)});
  const auto& gc = coarse.xi.grid();
  const auto& gf = fine.xi.grid();
  double diff = 0.0;
  for (std::size_t k = 0; k < gc.size(); ++k) {
    const Index i = gc.unflatten(k);
    diff = std::max(diff, std::abs(coarse.xi[k] - fine.xi[gf.flatten({2 * i[0], 2 * i[1], 0})]));
  }
  EXPECT_LT(diff, 1e-3);
}

TEST(SpatialCorrector, AnisotropicBackgroundAndPeriods) {
  Matrix B(2, 2);
  B << 2.0, 0.5, 0.5, 1.0;
  TorusGrid g({1.0, 0.5}, {32, 16});
  auto f1 = sample_function(
      [](const Vector& x) { return std::exp(0.4 * std::sin(2 * kPi * x[0]) + 0.3 * std::cos(4 * kPi * x[1])); },
      g, {.normalize = true});
  auto res = solve_spatial_corrector({SPDMatrix(B), f1});
  EXPECT_LE(res.residual, 1e-10);
  // the corrected Hessian stays positive definite at every orthant
  for (std::size_t k = 0; k < g.size(); ++k)
    for (unsigned o = 0; o < 4; ++o)
      ASSERT_TRUE(is_spd(B + orthant_hessian(g, res.xi.values(), k, o)));
}

TEST(SpatialCorrector, ThreeDimensional) {
  auto g = TorusGrid::unit(3, 12);
  auto f1 = sample_function(
      [](const Vector& x) { return 1.0 + 0.2 * std::sin(2 * kPi * x[0]) * std::cos(2 * kPi * x[2]) + 0.1 * std::cos(2 * kPi * x[1]); },
      g);
  auto res = solve_spatial_corrector({SPDMatrix::identity(3), f1});
  EXPECT_LE(res.residual, 1e-10);
}

TEST(SpatialCorrector, TranslationEquivariance) {
  const int N = 32;
  auto g = TorusGrid::unit(2, N);
  auto fn = [](const Vector& x) { return 1.0 + 0.3 * std::sin(2 * kPi * x[0]) + 0.2 * std::cos(2 * kPi * (x[0] + x[1])); };
  auto f1 = sample_function(fn, g);
  // shift by 3 nodes along x1 and 5 along x2, moved back onto the samples
  std::vector<double> shifted(g.size());
  for (std::size_t k = 0; k < g.size(); ++k) {
    const Index i = g.unflatten(k);
    shifted[k] = f1[g.flatten({i[0] + 3, i[1] + 5, 0})];
  }
  CellOptions tight;
  tight.tol = 1e-13;
  auto a = solve_spatial_corrector({SPDMatrix::identity(2), f1, tight});
  auto b = solve_spatial_corrector({SPDMatrix::identity(2), PeriodicField(g, shifted), tight});
  const double offset = a.xi[g.flatten({3, 5, 0})];
  double diff = 0.0;
  for (std::size_t k = 0; k < g.size(); ++k) {
    const Index i = g.unflatten(k);
    diff = std::max(diff, std::abs(b.xi[k] - (a.xi[g.flatten({i[0] + 3, i[1] + 5, 0})] - offset)));
  }
  EXPECT_LT(diff, 1e-12);
}

TEST(SpatialCorrector, RejectsIncompatibleData) {
  auto g = TorusGrid::unit(2, 16);
  auto f1 = sample_function([](const Vector&) { return 1.01; }, g);
  try {
    solve_spatial_corrector({SPDMatrix::identity(2), f1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::compatibility);
  }
  auto neg = sample_function([](const Vector& x) { return 1.0 + 1.5 * std::cos(2 * kPi * x[0]); }, g);
  try {
    solve_spatial_corrector({SPDMatrix::identity(2), neg});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::positivity_violation);
  }
  EXPECT_THROW(solve_spatial_corrector({SPDMatrix::identity(3), f1}), Error);
}

TEST(SpatialCorrector, IterationCapReportsResidual) {
  CellOptions opt;
  opt.max_newton = 1;
  try {
    solve_spatial_corrector({SPDMatrix::identity(2), bump2d(32, 0.5), opt});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::non_convergence);
    ASSERT_TRUE(e.last_residual.has_value());
    EXPECT_GT(*e.last_residual, opt.tol);
  }
}

TEST(TemporalCorrector, SineForcingClosedForm) {
  // f2 = 1 + sin(2 pi t)/2, tau = 1: xi2(t) = (cos(2 pi t) - 1) / (4 pi)
  const int M = 512;
  auto f2 = sample_period([](double t) { return 1.0 + 0.5 * std::sin(2 * kPi * t); }, 1.0, M);
  auto xi2 = temporal_corrector(1.0, f2, 1.0);
  double err = 0.0;
  for (int k = 0; k <= M; ++k) {
    const double t = -1.0 + static_cast<double>(k) / M;
    err = std::max(err, std::abs(xi2(t) - (std::cos(2 * kPi * t) - 1.0) / (4 * kPi)));
  }
  EXPECT_LT(err, 1e-8);
  EXPECT_NEAR(xi2(-1.0), xi2(0.0), 1e-14);
  EXPECT_EQ(xi2(0.0), 0.0);
}

TEST(TemporalCorrector, PeriodicAndScalesWithTau) {
  auto f2 = sample_period([](double t) { return std::exp(0.5 * std::cos(2 * kPi * t / 0.5)); }, 0.5, 64);
  // renormalize the samples to unit mean exactly
  double m = 0.0;
  for (double v : f2) m += v;
  m /= f2.size();
  for (double& v : f2) v /= m;
  auto a = temporal_corrector(1.0, f2, 0.5);
  auto b = temporal_corrector(3.0, f2, 0.5);
  for (double t : {-0.4, -0.17, -0.01, 0.0}) {
    EXPECT_NEAR(a(t), a(t - 0.5), 1e-13);
    EXPECT_NEAR(a(t), a(t - 1.5), 1e-13);
    EXPECT_NEAR(3.0 * a(t), b(t), 1e-13);
  }
}

TEST(TemporalCorrector, Validation) {
  std::vector<double> few(4, 1.0);
  EXPECT_THROW(temporal_corrector(1.0, few, 1.0), Error);
  std::vector<double> off(16, 1.1);
  try {
    temporal_corrector(1.0, off, 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::compatibility);
  }
  EXPECT_THROW(temporal_corrector(-1.0, std::vector<double>(16, 1.0), 1.0), Error);
}

TEST(AncientSolution, StructureAndMeanIdentity) {
  Matrix A(2, 2);
  A << 1.5, 0.2, 0.2, 0.8;
  Vector b(2);
  b << 0.1, -0.3;
  auto f1 = bump2d(32, 0.3);
  auto f2 = sample_period([](double t) { return 1.0 + 0.4 * std::cos(2 * kPi * t); }, 1.0, 32);
  auto sol = build_ancient(SPDMatrix(A), b, 0.7, f1, f2, 1.0);
  EXPECT_NEAR(sol.tau() * determinant(A), 1.0, 1e-14);
  EXPECT_LT(mean_identity_check(sol, f1, f2), 1e-12);
  EXPECT_NEAR(sol.m1(), sol.tau() * 0.6, 1e-12);
  EXPECT_NEAR(sol.m2(), sol.tau() * 1.4, 1e-12);

  // u minus its affine-quadratic part is periodic in space and time
  Vector x(2);
  x << 0.23, 0.61;
  Vector shift(2);
  shift << 1.0, -2.0;
  const double t = -0.37;
  auto quad = [&](const Vector& y, double s) { return -sol.tau() * s + 0.5 * y.dot(A * y) + b.dot(y); };
  EXPECT_NEAR(sol(x, t) - quad(x, t), sol(x + shift, t - 3.0) - quad(x + shift, t - 3.0), 1e-12);
  EXPECT_NEAR(sol(x, t), quad(x, t) + sol.periodic_part(x, t), 1e-14);
  EXPECT_NEAR(sol(Vector::Zero(2), 0.0), 0.7, 1e-14);
}
