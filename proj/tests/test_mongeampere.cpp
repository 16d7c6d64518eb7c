#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pampere/mongeampere.hpp"

using namespace pampere;

namespace {

// Gauss-Jordan elimination with partial pivoting; independent of Eigen's
// decompositions and of the closed-form adjugate.
Matrix gauss_jordan_inverse(Matrix a) {
  const auto n = a.rows();
  Matrix inv = Matrix::Identity(n, n);
  for (Eigen::Index c = 0; c < n; ++c) {
    Eigen::Index piv = c;
    for (Eigen::Index r = c + 1; r < n; ++r)
      if (std::abs(a(r, c)) > std::abs(a(piv, c))) piv = r;
    a.row(c).swap(a.row(piv));
    inv.row(c).swap(inv.row(piv));
    const double d = a(c, c);
    a.row(c) /= d;
    inv.row(c) /= d;
    for (Eigen::Index r = 0; r < n; ++r) {
      if (r == c) continue;
      const double m = a(r, c);
      a.row(r) -= m * a.row(c);
      inv.row(r) -= m * inv.row(c);
    }
  }
  return inv;
}

Matrix random_spd(std::mt19937_64& rng, int n, double cond) {
  std::normal_distribution<double> N01;
  Matrix g(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) g(i, j) = N01(rng);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix Q = qr.householderQ();
  Vector ev(n);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  for (int i = 0; i < n; ++i) ev[i] = std::pow(cond, U(rng));
  ev[0] = 1.0;
  ev[n - 1] = cond;
  Matrix m = Q * ev.asDiagonal() * Q.transpose();
  return 0.5 * (m + m.transpose());
}

SpaceTimeField<BoxGrid> sampled(const SpaceTimeFunction& fn) {
  return sample_space_time(BoxGrid::cube(2, -1.0, 1.0, 8), TimeGrid(-1.0, 8), fn);
}

}  // namespace

TEST(Linearize, IdentityAndDiagonal) {
  auto lin = linearize(Matrix::Identity(2, 2), -1.0);
  EXPECT_TRUE(lin.adjugate.isApprox(Matrix::Identity(2, 2)));
  EXPECT_DOUBLE_EQ(lin.det, 1.0);

  Matrix d(2, 2);
  d << 2, 0, 0, 3;
  auto lin2 = linearize(d, -0.5);
  Matrix expect(2, 2);
  expect << 3, 0, 0, 2;
  EXPECT_TRUE(lin2.adjugate.isApprox(expect));
  EXPECT_DOUBLE_EQ(lin2.det, 6.0);
  EXPECT_DOUBLE_EQ(lin2.ut, -0.5);
}

TEST(Linearize, AdjugateMatchesGaussianEliminationOracle) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const Matrix H = random_spd(rng, 3, 1e4);
    const auto lin = linearize(H, -1.0);
    const Matrix oracle = lin.det * gauss_jordan_inverse(H);
    ASSERT_LT((lin.adjugate - oracle).cwiseAbs().maxCoeff(), 1e-9 * std::max(1.0, oracle.cwiseAbs().maxCoeff()));
    const Matrix defect = H * lin.adjugate - lin.det * Matrix::Identity(3, 3);
    ASSERT_LE(defect.cwiseAbs().maxCoeff(), 1e-10 * lin.det * 1e4);
  }
}

TEST(Linearize, RejectsLossOfConvexityOrMonotonicity) {
  Matrix bad(2, 2);
  bad << 1, 2, 2, 1;
  try {
    linearize(bad, -1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::convexity_loss);
  }
  try {
    linearize(Matrix::Identity(2, 2), 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::monotonicity_loss);
  }
}

TEST(PmaResidual, ZeroAndUnitResidualOnQuadratics) {
  auto ones = sampled([](const Vector&, double) { return 1.0; });
  auto u = sampled([](const Vector& x, double t) { return -t + 0.5 * x.squaredNorm(); });
  EXPECT_LT(pma_residual(u, ones).sup, 1e-12);

  auto u2 = sampled([](const Vector& x, double t) { return -2.0 * t + 0.5 * x.squaredNorm(); });
  auto r = pma_residual(u2, ones);
  EXPECT_NEAR(r.sup, 1.0, 1e-12);
  const auto& grid = u2.grid();
  for (auto node : grid.interior_nodes()) EXPECT_NEAR(r.residual.at(node, 3), 1.0, 1e-12);
}

TEST(PmaResidual, GridMismatch) {
  auto u = sampled([](const Vector& x, double t) { return -t + x.squaredNorm(); });
  auto f = sample_space_time(BoxGrid::cube(2, -1.0, 1.0, 10), TimeGrid(-1.0, 8),
                             [](const Vector&, double) { return 1.0; });
  try {
    pma_residual(u, f);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::grid_mismatch);
  }
}

TEST(ParabolicConvexity, Verdicts) {
  auto good = check_parabolic_convexity(sampled([](const Vector& x, double t) { return -t + 0.5 * x.squaredNorm(); }));
  EXPECT_TRUE(good.passed());
  EXPECT_NEAR(good.min_eigenvalue, 1.0, 1e-12);
  EXPECT_NEAR(good.min_neg_ut, 1.0, 1e-12);
  EXPECT_NEAR(good.max_neg_ut, 1.0, 1e-12);

  auto rising = check_parabolic_convexity(sampled([](const Vector& x, double t) { return t + 0.5 * x.squaredNorm(); }));
  EXPECT_TRUE(rising.convex);
  EXPECT_FALSE(rising.monotone);
  EXPECT_FALSE(rising.passed());

  auto concave = check_parabolic_convexity(sampled([](const Vector& x, double t) { return -t - 0.5 * x.squaredNorm(); }));
  EXPECT_FALSE(concave.convex);
  EXPECT_NEAR(concave.min_eigenvalue, -1.0, 1e-12);
  for (bool flag : concave.convex_per_step) EXPECT_FALSE(flag);
}

namespace {

BarrierSpec lower_spec(int n) {
  BarrierSpec s;
  s.kind = BarrierKind::lower_density;
  s.n = n;
  s.density = 0.7;
  s.eps0 = 0.3;
  s.eps_time = 0.2;
  s.H = 2.0;
  s.R = 1.5;
  return s;
}

// -w_s det D^2 w by central differences of the closed form
double fd_operator(const BarrierSpec& s, const Vector& y, double t, double h, double dt) {
  const int n = s.n;
  Matrix H(n, n);
  const double c = barrier_eval(s, y, t);
  for (int i = 0; i < n; ++i) {
    Vector ei = Vector::Zero(n);
    ei[i] = h;
    H(i, i) = (barrier_eval(s, y + ei, t) + barrier_eval(s, y - ei, t) - 2 * c) / (h * h);
    for (int j = 0; j < i; ++j) {
      Vector ej = Vector::Zero(n);
      ej[j] = h;
      H(i, j) = H(j, i) = (barrier_eval(s, y + ei + ej, t) - barrier_eval(s, y + ei - ej, t) -
                           barrier_eval(s, y - ei + ej, t) + barrier_eval(s, y - ei - ej, t)) /
                          (4 * h * h);
    }
  }
  const double ws = (c - barrier_eval(s, y, t - dt)) / dt;
  return -ws * determinant(H);
}

}  // namespace

TEST(Barrier, FiniteDifferenceSubstitutionRecoversDensity) {
  std::mt19937_64 rng(5);
  for (int n = 1; n <= 3; ++n) {
    for (auto kind : {BarrierKind::lower_density, BarrierKind::upper_density}) {
      BarrierSpec s = lower_spec(n);
      s.kind = kind;
      if (kind == BarrierKind::upper_density) s.density = 3.0;
      const double rho = std::sqrt(s.radius_squared());
      const double depth = s.slope() * s.radius_squared();
      std::uniform_real_distribution<double> U(-1.0, 1.0);
      int checked = 0;
      while (checked < 100) {
        Vector y(n);
        for (int i = 0; i < n; ++i) y[i] = 0.5 * rho * U(rng) / std::sqrt(n);
        const double t = -0.2 * depth - 0.3 * depth * (0.5 + 0.5 * U(rng));
        if (!barrier_domain_contains(s, y, t) || !barrier_domain_contains(s, y, t - 1e-4)) continue;
        // Hessian is constant and w is affine in s: only rounding remains
        EXPECT_NEAR(fd_operator(s, y, t, 1e-3 * rho, 1e-4), s.density, 1e-6 * std::max(1.0, s.density));
        ++checked;
      }
    }
  }
}

TEST(Barrier, LateralBoundaryValueIsH) {
  BarrierSpec s = lower_spec(2);
  for (double r : {0.0, 0.1, 0.3, 0.4}) {
    Vector y(2);
    y << r, -0.5 * r;
    const double edge = s.slope() * (y.squaredNorm() - s.radius_squared());
    EXPECT_NEAR(barrier_eval(s, y, edge), s.H, 1e-12);
  }
}

TEST(Barrier, HandEvaluatedUnitCase) {
  // n = 1, lambda = eps0 = eps1 = H = R = 1: c = 1, K = 1 / 2^{1/2},
  // w1(0,0) = K (0 + (0 - 1)) + 1
  BarrierSpec s;
  s.kind = BarrierKind::lower_density;
  s.n = 1;
  s.density = s.eps0 = s.eps_time = s.H = s.R = 1.0;
  EXPECT_NEAR(s.coefficient(), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(barrier_eval(s, Vector::Zero(1), 0.0), 1.0 - 1.0 / std::sqrt(2.0), 1e-15);
}

TEST(Barrier, OutsideDomain) {
  BarrierSpec s = lower_spec(2);
  Vector far(2);
  far << 10.0, 0.0;
  try {
    barrier_eval(s, far, 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::outside_domain);
  }
  EXPECT_THROW(barrier_eval(s, Vector::Zero(2), 0.1), Error);
}
