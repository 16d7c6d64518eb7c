#pragma once

// The parabolic Monge-Ampere operator -u_t det D^2 u, its linearization,
// the parabolic-convexity predicate and the closed-form paraboloid barriers.

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "pampere/error.hpp"
#include "pampere/fields.hpp"

namespace pampere {

inline bool is_symmetric(const Matrix& m, double tol = 1e-12) {
  if (m.rows() != m.cols()) return false;
  const double scale = 1.0 + m.cwiseAbs().maxCoeff();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < i; ++j)
      if (std::abs(m(i, j) - m(j, i)) > tol * scale) return false;
  return true;
}

/// Symmetric positive definite by a successful Cholesky factorization.
inline bool is_spd(const Matrix& m) {
  if (!is_symmetric(m) || !m.allFinite()) return false;
  Eigen::LLT<Matrix> llt(m);
  return llt.info() == Eigen::Success;
}

/// A matrix that has passed the SPD predicate.
class SPDMatrix {
 public:
  explicit SPDMatrix(Matrix m) : m_(std::move(m)) {
    if (!is_spd(m_))
      throw Error(ErrorKind::convexity_loss, "matrix is not symmetric positive definite");
    // exact symmetry for downstream closed forms
    m_ = 0.5 * (m_ + m_.transpose()).eval();
  }

  static SPDMatrix identity(int n) { return SPDMatrix(Matrix::Identity(n, n)); }

  const Matrix& matrix() const { return m_; }
  int dim() const { return static_cast<int>(m_.rows()); }
  double operator()(int i, int j) const { return m_(i, j); }

 private:
  Matrix m_;
};

/// Closed-form determinant for n <= 3.
inline double determinant(const Matrix& m) {
  switch (m.rows()) {
    case 1: return m(0, 0);
    case 2: return m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
    case 3:
      return m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) -
             m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0)) +
             m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
    default:
      throw Error(ErrorKind::invalid_argument, "closed-form determinant supports n <= 3");
  }
}

/// Closed-form adjugate, H * adj(H) = det(H) I, for n <= 3.
inline Matrix adjugate(const Matrix& m) {
  const auto n = m.rows();
  Matrix a(n, n);
  switch (n) {
    case 1: a(0, 0) = 1.0; break;
    case 2:
      a(0, 0) = m(1, 1);
      a(0, 1) = -m(0, 1);
      a(1, 0) = -m(1, 0);
      a(1, 1) = m(0, 0);
      break;
    case 3:
      a(0, 0) = m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1);
      a(0, 1) = m(0, 2) * m(2, 1) - m(0, 1) * m(2, 2);
      a(0, 2) = m(0, 1) * m(1, 2) - m(0, 2) * m(1, 1);
      a(1, 0) = m(1, 2) * m(2, 0) - m(1, 0) * m(2, 2);
      a(1, 1) = m(0, 0) * m(2, 2) - m(0, 2) * m(2, 0);
      a(1, 2) = m(0, 2) * m(1, 0) - m(0, 0) * m(1, 2);
      a(2, 0) = m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0);
      a(2, 1) = m(0, 1) * m(2, 0) - m(0, 0) * m(2, 1);
      a(2, 2) = m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
      break;
    default:
      throw Error(ErrorKind::invalid_argument, "closed-form adjugate supports n <= 3");
  }
  return a;
}

/// Coefficients of L = (1/u_t) D_t + u^{ij} D_ij, stored as adj(D^2u),
/// det D^2u and u_t. The derivative of -u_t det D^2u in direction
/// (dv_t, D^2 dv) is -dv_t det + (-u_t) adj : D^2 dv.
struct Linearization {
  Matrix adjugate;
  double det = 0.0;
  double ut = 0.0;

  Matrix inverse_hessian() const { return adjugate / det; }
};

inline Linearization linearize(const Matrix& hessian, double ut) {
  if (!is_spd(hessian))
    throw Error(ErrorKind::convexity_loss, "spatial Hessian is not positive definite");
  if (!(ut < 0.0))
    throw Error(ErrorKind::monotonicity_loss, "u_t must be negative");
  return {adjugate(hessian), determinant(hessian), ut};
}

template <class Grid>
struct PmaResidual {
  SpaceTimeField<Grid> residual;
  double sup = 0.0;
};

namespace detail {

template <class Grid>
void require_same_grids(const SpaceTimeField<Grid>& a, const SpaceTimeField<Grid>& b) {
  if (!(a.grid() == b.grid()) || !(a.time() == b.time()))
    throw Error(ErrorKind::grid_mismatch, "fields are sampled on different grids");
}

template <class Grid>
bool stencil_interior(const Grid& grid, std::size_t node) {
  if constexpr (Grid::periodic) {
    return true;
  } else {
    return !grid.is_boundary(node);
  }
}

}  // namespace detail

/// -u_t det D^2u - f at interior nodes and steps >= 1 (zero elsewhere),
/// with its sup norm.
template <class Grid>
PmaResidual<Grid> pma_residual(const SpaceTimeField<Grid>& u, const SpaceTimeField<Grid>& f) {
  detail::require_same_grids(u, f);
  PmaResidual<Grid> out{SpaceTimeField<Grid>(u.grid(), u.time()), 0.0};
  for (int k = 1; k <= u.time().steps(); ++k) {
    const auto slice = u.slice(k);
    for (std::size_t node = 0; node < u.grid().size(); ++node) {
      if (!detail::stencil_interior(u.grid(), node)) continue;
      const double ut = backward_dt(u, node, k);
      const double det = determinant(discrete_hessian(u.grid(), slice, node));
      const double r = -ut * det - f.at(node, k);
      out.residual.at(node, k) = r;
      out.sup = std::max(out.sup, std::abs(r));
    }
  }
  return out;
}

struct ConvexityReport {
  std::vector<bool> convex_per_step;
  double min_eigenvalue = std::numeric_limits<double>::infinity();
  double max_eigenvalue = -std::numeric_limits<double>::infinity();
  double max_ut = -std::numeric_limits<double>::infinity();
  double min_neg_ut = std::numeric_limits<double>::infinity();
  double max_neg_ut = -std::numeric_limits<double>::infinity();
  bool convex = true;
  bool monotone = true;

  bool passed() const { return convex && monotone; }
};

struct ConvexityTolerances {
  /// eigenvalue >= -relative * (1 + |H|) counts as convex
  double relative = 1e-10;
  /// u(t_k) <= u(t_{k-1}) + monotone_slack counts as nonincreasing
  double monotone_slack = 1e-10;
};

template <class Grid>
ConvexityReport check_parabolic_convexity(const SpaceTimeField<Grid>& u,
                                          ConvexityTolerances tol = {}) {
  ConvexityReport rep;
  rep.convex_per_step.assign(static_cast<std::size_t>(u.levels()), true);
  for (int k = 0; k <= u.time().steps(); ++k) {
    const auto slice = u.slice(k);
    for (std::size_t node = 0; node < u.grid().size(); ++node) {
      if (!detail::stencil_interior(u.grid(), node)) continue;
      const Matrix H = discrete_hessian(u.grid(), slice, node);
      Eigen::SelfAdjointEigenSolver<Matrix> es(H, Eigen::EigenvaluesOnly);
      const double lo = es.eigenvalues().minCoeff();
      const double hi = es.eigenvalues().maxCoeff();
      rep.min_eigenvalue = std::min(rep.min_eigenvalue, lo);
      rep.max_eigenvalue = std::max(rep.max_eigenvalue, hi);
      const double norm = std::max(std::abs(lo), std::abs(hi));
      if (lo < -tol.relative * (1.0 + norm)) {
        rep.convex_per_step[static_cast<std::size_t>(k)] = false;
        rep.convex = false;
      }
      if (k >= 1) {
        const double ut = backward_dt(u, node, k);
        rep.max_ut = std::max(rep.max_ut, ut);
        rep.min_neg_ut = std::min(rep.min_neg_ut, -ut);
        rep.max_neg_ut = std::max(rep.max_neg_ut, -ut);
        if (u.at(node, k) > u.at(node, k - 1) + tol.monotone_slack) rep.monotone = false;
      }
    }
  }
  return rep;
}

enum class BarrierKind {
  /// w1, built from a lower density bound lambda <= f; dominates solutions
  lower_density,
  /// w2, built from an upper density bound Lambda >= f; lies below solutions
  upper_density,
};

/// Paraboloid barrier w(y,s) = K(-s + c(|y|^2 - rho^2)) + H on
/// D = {s > c(|y|^2 - rho^2), s <= 0}, with K chosen so that
/// -w_s det D_y^2 w equals the density exactly.
///   w1: c = eps1 H / (eps0^2 R^2), rho^2 = eps0^2 R^2
///   w2: c = eps2 H / R^2,          rho^2 = 2 R^2
struct BarrierSpec {
  BarrierKind kind = BarrierKind::lower_density;
  int n = 1;
  double density = 1.0;  // lambda for w1, Lambda for w2
  double eps0 = 1.0;     // used by w1 only
  double eps_time = 1.0; // eps1 for w1, eps2 for w2
  double H = 1.0;
  double R = 1.0;

  void validate() const {
    detail::check_dim(n);
    if (!(density > 0 && eps0 > 0 && eps_time > 0 && H > 0 && R > 0))
      throw Error(ErrorKind::invalid_argument, "barrier parameters must be positive");
  }

  double slope() const {
    return kind == BarrierKind::lower_density ? eps_time * H / (eps0 * eps0 * R * R)
                                              : eps_time * H / (R * R);
  }
  double radius_squared() const {
    return kind == BarrierKind::lower_density ? eps0 * eps0 * R * R : 2.0 * R * R;
  }
  double coefficient() const {
    const double np1 = n + 1.0;
    return std::pow(density, 1.0 / np1) / std::pow(2.0 * slope(), n / np1);
  }
};

inline bool barrier_domain_contains(const BarrierSpec& spec, const Vector& y, double s) {
  const double c = spec.slope();
  const double edge = c * (y.squaredNorm() - spec.radius_squared());
  const double slack = 1e-12 * (std::abs(edge) + c * spec.radius_squared());
  return s <= 0.0 && s >= edge - slack;
}

/// Closed-form barrier value on the closure of its domain.
inline double barrier_eval(const BarrierSpec& spec, const Vector& y, double s) {
  spec.validate();
  if (y.size() != spec.n)
    throw Error(ErrorKind::invalid_argument, "barrier point has the wrong dimension");
  if (!barrier_domain_contains(spec, y, s))
    throw Error(ErrorKind::outside_domain, "point lies outside the barrier domain");
  const double c = spec.slope();
  return spec.coefficient() * (-s + c * (y.squaredNorm() - spec.radius_squared())) + spec.H;
}

}  // namespace pampere
