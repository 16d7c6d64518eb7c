#pragma once

// Periodic correctors and the exact ancient solutions assembled from them:
//   det(B + D^2 xi1) = det B * f1   on the torus,
//   xi2(t) = -tau * int_0^t (f2(s) - 1) ds,
//   u = gamma - tau t + x'Ax/2 + b.x + xi1(x) + xi2(t).

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "pampere/error.hpp"
#include "pampere/fields.hpp"
#include "pampere/linear_solve.hpp"
#include "pampere/mongeampere.hpp"

namespace pampere {

struct CellOptions {
  double tol = 1e-10;
  int max_newton = 30;
  int max_backtracks = 30;
  /// The pinned row absorbs the summed residual of all other rows, so the
  /// linear solves must be tight for the sup residual to drop.
  double krylov_rtol = 1e-11;
  int krylov_max_iterations = 5000;
};

struct CellProblem {
  SPDMatrix B;
  PeriodicField f1;
  CellOptions options{};
};

struct CorrectorResult {
  PeriodicField xi;
  int iterations = 0;
  double residual = 0.0;
  /// sup residual after each accepted Newton iterate, starting from xi = 0
  std::vector<double> residual_history;
};

namespace detail {

struct CellEvaluation {
  std::vector<double> residual;
  double sup = 0.0;
  bool spd = true;
};

/// Orthant-averaged determinant det_h = 2^-n sum_sigma det(B + H_sigma).
/// Summed over the torus it equals N det B for every periodic xi, so the
/// discrete cell problem is solvable whenever mean(f1) = 1.
inline CellEvaluation evaluate_cell(const CellProblem& p, std::span<const double> xi,
                                    bool stop_on_nonconvex) {
  const auto& grid = p.f1.grid();
  const int n = grid.dim();
  const unsigned orthants = 1u << n;
  const double detB = determinant(p.B.matrix());
  CellEvaluation ev;
  ev.residual.resize(grid.size());
  for (std::size_t node = 0; node < grid.size(); ++node) {
    double avg = 0.0;
    for (unsigned o = 0; o < orthants; ++o) {
      const Matrix M = p.B.matrix() + orthant_hessian(grid, xi, node, o);
      if (!is_spd(M)) {
        ev.spd = false;
        if (stop_on_nonconvex) return ev;
      }
      avg += determinant(M);
    }
    avg /= orthants;
    ev.residual[node] = avg - detB * p.f1[node];
    ev.sup = std::max(ev.sup, std::abs(ev.residual[node]));
  }
  return ev;
}

inline SparseMatrix assemble_cell_jacobian(const CellProblem& p, std::span<const double> xi) {
  const auto& grid = p.f1.grid();
  const int n = grid.dim();
  const unsigned orthants = 1u << n;
  const double w = 1.0 / orthants;
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(grid.size() * (1 + 2 * n + 4 * n * n));
  for (std::size_t node = 0; node < grid.size(); ++node) {
    const auto row = static_cast<Eigen::Index>(node);
    if (node == 0) {
      // pin the additive constant
      trip.emplace_back(row, row, 1.0);
      continue;
    }
    auto add = [&](const Index& off, double c) {
      trip.emplace_back(row, static_cast<Eigen::Index>(*grid.shifted(node, off)), c);
    };
    for (unsigned o = 0; o < orthants; ++o) {
      const Matrix adj = adjugate(p.B.matrix() + orthant_hessian(grid, xi, node, o));
      for (int i = 0; i < n; ++i) {
        const double hi = grid.spacing(i);
        const double ci = w * adj(i, i) / (hi * hi);
        add(unit_offset(i, 1), ci);
        add(unit_offset(i, -1), ci);
        add(Index{0, 0, 0}, -2.0 * ci);
        const int si = ((o >> i) & 1) ? -1 : 1;
        for (int j = 0; j < i; ++j) {
          const int sj = ((o >> j) & 1) ? -1 : 1;
          const double cij = w * 2.0 * adj(i, j) * si * sj / (hi * grid.spacing(j));
          Index oij{0, 0, 0}, oi{0, 0, 0}, oj{0, 0, 0};
          oij[i] = si; oij[j] = sj;
          oi[i] = si;
          oj[j] = sj;
          add(oij, cij);
          add(oi, -cij);
          add(oj, -cij);
          add(Index{0, 0, 0}, cij);
        }
      }
    }
  }
  SparseMatrix J(static_cast<Eigen::Index>(grid.size()), static_cast<Eigen::Index>(grid.size()));
  J.setFromTriplets(trip.begin(), trip.end());
  return J;
}

inline void remove_mean(std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  for (double& x : v) x -= m;
}

}  // namespace detail

/// Damped inexact Newton for the periodic cell problem, started from xi = 0.
/// The returned corrector is normalized to xi(0) = 0.
inline CorrectorResult solve_spatial_corrector(const CellProblem& p) {
  const auto& grid = p.f1.grid();
  const auto& opt = p.options;
  if (p.B.dim() != grid.dim())
    throw Error(ErrorKind::invalid_argument, "background matrix and torus differ in dimension");
  if (!(opt.tol > 0.0)) throw Error(ErrorKind::invalid_argument, "cell tolerance must be positive");
  if (p.f1.min() <= 0.0) throw Error(ErrorKind::positivity_violation, "f1 must be positive");
  if (std::abs(p.f1.mean() - 1.0) > 1e-12)
    throw Error(ErrorKind::compatibility, "f1 must have unit mean over the cell");

  std::vector<double> xi(grid.size(), 0.0);
  auto ev = detail::evaluate_cell(p, xi, false);
  CorrectorResult out{PeriodicField(grid), 0, ev.sup, {ev.sup}};
  double r = ev.sup;

  while (r > opt.tol) {
    if (out.iterations >= opt.max_newton)
      throw Error(ErrorKind::non_convergence, "cell Newton iteration cap reached").with_residual(r);

    const SparseMatrix J = detail::assemble_cell_jacobian(p, xi);
    Eigen::VectorXd rhs(static_cast<Eigen::Index>(grid.size()));
    for (std::size_t k = 0; k < grid.size(); ++k) rhs[static_cast<Eigen::Index>(k)] = -ev.residual[k];
    rhs[0] = 0.0;
    const Eigen::VectorXd step = solve_sparse(J, rhs, opt.krylov_rtol, opt.krylov_max_iterations);
    std::vector<double> delta(step.data(), step.data() + step.size());
    detail::remove_mean(delta);

    double alpha = 1.0;
    bool any_convex = false;
    bool accepted = false;
    std::vector<double> trial(grid.size());
    for (int bt = 0; bt <= opt.max_backtracks; ++bt, alpha *= 0.5) {
      for (std::size_t k = 0; k < grid.size(); ++k) trial[k] = xi[k] + alpha * delta[k];
      auto tev = detail::evaluate_cell(p, trial, true);
      if (!tev.spd) continue;
      any_convex = true;
      if (tev.sup < r) {
        ev = std::move(tev);
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      if (!any_convex)
        throw Error(ErrorKind::convexity_loss, "damping cannot keep B + D^2 xi positive definite")
            .with_residual(r);
      throw Error(ErrorKind::non_convergence, "cell Newton stagnated").with_residual(r);
    }
    xi.swap(trial);
    detail::remove_mean(xi);
    r = ev.sup;
    ++out.iterations;
    out.residual_history.push_back(r);
  }

  const double anchor = xi[0];
  for (double& v : xi) v -= anchor;
  out.xi = PeriodicField(grid, std::move(xi));
  out.residual = r;
  return out;
}

/// Sup-norm residual of the orthant-averaged cell operator for a given xi.
inline double cell_residual(const SPDMatrix& B, const PeriodicField& f1, const PeriodicField& xi) {
  CellProblem p{B, f1, {}};
  return detail::evaluate_cell(p, xi.values(), false).sup;
}

/// xi2(t) = -tau int_0^t (p(s) - 1) ds with p the trigonometric interpolant
/// of the f2 samples, evaluated in closed form; exactly a0-periodic.
class TemporalCorrector {
 public:
  /// re/im: Fourier coefficients of the samples of f2 - 1, modes 1..K
  TemporalCorrector(double tau, double a0, std::vector<double> f2, std::vector<double> re,
                    std::vector<double> im)
      : tau_(tau), a0_(a0), f2_(std::move(f2)), re_(std::move(re)), im_(std::move(im)) {
    nodes_.resize(f2_.size() + 1);
    for (std::size_t k = 0; k <= f2_.size(); ++k) nodes_[k] = (*this)(sample_time(static_cast<int>(k)));
    bound_interpolant();
  }

  double tau() const { return tau_; }
  double period() const { return a0_; }
  int samples() const { return static_cast<int>(f2_.size()); }
  /// xi2 at the sample times t_k, k = 0..M
  std::span<const double> nodes() const { return nodes_; }
  std::span<const double> f2() const { return f2_; }
  /// extremes of the interpolated f2 over a period
  double min_f2() const { return min_f2_; }
  double max_f2() const { return max_f2_; }
  double sample_time(int k) const { return -a0_ + k * a0_ / samples(); }

  double operator()(double t) const {
    double acc = 0.0;
    sum_modes(t, [&](int m, double c, double s) {
      acc += a0_ / (std::numbers::pi * m) * (im_[m] * (c - 1.0) + re_[m] * s);
    });
    return -tau_ * acc;
  }

  /// The interpolated f2 at time t.
  double f2_at(double t) const {
    double acc = 1.0;
    sum_modes(t, [&](int m, double c, double s) { acc += 2.0 * (re_[m] * c - im_[m] * s); });
    return acc;
  }

 private:
  /// calls fn(m, cos(2 pi m s / a0), sin(2 pi m s / a0)) for m = 1..K with
  /// s = t reduced to [0, a0)
  template <class Fn>
  void sum_modes(double t, Fn&& fn) const {
    const double s = t - a0_ * std::floor(t / a0_);
    const double th = 2.0 * std::numbers::pi * s / a0_;
    const double c1 = std::cos(th), s1 = std::sin(th);
    double c = 1.0, sn = 0.0;
    for (int m = 1; m < static_cast<int>(re_.size()); ++m) {
      const double cn = c * c1 - sn * s1;
      sn = sn * c1 + c * s1;
      c = cn;
      if (m % 16 == 0) {  // refresh to stop the rotation drifting
        c = std::cos(m * th);
        sn = std::sin(m * th);
      }
      fn(m, c, sn);
    }
  }

  double f2_slope(double t) const {
    double acc = 0.0;
    sum_modes(t, [&](int m, double c, double s) { acc += -2.0 * (re_[m] * s + im_[m] * c) * m; });
    return acc * 2.0 * std::numbers::pi / a0_;
  }

  double f2_curvature(double t) const {
    double acc = 0.0;
    sum_modes(t, [&](int m, double c, double s) { acc += -2.0 * (re_[m] * c - im_[m] * s) * m * m; });
    const double w = 2.0 * std::numbers::pi / a0_;
    return acc * w * w;
  }

  /// dense scan, then Newton on the slope from the best candidates
  void bound_interpolant() {
    const int dense = 8 * samples();
    const double dt = a0_ / dense;
    int lo = 0, hi = 0;
    std::vector<double> v(static_cast<std::size_t>(dense));
    for (int j = 0; j < dense; ++j) {
      v[j] = f2_at(j * dt);
      if (v[j] < v[lo]) lo = j;
      if (v[j] > v[hi]) hi = j;
    }
    min_f2_ = v[lo];
    max_f2_ = v[hi];
    for (double& f : f2_) {
      min_f2_ = std::min(min_f2_, f);
      max_f2_ = std::max(max_f2_, f);
    }
    auto polish = [&](double t) {
      for (int it = 0; it < 8; ++it) {
        const double curv = f2_curvature(t);
        if (curv == 0.0) break;
        const double step = f2_slope(t) / curv;
        if (!(std::abs(step) <= dt)) break;
        t -= step;
      }
      return f2_at(t);
    };
    min_f2_ = std::min(min_f2_, polish(lo * dt));
    max_f2_ = std::max(max_f2_, polish(hi * dt));
  }

  double tau_;
  double a0_;
  std::vector<double> f2_;
  std::vector<double> re_, im_;
  std::vector<double> nodes_;
  double min_f2_ = 0.0;
  double max_f2_ = 0.0;
};

/// f2 is given by M samples at t_k = -a0 + k a0 / M, k = 0..M-1. The
/// cumulative integral integrates the trigonometric interpolant of f2 - 1
/// exactly, so xi2 is periodic to rounding.
inline TemporalCorrector temporal_corrector(double tau, std::span<const double> f2, double a0) {
  if (!(tau > 0.0)) throw Error(ErrorKind::invalid_argument, "tau must be positive");
  if (!(a0 > 0.0)) throw Error(ErrorKind::invalid_argument, "temporal period must be positive");
  const int M = static_cast<int>(f2.size());
  if (M < kMinResolution)
    throw Error(ErrorKind::resolution, "need at least 8 samples of f2 per period");
  double mean = 0.0;
  for (double v : f2) {
    if (!(v > 0.0)) throw Error(ErrorKind::positivity_violation, "f2 must be positive");
    mean += v;
  }
  mean /= M;
  if (std::abs(mean - 1.0) > 1e-12)
    throw Error(ErrorKind::compatibility, "f2 must have unit mean over one period");

  // real DFT of g = f2 - 1 by table lookup; index (m k) mod M. The samples
  // start at t = -a0, which is a full period away from 0, so the phases
  // are those of t_k + a0 = k a0 / M.
  std::vector<double> cs(M), sn(M);
  for (int k = 0; k < M; ++k) {
    const double th = 2.0 * std::numbers::pi * k / M;
    cs[k] = std::cos(th);
    sn[k] = std::sin(th);
  }
  const int modes = (M - 1) / 2;  // a Nyquist mode would vanish at the nodes
  std::vector<double> re(modes + 1, 0.0), im(modes + 1, 0.0);
  for (int m = 1; m <= modes; ++m) {
    double a = 0.0, b = 0.0;
    for (int k = 0; k < M; ++k) {
      const int idx = static_cast<int>((static_cast<long long>(m) * k) % M);
      const double g = f2[k] - mean;
      a += g * cs[idx];
      b -= g * sn[idx];
    }
    re[m] = a / M;
    im[m] = b / M;
  }
  return TemporalCorrector(tau, a0, std::vector<double>(f2.begin(), f2.end()), std::move(re),
                           std::move(im));
}

struct CellDiagnostics {
  int newton_iterations = 0;
  double residual = 0.0;
  std::vector<double> residual_history;
};

class AncientSolution {
 public:
  AncientSolution(double tau, SPDMatrix A, Vector b, double gamma, PeriodicField xi1,
                  TemporalCorrector xi2, CellDiagnostics diag = {})
      : tau_(tau),
        A_(std::move(A)),
        b_(std::move(b)),
        gamma_(gamma),
        xi1_(std::move(xi1)),
        xi2_(std::move(xi2)),
        diag_(std::move(diag)) {
    if (b_.size() != A_.dim() || xi1_.grid().dim() != A_.dim())
      throw Error(ErrorKind::invalid_argument, "ancient solution parts differ in dimension");
  }

  int dim() const { return A_.dim(); }
  double tau() const { return tau_; }
  const SPDMatrix& A() const { return A_; }
  const Vector& b() const { return b_; }
  double gamma() const { return gamma_; }
  const PeriodicField& xi1() const { return xi1_; }
  const TemporalCorrector& xi2() const { return xi2_; }
  const CellDiagnostics& diagnostics() const { return diag_; }

  double spatial_period(int axis) const { return xi1_.grid().period(axis); }
  double temporal_period() const { return xi2_.period(); }
  /// empirical bounds m1 <= -u_t <= m2
  double m1() const { return tau_ * xi2_.min_f2(); }
  double m2() const { return tau_ * xi2_.max_f2(); }

  /// The periodic part v = gamma + xi1 + xi2.
  double periodic_part(const Vector& x, double t) const { return gamma_ + xi1_(x) + xi2_(t); }

  double operator()(const Vector& x, double t) const {
    return gamma_ - tau_ * t + 0.5 * x.dot(A_.matrix() * x) + b_.dot(x) + xi1_(x) + xi2_(t);
  }

 private:
  double tau_;
  SPDMatrix A_;
  Vector b_;
  double gamma_;
  PeriodicField xi1_;
  TemporalCorrector xi2_;
  CellDiagnostics diag_;
};

/// tau from tau det A = mean(f1 f2); xi1 from the cell problem with B = A.
inline AncientSolution build_ancient(const SPDMatrix& A, const Vector& b, double gamma,
                                     const PeriodicField& f1, std::span<const double> f2,
                                     double a0, CellOptions options = {}) {
  // separable samples: the cell mean of f1 f2 is the product of the means
  const double mean_f = f1.mean() * [&] {
    double s = 0.0;
    for (double v : f2) s += v;
    return s / static_cast<double>(f2.size());
  }();
  const double tau = mean_f / determinant(A.matrix());
  auto xi2 = temporal_corrector(tau, f2, a0);
  auto cell = solve_spatial_corrector(CellProblem{A, f1, options});
  CellDiagnostics diag{cell.iterations, cell.residual, cell.residual_history};
  return AncientSolution(tau, A, b, gamma, std::move(cell.xi), std::move(xi2), std::move(diag));
}

/// |tau det A - mean of f1 f2 over one space-time cell|.
inline double mean_identity_check(const AncientSolution& sol, const PeriodicField& f1,
                                  std::span<const double> f2) {
  double s = 0.0;
  for (double v : f2) s += v;
  const double mean_f = f1.mean() * s / static_cast<double>(f2.size());
  return std::abs(sol.tau() * determinant(sol.A().matrix()) - mean_f);
}

/// Samples of a one-variable function at t_k = -a0 + k a0 / M, k = 0..M-1.
template <class F>
std::vector<double> sample_period(F&& fn, double a0, int M) {
  std::vector<double> v(static_cast<std::size_t>(M));
  for (int k = 0; k < M; ++k) v[static_cast<std::size_t>(k)] = fn(-a0 + k * a0 / M);
  return v;
}

}  // namespace pampere
