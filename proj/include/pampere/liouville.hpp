#pragma once

// Difference quotients, the quotient subsolution check, recovery of the
// decomposition u = gamma - tau t + x'Ax/2 + b.x + v, the asymptotic ratio,
// and sublevel-set geometry (minimum-volume enclosing ellipsoids).

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "pampere/error.hpp"
#include "pampere/fields.hpp"
#include "pampere/mongeampere.hpp"

namespace pampere {

using Evaluator = std::function<double(const Vector&, double)>;

/// Integer combinations k_1 a_1 e_1 + ... + k_n a_n e_n of the period vectors.
class LatticeDirectionSet {
 public:
  explicit LatticeDirectionSet(std::vector<double> periods) : periods_(std::move(periods)) {
    detail::check_dim(static_cast<int>(periods_.size()));
    for (double a : periods_)
      if (!(a > 0.0)) throw Error(ErrorKind::invalid_argument, "periods must be positive");
  }

  int dim() const { return static_cast<int>(periods_.size()); }
  double period(int axis) const { return periods_[axis]; }

  void add(const std::vector<int>& k) {
    if (static_cast<int>(k.size()) != dim())
      throw Error(ErrorKind::invalid_argument, "lattice coefficients have the wrong length");
    bool zero = true;
    for (int c : k) zero = zero && c == 0;
    if (zero) throw Error(ErrorKind::invalid_argument, "lattice direction must be nonzero");
    coeffs_.push_back(k);
  }

  /// The unit period vectors a_i e_i and, for n >= 2, all pairwise sums.
  static LatticeDirectionSet standard(std::vector<double> periods) {
    LatticeDirectionSet set(std::move(periods));
    const int n = set.dim();
    for (int i = 0; i < n; ++i) {
      std::vector<int> k(n, 0);
      k[i] = 1;
      set.add(k);
    }
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) {
        std::vector<int> k(n, 0);
        k[i] = k[j] = 1;
        set.add(k);
      }
    return set;
  }

  /// Nonzero direction with coefficients uniform in [-max_coeff, max_coeff].
  template <class Rng>
  Vector random(Rng& rng, int max_coeff) const {
    std::uniform_int_distribution<int> U(-max_coeff, max_coeff);
    std::vector<int> k(dim(), 0);
    bool zero = true;
    while (zero) {
      for (int& c : k) c = U(rng);
      zero = std::all_of(k.begin(), k.end(), [](int c) { return c == 0; });
    }
    return to_vector(k);
  }

  std::size_t size() const { return coeffs_.size(); }
  const std::vector<int>& coefficients(std::size_t i) const { return coeffs_[i]; }
  Vector operator[](std::size_t i) const { return to_vector(coeffs_[i]); }

 private:
  Vector to_vector(const std::vector<int>& k) const {
    Vector e(dim());
    for (int a = 0; a < dim(); ++a) e[a] = k[a] * periods_[a];
    return e;
  }

  std::vector<double> periods_;
  std::vector<std::vector<int>> coeffs_;
};

/// (u(x+e,t) + u(x-e,t) - 2u(x,t)) / |e|^2
inline double second_diff_quotient(const Evaluator& u, const Vector& e, const Vector& x, double t) {
  const double e2 = e.squaredNorm();
  if (!(e2 > 0.0)) throw Error(ErrorKind::invalid_argument, "direction must be nonzero");
  if (t > 0.0) throw Error(ErrorKind::outside_domain, "ancient solutions live at t <= 0");
  return (u(x + e, t) + u(x - e, t) - 2.0 * u(x, t)) / e2;
}

/// Grid version: e is a node offset, so x +- e must stay inside the box.
inline double second_diff_quotient(const SpaceTimeField<BoxGrid>& u, const Index& e,
                                   std::size_t node, int step) {
  const auto& g = u.grid();
  const auto up = g.shifted(node, e);
  const Index neg{-e[0], -e[1], -e[2]};
  const auto dn = g.shifted(node, neg);
  if (!up || !dn)
    throw Error(ErrorKind::outside_domain, "x +- e leaves the sampling box")
        .with_node(static_cast<long>(node));
  double e2 = 0.0;
  for (int a = 0; a < g.dim(); ++a) e2 += std::pow(e[a] * g.spacing(a), 2);
  if (!(e2 > 0.0)) throw Error(ErrorKind::invalid_argument, "direction must be nonzero");
  return (u.at(*up, step) + u.at(*dn, step) - 2.0 * u.at(node, step)) / e2;
}

/// (u(x,t) - u(x,t-k)) / k
inline double time_diff_quotient(const Evaluator& u, double k, const Vector& x, double t) {
  if (!(k > 0.0)) throw Error(ErrorKind::invalid_argument, "time lag must be positive");
  if (t > 0.0) throw Error(ErrorKind::outside_domain, "ancient solutions live at t <= 0");
  return (u(x, t) - u(x, t - k)) / k;
}

struct QuotientCheck {
  /// minimum over checked nodes of (1/u_t) D_t q + u^{ij} D_ij q, q = Delta_e^2 u
  double min_value = std::numeric_limits<double>::infinity();
  std::size_t nodes_checked = 0;
  std::optional<std::size_t> argmin_node;
  std::optional<int> argmin_step;
};

namespace detail {

/// The discrete operator applied to q where q is known (mask) on a trajectory.
inline QuotientCheck apply_quotient_operator(const SpaceTimeField<BoxGrid>& u,
                                             const SpaceTimeField<BoxGrid>& q,
                                             const std::vector<char>& known) {
  const auto& g = u.grid();
  const int n = g.dim();
  const std::size_t N = g.size();
  QuotientCheck out;
  for (int k = 1; k <= u.time().steps(); ++k) {
    const auto us = u.slice(k);
    const auto qs = q.slice(k);
    for (std::size_t node = 0; node < N; ++node) {
      if (g.is_boundary(node) || !known[k * N + node] || !known[(k - 1) * N + node]) continue;
      bool ok = true;
      for (int i = 0; i < n && ok; ++i)
        for (int j = 0; j <= i && ok; ++j)
          for (int si : {-1, 1})
            for (int sj : {-1, 1}) {
              Index off{0, 0, 0};
              off[i] += si;
              if (j != i) off[j] += sj;
              const auto nb = g.shifted(node, off);
              if (!nb || !known[k * N + *nb]) ok = false;
            }
      if (!ok) continue;
      const double ut = backward_dt(u, node, k);
      const auto lin = linearize(discrete_hessian(g, us, node), ut);
      const Matrix Dq = discrete_hessian(g, qs, node);
      const double v = backward_dt(q, node, k) / ut + (lin.inverse_hessian().cwiseProduct(Dq)).sum();
      ++out.nodes_checked;
      if (v < out.min_value) {
        out.min_value = v;
        out.argmin_node = node;
        out.argmin_step = k;
      }
    }
  }
  return out;
}

}  // namespace detail

/// Lemma-type check on a computed trajectory; e is a node offset.
inline QuotientCheck check_quotient_subsolution(const SpaceTimeField<BoxGrid>& u, const Index& e) {
  const auto& g = u.grid();
  const std::size_t N = g.size();
  SpaceTimeField<BoxGrid> q(g, u.time());
  std::vector<char> known(N * static_cast<std::size_t>(u.levels()), 0);
  const Index neg{-e[0], -e[1], -e[2]};
  for (int k = 0; k <= u.time().steps(); ++k)
    for (std::size_t node = 0; node < N; ++node) {
      if (!g.shifted(node, e) || !g.shifted(node, neg)) continue;
      q.at(node, k) = second_diff_quotient(u, e, node, k);
      known[k * N + node] = 1;
    }
  return detail::apply_quotient_operator(u, q, known);
}

/// Evaluator version: u is sampled on `window` x `time`; q = Delta_e^2 u is
/// evaluated in closed form at the sample nodes.
inline QuotientCheck check_quotient_subsolution(const Evaluator& u, const Vector& e,
                                                const BoxGrid& window, const TimeGrid& time) {
  auto us = sample_space_time(window, time, u);
  auto q = sample_space_time(window, time, [&](const Vector& x, double t) {
    return second_diff_quotient(u, e, x, t);
  });
  std::vector<char> known(window.size() * static_cast<std::size_t>(us.levels()), 1);
  return detail::apply_quotient_operator(us, q, known);
}

struct DecompositionResiduals {
  double spatial_periodicity = 0.0;
  double temporal_periodicity = 0.0;
  std::optional<double> pde_residual;
  std::optional<double> mean_identity;
};

struct DecompositionFit {
  double tau = 0.0;
  SPDMatrix A = SPDMatrix::identity(1);
  Vector b;
  double gamma = 0.0;
  std::vector<double> periods;
  double temporal_period = 0.0;
  /// v samples: one PeriodicField per time sample t_k = -a0 + k a0 / M
  TorusGrid cell_grid = TorusGrid::unit(1, kMinResolution);
  std::vector<PeriodicField> v;
  DecompositionResiduals residuals;

  double quadratic_part(const Vector& x, double t) const {
    return gamma - tau * t + 0.5 * x.dot(A.matrix() * x) + b.dot(x);
  }
};

struct FitOptions {
  /// samples of v per spatial period and per temporal period
  int spatial_samples = 16;
  int temporal_samples = 16;
  /// density f = f1 f2 for the PDE residual and the mean identity (optional)
  Evaluator f{};
};

/// Recovers (tau, A, b, gamma) from lattice difference quotients at the
/// origin and samples the remainder v over one space-time cell.
inline DecompositionFit fit_decomposition(const Evaluator& u, const std::vector<double>& periods,
                                          double a0, const FitOptions& opt = {}) {
  const int n = static_cast<int>(periods.size());
  detail::check_dim(n);
  if (!(a0 > 0.0)) throw Error(ErrorKind::invalid_argument, "temporal period must be positive");
  const Vector zero = Vector::Zero(n);
  const double u00 = u(zero, 0.0);

  DecompositionFit fit;
  fit.periods = periods;
  fit.temporal_period = a0;
  fit.tau = (u(zero, -a0) - u00) / a0;

  Matrix A(n, n);
  auto axis = [&](int i) {
    Vector e = Vector::Zero(n);
    e[i] = periods[i];
    return e;
  };
  for (int i = 0; i < n; ++i) {
    const Vector e = axis(i);
    A(i, i) = second_diff_quotient(u, e, zero, 0.0);
  }
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < i; ++j) {
      const Vector e = axis(i) + axis(j);
      const double ai = periods[i], aj = periods[j];
      A(i, j) = A(j, i) = (e.squaredNorm() * second_diff_quotient(u, e, zero, 0.0) -
                           ai * ai * A(i, i) - aj * aj * A(j, j)) /
                          (2.0 * ai * aj);
    }
  if (!is_spd(A)) throw Error(ErrorKind::fit_failure, "recovered A is not positive definite");
  fit.A = SPDMatrix(A);
  fit.b = Vector(n);
  for (int i = 0; i < n; ++i) {
    const Vector e = axis(i);
    fit.b[i] = (u(e, 0.0) - u(-e, 0.0)) / (2.0 * periods[i]);
  }
  fit.gamma = u00;
  if (!(fit.tau > 0.0)) throw Error(ErrorKind::fit_failure, "recovered tau is not positive");

  auto v = [&](const Vector& x, double t) { return u(x, t) - fit.quadratic_part(x, t); };
  const int S = std::max(opt.spatial_samples, kMinResolution);
  const int M = std::max(opt.temporal_samples, kMinResolution);
  fit.cell_grid = TorusGrid(periods, std::vector<int>(n, S));
  const auto& cg = fit.cell_grid;
  for (int k = 0; k < M; ++k) {
    const double t = -a0 + k * a0 / M;
    std::vector<double> vals(cg.size());
    for (std::size_t node = 0; node < cg.size(); ++node) {
      const Vector x = cg.coord(node);
      vals[node] = v(x, t);
      for (int i = 0; i < n; ++i)
        fit.residuals.spatial_periodicity =
            std::max(fit.residuals.spatial_periodicity, std::abs(v(x + axis(i), t) - vals[node]));
      fit.residuals.temporal_periodicity =
          std::max(fit.residuals.temporal_periodicity, std::abs(v(x, t - a0) - vals[node]));
    }
    fit.v.emplace_back(cg, std::move(vals));
  }

  if (opt.f) {
    // central Hessian and backward time difference with steps on the sample lattice
    double res = 0.0, mean_f = 0.0;
    const double dt = a0 / M;
    for (int k = 0; k < M; ++k) {
      const double t = -a0 + k * a0 / M;
      for (std::size_t node = 0; node < cg.size(); ++node) {
        const Vector x = cg.coord(node);
        const double fx = opt.f(x, t);
        mean_f += fx;
        Matrix H(n, n);
        const double c = u(x, t);
        for (int i = 0; i < n; ++i) {
          Vector ei = Vector::Zero(n);
          ei[i] = cg.spacing(i);
          H(i, i) = (u(x + ei, t) + u(x - ei, t) - 2.0 * c) / (ei[i] * ei[i]);
          for (int j = 0; j < i; ++j) {
            Vector ej = Vector::Zero(n);
            ej[j] = cg.spacing(j);
            H(i, j) = H(j, i) = (u(x + ei + ej, t) - u(x + ei - ej, t) - u(x - ei + ej, t) +
                                 u(x - ei - ej, t)) /
                                (4.0 * ei[i] * ej[j]);
          }
        }
        const double ut = (c - u(x, t - dt)) / dt;
        res = std::max(res, std::abs(-ut * determinant(H) - fx));
      }
    }
    mean_f /= static_cast<double>(M) * static_cast<double>(cg.size());
    fit.residuals.pde_residual = res;
    fit.residuals.mean_identity = std::abs(fit.tau * determinant(fit.A.matrix()) - mean_f);
  }
  return fit;
}

struct AsymptoticReport {
  std::vector<double> radii;
  /// max over the samples at each radius
  std::vector<double> ratios;
  double max_ratio = 0.0;
};

/// |u - (x'Ax/2 - tau t)| / (|x|^2 - t)^{(4-eps)/4} on the parabolic spheres
/// |x|^2 - t = r^2. The same seeded (direction, split) samples are reused
/// at every radius.
inline AsymptoticReport asymptotic_check(const Evaluator& u, const DecompositionFit& fit,
                                         const std::vector<double>& radii, double eps,
                                         int samples = 256, std::uint64_t seed = 0) {
  if (!(eps > 0.0 && eps < 1.0)) throw Error(ErrorKind::invalid_argument, "exponent eps must lie in (0,1)");
  const int n = fit.A.dim();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N01;
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::vector<Vector> dirs;
  std::vector<double> split;
  for (int s = 0; s < samples; ++s) {
    Vector d(n);
    for (int i = 0; i < n; ++i) d[i] = N01(rng);
    dirs.push_back(d.normalized());
    split.push_back(U(rng));
  }
  AsymptoticReport rep;
  for (double r : radii) {
    if (!(r > 0.0)) throw Error(ErrorKind::invalid_argument, "radii must be positive");
    const double r2 = r * r;
    const double denom = std::pow(r2, (4.0 - eps) / 4.0);
    double worst = 0.0;
    for (int s = 0; s < samples; ++s) {
      const Vector x = std::sqrt(r2 * split[s]) * dirs[s];
      const double t = -r2 * (1.0 - split[s]);
      const double model = 0.5 * x.dot(fit.A.matrix() * x) - fit.tau * t;
      worst = std::max(worst, std::abs(u(x, t) - model) / denom);
    }
    rep.radii.push_back(r);
    rep.ratios.push_back(worst);
    rep.max_ratio = std::max(rep.max_ratio, worst);
  }
  return rep;
}

struct Ellipsoid {
  Vector center;
  /// {x : (x - c)' M (x - c) <= 1}
  Matrix shape;
  int iterations = 0;
};

/// Minimum-volume enclosing ellipsoid by Khachiyan's barycentric ascent with
/// Todd-Yildirim away steps, stopped when both optimality gaps are <= tol;
/// the result is rescaled so every point is contained.
inline Ellipsoid mvee(const std::vector<Vector>& points, double tol = 1e-6, int max_iterations = 200000) {
  if (points.empty()) throw Error(ErrorKind::invalid_argument, "MVEE of an empty point set");
  const int n = static_cast<int>(points[0].size());
  const int m = static_cast<int>(points.size());
  if (m < n + 1) throw Error(ErrorKind::invalid_argument, "MVEE needs at least n + 1 points");
  const int d = n + 1;
  Matrix Q(d, m);
  for (int j = 0; j < m; ++j) {
    Q.col(j).head(n) = points[j];
    Q(n, j) = 1.0;
  }
  Vector w = Vector::Constant(m, 1.0 / m);
  Vector g(m);
  int it = 0;
  for (;; ++it) {
    if (it >= max_iterations)
      throw Error(ErrorKind::non_convergence, "MVEE iteration cap reached");
    const Matrix X = Q * w.asDiagonal() * Q.transpose();
    Eigen::LLT<Matrix> llt(X);
    if (llt.info() != Eigen::Success)
      throw Error(ErrorKind::invalid_argument, "points do not span the space");
    const Matrix Y = llt.solve(Q);
    g = (Q.cwiseProduct(Y)).colwise().sum().transpose();
    int jp = 0, jm = -1;
    for (int j = 0; j < m; ++j) {
      if (g[j] > g[jp]) jp = j;
      if (w[j] > 0.0 && (jm < 0 || g[j] < g[jm])) jm = j;
    }
    const double eps_plus = g[jp] / d - 1.0;
    const double eps_minus = 1.0 - g[jm] / d;
    if (eps_plus <= tol && eps_minus <= tol) break;
    if (eps_plus >= eps_minus) {
      const double beta = (g[jp] - d) / (d * (g[jp] - 1.0));
      w *= 1.0 - beta;
      w[jp] += beta;
    } else {
      double beta = (d - g[jm]) / (d * (g[jm] - 1.0));
      beta = std::min(beta, w[jm] / (1.0 - w[jm]));
      w *= 1.0 + beta;
      w[jm] -= beta;
      if (w[jm] < 0.0) w[jm] = 0.0;
    }
  }
  Matrix P(n, m);
  for (int j = 0; j < m; ++j) P.col(j) = points[j];
  const Vector c = P * w;
  const Matrix S = P * w.asDiagonal() * P.transpose() - c * c.transpose();
  Matrix M = S.inverse() / n;
  M = 0.5 * (M + M.transpose()).eval();
  double worst = 0.0;
  for (const auto& p : points) worst = std::max(worst, (p - c).dot(M * (p - c)));
  if (worst > 1.0) M /= worst;
  return {c, M, it};
}

/// Distance from q to the convex hull of `points`, decided against
/// `threshold` by Frank-Wolfe: returns true once an iterate is within the
/// threshold, false once the duality-gap bound certifies it is not.
inline bool within_hull_distance(const std::vector<Vector>& points, const Vector& q, double threshold,
                                 int max_iterations = 100000) {
  Vector x = points[0];
  for (const auto& p : points)
    if ((p - q).squaredNorm() < (x - q).squaredNorm()) x = p;
  for (int it = 0; it < max_iterations; ++it) {
    const Vector r = x - q;
    const double dist = r.norm();
    if (dist <= threshold) return true;
    std::size_t s = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < points.size(); ++j) {
      const double v = r.dot(points[j]);
      if (v < best) {
        best = v;
        s = j;
      }
    }
    const double gap = r.dot(x) - best;
    // every hull point y has r.(y - q) >= |r|^2 - gap
    if ((dist * dist - gap) / dist > threshold) return false;
    const Vector dir = points[s] - x;
    const double dd = dir.squaredNorm();
    if (dd == 0.0) return false;
    const double step = std::clamp(-r.dot(dir) / dd, 0.0, 1.0);
    x += step * dir;
  }
  throw Error(ErrorKind::non_convergence, "hull distance undecided");
}

inline double john_factor(int n) { return std::pow(static_cast<double>(n), -1.5); }

struct LevelSetReport {
  double H = 0.0;
  std::vector<Vector> inliers;
  /// linear-interpolation crossings of u = H on grid edges
  std::vector<Vector> boundary;
  Ellipsoid ellipsoid;
  /// a_H = R M^{1/2}, det a_H = 1, maps the MVEE onto B_R after b_H
  Matrix a_H;
  Vector b_H;
  double R = 0.0;
  double ratio = 0.0;  // H / R^2
  double alpha = 0.0;
  double cell = 0.0;   // one grid-cell diagonal
  bool contains_inliers = false;
  bool john_inner = false;
};

/// Sublevel set {x : u0(x) < H} on the window grid, its MVEE and John flags.
inline LevelSetReport level_set_report(const ScalarFunction& u0, double H, const BoxGrid& window,
                                       int inner_samples = 64) {
  const int n = window.dim();
  const auto vals = sample_nodes(window, u0);
  LevelSetReport rep;
  rep.H = H;
  rep.alpha = john_factor(n);
  for (int a = 0; a < n; ++a) rep.cell += window.spacing(a) * window.spacing(a);
  rep.cell = std::sqrt(rep.cell);
  for (std::size_t node = 0; node < window.size(); ++node) {
    if (!(vals[node] < H)) continue;
    if (window.is_boundary(node))
      throw Error(ErrorKind::clipped_level_set, "sublevel set touches the window boundary")
          .with_node(static_cast<long>(node));
    rep.inliers.push_back(window.coord(node));
    for (int a = 0; a < n; ++a)
      for (int sgn : {-1, 1}) {
        const auto nb = window.shifted(node, detail::unit_offset(a, sgn));
        if (!nb || vals[*nb] < H) continue;
        const double s = (H - vals[node]) / (vals[*nb] - vals[node]);
        rep.boundary.push_back(window.coord(node) + s * (window.coord(*nb) - window.coord(node)));
      }
  }
  if (rep.boundary.size() < static_cast<std::size_t>(n + 1))
    throw Error(ErrorKind::resolution, "sublevel set is not resolved by the window grid");

  rep.ellipsoid = mvee(rep.boundary);
  const Matrix& M = rep.ellipsoid.shape;
  const Vector& c = rep.ellipsoid.center;
  Eigen::SelfAdjointEigenSolver<Matrix> es(M);
  const Matrix sqrtM = es.operatorSqrt();
  rep.R = std::pow(es.eigenvalues().prod(), -1.0 / (2.0 * n));
  rep.a_H = rep.R * sqrtM;
  rep.b_H = -rep.a_H * c;
  rep.ratio = H / (rep.R * rep.R);

  rep.contains_inliers = true;
  for (const auto& p : rep.inliers)
    if ((p - c).dot(M * (p - c)) > 1.0 + 1e-9) rep.contains_inliers = false;

  // boundary of the alpha-shrunken MVEE: c + alpha M^{-1/2} theta
  std::vector<Vector> hull = rep.inliers;
  hull.insert(hull.end(), rep.boundary.begin(), rep.boundary.end());
  const Matrix inv_sqrt = es.operatorInverseSqrt();
  std::vector<Vector> dirs;
  if (n == 1) {
    dirs = {Vector::Constant(1, 1.0), Vector::Constant(1, -1.0)};
  } else {
    std::mt19937_64 rng(12345);
    std::normal_distribution<double> N01;
    for (int s = 0; s < inner_samples; ++s) {
      Vector d(n);
      if (n == 2) {
        const double th = 2.0 * std::numbers::pi * s / inner_samples;
        d << std::cos(th), std::sin(th);
      } else {
        for (int i = 0; i < n; ++i) d[i] = N01(rng);
      }
      dirs.push_back(d.normalized());
    }
  }
  rep.john_inner = true;
  for (const auto& d : dirs)
    if (!within_hull_distance(hull, c + rep.alpha * inv_sqrt * d, rep.cell)) rep.john_inner = false;
  return rep;
}

/// u(x + x*, t) - u(x*, 0) with x* the minimizer of u(., 0) over the window
/// nodes, refined by Newton steps on central differences.
inline Evaluator normalize_at_minimum(const Evaluator& u, const BoxGrid& window) {
  const int n = window.dim();
  std::size_t best = 0;
  double bv = std::numeric_limits<double>::infinity();
  for (std::size_t node = 0; node < window.size(); ++node) {
    const double v = u(window.coord(node), 0.0);
    if (v < bv) {
      bv = v;
      best = node;
    }
  }
  Vector x = window.coord(best);
  double h = 0.5 * window.spacing(0);
  for (int it = 0; it < 20; ++it) {
    Vector grad(n);
    Matrix H(n, n);
    const double c = u(x, 0.0);
    for (int i = 0; i < n; ++i) {
      Vector ei = Vector::Zero(n);
      ei[i] = h;
      grad[i] = (u(x + ei, 0.0) - u(x - ei, 0.0)) / (2 * h);
      H(i, i) = (u(x + ei, 0.0) + u(x - ei, 0.0) - 2 * c) / (h * h);
      for (int j = 0; j < i; ++j) {
        Vector ej = Vector::Zero(n);
        ej[j] = h;
        H(i, j) = H(j, i) = (u(x + ei + ej, 0.0) - u(x + ei - ej, 0.0) - u(x - ei + ej, 0.0) +
                             u(x - ei - ej, 0.0)) /
                            (4 * h * h);
      }
    }
    if (!is_spd(H)) break;
    const Vector step = H.llt().solve(grad);
    if (u(x - step, 0.0) >= c) break;
    x -= step;
    if (step.norm() < 1e-12) break;
  }
  const double base = u(x, 0.0);
  return [u, x, base](const Vector& y, double t) { return u(y + x, t) - base; };
}

struct JohnNormalizationReport {
  double eps0 = 0.0, eps1 = 0.0, eps2 = 0.0;
  /// B_{eps0 R} x (-eps1 H, 0] inside the normalized sublevel set
  bool inner_box = false;
  /// Q_{(1 - alpha/4) H}(0) x [-eps1 H, 0] inside the sublevel set
  bool sublevel_cylinder = false;
  /// normalized sublevel set inside B_R x (-eps2 H, 0], one cell / time sample slack
  bool outer = false;
  double worst_inner = 0.0;     // max u / H over the inner box samples
  double worst_cylinder = 0.0;  // max u / H over the cylinder samples
  double worst_radius = 0.0;    // max |a_H x + b_H| / R over sublevel samples
  double worst_depth = 0.0;     // max -t / (eps2 H) over sublevel samples

  bool holds() const { return inner_box && sublevel_cylinder && outer; }
};

/// Space-time containments for the normalization with eps0 = alpha/2,
/// eps1 = alpha/(4 m2), eps2 = 1/m1. `u` is expected normalized so that
/// min u(., 0) = 0; `rep` is its level_set_report at H on `window`.
inline JohnNormalizationReport john_normalization_check(const Evaluator& u, const LevelSetReport& rep,
                                                        const BoxGrid& window, double m1, double m2,
                                                        int time_samples = 16, int radial_samples = 8) {
  if (!(m1 > 0.0 && m2 > 0.0)) throw Error(ErrorKind::invalid_argument, "m1 and m2 must be positive");
  const int n = window.dim();
  const double H = rep.H;
  const double alpha = rep.alpha;
  JohnNormalizationReport out;
  out.eps0 = alpha / 2.0;
  out.eps1 = alpha / (4.0 * m2);
  out.eps2 = 1.0 / m1;
  const Matrix a_inv = rep.a_H.inverse();
  const double slack = 1e-9 * H;

  // inner box: y on spheres of radius eps0 R rho, rho in (0, 1]
  std::vector<Vector> dirs;
  std::mt19937_64 rng(777);
  std::normal_distribution<double> N01;
  for (int s = 0; s < 32; ++s) {
    Vector d(n);
    for (int i = 0; i < n; ++i) d[i] = N01(rng);
    dirs.push_back(d.normalized());
  }
  out.inner_box = true;
  for (int ir = 0; ir <= radial_samples; ++ir) {
    const double rho = static_cast<double>(ir) / radial_samples;
    for (const auto& d : dirs) {
      const Vector y = out.eps0 * rep.R * rho * d;
      const Vector x = a_inv * (y - rep.b_H);
      for (int j = 0; j < time_samples; ++j) {
        const double t = -out.eps1 * H * j / time_samples;
        const double v = u(x, t);
        out.worst_inner = std::max(out.worst_inner, v / H);
        if (!(v < H + slack)) out.inner_box = false;
      }
    }
  }

  // sublevel cylinder over the window nodes of Q_{(1 - alpha/4) H}(0)
  out.sublevel_cylinder = true;
  const double level = (1.0 - alpha / 4.0) * H;
  for (std::size_t node = 0; node < window.size(); ++node) {
    const Vector x = window.coord(node);
    if (!(u(x, 0.0) < level)) continue;
    for (int j = 0; j <= time_samples; ++j) {
      const double t = -out.eps1 * H * j / time_samples;
      const double v = u(x, t);
      out.worst_cylinder = std::max(out.worst_cylinder, v / H);
      if (!(v < H + slack)) out.sublevel_cylinder = false;
    }
  }

  // outer: sample window nodes over t in [-2 eps2 H, 0]
  out.outer = true;
  const double dt = 2.0 * out.eps2 * H / (4 * time_samples);
  const double cell_norm = rep.a_H.norm() * rep.cell;
  for (int j = 0; j <= 4 * time_samples; ++j) {
    const double t = -dt * j;
    for (std::size_t node = 0; node < window.size(); ++node) {
      const Vector x = window.coord(node);
      if (!(u(x, t) < H)) continue;
      const double r = (rep.a_H * x + rep.b_H).norm();
      out.worst_radius = std::max(out.worst_radius, r / rep.R);
      out.worst_depth = std::max(out.worst_depth, -t / (out.eps2 * H));
      if (r > rep.R + cell_norm || -t > out.eps2 * H + dt) out.outer = false;
    }
  }
  return out;
}

}  // namespace pampere
