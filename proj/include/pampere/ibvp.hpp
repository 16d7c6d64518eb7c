#pragma once

// Backward-Euler time stepping for -u_t det D^2u = f on box cylinders with
// Dirichlet data on the parabolic boundary, and the homogenization-gap
// experiment built on it.

#include <chrono>
#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "pampere/error.hpp"
#include "pampere/fields.hpp"
#include "pampere/linear_solve.hpp"
#include "pampere/mongeampere.hpp"

namespace pampere {

struct IBVPOptions {
  double tol = 1e-10;
  int max_newton = 50;
  int max_backtracks = 30;
  double krylov_rtol = 1e-11;
  int krylov_max_iterations = 5000;
  /// accepted steps satisfy u_now <= u_prev + monotone_slack nodewise
  double monotone_slack = 1e-10;
};

struct IBVPProblem {
  BoxGrid grid;
  TimeGrid time;
  SpaceTimeFunction f;
  /// boundary data on the lateral sides for all t and on the bottom slice t = t0
  SpaceTimeFunction g;
  /// expected bounds m1 <= -u_t <= m2, reported next to the observed range
  std::optional<std::pair<double, double>> expected_bounds{};
  IBVPOptions options{};
};

struct StepResult {
  std::vector<double> u;
  int iterations = 0;
  double residual = 0.0;
};

namespace detail {

struct StepEvaluation {
  std::vector<double> residual;  // indexed by interior slot
  double sup = 0.0;
  bool admissible = true;
};

/// ((u_prev - u) / dt) det D^2u - f at interior nodes. Admissible when every
/// interior Hessian is SPD and u < u_prev strictly inside.
inline StepEvaluation evaluate_step(const BoxGrid& grid, const std::vector<std::size_t>& interior,
                                    std::span<const double> u_prev, std::span<const double> u,
                                    std::span<const double> f, double dt, bool require_admissible) {
  StepEvaluation ev;
  ev.residual.resize(interior.size());
  for (std::size_t s = 0; s < interior.size(); ++s) {
    const std::size_t node = interior[s];
    const Matrix H = discrete_hessian(grid, u, node);
    const double drop = (u_prev[node] - u[node]) / dt;
    if (require_admissible && (!(drop > 0.0) || !is_spd(H))) {
      ev.admissible = false;
      return ev;
    }
    ev.residual[s] = drop * determinant(H) - f[node];
    ev.sup = std::max(ev.sup, std::abs(ev.residual[s]));
  }
  return ev;
}

inline SparseMatrix assemble_step_jacobian(const BoxGrid& grid,
                                           const std::vector<std::size_t>& interior,
                                           const std::vector<long>& slot,
                                           std::span<const double> u_prev,
                                           std::span<const double> u, double dt) {
  const int n = grid.dim();
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(interior.size() * (1 + 2 * n + 2 * n * n));
  for (std::size_t s = 0; s < interior.size(); ++s) {
    const std::size_t node = interior[s];
    const auto row = static_cast<Eigen::Index>(s);
    const Matrix H = discrete_hessian(grid, u, node);
    const Matrix adj = adjugate(H);
    const double drop = (u_prev[node] - u[node]) / dt;
    trip.emplace_back(row, row, -determinant(H) / dt);
    auto add = [&](const Index& off, double c) {
      const long col = slot[*grid.shifted(node, off)];
      if (col >= 0) trip.emplace_back(row, static_cast<Eigen::Index>(col), c);  // boundary: fixed
    };
    for (int i = 0; i < n; ++i) {
      const double hi = grid.spacing(i);
      const double ci = drop * adj(i, i) / (hi * hi);
      add(unit_offset(i, 1), ci);
      add(unit_offset(i, -1), ci);
      add(Index{0, 0, 0}, -2.0 * ci);
      for (int j = 0; j < i; ++j) {
        const double cij = drop * 2.0 * adj(i, j) / (4.0 * hi * grid.spacing(j));
        Index pp{0, 0, 0}, pm{0, 0, 0}, mp{0, 0, 0}, mm{0, 0, 0};
        pp[i] = 1; pp[j] = 1;
        pm[i] = 1; pm[j] = -1;
        mp[i] = -1; mp[j] = 1;
        mm[i] = -1; mm[j] = -1;
        add(pp, cij);
        add(mm, cij);
        add(pm, -cij);
        add(mp, -cij);
      }
    }
  }
  SparseMatrix J(static_cast<Eigen::Index>(interior.size()),
                 static_cast<Eigen::Index>(interior.size()));
  J.setFromTriplets(trip.begin(), trip.end());
  return J;
}

inline bool all_interior_spd(const BoxGrid& grid, const std::vector<std::size_t>& interior,
                             std::span<const double> u) {
  for (std::size_t node : interior)
    if (!is_spd(discrete_hessian(grid, u, node))) return false;
  return true;
}

}  // namespace detail

/// One backward-Euler step: solves (u_prev - u) det D^2u = dt f_now inside,
/// u = boundary_now on the boundary. `f_now` and `boundary_now` are full-grid
/// arrays; only their interior and boundary entries are read, respectively.
inline StepResult implicit_step(const BoxGrid& grid, std::span<const double> u_prev,
                                std::span<const double> f_now,
                                std::span<const double> boundary_now, double dt,
                                const IBVPOptions& opt = {}) {
  if (u_prev.size() != grid.size() || f_now.size() != grid.size() ||
      boundary_now.size() != grid.size())
    throw Error(ErrorKind::grid_mismatch, "step data does not match the grid");
  if (!(dt > 0.0)) throw Error(ErrorKind::invalid_argument, "time step must be positive");
  for (double v : u_prev)
    if (!std::isfinite(v)) throw Error(ErrorKind::invalid_argument, "previous level is not finite");

  const auto interior = grid.interior_nodes();
  std::vector<long> slot(grid.size(), -1);
  for (std::size_t s = 0; s < interior.size(); ++s) slot[interior[s]] = static_cast<long>(s);
  for (std::size_t node : interior)
    if (!(f_now[node] > 0.0))
      throw Error(ErrorKind::positivity_violation, "right-hand side must be positive")
          .with_node(static_cast<long>(node));

  // warm start: explicit predictor u_prev - dt f / det D^2u_prev; a flat or
  // non-convex previous level (the degenerate bottom slice) gets a
  // paraboloid dip instead
  std::vector<double> u(u_prev.begin(), u_prev.end());
  for (std::size_t node = 0; node < grid.size(); ++node)
    if (grid.is_boundary(node)) u[node] = boundary_now[node];
  bool predicted = detail::all_interior_spd(grid, interior, u_prev);
  if (predicted) {
    for (std::size_t node : interior)
      u[node] = u_prev[node] - dt * f_now[node] / determinant(discrete_hessian(grid, u_prev, node));
    predicted = detail::all_interior_spd(grid, interior, u);
  }
  if (!predicted) {
    const int n = grid.dim();
    double half_diag2 = 0.0, mean_f = 0.0;
    Vector centre(n);
    for (int a = 0; a < n; ++a) {
      centre[a] = 0.5 * (grid.lower(a) + grid.upper(a));
      half_diag2 += 0.25 * std::pow(grid.upper(a) - grid.lower(a), 2);
    }
    for (std::size_t node : interior) mean_f += f_now[node];
    mean_f /= static_cast<double>(interior.size());
    const double r2 = 2.0 * half_diag2;
    const double kappa = std::pow(mean_f * dt / (std::pow(2.0, n) * r2), 1.0 / (n + 1));
    for (std::size_t node : interior)
      u[node] = u_prev[node] + kappa * ((grid.coord(node) - centre).squaredNorm() - r2);
  }

  auto ev = detail::evaluate_step(grid, interior, u_prev, u, f_now, dt, false);
  StepResult out{{}, 0, ev.sup};
  double r = ev.sup;
  std::vector<double> trial(u.size());
  while (r > opt.tol) {
    if (out.iterations >= opt.max_newton)
      throw Error(ErrorKind::non_convergence, "step Newton iteration cap reached").with_residual(r);
    const SparseMatrix J = detail::assemble_step_jacobian(grid, interior, slot, u_prev, u, dt);
    Eigen::VectorXd rhs(static_cast<Eigen::Index>(interior.size()));
    for (std::size_t s = 0; s < interior.size(); ++s)
      rhs[static_cast<Eigen::Index>(s)] = -ev.residual[s];
    const Eigen::VectorXd delta = solve_sparse(J, rhs, opt.krylov_rtol, opt.krylov_max_iterations);

    double alpha = 1.0;
    bool accepted = false, any_admissible = false;
    for (int bt = 0; bt <= opt.max_backtracks; ++bt, alpha *= 0.5) {
      trial = u;
      for (std::size_t s = 0; s < interior.size(); ++s)
        trial[interior[s]] += alpha * delta[static_cast<Eigen::Index>(s)];
      auto tev = detail::evaluate_step(grid, interior, u_prev, trial, f_now, dt, true);
      if (!tev.admissible) continue;
      any_admissible = true;
      if (tev.sup < r) {
        ev = std::move(tev);
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      if (!any_admissible)
        throw Error(ErrorKind::convexity_loss,
                    "damping cannot keep the step convex and decreasing in time")
            .with_residual(r);
      throw Error(ErrorKind::non_convergence, "step Newton stagnated").with_residual(r);
    }
    u.swap(trial);
    r = ev.sup;
    ++out.iterations;
  }

  for (std::size_t node = 0; node < grid.size(); ++node)
    if (u[node] > u_prev[node] + opt.monotone_slack)
      throw Error(ErrorKind::monotonicity_loss, "step increased u in time")
          .with_node(static_cast<long>(node))
          .with_residual(r);
  out.u = std::move(u);
  out.residual = r;
  return out;
}

struct IBVPResult {
  SpaceTimeField<BoxGrid> u;
  ConvexityReport convexity;
  /// sup of the discrete -u_t det D^2u - f over the trajectory
  double pde_residual = 0.0;
  double min_neg_ut = 0.0;
  double max_neg_ut = 0.0;
  int newton_iterations = 0;
  std::vector<int> iterations_per_step;
};

/// Full trajectory from t0 to 0. Step failures are rethrown with the index of
/// the failing step; the result must pass the parabolic-convexity gate.
inline IBVPResult solve_ibvp(const IBVPProblem& p) {
  const auto& grid = p.grid;
  const auto& time = p.time;
  if (!p.f || !p.g) throw Error(ErrorKind::invalid_argument, "IBVP needs f and boundary data g");

  SpaceTimeField<BoxGrid> u(grid, time);
  SpaceTimeField<BoxGrid> f(grid, time);
  {
    auto s = u.slice(0);
    for (std::size_t node = 0; node < grid.size(); ++node) s[node] = p.g(grid.coord(node), time.t0());
  }
  IBVPResult out{std::move(u), {}, 0.0, 0.0, 0.0, 0, {}};
  std::vector<double> fk(grid.size()), gk(grid.size(), 0.0);
  for (int k = 1; k <= time.steps(); ++k) {
    const double t = time.time(k);
    for (std::size_t node = 0; node < grid.size(); ++node) {
      const Vector x = grid.coord(node);
      fk[node] = grid.is_boundary(node) ? 1.0 : p.f(x, t);
      gk[node] = grid.is_boundary(node) ? p.g(x, t) : 0.0;
      f.at(node, k) = fk[node];
    }
    StepResult step;
    try {
      step = implicit_step(grid, out.u.slice(k - 1), fk, gk, time.dt(), p.options);
    } catch (Error& e) {
      if (!e.step) e.with_step(k);
      throw;
    }
    std::copy(step.u.begin(), step.u.end(), out.u.slice(k).begin());
    out.newton_iterations += step.iterations;
    out.iterations_per_step.push_back(step.iterations);
  }

  out.convexity = check_parabolic_convexity(out.u, {1e-8, p.options.monotone_slack});
  // the bottom slice is data, possibly degenerate: only solver output is gated
  bool convex_output = true;
  for (std::size_t k = 1; k < out.convexity.convex_per_step.size(); ++k)
    convex_output = convex_output && out.convexity.convex_per_step[k];
  if (!convex_output)
    throw Error(ErrorKind::convexity_loss, "trajectory failed the convexity gate");
  if (!out.convexity.monotone)
    throw Error(ErrorKind::monotonicity_loss, "trajectory failed the monotonicity gate");
  out.pde_residual = pma_residual(out.u, f).sup;
  out.min_neg_ut = out.convexity.min_neg_ut;
  out.max_neg_ut = out.convexity.max_neg_ut;
  return out;
}

/// Oscillatory data f1_unit(x/eps) f2_unit(t/eps) over a fixed base problem;
/// the factors are 1-periodic with unit mean.
struct HomogenizationSetup {
  BoxGrid grid;
  TimeGrid time;
  SpaceTimeFunction g;
  ScalarFunction f1_unit;
  std::function<double(double)> f2_unit;
  IBVPOptions options{};
};

struct HomogenizationRun {
  double eps = 0.0;
  /// sum_i eps_i^2 + eps_0 = n eps^2 + eps
  double cell_measure = 0.0;
  double gap = 0.0;
  int newton_iterations = 0;
  double wall_ms = 0.0;
  std::shared_ptr<const IBVPResult> w;
  std::shared_ptr<const IBVPResult> w_bar;
};

namespace detail {

inline bool nests(double period, double step) {
  const double r = period / step;
  return std::abs(r - std::round(r)) <= 1e-9 * std::max(1.0, r);
}

inline void require_resolved(double eps, const HomogenizationSetup& s) {
  if (!(eps > 0.0)) throw Error(ErrorKind::invalid_argument, "oscillation scale must be positive");
  for (int a = 0; a < s.grid.dim(); ++a) {
    const double h = s.grid.spacing(a);
    if (!nests(eps, h) || std::round(eps / h) < kMinResolution)
      throw Error(ErrorKind::resolution, "spatial grid does not resolve the oscillation cell");
  }
  const double dt = s.time.dt();
  if (!nests(eps, dt) || std::round(eps / dt) < kMinResolution)
    throw Error(ErrorKind::resolution, "time grid does not resolve the oscillation period");
}

inline IBVPProblem base_problem(const HomogenizationSetup& s, SpaceTimeFunction f) {
  return IBVPProblem{s.grid, s.time, std::move(f), s.g, std::nullopt, s.options};
}

}  // namespace detail

/// Solution of the base problem with f = 1.
inline std::shared_ptr<const IBVPResult> homogenized_solution(const HomogenizationSetup& s) {
  return std::make_shared<const IBVPResult>(
      solve_ibvp(detail::base_problem(s, [](const Vector&, double) { return 1.0; })));
}

inline HomogenizationRun homogenization_gap(double eps, const HomogenizationSetup& s,
                                            std::shared_ptr<const IBVPResult> w_bar = nullptr) {
  detail::require_resolved(eps, s);
  if (!w_bar) w_bar = homogenized_solution(s);
  const auto start = std::chrono::steady_clock::now();
  auto f = [&s, eps](const Vector& x, double t) { return s.f1_unit(x / eps) * s.f2_unit(t / eps); };
  auto w = std::make_shared<const IBVPResult>(solve_ibvp(detail::base_problem(s, f)));
  const auto stop = std::chrono::steady_clock::now();

  HomogenizationRun run;
  run.eps = eps;
  run.cell_measure = s.grid.dim() * eps * eps + eps;
  for (std::size_t i = 0; i < w->u.values().size(); ++i)
    run.gap = std::max(run.gap, std::abs(w->u.values()[i] - w_bar->u.values()[i]));
  run.newton_iterations = w->newton_iterations;
  run.wall_ms = std::chrono::duration<double, std::milli>(stop - start).count();
  run.w = std::move(w);
  run.w_bar = std::move(w_bar);
  return run;
}

struct SweepRow {
  double eps = 0.0;
  std::optional<HomogenizationRun> run;
  std::optional<Error> error;
};

/// homogenization_gap per eps in the given order; w_bar is solved once and
/// shared. A failing row records its error and the sweep continues.
inline std::vector<SweepRow> sweep(const std::vector<double>& eps_list, const HomogenizationSetup& s) {
  std::vector<SweepRow> rows;
  if (eps_list.empty()) return rows;
  std::shared_ptr<const IBVPResult> w_bar;
  std::optional<Error> base_error;
  try {
    w_bar = homogenized_solution(s);
  } catch (const Error& e) {
    base_error = e;
  }
  for (double eps : eps_list) {
    SweepRow row{eps, std::nullopt, std::nullopt};
    if (base_error) {
      row.error = *base_error;
    } else {
      try {
        row.run = homogenization_gap(eps, s, w_bar);
      } catch (const Error& e) {
        row.error = e;
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

/// Least-squares slope of log gap against log cell measure over rows with a
/// positive gap; nullopt with fewer than two such rows.
inline std::optional<double> fitted_rate(const std::vector<SweepRow>& rows) {
  std::vector<double> xs, ys;
  for (const auto& r : rows) {
    if (!r.run || !(r.run->gap > 0.0)) continue;
    xs.push_back(std::log(r.run->cell_measure));
    ys.push_back(std::log(r.run->gap));
  }
  if (xs.size() < 2) return std::nullopt;
  const double m = static_cast<double>(xs.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sx += xs[i];
    sy += ys[i];
    sxx += xs[i] * xs[i];
    sxy += xs[i] * ys[i];
  }
  const double den = m * sxx - sx * sx;
  if (den == 0.0) return std::nullopt;
  return (m * sxy - sx * sy) / den;
}

}  // namespace pampere
