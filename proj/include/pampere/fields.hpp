#pragma once

// Uniform grids, sampled fields and the finite-difference stencils shared by
// every solver: second-order central differences in space, first-order
// backward differences in time.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pampere/error.hpp"

namespace pampere {

inline constexpr int kMaxDim = 3;
inline constexpr int kMinResolution = 8;

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = std::array<int, kMaxDim>;

namespace detail {

inline void check_dim(int dim) {
  if (dim < 1 || dim > kMaxDim)
    throw Error(ErrorKind::invalid_argument,
                "spatial dimension must be 1, 2 or 3, got " + std::to_string(dim));
}

inline Index unit_offset(int axis, int sign) {
  Index o{0, 0, 0};
  o[axis] = sign;
  return o;
}

}  // namespace detail

/// Uniform grid on the torus prod [0, a_i) with N_i points per axis.
/// Indices wrap: i and i + N_i address the same sample.
class TorusGrid {
 public:
  static constexpr bool periodic = true;

  TorusGrid(std::vector<double> periods, std::vector<int> resolution)
      : dim_(static_cast<int>(periods.size())) {
    detail::check_dim(dim_);
    if (resolution.size() != periods.size())
      throw Error(ErrorKind::invalid_argument, "periods and resolution differ in length");
    for (int a = 0; a < dim_; ++a) {
      if (!(periods[a] > 0.0))
        throw Error(ErrorKind::invalid_argument, "torus periods must be positive");
      if (resolution[a] < kMinResolution)
        throw Error(ErrorKind::resolution, "torus resolution must be at least 8 per axis");
      periods_[a] = periods[a];
      res_[a] = resolution[a];
    }
  }

  static TorusGrid unit(int dim, int points_per_axis) {
    return TorusGrid(std::vector<double>(dim, 1.0), std::vector<int>(dim, points_per_axis));
  }

  int dim() const { return dim_; }
  double period(int axis) const { return periods_[axis]; }
  int resolution(int axis) const { return res_[axis]; }
  double spacing(int axis) const { return periods_[axis] / res_[axis]; }
  int points(int axis) const { return res_[axis]; }

  std::size_t size() const {
    std::size_t s = 1;
    for (int a = 0; a < dim_; ++a) s *= static_cast<std::size_t>(res_[a]);
    return s;
  }

  Index unflatten(std::size_t node) const {
    Index idx{0, 0, 0};
    for (int a = 0; a < dim_; ++a) {
      idx[a] = static_cast<int>(node % res_[a]);
      node /= res_[a];
    }
    return idx;
  }

  std::size_t flatten(const Index& idx) const {
    std::size_t node = 0;
    for (int a = dim_ - 1; a >= 0; --a) {
      int i = idx[a] % res_[a];
      if (i < 0) i += res_[a];
      node = node * res_[a] + static_cast<std::size_t>(i);
    }
    return node;
  }

  std::optional<std::size_t> shifted(std::size_t node, const Index& offset) const {
    Index idx = unflatten(node);
    for (int a = 0; a < dim_; ++a) idx[a] += offset[a];
    return flatten(idx);
  }

  Vector coord(std::size_t node) const {
    const Index idx = unflatten(node);
    Vector x(dim_);
    for (int a = 0; a < dim_; ++a) x[a] = idx[a] * spacing(a);
    return x;
  }

  bool is_boundary(std::size_t) const { return false; }

  bool operator==(const TorusGrid& o) const {
    if (dim_ != o.dim_) return false;
    for (int a = 0; a < dim_; ++a)
      if (periods_[a] != o.periods_[a] || res_[a] != o.res_[a]) return false;
    return true;
  }

 private:
  int dim_;
  std::array<double, kMaxDim> periods_{1.0, 1.0, 1.0};
  std::array<int, kMaxDim> res_{1, 1, 1};
};

/// Uniform grid on a closed box with `cells` intervals per axis (cells + 1
/// nodes, boundary included).
class BoxGrid {
 public:
  static constexpr bool periodic = false;

  BoxGrid(std::vector<double> lower, std::vector<double> upper, std::vector<int> cells)
      : dim_(static_cast<int>(lower.size())) {
    detail::check_dim(dim_);
    if (upper.size() != lower.size() || cells.size() != lower.size())
      throw Error(ErrorKind::invalid_argument, "box corners and resolution differ in length");
    for (int a = 0; a < dim_; ++a) {
      if (!(upper[a] > lower[a]))
        throw Error(ErrorKind::invalid_argument, "box upper corner must exceed lower corner");
      if (cells[a] < kMinResolution)
        throw Error(ErrorKind::resolution, "box resolution must be at least 8 per axis");
      lower_[a] = lower[a];
      upper_[a] = upper[a];
      cells_[a] = cells[a];
    }
  }

  static BoxGrid cube(int dim, double lo, double hi, int cells) {
    return BoxGrid(std::vector<double>(dim, lo), std::vector<double>(dim, hi),
                   std::vector<int>(dim, cells));
  }

  int dim() const { return dim_; }
  double lower(int axis) const { return lower_[axis]; }
  double upper(int axis) const { return upper_[axis]; }
  int cells(int axis) const { return cells_[axis]; }
  int points(int axis) const { return cells_[axis] + 1; }
  double spacing(int axis) const { return (upper_[axis] - lower_[axis]) / cells_[axis]; }

  std::size_t size() const {
    std::size_t s = 1;
    for (int a = 0; a < dim_; ++a) s *= static_cast<std::size_t>(points(a));
    return s;
  }

  Index unflatten(std::size_t node) const {
    Index idx{0, 0, 0};
    for (int a = 0; a < dim_; ++a) {
      idx[a] = static_cast<int>(node % points(a));
      node /= points(a);
    }
    return idx;
  }

  bool contains(const Index& idx) const {
    for (int a = 0; a < dim_; ++a)
      if (idx[a] < 0 || idx[a] > cells_[a]) return false;
    return true;
  }

  std::size_t flatten(const Index& idx) const {
    std::size_t node = 0;
    for (int a = dim_ - 1; a >= 0; --a) node = node * points(a) + static_cast<std::size_t>(idx[a]);
    return node;
  }

  std::optional<std::size_t> shifted(std::size_t node, const Index& offset) const {
    Index idx = unflatten(node);
    for (int a = 0; a < dim_; ++a) idx[a] += offset[a];
    if (!contains(idx)) return std::nullopt;
    return flatten(idx);
  }

  Vector coord(std::size_t node) const {
    const Index idx = unflatten(node);
    Vector x(dim_);
    for (int a = 0; a < dim_; ++a)
      x[a] = idx[a] == cells_[a] ? upper_[a] : lower_[a] + idx[a] * spacing(a);
    return x;
  }

  bool is_boundary(std::size_t node) const {
    const Index idx = unflatten(node);
    for (int a = 0; a < dim_; ++a)
      if (idx[a] == 0 || idx[a] == cells_[a]) return true;
    return false;
  }

  std::vector<std::size_t> interior_nodes() const {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < size(); ++k)
      if (!is_boundary(k)) out.push_back(k);
    return out;
  }

  bool operator==(const BoxGrid& o) const {
    if (dim_ != o.dim_) return false;
    for (int a = 0; a < dim_; ++a)
      if (lower_[a] != o.lower_[a] || upper_[a] != o.upper_[a] || cells_[a] != o.cells_[a])
        return false;
    return true;
  }

 private:
  int dim_;
  std::array<double, kMaxDim> lower_{0.0, 0.0, 0.0};
  std::array<double, kMaxDim> upper_{1.0, 1.0, 1.0};
  std::array<int, kMaxDim> cells_{1, 1, 1};
};

/// Time levels t_k = t0 + k dt, k = 0..steps, ending at t = 0.
class TimeGrid {
 public:
  TimeGrid(double t0, int steps, std::optional<double> period = std::nullopt)
      : t0_(t0), steps_(steps), period_(period) {
    if (!(t0 < 0.0)) throw Error(ErrorKind::invalid_argument, "time grid must start before t = 0");
    if (steps < 1) throw Error(ErrorKind::invalid_argument, "time grid needs at least one step");
    dt_ = -t0 / steps;
    if (period_) {
      if (!(*period_ > 0.0))
        throw Error(ErrorKind::invalid_argument, "temporal period must be positive");
      const double ratio = *period_ / dt_;
      if (std::abs(ratio - std::round(ratio)) > 1e-9 * std::max(1.0, ratio))
        throw Error(ErrorKind::invalid_argument, "time step must divide the temporal period");
    }
  }

  double t0() const { return t0_; }
  double dt() const { return dt_; }
  int steps() const { return steps_; }
  std::optional<double> period() const { return period_; }
  double time(int k) const { return k == steps_ ? 0.0 : t0_ + k * dt_; }

  bool operator==(const TimeGrid& o) const {
    return t0_ == o.t0_ && steps_ == o.steps_ && period_ == o.period_;
  }

 private:
  double t0_;
  int steps_;
  double dt_;
  std::optional<double> period_;
};

/// Samples of an a_i-periodic function on a TorusGrid.
class PeriodicField {
 public:
  PeriodicField(TorusGrid grid, std::vector<double> values)
      : grid_(std::move(grid)), values_(std::move(values)) {
    if (values_.size() != grid_.size())
      throw Error(ErrorKind::grid_mismatch, "periodic field size does not match its grid");
    for (double v : values_)
      if (!std::isfinite(v))
        throw Error(ErrorKind::invalid_argument, "periodic field holds a non-finite sample");
  }

  explicit PeriodicField(TorusGrid grid)
      : grid_(std::move(grid)), values_(grid_.size(), 0.0) {}

  const TorusGrid& grid() const { return grid_; }
  std::span<const double> values() const { return values_; }
  std::vector<double>& mutable_values() { return values_; }
  double operator[](std::size_t k) const { return values_[k]; }

  /// Trapezoidal mean; on the torus this is the arithmetic mean of samples.
  double mean() const {
    return std::accumulate(values_.begin(), values_.end(), 0.0) /
           static_cast<double>(values_.size());
  }
  double min() const { return *std::min_element(values_.begin(), values_.end()); }
  double max() const { return *std::max_element(values_.begin(), values_.end()); }

  /// Multilinear interpolation with periodic wrap-around.
  double operator()(const Vector& x) const {
    const int n = grid_.dim();
    std::array<int, kMaxDim> base{0, 0, 0};
    std::array<double, kMaxDim> frac{0.0, 0.0, 0.0};
    for (int a = 0; a < n; ++a) {
      const double p = x[a] / grid_.spacing(a);
      const double fl = std::floor(p);
      frac[a] = p - fl;
      const long long N = grid_.resolution(a);
      long long i = static_cast<long long>(fl) % N;
      if (i < 0) i += N;
      base[a] = static_cast<int>(i);
    }
    double acc = 0.0;
    for (int corner = 0; corner < (1 << n); ++corner) {
      double w = 1.0;
      Index idx{0, 0, 0};
      for (int a = 0; a < n; ++a) {
        const bool up = (corner >> a) & 1;
        w *= up ? frac[a] : 1.0 - frac[a];
        idx[a] = base[a] + (up ? 1 : 0);
      }
      if (w != 0.0) acc += w * values_[grid_.flatten(idx)];
    }
    return acc;
  }

 private:
  TorusGrid grid_;
  std::vector<double> values_;
};

/// Scalar samples on a spatial grid at every level of a TimeGrid.
template <class Grid>
class SpaceTimeField {
 public:
  SpaceTimeField(Grid grid, TimeGrid time)
      : grid_(std::move(grid)),
        time_(time),
        values_(grid_.size() * static_cast<std::size_t>(time_.steps() + 1), 0.0) {}

  const Grid& grid() const { return grid_; }
  const TimeGrid& time() const { return time_; }
  int levels() const { return time_.steps() + 1; }

  std::span<const double> slice(int step) const {
    return {values_.data() + offset(step), grid_.size()};
  }
  std::span<double> slice(int step) { return {values_.data() + offset(step), grid_.size()}; }

  double at(std::size_t node, int step) const { return values_[offset(step) + node]; }
  double& at(std::size_t node, int step) { return values_[offset(step) + node]; }

  std::span<const double> values() const { return values_; }

 private:
  std::size_t offset(int step) const { return static_cast<std::size_t>(step) * grid_.size(); }

  Grid grid_;
  TimeGrid time_;
  std::vector<double> values_;
};

using ScalarFunction = std::function<double(const Vector&)>;
using SpaceTimeFunction = std::function<double(const Vector&, double)>;

namespace detail {

template <class Grid>
double neighbor_value(const Grid& grid, std::span<const double> values, std::size_t node,
                      const Index& offset) {
  const auto k = grid.shifted(node, offset);
  if (!k)
    throw Error(ErrorKind::out_of_stencil, "stencil leaves the grid at a boundary node")
        .with_node(static_cast<long>(node));
  return values[*k];
}

}  // namespace detail

/// Central-difference Hessian; mixed partials use the 4-point cross stencil
/// and the result is symmetric bitwise.
template <class Grid>
Matrix discrete_hessian(const Grid& grid, std::span<const double> values, std::size_t node) {
  const int n = grid.dim();
  Matrix H(n, n);
  const double c = values[node];
  for (int i = 0; i < n; ++i) {
    const double hi = grid.spacing(i);
    const double up = detail::neighbor_value(grid, values, node, detail::unit_offset(i, 1));
    const double dn = detail::neighbor_value(grid, values, node, detail::unit_offset(i, -1));
    H(i, i) = (up + dn - 2.0 * c) / (hi * hi);
    for (int j = 0; j < i; ++j) {
      const double hj = grid.spacing(j);
      Index pp{0, 0, 0}, pm{0, 0, 0}, mp{0, 0, 0}, mm{0, 0, 0};
      pp[i] = 1; pp[j] = 1;
      pm[i] = 1; pm[j] = -1;
      mp[i] = -1; mp[j] = 1;
      mm[i] = -1; mm[j] = -1;
      const double v = (detail::neighbor_value(grid, values, node, pp) -
                        detail::neighbor_value(grid, values, node, pm) -
                        detail::neighbor_value(grid, values, node, mp) +
                        detail::neighbor_value(grid, values, node, mm)) /
                       (4.0 * hi * hj);
      H(i, j) = v;
      H(j, i) = v;
    }
  }
  return H;
}

/// The 2^n one-sided Hessians at a node: the diagonal is the central second
/// difference, entry (i,j) is the one-sided mixed difference in the orthant
/// given by the sign bits of `orthant`. Their average is discrete_hessian.
template <class Grid>
Matrix orthant_hessian(const Grid& grid, std::span<const double> values, std::size_t node,
                       unsigned orthant) {
  const int n = grid.dim();
  Matrix H(n, n);
  const double c = values[node];
  for (int i = 0; i < n; ++i) {
    const double hi = grid.spacing(i);
    const double up = detail::neighbor_value(grid, values, node, detail::unit_offset(i, 1));
    const double dn = detail::neighbor_value(grid, values, node, detail::unit_offset(i, -1));
    H(i, i) = (up + dn - 2.0 * c) / (hi * hi);
    const int si = ((orthant >> i) & 1) ? -1 : 1;
    for (int j = 0; j < i; ++j) {
      const int sj = ((orthant >> j) & 1) ? -1 : 1;
      Index oij{0, 0, 0}, oi{0, 0, 0}, oj{0, 0, 0};
      oij[i] = si; oij[j] = sj;
      oi[i] = si;
      oj[j] = sj;
      const double v = si * sj *
                       (detail::neighbor_value(grid, values, node, oij) -
                        detail::neighbor_value(grid, values, node, oi) -
                        detail::neighbor_value(grid, values, node, oj) + c) /
                       (hi * grid.spacing(j));
      H(i, j) = v;
      H(j, i) = v;
    }
  }
  return H;
}

/// (u(., t_k) - u(., t_{k-1})) / dt.
template <class Grid>
double backward_dt(const SpaceTimeField<Grid>& u, std::size_t node, int step) {
  if (step < 1)
    throw Error(ErrorKind::no_predecessor, "backward difference needs a previous time level")
        .with_step(step);
  if (step > u.time().steps())
    throw Error(ErrorKind::invalid_argument, "time step index out of range").with_step(step);
  return (u.at(node, step) - u.at(node, step - 1)) / u.time().dt();
}

struct SampleOptions {
  bool require_positive = false;
  bool normalize = false;
};

inline PeriodicField sample_function(const ScalarFunction& fn, const TorusGrid& grid,
                                     SampleOptions opts = {}) {
  std::vector<double> v(grid.size());
  for (std::size_t k = 0; k < grid.size(); ++k) {
    v[k] = fn(grid.coord(k));
    if (!std::isfinite(v[k]))
      throw Error(ErrorKind::invalid_argument, "sampled function is not finite")
          .with_node(static_cast<long>(k));
    if ((opts.require_positive || opts.normalize) && !(v[k] > 0.0))
      throw Error(ErrorKind::positivity_violation, "sampled function is not positive")
          .with_node(static_cast<long>(k));
  }
  if (opts.normalize) {
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    for (double& x : v) x /= m;
  }
  return PeriodicField(grid, std::move(v));
}

template <class Grid>
std::vector<double> sample_nodes(const Grid& grid, const ScalarFunction& fn) {
  std::vector<double> v(grid.size());
  for (std::size_t k = 0; k < grid.size(); ++k) v[k] = fn(grid.coord(k));
  return v;
}

template <class Grid>
SpaceTimeField<Grid> sample_space_time(const Grid& grid, const TimeGrid& time,
                                       const SpaceTimeFunction& fn) {
  SpaceTimeField<Grid> out(grid, time);
  for (int k = 0; k <= time.steps(); ++k) {
    const double t = time.time(k);
    auto s = out.slice(k);
    for (std::size_t node = 0; node < grid.size(); ++node) {
      s[node] = fn(grid.coord(node), t);
      if (!std::isfinite(s[node]))
        throw Error(ErrorKind::invalid_argument, "sampled space-time function is not finite")
            .with_node(static_cast<long>(node))
            .with_step(k);
    }
  }
  return out;
}

}  // namespace pampere
