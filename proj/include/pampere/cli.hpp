#pragma once

// Experiment runner behind the pampere executable: JSON configuration in,
// summary.json, <command>.csv and optional raw dumps out.

#include <bit>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pampere/cell.hpp"
#include "pampere/expression.hpp"
#include "pampere/ibvp.hpp"
#include "pampere/liouville.hpp"

namespace pampere::cli {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> c{"cell-solve",        "build-ancient",     "ibvp-solve",
                                          "homogenize-sweep", "fit-decomposition", "level-set"};
  return c;
}

struct RunOptions {
  std::string command;
  fs::path config;
  std::optional<fs::path> out;
  std::optional<std::uint64_t> seed;
  /// record wall-clock times; off by default so outputs are reproducible
  bool timing = false;
};

enum ExitCode { ok = 0, config_error = 2, solver_error = 3 };

namespace detail {

[[noreturn]] inline void bad_config(const std::string& msg) { throw Error(ErrorKind::config_invalid, msg); }

// ---- config access ---------------------------------------------------------

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) bad_config(where() + "must be an object");
  }

  bool has(const std::string& key) const {
    used_.insert(key);
    return j_.contains(key);
  }

  const json& raw(const std::string& key) const {
    used_.insert(key);
    if (!j_.contains(key)) bad_config("missing key '" + path_ + key + "'");
    return j_.at(key);
  }

  double number(const std::string& key) const { return as_number(raw(key), key); }
  double number(const std::string& key, double def) const { return has(key) ? number(key) : def; }

  int integer(const std::string& key) const {
    const auto& v = raw(key);
    if (!v.is_number_integer()) bad_config("'" + path_ + key + "' must be an integer");
    return v.get<int>();
  }
  int integer(const std::string& key, int def) const { return has(key) ? integer(key) : def; }

  bool boolean(const std::string& key, bool def) const {
    if (!has(key)) return def;
    const auto& v = raw(key);
    if (!v.is_boolean()) bad_config("'" + path_ + key + "' must be true or false");
    return v.get<bool>();
  }

  std::string string(const std::string& key) const {
    const auto& v = raw(key);
    if (!v.is_string()) bad_config("'" + path_ + key + "' must be a string");
    return v.get<std::string>();
  }

  /// A number or a list of numbers; a single number is repeated `n` times.
  std::vector<double> numbers(const std::string& key, std::size_t n) const {
    const auto& v = raw(key);
    if (v.is_number()) return std::vector<double>(n, as_number(v, key));
    auto out = number_list(key);
    if (out.size() != n) bad_config("'" + path_ + key + "' must have " + std::to_string(n) + " entries");
    return out;
  }

  std::vector<double> number_list(const std::string& key) const {
    const auto& v = raw(key);
    if (!v.is_array()) bad_config("'" + path_ + key + "' must be a list of numbers");
    std::vector<double> out;
    for (const auto& e : v) out.push_back(as_number(e, key));
    return out;
  }

  std::vector<int> integers(const std::string& key, std::size_t n) const {
    const auto& v = raw(key);
    auto one = [&](const json& e) {
      if (!e.is_number_integer()) bad_config("'" + path_ + key + "' must hold integers");
      return e.get<int>();
    };
    if (v.is_number()) return std::vector<int>(n, one(v));
    if (!v.is_array() || v.size() != n)
      bad_config("'" + path_ + key + "' must be an integer or " + std::to_string(n) + " integers");
    std::vector<int> out;
    for (const auto& e : v) out.push_back(one(e));
    return out;
  }

  Matrix matrix(const std::string& key, int n) const {
    const auto& v = raw(key);
    if (!v.is_array() || static_cast<int>(v.size()) != n) bad_config("'" + path_ + key + "' must be an n x n matrix");
    Matrix M(n, n);
    for (int i = 0; i < n; ++i) {
      if (!v[i].is_array() || static_cast<int>(v[i].size()) != n)
        bad_config("'" + path_ + key + "' must be an n x n matrix");
      for (int j = 0; j < n; ++j) M(i, j) = as_number(v[i][j], key);
    }
    return M;
  }

  Section section(const std::string& key) const { return Section(raw(key), path_ + key + "."); }

  /// Rejects keys that were never looked up (typos, misplaced options).
  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!used_.count(k)) bad_config("unknown key '" + path_ + k + "'");
  }

 private:
  std::string where() const { return path_.empty() ? "config " : "'" + path_.substr(0, path_.size() - 1) + "' "; }
  double as_number(const json& v, const std::string& key) const {
    if (!v.is_number()) bad_config("'" + path_ + key + "' must be a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) bad_config("'" + path_ + key + "' must be finite");
    return d;
  }

  const json& j_;
  std::string path_;
  mutable std::set<std::string> used_;
};

/// Expression source kept next to its parse so it can be echoed.
struct Expr {
  std::string source;
  Expression e = Expression::number(0.0);
};

enum class Vars { space, time, space_time };

inline Expr expression(const Section& s, const std::string& key, int n, Vars vars) {
  const std::string src = s.string(key);
  Expression e = parse_expression(src);
  if (vars == Vars::time && e.max_space_index() > 0) bad_config("'" + key + "' may only use t");
  if (vars == Vars::space && e.uses_time()) bad_config("'" + key + "' may not use t");
  if (e.max_space_index() > n)
    bad_config("'" + key + "' uses x" + std::to_string(e.max_space_index()) + " in dimension " + std::to_string(n));
  return {src, std::move(e)};
}

inline ScalarFunction space_fn(const Expression& e, int n, double scale = 1.0) {
  return [e, n, scale](const Vector& x) { return e.eval(x.data(), n, 0.0) / scale; };
}
inline SpaceTimeFunction space_time_fn(const Expression& e, int n) {
  return [e, n](const Vector& x, double t) { return e.eval(x.data(), n, t); };
}

inline int dimension(const Section& s) {
  const int n = s.integer("dimension");
  if (n < 1 || n > 3) bad_config("'dimension' must be 1, 2 or 3");
  return n;
}

inline BoxGrid window(const Section& s, int n) {
  return BoxGrid(s.numbers("lower", n), s.numbers("upper", n), s.integers("resolution", n));
}

inline void reject_key_mismatch(const Section& s, const std::string& command) {
  if (s.has("command") && s.string("command") != command)
    bad_config("config is for '" + s.string("command") + "', not '" + command + "'");
}

// ---- output ----------------------------------------------------------------

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline json matrix_json(const Matrix& M) {
  json out = json::array();
  for (Eigen::Index i = 0; i < M.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < M.cols(); ++j) row.push_back(M(i, j));
    out.push_back(row);
  }
  return out;
}

inline json vector_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

/// json with non-finite doubles replaced by null
inline json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

class Writer {
 public:
  explicit Writer(fs::path dir) : dir_(std::move(dir)) {}

  const fs::path& dir() const { return dir_; }

  void text(const std::string& name, const std::string& content) const {
    fs::create_directories(dir_);
    std::ofstream f(dir_ / name, std::ios::binary);
    f << content;
    if (!f) throw Error(ErrorKind::invalid_argument, "cannot write " + (dir_ / name).string());
  }

  void json_file(const std::string& name, const json& j) const { text(name, j.dump(2) + "\n"); }

  void csv(const std::string& name, const std::vector<std::string>& header,
           const std::vector<std::vector<std::string>>& rows) const {
    std::string out;
    for (std::size_t i = 0; i < header.size(); ++i) out += (i ? "," : "") + header[i];
    out += "\n";
    for (const auto& r : rows) {
      for (std::size_t i = 0; i < r.size(); ++i) out += (i ? "," : "") + r[i];
      out += "\n";
    }
    text(name, out);
  }

  /// Flat little-endian float64 data plus a JSON header. `shape` is listed
  /// slowest axis first; the last entry varies fastest.
  void raw(const std::string& stem, std::span<const double> data, const std::vector<std::size_t>& shape,
           json header) const {
    std::string bytes(data.size() * sizeof(double), '\0');
    for (std::size_t i = 0; i < data.size(); ++i) {
      auto bits = std::bit_cast<std::uint64_t>(data[i]);
      if constexpr (std::endian::native == std::endian::big) bits = byteswap(bits);
      std::memcpy(bytes.data() + i * sizeof(double), &bits, sizeof bits);
    }
    text(stem + ".bin", bytes);
    header["data"] = stem + ".bin";
    header["dtype"] = "float64";
    header["byte_order"] = "little";
    header["shape"] = shape;
    json_file(stem + ".json", header);
  }

 private:
  static std::uint64_t byteswap(std::uint64_t v) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r = (r << 8) | ((v >> (8 * i)) & 0xff);
    return r;
  }

  fs::path dir_;
};

/// Shape (slowest first) and header for a field on a grid with axis 0 fastest.
template <class Grid>
std::pair<std::vector<std::size_t>, json> grid_layout(const Grid& g, std::optional<TimeGrid> time = std::nullopt) {
  std::vector<std::size_t> shape;
  json axes = json::array(), spacing = json::array(), origin = json::array();
  if (time) {
    shape.push_back(static_cast<std::size_t>(time->steps() + 1));
    axes.push_back("t");
    spacing.push_back(time->dt());
    origin.push_back(time->t0());
  }
  for (int a = g.dim() - 1; a >= 0; --a) {
    if constexpr (Grid::periodic) {
      shape.push_back(static_cast<std::size_t>(g.resolution(a)));
      origin.push_back(0.0);
    } else {
      shape.push_back(static_cast<std::size_t>(g.points(a)));
      origin.push_back(g.lower(a));
    }
    axes.push_back("x" + std::to_string(a + 1));
    spacing.push_back(g.spacing(a));
  }
  json h;
  h["axes"] = axes;
  h["spacing"] = spacing;
  h["origin"] = origin;
  h["periodic"] = Grid::periodic;
  return {shape, h};
}

inline json error_json(const Error& e, int code) {
  json j;
  j["status"] = "error";
  j["exit_code"] = code;
  j["kind"] = std::string(to_string(e.kind()));
  j["message"] = e.what();
  if (e.last_residual) j["last_residual"] = num(*e.last_residual);
  if (e.step) j["step"] = *e.step;
  if (e.node) j["node"] = *e.node;
  if (const auto* p = dynamic_cast<const ParseError*>(&e)) {
    j["offset"] = p->offset;
    if (!p->expected.empty()) j["expected"] = p->expected;
  }
  return j;
}

// ---- commands ----------------------------------------------------------------
//
// Each command parses its configuration into a plan (any failure there is a
// configuration error) and returns a callable that does the numerical work.

struct Context {
  std::uint64_t seed = 0;
  bool timing = false;
  fs::path config_dir;
};

using Task = std::function<void(const Writer&)>;

inline json summary_head(const std::string& command, const Context& ctx) {
  json j;
  j["command"] = command;
  j["status"] = "ok";
  j["seed"] = ctx.seed;
  return j;
}

inline std::vector<std::vector<std::string>> history_rows(const std::vector<double>& history) {
  std::vector<std::vector<std::string>> rows;
  for (std::size_t k = 0; k < history.size(); ++k) rows.push_back({std::to_string(k), fmt(history[k])});
  return rows;
}

inline CellOptions cell_options(const Section& s) {
  CellOptions o;
  o.tol = s.number("tol", o.tol);
  o.max_newton = s.integer("max_newton", o.max_newton);
  if (!(o.tol > 0.0) || o.max_newton < 1) bad_config("'tol' and 'max_newton' must be positive");
  return o;
}

inline IBVPOptions ibvp_options(const Section& s) {
  IBVPOptions o;
  o.tol = s.number("tol", o.tol);
  o.max_newton = s.integer("max_newton", o.max_newton);
  if (!(o.tol > 0.0) || o.max_newton < 1) bad_config("'tol' and 'max_newton' must be positive");
  return o;
}

inline Task cell_solve(const Section& s, const Context& ctx) {
  const int n = dimension(s);
  const auto periods = s.has("periods") ? s.numbers("periods", n) : std::vector<double>(n, 1.0);
  const TorusGrid grid(periods, s.integers("resolution", n));
  const Matrix B = s.has("B") ? s.matrix("B", n) : Matrix(Matrix::Identity(n, n));
  const auto f1 = expression(s, "f1", n, Vars::space);
  const bool normalize = s.boolean("normalize", false);
  const auto opt = cell_options(s);
  const bool dump = s.boolean("dump", false);
  s.finish();
  const SPDMatrix Bs(B);
  const auto field = sample_function(space_fn(f1.e, n), grid, {.require_positive = true, .normalize = normalize});

  return [=](const Writer& w) {
    auto res = solve_spatial_corrector(CellProblem{Bs, field, opt});
    json j = summary_head("cell-solve", ctx);
    j["dimension"] = n;
    j["nodes"] = grid.size();
    j["det_B"] = determinant(B);
    j["mean_f1"] = field.mean();
    j["newton_iterations"] = res.iterations;
    j["residual"] = res.residual;
    j["xi1_min"] = res.xi.min();
    j["xi1_max"] = res.xi.max();
    w.json_file("summary.json", j);
    w.csv("cell-solve.csv", {"iteration", "residual"}, history_rows(res.residual_history));
    if (dump) {
      auto [shape, h] = grid_layout(grid);
      w.raw("xi1", res.xi.values(), shape, h);
    }
  };
}

/// Everything needed to rebuild an ancient solution.
struct AncientPlan {
  int n = 2;
  std::vector<double> periods;
  TorusGrid grid = TorusGrid::unit(1, kMinResolution);
  double a0 = 1.0;
  int temporal_samples = 64;
  Matrix A;
  Vector b;
  double gamma = 0.0;
  Expr f1, f2;
  bool normalize = false;
  CellOptions options;
  json echo;

  // normalization constants (1 when not normalizing)
  double c1 = 1.0, c2 = 1.0;
  PeriodicField f1_field = PeriodicField(TorusGrid::unit(1, kMinResolution));
  std::vector<double> f2_samples;

  double f(const Vector& x, double t) const {
    return f1.e.eval(x.data(), n, 0.0) / c1 * f2.e(t) / c2;
  }
};

inline AncientPlan ancient_plan(const Section& s) {
  AncientPlan p;
  p.n = dimension(s);
  const int n = p.n;
  p.periods = s.has("periods") ? s.numbers("periods", n) : std::vector<double>(n, 1.0);
  p.grid = TorusGrid(p.periods, s.integers("resolution", n));
  p.a0 = s.number("temporal_period", 1.0);
  p.temporal_samples = s.integer("temporal_samples", 64);
  if (!(p.a0 > 0.0)) bad_config("'temporal_period' must be positive");
  if (p.temporal_samples < kMinResolution) bad_config("'temporal_samples' must be at least 8");
  p.A = s.matrix("A", n);
  p.b = s.has("b") ? Vector(Eigen::Map<const Vector>(s.numbers("b", n).data(), n)) : Vector(Vector::Zero(n));
  p.gamma = s.number("gamma", 0.0);
  p.f1 = expression(s, "f1", n, Vars::space);
  p.f2 = expression(s, "f2", n, Vars::time);
  p.normalize = s.boolean("normalize", false);
  p.options = cell_options(s);
  if (!is_spd(p.A)) bad_config("'A' must be symmetric positive definite");

  p.f1_field = sample_function(space_fn(p.f1.e, n), p.grid, {.require_positive = true});
  p.f2_samples = sample_period(p.f2.e, p.a0, p.temporal_samples);
  for (double v : p.f2_samples)
    if (!(v > 0.0) || !std::isfinite(v)) throw Error(ErrorKind::positivity_violation, "f2 must be positive");
  if (p.normalize) {
    p.c1 = p.f1_field.mean();
    for (auto& v : p.f1_field.mutable_values()) v /= p.c1;
    double m = 0.0;
    for (double v : p.f2_samples) m += v;
    p.c2 = m / p.temporal_samples;
    for (double& v : p.f2_samples) v /= p.c2;
  }

  p.echo["dimension"] = n;
  p.echo["periods"] = p.periods;
  json res = json::array();
  for (int a = 0; a < n; ++a) res.push_back(p.grid.resolution(a));
  p.echo["resolution"] = res;
  p.echo["temporal_period"] = p.a0;
  p.echo["temporal_samples"] = p.temporal_samples;
  p.echo["A"] = matrix_json(p.A);
  p.echo["b"] = vector_json(p.b);
  p.echo["gamma"] = p.gamma;
  p.echo["f1"] = p.f1.source;
  p.echo["f2"] = p.f2.source;
  p.echo["normalize"] = p.normalize;
  p.echo["tol"] = p.options.tol;
  p.echo["max_newton"] = p.options.max_newton;
  return p;
}

inline AncientSolution build(const AncientPlan& p) {
  return build_ancient(SPDMatrix(p.A), p.b, p.gamma, p.f1_field, p.f2_samples, p.a0, p.options);
}

inline Task build_ancient_command(const Section& s, const Context& ctx) {
  const auto plan = ancient_plan(s);
  const int residual_steps = s.integer("residual_steps", plan.temporal_samples);
  if (residual_steps < 1) bad_config("'residual_steps' must be positive");
  const bool dump = s.boolean("dump", false);
  s.finish();

  return [=](const Writer& w) {
    const auto sol = build(plan);
    const int n = plan.n;
    // discrete residual over one space-time cell
    std::vector<double> lo(n, 0.0);
    std::vector<int> cells(n);
    for (int a = 0; a < n; ++a) cells[a] = plan.grid.resolution(a);
    const BoxGrid box(lo, plan.periods, cells);
    const TimeGrid time(-plan.a0, residual_steps);
    auto u = sample_space_time(box, time, [&](const Vector& x, double t) { return sol(x, t); });
    auto f = sample_space_time(box, time, [&](const Vector& x, double t) { return plan.f(x, t); });
    const double pde = pma_residual(u, f).sup;

    json j = summary_head("build-ancient", ctx);
    j["tau"] = sol.tau();
    j["det_A"] = determinant(plan.A);
    j["mean_f"] = plan.f1_field.mean() * [&] {
      double m = 0.0;
      for (double v : plan.f2_samples) m += v;
      return m / plan.temporal_samples;
    }();
    j["mean_identity_defect"] = mean_identity_check(sol, plan.f1_field, plan.f2_samples);
    j["m1"] = sol.m1();
    j["m2"] = sol.m2();
    j["cell_newton_iterations"] = sol.diagnostics().newton_iterations;
    j["cell_residual"] = sol.diagnostics().residual;
    j["pde_residual"] = pde;
    j["pde_residual_grid"] = {{"spatial_cells", cells}, {"time_steps", residual_steps}};
    w.json_file("summary.json", j);
    w.csv("build-ancient.csv", {"iteration", "residual"}, history_rows(sol.diagnostics().residual_history));

    json anc = plan.echo;
    anc["command"] = "build-ancient";
    anc["tau"] = sol.tau();
    w.json_file("ancient.json", anc);
    if (dump) {
      auto [shape, h] = grid_layout(sol.xi1().grid());
      w.raw("xi1", sol.xi1().values(), shape, h);
    }
  };
}

inline json load_json(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) bad_config("cannot read " + path.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    bad_config(path.string() + ": " + e.what());
  }
}

inline Task fit_decomposition_command(const Section& s, const Context& ctx) {
  // the ancient solution comes from a build-ancient config or its ancient.json
  std::optional<json> source;
  if (s.has("ancient")) {
    const fs::path p = s.string("ancient");
    source = load_json(p.is_absolute() ? p : ctx.config_dir / p);
  }
  std::optional<AncientPlan> plan;
  if (source) {
    Section src(*source, "ancient:");
    src.has("command");
    src.has("tau");  // informational
    plan = ancient_plan(src);
    src.finish();
  } else {
    plan = ancient_plan(s);
  }
  FitOptions fopt;
  fopt.spatial_samples = s.integer("fit_spatial_samples", fopt.spatial_samples);
  fopt.temporal_samples = s.integer("fit_temporal_samples", fopt.temporal_samples);
  const auto radii = s.has("radii") ? s.number_list("radii") : std::vector<double>{10.0, 20.0, 40.0};
  const double eps = s.number("asymptotic_eps", 0.5);
  const int asym_samples = s.integer("asymptotic_samples", 256);
  const int quotient_samples = s.integer("quotient_samples", 1000);
  const int max_coeff = s.integer("max_lattice_coefficient", 3);
  if (!(eps > 0.0 && eps < 1.0)) bad_config("'asymptotic_eps' must lie in (0,1)");
  if (asym_samples < 1 || quotient_samples < 1 || max_coeff < 1) bad_config("sample counts must be positive");
  s.finish();

  return [=, plan = *plan](const Writer& w) {
    const auto sol = build(plan);
    const Evaluator u = [&sol](const Vector& x, double t) { return sol(x, t); };
    FitOptions o = fopt;
    o.f = [&plan](const Vector& x, double t) { return plan.f(x, t); };
    const auto fit = fit_decomposition(u, plan.periods, plan.a0, o);
    const int n = plan.n;

    // lattice quotients: standard set plus seeded random lattice directions
    std::mt19937_64 rng(ctx.seed);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    auto set = LatticeDirectionSet::standard(plan.periods);
    auto point = [&] {
      Vector x(n);
      for (int a = 0; a < n; ++a) x[a] = (4.0 * U(rng) - 2.0) * plan.periods[a];
      return x;
    };
    double lattice_defect = 0.0;
    for (std::size_t i = 0; i < set.size(); ++i)
      for (int k = 0; k < 16; ++k) {
        const Vector e = set[i];
        const double q = second_diff_quotient(u, e, point(), -4.0 * plan.a0 * U(rng));
        lattice_defect = std::max(lattice_defect, std::abs(q - e.dot(fit.A.matrix() * e) / e.squaredNorm()));
      }
    const double lam_max = Eigen::SelfAdjointEigenSolver<Matrix>(fit.A.matrix()).eigenvalues().maxCoeff();
    double sampled_sup = -std::numeric_limits<double>::infinity();
    double sampled_inf = std::numeric_limits<double>::infinity();
    for (int k = 0; k < quotient_samples; ++k) {
      const Vector e = set.random(rng, max_coeff);
      const double q = second_diff_quotient(u, e, point(), -4.0 * plan.a0 * U(rng));
      sampled_sup = std::max(sampled_sup, q);
      sampled_inf = std::min(sampled_inf, q);
    }
    double period_defect = 0.0;
    for (int m : {1, 2, 3})
      for (int k = 0; k < 16; ++k) {
        const double q = time_diff_quotient(u, m * plan.a0, point(), -4.0 * plan.a0 * U(rng));
        period_defect = std::max(period_defect, std::abs(q + fit.tau));
      }
    double tq_min = std::numeric_limits<double>::infinity(), tq_max = -tq_min;
    for (int k = 0; k < quotient_samples; ++k) {
      const double q = time_diff_quotient(u, 3.0 * plan.a0 * U(rng) + 1e-6, point(), -4.0 * plan.a0 * U(rng));
      tq_min = std::min(tq_min, q);
      tq_max = std::max(tq_max, q);
    }
    const auto asym = asymptotic_check(u, fit, radii, eps, asym_samples, ctx.seed);

    json j = summary_head("fit-decomposition", ctx);
    json rec;
    rec["tau"] = fit.tau;
    rec["A"] = matrix_json(fit.A.matrix());
    rec["b"] = vector_json(fit.b);
    rec["gamma"] = fit.gamma;
    j["recovered"] = rec;
    json err;
    err["tau"] = std::abs(fit.tau - sol.tau());
    err["A"] = (fit.A.matrix() - plan.A).cwiseAbs().maxCoeff();
    err["b"] = (fit.b - plan.b).cwiseAbs().maxCoeff();
    err["gamma"] = std::abs(fit.gamma - plan.gamma);
    j["parameter_error"] = err;
    j["det_A"] = determinant(fit.A.matrix());
    json res;
    res["spatial_periodicity"] = fit.residuals.spatial_periodicity;
    res["temporal_periodicity"] = fit.residuals.temporal_periodicity;
    res["pde_residual"] = num(*fit.residuals.pde_residual);
    res["mean_identity"] = num(*fit.residuals.mean_identity);
    j["residuals"] = res;
    json quo;
    quo["lattice_defect"] = lattice_defect;
    quo["random_lattice_max"] = sampled_sup;
    quo["random_lattice_min"] = sampled_inf;
    quo["max_eigenvalue_A"] = lam_max;
    quo["period_time_defect"] = period_defect;
    quo["time_quotient_min"] = tq_min;
    quo["time_quotient_max"] = tq_max;
    quo["neg_m2"] = -sol.m2();
    quo["neg_m1"] = -sol.m1();
    j["quotients"] = quo;
    j["asymptotic"] = {{"eps", eps}, {"radii", asym.radii}, {"ratios", asym.ratios}, {"max_ratio", asym.max_ratio}};
    w.json_file("summary.json", j);
    std::vector<std::vector<std::string>> rows;
    for (std::size_t i = 0; i < asym.radii.size(); ++i) rows.push_back({fmt(asym.radii[i]), fmt(asym.ratios[i])});
    w.csv("fit-decomposition.csv", {"radius", "ratio"}, rows);
  };
}

inline Task ibvp_solve(const Section& s, const Context& ctx) {
  const int n = dimension(s);
  const auto lower = s.numbers("lower", n);
  const auto upper = s.numbers("upper", n);
  const auto res = s.raw("resolution").is_array() ? s.number_list("resolution") : std::vector<double>{double(s.integer("resolution"))};
  const std::size_t levels = res.size();
  const auto steps = s.numbers("steps", levels);
  const double t0 = s.number("t0");
  const auto f = expression(s, "f", n, Vars::space_time);
  const auto g = expression(s, "g", n, Vars::space_time);
  std::optional<Expr> exact;
  if (s.has("exact")) exact = expression(s, "exact", n, Vars::space_time);
  std::optional<std::pair<double, double>> bounds;
  if (s.has("expected_bounds")) {
    const auto b = s.numbers("expected_bounds", 2);
    bounds = {b[0], b[1]};
  }
  const auto opt = ibvp_options(s);
  const bool dump = s.boolean("dump", false);
  s.finish();
  std::vector<IBVPProblem> problems;
  for (std::size_t l = 0; l < levels; ++l) {
    if (res[l] != std::floor(res[l]) || steps[l] != std::floor(steps[l])) bad_config("resolutions and steps must be integers");
    problems.push_back(IBVPProblem{BoxGrid(lower, upper, std::vector<int>(n, static_cast<int>(res[l]))),
                                   TimeGrid(t0, static_cast<int>(steps[l])), space_time_fn(f.e, n),
                                   space_time_fn(g.e, n), bounds, opt});
  }

  return [=](const Writer& w) {
    json j = summary_head("ibvp-solve", ctx);
    json lv = json::array();
    std::vector<std::vector<std::string>> rows;
    std::optional<double> prev_error;
    std::optional<IBVPResult> last;
    for (const auto& p : problems) {
      auto r = solve_ibvp(p);
      json e;
      e["resolution"] = p.grid.cells(0);
      e["steps"] = p.time.steps();
      e["h"] = p.grid.spacing(0);
      e["dt"] = p.time.dt();
      e["newton_iterations"] = r.newton_iterations;
      e["pde_residual"] = r.pde_residual;
      e["min_neg_ut"] = r.min_neg_ut;
      e["max_neg_ut"] = r.max_neg_ut;
      e["min_hessian_eigenvalue"] = r.convexity.min_eigenvalue;
      e["max_hessian_eigenvalue"] = r.convexity.max_eigenvalue;
      e["convex"] = r.convexity.convex;
      e["monotone"] = r.convexity.monotone;
      std::string err_field;
      if (exact) {
        double err = 0.0;
        const auto& grid = p.grid;
        for (int k = 0; k <= p.time.steps(); ++k)
          for (std::size_t node = 0; node < grid.size(); ++node) {
            const Vector x = grid.coord(node);
            err = std::max(err, std::abs(r.u.at(node, k) - exact->e.eval(x.data(), n, p.time.time(k))));
          }
        e["max_error"] = err;
        if (prev_error) e["error_ratio"] = *prev_error / err;
        prev_error = err;
        err_field = fmt(err);
      }
      rows.push_back({std::to_string(p.grid.cells(0)), std::to_string(p.time.steps()), fmt(p.grid.spacing(0)),
                      fmt(p.time.dt()), std::to_string(r.newton_iterations), fmt(r.pde_residual), fmt(r.min_neg_ut),
                      fmt(r.max_neg_ut), err_field});
      lv.push_back(e);
      last = std::move(r);
    }
    if (bounds) j["expected_bounds"] = {bounds->first, bounds->second};
    j["levels"] = lv;
    j["iterations_per_step"] = last->iterations_per_step;
    w.json_file("summary.json", j);
    w.csv("ibvp-solve.csv",
          {"resolution", "steps", "h", "dt", "newton_iterations", "pde_residual", "min_neg_ut", "max_neg_ut",
           "max_error"},
          rows);
    if (dump) {
      auto [shape, h] = grid_layout(last->u.grid(), last->u.time());
      w.raw("u", last->u.values(), shape, h);
    }
  };
}

inline Task homogenize_sweep(const Section& s, const Context& ctx) {
  const int n = dimension(s);
  const BoxGrid grid = window(s, n);
  const double t0 = s.number("t0");
  const int steps = s.integer("steps");
  const auto g = expression(s, "g", n, Vars::space_time);
  const auto f1 = expression(s, "f1", n, Vars::space);
  const auto f2 = expression(s, "f2", n, Vars::time);
  const auto eps = s.number_list("eps");
  for (double e : eps)
    if (!(e > 0.0)) bad_config("'eps' entries must be positive");
  const auto opt = ibvp_options(s);
  s.finish();
  HomogenizationSetup setup{grid, TimeGrid(t0, steps), space_time_fn(g.e, n), space_fn(f1.e, n),
                            [e = f2.e](double t) { return e(t); }, opt};

  return [=](const Writer& w) {
    const auto rows = sweep(eps, setup);
    if (!rows.empty() && std::none_of(rows.begin(), rows.end(), [](const SweepRow& r) { return r.run.has_value(); }))
      throw *rows.front().error;
    json j = summary_head("homogenize-sweep", ctx);
    json arr = json::array();
    std::vector<std::vector<std::string>> csv;
    for (const auto& r : rows) {
      json e;
      e["eps"] = r.eps;
      if (r.run) {
        const double ms = ctx.timing ? r.run->wall_ms : 0.0;
        e["cell_measure"] = r.run->cell_measure;
        e["gap"] = r.run->gap;
        e["newton_iters_total"] = r.run->newton_iterations;
        e["wall_ms"] = ms;
        csv.push_back({fmt(r.eps), fmt(r.run->cell_measure), fmt(r.run->gap),
                       std::to_string(r.run->newton_iterations), fmt(ms)});
      } else {
        e["error"] = error_json(*r.error, solver_error);
        csv.push_back({fmt(r.eps), "", "", "", ""});
      }
      arr.push_back(e);
    }
    const auto beta = fitted_rate(rows);
    j["beta_hat"] = beta ? json(*beta) : json(nullptr);
    j["timing"] = ctx.timing;
    j["rows"] = arr;
    w.json_file("summary.json", j);
    w.csv("homogenize-sweep.csv", {"eps", "cell_measure", "gap", "newton_iters_total", "wall_ms"}, csv);
  };
}

inline Task level_set(const Section& s, const Context& ctx) {
  const int n = dimension(s);
  const BoxGrid grid = window(s, n);
  const auto u = expression(s, "u", n, Vars::space_time);
  const auto levels = s.number_list("levels");
  for (double H : levels)
    if (!(H > 0.0)) bad_config("'levels' entries must be positive");
  const bool normalize = s.boolean("normalize", true);
  const int inner = s.integer("inner_samples", 64);
  std::optional<std::pair<double, double>> m;
  int time_samples = 16, radial_samples = 8;
  if (s.has("john")) {
    const auto js = s.section("john");
    m = {js.number("m1"), js.number("m2")};
    time_samples = js.integer("time_samples", time_samples);
    radial_samples = js.integer("radial_samples", radial_samples);
    js.finish();
    if (!(m->first > 0.0 && m->second > 0.0)) bad_config("'john.m1' and 'john.m2' must be positive");
  }
  s.finish();

  return [=](const Writer& w) {
    Evaluator ev = space_time_fn(u.e, n);
    if (normalize) ev = normalize_at_minimum(ev, grid);
    json j = summary_head("level-set", ctx);
    json table = json::array();
    std::vector<std::vector<std::string>> rows;
    for (double H : levels) {
      const auto rep = level_set_report([&](const Vector& x) { return ev(x, 0.0); }, H, grid, inner);
      json e;
      e["H"] = H;
      e["R"] = rep.R;
      e["H_over_R2"] = rep.ratio;
      e["alpha"] = rep.alpha;
      e["boundary_points"] = rep.boundary.size();
      e["inliers"] = rep.inliers.size();
      e["mvee_iterations"] = rep.ellipsoid.iterations;
      e["center"] = vector_json(rep.ellipsoid.center);
      e["a_H"] = matrix_json(rep.a_H);
      e["b_H"] = vector_json(rep.b_H);
      e["contains_inliers"] = rep.contains_inliers;
      e["john_inner"] = rep.john_inner;
      std::string holds;
      if (m) {
        const auto jc = john_normalization_check(ev, rep, grid, m->first, m->second, time_samples, radial_samples);
        e["normalization"] = {{"eps0", jc.eps0},
                              {"eps1", jc.eps1},
                              {"eps2", jc.eps2},
                              {"inner_box", jc.inner_box},
                              {"sublevel_cylinder", jc.sublevel_cylinder},
                              {"outer", jc.outer},
                              {"worst_inner", jc.worst_inner},
                              {"worst_cylinder", jc.worst_cylinder},
                              {"worst_radius", jc.worst_radius},
                              {"worst_depth", jc.worst_depth},
                              {"holds", jc.holds()}};
        holds = jc.holds() ? "true" : "false";
      }
      rows.push_back({fmt(H), fmt(rep.R), fmt(rep.ratio), fmt(rep.alpha), std::to_string(rep.boundary.size()),
                      rep.contains_inliers ? "true" : "false", rep.john_inner ? "true" : "false", holds});
      table.push_back(e);
    }
    j["levels"] = table;
    w.json_file("summary.json", j);
    w.csv("level-set.csv",
          {"H", "R", "H_over_R2", "alpha", "boundary_points", "contains_inliers", "john_inner", "normalization_holds"},
          rows);
  };
}

}  // namespace detail

/// Runs one command; returns the process exit code. Errors are reported as
/// JSON in <out>/error.json and on `err`.
inline int run(const RunOptions& opt, std::ostream& err) {
  using namespace detail;
  fs::path out = opt.out.value_or("out");
  auto fail = [&](const Error& e, int code) {
    const json j = error_json(e, code);
    err << j.dump() << "\n";
    try {
      Writer(out).json_file("error.json", j);
    } catch (...) {
    }
    return code;
  };

  Task task;
  Context ctx;
  try {
    if (std::find(commands().begin(), commands().end(), opt.command) == commands().end())
      bad_config("unknown command '" + opt.command + "'");
    const json cfg = load_json(opt.config);
    const Section s(cfg, "");
    reject_key_mismatch(s, opt.command);
    if (s.has("output_dir") && !opt.out) {
      const fs::path p = s.string("output_dir");
      out = p.is_absolute() ? p : opt.config.parent_path() / p;
    }
    std::uint64_t seed = 0;
    if (s.has("seed")) {
      const auto& v = s.raw("seed");
      if (!v.is_number_unsigned()) bad_config("'seed' must be a non-negative integer");
      seed = v.get<std::uint64_t>();
    }
    ctx.seed = opt.seed.value_or(seed);
    ctx.timing = opt.timing;
    ctx.config_dir = opt.config.parent_path();
    static const std::map<std::string, std::function<Task(const Section&, const Context&)>> table{
        {"cell-solve", cell_solve},
        {"build-ancient", build_ancient_command},
        {"ibvp-solve", ibvp_solve},
        {"homogenize-sweep", homogenize_sweep},
        {"fit-decomposition", fit_decomposition_command},
        {"level-set", level_set}};
    task = table.at(opt.command)(s, ctx);
  } catch (const Error& e) {
    return fail(e, config_error);
  } catch (const std::exception& e) {
    return fail(Error(ErrorKind::config_invalid, e.what()), config_error);
  }

  try {
    const Writer w(out);
    fs::remove(out / "error.json");
    task(w);
  } catch (const Error& e) {
    return fail(e, solver_error);
  } catch (const std::exception& e) {
    return fail(Error(ErrorKind::invalid_argument, e.what()), solver_error);
  }
  return ok;
}

}  // namespace pampere::cli
