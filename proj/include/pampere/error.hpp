#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace pampere {

enum class ErrorKind {
  invalid_argument,
  out_of_stencil,
  no_predecessor,
  positivity_violation,
  grid_mismatch,
  convexity_loss,
  monotonicity_loss,
  outside_domain,
  non_convergence,
  compatibility,
  resolution,
  fit_failure,
  clipped_level_set,
  syntax,
  unknown_identifier,
  division_by_zero,
  config_invalid,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument: return "invalid_argument";
    case ErrorKind::out_of_stencil: return "out_of_stencil";
    case ErrorKind::no_predecessor: return "no_predecessor";
    case ErrorKind::positivity_violation: return "positivity_violation";
    case ErrorKind::grid_mismatch: return "grid_mismatch";
    case ErrorKind::convexity_loss: return "convexity_loss";
    case ErrorKind::monotonicity_loss: return "monotonicity_loss";
    case ErrorKind::outside_domain: return "outside_domain";
    case ErrorKind::non_convergence: return "non_convergence";
    case ErrorKind::compatibility: return "compatibility";
    case ErrorKind::resolution: return "resolution";
    case ErrorKind::fit_failure: return "fit_failure";
    case ErrorKind::clipped_level_set: return "clipped_level_set";
    case ErrorKind::syntax: return "syntax";
    case ErrorKind::unknown_identifier: return "unknown_identifier";
    case ErrorKind::division_by_zero: return "division_by_zero";
    case ErrorKind::config_invalid: return "config_invalid";
  }
  return "unknown";
}

/// Single exception type for the library. Solver failures carry the last
/// residual and, for time-stepping, the index of the failing step.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  std::optional<double> last_residual;
  std::optional<long> step;
  std::optional<long> node;

  Error& with_residual(double r) {
    last_residual = r;
    return *this;
  }
  Error& with_step(long s) {
    step = s;
    return *this;
  }
  Error& with_node(long n) {
    node = n;
    return *this;
  }

 private:
  ErrorKind kind_;
};

}  // namespace pampere
