#pragma once

#include <stdexcept>
#include <string>

namespace fsde {

enum class ErrorCode {
  domain,
  grid_mismatch,
  out_of_range,
  numerical_overflow,
  singular_diffusion,
  bound_exceeds_cap,
  unsupported_model,
  coverage,
  box_escape,
  divergence,
  precondition,
  inconsistent_variance,
  explosion_before_horizon,
  config,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::domain: return "domain";
    case ErrorCode::grid_mismatch: return "grid-mismatch";
    case ErrorCode::out_of_range: return "out-of-range";
    case ErrorCode::numerical_overflow: return "numerical-overflow";
    case ErrorCode::singular_diffusion: return "singular-diffusion";
    case ErrorCode::bound_exceeds_cap: return "bound-exceeds-cap";
    case ErrorCode::unsupported_model: return "unsupported-model";
    case ErrorCode::coverage: return "coverage";
    case ErrorCode::box_escape: return "box-escape";
    case ErrorCode::divergence: return "divergence";
    case ErrorCode::precondition: return "precondition";
    case ErrorCode::inconsistent_variance: return "inconsistent-variance";
    case ErrorCode::explosion_before_horizon: return "explosion-before-horizon";
    case ErrorCode::config: return "config";
  }
  return "unknown";
}

// Every failure raised by the library carries a machine-checkable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Raised by the step routine; carries the grid time at which the state left
// the finite range.
class OverflowError : public Error {
 public:
  OverflowError(double t, const std::string& what)
      : Error(ErrorCode::numerical_overflow, what), t_(t) {}

  double time() const noexcept { return t_; }

 private:
  double t_;
};

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) throw Error(code, what);
}

}  // namespace fsde
