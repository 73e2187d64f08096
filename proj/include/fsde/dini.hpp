#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "fsde/error.hpp"

namespace fsde {

// Modulus of continuity phi for the non-Lipschitz drift.
class DiniModulus {
 public:
  enum class Family { power, log, tabulated };

  // phi(s) = scale * s^alpha
  static DiniModulus power(double alpha, double scale = 1.0) {
    if (!(alpha > 0.0) || !(scale > 0.0)) throw Error(ErrorCode::domain, "power modulus needs alpha, scale > 0");
    DiniModulus m;
    m.family_ = Family::power;
    m.param_ = alpha;
    m.scale_ = scale;
    return m;
  }

  // phi(s) = c / ln(e + 1/s)
  static DiniModulus log(double c) {
    DiniModulus m;
    m.family_ = Family::log;
    m.param_ = c;
    return m;
  }

  // Piecewise-linear through (s_i, phi_i), s ascending, phi(0) = 0 implied.
  static DiniModulus tabulated(std::vector<double> s, std::vector<double> v) {
    if (s.size() != v.size() || s.empty()) throw Error(ErrorCode::domain, "tabulated modulus needs matching arrays");
    if (!std::is_sorted(s.begin(), s.end()) || s.front() <= 0.0) {
      throw Error(ErrorCode::domain, "tabulated abscissae must be positive and ascending");
    }
    DiniModulus m;
    m.family_ = Family::tabulated;
    m.s_ = std::move(s);
    m.v_ = std::move(v);
    return m;
  }

  Family family() const { return family_; }
  double parameter() const { return param_; }

  double operator()(double s) const {
    if (s <= 0.0) return 0.0;
    switch (family_) {
      case Family::power: return scale_ * std::pow(s, param_);
      case Family::log: return param_ / std::log(std::numbers::e + 1.0 / s);
      case Family::tabulated: {
        if (s >= s_.back()) return v_.back();
        const auto it = std::upper_bound(s_.begin(), s_.end(), s);
        const std::size_t i = static_cast<std::size_t>(it - s_.begin());
        const double s0 = i == 0 ? 0.0 : s_[i - 1];
        const double v0 = i == 0 ? 0.0 : v_[i - 1];
        return v0 + (v_[i] - v0) * (s - s0) / (s_[i] - s0);
      }
    }
    return 0.0;
  }

  std::string describe() const {
    switch (family_) {
      case Family::power: return "power(" + std::to_string(param_) + ", " + std::to_string(scale_) + ")";
      case Family::log: return "log(" + std::to_string(param_) + ")";
      case Family::tabulated: return "tabulated(" + std::to_string(s_.size()) + ")";
    }
    return "?";
  }

 private:
  Family family_ = Family::power;
  double param_ = 1.0;
  double scale_ = 1.0;
  std::vector<double> s_;
  std::vector<double> v_;
};

// s_k = 2^{-k}, k = 0..count-1
inline std::vector<double> dyadic_grid(int count) {
  std::vector<double> s(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) s[static_cast<std::size_t>(k)] = std::ldexp(1.0, -k);
  return s;
}

struct DiniReport {
  bool monotone = true;
  bool sq_concave = true;
  bool dini_convergent = true;
  // S(K) - S(K/2) of the dyadic partial sums of phi(s)/s ds; convergence is
  // declared when this is at most 10% of S(K).
  double tail = 0.0;
  double partial_sum = 0.0;
  bool pass() const { return monotone && sq_concave && dini_convergent; }
};

// Sampled membership test for the class D: increasing, phi^2 concave,
// int_0^1 phi(s)/s ds < infinity.
inline DiniReport dini_check(const DiniModulus& phi, std::vector<double> s_grid) {
  if (s_grid.size() < 20) throw Error(ErrorCode::domain, "dini_check needs at least 20 grid points");
  for (double s : s_grid) {
    if (!(s > 0.0 && s <= 1.0)) throw Error(ErrorCode::domain, "grid points must lie in (0, 1]");
  }
  std::sort(s_grid.begin(), s_grid.end());
  DiniReport rep;
  const std::size_t n = s_grid.size();
  constexpr double kTol = 1e-12;
  for (std::size_t i = 1; i < n; ++i) {
    if (phi(s_grid[i]) < phi(s_grid[i - 1]) - kTol) rep.monotone = false;
  }
  auto sq = [&](double s) { return phi(s) * phi(s); };
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double a = s_grid[i];
      const double b = s_grid[j];
      if (sq(0.5 * (a + b)) < 0.5 * (sq(a) + sq(b)) - kTol * (1.0 + sq(b))) rep.sq_concave = false;
    }
  }
  // int_{s/2}^{s} phi(r)/r dr ~ phi(s) ln 2 on each dyadic band, newest band last.
  std::vector<double> partial;
  double acc = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const double lo = i == 0 ? s_grid[0] * 0.5 : s_grid[i - 1];
    const double hi = s_grid[i];
    const double mid = 0.5 * (lo + hi);
    acc += phi(mid) * std::log(hi / lo);
    partial.push_back(acc);
  }
  rep.partial_sum = partial.back();
  rep.tail = partial.back() - partial[partial.size() / 2];
  rep.dini_convergent = rep.tail <= 0.1 * std::max(rep.partial_sum, 1e-300);
  return rep;
}

}  // namespace fsde
