#pragma once

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/tools/roots.hpp>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "fsde/error.hpp"
#include "fsde/mild_solver.hpp"
#include "fsde/model.hpp"

namespace fsde {

using ScalarFn = std::function<double(double)>;

namespace detail {

// int over one decade [10^k, 10^{k+1}] of ds / Phi(s), in log variables
inline double decade_integral(const ScalarFn& phi, int k) {
  const double lo = k * std::log(10.0);
  const double hi = lo + std::log(10.0);
  auto f = [&](double v) { return std::exp(v) / phi(std::exp(v)); };
  return boost::math::quadrature::gauss_kronrod<double, 31>::integrate(f, lo, hi, 10, 1e-10);
}

}  // namespace detail

// Checks that Phi is positive and non-decreasing on [1, 1e8] and that
// int_1^inf ds / Phi(s) looks divergent there: the last decade must still
// contribute at least 30% of the average decade.
inline void check_bihari_phi(const ScalarFn& phi) {
  double prev = 0.0;
  for (int i = 0; i <= 160; ++i) {
    const double s = std::pow(10.0, i / 20.0);
    const double v = phi(s);
    require(v > 0.0 && std::isfinite(v), ErrorCode::domain, "Phi must be positive and finite on [1, 1e8]");
    require(v >= prev * (1.0 - 1e-12), ErrorCode::domain, "Phi must be non-decreasing");
    prev = v;
  }
  double total = 0.0;
  double last = 0.0;
  for (int k = 0; k < 8; ++k) {
    last = detail::decade_integral(phi, k);
    total += last;
  }
  require(last >= 0.3 * total / 8.0, ErrorCode::domain,
          "int ds/Phi(s) appears to converge on [1, 1e8]; the Bihari bound needs a divergent integral");
}

// Psi(s) = int_1^s dr / (2 Phi(K1 + K2 r)), integrated in v = ln r.
inline double bihari_psi(const ScalarFn& phi, double K1, double K2, double s) {
  if (s <= 1.0) return 0.0;
  auto f = [&](double v) {
    const double r = std::exp(v);
    return r / (2.0 * phi(K1 + K2 * r));
  };
  return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, 0.0, std::log(s), 15, 1e-14);
}

// Psi^{-1}(alpha + T): the a-priori bound on sup_{r <= T} |Y(r)|^2.
inline double bihari_bound(const ScalarFn& phi, double K1, double K2, double alpha, double T, double s_max = 1e8) {
  require(K1 >= 0.0 && K2 >= 0.0, ErrorCode::domain, "K1 and K2 must be non-negative");
  require(std::isfinite(alpha) && T > 0.0, ErrorCode::domain, "alpha must be finite and T positive");
  require(s_max > 1.0, ErrorCode::domain, "quadrature cap must exceed 1");
  check_bihari_phi(phi);
  const double target = alpha + T;
  if (target <= 0.0) return 1.0;
  const double v_max = std::log(s_max);
  if (bihari_psi(phi, K1, K2, s_max) < target) {
    throw Error(ErrorCode::bound_exceeds_cap,
                "Psi(s_max) < alpha + T; widen the cap (s_max = " + std::to_string(s_max) + ")");
  }
  auto g = [&](double v) { return bihari_psi(phi, K1, K2, std::exp(v)) - target; };
  std::uintmax_t iters = 200;
  const auto [lo, hi] =
      boost::math::tools::toms748_solve(g, 0.0, v_max, g(0.0), g(v_max), boost::math::tools::eps_tolerance<double>(50), iters);
  return std::exp(0.5 * (lo + hi));
}

struct AprioriReport {
  std::size_t n = 0;
  std::size_t passed = 0;
  double worst_ratio = 0.0;       // max of sup|Y|^2 / bound
  std::vector<double> sup_y_sq;   // per path
  std::vector<double> bounds;     // per path
  double pass_fraction() const { return n ? static_cast<double>(passed) / static_cast<double>(n) : 0.0; }
};

struct AprioriPath {
  double sup_y_sq = 0.0;
  double alpha = 0.0;
  double K1 = 0.0;
  double K2 = 0.0;
  double bound = 0.0;
};

// Splits one path into the stochastic convolution Xbar (zero on [-r0, 0])
// and Y = X - Xbar, then compares sup_{t <= T} |Y(t)|^2 with the bound.
inline AprioriPath apriori_path(const SamplePath& p, const ModelSpec& m, const DelayMeasure& nu, const SolverConfig& cfg,
                                double T, double s_max = 1e8) {
  if (!m.growth) throw Error(ErrorCode::unsupported_model, "model '" + m.name + "' declares no growth condition");
  const long N = grid_count(T, p.h, "T");
  require(N <= p.n_done, ErrorCode::out_of_range, "path does not reach T");
  const int d = p.d;
  const auto f = semigroup_factors(m.A, p.h);
  const long nh = p.n_hist;
  // |Xbar|^2 series with zero history, for the running nu(|Xbar|^2)
  std::vector<double> sq(static_cast<std::size_t>(nh + N + 1), 0.0);
  WindowSum nu_sq(nu, 1);
  nu_sq.reset(sq.data());
  Vec xbar = zeros(d);
  AprioriPath out;
  double integral = 0.0;
  for (long k = 0; k <= N; ++k) {
    const Vec x = p.state(k);
    const Vec y = x - xbar;
    out.sup_y_sq = std::max(out.sup_y_sq, y.squaredNorm());
    if (k == N) break;
    const double seg = std::sqrt(nu_sq.value()[0] + xbar.squaredNorm());
    integral += m.growth->h(seg) * p.h;
    const Mat q = m.diffusion(static_cast<double>(k) * p.h, x);
    const auto dw = p.increment(k);
    Vec noise = zeros(d);
    for (int i = 0; i < d; ++i)
      for (int c = 0; c < q.cols(); ++c) noise[i] += q(i, c) * dw[static_cast<std::size_t>(c)];
    for (int i = 0; i < d; ++i) {
      xbar[i] = cfg.scheme == Scheme::exponential_euler ? f.E[i] * (xbar[i] + noise[i])
                                                        : xbar[i] + p.h * -m.A.rate(i) * xbar[i] + noise[i];
    }
    sq[static_cast<std::size_t>(nh + k + 1)] = xbar.squaredNorm();
    nu_sq.advance(sq.data() + k + 1);
  }
  const Vec x0 = p.state(0);
  out.alpha = x0.squaredNorm() + 2.0 * integral;
  out.K1 = nu.kappa(T) * std::pow(seg_norm(nu, p.segment_view(0)), 2);
  out.K2 = 1.0 + nu.mass_of_last(T);
  out.bound = bihari_bound(m.growth->phi, out.K1, out.K2, out.alpha, T, s_max);
  return out;
}

inline AprioriReport apriori_check(std::span<const SamplePath> paths, const ModelSpec& m, const DelayMeasure& nu,
                                   const SolverConfig& cfg, double T) {
  AprioriReport rep;
  for (const auto& p : paths) {
    const auto r = apriori_path(p, m, nu, cfg, T);
    ++rep.n;
    if (r.sup_y_sq <= r.bound) ++rep.passed;
    rep.worst_ratio = std::max(rep.worst_ratio, r.sup_y_sq / r.bound);
    rep.sup_y_sq.push_back(r.sup_y_sq);
    rep.bounds.push_back(r.bound);
  }
  return rep;
}

}  // namespace fsde
