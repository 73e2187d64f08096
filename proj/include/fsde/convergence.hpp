#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "fsde/mild_solver.hpp"
#include "fsde/parallel.hpp"
#include "fsde/stats.hpp"

namespace fsde {

struct StrongOrderReport {
  std::vector<double> h;
  std::vector<double> error;   // E|X^h(T) - X^{h/2}(T)|
  std::vector<double> stderr_;
  double slope = 0.0;          // of log error against log h
};

/*!
 * Empirical strong order from successive halvings. Every level draws its
 * increments from one Brownian path on the finest grid (h_min / 2), summed
 * pairwise up to the level's step, so X^h and X^{h/2} see the same noise.
 * The model and the initial segment are rebuilt per grid because the delay
 * measure is discretized on it.
 */
inline StrongOrderReport strong_order(const std::function<DelayMeasure(double)>& measure_for,
                                      const std::function<ModelSpec(const DelayMeasure&)>& model_for,
                                      const std::function<Segment(const DelayMeasure&)>& initial_for,
                                      std::vector<int> exponents, double T, std::size_t n, SolverConfig cfg,
                                      std::uint64_t seed, int workers = 1) {
  require(exponents.size() >= 2, ErrorCode::domain, "strong order needs at least two step sizes");
  require(n >= 2, ErrorCode::domain, "strong order needs at least two paths");
  const int finest = *std::max_element(exponents.begin(), exponents.end()) + 1;
  auto terminal = [&](int e, std::vector<Vec>& out) {
    SolverConfig c = cfg;
    c.h = std::ldexp(1.0, -e);
    c.T_end = T;
    c.noise_refine = finest - e;
    const auto nu = measure_for(c.h);
    const auto m = model_for(nu);
    const auto xi = initial_for(nu);
    const PathIntegrator integ(m, nu, c);
    out.assign(n, Vec());
    parallel_for(n, workers, [&](std::size_t i) {
      const auto p = integ.solve(xi, seed, i);
      require(!p.lifetime, ErrorCode::explosion_before_horizon, "path left the simulation range");
      out[i] = p.terminal();
    });
  };
  StrongOrderReport r;
  std::vector<double> lx, ly;
  for (int e : exponents) {
    std::vector<Vec> coarse, fine;
    terminal(e, coarse);
    terminal(e + 1, fine);
    std::vector<double> gap(n);
    for (std::size_t i = 0; i < n; ++i) gap[i] = (coarse[i] - fine[i]).norm();
    const auto est = estimate_mean(gap);
    r.h.push_back(std::ldexp(1.0, -e));
    r.error.push_back(est.mean);
    r.stderr_.push_back(est.stderr_);
    lx.push_back(std::log(r.h.back()));
    ly.push_back(std::log(est.mean));
  }
  r.slope = regression_slope(lx, ly);
  return r;
}

}  // namespace fsde
