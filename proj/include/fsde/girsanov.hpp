#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fsde/functionals.hpp"
#include "fsde/mild_solver.hpp"
#include "fsde/parallel.hpp"
#include "fsde/stats.hpp"

namespace fsde {

// Q^*(QQ^*)^{-1}(t, z) (b(t, z) + B(t, seg)).
inline Vec girsanov_shift(const ModelSpec& m, const DelayMeasure& nu, const Vec& z, const Segment& seg, double t) {
  const Vec v = m.drift(t, z) + m.delay_raw(t, nu, seg.view());
  return right_pseudo_solve(m.diffusion(t, z), v);
}

struct WeightAccumulator {
  double log_R = 0.0;
  double int_psi_sq = 0.0;

  // Left-endpoint Ito sums: <psi, dW> - |psi|^2 h / 2.
  void add(const Vec& psi, std::span<const double> dW, double h) {
    double dot = 0.0;
    for (int i = 0; i < psi.size(); ++i) dot += psi[i] * dW[static_cast<std::size_t>(i)];
    const double sq = psi.squaredNorm();
    log_R += dot - 0.5 * sq * h;
    int_psi_sq += sq * h;
  }
  double weight() const { return std::exp(log_R); }
};

// The drift-free auxiliary model: same A and Q, b = B = 0.
inline ModelSpec drift_free(const ModelSpec& m) {
  ModelSpec z = m;
  z.name = m.name + "/drift-free";
  z.zero_drift = true;
  z.zero_delay = true;
  z.B_nu = nullptr;
  z.history_map = nullptr;
  return z;
}

//---------------------------------------------------------------------------//
/*!
 * Girsanov density of the recorded path Z (simulated without b and B).
 *
 * For exponential Euler the shift is scaled per coordinate by
 * E^{-1} J / h = (e^{lambda h} - 1) / (lambda h) so that the reweighted
 * one-step law of Z equals the one-step law of the direct scheme exactly.
 * For Euler-Maruyama the factor is 1.
 */
inline WeightAccumulator girsanov_weight(const SamplePath& z, const ModelSpec& m, const DelayMeasure& nu,
                                         const SolverConfig& cfg) {
  const int d = m.d;
  const auto f = semigroup_factors(m.A, z.h);
  Vec scale(d);
  for (int i = 0; i < d; ++i) scale[i] = cfg.scheme == Scheme::exponential_euler ? f.J[i] / (f.E[i] * z.h) : 1.0;

  const bool mapped = static_cast<bool>(m.history_map);
  const bool fast = static_cast<bool>(m.B_nu) && !m.zero_delay;
  std::vector<double> mbuf;
  const double* hist = z.states.data();
  if (mapped) {
    mbuf.resize(z.states.size());
    for (long r = 0; r < z.n_hist + z.n_done + 1; ++r) {
      const Vec y = m.history_map(static_cast<double>(r - z.n_hist) * z.h, as_vec(z.states.data() + r * d, d));
      for (int i = 0; i < d; ++i) mbuf[static_cast<std::size_t>(r * d + i)] = y[i];
    }
    hist = mbuf.data();
  }
  WindowSum nu_sum(nu, d);
  if (fast) nu_sum.reset(hist);

  WeightAccumulator acc;
  const std::size_t win = static_cast<std::size_t>((z.n_hist + 1) * d);
  for (long k = 0; k < z.n_done; ++k) {
    const double t = static_cast<double>(k) * z.h;
    const long r = k + z.n_hist;
    const Vec x = as_vec(z.states.data() + r * d, d);
    Vec v = m.drift(t, x);
    if (!m.zero_delay) {
      if (fast) {
        v += m.B_nu(t, nu_sum.value(), as_vec(hist + r * d, d));
      } else {
        const SegmentView raw{std::span<const double>(z.states.data() + k * d, win), d};
        const SegmentView mv{std::span<const double>(hist + k * d, win), d};
        v += m.B(t, DelayArgs{raw, mv});
      }
    }
    const Vec psi = right_pseudo_solve(m.diffusion(t, x), v.cwiseProduct(scale));
    acc.add(psi, z.increment(k), z.h);
    if (fast) nu_sum.advance(hist + (k + 1) * d);
  }
  return acc;
}

struct WeakEstimate {
  MeanEstimate unnormalized;     // mean of R f
  MeanEstimate self_normalized;  // sum R f / sum R
  MeanEstimate mean_R;
  double ess = 0.0;
  std::size_t n = 0;
  std::optional<std::string> warning;
};

inline WeakEstimate weak_estimate(const ModelSpec& m, const DelayMeasure& nu, const SegmentFunctional& f,
                                  const Segment& xi, double T, std::size_t n, SolverConfig cfg, std::uint64_t seed,
                                  int workers = 1) {
  require(n >= 2, ErrorCode::domain, "weak_estimate needs at least two paths");
  cfg.T_end = T;
  const ModelSpec zm = drift_free(m);
  const PathIntegrator integ(zm, nu, cfg);
  std::vector<double> w(n), fz(n);
  parallel_for(n, workers, [&](std::size_t i) {
    const SamplePath z = integ.solve(xi, seed, i);
    require(!z.lifetime, ErrorCode::explosion_before_horizon, "auxiliary path left the simulation range");
    w[i] = girsanov_weight(z, m, nu, cfg).weight();
    fz[i] = f(nu, z.segment_view(z.n_done));
  });
  WeakEstimate out;
  out.n = n;
  std::vector<double> rf(n);
  for (std::size_t i = 0; i < n; ++i) rf[i] = w[i] * fz[i];
  out.unnormalized = estimate_mean(rf);
  out.self_normalized = self_normalized(w, fz);
  out.mean_R = estimate_mean(w);
  out.ess = effective_sample_size(w);
  if (out.ess < 0.01 * static_cast<double>(n)) {
    out.warning = "degenerate weights: ess " + std::to_string(out.ess) + " < 0.01 n";
  }
  return out;
}

// Plain Monte Carlo of f(X_T) with the direct scheme.
inline MeanEstimate direct_estimate(const ModelSpec& m, const DelayMeasure& nu, const SegmentFunctional& f,
                                    const Segment& xi, double T, std::size_t n, SolverConfig cfg, std::uint64_t seed,
                                    int workers = 1) {
  cfg.T_end = T;
  const PathIntegrator integ(m, nu, cfg);
  std::vector<double> fx(n);
  parallel_for(n, workers, [&](std::size_t i) {
    const SamplePath p = integ.solve(xi, seed, i);
    if (p.lifetime) throw Error(ErrorCode::explosion_before_horizon, "path exploded before the horizon");
    fx[i] = f(nu, p.segment_view(p.n_done));
  });
  return estimate_mean(fx);
}

}  // namespace fsde
