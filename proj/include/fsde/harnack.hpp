#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "fsde/coupling.hpp"
#include "fsde/functionals.hpp"
#include "fsde/mild_solver.hpp"
#include "fsde/parallel.hpp"
#include "fsde/stats.hpp"

namespace fsde {

struct EstimateReport {
  double value = 0.0;
  double stderr_ = 0.0;
  double variance = 0.0;  // sample variance of f
  std::size_t n = 0;
  std::string estimator = "direct";
  std::string setting;
  std::vector<double> samples;  // f(X_horizon) per path, in path order
};

// P_horizon f(xi) by plain Monte Carlo.
inline EstimateReport estimate_P(const ModelSpec& m, const DelayMeasure& nu, const SegmentFunctional& f,
                                 const Segment& xi, double horizon, std::size_t n, SolverConfig cfg,
                                 std::uint64_t seed, int workers = 1) {
  require(n >= 1000, ErrorCode::domain, "estimate_P needs n >= 1000");
  cfg.T_end = horizon;
  const PathIntegrator integ(m, nu, cfg);
  std::vector<double> fx(n);
  std::vector<char> died(n, 0);
  parallel_for(n, workers, [&](std::size_t i) {
    const SamplePath p = integ.solve(xi, seed, i);
    if (p.lifetime) {
      died[i] = 1;
      return;
    }
    fx[i] = f(nu, p.segment_view(p.n_done));
  });
  const auto dead = static_cast<std::size_t>(std::count(died.begin(), died.end(), 1));
  if (dead > 0) {
    throw Error(ErrorCode::explosion_before_horizon,
                std::to_string(dead) + " of " + std::to_string(n) + " paths hit their lifetime before the horizon");
  }
  const auto e = estimate_mean(fx);
  EstimateReport r;
  r.value = e.mean;
  r.stderr_ = e.stderr_;
  r.variance = e.variance;
  r.n = n;
  r.setting = m.name + ", f = " + f.name + ", horizon " + std::to_string(horizon);
  r.samples = std::move(fx);
  return r;
}

//---------------------------------------------------------------------------//
// log-Harnack
//---------------------------------------------------------------------------//

enum class Verdict { pass, fail, inconclusive };

inline const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::pass: return "pass";
    case Verdict::fail: return "fail";
    default: return "inconclusive";
  }
}

struct HarnackReport {
  std::string setting;
  double T = 0.0;
  double head_distance = 0.0;
  double segment_distance = 0.0;
  double lhs = 0.0;       // E_Q log f(Y_{T+r0})
  double lhs_se = 0.0;
  double log_pf = 0.0;    // log P f(xi)
  double log_pf_se = 0.0;
  double entropy = 0.0;   // E_Q log R
  double entropy_se = 0.0;
  double rhs = 0.0;       // log P f(xi) + E_Q log R
  double sigma = 0.0;     // combined standard error
  double margin_sigma = 0.0;
  bool jensen_only = false;
  Verdict verdict = Verdict::inconclusive;
  std::optional<double> fitted_rhs;  // log P f(xi) + c1 |xi(0)-eta(0)|^2 / T + c2 ||xi-eta||^2
  std::optional<SettingEstimate> coupling;
  std::optional<std::string> warning;
};

/*!
 * Checks E_Q log f(Y_{T+r0}) <= log P f(xi) + E_Q log R at three standard
 * errors. Q-expectations are self-normalized reweightings of the coupled run
 * (Y = X at T + r0 under Q); P f(xi) comes from an independent plain run on
 * a separate noise stream. With xi = eta only Jensen's inequality is left and
 * it is checked on a single sample set.
 */
inline HarnackReport check_log_harnack(const ModelSpec& m, const DelayMeasure& nu, const SegmentFunctional& f,
                                       const Segment& xi, const Segment& eta, const CouplingConfig& cc,
                                       const SolverConfig& solver, std::size_t n, std::uint64_t seed, int workers = 1,
                                       const EntropyFit* fit = nullptr) {
  require(f.strictly_positive, ErrorCode::domain, "log-Harnack needs a strictly positive f");
  require(cc.T > 0.0 && cc.T <= 1.0, ErrorCode::domain, "log-Harnack check takes T in (0, 1]");
  const double horizon = cc.T + nu.r0();
  HarnackReport r;
  r.T = cc.T;
  r.head_distance = (xi.head() - eta.head()).norm();
  r.segment_distance = seg_distance(nu, xi.view(), eta.view());
  r.setting = m.name + ", f = " + f.name + ", T = " + std::to_string(cc.T) +
              ", |xi-eta| = " + std::to_string(r.segment_distance);

  if (std::equal(xi.values().begin(), xi.values().end(), eta.values().begin())) {
    r.jensen_only = true;
    const auto est = estimate_P(m, nu, f, xi, horizon, n, solver, seed, workers);
    std::vector<double> logs(est.samples.size());
    std::transform(est.samples.begin(), est.samples.end(), logs.begin(), [](double v) { return std::log(v); });
    const auto lg = estimate_mean(logs);
    r.lhs = lg.mean;
    r.lhs_se = lg.stderr_;
    r.log_pf = std::log(est.value);
    r.log_pf_se = est.stderr_ / est.value;
    r.rhs = r.log_pf;
    r.verdict = r.lhs <= r.rhs ? Verdict::pass : Verdict::fail;
    r.sigma = combined_stderr(r.lhs_se, r.log_pf_se);
    r.margin_sigma = r.sigma > 0.0 ? (r.rhs - r.lhs) / r.sigma : 0.0;
    return r;
  }

  const auto batch = couple_batch(m, nu, xi, eta, cc, solver, n, seed, workers, &f);
  const auto est = summarize_setting(cc.T, r.head_distance, r.segment_distance, batch);
  r.coupling = est;
  std::vector<double> w, logf;
  for (const auto& s : batch) {
    if (s.failed) continue;
    w.push_back(std::exp(s.log_R));
    logf.push_back(std::log(s.f_end));
  }
  SolverConfig indep = solver;
  indep.noise_stream = solver.noise_stream + 1;
  const auto pf = estimate_P(m, nu, f, xi, horizon, n, indep, seed, workers);

  const auto lhs = self_normalized(w, logf);
  r.lhs = lhs.mean;
  r.lhs_se = lhs.stderr_;
  r.log_pf = std::log(pf.value);
  r.log_pf_se = pf.stderr_ / pf.value;
  r.entropy = est.kl_cost.mean;
  r.entropy_se = est.kl_cost.stderr_;
  r.rhs = r.log_pf + r.entropy;
  r.sigma = std::sqrt(r.lhs_se * r.lhs_se + r.log_pf_se * r.log_pf_se + r.entropy_se * r.entropy_se);
  r.margin_sigma = r.sigma > 0.0 ? (r.rhs - r.lhs) / r.sigma : (r.rhs >= r.lhs ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity());
  if (fit) r.fitted_rhs = r.log_pf + fit->predict(r.head_distance, r.segment_distance, cc.T);
  if (est.warning || est.failures > 0) {
    r.warning = est.warning ? *est.warning : std::to_string(est.failures) + " couplings failed";
    r.verdict = Verdict::inconclusive;
  } else {
    r.verdict = r.lhs <= r.rhs + 3.0 * r.sigma ? Verdict::pass : Verdict::fail;
  }
  return r;
}

//---------------------------------------------------------------------------//
// Gradient estimate
//---------------------------------------------------------------------------//

struct GradientReport {
  double horizon = 0.0;
  double D = 0.0;  // (P f(xi + eps v) - P f(xi - eps v)) / (2 eps)
  double D_se = 0.0;
  double V = 0.0;  // P f^2 - (P f)^2 at xi
  double V_se = 0.0;
  double ratio = 0.0;  // D^2 (T ^ 1) / V
  double ratio_se = 0.0;
  std::optional<double> bound;  // C_hat, when supplied
  Verdict verdict = Verdict::inconclusive;
};

/*!
 * Finite-difference directional derivative of P_{T+r0} f with common random
 * numbers, against the variance of f. With C_hat the report asserts
 * ratio <= C_hat (1 + 3 relative standard errors of the ratio).
 */
inline GradientReport check_gradient_estimate(const ModelSpec& m, const DelayMeasure& nu, const SegmentFunctional& f,
                                              const Segment& xi, const Segment& direction, double T, double eps,
                                              std::size_t n, const SolverConfig& cfg, std::uint64_t seed,
                                              std::optional<double> C_hat = std::nullopt, int workers = 1) {
  require(eps >= 1e-3 && eps <= 1e-1, ErrorCode::domain, "eps_fd must lie in [1e-3, 1e-1]");
  require(T > 0.0, ErrorCode::domain, "T must be positive");
  check_compatible(nu, direction.view());
  require(std::abs(seg_norm(nu, direction.view()) - 1.0) <= 1e-9, ErrorCode::domain,
          "direction must have unit C_nu norm");
  const double horizon = T + nu.r0();
  auto shifted = [&](double s) {
    std::vector<double> v(xi.values().begin(), xi.values().end());
    const auto dv = direction.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += s * dv[i];
    return Segment(xi.cells(), xi.dim(), std::move(v));
  };
  const auto plus = estimate_P(m, nu, f, shifted(eps), horizon, n, cfg, seed, workers);
  const auto minus = estimate_P(m, nu, f, shifted(-eps), horizon, n, cfg, seed, workers);
  const auto base = estimate_P(m, nu, f, xi, horizon, n, cfg, seed, workers);

  GradientReport r;
  r.horizon = horizon;
  std::vector<double> diff(n);
  for (std::size_t i = 0; i < n; ++i) diff[i] = (plus.samples[i] - minus.samples[i]) / (2.0 * eps);
  const auto de = estimate_mean(diff);
  r.D = de.mean;
  r.D_se = de.stderr_;
  r.V = base.variance;
  double m4 = 0.0;
  for (double v : base.samples) m4 += std::pow(v - base.value, 4);
  m4 /= static_cast<double>(n);
  r.V_se = std::sqrt(std::max(m4 - r.V * r.V, 0.0) / static_cast<double>(n));

  const double floor = 1e-14;
  if (r.V <= floor) {
    if (std::abs(r.D) > std::sqrt(floor)) {
      throw Error(ErrorCode::inconsistent_variance, "variance vanishes while the derivative does not");
    }
    r.verdict = Verdict::pass;
    return r;
  }
  const double tt = std::min(T, 1.0);
  r.ratio = r.D * r.D * tt / r.V;
  // delta method: relative errors of D^2 and V
  const double rel = std::sqrt(std::pow(2.0 * r.D_se / std::max(std::abs(r.D), 1e-300), 2) + std::pow(r.V_se / r.V, 2));
  r.ratio_se = r.ratio * (std::isfinite(rel) ? rel : 0.0);
  if (C_hat) {
    r.bound = *C_hat;
    const double rel_ratio = r.ratio > 0.0 ? r.ratio_se / r.ratio : 0.0;
    r.verdict = r.ratio <= *C_hat * (1.0 + 3.0 * rel_ratio) ? Verdict::pass : Verdict::fail;
  }
  return r;
}

// Gradient constant implied by a fitted log-Harnack cost in transformed
// coordinates, pulled back through Theta (|grad Theta| <= 1 + |grad u|).
inline double gradient_constant(const EntropyFit& fit, double sup_grad_u) {
  return 2.0 * (fit.c1 + fit.c2) * (1.0 + sup_grad_u) * (1.0 + sup_grad_u);
}

}  // namespace fsde
