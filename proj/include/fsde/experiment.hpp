#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "fsde/bihari.hpp"
#include "fsde/config.hpp"
#include "fsde/convergence.hpp"
#include "fsde/coupling.hpp"
#include "fsde/dini.hpp"
#include "fsde/girsanov.hpp"
#include "fsde/harnack.hpp"
#include "fsde/validate.hpp"
#include "fsde/zvonkin.hpp"

namespace fsde {

inline constexpr int kSchemaVersion = 1;

using Cell = std::variant<double, std::string>;

struct Table {
  std::string name;
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;
};

struct VerdictRow {
  std::string setting;
  double lhs = 0.0;
  double rhs = 0.0;
  std::optional<double> margin_sigma;  // empty for deterministic checks
  Verdict verdict = Verdict::inconclusive;
};

struct ScenarioResult {
  std::string scenario;
  std::vector<Table> tables;
  std::vector<VerdictRow> verdicts;
  std::vector<std::string> notes;

  int exit_code() const {
    bool inconclusive = false;
    for (const auto& v : verdicts) {
      if (v.verdict == Verdict::fail) return 1;
      if (v.verdict == Verdict::inconclusive) inconclusive = true;
    }
    return inconclusive ? 2 : 0;
  }
};

namespace detail {

inline Verdict verdict_of(bool ok) { return ok ? Verdict::pass : Verdict::fail; }

inline DelayMeasure build_measure(const ExperimentConfig& c, double h) { return make_measure(c.measure, c.r0, h); }

inline ModelSpec build_model(const ExperimentConfig& c, const DelayMeasure& nu) {
  if (c.model == "zero") return make_zero_model(c.params);
  if (c.model == "ou") return make_ou_model(c.params);
  if (c.model == "linear-delay") return make_linear_delay_model(nu, c.params);
  if (c.model == "reference") return make_reference_model(nu, c.params);
  if (c.model == "cubic") return make_cubic_model(c.params);
  if (c.model == "tabulated") return make_tabulated_model(nu, c.params);
  throw Error(ErrorCode::config, "unknown model '" + c.model + "'");
}

inline Vec broadcast(const std::vector<double>& v, int d) {
  Vec x(d);
  for (int i = 0; i < d; ++i) x[i] = v.size() == 1 ? v[0] : v[static_cast<std::size_t>(i)];
  return x;
}

inline Segment flat_segment(const DelayMeasure& nu, const Vec& v) { return Segment::constant(nu.cells(), v); }

// Constant segment of unit C_nu norm along (1, ..., 1).
inline Segment unit_direction(const DelayMeasure& nu, int d) {
  const auto one = flat_segment(nu, Vec::Ones(d));
  return flat_segment(nu, Vec::Ones(d) / seg_norm(nu, one));
}

inline Segment shifted(const DelayMeasure& nu, const Segment& xi, const Segment& dir, double s) {
  std::vector<double> v(xi.values().begin(), xi.values().end());
  const auto dv = dir.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += s * dv[i];
  return Segment(nu.cells(), xi.dim(), std::move(v));
}

inline ZvonkinConfig zvonkin_config(const ExperimentConfig& c) {
  ZvonkinConfig z;
  z.ds = c.ds;
  z.dx = c.dx;
  return z;
}

struct Transformed {
  std::shared_ptr<const RegularizedDrift> u;
  TransformedModel tm;
};

inline Transformed transform(const ExperimentConfig& c, const ModelSpec& m, const DelayMeasure& nu, double horizon) {
  auto u = std::make_shared<const RegularizedDrift>(solve_u(m, c.lambda, horizon, zvonkin_config(c)));
  return {u, transformed_model(m, nu, u, c.seed)};
}

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline VerdictRow stat_row(std::string setting, double lhs, double rhs, double sigma, std::optional<Verdict> forced = {}) {
  VerdictRow r;
  r.setting = std::move(setting);
  r.lhs = lhs;
  r.rhs = rhs;
  r.margin_sigma = sigma > 0.0 ? (rhs - lhs) / sigma : (lhs <= rhs ? std::numeric_limits<double>::infinity()
                                                                     : -std::numeric_limits<double>::infinity());
  r.verdict = forced ? *forced : verdict_of(lhs <= rhs + 3.0 * sigma);
  return r;
}

inline VerdictRow bound_row(std::string setting, double lhs, double rhs, bool ok) {
  VerdictRow r;
  r.setting = std::move(setting);
  r.lhs = lhs;
  r.rhs = rhs;
  r.verdict = verdict_of(ok);
  return r;
}

//---------------------------------------------------------------------------//
// Scenarios
//---------------------------------------------------------------------------//

inline ScenarioResult run_simulate(const ExperimentConfig& c) {
  ScenarioResult res;
  const auto nu = build_measure(c, c.solver.h);
  const auto m = build_model(c, nu);
  SolverConfig cfg = c.solver;
  cfg.T_end = c.horizon();
  const PathIntegrator integ(m, nu, cfg);
  const auto xi = flat_segment(nu, broadcast(c.xi, m.d));
  const bool full = c.record == "full";
  std::vector<SamplePath> paths(full ? c.paths : 0);
  std::vector<Vec> last(c.paths);
  std::vector<std::optional<double>> life(c.paths);
  std::vector<long> done(c.paths);
  parallel_for(c.paths, c.workers, [&](std::size_t i) {
    auto p = integ.solve(xi, c.seed, i);
    last[i] = p.state(p.n_done);
    life[i] = p.lifetime;
    done[i] = p.n_done;
    if (full) paths[i] = std::move(p);
  });

  Table t{"paths", {"path", "t"}, {}};
  for (int i = 0; i < m.d; ++i) t.columns.push_back("x" + std::to_string(i));
  t.columns.push_back("lifetime");
  std::vector<double> terminal;
  std::size_t died = 0;
  for (std::size_t i = 0; i < c.paths; ++i) {
    const Cell lc = life[i] ? Cell(*life[i]) : Cell(std::string());
    if (life[i]) ++died;
    const long k0 = full ? 0 : done[i];
    for (long k = k0; k <= done[i]; ++k) {
      std::vector<Cell> row{static_cast<double>(i), static_cast<double>(k) * cfg.h};
      const Vec x = full ? paths[i].state(k) : last[i];
      for (int j = 0; j < m.d; ++j) row.emplace_back(x[j]);
      row.push_back(lc);
      t.rows.push_back(std::move(row));
    }
    terminal.push_back(last[i][0]);
  }
  res.tables.push_back(std::move(t));
  if (died > 0) res.notes.push_back(std::to_string(died) + " paths recorded a lifetime before T_end");

  // closed-form Gaussian oracle for the constant-coefficient models
  if ((c.model == "ou" || c.model == "zero") && died == 0 && c.paths >= 2) {
    const double lam = c.params.lambda_a, T = cfg.T_end, x0 = xi.head()[0];
    const double sigma = c.model == "ou" ? c.params.sigma : 0.0;
    const double mean = std::exp(-lam * T) * x0;
    const double var = lam > 0.0 ? sigma * sigma * (1.0 - std::exp(-2.0 * lam * T)) / (2.0 * lam) : sigma * sigma * T;
    const auto e = estimate_mean(terminal);
    double m4 = 0.0;
    for (double v : terminal) m4 += std::pow(v - e.mean, 4);
    m4 /= static_cast<double>(terminal.size());
    const double var_se = std::sqrt(std::max(m4 - e.variance * e.variance, 0.0) / static_cast<double>(terminal.size()));
    const double slack = 1e-12 * (1.0 + std::abs(mean));
    auto two_sided = [&](std::string name, double est, double target, double se) {
      VerdictRow r = stat_row(std::move(name), std::abs(est - target), 0.0, se);
      if (se == 0.0) r.margin_sigma.reset();
      r.verdict = verdict_of(std::abs(est - target) <= 3.0 * se + slack);
      return r;
    };
    res.verdicts.push_back(two_sided("mean of X(T) vs e^{-lambda T} x0 = " + fmt(mean), e.mean, mean, e.stderr_));
    res.verdicts.push_back(two_sided("variance of X(T) vs closed form " + fmt(var), e.variance, var, var_se));
  }

  if (!c.halvings.empty()) {
    const auto so = strong_order([&](double h) { return build_measure(c, h); },
                                 [&](const DelayMeasure& n) { return build_model(c, n); },
                                 [&](const DelayMeasure& n) { return flat_segment(n, broadcast(c.xi, m.d)); }, c.halvings,
                                 cfg.T_end, c.paths, c.solver, c.seed, c.workers);
    Table st{"strong_order", {"h", "error", "stderr"}, {}};
    for (std::size_t k = 0; k < so.h.size(); ++k) st.rows.push_back({so.h[k], so.error[k], so.stderr_[k]});
    res.tables.push_back(std::move(st));
    const double need = m.constant_diffusion ? 0.9 : 0.4;
    res.verdicts.push_back(bound_row("strong order slope >= " + fmt(need), need, so.slope, so.slope >= need));
  }
  return res;
}

inline ScenarioResult run_validate(const ExperimentConfig& c) {
  ScenarioResult res;
  const auto nu = build_measure(c, c.solver.h);
  const auto m = build_model(c, nu);
  ValidationConfig vc;
  vc.seed = c.seed;
  const auto rep = validate_assumptions(m, nu, c.horizon(), c.validation_samples, vc);
  Table t{"checks", {"check", "worst_ratio", "samples", "witness"}, {}};
  for (const auto& chk : rep.checks) {
    t.rows.push_back({chk.name, chk.worst_ratio, static_cast<double>(chk.samples), chk.witness});
    res.verdicts.push_back(bound_row(chk.name, chk.worst_ratio, 1.0 + vc.tol, chk.pass));
  }
  const auto dini = dini_check(m.modulus, dyadic_grid(40));
  t.rows.push_back({"dini modulus " + m.modulus.describe(), dini.tail, 40.0, std::string()});
  res.verdicts.push_back(bound_row("dini modulus: monotone, square concave, integrable", dini.tail,
                                   0.1 * dini.partial_sum, dini.pass()));
  const auto shift = check_shift_domination(nu, c.horizon());
  t.rows.push_back({"shift domination", shift.worst_ratio, 0.0, std::string()});
  res.verdicts.push_back(bound_row("delay measure shift domination", shift.worst_ratio, 1.0, shift.pass));
  res.tables.push_back(std::move(t));
  return res;
}

inline ScenarioResult run_girsanov(const ExperimentConfig& c) {
  ScenarioResult res;
  const auto nu = build_measure(c, c.solver.h);
  const auto m = build_model(c, nu);
  const auto f = functional_by_name(c.functional, c.functional_param);
  const auto xi = flat_segment(nu, broadcast(c.xi, m.d));
  const double T = c.horizon();
  const auto direct = direct_estimate(m, nu, f, xi, T, c.paths, c.solver, c.seed, c.workers);
  SolverConfig other = c.solver;
  other.noise_stream = c.solver.noise_stream + 1;
  const auto weak = weak_estimate(m, nu, f, xi, T, c.paths, other, c.seed, c.workers);
  Table t{"estimates", {"estimator", "mean", "stderr"}, {}};
  t.rows.push_back({std::string("direct"), direct.mean, direct.stderr_});
  t.rows.push_back({std::string("reweighted"), weak.self_normalized.mean, weak.self_normalized.stderr_});
  t.rows.push_back({std::string("unnormalized"), weak.unnormalized.mean, weak.unnormalized.stderr_});
  t.rows.push_back({std::string("E[R]"), weak.mean_R.mean, weak.mean_R.stderr_});
  t.rows.push_back({std::string("ess"), weak.ess, 0.0});
  res.tables.push_back(std::move(t));
  std::optional<Verdict> forced;
  if (weak.warning) {
    forced = Verdict::inconclusive;
    res.notes.push_back(*weak.warning);
  }
  res.verdicts.push_back(stat_row("|direct - reweighted| for f = " + f.name,
                                  std::abs(direct.mean - weak.self_normalized.mean), 0.0,
                                  combined_stderr(direct.stderr_, weak.self_normalized.stderr_), forced));
  res.verdicts.push_back(stat_row("|E[R] - 1|", std::abs(weak.mean_R.mean - 1.0), 0.0, weak.mean_R.stderr_, forced));
  return res;
}

inline CouplingConfig coupling_config(const ExperimentConfig& c, double T, const std::optional<Transformed>& tr) {
  CouplingConfig cc;
  cc.T = T;
  cc.K = c.K ? *c.K : (tr ? tr->tm.K : 1.0);
  return cc;
}

inline ScenarioResult run_couple(const ExperimentConfig& c) {
  ScenarioResult res;
  const auto nu = build_measure(c, c.solver.h);
  const auto m0 = build_model(c, nu);
  std::optional<Transformed> tr;
  if (c.transform) tr = transform(c, m0, nu, c.T + c.r0);
  const ModelSpec& m = tr ? tr->tm.model : m0;
  const auto cc = coupling_config(c, c.T, tr);
  const auto xi = flat_segment(nu, broadcast(c.xi, m.d));
  // eta given directly, or at the first configured C_nu distance from xi
  const auto eta = c.eta.empty() ? shifted(nu, xi, unit_direction(nu, m.d), c.distances.front())
                                 : flat_segment(nu, broadcast(c.eta, m.d));
  const auto batch = couple_batch(m, nu, xi, eta, cc, c.solver, c.paths, c.seed, c.workers);
  const auto s = summarize_setting(c.T, (xi.head() - eta.head()).norm(), seg_distance(nu, xi.view(), eta.view()), batch);
  Table t{"couplings", {"path", "tau", "log_R", "kl", "coupled_at_end", "failed"}, {}};
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& b = batch[i];
    t.rows.push_back({static_cast<double>(i), b.tau ? Cell(*b.tau) : Cell(std::string()), b.log_R, b.kl,
                      b.coupled_at_end ? 1.0 : 0.0, b.failed ? 1.0 : 0.0});
  }
  res.tables.push_back(std::move(t));
  Table sm{"summary", {"T", "K", "head_distance", "segment_distance", "coupled_fraction", "mean_R", "mean_R_stderr",
                       "kl_cost", "kl_cost_stderr", "ess"}, {}};
  sm.rows.push_back({c.T, cc.K, s.head_distance, s.segment_distance, s.coupled_fraction, s.mean_R.mean,
                     s.mean_R.stderr_, s.kl_cost.mean, s.kl_cost.stderr_, s.ess});
  res.tables.push_back(std::move(sm));
  std::optional<Verdict> forced;
  if (s.warning) {
    forced = Verdict::inconclusive;
    res.notes.push_back(*s.warning);
  }
  res.verdicts.push_back(bound_row("coupled_at_end fraction >= " + fmt(c.coupling_threshold), s.coupled_fraction,
                                   c.coupling_threshold, s.coupled_fraction >= c.coupling_threshold));
  if (s.failures > 0) res.verdicts.back().verdict = Verdict::inconclusive;
  res.verdicts.push_back(stat_row("|E_P[R] - 1|", std::abs(s.mean_R.mean - 1.0), 0.0, s.mean_R.stderr_, forced));
  return res;
}

struct SettingSpec {
  double T;
  double distance;
};

inline std::vector<SettingSpec> settings_of(const ExperimentConfig& c) {
  std::vector<SettingSpec> out;
  for (double T : c.T_list)
    for (double d : c.distances) out.push_back({T, d});
  return out;
}

inline ScenarioResult run_harnack(const ExperimentConfig& c) {
  ScenarioResult res;
  const auto nu = build_measure(c, c.solver.h);
  const auto m0 = build_model(c, nu);
  std::optional<Transformed> tr;
  double t_max = 0.0;
  for (double T : c.T_list) t_max = std::max(t_max, T);
  if (c.transform) tr = transform(c, m0, nu, t_max + c.r0);
  const ModelSpec& m = tr ? tr->tm.model : m0;
  const auto f = functional_by_name(c.functional, c.functional_param);
  const auto xi = flat_segment(nu, broadcast(c.xi, m.d));
  const auto dir = unit_direction(nu, m.d);

  std::vector<HarnackReport> reports;
  std::vector<SettingEstimate> estimates;
  const auto settings = settings_of(c);
  for (std::size_t k = 0; k < settings.size(); ++k) {
    const auto cc = coupling_config(c, settings[k].T, tr);
    const auto eta = shifted(nu, xi, dir, settings[k].distance);
    reports.push_back(check_log_harnack(m, nu, f, xi, eta, cc, c.solver, c.paths, c.seed + k, c.workers));
    if (reports.back().coupling) estimates.push_back(*reports.back().coupling);
  }
  std::optional<EntropyFit> fit;
  if (estimates.size() >= 2) fit = entropy_cost(estimates);

  Table t{"settings", {"T", "head_distance", "segment_distance", "lhs", "log_pf", "entropy", "rhs", "sigma",
                       "margin_sigma", "fitted_rhs", "coupled_fraction", "mean_R", "verdict"}, {}};
  for (auto& r : reports) {
    if (fit && !r.jensen_only) r.fitted_rhs = r.log_pf + fit->predict(r.head_distance, r.segment_distance, r.T);
    t.rows.push_back({r.T, r.head_distance, r.segment_distance, r.lhs, r.log_pf, r.entropy, r.rhs, r.sigma, r.margin_sigma,
                      r.fitted_rhs ? Cell(*r.fitted_rhs) : Cell(std::string()),
                      r.coupling ? r.coupling->coupled_fraction : 1.0, r.coupling ? r.coupling->mean_R.mean : 1.0,
                      std::string(to_string(r.verdict))});
    VerdictRow v;
    v.setting = (r.jensen_only ? "jensen, T = " : "log-harnack, T = ") + fmt(r.T) + ", distance = " + fmt(r.segment_distance);
    v.lhs = r.lhs;
    v.rhs = r.rhs;
    v.margin_sigma = r.margin_sigma;
    v.verdict = r.verdict;
    res.verdicts.push_back(v);
    if (r.warning) res.notes.push_back(v.setting + ": " + *r.warning);
  }
  res.tables.push_back(std::move(t));
  if (fit) {
    double rnorm = 0.0;
    for (double e : fit->residual) rnorm += e * e;
    Table ft{"entropy_fit", {"c1", "c2", "residual_norm", "residual_ratio"}, {}};
    ft.rows.push_back({fit->c1, fit->c2, std::sqrt(rnorm), fit->residual_ratio});
    res.tables.push_back(std::move(ft));
    res.verdicts.push_back(bound_row("entropy-cost fit: c1 = " + fmt(fit->c1) + ", c2 = " + fmt(fit->c2) +
                                         ", residual ratio <= 0.2",
                                     fit->residual_ratio, 0.2, fit->positive() && fit->residual_ratio <= 0.2));
  }
  return res;
}

inline ScenarioResult run_gradient(const ExperimentConfig& c) {
  ScenarioResult res;
  const auto nu = build_measure(c, c.solver.h);
  const auto m = build_model(c, nu);
  const auto f = functional_by_name(c.functional, c.functional_param);
  const auto xi = flat_segment(nu, broadcast(c.xi, m.d));
  const auto dir = unit_direction(nu, m.d);

  std::optional<double> C = c.c_hat;
  if (!C && c.transform) {
    // fit the log-Harnack cost on the transformed model, then pull it back
    double t_max = 0.0;
    for (double T : c.T_list) t_max = std::max(t_max, T);
    const auto tr = transform(c, m, nu, t_max + c.r0);
    std::vector<SettingEstimate> est;
    const auto settings = settings_of(c);
    for (std::size_t k = 0; k < settings.size(); ++k) {
      if (settings[k].distance == 0.0) continue;
      const auto eta = shifted(nu, xi, dir, settings[k].distance);
      const auto batch = couple_batch(tr.tm.model, nu, xi, eta, coupling_config(c, settings[k].T, tr), c.solver,
                                      c.fit_paths, c.seed + 1000 + k, c.workers);
      est.push_back(summarize_setting(settings[k].T, (xi.head() - eta.head()).norm(), settings[k].distance, batch));
    }
    const auto fit = entropy_cost(est);
    C = gradient_constant(fit, tr.u->sup_grad);
    Table ft{"entropy_fit", {"c1", "c2", "residual_ratio", "sup_grad_u", "C_hat"}, {}};
    ft.rows.push_back({fit.c1, fit.c2, fit.residual_ratio, tr.u->sup_grad, *C});
    res.tables.push_back(std::move(ft));
    if (!fit.positive()) {
      res.notes.push_back("entropy-cost fit has a non-positive coefficient");
    }
  }

  Table t{"gradient", {"T", "horizon", "D", "D_stderr", "V", "V_stderr", "ratio", "ratio_stderr", "bound", "verdict"}, {}};
  for (std::size_t k = 0; k < c.T_list.size(); ++k) {
    const double T = c.T_list[k];
    const auto g = check_gradient_estimate(m, nu, f, xi, dir, T, c.eps, c.paths, c.solver, c.seed + k, C, c.workers);
    t.rows.push_back({T, g.horizon, g.D, g.D_se, g.V, g.V_se, g.ratio, g.ratio_se,
                      g.bound ? Cell(*g.bound) : Cell(std::string()),
                      g.bound ? std::string(to_string(g.verdict)) : std::string()});
    if (C) {
      VerdictRow v;
      v.setting = "gradient ratio, T = " + fmt(T) + ", C_hat = " + fmt(*C);
      v.lhs = g.ratio;
      v.rhs = *C;
      if (g.ratio_se > 0.0) v.margin_sigma = (*C - g.ratio) / g.ratio_se;
      v.verdict = g.verdict;
      res.verdicts.push_back(v);
    }
    if (c.model == "ou" && c.functional == "head") {
      // exact derivative of the linear functional along the constant direction
      const double target = dir.head()[0] * std::exp(-c.params.lambda_a * g.horizon);
      const double tol = 2.0 * c.eps * c.eps + 3.0 * g.D_se;
      res.verdicts.push_back(bound_row("ou derivative, T = " + fmt(T) + " vs e^{-lambda (T + r0)} = " + fmt(target),
                                       std::abs(g.D - target), tol, std::abs(g.D - target) <= tol + 1e-12));
    }
  }
  res.tables.push_back(std::move(t));
  if (res.verdicts.empty()) res.notes.push_back("no bound: set experiment.c_hat or experiment.transform = true");
  return res;
}

inline ScenarioResult run_zvonkin(const ExperimentConfig& c) {
  ScenarioResult res;
  const auto nu = build_measure(c, c.solver.h);
  const auto m = build_model(c, nu);
  const auto zc = zvonkin_config(c);
  const auto rep = verify_decay(m, c.lambdas, c.T, zc);
  Table t{"decay", {"lambda", "sup_u", "sup_grad", "sup_hess", "iterations", "contraction", "residual"}, {}};
  for (const auto& r : rep.rows)
    t.rows.push_back({r.lambda, r.sup_u, r.sup_grad, r.sup_hess, static_cast<double>(r.iterations), r.contraction, r.residual});
  res.tables.push_back(std::move(t));
  auto worst_step = [&](auto get) {
    double w = 0.0;
    for (std::size_t k = 1; k < rep.rows.size(); ++k) {
      const double prev = get(rep.rows[k - 1]);
      w = std::max(w, prev > 0.0 ? get(rep.rows[k]) / prev : (get(rep.rows[k]) > 0.0 ? 2.0 : 0.0));
    }
    return w;
  };
  res.verdicts.push_back(bound_row("sup |u| non-increasing in lambda", worst_step([](const DecayRow& r) { return r.sup_u; }),
                                   1.0, rep.monotone_u));
  res.verdicts.push_back(bound_row("sup |grad u| non-increasing in lambda",
                                   worst_step([](const DecayRow& r) { return r.sup_grad; }), 1.0, rep.monotone_grad));
  res.verdicts.push_back(bound_row("sup |grad^2 u| non-increasing in lambda",
                                   worst_step([](const DecayRow& r) { return r.sup_hess; }), 1.0, rep.monotone_hess));
  double min_grad = std::numeric_limits<double>::infinity();
  for (const auto& r : rep.rows) min_grad = std::min(min_grad, r.sup_grad);
  res.verdicts.push_back(bound_row("sup |grad u| <= 1/2 at some lambda", min_grad, 0.5, rep.lambda_star.has_value()));
  if (rep.lambda_star) {
    res.verdicts.push_back(bound_row("Picard contraction at lambda* = " + fmt(*rep.lambda_star), rep.contraction_at_star, 1.0,
                                     rep.contraction_at_star < 1.0));
    if (c.export_u) {
      const auto u = solve_u(m, *rep.lambda_star, c.T, zc);
      Table ut{"u", {}, {}};
      std::ostringstream os;
      write_u_csv(os, u);
      std::istringstream is(os.str());
      std::string line;
      std::getline(is, line);
      std::stringstream hs(line);
      std::string col;
      while (std::getline(hs, col, ',')) ut.columns.push_back(col);
      while (std::getline(is, line)) {
        std::stringstream ls(line);
        std::vector<Cell> row;
        while (std::getline(ls, col, ',')) row.emplace_back(std::strtod(col.c_str(), nullptr));
        ut.rows.push_back(std::move(row));
      }
      res.tables.push_back(std::move(ut));
    }
  }

  if (!c.halvings.empty()) {
    Table et{"equivalence", {"h", "mean_max_gap", "stderr"}, {}};
    std::vector<double> gaps;
    for (int e : c.halvings) {
      const double h = std::ldexp(1.0, -e);
      const auto nuh = build_measure(c, h);
      const auto mh = build_model(c, nuh);
      auto u = std::make_shared<const RegularizedDrift>(solve_u(mh, c.lambda, c.horizon(), zc));
      const auto tm = transformed_model(mh, nuh, u, c.seed);
      SolverConfig cfg = c.solver;
      cfg.h = h;
      cfg.T_end = c.horizon();
      const auto g = transform_gap(mh, tm, nuh, flat_segment(nuh, broadcast(c.xi, mh.d)), cfg, c.paths, c.seed, c.workers);
      et.rows.push_back({h, g.mean_max, g.stderr_});
      gaps.push_back(g.mean_max);
    }
    res.tables.push_back(std::move(et));
    for (std::size_t k = 1; k < gaps.size(); ++k) {
      const double ratio = gaps[k] / gaps[k - 1];
      res.verdicts.push_back(bound_row("transform gap ratio h = 2^-" + std::to_string(c.halvings[k]) + " vs 2^-" +
                                           std::to_string(c.halvings[k - 1]),
                                       ratio, 0.75, ratio <= 0.75));
    }
  }
  return res;
}

inline ScenarioResult run_bihari(const ExperimentConfig& c) {
  ScenarioResult res;
  const auto nu = build_measure(c, c.solver.h);
  const auto m = build_model(c, nu);
  SolverConfig cfg = c.solver;
  cfg.T_end = c.horizon();
  const PathIntegrator integ(m, nu, cfg);
  const auto xi = flat_segment(nu, broadcast(c.xi, m.d));
  std::vector<AprioriPath> rows(c.paths);
  parallel_for(c.paths, c.workers, [&](std::size_t i) {
    const auto p = integ.solve(xi, c.seed, i);
    rows[i] = apriori_path(p, m, nu, cfg, cfg.T_end);
  });
  Table t{"apriori", {"path", "sup_y_sq", "alpha", "K1", "K2", "bound"}, {}};
  std::size_t passed = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.sup_y_sq <= r.bound) ++passed;
    t.rows.push_back({static_cast<double>(i), r.sup_y_sq, r.alpha, r.K1, r.K2, r.bound});
  }
  res.tables.push_back(std::move(t));
  const double frac = static_cast<double>(passed) / static_cast<double>(rows.size());
  res.verdicts.push_back(bound_row("a-priori bound pass fraction >= " + fmt(c.apriori_threshold), frac,
                                   c.apriori_threshold, frac >= c.apriori_threshold));

  // Phi(s) = k (1 + s), K1 = 0, K2 = 1: the inverse is 2 e^{2 k (alpha + T)} - 1
  double worst = 0.0;
  for (double k : {0.5, 0.7, 1.3})
    for (double alpha : {0.0, 0.4, 2.0}) {
      const ScalarFn phi = [k](double s) { return k * (1.0 + s); };
      const double exact = 2.0 * std::exp(2.0 * k * (alpha + 1.0)) - 1.0;
      worst = std::max(worst, std::abs(bihari_bound(phi, 0.0, 1.0, alpha, 1.0) - exact) / exact);
    }
  res.verdicts.push_back(bound_row("closed-form Phi = c (1 + s) inverse, relative error", worst, 1e-8, worst <= 1e-8));
  return res;
}

}  // namespace detail

inline ScenarioResult run_scenario(const ExperimentConfig& c) {
  ScenarioResult r;
  if (c.scenario == "simulate") r = detail::run_simulate(c);
  else if (c.scenario == "validate") r = detail::run_validate(c);
  else if (c.scenario == "girsanov-check") r = detail::run_girsanov(c);
  else if (c.scenario == "couple") r = detail::run_couple(c);
  else if (c.scenario == "harnack") r = detail::run_harnack(c);
  else if (c.scenario == "gradient") r = detail::run_gradient(c);
  else if (c.scenario == "zvonkin") r = detail::run_zvonkin(c);
  else if (c.scenario == "bihari") r = detail::run_bihari(c);
  else throw Error(ErrorCode::config, "unknown scenario '" + c.scenario + "'; valid scenarios: " + detail::join(scenario_names()));
  r.scenario = c.scenario;
  return r;
}

//---------------------------------------------------------------------------//
// Output
//---------------------------------------------------------------------------//

namespace detail {

inline std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return out + "\"";
}

inline std::string csv_cell(const Cell& c) {
  return std::holds_alternative<double>(c) ? csv_number(std::get<double>(c)) : csv_field(std::get<std::string>(c));
}

inline nlohmann::ordered_json json_number(double v) {
  if (std::isfinite(v)) return v;
  return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
}

inline nlohmann::ordered_json json_cell(const Cell& c) {
  if (std::holds_alternative<double>(c)) return json_number(std::get<double>(c));
  const auto& s = std::get<std::string>(c);
  return s.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(s);
}

}  // namespace detail

// CSV: one file per table plus <scenario>_verdicts.csv; every row starts with
// the schema version. JSON: a single <scenario>.json.
inline std::vector<std::filesystem::path> write_results(const ScenarioResult& r, const ExperimentConfig& c) {
  namespace fs = std::filesystem;
  fs::create_directories(c.out);
  std::vector<fs::path> written;
  auto open = [&](const fs::path& p) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw Error(ErrorCode::config, "cannot write " + p.string());
    written.push_back(p);
    return os;
  };
  if (c.format == "csv") {
    for (const auto& t : r.tables) {
      auto os = open(fs::path(c.out) / (r.scenario + "_" + t.name + ".csv"));
      os << "schema_version";
      for (const auto& col : t.columns) os << ',' << col;
      os << '\n';
      for (const auto& row : t.rows) {
        os << kSchemaVersion;
        for (const auto& cell : row) os << ',' << detail::csv_cell(cell);
        os << '\n';
      }
    }
    auto os = open(fs::path(c.out) / (r.scenario + "_verdicts.csv"));
    os << "schema_version,setting,lhs,rhs,margin_sigma,verdict\n";
    for (const auto& v : r.verdicts) {
      os << kSchemaVersion << ',' << detail::csv_field(v.setting) << ',' << detail::csv_number(v.lhs) << ','
         << detail::csv_number(v.rhs) << ',' << (v.margin_sigma ? detail::csv_number(*v.margin_sigma) : "") << ','
         << to_string(v.verdict) << '\n';
    }
  } else {
    nlohmann::ordered_json j;
    j["schema_version"] = kSchemaVersion;
    j["scenario"] = r.scenario;
    j["seed"] = c.seed;
    j["paths"] = c.paths;
    j["exit_status"] = r.exit_code();
    auto& verdicts = j["verdicts"] = nlohmann::ordered_json::array();
    for (const auto& v : r.verdicts) {
      nlohmann::ordered_json e;
      e["setting"] = v.setting;
      e["lhs"] = detail::json_number(v.lhs);
      e["rhs"] = detail::json_number(v.rhs);
      e["margin_sigma"] = v.margin_sigma ? detail::json_number(*v.margin_sigma) : nlohmann::ordered_json(nullptr);
      e["verdict"] = to_string(v.verdict);
      verdicts.push_back(e);
    }
    j["notes"] = r.notes;
    auto& tables = j["tables"] = nlohmann::ordered_json::object();
    for (const auto& t : r.tables) {
      nlohmann::ordered_json tj;
      tj["columns"] = t.columns;
      auto& rows = tj["rows"] = nlohmann::ordered_json::array();
      for (const auto& row : t.rows) {
        auto& out = rows.emplace_back(nlohmann::ordered_json::array());
        for (const auto& cell : row) out.push_back(detail::json_cell(cell));
      }
      tables[t.name] = tj;
    }
    auto os = open(fs::path(c.out) / (r.scenario + ".json"));
    os << j.dump(1) << '\n';
  }
  return written;
}

inline std::string summary_line(const ScenarioResult& r) {
  std::size_t pass = 0, fail = 0, inc = 0;
  for (const auto& v : r.verdicts) {
    if (v.verdict == Verdict::pass) ++pass;
    else if (v.verdict == Verdict::fail) ++fail;
    else ++inc;
  }
  const int code = r.exit_code();
  return r.scenario + ": " + std::to_string(pass) + " pass, " + std::to_string(fail) + " fail, " + std::to_string(inc) +
         " inconclusive -> " + (code == 0 ? "pass" : code == 1 ? "fail" : "inconclusive");
}

// Exit status of a failed run: configuration problems 3, numerical coverage
// problems 2, anything else 1.
inline int exit_code_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::config:
    case ErrorCode::domain:
    case ErrorCode::grid_mismatch:
    case ErrorCode::precondition:
    case ErrorCode::unsupported_model:
    case ErrorCode::singular_diffusion:
      return 3;
    case ErrorCode::coverage:
    case ErrorCode::box_escape:
    case ErrorCode::explosion_before_horizon:
    case ErrorCode::numerical_overflow:
      return 2;
    default:
      return 1;
  }
}

}  // namespace fsde
