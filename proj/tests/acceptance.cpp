// Desk-scale acceptance run: one line per criterion, non-zero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fsde/convergence.hpp"
#include "fsde/experiment.hpp"

using namespace fsde;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string f6(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

DelayMeasure expo(double h) { return make_measure(MeasureDescriptor{}, 1.0, h); }

Segment flat(const DelayMeasure& nu, double v) { return Segment::constant(nu.cells(), constant(1, v)); }

Segment unit_constant(const DelayMeasure& nu) { return flat(nu, 1.0 / seg_norm(nu, flat(nu, 1.0))); }

SolverConfig solver(double h, Scheme s = Scheme::exponential_euler) {
  SolverConfig c;
  c.h = h;
  c.scheme = s;
  return c;
}

int workers() { return default_workers(); }

// Entropy-cost fit and C_hat shared by criteria 7 and 8.
struct HarnackState {
  std::optional<EntropyFit> fit;
  double sup_grad_u = 0.0;
};

Outcome gaussian_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  const double h = 1.0 / 256, x0 = 1.0;
  const auto nu = expo(h);
  const auto m = make_ou_model(CatalogParams{});
  SolverConfig c = solver(h);
  c.T_end = 1.0;
  const PathIntegrator integ(m, nu, c);
  const std::size_t n = 100000;
  std::vector<double> x(n);
  parallel_for(n, workers(), [&](std::size_t i) { x[i] = integ.solve(flat(nu, x0), 101, i).terminal()[0]; });
  const auto e = estimate_mean(x);
  double m4 = 0.0;
  for (double v : x) m4 += std::pow(v - e.mean, 4);
  m4 /= static_cast<double>(n);
  const double var_se = std::sqrt((m4 - e.variance * e.variance) / static_cast<double>(n));
  const double mean = std::exp(-1.0) * x0, var = (1.0 - std::exp(-2.0)) / 2.0;
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool ok = std::abs(e.mean - mean) <= 3 * e.stderr_ && std::abs(e.variance - var) <= 3 * var_se && secs < 60.0;
  return {ok, "mean " + f6(e.mean) + " vs " + f6(mean) + " (" + f6(std::abs(e.mean - mean) / e.stderr_) + " se), variance " +
                  f6(e.variance) + " vs " + f6(var) + " (" + f6(std::abs(e.variance - var) / var_se) + " se), " + f6(secs) +
                  " s"};
}

Outcome girsanov_cross_validation() {
  const double h = 1.0 / 256;
  const auto nu = expo(h);
  const auto m = make_reference_model(nu, CatalogParams{});
  const auto xi = flat(nu, 0.5);
  const std::size_t n = 100000;
  SolverConfig c = solver(h);
  const auto direct = direct_estimate(m, nu, tanh_head(), xi, 1.0, n, c, 202, workers());
  c.noise_stream = 1;
  const auto weak = weak_estimate(m, nu, tanh_head(), xi, 1.0, n, c, 202, workers());
  const double diff = std::abs(direct.mean - weak.self_normalized.mean);
  const double sig = combined_stderr(direct.stderr_, weak.self_normalized.stderr_);
  const double dr = std::abs(weak.mean_R.mean - 1.0);
  const bool ok = diff <= 3 * sig && dr <= 3 * weak.mean_R.stderr_ && !weak.warning;
  return {ok, "direct " + f6(direct.mean) + ", reweighted " + f6(weak.self_normalized.mean) + " (" + f6(diff / sig) +
                  " se), E[R] " + f6(weak.mean_R.mean) + " (" + f6(dr / weak.mean_R.stderr_) + " se), ess " + f6(weak.ess)};
}

Outcome strong_order_check() {
  const auto r = strong_order(expo, [](const DelayMeasure& nu) { return make_linear_delay_model(nu, CatalogParams{}); },
                              [](const DelayMeasure& nu) {
                                return Segment::from_function(nu, 1, [](double th) { return constant(1, std::cos(th)); });
                              },
                              {6, 7, 8, 9}, 1.0, 2000, SolverConfig{}, 303, workers());
  std::string errs;
  for (double e : r.error) errs += (errs.empty() ? "" : ", ") + f6(e);
  return {r.slope >= 0.9, "slope " + f6(r.slope) + " (>= 0.9), errors " + errs};
}

Outcome zvonkin_decay() {
  const auto nu = expo(1.0 / 64);
  const auto m = make_reference_model(nu, CatalogParams{});
  const auto rep = verify_decay(m, {2, 4, 8, 16, 32}, 1.0);
  std::string grads;
  for (const auto& r : rep.rows) grads += (grads.empty() ? "" : ", ") + f6(r.sup_grad);
  const bool ok = rep.pass() && rep.lambda_star && rep.contraction_at_star < 1.0;
  return {ok, std::string("monotone u/grad/hess ") + (rep.monotone_u ? "y" : "n") + (rep.monotone_grad ? "y" : "n") +
                  (rep.monotone_hess ? "y" : "n") + ", sup|grad u| " + grads + ", lambda* " +
                  (rep.lambda_star ? f6(*rep.lambda_star) : "none") + ", contraction " + f6(rep.contraction_at_star)};
}

Outcome transform_equivalence() {
  std::vector<double> gaps;
  for (int e = 6; e <= 9; ++e) {
    const double h = std::ldexp(1.0, -e);
    const auto nu = expo(h);
    const auto m = make_reference_model(nu, CatalogParams{});
    auto u = std::make_shared<const RegularizedDrift>(solve_u(m, 2.0, 1.0));
    const auto tm = transformed_model(m, nu, u);
    gaps.push_back(transform_gap(m, tm, nu, flat(nu, 0.5), solver(h), 200, 505, workers()).mean_max);
  }
  bool ok = true;
  std::string detail = "gaps";
  for (std::size_t k = 0; k < gaps.size(); ++k) {
    detail += " " + f6(gaps[k]);
    if (k > 0) {
      const double ratio = gaps[k] / gaps[k - 1];
      ok = ok && ratio <= 0.75;
      detail += " (x" + f6(ratio) + ")";
    }
  }
  return {ok, detail};
}

Outcome coupling_success() {
  const double h = 1.0 / 1024;
  const auto nu = expo(h);
  const auto m = make_reference_model(nu, CatalogParams{});
  auto u = std::make_shared<const RegularizedDrift>(solve_u(m, 2.0, 2.0));
  const auto tm = transformed_model(m, nu, u);
  CouplingConfig cc;
  cc.T = 1.0;
  cc.K = tm.K;
  const auto xi = flat(nu, 0.3);
  const auto dir = unit_constant(nu);
  std::vector<double> v(xi.values().begin(), xi.values().end());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += 0.1 * dir.values()[i];
  const Segment eta(nu.cells(), 1, std::move(v));
  const auto batch = couple_batch(tm.model, nu, xi, eta, cc, solver(h, Scheme::euler_maruyama), 10000, 606, workers());
  const auto s = summarize_setting(1.0, (xi.head() - eta.head()).norm(), seg_distance(nu, xi.view(), eta.view()), batch);
  const double dr = std::abs(s.mean_R.mean - 1.0);
  const bool ok = s.coupled_fraction >= 0.99 && dr <= 3 * s.mean_R.stderr_ && s.failures == 0;
  return {ok, "distance " + f6(s.segment_distance) + ", coupled fraction " + f6(s.coupled_fraction) + ", E_P[R] " +
                  f6(s.mean_R.mean) + " (" + f6(dr / s.mean_R.stderr_) + " se), K " + f6(cc.K)};
}

Outcome log_harnack(HarnackState& st) {
  const double h = 1.0 / 256;
  const auto nu = expo(h);
  const auto m = make_reference_model(nu, CatalogParams{});
  auto u = std::make_shared<const RegularizedDrift>(solve_u(m, 2.0, 2.0));
  const auto tm = transformed_model(m, nu, u);
  st.sup_grad_u = u->sup_grad;
  const auto xi = flat(nu, 0.3);
  const auto dir = unit_constant(nu);
  std::vector<SettingEstimate> est;
  bool all = true;
  double worst_margin = std::numeric_limits<double>::infinity();
  std::uint64_t seed = 700;
  for (double T : {0.25, 0.5, 1.0}) {
    for (double d : {0.1, 0.2}) {
      std::vector<double> v(xi.values().begin(), xi.values().end());
      for (std::size_t i = 0; i < v.size(); ++i) v[i] += d * dir.values()[i];
      const Segment eta(nu.cells(), 1, std::move(v));
      CouplingConfig cc;
      cc.T = T;
      cc.K = tm.K;
      const auto r = check_log_harnack(tm.model, nu, positive_tanh_sq(), xi, eta, cc, solver(h, Scheme::euler_maruyama), 2000,
                                       seed++, workers());
      all = all && r.verdict == Verdict::pass;
      worst_margin = std::min(worst_margin, r.margin_sigma);
      est.push_back(*r.coupling);
    }
  }
  st.fit = entropy_cost(est);
  const bool fit_ok = st.fit->positive() && st.fit->residual_ratio <= 0.2;
  return {all && fit_ok, std::string("6 settings ") + (all ? "pass" : "FAIL") + " (smallest margin " + f6(worst_margin) +
                             " sigma), c1 " + f6(st.fit->c1) + ", c2 " + f6(st.fit->c2) + ", residual ratio " +
                             f6(st.fit->residual_ratio)};
}

Outcome gradient_estimate(const HarnackState& st) {
  const double h = 1.0 / 256, eps = 0.05;
  const auto nu = expo(h);
  std::string detail;
  bool ok = true;
  // OU oracle along the head indicator, which has unit C_nu norm
  {
    const auto m = make_ou_model(CatalogParams{});
    auto dir = flat(nu, 0.0);
    dir.mutable_values().back() = 1.0;
    for (double T : {0.25, 0.5, 1.0}) {
      const auto g = check_gradient_estimate(m, nu, head_coordinate(), flat(nu, 0.2), dir, T, eps, 4000, solver(h), 800,
                                             std::nullopt, workers());
      const double target = std::exp(-(T + 1.0));
      const bool good = std::abs(g.D - target) <= 2 * eps * eps + 3 * g.D_se;
      ok = ok && good;
      detail += "OU T=" + f6(T) + " D " + f6(g.D) + " vs " + f6(target) + "; ";
    }
  }
  if (!st.fit) return {false, detail + "no entropy-cost fit available"};
  const double C = gradient_constant(*st.fit, st.sup_grad_u);
  const auto m = make_reference_model(nu, CatalogParams{});
  detail += "C_hat " + f6(C) + ", ratios";
  for (double T : {0.25, 0.5, 1.0}) {
    const auto g = check_gradient_estimate(m, nu, tanh_head(), flat(nu, 0.3), unit_constant(nu), T, eps, 4000, solver(h), 810,
                                           C, workers());
    ok = ok && g.verdict == Verdict::pass;
    detail += " " + f6(g.ratio);
  }
  return {ok, detail};
}

Outcome bihari_apriori() {
  const double h = 1.0 / 128;
  const auto nu = expo(h);
  CatalogParams p;
  p.q_mult = 0.3;
  const auto m = make_linear_delay_model(nu, p);
  SolverConfig c = solver(h);
  const PathIntegrator integ(m, nu, c);
  const std::size_t n = 10000;
  std::vector<char> passed(n, 0);
  parallel_for(n, workers(), [&](std::size_t i) {
    const auto r = apriori_path(integ.solve(flat(nu, 1.0), 909, i), m, nu, c, 1.0);
    passed[i] = r.sup_y_sq <= r.bound;
  });
  std::size_t count = 0;
  for (char v : passed) count += static_cast<std::size_t>(v);
  const double frac = static_cast<double>(count) / static_cast<double>(n);
  double worst = 0.0;
  for (double k : {0.5, 0.7, 1.3})
    for (double alpha : {0.0, 0.4, 2.0}) {
      const ScalarFn phi = [k](double s) { return k * (1.0 + s); };
      const double exact = 2.0 * std::exp(2.0 * k * (alpha + 1.0)) - 1.0;
      worst = std::max(worst, std::abs(bihari_bound(phi, 0.0, 1.0, alpha, 1.0) - exact) / exact);
    }
  return {frac >= 0.999 && worst <= 1e-8, "pass fraction " + f6(frac) + ", closed-form relative error " + f6(worst)};
}

Outcome determinism() {
#ifndef FSDE_CLI
  return {false, "CLI path not configured"};
#else
  const auto root = fs::temp_directory_path() / "fsde_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::vector<std::pair<std::string, std::string>> cases = {
      {"simulate", "paths = 50\n[model]\nname = ou\n[solver]\nh = 1/64\n[initial]\nxi = 1\n[experiment]\nhalvings = 5, 6\n"},
      {"validate", "[model]\nname = reference\n[solver]\nh = 1/32\n"},
      {"girsanov-check", "paths = 400\n[model]\nname = reference\n[solver]\nh = 1/64\n[experiment]\nfunctional = tanh\n"},
      {"couple", "paths = 200\n[model]\nname = reference\n[solver]\nh = 1/64\nscheme = euler-maruyama\n[initial]\nxi = 0.3\n"
                 "distances = 0.1\n[experiment]\ntransform = true\nds = 1/64\ndx = 0.05\n"},
      {"harnack", "paths = 1000\n[model]\nname = linear-delay\n[solver]\nh = 1/32\nscheme = euler-maruyama\n[initial]\nxi = 0.3\n"
                  "[experiment]\nT_list = 1/2, 1\n"},
      {"gradient", "paths = 1000\n[model]\nname = ou\n[solver]\nh = 1/32\n[experiment]\nT_list = 1/2, 1\nfunctional = head\n"},
      {"zvonkin", "paths = 20\n[model]\nname = reference\n[solver]\nh = 1/32\n[experiment]\nlambdas = 2, 4, 8, 16\n"
                  "ds = 1/64\ndx = 0.05\nhalvings = 5, 6\n"},
      {"bihari", "paths = 300\n[model]\nname = linear-delay\nq_mult = 0.3\n[solver]\nh = 1/64\n[initial]\nxi = 1\n"},
  };
  auto slurp_dir = [](const fs::path& d) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(d)) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::string all;
    for (const auto& f : files) {
      std::ifstream in(f, std::ios::binary);
      std::ostringstream ss;
      ss << in.rdbuf();
      all += f.filename().string() + "\n" + ss.str();
    }
    return all;
  };
  std::size_t identical = 0;
  std::string bad;
  for (const auto& [scenario, text] : cases) {
    const auto cfg = root / (scenario + ".conf");
    std::ofstream(cfg) << text;
    std::vector<std::string> outputs;
    for (const char* fmt : {"csv", "json"}) {
      for (const char* w : {"1", "8", "1"}) {
        const auto out = root / (scenario + "_" + fmt + "_" + std::to_string(outputs.size()));
        const std::string cmd = std::string(FSDE_CLI) + " " + scenario + " --config " + cfg.string() + " --seed 17 --format " +
                                fmt + " --workers " + w + " --out " + out.string() + " > /dev/null 2>&1";
        const int rc = std::system(cmd.c_str());
        if (!WIFEXITED(rc) || WEXITSTATUS(rc) >= 3) bad += " " + scenario + "(exit " + std::to_string(WEXITSTATUS(rc)) + ")";
        outputs.push_back(slurp_dir(out));
      }
    }
    const bool same = outputs[0] == outputs[1] && outputs[0] == outputs[2] && outputs[3] == outputs[4] &&
                      outputs[3] == outputs[5] && !outputs[0].empty() && !outputs[3].empty();
    if (same) ++identical;
    else bad += " " + scenario;
  }
  return {identical == cases.size() && bad.empty(),
          std::to_string(identical) + "/" + std::to_string(cases.size()) +
              " scenarios byte-identical across workers 1, 8, 1 (csv and json)" + (bad.empty() ? "" : "; problems:" + bad)};
#endif
}

}  // namespace

int main() {
  HarnackState st;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gaussian oracle", gaussian_oracle},
      {"girsanov cross-validation", girsanov_cross_validation},
      {"strong order", strong_order_check},
      {"zvonkin decay", zvonkin_decay},
      {"transform equivalence", transform_equivalence},
      {"coupling success", coupling_success},
      {"log-harnack", [&] { return log_harnack(st); }},
      {"gradient estimate", [&] { return gradient_estimate(st); }},
      {"bihari a-priori bound", bihari_apriori},
      {"determinism", determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failures;
    std::printf("criterion %2zu %-26s %s  %s [%.1f s]\n", i + 1, criteria[i].first.c_str(), o.pass ? "PASS" : "FAIL",
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
