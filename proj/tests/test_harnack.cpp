#include <gtest/gtest.h>

#include <cmath>
#include <memory>

#include "fsde/girsanov.hpp"
#include "fsde/harnack.hpp"
#include "fsde/zvonkin.hpp"

using namespace fsde;

namespace {

DelayMeasure expo_measure(double r0, double h) { return make_measure(MeasureDescriptor{}, r0, h); }

SolverConfig cfg_h(double h, Scheme s = Scheme::exponential_euler) {
  SolverConfig c;
  c.h = h;
  c.scheme = s;
  return c;
}

Segment flat(const DelayMeasure& nu, double v) { return Segment::constant(nu.cells(), constant(1, v)); }

// Variance of the exponential-Euler OU chain after n steps of size h.
double ou_discrete_variance(double lambda, double sigma, double h, long n) {
  double s = 0.0;
  for (long j = 1; j <= n; ++j) s += std::exp(-2.0 * lambda * j * h);
  return sigma * sigma * h * s;
}

}  // namespace

TEST(EstimateP, ConstantFunctionalHasNoError) {
  const auto nu = expo_measure(1.0, 1.0 / 16);
  const auto m = make_linear_delay_model(nu, CatalogParams{});
  const auto r = estimate_P(m, nu, constant_functional(2.5), flat(nu, 0.2), 1.5, 1000, cfg_h(1.0 / 16), 3);
  EXPECT_EQ(r.value, 2.5);
  EXPECT_EQ(r.stderr_, 0.0);
  EXPECT_EQ(r.samples.size(), 1000u);
}

TEST(EstimateP, OuSecondMomentMatchesTheChain) {
  const auto nu = expo_measure(1.0, 1.0 / 32);
  CatalogParams p;
  p.lambda_a = 1.5;
  p.sigma = 0.7;
  const auto m = make_ou_model(p);
  const double x0 = 0.8, H = 1.5;
  const auto r = estimate_P(m, nu, head_square(), flat(nu, x0), H, 20000, cfg_h(1.0 / 32), 11);
  const double exact = std::exp(-2 * 1.5 * H) * x0 * x0 + ou_discrete_variance(1.5, 0.7, 1.0 / 32, 48);
  EXPECT_LE(std::abs(r.value - exact), 3 * r.stderr_);
}

TEST(EstimateP, PreconditionsAndExplosion) {
  const auto nu = expo_measure(1.0, 1.0 / 16);
  const auto m = make_linear_delay_model(nu, CatalogParams{});
  EXPECT_THROW(estimate_P(m, nu, head_square(), flat(nu, 0), 1.0, 999, cfg_h(1.0 / 16), 1), Error);
  ModelSpec cubic = make_cubic_model(CatalogParams{});
  cubic.Q = [](double, const Vec&) { return Mat::Identity(1, 1).eval(); };
  auto c = cfg_h(1.0 / 16, Scheme::euler_maruyama);
  c.R_explode = 100.0;
  try {
    estimate_P(cubic, nu, head_square(), flat(nu, 3.0), 1.0, 1000, c, 1);
    FAIL() << "expected explosion";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::explosion_before_horizon);
  }
}

TEST(EstimateP, AgreesWithTheGirsanovEstimator) {
  const auto nu = expo_measure(1.0, 1.0 / 32);
  const auto m = make_reference_model(nu, CatalogParams{});
  const auto xi = flat(nu, 0.4);
  auto c = cfg_h(1.0 / 32);
  const auto direct = estimate_P(m, nu, tanh_head(), xi, 1.0, 4000, c, 5);
  c.noise_stream = 7;
  const auto weak = weak_estimate(m, nu, tanh_head(), xi, 1.0, 4000, c, 5);
  EXPECT_LE(std::abs(direct.value - weak.self_normalized.mean),
            3 * combined_stderr(direct.stderr_, weak.self_normalized.stderr_));
}

TEST(EstimateP, SemigroupComposes) {
  // P_{s+t} f = P_s (P_t f) for the segment process: restart every path at s
  // from its own segment with fresh noise.
  const auto nu = expo_measure(0.5, 1.0 / 32);
  const auto m = make_linear_delay_model(nu, CatalogParams{});
  const auto xi = flat(nu, 0.6);
  const std::size_t n = 4000;
  auto c = cfg_h(1.0 / 32);
  const auto whole = estimate_P(m, nu, tanh_head(), xi, 1.0, n, c, 2);

  c.T_end = 0.5;
  const PathIntegrator first(m, nu, c);
  auto c2 = c;
  c2.noise_stream = 9;
  const PathIntegrator second(m, nu, c2);
  std::vector<double> fx(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = first.solve(xi, 4, i);
    const auto q = second.solve(extract_segment(p, 0.5), 4, i);
    fx[i] = tanh_head()(nu, q.segment_view(q.n_done));
  }
  const auto split = estimate_mean(fx);
  EXPECT_LE(std::abs(whole.value - split.mean), 3 * combined_stderr(whole.stderr_, split.stderr_));
}

TEST(LogHarnack, IdenticalInitialsReduceToJensen) {
  const auto nu = expo_measure(1.0, 1.0 / 32);
  const auto m = make_linear_delay_model(nu, CatalogParams{});
  const auto xi = flat(nu, 0.3);
  const auto r = check_log_harnack(m, nu, positive_tanh_sq(), xi, xi, CouplingConfig{}, cfg_h(1.0 / 32), 1000, 2);
  EXPECT_TRUE(r.jensen_only);
  EXPECT_EQ(r.verdict, Verdict::pass);
  EXPECT_EQ(r.entropy, 0.0);
  EXPECT_LE(r.lhs, r.log_pf);
}

TEST(LogHarnack, ConstantFunctionalLeavesOnlyTheEntropy) {
  const auto nu = expo_measure(1.0, 1.0 / 32);
  const auto m = make_linear_delay_model(nu, CatalogParams{});
  CouplingConfig cc;
  cc.T = 0.5;
  const auto r = check_log_harnack(m, nu, constant_functional(3.0), flat(nu, 0.3), flat(nu, 0.5), cc,
                                   cfg_h(1.0 / 32, Scheme::euler_maruyama), 1000, 2);
  EXPECT_NEAR(r.lhs, std::log(3.0), 1e-14);
  EXPECT_NEAR(r.log_pf, std::log(3.0), 1e-14);
  EXPECT_GT(r.entropy, 0.0);
  EXPECT_EQ(r.verdict, Verdict::pass);
}

TEST(LogHarnack, TransformedReferenceSettingPasses) {
  const double h = 1.0 / 64;
  const auto nu = expo_measure(1.0, h);
  const auto m = make_reference_model(nu, CatalogParams{});
  auto up = std::make_shared<const RegularizedDrift>(solve_u(m, 2.0, 2.0));
  const auto tm = transformed_model(m, nu, up);
  CouplingConfig cc;
  cc.T = 0.5;
  cc.K = tm.K;
  const auto xi = flat(nu, 0.3);
  const auto eta = flat(nu, 0.5);
  const auto r = check_log_harnack(tm.model, nu, positive_tanh_sq(), xi, eta, cc, cfg_h(h, Scheme::euler_maruyama), 1000, 6);
  EXPECT_EQ(r.verdict, Verdict::pass) << r.lhs << " " << r.rhs << " " << r.sigma;
  ASSERT_TRUE(r.coupling.has_value());
  EXPECT_EQ(r.coupling->coupled_fraction, 1.0);
  EXPECT_FALSE(r.warning.has_value());
}

TEST(LogHarnack, Preconditions) {
  const auto nu = expo_measure(1.0, 1.0 / 16);
  const auto m = make_linear_delay_model(nu, CatalogParams{});
  CouplingConfig cc;
  EXPECT_THROW(check_log_harnack(m, nu, head_coordinate(), flat(nu, 0), flat(nu, 1), cc, cfg_h(1.0 / 16), 1000, 1), Error);
  cc.T = 1.5;
  EXPECT_THROW(check_log_harnack(m, nu, positive_tanh_sq(), flat(nu, 0), flat(nu, 1), cc, cfg_h(1.0 / 16), 1000, 1), Error);
}

TEST(Gradient, OuDerivativeAndVarianceMatchTheChain) {
  const double h = 1.0 / 32, T = 0.5, lam = 1.2;
  const auto nu = expo_measure(1.0, h);
  CatalogParams p;
  p.lambda_a = lam;
  const auto m = make_ou_model(p);
  const auto one = flat(nu, 1.0);
  const double c = 1.0 / seg_norm(nu, one);
  const auto dir = flat(nu, c);
  const double eps = 0.05;
  const auto r = check_gradient_estimate(m, nu, head_coordinate(), flat(nu, 0.2), dir, T, eps, 4000, cfg_h(h), 3);
  const double H = T + 1.0;
  // f is linear, so the difference quotient carries no eps^2 bias
  EXPECT_NEAR(r.D, c * std::exp(-lam * H), 1e-12);
  const double V = ou_discrete_variance(lam, 1.0, h, 48);
  EXPECT_LE(std::abs(r.V - V), 3 * r.V_se);
  EXPECT_NEAR(r.ratio, r.D * r.D * T / r.V, 1e-15);
}

TEST(Gradient, ReferenceRatioBelowTheConstant) {
  const double h = 1.0 / 64;
  const auto nu = expo_measure(1.0, h);
  const auto m = make_reference_model(nu, CatalogParams{});
  const auto dir = flat(nu, 1.0 / seg_norm(nu, flat(nu, 1.0)));
  EntropyFit fit;
  fit.c1 = 0.4;
  fit.c2 = 0.02;
  const double C = gradient_constant(fit, 0.18);
  EXPECT_NEAR(C, 2 * 0.42 * 1.18 * 1.18, 1e-15);
  const auto r = check_gradient_estimate(m, nu, tanh_head(), flat(nu, 0.3), dir, 0.5, 0.05, 2000, cfg_h(h), 4, C);
  EXPECT_EQ(r.verdict, Verdict::pass) << r.ratio;
  EXPECT_GT(r.ratio, 0.0);
  ASSERT_TRUE(r.bound.has_value());
}

TEST(Gradient, ConstantFunctionalPassesTrivially) {
  const auto nu = expo_measure(1.0, 1.0 / 16);
  const auto m = make_linear_delay_model(nu, CatalogParams{});
  const auto dir = flat(nu, 1.0 / seg_norm(nu, flat(nu, 1.0)));
  const auto r = check_gradient_estimate(m, nu, constant_functional(1.0), flat(nu, 0), dir, 1.0, 0.01, 1000, cfg_h(1.0 / 16), 1);
  EXPECT_EQ(r.V, 0.0);
  EXPECT_EQ(r.D, 0.0);
  EXPECT_EQ(r.verdict, Verdict::pass);
}

TEST(Gradient, VanishingVarianceWithNonzeroDerivativeIsAnError) {
  const auto nu = expo_measure(1.0, 1.0 / 16);
  const auto m = make_zero_model(CatalogParams{});
  const auto dir = flat(nu, 1.0 / seg_norm(nu, flat(nu, 1.0)));
  try {
    check_gradient_estimate(m, nu, head_coordinate(), flat(nu, 0.5), dir, 0.5, 0.01, 1000, cfg_h(1.0 / 16), 1);
    FAIL() << "expected inconsistent_variance";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::inconsistent_variance);
  }
}

TEST(Gradient, Preconditions) {
  const auto nu = expo_measure(1.0, 1.0 / 16);
  const auto m = make_linear_delay_model(nu, CatalogParams{});
  const auto unit = flat(nu, 1.0 / seg_norm(nu, flat(nu, 1.0)));
  const auto cfg = cfg_h(1.0 / 16);
  EXPECT_THROW(check_gradient_estimate(m, nu, tanh_head(), flat(nu, 0), unit, 1.0, 0.5, 1000, cfg, 1), Error);
  EXPECT_THROW(check_gradient_estimate(m, nu, tanh_head(), flat(nu, 0), unit, 1.0, 1e-4, 1000, cfg, 1), Error);
  EXPECT_THROW(check_gradient_estimate(m, nu, tanh_head(), flat(nu, 0), flat(nu, 1.0), 1.0, 0.01, 1000, cfg, 1), Error);
}
