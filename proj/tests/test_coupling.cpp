#include <gtest/gtest.h>

#include <cmath>
#include <memory>

#include "fsde/coupling.hpp"
#include "fsde/zvonkin.hpp"

using namespace fsde;

namespace {

DelayMeasure expo_measure(double r0, double h) { return make_measure(MeasureDescriptor{}, r0, h); }

ModelSpec linear(const DelayMeasure& nu, double beta = 0.5) {
  CatalogParams p;
  p.beta = beta;
  return make_linear_delay_model(nu, p);
}

Segment shifted(const DelayMeasure& nu, double base, double shift) {
  return Segment::constant(nu.cells(), constant(1, base + shift));
}

SolverConfig em(double h) {
  SolverConfig c;
  c.h = h;
  c.scheme = Scheme::euler_maruyama;
  return c;
}

}  // namespace

TEST(Gamma, ClosedFormExamples) {
  CouplingConfig c;
  c.K = 1.0;
  c.T = 1.0;
  EXPECT_NEAR(gamma(c, 0.0), 1.0 - std::exp(-1.0), 1e-15);
  EXPECT_NEAR(gamma(c, 1.0 - 1e-9), 0.0, 1e-8);
  c.K = 2.0;
  EXPECT_NEAR(gamma(c, 0.5), (1.0 - std::exp(-2.0)) / 4.0, 1e-15);
  EXPECT_THROW(gamma(c, 1.0), Error);
  EXPECT_THROW(gamma(c, -0.1), Error);
}

TEST(Gamma, StrictlyDecreasingAndSatisfiesTheIdentity) {
  CouplingConfig c;
  c.K = 1.7;
  c.T = 0.8;
  double prev = gamma(c, 0.0) + 1.0;
  for (int i = 0; i < 800; ++i) {
    const double t = 0.001 * i;
    const double g = gamma(c, t);
    EXPECT_LT(g, prev);
    prev = g;
    EXPECT_NEAR(2.0 + gamma_derivative(c, t) - c.K * c.K * gamma(c, t), 1.0, 1e-15);
    if (t > 1e-3 && t < 0.79) {
      const double fd = (gamma(c, t + 1e-6) - gamma(c, t - 1e-6)) / 2e-6;
      EXPECT_NEAR(gamma_derivative(c, t), fd, 1e-8);
    }
  }
}

TEST(BridgeFactor, ExactScheduleContractsToZeroAtT) {
  CouplingConfig c;
  c.K = 1.3;
  c.T = 1.0;
  const double h = 1.0 / 64;
  double prod = 1.0;
  for (int k = 0; k < 63; ++k) prod *= 1.0 - bridge_factor(c, k * h, h);
  EXPECT_NEAR(prod, std::expm1(c.K * c.K * h) / std::expm1(c.K * c.K * c.T), 1e-14);
  EXPECT_EQ(bridge_factor(c, 1.0 - h, h), 1.0);
  // for small steps the factor approaches h / gamma
  EXPECT_NEAR(bridge_factor(c, 0.2, 1e-6) / (1e-6 / gamma(c, 0.2)), 1.0, 1e-5);
}

TEST(BridgeFactor, MidpointScheduleUsesTheFloor) {
  CouplingConfig c;
  c.K = 1.0;
  c.T = 1.0;
  c.schedule = BridgeSchedule::midpoint;
  const double h = 0.01;
  EXPECT_NEAR(bridge_factor(c, 0.3, h), h / gamma(c, 0.305), 1e-15);
  EXPECT_NEAR(bridge_factor(c, 1.0 - h, h), h / gamma(c, 1.0 - h / 2), 1e-15);
  c.gamma_floor = 0.1;
  EXPECT_NEAR(bridge_factor(c, 1.0 - h, h), h / 0.1, 1e-15);
}

TEST(CoupledStep, CoupledStateIsAbsorbing) {
  const auto nu = expo_measure(1.0, 0.125);
  const auto m = linear(nu);
  const auto s = shifted(nu, 0.4, 0.0);
  const double dw[1] = {0.37};
  const auto r = coupled_step(m, nu, s, s, 0.25, dw, 0.125, 0.3);
  EXPECT_EQ(r.x_next[0], r.y_next[0]);
  EXPECT_EQ(r.phi[0], 0.0);
}

TEST(CoupledStep, BridgingMovesYOntoXWhenStepEqualsGamma) {
  const auto nu = expo_measure(1.0, 0.125);
  CatalogParams p;
  p.lambda_a = 0.0;
  const auto m = make_ou_model(p);  // Q = I, no drift
  const auto x = shifted(nu, 0.0, 0.0);
  const auto y = shifted(nu, 0.0, 0.8);
  const double dw[1] = {-0.2};
  const double h = 0.125;
  const auto r = coupled_step(m, nu, x, y, 0.0, dw, h, h);
  EXPECT_DOUBLE_EQ(r.y_next[0], r.x_next[0]);
  // half the gap closes with gamma_hat = 2h
  const auto r2 = coupled_step(m, nu, x, y, 0.0, dw, h, 2 * h);
  EXPECT_DOUBLE_EQ(r2.y_next[0] - r2.x_next[0], 0.4);
  EXPECT_DOUBLE_EQ(r2.phi[0], -(0.5 / h) * (0.0 - 0.8));
}

TEST(CoupledStep, ShiftBoundedByDeclaredConstants) {
  const auto nu = expo_measure(1.0, 1.0 / 16);
  const auto m = linear(nu);
  const double K0 = m.A.rate(0) + std::sqrt(m.bounds.delay_lipschitz_sq);
  const UniformStream U(4);
  for (std::uint64_t k = 0; k < 200; ++k) {
    const auto xs = Segment::from_function(nu, 1, [&](double th) { return constant(1, U(k, 0) + std::sin(5 * th * U(k, 1))); });
    const auto ys = Segment::from_function(nu, 1, [&](double th) { return constant(1, U(k, 2) - th * U(k, 3)); });
    const double gamma_hat = 0.05 + U(k, 4);
    const double dw[1] = {0.0};
    const auto r = coupled_step(m, nu, xs, ys, 0.0, dw, 1.0 / 16, gamma_hat);
    const double bound = K0 * seg_distance(nu, xs.view(), ys.view()) + std::abs(xs.head()[0] - ys.head()[0]) / gamma_hat;
    EXPECT_LE(std::abs(r.phi[0]), bound * (1 + 1e-12));
  }
}

TEST(CoupledStep, SingularDiffusionIsAnError) {
  const auto nu = expo_measure(1.0, 0.125);
  const auto m = make_zero_model(CatalogParams{});
  const double dw[1] = {0.0};
  try {
    coupled_step(m, nu, shifted(nu, 0, 0), shifted(nu, 0, 1), 0.0, dw, 0.125, 0.5);
    FAIL() << "expected singular diffusion";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::singular_diffusion);
  }
}

TEST(RunCoupling, IdenticalInitialsDegenerate) {
  const auto nu = expo_measure(1.0, 1.0 / 32);
  const auto m = linear(nu);
  const auto xi = shifted(nu, 0.3, 0.0);
  CouplingConfig c;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto r = run_coupling(m, nu, xi, xi, c, em(1.0 / 32), 1, s);
    ASSERT_TRUE(r.tau.has_value());
    EXPECT_EQ(*r.tau, 0.0);
    EXPECT_EQ(r.log_R, 0.0);
    EXPECT_EQ(r.kl, 0.0);
    EXPECT_TRUE(r.coupled_at_end);
    EXPECT_EQ(r.X.states, r.Y.states);
  }
}

TEST(RunCoupling, AdditiveNoiseGapFollowsTheSchedule) {
  // Q constant and both drifts taken from X: Y - X evolves deterministically.
  const auto nu = expo_measure(1.0, 1.0 / 32);
  const auto m = linear(nu);
  const double h = 1.0 / 32;
  CouplingConfig c;
  c.T = 0.5;
  c.K = 1.4;
  const auto r = run_coupling(m, nu, shifted(nu, 0.3, 0.0), shifted(nu, 0.3, 0.1), c, em(h), 3, 0);
  double z = 0.1;
  for (long k = 0; k < 15; ++k) {
    EXPECT_NEAR(r.Y.state(k)[0] - r.X.state(k)[0], z, 1e-13) << k;
    z *= 1.0 - bridge_factor(c, k * h, h);
  }
  ASSERT_TRUE(r.tau.has_value());
  EXPECT_NEAR(*r.tau, 0.5, 1e-15);
  EXPECT_TRUE(r.coupled_at_end);
  for (long k = 16; k <= r.X.n_done; ++k) EXPECT_EQ(r.Y.state(k)[0], r.X.state(k)[0]);
  EXPECT_EQ(r.X.n_done, 48);
  EXPECT_TRUE(std::isfinite(r.log_R));
}

TEST(RunCoupling, WeightsHaveUnitMean) {
  const auto nu = expo_measure(1.0, 1.0 / 64);
  const auto m = linear(nu);
  CouplingConfig c;
  c.T = 0.5;
  c.K = 1.0;
  const auto batch = couple_batch(m, nu, shifted(nu, 0.3, 0.0), shifted(nu, 0.3, 0.3), c, em(1.0 / 64), 4000, 17);
  const auto s = summarize_setting(0.5, 0.3, 0.3, batch);
  EXPECT_EQ(s.coupled_fraction, 1.0);
  EXPECT_LE(std::abs(s.mean_R.mean - 1.0), 3 * s.mean_R.stderr_);
  // the two entropy estimators target the same expectation
  EXPECT_LE(std::abs(s.entropy.mean - s.kl_cost.mean), 3 * combined_stderr(s.entropy.stderr_, s.kl_cost.stderr_));
}

TEST(RunCoupling, StateDependentNoiseStillCouplesAndReweights) {
  const auto nu = expo_measure(1.0, 1.0 / 64);
  CatalogParams p;
  p.q_mult = 0.4;
  const auto m = make_linear_delay_model(nu, p);
  CouplingConfig c;
  c.T = 0.5;
  const auto batch = couple_batch(m, nu, shifted(nu, 0.3, 0.0), shifted(nu, 0.3, 0.2), c, em(1.0 / 64), 4000, 21);
  const auto s = summarize_setting(0.5, 0.2, 0.2, batch);
  EXPECT_EQ(s.coupled_fraction, 1.0);
  EXPECT_LE(std::abs(s.mean_R.mean - 1.0), 3 * s.mean_R.stderr_);
}

TEST(RunCoupling, SuccessRateNonDecreasingUnderRefinement) {
  double prev = -1.0;
  for (int e : {6, 8, 10}) {
    const double h = std::ldexp(1.0, -e);
    const auto nu = expo_measure(1.0, h);
    const auto m = make_reference_model(nu, CatalogParams{});
    auto up = std::make_shared<const RegularizedDrift>(solve_u(m, 2.0, 2.0));
    const auto tm = transformed_model(m, nu, up);
    CouplingConfig c;
    c.K = tm.K;
    const auto batch = couple_batch(tm.model, nu, shifted(nu, 0.3, 0.0), shifted(nu, 0.3, 0.08), c, em(h), 300, 5);
    const auto s = summarize_setting(1.0, 0.08, 0.1, batch);
    EXPECT_GE(s.coupled_fraction, prev);
    prev = s.coupled_fraction;
  }
  EXPECT_EQ(prev, 1.0);
}

TEST(RunCoupling, MidpointScheduleLeavesAGapWithAdditiveNoise) {
  // h / gamma(T - h/2) is about 2 on the last step, so the gap flips sign
  // instead of closing.
  const auto nu = expo_measure(1.0, 1.0 / 32);
  const auto m = linear(nu);
  CouplingConfig c;
  c.T = 0.5;
  c.schedule = BridgeSchedule::midpoint;
  const auto r = run_coupling(m, nu, shifted(nu, 0.3, 0.0), shifted(nu, 0.3, 0.1), c, em(1.0 / 32), 3, 0);
  EXPECT_FALSE(r.coupled_at_end);
  EXPECT_FALSE(r.failure.has_value());
  EXPECT_GT(std::abs(r.Y.state(16)[0] - r.X.state(16)[0]), 1e-4);
}

TEST(RunCoupling, OverflowBecomesAFailureResult) {
  const auto nu = expo_measure(1.0, 0.25);
  ModelSpec m = make_cubic_model(CatalogParams{});
  m.Q = [](double, const Vec&) { return Mat::Identity(1, 1).eval(); };
  CouplingConfig c;
  c.T = 1.0;
  SolverConfig s = em(0.25);
  const auto r = run_coupling(m, nu, shifted(nu, 50.0, 0.0), shifted(nu, 50.0, 1.0), c, s, 1, 0);
  ASSERT_TRUE(r.failure.has_value());
  EXPECT_FALSE(r.coupled_at_end);
  EXPECT_TRUE(r.X.overflow);
  EXPECT_LT(r.X.n_done, 8);
}

TEST(EntropyCost, ZeroForIdenticalInitials) {
  const auto nu = expo_measure(1.0, 1.0 / 32);
  const auto m = linear(nu);
  const auto xi = shifted(nu, 0.3, 0.0);
  const auto batch = couple_batch(m, nu, xi, xi, CouplingConfig{}, em(1.0 / 32), 50, 1);
  const auto s = summarize_setting(1.0, 0.0, 0.0, batch);
  EXPECT_EQ(s.kl_cost.mean, 0.0);
  EXPECT_EQ(s.entropy.mean, 0.0);
}

TEST(EntropyCost, GrowsLikeInverseTAndFitsAQuadraticForm) {
  const auto nu = expo_measure(1.0, 1.0 / 64);
  const auto m = linear(nu);
  std::vector<SettingEstimate> sets;
  for (double T : {1.0, 0.5, 0.25}) {
    for (double shift : {0.1, 0.2}) {
      CouplingConfig c;
      c.T = T;
      const auto xi = shifted(nu, 0.3, 0.0);
      const auto eta = shifted(nu, 0.3, shift);
      const auto batch = couple_batch(m, nu, xi, eta, c, em(1.0 / 64), 1000, 8);
      sets.push_back(summarize_setting(T, shift, seg_distance(nu, xi.view(), eta.view()), batch));
    }
  }
  // head-only displacement: cost at fixed head distance increases as T shrinks
  std::vector<double> inv_t, cost;
  for (double T : {1.0, 0.5, 0.25}) {
    CouplingConfig c;
    c.T = T;
    const double cell = 1.0 / 64;
    const auto xi = shifted(nu, 0.3, 0.0);
    const auto eta = Segment::from_function(nu, 1, [&](double th) { return constant(1, 0.3 + 0.1 * std::max(0.0, 1.0 + th / cell)); });
    const auto batch = couple_batch(m, nu, xi, eta, c, em(cell), 1000, 8);
    inv_t.push_back(1.0 / T);
    cost.push_back(summarize_setting(T, 0.1, seg_distance(nu, xi.view(), eta.view()), batch).kl_cost.mean);
  }
  // doubling the distance multiplies the cost by about four
  for (std::size_t i = 0; i < sets.size(); i += 2) EXPECT_NEAR(sets[i + 1].kl_cost.mean / sets[i].kl_cost.mean, 4.0, 0.4);
  const auto fit = entropy_cost(sets);
  // the delay drift pulls the paths together, so c2 may come out slightly
  // negative on this model; only c1 is forced positive here
  EXPECT_GT(fit.c1, 0.0);
  EXPECT_LE(fit.residual_ratio, 0.2);
  EXPECT_NEAR(fit.predict(0.2, 0.4, 0.5), 4.0 * fit.predict(0.1, 0.2, 0.5), 1e-14);
}
