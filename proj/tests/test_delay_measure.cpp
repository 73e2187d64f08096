#include <gtest/gtest.h>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>
#include <random>

#include "fsde/delay_measure.hpp"
#include "fsde/mild_solver.hpp"

using namespace fsde;

namespace {

MeasureDescriptor expo(double rate) {
  MeasureDescriptor d;
  d.kind = MeasureKind::exponential;
  d.rate = rate;
  return d;
}

MeasureDescriptor custom(std::vector<double> w) {
  MeasureDescriptor d;
  d.kind = MeasureKind::custom;
  d.weights = std::move(w);
  return d;
}

Segment random_segment(const DelayMeasure& m, int d, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  std::vector<double> v(static_cast<std::size_t>((m.cells() + 1) * d));
  for (auto& x : v) x = g(rng);
  return Segment(m.cells(), d, std::move(v));
}

}  // namespace

TEST(MakeMeasure, ExponentialCellMassesMatchQuadrature) {
  const auto m = make_measure(expo(1.0), 1.0, 0.5);
  ASSERT_EQ(m.cells(), 2);
  using boost::math::quadrature::gauss_kronrod;
  auto dens = [](double s) { return std::exp(s); };
  EXPECT_NEAR(m.weight(0), (gauss_kronrod<double, 31>::integrate(dens, -1.0, -0.5)), 1e-14);
  EXPECT_NEAR(m.weight(1), (gauss_kronrod<double, 31>::integrate(dens, -0.5, 0.0)), 1e-14);
  EXPECT_NEAR(m.weight(0), 0.2387, 5e-5);
  EXPECT_NEAR(m.weight(1), 0.3935, 5e-5);
}

TEST(MakeMeasure, UniformCells) {
  MeasureDescriptor d;
  d.kind = MeasureKind::uniform;
  d.density = 1.0;
  const auto m = make_measure(d, 1.0, 0.25);
  ASSERT_EQ(m.cells(), 4);
  for (long j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(m.weight(j), 0.25);
  EXPECT_DOUBLE_EQ(m.kappa(0.7), 1.0);
}

TEST(MakeMeasure, KappaForNegativeRateIsExponential) {
  const auto m = make_measure(expo(-1.0), 1.0, 0.125);
  for (double t : {0.0, 0.25, 0.5, 1.0}) EXPECT_NEAR(m.kappa(t), std::exp(t), 1e-15);
  const auto p = make_measure(expo(2.0), 1.0, 0.125);
  EXPECT_DOUBLE_EQ(p.kappa(0.5), 1.0);
}

TEST(MakeMeasure, TotalMassMatchesClosedForm) {
  for (double rate : {-2.0, -0.5, 0.0, 1.0, 3.0}) {
    const auto m = make_measure(expo(rate), 2.0, 1.0 / 64.0);
    EXPECT_NEAR(m.total_mass(), m.analytic_mass(), 1e-13) << rate;
  }
}

TEST(MakeMeasure, GridErrors) {
  try {
    make_measure(expo(1.0), 1.0, 0.3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::grid_mismatch);
  }
  try {
    make_measure(expo(1.0), -1.0, 0.25);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::domain);
  }
  try {
    make_measure(expo(1.0), 1.0, -0.25);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::domain);
  }
}

TEST(MakeMeasure, TruncatedWindowReportsTail) {
  auto d = expo(2.0);
  d.truncated_window = true;
  const auto m = make_measure(d, 3.0, 0.5);
  EXPECT_NEAR(m.tail_mass(), std::exp(-6.0) / 2.0, 1e-16);
  EXPECT_NEAR(m.total_mass() + m.tail_mass(), 0.5, 1e-14);
}

TEST(SegNorm, ZeroAndHeadOnly) {
  const auto m = make_measure(expo(1.0), 1.0, 0.25);
  EXPECT_EQ(seg_norm(m, Segment::constant(m.cells(), zeros(1))), 0.0);
  std::vector<double> v(5, 0.0);
  v[4] = 1.0;
  EXPECT_DOUBLE_EQ(seg_norm(m, Segment(4, 1, v)), 1.0);
}

TEST(SegNorm, ConstantSegmentConvergesAtFirstOrder) {
  // Constant segments are integrated exactly by the cell masses.
  const double exact = std::sqrt((1.0 - std::exp(-1.0)) * 4.0 + 4.0);
  const auto m = make_measure(expo(1.0), 1.0, 1.0 / 16.0);
  EXPECT_NEAR(seg_norm(m, Segment::constant(m.cells(), constant(1, 2.0))), exact, 1e-14);
  EXPECT_NEAR(exact, 2.5551, 5e-5);

  // Smooth segment xi(theta) = cos(theta): closed form of int e^s cos^2 s ds.
  auto closed = [] {
    // int_{-1}^0 e^s cos^2(s) ds = 1/2 (1 - e^{-1}) + 1/2 int e^s cos 2s ds
    const double a = 0.5 * (1.0 - std::exp(-1.0));
    const double b = 0.5 * (1.0 - std::exp(-1.0) * (std::cos(2.0) - 2.0 * std::sin(2.0))) / 5.0;
    return std::sqrt(a + b + 1.0);
  }();
  double prev_err = 0.0;
  for (int level = 4; level <= 9; ++level) {
    const double h = std::ldexp(1.0, -level);
    const auto mh = make_measure(expo(1.0), 1.0, h);
    const auto seg = Segment::from_function(mh, 1, [](double th) { return constant(1, std::cos(th)); });
    const double err = std::abs(seg_norm(mh, seg) - closed);
    if (level > 4) {
      const double ratio = prev_err / err;
      EXPECT_GT(ratio, 1.8);
      EXPECT_LT(ratio, 2.2);
    }
    prev_err = err;
  }
}

TEST(SegNorm, GridMismatchThrows) {
  const auto m = make_measure(expo(1.0), 1.0, 0.25);
  const auto s = Segment::constant(8, constant(1, 1.0));
  EXPECT_THROW(seg_norm(m, s), Error);
}

TEST(SegInner, BasicIdentities) {
  const auto m = make_measure(expo(0.7), 1.0, 0.125);
  std::mt19937_64 rng(11);
  const auto a = random_segment(m, 2, rng);
  const auto zero = Segment::constant(m.cells(), zeros(2));
  EXPECT_EQ(seg_inner(m, a, zero), 0.0);
  EXPECT_NEAR(seg_inner(m, a, a), std::pow(seg_norm(m, a), 2), 1e-12);

  // Present-value delta against a segment vanishing at theta = 0.
  std::vector<double> past(static_cast<std::size_t>(m.cells() + 1), 1.0);
  past.back() = 0.0;
  std::vector<double> delta(static_cast<std::size_t>(m.cells() + 1), 0.0);
  delta.back() = 1.0;
  EXPECT_EQ(seg_inner(m, Segment(m.cells(), 1, past), Segment(m.cells(), 1, delta)), 0.0);
}

TEST(SegInner, CauchySchwarzAndSymmetry) {
  const auto m = make_measure(expo(-0.3), 2.0, 0.125);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 200; ++i) {
    const auto a = random_segment(m, 3, rng);
    const auto b = random_segment(m, 3, rng);
    const double ab = seg_inner(m, a, b);
    EXPECT_LE(std::abs(ab), seg_norm(m, a) * seg_norm(m, b) * (1 + 1e-14));
    EXPECT_NEAR(ab, seg_inner(m, b, a), 1e-13);
  }
}

TEST(Quotient, NullCellPerturbationIsInvisible) {
  MeasureDescriptor d;
  d.kind = MeasureKind::atoms;
  d.atoms = {{-0.75, 0.5}, {-0.25, 1.0}};
  const auto m = make_measure(d, 1.0, 0.25);
  ASSERT_EQ(m.weight(0), 0.0);
  ASSERT_EQ(m.weight(2), 0.0);
  std::mt19937_64 rng(3);
  const auto a = random_segment(m, 1, rng);
  auto vals = std::vector<double>(a.values().begin(), a.values().end());
  vals[0] += 10.0;
  vals[2] -= 4.0;
  const Segment b(m.cells(), 1, vals);
  EXPECT_EQ(seg_norm(m, a), seg_norm(m, b));
  EXPECT_TRUE(equal_in_c_nu(m, a.view(), b.view()));
  vals[1] += 1e-9;
  EXPECT_FALSE(equal_in_c_nu(m, a.view(), Segment(m.cells(), 1, vals).view()));
  auto head = std::vector<double>(a.values().begin(), a.values().end());
  head.back() += 1.0;
  EXPECT_FALSE(equal_in_c_nu(m, a.view(), Segment(m.cells(), 1, head).view()));
}

TEST(ExtractSegment, InitialConstantAndRamp) {
  const auto m = make_measure(expo(1.0), 1.0, 0.125);
  auto model = make_zero_model({});
  model.A = OperatorA::scalar(1, 0.0);
  SolverConfig cfg;
  cfg.h = 0.125;
  cfg.T_end = 1.0;
  std::mt19937_64 rng(2);
  const auto xi = random_segment(m, 1, rng);
  const auto p = solve_path(model, m, xi, cfg, 1);
  const auto s0 = extract_segment(p, 0.0);
  EXPECT_TRUE(std::equal(s0.values().begin(), s0.values().end(), xi.values().begin()));

  const auto c = Segment::constant(m.cells(), constant(1, 3.0));
  const auto pc = solve_path(model, m, c, cfg, 1);
  for (double t : {0.0, 0.5, 1.0}) {
    const auto s = extract_segment(pc, t);
    for (double v : s.values()) EXPECT_EQ(v, 3.0);
  }

  // X(s) = s on [-r0, r0], written directly into a path record.
  SamplePath ramp;
  ramp.h = 0.125;
  ramp.r0 = 1.0;
  ramp.n_hist = 8;
  ramp.n_steps = ramp.n_done = 8;
  for (long k = -8; k <= 8; ++k) ramp.states.push_back(static_cast<double>(k) * 0.125);
  const auto sr = extract_segment(ramp, 1.0);
  for (long j = 0; j <= 8; ++j) EXPECT_DOUBLE_EQ(sr.at(j)[0], static_cast<double>(j) * 0.125);

  try {
    extract_segment(ramp, 1.125);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::out_of_range);
  }
}

TEST(ShiftDomination, BuiltInKindsPass) {
  for (double rate : {-1.0, 0.0, 1.0, 4.0}) {
    const auto m = make_measure(expo(rate), 1.0, 1.0 / 32.0);
    const auto r = check_shift_domination(m, 1.0);
    EXPECT_TRUE(r.pass) << rate;
    EXPECT_TRUE(r.kappa_monotone);
    EXPECT_LE(r.worst_ratio, 1.0 + 1e-12);
  }
  MeasureDescriptor u;
  u.kind = MeasureKind::uniform;
  EXPECT_TRUE(check_shift_domination(make_measure(u, 1.0, 0.25), 1.0).pass);
}

TEST(ShiftDomination, ExponentialRatioIsDecay) {
  const auto m = make_measure(expo(1.0), 1.0, 0.25);
  const auto r = check_shift_domination(m, 0.25);
  EXPECT_NEAR(r.worst_ratio, std::exp(-0.25), 1e-14);
}

TEST(ShiftDomination, MassMovedOntoNullCellFails) {
  // The shift moves the mass of the oldest cell onto its (empty) successor.
  const auto m = make_measure(custom({1.0, 0.0}), 1.0, 0.5);
  const auto r = check_shift_domination(m, 0.5);
  EXPECT_FALSE(r.pass);
  ASSERT_TRUE(r.offending_shift.has_value());
  EXPECT_DOUBLE_EQ(*r.offending_shift, 0.5);
  EXPECT_EQ(*r.offending_cell, 1);
  EXPECT_TRUE(std::isinf(r.worst_ratio));

  // Mass on the newest cell only moves out of the window.
  EXPECT_TRUE(check_shift_domination(make_measure(custom({0.0, 1.0}), 1.0, 0.5), 0.5).pass);
}
