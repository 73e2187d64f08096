#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fsde/delay_measure.hpp"
#include "fsde/dini.hpp"
#include "fsde/error.hpp"
#include "fsde/linalg.hpp"

namespace fsde {

// A = -diag(rates) in its eigenbasis. Rates are >= 0; zero rates appear only
// in transformed systems where the linear part has been absorbed into the
// delay drift.
class OperatorA {
 public:
  OperatorA() = default;
  explicit OperatorA(std::vector<double> rates) : rates_(std::move(rates)) {
    for (double r : rates_) require(r >= 0.0 && std::isfinite(r), ErrorCode::domain, "eigenvalues of -A must be >= 0");
  }
  static OperatorA scalar(int d, double rate) { return OperatorA(std::vector<double>(static_cast<std::size_t>(d), rate)); }

  int dim() const { return static_cast<int>(rates_.size()); }
  double rate(int i) const { return rates_[static_cast<std::size_t>(i)]; }
  const std::vector<double>& rates() const { return rates_; }
  bool negative_definite() const {
    for (double r : rates_) if (!(r > 0.0)) return false;
    return true;
  }

  Vec apply(const Vec& x) const {
    Vec y(x.size());
    for (int i = 0; i < x.size(); ++i) y[i] = -rates_[static_cast<std::size_t>(i)] * x[i];
    return y;
  }

 private:
  std::vector<double> rates_;
};

// E = e^{Ah}, J = A^{-1}(e^{Ah} - I), both diagonal.
struct SemigroupFactors {
  Vec E;
  Vec J;
};

inline SemigroupFactors semigroup_factors(const OperatorA& a, double h) {
  require(h > 0.0, ErrorCode::domain, "step must be positive");
  SemigroupFactors f{Vec(a.dim()), Vec(a.dim())};
  for (int i = 0; i < a.dim(); ++i) {
    const double lam = a.rate(i);
    f.E[i] = std::exp(-lam * h);
    f.J[i] = lam == 0.0 ? h : -std::expm1(-lam * h) / lam;
  }
  return f;
}

// Segment data handed to the delay drift. `mapped` equals `raw` unless the
// model declares a history map, in which case every past value x(s) has been
// replaced by map(s, x(s)).
struct DelayArgs {
  SegmentView raw;
  SegmentView mapped;
};

using DriftFn = std::function<Vec(double, const Vec&)>;
using DelayFn = std::function<Vec(double, const DelayArgs&)>;
using DiffusionFn = std::function<Mat(double, const Vec&)>;
using PointMap = std::function<Vec(double, const Vec&)>;
// B(t, xi) = G(t, nu(xi), xi(0)) with both arguments taken from the mapped
// segment. Declaring this form lets the solver update nu(.) incrementally.
using NuDelayFn = std::function<Vec(double, const Vec&, const Vec&)>;

// Declared constants checked by validate_assumptions.
struct DeclaredBounds {
  double b_sup = 0.0;
  double delay_lipschitz_sq = 0.0;  // C_B in |B(xi)-B(eta)|^2 <= C_B ||xi-eta||^2
  double q_sup = 0.0;
  double grad_q = 0.0;
  double hess_q = 0.0;
  double inv_gram = 0.0;  // ||(QQ^*)^{-1}||
};

// Phi_t and h_t of the one-sided growth condition used for non-explosion;
// taken time-independent on the window.
struct GrowthCondition {
  std::function<double(double)> phi;
  std::function<double(double)> h;
  std::string describe;
};

struct ModelSpec {
  std::string name;
  OperatorA A;
  int d = 1;
  int dbar = 1;
  DriftFn b;
  DelayFn B;
  DiffusionFn Q;
  NuDelayFn B_nu;  // optional structured form of B
  DiniModulus modulus = DiniModulus::power(1.0);
  DeclaredBounds bounds;
  std::optional<GrowthCondition> growth;
  PointMap history_map;
  bool zero_drift = false;     // b == 0
  bool zero_delay = false;     // B == 0
  bool constant_diffusion = false;
  double truncation = std::numeric_limits<double>::infinity();
  std::shared_ptr<const void> keepalive;  // owns data captured by reference in the closures

  Vec drift(double t, const Vec& x) const { return zero_drift ? zeros(d) : b(t, x); }
  Mat diffusion(double t, const Vec& x) const { return Q(t, x); }

  Vec delay(double t, const DelayArgs& a) const { return zero_delay ? zeros(d) : B(t, a); }

  // Evaluates B on a raw segment, applying the history map if one is declared.
  Vec delay_raw(double t, const DelayMeasure& nu, const SegmentView& raw) const {
    if (zero_delay) return zeros(d);
    if (!history_map) return B(t, {raw, raw});
    std::vector<double> buf(raw.values.size());
    const long n = raw.cells();
    for (long j = 0; j <= n; ++j) {
      const double s = t - nu.r0() + static_cast<double>(j) * nu.h();
      const Vec z = history_map(s, raw.at(j));
      for (int i = 0; i < d; ++i) buf[static_cast<std::size_t>(j * d + i)] = z[i];
    }
    const SegmentView mapped{buf, d};
    return B(t, {raw, mapped});
  }
};

// nu(xi) = sum_j w_j xi(theta_j), vector valued.
inline Vec nu_integral(const DelayMeasure& nu, const SegmentView& s) {
  const int d = s.d;
  Vec acc = zeros(d);
  const double* w = nu.weights().data();
  const long n = nu.cells();
  if (d == 1) {
    const double* v = s.values.data();
    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
    long j = 0;
    for (; j + 3 < n; j += 4) {
      a0 += w[j] * v[j];
      a1 += w[j + 1] * v[j + 1];
      a2 += w[j + 2] * v[j + 2];
      a3 += w[j + 3] * v[j + 3];
    }
    for (; j < n; ++j) a0 += w[j] * v[j];
    acc[0] = (a0 + a1) + (a2 + a3);
    return acc;
  }
  for (long j = 0; j < n; ++j)
    for (int i = 0; i < d; ++i) acc[i] += w[j] * s.values[static_cast<std::size_t>(j * d + i)];
  return acc;
}

//---------------------------------------------------------------------------//
// Catalog
//---------------------------------------------------------------------------//

struct CatalogParams {
  int d = 1;
  double lambda_a = 1.0;  // rate of -A
  double sigma = 1.0;
  double beta = 0.5;
  double q_mult = 0.0;  // Q(x) = sigma (1 + q_mult sin x) for the linear delay model
  double b_const = 0.0;
  std::vector<double> table_x;  // tabulated drift abscissae
  std::vector<double> table_b;
};

inline Mat identity_scaled(int d, double s) { return Mat::Identity(d, d) * s; }

inline ModelSpec make_zero_model(const CatalogParams& p) {
  ModelSpec m;
  m.name = "zero";
  m.A = OperatorA::scalar(p.d, p.lambda_a);
  m.d = m.dbar = p.d;
  m.b = [d = p.d](double, const Vec&) { return zeros(d); };
  m.B = [d = p.d](double, const DelayArgs&) { return zeros(d); };
  m.Q = [d = p.d](double, const Vec&) { return Mat::Zero(d, d).eval(); };
  m.zero_drift = m.zero_delay = m.constant_diffusion = true;
  m.bounds.inv_gram = std::numeric_limits<double>::infinity();
  return m;
}

// Pure Ornstein-Uhlenbeck: b = B = 0, Q = sigma I.
inline ModelSpec make_ou_model(const CatalogParams& p) {
  ModelSpec m = make_zero_model(p);
  m.name = "ou";
  m.Q = [d = p.d, s = p.sigma](double, const Vec&) { return identity_scaled(d, s); };
  m.bounds.q_sup = std::abs(p.sigma);
  m.bounds.inv_gram = 1.0 / (p.sigma * p.sigma);
  m.growth = GrowthCondition{[](double s) { return 0.5 * (1.0 + s); }, [](double) { return 0.5; }, "ou"};
  return m;
}

// Phi(s) = c(1+s), h(r) = (L/2)(1+r^2) for a drift bounded by b_sup plus a
// delay term with |B(xi)| <= L ||xi||.
inline GrowthCondition linear_growth(double b_sup, double lip) {
  const double c = std::max(1.5 * lip + 0.5 * b_sup, 0.5);
  const double hl = std::max(0.5 * lip, 1e-12);
  return {[c](double s) { return c * (1.0 + s); }, [hl](double r) { return hl * (1.0 + r * r); },
          "Phi(s)=" + std::to_string(c) + "(1+s)"};
}

// d = 1: dX = {-lambda X + beta nu(X_t) + b(X)} dt + sigma (1 + q sin X) dW.
inline ModelSpec make_linear_delay_model(const DelayMeasure& nu, const CatalogParams& p) {
  require(std::abs(p.q_mult) < 1.0, ErrorCode::domain, "q_mult must satisfy |q_mult| < 1");
  ModelSpec m;
  m.name = "linear_delay";
  m.A = OperatorA::scalar(1, p.lambda_a);
  m.d = m.dbar = 1;
  const double bc = p.b_const;
  m.b = [bc](double, const Vec&) { return constant(1, bc); };
  m.zero_drift = bc == 0.0;
  auto nu_ptr = std::make_shared<DelayMeasure>(nu);
  m.keepalive = nu_ptr;
  m.B = [nu_ptr, beta = p.beta](double, const DelayArgs& a) { return (beta * nu_integral(*nu_ptr, a.mapped)).eval(); };
  m.B_nu = [beta = p.beta](double, const Vec& nu_value, const Vec&) { return (beta * nu_value).eval(); };
  m.zero_delay = p.beta == 0.0;
  const double s = p.sigma;
  const double q = p.q_mult;
  if (q == 0.0) {
    m.Q = [s](double, const Vec&) { return identity_scaled(1, s); };
    m.constant_diffusion = true;
  } else {
    m.Q = [s, q](double, const Vec& x) { return identity_scaled(1, s * (1.0 + q * std::sin(x[0]))); };
  }
  const double mass = nu.total_mass();
  m.modulus = DiniModulus::power(0.5);  // b is constant, any modulus holds
  m.bounds.b_sup = std::abs(bc);
  m.bounds.delay_lipschitz_sq = p.beta * p.beta * mass;
  m.bounds.q_sup = std::abs(s) * (1.0 + std::abs(q));
  m.bounds.grad_q = std::abs(s * q);
  m.bounds.hess_q = std::abs(s * q);
  m.bounds.inv_gram = 1.0 / (s * s * (1.0 - std::abs(q)) * (1.0 - std::abs(q)));
  m.growth = linear_growth(std::abs(bc), std::abs(p.beta) * std::sqrt(mass));
  return m;
}

// d = 1 reference model with the Dini drift b(x) = sqrt(min(|x|, 1)),
// B = beta nu(xi) and Q = sigma.
inline ModelSpec make_reference_model(const DelayMeasure& nu, const CatalogParams& p) {
  CatalogParams lp = p;
  lp.q_mult = 0.0;
  lp.b_const = 0.0;
  ModelSpec m = make_linear_delay_model(nu, lp);
  m.name = "reference";
  m.b = [](double, const Vec& x) { return constant(1, std::sqrt(std::min(std::abs(x[0]), 1.0))); };
  m.zero_drift = false;
  m.modulus = DiniModulus::power(0.5);
  m.bounds.b_sup = 1.0;
  m.growth = linear_growth(1.0, std::abs(p.beta) * std::sqrt(nu.total_mass()));
  return m;
}

// Explosive stress entry: b(x) = x^3, no delay, no noise.
inline ModelSpec make_cubic_model(const CatalogParams& p) {
  ModelSpec m = make_zero_model(p);
  m.name = "cubic";
  m.A = OperatorA::scalar(1, p.lambda_a);
  m.d = m.dbar = 1;
  m.b = [](double, const Vec& x) { return constant(1, x[0] * x[0] * x[0]); };
  m.zero_drift = false;
  m.B = [](double, const DelayArgs&) { return zeros(1); };
  m.Q = [](double, const Vec&) { return Mat::Zero(1, 1).eval(); };
  return m;
}

// User-tabulated drift (piecewise linear, constant beyond the table) with the
// linear delay term and additive noise. The declared modulus is the tabulated
// Lipschitz modulus.
inline ModelSpec make_tabulated_model(const DelayMeasure& nu, const CatalogParams& p) {
  require(p.table_x.size() == p.table_b.size() && p.table_x.size() >= 2, ErrorCode::domain,
          "tabulated drift needs >= 2 matching points");
  require(std::is_sorted(p.table_x.begin(), p.table_x.end()), ErrorCode::domain, "table abscissae must ascend");
  CatalogParams lp = p;
  lp.q_mult = 0.0;
  lp.b_const = 0.0;
  ModelSpec m = make_linear_delay_model(nu, lp);
  m.name = "tabulated";
  auto xs = std::make_shared<std::pair<std::vector<double>, std::vector<double>>>(p.table_x, p.table_b);
  m.b = [xs](double, const Vec& x) {
    const auto& [tx, tb] = *xs;
    const double v = x[0];
    if (v <= tx.front()) return constant(1, tb.front());
    if (v >= tx.back()) return constant(1, tb.back());
    const auto it = std::upper_bound(tx.begin(), tx.end(), v);
    const std::size_t i = static_cast<std::size_t>(it - tx.begin());
    const double w = (v - tx[i - 1]) / (tx[i] - tx[i - 1]);
    return constant(1, tb[i - 1] + w * (tb[i] - tb[i - 1]));
  };
  m.zero_drift = false;
  double sup = 0.0;
  double lip = 0.0;
  for (std::size_t i = 0; i < p.table_x.size(); ++i) {
    sup = std::max(sup, std::abs(p.table_b[i]));
    if (i > 0) lip = std::max(lip, std::abs(p.table_b[i] - p.table_b[i - 1]) / (p.table_x[i] - p.table_x[i - 1]));
  }
  m.bounds.b_sup = sup;
  // min(L s, 2 sup) <= max(L, 2 sup) sqrt(s)
  m.modulus = DiniModulus::power(0.5, std::max({lip, 2.0 * sup, 1e-12}));
  m.growth = linear_growth(sup, std::abs(p.beta) * std::sqrt(nu.total_mass()));
  return m;
}

}  // namespace fsde
