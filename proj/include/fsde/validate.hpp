#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fsde/delay_measure.hpp"
#include "fsde/model.hpp"
#include "fsde/rng.hpp"

namespace fsde {

struct ValidationConfig {
  double x_box = 5.0;             // |x_i| <= x_box for spot checks of b and Q
  double segment_amplitude = 2.0;  // segment nodes drawn from [-amp, amp]
  double tol = 1e-6;               // relative slack on every declared bound
  std::uint64_t seed = 20240611;
};

struct AssumptionCheck {
  std::string name;
  bool pass = true;
  double worst_ratio = 0.0;  // observed / declared; pass iff <= 1 + tol
  std::string witness;
  std::size_t samples = 0;
};

struct ValidationReport {
  std::vector<AssumptionCheck> checks;
  bool pass() const {
    for (const auto& c : checks) if (!c.pass) return false;
    return true;
  }
  const AssumptionCheck* find(const std::string& name) const {
    for (const auto& c : checks) if (c.name == name) return &c;
    return nullptr;
  }
};

namespace detail {

inline void update(AssumptionCheck& c, double observed, double declared, double tol, const std::string& witness) {
  ++c.samples;
  double ratio;
  if (declared > 0.0) {
    ratio = observed / declared;
  } else {
    ratio = observed > 1e-12 ? std::numeric_limits<double>::infinity() : 0.0;
  }
  if (ratio > c.worst_ratio) {
    c.worst_ratio = ratio;
    c.witness = witness;
  }
  if (ratio > 1.0 + tol) c.pass = false;
}

inline AssumptionCheck named(const char* name) {
  AssumptionCheck c;
  c.name = name;
  return c;
}

inline std::string fmt_point(const Vec& x) {
  std::string s = "(";
  for (int i = 0; i < x.size(); ++i) s += (i ? ", " : "") + std::to_string(x[i]);
  return s + ")";
}

}  // namespace detail

// Monte Carlo spot checks of the declared constants. A pass is evidence on
// the sampled set only; each check carries its sample count.
inline ValidationReport validate_assumptions(const ModelSpec& m, const DelayMeasure& nu, double T, std::size_t n_samples,
                                             const ValidationConfig& cfg = {}) {
  require(n_samples >= 1000, ErrorCode::domain, "validate_assumptions needs n_samples >= 1000");
  require(T > 0.0, ErrorCode::domain, "T must be positive");
  const UniformStream u(cfg.seed);
  const int d = m.d;
  const double tol = cfg.tol;
  std::uint32_t slot = 0;
  auto draw_point = [&](std::uint64_t i, double box) {
    Vec x(d);
    for (int k = 0; k < d; ++k) x[k] = box * (2.0 * u(i, slot++) - 1.0);
    return x;
  };
  auto draw_time = [&](std::uint64_t i) { return T * u(i, slot++); };

  ValidationReport rep;

  AssumptionCheck a1 = detail::named("A.dissipative");
  a1.samples = 1;
  a1.pass = m.A.negative_definite();
  a1.worst_ratio = a1.pass ? 0.0 : std::numeric_limits<double>::infinity();
  if (!a1.pass) a1.witness = "-A has a non-positive eigenvalue";
  rep.checks.push_back(a1);

  // ||Q||, ||grad Q||, ||grad^2 Q||, ||(QQ^*)^{-1}|| against declarations.
  AssumptionCheck q_sup = detail::named("Q.sup"), q_grad = detail::named("Q.grad");
  AssumptionCheck q_hess = detail::named("Q.hess"), q_inv = detail::named("Q.inv_gram");
  for (std::uint64_t i = 0; i < n_samples; ++i) {
    slot = 0;
    const double t = draw_time(i);
    const Vec x = draw_point(i, cfg.x_box);
    Vec v(d);
    for (int k = 0; k < d; ++k) v[k] = 2.0 * u(i, slot++) - 1.0;
    const double vn = v.norm();
    if (vn == 0.0) continue;
    v /= vn;
    const Mat q0 = m.diffusion(t, x);
    const double step = 1e-5 * (1.0 + x.norm());
    const Mat qp = m.diffusion(t, x + step * v);
    const Mat qm = m.diffusion(t, x - step * v);
    const Mat d1 = (qp - qm) / (2.0 * step);
    const Mat d2 = (qp - 2.0 * q0 + qm) / (step * step);
    const std::string w = "t=" + std::to_string(t) + " x=" + detail::fmt_point(x);
    detail::update(q_sup, op_norm(q0), m.bounds.q_sup, tol, w);
    // FD truncation/rounding allowance on derivative checks
    detail::update(q_grad, std::max(0.0, op_norm(d1) - 1e-6), m.bounds.grad_q, tol, w);
    detail::update(q_hess, std::max(0.0, op_norm(d2) - 1e-3 * (1.0 + op_norm(q0))), m.bounds.hess_q, tol, w);
    detail::update(q_inv, inverse_gram_norm(q0), m.bounds.inv_gram, tol, w);
  }
  rep.checks.push_back(q_sup);
  rep.checks.push_back(q_grad);
  rep.checks.push_back(q_hess);
  rep.checks.push_back(q_inv);

  // sup bound and modulus of b on random pairs, half of them close.
  AssumptionCheck b_sup = detail::named("b.sup"), b_mod = detail::named("b.modulus");
  for (std::uint64_t i = 0; i < n_samples; ++i) {
    slot = 0;
    const double t = draw_time(i);
    const Vec x = draw_point(i, cfg.x_box);
    const double spread = (i % 2 == 0) ? cfg.x_box : cfg.x_box * 1e-3;
    Vec y = x + draw_point(i, spread);
    const Vec bx = m.drift(t, x);
    const Vec by = m.drift(t, y);
    const std::string w = "t=" + std::to_string(t) + " x=" + detail::fmt_point(x) + " y=" + detail::fmt_point(y);
    detail::update(b_sup, bx.norm(), m.bounds.b_sup, tol, w);
    const double dist = (x - y).norm();
    if (dist > 0.0) detail::update(b_mod, (bx - by).norm(), m.modulus(dist), tol, w);
  }
  rep.checks.push_back(b_sup);
  rep.checks.push_back(b_mod);

  // Lipschitz constant of B in C_nu on random segment pairs.
  AssumptionCheck b_lip = detail::named("B.lipschitz");
  const long n = nu.cells();
  std::vector<double> xa(static_cast<std::size_t>((n + 1) * d));
  std::vector<double> xb(xa.size());
  const std::size_t seg_samples = std::max<std::size_t>(n_samples / 4, 250);
  for (std::uint64_t i = 0; i < seg_samples; ++i) {
    const double t = T * u(i, 0);
    const double scale = (i % 2 == 0) ? 1.0 : 1e-2;
    // every fourth pair differs by a constant shift, where linear functionals
    // of the segment come closest to their Lipschitz bound
    const bool shift = i % 4 == 3;
    for (std::size_t k = 0; k < xa.size(); ++k) {
      xa[k] = cfg.segment_amplitude * (2.0 * u(i, static_cast<std::uint32_t>(1 + 2 * k)) - 1.0);
      const std::size_t kk = shift ? k % static_cast<std::size_t>(d) : k;
      xb[k] = xa[k] + scale * cfg.segment_amplitude * (2.0 * u(i, static_cast<std::uint32_t>(2 + 2 * kk)) - 1.0);
    }
    const SegmentView sa{xa, d};
    const SegmentView sb{xb, d};
    const double dist = seg_distance(nu, sa, sb);
    if (dist == 0.0) continue;
    const double diff = (m.delay_raw(t, nu, sa) - m.delay_raw(t, nu, sb)).norm();
    detail::update(b_lip, diff, std::sqrt(m.bounds.delay_lipschitz_sq) * dist, tol, "t=" + std::to_string(t));
  }
  rep.checks.push_back(b_lip);
  return rep;
}

}  // namespace fsde
