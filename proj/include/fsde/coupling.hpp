#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fsde/functionals.hpp"
#include "fsde/mild_solver.hpp"
#include "fsde/parallel.hpp"
#include "fsde/stats.hpp"

namespace fsde {

// How the bridging factor h / gamma_hat is formed on the step [t, t + h).
//   exact:    1 - rho, rho = (e^{K^2(T-t-h)} - 1) / (e^{K^2(T-t)} - 1), the
//             contraction of dZ = -Z / gamma dt over the step; the last step
//             before T closes the gap with the exact Gaussian likelihood ratio.
//   midpoint: h / max(gamma(t + h/2), gamma_floor).
enum class BridgeSchedule { exact, midpoint };

inline const char* to_string(BridgeSchedule s) { return s == BridgeSchedule::exact ? "exact" : "midpoint"; }

struct CouplingConfig {
  double T = 1.0;
  double K = 1.0;
  double delta_couple = 0.0;  // 0: 1e-8 (1 + |xi(0) - eta(0)|)
  double gamma_floor = 0.0;   // 0: gamma(T - h/2); midpoint schedule only
  BridgeSchedule schedule = BridgeSchedule::exact;
};

inline void check_config(const CouplingConfig& c) {
  require(c.T > 0.0 && std::isfinite(c.T), ErrorCode::domain, "coupling horizon T must be positive");
  require(c.K > 0.0 && std::isfinite(c.K), ErrorCode::domain, "K must be positive");
  require(c.delta_couple >= 0.0 && c.gamma_floor >= 0.0, ErrorCode::domain, "thresholds must be non-negative");
}

// gamma(t) = (1 - e^{(t-T)K^2}) / K^2 on [0, T).
inline double gamma(const CouplingConfig& c, double t) {
  require(t >= 0.0 && t < c.T, ErrorCode::domain, "gamma is defined on [0, T)");
  const double k2 = c.K * c.K;
  return -std::expm1((t - c.T) * k2) / k2;
}

// gamma'(t) = -e^{(t-T)K^2}, so that 2 + gamma' - K^2 gamma = 1.
inline double gamma_derivative(const CouplingConfig& c, double t) {
  require(t >= 0.0 && t < c.T, ErrorCode::domain, "gamma is defined on [0, T)");
  return -std::exp((t - c.T) * c.K * c.K);
}

// h / gamma_hat for the step starting at t (< T).
inline double bridge_factor(const CouplingConfig& c, double t, double h) {
  require(t >= 0.0 && t < c.T, ErrorCode::domain, "bridging acts on [0, T)");
  if (c.schedule == BridgeSchedule::midpoint) {
    const double floor = c.gamma_floor > 0.0 ? c.gamma_floor : gamma(c, std::max(c.T - 0.5 * h, 0.0));
    const double mid = t + 0.5 * h < c.T ? gamma(c, t + 0.5 * h) : 0.0;
    return h / std::max(mid, floor);
  }
  if (t + h >= c.T * (1.0 - 1e-12)) return 1.0;
  const double k2 = c.K * c.K;
  return 1.0 - std::expm1(k2 * (c.T - t - h)) / std::expm1(k2 * (c.T - t));
}

//---------------------------------------------------------------------------//
// One coupled step
//---------------------------------------------------------------------------//

struct CoupledStep {
  Vec x_next;
  Vec y_next;
  Vec phi;
};

namespace detail {

inline Vec apply_noise(const Mat& q, std::span<const double> dw) {
  Vec out = zeros(static_cast<int>(q.rows()));
  for (int i = 0; i < q.rows(); ++i)
    for (int k = 0; k < q.cols(); ++k) out[i] += q(i, k) * dw[static_cast<std::size_t>(k)];
  return out;
}

// Euler-Maruyama for the pair given the full drifts F = Ax + b + B of both
// segments; `a` = h / gamma_hat. Returns the shift
// phi = Q^+(Y)(F_Y - F_X) - (a/h) Q^+(X)(X - Y).
inline CoupledStep bridge_step(const Vec& x, const Vec& y, const Vec& fx, const Vec& fy, const Mat& qx, const Mat& qy,
                               std::span<const double> dw, double h, double a) {
  const Vec pull = right_pseudo_solve(qx, x - y);
  CoupledStep s;
  s.x_next = x + fx * h + apply_noise(qx, dw);
  s.y_next = y + fx * h + apply_noise(qy, dw) + a * (qy * pull);
  s.phi = right_pseudo_solve(qy, fy - fx) - (a / h) * pull;
  return s;
}

inline Vec full_drift(const ModelSpec& m, const DelayMeasure& nu, double t, const SegmentView& seg) {
  const Vec x = seg.head();
  return m.A.apply(x) + m.drift(t, x) + m.delay_raw(t, nu, seg);
}

}  // namespace detail

// One Euler-Maruyama step of the coupled pair from segments X_t and Y_t.
// gamma_hat = infinity switches the bridging off (t >= T).
inline CoupledStep coupled_step(const ModelSpec& m, const DelayMeasure& nu, const Segment& xs, const Segment& ys,
                                double t, std::span<const double> dW, double h, double gamma_hat) {
  check_compatible(nu, xs.view());
  check_compatible(nu, ys.view());
  require(gamma_hat > 0.0, ErrorCode::domain, "gamma_hat must be positive");
  const Vec x = xs.head();
  const Vec y = ys.head();
  const Vec fx = detail::full_drift(m, nu, t, xs.view());
  const Vec fy = detail::full_drift(m, nu, t, ys.view());
  const double a = std::isfinite(gamma_hat) ? h / gamma_hat : 0.0;
  return detail::bridge_step(x, y, fx, fy, m.diffusion(t, x), m.diffusion(t, y), dW, h, a);
}

//---------------------------------------------------------------------------//
// Coupled run
//---------------------------------------------------------------------------//

struct CouplingResult {
  std::optional<double> tau;   // first grid time with |X - Y| <= delta
  double log_R = 0.0;          // sum <phi, dW> - |phi|^2 h / 2 up to min(tau, T)
  double kl = 0.0;             // sum of conditional one-step relative entropies
  bool coupled_at_end = false;
  SamplePath X;
  SamplePath Y;
  std::optional<std::string> failure;

  double weight() const { return std::exp(log_R); }
};

namespace detail {

// One process on the grid: raw rows, mapped rows when the model has a history
// map, and the running nu-sum of the mapped rows.
class Track {
 public:
  Track(const ModelSpec& m, const DelayMeasure& nu, const Segment& init, long n_steps)
      : m_(m), nu_(nu), n_hist_(nu.cells()), sum_(nu, m.d) {
    const int d = m.d;
    rows_ = n_hist_ + n_steps + 1;
    states.assign(static_cast<std::size_t>(rows_ * d), 0.0);
    std::copy(init.values().begin(), init.values().end(), states.begin());
    mapped_ = static_cast<bool>(m.history_map);
    fast_ = static_cast<bool>(m.B_nu) && !m.zero_delay;
    if (mapped_) {
      mbuf_.assign(states.size(), 0.0);
      for (long j = 0; j <= n_hist_; ++j) map_row(j, static_cast<double>(j - n_hist_) * nu.h());
    }
    if (fast_) sum_.reset(hist());
  }

  Vec state(long k) const { return as_vec(states.data() + (k + n_hist_) * m_.d, m_.d); }

  Vec drift(double t, long k) const {
    const int d = m_.d;
    const long r = k + n_hist_;
    const Vec x = as_vec(states.data() + r * d, d);
    Vec f = m_.A.apply(x) + m_.drift(t, x);
    if (m_.zero_delay) return f;
    if (fast_) return f + m_.B_nu(t, sum_.value(), as_vec(hist() + r * d, d));
    const std::size_t len = static_cast<std::size_t>((n_hist_ + 1) * d);
    const SegmentView raw{std::span<const double>(states.data() + k * d, len), d};
    const SegmentView mv{std::span<const double>(hist() + k * d, len), d};
    return f + m_.B(t, DelayArgs{raw, mv});
  }

  // Stores X(t_{k+1}) = y and slides the window.
  void push(long k, const Vec& y, double t_next) {
    const int d = m_.d;
    const long r = k + n_hist_ + 1;
    for (int i = 0; i < d; ++i) states[static_cast<std::size_t>(r * d + i)] = y[i];
    if (mapped_) map_row(r, t_next);
    if (fast_) sum_.advance(hist() + (k + 1) * d);
  }

  std::vector<double> states;

 private:
  const double* hist() const { return mapped_ ? mbuf_.data() : states.data(); }
  void map_row(long r, double t) {
    const int d = m_.d;
    const Vec z = m_.history_map(t, as_vec(states.data() + r * d, d));
    for (int i = 0; i < d; ++i) mbuf_[static_cast<std::size_t>(r * d + i)] = z[i];
  }

  const ModelSpec& m_;
  const DelayMeasure& nu_;
  long n_hist_;
  long rows_ = 0;
  bool mapped_ = false;
  bool fast_ = false;
  std::vector<double> mbuf_;
  WindowSum sum_;
};

// log N(w; mean, h S) - log N(w; 0, h I) and the relative entropy of the two.
inline std::pair<double, double> gaussian_ratio(std::span<const double> w, const Vec& mean, const Mat& S, double h) {
  const int d = static_cast<int>(mean.size());
  const Vec wv = as_vec(w.data(), d);
  const Eigen::LLT<Mat> llt(S);
  require(llt.info() == Eigen::Success, ErrorCode::singular_diffusion, "closing-step covariance is singular");
  const Vec r = wv - mean;
  const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  const double quad = r.dot(llt.solve(r)) / h;
  const double log_ratio = -0.5 * quad - 0.5 * logdet + 0.5 * wv.squaredNorm() / h;
  const double kl = 0.5 * (S.trace() - d - logdet + mean.squaredNorm() / h);
  return {log_ratio, kl};
}

}  // namespace detail

/*!
 * Coupling by change of measure on [0, T + r0].
 *
 * X follows the model, Y gets the same drift F(X_t) plus the bridging term
 * (a/h) Q(Y) Q^+(X) (X - Y), a = h / gamma_hat. R = exp(log_R) turns the law of
 * Y into the law of the solution from eta. Under the exact schedule the last
 * step before T sets Y(T) = X(T) and charges the exact density ratio of the
 * increment; this needs a square diffusion.
 */
inline CouplingResult run_coupling(const ModelSpec& m, const DelayMeasure& nu, const Segment& xi, const Segment& eta,
                                   CouplingConfig cfg, const SolverConfig& solver, std::uint64_t seed,
                                   std::uint64_t path_index = 0) {
  check_config(cfg);
  check_compatible(nu, xi.view());
  check_compatible(nu, eta.view());
  const double h = solver.h;
  require(std::abs(h - nu.h()) <= 1e-12 * nu.h(), ErrorCode::grid_mismatch, "solver step must equal the measure grid step");
  const long N = grid_count(cfg.T, h, "coupling T");
  const long n_total = grid_count(cfg.T + nu.r0(), h, "T + r0");
  const int d = m.d;
  const int dbar = m.dbar;
  require(cfg.schedule == BridgeSchedule::midpoint || d == dbar, ErrorCode::unsupported_model,
          "the exact closing step needs a square diffusion");
  if (cfg.delta_couple == 0.0) cfg.delta_couple = 1e-8 * (1.0 + (xi.head() - eta.head()).norm());

  detail::Track X(m, nu, xi, n_total);
  detail::Track Y(m, nu, eta, n_total);
  const BrownianIncrements noise(seed, path_index, h, solver.noise_refine, solver.noise_stream);
  std::vector<double> dW(static_cast<std::size_t>(n_total * dbar), 0.0);
  std::vector<double> dw(static_cast<std::size_t>(dbar));

  CouplingResult res;
  bool coupled = false;
  if ((xi.head() - eta.head()).norm() <= cfg.delta_couple &&
      std::equal(xi.values().begin(), xi.values().end(), eta.values().begin())) {
    coupled = true;
    res.tau = 0.0;
  }
  long k = 0;
  long y_done = 0;  // steps stored in Y's own track; later rows are copies of X
  try {
    for (; k < n_total; ++k) {
      const bool was_coupled = coupled;
      const double t = static_cast<double>(k) * h;
      noise.fill(static_cast<std::uint64_t>(k), dw);
      std::copy(dw.begin(), dw.end(), dW.begin() + k * dbar);
      const Vec x = X.state(k);
      const Vec fx = X.drift(t, k);
      const Mat qx = m.diffusion(t, x);
      Vec xn, yn;
      if (coupled) {
        xn = x + fx * h + detail::apply_noise(qx, dw);
        yn = xn;
      } else {
        const Vec y = Y.state(k);
        const Vec fy = Y.drift(t, k);
        const Mat qy = m.diffusion(t, y);
        if (k >= N) {
          xn = x + fx * h + detail::apply_noise(qx, dw);
          yn = y + fy * h + detail::apply_noise(qy, dw);
        } else if (k == N - 1 && cfg.schedule == BridgeSchedule::exact) {
          // Y(T) = X(T): the Y-noise that achieves it is Gaussian under Q, so dW
          // has law N(mu, h S) there with
          // mu = Q(X)^{-1}(Y - X + (F_Y - F_X) h), S = Q(X)^{-1} Q(Y) Q(Y)^* Q(X)^{-*}.
          const auto lu = qx.partialPivLu();
          const Vec mu = lu.solve(Vec(y - x + (fy - fx) * h));
          const Mat G = lu.solve(qy);
          const auto [lr, kl] = detail::gaussian_ratio(dw, mu, G * G.transpose(), h);
          res.log_R += lr;
          res.kl += kl;
          xn = x + fx * h + detail::apply_noise(qx, dw);
          yn = xn;
        } else {
          const double a = bridge_factor(cfg, t, h);
          const auto s = detail::bridge_step(x, y, fx, fy, qx, qy, dw, h, a);
          double dot = 0.0;
          for (int i = 0; i < dbar; ++i) dot += s.phi[i] * dw[static_cast<std::size_t>(i)];
          const double sq = s.phi.squaredNorm();
          res.log_R += dot - 0.5 * sq * h;
          res.kl += 0.5 * sq * h;
          xn = s.x_next;
          yn = s.y_next;
        }
        detail::check_finite(yn, t);
        if ((xn - yn).norm() <= cfg.delta_couple) {
          yn = xn;
          coupled = true;
          res.tau = t + h;
        }
      }
      detail::check_finite(xn, t);
      if (!std::isfinite(res.log_R)) throw OverflowError(t, "Girsanov log-density overflowed");
      X.push(k, xn, t + h);
      if (!was_coupled) {
        Y.push(k, yn, t + h);
        y_done = k + 1;
      }
    }
  } catch (const OverflowError& e) {
    res.failure = "overflow at t = " + std::to_string(e.time()) + ": " + e.what() +
                  " (distance not contracting; check K and the step)";
    if (!std::isfinite(res.log_R)) res.log_R = -std::numeric_limits<double>::max();
  }
  res.coupled_at_end = coupled && !res.failure;
  {
    const long from = (nu.cells() + y_done + 1) * d;
    const long to = (nu.cells() + k + 1) * d;
    std::copy(X.states.begin() + from, X.states.begin() + to, Y.states.begin() + from);
  }

  auto fill_path = [&](SamplePath& p, std::vector<double>&& states) {
    p.h = h;
    p.r0 = nu.r0();
    p.d = d;
    p.dbar = dbar;
    p.n_hist = nu.cells();
    p.n_steps = n_total;
    p.n_done = k;
    p.seed = seed;
    p.path_index = path_index;
    p.states = std::move(states);
    p.states.resize(static_cast<std::size_t>((p.n_hist + k + 1) * d));
    p.dW.assign(dW.begin(), dW.begin() + k * dbar);
    if (res.failure) {
      p.overflow = true;
      p.lifetime = static_cast<double>(k) * h;
    }
  };
  fill_path(res.X, std::move(X.states));
  fill_path(res.Y, std::move(Y.states));
  return res;
}

//---------------------------------------------------------------------------//
// Batches and entropy cost
//---------------------------------------------------------------------------//

// Per-seed record kept by batches (paths are dropped).
struct CouplingSummary {
  double log_R = 0.0;
  double kl = 0.0;
  bool coupled_at_end = false;
  bool failed = false;
  std::optional<double> tau;
  double f_end = 0.0;  // f(X_{T + r0}) when a functional is supplied
};

inline std::vector<CouplingSummary> couple_batch(const ModelSpec& m, const DelayMeasure& nu, const Segment& xi,
                                                 const Segment& eta, const CouplingConfig& cfg,
                                                 const SolverConfig& solver, std::size_t n, std::uint64_t seed,
                                                 int workers = 1, const SegmentFunctional* f = nullptr) {
  std::vector<CouplingSummary> out(n);
  parallel_for(n, workers, [&](std::size_t i) {
    const auto r = run_coupling(m, nu, xi, eta, cfg, solver, seed, i);
    CouplingSummary s{r.log_R, r.kl, r.coupled_at_end, r.failure.has_value(), r.tau, 0.0};
    if (f && !s.failed) s.f_end = (*f)(nu, r.X.segment_view(r.X.n_done));
    out[i] = s;
  });
  return out;
}

// Statistics of one (T, xi, eta) setting.
struct SettingEstimate {
  double T = 0.0;
  double head_distance = 0.0;     // |xi(0) - eta(0)|
  double segment_distance = 0.0;  // ||xi - eta||_nu
  std::size_t n = 0;
  std::size_t failures = 0;
  double coupled_fraction = 0.0;
  MeanEstimate mean_R;
  MeanEstimate entropy;  // E_P[R log R] / E_P[R]
  MeanEstimate kl_cost;  // E_P[R sum KL] / E_P[R], same expectation, lower variance
  double ess = 0.0;
  std::optional<std::string> warning;
};

inline SettingEstimate summarize_setting(double T, double head_distance, double segment_distance,
                                         std::span<const CouplingSummary> batch) {
  SettingEstimate e;
  e.T = T;
  e.head_distance = head_distance;
  e.segment_distance = segment_distance;
  e.n = batch.size();
  std::vector<double> w, logw, kl;
  std::size_t coupled = 0;
  for (const auto& s : batch) {
    if (s.failed) {
      ++e.failures;
      continue;
    }
    if (s.coupled_at_end) ++coupled;
    w.push_back(std::exp(s.log_R));
    logw.push_back(s.log_R);
    kl.push_back(s.kl);
  }
  e.coupled_fraction = e.n ? static_cast<double>(coupled) / static_cast<double>(e.n) : 0.0;
  if (w.empty()) {
    e.warning = "every coupling failed";
    return e;
  }
  // failed seeds enter E_P[R] with weight 0
  std::vector<double> w_all = w;
  w_all.resize(w.size() + e.failures, 0.0);
  e.mean_R = estimate_mean(w_all);
  e.entropy = self_normalized(w, logw);
  e.kl_cost = self_normalized(w, kl);
  e.ess = effective_sample_size(w);
  if (e.ess < 0.01 * static_cast<double>(e.n)) {
    e.warning = "degenerate weights: ess " + std::to_string(e.ess) + " < 0.01 n";
  }
  return e;
}

// Least-squares fit of cost ~ c1 |xi(0) - eta(0)|^2 / T + c2 ||xi - eta||^2.
struct EntropyFit {
  double c1 = 0.0;
  double c2 = 0.0;
  std::vector<double> observed;
  std::vector<double> fitted;
  std::vector<double> residual;
  double residual_ratio = 0.0;  // |residual| / |fitted|
  bool positive() const { return c1 > 0.0 && c2 > 0.0; }
  double predict(double head_distance, double segment_distance, double T) const {
    return c1 * head_distance * head_distance / T + c2 * segment_distance * segment_distance;
  }
};

inline EntropyFit entropy_cost(std::span<const SettingEstimate> settings) {
  require(settings.size() >= 2, ErrorCode::domain, "the entropy-cost fit needs at least two settings");
  const int n = static_cast<int>(settings.size());
  Eigen::MatrixXd X(n, 2);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    const auto& s = settings[static_cast<std::size_t>(i)];
    X(i, 0) = s.head_distance * s.head_distance / s.T;
    X(i, 1) = s.segment_distance * s.segment_distance;
    y[i] = s.kl_cost.mean;
  }
  const Eigen::VectorXd c = X.colPivHouseholderQr().solve(y);
  EntropyFit fit;
  fit.c1 = c[0];
  fit.c2 = c[1];
  const Eigen::VectorXd yf = X * c;
  for (int i = 0; i < n; ++i) {
    fit.observed.push_back(y[i]);
    fit.fitted.push_back(yf[i]);
    fit.residual.push_back(y[i] - yf[i]);
  }
  fit.residual_ratio = yf.norm() > 0.0 ? (y - yf).norm() / yf.norm() : 0.0;
  return fit;
}

}  // namespace fsde
