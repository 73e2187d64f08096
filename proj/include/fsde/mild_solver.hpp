#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "fsde/delay_measure.hpp"
#include "fsde/error.hpp"
#include "fsde/linalg.hpp"
#include "fsde/model.hpp"
#include "fsde/rng.hpp"

namespace fsde {

enum class Scheme { exponential_euler, euler_maruyama };

inline const char* to_string(Scheme s) {
  return s == Scheme::exponential_euler ? "exponential-euler" : "euler-maruyama";
}

struct SolverConfig {
  Scheme scheme = Scheme::exponential_euler;
  double h = 1.0 / 256.0;
  double T_end = 1.0;
  double truncation = std::numeric_limits<double>::infinity();  // cutoff radius m
  double R_explode = 1e6;
  int noise_refine = 0;       // increments summed from a grid 2^refine times finer
  std::uint32_t noise_stream = 0;
};

// One trajectory on the grid t_k = k h, k = -n_hist .. n_done.
struct SamplePath {
  double h = 0.0;
  double r0 = 0.0;
  int d = 1;
  int dbar = 1;
  long n_hist = 0;
  long n_steps = 0;  // requested
  long n_done = 0;   // completed; < n_steps only when a lifetime was recorded
  std::vector<double> states;
  std::vector<double> dW;
  std::uint64_t seed = 0;
  std::uint64_t path_index = 0;
  std::optional<double> lifetime;
  bool overflow = false;

  double t_min() const { return -r0; }
  double t_max() const { return static_cast<double>(n_done) * h; }
  long row(long k) const { return k + n_hist; }
  Vec state(long k) const { return as_vec(states.data() + row(k) * d, d); }
  Vec terminal() const { return state(n_done); }
  std::span<const double> increment(long k) const {
    return {dW.data() + k * dbar, static_cast<std::size_t>(dbar)};
  }
  SegmentView segment_view(long k) const {
    return {std::span<const double>(states.data() + (row(k) - n_hist) * d, static_cast<std::size_t>((n_hist + 1) * d)),
            d};
  }
};

//---------------------------------------------------------------------------//
// Cutoff and truncation
//---------------------------------------------------------------------------//

// psi = 1 on [0,1], 0 on [2,inf), quintic C^2 blend in between.
inline double cutoff(double r) {
  if (r <= 1.0) return 1.0;
  if (r >= 2.0) return 0.0;
  const double s = r - 1.0;
  return 1.0 - s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
}

// Coefficients b psi(|z|/m), Q(t, psi(|z|/m) z), B psi(||xi||/m). They agree
// with the originals (bit for bit) inside radius m.
inline ModelSpec truncate_coefficients(const ModelSpec& m, double level, const DelayMeasure& nu) {
  require(level > 0.0, ErrorCode::domain, "truncation level must be positive");
  if (!std::isfinite(level)) return m;
  ModelSpec t = m;
  t.name = m.name + "[m=" + std::to_string(level) + "]";
  t.truncation = level;
  t.b = [b = m.b, level](double s, const Vec& z) { return (b(s, z) * cutoff(z.norm() / level)).eval(); };
  t.Q = [q = m.Q, level](double s, const Vec& z) { return q(s, (cutoff(z.norm() / level) * z).eval()); };
  auto nu_ptr = std::make_shared<DelayMeasure>(nu);
  t.B = [b = m.B, level, nu_ptr](double s, const DelayArgs& a) {
    return (b(s, a) * cutoff(seg_norm(*nu_ptr, a.raw) / level)).eval();
  };
  t.B_nu = nullptr;
  t.keepalive = std::make_shared<std::pair<std::shared_ptr<const void>, std::shared_ptr<DelayMeasure>>>(m.keepalive,
                                                                                                         nu_ptr);
  t.growth.reset();
  return t;
}

//---------------------------------------------------------------------------//
// Single step
//---------------------------------------------------------------------------//

namespace detail {

inline Vec advance(Scheme scheme, const OperatorA& A, const SemigroupFactors& f, double h, const Vec& x,
                   const Vec& drift, const Mat& q, std::span<const double> dw) {
  const int d = static_cast<int>(x.size());
  Vec noise = zeros(d);
  for (int i = 0; i < d; ++i)
    for (int k = 0; k < q.cols(); ++k) noise[i] += q(i, k) * dw[static_cast<std::size_t>(k)];
  Vec y(d);
  if (scheme == Scheme::exponential_euler) {
    for (int i = 0; i < d; ++i) y[i] = f.E[i] * x[i] + f.J[i] * drift[i] + f.E[i] * noise[i];
  } else {
    for (int i = 0; i < d; ++i) y[i] = x[i] + h * (-A.rate(i) * x[i] + drift[i]) + noise[i];
  }
  return y;
}

inline void check_finite(const Vec& y, double t) {
  for (int i = 0; i < y.size(); ++i) {
    if (!std::isfinite(y[i])) throw OverflowError(t, "non-finite state produced by step");
  }
}

}  // namespace detail

// One step from the segment X_t, with B evaluated at the left endpoint.
inline Vec step(const ModelSpec& m, const DelayMeasure& nu, const Segment& seg, double t, std::span<const double> dW,
                const SolverConfig& cfg) {
  check_compatible(nu, seg.view());
  require(static_cast<int>(dW.size()) == m.dbar, ErrorCode::domain, "dW has the wrong dimension");
  const SemigroupFactors f = semigroup_factors(m.A, cfg.h);
  const Vec x = seg.head();
  const Vec drift = m.drift(t, x) + m.delay_raw(t, nu, seg.view());
  const Vec y = detail::advance(cfg.scheme, m.A, f, cfg.h, x, drift, m.diffusion(t, x), dW);
  detail::check_finite(y, t);
  return y;
}

//---------------------------------------------------------------------------//
/*!
 * Running value of sum_j w_j y_{k+j} over a window sliding along a row-major
 * series. Geometric weights (every exponential density) are updated in O(1)
 * per step and re-summed exactly once per window length to stop rounding
 * drift; other weights are re-summed every step.
 */
class WindowSum {
 public:
  WindowSum(const DelayMeasure& nu, int dim) : w_(nu.weights()), n_(nu.cells()), dim_(dim), acc_(zeros(dim)) {
    geometric_ = n_ >= 2 && w_[0] > 0.0;
    if (geometric_) {
      ratio_ = w_[0] / w_[1];
      for (long j = 0; j + 1 < n_ && geometric_; ++j) {
        const double r = w_[j] / w_[j + 1];
        if (!(w_[j + 1] > 0.0) || std::abs(r - ratio_) > 1e-10 * ratio_) geometric_ = false;
      }
    }
  }

  // window points at row theta_0 of the current segment.
  void reset(const double* window) {
    acc_ = zeros(dim_);
    if (dim_ == 1) {
      double a0 = 0.0, a1 = 0.0;
      long j = 0;
      for (; j + 1 < n_; j += 2) {
        a0 += w_[j] * window[j];
        a1 += w_[j + 1] * window[j + 1];
      }
      for (; j < n_; ++j) a0 += w_[j] * window[j];
      acc_[0] = a0 + a1;
    } else {
      for (long j = 0; j < n_; ++j)
        for (int i = 0; i < dim_; ++i) acc_[i] += w_[j] * window[j * dim_ + i];
    }
    since_reset_ = 0;
  }

  // Moves the window forward by one row; `window` is the new start.
  void advance(const double* window) {
    if (!geometric_ || ++since_reset_ >= n_) {
      reset(window);
      return;
    }
    const double* dropped = window - dim_;
    const double* added = window + (n_ - 1) * dim_;
    for (int i = 0; i < dim_; ++i) acc_[i] = ratio_ * (acc_[i] - w_[0] * dropped[i]) + w_[n_ - 1] * added[i];
  }

  const Vec& value() const { return acc_; }

 private:
  std::span<const double> w_;
  long n_;
  int dim_;
  Vec acc_;
  bool geometric_ = false;
  double ratio_ = 1.0;
  long since_reset_ = 0;
};

//---------------------------------------------------------------------------//
/*!
 * Path integrator.
 *
 * Holds the raw history and, when the model declares a history map, the
 * mapped history so every past point is mapped exactly once.
 */
class PathIntegrator {
 public:
  PathIntegrator(const ModelSpec& m, const DelayMeasure& nu, const SolverConfig& cfg)
      : m_(m), nu_(nu), cfg_(cfg), f_(semigroup_factors(m.A, cfg.h)) {
    require(cfg.h > 0.0 && cfg.T_end >= 0.0, ErrorCode::domain, "solver needs h > 0 and T_end >= 0");
    require(std::abs(cfg.h - nu.h()) <= 1e-12 * nu.h(), ErrorCode::grid_mismatch, "solver step must equal the measure grid step");
    require(cfg.truncation > 0.0, ErrorCode::domain, "truncation level must be positive");
    n_steps_ = grid_count(cfg.T_end, cfg.h, "T_end");
    n_hist_ = nu.cells();
  }

  const ModelSpec& model() const { return m_; }
  const DelayMeasure& measure() const { return nu_; }
  const SolverConfig& config() const { return cfg_; }
  long n_steps() const { return n_steps_; }
  long n_hist() const { return n_hist_; }

  SamplePath solve(const Segment& xi, std::uint64_t seed, std::uint64_t path_index) const {
    const BrownianIncrements noise(seed, path_index, cfg_.h, cfg_.noise_refine, cfg_.noise_stream);
    return solve_with(xi, seed, path_index, [&](long k, std::span<double> out) { noise.fill(static_cast<std::uint64_t>(k), out); });
  }

  // Runs with caller-supplied increments: fill(k, out) writes dW_k.
  template <class Fill>
  SamplePath solve_with(const Segment& xi, std::uint64_t seed, std::uint64_t path_index, Fill&& fill) const {
    check_compatible(nu_, xi.view());
    require(xi.dim() == m_.d, ErrorCode::domain, "initial segment dimension differs from the model");
    const int d = m_.d;
    const int dbar = m_.dbar;
    SamplePath p;
    p.h = cfg_.h;
    p.r0 = nu_.r0();
    p.d = d;
    p.dbar = dbar;
    p.n_hist = n_hist_;
    p.n_steps = n_steps_;
    p.seed = seed;
    p.path_index = path_index;
    const long rows = n_hist_ + n_steps_ + 1;
    p.states.assign(static_cast<std::size_t>(rows * d), 0.0);
    p.dW.assign(static_cast<std::size_t>(n_steps_ * dbar), 0.0);
    std::copy(xi.values().begin(), xi.values().end(), p.states.begin());

    const bool mapped = static_cast<bool>(m_.history_map);
    std::vector<double> mbuf;
    if (mapped) {
      mbuf.assign(p.states.size(), 0.0);
      for (long j = 0; j <= n_hist_; ++j) map_row(p.states.data(), mbuf.data(), j, static_cast<double>(j - n_hist_) * cfg_.h);
    }
    const double* hist = mapped ? mbuf.data() : p.states.data();
    const bool fast = static_cast<bool>(m_.B_nu) && !m_.zero_delay;
    const bool track_norm = std::isfinite(cfg_.truncation);
    WindowSum nu_sum(nu_, d);
    WindowSum sq_sum(nu_, 1);
    std::vector<double> sq;
    if (track_norm) {
      sq.assign(static_cast<std::size_t>(rows), 0.0);
      for (long j = 0; j <= n_hist_; ++j) sq[static_cast<std::size_t>(j)] = row_sq(p.states.data(), j);
      sq_sum.reset(sq.data());
    }
    if (fast) nu_sum.reset(hist);

    std::vector<double> dw(static_cast<std::size_t>(dbar));
    long k = 0;
    try {
      for (; k < n_steps_; ++k) {
        const double t = static_cast<double>(k) * cfg_.h;
        const long r = k + n_hist_;  // row of X(t)
        const Vec x = as_vec(p.states.data() + r * d, d);
        if (track_norm) {
          const double nrm = std::sqrt(sq_sum.value()[0] + sq[static_cast<std::size_t>(r)]);
          if (nrm >= cfg_.truncation) {
            p.lifetime = t;
            break;
          }
        }
        // Truncated coefficients b psi(|x|/m), B psi(||X_t||/m), Q(psi x); the
        // factors are exactly 1 inside radius m.
        double cz = 1.0;
        double cseg = 1.0;
        if (track_norm) {
          cz = cutoff(x.norm() / cfg_.truncation);
          cseg = cutoff(std::sqrt(sq_sum.value()[0] + sq[static_cast<std::size_t>(r)]) / cfg_.truncation);
        }
        Vec drift = m_.drift(t, x) * cz;
        if (!m_.zero_delay) {
          if (fast) {
            drift += m_.B_nu(t, nu_sum.value(), as_vec(hist + r * d, d)) * cseg;
          } else {
            const std::span<const double> rawv(p.states.data() + k * d, static_cast<std::size_t>((n_hist_ + 1) * d));
            const std::span<const double> mapv(hist + k * d, static_cast<std::size_t>((n_hist_ + 1) * d));
            drift += m_.B(t, DelayArgs{{rawv, d}, {mapv, d}}) * cseg;
          }
        }
        fill(k, std::span<double>(dw));
        std::copy(dw.begin(), dw.end(), p.dW.begin() + k * dbar);
        const Vec y = detail::advance(cfg_.scheme, m_.A, f_, cfg_.h, x, drift, m_.diffusion(t, track_norm ? (cz * x).eval() : x), dw);
        detail::check_finite(y, t);
        for (int i = 0; i < d; ++i) p.states[static_cast<std::size_t>((r + 1) * d + i)] = y[i];
        if (mapped) map_row(p.states.data(), mbuf.data(), r + 1, t + cfg_.h);
        if (fast) nu_sum.advance(hist + (k + 1) * d);
        if (track_norm) {
          sq[static_cast<std::size_t>(r + 1)] = row_sq(p.states.data(), r + 1);
          sq_sum.advance(sq.data() + (k + 1));
        }
        if (y.norm() >= cfg_.R_explode) {
          ++k;
          p.lifetime = t + cfg_.h;
          break;
        }
      }
    } catch (const OverflowError& e) {
      p.lifetime = e.time();
      p.overflow = true;
    }
    p.n_done = k;
    p.states.resize(static_cast<std::size_t>((n_hist_ + k + 1) * d));
    p.dW.resize(static_cast<std::size_t>(k * dbar));
    return p;
  }

 private:
  double row_sq(const double* states, long r) const {
    double s = 0.0;
    for (int i = 0; i < m_.d; ++i) s += states[r * m_.d + i] * states[r * m_.d + i];
    return s;
  }
  void map_row(const double* states, double* out, long r, double t) const {
    const Vec z = m_.history_map(t, as_vec(states + r * m_.d, m_.d));
    for (int i = 0; i < m_.d; ++i) out[r * m_.d + i] = z[i];
  }

  const ModelSpec& m_;
  const DelayMeasure& nu_;
  SolverConfig cfg_;
  SemigroupFactors f_;
  long n_steps_ = 0;
  long n_hist_ = 0;
};

inline SamplePath solve_path(const ModelSpec& m, const DelayMeasure& nu, const Segment& xi, const SolverConfig& cfg,
                             std::uint64_t seed, std::uint64_t path_index = 0) {
  return PathIntegrator(m, nu, cfg).solve(xi, seed, path_index);
}

inline Segment extract_segment(const SamplePath& p, double t) {
  const double q = t / p.h;
  const long k = std::lround(q);
  require(std::abs(q - static_cast<double>(k)) <= 1e-9 * std::max(1.0, std::abs(q)), ErrorCode::grid_mismatch,
          "segment time is not a grid time");
  if (k < 0 || k > p.n_done) throw Error(ErrorCode::out_of_range, "segment time outside the simulated range");
  const auto v = p.segment_view(k).values;
  return Segment(p.n_hist, p.d, std::vector<double>(v.begin(), v.end()));
}

}  // namespace fsde
