#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fsde/error.hpp"
#include "fsde/linalg.hpp"

namespace fsde {

enum class MeasureKind { exponential, uniform, atoms, custom };

inline const char* to_string(MeasureKind k) {
  switch (k) {
    case MeasureKind::exponential: return "exponential";
    case MeasureKind::uniform: return "uniform";
    case MeasureKind::atoms: return "atoms";
    case MeasureKind::custom: return "custom";
  }
  return "unknown";
}

struct MeasureDescriptor {
  MeasureKind kind = MeasureKind::exponential;
  // exponential: density e^{rate * theta} on [-r0, 0)
  double rate = 1.0;
  // uniform: constant density
  double density = 1.0;
  // atoms: (position in [-r0, 0), mass)
  std::vector<std::pair<double, double>> atoms;
  // custom: raw cell masses, oldest cell first
  std::vector<double> weights;
  // Set when r0 is a truncation window of an exponential density with
  // unbounded support; the mass left out is reported as tail_mass().
  bool truncated_window = false;
};

// Grid step and horizon must be commensurate: returns round(a / h) or throws.
inline long grid_count(double a, double h, const char* what) {
  if (!(h > 0.0) || !(a >= 0.0) || !std::isfinite(a)) {
    throw Error(ErrorCode::domain, std::string(what) + " and step must be positive and finite");
  }
  const double q = a / h;
  const double r = std::round(q);
  if (std::abs(q - r) > 1e-9 * std::max(1.0, q)) {
    throw Error(ErrorCode::grid_mismatch, std::string(what) + "/h = " + std::to_string(q) + " is not an integer");
  }
  return static_cast<long>(r);
}

//---------------------------------------------------------------------------//
/*!
 * Delay measure nu on [-r0, 0) discretized on cells [theta_j, theta_j + h),
 * theta_j = -r0 + j h, with the shift-domination function kappa.
 */
class DelayMeasure {
 public:
  DelayMeasure(MeasureDescriptor desc, double r0, double h, std::vector<double> weights,
               std::function<double(double)> kappa)
      : desc_(std::move(desc)), r0_(r0), h_(h), weights_(std::move(weights)), kappa_(std::move(kappa)) {}

  const MeasureDescriptor& descriptor() const { return desc_; }
  MeasureKind kind() const { return desc_.kind; }
  double r0() const { return r0_; }
  double h() const { return h_; }
  long cells() const { return static_cast<long>(weights_.size()); }
  std::span<const double> weights() const { return weights_; }
  double weight(long j) const { return weights_[static_cast<std::size_t>(j)]; }
  double kappa(double t) const { return kappa_(t); }

  double total_mass() const {
    double s = 0.0;
    for (double w : weights_) s += w;
    return s;
  }

  // nu([-t, 0)) for grid-aligned t; clamps to the full mass past r0.
  double mass_of_last(double t) const {
    const long k = std::min(cells(), grid_count(std::min(t, r0_), h_, "t"));
    double s = 0.0;
    for (long j = cells() - k; j < cells(); ++j) s += weight(j);
    return s;
  }

  // Closed-form mass of the analytic density on [-r0, 0); NaN for list kinds.
  double analytic_mass() const {
    switch (desc_.kind) {
      case MeasureKind::exponential:
        return desc_.rate == 0.0 ? r0_ : -std::expm1(-desc_.rate * r0_) / desc_.rate;
      case MeasureKind::uniform: return desc_.density * r0_;
      default: return std::numeric_limits<double>::quiet_NaN();
    }
  }

  // Mass of the exponential density beyond the window (infinite if it does
  // not decay); zero for measures that genuinely live on [-r0, 0).
  double tail_mass() const {
    if (!desc_.truncated_window || desc_.kind != MeasureKind::exponential) return 0.0;
    if (desc_.rate <= 0.0) return std::numeric_limits<double>::infinity();
    return std::exp(-desc_.rate * r0_) / desc_.rate;
  }

 private:
  MeasureDescriptor desc_;
  double r0_;
  double h_;
  std::vector<double> weights_;
  std::function<double(double)> kappa_;
};

inline DelayMeasure make_measure(const MeasureDescriptor& desc, double r0, double h) {
  if (!(r0 > 0.0) || !(h > 0.0)) throw Error(ErrorCode::domain, "r0 and h must be positive");
  const long n = grid_count(r0, h, "r0");
  if (n == 0) throw Error(ErrorCode::grid_mismatch, "r0 must contain at least one cell");
  std::vector<double> w(static_cast<std::size_t>(n), 0.0);
  std::function<double(double)> kappa = [](double) { return 1.0; };
  switch (desc.kind) {
    case MeasureKind::exponential: {
      const double lam = desc.rate;
      for (long j = 0; j < n; ++j) {
        const double a = -r0 + static_cast<double>(j) * h;
        const double b = a + h;
        // \int_a^b e^{lam s} ds = e^{lam b} (1 - e^{-lam h}) / lam
        w[static_cast<std::size_t>(j)] = lam == 0.0 ? h : std::exp(lam * b) * (-std::expm1(-lam * h)) / lam;
      }
      kappa = [lam](double t) { return std::max(1.0, std::exp(-lam * t)); };
      break;
    }
    case MeasureKind::uniform:
      if (!(desc.density >= 0.0)) throw Error(ErrorCode::domain, "density must be non-negative");
      std::fill(w.begin(), w.end(), desc.density * h);
      break;
    case MeasureKind::atoms:
      for (const auto& [pos, mass] : desc.atoms) {
        if (!(pos >= -r0 && pos < 0.0) || !(mass >= 0.0)) {
          throw Error(ErrorCode::domain, "atoms must lie in [-r0, 0) with non-negative mass");
        }
        const long j = std::min(n - 1, static_cast<long>(std::floor((pos + r0) / h + 1e-12)));
        w[static_cast<std::size_t>(j)] += mass;
      }
      break;
    case MeasureKind::custom:
      if (static_cast<long>(desc.weights.size()) != n) {
        throw Error(ErrorCode::grid_mismatch, "custom weights must have r0/h entries");
      }
      for (double x : desc.weights) {
        if (!(x >= 0.0) || !std::isfinite(x)) throw Error(ErrorCode::domain, "weights must be finite and >= 0");
      }
      w = desc.weights;
      break;
  }
  return DelayMeasure(desc, r0, h, std::move(w), std::move(kappa));
}

//---------------------------------------------------------------------------//
// Segments
//---------------------------------------------------------------------------//

// Non-owning view of a segment: rows j = 0..cells, row j at offset
// theta_j = -r0 + j h, row `cells` is the present value xi(0).
struct SegmentView {
  std::span<const double> values;
  int d = 1;

  long cells() const { return static_cast<long>(values.size()) / d - 1; }
  const double* row(long j) const { return values.data() + j * d; }
  Vec at(long j) const { return as_vec(row(j), d); }
  Vec head() const { return at(cells()); }
};

class Segment {
 public:
  Segment() = default;
  Segment(long cells, int d, std::vector<double> values) : d_(d), values_(std::move(values)) {
    require(static_cast<long>(values_.size()) == (cells + 1) * d, ErrorCode::grid_mismatch,
            "segment storage does not match r0/h + 1 rows");
    for (double v : values_) require(std::isfinite(v), ErrorCode::domain, "segment entries must be finite");
  }

  static Segment constant(long cells, const Vec& c) {
    std::vector<double> v;
    v.reserve(static_cast<std::size_t>((cells + 1) * c.size()));
    for (long j = 0; j <= cells; ++j)
      for (int i = 0; i < c.size(); ++i) v.push_back(c[i]);
    return Segment(cells, static_cast<int>(c.size()), std::move(v));
  }

  // values[j] = fn(theta_j)
  template <class Fn>
  static Segment from_function(const DelayMeasure& m, int d, Fn&& fn) {
    std::vector<double> v;
    for (long j = 0; j <= m.cells(); ++j) {
      const Vec x = fn(-m.r0() + static_cast<double>(j) * m.h());
      for (int i = 0; i < d; ++i) v.push_back(x[i]);
    }
    return Segment(m.cells(), d, std::move(v));
  }

  int dim() const { return d_; }
  long cells() const { return static_cast<long>(values_.size()) / d_ - 1; }
  std::span<const double> values() const { return values_; }
  std::span<double> mutable_values() { return values_; }
  SegmentView view() const { return {values_, d_}; }
  Vec at(long j) const { return as_vec(values_.data() + j * d_, d_); }
  Vec head() const { return at(cells()); }

 private:
  int d_ = 1;
  std::vector<double> values_;
};

inline void check_compatible(const DelayMeasure& m, const SegmentView& s) {
  if (s.cells() != m.cells() || static_cast<long>(s.values.size()) != (m.cells() + 1) * s.d) {
    throw Error(ErrorCode::grid_mismatch, "segment grid does not match the delay measure");
  }
}

// nu(<xi, eta>) + <xi(0), eta(0)>, left-endpoint cell rule.
inline double seg_inner(const DelayMeasure& m, const SegmentView& a, const SegmentView& b) {
  check_compatible(m, a);
  check_compatible(m, b);
  require(a.d == b.d, ErrorCode::grid_mismatch, "segment dimensions differ");
  const int d = a.d;
  const long n = m.cells();
  const double* w = m.weights().data();
  double acc = 0.0;
  for (long j = 0; j < n; ++j) {
    double dot = 0.0;
    for (int i = 0; i < d; ++i) dot += a.values[j * d + i] * b.values[j * d + i];
    acc += w[j] * dot;
  }
  for (int i = 0; i < d; ++i) acc += a.values[n * d + i] * b.values[n * d + i];
  return acc;
}

inline double seg_norm(const DelayMeasure& m, const SegmentView& s) { return std::sqrt(seg_inner(m, s, s)); }

inline double seg_inner(const DelayMeasure& m, const Segment& a, const Segment& b) {
  return seg_inner(m, a.view(), b.view());
}
inline double seg_norm(const DelayMeasure& m, const Segment& s) { return seg_norm(m, s.view()); }

// ||a - b||_{C_nu} without materializing the difference.
inline double seg_distance(const DelayMeasure& m, const SegmentView& a, const SegmentView& b) {
  check_compatible(m, a);
  check_compatible(m, b);
  const int d = a.d;
  const long n = m.cells();
  double acc = 0.0;
  for (long j = 0; j <= n; ++j) {
    double sq = 0.0;
    for (int i = 0; i < d; ++i) {
      const double diff = a.values[j * d + i] - b.values[j * d + i];
      sq += diff * diff;
    }
    acc += (j < n ? m.weight(j) : 1.0) * sq;
  }
  return std::sqrt(acc);
}

// Equality in the quotient C_nu: same present value and agreement on every
// cell carrying nu-mass. Null cells are ignored.
inline bool equal_in_c_nu(const DelayMeasure& m, const SegmentView& a, const SegmentView& b, double tol = 0.0) {
  check_compatible(m, a);
  check_compatible(m, b);
  const int d = a.d;
  const long n = m.cells();
  for (long j = 0; j <= n; ++j) {
    if (j < n && m.weight(j) == 0.0) continue;
    for (int i = 0; i < d; ++i) {
      if (std::abs(a.values[j * d + i] - b.values[j * d + i]) > tol) return false;
    }
  }
  return true;
}

struct ShiftDominationReport {
  bool pass = true;
  double worst_ratio = 0.0;  // max over shifts of shifted_j / (kappa w_j) on w_j > 0
  std::optional<double> offending_shift;
  std::optional<long> offending_cell;
  bool kappa_monotone = true;
};

// For every grid shift t = k h <= t_max checks nu(. - t) <= kappa(t) nu(.)
// cell-wise: the shifted measure puts w_{j-k} on cell j.
inline ShiftDominationReport check_shift_domination(const DelayMeasure& m, double t_max) {
  ShiftDominationReport rep;
  const long kmax = grid_count(t_max, m.h(), "t_max");
  const long n = m.cells();
  double prev_kappa = -std::numeric_limits<double>::infinity();
  for (long k = 1; k <= kmax; ++k) {
    const double t = static_cast<double>(k) * m.h();
    const double kap = m.kappa(t);
    if (kap < prev_kappa) rep.kappa_monotone = false;
    prev_kappa = kap;
    for (long j = 0; j < n; ++j) {
      const double shifted = j - k >= 0 ? m.weight(j - k) : 0.0;
      const double w = m.weight(j);
      double ratio;
      if (w > 0.0) {
        ratio = shifted / (kap * w);
      } else {
        ratio = shifted > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
      }
      if (ratio > rep.worst_ratio) rep.worst_ratio = ratio;
      if (ratio > 1.0 * (1.0 + 1e-12) && rep.pass) {
        rep.pass = false;
        rep.offending_shift = t;
        rep.offending_cell = j;
      }
    }
  }
  if (!rep.kappa_monotone) rep.pass = false;
  return rep;
}

}  // namespace fsde
