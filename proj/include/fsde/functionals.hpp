#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "fsde/delay_measure.hpp"
#include "fsde/error.hpp"

namespace fsde {

// Bounded measurable test functions on C_nu.
struct SegmentFunctional {
  std::string name;
  std::function<double(const DelayMeasure&, const SegmentView&)> eval;
  bool strictly_positive = false;

  double operator()(const DelayMeasure& nu, const SegmentView& s) const { return eval(nu, s); }
};

inline SegmentFunctional tanh_head(int component = 0) {
  return {"tanh(xi(0)_" + std::to_string(component) + ")",
          [component](const DelayMeasure&, const SegmentView& s) { return std::tanh(s.row(s.cells())[component]); },
          false};
}

// 1{|xi(0)_i| <= a for all i}
inline SegmentFunctional box_indicator(double a) {
  return {"1{|xi(0)|_inf<=" + std::to_string(a) + "}",
          [a](const DelayMeasure&, const SegmentView& s) {
            const double* x = s.row(s.cells());
            for (int i = 0; i < s.d; ++i)
              if (std::abs(x[i]) > a) return 0.0;
            return 1.0;
          },
          false};
}

inline SegmentFunctional gaussian_norm() {
  return {"exp(-||xi||^2)",
          [](const DelayMeasure& nu, const SegmentView& s) { return std::exp(-std::pow(seg_norm(nu, s), 2)); }, true};
}

// eps + tanh^2(xi(0)_0); strictly positive for the log-Harnack tests.
inline SegmentFunctional positive_tanh_sq(double eps = 1e-6) {
  require(eps > 0.0, ErrorCode::domain, "floor must be positive");
  return {"eps+tanh^2(xi(0))",
          [eps](const DelayMeasure&, const SegmentView& s) {
            const double t = std::tanh(s.row(s.cells())[0]);
            return eps + t * t;
          },
          true};
}

// Unbounded moments used by Gaussian oracles.
inline SegmentFunctional head_coordinate(int component = 0) {
  return {"xi(0)", [component](const DelayMeasure&, const SegmentView& s) { return s.row(s.cells())[component]; },
          false};
}

inline SegmentFunctional head_square(int component = 0) {
  return {"xi(0)^2",
          [component](const DelayMeasure&, const SegmentView& s) {
            const double x = s.row(s.cells())[component];
            return x * x;
          },
          false};
}

inline SegmentFunctional constant_functional(double c) {
  return {"const", [c](const DelayMeasure&, const SegmentView&) { return c; }, c > 0.0};
}

// Catalog lookup by name for configs.
inline SegmentFunctional functional_by_name(const std::string& name, double param = 0.0) {
  if (name == "tanh") return tanh_head();
  if (name == "box") return box_indicator(param > 0.0 ? param : 1.0);
  if (name == "gauss") return gaussian_norm();
  if (name == "tanh2") return positive_tanh_sq(param > 0.0 ? param : 1e-6);
  if (name == "head") return head_coordinate();
  if (name == "head2") return head_square();
  if (name == "const") return constant_functional(param > 0.0 ? param : 1.0);
  throw Error(ErrorCode::config, "unknown functional '" + name + "' (tanh, box, gauss, tanh2, head, head2, const)");
}

}  // namespace fsde
