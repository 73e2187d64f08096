#pragma once

#include <cmath>
#include <numeric>
#include <span>
#include <vector>

namespace fsde {

struct MeanEstimate {
  double mean = 0.0;
  double stderr_ = 0.0;
  double variance = 0.0;
  std::size_t n = 0;
};

// Two-pass sample mean / unbiased variance, summed in index order.
inline MeanEstimate estimate_mean(std::span<const double> xs) {
  MeanEstimate e;
  e.n = xs.size();
  if (e.n == 0) return e;
  double sum = 0.0;
  for (double x : xs) sum += x;
  e.mean = sum / static_cast<double>(e.n);
  if (e.n < 2) return e;
  double ss = 0.0;
  for (double x : xs) ss += (x - e.mean) * (x - e.mean);
  e.variance = ss / static_cast<double>(e.n - 1);
  e.stderr_ = std::sqrt(e.variance / static_cast<double>(e.n));
  return e;
}

// Self-normalized importance estimate sum(w f) / sum(w) with delta-method
// standard error.
inline MeanEstimate self_normalized(std::span<const double> weights, std::span<const double> values) {
  MeanEstimate e;
  e.n = values.size();
  double sw = 0.0;
  double swf = 0.0;
  for (std::size_t i = 0; i < e.n; ++i) {
    sw += weights[i];
    swf += weights[i] * values[i];
  }
  e.mean = swf / sw;
  double acc = 0.0;
  for (std::size_t i = 0; i < e.n; ++i) {
    const double r = weights[i] * (values[i] - e.mean);
    acc += r * r;
  }
  e.stderr_ = std::sqrt(acc) / sw;
  e.variance = e.stderr_ * e.stderr_ * static_cast<double>(e.n);
  return e;
}

// Kish effective sample size (sum w)^2 / sum w^2.
inline double effective_sample_size(std::span<const double> weights) {
  double s = 0.0;
  double s2 = 0.0;
  for (double w : weights) {
    s += w;
    s2 += w * w;
  }
  return s2 > 0.0 ? s * s / s2 : 0.0;
}

inline double combined_stderr(double a, double b) { return std::sqrt(a * a + b * b); }

// Least-squares slope of y against x.
inline double regression_slope(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxy / sxx;
}

}  // namespace fsde
