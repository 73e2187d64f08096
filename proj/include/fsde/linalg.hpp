#pragma once

#include <Eigen/Dense>

#include "fsde/error.hpp"

namespace fsde {

// State and noise dimensions are tiny; the fixed upper bound keeps every
// vector and matrix on the stack.
inline constexpr int kMaxDim = 4;

using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxDim, 1>;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxDim, kMaxDim>;

inline Vec zeros(int d) { return Vec::Zero(d); }

inline Vec constant(int d, double c) { return Vec::Constant(d, c); }

inline Vec as_vec(const double* p, int d) {
  Vec v(d);
  for (int i = 0; i < d; ++i) v[i] = p[i];
  return v;
}

// Operator norm (largest singular value).
inline double op_norm(const Mat& m) {
  if (m.size() == 0) return 0.0;
  Eigen::JacobiSVD<Mat> svd(m);
  return svd.singularValues()(0);
}

// Applies Q^*(QQ^*)^{-1} to v via a linear solve of the d x d Gram system.
// Throws singular_diffusion when QQ^* is numerically singular.
inline Vec right_pseudo_solve(const Mat& q, const Vec& v, double max_condition = 1e12) {
  const Mat gram = q * q.transpose();
  Eigen::LDLT<Mat> ldlt(gram);
  const auto diag = ldlt.vectorD();
  const double dmax = diag.cwiseAbs().maxCoeff();
  const double dmin = diag.minCoeff();
  if (ldlt.info() != Eigen::Success || !(dmin > 0.0) || dmax / dmin > max_condition) {
    throw Error(ErrorCode::singular_diffusion, "QQ* is not uniformly invertible");
  }
  const Vec y = ldlt.solve(v);
  return q.transpose() * y;
}

// ||(QQ^*)^{-1}|| in operator norm, i.e. 1 / smallest eigenvalue of QQ^*.
inline double inverse_gram_norm(const Mat& q) {
  const Mat gram = q * q.transpose();
  Eigen::SelfAdjointEigenSolver<Mat> es(gram);
  const double lo = es.eigenvalues().minCoeff();
  return lo > 0.0 ? 1.0 / lo : std::numeric_limits<double>::infinity();
}

}  // namespace fsde
