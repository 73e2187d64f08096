#pragma once

#include <algorithm>
#include <cstdio>
#include <limits>
#include <cmath>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "fsde/error.hpp"
#include "fsde/linalg.hpp"
#include "fsde/mild_solver.hpp"
#include "fsde/model.hpp"
#include "fsde/parallel.hpp"
#include "fsde/rng.hpp"
#include "fsde/stats.hpp"

namespace fsde {

//---------------------------------------------------------------------------//
// Quadrature and interpolation primitives
//---------------------------------------------------------------------------//

// Probabilists' Gauss-Hermite rule: E f(N(0,1)) ~ sum w_i f(x_i).
// Golub-Welsch on the Jacobi matrix of the Hermite recurrence.
struct GaussHermite {
  std::vector<double> nodes;
  std::vector<double> weights;

  explicit GaussHermite(int order) {
    require(order >= 1, ErrorCode::domain, "Gauss-Hermite order must be >= 1");
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(order, order);
    for (int k = 1; k < order; ++k) jac(k, k - 1) = jac(k - 1, k) = std::sqrt(static_cast<double>(k));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(jac);
    for (int i = 0; i < order; ++i) {
      nodes.push_back(es.eigenvalues()(i));
      weights.push_back(es.eigenvectors()(0, i) * es.eigenvectors()(0, i));
    }
  }
};

// Uniform axis lo + i dx, i = 0..n-1.
struct Axis {
  double lo = 0.0;
  double dx = 1.0;
  int n = 0;

  double node(int i) const { return lo + dx * i; }
  double hi() const { return node(n - 1); }
  bool contains(double x) const { return x >= lo && x <= hi(); }

  // Catmull-Rom stencil at x (clamped into the axis): four indices with
  // weights; reproduces polynomials up to degree two away from the edges.
  void stencil(double x, int idx[4], double w[4]) const {
    const double xc = std::clamp(x, lo, hi());
    int i = static_cast<int>(std::floor((xc - lo) / dx));
    i = std::clamp(i, 0, n - 2);
    const double t = (xc - node(i)) / dx;
    const double t2 = t * t;
    const double t3 = t2 * t;
    w[0] = 0.5 * (-t3 + 2 * t2 - t);
    w[1] = 0.5 * (3 * t3 - 5 * t2 + 2);
    w[2] = 0.5 * (-3 * t3 + 4 * t2 + t);
    w[3] = 0.5 * (t3 - t2);
    for (int k = 0; k < 4; ++k) idx[k] = std::clamp(i - 1 + k, 0, n - 1);
  }
};

// Tensor grid [lo, hi]^d with the same axis in every direction; point index
// p = i_0 + n i_1.
struct XGrid {
  int d = 1;
  Axis axis;

  int points() const { return d == 1 ? axis.n : axis.n * axis.n; }
  Vec point(int p) const {
    Vec x(d);
    x[0] = axis.node(p % axis.n);
    if (d == 2) x[1] = axis.node(p / axis.n);
    return x;
  }
  bool contains(const Vec& x) const {
    for (int i = 0; i < d; ++i)
      if (!axis.contains(x[i])) return false;
    return true;
  }

  double interp(const double* f, const Vec& x) const {
    int i0[4], i1[4];
    double w0[4], w1[4];
    axis.stencil(x[0], i0, w0);
    if (d == 1) return w0[0] * f[i0[0]] + w0[1] * f[i0[1]] + w0[2] * f[i0[2]] + w0[3] * f[i0[3]];
    axis.stencil(x[1], i1, w1);
    double acc = 0.0;
    for (int b = 0; b < 4; ++b) {
      const double* row = f + static_cast<std::ptrdiff_t>(i1[b]) * axis.n;
      acc += w1[b] * (w0[0] * row[i0[0]] + w0[1] * row[i0[1]] + w0[2] * row[i0[2]] + w0[3] * row[i0[3]]);
    }
    return acc;
  }

  // Adds weight * (interpolation stencil of x) into a dense accumulator.
  template <class Add>
  void scatter(const Vec& x, double weight, Add&& add) const {
    int i0[4], i1[4];
    double w0[4], w1[4];
    axis.stencil(x[0], i0, w0);
    if (d == 1 || x.size() < 2) {
      for (int a = 0; a < 4; ++a) add(i0[a], weight * w0[a]);
      return;
    }
    axis.stencil(x[1], i1, w1);
    for (int b = 0; b < 4; ++b)
      for (int a = 0; a < 4; ++a) add(i0[a] + i1[b] * axis.n, weight * w0[a] * w1[b]);
  }

  // Central differences along direction `dir` (one-sided at the edges).
  void gradient(const double* f, int dir, double* out) const {
    const int n = axis.n;
    const int stride = dir == 0 ? 1 : n;
    for (int p = 0; p < points(); ++p) {
      const int i = dir == 0 ? p % n : p / n;
      if (i == 0) {
        out[p] = (f[p + stride] - f[p]) / axis.dx;
      } else if (i == n - 1) {
        out[p] = (f[p] - f[p - stride]) / axis.dx;
      } else {
        out[p] = (f[p + stride] - f[p - stride]) / (2.0 * axis.dx);
      }
    }
  }
};

//---------------------------------------------------------------------------//
// OU kernel
//---------------------------------------------------------------------------//

// Law of Z(t) for dZ = AZ dt + Q dW, Z(s) = x: N(e^{A tau} x, Sigma(tau)),
// Sigma_ij = (QQ^*)_ij (1 - e^{-(l_i + l_j) tau}) / (l_i + l_j).
struct OuKernel {
  Vec decay;
  Mat chol;  // lower Cholesky factor of Sigma(tau)
  Mat sigma;
};

inline OuKernel ou_kernel(const OperatorA& A, const Mat& q, double tau) {
  const int d = A.dim();
  OuKernel k{Vec(d), Mat::Zero(d, d), Mat::Zero(d, d)};
  const Mat qq = q * q.transpose();
  for (int i = 0; i < d; ++i) {
    k.decay[i] = std::exp(-A.rate(i) * tau);
    for (int j = 0; j < d; ++j) {
      const double l = A.rate(i) + A.rate(j);
      k.sigma(i, j) = qq(i, j) * (l == 0.0 ? tau : -std::expm1(-l * tau) / l);
    }
  }
  if (tau > 0.0) {
    Eigen::LLT<Mat> llt(k.sigma);
    require(llt.info() == Eigen::Success, ErrorCode::singular_diffusion, "OU covariance is not positive definite");
    k.chol = llt.matrixL();
  }
  return k;
}

// Sparse one-step operator g -> P_tau g on the grid, one CSR row per point.
struct SparseOp {
  std::vector<int> row_ptr;
  std::vector<int> col;
  std::vector<double> val;

  void apply(const double* in, double* out) const {
    const int rows = static_cast<int>(row_ptr.size()) - 1;
    for (int r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (int k = row_ptr[r]; k < row_ptr[r + 1]; ++k) acc += val[static_cast<std::size_t>(k)] * in[col[static_cast<std::size_t>(k)]];
      out[r] = acc;
    }
  }
};

inline SparseOp build_ou_operator(const XGrid& g, const OperatorA& A, const Mat& q, double tau, int gh_order) {
  const auto ker = ou_kernel(A, q, tau);
  const GaussHermite gh(gh_order);
  const int npts = g.points();
  SparseOp op;
  op.row_ptr.reserve(static_cast<std::size_t>(npts) + 1);
  op.row_ptr.push_back(0);
  std::vector<double> dense(static_cast<std::size_t>(npts), 0.0);
  std::vector<int> touched;
  auto add = [&](int c, double w) {
    if (dense[static_cast<std::size_t>(c)] == 0.0) touched.push_back(c);
    dense[static_cast<std::size_t>(c)] += w;
    if (dense[static_cast<std::size_t>(c)] == 0.0) dense[static_cast<std::size_t>(c)] = 1e-300;
  };
  const int m = gh_order;
  for (int p = 0; p < npts; ++p) {
    const Vec x = g.point(p);
    const Vec mean = ker.decay.cwiseProduct(x);
    if (g.d == 1) {
      for (int a = 0; a < m; ++a) {
        Vec y(1);
        y[0] = mean[0] + ker.chol(0, 0) * gh.nodes[static_cast<std::size_t>(a)];
        g.scatter(y, gh.weights[static_cast<std::size_t>(a)], add);
      }
    } else {
      for (int a = 0; a < m; ++a) {
        for (int b = 0; b < m; ++b) {
          Vec zeta(2);
          zeta << gh.nodes[static_cast<std::size_t>(a)], gh.nodes[static_cast<std::size_t>(b)];
          const Vec y = mean + ker.chol * zeta;
          g.scatter(y, gh.weights[static_cast<std::size_t>(a)] * gh.weights[static_cast<std::size_t>(b)], add);
        }
      }
    }
    std::sort(touched.begin(), touched.end());
    for (int c : touched) {
      op.col.push_back(c);
      op.val.push_back(dense[static_cast<std::size_t>(c)]);
      dense[static_cast<std::size_t>(c)] = 0.0;
    }
    touched.clear();
    op.row_ptr.push_back(static_cast<int>(op.col.size()));
  }
  return op;
}

// P^0_{s,t} g(x) for tabulated g: Gauss-Hermite over the OU law with
// Catmull-Rom interpolation of g. The box must cover mean +- 6 std.
inline double ou_apply(const OperatorA& A, const Mat& q, const XGrid& g, const double* values, double s, double t,
                       const Vec& x, int gh_order = 20) {
  require(t >= s, ErrorCode::domain, "ou_apply needs t >= s");
  require(gh_order >= 20, ErrorCode::domain, "Gauss-Hermite order must be >= 20 per axis");
  if (t == s) return g.interp(values, x);
  const auto ker = ou_kernel(A, q, t - s);
  const Vec mean = ker.decay.cwiseProduct(x);
  for (int i = 0; i < g.d; ++i) {
    const double sd = std::sqrt(ker.sigma(i, i));
    if (mean[i] - 6 * sd < g.axis.lo || mean[i] + 6 * sd > g.axis.hi()) {
      throw Error(ErrorCode::coverage, "tabulation box does not cover the OU mass (mean +- 6 std)");
    }
  }
  const GaussHermite gh(gh_order);
  double acc = 0.0;
  const int m = gh_order;
  if (g.d == 1) {
    for (int a = 0; a < m; ++a) {
      Vec y(1);
      y[0] = mean[0] + ker.chol(0, 0) * gh.nodes[static_cast<std::size_t>(a)];
      acc += gh.weights[static_cast<std::size_t>(a)] * g.interp(values, y);
    }
    return acc;
  }
  for (int a = 0; a < m; ++a) {
    for (int b = 0; b < m; ++b) {
      Vec zeta(2);
      zeta << gh.nodes[static_cast<std::size_t>(a)], gh.nodes[static_cast<std::size_t>(b)];
      acc += gh.weights[static_cast<std::size_t>(a)] * gh.weights[static_cast<std::size_t>(b)] *
             g.interp(values, mean + ker.chol * zeta);
    }
  }
  return acc;
}

//---------------------------------------------------------------------------//
// Regularizing fixed point
//---------------------------------------------------------------------------//

struct ZvonkinConfig {
  double ds = 1.0 / 256.0;      // target s-grid step
  double dx = 0.02;             // x-grid spacing
  double box_half_width = 0.0;  // 0: 6 stationary std + initial range + drift offset
  double initial_range = 2.0;
  double tol = 1e-9;
  int max_iter = 300;
  int gh_order = 20;
};

// Tabulated solution u of the regularizing equation on [0, T] x box, with its
// finite-difference gradient. u(s, .) = u(0, .) for s < 0.
struct RegularizedDrift {
  double lambda = 0.0;
  double T = 0.0;
  int d = 1;
  XGrid grid;
  int ns = 0;  // number of s-steps
  double ds = 0.0;
  // u[i][c * npts + p] and grad[i][(c * d + k) * npts + p] = d_k u_c
  std::vector<std::vector<double>> u;
  std::vector<std::vector<double>> grad;
  double sup_u = 0.0;
  double sup_grad = 0.0;
  double sup_hess = 0.0;
  std::vector<double> sup_changes;  // |u^{k+1} - u^k|_inf per Picard iteration
  int iterations = 0;
  double residual = 0.0;  // |Phi(u) - u|_inf of the returned u

  int npts() const { return grid.points(); }
  bool accepted() const { return sup_grad <= 0.5; }

  // Largest successive ratio of sup-changes (0 with fewer than two changes).
  double contraction() const {
    double r = 0.0;
    for (std::size_t k = 1; k < sup_changes.size(); ++k)
      if (sup_changes[k - 1] > 0.0) r = std::max(r, sup_changes[k] / sup_changes[k - 1]);
    return r;
  }

  Vec u_at(double s, const Vec& x) const {
    const auto [i, w] = bracket(s);
    Vec out(d);
    for (int c = 0; c < d; ++c) out[c] = mix(u, i, w, c, x);
    return out;
  }
  Mat grad_at(double s, const Vec& x) const {
    const auto [i, w] = bracket(s);
    Mat out(d, d);
    for (int c = 0; c < d; ++c)
      for (int k = 0; k < d; ++k) out(c, k) = mix(grad, i, w, c * d + k, x);
    return out;
  }

 private:
  // Linear in s between slices i and i + 1 with weight w on i + 1.
  std::pair<int, double> bracket(double s) const {
    require(s <= T * (1.0 + 1e-12) + 1e-12, ErrorCode::out_of_range, "time beyond the tabulated window of u");
    const double q = std::clamp(s, 0.0, T) / ds;
    const int i = std::min(static_cast<int>(q), ns - 1);
    return {i, q - i};
  }
  double mix(const std::vector<std::vector<double>>& tab, int i, double w, int block, const Vec& x) const {
    const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(block) * npts();
    const double a = grid.interp(tab[static_cast<std::size_t>(i)].data() + off, x);
    if (w == 0.0) return a;
    const double b = grid.interp(tab[static_cast<std::size_t>(i) + 1].data() + off, x);
    return a + w * (b - a);
  }
};

namespace detail {

inline double stationary_std(const OperatorA& A, const Mat& q) {
  const Mat qq = q * q.transpose();
  double s = 0.0;
  for (int i = 0; i < A.dim(); ++i) s = std::max(s, std::sqrt(qq(i, i) / (2.0 * A.rate(i))));
  return s;
}

// Operator norm of the d x d gradient block at grid point p of one slice.
inline double grad_norm_at(const std::vector<double>& g, int d, int npts, int p) {
  Mat m(d, d);
  for (int c = 0; c < d; ++c)
    for (int k = 0; k < d; ++k) m(c, k) = g[static_cast<std::size_t>((c * d + k) * npts + p)];
  return op_norm(m);
}

}  // namespace detail

inline XGrid make_box(const ModelSpec& m, const ZvonkinConfig& cfg) {
  require(m.d == 1 || m.d == 2, ErrorCode::unsupported_model, "the u-solver supports d in {1, 2}");
  require(m.A.negative_definite(), ErrorCode::unsupported_model, "the u-solver needs -A > 0");
  require(cfg.dx > 0.0, ErrorCode::domain, "dx must be positive");
  double L = cfg.box_half_width;
  if (L <= 0.0) {
    double rate_min = m.A.rate(0);
    for (int i = 1; i < m.d; ++i) rate_min = std::min(rate_min, m.A.rate(i));
    const Mat q = m.diffusion(0.0, zeros(m.d));
    L = 6.0 * detail::stationary_std(m.A, q) + cfg.initial_range + 3.0 * m.bounds.b_sup / rate_min;
  }
  XGrid g;
  g.d = m.d;
  g.axis.n = static_cast<int>(std::ceil(2.0 * L / cfg.dx)) + 1;
  g.axis.lo = -L;
  g.axis.dx = 2.0 * L / (g.axis.n - 1);
  require(g.axis.n >= 8, ErrorCode::domain, "x-grid too coarse");
  return g;
}

/*!
 * Picard iteration for u(s) = int_s^T e^{-lambda(t-s)} P0_{s,t}(grad u b + b)(t) dt
 * with u^0 = 0.
 *
 * The composite trapezoid sum on the s-grid is evaluated by the backward
 * recursion U_i = (ds/2) g_i + e^{-lambda ds} P_ds [U_{i+1} + (ds/2) g_{i+1}],
 * U_N = 0, which reproduces it exactly through P_a P_b = P_{a+b}; only the
 * one-step kernel P_ds is ever discretized.
 */
inline RegularizedDrift solve_u(const ModelSpec& m, double lambda, double T, const ZvonkinConfig& cfg = {}) {
  require(lambda > 0.0 && std::isfinite(lambda), ErrorCode::domain, "lambda must be positive");
  require(T > 0.0, ErrorCode::domain, "T must be positive");
  require(m.constant_diffusion, ErrorCode::unsupported_model, "the u-solver needs a constant diffusion");
  require(cfg.tol > 0.0 && cfg.max_iter >= 1, ErrorCode::domain, "tol and max_iter must be positive");
  RegularizedDrift r;
  r.lambda = lambda;
  r.T = T;
  r.d = m.d;
  r.grid = make_box(m, cfg);
  r.ns = std::max(1, static_cast<int>(std::ceil(T / cfg.ds - 1e-9)));
  r.ds = T / r.ns;
  const int d = m.d;
  const int np = r.npts();
  const std::size_t slice = static_cast<std::size_t>(d) * static_cast<std::size_t>(np);
  const Mat q = m.diffusion(0.0, zeros(d));
  const SparseOp P = build_ou_operator(r.grid, m.A, q, r.ds, cfg.gh_order);
  const double decay = std::exp(-lambda * r.ds);
  const double half = 0.5 * r.ds;

  std::vector<std::vector<double>> bval(static_cast<std::size_t>(r.ns) + 1, std::vector<double>(slice));
  bool zero_b = true;
  for (int i = 0; i <= r.ns; ++i) {
    for (int p = 0; p < np; ++p) {
      const Vec bv = m.drift(i * r.ds, r.grid.point(p));
      for (int c = 0; c < d; ++c) {
        bval[static_cast<std::size_t>(i)][static_cast<std::size_t>(c * np + p)] = bv[c];
        zero_b = zero_b && bv[c] == 0.0;
      }
    }
  }

  std::vector<std::vector<double>> u(static_cast<std::size_t>(r.ns) + 1, std::vector<double>(slice, 0.0));
  std::vector<double> gbuf(static_cast<std::size_t>(d * d * np));
  std::vector<double> gnext(slice), gcur(slice), V(slice), PV(slice);

  // g = grad u . b + b on one slice of the given iterate
  auto source = [&](const std::vector<double>& us, const std::vector<double>& bs, std::vector<double>& g) {
    for (int c = 0; c < d; ++c)
      for (int k = 0; k < d; ++k) r.grid.gradient(us.data() + c * np, k, gbuf.data() + (c * d + k) * np);
    for (int c = 0; c < d; ++c) {
      for (int p = 0; p < np; ++p) {
        double acc = bs[static_cast<std::size_t>(c * np + p)];
        for (int k = 0; k < d; ++k)
          acc += gbuf[static_cast<std::size_t>((c * d + k) * np + p)] * bs[static_cast<std::size_t>(k * np + p)];
        g[static_cast<std::size_t>(c * np + p)] = acc;
      }
    }
  };
  // One application of the fixed-point map: out = Phi(in); returns |out - in|_inf.
  auto sweep = [&](const std::vector<std::vector<double>>& in, std::vector<std::vector<double>>& out) {
    double change = 0.0;
    std::fill(out[static_cast<std::size_t>(r.ns)].begin(), out[static_cast<std::size_t>(r.ns)].end(), 0.0);
    source(in[static_cast<std::size_t>(r.ns)], bval[static_cast<std::size_t>(r.ns)], gnext);
    for (int i = r.ns - 1; i >= 0; --i) {
      const auto& next = out[static_cast<std::size_t>(i) + 1];
      for (std::size_t j = 0; j < slice; ++j) V[j] = next[j] + half * gnext[j];
      for (int c = 0; c < d; ++c) P.apply(V.data() + c * np, PV.data() + c * np);
      source(in[static_cast<std::size_t>(i)], bval[static_cast<std::size_t>(i)], gcur);
      auto& cur = out[static_cast<std::size_t>(i)];
      const auto& old = in[static_cast<std::size_t>(i)];
      for (std::size_t j = 0; j < slice; ++j) {
        cur[j] = decay * PV[j] + half * gcur[j];
        change = std::max(change, std::abs(cur[j] - old[j]));
      }
      std::swap(gnext, gcur);
    }
    return change;
  };

  if (!zero_b) {
    auto next = u;
    int rising = 0;
    bool converged = false;
    for (int k = 0; k < cfg.max_iter; ++k) {
      const double change = sweep(u, next);
      std::swap(u, next);
      r.sup_changes.push_back(change);
      ++r.iterations;
      require(std::isfinite(change), ErrorCode::divergence, "Picard iteration overflowed; increase lambda");
      if (change < cfg.tol) {
        converged = true;
        break;
      }
      const std::size_t n = r.sup_changes.size();
      rising = n >= 2 && change >= r.sup_changes[n - 2] ? rising + 1 : 0;
      if (rising >= 3) {
        throw Error(ErrorCode::divergence, "Picard iteration is not contracting at lambda = " + std::to_string(lambda) +
                                               "; increase lambda");
      }
    }
    require(converged, ErrorCode::divergence,
            "Picard iteration did not reach tol in " + std::to_string(cfg.max_iter) + " iterations");
    r.residual = sweep(u, next);
  } else {
    r.iterations = 1;
    r.sup_changes.push_back(0.0);
  }
  r.u = std::move(u);

  // gradient tables and sup norms; the Hessian sup skips two edge cells where
  // one-sided differences of one-sided differences are not second-order
  r.grad.assign(static_cast<std::size_t>(r.ns) + 1, std::vector<double>(static_cast<std::size_t>(d * d * np)));
  std::vector<double> hess(static_cast<std::size_t>(np));
  const int n = r.grid.axis.n;
  auto interior = [&](int p) {
    const int i0 = p % n;
    const int i1 = d == 2 ? p / n : 2;
    return i0 >= 2 && i0 < n - 2 && i1 >= 2 && i1 < n - 2;
  };
  for (int i = 0; i <= r.ns; ++i) {
    const auto& us = r.u[static_cast<std::size_t>(i)];
    auto& gs = r.grad[static_cast<std::size_t>(i)];
    for (int c = 0; c < d; ++c)
      for (int k = 0; k < d; ++k) r.grid.gradient(us.data() + c * np, k, gs.data() + (c * d + k) * np);
    for (int p = 0; p < np; ++p) {
      double un = 0.0;
      for (int c = 0; c < d; ++c) un += us[static_cast<std::size_t>(c * np + p)] * us[static_cast<std::size_t>(c * np + p)];
      r.sup_u = std::max(r.sup_u, std::sqrt(un));
      r.sup_grad = std::max(r.sup_grad, detail::grad_norm_at(gs, d, np, p));
    }
    for (int blk = 0; blk < d * d; ++blk) {
      for (int k = 0; k < d; ++k) {
        r.grid.gradient(gs.data() + blk * np, k, hess.data());
        for (int p = 0; p < np; ++p)
          if (interior(p)) r.sup_hess = std::max(r.sup_hess, std::abs(hess[static_cast<std::size_t>(p)]));
      }
    }
  }
  return r;
}

inline Vec theta(double t, const Vec& x, const RegularizedDrift& u) { return x + u.u_at(t, x); }

// Solves y = x + u(t, x) by x_{k+1} = y - u(t, x_k).
inline Vec theta_inverse(double t, const Vec& y, const RegularizedDrift& u) {
  require(u.accepted(), ErrorCode::precondition, "theta_inverse needs |grad u| <= 1/2");
  if (!u.grid.contains(y)) throw Error(ErrorCode::box_escape, "point outside the tabulation box of u");
  Vec x = y;
  for (int k = 0; k < 200; ++k) {
    const Vec r = x + u.u_at(t, x) - y;
    if (r.cwiseAbs().maxCoeff() <= 1e-12) return x;
    x -= r;
    if (!u.grid.contains(x)) throw Error(ErrorCode::box_escape, "inverse transform left the tabulation box of u");
  }
  throw Error(ErrorCode::divergence, "theta_inverse did not converge");
}

//---------------------------------------------------------------------------//
// Transformed system
//---------------------------------------------------------------------------//

struct TransformedModel {
  ModelSpec model;
  std::shared_ptr<const RegularizedDrift> u;
  // measured constants of the transformed coefficients
  double q_sup = 0.0;
  double inv_gram = 0.0;
  double lip_q = 0.0;
  double lip_b = 0.0;
  double K = 0.0;  // max of the four
};

namespace detail {

// Single-entry per-thread memo of theta_inverse: the solver asks for the
// mapped head and then for Q at the same point.
struct InverseMemo {
  const RegularizedDrift* owner = nullptr;
  double t = std::numeric_limits<double>::quiet_NaN();
  Vec y;
  Vec x;
};

inline Vec memo_inverse(double t, const Vec& y, const RegularizedDrift& u) {
  thread_local InverseMemo memo;
  if (memo.owner == &u && memo.t == t && memo.y.size() == y.size() && memo.y == y) return memo.x;
  Vec x = theta_inverse(t, y, u);
  memo.owner = &u;
  memo.t = t;
  memo.y = y;
  memo.x = x;
  return x;
}

}  // namespace detail

namespace detail {

// max |B~(xi) - B~(eta)| / |xi - eta|_nu over random segments inside the box;
// every other pair is a small perturbation.
inline double sampled_delay_lipschitz(const ModelSpec& t, const DelayMeasure& nu, const RegularizedDrift& u,
                                      std::uint64_t seed, int pairs = 400) {
  const int d = t.d;
  const long n = nu.cells();
  const UniformStream U(seed ^ 0x5DEECE66DULL);
  const double L = u.grid.axis.hi();
  double lip = 0.0;
  for (int k = 0; k < pairs; ++k) {
    const std::uint64_t base = static_cast<std::uint64_t>(k) * static_cast<std::uint64_t>((n + 2) * d + 2);
    const double s = std::max(nu.r0(), 0.0) + (u.T - nu.r0() > 0.0 ? U(base, 0) * (u.T - nu.r0()) : 0.0);
    std::vector<double> xv(static_cast<std::size_t>((n + 1) * d)), yv(xv.size());
    for (long j = 0; j <= n; ++j) {
      for (int i = 0; i < d; ++i) {
        const std::uint64_t idx = base + static_cast<std::uint64_t>(j * d + i) + 1;
        const double c = 0.25 * L * (2.0 * U(idx, 1) - 1.0);
        const double x = c + 0.25 * L * (2.0 * U(idx, 2) - 1.0);
        const double y = k % 2 ? x + 1e-3 * (2.0 * U(idx, 3) - 1.0) : 0.5 * L * (2.0 * U(idx, 3) - 1.0);
        xv[static_cast<std::size_t>(j * d + i)] = x;
        yv[static_cast<std::size_t>(j * d + i)] = y;
      }
    }
    const Segment xi(n, d, std::move(xv));
    const Segment eta(n, d, std::move(yv));
    const double dist = seg_distance(nu, xi.view(), eta.view());
    if (dist == 0.0) continue;
    const Vec diff = t.delay_raw(s, nu, xi.view()) - t.delay_raw(s, nu, eta.view());
    lip = std::max(lip, diff.norm() / dist);
  }
  return lip;
}

}  // namespace detail

/*!
 * Coefficients of the equation solved by Theta(t, X(t)):
 *   Q~(t, x)  = (I + grad u) Q at z = Theta^{-1}(t, x),
 *   B~(t, xi) = A z + lambda u(t, z) + (I + grad u(t, z)) B(t, Theta_t^{-1} xi),
 * z = Theta^{-1}(t, xi(0)). The linear part is absorbed into B~, so the
 * returned model has zero rates, no b, and the history map Theta^{-1}.
 */
inline TransformedModel transformed_model(const ModelSpec& m, const DelayMeasure& nu,
                                          std::shared_ptr<const RegularizedDrift> up, std::uint64_t seed = 1) {
  require(up != nullptr, ErrorCode::precondition, "no tabulated u");
  const RegularizedDrift& u = *up;
  require(u.accepted(), ErrorCode::precondition,
          "u is not accepted: |grad u| = " + std::to_string(u.sup_grad) + " > 1/2; increase lambda");
  require(m.constant_diffusion && m.d == u.d, ErrorCode::unsupported_model, "model does not match the tabulated u");
  const int d = m.d;
  const Mat q0 = m.diffusion(0.0, zeros(d));
  const double lambda = u.lambda;
  const OperatorA A = m.A;

  TransformedModel out;
  out.u = up;
  ModelSpec& t = out.model;
  t = m;
  t.name = m.name + "/transformed";
  t.A = OperatorA::scalar(d, 0.0);
  t.b = [d](double, const Vec&) { return zeros(d); };
  t.zero_drift = true;
  t.constant_diffusion = false;
  t.growth.reset();
  t.truncation = std::numeric_limits<double>::infinity();
  t.history_map = [up](double s, const Vec& x) { return detail::memo_inverse(std::max(s, 0.0), x, *up); };
  t.Q = [up, q0](double s, const Vec& x) {
    const Vec z = detail::memo_inverse(s, x, *up);
    return ((Mat::Identity(x.size(), x.size()) + up->grad_at(s, z)) * q0).eval();
  };
  auto head_terms = [up, A, lambda](double s, const Vec& z, const Vec& b_orig) {
    return (A.apply(z) + lambda * up->u_at(s, z) + (Mat::Identity(z.size(), z.size()) + up->grad_at(s, z)) * b_orig).eval();
  };
  const DelayFn B0 = m.B;
  const bool no_delay = m.zero_delay;
  t.B = [B0, head_terms, no_delay, d](double s, const DelayArgs& a) {
    const Vec z = a.mapped.head();
    const Vec bo = no_delay ? zeros(d) : B0(s, DelayArgs{a.mapped, a.mapped});
    return head_terms(s, z, bo);
  };
  if (m.B_nu || m.zero_delay) {
    const NuDelayFn Bn = m.B_nu;
    t.B_nu = [Bn, head_terms, no_delay, d](double s, const Vec& nu_value, const Vec& z) {
      return head_terms(s, z, no_delay ? zeros(d) : Bn(s, nu_value, z));
    };
  } else {
    t.B_nu = nullptr;
  }
  t.zero_delay = false;

  // sup |Q~| and |(Q~Q~*)^{-1}| over the tabulation
  const int np = u.npts();
  for (int i = 0; i <= u.ns; ++i) {
    for (int p = 0; p < np; ++p) {
      Mat g(d, d);
      for (int c = 0; c < d; ++c)
        for (int k = 0; k < d; ++k) g(c, k) = u.grad[static_cast<std::size_t>(i)][static_cast<std::size_t>((c * d + k) * np + p)];
      const Mat qt = (Mat::Identity(d, d) + g) * q0;
      out.q_sup = std::max(out.q_sup, op_norm(qt));
      out.inv_gram = std::max(out.inv_gram, inverse_gram_norm(qt));
    }
  }
  // sampled difference quotients; half of the pairs are close
  const UniformStream U(seed);
  const double lo = u.grid.axis.lo;
  const double span = u.grid.axis.hi() - lo;
  auto draw = [&](std::uint64_t idx, std::uint32_t slot, double a, double w) { return a + w * U(idx, slot); };
  for (std::uint64_t k = 0; k < 2000; ++k) {
    const double s = draw(k, 0, 0.0, u.T);
    Vec x(d), y(d);
    for (int i = 0; i < d; ++i) {
      x[i] = draw(k, 1 + i, lo + 0.1 * span, 0.8 * span);
      y[i] = k % 2 ? x[i] + draw(k, 3 + i, -1e-3, 2e-3) * span : draw(k, 3 + i, lo + 0.1 * span, 0.8 * span);
    }
    const double dxy = (x - y).norm();
    if (dxy == 0.0) continue;
    out.lip_q = std::max(out.lip_q, op_norm(t.Q(s, x) - t.Q(s, y)) / dxy);
  }
  out.lip_b = detail::sampled_delay_lipschitz(t, nu, u, seed);
  out.K = std::max({out.q_sup, out.inv_gram, out.lip_q, out.lip_b});
  return out;
}

// (Theta_0 xi)(theta) = Theta(theta, xi(theta)) with u(theta) = u(0) for theta < 0.
inline Segment transform_segment(const Segment& xi, const RegularizedDrift& u) {
  const int d = xi.dim();
  std::vector<double> v(xi.values().begin(), xi.values().end());
  for (long j = 0; j <= xi.cells(); ++j) {
    const Vec y = theta(0.0, xi.at(j), u);
    for (int i = 0; i < d; ++i) v[static_cast<std::size_t>(j * d + i)] = y[i];
  }
  return Segment(xi.cells(), d, std::move(v));
}

//---------------------------------------------------------------------------//
// Decay in lambda
//---------------------------------------------------------------------------//

struct DecayRow {
  double lambda = 0.0;
  double sup_u = 0.0;
  double sup_grad = 0.0;
  double sup_hess = 0.0;
  int iterations = 0;
  double contraction = 0.0;
  double residual = 0.0;
};

struct DecayReport {
  std::vector<DecayRow> rows;
  bool monotone_u = true;
  bool monotone_grad = true;
  bool monotone_hess = true;
  std::optional<double> lambda_star;  // smallest listed lambda with |grad u| <= 1/2
  double contraction_at_star = 0.0;

  bool pass() const {
    return monotone_u && monotone_grad && monotone_hess && lambda_star.has_value() && contraction_at_star < 1.0;
  }
};

inline DecayReport verify_decay(const ModelSpec& m, const std::vector<double>& lambdas, double T,
                                const ZvonkinConfig& cfg = {}) {
  require(lambdas.size() >= 4, ErrorCode::domain, "verify_decay needs at least four lambda values");
  require(std::is_sorted(lambdas.begin(), lambdas.end()) &&
              std::adjacent_find(lambdas.begin(), lambdas.end()) == lambdas.end(),
          ErrorCode::domain, "lambda list must be strictly increasing");
  DecayReport rep;
  for (double lam : lambdas) {
    const auto u = solve_u(m, lam, T, cfg);
    DecayRow row{lam, u.sup_u, u.sup_grad, u.sup_hess, u.iterations, u.contraction(), u.residual};
    if (!rep.rows.empty()) {
      const auto& prev = rep.rows.back();
      auto le = [](double a, double b) { return a <= b * (1.0 + 1e-12) + 1e-15; };
      rep.monotone_u = rep.monotone_u && le(row.sup_u, prev.sup_u);
      rep.monotone_grad = rep.monotone_grad && le(row.sup_grad, prev.sup_grad);
      rep.monotone_hess = rep.monotone_hess && le(row.sup_hess, prev.sup_hess);
    }
    if (!rep.lambda_star && u.accepted()) {
      rep.lambda_star = lam;
      rep.contraction_at_star = row.contraction;
    }
    rep.rows.push_back(row);
  }
  return rep;
}

struct TransformGap {
  double h = 0.0;
  double mean_max = 0.0;  // mean over paths of max_t |X(t) - Theta^{-1}(t, X~(t))|
  double stderr_ = 0.0;
};

// X by the configured scheme on m, X~ by Euler-Maruyama on the transformed
// model, driven by the same increments.
inline TransformGap transform_gap(const ModelSpec& m, const TransformedModel& tm, const DelayMeasure& nu,
                                  const Segment& xi, SolverConfig cfg, std::size_t n, std::uint64_t seed,
                                  int workers = 1) {
  require(n >= 2, ErrorCode::domain, "transform_gap needs at least two paths");
  SolverConfig ct = cfg;
  ct.scheme = Scheme::euler_maruyama;
  const PathIntegrator X(m, nu, cfg), Xt(tm.model, nu, ct);
  const auto& u = *tm.u;
  const auto xt = transform_segment(xi, u);
  std::vector<double> gap(n);
  parallel_for(n, workers, [&](std::size_t i) {
    const auto a = X.solve(xi, seed, i);
    const auto b = Xt.solve(xt, seed, i);
    require(!a.lifetime && !b.lifetime, ErrorCode::explosion_before_horizon, "path left the simulation range");
    double mx = 0.0;
    for (long k = 0; k <= a.n_done; ++k)
      mx = std::max(mx, (a.state(k) - theta_inverse(static_cast<double>(k) * cfg.h, b.state(k), u)).norm());
    gap[i] = mx;
  });
  const auto e = estimate_mean(gap);
  return {cfg.h, e.mean, e.stderr_};
}

// Columns: s, x_0[, x_1], u_0[, u_1], du_00[, du_01, du_10, du_11].
inline void write_u_csv(std::ostream& os, const RegularizedDrift& u) {
  const int d = u.d;
  os << "s";
  for (int i = 0; i < d; ++i) os << ",x" << i;
  for (int i = 0; i < d; ++i) os << ",u" << i;
  for (int c = 0; c < d; ++c)
    for (int k = 0; k < d; ++k) os << ",du" << c << k;
  os << '\n';
  const int np = u.npts();
  char buf[32];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, ",%.17g", v);
    os << buf;
  };
  for (int i = 0; i <= u.ns; ++i) {
    for (int p = 0; p < np; ++p) {
      std::snprintf(buf, sizeof buf, "%.17g", i * u.ds);
      os << buf;
      const Vec x = u.grid.point(p);
      for (int c = 0; c < d; ++c) put(x[c]);
      for (int c = 0; c < d; ++c) put(u.u[static_cast<std::size_t>(i)][static_cast<std::size_t>(c * np + p)]);
      for (int b = 0; b < d * d; ++b) put(u.grad[static_cast<std::size_t>(i)][static_cast<std::size_t>(b * np + p)]);
      os << '\n';
    }
  }
}

}  // namespace fsde
