#pragma once

// Test-only reference implementations, kept independent of the library's
// solution paths: closed-form scalar penalties, an entrywise KKT residual,
// a dense full-system Jacobian, and an exact-penalty Newton reference
// minimizer for tiny constrained problems.

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "plqid/estimator.hpp"
#include "plqid/ipsolver.hpp"
#include "plqid/plq.hpp"
#include "plqid/rng.hpp"

namespace oracle {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// --- closed-form scalar penalties --------------------------------------------

inline double l2(double y) { return 0.5 * y * y; }
inline double l1(double y) { return std::abs(y); }
inline double huber(double kappa, double y) {
  const double a = std::abs(y);
  return a <= kappa ? 0.5 * y * y : kappa * a - 0.5 * kappa * kappa;
}
inline double vapnik(double eps, double y) {
  return std::max(y - eps, 0.0) + std::max(-y - eps, 0.0);
}

inline double sum_scalar(const std::function<double(double)>& rho,
                         const VectorXd& y) {
  double v = 0.0;
  for (Index i = 0; i < y.size(); ++i) v += rho(y(i));
  return v;
}

// --- entrywise residual -------------------------------------------------------

// Duplicate of F_mu written coordinate by coordinate from the formula.
inline VectorXd residual_entrywise(const plqid::PlqRep& rep,
                                   const plqid::Polyhedron& poly,
                                   const plqid::IpState& st) {
  const Index l = rep.l(), p = poly.p(), k = rep.k(), n = rep.n();
  VectorXd F(2 * l + 2 * p + k + n);
  Index off = 0;
  for (Index j = 0; j < l; ++j) {
    double v = st.s(j) - rep.c(j);
    for (Index i = 0; i < k; ++i) v += rep.C(i, j) * st.u(i);
    F(off++) = v;
  }
  for (Index j = 0; j < p; ++j) {
    double v = st.r(j) - poly.a(j);
    for (Index i = 0; i < n; ++i) v += poly.A(i, j) * st.y(i);
    F(off++) = v;
  }
  for (Index i = 0; i < k; ++i) {
    double v = -rep.b(i);
    for (Index j = 0; j < k; ++j) v += rep.M(i, j) * st.u(j);
    for (Index j = 0; j < l; ++j) v += rep.C(i, j) * st.q(j);
    for (Index j = 0; j < n; ++j) v -= rep.B(i, j) * st.y(j);
    F(off++) = v;
  }
  for (Index i = 0; i < n; ++i) {
    double v = 0.0;
    for (Index j = 0; j < k; ++j) v += rep.B(j, i) * st.u(j);
    for (Index j = 0; j < p; ++j) v += poly.A(i, j) * st.w(j);
    F(off++) = v;
  }
  for (Index j = 0; j < l; ++j) F(off++) = st.q(j) * st.s(j) - st.mu;
  for (Index j = 0; j < p; ++j) F(off++) = st.w(j) * st.r(j) - st.mu;
  return F;
}

// --- dense full Jacobian -------------------------------------------------------

inline MatrixXd dense_jacobian(const plqid::PlqRep& rep,
                               const plqid::Polyhedron& poly,
                               const plqid::IpState& st) {
  const Index l = rep.l(), p = poly.p(), k = rep.k(), n = rep.n();
  const Index N = 2 * l + 2 * p + k + n;
  MatrixXd J = MatrixXd::Zero(N, N);
  // ordering (q, w, u, y, s, r)
  const Index oq = 0, ow = l, ou = l + p, oy = l + p + k, os = l + p + k + n,
              orr = 2 * l + p + k + n;
  J.block(0, ou, l, k) = rep.C.transpose();
  J.block(0, os, l, l) = MatrixXd::Identity(l, l);
  J.block(l, oy, p, n) = poly.A.transpose();
  J.block(l, orr, p, p) = MatrixXd::Identity(p, p);
  J.block(l + p, oq, k, l) = rep.C;
  J.block(l + p, ou, k, k) = rep.M;
  J.block(l + p, oy, k, n) = -rep.B;
  J.block(l + p + k, ow, n, p) = poly.A;
  J.block(l + p + k, ou, n, k) = rep.B.transpose();
  J.block(os, oq, l, l) = st.s.asDiagonal();
  J.block(os, os, l, l) = st.q.asDiagonal();
  J.block(orr, ow, p, p) = st.r.asDiagonal();
  J.block(orr, orr, p, p) = st.w.asDiagonal();
  return J;
}

// MLCP block matrix of the KKT system (the 4x4 block operator).
inline MatrixXd mlcp_matrix(const plqid::PlqRep& rep,
                            const plqid::Polyhedron& poly) {
  const Index l = rep.l(), p = poly.p(), k = rep.k(), n = rep.n();
  const Index N = l + p + k + n;
  MatrixXd K = MatrixXd::Zero(N, N);
  K.block(0, l + p, l, k) = -rep.C.transpose();
  K.block(l, l + p + k, p, n) = -poly.A.transpose();
  K.block(l + p, 0, k, l) = rep.C;
  K.block(l + p, l + p, k, k) = rep.M;
  K.block(l + p, l + p + k, k, n) = -rep.B;
  K.block(l + p + k, l, n, p) = poly.A;
  K.block(l + p + k, l + p, n, k) = rep.B.transpose();
  return K;
}

// --- exact-penalty reference minimizer (tiny problems only) --------------------
//
// Minimizes f(y) + beta * sum max(0, A^T y - a) with every nonsmooth piece
// replaced by a tightly smoothed version, using damped Newton from several
// starts. Independent of the PLQ dual representation and of the IP path.

struct SmoothProblem {
  // value, gradient and (generalized) Hessian of the smoothed objective
  std::function<double(const VectorXd&)> value;
  std::function<VectorXd(const VectorXd&)> grad;
  std::function<MatrixXd(const VectorXd&)> hess;
};

// smoothed |t| with width w
inline double sabs(double t, double w) {
  const double a = std::abs(t);
  return a <= w ? 0.5 * t * t / w + 0.5 * w : a;
}
inline double sabs_d(double t, double w) {
  return std::abs(t) <= w ? t / w : (t > 0 ? 1.0 : -1.0);
}
inline double sabs_dd(double t, double w) { return std::abs(t) <= w ? 1.0 / w : 0.0; }

// smoothed max(t, 0)
inline double spos(double t, double w) {
  if (t <= 0.0) return 0.0;
  if (t >= w) return t - 0.5 * w;
  return 0.5 * t * t / w;
}
inline double spos_d(double t, double w) {
  if (t <= 0.0) return 0.0;
  if (t >= w) return 1.0;
  return t / w;
}
inline double spos_dd(double t, double w) { return (t > 0.0 && t < w) ? 1.0 / w : 0.0; }

struct ReferenceResult {
  VectorXd y;
  double objective;
};

// Minimizes loss(G y - h) + gamma ||y||^2 subject to A^T y <= a by
// enumerating candidate active sets: for each subset S of constraints the
// equality-restricted problem is solved by damped Newton on a lightly
// smoothed objective, and the best feasible candidate wins. With gamma > 0
// the objective is strictly convex, so the subset matching the true active
// set recovers the exact constrained minimizer.
inline ReferenceResult reference_minimize(const plqid::LossSpec& loss,
                                          const MatrixXd& G, const VectorXd& h,
                                          double gamma,
                                          const plqid::Polyhedron& poly,
                                          double final_width = 1e-8) {
  using plqid::LossKind;
  const Index n = G.cols();

  // continuation on the smoothing width: a sharp kink makes the Newton model
  // useless across it, so each stage warm starts the next, tighter one
  double width = 1e-2;

  auto loss_val = [&](double t) {
    switch (loss.kind) {
      case LossKind::l2: return t * t;
      case LossKind::l1: return sabs(t, width);
      case LossKind::huber: return huber(loss.kappa, t);
      case LossKind::vapnik:
        return spos(t - loss.epsilon, width) + spos(-t - loss.epsilon, width);
    }
    return 0.0;
  };
  auto loss_d = [&](double t) {
    switch (loss.kind) {
      case LossKind::l2: return 2.0 * t;
      case LossKind::l1: return sabs_d(t, width);
      case LossKind::huber:
        return std::abs(t) <= loss.kappa ? t : (t > 0 ? loss.kappa : -loss.kappa);
      case LossKind::vapnik:
        return spos_d(t - loss.epsilon, width) - spos_d(-t - loss.epsilon, width);
    }
    return 0.0;
  };
  auto loss_dd = [&](double t) {
    switch (loss.kind) {
      case LossKind::l2: return 2.0;
      case LossKind::l1: return sabs_dd(t, width);
      case LossKind::huber: return std::abs(t) <= loss.kappa ? 1.0 : 0.0;
      case LossKind::vapnik:
        return spos_dd(t - loss.epsilon, width) + spos_dd(-t - loss.epsilon, width);
    }
    return 0.0;
  };

  auto value = [&](const VectorXd& y) {
    const VectorXd res = G * y - h;
    double v = gamma * y.squaredNorm();
    for (Index i = 0; i < res.size(); ++i) v += loss_val(res(i));
    return v;
  };
  auto grad = [&](const VectorXd& y) {
    const VectorXd res = G * y - h;
    VectorXd g = 2.0 * gamma * y;
    for (Index i = 0; i < res.size(); ++i) g += loss_d(res(i)) * G.row(i).transpose();
    return g;
  };
  auto hess = [&](const VectorXd& y) {
    const VectorXd res = G * y - h;
    MatrixXd H = 2.0 * gamma * MatrixXd::Identity(n, n);
    for (Index i = 0; i < res.size(); ++i) {
      const double d2 = loss_dd(res(i));
      if (d2 != 0.0) H += d2 * G.row(i).transpose() * G.row(i);
    }
    return H;
  };
  // exact objective (no smoothing), for the final report
  auto exact_value = [&](const VectorXd& y) {
    const VectorXd res = G * y - h;
    double v = gamma * y.squaredNorm();
    for (Index i = 0; i < res.size(); ++i) {
      switch (loss.kind) {
        case LossKind::l2: v += res(i) * res(i); break;
        case LossKind::l1: v += std::abs(res(i)); break;
        case LossKind::huber: v += huber(loss.kappa, res(i)); break;
        case LossKind::vapnik: v += vapnik(loss.epsilon, res(i)); break;
      }
    }
    return v;
  };

  const Index p = poly.p();
  if (p > 16) throw std::invalid_argument("reference_minimize: too many constraints");

  // damped Newton for min over { y = y0 + Z v : v } at the current width
  auto newton_stage = [&](const VectorXd& y0, const MatrixXd& Z, VectorXd v) {
    for (int iter = 0; iter < 500; ++iter) {
      const VectorXd y = y0 + Z * v;
      const VectorXd g = Z.transpose() * grad(y);
      if (g.lpNorm<Eigen::Infinity>() < 1e-13 * (1.0 + std::abs(value(y)))) break;
      MatrixXd H = Z.transpose() * hess(y) * Z;
      H.diagonal().array() += 1e-14 * (1.0 + H.norm());
      VectorXd step = -H.ldlt().solve(g);
      if (!step.allFinite() || step.dot(g) >= 0.0) step = -g;
      const double v0 = value(y);
      bool moved = false;
      for (double t = 1.0; t > 1e-16; t *= 0.5) {
        if (value(y0 + Z * (v + t * step)) < v0 - 1e-16 * std::abs(v0)) {
          v += t * step;
          moved = true;
          break;
        }
      }
      if (!moved) break;
    }
    return v;
  };
  auto minimize_affine = [&](const VectorXd& y0, const MatrixXd& Z) {
    VectorXd v = VectorXd::Zero(Z.cols());
    for (double w : {1e-2, 1e-4, 1e-6, final_width}) {
      width = w;
      v = newton_stage(y0, Z, v);
    }
    return VectorXd(y0 + Z * v);
  };

  ReferenceResult best;
  best.objective = std::numeric_limits<double>::infinity();
  const double feas_tol = 1e-7 * (1.0 + poly.a.cwiseAbs().maxCoeff());
  for (unsigned mask = 0; mask < (1u << p); ++mask) {
    // equality-restrict the constraints in the subset
    std::vector<Index> active;
    for (Index j = 0; j < p; ++j) {
      if (mask & (1u << j)) active.push_back(j);
    }
    VectorXd y0 = VectorXd::Zero(n);
    MatrixXd Z = MatrixXd::Identity(n, n);
    if (!active.empty()) {
      MatrixXd As(active.size(), n);
      VectorXd as(active.size());
      for (size_t i = 0; i < active.size(); ++i) {
        As.row(i) = poly.A.col(active[i]).transpose();
        as(i) = poly.a(active[i]);
      }
      Eigen::CompleteOrthogonalDecomposition<MatrixXd> cod(As);
      y0 = cod.solve(as);
      if ((As * y0 - as).lpNorm<Eigen::Infinity>() > 1e-9) continue;  // inconsistent
      Eigen::FullPivLU<MatrixXd> lu(As);
      Z = lu.kernel();
      if (Z.cols() == 0) Z = MatrixXd::Zero(n, 0);
    }
    const VectorXd y = Z.cols() > 0 ? minimize_affine(y0, Z) : y0;
    if (p > 0 &&
        ((poly.A.transpose() * y - poly.a).array() > feas_tol).any()) {
      continue;
    }
    const double val = exact_value(y);
    if (val < best.objective) {
      best.objective = val;
      best.y = y;
    }
  }
  if (!best.y.size()) {
    throw std::runtime_error("reference_minimize: no feasible candidate found");
  }
  return best;
}

// random helpers
inline VectorXd random_vector(plqid::Rng& rng, Index n, double scale = 1.0) {
  VectorXd v(n);
  for (Index i = 0; i < n; ++i) v(i) = scale * rng.normal();
  return v;
}

inline MatrixXd random_matrix(plqid::Rng& rng, Index rows, Index cols,
                              double scale = 1.0) {
  MatrixXd m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  return m;
}

}  // namespace oracle
