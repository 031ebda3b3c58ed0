#pragma once

// Primal-dual interior-point solver for
//   min_y  rho(c, C, b, B, M; y)   s.t.  A^T y <= a.
//
// The relaxed KKT system F_mu = 0 is solved by damped Newton steps; the
// Newton direction is obtained from the reduced system built on
//   T = M + C diag(q/s) C^T   and   Omega = B^T T^{-1} B + A diag(w/r) A^T,
// with all other blocks recovered by back substitution. C and A are applied
// as sparse operators so a diagonal T gives the O(n^2 (k + p + n)) iteration.

#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "plqid/plq.hpp"

namespace plqid {

using SparseMat = Eigen::SparseMatrix<double>;

struct Polyhedron {
  MatrixXd A;  // n x p
  VectorXd a;  // p; {y : A^T y <= a}, p = 0 means unconstrained
  Index n() const { return A.rows(); }
  Index p() const { return A.cols(); }
};

inline Polyhedron no_constraints(Index n) {
  return {MatrixXd::Zero(n, 0), VectorXd::Zero(0)};
}

struct InjectivityReport {
  bool injective = false;      // Null(M) ∩ Null(B^T) ∩ Null(C^T) = {0}
  bool strong = false;         // Null(M) ∩ Null(B^T) = {0}
  double sigma_min = 0.0;
  double sigma_max = 0.0;
};

inline InjectivityReport check_injectivity(const PlqRep& rep) {
  InjectivityReport rpt;
  const Index k = rep.k();
  MatrixXd stacked(k + rep.n() + rep.l(), k);
  stacked.topRows(k) = rep.M;
  stacked.middleRows(k, rep.n()) = rep.B.transpose();
  stacked.bottomRows(rep.l()) = rep.C.transpose();
  Eigen::JacobiSVD<MatrixXd> svd(stacked);
  const auto& sv = svd.singularValues();
  rpt.sigma_max = sv(0);
  rpt.sigma_min = sv(sv.size() - 1);
  rpt.injective = rpt.sigma_min > 1e-10 * rpt.sigma_max;

  MatrixXd strong(k + rep.n(), k);
  strong.topRows(k) = rep.M;
  strong.bottomRows(rep.n()) = rep.B.transpose();
  Eigen::JacobiSVD<MatrixXd> svd2(strong);
  const auto& sv2 = svd2.singularValues();
  rpt.strong = sv2(sv2.size() - 1) > 1e-10 * sv2(0);
  return rpt;
}

struct IpState {
  VectorXd q, w, u, y, s, r;
  double mu = 0.0;
  Index N() const { return 2 * q.size() + 2 * w.size() + u.size() + y.size(); }
};

enum class SolveStatus { converged, max_iters, line_search_stall, structure_error };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::converged: return "converged";
    case SolveStatus::max_iters: return "max_iters";
    case SolveStatus::line_search_stall: return "line_search_stall";
    case SolveStatus::structure_error: return "structure_error";
  }
  return "unknown";
}

struct IterRecord {
  double mu;
  double f_norm;            // ||F_mu||_2 before the step
  double step;              // accepted line-search step t
  double newton_rel_resid;  // ||F' d + F_mu|| / (1 + ||F_mu||)
  double wall_ms;
};

struct SolverOptions {
  double tol = 1e-8;
  int max_iters = 200;
  double eta = 0.01;               // sufficient-decrease parameter
  double backtrack = 0.5;
  double boundary_fraction = 0.995;
  double centering = 0.1;          // extra mu multiplier after a full step
  bool keep_trace = false;
};

struct SolveReport {
  VectorXd y_star;
  VectorXd u_star;
  VectorXd w_star;  // constraint multipliers (empty-constraint pad included)
  int iterations = 0;
  double final_mu = 0.0;
  double kkt_residual = 0.0;  // ||F_0||_inf at termination
  double objective = 0.0;
  SolveStatus status = SolveStatus::max_iters;
  double max_newton_rel_resid = 0.0;
  std::vector<IterRecord> trace;
  std::string message;
};

namespace detail {

// Problem blocks with C, A, and M converted to sparse operators.
struct Blocks {
  VectorXd c, b, a;
  MatrixXd B, M;
  SparseMat C, Ct, A, At, Msp;
  bool diag_T = false;     // M diagonal and every column of C touches <= 1 row
  VectorXd Mdiag;
  Index k, l, n, p;

  // Row split of B for forming Omega = B^T T^{-1} B when T is diagonal:
  // nearly-empty rows (the regularizer's identity block) are accumulated as
  // outer products, dense rows (the data block Phi L) go through one GEMM.
  struct SparseRow {
    Index row;
    std::vector<std::pair<Index, double>> nz;
  };
  std::vector<Index> brow_dense;
  MatrixXd Bd;  // the dense rows of B, stacked
  std::vector<SparseRow> brow_sparse;

  Blocks(const PlqRep& rep, const Polyhedron& poly) {
    c = rep.c; b = rep.b; B = rep.B; M = rep.M;
    k = rep.k(); l = rep.l(); n = rep.n();
    MatrixXd Apad = poly.A;
    a = poly.a;
    if (poly.p() == 0) {  // keep the block non-empty: trivial row 0^T y <= 1
      Apad = MatrixXd::Zero(n, 1);
      a = VectorXd::Ones(1);
    }
    p = Apad.cols();
    C = rep.C.sparseView();
    Ct = SparseMat(C.transpose());
    A = Apad.sparseView();
    At = SparseMat(A.transpose());
    Msp = M.sparseView();

    diag_T = true;
    for (Index i = 0; i < k && diag_T; ++i) {
      for (Index j = 0; j < k; ++j) {
        if (i != j && M(i, j) != 0.0) { diag_T = false; break; }
      }
    }
    if (diag_T) {
      std::vector<int> nnz_per_col(l, 0);
      for (int col = 0; col < C.outerSize(); ++col) {
        for (SparseMat::InnerIterator it(C, col); it; ++it) ++nnz_per_col[col];
      }
      for (Index j = 0; j < l; ++j) {
        if (nnz_per_col[j] > 1) { diag_T = false; break; }
      }
    }
    Mdiag = M.diagonal();

    const Index sparse_cap = std::max<Index>(4, n / 8);
    for (Index i = 0; i < k; ++i) {
      Index nnz = 0;
      for (Index j = 0; j < n; ++j) {
        if (B(i, j) != 0.0) ++nnz;
      }
      if (nnz <= sparse_cap) {
        SparseRow sr;
        sr.row = i;
        sr.nz.reserve(static_cast<std::size_t>(nnz));
        for (Index j = 0; j < n; ++j) {
          if (B(i, j) != 0.0) sr.nz.emplace_back(j, B(i, j));
        }
        brow_sparse.push_back(std::move(sr));
      } else {
        brow_dense.push_back(i);
      }
    }
    Bd.resize(static_cast<Index>(brow_dense.size()), n);
    for (Index t = 0; t < static_cast<Index>(brow_dense.size()); ++t) {
      Bd.row(t) = B.row(brow_dense[static_cast<std::size_t>(t)]);
    }
  }
};

// F_mu per the six stacked blocks.
inline VectorXd residual(const Blocks& P, const IpState& st, double mu) {
  VectorXd F(2 * P.l + 2 * P.p + P.k + P.n);
  Index off = 0;
  F.segment(off, P.l) = P.Ct * st.u + st.s - P.c;               off += P.l;
  F.segment(off, P.p) = P.At * st.y + st.r - P.a;               off += P.p;
  F.segment(off, P.k) = P.Msp * st.u + P.C * st.q - P.B * st.y - P.b; off += P.k;
  F.segment(off, P.n) = P.B.transpose() * st.u + P.A * st.w;    off += P.n;
  F.segment(off, P.l) = st.q.cwiseProduct(st.s).array() - mu;   off += P.l;
  F.segment(off, P.p) = st.w.cwiseProduct(st.r).array() - mu;
  return F;
}

// Applies the Jacobian F' at st to a direction (used for fidelity checks).
inline VectorXd apply_jacobian(const Blocks& P, const IpState& st,
                               const IpState& d) {
  VectorXd J(2 * P.l + 2 * P.p + P.k + P.n);
  Index off = 0;
  J.segment(off, P.l) = P.Ct * d.u + d.s;                        off += P.l;
  J.segment(off, P.p) = P.At * d.y + d.r;                        off += P.p;
  J.segment(off, P.k) = P.Msp * d.u + P.C * d.q - P.B * d.y;     off += P.k;
  J.segment(off, P.n) = P.B.transpose() * d.u + P.A * d.w;       off += P.n;
  J.segment(off, P.l) = st.q.cwiseProduct(d.s) + st.s.cwiseProduct(d.q); off += P.l;
  J.segment(off, P.p) = st.w.cwiseProduct(d.r) + st.r.cwiseProduct(d.w);
  return J;
}

// Newton direction from the reduced system; see header comment.
inline IpState newton_step(const Blocks& P, const IpState& st, double mu) {
  const VectorXd F = residual(P, st, mu);
  const VectorXd f1 = F.segment(0, P.l);
  const VectorXd f2 = F.segment(P.l, P.p);
  const VectorXd f3 = F.segment(P.l + P.p, P.k);
  const VectorXd f4 = F.segment(P.l + P.p + P.k, P.n);
  const VectorXd f5 = F.segment(P.l + P.p + P.k + P.n, P.l);
  const VectorXd f6 = F.segment(2 * P.l + P.p + P.k + P.n, P.p);

  // eliminating (ds, dq) from rows 1 and 5 gives
  //   dq = (q/s) (C^T du + f1) - f5 / s,   ds = -f1 - C^T du,
  // so T = M + C diag(q/s) C^T; the (dr, dw) pair is analogous.
  const VectorXd qs = st.q.cwiseQuotient(st.s);   // q_j / s_j
  const VectorXd wr = st.w.cwiseQuotient(st.r);   // w_j / r_j

  const VectorXd h3 =
      -f3 - P.C * (qs.cwiseProduct(f1) - f5.cwiseQuotient(st.s));
  const VectorXd h4 =
      -f4 - P.A * (wr.cwiseProduct(f2) - f6.cwiseQuotient(st.r));

  // T^{-1} applied to a k-vector, and Omega = B^T T^{-1} B. In the diagonal
  // case the GEMM runs over the dense rows of B only; the near-empty rows
  // (identity blocks) are accumulated directly and T^{-1} B is never formed.
  MatrixXd TinvB;   // non-diagonal path only
  VectorXd Dinv;    // diagonal path only
  VectorXd Tinvh3(P.k);
  MatrixXd Omega(P.n, P.n);
  if (P.diag_T) {
    VectorXd Tdiag = P.Mdiag;
    for (int col = 0; col < P.C.outerSize(); ++col) {
      for (SparseMat::InnerIterator it(P.C, col); it; ++it) {
        Tdiag(it.row()) += it.value() * it.value() * qs(col);
      }
    }
    if (Tdiag.minCoeff() <= 0.0) {
      throw std::runtime_error("newton_step: reduced matrix T is singular");
    }
    Dinv = Tdiag.cwiseInverse();
    Tinvh3 = h3.cwiseQuotient(Tdiag);
    VectorXd dvals(static_cast<Index>(P.brow_dense.size()));
    for (Index t = 0; t < dvals.size(); ++t) {
      dvals(t) = Dinv(P.brow_dense[static_cast<std::size_t>(t)]);
    }
    Omega.noalias() = P.Bd.transpose() * dvals.asDiagonal() * P.Bd;
    for (const auto& sr : P.brow_sparse) {
      for (const auto& [j1, v1] : sr.nz) {
        for (const auto& [j2, v2] : sr.nz) {
          Omega(j1, j2) += v1 * v2 * Dinv(sr.row);
        }
      }
    }
  } else {
    MatrixXd T = P.M + P.C * qs.asDiagonal() * MatrixXd(P.Ct);
    Eigen::LDLT<MatrixXd> Tf(T);
    if (Tf.info() != Eigen::Success || !Tf.isPositive()) {
      throw std::runtime_error("newton_step: reduced matrix T is not positive definite");
    }
    TinvB = Tf.solve(P.B);
    Tinvh3 = Tf.solve(h3);
    Omega.noalias() = P.B.transpose() * TinvB;
  }
  // A diag(r/w) A^T accumulated through the sparse structure of A
  for (int col = 0; col < P.A.outerSize(); ++col) {
    for (SparseMat::InnerIterator it1(P.A, col); it1; ++it1) {
      for (SparseMat::InnerIterator it2(P.A, col); it2; ++it2) {
        Omega(it1.row(), it2.row()) += it1.value() * it2.value() * wr(col);
      }
    }
  }
  // Omega is SPD under the injectivity condition, so a plain Cholesky applies
  Eigen::LLT<MatrixXd> Of(Omega);
  if (Of.info() != Eigen::Success) {
    throw std::runtime_error("newton_step: reduced matrix Omega is singular");
  }

  IpState d;
  d.y = Of.solve(h4 - P.B.transpose() * Tinvh3);
  d.u = Tinvh3 + (P.diag_T ? VectorXd(Dinv.cwiseProduct(P.B * d.y))
                           : VectorXd(TinvB * d.y));
  d.q = qs.cwiseProduct(P.Ct * d.u + f1) - f5.cwiseQuotient(st.s);
  d.s = -f1 - P.Ct * d.u;
  d.w = wr.cwiseProduct(P.At * d.y + f2) - f6.cwiseQuotient(st.r);
  d.r = -f2 - P.At * d.y;
  return d;
}

}  // namespace detail

// Public residual: F_mu stacked exactly as in the KKT relaxation.
inline VectorXd residual(const PlqRep& rep, const Polyhedron& poly,
                         const IpState& st) {
  detail::Blocks P(rep, poly);
  if (st.q.size() != P.l || st.w.size() != P.p || st.u.size() != P.k ||
      st.y.size() != P.n || st.s.size() != P.l || st.r.size() != P.p) {
    throw std::invalid_argument("residual: state dimensions do not match problem");
  }
  return detail::residual(P, st, st.mu);
}

inline IpState newton_step(const PlqRep& rep, const Polyhedron& poly,
                           const IpState& st) {
  detail::Blocks P(rep, poly);
  return detail::newton_step(P, st, st.mu);
}

inline SolveReport solve(const PlqRep& rep, const Polyhedron& poly,
                         const SolverOptions& opts = {}) {
  SolveReport rpt;
  const auto inj = check_injectivity(rep);
  if (!inj.injective) {
    rpt.status = SolveStatus::structure_error;
    rpt.message = "injectivity condition Null(M) ∩ Null(B^T) ∩ Null(C^T) = {0} fails";
    return rpt;
  }
  detail::Blocks P(rep, poly);

  IpState st;
  st.y = VectorXd::Zero(P.n);
  st.u = VectorXd::Zero(P.k);
  st.s = P.c.cwiseMax(1.0);
  st.r = P.a.cwiseMax(1.0);
  st.q = VectorXd::Ones(P.l);
  st.w = VectorXd::Ones(P.p);
  st.mu = (st.s.dot(st.q) + st.r.dot(st.w)) / static_cast<double>(P.l + P.p);

  auto kkt_inf_norm = [&](const IpState& x) {
    return detail::residual(P, x, 0.0).lpNorm<Eigen::Infinity>();
  };

  int it = 0;
  for (; it < opts.max_iters; ++it) {
    rpt.kkt_residual = kkt_inf_norm(st);
    if (rpt.kkt_residual <= opts.tol && st.mu <= opts.tol) {
      rpt.status = SolveStatus::converged;
      break;
    }
    const auto t0 = std::chrono::steady_clock::now();
    VectorXd F = detail::residual(P, st, st.mu);
    const double fnorm = F.norm();
    IpState d;
    try {
      d = detail::newton_step(P, st, st.mu);
    } catch (const std::runtime_error& e) {
      rpt.status = SolveStatus::structure_error;
      rpt.message = e.what();
      break;
    }
    const double nres =
        (detail::apply_jacobian(P, st, d) + F).norm() / (1.0 + fnorm);
    rpt.max_newton_rel_resid = std::max(rpt.max_newton_rel_resid, nres);

    // fraction-to-boundary cap on the positive variables; an unblocked
    // direction admits the exact full step t = 1
    double ratio = std::numeric_limits<double>::infinity();
    auto cap = [&ratio](const VectorXd& x, const VectorXd& dx) {
      for (Index i = 0; i < x.size(); ++i) {
        if (dx(i) < 0.0) ratio = std::min(ratio, -x(i) / dx(i));
      }
    };
    cap(st.s, d.s); cap(st.r, d.r); cap(st.q, d.q); cap(st.w, d.w);
    const double t_bound = std::min(1.0, opts.boundary_fraction * ratio);

    double t = -1.0;
    double cand = 1.0;
    IpState trial = st;
    for (int i = 0; i < 60; ++i, cand *= opts.backtrack) {
      if (cand > t_bound) continue;
      trial.q = st.q + cand * d.q;
      trial.w = st.w + cand * d.w;
      trial.u = st.u + cand * d.u;
      trial.y = st.y + cand * d.y;
      trial.s = st.s + cand * d.s;
      trial.r = st.r + cand * d.r;
      if (detail::residual(P, trial, st.mu).norm() <=
          (1.0 - opts.eta * cand) * fnorm) {
        t = cand;
        break;
      }
    }
    if (t < 0.0) {
      rpt.status = SolveStatus::line_search_stall;
      rpt.message = "no acceptable step within 60 backtracks";
      break;
    }
    st.q = trial.q; st.w = trial.w; st.u = trial.u;
    st.y = trial.y; st.s = trial.s; st.r = trial.r;

    double mu_next = (st.s.dot(st.q) + st.r.dot(st.w)) /
                     static_cast<double>(P.l + P.p);
    if (t == 1.0) mu_next *= opts.centering;
    st.mu = mu_next;

    if (opts.keep_trace) {
      const double ms = std::chrono::duration<double, std::milli>(
                            std::chrono::steady_clock::now() - t0).count();
      rpt.trace.push_back({st.mu, fnorm, t, nres, ms});
    }
  }
  if (it == opts.max_iters) {
    rpt.kkt_residual = kkt_inf_norm(st);
    rpt.status = (rpt.kkt_residual <= opts.tol && st.mu <= opts.tol)
                     ? SolveStatus::converged
                     : SolveStatus::max_iters;
  }
  rpt.iterations = it;
  rpt.final_mu = st.mu;
  rpt.y_star = st.y;
  rpt.u_star = st.u;
  rpt.w_star = st.w;
  // objective from the dual value at the solution
  rpt.objective = st.u.dot(rep.b + rep.B * st.y) - 0.5 * st.u.dot(rep.M * st.u);
  return rpt;
}

}  // namespace plqid
