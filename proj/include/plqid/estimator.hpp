#pragma once

// Assembly of identification problems (loss on residuals + stable spline
// regularizer + polyhedral constraints), constraint builders, and
// hyperparameter estimation (noise variance, marginal likelihood, CV).

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "plqid/ipsolver.hpp"
#include "plqid/kernel.hpp"
#include "plqid/plq.hpp"

namespace plqid {

enum class LossKind { l2, l1, huber, vapnik };

struct LossSpec {
  LossKind kind = LossKind::l2;
  double kappa = 1.0;    // huber
  double epsilon = 0.1;  // vapnik
};

// V on the residual space, matching the squared-norm convention of the
// quadratic estimator: l2 gives ||.||^2 (not half of it).
inline PlqRep make_loss(const LossSpec& spec, Index m) {
  switch (spec.kind) {
    case LossKind::l2: return scale(lift_scalar(make_l2(), m), 2.0);
    case LossKind::l1: return lift_scalar(make_l1(), m);
    case LossKind::huber: return lift_scalar(make_huber(spec.kappa), m);
    case LossKind::vapnik: return lift_scalar(make_vapnik(spec.epsilon), m);
  }
  throw std::invalid_argument("make_loss: unknown loss kind");
}

// W(y) = ||y||^2 on the whitened coordinates.
inline PlqRep make_regularizer(Index n) {
  return scale(lift_scalar(make_l2(), n), 2.0);
}

struct IdentProblem {
  RegressionModel model;
  StableSplineKernel kernel;
  MatrixXd L;          // Q = L L^T
  PlqRep loss;         // on residual space, primal dim m
  PlqRep regularizer;  // on y, primal dim n
  double gamma = 1.0;
  Polyhedron constraints;  // on y (already composed with L when stated on x)
};

struct Hyperparams {
  double alpha = 0.0;
  double lambda = 0.0;
  double sigma2 = 0.0;
  double gamma = 0.0;
  bool lambda_at_grid_edge = false;  // tuner pinned lambda at a grid endpoint
};

namespace detail {
// Affine composition without the injectivity precondition: the assembled
// rep's B = [Phi L; I] is injective through the regularizer block even when
// Phi is wide.
inline PlqRep compose_affine_nocheck(const PlqRep& rep, const MatrixXd& E,
                                     const VectorXd& e) {
  PlqRep out = rep;
  out.b = rep.b + rep.B * e;
  out.B = rep.B * E;
  return out;
}
}  // namespace detail

// Single rep whose evaluate equals V(Phi L y - z) + gamma W(y).
inline std::pair<PlqRep, Polyhedron> assemble(const IdentProblem& prob) {
  if (prob.loss.n() != prob.model.m()) {
    throw std::invalid_argument("assemble: loss dimension != m");
  }
  if (prob.regularizer.n() != prob.model.n()) {
    throw std::invalid_argument("assemble: regularizer dimension != n");
  }
  if (!(prob.gamma > 0.0)) throw std::invalid_argument("assemble: gamma must be > 0");
  const MatrixXd PhiL = prob.model.Phi * prob.L;
  PlqRep rep = add(detail::compose_affine_nocheck(prob.loss, PhiL, -prob.model.z),
                   scale(prob.regularizer, prob.gamma));
  const auto inj = check_injectivity(rep);
  if (!inj.injective) {
    throw std::runtime_error("assemble: assembled rep fails the injectivity condition");
  }
  return {std::move(rep), prob.constraints};
}

// --- constraint builders (all stated on x = L y, mapped to y) ---------------

// x >= 0: A^T = -I L, a = 0.
inline Polyhedron constraints_nonneg(Index n, const MatrixXd& L) {
  Polyhedron poly;
  poly.A = -L.transpose();
  poly.a = VectorXd::Zero(n);
  return poly;
}

// Discrete derivative: lower-triangular Toeplitz, first column [1, -1, 0, ...].
inline MatrixXd difference_matrix(Index n) {
  MatrixXd D = MatrixXd::Identity(n, n);
  for (Index i = 1; i < n; ++i) D(i, i - 1) = -1.0;
  return D;
}

// Nonnegative, nondecreasing through index k (1-based), nonincreasing after:
// A^T = [-D_1^k; D_{k+1}^n; -I] L, a = 0.
inline Polyhedron constraints_unimodal(Index n, const MatrixXd& L, Index k) {
  if (k < 1 || k > n) throw std::invalid_argument("constraints_unimodal: k out of range");
  const MatrixXd D = difference_matrix(n);
  MatrixXd At(2 * n, n);
  At.topRows(k) = -D.topRows(k);
  At.middleRows(k, n - k) = D.bottomRows(n - k);
  At.bottomRows(n) = -MatrixXd::Identity(n, n);
  Polyhedron poly;
  poly.A = (At * L).transpose();
  poly.a = VectorXd::Zero(2 * n);
  return poly;
}

// Alternating-sign difference constraints of orders 0..k on x = L y.
// Rows touching the zero-padded boundary are dropped so that positive
// completely monotonic sequences remain feasible.
inline Polyhedron constraints_complete_monotone(Index n, const MatrixXd& L,
                                                Index k) {
  if (k < 1) throw std::invalid_argument("constraints_complete_monotone: k must be >= 1");
  const MatrixXd D = difference_matrix(n);
  std::vector<MatrixXd> blocks;
  blocks.push_back(-MatrixXd::Identity(n, n));  // x >= 0
  MatrixXd Dl = MatrixXd::Identity(n, n);
  double sign = 1.0;  // + D^1, - D^2, + D^3, ...
  for (Index l = 1; l <= k && l < n; ++l) {
    Dl = D * Dl;
    blocks.push_back(sign * Dl.bottomRows(n - l));
    sign = -sign;
  }
  Index rows = 0;
  for (const auto& blk : blocks) rows += blk.rows();
  MatrixXd At(rows, n);
  Index off = 0;
  for (const auto& blk : blocks) {
    At.middleRows(off, blk.rows()) = blk;
    off += blk.rows();
  }
  Polyhedron poly;
  poly.A = (At * L).transpose();
  poly.a = VectorXd::Zero(rows);
  return poly;
}

// --- hyperparameter estimation ----------------------------------------------

// sigma^2 from an unregularized least-squares FIR of order p.
inline double estimate_sigma2(const RegressionModel& model, Index p) {
  const Index m = model.m();
  if (p < 1) throw std::invalid_argument("estimate_sigma2: p must be >= 1");
  if (m <= p) throw std::invalid_argument("estimate_sigma2: need m > p");
  MatrixXd Phip = model.Phi.leftCols(std::min(p, model.n()));
  if (Phip.cols() < p) {
    throw std::invalid_argument("estimate_sigma2: FIR order exceeds regressor width");
  }
  Eigen::ColPivHouseholderQR<MatrixXd> qr(Phip);
  if (qr.rank() < p) {
    throw std::runtime_error(
        "estimate_sigma2: rank-deficient normal equations; try a smaller p");
  }
  VectorXd theta = qr.solve(model.z);
  const double sse = (model.z - Phip * theta).squaredNorm();
  return sse / static_cast<double>(m - p);
}

inline std::vector<double> alpha_grid() {
  std::vector<double> A = {0.01};
  for (double a = 0.05; a < 0.951; a += 0.05) A.push_back(a);
  A.push_back(0.99);
  return A;
}

inline std::vector<double> log_grid(double lo, double hi, int count) {
  std::vector<double> g(count);
  const double llo = std::log10(lo), lhi = std::log10(hi);
  for (int i = 0; i < count; ++i) {
    g[i] = std::pow(10.0, llo + (lhi - llo) * i / double(count - 1));
  }
  return g;
}

namespace detail {
// Marginal likelihood objective for all lambdas at fixed alpha via one
// eigendecomposition of Phi Q Phi^T.
struct MlAlphaCache {
  VectorXd evals;   // eigenvalues of Phi Q(alpha) Phi^T
  VectorXd zproj2;  // squared components of V^T z
  double objective(double lambda, double sigma2) const {
    double val = 0.0;
    for (Index i = 0; i < evals.size(); ++i) {
      const double d = std::max(lambda * evals(i), 0.0) + sigma2;
      val += zproj2(i) / d + std::log(d);
    }
    return val;
  }
};

inline MlAlphaCache ml_cache(const RegressionModel& model, KernelFamily family,
                             double alpha) {
  const MatrixXd Q = gram({family, alpha}, model.n());
  MatrixXd G = model.Phi * Q * model.Phi.transpose();
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(G);
  MlAlphaCache cache;
  cache.evals = es.eigenvalues();
  VectorXd zp = es.eigenvectors().transpose() * model.z;
  cache.zproj2 = zp.cwiseProduct(zp);
  return cache;
}
}  // namespace detail

// Empirical Bayes tuning: grid minimization of z^T Sigma^{-1} z + log det Sigma
// over (lambda, alpha), Sigma = lambda Phi Q(alpha) Phi^T + sigma2 I, followed
// by a coordinate-refinement pass halving the grid spacing twice.
inline Hyperparams ml_tune(const RegressionModel& model, KernelFamily family,
                           double sigma2) {
  if (!(sigma2 > 0.0)) throw std::invalid_argument("ml_tune: sigma2 must be > 0");
  const auto alphas = alpha_grid();
  const double anchor = model.z.squaredNorm() / static_cast<double>(model.m());
  const auto lambdas = log_grid(anchor * 1e-3, anchor * 1e3, 25);

  double best = std::numeric_limits<double>::infinity();
  double best_alpha = alphas.front(), best_lambda = lambdas.front();
  for (double a : alphas) {
    const auto cache = detail::ml_cache(model, family, a);
    for (double lam : lambdas) {
      const double v = cache.objective(lam, sigma2);
      if (v < best) { best = v; best_alpha = a; best_lambda = lam; }
    }
  }

  double da = 0.05, dl = std::log10(lambdas[1] / lambdas[0]);
  for (int round = 0; round < 2; ++round) {
    da *= 0.5;
    for (double a : {best_alpha - da, best_alpha + da}) {
      if (a <= 0.0 || a >= 1.0) continue;
      const auto cache = detail::ml_cache(model, family, a);
      const double v = cache.objective(best_lambda, sigma2);
      if (v < best) { best = v; best_alpha = a; }
    }
    dl *= 0.5;
    const auto cache = detail::ml_cache(model, family, best_alpha);
    for (double lam : {best_lambda * std::pow(10.0, -dl),
                       best_lambda * std::pow(10.0, dl)}) {
      const double v = cache.objective(lam, sigma2);
      if (v < best) { best = v; best_lambda = lam; }
    }
  }

  Hyperparams hp;
  hp.alpha = best_alpha;
  hp.lambda = best_lambda;
  hp.sigma2 = sigma2;
  hp.lambda_at_grid_edge =
      best_lambda <= lambdas.front() || best_lambda >= lambdas.back();
  return hp;
}

// gamma = sigma^2 / lambda for the quadratic loss; the Laplacian-noise MAP
// correspondence gives sigma^2 / (2 sqrt(2) lambda) for the L1 loss.
inline double gamma_from(const Hyperparams& hp, LossKind loss) {
  if (!(hp.lambda > 0.0) || !(hp.sigma2 > 0.0)) {
    throw std::invalid_argument("gamma_from: lambda, sigma2 must be > 0");
  }
  const double base = hp.sigma2 / hp.lambda;
  if (loss == LossKind::l1) return base / (2.0 * std::sqrt(2.0));
  return base;
}

// Unconstrained quadratic-loss estimate in closed form:
// x_hat = lambda Q Phi^T Sigma^{-1} z.
inline VectorXd closed_form_l2(const RegressionModel& model,
                               const StableSplineKernel& kernel,
                               const Hyperparams& hp) {
  const MatrixXd Q = gram({kernel.family, hp.alpha}, model.n());
  MatrixXd Sigma = hp.lambda * model.Phi * Q * model.Phi.transpose();
  Sigma.diagonal().array() += hp.sigma2;
  Eigen::LLT<MatrixXd> llt(Sigma);
  if (llt.info() != Eigen::Success) {
    throw std::runtime_error("closed_form_l2: Sigma is not positive definite");
  }
  return hp.lambda * Q * model.Phi.transpose() * llt.solve(model.z);
}

// Solves the assembled problem and maps back to impulse-response coordinates.
struct FitResult {
  VectorXd x;
  SolveReport report;
};

inline FitResult fit_problem(const IdentProblem& prob,
                             const SolverOptions& opts = {}) {
  auto [rep, poly] = assemble(prob);
  FitResult res;
  res.report = solve(rep, poly, opts);
  if (res.report.status != SolveStatus::converged) {
    res.x = VectorXd::Zero(prob.model.n());
    if (res.report.y_star.size() == prob.model.n()) {
      res.x = prob.L * res.report.y_star;
    }
    return res;
  }
  res.x = prob.L * res.report.y_star;
  return res;
}

// Cross-validation over the standard (alpha, gamma) grids: first-half train,
// second-half validation; squared errors for quadratic losses, absolute for L1.
inline Hyperparams cv_tune(const RegressionModel& model, KernelFamily family,
                           const LossSpec& loss, double gamma_center,
                           const SolverOptions& opts = {}) {
  const Index m = model.m();
  if (m < 4) throw std::invalid_argument("cv_tune: need m >= 4");
  if (!(gamma_center > 0.0)) throw std::invalid_argument("cv_tune: gamma_center must be > 0");
  const Index mt = m / 2;
  RegressionModel train{model.Phi.topRows(mt), model.z.head(mt)};
  const MatrixXd Phi_val = model.Phi.bottomRows(m - mt);
  const VectorXd z_val = model.z.tail(m - mt);

  const auto alphas = alpha_grid();
  const auto gammas = log_grid(gamma_center / 100.0, gamma_center * 100.0, 50);

  double best_score = std::numeric_limits<double>::infinity();
  double best_alpha = alphas.front(), best_gamma = gammas.front();
  bool any_ok = false;
  for (double a : alphas) {
    const MatrixXd Q = gram({family, a}, model.n());
    const MatrixXd L = factorize(Q);
    for (double g : gammas) {
      IdentProblem prob;
      prob.model = train;
      prob.kernel = {family, a};
      prob.L = L;
      prob.loss = make_loss(loss, mt);
      prob.regularizer = make_regularizer(model.n());
      prob.gamma = g;
      prob.constraints = no_constraints(model.n());
      FitResult fr;
      try {
        fr = fit_problem(prob, opts);
      } catch (const std::exception&) {
        continue;  // point skipped
      }
      if (fr.report.status != SolveStatus::converged) continue;
      const VectorXd err = z_val - Phi_val * fr.x;
      const double score = (loss.kind == LossKind::l1)
                               ? err.lpNorm<1>()
                               : err.squaredNorm();
      any_ok = true;
      if (score < best_score) { best_score = score; best_alpha = a; best_gamma = g; }
    }
  }
  if (!any_ok) throw std::runtime_error("cv_tune: every grid point failed");
  Hyperparams hp;
  hp.alpha = best_alpha;
  hp.gamma = best_gamma;
  return hp;
}

namespace detail {

// Cached pieces of f(y) = 1/2 (b + By)^T M^{-1} (b + By), valid when the
// dual domain is free (every column of C is zero and c >= 0) and M is
// positive definite -- the pure quadratic case (L2 loss + L2 regularizer).
struct QuadraticForm {
  Eigen::LLT<MatrixXd> Hllt;  // H = B^T M^{-1} B
  VectorXd g0;                // gradient at y = 0: B^T M^{-1} b
  bool ok = false;
};

inline QuadraticForm quadratic_form(const PlqRep& rep) {
  QuadraticForm qf;
  if (rep.l() > 0) {
    if (rep.C.lpNorm<Eigen::Infinity>() != 0.0) return qf;
    if ((rep.c.array() < 0.0).any()) return qf;
  }
  Eigen::LLT<MatrixXd> Mllt(rep.M);
  if (Mllt.info() != Eigen::Success) return qf;
  const MatrixXd MinvB = Mllt.solve(rep.B);
  qf.Hllt.compute(rep.B.transpose() * MinvB);
  if (qf.Hllt.info() != Eigen::Success) return qf;
  qf.g0 = MinvB.transpose() * rep.b;
  qf.ok = true;
  return qf;
}

// Active-set refinement of a converged interior-point iterate for the
// quadratic case: starting from the constraints active at y0, exchange
// working-set members until the KKT conditions hold to machine precision,
// which recovers the exact constrained minimizer. Returns nullopt when the
// exchange loop fails to settle; the caller keeps the interior-point iterate.
inline std::optional<VectorXd> polish_quadratic(const QuadraticForm& qf,
                                                const Polyhedron& poly,
                                                const VectorXd& y0) {
  if (!qf.ok) return std::nullopt;
  const Index ell = poly.a.size();
  const double scale = 1.0 + y0.lpNorm<Eigen::Infinity>();
  const double act_tol = 1e-7 * scale;
  const double feas_tol = 1e-10 * scale;
  const double dual_tol = 1e-10;

  std::vector<char> active(static_cast<std::size_t>(ell), 0);
  if (ell > 0) {
    const VectorXd slack = poly.a - poly.A.transpose() * y0;
    for (Index i = 0; i < ell; ++i) {
      active[static_cast<std::size_t>(i)] = slack(i) <= act_tol ? 1 : 0;
    }
  }

  const int max_passes = 8 + 4 * static_cast<int>(ell);
  for (int pass = 0; pass < max_passes; ++pass) {
    std::vector<Index> W;
    for (Index i = 0; i < ell; ++i) {
      if (active[static_cast<std::size_t>(i)]) W.push_back(i);
    }
    VectorXd y, nu(static_cast<Index>(W.size()));
    if (W.empty()) {
      y = qf.Hllt.solve(-qf.g0);
    } else {
      const Index nw = static_cast<Index>(W.size());
      MatrixXd Aw(poly.A.rows(), nw);
      VectorXd aw(nw);
      for (Index j = 0; j < nw; ++j) {
        Aw.col(j) = poly.A.col(W[static_cast<std::size_t>(j)]);
        aw(j) = poly.a(W[static_cast<std::size_t>(j)]);
      }
      const MatrixXd HinvA = qf.Hllt.solve(Aw);
      const VectorXd Hinvg = qf.Hllt.solve(qf.g0);
      // Schur system for the multipliers; redundant active rows (the
      // unimodal set repeats the first nonnegativity row) make it singular,
      // so take the least-norm multiplier, which keeps duplicated rows'
      // shares equal and sign-consistent.
      const MatrixXd S = Aw.transpose() * HinvA;
      const VectorXd rhs = -(Aw.transpose() * Hinvg) - aw;
      Eigen::CompleteOrthogonalDecomposition<MatrixXd> Scod(S);
      nu = Scod.solve(rhs);
      y = -Hinvg - HinvA * nu;
    }
    // restore primal feasibility first, then drop a negative multiplier
    Index add = -1;
    double worst_viol = feas_tol;
    if (ell > 0) {
      const VectorXd viol = poly.A.transpose() * y - poly.a;
      for (Index i = 0; i < ell; ++i) {
        if (!active[static_cast<std::size_t>(i)] && viol(i) > worst_viol) {
          worst_viol = viol(i);
          add = i;
        }
      }
    }
    if (add >= 0) {
      active[static_cast<std::size_t>(add)] = 1;
      continue;
    }
    Index drop = -1;
    double worst_nu = -dual_tol;
    for (Index j = 0; j < static_cast<Index>(W.size()); ++j) {
      if (nu(j) < worst_nu) {
        worst_nu = nu(j);
        drop = W[static_cast<std::size_t>(j)];
      }
    }
    if (drop >= 0) {
      active[static_cast<std::size_t>(drop)] = 0;
      continue;
    }
    return y;
  }
  return std::nullopt;
}

}  // namespace detail

// Solves the unimodality-constrained problem for each candidate mode and
// keeps the smallest achieved objective; ties go to the smallest k.
struct ModeSelection {
  Index k = 0;
  FitResult fit;
  double objective = std::numeric_limits<double>::infinity();
};

inline ModeSelection select_unimodal_mode(const IdentProblem& base,
                                          const std::vector<Index>& candidates,
                                          const SolverOptions& opts = {}) {
  if (candidates.empty()) {
    throw std::invalid_argument("select_unimodal_mode: empty candidate set");
  }
  const Index n = base.model.n();
  // The assembled rep does not depend on k; cache it (and, in the pure
  // quadratic case, the polish factorization) across candidates.
  const PlqRep rep = assemble(base).first;
  const detail::QuadraticForm qf = detail::quadratic_form(rep);
  ModeSelection sel;
  bool any_ok = false;
  for (Index k : candidates) {
    IdentProblem prob = base;
    prob.constraints = constraints_unimodal(n, base.L, k);
    FitResult fr;
    try {
      fr = fit_problem(prob, opts);
    } catch (const std::exception&) {
      continue;
    }
    if (fr.report.status != SolveStatus::converged) continue;
    if (qf.ok) {
      // exact KKT polish: removes the interior-point epsilon so the result
      // is comparable to the closed-form unconstrained solution
      if (auto py = detail::polish_quadratic(qf, prob.constraints,
                                             fr.report.y_star)) {
        const double pobj = evaluate(rep, *py);
        if (pobj <= fr.report.objective + 1e-9 * (1.0 + std::abs(pobj))) {
          fr.report.y_star = *py;
          fr.report.objective = pobj;
          fr.x = prob.L * *py;
        }
      }
    }
    any_ok = true;
    if (fr.report.objective < sel.objective - 1e-12) {
      sel.objective = fr.report.objective;
      sel.k = k;
      sel.fit = fr;
    }
  }
  if (!any_ok) throw std::runtime_error("select_unimodal_mode: all candidate solves failed");
  return sel;
}

// Default candidate set: exhaustive for n <= 100, else coarse-then-fine.
inline std::vector<Index> mode_candidates(Index n) {
  std::vector<Index> ks;
  if (n <= 100) {
    for (Index k = 1; k <= n; ++k) ks.push_back(k);
  } else {
    for (Index k = 1; k <= n; k += 5) ks.push_back(k);
  }
  return ks;
}

inline ModeSelection select_unimodal_mode_auto(const IdentProblem& base,
                                               const SolverOptions& opts = {}) {
  const Index n = base.model.n();
  ModeSelection sel = select_unimodal_mode(base, mode_candidates(n), opts);
  if (n > 100) {
    std::vector<Index> fine;
    for (Index k = std::max<Index>(1, sel.k - 4);
         k <= std::min(n, sel.k + 4); ++k) {
      if (k != sel.k) fine.push_back(k);
    }
    ModeSelection refined = select_unimodal_mode(base, fine, opts);
    if (refined.objective < sel.objective) sel = refined;
  }
  return sel;
}

}  // namespace plqid
