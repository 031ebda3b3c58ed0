#pragma once

// Piecewise linear quadratic (PLQ) penalties: dual representation
//   rho(y) = sup { <u, b + B y> - 1/2 <u, M u> : C^T u <= c }
// together with builders for the standard scalar penalties and the
// closure calculus (addition, affine composition, positive scaling).

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace plqid {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

struct PlqRep {
  VectorXd c;  // length l
  MatrixXd C;  // k x l, dual domain U = {u : C^T u <= c}
  VectorXd b;  // length k
  MatrixXd B;  // k x n, injective
  MatrixXd M;  // k x k, symmetric PSD
  bool penalty = true;  // 0 in U, so rho >= 0

  Index k() const { return B.rows(); }
  Index l() const { return c.size(); }
  Index n() const { return B.cols(); }

  // Checks the representation invariants; throws std::invalid_argument.
  void validate() const {
    if (C.rows() != k() || C.cols() != l() || b.size() != k() ||
        M.rows() != k() || M.cols() != k()) {
      throw std::invalid_argument("PlqRep: inconsistent dimensions");
    }
    if ((M - M.transpose()).lpNorm<Eigen::Infinity>() != 0.0) {
      throw std::invalid_argument("PlqRep: M is not symmetric");
    }
    const double mnorm = M.lpNorm<Eigen::Infinity>();
    if (k() > 0) {
      Eigen::SelfAdjointEigenSolver<MatrixXd> es(M, Eigen::EigenvaluesOnly);
      if (es.eigenvalues().minCoeff() < -1e-10 * std::max(1.0, mnorm)) {
        throw std::invalid_argument("PlqRep: M is not positive semidefinite");
      }
    }
    if (n() > k()) {
      throw std::invalid_argument("PlqRep: B cannot be injective (n > k)");
    }
    Eigen::JacobiSVD<MatrixXd> svd(B);
    const auto& sv = svd.singularValues();
    if (n() > 0 && sv(sv.size() - 1) <= 1e-12 * sv(0)) {
      throw std::invalid_argument("PlqRep: B has nontrivial null space");
    }
    if (penalty && l() > 0 && c.minCoeff() < 0.0) {
      throw std::invalid_argument("PlqRep: penalty requires c >= 0 (0 in U)");
    }
  }
};

// --- scalar builders (Remark-style closed forms live in the tests) ---------

// rho(y) = y^2/2.  Free dual domain encoded as the single row 0^T u <= 1.
inline PlqRep make_l2() {
  PlqRep r;
  r.c = VectorXd::Ones(1);
  r.C = MatrixXd::Zero(1, 1);
  r.b = VectorXd::Zero(1);
  r.B = MatrixXd::Ones(1, 1);
  r.M = MatrixXd::Ones(1, 1);
  return r;
}

// rho(y) = |y|, dual domain [-1, 1].
inline PlqRep make_l1() {
  PlqRep r;
  r.c = VectorXd::Ones(2);
  r.C.resize(1, 2);
  r.C << 1.0, -1.0;
  r.b = VectorXd::Zero(1);
  r.B = MatrixXd::Ones(1, 1);
  r.M = MatrixXd::Zero(1, 1);
  return r;
}

// Huber penalty: quadratic on [-kappa, kappa], linear growth outside.
inline PlqRep make_huber(double kappa) {
  if (!(kappa > 0.0)) throw std::invalid_argument("make_huber: kappa must be > 0");
  PlqRep r = make_l1();
  r.c = VectorXd::Constant(2, kappa);
  r.M = MatrixXd::Ones(1, 1);
  return r;
}

// Vapnik epsilon-insensitive loss (y - eps)_+ + (-y - eps)_+.
inline PlqRep make_vapnik(double eps) {
  if (eps < 0.0) throw std::invalid_argument("make_vapnik: epsilon must be >= 0");
  PlqRep r;
  r.c.resize(4);
  r.c << 1.0, 1.0, 0.0, 0.0;
  r.C.resize(2, 4);
  r.C << 1, 0, -1, 0,
         0, 1, 0, -1;
  r.b = VectorXd::Constant(2, -eps);
  r.B.resize(2, 1);
  r.B << 1.0, -1.0;
  r.M = MatrixXd::Zero(2, 2);
  return r;
}

// --- calculus ---------------------------------------------------------------

// Separable sum of n copies of a scalar penalty: sum_i rho(y_i).
// Rows and constraint columns are grouped by scalar-block index, so each
// scalar entry expands to an n x n (scaled-identity) block; for the L1
// penalty this gives C = [I, -I], and for Vapnik B = [I; -I].
inline PlqRep lift_scalar(const PlqRep& rep, Index n) {
  if (rep.n() != 1) throw std::invalid_argument("lift_scalar: rep must be scalar");
  if (n < 1) throw std::invalid_argument("lift_scalar: n must be >= 1");
  const Index k0 = rep.k(), l0 = rep.l();
  PlqRep out;
  out.c.resize(l0 * n);
  out.b.resize(k0 * n);
  out.C = MatrixXd::Zero(k0 * n, l0 * n);
  out.B = MatrixXd::Zero(k0 * n, n);
  out.M = MatrixXd::Zero(k0 * n, k0 * n);
  for (Index a = 0; a < k0; ++a) {
    out.b.segment(a * n, n).setConstant(rep.b(a));
    out.B.block(a * n, 0, n, n) =
        rep.B(a, 0) * MatrixXd::Identity(n, n);
    for (Index bb = 0; bb < k0; ++bb) {
      if (rep.M(a, bb) != 0.0) {
        out.M.block(a * n, bb * n, n, n) =
            rep.M(a, bb) * MatrixXd::Identity(n, n);
      }
    }
    for (Index j = 0; j < l0; ++j) {
      if (rep.C(a, j) != 0.0) {
        out.C.block(a * n, j * n, n, n) =
            rep.C(a, j) * MatrixXd::Identity(n, n);
      }
    }
  }
  for (Index j = 0; j < l0; ++j) out.c.segment(j * n, n).setConstant(rep.c(j));
  out.penalty = rep.penalty;
  return out;
}

// rho(E x + e) as a PLQ in x; x -> Ex + e must be injective.
inline PlqRep compose_affine(const PlqRep& rep, const MatrixXd& E,
                             const VectorXd& e) {
  if (E.rows() != rep.n() || e.size() != rep.n()) {
    throw std::invalid_argument("compose_affine: dimension mismatch");
  }
  Eigen::JacobiSVD<MatrixXd> svd(E);
  const auto& sv = svd.singularValues();
  if (E.cols() > E.rows() ||
      (E.cols() > 0 && sv(sv.size() - 1) <= 1e-12 * sv(0))) {
    throw std::invalid_argument("compose_affine: E is not injective");
  }
  PlqRep out = rep;
  out.b = rep.b + rep.B * e;
  out.B = rep.B * E;
  return out;
}

// Pointwise sum of two PLQ functions on the same primal space.
inline PlqRep add(const PlqRep& r1, const PlqRep& r2) {
  if (r1.n() != r2.n()) throw std::invalid_argument("add: primal dimensions differ");
  PlqRep out;
  const Index k1 = r1.k(), k2 = r2.k(), l1 = r1.l(), l2 = r2.l();
  out.c.resize(l1 + l2);
  out.c << r1.c, r2.c;
  out.b.resize(k1 + k2);
  out.b << r1.b, r2.b;
  out.C = MatrixXd::Zero(k1 + k2, l1 + l2);
  out.C.topLeftCorner(k1, l1) = r1.C;
  out.C.bottomRightCorner(k2, l2) = r2.C;
  out.B.resize(k1 + k2, r1.n());
  out.B << r1.B, r2.B;
  out.M = MatrixXd::Zero(k1 + k2, k1 + k2);
  out.M.topLeftCorner(k1, k1) = r1.M;
  out.M.bottomRightCorner(k2, k2) = r2.M;
  out.penalty = r1.penalty && r2.penalty;
  return out;
}

// gamma * rho via the dual change of variable u' = gamma u:
// (gamma c, C, b, B, M / gamma).
inline PlqRep scale(const PlqRep& rep, double gamma) {
  if (!(gamma > 0.0)) throw std::invalid_argument("scale: gamma must be > 0");
  PlqRep out = rep;
  out.c = gamma * rep.c;
  out.M = rep.M / gamma;
  return out;
}

// --- reference evaluator ----------------------------------------------------
//
// Solves the dual sup directly. After splitting the dual variable into
// independent blocks (rows coupled through M or through a shared constraint
// column), each block is small and is handled by enumerating active sets.
// This is a test oracle, not a hot path.

namespace detail {

// min ||A^T lambda - h|| s.t. lambda >= 0 (Lawson-Hanson); returns residual norm.
inline double nnls_residual(const MatrixXd& At, const VectorXd& h) {
  const Index p = At.rows();  // number of lambda entries
  if (p == 0) return h.norm();
  std::vector<bool> active(p, false);
  VectorXd lambda = VectorXd::Zero(p);
  VectorXd resid = h;
  for (int outer = 0; outer < 30 * static_cast<int>(p) + 30; ++outer) {
    VectorXd grad = At * resid;  // p-vector
    Index best = -1;
    double bestval = 1e-10 * (1.0 + h.norm());
    for (Index i = 0; i < p; ++i) {
      if (!active[i] && grad(i) > bestval) { bestval = grad(i); best = i; }
    }
    if (best < 0) break;
    active[best] = true;
    for (int inner = 0; inner < 100; ++inner) {
      std::vector<Index> idx;
      for (Index i = 0; i < p; ++i) if (active[i]) idx.push_back(i);
      MatrixXd Asub(idx.size(), At.cols());
      for (size_t j = 0; j < idx.size(); ++j) Asub.row(j) = At.row(idx[j]);
      VectorXd sol = Asub.transpose()
                         .colPivHouseholderQr()
                         .solve(h);
      if (sol.minCoeff() > 0.0) {
        lambda.setZero();
        for (size_t j = 0; j < idx.size(); ++j) lambda(idx[j]) = sol(j);
        break;
      }
      // step back to the boundary, drop a variable
      double alpha = 1.0;
      for (size_t j = 0; j < idx.size(); ++j) {
        if (sol(j) <= 0.0) {
          double cur = lambda(idx[j]);
          double a = cur / (cur - sol(j));
          alpha = std::min(alpha, a);
        }
      }
      for (size_t j = 0; j < idx.size(); ++j) {
        lambda(idx[j]) += alpha * (sol(j) - lambda(idx[j]));
        if (lambda(idx[j]) <= 1e-14) { active[idx[j]] = false; lambda(idx[j]) = 0.0; }
      }
    }
    resid = h - At.transpose() * lambda;
  }
  return (h - At.transpose() * lambda).norm();
}

struct UnionFind {
  std::vector<Index> parent;
  explicit UnionFind(Index n) : parent(n) {
    for (Index i = 0; i < n; ++i) parent[i] = i;
  }
  Index find(Index i) { return parent[i] == i ? i : parent[i] = find(parent[i]); }
  void unite(Index i, Index j) { parent[find(i)] = find(j); }
};

// sup of g^T u - 1/2 u^T M u over {C^T u <= c} for a small block.
inline double eval_block(const VectorXd& g, const MatrixXd& M,
                         const MatrixXd& C, const VectorXd& c) {
  const Index k = g.size(), l = c.size();
  const double scale = 1.0 + g.lpNorm<Eigen::Infinity>() +
                       c.lpNorm<Eigen::Infinity>();
  if (k > 12 || l > 24) {
    throw std::runtime_error("evaluate: dual block too large for enumeration");
  }
  // unboundedness: direction d in null(M) with C^T d <= 0 and g^T d > 0
  {
    Eigen::JacobiSVD<MatrixXd> svd(M, Eigen::ComputeFullV);
    Index rank = 0;
    const auto& sv = svd.singularValues();
    const double tol = 1e-12 * std::max(1.0, sv.size() ? sv(0) : 0.0);
    for (Index i = 0; i < sv.size(); ++i) if (sv(i) > tol) ++rank;
    if (rank < k) {
      MatrixXd N = svd.matrixV().rightCols(k - rank);
      VectorXd h = N.transpose() * g;
      if (h.norm() > 1e-11 * scale) {
        MatrixXd Acone = C.transpose() * N;  // l x dim(null)
        if (nnls_residual(Acone, h) > 1e-8 * (1.0 + h.norm())) return kInf;
      }
    }
  }
  double best = -kInf;
  const Index maxmask = Index(1) << l;
  for (Index mask = 0; mask < maxmask; ++mask) {
    std::vector<Index> S;
    for (Index j = 0; j < l; ++j) if (mask & (Index(1) << j)) S.push_back(j);
    if (static_cast<Index>(S.size()) > k) continue;
    const Index ns = static_cast<Index>(S.size());
    MatrixXd K = MatrixXd::Zero(k + ns, k + ns);
    K.topLeftCorner(k, k) = M;
    VectorXd rhs(k + ns);
    rhs.head(k) = g;
    for (Index j = 0; j < ns; ++j) {
      K.block(0, k + j, k, 1) = C.col(S[j]);
      K.block(k + j, 0, 1, k) = C.col(S[j]).transpose();
      rhs(k + j) = c(S[j]);
    }
    Eigen::CompleteOrthogonalDecomposition<MatrixXd> cod(K);
    VectorXd sol = cod.solve(rhs);
    if ((K * sol - rhs).norm() > 1e-9 * scale) continue;  // inconsistent face
    VectorXd u = sol.head(k);
    if (l > 0 && (C.transpose() * u - c).maxCoeff() > 1e-8 * scale) continue;
    double val = g.dot(u) - 0.5 * u.dot(M * u);
    best = std::max(best, val);
  }
  if (best == -kInf) {
    throw std::runtime_error("evaluate: no feasible stationary point found");
  }
  return best;
}

}  // namespace detail

// Reference evaluation of rho(y). Returns +inf when the sup is unbounded.
inline double evaluate(const PlqRep& rep, const VectorXd& y) {
  if (y.size() != rep.n()) {
    throw std::invalid_argument("evaluate: y has wrong length");
  }
  const Index k = rep.k(), l = rep.l();
  const VectorXd g = rep.b + rep.B * y;

  // columns of C with no nonzero entry constrain nothing; c >= 0 required
  std::vector<bool> zerocol(l, false);
  for (Index j = 0; j < l; ++j) {
    if (rep.C.col(j).lpNorm<Eigen::Infinity>() == 0.0) {
      zerocol[j] = true;
      if (rep.c(j) < 0.0) return -kInf;  // empty domain
    }
  }

  // fast path: M positive definite and unconstrained maximizer feasible
  {
    Eigen::LLT<MatrixXd> llt(rep.M);
    if (llt.info() == Eigen::Success &&
        rep.M.diagonal().minCoeff() > 1e-12) {
      VectorXd u0 = llt.solve(g);
      bool ok = (rep.M * u0 - g).norm() <= 1e-10 * (1.0 + g.norm());
      for (Index j = 0; j < l && ok; ++j) {
        if (!zerocol[j] && rep.C.col(j).dot(u0) > rep.c(j) + 1e-12 * (1.0 + std::abs(rep.c(j)))) {
          ok = false;
        }
      }
      if (ok) return 0.5 * g.dot(u0);
    }
  }

  // split dual coordinates into independent blocks
  detail::UnionFind uf(k);
  for (Index i = 0; i < k; ++i) {
    for (Index j = i + 1; j < k; ++j) {
      if (rep.M(i, j) != 0.0) uf.unite(i, j);
    }
  }
  for (Index j = 0; j < l; ++j) {
    if (zerocol[j]) continue;
    Index first = -1;
    for (Index i = 0; i < k; ++i) {
      if (rep.C(i, j) != 0.0) {
        if (first < 0) first = i; else uf.unite(first, i);
      }
    }
  }

  std::vector<std::vector<Index>> comps(k);
  for (Index i = 0; i < k; ++i) comps[uf.find(i)].push_back(i);

  double total = 0.0;
  for (Index root = 0; root < k; ++root) {
    const auto& rows = comps[root];
    if (rows.empty()) continue;
    const Index kc = static_cast<Index>(rows.size());
    std::vector<Index> cols;
    for (Index j = 0; j < l; ++j) {
      if (zerocol[j]) continue;
      for (Index i : rows) {
        if (rep.C(i, j) != 0.0) { cols.push_back(j); break; }
      }
    }
    const Index lc = static_cast<Index>(cols.size());
    VectorXd gc(kc), cc(lc);
    MatrixXd Mc(kc, kc), Cc(kc, lc);
    for (Index a = 0; a < kc; ++a) {
      gc(a) = g(rows[a]);
      for (Index bcol = 0; bcol < kc; ++bcol) Mc(a, bcol) = rep.M(rows[a], rows[bcol]);
      for (Index jj = 0; jj < lc; ++jj) Cc(a, jj) = rep.C(rows[a], cols[jj]);
    }
    for (Index jj = 0; jj < lc; ++jj) cc(jj) = rep.c(cols[jj]);
    double v = detail::eval_block(gc, Mc, Cc, cc);
    if (v == kInf) return kInf;
    total += v;
  }
  return total;
}

// --- JSON round trip ---------------------------------------------------------

inline void to_json(nlohmann::json& j, const PlqRep& r) {
  auto mat = [](const MatrixXd& m) {
    std::vector<double> v(m.size());
    for (Index i = 0; i < m.rows(); ++i)
      for (Index jj = 0; jj < m.cols(); ++jj) v[i * m.cols() + jj] = m(i, jj);
    return v;
  };
  j = nlohmann::json{
      {"c", std::vector<double>(r.c.data(), r.c.data() + r.c.size())},
      {"C", mat(r.C)},
      {"b", std::vector<double>(r.b.data(), r.b.data() + r.b.size())},
      {"B", mat(r.B)},
      {"M", mat(r.M)},
      {"dims", {r.k(), r.l(), r.n()}},
      {"penalty", r.penalty}};
}

inline void from_json(const nlohmann::json& j, PlqRep& r) {
  const auto dims = j.at("dims").get<std::vector<Index>>();
  const Index k = dims.at(0), l = dims.at(1), n = dims.at(2);
  auto mat = [&j](const char* name, Index rows, Index cols) {
    const auto v = j.at(name).get<std::vector<double>>();
    if (static_cast<Index>(v.size()) != rows * cols)
      throw std::invalid_argument("PlqRep json: bad matrix size");
    MatrixXd m(rows, cols);
    for (Index i = 0; i < rows; ++i)
      for (Index jj = 0; jj < cols; ++jj) m(i, jj) = v[i * cols + jj];
    return m;
  };
  r.C = mat("C", k, l);
  r.B = mat("B", k, n);
  r.M = mat("M", k, k);
  const auto cv = j.at("c").get<std::vector<double>>();
  const auto bv = j.at("b").get<std::vector<double>>();
  r.c = Eigen::Map<const VectorXd>(cv.data(), cv.size());
  r.b = Eigen::Map<const VectorXd>(bv.data(), bv.size());
  r.penalty = j.value("penalty", true);
}

}  // namespace plqid
