#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "plqid/ipsolver.hpp"
#include "plqid/plq.hpp"
#include "plqid/rng.hpp"

using namespace plqid;
using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// min 0.5 * ||y - z||^2 as a PLQ program
PlqRep prox_rep(const VectorXd& z) {
  return compose_affine(lift_scalar(make_l2(), z.size()),
                        MatrixXd::Identity(z.size(), z.size()), -z);
}

IpState random_interior_state(Rng& rng, const PlqRep& rep,
                              const Polyhedron& poly_padded, double mu) {
  IpState st;
  st.u = oracle::random_vector(rng, rep.k());
  st.y = oracle::random_vector(rng, rep.n());
  st.q = VectorXd::NullaryExpr(rep.l(), [&] { return 0.1 + rng.uniform(); });
  st.s = VectorXd::NullaryExpr(rep.l(), [&] { return 0.1 + rng.uniform(); });
  st.w = VectorXd::NullaryExpr(poly_padded.p(), [&] { return 0.1 + rng.uniform(); });
  st.r = VectorXd::NullaryExpr(poly_padded.p(), [&] { return 0.1 + rng.uniform(); });
  st.mu = mu;
  return st;
}

Polyhedron padded(const Polyhedron& poly, Index n) {
  if (poly.p() > 0) return poly;
  Polyhedron pad;
  pad.A = MatrixXd::Zero(n, 1);
  pad.a = VectorXd::Ones(1);
  return pad;
}

}  // namespace

TEST_CASE("injectivity conditions", "[ipsolver]") {
  // L2: M = I nonsingular, both conditions hold
  const auto l2 = lift_scalar(make_l2(), 2);
  auto rep_l2 = check_injectivity(l2);
  CHECK(rep_l2.injective);
  CHECK(rep_l2.strong);

  // L1: M = 0 but B = I injective; weak holds via C^T, strong via B^T
  const auto l1 = lift_scalar(make_l1(), 2);
  auto rep_l1 = check_injectivity(l1);
  CHECK(rep_l1.injective);
  CHECK(rep_l1.strong);

  // explicit failure: u = (1, -1) is in all three null spaces
  PlqRep bad;
  bad.M = MatrixXd::Zero(2, 2);
  bad.B = MatrixXd::Ones(2, 1);
  bad.b = VectorXd::Zero(2);
  bad.C = MatrixXd::Zero(2, 1);
  bad.c = VectorXd::Ones(1);
  auto rep_bad = check_injectivity(bad);
  CHECK_FALSE(rep_bad.injective);
  CHECK_FALSE(rep_bad.strong);
  // solve surfaces this as a structure error
  const auto rpt = solve(bad, no_constraints(1));
  CHECK(rpt.status == SolveStatus::structure_error);
}

TEST_CASE("residual vanishes at an exact KKT point", "[ipsolver]") {
  // min 0.5 ||y - z||^2: minimizer y = z, dual u = 0
  Rng rng(17);
  const VectorXd z = oracle::random_vector(rng, 3);
  const PlqRep rep = prox_rep(z);
  const Polyhedron poly = padded(no_constraints(3), 3);
  IpState st;
  st.y = z;
  st.u = VectorXd::Zero(rep.k());
  st.q = VectorXd::Zero(rep.l());
  st.s = rep.c;
  st.w = VectorXd::Zero(1);
  st.r = VectorXd::Ones(1);
  st.mu = 0.0;
  CHECK(residual(rep, poly, st).lpNorm<Eigen::Infinity>() <= 1e-14);
}

TEST_CASE("residual responds linearly to slack perturbations", "[ipsolver]") {
  Rng rng(18);
  const PlqRep rep = lift_scalar(make_huber(1.0), 2);
  const Polyhedron poly = padded(no_constraints(2), 2);
  IpState st = random_interior_state(rng, rep, poly, 0.3);
  const VectorXd F0 = residual(rep, poly, st);
  const double delta = 0.37;
  const Index j = 1;  // perturbed slack coordinate
  IpState st2 = st;
  st2.s(j) += delta;
  const VectorXd F1 = residual(rep, poly, st2);
  const VectorXd diff = F1 - F0;
  const Index l = rep.l(), p = poly.p(), k = rep.k(), n = rep.n();
  for (Index i = 0; i < diff.size(); ++i) {
    double want = 0.0;
    if (i == j) want = delta;                                // block 1
    if (i == l + p + k + n + j) want = st.q(j) * delta;      // block 5
    CHECK(diff(i) == Catch::Approx(want).margin(1e-14));
  }
}

TEST_CASE("residual matches the entrywise oracle", "[ipsolver]") {
  Rng rng(19);
  for (int trial = 0; trial < 5; ++trial) {
    // random 5-variable problem with genuine constraints
    MatrixXd G = oracle::random_matrix(rng, 7, 5);
    const VectorXd z = oracle::random_vector(rng, 7);
    PlqRep rep = add(compose_affine(lift_scalar(make_huber(0.7), 7), G, -z),
                     scale(lift_scalar(make_l2(), 5), 0.4));
    Polyhedron poly;
    poly.A = oracle::random_matrix(rng, 5, 3);
    poly.a = oracle::random_vector(rng, 3);
    IpState st = random_interior_state(rng, rep, poly, 0.123);
    const VectorXd F = residual(rep, poly, st);
    const VectorXd F_oracle = oracle::residual_entrywise(rep, poly, st);
    CHECK((F - F_oracle).lpNorm<Eigen::Infinity>() <= 1e-14);
  }
}

TEST_CASE("newton step is zero on the central path", "[ipsolver]") {
  // 1-D problem min 0.5 y^2; the central-path point is explicit
  const PlqRep rep = lift_scalar(make_l2(), 1);
  const Polyhedron poly = padded(no_constraints(1), 1);
  const double mu = 0.25;
  IpState st;
  st.y = VectorXd::Zero(1);
  st.u = VectorXd::Zero(1);
  st.s = VectorXd::Ones(1);
  st.r = VectorXd::Ones(1);
  st.q = VectorXd::Constant(1, mu);
  st.w = VectorXd::Constant(1, mu);
  st.mu = mu;
  const IpState d = newton_step(rep, poly, st);
  CHECK(d.y.lpNorm<Eigen::Infinity>() <= 1e-14);
  CHECK(d.u.lpNorm<Eigen::Infinity>() <= 1e-14);
  CHECK(d.q.lpNorm<Eigen::Infinity>() <= 1e-14);
  CHECK(d.s.lpNorm<Eigen::Infinity>() <= 1e-14);
  CHECK(d.w.lpNorm<Eigen::Infinity>() <= 1e-14);
  CHECK(d.r.lpNorm<Eigen::Infinity>() <= 1e-14);
}

TEST_CASE("reduced newton step matches a dense full-jacobian solve", "[ipsolver]") {
  Rng rng(20);
  for (int trial = 0; trial < 8; ++trial) {
    MatrixXd G = oracle::random_matrix(rng, 6, 4);
    const VectorXd z = oracle::random_vector(rng, 6);
    PlqRep rep = (trial % 2 == 0)
                     ? add(compose_affine(lift_scalar(make_l1(), 6), G, -z),
                           scale(lift_scalar(make_l2(), 4), 0.6))
                     : add(compose_affine(lift_scalar(make_vapnik(0.4), 6), G, -z),
                           scale(lift_scalar(make_l2(), 4), 0.6));
    Polyhedron poly;
    poly.A = oracle::random_matrix(rng, 4, 2);
    poly.a = oracle::random_vector(rng, 2);
    const IpState st = random_interior_state(rng, rep, poly, 0.2);

    const IpState d = newton_step(rep, poly, st);

    const MatrixXd J = oracle::dense_jacobian(rep, poly, st);
    const VectorXd F = residual(rep, poly, st);
    const VectorXd dd = J.fullPivLu().solve(-F);
    VectorXd dred(dd.size());
    dred << d.q, d.w, d.u, d.y, d.s, d.r;
    CHECK((dred - dd).norm() <= 1e-8 * (1.0 + dd.norm()));

    // and the full-system residual of the reduced direction is tiny
    const MatrixXd Jd = J * dred;
    CHECK((Jd + F).norm() <= 1e-8 * (1.0 + F.norm()));
  }
}

TEST_CASE("L2 plus L2 problems have a diagonal reduced matrix T", "[ipsolver]") {
  Rng rng(21);
  MatrixXd G = oracle::random_matrix(rng, 6, 3);
  const VectorXd z = oracle::random_vector(rng, 6);
  const PlqRep rep =
      add(compose_affine(lift_scalar(make_l2(), 6), G, -z),
          scale(lift_scalar(make_l2(), 3), 0.5));
  detail::Blocks P(rep, no_constraints(3));
  CHECK(P.diag_T);
  // L1 misfits keep it diagonal too (C has one nonzero per column)
  const PlqRep rep_l1 =
      add(compose_affine(lift_scalar(make_l1(), 6), G, -z),
          scale(lift_scalar(make_l2(), 3), 0.5));
  detail::Blocks P1(rep_l1, no_constraints(3));
  CHECK(P1.diag_T);
}

TEST_CASE("line search accepts full interior steps and obeys the decrease rule",
          "[ipsolver]") {
  // manual IP loop replicating the solver's step rule; asserts the
  // Armijo-style inequality and positivity at every accepted step
  Rng rng(22);
  MatrixXd G = oracle::random_matrix(rng, 8, 4);
  const VectorXd z = oracle::random_vector(rng, 8);
  const PlqRep rep = add(compose_affine(lift_scalar(make_l2(), 8), G, -z),
                         scale(lift_scalar(make_l2(), 4), 0.5));
  const Polyhedron poly = padded(no_constraints(4), 4);

  const double eta = 0.01, bf = 0.995;
  IpState st;
  st.y = VectorXd::Zero(4);
  st.u = VectorXd::Zero(rep.k());
  st.s = rep.c.cwiseMax(1.0);
  st.r = poly.a.cwiseMax(1.0);
  st.q = VectorXd::Ones(rep.l());
  st.w = VectorXd::Ones(poly.p());
  st.mu = (st.s.dot(st.q) + st.r.dot(st.w)) / double(rep.l() + poly.p());

  bool saw_full_step = false;
  for (int iter = 0; iter < 40; ++iter) {
    const VectorXd F = residual(rep, poly, st);
    if (F.lpNorm<Eigen::Infinity>() <= 1e-9 && st.mu <= 1e-9) break;
    const IpState d = newton_step(rep, poly, st);
    double ratio = std::numeric_limits<double>::infinity();
    auto cap = [&ratio](const VectorXd& x, const VectorXd& dx) {
      for (Index i = 0; i < x.size(); ++i) {
        if (dx(i) < 0.0) ratio = std::min(ratio, -x(i) / dx(i));
      }
    };
    cap(st.s, d.s); cap(st.r, d.r); cap(st.q, d.q); cap(st.w, d.w);
    const double t_bound = std::min(1.0, bf * ratio);
    double t = -1.0;
    for (double cand = 1.0; cand > 1e-18; cand *= 0.5) {
      if (cand > t_bound) continue;
      IpState trial = st;
      trial.q += cand * d.q; trial.w += cand * d.w;
      trial.u += cand * d.u; trial.y += cand * d.y;
      trial.s += cand * d.s; trial.r += cand * d.r;
      if (residual(rep, poly, trial).norm() <= (1.0 - eta * cand) * F.norm()) {
        st = trial;
        t = cand;
        break;
      }
    }
    REQUIRE(t > 0.0);
    // accepted iterates stay interior
    CHECK(st.q.minCoeff() > 0.0);
    CHECK(st.s.minCoeff() > 0.0);
    CHECK(st.w.minCoeff() > 0.0);
    CHECK(st.r.minCoeff() > 0.0);
    if (t == 1.0) saw_full_step = true;
    st.mu = (st.s.dot(st.q) + st.r.dot(st.w)) / double(rep.l() + poly.p());
    if (t == 1.0) st.mu *= 0.1;
  }
  CHECK(saw_full_step);  // near the solution the full Newton step is accepted
  CHECK(residual(rep, poly, st).lpNorm<Eigen::Infinity>() <= 1e-6);
}

TEST_CASE("solve: proximal identity", "[ipsolver]") {
  Rng rng(23);
  const VectorXd z = oracle::random_vector(rng, 5, 2.0);
  const auto rpt = solve(prox_rep(z), no_constraints(5));
  REQUIRE(rpt.status == SolveStatus::converged);
  CHECK((rpt.y_star - z).lpNorm<Eigen::Infinity>() <= 1e-7);
  CHECK(rpt.kkt_residual <= 1e-8);
}

TEST_CASE("solve: scalar bound constraint", "[ipsolver]") {
  // min 0.5 y^2 subject to y <= -1: solution y = -1 with multiplier w = 1
  const PlqRep rep = lift_scalar(make_l2(), 1);
  Polyhedron poly;
  poly.A = MatrixXd::Ones(1, 1);
  poly.a = VectorXd::Constant(1, -1.0);
  const auto rpt = solve(rep, poly);
  REQUIRE(rpt.status == SolveStatus::converged);
  CHECK(rpt.y_star(0) == Catch::Approx(-1.0).margin(1e-7));
  REQUIRE(rpt.w_star.size() == 1);
  CHECK(rpt.w_star(0) == Catch::Approx(1.0).margin(1e-6));
  CHECK(rpt.objective == Catch::Approx(0.5).margin(1e-6));
}

TEST_CASE("solve: newton fidelity and trace bookkeeping", "[ipsolver]") {
  Rng rng(24);
  MatrixXd G = oracle::random_matrix(rng, 10, 5);
  const VectorXd z = oracle::random_vector(rng, 10);
  const PlqRep rep = add(compose_affine(lift_scalar(make_huber(1.0), 10), G, -z),
                         scale(lift_scalar(make_l2(), 5), 0.7));
  SolverOptions opts;
  opts.keep_trace = true;
  const auto rpt = solve(rep, no_constraints(5), opts);
  REQUIRE(rpt.status == SolveStatus::converged);
  CHECK(rpt.max_newton_rel_resid <= 1e-8);
  REQUIRE(!rpt.trace.empty());
  CHECK(static_cast<int>(rpt.trace.size()) == rpt.iterations);
  for (const auto& rec : rpt.trace) {
    CHECK(rec.step > 0.0);
    CHECK(rec.step <= 1.0);
    CHECK(rec.newton_rel_resid <= 1e-8);
  }
  // objective agrees with the primal value at y_star
  CHECK(rpt.objective ==
        Catch::Approx(evaluate(rep, rpt.y_star)).epsilon(1e-6).margin(1e-6));
}
