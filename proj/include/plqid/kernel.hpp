#pragma once

// Stable spline kernels (first order / TC and second order), their Cholesky
// factors, and the FIR regression model z = Phi x + E built from input samples.

#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace plqid {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class KernelFamily { TC, SS2 };

struct StableSplineKernel {
  KernelFamily family = KernelFamily::TC;
  double alpha = 0.8;  // decay hyperparameter, in [0, 1)
};

struct RegressionModel {
  MatrixXd Phi;  // m x n
  VectorXd z;    // m
  Index m() const { return Phi.rows(); }
  Index n() const { return Phi.cols(); }
};

// Gram matrix. The kernel formulas index samples 1..n; storage is 0-based,
// so they are applied to (i+1, j+1).
inline MatrixXd gram(const StableSplineKernel& kernel, Index n) {
  if (n < 1) throw std::invalid_argument("gram: n must be >= 1");
  const double a = kernel.alpha;
  if (a < 0.0 || a >= 1.0) {
    throw std::invalid_argument("gram: alpha must lie in [0, 1)");
  }
  MatrixXd Q(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j <= i; ++j) {
      const double ii = static_cast<double>(i + 1);
      const double jj = static_cast<double>(j + 1);
      const double mx = std::max(ii, jj);
      double v;
      if (kernel.family == KernelFamily::TC) {
        v = std::pow(a, mx);
      } else {
        v = std::pow(a, ii + jj) * std::pow(a, mx) / 2.0 -
            std::pow(a, 3.0 * mx) / 6.0;
      }
      Q(i, j) = v;
      Q(j, i) = v;
    }
  }
  return Q;
}

struct CholeskyResult {
  MatrixXd L;
  double jitter = 0.0;  // diagonal shift applied on retry, 0 if none
};

// Lower-triangular L with Q = L L^T. Retries once with a recorded diagonal
// jitter of 1e-12 * trace(Q)/n when the first factorization breaks down.
inline CholeskyResult factorize_with_report(const MatrixXd& Q) {
  if (Q.rows() != Q.cols()) throw std::invalid_argument("factorize: Q not square");
  Eigen::LLT<MatrixXd> llt(Q);
  if (llt.info() == Eigen::Success && llt.matrixL().toDenseMatrix().diagonal().minCoeff() > 0.0) {
    return {llt.matrixL(), 0.0};
  }
  const double jitter = 1e-12 * Q.trace() / static_cast<double>(Q.rows());
  MatrixXd Qj = Q + jitter * MatrixXd::Identity(Q.rows(), Q.cols());
  Eigen::LLT<MatrixXd> llt2(Qj);
  if (llt2.info() != Eigen::Success) {
    // locate the failing pivot for the message
    Index pivot = 0;
    MatrixXd A = Qj;
    for (Index j = 0; j < A.rows(); ++j) {
      double d = A(j, j);
      for (Index p = 0; p < j; ++p) d -= A(j, p) * A(j, p);
      if (d <= 0.0) { pivot = j; break; }
      A(j, j) = std::sqrt(d);
      for (Index i = j + 1; i < A.rows(); ++i) {
        double s = A(i, j);
        for (Index p = 0; p < j; ++p) s -= A(i, p) * A(j, p);
        A(i, j) = s / A(j, j);
      }
    }
    throw std::runtime_error("factorize: Cholesky breakdown at pivot " +
                             std::to_string(pivot));
  }
  return {llt2.matrixL(), jitter};
}

inline MatrixXd factorize(const MatrixXd& Q) { return factorize_with_report(Q).L; }

// Phi_{i,j} = u(i - j - delay + 1) under zero initial conditions, 1-based
// time; row t of Phi x is the truncated convolution sum_j x_j u(t - j - delay + 1).
inline MatrixXd build_phi(const VectorXd& u, Index n, Index m, Index delay = 1) {
  if (n < 1 || m < 1) throw std::invalid_argument("build_phi: m, n must be >= 1");
  if (delay < 1) throw std::invalid_argument("build_phi: delay must be >= 1");
  if (u.size() < m) {
    throw std::invalid_argument("build_phi: need at least m input samples");
  }
  MatrixXd Phi = MatrixXd::Zero(m, n);
  for (Index i = 0; i < m; ++i) {        // output time t = i + 1
    for (Index j = 0; j < n; ++j) {      // coefficient index j + 1
      const Index lag = i - j - delay;  // 0-based input sample index
      if (lag >= 0) Phi(i, j) = u(lag);
    }
  }
  return Phi;
}

// Percentage fit of Eq.-(2) type: 100 (1 - ||g - ghat|| / ||g||).
// Shorter vector is zero-padded.
inline double fit_metric(const VectorXd& g_true, const VectorXd& g_est) {
  const Index n = std::max(g_true.size(), g_est.size());
  VectorXd a = VectorXd::Zero(n), b = VectorXd::Zero(n);
  a.head(g_true.size()) = g_true;
  b.head(g_est.size()) = g_est;
  const double denom = a.norm();
  if (denom == 0.0) throw std::invalid_argument("fit_metric: ||g_true|| = 0");
  return 100.0 * (1.0 - (a - b).norm() / denom);
}

// --- CSV ingestion -----------------------------------------------------------

struct TimeSeries {
  std::vector<double> t;
  std::vector<double> u;
  std::vector<std::optional<double>> y;  // missing y = prediction-only row
};

// Reads (t, u, y) triples, one header row; y may be empty.
inline TimeSeries read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_csv: cannot open " + path);
  TimeSeries ts;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f1, f2, f3;
    std::getline(ss, f1, ',');
    std::getline(ss, f2, ',');
    std::getline(ss, f3, ',');
    ts.t.push_back(std::stod(f1));
    ts.u.push_back(std::stod(f2));
    if (f3.empty()) {
      ts.y.push_back(std::nullopt);
    } else {
      ts.y.push_back(std::stod(f3));
    }
  }
  return ts;
}

}  // namespace plqid
