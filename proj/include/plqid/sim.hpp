#pragma once

// Experiment data generators and the Monte Carlo harness for the benchmark
// studies at desk scale.

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <limits>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "plqid/estimator.hpp"
#include "plqid/rng.hpp"

namespace plqid {

enum class Scenario { intro_nominal, intro_outliers, mc_outliers, mri_unimodal, custom };

struct NoiseSpec {
  double sigma2_ratio = 10.0;          // sigma2 = var(noiseless output) / ratio
  double outlier_fraction = 0.0;       // in [0, 1)
  double outlier_variance_factor = 100.0;
};

struct ExperimentSpec {
  Scenario scenario = Scenario::intro_outliers;
  Index m = 400;
  Index n = 100;
  int runs = 20;
  std::uint64_t seed = 0;
  NoiseSpec noise;
  std::vector<std::string> estimators;
};

struct SimData {
  VectorXd truth;        // impulse response
  RegressionModel model; // Phi, z
  VectorXd input;
  std::vector<bool> outlier_mask;
  double sigma2 = 0.0;   // nominal noise variance used
  KernelFamily preferred_kernel = KernelFamily::TC;
};

inline double variance(const VectorXd& v) {
  const double mean = v.mean();
  return (v.array() - mean).square().sum() / static_cast<double>(v.size());
}

// Contaminates each sample independently with probability pi by inflating the
// noise variance; returns the noisy signal and the outlier mask.
struct MixtureNoise {
  VectorXd noisy;
  std::vector<bool> mask;
};

inline MixtureNoise add_mixture_noise(const VectorXd& signal, double pi,
                                      double sigma2, double factor, Rng& rng) {
  if (pi < 0.0 || pi > 1.0) throw std::invalid_argument("add_mixture_noise: pi in [0,1]");
  if (!(sigma2 > 0.0)) throw std::invalid_argument("add_mixture_noise: sigma2 > 0");
  if (factor < 1.0) throw std::invalid_argument("add_mixture_noise: factor >= 1");
  MixtureNoise out;
  out.noisy = signal;
  out.mask.assign(signal.size(), false);
  const double sd = std::sqrt(sigma2);
  const double sd_out = std::sqrt(factor * sigma2);
  for (Index i = 0; i < signal.size(); ++i) {
    const bool outlier = rng.uniform() < pi;
    out.mask[i] = outlier;
    out.noisy(i) += (outlier ? sd_out : sd) * rng.normal();
  }
  return out;
}

inline MixtureNoise add_mixture_noise(const VectorXd& signal, double pi,
                                      double sigma2, double factor,
                                      std::uint64_t seed) {
  Rng rng(seed);
  return add_mixture_noise(signal, pi, sigma2, factor, rng);
}

// Introductory example: completely monotonic truth f(t) = 1/(t+2)^2 sampled
// at t = 1..n, white Gaussian unit-variance input, sigma2 = var(output)/10,
// optional 10% contamination with variance factor 100.
inline SimData gen_intro(std::uint64_t seed, Index m, bool contaminated,
                         Index n = 100) {
  Rng rng(seed);
  SimData d;
  d.truth.resize(n);
  for (Index t = 1; t <= n; ++t) {
    d.truth(t - 1) = 1.0 / double((t + 2) * (t + 2));
  }
  d.input.resize(m);
  for (Index i = 0; i < m; ++i) d.input(i) = rng.normal();
  d.model.Phi = build_phi(d.input, n, m, 1);
  const VectorXd noiseless = d.model.Phi * d.truth;
  d.sigma2 = variance(noiseless) / 10.0;
  const double pi = contaminated ? 0.1 : 0.0;
  auto mn = add_mixture_noise(noiseless, pi, d.sigma2, 100.0, rng);
  d.model.z = mn.noisy;
  d.outlier_mask = mn.mask;
  return d;
}

// Random stable discrete system: poles uniform in the disk of radius 0.95,
// random numerator with unit delay, unit-energy impulse response.
inline VectorXd gen_random_system(std::uint64_t seed, Index order,
                                  Index n = 200) {
  if (order < 1) throw std::invalid_argument("gen_random_system: order >= 1");
  Rng rng(seed);
  // denominator from conjugate pole pairs (plus one real pole if order is odd)
  std::vector<double> den = {1.0};
  auto mul_poly = [&den](std::initializer_list<double> q) {
    std::vector<double> out(den.size() + q.size() - 1, 0.0);
    Index i = 0;
    for (double dv : den) {
      Index j = 0;
      for (double qv : q) { out[i + j] += dv * qv; ++j; }
      ++i;
    }
    den = out;
  };
  Index left = order;
  if (left % 2 == 1) {
    const double p = 0.95 * (2.0 * rng.uniform() - 1.0);
    mul_poly({1.0, -p});
    --left;
  }
  for (Index i = 0; i < left / 2; ++i) {
    const double radius = 0.95 * std::sqrt(rng.uniform());
    const double theta = M_PI * rng.uniform();
    const double re = radius * std::cos(theta), im = radius * std::sin(theta);
    mul_poly({1.0, -2.0 * re, re * re + im * im});  // (1 - p z)(1 - conj(p) z)
  }
  std::vector<double> num(order, 0.0);  // coefficients of q^-1 .. q^-order
  for (auto& v : num) v = rng.normal();
  // impulse response by direct recursion
  VectorXd g = VectorXd::Zero(n);
  for (Index t = 0; t < n; ++t) {
    double v = (t < order) ? num[t] : 0.0;
    for (Index j = 1; j < static_cast<Index>(den.size()); ++j) {
      if (t - j >= 0) v -= den[j] * g(t - j);
    }
    g(t) = v;
  }
  const double e = g.norm();
  if (e > 0.0) g /= e;
  return g;
}

// Monte Carlo outlier scenario: random system, filtered white-noise input,
// 30% contamination with factor 100, sigma2 = var(output)/100.
inline SimData gen_mc_outliers(std::uint64_t seed, Index m, Index n = 200,
                               const NoiseSpec& noise = {100.0, 0.3, 100.0}) {
  Rng rng(seed);
  SimData d;
  d.truth = gen_random_system(splitmix64(seed ^ 0xabcdULL), 10, n);
  // input: unit-variance white noise through a random 2nd-order filter
  const VectorXd filt = gen_random_system(splitmix64(seed ^ 0x1234ULL), 2, 50);
  VectorXd e(m + 50);
  for (Index i = 0; i < e.size(); ++i) e(i) = rng.normal();
  d.input = VectorXd::Zero(m);
  for (Index t = 0; t < m; ++t) {
    double v = 0.0;
    for (Index j = 0; j < 50 && j <= t; ++j) v += filt(j) * e(t - j);
    d.input(t) = v;
  }
  const double iv = std::sqrt(variance(d.input));
  if (iv > 0.0) d.input /= iv;
  d.model.Phi = build_phi(d.input, n, m, 1);
  const VectorXd noiseless = d.model.Phi * d.truth;
  d.sigma2 = variance(noiseless) / noise.sigma2_ratio;
  auto mn = add_mixture_noise(noiseless, noise.outlier_fraction, d.sigma2,
                              noise.outlier_variance_factor, rng);
  d.model.z = mn.noisy;
  d.outlier_mask = mn.mask;
  return d;
}

// Arterial input of the MRI study: u(t) = 0 for t <= 10, (t-10)^3 e^{-2t/3}.
inline double arterial_input(double t) {
  if (t <= 10.0) return 0.0;
  const double s = t - 10.0;
  return s * s * s * std::exp(-2.0 * t / 3.0);
}

// MRI-style scenario: nonnegative unimodal truth (gamma-density shape with
// peak near t = 8), 80 output samples, Gaussian noise at the requested SNR.
inline SimData gen_mri(std::uint64_t seed, double snr = 20.0, Index m = 80,
                       Index n = 100) {
  if (!(snr > 0.0)) throw std::invalid_argument("gen_mri: snr > 0");
  Rng rng(seed);
  SimData d;
  d.preferred_kernel = KernelFamily::SS2;
  d.truth.resize(n);
  for (Index t = 1; t <= n; ++t) {
    const double td = static_cast<double>(t);
    d.truth(t - 1) = (td * td) * std::exp(-td / 4.0) / (64.0 * std::exp(-2.0));
  }
  d.input.resize(m);
  for (Index t = 1; t <= m; ++t) d.input(t - 1) = arterial_input(double(t));
  d.model.Phi = build_phi(d.input, n, m, 1);
  const VectorXd noiseless = d.model.Phi * d.truth;
  d.sigma2 = variance(noiseless) / snr;
  auto mn = add_mixture_noise(noiseless, 0.0, d.sigma2, 1.0, rng);
  d.model.z = mn.noisy;
  d.outlier_mask = mn.mask;
  return d;
}

inline SimData generate(const ExperimentSpec& spec, std::uint64_t run) {
  const std::uint64_t seed =
      splitmix64(spec.seed ^ (0x51ed270b7a2cf345ULL * (run + 1)));
  switch (spec.scenario) {
    case Scenario::intro_nominal: return gen_intro(seed, spec.m, false, spec.n);
    case Scenario::intro_outliers: return gen_intro(seed, spec.m, true, spec.n);
    case Scenario::mc_outliers: return gen_mc_outliers(seed, spec.m, spec.n, spec.noise);
    case Scenario::mri_unimodal: return gen_mri(seed, 20.0, spec.m, spec.n);
    case Scenario::custom: break;
  }
  throw std::invalid_argument("generate: custom scenarios need caller-provided data");
}

// --- estimators --------------------------------------------------------------

struct EstimateOutput {
  VectorXd x;
  int iterations = 0;
  Hyperparams hp;
};

using EstimatorFn = std::function<EstimateOutput(const SimData&)>;

// low-bias FIR order for the noise-variance estimate; the regressor only
// carries n lags, so the order is capped at n
inline Index default_fir_order(const SimData& d) {
  return std::min<Index>(d.model.m() / 2, d.model.n());
}

inline EstimateOutput estimate_ss_l2_ml(const SimData& d, KernelFamily family) {
  EstimateOutput out;
  const double s2 = estimate_sigma2(d.model, default_fir_order(d));
  out.hp = ml_tune(d.model, family, s2);
  out.hp.gamma = gamma_from(out.hp, LossKind::l2);
  out.x = closed_form_l2(d.model, {family, out.hp.alpha}, out.hp);
  return out;
}

inline EstimateOutput estimate_ss_plq_ml(const SimData& d, KernelFamily family,
                                         const LossSpec& loss,
                                         const Polyhedron* constraints_on_x,
                                         int cm_order) {
  EstimateOutput out;
  const double s2 = estimate_sigma2(d.model, default_fir_order(d));
  out.hp = ml_tune(d.model, family, s2);
  out.hp.gamma = gamma_from(out.hp, loss.kind);
  IdentProblem prob;
  prob.model = d.model;
  prob.kernel = {family, out.hp.alpha};
  prob.L = factorize(gram(prob.kernel, d.model.n()));
  prob.loss = make_loss(loss, d.model.m());
  prob.regularizer = make_regularizer(d.model.n());
  prob.gamma = out.hp.gamma;
  if (cm_order > 0) {
    prob.constraints = constraints_complete_monotone(d.model.n(), prob.L, cm_order);
  } else if (constraints_on_x) {
    prob.constraints = *constraints_on_x;
  } else {
    prob.constraints = no_constraints(d.model.n());
  }
  FitResult fr = fit_problem(prob);
  if (fr.report.status != SolveStatus::converged) {
    throw std::runtime_error("estimator: solve failed (" +
                             std::string(to_string(fr.report.status)) + ")");
  }
  out.x = fr.x;
  out.iterations = fr.report.iterations;
  return out;
}

// nonnegative and rising-then-falling, i.e. feasible for the unimodal
// constraint set at k = argmax
inline bool nonneg_unimodal(const VectorXd& x) {
  if ((x.array() < 0.0).any()) return false;
  Index i = 1;
  while (i < x.size() && x(i) >= x(i - 1)) ++i;
  for (; i < x.size(); ++i) {
    if (x(i) > x(i - 1)) return false;
  }
  return true;
}

inline EstimateOutput estimate_ss_ml_um(const SimData& d, KernelFamily family) {
  EstimateOutput out;
  const double s2 = estimate_sigma2(d.model, default_fir_order(d));
  out.hp = ml_tune(d.model, family, s2);
  out.hp.gamma = gamma_from(out.hp, LossKind::l2);
  // When the unconstrained optimum already satisfies the constraints for
  // some mode k, it is the exact constrained minimizer (the unconstrained
  // value lower-bounds every mode's constrained problem), so the k-sweep is
  // unnecessary.
  const VectorXd x_cf = closed_form_l2(d.model, {family, out.hp.alpha}, out.hp);
  if (nonneg_unimodal(x_cf)) {
    out.x = x_cf;
    return out;
  }
  IdentProblem base;
  base.model = d.model;
  base.kernel = {family, out.hp.alpha};
  base.L = factorize(gram(base.kernel, d.model.n()));
  base.loss = make_loss({LossKind::l2}, d.model.m());
  base.regularizer = make_regularizer(d.model.n());
  base.gamma = out.hp.gamma;
  ModeSelection sel = select_unimodal_mode_auto(base);
  out.x = sel.fit.x;
  out.iterations = sel.fit.report.iterations;
  return out;
}

inline EstimateOutput estimate_ss_cv(const SimData& d, KernelFamily family,
                                     const LossSpec& loss) {
  EstimateOutput out;
  const double s2 = estimate_sigma2(d.model, default_fir_order(d));
  Hyperparams ml = ml_tune(d.model, family, s2);
  ml.gamma = gamma_from(ml, loss.kind);
  out.hp = cv_tune(d.model, family, loss, ml.gamma);
  out.hp.sigma2 = s2;
  // final fit on the union of training and validation data
  IdentProblem prob;
  prob.model = d.model;
  prob.kernel = {family, out.hp.alpha};
  prob.L = factorize(gram(prob.kernel, d.model.n()));
  prob.loss = make_loss(loss, d.model.m());
  prob.regularizer = make_regularizer(d.model.n());
  prob.gamma = out.hp.gamma;
  prob.constraints = no_constraints(d.model.n());
  FitResult fr = fit_problem(prob);
  out.x = fr.x;
  out.iterations = fr.report.iterations;
  return out;
}

// Oracle: hyperparameters chosen by maximizing the fit against the truth.
inline EstimateOutput estimate_ss_oracle(const SimData& d, KernelFamily family,
                                         const LossSpec& loss) {
  EstimateOutput out;
  double best_fit = -std::numeric_limits<double>::infinity();
  const auto alphas = alpha_grid();
  const auto gammas = log_grid(1e-4, 1e4, 17);
  for (double a : alphas) {
    const MatrixXd L = factorize(gram({family, a}, d.model.n()));
    for (double g : gammas) {
      IdentProblem prob;
      prob.model = d.model;
      prob.kernel = {family, a};
      prob.L = L;
      prob.loss = make_loss(loss, d.model.m());
      prob.regularizer = make_regularizer(d.model.n());
      prob.gamma = g;
      prob.constraints = no_constraints(d.model.n());
      FitResult fr;
      try { fr = fit_problem(prob); } catch (const std::exception&) { continue; }
      if (fr.report.status != SolveStatus::converged) continue;
      const double f = fit_metric(d.truth, fr.x);
      if (f > best_fit) {
        best_fit = f;
        out.x = fr.x;
        out.hp.alpha = a;
        out.hp.gamma = g;
        out.iterations = fr.report.iterations;
      }
    }
  }
  if (!std::isfinite(best_fit)) throw std::runtime_error("oracle: all solves failed");
  return out;
}

inline EstimatorFn make_estimator(const std::string& name) {
  if (name == "truth") {
    return [](const SimData& d) { return EstimateOutput{d.truth, 0, {}}; };
  }
  if (name == "ss_l2_ml") {
    return [](const SimData& d) { return estimate_ss_l2_ml(d, d.preferred_kernel); };
  }
  if (name == "ss_l1_ml") {
    return [](const SimData& d) {
      return estimate_ss_plq_ml(d, d.preferred_kernel, {LossKind::l1}, nullptr, 0);
    };
  }
  if (name == "ss_l2_ip") {  // quadratic loss through the interior point path
    return [](const SimData& d) {
      return estimate_ss_plq_ml(d, d.preferred_kernel, {LossKind::l2}, nullptr, 0);
    };
  }
  if (name == "ss_rel") {  // L1 loss + complete monotonicity, order 5
    return [](const SimData& d) {
      return estimate_ss_plq_ml(d, d.preferred_kernel, {LossKind::l1}, nullptr, 5);
    };
  }
  if (name == "ss_ml_um") {
    return [](const SimData& d) { return estimate_ss_ml_um(d, d.preferred_kernel); };
  }
  if (name == "ss_l2_cv") {
    return [](const SimData& d) { return estimate_ss_cv(d, d.preferred_kernel, {LossKind::l2}); };
  }
  if (name == "ss_l1_cv") {
    return [](const SimData& d) { return estimate_ss_cv(d, d.preferred_kernel, {LossKind::l1}); };
  }
  if (name == "ss_l2_or") {
    return [](const SimData& d) { return estimate_ss_oracle(d, d.preferred_kernel, {LossKind::l2}); };
  }
  if (name == "ss_l1_or") {
    return [](const SimData& d) { return estimate_ss_oracle(d, d.preferred_kernel, {LossKind::l1}); };
  }
  throw std::invalid_argument("unknown estimator: " + name);
}

// --- Monte Carlo harness ------------------------------------------------------

struct McRow {
  int run;
  std::string estimator;
  double fit;
  double peak_fit;
  int iterations;
  double wall_ms;
  bool ok;
};

inline double peak_fit_metric(const VectorXd& g_true, const VectorXd& g_est) {
  const double p = g_true.maxCoeff();
  if (p == 0.0) throw std::invalid_argument("peak_fit: zero peak");
  return 100.0 * (1.0 - std::abs(p - g_est.maxCoeff()) / std::abs(p));
}

struct McResult {
  std::vector<McRow> rows;

  std::vector<double> fits(const std::string& estimator) const {
    std::vector<double> v;
    for (const auto& r : rows) {
      if (r.estimator == estimator && r.ok) v.push_back(r.fit);
    }
    return v;
  }
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty");
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return (n % 2 == 1) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("quantile: empty");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const size_t lo = static_cast<size_t>(pos);
  const size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - lo) * (v[hi] - v[lo]);
}

inline McResult run_monte_carlo(const ExperimentSpec& spec,
                                unsigned workers = 0) {
  if (spec.runs < 1) throw std::invalid_argument("run_monte_carlo: runs >= 1");
  if (spec.estimators.empty()) {
    throw std::invalid_argument("run_monte_carlo: no estimators");
  }
  std::vector<EstimatorFn> fns;
  for (const auto& name : spec.estimators) fns.push_back(make_estimator(name));

  if (workers == 0) {
    workers = std::max(1u, std::thread::hardware_concurrency());
  }
  std::vector<std::vector<McRow>> per_run(spec.runs);
  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      const int run = next.fetch_add(1);
      if (run >= spec.runs) break;
      SimData data = generate(spec, static_cast<std::uint64_t>(run));
      for (size_t e = 0; e < fns.size(); ++e) {
        McRow row{run, spec.estimators[e], 0.0, 0.0, 0, 0.0, false};
        const auto t0 = std::chrono::steady_clock::now();
        try {
          EstimateOutput out = fns[e](data);
          row.fit = fit_metric(data.truth, out.x);
          row.peak_fit = peak_fit_metric(data.truth, out.x);
          row.iterations = out.iterations;
          row.ok = true;
        } catch (const std::exception&) {
          row.ok = false;  // recorded as a missing value
        }
        row.wall_ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t0).count();
        per_run[run].push_back(row);
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned i = 0; i + 1 < workers; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  McResult res;
  int failures = 0, total = 0;
  for (const auto& rows : per_run) {
    for (const auto& r : rows) {
      res.rows.push_back(r);
      ++total;
      if (!r.ok) ++failures;
    }
  }
  if (failures * 5 > total) {
    throw std::runtime_error("run_monte_carlo: more than 20% of runs failed");
  }
  return res;
}

// Long-form CSV, one row per (run, estimator). Wall-clock timings are kept
// out of the file so identical specs produce byte-identical output.
inline void write_mc_csv(const McResult& res, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_mc_csv: cannot open " + path);
  out.precision(17);
  out << "run,estimator,fit,peak_fit,iterations,ok\n";
  for (const auto& r : res.rows) {
    out << r.run << ',' << r.estimator << ',';
    if (r.ok) out << r.fit << ',' << r.peak_fit;
    else out << ',';
    out << ',' << r.iterations << ',' << (r.ok ? 1 : 0) << '\n';
  }
}

}  // namespace plqid
