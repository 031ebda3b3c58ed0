// Command-line front end: identification from CSV data, Monte Carlo
// simulation studies, and per-iteration scaling benchmarks.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "plqid/estimator.hpp"
#include "plqid/ipsolver.hpp"
#include "plqid/kernel.hpp"
#include "plqid/plq.hpp"
#include "plqid/sim.hpp"

using json = nlohmann::json;
using namespace plqid;
using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

struct SolverFlags {
  SolverOptions opts;
  void attach(CLI::App* cmd) {
    cmd->add_option("--tol", opts.tol, "convergence tolerance");
    cmd->add_option("--max-iters", opts.max_iters, "iteration cap");
    cmd->add_option("--eta", opts.eta, "sufficient-decrease constant");
    cmd->add_option("--backtrack", opts.backtrack, "backtracking factor");
    cmd->add_option("--boundary-fraction", opts.boundary_fraction,
                    "fraction-to-boundary cap");
    cmd->add_option("--centering", opts.centering,
                    "extra mu multiplier on full steps");
  }
};

KernelFamily parse_family(const std::string& s) {
  if (s == "tc" || s == "TC") return KernelFamily::TC;
  if (s == "ss2" || s == "SS2") return KernelFamily::SS2;
  throw CLI::ValidationError("kernel must be tc or ss2, got " + s);
}

LossSpec parse_loss(const json& j) {
  LossSpec loss;
  const std::string name = j.value("name", "l2");
  if (name == "l2") loss.kind = LossKind::l2;
  else if (name == "l1") loss.kind = LossKind::l1;
  else if (name == "huber") loss.kind = LossKind::huber;
  else if (name == "vapnik") loss.kind = LossKind::vapnik;
  else throw std::runtime_error("unknown loss: " + name);
  loss.kappa = j.value("kappa", 1.0);
  loss.epsilon = j.value("epsilon", 0.1);
  return loss;
}

const char* loss_name(LossKind k) {
  switch (k) {
    case LossKind::l2: return "l2";
    case LossKind::l1: return "l1";
    case LossKind::huber: return "huber";
    case LossKind::vapnik: return "vapnik";
  }
  return "?";
}

// constraint spec: none | nonneg | unimodal:auto | unimodal:<k> | cm:<k> | box
struct ConstraintSpec {
  std::string kind = "none";
  Index k = 0;
  VectorXd lower, upper;  // box bounds on x
};

ConstraintSpec parse_constraint(const json& j) {
  ConstraintSpec cs;
  if (!j.contains("constraint")) return cs;
  const json& c = j.at("constraint");
  const std::string s = c.is_string() ? c.get<std::string>()
                                      : c.value("kind", "none");
  const auto colon = s.find(':');
  cs.kind = s.substr(0, colon);
  if (colon != std::string::npos) {
    const std::string arg = s.substr(colon + 1);
    if (arg != "auto") cs.k = std::stol(arg);
    else cs.k = -1;
  }
  if (cs.kind == "box") {
    const auto lo = c.at("lower").get<std::vector<double>>();
    const auto up = c.at("upper").get<std::vector<double>>();
    cs.lower = Eigen::Map<const VectorXd>(lo.data(), lo.size());
    cs.upper = Eigen::Map<const VectorXd>(up.data(), up.size());
  }
  return cs;
}

Polyhedron build_constraints(const ConstraintSpec& cs, Index n,
                             const MatrixXd& L) {
  if (cs.kind == "none") return no_constraints(n);
  if (cs.kind == "nonneg") return constraints_nonneg(n, L);
  if (cs.kind == "unimodal") {
    return constraints_unimodal(n, L, cs.k > 0 ? cs.k : n / 2);
  }
  if (cs.kind == "cm") return constraints_complete_monotone(n, L, cs.k);
  if (cs.kind == "box") {
    if (cs.lower.size() != n || cs.upper.size() != n) {
      throw std::runtime_error("box bounds must have length n");
    }
    Polyhedron poly;
    poly.A = MatrixXd(n, 2 * n);
    poly.A.leftCols(n) = -L.transpose();   // -x <= -lower
    poly.A.rightCols(n) = L.transpose();   //  x <= upper
    poly.a = VectorXd(2 * n);
    poly.a.head(n) = -cs.lower;
    poly.a.tail(n) = cs.upper;
    return poly;
  }
  throw std::runtime_error("unknown constraint kind: " + cs.kind);
}

void write_trace_csv(const std::vector<IterRecord>& trace,
                     const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out.precision(17);
  out << "iter,mu,f_norm,step,newton_rel_resid,wall_ms\n";
  for (size_t i = 0; i < trace.size(); ++i) {
    const auto& r = trace[i];
    out << i << ',' << r.mu << ',' << r.f_norm << ',' << r.step << ','
        << r.newton_rel_resid << ',' << r.wall_ms << '\n';
  }
}

json trace_to_json(const std::vector<IterRecord>& trace) {
  json arr = json::array();
  for (const auto& r : trace) {
    arr.push_back({{"mu", r.mu},
                   {"f_norm", r.f_norm},
                   {"step", r.step},
                   {"newton_rel_resid", r.newton_rel_resid},
                   {"wall_ms", r.wall_ms}});
  }
  return arr;
}

int run_identify(const std::string& data_path, const std::string& spec_path,
                 const std::string& out_path, const std::string& trace_path,
                 SolverOptions opts) {
  json spec;
  {
    std::ifstream in(spec_path);
    if (!in) throw std::runtime_error("cannot open " + spec_path);
    in >> spec;
  }
  const TimeSeries ts = read_csv(data_path);
  const Index n = spec.value("n", Index{100});
  const Index delay = spec.value("delay", Index{1});
  const KernelFamily family = parse_family(spec.value("kernel", "tc"));
  const LossSpec loss = parse_loss(spec.value("loss", json{{"name", "l2"}}));

  // assemble the regression model from observed rows only
  std::vector<double> u_all(ts.u.begin(), ts.u.end());
  std::vector<Index> observed;
  for (size_t i = 0; i < ts.y.size(); ++i) {
    if (ts.y[i].has_value()) observed.push_back(static_cast<Index>(i));
  }
  if (observed.empty()) throw std::runtime_error("data has no output samples");
  const Index m_all = static_cast<Index>(u_all.size());
  const MatrixXd Phi_all = build_phi(
      Eigen::Map<const VectorXd>(u_all.data(), m_all), n, m_all, delay);
  RegressionModel model;
  model.Phi.resize(observed.size(), n);
  model.z.resize(observed.size());
  for (size_t i = 0; i < observed.size(); ++i) {
    model.Phi.row(i) = Phi_all.row(observed[i]);
    model.z(i) = *ts.y[observed[i]];
  }

  // rescale so ||z||_inf ~ 1; tuning and solving happen in scaled units and
  // the estimate is reported back in original units
  const double zscale = std::max(model.z.cwiseAbs().maxCoeff(), 1e-300);
  model.z /= zscale;

  Hyperparams hp;
  const std::string tune = spec.value("tune", "");
  double sigma2 = spec.value("sigma2", 0.0);
  if (sigma2 <= 0.0) {
    sigma2 = estimate_sigma2(
        model, std::min<Index>(model.m() / 2, std::min<Index>(n, model.m() - 1)));
  } else {
    sigma2 /= zscale * zscale;
  }
  if (tune == "ml" || tune == "tune:ml") {
    hp = ml_tune(model, family, sigma2);
    hp.gamma = gamma_from(hp, loss.kind);
  } else if (tune == "cv" || tune == "tune:cv") {
    Hyperparams ml = ml_tune(model, family, sigma2);
    ml.gamma = gamma_from(ml, loss.kind);
    hp = cv_tune(model, family, loss, ml.gamma);
    hp.sigma2 = sigma2;
  } else {
    hp.alpha = spec.at("alpha").get<double>();
    hp.sigma2 = sigma2;
    if (spec.contains("gamma")) {
      hp.gamma = spec.at("gamma").get<double>();
    } else if (spec.contains("lambda")) {
      hp.lambda = spec.at("lambda").get<double>();
      hp.gamma = gamma_from(hp, loss.kind);
    } else {
      throw std::runtime_error("spec needs gamma, lambda, or tune");
    }
  }

  IdentProblem prob;
  prob.model = model;
  prob.kernel = {family, hp.alpha};
  prob.L = factorize(gram(prob.kernel, n));
  prob.loss = make_loss(loss, model.m());
  prob.regularizer = make_regularizer(n);
  prob.gamma = hp.gamma;
  prob.constraints = build_constraints(parse_constraint(spec), n, prob.L);

  opts.keep_trace = true;
  FitResult res;
  Index mode_k = 0;
  const ConstraintSpec cs = parse_constraint(spec);
  if (cs.kind == "unimodal" && cs.k < 0) {  // unimodal:auto
    prob.constraints = no_constraints(n);
    const ModeSelection sel = select_unimodal_mode_auto(prob, opts);
    res = sel.fit;
    mode_k = sel.k;
  } else {
    res = fit_problem(prob, opts);
  }
  const VectorXd x_hat = zscale * res.x;

  json out;
  out["x_hat"] = std::vector<double>(x_hat.data(), x_hat.data() + x_hat.size());
  out["hyperparameters"] = {{"alpha", hp.alpha},
                            {"lambda", hp.lambda},
                            {"sigma2", hp.sigma2 * zscale * zscale},
                            {"gamma", hp.gamma},
                            {"lambda_at_grid_edge", hp.lambda_at_grid_edge}};
  out["solver"] = {{"status", to_string(res.report.status)},
                   {"iterations", res.report.iterations},
                   {"kkt_residual", res.report.kkt_residual},
                   {"final_mu", res.report.final_mu},
                   {"objective", res.report.objective},
                   {"max_newton_rel_resid", res.report.max_newton_rel_resid}};
  out["solver"]["trace"] = trace_to_json(res.report.trace);
  out["scale"] = zscale;
  if (mode_k > 0) out["mode_k"] = mode_k;
  if (spec.contains("truth")) {
    const auto tvec = spec.at("truth").get<std::vector<double>>();
    const VectorXd truth = Eigen::Map<const VectorXd>(tvec.data(), tvec.size());
    out["fit"] = fit_metric(truth, x_hat);
  }
  std::ofstream os(out_path);
  if (!os) throw std::runtime_error("cannot open " + out_path);
  os << out.dump(2) << '\n';
  if (!trace_path.empty()) write_trace_csv(res.report.trace, trace_path);
  std::cout << "wrote " << out_path << " (status "
            << to_string(res.report.status) << ", "
            << res.report.iterations << " iterations)\n";
  return res.report.status == SolveStatus::converged ? 0 : 2;
}

int run_simulate(const std::string& scenario, int runs, std::uint64_t seed,
                 const std::string& out_dir, Index m, Index n,
                 std::vector<std::string> estimators, unsigned workers) {
  ExperimentSpec spec;
  if (scenario == "intro_nominal") spec.scenario = Scenario::intro_nominal;
  else if (scenario == "intro_outliers") spec.scenario = Scenario::intro_outliers;
  else if (scenario == "mc_outliers") spec.scenario = Scenario::mc_outliers;
  else if (scenario == "mri_unimodal") spec.scenario = Scenario::mri_unimodal;
  else throw std::runtime_error("unknown scenario: " + scenario);
  spec.runs = runs;
  spec.seed = seed;
  if (m > 0) spec.m = m;
  if (n > 0) spec.n = n;
  else if (spec.scenario == Scenario::mc_outliers) spec.n = 200;
  if (spec.scenario == Scenario::mri_unimodal && m == 0) spec.m = 80;
  if (estimators.empty()) {
    if (spec.scenario == Scenario::mri_unimodal) {
      estimators = {"ss_l2_ml", "ss_ml_um"};
    } else {
      estimators = {"ss_l2_ml", "ss_l1_ml"};
    }
  }
  spec.estimators = estimators;

  const McResult res = run_monte_carlo(spec, workers);
  std::filesystem::create_directories(out_dir);
  const std::string results = out_dir + "/results.csv";
  write_mc_csv(res, results);

  std::ofstream summary(out_dir + "/summary.csv");
  summary.precision(17);
  summary << "estimator,median_fit,q25_fit,q75_fit,runs_ok\n";
  for (const auto& name : estimators) {
    const auto fits = res.fits(name);
    if (fits.empty()) {
      summary << name << ",,,,0\n";
      continue;
    }
    summary << name << ',' << median(fits) << ',' << quantile(fits, 0.25)
            << ',' << quantile(fits, 0.75) << ',' << fits.size() << '\n';
  }
  std::cout << "wrote " << results << " and " << out_dir << "/summary.csv\n";
  for (const auto& name : estimators) {
    const auto fits = res.fits(name);
    if (!fits.empty()) {
      std::cout << "  " << name << ": median fit " << median(fits) << '\n';
    }
  }
  return 0;
}

int run_benchmark(const std::string& scaling, const std::vector<Index>& sizes,
                  std::uint64_t seed, const std::string& out_path) {
  if (scaling != "m" && scaling != "n") {
    throw std::runtime_error("--scaling must be m or n");
  }
  std::ofstream out;
  std::ostream* os = &std::cout;
  if (!out_path.empty()) {
    out.open(out_path);
    if (!out) throw std::runtime_error("cannot open " + out_path);
    os = &out;
  }
  (*os) << "scaling,size,m,n,iterations,per_iter_ms,total_ms\n";
  for (Index size : sizes) {
    const Index m = scaling == "m" ? size : 400;
    const Index n = scaling == "n" ? size : 100;
    Rng rng(seed);
    RegressionModel model;
    model.Phi = MatrixXd::NullaryExpr(m, n, [&] { return rng.normal(); });
    const MatrixXd L = factorize(gram({KernelFamily::TC, 0.85}, n));
    model.z = model.Phi * (L * VectorXd::NullaryExpr(n, [&] { return rng.normal(); })) +
              0.3 * VectorXd::NullaryExpr(m, [&] { return rng.normal(); });
    IdentProblem prob;
    prob.model = model;
    prob.kernel = {KernelFamily::TC, 0.85};
    prob.L = L;
    prob.loss = make_loss({LossKind::l1}, m);
    prob.regularizer = make_regularizer(n);
    prob.gamma = 0.1;
    auto [rep, poly] = assemble(prob);
    SolverOptions opts;
    opts.keep_trace = true;
    const auto rpt = solve(rep, poly, opts);
    std::vector<double> per_iter;
    double total = 0.0;
    for (const auto& rec : rpt.trace) {
      per_iter.push_back(rec.wall_ms);
      total += rec.wall_ms;
    }
    (*os) << scaling << ',' << size << ',' << m << ',' << n << ','
          << rpt.iterations << ',' << (per_iter.empty() ? 0.0 : median(per_iter))
          << ',' << total << '\n';
  }
  if (!out_path.empty()) std::cout << "wrote " << out_path << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PLQ-penalized kernel-regularized system identification"};
  app.require_subcommand(1);

  // identify
  auto* identify = app.add_subcommand(
      "identify", "estimate an impulse response from CSV data");
  std::string data_path, spec_path, out_path = "result.json", trace_path;
  identify->add_option("--data", data_path, "input CSV with t,u,y columns")
      ->required();
  identify->add_option("--spec", spec_path, "problem specification JSON")
      ->required();
  identify->add_option("--out", out_path, "output JSON path");
  identify->add_option("--trace", trace_path, "optional iteration-trace CSV");
  SolverFlags flags;
  flags.attach(identify);

  // simulate
  auto* simulate = app.add_subcommand(
      "simulate", "run a Monte Carlo study and write CSV results");
  std::string scenario = "intro_outliers", out_dir = "mc_out";
  int runs = 20;
  std::uint64_t seed = 7;
  Index sim_m = 0, sim_n = 0;
  unsigned workers = 0;
  std::vector<std::string> estimators;
  simulate->add_option("--scenario", scenario,
                       "intro_nominal|intro_outliers|mc_outliers|mri_unimodal");
  simulate->add_option("--runs", runs, "Monte Carlo repetitions");
  simulate->add_option("--seed", seed, "base RNG seed");
  simulate->add_option("--out", out_dir, "output directory");
  simulate->add_option("--m", sim_m, "measurement count override");
  simulate->add_option("--n", sim_n, "FIR length override");
  simulate->add_option("--estimators", estimators,
                       "estimator names (comma separated)")
      ->delimiter(',');
  simulate->add_option("--workers", workers, "thread count (0 = auto)");

  // benchmark
  auto* benchmark = app.add_subcommand(
      "benchmark", "measure per-iteration solve time across problem sizes");
  std::string scaling = "m", bench_out;
  std::vector<Index> sizes = {100, 200, 400, 800};
  std::uint64_t bench_seed = 1;
  benchmark->add_option("--scaling", scaling, "dimension to sweep: m or n");
  benchmark->add_option("--sizes", sizes, "sizes to benchmark")->delimiter(',');
  benchmark->add_option("--seed", bench_seed, "RNG seed");
  benchmark->add_option("--out", bench_out, "output CSV (default stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (identify->parsed()) {
      return run_identify(data_path, spec_path, out_path, trace_path, flags.opts);
    }
    if (simulate->parsed()) {
      return run_simulate(scenario, runs, seed, out_dir, sim_m, sim_n,
                          estimators, workers);
    }
    if (benchmark->parsed()) {
      return run_benchmark(scaling, sizes, bench_seed, bench_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
