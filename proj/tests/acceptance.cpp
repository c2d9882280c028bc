// Acceptance run: one PASS/FAIL line per criterion. Exit status 1 if any fails.
// Usage: acceptance [path-to-mpctk-cli]
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mpctk/cases.hpp"
#include "mpctk/controllers.hpp"
#include "mpctk/estimators.hpp"
#include "mpctk/optim.hpp"
#include "mpctk/sim.hpp"
#include "oracles.hpp"

using namespace mpctk;
using namespace mpctk::sim;

namespace {

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    if (detail.tellp() > 0) detail << "; ";
    detail << what << (ok ? "" : " [x]");
  }
};

std::string num(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

double median_seconds(const Scenario& s, int repeats) { return benchmark(s, repeats).median; }

Scenario scenario(const std::string& plant, const std::string& controller, const std::string& test = "track",
                  bool feedforward = false) {
  CaseConfig c;
  c.plant = plant;
  c.controller = controller;
  c.test = test;
  c.feedforward = feedforward;
  return build_scenario(c);
}

// --- 1 ---------------------------------------------------------------------
Verdict criterion1() {
  Verdict v;
  const Scenario plain = scenario("cstr", "mpc");
  const Scenario ff = scenario("cstr", "mpc", "track", true);
  const SimRecord a = run_closed_loop(plain);
  const SimRecord b = run_closed_loop(ff);
  double min_after = 1e300;
  for (int k = 50; k < a.steps(); ++k) min_after = std::min(min_after, a.Y(0, k));
  const double min_ff = b.Y.row(0).minCoeff();
  v.require(min_after < 45.0, "no feedforward min y_L after load " + num(min_after));
  v.require(min_ff >= 44.5, "feedforward min y_L " + num(min_ff));
  const double ta = median_seconds(plain, 5), tb = median_seconds(ff, 5);
  v.require(ta <= 0.5 && tb <= 0.5, "runtime " + num(ta, 2) + " s / " + num(tb, 2) + " s");
  return v;
}

// --- 2 ---------------------------------------------------------------------
Verdict criterion2() {
  Verdict v;
  for (bool ff : {false, true}) {
    const SimRecord r = run_closed_loop(scenario("cstr", "mpc", "track", ff));
    const int last = r.steps() - 1;
    const VectorXd err = r.Y.col(last) - r.Ry.col(last);
    v.require(err.cwiseAbs().maxCoeff() <= 0.1,
              std::string(ff ? "feedforward" : "no feedforward") + " error [" + num(err[0]) + ", " + num(err[1]) + "]");
  }
  return v;
}

// --- 3 ---------------------------------------------------------------------
void pendulum_bands(Verdict& v, const std::string& controller) {
  for (const std::string test : {"track", "regulate"}) {
    const SimRecord r = run_closed_loop(scenario("pendulum", controller, test));
    const int last = r.steps() - 1;
    const double err = r.Y(0, last) - 180.0;
    const double umax = r.U.cwiseAbs().maxCoeff();
    v.require(std::abs(err) <= 2.0, test + " |y-180| " + num(std::abs(err), 3));
    v.require(umax <= 1.5, test + " max|tau| " + num(umax, 17));
  }
}

Verdict criterion3() {
  Verdict v;
  pendulum_bands(v, "nmpc");
  return v;
}

// --- 4 ---------------------------------------------------------------------
Verdict criterion4() {
  Verdict v;
  const double Wn = compute_work(run_closed_loop(scenario("pendulum", "nmpc", "track")));
  const double We = compute_work(run_closed_loop(scenario("pendulum", "empc", "track")));
  v.require(We < Wn, "tracking W_empc " + num(We, 5) + " < W_nmpc " + num(Wn, 5));
  v.require(Wn >= 3.5 && Wn <= 4.3 && We >= 3.5 && We <= 4.3, "tracking W in [3.5, 4.3]");
  const double Rn = compute_work(run_closed_loop(scenario("pendulum", "nmpc", "regulate")));
  const double Re = compute_work(run_closed_loop(scenario("pendulum", "empc", "regulate")));
  v.require(Rn < 0.0 && Re < 0.0, "regulation W_nmpc " + num(Rn, 3) + ", W_empc " + num(Re, 3) + " negative");
  v.require(Re < Rn, "regulation W_empc < W_nmpc");
  return v;
}

// --- 5 ---------------------------------------------------------------------
Verdict criterion5() {
  Verdict v;
  pendulum_bands(v, "slmpc");
  for (const std::string test : {"track", "regulate"}) {
    const double tn = median_seconds(scenario("pendulum", "nmpc", test), 21);
    const double ts = median_seconds(scenario("pendulum", "slmpc", test), 201);
    v.require(tn >= 5.0 * ts, test + " speedup " + num(tn / ts, 3) + "x");
  }
  return v;
}

// --- 6 ---------------------------------------------------------------------
struct Plant {
  MatrixXd A, B, C;
};

EstimatorConfig no_integrators(int ny) {
  EstimatorConfig cfg;
  cfg.nint_ym.assign(static_cast<std::size_t>(ny), 0);
  return cfg;
}

VectorXd gaussian(std::mt19937_64& rng, Eigen::Index n, double sigma) {
  std::normal_distribution<double> g(0.0, sigma);
  VectorXd x(n);
  for (Eigen::Index i = 0; i < n; ++i) x[i] = g(rng);
  return x;
}

double gap_to_kalman(StateEstimator& est, const Plant& p, std::uint64_t seed, int steps) {
  std::mt19937_64 rng(seed);
  oracle::KalmanReference ref{p.A, p.B, p.C, est.Qhat(), est.Rhat(), est.xhat(), est.P()};
  VectorXd x = gaussian(rng, p.A.rows(), 1.0);
  double worst = 0.0;
  for (int k = 0; k < steps; ++k) {
    const VectorXd u = gaussian(rng, p.B.cols(), 1.0);
    const VectorXd y = p.C * x + gaussian(rng, p.C.rows(), 0.3);
    const VectorXd xf = est.prepare(y);
    const VectorXd xr = ref.step(y, u);
    worst = std::max(worst, (xf - xr).lpNorm<Eigen::Infinity>() / std::max(1.0, xr.lpNorm<Eigen::Infinity>()));
    est.update(u, y);
    x = p.A * x + p.B * u + gaussian(rng, p.A.rows(), 0.1);
  }
  return worst;
}

Verdict criterion6() {
  Verdict v;
  std::mt19937_64 rng(6);
  double ukf = 0.0, mhe = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const Plant p{oracle::random_stable(rng, 3, 0.95), oracle::random_matrix(rng, 3, 1), oracle::random_matrix(rng, 2, 3)};
    const LinearModel m(p.A, p.B, p.C, 1.0);
    UnscentedKalmanFilter u(m, no_integrators(2));
    ukf = std::max(ukf, gap_to_kalman(u, p, 100 + trial, 100));
    EstimatorConfig cfg = no_integrators(2);
    cfg.He = 10;
    MovingHorizonEstimator h(m, cfg);
    mhe = std::max(mhe, gap_to_kalman(h, p, 200 + trial, 50));
  }
  v.require(ukf <= 1e-8, "(a) UKF vs KF " + num(ukf, 2));

  EstimatorConfig pcfg;
  pcfg.nint_u = {1};
  ExtendedKalmanFilter ekf(cases::pendulum_model(), pcfg);
  const AugmentedModel& aug = ekf.model();
  std::uniform_real_distribution<double> U(-2.0, 2.0);
  double jac = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const VectorXd x = Eigen::Vector3d(U(rng), U(rng), U(rng));
    const VectorXd u = VectorXd::Constant(1, U(rng));
    const VectorXd d;
    const auto L = aug.linearize(x, u, d);
    const MatrixXd Jx = oracle::fd_jacobian([&](const VectorXd& z) { return aug.f(z, u, d); }, x);
    const MatrixXd Ju = oracle::fd_jacobian([&](const VectorXd& z) { return aug.f(x, z, d); }, u);
    const MatrixXd Jh = oracle::fd_jacobian([&](const VectorXd& z) { return aug.h(z, d); }, x);
    auto rel = [](const MatrixXd& a, const MatrixXd& b) {
      return (a - b).cwiseAbs().maxCoeff() / std::max(1.0, b.cwiseAbs().maxCoeff());
    };
    jac = std::max({jac, rel(L.A, Jx), rel(L.Bu, Ju), rel(L.C, Jh)});
  }
  v.require(jac <= 1e-6, "(b) EKF Jacobians " + num(jac, 2));

  const LinearModel cstr = cases::cstr_model(false);
  SteadyKalmanFilter skf(cstr, {});
  KalmanFilter kf(cstr, {});
  for (int k = 0; k < 3000; ++k) {
    kf.prepare(cstr.yop());
    kf.update(cstr.uop(), cstr.yop());
  }
  kf.prepare(cstr.yop());
  const double gain = (kf.gain() - skf.gain()).cwiseAbs().maxCoeff();
  v.require(gain <= 1e-8, "(c) steady gain " + num(gain, 2));
  v.require(mhe <= 1e-6, "(d) MHE vs KF " + num(mhe, 2));

  const MatrixXd one = MatrixXd::Ones(1, 1);
  const double dare = std::abs(solve_dare(one, one, one, one).P(0, 0) - (1.0 + std::sqrt(5.0)) / 2.0);
  v.require(dare <= 1e-10, "(e) DARE " + num(dare, 2));
  return v;
}

// --- 7 ---------------------------------------------------------------------
Verdict criterion7() {
  Verdict v;
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> dn(1, 12), dm(0, 20);
  double sol = 0.0, kkt = 0.0;
  int solved = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const oracle::Qp q = oracle::random_qp(rng, dn(rng), dm(rng));
    const QpSolution s = solve_qp(QpProblem{q.H, q.q, q.A, q.b, {}, {}});
    const auto ref = oracle::brute_force_qp(q);
    if (s.status != QpStatus::Optimal || !ref) continue;
    ++solved;
    sol = std::max(sol, (s.z - *ref).lpNorm<Eigen::Infinity>() / std::max(1.0, ref->lpNorm<Eigen::Infinity>()));
    kkt = std::max(kkt, oracle::kkt_violation(q.H, q.q, q.A, q.b, s.z, s.lambda));
  }
  v.require(solved == 200, "solved " + std::to_string(solved) + "/200");
  v.require(sol <= 1e-7, "vs enumeration " + num(sol, 2));
  v.require(kkt <= 1e-8, "KKT " + num(kkt, 2));

  double sqp = 0.0;
  for (int trial = 0; trial < 25; ++trial) {
    const int n = 1 + trial % 6;
    const oracle::Qp q = oracle::random_qp(rng, n, 2 * n);
    NlpProblem nlp;
    nlp.n = n;
    nlp.set_objective([q](auto z) {
      using T = std::decay_t<decltype(z[0])>;
      T f = T(0.0);
      for (int i = 0; i < q.q.size(); ++i) {
        f = f + q.q[i] * z[i];
        for (int j = 0; j < q.q.size(); ++j) f = f + 0.5 * q.H(i, j) * z[i] * z[j];
      }
      return f;
    });
    nlp.A = q.A;
    nlp.b = q.b;
    nlp.z0 = VectorXd::Zero(n);
    const NlpResult r = solve_nlp(nlp);
    const auto ref = oracle::brute_force_qp(q);
    sqp = std::max(sqp, r.status == NlpStatus::Optimal && ref ? (r.z - *ref).lpNorm<Eigen::Infinity>() : 1.0);
  }
  v.require(sqp <= 1e-8, "SQP vs QP " + num(sqp, 2));
  return v;
}

// --- 8 ---------------------------------------------------------------------
Verdict criterion8() {
  Verdict v;
  auto f = make_state_function([](auto xdot, auto x, auto u, auto, auto) { xdot[0] = -x[0] + u[0]; });
  auto h = make_output_function([](auto y, auto x, auto, auto) { y[0] = x[0]; });
  NonlinearModel decay(f, h, 0.1, 1, 1, 1);
  decay.set_state(VectorXd::Ones(1));
  decay.step(VectorXd::Zero(1));
  const double rk4 = std::abs(decay.state()[0] - std::exp(-0.1)) / std::exp(-0.1);
  v.require(rk4 <= 1e-7, "RK4 rel " + num(rk4, 2));

  // static gain of the transfer entries against C (I - A)^-1 B + D of the realization
  double dc = 0.0;
  for (bool ff : {false, true}) {
    const TransferFunctionMatrix G = cases::cstr_transfer(ff);
    const LinearModel m = cases::cstr_model(ff);
    const MatrixXd IA = MatrixXd::Identity(m.nx(), m.nx()) - m.A();
    const MatrixXd Ku = m.C() * IA.partialPivLu().solve(m.Bu());
    for (int i = 0; i < G.ny; ++i)
      for (int j = 0; j < G.nu; ++j) {
        const TransferFunction& g = G(i, j);
        const double k0 = g.num.back() / g.den.back();
        const double got = j < m.nu() ? Ku(i, j)
                                      : (m.C() * IA.partialPivLu().solve(m.Bd()) + m.Dd())(i, j - m.nu());
        dc = std::max(dc, std::abs(got - k0));
      }
  }
  v.require(dc <= 1e-9, "DC gain " + num(dc, 2));

  const NonlinearModel model = cases::pendulum_model(0.1, 1.0, true);
  EstimatorConfig cfg;
  cfg.i_ym = {0};
  cfg.nint_u = {1};
  MpcTuning t;
  t.Hp = 20;
  t.Hc = 2;
  t.Mwt = VectorXd{{0.5, 0.0}};
  t.Nwt = VectorXd{{2.5}};
  t.Ewt = 3.5e3;
  auto JE = make_economic_function([](auto UE, auto YE, auto, auto p) {
    using T = typename decltype(UE)::value_type;
    return horizon_work<std::remove_const_t<T>>(UE, YE, p[0]);
  });
  NonLinMPC mpc(std::make_unique<UnscentedKalmanFilter>(model, cfg), t, JE, {0.1});
  mpc.estimator().set_state(VectorXd{{2.5, 0.4, -0.1}});
  const MoveRequest req{VectorXd{{180.0, 0.0}}, {}, {}, {}, {}};
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  double grad = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const VectorXd z = Eigen::Vector3d(U(rng), U(rng), U(rng));
    const VectorXd g = mpc.objective_gradient(z, req);
    const VectorXd fd = oracle::fd_gradient([&](const VectorXd& w) { return mpc.objective(w, req); }, z, 1e-5);
    grad = std::max(grad, (g - fd).norm() / std::max(1.0, fd.norm()));
  }
  v.require(grad <= 1e-6, "NMPC gradient rel " + num(grad, 2));
  return v;
}

// --- 9 ---------------------------------------------------------------------
double loop_gap(PredictiveController& a, PredictiveController& b, const LinearModel& model, int steps) {
  LinearModel pa = model, pb = model;
  double gap = 0.0;
  VectorXd ry = model.yop();
  for (int k = 0; k < steps; ++k) {
    if (k == 3) ry = model.yop() + VectorXd::Constant(model.ny(), 1.0);
    if (k == 15) ry = model.yop() - VectorXd::Constant(model.ny(), 0.5);
    const VectorXd ya = pa.output(VectorXd()), yb = pb.output(VectorXd());
    a.prepare(ya);
    b.prepare(yb);
    const VectorXd ua = a(ry), ub = b(ry);
    gap = std::max(gap, (ua - ub).cwiseAbs().maxCoeff());
    a.update(ua, ya);
    b.update(ub, yb);
    pa.step(ua, VectorXd());
    pb.step(ub, VectorXd());
  }
  return gap;
}

Verdict criterion9() {
  Verdict v;
  std::mt19937_64 rng(9);
  double exp_gap = 0.0;
  for (int trial = 0; trial < 3; ++trial) {
    const LinearModel m(oracle::random_stable(rng, 4, 0.9), oracle::random_matrix(rng, 4, 2),
                        oracle::random_matrix(rng, 2, 4), 1.0);
    MpcTuning t;
    t.Hp = 8;
    t.Hc = 3;
    LinMPC lin(std::make_unique<KalmanFilter>(m, EstimatorConfig{}), t);
    ExplicitMPC ex(std::make_unique<KalmanFilter>(m, EstimatorConfig{}), t);
    exp_gap = std::max(exp_gap, loop_gap(lin, ex, m, 30));
  }
  v.require(exp_gap <= 1e-9, "explicit vs LinMPC " + num(exp_gap, 2));

  const LinearModel cstr = cases::cstr_model(false);
  ConstraintSpec s;
  s.umin = VectorXd::Constant(2, 5.0);
  s.umax = VectorXd::Constant(2, 35.0);
  s.ymin = VectorXd{{45.0, -kInfinity}};
  LinMPC lin(std::make_unique<KalmanFilter>(cstr, EstimatorConfig{}));
  NonLinMPC nl(std::make_unique<KalmanFilter>(cstr, EstimatorConfig{}));
  lin.set_constraints(s);
  nl.set_constraints(s);
  const double nl_gap = loop_gap(lin, nl, cstr, 25);
  v.require(nl_gap <= 1e-6, "NMPC (no economic term) vs LinMPC " + num(nl_gap, 2));
  return v;
}

// --- 10 --------------------------------------------------------------------
std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Verdict criterion10(const std::string& cli) {
  Verdict v;
  CaseConfig c;
  c.plant = "pendulum";
  c.controller = "nmpc";
  c.y_noise = VectorXd{{0.5}};
  c.seed = 2024;
  const std::string a = to_csv(run_closed_loop(build_scenario(c)));
  const std::string b = to_csv(run_closed_loop(build_scenario(c)));
  v.require(a == b, "in-process runs identical");
  if (cli.empty()) {
    v.require(false, "no CLI path given");
    return v;
  }
  namespace fs = std::filesystem;
  const fs::path root = fs::temp_directory_path() / ("mpctk_accept_" + std::to_string(std::random_device{}()));
  bool same = true;
  for (const char* run : {"a", "b"}) {
    const std::string cmd = "\"" + cli + "\" --out \"" + (root / run).string() +
                            "\" --format csv pendulum --controller nmpc --y-noise 0.5 --seed 2024 > /dev/null";
    same = same && std::system(cmd.c_str()) == 0;
  }
  const std::string fa = slurp(root / "a" / "pendulum_nmpc_track.csv");
  const std::string fb = slurp(root / "b" / "pendulum_nmpc_track.csv");
  same = same && !fa.empty() && fa == fb;
  v.require(same, "two CLI processes write identical CSV (" + std::to_string(fa.size()) + " bytes)");
  v.require(fa == a, "CLI output equals library output");
  fs::remove_all(root);
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  const std::string cli = argc > 1 ? argv[1] : "";
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria = {
      {"CSTR output bound with and without feedforward", criterion1},
      {"CSTR offset-free tracking at the last step", criterion2},
      {"pendulum nonlinear MPC", criterion3},
      {"pendulum economic MPC energy", criterion4},
      {"pendulum successive linearization MPC", criterion5},
      {"estimator oracles", criterion6},
      {"optimizer oracles", criterion7},
      {"numerical kernels", criterion8},
      {"controller equivalences", criterion9},
      {"deterministic CSV export", [&] { return criterion10(cli); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v.require(false, std::string("exception: ") + e.what());
    }
    if (!v.pass) ++failed;
    std::cout << "criterion " << i + 1 << ": " << (v.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << "  ("
              << v.detail.str() << ")\n";
  }
  std::cout << criteria.size() - failed << "/" << criteria.size() << " criteria pass\n";
  return failed == 0 ? 0 : 1;
}
