#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "mpctk/cases.hpp"
#include "mpctk/controllers.hpp"
#include "mpctk/linalg.hpp"
#include "oracles.hpp"

using namespace mpctk;

namespace {

LinearModel random_model(std::mt19937_64& rng, int nx, int nu, int ny, int nd) {
  return LinearModel(oracle::random_stable(rng, nx, 0.9), oracle::random_matrix(rng, nx, nu),
                     oracle::random_matrix(rng, ny, nx), oracle::random_matrix(rng, nx, nd),
                     oracle::random_matrix(rng, ny, nd), 1.0);
}

VectorXd uniform(std::mt19937_64& rng, int n, double a = -1.0, double b = 1.0) {
  std::uniform_real_distribution<double> u(a, b);
  VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = u(rng);
  return v;
}

std::unique_ptr<StateEstimator> kf(const SimModel& m, EstimatorConfig cfg = {}) {
  return std::make_unique<KalmanFilter>(m, cfg);
}

/// Closed loop of a controller on its own plant model with setpoint changes.
std::vector<VectorXd> run_loop(PredictiveController& mpc, SimModel& plant, int steps) {
  std::vector<VectorXd> us;
  VectorXd ry = plant.yop();
  for (int k = 0; k < steps; ++k) {
    if (k == 3) ry = plant.yop() + VectorXd::Constant(plant.ny(), 1.0);
    if (k == 15) ry = plant.yop() - VectorXd::Constant(plant.ny(), 0.5);
    const VectorXd y = plant.output(VectorXd());
    mpc.prepare(y);
    const VectorXd u = mpc(ry);
    mpc.update(u, y);
    plant.step(u, VectorXd());
    us.push_back(u);
  }
  return us;
}

}  // namespace

TEST_CASE("prediction operator matches step-by-step simulation") {
  std::mt19937_64 rng(11);
  const LinearModel model = random_model(rng, 3, 2, 2, 1);
  EstimatorConfig cfg;
  cfg.nint_u = {1, 0};
  cfg.nint_ym = {0, 1};
  KalmanFilter est(model, cfg);
  const AugmentedModel& aug = est.model();
  const int Hp = 6, Hc = 3, nu = 2, nd = 1;
  const auto P = PredictionOperator::build(aug.linear(), Hp, Hc);

  for (int trial = 0; trial < 5; ++trial) {
    const VectorXd x = uniform(rng, aug.nxhat());
    const VectorXd u0 = uniform(rng, nu);
    const VectorXd d0 = uniform(rng, nd);
    const VectorXd D0 = uniform(rng, nd * Hp);
    const VectorXd dU = uniform(rng, nu * Hc);

    VectorXd Y(aug.ny() * Hp), U(nu * Hp);
    VectorXd xs = x, u = u0;
    for (int j = 0; j < Hp; ++j) {
      if (j < Hc) u += dU.segment(j * nu, nu);
      U.segment(j * nu, nu) = u;
      xs = aug.f(xs, u, j == 0 ? d0 : VectorXd(D0.segment((j - 1) * nd, nd)));
      Y.segment(j * aug.ny(), aug.ny()) = aug.h(xs, D0.segment(j * nd, nd));
    }
    const VectorXd Yp = P.Ex * x + P.Eu * u0 + P.Ed * d0 + P.ED * D0 + P.E * dU + P.Ek;
    const VectorXd xe = P.tx * x + P.tu * u0 + P.td * d0 + P.tD * D0 + P.tE * dU + P.tk;
    CHECK((Yp - Y).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((xe - xs).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((P.T * u0 + P.S * dU - U).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("scalar integrator reaches the setpoint in one move") {
  const LinearModel model(MatrixXd::Ones(1, 1), MatrixXd::Ones(1, 1), MatrixXd::Ones(1, 1), 1.0);
  EstimatorConfig cfg;
  cfg.nint_ym = {0};
  MpcTuning t;
  t.Hp = 1;
  t.Hc = 1;
  t.Mwt = VectorXd::Ones(1);
  t.Nwt = VectorXd::Zero(1);
  LinMPC mpc(kf(model, cfg), t);
  mpc.prepare(VectorXd::Zero(1));
  const auto& r = mpc.move({VectorXd::Ones(1), {}, {}, {}, {}});
  CHECK(r.u[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.dU[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.Yhat[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(r.J) < 1e-12);
}

TEST_CASE("explicit controller equals unconstrained LinMPC") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 3; ++trial) {
    LinearModel model = random_model(rng, 4, 2, 2, 0);
    model = LinearModel(model.A(), model.Bu(), model.C(), 1.0);
    MpcTuning t;
    t.Hp = 8;
    t.Hc = 3;
    LinMPC lin(kf(model), t);
    ExplicitMPC exp(kf(model), t);
    LinearModel p1 = model, p2 = model;
    const auto u1 = run_loop(lin, p1, 30);
    const auto u2 = run_loop(exp, p2, 30);
    double gap = 0.0;
    for (std::size_t k = 0; k < u1.size(); ++k) gap = std::max(gap, (u1[k] - u2[k]).cwiseAbs().maxCoeff());
    CHECK(gap < 1e-9);
  }
}

TEST_CASE("explicit controller refuses finite bounds") {
  const LinearModel model = cases::cstr_model(false);
  ExplicitMPC mpc(model);
  ConstraintSpec s;
  s.umin = VectorXd::Constant(2, -1.0);
  CHECK_THROWS_AS(mpc.set_constraints(s), std::invalid_argument);
  s.umin = VectorXd::Constant(2, -kInfinity);
  CHECK_NOTHROW(mpc.set_constraints(s));
}

TEST_CASE("input bounds hold and the QP reports an active set") {
  const LinearModel model = cases::cstr_model(false);
  LinMPC mpc(model);
  ConstraintSpec s;
  s.umin = VectorXd::Constant(2, 15.0);
  s.umax = VectorXd::Constant(2, 25.0);
  mpc.set_constraints(s);
  mpc.init(model.uop(), model.yop());
  mpc.prepare(model.yop());
  const auto& r = mpc.move({VectorXd{{60.0, 40.0}}, {}, {}, {}, {}});
  CHECK((r.U.array() <= 25.0 + 1e-9).all());
  CHECK((r.U.array() >= 15.0 - 1e-9).all());
  CHECK_FALSE(r.active_set.empty());
  CHECK_FALSE(r.degraded);
}

TEST_CASE("move increments bounds are respected") {
  const LinearModel model = cases::cstr_model(false);
  LinMPC mpc(model);
  ConstraintSpec s;
  s.dumin = VectorXd::Constant(2, -0.5);
  s.dumax = VectorXd::Constant(2, 0.5);
  mpc.set_constraints(s);
  mpc.init(model.uop(), model.yop());
  mpc.prepare(model.yop());
  const auto& r = mpc.move({VectorXd{{55.0, 35.0}}, {}, {}, {}, {}});
  CHECK(r.dU.cwiseAbs().maxCoeff() <= 0.5 + 1e-9);
}

TEST_CASE("soft output bounds relax through the slack variable") {
  const LinearModel model = cases::cstr_model(false);
  MpcTuning t;
  LinMPC mpc(model, t);
  ConstraintSpec s;
  s.dumin = VectorXd::Constant(2, -0.1);
  s.dumax = VectorXd::Constant(2, 0.1);
  s.ymin = VectorXd{{55.0, -kInfinity}};  // unreachable with small moves
  mpc.set_constraints(s);
  mpc.init(model.uop(), model.yop());
  mpc.prepare(model.yop());
  const auto& r = mpc.move({VectorXd{{50.0, 30.0}}, {}, {}, {}, {}});
  CHECK_FALSE(r.degraded);
  CHECK(r.epsilon > 0.0);
  // the y rows are relaxed by exactly ε where active
  for (int j = 0; j < t.Hp; ++j) CHECK(r.Yhat[2 * j] >= 55.0 - r.epsilon - 1e-7);
}

TEST_CASE("hard infeasible bounds fall back to the shifted previous move") {
  const LinearModel model = cases::cstr_model(false);
  MpcTuning t;
  t.Cwt = kInfinity;
  LinMPC mpc(model, t);
  CHECK_FALSE(mpc.has_slack());
  ConstraintSpec s;
  s.umin = VectorXd::Constant(2, 19.0);
  s.umax = VectorXd::Constant(2, 21.0);
  s.dumin = VectorXd::Constant(2, -0.1);
  s.dumax = VectorXd::Constant(2, 0.1);
  s.ymin = VectorXd{{55.0, -kInfinity}};
  mpc.set_constraints(s);
  mpc.init(model.uop(), model.yop());
  mpc.prepare(model.yop());
  const auto& r = mpc.move({VectorXd{{50.0, 30.0}}, {}, {}, {}, {}});
  CHECK(r.degraded);
  CHECK((r.u - model.uop()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("row counts and slack dimension") {
  const LinearModel model = cases::cstr_model(false);
  MpcTuning t;
  LinMPC mpc(model, t);
  ConstraintSpec s;
  s.umin = VectorXd{{10.0, -kInfinity}};
  s.ymax = VectorXd{{70.0, 40.0}};
  s.xhatmin = VectorXd::Constant(mpc.model().nxhat(), -100.0);
  mpc.set_constraints(s);
  const auto rc = mpc.row_count();
  CHECK(rc.U == t.Hp);
  CHECK(rc.dU == 0);
  CHECK(rc.Y == 2 * t.Hp);
  CHECK(rc.x == mpc.model().nxhat());
  // one row per finite bound plus ε >= 0
  CHECK(mpc.last_qp().A.rows() == rc.U + rc.dU + rc.Y + rc.x + 1);
  CHECK(mpc.last_qp().A.cols() == 2 * t.Hc + 1);

  MpcTuning hard = t;
  hard.Cwt = kInfinity;
  LinMPC h(model, hard);
  CHECK(h.last_qp().A.cols() == 2 * t.Hc);
}

TEST_CASE("bound validation") {
  const LinearModel model = cases::cstr_model(false);
  LinMPC mpc(model);
  ConstraintSpec s;
  s.umin = VectorXd::Constant(2, 5.0);
  s.umax = VectorXd::Constant(2, 1.0);
  CHECK_THROWS_AS(mpc.set_constraints(s), std::invalid_argument);
  ConstraintSpec bad_len;
  bad_len.ymin = VectorXd::Zero(3);
  CHECK_THROWS_AS(mpc.set_constraints(bad_len), std::invalid_argument);
  ConstraintSpec neg;
  neg.c_ymin = VectorXd::Constant(2, -1.0);
  CHECK_THROWS_AS(mpc.set_constraints(neg), std::invalid_argument);
  ConstraintSpec tv;
  tv.umax = VectorXd::LinSpaced(2 * mpc.Hp(), 30.0, 40.0);
  mpc.set_constraints(tv);
  CHECK(mpc.constraints().Umax[3] == doctest::Approx(tv.umax[3]));
}

TEST_CASE("tuning validation") {
  const LinearModel model = cases::cstr_model(false);
  MpcTuning t;
  t.Hc = 12;
  CHECK_THROWS_AS(LinMPC(model, t), std::invalid_argument);
  t = {};
  t.Cwt = 0.0;
  CHECK_THROWS_AS(LinMPC(model, t), std::invalid_argument);
  t = {};
  t.Ewt = 1.0;
  CHECK_THROWS_AS(LinMPC(model, t), std::invalid_argument);
  t = {};
  t.M_Hp = MatrixXd::Identity(20, 20);
  t.M_Hp(0, 1) = 0.5;
  CHECK_THROWS_AS(LinMPC(model, t), std::invalid_argument);
  t = {};
  t.Mwt = VectorXd{{-1.0, 1.0}};
  CHECK_THROWS_AS(LinMPC(model, t), std::invalid_argument);
}

TEST_CASE("move requires a prepared estimate") {
  const LinearModel model = cases::cstr_model(false);
  LinMPC mpc(model);
  CHECK_THROWS_AS(mpc.move({VectorXd{{50.0, 30.0}}, {}, {}, {}, {}}), std::logic_error);
  mpc.prepare(model.yop());
  CHECK_NOTHROW(mpc.move({VectorXd{{50.0, 30.0}}, {}, {}, {}, {}}));
}

TEST_CASE("model swap needs an estimator that supports it") {
  const LinearModel model = cases::cstr_model(false);
  LinMPC steady(model);
  CHECK_THROWS_AS(steady.set_model(model), std::logic_error);
  LinMPC adaptive(kf(model));
  CHECK_NOTHROW(adaptive.set_model(model));
}

TEST_CASE("summary layout") {
  const LinearModel model = cases::cstr_model(false);
  LinMPC mpc(model);
  const std::string s = mpc.summary();
  CHECK(s.rfind("LinMPC controller with a sample time Ts = 2 s, active-set QP optimizer, SteadyKalmanFilter", 0) == 0);
  CHECK(s.find(" 10 prediction steps Hp\n") != std::string::npos);
  CHECK(s.find("  2 control steps Hc\n") != std::string::npos);
  CHECK(s.find("  1 slack variable ε (control constraints)\n") != std::string::npos);
  CHECK(s.find("  2 manipulated inputs u (0 integrating states)\n") != std::string::npos);
  CHECK(s.find("  4 estimated states x̂\n") != std::string::npos);
  CHECK(s.find("  2 measured outputs ym (2 integrating states)\n") != std::string::npos);
  CHECK(s.find("  0 unmeasured outputs yu\n") != std::string::npos);
  CHECK(s.find("  0 measured disturbances d\n") != std::string::npos);
}

TEST_CASE("horizon work") {
  const std::vector<double> UE{1.0, 2.0, 3.0};
  const std::vector<double> YE{0.0, 10.0, 0.0, 20.0, 0.0, 30.0};
  CHECK(horizon_work<double>(UE, YE, 0.1) == doctest::Approx(0.1 * (10.0 + 40.0)));
  const std::vector<double> bad{0.0, 1.0};
  CHECK_THROWS_AS(horizon_work<double>(UE, bad, 0.1), std::invalid_argument);
}

TEST_CASE("nonlinear controller with no economic term equals LinMPC on a linear plant") {
  const LinearModel model = cases::cstr_model(false);
  MpcTuning t;
  ConstraintSpec s;
  s.umin = VectorXd::Constant(2, 5.0);
  s.umax = VectorXd::Constant(2, 35.0);
  s.ymin = VectorXd{{45.0, -kInfinity}};
  LinMPC lin(kf(model), t);
  NonLinMPC nl(kf(model), t);
  lin.set_constraints(s);
  nl.set_constraints(s);
  LinearModel p1 = model, p2 = model;
  const auto u1 = run_loop(lin, p1, 25);
  const auto u2 = run_loop(nl, p2, 25);
  double gap = 0.0;
  for (std::size_t k = 0; k < u1.size(); ++k) gap = std::max(gap, (u1[k] - u2[k]).cwiseAbs().maxCoeff());
  CHECK(gap < 1e-6);
  CHECK(nl.summary().rfind("NonLinMPC controller with a sample time Ts = 2 s, SQP optimizer", 0) == 0);
}

TEST_CASE("nonlinear objective gradient matches central differences") {
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
  const double Ts = 0.1;
  auto JE = make_economic_function([](auto UE, auto YE, auto, auto p) {
    using T = typename decltype(UE)::value_type;
    return horizon_work<std::remove_const_t<T>>(UE, YE, p[0]);
  });
  NonLinMPC mpc(std::make_unique<UnscentedKalmanFilter>(model, cfg), t, JE, {Ts});
  std::mt19937_64 rng(3);
  mpc.estimator().set_state(VectorXd{{0.3, -0.2, 0.05}});
  const MoveRequest req{VectorXd{{180.0, 0.0}}, {}, {}, {}, {}};
  for (int trial = 0; trial < 10; ++trial) {
    const VectorXd z = uniform(rng, 3, -1.0, 1.0);
    const VectorXd g = mpc.objective_gradient(z, req);
    const VectorXd fd = oracle::fd_gradient([&](const VectorXd& v) { return mpc.objective(v, req); }, z, 1e-5);
    const double rel = (g - fd).norm() / std::max(1.0, fd.norm());
    CHECK(rel < 1e-6);
  }
}
