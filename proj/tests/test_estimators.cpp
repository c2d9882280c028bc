#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <random>

#include "mpctk/cases.hpp"
#include "mpctk/estimators.hpp"
#include "mpctk/linalg.hpp"
#include "oracles.hpp"

using namespace mpctk;

namespace {

struct RandomPlant {
  MatrixXd A, B, C;
};

RandomPlant random_plant(std::mt19937_64& rng, int nx, int nu, int ny) {
  return {oracle::random_stable(rng, nx, 0.95), oracle::random_matrix(rng, nx, nu), oracle::random_matrix(rng, ny, nx)};
}

EstimatorConfig plain_config(int nym) {
  EstimatorConfig cfg;
  cfg.nint_ym.assign(static_cast<std::size_t>(nym), 0);
  return cfg;
}

VectorXd gaussian(std::mt19937_64& rng, int n, double sigma) {
  std::normal_distribution<double> g(0.0, sigma);
  VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = g(rng);
  return v;
}

/// Runs `estim` against the textbook filter on simulated data; returns the worst state gap.
double compare_with_reference(StateEstimator& estim, const RandomPlant& p, std::mt19937_64& rng, int steps) {
  oracle::KalmanReference ref{p.A, p.B, p.C, estim.Qhat(), estim.Rhat(), estim.xhat(), estim.P()};
  VectorXd x = gaussian(rng, static_cast<int>(p.A.rows()), 1.0);
  double worst = 0.0;
  for (int k = 0; k < steps; ++k) {
    const VectorXd u = gaussian(rng, static_cast<int>(p.B.cols()), 1.0);
    const VectorXd y = p.C * x + gaussian(rng, static_cast<int>(p.C.rows()), 0.3);
    const VectorXd xf = estim.prepare(y);
    const VectorXd xr = ref.step(y, u);
    worst = std::max(worst, (xf - xr).lpNorm<Eigen::Infinity>() / std::max(1.0, xr.lpNorm<Eigen::Infinity>()));
    estim.update(u, y);
    x = p.A * x + p.B * u + gaussian(rng, static_cast<int>(p.A.rows()), 0.1);
  }
  return worst;
}

bool contains(const std::string& s, const std::string& part) { return s.find(part) != std::string::npos; }

}  // namespace

TEST_CASE("default augmentation of the tank adds one integrator per measured output") {
  const LinearModel m = cases::cstr_model(false);
  SteadyKalmanFilter skf(m, {});
  const std::string s = skf.summary();
  CHECK(contains(s, "SteadyKalmanFilter estimator with a sample time Ts = 2 s, LinModel and:"));
  CHECK(contains(s, " 2 manipulated inputs u (0 integrating states)"));
  CHECK(contains(s, " 4 estimated states x̂"));
  CHECK(contains(s, " 2 measured outputs ym (2 integrating states)"));
  CHECK(contains(s, " 0 unmeasured outputs yu"));
  CHECK(skf.model().nxhat() == 4);
  // augmented matrices: integrators are random walks feeding the measured outputs
  const auto& L = skf.model().linear();
  CHECK(L.A.bottomRightCorner(2, 2).isIdentity(0.0));
  CHECK(L.A.bottomLeftCorner(2, 2).isZero(0.0));
  CHECK(L.C.rightCols(2).isIdentity(0.0));
  CHECK((L.A.topLeftCorner(2, 2) - m.A()).norm() == 0.0);
}

TEST_CASE("pendulum filter with an input integrator") {
  EstimatorConfig cfg;
  cfg.sigma_Q = Eigen::Vector2d(0.1, 1.0);
  cfg.sigma_R = VectorXd::Constant(1, 5.0);
  cfg.nint_u = {1};
  cfg.sigma_Qint_u = VectorXd::Constant(1, 0.1);
  UnscentedKalmanFilter ukf(cases::pendulum_model(), cfg);
  const std::string s = ukf.summary();
  CHECK(contains(s, " 1 manipulated inputs u (1 integrating states)"));
  CHECK(contains(s, " 3 estimated states x̂"));
  CHECK(contains(s, " 1 measured outputs ym (0 integrating states)"));
  CHECK(ukf.Qhat()(1, 1) == doctest::Approx(1.0));
  CHECK(ukf.Rhat()(0, 0) == doctest::Approx(25.0));

  EstimatorConfig cfg2 = cfg;
  cfg2.i_ym = {0};
  UnscentedKalmanFilter ukf2(cases::pendulum_model(0.1, 1.0, true), cfg2);
  CHECK(contains(ukf2.summary(), " 1 unmeasured outputs yu"));
}

TEST_CASE("augmentation that breaks observability falls back with a diagnostic") {
  // a pure integrator plant cannot carry an extra output integrator
  const LinearModel m(MatrixXd::Identity(1, 1), MatrixXd::Identity(1, 1), MatrixXd::Identity(1, 1), 1.0);
  KalmanFilter kf(m, {});
  CHECK(kf.model().nint_ym_total() == 0);
  REQUIRE(!kf.diagnostics().empty());
  EstimatorConfig cfg;
  cfg.nint_ym = {1};
  KalmanFilter kf2(m, cfg);
  CHECK(kf2.model().nint_ym_total() == 0);
  CHECK(contains(kf2.summary(), "unobservable"));
}

TEST_CASE("Kalman filter matches the textbook recursion") {
  std::mt19937_64 rng(101);
  for (int trial = 0; trial < 5; ++trial) {
    const RandomPlant p = random_plant(rng, 3, 2, 2);
    KalmanFilter kf(LinearModel(p.A, p.B, p.C, 1.0), plain_config(2));
    CHECK(compare_with_reference(kf, p, rng, 100) <= 1e-10);
  }
}

TEST_CASE("unscented and extended filters equal the Kalman filter on linear models") {
  std::mt19937_64 rng(202);
  for (int trial = 0; trial < 5; ++trial) {
    const RandomPlant p = random_plant(rng, 2 + trial % 3, 1 + trial % 2, 1 + (trial + 1) % 2);
    const LinearModel m(p.A, p.B, p.C, 1.0);
    const int ny = static_cast<int>(p.C.rows());
    UnscentedKalmanFilter ukf(m, plain_config(ny));
    ExtendedKalmanFilter ekf(m, plain_config(ny));
    std::mt19937_64 r1(trial), r2(trial);
    CHECK(compare_with_reference(ukf, p, r1, 100) <= 1e-8);
    CHECK(compare_with_reference(ekf, p, r2, 100) <= 1e-8);
  }
}

TEST_CASE("extended filter Jacobians agree with finite differences") {
  EstimatorConfig cfg;
  cfg.nint_u = {1};
  ExtendedKalmanFilter ekf(cases::pendulum_model(), cfg);
  const AugmentedModel& aug = ekf.model();
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> U(-2.0, 2.0);
  for (int trial = 0; trial < 10; ++trial) {
    const VectorXd x = Eigen::Vector3d(U(rng), U(rng), U(rng));
    const VectorXd u = VectorXd::Constant(1, U(rng));
    const VectorXd d;
    const auto L = aug.linearize(x, u, d);
    const MatrixXd Jx = oracle::fd_jacobian([&](const VectorXd& z) { return aug.f(z, u, d); }, x);
    const MatrixXd Ju = oracle::fd_jacobian([&](const VectorXd& z) { return aug.f(x, z, d); }, u);
    const MatrixXd Jh = oracle::fd_jacobian([&](const VectorXd& z) { return aug.h(z, d); }, x);
    CHECK((L.A - Jx).cwiseAbs().maxCoeff() <= 1e-6 * std::max(1.0, Jx.cwiseAbs().maxCoeff()));
    CHECK((L.Bu - Ju).cwiseAbs().maxCoeff() <= 1e-6 * std::max(1.0, Ju.cwiseAbs().maxCoeff()));
    CHECK((L.C - Jh).cwiseAbs().maxCoeff() <= 1e-6 * std::max(1.0, Jh.cwiseAbs().maxCoeff()));
    // the input integrator acts exactly like the input
    CHECK((L.A.col(2).head(2) - L.Bu.col(0).head(2)).norm() <= 1e-14);
    CHECK(L.A(2, 2) == 1.0);
  }
}

TEST_CASE("extended and unscented covariance propagation agree from a tight prior") {
  EstimatorConfig cfg;
  cfg.nint_u = {1};
  cfg.P0 = 1e-6 * MatrixXd::Identity(3, 3);
  ExtendedKalmanFilter ekf(cases::pendulum_model(), cfg);
  UnscentedKalmanFilter ukf(cases::pendulum_model(), cfg);
  const VectorXd x0 = Eigen::Vector3d(0.5, -0.3, 0.1);
  ekf.set_state(x0);
  ukf.set_state(x0);
  ekf.set_covariance(cfg.P0);
  ukf.set_covariance(cfg.P0);
  const VectorXd y = VectorXd::Constant(1, 30.0);
  const VectorXd u = VectorXd::Constant(1, 0.4);
  ekf.prepare(y);
  ukf.prepare(y);
  ekf.update(u, y);
  ukf.update(u, y);
  CHECK((ekf.P() - ukf.P()).cwiseAbs().maxCoeff() <= 1e-2 * ekf.P().cwiseAbs().maxCoeff());
  CHECK((ekf.xhat() - ukf.xhat()).lpNorm<Eigen::Infinity>() <= 1e-6);
}

TEST_CASE("steady-state gain equals the converged time-varying gain") {
  const LinearModel m = cases::cstr_model(false);
  SteadyKalmanFilter skf(m, {});
  KalmanFilter kf(m, {});
  const VectorXd u = m.uop();
  const VectorXd y = m.yop();
  for (int k = 0; k < 3000; ++k) {
    kf.prepare(y);
    kf.update(u, y);
  }
  kf.prepare(y);
  CHECK((kf.gain() - skf.gain()).cwiseAbs().maxCoeff() <= 1e-8);
  // and the steady estimator applies exactly that gain to the innovation
  const VectorXd before = skf.xhat();
  const VectorXd ybump = y + Eigen::Vector2d(1.0, -2.0);
  const VectorXd after = skf.prepare(ybump);
  CHECK((after - before - skf.gain() * Eigen::Vector2d(1.0, -2.0)).norm() <= 1e-12);
}

TEST_CASE("moving horizon estimator without constraints reproduces the Kalman filter") {
  std::mt19937_64 rng(303);
  for (int trial = 0; trial < 3; ++trial) {
    const RandomPlant p = random_plant(rng, 3, 1, 2);
    EstimatorConfig cfg = plain_config(2);
    cfg.He = 10;
    MovingHorizonEstimator mhe(LinearModel(p.A, p.B, p.C, 1.0), cfg);
    std::mt19937_64 r(trial + 40);
    CHECK(compare_with_reference(mhe, p, r, 50) <= 1e-6);
    CHECK(mhe.last_solution().Nk == 10);
  }
  const RandomPlant p = random_plant(rng, 2, 1, 1);
  EstimatorConfig cfg = plain_config(1);
  cfg.He = 1;
  MovingHorizonEstimator mhe(LinearModel(p.A, p.B, p.C, 1.0), cfg);
  std::mt19937_64 r(9);
  CHECK(compare_with_reference(mhe, p, r, 30) <= 1e-8);
}

TEST_CASE("estimation window grows until the horizon") {
  const RandomPlant p{MatrixXd::Constant(1, 1, 0.5), MatrixXd::Ones(1, 1), MatrixXd::Ones(1, 1)};
  EstimatorConfig cfg = plain_config(1);
  cfg.He = 4;
  MovingHorizonEstimator mhe(LinearModel(p.A, p.B, p.C, 1.0), cfg);
  for (int k = 0; k < 7; ++k) {
    mhe.prepare(VectorXd::Zero(1));
    CHECK(mhe.last_solution().Nk == std::min(k + 1, 4));
    mhe.update(VectorXd::Zero(1), VectorXd::Zero(1));
  }
}

TEST_CASE("process noise bounds pin or relax the estimates") {
  const LinearModel m(MatrixXd::Constant(1, 1, 0.9), MatrixXd::Ones(1, 1), MatrixXd::Ones(1, 1), 1.0);
  auto run = [&](double C, double soft) {
    EstimatorConfig cfg = plain_config(1);
    cfg.He = 5;
    cfg.Cwt = C;
    cfg.bounds.w_max = VectorXd::Zero(1);
    cfg.bounds.c_w_max = VectorXd::Constant(1, soft);
    MovingHorizonEstimator mhe(m, cfg);
    // the plant jumps upward, which only positive process noise can explain
    for (int k = 0; k < 6; ++k) {
      mhe.prepare(VectorXd::Constant(1, 5.0));
      mhe.update(VectorXd::Zero(1), VectorXd::Constant(1, 5.0));
    }
    mhe.prepare(VectorXd::Constant(1, 5.0));
    return mhe.last_solution();
  };
  const MheSolution hard = run(kInfinity, 0.0);
  REQUIRE(hard.optimal);
  CHECK(hard.w.maxCoeff() <= 1e-9);
  CHECK(hard.epsilon == 0.0);
  const MheSolution soft = run(1.0, 1.0);
  REQUIRE(soft.optimal);
  CHECK(soft.epsilon > 1e-6);
  CHECK(soft.w.maxCoeff() > 1e-6);
  CHECK(soft.w.maxCoeff() <= soft.epsilon + 1e-9);
}

TEST_CASE("nonlinear moving horizon estimator tracks the pendulum") {
  EstimatorConfig cfg;
  cfg.nint_u = {1};
  cfg.sigma_Q = Eigen::Vector2d(0.1, 1.0);
  cfg.sigma_R = VectorXd::Constant(1, 5.0);
  cfg.He = 5;
  MovingHorizonEstimator mhe(cases::pendulum_model(), cfg);
  NonlinearModel plant = cases::pendulum_model(0.1, 1.25);
  const VectorXd u = VectorXd::Constant(1, 0.5);
  for (int k = 0; k < 35; ++k) {
    const VectorXd y = plant.output();
    mhe.prepare(y);
    mhe.update(u, y);
    plant.step(u);
  }
  const VectorXd y = plant.output();
  mhe.prepare(y);
  CHECK(mhe.last_solution().optimal);
  CHECK(std::abs(mhe.output()[0] - y[0]) < 2.0);
  CHECK(std::abs(mhe.xhat()[0] - plant.state()[0]) < 0.05);
}

TEST_CASE("unscented transform is exact for affine maps") {
  std::mt19937_64 rng(4);
  const MatrixXd M = oracle::random_matrix(rng, 2, 3);
  const VectorXd b = Eigen::Vector2d(1.0, -2.0);
  const MatrixXd S = oracle::random_matrix(rng, 3, 3);
  const MatrixXd P = S * S.transpose();
  const VectorXd mean = Eigen::Vector3d(0.3, -1.0, 2.0);
  for (double alpha : {1e-3, 0.5, 1.0}) {
    const auto r = unscented_transform(mean, P, [&](const VectorXd& x) { return VectorXd(M * x + b); }, alpha, 2.0, 0.0);
    CHECK((r.mean - (M * mean + b)).norm() <= 1e-10 * (1.0 + (M * mean + b).norm()));
    CHECK((r.cov - M * P * M.transpose()).norm() <= 1e-10 * (1.0 + (M * P * M.transpose()).norm()));
    const auto id = unscented_transform(mean, P, [](const VectorXd& x) { return x; }, alpha, 2.0, 0.0);
    CHECK((id.mean - mean).norm() <= 1e-10);
    CHECK((id.cov - P).norm() <= 1e-10 * P.norm());
  }
  const auto sq = unscented_transform(VectorXd::Zero(1), MatrixXd::Ones(1, 1),
                                      [](const VectorXd& x) { return VectorXd(x.array().square()); }, 1e-3, 2.0, 0.0);
  CHECK(sq.mean[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(sq.sigma_in.cols() == 3);
}

TEST_CASE("covariances stay symmetric positive semidefinite") {
  std::mt19937_64 rng(55);
  const RandomPlant p = random_plant(rng, 3, 1, 2);
  const LinearModel m(p.A, p.B, p.C, 1.0);
  std::vector<std::unique_ptr<StateEstimator>> all;
  all.push_back(std::make_unique<KalmanFilter>(m, EstimatorConfig{}));
  all.push_back(std::make_unique<UnscentedKalmanFilter>(m, EstimatorConfig{}));
  all.push_back(std::make_unique<ExtendedKalmanFilter>(m, EstimatorConfig{}));
  for (auto& e : all) {
    double worst = 0.0;
    for (int k = 0; k < 1000; ++k) {
      const VectorXd y = gaussian(rng, 2, 3.0);
      e->prepare(y);
      worst = std::min(worst, min_symmetric_eigenvalue(e->P()));
      CHECK((e->P() - e->P().transpose()).cwiseAbs().maxCoeff() == 0.0);
      e->update(gaussian(rng, 1, 1.0), y);
    }
    CHECK(worst >= -1e-10);
  }
}

TEST_CASE("init gives a bumpless start") {
  const LinearModel m = cases::cstr_model(false);
  SteadyKalmanFilter skf(m, {});
  skf.init(m.uop(), m.yop());
  CHECK(skf.xhat().norm() <= 1e-12);
  skf.init(m.uop(), m.yop() + Eigen::Vector2d(1.0, 0.0));
  CHECK(skf.xhat().head(2).norm() <= 1e-10);
  CHECK(skf.xhat()[2] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(skf.xhat()[3]) <= 1e-12);
  // first correction sees no innovation
  const VectorXd before = skf.xhat();
  skf.prepare(m.yop() + Eigen::Vector2d(1.0, 0.0));
  CHECK((skf.xhat() - before).norm() <= 1e-12);
  // off-rest input: the deterministic states take the steady response
  KalmanFilter kf(m, {});
  const VectorXd u = m.uop() + Eigen::Vector2d(1.0, 2.0);
  const VectorXd y = m.yop() + m.dc_gain_u() * Eigen::Vector2d(1.0, 2.0);
  kf.init(u, y);
  CHECK((kf.output() - y).norm() <= 1e-9);
  CHECK(kf.xhat().tail(2).norm() <= 1e-9);

  EstimatorConfig cfg;
  cfg.nint_u = {1};
  UnscentedKalmanFilter ukf(cases::pendulum_model(), cfg);
  ukf.init(VectorXd::Zero(1), VectorXd::Constant(1, 3.0));
  CHECK(ukf.xhat().norm() == 0.0);
}

TEST_CASE("current and predictor forms agree at matched time indices") {
  std::mt19937_64 rng(77);
  const RandomPlant p = random_plant(rng, 3, 1, 2);
  const LinearModel m(p.A, p.B, p.C, 1.0);
  EstimatorConfig cc = plain_config(2);
  EstimatorConfig pc = cc;
  pc.form = EstimatorForm::Predictor;
  KalmanFilter cur(m, cc), pred(m, pc);
  for (int k = 0; k < 40; ++k) {
    const VectorXd y = gaussian(rng, 2, 1.0);
    const VectorXd u = gaussian(rng, 1, 1.0);
    const VectorXd xp = pred.prepare(y);  // x(k|k-1): unchanged by prepare
    cur.prepare(y);
    cur.update(u, y);                    // now holds x(k+1|k)
    pred.update(u, y);
    CHECK((pred.xhat() - cur.xhat()).norm() <= 1e-10 * std::max(1.0, cur.xhat().norm()));
    (void)xp;
  }
  CHECK((pred.P() - cur.P()).norm() <= 1e-10 * cur.P().norm());
}

TEST_CASE("Luenberger observer places the error dynamics") {
  const LinearModel m = cases::cstr_model(false);
  for (auto form : {EstimatorForm::Current, EstimatorForm::Predictor}) {
    EstimatorConfig cfg;
    cfg.form = form;
    Luenberger obs(m, cfg);
    const auto& L = obs.model().linear();
    const MatrixXd Cm = obs.model().measured_rows(L.C);
    const MatrixXd closed = form == EstimatorForm::Current ? MatrixXd(L.A - obs.gain() * Cm * L.A)
                                                           : MatrixXd(L.A - obs.gain() * Cm);
    Eigen::EigenSolver<MatrixXd> es(closed);
    std::vector<double> e;
    for (Eigen::Index i = 0; i < closed.rows(); ++i) e.push_back(es.eigenvalues()[i].real());
    std::sort(e.begin(), e.end());
    for (int i = 0; i < 4; ++i) CHECK(e[static_cast<std::size_t>(i)] == doctest::Approx(0.77 + 0.01 * i).epsilon(1e-7));
  }
  EstimatorConfig bad;
  bad.poles = {{1.2, 0.0}, {0.5, 0.0}, {0.4, 0.0}, {0.3, 0.0}};
  CHECK_THROWS_AS(Luenberger(m, bad), std::invalid_argument);
}

TEST_CASE("internal model holds the output error over the horizon") {
  const LinearModel m = cases::cstr_model(false);
  InternalModel im(m, {});
  CHECK(im.nxhat() == 2);
  im.prepare(m.yop());
  CHECK(im.output_bias().norm() == 0.0);
  const VectorXd det = internal_model_predict(im, m.uop(), 5);
  CHECK((det - m.yop().replicate(5, 1)).norm() <= 1e-12);
  im.update(m.uop(), m.yop());
  const Eigen::Vector2d bias(1.5, -0.5);
  im.prepare(m.yop() + bias);
  CHECK((im.output_bias() - bias).norm() <= 1e-12);
  const VectorXd pr = internal_model_predict(im, m.uop(), 7);
  for (int j = 0; j < 7; ++j) CHECK((pr.segment(2 * j, 2) - (m.yop() + bias)).norm() <= 1e-12);

  const LinearModel unstable(MatrixXd::Constant(1, 1, 1.1), MatrixXd::Ones(1, 1), MatrixXd::Ones(1, 1), 1.0);
  CHECK_THROWS_AS(InternalModel(unstable, {}), std::invalid_argument);
  EstimatorConfig with_int;
  with_int.nint_ym = {1, 1};
  CHECK_THROWS_AS(InternalModel(m, with_int), std::invalid_argument);
}

TEST_CASE("call order is enforced") {
  const LinearModel m = cases::cstr_model(false);
  KalmanFilter kf(m, {});
  CHECK_THROWS_AS(kf.update(m.uop(), m.yop()), std::logic_error);
  kf.prepare(m.yop());
  CHECK_THROWS_AS(kf.prepare(m.yop()), std::logic_error);
  kf.update(m.uop(), m.yop());
  CHECK(kf.period() == 1);
  VectorXd bad = m.yop();
  bad[0] = std::nan("");
  CHECK_THROWS_AS(kf.prepare(bad), std::invalid_argument);
  CHECK_THROWS_AS(kf.prepare(VectorXd::Zero(3)), std::invalid_argument);
}

TEST_CASE("model updates keep the estimate in absolute terms") {
  const NonlinearModel pend = cases::pendulum_model();
  EstimatorConfig cfg;
  cfg.nint_u = {1};
  const LinearModel lin0 = linearize(pend, Eigen::Vector2d(0.0, 0.0), VectorXd::Zero(1));
  KalmanFilter kf(lin0, cfg);
  kf.set_state(Eigen::Vector3d(0.2, 0.1, 0.0));
  const VectorXd y0 = kf.output();
  const LinearModel lin1 = linearize(pend, Eigen::Vector2d(0.3, -0.2), VectorXd::Zero(1));
  kf.set_model(lin1);
  CHECK((kf.xhat().head(2) - (Eigen::Vector2d(0.2, 0.1) - Eigen::Vector2d(0.3, -0.2))).norm() <= 1e-12);
  CHECK((kf.output() - y0).norm() <= 1e-9);
  SteadyKalmanFilter skf(lin0, cfg);
  CHECK_THROWS_AS(skf.set_model(lin1), std::logic_error);
}

TEST_CASE("snapshots restore the estimator exactly") {
  std::mt19937_64 rng(8);
  const RandomPlant p = random_plant(rng, 2, 1, 1);
  EstimatorConfig cfg = plain_config(1);
  cfg.He = 3;
  MovingHorizonEstimator a(LinearModel(p.A, p.B, p.C, 1.0), cfg);
  for (int k = 0; k < 4; ++k) {
    const VectorXd y = gaussian(rng, 1, 1.0);
    a.prepare(y);
    a.update(VectorXd::Zero(1), y);
  }
  const nlohmann::json snap = a.snapshot();
  MovingHorizonEstimator b(LinearModel(p.A, p.B, p.C, 1.0), cfg);
  b.restore(nlohmann::json::parse(snap.dump()));
  const VectorXd y = VectorXd::Constant(1, 0.7);
  CHECK((a.prepare(y) - b.prepare(y)).norm() == 0.0);
  KalmanFilter kf(LinearModel(p.A, p.B, p.C, 1.0), {});
  CHECK_THROWS_AS(kf.restore(snap), std::invalid_argument);
}

TEST_CASE("estimator kinds parse from names") {
  CHECK(estimator_kind_from_string("ukf") == EstimatorKind::UnscentedKalmanFilter);
  CHECK(estimator_kind_from_string("MovingHorizonEstimator") == EstimatorKind::MovingHorizonEstimator);
  CHECK_THROWS_AS(estimator_kind_from_string("particle"), std::invalid_argument);
  const auto e = build_estimator(EstimatorKind::InternalModel, cases::cstr_model(true), {});
  CHECK(e->kind() == EstimatorKind::InternalModel);
  CHECK(contains(e->summary(), " 1 measured disturbances d"));
}
