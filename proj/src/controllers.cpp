#include "mpctk/controllers.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "mpctk/linalg.hpp"

namespace mpctk {

std::string to_string(ControllerKind k) {
  switch (k) {
    case ControllerKind::LinMPC:
      return "LinMPC";
    case ControllerKind::ExplicitMPC:
      return "ExplicitMPC";
    case ControllerKind::NonLinMPC:
      return "NonLinMPC";
  }
  return "unknown";
}

// ------------------------------------------------------------- prediction

PredictionOperator PredictionOperator::build(const AugmentedModel::Linear& L, int Hp, int Hc) {
  const auto n = L.A.rows();
  const auto nu = L.Bu.cols();
  const auto nd = L.Bd.cols();
  const auto ny = L.C.rows();
  PredictionOperator P;
  P.Ex.resize(ny * Hp, n);
  P.Eu.resize(ny * Hp, nu);
  P.Ed.resize(ny * Hp, nd);
  P.ED = MatrixXd::Zero(ny * Hp, nd * Hp);
  P.E.resize(ny * Hp, nu * Hc);
  P.Ek.resize(ny * Hp);
  P.S = MatrixXd::Zero(nu * Hp, nu * Hc);
  P.T.resize(nu * Hp, nu);

  // x(k+j) = Px x + Pu u0 + Pd d0 + PD D0 + PE dU + c
  MatrixXd Px = MatrixXd::Identity(n, n);
  MatrixXd Pu = MatrixXd::Zero(n, nu);
  MatrixXd Pd = MatrixXd::Zero(n, nd);
  MatrixXd PD = MatrixXd::Zero(n, nd * Hp);
  MatrixXd PE = MatrixXd::Zero(n, nu * Hc);
  VectorXd c = VectorXd::Zero(n);
  for (int j = 1; j <= Hp; ++j) {
    // input applied over [k+j-1, k+j)
    const int moves = std::min(j, Hc);
    for (int i = 0; i < moves; ++i) P.S.block((j - 1) * nu, i * nu, nu, nu).setIdentity();
    P.T.middleRows((j - 1) * nu, nu).setIdentity();

    Px = L.A * Px;
    Pu = L.A * Pu + L.Bu;
    PE = L.A * PE;
    for (int i = 0; i < moves; ++i) PE.middleCols(i * nu, nu) += L.Bu;
    Pd = L.A * Pd;
    PD = L.A * PD;
    if (j == 1) {
      Pd += L.Bd;
    } else {
      PD.middleCols((j - 2) * nd, nd) += L.Bd;
    }
    c = L.A * c + L.fop;

    const auto r = (j - 1) * ny;
    P.Ex.middleRows(r, ny) = L.C * Px;
    P.Eu.middleRows(r, ny) = L.C * Pu;
    P.Ed.middleRows(r, ny) = L.C * Pd;
    P.ED.middleRows(r, ny) = L.C * PD;
    P.ED.block(r, (j - 1) * nd, ny, nd) += L.Dd;
    P.E.middleRows(r, ny) = L.C * PE;
    P.Ek.segment(r, ny) = L.C * c + L.hop;
  }
  P.tx = Px;
  P.tu = Pu;
  P.td = Pd;
  P.tD = PD;
  P.tE = PE;
  P.tk = c;
  return P;
}

// ---------------------------------------------------- PredictiveController

namespace {

MatrixXd weight_matrix(const MatrixXd& full, const VectorXd& per_channel, int channels, int horizon, double def,
                       const char* what) {
  const int size = channels * horizon;
  if (full.size() > 0) {
    require(full.rows() == size && full.cols() == size,
            std::string(what) + ": expected a " + std::to_string(size) + "x" + std::to_string(size) + " matrix");
    require((full - full.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, full.cwiseAbs().maxCoeff()),
            std::string(what) + " must be symmetric");
    require(min_symmetric_eigenvalue(full) >= -1e-12 * std::max(1.0, full.cwiseAbs().maxCoeff()),
            std::string(what) + " must be positive semidefinite");
    return symmetrize(full);
  }
  VectorXd w = per_channel.size() ? per_channel : VectorXd::Constant(channels, def);
  require(w.size() == channels, std::string(what) + ": expected one weight per channel");
  require((w.array() >= 0.0).all() && w.allFinite(), std::string(what) + ": weights must be finite and >= 0");
  return w.replicate(horizon, 1).asDiagonal();
}

VectorXd expand(const VectorXd& v, int channels, int horizon, const char* what) {
  if (v.size() == channels) return v.replicate(horizon, 1);
  require(v.size() == channels * horizon, std::string(what) + ": expected " + std::to_string(channels) + " or " +
                                              std::to_string(channels * horizon) + " values");
  return v;
}

VectorXd stack(const VectorXd& v, int times) { return v.replicate(times, 1); }

}  // namespace

PredictiveController::PredictiveController(std::unique_ptr<StateEstimator> estim, const MpcTuning& tuning,
                                           bool allow_economic)
    : estim_(std::move(estim)), Hp_(tuning.Hp), Hc_(tuning.Hc), Cwt_(tuning.Cwt), Ewt_(tuning.Ewt) {
  require(estim_ != nullptr, "controller needs a state estimator");
  require(Hp_ >= 1, "prediction horizon Hp must be >= 1");
  require(Hc_ >= 1, "control horizon Hc must be >= 1");
  require(Hc_ <= Hp_, "control horizon Hc must not exceed Hp");
  require(!std::isnan(Cwt_) && Cwt_ > 0.0, "slack weight Cwt must be > 0 (or infinite)");
  require(std::isfinite(Ewt_) && Ewt_ >= 0.0, "economic weight Ewt must be finite and >= 0");
  require(allow_economic || Ewt_ == 0.0, "economic weight requires the nonlinear controller");
  const int nu_ = nu(), ny_ = ny(), n = model().nxhat();
  M_ = weight_matrix(tuning.M_Hp, tuning.Mwt, ny_, Hp_, 1.0, "output weight");
  N_ = weight_matrix(tuning.N_Hc, tuning.Nwt, nu_, Hc_, 0.1, "move weight");
  L_ = weight_matrix(tuning.L_Hp, tuning.Lwt, nu_, Hp_, 0.0, "input weight");

  const double inf = kInfinity;
  con_.Umin = VectorXd::Constant(nu_ * Hp_, -inf);
  con_.Umax = VectorXd::Constant(nu_ * Hp_, inf);
  con_.dUmin = VectorXd::Constant(nu_ * Hc_, -inf);
  con_.dUmax = VectorXd::Constant(nu_ * Hc_, inf);
  con_.Ymin = VectorXd::Constant(ny_ * Hp_, -inf);
  con_.Ymax = VectorXd::Constant(ny_ * Hp_, inf);
  con_.xmin = VectorXd::Constant(n, -inf);
  con_.xmax = VectorXd::Constant(n, inf);
  con_.c_Umin = VectorXd::Zero(nu_ * Hp_);
  con_.c_Umax = VectorXd::Zero(nu_ * Hp_);
  con_.c_dUmin = VectorXd::Zero(nu_ * Hc_);
  con_.c_dUmax = VectorXd::Zero(nu_ * Hc_);
  con_.c_Ymin = VectorXd::Ones(ny_ * Hp_);
  con_.c_Ymax = VectorXd::Ones(ny_ * Hp_);
  con_.c_xmin = VectorXd::Ones(n);
  con_.c_xmax = VectorXd::Ones(n);

  u_prev_ = model().base().uop();
  dU_prev_ = VectorXd::Zero(nu_ * Hc_);
}

void PredictiveController::set_last_u(const VectorXd& u) {
  require_size(u, nu(), "u");
  require(u.allFinite(), "u must be finite");
  u_prev_ = u;
}

const VectorXd& PredictiveController::init(const VectorXd& u, const VectorXd& ym, const VectorXd& d) {
  set_last_u(u);
  dU_prev_.setZero();
  return estim_->init(u, ym, d);
}

PredictiveController& PredictiveController::set_constraints(const ConstraintSpec& s) {
  const int nu_ = nu(), ny_ = ny(), n = model().nxhat();
  MpcConstraints c = con_;
  auto put = [](VectorXd& dst, const VectorXd& src, int ch, int hz, const char* what) {
    if (src.size() > 0) dst = expand(src, ch, hz, what);
  };
  put(c.Umin, s.umin, nu_, Hp_, "umin");
  put(c.Umax, s.umax, nu_, Hp_, "umax");
  put(c.dUmin, s.dumin, nu_, Hc_, "dumin");
  put(c.dUmax, s.dumax, nu_, Hc_, "dumax");
  put(c.Ymin, s.ymin, ny_, Hp_, "ymin");
  put(c.Ymax, s.ymax, ny_, Hp_, "ymax");
  put(c.xmin, s.xhatmin, n, 1, "xhatmin");
  put(c.xmax, s.xhatmax, n, 1, "xhatmax");
  put(c.c_Umin, s.c_umin, nu_, Hp_, "c_umin");
  put(c.c_Umax, s.c_umax, nu_, Hp_, "c_umax");
  put(c.c_dUmin, s.c_dumin, nu_, Hc_, "c_dumin");
  put(c.c_dUmax, s.c_dumax, nu_, Hc_, "c_dumax");
  put(c.c_Ymin, s.c_ymin, ny_, Hp_, "c_ymin");
  put(c.c_Ymax, s.c_ymax, ny_, Hp_, "c_ymax");
  put(c.c_xmin, s.c_xhatmin, n, 1, "c_xhatmin");
  put(c.c_xmax, s.c_xhatmax, n, 1, "c_xhatmax");
  auto ordered = [](const VectorXd& lo, const VectorXd& hi, const char* what) {
    for (Eigen::Index i = 0; i < lo.size(); ++i) {
      require(!std::isnan(lo[i]) && !std::isnan(hi[i]), std::string(what) + " bounds must not be NaN");
      require(lo[i] <= hi[i], std::string(what) + ": min exceeds max");
    }
  };
  ordered(c.Umin, c.Umax, "U");
  ordered(c.dUmin, c.dUmax, "ΔU");
  ordered(c.Ymin, c.Ymax, "Y");
  ordered(c.xmin, c.xmax, "terminal x̂");
  for (const VectorXd* v : {&c.c_Umin, &c.c_Umax, &c.c_dUmin, &c.c_dUmax, &c.c_Ymin, &c.c_Ymax, &c.c_xmin, &c.c_xmax}) {
    require(v->allFinite() && (v->array() >= 0.0).all(), "softness parameters must be finite and >= 0");
  }
  if (!supports_constraints()) {
    auto all_inf = [](const VectorXd& v) { return (v.array().abs() == kInfinity).all(); };
    require(all_inf(c.Umin) && all_inf(c.Umax) && all_inf(c.dUmin) && all_inf(c.dUmax) && all_inf(c.Ymin) &&
                all_inf(c.Ymax) && all_inf(c.xmin) && all_inf(c.xmax),
            to_string(kind()) + " does not support constraints");
  }
  con_ = std::move(c);
  on_constraints_changed();
  return *this;
}

PredictiveController& PredictiveController::set_model(const SimModel& model) {
  estim_->set_model(model);
  on_model_changed();
  return *this;
}

PredictiveController::RowCount PredictiveController::row_count() const {
  auto finite = [](const VectorXd& v) { return static_cast<int>((v.array().abs() < kInfinity).count()); };
  RowCount r;
  r.U = finite(con_.Umin) + finite(con_.Umax);
  r.dU = finite(con_.dUmin) + finite(con_.dUmax);
  r.Y = finite(con_.Ymin) + finite(con_.Ymax);
  r.x = finite(con_.xmin) + finite(con_.xmax);
  return r;
}

PredictiveController::Signals PredictiveController::resolve(const MoveRequest& req) const {
  const SimModel& base = model().base();
  const int nu_ = nu(), ny_ = ny(), nd = model().nd();
  Signals s;
  if (req.Ryhat.size() > 0) {
    require_size(req.Ryhat, ny_ * Hp_, "R̂y");
    s.Ry = req.Ryhat;
    s.ry = req.Ryhat.head(ny_);
  } else {
    require_size(req.ry, ny_, "ry");
    s.ry = req.ry;
    s.Ry = stack(req.ry, Hp_);
  }
  require(s.Ry.allFinite(), "setpoints must be finite");
  if (nd > 0) {
    require_size(req.d, nd, "d");
    require(req.d.allFinite(), "measured disturbance must be finite");
    s.d0 = req.d - base.dop();
  } else {
    require(req.d.size() == 0, "model has no measured disturbance");
    s.d0 = VectorXd();
  }
  if (req.Dhat.size() > 0) {
    require_size(req.Dhat, nd * Hp_, "D̂");
    s.D0 = req.Dhat - stack(base.dop(), Hp_);
  } else {
    s.D0 = stack(s.d0, Hp_);
  }
  if (req.Ruhat.size() > 0) {
    require_size(req.Ruhat, nu_ * Hp_, "R̂u");
    s.Ru0 = req.Ruhat - stack(base.uop(), Hp_);
  } else {
    s.Ru0 = VectorXd::Zero(nu_ * Hp_);
  }
  if (nd == 0) {
    s.d0 = VectorXd::Zero(0);
    s.D0 = VectorXd::Zero(0);
  }
  return s;
}

const MoveResult& PredictiveController::move(const MoveRequest& req) {
  if (!estim_->prepared()) throw std::logic_error("move: prepare the state estimate first in this period");
  solve(req);
  // hard input bounds hold exactly on the applied input, not just to solver tolerance
  for (int i = 0; i < nu(); ++i) {
    double& u = info_.u[i];
    if (con_.c_Umin[i] == 0.0 && u < con_.Umin[i]) u = con_.Umin[i];
    if (con_.c_Umax[i] == 0.0 && u > con_.Umax[i]) u = con_.Umax[i];
    info_.dU[i] = u - u_prev_[i];
  }
  u_prev_ = info_.u;
  dU_prev_ = info_.dU;
  return info_;
}

void PredictiveController::fallback(const std::string& why) {
  const int nu_ = nu();
  VectorXd dU(nu_ * Hc_);
  for (int i = 0; i < Hc_; ++i) {
    const int src = std::min(i + 1, Hc_ - 1);
    dU.segment(i * nu_, nu_) = dU_prev_.segment(src * nu_, nu_);
  }
  VectorXd u = u_prev_ + dU.head(nu_);
  // keep the applied input inside its first-step bounds
  u = u.cwiseMax(con_.Umin.head(nu_)).cwiseMin(con_.Umax.head(nu_));
  info_ = MoveResult{};
  info_.u = u;
  info_.dU = dU;
  info_.dU.head(nu_) = u - u_prev_;
  info_.status = why;
  info_.degraded = true;
}

std::string PredictiveController::summary() const {
  const AugmentedModel& m = model();
  std::ostringstream os;
  os << to_string(kind()) << " controller with a sample time Ts = " << m.base().Ts() << " s, " << optimizer_name()
     << " optimizer, " << to_string(estim_->kind()) << " estimator and:\n";
  auto line = [&](int v, const std::string& text) { os << std::setw(3) << v << " " << text << "\n"; };
  line(Hp_, "prediction steps Hp");
  line(Hc_, "control steps Hc");
  line(has_slack() ? 1 : 0, "slack variable ε (control constraints)");
  line(m.nu(), "manipulated inputs u (" + std::to_string(m.nint_u_total()) + " integrating states)");
  line(m.nxhat(), "estimated states x̂");
  line(m.nym(), "measured outputs ym (" + std::to_string(m.nint_ym_total()) + " integrating states)");
  line(m.ny() - m.nym(), "unmeasured outputs yu");
  line(m.nd(), "measured disturbances d");
  return os.str();
}

// ------------------------------------------------------------------ LinMPC

namespace {

struct RowRef {
  int group;  // 0 U, 1 dU, 2 Y, 3 terminal x, 4 slack sign
  int index;
  double sign;
};

MatrixXd linear_hessian(const PredictionOperator& P, const MatrixXd& M, const MatrixXd& N, const MatrixXd& L) {
  return symmetrize(2.0 * (P.E.transpose() * M * P.E + N + P.S.transpose() * L * P.S));
}

/// Free response terms shared by the linear controllers.
struct FreeResponse {
  VectorXd F;   // absolute Ŷ at ΔU = 0
  VectorXd Uf;  // absolute U at ΔU = 0
  VectorXd xf;  // terminal x̂ at ΔU = 0
  VectorXd u0;  // u(k-1) in deviation
};

FreeResponse free_response(const PredictionOperator& P, const StateEstimator& estim, const VectorXd& u_prev,
                           const VectorXd& d0, const VectorXd& D0, int Hp) {
  const SimModel& base = estim.model().base();
  FreeResponse r;
  r.u0 = u_prev - base.uop();
  const VectorXd& x = estim.xhat();
  r.F = P.Ex * x + P.Eu * r.u0 + P.Ek + stack(base.yop() + estim.output_bias(), Hp);
  r.xf = P.tx * x + P.tu * r.u0 + P.tk;
  if (d0.size() > 0) {
    r.F += P.Ed * d0 + P.ED * D0;
    r.xf += P.td * d0 + P.tD * D0;
  }
  r.Uf = P.T * r.u0 + stack(base.uop(), Hp);
  return r;
}

}  // namespace

LinMPC::LinMPC(std::unique_ptr<StateEstimator> estim, const MpcTuning& tuning)
    : PredictiveController(std::move(estim), tuning, false) {
  require(model().base().is_linear(), "LinMPC needs a linear plant model");
  rebuild();
}

LinMPC::LinMPC(const LinearModel& model, const MpcTuning& tuning)
    : LinMPC(std::make_unique<SteadyKalmanFilter>(model, EstimatorConfig{}), tuning) {}

void LinMPC::on_constraints_changed() { rebuild(); }
void LinMPC::on_model_changed() { rebuild(); }

void LinMPC::rebuild() {
  pred_ = PredictionOperator::build(model().linear(), Hp_, Hc_);
  H_ = linear_hessian(pred_, M_, N_, L_);
  const int nvar = nu() * Hc_;
  const int nzv = nz();
  qp_ = QpProblem{};
  qp_.H = MatrixXd::Zero(nzv, nzv);
  qp_.H.topLeftCorner(nvar, nvar) = H_;
  if (has_slack()) qp_.H(nvar, nvar) = 2.0 * Cwt_;

  std::vector<VectorXd> rows;
  auto add = [&](const auto& row, double sign, double soft) {
    VectorXd a = VectorXd::Zero(nzv);
    a.head(nvar) = sign * row.transpose();
    if (has_slack()) a[nvar] = -soft;
    rows.push_back(std::move(a));
  };
  const MpcConstraints& c = con_;
  auto group = [&](const MatrixXd& G, const VectorXd& lo, const VectorXd& hi, const VectorXd& clo,
                   const VectorXd& chi) {
    for (Eigen::Index i = 0; i < lo.size(); ++i) {
      if (std::isfinite(hi[i])) add(G.row(i), 1.0, chi[i]);
      if (std::isfinite(lo[i])) add(G.row(i), -1.0, clo[i]);
    }
  };
  group(pred_.S, c.Umin, c.Umax, c.c_Umin, c.c_Umax);
  group(MatrixXd::Identity(nvar, nvar), c.dUmin, c.dUmax, c.c_dUmin, c.c_dUmax);
  group(pred_.E, c.Ymin, c.Ymax, c.c_Ymin, c.c_Ymax);
  group(pred_.tE, c.xmin, c.xmax, c.c_xmin, c.c_xmax);
  if (has_slack()) {
    VectorXd a = VectorXd::Zero(nzv);
    a[nvar] = -1.0;
    rows.push_back(std::move(a));
  }
  qp_.A.resize(static_cast<Eigen::Index>(rows.size()), nzv);
  for (std::size_t i = 0; i < rows.size(); ++i) qp_.A.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  qp_.b = VectorXd::Zero(static_cast<Eigen::Index>(rows.size()));
  qp_.q = VectorXd::Zero(nzv);
  solver_.reset();
}

void LinMPC::solve(const MoveRequest& req) {
  const Signals s = resolve(req);
  const FreeResponse fr = free_response(pred_, *estim_, u_prev_, s.d0, s.D0, Hp_);
  const int nvar = nu() * Hc_;

  const VectorXd ey = s.Ry - fr.F;
  const VectorXd eu = s.Ru0 - pred_.T * fr.u0;
  qp_.q.setZero();
  qp_.q.head(nvar) = -2.0 * (pred_.E.transpose() * (M_ * ey) + pred_.S.transpose() * (L_ * eu));

  // right-hand sides, same row order as rebuild()
  Eigen::Index r = 0;
  const MpcConstraints& c = con_;
  auto group = [&](const VectorXd& free, const VectorXd& lo, const VectorXd& hi) {
    for (Eigen::Index i = 0; i < lo.size(); ++i) {
      if (std::isfinite(hi[i])) qp_.b[r++] = hi[i] - free[i];
      if (std::isfinite(lo[i])) qp_.b[r++] = free[i] - lo[i];
    }
  };
  group(fr.Uf, c.Umin, c.Umax);
  group(VectorXd::Zero(nvar), c.dUmin, c.dUmax);
  group(fr.F, c.Ymin, c.Ymax);
  group(fr.xf, c.xmin, c.xmax);
  if (has_slack()) qp_.b[r++] = 0.0;

  const QpSolution sol = solver_.solve(qp_);
  if (sol.status != QpStatus::Optimal) {
    fallback("QP " + to_string(sol.status));
    info_.iterations = sol.iterations;
    return;
  }
  info_ = MoveResult{};
  info_.dU = sol.z.head(nvar);
  info_.epsilon = has_slack() ? sol.z[nvar] : 0.0;
  info_.u = u_prev_ + info_.dU.head(nu());
  info_.Yhat = fr.F + pred_.E * info_.dU;
  info_.U = fr.Uf + pred_.S * info_.dU;
  info_.xhat_end = fr.xf + pred_.tE * info_.dU;
  info_.J = sol.objective + ey.dot(M_ * ey) + eu.dot(L_ * eu);
  info_.status = to_string(sol.status);
  info_.iterations = sol.iterations;
  info_.active_set = sol.active_set;
}

// ------------------------------------------------------------- ExplicitMPC

ExplicitMPC::ExplicitMPC(std::unique_ptr<StateEstimator> estim, const MpcTuning& tuning)
    : PredictiveController(std::move(estim), tuning, false) {
  require(model().base().is_linear(), "ExplicitMPC needs a linear plant model");
  rebuild();
}

ExplicitMPC::ExplicitMPC(const LinearModel& model, const MpcTuning& tuning)
    : ExplicitMPC(std::make_unique<SteadyKalmanFilter>(model, EstimatorConfig{}), tuning) {}

void ExplicitMPC::on_constraints_changed() {}
void ExplicitMPC::on_model_changed() { rebuild(); }

void ExplicitMPC::rebuild() {
  pred_ = PredictionOperator::build(model().linear(), Hp_, Hc_);
  H_ = linear_hessian(pred_, M_, N_, L_);
  llt_.compute(H_);
  const double scale = std::max(1.0, H_.cwiseAbs().maxCoeff());
  if (llt_.info() != Eigen::Success || min_symmetric_eigenvalue(H_) <= 1e-12 * scale) {
    throw NumericalError("ExplicitMPC: singular Hessian (check the weights)");
  }
}

void ExplicitMPC::solve(const MoveRequest& req) {
  const Signals s = resolve(req);
  const FreeResponse fr = free_response(pred_, *estim_, u_prev_, s.d0, s.D0, Hp_);
  const VectorXd ey = s.Ry - fr.F;
  const VectorXd eu = s.Ru0 - pred_.T * fr.u0;
  const VectorXd q = -2.0 * (pred_.E.transpose() * (M_ * ey) + pred_.S.transpose() * (L_ * eu));
  info_ = MoveResult{};
  info_.dU = llt_.solve(-q);
  info_.u = u_prev_ + info_.dU.head(nu());
  info_.Yhat = fr.F + pred_.E * info_.dU;
  info_.U = fr.Uf + pred_.S * info_.dU;
  info_.xhat_end = fr.xf + pred_.tE * info_.dU;
  info_.J = 0.5 * info_.dU.dot(H_ * info_.dU) + q.dot(info_.dU) + ey.dot(M_ * ey) + eu.dot(L_ * eu);
  info_.status = "optimal";
}

// --------------------------------------------------------------- NonLinMPC

namespace {

struct Entry {
  int i, j;
  double v;
};

std::vector<Entry> nonzeros(const MatrixXd& M) {
  std::vector<Entry> out;
  for (Eigen::Index j = 0; j < M.cols(); ++j) {
    for (Eigen::Index i = 0; i < M.rows(); ++i) {
      if (M(i, j) != 0.0) out.push_back({static_cast<int>(i), static_cast<int>(j), M(i, j)});
    }
  }
  return out;
}

}  // namespace

/// Snapshot of everything one optimization needs; shared by the objective
/// and constraint closures.
struct NonLinMPC::Context {
  const AugmentedModel* aug = nullptr;
  int Hp = 0, Hc = 0, nu = 0, ny = 0, nd = 0, n = 0;
  bool slack = false;
  double C = 0.0, Ewt = 0.0;
  VectorXd xhat, u0, d0, D0, Ry, Ru0, ybias, uop, yk;
  VectorXd DE;  // absolute [d(k); D̂]
  std::vector<Entry> M, N, L;
  EconomicFunction JE;
  std::vector<double> p;
  // nonlinear bound rows: group 2 = Y, 3 = terminal
  std::vector<RowRef> grows;
  std::vector<double> gbound, gsoft;

  template <class T>
  void simulate(std::span<const T> z, std::vector<T>& Y, std::vector<T>& U0, std::vector<T>& xend) const {
    std::vector<T> x(static_cast<std::size_t>(n)), xn(static_cast<std::size_t>(n));
    std::vector<T> u(static_cast<std::size_t>(nu)), d(static_cast<std::size_t>(nd)), y(static_cast<std::size_t>(ny));
    for (int i = 0; i < n; ++i) x[static_cast<std::size_t>(i)] = T(xhat[i]);
    for (int i = 0; i < nu; ++i) u[static_cast<std::size_t>(i)] = T(u0[i]);
    for (int i = 0; i < nd; ++i) d[static_cast<std::size_t>(i)] = T(d0[i]);
    Y.assign(static_cast<std::size_t>(ny * Hp), T(0.0));
    U0.assign(static_cast<std::size_t>(nu * Hp), T(0.0));
    for (int j = 0; j < Hp; ++j) {
      if (j < Hc) {
        for (int i = 0; i < nu; ++i) u[static_cast<std::size_t>(i)] += z[static_cast<std::size_t>(j * nu + i)];
      }
      for (int i = 0; i < nu; ++i) U0[static_cast<std::size_t>(j * nu + i)] = u[static_cast<std::size_t>(i)];
      aug->f<T>(std::span<T>(xn), std::span<const T>(x), std::span<const T>(u), std::span<const T>(d));
      std::swap(x, xn);
      for (int i = 0; i < nd; ++i) d[static_cast<std::size_t>(i)] = T(D0[j * nd + i]);
      aug->h<T>(std::span<T>(y), std::span<const T>(x), std::span<const T>(d));
      for (int i = 0; i < ny; ++i) Y[static_cast<std::size_t>(j * ny + i)] = y[static_cast<std::size_t>(i)] + ybias[i];
    }
    xend = x;
  }

  template <class T>
  static T quad(const std::vector<Entry>& W, const std::vector<T>& e) {
    T s = T(0.0);
    for (const Entry& w : W) s += w.v * e[static_cast<std::size_t>(w.i)] * e[static_cast<std::size_t>(w.j)];
    return s;
  }

  template <class T>
  T objective(std::span<const T> z) const {
    std::vector<T> Y, U0, xend;
    simulate(z, Y, U0, xend);
    std::vector<T> e(Y.size()), du(static_cast<std::size_t>(nu * Hc)), eu(U0.size());
    for (std::size_t i = 0; i < Y.size(); ++i) e[i] = Ry[static_cast<Eigen::Index>(i)] - Y[i];
    for (std::size_t i = 0; i < du.size(); ++i) du[i] = z[i];
    for (std::size_t i = 0; i < U0.size(); ++i) eu[i] = Ru0[static_cast<Eigen::Index>(i)] - U0[i];
    T J = quad(M, e) + quad(N, du) + quad(L, eu);
    if (slack) {
      const T eps = z[static_cast<std::size_t>(nu * Hc)];
      J += C * eps * eps;
    }
    if (Ewt != 0.0 && JE) {
      std::vector<T> UE(static_cast<std::size_t>(nu * (Hp + 1))), YE(static_cast<std::size_t>(ny * (Hp + 1)));
      for (int j = 0; j < Hp; ++j) {
        for (int i = 0; i < nu; ++i) {
          UE[static_cast<std::size_t>(j * nu + i)] = U0[static_cast<std::size_t>(j * nu + i)] + uop[i];
        }
      }
      for (int i = 0; i < nu; ++i) UE[static_cast<std::size_t>(Hp * nu + i)] = UE[static_cast<std::size_t>((Hp - 1) * nu + i)];
      for (int i = 0; i < ny; ++i) YE[static_cast<std::size_t>(i)] = T(yk[i]);
      for (std::size_t i = 0; i < Y.size(); ++i) YE[static_cast<std::size_t>(ny) + i] = Y[i];
      const std::span<const T> ue(UE), ye(YE);
      const std::span<const double> de(DE.data(), static_cast<std::size_t>(DE.size()));
      if constexpr (std::is_same_v<T, double>) {
        J += Ewt * JE.real(ue, ye, de, p);
      } else {
        J += Ewt * JE.dual(ue, ye, de, p);
      }
    }
    return J;
  }

  template <class T>
  void constraints(std::span<const T> z, std::span<T> g) const {
    std::vector<T> Y, U0, xend;
    simulate(z, Y, U0, xend);
    const T eps = slack ? z[static_cast<std::size_t>(nu * Hc)] : T(0.0);
    for (std::size_t r = 0; r < grows.size(); ++r) {
      const RowRef& row = grows[r];
      const T val = row.group == 2 ? Y[static_cast<std::size_t>(row.index)] : xend[static_cast<std::size_t>(row.index)];
      T gi = row.sign * (val - gbound[r]);
      if (slack) gi -= gsoft[r] * eps;
      g[r] = gi;
    }
  }
};

NonLinMPC::NonLinMPC(std::unique_ptr<StateEstimator> estim, const MpcTuning& tuning, EconomicFunction JE,
                     std::vector<double> p, NlpOptions opt)
    : PredictiveController(std::move(estim), tuning, true), JE_(std::move(JE)), p_(std::move(p)), opt_(opt) {
  require(Ewt_ == 0.0 || static_cast<bool>(JE_), "economic weight given without an economic function");
}

NlpOptions NonLinMPC::default_options() {
  NlpOptions o;
  o.max_iterations = 100;
  o.step_tol = 1e-10;
  o.kkt_tol = 1e-9;
  o.feasibility_tol = 1e-8;
  return o;
}

std::shared_ptr<const NonLinMPC::Context> NonLinMPC::context(const MoveRequest& req) const {
  const Signals s = resolve(req);
  const AugmentedModel& m = model();
  const SimModel& base = m.base();
  auto ctx = std::make_shared<Context>();
  ctx->aug = &m;
  ctx->Hp = Hp_;
  ctx->Hc = Hc_;
  ctx->nu = m.nu();
  ctx->ny = m.ny();
  ctx->nd = m.nd();
  ctx->n = m.nxhat();
  ctx->slack = has_slack();
  ctx->C = has_slack() ? Cwt_ : 0.0;
  ctx->Ewt = Ewt_;
  ctx->xhat = estim_->xhat();
  ctx->u0 = u_prev_ - base.uop();
  ctx->d0 = s.d0.size() ? s.d0 : VectorXd::Zero(m.nd());
  ctx->D0 = s.D0.size() ? s.D0 : VectorXd::Zero(m.nd() * Hp_);
  ctx->Ry = s.Ry;
  ctx->Ru0 = s.Ru0;
  ctx->ybias = base.yop() + estim_->output_bias();
  ctx->uop = base.uop();
  ctx->yk = m.h(ctx->xhat, ctx->d0) + ctx->ybias;
  ctx->DE.resize(m.nd() * (Hp_ + 1));
  ctx->DE << ctx->d0, ctx->D0;
  if (m.nd() > 0) ctx->DE += stack(base.dop(), Hp_ + 1);
  ctx->M = nonzeros(M_);
  ctx->N = nonzeros(N_);
  ctx->L = nonzeros(L_);
  ctx->JE = JE_;
  ctx->p = p_;
  auto add = [&](int group, const VectorXd& lo, const VectorXd& hi, const VectorXd& clo, const VectorXd& chi) {
    for (Eigen::Index i = 0; i < lo.size(); ++i) {
      if (std::isfinite(hi[i])) {
        ctx->grows.push_back({group, static_cast<int>(i), 1.0});
        ctx->gbound.push_back(hi[i]);
        ctx->gsoft.push_back(chi[i]);
      }
      if (std::isfinite(lo[i])) {
        ctx->grows.push_back({group, static_cast<int>(i), -1.0});
        ctx->gbound.push_back(lo[i]);
        ctx->gsoft.push_back(clo[i]);
      }
    }
  };
  add(2, con_.Ymin, con_.Ymax, con_.c_Ymin, con_.c_Ymax);
  add(3, con_.xmin, con_.xmax, con_.c_xmin, con_.c_xmax);
  return ctx;
}

NlpProblem NonLinMPC::problem(const std::shared_ptr<const Context>& ctx) const {
  const int nvar = nu() * Hc_;
  const int nzv = nz();
  NlpProblem nlp;
  nlp.n = nzv;
  nlp.set_objective([ctx](auto z) { return ctx->objective(z); });
  if (!ctx->grows.empty()) {
    nlp.set_constraints(static_cast<int>(ctx->grows.size()), [ctx](auto z, auto g) { ctx->constraints(z, g); });
  }

  // U and ΔU rows are affine in the increments
  std::vector<VectorXd> rows;
  std::vector<double> rhs;
  MatrixXd S = MatrixXd::Zero(nu() * Hp_, nvar);
  for (int j = 0; j < Hp_; ++j) {
    for (int i = 0; i <= std::min(j, Hc_ - 1); ++i) S.block(j * nu(), i * nu(), nu(), nu()).setIdentity();
  }
  const VectorXd Uf = stack(u_prev_, Hp_);
  auto add = [&](const MatrixXd& G, const VectorXd& free, const VectorXd& lo, const VectorXd& hi, const VectorXd& clo,
                 const VectorXd& chi) {
    for (Eigen::Index i = 0; i < lo.size(); ++i) {
      auto push = [&](double sign, double bound, double soft) {
        VectorXd a = VectorXd::Zero(nzv);
        a.head(nvar) = sign * G.row(i).transpose();
        if (has_slack()) a[nvar] = -soft;
        rows.push_back(std::move(a));
        rhs.push_back(sign * (bound - free[i]));
      };
      if (std::isfinite(hi[i])) push(1.0, hi[i], chi[i]);
      if (std::isfinite(lo[i])) push(-1.0, lo[i], clo[i]);
    }
  };
  add(S, Uf, con_.Umin, con_.Umax, con_.c_Umin, con_.c_Umax);
  add(MatrixXd::Identity(nvar, nvar), VectorXd::Zero(nvar), con_.dUmin, con_.dUmax, con_.c_dUmin, con_.c_dUmax);
  if (!rows.empty()) {
    nlp.A.resize(static_cast<Eigen::Index>(rows.size()), nzv);
    nlp.b.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      nlp.A.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
      nlp.b[static_cast<Eigen::Index>(i)] = rhs[i];
    }
  }
  if (has_slack()) {
    nlp.lower = VectorXd::Constant(nzv, -kInfinity);
    nlp.lower[nvar] = 0.0;
  }
  // warm start from the previous solution shifted by one period
  nlp.z0 = VectorXd::Zero(nzv);
  for (int i = 0; i + 1 < Hc_; ++i) nlp.z0.segment(i * nu(), nu()) = dU_prev_.segment((i + 1) * nu(), nu());
  return nlp;
}

double NonLinMPC::objective(const VectorXd& z, const MoveRequest& req) const {
  require_size(z, nz(), "z");
  return context(req)->objective(as_span(z));
}

VectorXd NonLinMPC::objective_gradient(const VectorXd& z, const MoveRequest& req) const {
  require_size(z, nz(), "z");
  const auto ctx = context(req);
  return ad::gradient([&ctx](std::span<const Dual8> in) { return ctx->objective(in); }, z);
}

void NonLinMPC::solve(const MoveRequest& req) {
  const auto ctx = context(req);
  const NlpProblem nlp = problem(ctx);
  {
    const double f0 = ctx->objective(as_span(nlp.z0));
    if (!std::isfinite(f0)) throw NumericalError("NonLinMPC: objective is not finite at the initial guess");
  }
  nlp_ = solve_nlp(nlp, opt_);
  const bool usable = nlp_.status == NlpStatus::Optimal ||
                      (nlp_.status == NlpStatus::MaxIterations && nlp_.max_violation <= 1e-6);
  if (!usable) {
    fallback("NLP " + to_string(nlp_.status));
    info_.iterations = nlp_.iterations;
    return;
  }
  const int nvar = nu() * Hc_;
  info_ = MoveResult{};
  info_.dU = nlp_.z.head(nvar);
  info_.epsilon = has_slack() ? nlp_.z[nvar] : 0.0;
  info_.u = u_prev_ + info_.dU.head(nu());
  std::vector<double> Y, U0, xend;
  ctx->simulate(std::span<const double>(nlp_.z.data(), static_cast<std::size_t>(nlp_.z.size())), Y, U0, xend);
  info_.Yhat = Eigen::Map<const VectorXd>(Y.data(), static_cast<Eigen::Index>(Y.size()));
  info_.U = Eigen::Map<const VectorXd>(U0.data(), static_cast<Eigen::Index>(U0.size())) + stack(ctx->uop, Hp_);
  info_.xhat_end = Eigen::Map<const VectorXd>(xend.data(), static_cast<Eigen::Index>(xend.size()));
  info_.J = nlp_.objective;
  info_.status = to_string(nlp_.status);
  info_.iterations = nlp_.iterations;
}

}  // namespace mpctk
