#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mpctk/estimators.hpp"
#include "mpctk/optim.hpp"

namespace mpctk {

/// Horizons and weights. Per-channel vectors are repeated over the horizon
/// unless a full block matrix is given (M_Hp may carry a terminal block).
struct MpcTuning {
  int Hp = 10;
  int Hc = 2;
  VectorXd Mwt;    ///< per output (default 1)
  VectorXd Nwt;    ///< per input (default 0.1)
  VectorXd Lwt;    ///< per input (default 0)
  MatrixXd M_Hp;   ///< ny·Hp square, overrides Mwt
  MatrixXd N_Hc;   ///< nu·Hc square, overrides Nwt
  MatrixXd L_Hp;   ///< nu·Hp square, overrides Lwt
  double Cwt = 1e5;  ///< slack weight; infinity removes the slack variable
  double Ewt = 0.0;  ///< economic weight (nonlinear controller only)
};

/// Bound update. Empty vectors leave the current value untouched; a vector of
/// one value per channel is broadcast over the horizon, a full-length one is
/// taken as time-varying. Softness vectors follow the same rule.
struct ConstraintSpec {
  VectorXd umin, umax, dumin, dumax, ymin, ymax, xhatmin, xhatmax;
  VectorXd c_umin, c_umax, c_dumin, c_dumax, c_ymin, c_ymax, c_xhatmin, c_xhatmax;
};

/// Stored bounds over the horizons.
struct MpcConstraints {
  VectorXd Umin, Umax;     ///< nu·Hp
  VectorXd dUmin, dUmax;   ///< nu·Hc
  VectorXd Ymin, Ymax;     ///< ny·Hp
  VectorXd xmin, xmax;     ///< terminal, nx̂
  VectorXd c_Umin, c_Umax, c_dUmin, c_dUmax, c_Ymin, c_Ymax, c_xmin, c_xmax;
};

/// Horizon signals of one move. Empty members take their defaults: R̂y = ry
/// held, D̂ = d held, R̂u = uop held.
struct MoveRequest {
  VectorXd ry;
  VectorXd d;
  VectorXd Dhat;  ///< d(k+1..k+Hp), nd·Hp
  VectorXd Ryhat; ///< ny·Hp
  VectorXd Ruhat; ///< nu·Hp
};

/// Outcome of one optimization, kept for introspection.
struct MoveResult {
  VectorXd u;        ///< applied input
  VectorXd dU;       ///< optimal increments, nu·Hc
  double epsilon = 0.0;
  VectorXd Yhat;     ///< predicted outputs, ny·Hp
  VectorXd U;        ///< predicted inputs, nu·Hp
  VectorXd xhat_end; ///< predicted x̂(k+Hp)
  double J = 0.0;
  std::string status;
  int iterations = 0;
  bool degraded = false;
  std::vector<int> active_set;
};

/// Affine map from (x̂, u(k-1), d(k), D̂, ΔU) to the stacked predictions.
///   Ŷ = Ex·x̂ + Eu·u0 + Ed·d0 + ED·D̂0 + E·ΔU + Ek
///   x̂(k+Hp) = same structure with the `t` members
///   U0 = T·u0 + S·ΔU
/// All signals in deviation coordinates of the augmented model.
struct PredictionOperator {
  MatrixXd Ex, Eu, Ed, ED, E;
  VectorXd Ek;
  MatrixXd tx, tu, td, tD, tE;
  VectorXd tk;
  MatrixXd S, T;

  static PredictionOperator build(const AugmentedModel::Linear& L, int Hp, int Hc);
};

/// Economic term J_E(U_E, Ŷ_E, D̂_E, p), evaluable on doubles and dual numbers.
struct EconomicFunction {
  std::function<double(std::span<const double>, std::span<const double>, std::span<const double>,
                       std::span<const double>)>
      real;
  std::function<Dual8(std::span<const Dual8>, std::span<const Dual8>, std::span<const double>,
                      std::span<const double>)>
      dual;
  explicit operator bool() const { return static_cast<bool>(real) && static_cast<bool>(dual); }
};

/// Wraps a generic callable `(auto UE, auto YE, auto DE, auto p)`.
template <class F>
EconomicFunction make_economic_function(F fn) {
  EconomicFunction e;
  e.real = [fn](std::span<const double> UE, std::span<const double> YE, std::span<const double> DE,
                std::span<const double> p) { return fn(UE, YE, DE, p); };
  e.dual = [fn](std::span<const Dual8> UE, std::span<const Dual8> YE, std::span<const double> DE,
                std::span<const double> p) { return fn(UE, YE, DE, p); };
  return e;
}

/// Motor work over the horizon: Ts·Σ τ(k+j)·ω(k+j), j = 0..Hp-1, with
/// τ = UE[0..Hp-1] and ω the second output of each [θ; ω] pair of YE.
template <class T>
T horizon_work(std::span<const T> UE, std::span<const T> YE, double Ts) {
  const std::size_t Hp = UE.size() - 1;
  if (YE.size() != 2 * (Hp + 1)) throw std::invalid_argument("horizon_work: YE must hold Hp+1 [θ; ω] pairs");
  T W = T(0.0);
  for (std::size_t j = 0; j < Hp; ++j) W = W + UE[j] * YE[2 * j + 1];
  return Ts * W;
}

enum class ControllerKind { LinMPC, ExplicitMPC, NonLinMPC };
std::string to_string(ControllerKind k);

/// Common part of the predictive controllers: owns the estimator, the weights,
/// the bounds and the last applied input.
class PredictiveController {
 public:
  virtual ~PredictiveController() = default;
  virtual ControllerKind kind() const = 0;

  StateEstimator& estimator() { return *estim_; }
  const StateEstimator& estimator() const { return *estim_; }
  const AugmentedModel& model() const { return estim_->model(); }
  int Hp() const { return Hp_; }
  int Hc() const { return Hc_; }
  bool has_slack() const { return std::isfinite(Cwt_); }
  double Cwt() const { return Cwt_; }
  const MatrixXd& M_Hp() const { return M_; }
  const MatrixXd& N_Hc() const { return N_; }
  const MatrixXd& L_Hp() const { return L_; }
  const MpcConstraints& constraints() const { return con_; }
  const VectorXd& last_u() const { return u_prev_; }
  void set_last_u(const VectorXd& u);
  const MoveResult& info() const { return info_; }

  const VectorXd& prepare(const VectorXd& ym, const VectorXd& d = VectorXd()) { return estim_->prepare(ym, d); }
  const VectorXd& update(const VectorXd& u, const VectorXd& ym, const VectorXd& d = VectorXd()) {
    return estim_->update(u, ym, d);
  }
  /// Bumpless start: estimator steady state and u(k-1) = u.
  const VectorXd& init(const VectorXd& u, const VectorXd& ym, const VectorXd& d = VectorXd());

  /// Computes and applies the next move; the estimator must be prepared.
  const MoveResult& move(const MoveRequest& req);
  VectorXd operator()(const VectorXd& ry, const VectorXd& d = VectorXd()) { return move({ry, d, {}, {}, {}}).u; }

  PredictiveController& set_constraints(const ConstraintSpec& spec);
  /// Swaps the linear plant model (estimator must support it).
  PredictiveController& set_model(const SimModel& model);

  /// Number of finite constraint rows per group, for reporting.
  struct RowCount {
    int U = 0, dU = 0, Y = 0, x = 0;
  };
  RowCount row_count() const;

  std::string summary() const;

 protected:
  PredictiveController(std::unique_ptr<StateEstimator> estim, const MpcTuning& tuning, bool allow_economic);

  virtual std::string optimizer_name() const = 0;
  virtual bool supports_constraints() const { return true; }
  virtual void on_constraints_changed() {}
  virtual void on_model_changed() {}
  virtual void solve(const MoveRequest& req) = 0;

  struct Signals {
    VectorXd ry, d0, D0, Ry, Ru0;  // stacked horizon signals
  };
  Signals resolve(const MoveRequest& req) const;
  /// Fallback when the optimizer fails: previous increments shifted, last block repeated.
  void fallback(const std::string& why);
  int nz() const { return nu() * Hc_ + (has_slack() ? 1 : 0); }
  int nu() const { return model().nu(); }
  int ny() const { return model().ny(); }

  std::unique_ptr<StateEstimator> estim_;
  int Hp_, Hc_;
  MatrixXd M_, N_, L_;
  double Cwt_;
  double Ewt_;
  MpcConstraints con_;
  VectorXd u_prev_;
  VectorXd dU_prev_;
  MoveResult info_;
};

/// Constrained linear MPC solved as a dense QP over z = [ΔU; ε].
class LinMPC : public PredictiveController {
 public:
  LinMPC(std::unique_ptr<StateEstimator> estim, const MpcTuning& tuning = {});
  /// Convenience: wraps the model in the default steady-state Kalman filter.
  explicit LinMPC(const LinearModel& model, const MpcTuning& tuning = {});
  ControllerKind kind() const override { return ControllerKind::LinMPC; }

  const PredictionOperator& prediction() const { return pred_; }
  /// QP of the last move (after move()).
  const QpProblem& last_qp() const { return qp_; }

 protected:
  std::string optimizer_name() const override { return "active-set QP"; }
  void on_constraints_changed() override;
  void on_model_changed() override;
  void solve(const MoveRequest& req) override;

 private:
  void rebuild();
  PredictionOperator pred_;
  MatrixXd H_;  // without slack part
  QpProblem qp_;
  QpSolver solver_;
};

/// Unconstrained linear MPC: ΔU = -H⁻¹q with H factored once.
class ExplicitMPC : public PredictiveController {
 public:
  ExplicitMPC(std::unique_ptr<StateEstimator> estim, const MpcTuning& tuning = {});
  explicit ExplicitMPC(const LinearModel& model, const MpcTuning& tuning = {});
  ControllerKind kind() const override { return ControllerKind::ExplicitMPC; }
  const PredictionOperator& prediction() const { return pred_; }

 protected:
  std::string optimizer_name() const override { return "closed-form"; }
  bool supports_constraints() const override { return false; }
  void on_constraints_changed() override;
  void on_model_changed() override;
  void solve(const MoveRequest& req) override;

 private:
  void rebuild();
  PredictionOperator pred_;
  MatrixXd H_;
  Eigen::LLT<MatrixXd> llt_;
};

/// Nonlinear (and economic) MPC: single shooting of the augmented model,
/// gradients by forward AD, solved with the SQP.
class NonLinMPC : public PredictiveController {
 public:
  NonLinMPC(std::unique_ptr<StateEstimator> estim, const MpcTuning& tuning = {}, EconomicFunction JE = {},
            std::vector<double> p = {}, NlpOptions opt = default_options());
  ControllerKind kind() const override { return ControllerKind::NonLinMPC; }

  static NlpOptions default_options();

  /// Objective at decision z for the current estimate and request (for checks).
  double objective(const VectorXd& z, const MoveRequest& req) const;
  VectorXd objective_gradient(const VectorXd& z, const MoveRequest& req) const;
  const NlpResult& last_nlp() const { return nlp_; }

 protected:
  std::string optimizer_name() const override { return "SQP"; }
  void solve(const MoveRequest& req) override;

 private:
  struct Context;
  std::shared_ptr<const Context> context(const MoveRequest& req) const;
  NlpProblem problem(const std::shared_ptr<const Context>& ctx) const;

  EconomicFunction JE_;
  std::vector<double> p_;
  NlpOptions opt_;
  NlpResult nlp_;
};

}  // namespace mpctk
