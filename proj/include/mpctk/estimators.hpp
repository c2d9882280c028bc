#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <complex>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mpctk/model.hpp"

namespace mpctk {

/// Plant model extended with integrating disturbance states.
///
/// x̂ = [x; s_u; s_y]. Each input i carries a chain of nint_u[i] integrators
/// whose head adds to u_i; each measured output j carries nint_ym[j]
/// integrators whose head adds to y_{i_ym[j]}.
class AugmentedModel {
 public:
  AugmentedModel(const SimModel& base, std::vector<int> i_ym, std::vector<int> nint_u, std::vector<int> nint_ym);
  AugmentedModel(const AugmentedModel& other);
  AugmentedModel& operator=(const AugmentedModel& other);

  const SimModel& base() const { return *base_; }
  /// Replaces the plant model; dimensions must match.
  void set_base(const SimModel& base);

  int nx() const { return base_->nx(); }
  int nxhat() const { return nxhat_; }
  int nu() const { return base_->nu(); }
  int ny() const { return base_->ny(); }
  int nd() const { return base_->nd(); }
  int nym() const { return static_cast<int>(i_ym_.size()); }
  int nint_u_total() const { return nsu_; }
  int nint_ym_total() const { return nsy_; }
  const std::vector<int>& i_ym() const { return i_ym_; }
  const std::vector<int>& nint_u() const { return nint_u_; }
  const std::vector<int>& nint_ym() const { return nint_ym_; }

  /// x̂(k+1) in deviation coordinates.
  template <class T>
  void f(std::span<T> xnext, std::span<const T> xhat, std::span<const T> u0, std::span<const T> d0) const;
  /// All ny outputs (deviation), integrator heads added on measured rows.
  template <class T>
  void h(std::span<T> y0, std::span<const T> xhat, std::span<const T> d0) const;

  VectorXd f(const VectorXd& xhat, const VectorXd& u0, const VectorXd& d0) const;
  VectorXd h(const VectorXd& xhat, const VectorXd& d0) const;
  VectorXd h_measured(const VectorXd& xhat, const VectorXd& d0) const;

  /// Tangent model x̂⁺ ≈ A x̂ + Bu u0 + Bd d0 + fop, y0 ≈ C x̂ + Dd d0 + hop.
  struct Linear {
    MatrixXd A, Bu, Bd, C, Dd;
    VectorXd fop, hop;
  };
  /// Exact matrices for linear bases (cached), Jacobians at the point otherwise.
  const Linear& linear() const;
  Linear linearize(const VectorXd& xhat, const VectorXd& u0, const VectorXd& d0) const;
  /// Rows of C / Dd belonging to the measured outputs.
  MatrixXd measured_rows(const MatrixXd& M) const;

  bool observable() const;

 private:
  void build();

  std::unique_ptr<SimModel> base_;
  std::vector<int> i_ym_, nint_u_, nint_ym_;
  int nsu_ = 0, nsy_ = 0, nxhat_ = 0;
  std::vector<int> head_u_, head_y_;  // state index of each chain head, -1 if none
  Linear linear_;
  bool linear_valid_ = false;
};

enum class EstimatorKind {
  SteadyKalmanFilter,
  KalmanFilter,
  Luenberger,
  UnscentedKalmanFilter,
  ExtendedKalmanFilter,
  MovingHorizonEstimator,
  InternalModel
};
std::string to_string(EstimatorKind k);
EstimatorKind estimator_kind_from_string(const std::string& s);

/// Current form publishes x̂(k|k) after prepare; predictor form publishes
/// x̂(k|k-1) and folds the measurement into update.
enum class EstimatorForm { Current, Predictor };

constexpr double kInfinity = std::numeric_limits<double>::infinity();

/// Bounds on the MHE window states, process noise and sensor noise. Empty
/// vectors mean unbounded; softness entries are relaxed by C·ε.
struct MheBounds {
  VectorXd xhat_min, xhat_max, w_min, w_max, v_min, v_max;
  VectorXd c_xhat_min, c_xhat_max, c_w_min, c_w_max, c_v_min, c_v_max;
};

struct EstimatorConfig {
  std::vector<int> i_ym;                   ///< measured output indices (0-based); empty = all
  std::vector<int> nint_u;                 ///< per input; empty = none
  std::vector<int> nint_ym;                ///< per measured output; empty = default
  bool default_nint_ym = true;             ///< only used when nint_ym is empty
  VectorXd sigma_Q;                        ///< per plant state (default 0.1)
  VectorXd sigma_R;                        ///< per measured output (default 1)
  VectorXd sigma_Qint_u;                   ///< per input integrator (default 0.1)
  VectorXd sigma_Qint_ym;                  ///< per output integrator (default 0.1)
  MatrixXd P0;                             ///< initial covariance (default Q̂)
  EstimatorForm form = EstimatorForm::Current;
  // unscented transform
  double alpha = 1e-3, beta = 2.0, kappa = 0.0;
  // Luenberger
  std::vector<std::complex<double>> poles;
  // moving horizon
  int He = 10;
  double Cwt = kInfinity;
  MheBounds bounds;
};

/// Common interface and call-order bookkeeping of the seven estimators.
///
/// Per period: prepare(y_m, d) → (controller move) → update(u, y_m, d).
/// All vectors are absolute engineering units; y_m holds the measured outputs only.
class StateEstimator {
 public:
  virtual ~StateEstimator() = default;
  virtual std::unique_ptr<StateEstimator> clone() const = 0;
  virtual EstimatorKind kind() const = 0;

  const AugmentedModel& model() const { return aug_; }
  EstimatorForm form() const { return form_; }
  int nxhat() const { return aug_.nxhat(); }
  const VectorXd& xhat() const { return xhat_; }
  const MatrixXd& P() const { return P_; }
  const MatrixXd& Qhat() const { return Q_; }
  const MatrixXd& Rhat() const { return R_; }
  bool prepared() const { return prepared_; }
  long period() const { return k_; }
  const std::vector<std::string>& diagnostics() const { return diagnostics_; }

  const VectorXd& prepare(const VectorXd& ym, const VectorXd& d = VectorXd());
  const VectorXd& update(const VectorXd& u, const VectorXd& ym, const VectorXd& d = VectorXd());
  /// Bumpless initialization at steady state for (u, y_m, d).
  virtual const VectorXd& init(const VectorXd& u, const VectorXd& ym, const VectorXd& d = VectorXd());
  void set_state(const VectorXd& xhat);
  void set_covariance(const MatrixXd& P);

  /// Predicted absolute outputs ĥ(x̂, d) + yop (plus the output bias).
  VectorXd output(const VectorXd& d = VectorXd()) const;
  /// Output correction held constant over a prediction horizon (InternalModel only).
  virtual VectorXd output_bias() const { return VectorXd::Zero(aug_.ny()); }
  /// Whether controllers may swap the plant model at run time.
  virtual bool supports_model_update() const { return false; }
  /// Swaps the plant model, re-basing the deterministic state so the absolute state is unchanged.
  virtual void set_model(const SimModel& model);

  std::string summary() const;
  virtual nlohmann::json snapshot() const;
  virtual void restore(const nlohmann::json& j);

 protected:
  StateEstimator(const SimModel& model, const EstimatorConfig& cfg, bool allow_integrators);

  virtual void correct(const VectorXd& ym0, const VectorXd& d0) = 0;
  virtual void predict(const VectorXd& u0, const VectorXd& d0) = 0;
  /// Predictor-form update; the default is correct followed by predict.
  virtual void predictor_update(const VectorXd& u0, const VectorXd& ym0, const VectorXd& d0);
  virtual void on_state_reset() {}

  VectorXd deviation_d(const VectorXd& d) const;
  VectorXd deviation_ym(const VectorXd& ym) const;
  VectorXd xhat0_from_model() const;

  std::vector<std::string> diagnostics_;  // filled while aug_ is built
  AugmentedModel aug_;
  EstimatorForm form_;
  VectorXd xhat_;
  MatrixXd P_, Q_, R_;
  bool prepared_ = false;
  long k_ = 0;
};

class SteadyKalmanFilter final : public StateEstimator {
 public:
  SteadyKalmanFilter(const SimModel& model, const EstimatorConfig& cfg = {});
  std::unique_ptr<StateEstimator> clone() const override { return std::make_unique<SteadyKalmanFilter>(*this); }
  EstimatorKind kind() const override { return EstimatorKind::SteadyKalmanFilter; }
  const MatrixXd& gain() const { return K_; }

 protected:
  void correct(const VectorXd& ym0, const VectorXd& d0) override;
  void predict(const VectorXd& u0, const VectorXd& d0) override;

 private:
  MatrixXd K_;
};

class KalmanFilter final : public StateEstimator {
 public:
  KalmanFilter(const SimModel& model, const EstimatorConfig& cfg = {});
  std::unique_ptr<StateEstimator> clone() const override { return std::make_unique<KalmanFilter>(*this); }
  EstimatorKind kind() const override { return EstimatorKind::KalmanFilter; }
  bool supports_model_update() const override { return true; }
  /// Gain used by the most recent correction.
  const MatrixXd& gain() const { return K_; }

 protected:
  void correct(const VectorXd& ym0, const VectorXd& d0) override;
  void predict(const VectorXd& u0, const VectorXd& d0) override;

 private:
  MatrixXd K_;
};

class Luenberger final : public StateEstimator {
 public:
  Luenberger(const SimModel& model, const EstimatorConfig& cfg = {});
  std::unique_ptr<StateEstimator> clone() const override { return std::make_unique<Luenberger>(*this); }
  EstimatorKind kind() const override { return EstimatorKind::Luenberger; }
  const MatrixXd& gain() const { return form_ == EstimatorForm::Current ? K_ : L_; }
  const std::vector<std::complex<double>>& poles() const { return poles_; }

 protected:
  void correct(const VectorXd& ym0, const VectorXd& d0) override;
  void predict(const VectorXd& u0, const VectorXd& d0) override;
  void predictor_update(const VectorXd& u0, const VectorXd& ym0, const VectorXd& d0) override;

 private:
  std::vector<std::complex<double>> poles_;
  MatrixXd K_, L_;
};

class UnscentedKalmanFilter final : public StateEstimator {
 public:
  UnscentedKalmanFilter(const SimModel& model, const EstimatorConfig& cfg = {});
  std::unique_ptr<StateEstimator> clone() const override { return std::make_unique<UnscentedKalmanFilter>(*this); }
  EstimatorKind kind() const override { return EstimatorKind::UnscentedKalmanFilter; }

 protected:
  void correct(const VectorXd& ym0, const VectorXd& d0) override;
  void predict(const VectorXd& u0, const VectorXd& d0) override;

 private:
  double alpha_, beta_, kappa_;
};

class ExtendedKalmanFilter final : public StateEstimator {
 public:
  ExtendedKalmanFilter(const SimModel& model, const EstimatorConfig& cfg = {});
  std::unique_ptr<StateEstimator> clone() const override { return std::make_unique<ExtendedKalmanFilter>(*this); }
  EstimatorKind kind() const override { return EstimatorKind::ExtendedKalmanFilter; }
  bool supports_model_update() const override { return true; }

 protected:
  void correct(const VectorXd& ym0, const VectorXd& d0) override;
  void predict(const VectorXd& u0, const VectorXd& d0) override;
};

/// Result of the most recent moving-horizon solve.
struct MheSolution {
  MatrixXd xhat;   ///< window states, one column per time
  MatrixXd w;      ///< process noise estimates (Nk-1 columns)
  MatrixXd v;      ///< sensor noise estimates (Nk columns)
  double epsilon = 0.0;
  double objective = 0.0;
  bool optimal = true;
  int Nk = 0;
};

class MovingHorizonEstimator final : public StateEstimator {
 public:
  MovingHorizonEstimator(const SimModel& model, const EstimatorConfig& cfg);
  std::unique_ptr<StateEstimator> clone() const override { return std::make_unique<MovingHorizonEstimator>(*this); }
  EstimatorKind kind() const override { return EstimatorKind::MovingHorizonEstimator; }

  int He() const { return He_; }
  double Cwt() const { return Cwt_; }
  const MheBounds& bounds() const { return bounds_; }
  void set_bounds(const MheBounds& b);
  const MheSolution& last_solution() const { return sol_; }
  /// True when the last solve was not optimal and the prior was kept.
  bool degraded() const { return !sol_.optimal; }

  nlohmann::json snapshot() const override;
  void restore(const nlohmann::json& j) override;

 protected:
  void correct(const VectorXd& ym0, const VectorXd& d0) override;
  void predict(const VectorXd& u0, const VectorXd& d0) override;
  void on_state_reset() override;

 private:
  struct Entry {
    VectorXd ym0, d0, u0, xfilt;
    MatrixXd Pfilt;
  };
  void solve_linear(const VectorXd& xbar, const MatrixXd& Pbar);
  void solve_nonlinear(const VectorXd& xbar, const MatrixXd& Pbar);
  bool has_slack() const;

  int He_;
  double Cwt_;
  MheBounds bounds_;
  std::deque<Entry> hist_;
  VectorXd x0_prior_;
  MatrixXd P0_prior_;
  MheSolution sol_;
};

/// Deterministic model run open loop plus an output-error correction that
/// is held constant over the prediction horizon.
class InternalModel final : public StateEstimator {
 public:
  InternalModel(const SimModel& model, const EstimatorConfig& cfg = {});
  std::unique_ptr<StateEstimator> clone() const override { return std::make_unique<InternalModel>(*this); }
  EstimatorKind kind() const override { return EstimatorKind::InternalModel; }
  VectorXd output_bias() const override;
  const VectorXd& init(const VectorXd& u, const VectorXd& ym, const VectorXd& d = VectorXd()) override;
  const VectorXd& stochastic_state() const { return ys_; }

  nlohmann::json snapshot() const override;
  void restore(const nlohmann::json& j) override;

 protected:
  void correct(const VectorXd& ym0, const VectorXd& d0) override;
  void predict(const VectorXd& u0, const VectorXd& d0) override;

 private:
  VectorXd ys_;  // measured-output error
};

std::unique_ptr<StateEstimator> build_estimator(EstimatorKind kind, const SimModel& model,
                                                const EstimatorConfig& cfg = {});

/// Unscented transform of (mean, cov) through fn with the scaled sigma-point set.
struct UnscentedResult {
  VectorXd mean;
  MatrixXd cov;
  MatrixXd sigma_in;   ///< input sigma points (columns)
  MatrixXd sigma_out;  ///< transformed sigma points (columns)
  VectorXd wm, wc;
};
UnscentedResult unscented_transform(const VectorXd& mean, const MatrixXd& cov,
                                    const std::function<VectorXd(const VectorXd&)>& fn, double alpha = 1e-3,
                                    double beta = 2.0, double kappa = 0.0);

/// Output prediction of an InternalModel: deterministic outputs plus the
/// stochastic correction repeated over Hp steps (stacked, length ny·Hp).
VectorXd internal_model_predict(const InternalModel& estim, const VectorXd& u, int Hp,
                                const VectorXd& d = VectorXd());

}  // namespace mpctk
