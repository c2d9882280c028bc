#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mpctk/autodiff.hpp"

namespace mpctk {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using ad::Dual8;

/// Axis labels used by plots and exports.
struct ModelNames {
  std::vector<std::string> u, x, y, d;
};

/// Base class of the discrete plant descriptions.
///
/// All evaluation hooks work in deviation coordinates: inputs are u0 = u - uop,
/// d0 = d - dop and outputs are y0 = y - yop. The state vector is the model's
/// own coordinate (x - xop for linear models, the physical state otherwise).
class SimModel {
 public:
  virtual ~SimModel() = default;

  virtual std::unique_ptr<SimModel> clone() const = 0;
  virtual bool is_linear() const = 0;
  virtual std::string kind_name() const = 0;

  virtual void f(std::span<double> xnext, std::span<const double> x, std::span<const double> u0,
                 std::span<const double> d0) const = 0;
  virtual void f(std::span<Dual8> xnext, std::span<const Dual8> x, std::span<const Dual8> u0,
                 std::span<const Dual8> d0) const = 0;
  virtual void h(std::span<double> y0, std::span<const double> x, std::span<const double> d0) const = 0;
  virtual void h(std::span<Dual8> y0, std::span<const Dual8> x, std::span<const Dual8> d0) const = 0;

  /// Offset between the state coordinate and the physical state (xop).
  virtual VectorXd state_offset() const { return VectorXd::Zero(nx_); }

  int nu() const { return nu_; }
  int nx() const { return nx_; }
  int ny() const { return ny_; }
  int nd() const { return nd_; }
  double Ts() const { return Ts_; }
  const VectorXd& uop() const { return uop_; }
  const VectorXd& yop() const { return yop_; }
  const VectorXd& dop() const { return dop_; }
  const ModelNames& names() const { return names_; }

  SimModel& set_operating_point(const VectorXd& uop, const VectorXd& yop, const VectorXd& dop = VectorXd());
  SimModel& set_names(const ModelNames& names);

  const VectorXd& state() const { return x_; }
  void set_state(const VectorXd& x);

  /// Advances the internal state one sample with absolute u and d.
  const VectorXd& step(const VectorXd& u, const VectorXd& d = VectorXd());
  /// Absolute output at the stored state.
  VectorXd output(const VectorXd& d = VectorXd()) const;
  /// Allocation-free output evaluation into a caller buffer.
  void evaluate_output(std::span<double> y, std::span<const double> d) const;

  /// Human-readable summary listing the dimensions.
  std::string summary() const;

 protected:
  SimModel(int nu, int nx, int ny, int nd, double Ts);

  int nu_, nx_, ny_, nd_;
  double Ts_;
  VectorXd uop_, yop_, dop_;
  VectorXd x_;
  ModelNames names_;
  VectorXd scratch_;
};

/// x(k+1) - xop = A (x - xop) + Bu u0 + Bd d0 + fop - xop,  y = C (x - xop) + Dd d0 + yop.
///
/// xop and fop are zero for models built from matrices or transfer functions;
/// linearization stores the expansion point and the nonlinear map value there.
class LinearModel final : public SimModel {
 public:
  LinearModel(MatrixXd A, MatrixXd Bu, MatrixXd C, MatrixXd Bd, MatrixXd Dd, double Ts);
  LinearModel(MatrixXd A, MatrixXd Bu, MatrixXd C, double Ts);

  std::unique_ptr<SimModel> clone() const override { return std::make_unique<LinearModel>(*this); }
  bool is_linear() const override { return true; }
  std::string kind_name() const override { return "LinModel"; }

  void f(std::span<double> xnext, std::span<const double> x, std::span<const double> u0,
         std::span<const double> d0) const override;
  void f(std::span<Dual8> xnext, std::span<const Dual8> x, std::span<const Dual8> u0,
         std::span<const Dual8> d0) const override;
  void h(std::span<double> y0, std::span<const double> x, std::span<const double> d0) const override;
  void h(std::span<Dual8> y0, std::span<const Dual8> x, std::span<const Dual8> d0) const override;
  VectorXd state_offset() const override { return xop_; }

  const MatrixXd& A() const { return A_; }
  const MatrixXd& Bu() const { return Bu_; }
  const MatrixXd& Bd() const { return Bd_; }
  const MatrixXd& C() const { return C_; }
  const MatrixXd& Dd() const { return Dd_; }
  const VectorXd& xop() const { return xop_; }
  const VectorXd& fop() const { return fop_; }

  /// Overwrites matrices and the state expansion point; dimensions must not change.
  void set_matrices(const MatrixXd& A, const MatrixXd& Bu, const MatrixXd& C, const MatrixXd& Bd,
                    const MatrixXd& Dd);
  void set_state_operating_point(const VectorXd& xop, const VectorXd& fop);

  /// Static gains C (I - A)^-1 Bu and C (I - A)^-1 Bd + Dd.
  MatrixXd dc_gain_u() const;
  MatrixXd dc_gain_d() const;

 private:
  template <class T>
  void f_impl(std::span<T> xnext, std::span<const T> x, std::span<const T> u0, std::span<const T> d0) const;
  template <class T>
  void h_impl(std::span<T> y0, std::span<const T> x, std::span<const T> d0) const;
  void validate() const;

  MatrixXd A_, Bu_, Bd_, C_, Dd_;
  VectorXd xop_, fop_;
};

template <class T>
using StateFn = std::function<void(std::span<T> xdot, std::span<const T> x, std::span<const T> u,
                                   std::span<const T> d, std::span<const double> p)>;
template <class T>
using OutputFn =
    std::function<void(std::span<T> y, std::span<const T> x, std::span<const T> d, std::span<const double> p)>;

/// State function evaluable on doubles and on dual numbers.
struct StateFunction {
  StateFn<double> real;
  StateFn<Dual8> dual;
};
struct OutputFunction {
  OutputFn<double> real;
  OutputFn<Dual8> dual;
};

/// Wraps a generic callable `(auto xdot, auto x, auto u, auto d, auto p)`.
template <class F>
StateFunction make_state_function(F fn) {
  return StateFunction{StateFn<double>(fn), StateFn<Dual8>(fn)};
}
/// Wraps a generic callable `(auto y, auto x, auto d, auto p)`.
template <class F>
OutputFunction make_output_function(F fn) {
  return OutputFunction{OutputFn<double>(fn), OutputFn<Dual8>(fn)};
}

struct IntegratorConfig {
  enum class Method { RungeKutta4, Discrete };
  Method method = Method::RungeKutta4;
  int supersample = 1;
};

/// x(k+1) = f(x, u, d, p), y = h(x, d, p). With the RK4 method, `f` is the
/// continuous derivative and each sample takes `supersample` RK4 substeps.
class NonlinearModel final : public SimModel {
 public:
  NonlinearModel(StateFunction f, OutputFunction h, double Ts, int nu, int nx, int ny, int nd = 0,
                 std::vector<double> p = {}, IntegratorConfig solver = {});

  std::unique_ptr<SimModel> clone() const override { return std::make_unique<NonlinearModel>(*this); }
  bool is_linear() const override { return false; }
  std::string kind_name() const override { return "NonLinModel"; }

  void f(std::span<double> xnext, std::span<const double> x, std::span<const double> u0,
         std::span<const double> d0) const override;
  void f(std::span<Dual8> xnext, std::span<const Dual8> x, std::span<const Dual8> u0,
         std::span<const Dual8> d0) const override;
  void h(std::span<double> y0, std::span<const double> x, std::span<const double> d0) const override;
  void h(std::span<Dual8> y0, std::span<const Dual8> x, std::span<const Dual8> d0) const override;

  const std::vector<double>& parameters() const { return p_; }
  void set_parameters(std::vector<double> p) { p_ = std::move(p); }
  const IntegratorConfig& solver() const { return solver_; }
  const StateFunction& state_function() const { return f_; }
  const OutputFunction& output_function() const { return h_; }

  /// Continuous (or discrete, for the passthrough method) derivative map in absolute units.
  template <class T>
  void derivative(std::span<T> xdot, std::span<const T> x, std::span<const T> u, std::span<const T> d) const;

 private:
  template <class T>
  void step_impl(std::span<T> xnext, std::span<const T> x, std::span<const T> u0, std::span<const T> d0) const;
  template <class T>
  void output_impl(std::span<T> y0, std::span<const T> x, std::span<const T> d0) const;

  StateFunction f_;
  OutputFunction h_;
  std::vector<double> p_;
  IntegratorConfig solver_;
};

/// A single SISO entry, coefficients in descending powers of s.
struct TransferFunction {
  std::vector<double> num{0.0};
  std::vector<double> den{1.0};
  double delay = 0.0;
};

/// ny x nu grid of transfer functions, row-major.
struct TransferFunctionMatrix {
  int ny = 0;
  int nu = 0;
  std::vector<TransferFunction> entries;

  TransferFunctionMatrix() = default;
  TransferFunctionMatrix(int rows, int cols) : ny(rows), nu(cols), entries(static_cast<std::size_t>(rows * cols)) {}
  TransferFunction& operator()(int i, int j) { return entries[static_cast<std::size_t>(i * nu + j)]; }
  const TransferFunction& operator()(int i, int j) const { return entries[static_cast<std::size_t>(i * nu + j)]; }
};

/// ZOH for the u channels and Tustin for the d channels.
///
/// When Bdc is nonzero the d path gets its own Tustin-discretized copy of the
/// states, so nx doubles; the bilinear direct term is folded into Dd.
LinearModel discretize_continuous(const MatrixXd& Ac, const MatrixXd& Buc, const MatrixXd& Bdc, const MatrixXd& C,
                                  const MatrixXd& Ddc, double Ts);

/// Realizes a proper transfer matrix and discretizes it. Columns listed in
/// `i_d` (0-based) are measured disturbances, the rest manipulated inputs.
LinearModel from_transfer_function(const TransferFunctionMatrix& G, double Ts, const std::vector<int>& i_d = {});

/// Continuous state-space realization (A, B, C, D) of a transfer matrix.
struct ContinuousRealization {
  MatrixXd A, B, C, D;
};
ContinuousRealization realize(const TransferFunctionMatrix& G, const std::vector<int>& columns);

/// First-order expansion of the discrete map of `model` around (x, u, d).
///
/// x is in the model's state coordinate, u and d are absolute. The returned
/// model has uop = u, dop = d, yop = y(x, d) and xop/fop set so that its
/// deviation dynamics are tangent to the nonlinear step.
LinearModel linearize(const SimModel& model, const VectorXd& x, const VectorXd& u, const VectorXd& d = VectorXd());
/// In-place variant; `out` must already have matching dimensions.
void linearize(LinearModel& out, const SimModel& model, const VectorXd& x, const VectorXd& u,
               const VectorXd& d = VectorXd());

nlohmann::json to_json(const LinearModel& model);
LinearModel linear_model_from_json(const nlohmann::json& j);

/// Matrix exponential (Pade, via Eigen's MatrixFunctions module).
MatrixXd matrix_exponential(const MatrixXd& M);

}  // namespace mpctk
