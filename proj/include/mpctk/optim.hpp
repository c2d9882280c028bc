#pragma once

#include <Eigen/Dense>

#include <complex>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mpctk/autodiff.hpp"

namespace mpctk {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// ------------------------------------------------------------------ QP

/// min 1/2 z'Hz + q'z  s.t.  A z <= b,  Aeq z = beq.
struct QpProblem {
  MatrixXd H;
  VectorXd q;
  MatrixXd A;
  VectorXd b;
  MatrixXd Aeq;
  VectorXd beq;

  int n() const { return static_cast<int>(q.size()); }
  int m() const { return static_cast<int>(b.size()); }
  int meq() const { return static_cast<int>(beq.size()); }
};

enum class QpStatus { Optimal, MaxIterations, Infeasible };
std::string to_string(QpStatus s);

struct QpSolution {
  VectorXd z;
  VectorXd lambda;      ///< inequality multipliers, >= 0
  VectorXd lambda_eq;   ///< equality multipliers
  QpStatus status = QpStatus::Infeasible;
  std::vector<int> active_set;  ///< active inequality rows, in order of addition
  int iterations = 0;
  double objective = 0.0;
  double regularization = 0.0;  ///< diagonal shift added to H, if any
};

struct QpOptions {
  int max_iterations = 0;  ///< 0 selects 10 (n + m) + 50
  double feasibility_tol = 1e-10;
};

/// Dense dual active-set solver (Goldfarb-Idnani).
///
/// Starts from the unconstrained minimizer and adds the most violated
/// constraint each iteration (lowest row index on ties); rows listed in
/// `warm_active` take priority while they remain violated. H must be
/// positive definite; 1e-10 I is added (and grown) if Cholesky fails.
QpSolution solve_qp(const QpProblem& p, const std::vector<int>* warm_active = nullptr, const QpOptions& opt = {});

/// Stateful wrapper that warm-starts each solve from the previous active set.
class QpSolver {
 public:
  explicit QpSolver(QpOptions opt = {}) : opt_(opt) {}
  QpSolution solve(const QpProblem& p) {
    QpSolution s = solve_qp(p, warm_.empty() ? nullptr : &warm_, opt_);
    if (s.status == QpStatus::Optimal) warm_ = s.active_set;
    return s;
  }
  void reset() { warm_.clear(); }

 private:
  QpOptions opt_;
  std::vector<int> warm_;
};

// ----------------------------------------------------------------- NLP

using ad::Dual8;

/// min f(z) s.t. lower <= z <= upper, A z <= b, g(z) <= 0.
///
/// The objective and the optional constraint function must be evaluable on
/// doubles and on Dual8 numbers; `set_objective` / `set_constraints` accept a
/// generic lambda and instantiate both.
struct NlpProblem {
  int n = 0;
  std::function<double(std::span<const double>)> objective;
  std::function<Dual8(std::span<const Dual8>)> objective_dual;
  VectorXd lower, upper;
  MatrixXd A;
  VectorXd b;
  int ng = 0;
  std::function<void(std::span<const double>, std::span<double>)> constraints;
  std::function<void(std::span<const Dual8>, std::span<Dual8>)> constraints_dual;
  VectorXd z0;

  template <class F>
  void set_objective(F f) {
    objective = [f](std::span<const double> z) { return f(z); };
    objective_dual = [f](std::span<const Dual8> z) { return f(z); };
  }
  template <class G>
  void set_constraints(int count, G g) {
    ng = count;
    constraints = [g](std::span<const double> z, std::span<double> out) { g(z, out); };
    constraints_dual = [g](std::span<const Dual8> z, std::span<Dual8> out) { g(z, out); };
  }
};

struct NlpOptions {
  int max_iterations = 100;
  double step_tol = 1e-6;
  double kkt_tol = 1e-6;          ///< scaled by max(1, |grad f|_inf)
  double feasibility_tol = 1e-6;
  bool exact_initial_hessian = true;  ///< finite-difference Hessian of the AD gradient at z0
};

enum class NlpStatus { Optimal, MaxIterations, Infeasible };
std::string to_string(NlpStatus s);

struct NlpResult {
  VectorXd z;
  double objective = 0.0;
  NlpStatus status = NlpStatus::Infeasible;
  int iterations = 0;
  double kkt_residual = 0.0;
  double max_violation = 0.0;
  std::vector<double> merit_before;   ///< merit at the start of each line search
  std::vector<double> merit_history;  ///< merit at each accepted iterate (same penalty)
};

/// SQP with AD gradients, damped BFGS, dense QP subproblems and an l1-merit
/// backtracking line search.
NlpResult solve_nlp(const NlpProblem& p, const NlpOptions& opt = {});

// -------------------------------------------------- Riccati / pole placement

struct DareSolution {
  MatrixXd P;  ///< steady a-priori covariance
  MatrixXd K;  ///< current-form gain P C' (C P C' + R)^-1
  int iterations = 0;
};

/// Fixed-point iteration of P <- A P A' - A P C'(C P C' + R)^-1 C P A' + Q.
DareSolution solve_dare(const MatrixXd& A, const MatrixXd& C, const MatrixXd& Q, const MatrixXd& R);

/// Observer gain L with eig(A - L C) = poles (complex pairs must be conjugate).
MatrixXd place_poles(const MatrixXd& A, const MatrixXd& C, const std::vector<std::complex<double>>& poles);

}  // namespace mpctk
