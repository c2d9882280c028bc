#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>

#include "mpctk/linalg.hpp"
#include "mpctk/optim.hpp"

namespace mpctk {

std::string to_string(NlpStatus s) {
  switch (s) {
    case NlpStatus::Optimal:
      return "optimal";
    case NlpStatus::MaxIterations:
      return "max-iter";
    case NlpStatus::Infeasible:
      return "infeasible";
  }
  return "unknown";
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Evaluator {
  const NlpProblem& p;

  double f(const VectorXd& z) const { return p.objective(as_span(z)); }

  VectorXd grad(const VectorXd& z, double* fval) const {
    return ad::gradient<ad::kChunk>(
        [this](std::span<const Dual8> in) { return p.objective_dual(in); }, z, fval);
  }

  VectorXd g(const VectorXd& z) const {
    VectorXd out = VectorXd::Zero(p.ng);
    if (p.ng > 0) p.constraints(as_span(z), as_span(out));
    return out;
  }

  MatrixXd jac(const VectorXd& z, VectorXd* gval) const {
    return ad::jacobian<ad::kChunk>(
        [this](std::span<const Dual8> in, std::span<Dual8> out) { p.constraints_dual(in, out); }, z, p.ng, gval);
  }

  // l1 violation of the affine and nonlinear inequalities (bounds hold by construction)
  double violation(const VectorXd& z, const VectorXd& gz, double* max_out) const {
    double sum = 0.0;
    double mx = 0.0;
    if (p.b.size() > 0) {
      const VectorXd r = p.A * z - p.b;
      for (Eigen::Index i = 0; i < r.size(); ++i) {
        const double v = std::max(0.0, r[i]);
        sum += v;
        mx = std::max(mx, v);
      }
    }
    for (Eigen::Index i = 0; i < gz.size(); ++i) {
      const double v = std::max(0.0, gz[i]);
      sum += v;
      mx = std::max(mx, v);
    }
    if (max_out != nullptr) *max_out = mx;
    return sum;
  }
};

MatrixXd positive_definite(const MatrixXd& M) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(symmetrize(M));
  VectorXd ev = es.eigenvalues();
  const double top = std::max(1.0, ev.cwiseAbs().maxCoeff());
  const double floor = 1e-8 * top;
  for (Eigen::Index i = 0; i < ev.size(); ++i) ev[i] = std::max(std::abs(ev[i]), floor);
  return symmetrize(es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose());
}

MatrixXd fd_hessian(const Evaluator& ev, const VectorXd& z) {
  const Eigen::Index n = z.size();
  MatrixXd H(n, n);
  VectorXd zp = z;
  for (Eigen::Index j = 0; j < n; ++j) {
    const double h = 1e-5 * std::max(1.0, std::abs(z[j]));
    zp[j] = z[j] + h;
    const VectorXd gp = ev.grad(zp, nullptr);
    zp[j] = z[j] - h;
    const VectorXd gm = ev.grad(zp, nullptr);
    zp[j] = z[j];
    H.col(j) = (gp - gm) / (2.0 * h);
  }
  return symmetrize(H);
}

}  // namespace

NlpResult solve_nlp(const NlpProblem& p, const NlpOptions& opt) {
  const int n = p.n;
  require(n > 0, "NLP: problem has no decision variables");
  require(static_cast<bool>(p.objective) && static_cast<bool>(p.objective_dual), "NLP: objective not set");
  require(p.z0.size() == n, "NLP: z0 has wrong length");
  require(p.lower.size() == 0 || p.lower.size() == n, "NLP: lower bound has wrong length");
  require(p.upper.size() == 0 || p.upper.size() == n, "NLP: upper bound has wrong length");
  require(p.b.size() == 0 || (p.A.rows() == p.b.size() && p.A.cols() == n), "NLP: A/b size mismatch");
  require(p.ng == 0 || (static_cast<bool>(p.constraints) && static_cast<bool>(p.constraints_dual)),
          "NLP: constraint function not set");

  const VectorXd lo = p.lower.size() ? p.lower : VectorXd::Constant(n, -kInf);
  const VectorXd hi = p.upper.size() ? p.upper : VectorXd::Constant(n, kInf);
  for (int i = 0; i < n; ++i) require(lo[i] <= hi[i], "NLP: lower bound exceeds upper bound");

  std::vector<int> up_rows, lo_rows;
  for (int i = 0; i < n; ++i) {
    if (std::isfinite(hi[i])) up_rows.push_back(i);
    if (std::isfinite(lo[i])) lo_rows.push_back(i);
  }
  const int nbox = static_cast<int>(up_rows.size() + lo_rows.size());
  const int nlin = static_cast<int>(p.b.size());
  const int mq = nbox + nlin + p.ng;

  Evaluator ev{p};
  VectorXd z = p.z0.cwiseMax(lo).cwiseMin(hi);
  double fz = 0.0;
  VectorXd grad = ev.grad(z, &fz);
  if (!std::isfinite(fz)) throw NumericalError("NLP: objective is not finite at the initial point");
  VectorXd gz;
  MatrixXd Jg = p.ng > 0 ? ev.jac(z, &gz) : MatrixXd(0, n);
  if (p.ng == 0) gz = VectorXd();

  MatrixXd B;
  if (opt.exact_initial_hessian) {
    B = positive_definite(fd_hessian(ev, z));
  } else {
    B = std::max(1.0, grad.lpNorm<Eigen::Infinity>()) * MatrixXd::Identity(n, n);
  }

  QpProblem qp;
  qp.A.resize(mq, n);
  qp.b.resize(mq);
  qp.A.setZero();
  {
    int row = 0;
    for (int i : up_rows) qp.A(row++, i) = 1.0;
    for (int i : lo_rows) qp.A(row++, i) = -1.0;
    if (nlin > 0) qp.A.middleRows(nbox, nlin) = p.A;
  }

  NlpResult res;
  res.status = NlpStatus::MaxIterations;
  double mu = 0.0;
  std::vector<int> warm;
  VectorXd lambda = VectorXd::Zero(mq);
  bool converged = false;
  bool stalled = false;
  int it = 0;

  auto kkt_residual = [&](const VectorXd& gr, const MatrixXd& Jc, const VectorXd& lam) {
    VectorXd r = gr;
    int row = 0;
    for (int i : up_rows) r[i] += lam[row++];
    for (int i : lo_rows) r[i] -= lam[row++];
    if (nlin > 0) r += p.A.transpose() * lam.segment(nbox, nlin);
    if (p.ng > 0) r += Jc.transpose() * lam.tail(p.ng);
    return r.lpNorm<Eigen::Infinity>();
  };

  while (it < opt.max_iterations) {
    ++it;
    qp.H = B;
    qp.q = grad;
    {
      int row = 0;
      for (int i : up_rows) qp.b[row++] = hi[i] - z[i];
      for (int i : lo_rows) qp.b[row++] = z[i] - lo[i];
      if (nlin > 0) qp.b.segment(nbox, nlin) = p.b - p.A * z;
      if (p.ng > 0) {
        qp.A.bottomRows(p.ng) = Jg;
        qp.b.tail(p.ng) = -gz;
      }
    }
    const QpSolution sub = solve_qp(qp, warm.empty() ? nullptr : &warm);
    if (sub.status == QpStatus::Infeasible) {
      res.status = NlpStatus::Infeasible;
      break;
    }
    warm = sub.active_set;
    const VectorXd step = sub.z;
    lambda = sub.lambda;

    for (int i = nbox; i < mq; ++i) mu = std::max(mu, 1.1 * lambda[i] + 1e-8);

    const double viol = ev.violation(z, gz, nullptr);
    const double phi = fz + mu * viol;
    const double slope = std::min(0.0, grad.dot(step) - mu * viol);

    double alpha = 1.0;
    VectorXd zt;
    double ft = 0.0;
    VectorXd gzt;
    bool accepted = false;
    for (int ls = 0; ls < 40; ++ls) {
      zt = (z + alpha * step).cwiseMax(lo).cwiseMin(hi);
      ft = ev.f(zt);
      gzt = ev.g(zt);
      const double phit = std::isfinite(ft) ? ft + mu * ev.violation(zt, gzt, nullptr) : kInf;
      if (phit <= phi + 1e-4 * alpha * slope) {
        accepted = true;
        res.merit_before.push_back(phi);
        res.merit_history.push_back(phit);
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) {
      stalled = true;
      break;
    }

    const VectorXd s = zt - z;
    double fnew = 0.0;
    const VectorXd grad_new = ev.grad(zt, &fnew);
    VectorXd gz_new;
    MatrixXd Jg_new = p.ng > 0 ? ev.jac(zt, &gz_new) : MatrixXd(0, n);
    if (p.ng == 0) gz_new = VectorXd();

    VectorXd y = grad_new - grad;
    if (p.ng > 0) y += (Jg_new - Jg).transpose() * lambda.tail(p.ng);

    z = zt;
    fz = fnew;
    grad = grad_new;
    gz = gz_new;
    Jg = Jg_new;

    // Powell-damped BFGS update keeps B positive definite
    const VectorXd Bs = B * s;
    const double sBs = s.dot(Bs);
    if (sBs > 1e-300) {
      double sy = s.dot(y);
      if (sy < 0.2 * sBs) {
        const double theta = 0.8 * sBs / (sBs - sy);
        y = theta * y + (1.0 - theta) * Bs;
        sy = s.dot(y);
      }
      if (sy > 1e-300) {
        B += y * y.transpose() / sy - Bs * Bs.transpose() / sBs;
        B = symmetrize(B);
      }
    }

    double maxv = 0.0;
    ev.violation(z, gz, &maxv);
    const double kkt = kkt_residual(grad, Jg, lambda);
    const double kscale = std::max(1.0, grad.lpNorm<Eigen::Infinity>());
    if (maxv <= opt.feasibility_tol &&
        (step.lpNorm<Eigen::Infinity>() <= opt.step_tol || kkt <= opt.kkt_tol * kscale)) {
      converged = true;
      break;
    }
  }

  double maxv = 0.0;
  ev.violation(z, gz, &maxv);
  res.z = z;
  res.objective = fz;
  res.iterations = it;
  res.max_violation = maxv;
  res.kkt_residual = kkt_residual(grad, Jg, lambda);
  if (res.status != NlpStatus::Infeasible) {
    const double kscale = std::max(1.0, grad.lpNorm<Eigen::Infinity>());
    if (converged || (stalled && maxv <= opt.feasibility_tol && res.kkt_residual <= opt.kkt_tol * kscale)) {
      res.status = NlpStatus::Optimal;
    } else {
      res.status = NlpStatus::MaxIterations;
    }
  }
  return res;
}

}  // namespace mpctk
