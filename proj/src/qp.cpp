#include <algorithm>
#include <cmath>
#include <limits>

#include "mpctk/linalg.hpp"
#include "mpctk/optim.hpp"

namespace mpctk {

std::string to_string(QpStatus s) {
  switch (s) {
    case QpStatus::Optimal:
      return "optimal";
    case QpStatus::MaxIterations:
      return "max-iter";
    case QpStatus::Infeasible:
      return "infeasible";
  }
  return "unknown";
}

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();
constexpr double kInf = std::numeric_limits<double>::infinity();

// Factorization state of the Goldfarb-Idnani method: J = L^-T Q and the
// upper-triangular R of the active constraint normals, both updated with
// Givens rotations as constraints enter and leave.
struct ActiveSetState {
  int n = 0;
  MatrixXd J;
  MatrixXd R;
  VectorXd d;
  VectorXd u;             // multipliers of the active constraints
  std::vector<int> ids;   // active constraint ids (equalities first)
  int iq = 0;
  double R_norm = 1.0;

  bool add() {
    for (int j = n - 1; j >= iq + 1; --j) {
      double cc = d[j - 1];
      double ss = d[j];
      const double h = std::hypot(cc, ss);
      if (h == 0.0) continue;
      d[j] = 0.0;
      ss /= h;
      cc /= h;
      if (cc < 0.0) {
        cc = -cc;
        ss = -ss;
        d[j - 1] = -h;
      } else {
        d[j - 1] = h;
      }
      const double xny = ss / (1.0 + cc);
      for (int k = 0; k < n; ++k) {
        const double t1 = J(k, j - 1);
        const double t2 = J(k, j);
        J(k, j - 1) = t1 * cc + t2 * ss;
        J(k, j) = xny * (t1 + J(k, j - 1)) - t2;
      }
    }
    for (int i = 0; i <= iq; ++i) R(i, iq) = d[i];
    ++iq;
    if (std::abs(d[iq - 1]) <= kEps * R_norm) return false;
    R_norm = std::max(R_norm, std::abs(d[iq - 1]));
    return true;
  }

  void remove(int id, int meq) {
    int qq = -1;
    for (int i = meq; i < iq; ++i) {
      if (ids[static_cast<std::size_t>(i)] == id) {
        qq = i;
        break;
      }
    }
    if (qq < 0) return;
    for (int i = qq; i < iq - 1; ++i) {
      ids[static_cast<std::size_t>(i)] = ids[static_cast<std::size_t>(i + 1)];
      u[i] = u[i + 1];
      R.col(i) = R.col(i + 1);
    }
    ids[static_cast<std::size_t>(iq - 1)] = -1;
    u[iq - 1] = 0.0;
    R.col(iq - 1).setZero();
    --iq;
    if (iq == 0) return;
    for (int j = qq; j < iq; ++j) {
      double cc = R(j, j);
      double ss = R(j + 1, j);
      const double h = std::hypot(cc, ss);
      if (h == 0.0) continue;
      cc /= h;
      ss /= h;
      R(j + 1, j) = 0.0;
      if (cc < 0.0) {
        R(j, j) = -h;
        cc = -cc;
        ss = -ss;
      } else {
        R(j, j) = h;
      }
      const double xny = ss / (1.0 + cc);
      for (int k = j + 1; k < iq; ++k) {
        const double t1 = R(j, k);
        const double t2 = R(j + 1, k);
        R(j, k) = t1 * cc + t2 * ss;
        R(j + 1, k) = xny * (t1 + R(j, k)) - t2;
      }
      for (int k = 0; k < n; ++k) {
        const double t1 = J(k, j);
        const double t2 = J(k, j + 1);
        J(k, j) = t1 * cc + t2 * ss;
        J(k, j + 1) = xny * (J(k, j) + t1) - t2;
      }
    }
  }

  // z = J2 J2' np (primal direction), r = R^-1 J1' np (dual direction)
  void directions(const VectorXd& np, VectorXd& z, VectorXd& r) {
    d.noalias() = J.transpose() * np;
    z.noalias() = J.rightCols(n - iq) * d.tail(n - iq);
    if (iq > 0) {
      r.head(iq) = R.topLeftCorner(iq, iq).triangularView<Eigen::Upper>().solve(d.head(iq));
    }
  }
};

}  // namespace

QpSolution solve_qp(const QpProblem& p, const std::vector<int>* warm_active, const QpOptions& opt) {
  const int n = p.n();
  const int m = p.m();
  const int meq = p.meq();
  require(p.H.rows() == n && p.H.cols() == n, "QP: H must be n x n");
  require(m == 0 || (p.A.rows() == m && p.A.cols() == n), "QP: A must be m x n");
  require(meq == 0 || (p.Aeq.rows() == meq && p.Aeq.cols() == n), "QP: Aeq must be meq x n");
  require(p.H.allFinite() && p.q.allFinite(), "QP: non-finite objective data");
  const double hscale = std::max(1.0, p.H.cwiseAbs().maxCoeff());
  require((p.H - p.H.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * hscale * 1e3, "QP: H must be symmetric");

  QpSolution sol;
  sol.lambda = VectorXd::Zero(m);
  sol.lambda_eq = VectorXd::Zero(meq);
  if (n == 0) {
    sol.z = VectorXd();
    sol.status = (m == 0 || (p.b.array() >= 0.0).all()) ? QpStatus::Optimal : QpStatus::Infeasible;
    return sol;
  }

  MatrixXd G = symmetrize(p.H);
  Eigen::LLT<MatrixXd> llt(G);
  double reg = 0.0;
  while (llt.info() != Eigen::Success) {
    reg = reg == 0.0 ? 1e-10 : reg * 100.0;
    if (reg > 1e-2 * hscale) throw NumericalError("QP: Hessian is not positive (semi)definite");
    llt.compute(G + reg * MatrixXd::Identity(n, n));
  }
  sol.regularization = reg;

  ActiveSetState s;
  s.n = n;
  s.J = llt.matrixU().solve(MatrixXd::Identity(n, n));  // L^-T
  s.R = MatrixXd::Zero(n, n);
  s.d = VectorXd::Zero(n);
  s.u = VectorXd::Zero(n + 1);
  s.ids.assign(static_cast<std::size_t>(n + 1), -1);

  VectorXd x = -llt.solve(p.q);
  VectorXd z(n), r = VectorXd::Zero(n + 1), np(n);

  // equality constraints a'x = b  <=>  (-a)'x + b = 0
  for (int i = 0; i < meq; ++i) {
    np = -p.Aeq.row(i).transpose();
    s.directions(np, z, r);
    const double zn = z.dot(np);
    double t2 = 0.0;
    const double resid = np.dot(x) + p.beq[i];
    if (std::abs(zn) > kEps * std::max(1.0, s.d.squaredNorm())) t2 = -resid / zn;
    x += t2 * z;
    s.u.head(s.iq) -= t2 * r.head(s.iq);
    s.u[s.iq] = t2;
    if (!s.add()) {
      // linearly dependent equality: consistent ones are skipped, others are infeasible
      --s.iq;
      s.R.col(s.iq).setZero();
      if (std::abs(resid) > 1e-9 * (1.0 + std::abs(p.beq[i]))) {
        sol.status = QpStatus::Infeasible;
        return sol;
      }
      continue;
    }
    s.ids[static_cast<std::size_t>(s.iq - 1)] = i;
  }

  std::vector<char> warm(static_cast<std::size_t>(m), 0);
  if (warm_active != nullptr) {
    for (int w : *warm_active) {
      if (w >= 0 && w < m) warm[static_cast<std::size_t>(w)] = 1;
    }
  }
  std::vector<char> active(static_cast<std::size_t>(m), 0);
  std::vector<double> row_norm(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) row_norm[static_cast<std::size_t>(i)] = p.A.row(i).lpNorm<Eigen::Infinity>();

  const int max_it = opt.max_iterations > 0 ? opt.max_iterations : 10 * (n + m) + 50;
  int it = 0;
  QpStatus status = QpStatus::MaxIterations;
  VectorXd slack(m);

  while (it < max_it) {
    ++it;
    if (m > 0) slack.noalias() = p.b - p.A * x;
    const double xn = x.lpNorm<Eigen::Infinity>();
    int pick = -1;
    double worst = 0.0;
    bool pick_warm = false;
    for (int i = 0; i < m; ++i) {
      if (active[static_cast<std::size_t>(i)]) continue;
      const double tol =
          opt.feasibility_tol * (1.0 + std::abs(p.b[i]) + row_norm[static_cast<std::size_t>(i)] * xn);
      if (slack[i] >= -tol) continue;
      const bool w = warm[static_cast<std::size_t>(i)] != 0;
      if (pick < 0 || (w && !pick_warm) || (w == pick_warm && slack[i] < worst)) {
        pick = i;
        worst = slack[i];
        pick_warm = w;
      }
    }
    if (pick < 0) {
      status = QpStatus::Optimal;
      break;
    }

    np = -p.A.row(pick).transpose();
    double sp = slack[pick];
    double u_plus = 0.0;
    bool added = false;
    while (!added) {
      s.directions(np, z, r);
      double t1 = kInf;
      int drop = -1;
      for (int k = meq; k < s.iq; ++k) {
        if (r[k] > 0.0) {
          const double ratio = s.u[k] / r[k];
          if (ratio < t1) {
            t1 = ratio;
            drop = s.ids[static_cast<std::size_t>(k)];
          }
        }
      }
      const double dz = s.d.tail(n - s.iq).squaredNorm();
      double t2 = kInf;
      if (dz > 1e-14 * s.d.squaredNorm()) t2 = -sp / z.dot(np);
      const double t = std::min(t1, t2);
      if (!std::isfinite(t)) {
        sol.status = QpStatus::Infeasible;
        sol.iterations = it;
        sol.z = x;
        return sol;
      }
      if (!std::isfinite(t2)) {
        // dual step only: the new normal is dependent on the active ones
        s.u.head(s.iq) -= t * r.head(s.iq);
        u_plus += t;
        s.remove(drop, meq);
        active[static_cast<std::size_t>(drop - meq)] = 0;
        continue;
      }
      x += t * z;
      s.u.head(s.iq) -= t * r.head(s.iq);
      u_plus += t;
      if (t2 <= t1) {
        if (!s.add()) {
          --s.iq;
          s.R.col(s.iq).setZero();
          status = QpStatus::MaxIterations;
          it = max_it;
          break;
        }
        s.ids[static_cast<std::size_t>(s.iq - 1)] = meq + pick;
        s.u[s.iq - 1] = u_plus;
        active[static_cast<std::size_t>(pick)] = 1;
        added = true;
      } else {
        s.remove(drop, meq);
        active[static_cast<std::size_t>(drop - meq)] = 0;
        sp = p.b[pick] - p.A.row(pick).dot(x);
        if (++it >= max_it) break;
      }
    }
  }

  sol.z = x;
  sol.iterations = it;
  sol.status = status;
  for (int k = 0; k < s.iq; ++k) {
    const int id = s.ids[static_cast<std::size_t>(k)];
    if (id < meq) {
      sol.lambda_eq[id] = s.u[k];
    } else {
      sol.lambda[id - meq] = s.u[k];
      sol.active_set.push_back(id - meq);
    }
  }
  sol.objective = 0.5 * x.dot(p.H * x) + p.q.dot(x);
  return sol;
}

}  // namespace mpctk
