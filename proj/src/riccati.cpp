#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <Eigen/SVD>

#include <cmath>
#include <type_traits>

#include "mpctk/linalg.hpp"
#include "mpctk/optim.hpp"

namespace mpctk {

DareSolution solve_dare(const MatrixXd& A, const MatrixXd& C, const MatrixXd& Q, const MatrixXd& R) {
  const Eigen::Index n = A.rows();
  require(A.cols() == n && C.cols() == n, "DARE: A/C dimension mismatch");
  require(Q.rows() == n && Q.cols() == n, "DARE: Q must be n x n");
  require(R.rows() == C.rows() && R.cols() == C.rows(), "DARE: R must be ny x ny");
  require(min_symmetric_eigenvalue(R) > 0.0, "DARE: R must be positive definite");

  DareSolution out;
  MatrixXd P = symmetrize(Q);
  const MatrixXd At = A.transpose();
  const MatrixXd Ct = C.transpose();
  constexpr int kMaxIter = 100000;
  for (int it = 1; it <= kMaxIter; ++it) {
    const MatrixXd S = C * P * Ct + R;
    const MatrixXd APC = A * P * Ct;
    const MatrixXd next = symmetrize(A * P * At - APC * S.ldlt().solve(APC.transpose()) + Q);
    if (!next.allFinite() || next.cwiseAbs().maxCoeff() > 1e12) {
      throw NumericalError("DARE diverged: the pair (A, C) is not detectable");
    }
    const double change = (next - P).cwiseAbs().maxCoeff();
    P = next;
    if (change <= 1e-12 * std::max(1.0, P.cwiseAbs().maxCoeff())) {
      out.iterations = it;
      out.P = P;
      out.K = P * Ct * (C * P * Ct + R).inverse();
      return out;
    }
  }
  throw NumericalError("DARE did not converge");
}

namespace {

using CMatrix = Eigen::MatrixXcd;
using CVector = Eigen::VectorXcd;
using cplx = std::complex<double>;

// Null space of [At - lambda I, -Bt], split into the eigenvector part (Qv,
// orthonormal) and the matching gain part (Gv) so that v = Qv c, g = Gv c.
struct PoleSubspace {
  cplx lambda;
  bool real = true;
  CMatrix Qv;
  CMatrix Gv;
  CVector c;
};

PoleSubspace subspace_for(const MatrixXd& At, const MatrixXd& Bt, cplx lambda, bool real) {
  const Eigen::Index n = At.rows();
  const Eigen::Index m = Bt.cols();
  PoleSubspace ps;
  ps.lambda = lambda;
  ps.real = real;
  CMatrix M(n, n + m);
  M.leftCols(n) = At.cast<cplx>() - lambda * CMatrix::Identity(n, n);
  M.rightCols(m) = -Bt.cast<cplx>();
  CMatrix basis;
  if (real) {
    MatrixXd Mr = M.real();
    Eigen::JacobiSVD<MatrixXd> svd(Mr, Eigen::ComputeFullV);
    const auto& s = svd.singularValues();
    int rank = 0;
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      if (s[i] > 1e-10 * std::max(1.0, s[0])) ++rank;
    }
    basis = svd.matrixV().rightCols(n + m - rank).cast<cplx>();
  } else {
    Eigen::JacobiSVD<CMatrix> svd(M, Eigen::ComputeFullV);
    const auto& s = svd.singularValues();
    int rank = 0;
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      if (s[i] > 1e-10 * std::max(1.0, s[0])) ++rank;
    }
    basis = svd.matrixV().rightCols(n + m - rank);
  }
  if (basis.cols() == 0) throw NumericalError("pole placement: empty eigenvector subspace");
  // orthonormalize the eigenvector part and carry the gain part along;
  // V = U S W*  =>  U_k = V W_k S_k^-1, so the gain part is G W_k S_k^-1
  auto split = [&](const auto& Vpart, const auto& Gpart) {
    using Mat = std::decay_t<decltype(Vpart)>;
    Eigen::JacobiSVD<Mat> svd(Vpart, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& s = svd.singularValues();
    int k = 0;
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      if (s[i] > 1e-10) ++k;
    }
    if (k == 0) throw NumericalError("pole placement: degenerate eigenvector subspace");
    const Mat U = svd.matrixU().leftCols(k);
    const Mat Gk = Gpart * svd.matrixV().leftCols(k) * s.head(k).cwiseInverse().template cast<typename Mat::Scalar>().asDiagonal();
    ps.Qv = U.template cast<cplx>();
    ps.Gv = Gk.template cast<cplx>();
  };
  if (real) {
    const MatrixXd Br = basis.real();
    split(MatrixXd(Br.topRows(n)), MatrixXd(Br.bottomRows(m)));
  } else {
    split(CMatrix(basis.topRows(n)), CMatrix(basis.bottomRows(m)));
  }
  return ps;
}

}  // namespace

MatrixXd place_poles(const MatrixXd& A, const MatrixXd& C, const std::vector<std::complex<double>>& poles) {
  const Eigen::Index n = A.rows();
  require(A.cols() == n && C.cols() == n, "place_poles: A/C dimension mismatch");
  require(static_cast<Eigen::Index>(poles.size()) == n, "place_poles: need one pole per state");
  for (std::size_t i = 0; i < poles.size(); ++i) {
    for (std::size_t j = i + 1; j < poles.size(); ++j) {
      require(std::abs(poles[i] - poles[j]) > 1e-8, "place_poles: repeated poles are not supported");
    }
  }
  // conjugate closure
  std::vector<bool> used(poles.size(), false);
  std::vector<PoleSubspace> slots;
  const MatrixXd At = A.transpose();
  const MatrixXd Bt = C.transpose();
  if (!is_observable(A, C)) throw NumericalError("place_poles: the pair (A, C) is not observable");
  for (std::size_t i = 0; i < poles.size(); ++i) {
    if (used[i]) continue;
    const cplx lam = poles[i];
    used[i] = true;
    if (std::abs(lam.imag()) <= 1e-12 * std::max(1.0, std::abs(lam))) {
      slots.push_back(subspace_for(At, Bt, cplx(lam.real(), 0.0), true));
      continue;
    }
    bool found = false;
    for (std::size_t j = i + 1; j < poles.size(); ++j) {
      if (!used[j] && std::abs(poles[j] - std::conj(lam)) <= 1e-10 * std::max(1.0, std::abs(lam))) {
        used[j] = true;
        found = true;
        break;
      }
    }
    require(found, "place_poles: complex poles must come in conjugate pairs");
    slots.push_back(subspace_for(At, Bt, lam.imag() > 0 ? lam : std::conj(lam), false));
  }

  for (std::size_t i = 0; i < slots.size(); ++i) {
    auto& sl = slots[i];
    sl.c = CVector::Zero(sl.Qv.cols());
    sl.c[static_cast<Eigen::Index>(i % static_cast<std::size_t>(sl.Qv.cols()))] = 1.0;
  }

  auto assemble = [&](CMatrix& V, CMatrix& G, std::size_t skip) {
    const Eigen::Index p = Bt.cols();
    V.resize(n, n);
    G.resize(p, n);
    Eigen::Index col = 0;
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const CVector v = slots[i].Qv * slots[i].c;
      const CVector g = slots[i].Gv * slots[i].c;
      if (i == skip) {
        col += slots[i].real ? 1 : 2;
        continue;
      }
      V.col(col) = v;
      G.col(col) = g;
      ++col;
      if (!slots[i].real) {
        V.col(col) = v.conjugate();
        G.col(col) = g.conjugate();
        ++col;
      }
    }
  };

  // sweeps that make each eigenvector as orthogonal as possible to the rest
  const std::size_t none = slots.size();
  for (int sweep = 0; sweep < 8; ++sweep) {
    for (std::size_t i = 0; i < slots.size(); ++i) {
      auto& sl = slots[i];
      if (sl.Qv.cols() == 1) continue;
      CMatrix V, G;
      assemble(V, G, i);
      std::vector<Eigen::Index> keep;
      Eigen::Index col = 0;
      for (std::size_t j = 0; j < slots.size(); ++j) {
        const Eigen::Index w = slots[j].real ? 1 : 2;
        if (j != i) {
          for (Eigen::Index t = 0; t < w; ++t) keep.push_back(col + t);
        }
        col += w;
      }
      CMatrix others(n, static_cast<Eigen::Index>(keep.size()));
      for (std::size_t t = 0; t < keep.size(); ++t) others.col(static_cast<Eigen::Index>(t)) = V.col(keep[t]);
      CMatrix proj = sl.Qv;
      if (others.cols() > 0) {
        Eigen::HouseholderQR<CMatrix> qr(others);
        const CMatrix Q = qr.householderQ() * CMatrix::Identity(n, others.cols());
        proj = sl.Qv - Q * (Q.adjoint() * sl.Qv);
      }
      if (sl.real) {
        MatrixXd stacked(2 * n, proj.cols());
        stacked.topRows(n) = proj.real();
        stacked.bottomRows(n) = proj.imag();
        Eigen::JacobiSVD<MatrixXd> svd(stacked, Eigen::ComputeFullV);
        sl.c = svd.matrixV().col(0).cast<cplx>();
      } else {
        Eigen::JacobiSVD<CMatrix> svd(proj, Eigen::ComputeFullV);
        sl.c = svd.matrixV().col(0);
      }
    }
  }

  CMatrix V, G;
  assemble(V, G, none);
  Eigen::FullPivLU<CMatrix> lu(V);
  if (!lu.isInvertible()) throw NumericalError("pole placement: eigenvector matrix is singular");
  const CMatrix K = G * lu.inverse();
  // (At - Bt K) v = lambda v for every column, so eig(A - K' C) = poles
  return K.real().transpose();
}

}  // namespace mpctk
