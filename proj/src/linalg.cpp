#include "mpctk/linalg.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

namespace mpctk {

Eigen::MatrixXd observability_matrix(const Eigen::MatrixXd& A, const Eigen::MatrixXd& C) {
  const Eigen::Index n = A.rows();
  const Eigen::Index p = C.rows();
  Eigen::MatrixXd O(p * n, n);
  Eigen::MatrixXd blk = C;
  for (Eigen::Index i = 0; i < n; ++i) {
    O.middleRows(i * p, p) = blk;
    blk = blk * A;
  }
  return O;
}

int numerical_rank(const Eigen::MatrixXd& M, double rel_tol) {
  if (M.size() == 0) return 0;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(M);
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s[0] == 0.0) return 0;
  int r = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s[i] > rel_tol * s[0]) ++r;
  }
  return r;
}

bool is_observable(const Eigen::MatrixXd& A, const Eigen::MatrixXd& C, double rel_tol) {
  if (A.rows() == 0) return true;
  return numerical_rank(observability_matrix(A, C), rel_tol) == A.rows();
}

double spectral_radius(const Eigen::MatrixXd& A) {
  if (A.rows() == 0) return 0.0;
  Eigen::EigenSolver<Eigen::MatrixXd> es(A, false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

double min_symmetric_eigenvalue(const Eigen::MatrixXd& M) {
  if (M.rows() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrize(M), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

Eigen::MatrixXd repeat_diagonal(const Eigen::MatrixXd& block, int count) {
  const Eigen::Index r = block.rows();
  const Eigen::Index c = block.cols();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(r * count, c * count);
  for (int i = 0; i < count; ++i) out.block(i * r, i * c, r, c) = block;
  return out;
}

}  // namespace mpctk
