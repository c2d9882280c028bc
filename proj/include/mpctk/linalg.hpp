#pragma once

#include <Eigen/Dense>

#include <span>
#include <stdexcept>
#include <string>

namespace mpctk {

/// Thrown when a numerical routine fails (singular systems, divergence, ...).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

inline void require_size(const Eigen::VectorXd& v, Eigen::Index n, const char* name) {
  if (v.size() != n) {
    throw std::invalid_argument(std::string(name) + ": expected length " + std::to_string(n) + ", got " +
                                std::to_string(v.size()));
  }
}

inline bool all_finite(const Eigen::MatrixXd& m) { return m.allFinite(); }

inline std::span<const double> as_span(const Eigen::VectorXd& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}
inline std::span<double> as_span(Eigen::VectorXd& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

inline Eigen::MatrixXd symmetrize(const Eigen::MatrixXd& m) { return 0.5 * (m + m.transpose()); }

/// Stacked observability matrix [C; CA; ...; CA^(n-1)].
Eigen::MatrixXd observability_matrix(const Eigen::MatrixXd& A, const Eigen::MatrixXd& C);

/// Numerical rank with tolerance relative to the largest singular value.
int numerical_rank(const Eigen::MatrixXd& M, double rel_tol = 1e-8);

bool is_observable(const Eigen::MatrixXd& A, const Eigen::MatrixXd& C, double rel_tol = 1e-8);

double spectral_radius(const Eigen::MatrixXd& A);

/// Smallest eigenvalue of the symmetric part.
double min_symmetric_eigenvalue(const Eigen::MatrixXd& M);

/// Block-diagonal repetition of `block`, `count` times.
Eigen::MatrixXd repeat_diagonal(const Eigen::MatrixXd& block, int count);

}  // namespace mpctk
