#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mpctk::ad {

/// Forward-mode dual number carrying N directional derivatives.
///
/// Arithmetic follows (a + e a')(b + e b') = ab + e (a b' + a' b). Comparisons
/// only look at the value part, so branches in user code pick the same path
/// as the plain double evaluation.
template <int N>
struct Dual {
  static_assert(N > 0, "Dual needs at least one partial");

  double v = 0.0;
  std::array<double, N> d{};

  constexpr Dual() = default;
  constexpr Dual(double value) : v(value) {}  // NOLINT: constants promote implicitly

  static Dual variable(double value, int seed) {
    Dual r(value);
    r.d[static_cast<std::size_t>(seed)] = 1.0;
    return r;
  }

  Dual& operator+=(const Dual& o) {
    v += o.v;
    for (int i = 0; i < N; ++i) d[i] += o.d[i];
    return *this;
  }
  Dual& operator-=(const Dual& o) {
    v -= o.v;
    for (int i = 0; i < N; ++i) d[i] -= o.d[i];
    return *this;
  }
  Dual& operator*=(const Dual& o) {
    for (int i = 0; i < N; ++i) d[i] = d[i] * o.v + v * o.d[i];
    v *= o.v;
    return *this;
  }
  Dual& operator/=(const Dual& o) {
    const double inv = 1.0 / o.v;
    const double q = v * inv;
    for (int i = 0; i < N; ++i) d[i] = (d[i] - q * o.d[i]) * inv;
    v = q;
    return *this;
  }
  Dual& operator+=(double s) {
    v += s;
    return *this;
  }
  Dual& operator-=(double s) {
    v -= s;
    return *this;
  }
  Dual& operator*=(double s) {
    v *= s;
    for (auto& x : d) x *= s;
    return *this;
  }
  Dual& operator/=(double s) { return *this *= (1.0 / s); }
};

// Chain-rule helper: value fv with derivative scale df applied to every partial.
template <int N>
inline Dual<N> chain(const Dual<N>& a, double fv, double df) {
  Dual<N> r(fv);
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] == 0.0 ? 0.0 : df * a.d[i];
  return r;
}

template <int N> inline Dual<N> operator+(Dual<N> a, const Dual<N>& b) { return a += b; }
template <int N> inline Dual<N> operator-(Dual<N> a, const Dual<N>& b) { return a -= b; }
template <int N> inline Dual<N> operator*(Dual<N> a, const Dual<N>& b) { return a *= b; }
template <int N> inline Dual<N> operator/(Dual<N> a, const Dual<N>& b) { return a /= b; }
template <int N> inline Dual<N> operator+(Dual<N> a, double b) { return a += b; }
template <int N> inline Dual<N> operator-(Dual<N> a, double b) { return a -= b; }
template <int N> inline Dual<N> operator*(Dual<N> a, double b) { return a *= b; }
template <int N> inline Dual<N> operator/(Dual<N> a, double b) { return a /= b; }
template <int N> inline Dual<N> operator+(double a, Dual<N> b) { return b += a; }
template <int N> inline Dual<N> operator*(double a, Dual<N> b) { return b *= a; }
template <int N>
inline Dual<N> operator-(double a, const Dual<N>& b) {
  Dual<N> r(a - b.v);
  for (int i = 0; i < N; ++i) r.d[i] = -b.d[i];
  return r;
}
template <int N>
inline Dual<N> operator/(double a, const Dual<N>& b) {
  const double q = a / b.v;
  return chain(b, q, -q / b.v);
}
template <int N>
inline Dual<N> operator-(const Dual<N>& a) {
  return chain(a, -a.v, -1.0);
}
template <int N>
inline Dual<N> operator+(const Dual<N>& a) {
  return a;
}

#define MPCTK_DUAL_COMPARE(op)                                                              \
  template <int N> inline bool operator op(const Dual<N>& a, const Dual<N>& b) { return a.v op b.v; } \
  template <int N> inline bool operator op(const Dual<N>& a, double b) { return a.v op b; }           \
  template <int N> inline bool operator op(double a, const Dual<N>& b) { return a op b.v; }
MPCTK_DUAL_COMPARE(<)
MPCTK_DUAL_COMPARE(>)
MPCTK_DUAL_COMPARE(<=)
MPCTK_DUAL_COMPARE(>=)
MPCTK_DUAL_COMPARE(==)
MPCTK_DUAL_COMPARE(!=)
#undef MPCTK_DUAL_COMPARE

template <int N> inline Dual<N> sin(const Dual<N>& a) { return chain(a, std::sin(a.v), std::cos(a.v)); }
template <int N> inline Dual<N> cos(const Dual<N>& a) { return chain(a, std::cos(a.v), -std::sin(a.v)); }
template <int N>
inline Dual<N> tan(const Dual<N>& a) {
  const double t = std::tan(a.v);
  return chain(a, t, 1.0 + t * t);
}
template <int N>
inline Dual<N> exp(const Dual<N>& a) {
  const double e = std::exp(a.v);
  return chain(a, e, e);
}
template <int N> inline Dual<N> log(const Dual<N>& a) { return chain(a, std::log(a.v), 1.0 / a.v); }
template <int N>
inline Dual<N> sqrt(const Dual<N>& a) {
  const double s = std::sqrt(a.v);
  return chain(a, s, 0.5 / s);
}
template <int N>
inline Dual<N> tanh(const Dual<N>& a) {
  const double t = std::tanh(a.v);
  return chain(a, t, 1.0 - t * t);
}
template <int N> inline Dual<N> atan(const Dual<N>& a) { return chain(a, std::atan(a.v), 1.0 / (1.0 + a.v * a.v)); }
template <int N>
inline Dual<N> pow(const Dual<N>& a, double p) {
  if (p == 0.0) return Dual<N>(1.0);
  return chain(a, std::pow(a.v, p), p * std::pow(a.v, p - 1.0));
}
template <int N>
inline Dual<N> pow(const Dual<N>& a, const Dual<N>& b) {
  // a^b = exp(b log a); the a-only path keeps a <= 0 with constant b usable.
  const double fv = std::pow(a.v, b.v);
  Dual<N> r(fv);
  const double da = b.v == 0.0 ? 0.0 : b.v * std::pow(a.v, b.v - 1.0);
  const double db = a.v > 0.0 ? fv * std::log(a.v) : 0.0;
  for (int i = 0; i < N; ++i) r.d[i] = da * a.d[i] + db * b.d[i];
  return r;
}
/// Subgradient at 0 is taken from the non-negative branch (slope +1).
template <int N> inline Dual<N> abs(const Dual<N>& a) { return chain(a, std::abs(a.v), a.v < 0.0 ? -1.0 : 1.0); }

inline double value(double x) { return x; }
template <int N> inline double value(const Dual<N>& x) { return x.v; }

/// Chunk width used by the model and optimizer layers.
inline constexpr int kChunk = 8;
using Dual8 = Dual<kChunk>;

/// Raised when a derivative evaluation produced a NaN or infinity.
class NonFiniteDerivative : public std::runtime_error {
 public:
  NonFiniteDerivative(int row, int col)
      : std::runtime_error("non-finite derivative at output " + std::to_string(row) + ", input " +
                           std::to_string(col)),
        row_(row),
        col_(col) {}
  int row() const { return row_; }
  int col() const { return col_; }

 private:
  int row_;
  int col_;
};

/// Jacobian of fn : R^n -> R^m at `at`, seeding W inputs per pass.
///
/// fn is called as fn(std::span<const Dual<W>> in, std::span<Dual<W>> out) and
/// must fill all m outputs. Inputs wider than W are handled by looping over
/// chunks; each pass re-evaluates the function value.
template <int W, class F>
Eigen::MatrixXd jacobian(F&& fn, const Eigen::VectorXd& at, int m, Eigen::VectorXd* value_out = nullptr) {
  const int n = static_cast<int>(at.size());
  Eigen::MatrixXd jac(m, n);
  std::vector<Dual<W>> in(static_cast<std::size_t>(n));
  std::vector<Dual<W>> out(static_cast<std::size_t>(m));
  for (int start = 0; start < n || (start == 0 && n == 0); start += W) {
    for (int j = 0; j < n; ++j) in[j] = Dual<W>(at[j]);
    const int width = std::min(W, n - start);
    for (int s = 0; s < width; ++s) in[start + s].d[s] = 1.0;
    for (auto& o : out) o = Dual<W>();
    fn(std::span<const Dual<W>>(in), std::span<Dual<W>>(out));
    if (start == 0 && value_out != nullptr) {
      value_out->resize(m);
      for (int i = 0; i < m; ++i) (*value_out)[i] = out[i].v;
    }
    for (int i = 0; i < m; ++i) {
      for (int s = 0; s < width; ++s) {
        const double g = out[i].d[s];
        if (!std::isfinite(g)) throw NonFiniteDerivative(i, start + s);
        jac(i, start + s) = g;
      }
    }
    if (n == 0) break;
  }
  return jac;
}

template <class F>
Eigen::MatrixXd jacobian(F&& fn, const Eigen::VectorXd& at, int m, Eigen::VectorXd* value_out = nullptr) {
  return jacobian<kChunk>(std::forward<F>(fn), at, m, value_out);
}

/// Gradient of a scalar function; fn(std::span<const Dual<W>>) -> Dual<W>.
template <int W, class F>
Eigen::VectorXd gradient(F&& fn, const Eigen::VectorXd& at, double* value_out = nullptr) {
  Eigen::VectorXd val;
  Eigen::MatrixXd j = jacobian<W>(
      [&fn](std::span<const Dual<W>> in, std::span<Dual<W>> out) { out[0] = fn(in); }, at, 1, &val);
  if (value_out != nullptr) *value_out = val[0];
  return j.row(0).transpose();
}

template <class F>
Eigen::VectorXd gradient(F&& fn, const Eigen::VectorXd& at, double* value_out = nullptr) {
  return gradient<kChunk>(std::forward<F>(fn), at, value_out);
}

}  // namespace mpctk::ad
