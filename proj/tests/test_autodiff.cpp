#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "mpctk/autodiff.hpp"
#include "oracles.hpp"

using namespace mpctk;
using ad::Dual;
using Eigen::VectorXd;

TEST_CASE("elementary derivatives match closed forms") {
  const double x = 0.7;
  auto X = Dual<1>::variable(x, 0);
  CHECK(ad::sin(X).d[0] == doctest::Approx(std::cos(x)).epsilon(1e-15));
  CHECK(ad::cos(X).d[0] == doctest::Approx(-std::sin(x)).epsilon(1e-15));
  CHECK(ad::exp(X).d[0] == doctest::Approx(std::exp(x)).epsilon(1e-15));
  CHECK(ad::log(X).d[0] == doctest::Approx(1.0 / x).epsilon(1e-15));
  CHECK(ad::sqrt(X).d[0] == doctest::Approx(0.5 / std::sqrt(x)).epsilon(1e-15));
  CHECK(ad::tanh(X).d[0] == doctest::Approx(1.0 - std::tanh(x) * std::tanh(x)).epsilon(1e-14));
  CHECK(ad::atan(X).d[0] == doctest::Approx(1.0 / (1.0 + x * x)).epsilon(1e-15));
  CHECK(ad::tan(X).d[0] == doctest::Approx(1.0 / (std::cos(x) * std::cos(x))).epsilon(1e-14));
  CHECK(ad::pow(X, 3.0).d[0] == doctest::Approx(3.0 * x * x).epsilon(1e-15));
  CHECK((1.0 / X).d[0] == doctest::Approx(-1.0 / (x * x)).epsilon(1e-15));
  CHECK((X * X - 2.0 * X).d[0] == doctest::Approx(2.0 * x - 2.0).epsilon(1e-15));
  auto Y = Dual<1>::variable(-0.3, 0);
  CHECK(ad::abs(Y).d[0] == -1.0);
  CHECK(ad::abs(Dual<1>::variable(0.0, 0)).d[0] == 1.0);
}

TEST_CASE("comparisons look at the value only") {
  auto a = Dual<2>::variable(1.0, 0);
  auto b = Dual<2>::variable(1.0, 1);
  CHECK(a == b);
  CHECK(a < 2.0);
  CHECK(3.0 > a);
}

TEST_CASE("chunked Jacobian of a wide map matches finite differences") {
  const int n = 19;
  const int m = 5;
  auto fn = [](auto in, auto out) {
    using T = std::decay_t<decltype(in[0])>;
    for (int i = 0; i < 5; ++i) {
      T acc = T(0.0);
      for (std::size_t j = 0; j < in.size(); ++j) acc = acc + std::sin(0.1 * (i + 1) * j) * in[j] * in[(j + i) % in.size()];
      using std::exp;
      using ad::exp;
      out[i] = exp(0.01 * acc);
    }
  };
  std::mt19937_64 rng(3);
  VectorXd x = oracle::random_matrix(rng, n, 1);
  VectorXd val;
  const Eigen::MatrixXd J = ad::jacobian<ad::kChunk>(
      [&](std::span<const ad::Dual8> in, std::span<ad::Dual8> out) { fn(in, out); }, x, m, &val);
  const Eigen::MatrixXd Jfd = oracle::fd_jacobian(
      [&](const VectorXd& z) {
        VectorXd o(m);
        fn(std::span<const double>(z.data(), z.size()), std::span<double>(o.data(), o.size()));
        return o;
      },
      x);
  CHECK((J - Jfd).cwiseAbs().maxCoeff() < 1e-7);
  VectorXd direct(m);
  fn(std::span<const double>(x.data(), x.size()), std::span<double>(direct.data(), m));
  CHECK((val - direct).norm() == doctest::Approx(0.0));

  // any chunk width yields the same Jacobian
  const Eigen::MatrixXd J3 = ad::jacobian<3>(
      [&](std::span<const Dual<3>> in, std::span<Dual<3>> out) { fn(in, out); }, x, m);
  CHECK((J - J3).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("gradient of the Rosenbrock function") {
  VectorXd x(2);
  x << -1.2, 1.0;
  double f = 0.0;
  const VectorXd g = ad::gradient(
      [](std::span<const ad::Dual8> z) {
        return 100.0 * ad::pow(z[1] - z[0] * z[0], 2.0) + ad::pow(1.0 - z[0], 2.0);
      },
      x, &f);
  CHECK(f == doctest::Approx(24.2));
  CHECK(g[0] == doctest::Approx(-400.0 * x[0] * (x[1] - x[0] * x[0]) - 2.0 * (1.0 - x[0])));
  CHECK(g[1] == doctest::Approx(200.0 * (x[1] - x[0] * x[0])));
}

TEST_CASE("non-finite derivatives are reported with their location") {
  VectorXd x(2);
  x << 1.0, 0.0;
  bool thrown = false;
  try {
    ad::jacobian([](std::span<const ad::Dual8> in, std::span<ad::Dual8> out) { out[0] = ad::sqrt(in[1]) + in[0]; },
                 x, 1);
  } catch (const ad::NonFiniteDerivative& e) {
    thrown = true;
    CHECK(e.row() == 0);
    CHECK(e.col() == 1);
  }
  CHECK(thrown);
}
