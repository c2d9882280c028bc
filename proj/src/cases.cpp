#include "mpctk/cases.hpp"

#include <cmath>

namespace mpctk::cases {

TransferFunctionMatrix cstr_transfer(bool with_load_input) {
  TransferFunctionMatrix G(2, with_load_input ? 3 : 2);
  G(0, 0) = {{1.9}, {18.0, 1.0}};
  G(0, 1) = {{1.9}, {18.0, 1.0}};
  G(1, 0) = {{-0.74}, {8.0, 1.0}};
  G(1, 1) = {{0.74}, {8.0, 1.0}};
  if (with_load_input) {
    G(0, 2) = G(0, 1);
    G(1, 2) = G(1, 1);
  }
  return G;
}

LinearModel cstr_model(bool feedforward) {
  LinearModel m = feedforward ? from_transfer_function(cstr_transfer(true), 2.0, {2})
                              : from_transfer_function(cstr_transfer(false), 2.0);
  const Eigen::Vector2d uop(20.0, 20.0), yop(50.0, 30.0);
  if (feedforward) {
    m.set_operating_point(uop, yop, VectorXd::Constant(1, 20.0));
  } else {
    m.set_operating_point(uop, yop);
  }
  ModelNames names;
  names.u = {"cold flow", "hot flow"};
  names.y = {"level", "temperature"};
  if (feedforward) names.d = {"hot load"};
  m.set_names(names);
  return m;
}

NonlinearModel pendulum_model(double Ts, double friction_scale, bool speed_output) {
  auto f = make_state_function([](auto xdot, auto x, auto u, auto, auto p) {
    using std::sin;
    using ad::sin;
    const double g = p[0], L = p[1], K = p[2], m = p[3];
    xdot[0] = x[1];
    xdot[1] = -g / L * sin(x[0]) - K / m * x[1] + u[0] / (m * L * L);
  });
  std::vector<double> p = pendulum_parameters();
  p[2] *= friction_scale;
  ModelNames names;
  names.u = {"torque"};
  names.x = {"angle", "speed"};
  if (speed_output) {
    auto h = make_output_function([](auto y, auto x, auto, auto) {
      y[0] = 180.0 / M_PI * x[0];
      y[1] = x[1];
    });
    NonlinearModel m(f, h, Ts, 1, 2, 2, 0, p);
    names.y = {"angle", "speed"};
    m.set_names(names);
    return m;
  }
  auto h = make_output_function([](auto y, auto x, auto, auto) { y[0] = 180.0 / M_PI * x[0]; });
  NonlinearModel m(f, h, Ts, 1, 2, 1, 0, p);
  names.y = {"angle"};
  m.set_names(names);
  return m;
}

}  // namespace mpctk::cases
