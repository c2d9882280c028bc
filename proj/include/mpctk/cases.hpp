#pragma once

#include "mpctk/model.hpp"

namespace mpctk::cases {

/// Tank transfer matrix: inputs (cold flow, hot flow[, hot load]), outputs (level, temperature).
TransferFunctionMatrix cstr_transfer(bool with_load_input);

/// Discretized tank at Ts = 2 s around uop = [20, 20], yop = [50, 30].
/// With feedforward, the load enters as a measured disturbance (dop = [20]).
LinearModel cstr_model(bool feedforward);

/// Pendulum parameters p = [g, L, K, m].
inline std::vector<double> pendulum_parameters() { return {9.8, 0.4, 1.2, 0.3}; }

/// Pendulum with RK4 at Ts; output θ in degrees, plus ω when `speed_output`.
NonlinearModel pendulum_model(double Ts = 0.1, double friction_scale = 1.0, bool speed_output = false);

}  // namespace mpctk::cases
