#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mpctk/controllers.hpp"
#include "mpctk/estimators.hpp"
#include "mpctk/model.hpp"

namespace mpctk::sim {

struct StepDiagnostics {
  std::string status;
  int iterations = 0;
  bool degraded = false;
  double epsilon = 0.0;
  double J = 0.0;
};

/// Closed-loop log. Each matrix holds one column per step; states are physical.
struct SimRecord {
  std::string name;
  double Ts = 0.0;
  ModelNames names;
  MatrixXd U, Y, Ry, X, Xhat, D;
  std::vector<StepDiagnostics> diagnostics;
  std::vector<std::string> trace;  ///< call sequence, filled when the scenario asks for it
  VectorXd umin, umax, ymin, ymax;  ///< first-step bounds, for plotting

  int steps() const { return static_cast<int>(U.cols()); }
  double time(int k) const { return k * Ts; }
};

/// Signal change taking effect at zero-based step `k` and held afterwards.
struct Change {
  int k = 0;
  VectorXd value;
};

/// Gaussian measurement noise: Box–Muller on the top 53 bits of mt19937_64.
class NoiseSource {
 public:
  explicit NoiseSource(std::uint64_t seed) : rng_(seed) {}
  double standard_normal();
  VectorXd sample(const VectorXd& sigma);

 private:
  std::mt19937_64 rng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

struct Scenario {
  std::string name;
  std::shared_ptr<const SimModel> plant;  ///< cloned for each run
  std::function<std::unique_ptr<PredictiveController>()> controller;
  std::function<std::unique_ptr<StateEstimator>()> estimator;  ///< estimation-only runs
  int N = 1;

  VectorXd ry;
  std::vector<Change> ry_changes;
  VectorXd u_load;  ///< added to the plant input (zeros when empty)
  std::vector<Change> u_load_changes;
  VectorXd d;  ///< measured disturbance seen by the controller
  std::vector<Change> d_changes;
  VectorXd y_step;   ///< added to every measurement
  VectorXd y_noise;  ///< per-output standard deviation
  std::uint64_t seed = 0;

  std::optional<VectorXd> x0;     ///< plant state (physical); default: model state
  std::optional<VectorXd> xhat0;  ///< estimator state; default: bumpless init
  VectorXd u_est;                 ///< constant input of estimation-only runs

  /// Replaces the default initialization (after x0 is applied).
  std::function<void(PredictiveController&, const VectorXd& ym, const VectorXd& d)> initialize;
  /// Called after each move, before the estimator update (model adaptation).
  std::function<void(PredictiveController&, const VectorXd& u)> after_move;
  bool trace = false;
};

/// Runs the scenario; controller and estimator errors are rethrown with the step index.
SimRecord run_closed_loop(const Scenario& s);
SimRecord run_estimation_only(const Scenario& s);

/// Thrown when a run aborts; carries the zero-based step.
class StepError : public std::runtime_error {
 public:
  StepError(int k, const std::string& what)
      : std::runtime_error("step " + std::to_string(k) + ": " + what), k_(k) {}
  int step() const { return k_; }

 private:
  int k_;
};

/// Left-endpoint motor work Ts·Σ τ(k)·ω(k) over all but the last sample.
double compute_work(const SimRecord& rec);

struct Timing {
  std::vector<double> samples;  ///< seconds per whole-scenario run
  double median = 0.0, q1 = 0.0, q3 = 0.0;
};
Timing summarize(std::vector<double> samples);
Timing benchmark(const std::function<void()>& run, int repeats, int warmup = 1);
Timing benchmark(const Scenario& s, int repeats, int warmup = 1);

void export_csv(const SimRecord& rec, const std::string& path);
std::string to_csv(const SimRecord& rec);
/// Parses the CSV layout written by to_csv (values only).
SimRecord parse_csv(const std::string& text, double Ts = 0.0);
void export_svg(const SimRecord& rec, const std::string& path);
std::string to_svg(const SimRecord& rec);

/// Built-in case studies with overridable parameters.
struct CaseConfig {
  std::string plant = "cstr";       ///< cstr | pendulum
  bool feedforward = false;         ///< cstr only
  std::string controller = "mpc";   ///< cstr: mpc | explicit; pendulum: nmpc | empc | slmpc | estimator
  std::string test = "track";       ///< pendulum: track | regulate
  std::optional<int> N, Hp, Hc;
  std::optional<VectorXd> Mwt, Nwt, Lwt;
  std::optional<double> Cwt, Ewt;
  std::optional<VectorXd> umin, umax, dumin, dumax, ymin, ymax;
  std::optional<VectorXd> y_noise;
  std::uint64_t seed = 0;
  std::optional<double> friction_scale;  ///< pendulum plant mismatch (default 1.25)

  std::string label() const;
};

CaseConfig case_from_json(const nlohmann::json& j);
nlohmann::json case_to_json(const CaseConfig& c);
Scenario build_scenario(const CaseConfig& c);

}  // namespace mpctk::sim
