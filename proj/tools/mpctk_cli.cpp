// Command-line front end: case studies, benchmarks and exports.
//
// Exit codes: 0 ok, 1 usage, 2 failed --check, 3 runtime failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mpctk/sim.hpp"

namespace fs = std::filesystem;
using namespace mpctk;

namespace {

constexpr int kOk = 0, kUsage = 1, kCheckFailed = 2, kRuntime = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string out;
  std::vector<std::string> formats{"csv", "svg"};
  int verbose = 0;
  bool check = false;
};

/// Flat override flags shared by the case-study subcommands.
struct Overrides {
  std::optional<int> n, hp, hc;
  std::vector<std::string> mwt, nwt, lwt, umin, umax, dumin, dumax, ymin, ymax, y_noise;
  std::optional<std::string> cwt, ewt;
  std::optional<std::uint64_t> seed;
  std::optional<double> friction_scale;

  void attach(CLI::App* app, bool pendulum) {
    app->add_option("--n", n, "number of steps N")->check(CLI::PositiveNumber);
    app->add_option("--hp", hp, "prediction horizon Hp")->check(CLI::PositiveNumber);
    app->add_option("--hc", hc, "control horizon Hc")->check(CLI::PositiveNumber);
    app->add_option("--mwt", mwt, "output weights, one per output")->delimiter(',');
    app->add_option("--nwt", nwt, "move weights, one per input")->delimiter(',');
    app->add_option("--lwt", lwt, "input setpoint weights, one per input")->delimiter(',');
    app->add_option("--cwt", cwt, "slack weight (inf removes the slack)");
    if (pendulum) app->add_option("--ewt", ewt, "economic weight (empc)");
    app->add_option("--umin", umin, "input lower bounds")->delimiter(',');
    app->add_option("--umax", umax, "input upper bounds")->delimiter(',');
    app->add_option("--dumin", dumin, "input increment lower bounds")->delimiter(',');
    app->add_option("--dumax", dumax, "input increment upper bounds")->delimiter(',');
    app->add_option("--ymin", ymin, "output lower bounds")->delimiter(',');
    app->add_option("--ymax", ymax, "output upper bounds")->delimiter(',');
    app->add_option("--y-noise", y_noise, "measurement noise deviation per output")->delimiter(',');
    app->add_option("--seed", seed, "noise seed");
    if (pendulum) app->add_option("--friction-scale", friction_scale, "plant friction multiplier (default 1.25)");
  }

  static double number(const std::string& s) {
    if (s == "inf" || s == "+inf" || s == "Inf") return kInfinity;
    if (s == "-inf" || s == "-Inf") return -kInfinity;
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      throw UsageError("not a number: " + s);
    }
    if (used != s.size()) throw UsageError("not a number: " + s);
    return v;
  }
  static std::optional<VectorXd> vec(const std::vector<std::string>& v) {
    if (v.empty()) return std::nullopt;
    VectorXd out(static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<Eigen::Index>(i)] = number(v[i]);
    return out;
  }

  void apply(sim::CaseConfig& c) const {
    if (n) c.N = *n;
    if (hp) c.Hp = *hp;
    if (hc) c.Hc = *hc;
    if (auto v = vec(mwt)) c.Mwt = v;
    if (auto v = vec(nwt)) c.Nwt = v;
    if (auto v = vec(lwt)) c.Lwt = v;
    if (auto v = vec(umin)) c.umin = v;
    if (auto v = vec(umax)) c.umax = v;
    if (auto v = vec(dumin)) c.dumin = v;
    if (auto v = vec(dumax)) c.dumax = v;
    if (auto v = vec(ymin)) c.ymin = v;
    if (auto v = vec(ymax)) c.ymax = v;
    if (auto v = vec(y_noise)) c.y_noise = v;
    if (cwt) c.Cwt = number(*cwt);
    if (ewt) c.Ewt = number(*ewt);
    if (seed) c.seed = *seed;
    if (friction_scale) c.friction_scale = *friction_scale;
  }
};

bool wants(const Common& o, const std::string& f) {
  return std::find(o.formats.begin(), o.formats.end(), f) != o.formats.end();
}

void write_outputs(const Common& o, const sim::CaseConfig& c, const sim::SimRecord& rec) {
  fs::create_directories(o.out);
  const std::string base = (fs::path(o.out) / c.label()).string();
  if (wants(o, "csv")) sim::export_csv(rec, base + ".csv");
  if (wants(o, "svg")) sim::export_svg(rec, base + ".svg");
  if (wants(o, "json")) {
    std::ofstream f(base + ".json");
    if (!f) throw std::runtime_error("cannot open " + base + ".json for writing");
    f << sim::case_to_json(c).dump(2) << "\n";
  }
  if (o.verbose > 0) std::cout << "wrote " << base << ".{" << [&] {
    std::string s;
    for (const auto& f : o.formats) s += (s.empty() ? "" : ",") + f;
    return s;
  }() << "}\n";
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

int report_degraded(const sim::SimRecord& rec) {
  int n = 0;
  for (const auto& d : rec.diagnostics) n += d.degraded ? 1 : 0;
  if (n > 0) std::cout << "degraded moves: " << n << "\n";
  return n;
}

int run_cstr(const Common& o, const sim::CaseConfig& c) {
  const auto s = sim::build_scenario(c);
  const auto rec = sim::run_closed_loop(s);
  const double bound = c.ymin ? (*c.ymin)[0] : 45.0;
  double ymin_seen = kInfinity;
  int violations = 0;
  bool after_load = false;
  for (int k = 0; k < rec.steps(); ++k) {
    ymin_seen = std::min(ymin_seen, rec.Y(0, k));
    if (rec.Y(0, k) < bound) {
      ++violations;
      if (k >= 50) after_load = true;
    }
  }
  std::cout << c.label() << ": N = " << rec.steps() << ", min y_L = " << fixed(ymin_seen)
            << ", steps with y_L < " << bound << ": " << violations << "\n";
  const int last = rec.steps() - 1;
  std::cout << "final tracking error: [" << fixed(rec.Y(0, last) - rec.Ry(0, last)) << ", "
            << fixed(rec.Y(1, last) - rec.Ry(1, last)) << "]\n";
  report_degraded(rec);
  write_outputs(o, c, rec);
  if (!o.check) return kOk;
  if (c.feedforward) {
    const bool ok = ymin_seen >= bound - 0.5;
    std::cout << "check: min y_L >= " << bound - 0.5 << (ok ? " holds" : " FAILS") << "\n";
    return ok ? kOk : kCheckFailed;
  }
  std::cout << "check: y_L < " << bound << " after the load " << (after_load ? "occurred" : "did NOT occur")
            << " (expected without feedforward)\n";
  return after_load ? kOk : kCheckFailed;
}

int run_pendulum(const Common& o, const sim::CaseConfig& c) {
  const auto s = sim::build_scenario(c);
  if (c.controller == "estimator") {
    const auto t = sim::benchmark([&] { (void)sim::run_estimation_only(s); }, 1, 0);
    const auto rec = sim::run_estimation_only(s);
    const int last = rec.steps() - 1;
    double worst = 0.0;
    for (int k = rec.steps() / 2; k < rec.steps(); ++k) {
      worst = std::max(worst, std::abs(rec.X(0, k) - rec.Xhat(0, k)) * 180.0 / std::numbers::pi);
    }
    std::cout << c.label() << ": N = " << rec.steps() << ", final θ = "
              << fixed(rec.X(0, last) * 180.0 / std::numbers::pi) << "°, θ̂ error over the second half <= "
              << fixed(worst) << "°, x̂3 = " << fixed(rec.Xhat(2, last)) << ", time " << fixed(t.median, 6) << " s\n";
    write_outputs(o, c, rec);
    if (!o.check) return kOk;
    const bool ok = worst <= 5.0 && std::abs(rec.Xhat(2, last)) > 1e-3;
    std::cout << "check: bounded angle estimate and active torque integrator " << (ok ? "hold" : "FAIL") << "\n";
    return ok ? kOk : kCheckFailed;
  }
  sim::SimRecord rec;
  const auto t = sim::benchmark([&] { rec = sim::run_closed_loop(s); }, 1, 0);
  const int last = rec.steps() - 1;
  // the output step sits on the measurement, so rejection is judged on y
  const double err = rec.Y(0, last) - 180.0;
  const double theta_err = rec.X(0, last) * 180.0 / std::numbers::pi - 180.0;
  const double umax = rec.U.cwiseAbs().maxCoeff();
  const double W = sim::compute_work(rec);
  std::cout << c.label() << ": N = " << rec.steps() << ", final output error " << fixed(err)
            << "° (plant angle " << fixed(theta_err) << "° from 180°), max |τ| = " << fixed(umax) << " N·m, W = " << fixed(W, 5)
            << " J, time " << fixed(t.median, 6) << " s\n";
  report_degraded(rec);
  write_outputs(o, c, rec);
  if (!o.check) return kOk;
  const double ubound = c.umax ? (*c.umax)[0] : 1.5;
  const bool ok = std::abs(err) <= 2.0 && umax <= ubound;
  std::cout << "check: |y_N - 180°| <= 2° and |τ| <= " << ubound << (ok ? " hold" : " FAIL") << "\n";
  return ok ? kOk : kCheckFailed;
}

struct BenchRow {
  std::string key, plant, control, test;
  sim::CaseConfig cfg;
  bool linear;
};

std::vector<BenchRow> bench_rows() {
  std::vector<BenchRow> rows;
  auto cstr = [&](bool ff) {
    sim::CaseConfig c;
    c.feedforward = ff;
    rows.push_back({ff ? "cstr_ff" : "cstr", "CSTR", "MPC", ff ? "feedforward" : "feedback", c, true});
  };
  cstr(false);
  cstr(true);
  for (const char* ctl : {"nmpc", "empc", "slmpc"}) {
    for (const char* test : {"track", "regulate"}) {
      sim::CaseConfig c;
      c.plant = "pendulum";
      c.controller = ctl;
      c.test = test;
      std::string control = ctl;
      for (auto& ch : control) ch = static_cast<char>(std::toupper(ch));
      rows.push_back({std::string(ctl) + "_" + test, "Pendulum", control,
                      std::string(test) == "track" ? "setpoint" : "disturbance", c, std::string(ctl) == "slmpc"});
    }
  }
  return rows;
}

int run_bench(const Common& o, std::optional<int> repeats, int warmup, const std::vector<std::string>& subset) {
  auto rows = bench_rows();
  if (!subset.empty()) {
    std::vector<BenchRow> kept;
    for (const auto& name : subset) {
      bool found = false;
      for (const auto& r : rows) {
        const bool match = r.key == name || r.key.rfind(name + "_", 0) == 0 ||
                           (name == "cstr" && r.plant == "CSTR");
        if (match && std::none_of(kept.begin(), kept.end(), [&](const BenchRow& k) { return k.key == r.key; })) {
          kept.push_back(r);
        }
        found = found || match;
      }
      if (!found) throw UsageError("unknown benchmark entry: " + name);
    }
    rows = kept;
  }
  std::ostringstream csv;
  csv << "Plant,Control,Test,Median(s),Q1(s),Q3(s),Repeats\n";
  std::printf("%-9s %-6s %-12s %12s %12s %12s %7s\n", "Plant", "Control", "Test", "Median(s)", "Q1(s)", "Q3(s)",
              "Repeats");
  std::map<std::string, double> medians;
  for (const auto& r : rows) {
    const int n = repeats.value_or(r.linear ? 500 : 50);
    const auto s = sim::build_scenario(r.cfg);
    const auto t = sim::benchmark(s, n, warmup);
    medians[r.key] = t.median;
    std::printf("%-9s %-6s %-12s %12.6f %12.6f %12.6f %7d\n", r.plant.c_str(), r.control.c_str(), r.test.c_str(),
                t.median, t.q1, t.q3, n);
    csv << r.plant << "," << r.control << "," << r.test << "," << t.median << "," << t.q1 << "," << t.q3 << "," << n
        << "\n";
  }
  fs::create_directories(o.out);
  const std::string path = (fs::path(o.out) / "bench.csv").string();
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << csv.str();
  if (!o.check) return kOk;
  bool ok = true, any = false;
  for (const char* test : {"track", "regulate"}) {
    const std::string a = std::string("nmpc_") + test, b = std::string("slmpc_") + test;
    if (!medians.count(a) || !medians.count(b)) continue;
    any = true;
    const double ratio = medians[a] / medians[b];
    std::cout << "check: NMPC/SLMPC median ratio (" << test << ") = " << fixed(ratio, 1)
              << (ratio >= 5.0 ? " >= 5" : " < 5 FAILS") << "\n";
    ok = ok && ratio >= 5.0;
  }
  if (!any) throw UsageError("--check needs both nmpc and slmpc entries");
  return ok ? kOk : kCheckFailed;
}

int run_case(const Common& o, const sim::CaseConfig& c) {
  if (c.plant == "cstr") return run_cstr(o, c);
  return run_pendulum(o, c);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Model predictive control toolkit: case studies, benchmarks and exports"};
  app.require_subcommand(1);
  Common common;
  const char* env_out = std::getenv("MPCTK_OUT");
  common.out = env_out && *env_out ? env_out : "out";
  app.add_option("--out", common.out, "output directory (default $MPCTK_OUT or ./out)");
  app.add_option("--format", common.formats, "export formats: csv, svg, json")
      ->delimiter(',')
      ->check(CLI::IsMember({"csv", "svg", "json"}));
  app.add_flag("-v,--verbose", common.verbose, "more output");

  sim::CaseConfig cstr_cfg;
  Overrides cstr_ov;
  auto* cstr = app.add_subcommand("cstr", "tank reactor under linear MPC (N = 75, setpoint and load steps)");
  cstr->add_flag("--feedforward", cstr_cfg.feedforward, "measure the load as a disturbance");
  cstr->add_option("--controller", cstr_cfg.controller, "mpc or explicit")
      ->check(CLI::IsMember({"mpc", "explicit"}));
  cstr->add_flag("--check", common.check, "exit 2 when the expected constraint behavior is not met");
  cstr_ov.attach(cstr, false);

  sim::CaseConfig pend_cfg;
  pend_cfg.plant = "pendulum";
  pend_cfg.controller = "nmpc";
  Overrides pend_ov;
  auto* pend = app.add_subcommand("pendulum", "inverted pendulum under nonlinear, economic or linearized MPC");
  pend->add_option("--controller", pend_cfg.controller, "nmpc, empc, slmpc or estimator")
      ->check(CLI::IsMember({"nmpc", "empc", "slmpc", "estimator"}));
  pend->add_option("--scenario", pend_cfg.test, "track or regulate")->check(CLI::IsMember({"track", "regulate"}));
  pend->add_flag("--check", common.check, "exit 2 unless the angle ends within 2° of 180°");
  pend_ov.attach(pend, true);

  std::optional<int> repeats;
  int warmup = 1;
  std::vector<std::string> subset;
  auto* bench = app.add_subcommand("bench", "median whole-scenario times (500 linear / 50 nonlinear repeats)");
  bench->add_option("--repeats", repeats, "repeats per scenario")->check(CLI::PositiveNumber);
  bench->add_option("--warmup", warmup, "untimed runs before timing")->check(CLI::NonNegativeNumber);
  bench->add_option("--subset", subset, "entries, e.g. cstr,nmpc_track,slmpc")->delimiter(',');
  bench->add_flag("--check", common.check, "exit 2 unless SLMPC is at least 5x faster than NMPC");

  std::string scenario_file;
  auto* scen = app.add_subcommand("scenario", "run a case study described by a JSON file");
  scen->add_option("file", scenario_file, "scenario JSON")->required()->check(CLI::ExistingFile);
  scen->add_flag("--check", common.check, "apply the case study's acceptance check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*cstr) {
      cstr_ov.apply(cstr_cfg);
      return run_case(common, cstr_cfg);
    }
    if (*pend) {
      pend_ov.apply(pend_cfg);
      return run_case(common, pend_cfg);
    }
    if (*bench) return run_bench(common, repeats, warmup, subset);
    if (*scen) {
      std::ifstream f(scenario_file);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(f);
      } catch (const nlohmann::json::exception& e) {
        throw UsageError(scenario_file + ": " + e.what());
      }
      sim::CaseConfig c;
      try {
        c = sim::case_from_json(j);
      } catch (const std::exception& e) {
        throw UsageError(scenario_file + ": " + e.what());
      }
      return run_case(common, c);
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const sim::StepError& e) {
    std::cerr << "runtime failure at " << e.what() << "\n";
    return kRuntime;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}
