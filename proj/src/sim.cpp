#include "mpctk/sim.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "mpctk/cases.hpp"
#include "mpctk/linalg.hpp"

namespace mpctk::sim {

// ------------------------------------------------------------------- noise

double NoiseSource::standard_normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  auto uniform = [this] {
    // (0, 1]: avoids log(0)
    return (static_cast<double>(rng_() >> 11) + 1.0) * 0x1.0p-53;
  };
  const double u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

VectorXd NoiseSource::sample(const VectorXd& sigma) {
  VectorXd v(sigma.size());
  for (Eigen::Index i = 0; i < sigma.size(); ++i) v[i] = sigma[i] * standard_normal();
  return v;
}

// ----------------------------------------------------------------- runners

namespace {

VectorXd select(const VectorXd& y, const std::vector<int>& idx) {
  VectorXd out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out[static_cast<Eigen::Index>(i)] = y[idx[i]];
  return out;
}

VectorXd or_zeros(const VectorXd& v, int n) { return v.size() ? v : VectorXd::Zero(n); }

void apply_changes(const std::vector<Change>& changes, int k, VectorXd& target) {
  for (const Change& c : changes) {
    if (c.k == k) target = c.value;
  }
}

VectorXd physical_xhat(const StateEstimator& est) {
  VectorXd x = est.xhat();
  const SimModel& base = est.model().base();
  x.head(base.nx()) += base.state_offset();
  return x;
}

void check_schedule(const std::vector<Change>& changes, int N, Eigen::Index size, const char* what) {
  for (const Change& c : changes) {
    require(c.k >= 0 && c.k < N, std::string(what) + " change outside the run");
    require(c.value.size() == size, std::string(what) + " change has the wrong length");
  }
}

struct Signals {
  VectorXd ry, ul, d, ystep;
};

Signals initial_signals(const Scenario& s, const SimModel& plant) {
  Signals g;
  g.ry = s.ry;
  g.ul = or_zeros(s.u_load, plant.nu());
  g.d = s.d;
  g.ystep = or_zeros(s.y_step, plant.ny());
  require_size(g.ul, plant.nu(), "u_load");
  require_size(g.ystep, plant.ny(), "y_step");
  require(s.y_noise.size() == 0 || s.y_noise.size() == plant.ny(), "y_noise: one deviation per output");
  require(s.N >= 1, "N must be >= 1");
  check_schedule(s.ry_changes, s.N, g.ry.size(), "setpoint");
  check_schedule(s.u_load_changes, s.N, plant.nu(), "load");
  check_schedule(s.d_changes, s.N, g.d.size(), "disturbance");
  return g;
}

void allocate(SimRecord& r, const Scenario& s, const SimModel& plant, int nxhat, int nry, int nd) {
  r.name = s.name;
  r.Ts = plant.Ts();
  r.names = plant.names();
  r.U.resize(plant.nu(), s.N);
  r.Y.resize(plant.ny(), s.N);
  r.Ry.resize(nry, s.N);
  r.X.resize(plant.nx(), s.N);
  r.Xhat.resize(nxhat, s.N);
  r.D.resize(nd, s.N);
}

}  // namespace

SimRecord run_closed_loop(const Scenario& s) {
  require(s.plant != nullptr && static_cast<bool>(s.controller), "scenario needs a plant and a controller");
  auto plant = s.plant->clone();
  if (s.x0) plant->set_state(*s.x0 - plant->state_offset());
  Signals g = initial_signals(s, *plant);
  auto mpc = s.controller();
  const std::vector<int> i_ym = mpc->model().i_ym();
  const VectorXd d_plant_empty;
  auto plant_d = [&](const VectorXd& d) -> const VectorXd& { return plant->nd() > 0 ? d : d_plant_empty; };
  NoiseSource noise(s.seed);

  SimRecord rec;
  allocate(rec, s, *plant, mpc->model().nxhat(), static_cast<int>(g.ry.size()), static_cast<int>(g.d.size()));
  rec.umin = mpc->constraints().Umin.head(plant->nu());
  rec.umax = mpc->constraints().Umax.head(plant->nu());
  rec.ymin = mpc->constraints().Ymin.head(mpc->model().ny());
  rec.ymax = mpc->constraints().Ymax.head(mpc->model().ny());
  auto mark = [&](const char* what, int k) {
    if (s.trace) rec.trace.push_back(std::string(what) + " " + std::to_string(k));
  };

  {
    const VectorXd ym = select(plant->output(plant_d(g.d)), i_ym);
    if (s.initialize) {
      s.initialize(*mpc, ym, g.d);
    } else if (s.xhat0) {
      mpc->estimator().set_state(*s.xhat0);
    } else {
      mpc->init(mpc->model().base().uop(), ym, g.d);
    }
  }

  for (int k = 0; k < s.N; ++k) {
    int stage = 0;
    try {
      apply_changes(s.ry_changes, k, g.ry);
      apply_changes(s.u_load_changes, k, g.ul);
      apply_changes(s.d_changes, k, g.d);
      VectorXd y = plant->output(plant_d(g.d)) + g.ystep;
      if (s.y_noise.size()) y += noise.sample(s.y_noise);
      const VectorXd ym = select(y, i_ym);
      mpc->prepare(ym, g.d);
      mark("prepare", k);
      stage = 1;
      const MoveResult& res = mpc->move({g.ry, g.d, {}, {}, {}});
      const VectorXd u = res.u;
      mark("move", k);
      rec.diagnostics.push_back({res.status, res.iterations, res.degraded, res.epsilon, res.J});
      if (s.after_move) s.after_move(*mpc, u);
      rec.U.col(k) = u;
      rec.Y.col(k) = y;
      rec.Ry.col(k) = g.ry;
      rec.X.col(k) = plant->state() + plant->state_offset();
      rec.Xhat.col(k) = physical_xhat(mpc->estimator());
      if (g.d.size()) rec.D.col(k) = g.d;
      mark("log", k);
      stage = 2;
      mpc->update(u, ym, g.d);
      mark("update", k);
      plant->step(u + g.ul, plant_d(g.d));
    } catch (const StepError&) {
      throw;
    } catch (const std::exception& e) {
      static const char* stages[] = {"estimate", "move", "update"};
      throw StepError(k, std::string(stages[stage]) + ": " + e.what());
    }
  }
  return rec;
}

SimRecord run_estimation_only(const Scenario& s) {
  require(s.plant != nullptr && static_cast<bool>(s.estimator), "scenario needs a plant and an estimator");
  auto plant = s.plant->clone();
  if (s.x0) plant->set_state(*s.x0 - plant->state_offset());
  Signals g = initial_signals(s, *plant);
  auto est = s.estimator();
  require_size(s.u_est, plant->nu(), "u");
  const std::vector<int> i_ym = est->model().i_ym();
  const VectorXd none;
  auto plant_d = [&](const VectorXd& d) -> const VectorXd& { return plant->nd() > 0 ? d : none; };
  NoiseSource noise(s.seed);

  SimRecord rec;
  allocate(rec, s, *plant, est->nxhat(), 0, static_cast<int>(g.d.size()));
  rec.umin = rec.umax = VectorXd::Constant(plant->nu(), kInfinity);
  rec.umin *= -1.0;
  rec.ymin = rec.ymax = VectorXd::Constant(plant->ny(), kInfinity);
  rec.ymin *= -1.0;

  {
    const VectorXd ym = select(plant->output(plant_d(g.d)), i_ym);
    if (s.xhat0) {
      est->set_state(*s.xhat0);
    } else {
      est->init(s.u_est, ym, g.d);
    }
  }
  for (int k = 0; k < s.N; ++k) {
    try {
      apply_changes(s.u_load_changes, k, g.ul);
      apply_changes(s.d_changes, k, g.d);
      VectorXd y = plant->output(plant_d(g.d)) + g.ystep;
      if (s.y_noise.size()) y += noise.sample(s.y_noise);
      const VectorXd ym = select(y, i_ym);
      est->prepare(ym, g.d);
      rec.U.col(k) = s.u_est;
      rec.Y.col(k) = y;
      rec.X.col(k) = plant->state() + plant->state_offset();
      rec.Xhat.col(k) = physical_xhat(*est);
      if (g.d.size()) rec.D.col(k) = g.d;
      est->update(s.u_est, ym, g.d);
      plant->step(s.u_est + g.ul, plant_d(g.d));
    } catch (const std::exception& e) {
      throw StepError(k, e.what());
    }
  }
  return rec;
}

double compute_work(const SimRecord& rec) {
  require(rec.U.rows() >= 1, "compute_work: record has no input");
  require(rec.X.rows() >= 2, "compute_work: record has no speed state");
  double W = 0.0;
  for (int k = 0; k + 1 < rec.steps(); ++k) W += rec.U(0, k) * rec.X(1, k);
  return rec.Ts * W;
}

// ----------------------------------------------------------------- timing

Timing summarize(std::vector<double> samples) {
  require(!samples.empty(), "no timing samples");
  Timing t;
  t.samples = samples;
  std::sort(samples.begin(), samples.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(samples.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, samples.size() - 1);
    return samples[lo] + (pos - static_cast<double>(lo)) * (samples[hi] - samples[lo]);
  };
  t.median = quantile(0.5);
  t.q1 = quantile(0.25);
  t.q3 = quantile(0.75);
  return t;
}

Timing benchmark(const std::function<void()>& run, int repeats, int warmup) {
  require(repeats >= 1, "repeats must be >= 1");
  require(warmup >= 0, "warm-up count must be >= 0");
  for (int i = 0; i < warmup; ++i) run();
  std::vector<double> samples;
  samples.reserve(static_cast<std::size_t>(repeats));
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run();
    const auto t1 = std::chrono::steady_clock::now();
    samples.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  return summarize(std::move(samples));
}

Timing benchmark(const Scenario& s, int repeats, int warmup) {
  if (s.controller) return benchmark([&s] { (void)run_closed_loop(s); }, repeats, warmup);
  return benchmark([&s] { (void)run_estimation_only(s); }, repeats, warmup);
}

// -------------------------------------------------------------------- CSV

namespace {

void put_number(std::string& out, double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, r.ptr);
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path);
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_number(const std::string& s) {
  if (s == "inf") return kInfinity;
  if (s == "-inf") return -kInfinity;
  if (s == "nan" || s == "-nan") return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw std::invalid_argument("bad CSV number: " + s);
  return v;
}

}  // namespace

std::string to_csv(const SimRecord& rec) {
  std::string out = "k,t";
  auto header = [&](const char* prefix, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) out += "," + std::string(prefix) + std::to_string(i + 1);
  };
  header("u", rec.U.rows());
  header("y", rec.Y.rows());
  header("ry", rec.Ry.rows());
  header("x", rec.X.rows());
  header("xhat", rec.Xhat.rows());
  out += '\n';
  for (int k = 0; k < rec.steps(); ++k) {
    out += std::to_string(k);
    out += ',';
    put_number(out, rec.time(k));
    for (const MatrixXd* m : {&rec.U, &rec.Y, &rec.Ry, &rec.X, &rec.Xhat}) {
      for (Eigen::Index i = 0; i < m->rows(); ++i) {
        out += ',';
        put_number(out, (*m)(i, k));
      }
    }
    out += '\n';
  }
  return out;
}

void export_csv(const SimRecord& rec, const std::string& path) { write_file(path, to_csv(rec)); }

SimRecord parse_csv(const std::string& text, double Ts) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument("empty CSV");
  const auto head = split(line, ',');
  require(head.size() >= 2 && head[0] == "k" && head[1] == "t", "CSV must start with k,t");
  int n[5] = {0, 0, 0, 0, 0};
  const char* prefixes[5] = {"u", "y", "ry", "x", "xhat"};
  for (std::size_t c = 2; c < head.size(); ++c) {
    const std::string& h = head[c];
    // longest prefix first so "xhat" is not read as "x"
    int group = -1;
    for (int g : {4, 2, 3, 0, 1}) {
      const std::string p = prefixes[g];
      if (h.size() > p.size() && h.compare(0, p.size(), p) == 0 &&
          std::all_of(h.begin() + static_cast<long>(p.size()), h.end(), ::isdigit)) {
        group = g;
        break;
      }
    }
    require(group >= 0, "unknown CSV column " + h);
    ++n[group];
  }
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line, ',');
    require(cells.size() == head.size(), "CSV row with the wrong number of cells");
    std::vector<double> v;
    for (const auto& c : cells) v.push_back(parse_number(c));
    rows.push_back(std::move(v));
  }
  const auto N = static_cast<Eigen::Index>(rows.size());
  SimRecord rec;
  rec.Ts = N >= 2 ? rows[1][1] : Ts;
  MatrixXd* mats[5] = {&rec.U, &rec.Y, &rec.Ry, &rec.X, &rec.Xhat};
  for (int g = 0; g < 5; ++g) mats[g]->resize(n[g], N);
  for (Eigen::Index k = 0; k < N; ++k) {
    std::size_t c = 2;
    for (int g = 0; g < 5; ++g) {
      for (int i = 0; i < n[g]; ++i) (*mats[g])(i, k) = rows[static_cast<std::size_t>(k)][c++];
    }
  }
  return rec;
}

// -------------------------------------------------------------------- SVG

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

struct Panel {
  std::string id, label;
  std::vector<const MatrixXd*> series;  // first row of each is drawn
  std::vector<Eigen::Index> rows;
  std::vector<std::string> styles;
  double lo_bound = -kInfinity, hi_bound = kInfinity;
};

}  // namespace

std::string to_svg(const SimRecord& rec) {
  constexpr double W = 720, H = 150, left = 70, right = 20, top = 24, bottom = 26;
  std::vector<Panel> panels;
  auto name_of = [](const std::vector<std::string>& names, Eigen::Index i, const std::string& def) {
    return i < static_cast<Eigen::Index>(names.size()) ? names[static_cast<std::size_t>(i)] : def;
  };
  for (Eigen::Index i = 0; i < rec.U.rows(); ++i) {
    Panel p{"panel-u" + std::to_string(i + 1), name_of(rec.names.u, i, "u" + std::to_string(i + 1)), {&rec.U}, {i},
            {"stroke:#1f77b4"}};
    if (i < rec.umin.size()) p.lo_bound = rec.umin[i];
    if (i < rec.umax.size()) p.hi_bound = rec.umax[i];
    panels.push_back(std::move(p));
  }
  for (Eigen::Index i = 0; i < rec.Y.rows(); ++i) {
    Panel p{"panel-y" + std::to_string(i + 1), name_of(rec.names.y, i, "y" + std::to_string(i + 1)), {&rec.Y}, {i},
            {"stroke:#1f77b4"}};
    if (i < rec.Ry.rows()) {
      p.series.push_back(&rec.Ry);
      p.rows.push_back(i);
      p.styles.push_back("stroke:#2ca02c;stroke-dasharray:6 3");
    }
    if (i < rec.ymin.size()) p.lo_bound = rec.ymin[i];
    if (i < rec.ymax.size()) p.hi_bound = rec.ymax[i];
    panels.push_back(std::move(p));
  }
  const double height = H * static_cast<double>(panels.size());
  const int N = rec.steps();
  const double tmax = std::max(rec.time(std::max(N - 1, 1)), 1e-12);

  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << W << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
     << "<title>" << xml_escape(rec.name) << "</title>\n";
  for (std::size_t pi = 0; pi < panels.size(); ++pi) {
    const Panel& p = panels[pi];
    const double y0 = H * static_cast<double>(pi) + top;
    const double ph = H - top - bottom, pw = W - left - right;
    double lo = kInfinity, hi = -kInfinity;
    for (std::size_t s = 0; s < p.series.size(); ++s) {
      for (int k = 0; k < N; ++k) {
        const double v = (*p.series[s])(p.rows[s], k);
        if (std::isfinite(v)) {
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
      }
    }
    for (double b : {p.lo_bound, p.hi_bound}) {
      if (std::isfinite(b)) {
        lo = std::min(lo, b);
        hi = std::max(hi, b);
      }
    }
    if (!std::isfinite(lo)) lo = hi = 0.0;
    if (hi - lo < 1e-12) {
      lo -= 1.0;
      hi += 1.0;
    }
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
    auto X = [&](double t) { return left + pw * t / tmax; };
    auto Y = [&](double v) { return y0 + ph * (hi - v) / (hi - lo); };

    os << "<g id=\"" << p.id << "\">\n"
       << "<text x=\"" << left << "\" y=\"" << fmt(y0 - 6) << "\">" << xml_escape(p.label) << "</text>\n"
       << "<rect x=\"" << left << "\" y=\"" << fmt(y0) << "\" width=\"" << pw << "\" height=\"" << fmt(ph)
       << "\" fill=\"none\" stroke=\"#444\"/>\n"
       << "<text x=\"" << left - 4 << "\" y=\"" << fmt(y0 + 10) << "\" text-anchor=\"end\">" << fmt(hi) << "</text>\n"
       << "<text x=\"" << left - 4 << "\" y=\"" << fmt(y0 + ph) << "\" text-anchor=\"end\">" << fmt(lo) << "</text>\n"
       << "<text x=\"" << fmt(X(tmax)) << "\" y=\"" << fmt(y0 + ph + 14) << "\" text-anchor=\"end\">t = "
       << fmt(tmax) << " s</text>\n";
    const std::pair<const char*, double> bounds[] = {{"min", p.lo_bound}, {"max", p.hi_bound}};
    for (const auto& [kind, b] : bounds) {
      if (!std::isfinite(b)) continue;
      os << "<line class=\"bound\" data-bound=\"" << kind << "\" data-value=\"" << fmt(b) << "\" x1=\"" << left
         << "\" x2=\"" << left + pw << "\" y1=\"" << fmt(Y(b)) << "\" y2=\"" << fmt(Y(b))
         << "\" stroke=\"#d62728\" stroke-dasharray=\"2 3\"/>\n";
    }
    for (std::size_t s = 0; s < p.series.size(); ++s) {
      os << "<polyline fill=\"none\" style=\"" << p.styles[s] << "\" points=\"";
      for (int k = 0; k < N; ++k) {
        const double v = (*p.series[s])(p.rows[s], k);
        if (!std::isfinite(v)) continue;
        os << fmt(X(rec.time(k))) << "," << fmt(Y(v)) << (k + 1 < N ? " " : "");
      }
      os << "\"/>\n";
    }
    os << "</g>\n";
  }
  os << "</svg>\n";
  return os.str();
}

void export_svg(const SimRecord& rec, const std::string& path) { write_file(path, to_svg(rec)); }

// ------------------------------------------------------------ case studies

std::string CaseConfig::label() const {
  if (plant == "cstr") {
    return std::string("cstr") + (controller == "explicit" ? "_explicit" : "") + (feedforward ? "_ff" : "");
  }
  if (controller == "estimator") return "pendulum_estimator";
  return "pendulum_" + controller + "_" + test;
}

namespace {

VectorXd json_bounds(const nlohmann::json& j, double missing) {
  require(j.is_array(), "expected an array of numbers");
  VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& e = j[i];
    double x;
    if (e.is_null()) {
      x = missing;
    } else if (e.is_string()) {
      const std::string s = e.get<std::string>();
      require(s == "inf" || s == "+inf" || s == "-inf", "bad number " + s);
      x = s == "-inf" ? -kInfinity : kInfinity;
    } else {
      x = e.get<double>();
    }
    v[static_cast<Eigen::Index>(i)] = x;
  }
  return v;
}

nlohmann::json bounds_json(const VectorXd& v) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::isfinite(v[i])) {
      a.push_back(v[i]);
    } else {
      a.push_back(v[i] > 0 ? "inf" : "-inf");
    }
  }
  return a;
}

const char* kCaseKeys[] = {"plant", "feedforward", "controller", "test", "N",    "Hp",    "Hc",   "Mwt",
                           "Nwt",   "Lwt",         "Cwt",        "Ewt",  "umin", "umax",  "dumin", "dumax",
                           "ymin",  "ymax",        "y_noise",    "seed", "friction_scale"};

}  // namespace

CaseConfig case_from_json(const nlohmann::json& j) {
  require(j.is_object(), "scenario must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    require(std::find(std::begin(kCaseKeys), std::end(kCaseKeys), key) != std::end(kCaseKeys),
            "unknown scenario key: " + key);
  }
  CaseConfig c;
  if (j.contains("plant")) c.plant = j["plant"].get<std::string>();
  if (j.contains("feedforward")) c.feedforward = j["feedforward"].get<bool>();
  if (j.contains("controller")) c.controller = j["controller"].get<std::string>();
  if (j.contains("test")) c.test = j["test"].get<std::string>();
  if (j.contains("N")) c.N = j["N"].get<int>();
  if (j.contains("Hp")) c.Hp = j["Hp"].get<int>();
  if (j.contains("Hc")) c.Hc = j["Hc"].get<int>();
  auto vec = [&](const char* key, std::optional<VectorXd>& dst, double missing) {
    if (j.contains(key)) dst = json_bounds(j[key], missing);
  };
  vec("Mwt", c.Mwt, 0.0);
  vec("Nwt", c.Nwt, 0.0);
  vec("Lwt", c.Lwt, 0.0);
  vec("umin", c.umin, -kInfinity);
  vec("umax", c.umax, kInfinity);
  vec("dumin", c.dumin, -kInfinity);
  vec("dumax", c.dumax, kInfinity);
  vec("ymin", c.ymin, -kInfinity);
  vec("ymax", c.ymax, kInfinity);
  vec("y_noise", c.y_noise, 0.0);
  auto scalar = [&](const char* key, std::optional<double>& dst) {
    if (!j.contains(key)) return;
    const auto& e = j[key];
    dst = e.is_string() || e.is_null() ? json_bounds(nlohmann::json::array({e}), kInfinity)[0] : e.get<double>();
  };
  scalar("Cwt", c.Cwt);
  scalar("Ewt", c.Ewt);
  scalar("friction_scale", c.friction_scale);
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  return c;
}

nlohmann::json case_to_json(const CaseConfig& c) {
  nlohmann::json j;
  j["plant"] = c.plant;
  if (c.plant == "cstr") j["feedforward"] = c.feedforward;
  j["controller"] = c.controller;
  if (c.plant == "pendulum") j["test"] = c.test;
  if (c.N) j["N"] = *c.N;
  if (c.Hp) j["Hp"] = *c.Hp;
  if (c.Hc) j["Hc"] = *c.Hc;
  auto vec = [&](const char* key, const std::optional<VectorXd>& v) {
    if (v) j[key] = bounds_json(*v);
  };
  vec("Mwt", c.Mwt);
  vec("Nwt", c.Nwt);
  vec("Lwt", c.Lwt);
  vec("umin", c.umin);
  vec("umax", c.umax);
  vec("dumin", c.dumin);
  vec("dumax", c.dumax);
  vec("ymin", c.ymin);
  vec("ymax", c.ymax);
  vec("y_noise", c.y_noise);
  auto scalar = [&](const char* key, const std::optional<double>& v) {
    if (v) j[key] = std::isfinite(*v) ? nlohmann::json(*v) : nlohmann::json(*v > 0 ? "inf" : "-inf");
  };
  scalar("Cwt", c.Cwt);
  scalar("Ewt", c.Ewt);
  scalar("friction_scale", c.friction_scale);
  j["seed"] = c.seed;
  return j;
}

namespace {

MpcTuning tuning_from(const CaseConfig& c, MpcTuning t) {
  if (c.Hp) t.Hp = *c.Hp;
  if (c.Hc) t.Hc = *c.Hc;
  if (c.Mwt) t.Mwt = *c.Mwt;
  if (c.Nwt) t.Nwt = *c.Nwt;
  if (c.Lwt) t.Lwt = *c.Lwt;
  if (c.Cwt) t.Cwt = *c.Cwt;
  if (c.Ewt) t.Ewt = *c.Ewt;
  return t;
}

ConstraintSpec constraints_from(const CaseConfig& c, ConstraintSpec s) {
  if (c.umin) s.umin = *c.umin;
  if (c.umax) s.umax = *c.umax;
  if (c.dumin) s.dumin = *c.dumin;
  if (c.dumax) s.dumax = *c.dumax;
  if (c.ymin) s.ymin = *c.ymin;
  if (c.ymax) s.ymax = *c.ymax;
  return s;
}

Scenario cstr_scenario(const CaseConfig& c) {
  require(c.controller == "mpc" || c.controller == "explicit", "cstr controller must be mpc or explicit");
  auto plant = std::make_shared<LinearModel>(cases::cstr_model(false));
  const LinearModel model = c.feedforward ? cases::cstr_model(true) : *plant;
  MpcTuning t;
  t.Hp = 10;
  t.Hc = 2;
  t = tuning_from(c, t);
  require(!c.Ewt || *c.Ewt == 0.0, "Ewt applies to the pendulum economic controller only");
  ConstraintSpec spec;
  if (c.controller == "mpc") spec.ymin = VectorXd{{45.0, -kInfinity}};
  spec = constraints_from(c, spec);

  Scenario s;
  s.name = c.label();
  s.plant = plant;
  const bool is_explicit = c.controller == "explicit";
  // integrators dominate the process noise so the load is absorbed within a few samples
  EstimatorConfig ecfg;
  ecfg.sigma_Q = VectorXd::Constant(model.nx(), 1.0 / model.nx());
  ecfg.sigma_R = VectorXd::Ones(model.ny());
  ecfg.sigma_Qint_ym = VectorXd::Ones(model.ny());
  s.controller = [model, ecfg, t, spec, is_explicit]() -> std::unique_ptr<PredictiveController> {
    auto est = std::make_unique<SteadyKalmanFilter>(model, ecfg);
    std::unique_ptr<PredictiveController> mpc;
    if (is_explicit) {
      mpc = std::make_unique<ExplicitMPC>(std::move(est), t);
    } else {
      mpc = std::make_unique<LinMPC>(std::move(est), t);
    }
    mpc->set_constraints(spec);
    return mpc;
  };
  s.N = c.N.value_or(75);
  s.ry = VectorXd{{50.0, 30.0}};
  s.u_load = VectorXd::Zero(2);
  if (25 < s.N) s.ry_changes.push_back({25, VectorXd{{48.0, 35.0}}});
  if (50 < s.N) s.u_load_changes.push_back({50, VectorXd{{0.0, -10.0}}});
  if (c.feedforward) {
    s.d = VectorXd{{20.0}};
    if (50 < s.N) s.d_changes.push_back({50, VectorXd{{10.0}}});
  }
  if (c.y_noise) s.y_noise = *c.y_noise;
  s.seed = c.seed;
  return s;
}

EstimatorConfig pendulum_estimator_config(bool speed_output) {
  EstimatorConfig e;
  e.sigma_Q = VectorXd{{0.1, 1.0}};
  e.sigma_R = VectorXd{{5.0}};
  e.nint_u = {1};
  e.sigma_Qint_u = VectorXd{{0.1}};
  if (speed_output) e.i_ym = {0};
  return e;
}

Scenario pendulum_scenario(const CaseConfig& c) {
  const std::string& ctl = c.controller;
  require(ctl == "nmpc" || ctl == "empc" || ctl == "slmpc" || ctl == "estimator",
          "pendulum controller must be nmpc, empc, slmpc or estimator");
  require(c.test == "track" || c.test == "regulate", "pendulum test must be track or regulate");
  require(!c.feedforward, "feedforward applies to the cstr only");
  const double Ts = 0.1;
  const bool empc = ctl == "empc";
  const double fs = c.friction_scale.value_or(1.25);
  auto model = std::make_shared<NonlinearModel>(cases::pendulum_model(Ts, 1.0, empc));
  auto plant = std::make_shared<NonlinearModel>(cases::pendulum_model(Ts, fs, empc));
  const EstimatorConfig ecfg = pendulum_estimator_config(empc);

  Scenario s;
  s.name = c.label();
  s.plant = plant;
  s.N = c.N.value_or(35);
  s.seed = c.seed;
  if (c.y_noise) s.y_noise = *c.y_noise;

  if (ctl == "estimator") {
    s.estimator = [model, ecfg] { return std::make_unique<UnscentedKalmanFilter>(*model, ecfg); };
    s.u_est = VectorXd{{0.5}};
    if (!c.y_noise) s.y_noise = VectorXd{{0.5}};
    return s;
  }

  MpcTuning t;
  t.Hp = 20;
  t.Hc = 2;
  t.Mwt = empc ? VectorXd{{0.5, 0.0}} : VectorXd{{0.5}};
  t.Nwt = VectorXd{{2.5}};
  t.Cwt = kInfinity;
  if (empc) t.Ewt = 3.5e3;
  t = tuning_from(c, t);
  require(empc || t.Ewt == 0.0, "Ewt applies to the economic controller only");
  ConstraintSpec spec;
  spec.umin = VectorXd{{-1.5}};
  spec.umax = VectorXd{{1.5}};
  spec = constraints_from(c, spec);

  const bool track = c.test == "track";
  s.x0 = track ? VectorXd{{0.0, 0.0}} : VectorXd{{std::numbers::pi, 0.0}};
  const VectorXd xhat0 = track ? VectorXd{{0.0, 0.0, 0.0}} : VectorXd{{std::numbers::pi, 0.0, 0.0}};
  s.ry = empc ? VectorXd{{180.0, 0.0}} : VectorXd{{180.0}};
  if (!track) s.y_step = empc ? VectorXd{{10.0, 0.0}} : VectorXd{{10.0}};

  if (ctl == "slmpc") {
    // first linearization at the initial estimate: hanging for tracking, upright for regulation
    s.controller = [model, ecfg, t, spec, xhat0]() -> std::unique_ptr<PredictiveController> {
      const LinearModel lin = linearize(*model, xhat0.head(2), VectorXd::Zero(1));
      auto mpc = std::make_unique<LinMPC>(std::make_unique<KalmanFilter>(lin, ecfg), t);
      mpc->set_constraints(spec);
      return mpc;
    };
    s.initialize = [model, xhat0](PredictiveController& mpc, const VectorXd& ym, const VectorXd&) {
      mpc.estimator().set_state(xhat0);
      mpc.init(VectorXd::Zero(1), ym);
      const VectorXd x = physical_xhat(mpc.estimator()).head(2);
      mpc.set_model(linearize(*model, x, VectorXd::Zero(1)));
    };
    s.after_move = [model](PredictiveController& mpc, const VectorXd& u) {
      const VectorXd x = physical_xhat(mpc.estimator()).head(2);
      mpc.set_model(linearize(*model, x, u));
    };
    return s;
  }

  s.xhat0 = xhat0;
  EconomicFunction JE;
  std::vector<double> p;
  if (empc) {
    JE = make_economic_function([](auto UE, auto YE, auto, auto par) {
      using T = std::remove_const_t<typename decltype(UE)::element_type>;
      return horizon_work<T>(UE, YE, par[0]);
    });
    p = {Ts};
  }
  s.controller = [model, ecfg, t, spec, JE, p]() -> std::unique_ptr<PredictiveController> {
    auto mpc = std::make_unique<NonLinMPC>(std::make_unique<UnscentedKalmanFilter>(*model, ecfg), t, JE, p);
    mpc->set_constraints(spec);
    return mpc;
  };
  return s;
}

}  // namespace

Scenario build_scenario(const CaseConfig& c) {
  if (c.plant == "cstr") return cstr_scenario(c);
  if (c.plant == "pendulum") return pendulum_scenario(c);
  throw std::invalid_argument("unknown plant: " + c.plant + " (expected cstr or pendulum)");
}

}  // namespace mpctk::sim
