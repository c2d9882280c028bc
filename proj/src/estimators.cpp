#include "mpctk/estimators.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "mpctk/linalg.hpp"
#include "mpctk/optim.hpp"

namespace mpctk {

// ----------------------------------------------------------- AugmentedModel

AugmentedModel::AugmentedModel(const SimModel& base, std::vector<int> i_ym, std::vector<int> nint_u,
                               std::vector<int> nint_ym)
    : base_(base.clone()), i_ym_(std::move(i_ym)), nint_u_(std::move(nint_u)), nint_ym_(std::move(nint_ym)) {
  const int ny = base_->ny();
  const int nu = base_->nu();
  if (nint_u_.empty()) nint_u_.assign(static_cast<std::size_t>(nu), 0);
  if (nint_ym_.empty()) nint_ym_.assign(i_ym_.size(), 0);
  require(static_cast<int>(nint_u_.size()) == nu, "nint_u must have one entry per input");
  require(nint_ym_.size() == i_ym_.size(), "nint_ym must have one entry per measured output");
  for (std::size_t a = 0; a < i_ym_.size(); ++a) {
    require(i_ym_[a] >= 0 && i_ym_[a] < ny, "i_ym: output index out of range");
    for (std::size_t b = a + 1; b < i_ym_.size(); ++b) require(i_ym_[a] != i_ym_[b], "i_ym: duplicate index");
  }
  for (int n : nint_u_) require(n >= 0, "nint_u must be non-negative");
  for (int n : nint_ym_) require(n >= 0, "nint_ym must be non-negative");
  build();
}

AugmentedModel::AugmentedModel(const AugmentedModel& o)
    : base_(o.base_->clone()),
      i_ym_(o.i_ym_),
      nint_u_(o.nint_u_),
      nint_ym_(o.nint_ym_),
      nsu_(o.nsu_),
      nsy_(o.nsy_),
      nxhat_(o.nxhat_),
      head_u_(o.head_u_),
      head_y_(o.head_y_),
      linear_(o.linear_),
      linear_valid_(o.linear_valid_) {}

AugmentedModel& AugmentedModel::operator=(const AugmentedModel& o) {
  if (this != &o) {
    AugmentedModel tmp(o);
    std::swap(base_, tmp.base_);
    i_ym_ = o.i_ym_;
    nint_u_ = o.nint_u_;
    nint_ym_ = o.nint_ym_;
    nsu_ = o.nsu_;
    nsy_ = o.nsy_;
    nxhat_ = o.nxhat_;
    head_u_ = o.head_u_;
    head_y_ = o.head_y_;
    linear_ = o.linear_;
    linear_valid_ = o.linear_valid_;
  }
  return *this;
}

void AugmentedModel::build() {
  nsu_ = 0;
  nsy_ = 0;
  for (int n : nint_u_) nsu_ += n;
  for (int n : nint_ym_) nsy_ += n;
  nxhat_ = base_->nx() + nsu_ + nsy_;
  head_u_.assign(nint_u_.size(), -1);
  head_y_.assign(nint_ym_.size(), -1);
  int idx = base_->nx();
  for (std::size_t i = 0; i < nint_u_.size(); ++i) {
    if (nint_u_[i] > 0) head_u_[i] = idx;
    idx += nint_u_[i];
  }
  for (std::size_t j = 0; j < nint_ym_.size(); ++j) {
    if (nint_ym_[j] > 0) head_y_[j] = idx;
    idx += nint_ym_[j];
  }
  linear_valid_ = false;
  if (base_->is_linear()) {
    linear_ = linearize(VectorXd::Zero(nxhat_), VectorXd::Zero(nu()), VectorXd::Zero(nd()));
    linear_valid_ = true;
  }
}

void AugmentedModel::set_base(const SimModel& base) {
  require(base.nx() == base_->nx() && base.nu() == base_->nu() && base.ny() == base_->ny() &&
              base.nd() == base_->nd(),
          "set_model: model dimensions must not change");
  base_ = base.clone();
  build();
}

template <class T>
void AugmentedModel::f(std::span<T> xnext, std::span<const T> xh, std::span<const T> u0,
                       std::span<const T> d0) const {
  const int nx = base_->nx();
  if (nsu_ == 0) {
    base_->f(xnext.subspan(0, static_cast<std::size_t>(nx)), xh.subspan(0, static_cast<std::size_t>(nx)), u0, d0);
  } else {
    std::vector<T> ue(u0.begin(), u0.end());
    for (std::size_t i = 0; i < head_u_.size(); ++i) {
      if (head_u_[i] >= 0) ue[i] = ue[i] + xh[static_cast<std::size_t>(head_u_[i])];
    }
    base_->f(xnext.subspan(0, static_cast<std::size_t>(nx)), xh.subspan(0, static_cast<std::size_t>(nx)),
             std::span<const T>(ue.data(), ue.size()), d0);
  }
  // integrator chains: s_j+ = s_j + s_{j+1}, the tail is a random walk
  auto chain = [&](int start, int len) {
    for (int j = 0; j < len; ++j) {
      const auto a = static_cast<std::size_t>(start + j);
      xnext[a] = j + 1 < len ? xh[a] + xh[a + 1] : xh[a];
    }
  };
  int idx = nx;
  for (int n : nint_u_) {
    chain(idx, n);
    idx += n;
  }
  for (int n : nint_ym_) {
    chain(idx, n);
    idx += n;
  }
}

template <class T>
void AugmentedModel::h(std::span<T> y0, std::span<const T> xh, std::span<const T> d0) const {
  base_->h(y0, xh.subspan(0, static_cast<std::size_t>(base_->nx())), d0);
  for (std::size_t j = 0; j < head_y_.size(); ++j) {
    if (head_y_[j] >= 0) {
      const auto row = static_cast<std::size_t>(i_ym_[j]);
      y0[row] = y0[row] + xh[static_cast<std::size_t>(head_y_[j])];
    }
  }
}

template void AugmentedModel::f<double>(std::span<double>, std::span<const double>, std::span<const double>,
                                        std::span<const double>) const;
template void AugmentedModel::f<Dual8>(std::span<Dual8>, std::span<const Dual8>, std::span<const Dual8>,
                                       std::span<const Dual8>) const;
template void AugmentedModel::h<double>(std::span<double>, std::span<const double>, std::span<const double>) const;
template void AugmentedModel::h<Dual8>(std::span<Dual8>, std::span<const Dual8>, std::span<const Dual8>) const;

VectorXd AugmentedModel::f(const VectorXd& xh, const VectorXd& u0, const VectorXd& d0) const {
  VectorXd out(nxhat_);
  f<double>(as_span(out), as_span(xh), as_span(u0), as_span(d0));
  return out;
}

VectorXd AugmentedModel::h(const VectorXd& xh, const VectorXd& d0) const {
  VectorXd out(ny());
  h<double>(as_span(out), as_span(xh), as_span(d0));
  return out;
}

VectorXd AugmentedModel::h_measured(const VectorXd& xh, const VectorXd& d0) const {
  const VectorXd y = h(xh, d0);
  VectorXd out(nym());
  for (int j = 0; j < nym(); ++j) out[j] = y[i_ym_[static_cast<std::size_t>(j)]];
  return out;
}

MatrixXd AugmentedModel::measured_rows(const MatrixXd& M) const {
  MatrixXd out(nym(), M.cols());
  for (int j = 0; j < nym(); ++j) out.row(j) = M.row(i_ym_[static_cast<std::size_t>(j)]);
  return out;
}

const AugmentedModel::Linear& AugmentedModel::linear() const {
  if (!linear_valid_) throw std::logic_error("augmented model: exact matrices need a linear plant model");
  return linear_;
}

AugmentedModel::Linear AugmentedModel::linearize(const VectorXd& xh, const VectorXd& u0, const VectorXd& d0) const {
  const int n = nxhat_, nu_ = nu(), nd_ = nd(), ny_ = ny();
  VectorXd z(n + nu_ + nd_);
  z << xh, u0, d0;
  VectorXd fv;
  const MatrixXd Jf = ad::jacobian(
      [&](std::span<const Dual8> in, std::span<Dual8> o) {
        f<Dual8>(o, in.subspan(0, static_cast<std::size_t>(n)),
                 in.subspan(static_cast<std::size_t>(n), static_cast<std::size_t>(nu_)),
                 in.subspan(static_cast<std::size_t>(n + nu_), static_cast<std::size_t>(nd_)));
      },
      z, n, &fv);
  VectorXd zh(n + nd_);
  zh << xh, d0;
  VectorXd hv;
  const MatrixXd Jh = ad::jacobian(
      [&](std::span<const Dual8> in, std::span<Dual8> o) {
        h<Dual8>(o, in.subspan(0, static_cast<std::size_t>(n)),
                 in.subspan(static_cast<std::size_t>(n), static_cast<std::size_t>(nd_)));
      },
      zh, ny_, &hv);
  Linear L;
  L.A = Jf.leftCols(n);
  L.Bu = Jf.middleCols(n, nu_);
  L.Bd = Jf.rightCols(nd_);
  L.C = Jh.leftCols(n);
  L.Dd = Jh.rightCols(nd_);
  L.fop = fv - L.A * xh - L.Bu * u0 - L.Bd * d0;
  L.hop = hv - L.C * xh - L.Dd * d0;
  return L;
}

bool AugmentedModel::observable() const {
  const Linear L = linear_valid_ ? linear_
                                 : linearize([&] {
                                     VectorXd x = VectorXd::Zero(nxhat_);
                                     x.head(base_->nx()) = base_->state();
                                     return x;
                                   }(),
                                             VectorXd::Zero(nu()), VectorXd::Zero(nd()));
  return is_observable(L.A, measured_rows(L.C));
}

// -------------------------------------------------------------- kind names

std::string to_string(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::SteadyKalmanFilter:
      return "SteadyKalmanFilter";
    case EstimatorKind::KalmanFilter:
      return "KalmanFilter";
    case EstimatorKind::Luenberger:
      return "Luenberger";
    case EstimatorKind::UnscentedKalmanFilter:
      return "UnscentedKalmanFilter";
    case EstimatorKind::ExtendedKalmanFilter:
      return "ExtendedKalmanFilter";
    case EstimatorKind::MovingHorizonEstimator:
      return "MovingHorizonEstimator";
    case EstimatorKind::InternalModel:
      return "InternalModel";
  }
  return "unknown";
}

EstimatorKind estimator_kind_from_string(const std::string& s) {
  std::string t;
  for (char c : s) t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (t == "steadykalmanfilter" || t == "skf") return EstimatorKind::SteadyKalmanFilter;
  if (t == "kalmanfilter" || t == "kf") return EstimatorKind::KalmanFilter;
  if (t == "luenberger") return EstimatorKind::Luenberger;
  if (t == "unscentedkalmanfilter" || t == "ukf") return EstimatorKind::UnscentedKalmanFilter;
  if (t == "extendedkalmanfilter" || t == "ekf") return EstimatorKind::ExtendedKalmanFilter;
  if (t == "movinghorizonestimator" || t == "mhe") return EstimatorKind::MovingHorizonEstimator;
  if (t == "internalmodel" || t == "im") return EstimatorKind::InternalModel;
  throw std::invalid_argument("unknown estimator kind: " + s);
}

// ----------------------------------------------------------- StateEstimator

namespace {

std::vector<int> resolve_i_ym(const SimModel& model, const EstimatorConfig& cfg) {
  if (!cfg.i_ym.empty()) return cfg.i_ym;
  std::vector<int> all(static_cast<std::size_t>(model.ny()));
  for (int i = 0; i < model.ny(); ++i) all[static_cast<std::size_t>(i)] = i;
  return all;
}

AugmentedModel make_augmented(const SimModel& model, const EstimatorConfig& cfg, bool allow_integrators,
                              std::vector<std::string>& diag) {
  const std::vector<int> i_ym = resolve_i_ym(model, cfg);
  std::vector<int> nint_u = cfg.nint_u;
  std::vector<int> nint_ym = cfg.nint_ym;
  if (!allow_integrators) {
    for (int n : nint_u) require(n == 0, "this estimator does not accept integrating states");
    for (int n : nint_ym) require(n == 0, "this estimator does not accept integrating states");
    return AugmentedModel(model, i_ym, {}, {});
  }
  const bool input_integrators = std::any_of(nint_u.begin(), nint_u.end(), [](int n) { return n > 0; });
  if (nint_ym.empty() && cfg.default_nint_ym && !input_integrators) {
    // one integrator per measured output, kept only while observability holds
    nint_ym.assign(i_ym.size(), 0);
    for (std::size_t j = 0; j < i_ym.size(); ++j) {
      nint_ym[j] = 1;
      if (!AugmentedModel(model, i_ym, nint_u, nint_ym).observable()) {
        nint_ym[j] = 0;
        diag.push_back("no integrator added on measured output " + std::to_string(i_ym[j] + 1) +
                       ": it would make the augmented model unobservable");
      }
    }
    return AugmentedModel(model, i_ym, nint_u, nint_ym);
  }
  AugmentedModel aug(model, i_ym, nint_u, nint_ym);
  if (aug.nint_u_total() + aug.nint_ym_total() > 0 && !aug.observable()) {
    diag.push_back("requested integrating states make the augmented model unobservable; augmentation removed");
    return AugmentedModel(model, i_ym, {}, {});
  }
  return aug;
}

VectorXd sigma_or_default(const VectorXd& v, int n, double def, const char* what) {
  if (v.size() == 0) return VectorXd::Constant(n, def);
  require(v.size() == n, std::string(what) + ": expected " + std::to_string(n) + " entries");
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    require(std::isfinite(v[i]) && v[i] >= 0.0, std::string(what) + " entries must be finite and >= 0");
  }
  return v;
}

nlohmann::json vec_json(const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

nlohmann::json mat_json(const MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> r(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) r[static_cast<std::size_t>(j)] = m(i, j);
    rows.push_back(r);
  }
  return rows;
}

VectorXd json_vec(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

MatrixXd json_mat(const nlohmann::json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const Eigen::Index cols = rows ? static_cast<Eigen::Index>(j[0].size()) : 0;
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto r = j[static_cast<std::size_t>(i)].get<std::vector<double>>();
    require(static_cast<Eigen::Index>(r.size()) == cols, "snapshot: ragged matrix");
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = r[static_cast<std::size_t>(c)];
  }
  return m;
}

/// Kalman correction shared by the covariance-based filters (Joseph form).
void kalman_correct(VectorXd& x, MatrixXd& P, const MatrixXd& C, const MatrixXd& R, const VectorXd& innovation,
                    MatrixXd* gain_out) {
  const MatrixXd S = symmetrize(C * P * C.transpose() + R);
  Eigen::LDLT<MatrixXd> ldlt(S);
  if (ldlt.info() != Eigen::Success) throw NumericalError("Kalman correction: singular innovation covariance");
  const MatrixXd K = ldlt.solve(C * P).transpose();
  x += K * innovation;
  const MatrixXd IKC = MatrixXd::Identity(P.rows(), P.cols()) - K * C;
  P = symmetrize(IKC * P * IKC.transpose() + K * R * K.transpose());
  if (gain_out != nullptr) *gain_out = K;
}

}  // namespace

StateEstimator::StateEstimator(const SimModel& model, const EstimatorConfig& cfg, bool allow_integrators)
    : diagnostics_(),
      aug_(make_augmented(model, cfg, allow_integrators, diagnostics_)),
      form_(cfg.form) {
  const VectorXd sq = sigma_or_default(cfg.sigma_Q, aug_.nx(), 0.1, "sigma_Q");
  const VectorXd squ = sigma_or_default(cfg.sigma_Qint_u, aug_.nint_u_total(), 0.1, "sigma_Qint_u");
  const VectorXd sqy = sigma_or_default(cfg.sigma_Qint_ym, aug_.nint_ym_total(), 0.1, "sigma_Qint_ym");
  const VectorXd sr = sigma_or_default(cfg.sigma_R, aug_.nym(), 1.0, "sigma_R");
  for (Eigen::Index i = 0; i < sr.size(); ++i) require(sr[i] > 0.0, "sigma_R entries must be positive");
  VectorXd qdiag(aug_.nxhat());
  qdiag << sq, squ, sqy;
  Q_ = qdiag.array().square().matrix().asDiagonal();
  R_ = sr.array().square().matrix().asDiagonal();
  if (cfg.P0.size() == 0) {
    P_ = Q_;
  } else {
    require(cfg.P0.rows() == aug_.nxhat() && cfg.P0.cols() == aug_.nxhat(), "P0 must be nx̂ x nx̂");
    require(min_symmetric_eigenvalue(cfg.P0) >= -1e-12, "P0 must be positive semidefinite");
    P_ = symmetrize(cfg.P0);
  }
  xhat_ = xhat0_from_model();
}

VectorXd StateEstimator::xhat0_from_model() const {
  VectorXd x = VectorXd::Zero(aug_.nxhat());
  x.head(aug_.nx()) = aug_.base().state();
  return x;
}

VectorXd StateEstimator::deviation_d(const VectorXd& d) const {
  const int nd = aug_.nd();
  if (d.size() == 0) return VectorXd::Zero(nd);
  require_size(d, nd, "d");
  require(d.allFinite(), "measured disturbance must be finite");
  return d - aug_.base().dop();
}

VectorXd StateEstimator::deviation_ym(const VectorXd& ym) const {
  require_size(ym, aug_.nym(), "y_m");
  require(ym.allFinite(), "measurement must be finite");
  VectorXd out(aug_.nym());
  for (int j = 0; j < aug_.nym(); ++j) {
    out[j] = ym[j] - aug_.base().yop()[aug_.i_ym()[static_cast<std::size_t>(j)]];
  }
  return out;
}

const VectorXd& StateEstimator::prepare(const VectorXd& ym, const VectorXd& d) {
  if (prepared_) throw std::logic_error("prepare called twice in the same period");
  const VectorXd ym0 = deviation_ym(ym);
  const VectorXd d0 = deviation_d(d);
  if (form_ == EstimatorForm::Current) correct(ym0, d0);
  prepared_ = true;
  return xhat_;
}

const VectorXd& StateEstimator::update(const VectorXd& u, const VectorXd& ym, const VectorXd& d) {
  if (!prepared_) throw std::logic_error("update called before prepare in this period");
  require_size(u, aug_.nu(), "u");
  require(u.allFinite(), "input must be finite");
  const VectorXd u0 = u - aug_.base().uop();
  const VectorXd d0 = deviation_d(d);
  if (form_ == EstimatorForm::Current) {
    predict(u0, d0);
  } else {
    predictor_update(u0, deviation_ym(ym), d0);
  }
  if (P_.size() > 0) P_ = symmetrize(P_);
  prepared_ = false;
  ++k_;
  return xhat_;
}

void StateEstimator::predictor_update(const VectorXd& u0, const VectorXd& ym0, const VectorXd& d0) {
  correct(ym0, d0);
  predict(u0, d0);
}

const VectorXd& StateEstimator::init(const VectorXd& u, const VectorXd& ym, const VectorXd& d) {
  require_size(u, aug_.nu(), "u");
  const VectorXd u0 = u - aug_.base().uop();
  const VectorXd ym0 = deviation_ym(ym);
  const VectorXd d0 = deviation_d(d);
  const int n = aug_.nxhat();
  if (aug_.base().is_linear()) {
    const auto& L = aug_.linear();
    MatrixXd M(n + aug_.nym(), n);
    VectorXd rhs(n + aug_.nym());
    M.topRows(n) = MatrixXd::Identity(n, n) - L.A;
    rhs.head(n) = L.Bu * u0 + L.Bd * d0 + L.fop;
    M.bottomRows(aug_.nym()) = aug_.measured_rows(L.C);
    rhs.tail(aug_.nym()) = ym0 - aug_.measured_rows(L.Dd) * d0 - aug_.measured_rows(L.hop);
    Eigen::CompleteOrthogonalDecomposition<MatrixXd> cod(M);
    xhat_ = cod.solve(rhs);
    const double resid = (M * xhat_ - rhs).lpNorm<Eigen::Infinity>();
    if (resid > 1e-8 * std::max(1.0, rhs.lpNorm<Eigen::Infinity>())) {
      diagnostics_.push_back("init: no exact steady state, least-squares estimate used (residual " +
                             std::to_string(resid) + ")");
    }
  } else {
    xhat_ = xhat0_from_model();
    const VectorXd err = ym0 - aug_.h_measured(xhat_, d0);
    int idx = aug_.nx() + aug_.nint_u_total();
    for (int j = 0; j < aug_.nym(); ++j) {
      const int cnt = aug_.nint_ym()[static_cast<std::size_t>(j)];
      if (cnt > 0) xhat_[idx] = err[j];
      idx += cnt;
    }
  }
  prepared_ = false;
  on_state_reset();
  return xhat_;
}

void StateEstimator::set_state(const VectorXd& xhat) {
  require_size(xhat, aug_.nxhat(), "x̂");
  require(xhat.allFinite(), "x̂ must be finite");
  xhat_ = xhat;
  on_state_reset();
}

void StateEstimator::set_covariance(const MatrixXd& P) {
  require(P.rows() == aug_.nxhat() && P.cols() == aug_.nxhat(), "P must be nx̂ x nx̂");
  P_ = symmetrize(P);
  on_state_reset();
}

VectorXd StateEstimator::output(const VectorXd& d) const {
  return aug_.h(xhat_, deviation_d(d)) + aug_.base().yop() + output_bias();
}

void StateEstimator::set_model(const SimModel& model) {
  if (!supports_model_update()) {
    throw std::logic_error(to_string(kind()) + " does not support model updates");
  }
  const VectorXd old_offset = aug_.base().state_offset();
  aug_.set_base(model);
  xhat_.head(aug_.nx()) += old_offset - aug_.base().state_offset();
}

std::string StateEstimator::summary() const {
  std::ostringstream os;
  os << to_string(kind()) << " estimator with a sample time Ts = " << aug_.base().Ts() << " s, "
     << aug_.base().kind_name() << " and:\n";
  os << " " << aug_.nu() << " manipulated inputs u (" << aug_.nint_u_total() << " integrating states)\n";
  os << " " << aug_.nxhat() << " estimated states x̂\n";
  os << " " << aug_.nym() << " measured outputs ym (" << aug_.nint_ym_total() << " integrating states)\n";
  os << " " << aug_.ny() - aug_.nym() << " unmeasured outputs yu\n";
  os << " " << aug_.nd() << " measured disturbances d\n";
  for (const auto& d : diagnostics_) os << " note: " << d << "\n";
  return os.str();
}

nlohmann::json StateEstimator::snapshot() const {
  nlohmann::json j;
  j["kind"] = to_string(kind());
  j["xhat"] = vec_json(xhat_);
  j["P"] = mat_json(P_);
  j["prepared"] = prepared_;
  j["k"] = k_;
  return j;
}

void StateEstimator::restore(const nlohmann::json& j) {
  require(j.at("kind").get<std::string>() == to_string(kind()), "snapshot: estimator kind mismatch");
  const VectorXd x = json_vec(j.at("xhat"));
  require_size(x, aug_.nxhat(), "snapshot x̂");
  const MatrixXd P = json_mat(j.at("P"));
  require(P.rows() == P_.rows() && P.cols() == P_.cols(), "snapshot: covariance size mismatch");
  xhat_ = x;
  P_ = P;
  prepared_ = j.at("prepared").get<bool>();
  k_ = j.at("k").get<long>();
}

// ---------------------------------------------------------- Kalman variants

SteadyKalmanFilter::SteadyKalmanFilter(const SimModel& model, const EstimatorConfig& cfg)
    : StateEstimator(model, cfg, true) {
  require(model.is_linear(), "SteadyKalmanFilter needs a linear model");
  const auto& L = aug_.linear();
  const DareSolution s = solve_dare(L.A, aug_.measured_rows(L.C), Q_, R_);
  K_ = s.K;
  P_ = s.P;
}

void SteadyKalmanFilter::correct(const VectorXd& ym0, const VectorXd& d0) {
  xhat_ += K_ * (ym0 - aug_.h_measured(xhat_, d0));
}

void SteadyKalmanFilter::predict(const VectorXd& u0, const VectorXd& d0) { xhat_ = aug_.f(xhat_, u0, d0); }

KalmanFilter::KalmanFilter(const SimModel& model, const EstimatorConfig& cfg) : StateEstimator(model, cfg, true) {
  require(model.is_linear(), "KalmanFilter needs a linear model (use the extended or unscented filter)");
}

void KalmanFilter::correct(const VectorXd& ym0, const VectorXd& d0) {
  const auto& L = aug_.linear();
  kalman_correct(xhat_, P_, aug_.measured_rows(L.C), R_, ym0 - aug_.h_measured(xhat_, d0), &K_);
}

void KalmanFilter::predict(const VectorXd& u0, const VectorXd& d0) {
  const auto& L = aug_.linear();
  xhat_ = L.A * xhat_ + L.Bu * u0 + L.Bd * d0 + L.fop;
  P_ = symmetrize(L.A * P_ * L.A.transpose() + Q_);
}

Luenberger::Luenberger(const SimModel& model, const EstimatorConfig& cfg) : StateEstimator(model, cfg, true) {
  require(model.is_linear(), "Luenberger observer needs a linear model");
  const int n = aug_.nxhat();
  poles_ = cfg.poles;
  if (poles_.empty()) {
    for (int i = 0; i < n; ++i) poles_.emplace_back(0.8 - 0.01 * i, 0.0);
  }
  require(static_cast<int>(poles_.size()) == n, "Luenberger: need one pole per estimated state");
  for (const auto& p : poles_) require(std::abs(p) < 1.0, "Luenberger: poles must lie inside the unit circle");
  const auto& L = aug_.linear();
  const MatrixXd Cm = aug_.measured_rows(L.C);
  if (form_ == EstimatorForm::Current) {
    K_ = place_poles(L.A, Cm * L.A, poles_);
  } else {
    L_ = place_poles(L.A, Cm, poles_);
  }
}

void Luenberger::correct(const VectorXd& ym0, const VectorXd& d0) {
  xhat_ += K_ * (ym0 - aug_.h_measured(xhat_, d0));
}

void Luenberger::predict(const VectorXd& u0, const VectorXd& d0) { xhat_ = aug_.f(xhat_, u0, d0); }

void Luenberger::predictor_update(const VectorXd& u0, const VectorXd& ym0, const VectorXd& d0) {
  const VectorXd innovation = ym0 - aug_.h_measured(xhat_, d0);
  xhat_ = aug_.f(xhat_, u0, d0) + L_ * innovation;
}

// ------------------------------------------------------------ unscented

UnscentedResult unscented_transform(const VectorXd& mean, const MatrixXd& cov,
                                    const std::function<VectorXd(const VectorXd&)>& fn, double alpha, double beta,
                                    double kappa) {
  const auto n = static_cast<int>(mean.size());
  require(cov.rows() == n && cov.cols() == n, "unscented transform: covariance size mismatch");
  require(alpha > 0.0, "unscented transform: alpha must be positive");
  const double lambda = alpha * alpha * (n + kappa) - n;
  const double c = n + lambda;
  require(c > 0.0, "unscented transform: n + lambda must be positive");

  MatrixXd S = symmetrize(cov) * c;
  Eigen::LLT<MatrixXd> llt(S);
  if (llt.info() != Eigen::Success) {
    const double jitter = 1e-12 * std::max(1.0, S.diagonal().cwiseAbs().maxCoeff());
    llt.compute(S + jitter * MatrixXd::Identity(n, n));
    if (llt.info() != Eigen::Success) throw NumericalError("unscented transform: covariance is not PSD");
  }
  const MatrixXd Lc = llt.matrixL();

  UnscentedResult r;
  r.sigma_in.resize(n, 2 * n + 1);
  r.sigma_in.col(0) = mean;
  for (int i = 0; i < n; ++i) {
    r.sigma_in.col(1 + i) = mean + Lc.col(i);
    r.sigma_in.col(1 + n + i) = mean - Lc.col(i);
  }
  r.wm = VectorXd::Constant(2 * n + 1, 0.5 / c);
  r.wc = r.wm;
  r.wm[0] = lambda / c;
  r.wc[0] = lambda / c + 1.0 - alpha * alpha + beta;

  const VectorXd y0 = fn(r.sigma_in.col(0));
  r.sigma_out.resize(y0.size(), 2 * n + 1);
  r.sigma_out.col(0) = y0;
  for (int i = 1; i <= 2 * n; ++i) r.sigma_out.col(i) = fn(r.sigma_in.col(i));

  // mean = Y0 + sum w_i (Y_i - Y0), which avoids the large cancelling weights
  VectorXd shift = VectorXd::Zero(y0.size());
  for (int i = 1; i <= 2 * n; ++i) shift += r.wm[i] * (r.sigma_out.col(i) - y0);
  r.mean = y0 + shift;
  r.cov = r.wc[0] * shift * shift.transpose();
  for (int i = 1; i <= 2 * n; ++i) {
    const VectorXd dev = (r.sigma_out.col(i) - y0) - shift;
    r.cov += r.wc[i] * dev * dev.transpose();
  }
  r.cov = symmetrize(r.cov);
  return r;
}

UnscentedKalmanFilter::UnscentedKalmanFilter(const SimModel& model, const EstimatorConfig& cfg)
    : StateEstimator(model, cfg, true), alpha_(cfg.alpha), beta_(cfg.beta), kappa_(cfg.kappa) {}

void UnscentedKalmanFilter::correct(const VectorXd& ym0, const VectorXd& d0) {
  const UnscentedResult ut = unscented_transform(
      xhat_, P_, [&](const VectorXd& x) { return aug_.h_measured(x, d0); }, alpha_, beta_, kappa_);
  const MatrixXd Pyy = symmetrize(ut.cov + R_);
  MatrixXd Pxy = MatrixXd::Zero(xhat_.size(), ut.mean.size());
  for (Eigen::Index i = 0; i < ut.sigma_in.cols(); ++i) {
    Pxy += ut.wc[i] * (ut.sigma_in.col(i) - xhat_) * (ut.sigma_out.col(i) - ut.mean).transpose();
  }
  Eigen::LDLT<MatrixXd> ldlt(Pyy);
  if (ldlt.info() != Eigen::Success) throw NumericalError("UKF: singular innovation covariance");
  const MatrixXd K = ldlt.solve(Pxy.transpose()).transpose();
  xhat_ += K * (ym0 - ut.mean);
  P_ = symmetrize(P_ - K * Pyy * K.transpose());
}

void UnscentedKalmanFilter::predict(const VectorXd& u0, const VectorXd& d0) {
  const UnscentedResult ut = unscented_transform(
      xhat_, P_, [&](const VectorXd& x) { return aug_.f(x, u0, d0); }, alpha_, beta_, kappa_);
  xhat_ = ut.mean;
  P_ = symmetrize(ut.cov + Q_);
}

ExtendedKalmanFilter::ExtendedKalmanFilter(const SimModel& model, const EstimatorConfig& cfg)
    : StateEstimator(model, cfg, true) {}

void ExtendedKalmanFilter::correct(const VectorXd& ym0, const VectorXd& d0) {
  const auto L = aug_.linearize(xhat_, VectorXd::Zero(aug_.nu()), d0);
  kalman_correct(xhat_, P_, aug_.measured_rows(L.C), R_, ym0 - aug_.h_measured(xhat_, d0), nullptr);
}

void ExtendedKalmanFilter::predict(const VectorXd& u0, const VectorXd& d0) {
  const auto L = aug_.linearize(xhat_, u0, d0);
  xhat_ = aug_.f(xhat_, u0, d0);
  P_ = symmetrize(L.A * P_ * L.A.transpose() + Q_);
}

// ------------------------------------------------------- moving horizon

namespace {

VectorXd bound_or(const VectorXd& v, Eigen::Index n, double def, const char* what) {
  if (v.size() == 0) return VectorXd::Constant(n, def);
  require(v.size() == n, std::string("MHE bound ") + what + " has wrong length");
  return v;
}

}  // namespace

MovingHorizonEstimator::MovingHorizonEstimator(const SimModel& model, const EstimatorConfig& cfg)
    : StateEstimator(model, cfg, true), He_(cfg.He), Cwt_(cfg.Cwt) {
  require(He_ >= 1, "MovingHorizonEstimator: estimation horizon He must be >= 1");
  require(Cwt_ >= 0.0, "MovingHorizonEstimator: Cwt must be >= 0");
  require(min_symmetric_eigenvalue(Q_) > 0.0, "MovingHorizonEstimator: Q̂ must be positive definite");
  set_bounds(cfg.bounds);
  on_state_reset();
}

void MovingHorizonEstimator::set_bounds(const MheBounds& b) {
  const int n = aug_.nxhat();
  const int nym = aug_.nym();
  MheBounds o;
  o.xhat_min = bound_or(b.xhat_min, n, -kInfinity, "xhat_min");
  o.xhat_max = bound_or(b.xhat_max, n, kInfinity, "xhat_max");
  o.w_min = bound_or(b.w_min, n, -kInfinity, "w_min");
  o.w_max = bound_or(b.w_max, n, kInfinity, "w_max");
  o.v_min = bound_or(b.v_min, nym, -kInfinity, "v_min");
  o.v_max = bound_or(b.v_max, nym, kInfinity, "v_max");
  o.c_xhat_min = bound_or(b.c_xhat_min, n, 0.0, "c_xhat_min");
  o.c_xhat_max = bound_or(b.c_xhat_max, n, 0.0, "c_xhat_max");
  o.c_w_min = bound_or(b.c_w_min, n, 0.0, "c_w_min");
  o.c_w_max = bound_or(b.c_w_max, n, 0.0, "c_w_max");
  o.c_v_min = bound_or(b.c_v_min, nym, 0.0, "c_v_min");
  o.c_v_max = bound_or(b.c_v_max, nym, 0.0, "c_v_max");
  for (const VectorXd* c : {&o.c_xhat_min, &o.c_xhat_max, &o.c_w_min, &o.c_w_max, &o.c_v_min, &o.c_v_max}) {
    require((c->array() >= 0.0).all(), "MHE softness parameters must be >= 0");
  }
  require((o.xhat_min.array() <= o.xhat_max.array()).all() && (o.w_min.array() <= o.w_max.array()).all() &&
              (o.v_min.array() <= o.v_max.array()).all(),
          "MHE bounds: min must not exceed max");
  bounds_ = o;
}

bool MovingHorizonEstimator::has_slack() const {
  if (!std::isfinite(Cwt_)) return false;
  auto soft = [](const VectorXd& bound, const VectorXd& c) {
    for (Eigen::Index i = 0; i < bound.size(); ++i) {
      if (std::isfinite(bound[i]) && c[i] > 0.0) return true;
    }
    return false;
  };
  const auto& b = bounds_;
  return soft(b.xhat_min, b.c_xhat_min) || soft(b.xhat_max, b.c_xhat_max) || soft(b.w_min, b.c_w_min) ||
         soft(b.w_max, b.c_w_max) || soft(b.v_min, b.c_v_min) || soft(b.v_max, b.c_v_max);
}

void MovingHorizonEstimator::on_state_reset() {
  hist_.clear();
  x0_prior_ = xhat_;
  P0_prior_ = P_;
}

void MovingHorizonEstimator::correct(const VectorXd& ym0, const VectorXd& d0) {
  hist_.push_back(Entry{ym0, d0, VectorXd(), VectorXd(), MatrixXd()});
  while (static_cast<int>(hist_.size()) > He_ + 1) hist_.pop_front();
  const int size = static_cast<int>(hist_.size());
  const int Nk = std::min(size, He_);
  const int ws = size - Nk;

  VectorXd xbar;
  MatrixXd Pbar;
  if (ws == 0) {
    xbar = x0_prior_;
    Pbar = P0_prior_;
  } else {
    const Entry& e = hist_[static_cast<std::size_t>(ws - 1)];
    const auto L = aug_.linearize(e.xfilt, e.u0, e.d0);
    xbar = aug_.f(e.xfilt, e.u0, e.d0);
    Pbar = symmetrize(L.A * e.Pfilt * L.A.transpose() + Q_);
  }

  // covariance chain: EKF-style correction about the prior
  const VectorXd prior = xhat_;
  {
    const auto L = aug_.base().is_linear() ? aug_.linear() : aug_.linearize(prior, VectorXd::Zero(aug_.nu()), d0);
    VectorXd dummy = prior;
    kalman_correct(dummy, P_, aug_.measured_rows(L.C), R_, VectorXd::Zero(aug_.nym()), nullptr);
  }

  sol_ = MheSolution{};
  sol_.Nk = Nk;
  if (aug_.base().is_linear()) {
    solve_linear(xbar, Pbar);
  } else {
    solve_nonlinear(xbar, Pbar);
  }
  if (!sol_.optimal) {
    xhat_ = prior;
    diagnostics_.push_back("MHE solve not optimal at period " + std::to_string(k_) + "; prior estimate kept");
    if (diagnostics_.size() > 50) diagnostics_.erase(diagnostics_.begin());
  }
  hist_.back().xfilt = xhat_;
  hist_.back().Pfilt = P_;
}

void MovingHorizonEstimator::predict(const VectorXd& u0, const VectorXd& d0) {
  if (!hist_.empty()) hist_.back().u0 = u0;
  const auto L = aug_.base().is_linear() ? aug_.linear() : aug_.linearize(xhat_, u0, d0);
  xhat_ = aug_.f(xhat_, u0, d0);
  P_ = symmetrize(L.A * P_ * L.A.transpose() + Q_);
}

void MovingHorizonEstimator::solve_linear(const VectorXd& xbar, const MatrixXd& Pbar) {
  const auto& L = aug_.linear();
  const int n = aug_.nxhat();
  const int nym = aug_.nym();
  const int Nk = sol_.Nk;
  const int ws = static_cast<int>(hist_.size()) - Nk;
  const bool slack = has_slack();
  const int nz = n * Nk + (slack ? 1 : 0);
  const int ie = n * Nk;  // slack column
  const MatrixXd Cm = aug_.measured_rows(L.C);
  const MatrixXd Dm = aug_.measured_rows(L.Dd);
  const VectorXd hm = aug_.measured_rows(L.hop);

  const MatrixXd Pinv = Pbar.ldlt().solve(MatrixXd::Identity(n, n));
  const MatrixXd Qinv = Q_.ldlt().solve(MatrixXd::Identity(n, n));
  const MatrixXd Rinv = R_.ldlt().solve(MatrixXd::Identity(nym, nym));

  // x_j = M_j z + c_j
  std::vector<MatrixXd> M(static_cast<std::size_t>(Nk));
  std::vector<VectorXd> c(static_cast<std::size_t>(Nk));
  M[0] = MatrixXd::Zero(n, nz);
  M[0].leftCols(n).setIdentity();
  c[0] = VectorXd::Zero(n);
  for (int j = 1; j < Nk; ++j) {
    const Entry& e = hist_[static_cast<std::size_t>(ws + j - 1)];
    M[static_cast<std::size_t>(j)] = L.A * M[static_cast<std::size_t>(j - 1)];
    M[static_cast<std::size_t>(j)].middleCols(n * j, n) += MatrixXd::Identity(n, n);
    c[static_cast<std::size_t>(j)] = L.A * c[static_cast<std::size_t>(j - 1)] + L.Bu * e.u0 + L.Bd * e.d0 + L.fop;
  }

  QpProblem qp;
  qp.H = MatrixXd::Zero(nz, nz);
  qp.q = VectorXd::Zero(nz);
  qp.H.topLeftCorner(n, n) += 2.0 * Pinv;
  qp.q.head(n) -= 2.0 * Pinv * xbar;
  for (int j = 1; j < Nk; ++j) qp.H.block(n * j, n * j, n, n) += 2.0 * Qinv;
  std::vector<VectorXd> r(static_cast<std::size_t>(Nk));
  for (int j = 0; j < Nk; ++j) {
    const Entry& e = hist_[static_cast<std::size_t>(ws + j)];
    const MatrixXd CM = Cm * M[static_cast<std::size_t>(j)];
    r[static_cast<std::size_t>(j)] = e.ym0 - Cm * c[static_cast<std::size_t>(j)] - Dm * e.d0 - hm;
    qp.H += 2.0 * CM.transpose() * Rinv * CM;
    qp.q -= 2.0 * CM.transpose() * Rinv * r[static_cast<std::size_t>(j)];
  }
  if (slack) qp.H(ie, ie) += 2.0 * Cwt_;
  qp.H = symmetrize(qp.H);

  std::vector<VectorXd> rows;
  std::vector<double> rhs;
  auto add_row = [&](VectorXd a, double b, double soft) {
    if (!std::isfinite(b)) return;
    if (slack && soft > 0.0) a[ie] = -soft;
    rows.push_back(std::move(a));
    rhs.push_back(b);
  };
  const auto& B = bounds_;
  for (int j = 0; j < Nk; ++j) {
    const MatrixXd& Mj = M[static_cast<std::size_t>(j)];
    const VectorXd& cj = c[static_cast<std::size_t>(j)];
    for (int i = 0; i < n; ++i) {
      add_row(Mj.row(i).transpose(), B.xhat_max[i] - cj[i], B.c_xhat_max[i]);
      add_row(-Mj.row(i).transpose(), cj[i] - B.xhat_min[i], B.c_xhat_min[i]);
    }
    const MatrixXd CM = Cm * Mj;
    const VectorXd& rj = r[static_cast<std::size_t>(j)];
    for (int i = 0; i < nym; ++i) {
      // v = r - CM z
      add_row(-CM.row(i).transpose(), B.v_max[i] - rj[i], B.c_v_max[i]);
      add_row(CM.row(i).transpose(), rj[i] - B.v_min[i], B.c_v_min[i]);
    }
  }
  for (int j = 1; j < Nk; ++j) {
    for (int i = 0; i < n; ++i) {
      VectorXd a = VectorXd::Zero(nz);
      a[n * j + i] = 1.0;
      add_row(a, B.w_max[i], B.c_w_max[i]);
      add_row(-a, -B.w_min[i], B.c_w_min[i]);
    }
  }
  if (slack) {
    VectorXd a = VectorXd::Zero(nz);
    a[ie] = -1.0;
    rows.push_back(a);
    rhs.push_back(0.0);
  }
  qp.A.resize(static_cast<Eigen::Index>(rows.size()), nz);
  qp.b.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    qp.A.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    qp.b[static_cast<Eigen::Index>(i)] = rhs[i];
  }

  const QpSolution s = solve_qp(qp);
  sol_.optimal = s.status == QpStatus::Optimal;
  if (!sol_.optimal) return;
  const VectorXd& z = s.z;
  sol_.xhat.resize(n, Nk);
  sol_.v.resize(nym, Nk);
  sol_.w.resize(n, std::max(0, Nk - 1));
  for (int j = 0; j < Nk; ++j) {
    sol_.xhat.col(j) = M[static_cast<std::size_t>(j)] * z + c[static_cast<std::size_t>(j)];
    sol_.v.col(j) = r[static_cast<std::size_t>(j)] - Cm * M[static_cast<std::size_t>(j)] * z;
    if (j > 0) sol_.w.col(j - 1) = z.segment(n * j, n);
  }
  sol_.epsilon = slack ? z[ie] : 0.0;
  sol_.objective = s.objective + xbar.dot(Pinv * xbar);
  for (int j = 0; j < Nk; ++j) sol_.objective += r[static_cast<std::size_t>(j)].dot(Rinv * r[static_cast<std::size_t>(j)]);
  xhat_ = sol_.xhat.col(Nk - 1);
}

void MovingHorizonEstimator::solve_nonlinear(const VectorXd& xbar, const MatrixXd& Pbar) {
  const int n = aug_.nxhat();
  const int nym = aug_.nym();
  const int nu = aug_.nu();
  const int nd = aug_.nd();
  const int Nk = sol_.Nk;
  const int ws = static_cast<int>(hist_.size()) - Nk;
  const bool slack = has_slack();
  const int nz = n * Nk + (slack ? 1 : 0);
  const int ie = n * Nk;

  const MatrixXd Pinv = symmetrize(Pbar.ldlt().solve(MatrixXd::Identity(n, n)));
  const MatrixXd Qinv = Q_.ldlt().solve(MatrixXd::Identity(n, n));
  const MatrixXd Rinv = R_.ldlt().solve(MatrixXd::Identity(nym, nym));
  std::vector<Entry> win(hist_.begin() + ws, hist_.end());
  const AugmentedModel* aug = &aug_;
  const double C = Cwt_;

  // rolls the window forward and hands states and sensor residuals to `visit`
  auto simulate = [aug, win, n, nym, nu, nd, Nk](auto z, auto&& visit) {
    using T = std::decay_t<decltype(z[0])>;
    std::vector<T> x(z.begin(), z.begin() + n), xn(static_cast<std::size_t>(n)), y(static_cast<std::size_t>(aug->ny()));
    std::vector<T> u(static_cast<std::size_t>(nu)), d(static_cast<std::size_t>(nd));
    for (int j = 0; j < Nk; ++j) {
      const Entry& e = win[static_cast<std::size_t>(j)];
      for (int i = 0; i < nd; ++i) d[static_cast<std::size_t>(i)] = T(e.d0[i]);
      aug->h<T>(std::span<T>(y), std::span<const T>(x), std::span<const T>(d));
      visit(j, x, y);
      if (j + 1 == Nk) break;
      for (int i = 0; i < nu; ++i) u[static_cast<std::size_t>(i)] = T(e.u0[i]);
      aug->f<T>(std::span<T>(xn), std::span<const T>(x), std::span<const T>(u), std::span<const T>(d));
      for (int i = 0; i < n; ++i) {
        x[static_cast<std::size_t>(i)] = xn[static_cast<std::size_t>(i)] + z[static_cast<std::size_t>(n * (j + 1) + i)];
      }
    }
  };
  const std::vector<int> i_ym = aug_.i_ym();

  NlpProblem nlp;
  nlp.n = nz;
  nlp.set_objective([=](auto z) {
    using T = std::decay_t<decltype(z[0])>;
    T J = T(0.0);
    for (int a = 0; a < n; ++a) {
      for (int b = 0; b < n; ++b) J = J + Pinv(a, b) * (z[a] - xbar[a]) * (z[b] - xbar[b]);
    }
    for (int j = 1; j < Nk; ++j) {
      for (int a = 0; a < n; ++a) {
        for (int b = 0; b < n; ++b) J = J + Qinv(a, b) * z[n * j + a] * z[n * j + b];
      }
    }
    simulate(z, [&](int j, const std::vector<T>&, const std::vector<T>& y) {
      const Entry& e = win[static_cast<std::size_t>(j)];
      for (int a = 0; a < nym; ++a) {
        const T va = e.ym0[a] - y[static_cast<std::size_t>(i_ym[static_cast<std::size_t>(a)])];
        for (int b = 0; b < nym; ++b) {
          const T vb = e.ym0[b] - y[static_cast<std::size_t>(i_ym[static_cast<std::size_t>(b)])];
          J = J + Rinv(a, b) * va * vb;
        }
      }
    });
    if (slack) J = J + C * z[ie] * z[ie];
    return J;
  });

  // bound rows g(z) <= 0
  struct Row {
    int kind;  // 0 state, 1 sensor
    int j, i;
    double sign, bound, soft;
  };
  std::vector<Row> grows;
  const auto& B = bounds_;
  for (int j = 0; j < Nk; ++j) {
    for (int i = 0; i < n; ++i) {
      if (std::isfinite(B.xhat_max[i])) grows.push_back({0, j, i, 1.0, B.xhat_max[i], B.c_xhat_max[i]});
      if (std::isfinite(B.xhat_min[i])) grows.push_back({0, j, i, -1.0, B.xhat_min[i], B.c_xhat_min[i]});
    }
    for (int i = 0; i < nym; ++i) {
      if (std::isfinite(B.v_max[i])) grows.push_back({1, j, i, 1.0, B.v_max[i], B.c_v_max[i]});
      if (std::isfinite(B.v_min[i])) grows.push_back({1, j, i, -1.0, B.v_min[i], B.c_v_min[i]});
    }
  }
  if (!grows.empty()) {
    nlp.set_constraints(static_cast<int>(grows.size()), [=](auto z, auto g) {
      using T = std::decay_t<decltype(z[0])>;
      simulate(z, [&](int j, const std::vector<T>& x, const std::vector<T>& y) {
        for (std::size_t r = 0; r < grows.size(); ++r) {
          const Row& row = grows[r];
          if (row.j != j) continue;
          T val = row.kind == 0
                      ? x[static_cast<std::size_t>(row.i)]
                      : T(win[static_cast<std::size_t>(j)].ym0[row.i]) -
                            y[static_cast<std::size_t>(i_ym[static_cast<std::size_t>(row.i)])];
          T gi = row.sign * (val - row.bound);
          if (slack && row.soft > 0.0) gi = gi - row.soft * z[ie];
          g[r] = gi;
        }
      });
    });
  }
  std::vector<VectorXd> arows;
  std::vector<double> brhs;
  for (int j = 1; j < Nk; ++j) {
    for (int i = 0; i < n; ++i) {
      auto add = [&](double sign, double bound, double soft) {
        if (!std::isfinite(bound)) return;
        VectorXd a = VectorXd::Zero(nz);
        a[n * j + i] = sign;
        if (slack && soft > 0.0) a[ie] = -soft;
        arows.push_back(a);
        brhs.push_back(sign * bound);
      };
      add(1.0, B.w_max[i], B.c_w_max[i]);
      add(-1.0, B.w_min[i], B.c_w_min[i]);
    }
  }
  if (!arows.empty()) {
    nlp.A.resize(static_cast<Eigen::Index>(arows.size()), nz);
    nlp.b.resize(static_cast<Eigen::Index>(arows.size()));
    for (std::size_t i = 0; i < arows.size(); ++i) {
      nlp.A.row(static_cast<Eigen::Index>(i)) = arows[i].transpose();
      nlp.b[static_cast<Eigen::Index>(i)] = brhs[i];
    }
  }
  if (slack) {
    nlp.lower = VectorXd::Constant(nz, -kInfinity);
    nlp.lower[ie] = 0.0;
  }
  nlp.z0 = VectorXd::Zero(nz);
  nlp.z0.head(n) = xbar;

  const NlpResult res = solve_nlp(nlp);
  sol_.optimal = res.status == NlpStatus::Optimal ||
                 (res.status == NlpStatus::MaxIterations && res.max_violation <= 1e-6);
  if (!sol_.optimal) return;
  sol_.xhat.resize(n, Nk);
  sol_.v.resize(nym, Nk);
  sol_.w.resize(n, std::max(0, Nk - 1));
  simulate(std::span<const double>(res.z.data(), static_cast<std::size_t>(res.z.size())),
           [&](int j, const std::vector<double>& x, const std::vector<double>& y) {
             for (int i = 0; i < n; ++i) sol_.xhat(i, j) = x[static_cast<std::size_t>(i)];
             for (int i = 0; i < nym; ++i) {
               sol_.v(i, j) = win[static_cast<std::size_t>(j)].ym0[i] -
                              y[static_cast<std::size_t>(i_ym[static_cast<std::size_t>(i)])];
             }
           });
  for (int j = 1; j < Nk; ++j) sol_.w.col(j - 1) = res.z.segment(n * j, n);
  sol_.epsilon = slack ? res.z[ie] : 0.0;
  sol_.objective = res.objective;
  xhat_ = sol_.xhat.col(Nk - 1);
}

nlohmann::json MovingHorizonEstimator::snapshot() const {
  nlohmann::json j = StateEstimator::snapshot();
  nlohmann::json h = nlohmann::json::array();
  for (const auto& e : hist_) {
    h.push_back({{"ym0", vec_json(e.ym0)},
                 {"d0", vec_json(e.d0)},
                 {"u0", vec_json(e.u0)},
                 {"xfilt", vec_json(e.xfilt)},
                 {"Pfilt", mat_json(e.Pfilt)}});
  }
  j["window"] = h;
  j["x0_prior"] = vec_json(x0_prior_);
  j["P0_prior"] = mat_json(P0_prior_);
  return j;
}

void MovingHorizonEstimator::restore(const nlohmann::json& j) {
  StateEstimator::restore(j);
  hist_.clear();
  for (const auto& e : j.at("window")) {
    hist_.push_back(Entry{json_vec(e.at("ym0")), json_vec(e.at("d0")), json_vec(e.at("u0")),
                          json_vec(e.at("xfilt")), json_mat(e.at("Pfilt"))});
  }
  x0_prior_ = json_vec(j.at("x0_prior"));
  P0_prior_ = json_mat(j.at("P0_prior"));
}

// ---------------------------------------------------------- internal model

InternalModel::InternalModel(const SimModel& model, const EstimatorConfig& cfg)
    : StateEstimator(model, cfg, false), ys_(VectorXd::Zero(aug_.nym())) {
  const auto L = model.is_linear() ? aug_.linear() : aug_.linearize(xhat_, VectorXd::Zero(aug_.nu()),
                                                                    VectorXd::Zero(aug_.nd()));
  if (spectral_radius(L.A) >= 1.0) {
    throw std::invalid_argument("InternalModel needs an asymptotically stable plant model");
  }
}

VectorXd InternalModel::output_bias() const {
  VectorXd b = VectorXd::Zero(aug_.ny());
  for (int j = 0; j < aug_.nym(); ++j) b[aug_.i_ym()[static_cast<std::size_t>(j)]] = ys_[j];
  return b;
}

void InternalModel::correct(const VectorXd& ym0, const VectorXd& d0) { ys_ = ym0 - aug_.h_measured(xhat_, d0); }

void InternalModel::predict(const VectorXd& u0, const VectorXd& d0) { xhat_ = aug_.f(xhat_, u0, d0); }

const VectorXd& InternalModel::init(const VectorXd& u, const VectorXd& ym, const VectorXd& d) {
  require_size(u, aug_.nu(), "u");
  const VectorXd u0 = u - aug_.base().uop();
  const VectorXd ym0 = deviation_ym(ym);
  const VectorXd d0 = deviation_d(d);
  if (aug_.base().is_linear()) {
    const auto& L = aug_.linear();
    const int n = aug_.nxhat();
    xhat_ = (MatrixXd::Identity(n, n) - L.A).partialPivLu().solve(L.Bu * u0 + L.Bd * d0 + L.fop);
  } else {
    xhat_ = xhat0_from_model();
  }
  ys_ = ym0 - aug_.h_measured(xhat_, d0);
  prepared_ = false;
  return xhat_;
}

nlohmann::json InternalModel::snapshot() const {
  nlohmann::json j = StateEstimator::snapshot();
  j["ys"] = vec_json(ys_);
  return j;
}

void InternalModel::restore(const nlohmann::json& j) {
  StateEstimator::restore(j);
  ys_ = json_vec(j.at("ys"));
}

VectorXd internal_model_predict(const InternalModel& estim, const VectorXd& u, int Hp, const VectorXd& d) {
  const AugmentedModel& aug = estim.model();
  require(Hp >= 1, "Hp must be >= 1");
  require_size(u, aug.nu(), "u");
  const VectorXd u0 = u - aug.base().uop();
  const VectorXd d0 = d.size() == 0 ? VectorXd::Zero(aug.nd()) : VectorXd(d - aug.base().dop());
  const VectorXd bias = estim.output_bias() + aug.base().yop();
  VectorXd out(aug.ny() * Hp);
  VectorXd x = estim.xhat();
  for (int j = 0; j < Hp; ++j) {
    x = aug.f(x, u0, d0);
    out.segment(j * aug.ny(), aug.ny()) = aug.h(x, d0) + bias;
  }
  return out;
}

// ---------------------------------------------------------------- factory

std::unique_ptr<StateEstimator> build_estimator(EstimatorKind kind, const SimModel& model,
                                                const EstimatorConfig& cfg) {
  switch (kind) {
    case EstimatorKind::SteadyKalmanFilter:
      return std::make_unique<SteadyKalmanFilter>(model, cfg);
    case EstimatorKind::KalmanFilter:
      return std::make_unique<KalmanFilter>(model, cfg);
    case EstimatorKind::Luenberger:
      return std::make_unique<Luenberger>(model, cfg);
    case EstimatorKind::UnscentedKalmanFilter:
      return std::make_unique<UnscentedKalmanFilter>(model, cfg);
    case EstimatorKind::ExtendedKalmanFilter:
      return std::make_unique<ExtendedKalmanFilter>(model, cfg);
    case EstimatorKind::MovingHorizonEstimator:
      return std::make_unique<MovingHorizonEstimator>(model, cfg);
    case EstimatorKind::InternalModel:
      return std::make_unique<InternalModel>(model, cfg);
  }
  throw std::invalid_argument("unknown estimator kind");
}

}  // namespace mpctk
