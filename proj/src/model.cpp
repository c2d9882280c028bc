#include "mpctk/model.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <map>
#include <sstream>

#include "mpctk/linalg.hpp"

namespace mpctk {

namespace {

std::vector<std::string> default_labels(const char* prefix, int n) {
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(std::string(prefix) + std::to_string(i + 1));
  return out;
}

template <class T>
std::span<const T> cspan(const std::vector<T>& v) {
  return {v.data(), v.size()};
}

}  // namespace

// ---------------------------------------------------------------- SimModel

SimModel::SimModel(int nu, int nx, int ny, int nd, double Ts)
    : nu_(nu),
      nx_(nx),
      ny_(ny),
      nd_(nd),
      Ts_(Ts),
      uop_(VectorXd::Zero(nu)),
      yop_(VectorXd::Zero(ny)),
      dop_(VectorXd::Zero(nd)),
      x_(VectorXd::Zero(nx)),
      scratch_(VectorXd::Zero(nx)) {
  require(nu >= 0 && ny >= 0 && nd >= 0, "model dimensions must be non-negative");
  require(nx > 0, "models without states are not supported (nx must be > 0)");
  require(Ts > 0.0 && std::isfinite(Ts), "sample time Ts must be positive");
  names_.u = default_labels("u", nu);
  names_.x = default_labels("x", nx);
  names_.y = default_labels("y", ny);
  names_.d = default_labels("d", nd);
}

SimModel& SimModel::set_operating_point(const VectorXd& uop, const VectorXd& yop, const VectorXd& dop) {
  require_size(uop, nu_, "uop");
  require_size(yop, ny_, "yop");
  if (dop.size() != 0 || nd_ != 0) require_size(dop, nd_, "dop");
  require(uop.allFinite() && yop.allFinite() && dop.allFinite(), "operating points must be finite");
  uop_ = uop;
  yop_ = yop;
  dop_ = dop.size() == 0 ? VectorXd::Zero(nd_) : dop;
  return *this;
}

SimModel& SimModel::set_names(const ModelNames& names) {
  auto check = [](const std::vector<std::string>& v, int n, const char* what) {
    if (!v.empty()) require(static_cast<int>(v.size()) == n, std::string("label count mismatch for ") + what);
  };
  check(names.u, nu_, "u");
  check(names.x, nx_, "x");
  check(names.y, ny_, "y");
  check(names.d, nd_, "d");
  if (!names.u.empty()) names_.u = names.u;
  if (!names.x.empty()) names_.x = names.x;
  if (!names.y.empty()) names_.y = names.y;
  if (!names.d.empty()) names_.d = names.d;
  return *this;
}

void SimModel::set_state(const VectorXd& x) {
  require_size(x, nx_, "state");
  x_ = x;
}

const VectorXd& SimModel::step(const VectorXd& u, const VectorXd& d) {
  require_size(u, nu_, "u");
  if (d.size() != 0) require_size(d, nd_, "d");
  const VectorXd u0 = u - uop_;
  const VectorXd d0 = d.size() == 0 ? VectorXd::Zero(nd_) : VectorXd(d - dop_);
  f(as_span(scratch_), as_span(x_), as_span(u0), as_span(d0));
  if (!scratch_.allFinite()) throw NumericalError("integration failure: non-finite state after step");
  x_.swap(scratch_);
  return x_;
}

VectorXd SimModel::output(const VectorXd& d) const {
  VectorXd y(ny_);
  if (d.size() != 0) require_size(d, nd_, "d");
  const VectorXd dd = d.size() == 0 ? dop_ : d;
  evaluate_output(as_span(y), as_span(dd));
  return y;
}

void SimModel::evaluate_output(std::span<double> y, std::span<const double> d) const {
  require(static_cast<int>(y.size()) == ny_ && static_cast<int>(d.size()) == nd_, "output buffer size mismatch");
  VectorXd d0(nd_);
  for (int i = 0; i < nd_; ++i) d0[i] = d[i] - dop_[i];
  h(y, as_span(x_), as_span(d0));
  for (int i = 0; i < ny_; ++i) y[i] += yop_[i];
}

std::string SimModel::summary() const {
  std::ostringstream os;
  os << kind_name() << " with a sample time Ts = " << Ts_ << " s and:\n"
     << " " << nu_ << " manipulated inputs u\n"
     << " " << nx_ << " states x\n"
     << " " << ny_ << " outputs y\n"
     << " " << nd_ << " measured disturbances d\n";
  return os.str();
}

// ------------------------------------------------------------- LinearModel

LinearModel::LinearModel(MatrixXd A, MatrixXd Bu, MatrixXd C, MatrixXd Bd, MatrixXd Dd, double Ts)
    : SimModel(static_cast<int>(Bu.cols()), static_cast<int>(A.rows()), static_cast<int>(C.rows()),
               static_cast<int>(std::max(Bd.cols(), Dd.cols())), Ts),
      A_(std::move(A)),
      Bu_(std::move(Bu)),
      Bd_(std::move(Bd)),
      C_(std::move(C)),
      Dd_(std::move(Dd)),
      xop_(VectorXd::Zero(nx_)),
      fop_(VectorXd::Zero(nx_)) {
  if (Bd_.size() == 0) Bd_ = MatrixXd::Zero(nx_, nd_);
  if (Dd_.size() == 0) Dd_ = MatrixXd::Zero(ny_, nd_);
  validate();
}

LinearModel::LinearModel(MatrixXd A, MatrixXd Bu, MatrixXd C, double Ts)
    : LinearModel(std::move(A), std::move(Bu), std::move(C), MatrixXd(), MatrixXd(), Ts) {}

void LinearModel::validate() const {
  require(A_.rows() == A_.cols(), "A must be square");
  require(Bu_.rows() == nx_, "Bu must have nx rows");
  require(C_.cols() == nx_, "C must have nx columns");
  require(Bd_.rows() == nx_ && Bd_.cols() == nd_, "Bd must be nx x nd");
  require(Dd_.rows() == ny_ && Dd_.cols() == nd_, "Dd must be ny x nd");
  require(A_.allFinite() && Bu_.allFinite() && C_.allFinite() && Bd_.allFinite() && Dd_.allFinite(),
          "state-space matrices must be finite");
}

void LinearModel::set_matrices(const MatrixXd& A, const MatrixXd& Bu, const MatrixXd& C, const MatrixXd& Bd,
                               const MatrixXd& Dd) {
  require(A.rows() == A_.rows() && A.cols() == A_.cols() && Bu.rows() == Bu_.rows() && Bu.cols() == Bu_.cols() &&
              C.rows() == C_.rows() && C.cols() == C_.cols() && Bd.rows() == Bd_.rows() &&
              Bd.cols() == Bd_.cols() && Dd.rows() == Dd_.rows() && Dd.cols() == Dd_.cols(),
          "set_matrices: dimensions cannot change");
  A_ = A;
  Bu_ = Bu;
  C_ = C;
  Bd_ = Bd;
  Dd_ = Dd;
  validate();
}

void LinearModel::set_state_operating_point(const VectorXd& xop, const VectorXd& fop) {
  require_size(xop, nx_, "xop");
  require_size(fop, nx_, "fop");
  xop_ = xop;
  fop_ = fop;
}

template <class T>
void LinearModel::f_impl(std::span<T> xnext, std::span<const T> x, std::span<const T> u0,
                         std::span<const T> d0) const {
  for (int i = 0; i < nx_; ++i) {
    T acc = T(fop_[i] - xop_[i]);
    for (int j = 0; j < nx_; ++j) {
      if (A_(i, j) != 0.0) acc += A_(i, j) * x[j];
    }
    for (int j = 0; j < nu_; ++j) {
      if (Bu_(i, j) != 0.0) acc += Bu_(i, j) * u0[j];
    }
    for (int j = 0; j < nd_; ++j) {
      if (Bd_(i, j) != 0.0) acc += Bd_(i, j) * d0[j];
    }
    xnext[i] = acc;
  }
}

template <class T>
void LinearModel::h_impl(std::span<T> y0, std::span<const T> x, std::span<const T> d0) const {
  for (int i = 0; i < ny_; ++i) {
    T acc = T(0.0);
    for (int j = 0; j < nx_; ++j) {
      if (C_(i, j) != 0.0) acc += C_(i, j) * x[j];
    }
    for (int j = 0; j < nd_; ++j) {
      if (Dd_(i, j) != 0.0) acc += Dd_(i, j) * d0[j];
    }
    y0[i] = acc;
  }
}

void LinearModel::f(std::span<double> xnext, std::span<const double> x, std::span<const double> u0,
                    std::span<const double> d0) const {
  Eigen::Map<VectorXd> xn(xnext.data(), nx_);
  xn = A_ * Eigen::Map<const VectorXd>(x.data(), nx_) + Bu_ * Eigen::Map<const VectorXd>(u0.data(), nu_) +
       fop_ - xop_;
  if (nd_ > 0) xn += Bd_ * Eigen::Map<const VectorXd>(d0.data(), nd_);
}
void LinearModel::f(std::span<Dual8> xnext, std::span<const Dual8> x, std::span<const Dual8> u0,
                    std::span<const Dual8> d0) const {
  f_impl<Dual8>(xnext, x, u0, d0);
}
void LinearModel::h(std::span<double> y0, std::span<const double> x, std::span<const double> d0) const {
  Eigen::Map<VectorXd> y(y0.data(), ny_);
  y = C_ * Eigen::Map<const VectorXd>(x.data(), nx_);
  if (nd_ > 0) y += Dd_ * Eigen::Map<const VectorXd>(d0.data(), nd_);
}
void LinearModel::h(std::span<Dual8> y0, std::span<const Dual8> x, std::span<const Dual8> d0) const {
  h_impl<Dual8>(y0, x, d0);
}

MatrixXd LinearModel::dc_gain_u() const {
  const MatrixXd I = MatrixXd::Identity(nx_, nx_);
  return C_ * (I - A_).fullPivLu().solve(Bu_);
}

MatrixXd LinearModel::dc_gain_d() const {
  const MatrixXd I = MatrixXd::Identity(nx_, nx_);
  return C_ * (I - A_).fullPivLu().solve(Bd_) + Dd_;
}

// ---------------------------------------------------------- NonlinearModel

NonlinearModel::NonlinearModel(StateFunction f, OutputFunction h, double Ts, int nu, int nx, int ny, int nd,
                               std::vector<double> p, IntegratorConfig solver)
    : SimModel(nu, nx, ny, nd, Ts), f_(std::move(f)), h_(std::move(h)), p_(std::move(p)), solver_(solver) {
  require(f_.real && f_.dual && h_.real && h_.dual, "state and output functions must be set");
  require(solver_.supersample >= 1, "supersample must be >= 1");
}

template <class T>
void NonlinearModel::derivative(std::span<T> xdot, std::span<const T> x, std::span<const T> u,
                                std::span<const T> d) const {
  if constexpr (std::is_same_v<T, double>) {
    f_.real(xdot, x, u, d, cspan(p_));
  } else {
    f_.dual(xdot, x, u, d, cspan(p_));
  }
}

template void NonlinearModel::derivative<double>(std::span<double>, std::span<const double>,
                                                 std::span<const double>, std::span<const double>) const;
template void NonlinearModel::derivative<Dual8>(std::span<Dual8>, std::span<const Dual8>, std::span<const Dual8>,
                                                std::span<const Dual8>) const;

template <class T>
void NonlinearModel::step_impl(std::span<T> xnext, std::span<const T> x, std::span<const T> u0,
                               std::span<const T> d0) const {
  const auto n = static_cast<std::size_t>(nx_);
  std::vector<T> u(static_cast<std::size_t>(nu_)), d(static_cast<std::size_t>(nd_));
  for (int i = 0; i < nu_; ++i) u[i] = u0[i] + uop_[i];
  for (int i = 0; i < nd_; ++i) d[i] = d0[i] + dop_[i];
  if (solver_.method == IntegratorConfig::Method::Discrete) {
    derivative<T>(xnext, x, cspan(u), cspan(d));
    return;
  }
  const double hstep = Ts_ / solver_.supersample;
  std::vector<T> xc(x.begin(), x.end()), k1(n), k2(n), k3(n), k4(n), tmp(n);
  for (int s = 0; s < solver_.supersample; ++s) {
    derivative<T>(std::span<T>(k1), cspan(xc), cspan(u), cspan(d));
    for (std::size_t i = 0; i < n; ++i) tmp[i] = xc[i] + (0.5 * hstep) * k1[i];
    derivative<T>(std::span<T>(k2), cspan(tmp), cspan(u), cspan(d));
    for (std::size_t i = 0; i < n; ++i) tmp[i] = xc[i] + (0.5 * hstep) * k2[i];
    derivative<T>(std::span<T>(k3), cspan(tmp), cspan(u), cspan(d));
    for (std::size_t i = 0; i < n; ++i) tmp[i] = xc[i] + hstep * k3[i];
    derivative<T>(std::span<T>(k4), cspan(tmp), cspan(u), cspan(d));
    for (std::size_t i = 0; i < n; ++i) xc[i] += (hstep / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  }
  std::copy(xc.begin(), xc.end(), xnext.begin());
}

template <class T>
void NonlinearModel::output_impl(std::span<T> y0, std::span<const T> x, std::span<const T> d0) const {
  std::vector<T> d(static_cast<std::size_t>(nd_));
  for (int i = 0; i < nd_; ++i) d[i] = d0[i] + dop_[i];
  if constexpr (std::is_same_v<T, double>) {
    h_.real(y0, x, cspan(d), cspan(p_));
  } else {
    h_.dual(y0, x, cspan(d), cspan(p_));
  }
  for (int i = 0; i < ny_; ++i) y0[i] -= yop_[i];
}

void NonlinearModel::f(std::span<double> xnext, std::span<const double> x, std::span<const double> u0,
                       std::span<const double> d0) const {
  step_impl<double>(xnext, x, u0, d0);
}
void NonlinearModel::f(std::span<Dual8> xnext, std::span<const Dual8> x, std::span<const Dual8> u0,
                       std::span<const Dual8> d0) const {
  step_impl<Dual8>(xnext, x, u0, d0);
}
void NonlinearModel::h(std::span<double> y0, std::span<const double> x, std::span<const double> d0) const {
  output_impl<double>(y0, x, d0);
}
void NonlinearModel::h(std::span<Dual8> y0, std::span<const Dual8> x, std::span<const Dual8> d0) const {
  output_impl<Dual8>(y0, x, d0);
}

// ---------------------------------------------------------- discretization

MatrixXd matrix_exponential(const MatrixXd& M) { return M.exp(); }

namespace {

struct TustinResult {
  MatrixXd A, B, C, D;
};

TustinResult tustin(const MatrixXd& Ac, const MatrixXd& Bc, const MatrixXd& Cc, const MatrixXd& Dc, double Ts) {
  const Eigen::Index n = Ac.rows();
  const MatrixXd I = MatrixXd::Identity(n, n);
  const MatrixXd M = I - 0.5 * Ts * Ac;
  Eigen::FullPivLU<MatrixXd> lu(M);
  if (!lu.isInvertible() || lu.rcond() < 1e-14) {
    throw NumericalError("Tustin discretization: (I - A*Ts/2) is singular");
  }
  const MatrixXd Minv = lu.inverse();
  TustinResult r;
  r.A = Minv * (I + 0.5 * Ts * Ac);
  r.B = Minv * Bc * Ts;
  r.C = Cc * Minv;
  r.D = Dc + Cc * Minv * Bc * (0.5 * Ts);
  return r;
}

}  // namespace

LinearModel discretize_continuous(const MatrixXd& Ac, const MatrixXd& Buc, const MatrixXd& Bdc, const MatrixXd& C,
                                  const MatrixXd& Ddc, double Ts) {
  require(Ts > 0.0 && std::isfinite(Ts), "sample time Ts must be positive");
  const Eigen::Index nx = Ac.rows();
  require(Ac.cols() == nx && nx > 0, "Ac must be square and non-empty");
  require(Buc.rows() == nx, "Buc must have nx rows");
  require(C.cols() == nx, "C must have nx columns");
  const Eigen::Index nd = std::max(Bdc.cols(), Ddc.cols());
  const MatrixXd Bd_c = Bdc.size() == 0 ? MatrixXd::Zero(nx, nd) : Bdc;
  const MatrixXd Dd_c = Ddc.size() == 0 ? MatrixXd::Zero(C.rows(), nd) : Ddc;
  require(Bd_c.rows() == nx && Bd_c.cols() == nd, "Bdc must be nx x nd");
  require(Dd_c.rows() == C.rows() && Dd_c.cols() == nd, "Ddc must be ny x nd");
  if (!(Ac.allFinite() && Buc.allFinite() && Bd_c.allFinite() && C.allFinite() && Dd_c.allFinite())) {
    throw std::invalid_argument("discretize_continuous: non-finite matrix entries");
  }
  const Eigen::Index nu = Buc.cols();
  const Eigen::Index ny = C.rows();

  MatrixXd aug = MatrixXd::Zero(nx + nu, nx + nu);
  aug.topLeftCorner(nx, nx) = Ac * Ts;
  aug.topRightCorner(nx, nu) = Buc * Ts;
  const MatrixXd e = matrix_exponential(aug);
  const MatrixXd Az = e.topLeftCorner(nx, nx);
  const MatrixXd Bz = e.topRightCorner(nx, nu);

  if (nd == 0 || Bd_c.isZero(0.0)) {
    return LinearModel(Az, Bz, C, MatrixXd::Zero(nx, nd), Dd_c, Ts);
  }
  const TustinResult t = tustin(Ac, Bd_c, C, Dd_c, Ts);
  MatrixXd A = MatrixXd::Zero(2 * nx, 2 * nx);
  A.topLeftCorner(nx, nx) = Az;
  A.bottomRightCorner(nx, nx) = t.A;
  MatrixXd Bu = MatrixXd::Zero(2 * nx, nu);
  Bu.topRows(nx) = Bz;
  MatrixXd Bd = MatrixXd::Zero(2 * nx, nd);
  Bd.bottomRows(nx) = t.B;
  MatrixXd Cd(ny, 2 * nx);
  Cd << C, t.C;
  return LinearModel(A, Bu, Cd, Bd, t.D, Ts);
}

// ------------------------------------------------------ transfer functions

namespace {

struct NormalizedTf {
  std::vector<double> num;  // padded to den.size(), descending
  std::vector<double> den;  // monic, descending
  bool zero = false;
  int order() const { return static_cast<int>(den.size()) - 1; }
};

NormalizedTf normalize(const TransferFunction& tf, int row, int col) {
  const std::string where = "G(" + std::to_string(row + 1) + "," + std::to_string(col + 1) + ")";
  require(tf.delay == 0.0, where + ": time delays are not supported");
  require(!tf.den.empty() && !tf.num.empty(), where + ": empty polynomial");
  for (double c : tf.num) require(std::isfinite(c), where + ": non-finite coefficient");
  for (double c : tf.den) require(std::isfinite(c), where + ": non-finite coefficient");
  require(tf.den.front() != 0.0, where + ": denominator leading coefficient must be nonzero");
  std::vector<double> num(tf.num);
  while (num.size() > 1 && num.front() == 0.0) num.erase(num.begin());
  NormalizedTf out;
  out.zero = std::all_of(num.begin(), num.end(), [](double c) { return c == 0.0; });
  require(num.size() <= tf.den.size(), where + ": improper transfer function (numerator degree > denominator)");
  const double lead = tf.den.front();
  out.den.resize(tf.den.size());
  for (std::size_t i = 0; i < tf.den.size(); ++i) out.den[i] = tf.den[i] / lead;
  out.num.assign(tf.den.size() - num.size(), 0.0);
  for (double c : num) out.num.push_back(c / lead);
  return out;
}

struct Block {
  int order;
  std::vector<double> den;
  std::vector<int> members;  // rows (column form) or columns (row form)
  int anchor;                // the shared column (column form) or row (row form)
};

ContinuousRealization assemble(const std::vector<Block>& blocks, const std::vector<std::vector<NormalizedTf>>& tf,
                               int ny, int ncols, bool row_form) {
  int nx = 0;
  for (const auto& b : blocks) nx += b.order;
  ContinuousRealization r{MatrixXd::Zero(nx, nx), MatrixXd::Zero(nx, ncols), MatrixXd::Zero(ny, nx),
                          MatrixXd::Zero(ny, ncols)};
  int off = 0;
  for (const auto& b : blocks) {
    const int n = b.order;
    for (int m : b.members) {
      const int i = row_form ? b.anchor : m;
      const int j = row_form ? m : b.anchor;
      const NormalizedTf& e = tf[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      const double b0 = e.num[0];
      r.D(i, j) += b0;
      for (int k = 1; k <= n; ++k) {
        const double c = e.num[static_cast<std::size_t>(k)] - b0 * b.den[static_cast<std::size_t>(k)];
        if (row_form) {
          r.B(off + k - 1, j) = c;
        } else {
          r.C(i, off + k - 1) = c;
        }
      }
    }
    if (n > 0) {
      if (row_form) {
        for (int k = 0; k < n; ++k) r.A(off + k, off) = -b.den[static_cast<std::size_t>(k + 1)];
        for (int k = 0; k + 1 < n; ++k) r.A(off + k, off + k + 1) = 1.0;
        r.C(b.anchor, off) = 1.0;
      } else {
        for (int k = 0; k < n; ++k) r.A(off, off + k) = -b.den[static_cast<std::size_t>(k + 1)];
        for (int k = 0; k + 1 < n; ++k) r.A(off + k + 1, off + k) = 1.0;
        r.B(off, b.anchor) = 1.0;
      }
    }
    off += n;
  }
  return r;
}

}  // namespace

ContinuousRealization realize(const TransferFunctionMatrix& G, const std::vector<int>& columns) {
  require(static_cast<int>(G.entries.size()) == G.ny * G.nu, "transfer matrix entry count mismatch");
  const int ny = G.ny;
  const int nc = static_cast<int>(columns.size());
  std::vector<std::vector<NormalizedTf>> tf(static_cast<std::size_t>(ny));
  for (int i = 0; i < ny; ++i) {
    for (int j = 0; j < nc; ++j) {
      const int col = columns[static_cast<std::size_t>(j)];
      require(col >= 0 && col < G.nu, "column index out of range");
      tf[static_cast<std::size_t>(i)].push_back(normalize(G(i, col), i, col));
    }
  }
  // Group entries sharing an identical denominator, either along rows
  // (observable form) or along columns (controllable form).
  auto group = [&](bool row_form) {
    std::vector<Block> blocks;
    const int outer = row_form ? ny : nc;
    const int inner = row_form ? nc : ny;
    for (int a = 0; a < outer; ++a) {
      std::map<std::vector<double>, std::size_t> index;
      for (int b = 0; b < inner; ++b) {
        const int i = row_form ? a : b;
        const int j = row_form ? b : a;
        const NormalizedTf& e = tf[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        if (e.zero) continue;
        auto it = index.find(e.den);
        if (it == index.end()) {
          index.emplace(e.den, blocks.size());
          blocks.push_back(Block{e.order(), e.den, {b}, a});
        } else {
          blocks[it->second].members.push_back(b);
        }
      }
    }
    return blocks;
  };
  auto count = [](const std::vector<Block>& bl) {
    int n = 0;
    for (const auto& b : bl) n += b.order;
    return n;
  };
  const auto by_col = group(false);
  const auto by_row = group(true);
  if (count(by_row) < count(by_col)) return assemble(by_row, tf, ny, nc, true);
  return assemble(by_col, tf, ny, nc, false);
}

LinearModel from_transfer_function(const TransferFunctionMatrix& G, double Ts, const std::vector<int>& i_d) {
  require(Ts > 0.0, "sample time Ts must be positive");
  std::vector<int> cu, cd;
  for (int j = 0; j < G.nu; ++j) {
    if (std::find(i_d.begin(), i_d.end(), j) != i_d.end()) {
      cd.push_back(j);
    } else {
      cu.push_back(j);
    }
  }
  require(cd.size() == i_d.size(), "disturbance column index out of range");
  const ContinuousRealization ru = realize(G, cu);
  const ContinuousRealization rd = realize(G, cd);
  if (!ru.D.isZero(0.0)) {
    throw std::invalid_argument("u -> y transfer functions must be strictly proper (no direct feedthrough)");
  }
  const Eigen::Index nxu = ru.A.rows();
  const Eigen::Index nxd = rd.A.rows();
  const auto nu = static_cast<Eigen::Index>(cu.size());
  const auto nd = static_cast<Eigen::Index>(cd.size());
  const Eigen::Index ny = G.ny;
  require(nxu + nxd > 0, "static transfer matrices (no states) are not supported");

  MatrixXd Az = MatrixXd::Zero(nxu, nxu), Bz = MatrixXd::Zero(nxu, nu);
  if (nxu > 0) {
    MatrixXd aug = MatrixXd::Zero(nxu + nu, nxu + nu);
    aug.topLeftCorner(nxu, nxu) = ru.A * Ts;
    aug.topRightCorner(nxu, nu) = ru.B * Ts;
    const MatrixXd e = matrix_exponential(aug);
    Az = e.topLeftCorner(nxu, nxu);
    Bz = e.topRightCorner(nxu, nu);
  }
  MatrixXd At = MatrixXd::Zero(nxd, nxd), Bt = MatrixXd::Zero(nxd, nd), Ct = MatrixXd::Zero(ny, nxd);
  MatrixXd Dt = rd.D.size() == 0 ? MatrixXd::Zero(ny, nd) : rd.D;
  if (nxd > 0) {
    const TustinResult t = tustin(rd.A, rd.B, rd.C, rd.D, Ts);
    At = t.A;
    Bt = t.B;
    Ct = t.C;
    Dt = t.D;
  }
  const Eigen::Index nx = nxu + nxd;
  MatrixXd A = MatrixXd::Zero(nx, nx);
  A.topLeftCorner(nxu, nxu) = Az;
  A.bottomRightCorner(nxd, nxd) = At;
  MatrixXd Bu = MatrixXd::Zero(nx, nu);
  Bu.topRows(nxu) = Bz;
  MatrixXd Bd = MatrixXd::Zero(nx, nd);
  Bd.bottomRows(nxd) = Bt;
  MatrixXd C(ny, nx);
  C << ru.C, Ct;
  return LinearModel(A, Bu, C, Bd, Dt, Ts);
}

// ----------------------------------------------------------- linearization

void linearize(LinearModel& out, const SimModel& model, const VectorXd& x, const VectorXd& u, const VectorXd& d) {
  const int nx = model.nx(), nu = model.nu(), nd = model.nd(), ny = model.ny();
  require(out.nx() == nx && out.nu() == nu && out.nd() == nd && out.ny() == ny,
          "linearize: output model dimensions mismatch");
  require_size(x, nx, "x");
  require_size(u, nu, "u");
  const VectorXd dd = d.size() == 0 ? model.dop() : d;
  require_size(dd, nd, "d");

  VectorXd z(nx + nu + nd);
  z << x, u - model.uop(), dd - model.dop();
  VectorXd fval;
  const MatrixXd Jf = ad::jacobian(
      [&](std::span<const Dual8> in, std::span<Dual8> o) {
        model.f(o, in.subspan(0, nx), in.subspan(nx, nu), in.subspan(nx + nu, nd));
      },
      z, nx, &fval);
  VectorXd zh(nx + nd);
  zh << x, dd - model.dop();
  VectorXd hval;
  const MatrixXd Jh = ad::jacobian(
      [&](std::span<const Dual8> in, std::span<Dual8> o) { model.h(o, in.subspan(0, nx), in.subspan(nx, nd)); },
      zh, ny, &hval);
  if (!fval.allFinite() || !hval.allFinite()) throw NumericalError("linearize: non-finite model evaluation");

  out.set_matrices(Jf.leftCols(nx), Jf.middleCols(nx, nu), Jh.leftCols(nx), Jf.rightCols(nd), Jh.rightCols(nd));
  out.set_operating_point(u, hval + model.yop(), dd);
  const VectorXd off = model.state_offset();
  out.set_state_operating_point(x + off, fval + off);
  out.set_state(VectorXd::Zero(nx));
}

LinearModel linearize(const SimModel& model, const VectorXd& x, const VectorXd& u, const VectorXd& d) {
  const int nx = model.nx(), nu = model.nu(), nd = model.nd(), ny = model.ny();
  LinearModel out(MatrixXd::Identity(nx, nx), MatrixXd::Zero(nx, nu), MatrixXd::Zero(ny, nx),
                  MatrixXd::Zero(nx, nd), MatrixXd::Zero(ny, nd), model.Ts());
  out.set_names(model.names());
  linearize(out, model, x, u, d);
  return out;
}

// -------------------------------------------------------------------- json

namespace {

nlohmann::json matrix_json(const MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

MatrixXd json_matrix(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols) {
  MatrixXd m(rows, cols);
  require(j.is_array() && static_cast<Eigen::Index>(j.size()) == rows, "json matrix row count mismatch");
  for (Eigen::Index i = 0; i < rows; ++i) {
    require(static_cast<Eigen::Index>(j[static_cast<std::size_t>(i)].size()) == cols,
            "json matrix column count mismatch");
    for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = j[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
  }
  return m;
}

VectorXd json_vector(const nlohmann::json& j) {
  VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j[i];
  return v;
}

std::vector<double> std_vec(const VectorXd& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

nlohmann::json to_json(const LinearModel& m) {
  nlohmann::json j;
  j["kind"] = "linear";
  j["Ts"] = m.Ts();
  j["nu"] = m.nu();
  j["nx"] = m.nx();
  j["ny"] = m.ny();
  j["nd"] = m.nd();
  j["A"] = matrix_json(m.A());
  j["Bu"] = matrix_json(m.Bu());
  j["Bd"] = matrix_json(m.Bd());
  j["C"] = matrix_json(m.C());
  j["Dd"] = matrix_json(m.Dd());
  j["uop"] = std_vec(m.uop());
  j["yop"] = std_vec(m.yop());
  j["dop"] = std_vec(m.dop());
  j["xop"] = std_vec(m.xop());
  j["fop"] = std_vec(m.fop());
  j["x0"] = std_vec(m.state());
  j["names"] = {{"u", m.names().u}, {"x", m.names().x}, {"y", m.names().y}, {"d", m.names().d}};
  return j;
}

LinearModel linear_model_from_json(const nlohmann::json& j) {
  require(j.value("kind", std::string()) == "linear", "json model: kind must be \"linear\"");
  const int nu = j.at("nu"), nx = j.at("nx"), ny = j.at("ny"), nd = j.at("nd");
  LinearModel m(json_matrix(j.at("A"), nx, nx), json_matrix(j.at("Bu"), nx, nu), json_matrix(j.at("C"), ny, nx),
                json_matrix(j.at("Bd"), nx, nd), json_matrix(j.at("Dd"), ny, nd), j.at("Ts").get<double>());
  m.set_operating_point(json_vector(j.at("uop")), json_vector(j.at("yop")), json_vector(j.at("dop")));
  if (j.contains("xop")) m.set_state_operating_point(json_vector(j.at("xop")), json_vector(j.at("fop")));
  if (j.contains("x0")) m.set_state(json_vector(j.at("x0")));
  if (j.contains("names")) {
    const auto& n = j.at("names");
    ModelNames names;
    names.u = n.value("u", std::vector<std::string>{});
    names.x = n.value("x", std::vector<std::string>{});
    names.y = n.value("y", std::vector<std::string>{});
    names.d = n.value("d", std::vector<std::string>{});
    m.set_names(names);
  }
  return m;
}

}  // namespace mpctk
