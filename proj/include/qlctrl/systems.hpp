#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "qlctrl/errors.hpp"

namespace qlctrl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Values on every node t_0..t_N of a Grid.
using StateTrajectory = std::vector<Vector>;

namespace detail {

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline std::string describe(double t, const Vector& y) {
  std::ostringstream os;
  os.precision(17);
  os << "t=" << t << ", y=(";
  for (Eigen::Index i = 0; i < y.size(); ++i) os << (i ? "," : "") << y[i];
  os << ")";
  return os.str();
}

}  // namespace detail

/// Uniform time grid on [0, T]. The stored step is T/N, so N*dt == T up to rounding.
class Grid {
 public:
  Grid(double horizon, double step) : horizon_(horizon) {
    if (!(horizon > 0.0) || !std::isfinite(horizon)) throw ParameterError("grid horizon must be positive and finite");
    if (!(step > 0.0) || !std::isfinite(step)) throw ParameterError("grid step must be positive and finite");
    const double steps = std::round(horizon / step);
    if (steps < 2.0) throw ParameterError("grid needs at least 2 steps (T/dt < 2)");
    if (steps > 1e9) throw ParameterError("grid step count too large");
    steps_ = static_cast<std::size_t>(steps);
    step_ = horizon_ / static_cast<double>(steps_);
  }

  static Grid with_steps(double horizon, std::size_t steps) {
    if (steps < 2) throw ParameterError("grid needs at least 2 steps");
    return Grid(horizon, horizon / static_cast<double>(steps));
  }

  double horizon() const noexcept { return horizon_; }
  double dt() const noexcept { return step_; }
  std::size_t steps() const noexcept { return steps_; }
  std::size_t nodes() const noexcept { return steps_ + 1; }

  double t(std::size_t k) const noexcept {
    return k == steps_ ? horizon_ : static_cast<double>(k) * step_;
  }

  /// Composite trapezoid weight of node k.
  double weight(std::size_t k) const noexcept {
    return (k == 0 || k == steps_) ? 0.5 * step_ : step_;
  }

  bool operator==(const Grid& o) const noexcept { return horizon_ == o.horizon_ && steps_ == o.steps_; }

 private:
  double horizon_;
  std::size_t steps_ = 0;
  double step_ = 0.0;
};

enum class SystemFamily { generic, porous, avoid_crowding };

/// y' = -A(t,y) y + B(t,y) u. The drift map returns A in this (dissipative) sign convention.
struct QuasilinearSystem {
  using MatrixMap = std::function<Matrix(double, const Vector&)>;

  int state_dim = 0;
  int input_dim = 0;
  MatrixMap drift;
  MatrixMap input;
  SystemFamily family = SystemFamily::generic;
  double exponent = 0.0;  // porous family only

  /// A(t,y), checked for shape and finiteness.
  Matrix eval_drift(double t, const Vector& y) const {
    Matrix a = drift(t, y);
    if (a.rows() != state_dim || a.cols() != state_dim)
      throw EvaluationError("drift map returned wrong shape at " + detail::describe(t, y));
    if (!a.allFinite()) throw EvaluationError("non-finite drift coefficient at " + detail::describe(t, y));
    return a;
  }

  Matrix eval_input(double t, const Vector& y) const {
    Matrix b = input(t, y);
    if (b.rows() != state_dim || b.cols() != input_dim)
      throw EvaluationError("input map returned wrong shape at " + detail::describe(t, y));
    if (!b.allFinite()) throw EvaluationError("non-finite input coefficient at " + detail::describe(t, y));
    return b;
  }

  /// Right-hand side -A(t,y) y + B(t,y) u.
  Vector rhs(double t, const Vector& y, const Vector& u) const {
    return -eval_drift(t, y) * y + eval_input(t, y) * u;
  }
};

/// Quasilinear drift plus additive noise Z dW with constant intensity Z (d x n_w).
struct SDESystem {
  QuasilinearSystem base;
  Matrix noise;

  int noise_dim() const noexcept { return static_cast<int>(noise.cols()); }
};

enum class TargetMode { exact, in_expectation };

struct ControlProblem {
  Vector initial;
  Vector target;
  double horizon = 1.0;
  TargetMode mode = TargetMode::exact;

  void validate(int state_dim) const {
    if (initial.size() != state_dim || target.size() != state_dim)
      throw ParameterError("initial/target dimension does not match the system");
    if (!initial.allFinite() || !target.allFinite()) throw ParameterError("initial/target must be finite");
    if (!(horizon > 0.0) || !std::isfinite(horizon)) throw ParameterError("horizon must be positive");
  }
};

/// Frozen linearization y' = Â(t) y + B̂(t) u sampled on every grid node.
/// Â is the full drift (already negated).
struct LTVSystem {
  Grid grid;
  std::vector<Matrix> drift;
  std::vector<Matrix> input;

  int state_dim() const { return static_cast<int>(drift.front().rows()); }
  int input_dim() const { return static_cast<int>(input.front().cols()); }

  /// Average of the two node samples, i.e. the linear interpolant at the step midpoint.
  Matrix drift_mid(std::size_t k) const { return 0.5 * (drift[k] + drift[k + 1]); }
  Matrix input_mid(std::size_t k) const { return 0.5 * (input[k] + input[k + 1]); }

  void validate() const {
    if (drift.size() != grid.nodes() || input.size() != grid.nodes())
      throw ParameterError("LTV system must be sampled on every grid node");
    for (std::size_t k = 0; k < drift.size(); ++k) {
      if (!drift[k].allFinite() || !input[k].allFinite())
        throw EvaluationError("non-finite LTV sample at node " + std::to_string(k));
    }
  }
};

/// Samples Â(t_k) = -A(t_k, v(t_k)), B̂(t_k) = B(t_k, v(t_k)).
inline LTVSystem freeze(const QuasilinearSystem& sys, const Grid& grid, const StateTrajectory& v) {
  if (v.size() != grid.nodes()) throw ParameterError("frozen trajectory must be sampled on every grid node");
  LTVSystem ltv{grid, {}, {}};
  ltv.drift.reserve(grid.nodes());
  ltv.input.reserve(grid.nodes());
  for (std::size_t k = 0; k < grid.nodes(); ++k) {
    const double t = grid.t(k);
    try {
      ltv.drift.push_back(-sys.eval_drift(t, v[k]));
      ltv.input.push_back(sys.eval_input(t, v[k]));
    } catch (const EvaluationError& e) {
      throw EvaluationError("freeze failed at node " + std::to_string(k) + ": " + e.what());
    }
  }
  return ltv;
}

/// Drift |y|^m A (Euclidean norm), constant input B.
inline QuasilinearSystem builtin_porous(const Matrix& a, const Matrix& b, double m) {
  if (!std::isfinite(m) || m < 0.0) throw ParameterError("porous exponent m must be finite and >= 0");
  if (a.rows() != a.cols() || a.rows() < 1) throw ParameterError("A must be square and non-empty");
  if (b.rows() != a.rows() || b.cols() < 1) throw ParameterError("B must have d rows and at least one column");
  if (!a.allFinite() || !b.allFinite()) throw ParameterError("A and B must be finite");
  QuasilinearSystem sys;
  sys.state_dim = static_cast<int>(a.rows());
  sys.input_dim = static_cast<int>(b.cols());
  sys.family = SystemFamily::porous;
  sys.exponent = m;
  sys.drift = [a, m](double, const Vector& y) -> Matrix {
    if (m == 0.0) return a;
    return std::pow(y.norm(), m) * a;
  };
  sys.input = [b](double, const Vector&) -> Matrix { return b; };
  return sys;
}

/// Time-tabulated coefficients (linear interpolation in t, clamped outside the table)
/// scaled by |y|^m. Used for user-supplied scenario tables.
inline QuasilinearSystem tabulated_system(std::vector<double> times, std::vector<Matrix> a_table,
                                          std::vector<Matrix> b_table, double m) {
  if (times.empty() || times.size() != a_table.size() || times.size() != b_table.size())
    throw ParameterError("coefficient table needs matching, non-empty t/A/B columns");
  if (!std::is_sorted(times.begin(), times.end()) ||
      std::adjacent_find(times.begin(), times.end()) != times.end())
    throw ParameterError("coefficient table times must be strictly increasing");
  if (!std::isfinite(m) || m < 0.0) throw ParameterError("exponent m must be finite and >= 0");
  const auto d = a_table.front().rows();
  const auto n = b_table.front().cols();
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (a_table[i].rows() != d || a_table[i].cols() != d || b_table[i].rows() != d || b_table[i].cols() != n)
      throw ParameterError("inconsistent coefficient table shapes at row " + std::to_string(i));
  }
  auto interp = [times](const std::vector<Matrix>& table, double t) -> Matrix {
    if (t <= times.front()) return table.front();
    if (t >= times.back()) return table.back();
    const auto it = std::upper_bound(times.begin(), times.end(), t);
    const auto hi = static_cast<std::size_t>(it - times.begin());
    const double s = (t - times[hi - 1]) / (times[hi] - times[hi - 1]);
    return (1.0 - s) * table[hi - 1] + s * table[hi];
  };
  QuasilinearSystem sys;
  sys.state_dim = static_cast<int>(d);
  sys.input_dim = static_cast<int>(n);
  sys.family = SystemFamily::generic;
  sys.exponent = m;
  sys.drift = [interp, a_table = std::move(a_table), m](double t, const Vector& y) -> Matrix {
    Matrix a = interp(a_table, t);
    return m == 0.0 ? a : Matrix(std::pow(y.norm(), m) * a);
  };
  sys.input = [interp, b_table = std::move(b_table)](double t, const Vector&) -> Matrix {
    return interp(b_table, t);
  };
  return sys;
}

/// The crowding-avoidance population model
///   dy1 = (|y1+y2|(-2y1 + 2y2) + u) dt + sigma dW1
///   dy2 = |y1+y2|(y1 - y2) dt + sigma dW2.
inline SDESystem builtin_avoid_crowding(double sigma) {
  if (!std::isfinite(sigma) || sigma < 0.0) throw ParameterError("noise scale sigma must be finite and >= 0");
  Matrix shape(2, 2);
  shape << -2.0, 2.0, 1.0, -1.0;
  QuasilinearSystem sys;
  sys.state_dim = 2;
  sys.input_dim = 1;
  sys.family = SystemFamily::avoid_crowding;
  sys.drift = [shape](double, const Vector& y) -> Matrix { return -std::abs(y[0] + y[1]) * shape; };
  sys.input = [](double, const Vector&) -> Matrix { return (Matrix(2, 1) << 1.0, 0.0).finished(); };
  return SDESystem{std::move(sys), sigma * Matrix::Identity(2, 2)};
}

struct SystemDiagnostics {
  std::size_t samples = 0;
  double max_asymmetry = 0.0;       // max ||A - A'||_F
  double min_sym_eigenvalue = 0.0;  // min eigenvalue of (A + A')/2
  double input_bound = 0.0;         // max ||B||_2
  bool symmetry_violated = false;
  bool definiteness_violated = false;
};

/// Checks symmetry and non-negative definiteness of A and boundedness of B at
/// pseudo-random points t in [0, horizon], y in [-radius, radius]^d. Reports, never aborts.
inline SystemDiagnostics validate_system(const QuasilinearSystem& sys, std::size_t samples, double horizon = 1.0,
                                         double radius = 2.0, std::uint64_t seed = 20240601) {
  if (samples < 1) throw ParameterError("validate_system needs at least one sample");
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> time_dist(0.0, horizon);
  std::uniform_real_distribution<double> state_dist(-radius, radius);
  SystemDiagnostics diag;
  diag.samples = samples;
  diag.min_sym_eigenvalue = std::numeric_limits<double>::infinity();
  constexpr double kRelTol = 1e-12;
  for (std::size_t s = 0; s < samples; ++s) {
    const double t = time_dist(gen);
    Vector y(sys.state_dim);
    for (int i = 0; i < sys.state_dim; ++i) y[i] = state_dist(gen);
    Matrix a, b;
    try {
      a = sys.eval_drift(t, y);
      b = sys.eval_input(t, y);
    } catch (const EvaluationError& e) {
      throw EvaluationError(std::string("validate_system sample ") + std::to_string(s) + ": " + e.what());
    }
    const double scale = 1.0 + a.norm();
    const double asym = (a - a.transpose()).norm();
    const Matrix sym = 0.5 * (a + a.transpose());
    const double lmin = Eigen::SelfAdjointEigenSolver<Matrix>(sym, Eigen::EigenvaluesOnly).eigenvalues().minCoeff();
    const double bnorm = b.size() ? Eigen::JacobiSVD<Matrix>(b).singularValues()(0) : 0.0;
    diag.max_asymmetry = std::max(diag.max_asymmetry, asym);
    diag.min_sym_eigenvalue = std::min(diag.min_sym_eigenvalue, lmin);
    diag.input_bound = std::max(diag.input_bound, bnorm);
    if (asym > kRelTol * scale) diag.symmetry_violated = true;
    if (lmin < -kRelTol * scale) diag.definiteness_violated = true;
  }
  return diag;
}

}  // namespace qlctrl
