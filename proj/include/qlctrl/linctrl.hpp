#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "qlctrl/errors.hpp"
#include "qlctrl/propagator.hpp"
#include "qlctrl/systems.hpp"

namespace qlctrl {

namespace detail {

inline Matrix controllability_matrix(const Matrix& a, const Matrix& b) {
  if (a.rows() != a.cols() || b.rows() != a.rows()) throw ParameterError("kalman_rank: inconsistent shapes");
  const auto d = a.rows();
  const auto n = b.cols();
  Matrix ctrb(d, d * n);
  Matrix block = b;
  for (Eigen::Index j = 0; j < d; ++j) {
    ctrb.middleCols(j * n, n) = block;
    block = a * block;
  }
  return ctrb;
}

}  // namespace detail

struct KalmanResult {
  int rank = 0;
  bool controllable = false;
};

/// Rank of [B | AB | ... | A^{d-1}B] by singular values.
inline KalmanResult kalman_rank(const Matrix& a, const Matrix& b) {
  const Matrix ctrb = detail::controllability_matrix(a, b);
  const auto d = a.rows();
  const Vector sv = Eigen::JacobiSVD<Matrix>(ctrb).singularValues();
  const double threshold = static_cast<double>(std::max(ctrb.rows(), ctrb.cols())) * sv(0) *
                           std::numeric_limits<double>::epsilon();
  int rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > threshold) ++rank;
  return {rank, rank == d};
}

struct GramianReport {
  Matrix gramian;
  double lambda_min = 0.0;
  double lambda_max = 0.0;
  double condition = std::numeric_limits<double>::infinity();
  double regularization = 0.0;
  Vector weakest_direction;  // eigenvector of lambda_min

  bool singular(double cap) const { return !(condition <= cap); }
};

namespace detail {

inline GramianReport analyze_symmetric(Matrix g, double eps) {
  g = 0.5 * (g + g.transpose());
  GramianReport rep;
  rep.regularization = eps;
  Eigen::SelfAdjointEigenSolver<Matrix> es(g);
  rep.lambda_min = es.eigenvalues()(0);
  rep.lambda_max = es.eigenvalues()(g.rows() - 1);
  rep.weakest_direction = es.eigenvectors().col(0);
  rep.condition = rep.lambda_min > 0.0 ? rep.lambda_max / rep.lambda_min : std::numeric_limits<double>::infinity();
  rep.gramian = std::move(g);
  return rep;
}

}  // namespace detail

/// G = sum_k w_k Psi_k B̂_k B̂_k' Psi_k' (composite trapezoid) plus eps*I.
inline GramianReport gramian(const TransitionSet& tset, const LTVSystem& ltv, double eps = 0.0) {
  if (!(tset.grid == ltv.grid)) throw ParameterError("gramian: transition set and LTV system use different grids");
  if (!(eps >= 0.0)) throw ParameterError("gramian: eps must be >= 0");
  const int d = ltv.state_dim();
  Matrix g = Matrix::Zero(d, d);
  for (std::size_t k = 0; k < ltv.grid.nodes(); ++k) {
    const Matrix pb = tset.psi(k) * ltv.input[k];
    g.noalias() += ltv.grid.weight(k) * (pb * pb.transpose());
  }
  if (eps > 0.0) g += eps * Matrix::Identity(d, d);
  return detail::analyze_symmetric(std::move(g), eps);
}

/// Smallest Gramian eigenvalue; positive values certify observability with constant 1/lambda_min.
inline double observability_margin(const GramianReport& rep) { return std::max(0.0, rep.lambda_min); }

struct RegularizationConfig {
  double condition_cap = 1e12;
  std::vector<double> ladder{0.0, 1e-12, 1e-10, 1e-8};
  int refine = 1;  // defect-correction sweeps against simulate(); only used when no shift was needed
};

struct RegularizedSolution {
  Vector x;
  double eps = 0.0;
};

namespace detail {

/// First ladder eps whose shifted condition number is within the cap.
/// A shift is only admissible while it stays below lambda_max(G).
inline double select_shift(const GramianReport& rep, const RegularizationConfig& cfg) {
  if (cfg.ladder.empty() || cfg.ladder.front() != 0.0)
    throw ParameterError("regularization ladder must start at 0");
  for (std::size_t i = 1; i < cfg.ladder.size(); ++i)
    if (!(cfg.ladder[i] > cfg.ladder[i - 1])) throw ParameterError("regularization ladder must be strictly increasing");
  if (cfg.refine < 0) throw ParameterError("refine must be >= 0");
  for (const double eps : cfg.ladder) {
    const double lo = rep.lambda_min + eps;
    const double hi = rep.lambda_max + eps;
    if (!(lo > 0.0) || !(eps < rep.lambda_max || eps == 0.0)) continue;
    if (hi / lo <= cfg.condition_cap) return eps;
  }
  std::string msg = "Gramian singular beyond regularization ladder (lambda_min=" + std::to_string(rep.lambda_min) +
                    ", lambda_max=" + std::to_string(rep.lambda_max) + ")";
  throw UncontrollableError(msg, rep.weakest_direction);
}

/// Solves (F'F + eps I) x = rhs from the stacked factor F by Householder QR, never forming F'F.
inline Vector factor_solve(const Matrix& factor, double eps, const Vector& rhs) {
  const auto d = factor.cols();
  Matrix stacked(factor.rows() + (eps > 0.0 ? d : 0), d);
  stacked.topRows(factor.rows()) = factor;
  if (eps > 0.0) stacked.bottomRows(d) = std::sqrt(eps) * Matrix::Identity(d, d);
  const Eigen::HouseholderQR<Matrix> qr(stacked);
  const Matrix r = qr.matrixQR().topRows(d).triangularView<Eigen::Upper>();
  const Vector z = r.transpose().triangularView<Eigen::Lower>().solve(rhs);
  return r.triangularView<Eigen::Upper>().solve(z);
}

}  // namespace detail

/// Solves (G + eps I) x = rhs with the first admissible ladder shift.
inline RegularizedSolution regularized_gramian_solve(const GramianReport& rep, const Vector& rhs,
                                                     const RegularizationConfig& cfg = {}) {
  if (rhs.size() != rep.gramian.rows()) throw ParameterError("regularized_gramian_solve: rhs dimension mismatch");
  const double eps = detail::select_shift(rep, cfg);
  const Matrix shifted = rep.gramian + eps * Matrix::Identity(rep.gramian.rows(), rep.gramian.cols());
  Eigen::LLT<Matrix> llt(shifted);
  if (llt.info() != Eigen::Success) throw UncontrollableError("Gramian is not positive definite", rep.weakest_direction);
  return {llt.solve(rhs), eps};
}

/// Control samples on every grid node; linear interpolation in between.
struct ControlTrajectory {
  Grid grid;
  std::vector<Vector> values;
  double regularization = 0.0;

  Vector at_mid(std::size_t k) const { return 0.5 * (values[k] + values[k + 1]); }

  /// Trapezoid approximation of the integral of |u|^2.
  double energy() const {
    double e = 0.0;
    for (std::size_t k = 0; k < values.size(); ++k) e += grid.weight(k) * values[k].squaredNorm();
    return e;
  }

  double sup_norm() const {
    double s = 0.0;
    for (const auto& v : values) s = std::max(s, v.lpNorm<Eigen::Infinity>());
    return s;
  }
};

inline ControlTrajectory zero_control(const Grid& grid, int input_dim) {
  return {grid, std::vector<Vector>(grid.nodes(), Vector::Zero(input_dim)), 0.0};
}

/// Classical RK4 for y' = Â y + B̂ u with Â, B̂, u linearly interpolated between nodes.
/// `guard` > 0 aborts once |y| exceeds it.
inline StateTrajectory simulate(const LTVSystem& ltv, const ControlTrajectory& u, const Vector& y0,
                                double guard = 0.0) {
  if (!(u.grid == ltv.grid) || u.values.size() != ltv.grid.nodes())
    throw ParameterError("simulate: control and LTV system use different grids");
  if (y0.size() != ltv.state_dim()) throw ParameterError("simulate: initial state dimension mismatch");
  const auto& grid = ltv.grid;
  const double h = grid.dt();
  StateTrajectory y;
  y.reserve(grid.nodes());
  y.push_back(y0);
  for (std::size_t k = 0; k < grid.steps(); ++k) {
    const Matrix a_mid = ltv.drift_mid(k);
    const Vector f_lo = ltv.input[k] * u.values[k];
    const Vector f_mid = ltv.input_mid(k) * u.at_mid(k);
    const Vector f_hi = ltv.input[k + 1] * u.values[k + 1];
    const Vector& x = y.back();
    const Vector k1 = ltv.drift[k] * x + f_lo;
    const Vector k2 = a_mid * (x + 0.5 * h * k1) + f_mid;
    const Vector k3 = a_mid * (x + 0.5 * h * k2) + f_mid;
    const Vector k4 = ltv.drift[k + 1] * (x + h * k3) + f_hi;
    Vector next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!next.allFinite() || (guard > 0.0 && next.norm() > guard))
      throw DivergenceError("linear simulation blew up at node " + std::to_string(k + 1));
    y.push_back(std::move(next));
  }
  return y;
}

namespace detail {

inline void check_problem(const LTVSystem& ltv, const ControlProblem& problem) {
  problem.validate(ltv.state_dim());
  if (std::abs(problem.horizon - ltv.grid.horizon()) > 1e-12 * std::max(1.0, problem.horizon))
    throw ParameterError("control problem horizon does not match the grid");
}

}  // namespace detail

namespace detail {

/// Stacked rows sqrt(w_k) B̂_k' M_k: the square-root factor of sum_k w_k M_k' B̂_k B̂_k' M_k.
inline Matrix gramian_factor(const LTVSystem& ltv, const std::vector<Matrix>& m) {
  const auto& grid = ltv.grid;
  const int d = ltv.state_dim();
  const int n = ltv.input_dim();
  Matrix f(static_cast<Eigen::Index>(grid.nodes()) * n, d);
  for (std::size_t k = 0; k < grid.nodes(); ++k)
    f.middleRows(static_cast<Eigen::Index>(k) * n, n) = std::sqrt(grid.weight(k)) * ltv.input[k].transpose() * m[k];
  return f;
}

inline ControlTrajectory control_from(const LTVSystem& ltv, const std::vector<Matrix>& m, const Vector& x,
                                      double eps) {
  ControlTrajectory u{ltv.grid, {}, eps};
  u.values.reserve(ltv.grid.nodes());
  for (std::size_t k = 0; k < ltv.grid.nodes(); ++k) u.values.push_back(ltv.input[k].transpose() * (m[k] * x));
  return u;
}

/// u_k = B̂_k' M_k x with (F'F + eps I) x = rhs. Unshifted solves then take cfg.refine defect-correction sweeps:
/// the terminal miss of simulate() is mapped back by `miss_to_rhs` and solved against the same factor, so the
/// quadrature error of the Gramian does not show up in the reached state.
template <class MissToRhs>
ControlTrajectory steer(const LTVSystem& ltv, const std::vector<Matrix>& m, const GramianReport& rep, const Vector& rhs,
                        const ControlProblem& problem, const RegularizationConfig& cfg, MissToRhs&& miss_to_rhs,
                        Vector& x) {
  const double eps = select_shift(rep, cfg);
  const Matrix factor = gramian_factor(ltv, m);
  x = factor_solve(factor, eps, rhs);
  ControlTrajectory u = control_from(ltv, m, x, eps);
  if (eps > 0.0) return u;
  for (int sweep = 0; sweep < cfg.refine; ++sweep) {
    Vector miss;
    try {
      miss = problem.target - simulate(ltv, u, problem.initial).back();
    } catch (const DivergenceError&) {
      break;
    }
    x += factor_solve(factor, 0.0, miss_to_rhs(miss));
    u = control_from(ltv, m, x, eps);
  }
  return u;
}

}  // namespace detail

/// Minimum-energy steering control u(t) = B̂' Psi(t)' G^{-1} (Psi(T) y_T - y_0).
inline ControlTrajectory min_energy_control(const TransitionSet& tset, const LTVSystem& ltv,
                                            const ControlProblem& problem, const RegularizationConfig& cfg = {}) {
  detail::check_problem(ltv, problem);
  if (!(tset.grid == ltv.grid)) throw ParameterError("min_energy_control: transition set and LTV system use different grids");
  const GramianReport rep = gramian(tset, ltv);
  std::vector<Matrix> m;
  m.reserve(ltv.grid.nodes());
  for (const auto& psi : tset.backward) m.push_back(psi.transpose());
  const Matrix& psi_t = tset.psi_final();
  Vector x;
  return detail::steer(ltv, m, rep, psi_t * problem.target - problem.initial, problem, cfg,
                       [&](const Vector& miss) { return Vector(psi_t * miss); }, x);
}

struct AdjointState {
  Vector terminal;                 // phi(T)
  std::vector<Vector> trajectory;  // phi(t_k)
  double functional = 0.0;         // J(phi(T))
};

namespace detail {

/// Backward RK4 for P' = -Â(t)' P, P(T) = I, with Â linearly interpolated. P(t) = Phi(T,t)'.
inline std::vector<Matrix> adjoint_fundamental(const LTVSystem& ltv) {
  const auto& grid = ltv.grid;
  const int d = ltv.state_dim();
  std::vector<Matrix> p(grid.nodes());
  p.back() = Matrix::Identity(d, d);
  const double h = -grid.dt();
  for (std::size_t k = grid.steps(); k-- > 0;) {
    const Matrix at_hi = -ltv.drift[k + 1].transpose();
    const Matrix at_mid = -ltv.drift_mid(k).transpose();
    const Matrix at_lo = -ltv.drift[k].transpose();
    const Matrix& x = p[k + 1];
    const Matrix k1 = at_hi * x;
    const Matrix k2 = at_mid * (x + 0.5 * h * k1);
    const Matrix k3 = at_mid * (x + 0.5 * h * k2);
    const Matrix k4 = at_lo * (x + h * k3);
    p[k] = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!p[k].allFinite()) throw DivergenceError("adjoint integration blew up at node " + std::to_string(k));
  }
  return p;
}

}  // namespace detail

/// Adjoint route: minimize J(phi_T) = 1/2 int |B̂' phi|^2 - <y_T, phi_T> + <y_0, phi(0)>
/// with phi' = -Â' phi, phi(T) = phi_T, and set u = B̂' phi.
inline std::pair<ControlTrajectory, AdjointState> adjoint_control(const LTVSystem& ltv, const ControlProblem& problem,
                                                                  const RegularizationConfig& cfg = {}) {
  detail::check_problem(ltv, problem);
  const auto& grid = ltv.grid;
  const int d = ltv.state_dim();
  const std::vector<Matrix> p = detail::adjoint_fundamental(ltv);
  // Hessian of J: reachability Gramian int P' B̂ B̂' P.
  Matrix hess = Matrix::Zero(d, d);
  for (std::size_t k = 0; k < grid.nodes(); ++k) {
    const Matrix bp = ltv.input[k].transpose() * p[k];
    hess.noalias() += grid.weight(k) * (bp.transpose() * bp);
  }
  const GramianReport rep = detail::analyze_symmetric(std::move(hess), 0.0);
  const Vector linear = problem.target - p.front().transpose() * problem.initial;
  Vector phi_t;
  ControlTrajectory u = detail::steer(ltv, p, rep, linear, problem, cfg, [](const Vector& miss) { return miss; }, phi_t);

  AdjointState adj;
  adj.terminal = phi_t;
  adj.trajectory.reserve(grid.nodes());
  for (std::size_t k = 0; k < grid.nodes(); ++k) adj.trajectory.push_back(p[k] * phi_t);
  adj.functional = 0.5 * u.energy() - problem.target.dot(phi_t) + problem.initial.dot(adj.trajectory.front());
  return {std::move(u), std::move(adj)};
}


/// Unit covector w with w' [B | AB | ... | A^{d-1}B] ~ 0 (the weakest left singular direction).
inline Vector kalman_witness(const Matrix& a, const Matrix& b) {
  const Matrix ctrb = detail::controllability_matrix(a, b);
  const auto d = a.rows();
  Eigen::JacobiSVD<Matrix> svd(ctrb, Eigen::ComputeFullU);
  return svd.matrixU().col(d - 1);
}

}  // namespace qlctrl
