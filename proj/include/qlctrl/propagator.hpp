#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include "qlctrl/errors.hpp"
#include "qlctrl/systems.hpp"

namespace qlctrl {

/// Either the accurate exponential or the degree-k Taylor polynomial sum_{j<=k} M^j / j!.
struct ExpmMethod {
  enum class Kind { accurate, taylor };
  Kind kind = Kind::accurate;
  int order = 0;

  static ExpmMethod accurate() { return {Kind::accurate, 0}; }
  static ExpmMethod taylor(int k) {
    if (k < 1) throw ParameterError("taylor order must be >= 1");
    return {Kind::taylor, k};
  }

  bool is_accurate() const noexcept { return kind == Kind::accurate; }
  std::string name() const { return is_accurate() ? "accurate" : "taylor" + std::to_string(order); }
  bool operator==(const ExpmMethod&) const = default;
};

inline Matrix mat_exp(const Matrix& m, const ExpmMethod& method) {
  if (m.rows() != m.cols()) throw ParameterError("mat_exp needs a square matrix");
  if (!m.allFinite()) throw ParameterError("mat_exp input is not finite");
  if (method.is_accurate()) {
    // Pade scaling and squaring.
    Matrix e = m.exp();
    if (!e.allFinite()) throw OverflowError("matrix exponential overflowed");
    return e;
  }
  const auto d = m.rows();
  Matrix sum = Matrix::Identity(d, d);
  Matrix term = Matrix::Identity(d, d);
  for (int j = 1; j <= method.order; ++j) {
    term = (term * m) / static_cast<double>(j);
    if (!term.allFinite()) throw OverflowError("taylor term " + std::to_string(j) + " overflowed");
    sum += term;
  }
  if (!sum.allFinite()) throw OverflowError("taylor polynomial overflowed");
  return sum;
}

/// How the exponential enters the transition matrices.
/// step: Phi_{k+1} = exp(Â_mid dt) Phi_k, valid for any LTV system.
/// accumulated: Phi_k = exp(sum_{j<k} Â_mid,j dt), exact only when the samples of Â commute.
enum class Granularity { step, accumulated };

/// Forward factors Phi(t_k) (Phi(0) = I, Phi' = Â Phi) and backward factors Psi(t_k) = Phi(t_k)^{-1}.
struct TransitionSet {
  Grid grid;
  std::vector<Matrix> forward;
  std::vector<Matrix> backward;
  /// Non-empty when a truncated step factor is numerically singular.
  std::string warning;

  const Matrix& phi(std::size_t k) const { return forward[k]; }
  const Matrix& psi(std::size_t k) const { return backward[k]; }
  const Matrix& phi_final() const { return forward.back(); }
  const Matrix& psi_final() const { return backward.back(); }
};

/// Step product Phi_{k+1} = exp(Â_mid dt) Phi_k with Â sampled at the step midpoint.
/// Psi accumulates exp(-Â_mid dt) on the right, so no matrix is ever inverted.
/// With Granularity::accumulated the exponential is applied to the running generator integral instead,
/// and a warning is set if the step generators do not commute.
inline TransitionSet transition(const LTVSystem& ltv, const ExpmMethod& method,
                                Granularity granularity = Granularity::step) {
  ltv.validate();
  const auto& grid = ltv.grid;
  const int d = ltv.state_dim();
  TransitionSet set{grid, {}, {}, {}};
  set.forward.reserve(grid.nodes());
  set.backward.reserve(grid.nodes());
  set.forward.push_back(Matrix::Identity(d, d));
  set.backward.push_back(Matrix::Identity(d, d));
  const double dt = grid.dt();
  if (granularity == Granularity::accumulated) {
    Matrix integral = Matrix::Zero(d, d);
    for (std::size_t k = 0; k < grid.steps(); ++k) {
      const Matrix gen = ltv.drift_mid(k) * dt;
      if (set.warning.empty()) {
        const double scale = gen.norm() * integral.norm();
        if ((gen * integral - integral * gen).norm() > 1e-10 * scale)
          set.warning = "step generators do not commute at step " + std::to_string(k) +
                        "; accumulated exponential is inexact";
      }
      integral += gen;
      set.forward.push_back(mat_exp(integral, method));
      set.backward.push_back(mat_exp(-integral, method));
    }
    return set;
  }
  for (std::size_t k = 0; k < grid.steps(); ++k) {
    const Matrix gen = ltv.drift_mid(k) * dt;
    const Matrix step = mat_exp(gen, method);
    const Matrix back = mat_exp(-gen, method);
    if (!method.is_accurate() && set.warning.empty()) {
      Eigen::JacobiSVD<Matrix> svd(step);
      const auto& sv = svd.singularValues();
      if (sv(sv.size() - 1) <= 1e-14 * sv(0))
        set.warning = "numerically singular step factor at step " + std::to_string(k) + " (" + method.name() + ")";
    }
    set.forward.push_back(step * set.forward.back());
    set.backward.push_back(set.backward.back() * back);
    if (!set.forward.back().allFinite() || !set.backward.back().allFinite())
      throw OverflowError("transition matrix overflowed at step " + std::to_string(k));
  }
  return set;
}

}  // namespace qlctrl
