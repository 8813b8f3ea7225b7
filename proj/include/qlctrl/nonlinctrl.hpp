#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "qlctrl/errors.hpp"
#include "qlctrl/linctrl.hpp"
#include "qlctrl/propagator.hpp"
#include "qlctrl/systems.hpp"

namespace qlctrl {

enum class Integrator { rk4, euler };

struct SolverOptions {
  int max_iter = 6;
  double tol = 1e-2;         // relative sup-norm change of u
  bool early_stop = true;    // stop as soon as the change drops below tol
  double alpha = 0.0;        // final-state relaxation, 0 <= alpha < 1
  ExpmMethod expm = ExpmMethod::accurate();
  Granularity granularity = Granularity::step;
  double dt = 1e-3;
  bool march = false;
  std::uint64_t k_cap = std::uint64_t{1} << 20;  // bound on K and on the number of marching windows
  int window_budget = 0;     // Picard iterations per marching window, 0 = max_iter
  Integrator integrator = Integrator::rk4;
  RegularizationConfig regularization;
  bool keep_history = false;
  double divergence_factor = 1e6;

  void validate() const {
    if (max_iter < 1) throw ParameterError("max_iter must be >= 1");
    if (!(tol > 0.0)) throw ParameterError("tol must be > 0");
    if (!(alpha >= 0.0 && alpha < 1.0)) throw ParameterError("alpha must lie in [0, 1)");
    if (!(dt > 0.0)) throw ParameterError("dt must be > 0");
    if (k_cap < 1) throw ParameterError("k_cap must be >= 1");
    if (window_budget < 0) throw ParameterError("window_budget must be >= 0");
  }
};

struct IterationRecord {
  std::vector<Vector> control;
  StateTrajectory frozen_state;
  StateTrajectory state;  // nonlinear re-simulation
};

struct MarchWindow {
  double t_begin = 0.0;
  double t_end = 0.0;
  std::uint64_t k = 1;
  int iterations = 0;
  double last_delta = 0.0;
  bool converged = false;
};

struct SolveReport {
  std::vector<double> times;
  std::vector<Vector> control;
  StateTrajectory state;  // nonlinear re-simulation under `control`
  std::vector<double> deltas;   // deltas[i]: change of u at iteration i+1 (against u = 0 for i = 0)
  std::vector<Vector> reached;  // nonlinear final state after each iteration
  std::vector<Vector> targets;  // target fed to each iteration
  std::vector<double> window_bounds;
  std::vector<MarchWindow> windows;
  std::vector<IterationRecord> history;
  bool converged = false;
  double regularization = 0.0;  // largest Gramian shift used

  int iterations() const { return static_cast<int>(deltas.size()); }
  const Vector& final_state() const { return state.back(); }
};

/// Thrown by march_solve when the window budget runs out; keeps what was computed.
class MarchNonTermination : public NonTerminationError {
 public:
  MarchNonTermination(const std::string& what, SolveReport partial)
      : NonTerminationError(what), partial_(std::move(partial)) {}
  const SolveReport& partial() const noexcept { return partial_; }

 private:
  SolveReport partial_;
};

/// yT + alpha (yT - reached).
inline Vector relax_target(const Vector& target, const Vector& reached, double alpha) {
  if (!(alpha >= 0.0 && alpha < 1.0)) throw ParameterError("alpha must lie in [0, 1)");
  if (target.size() != reached.size()) throw ParameterError("relax_target: dimension mismatch");
  return target + alpha * (target - reached);
}

/// Smallest power of two >= max(1, sup|Â|_2, sup|B̂u|, sup|u|).
inline std::uint64_t choose_K(const LTVSystem& ltv, const ControlTrajectory& u) {
  double bound = 1.0;
  for (std::size_t k = 0; k < ltv.drift.size(); ++k) {
    bound = std::max(bound, Eigen::JacobiSVD<Matrix>(ltv.drift[k]).singularValues()(0));
    if (k < u.values.size()) {
      bound = std::max(bound, (ltv.input[k] * u.values[k]).norm());
      bound = std::max(bound, u.values[k].norm());
    }
  }
  if (!std::isfinite(bound) || bound > 0x1p62) throw OverflowError("choose_K: coefficient bound out of range");
  std::uint64_t k = 1;
  while (static_cast<double>(k) < bound) k <<= 1;
  return k;
}

namespace detail {

inline double rel_sup_change(const std::vector<Vector>& now, const std::vector<Vector>* before) {
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < now.size(); ++k) {
    const Vector diff = before ? Vector(now[k] - (*before)[k]) : now[k];
    num = std::max(num, diff.lpNorm<Eigen::Infinity>());
    den = std::max(den, now[k].lpNorm<Eigen::Infinity>());
  }
  if (num == 0.0) return 0.0;
  return den > 0.0 ? num / den : std::numeric_limits<double>::infinity();
}

inline StateTrajectory straight_line(const Grid& grid, const Vector& from, const Vector& to) {
  StateTrajectory v;
  v.reserve(grid.nodes());
  for (std::size_t k = 0; k < grid.nodes(); ++k) {
    const double s = grid.t(k) / grid.horizon();
    v.push_back((1.0 - s) * from + s * to);
  }
  return v;
}

inline void check_state(const Vector& y, double guard, std::size_t node, const char* what) {
  if (!y.allFinite() || y.norm() > guard)
    throw DivergenceError(std::string(what) + " diverged at node " + std::to_string(node));
}

/// Explicit Euler for the frozen system. Shares its update expression with the Euler-Maruyama leg.
inline StateTrajectory simulate_euler(const LTVSystem& ltv, const ControlTrajectory& u, const Vector& y0,
                                      double guard) {
  const auto& grid = ltv.grid;
  StateTrajectory y;
  y.reserve(grid.nodes());
  y.push_back(y0);
  for (std::size_t k = 0; k < grid.steps(); ++k) {
    const Vector drift = ltv.drift[k] * y.back() + ltv.input[k] * u.values[k];
    Vector next = y.back() + drift * grid.dt();
    check_state(next, guard, k + 1, "frozen Euler simulation");
    y.push_back(std::move(next));
  }
  return y;
}

inline StateTrajectory nonlinear_rk4(const QuasilinearSystem& sys, const Grid& grid, const ControlTrajectory& u,
                                     const Vector& y0, double guard) {
  const double h = grid.dt();
  StateTrajectory y;
  y.reserve(grid.nodes());
  y.push_back(y0);
  for (std::size_t k = 0; k < grid.steps(); ++k) {
    const double t = grid.t(k);
    const double tm = t + 0.5 * h;
    const double t1 = grid.t(k + 1);
    const Vector um = u.at_mid(k);
    const Vector& x = y.back();
    const Vector k1 = sys.rhs(t, x, u.values[k]);
    const Vector k2 = sys.rhs(tm, x + 0.5 * h * k1, um);
    const Vector k3 = sys.rhs(tm, x + 0.5 * h * k2, um);
    const Vector k4 = sys.rhs(t1, x + h * k3, u.values[k + 1]);
    Vector next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    check_state(next, guard, k + 1, "nonlinear re-simulation");
    y.push_back(std::move(next));
  }
  return y;
}

inline StateTrajectory nonlinear_euler(const QuasilinearSystem& sys, const Grid& grid, const ControlTrajectory& u,
                                       const Vector& y0, double guard) {
  StateTrajectory y;
  y.reserve(grid.nodes());
  y.push_back(y0);
  for (std::size_t k = 0; k < grid.steps(); ++k) {
    const Vector drift = sys.rhs(grid.t(k), y.back(), u.values[k]);
    Vector next = y.back() + drift * grid.dt();
    check_state(next, guard, k + 1, "nonlinear re-simulation");
    y.push_back(std::move(next));
  }
  return y;
}

/// Gramian solve settings for the loop. Truncated exponentials are reproduced as they are: defect correction
/// against the RK4 map would hide exactly the error a truncation study measures.
inline RegularizationConfig synthesis_config(const SolverOptions& opts) {
  RegularizationConfig cfg = opts.regularization;
  if (!opts.expm.is_accurate()) cfg.refine = 0;
  return cfg;
}

inline double divergence_guard(const ControlProblem& problem, const SolverOptions& opts) {
  return opts.divergence_factor * (1.0 + problem.initial.norm() + problem.target.norm());
}

/// The fixed-point loop: freeze along v, synthesize u, simulate the frozen system to get the next v.
/// `frozen_sim(ltv, u, y0, guard)` and `nonlinear_sim(u, y0, guard)` supply the integrators.
template <class FrozenSim, class NonlinearSim>
SolveReport picard_loop(const QuasilinearSystem& sys, const ControlProblem& problem, const Grid& grid,
                        const SolverOptions& opts, int max_iter, FrozenSim&& frozen_sim,
                        NonlinearSim&& nonlinear_sim) {
  const double guard = divergence_guard(problem, opts);
  SolveReport rep;
  StateTrajectory v = straight_line(grid, problem.initial, problem.target);
  Vector target = problem.target;
  std::vector<Vector> prev_u;
  ControlTrajectory u{grid, {}, 0.0};
  StateTrajectory y_nl;
  for (int n = 1; n <= max_iter; ++n) {
    const std::string where = "iterate " + std::to_string(n) + ": ";
    try {
      const LTVSystem ltv = freeze(sys, grid, v);
      const TransitionSet tset = transition(ltv, opts.expm, opts.granularity);
      ControlProblem step_problem = problem;
      step_problem.target = target;
      step_problem.horizon = grid.horizon();
      u = min_energy_control(tset, ltv, step_problem, synthesis_config(opts));
      StateTrajectory y_lin = frozen_sim(ltv, u, problem.initial, guard);
      y_nl = nonlinear_sim(u, problem.initial, guard);
      const double delta = rel_sup_change(u.values, prev_u.empty() ? nullptr : &prev_u);
      rep.deltas.push_back(delta);
      rep.reached.push_back(y_nl.back());
      rep.targets.push_back(target);
      rep.regularization = std::max(rep.regularization, u.regularization);
      if (opts.keep_history) rep.history.push_back({u.values, y_lin, y_nl});
      v = std::move(y_lin);
      prev_u = u.values;
      rep.converged = n > 1 && delta < opts.tol;
      if (rep.converged && opts.early_stop) break;
      target = relax_target(problem.target, y_nl.back(), opts.alpha);
    } catch (const UncontrollableError& e) {
      throw UncontrollableError(where + e.what(), e.witness());
    } catch (const DivergenceError& e) {
      throw DivergenceError(where + e.what());
    } catch (const EvaluationError& e) {
      throw EvaluationError(where + e.what());
    }
  }
  rep.times.reserve(grid.nodes());
  for (std::size_t k = 0; k < grid.nodes(); ++k) rep.times.push_back(grid.t(k));
  rep.control = std::move(u.values);
  rep.state = std::move(y_nl);
  rep.window_bounds = {0.0, grid.horizon()};
  return rep;
}

inline SolveReport picard_on_grid(const QuasilinearSystem& sys, const ControlProblem& problem, const Grid& grid,
                                  const SolverOptions& opts, int max_iter) {
  if (opts.integrator == Integrator::euler) {
    return picard_loop(
        sys, problem, grid, opts, max_iter,
        [](const LTVSystem& ltv, const ControlTrajectory& u, const Vector& y0, double guard) {
          return simulate_euler(ltv, u, y0, guard);
        },
        [&](const ControlTrajectory& u, const Vector& y0, double guard) {
          return nonlinear_euler(sys, grid, u, y0, guard);
        });
  }
  return picard_loop(
      sys, problem, grid, opts, max_iter,
      [](const LTVSystem& ltv, const ControlTrajectory& u, const Vector& y0, double guard) {
        try {
          return simulate(ltv, u, y0, guard);
        } catch (const DivergenceError& e) {
          throw DivergenceError(std::string("frozen simulation: ") + e.what());
        }
      },
      [&](const ControlTrajectory& u, const Vector& y0, double guard) {
        return nonlinear_rk4(sys, grid, u, y0, guard);
      });
}

/// Coefficients in rescaled time tau = K (t - t0): A(t0 + tau/K, y)/K, B(t0 + tau/K, y)/K.
inline QuasilinearSystem rescale_time(const QuasilinearSystem& sys, double t0, double k) {
  QuasilinearSystem out = sys;
  out.drift = [drift = sys.drift, t0, k](double tau, const Vector& y) -> Matrix { return drift(t0 + tau / k, y) / k; };
  out.input = [input = sys.input, t0, k](double tau, const Vector& y) -> Matrix { return input(t0 + tau / k, y) / k; };
  return out;
}

struct WindowPlan {
  std::uint64_t k = 1;
  bool planned = false;        // a frozen minimum-energy plan over the remaining horizon exists
  Grid grid{1.0, 0.5};
  StateTrajectory plan;        // frozen response to that plan on `grid`

  /// Waypoint at time offset s into the remaining horizon.
  Vector waypoint(double s, const Vector& from, const Vector& to) const {
    if (!planned) return from + (s / grid.horizon()) * (to - from);
    const double pos = std::clamp(s / grid.dt(), 0.0, static_cast<double>(grid.steps()));
    const auto k = std::min(static_cast<std::size_t>(pos), grid.steps() - 1);
    const double w = pos - static_cast<double>(k);
    return (1.0 - w) * plan[k] + w * plan[k + 1];
  }
};

/// Freezes the system along the straight line to the target over the remaining horizon and synthesizes the
/// minimum-energy control of that frozen system. K comes from choose_K on this data; the frozen response
/// supplies intermediate waypoints. When the frozen Gramian is too ill-conditioned the bound uses the
/// drift alone and the waypoints fall back to the straight line.
inline WindowPlan plan_window(const QuasilinearSystem& sys, double t_cur, const Vector& y_cur, const Vector& target,
                              double remaining, double dt, const SolverOptions& opts) {
  const auto steps = std::max<std::size_t>(2, static_cast<std::size_t>(std::round(remaining / dt)));
  WindowPlan plan;
  plan.grid = Grid::with_steps(remaining, steps);
  const LTVSystem ltv = freeze(rescale_time(sys, t_cur, 1.0), plan.grid, straight_line(plan.grid, y_cur, target));
  ControlTrajectory u = zero_control(plan.grid, sys.input_dim);
  try {
    const TransitionSet tset = transition(ltv, opts.expm, opts.granularity);
    u = min_energy_control(tset, ltv, ControlProblem{y_cur, target, plan.grid.horizon(), TargetMode::exact},
                           synthesis_config(opts));
    plan.plan = simulate(ltv, u, y_cur);
    plan.planned = true;
  } catch (const UncontrollableError&) {
    u = zero_control(plan.grid, sys.input_dim);
  } catch (const OverflowError&) {
    u = zero_control(plan.grid, sys.input_dim);
  } catch (const DivergenceError&) {
    u = zero_control(plan.grid, sys.input_dim);
  }
  plan.k = choose_K(ltv, u);
  return plan;
}

}  // namespace detail

/// Fixed-point iteration v^0 = straight line y0 -> yT; v^n = frozen response to u^n.
inline SolveReport picard_solve(const QuasilinearSystem& sys, const ControlProblem& problem,
                                const SolverOptions& opts) {
  opts.validate();
  problem.validate(sys.state_dim);
  if (problem.mode != TargetMode::exact) throw ParameterError("picard_solve needs an exact-mode problem");
  const Grid grid(problem.horizon, opts.dt);
  return detail::picard_on_grid(sys, problem, grid, opts, opts.max_iter);
}

/// Interval marching. Each window has length (T - t)/K with K from plan_window, and is solved by Picard in
/// the rescaled time tau = K (t - t_window). Intermediate windows steer to the planned waypoint; the window
/// that brings t within dt of T steers to yT itself.
inline SolveReport march_solve(const QuasilinearSystem& sys, const ControlProblem& problem,
                               const SolverOptions& opts) {
  opts.validate();
  problem.validate(sys.state_dim);
  if (problem.mode != TargetMode::exact) throw ParameterError("march_solve needs an exact-mode problem");
  const double horizon = problem.horizon;
  const int budget = opts.window_budget > 0 ? opts.window_budget : opts.max_iter;
  const double dt = opts.dt;

  SolveReport out;
  out.converged = true;
  out.window_bounds.push_back(0.0);
  double t_cur = 0.0;
  Vector y_cur = problem.initial;

  for (std::uint64_t count = 0;; ++count) {
    const double remaining = horizon - t_cur;
    if (count >= opts.k_cap) {
      throw MarchNonTermination("march_solve: window budget of " + std::to_string(opts.k_cap) + " exhausted at t=" +
                                    std::to_string(t_cur),
                                std::move(out));
    }
    const detail::WindowPlan plan = detail::plan_window(sys, t_cur, y_cur, problem.target, remaining, dt, opts);
    const std::uint64_t k = plan.k;
    if (k > opts.k_cap) {
      throw MarchNonTermination("march_solve: K=" + std::to_string(k) + " exceeds the cap", std::move(out));
    }
    double length = remaining / static_cast<double>(k);
    const bool last = k == 1 || remaining - length <= dt;
    if (last) length = remaining;
    const Vector target = last ? Vector(problem.target) : plan.waypoint(length, y_cur, problem.target);

    const double kd = static_cast<double>(k);
    const std::size_t steps = std::max<std::size_t>(2, static_cast<std::size_t>(std::round(length / dt)));
    const Grid window_grid = Grid::with_steps(kd * length, steps);
    ControlProblem window_problem{y_cur, target, window_grid.horizon(), TargetMode::exact};
    SolveReport w;
    try {
      w = detail::picard_on_grid(detail::rescale_time(sys, t_cur, kd), window_problem, window_grid, opts, budget);
    } catch (const UncontrollableError& e) {
      throw UncontrollableError("window " + std::to_string(count) + ": " + e.what(), e.witness());
    } catch (const DivergenceError& e) {
      throw DivergenceError("window " + std::to_string(count) + ": " + e.what());
    }

    const double t_end = last ? horizon : t_cur + length;
    const std::size_t first = out.times.empty() ? 0 : 1;
    for (std::size_t i = first; i < w.times.size(); ++i) {
      out.times.push_back(i + 1 == w.times.size() ? t_end : t_cur + w.times[i] / kd);
      out.control.push_back(w.control[i]);
      out.state.push_back(w.state[i]);
    }
    out.windows.push_back({t_cur, t_end, k, w.iterations(), w.deltas.back(), w.converged});
    out.window_bounds.push_back(t_end);
    out.converged = out.converged && w.converged;
    out.regularization = std::max(out.regularization, w.regularization);
    out.deltas = w.deltas;
    out.reached = w.reached;
    out.targets = w.targets;
    if (opts.keep_history) out.history = std::move(w.history);
    y_cur = w.state.back();
    t_cur = t_end;
    if (last) break;
  }
  return out;
}

}  // namespace qlctrl
