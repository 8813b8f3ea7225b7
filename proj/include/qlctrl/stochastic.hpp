#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "qlctrl/errors.hpp"
#include "qlctrl/linctrl.hpp"
#include "qlctrl/nonlinctrl.hpp"
#include "qlctrl/rng.hpp"
#include "qlctrl/systems.hpp"

namespace qlctrl {

/// Brownian increments dW_k ~ N(0, dt I) for one sample path, reproducible from (seed, path, grid).
struct NoiseRealization {
  std::uint64_t seed = 0;
  std::uint64_t path = 0;
  Grid grid;
  std::vector<Vector> increments;  // one per grid step
};

inline NoiseRealization brownian_increments(const Grid& grid, std::uint64_t seed, std::uint64_t path,
                                            int noise_dim) {
  if (noise_dim < 1) throw ParameterError("noise dimension must be >= 1");
  const NormalStream stream(seed, path);
  const double scale = std::sqrt(grid.dt());
  NoiseRealization out{seed, path, grid, {}};
  out.increments.reserve(grid.steps());
  std::uint64_t index = 0;
  for (std::size_t k = 0; k < grid.steps(); ++k) {
    Vector dw(noise_dim);
    for (int i = 0; i < noise_dim; ++i) dw[i] = scale * stream[index++];
    out.increments.push_back(std::move(dw));
  }
  return out;
}

namespace detail {

inline void check_noise(const Matrix& z, const NoiseRealization& noise, const Grid& grid, int state_dim) {
  if (!(noise.grid == grid)) throw ParameterError("noise realization uses a different grid");
  if (z.rows() != state_dim) throw ParameterError("noise intensity must have d rows");
  if (!noise.increments.empty() && noise.increments.front().size() != z.cols())
    throw ParameterError("noise intensity columns do not match the Wiener dimension");
}

}  // namespace detail

/// y_{k+1} = y_k + (-A(t_k,y_k) y_k + B(t_k,y_k) u_k) dt + Z dW_k.
inline StateTrajectory euler_maruyama(const SDESystem& sde, const ControlTrajectory& u, const Vector& y0,
                                      const NoiseRealization& noise, double guard = 0.0) {
  const auto& grid = u.grid;
  const auto& sys = sde.base;
  detail::check_noise(sde.noise, noise, grid, sys.state_dim);
  if (y0.size() != sys.state_dim) throw ParameterError("euler_maruyama: initial state dimension mismatch");
  if (guard <= 0.0) guard = std::numeric_limits<double>::infinity();
  StateTrajectory y;
  y.reserve(grid.nodes());
  y.push_back(y0);
  for (std::size_t k = 0; k < grid.steps(); ++k) {
    const Vector drift = sys.rhs(grid.t(k), y.back(), u.values[k]);
    Vector next = y.back() + drift * grid.dt();
    next += sde.noise * noise.increments[k];
    detail::check_state(next, guard, k + 1, "Euler-Maruyama path");
    y.push_back(std::move(next));
  }
  return y;
}

/// Euler-Maruyama for the frozen linear SDE dy = (Â y + B̂ u) dt + Z dW.
inline StateTrajectory euler_maruyama_frozen(const LTVSystem& ltv, const Matrix& z, const ControlTrajectory& u,
                                             const Vector& y0, const NoiseRealization& noise, double guard = 0.0) {
  const auto& grid = ltv.grid;
  detail::check_noise(z, noise, grid, ltv.state_dim());
  if (guard <= 0.0) guard = std::numeric_limits<double>::infinity();
  StateTrajectory y;
  y.reserve(grid.nodes());
  y.push_back(y0);
  for (std::size_t k = 0; k < grid.steps(); ++k) {
    const Vector drift = ltv.drift[k] * y.back() + ltv.input[k] * u.values[k];
    Vector next = y.back() + drift * grid.dt();
    next += z * noise.increments[k];
    detail::check_state(next, guard, k + 1, "frozen Euler-Maruyama path");
    y.push_back(std::move(next));
  }
  return y;
}

/// Pathwise fixed-point iteration: coefficients are frozen along this path's previous iterate and each
/// frozen linear SDE is driven by the same increments. `opts.max_iter` is the iteration budget.
inline SolveReport per_path_picard(const SDESystem& sde, const ControlProblem& problem,
                                   const NoiseRealization& noise, const SolverOptions& opts) {
  opts.validate();
  problem.validate(sde.base.state_dim);
  if (problem.mode != TargetMode::in_expectation)
    throw ParameterError("per_path_picard needs an in-expectation problem");
  const Grid& grid = noise.grid;
  if (std::abs(grid.horizon() - problem.horizon) > 1e-12 * problem.horizon)
    throw ParameterError("noise grid horizon does not match the problem");
  try {
    return detail::picard_loop(
        sde.base, problem, grid, opts, opts.max_iter,
        [&](const LTVSystem& ltv, const ControlTrajectory& u, const Vector& y0, double guard) {
          return euler_maruyama_frozen(ltv, sde.noise, u, y0, noise, guard);
        },
        [&](const ControlTrajectory& u, const Vector& y0, double guard) {
          return euler_maruyama(sde, u, y0, noise, guard);
        });
  } catch (const UncontrollableError& e) {
    throw UncontrollableError("path " + std::to_string(noise.path) + ": " + e.what(), e.witness());
  } catch (const DivergenceError& e) {
    throw DivergenceError("path " + std::to_string(noise.path) + ": " + e.what());
  }
}

namespace detail {

/// Pairwise sum of vectors in index order; result independent of how the inputs were produced.
inline Vector pairwise_sum(const std::vector<Vector>& xs, std::size_t lo, std::size_t hi) {
  if (hi - lo == 1) return xs[lo];
  const std::size_t mid = lo + (hi - lo) / 2;
  return pairwise_sum(xs, lo, mid) + pairwise_sum(xs, mid, hi);
}

/// Runs fn(i) for i in [0, count) on `workers` threads. fn must only touch slot i of its outputs.
template <class Fn>
void parallel_for(std::size_t count, unsigned workers, Fn&& fn) {
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(count, 1))));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) fn(i);
    });
  }
}

}  // namespace detail

/// Sample mean, componentwise.
inline Vector expectation(const std::vector<Vector>& finals) {
  if (finals.empty()) throw ParameterError("expectation of an empty sample");
  return detail::pairwise_sum(finals, 0, finals.size()) / static_cast<double>(finals.size());
}

struct PathOutcome {
  std::uint64_t path = 0;
  int budget = 0;
  bool ok = false;
  Vector final_state;
  std::string error;
};

struct MonteCarloReport {
  std::uint64_t seed = 0;
  std::vector<int> budgets;
  std::size_t paths_per_budget = 0;
  std::vector<Vector> budget_means;       // one per budget, over successful paths
  std::vector<std::size_t> budget_failures;
  Vector pooled_mean;                     // over every successful path
  std::vector<PathOutcome> outcomes;      // budget-major, path-minor
  std::vector<double> times;
  std::vector<StateTrajectory> sample_paths;  // first few paths of the largest budget

  std::size_t failures() const {
    std::size_t f = 0;
    for (auto c : budget_failures) f += c;
    return f;
  }
};

struct ExperimentOptions {
  std::size_t paths = 20;
  std::vector<int> budgets{1, 2, 3, 4, 5};
  std::uint64_t seed = 1;
  unsigned workers = 1;
  std::size_t sample_paths = 6;
};

/// For each budget n, runs per_path_picard capped at n iterations on `paths` fresh path indices
/// (path index = budget position * paths + p), then averages the reached finals per budget and overall.
/// Failed paths are excluded and counted.
inline MonteCarloReport averaged_control_experiment(const SDESystem& sde, const ControlProblem& problem,
                                                    const SolverOptions& opts, const ExperimentOptions& exp) {
  if (exp.paths < 1) throw ParameterError("need at least one path per budget");
  if (exp.budgets.empty()) throw ParameterError("need at least one iteration budget");
  for (int b : exp.budgets)
    if (b < 1) throw ParameterError("iteration budgets must be >= 1");
  problem.validate(sde.base.state_dim);
  const Grid grid(problem.horizon, opts.dt);
  const std::size_t total = exp.budgets.size() * exp.paths;
  const auto largest = static_cast<std::size_t>(
      std::max_element(exp.budgets.begin(), exp.budgets.end()) - exp.budgets.begin());

  MonteCarloReport rep;
  rep.seed = exp.seed;
  rep.budgets = exp.budgets;
  rep.paths_per_budget = exp.paths;
  rep.outcomes.resize(total);
  const std::size_t keep = std::min(exp.sample_paths, exp.paths);
  rep.sample_paths.resize(keep);

  detail::parallel_for(total, exp.workers, [&](std::size_t i) {
    const std::size_t b = i / exp.paths;
    const std::size_t p = i % exp.paths;
    PathOutcome& out = rep.outcomes[i];
    out.path = i;
    out.budget = exp.budgets[b];
    SolverOptions path_opts = opts;
    path_opts.max_iter = exp.budgets[b];
    try {
      const NoiseRealization noise = brownian_increments(grid, exp.seed, i, sde.noise_dim());
      SolveReport r = per_path_picard(sde, problem, noise, path_opts);
      out.final_state = r.final_state();
      out.ok = true;
      if (b == largest && p < keep) rep.sample_paths[p] = std::move(r.state);
    } catch (const Error& e) {
      out.ok = false;
      out.error = e.what();
    }
  });

  std::vector<Vector> all;
  for (std::size_t b = 0; b < exp.budgets.size(); ++b) {
    std::vector<Vector> finals;
    std::size_t failed = 0;
    for (std::size_t p = 0; p < exp.paths; ++p) {
      const auto& o = rep.outcomes[b * exp.paths + p];
      if (o.ok) {
        finals.push_back(o.final_state);
        all.push_back(o.final_state);
      } else {
        ++failed;
      }
    }
    rep.budget_failures.push_back(failed);
    rep.budget_means.push_back(finals.empty() ? Vector::Constant(sde.base.state_dim, std::nan(""))
                                              : expectation(finals));
  }
  rep.pooled_mean = all.empty() ? Vector::Constant(sde.base.state_dim, std::nan("")) : expectation(all);
  rep.times.reserve(grid.nodes());
  for (std::size_t k = 0; k < grid.nodes(); ++k) rep.times.push_back(grid.t(k));
  return rep;
}

/// Terminal states of `paths` Euler-Maruyama runs of the frozen linear SDE under a fixed control.
inline std::vector<Vector> frozen_terminal_states(const LTVSystem& ltv, const Matrix& z, const ControlTrajectory& u,
                                                  const Vector& y0, std::uint64_t seed, std::size_t paths,
                                                  unsigned workers = 1) {
  std::vector<Vector> finals(paths);
  detail::parallel_for(paths, workers, [&](std::size_t i) {
    const NoiseRealization noise = brownian_increments(ltv.grid, seed, i, static_cast<int>(z.cols()));
    finals[i] = euler_maruyama_frozen(ltv, z, u, y0, noise).back();
  });
  return finals;
}

}  // namespace qlctrl
