#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "qlctrl/errors.hpp"
#include "qlctrl/linctrl.hpp"
#include "qlctrl/nonlinctrl.hpp"
#include "qlctrl/propagator.hpp"
#include "qlctrl/scenario.hpp"
#include "qlctrl/stochastic.hpp"
#include "qlctrl/systems.hpp"

namespace qlctrl::cli {

/// Process exit codes.
enum ExitCode : int {
  kSuccess = 0,
  kNotConverged = 1,
  kConfigError = 2,
  kUncontrollable = 3,
  kDiverged = 4,  // also overflow and marching non-termination
  kFailure = 5,
};

inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

/// CSV with a header row; numbers carry 17 significant digits.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  void add_row(std::vector<std::string> cells) {
    if (cells.size() != header_.size()) throw Error("csv row width does not match the header");
    rows_.push_back(std::move(cells));
  }

  void add_numeric_row(const std::vector<double>& values) {
    std::vector<std::string> cells;
    cells.reserve(values.size());
    for (double v : values) cells.push_back(format_double(v));
    add_row(std::move(cells));
  }

  std::size_t rows() const noexcept { return rows_.size(); }

  std::string str() const {
    std::string out;
    auto line = [&out](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += ',';
        out += cells[i];
      }
      out += '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return out;
  }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

/// Named output files plus the machine-readable summary, written by write_artifacts.
struct RunArtifacts {
  std::vector<std::pair<std::string, std::string>> files;
  nlohmann::json summary;
  int exit_code = kSuccess;

  const std::string* file(const std::string& name) const {
    for (const auto& [n, content] : files)
      if (n == name) return &content;
    return nullptr;
  }
};

inline void write_artifacts(const RunArtifacts& art, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto put = [&dir](const std::string& name, const std::string& content) {
    std::ofstream os(dir / name, std::ios::binary);
    if (!os) throw Error("cannot write " + (dir / name).string());
    os << content;
  };
  for (const auto& [name, content] : art.files) put(name, content);
  put("summary.json", art.summary.dump(2) + "\n");
}

namespace detail {

inline std::vector<std::string> indexed(const std::string& stem, int count) {
  std::vector<std::string> out;
  for (int i = 1; i <= count; ++i) out.push_back(stem + "_" + std::to_string(i));
  return out;
}

inline std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

inline std::vector<double> as_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

/// t, y_*, u_*, and u_*_div10 (the plotted scale of the control).
inline CsvTable trajectory_table(const std::vector<double>& times, const StateTrajectory& y,
                                 const std::vector<Vector>& u, const StateTrajectory* frozen = nullptr) {
  const int d = static_cast<int>(y.front().size());
  const int n = static_cast<int>(u.front().size());
  std::vector<std::string> header{"t"};
  header = concat(header, indexed("y", d));
  if (frozen) header = concat(header, indexed("yfrozen", d));
  header = concat(header, indexed("u", n));
  for (int i = 1; i <= n; ++i) header.push_back("u_" + std::to_string(i) + "_div10");
  CsvTable table(header);
  for (std::size_t k = 0; k < times.size(); ++k) {
    std::vector<double> row{times[k]};
    for (int i = 0; i < d; ++i) row.push_back(y[k][i]);
    if (frozen)
      for (int i = 0; i < d; ++i) row.push_back((*frozen)[k][i]);
    for (int i = 0; i < n; ++i) row.push_back(u[k][i]);
    for (int i = 0; i < n; ++i) row.push_back(u[k][i] / 10.0);
    table.add_numeric_row(row);
  }
  return table;
}

}  // namespace detail

/// Kalman rank at the initial state, Gramian of the initial frozen system, and coefficient diagnostics.
inline RunArtifacts run_check(const Scenario& s) {
  const SDESystem sde = build_system(s);
  const auto& sys = sde.base;
  const ControlProblem problem = build_problem(s, sys.state_dim);
  const SolverOptions opts = build_options(s);

  const Matrix a0 = -sys.eval_drift(0.0, problem.initial);
  const Matrix b0 = sys.eval_input(0.0, problem.initial);
  const KalmanResult kalman = kalman_rank(a0, b0);

  const Grid grid(problem.horizon, opts.dt);
  const LTVSystem ltv = freeze(sys, grid, qlctrl::detail::straight_line(grid, problem.initial, problem.target));
  const TransitionSet tset = transition(ltv, opts.expm, opts.granularity);
  const GramianReport rep = gramian(tset, ltv);
  const bool singular = rep.singular(opts.regularization.condition_cap);

  const double radius = 2.0 * std::max({1.0, problem.initial.norm(), problem.target.norm()});
  const SystemDiagnostics diag = validate_system(sys, 256, problem.horizon, radius);

  RunArtifacts art;
  nlohmann::json k{{"rank", kalman.rank}, {"controllable", kalman.controllable}};
  if (!kalman.controllable) k["witness"] = detail::as_std(kalman_witness(a0, b0));
  nlohmann::json g{{"lambda_min", rep.lambda_min},
                   {"lambda_max", rep.lambda_max},
                   {"condition", std::isfinite(rep.condition) ? nlohmann::json(rep.condition) : nlohmann::json("inf")},
                   {"observability_margin", observability_margin(rep)},
                   {"singular", singular}};
  if (singular) g["witness"] = detail::as_std(rep.weakest_direction);
  art.summary = {{"command", "check"},
                 {"kalman", k},
                 {"gramian", g},
                 {"conditions",
                  {{"samples", diag.samples},
                   {"max_asymmetry", diag.max_asymmetry},
                   {"min_symmetric_eigenvalue", diag.min_sym_eigenvalue},
                   {"input_bound", diag.input_bound},
                   {"symmetry_violated", diag.symmetry_violated},
                   {"definiteness_violated", diag.definiteness_violated}}}};
  art.files.emplace_back("scenario.json", scenario_to_json(s).dump(2) + "\n");
  art.exit_code = (kalman.controllable && !singular) ? kSuccess : kUncontrollable;
  return art;
}

/// Picard (or marching) solve; trajectory, iteration and per-iteration tables.
inline RunArtifacts run_solve(const Scenario& s, bool march) {
  if (s.problem.mode != "exact") throw ConfigError("problem.mode", "solve needs an exact-mode problem");
  const SDESystem sde = build_system(s);
  const ControlProblem problem = build_problem(s, sde.base.state_dim);
  const SolverOptions opts = build_options(s);
  const bool use_march = march || opts.march;
  const SolveReport rep = use_march ? march_solve(sde.base, problem, opts) : picard_solve(sde.base, problem, opts);

  const int d = sde.base.state_dim;
  RunArtifacts art;
  art.files.emplace_back("trajectory.csv", detail::trajectory_table(rep.times, rep.state, rep.control).str());

  CsvTable iters(detail::concat(detail::concat({"iter", "delta_u"}, detail::indexed("reached", d)),
                                detail::indexed("target", d)));
  for (int i = 0; i < rep.iterations(); ++i) {
    std::vector<double> row{static_cast<double>(i + 1), rep.deltas[static_cast<std::size_t>(i)]};
    for (int c = 0; c < d; ++c) row.push_back(rep.reached[static_cast<std::size_t>(i)][c]);
    for (int c = 0; c < d; ++c) row.push_back(rep.targets[static_cast<std::size_t>(i)][c]);
    iters.add_numeric_row(row);
  }
  art.files.emplace_back("iterations.csv", iters.str());

  if (!use_march) {
    for (std::size_t i = 0; i < rep.history.size(); ++i) {
      const auto& h = rep.history[i];
      art.files.emplace_back("iteration_" + std::to_string(i + 1) + ".csv",
                             detail::trajectory_table(rep.times, h.state, h.control, &h.frozen_state).str());
    }
  } else {
    CsvTable windows({"window", "t_begin", "t_end", "K", "iterations", "last_delta", "converged"});
    for (std::size_t i = 0; i < rep.windows.size(); ++i) {
      const auto& w = rep.windows[i];
      windows.add_numeric_row({static_cast<double>(i + 1), w.t_begin, w.t_end, static_cast<double>(w.k),
                               static_cast<double>(w.iterations), w.last_delta, w.converged ? 1.0 : 0.0});
    }
    art.files.emplace_back("windows.csv", windows.str());
  }

  const Vector err = rep.final_state() - problem.target;
  art.summary = {{"command", "solve"},
                 {"march", use_march},
                 {"converged", rep.converged},
                 {"iterations", rep.iterations()},
                 {"final_state", detail::as_std(rep.final_state())},
                 {"target", detail::as_std(problem.target)},
                 {"error_inf", err.lpNorm<Eigen::Infinity>()},
                 {"deltas", rep.deltas},
                 {"regularization", rep.regularization},
                 {"windows", rep.windows.size()}};
  art.files.emplace_back("scenario.json", scenario_to_json(s).dump(2) + "\n");
  art.exit_code = rep.converged ? kSuccess : kNotConverged;
  return art;
}

/// Averaged-control Monte Carlo experiment: per-budget means, pooled mean, per-path finals, sample paths.
inline RunArtifacts run_sde(const Scenario& s) {
  if (s.problem.mode != "in_expectation") throw ConfigError("problem.mode", "sde needs an in_expectation problem");
  const SDESystem sde = build_system(s);
  const ControlProblem problem = build_problem(s, sde.base.state_dim);
  const SolverOptions opts = build_options(s);
  const ExperimentOptions exp = build_experiment(s);
  const MonteCarloReport rep = averaged_control_experiment(sde, problem, opts, exp);
  const int d = sde.base.state_dim;

  RunArtifacts art;
  std::vector<std::string> header{"quantity"};
  for (int b : rep.budgets) header.push_back("iter_" + std::to_string(b));
  header.push_back("total");
  CsvTable table(header);
  for (int c = 0; c < d; ++c) {
    std::vector<std::string> row{"E(y_" + std::to_string(c + 1) + "(T))"};
    for (const auto& m : rep.budget_means) row.push_back(format_double(m[c]));
    row.push_back(format_double(rep.pooled_mean[c]));
    table.add_row(row);
  }
  {
    std::vector<std::string> row{"failed_paths"};
    for (auto f : rep.budget_failures) row.push_back(std::to_string(f));
    row.push_back(std::to_string(rep.failures()));
    table.add_row(row);
  }
  art.files.emplace_back("montecarlo.csv", table.str());

  CsvTable finals(detail::concat({"budget", "path", "ok"}, detail::indexed("y", d)));
  for (const auto& o : rep.outcomes) {
    std::vector<double> row{static_cast<double>(o.budget), static_cast<double>(o.path), o.ok ? 1.0 : 0.0};
    for (int c = 0; c < d; ++c) row.push_back(o.ok ? o.final_state[c] : std::nan(""));
    finals.add_numeric_row(row);
  }
  art.files.emplace_back("path_finals.csv", finals.str());

  for (std::size_t p = 0; p < rep.sample_paths.size(); ++p) {
    if (rep.sample_paths[p].empty()) continue;
    CsvTable path(detail::concat({"t"}, detail::indexed("y", d)));
    for (std::size_t k = 0; k < rep.times.size(); ++k) {
      std::vector<double> row{rep.times[k]};
      for (int c = 0; c < d; ++c) row.push_back(rep.sample_paths[p][k][c]);
      path.add_numeric_row(row);
    }
    art.files.emplace_back("sample_path_" + std::to_string(p + 1) + ".csv", path.str());
  }

  nlohmann::json means = nlohmann::json::array();
  for (const auto& m : rep.budget_means) means.push_back(detail::as_std(m));
  art.summary = {{"command", "sde"},
                 {"seed", rep.seed},
                 {"budgets", rep.budgets},
                 {"paths_per_budget", rep.paths_per_budget},
                 {"budget_means", means},
                 {"pooled_mean", detail::as_std(rep.pooled_mean)},
                 {"failed_paths", rep.failures()},
                 {"target", detail::as_std(problem.target)}};
  art.files.emplace_back("scenario.json", scenario_to_json(s).dump(2) + "\n");
  art.exit_code = rep.failures() == rep.outcomes.size() ? kFailure : kSuccess;
  return art;
}

struct StudyRow {
  std::string method;
  int order = 0;  // 0 for the accurate baseline
  Vector final_state;
  double error = 0.0;
};

/// One Picard solve per Taylor order plus the accurate baseline; reached finals and their distance to yT.
inline std::vector<StudyRow> expm_study(const Scenario& s, const std::vector<int>& orders, Granularity granularity) {
  if (s.problem.mode != "exact") throw ConfigError("problem.mode", "expm-study needs an exact-mode problem");
  const SDESystem sde = build_system(s);
  const ControlProblem problem = build_problem(s, sde.base.state_dim);
  SolverOptions opts = build_options(s);
  opts.granularity = granularity;
  opts.keep_history = false;
  std::vector<StudyRow> rows;
  auto run = [&](const ExpmMethod& m, int order) {
    opts.expm = m;
    const SolveReport r = picard_solve(sde.base, problem, opts);
    rows.push_back({m.name(), order, r.final_state(), (r.final_state() - problem.target).lpNorm<Eigen::Infinity>()});
  };
  run(ExpmMethod::accurate(), 0);
  for (int k : orders) {
    if (k < 1) throw ConfigError("orders", "taylor orders must be >= 1");
    run(ExpmMethod::taylor(k), k);
  }
  return rows;
}

inline RunArtifacts run_expm_study(const Scenario& s, const std::vector<int>& orders,
                                   Granularity granularity = Granularity::accumulated) {
  const std::vector<StudyRow> rows = expm_study(s, orders, granularity);
  const int d = static_cast<int>(rows.front().final_state.size());
  CsvTable table(detail::concat(detail::concat({"method", "order"}, detail::indexed("y", d)), {"error_inf"}));
  nlohmann::json jrows = nlohmann::json::array();
  for (const auto& r : rows) {
    std::vector<std::string> cells{r.method, std::to_string(r.order)};
    for (int c = 0; c < d; ++c) cells.push_back(format_double(r.final_state[c]));
    cells.push_back(format_double(r.error));
    table.add_row(cells);
    jrows.push_back({{"method", r.method}, {"order", r.order}, {"final_state", detail::as_std(r.final_state)},
                     {"error_inf", r.error}});
  }
  RunArtifacts art;
  art.files.emplace_back("expm_study.csv", table.str());
  art.files.emplace_back("scenario.json", scenario_to_json(s).dump(2) + "\n");
  art.summary = {{"command", "expm-study"},
                 {"granularity", granularity == Granularity::step ? "step" : "accumulated"},
                 {"rows", jrows}};
  return art;
}

}  // namespace qlctrl::cli
