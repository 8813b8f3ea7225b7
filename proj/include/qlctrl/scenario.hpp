#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "qlctrl/errors.hpp"
#include "qlctrl/nonlinctrl.hpp"
#include "qlctrl/stochastic.hpp"
#include "qlctrl/systems.hpp"

namespace qlctrl::cli {

using Rows = std::vector<std::vector<double>>;

struct SystemSpec {
  std::string builtin;  // "avoid_crowding", "porous", or empty for explicit coefficients
  Rows a;
  Rows b;
  double m = 0.0;
  std::vector<double> table_t;  // explicit time table (optional)
  std::vector<Rows> table_a;
  std::vector<Rows> table_b;
  bool operator==(const SystemSpec&) const = default;
};

struct ProblemSpec {
  std::vector<double> y0;
  std::vector<double> yT;
  double T = 1.0;
  std::string mode = "exact";
  bool operator==(const ProblemSpec&) const = default;
};

struct SolverSpec {
  int max_iter = 6;
  double tol = 1e-2;
  bool early_stop = true;
  double alpha = 0.0;
  std::string expm = "accurate";
  int taylor_order = 2;
  std::string granularity = "step";
  double dt = 1e-3;
  bool march = false;
  std::uint64_t k_cap = std::uint64_t{1} << 20;
  int window_budget = 0;
  std::string integrator = "rk4";
  double condition_cap = 1e12;
  std::vector<double> eps_ladder{0.0, 1e-12, 1e-10, 1e-8};
  int refine = 1;
  bool keep_history = true;
  bool operator==(const SolverSpec&) const = default;
};

struct StochasticSpec {
  double sigma = 0.0;
  Rows z;  // overrides sigma when present
  std::size_t paths = 20;
  std::vector<int> budgets{1, 2, 3, 4, 5};
  std::uint64_t seed = 1;
  unsigned workers = 1;
  std::size_t sample_paths = 6;
  bool operator==(const StochasticSpec&) const = default;
};

struct Scenario {
  SystemSpec system;
  ProblemSpec problem;
  SolverSpec solver;
  std::optional<StochasticSpec> stochastic;
  std::string output = "out";
  bool operator==(const Scenario&) const = default;
};

namespace detail {

using nlohmann::json;

template <class T>
T get(const json& j, const std::string& key, const std::string& path) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(path + "." + key, e.what());
  }
}

template <class T>
void get_opt(const json& j, const std::string& key, const std::string& path, T& out) {
  if (j.contains(key)) out = get<T>(j, key, path);
}

inline void check_keys(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(path, "expected an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(path + "." + key, "unknown field");
  }
}

inline Matrix to_matrix(const Rows& rows, const std::string& path) {
  if (rows.empty() || rows.front().empty()) throw ConfigError(path, "matrix must be non-empty");
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.front().size()) throw ConfigError(path, "ragged matrix rows");
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  if (!m.allFinite()) throw ConfigError(path, "matrix entries must be finite");
  return m;
}

inline Vector to_vector(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace detail

inline Scenario scenario_from_json(const nlohmann::json& j) {
  using detail::get;
  using detail::get_opt;
  detail::check_keys(j, "scenario", {"system", "problem", "solver", "stochastic", "output"});
  Scenario s;

  if (!j.contains("system")) throw ConfigError("scenario.system", "missing");
  const auto& js = j.at("system");
  detail::check_keys(js, "system", {"builtin", "explicit"});
  if (js.contains("builtin") == js.contains("explicit"))
    throw ConfigError("system", "exactly one of 'builtin' or 'explicit' is required");
  if (js.contains("builtin")) {
    const auto& b = js.at("builtin");
    detail::check_keys(b, "system.builtin", {"name", "A", "B", "m"});
    s.system.builtin = get<std::string>(b, "name", "system.builtin");
    if (s.system.builtin == "porous") {
      s.system.a = get<Rows>(b, "A", "system.builtin");
      s.system.b = get<Rows>(b, "B", "system.builtin");
      get_opt(b, "m", "system.builtin", s.system.m);
    } else if (s.system.builtin == "avoid_crowding") {
      if (b.contains("A") || b.contains("B") || b.contains("m"))
        throw ConfigError("system.builtin", "avoid_crowding takes no coefficients");
    } else {
      throw ConfigError("system.builtin.name", "unknown builtin '" + s.system.builtin + "'");
    }
  } else {
    const auto& e = js.at("explicit");
    detail::check_keys(e, "system.explicit", {"A", "B", "m", "table"});
    get_opt(e, "m", "system.explicit", s.system.m);
    if (e.contains("table") == (e.contains("A") || e.contains("B")))
      throw ConfigError("system.explicit", "give either constant A and B or a time table");
    if (e.contains("table")) {
      const auto& t = e.at("table");
      detail::check_keys(t, "system.explicit.table", {"t", "A", "B"});
      s.system.table_t = get<std::vector<double>>(t, "t", "system.explicit.table");
      s.system.table_a = get<std::vector<Rows>>(t, "A", "system.explicit.table");
      s.system.table_b = get<std::vector<Rows>>(t, "B", "system.explicit.table");
    } else {
      s.system.a = get<Rows>(e, "A", "system.explicit");
      s.system.b = get<Rows>(e, "B", "system.explicit");
    }
  }

  if (!j.contains("problem")) throw ConfigError("scenario.problem", "missing");
  const auto& jp = j.at("problem");
  detail::check_keys(jp, "problem", {"y0", "yT", "T", "mode"});
  s.problem.y0 = get<std::vector<double>>(jp, "y0", "problem");
  s.problem.yT = get<std::vector<double>>(jp, "yT", "problem");
  s.problem.T = get<double>(jp, "T", "problem");
  get_opt(jp, "mode", "problem", s.problem.mode);
  if (s.problem.mode != "exact" && s.problem.mode != "in_expectation")
    throw ConfigError("problem.mode", "must be 'exact' or 'in_expectation'");

  if (j.contains("solver")) {
    const auto& o = j.at("solver");
    detail::check_keys(o, "solver",
                       {"max_iter", "tol", "early_stop", "alpha", "expm", "taylor_order", "granularity", "dt", "march",
                        "k_cap", "window_budget", "integrator", "condition_cap", "eps_ladder", "refine",
                        "keep_history"});
    auto& v = s.solver;
    get_opt(o, "max_iter", "solver", v.max_iter);
    get_opt(o, "tol", "solver", v.tol);
    get_opt(o, "early_stop", "solver", v.early_stop);
    get_opt(o, "alpha", "solver", v.alpha);
    get_opt(o, "expm", "solver", v.expm);
    get_opt(o, "taylor_order", "solver", v.taylor_order);
    get_opt(o, "granularity", "solver", v.granularity);
    get_opt(o, "dt", "solver", v.dt);
    get_opt(o, "march", "solver", v.march);
    get_opt(o, "k_cap", "solver", v.k_cap);
    get_opt(o, "window_budget", "solver", v.window_budget);
    get_opt(o, "integrator", "solver", v.integrator);
    get_opt(o, "condition_cap", "solver", v.condition_cap);
    get_opt(o, "eps_ladder", "solver", v.eps_ladder);
    get_opt(o, "refine", "solver", v.refine);
    get_opt(o, "keep_history", "solver", v.keep_history);
  }

  if (j.contains("stochastic")) {
    const auto& o = j.at("stochastic");
    detail::check_keys(o, "stochastic", {"sigma", "Z", "paths", "budgets", "seed", "workers", "sample_paths"});
    StochasticSpec st;
    get_opt(o, "sigma", "stochastic", st.sigma);
    get_opt(o, "Z", "stochastic", st.z);
    get_opt(o, "paths", "stochastic", st.paths);
    get_opt(o, "budgets", "stochastic", st.budgets);
    get_opt(o, "seed", "stochastic", st.seed);
    get_opt(o, "workers", "stochastic", st.workers);
    get_opt(o, "sample_paths", "stochastic", st.sample_paths);
    s.stochastic = std::move(st);
  }
  get_opt(j, "output", "scenario", s.output);
  return s;
}

inline nlohmann::json scenario_to_json(const Scenario& s) {
  nlohmann::json j;
  if (!s.system.builtin.empty()) {
    nlohmann::json b{{"name", s.system.builtin}};
    if (s.system.builtin == "porous") {
      b["A"] = s.system.a;
      b["B"] = s.system.b;
      b["m"] = s.system.m;
    }
    j["system"] = {{"builtin", b}};
  } else if (!s.system.table_t.empty()) {
    j["system"] = {{"explicit",
                    {{"m", s.system.m},
                     {"table", {{"t", s.system.table_t}, {"A", s.system.table_a}, {"B", s.system.table_b}}}}}};
  } else {
    j["system"] = {{"explicit", {{"A", s.system.a}, {"B", s.system.b}, {"m", s.system.m}}}};
  }
  j["problem"] = {{"y0", s.problem.y0}, {"yT", s.problem.yT}, {"T", s.problem.T}, {"mode", s.problem.mode}};
  const auto& v = s.solver;
  j["solver"] = {{"max_iter", v.max_iter},         {"tol", v.tol},
                 {"early_stop", v.early_stop},     {"alpha", v.alpha},
                 {"expm", v.expm},                 {"taylor_order", v.taylor_order},
                 {"granularity", v.granularity},   {"dt", v.dt},
                 {"march", v.march},               {"k_cap", v.k_cap},
                 {"window_budget", v.window_budget}, {"integrator", v.integrator},
                 {"condition_cap", v.condition_cap}, {"eps_ladder", v.eps_ladder},
                 {"refine", v.refine},             {"keep_history", v.keep_history}};
  if (s.stochastic) {
    const auto& st = *s.stochastic;
    j["stochastic"] = {{"sigma", st.sigma},     {"paths", st.paths}, {"budgets", st.budgets},
                       {"seed", st.seed},       {"workers", st.workers}, {"sample_paths", st.sample_paths}};
    if (!st.z.empty()) j["stochastic"]["Z"] = st.z;
  }
  j["output"] = s.output;
  return j;
}

/// Builds the system with its noise intensity (zero when there is no stochastic block).
inline SDESystem build_system(const Scenario& s) {
  const double sigma = s.stochastic ? s.stochastic->sigma : 0.0;
  SDESystem sde;
  try {
    if (s.system.builtin == "avoid_crowding") {
      sde = builtin_avoid_crowding(sigma);
    } else if (!s.system.table_t.empty()) {
      std::vector<Matrix> as, bs;
      for (std::size_t i = 0; i < s.system.table_a.size(); ++i)
        as.push_back(detail::to_matrix(s.system.table_a[i], "system.explicit.table.A[" + std::to_string(i) + "]"));
      for (std::size_t i = 0; i < s.system.table_b.size(); ++i)
        bs.push_back(detail::to_matrix(s.system.table_b[i], "system.explicit.table.B[" + std::to_string(i) + "]"));
      sde.base = tabulated_system(s.system.table_t, std::move(as), std::move(bs), s.system.m);
    } else {
      const std::string where = s.system.builtin.empty() ? "system.explicit" : "system.builtin";
      sde.base = builtin_porous(detail::to_matrix(s.system.a, where + ".A"), detail::to_matrix(s.system.b, where + ".B"),
                                s.system.m);
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const ParameterError& e) {
    throw ConfigError("system", e.what());
  }
  if (s.system.builtin != "avoid_crowding") sde.noise = sigma * Matrix::Identity(sde.base.state_dim, sde.base.state_dim);
  if (s.stochastic && !s.stochastic->z.empty()) {
    sde.noise = detail::to_matrix(s.stochastic->z, "stochastic.Z");
    if (sde.noise.rows() != sde.base.state_dim) throw ConfigError("stochastic.Z", "must have d rows");
  }
  return sde;
}

inline ControlProblem build_problem(const Scenario& s, int state_dim) {
  ControlProblem p{detail::to_vector(s.problem.y0), detail::to_vector(s.problem.yT), s.problem.T,
                   s.problem.mode == "exact" ? TargetMode::exact : TargetMode::in_expectation};
  if (p.initial.size() != state_dim) throw ConfigError("problem.y0", "dimension does not match the system");
  if (p.target.size() != state_dim) throw ConfigError("problem.yT", "dimension does not match the system");
  try {
    p.validate(state_dim);
  } catch (const ParameterError& e) {
    throw ConfigError("problem", e.what());
  }
  return p;
}

inline SolverOptions build_options(const Scenario& s) {
  const auto& v = s.solver;
  SolverOptions o;
  o.max_iter = v.max_iter;
  o.tol = v.tol;
  o.early_stop = v.early_stop;
  o.alpha = v.alpha;
  if (v.expm == "accurate") {
    o.expm = ExpmMethod::accurate();
  } else if (v.expm == "taylor") {
    if (v.taylor_order < 1) throw ConfigError("solver.taylor_order", "must be >= 1");
    o.expm = ExpmMethod::taylor(v.taylor_order);
  } else {
    throw ConfigError("solver.expm", "must be 'accurate' or 'taylor'");
  }
  if (v.granularity == "step") o.granularity = Granularity::step;
  else if (v.granularity == "accumulated") o.granularity = Granularity::accumulated;
  else throw ConfigError("solver.granularity", "must be 'step' or 'accumulated'");
  if (v.integrator == "rk4") o.integrator = Integrator::rk4;
  else if (v.integrator == "euler") o.integrator = Integrator::euler;
  else throw ConfigError("solver.integrator", "must be 'rk4' or 'euler'");
  o.dt = v.dt;
  o.march = v.march;
  o.k_cap = v.k_cap;
  o.window_budget = v.window_budget;
  o.regularization.condition_cap = v.condition_cap;
  o.regularization.ladder = v.eps_ladder;
  if (v.refine < 0) throw ConfigError("solver.refine", "must be >= 0");
  o.regularization.refine = v.refine;
  o.keep_history = v.keep_history;
  try {
    o.validate();
  } catch (const ParameterError& e) {
    throw ConfigError("solver", e.what());
  }
  return o;
}

inline ExperimentOptions build_experiment(const Scenario& s) {
  if (!s.stochastic) throw ConfigError("stochastic", "block required for this command");
  const auto& st = *s.stochastic;
  if (st.paths < 1) throw ConfigError("stochastic.paths", "must be >= 1");
  if (st.budgets.empty()) throw ConfigError("stochastic.budgets", "must be non-empty");
  for (int b : st.budgets)
    if (b < 1) throw ConfigError("stochastic.budgets", "entries must be >= 1");
  if (!(st.sigma >= 0.0)) throw ConfigError("stochastic.sigma", "must be >= 0");
  return {st.paths, st.budgets, st.seed, st.workers, st.sample_paths};
}

/// Checks every cross-field constraint by building the runtime objects once.
inline void validate_scenario(const Scenario& s) {
  const SDESystem sde = build_system(s);
  build_problem(s, sde.base.state_dim);
  build_options(s);
  if (s.stochastic) build_experiment(s);
}

}  // namespace qlctrl::cli
