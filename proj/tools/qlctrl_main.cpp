// Command-line front end: check, solve, sde, expm-study.

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "qlctrl/runners.hpp"
#include "qlctrl/scenario.hpp"

namespace {

using qlctrl::cli::Scenario;

struct CommonFlags {
  std::string scenario;
  std::string out;
  std::uint64_t seed = 0;
  double dt = 0.0;
  int max_iter = 0;
  unsigned workers = 0;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--scenario", f.scenario, "Scenario JSON file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", f.out, "Output directory (default: the scenario's 'output' field)");
  cmd->add_option("--seed", f.seed, "Master seed for the stochastic experiment");
  cmd->add_option("--dt", f.dt, "Time step");
  cmd->add_option("--max-iter", f.max_iter, "Picard iteration budget");
  cmd->add_option("--workers", f.workers, "Worker threads for Monte Carlo paths");
}

Scenario load(const CommonFlags& f, const CLI::App* cmd) {
  std::ifstream is(f.scenario);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw qlctrl::ConfigError(f.scenario, e.what());
  }
  Scenario s = qlctrl::cli::scenario_from_json(j);
  if (!f.out.empty()) s.output = f.out;
  if (cmd->count("--dt")) s.solver.dt = f.dt;
  if (cmd->count("--max-iter")) s.solver.max_iter = f.max_iter;
  if (cmd->count("--seed") || cmd->count("--workers")) {
    if (!s.stochastic) s.stochastic.emplace();
    if (cmd->count("--seed")) s.stochastic->seed = f.seed;
    if (cmd->count("--workers")) s.stochastic->workers = f.workers;
  }
  qlctrl::cli::validate_scenario(s);
  return s;
}

std::vector<int> parse_orders(const std::string& text) {
  std::vector<int> orders;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      const int k = std::stoi(item, &used);
      if (used != item.size() || k < 1) throw std::invalid_argument(item);
      orders.push_back(k);
    } catch (const std::exception&) {
      throw qlctrl::ConfigError("--orders", "invalid taylor order '" + item + "'");
    }
  }
  return orders;
}

void print_vector(const char* label, const qlctrl::Vector& v) {
  std::fprintf(stderr, "%s (", label);
  for (Eigen::Index i = 0; i < v.size(); ++i) std::fprintf(stderr, "%s%.6g", i ? ", " : "", v[i]);
  std::fprintf(stderr, ")\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Exact and averaged control synthesis for quasilinear ODE/SDE systems"};
  app.require_subcommand(1);

  CommonFlags check_f, solve_f, sde_f, study_f;
  bool march = false;
  double alpha = 0.0;
  std::string orders = "2,5,6,7";
  std::string granularity = "accumulated";

  auto* check = app.add_subcommand("check", "Kalman rank, Gramian margin and coefficient diagnostics");
  add_common(check, check_f);
  auto* solve = app.add_subcommand("solve", "Exact control by fixed-point iteration");
  add_common(solve, solve_f);
  solve->add_flag("--march", march, "Use interval marching");
  solve->add_option("--alpha", alpha, "Final-state relaxation parameter in [0, 1)");
  auto* sde = app.add_subcommand("sde", "Averaged control Monte Carlo experiment");
  add_common(sde, sde_f);
  auto* study = app.add_subcommand("expm-study", "Reached finals under truncated matrix exponentials");
  add_common(study, study_f);
  study->add_option("--orders", orders, "Comma-separated Taylor orders");
  study->add_option("--granularity", granularity, "Where the exponential is truncated")
      ->check(CLI::IsMember({"step", "accumulated"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : qlctrl::cli::kConfigError;
  }

  try {
    qlctrl::cli::RunArtifacts art;
    Scenario s;
    if (*check) {
      s = load(check_f, check);
      art = qlctrl::cli::run_check(s);
    } else if (*solve) {
      s = load(solve_f, solve);
      if (solve->count("--alpha")) {
        s.solver.alpha = alpha;
        qlctrl::cli::validate_scenario(s);
      }
      art = qlctrl::cli::run_solve(s, march);
    } else if (*sde) {
      s = load(sde_f, sde);
      art = qlctrl::cli::run_sde(s);
    } else {
      s = load(study_f, study);
      art = qlctrl::cli::run_expm_study(s, parse_orders(orders),
                                        granularity == "step" ? qlctrl::Granularity::step
                                                              : qlctrl::Granularity::accumulated);
    }
    qlctrl::cli::write_artifacts(art, s.output);
    std::cout << art.summary.dump(2) << "\n";
    return art.exit_code;
  } catch (const qlctrl::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return qlctrl::cli::kConfigError;
  } catch (const qlctrl::UncontrollableError& e) {
    std::fprintf(stderr, "uncontrollable: %s\n", e.what());
    print_vector("null-space witness", e.witness());
    return qlctrl::cli::kUncontrollable;
  } catch (const qlctrl::DivergenceError& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return qlctrl::cli::kDiverged;
  } catch (const qlctrl::OverflowError& e) {
    std::fprintf(stderr, "overflow: %s\n", e.what());
    return qlctrl::cli::kDiverged;
  } catch (const qlctrl::NonTerminationError& e) {
    std::fprintf(stderr, "did not terminate: %s\n", e.what());
    return qlctrl::cli::kDiverged;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return qlctrl::cli::kFailure;
  }
}
