// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "qlctrl/qlctrl.hpp"
#include "qlctrl/runners.hpp"
#include "qlctrl/scenario.hpp"

using namespace qlctrl;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

std::string fmt_vec(const Vector& v) {
  std::string s = "(";
  for (Eigen::Index i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt("%.6f", v[i]);
  return s + ")";
}

Vector vec2(double a, double b) { return (Vector(2) << a, b).finished(); }

Matrix random_matrix(std::mt19937_64& gen, int r, int c, double scale) {
  std::normal_distribution<double> nd(0.0, scale);
  Matrix m(r, c);
  for (int i = 0; i < r * c; ++i) m.data()[i] = nd(gen);
  return m;
}

double rel_sup_diff(const std::vector<Vector>& a, const std::vector<Vector>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    num = std::max(num, (a[k] - b[k]).lpNorm<Eigen::Infinity>());
    den = std::max(den, b[k].lpNorm<Eigen::Infinity>());
  }
  return num / den;
}

double terminal_error(const Vector& reached, const Vector& target) {
  return (reached - target).norm() / (1.0 + target.norm());
}

// Commuting LTV family Â(t) = c(t) M with Kalman-controllable (M, B).
struct LinearCase {
  LTVSystem ltv;
  ControlProblem problem;
};

std::vector<LinearCase> linear_cases(std::size_t count, double dt, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<int> dim(1, 4), inputs(1, 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<LinearCase> out;
  while (out.size() < count) {
    const int d = dim(gen);
    const int n = std::min(d, inputs(gen));
    const Matrix m = random_matrix(gen, d, d, 1.0 / std::sqrt(static_cast<double>(d)));
    const Matrix b = random_matrix(gen, d, n, 1.0);
    if (!kalman_rank(m, b).controllable) continue;
    const double amp = 0.8 * unit(gen), freq = 1.0 + 5.0 * unit(gen), phase = 6.283 * unit(gen);
    const double horizon = 0.5 + unit(gen);
    const Grid grid(horizon, dt);
    LTVSystem ltv{grid, {}, {}};
    for (std::size_t k = 0; k < grid.nodes(); ++k) {
      ltv.drift.push_back((1.0 + amp * std::sin(freq * grid.t(k) + phase)) * m);
      ltv.input.push_back(b);
    }
    ControlProblem p{random_matrix(gen, d, 1, 1.0), random_matrix(gen, d, 1, 1.0), horizon, TargetMode::exact};
    out.push_back({std::move(ltv), std::move(p)});
  }
  return out;
}

const std::vector<LinearCase>& shared_cases() {
  static const std::vector<LinearCase> cases = linear_cases(100, 1e-4, 20240611);
  return cases;
}

Outcome criterion1() {
  double worst = 0.0;
  for (const auto& c : shared_cases()) {
    const auto u = min_energy_control(transition(c.ltv, ExpmMethod::accurate()), c.ltv, c.problem);
    worst = std::max(worst, terminal_error(simulate(c.ltv, u, c.problem.initial).back(), c.problem.target));
  }
  return {worst <= 1e-6, "100 systems, worst relative terminal error " + fmt("%.2e", worst) + " (<= 1e-6)"};
}

Outcome criterion2() {
  double worst = 0.0;
  for (const auto& c : shared_cases()) {
    const auto u_g = min_energy_control(transition(c.ltv, ExpmMethod::accurate()), c.ltv, c.problem);
    const auto u_a = adjoint_control(c.ltv, c.problem).first;
    worst = std::max(worst, rel_sup_diff(u_a.values, u_g.values));
  }
  return {worst <= 1e-6, "100 systems, worst |u_adj - u_gram|/|u_gram| " + fmt("%.2e", worst) + " (<= 1e-6)"};
}

Outcome criterion3() {
  std::mt19937_64 gen(777);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> dim(2, 4);
  const double dt = 1e-4;
  double min_lambda = std::numeric_limits<double>::infinity();
  double worst_err = 0.0;
  int pairs = 0;
  while (pairs < 50) {
    const int d = dim(gen);
    const int n = 1 + (d > 2 ? static_cast<int>(unit(gen) * 2.0) : 0);
    const Matrix a = random_matrix(gen, d, d, 1.0 / std::sqrt(static_cast<double>(d)));
    const Matrix b = random_matrix(gen, d, n, 1.0);
    if (!kalman_rank(a, b).controllable) continue;
    ++pairs;
    const auto sys = builtin_porous(a, b, 2.0 * unit(gen));
    for (int profile = 0; profile < 10; ++profile) {
      const double horizon = 0.5 + 0.5 * unit(gen);
      const Grid grid(horizon, dt);
      const Vector from = random_matrix(gen, d, 1, 1.0), to = random_matrix(gen, d, 1, 1.0);
      const Vector wobble = random_matrix(gen, d, 1, 0.3);
      const double freq = 1.0 + 4.0 * unit(gen);
      StateTrajectory v;
      for (std::size_t k = 0; k < grid.nodes(); ++k) {
        const double s = grid.t(k) / horizon;
        v.push_back((1.0 - s) * from + s * to + std::sin(freq * grid.t(k)) * wobble);
      }
      const LTVSystem ltv = freeze(sys, grid, v);
      const TransitionSet tset = transition(ltv, ExpmMethod::accurate());
      min_lambda = std::min(min_lambda, gramian(tset, ltv).lambda_min);
      const ControlProblem p{random_matrix(gen, d, 1, 1.0), random_matrix(gen, d, 1, 1.0), horizon,
                             TargetMode::exact};
      const auto u = min_energy_control(tset, ltv, p);
      worst_err = std::max(worst_err, terminal_error(simulate(ltv, u, p.initial).back(), p.target));
    }
  }
  // Rank-deficient pairs: B inside an invariant subspace of A, rotated by a random orthogonal basis.
  double worst_ratio = 0.0;
  for (int i = 0; i < 20; ++i) {
    const int d = dim(gen);
    const int r = 1 + static_cast<int>(unit(gen) * (d - 1));
    Matrix block = random_matrix(gen, d, d, 1.0);
    block.bottomLeftCorner(d - r, r).setZero();
    Matrix b0 = Matrix::Zero(d, 1);
    b0.topRows(r) = random_matrix(gen, r, 1, 1.0);
    const Matrix q = Eigen::HouseholderQR<Matrix>(random_matrix(gen, d, d, 1.0)).householderQ();
    const Matrix a = q * block * q.transpose();
    const Matrix b = q * b0;
    const Grid grid(1.0, 1e-3);
    const LTVSystem ltv{grid, std::vector<Matrix>(grid.nodes(), -a), std::vector<Matrix>(grid.nodes(), b)};
    const auto rep = gramian(transition(ltv, ExpmMethod::accurate()), ltv);
    worst_ratio = std::max(worst_ratio, rep.lambda_min / rep.lambda_max);
  }
  const bool pass = min_lambda > 0.0 && worst_err <= 1e-6 && worst_ratio <= 1e-10;
  return {pass, "500 frozen profiles: min lambda_min " + fmt("%.2e", min_lambda) + ", worst terminal error " +
                    fmt("%.2e", worst_err) + "; 20 deficient pairs: worst lambda_min/lambda_max " +
                    fmt("%.2e", worst_ratio)};
}

ControlProblem crowding_problem() { return {vec2(1, 1), vec2(2, 2), 0.5, TargetMode::exact}; }

Outcome criterion4() {
  const auto sys = builtin_avoid_crowding(0.0).base;
  SolverOptions o;
  o.dt = 1e-3;
  o.early_stop = false;
  o.max_iter = 6;
  const auto plain = picard_solve(sys, crowding_problem(), o);
  o.alpha = 0.1;
  const auto relaxed = picard_solve(sys, crowding_problem(), o);
  const double delta45 = plain.deltas.at(4);
  const double miss0 = (plain.final_state() - vec2(2, 2)).lpNorm<Eigen::Infinity>();
  const double miss1 = (relaxed.final_state() - vec2(2, 2)).lpNorm<Eigen::Infinity>();
  const bool pass = delta45 < 1e-2 && miss0 <= 0.1 && miss1 <= 0.02;
  return {pass, "delta(4->5) " + fmt("%.2e", delta45) + ", final alpha=0 " + fmt_vec(plain.final_state()) +
                    ", final alpha=0.1 " + fmt_vec(relaxed.final_state())};
}

Outcome criterion5() {
  cli::Scenario s;
  s.system.builtin = "avoid_crowding";
  s.problem = {{1, 1}, {2, 2}, 0.5, "exact"};
  s.solver.dt = 1e-3;
  s.solver.early_stop = false;
  const auto rows = cli::expm_study(s, {2, 5, 6, 7}, Granularity::accumulated);
  const double e2 = rows[1].error, e5 = rows[2].error, e6 = rows[3].error;
  const double f67 = (rows[3].final_state - rows[4].final_state).lpNorm<Eigen::Infinity>();
  const bool pass = e2 > e5 && e5 > e6 && f67 <= 0.05;
  const Vector reported[3] = {vec2(1.7640, 2.1919), vec2(1.9851, 2.1195), vec2(2.0209, 2.1070)};
  std::string info;
  for (int i = 0; i < 3; ++i) {
    const double gap = (rows[1 + i].final_state - reported[i]).lpNorm<Eigen::Infinity>();
    info += " " + rows[1 + i].method + "=" + fmt_vec(rows[1 + i].final_state) + (gap <= 0.15 ? " within" : " outside") +
            " 0.15 of " + fmt_vec(reported[i]) + ";";
  }
  return {pass, "errors " + fmt("%.4f", e2) + " > " + fmt("%.4f", e5) + " > " + fmt("%.4f", e6) + ", |f6-f7| " +
                    fmt("%.4f", f67) + ". informational:" + info};
}

Outcome criterion6() {
  SolverOptions o;
  o.dt = 1e-3;
  o.early_stop = false;
  ExperimentOptions e;
  e.paths = 20;
  e.budgets = {1, 2, 3, 4, 5};
  e.seed = 2024;
  e.workers = 4;
  const auto sde = builtin_avoid_crowding(0.1);
  ControlProblem p = crowding_problem();
  p.mode = TargetMode::in_expectation;
  const auto mc = averaged_control_experiment(sde, p, o, e);
  const double pooled_gap = (mc.pooled_mean - vec2(2, 2)).lpNorm<Eigen::Infinity>();

  // Mean steering on the frozen linear SDE along the straight line from y0 to yT.
  const Grid grid(0.5, 1e-4);
  const LTVSystem ltv = freeze(sde.base, grid, detail::straight_line(grid, p.initial, p.target));
  const auto u = min_energy_control(transition(ltv, ExpmMethod::accurate()), ltv, {p.initial, p.target, 0.5});
  const std::size_t n = 10000;
  const auto finals = frozen_terminal_states(ltv, sde.noise, u, p.initial, 4242, n, 4);
  const Vector mean = expectation(finals);
  bool steer_ok = true;
  std::string steer;
  for (int i = 0; i < 2; ++i) {
    double ss = 0.0;
    for (const auto& f : finals) ss += (f[i] - mean[i]) * (f[i] - mean[i]);
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    const double bound = 4.0 * sd / std::sqrt(static_cast<double>(n));
    const double gap = std::abs(mean[i] - p.target[i]);
    steer_ok = steer_ok && gap <= bound;
    steer += " |dy" + std::to_string(i + 1) + "| " + fmt("%.2e", gap) + " <= " + fmt("%.2e", bound) + ";";
  }
  const bool pass = pooled_gap <= 0.25 && steer_ok && mc.failures() == 0;
  return {pass, "pooled mean " + fmt_vec(mc.pooled_mean) + " (" + std::to_string(mc.failures()) +
                    " failed paths), frozen mean steering N=1e4:" + steer};
}

Outcome criterion7() {
  const auto sys = builtin_avoid_crowding(0.0).base;
  SolverOptions o;
  o.dt = 1e-3;
  const ControlProblem scaled{vec2(10, 10), vec2(20, 20), 0.5, TargetMode::exact};
  const auto marched = march_solve(sys, scaled, o);
  const double march_err =
      (marched.final_state() - scaled.target).lpNorm<Eigen::Infinity>() / scaled.target.lpNorm<Eigen::Infinity>();
  std::string single_outcome;
  bool single_failed = false;
  try {
    const auto single = picard_solve(sys, scaled, o);
    const double err =
        (single.final_state() - scaled.target).lpNorm<Eigen::Infinity>() / scaled.target.lpNorm<Eigen::Infinity>();
    single_failed = !single.converged || err > 1e-2;
    single_outcome = "single-shot converged=" + std::string(single.converged ? "yes" : "no") + " err " + fmt("%.2e", err);
  } catch (const Error& ex) {
    single_failed = true;
    single_outcome = std::string("single-shot raised: ") + std::string(ex.what()).substr(0, 60);
  }
  const auto a = picard_solve(sys, crowding_problem(), o);
  const auto b = march_solve(sys, crowding_problem(), o);
  const double agree = (a.final_state() - b.final_state()).lpNorm<Eigen::Infinity>();
  const bool pass = march_err <= 1e-2 && single_failed && agree <= 1e-2;
  return {pass, "scaled march " + fmt_vec(marched.final_state()) + " rel err " + fmt("%.2e", march_err) + " in " +
                    std::to_string(marched.windows.size()) + " windows; " + single_outcome +
                    "; base instance march vs single " + fmt("%.2e", agree)};
}

Outcome criterion8() {
  const double sigma = 0.3, horizon = 1.0;
  const SDESystem pure{builtin_porous(Matrix::Zero(1, 1), Matrix::Zero(1, 1), 0.0), Matrix::Constant(1, 1, sigma)};
  const Grid grid(horizon, 1e-2);
  const auto u = zero_control(grid, 1);
  const std::size_t n = 100000;
  auto run = [&](unsigned workers) {
    std::vector<Vector> finals(n);
    detail::parallel_for(n, workers, [&](std::size_t i) {
      finals[i] = euler_maruyama(pure, u, Vector::Zero(1), brownian_increments(grid, 31337, i, 1)).back();
    });
    return finals;
  };
  const auto finals = run(1);
  const double mean = expectation(finals)[0];
  double ss = 0.0;
  for (const auto& f : finals) ss += (f[0] - mean) * (f[0] - mean);
  const double var = ss / static_cast<double>(n - 1);
  const double rel = std::abs(var / (horizon * sigma * sigma) - 1.0);
  bool identical = run(2) == finals && run(8) == finals;

  // Full Monte Carlo reports through the CLI runner, compared byte for byte.
  cli::Scenario s;
  s.system.builtin = "avoid_crowding";
  s.problem = {{1, 1}, {2, 2}, 0.5, "in_expectation"};
  s.solver.dt = 2e-3;
  s.stochastic = cli::StochasticSpec{};
  s.stochastic->sigma = 0.1;
  s.stochastic->paths = 8;
  s.stochastic->budgets = {1, 3};
  s.stochastic->seed = 5;
  auto report = [&](unsigned workers) {
    s.stochastic->workers = workers;
    const auto art = cli::run_sde(s);
    std::string all = art.summary.dump();
    for (const auto& [name, content] : art.files)
      if (name != "scenario.json") all += name + content;
    return all;
  };
  const std::string r1 = report(1);
  identical = identical && report(2) == r1 && report(8) == r1;
  return {rel <= 0.05 && identical, "variance " + fmt("%.5f", var) + " vs T*sigma^2 " +
                                        fmt("%.5f", horizon * sigma * sigma) + " (rel " + fmt("%.4f", rel) +
                                        "), reports across 1/2/8 workers " + (identical ? "identical" : "DIFFER")};
}

}  // namespace

int main() {
  std::setvbuf(stdout, nullptr, _IONBF, 0);
  struct Item {
    int id;
    const char* name;
    double budget_s;
    std::function<Outcome()> run;
  };
  const std::vector<Item> items{
      {1, "linear exactness", 60, criterion1},      {2, "route equivalence", 60, criterion2},
      {3, "kalman rank property", 60, criterion3},  {4, "avoid-crowding example", 10, criterion4},
      {5, "expm truncation study", 30, criterion5}, {6, "averaged control", 300, criterion6},
      {7, "globalization", 60, criterion7},         {8, "stochastic kernel", 60, criterion8},
  };
  shared_cases();
  int failed = 0;
  for (const auto& item : items) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = item.run();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= item.budget_s;
    const bool pass = out.pass && in_time;
    failed += pass ? 0 : 1;
    std::printf("criterion %d %s: %s | %s | %.1fs of %.0fs\n", item.id, item.name, pass ? "PASS" : "FAIL",
                out.detail.c_str(), secs, item.budget_s);
  }
  std::printf("%s: %d of %zu criteria failed\n", failed ? "FAIL" : "PASS", failed, items.size());
  return failed ? 1 : 0;
}
