#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "qlctrl/systems.hpp"

using namespace qlctrl;

TEST(Grid, StepDividesHorizon) {
  const Grid g(0.5, 1e-3);
  EXPECT_EQ(g.steps(), 500u);
  EXPECT_EQ(g.nodes(), 501u);
  EXPECT_DOUBLE_EQ(g.t(g.steps()), 0.5);
  EXPECT_NEAR(g.dt() * static_cast<double>(g.steps()), 0.5, 1e-15);
}

TEST(Grid, TrapezoidWeightsSumToHorizon) {
  const Grid g(1.3, 0.01);
  double sum = 0.0;
  for (std::size_t k = 0; k < g.nodes(); ++k) sum += g.weight(k);
  EXPECT_NEAR(sum, 1.3, 1e-13);
  EXPECT_DOUBLE_EQ(g.weight(0), 0.5 * g.dt());
}

TEST(Grid, RejectsTooFewSteps) {
  EXPECT_THROW(Grid(1.0, 0.75), ParameterError);
  EXPECT_THROW(Grid(0.0, 0.1), ParameterError);
  EXPECT_THROW(Grid(1.0, -0.1), ParameterError);
  EXPECT_THROW(Grid::with_steps(1.0, 1), ParameterError);
  EXPECT_NO_THROW(Grid(1.0, 0.5));
}

TEST(AvoidCrowding, DriftMatchesModel) {
  const SDESystem sde = builtin_avoid_crowding(0.1);
  Vector y(2);
  y << 1.0, 3.0;
  Vector u(1);
  u << 0.5;
  const Vector f = sde.base.rhs(0.0, y, u);
  // |y1+y2|(-2y1+2y2) + u, |y1+y2|(y1-y2)
  EXPECT_NEAR(f[0], 4.0 * 4.0 + 0.5, 1e-14);
  EXPECT_NEAR(f[1], 4.0 * -2.0, 1e-14);
  EXPECT_EQ(sde.noise_dim(), 2);
  EXPECT_DOUBLE_EQ(sde.noise(0, 0), 0.1);
  EXPECT_DOUBLE_EQ(sde.noise(0, 1), 0.0);
}

TEST(AvoidCrowding, RejectsNegativeSigma) { EXPECT_THROW(builtin_avoid_crowding(-1.0), ParameterError); }

TEST(Porous, ScalesByNormPower) {
  Matrix a = Matrix::Identity(2, 2);
  Matrix b(2, 1);
  b << 0.0, 1.0;
  const auto sys = builtin_porous(a, b, 2.0);
  Vector y(2);
  y << 3.0, 4.0;
  EXPECT_NEAR(sys.eval_drift(0.0, y)(0, 0), 25.0, 1e-12);
  const auto lin = builtin_porous(a, b, 0.0);
  EXPECT_NEAR(lin.eval_drift(0.0, Vector::Zero(2))(0, 0), 1.0, 0.0);
  EXPECT_THROW(builtin_porous(a, b, -0.5), ParameterError);
}

TEST(Tabulated, InterpolatesAndClamps) {
  std::vector<Matrix> as{Matrix::Constant(1, 1, 1.0), Matrix::Constant(1, 1, 3.0)};
  std::vector<Matrix> bs{Matrix::Constant(1, 1, 2.0), Matrix::Constant(1, 1, 2.0)};
  const auto sys = tabulated_system({0.0, 1.0}, as, bs, 0.0);
  const Vector y = Vector::Ones(1);
  EXPECT_NEAR(sys.eval_drift(0.25, y)(0, 0), 1.5, 1e-15);
  EXPECT_NEAR(sys.eval_drift(-1.0, y)(0, 0), 1.0, 0.0);
  EXPECT_NEAR(sys.eval_drift(7.0, y)(0, 0), 3.0, 0.0);
  EXPECT_THROW(tabulated_system({1.0, 0.0}, as, bs, 0.0), ParameterError);
}

TEST(Freeze, SamplesNegatedDrift) {
  const SDESystem sde = builtin_avoid_crowding(0.0);
  const Grid g(0.5, 0.1);
  StateTrajectory v(g.nodes(), Vector::Ones(2));
  const LTVSystem ltv = freeze(sde.base, g, v);
  ASSERT_EQ(ltv.drift.size(), g.nodes());
  // -A = |y1+y2| [[-2,2],[1,-1]] at y = (1,1)
  EXPECT_NEAR(ltv.drift[3](0, 0), -4.0, 1e-15);
  EXPECT_NEAR(ltv.drift[3](1, 0), 2.0, 1e-15);
  EXPECT_NEAR(ltv.input[0](0, 0), 1.0, 0.0);
}

TEST(Freeze, NamesTheOffendingNode) {
  QuasilinearSystem sys;
  sys.state_dim = 1;
  sys.input_dim = 1;
  sys.drift = [](double t, const Vector&) -> Matrix {
    return Matrix::Constant(1, 1, t > 0.25 ? std::numeric_limits<double>::quiet_NaN() : 1.0);
  };
  sys.input = [](double, const Vector&) -> Matrix { return Matrix::Ones(1, 1); };
  const Grid g(1.0, 0.1);
  try {
    freeze(sys, g, StateTrajectory(g.nodes(), Vector::Zero(1)));
    FAIL() << "expected EvaluationError";
  } catch (const EvaluationError& e) {
    EXPECT_NE(std::string(e.what()).find("node 3"), std::string::npos) << e.what();
  }
}

TEST(Freeze, WrongShapeIsEvaluationError) {
  QuasilinearSystem sys;
  sys.state_dim = 2;
  sys.input_dim = 1;
  sys.drift = [](double, const Vector&) -> Matrix { return Matrix::Identity(3, 3); };
  sys.input = [](double, const Vector&) -> Matrix { return Matrix::Ones(2, 1); };
  const Grid g(1.0, 0.5);
  EXPECT_THROW(freeze(sys, g, StateTrajectory(g.nodes(), Vector::Zero(2))), EvaluationError);
}

TEST(ControlProblem, Validates) {
  ControlProblem p{Vector::Ones(2), Vector::Ones(2), 0.5, TargetMode::exact};
  EXPECT_NO_THROW(p.validate(2));
  EXPECT_THROW(p.validate(3), ParameterError);
  p.horizon = -1.0;
  EXPECT_THROW(p.validate(2), ParameterError);
}

TEST(ValidateSystem, FlagsAsymmetricDrift) {
  // Avoid-crowding drift is neither symmetric nor non-negative definite.
  const auto diag = validate_system(builtin_avoid_crowding(0.1).base, 50);
  EXPECT_TRUE(diag.symmetry_violated);
  EXPECT_TRUE(diag.definiteness_violated);
  EXPECT_NEAR(diag.input_bound, 1.0, 1e-14);
}

TEST(ValidateSystem, AcceptsSymmetricPositive) {
  Matrix a(2, 2);
  a << 2.0, 1.0, 1.0, 2.0;
  const auto diag = validate_system(builtin_porous(a, Matrix::Identity(2, 2), 1.0), 50);
  EXPECT_FALSE(diag.symmetry_violated);
  EXPECT_FALSE(diag.definiteness_violated);
  EXPECT_GE(diag.min_sym_eigenvalue, 0.0);
}
