#include <doctest.h>

#include "neudye/integrators.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>

using namespace neudye;

namespace {

const FaultScenario kNoFault{-1, 0.1, 0.2, 1.0, 0};

double oscillator_error(double h) {
  const TimeGrid grid{0.0, 2.0, h};
  VectorXd x0(2);
  x0 << 1.0, 0.0;
  StepOptions opt;
  opt.tolerance = 1e-14;
  const Trajectory tr = integrate(
      [](const VectorXd& x, FaultStage) {
        VectorXd d(2);
        d << x[1], -x[0];
        return d;
      },
      x0, grid, kNoFault, opt);
  VectorXd exact(2);
  exact << std::cos(2.0), -std::sin(2.0);
  return (tr.states.back() - exact).norm();
}

}  // namespace

TEST_CASE("trapezoidal rule is second order on the harmonic oscillator") {
  const double e4 = oscillator_error(4e-3), e2 = oscillator_error(2e-3), e1 = oscillator_error(1e-3);
  const double slope = (std::log(e4) - std::log(e1)) / (std::log(4e-3) - std::log(1e-3));
  CHECK(slope >= 1.9);
  CHECK(slope <= 2.1);
  CHECK(e2 < e4);
  CHECK(e1 < e2);
}

TEST_CASE("trapezoidal rule on a scalar decay matches its closed form") {
  // x' = -a x: one step multiplies by (1 - a h/2) / (1 + a h/2).
  const double a = 3.0, h = 0.01;
  StepOptions opt;
  opt.tolerance = 1e-15;
  VectorXd x(1);
  x << 2.0;
  const VectorXd y = trapezoidal_step([&](const VectorXd& z, double) { return VectorXd(-a * z); }, x, 0.0, h, opt);
  CHECK(y[0] == doctest::Approx(2.0 * (1 - a * h / 2) / (1 + a * h / 2)).epsilon(1e-13));
}

TEST_CASE("linear system: Cayley recursion and matrix exponential") {
  MatrixXd A(3, 3);
  A << -0.5, 2.0, 0.0, -2.0, -0.5, 0.3, 0.1, 0.0, -1.0;
  VectorXd x0(3);
  x0 << 1.0, -0.5, 0.25;
  const TimeGrid grid{0.0, 1.0, 1e-3};
  StepOptions opt;
  opt.tolerance = 1e-14;
  const Trajectory tr = integrate([&](const VectorXd& x, FaultStage) { return VectorXd(A * x); }, x0, grid, kNoFault, opt);
  const MatrixXd I = MatrixXd::Identity(3, 3);
  const MatrixXd C = (I - 0.5 * grid.h * A).inverse() * (I + 0.5 * grid.h * A);
  VectorXd x = x0;
  for (Index i = 0; i < grid.steps(); ++i) x = C * x;
  CHECK((tr.states.back() - x).norm() <= 1e-10);
  const VectorXd exact = (A * 1.0).exp() * x0;
  // Global error of a second-order method at h = 1e-3.
  CHECK((tr.states.back() - exact).norm() <= 1e-6);
}

TEST_CASE("events must sit on the grid and stages switch at the left endpoint") {
  FaultScenario sc{3, 0.1005, 0.2, 1.0, 0};
  VectorXd x0 = VectorXd::Zero(1);
  auto f = [](const VectorXd&, FaultStage s) { return VectorXd::Constant(1, s == FaultStage::Fault ? 1.0 : 0.0); };
  CHECK_THROWS_AS(integrate(f, x0, {0.0, 1.0, 1e-3}, sc), Error);
  sc.t_start = 0.1;
  const Trajectory tr = integrate(f, x0, {0.0, 1.0, 1e-3}, sc);
  // Rate 1 during [0.1, 0.2): the state grows by exactly the fault duration.
  CHECK(tr.states.back()[0] == doctest::Approx(0.1).epsilon(1e-9));
  CHECK(tr.states[100][0] == doctest::Approx(0.0));
  CHECK(tr.states[101][0] == doctest::Approx(1e-3).epsilon(1e-9));
}

TEST_CASE("non-finite derivatives raise a divergence error") {
  auto f = [](const VectorXd& x, FaultStage) { return VectorXd(x.array().square() * 1e308); };
  VectorXd x0 = VectorXd::Constant(1, 10.0);
  try {
    integrate(f, x0, {0.0, 1.0, 1e-3}, kNoFault);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.numerical());
  }
}

TEST_CASE("grid validation") {
  CHECK_THROWS_AS((TimeGrid{0.0, 1.0, 0.3}.validate()), Error);
  CHECK_THROWS_AS((TimeGrid{0.0, 1.0, -1e-3}.validate()), Error);
  CHECK((TimeGrid{0.0, 1.0, 1e-3}.steps()) == 1000);
}

TEST_CASE("adjoint sweep: scalar closed forms") {
  // x' = theta x, L = x_n. dL/dx_0 = c^n and dL/dtheta = n c^(n-1) dc/dtheta x_0
  // with c = (1 + theta h/2) / (1 - theta h/2).
  const double theta = -0.7, h = 0.01, x0 = 1.3;
  const Index n = 50;
  const double c = (1 + theta * h / 2) / (1 - theta * h / 2);
  const double dc = h / std::pow(1 - theta * h / 2, 2);
  std::vector<double> xs{x0};
  for (Index i = 0; i < n; ++i) xs.push_back(c * xs.back());

  AdjointSweep term;
  term.adjoint = VectorXd::Ones(1);
  term.gradient = VectorXd::Zero(1);
  const AdjointSweep s = integrate_adjoint_segment(
      [&](Index, Index) { return MatrixXd::Constant(1, 1, theta); },
      [&](Index node, Index, const VectorXd& w) { return VectorXd::Constant(1, w[0] * xs[node]); }, term, 0, n, h);
  CHECK(s.adjoint[0] == doctest::Approx(std::pow(c, n)).epsilon(1e-12));
  CHECK(s.gradient[0] == doctest::Approx(n * std::pow(c, n - 1) * dc * x0).epsilon(1e-10));
}

TEST_CASE("adjoint sweep: single step against a hand computation") {
  // One step of x' = A x: dL/dx_0 = ((I - hA/2)^-1 (I + hA/2))^T g.
  MatrixXd A(2, 2);
  A << 0.0, 1.0, -4.0, -0.2;
  const double h = 0.05;
  VectorXd g(2);
  g << 0.3, -1.1;
  AdjointSweep term;
  term.adjoint = g;
  const AdjointSweep s =
      integrate_adjoint_segment([&](Index, Index) { return A; }, [](Index, Index, const VectorXd&) { return VectorXd(); },
                                term, 0, 1, h);
  const MatrixXd I = MatrixXd::Identity(2, 2);
  const VectorXd ref = ((I - 0.5 * h * A).inverse() * (I + 0.5 * h * A)).transpose() * g;
  CHECK((s.adjoint - ref).norm() <= 1e-14);
}
