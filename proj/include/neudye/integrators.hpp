#pragma once

#include "neudye/common.hpp"
#include "neudye/grid_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace neudye {

/// Uniform time grid t_i = t0 + i*h, i = 0..n.
struct TimeGrid {
  double t0 = 0.0;
  double tn = 1.0;
  double h = 1e-3;

  Index steps() const { return static_cast<Index>(std::llround((tn - t0) / h)); }
  double time(Index i) const { return t0 + static_cast<double>(i) * h; }
  /// Index of the grid point at `t`; throws Config when `t` is off-grid.
  Index index_of(double t) const;
  void validate() const;
};

struct Trajectory {
  VectorXd times;
  std::vector<VectorXd> states;

  Index size() const { return static_cast<Index>(states.size()); }
};

struct StepOptions {
  double tolerance = 1e-10;  // max-norm of the corrector update
  int max_iterations = 50;
};

namespace detail {

inline bool all_finite(const VectorXd& v) { return v.allFinite(); }

[[noreturn]] inline void throw_nonconvergence(double residual, double t) {
  throw Error(ErrorKind::NonConvergence, "trapezoidal corrector did not converge at t=" + std::to_string(t) +
                                             " (residual " + std::to_string(residual) + ")");
}

}  // namespace detail

/// One step of the implicit trapezoidal rule,
///   x = x_i + h/2 (f(x_i, t_i) + f(x, t_i + h)),
/// solved by fixed-point iteration from the explicit Euler predictor. The
/// relaxation factor halves whenever the corrector residual grows.
template <typename F>
VectorXd trapezoidal_step(F&& f, const VectorXd& x, double t, double h, const StepOptions& opt = {}) {
  if (!detail::all_finite(x))
    throw Error(ErrorKind::Divergence, "non-finite state at t=" + std::to_string(t));
  const VectorXd f0 = f(x, t);
  if (!detail::all_finite(f0))
    throw Error(ErrorKind::Divergence, "non-finite derivative at t=" + std::to_string(t));
  const VectorXd base = x + 0.5 * h * f0;
  VectorXd next = x + h * f0;
  double relax = 1.0;
  double last = std::numeric_limits<double>::infinity();
  for (int it = 0; it < opt.max_iterations; ++it) {
    const VectorXd target = base + 0.5 * h * f(next, t + h);
    if (!detail::all_finite(target))
      throw Error(ErrorKind::Divergence, "non-finite corrector iterate at t=" + std::to_string(t + h));
    const double residual = (target - next).lpNorm<Eigen::Infinity>();
    if (residual < opt.tolerance) return target;
    if (residual > last) relax = std::max(0.05, 0.5 * relax);
    last = residual;
    next += relax * (target - next);
  }
  detail::throw_nonconvergence(last, t + h);
}

/// Fixed-step trapezoidal integration over `grid` with `f(x, stage)`; the
/// stage of each step is the one active at its left endpoint.
template <typename F>
Trajectory integrate(F&& f, const VectorXd& x0, const TimeGrid& grid, const FaultScenario& events,
                     const StepOptions& opt = {}) {
  grid.validate();
  if (events.has_fault()) {
    grid.index_of(events.t_start);
    grid.index_of(events.t_clear);
  }
  const Index n = grid.steps();
  Trajectory traj;
  traj.times.resize(n + 1);
  traj.states.reserve(static_cast<std::size_t>(n + 1));
  traj.states.push_back(x0);
  traj.times[0] = grid.t0;
  for (Index i = 0; i < n; ++i) {
    const double t = grid.time(i);
    const FaultStage stage = events.stage_at(t);
    auto fs = [&](const VectorXd& x, double) { return f(x, stage); };
    try {
      traj.states.push_back(trapezoidal_step(fs, traj.states.back(), t, grid.h, opt));
    } catch (const Error& e) {
      throw Error(e.kind(), std::string(e.what()) + " [step " + std::to_string(i) + "]");
    }
    traj.times[i + 1] = grid.time(i + 1);
  }
  return traj;
}

/// Adjoint state carried by the backward sweep: the adjoint of the stacked
/// state and the accumulated parameter gradient.
struct AdjointSweep {
  VectorXd adjoint;
  VectorXd gradient;
};

/// Backward sweep of the trapezoidal rule over nodes [first, last].
///
/// `terminal.adjoint` is the adjoint at `last` after its observation jump.
/// The result is the adjoint at `first` before its jump, with the gradient
/// accumulated over the segment. Each step solves
///   lam_k = (I - h/2 A_k^T)^{-1} adj_k,   adj_{k-1} = (I + h/2 B_{k-1}^T) lam_k,
///   grad += h/2 (vjp(x_{k-1}) + vjp(x_k)) applied to lam_k,
/// where A_k and B_{k-1} are the state Jacobians at the stored forward states
/// under the stage of step k-1. This is the exact transpose of the forward
/// trapezoidal recursion, so gradients match finite differences of the
/// discrete loss.
///
/// `jacobian(node, step)` returns df/dx at x_node with the stage of `step`;
/// `param_vjp(node, step, w)` returns w^T df/dtheta there.
template <typename Jac, typename Vjp>
AdjointSweep integrate_adjoint_segment(Jac&& jacobian, Vjp&& param_vjp, const AdjointSweep& terminal,
                                       Index first, Index last, double h) {
  AdjointSweep s = terminal;
  const Index d = s.adjoint.size();
  const MatrixXd I = MatrixXd::Identity(d, d);
  for (Index k = last; k > first; --k) {
    const MatrixXd A = jacobian(k, k - 1);
    const VectorXd lam = (I - 0.5 * h * A.transpose()).partialPivLu().solve(s.adjoint);
    if (s.gradient.size() > 0) s.gradient += 0.5 * h * (param_vjp(k - 1, k - 1, lam) + param_vjp(k, k - 1, lam));
    const MatrixXd B = jacobian(k - 1, k - 1);
    s.adjoint = lam + 0.5 * h * (B.transpose() * lam);
    if (!s.adjoint.allFinite() || (s.gradient.size() > 0 && !s.gradient.allFinite()))
      throw Error(ErrorKind::AdjointDivergence, "non-finite adjoint at step " + std::to_string(k - 1));
  }
  return s;
}

}  // namespace neudye
