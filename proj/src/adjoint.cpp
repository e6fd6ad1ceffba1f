#include "neudye/neudye.hpp"

#include <cmath>

namespace neudye {

namespace {

Index last_node(const ScenarioData& data, double horizon) {
  Index last = data.nodes() - 1;
  if (last < 1) throw Error(ErrorKind::Data, "scenario needs at least two samples");
  if (horizon > 0.0) last = std::min<Index>(last, static_cast<Index>(std::llround(horizon / data.grid.h)));
  if (last < 1) throw Error(ErrorKind::Config, "training horizon shorter than one step");
  return last;
}

/// Shared forward/backward plumbing for the open-loop and closed-loop modes.
class Problem {
 public:
  Problem(const NeuralOdeModel& model, const ScenarioPhysics& physics, const ScenarioData& data, GradientMode mode,
          const JacobianEstimate* estimate)
      : model_(model), physics_(physics), data_(data), mode_(mode), estimate_(estimate), loop_(model, physics) {
    if (mode == GradientMode::PhysicsGuided && !estimate)
      throw Error(ErrorKind::Config, "physics-guided mode needs a Jacobian estimate");
    if (estimate && (estimate->A.rows() != loop_.internal_size() || estimate->A.cols() != loop_.size()))
      throw Error(ErrorKind::Structural, "Jacobian estimate has the wrong shape");
  }

  bool open_loop() const { return mode_ == GradientMode::OpenLoop; }
  Index nin() const { return loop_.internal_size(); }
  Index nex() const { return loop_.external_size(); }

  FaultStage stage(Index step) const { return data_.scenario.stage_at(data_.grid.time(step)); }

  VectorXd initial() const {
    if (open_loop()) return data_.x_ex[0];
    VectorXd z(nin() + nex());
    z << data_.x_in[0], data_.x_ex[0];
    return z;
  }

  VectorXd measured_features(Index node, FaultStage s) const {
    return physics_.features.eval(data_.x_in[node], data_.x_ex[node], s);
  }

  VectorXd rhs(const VectorXd& z, Index node, FaultStage s) const {
    if (open_loop()) return model_.forward(z, measured_features(node, s));
    return loop_.rhs(z, s);
  }

  MatrixXd jacobian(const VectorXd& z, Index node, FaultStage s) const {
    if (open_loop()) return model_.jacobian_input(z, measured_features(node, s)).first;
    return loop_.jacobian(z, s, mode_ == GradientMode::PhysicsGuided ? estimate_ : nullptr);
  }

  VectorXd vjp(const VectorXd& z, Index node, FaultStage s, const VectorXd& w) const {
    if (open_loop()) return model_.params_vjp(z, measured_features(node, s), w);
    return loop_.params_vjp(z, s, w);
  }

  Trajectory forward(Index last, const StepOptions& opt = {}) const {
    Trajectory traj;
    traj.times.resize(last + 1);
    traj.states.reserve(static_cast<std::size_t>(last + 1));
    traj.states.push_back(initial());
    traj.times[0] = data_.grid.time(0);
    const double h = data_.grid.h;
    for (Index i = 0; i < last; ++i) {
      const double t = data_.grid.time(i);
      const FaultStage s = stage(i);
      auto f = [&](const VectorXd& z, double tt) { return rhs(z, tt == t ? i : i + 1, s); };
      try {
        traj.states.push_back(trapezoidal_step(f, traj.states.back(), t, h, opt));
      } catch (const Error& e) {
        throw Error(e.kind(), std::string(e.what()) + " [scenario " + std::to_string(data_.scenario.id) + ", step " +
                                  std::to_string(i) + "]");
      }
      traj.times[i + 1] = data_.grid.time(i + 1);
    }
    return traj;
  }

  /// Loss and its gradient with respect to the stacked state at one node.
  double sample_loss(const VectorXd& z, Index node, const LossScales& sc, VectorXd* grad) const {
    double total = 0.0;
    if (grad) grad->setZero(z.size());
    auto term = [&](const VectorXd& e, const VectorXd& scale, Index offset) {
      const VectorXd w = e.cwiseQuotient(scale);
      const double n = w.norm();
      total += n;
      if (grad && n > 0.0) grad->segment(offset, e.size()) = w.cwiseQuotient(scale) / n;
    };
    if (open_loop()) {
      term(z - data_.x_ex[node], sc.external, 0);
    } else {
      term(z.tail(nex()) - data_.x_ex[node], sc.external, nin());
      term(z.head(nin()) - data_.x_in[node], sc.internal, 0);
    }
    return total;
  }

 private:
  const NeuralOdeModel& model_;
  const ScenarioPhysics& physics_;
  const ScenarioData& data_;
  GradientMode mode_;
  const JacobianEstimate* estimate_;
  ClosedLoop loop_;
};

}  // namespace

GradientResult pi_gradient(const NeuralOdeModel& model, const ScenarioPhysics& physics, const ScenarioData& data,
                           const LossScales& scales, GradientMode mode, Index stride, const JacobianEstimate* estimate,
                           double horizon) {
  if (stride < 1) throw Error(ErrorKind::Config, "sample stride must be positive");
  const Problem prob(model, physics, data, mode, estimate);
  const Index last = last_node(data, horizon);
  const double h = data.grid.h;

  GradientResult out;
  out.trajectory = prob.forward(last);
  const auto& z = out.trajectory.states;

  // Cache the most recent Jacobian: the sweep asks for each node twice in a row.
  Index cached_node = -1;
  FaultStage cached_stage = FaultStage::PreFault;
  MatrixXd cached;
  auto jac = [&](Index node, Index step) -> MatrixXd {
    const FaultStage s = prob.stage(step);
    if (node != cached_node || s != cached_stage) {
      cached = prob.jacobian(z[node], node, s);
      cached_node = node;
      cached_stage = s;
    }
    return cached;
  };
  auto vjp = [&](Index node, Index step, const VectorXd& w) { return prob.vjp(z[node], node, prob.stage(step), w); };

  AdjointSweep sweep;
  sweep.adjoint = VectorXd::Zero(z.front().size());
  sweep.gradient = VectorXd::Zero(model.parameter_count());
  VectorXd g;
  for (Index k = last; k >= 1; --k) {
    if (k % stride == 0) {
      out.loss += prob.sample_loss(z[k], k, scales, &g);
      sweep.adjoint += g;
    }
    sweep = integrate_adjoint_segment(jac, vjp, sweep, k - 1, k, h);
  }
  out.grad = std::move(sweep.gradient);
  if (prob.open_loop()) {
    out.initial.lambda = sweep.adjoint;
    out.initial.mu = VectorXd();
  } else {
    out.initial.mu = sweep.adjoint.head(prob.nin());
    out.initial.lambda = sweep.adjoint.tail(prob.nex());
  }
  out.initial.grad_theta = out.grad;
  return out;
}

double scenario_loss(const NeuralOdeModel& model, const ScenarioPhysics& physics, const ScenarioData& data,
                     const LossScales& scales, GradientMode mode, Index stride, double horizon) {
  if (stride < 1) throw Error(ErrorKind::Config, "sample stride must be positive");
  const Problem prob(model, physics, data, mode == GradientMode::OpenLoop ? mode : GradientMode::PhysicsInformed,
                     nullptr);
  const Index last = last_node(data, horizon);
  const Trajectory traj = prob.forward(last);
  double loss = 0.0;
  for (Index k = stride; k <= last; k += stride) loss += prob.sample_loss(traj.states[k], k, scales, nullptr);
  return loss;
}

}  // namespace neudye
