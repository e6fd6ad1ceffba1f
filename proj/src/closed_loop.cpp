#include "neudye/neudye.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

namespace neudye {

namespace {

VectorXd std_floor(const VectorXd& sum, const VectorXd& sumsq, double n, double floor) {
  const VectorXd mean = sum / n;
  VectorXd var = sumsq / n - mean.cwiseProduct(mean);
  return var.cwiseMax(0.0).cwiseSqrt().cwiseMax(floor);
}

}  // namespace

void parallel_for(Index n, int threads, const std::function<void(Index)>& fn) {
  const Index workers = std::min<Index>(std::max(1, threads), n);
  if (workers <= 1) {
    for (Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::vector<std::thread> pool;
  for (Index w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (Index i = w; i < n; i += workers) {
        try {
          fn(i);
        } catch (...) {
          errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

LossScales fit_loss_scales(const std::vector<ScenarioData>& data) {
  if (data.empty()) throw Error(ErrorKind::Data, "empty data set");
  const Index nin = data.front().x_in.front().size(), nex = data.front().x_ex.front().size();
  VectorXd si = VectorXd::Zero(nin), si2 = VectorXd::Zero(nin), se = VectorXd::Zero(nex), se2 = VectorXd::Zero(nex);
  double n = 0;
  for (const auto& d : data) {
    for (Index i = 0; i < d.nodes(); ++i) {
      si += d.x_in[i];
      si2 += d.x_in[i].cwiseProduct(d.x_in[i]);
      se += d.x_ex[i];
      se2 += d.x_ex[i].cwiseProduct(d.x_ex[i]);
      n += 1;
    }
  }
  return {std_floor(si, si2, n, 1e-6), std_floor(se, se2, n, 1e-6)};
}

Normalization fit_normalization(const std::vector<ScenarioData>& data,
                                const std::vector<const ScenarioPhysics*>& physics) {
  if (data.empty() || data.size() != physics.size()) throw Error(ErrorKind::Data, "data/physics size mismatch");
  const Index nex = data.front().x_ex.front().size();
  const Index nin_feat = physics.front()->features.size();
  const Index m = nex + nin_feat;
  VectorXd s = VectorXd::Zero(m), s2 = VectorXd::Zero(m), d = VectorXd::Zero(nex), d2 = VectorXd::Zero(nex);
  double n = 0, nd = 0;
  for (std::size_t k = 0; k < data.size(); ++k) {
    const auto& sd = data[k];
    const double h = sd.grid.h;
    for (Index i = 0; i < sd.nodes(); ++i) {
      const FaultStage stage = sd.scenario.stage_at(sd.grid.time(i));
      VectorXd u(m);
      u << sd.x_ex[i], physics[k]->features.eval(sd.x_in[i], sd.x_ex[i], stage);
      s += u;
      s2 += u.cwiseProduct(u);
      n += 1;
      if (i + 1 < sd.nodes()) {
        const VectorXd r = (sd.x_ex[i + 1] - sd.x_ex[i]) / h;
        d += r;
        d2 += r.cwiseProduct(r);
        nd += 1;
      }
    }
  }
  Normalization norm;
  norm.input_offset = s / n;
  norm.input_scale = std_floor(s, s2, n, 1e-3);
  norm.output_offset = VectorXd::Zero(nex);
  // RMS rather than std: the derivative mean is near zero and not informative.
  norm.output_scale = (d2 / std::max(nd, 1.0)).cwiseSqrt().cwiseMax(1e-3);
  return norm;
}

// ---------------------------------------------------------------------------

ClosedLoop::ClosedLoop(const NeuralOdeModel& model, const ScenarioPhysics& physics)
    : model_(&model), physics_(&physics), nin_(physics.insys.internal_size()), nex_(physics.insys.external_size()) {
  if (model.external_size() != nex_) throw Error(ErrorKind::Structural, "surrogate output size != tie-line states");
  if (model.feature_size() != physics.features.size())
    throw Error(ErrorKind::Structural, "surrogate feature size != feature map size");
}

VectorXd ClosedLoop::stack(const HybridState& s) const {
  if (s.x_in.size() != nin_ || s.x_ex.size() != nex_) throw Error(ErrorKind::Structural, "hybrid state size mismatch");
  VectorXd z(nin_ + nex_);
  z << s.x_in, s.x_ex;
  return z;
}

VectorXd ClosedLoop::rhs(const VectorXd& z, FaultStage stage) const {
  const VectorXd x_in = z.head(nin_), x_ex = z.tail(nex_);
  VectorXd f(nin_ + nex_);
  f.head(nin_) = physics_->insys.rhs(x_in, x_ex, stage);
  f.tail(nex_) = model_->forward(x_ex, physics_->features.eval(x_in, x_ex, stage));
  return f;
}

MatrixXd ClosedLoop::jacobian(const VectorXd& z, FaultStage stage, const JacobianEstimate* estimate) const {
  const VectorXd x_in = z.head(nin_), x_ex = z.tail(nex_);
  MatrixXd J(nin_ + nex_, nin_ + nex_);
  if (estimate) {
    J.topLeftCorner(nin_, nin_) = estimate->wrt_internal();
    J.topRightCorner(nin_, nex_) = estimate->wrt_external();
  } else {
    const BlockJacobian P = physics_->insys.jacobians(x_in, x_ex, stage);
    J.topLeftCorner(nin_, nin_) = P.wrt_internal;
    J.topRightCorner(nin_, nex_) = P.wrt_external;
  }
  const VectorXd s = physics_->features.eval(x_in, x_ex, stage);
  const BlockJacobian S = physics_->features.jacobians(x_in, x_ex, stage);
  const auto [Nx, Ns] = model_->jacobian_input(x_ex, s);
  J.bottomLeftCorner(nex_, nin_) = Ns * S.wrt_internal;
  J.bottomRightCorner(nex_, nex_) = Nx + Ns * S.wrt_external;
  return J;
}

VectorXd ClosedLoop::params_vjp(const VectorXd& z, FaultStage stage, const VectorXd& w) const {
  const VectorXd x_in = z.head(nin_), x_ex = z.tail(nex_);
  return model_->params_vjp(x_ex, physics_->features.eval(x_in, x_ex, stage), w.tail(nex_));
}

Trajectory simulate_closed_loop(const NeuralOdeModel& model, const ScenarioPhysics& physics, const HybridState& x0,
                                const FaultScenario& scenario, const TimeGrid& grid, const StepOptions& opt) {
  const ClosedLoop loop(model, physics);
  return integrate([&](const VectorXd& z, FaultStage stage) { return loop.rhs(z, stage); }, loop.stack(x0), grid,
                   scenario, opt);
}

// ---------------------------------------------------------------------------

LossValue trajectory_loss(const std::vector<VectorXd>& x_in, const std::vector<VectorXd>& x_ex,
                          const std::vector<VectorXd>& xhat_in, const std::vector<VectorXd>& xhat_ex,
                          const LossScales& scales, Index stride) {
  if (stride < 1) throw Error(ErrorKind::Config, "sample stride must be positive");
  const std::size_t n = std::max(x_in.size(), x_ex.size());
  if (!x_in.empty() && xhat_in.size() < n) throw Error(ErrorKind::Structural, "loss: internal trajectory too short");
  if (!x_ex.empty() && xhat_ex.size() < n) throw Error(ErrorKind::Structural, "loss: external trajectory too short");
  LossValue out;
  out.per_sample.assign(n, 0.0);
  for (std::size_t i = static_cast<std::size_t>(stride); i < n; i += static_cast<std::size_t>(stride)) {
    double li = 0.0;
    if (!x_ex.empty()) li += (x_ex[i] - xhat_ex[i]).cwiseQuotient(scales.external).norm();
    if (!x_in.empty()) li += (x_in[i] - xhat_in[i]).cwiseQuotient(scales.internal).norm();
    out.per_sample[i] = li;
    out.total += li;
  }
  return out;
}

}  // namespace neudye
