#include "neudye/neudye.hpp"

#include <cmath>
#include <cstdio>
#include <iostream>
#include <limits>
#include <sstream>

namespace neudye {

namespace {

struct Adam {
  double lr, beta1, beta2, eps;
  VectorXd m, v;
  int t = 0;

  Adam(Index n, double lr_, double b1, double b2, double e)
      : lr(lr_), beta1(b1), beta2(b2), eps(e), m(VectorXd::Zero(n)), v(VectorXd::Zero(n)) {}

  void step(VectorXd& theta, const VectorXd& g) {
    ++t;
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(beta1, t), c2 = 1.0 - std::pow(beta2, t);
    theta.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

VectorXd clipped(const VectorXd& g, double limit) {
  const double n = g.norm();
  return (limit > 0.0 && n > limit) ? VectorXd(g * (limit / n)) : g;
}

void check_inputs(const std::vector<const ScenarioPhysics*>& physics, const TrainingSet& data) {
  if (data.scenarios.empty()) throw Error(ErrorKind::Data, "training set is empty");
  if (physics.size() != data.scenarios.size()) throw Error(ErrorKind::Data, "one physics model per scenario required");
  const double h = data.scenarios.front().grid.h;
  for (const auto& s : data.scenarios) {
    if (std::abs(s.grid.h - h) > 1e-15) throw Error(ErrorKind::Data, "scenarios must share the sampling step");
    if (s.nodes() < 2) throw Error(ErrorKind::Data, "scenario needs at least two samples");
  }
}

}  // namespace

TrainResult train(const NeuralOdeModel& model, const std::vector<const ScenarioPhysics*>& physics,
                  const TrainingSet& data, GradientMode mode, const TrainOptions& opt,
                  const JacobianEstimate* estimate) {
  check_inputs(physics, data);
  if (opt.max_epochs < 1) throw Error(ErrorKind::Config, "max_epochs must be positive");
  const std::size_t ns = data.scenarios.size();

  NeuralOdeModel current = model;
  VectorXd theta = current.net().parameters();
  Adam adam(theta.size(), opt.learning_rate, opt.beta1, opt.beta2, opt.epsilon);

  TrainResult result;
  result.model = model;
  result.best_loss = std::numeric_limits<double>::infinity();
  std::vector<double> best_by_epoch;

  for (int epoch = 1; epoch <= opt.max_epochs; ++epoch) {
    current.net().set_parameters(theta);
    std::vector<double> losses(ns, 0.0);
    std::vector<VectorXd> grads(ns);
    std::vector<char> skipped(ns, 0);
    parallel_for(static_cast<Index>(ns), opt.threads, [&](Index k) {
      try {
        GradientResult r = pi_gradient(current, *physics[k], data.scenarios[k], data.scales, mode,
                                       data.sample_stride, estimate, opt.horizon);
        losses[k] = r.loss;
        grads[k] = std::move(r.grad);
      } catch (const Error& e) {
        if (!e.numerical()) throw;
        skipped[k] = 1;
        if (opt.verbose) std::cerr << "warning: skipping scenario " << data.scenarios[k].scenario.id << ": " << e.what() << "\n";
      }
    });

    // Fixed-order reduction keeps the result independent of the thread count.
    EpochRecord rec;
    rec.epoch = epoch;
    VectorXd g = VectorXd::Zero(theta.size());
    for (std::size_t k = 0; k < ns; ++k) {
      if (skipped[k]) {
        ++rec.skipped;
        continue;
      }
      rec.loss += losses[k];
      g += grads[k];
    }
    if (rec.skipped == static_cast<int>(ns))
      throw Error(ErrorKind::TrainingFailure, "every scenario diverged in epoch " + std::to_string(epoch));
    rec.grad_norm = g.norm();
    result.skipped_total += rec.skipped;
    result.history.push_back(rec);
    if (opt.verbose)
      std::cerr << "epoch " << epoch << " loss " << rec.loss << " grad " << rec.grad_norm << " skipped " << rec.skipped
                << "\n";

    if (rec.skipped == 0 && rec.loss < result.best_loss) {
      result.best_loss = rec.loss;
      result.model = current;
    }
    best_by_epoch.push_back(result.best_loss);
    const int w = opt.plateau_window;
    if (w > 0 && epoch > w) {
      const double before = best_by_epoch[static_cast<std::size_t>(epoch - 1 - w)];
      if (std::isfinite(before) && before - result.best_loss <= opt.plateau_tolerance * std::abs(before)) break;
    }
    adam.step(theta, clipped(g, opt.clip_norm));
  }
  if (!std::isfinite(result.best_loss)) {
    // Every epoch lost at least one scenario: fall back to the last parameters.
    result.model = current;
    result.best_loss = result.history.back().loss;
  }
  return result;
}

TrainResult train_open_loop(const NeuralOdeModel& model, const std::vector<const ScenarioPhysics*>& physics,
                            const TrainingSet& data, const TrainOptions& opt) {
  return train(model, physics, data, GradientMode::OpenLoop, opt);
}

TrainResult train_pi(const NeuralOdeModel& model, const std::vector<const ScenarioPhysics*>& physics,
                     const TrainingSet& data, const TrainOptions& opt) {
  return train(model, physics, data, GradientMode::PhysicsInformed, opt);
}

TrainResult train_pg(const NeuralOdeModel& model, const JacobianEstimate& estimate,
                     const std::vector<const ScenarioPhysics*>& physics, const TrainingSet& data,
                     const TrainOptions& opt) {
  return train(model, physics, data, GradientMode::PhysicsGuided, opt, &estimate);
}

NeuralOdeModel fit_derivatives(const NeuralOdeModel& model, const std::vector<const ScenarioPhysics*>& physics,
                               const TrainingSet& data, int epochs, double learning_rate, Index stride) {
  check_inputs(physics, data);
  if (stride < 1) throw Error(ErrorKind::Config, "stride must be positive");

  // Trapezoidal pairs: (N(z_i) + N(z_i+1)) / 2 should equal (x_i+1 - x_i) / h,
  // with both endpoints evaluated under the stage of step i.
  struct Pair {
    VectorXd u0, u1, target;
  };
  std::vector<Pair> pairs;
  for (std::size_t k = 0; k < data.scenarios.size(); ++k) {
    const auto& sd = data.scenarios[k];
    const auto& fm = physics[k]->features;
    for (Index i = 0; i + 1 < sd.nodes(); i += stride) {
      const FaultStage s = sd.scenario.stage_at(sd.grid.time(i));
      const VectorXd s0 = fm.eval(sd.x_in[i], sd.x_ex[i], s);
      const VectorXd s1 = fm.eval(sd.x_in[i + 1], sd.x_ex[i + 1], s);
      Pair p;
      p.u0.resize(sd.x_ex[i].size() + s0.size());
      p.u1.resize(p.u0.size());
      p.u0 << sd.x_ex[i], s0;
      p.u1 << sd.x_ex[i + 1], s1;
      p.target = (sd.x_ex[i + 1] - sd.x_ex[i]) / sd.grid.h;
      pairs.push_back(std::move(p));
    }
  }
  if (pairs.empty()) throw Error(ErrorKind::Data, "no derivative pairs");

  NeuralOdeModel out = model;
  Mlp& net = out.net();
  const VectorXd w = net.normalization().output_scale.cwiseInverse().cwiseAbs2();
  VectorXd theta = net.parameters();
  Adam adam(theta.size(), learning_rate, 0.9, 0.999, 1e-8);
  const double inv = 1.0 / static_cast<double>(pairs.size());
  for (int epoch = 0; epoch < epochs; ++epoch) {
    net.set_parameters(theta);
    VectorXd g = VectorXd::Zero(theta.size());
    for (const Pair& p : pairs) {
      const VectorXd r = 0.5 * (net.forward(p.u0) + net.forward(p.u1)) - p.target;
      const VectorXd c = r.cwiseProduct(w) * inv;  // d(0.5 * mean ||r/scale||^2)/d N
      g += 0.5 * (net.parameter_vjp(p.u0, c) + net.parameter_vjp(p.u1, c));
    }
    adam.step(theta, g);
  }
  net.set_parameters(theta);
  return out;
}

std::string loss_history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os << "epoch,loss,grad_norm\n";
  char buf[96];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%d,%.12e,%.12e\n", r.epoch, r.loss, r.grad_norm);
    os << buf;
  }
  return os.str();
}

}  // namespace neudye
