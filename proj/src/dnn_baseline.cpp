#include "neudye/neudye.hpp"

#include <json.hpp>

#include <cmath>
#include <iostream>

namespace neudye {

VectorXd DiscreteSurrogate::step(const VectorXd& x_ex, const VectorXd& s_in) const {
  if (x_ex.size() != external_size) throw Error(ErrorKind::Structural, "discrete surrogate state size mismatch");
  VectorXd u(x_ex.size() + s_in.size());
  u << x_ex, s_in;
  return x_ex + net.forward(u);
}

std::string discrete_to_json_text(const DiscreteSurrogate& model) {
  auto j = nlohmann::json::parse(mlp_to_json_text(model.net));
  j["kind"] = "discrete";
  j["external_size"] = model.external_size;
  return j.dump(2);
}

DiscreteSurrogate discrete_from_json_text(const std::string& text) {
  try {
    auto j = nlohmann::json::parse(text);
    if (j.value("kind", std::string()) != "discrete") throw Error(ErrorKind::Config, "model file is not a discrete surrogate");
    DiscreteSurrogate m;
    m.external_size = j.at("external_size").get<Index>();
    m.net = mlp_from_json_text(text);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, std::string("model JSON: ") + e.what());
  }
}

DnnResult dnn_baseline(const std::vector<const ScenarioPhysics*>& physics, const TrainingSet& data,
                       const DnnOptions& opt) {
  if (data.scenarios.empty() || physics.size() != data.scenarios.size())
    throw Error(ErrorKind::Data, "one physics model per scenario required");
  if (opt.stride < 1) throw Error(ErrorKind::Config, "stride must be positive");
  const Index nex = data.scenarios.front().x_ex.front().size();
  const Index nfeat = physics.front()->features.size();

  std::vector<VectorXd> inputs, targets;
  for (std::size_t k = 0; k < data.scenarios.size(); ++k) {
    const auto& sd = data.scenarios[k];
    for (Index i = 0; i + 1 < sd.nodes(); i += opt.stride) {
      const FaultStage s = sd.scenario.stage_at(sd.grid.time(i));
      VectorXd u(nex + nfeat);
      u << sd.x_ex[i], physics[k]->features.eval(sd.x_in[i], sd.x_ex[i], s);
      inputs.push_back(std::move(u));
      targets.push_back(sd.x_ex[i + 1] - sd.x_ex[i]);
    }
  }
  const double np = static_cast<double>(inputs.size());
  if (inputs.empty()) throw Error(ErrorKind::Data, "no one-step pairs");

  // Statistics for the affine normalization.
  VectorXd mean = VectorXd::Zero(nex + nfeat), sq = VectorXd::Zero(nex + nfeat), dsq = VectorXd::Zero(nex);
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    mean += inputs[p];
    sq += inputs[p].cwiseAbs2();
    dsq += targets[p].cwiseAbs2();
  }
  mean /= np;
  Normalization norm;
  norm.input_offset = mean;
  norm.input_scale = (sq / np - mean.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt().cwiseMax(1e-3);
  norm.output_offset = VectorXd::Zero(nex);
  norm.output_scale = (dsq / np).cwiseSqrt().cwiseMax(1e-9);

  std::vector<Index> widths{nex + nfeat};
  widths.insert(widths.end(), opt.hidden.begin(), opt.hidden.end());
  widths.push_back(nex);
  DnnResult out;
  out.model.net = Mlp::glorot(widths, opt.seed);
  out.model.net.set_normalization(norm);
  out.model.external_size = nex;

  Mlp& net = out.model.net;
  const VectorXd w = norm.output_scale.cwiseInverse().cwiseAbs2();
  VectorXd theta = net.parameters(), m = VectorXd::Zero(theta.size()), v = VectorXd::Zero(theta.size());
  for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
    net.set_parameters(theta);
    VectorXd g = VectorXd::Zero(theta.size());
    double loss = 0.0;
    for (std::size_t p = 0; p < inputs.size(); ++p) {
      const VectorXd r = net.forward(inputs[p]) - targets[p];
      loss += 0.5 * r.cwiseAbs2().dot(w) / np;
      g += net.parameter_vjp(inputs[p], r.cwiseProduct(w) / np);
    }
    out.history.push_back({epoch, loss, g.norm(), 0});
    if (opt.verbose && epoch % 100 == 0) std::cerr << "dnn epoch " << epoch << " loss " << loss << "\n";
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g.cwiseAbs2();
    const double c1 = 1.0 - std::pow(0.9, epoch), c2 = 1.0 - std::pow(0.999, epoch);
    theta.array() -= opt.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + 1e-8);
  }
  net.set_parameters(theta);

  // One-step training error: mean squared residual over the state variance.
  const VectorXd sigma = data.scales.external.size() == nex ? data.scales.external : VectorXd::Ones(nex);
  double acc = 0.0;
  for (std::size_t p = 0; p < inputs.size(); ++p)
    acc += (net.forward(inputs[p]) - targets[p]).cwiseQuotient(sigma).squaredNorm();
  out.one_step_error = acc / (np * static_cast<double>(nex));
  return out;
}

Trajectory simulate_discrete_closed_loop(const DiscreteSurrogate& model, const ScenarioPhysics& physics,
                                         const HybridState& x0, const FaultScenario& scenario,
                                         const TimeGrid& grid, const StepOptions& opt) {
  grid.validate();
  const Index n = grid.steps(), nin = x0.x_in.size(), nex = x0.x_ex.size();
  Trajectory traj;
  traj.times.resize(n + 1);
  VectorXd z(nin + nex);
  z << x0.x_in, x0.x_ex;
  traj.states.push_back(z);
  traj.times[0] = grid.t0;
  for (Index i = 0; i < n; ++i) {
    const double t = grid.time(i);
    const FaultStage s = scenario.stage_at(t);
    const VectorXd x_in = z.head(nin), x_ex = z.tail(nex);
    const VectorXd x_ex1 = model.step(x_ex, physics.features.eval(x_in, x_ex, s));
    if (!x_ex1.allFinite())
      throw Error(ErrorKind::Divergence, "discrete surrogate diverged at step " + std::to_string(i));
    auto f = [&](const VectorXd& xi, double tt) { return physics.insys.rhs(xi, tt == t ? x_ex : x_ex1, s); };
    VectorXd x_in1;
    try {
      x_in1 = trapezoidal_step(f, x_in, t, grid.h, opt);
    } catch (const Error& e) {
      throw Error(e.kind(), std::string(e.what()) + " [step " + std::to_string(i) + "]");
    }
    z << x_in1, x_ex1;
    traj.states.push_back(z);
    traj.times[i + 1] = grid.time(i + 1);
  }
  return traj;
}

}  // namespace neudye
