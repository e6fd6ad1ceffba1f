#include "neudye/harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace neudye {

using nlohmann::json;

namespace {

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; }))
      throw Error(ErrorKind::Config, "unknown key '" + k + "' in " + where);
  }
}

SplitConfig split_from(const json& j, const std::string& where) {
  reject_unknown(j, {"fault_buses", "clear_min", "clear_max", "count", "load_min", "load_max"}, where);
  SplitConfig s;
  read(j, "fault_buses", s.fault_buses);
  read(j, "clear_min", s.clear_min);
  read(j, "clear_max", s.clear_max);
  read(j, "count", s.count);
  read(j, "load_min", s.load_min);
  read(j, "load_max", s.load_max);
  return s;
}

json split_to(const SplitConfig& s) {
  return {{"fault_buses", s.fault_buses}, {"clear_min", s.clear_min}, {"clear_max", s.clear_max},
          {"count", s.count},             {"load_min", s.load_min},   {"load_max", s.load_max}};
}

/// Uniform double in [0, 1) from the top 53 bits; independent of the
/// standard library's distribution implementation.
double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

void validate_split(const SplitConfig& s, const ExperimentConfig& cfg, const char* name) {
  const std::string n(name);
  if (s.fault_buses.empty()) throw Error(ErrorKind::Config, n + ": fault bus list is empty");
  if (s.count < 0) throw Error(ErrorKind::Config, n + ": negative scenario count");
  if (!(s.clear_max >= s.clear_min) || !(s.clear_min > cfg.fault_start))
    throw Error(ErrorKind::Config, n + ": clearing-time range must follow the fault start");
  if (s.clear_max > cfg.grid.tn) throw Error(ErrorKind::Config, n + ": clearing time beyond the horizon");
  if (!(s.load_max >= s.load_min) || s.load_min < 0.5 || s.load_max > 1.5)
    throw Error(ErrorKind::Config, n + ": load-scale range must lie in [0.5, 1.5]");
}

std::vector<FaultScenario> draw(const SplitConfig& s, const ExperimentConfig& cfg, std::uint64_t seed, int first_id,
                                const std::set<std::pair<int, Index>>& taken) {
  std::mt19937_64 rng(seed);
  std::vector<FaultScenario> out;
  std::set<std::pair<int, Index>> used = taken;
  const double h = cfg.grid.h;
  const Index lo = static_cast<Index>(std::ceil((s.clear_min - cfg.grid.t0) / h - 1e-9));
  const Index hi = static_cast<Index>(std::floor((s.clear_max - cfg.grid.t0) / h + 1e-9));
  for (int j = 0; j < s.count; ++j) {
    FaultScenario sc;
    sc.id = first_id + j;
    sc.faulted_bus = s.fault_buses[static_cast<std::size_t>(j) % s.fault_buses.size()];
    sc.t_start = cfg.grid.time(cfg.grid.index_of(cfg.fault_start));
    Index idx = -1;
    for (int attempt = 0; attempt < 1000 && idx < 0; ++attempt) {
      const Index cand = lo + std::min<Index>(hi - lo, static_cast<Index>(unit(rng) * static_cast<double>(hi - lo + 1)));
      if (!used.count({sc.faulted_bus, cand})) idx = cand;
    }
    if (idx < 0) throw Error(ErrorKind::Config, "clearing-time range too narrow for disjoint scenarios");
    used.insert({sc.faulted_bus, idx});
    sc.t_clear = cfg.grid.time(idx);
    sc.load_scale = s.load_min + (s.load_max - s.load_min) * unit(rng);
    sc.validate();
    out.push_back(sc);
  }
  return out;
}

std::vector<Index> boundary_buses(const NetworkModel& net) {
  std::vector<Index> out;
  for (const auto& [a, b] : net.partition->tie_lines) {
    const Index g = net.bus_index(a);
    if (std::find(out.begin(), out.end(), g) == out.end()) out.push_back(g);
  }
  return out;
}

json box_json(const BoxStats& b) {
  return {{"count", b.count}, {"min", b.min},       {"q1", b.q1},
          {"median", b.median}, {"q3", b.q3},       {"max", b.max},
          {"lower_whisker", b.lower_whisker}, {"upper_whisker", b.upper_whisker}};
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

ExperimentConfig config_from_json_text(const std::string& text, const std::string& base_dir) {
  ExperimentConfig cfg;
  try {
    const json j = json::parse(text);
    reject_unknown(j,
                   {"network", "partition", "train", "test", "unseen", "fault_start", "grid", "model", "mode", "optimizer",
                    "sample_stride", "warm_start", "dnn", "seed"},
                   "config");
    const std::string net = j.at("network").get<std::string>();
    cfg.network_path = std::filesystem::path(net).is_absolute() ? net : (std::filesystem::path(base_dir) / net).string();
    if (j.contains("partition")) {
      const auto& p = j.at("partition");
      Partition part;
      part.internal_buses = p.at("internal").get<std::vector<int>>();
      part.external_buses = p.at("external").get<std::vector<int>>();
      for (const auto& t : p.at("tie_lines")) part.tie_lines.emplace_back(t.at(0).get<int>(), t.at(1).get<int>());
      cfg.partition = part;
    }
    cfg.train = split_from(j.at("train"), "train");
    cfg.test = split_from(j.at("test"), "test");
    if (j.contains("unseen")) cfg.unseen = split_from(j.at("unseen"), "unseen");
    read(j, "fault_start", cfg.fault_start);
    if (j.contains("grid")) {
      const auto& g = j.at("grid");
      reject_unknown(g, {"t0", "tn", "h"}, "grid");
      read(g, "t0", cfg.grid.t0);
      read(g, "tn", cfg.grid.tn);
      read(g, "h", cfg.grid.h);
    }
    if (j.contains("model")) {
      reject_unknown(j.at("model"), {"hidden"}, "model");
      read(j.at("model"), "hidden", cfg.hidden);
    }
    read(j, "mode", cfg.mode);
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      reject_unknown(o,
                     {"max_epochs", "learning_rate", "beta1", "beta2", "epsilon", "clip_norm", "plateau_tolerance",
                      "plateau_window", "horizon", "threads"},
                     "optimizer");
      TrainOptions& t = cfg.optimizer;
      read(o, "max_epochs", t.max_epochs);
      read(o, "learning_rate", t.learning_rate);
      read(o, "beta1", t.beta1);
      read(o, "beta2", t.beta2);
      read(o, "epsilon", t.epsilon);
      read(o, "clip_norm", t.clip_norm);
      read(o, "plateau_tolerance", t.plateau_tolerance);
      read(o, "plateau_window", t.plateau_window);
      read(o, "horizon", t.horizon);
      read(o, "threads", t.threads);
    }
    read(j, "sample_stride", cfg.sample_stride);
    if (j.contains("warm_start")) {
      const auto& w = j.at("warm_start");
      reject_unknown(w, {"epochs", "learning_rate", "stride"}, "warm_start");
      read(w, "epochs", cfg.warm_start_epochs);
      read(w, "learning_rate", cfg.warm_start_learning_rate);
      read(w, "stride", cfg.warm_start_stride);
    }
    if (j.contains("dnn")) {
      const auto& d = j.at("dnn");
      reject_unknown(d, {"hidden", "epochs", "learning_rate", "stride"}, "dnn");
      read(d, "hidden", cfg.dnn.hidden);
      read(d, "epochs", cfg.dnn.epochs);
      read(d, "learning_rate", cfg.dnn.learning_rate);
      read(d, "stride", cfg.dnn.stride);
    }
    read(j, "seed", cfg.seed);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Config, std::string("config JSON: ") + e.what());
  }
  cfg.dnn.seed = cfg.seed;
  cfg.grid.validate();
  if (cfg.mode != "open" && cfg.mode != "pi" && cfg.mode != "pg" && cfg.mode != "dnn")
    throw Error(ErrorKind::Config, "mode must be one of open, pi, pg, dnn");
  if (cfg.sample_stride < 1 || cfg.warm_start_stride < 1 || cfg.dnn.stride < 1)
    throw Error(ErrorKind::Config, "strides must be positive");
  cfg.grid.index_of(cfg.fault_start);
  validate_split(cfg.train, cfg, "train");
  validate_split(cfg.test, cfg, "test");
  if (cfg.unseen) validate_split(*cfg.unseen, cfg, "unseen");
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Config, "cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json_text(ss.str(), std::filesystem::path(path).parent_path().string());
}

std::string config_to_json_text(const ExperimentConfig& cfg) {
  json j;
  j["network"] = cfg.network_path;
  if (cfg.partition) {
    json ties = json::array();
    for (const auto& [a, b] : cfg.partition->tie_lines) ties.push_back({a, b});
    j["partition"] = {{"internal", cfg.partition->internal_buses},
                      {"external", cfg.partition->external_buses},
                      {"tie_lines", ties}};
  }
  j["train"] = split_to(cfg.train);
  j["test"] = split_to(cfg.test);
  if (cfg.unseen) j["unseen"] = split_to(*cfg.unseen);
  j["fault_start"] = cfg.fault_start;
  j["grid"] = {{"t0", cfg.grid.t0}, {"tn", cfg.grid.tn}, {"h", cfg.grid.h}};
  j["model"] = {{"hidden", cfg.hidden}};
  j["mode"] = cfg.mode;
  const TrainOptions& t = cfg.optimizer;
  j["optimizer"] = {{"max_epochs", t.max_epochs},
                    {"learning_rate", t.learning_rate},
                    {"beta1", t.beta1},
                    {"beta2", t.beta2},
                    {"epsilon", t.epsilon},
                    {"clip_norm", t.clip_norm},
                    {"plateau_tolerance", t.plateau_tolerance},
                    {"plateau_window", t.plateau_window},
                    {"horizon", t.horizon},
                    {"threads", t.threads}};
  j["sample_stride"] = cfg.sample_stride;
  j["warm_start"] = {{"epochs", cfg.warm_start_epochs},
                     {"learning_rate", cfg.warm_start_learning_rate},
                     {"stride", cfg.warm_start_stride}};
  j["dnn"] = {{"hidden", cfg.dnn.hidden},
              {"epochs", cfg.dnn.epochs},
              {"learning_rate", cfg.dnn.learning_rate},
              {"stride", cfg.dnn.stride}};
  j["seed"] = cfg.seed;
  return j.dump(2);
}

NetworkModel load_experiment_network(const ExperimentConfig& cfg) {
  NetworkModel net = load_network(cfg.network_path);
  if (cfg.partition) {
    net.partition = cfg.partition;
    net.validate();
  }
  if (!net.partition) throw Error(ErrorKind::Config, "experiment network has no partition");
  return net;
}

std::vector<FaultScenario> generate_scenarios(const ExperimentConfig& cfg, Split split) {
  validate_split(cfg.train, cfg, "train");
  const auto train = draw(cfg.train, cfg, cfg.seed, 0, {});
  if (split == Split::Train) return train;
  validate_split(cfg.test, cfg, "test");
  std::set<std::pair<int, Index>> taken;
  for (const auto& s : train) taken.insert({s.faulted_bus, cfg.grid.index_of(s.t_clear)});
  if (split == Split::Test) return draw(cfg.test, cfg, cfg.seed ^ 0x9e3779b97f4a7c15ULL, 1000, taken);
  if (!cfg.unseen) throw Error(ErrorKind::Config, "config has no unseen split");
  validate_split(*cfg.unseen, cfg, "unseen");
  return draw(*cfg.unseen, cfg, cfg.seed ^ 0xc2b2ae3d27d4eb4fULL, 2000, taken);
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

std::vector<const ScenarioPhysics*> Dataset::physics_view() const {
  std::vector<const ScenarioPhysics*> out;
  for (const auto& p : physics) out.push_back(p.get());
  return out;
}

Dataset build_dataset(const NetworkModel& net, const ExperimentConfig& cfg, const std::vector<FaultScenario>& scenarios,
                      int threads) {
  const std::size_t n = scenarios.size();
  std::vector<ScenarioData> data(n);
  std::vector<std::string> failure(n);
  const FeatureSpec spec = FeatureSpec::defaults(net);
  parallel_for(static_cast<Index>(n), threads, [&](Index k) {
    const FaultScenario& sc = scenarios[static_cast<std::size_t>(k)];
    ScenarioData& d = data[static_cast<std::size_t>(k)];
    d.scenario = sc;
    d.grid = cfg.grid;
    const FullSystem full(net, sc);
    const VectorXd x0 = full.equilibrium_state();
    d.x0_in = full.internal_states(x0);
    d.x0_ex = full.external_states(x0);
    try {
      const Trajectory tr =
          integrate([&](const VectorXd& x, FaultStage s) { return full.rhs(x, s); }, x0, cfg.grid, sc);
      d.x_in.reserve(tr.states.size());
      d.x_ex.reserve(tr.states.size());
      for (const auto& x : tr.states) {
        d.x_in.push_back(full.internal_states(x));
        d.x_ex.push_back(full.external_states(x));
      }
    } catch (const Error& e) {
      if (!e.numerical()) throw;
      d.diverged = true;
      failure[static_cast<std::size_t>(k)] = e.what();
    }
  });
  Dataset out;
  for (std::size_t k = 0; k < n; ++k) {
    if (data[k].diverged) {
      out.dropped.push_back("scenario " + std::to_string(scenarios[k].id) + ": " + failure[k]);
      continue;
    }
    out.physics.push_back(std::make_unique<ScenarioPhysics>(net, scenarios[k], spec));
    out.scenarios.push_back(std::move(data[k]));
  }
  return out;
}

TrainingSet make_training_set(const Dataset& data, Index stride) {
  TrainingSet set;
  set.scenarios = data.scenarios;
  set.scales = fit_loss_scales(data.scenarios);
  set.sample_stride = stride;
  return set;
}

void write_dataset_csv(const std::string& dir, const NetworkModel& net, const Dataset& data) {
  std::filesystem::create_directories(dir);
  const auto in_names = internal_state_names(net), ex_names = external_state_names(net);
  for (std::size_t k = 0; k < data.scenarios.size(); ++k) {
    const ScenarioData& d = data.scenarios[k];
    const FeatureMap& fm = data.physics[k]->features;
    std::vector<std::string> names = in_names;
    names.insert(names.end(), ex_names.begin(), ex_names.end());
    for (const auto& f : fm.names()) names.push_back("s_" + f);
    std::vector<VectorXd> rows;
    VectorXd times(d.nodes());
    for (Index i = 0; i < d.nodes(); ++i) {
      times[i] = d.grid.time(i);
      const VectorXd s = fm.eval(d.x_in[i], d.x_ex[i], d.scenario.stage_at(times[i]));
      VectorXd r(d.x_in[i].size() + d.x_ex[i].size() + s.size());
      r << d.x_in[i], d.x_ex[i], s;
      rows.push_back(std::move(r));
    }
    write_trajectory_csv(dir + "/scenario_" + std::to_string(d.scenario.id) + ".csv", names, times, rows);
  }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

NeuralOdeModel initial_model(const ExperimentConfig& cfg, const Dataset& data) {
  if (data.scenarios.empty()) throw Error(ErrorKind::Data, "no usable training scenarios");
  const Index nex = data.scenarios.front().x_ex.front().size();
  NeuralOdeModel model = NeuralOdeModel::create(nex, data.physics.front()->features.size(), cfg.hidden, cfg.seed);
  model.net().set_normalization(fit_normalization(data.scenarios, data.physics_view()));
  return model;
}

TrainResult train_surrogate(const ExperimentConfig& cfg, const Dataset& data, GradientMode mode,
                            const JacobianEstimate* estimate) {
  const TrainingSet set = make_training_set(data, cfg.sample_stride);
  const auto physics = data.physics_view();
  NeuralOdeModel model = initial_model(cfg, data);
  if (cfg.warm_start_epochs > 0)
    model = fit_derivatives(model, physics, set, cfg.warm_start_epochs, cfg.warm_start_learning_rate,
                            cfg.warm_start_stride);
  return train(model, physics, set, mode, cfg.optimizer, estimate);
}

JacobianEstimate estimate_jacobian(const Dataset& data, std::vector<std::string>* warnings) {
  std::vector<ScenarioData> nominal;
  const ScenarioPhysics* physics = nullptr;
  for (std::size_t k = 0; k < data.scenarios.size(); ++k) {
    if (std::abs(data.scenarios[k].scenario.load_scale - 1.0) > 1e-12) continue;
    nominal.push_back(data.scenarios[k]);
    if (!physics) physics = data.physics[k].get();
  }
  if (nominal.empty()) throw Error(ErrorKind::Data, "Jacobian estimation needs nominal-load scenarios");
  return pg_estimate_jacobian(nominal, nominal.front().x0_ex, nominal.front().x0_in,
                              connectivity_mask(physics->insys), warnings);
}

GradientCheck gradient_check(const ExperimentConfig& cfg, GradientMode mode, int coordinates, double step) {
  if (coordinates < 1 || !(step > 0.0)) throw Error(ErrorKind::Config, "gradient check needs coordinates and a step");
  const NetworkModel net = load_experiment_network(cfg);
  const auto train = generate_scenarios(cfg, Split::Train);
  if (train.empty()) throw Error(ErrorKind::Config, "gradient check needs a training scenario");
  const Dataset data = build_dataset(net, cfg, {train.front()});
  if (data.scenarios.empty()) throw Error(ErrorKind::Divergence, "ground truth diverged: " + data.dropped.front());
  const TrainingSet set = make_training_set(data, cfg.sample_stride);
  const NeuralOdeModel model = initial_model(cfg, data);
  const ScenarioPhysics& physics = *data.physics.front();
  const ScenarioData& sd = data.scenarios.front();

  GradientCheck out;
  const GradientResult g = pi_gradient(model, physics, sd, set.scales, mode, cfg.sample_stride);
  out.loss = g.loss;
  std::mt19937_64 rng(cfg.seed + 17);
  const auto n = static_cast<std::uint64_t>(model.parameter_count());
  for (int c = 0; c < coordinates; ++c) {
    GradientCheckEntry e;
    e.coordinate = static_cast<Index>(rng() % n);
    NeuralOdeModel m = model;
    VectorXd theta = model.net().parameters();
    theta[e.coordinate] += step;
    m.net().set_parameters(theta);
    const double up = scenario_loss(m, physics, sd, set.scales, mode, cfg.sample_stride);
    theta[e.coordinate] -= 2.0 * step;
    m.net().set_parameters(theta);
    const double down = scenario_loss(m, physics, sd, set.scales, mode, cfg.sample_stride);
    e.adjoint = g.grad[e.coordinate];
    e.finite_difference = (up - down) / (2.0 * step);
    const double denom = std::max({std::abs(e.finite_difference), std::abs(e.adjoint), 1e-12});
    e.relative_error = std::abs(e.adjoint - e.finite_difference) / denom;
    out.max_relative_error = std::max(out.max_relative_error, e.relative_error);
    out.entries.push_back(e);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

Rollout neural_rollout(const NeuralOdeModel& model) {
  return [model](const ScenarioPhysics& p, const HybridState& x0, const FaultScenario& sc, const TimeGrid& g) {
    return simulate_closed_loop(model, p, x0, sc, g);
  };
}

Rollout discrete_rollout(const DiscreteSurrogate& model) {
  return [model](const ScenarioPhysics& p, const HybridState& x0, const FaultScenario& sc, const TimeGrid& g) {
    return simulate_discrete_closed_loop(model, p, x0, sc, g);
  };
}

BoxStats box_stats(std::vector<double> v) {
  BoxStats b;
  b.count = static_cast<Index>(v.size());
  if (v.empty()) return b;
  std::sort(v.begin(), v.end());
  auto q = [&](double p) {
    const double pos = p * static_cast<double>(v.size() - 1);
    const std::size_t i = static_cast<std::size_t>(std::floor(pos));
    const double frac = pos - static_cast<double>(i);
    return i + 1 < v.size() ? v[i] + frac * (v[i + 1] - v[i]) : v[i];
  };
  b.min = v.front();
  b.max = v.back();
  b.q1 = q(0.25);
  b.median = q(0.5);
  b.q3 = q(0.75);
  const double iqr = b.q3 - b.q1;
  b.lower_whisker = *std::lower_bound(v.begin(), v.end(), b.q1 - 1.5 * iqr);
  b.upper_whisker = *(std::upper_bound(v.begin(), v.end(), b.q3 + 1.5 * iqr) - 1);
  return b;
}

EvaluationReport evaluate(const Rollout& rollout, const NetworkModel& net, const ExperimentConfig& cfg,
                          const std::vector<FaultScenario>& scenarios, int threads) {
  EvaluationReport report;
  const auto ex_names = external_state_names(net);
  const auto in_names = internal_state_names(net);
  const auto boundary = boundary_buses(net);
  const Index nex = static_cast<Index>(ex_names.size()), nin = static_cast<Index>(in_names.size());
  const Index nm = nin / 2;
  report.monitored = ex_names;
  for (Index k = 0; k < nm; ++k) report.monitored.push_back(in_names[static_cast<std::size_t>(2 * k + 1)]);
  report.criterion_states = static_cast<Index>(report.monitored.size());
  for (Index b : boundary) report.monitored.push_back("Vmag_" + std::to_string(net.buses[static_cast<std::size_t>(b)].id));
  const Index nmon = static_cast<Index>(report.monitored.size());
  const FeatureSpec spec = FeatureSpec::defaults(net);

  report.scenarios.resize(scenarios.size());
  parallel_for(static_cast<Index>(scenarios.size()), threads, [&](Index k) {
    const FaultScenario& sc = scenarios[static_cast<std::size_t>(k)];
    ScenarioReport& r = report.scenarios[static_cast<std::size_t>(k)];
    r.scenario = sc;
    const FullSystem full(net, sc);
    const ScenarioPhysics physics(net, sc, spec);
    const VectorXd x0 = full.equilibrium_state();
    Trajectory truth, sur;
    try {
      truth = integrate([&](const VectorXd& x, FaultStage s) { return full.rhs(x, s); }, x0, cfg.grid, sc);
    } catch (const Error& e) {
      if (!e.numerical()) throw;
      r.diverged = true;
      r.message = std::string("ground truth: ") + e.what();
      return;
    }
    try {
      sur = rollout(physics, HybridState{full.internal_states(x0), full.external_states(x0), cfg.grid.t0}, sc,
                    cfg.grid);
    } catch (const Error& e) {
      if (!e.numerical()) throw;
      r.diverged = true;
      r.message = e.what();
      return;
    }
    const Index n = truth.size();
    r.times = truth.times;
    r.truth.assign(static_cast<std::size_t>(nmon), VectorXd(n));
    r.surrogate.assign(static_cast<std::size_t>(nmon), VectorXd(n));
    std::vector<Index> local;
    for (Index b : boundary) {
      const auto& buses = physics.insys.buses();
      local.push_back(static_cast<Index>(std::find(buses.begin(), buses.end(), b) - buses.begin()));
    }
    for (Index i = 0; i < n; ++i) {
      const FaultStage stage = sc.stage_at(truth.times[i]);
      const VectorXd& z = sur.states[i];
      if (!z.allFinite() || z.cwiseAbs().maxCoeff() > 1e3) {
        r.diverged = true;
        r.message = "surrogate state left the physical range at t=" + std::to_string(truth.times[i]);
        return;
      }
      const VectorXd t_ex = full.external_states(truth.states[i]), t_in = full.internal_states(truth.states[i]);
      const VectorXd s_in = z.head(nin), s_ex = z.tail(nex);
      Index c = 0;
      for (Index j = 0; j < nex; ++j, ++c) {
        r.truth[c][i] = t_ex[j];
        r.surrogate[c][i] = s_ex[j];
      }
      for (Index m = 0; m < nm; ++m, ++c) {
        r.truth[c][i] = t_in[2 * m + 1];
        r.surrogate[c][i] = s_in[2 * m + 1];
      }
      const VectorXcd vt = full.bus_voltages(truth.states[i], stage);
      const VectorXcd vs = physics.insys.bus_voltages(s_in, s_ex, stage);
      for (std::size_t b = 0; b < boundary.size(); ++b, ++c) {
        r.truth[c][i] = std::abs(vt[boundary[b]]);
        r.surrogate[c][i] = std::abs(vs[local[b]]);
      }
    }
    r.relative.resize(static_cast<std::size_t>(nmon));
    double crit_sum = 0.0, volt_sum = 0.0;
    for (Index c = 0; c < nmon; ++c) {
      const double scale = r.truth[c].cwiseAbs().maxCoeff() + kRelativeErrorEpsilon;
      r.relative[c] = (r.surrogate[c] - r.truth[c]).cwiseAbs() / scale;
      StateError se{report.monitored[static_cast<std::size_t>(c)], r.relative[c].mean(), r.relative[c].maxCoeff()};
      if (c < report.criterion_states) {
        crit_sum += se.mean;
        r.max_error = std::max(r.max_error, se.max);
      } else {
        volt_sum += se.mean;
      }
      r.states.push_back(se);
    }
    r.mean_error = crit_sum / static_cast<double>(report.criterion_states);
    const Index nv = nmon - report.criterion_states;
    r.voltage_mean_error = nv > 0 ? volt_sum / static_cast<double>(nv) : 0.0;
  });

  std::vector<double> means, maxes;
  for (auto& r : report.scenarios) {
    if (r.diverged) {
      ++report.diverged;
      r.truth.clear();
      r.surrogate.clear();
      r.relative.clear();
      r.states.clear();
      continue;
    }
    means.push_back(r.mean_error);
    maxes.push_back(r.max_error);
  }
  report.mean_error = box_stats(means);
  report.max_error = box_stats(maxes);
  return report;
}

std::string report_to_json_text(const EvaluationReport& report) {
  json j;
  j["monitored"] = report.monitored;
  j["criterion_states"] = report.criterion_states;
  j["relative_error_epsilon"] = kRelativeErrorEpsilon;
  j["diverged"] = report.diverged;
  j["aggregate"] = {{"mean_error", box_json(report.mean_error)}, {"max_error", box_json(report.max_error)}};
  json arr = json::array();
  for (const auto& r : report.scenarios) {
    json s;
    s["id"] = r.scenario.id;
    s["faulted_bus"] = r.scenario.faulted_bus;
    s["t_start"] = r.scenario.t_start;
    s["t_clear"] = r.scenario.t_clear;
    s["load_scale"] = r.scenario.load_scale;
    s["diverged"] = r.diverged;
    if (r.diverged) {
      s["message"] = r.message;
    } else {
      s["mean_error"] = r.mean_error;
      s["max_error"] = r.max_error;
      s["voltage_mean_error"] = r.voltage_mean_error;
      json states = json::array();
      for (const auto& e : r.states) states.push_back({{"name", e.name}, {"mean", e.mean}, {"max", e.max}});
      s["states"] = states;
    }
    arr.push_back(s);
  }
  j["scenarios"] = arr;
  return j.dump(2);
}

std::string scenario_csv(const EvaluationReport& report, const ScenarioReport& s) {
  std::string out = "t";
  for (const auto& name : report.monitored) out += "," + name + "_true," + name + "_model," + name + "_relerr";
  out += "\n";
  char buf[32];
  for (Index i = 0; i < s.times.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", s.times[i]);
    out += buf;
    for (std::size_t c = 0; c < s.truth.size(); ++c) {
      for (double v : {s.truth[c][i], s.surrogate[c][i], s.relative[c][i]}) {
        std::snprintf(buf, sizeof buf, ",%.17g", v);
        out += buf;
      }
    }
    out += "\n";
  }
  return out;
}

void write_report(const std::string& dir, const EvaluationReport& report) {
  std::filesystem::create_directories(dir);
  write_file_atomic(dir + "/report.json", report_to_json_text(report));
  for (const auto& s : report.scenarios) {
    if (s.diverged) continue;
    write_file_atomic(dir + "/scenario_" + std::to_string(s.scenario.id) + ".csv", scenario_csv(report, s));
  }
}

}  // namespace neudye
