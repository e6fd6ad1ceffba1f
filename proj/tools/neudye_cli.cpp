// Command-line front end: ground-truth simulation, data generation, training,
// Jacobian estimation, evaluation and gradient checks.

#include "neudye/harness.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace neudye;
using nlohmann::json;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  int threads = 0;  // 0: as configured
  bool verbose = false;
};

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Config, "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig config_of(const Globals& g) {
  if (g.config.empty()) throw Error(ErrorKind::Config, "--config is required");
  ExperimentConfig cfg = load_config(g.config);
  if (g.seed) {
    cfg.seed = *g.seed;
    cfg.dnn.seed = *g.seed;
  }
  if (g.threads > 0) cfg.optimizer.threads = g.threads;
  cfg.optimizer.verbose = g.verbose;
  cfg.dnn.verbose = g.verbose;
  return cfg;
}

GradientMode mode_of(const std::string& m) {
  if (m == "open") return GradientMode::OpenLoop;
  if (m == "pi") return GradientMode::PhysicsInformed;
  if (m == "pg") return GradientMode::PhysicsGuided;
  throw Error(ErrorKind::Config, "unknown gradient mode '" + m + "'");
}

Split split_of(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  if (s == "unseen") return Split::Unseen;
  throw Error(ErrorKind::Config, "split must be train, test or unseen");
}

void warn(const std::string& msg) { std::cerr << json{{"warning", msg}}.dump() << "\n"; }

// ---------------------------------------------------------------------------

struct SimulateArgs {
  int bus = -1;
  double clear = 0.0;
  double load = 1.0;
  std::string model;
};

int cmd_simulate(const Globals& g, const SimulateArgs& a) {
  const ExperimentConfig cfg = config_of(g);
  const NetworkModel net = load_experiment_network(cfg);
  FaultScenario sc;
  sc.faulted_bus = a.bus;
  sc.t_start = cfg.fault_start;
  sc.t_clear = a.bus >= 0 ? a.clear : cfg.fault_start + cfg.grid.h;
  sc.load_scale = a.load;
  sc.validate();
  fs::create_directories(g.out);
  const std::string path = g.out + "/trajectory.csv";

  if (a.model.empty()) {
    const FullSystem full(net, sc);
    const Trajectory tr = integrate([&](const VectorXd& x, FaultStage s) { return full.rhs(x, s); },
                                    full.equilibrium_state(), cfg.grid, sc);
    std::vector<std::string> names;
    for (std::size_t k = 0; k < net.machines.size(); ++k) {
      const std::string b = std::to_string(net.machines[k].bus);
      names.push_back("delta_" + b);
      names.push_back("dw_" + b);
    }
    const auto ex = external_state_names(net);
    names.insert(names.end(), ex.begin(), ex.end());
    write_trajectory_csv(path, names, tr.times, tr.states);
  } else {
    const ScenarioPhysics physics(net, sc, FeatureSpec::defaults(net));
    const HybridState x0{physics.insys.equilibrium_internal(), physics.insys.equilibrium_external(), cfg.grid.t0};
    const json mj = json::parse(read_text(a.model));
    const std::string text = mj.dump();
    const Trajectory tr = mj.value("kind", std::string("ode")) == "discrete"
                              ? discrete_rollout(discrete_from_json_text(text))(physics, x0, sc, cfg.grid)
                              : neural_rollout(model_from_json_text(text))(physics, x0, sc, cfg.grid);
    auto names = internal_state_names(net);
    const auto ex = external_state_names(net);
    names.insert(names.end(), ex.begin(), ex.end());
    write_trajectory_csv(path, names, tr.times, tr.states);
  }
  std::cout << json{{"trajectory", path}}.dump() << "\n";
  return 0;
}

int cmd_gen_data(const Globals& g) {
  const ExperimentConfig cfg = config_of(g);
  const NetworkModel net = load_experiment_network(cfg);
  json summary = json::object();
  std::vector<std::pair<std::string, Split>> splits{{"train", Split::Train}, {"test", Split::Test}};
  if (cfg.unseen) splits.emplace_back("unseen", Split::Unseen);
  for (const auto& [name, split] : splits) {
    const auto scenarios = generate_scenarios(cfg, split);
    const Dataset data = build_dataset(net, cfg, scenarios, cfg.optimizer.threads);
    for (const auto& d : data.dropped) warn(d);
    write_dataset_csv(g.out + "/dataset", net, data);
    json list = json::array();
    for (const auto& s : scenarios)
      list.push_back({{"id", s.id}, {"bus", s.faulted_bus}, {"t_start", s.t_start}, {"t_clear", s.t_clear},
                      {"load_scale", s.load_scale}});
    summary[name] = list;
  }
  write_file_atomic(g.out + "/dataset/scenarios.json", summary.dump(2));
  std::cout << json{{"dataset", g.out + "/dataset"}}.dump() << "\n";
  return 0;
}

int cmd_train(const Globals& g, const std::string& mode_flag) {
  ExperimentConfig cfg = config_of(g);
  const std::string mode = mode_flag.empty() ? cfg.mode : mode_flag;
  const NetworkModel net = load_experiment_network(cfg);
  const Dataset data = build_dataset(net, cfg, generate_scenarios(cfg, Split::Train), cfg.optimizer.threads);
  for (const auto& d : data.dropped) warn(d);
  if (data.scenarios.empty()) throw Error(ErrorKind::Data, "no usable training scenarios");
  fs::create_directories(g.out);

  json summary{{"mode", mode}, {"scenarios", data.scenarios.size()}};
  if (mode == "dnn") {
    const DnnResult r = dnn_baseline(data.physics_view(), make_training_set(data, cfg.dnn.stride), cfg.dnn);
    write_file_atomic(g.out + "/model.json", discrete_to_json_text(r.model));
    write_file_atomic(g.out + "/loss_history.csv", loss_history_csv(r.history));
    summary["one_step_error"] = r.one_step_error;
    summary["final_loss"] = r.history.empty() ? 0.0 : r.history.back().loss;
  } else {
    std::optional<JacobianEstimate> est;
    if (mode == "pg") {
      std::vector<std::string> warnings;
      est = estimate_jacobian(data, &warnings);
      for (const auto& w : warnings) warn(w);
      write_file_atomic(g.out + "/jacobian.json", jacobian_to_json_text(*est));
    }
    const TrainResult r = train_surrogate(cfg, data, mode_of(mode), est ? &*est : nullptr);
    write_file_atomic(g.out + "/model.json", model_to_json_text(r.model));
    write_file_atomic(g.out + "/loss_history.csv", loss_history_csv(r.history));
    summary["best_loss"] = r.best_loss;
    summary["epochs"] = r.history.size();
    summary["skipped"] = r.skipped_total;
  }
  write_file_atomic(g.out + "/train_summary.json", summary.dump(2));
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_estimate_jacobian(const Globals& g) {
  const ExperimentConfig cfg = config_of(g);
  const NetworkModel net = load_experiment_network(cfg);
  const Dataset data = build_dataset(net, cfg, generate_scenarios(cfg, Split::Train), cfg.optimizer.threads);
  for (const auto& d : data.dropped) warn(d);
  std::vector<std::string> warnings;
  const JacobianEstimate est = estimate_jacobian(data, &warnings);
  for (const auto& w : warnings) warn(w);
  fs::create_directories(g.out);
  write_file_atomic(g.out + "/jacobian.json", jacobian_to_json_text(est));
  std::cout << json{{"jacobian", g.out + "/jacobian.json"}, {"samples", est.samples}}.dump() << "\n";
  return 0;
}

int cmd_evaluate(const Globals& g, const std::string& model_path, const std::string& split) {
  const ExperimentConfig cfg = config_of(g);
  const NetworkModel net = load_experiment_network(cfg);
  const std::string path = model_path.empty() ? g.out + "/model.json" : model_path;
  const json mj = json::parse(read_text(path));
  const std::string text = mj.dump();
  const Rollout rollout = mj.value("kind", std::string("ode")) == "discrete"
                              ? discrete_rollout(discrete_from_json_text(text))
                              : neural_rollout(model_from_json_text(text));
  const EvaluationReport rep = evaluate(rollout, net, cfg, generate_scenarios(cfg, split_of(split)), cfg.optimizer.threads);
  write_report(g.out, rep);
  std::cout << json{{"report", g.out + "/report.json"},
                    {"median_mean_error", rep.mean_error.median},
                    {"median_max_error", rep.max_error.median},
                    {"diverged", rep.diverged}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_gradcheck(const Globals& g, const std::string& mode, int coordinates) {
  const ExperimentConfig cfg = config_of(g);
  const GradientCheck gc = gradient_check(cfg, mode_of(mode), coordinates);
  json entries = json::array();
  for (const auto& e : gc.entries)
    entries.push_back({{"coordinate", e.coordinate}, {"adjoint", e.adjoint}, {"finite_difference", e.finite_difference},
                       {"relative_error", e.relative_error}});
  if (!g.out.empty() && g.out != "-") {
    fs::create_directories(g.out);
    write_file_atomic(g.out + "/gradcheck.json",
                      json{{"loss", gc.loss}, {"max_relative_error", gc.max_relative_error}, {"entries", entries}}.dump(2));
  }
  std::cout << json{{"max_relative_error", gc.max_relative_error}}.dump() << "\n";
  return 0;
}

int report(const std::string& kind, const std::string& msg, int code) {
  std::cerr << json{{"error", kind}, {"message", msg}}.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural dynamic equivalent of an external power system"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "Experiment configuration (JSON)");
  auto* seed_opt = app.add_option("--seed", seed, "Override the configured seed");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--threads", g.threads, "Worker threads (overrides the config)")->check(CLI::PositiveNumber);
  app.add_flag("-v,--verbose", g.verbose, "Progress on stderr");

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "Ground-truth or closed-loop trajectory CSV");
  simulate->add_option("--bus", sim.bus, "Faulted bus id (omit for no fault)");
  simulate->add_option("--clear", sim.clear, "Absolute clearing time [s]");
  simulate->add_option("--load", sim.load, "Load scale factor");
  simulate->add_option("--model", sim.model, "Surrogate model JSON for a closed-loop run");

  auto* gen = app.add_subcommand("gen-data", "Simulate the configured scenarios and write dataset CSVs");

  std::string mode;
  auto* train = app.add_subcommand("train", "Train a surrogate");
  train->add_option("--mode", mode, "open | pi | pg | dnn")->check(CLI::IsMember({"open", "pi", "pg", "dnn"}));

  auto* jac = app.add_subcommand("estimate-jacobian", "Least-squares internal Jacobian estimate");

  std::string model_path, split = "test";
  auto* eval = app.add_subcommand("evaluate", "Closed-loop evaluation report");
  eval->add_option("--model", model_path, "Model JSON (default <out>/model.json)");
  eval->add_option("--split", split, "train | test | unseen")->check(CLI::IsMember({"train", "test", "unseen"}));

  std::string gc_mode = "pi";
  int coordinates = 20;
  auto* gc = app.add_subcommand("gradcheck", "Adjoint gradient against finite differences");
  gc->add_option("--mode", gc_mode, "open | pi")->check(CLI::IsMember({"open", "pi"}));
  gc->add_option("--coordinates", coordinates, "Number of parameter coordinates")->check(CLI::PositiveNumber);

  for (auto* sub : {simulate, gen, train, jac, eval, gc}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report("config", e.what(), 1);
  }
  if (*seed_opt) g.seed = seed;

  try {
    if (*simulate) return cmd_simulate(g, sim);
    if (*gen) return cmd_gen_data(g);
    if (*train) return cmd_train(g, mode);
    if (*jac) return cmd_estimate_jacobian(g);
    if (*eval) return cmd_evaluate(g, model_path, split);
    if (*gc) return cmd_gradcheck(g, gc_mode, coordinates);
  } catch (const Error& e) {
    return report(to_string(e.kind()), e.what(), e.numerical() ? 2 : 1);
  } catch (const json::exception& e) {
    return report("config", e.what(), 1);
  } catch (const std::exception& e) {
    return report("internal", e.what(), 2);
  }
  return 1;
}
