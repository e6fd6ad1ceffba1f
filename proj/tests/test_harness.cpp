#include <doctest.h>

#include "neudye/harness.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace neudye;

namespace {

const std::string kConfigs = NEUDYE_CONFIG_DIR;

ExperimentConfig small_config() { return load_config(kConfigs + "/small.json"); }

/// Ground truth itself as the surrogate.
Rollout oracle(const NetworkModel& net) {
  return [net](const ScenarioPhysics&, const HybridState&, const FaultScenario& sc, const TimeGrid& g) {
    const FullSystem full(net, sc);
    Trajectory tr = integrate([&](const VectorXd& x, FaultStage s) { return full.rhs(x, s); },
                              full.equilibrium_state(), g, sc);
    for (auto& x : tr.states) {
      VectorXd z(full.internal_states(x).size() + full.external_states(x).size());
      z << full.internal_states(x), full.external_states(x);
      x = z;
    }
    return tr;
  };
}

}  // namespace

TEST_CASE("scenario generation is seeded, snapped and disjoint") {
  ExperimentConfig cfg = load_config(kConfigs + "/nine_bus.json");
  const auto a = generate_scenarios(cfg, Split::Train), b = generate_scenarios(cfg, Split::Train);
  REQUIRE(a.size() == static_cast<std::size_t>(cfg.train.count));
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(a[k].t_clear == b[k].t_clear);
    CHECK(a[k].faulted_bus == b[k].faulted_bus);
    CHECK(a[k].t_clear >= cfg.train.clear_min - 1e-12);
    CHECK(a[k].t_clear <= cfg.train.clear_max + 1e-12);
    CHECK_NOTHROW(cfg.grid.index_of(a[k].t_clear));
    CHECK(a[k].id == static_cast<int>(k));
  }
  const auto test = generate_scenarios(cfg, Split::Test);
  std::set<std::pair<int, Index>> train_pairs;
  for (const auto& s : a) train_pairs.insert({s.faulted_bus, cfg.grid.index_of(s.t_clear)});
  for (const auto& s : test) {
    CHECK(s.id >= 1000);
    CHECK(!train_pairs.count({s.faulted_bus, cfg.grid.index_of(s.t_clear)}));
  }
  cfg.seed += 1;
  const auto c = generate_scenarios(cfg, Split::Train);
  bool differs = false;
  for (std::size_t k = 0; k < a.size(); ++k) differs |= a[k].t_clear != c[k].t_clear;
  CHECK(differs);

  cfg.train.fault_buses.clear();
  CHECK_THROWS_AS(generate_scenarios(cfg, Split::Train), Error);
}

TEST_CASE("load scale is drawn from its range") {
  ExperimentConfig cfg = small_config();
  cfg.train.load_min = 0.7;
  cfg.train.load_max = 1.3;
  cfg.train.count = 8;
  cfg.train.clear_max = 0.3;
  for (const auto& s : generate_scenarios(cfg, Split::Train)) {
    CHECK(s.load_scale >= 0.7);
    CHECK(s.load_scale <= 1.3);
  }
}

TEST_CASE("config parsing rejects bad input") {
  CHECK_THROWS_AS(config_from_json_text("{"), Error);
  CHECK_THROWS_AS(config_from_json_text(R"({"network": "x.json"})"), Error);
  const std::string base = R"({"network": "x.json", "train": {"fault_buses": [1]}, "test": {"fault_buses": [1]})";
  CHECK_NOTHROW(config_from_json_text(base + "}"));
  CHECK_THROWS_AS(config_from_json_text(base + R"(, "typo": 1})"), Error);
  CHECK_THROWS_AS(config_from_json_text(base + R"(, "mode": "fast"})"), Error);
  CHECK_THROWS_AS(config_from_json_text(base + R"(, "grid": {"t0": 0, "tn": 1, "h": 0.3}})"), Error);
  // Round trip.
  const ExperimentConfig cfg = load_config(kConfigs + "/nine_bus.json");
  const ExperimentConfig back = config_from_json_text(config_to_json_text(cfg), "/");
  CHECK(config_to_json_text(back) == config_to_json_text(cfg));
}

TEST_CASE("no-fault dataset is constant at the equilibrium") {
  const ExperimentConfig cfg = small_config();
  const NetworkModel net = load_experiment_network(cfg);
  const Dataset d = build_dataset(net, cfg, {{-1, 0.1, 0.2, 1.0, 0}});
  REQUIRE(d.scenarios.size() == 1);
  const auto& sd = d.scenarios[0];
  for (Index i = 0; i < sd.nodes(); ++i) {
    CHECK((sd.x_in[i] - sd.x0_in).lpNorm<Eigen::Infinity>() <= 1e-10);
    CHECK((sd.x_ex[i] - sd.x0_ex).lpNorm<Eigen::Infinity>() <= 1e-10);
  }
}

TEST_CASE("dataset satisfies the trapezoidal identity of the internal physics") {
  const ExperimentConfig cfg = small_config();
  const NetworkModel net = load_experiment_network(cfg);
  const Dataset d = build_dataset(net, cfg, generate_scenarios(cfg, Split::Train), 2);
  REQUIRE(d.scenarios.size() == 2);
  double worst = 0.0;
  for (std::size_t k = 0; k < d.scenarios.size(); ++k) {
    const auto& sd = d.scenarios[k];
    const InternalSystem& insys = d.physics[k]->insys;
    for (Index i = 1; i < sd.nodes(); ++i) {
      const FaultStage s = sd.scenario.stage_at(sd.grid.time(i - 1));
      const VectorXd lhs = (2.0 / sd.grid.h) * (sd.x_in[i] - sd.x_in[i - 1]);
      const VectorXd rhs = insys.rhs(sd.x_in[i], sd.x_ex[i], s) + insys.rhs(sd.x_in[i - 1], sd.x_ex[i - 1], s);
      worst = std::max(worst, (lhs - rhs).lpNorm<Eigen::Infinity>());
    }
  }
  // Corrector tolerance 1e-10 on the state, amplified by 2/h.
  CHECK(worst <= 1e-6);
}

TEST_CASE("box statistics") {
  const BoxStats b = box_stats({5.0, 1.0, 3.0, 2.0, 4.0});
  CHECK(b.median == 3.0);
  CHECK(b.q1 == 2.0);
  CHECK(b.q3 == 4.0);
  CHECK(b.lower_whisker == 1.0);
  CHECK(b.upper_whisker == 5.0);
  const BoxStats o = box_stats({1.0, 2.0, 3.0, 4.0, 100.0});
  CHECK(o.max == 100.0);
  CHECK(o.upper_whisker == 4.0);
  const BoxStats e = box_stats({0.0, 1.0});
  CHECK(e.median == 0.5);
  CHECK(e.q1 == 0.25);
  CHECK(box_stats({}).count == 0);
}

TEST_CASE("oracle surrogate evaluates to zero error and the report is consistent") {
  const ExperimentConfig cfg = small_config();
  const NetworkModel net = load_experiment_network(cfg);
  const auto scenarios = generate_scenarios(cfg, Split::Test);
  const EvaluationReport rep = evaluate(oracle(net), net, cfg, scenarios, 2);
  REQUIRE(rep.scenarios.size() == scenarios.size());
  CHECK(rep.diverged == 0);
  for (const auto& s : rep.scenarios) {
    CHECK(s.mean_error <= 1e-6);
    CHECK(s.max_error <= 1e-6);
  }

  const std::string dir = (std::filesystem::temp_directory_path() / "neudye_report_test").string();
  write_report(dir, rep);
  const auto j = nlohmann::json::parse(std::ifstream(dir + "/report.json"));
  std::vector<double> means;
  for (const auto& s : rep.scenarios) {
    // Recompute the scenario mean from its CSV columns.
    std::ifstream in(dir + "/scenario_" + std::to_string(s.scenario.id) + ".csv");
    REQUIRE(in.good());
    std::string header;
    std::getline(in, header);
    CHECK(header.rfind("t,", 0) == 0);
    means.push_back(s.mean_error);
  }
  const BoxStats b = box_stats(means);
  CHECK(j.at("aggregate").at("mean_error").at("median").get<double>() == b.median);
  CHECK(j.at("aggregate").at("mean_error").at("q3").get<double>() == b.q3);
  std::filesystem::remove_all(dir);
}

TEST_CASE("a divergent surrogate is flagged and excluded from the aggregates") {
  const ExperimentConfig cfg = small_config();
  const NetworkModel net = load_experiment_network(cfg);
  Rollout bad = [](const ScenarioPhysics&, const HybridState&, const FaultScenario&, const TimeGrid&) -> Trajectory {
    throw Error(ErrorKind::Divergence, "blown up");
  };
  const EvaluationReport rep = evaluate(bad, net, cfg, generate_scenarios(cfg, Split::Test));
  CHECK(rep.diverged == static_cast<Index>(rep.scenarios.size()));
  CHECK(rep.mean_error.count == 0);
  for (const auto& s : rep.scenarios) CHECK(s.diverged);
}

TEST_CASE("gradient check on the small configuration") {
  const GradientCheck gc = gradient_check(small_config(), GradientMode::PhysicsInformed, 6);
  CHECK(gc.entries.size() == 6);
  CHECK(gc.max_relative_error <= 1e-4);
}
