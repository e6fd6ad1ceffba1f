#pragma once

#include "neudye/neudye.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace neudye {

struct SplitConfig {
  std::vector<int> fault_buses;
  double clear_min = 0.15;  // absolute clearing times [s]
  double clear_max = 0.2;
  int count = 10;
  double load_min = 1.0;
  double load_max = 1.0;
};

struct ExperimentConfig {
  std::string network_path;
  std::optional<Partition> partition;  // overrides the network file's partition
  SplitConfig train;
  SplitConfig test;
  std::optional<SplitConfig> unseen;  // fault locations absent from training
  double fault_start = 0.1;
  TimeGrid grid{0.0, 10.0, 1e-3};
  std::vector<Index> hidden{64, 64};
  std::string mode = "pi";  // open | pi | pg | dnn
  TrainOptions optimizer;
  Index sample_stride = 1;
  int warm_start_epochs = 0;  // derivative-matching epochs before adjoint training
  double warm_start_learning_rate = 1e-3;
  Index warm_start_stride = 10;
  DnnOptions dnn;
  std::uint64_t seed = 1;
};

ExperimentConfig config_from_json_text(const std::string& text, const std::string& base_dir = ".");
ExperimentConfig load_config(const std::string& path);
std::string config_to_json_text(const ExperimentConfig& cfg);

/// The network file with the configured partition override applied.
NetworkModel load_experiment_network(const ExperimentConfig& cfg);

enum class Split { Train, Test, Unseen };

/// Seeded scenarios: fault buses in round-robin order, clearing times uniform
/// in the configured range and snapped to the grid, load scale uniform in its
/// range. Test scenarios never repeat a training (bus, clearing time) pair.
/// Training ids count from 0, test ids from 1000, unseen-location ids from 2000.
std::vector<FaultScenario> generate_scenarios(const ExperimentConfig& cfg, Split split);

/// Measurements of a set of scenarios together with their internal physics.
struct Dataset {
  std::vector<ScenarioData> scenarios;
  std::vector<std::unique_ptr<ScenarioPhysics>> physics;
  std::vector<std::string> dropped;  // diverged ground truth, one message per scenario

  std::vector<const ScenarioPhysics*> physics_view() const;
};

/// Full-system simulation of each scenario, measured at every grid point.
/// Diverged ground truth is dropped and reported.
Dataset build_dataset(const NetworkModel& net, const ExperimentConfig& cfg, const std::vector<FaultScenario>& scenarios,
                      int threads = 1);

/// Loss scales from the data, with the given stride.
TrainingSet make_training_set(const Dataset& data, Index stride);

/// Writes `scenario_<id>.csv` per scenario (t, x_in, x_ex, s_in).
void write_dataset_csv(const std::string& dir, const NetworkModel& net, const Dataset& data);

// ---------------------------------------------------------------------------
// Training entry points
// ---------------------------------------------------------------------------

/// Seeded surrogate with data-fitted normalization.
NeuralOdeModel initial_model(const ExperimentConfig& cfg, const Dataset& data);

/// Optional warm start followed by adjoint training in the given mode.
TrainResult train_surrogate(const ExperimentConfig& cfg, const Dataset& data, GradientMode mode,
                            const JacobianEstimate* estimate = nullptr);

/// Regression on the pre-fault-load (alpha = 1) training scenarios.
JacobianEstimate estimate_jacobian(const Dataset& data, std::vector<std::string>* warnings = nullptr);

/// Adjoint gradient against central finite differences of the closed-loop
/// loss on the first training scenario of `cfg`, at seeded random parameter
/// coordinates of the seeded initial model.
struct GradientCheckEntry {
  Index coordinate = 0;
  double adjoint = 0.0;
  double finite_difference = 0.0;
  double relative_error = 0.0;
};

struct GradientCheck {
  std::vector<GradientCheckEntry> entries;
  double max_relative_error = 0.0;
  double loss = 0.0;
};

GradientCheck gradient_check(const ExperimentConfig& cfg, GradientMode mode = GradientMode::PhysicsInformed,
                             int coordinates = 20, double step = 1e-6);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Closed-loop rollout of a surrogate for one scenario; states [x_in; x_ex].
using Rollout = std::function<Trajectory(const ScenarioPhysics&, const HybridState&, const FaultScenario&,
                                         const TimeGrid&)>;

Rollout neural_rollout(const NeuralOdeModel& model);
Rollout discrete_rollout(const DiscreteSurrogate& model);

struct StateError {
  std::string name;
  double mean = 0.0;
  double max = 0.0;
};

struct ScenarioReport {
  FaultScenario scenario;
  bool diverged = false;
  std::string message;
  std::vector<StateError> states;  // monitored states in report order
  double mean_error = 0.0;         // over tie-line currents and internal frequencies
  double max_error = 0.0;
  double voltage_mean_error = 0.0;
  VectorXd times;
  std::vector<VectorXd> truth, surrogate, relative;  // per monitored state, per node
};

struct BoxStats {
  Index count = 0;
  double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;
  double lower_whisker = 0.0, upper_whisker = 0.0;
};

/// Quartiles by linear interpolation; whiskers at the most extreme data
/// within 1.5 IQR of the box.
BoxStats box_stats(std::vector<double> values);

struct EvaluationReport {
  std::vector<std::string> monitored;
  Index criterion_states = 0;  // leading monitored states entering mean/max_error
  std::vector<ScenarioReport> scenarios;
  BoxStats mean_error;
  BoxStats max_error;
  Index diverged = 0;
};

inline constexpr double kRelativeErrorEpsilon = 1e-6;

/// Ground truth vs closed-loop surrogate per scenario. Monitored: tie-line
/// current components and internal speed deviations (the criterion states),
/// then boundary bus voltage magnitudes. Relative error per node is
/// |x - xhat| / (max_t |xhat| + 1e-6) with xhat the ground truth.
EvaluationReport evaluate(const Rollout& rollout, const NetworkModel& net, const ExperimentConfig& cfg,
                          const std::vector<FaultScenario>& scenarios, int threads = 1);

std::string report_to_json_text(const EvaluationReport& report);
/// `t` followed by truth, surrogate and relative error of each monitored state.
std::string scenario_csv(const EvaluationReport& report, const ScenarioReport& s);
/// Writes report.json and scenario_<id>.csv into `dir`.
void write_report(const std::string& dir, const EvaluationReport& report);

}  // namespace neudye
