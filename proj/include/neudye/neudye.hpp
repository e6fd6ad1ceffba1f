#pragma once

#include "neudye/common.hpp"
#include "neudye/grid_model.hpp"
#include "neudye/integrators.hpp"
#include "neudye/mlp.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace neudye {

struct HybridState {
  VectorXd x_in;
  VectorXd x_ex;
  double t = 0.0;
};

/// lambda: adjoint of x_ex, mu: adjoint of x_in, grad_theta: running dL/dtheta.
struct AdjointState {
  VectorXd lambda;
  VectorXd mu;
  VectorXd grad_theta;
};

/// Estimated [dP/dx_ex, dP/dx_in] with its permitted nonzero pattern.
struct JacobianEstimate {
  MatrixXd A;
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> mask;
  VectorXd condition_numbers;
  Index samples = 0;

  Index external_size() const { return A.cols() - A.rows(); }
  MatrixXd wrt_external() const { return A.leftCols(external_size()); }
  MatrixXd wrt_internal() const { return A.rightCols(A.rows()); }
};

/// Internal physics and feature map of one scenario (load level and fault
/// location fix the network matrices).
struct ScenarioPhysics {
  InternalSystem insys;
  FeatureMap features;

  ScenarioPhysics(const NetworkModel& net, const FaultScenario& scenario, const FeatureSpec& spec)
      : insys(net, scenario), features(net, insys, spec) {}
};

/// Ground-truth measurements of one scenario on its simulation grid.
struct ScenarioData {
  FaultScenario scenario;
  TimeGrid grid;
  std::vector<VectorXd> x_in;  // per grid node
  std::vector<VectorXd> x_ex;
  VectorXd x0_in, x0_ex;       // pre-fault equilibrium
  bool diverged = false;

  Index nodes() const { return static_cast<Index>(x_in.size()); }
};

struct LossScales {
  VectorXd internal;
  VectorXd external;
};

struct TrainingSet {
  std::vector<ScenarioData> scenarios;
  LossScales scales;
  Index sample_stride = 1;  // loss terms at every stride-th grid node
};

/// Per-state standard deviations over a data set, floored at 1e-6.
LossScales fit_loss_scales(const std::vector<ScenarioData>& data);

/// Input statistics of [x_ex; s_in] and output scale from finite-difference
/// derivatives of x_ex; output offset zero.
Normalization fit_normalization(const std::vector<ScenarioData>& data,
                                const std::vector<const ScenarioPhysics*>& physics);

// ---------------------------------------------------------------------------
// Closed-loop hybrid system
// ---------------------------------------------------------------------------

/// z = [x_in; x_ex] evolving under [P(x_in, x_ex); N(x_ex, s(x_in, x_ex))].
class ClosedLoop {
 public:
  ClosedLoop(const NeuralOdeModel& model, const ScenarioPhysics& physics);

  Index internal_size() const { return nin_; }
  Index external_size() const { return nex_; }
  Index size() const { return nin_ + nex_; }

  VectorXd rhs(const VectorXd& z, FaultStage stage) const;
  /// Full state Jacobian. With `estimate`, the physics rows use its blocks
  /// instead of the analytic derivatives.
  MatrixXd jacobian(const VectorXd& z, FaultStage stage, const JacobianEstimate* estimate = nullptr) const;
  /// w^T d rhs / d theta.
  VectorXd params_vjp(const VectorXd& z, FaultStage stage, const VectorXd& w) const;

  VectorXd stack(const HybridState& s) const;

 private:
  const NeuralOdeModel* model_;
  const ScenarioPhysics* physics_;
  Index nin_, nex_;
};

/// Trapezoidal co-simulation of the physics and the surrogate. States are
/// stacked [x_in; x_ex] per grid node.
Trajectory simulate_closed_loop(const NeuralOdeModel& model, const ScenarioPhysics& physics, const HybridState& x0,
                                const FaultScenario& scenario, const TimeGrid& grid, const StepOptions& opt = {});

// ---------------------------------------------------------------------------
// Loss and gradients
// ---------------------------------------------------------------------------

struct LossValue {
  double total = 0.0;
  std::vector<double> per_sample;  // L_i for i = 1..n (index 0 unused, zero)
};

/// L_i = ||(x_ex,i - xhat_ex,i) ./ s_ex|| + ||(x_in,i - xhat_in,i) ./ s_in||,
/// summed over samples i = stride, 2*stride, ... (the initial node excluded).
/// Either block may be empty.
LossValue trajectory_loss(const std::vector<VectorXd>& x_in, const std::vector<VectorXd>& x_ex,
                          const std::vector<VectorXd>& xhat_in, const std::vector<VectorXd>& xhat_ex,
                          const LossScales& scales, Index stride = 1);

enum class GradientMode { OpenLoop, PhysicsInformed, PhysicsGuided };

struct GradientResult {
  double loss = 0.0;
  VectorXd grad;
  AdjointState initial;  // adjoint at t0 (before the t0 observation, which is excluded)
  Trajectory trajectory;
};

/// Forward pass plus trapezoidal adjoint sweep with observation jumps at the
/// loss samples. `horizon` > 0 truncates the scenario to its first seconds.
GradientResult pi_gradient(const NeuralOdeModel& model, const ScenarioPhysics& physics, const ScenarioData& data,
                           const LossScales& scales, GradientMode mode, Index stride = 1,
                           const JacobianEstimate* estimate = nullptr, double horizon = 0.0);

/// Closed-loop (or open-loop) loss only, for finite-difference checks.
double scenario_loss(const NeuralOdeModel& model, const ScenarioPhysics& physics, const ScenarioData& data,
                     const LossScales& scales, GradientMode mode, Index stride = 1, double horizon = 0.0);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainOptions {
  int max_epochs = 200;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 10.0;
  double plateau_tolerance = 1e-5;
  int plateau_window = 20;
  double horizon = 0.0;  // seconds of each scenario used for training; 0 = all
  int threads = 1;
  bool verbose = false;
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  int skipped = 0;
};

struct TrainResult {
  NeuralOdeModel model;
  std::vector<EpochRecord> history;
  double best_loss = 0.0;
  int skipped_total = 0;
};

/// Adam-style minimization of the summed scenario loss, full batch. Returns
/// the best-loss parameters.
TrainResult train(const NeuralOdeModel& model, const std::vector<const ScenarioPhysics*>& physics,
                  const TrainingSet& data, GradientMode mode, const TrainOptions& opt,
                  const JacobianEstimate* estimate = nullptr);

TrainResult train_open_loop(const NeuralOdeModel& model, const std::vector<const ScenarioPhysics*>& physics,
                            const TrainingSet& data, const TrainOptions& opt);
TrainResult train_pi(const NeuralOdeModel& model, const std::vector<const ScenarioPhysics*>& physics,
                     const TrainingSet& data, const TrainOptions& opt);
TrainResult train_pg(const NeuralOdeModel& model, const JacobianEstimate& estimate,
                     const std::vector<const ScenarioPhysics*>& physics, const TrainingSet& data,
                     const TrainOptions& opt);

/// Least-squares fit of N to finite-difference derivatives of the measured
/// x_ex with measured features (teacher forcing), by Adam on the normalized
/// residual. Used as a warm start.
NeuralOdeModel fit_derivatives(const NeuralOdeModel& model, const std::vector<const ScenarioPhysics*>& physics,
                               const TrainingSet& data, int epochs, double learning_rate, Index stride);

std::string loss_history_csv(const std::vector<EpochRecord>& history);

// ---------------------------------------------------------------------------
// Physics-guided Jacobian estimation
// ---------------------------------------------------------------------------

/// Row k admits the states of machines and tie-lines electrically coupled to
/// the machine owning state k, plus the row's own state.
Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> connectivity_mask(const InternalSystem& insys,
                                                                       double tolerance = 1e-9);

/// Row-wise least squares on the trapezoidal identity
///   (2/h)(x_in,k,i - x_in,k,i-1) = 2 P_k(x0) + A_k (x_i + x_{i-1} - 2 x0),
/// with x = [x_ex; x_in], x0 an equilibrium (P(x0) = 0), and only the
/// intervals of the pre- and post-fault stages used.
JacobianEstimate pg_estimate_jacobian(const std::vector<ScenarioData>& data, const VectorXd& x0_ex,
                                      const VectorXd& x0_in,
                                      const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>& mask,
                                      std::vector<std::string>* warnings = nullptr);

std::string jacobian_to_json_text(const JacobianEstimate& est);
JacobianEstimate jacobian_from_json_text(const std::string& text);

// ---------------------------------------------------------------------------
// Discrete-time baseline
// ---------------------------------------------------------------------------

/// x_ex,i+1 = x_ex,i + D(x_ex,i, s_in,i): a one-step map trained with teacher
/// forcing.
struct DiscreteSurrogate {
  Mlp net;
  Index external_size = 0;

  VectorXd step(const VectorXd& x_ex, const VectorXd& s_in) const;
};

std::string discrete_to_json_text(const DiscreteSurrogate& model);
DiscreteSurrogate discrete_from_json_text(const std::string& text);

struct DnnOptions {
  std::vector<Index> hidden{64, 64};
  int epochs = 2000;
  double learning_rate = 1e-3;
  Index stride = 1;
  std::uint64_t seed = 1;
  bool verbose = false;
};

struct DnnResult {
  DiscreteSurrogate model;
  double one_step_error = 0.0;  // one-step MSE over the state variance, training pairs
  std::vector<EpochRecord> history;
};

DnnResult dnn_baseline(const std::vector<const ScenarioPhysics*>& physics, const TrainingSet& data,
                       const DnnOptions& opt);

/// Alternates one trapezoidal step of the internal physics with one step of
/// the discrete surrogate.
Trajectory simulate_discrete_closed_loop(const DiscreteSurrogate& model, const ScenarioPhysics& physics,
                                         const HybridState& x0, const FaultScenario& scenario,
                                         const TimeGrid& grid, const StepOptions& opt = {});

/// Runs `fn(i)` for i in [0, n) on up to `threads` workers.
void parallel_for(Index n, int threads, const std::function<void(Index)>& fn);

}  // namespace neudye
