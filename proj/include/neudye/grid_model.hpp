#pragma once

#include "neudye/common.hpp"

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace neudye {

// ---------------------------------------------------------------------------
// Static network description
// ---------------------------------------------------------------------------

enum class BusType { Machine, Load, Boundary };

struct Bus {
  int id = 0;
  BusType type = BusType::Load;
  Complex shunt{0.0, 0.0};
  /// Constant-impedance load admittance at nominal load level.
  Complex load{0.0, 0.0};
};

struct Branch {
  int from = 0;
  int to = 0;
  Complex admittance{0.0, 0.0};
};

/// Classical machine: constant EMF behind transient reactance. `p_setpoint`
/// and `v_setpoint` drive the power flow; Pm and E come from initialization.
struct MachineParams {
  int bus = 0;
  double inertia = 1.0;  // H [s]
  double damping = 0.0;  // D [p.u. torque / p.u. speed]
  double xd_prime = 0.1;
  double p_setpoint = 0.0;
  double v_setpoint = 1.0;
  bool slack = false;
};

struct Partition {
  std::vector<int> internal_buses;
  std::vector<int> external_buses;
  /// Tie-lines as (internal bus id, external bus id); the current of each
  /// tie is oriented from its internal end to its external end.
  std::vector<std::pair<int, int>> tie_lines;
};

struct NetworkModel {
  std::vector<Bus> buses;
  std::vector<Branch> branches;
  std::vector<MachineParams> machines;
  std::optional<Partition> partition;
  double base_frequency_hz = 60.0;
  /// Lag of the tie-line currents toward the quasi-static branch current [s].
  double tie_time_constant = 0.02;

  double omega_base() const;
  Index bus_index(int id) const;  // throws Structural for unknown ids
  bool is_internal_bus(Index bus) const;

  /// Connectivity, partition and parameter checks.
  void validate() const;
};

// ---------------------------------------------------------------------------
// Scenarios and admittance bookkeeping
// ---------------------------------------------------------------------------

enum class FaultStage { PreFault = 0, Fault = 1, PostFault = 2 };

inline constexpr double kFaultShunt = 1e6;

struct FaultScenario {
  int faulted_bus = -1;  // bus id; negative means no fault
  double t_start = 0.1;
  double t_clear = 0.2;
  double load_scale = 1.0;
  int id = 0;

  bool has_fault() const { return faulted_bus >= 0; }
  /// Stage active on the interval starting at `t` (events switch stages at
  /// grid points).
  FaultStage stage_at(double t) const;
  void validate() const;
};

/// Bus admittance matrix over all network buses (tie-lines included as
/// ordinary branches). Load admittances of scalable buses are multiplied by
/// `load_scale`; the fault stage adds `kFaultShunt` at `faulted_bus`.
MatrixXcd build_admittance(const NetworkModel& net, FaultStage stage, double load_scale,
                           int faulted_bus = -1);

/// Reduced admittance matrices for the three fault stages over the same
/// retained nodes: machine internal nodes followed by port buses.
struct AdmittanceSet {
  std::array<MatrixXcd, 3> reduced;
  std::vector<Index> machines;  // global machine indices
  std::vector<Index> ports;     // global bus indices

  const MatrixXcd& at(FaultStage s) const { return reduced[static_cast<int>(s)]; }
};

// ---------------------------------------------------------------------------
// Power flow and equilibrium
// ---------------------------------------------------------------------------

struct OperatingPoint {
  double load_scale = 1.0;
  VectorXcd bus_voltage;
  VectorXd emf;         // |E| per machine
  VectorXd angle;       // initial delta per machine [rad]
  VectorXd mech_power;  // Pm per machine
  VectorXcd tie_current;
  int power_flow_iterations = 0;
};

/// Flat-start Newton power flow (mismatch tolerance 1e-10) followed by
/// classical machine initialization from terminal conditions.
OperatingPoint initialize_operating_point(const NetworkModel& net, double load_scale);

// ---------------------------------------------------------------------------
// Linear network solves
// ---------------------------------------------------------------------------

/// Linear maps of one network stage: with machine EMF phasors E and complex
/// current injections J at the port buses,
///   I_machine = machine_from_emf * E + machine_from_port * J
///   V_bus     = bus_from_emf * E + bus_from_port * J
struct StageMaps {
  MatrixXcd reduced;
  MatrixXcd machine_from_emf;
  MatrixXcd machine_from_port;
  MatrixXcd bus_from_emf;
  MatrixXcd bus_from_port;
};

/// A set of buses and machines with tie-line injections at its ports.
class Subnetwork {
 public:
  Subnetwork() = default;
  Subnetwork(const NetworkModel& net, std::vector<Index> machines, std::vector<Index> buses,
             std::vector<Index> ports, std::vector<char> branch_enabled, double load_scale,
             int faulted_bus);

  const std::vector<Index>& machines() const { return machines_; }
  const std::vector<Index>& buses() const { return buses_; }
  const std::vector<Index>& ports() const { return ports_; }
  const StageMaps& maps(FaultStage s) const { return maps_[static_cast<int>(s)]; }

  /// Local position of a global bus index, or -1.
  Index local_bus(Index global_bus) const;
  AdmittanceSet admittance_set() const;

 private:
  std::vector<Index> machines_, buses_, ports_;
  std::array<StageMaps, 3> maps_;
};

/// Full-system ground truth: every machine swings, tie-line currents follow
///   tau dI/dt = (V_int - V_ext) / z_tie - I,
/// and the internal and external networks are solved algebraically.
/// State layout: [delta_k, dw_k] per machine, then [Re I_t, Im I_t] per tie.
class FullSystem {
 public:
  FullSystem(const NetworkModel& net, const FaultScenario& scenario);

  Index state_size() const;
  Index num_machines() const { return static_cast<Index>(machines_.size()); }
  Index num_ties() const { return static_cast<Index>(tie_impedance_.size()); }

  VectorXd equilibrium_state() const;
  VectorXd rhs(const VectorXd& x, FaultStage stage) const;

  /// Bus voltages (all buses, network order) at a full state.
  VectorXcd bus_voltages(const VectorXd& x, FaultStage stage) const;
  /// Internal machine states in partition order.
  VectorXd internal_states(const VectorXd& x) const;
  VectorXd external_states(const VectorXd& x) const;

  const OperatingPoint& operating_point() const { return op_; }
  const Subnetwork& network() const { return network_; }
  const FaultScenario& scenario() const { return scenario_; }
  const std::vector<Index>& internal_machines() const { return internal_machines_; }

 private:
  VectorXcd port_injections(const VectorXd& x) const;
  VectorXcd emf_phasors(const VectorXd& x) const;

  double omega_base_ = 0.0;
  FaultScenario scenario_;
  OperatingPoint op_;
  std::vector<MachineParams> machines_;
  Subnetwork network_;
  std::vector<Index> internal_machines_;
  std::vector<Complex> tie_impedance_;
  double tie_time_constant_ = 0.02;
  std::vector<std::pair<Index, Index>> tie_ports_;  // (internal port, external port)
};

/// Jacobian blocks of a function of (x_in, x_ex).
struct BlockJacobian {
  MatrixXd wrt_internal;
  MatrixXd wrt_external;
};

/// Internal-system physics with the network eliminated: the swing dynamics of
/// the internal machines driven by the tie-line currents x_ex injected at the
/// boundary buses.
class InternalSystem {
 public:
  InternalSystem(const NetworkModel& net, const FaultScenario& scenario);

  Index internal_size() const { return 2 * static_cast<Index>(machines_.size()); }
  Index external_size() const { return 2 * static_cast<Index>(tie_port_.size()); }

  VectorXd rhs(const VectorXd& x_in, const VectorXd& x_ex, FaultStage stage) const;
  BlockJacobian jacobians(const VectorXd& x_in, const VectorXd& x_ex, FaultStage stage) const;

  /// Internal bus voltages (order of `buses()`), from the full linear solve.
  VectorXcd bus_voltages(const VectorXd& x_in, const VectorXd& x_ex, FaultStage stage) const;

  VectorXd equilibrium_internal() const;
  VectorXd equilibrium_external() const;

  const Subnetwork& network() const { return network_; }
  const std::vector<Index>& machines() const { return machines_; }
  const std::vector<Index>& buses() const { return network_.buses(); }
  const std::vector<MachineParams>& params() const { return params_; }
  const VectorXd& emf() const { return emf_; }
  const std::vector<Index>& tie_port() const { return tie_port_; }
  /// Global bus index of the boundary end of each tie.
  const std::vector<Index>& tie_bus() const { return tie_bus_; }
  double omega_base() const { return omega_base_; }
  const FaultScenario& scenario() const { return scenario_; }

  VectorXcd emf_phasors(const VectorXd& x_in) const;
  VectorXcd port_injections(const VectorXd& x_ex) const;

  /// Machine currents from EMFs with open ports (Kron-reduced).
  const MatrixXcd& effective_admittance(FaultStage s) const { return effective_[static_cast<int>(s)].admittance; }
  /// Machine currents from port injections.
  const MatrixXcd& port_gain(FaultStage s) const { return effective_[static_cast<int>(s)].port_gain; }

 private:
  struct Effective {
    MatrixXcd admittance;  // machine currents from EMFs with open ports
    MatrixXcd port_gain;   // machine currents from port injections
  };

  double omega_base_ = 0.0;
  FaultScenario scenario_;
  Subnetwork network_;
  std::vector<Index> machines_;
  std::vector<MachineParams> params_;
  VectorXd emf_, pm_, angle0_;
  VectorXcd tie_current0_;
  std::vector<Index> tie_port_;
  std::vector<Index> tie_bus_;
  std::array<Effective, 3> effective_;
};

// ---------------------------------------------------------------------------
// Internal feature vector s_in
// ---------------------------------------------------------------------------

struct FeatureSpec {
  bool coi_angles = true;
  bool speeds = true;
  std::vector<int> voltage_buses;                     // bus ids; rectangular parts
  std::vector<std::pair<int, int>> line_currents;     // internal branches (from, to)

  /// Speeds, COI angles, boundary voltages and the internal branches incident
  /// to boundary buses.
  static FeatureSpec defaults(const NetworkModel& net);
};

class FeatureMap {
 public:
  FeatureMap() = default;
  FeatureMap(const NetworkModel& net, const InternalSystem& insys, FeatureSpec spec);

  Index size() const { return static_cast<Index>(names_.size()); }
  const std::vector<std::string>& names() const { return names_; }

  VectorXd eval(const VectorXd& x_in, const VectorXd& x_ex, FaultStage stage) const;
  BlockJacobian jacobians(const VectorXd& x_in, const VectorXd& x_ex, FaultStage stage) const;

 private:
  // One complex feature q = emf_coeff . E + port_coeff . J per stage.
  struct LinearPhasor {
    std::array<Eigen::RowVectorXcd, 3> emf_coeff;
    std::array<Eigen::RowVectorXcd, 3> port_coeff;
  };

  FeatureSpec spec_;
  std::vector<std::string> names_;
  VectorXd emf_;
  VectorXd coi_weight_;
  std::vector<Index> tie_port_;
  std::vector<LinearPhasor> phasors_;
};

struct Measurement {
  VectorXd x_in;
  VectorXd x_ex;
  VectorXd s_in;
};

/// Tie-line currents, internal machine states and internal features at a
/// full-system state.
Measurement measure(const FullSystem& full, const FeatureMap& features, const VectorXd& x,
                    FaultStage stage);

std::vector<std::string> internal_state_names(const NetworkModel& net);
std::vector<std::string> external_state_names(const NetworkModel& net);

// ---------------------------------------------------------------------------
// JSON / CSV interfaces
// ---------------------------------------------------------------------------

NetworkModel load_network(const std::string& path);
NetworkModel network_from_json_text(const std::string& text);
std::string network_to_json_text(const NetworkModel& net);

/// CSV with header `t,<names...>` and 10 significant digits.
void write_trajectory_csv(const std::string& path, const std::vector<std::string>& names,
                          const VectorXd& times, const std::vector<VectorXd>& states);

/// Writes to a temporary sibling and renames into place.
void write_file_atomic(const std::string& path, const std::string& contents);

}  // namespace neudye
