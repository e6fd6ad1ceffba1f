#include "neudye/grid_model.hpp"
#include "neudye/kron.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <queue>
#include <set>
#include <sstream>

namespace neudye {

namespace {

constexpr Complex kJ{0.0, 1.0};
constexpr int kPowerFlowMaxIterations = 30;
constexpr double kPowerFlowTolerance = 1e-10;

bool same_branch(const Branch& br, int a, int b) {
  return (br.from == a && br.to == b) || (br.from == b && br.to == a);
}

bool is_tie_branch(const NetworkModel& net, const Branch& br) {
  if (!net.partition) return false;
  for (const auto& [a, b] : net.partition->tie_lines)
    if (same_branch(br, a, b)) return true;
  return false;
}

Index find_branch(const NetworkModel& net, int a, int b) {
  for (std::size_t i = 0; i < net.branches.size(); ++i)
    if (same_branch(net.branches[i], a, b)) return static_cast<Index>(i);
  std::ostringstream msg;
  msg << "no branch between buses " << a << " and " << b;
  throw Error(ErrorKind::Structural, msg.str());
}

MatrixXcd assemble(const NetworkModel& net, const std::vector<Index>& machines,
                   const std::vector<Index>& buses, const std::vector<char>& branch_enabled,
                   double load_scale, FaultStage stage, int faulted_bus) {
  const Index nm = static_cast<Index>(machines.size());
  const Index nb = static_cast<Index>(buses.size());
  std::vector<Index> local(net.buses.size(), -1);
  for (Index i = 0; i < nb; ++i) local[buses[i]] = nm + i;

  MatrixXcd Y = MatrixXcd::Zero(nm + nb, nm + nb);
  for (Index k = 0; k < nm; ++k) {
    const auto& mp = net.machines[machines[k]];
    const Index t = local[net.bus_index(mp.bus)];
    if (t < 0) throw Error(ErrorKind::Structural, "machine terminal bus outside its subnetwork");
    const Complex y = 1.0 / (kJ * mp.xd_prime);
    Y(k, k) += y;
    Y(t, t) += y;
    Y(k, t) -= y;
    Y(t, k) -= y;
  }
  for (std::size_t b = 0; b < net.branches.size(); ++b) {
    if (!branch_enabled[b]) continue;
    const auto& br = net.branches[b];
    const Index i = local[net.bus_index(br.from)];
    const Index j = local[net.bus_index(br.to)];
    if (i < 0 || j < 0) continue;
    Y(i, i) += br.admittance;
    Y(j, j) += br.admittance;
    Y(i, j) -= br.admittance;
    Y(j, i) -= br.admittance;
  }
  for (Index i = 0; i < nb; ++i) {
    const auto& bus = net.buses[buses[i]];
    const double scale = net.is_internal_bus(buses[i]) ? load_scale : 1.0;
    Y(nm + i, nm + i) += bus.shunt + scale * bus.load;
  }
  if (stage == FaultStage::Fault && faulted_bus >= 0) {
    const Index g = net.bus_index(faulted_bus);
    if (local[g] >= 0) Y(local[g], local[g]) += kFaultShunt;
  }
  return Y;
}

}  // namespace

// ---------------------------------------------------------------------------

double NetworkModel::omega_base() const { return 2.0 * std::numbers::pi * base_frequency_hz; }

Index NetworkModel::bus_index(int id) const {
  for (std::size_t i = 0; i < buses.size(); ++i)
    if (buses[i].id == id) return static_cast<Index>(i);
  throw Error(ErrorKind::Structural, "unknown bus id " + std::to_string(id));
}

bool NetworkModel::is_internal_bus(Index bus) const {
  if (!partition) return true;
  const int id = buses[bus].id;
  const auto& in = partition->internal_buses;
  return std::find(in.begin(), in.end(), id) != in.end();
}

void NetworkModel::validate() const {
  if (buses.empty()) throw Error(ErrorKind::Structural, "network has no buses");
  if (!(base_frequency_hz > 0.0)) throw Error(ErrorKind::Structural, "base frequency must be positive");
  if (!(tie_time_constant > 0.0)) throw Error(ErrorKind::Structural, "tie-line time constant must be positive");
  std::set<int> ids;
  for (const auto& b : buses)
    if (!ids.insert(b.id).second)
      throw Error(ErrorKind::Structural, "duplicate bus id " + std::to_string(b.id));

  const std::size_t n = buses.size();
  std::vector<std::vector<Index>> adj(n);
  for (const auto& br : branches) {
    const Index i = bus_index(br.from), j = bus_index(br.to);
    if (i == j) throw Error(ErrorKind::Structural, "branch connects a bus to itself");
    adj[i].push_back(j);
    adj[j].push_back(i);
  }
  std::vector<char> seen(n, 0);
  std::queue<Index> q;
  q.push(0);
  seen[0] = 1;
  while (!q.empty()) {
    const Index u = q.front();
    q.pop();
    for (Index v : adj[u])
      if (!seen[v]) {
        seen[v] = 1;
        q.push(v);
      }
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end())
    throw Error(ErrorKind::Structural, "branch graph is not connected");

  if (machines.empty()) throw Error(ErrorKind::Structural, "network has no machines");
  int slack = 0;
  std::set<int> machine_buses;
  for (const auto& m : machines) {
    bus_index(m.bus);
    if (!(m.inertia > 0.0)) throw Error(ErrorKind::Structural, "machine inertia must be positive");
    if (!(m.xd_prime > 0.0)) throw Error(ErrorKind::Structural, "machine x'd must be positive");
    if (!(m.v_setpoint > 0.0)) throw Error(ErrorKind::Structural, "machine voltage setpoint must be positive");
    if (!machine_buses.insert(m.bus).second)
      throw Error(ErrorKind::Structural, "more than one machine at bus " + std::to_string(m.bus));
    slack += m.slack ? 1 : 0;
  }
  if (slack != 1) throw Error(ErrorKind::Structural, "exactly one slack machine is required");

  if (partition) {
    std::set<int> in(partition->internal_buses.begin(), partition->internal_buses.end());
    std::set<int> ex(partition->external_buses.begin(), partition->external_buses.end());
    for (int id : in)
      if (ex.count(id)) throw Error(ErrorKind::Structural, "bus in both partitions");
    if (in.size() + ex.size() != n) throw Error(ErrorKind::Structural, "partition does not cover all buses");
    for (const auto& b : buses)
      if (!in.count(b.id) && !ex.count(b.id))
        throw Error(ErrorKind::Structural, "bus " + std::to_string(b.id) + " missing from partition");
    if (partition->tie_lines.empty()) throw Error(ErrorKind::Structural, "partition has no tie-lines");
    for (const auto& [a, b] : partition->tie_lines) {
      if (!in.count(a) || !ex.count(b))
        throw Error(ErrorKind::Structural, "tie-line must run from an internal to an external bus");
      const auto& br = branches[find_branch(*this, a, b)];
      const Complex z = 1.0 / br.admittance;
      if (!(z.imag() > 0.0)) throw Error(ErrorKind::Structural, "tie-line must be inductive");
    }
    for (const auto& br : branches) {
      const bool crosses = in.count(br.from) != in.count(br.to);
      if (crosses && !is_tie_branch(*this, br))
        throw Error(ErrorKind::Structural, "branch crossing the partition is not a tie-line");
    }
    bool has_internal_machine = false;
    for (const auto& m : machines) has_internal_machine |= in.count(m.bus) > 0;
    if (!has_internal_machine) throw Error(ErrorKind::Structural, "internal system has no machine");
  }
}

FaultStage FaultScenario::stage_at(double t) const {
  if (!has_fault()) return FaultStage::PreFault;
  constexpr double eps = 1e-9;
  if (t < t_start - eps) return FaultStage::PreFault;
  if (t < t_clear - eps) return FaultStage::Fault;
  return FaultStage::PostFault;
}

void FaultScenario::validate() const {
  if (has_fault() && !(t_clear > t_start))
    throw Error(ErrorKind::Config, "fault clearing time must follow fault start");
  if (!(load_scale >= 0.5 && load_scale <= 1.5))
    throw Error(ErrorKind::Config, "load scale outside [0.5, 1.5]");
}

MatrixXcd build_admittance(const NetworkModel& net, FaultStage stage, double load_scale,
                           int faulted_bus) {
  const Index n = static_cast<Index>(net.buses.size());
  MatrixXcd Y = MatrixXcd::Zero(n, n);
  for (const auto& br : net.branches) {
    const Index i = net.bus_index(br.from), j = net.bus_index(br.to);
    Y(i, i) += br.admittance;
    Y(j, j) += br.admittance;
    Y(i, j) -= br.admittance;
    Y(j, i) -= br.admittance;
  }
  for (Index i = 0; i < n; ++i) {
    const double scale = net.is_internal_bus(i) ? load_scale : 1.0;
    Y(i, i) += net.buses[i].shunt + scale * net.buses[i].load;
  }
  if (stage == FaultStage::Fault) {
    if (faulted_bus < 0) throw Error(ErrorKind::Structural, "fault stage requires a faulted bus");
    const Index f = net.bus_index(faulted_bus);
    Y(f, f) += kFaultShunt;
  }
  return Y;
}

// ---------------------------------------------------------------------------

OperatingPoint initialize_operating_point(const NetworkModel& net, double load_scale) {
  net.validate();
  const Index n = static_cast<Index>(net.buses.size());
  const MatrixXcd Y = build_admittance(net, FaultStage::PreFault, load_scale);

  enum Kind { PQ, PV, Slack };
  std::vector<Kind> kind(n, PQ);
  VectorXd vmag = VectorXd::Ones(n);
  VectorXd p_spec = VectorXd::Zero(n);
  for (const auto& m : net.machines) {
    const Index b = net.bus_index(m.bus);
    kind[b] = m.slack ? Slack : PV;
    vmag[b] = m.v_setpoint;
    p_spec[b] = m.p_setpoint;
  }
  std::vector<Index> ang_idx, mag_idx;
  for (Index i = 0; i < n; ++i) {
    if (kind[i] != Slack) ang_idx.push_back(i);
    if (kind[i] == PQ) mag_idx.push_back(i);
  }
  const Index na = static_cast<Index>(ang_idx.size());
  const Index nv = static_cast<Index>(mag_idx.size());
  VectorXd va = VectorXd::Zero(n);

  auto voltage = [&] {
    VectorXcd V(n);
    for (Index i = 0; i < n; ++i) V[i] = std::polar(vmag[i], va[i]);
    return V;
  };

  int iter = 0;
  bool converged = false;
  for (; iter <= kPowerFlowMaxIterations; ++iter) {
    const VectorXcd V = voltage();
    const VectorXcd I = Y * V;
    const VectorXcd S = V.cwiseProduct(I.conjugate());
    VectorXd mis(na + nv);
    for (Index k = 0; k < na; ++k) mis[k] = S[ang_idx[k]].real() - p_spec[ang_idx[k]];
    for (Index k = 0; k < nv; ++k) mis[na + k] = S[mag_idx[k]].imag();
    if (mis.cwiseAbs().maxCoeff() < kPowerFlowTolerance) {
      converged = true;
      break;
    }
    // dS/dVa = j diag(V) conj(diag(I) - Y diag(V));  dS/dVm = diag(V) conj(Y diag(V/|V|)) + conj(diag(I)) diag(V/|V|)
    const VectorXcd Vn = V.cwiseQuotient(vmag.cast<Complex>());
    MatrixXcd dS_dVa = MatrixXcd(-Y * V.asDiagonal());
    dS_dVa.diagonal() += I;
    dS_dVa = (kJ * V.asDiagonal() * dS_dVa.conjugate()).eval();
    MatrixXcd dS_dVm = V.asDiagonal() * (Y * Vn.asDiagonal()).conjugate();
    dS_dVm.diagonal() += I.conjugate().cwiseProduct(Vn);

    MatrixXd Jac(na + nv, na + nv);
    for (Index r = 0; r < na; ++r) {
      for (Index c = 0; c < na; ++c) Jac(r, c) = dS_dVa(ang_idx[r], ang_idx[c]).real();
      for (Index c = 0; c < nv; ++c) Jac(r, na + c) = dS_dVm(ang_idx[r], mag_idx[c]).real();
    }
    for (Index r = 0; r < nv; ++r) {
      for (Index c = 0; c < na; ++c) Jac(na + r, c) = dS_dVa(mag_idx[r], ang_idx[c]).imag();
      for (Index c = 0; c < nv; ++c) Jac(na + r, na + c) = dS_dVm(mag_idx[r], mag_idx[c]).imag();
    }
    Eigen::FullPivLU<MatrixXd> lu(Jac);
    if (!lu.isInvertible()) throw Error(ErrorKind::DegenerateNetwork, "singular power-flow Jacobian");
    const VectorXd dx = lu.solve(-mis);
    for (Index k = 0; k < na; ++k) va[ang_idx[k]] += dx[k];
    for (Index k = 0; k < nv; ++k) vmag[mag_idx[k]] += dx[na + k];
  }
  if (!converged) throw Error(ErrorKind::NonConvergence, "power flow did not converge");

  OperatingPoint op;
  op.load_scale = load_scale;
  op.power_flow_iterations = iter;
  op.bus_voltage = voltage();
  const VectorXcd I = Y * op.bus_voltage;
  const Index nm = static_cast<Index>(net.machines.size());
  op.emf.resize(nm);
  op.angle.resize(nm);
  op.mech_power.resize(nm);
  for (Index k = 0; k < nm; ++k) {
    const auto& m = net.machines[k];
    const Index b = net.bus_index(m.bus);
    const Complex ig = I[b];
    const Complex e = op.bus_voltage[b] + kJ * m.xd_prime * ig;
    op.emf[k] = std::abs(e);
    op.angle[k] = std::arg(e);
    op.mech_power[k] = (e * std::conj(ig)).real();
    if (!(op.emf[k] > 0.0)) throw Error(ErrorKind::DegenerateNetwork, "non-positive machine EMF");
  }
  if (net.partition) {
    const auto& ties = net.partition->tie_lines;
    op.tie_current.resize(static_cast<Index>(ties.size()));
    for (std::size_t t = 0; t < ties.size(); ++t) {
      const auto& br = net.branches[find_branch(net, ties[t].first, ties[t].second)];
      const Index a = net.bus_index(ties[t].first), b = net.bus_index(ties[t].second);
      op.tie_current[static_cast<Index>(t)] = br.admittance * (op.bus_voltage[a] - op.bus_voltage[b]);
    }
  }
  return op;
}

// ---------------------------------------------------------------------------

Subnetwork::Subnetwork(const NetworkModel& net, std::vector<Index> machines, std::vector<Index> buses,
                       std::vector<Index> ports, std::vector<char> branch_enabled, double load_scale,
                       int faulted_bus)
    : machines_(std::move(machines)), buses_(std::move(buses)), ports_(std::move(ports)) {
  const Index nm = static_cast<Index>(machines_.size());
  const Index nb = static_cast<Index>(buses_.size());
  const Index np = static_cast<Index>(ports_.size());

  MatrixXcd port_select = MatrixXcd::Zero(nb, np);
  std::vector<Index> retained;
  for (Index k = 0; k < nm; ++k) retained.push_back(k);
  for (Index p = 0; p < np; ++p) {
    const Index lb = local_bus(ports_[p]);
    if (lb < 0) throw Error(ErrorKind::Structural, "port bus outside its subnetwork");
    port_select(lb, p) = 1.0;
    retained.push_back(nm + lb);
  }

  for (FaultStage stage : {FaultStage::PreFault, FaultStage::Fault}) {
    const MatrixXcd Y = assemble(net, machines_, buses_, branch_enabled, load_scale, stage, faulted_bus);
    const MatrixXcd Ynn = Y.bottomRightCorner(nb, nb);
    Eigen::FullPivLU<MatrixXcd> lu(Ynn);
    if (!lu.isInvertible())
      throw Error(ErrorKind::DegenerateNetwork, "singular network admittance after reduction");
    StageMaps& m = maps_[static_cast<int>(stage)];
    m.bus_from_emf = -lu.solve(Y.bottomLeftCorner(nb, nm));
    m.bus_from_port = lu.solve(port_select);
    m.machine_from_emf = Y.topLeftCorner(nm, nm) + Y.topRightCorner(nm, nb) * m.bus_from_emf;
    m.machine_from_port = Y.topRightCorner(nm, nb) * m.bus_from_port;
    m.reduced = kron_reduce(Y, retained);
  }
  maps_[static_cast<int>(FaultStage::PostFault)] = maps_[static_cast<int>(FaultStage::PreFault)];
}

Index Subnetwork::local_bus(Index global_bus) const {
  const auto it = std::find(buses_.begin(), buses_.end(), global_bus);
  return it == buses_.end() ? -1 : static_cast<Index>(it - buses_.begin());
}

AdmittanceSet Subnetwork::admittance_set() const {
  AdmittanceSet set;
  for (int s = 0; s < 3; ++s) set.reduced[s] = maps_[s].reduced;
  set.machines = machines_;
  set.ports = ports_;
  return set;
}

// ---------------------------------------------------------------------------

FullSystem::FullSystem(const NetworkModel& net, const FaultScenario& scenario)
    : omega_base_(net.omega_base()),
      scenario_(scenario),
      machines_(net.machines),
      tie_time_constant_(net.tie_time_constant) {
  scenario_.validate();
  op_ = initialize_operating_point(net, scenario.load_scale);
  if (scenario_.has_fault()) net.bus_index(scenario_.faulted_bus);

  std::vector<Index> machines(net.machines.size()), buses(net.buses.size());
  for (std::size_t k = 0; k < machines.size(); ++k) machines[k] = static_cast<Index>(k);
  for (std::size_t b = 0; b < buses.size(); ++b) buses[b] = static_cast<Index>(b);

  std::vector<char> enabled(net.branches.size(), 1);
  std::vector<Index> ports;
  auto port_of = [&](Index bus) {
    auto it = std::find(ports.begin(), ports.end(), bus);
    if (it != ports.end()) return static_cast<Index>(it - ports.begin());
    ports.push_back(bus);
    return static_cast<Index>(ports.size() - 1);
  };
  if (net.partition) {
    for (const auto& [a, b] : net.partition->tie_lines) {
      const Index br = find_branch(net, a, b);
      enabled[br] = 0;
      tie_impedance_.push_back(1.0 / net.branches[br].admittance);
      const Index pa = port_of(net.bus_index(a));
      const Index pb = port_of(net.bus_index(b));
      tie_ports_.emplace_back(pa, pb);
    }
    for (std::size_t k = 0; k < net.machines.size(); ++k)
      if (net.is_internal_bus(net.bus_index(net.machines[k].bus)))
        internal_machines_.push_back(static_cast<Index>(k));
  } else {
    internal_machines_ = machines;
  }
  network_ = Subnetwork(net, std::move(machines), std::move(buses), std::move(ports), std::move(enabled),
                        scenario.load_scale, scenario.faulted_bus);
}

Index FullSystem::state_size() const { return 2 * num_machines() + 2 * num_ties(); }

VectorXd FullSystem::equilibrium_state() const {
  VectorXd x = VectorXd::Zero(state_size());
  for (Index k = 0; k < num_machines(); ++k) x[2 * k] = op_.angle[k];
  const Index off = 2 * num_machines();
  for (Index t = 0; t < num_ties(); ++t) {
    x[off + 2 * t] = op_.tie_current[t].real();
    x[off + 2 * t + 1] = op_.tie_current[t].imag();
  }
  return x;
}

VectorXcd FullSystem::emf_phasors(const VectorXd& x) const {
  VectorXcd E(num_machines());
  for (Index k = 0; k < num_machines(); ++k) E[k] = std::polar(op_.emf[k], x[2 * k]);
  return E;
}

VectorXcd FullSystem::port_injections(const VectorXd& x) const {
  VectorXcd J = VectorXcd::Zero(static_cast<Index>(network_.ports().size()));
  const Index off = 2 * num_machines();
  for (Index t = 0; t < num_ties(); ++t) {
    const Complex i(x[off + 2 * t], x[off + 2 * t + 1]);
    J[tie_ports_[t].first] -= i;
    J[tie_ports_[t].second] += i;
  }
  return J;
}

VectorXd FullSystem::rhs(const VectorXd& x, FaultStage stage) const {
  if (x.size() != state_size()) throw Error(ErrorKind::Structural, "full-system state size mismatch");
  const StageMaps& m = network_.maps(stage);
  const VectorXcd E = emf_phasors(x);
  const VectorXcd J = port_injections(x);
  const VectorXcd Im = m.machine_from_emf * E + m.machine_from_port * J;

  VectorXd dx(state_size());
  for (Index k = 0; k < num_machines(); ++k) {
    const auto& mp = machines_[k];
    const double pe = (E[k] * std::conj(Im[k])).real();
    const double dw = x[2 * k + 1];
    dx[2 * k] = omega_base_ * dw;
    dx[2 * k + 1] = (op_.mech_power[k] - pe - mp.damping * dw) / (2.0 * mp.inertia);
  }
  const Index off = 2 * num_machines();
  for (Index t = 0; t < num_ties(); ++t) {
    const Index bi = network_.ports()[tie_ports_[t].first];
    const Index be = network_.ports()[tie_ports_[t].second];
    const Complex Vi = (m.bus_from_emf.row(bi) * E + m.bus_from_port.row(bi) * J).value();
    const Complex Ve = (m.bus_from_emf.row(be) * E + m.bus_from_port.row(be) * J).value();
    const Complex i(x[off + 2 * t], x[off + 2 * t + 1]);
    const Complex di = ((Vi - Ve) / tie_impedance_[t] - i) / tie_time_constant_;
    dx[off + 2 * t] = di.real();
    dx[off + 2 * t + 1] = di.imag();
  }
  return dx;
}

VectorXcd FullSystem::bus_voltages(const VectorXd& x, FaultStage stage) const {
  const StageMaps& m = network_.maps(stage);
  return m.bus_from_emf * emf_phasors(x) + m.bus_from_port * port_injections(x);
}

VectorXd FullSystem::internal_states(const VectorXd& x) const {
  VectorXd out(2 * static_cast<Index>(internal_machines_.size()));
  for (std::size_t k = 0; k < internal_machines_.size(); ++k)
    out.segment<2>(2 * static_cast<Index>(k)) = x.segment<2>(2 * internal_machines_[k]);
  return out;
}

VectorXd FullSystem::external_states(const VectorXd& x) const {
  return x.tail(2 * num_ties());
}

// ---------------------------------------------------------------------------

InternalSystem::InternalSystem(const NetworkModel& net, const FaultScenario& scenario)
    : omega_base_(net.omega_base()), scenario_(scenario) {
  scenario_.validate();
  const OperatingPoint op = initialize_operating_point(net, scenario.load_scale);

  std::vector<Index> buses;
  for (std::size_t b = 0; b < net.buses.size(); ++b)
    if (net.is_internal_bus(static_cast<Index>(b))) buses.push_back(static_cast<Index>(b));
  for (std::size_t k = 0; k < net.machines.size(); ++k)
    if (net.is_internal_bus(net.bus_index(net.machines[k].bus))) machines_.push_back(static_cast<Index>(k));

  std::vector<char> enabled(net.branches.size(), 1);
  std::vector<Index> ports;
  if (net.partition) {
    for (const auto& [a, b] : net.partition->tie_lines) {
      enabled[find_branch(net, a, b)] = 0;
      const Index g = net.bus_index(a);
      auto it = std::find(ports.begin(), ports.end(), g);
      if (it == ports.end()) {
        ports.push_back(g);
        it = ports.end() - 1;
      }
      tie_port_.push_back(static_cast<Index>(it - ports.begin()));
      tie_bus_.push_back(g);
    }
  }
  network_ = Subnetwork(net, machines_, std::move(buses), std::move(ports), std::move(enabled),
                        scenario.load_scale, scenario.faulted_bus);

  const Index nm = static_cast<Index>(machines_.size());
  emf_.resize(nm);
  pm_.resize(nm);
  angle0_.resize(nm);
  for (Index k = 0; k < nm; ++k) {
    params_.push_back(net.machines[machines_[k]]);
    emf_[k] = op.emf[machines_[k]];
    pm_[k] = op.mech_power[machines_[k]];
    angle0_[k] = op.angle[machines_[k]];
  }
  tie_current0_ = op.tie_current;

  // Eliminate the boundary voltages from the Kron-reduced [machines; ports] matrix.
  const Index np = static_cast<Index>(network_.ports().size());
  for (int s = 0; s < 3; ++s) {
    const MatrixXcd& R = network_.maps(static_cast<FaultStage>(s)).reduced;
    Effective& eff = effective_[s];
    if (np == 0) {
      eff.admittance = R;
      eff.port_gain = MatrixXcd::Zero(nm, 0);
      continue;
    }
    Eigen::FullPivLU<MatrixXcd> lu(R.bottomRightCorner(np, np));
    if (!lu.isInvertible()) throw Error(ErrorKind::DegenerateNetwork, "singular boundary solve");
    const MatrixXcd Zbb = lu.inverse();
    eff.port_gain = R.topRightCorner(nm, np) * Zbb;
    eff.admittance = R.topLeftCorner(nm, nm) - eff.port_gain * R.bottomLeftCorner(np, nm);
  }
}

VectorXcd InternalSystem::emf_phasors(const VectorXd& x_in) const {
  VectorXcd E(static_cast<Index>(machines_.size()));
  for (Index k = 0; k < E.size(); ++k) E[k] = std::polar(emf_[k], x_in[2 * k]);
  return E;
}

VectorXcd InternalSystem::port_injections(const VectorXd& x_ex) const {
  VectorXcd J = VectorXcd::Zero(static_cast<Index>(network_.ports().size()));
  for (std::size_t t = 0; t < tie_port_.size(); ++t) {
    const Index ti = static_cast<Index>(t);
    J[tie_port_[t]] -= Complex(x_ex[2 * ti], x_ex[2 * ti + 1]);
  }
  return J;
}

VectorXd InternalSystem::rhs(const VectorXd& x_in, const VectorXd& x_ex, FaultStage stage) const {
  if (x_in.size() != internal_size() || x_ex.size() != external_size())
    throw Error(ErrorKind::Structural, "internal-system input size mismatch");
  const Effective& eff = effective_[static_cast<int>(stage)];
  const VectorXcd E = emf_phasors(x_in);
  const VectorXcd Im = eff.admittance * E + eff.port_gain * port_injections(x_ex);
  VectorXd dx(internal_size());
  for (Index k = 0; k < E.size(); ++k) {
    const double pe = (E[k] * std::conj(Im[k])).real();
    const double dw = x_in[2 * k + 1];
    dx[2 * k] = omega_base_ * dw;
    dx[2 * k + 1] = (pm_[k] - pe - params_[k].damping * dw) / (2.0 * params_[k].inertia);
  }
  return dx;
}

BlockJacobian InternalSystem::jacobians(const VectorXd& x_in, const VectorXd& x_ex, FaultStage stage) const {
  const Effective& eff = effective_[static_cast<int>(stage)];
  const VectorXcd E = emf_phasors(x_in);
  const VectorXcd Im = eff.admittance * E + eff.port_gain * port_injections(x_ex);
  const Index nm = E.size();
  BlockJacobian jac{MatrixXd::Zero(internal_size(), internal_size()),
                    MatrixXd::Zero(internal_size(), external_size())};
  for (Index k = 0; k < nm; ++k) {
    const double m2h = 2.0 * params_[k].inertia;
    jac.wrt_internal(2 * k, 2 * k + 1) = omega_base_;
    jac.wrt_internal(2 * k + 1, 2 * k + 1) = -params_[k].damping / m2h;
    for (Index l = 0; l < nm; ++l) {
      Complex dpe = E[k] * std::conj(eff.admittance(k, l) * kJ * E[l]);
      if (k == l) dpe += kJ * E[k] * std::conj(Im[k]);
      jac.wrt_internal(2 * k + 1, 2 * l) = -dpe.real() / m2h;
    }
    for (std::size_t t = 0; t < tie_port_.size(); ++t) {
      const Complex g = eff.port_gain(k, tie_port_[t]);
      const Index c = 2 * static_cast<Index>(t);
      jac.wrt_external(2 * k + 1, c) = -(E[k] * std::conj(-g)).real() / m2h;
      jac.wrt_external(2 * k + 1, c + 1) = -(E[k] * std::conj(-kJ * g)).real() / m2h;
    }
  }
  return jac;
}

VectorXcd InternalSystem::bus_voltages(const VectorXd& x_in, const VectorXd& x_ex, FaultStage stage) const {
  const StageMaps& m = network_.maps(stage);
  return m.bus_from_emf * emf_phasors(x_in) + m.bus_from_port * port_injections(x_ex);
}

VectorXd InternalSystem::equilibrium_internal() const {
  VectorXd x = VectorXd::Zero(internal_size());
  for (Index k = 0; k < angle0_.size(); ++k) x[2 * k] = angle0_[k];
  return x;
}

VectorXd InternalSystem::equilibrium_external() const {
  VectorXd x(external_size());
  for (Index t = 0; t < tie_current0_.size(); ++t) {
    x[2 * t] = tie_current0_[t].real();
    x[2 * t + 1] = tie_current0_[t].imag();
  }
  return x;
}

// ---------------------------------------------------------------------------

FeatureSpec FeatureSpec::defaults(const NetworkModel& net) {
  FeatureSpec spec;
  if (!net.partition) return spec;
  std::vector<int> boundary;
  for (const auto& [a, b] : net.partition->tie_lines)
    if (std::find(boundary.begin(), boundary.end(), a) == boundary.end()) boundary.push_back(a);
  spec.voltage_buses = boundary;
  for (int bb : boundary) {
    for (const auto& br : net.branches) {
      if (is_tie_branch(net, br)) continue;
      if (br.from == bb) spec.line_currents.emplace_back(br.from, br.to);
      else if (br.to == bb) spec.line_currents.emplace_back(br.to, br.from);
    }
  }
  return spec;
}

FeatureMap::FeatureMap(const NetworkModel& net, const InternalSystem& insys, FeatureSpec spec)
    : spec_(std::move(spec)), emf_(insys.emf()), tie_port_(insys.tie_port()) {
  const Index nm = static_cast<Index>(insys.machines().size());
  coi_weight_.resize(nm);
  for (Index k = 0; k < nm; ++k) coi_weight_[k] = insys.params()[k].inertia;
  coi_weight_ /= coi_weight_.sum();

  auto machine_name = [&](Index k) { return std::to_string(net.machines[insys.machines()[k]].bus); };
  if (spec_.coi_angles)
    for (Index k = 0; k < nm; ++k) names_.push_back("delta_coi_" + machine_name(k));
  if (spec_.speeds)
    for (Index k = 0; k < nm; ++k) names_.push_back("dw_" + machine_name(k));

  const Subnetwork& sub = insys.network();
  auto local = [&](int id) {
    const Index lb = sub.local_bus(net.bus_index(id));
    if (lb < 0) throw Error(ErrorKind::Config, "feature bus " + std::to_string(id) + " is not internal");
    return lb;
  };
  for (int id : spec_.voltage_buses) {
    const Index lb = local(id);
    LinearPhasor p;
    for (int s = 0; s < 3; ++s) {
      const StageMaps& m = sub.maps(static_cast<FaultStage>(s));
      p.emf_coeff[s] = m.bus_from_emf.row(lb);
      p.port_coeff[s] = m.bus_from_port.row(lb);
    }
    phasors_.push_back(p);
    names_.push_back("Vre_" + std::to_string(id));
    names_.push_back("Vim_" + std::to_string(id));
  }
  for (const auto& [a, b] : spec_.line_currents) {
    const Index la = local(a), lb = local(b);
    const Branch& br = net.branches[find_branch(net, a, b)];
    if (is_tie_branch(net, br)) throw Error(ErrorKind::Config, "line-current feature on a tie-line");
    LinearPhasor p;
    for (int s = 0; s < 3; ++s) {
      const StageMaps& m = sub.maps(static_cast<FaultStage>(s));
      p.emf_coeff[s] = br.admittance * (m.bus_from_emf.row(la) - m.bus_from_emf.row(lb));
      p.port_coeff[s] = br.admittance * (m.bus_from_port.row(la) - m.bus_from_port.row(lb));
    }
    phasors_.push_back(p);
    const std::string tag = std::to_string(a) + "_" + std::to_string(b);
    names_.push_back("Ire_" + tag);
    names_.push_back("Iim_" + tag);
  }
}

VectorXd FeatureMap::eval(const VectorXd& x_in, const VectorXd& x_ex, FaultStage stage) const {
  const Index nm = emf_.size();
  VectorXd s(size());
  Index r = 0;
  if (spec_.coi_angles) {
    double coi = 0.0;
    for (Index k = 0; k < nm; ++k) coi += coi_weight_[k] * x_in[2 * k];
    for (Index k = 0; k < nm; ++k) s[r++] = x_in[2 * k] - coi;
  }
  if (spec_.speeds)
    for (Index k = 0; k < nm; ++k) s[r++] = x_in[2 * k + 1];
  if (phasors_.empty()) return s;

  VectorXcd E(nm);
  for (Index k = 0; k < nm; ++k) E[k] = std::polar(emf_[k], x_in[2 * k]);
  VectorXcd J = VectorXcd::Zero(phasors_.front().port_coeff[0].size());
  for (std::size_t t = 0; t < tie_port_.size(); ++t) {
    const Index ti = static_cast<Index>(t);
    J[tie_port_[t]] -= Complex(x_ex[2 * ti], x_ex[2 * ti + 1]);
  }
  const int st = static_cast<int>(stage);
  for (const auto& p : phasors_) {
    const Complex q = (p.emf_coeff[st] * E).value() + (p.port_coeff[st] * J).value();
    s[r++] = q.real();
    s[r++] = q.imag();
  }
  return s;
}

BlockJacobian FeatureMap::jacobians(const VectorXd& x_in, const VectorXd& x_ex, FaultStage stage) const {
  (void)x_ex;  // features are affine in the tie currents
  const Index nm = emf_.size();
  const Index nin = 2 * nm;
  const Index nex = 2 * static_cast<Index>(tie_port_.size());
  BlockJacobian jac{MatrixXd::Zero(size(), nin), MatrixXd::Zero(size(), nex)};
  Index r = 0;
  if (spec_.coi_angles) {
    for (Index k = 0; k < nm; ++k, ++r) {
      for (Index l = 0; l < nm; ++l) jac.wrt_internal(r, 2 * l) = -coi_weight_[l];
      jac.wrt_internal(r, 2 * k) += 1.0;
    }
  }
  if (spec_.speeds)
    for (Index k = 0; k < nm; ++k, ++r) jac.wrt_internal(r, 2 * k + 1) = 1.0;

  const int st = static_cast<int>(stage);
  for (const auto& p : phasors_) {
    for (Index l = 0; l < nm; ++l) {
      const Complex d = p.emf_coeff[st](l) * kJ * std::polar(emf_[l], x_in[2 * l]);
      jac.wrt_internal(r, 2 * l) = d.real();
      jac.wrt_internal(r + 1, 2 * l) = d.imag();
    }
    for (std::size_t t = 0; t < tie_port_.size(); ++t) {
      const Complex g = p.port_coeff[st](tie_port_[t]);
      const Index c = 2 * static_cast<Index>(t);
      jac.wrt_external(r, c) = -g.real();
      jac.wrt_external(r + 1, c) = -g.imag();
      const Complex gj = -kJ * g;
      jac.wrt_external(r, c + 1) = gj.real();
      jac.wrt_external(r + 1, c + 1) = gj.imag();
    }
    r += 2;
  }
  return jac;
}

Measurement measure(const FullSystem& full, const FeatureMap& features, const VectorXd& x, FaultStage stage) {
  Measurement m;
  m.x_in = full.internal_states(x);
  m.x_ex = full.external_states(x);
  m.s_in = features.eval(m.x_in, m.x_ex, stage);
  return m;
}

std::vector<std::string> internal_state_names(const NetworkModel& net) {
  std::vector<std::string> names;
  for (const auto& m : net.machines) {
    if (!net.is_internal_bus(net.bus_index(m.bus))) continue;
    names.push_back("delta_" + std::to_string(m.bus));
    names.push_back("dw_" + std::to_string(m.bus));
  }
  return names;
}

std::vector<std::string> external_state_names(const NetworkModel& net) {
  std::vector<std::string> names;
  if (!net.partition) return names;
  for (const auto& [a, b] : net.partition->tie_lines) {
    const std::string tag = std::to_string(a) + "_" + std::to_string(b);
    names.push_back("Ire_" + tag);
    names.push_back("Iim_" + tag);
  }
  return names;
}

}  // namespace neudye
