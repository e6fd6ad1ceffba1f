#include "neudye/grid_model.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace neudye {

namespace {

using nlohmann::json;

Complex complex_from(const json& j, const char* what) {
  if (!j.is_object() || !j.contains("re") || !j.contains("im"))
    throw Error(ErrorKind::Config, std::string(what) + ": expected {re, im}");
  return {j.at("re").get<double>(), j.at("im").get<double>()};
}

json complex_to(Complex c) { return json{{"re", c.real()}, {"im", c.imag()}}; }

BusType bus_type_from(const std::string& s) {
  if (s == "machine") return BusType::Machine;
  if (s == "load") return BusType::Load;
  if (s == "boundary") return BusType::Boundary;
  throw Error(ErrorKind::Config, "unknown bus type '" + s + "'");
}

const char* bus_type_name(BusType t) {
  switch (t) {
    case BusType::Machine: return "machine";
    case BusType::Load: return "load";
    case BusType::Boundary: return "boundary";
  }
  return "load";
}

}  // namespace

NetworkModel network_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Config, std::string("network JSON: ") + e.what());
  }
  NetworkModel net;
  try {
    net.base_frequency_hz = j.at("base_frequency_hz").get<double>();
    net.tie_time_constant = j.value("tie_time_constant", 0.02);
    for (const auto& b : j.at("buses")) {
      Bus bus;
      bus.id = b.at("id").get<int>();
      bus.type = bus_type_from(b.value("type", std::string("load")));
      if (b.contains("shunt")) bus.shunt = complex_from(b.at("shunt"), "bus shunt");
      if (b.contains("load")) bus.load = complex_from(b.at("load"), "bus load");
      net.buses.push_back(bus);
    }
    for (const auto& b : j.at("branches")) {
      Branch br;
      br.from = b.at("from").get<int>();
      br.to = b.at("to").get<int>();
      br.admittance = complex_from(b.at("admittance"), "branch admittance");
      net.branches.push_back(br);
    }
    for (const auto& m : j.at("machines")) {
      MachineParams mp;
      mp.bus = m.at("bus").get<int>();
      mp.inertia = m.at("H").get<double>();
      mp.damping = m.value("D", 0.0);
      mp.xd_prime = m.at("xd_prime").get<double>();
      mp.p_setpoint = m.value("P", 0.0);
      mp.v_setpoint = m.value("V", 1.0);
      mp.slack = m.value("slack", false);
      net.machines.push_back(mp);
    }
    if (j.contains("partition") && !j.at("partition").is_null()) {
      const auto& p = j.at("partition");
      Partition part;
      part.internal_buses = p.at("internal").get<std::vector<int>>();
      part.external_buses = p.at("external").get<std::vector<int>>();
      for (const auto& t : p.at("tie_lines")) part.tie_lines.emplace_back(t.at(0).get<int>(), t.at(1).get<int>());
      net.partition = part;
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Config, std::string("network JSON: ") + e.what());
  }
  net.validate();
  return net;
}

NetworkModel load_network(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Config, "cannot open network file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return network_from_json_text(ss.str());
}

std::string network_to_json_text(const NetworkModel& net) {
  json j;
  j["base_frequency_hz"] = net.base_frequency_hz;
  j["tie_time_constant"] = net.tie_time_constant;
  j["buses"] = json::array();
  for (const auto& b : net.buses)
    j["buses"].push_back({{"id", b.id}, {"type", bus_type_name(b.type)}, {"shunt", complex_to(b.shunt)},
                          {"load", complex_to(b.load)}});
  j["branches"] = json::array();
  for (const auto& br : net.branches)
    j["branches"].push_back({{"from", br.from}, {"to", br.to}, {"admittance", complex_to(br.admittance)}});
  j["machines"] = json::array();
  for (const auto& m : net.machines)
    j["machines"].push_back({{"bus", m.bus}, {"H", m.inertia}, {"D", m.damping}, {"xd_prime", m.xd_prime},
                             {"P", m.p_setpoint}, {"V", m.v_setpoint}, {"slack", m.slack}});
  if (net.partition) {
    json ties = json::array();
    for (const auto& [a, b] : net.partition->tie_lines) ties.push_back({a, b});
    j["partition"] = {{"internal", net.partition->internal_buses},
                      {"external", net.partition->external_buses},
                      {"tie_lines", ties}};
  }
  return j.dump(2);
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Config, "cannot write " + tmp);
    out << contents;
    if (!out) throw Error(ErrorKind::Config, "write failed for " + tmp);
  }
  std::filesystem::rename(tmp, target);
}

void write_trajectory_csv(const std::string& path, const std::vector<std::string>& names,
                          const VectorXd& times, const std::vector<VectorXd>& states) {
  if (static_cast<std::size_t>(times.size()) != states.size())
    throw Error(ErrorKind::Structural, "trajectory CSV: time/state length mismatch");
  std::ostringstream out;
  out << "t";
  for (const auto& n : names) out << ',' << n;
  out << '\n' << std::setprecision(10);
  for (std::size_t i = 0; i < states.size(); ++i) {
    if (static_cast<std::size_t>(states[i].size()) != names.size())
      throw Error(ErrorKind::Structural, "trajectory CSV: state/header width mismatch");
    out << times[static_cast<Index>(i)];
    for (Index k = 0; k < states[i].size(); ++k) out << ',' << states[i][k];
    out << '\n';
  }
  write_file_atomic(path, out.str());
}

}  // namespace neudye
