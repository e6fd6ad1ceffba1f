#include "neudye/neudye.hpp"

#include <json.hpp>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <sstream>

namespace neudye {

using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

BoolMatrix connectivity_mask(const InternalSystem& insys, double tolerance) {
  const Index nm = static_cast<Index>(insys.machines().size());
  const Index nex = insys.external_size(), nin = insys.internal_size();
  const MatrixXcd& Y = insys.effective_admittance(FaultStage::PreFault);
  const MatrixXcd& G = insys.port_gain(FaultStage::PreFault);
  BoolMatrix mask = BoolMatrix::Constant(nin, nex + nin, false);
  for (Index k = 0; k < nm; ++k) {
    for (Index r : {2 * k, 2 * k + 1}) {
      for (Index l = 0; l < nm; ++l) {
        if (l == k || std::abs(Y(k, l)) > tolerance) mask.row(r).segment(nex + 2 * l, 2).setConstant(true);
      }
      for (Index p = 0; p < G.cols(); ++p) {
        if (std::abs(G(k, p)) > tolerance) mask.row(r).segment(2 * p, 2).setConstant(true);
      }
    }
  }
  return mask;
}

JacobianEstimate pg_estimate_jacobian(const std::vector<ScenarioData>& data, const VectorXd& x0_ex,
                                      const VectorXd& x0_in, const BoolMatrix& mask,
                                      std::vector<std::string>* warnings) {
  const Index nex = x0_ex.size(), nin = x0_in.size(), n = nex + nin;
  if (mask.rows() != nin || mask.cols() != n) throw Error(ErrorKind::Structural, "mask shape mismatch");
  for (Index k = 0; k < nin; ++k)
    if (!mask(k, nex + k)) throw Error(ErrorKind::Structural, "mask row " + std::to_string(k) + " lacks its self-entry");
  VectorXd x0(n);
  x0 << x0_ex, x0_in;

  // One pass over the data: Gram and moment of the full regressor, then
  // restrict to each row's admitted columns.
  MatrixXd gram = MatrixXd::Zero(n, n);
  MatrixXd moment = MatrixXd::Zero(n, nin);
  Index samples = 0;
  for (const auto& sd : data) {
    if (sd.diverged) continue;
    if (sd.x_in.front().size() != nin || sd.x_ex.front().size() != nex)
      throw Error(ErrorKind::Structural, "scenario state size mismatch");
    const double h = sd.grid.h;
    for (Index i = 1; i < sd.nodes(); ++i) {
      if (sd.scenario.stage_at(sd.grid.time(i - 1)) == FaultStage::Fault) continue;
      VectorXd r(n);
      r << sd.x_ex[i] + sd.x_ex[i - 1], sd.x_in[i] + sd.x_in[i - 1];
      r -= 2.0 * x0;
      const VectorXd p = (2.0 / h) * (sd.x_in[i] - sd.x_in[i - 1]);
      gram.noalias() += r * r.transpose();
      moment.noalias() += r * p.transpose();
      ++samples;
    }
  }
  if (samples == 0) throw Error(ErrorKind::Data, "no regression samples");

  JacobianEstimate est;
  est.A = MatrixXd::Zero(nin, n);
  est.mask = mask;
  est.condition_numbers = VectorXd::Zero(nin);
  est.samples = samples;
  constexpr double ridge = 1e-10;
  for (Index k = 0; k < nin; ++k) {
    std::vector<Index> cols;
    for (Index c = 0; c < n; ++c)
      if (mask(k, c)) cols.push_back(c);
    const Index m = static_cast<Index>(cols.size());
    MatrixXd G(m, m);
    VectorXd b(m);
    for (Index a = 0; a < m; ++a) {
      b[a] = moment(cols[a], k);
      for (Index c = 0; c < m; ++c) G(a, c) = gram(cols[a], cols[c]);
    }
    G.diagonal().array() += ridge;
    const Eigen::SelfAdjointEigenSolver<MatrixXd> eig(G, Eigen::EigenvaluesOnly);
    const double lo = eig.eigenvalues().minCoeff(), hi = eig.eigenvalues().maxCoeff();
    est.condition_numbers[k] = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
    if (warnings && !(est.condition_numbers[k] < 1e12)) {
      std::ostringstream os;
      os << "ill-conditioned regression row " << k << " (condition number " << est.condition_numbers[k] << ")";
      warnings->push_back(os.str());
    }
    const VectorXd sol = G.ldlt().solve(b);
    for (Index a = 0; a < m; ++a) est.A(k, cols[a]) = sol[a];
  }
  return est;
}

std::string jacobian_to_json_text(const JacobianEstimate& est) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["rows"] = est.A.rows();
  j["cols"] = est.A.cols();
  std::vector<std::vector<double>> A(static_cast<std::size_t>(est.A.rows()));
  std::vector<std::vector<bool>> mask(A.size());
  for (Index r = 0; r < est.A.rows(); ++r) {
    for (Index c = 0; c < est.A.cols(); ++c) {
      A[r].push_back(est.A(r, c));
      mask[r].push_back(est.mask(r, c));
    }
  }
  j["A"] = A;
  j["mask"] = mask;
  j["condition_numbers"] = std::vector<double>(est.condition_numbers.data(),
                                               est.condition_numbers.data() + est.condition_numbers.size());
  j["samples"] = est.samples;
  return j.dump(2);
}

JacobianEstimate jacobian_from_json_text(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    const Index rows = j.at("rows").get<Index>(), cols = j.at("cols").get<Index>();
    const auto A = j.at("A").get<std::vector<std::vector<double>>>();
    const auto mask = j.at("mask").get<std::vector<std::vector<bool>>>();
    const auto cond = j.at("condition_numbers").get<std::vector<double>>();
    if (static_cast<Index>(A.size()) != rows || static_cast<Index>(mask.size()) != rows ||
        static_cast<Index>(cond.size()) != rows)
      throw Error(ErrorKind::Config, "Jacobian JSON: row count mismatch");
    JacobianEstimate est;
    est.A.resize(rows, cols);
    est.mask.resize(rows, cols);
    for (Index r = 0; r < rows; ++r) {
      if (static_cast<Index>(A[r].size()) != cols || static_cast<Index>(mask[r].size()) != cols)
        throw Error(ErrorKind::Config, "Jacobian JSON: column count mismatch");
      for (Index c = 0; c < cols; ++c) {
        est.A(r, c) = A[r][c];
        est.mask(r, c) = mask[r][c];
      }
    }
    est.condition_numbers = Eigen::Map<const VectorXd>(cond.data(), rows);
    est.samples = j.value("samples", Index{0});
    return est;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, std::string("Jacobian JSON: ") + e.what());
  }
}

}  // namespace neudye
