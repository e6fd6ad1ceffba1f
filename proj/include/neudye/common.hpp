#pragma once

#include <Eigen/Dense>

#include <complex>
#include <stdexcept>
#include <string>

namespace neudye {

using Complex = std::complex<double>;
using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using Eigen::MatrixXcd;
using Eigen::VectorXcd;

/// Failure categories surfaced by the library. The CLI maps `Config`,
/// `Structural` and `Data` to exit status 1 and the numerical kinds to 2.
enum class ErrorKind {
  Structural,
  DegenerateNetwork,
  NonConvergence,
  Divergence,
  AdjointDivergence,
  Config,
  Data,
  TrainingFailure,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

  bool numerical() const {
    return kind_ == ErrorKind::DegenerateNetwork || kind_ == ErrorKind::NonConvergence ||
           kind_ == ErrorKind::Divergence || kind_ == ErrorKind::AdjointDivergence ||
           kind_ == ErrorKind::TrainingFailure;
  }

 private:
  ErrorKind kind_;
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Structural: return "structural";
    case ErrorKind::DegenerateNetwork: return "degenerate_network";
    case ErrorKind::NonConvergence: return "nonconvergence";
    case ErrorKind::Divergence: return "divergence";
    case ErrorKind::AdjointDivergence: return "adjoint_divergence";
    case ErrorKind::Config: return "config";
    case ErrorKind::Data: return "data";
    case ErrorKind::TrainingFailure: return "training_failure";
  }
  return "unknown";
}

}  // namespace neudye
