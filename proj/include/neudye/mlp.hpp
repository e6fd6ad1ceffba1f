#pragma once

#include "neudye/common.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace neudye {

/// Per-feature affine maps around the network body:
///   u = (input - input_offset) / input_scale
///   output = output_scale .* y + output_offset
struct Normalization {
  VectorXd input_offset, input_scale;
  VectorXd output_offset, output_scale;

  static Normalization identity(Index inputs, Index outputs);
};

/// Fully connected network with tanh hidden layers and a linear output layer.
///
/// Parameters live in one flat vector, layer by layer: the weight matrix of
/// each layer in row-major order followed by its bias.
class Mlp {
 public:
  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Mlp() = default;
  /// Zero parameters and identity normalization.
  explicit Mlp(std::vector<Index> widths);
  /// Glorot-uniform weights, zero biases.
  static Mlp glorot(std::vector<Index> widths, std::uint64_t seed);

  const std::vector<Index>& widths() const { return widths_; }
  Index input_size() const { return widths_.front(); }
  Index output_size() const { return widths_.back(); }
  Index layers() const { return static_cast<Index>(widths_.size()) - 1; }
  Index parameter_count() const { return theta_.size(); }

  const VectorXd& parameters() const { return theta_; }
  void set_parameters(const VectorXd& theta);

  const Normalization& normalization() const { return norm_; }
  void set_normalization(Normalization norm);

  Eigen::Map<const RowMatrix> weight(Index layer) const;
  Eigen::Map<const VectorXd> bias(Index layer) const;

  VectorXd forward(const VectorXd& input) const;
  /// d output / d input.
  MatrixXd input_jacobian(const VectorXd& input) const;
  /// d output / d theta, columns in flattened parameter order.
  MatrixXd parameter_jacobian(const VectorXd& input) const;
  /// w^T d output / d theta without forming the Jacobian.
  VectorXd parameter_vjp(const VectorXd& input, const VectorXd& w) const;

 private:
  struct Activations {
    std::vector<VectorXd> a;  // a[0] normalized input, a[l] hidden outputs, a[L] raw output
  };

  void check_input(const VectorXd& input) const;
  Activations run(const VectorXd& input) const;
  Index weight_offset(Index layer) const { return offsets_[layer]; }
  Index bias_offset(Index layer) const { return offsets_[layer] + widths_[layer + 1] * widths_[layer]; }

  std::vector<Index> widths_;
  std::vector<Index> offsets_;
  VectorXd theta_;
  Normalization norm_;
};

/// The surrogate right-hand side dx_ex/dt = N(x_ex, s_in): an Mlp whose input
/// is the concatenation [x_ex; s_in].
class NeuralOdeModel {
 public:
  NeuralOdeModel() = default;
  NeuralOdeModel(Mlp net, Index external_size);

  /// Two tanh hidden layers of `hidden` units by default.
  static NeuralOdeModel create(Index external_size, Index feature_size, const std::vector<Index>& hidden,
                               std::uint64_t seed);

  Index external_size() const { return external_size_; }
  Index feature_size() const { return net_.input_size() - external_size_; }
  Index parameter_count() const { return net_.parameter_count(); }

  const Mlp& net() const { return net_; }
  Mlp& net() { return net_; }

  VectorXd forward(const VectorXd& x_ex, const VectorXd& s_in) const;
  /// (dN/dx_ex, dN/ds_in)
  std::pair<MatrixXd, MatrixXd> jacobian_input(const VectorXd& x_ex, const VectorXd& s_in) const;
  MatrixXd jacobian_params(const VectorXd& x_ex, const VectorXd& s_in) const;
  VectorXd params_vjp(const VectorXd& x_ex, const VectorXd& s_in, const VectorXd& w) const;

 private:
  VectorXd stack(const VectorXd& x_ex, const VectorXd& s_in) const;

  Mlp net_;
  Index external_size_ = 0;
};

std::string model_to_json_text(const NeuralOdeModel& model);
NeuralOdeModel model_from_json_text(const std::string& text);
std::string mlp_to_json_text(const Mlp& net);
Mlp mlp_from_json_text(const std::string& text);

}  // namespace neudye
