#include "neudye/mlp.hpp"

#include <json.hpp>

#include <cmath>
#include <random>

namespace neudye {

namespace {

constexpr int kModelFormatVersion = 1;

VectorXd vector_from(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Index>(v.size()));
}

std::vector<double> vector_to(const VectorXd& v) { return {v.data(), v.data() + v.size()}; }

nlohmann::json mlp_json(const Mlp& net) {
  const Normalization& n = net.normalization();
  nlohmann::json j;
  j["format_version"] = kModelFormatVersion;
  j["widths"] = net.widths();
  j["activation"] = "tanh";
  j["theta"] = vector_to(net.parameters());
  j["input_offset"] = vector_to(n.input_offset);
  j["input_scale"] = vector_to(n.input_scale);
  j["output_offset"] = vector_to(n.output_offset);
  j["output_scale"] = vector_to(n.output_scale);
  return j;
}

Mlp mlp_from(const nlohmann::json& j) {
  if (j.value("format_version", 0) != kModelFormatVersion)
    throw Error(ErrorKind::Config, "unsupported model format version");
  if (j.value("activation", std::string("tanh")) != "tanh")
    throw Error(ErrorKind::Config, "only tanh activation is supported");
  Mlp net(j.at("widths").get<std::vector<Index>>());
  net.set_parameters(vector_from(j.at("theta")));
  Normalization n;
  n.input_offset = vector_from(j.at("input_offset"));
  n.input_scale = vector_from(j.at("input_scale"));
  n.output_offset = vector_from(j.at("output_offset"));
  n.output_scale = vector_from(j.at("output_scale"));
  net.set_normalization(std::move(n));
  return net;
}

}  // namespace

Normalization Normalization::identity(Index inputs, Index outputs) {
  return {VectorXd::Zero(inputs), VectorXd::Ones(inputs), VectorXd::Zero(outputs), VectorXd::Ones(outputs)};
}

Mlp::Mlp(std::vector<Index> widths) : widths_(std::move(widths)) {
  if (widths_.size() < 2) throw Error(ErrorKind::Structural, "network needs at least an input and an output width");
  Index total = 0;
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    if (widths_[l] <= 0 || widths_[l + 1] <= 0) throw Error(ErrorKind::Structural, "layer widths must be positive");
    offsets_.push_back(total);
    total += widths_[l + 1] * widths_[l] + widths_[l + 1];
  }
  theta_ = VectorXd::Zero(total);
  norm_ = Normalization::identity(widths_.front(), widths_.back());
}

Mlp Mlp::glorot(std::vector<Index> widths, std::uint64_t seed) {
  Mlp net(std::move(widths));
  std::mt19937_64 rng(seed);
  for (Index l = 0; l < net.layers(); ++l) {
    const Index fan_in = net.widths_[l], fan_out = net.widths_[l + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Index i = 0; i < fan_in * fan_out; ++i) net.theta_[net.weight_offset(l) + i] = dist(rng);
  }
  return net;
}

void Mlp::set_parameters(const VectorXd& theta) {
  if (theta.size() != theta_.size()) throw Error(ErrorKind::Structural, "parameter vector size mismatch");
  theta_ = theta;
}

void Mlp::set_normalization(Normalization norm) {
  if (norm.input_offset.size() != input_size() || norm.input_scale.size() != input_size() ||
      norm.output_offset.size() != output_size() || norm.output_scale.size() != output_size())
    throw Error(ErrorKind::Structural, "normalization size mismatch");
  if ((norm.input_scale.array() <= 0.0).any() || (norm.output_scale.array() <= 0.0).any())
    throw Error(ErrorKind::Structural, "normalization scales must be positive");
  norm_ = std::move(norm);
}

Eigen::Map<const Mlp::RowMatrix> Mlp::weight(Index layer) const {
  return {theta_.data() + weight_offset(layer), widths_[layer + 1], widths_[layer]};
}

Eigen::Map<const VectorXd> Mlp::bias(Index layer) const {
  return {theta_.data() + bias_offset(layer), widths_[layer + 1]};
}

void Mlp::check_input(const VectorXd& input) const {
  if (input.size() != input_size()) throw Error(ErrorKind::Structural, "network input size mismatch");
}

Mlp::Activations Mlp::run(const VectorXd& input) const {
  check_input(input);
  Activations act;
  act.a.reserve(static_cast<std::size_t>(layers() + 1));
  act.a.push_back((input - norm_.input_offset).cwiseQuotient(norm_.input_scale));
  for (Index l = 0; l < layers(); ++l) {
    VectorXd z = weight(l) * act.a.back() + bias(l);
    if (l + 1 < layers()) z = z.array().tanh();
    act.a.push_back(std::move(z));
  }
  return act;
}

VectorXd Mlp::forward(const VectorXd& input) const {
  const Activations act = run(input);
  return norm_.output_scale.cwiseProduct(act.a.back()) + norm_.output_offset;
}

MatrixXd Mlp::input_jacobian(const VectorXd& input) const {
  const Activations act = run(input);
  MatrixXd R = norm_.output_scale.asDiagonal() * weight(layers() - 1);
  for (Index l = layers() - 2; l >= 0; --l) {
    const VectorXd dtanh = 1.0 - act.a[l + 1].array().square();
    R = (R * dtanh.asDiagonal()) * weight(l);
  }
  return R * norm_.input_scale.cwiseInverse().asDiagonal();
}

VectorXd Mlp::parameter_vjp(const VectorXd& input, const VectorXd& w) const {
  if (w.size() != output_size()) throw Error(ErrorKind::Structural, "cotangent size mismatch");
  const Activations act = run(input);
  VectorXd grad(parameter_count());
  VectorXd delta = w.cwiseProduct(norm_.output_scale);
  for (Index l = layers() - 1; l >= 0; --l) {
    Eigen::Map<RowMatrix>(grad.data() + weight_offset(l), widths_[l + 1], widths_[l]).noalias() =
        delta * act.a[l].transpose();
    grad.segment(bias_offset(l), widths_[l + 1]) = delta;
    if (l > 0) {
      VectorXd back = weight(l).transpose() * delta;
      delta = back.cwiseProduct((1.0 - act.a[l].array().square()).matrix());
    }
  }
  return grad;
}

MatrixXd Mlp::parameter_jacobian(const VectorXd& input) const {
  MatrixXd J(output_size(), parameter_count());
  for (Index r = 0; r < output_size(); ++r) J.row(r) = parameter_vjp(input, VectorXd::Unit(output_size(), r)).transpose();
  return J;
}

// ---------------------------------------------------------------------------

NeuralOdeModel::NeuralOdeModel(Mlp net, Index external_size) : net_(std::move(net)), external_size_(external_size) {
  if (net_.output_size() != external_size_)
    throw Error(ErrorKind::Structural, "surrogate output size must equal the external state size");
  if (net_.input_size() < external_size_) throw Error(ErrorKind::Structural, "surrogate input too small");
}

NeuralOdeModel NeuralOdeModel::create(Index external_size, Index feature_size, const std::vector<Index>& hidden,
                                      std::uint64_t seed) {
  std::vector<Index> widths{external_size + feature_size};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(external_size);
  return NeuralOdeModel(Mlp::glorot(std::move(widths), seed), external_size);
}

VectorXd NeuralOdeModel::stack(const VectorXd& x_ex, const VectorXd& s_in) const {
  if (x_ex.size() != external_size_ || s_in.size() != feature_size())
    throw Error(ErrorKind::Structural, "surrogate input dimension mismatch");
  VectorXd in(x_ex.size() + s_in.size());
  in << x_ex, s_in;
  return in;
}

VectorXd NeuralOdeModel::forward(const VectorXd& x_ex, const VectorXd& s_in) const {
  return net_.forward(stack(x_ex, s_in));
}

std::pair<MatrixXd, MatrixXd> NeuralOdeModel::jacobian_input(const VectorXd& x_ex, const VectorXd& s_in) const {
  const MatrixXd J = net_.input_jacobian(stack(x_ex, s_in));
  return {J.leftCols(external_size_), J.rightCols(feature_size())};
}

MatrixXd NeuralOdeModel::jacobian_params(const VectorXd& x_ex, const VectorXd& s_in) const {
  return net_.parameter_jacobian(stack(x_ex, s_in));
}

VectorXd NeuralOdeModel::params_vjp(const VectorXd& x_ex, const VectorXd& s_in, const VectorXd& w) const {
  return net_.parameter_vjp(stack(x_ex, s_in), w);
}

std::string mlp_to_json_text(const Mlp& net) { return mlp_json(net).dump(2); }

Mlp mlp_from_json_text(const std::string& text) {
  try {
    return mlp_from(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, std::string("model JSON: ") + e.what());
  }
}

std::string model_to_json_text(const NeuralOdeModel& model) {
  nlohmann::json j = mlp_json(model.net());
  j["kind"] = "ode";
  j["external_size"] = model.external_size();
  return j.dump(2);
}

NeuralOdeModel model_from_json_text(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.value("kind", std::string("ode")) != "ode") throw Error(ErrorKind::Config, "model file is not a neural ODE");
    return NeuralOdeModel(mlp_from(j), j.at("external_size").get<Index>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, std::string("model JSON: ") + e.what());
  }
}

}  // namespace neudye
