#pragma once

#include "tpv/linalg.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <vector>

namespace tpv {

enum class Activation { ReLU };

struct MLPConfig {
  Index input_dim = 1;
  std::vector<Index> hidden_widths;
  Index output_dim = 1;
  Activation activation = Activation::ReLU;
  std::uint64_t seed = 0;

  Index depth() const noexcept { return static_cast<Index>(hidden_widths.size()) + 1; }
};

// Flat parameter vector: for each layer, its weight matrix (out x in, row-major)
// followed by its bias.
using ParamVector = Vector;

struct LayerShape {
  Index in = 0;
  Index out = 0;
  Index weight_offset = 0;
  Index bias_offset = 0;
};

void validate(const MLPConfig& cfg);
std::vector<LayerShape> layer_shapes(const MLPConfig& cfg);
Index parameter_count(const MLPConfig& cfg);

struct Network {
  MLPConfig config;
  ParamVector params;

  Index num_params() const noexcept { return params.size(); }
  Network with_params(ParamVector p) const;
};

// He-uniform weights (bound sqrt(6 / fan_in)) from a counter RNG keyed on cfg.seed;
// zero biases.
Network init_network(const MLPConfig& cfg);

Vector forward(const Network& net, const Vector& x);
// xs: n x d, one sample per row. Returns n x K.
Matrix forward_batch(const Network& net, const Matrix& xs);

// Row i*K + k is the gradient of output k at sample i with respect to all parameters.
Matrix output_jacobian(const Network& net, const Matrix& xs);

// Row i is seeds.row(i) * J(x_i): one reverse pass per batch instead of per output.
Matrix weighted_output_jacobian(const Network& net, const Matrix& xs, const Matrix& seeds);

// Smallest |pre-activation| over all hidden units and samples (+inf without
// hidden layers); distance to the nearest ReLU kink.
double min_abs_preactivation(const Network& net, const Matrix& xs);

struct LossGrad {
  double loss = 0.0;
  ParamVector grad;
};

// L(w) = (1/(2n)) sum_i ||f(x_i) - y_i||^2 and its exact gradient.
LossGrad loss_and_grad_mse(const Network& net, const Matrix& xs, const Matrix& ys);
double loss_mse(const Network& net, const Matrix& xs, const Matrix& ys);

// Gradient of sum_i seeds_i . f(x_i) with respect to the parameters.
ParamVector output_vjp(const Network& net, const Matrix& xs, const Matrix& seeds);

nlohmann::json checkpoint_to_json(const Network& net);
Network checkpoint_from_json(const nlohmann::json& j);

}  // namespace tpv
