#include "tpv/mlp.hpp"

#include "tpv/errors.hpp"
#include "tpv/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace tpv {
namespace {

using ConstWeightMap = Eigen::Map<const RowMatrix>;
using WeightMap = Eigen::Map<RowMatrix>;

ConstWeightMap weights(const Network& net, const LayerShape& l) {
  return ConstWeightMap(net.params.data() + l.weight_offset, l.out, l.in);
}

auto bias(const Network& net, const LayerShape& l) {
  return net.params.segment(l.bias_offset, l.out);
}

void check_inputs(const Network& net, const Matrix& xs) {
  if (xs.cols() != net.config.input_dim) {
    throw DimError("input has " + std::to_string(xs.cols()) + " columns, network expects " +
                   std::to_string(net.config.input_dim));
  }
  if (net.params.size() != parameter_count(net.config)) {
    throw DimError("parameter vector length does not match network config");
  }
}

// Pre-activations z_l and activations a_l for every layer (a_0 = xs).
struct Tape {
  std::vector<LayerShape> layers;
  std::vector<Matrix> acts;  // acts[l] is the input to layer l; acts.back() is the output
  std::vector<Matrix> pre;   // pre[l] = acts[l] * W_l^T + b_l
};

Tape run_forward(const Network& net, const Matrix& xs) {
  Tape t;
  t.layers = layer_shapes(net.config);
  t.acts.reserve(t.layers.size() + 1);
  t.pre.reserve(t.layers.size());
  t.acts.push_back(xs);
  for (std::size_t li = 0; li < t.layers.size(); ++li) {
    const auto& l = t.layers[li];
    Matrix z = t.acts.back() * weights(net, l).transpose();
    z.rowwise() += bias(net, l).transpose();
    const bool hidden = li + 1 < t.layers.size();
    t.acts.push_back(hidden ? Matrix(z.cwiseMax(0.0)) : z);
    t.pre.push_back(std::move(z));
  }
  return t;
}

// Back-propagates `delta` (n x K at the output) and calls sink(layer, delta_l)
// for every layer from last to first.
template <class Sink>
void run_backward(const Network& net, const Tape& t, Matrix delta, Sink&& sink) {
  for (std::size_t li = t.layers.size(); li-- > 0;) {
    const auto& l = t.layers[li];
    sink(li, delta);
    if (li == 0) break;
    Matrix prev = delta * weights(net, l);
    // ReLU derivative is 0 at exactly 0.
    prev.array() *= (t.pre[li - 1].array() > 0.0).cast<double>();
    delta = std::move(prev);
  }
}

}  // namespace

void validate(const MLPConfig& cfg) {
  if (cfg.input_dim < 1 || cfg.output_dim < 1) throw PreconditionFailed("MLPConfig: dims must be >= 1");
  for (Index w : cfg.hidden_widths) {
    if (w < 1) throw PreconditionFailed("MLPConfig: hidden widths must be >= 1");
  }
}

std::vector<LayerShape> layer_shapes(const MLPConfig& cfg) {
  std::vector<LayerShape> out;
  Index in = cfg.input_dim;
  Index offset = 0;
  auto push = [&](Index o) {
    LayerShape l;
    l.in = in;
    l.out = o;
    l.weight_offset = offset;
    l.bias_offset = offset + in * o;
    offset = l.bias_offset + o;
    out.push_back(l);
    in = o;
  };
  for (Index w : cfg.hidden_widths) push(w);
  push(cfg.output_dim);
  return out;
}

Index parameter_count(const MLPConfig& cfg) {
  const auto layers = layer_shapes(cfg);
  return layers.back().bias_offset + layers.back().out;
}

Network Network::with_params(ParamVector p) const {
  if (p.size() != params.size()) throw DimError("with_params: length mismatch");
  return Network{config, std::move(p)};
}

Network init_network(const MLPConfig& cfg) {
  validate(cfg);
  Network net{cfg, ParamVector::Zero(parameter_count(cfg))};
  CounterRng rng(derive_seed(cfg.seed, {purpose_tag("mlp-init")}));
  for (const auto& l : layer_shapes(cfg)) {
    const double bound = std::sqrt(6.0 / static_cast<double>(l.in));
    for (Index k = 0; k < l.in * l.out; ++k) net.params[l.weight_offset + k] = rng.uniform(-bound, bound);
  }
  return net;
}

Vector forward(const Network& net, const Vector& x) {
  if (x.size() != net.config.input_dim) throw DimError("forward: input length mismatch");
  return forward_batch(net, x.transpose()).row(0).transpose();
}

Matrix forward_batch(const Network& net, const Matrix& xs) {
  check_inputs(net, xs);
  const auto layers = layer_shapes(net.config);
  Matrix a = xs;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    Matrix z = a * weights(net, layers[li]).transpose();
    z.rowwise() += bias(net, layers[li]).transpose();
    if (li + 1 < layers.size()) z = z.cwiseMax(0.0);
    a = std::move(z);
  }
  return a;
}

double min_abs_preactivation(const Network& net, const Matrix& xs) {
  check_inputs(net, xs);
  const Tape t = run_forward(net, xs);
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t li = 0; li + 1 < t.pre.size(); ++li) m = std::min(m, t.pre[li].cwiseAbs().minCoeff());
  return m;
}

Matrix weighted_output_jacobian(const Network& net, const Matrix& xs, const Matrix& seeds) {
  check_inputs(net, xs);
  const Index n = xs.rows();
  if (seeds.rows() != n || seeds.cols() != net.config.output_dim) {
    throw DimError("weighted_output_jacobian: seeds must be n x K");
  }
  const Tape t = run_forward(net, xs);
  RowMatrix rows(n, net.num_params());
  run_backward(net, t, seeds, [&](std::size_t li, const Matrix& delta) {
    const auto& l = t.layers[li];
    const RowMatrix a = t.acts[li];
    const RowMatrix dr = delta;
    for (Index i = 0; i < n; ++i) {
      double* row = rows.row(i).data();
      const double* ai = a.row(i).data();
      for (Index o = 0; o < l.out; ++o) {
        const double d = dr(i, o);
        double* w = row + l.weight_offset + o * l.in;
        for (Index j = 0; j < l.in; ++j) w[j] = d * ai[j];
        row[l.bias_offset + o] = d;
      }
    }
  });
  return Matrix(rows);
}

Matrix output_jacobian(const Network& net, const Matrix& xs) {
  check_inputs(net, xs);
  const Index n = xs.rows();
  const Index k_out = net.config.output_dim;
  if (k_out == 1) return weighted_output_jacobian(net, xs, Matrix::Ones(n, 1));
  Matrix jac(n * k_out, net.num_params());
  for (Index k = 0; k < k_out; ++k) {
    Matrix seeds = Matrix::Zero(n, k_out);
    seeds.col(k).setOnes();
    const Matrix part = weighted_output_jacobian(net, xs, seeds);
    for (Index i = 0; i < n; ++i) jac.row(i * k_out + k) = part.row(i);
  }
  return jac;
}

ParamVector output_vjp(const Network& net, const Matrix& xs, const Matrix& seeds) {
  check_inputs(net, xs);
  if (seeds.rows() != xs.rows() || seeds.cols() != net.config.output_dim) {
    throw DimError("output_vjp: seeds must be n x K");
  }
  const Tape t = run_forward(net, xs);
  ParamVector grad(net.num_params());
  run_backward(net, t, seeds, [&](std::size_t li, const Matrix& delta) {
    const auto& l = t.layers[li];
    WeightMap(grad.data() + l.weight_offset, l.out, l.in).noalias() = delta.transpose() * t.acts[li];
    grad.segment(l.bias_offset, l.out) = delta.colwise().sum().transpose();
  });
  return grad;
}

LossGrad loss_and_grad_mse(const Network& net, const Matrix& xs, const Matrix& ys) {
  check_inputs(net, xs);
  const Index n = xs.rows();
  if (n == 0) throw EmptyDataset("loss_and_grad_mse: no samples");
  if (ys.rows() != n || ys.cols() != net.config.output_dim) {
    throw DimError("loss_and_grad_mse: targets must be n x K");
  }
  const Tape t = run_forward(net, xs);
  const Matrix resid = t.acts.back() - ys;
  LossGrad out;
  out.loss = 0.5 * resid.squaredNorm() / static_cast<double>(n);
  out.grad.resize(net.num_params());
  run_backward(net, t, resid / static_cast<double>(n), [&](std::size_t li, const Matrix& delta) {
    const auto& l = t.layers[li];
    WeightMap(out.grad.data() + l.weight_offset, l.out, l.in).noalias() = delta.transpose() * t.acts[li];
    out.grad.segment(l.bias_offset, l.out) = delta.colwise().sum().transpose();
  });
  return out;
}

double loss_mse(const Network& net, const Matrix& xs, const Matrix& ys) {
  if (xs.rows() == 0) throw EmptyDataset("loss_mse: no samples");
  if (ys.rows() != xs.rows() || ys.cols() != net.config.output_dim) {
    throw DimError("loss_mse: targets must be n x K");
  }
  return 0.5 * (forward_batch(net, xs) - ys).squaredNorm() / static_cast<double>(xs.rows());
}

nlohmann::json checkpoint_to_json(const Network& net) {
  nlohmann::json j;
  j["config"] = {{"input_dim", net.config.input_dim},
                 {"hidden_widths", net.config.hidden_widths},
                 {"output_dim", net.config.output_dim},
                 {"activation", "relu"},
                 {"seed", net.config.seed}};
  j["params"] = std::vector<double>(net.params.data(), net.params.data() + net.params.size());
  return j;
}

Network checkpoint_from_json(const nlohmann::json& j) {
  MLPConfig cfg;
  const auto& c = j.at("config");
  cfg.input_dim = c.at("input_dim").get<Index>();
  cfg.hidden_widths = c.at("hidden_widths").get<std::vector<Index>>();
  cfg.output_dim = c.at("output_dim").get<Index>();
  if (c.value("activation", std::string("relu")) != "relu") throw ConfigError("unsupported activation");
  cfg.seed = c.value("seed", std::uint64_t{0});
  validate(cfg);
  const auto values = j.at("params").get<std::vector<double>>();
  if (static_cast<Index>(values.size()) != parameter_count(cfg)) {
    throw DimError("checkpoint: params length does not match config");
  }
  Network net{cfg, Eigen::Map<const Vector>(values.data(), static_cast<Index>(values.size()))};
  if (!net.params.allFinite()) throw InvalidMatrix("checkpoint: non-finite parameter");
  return net;
}

}  // namespace tpv
