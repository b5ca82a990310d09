#pragma once

#include "tpv/linalg.hpp"
#include "tpv/mlp.hpp"
#include "tpv/rng.hpp"

#include <cstdint>

namespace tpv::testing {

inline Matrix gaussian_matrix(Index rows, Index cols, std::uint64_t seed) {
  CounterRng rng(seed);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = rng.normal();
  return m;
}

inline Vector gaussian_vector(Index n, std::uint64_t seed) { return gaussian_matrix(n, 1, seed).col(0); }

inline Matrix random_spd(Index p, std::uint64_t seed, double ridge = 0.1) {
  const Matrix a = gaussian_matrix(p, p, seed);
  return a * a.transpose() / static_cast<double>(p) + ridge * Matrix::Identity(p, p);
}

// Linear model f(x) = w . x + b as a network without hidden layers.
inline Network linear_network(const Vector& w, double b = 0.0) {
  MLPConfig c;
  c.input_dim = w.size();
  c.output_dim = 1;
  Network net = init_network(c);
  net.params.head(w.size()) = w;
  net.params[w.size()] = b;
  return net;
}

inline Network small_mlp(Index d, std::vector<Index> widths, Index k, std::uint64_t seed) {
  MLPConfig c;
  c.input_dim = d;
  c.hidden_widths = std::move(widths);
  c.output_dim = k;
  c.seed = seed;
  Network net = init_network(c);
  CounterRng rng(derive_seed(seed, {7}));
  for (const auto& l : layer_shapes(c)) {
    for (Index i = 0; i < l.out; ++i) net.params[l.bias_offset + i] = 0.1 * rng.normal();
  }
  return net;
}

}  // namespace tpv::testing
