#pragma once

#include "tpv/linalg.hpp"

#include <cstdint>

namespace tpv {

struct GradientCovariance {
  Matrix sigma_sample;
  Matrix sigma_xi;
  Index batch = 1;
};

// Covariance of the per-sample gradients g_i = eps_i j_i under uniform sampling:
// (1/n) J^T diag(eps^2) J - (1/n^2) J^T eps eps^T J.
Matrix exact_sample_covariance(const Matrix& j, const Vector& residuals);

// Mini-batch gradient noise for batches of b samples drawn with replacement.
Matrix minibatch_noise_covariance(const Matrix& sample_cov, Index b);

GradientCovariance gradient_covariance(const Matrix& j, const Vector& residuals, Index b);

// Solves C = A C A^T + eta^2 sigma_xi with A = I - eta h. Requires every eigenvalue
// of h in (0, 2 / eta).
Matrix stationary_covariance(const Matrix& h, const Matrix& sigma_xi, double eta);

// Runs dw <- (I - eta h) dw - eta xi with xi = factor * z, z ~ N(0, I), from dw = 0.
// Returns the second moment of dw over the steps after burn_in.
Matrix simulate_ou(const Matrix& h, const Matrix& sigma_xi_factor, double eta, Index steps, Index burn_in,
                   std::uint64_t seed);

// Population variance (mean subtracted).
double residual_variance(const Vector& residuals);

// The two sides of E[Tr(sigma_xi)] ~= (sigma^2 / b) Tr(H_eff).
struct TraceChain {
  double exact = 0.0;  // Tr(sigma_sample) / b
  double proxy = 0.0;  // residual_variance * Tr((1/n) J^T J) / b
};
TraceChain trace_chain(const Matrix& j, const Vector& residuals, Index b);

// ||(1/n^2) J^T eps eps^T J||_F / ||(1/n) J^T diag(eps^2) J||_F.
double dropped_term_ratio(const Matrix& j, const Vector& residuals);

// Pearson correlation between eps_i^2 and (J J^T)_ii.
double residual_geometry_correlation(const Matrix& j, const Vector& residuals);

}  // namespace tpv
