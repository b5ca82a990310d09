#pragma once

#include "tpv/covariance.hpp"
#include "tpv/linalg.hpp"
#include "tpv/mlp.hpp"
#include "tpv/trainer.hpp"

namespace tpv {

enum class Split { Train, Test };

// H_eff = (1/n) J^T J.
struct HEff {
  Matrix matrix;
  Index n_samples = 0;
  Split source_split = Split::Train;
};

HEff estimate_heff(const Matrix& jac, Index n, Split split = Split::Train);

double tpv_trace(const HEff& h, const PerturbationCovariance& c);

// sigma^2 * Tr((X X^T)^{-1}) for a full-row-rank X with d >= n.
double tpv_label_linear(const Matrix& x_train, double sigma_eps2);

// Singular values of J_train and the diagonal of B = V^T H_test V.
struct LabelNoiseSpectrum {
  Vector s;
  Vector b_diag;
  double lambda = 0.0;
};

LabelNoiseSpectrum build_label_noise_spectrum(const Matrix& j_train, const HEff& h_eff_test, double lambda);
LabelNoiseSpectrum build_label_noise_spectrum(const CompactSVD& svd, const HEff& h_eff_test, double lambda);

// Same spectrum with B_ii = (1/n_test) ||J_test v_i||^2, never forming H_test.
LabelNoiseSpectrum spectrum_from_test_jacobian(const CompactSVD& svd, const Matrix& j_test, Index n_test,
                                               double lambda);

// Spectrum of a network's train Jacobian against its test Jacobian, streaming
// the test set in chunks of `test_chunk` rows.
LabelNoiseSpectrum network_label_noise_spectrum(const Network& net, const Matrix& x_train, const Matrix& x_test,
                                                double lambda, Index test_chunk = 512,
                                                CompactSVD* svd_out = nullptr);

// sigma^2 * sum_i B_ii / s_i^2 (min-norm retraining; spec.lambda must be 0).
double tpv_label_nonlinear(const LabelNoiseSpectrum& spec, double sigma_eps2);

// sigma^2 * sum_i B_ii s_i^2 / (s_i^2 + lambda)^2: retraining with a proximity
// penalty gamma, lambda = n gamma.
double tpv_label_ridge(const LabelNoiseSpectrum& spec, double sigma_eps2);

// sigma^2 (1/n) sum_i (s_i^2 / (s_i^2 + lambda))^2.
double tpv_train_ridge_closed_form(const Vector& s, double lambda, double sigma_eps2, Index n);

// Fraction of each singular direction's min-norm coefficient reached after full-batch
// heavy-ball training with cfg's schedule, from the linearized recurrence on
// lambda_i = s_i^2 / n. NaN entries when cfg is mini-batch or regularized.
Vector linearized_fit_fraction(const Vector& s, Index n, const TrainConfig& cfg);

// sigma^2 * sum_i B_ii phi_i^2 / s_i^2 with phi from linearized_fit_fraction.
double tpv_label_finite_time(const LabelNoiseSpectrum& spec, Index n, const TrainConfig& cfg, double sigma_eps2);

double tpv_sgd_theoretical(double eta, Index batch, double sigma_res2, double hessian_trace);
double tpv_quantization(double delta, double hessian_trace);

// Gauss-Newton proxy (1/n) ||J||_F^2.
double hessian_trace_proxy(const Matrix& j, Index n);

// Dense central-difference Hessian of the MSE loss, for p <= 200 audits.
Matrix fd_hessian(const Network& net, const Matrix& xs, const Matrix& ys, double step = 1e-4);

}  // namespace tpv
