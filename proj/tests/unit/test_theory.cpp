#include "helpers.hpp"

#include "tpv/covariance.hpp"
#include "tpv/errors.hpp"
#include "tpv/theory.hpp"

#include <gtest/gtest.h>

#include <Eigen/QR>

using namespace tpv;
using tpv::testing::gaussian_matrix;

namespace {

Matrix pinv(const Matrix& m) { return m.completeOrthogonalDecomposition().pseudoInverse(); }

}  // namespace

TEST(HEff, MatchesDenseProduct) {
  const Matrix j = gaussian_matrix(30, 7, 1);
  const HEff h = estimate_heff(j, 15, Split::Test);
  EXPECT_LT((h.matrix - j.transpose() * j / 15.0).norm(), 1e-12);
  EXPECT_EQ(h.source_split, Split::Test);
  EXPECT_THROW(estimate_heff(j, 7), DimError);
  EXPECT_THROW(estimate_heff(j, 0), EmptyDataset);
}

TEST(TpvTrace, IsotropicEqualsScaledTrace) {
  const Matrix j = gaussian_matrix(20, 5, 2);
  const HEff h = estimate_heff(j, 20);
  EXPECT_NEAR(tpv_trace(h, PerturbationCovariance::isotropic(5, 0.3)), 0.3 * h.matrix.trace(), 1e-12);
}

TEST(LabelLinear, MatchesGramInverseTrace) {
  const Matrix x = gaussian_matrix(8, 20, 3);
  const Matrix gram = x * x.transpose();
  const double oracle = 0.04 * gram.llt().solve(Matrix::Identity(8, 8)).trace();
  EXPECT_NEAR(tpv_label_linear(x, 0.04), oracle, 1e-10 * oracle);
  Matrix dup = x;
  dup.row(1) = dup.row(0);
  EXPECT_THROW(tpv_label_linear(dup, 0.04), RankDeficient);
}

TEST(LabelNonlinear, MatchesDensePseudoInverse) {
  const Matrix jtr = gaussian_matrix(12, 30, 4);
  const Matrix jte = gaussian_matrix(50, 30, 5);
  const HEff hte = estimate_heff(jte, 50, Split::Test);
  const LabelNoiseSpectrum spec = build_label_noise_spectrum(jtr, hte, 0.0);
  const Matrix jp = pinv(jtr);
  const double oracle = 0.01 * (hte.matrix * jp * jp.transpose()).trace();
  EXPECT_NEAR(tpv_label_nonlinear(spec, 0.01), oracle, 1e-9 * oracle);

  const LabelNoiseSpectrum streamed = spectrum_from_test_jacobian(compact_svd(jtr), jte, 50, 0.0);
  EXPECT_LT((streamed.b_diag - spec.b_diag).norm(), 1e-10 * spec.b_diag.norm());
}

TEST(LabelNonlinear, MonteCarloMinNormRetraining) {
  const Matrix jtr = gaussian_matrix(6, 15, 6);
  const Matrix jte = gaussian_matrix(40, 15, 7);
  const HEff hte = estimate_heff(jte, 40, Split::Test);
  const CompactSVD svd = compact_svd(jtr);
  const double theory = tpv_label_nonlinear(build_label_noise_spectrum(svd, hte, 0.0), 0.25);
  CounterRng rng(8);
  double acc = 0.0;
  const int draws = 40000;
  for (int r = 0; r < draws; ++r) {
    Vector eps(6);
    for (Index i = 0; i < 6; ++i) eps[i] = 0.5 * rng.normal();
    const Vector dw = min_norm_solve(svd, eps);
    acc += dw.dot(hte.matrix * dw);
  }
  EXPECT_NEAR(acc / draws / theory, 1.0, 0.03);
}

TEST(LabelRidge, MatchesDenseKernelForm) {
  const Matrix jtr = gaussian_matrix(10, 25, 9);
  const Matrix jte = gaussian_matrix(30, 25, 10);
  const HEff hte = estimate_heff(jte, 30, Split::Test);
  const double lambda = 2.0;
  const LabelNoiseSpectrum spec = build_label_noise_spectrum(jtr, hte, lambda);
  const Matrix kinv = (jtr * jtr.transpose() + lambda * Matrix::Identity(10, 10)).inverse();
  const Matrix m = jtr.transpose() * kinv;
  const double oracle = 0.01 * (hte.matrix * m * m.transpose()).trace();
  EXPECT_NEAR(tpv_label_ridge(spec, 0.01), oracle, 1e-9 * oracle);
  EXPECT_THROW(tpv_label_nonlinear(spec, 0.01), PreconditionFailed);

  const LabelNoiseSpectrum zero = build_label_noise_spectrum(jtr, hte, 0.0);
  EXPECT_NEAR(tpv_label_ridge(zero, 0.01), tpv_label_nonlinear(zero, 0.01), 1e-12);
}

TEST(LabelRidge, TrainClosedFormAgreesWithTrainSide) {
  const Matrix jtr = gaussian_matrix(10, 25, 11);
  const HEff htr = estimate_heff(jtr, 10);
  for (double lambda : {0.0, 0.5, 5.0}) {
    const LabelNoiseSpectrum spec = build_label_noise_spectrum(jtr, htr, lambda);
    EXPECT_NEAR(tpv_label_ridge(spec, 0.3), tpv_train_ridge_closed_form(spec.s, lambda, 0.3, 10), 1e-12);
  }
  // interpolation: every train label error is reproduced
  EXPECT_NEAR(tpv_train_ridge_closed_form(compact_svd(jtr).s, 0.0, 0.3, 10), 0.3, 1e-12);
}

TEST(LabelSpectrum, InvalidSingularValues) {
  LabelNoiseSpectrum spec;
  spec.s = Vector::Ones(3);
  spec.s[2] = 0.0;
  spec.b_diag = Vector::Ones(3);
  EXPECT_THROW(tpv_label_nonlinear(spec, 1.0), InvalidSpectrum);
  spec.b_diag = Vector::Ones(2);
  EXPECT_THROW(tpv_label_ridge(spec, 1.0), DimError);
}

TEST(NetworkSpectrum, ChunkingDoesNotChangeResult) {
  const Network net = tpv::testing::small_mlp(3, {6}, 1, 12);
  const Matrix xtr = gaussian_matrix(8, 3, 13);
  const Matrix xte = gaussian_matrix(37, 3, 14);
  CompactSVD svd;
  const LabelNoiseSpectrum a = network_label_noise_spectrum(net, xtr, xte, 0.0, 512, &svd);
  const LabelNoiseSpectrum b = network_label_noise_spectrum(net, xtr, xte, 0.0, 5);
  EXPECT_LT((a.b_diag - b.b_diag).norm(), 1e-12 * a.b_diag.norm());
  const LabelNoiseSpectrum dense =
      build_label_noise_spectrum(svd, estimate_heff(output_jacobian(net, xte), 37, Split::Test), 0.0);
  EXPECT_LT((a.b_diag - dense.b_diag).norm(), 1e-10 * a.b_diag.norm());
  EXPECT_THROW(network_label_noise_spectrum(net, xtr, Matrix(0, 3), 0.0), EmptyDataset);
}

TEST(ClosedForms, SgdAndQuantization) {
  EXPECT_DOUBLE_EQ(tpv_sgd_theoretical(0.01, 32, 0.25, 8.0), 0.01 * 0.25 * 8.0 / 64.0);
  EXPECT_THROW(tpv_sgd_theoretical(0.0, 32, 1.0, 1.0), PreconditionFailed);
  EXPECT_DOUBLE_EQ(tpv_quantization(0.1, 6.0), 0.01 * 6.0 / 12.0);

  // uniform rounding noise on U(-delta/2, delta/2)
  const Matrix j = gaussian_matrix(40, 6, 15);
  const HEff h = estimate_heff(j, 40);
  CounterRng rng(16);
  double acc = 0.0;
  const int draws = 50000;
  for (int r = 0; r < draws; ++r) {
    Vector dw(6);
    for (Index i = 0; i < 6; ++i) dw[i] = rng.uniform(-0.05, 0.05);
    acc += dw.dot(h.matrix * dw);
  }
  const double theory = tpv_quantization(0.1, h.matrix.trace());
  EXPECT_NEAR(acc / draws / theory, 1.0, 0.03);
}

TEST(Hessian, LinearModelIsGaussNewton) {
  Vector w(3);
  w << 0.5, -1.0, 2.0;
  const Network net = tpv::testing::linear_network(w, 0.1);
  const Matrix xs = gaussian_matrix(20, 3, 17);
  const Matrix ys = gaussian_matrix(20, 1, 18);
  const Matrix jac = output_jacobian(net, xs);
  const Matrix h = fd_hessian(net, xs, ys);
  EXPECT_LT((h - jac.transpose() * jac / 20.0).norm(), 1e-7);
  EXPECT_NEAR(hessian_trace_proxy(jac, 20), h.trace(), 1e-7);
  const Network big = tpv::testing::small_mlp(10, {20}, 1, 1);
  EXPECT_THROW(fd_hessian(big, gaussian_matrix(2, 10, 1), gaussian_matrix(2, 1, 2)), PreconditionFailed);
}
