#include "tpv/theory.hpp"

#include "tpv/errors.hpp"

#include <algorithm>
#include <limits>
#include <string>

namespace tpv {
namespace {

void check_spectrum(const LabelNoiseSpectrum& spec) {
  if (spec.s.size() != spec.b_diag.size()) throw DimError("label-noise spectrum: s and b_diag lengths differ");
  if ((spec.s.array() <= 0.0).any() || !spec.s.allFinite()) {
    throw InvalidSpectrum("label-noise spectrum: singular values must be positive");
  }
}

}  // namespace

HEff estimate_heff(const Matrix& jac, Index n, Split split) {
  if (n <= 0) throw EmptyDataset("estimate_heff: n must be positive");
  if (jac.rows() % n != 0) throw DimError("estimate_heff: jacobian rows must be a multiple of n");
  HEff h;
  h.matrix = Matrix::Zero(jac.cols(), jac.cols());
  h.matrix.selfadjointView<Eigen::Lower>().rankUpdate(jac.transpose(), 1.0 / static_cast<double>(n));
  h.matrix = h.matrix.selfadjointView<Eigen::Lower>();
  h.n_samples = n;
  h.source_split = split;
  return h;
}

double tpv_trace(const HEff& h, const PerturbationCovariance& c) { return trace_product(h.matrix, c); }

double tpv_label_linear(const Matrix& x_train, double sigma_eps2) {
  const CompactSVD svd = compact_svd(x_train);
  if (svd.rank != x_train.rows()) {
    throw RankDeficient("tpv_label_linear: X has rank " + std::to_string(svd.rank) + " < n = " +
                        std::to_string(x_train.rows()));
  }
  return sigma_eps2 * svd.s.array().square().inverse().sum();
}

LabelNoiseSpectrum build_label_noise_spectrum(const CompactSVD& svd, const HEff& h_eff_test, double lambda) {
  if (h_eff_test.matrix.rows() != svd.v.rows()) throw DimError("build_label_noise_spectrum: p mismatch");
  if (lambda < 0.0) throw PreconditionFailed("build_label_noise_spectrum: lambda must be >= 0");
  LabelNoiseSpectrum out;
  out.s = svd.s;
  out.lambda = lambda;
  out.b_diag = (svd.v.array() * (h_eff_test.matrix * svd.v).array()).colwise().sum().transpose();
  return out;
}

LabelNoiseSpectrum build_label_noise_spectrum(const Matrix& j_train, const HEff& h_eff_test, double lambda) {
  if (h_eff_test.matrix.rows() != j_train.cols()) throw DimError("build_label_noise_spectrum: p mismatch");
  return build_label_noise_spectrum(compact_svd(j_train), h_eff_test, lambda);
}

LabelNoiseSpectrum spectrum_from_test_jacobian(const CompactSVD& svd, const Matrix& j_test, Index n_test,
                                               double lambda) {
  if (j_test.cols() != svd.v.rows()) throw DimError("spectrum_from_test_jacobian: p mismatch");
  if (n_test <= 0) throw EmptyDataset("spectrum_from_test_jacobian: n_test must be positive");
  if (lambda < 0.0) throw PreconditionFailed("spectrum_from_test_jacobian: lambda must be >= 0");
  LabelNoiseSpectrum out;
  out.s = svd.s;
  out.lambda = lambda;
  out.b_diag = (j_test * svd.v).colwise().squaredNorm().transpose() / static_cast<double>(n_test);
  return out;
}

LabelNoiseSpectrum network_label_noise_spectrum(const Network& net, const Matrix& x_train, const Matrix& x_test,
                                                double lambda, Index test_chunk, CompactSVD* svd_out) {
  if (x_test.rows() == 0) throw EmptyDataset("network_label_noise_spectrum: empty test set");
  if (test_chunk < 1) throw PreconditionFailed("network_label_noise_spectrum: test_chunk must be >= 1");
  if (lambda < 0.0) throw PreconditionFailed("network_label_noise_spectrum: lambda must be >= 0");
  CompactSVD svd = compact_svd(output_jacobian(net, x_train));
  LabelNoiseSpectrum out;
  out.s = svd.s;
  out.lambda = lambda;
  out.b_diag = Vector::Zero(svd.rank);
  for (Index start = 0; start < x_test.rows(); start += test_chunk) {
    const Index len = std::min(test_chunk, x_test.rows() - start);
    const Matrix jt = output_jacobian(net, x_test.middleRows(start, len));
    out.b_diag += (jt * svd.v).colwise().squaredNorm().transpose();
  }
  out.b_diag /= static_cast<double>(x_test.rows());
  if (svd_out) *svd_out = std::move(svd);
  return out;
}

double tpv_label_nonlinear(const LabelNoiseSpectrum& spec, double sigma_eps2) {
  check_spectrum(spec);
  if (spec.lambda != 0.0) throw PreconditionFailed("tpv_label_nonlinear: min-norm form needs lambda = 0");
  return sigma_eps2 * (spec.b_diag.array() / spec.s.array().square()).sum();
}

double tpv_label_ridge(const LabelNoiseSpectrum& spec, double sigma_eps2) {
  check_spectrum(spec);
  const auto s2 = spec.s.array().square();
  return sigma_eps2 * (spec.b_diag.array() * s2 / (s2 + spec.lambda).square()).sum();
}

double tpv_train_ridge_closed_form(const Vector& s, double lambda, double sigma_eps2, Index n) {
  if (n <= 0) throw EmptyDataset("tpv_train_ridge_closed_form: n must be positive");
  const auto s2 = s.array().square();
  return sigma_eps2 * (s2 / (s2 + lambda)).square().sum() / static_cast<double>(n);
}

Vector linearized_fit_fraction(const Vector& s, Index n, const TrainConfig& cfg) {
  if (n <= 0) throw EmptyDataset("linearized_fit_fraction: n must be positive");
  const bool full_batch = !cfg.batch_size || *cfg.batch_size >= n;
  if (!full_batch || cfg.weight_decay != 0.0 || cfg.proximity_gamma != 0.0) {
    return Vector::Constant(s.size(), std::numeric_limits<double>::quiet_NaN());
  }
  Vector phi(s.size());
  for (Index i = 0; i < s.size(); ++i) {
    const double lam = s[i] * s[i] / static_cast<double>(n);
    double e = -1.0;
    double v = 0.0;
    for (Index t = 0; t < cfg.epochs; ++t) {
      v = cfg.momentum * v + lam * e;
      e -= cfg.lr * schedule_factor(cfg.schedule, t, cfg.epochs) * v;
    }
    phi[i] = 1.0 + e;
  }
  return phi;
}

double tpv_label_finite_time(const LabelNoiseSpectrum& spec, Index n, const TrainConfig& cfg, double sigma_eps2) {
  check_spectrum(spec);
  const Vector phi = linearized_fit_fraction(spec.s, n, cfg);
  return sigma_eps2 * (spec.b_diag.array() * phi.array().square() / spec.s.array().square()).sum();
}

double tpv_sgd_theoretical(double eta, Index batch, double sigma_res2, double hessian_trace) {
  if (!(eta > 0.0) || batch < 1) throw PreconditionFailed("tpv_sgd_theoretical: need eta > 0 and batch >= 1");
  return eta * sigma_res2 * hessian_trace / (2.0 * static_cast<double>(batch));
}

double tpv_quantization(double delta, double hessian_trace) {
  if (delta < 0.0) throw PreconditionFailed("tpv_quantization: delta must be >= 0");
  return delta * delta * hessian_trace / 12.0;
}

double hessian_trace_proxy(const Matrix& j, Index n) {
  if (n <= 0) throw EmptyDataset("hessian_trace_proxy: n must be positive");
  return j.squaredNorm() / static_cast<double>(n);
}

Matrix fd_hessian(const Network& net, const Matrix& xs, const Matrix& ys, double step) {
  const Index p = net.num_params();
  if (p > 200) throw PreconditionFailed("fd_hessian: audit path is limited to p <= 200");
  Matrix h(p, p);
  Network probe = net;
  for (Index j = 0; j < p; ++j) {
    probe.params[j] = net.params[j] + step;
    const ParamVector gp = loss_and_grad_mse(probe, xs, ys).grad;
    probe.params[j] = net.params[j] - step;
    const ParamVector gm = loss_and_grad_mse(probe, xs, ys).grad;
    probe.params[j] = net.params[j];
    h.col(j) = (gp - gm) / (2.0 * step);
  }
  return 0.5 * (h + h.transpose());
}

}  // namespace tpv
