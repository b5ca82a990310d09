#include "tpv/sgd_stationary.hpp"

#include "tpv/errors.hpp"
#include "tpv/rng.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <sstream>

namespace tpv {
namespace {

void check_residuals(const Matrix& j, const Vector& residuals, const char* what) {
  if (j.rows() != residuals.size()) throw DimError(std::string(what) + ": residuals length must equal J rows");
  if (j.rows() == 0) throw EmptyDataset(std::string(what) + ": no samples");
}

Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

}  // namespace

Matrix exact_sample_covariance(const Matrix& j, const Vector& residuals) {
  check_residuals(j, residuals, "exact_sample_covariance");
  const double n = static_cast<double>(j.rows());
  const Matrix weighted = residuals.cwiseAbs().asDiagonal() * j;
  const Vector mean_grad = j.transpose() * residuals / n;
  Matrix cov = weighted.transpose() * weighted / n - mean_grad * mean_grad.transpose();
  return symmetrize(cov);
}

Matrix minibatch_noise_covariance(const Matrix& sample_cov, Index b) {
  if (b < 1) throw PreconditionFailed("minibatch_noise_covariance: batch must be >= 1");
  return sample_cov / static_cast<double>(b);
}

GradientCovariance gradient_covariance(const Matrix& j, const Vector& residuals, Index b) {
  GradientCovariance g;
  g.sigma_sample = exact_sample_covariance(j, residuals);
  g.sigma_xi = minibatch_noise_covariance(g.sigma_sample, b);
  g.batch = b;
  return g;
}

Matrix stationary_covariance(const Matrix& h, const Matrix& sigma_xi, double eta) {
  if (h.rows() != h.cols() || sigma_xi.rows() != h.rows() || sigma_xi.cols() != h.cols()) {
    throw DimError("stationary_covariance: h and sigma_xi must be p x p");
  }
  if (!(eta > 0.0)) throw PreconditionFailed("stationary_covariance: eta must be positive");
  require_finite(h, "stationary_covariance");
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(h), Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || !(hi < 2.0 / eta)) {
    std::ostringstream msg;
    msg << "stationary_covariance: eigenvalues of h lie in [" << lo << ", " << hi << "], need (0, " << 2.0 / eta
        << "); lower eta below " << 2.0 / hi << " or regularize h";
    throw UnstableDynamics(msg.str());
  }
  const Matrix a = Matrix::Identity(h.rows(), h.cols()) - eta * h;
  return discrete_lyapunov_solve(a, eta * eta * symmetrize(sigma_xi));
}

Matrix simulate_ou(const Matrix& h, const Matrix& sigma_xi_factor, double eta, Index steps, Index burn_in,
                   std::uint64_t seed) {
  const Index p = h.rows();
  if (h.cols() != p || sigma_xi_factor.rows() != p) throw DimError("simulate_ou: shape mismatch");
  if (steps <= burn_in) throw PreconditionFailed("simulate_ou: steps must exceed burn_in");
  const Matrix a = Matrix::Identity(p, p) - eta * h;
  if (spectral_radius(a) >= 1.0) throw UnstableDynamics("simulate_ou: I - eta h is not stable");

  CounterRng rng(derive_seed(seed, {purpose_tag("ou-noise")}));
  Vector dw = Vector::Zero(p);
  Vector z(sigma_xi_factor.cols());
  Matrix second = Matrix::Zero(p, p);
  for (Index t = 0; t < steps; ++t) {
    for (Index k = 0; k < z.size(); ++k) z[k] = rng.normal();
    dw = a * dw - eta * (sigma_xi_factor * z);
    if (t >= burn_in) second.selfadjointView<Eigen::Lower>().rankUpdate(dw);
  }
  second = second.selfadjointView<Eigen::Lower>();
  return second / static_cast<double>(steps - burn_in);
}

double residual_variance(const Vector& residuals) {
  if (residuals.size() < 2) throw InsufficientData("residual_variance: need at least two residuals");
  const double mean = residuals.mean();
  return (residuals.array() - mean).square().mean();
}

TraceChain trace_chain(const Matrix& j, const Vector& residuals, Index b) {
  check_residuals(j, residuals, "trace_chain");
  if (b < 1) throw PreconditionFailed("trace_chain: batch must be >= 1");
  const double n = static_cast<double>(j.rows());
  const Vector row_norms = j.rowwise().squaredNorm();
  const Vector mean_grad = j.transpose() * residuals / n;
  TraceChain out;
  out.exact = (residuals.array().square() * row_norms.array()).sum() / n - mean_grad.squaredNorm();
  out.exact /= static_cast<double>(b);
  out.proxy = residual_variance(residuals) * row_norms.sum() / n / static_cast<double>(b);
  return out;
}

double dropped_term_ratio(const Matrix& j, const Vector& residuals) {
  check_residuals(j, residuals, "dropped_term_ratio");
  const double n = static_cast<double>(j.rows());
  const Matrix weighted = residuals.cwiseAbs().asDiagonal() * j;
  const double kept = (weighted.transpose() * weighted).norm() / n;
  const double dropped = (j.transpose() * residuals).squaredNorm() / (n * n);
  return kept > 0.0 ? dropped / kept : 0.0;
}

double residual_geometry_correlation(const Matrix& j, const Vector& residuals) {
  check_residuals(j, residuals, "residual_geometry_correlation");
  if (j.rows() < 2) throw InsufficientData("residual_geometry_correlation: need at least two samples");
  const Vector a = residuals.array().square();
  const Vector g = j.rowwise().squaredNorm();
  const Vector ac = a.array() - a.mean();
  const Vector gc = g.array() - g.mean();
  const double denom = ac.norm() * gc.norm();
  return denom > 0.0 ? ac.dot(gc) / denom : 0.0;
}

}  // namespace tpv
