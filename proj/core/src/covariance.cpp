#include "tpv/covariance.hpp"

#include "tpv/errors.hpp"

#include <Eigen/Eigenvalues>

namespace tpv {

PerturbationCovariance PerturbationCovariance::isotropic(Index dim, double sigma2) {
  if (dim < 0 || sigma2 < 0.0) throw PreconditionFailed("isotropic covariance: need dim >= 0, sigma2 >= 0");
  return PerturbationCovariance(Isotropic{dim, sigma2});
}

PerturbationCovariance PerturbationCovariance::diagonal(Vector diag) {
  if ((diag.array() < 0.0).any()) throw PreconditionFailed("diagonal covariance: negative entry");
  return PerturbationCovariance(Diagonal{std::move(diag)});
}

PerturbationCovariance PerturbationCovariance::low_rank(Matrix factor) {
  require_finite(factor, "low-rank covariance factor");
  return PerturbationCovariance(LowRank{std::move(factor)});
}

PerturbationCovariance PerturbationCovariance::dense(Matrix matrix) {
  if (matrix.rows() != matrix.cols()) throw DimError("dense covariance must be square");
  require_finite(matrix, "dense covariance");
  if ((matrix - matrix.transpose()).norm() > 1e-10 * std::max(1.0, matrix.norm())) {
    throw PreconditionFailed("dense covariance must be symmetric");
  }
  return PerturbationCovariance(Dense{std::move(matrix)});
}

Index PerturbationCovariance::dim() const noexcept {
  return std::visit(
      [](const auto& k) -> Index {
        using T = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<T, Isotropic>) return k.dim;
        else if constexpr (std::is_same_v<T, Diagonal>) return k.diag.size();
        else if constexpr (std::is_same_v<T, LowRank>) return k.factor.rows();
        else return k.matrix.rows();
      },
      kind_);
}

double PerturbationCovariance::trace() const {
  return std::visit(
      [](const auto& k) -> double {
        using T = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<T, Isotropic>) return k.sigma2 * static_cast<double>(k.dim);
        else if constexpr (std::is_same_v<T, Diagonal>) return k.diag.sum();
        else if constexpr (std::is_same_v<T, LowRank>) return k.factor.squaredNorm();
        else return k.matrix.trace();
      },
      kind_);
}

Matrix PerturbationCovariance::to_dense() const {
  return std::visit(
      [](const auto& k) -> Matrix {
        using T = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<T, Isotropic>) return k.sigma2 * Matrix::Identity(k.dim, k.dim);
        else if constexpr (std::is_same_v<T, Diagonal>) return k.diag.asDiagonal();
        else if constexpr (std::is_same_v<T, LowRank>) return k.factor * k.factor.transpose();
        else return k.matrix;
      },
      kind_);
}

GaussianPerturbationSampler::GaussianPerturbationSampler(const PerturbationCovariance& c) {
  using C = PerturbationCovariance;
  std::visit(
      [&](const auto& k) {
        using T = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<T, C::Isotropic>) {
          scale_ = Vector::Constant(k.dim, std::sqrt(k.sigma2));
        } else if constexpr (std::is_same_v<T, C::Diagonal>) {
          scale_ = k.diag.cwiseSqrt();
        } else if constexpr (std::is_same_v<T, C::LowRank>) {
          factor_ = k.factor;
          diagonal_ = false;
        } else {
          // PSD square root via eigendecomposition; tiny negative eigenvalues clipped.
          Eigen::SelfAdjointEigenSolver<Matrix> eig(k.matrix);
          const Vector root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
          factor_ = eig.eigenvectors() * root.asDiagonal();
          diagonal_ = false;
        }
      },
      c.kind());
}

Vector GaussianPerturbationSampler::sample(CounterRng& rng) const {
  if (diagonal_) {
    Vector z(scale_.size());
    for (Index i = 0; i < z.size(); ++i) z[i] = scale_[i] * rng.normal();
    return z;
  }
  Vector z(factor_.cols());
  for (Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
  return factor_ * z;
}

}  // namespace tpv
