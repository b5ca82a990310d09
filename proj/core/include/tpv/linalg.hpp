#pragma once

#include <Eigen/Dense>

#include <functional>

namespace tpv {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class PerturbationCovariance;

// Singular values below rank_tolerance * s_max are treated as zero everywhere
// in the library. This single constant controls the B_ii / s_i^2 blow-up.
inline constexpr double kDefaultRankTolerance = 1e-10;

// m = u * diag(s) * v^T with u: rows x r, v: cols x r, s descending and > 0.
struct CompactSVD {
  Matrix u;
  Vector s;
  Matrix v;
  Index rank = 0;
  double rank_tolerance = kDefaultRankTolerance;
};

// Matrix-free symmetric operator, e.g. alpha -> J (J^T alpha).
struct LinearOperator {
  Index dim = 0;
  std::function<Vector(const Vector&)> apply;
};

struct CgResult {
  Vector alpha;
  bool converged = false;
  double residual = 0.0;  // ||rhs - (op + lambda I) alpha|| / ||rhs||
  int iterations = 0;
};

// Throws InvalidMatrix on any NaN/Inf entry.
void require_finite(const Matrix& m, const char* what);

// QR-preconditioned one-sided (Hestenes) Jacobi SVD.
CompactSVD compact_svd(const Matrix& m, double rel_tol = kDefaultRankTolerance);

// x = V S^{-1} U^T rhs: the least-squares solution with smallest norm.
Vector min_norm_solve(const CompactSVD& svd, const Vector& rhs);

// Conjugate gradient on (op + lambda I) alpha = rhs. Never throws on
// non-convergence; inspect `converged`.
CgResult ridge_dual_solve(const LinearOperator& op, double lambda, const Vector& rhs,
                          double cg_tol, int cg_max_iter);

// alpha -> J (J^T alpha) without forming J J^T.
LinearOperator gram_operator(const Matrix& j);

// Largest eigenvalue modulus.
double spectral_radius(const Matrix& a);

// Solves C = A C A^T + Q by squaring (Smith doubling).
// Throws UnstableDynamics when the spectral radius of a is >= 1.
Matrix discrete_lyapunov_solve(const Matrix& a, const Matrix& q);

// Tr(h * C) using the structure of C.
double trace_product(const Matrix& h, const PerturbationCovariance& c);

// ||a - b||_F / ||b||_F (or ||a||_F when b is zero).
double relative_frobenius(const Matrix& a, const Matrix& b);

}  // namespace tpv
