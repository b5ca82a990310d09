#include "tpv/linalg.hpp"

#include "tpv/covariance.hpp"
#include "tpv/errors.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

namespace tpv {
namespace {

constexpr int kMaxJacobiSweeps = 80;

// Orthogonalizes the columns of g in place, accumulating the rotations in v,
// so that on return g = (original g) * v has mutually orthogonal columns.
void one_sided_jacobi(Matrix& g, Matrix& v) {
  const Index rows = g.rows();
  const Index cols = g.cols();
  v.setIdentity(cols, cols);
  if (cols < 2) return;

  const double tol = static_cast<double>(std::max<Index>(cols, 16)) *
                     std::numeric_limits<double>::epsilon();
  Vector norms = g.colwise().squaredNorm().transpose();

  for (int sweep = 0; sweep < kMaxJacobiSweeps; ++sweep) {
    bool rotated = false;
    for (Index p = 0; p + 1 < cols; ++p) {
      for (Index q = p + 1; q < cols; ++q) {
        const double alpha = norms[p];
        const double beta = norms[q];
        if (alpha == 0.0 || beta == 0.0) continue;
        double* gp = g.col(p).data();
        double* gq = g.col(q).data();
        double gamma = 0.0;
        for (Index i = 0; i < rows; ++i) gamma += gp[i] * gq[i];
        if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;

        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double cs = 1.0 / std::sqrt(1.0 + t * t);
        const double sn = cs * t;
        for (Index i = 0; i < rows; ++i) {
          const double a = gp[i];
          const double b = gq[i];
          gp[i] = cs * a - sn * b;
          gq[i] = sn * a + cs * b;
        }
        double* vp = v.col(p).data();
        double* vq = v.col(q).data();
        for (Index i = 0; i < cols; ++i) {
          const double a = vp[i];
          const double b = vq[i];
          vp[i] = cs * a - sn * b;
          vq[i] = sn * a + cs * b;
        }
        const double new_alpha = alpha - t * gamma;
        const double new_beta = beta + t * gamma;
        // Cancellation in the cheap update: fall back to an explicit norm.
        norms[p] = new_alpha > 1e-3 * alpha ? new_alpha : g.col(p).squaredNorm();
        norms[q] = new_beta > 1e-3 * beta ? new_beta : g.col(q).squaredNorm();
      }
    }
    if (!rotated) break;
    norms = g.colwise().squaredNorm().transpose();
  }
}

}  // namespace

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) {
    throw InvalidMatrix(std::string(what) + ": matrix contains non-finite entries");
  }
}

double relative_frobenius(const Matrix& a, const Matrix& b) {
  const double denom = b.norm();
  const double diff = (a - b).norm();
  return denom > 0.0 ? diff / denom : diff;
}

CompactSVD compact_svd(const Matrix& m, double rel_tol) {
  require_finite(m, "compact_svd");
  if (!(rel_tol > 0.0 && rel_tol < 1.0)) {
    throw PreconditionFailed("compact_svd: rel_tol must lie in (0, 1)");
  }

  CompactSVD out;
  out.rank_tolerance = rel_tol;
  if (m.rows() == 0 || m.cols() == 0) {
    out.u.resize(m.rows(), 0);
    out.v.resize(m.cols(), 0);
    return out;
  }

  // Work on the orientation with at most as many columns as rows.
  const bool transposed = m.cols() > m.rows();
  Matrix a = transposed ? Matrix(m.transpose()) : m;
  const Index rows = a.rows();
  const Index cols = a.cols();

  Matrix left;   // rows x cols, columns = U * S of `a`
  Matrix right;  // cols x cols, orthogonal
  if (rows > cols) {
    Eigen::HouseholderQR<Matrix> qr(a);
    Matrix r = qr.matrixQR().topRows(cols).triangularView<Eigen::Upper>();
    one_sided_jacobi(r, right);
    Matrix thin_q = qr.householderQ() * Matrix::Identity(rows, cols);
    left = thin_q * r;
  } else {
    left = std::move(a);
    one_sided_jacobi(left, right);
  }

  Vector sv = left.colwise().norm().transpose();
  std::vector<Index> order(static_cast<std::size_t>(cols));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index i, Index j) { return sv[i] > sv[j]; });

  const double smax = sv[order.front()];
  Index rank = 0;
  if (smax > 0.0) {
    while (rank < cols && sv[order[static_cast<std::size_t>(rank)]] > rel_tol * smax) ++rank;
  }

  Matrix us(rows, rank);
  Matrix vs(cols, rank);
  Vector s(rank);
  for (Index k = 0; k < rank; ++k) {
    const Index j = order[static_cast<std::size_t>(k)];
    s[k] = sv[j];
    us.col(k) = left.col(j) / sv[j];
    vs.col(k) = right.col(j);
  }

  out.rank = rank;
  out.s = std::move(s);
  if (transposed) {
    out.u = std::move(vs);
    out.v = std::move(us);
  } else {
    out.u = std::move(us);
    out.v = std::move(vs);
  }
  return out;
}

Vector min_norm_solve(const CompactSVD& svd, const Vector& rhs) {
  if (rhs.size() != svd.u.rows()) {
    throw DimError("min_norm_solve: rhs length " + std::to_string(rhs.size()) +
                   " does not match " + std::to_string(svd.u.rows()) + " rows");
  }
  const Vector coeff = (svd.u.transpose() * rhs).cwiseQuotient(svd.s);
  return svd.v * coeff;
}

CgResult ridge_dual_solve(const LinearOperator& op, double lambda, const Vector& rhs,
                          double cg_tol, int cg_max_iter) {
  if (lambda < 0.0) throw PreconditionFailed("ridge_dual_solve: lambda must be >= 0");
  if (rhs.size() != op.dim) throw DimError("ridge_dual_solve: rhs length mismatch");

  CgResult res;
  res.alpha = Vector::Zero(op.dim);
  const double bnorm = rhs.norm();
  if (bnorm == 0.0) {
    res.converged = true;
    return res;
  }

  auto apply = [&](const Vector& x) -> Vector {
    Vector y = op.apply(x);
    if (lambda != 0.0) y += lambda * x;
    return y;
  };

  Vector r = rhs;
  Vector p = r;
  double rs = r.squaredNorm();
  for (int it = 1; it <= cg_max_iter; ++it) {
    const Vector ap = apply(p);
    const double curvature = p.dot(ap);
    if (!(curvature > 0.0)) break;
    const double step = rs / curvature;
    res.alpha += step * p;
    r -= step * ap;
    res.iterations = it;
    const double rs_new = r.squaredNorm();
    if (std::sqrt(rs_new) <= cg_tol * bnorm) break;
    p = r + (rs_new / rs) * p;
    rs = rs_new;
  }

  res.residual = (rhs - apply(res.alpha)).norm() / bnorm;
  res.converged = std::isfinite(res.residual) && res.residual <= cg_tol;
  return res;
}

LinearOperator gram_operator(const Matrix& j) {
  return LinearOperator{j.rows(), [&j](const Vector& x) -> Vector {
                          const Vector t = j.transpose() * x;
                          return j * t;
                        }};
}

double spectral_radius(const Matrix& a) {
  if (a.rows() != a.cols()) throw DimError("spectral_radius: matrix not square");
  if (a.rows() == 0) return 0.0;
  require_finite(a, "spectral_radius");
  if ((a - a.transpose()).norm() <= 1e-14 * a.norm()) {
    return Eigen::SelfAdjointEigenSolver<Matrix>(a, Eigen::EigenvaluesOnly).eigenvalues().cwiseAbs().maxCoeff();
  }
  return Eigen::EigenSolver<Matrix>(a, false).eigenvalues().cwiseAbs().maxCoeff();
}

Matrix discrete_lyapunov_solve(const Matrix& a, const Matrix& q) {
  if (a.rows() != a.cols() || q.rows() != q.cols() || a.rows() != q.rows()) {
    throw DimError("discrete_lyapunov_solve: a and q must be square with equal size");
  }
  require_finite(a, "discrete_lyapunov_solve(a)");
  require_finite(q, "discrete_lyapunov_solve(q)");
  if ((q - q.transpose()).norm() > 1e-10 * std::max(1.0, q.norm())) {
    throw PreconditionFailed("discrete_lyapunov_solve: q must be symmetric");
  }
  const double radius = spectral_radius(a);
  if (radius >= 1.0) {
    throw UnstableDynamics("discrete_lyapunov_solve: spectral radius " +
                           std::to_string(radius) + " >= 1");
  }

  // Smith doubling: C_{k+1} = C_k + A_k C_k A_k^T, A_{k+1} = A_k^2.
  constexpr int kMaxDoublings = 200;
  Matrix c = q;
  if (q.norm() == 0.0) return c;
  Matrix ak = a;
  bool converged = false;
  for (int k = 0; k < kMaxDoublings; ++k) {
    const Matrix step = ak * c * ak.transpose();
    c += step;
    if (!c.allFinite()) throw UnstableDynamics("discrete_lyapunov_solve: iteration diverged");
    if (step.norm() <= std::numeric_limits<double>::epsilon() * c.norm()) {
      converged = true;
      break;
    }
    ak = (ak * ak).eval();
  }
  if (!converged) {
    throw UnstableDynamics("discrete_lyapunov_solve: no convergence within iteration budget");
  }
  return 0.5 * (c + c.transpose());
}

double trace_product(const Matrix& h, const PerturbationCovariance& c) {
  if (h.rows() != h.cols() || h.rows() != c.dim()) {
    throw DimError("trace_product: h is " + std::to_string(h.rows()) + "x" +
                   std::to_string(h.cols()) + ", covariance dim " + std::to_string(c.dim()));
  }
  using C = PerturbationCovariance;
  return std::visit(
      [&](const auto& k) -> double {
        using T = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<T, C::Isotropic>) {
          return k.sigma2 == 0.0 ? 0.0 : k.sigma2 * h.trace();
        } else if constexpr (std::is_same_v<T, C::Diagonal>) {
          return h.diagonal().dot(k.diag);
        } else if constexpr (std::is_same_v<T, C::LowRank>) {
          // Tr(h L L^T) = Tr(L^T h L)
          return (k.factor.cwiseProduct(h * k.factor)).sum();
        } else {
          return (h.transpose().cwiseProduct(k.matrix)).sum();
        }
      },
      c.kind());
}

}  // namespace tpv
