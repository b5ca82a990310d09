#pragma once

#include "tpv/linalg.hpp"
#include "tpv/rng.hpp"

#include <variant>

namespace tpv {

// C = E[dw dw^T] in one of four PSD-by-construction representations.
class PerturbationCovariance {
 public:
  struct Isotropic {
    Index dim = 0;
    double sigma2 = 0.0;
  };
  struct Diagonal {
    Vector diag;
  };
  // C = L L^T with L of shape p x r.
  struct LowRank {
    Matrix factor;
  };
  struct Dense {
    Matrix matrix;
  };
  using Kind = std::variant<Isotropic, Diagonal, LowRank, Dense>;

  static PerturbationCovariance isotropic(Index dim, double sigma2);
  static PerturbationCovariance diagonal(Vector diag);
  static PerturbationCovariance low_rank(Matrix factor);
  static PerturbationCovariance dense(Matrix matrix);

  const Kind& kind() const noexcept { return kind_; }
  Index dim() const noexcept;
  double trace() const;
  Matrix to_dense() const;

 private:
  explicit PerturbationCovariance(Kind kind) : kind_(std::move(kind)) {}
  Kind kind_;
};

// Draws dw ~ N(0, C) exactly (factor computed once at construction).
class GaussianPerturbationSampler {
 public:
  explicit GaussianPerturbationSampler(const PerturbationCovariance& c);
  Vector sample(CounterRng& rng) const;

 private:
  Matrix factor_;  // empty for isotropic/diagonal
  Vector scale_;   // per-coordinate std for isotropic/diagonal
  bool diagonal_ = true;
};

}  // namespace tpv
