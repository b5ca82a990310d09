#pragma once

#include "tpv/linalg.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace tpv {

enum class TeacherKind { LinearGaussian, SingleReLU, MultiReLU10 };

std::string to_string(TeacherKind kind);
TeacherKind teacher_kind_from_string(const std::string& name);

struct TeacherSpec {
  TeacherKind kind = TeacherKind::LinearGaussian;
  Index input_dim = 1;
  std::uint64_t seed = 0;
};

// Concrete teacher parameters: standard Gaussian rows of `a`, biases `b`.
// LinearGaussian: y = a_0 . x; SingleReLU: y = relu(a_0 . x);
// MultiReLU10: y = sum_k relu(a_k . x + b_k).
struct Teacher {
  TeacherSpec spec;
  Matrix a;
  Vector b;
};

// Standard-Gaussian teacher parameters, a pure function of spec.seed.
Teacher make_teacher(const TeacherSpec& spec);
Matrix teacher_outputs(const Teacher& teacher, const Matrix& xs);

struct Dataset {
  Matrix xs;  // n x d
  Matrix ys;  // n x K
  TeacherSpec teacher;
  double noise_sigma = 0.0;

  Index size() const noexcept { return xs.rows(); }
};

// x ~ N(0, I_d). `stream` selects an independent input stream for the same
// teacher, so train and test splits share one teacher.
Dataset sample_dataset(const TeacherSpec& spec, Index n, std::uint64_t stream = 0);
Dataset add_label_noise(const Dataset& ds, double sigma, std::uint64_t run_seed);

// Gaussian-mixture classification task: class means on a sphere of radius
// `separation`, unit-variance isotropic noise.
struct ClassificationDataset {
  Matrix xs;
  std::vector<Index> labels;
  Index num_classes = 0;

  Index size() const noexcept { return xs.rows(); }
};

ClassificationDataset sample_gaussian_mixture(Index num_classes, Index input_dim, Index n,
                                              double separation, std::uint64_t seed,
                                              std::uint64_t stream = 0);

// One-hot targets scaled by `logit_scale`, for MSE training of a classifier.
Matrix scaled_one_hot(const std::vector<Index>& labels, Index num_classes, double logit_scale);

nlohmann::json dataset_to_json(const Dataset& ds);
Dataset dataset_from_json(const nlohmann::json& j);

}  // namespace tpv
