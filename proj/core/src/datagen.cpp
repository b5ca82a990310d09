#include "tpv/datagen.hpp"

#include "tpv/errors.hpp"
#include "tpv/rng.hpp"

namespace tpv {
namespace {

Matrix gaussian_matrix(Index rows, Index cols, CounterRng& rng) {
  Matrix m(rows, cols);
  // Row-major fill so a given sample does not depend on the total n.
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
  return m;
}

}  // namespace

std::string to_string(TeacherKind kind) {
  switch (kind) {
    case TeacherKind::LinearGaussian: return "linear";
    case TeacherKind::SingleReLU: return "relu";
    case TeacherKind::MultiReLU10: return "multi_relu10";
  }
  return "unknown";
}

TeacherKind teacher_kind_from_string(const std::string& name) {
  if (name == "linear") return TeacherKind::LinearGaussian;
  if (name == "relu") return TeacherKind::SingleReLU;
  if (name == "multi_relu10") return TeacherKind::MultiReLU10;
  throw ConfigError("unknown teacher kind '" + name + "'");
}

Teacher make_teacher(const TeacherSpec& spec) {
  if (spec.input_dim < 1) throw PreconditionFailed("TeacherSpec: input_dim must be >= 1");
  CounterRng rng(derive_seed(spec.seed, {purpose_tag("teacher"), static_cast<std::uint64_t>(spec.kind)}));
  Teacher t{spec, {}, {}};
  const Index units = spec.kind == TeacherKind::MultiReLU10 ? 10 : 1;
  t.a = gaussian_matrix(units, spec.input_dim, rng);
  t.b = spec.kind == TeacherKind::MultiReLU10 ? Vector(gaussian_matrix(units, 1, rng).col(0))
                                              : Vector::Zero(units);
  return t;
}

Matrix teacher_outputs(const Teacher& teacher, const Matrix& xs) {
  if (xs.cols() != teacher.a.cols()) throw DimError("teacher_outputs: input dimension mismatch");
  Matrix z = xs * teacher.a.transpose();
  z.rowwise() += teacher.b.transpose();
  switch (teacher.spec.kind) {
    case TeacherKind::LinearGaussian: return z;
    case TeacherKind::SingleReLU: return z.cwiseMax(0.0);
    case TeacherKind::MultiReLU10: return z.cwiseMax(0.0).rowwise().sum();
  }
  return z;
}

Dataset sample_dataset(const TeacherSpec& spec, Index n, std::uint64_t stream) {
  if (n < 1) throw PreconditionFailed("sample_dataset: n must be >= 1");
  const Teacher teacher = make_teacher(spec);
  CounterRng rng(derive_seed(spec.seed, {purpose_tag("inputs"), stream}));
  Dataset ds;
  ds.xs = gaussian_matrix(n, spec.input_dim, rng);
  ds.ys = teacher_outputs(teacher, ds.xs);
  ds.teacher = spec;
  return ds;
}

Dataset add_label_noise(const Dataset& ds, double sigma, std::uint64_t run_seed) {
  if (sigma < 0.0) throw PreconditionFailed("add_label_noise: sigma must be >= 0");
  Dataset out = ds;
  out.noise_sigma = sigma;
  if (sigma == 0.0) return out;
  CounterRng rng(derive_seed(run_seed, {purpose_tag("label-noise")}));
  for (Index i = 0; i < out.ys.rows(); ++i)
    for (Index k = 0; k < out.ys.cols(); ++k) out.ys(i, k) += sigma * rng.normal();
  return out;
}

ClassificationDataset sample_gaussian_mixture(Index num_classes, Index input_dim, Index n,
                                              double separation, std::uint64_t seed,
                                              std::uint64_t stream) {
  if (num_classes < 2 || input_dim < 1 || n < 1) {
    throw PreconditionFailed("sample_gaussian_mixture: need >= 2 classes, d >= 1, n >= 1");
  }
  CounterRng mean_rng(derive_seed(seed, {purpose_tag("mixture-means")}));
  Matrix means = gaussian_matrix(num_classes, input_dim, mean_rng);
  for (Index c = 0; c < num_classes; ++c) means.row(c) *= separation / means.row(c).norm();

  CounterRng rng(derive_seed(seed, {purpose_tag("mixture-samples"), stream}));
  ClassificationDataset ds;
  ds.num_classes = num_classes;
  ds.xs.resize(n, input_dim);
  ds.labels.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const Index c = static_cast<Index>(rng.index(static_cast<std::uint64_t>(num_classes)));
    ds.labels[static_cast<std::size_t>(i)] = c;
    for (Index j = 0; j < input_dim; ++j) ds.xs(i, j) = means(c, j) + rng.normal();
  }
  return ds;
}

Matrix scaled_one_hot(const std::vector<Index>& labels, Index num_classes, double logit_scale) {
  Matrix y = Matrix::Zero(static_cast<Index>(labels.size()), num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) throw DimError("scaled_one_hot: label out of range");
    y(static_cast<Index>(i), labels[i]) = logit_scale;
  }
  return y;
}

nlohmann::json dataset_to_json(const Dataset& ds) {
  auto rows = [](const Matrix& m) {
    std::vector<std::vector<double>> out(static_cast<std::size_t>(m.rows()));
    for (Index i = 0; i < m.rows(); ++i)
      out[static_cast<std::size_t>(i)].assign(m.row(i).begin(), m.row(i).end());
    return out;
  };
  return {{"teacher", {{"kind", to_string(ds.teacher.kind)},
                       {"input_dim", ds.teacher.input_dim},
                       {"seed", ds.teacher.seed}}},
          {"noise_sigma", ds.noise_sigma},
          {"xs", rows(ds.xs)},
          {"ys", rows(ds.ys)}};
}

Dataset dataset_from_json(const nlohmann::json& j) {
  auto matrix = [](const nlohmann::json& rows) {
    const auto v = rows.get<std::vector<std::vector<double>>>();
    const Index n = static_cast<Index>(v.size());
    const Index c = n ? static_cast<Index>(v.front().size()) : 0;
    Matrix m(n, c);
    for (Index i = 0; i < n; ++i) {
      if (static_cast<Index>(v[static_cast<std::size_t>(i)].size()) != c) throw DimError("ragged matrix in dataset JSON");
      for (Index k = 0; k < c; ++k) m(i, k) = v[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
    }
    return m;
  };
  Dataset ds;
  const auto& t = j.at("teacher");
  ds.teacher.kind = teacher_kind_from_string(t.at("kind").get<std::string>());
  ds.teacher.input_dim = t.at("input_dim").get<Index>();
  ds.teacher.seed = t.at("seed").get<std::uint64_t>();
  ds.noise_sigma = j.at("noise_sigma").get<double>();
  ds.xs = matrix(j.at("xs"));
  ds.ys = matrix(j.at("ys"));
  if (ds.xs.rows() != ds.ys.rows()) throw DimError("dataset JSON: xs/ys row mismatch");
  return ds;
}

}  // namespace tpv
