#include "tpv/pruning.hpp"

#include "tpv/errors.hpp"
#include "tpv/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tpv {
namespace {

void check_groups(const Network& net, const std::vector<ParamGroup>& groups) {
  for (const auto& g : groups) {
    for (Index j : g.indices) {
      if (j < 0 || j >= net.num_params()) throw DimError("parameter group index out of range");
    }
  }
}

// score_g = mean_i (sum_{j in g} (m_i^T J_i)_j w_j)^2.
std::vector<GroupScore> score_from_seeds(const Network& net, const Matrix& xs, const Matrix& seeds,
                                         const std::vector<ParamGroup>& groups, Criterion criterion) {
  check_groups(net, groups);
  const Matrix mj = weighted_output_jacobian(net, xs, seeds);
  const double n = static_cast<double>(xs.rows());
  std::vector<GroupScore> out;
  out.reserve(groups.size());
  for (const auto& g : groups) {
    Vector proj = Vector::Zero(xs.rows());
    for (Index j : g.indices) proj += net.params[j] * mj.col(j);
    out.push_back({g.id, proj.squaredNorm() / n, criterion});
  }
  return out;
}

Matrix argmax_one_hot(const Matrix& logits) {
  const auto idx = argmax_rows(logits);
  Matrix e = Matrix::Zero(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) e(i, idx[static_cast<std::size_t>(i)]) = 1.0;
  return e;
}

}  // namespace

std::string to_string(Criterion c) {
  switch (c) {
    case Criterion::JBR: return "jbr";
    case Criterion::JC: return "jc";
    case Criterion::L1: return "l1";
    case Criterion::Taylor: return "taylor";
    case Criterion::Random: return "random";
  }
  return "unknown";
}

Criterion criterion_from_string(const std::string& name) {
  for (Criterion c : {Criterion::JBR, Criterion::JC, Criterion::L1, Criterion::Taylor, Criterion::Random}) {
    if (to_string(c) == name) return c;
  }
  throw ConfigError("unknown pruning criterion '" + name + "'");
}

std::vector<ParamGroup> neuron_groups(const MLPConfig& cfg) {
  const auto shapes = layer_shapes(cfg);
  std::vector<ParamGroup> groups;
  Index id = 0;
  for (std::size_t l = 0; l + 1 < shapes.size(); ++l) {
    const LayerShape& cur = shapes[l];
    const LayerShape& next = shapes[l + 1];
    for (Index k = 0; k < cur.out; ++k) {
      ParamGroup g;
      g.id = id++;
      g.layer = static_cast<Index>(l);
      g.neuron = k;
      for (Index i = 0; i < cur.in; ++i) g.indices.push_back(cur.weight_offset + k * cur.in + i);
      g.indices.push_back(cur.bias_offset + k);
      if (l + 2 == shapes.size()) {
        for (Index o = 0; o < next.out; ++o) g.indices.push_back(next.weight_offset + o * next.in + k);
      }
      groups.push_back(std::move(g));
    }
  }
  return groups;
}

Matrix log_softmax_rows(const Matrix& logits) {
  const Vector mx = logits.rowwise().maxCoeff();
  Matrix shifted = logits.colwise() - mx;
  const Vector lse = shifted.array().exp().rowwise().sum().log().matrix();
  return shifted.colwise() - lse;
}

Matrix softmax_rows(const Matrix& logits) { return log_softmax_rows(logits).array().exp().matrix(); }

std::vector<Index> argmax_rows(const Matrix& m) {
  std::vector<Index> out(static_cast<std::size_t>(m.rows()));
  for (Index i = 0; i < m.rows(); ++i) {
    Index best = 0;
    for (Index k = 1; k < m.cols(); ++k) {
      if (m(i, k) > m(i, best)) best = k;
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

std::vector<bool> confident_sample_mask(const Network& net, const Matrix& xs, double tau) {
  if (net.config.output_dim < 2) throw PreconditionFailed("confident_sample_mask: need at least two classes");
  const Matrix p = softmax_rows(forward_batch(net, xs));
  std::vector<bool> mask(static_cast<std::size_t>(xs.rows()));
  for (Index i = 0; i < p.rows(); ++i) mask[static_cast<std::size_t>(i)] = p.row(i).maxCoeff() > tau;
  return mask;
}

Matrix select_rows(const Matrix& xs, const std::vector<bool>& mask) {
  if (static_cast<Index>(mask.size()) != xs.rows()) throw DimError("select_rows: mask length mismatch");
  std::vector<Index> idx;
  for (Index i = 0; i < xs.rows(); ++i) {
    if (mask[static_cast<std::size_t>(i)]) idx.push_back(i);
  }
  return xs(idx, Eigen::all);
}

std::vector<GroupScore> jbr_score(const Network& net, const Matrix& xs, const std::vector<ParamGroup>& groups) {
  if (xs.rows() == 0) throw NoConfidentSamples("jbr_score: empty confident subset");
  const Matrix logits = forward_batch(net, xs);
  const Matrix m = softmax_rows(logits) - argmax_one_hot(logits);
  return score_from_seeds(net, xs, m, groups, Criterion::JBR);
}

std::vector<GroupScore> jc_score(const Network& net, const Matrix& xs, const Matrix& labels,
                                 const std::vector<ParamGroup>& groups) {
  if (labels.rows() != xs.rows() || labels.cols() != net.config.output_dim) {
    throw DimError("jc_score: labels must be n x K");
  }
  if (xs.rows() == 0) throw NoConfidentSamples("jc_score: empty sample set");
  const Matrix m = softmax_rows(forward_batch(net, xs)) - labels;
  return score_from_seeds(net, xs, m, groups, Criterion::JC);
}

Matrix one_hot(const std::vector<Index>& labels, Index num_classes) { return scaled_one_hot(labels, num_classes, 1.0); }

std::vector<GroupScore> baseline_scores(const Network& net, const std::vector<ParamGroup>& groups, Criterion criterion,
                                        std::uint64_t seed, const Matrix& xs, const std::vector<Index>& labels) {
  check_groups(net, groups);
  std::vector<GroupScore> out;
  out.reserve(groups.size());
  switch (criterion) {
    case Criterion::L1:
      for (const auto& g : groups) {
        double s = 0.0;
        for (Index j : g.indices) s += std::abs(net.params[j]);
        out.push_back({g.id, s, criterion});
      }
      break;
    case Criterion::Random: {
      CounterRng rng(derive_seed(seed, {purpose_tag("random-scores")}));
      for (const auto& g : groups) out.push_back({g.id, rng.uniform(), criterion});
      break;
    }
    case Criterion::Taylor: {
      if (xs.rows() == 0 || static_cast<Index>(labels.size()) != xs.rows()) {
        throw DimError("baseline_scores: Taylor needs samples with one label each");
      }
      const Matrix resid = softmax_rows(forward_batch(net, xs)) - one_hot(labels, net.config.output_dim);
      const ParamVector grad = output_vjp(net, xs, resid / static_cast<double>(xs.rows()));
      for (const auto& g : groups) {
        double s = 0.0;
        for (Index j : g.indices) s += net.params[j] * grad[j];
        out.push_back({g.id, s * s, criterion});
      }
      break;
    }
    default:
      throw PreconditionFailed("baseline_scores: criterion must be L1, Taylor or Random");
  }
  return out;
}

double accuracy(const Network& net, const Matrix& xs, const std::vector<Index>& labels) {
  if (static_cast<Index>(labels.size()) != xs.rows()) throw DimError("accuracy: label count mismatch");
  if (xs.rows() == 0) throw EmptyDataset("accuracy: no samples");
  const auto pred = argmax_rows(forward_batch(net, xs));
  Index hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double cross_entropy(const Network& net, const Matrix& xs, const std::vector<Index>& labels) {
  if (static_cast<Index>(labels.size()) != xs.rows()) throw DimError("cross_entropy: label count mismatch");
  if (xs.rows() == 0) throw EmptyDataset("cross_entropy: no samples");
  const Matrix lp = log_softmax_rows(forward_batch(net, xs));
  double total = 0.0;
  for (Index i = 0; i < lp.rows(); ++i) total -= lp(i, labels[static_cast<std::size_t>(i)]);
  return total / static_cast<double>(lp.rows());
}

PerturbationCovariance pruning_covariance(const Network& net, const ParamGroup& group, double sigma2) {
  if (sigma2 < 0.0) throw PreconditionFailed("pruning_covariance: sigma2 must be >= 0");
  Matrix factor = Matrix::Zero(net.num_params(), 1);
  const double s = std::sqrt(sigma2);
  for (Index j : group.indices) factor(j, 0) = s * net.params[j];
  return PerturbationCovariance::low_rank(std::move(factor));
}

void remove_group(Network& net, const ParamGroup& group) {
  for (Index j : group.indices) net.params[j] = 0.0;
}

PruneTrajectory iterative_global_prune(const Network& net, const ClassificationDataset& score_set,
                                       const ClassificationDataset& eval_set, Criterion criterion,
                                       const PruneSettings& settings) {
  if (!(settings.target_sparsity >= 0.0 && settings.target_sparsity < 1.0)) {
    throw PreconditionFailed("iterative_global_prune: target_sparsity must lie in [0, 1)");
  }
  if (settings.iterations < 1) throw PreconditionFailed("iterative_global_prune: iterations must be >= 1");
  const auto groups = neuron_groups(net.config);
  const auto shapes = layer_shapes(net.config);
  const Index total_groups = static_cast<Index>(groups.size());
  const Index hidden_layers = static_cast<Index>(net.config.hidden_widths.size());

  Network cur = net;
  std::vector<bool> alive(groups.size(), true);
  std::vector<Index> alive_per_layer(net.config.hidden_widths.begin(), net.config.hidden_widths.end());
  double dense_macs = 0.0;
  for (const auto& s : shapes) dense_macs += static_cast<double>(s.in * s.out);

  PruneTrajectory traj;
  traj.criterion = criterion;
  traj.seed = settings.seed;

  auto record = [&](Index it) {
    PrunePoint pt;
    pt.iteration = it;
    Index removed = 0;
    for (bool a : alive) removed += a ? 0 : 1;
    pt.sparsity = total_groups > 0 ? static_cast<double>(removed) / static_cast<double>(total_groups) : 0.0;
    double macs = 0.0;
    Index params = 0;
    for (std::size_t l = 0; l < shapes.size(); ++l) {
      const Index in = l == 0 ? shapes[l].in : alive_per_layer[l - 1];
      const Index out = static_cast<Index>(l) < hidden_layers ? alive_per_layer[l] : shapes[l].out;
      macs += static_cast<double>(in * out);
      params += in * out + out;
    }
    pt.params_remaining = params;
    pt.macs_fraction = dense_macs > 0.0 ? macs / dense_macs : 1.0;
    pt.accuracy = accuracy(cur, eval_set.xs, eval_set.labels);
    traj.points.push_back(pt);
  };

  record(0);
  if (settings.target_sparsity == 0.0 || total_groups == 0) return traj;

  Index removed = 0;
  for (Index it = 1; it <= settings.iterations; ++it) {
    const double frac_left =
        std::pow(1.0 - settings.target_sparsity, static_cast<double>(it) / static_cast<double>(settings.iterations));
    const Index goal = static_cast<Index>(std::llround(static_cast<double>(total_groups) * (1.0 - frac_left)));
    if (goal <= removed) {
      record(it);
      continue;
    }

    std::vector<GroupScore> scores;
    try {
      switch (criterion) {
        case Criterion::JBR:
        case Criterion::JC: {
          const auto mask = confident_sample_mask(cur, score_set.xs, settings.tau);
          const Matrix sub = select_rows(score_set.xs, mask);
          if (criterion == Criterion::JBR) {
            scores = jbr_score(cur, sub, groups);
          } else {
            std::vector<Index> sub_labels;
            if (settings.jc_use_predictions) {
              sub_labels = argmax_rows(forward_batch(cur, sub));
            } else {
              for (std::size_t i = 0; i < mask.size(); ++i) {
                if (mask[i]) sub_labels.push_back(score_set.labels[i]);
              }
            }
            scores = jc_score(cur, sub, one_hot(sub_labels, cur.config.output_dim), groups);
          }
          break;
        }
        case Criterion::Random:
          scores = baseline_scores(cur, groups, criterion, derive_seed(settings.seed, {static_cast<std::uint64_t>(it)}));
          break;
        default:
          scores = baseline_scores(cur, groups, criterion, settings.seed, score_set.xs, score_set.labels);
      }
    } catch (const NoConfidentSamples& e) {
      traj.stopped_early = true;
      traj.stop_reason = e.what();
      return traj;
    }

    std::vector<Index> order;
    for (Index g = 0; g < total_groups; ++g) {
      if (alive[static_cast<std::size_t>(g)]) order.push_back(g);
    }
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
      return scores[static_cast<std::size_t>(a)].score < scores[static_cast<std::size_t>(b)].score;
    });
    const Index take = goal - removed;
    for (Index k = 0; k < take; ++k) {
      const ParamGroup& g = groups[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])];
      if (alive_per_layer[static_cast<std::size_t>(g.layer)] == 1) {
        traj.stopped_early = true;
        traj.stop_reason = "pruning would empty hidden layer " + std::to_string(g.layer);
        record(it);
        return traj;
      }
      alive[static_cast<std::size_t>(g.id)] = false;
      --alive_per_layer[static_cast<std::size_t>(g.layer)];
      remove_group(cur, g);
      ++removed;
    }
    record(it);
  }
  return traj;
}

Network train_classifier(const ClassificationDataset& ds, const ClassifierConfig& cfg) {
  MLPConfig mc;
  mc.input_dim = ds.xs.cols();
  mc.hidden_widths = cfg.hidden_widths;
  mc.output_dim = ds.num_classes;
  mc.seed = cfg.seed;
  const Network init = init_network(mc);
  Dataset reg;
  reg.xs = ds.xs;
  reg.ys = scaled_one_hot(ds.labels, ds.num_classes, cfg.logit_scale);
  const TrainTrace trace = train_mse(init, reg, cfg.train);
  if (trace.diverged) throw PreconditionFailed("train_classifier: training diverged");
  return init.with_params(trace.final_params);
}

}  // namespace tpv
