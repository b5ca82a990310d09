#pragma once

#include "tpv/covariance.hpp"
#include "tpv/datagen.hpp"
#include "tpv/mlp.hpp"
#include "tpv/trainer.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace tpv {

inline constexpr double kConfidenceTau = 0.9;

struct ParamGroup {
  Index id = 0;
  std::vector<Index> indices;
  Index layer = 0;   // hidden layer index, 0-based
  Index neuron = 0;  // unit within that layer
};

enum class Criterion { JBR, JC, L1, Taylor, Random };
std::string to_string(Criterion c);
Criterion criterion_from_string(const std::string& name);

struct GroupScore {
  Index group = 0;
  double score = 0.0;
  Criterion criterion = Criterion::JBR;
};

// One group per hidden neuron: its fan-in weights and bias, plus the fan-out
// weights for neurons of the last hidden layer. Groups are disjoint.
std::vector<ParamGroup> neuron_groups(const MLPConfig& cfg);

// Row-wise softmax and log-softmax of an n x K logit matrix.
Matrix softmax_rows(const Matrix& logits);
Matrix log_softmax_rows(const Matrix& logits);
// Argmax per row, ties to the lowest index.
std::vector<Index> argmax_rows(const Matrix& m);

std::vector<bool> confident_sample_mask(const Network& net, const Matrix& xs, double tau = kConfidenceTau);
Matrix select_rows(const Matrix& xs, const std::vector<bool>& mask);

// mean_x (m(x)^T J_g(x) w_g)^2 with m = p - e_argmax.
std::vector<GroupScore> jbr_score(const Network& net, const Matrix& xs, const std::vector<ParamGroup>& groups);
// Same with m = p - y.
std::vector<GroupScore> jc_score(const Network& net, const Matrix& xs, const Matrix& labels,
                                 const std::vector<ParamGroup>& groups);

// L1 = ||w_g||_1; Taylor = (sum_{j in g} w_j dL/dw_j)^2 with L the mean
// cross-entropy over (xs, labels); Random = seeded uniform score.
std::vector<GroupScore> baseline_scores(const Network& net, const std::vector<ParamGroup>& groups, Criterion criterion,
                                        std::uint64_t seed, const Matrix& xs = Matrix(),
                                        const std::vector<Index>& labels = {});

Matrix one_hot(const std::vector<Index>& labels, Index num_classes);
double accuracy(const Network& net, const Matrix& xs, const std::vector<Index>& labels);

// Mean cross-entropy of softmax(f(x)) against integer labels.
double cross_entropy(const Network& net, const Matrix& xs, const std::vector<Index>& labels);

// Group noise model C = sigma2 * w_g w_g^T (zero outside g).
PerturbationCovariance pruning_covariance(const Network& net, const ParamGroup& group, double sigma2);

// Zeroes every parameter of the group.
void remove_group(Network& net, const ParamGroup& group);

struct PrunePoint {
  Index iteration = 0;
  double sparsity = 0.0;  // fraction of hidden-neuron groups removed
  Index params_remaining = 0;
  double macs_fraction = 1.0;
  double accuracy = 0.0;
};

struct PruneTrajectory {
  Criterion criterion = Criterion::JBR;
  std::uint64_t seed = 0;
  std::vector<PrunePoint> points;
  bool stopped_early = false;
  std::string stop_reason;
};

struct PruneSettings {
  double target_sparsity = 0.5;
  Index iterations = 18;
  double tau = kConfidenceTau;
  std::uint64_t seed = 0;
  // JC labels are the current model's argmax instead of the dataset labels.
  bool jc_use_predictions = false;
};

// Scores on (score_xs, score_labels) are recomputed on the current network at
// every iteration; accuracy is measured on (eval_xs, eval_labels). JBR and JC
// both score the confident subset of score_xs.
PruneTrajectory iterative_global_prune(const Network& net, const ClassificationDataset& score_set,
                                       const ClassificationDataset& eval_set, Criterion criterion,
                                       const PruneSettings& settings);

struct ClassifierConfig {
  std::vector<Index> hidden_widths{64};
  double logit_scale = 5.0;
  TrainConfig train;
  std::uint64_t seed = 0;
};

// MSE regression onto scaled one-hot targets.
Network train_classifier(const ClassificationDataset& ds, const ClassifierConfig& cfg);

}  // namespace tpv
