#pragma once

#include "tpv/datagen.hpp"
#include "tpv/empirical.hpp"
#include "tpv/pruning.hpp"
#include "tpv/trainer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace tpv {

// ---- shared pieces -------------------------------------------------------

PerturbProtocol protocol_from_json(const nlohmann::json& j);
nlohmann::json protocol_to_json(const PerturbProtocol& p);

// Average-rank Spearman correlation; NaN when either side is constant.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

// Helpers for deterministic text output.
std::string format_double(double v);
void write_text(const std::filesystem::path& path, const std::string& text);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

MLPConfig student_config(Index input_dim, Index width, Index depth, std::uint64_t seed);

// ---- stability-grid ------------------------------------------------------

struct GridSpec {
  std::vector<TeacherKind> teachers{TeacherKind::LinearGaussian, TeacherKind::SingleReLU, TeacherKind::MultiReLU10};
  std::vector<Index> input_dims{10, 20};
  std::vector<Index> train_sizes{1000, 10};
  std::vector<Index> widths{1, 64};
  std::vector<Index> depths{2, 3};
  Index test_size = 5000;
};

struct StabilityGridConfig {
  std::uint64_t seed = 0;
  GridSpec grid;
  TrainConfig reference;
  std::vector<PerturbProtocol> protocols;
  double max_reference_loss = std::numeric_limits<double>::infinity();
  int jobs = 1;
};

StabilityGridConfig default_stability_grid_config(bool full = false);
StabilityGridConfig stability_grid_config_from_json(const nlohmann::json& j, bool full = false);
nlohmann::json to_json(const StabilityGridConfig& c);

struct ScatterRow {
  Index config_id = 0;
  std::string noise_kind;
  std::string protocol;
  std::string teacher;
  Index width = 0;
  Index depth = 0;
  Index d = 0;
  Index n_train = 0;
  double tpv_train = 0.0;
  double tpv_test = 0.0;
  std::optional<double> theoretical_tpv;
  double gen_gap = 0.0;
  Index runs_kept = 0;
  Index runs_discarded = 0;
  double ratio = 0.0;
  bool band_member = false;
  std::string status = "ok";
  std::string discard_reason;  // most frequent reason among discarded runs
};

struct GridResult {
  std::vector<ScatterRow> rows;
  nlohmann::json reports = nlohmann::json::array();
  Index protocol_failures = 0;
};

GridResult run_stability_grid(const StabilityGridConfig& cfg);
std::string scatter_csv(const std::vector<ScatterRow>& rows);

struct BandStats {
  Index kept_points = 0;
  Index inside = 0;
  double inside_fraction() const { return kept_points ? static_cast<double>(inside) / kept_points : 0.0; }
};
// Band membership over rows with status ok and runs_kept > 0, for one n_train.
BandStats band_stats(const std::vector<ScatterRow>& rows, Index n_train);

int cmd_stability_grid(const StabilityGridConfig& cfg, const std::filesystem::path& out_dir);

// ---- label-noise-curve ---------------------------------------------------

struct LabelNoiseCurveConfig {
  std::uint64_t seed = 0;
  TeacherKind teacher = TeacherKind::LinearGaussian;
  Index input_dim = 20;
  Index n_train = 1000;
  Index test_size = 5000;
  std::vector<Index> widths{128, 256, 512};
  Index depth = 2;
  std::vector<double> sigmas{0.01};
  Index runs = 20;
  TrainConfig reference;
  TrainConfig retrain;
  RetrainMode mode = RetrainMode::Sgd;
  LabelTargets targets = LabelTargets::ReferenceOutputs;
  int jobs = 1;
};

LabelNoiseCurveConfig default_label_noise_curve_config(bool full = false);
LabelNoiseCurveConfig label_noise_curve_config_from_json(const nlohmann::json& j, bool full = false);
nlohmann::json to_json(const LabelNoiseCurveConfig& c);

struct CurveRow {
  Index width = 0;
  Index params = 0;
  double sigma = 0.0;
  Index rank = 0;
  double t_base = 0.0;
  double theoretical_tpv = 0.0;
  double theoretical_tpv_train = 0.0;
  // Linearized prediction at the configured retraining budget.
  double theoretical_tpv_finite_time = 0.0;
  double tpv_train = 0.0;
  double tpv_test = 0.0;
  double clean_train_loss = 0.0;
  double clean_test_loss = 0.0;
  Index runs_kept = 0;
  Index runs_discarded = 0;
  std::string status = "ok";
  std::string discard_reason;
};

struct CurveResult {
  std::vector<CurveRow> rows;
  // Per sigma: Spearman over the width sweep.
  std::vector<double> spearman_test_tpv_vs_loss;
  std::vector<double> spearman_theory_vs_loss;
  Index protocol_failures = 0;
};

CurveResult run_label_noise_curve(const LabelNoiseCurveConfig& cfg);
std::string curve_csv(const std::vector<CurveRow>& rows);
int cmd_label_noise_curve(const LabelNoiseCurveConfig& cfg, const std::filesystem::path& out_dir);

// ---- sgd-lyapunov --------------------------------------------------------

struct SgdLyapunovConfig {
  std::uint64_t seed = 0;
  Index input_dim = 10;
  Index n_train = 1000;
  Index test_size = 1000;
  double residual_sigma = 0.1;
  // Each learning rate is set to eta_lambda_max / lambda_max(H).
  std::vector<double> eta_lambda_max{0.01, 0.005};
  std::vector<Index> batches{32, 128};
  Index burn_in = 2000;
  Index snapshot_every = 20;
  Index total_steps = 200000;
  Index chains = 2;
  int jobs = 1;
};

SgdLyapunovConfig default_sgd_lyapunov_config(bool full = false);
SgdLyapunovConfig sgd_lyapunov_config_from_json(const nlohmann::json& j, bool full = false);
nlohmann::json to_json(const SgdLyapunovConfig& c);

struct LyapunovRow {
  double eta = 0.0;
  double eta_lambda_max = 0.0;
  Index batch = 0;
  double empirical = 0.0;
  double lyapunov = 0.0;
  double boxed = 0.0;
  Index snapshots = 0;
};

struct LyapunovResult {
  std::vector<LyapunovRow> rows;
  double scalar_ratio = 0.0;  // Lyapunov solve / exact scalar OU variance
  double residual_variance = 0.0;
  double lambda_max = 0.0;
  double hessian_trace = 0.0;
  double dropped_term_ratio = 0.0;
  double residual_geometry_correlation = 0.0;
  // rows are ordered eta-major; these compare neighbours in each sweep.
  std::vector<double> eta_scaling_empirical;    // (TPV(eta_a)/TPV(eta_b)) / (eta_a/eta_b)
  std::vector<double> eta_scaling_lyapunov;
  std::vector<double> batch_scaling_empirical;  // (TPV(b_a) b_a) / (TPV(b_b) b_b)
  std::vector<double> batch_scaling_lyapunov;
};

LyapunovResult run_sgd_lyapunov(const SgdLyapunovConfig& cfg);
nlohmann::json to_json(const LyapunovResult& r);
int cmd_sgd_lyapunov(const SgdLyapunovConfig& cfg, const std::filesystem::path& out_dir);

// ---- quant-tpv -----------------------------------------------------------

struct QuantModelSpec {
  std::string name;
  TeacherKind teacher = TeacherKind::LinearGaussian;
  Index input_dim = 10;
  std::vector<Index> hidden_widths;  // empty = linear model
  Index n_train = 500;
};

struct QuantTpvConfig {
  std::uint64_t seed = 0;
  std::vector<QuantModelSpec> models;
  std::vector<double> deltas{1e-3, 5e-4};
  Index draws = 10000;
  Index test_size = 1000;
  TrainConfig reference;
  int jobs = 1;
};

QuantTpvConfig default_quant_tpv_config(bool full = false);
QuantTpvConfig quant_tpv_config_from_json(const nlohmann::json& j, bool full = false);
nlohmann::json to_json(const QuantTpvConfig& c);

struct QuantRow {
  std::string model;
  Index params = 0;
  double delta = 0.0;
  double tpv_train = 0.0;
  double tpv_test = 0.0;
  double theory_train = 0.0;
  double theory_test = 0.0;
  double median_taylor = 0.0;
  Index draws = 0;
  std::string status = "ok";
};

struct QuantResult {
  std::vector<QuantRow> rows;
  Index protocol_failures = 0;
};

QuantResult run_quant_tpv(const QuantTpvConfig& cfg);
std::string quant_csv(const std::vector<QuantRow>& rows);
int cmd_quant_tpv(const QuantTpvConfig& cfg, const std::filesystem::path& out_dir);

// ---- prune-bench ---------------------------------------------------------

struct PruneBenchConfig {
  std::uint64_t seed = 0;
  Index num_classes = 4;
  Index input_dim = 10;
  Index n_train = 1000;
  Index n_test = 2000;
  double separation = 4.0;
  Index score_samples = 512;
  ClassifierConfig classifier;
  std::vector<Criterion> criteria{Criterion::JBR, Criterion::JC, Criterion::L1, Criterion::Taylor,
                                  Criterion::Random};
  Index trials = 20;
  double min_train_accuracy = 0.95;
  PruneSettings prune;
  int jobs = 1;
};

PruneBenchConfig default_prune_bench_config(bool full = false);
PruneBenchConfig prune_bench_config_from_json(const nlohmann::json& j, bool full = false);
nlohmann::json to_json(const PruneBenchConfig& c);

struct PruneTrial {
  Index trial = 0;
  std::uint64_t seed = 0;
  double train_accuracy = 0.0;
  std::string status = "ok";
  std::vector<PruneTrajectory> trajectories;  // one per configured criterion
};

struct PruneBenchResult {
  std::vector<PruneTrial> trials;
  std::vector<Criterion> criteria;
  // Fraction of usable trials where JBR's endpoint accuracy >= the other criterion's.
  nlohmann::json paired_wins = nlohmann::json::object();
};

PruneBenchResult run_prune_bench(const PruneBenchConfig& cfg);
std::string trajectory_csv(const PruneBenchResult& r);
std::string averaged_trajectory_csv(const PruneBenchResult& r);
int cmd_prune_bench(const PruneBenchConfig& cfg, const std::filesystem::path& out_dir);

// ---- gradcheck -----------------------------------------------------------

struct GradcheckConfig {
  std::uint64_t seed = 0;
  Index instances = 50;
  Index max_params = 10000;
  Index batch = 3;
  double step = 1e-6;
  double tolerance = 1e-6;
};

GradcheckConfig default_gradcheck_config(bool full = false);
GradcheckConfig gradcheck_config_from_json(const nlohmann::json& j, bool full = false);
nlohmann::json to_json(const GradcheckConfig& c);

struct GradcheckRow {
  Index instance = 0;
  std::string architecture;
  Index params = 0;
  double grad_rel_err = 0.0;
  double jac_rel_err = 0.0;
  double kink_margin = 0.0;
};

std::vector<GradcheckRow> run_gradcheck(const GradcheckConfig& cfg);
std::string gradcheck_csv(const std::vector<GradcheckRow>& rows);
int cmd_gradcheck(const GradcheckConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace tpv
