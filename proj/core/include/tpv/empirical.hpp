#pragma once

#include "tpv/datagen.hpp"
#include "tpv/errors.hpp"
#include "tpv/mlp.hpp"
#include "tpv/trainer.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace tpv {

inline constexpr double kTaylorThreshold = 1e-3;
inline constexpr Index kTaylorReferenceRows = 128;

struct ProtocolOptions {
  Index runs = 20;
  std::uint64_t seed = 0;
  double taylor_threshold = kTaylorThreshold;
  double taylor_h = 1e-2;
  Index taylor_rows = kTaylorReferenceRows;
  // Reference models with clean training loss at or above this are rejected.
  double max_reference_loss = std::numeric_limits<double>::infinity();
  int jobs = 1;
};

enum class RetrainMode {
  Sgd,                 // retrain the network from w* on the noisy labels
  AnalyticLinearized,  // closed-form min-norm (or ridge, if proximity_gamma > 0) step on J_train
};

// Clean targets that the label noise is added to.
enum class LabelTargets {
  ReferenceOutputs,  // f_{w*}(x_train): sigma = 0 leaves w* a stationary point
  DatasetLabels,
};

struct LabelNoiseProtocol {
  double sigma = 0.01;
  TrainConfig retrain;
  RetrainMode mode = RetrainMode::Sgd;
  LabelTargets targets = LabelTargets::ReferenceOutputs;
  bool with_theory = false;
  ProtocolOptions options;
};

// Each of `chains` independent SGD chains contributes (total_steps - burn_in) /
// snapshot_every snapshots; every snapshot counts as one run.
struct SgdStationaryProtocol {
  double lr = 1e-3;
  Index batch = 32;
  Index burn_in = 200;
  Index snapshot_every = 20;
  Index total_steps = 1000;
  double momentum = 0.0;
  Index chains = 1;
  bool with_theory = true;
  ProtocolOptions options;
};

// options.runs is the number of uniform perturbation draws.
struct QuantizationProtocol {
  double delta = 1e-3;
  Index taylor_check_draws = 64;
  ProtocolOptions options;
};

using PerturbProtocol = std::variant<LabelNoiseProtocol, SgdStationaryProtocol, QuantizationProtocol>;
std::string noise_kind(const PerturbProtocol& p);

struct RunDiagnostic {
  Index run = 0;
  double taylor_error = 0.0;
  bool taylor_checked = false;
  bool loss_decreased = true;
  bool kept = true;
  std::string reason;
  double tpv_train = 0.0;
  double tpv_test = 0.0;
};

struct TPVReport {
  double tpv_train = 0.0;
  double tpv_test = 0.0;
  std::optional<double> theoretical_tpv;
  std::vector<double> taylor_errors;
  Index runs_kept = 0;
  Index runs_discarded = 0;
  double gen_gap = 0.0;
  std::vector<RunDiagnostic> runs;
  nlohmann::json metadata = nlohmann::json::object();
};

nlohmann::json report_to_json(const TPVReport& r);

class ProtocolFailed : public Error {
 public:
  ProtocolFailed(const std::string& what, std::vector<RunDiagnostic> diagnostics)
      : Error(what), diagnostics_(std::move(diagnostics)) {}
  const std::vector<RunDiagnostic>& diagnostics() const noexcept { return diagnostics_; }

 private:
  std::vector<RunDiagnostic> diagnostics_;
};

// Mean over runs and samples of ||f_{w_r}(x) - f_{w*}(x)||^2.
double empirical_tpv(const Network& ref, const std::vector<ParamVector>& perturbed, const Matrix& xs);

// The finite-difference first-order check with delta = perturbed - ref.params.
double taylor_validity(const Network& ref, const ParamVector& perturbed, const Matrix& x_ref, double h = 1e-2);

// Fixed, seeded subset of at most `rows` training inputs.
Matrix taylor_reference_inputs(const Matrix& xs, Index rows, std::uint64_t seed);

TPVReport run_label_noise_protocol(const Network& ref, const Dataset& train, const Dataset& test,
                                   const LabelNoiseProtocol& proto);
TPVReport run_sgd_noise_protocol(const Network& ref, const Dataset& train, const Dataset& test,
                                 const SgdStationaryProtocol& proto);
TPVReport run_quantization_protocol(const Network& ref, const Dataset& train, const Dataset& test,
                                    const QuantizationProtocol& proto);
TPVReport run_protocol(const Network& ref, const Dataset& train, const Dataset& test, const PerturbProtocol& proto);

inline constexpr double kBandLow = 2.0 / 3.0;
inline constexpr double kBandHigh = 1.5;

struct StabilityGap {
  double gap = 0.0;
  double ratio = 1.0;  // tpv_train / tpv_test; +inf when only tpv_test is zero
  bool ratio_infinite = false;
  bool in_band = true;
};

StabilityGap stability_gap(const TPVReport& report);
bool in_band(double ratio);

}  // namespace tpv
