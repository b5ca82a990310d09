#pragma once

#include "tpv/datagen.hpp"
#include "tpv/mlp.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <vector>

namespace tpv {

enum class Schedule { Constant, Cosine };

struct Shuffle {
  enum class Kind { Never, FixedSeedPerRun };
  Kind kind = Kind::Never;
  std::uint64_t seed = 0;

  static Shuffle never() { return {}; }
  static Shuffle fixed(std::uint64_t s) { return {Kind::FixedSeedPerRun, s}; }
};

struct TrainConfig {
  double lr = 2e-3;
  double momentum = 0.9;
  Index epochs = 800;
  std::optional<Index> batch_size;  // nullopt = full batch
  Schedule schedule = Schedule::Cosine;
  double weight_decay = 0.0;
  double proximity_gamma = 0.0;
  std::optional<ParamVector> proximity_anchor;  // defaults to the starting params
  Shuffle shuffle;
  std::uint64_t rng_seed = 0;
};

struct TrainTrace {
  double initial_loss = 0.0;
  std::vector<double> loss_per_epoch;  // data loss L(w) after each epoch
  ParamVector final_params;
  bool diverged = false;
  bool loss_decreased = false;
};

// Loss above this (or non-finite) counts as divergence.
inline constexpr double kDivergenceLoss = 1e12;

// lr multiplier for `epoch` in [0, epochs): 1/2 (1 + cos(pi epoch / epochs)) for Cosine.
double schedule_factor(Schedule s, Index epoch, Index epochs);

// Heavy-ball momentum: v <- mu v + g; w <- w - lr v, on L(w) + weight_decay/2 ||w||^2
// + gamma/2 ||w - anchor||^2.
TrainTrace train_mse(const Network& net, const Dataset& ds, const TrainConfig& cfg);

// SGD from the given params with batches drawn uniformly with replacement.
// Returns the params after every `snapshot_every` steps past `burn_in_steps`.
// Throws Diverged on a non-finite mini-batch loss.
std::vector<ParamVector> sgd_snapshot_run(const Network& net, const Dataset& ds, const TrainConfig& cfg,
                                          Index burn_in_steps, Index snapshot_every, Index total_steps);

nlohmann::json trace_to_json(const TrainTrace& trace);
nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig defaults = {});

}  // namespace tpv
