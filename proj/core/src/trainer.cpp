#include "tpv/trainer.hpp"

#include "tpv/errors.hpp"
#include "tpv/rng.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

namespace tpv {
namespace {

bool is_divergent(double loss) { return !std::isfinite(loss) || loss > kDivergenceLoss; }

void validate(const TrainConfig& cfg, Index n) {
  if (!(cfg.lr >= 0.0)) throw PreconditionFailed("TrainConfig: lr must be >= 0");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw PreconditionFailed("TrainConfig: momentum must be in [0, 1)");
  if (cfg.proximity_gamma < 0.0) throw PreconditionFailed("TrainConfig: proximity_gamma must be >= 0");
  if (cfg.batch_size && (*cfg.batch_size < 1 || *cfg.batch_size > n)) {
    throw PreconditionFailed("TrainConfig: batch_size must be in [1, n]");
  }
}

// Adds the regularizer gradients to `grad` in place.
void add_regularizers(ParamVector& grad, const ParamVector& w, const TrainConfig& cfg, const ParamVector& anchor) {
  if (cfg.weight_decay != 0.0) grad += cfg.weight_decay * w;
  if (cfg.proximity_gamma != 0.0) grad += cfg.proximity_gamma * (w - anchor);
}

Matrix take_rows(const Matrix& m, const std::vector<Index>& idx) { return m(idx, Eigen::all); }

}  // namespace

double schedule_factor(Schedule s, Index epoch, Index epochs) {
  if (s == Schedule::Constant || epochs <= 0) return 1.0;
  return 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(epochs)));
}

TrainTrace train_mse(const Network& net, const Dataset& ds, const TrainConfig& cfg) {
  const Index n = ds.size();
  if (n == 0) throw EmptyDataset("train_mse: empty dataset");
  validate(cfg, n);
  const ParamVector anchor = cfg.proximity_anchor.value_or(net.params);
  if (anchor.size() != net.num_params()) throw DimError("train_mse: anchor length mismatch");

  Network cur = net;
  ParamVector velocity = ParamVector::Zero(net.num_params());
  TrainTrace trace;
  trace.loss_per_epoch.reserve(static_cast<std::size_t>(cfg.epochs));
  const bool full = !cfg.batch_size || *cfg.batch_size == n;

  auto step = [&](const ParamVector& grad_in, double lr) {
    ParamVector grad = grad_in;
    add_regularizers(grad, cur.params, cfg, anchor);
    velocity = cfg.momentum * velocity + grad;
    cur.params -= lr * velocity;
  };

  if (full) {
    // The loss evaluated for the next step's gradient is the loss after this epoch.
    for (Index e = 0; e < cfg.epochs; ++e) {
      const LossGrad lg = loss_and_grad_mse(cur, ds.xs, ds.ys);
      if (e == 0) trace.initial_loss = lg.loss;
      else trace.loss_per_epoch.push_back(lg.loss);
      if (is_divergent(lg.loss)) {
        trace.diverged = true;
        break;
      }
      step(lg.grad, cfg.lr * schedule_factor(cfg.schedule, e, cfg.epochs));
    }
    if (!trace.diverged) {
      const double final_loss = loss_mse(cur, ds.xs, ds.ys);
      if (cfg.epochs == 0) trace.initial_loss = final_loss;
      else trace.loss_per_epoch.push_back(final_loss);
      trace.diverged = is_divergent(final_loss);
    }
  } else {
    trace.initial_loss = loss_mse(cur, ds.xs, ds.ys);
    const Index b = *cfg.batch_size;
    std::vector<Index> order(static_cast<std::size_t>(n));
    CounterRng perm_rng(derive_seed(cfg.shuffle.seed, {purpose_tag("epoch-permutation")}));
    for (Index e = 0; e < cfg.epochs && !trace.diverged; ++e) {
      std::iota(order.begin(), order.end(), Index{0});
      if (cfg.shuffle.kind == Shuffle::Kind::FixedSeedPerRun) {
        for (std::size_t i = order.size(); i > 1; --i) {
          std::swap(order[i - 1], order[perm_rng.index(i)]);
        }
      }
      const double lr = cfg.lr * schedule_factor(cfg.schedule, e, cfg.epochs);
      for (Index start = 0; start < n; start += b) {
        const Index len = std::min(b, n - start);
        std::vector<Index> idx(order.begin() + start, order.begin() + start + len);
        const LossGrad lg = loss_and_grad_mse(cur, take_rows(ds.xs, idx), take_rows(ds.ys, idx));
        if (is_divergent(lg.loss)) {
          trace.diverged = true;
          break;
        }
        step(lg.grad, lr);
      }
      const double loss = trace.diverged ? std::nan("") : loss_mse(cur, ds.xs, ds.ys);
      trace.loss_per_epoch.push_back(loss);
      if (is_divergent(loss)) trace.diverged = true;
    }
  }

  trace.final_params = std::move(cur.params);
  const double final_loss = trace.loss_per_epoch.empty() ? trace.initial_loss : trace.loss_per_epoch.back();
  trace.loss_decreased = !trace.diverged && final_loss < trace.initial_loss;
  return trace;
}

std::vector<ParamVector> sgd_snapshot_run(const Network& net, const Dataset& ds, const TrainConfig& cfg,
                                          Index burn_in_steps, Index snapshot_every, Index total_steps) {
  const Index n = ds.size();
  if (n == 0) throw EmptyDataset("sgd_snapshot_run: empty dataset");
  validate(cfg, n);
  if (total_steps <= burn_in_steps) throw PreconditionFailed("sgd_snapshot_run: total_steps must exceed burn_in_steps");
  if (snapshot_every < 1) throw PreconditionFailed("sgd_snapshot_run: snapshot_every must be >= 1");
  const ParamVector anchor = cfg.proximity_anchor.value_or(net.params);
  const Index b = cfg.batch_size.value_or(n);

  Network cur = net;
  ParamVector velocity = ParamVector::Zero(net.num_params());
  CounterRng batch_rng(derive_seed(cfg.rng_seed, {purpose_tag("sgd-batches")}));
  std::vector<Index> idx(static_cast<std::size_t>(b));
  std::vector<ParamVector> snapshots;
  snapshots.reserve(static_cast<std::size_t>((total_steps - burn_in_steps) / snapshot_every));

  for (Index t = 0; t < total_steps; ++t) {
    for (auto& i : idx) i = static_cast<Index>(batch_rng.index(static_cast<std::uint64_t>(n)));
    const LossGrad lg = loss_and_grad_mse(cur, take_rows(ds.xs, idx), take_rows(ds.ys, idx));
    if (is_divergent(lg.loss)) {
      throw Diverged("sgd_snapshot_run: diverged at step " + std::to_string(t), t);
    }
    ParamVector grad = lg.grad;
    add_regularizers(grad, cur.params, cfg, anchor);
    velocity = cfg.momentum * velocity + grad;
    cur.params -= cfg.lr * schedule_factor(cfg.schedule, t, total_steps) * velocity;
    const Index done = t + 1;
    if (done > burn_in_steps && (done - burn_in_steps) % snapshot_every == 0) {
      if (!cur.params.allFinite()) throw Diverged("sgd_snapshot_run: non-finite params", t);
      snapshots.push_back(cur.params);
    }
  }
  return snapshots;
}

nlohmann::json trace_to_json(const TrainTrace& trace) {
  return {{"initial_loss", trace.initial_loss},
          {"loss_per_epoch", trace.loss_per_epoch},
          {"final_params", std::vector<double>(trace.final_params.data(),
                                               trace.final_params.data() + trace.final_params.size())},
          {"diverged", trace.diverged},
          {"loss_decreased", trace.loss_decreased}};
}

nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  nlohmann::json j = {{"lr", cfg.lr},
                      {"momentum", cfg.momentum},
                      {"momentum_form", "heavy_ball: v = mu v + g; w -= lr v"},
                      {"epochs", cfg.epochs},
                      {"schedule", cfg.schedule == Schedule::Cosine ? "cosine" : "constant"},
                      {"weight_decay", cfg.weight_decay},
                      {"proximity_gamma", cfg.proximity_gamma},
                      {"shuffle", cfg.shuffle.kind == Shuffle::Kind::Never ? "never" : "fixed_seed"},
                      {"shuffle_seed", cfg.shuffle.seed},
                      {"rng_seed", cfg.rng_seed}};
  if (cfg.batch_size) j["batch_size"] = *cfg.batch_size;
  else j["batch_size"] = "full";
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig cfg) {
  cfg.lr = j.value("lr", cfg.lr);
  cfg.momentum = j.value("momentum", cfg.momentum);
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
  cfg.proximity_gamma = j.value("proximity_gamma", cfg.proximity_gamma);
  cfg.rng_seed = j.value("rng_seed", cfg.rng_seed);
  if (j.contains("schedule")) {
    const auto s = j.at("schedule").get<std::string>();
    if (s == "cosine") cfg.schedule = Schedule::Cosine;
    else if (s == "constant") cfg.schedule = Schedule::Constant;
    else throw ConfigError("unknown schedule '" + s + "'");
  }
  if (j.contains("batch_size")) {
    const auto& b = j.at("batch_size");
    if (b.is_string()) {
      if (b.get<std::string>() != "full") throw ConfigError("batch_size must be an integer or \"full\"");
      cfg.batch_size.reset();
    } else {
      cfg.batch_size = b.get<Index>();
    }
  }
  if (j.contains("shuffle")) {
    const auto s = j.at("shuffle").get<std::string>();
    if (s == "never") cfg.shuffle = Shuffle::never();
    else if (s == "fixed_seed") cfg.shuffle = Shuffle::fixed(j.value("shuffle_seed", std::uint64_t{0}));
    else throw ConfigError("unknown shuffle mode '" + s + "'");
  }
  return cfg;
}

}  // namespace tpv
