#include "tpv/empirical.hpp"

#include "tpv/parallel.hpp"
#include "tpv/rng.hpp"
#include "tpv/sgd_stationary.hpp"
#include "tpv/theory.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tpv {
namespace {

double mean_sq_deviation(const Network& probe, const Matrix& xs, const Matrix& f_ref) {
  if (xs.rows() == 0) return 0.0;
  return (forward_batch(probe, xs) - f_ref).rowwise().squaredNorm().mean();
}

void check_reference(const Network& ref, const Dataset& train, const Dataset& test, const ProtocolOptions& o) {
  if (train.size() == 0 || test.size() == 0) throw EmptyDataset("protocol: train and test sets must be nonempty");
  if (o.runs < 1) throw PreconditionFailed("protocol: runs must be >= 1");
  if (!(o.taylor_h > 0.0)) throw PreconditionFailed("protocol: taylor_h must be positive");
  const double loss = loss_mse(ref, train.xs, train.ys);
  if (!(loss < o.max_reference_loss)) {
    throw PreconditionFailed("protocol: reference training loss " + std::to_string(loss) +
                             " is not below the configured tolerance");
  }
}

Vector flatten_rows(const Matrix& m) {
  Vector out(m.size());
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index k = 0; k < m.cols(); ++k) out[i * m.cols() + k] = m(i, k);
  }
  return out;
}

struct Context {
  Matrix f_train;
  Matrix f_test;
  Matrix x_ref;
};

Context make_context(const Network& ref, const Dataset& train, const Dataset& test, const ProtocolOptions& o) {
  Context c;
  c.f_train = forward_batch(ref, train.xs);
  c.f_test = forward_batch(ref, test.xs);
  c.x_ref = taylor_reference_inputs(train.xs, o.taylor_rows, derive_seed(o.seed, {purpose_tag("taylor-reference")}));
  return c;
}

void score_run(const Network& ref, const ParamVector& w, const Dataset& train, const Dataset& test,
               const Context& ctx, const ProtocolOptions& o, bool check_taylor, RunDiagnostic& d) {
  const Network probe = ref.with_params(w);
  d.tpv_train = mean_sq_deviation(probe, train.xs, ctx.f_train);
  d.tpv_test = mean_sq_deviation(probe, test.xs, ctx.f_test);
  if (check_taylor) {
    d.taylor_checked = true;
    d.taylor_error = taylor_validity(ref, w, ctx.x_ref, o.taylor_h);
  }
  if (!std::isfinite(d.tpv_train) || !std::isfinite(d.tpv_test)) {
    d.kept = false;
    d.reason = "non-finite prediction deviation";
  } else if (!d.loss_decreased) {
    d.kept = false;
    d.reason = "noisy loss did not decrease";
  } else if (d.taylor_checked && !(d.taylor_error <= o.taylor_threshold)) {
    d.kept = false;
    d.reason = "taylor error above threshold";
  }
}

TPVReport aggregate(std::vector<RunDiagnostic> runs, const Network& ref, const Dataset& train, const Dataset& test,
                    const std::string& kind) {
  TPVReport r;
  double sum_train = 0.0;
  double sum_test = 0.0;
  for (const auto& d : runs) {
    if (d.taylor_checked) r.taylor_errors.push_back(d.taylor_error);
    if (d.kept) {
      ++r.runs_kept;
      sum_train += d.tpv_train;
      sum_test += d.tpv_test;
    } else {
      ++r.runs_discarded;
    }
  }
  if (r.runs_kept == 0) {
    throw ProtocolFailed(kind + " protocol: all " + std::to_string(runs.size()) + " runs were discarded",
                         std::move(runs));
  }
  r.tpv_train = sum_train / static_cast<double>(r.runs_kept);
  r.tpv_test = sum_test / static_cast<double>(r.runs_kept);
  r.gen_gap = loss_mse(ref, test.xs, test.ys) - loss_mse(ref, train.xs, train.ys);
  r.runs = std::move(runs);
  return r;
}

nlohmann::json options_json(const ProtocolOptions& o) {
  return {{"runs", o.runs},
          {"seed", o.seed},
          {"taylor_threshold", o.taylor_threshold},
          {"taylor_h", o.taylor_h},
          {"taylor_rows", o.taylor_rows},
          {"taylor_reference", "fixed per configuration, seeded"},
          {"max_reference_loss", std::isfinite(o.max_reference_loss) ? nlohmann::json(o.max_reference_loss)
                                                                      : nlohmann::json("inf")}};
}

}  // namespace

std::string noise_kind(const PerturbProtocol& p) {
  switch (p.index()) {
    case 0: return "label";
    case 1: return "sgd";
    default: return "quant";
  }
}

double empirical_tpv(const Network& ref, const std::vector<ParamVector>& perturbed, const Matrix& xs) {
  if (perturbed.empty() || xs.rows() == 0) throw EmptyInput("empirical_tpv: need at least one run and one sample");
  const Matrix f_ref = forward_batch(ref, xs);
  double total = 0.0;
  for (const auto& w : perturbed) {
    if (w.size() != ref.num_params()) throw DimError("empirical_tpv: parameter length mismatch");
    total += mean_sq_deviation(ref.with_params(w), xs, f_ref);
  }
  return total / static_cast<double>(perturbed.size());
}

double taylor_validity(const Network& ref, const ParamVector& perturbed, const Matrix& x_ref, double h) {
  if (!(h > 0.0)) throw PreconditionFailed("taylor_validity: h must be positive");
  if (perturbed.size() != ref.num_params()) throw DimError("taylor_validity: parameter length mismatch");
  if (x_ref.rows() == 0) return 0.0;
  const ParamVector delta = perturbed - ref.params;
  const Matrix f0 = forward_batch(ref, x_ref);
  const Matrix dfull = forward_batch(ref.with_params(perturbed), x_ref) - f0;
  const Matrix dlin = (forward_batch(ref.with_params(ref.params + h * delta), x_ref) - f0) / h;
  const double num = (dfull - dlin).rowwise().squaredNorm().mean();
  const double den = dfull.rowwise().squaredNorm().mean();
  return num / (den + 1e-12);
}

Matrix taylor_reference_inputs(const Matrix& xs, Index rows, std::uint64_t seed) {
  const Index n = xs.rows();
  if (rows >= n) return xs;
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  CounterRng rng(seed);
  for (Index i = 0; i < rows; ++i) {
    const auto j = static_cast<Index>(i + static_cast<Index>(rng.index(static_cast<std::uint64_t>(n - i))));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(rows));
  std::sort(idx.begin(), idx.end());
  return xs(idx, Eigen::all);
}

TPVReport run_label_noise_protocol(const Network& ref, const Dataset& train, const Dataset& test,
                                   const LabelNoiseProtocol& proto) {
  const ProtocolOptions& o = proto.options;
  check_reference(ref, train, test, o);
  if (proto.sigma < 0.0) throw PreconditionFailed("label-noise protocol: sigma must be >= 0");
  const Context ctx = make_context(ref, train, test, o);
  const double n = static_cast<double>(train.size());
  const double lambda = n * proto.retrain.proximity_gamma;

  CompactSVD svd;
  std::optional<LabelNoiseSpectrum> spectrum;
  if (proto.with_theory) {
    spectrum = network_label_noise_spectrum(ref, train.xs, test.xs, lambda, 512, &svd);
  } else if (proto.mode == RetrainMode::AnalyticLinearized) {
    svd = compact_svd(output_jacobian(ref, train.xs));
  }
  Vector shrink;
  if (proto.mode == RetrainMode::AnalyticLinearized) {
    shrink = svd.s.array() / (svd.s.array().square() + lambda);
  }

  Dataset base = train;
  if (proto.targets == LabelTargets::ReferenceOutputs) base.ys = ctx.f_train;

  std::vector<RunDiagnostic> runs(static_cast<std::size_t>(o.runs));
  parallel_for(runs.size(), o.jobs, [&](std::size_t r) {
    RunDiagnostic& d = runs[r];
    d.run = static_cast<Index>(r);
    const Dataset noisy =
        add_label_noise(base, proto.sigma, derive_seed(o.seed, {purpose_tag("label-run"), static_cast<std::uint64_t>(r)}));
    ParamVector w;
    if (proto.mode == RetrainMode::Sgd) {
      const TrainTrace trace = train_mse(ref, noisy, proto.retrain);
      d.loss_decreased = !trace.diverged && (proto.sigma == 0.0 || trace.loss_decreased);
      w = trace.final_params;
    } else {
      const Vector eps = flatten_rows(noisy.ys - base.ys);
      const Vector coeff = shrink.cwiseProduct(svd.u.transpose() * eps);
      w = ref.params + svd.v * coeff;
      d.loss_decreased = true;
    }
    score_run(ref, w, train, test, ctx, o, true, d);
  });

  TPVReport report = aggregate(std::move(runs), ref, train, test, "label-noise");
  const double sigma2 = proto.sigma * proto.sigma;
  report.metadata = {{"noise_kind", "label"},
                     {"sigma", proto.sigma},
                     {"mode", proto.mode == RetrainMode::Sgd ? "sgd_retrain" : "analytic_linearized"},
                     {"targets", proto.targets == LabelTargets::ReferenceOutputs ? "reference_outputs" : "dataset_labels"},
                     {"lambda", lambda},
                     {"retrain", train_config_to_json(proto.retrain)},
                     {"options", options_json(o)}};
  if (spectrum) {
    report.theoretical_tpv = lambda == 0.0 ? tpv_label_nonlinear(*spectrum, sigma2) : tpv_label_ridge(*spectrum, sigma2);
    report.metadata["jacobian_rank"] = svd.rank;
    report.metadata["theoretical_tpv_train"] =
        tpv_train_ridge_closed_form(spectrum->s, lambda, sigma2, train.size());
  }
  return report;
}

TPVReport run_sgd_noise_protocol(const Network& ref, const Dataset& train, const Dataset& test,
                                 const SgdStationaryProtocol& proto) {
  ProtocolOptions o = proto.options;
  if (proto.chains < 1) throw PreconditionFailed("sgd protocol: chains must be >= 1");
  if (proto.snapshot_every < 1 || proto.total_steps <= proto.burn_in) {
    throw PreconditionFailed("sgd protocol: need snapshot_every >= 1 and total_steps > burn_in");
  }
  const Index per_chain = (proto.total_steps - proto.burn_in) / proto.snapshot_every;
  o.runs = proto.chains * per_chain;
  check_reference(ref, train, test, o);
  const Context ctx = make_context(ref, train, test, o);
  const Index batch = std::min(proto.batch, train.size());

  TrainConfig cfg;
  cfg.lr = proto.lr;
  cfg.momentum = proto.momentum;
  cfg.batch_size = batch;
  cfg.schedule = Schedule::Constant;

  std::vector<std::vector<ParamVector>> snaps(static_cast<std::size_t>(proto.chains));
  try {
    parallel_for(snaps.size(), o.jobs, [&](std::size_t c) {
      TrainConfig chain_cfg = cfg;
      chain_cfg.rng_seed = derive_seed(o.seed, {purpose_tag("sgd-chain"), static_cast<std::uint64_t>(c)});
      snaps[c] = sgd_snapshot_run(ref, train, chain_cfg, proto.burn_in, proto.snapshot_every, proto.total_steps);
    });
  } catch (const Diverged& e) {
    RunDiagnostic d;
    d.kept = false;
    d.reason = std::string("diverged at step ") + std::to_string(e.step());
    throw ProtocolFailed("sgd protocol: " + std::string(e.what()), {d});
  }

  std::vector<RunDiagnostic> runs(static_cast<std::size_t>(o.runs));
  parallel_for(runs.size(), o.jobs, [&](std::size_t r) {
    RunDiagnostic& d = runs[r];
    d.run = static_cast<Index>(r);
    const auto& w = snaps[r / static_cast<std::size_t>(per_chain)][r % static_cast<std::size_t>(per_chain)];
    score_run(ref, w, train, test, ctx, o, true, d);
  });

  TPVReport report = aggregate(std::move(runs), ref, train, test, "sgd");
  report.metadata = {{"noise_kind", "sgd"},
                     {"lr", proto.lr},
                     {"batch", batch},
                     {"requested_batch", proto.batch},
                     {"batch_sampling", "uniform with replacement"},
                     {"momentum", proto.momentum},
                     {"burn_in", proto.burn_in},
                     {"snapshot_every", proto.snapshot_every},
                     {"total_steps", proto.total_steps},
                     {"chains", proto.chains},
                     {"options", options_json(o)}};
  if (proto.with_theory) {
    const Vector residuals = flatten_rows(ctx.f_train - train.ys);
    const double sigma_res2 = residuals.size() >= 2 ? residual_variance(residuals) : 0.0;
    const double htrace = hessian_trace_proxy(output_jacobian(ref, train.xs), train.size());
    const double eta_eff = proto.lr / (1.0 - proto.momentum);
    if (eta_eff > 0.0) report.theoretical_tpv = tpv_sgd_theoretical(eta_eff, batch, sigma_res2, htrace);
    else report.theoretical_tpv = 0.0;
    report.metadata["residual_variance"] = sigma_res2;
    report.metadata["hessian_trace_proxy"] = htrace;
    report.metadata["effective_lr"] = eta_eff;
  }
  return report;
}

TPVReport run_quantization_protocol(const Network& ref, const Dataset& train, const Dataset& test,
                                    const QuantizationProtocol& proto) {
  const ProtocolOptions& o = proto.options;
  check_reference(ref, train, test, o);
  if (proto.delta < 0.0) throw PreconditionFailed("quantization protocol: delta must be >= 0");
  const Context ctx = make_context(ref, train, test, o);
  const Index checked = std::min(proto.taylor_check_draws, o.runs);
  const Index p = ref.num_params();

  std::vector<RunDiagnostic> runs(static_cast<std::size_t>(o.runs));
  parallel_for(runs.size(), o.jobs, [&](std::size_t r) {
    RunDiagnostic& d = runs[r];
    d.run = static_cast<Index>(r);
    CounterRng rng(derive_seed(o.seed, {purpose_tag("quant-draw"), static_cast<std::uint64_t>(r)}));
    ParamVector w = ref.params;
    for (Index j = 0; j < p; ++j) w[j] += rng.uniform(-0.5 * proto.delta, 0.5 * proto.delta);
    const Network probe = ref.with_params(w);
    d.tpv_train = mean_sq_deviation(probe, train.xs, ctx.f_train);
    d.tpv_test = mean_sq_deviation(probe, test.xs, ctx.f_test);
    if (static_cast<Index>(r) < checked) {
      d.taylor_checked = true;
      d.taylor_error = taylor_validity(ref, w, ctx.x_ref, o.taylor_h);
    }
  });

  std::vector<double> errs;
  for (const auto& d : runs) {
    if (d.taylor_checked) errs.push_back(d.taylor_error);
  }
  double median = 0.0;
  if (!errs.empty()) {
    std::vector<double> sorted = errs;
    const auto mid = sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2);
    std::nth_element(sorted.begin(), mid, sorted.end());
    median = *mid;
    if (sorted.size() % 2 == 0) median = 0.5 * (median + *std::max_element(sorted.begin(), mid));
  }
  if (!(median <= o.taylor_threshold)) {
    for (auto& d : runs) {
      d.kept = false;
      d.reason = "median taylor error above threshold at this delta";
    }
    throw ProtocolFailed("quantization protocol: median taylor error " + std::to_string(median) +
                             " exceeds threshold; lower delta",
                         std::move(runs));
  }

  TPVReport report = aggregate(std::move(runs), ref, train, test, "quantization");
  const double htrace = hessian_trace_proxy(output_jacobian(ref, train.xs), train.size());
  report.theoretical_tpv = tpv_quantization(proto.delta, htrace);
  report.metadata = {{"noise_kind", "quant"},
                     {"delta", proto.delta},
                     {"model", "independent uniform per-coordinate noise on [-delta/2, delta/2]"},
                     {"taylor_check_draws", checked},
                     {"median_taylor_error", median},
                     {"hessian_trace_proxy", htrace},
                     {"options", options_json(o)}};
  return report;
}

TPVReport run_protocol(const Network& ref, const Dataset& train, const Dataset& test, const PerturbProtocol& proto) {
  return std::visit(
      [&](const auto& p) -> TPVReport {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, LabelNoiseProtocol>) return run_label_noise_protocol(ref, train, test, p);
        else if constexpr (std::is_same_v<T, SgdStationaryProtocol>) return run_sgd_noise_protocol(ref, train, test, p);
        else return run_quantization_protocol(ref, train, test, p);
      },
      proto);
}

bool in_band(double ratio) { return ratio >= kBandLow && ratio <= kBandHigh; }

StabilityGap stability_gap(const TPVReport& report) {
  StabilityGap g;
  g.gap = std::abs(report.tpv_train - report.tpv_test);
  if (report.tpv_test == 0.0) {
    g.ratio_infinite = report.tpv_train > 0.0;
    g.ratio = g.ratio_infinite ? std::numeric_limits<double>::infinity() : 1.0;
  } else {
    g.ratio = report.tpv_train / report.tpv_test;
  }
  g.in_band = !g.ratio_infinite && in_band(g.ratio);
  return g;
}

nlohmann::json report_to_json(const TPVReport& r) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& d : r.runs) {
    nlohmann::json jd = {{"run", d.run},
                         {"kept", d.kept},
                         {"loss_decreased", d.loss_decreased},
                         {"tpv_train", d.tpv_train},
                         {"tpv_test", d.tpv_test}};
    if (d.taylor_checked) jd["taylor_error"] = d.taylor_error;
    if (!d.reason.empty()) jd["reason"] = d.reason;
    runs.push_back(std::move(jd));
  }
  nlohmann::json j = {{"tpv_train", r.tpv_train},
                      {"tpv_test", r.tpv_test},
                      {"theoretical_tpv", r.theoretical_tpv ? nlohmann::json(*r.theoretical_tpv) : nlohmann::json()},
                      {"runs_kept", r.runs_kept},
                      {"runs_discarded", r.runs_discarded},
                      {"gen_gap", r.gen_gap},
                      {"taylor_errors", r.taylor_errors},
                      {"runs", std::move(runs)},
                      {"metadata", r.metadata}};
  return j;
}

}  // namespace tpv
