#include "tpv/experiments.hpp"

#include "tpv/errors.hpp"
#include "tpv/parallel.hpp"
#include "tpv/rng.hpp"
#include "tpv/sgd_stationary.hpp"
#include "tpv/theory.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

namespace tpv {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(); }

std::vector<std::string> teacher_names(const std::vector<TeacherKind>& ts) {
  std::vector<std::string> out;
  for (auto t : ts) out.push_back(to_string(t));
  return out;
}

std::vector<TeacherKind> teachers_from_names(const std::vector<std::string>& names) {
  std::vector<TeacherKind> out;
  for (const auto& n : names) out.push_back(teacher_kind_from_string(n));
  return out;
}

void require_nonempty(bool ok, const char* what) {
  if (!ok) throw ConfigError(std::string(what) + " must be nonempty");
}

std::string opt_cell(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

double max_reference_loss_from_json(const json& j, double fallback) {
  if (!j.contains("max_reference_loss")) return fallback;
  const auto& v = j.at("max_reference_loss");
  if (v.is_string() && v.get<std::string>() == "inf") return std::numeric_limits<double>::infinity();
  return v.get<double>();
}

std::string dominant_reason(const std::vector<RunDiagnostic>& runs) {
  std::map<std::string, Index> counts;
  for (const auto& d : runs) {
    if (!d.kept) ++counts[d.reason];
  }
  std::string best;
  Index top = 0;
  for (const auto& [reason, k] : counts) {
    if (k > top) best = reason, top = k;
  }
  return best;
}

std::string to_string(LabelTargets t) {
  return t == LabelTargets::ReferenceOutputs ? "reference_outputs" : "dataset_labels";
}

LabelTargets label_targets_from_string(const std::string& s) {
  if (s == "reference_outputs") return LabelTargets::ReferenceOutputs;
  if (s == "dataset_labels") return LabelTargets::DatasetLabels;
  throw ConfigError("label targets must be \"reference_outputs\" or \"dataset_labels\"");
}

json max_reference_loss_json(double v) { return std::isfinite(v) ? json(v) : json("inf"); }

TrainConfig g11_reference() {
  TrainConfig t;
  t.lr = 2e-3;
  t.momentum = 0.9;
  t.epochs = 800;
  t.schedule = Schedule::Cosine;
  return t;
}

TrainConfig g11_retrain() {
  TrainConfig t = g11_reference();
  t.epochs = 200;
  return t;
}

}  // namespace

// ---- shared pieces -------------------------------------------------------

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

MLPConfig student_config(Index input_dim, Index width, Index depth, std::uint64_t seed) {
  if (depth < 1) throw ConfigError("depth must be >= 1");
  MLPConfig c;
  c.input_dim = input_dim;
  c.hidden_widths.assign(static_cast<std::size_t>(depth - 1), width);
  c.output_dim = 1;
  c.seed = seed;
  return c;
}

PerturbProtocol protocol_from_json(const json& j) {
  const std::string kind = get_or<std::string>(j, "kind", "");
  ProtocolOptions o;
  o.runs = get_or<Index>(j, "runs", o.runs);
  o.taylor_threshold = get_or<double>(j, "taylor_threshold", o.taylor_threshold);
  o.taylor_h = get_or<double>(j, "taylor_h", o.taylor_h);
  o.taylor_rows = get_or<Index>(j, "taylor_rows", o.taylor_rows);
  if (kind == "label") {
    LabelNoiseProtocol p;
    p.options = o;
    p.sigma = get_or<double>(j, "sigma", p.sigma);
    p.retrain = train_config_from_json(j.value("retrain", json::object()), g11_retrain());
    const std::string mode = get_or<std::string>(j, "mode", "sgd");
    if (mode == "sgd") p.mode = RetrainMode::Sgd;
    else if (mode == "analytic") p.mode = RetrainMode::AnalyticLinearized;
    else throw ConfigError("label protocol mode must be \"sgd\" or \"analytic\"");
    p.with_theory = get_or<bool>(j, "with_theory", p.with_theory);
    p.targets = label_targets_from_string(get_or<std::string>(j, "targets", "reference_outputs"));
    if (p.options.runs < 2) throw ConfigError("label protocol needs runs >= 2");
    return p;
  }
  if (kind == "sgd") {
    SgdStationaryProtocol p;
    p.options = o;
    p.lr = get_or<double>(j, "lr", p.lr);
    p.batch = get_or<Index>(j, "batch", p.batch);
    p.burn_in = get_or<Index>(j, "burn_in", p.burn_in);
    p.snapshot_every = get_or<Index>(j, "snapshot_every", p.snapshot_every);
    p.total_steps = get_or<Index>(j, "total_steps", p.total_steps);
    p.momentum = get_or<double>(j, "momentum", p.momentum);
    p.chains = get_or<Index>(j, "chains", p.chains);
    p.with_theory = get_or<bool>(j, "with_theory", p.with_theory);
    if (p.total_steps <= p.burn_in || p.snapshot_every < 1 || p.batch < 1) {
      throw ConfigError("sgd protocol needs total_steps > burn_in, snapshot_every >= 1, batch >= 1");
    }
    return p;
  }
  if (kind == "quant") {
    QuantizationProtocol p;
    p.options = o;
    p.options.runs = get_or<Index>(j, "draws", o.runs);
    p.delta = get_or<double>(j, "delta", p.delta);
    p.taylor_check_draws = get_or<Index>(j, "taylor_check_draws", p.taylor_check_draws);
    return p;
  }
  throw ConfigError("protocol kind must be one of label, sgd, quant (got '" + kind + "')");
}

json protocol_to_json(const PerturbProtocol& proto) {
  return std::visit(
      [](const auto& p) -> json {
        using T = std::decay_t<decltype(p)>;
        json j = {{"taylor_threshold", p.options.taylor_threshold},
                  {"taylor_h", p.options.taylor_h},
                  {"taylor_rows", p.options.taylor_rows}};
        if constexpr (std::is_same_v<T, LabelNoiseProtocol>) {
          j["kind"] = "label";
          j["runs"] = p.options.runs;
          j["sigma"] = p.sigma;
          j["mode"] = p.mode == RetrainMode::Sgd ? "sgd" : "analytic";
          j["targets"] = to_string(p.targets);
          j["retrain"] = train_config_to_json(p.retrain);
          j["with_theory"] = p.with_theory;
        } else if constexpr (std::is_same_v<T, SgdStationaryProtocol>) {
          j["kind"] = "sgd";
          j["lr"] = p.lr;
          j["batch"] = p.batch;
          j["burn_in"] = p.burn_in;
          j["snapshot_every"] = p.snapshot_every;
          j["total_steps"] = p.total_steps;
          j["momentum"] = p.momentum;
          j["chains"] = p.chains;
          j["with_theory"] = p.with_theory;
        } else {
          j["kind"] = "quant";
          j["draws"] = p.options.runs;
          j["delta"] = p.delta;
          j["taylor_check_draws"] = p.taylor_check_draws;
        }
        return j;
      },
      proto);
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimError("spearman: length mismatch");
  const std::size_t n = a.size();
  if (n < 2) return std::nan("");
  auto ranks = [n](const std::vector<double>& v) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n;) {
      std::size_t k = i;
      while (k + 1 < n && v[idx[k + 1]] == v[idx[i]]) ++k;
      const double avg = 0.5 * static_cast<double>(i + k) + 1.0;
      for (std::size_t m = i; m <= k; ++m) r[idx[m]] = avg;
      i = k + 1;
    }
    return r;
  };
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / static_cast<double>(n);
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / static_cast<double>(n);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nan("");
  return sab / std::sqrt(saa * sbb);
}

// ---- stability-grid ------------------------------------------------------

StabilityGridConfig default_stability_grid_config(bool full) {
  StabilityGridConfig c;
  c.reference = g11_reference();
  LabelNoiseProtocol label;
  label.sigma = 0.01;
  label.retrain = g11_retrain();
  SgdStationaryProtocol sgd;
  sgd.lr = 1e-3;
  sgd.batch = 32;
  sgd.momentum = 0.9;
  sgd.with_theory = false;
  if (full) {
    c.grid.input_dims = {10, 20, 50};
    c.grid.widths = {1, 256};
    c.grid.depths = {2, 3, 4};
    LabelNoiseProtocol label2 = label;
    label2.sigma = 0.005;
    c.protocols = {label2, label};
    for (double lr : {1e-3, 5e-4}) {
      for (Index b : {32, 128}) {
        SgdStationaryProtocol s = sgd;
        s.lr = lr;
        s.batch = b;
        c.protocols.push_back(s);
      }
    }
  } else {
    c.protocols = {label, sgd};
  }
  return c;
}

StabilityGridConfig stability_grid_config_from_json(const json& j, bool full) {
  StabilityGridConfig c = default_stability_grid_config(full);
  c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
  c.jobs = get_or<int>(j, "jobs", c.jobs);
  c.max_reference_loss = max_reference_loss_from_json(j, c.max_reference_loss);
  if (j.contains("grid")) {
    const json& g = j.at("grid");
    if (g.contains("teachers")) c.grid.teachers = teachers_from_names(g.at("teachers").get<std::vector<std::string>>());
    c.grid.input_dims = get_or(g, "input_dims", c.grid.input_dims);
    c.grid.train_sizes = get_or(g, "train_sizes", c.grid.train_sizes);
    c.grid.widths = get_or(g, "widths", c.grid.widths);
    c.grid.depths = get_or(g, "depths", c.grid.depths);
    c.grid.test_size = get_or(g, "test_size", c.grid.test_size);
  }
  if (j.contains("reference")) c.reference = train_config_from_json(j.at("reference"), c.reference);
  if (j.contains("protocols")) {
    c.protocols.clear();
    for (const auto& p : j.at("protocols")) c.protocols.push_back(protocol_from_json(p));
  }
  require_nonempty(!c.grid.teachers.empty() && !c.grid.input_dims.empty() && !c.grid.train_sizes.empty() &&
                       !c.grid.widths.empty() && !c.grid.depths.empty(),
                   "grid lists");
  require_nonempty(!c.protocols.empty(), "protocols");
  return c;
}

json to_json(const StabilityGridConfig& c) {
  json protos = json::array();
  for (const auto& p : c.protocols) protos.push_back(protocol_to_json(p));
  return {{"command", "stability-grid"},
          {"seed", c.seed},
          {"jobs", c.jobs},
          {"max_reference_loss", max_reference_loss_json(c.max_reference_loss)},
          {"grid",
           {{"teachers", teacher_names(c.grid.teachers)},
            {"input_dims", c.grid.input_dims},
            {"train_sizes", c.grid.train_sizes},
            {"widths", c.grid.widths},
            {"depths", c.grid.depths},
            {"test_size", c.grid.test_size}}},
          {"reference", train_config_to_json(c.reference)},
          {"protocols", protos},
          {"band", {{"low", kBandLow}, {"high", kBandHigh}, {"definition", "train/test ratio in [2/3, 3/2]"}}},
          {"reference_training_set", "the cell's own n_train noiseless samples"}};
}

namespace {

struct Cell {
  Index id = 0;
  TeacherKind teacher;
  Index d = 0;
  Index n_train = 0;
  Index width = 0;
  Index depth = 0;
};

std::vector<Cell> enumerate_cells(const GridSpec& g) {
  std::vector<Cell> cells;
  Index id = 0;
  for (Index n : g.train_sizes)
    for (auto t : g.teachers)
      for (Index d : g.input_dims)
        for (Index w : g.widths)
          for (Index depth : g.depths) cells.push_back({id++, t, d, n, w, depth});
  return cells;
}

void set_protocol_seed(PerturbProtocol& p, std::uint64_t seed, int jobs) {
  std::visit(
      [&](auto& q) {
        q.options.seed = seed;
        q.options.jobs = jobs;
      },
      p);
}

std::string protocol_label(const PerturbProtocol& proto) {
  return std::visit(
      [](const auto& p) -> std::string {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, LabelNoiseProtocol>) return "label:sigma=" + format_double(p.sigma);
        else if constexpr (std::is_same_v<T, SgdStationaryProtocol>)
          return "sgd:lr=" + format_double(p.lr) + ":b=" + std::to_string(p.batch);
        else return "quant:delta=" + format_double(p.delta);
      },
      proto);
}

void set_max_reference_loss(PerturbProtocol& p, double v) {
  std::visit([&](auto& q) { q.options.max_reference_loss = v; }, p);
}

}  // namespace

GridResult run_stability_grid(const StabilityGridConfig& cfg) {
  const auto cells = enumerate_cells(cfg.grid);
  const std::size_t np = cfg.protocols.size();
  std::vector<ScatterRow> rows(cells.size() * np);
  std::vector<json> reports(cells.size() * np);

  // Cells run in parallel; protocols inside a cell run their runs serially.
  parallel_for(cells.size(), cfg.jobs, [&](std::size_t ci) {
    const Cell& cell = cells[ci];
    const TeacherSpec ts{cell.teacher, cell.d, derive_seed(cfg.seed, {purpose_tag("teacher"),
                                                                     static_cast<std::uint64_t>(cell.teacher),
                                                                     static_cast<std::uint64_t>(cell.d)})};
    const Dataset train = sample_dataset(ts, cell.n_train, 0);
    const Dataset test = sample_dataset(ts, cfg.grid.test_size, 1);
    const MLPConfig mc = student_config(cell.d, cell.width, cell.depth,
                                        derive_seed(cfg.seed, {purpose_tag("init"), static_cast<std::uint64_t>(cell.id)}));
    std::optional<Network> ref;
    std::string ref_error;
    try {
      const Network init = init_network(mc);
      const TrainTrace trace = train_mse(init, train, cfg.reference);
      if (trace.diverged) ref_error = "reference training diverged";
      else ref = init.with_params(trace.final_params);
    } catch (const Error& e) {
      ref_error = e.what();
    }

    for (std::size_t pi = 0; pi < np; ++pi) {
      ScatterRow& row = rows[ci * np + pi];
      row.config_id = cell.id;
      row.noise_kind = noise_kind(cfg.protocols[pi]);
      row.protocol = protocol_label(cfg.protocols[pi]);
      row.teacher = to_string(cell.teacher);
      row.width = cell.width;
      row.depth = cell.depth;
      row.d = cell.d;
      row.n_train = cell.n_train;
      json& rep = reports[ci * np + pi];
      rep = {{"config_id", cell.id}, {"protocol", row.protocol}};
      if (!ref) {
        row.status = "reference_failed";
        rep["error"] = ref_error;
        continue;
      }
      PerturbProtocol proto = cfg.protocols[pi];
      set_protocol_seed(proto,
                        derive_seed(cfg.seed, {purpose_tag("protocol"), static_cast<std::uint64_t>(cell.id),
                                               static_cast<std::uint64_t>(pi)}),
                        1);
      set_max_reference_loss(proto, cfg.max_reference_loss);
      try {
        const TPVReport r = run_protocol(*ref, train, test, proto);
        const StabilityGap gap = stability_gap(r);
        row.tpv_train = r.tpv_train;
        row.tpv_test = r.tpv_test;
        row.theoretical_tpv = r.theoretical_tpv;
        row.gen_gap = r.gen_gap;
        row.runs_kept = r.runs_kept;
        row.runs_discarded = r.runs_discarded;
        row.discard_reason = dominant_reason(r.runs);
        row.ratio = gap.ratio;
        row.band_member = gap.in_band;
        rep["report"] = report_to_json(r);
      } catch (const ProtocolFailed& e) {
        row.status = "protocol_failed";
        row.runs_discarded = static_cast<Index>(e.diagnostics().size());
        row.discard_reason = dominant_reason(e.diagnostics());
        TPVReport failed;
        failed.runs = e.diagnostics();
        rep["error"] = e.what();
        rep["diagnostics"] = report_to_json(failed)["runs"];
      } catch (const Error& e) {
        row.status = "error";
        rep["error"] = e.what();
      }
    }
  });

  GridResult out;
  out.rows = std::move(rows);
  for (auto& r : reports) out.reports.push_back(std::move(r));
  for (const auto& r : out.rows) out.protocol_failures += r.status == "protocol_failed" ? 1 : 0;
  return out;
}

std::string scatter_csv(const std::vector<ScatterRow>& rows) {
  std::ostringstream s;
  s << "config_id,noise_kind,protocol,teacher,width,depth,d,n_train,tpv_train,tpv_test,theoretical_tpv,gen_gap,"
       "runs_kept,runs_discarded,ratio,band_member,status,discard_reason\n";
  for (const auto& r : rows) {
    s << r.config_id << ',' << r.noise_kind << ',' << r.protocol << ',' << r.teacher << ',' << r.width << ','
      << r.depth << ',' << r.d << ',' << r.n_train << ',' << format_double(r.tpv_train) << ','
      << format_double(r.tpv_test) << ',' << opt_cell(r.theoretical_tpv) << ',' << format_double(r.gen_gap) << ','
      << r.runs_kept << ',' << r.runs_discarded << ',' << format_double(r.ratio) << ','
      << (r.band_member ? 1 : 0) << ',' << r.status << ',' << r.discard_reason << '\n';
  }
  return s.str();
}

BandStats band_stats(const std::vector<ScatterRow>& rows, Index n_train) {
  BandStats b;
  for (const auto& r : rows) {
    if (r.n_train != n_train || r.status != "ok" || r.runs_kept == 0) continue;
    ++b.kept_points;
    b.inside += r.band_member ? 1 : 0;
  }
  return b;
}

int cmd_stability_grid(const StabilityGridConfig& cfg, const fs::path& out_dir) {
  write_json(out_dir / "resolved_config.json", to_json(cfg));
  const GridResult res = run_stability_grid(cfg);
  write_text(out_dir / "scatter.csv", scatter_csv(res.rows));
  write_json(out_dir / "reports.json", res.reports);

  std::ostringstream s;
  s << "stability-grid: " << res.rows.size() << " rows (" << res.rows.size() / std::max<std::size_t>(1, cfg.protocols.size())
    << " cells x " << cfg.protocols.size() << " protocols)\n";
  for (Index n : cfg.grid.train_sizes) {
    const BandStats b = band_stats(res.rows, n);
    s << "n_train=" << n << ": " << b.inside << "/" << b.kept_points << " points inside band ("
      << format_double(b.inside_fraction()) << ")\n";
  }
  s << "protocol failures: " << res.protocol_failures << "\n";
  write_text(out_dir / "summary.txt", s.str());
  return res.protocol_failures > 0 ? 1 : 0;
}

// ---- label-noise-curve ---------------------------------------------------

LabelNoiseCurveConfig default_label_noise_curve_config(bool full) {
  LabelNoiseCurveConfig c;
  c.reference.lr = 5e-3;
  c.reference.momentum = 0.9;
  c.reference.epochs = 800;
  c.reference.schedule = Schedule::Constant;
  c.retrain = c.reference;
  c.retrain.lr = 2e-2;
  if (full) {
    c.widths = {128, 256, 512, 800, 1024, 1600};
    c.depth = 3;
    c.sigmas = {0.01, 0.05, 0.1, 0.2};
    c.runs = 50;
  }
  return c;
}

LabelNoiseCurveConfig label_noise_curve_config_from_json(const json& j, bool full) {
  LabelNoiseCurveConfig c = default_label_noise_curve_config(full);
  c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
  c.jobs = get_or<int>(j, "jobs", c.jobs);
  if (j.contains("teacher")) c.teacher = teacher_kind_from_string(j.at("teacher").get<std::string>());
  c.input_dim = get_or(j, "input_dim", c.input_dim);
  c.n_train = get_or(j, "n_train", c.n_train);
  c.test_size = get_or(j, "test_size", c.test_size);
  c.widths = get_or(j, "widths", c.widths);
  c.depth = get_or(j, "depth", c.depth);
  c.sigmas = get_or(j, "sigmas", c.sigmas);
  c.runs = get_or(j, "runs", c.runs);
  if (j.contains("reference")) c.reference = train_config_from_json(j.at("reference"), c.reference);
  if (j.contains("retrain")) c.retrain = train_config_from_json(j.at("retrain"), c.retrain);
  const std::string mode = get_or<std::string>(j, "mode", c.mode == RetrainMode::Sgd ? "sgd" : "analytic");
  if (mode == "sgd") c.mode = RetrainMode::Sgd;
  else if (mode == "analytic") c.mode = RetrainMode::AnalyticLinearized;
  else throw ConfigError("mode must be \"sgd\" or \"analytic\"");
  c.targets = label_targets_from_string(get_or<std::string>(j, "targets", to_string(c.targets)));
  require_nonempty(!c.widths.empty(), "widths");
  require_nonempty(!c.sigmas.empty(), "sigmas");
  if (c.runs < 2) throw ConfigError("runs must be >= 2");
  return c;
}

json to_json(const LabelNoiseCurveConfig& c) {
  return {{"command", "label-noise-curve"},
          {"seed", c.seed},
          {"jobs", c.jobs},
          {"teacher", to_string(c.teacher)},
          {"input_dim", c.input_dim},
          {"n_train", c.n_train},
          {"test_size", c.test_size},
          {"widths", c.widths},
          {"depth", c.depth},
          {"sigmas", c.sigmas},
          {"runs", c.runs},
          {"reference", train_config_to_json(c.reference)},
          {"retrain", train_config_to_json(c.retrain)},
          {"mode", c.mode == RetrainMode::Sgd ? "sgd" : "analytic"},
          {"targets", to_string(c.targets)},
          {"rank_tolerance", kDefaultRankTolerance}};
}

CurveResult run_label_noise_curve(const LabelNoiseCurveConfig& cfg) {
  const TeacherSpec ts{cfg.teacher, cfg.input_dim, derive_seed(cfg.seed, {purpose_tag("teacher")})};
  const Dataset train = sample_dataset(ts, cfg.n_train, 0);
  const Dataset test = sample_dataset(ts, cfg.test_size, 1);
  const double lambda = static_cast<double>(cfg.n_train) * cfg.retrain.proximity_gamma;

  CurveResult out;
  for (std::size_t wi = 0; wi < cfg.widths.size(); ++wi) {
    const Index width = cfg.widths[wi];
    const MLPConfig mc =
        student_config(cfg.input_dim, width, cfg.depth, derive_seed(cfg.seed, {purpose_tag("init"), wi}));
    const Network init = init_network(mc);
    const TrainTrace trace = train_mse(init, train, cfg.reference);

    CurveRow base;
    base.width = width;
    base.params = init.num_params();
    if (trace.diverged) {
      for (double sigma : cfg.sigmas) {
        CurveRow row = base;
        row.sigma = sigma;
        row.status = "reference_failed";
        out.rows.push_back(row);
      }
      continue;
    }
    const Network ref = init.with_params(trace.final_params);
    base.clean_train_loss = loss_mse(ref, train.xs, train.ys);
    base.clean_test_loss = loss_mse(ref, test.xs, test.ys);

    CompactSVD svd;
    const LabelNoiseSpectrum spec = network_label_noise_spectrum(ref, train.xs, test.xs, lambda, 512, &svd);
    base.rank = svd.rank;
    base.t_base = lambda == 0.0 ? tpv_label_nonlinear(spec, 1.0) : tpv_label_ridge(spec, 1.0);
    const double train_unit = tpv_train_ridge_closed_form(spec.s, lambda, 1.0, cfg.n_train);
    const double finite_unit = lambda == 0.0 ? tpv_label_finite_time(spec, cfg.n_train, cfg.retrain, 1.0)
                                             : std::numeric_limits<double>::quiet_NaN();

    for (std::size_t si = 0; si < cfg.sigmas.size(); ++si) {
      CurveRow row = base;
      row.sigma = cfg.sigmas[si];
      const double s2 = row.sigma * row.sigma;
      row.theoretical_tpv = s2 * base.t_base;
      row.theoretical_tpv_train = s2 * train_unit;
      row.theoretical_tpv_finite_time = s2 * finite_unit;
      LabelNoiseProtocol proto;
      proto.sigma = row.sigma;
      proto.retrain = cfg.retrain;
      proto.mode = cfg.mode;
      proto.targets = cfg.targets;
      proto.options.runs = cfg.runs;
      proto.options.jobs = cfg.jobs;
      proto.options.seed = derive_seed(cfg.seed, {purpose_tag("label-curve"), wi, si});
      try {
        const TPVReport r = run_label_noise_protocol(ref, train, test, proto);
        row.tpv_train = r.tpv_train;
        row.tpv_test = r.tpv_test;
        row.runs_kept = r.runs_kept;
        row.runs_discarded = r.runs_discarded;
        row.discard_reason = dominant_reason(r.runs);
      } catch (const ProtocolFailed& e) {
        row.status = "protocol_failed";
        row.runs_discarded = static_cast<Index>(e.diagnostics().size());
        row.discard_reason = dominant_reason(e.diagnostics());
        ++out.protocol_failures;
      }
      out.rows.push_back(row);
    }
  }

  for (double sigma : cfg.sigmas) {
    std::vector<double> tpv, theory, loss;
    for (const auto& r : out.rows) {
      if (r.sigma != sigma || r.status != "ok") continue;
      tpv.push_back(r.tpv_test);
      theory.push_back(r.theoretical_tpv);
      loss.push_back(r.clean_test_loss);
    }
    out.spearman_test_tpv_vs_loss.push_back(spearman(tpv, loss));
    out.spearman_theory_vs_loss.push_back(spearman(theory, loss));
  }
  return out;
}

std::string curve_csv(const std::vector<CurveRow>& rows) {
  std::ostringstream s;
  s << "width,params,sigma,rank,t_base,theoretical_tpv,theoretical_tpv_train,theoretical_tpv_finite_time,tpv_train,"
       "tpv_test,clean_train_loss,clean_test_loss,runs_kept,runs_discarded,status,discard_reason\n";
  for (const auto& r : rows) {
    s << r.width << ',' << r.params << ',' << format_double(r.sigma) << ',' << r.rank << ','
      << format_double(r.t_base) << ',' << format_double(r.theoretical_tpv) << ','
      << format_double(r.theoretical_tpv_train) << ',' << format_double(r.theoretical_tpv_finite_time) << ','
      << format_double(r.tpv_train) << ','
      << format_double(r.tpv_test) << ',' << format_double(r.clean_train_loss) << ','
      << format_double(r.clean_test_loss) << ',' << r.runs_kept << ',' << r.runs_discarded << ',' << r.status
      << ',' << r.discard_reason << '\n';
  }
  return s.str();
}

int cmd_label_noise_curve(const LabelNoiseCurveConfig& cfg, const fs::path& out_dir) {
  write_json(out_dir / "resolved_config.json", to_json(cfg));
  const CurveResult res = run_label_noise_curve(cfg);
  write_text(out_dir / "curve.csv", curve_csv(res.rows));
  json corr = json::array();
  std::ostringstream s;
  s << "label-noise-curve: " << res.rows.size() << " rows\n";
  for (std::size_t i = 0; i < cfg.sigmas.size(); ++i) {
    corr.push_back({{"sigma", cfg.sigmas[i]},
                    {"spearman_test_tpv_vs_test_loss", finite_or_null(res.spearman_test_tpv_vs_loss[i])},
                    {"spearman_theory_vs_test_loss", finite_or_null(res.spearman_theory_vs_loss[i])}});
    s << "sigma=" << format_double(cfg.sigmas[i])
      << ": spearman(test TPV, test loss)=" << format_double(res.spearman_test_tpv_vs_loss[i])
      << ", spearman(theory, test loss)=" << format_double(res.spearman_theory_vs_loss[i]) << "\n";
  }
  write_json(out_dir / "correlations.json", corr);
  s << "protocol failures: " << res.protocol_failures << "\n";
  write_text(out_dir / "summary.txt", s.str());
  return res.protocol_failures > 0 ? 1 : 0;
}

// ---- sgd-lyapunov --------------------------------------------------------

SgdLyapunovConfig default_sgd_lyapunov_config(bool full) {
  SgdLyapunovConfig c;
  if (full) {
    c.eta_lambda_max = {0.01, 0.005, 0.0025};
    c.batches = {8, 32, 128};
    c.total_steps = 1000000;
  }
  return c;
}

SgdLyapunovConfig sgd_lyapunov_config_from_json(const json& j, bool full) {
  SgdLyapunovConfig c = default_sgd_lyapunov_config(full);
  c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
  c.jobs = get_or<int>(j, "jobs", c.jobs);
  c.input_dim = get_or(j, "input_dim", c.input_dim);
  c.n_train = get_or(j, "n_train", c.n_train);
  c.test_size = get_or(j, "test_size", c.test_size);
  c.residual_sigma = get_or(j, "residual_sigma", c.residual_sigma);
  c.eta_lambda_max = get_or(j, "eta_lambda_max", c.eta_lambda_max);
  c.batches = get_or(j, "batches", c.batches);
  c.burn_in = get_or(j, "burn_in", c.burn_in);
  c.snapshot_every = get_or(j, "snapshot_every", c.snapshot_every);
  c.total_steps = get_or(j, "total_steps", c.total_steps);
  c.chains = get_or(j, "chains", c.chains);
  require_nonempty(!c.eta_lambda_max.empty(), "eta_lambda_max");
  require_nonempty(!c.batches.empty(), "batches");
  if (c.total_steps <= c.burn_in) throw ConfigError("total_steps must exceed burn_in");
  return c;
}

json to_json(const SgdLyapunovConfig& c) {
  return {{"command", "sgd-lyapunov"},
          {"seed", c.seed},
          {"jobs", c.jobs},
          {"input_dim", c.input_dim},
          {"n_train", c.n_train},
          {"test_size", c.test_size},
          {"residual_sigma", c.residual_sigma},
          {"eta_lambda_max", c.eta_lambda_max},
          {"batches", c.batches},
          {"burn_in", c.burn_in},
          {"snapshot_every", c.snapshot_every},
          {"total_steps", c.total_steps},
          {"chains", c.chains},
          {"model", "linear regression with bias, fitted exactly by least squares"},
          {"momentum", 0.0},
          {"batch_sampling", "uniform with replacement"}};
}

LyapunovResult run_sgd_lyapunov(const SgdLyapunovConfig& cfg) {
  LyapunovResult out;
  {
    const double lam = 1.0, s2 = 1.0, eta = 0.01;
    const Matrix c = stationary_covariance(Matrix::Constant(1, 1, lam), Matrix::Constant(1, 1, s2), eta);
    const double exact = eta * eta * s2 / (1.0 - (1.0 - eta * lam) * (1.0 - eta * lam));
    out.scalar_ratio = c(0, 0) / exact;
  }

  const TeacherSpec ts{TeacherKind::LinearGaussian, cfg.input_dim, derive_seed(cfg.seed, {purpose_tag("teacher")})};
  const Dataset train = add_label_noise(sample_dataset(ts, cfg.n_train, 0), cfg.residual_sigma,
                                        derive_seed(cfg.seed, {purpose_tag("planted-residuals")}));
  const Dataset test = add_label_noise(sample_dataset(ts, cfg.test_size, 1), cfg.residual_sigma,
                                       derive_seed(cfg.seed, {purpose_tag("test-residuals")}));

  MLPConfig mc;
  mc.input_dim = cfg.input_dim;
  mc.output_dim = 1;
  Network ref = init_network(mc);
  const Matrix j = output_jacobian(ref, train.xs);
  ref.params = min_norm_solve(compact_svd(j), train.ys.col(0));
  const Vector residuals = forward_batch(ref, train.xs).col(0) - train.ys.col(0);
  const Matrix h = estimate_heff(j, cfg.n_train).matrix;
  const Matrix sample_cov = exact_sample_covariance(j, residuals);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(h, Eigen::EigenvaluesOnly);
  out.lambda_max = eig.eigenvalues().maxCoeff();
  out.hessian_trace = h.trace();
  out.residual_variance = residual_variance(residuals);
  out.dropped_term_ratio = dropped_term_ratio(j, residuals);
  out.residual_geometry_correlation = residual_geometry_correlation(j, residuals);

  for (std::size_t ei = 0; ei < cfg.eta_lambda_max.size(); ++ei) {
    for (std::size_t bi = 0; bi < cfg.batches.size(); ++bi) {
      LyapunovRow row;
      row.eta_lambda_max = cfg.eta_lambda_max[ei];
      row.eta = row.eta_lambda_max / out.lambda_max;
      row.batch = cfg.batches[bi];
      const Matrix c = stationary_covariance(h, minibatch_noise_covariance(sample_cov, row.batch), row.eta);
      row.lyapunov = (h * c).trace();
      row.boxed = tpv_sgd_theoretical(row.eta, row.batch, out.residual_variance, out.hessian_trace);

      SgdStationaryProtocol proto;
      proto.lr = row.eta;
      proto.batch = row.batch;
      proto.burn_in = cfg.burn_in;
      proto.snapshot_every = cfg.snapshot_every;
      proto.total_steps = cfg.total_steps;
      proto.chains = cfg.chains;
      proto.with_theory = false;
      proto.options.jobs = cfg.jobs;
      proto.options.seed = derive_seed(cfg.seed, {purpose_tag("sgd-lyapunov"), ei, bi});
      const TPVReport r = run_sgd_noise_protocol(ref, train, test, proto);
      row.empirical = r.tpv_train;
      row.snapshots = r.runs_kept;
      out.rows.push_back(row);
    }
  }

  const std::size_t nb = cfg.batches.size();
  auto at = [&](std::size_t ei, std::size_t bi) -> const LyapunovRow& { return out.rows[ei * nb + bi]; };
  for (std::size_t bi = 0; bi < nb; ++bi) {
    for (std::size_t ei = 0; ei + 1 < cfg.eta_lambda_max.size(); ++ei) {
      const auto& a = at(ei, bi);
      const auto& b = at(ei + 1, bi);
      out.eta_scaling_empirical.push_back((a.empirical / b.empirical) / (a.eta / b.eta));
      out.eta_scaling_lyapunov.push_back((a.lyapunov / b.lyapunov) / (a.eta / b.eta));
    }
  }
  for (std::size_t ei = 0; ei < cfg.eta_lambda_max.size(); ++ei) {
    for (std::size_t bi = 0; bi + 1 < nb; ++bi) {
      const auto& a = at(ei, bi);
      const auto& b = at(ei, bi + 1);
      out.batch_scaling_empirical.push_back((a.empirical * static_cast<double>(a.batch)) /
                                            (b.empirical * static_cast<double>(b.batch)));
      out.batch_scaling_lyapunov.push_back((a.lyapunov * static_cast<double>(a.batch)) /
                                           (b.lyapunov * static_cast<double>(b.batch)));
    }
  }
  return out;
}

json to_json(const LyapunovResult& r) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"eta", row.eta},
                    {"eta_lambda_max", row.eta_lambda_max},
                    {"batch", row.batch},
                    {"empirical", row.empirical},
                    {"lyapunov", row.lyapunov},
                    {"boxed", row.boxed},
                    {"snapshots", row.snapshots},
                    {"empirical_over_lyapunov", row.empirical / row.lyapunov},
                    {"empirical_over_boxed", row.empirical / row.boxed},
                    {"lyapunov_over_boxed", row.lyapunov / row.boxed}});
  }
  return {{"scalar_sanity_ratio", r.scalar_ratio},
          {"residual_variance", r.residual_variance},
          {"lambda_max", r.lambda_max},
          {"hessian_trace", r.hessian_trace},
          {"dropped_term_ratio", r.dropped_term_ratio},
          {"residual_geometry_correlation", r.residual_geometry_correlation},
          {"rows", rows},
          {"eta_scaling_empirical", r.eta_scaling_empirical},
          {"eta_scaling_lyapunov", r.eta_scaling_lyapunov},
          {"batch_scaling_empirical", r.batch_scaling_empirical},
          {"batch_scaling_lyapunov", r.batch_scaling_lyapunov}};
}

int cmd_sgd_lyapunov(const SgdLyapunovConfig& cfg, const fs::path& out_dir) {
  write_json(out_dir / "resolved_config.json", to_json(cfg));
  LyapunovResult res;
  try {
    res = run_sgd_lyapunov(cfg);
  } catch (const UnstableDynamics& e) {
    write_text(out_dir / "summary.txt", std::string("sgd-lyapunov: unstable dynamics: ") + e.what() +
                                            "\nreduce eta_lambda_max below 2 so that I - eta H is stable\n");
    return 1;
  }
  write_json(out_dir / "sgd_lyapunov.json", to_json(res));
  std::ostringstream s;
  s << "sgd-lyapunov: lambda_max=" << format_double(res.lambda_max)
    << " residual_variance=" << format_double(res.residual_variance) << "\n";
  for (const auto& row : res.rows) {
    s << "eta*lambda_max=" << format_double(row.eta_lambda_max) << " b=" << row.batch
      << ": empirical=" << format_double(row.empirical) << " lyapunov=" << format_double(row.lyapunov)
      << " boxed=" << format_double(row.boxed) << "\n";
  }
  write_text(out_dir / "summary.txt", s.str());
  return 0;
}

// ---- quant-tpv -----------------------------------------------------------

QuantTpvConfig default_quant_tpv_config(bool full) {
  QuantTpvConfig c;
  c.models = {{"linear", TeacherKind::LinearGaussian, 10, {}, 500},
              {"mlp", TeacherKind::SingleReLU, 10, {32}, 500}};
  c.reference = g11_reference();
  if (full) {
    c.models.push_back({"mlp_deep", TeacherKind::MultiReLU10, 20, {64, 64}, 1000});
    c.draws = 100000;
  }
  return c;
}

QuantTpvConfig quant_tpv_config_from_json(const json& j, bool full) {
  QuantTpvConfig c = default_quant_tpv_config(full);
  c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
  c.jobs = get_or<int>(j, "jobs", c.jobs);
  c.deltas = get_or(j, "deltas", c.deltas);
  c.draws = get_or(j, "draws", c.draws);
  c.test_size = get_or(j, "test_size", c.test_size);
  if (j.contains("reference")) c.reference = train_config_from_json(j.at("reference"), c.reference);
  if (j.contains("models")) {
    c.models.clear();
    for (const auto& m : j.at("models")) {
      QuantModelSpec s;
      s.name = get_or<std::string>(m, "name", "model" + std::to_string(c.models.size()));
      if (m.contains("teacher")) s.teacher = teacher_kind_from_string(m.at("teacher").get<std::string>());
      s.input_dim = get_or(m, "input_dim", s.input_dim);
      s.hidden_widths = get_or(m, "hidden_widths", s.hidden_widths);
      s.n_train = get_or(m, "n_train", s.n_train);
      c.models.push_back(s);
    }
  }
  require_nonempty(!c.models.empty(), "models");
  require_nonempty(!c.deltas.empty(), "deltas");
  if (c.draws < 2) throw ConfigError("draws must be >= 2");
  return c;
}

json to_json(const QuantTpvConfig& c) {
  json models = json::array();
  for (const auto& m : c.models) {
    models.push_back({{"name", m.name},
                      {"teacher", to_string(m.teacher)},
                      {"input_dim", m.input_dim},
                      {"hidden_widths", m.hidden_widths},
                      {"n_train", m.n_train}});
  }
  return {{"command", "quant-tpv"},
          {"seed", c.seed},
          {"jobs", c.jobs},
          {"models", models},
          {"deltas", c.deltas},
          {"draws", c.draws},
          {"test_size", c.test_size},
          {"reference", train_config_to_json(c.reference)},
          {"noise_model", "independent uniform per-coordinate noise on [-delta/2, delta/2]"}};
}

QuantResult run_quant_tpv(const QuantTpvConfig& cfg) {
  QuantResult out;
  for (std::size_t mi = 0; mi < cfg.models.size(); ++mi) {
    const QuantModelSpec& m = cfg.models[mi];
    const TeacherSpec ts{m.teacher, m.input_dim, derive_seed(cfg.seed, {purpose_tag("teacher"), mi})};
    const Dataset train = sample_dataset(ts, m.n_train, 0);
    const Dataset test = sample_dataset(ts, cfg.test_size, 1);
    MLPConfig mc;
    mc.input_dim = m.input_dim;
    mc.hidden_widths = m.hidden_widths;
    mc.seed = derive_seed(cfg.seed, {purpose_tag("init"), mi});
    const Network init = init_network(mc);
    const Network ref = init.with_params(train_mse(init, train, cfg.reference).final_params);
    const double htrain = hessian_trace_proxy(output_jacobian(ref, train.xs), train.size());
    const double htest = hessian_trace_proxy(output_jacobian(ref, test.xs), test.size());

    for (std::size_t di = 0; di < cfg.deltas.size(); ++di) {
      QuantRow row;
      row.model = m.name;
      row.params = ref.num_params();
      row.delta = cfg.deltas[di];
      row.draws = cfg.draws;
      row.theory_train = tpv_quantization(row.delta, htrain);
      row.theory_test = tpv_quantization(row.delta, htest);
      QuantizationProtocol proto;
      proto.delta = row.delta;
      proto.options.runs = cfg.draws;
      proto.options.jobs = cfg.jobs;
      proto.options.seed = derive_seed(cfg.seed, {purpose_tag("quant"), mi, di});
      try {
        const TPVReport r = run_quantization_protocol(ref, train, test, proto);
        row.tpv_train = r.tpv_train;
        row.tpv_test = r.tpv_test;
        row.median_taylor = r.metadata.at("median_taylor_error").get<double>();
      } catch (const ProtocolFailed& e) {
        row.status = "taylor_check_failed";
        ++out.protocol_failures;
      }
      out.rows.push_back(row);
    }
  }
  return out;
}

std::string quant_csv(const std::vector<QuantRow>& rows) {
  std::ostringstream s;
  s << "model,params,delta,draws,tpv_train,theory_train,ratio_train,tpv_test,theory_test,ratio_test,median_taylor,"
       "status\n";
  for (const auto& r : rows) {
    s << r.model << ',' << r.params << ',' << format_double(r.delta) << ',' << r.draws << ','
      << format_double(r.tpv_train) << ',' << format_double(r.theory_train) << ','
      << format_double(r.tpv_train / r.theory_train) << ',' << format_double(r.tpv_test) << ','
      << format_double(r.theory_test) << ',' << format_double(r.tpv_test / r.theory_test) << ','
      << format_double(r.median_taylor) << ',' << r.status << '\n';
  }
  return s.str();
}

int cmd_quant_tpv(const QuantTpvConfig& cfg, const fs::path& out_dir) {
  write_json(out_dir / "resolved_config.json", to_json(cfg));
  const QuantResult res = run_quant_tpv(cfg);
  write_text(out_dir / "quant.csv", quant_csv(res.rows));
  std::ostringstream s;
  s << "quant-tpv: " << res.rows.size() << " rows, " << res.protocol_failures << " failed Taylor checks\n";
  for (const auto& r : res.rows) {
    s << r.model << " delta=" << format_double(r.delta) << ": empirical/theory (train)="
      << format_double(r.tpv_train / r.theory_train) << "\n";
  }
  write_text(out_dir / "summary.txt", s.str());
  return res.protocol_failures > 0 ? 1 : 0;
}

// ---- prune-bench ---------------------------------------------------------

PruneBenchConfig default_prune_bench_config(bool full) {
  PruneBenchConfig c;
  c.classifier.hidden_widths = {64};
  c.classifier.logit_scale = 5.0;
  c.classifier.train.lr = 2e-2;
  c.classifier.train.momentum = 0.9;
  c.classifier.train.epochs = 400;
  c.classifier.train.schedule = Schedule::Cosine;
  c.prune.target_sparsity = 0.5;
  c.prune.iterations = 18;
  c.prune.tau = kConfidenceTau;
  if (full) c.trials = 50;
  return c;
}

PruneBenchConfig prune_bench_config_from_json(const json& j, bool full) {
  PruneBenchConfig c = default_prune_bench_config(full);
  c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
  c.jobs = get_or<int>(j, "jobs", c.jobs);
  c.num_classes = get_or(j, "num_classes", c.num_classes);
  c.input_dim = get_or(j, "input_dim", c.input_dim);
  c.n_train = get_or(j, "n_train", c.n_train);
  c.n_test = get_or(j, "n_test", c.n_test);
  c.separation = get_or(j, "separation", c.separation);
  c.score_samples = get_or(j, "score_samples", c.score_samples);
  c.trials = get_or(j, "trials", c.trials);
  c.min_train_accuracy = get_or(j, "min_train_accuracy", c.min_train_accuracy);
  if (j.contains("classifier")) {
    const json& cl = j.at("classifier");
    c.classifier.hidden_widths = get_or(cl, "hidden_widths", c.classifier.hidden_widths);
    c.classifier.logit_scale = get_or(cl, "logit_scale", c.classifier.logit_scale);
    if (cl.contains("train")) c.classifier.train = train_config_from_json(cl.at("train"), c.classifier.train);
  }
  if (j.contains("criteria")) {
    c.criteria.clear();
    for (const auto& n : j.at("criteria").get<std::vector<std::string>>()) c.criteria.push_back(criterion_from_string(n));
  }
  if (j.contains("prune")) {
    const json& p = j.at("prune");
    c.prune.target_sparsity = get_or(p, "target_sparsity", c.prune.target_sparsity);
    c.prune.iterations = get_or(p, "iterations", c.prune.iterations);
    c.prune.tau = get_or(p, "tau", c.prune.tau);
    c.prune.jc_use_predictions = get_or(p, "jc_use_predictions", c.prune.jc_use_predictions);
  }
  require_nonempty(!c.criteria.empty(), "criteria");
  if (c.trials < 1) throw ConfigError("trials must be >= 1");
  if (c.num_classes < 2) throw ConfigError("num_classes must be >= 2");
  return c;
}

json to_json(const PruneBenchConfig& c) {
  std::vector<std::string> crit;
  for (auto k : c.criteria) crit.push_back(to_string(k));
  return {{"command", "prune-bench"},
          {"seed", c.seed},
          {"jobs", c.jobs},
          {"num_classes", c.num_classes},
          {"input_dim", c.input_dim},
          {"n_train", c.n_train},
          {"n_test", c.n_test},
          {"separation", c.separation},
          {"score_samples", c.score_samples},
          {"trials", c.trials},
          {"min_train_accuracy", c.min_train_accuracy},
          {"criteria", crit},
          {"classifier",
           {{"hidden_widths", c.classifier.hidden_widths},
            {"logit_scale", c.classifier.logit_scale},
            {"objective", "mse on scaled one-hot targets"},
            {"train", train_config_to_json(c.classifier.train)}}},
          {"prune",
           {{"target_sparsity", c.prune.target_sparsity},
            {"iterations", c.prune.iterations},
            {"tau", c.prune.tau},
            {"jc_use_predictions", c.prune.jc_use_predictions},
            {"schedule", "geometric in remaining neuron fraction"},
            {"groups", "hidden neurons (fan-in, bias, fan-out)"},
            {"fine_tuning", false}}}};
}

PruneBenchResult run_prune_bench(const PruneBenchConfig& cfg) {
  PruneBenchResult out;
  out.criteria = cfg.criteria;
  out.trials.resize(static_cast<std::size_t>(cfg.trials));
  parallel_for(out.trials.size(), cfg.jobs, [&](std::size_t t) {
    PruneTrial& trial = out.trials[t];
    trial.trial = static_cast<Index>(t);
    trial.seed = derive_seed(cfg.seed, {purpose_tag("prune-trial"), t});
    const ClassificationDataset train =
        sample_gaussian_mixture(cfg.num_classes, cfg.input_dim, cfg.n_train, cfg.separation, trial.seed, 0);
    const ClassificationDataset test =
        sample_gaussian_mixture(cfg.num_classes, cfg.input_dim, cfg.n_test, cfg.separation, trial.seed, 1);
    ClassifierConfig cc = cfg.classifier;
    cc.seed = derive_seed(trial.seed, {purpose_tag("init")});
    const Network net = train_classifier(train, cc);
    trial.train_accuracy = accuracy(net, train.xs, train.labels);
    if (trial.train_accuracy < cfg.min_train_accuracy) {
      trial.status = "below_min_train_accuracy";
      return;
    }
    ClassificationDataset score = train;
    const Index m = std::min(cfg.score_samples, train.size());
    score.xs = train.xs.topRows(m);
    score.labels.assign(train.labels.begin(), train.labels.begin() + m);
    for (Criterion c : cfg.criteria) {
      PruneSettings ps = cfg.prune;
      ps.seed = derive_seed(trial.seed, {purpose_tag("prune"), static_cast<std::uint64_t>(c)});
      trial.trajectories.push_back(iterative_global_prune(net, score, test, c, ps));
    }
  });

  const auto jbr_pos = std::find(cfg.criteria.begin(), cfg.criteria.end(), Criterion::JBR);
  if (jbr_pos != cfg.criteria.end()) {
    const std::size_t ji = static_cast<std::size_t>(jbr_pos - cfg.criteria.begin());
    for (std::size_t ci = 0; ci < cfg.criteria.size(); ++ci) {
      if (ci == ji) continue;
      Index usable = 0, wins = 0;
      for (const auto& trial : out.trials) {
        if (trial.status != "ok") continue;
        ++usable;
        wins += trial.trajectories[ji].points.back().accuracy >= trial.trajectories[ci].points.back().accuracy ? 1 : 0;
      }
      out.paired_wins[to_string(cfg.criteria[ci])] = {
          {"trials", usable}, {"jbr_at_least_as_good", wins},
          {"fraction", usable ? static_cast<double>(wins) / static_cast<double>(usable) : 0.0}};
    }
  }
  return out;
}

std::string trajectory_csv(const PruneBenchResult& r) {
  std::ostringstream s;
  s << "iteration,sparsity,params_remaining,macs_fraction,accuracy,criterion,seed\n";
  for (const auto& trial : r.trials) {
    for (const auto& traj : trial.trajectories) {
      for (const auto& p : traj.points) {
        s << p.iteration << ',' << format_double(p.sparsity) << ',' << p.params_remaining << ','
          << format_double(p.macs_fraction) << ',' << format_double(p.accuracy) << ',' << to_string(traj.criterion)
          << ',' << trial.seed << '\n';
      }
    }
  }
  return s.str();
}

std::string averaged_trajectory_csv(const PruneBenchResult& r) {
  std::ostringstream s;
  s << "criterion,iteration,mean_sparsity,mean_macs_fraction,mean_accuracy,trials\n";
  for (std::size_t ci = 0; ci < r.criteria.size(); ++ci) {
    std::vector<double> sp, macs, acc;
    std::vector<Index> count;
    for (const auto& trial : r.trials) {
      if (trial.status != "ok") continue;
      const auto& pts = trial.trajectories[ci].points;
      if (pts.size() > sp.size()) {
        sp.resize(pts.size(), 0.0);
        macs.resize(pts.size(), 0.0);
        acc.resize(pts.size(), 0.0);
        count.resize(pts.size(), 0);
      }
      for (std::size_t k = 0; k < pts.size(); ++k) {
        sp[k] += pts[k].sparsity;
        macs[k] += pts[k].macs_fraction;
        acc[k] += pts[k].accuracy;
        ++count[k];
      }
    }
    for (std::size_t k = 0; k < sp.size(); ++k) {
      const double n = static_cast<double>(count[k]);
      s << to_string(r.criteria[ci]) << ',' << k << ',' << format_double(sp[k] / n) << ','
        << format_double(macs[k] / n) << ',' << format_double(acc[k] / n) << ',' << count[k] << '\n';
    }
  }
  return s.str();
}

int cmd_prune_bench(const PruneBenchConfig& cfg, const fs::path& out_dir) {
  write_json(out_dir / "resolved_config.json", to_json(cfg));
  const PruneBenchResult res = run_prune_bench(cfg);
  write_text(out_dir / "trajectories.csv", trajectory_csv(res));
  write_text(out_dir / "trajectories_mean.csv", averaged_trajectory_csv(res));
  json trials = json::array();
  for (const auto& t : res.trials) {
    json stops = json::object();
    for (const auto& traj : t.trajectories) {
      if (traj.stopped_early) stops[to_string(traj.criterion)] = traj.stop_reason;
    }
    trials.push_back({{"trial", t.trial},
                      {"seed", t.seed},
                      {"train_accuracy", t.train_accuracy},
                      {"status", t.status},
                      {"stopped_early", stops}});
  }
  write_json(out_dir / "prune_summary.json", {{"trials", trials}, {"jbr_paired_wins", res.paired_wins}});
  std::ostringstream s;
  s << "prune-bench: " << res.trials.size() << " trials\n";
  for (const auto& [name, w] : res.paired_wins.items()) {
    s << "jbr >= " << name << " at endpoint: " << w.at("jbr_at_least_as_good").get<Index>() << "/"
      << w.at("trials").get<Index>() << "\n";
  }
  write_text(out_dir / "summary.txt", s.str());
  return 0;
}

// ---- gradcheck -----------------------------------------------------------

GradcheckConfig default_gradcheck_config(bool full) {
  GradcheckConfig c;
  if (full) c.instances = 200;
  return c;
}

GradcheckConfig gradcheck_config_from_json(const json& j, bool full) {
  GradcheckConfig c = default_gradcheck_config(full);
  c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
  c.instances = get_or(j, "instances", c.instances);
  c.max_params = get_or(j, "max_params", c.max_params);
  c.batch = get_or(j, "batch", c.batch);
  c.step = get_or(j, "step", c.step);
  c.tolerance = get_or(j, "tolerance", c.tolerance);
  if (c.instances < 1 || c.max_params < 4 || c.batch < 1 || !(c.step > 0.0)) {
    throw ConfigError("gradcheck needs instances >= 1, max_params >= 4, batch >= 1, step > 0");
  }
  return c;
}

json to_json(const GradcheckConfig& c) {
  return {{"command", "gradcheck"},
          {"seed", c.seed},
          {"instances", c.instances},
          {"max_params", c.max_params},
          {"batch", c.batch},
          {"step", c.step},
          {"tolerance", c.tolerance},
          {"error_measure", "||analytic - central_difference||_2 / ||central_difference||_2"}};
}

namespace {

MLPConfig random_architecture(CounterRng& rng, Index instance, Index instances, Index max_params) {
  MLPConfig c;
  c.input_dim = 1 + static_cast<Index>(rng.index(20));
  c.output_dim = 1 + static_cast<Index>(rng.index(3));
  const Index hidden = instance == 0 ? 0 : 1 + static_cast<Index>(rng.index(3));
  // Log-uniform parameter budget, with the last instance at the maximum.
  const double frac = instance + 1 == instances ? 1.0 : rng.uniform();
  const double budget = std::exp(std::log(16.0) + frac * (std::log(static_cast<double>(max_params)) - std::log(16.0)));
  Index width = 1;
  if (hidden > 0) {
    auto count = [&](Index w) {
      c.hidden_widths.assign(static_cast<std::size_t>(hidden), w);
      return parameter_count(c);
    };
    while (count(width + 1) <= budget) ++width;
    c.hidden_widths.assign(static_cast<std::size_t>(hidden), width);
  }
  return c;
}

double rel_err(const Matrix& a, const Matrix& ref) {
  const double denom = ref.norm();
  return denom > 0.0 ? (a - ref).norm() / denom : (a - ref).norm();
}

}  // namespace

std::vector<GradcheckRow> run_gradcheck(const GradcheckConfig& cfg) {
  std::vector<GradcheckRow> rows;
  for (Index i = 0; i < cfg.instances; ++i) {
    CounterRng rng(derive_seed(cfg.seed, {purpose_tag("gradcheck"), static_cast<std::uint64_t>(i)}));
    MLPConfig mc = random_architecture(rng, i, cfg.instances, cfg.max_params);
    mc.seed = rng.next_u64();
    Network net = init_network(mc);
    for (const auto& l : layer_shapes(mc)) {
      for (Index k = 0; k < l.out; ++k) net.params[l.bias_offset + k] = 0.1 * rng.normal();
    }
    // Keep every hidden pre-activation away from the ReLU kink.
    Matrix xs(cfg.batch, mc.input_dim);
    double margin = 0.0;
    for (int attempt = 0; attempt < 200; ++attempt) {
      for (Index r = 0; r < xs.rows(); ++r)
        for (Index c = 0; c < xs.cols(); ++c) xs(r, c) = rng.normal();
      margin = min_abs_preactivation(net, xs);
      if (margin > 1e-4) break;
    }
    Matrix ys(cfg.batch, mc.output_dim);
    for (Index r = 0; r < ys.rows(); ++r)
      for (Index c = 0; c < ys.cols(); ++c) ys(r, c) = rng.normal();

    const ParamVector grad = loss_and_grad_mse(net, xs, ys).grad;
    const Matrix jac = output_jacobian(net, xs);
    const Index p = net.num_params();
    const Index k_out = mc.output_dim;
    Vector fd_grad(p);
    Matrix fd_jac(cfg.batch * k_out, p);
    Network probe = net;
    for (Index j = 0; j < p; ++j) {
      probe.params[j] = net.params[j] + cfg.step;
      const Matrix fp = forward_batch(probe, xs);
      probe.params[j] = net.params[j] - cfg.step;
      const Matrix fm = forward_batch(probe, xs);
      probe.params[j] = net.params[j];
      const double lp = 0.5 * (fp - ys).squaredNorm() / static_cast<double>(cfg.batch);
      const double lm = 0.5 * (fm - ys).squaredNorm() / static_cast<double>(cfg.batch);
      fd_grad[j] = (lp - lm) / (2.0 * cfg.step);
      const Matrix dcol = (fp - fm) / (2.0 * cfg.step);
      for (Index r = 0; r < cfg.batch; ++r)
        for (Index k = 0; k < k_out; ++k) fd_jac(r * k_out + k, j) = dcol(r, k);
    }
    GradcheckRow row;
    row.instance = i;
    std::ostringstream arch;
    arch << mc.input_dim;
    for (Index w : mc.hidden_widths) arch << '-' << w;
    arch << '-' << mc.output_dim;
    row.architecture = arch.str();
    row.params = p;
    row.grad_rel_err = rel_err(grad, fd_grad);
    row.jac_rel_err = rel_err(jac, fd_jac);
    row.kink_margin = margin;
    rows.push_back(row);
  }
  return rows;
}

std::string gradcheck_csv(const std::vector<GradcheckRow>& rows) {
  std::ostringstream s;
  s << "instance,architecture,params,grad_rel_err,jac_rel_err,kink_margin\n";
  for (const auto& r : rows) {
    s << r.instance << ',' << r.architecture << ',' << r.params << ',' << format_double(r.grad_rel_err) << ','
      << format_double(r.jac_rel_err) << ',' << format_double(r.kink_margin) << '\n';
  }
  return s.str();
}

int cmd_gradcheck(const GradcheckConfig& cfg, const fs::path& out_dir) {
  write_json(out_dir / "resolved_config.json", to_json(cfg));
  const auto rows = run_gradcheck(cfg);
  write_text(out_dir / "gradcheck.csv", gradcheck_csv(rows));
  double worst_grad = 0.0, worst_jac = 0.0;
  Index max_p = 0;
  for (const auto& r : rows) {
    worst_grad = std::max(worst_grad, r.grad_rel_err);
    worst_jac = std::max(worst_jac, r.jac_rel_err);
    max_p = std::max(max_p, r.params);
  }
  const bool ok = worst_grad < cfg.tolerance && worst_jac < cfg.tolerance;
  std::ostringstream s;
  s << "gradcheck: " << rows.size() << " instances, largest p=" << max_p << "\n"
    << "worst gradient relative error: " << format_double(worst_grad) << "\n"
    << "worst jacobian relative error: " << format_double(worst_jac) << "\n"
    << (ok ? "PASS" : "FAIL") << " at tolerance " << format_double(cfg.tolerance) << "\n";
  write_text(out_dir / "summary.txt", s.str());
  return ok ? 0 : 1;
}

}  // namespace tpv
