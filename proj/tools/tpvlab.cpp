#include "tpv/experiments.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace {

struct CommonFlags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  bool full = false;
};

nlohmann::json load_config(const CommonFlags& f) {
  nlohmann::json j = nlohmann::json::object();
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw tpv::ConfigError("cannot open config file " + f.config);
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw tpv::ConfigError(f.config + ": " + e.what());
    }
    if (!j.is_object()) throw tpv::ConfigError(f.config + ": top level must be a JSON object");
  }
  if (f.seed) j["seed"] = *f.seed;
  if (f.jobs) j["jobs"] = *f.jobs;
  return j;
}

void add_common(CLI::App* cmd, CommonFlags& f, const std::string& default_out) {
  f.out = default_out;
  cmd->add_option("--config", f.config, "JSON experiment config")->check(CLI::ExistingFile);
  cmd->add_option("--out", f.out, "output directory")->capture_default_str();
  cmd->add_option("--seed", f.seed, "base seed (overrides the config)");
  cmd->add_option("--jobs", f.jobs, "worker threads (overrides the config)")->check(CLI::PositiveNumber);
  cmd->add_flag("--full", f.full, "use the full-size grid instead of the desk-scale default");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tpvlab: test prediction variance experiments on small MLPs"};
  app.require_subcommand(1);

  CommonFlags grid, curve, lyap, quant, prune, grad;
  auto* c_grid = app.add_subcommand("stability-grid", "train/test TPV scatter over a synthetic grid");
  auto* c_curve = app.add_subcommand("label-noise-curve", "label-noise TPV across widths");
  auto* c_lyap = app.add_subcommand("sgd-lyapunov", "SGD stationary TPV: empirical vs Lyapunov vs closed form");
  auto* c_quant = app.add_subcommand("quant-tpv", "uniform quantization-noise TPV");
  auto* c_prune = app.add_subcommand("prune-bench", "iterative pruning criteria comparison");
  auto* c_grad = app.add_subcommand("gradcheck", "finite-difference gradient and Jacobian checks");
  add_common(c_grid, grid, "out/stability-grid");
  add_common(c_curve, curve, "out/label-noise-curve");
  add_common(c_lyap, lyap, "out/sgd-lyapunov");
  add_common(c_quant, quant, "out/quant-tpv");
  add_common(c_prune, prune, "out/prune-bench");
  add_common(c_grad, grad, "out/gradcheck");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (c_grid->parsed()) {
      return tpv::cmd_stability_grid(tpv::stability_grid_config_from_json(load_config(grid), grid.full), grid.out);
    }
    if (c_curve->parsed()) {
      return tpv::cmd_label_noise_curve(tpv::label_noise_curve_config_from_json(load_config(curve), curve.full),
                                        curve.out);
    }
    if (c_lyap->parsed()) {
      return tpv::cmd_sgd_lyapunov(tpv::sgd_lyapunov_config_from_json(load_config(lyap), lyap.full), lyap.out);
    }
    if (c_quant->parsed()) {
      return tpv::cmd_quant_tpv(tpv::quant_tpv_config_from_json(load_config(quant), quant.full), quant.out);
    }
    if (c_prune->parsed()) {
      return tpv::cmd_prune_bench(tpv::prune_bench_config_from_json(load_config(prune), prune.full), prune.out);
    }
    if (c_grad->parsed()) {
      return tpv::cmd_gradcheck(tpv::gradcheck_config_from_json(load_config(grad), grad.full), grad.out);
    }
  } catch (const tpv::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const tpv::ProtocolFailed& e) {
    std::cerr << "protocol failed: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
