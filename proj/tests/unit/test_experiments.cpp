#include "tpv/errors.hpp"
#include "tpv/experiments.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

using namespace tpv;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tpv_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

StabilityGridConfig tiny_grid() {
  StabilityGridConfig c = default_stability_grid_config();
  c.grid.teachers = {TeacherKind::LinearGaussian};
  c.grid.input_dims = {5};
  c.grid.train_sizes = {40};
  c.grid.widths = {4};
  c.grid.depths = {2};
  c.grid.test_size = 50;
  c.reference.epochs = 30;
  for (auto& p : c.protocols) {
    std::visit(
        [](auto& q) {
          using T = std::decay_t<decltype(q)>;
          q.options.runs = 3;
          if constexpr (std::is_same_v<T, LabelNoiseProtocol>) q.retrain.epochs = 10;
          if constexpr (std::is_same_v<T, SgdStationaryProtocol>) {
            q.burn_in = 20;
            q.total_steps = 80;
          }
        },
        p);
  }
  return c;
}

}  // namespace

TEST(Spearman, KnownValues) {
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3}, {10, 20, 30}), 1.0);
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3}, {3, 2, 1}), -1.0);
  EXPECT_NEAR(spearman({1, 2, 3, 4}, {1, 3, 2, 4}), 0.8, 1e-12);
  // ties take average ranks
  EXPECT_NEAR(spearman({1, 1, 2}, {1, 2, 3}), std::sqrt(3.0) / 2.0, 1e-12);
  EXPECT_TRUE(std::isnan(spearman({1, 1, 1}, {1, 2, 3})));
}

TEST(FormatDouble, StableText) {
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(1.0 / 3.0), "0.333333333333");
  EXPECT_EQ(format_double(std::nan("")), "nan");
  EXPECT_EQ(format_double(-INFINITY), "-inf");
}

TEST(StudentConfig, DepthCountsLayers) {
  EXPECT_EQ(student_config(3, 8, 1, 0).hidden_widths.size(), 0u);
  EXPECT_EQ(student_config(3, 8, 3, 0).hidden_widths, (std::vector<Index>{8, 8}));
}

TEST(ProtocolJson, RoundTrip) {
  const nlohmann::json label = {{"kind", "label"}, {"sigma", 0.05}, {"runs", 7}, {"mode", "analytic"},
                                {"targets", "dataset_labels"}};
  const PerturbProtocol p = protocol_from_json(label);
  const auto& l = std::get<LabelNoiseProtocol>(p);
  EXPECT_DOUBLE_EQ(l.sigma, 0.05);
  EXPECT_EQ(l.options.runs, 7);
  EXPECT_EQ(l.mode, RetrainMode::AnalyticLinearized);
  EXPECT_EQ(l.targets, LabelTargets::DatasetLabels);
  EXPECT_EQ(protocol_to_json(protocol_from_json(protocol_to_json(p))), protocol_to_json(p));

  const PerturbProtocol q = protocol_from_json({{"kind", "quant"}, {"delta", 1e-3}, {"draws", 11}});
  EXPECT_EQ(std::get<QuantizationProtocol>(q).options.runs, 11);
  EXPECT_THROW(protocol_from_json({{"kind", "dropout"}}), ConfigError);
  EXPECT_THROW(protocol_from_json({{"kind", "sgd"}, {"burn_in", 10}, {"total_steps", 5}}), ConfigError);
  EXPECT_THROW(protocol_from_json({{"kind", "label"}, {"sigma", "big"}}), ConfigError);
}

TEST(ConfigJson, ResolvedConfigsRoundTrip) {
  const auto grid = default_stability_grid_config();
  EXPECT_EQ(to_json(stability_grid_config_from_json(to_json(grid))), to_json(grid));
  const auto curve = default_label_noise_curve_config();
  EXPECT_EQ(to_json(label_noise_curve_config_from_json(to_json(curve))), to_json(curve));
  const auto lyap = default_sgd_lyapunov_config();
  EXPECT_EQ(to_json(sgd_lyapunov_config_from_json(to_json(lyap))), to_json(lyap));
  const auto quant = default_quant_tpv_config();
  EXPECT_EQ(to_json(quant_tpv_config_from_json(to_json(quant))), to_json(quant));
  const auto prune = default_prune_bench_config();
  EXPECT_EQ(to_json(prune_bench_config_from_json(to_json(prune))), to_json(prune));
  const auto grad = default_gradcheck_config();
  EXPECT_EQ(to_json(gradcheck_config_from_json(to_json(grad))), to_json(grad));
  EXPECT_THROW(label_noise_curve_config_from_json({{"widths", nlohmann::json::array()}}), ConfigError);
  EXPECT_THROW(label_noise_curve_config_from_json({{"teacher", "cubic"}}), ConfigError);
}

TEST(DefaultGrid, ReducedGridSize) {
  const auto c = default_stability_grid_config();
  const std::size_t cells = c.grid.teachers.size() * c.grid.input_dims.size() * c.grid.train_sizes.size() *
                            c.grid.widths.size() * c.grid.depths.size();
  EXPECT_GE(cells / c.grid.train_sizes.size(), 24u);
  bool has_label = false, has_sgd = false;
  for (const auto& p : c.protocols) {
    has_label |= noise_kind(p) == "label";
    has_sgd |= noise_kind(p) == "sgd";
  }
  EXPECT_TRUE(has_label && has_sgd);
}

TEST(BandStats, CountsOnlyKeptRows) {
  std::vector<ScatterRow> rows(4);
  rows[0].n_train = 10, rows[0].runs_kept = 3, rows[0].band_member = true;
  rows[1].n_train = 10, rows[1].runs_kept = 3, rows[1].band_member = false;
  rows[2].n_train = 10, rows[2].runs_kept = 0, rows[2].status = "protocol_failed";
  rows[3].n_train = 1000, rows[3].runs_kept = 3, rows[3].band_member = true;
  const BandStats s = band_stats(rows, 10);
  EXPECT_EQ(s.kept_points, 2);
  EXPECT_EQ(s.inside, 1);
  EXPECT_DOUBLE_EQ(s.inside_fraction(), 0.5);
}

TEST(StabilityGrid, TinyGridDeterministicAcrossJobs) {
  StabilityGridConfig c = tiny_grid();
  const GridResult a = run_stability_grid(c);
  ASSERT_EQ(a.rows.size(), c.protocols.size());
  c.jobs = 2;
  const GridResult b = run_stability_grid(c);
  EXPECT_EQ(scatter_csv(a.rows), scatter_csv(b.rows));
  EXPECT_EQ(a.reports.dump(), b.reports.dump());
}

TEST(Commands, GradcheckOutputsReproducible) {
  GradcheckConfig c = default_gradcheck_config();
  c.instances = 4;
  c.max_params = 200;
  const fs::path d1 = scratch_dir("grad1"), d2 = scratch_dir("grad2");
  EXPECT_EQ(cmd_gradcheck(c, d1), 0);
  EXPECT_EQ(cmd_gradcheck(c, d2), 0);
  EXPECT_EQ(slurp(d1 / "gradcheck.csv"), slurp(d2 / "gradcheck.csv"));
  EXPECT_TRUE(fs::exists(d1 / "resolved_config.json"));
  for (const auto& row : run_gradcheck(c)) {
    EXPECT_LT(row.grad_rel_err, 1e-6);
    EXPECT_LT(row.jac_rel_err, 1e-6);
  }
}
