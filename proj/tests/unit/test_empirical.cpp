#include "helpers.hpp"

#include "tpv/datagen.hpp"
#include "tpv/empirical.hpp"
#include "tpv/errors.hpp"
#include "tpv/theory.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace tpv;
using tpv::testing::gaussian_matrix;
using tpv::testing::linear_network;
using tpv::testing::small_mlp;

namespace {

struct LinearSetup {
  Dataset train;
  Dataset test;
  Network ref;
};

// Overparameterized linear regression interpolating clean labels.
LinearSetup linear_setup(Index d, Index n, std::uint64_t seed) {
  TeacherSpec spec{TeacherKind::LinearGaussian, d, seed};
  LinearSetup s{sample_dataset(spec, n, 0), sample_dataset(spec, 400, 1), {}};
  const Teacher t = make_teacher(spec);
  s.ref = linear_network(t.a.row(0).transpose(), 0.0);
  return s;
}

}  // namespace

TEST(EmpiricalTpv, LinearIsQuadraticForm) {
  const Network ref = linear_network(Vector::Zero(4));
  const Matrix xs = gaussian_matrix(30, 4, 1);
  const Vector dw = tpv::testing::gaussian_vector(5, 2);
  const Matrix jac = output_jacobian(ref, xs);
  const double oracle = dw.dot(estimate_heff(jac, 30).matrix * dw);
  EXPECT_NEAR(empirical_tpv(ref, {ref.params + dw}, xs), oracle, 1e-12);
  EXPECT_NEAR(empirical_tpv(ref, {ref.params + dw, ref.params - dw}, xs), oracle, 1e-12);
  EXPECT_THROW(empirical_tpv(ref, {}, xs), EmptyInput);
  EXPECT_THROW(empirical_tpv(ref, {Vector::Zero(2)}, xs), DimError);
}

TEST(TaylorValidity, LinearExactNonlinearNot) {
  const Network lin = linear_network(Vector::Ones(3));
  const Matrix xs = gaussian_matrix(20, 3, 3);
  EXPECT_LT(taylor_validity(lin, lin.params + tpv::testing::gaussian_vector(4, 4), xs), 1e-20);
  const Network mlp = small_mlp(3, {16}, 1, 5);
  const ParamVector small = mlp.params + 1e-6 * tpv::testing::gaussian_vector(mlp.num_params(), 6);
  const ParamVector large = mlp.params + 2.0 * tpv::testing::gaussian_vector(mlp.num_params(), 6);
  const double e_small = taylor_validity(mlp, small, xs);
  const double e_large = taylor_validity(mlp, large, xs);
  EXPECT_LT(e_small, kTaylorThreshold);
  EXPECT_GT(e_large, kTaylorThreshold);
  EXPECT_THROW(taylor_validity(mlp, small, xs, 0.0), PreconditionFailed);
}

TEST(TaylorReference, SeededSortedSubset) {
  const Matrix xs = gaussian_matrix(300, 2, 7);
  const Matrix a = taylor_reference_inputs(xs, 128, 9);
  EXPECT_EQ(a.rows(), 128);
  EXPECT_EQ(a, taylor_reference_inputs(xs, 128, 9));
  EXPECT_NE(a, taylor_reference_inputs(xs, 128, 10));
  EXPECT_EQ(taylor_reference_inputs(xs.topRows(50), 128, 9), xs.topRows(50));
}

TEST(LabelProtocol, AnalyticLinearMatchesTheory) {
  const LinearSetup s = linear_setup(40, 15, 11);
  LabelNoiseProtocol proto;
  proto.sigma = 0.1;
  proto.mode = RetrainMode::AnalyticLinearized;
  proto.with_theory = true;
  proto.options.runs = 2000;
  proto.options.seed = 3;
  const TPVReport r = run_label_noise_protocol(s.ref, s.train, s.test, proto);
  ASSERT_TRUE(r.theoretical_tpv.has_value());
  EXPECT_EQ(r.runs_kept, 2000);
  EXPECT_NEAR(r.tpv_test / *r.theoretical_tpv, 1.0, 0.05);
  // min-norm retraining reproduces each train-label error: TPV_train = sigma^2 * (rank / n)
  EXPECT_NEAR(r.tpv_train / 0.01, 1.0, 0.05);
  EXPECT_NEAR(r.metadata["theoretical_tpv_train"].get<double>(), 0.01, 1e-12);
  EXPECT_EQ(r.metadata["jacobian_rank"].get<Index>(), 15);
}

TEST(LabelProtocol, RidgeShrinksTrainTpv) {
  const LinearSetup s = linear_setup(40, 15, 12);
  LabelNoiseProtocol proto;
  proto.sigma = 0.1;
  proto.mode = RetrainMode::AnalyticLinearized;
  proto.with_theory = true;
  proto.options.runs = 2000;
  proto.retrain.proximity_gamma = 1.0;
  const TPVReport r = run_label_noise_protocol(s.ref, s.train, s.test, proto);
  const double closed = r.metadata["theoretical_tpv_train"].get<double>();
  EXPECT_LT(closed, 0.01);
  EXPECT_NEAR(r.tpv_train / closed, 1.0, 0.05);
  EXPECT_NEAR(r.tpv_test / *r.theoretical_tpv, 1.0, 0.05);
}

TEST(LabelProtocol, SgdRetrainLinearApproachesMinNorm) {
  const LinearSetup s = linear_setup(20, 10, 13);
  LabelNoiseProtocol proto;
  proto.sigma = 0.1;
  proto.with_theory = true;
  proto.options.runs = 200;
  proto.retrain.lr = 0.05;
  proto.retrain.epochs = 3000;
  proto.retrain.schedule = Schedule::Constant;
  const TPVReport r = run_label_noise_protocol(s.ref, s.train, s.test, proto);
  EXPECT_EQ(r.runs_kept, 200);
  EXPECT_NEAR(r.tpv_test / *r.theoretical_tpv, 1.0, 0.2);
}

TEST(LabelProtocol, JobsDoNotChangeResults) {
  const LinearSetup s = linear_setup(10, 6, 14);
  LabelNoiseProtocol proto;
  proto.mode = RetrainMode::AnalyticLinearized;
  proto.options.runs = 17;
  const TPVReport a = run_label_noise_protocol(s.ref, s.train, s.test, proto);
  proto.options.jobs = 3;
  const TPVReport b = run_label_noise_protocol(s.ref, s.train, s.test, proto);
  EXPECT_EQ(report_to_json(a).dump(), report_to_json(b).dump());
}

TEST(LabelProtocol, Preconditions) {
  const LinearSetup s = linear_setup(10, 6, 15);
  LabelNoiseProtocol proto;
  proto.options.runs = 0;
  EXPECT_THROW(run_label_noise_protocol(s.ref, s.train, s.test, proto), PreconditionFailed);
  proto.options.runs = 2;
  proto.options.max_reference_loss = 0.0;
  EXPECT_THROW(run_label_noise_protocol(s.ref, s.train, s.test, proto), PreconditionFailed);
}

TEST(SgdProtocol, RunCountAndTheory) {
  const LinearSetup s = linear_setup(5, 200, 16);
  const Dataset noisy = add_label_noise(s.train, 0.3, 1);
  SgdStationaryProtocol proto;
  proto.lr = 0.01;
  proto.batch = 10;
  proto.burn_in = 500;
  proto.snapshot_every = 25;
  proto.total_steps = 1500;
  proto.chains = 2;
  const TPVReport r = run_sgd_noise_protocol(s.ref, noisy, s.test, proto);
  EXPECT_EQ(r.runs_kept + r.runs_discarded, 80);
  ASSERT_TRUE(r.theoretical_tpv.has_value());
  EXPECT_GT(*r.theoretical_tpv, 0.0);
  EXPECT_EQ(r.metadata["noise_kind"], "sgd");
}

TEST(SgdProtocol, DivergenceBecomesProtocolFailed) {
  const LinearSetup s = linear_setup(5, 50, 17);
  SgdStationaryProtocol proto;
  proto.lr = 100.0;
  try {
    run_sgd_noise_protocol(s.ref, add_label_noise(s.train, 0.3, 1), s.test, proto);
    FAIL() << "expected ProtocolFailed";
  } catch (const ProtocolFailed& e) {
    ASSERT_EQ(e.diagnostics().size(), 1u);
    EXPECT_FALSE(e.diagnostics()[0].kept);
  }
}

TEST(QuantProtocol, LinearMatchesTheoryAndLargeDeltaFails) {
  const LinearSetup s = linear_setup(8, 100, 18);
  QuantizationProtocol proto;
  proto.delta = 0.01;
  proto.options.runs = 4000;
  const TPVReport r = run_quantization_protocol(s.ref, s.train, s.test, proto);
  EXPECT_NEAR(r.tpv_train / *r.theoretical_tpv, 1.0, 0.05);

  const Network mlp = small_mlp(8, {16}, 1, 2);
  proto.delta = 5.0;
  proto.options.runs = 70;
  EXPECT_THROW(run_quantization_protocol(mlp, s.train, s.test, proto), ProtocolFailed);
}

TEST(RunProtocol, DispatchAndKind) {
  const LinearSetup s = linear_setup(6, 40, 19);
  QuantizationProtocol q;
  q.options.runs = 10;
  const PerturbProtocol p = q;
  EXPECT_EQ(noise_kind(p), "quant");
  EXPECT_EQ(run_protocol(s.ref, s.train, s.test, p).metadata["noise_kind"], "quant");
  EXPECT_EQ(noise_kind(PerturbProtocol{LabelNoiseProtocol{}}), "label");
  EXPECT_EQ(noise_kind(PerturbProtocol{SgdStationaryProtocol{}}), "sgd");
}

TEST(StabilityGap, BandAndDegenerateRatios) {
  TPVReport r;
  r.tpv_train = 1.2;
  r.tpv_test = 1.0;
  StabilityGap g = stability_gap(r);
  EXPECT_NEAR(g.gap, 0.2, 1e-15);
  EXPECT_TRUE(g.in_band);
  r.tpv_train = 2.0;
  EXPECT_FALSE(stability_gap(r).in_band);
  r.tpv_test = 0.0;
  g = stability_gap(r);
  EXPECT_TRUE(g.ratio_infinite);
  EXPECT_FALSE(g.in_band);
  r.tpv_train = 0.0;
  g = stability_gap(r);
  EXPECT_DOUBLE_EQ(g.ratio, 1.0);
  EXPECT_TRUE(g.in_band);
  EXPECT_TRUE(in_band(2.0 / 3.0));
  EXPECT_TRUE(in_band(1.5));
  EXPECT_FALSE(in_band(1.51));
}
