#include "helpers.hpp"

#include "tpv/datagen.hpp"
#include "tpv/errors.hpp"
#include "tpv/linalg.hpp"
#include "tpv/trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace tpv;
using tpv::testing::linear_network;
using tpv::testing::small_mlp;

namespace {

Dataset linear_data(Index n, Index d, std::uint64_t seed) {
  return add_label_noise(sample_dataset({TeacherKind::LinearGaussian, d, seed}, n), 0.1, seed);
}

Vector least_squares_with_bias(const Dataset& ds) {
  Matrix aug(ds.size(), ds.xs.cols() + 1);
  aug << ds.xs, Vector::Ones(ds.size());
  return aug.colPivHouseholderQr().solve(ds.ys.col(0));
}

}  // namespace

TEST(Schedule, CosineEndpoints) {
  EXPECT_DOUBLE_EQ(schedule_factor(Schedule::Cosine, 0, 100), 1.0);
  EXPECT_NEAR(schedule_factor(Schedule::Cosine, 50, 100), 0.5, 1e-15);
  EXPECT_GT(schedule_factor(Schedule::Cosine, 99, 100), 0.0);
  EXPECT_DOUBLE_EQ(schedule_factor(Schedule::Constant, 99, 100), 1.0);
}

TEST(TrainMse, FullBatchConvergesToLeastSquares) {
  const Dataset ds = linear_data(200, 4, 1);
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.epochs = 2000;
  cfg.schedule = Schedule::Constant;
  const Network net = linear_network(Vector::Zero(4));
  const TrainTrace tr = train_mse(net, ds, cfg);
  EXPECT_FALSE(tr.diverged);
  EXPECT_TRUE(tr.loss_decreased);
  EXPECT_EQ(tr.loss_per_epoch.size(), 2000u);
  EXPECT_LT((tr.final_params - least_squares_with_bias(ds)).norm(), 1e-8);
}

TEST(TrainMse, DeterministicAndShuffleSensitive) {
  const Dataset ds = linear_data(64, 3, 2);
  const Network net = small_mlp(3, {8}, 1, 3);
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 16;
  cfg.shuffle = Shuffle::fixed(5);
  const auto a = train_mse(net, ds, cfg), b = train_mse(net, ds, cfg);
  EXPECT_EQ(a.final_params, b.final_params);
  EXPECT_EQ(a.loss_per_epoch, b.loss_per_epoch);
  cfg.shuffle = Shuffle::fixed(6);
  EXPECT_NE(train_mse(net, ds, cfg).final_params, a.final_params);
  cfg.shuffle = Shuffle::never();
  EXPECT_EQ(train_mse(net, ds, cfg).final_params, train_mse(net, ds, cfg).final_params);
}

TEST(TrainMse, ZeroLrLeavesParams) {
  const Dataset ds = linear_data(30, 2, 4);
  const Network net = small_mlp(2, {4}, 1, 1);
  TrainConfig cfg;
  cfg.lr = 0.0;
  cfg.epochs = 5;
  const TrainTrace tr = train_mse(net, ds, cfg);
  EXPECT_EQ(tr.final_params, net.params);
  EXPECT_FALSE(tr.loss_decreased);
}

TEST(TrainMse, ProximityPullsTowardAnchor) {
  const Dataset ds = linear_data(100, 3, 5);
  const Network net = linear_network(Vector::Zero(3));
  TrainConfig cfg;
  cfg.lr = 0.05;
  cfg.epochs = 3000;
  cfg.schedule = Schedule::Constant;
  cfg.momentum = 0.0;
  cfg.proximity_gamma = 0.5;
  const TrainTrace tr = train_mse(net, ds, cfg);
  // stationary point of L + gamma/2 ||w||^2: (A^T A / n + gamma I) w = A^T y / n
  Matrix aug(ds.size(), 4);
  aug << ds.xs, Vector::Ones(ds.size());
  const Matrix lhs = aug.transpose() * aug / 100.0 + 0.5 * Matrix::Identity(4, 4);
  const Vector oracle = lhs.ldlt().solve(aug.transpose() * ds.ys.col(0) / 100.0);
  EXPECT_LT((tr.final_params - oracle).norm(), 1e-8);
}

TEST(TrainMse, DivergenceIsFlagged) {
  const Dataset ds = linear_data(50, 3, 6);
  TrainConfig cfg;
  cfg.lr = 50.0;
  cfg.epochs = 200;
  cfg.schedule = Schedule::Constant;
  const TrainTrace tr = train_mse(linear_network(Vector::Zero(3)), ds, cfg);
  EXPECT_TRUE(tr.diverged);
}

TEST(TrainMse, Preconditions) {
  const Dataset ds = linear_data(10, 2, 7);
  const Network net = linear_network(Vector::Zero(2));
  TrainConfig cfg;
  cfg.momentum = 1.0;
  EXPECT_THROW(train_mse(net, ds, cfg), PreconditionFailed);
  cfg = {};
  cfg.batch_size = 11;
  EXPECT_THROW(train_mse(net, ds, cfg), PreconditionFailed);
}

TEST(SgdSnapshots, CountAndDeterminism) {
  const Dataset ds = linear_data(100, 3, 8);
  const Network net = linear_network(least_squares_with_bias(ds).head(3), least_squares_with_bias(ds)[3]);
  TrainConfig cfg;
  cfg.lr = 0.01;
  cfg.momentum = 0.0;
  cfg.batch_size = 10;
  cfg.schedule = Schedule::Constant;
  cfg.rng_seed = 3;
  const auto a = sgd_snapshot_run(net, ds, cfg, 100, 10, 300);
  EXPECT_EQ(a.size(), 20u);
  EXPECT_EQ(a, sgd_snapshot_run(net, ds, cfg, 100, 10, 300));
  EXPECT_THROW(sgd_snapshot_run(net, ds, cfg, 100, 10, 100), PreconditionFailed);
  cfg.lr = 1e3;
  EXPECT_THROW(sgd_snapshot_run(net, ds, cfg, 10, 1, 500), Diverged);
}

TEST(TrainConfigJson, RoundTrip) {
  TrainConfig cfg;
  cfg.lr = 0.3;
  cfg.batch_size = 7;
  cfg.shuffle = Shuffle::fixed(9);
  cfg.schedule = Schedule::Constant;
  const TrainConfig back = train_config_from_json(nlohmann::json::parse(train_config_to_json(cfg).dump()));
  EXPECT_DOUBLE_EQ(back.lr, 0.3);
  EXPECT_EQ(back.batch_size, std::optional<Index>(7));
  EXPECT_EQ(back.shuffle.seed, 9u);
  EXPECT_EQ(back.schedule, Schedule::Constant);
  EXPECT_FALSE(train_config_from_json({{"batch_size", "full"}}).batch_size.has_value());
  EXPECT_THROW(train_config_from_json({{"schedule", "step"}}), ConfigError);
}
