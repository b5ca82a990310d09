#include "tpv/datagen.hpp"
#include "tpv/linalg.hpp"
#include "tpv/mlp.hpp"
#include "tpv/rng.hpp"
#include "tpv/sgd_stationary.hpp"
#include "tpv/trainer.hpp"

#include <benchmark/benchmark.h>

using namespace tpv;

namespace {

Matrix gaussian(Index r, Index c, std::uint64_t seed) {
  CounterRng rng(seed);
  Matrix m(r, c);
  for (Index j = 0; j < c; ++j)
    for (Index i = 0; i < r; ++i) m(i, j) = rng.normal();
  return m;
}

Network student(Index width, Index d) {
  MLPConfig c;
  c.input_dim = d;
  c.hidden_widths = {width};
  c.seed = 3;
  return init_network(c);
}

}  // namespace

static void bm_compact_svd(benchmark::State& state) {
  const Index n = state.range(0);
  const Matrix j = gaussian(n, 4 * n, 1);
  for (auto _ : state) benchmark::DoNotOptimize(compact_svd(j).s);
}
BENCHMARK(bm_compact_svd)->Arg(50)->Arg(200)->Unit(benchmark::kMillisecond);

static void bm_output_jacobian(benchmark::State& state) {
  const Network net = student(state.range(0), 20);
  const Matrix xs = gaussian(256, 20, 2);
  for (auto _ : state) benchmark::DoNotOptimize(output_jacobian(net, xs));
  state.counters["params"] = static_cast<double>(net.params.size());
}
BENCHMARK(bm_output_jacobian)->Arg(128)->Arg(512)->Unit(benchmark::kMillisecond);

static void bm_lyapunov(benchmark::State& state) {
  const Index p = state.range(0);
  const Matrix g = gaussian(p, p, 4);
  const Matrix h = g * g.transpose() / static_cast<double>(p);
  const Matrix a = Matrix::Identity(p, p) - 0.05 * h;
  const Matrix q = 1e-4 * Matrix::Identity(p, p);
  for (auto _ : state) benchmark::DoNotOptimize(discrete_lyapunov_solve(a, q));
}
BENCHMARK(bm_lyapunov)->Arg(11)->Arg(100)->Unit(benchmark::kMicrosecond);

static void bm_train_epoch(benchmark::State& state) {
  const Network net = student(state.range(0), 20);
  const Dataset ds = sample_dataset({TeacherKind::LinearGaussian, 20, 0}, 1000);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.lr = 1e-3;
  for (auto _ : state) benchmark::DoNotOptimize(train_mse(net, ds, cfg).final_params);
}
BENCHMARK(bm_train_epoch)->Arg(128)->Arg(512)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
