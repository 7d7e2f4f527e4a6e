#include <benchmark/benchmark.h>

#include <random>

#include "rpcss/adversary.hpp"
#include "rpcss/knn.hpp"
#include "rpcss/ot.hpp"
#include "rpcss/qcmb.hpp"
#include "rpcss/scene.hpp"
#include "rpcss/segnet.hpp"

namespace {

using namespace rpcss;

Tensor random_matrix(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor t(Shape{n, d});
  for (std::size_t k = 0; k < t.size(); ++k) t[k] = u(rng);
  return t;
}

PointCloud scene(std::size_t points) {
  SceneConfig cfg;
  cfg.points_per_scene = points;
  cfg.seed = 7;
  return generate_scene(cfg, 0);
}

void BM_Sinkhorn(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const OtProblem p{random_matrix(n, 32, 1), random_matrix(n, 32, 2), {0.05, 200, 1e-6}};
  for (auto _ : state) benchmark::DoNotOptimize(sinkhorn_distance(p).cost);
}
BENCHMARK(BM_Sinkhorn)->Arg(32)->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_SinkhornGradient(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_matrix(n, 32, 1), b = random_matrix(n, 32, 2);
  for (auto _ : state) {
    ad::Tape tape;
    ad::Var x = tape.leaf(a);
    ad::Var loss = sinkhorn_cost(x, tape.constant(b), {0.05, 200, 1e-6});
    tape.backward(loss);
    benchmark::DoNotOptimize(tape.grad(x));
  }
}
BENCHMARK(BM_SinkhornGradient)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_Knn(benchmark::State& state) {
  const PointCloud pc = scene(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(knn_indices(pc.points, 8));
}
BENCHMARK(BM_Knn)->Arg(512)->Arg(2048)->Unit(benchmark::kMicrosecond);

void BM_SegForward(benchmark::State& state) {
  const PointCloud pc = scene(static_cast<std::size_t>(state.range(0)));
  const SegModel model(SegModelConfig{}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(predict(model, pc));
}
BENCHMARK(BM_SegForward)->Arg(512)->Arg(2048)->Unit(benchmark::kMicrosecond);

void BM_CoordinateGradient(benchmark::State& state) {
  const PointCloud pc = scene(512);
  const SegModel model(SegModelConfig{}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(coordinate_gradient(model, pc.points, pc.labels).loss);
}
BENCHMARK(BM_CoordinateGradient)->Unit(benchmark::kMillisecond);

void BM_PgdAttack(benchmark::State& state) {
  const PointCloud pc = scene(512);
  const SegModel model(SegModelConfig{}, 3);
  AttackConfig cfg;
  cfg.alpha = 0.05;
  cfg.iterations = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(pgd_attack(model, pc, pc.labels, cfg).points);
}
BENCHMARK(BM_PgdAttack)->Arg(10)->Unit(benchmark::kMillisecond);

void BM_QualityScore(benchmark::State& state) {
  const Tensor feats = random_matrix(512, 32, 4);
  std::vector<int> labels(512);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 4);
  for (auto _ : state) benchmark::DoNotOptimize(quality_score(feats, labels, QualityConfig{}));
}
BENCHMARK(BM_QualityScore)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
