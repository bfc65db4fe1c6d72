#include <benchmark/benchmark.h>

#include <vector>

#include "sponge/analysis.hpp"
#include "sponge/attack.hpp"
#include "sponge/model.hpp"
#include "sponge/ops.hpp"
#include "sponge/random.hpp"

namespace {

using namespace sponge;

Tensor noise_image(std::uint64_t seed, const Shape& dims = {3, 32, 32}) {
  Rng rng(seed);
  Tensor t(dims);
  for (double& v : t.data()) v = rng.uniform();
  return t;
}

const Model& desknet() {
  static const Model m = [] {
    SynthConfig sc;
    sc.n = 64;
    return calibrate(build(ArchSpec::desknet(1, InitPrior::trained_like())), synth_dataset(sc).images());
  }();
  return m;
}

void BM_Conv2d3x3(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const Tensor x = noise_image(1, {c, 32, 32});
  const Tensor w = noise_image(2, {c, c, 3, 3});
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, w, {}, {1, 1}));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(c * c * 9 * 32 * 32));
}
BENCHMARK(BM_Conv2d3x3)->Arg(3)->Arg(16)->Arg(32);

void BM_Forward(benchmark::State& state) {
  const Model& m = desknet();
  const Tensor x = noise_image(3);
  for (auto _ : state) benchmark::DoNotOptimize(forward(m, x).logits);
}
BENCHMARK(BM_Forward)->Unit(benchmark::kMillisecond);

void BM_QueryDensity(benchmark::State& state) {
  const Model& m = desknet();
  const Tensor x = noise_image(4);
  for (auto _ : state) benchmark::DoNotOptimize(query_density(m, x));
}
BENCHMARK(BM_QueryDensity)->Unit(benchmark::kMillisecond);

void BM_ObjectiveForwardBackward(benchmark::State& state) {
  const Model& m = desknet();
  const Tensor x = noise_image(5);
  for (auto _ : state) benchmark::DoNotOptimize(activation_norm_objective(m, x).value);
}
BENCHMARK(BM_ObjectiveForwardBackward)->Unit(benchmark::kMillisecond);

void BM_KendallTau(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(6);
  std::vector<double> x(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = rng.uniform();
    y[i] = x[i] + rng.normal(0.0, 0.5);
  }
  for (auto _ : state) benchmark::DoNotOptimize(kendall_tau(x, y));
  state.SetComplexityN(static_cast<std::int64_t>(n));
}
BENCHMARK(BM_KendallTau)->RangeMultiplier(4)->Range(256, 65536)->Complexity(benchmark::oNLogN);

void BM_Uniformity(benchmark::State& state) {
  const Tensor x = noise_image(7);
  for (auto _ : state) benchmark::DoNotOptimize(uniformity(x));
}
BENCHMARK(BM_Uniformity);

}  // namespace

BENCHMARK_MAIN();
