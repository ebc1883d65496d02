#include <benchmark/benchmark.h>

#include "gradcast/flow.hpp"
#include "gradcast/rng.hpp"

using namespace gradcast;

namespace {

GrayFrame noise_frame(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  GrayFrame g = GrayFrame::zeros(h, w);
  for (float& v : g.data) v = static_cast<float>(rng.uniform());
  return g;
}

}  // namespace

static void BM_PolynomialExpansion(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const GrayFrame g = noise_frame(n, n, 1);
  for (auto _ : state) {
    auto coeffs = polynomial_expansion(g, 1.2, 5);
    benchmark::DoNotOptimize(coeffs);
  }
  state.SetComplexityN(n);
}
BENCHMARK(BM_PolynomialExpansion)->Arg(16)->Arg(32)->Arg(64)->Complexity();

static void BM_FarnebackFlow(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const GrayFrame a = noise_frame(n, n, 1);
  const GrayFrame b = noise_frame(n, n, 2);
  for (auto _ : state) {
    auto flow = farneback_flow(a, b);
    benchmark::DoNotOptimize(flow);
  }
}
BENCHMARK(BM_FarnebackFlow)->Arg(16)->Arg(32)->Arg(64);

BENCHMARK_MAIN();
