// SPDX-License-Identifier: Apache-2.0
// Parallel im2col kernels against the direct loop nests, on the desk model's
// layer shapes.
#include <benchmark/benchmark.h>

#include <random>

#include "vital/kernels.hpp"

namespace {

using vital::FeatureMap;
using vital::Shape3;
using vital::kernels::ConvGeometry;

struct Case {
  ConvGeometry g;
  Shape3 in;
  std::vector<double> w;
  std::vector<double> b;
  FeatureMap x;
  FeatureMap dy;
};

Case make_case(const benchmark::State& state) {
  const int cin = static_cast<int>(state.range(0));
  const int cout = static_cast<int>(state.range(1));
  const int side = static_cast<int>(state.range(2));
  Case c;
  c.g = ConvGeometry{cin, cout, 3, 1, 1};
  c.in = Shape3{cin, side, side};
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0.0, 1.0);
  c.w.resize(c.g.weight_count());
  for (double& v : c.w) v = n(rng);
  c.b.assign(static_cast<std::size_t>(cout), 0.1);
  c.x = FeatureMap(c.in);
  for (double& v : c.x.values()) v = n(rng);
  c.dy = FeatureMap(c.g.output_shape(c.in));
  for (double& v : c.dy.values()) v = n(rng);
  return c;
}

template <bool Parallel>
void BM_Forward(benchmark::State& state) {
  const Case c = make_case(state);
  for (auto _ : state) {
    FeatureMap y = Parallel ? vital::kernels::conv2d_forward(c.g, c.w, c.b, c.x)
                            : vital::kernels::reference::conv2d_forward(c.g, c.w, c.b, c.x);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_BackwardInput(benchmark::State& state) {
  const Case c = make_case(state);
  for (auto _ : state) {
    FeatureMap dx = Parallel
                        ? vital::kernels::conv2d_backward_input(c.g, c.w, c.dy, c.in)
                        : vital::kernels::reference::conv2d_backward_input(c.g, c.w, c.dy, c.in);
    benchmark::DoNotOptimize(dx.data());
  }
}

template <bool Parallel>
void BM_BackwardParams(benchmark::State& state) {
  const Case c = make_case(state);
  std::vector<double> gw(c.w.size());
  std::vector<double> gb(c.b.size());
  for (auto _ : state) {
    if (Parallel) {
      vital::kernels::conv2d_backward_params(c.g, c.x, c.dy, gw, gb);
    } else {
      vital::kernels::reference::conv2d_backward_params(c.g, c.x, c.dy, gw, gb);
    }
    benchmark::DoNotOptimize(gw.data());
  }
}

void shapes(benchmark::internal::Benchmark* b) {
  b->Args({3, 8, 32})->Args({8, 16, 16})->Args({16, 32, 8})->Args({32, 32, 4});
}

}  // namespace

BENCHMARK(BM_Forward<true>)->Name("conv_forward/parallel")->Apply(shapes);
BENCHMARK(BM_Forward<false>)->Name("conv_forward/reference")->Apply(shapes);
BENCHMARK(BM_BackwardInput<true>)->Name("conv_backward_input/parallel")->Apply(shapes);
BENCHMARK(BM_BackwardInput<false>)->Name("conv_backward_input/reference")->Apply(shapes);
BENCHMARK(BM_BackwardParams<true>)->Name("conv_backward_params/parallel")->Apply(shapes);
BENCHMARK(BM_BackwardParams<false>)->Name("conv_backward_params/reference")->Apply(shapes);

BENCHMARK_MAIN();
