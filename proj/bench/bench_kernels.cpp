// Parallel (im2col + GEMM, OpenMP over samples) against the serial reference
// on the convolution shapes the models actually run.

#include <benchmark/benchmark.h>

#include <random>

#include "xmreid/kernels.hpp"

using namespace xmreid;
using namespace xmreid::kernels;

namespace {

struct Buffers {
  RealBuffer input, weight, bias, output, grad_output, grad_input, grad_weight, grad_bias;
};

Buffers make_buffers(const ConvGeometry& g) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<Real> u(-1, 1);
  auto fill = [&](std::size_t n) {
    RealBuffer v(n);
    for (auto& x : v) x = u(rng);
    return v;
  };
  return {fill(g.input_size()), fill(g.weight_size()), fill(g.out_channels), RealBuffer(g.output_size()),
          fill(g.output_size()), RealBuffer(g.input_size()), RealBuffer(g.weight_size()),
          RealBuffer(g.out_channels)};
}

// Shapes: content-encoder stem, strided downsampling, decoder residual block,
// and the instance-level encoder's strided entry, at batch 16.
ConvGeometry shape(int which) {
  switch (which) {
    case 0: return {16, 3, 64, 32, 8, 5, 1, 2};
    case 1: return {16, 8, 64, 32, 16, 4, 2, 1};
    case 2: return {16, 16, 16, 8, 16, 3, 1, 1};
    default: return {16, 16, 16, 8, 32, 3, 2, 1};
  }
}

const char* shape_name(int which) {
  static const char* names[] = {"stem5x5", "down4x4s2", "res3x3", "instance3x3s2"};
  return names[which];
}

template <bool Parallel>
void BM_forward(benchmark::State& state) {
  const ConvGeometry g = shape(static_cast<int>(state.range(0)));
  Buffers b = make_buffers(g);
  for (auto _ : state) {
    if constexpr (Parallel)
      conv2d_forward(g, b.input, b.weight, b.bias, b.output);
    else
      reference::conv2d_forward(g, b.input, b.weight, b.bias, b.output);
    benchmark::DoNotOptimize(b.output.data());
  }
  state.SetLabel(shape_name(static_cast<int>(state.range(0))));
  state.SetItemsProcessed(state.iterations() * static_cast<long>(g.output_size() * g.in_channels * g.kernel * g.kernel));
}

template <bool Parallel>
void BM_backward(benchmark::State& state) {
  const ConvGeometry g = shape(static_cast<int>(state.range(0)));
  Buffers b = make_buffers(g);
  for (auto _ : state) {
    if constexpr (Parallel) {
      conv2d_backward_input(g, b.weight, b.grad_output, b.grad_input);
      conv2d_backward_weight(g, b.input, b.grad_output, b.grad_weight, b.grad_bias);
    } else {
      reference::conv2d_backward_input(g, b.weight, b.grad_output, b.grad_input);
      reference::conv2d_backward_weight(g, b.input, b.grad_output, b.grad_weight, b.grad_bias);
    }
    benchmark::DoNotOptimize(b.grad_weight.data());
  }
  state.SetLabel(shape_name(static_cast<int>(state.range(0))));
}

template <bool Parallel>
void BM_gemm(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<Real> u(-1, 1);
  RealBuffer a(static_cast<std::size_t>(n) * n), bm(a.size()), c(a.size());
  for (auto& x : a) x = u(rng);
  for (auto& x : bm) x = u(rng);
  for (auto _ : state) {
    if constexpr (Parallel)
      gemm(n, n, n, a, false, bm, true, c, false);
    else
      reference::gemm(n, n, n, a, false, bm, true, c, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2L * n * n * n);
}

}  // namespace

BENCHMARK(BM_forward<true>)->Name("conv_forward/parallel")->DenseRange(0, 3)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_forward<false>)->Name("conv_forward/reference")->DenseRange(0, 3)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_backward<true>)->Name("conv_backward/parallel")->DenseRange(0, 3)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_backward<false>)->Name("conv_backward/reference")->DenseRange(0, 3)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_gemm<true>)->Name("gemm/parallel")->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_gemm<false>)->Name("gemm/reference")->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
