#pragma once

#include <span>

#include "xmreid/tensor.hpp"

// Convolution and dense kernels.
//
// Two implementations share one interface:
//   xmreid::kernels            OpenMP-parallel, im2col + GEMM
//   xmreid::kernels::reference serial direct loops, used as the test oracle
//
// The parallel kernels only split work over independent outputs and reduce
// per-sample partials in sample order, so results are bitwise identical for
// every thread count.
namespace xmreid::kernels {

struct ConvGeometry {
  int batch = 0;
  int in_channels = 0;
  int in_h = 0;
  int in_w = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int pad = 0;

  int out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
  std::size_t input_size() const { return static_cast<std::size_t>(batch) * in_channels * in_h * in_w; }
  std::size_t output_size() const { return static_cast<std::size_t>(batch) * out_channels * out_h() * out_w(); }
  std::size_t weight_size() const {
    return static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel;
  }
  void validate() const;
};

/// out[n, co, y, x] = bias[co] + sum_{ci,ky,kx} w[co, ci, ky, kx] * in[n, ci, y*s+ky-p, x*s+kx-p]
/// `bias` may be empty.
void conv2d_forward(const ConvGeometry& g, std::span<const Real> input, std::span<const Real> weight,
                    std::span<const Real> bias, std::span<Real> output);
/// Accumulates d(loss)/d(input) into `grad_input`.
void conv2d_backward_input(const ConvGeometry& g, std::span<const Real> weight, std::span<const Real> grad_output,
                           std::span<Real> grad_input);
/// Accumulates d(loss)/d(weight) and, if non-empty, d(loss)/d(bias).
void conv2d_backward_weight(const ConvGeometry& g, std::span<const Real> input, std::span<const Real> grad_output,
                            std::span<Real> grad_weight, std::span<Real> grad_bias);

/// C[m x n] (+)= A[m x k] * B[k x n], all row-major. Transposes select A^T / B^T storage.
void gemm(int m, int n, int k, std::span<const Real> a, bool trans_a, std::span<const Real> b, bool trans_b,
          std::span<Real> c, bool accumulate);

/// Number of threads the parallel kernels will use.
int max_threads();
void set_threads(int n);

namespace reference {

void conv2d_forward(const ConvGeometry& g, std::span<const Real> input, std::span<const Real> weight,
                    std::span<const Real> bias, std::span<Real> output);
void conv2d_backward_input(const ConvGeometry& g, std::span<const Real> weight, std::span<const Real> grad_output,
                           std::span<Real> grad_input);
void conv2d_backward_weight(const ConvGeometry& g, std::span<const Real> input, std::span<const Real> grad_output,
                            std::span<Real> grad_weight, std::span<Real> grad_bias);
void gemm(int m, int n, int k, std::span<const Real> a, bool trans_a, std::span<const Real> b, bool trans_b,
          std::span<Real> c, bool accumulate);

}  // namespace reference
}  // namespace xmreid::kernels
