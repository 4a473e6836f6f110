#include "xmreid/kernels.hpp"

#include <Eigen/Core>
#include <omp.h>

#include <algorithm>
#include <vector>

namespace xmreid::kernels {
namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

bool is_pointwise(const ConvGeometry& g) { return g.kernel == 1 && g.stride == 1 && g.pad == 0; }

// Output columns [lo, hi) read inside the image for kernel column kx.
void valid_range(const ConvGeometry& g, int kx, int ow, int& lo, int& hi) {
  const int shift = kx - g.pad;
  lo = shift >= 0 ? 0 : (-shift + g.stride - 1) / g.stride;
  const int last = g.in_w - 1 - shift;
  hi = last < 0 ? 0 : std::min(ow, last / g.stride + 1);
  lo = std::min(lo, hi);
}

// cols[(ci*k + ky)*k + kx][oy*ow + ox]
void im2col(const ConvGeometry& g, const Real* in, Real* cols) {
  const int oh = g.out_h(), ow = g.out_w(), k = g.kernel, s = g.stride;
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  for (int ci = 0; ci < g.in_channels; ++ci) {
    const Real* src = in + static_cast<std::size_t>(ci) * g.in_h * g.in_w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        Real* dst = cols + (static_cast<std::size_t>(ci * k + ky) * k + kx) * plane;
        int lo, hi;
        valid_range(g, kx, ow, lo, hi);
        const int shift = kx - g.pad;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s + ky - g.pad;
          Real* row = dst + static_cast<std::size_t>(oy) * ow;
          if (iy < 0 || iy >= g.in_h) {
            std::fill(row, row + ow, Real(0));
            continue;
          }
          std::fill(row, row + lo, Real(0));
          std::fill(row + hi, row + ow, Real(0));
          if (lo == hi) continue;
          const Real* srow = src + static_cast<std::size_t>(iy) * g.in_w + (lo * s + shift);
          if (s == 1)
            std::copy(srow, srow + (hi - lo), row + lo);
          else
            for (int ox = lo; ox < hi; ++ox) row[ox] = srow[(ox - lo) * s];
        }
      }
    }
  }
}

void col2im_accumulate(const ConvGeometry& g, const Real* cols, Real* in) {
  const int oh = g.out_h(), ow = g.out_w(), k = g.kernel, s = g.stride;
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  for (int ci = 0; ci < g.in_channels; ++ci) {
    Real* dst = in + static_cast<std::size_t>(ci) * g.in_h * g.in_w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const Real* src = cols + (static_cast<std::size_t>(ci * k + ky) * k + kx) * plane;
        int lo, hi;
        valid_range(g, kx, ow, lo, hi);
        const int shift = kx - g.pad;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s + ky - g.pad;
          if (iy < 0 || iy >= g.in_h || lo == hi) continue;
          Real* drow = dst + static_cast<std::size_t>(iy) * g.in_w + (lo * s + shift);
          const Real* row = src + static_cast<std::size_t>(oy) * ow;
          for (int ox = lo; ox < hi; ++ox) drow[(ox - lo) * s] += row[ox];
        }
      }
    }
  }
}

}  // namespace

void ConvGeometry::validate() const {
  if (batch <= 0 || in_channels <= 0 || out_channels <= 0 || kernel <= 0 || stride <= 0 || pad < 0)
    throw ContractError("invalid convolution geometry");
  if (in_h + 2 * pad < kernel || in_w + 2 * pad < kernel)
    throw ContractError("convolution kernel larger than padded input");
}

int max_threads() { return omp_get_max_threads(); }
void set_threads(int n) { omp_set_num_threads(std::max(1, n)); }

void gemm(int m, int n, int k, std::span<const Real> a, bool trans_a, std::span<const Real> b, bool trans_b,
          std::span<Real> c, bool accumulate) {
  MutMap cm(c.data(), m, n);
  if (!accumulate) cm.setZero();
  if (!trans_a && !trans_b)
    cm.noalias() += ConstMap(a.data(), m, k) * ConstMap(b.data(), k, n);
  else if (trans_a && !trans_b)
    cm.noalias() += ConstMap(a.data(), k, m).transpose() * ConstMap(b.data(), k, n);
  else if (!trans_a && trans_b)
    cm.noalias() += ConstMap(a.data(), m, k) * ConstMap(b.data(), n, k).transpose();
  else
    cm.noalias() += ConstMap(a.data(), k, m).transpose() * ConstMap(b.data(), n, k).transpose();
}

void conv2d_forward(const ConvGeometry& g, std::span<const Real> input, std::span<const Real> weight,
                    std::span<const Real> bias, std::span<Real> output) {
  g.validate();
  const int oh = g.out_h(), ow = g.out_w();
  const int plane = oh * ow;
  const int kdim = g.in_channels * g.kernel * g.kernel;
  const std::size_t in_stride = static_cast<std::size_t>(g.in_channels) * g.in_h * g.in_w;
  const std::size_t out_stride = static_cast<std::size_t>(g.out_channels) * plane;
  const bool pointwise = is_pointwise(g);

#pragma omp parallel
  {
    RealBuffer cols(pointwise ? 0 : static_cast<std::size_t>(kdim) * plane);
#pragma omp for schedule(static)
    for (int n = 0; n < g.batch; ++n) {
      const Real* in = input.data() + n * in_stride;
      const Real* src = in;
      if (!pointwise) {
        im2col(g, in, cols.data());
        src = cols.data();
      }
      MutMap out(output.data() + n * out_stride, g.out_channels, plane);
      out.noalias() = ConstMap(weight.data(), g.out_channels, kdim) * ConstMap(src, kdim, plane);
      if (!bias.empty())
        for (int co = 0; co < g.out_channels; ++co) out.row(co).array() += bias[co];
    }
  }
}

void conv2d_backward_input(const ConvGeometry& g, std::span<const Real> weight, std::span<const Real> grad_output,
                           std::span<Real> grad_input) {
  g.validate();
  const int plane = g.out_h() * g.out_w();
  const int kdim = g.in_channels * g.kernel * g.kernel;
  const std::size_t in_stride = static_cast<std::size_t>(g.in_channels) * g.in_h * g.in_w;
  const std::size_t out_stride = static_cast<std::size_t>(g.out_channels) * plane;
  const bool pointwise = is_pointwise(g);

#pragma omp parallel
  {
    RealBuffer cols(pointwise ? 0 : static_cast<std::size_t>(kdim) * plane);
#pragma omp for schedule(static)
    for (int n = 0; n < g.batch; ++n) {
      ConstMap dout(grad_output.data() + n * out_stride, g.out_channels, plane);
      ConstMap w(weight.data(), g.out_channels, kdim);
      if (pointwise) {
        MutMap din(grad_input.data() + n * in_stride, kdim, plane);
        din.noalias() += w.transpose() * dout;
      } else {
        MutMap dcols(cols.data(), kdim, plane);
        dcols.noalias() = w.transpose() * dout;
        col2im_accumulate(g, cols.data(), grad_input.data() + n * in_stride);
      }
    }
  }
}

void conv2d_backward_weight(const ConvGeometry& g, std::span<const Real> input, std::span<const Real> grad_output,
                            std::span<Real> grad_weight, std::span<Real> grad_bias) {
  g.validate();
  const int plane = g.out_h() * g.out_w();
  const int kdim = g.in_channels * g.kernel * g.kernel;
  const std::size_t wsize = g.weight_size();
  const std::size_t in_stride = static_cast<std::size_t>(g.in_channels) * g.in_h * g.in_w;
  const std::size_t out_stride = static_cast<std::size_t>(g.out_channels) * plane;
  const bool pointwise = is_pointwise(g);

  // Per-sample partials, summed afterwards in sample order.
  RealBuffer partial(wsize * g.batch);
  RealBuffer bias_partial(grad_bias.empty() ? 0 : static_cast<std::size_t>(g.out_channels) * g.batch);

#pragma omp parallel
  {
    RealBuffer cols(pointwise ? 0 : static_cast<std::size_t>(kdim) * plane);
#pragma omp for schedule(static)
    for (int n = 0; n < g.batch; ++n) {
      const Real* in = input.data() + n * in_stride;
      const Real* src = in;
      if (!pointwise) {
        im2col(g, in, cols.data());
        src = cols.data();
      }
      ConstMap dout(grad_output.data() + n * out_stride, g.out_channels, plane);
      MutMap dw(partial.data() + n * wsize, g.out_channels, kdim);
      dw.noalias() = dout * ConstMap(src, kdim, plane).transpose();
      if (!bias_partial.empty())
        for (int co = 0; co < g.out_channels; ++co) bias_partial[n * g.out_channels + co] = dout.row(co).sum();
    }
  }

  const auto total = static_cast<std::ptrdiff_t>(wsize);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < total; ++i) {
    Real acc = 0;
    for (int n = 0; n < g.batch; ++n) acc += partial[n * wsize + i];
    grad_weight[i] += acc;
  }
  if (!grad_bias.empty()) {
    for (int co = 0; co < g.out_channels; ++co) {
      Real acc = 0;
      for (int n = 0; n < g.batch; ++n) acc += bias_partial[n * g.out_channels + co];
      grad_bias[co] += acc;
    }
  }
}

}  // namespace xmreid::kernels
