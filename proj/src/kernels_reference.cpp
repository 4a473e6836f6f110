#include "xmreid/kernels.hpp"

namespace xmreid::kernels::reference {

void conv2d_forward(const ConvGeometry& g, std::span<const Real> input, std::span<const Real> weight,
                    std::span<const Real> bias, std::span<Real> output) {
  g.validate();
  const int oh = g.out_h(), ow = g.out_w(), k = g.kernel;
  for (int n = 0; n < g.batch; ++n)
    for (int co = 0; co < g.out_channels; ++co)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          Real acc = bias.empty() ? Real(0) : bias[co];
          for (int ci = 0; ci < g.in_channels; ++ci)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * g.stride + ky - g.pad;
                const int ix = ox * g.stride + kx - g.pad;
                if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
                acc += weight[((co * g.in_channels + ci) * k + ky) * k + kx] *
                       input[((static_cast<std::size_t>(n) * g.in_channels + ci) * g.in_h + iy) * g.in_w + ix];
              }
          output[((static_cast<std::size_t>(n) * g.out_channels + co) * oh + oy) * ow + ox] = acc;
        }
}

void conv2d_backward_input(const ConvGeometry& g, std::span<const Real> weight, std::span<const Real> grad_output,
                           std::span<Real> grad_input) {
  g.validate();
  const int oh = g.out_h(), ow = g.out_w(), k = g.kernel;
  for (int n = 0; n < g.batch; ++n)
    for (int co = 0; co < g.out_channels; ++co)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const Real d = grad_output[((static_cast<std::size_t>(n) * g.out_channels + co) * oh + oy) * ow + ox];
          for (int ci = 0; ci < g.in_channels; ++ci)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * g.stride + ky - g.pad;
                const int ix = ox * g.stride + kx - g.pad;
                if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
                grad_input[((static_cast<std::size_t>(n) * g.in_channels + ci) * g.in_h + iy) * g.in_w + ix] +=
                    d * weight[((co * g.in_channels + ci) * k + ky) * k + kx];
              }
        }
}

void conv2d_backward_weight(const ConvGeometry& g, std::span<const Real> input, std::span<const Real> grad_output,
                            std::span<Real> grad_weight, std::span<Real> grad_bias) {
  g.validate();
  const int oh = g.out_h(), ow = g.out_w(), k = g.kernel;
  for (int n = 0; n < g.batch; ++n)
    for (int co = 0; co < g.out_channels; ++co)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const Real d = grad_output[((static_cast<std::size_t>(n) * g.out_channels + co) * oh + oy) * ow + ox];
          if (!grad_bias.empty()) grad_bias[co] += d;
          for (int ci = 0; ci < g.in_channels; ++ci)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * g.stride + ky - g.pad;
                const int ix = ox * g.stride + kx - g.pad;
                if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
                grad_weight[((co * g.in_channels + ci) * k + ky) * k + kx] +=
                    d * input[((static_cast<std::size_t>(n) * g.in_channels + ci) * g.in_h + iy) * g.in_w + ix];
              }
        }
}

void gemm(int m, int n, int k, std::span<const Real> a, bool trans_a, std::span<const Real> b, bool trans_b,
          std::span<Real> c, bool accumulate) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      Real acc = accumulate ? c[static_cast<std::size_t>(i) * n + j] : Real(0);
      for (int p = 0; p < k; ++p) {
        const Real av = trans_a ? a[static_cast<std::size_t>(p) * m + i] : a[static_cast<std::size_t>(i) * k + p];
        const Real bv = trans_b ? b[static_cast<std::size_t>(j) * k + p] : b[static_cast<std::size_t>(p) * n + j];
        acc += av * bv;
      }
      c[static_cast<std::size_t>(i) * n + j] = acc;
    }
}

}  // namespace xmreid::kernels::reference
