#include "xmreid/ops.hpp"

#include <algorithm>
#include <cmath>

#include "xmreid/kernels.hpp"

namespace xmreid::ops {
namespace {

constexpr std::ptrdiff_t kParallelThreshold = 1 << 14;

void require(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw ContractError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                        shape_string(b.shape()));
}

bool wants(const Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }
Tensor& grad_of(Node& self, std::size_t i) { return self.inputs[i]->ensure_grad(); }
const Tensor& value_of(const Node& self, std::size_t i) { return self.inputs[i]->value; }

// Elementwise unary op with derivative expressed through (input, output).
template <typename F, typename D>
Var unary(const Var& x, F f, D df) {
  const Tensor& in = x.value();
  Tensor out(in.shape());
  const auto n = static_cast<std::ptrdiff_t>(in.size());
#pragma omp parallel for if (n > kParallelThreshold)
  for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = f(in[i]);
  return make_result(std::move(out), {x}, [df](Node& self) {
    const Tensor& in = value_of(self, 0);
    Tensor& g = grad_of(self, 0);
    const auto n = static_cast<std::ptrdiff_t>(in.size());
#pragma omp parallel for if (n > kParallelThreshold)
    for (std::ptrdiff_t i = 0; i < n; ++i) g[i] += self.grad[i] * df(in[i], self.value[i]);
  });
}

// Spatial extent (product of dims after the first two).
int spatial_of(const Shape& s) {
  int sp = 1;
  for (std::size_t i = 2; i < s.size(); ++i) sp *= s[i];
  return sp;
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  require(x.value().ndim() == 4 && weight.value().ndim() == 4, "conv2d expects 4-d input and weight");
  kernels::ConvGeometry g;
  g.batch = x.dim(0);
  g.in_channels = x.dim(1);
  g.in_h = x.dim(2);
  g.in_w = x.dim(3);
  g.out_channels = weight.dim(0);
  g.kernel = weight.dim(2);
  g.stride = stride;
  g.pad = pad;
  require(weight.dim(1) == g.in_channels && weight.dim(3) == g.kernel,
          "conv2d weight " + shape_string(weight.shape()) + " incompatible with input " + shape_string(x.shape()));
  require(!bias.defined() || bias.size() == static_cast<std::size_t>(g.out_channels), "conv2d bias size");
  g.validate();

  Tensor out({g.batch, g.out_channels, g.out_h(), g.out_w()});
  kernels::conv2d_forward(g, x.value().span(), weight.value().span(),
                          bias.defined() ? bias.value().span() : std::span<const Real>{}, out.span());
  std::vector<Var> inputs{x, weight};
  const bool has_bias = bias.defined();
  if (has_bias) inputs.push_back(bias);
  return make_result(std::move(out), std::move(inputs), [g, has_bias](Node& self) {
    if (wants(self, 0)) kernels::conv2d_backward_input(g, value_of(self, 1).span(), self.grad.span(),
                                                       grad_of(self, 0).span());
    const bool w = wants(self, 1), b = has_bias && wants(self, 2);
    if (w || b) {
      Tensor scratch_w;
      std::span<Real> gw;
      if (w) {
        gw = grad_of(self, 1).span();
      } else {
        scratch_w = Tensor(value_of(self, 1).shape());
        gw = scratch_w.span();
      }
      kernels::conv2d_backward_weight(g, value_of(self, 0).span(), self.grad.span(), gw,
                                      b ? grad_of(self, 2).span() : std::span<Real>{});
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require(x.value().ndim() == 2 && weight.value().ndim() == 2 && x.dim(1) == weight.dim(1),
          "linear: input " + shape_string(x.shape()) + " vs weight " + shape_string(weight.shape()));
  const int n = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  require(!bias.defined() || bias.size() == static_cast<std::size_t>(out_dim), "linear bias size");
  Tensor out({n, out_dim});
  kernels::gemm(n, out_dim, in, x.value().span(), false, weight.value().span(), true, out.span(), false);
  if (bias.defined())
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < out_dim; ++j) out.at(i, j) += bias.value()[j];
  std::vector<Var> inputs{x, weight};
  const bool has_bias = bias.defined();
  if (has_bias) inputs.push_back(bias);
  return make_result(std::move(out), std::move(inputs), [n, in, out_dim, has_bias](Node& self) {
    if (wants(self, 0))
      kernels::gemm(n, in, out_dim, self.grad.span(), false, value_of(self, 1).span(), false,
                    grad_of(self, 0).span(), true);
    if (wants(self, 1))
      kernels::gemm(out_dim, in, n, self.grad.span(), true, value_of(self, 0).span(), false,
                    grad_of(self, 1).span(), true);
    if (has_bias && wants(self, 2)) {
      Tensor& gb = grad_of(self, 2);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < out_dim; ++j) gb[j] += self.grad.at(i, j);
    }
  });
}

Var relu(const Var& x) {
  return unary(
      x, [](Real v) { return v > 0 ? v : Real(0); }, [](Real v, Real) { return v > 0 ? Real(1) : Real(0); });
}

Var leaky_relu(const Var& x, Real slope) {
  return unary(
      x, [slope](Real v) { return v > 0 ? v : slope * v; },
      [slope](Real v, Real) { return v > 0 ? Real(1) : slope; });
}

Var tanh(const Var& x) {
  return unary(
      x, [](Real v) { return std::tanh(v); }, [](Real, Real y) { return 1 - y * y; });
}

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (wants(self, k)) {
        Tensor& g = grad_of(self, k);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (wants(self, 0)) {
      Tensor& g = grad_of(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      Tensor& g = grad_of(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var scale(const Var& a, Real s) {
  return unary(
      a, [s](Real v) { return v * s; }, [s](Real, Real) { return s; });
}

Var add_scalar(const Var& a, Real s) {
  return unary(
      a, [s](Real v) { return v + s; }, [](Real, Real) { return Real(1); });
}

Var instance_norm(const Var& x, Real eps) {
  require(x.value().ndim() >= 3, "instance_norm expects [N x C x spatial...]");
  const int groups = x.dim(0) * x.dim(1);
  const int sp = spatial_of(x.shape());
  const Tensor& in = x.value();
  Tensor out(in.shape());
  Tensor inv_std({groups});
#pragma omp parallel for if (static_cast<std::ptrdiff_t>(in.size()) > kParallelThreshold)
  for (int gi = 0; gi < groups; ++gi) {
    const Real* src = in.data() + static_cast<std::size_t>(gi) * sp;
    Real* dst = out.data() + static_cast<std::size_t>(gi) * sp;
    Real mu = 0;
    for (int i = 0; i < sp; ++i) mu += src[i];
    mu /= sp;
    Real var = 0;
    for (int i = 0; i < sp; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= sp;
    const Real is = 1 / std::sqrt(var + eps);
    inv_std[gi] = is;
    for (int i = 0; i < sp; ++i) dst[i] = (src[i] - mu) * is;
  }
  return make_result(std::move(out), {x}, [groups, sp, inv_std](Node& self) {
    Tensor& g = grad_of(self, 0);
#pragma omp parallel for if (static_cast<std::ptrdiff_t>(g.size()) > kParallelThreshold)
    for (int gi = 0; gi < groups; ++gi) {
      const Real* dy = self.grad.data() + static_cast<std::size_t>(gi) * sp;
      const Real* xh = self.value.data() + static_cast<std::size_t>(gi) * sp;
      Real* dx = g.data() + static_cast<std::size_t>(gi) * sp;
      Real mean_dy = 0, mean_dy_xh = 0;
      for (int i = 0; i < sp; ++i) {
        mean_dy += dy[i];
        mean_dy_xh += dy[i] * xh[i];
      }
      mean_dy /= sp;
      mean_dy_xh /= sp;
      for (int i = 0; i < sp; ++i) dx[i] += inv_std[gi] * (dy[i] - mean_dy - xh[i] * mean_dy_xh);
    }
  });
}

Var channel_affine(const Var& x, const Var& scale_v, const Var& shift) {
  require(x.value().ndim() >= 2, "channel_affine expects [N x C x ...]");
  const int n = x.dim(0), c = x.dim(1), sp = spatial_of(x.shape());
  const Shape nc{n, c};
  require(scale_v.shape() == nc && shift.shape() == nc,
          "channel_affine: scale/shift must be " + shape_string(nc));
  const Tensor& in = x.value();
  Tensor out(in.shape());
  for (int gi = 0; gi < n * c; ++gi) {
    const Real a = scale_v.value()[gi], b = shift.value()[gi];
    for (int i = 0; i < sp; ++i) out[static_cast<std::size_t>(gi) * sp + i] = in[static_cast<std::size_t>(gi) * sp + i] * a + b;
  }
  return make_result(std::move(out), {x, scale_v, shift}, [n, c, sp](Node& self) {
    const Tensor& in = value_of(self, 0);
    const Tensor& a = value_of(self, 1);
    const bool gx = wants(self, 0), ga = wants(self, 1), gb = wants(self, 2);
    for (int gi = 0; gi < n * c; ++gi) {
      const std::size_t base = static_cast<std::size_t>(gi) * sp;
      Real sa = 0, sb = 0;
      for (int i = 0; i < sp; ++i) {
        const Real dy = self.grad[base + i];
        sa += dy * in[base + i];
        sb += dy;
      }
      if (gx) {
        Tensor& g = grad_of(self, 0);
        for (int i = 0; i < sp; ++i) g[base + i] += self.grad[base + i] * a[gi];
      }
      if (ga) grad_of(self, 1)[gi] += sa;
      if (gb) grad_of(self, 2)[gi] += sb;
    }
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats, bool training,
               Real momentum, Real eps) {
  require(x.value().ndim() >= 2, "batch_norm expects [N x C x ...]");
  const int n = x.dim(0), c = x.dim(1), sp = spatial_of(x.shape());
  require(gamma.size() == static_cast<std::size_t>(c) && beta.size() == static_cast<std::size_t>(c),
          "batch_norm affine size");
  require(stats.running_mean.size() == static_cast<std::size_t>(c) &&
              stats.running_var.size() == static_cast<std::size_t>(c),
          "batch_norm running statistics size");
  const std::size_t count = static_cast<std::size_t>(n) * sp;
  if (training) require(count > 1, "batch_norm in training mode needs more than one value per channel");
  const Tensor& in = x.value();
  Tensor xhat(in.shape());
  Tensor inv_std({c});
  for (int ch = 0; ch < c; ++ch) {
    Real mu, var;
    if (training) {
      mu = 0;
      for (int i = 0; i < n; ++i)
        for (int s = 0; s < sp; ++s) mu += in[(static_cast<std::size_t>(i) * c + ch) * sp + s];
      mu /= static_cast<Real>(count);
      var = 0;
      for (int i = 0; i < n; ++i)
        for (int s = 0; s < sp; ++s) {
          const Real d = in[(static_cast<std::size_t>(i) * c + ch) * sp + s] - mu;
          var += d * d;
        }
      var /= static_cast<Real>(count);
      stats.running_mean[ch] = (1 - momentum) * stats.running_mean[ch] + momentum * mu;
      stats.running_var[ch] = (1 - momentum) * stats.running_var[ch] +
                              momentum * var * static_cast<Real>(count) / static_cast<Real>(count - 1);
    } else {
      mu = stats.running_mean[ch];
      var = stats.running_var[ch];
    }
    const Real is = 1 / std::sqrt(var + eps);
    inv_std[ch] = is;
    for (int i = 0; i < n; ++i)
      for (int s = 0; s < sp; ++s) {
        const std::size_t k = (static_cast<std::size_t>(i) * c + ch) * sp + s;
        xhat[k] = (in[k] - mu) * is;
      }
  }
  Tensor out(in.shape());
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int s = 0; s < sp; ++s) {
        const std::size_t k = (static_cast<std::size_t>(i) * c + ch) * sp + s;
        out[k] = xhat[k] * gamma.value()[ch] + beta.value()[ch];
      }
  return make_result(std::move(out), {x, gamma, beta}, [n, c, sp, count, training, xhat, inv_std](Node& self) {
    const Tensor& gam = value_of(self, 1);
    for (int ch = 0; ch < c; ++ch) {
      Real sum_dy = 0, sum_dy_xh = 0;
      for (int i = 0; i < n; ++i)
        for (int s = 0; s < sp; ++s) {
          const std::size_t k = (static_cast<std::size_t>(i) * c + ch) * sp + s;
          sum_dy += self.grad[k];
          sum_dy_xh += self.grad[k] * xhat[k];
        }
      if (wants(self, 1)) grad_of(self, 1)[ch] += sum_dy_xh;
      if (wants(self, 2)) grad_of(self, 2)[ch] += sum_dy;
      if (wants(self, 0)) {
        Tensor& g = grad_of(self, 0);
        const Real scale_ch = gam[ch] * inv_std[ch];
        const Real mdy = sum_dy / static_cast<Real>(count), mdyx = sum_dy_xh / static_cast<Real>(count);
        for (int i = 0; i < n; ++i)
          for (int s = 0; s < sp; ++s) {
            const std::size_t k = (static_cast<std::size_t>(i) * c + ch) * sp + s;
            g[k] += training ? scale_ch * (self.grad[k] - mdy - xhat[k] * mdyx) : scale_ch * self.grad[k];
          }
      }
    }
  });
}

Var upsample_nearest2x(const Var& x) {
  require(x.value().ndim() == 4, "upsample expects NCHW");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out({n, c, 2 * h, 2 * w});
  const Tensor& in = x.value();
#pragma omp parallel for if (static_cast<std::ptrdiff_t>(out.size()) > kParallelThreshold)
  for (int gi = 0; gi < n * c; ++gi)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        out[(static_cast<std::size_t>(gi) * 2 * h + y) * 2 * w + xx] =
            in[(static_cast<std::size_t>(gi) * h + y / 2) * w + xx / 2];
  return make_result(std::move(out), {x}, [n, c, h, w](Node& self) {
    Tensor& g = grad_of(self, 0);
#pragma omp parallel for if (static_cast<std::ptrdiff_t>(self.grad.size()) > kParallelThreshold)
    for (int gi = 0; gi < n * c; ++gi)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const std::size_t base = (static_cast<std::size_t>(gi) * 2 * h + 2 * y) * 2 * w + 2 * xx;
          g[(static_cast<std::size_t>(gi) * h + y) * w + xx] +=
              self.grad[base] + self.grad[base + 1] + self.grad[base + 2 * w] + self.grad[base + 2 * w + 1];
        }
  });
}

Var global_avg_pool(const Var& x) {
  require(x.value().ndim() >= 3, "global_avg_pool expects [N x C x spatial...]");
  const int n = x.dim(0), c = x.dim(1), sp = spatial_of(x.shape());
  Tensor out({n, c});
  for (int gi = 0; gi < n * c; ++gi) {
    Real acc = 0;
    for (int s = 0; s < sp; ++s) acc += x.value()[static_cast<std::size_t>(gi) * sp + s];
    out[gi] = acc / sp;
  }
  return make_result(std::move(out), {x}, [n, c, sp](Node& self) {
    Tensor& g = grad_of(self, 0);
    for (int gi = 0; gi < n * c; ++gi) {
      const Real d = self.grad[gi] / sp;
      for (int s = 0; s < sp; ++s) g[static_cast<std::size_t>(gi) * sp + s] += d;
    }
  });
}

Var repeat_channels(const Var& x, int times) {
  require(x.value().ndim() == 4 && x.dim(1) == 1 && times >= 1, "repeat_channels expects [N x 1 x H x W]");
  const int n = x.dim(0), sp = x.dim(2) * x.dim(3);
  Tensor out({n, times, x.dim(2), x.dim(3)});
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < times; ++t)
      std::copy_n(x.value().data() + static_cast<std::size_t>(i) * sp, sp,
                  out.data() + (static_cast<std::size_t>(i) * times + t) * sp);
  return make_result(std::move(out), {x}, [n, sp, times](Node& self) {
    Tensor& g = grad_of(self, 0);
    for (int i = 0; i < n; ++i)
      for (int t = 0; t < times; ++t)
        for (int s = 0; s < sp; ++s)
          g[static_cast<std::size_t>(i) * sp + s] += self.grad[(static_cast<std::size_t>(i) * times + t) * sp + s];
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows of nothing");
  std::vector<Tensor> values;
  values.reserve(parts.size());
  for (const auto& p : parts) values.push_back(p.value());
  Tensor out = xmreid::concat_rows(values);
  std::vector<std::size_t> offsets{0};
  for (const auto& p : parts) offsets.push_back(offsets.back() + p.size());
  return make_result(std::move(out), parts, [offsets](Node& self) {
    for (std::size_t k = 0; k + 1 < offsets.size(); ++k) {
      if (!wants(self, k)) continue;
      Tensor& g = grad_of(self, k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[k] + i];
    }
  });
}

Var slice_rows(const Var& x, int begin, int end) {
  Tensor out = xmreid::slice_rows(x.value(), begin, end);
  const std::size_t row = x.size() / static_cast<std::size_t>(std::max(1, x.dim(0)));
  const std::size_t offset = row * static_cast<std::size_t>(begin);
  return make_result(std::move(out), {x}, [offset](Node& self) {
    Tensor& g = grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[offset + i] += self.grad[i];
  });
}

Var gather_rows(const Var& x, std::span<const int> index) {
  require(x.value().ndim() >= 1, "gather_rows on scalar");
  const int rows = x.dim(0);
  const std::size_t row = x.size() / static_cast<std::size_t>(std::max(1, rows));
  Shape s = x.shape();
  s[0] = static_cast<int>(index.size());
  Tensor out(s);
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] >= 0 && index[i] < rows, "gather_rows index out of range");
    std::copy_n(x.value().data() + row * index[i], row, out.data() + row * i);
  }
  std::vector<int> idx(index.begin(), index.end());
  return make_result(std::move(out), {x}, [idx, row](Node& self) {
    Tensor& g = grad_of(self, 0);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t k = 0; k < row; ++k) g[row * idx[i] + k] += self.grad[row * i + k];
  });
}

Var slice_cols(const Var& x, int begin, int end) {
  require(x.value().ndim() == 2 && begin >= 0 && begin <= end && end <= x.dim(1), "slice_cols out of range");
  const int n = x.dim(0), k = x.dim(1), w = end - begin;
  Tensor out({n, w});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < w; ++j) out.at(i, j) = x.value().at(i, begin + j);
  return make_result(std::move(out), {x}, [n, k, w, begin](Node& self) {
    Tensor& g = grad_of(self, 0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < w; ++j) g[static_cast<std::size_t>(i) * k + begin + j] += self.grad.at(i, j);
  });
}

Var take(const Var& x, std::span<const std::size_t> index) {
  Tensor out({static_cast<int>(index.size())});
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] < x.size(), "take index out of range");
    out[i] = x.value()[index[i]];
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result(std::move(out), {x}, [idx](Node& self) {
    Tensor& g = grad_of(self, 0);
    for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += self.grad[i];
  });
}

Var reshape(const Var& x, Shape shape) {
  return make_result(x.value().reshaped(std::move(shape)), {x}, [](Node& self) {
    Tensor& g = grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var sum(const Var& x) {
  Real acc = 0;
  for (Real v : x.value().values()) acc += v;
  return make_result(Tensor::scalar(acc), {x}, [](Node& self) {
    Tensor& g = grad_of(self, 0);
    const Real d = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d;
  });
}

Var mean(const Var& x) {
  require(x.size() > 0, "mean of empty tensor");
  return scale(sum(x), Real(1) / static_cast<Real>(x.size()));
}

Var l1_loss(const Var& a, const Var& b) {
  require_same(a, b, "l1_loss");
  const std::size_t n = a.size();
  Real acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += std::abs(a.value()[i] - b.value()[i]);
  return make_result(Tensor::scalar(acc / static_cast<Real>(n)), {a, b}, [n](Node& self) {
    const Tensor& av = value_of(self, 0);
    const Tensor& bv = value_of(self, 1);
    const Real d = self.grad[0] / static_cast<Real>(n);
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants(self, k)) continue;
      Tensor& g = grad_of(self, k);
      const Real sign = k == 0 ? 1 : -1;
      for (std::size_t i = 0; i < n; ++i) {
        const Real diff = av[i] - bv[i];
        g[i] += sign * d * (diff > 0 ? Real(1) : diff < 0 ? Real(-1) : Real(0));
      }
    }
  });
}

Var squared_error_to(const Var& x, Real target) {
  const std::size_t n = x.size();
  require(n > 0, "squared_error_to of empty tensor");
  Real acc = 0;
  for (Real v : x.value().values()) acc += (v - target) * (v - target);
  return make_result(Tensor::scalar(acc / static_cast<Real>(n)), {x}, [n, target](Node& self) {
    Tensor& g = grad_of(self, 0);
    const Real d = 2 * self.grad[0] / static_cast<Real>(n);
    for (std::size_t i = 0; i < n; ++i) g[i] += d * (value_of(self, 0)[i] - target);
  });
}

Var bce_with_logits(const Var& x, Real target) {
  const std::size_t n = x.size();
  require(n > 0, "bce_with_logits of empty tensor");
  Real acc = 0;
  for (Real v : x.value().values()) {
    // log(1 + e^v) - t v, evaluated stably
    const Real softplus = std::max(v, Real(0)) + std::log1p(std::exp(-std::abs(v)));
    acc += softplus - target * v;
  }
  return make_result(Tensor::scalar(acc / static_cast<Real>(n)), {x}, [n, target](Node& self) {
    Tensor& g = grad_of(self, 0);
    const Real d = self.grad[0] / static_cast<Real>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const Real s = 1 / (1 + std::exp(-value_of(self, 0)[i]));
      g[i] += d * (s - target);
    }
  });
}

Var log_softmax(const Var& logits) {
  require(logits.value().ndim() == 2, "log_softmax expects [N x K]");
  const int n = logits.dim(0), k = logits.dim(1);
  Tensor out({n, k});
  for (int i = 0; i < n; ++i) {
    Real mx = logits.value().at(i, 0);
    for (int j = 1; j < k; ++j) mx = std::max(mx, logits.value().at(i, j));
    Real s = 0;
    for (int j = 0; j < k; ++j) s += std::exp(logits.value().at(i, j) - mx);
    const Real lse = mx + std::log(s);
    for (int j = 0; j < k; ++j) out.at(i, j) = logits.value().at(i, j) - lse;
  }
  return make_result(std::move(out), {logits}, [n, k](Node& self) {
    Tensor& g = grad_of(self, 0);
    for (int i = 0; i < n; ++i) {
      Real gs = 0;
      for (int j = 0; j < k; ++j) gs += self.grad.at(i, j);
      for (int j = 0; j < k; ++j) g.at(i, j) += self.grad.at(i, j) - std::exp(self.value.at(i, j)) * gs;
    }
  });
}

Var softmax(const Var& logits) {
  Var lp = log_softmax(logits);
  Tensor out(lp.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(lp.value()[i]);
  return make_result(std::move(out), {lp}, [](Node& self) {
    // d exp(l) = exp(l) dl
    Tensor& g = grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

Var nll(const Var& log_probs, std::span<const int> labels) {
  require(log_probs.value().ndim() == 2, "nll expects [N x K]");
  const int n = log_probs.dim(0), k = log_probs.dim(1);
  require(static_cast<int>(labels.size()) == n, "nll: one label per row required");
  for (int y : labels)
    if (y < 0 || y >= k)
      throw ContractError("label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
  Real acc = 0;
  for (int i = 0; i < n; ++i) acc -= log_probs.value().at(i, labels[i]);
  std::vector<int> y(labels.begin(), labels.end());
  return make_result(Tensor::scalar(acc / n), {log_probs}, [y, n](Node& self) {
    Tensor& g = grad_of(self, 0);
    for (int i = 0; i < n; ++i) g.at(i, y[i]) -= self.grad[0] / n;
  });
}

Var kl_rows(const Var& p, const Var& q, Real eps) {
  require_same(p, q, "kl_rows");
  require(p.value().ndim() == 2, "kl_rows expects [N x K]");
  const int n = p.dim(0), k = p.dim(1);
  require(n > 0, "kl_rows of empty batch");
  // Floored, renormalized copies plus their normalizers.
  auto floor_norm = [&](const Tensor& t, Tensor& out, std::vector<Real>& norm) {
    out = Tensor(t.shape());
    norm.assign(n, 0);
    for (int i = 0; i < n; ++i) {
      Real s = 0;
      for (int j = 0; j < k; ++j) {
        if (!std::isfinite(t.at(i, j))) throw NumericError("kl_rows: non-finite probability");
        out.at(i, j) = std::max(t.at(i, j), eps);
        s += out.at(i, j);
      }
      norm[i] = s;
      for (int j = 0; j < k; ++j) out.at(i, j) /= s;
    }
  };
  Tensor a, b;
  std::vector<Real> sa, sb;
  floor_norm(p.value(), a, sa);
  floor_norm(q.value(), b, sb);
  Real acc = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) acc += a.at(i, j) * (std::log(a.at(i, j)) - std::log(b.at(i, j)));
  return make_result(Tensor::scalar(acc / n), {p, q}, [a, b, sa, sb, n, k, eps](Node& self) {
    const Real d = self.grad[0] / n;
    // Chain through renormalization a = f/S: dL/df_j = (g_j - sum_l g_l a_l) / S.
    auto push = [&](std::size_t which, const Tensor& raw, const Tensor& norm_t, const std::vector<Real>& s,
                    auto local_grad) {
      Tensor& g = grad_of(self, which);
      for (int i = 0; i < n; ++i) {
        Real dot = 0;
        for (int j = 0; j < k; ++j) dot += local_grad(i, j) * norm_t.at(i, j);
        for (int j = 0; j < k; ++j)
          if (raw.at(i, j) > eps) g.at(i, j) += d * (local_grad(i, j) - dot) / s[i];
      }
    };
    if (wants(self, 0))
      push(0, value_of(self, 0), a, sa,
           [&](int i, int j) { return std::log(a.at(i, j)) - std::log(b.at(i, j)) + 1; });
    if (wants(self, 1)) push(1, value_of(self, 1), b, sb, [&](int i, int j) { return -a.at(i, j) / b.at(i, j); });
  });
}

Var pairwise_distance(const Var& x, Real eps) {
  require(x.value().ndim() == 2, "pairwise_distance expects [N x D]");
  const int n = x.dim(0), d = x.dim(1);
  Tensor out({n, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      Real s = 0;
      for (int t = 0; t < d; ++t) {
        const Real diff = x.value().at(i, t) - x.value().at(j, t);
        s += diff * diff;
      }
      out.at(i, j) = std::sqrt(s + eps);
    }
  return make_result(std::move(out), {x}, [n, d](Node& self) {
    const Tensor& xv = value_of(self, 0);
    Tensor& g = grad_of(self, 0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const Real gij = self.grad.at(i, j);
        if (gij == 0 || i == j) continue;
        const Real coef = gij / self.value.at(i, j);
        for (int t = 0; t < d; ++t) {
          const Real diff = xv.at(i, t) - xv.at(j, t);
          g.at(i, t) += coef * diff;
          g.at(j, t) -= coef * diff;
        }
      }
  });
}

Var normalize_rows(const Var& x, Real eps) {
  require(x.value().ndim() == 2, "normalize_rows expects [N x D]");
  const int n = x.dim(0), d = x.dim(1);
  Tensor out({n, d});
  std::vector<Real> norms(n);
  for (int i = 0; i < n; ++i) {
    Real s = 0;
    for (int t = 0; t < d; ++t) s += x.value().at(i, t) * x.value().at(i, t);
    norms[i] = std::sqrt(s + eps);
    for (int t = 0; t < d; ++t) out.at(i, t) = x.value().at(i, t) / norms[i];
  }
  return make_result(std::move(out), {x}, [n, d, norms](Node& self) {
    Tensor& g = grad_of(self, 0);
    for (int i = 0; i < n; ++i) {
      Real dot = 0;
      for (int t = 0; t < d; ++t) dot += self.grad.at(i, t) * self.value.at(i, t);
      for (int t = 0; t < d; ++t) g.at(i, t) += (self.grad.at(i, t) - dot * self.value.at(i, t)) / norms[i];
    }
  });
}

}  // namespace xmreid::ops
