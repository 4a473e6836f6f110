#include "xmreid/nn.hpp"

#include <cmath>

namespace xmreid::nn {
namespace {

Tensor normal_tensor(Shape shape, Real stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<Real> dist(0, stddev);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace

std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

std::vector<NamedParam> Module::parameters(const std::string& prefix) {
  std::vector<NamedParam> p;
  std::vector<NamedBuffer> b;
  collect(prefix, p, b);
  return p;
}

std::vector<NamedBuffer> Module::buffers(const std::string& prefix) {
  std::vector<NamedParam> p;
  std::vector<NamedBuffer> b;
  collect(prefix, p, b);
  return b;
}

std::size_t Module::parameter_count() {
  std::size_t n = 0;
  for (auto& p : parameters()) n += p.var.size();
  return n;
}

void Module::copy_values_from(Module& other) {
  auto mine = parameters();
  auto theirs = other.parameters();
  auto my_buf = buffers();
  auto their_buf = other.buffers();
  if (mine.size() != theirs.size() || my_buf.size() != their_buf.size())
    throw ContractError("copy_values_from: module structures differ");
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i].var.shape() != theirs[i].var.shape())
      throw ContractError("copy_values_from: shape mismatch at " + mine[i].name);
    mine[i].var.mutable_value() = theirs[i].var.value();
  }
  for (std::size_t i = 0; i < my_buf.size(); ++i) *my_buf[i].tensor = *their_buf[i].tensor;
}

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride, int pad, std::mt19937_64& rng, bool bias)
    : stride_(stride), pad_(pad) {
  const Real fan_in = static_cast<Real>(in_channels) * kernel * kernel;
  weight_ = Var::parameter(normal_tensor({out_channels, in_channels, kernel, kernel}, std::sqrt(2 / fan_in), rng));
  if (bias) bias_ = Var::parameter(Tensor({out_channels}));
}

void Conv2d::collect(const std::string& prefix, std::vector<NamedParam>& params, std::vector<NamedBuffer>&) {
  params.push_back({join_name(prefix, "weight"), weight_});
  if (bias_.defined()) params.push_back({join_name(prefix, "bias"), bias_});
}

Linear::Linear(int in_features, int out_features, std::mt19937_64& rng, bool bias, Real init_std) {
  const Real stddev = init_std > 0 ? init_std : std::sqrt(Real(1) / in_features);
  weight_ = Var::parameter(normal_tensor({out_features, in_features}, stddev, rng));
  if (bias) bias_ = Var::parameter(Tensor({out_features}));
}

void Linear::collect(const std::string& prefix, std::vector<NamedParam>& params, std::vector<NamedBuffer>&) {
  params.push_back({join_name(prefix, "weight"), weight_});
  if (bias_.defined()) params.push_back({join_name(prefix, "bias"), bias_});
}

BatchNorm::BatchNorm(int channels)
    : gamma_(Var::parameter(Tensor({channels}, 1))),
      beta_(Var::parameter(Tensor({channels}))),
      stats_{Tensor({channels}), Tensor({channels}, 1)} {}

void BatchNorm::collect(const std::string& prefix, std::vector<NamedParam>& params,
                        std::vector<NamedBuffer>& buffers) {
  params.push_back({join_name(prefix, "gamma"), gamma_});
  params.push_back({join_name(prefix, "beta"), beta_});
  buffers.push_back({join_name(prefix, "running_mean"), &stats_.running_mean});
  buffers.push_back({join_name(prefix, "running_var"), &stats_.running_var});
}

ResidualBlock::ResidualBlock(int channels, BlockNorm norm, std::mt19937_64& rng)
    : norm_(norm), conv1_(channels, channels, 3, 1, 1, rng), conv2_(channels, channels, 3, 1, 1, rng) {
  if (norm_ == BlockNorm::Batch) {
    bn1_ = BatchNorm(channels);
    bn2_ = BatchNorm(channels);
  }
}

Var ResidualBlock::operator()(const Var& x, Mode mode, const AdainParams* adain) {
  auto normalize = [&](const Var& h, BatchNorm& bn, const Var* scale, const Var* shift) {
    switch (norm_) {
      case BlockNorm::Instance:
        return ops::instance_norm(h);
      case BlockNorm::Batch:
        return bn(h, mode);
      case BlockNorm::Adaptive:
        return ops::channel_affine(ops::instance_norm(h), *scale, *shift);
    }
    return h;
  };
  if (norm_ == BlockNorm::Adaptive && adain == nullptr)
    throw ContractError("adaptive residual block needs AdaIN parameters");
  Var h = conv1_(x);
  h = normalize(h, bn1_, adain ? &adain->scale1 : nullptr, adain ? &adain->shift1 : nullptr);
  h = ops::relu(h);
  h = conv2_(h);
  h = normalize(h, bn2_, adain ? &adain->scale2 : nullptr, adain ? &adain->shift2 : nullptr);
  return ops::add(x, h);
}

void ResidualBlock::collect(const std::string& prefix, std::vector<NamedParam>& params,
                            std::vector<NamedBuffer>& buffers) {
  conv1_.collect(join_name(prefix, "conv1"), params, buffers);
  if (norm_ == BlockNorm::Batch) bn1_.collect(join_name(prefix, "bn1"), params, buffers);
  conv2_.collect(join_name(prefix, "conv2"), params, buffers);
  if (norm_ == BlockNorm::Batch) bn2_.collect(join_name(prefix, "bn2"), params, buffers);
}

}  // namespace xmreid::nn
