#pragma once

#include <span>
#include <vector>

#include "xmreid/autograd.hpp"

// Differentiable operations over Vars. Image tensors are NCHW.
namespace xmreid::ops {

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);
/// y = x W^T + b with x [N x in], W [out x in]; `bias` may be undefined.
Var linear(const Var& x, const Var& weight, const Var& bias);

Var relu(const Var& x);
Var leaky_relu(const Var& x, Real slope);
Var tanh(const Var& x);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& a, Real s);
Var add_scalar(const Var& a, Real s);

/// Per-sample, per-channel normalization over spatial positions (no affine).
Var instance_norm(const Var& x, Real eps = 1e-5);
/// out[n,c,...] = x[n,c,...] * scale[n,c] + shift[n,c].
Var channel_affine(const Var& x, const Var& scale, const Var& shift);

struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
};
/// Batch normalization over every axis except 1. Training mode uses batch
/// statistics and updates `stats`; inference mode uses `stats`.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats, bool training,
               Real momentum = 0.1, Real eps = 1e-5);

Var upsample_nearest2x(const Var& x);
/// [N x C x H x W] -> [N x C]
Var global_avg_pool(const Var& x);
/// [N x 1 x H x W] -> [N x times x H x W]
Var repeat_channels(const Var& x, int times);

Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(const Var& x, int begin, int end);
Var gather_rows(const Var& x, std::span<const int> index);
/// [N x K] -> [N x (end - begin)]
Var slice_cols(const Var& x, int begin, int end);

/// Flat element selection: out[i] = x.flat[index[i]], shape [index.size()].
Var take(const Var& x, std::span<const std::size_t> index);

/// Same elements, new shape of equal size.
Var reshape(const Var& x, Shape shape);

Var mean(const Var& x);
Var sum(const Var& x);

/// mean |a - b|
Var l1_loss(const Var& a, const Var& b);
/// mean (x - target)^2
Var squared_error_to(const Var& x, Real target);
/// mean over elements of -[t log s + (1-t) log(1-s)] with s = sigmoid(x)
Var bce_with_logits(const Var& x, Real target);

Var log_softmax(const Var& logits);
Var softmax(const Var& logits);
/// mean_i -logp[i, labels[i]]
Var nll(const Var& log_probs, std::span<const int> labels);
/// Row-wise KL(p||q) averaged over rows; both inputs are probability rows,
/// floored at eps and renormalized before the divergence.
Var kl_rows(const Var& p, const Var& q, Real eps = 1e-8);

/// [N x D] -> [N x N] Euclidean distances, sqrt(|a-b|^2 + eps).
Var pairwise_distance(const Var& x, Real eps = 1e-12);
/// Rows scaled to unit Euclidean norm, x / sqrt(|x|^2 + eps).
Var normalize_rows(const Var& x, Real eps = 1e-12);

}  // namespace xmreid::ops
