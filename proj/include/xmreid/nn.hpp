#pragma once

#include <random>
#include <string>
#include <vector>

#include "xmreid/ops.hpp"

namespace xmreid::nn {

// TrainFrozenStats normalizes with batch statistics like Train but leaves the
// running statistics untouched, for batches that should not shape inference.
enum class Mode { Train, Eval, TrainFrozenStats };

struct NamedParam {
  std::string name;
  Var var;
};

struct NamedBuffer {
  std::string name;
  Tensor* tensor;
};

/// Anything owning parameters. `collect` enumerates them with dotted names in
/// a fixed order, which is also the checkpoint and optimizer order.
class Module {
 public:
  virtual ~Module() = default;
  virtual void collect(const std::string& prefix, std::vector<NamedParam>& params,
                       std::vector<NamedBuffer>& buffers) = 0;

  std::vector<NamedParam> parameters(const std::string& prefix = "");
  std::vector<NamedBuffer> buffers(const std::string& prefix = "");
  std::size_t parameter_count();
  /// Copies parameter and buffer values from a module of identical structure.
  void copy_values_from(Module& other);
};

std::string join_name(const std::string& prefix, const std::string& name);

class Conv2d : public Module {
 public:
  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int pad, std::mt19937_64& rng,
         bool bias = true);
  Var operator()(const Var& x) const { return ops::conv2d(x, weight_, bias_, stride_, pad_); }
  void collect(const std::string& prefix, std::vector<NamedParam>& params, std::vector<NamedBuffer>& buffers) override;

  int out_channels() const { return weight_.dim(0); }

 private:
  Var weight_, bias_;
  int stride_ = 1, pad_ = 0;
};

class Linear : public Module {
 public:
  Linear() = default;
  Linear(int in_features, int out_features, std::mt19937_64& rng, bool bias = true, Real init_std = -1);
  Var operator()(const Var& x) const { return ops::linear(x, weight_, bias_); }
  void collect(const std::string& prefix, std::vector<NamedParam>& params, std::vector<NamedBuffer>& buffers) override;

  int out_features() const { return weight_.dim(0); }
  const Var& weight() const { return weight_; }

 private:
  Var weight_, bias_;
};

class BatchNorm : public Module {
 public:
  BatchNorm() = default;
  explicit BatchNorm(int channels);
  Var operator()(const Var& x, Mode mode) {
    return mode == Mode::TrainFrozenStats ? ops::batch_norm(x, gamma_, beta_, stats_, true, 0)
                                          : ops::batch_norm(x, gamma_, beta_, stats_, mode == Mode::Train);
  }
  void collect(const std::string& prefix, std::vector<NamedParam>& params, std::vector<NamedBuffer>& buffers) override;

 private:
  Var gamma_, beta_;
  ops::BatchNormStats stats_;
};

/// Per-channel scale/shift pairs injected into an AdaIN residual block.
struct AdainParams {
  Var scale1, shift1, scale2, shift2;
};

enum class BlockNorm { Instance, Batch, Adaptive };

/// x + conv(norm(relu(norm(conv(x))))) with 3x3 same-size convolutions.
class ResidualBlock : public Module {
 public:
  ResidualBlock() = default;
  ResidualBlock(int channels, BlockNorm norm, std::mt19937_64& rng);
  Var operator()(const Var& x, Mode mode, const AdainParams* adain = nullptr);
  void collect(const std::string& prefix, std::vector<NamedParam>& params, std::vector<NamedBuffer>& buffers) override;

 private:
  BlockNorm norm_ = BlockNorm::Instance;
  Conv2d conv1_, conv2_;
  BatchNorm bn1_, bn2_;
};

}  // namespace xmreid::nn
