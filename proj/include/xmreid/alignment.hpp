#pragma once

#include <memory>
#include <random>
#include <span>
#include <vector>

#include "xmreid/generation.hpp"

// Feature alignment: set-level encoder (E^i itself, or a separate copy for
// ablations), instance-level encoder, classifier, and the three re-id losses.
namespace xmreid::align {

using nn::Mode;

struct AlignArch {
  int instance_channels = 128;  // C_t
  int res_blocks = 1;
  int num_classes = 100;        // number of training identities
};

/// E^il: strided conv + batch norm + ReLU, then batch-normalized residual blocks.
class InstanceEncoder : public nn::Module {
 public:
  InstanceEncoder(int in_channels, const AlignArch& arch, std::mt19937_64& rng);
  Var operator()(const Var& mid, Mode mode);
  void collect(const std::string& prefix, std::vector<nn::NamedParam>& params,
               std::vector<nn::NamedBuffer>& buffers) override;

 private:
  nn::Conv2d down_;
  nn::BatchNorm bn_;
  std::vector<nn::ResidualBlock> blocks_;
};

/// C: batch norm, then a bias-free linear map to identity logits.
class Classifier : public nn::Module {
 public:
  Classifier(int features, int classes, std::mt19937_64& rng);
  Var logits(const Var& pooled, Mode mode);
  void collect(const std::string& prefix, std::vector<nn::NamedParam>& params,
               std::vector<nn::NamedBuffer>& buffers) override;
  int classes() const { return fc_.out_features(); }

 private:
  nn::BatchNorm bn_;
  nn::Linear fc_;
};

struct AlignmentModel {
  AlignArch arch;
  std::shared_ptr<gen::ContentEncoder> set_level;
  bool shares_set_level = true;
  InstanceEncoder instance;
  Classifier classifier;

  /// E^sl aliases the generator's E^i.
  static AlignmentModel shared_with(gen::GenerationModel& g, const AlignArch& arch, std::mt19937_64& rng);
  /// E^sl is an independent encoder of the same architecture, starting from
  /// a copy of `init_from` when given.
  static AlignmentModel separate(const gen::GenArch& garch, const AlignArch& arch, std::mt19937_64& rng,
                                 gen::ContentEncoder* init_from = nullptr);

  /// Parameters owned by this module (excludes E^sl when it is shared).
  void collect(std::vector<nn::NamedParam>& params, std::vector<nn::NamedBuffer>& buffers);
  /// Every parameter the re-id losses can reach, including a shared E^sl.
  std::vector<nn::NamedParam> trainable_parameters();

 private:
  AlignmentModel(const AlignArch& arch, std::shared_ptr<gen::ContentEncoder> sl, bool shared, int content_channels,
                 std::mt19937_64& rng);
};

struct InstanceFeatures {
  Var maps;    // T [N x C_t x H'' x W'']
  Var pooled;  // V [N x C_t]
};

/// One pass M -> (T, V) -> logits -> p.
struct FeatureSet {
  Var mid, maps, pooled, logits, probs;
};

Var encode_set_level(AlignmentModel& model, const Var& images);
InstanceFeatures encode_instance_level(AlignmentModel& model, const Var& mid, Mode mode);
FeatureSet forward_features(AlignmentModel& model, const Var& mid, Mode mode);
Var classify_logits(AlignmentModel& model, const Var& pooled, Mode mode);
/// Softmax of the classifier logits. Throws NumericError on non-finite input.
Var classify(AlignmentModel& model, const Var& pooled, Mode mode);

/// KL(p_ir || p_ir2rgb) + KL(p_rgb2ir || p_rgb), each averaged over pairs.
Var align_loss_from_probs(const Var& p_ir, const Var& p_ir2rgb, const Var& p_rgb2ir, const Var& p_rgb,
                          Real eps = 1e-8);
/// Runs the four quad members through E^il and C in one batch.
Var align_loss(AlignmentModel& model, const gen::QuadBatch& quads, Mode mode = Mode::Train);

/// Mean -log p(ground truth). Throws ContractError for labels outside the classifier range.
Var cls_loss(AlignmentModel& model, const Var& pooled_real, std::span<const int> labels, Mode mode = Mode::Train);
Var cls_loss_from_logits(const Var& logits, std::span<const int> labels);

enum class Mining { BatchHard, AllTriplets };
/// Distance: [m + D_ap - D_an]_+ with Euclidean D (default).
/// Similarity: [m - S_ap + S_an]_+ with cosine S, the literal sign pattern.
enum class TripletConvention { Distance, Similarity };

Var triplet_loss(const Var& pooled, std::span<const int> labels, Real margin, Mining mining = Mining::BatchHard,
                 TripletConvention convention = TripletConvention::Distance);

/// V = pool(E^il(E^sl(x))) in inference mode, evaluated in chunks.
Tensor extract_features(AlignmentModel& model, const Tensor& images, int chunk = 64);

}  // namespace xmreid::align
