#pragma once

#include <memory>
#include <random>
#include <vector>

#include "xmreid/nn.hpp"
#include "xmreid/synth_data.hpp"

// Cross-modality paired-image generation: a shared content encoder, one
// style encoder per modality, AdaIN decoders, and patch discriminators.
namespace xmreid::gen {

using data::Modality;

struct GenArch {
  int base_width = 16;        // channels after the first content conv
  int content_channels = 64;  // C_c
  int style_dim = 8;          // C_s
  int downsample = 2;         // stride-2 stages; spatial factor 2^downsample
  int content_res_blocks = 2;
  int decoder_res_blocks = 4;
  int mlp_hidden = 64;
  int style_width = 16;
  int disc_width = 16;
  int first_kernel = 7;

  int factor() const { return 1 << downsample; }
  void validate() const;
};

/// E^i: conv stem, strided downsampling, instance-normalized residual blocks.
class ContentEncoder : public nn::Module {
 public:
  ContentEncoder(const GenArch& arch, std::mt19937_64& rng);
  Var operator()(const Var& images);
  void collect(const std::string& prefix, std::vector<nn::NamedParam>& params,
               std::vector<nn::NamedBuffer>& buffers) override;

 private:
  nn::Conv2d stem_;
  std::vector<nn::Conv2d> down_;
  std::vector<nn::ResidualBlock> blocks_;
};

/// E^s: two strided convolutions, global average pooling, fully connected.
class StyleEncoder : public nn::Module {
 public:
  StyleEncoder(const GenArch& arch, std::mt19937_64& rng);
  Var operator()(const Var& images);
  void collect(const std::string& prefix, std::vector<nn::NamedParam>& params,
               std::vector<nn::NamedBuffer>& buffers) override;

 private:
  nn::Conv2d conv1_, conv2_;
  nn::Linear fc_;
};

/// D: style -> (two-layer mapping network) -> AdaIN parameters of the
/// residual blocks; then nearest upsampling + convolution back to full size.
class Decoder : public nn::Module {
 public:
  Decoder(const GenArch& arch, int out_channels, std::mt19937_64& rng);
  /// Always returns 3 channels; single-channel outputs are replicated.
  Var operator()(const Var& content, const Var& style);
  void collect(const std::string& prefix, std::vector<nn::NamedParam>& params,
               std::vector<nn::NamedBuffer>& buffers) override;

 private:
  int channels_;
  int out_channels_;
  nn::Linear map1_, map2_;
  std::vector<nn::ResidualBlock> blocks_;
  std::vector<nn::Conv2d> up_;
  nn::Conv2d out_;
};

/// Patch discriminator producing an [N x 1 x H/4 x W/4] score map.
class Discriminator : public nn::Module {
 public:
  Discriminator(const GenArch& arch, std::mt19937_64& rng);
  Var operator()(const Var& images);
  void collect(const std::string& prefix, std::vector<nn::NamedParam>& params,
               std::vector<nn::NamedBuffer>& buffers) override;

 private:
  nn::Conv2d conv1_, conv2_, out_;
};

struct GenerationModel {
  GenArch arch;
  std::shared_ptr<ContentEncoder> content;
  StyleEncoder style_rgb, style_ir;
  Decoder dec_rgb, dec_ir;
  Discriminator dis_rgb, dis_ir;

  GenerationModel(const GenArch& arch, std::mt19937_64& rng);

  /// Encoders and decoders.
  std::vector<nn::NamedParam> generator_parameters();
  std::vector<nn::NamedParam> discriminator_parameters();
  /// Everything, for checkpoints.
  void collect(std::vector<nn::NamedParam>& params, std::vector<nn::NamedBuffer>& buffers);
};

Var encode_content(GenerationModel& model, const Var& images);
Var encode_content(GenerationModel& model, const data::ImageBatch& batch);
/// Throws ContractError unless every item of `batch` has modality `which`.
Var encode_style(GenerationModel& model, const data::ImageBatch& batch, Modality which);
Var encode_style(GenerationModel& model, const Var& images, Modality which);
/// Decoder of the target modality; content and style batch sizes must agree.
Var decode(GenerationModel& model, const Var& content, const Var& style, Modality target);

/// For every RGB item, the index of a same-identity IR item.
using Pairing = std::vector<int>;
/// Uniformly random intra-person pairing.
Pairing intra_person_pairing(const data::ImageBatch& rgb, const data::ImageBatch& ir, std::mt19937_64& rng);

/// Plain images of one paired quad, [3 x H x W] each.
struct PairedQuad {
  Tensor x_rgb, x_ir, x_ir2rgb, x_rgb2ir;
  int identity = 0;
};

/// Batched quads plus the codes they were built from, kept for the cycle and
/// alignment passes.
struct QuadBatch {
  Var x_rgb, x_ir;            // x_ir is the IR batch reordered by the pairing
  Var x_ir2rgb, x_rgb2ir;
  Var content_rgb, content_ir;
  Var style_rgb, style_ir;
  std::vector<int> identity;

  int size() const { return static_cast<int>(identity.size()); }
  PairedQuad quad(int i) const;
};

/// x_ir2rgb = D_rgb(E^i(x_ir), E^s_rgb(x_rgb)) and x_rgb2ir = D_ir(E^i(x_rgb), E^s_ir(x_ir))
/// for each pair. Throws ContractError if a pair crosses identities.
QuadBatch exchange_generate(GenerationModel& model, const data::ImageBatch& rgb, const data::ImageBatch& ir,
                            const Pairing& pairing);
/// Same, from precomputed real codes (indexed like the unpaired batches).
QuadBatch exchange_from_codes(GenerationModel& model, const Var& x_rgb, const Var& x_ir, const Var& content_rgb,
                              const Var& content_ir, const Var& style_rgb, const Var& style_ir,
                              const std::vector<int>& rgb_ids, const std::vector<int>& ir_ids, const Pairing& pairing);

/// |x_rgb - rec_rgb|_1 + |x_ir - rec_ir|_1 (per-term means).
Var recon_loss_from(const Var& x_rgb, const Var& rec_rgb, const Var& x_ir, const Var& rec_ir);
Var recon_loss(GenerationModel& model, const data::ImageBatch& rgb, const data::ImageBatch& ir);

struct CycleOutputs {
  Var content_ir2rgb, content_rgb2ir;  // E^i of the generated images
  Var x_ir2rgb2ir, x_rgb2ir2rgb;
  Var loss;
};
/// Re-encodes the generated pair and decodes back to both originals.
CycleOutputs cycle_forward(GenerationModel& model, const QuadBatch& quads);
Var cycle_loss(GenerationModel& model, const QuadBatch& quads);
Var cycle_loss_from(const Var& x_rgb, const Var& x_rgb2ir2rgb, const Var& x_ir, const Var& x_ir2rgb2ir);

enum class AdversarialForm { LeastSquares, Log };

struct AdversarialLosses {
  Var disc_loss;
  Var gen_loss;
};

/// Least squares: disc = E[(D(real)-1)^2] + E[D(fake)^2], gen = E[(D(fake)-1)^2],
/// summed over the two modalities. The discriminator term sees detached fakes.
AdversarialLosses adversarial_losses(GenerationModel& model, const Var& real_rgb, const Var& real_ir,
                                     const Var& fake_rgb, const Var& fake_ir,
                                     AdversarialForm form = AdversarialForm::LeastSquares);
Var disc_loss_from_scores(const Var& real_scores, const Var& fake_scores, AdversarialForm form);
Var gen_loss_from_scores(const Var& fake_scores, AdversarialForm form);

}  // namespace xmreid::gen
