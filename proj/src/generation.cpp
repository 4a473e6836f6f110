#include "xmreid/generation.hpp"

#include <algorithm>

namespace xmreid::gen {

using nn::join_name;

void GenArch::validate() const {
  if (base_width < 1 || content_channels < 1 || style_dim < 1 || downsample < 0 || content_res_blocks < 0 ||
      decoder_res_blocks < 1 || mlp_hidden < 1 || style_width < 1 || disc_width < 1 || first_kernel < 1 ||
      first_kernel % 2 == 0)
    throw ContractError("invalid generation architecture");
}

// ---------------------------------------------------------------------------

ContentEncoder::ContentEncoder(const GenArch& arch, std::mt19937_64& rng)
    : stem_(3, arch.base_width, arch.first_kernel, 1, arch.first_kernel / 2, rng) {
  int ch = arch.base_width;
  for (int i = 0; i < arch.downsample; ++i) {
    const int next = i + 1 == arch.downsample ? arch.content_channels : ch * 2;
    down_.emplace_back(ch, next, 4, 2, 1, rng);
    ch = next;
  }
  if (arch.downsample == 0 && ch != arch.content_channels) {
    down_.emplace_back(ch, arch.content_channels, 3, 1, 1, rng);
    ch = arch.content_channels;
  }
  for (int i = 0; i < arch.content_res_blocks; ++i) blocks_.emplace_back(ch, nn::BlockNorm::Instance, rng);
}

Var ContentEncoder::operator()(const Var& images) {
  Var h = ops::relu(ops::instance_norm(stem_(images)));
  for (auto& d : down_) h = ops::relu(ops::instance_norm(d(h)));
  for (auto& b : blocks_) h = b(h, nn::Mode::Eval);
  return h;
}

void ContentEncoder::collect(const std::string& prefix, std::vector<nn::NamedParam>& params,
                             std::vector<nn::NamedBuffer>& buffers) {
  stem_.collect(join_name(prefix, "stem"), params, buffers);
  for (std::size_t i = 0; i < down_.size(); ++i) down_[i].collect(join_name(prefix, "down" + std::to_string(i)), params, buffers);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(join_name(prefix, "res" + std::to_string(i)), params, buffers);
}

StyleEncoder::StyleEncoder(const GenArch& arch, std::mt19937_64& rng)
    : conv1_(3, arch.style_width, 4, 2, 1, rng),
      conv2_(arch.style_width, 2 * arch.style_width, 4, 2, 1, rng),
      fc_(2 * arch.style_width, arch.style_dim, rng) {}

Var StyleEncoder::operator()(const Var& images) {
  Var h = ops::relu(conv1_(images));
  h = ops::relu(conv2_(h));
  return fc_(ops::global_avg_pool(h));
}

void StyleEncoder::collect(const std::string& prefix, std::vector<nn::NamedParam>& params,
                           std::vector<nn::NamedBuffer>& buffers) {
  conv1_.collect(join_name(prefix, "conv1"), params, buffers);
  conv2_.collect(join_name(prefix, "conv2"), params, buffers);
  fc_.collect(join_name(prefix, "fc"), params, buffers);
}

Decoder::Decoder(const GenArch& arch, int out_channels, std::mt19937_64& rng)
    : channels_(arch.content_channels),
      out_channels_(out_channels),
      map1_(arch.style_dim, arch.mlp_hidden, rng),
      map2_(arch.mlp_hidden, 4 * arch.content_channels * arch.decoder_res_blocks, rng, true, 0.01) {
  for (int i = 0; i < arch.decoder_res_blocks; ++i) blocks_.emplace_back(channels_, nn::BlockNorm::Adaptive, rng);
  int ch = channels_;
  for (int i = 0; i < arch.downsample; ++i) {
    const int next = std::max(arch.base_width, ch / 2);
    up_.emplace_back(ch, next, 5, 1, 2, rng);
    ch = next;
  }
  out_ = nn::Conv2d(ch, out_channels, arch.first_kernel, 1, arch.first_kernel / 2, rng);
}

Var Decoder::operator()(const Var& content, const Var& style) {
  if (content.value().ndim() != 4 || content.dim(1) != channels_)
    throw ContractError("decode: content must be [N x " + std::to_string(channels_) + " x H x W], got " +
                        shape_string(content.shape()));
  if (style.value().ndim() != 2 || style.dim(0) != content.dim(0))
    throw ContractError("decode: content batch " + std::to_string(content.dim(0)) + " vs style " +
                        shape_string(style.shape()));
  const int c = channels_;
  Var params = map2_(ops::relu(map1_(style)));  // [N x 4*C*blocks]
  // Per block: scale1, shift1, scale2, shift2, each [N x C]. Scales are 1 + output.
  auto chunk = [&](int block, int which) {
    const int offset = (block * 4 + which) * c;
    Var v = ops::slice_cols(params, offset, offset + c);
    return which % 2 == 0 ? ops::add_scalar(v, 1) : v;
  };
  Var h = content;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const int bi = static_cast<int>(b);
    nn::AdainParams p{chunk(bi, 0), chunk(bi, 1), chunk(bi, 2), chunk(bi, 3)};
    h = blocks_[b](h, nn::Mode::Eval, &p);
  }
  for (auto& u : up_) h = ops::relu(u(ops::upsample_nearest2x(h)));
  h = ops::tanh(out_(h));
  return out_channels_ == 1 ? ops::repeat_channels(h, 3) : h;
}

void Decoder::collect(const std::string& prefix, std::vector<nn::NamedParam>& params,
                      std::vector<nn::NamedBuffer>& buffers) {
  map1_.collect(join_name(prefix, "map1"), params, buffers);
  map2_.collect(join_name(prefix, "map2"), params, buffers);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(join_name(prefix, "res" + std::to_string(i)), params, buffers);
  for (std::size_t i = 0; i < up_.size(); ++i) up_[i].collect(join_name(prefix, "up" + std::to_string(i)), params, buffers);
  out_.collect(join_name(prefix, "out"), params, buffers);
}

Discriminator::Discriminator(const GenArch& arch, std::mt19937_64& rng)
    : conv1_(3, arch.disc_width, 4, 2, 1, rng),
      conv2_(arch.disc_width, 2 * arch.disc_width, 4, 2, 1, rng),
      out_(2 * arch.disc_width, 1, 3, 1, 1, rng) {}

Var Discriminator::operator()(const Var& images) {
  Var h = ops::leaky_relu(conv1_(images), 0.2);
  h = ops::leaky_relu(conv2_(h), 0.2);
  return out_(h);
}

void Discriminator::collect(const std::string& prefix, std::vector<nn::NamedParam>& params,
                            std::vector<nn::NamedBuffer>& buffers) {
  conv1_.collect(join_name(prefix, "conv1"), params, buffers);
  conv2_.collect(join_name(prefix, "conv2"), params, buffers);
  out_.collect(join_name(prefix, "out"), params, buffers);
}

GenerationModel::GenerationModel(const GenArch& a, std::mt19937_64& rng)
    : arch((a.validate(), a)),
      content(std::make_shared<ContentEncoder>(a, rng)),
      style_rgb(a, rng),
      style_ir(a, rng),
      dec_rgb(a, 3, rng),
      dec_ir(a, 1, rng),
      dis_rgb(a, rng),
      dis_ir(a, rng) {}

std::vector<nn::NamedParam> GenerationModel::generator_parameters() {
  std::vector<nn::NamedParam> p;
  std::vector<nn::NamedBuffer> b;
  content->collect("gen.content", p, b);
  style_rgb.collect("gen.style_rgb", p, b);
  style_ir.collect("gen.style_ir", p, b);
  dec_rgb.collect("gen.dec_rgb", p, b);
  dec_ir.collect("gen.dec_ir", p, b);
  return p;
}

std::vector<nn::NamedParam> GenerationModel::discriminator_parameters() {
  std::vector<nn::NamedParam> p;
  std::vector<nn::NamedBuffer> b;
  dis_rgb.collect("gen.dis_rgb", p, b);
  dis_ir.collect("gen.dis_ir", p, b);
  return p;
}

void GenerationModel::collect(std::vector<nn::NamedParam>& params, std::vector<nn::NamedBuffer>& buffers) {
  content->collect("gen.content", params, buffers);
  style_rgb.collect("gen.style_rgb", params, buffers);
  style_ir.collect("gen.style_ir", params, buffers);
  dec_rgb.collect("gen.dec_rgb", params, buffers);
  dec_ir.collect("gen.dec_ir", params, buffers);
  dis_rgb.collect("gen.dis_rgb", params, buffers);
  dis_ir.collect("gen.dis_ir", params, buffers);
}

// ---------------------------------------------------------------------------

Var encode_content(GenerationModel& model, const Var& images) {
  if (images.value().ndim() != 4 || images.dim(1) != 3)
    throw ContractError("encode_content expects [N x 3 x H x W], got " + shape_string(images.shape()));
  const int f = model.arch.factor();
  if (images.dim(2) % f != 0 || images.dim(3) % f != 0)
    throw ContractError("image size must be divisible by the downsampling factor " + std::to_string(f));
  return (*model.content)(images);
}

Var encode_content(GenerationModel& model, const data::ImageBatch& batch) {
  return encode_content(model, Var(batch.pixels));
}

Var encode_style(GenerationModel& model, const Var& images, Modality which) {
  if (images.value().ndim() != 4 || images.dim(1) != 3)
    throw ContractError("encode_style expects [N x 3 x H x W], got " + shape_string(images.shape()));
  return which == Modality::RGB ? model.style_rgb(images) : model.style_ir(images);
}

Var encode_style(GenerationModel& model, const data::ImageBatch& batch, Modality which) {
  for (Modality m : batch.modality)
    if (m != which)
      throw ContractError("encode_style: batch contains " + data::to_string(m) + " images but the " +
                          data::to_string(which) + " style encoder was requested");
  return encode_style(model, Var(batch.pixels), which);
}

Var decode(GenerationModel& model, const Var& content, const Var& style, Modality target) {
  return target == Modality::RGB ? model.dec_rgb(content, style) : model.dec_ir(content, style);
}

Pairing intra_person_pairing(const data::ImageBatch& rgb, const data::ImageBatch& ir, std::mt19937_64& rng) {
  Pairing p(rgb.size());
  for (int i = 0; i < rgb.size(); ++i) {
    std::vector<int> same;
    for (int j = 0; j < ir.size(); ++j)
      if (ir.identity[j] == rgb.identity[i]) same.push_back(j);
    if (same.empty())
      throw ContractError("identity " + std::to_string(rgb.identity[i]) + " has no IR image in the batch");
    std::uniform_int_distribution<int> pick(0, static_cast<int>(same.size()) - 1);
    p[i] = same[pick(rng)];
  }
  return p;
}

PairedQuad QuadBatch::quad(int i) const {
  auto row = [i](const Var& v) {
    Tensor t = slice_rows(v.value(), i, i + 1);
    Shape s(t.shape().begin() + 1, t.shape().end());
    return t.reshaped(s);
  };
  return {row(x_rgb), row(x_ir), row(x_ir2rgb), row(x_rgb2ir), identity.at(i)};
}

QuadBatch exchange_from_codes(GenerationModel& model, const Var& x_rgb, const Var& x_ir, const Var& content_rgb,
                              const Var& content_ir, const Var& style_rgb, const Var& style_ir,
                              const std::vector<int>& rgb_ids, const std::vector<int>& ir_ids, const Pairing& pairing) {
  if (pairing.size() != rgb_ids.size()) throw ContractError("pairing must cover every RGB item");
  for (std::size_t i = 0; i < pairing.size(); ++i) {
    const int j = pairing[i];
    if (j < 0 || j >= static_cast<int>(ir_ids.size())) throw ContractError("pairing index out of range");
    if (ir_ids[j] != rgb_ids[i])
      throw ContractError("pairing crosses identities: RGB item " + std::to_string(i) + " (id " +
                          std::to_string(rgb_ids[i]) + ") with IR item " + std::to_string(j) + " (id " +
                          std::to_string(ir_ids[j]) + ")");
  }
  QuadBatch q;
  q.identity = rgb_ids;
  q.x_rgb = x_rgb;
  q.x_ir = ops::gather_rows(x_ir, pairing);
  q.content_rgb = content_rgb;
  q.content_ir = ops::gather_rows(content_ir, pairing);
  q.style_rgb = style_rgb;
  q.style_ir = ops::gather_rows(style_ir, pairing);
  q.x_ir2rgb = decode(model, q.content_ir, q.style_rgb, Modality::RGB);
  q.x_rgb2ir = decode(model, q.content_rgb, q.style_ir, Modality::IR);
  return q;
}

QuadBatch exchange_generate(GenerationModel& model, const data::ImageBatch& rgb, const data::ImageBatch& ir,
                            const Pairing& pairing) {
  for (Modality m : rgb.modality)
    if (m != Modality::RGB) throw ContractError("exchange_generate: first batch must be RGB");
  for (Modality m : ir.modality)
    if (m != Modality::IR) throw ContractError("exchange_generate: second batch must be IR");
  Var x_rgb(rgb.pixels), x_ir(ir.pixels);
  // Validate before running any network.
  if (pairing.size() != static_cast<std::size_t>(rgb.size())) throw ContractError("pairing must cover every RGB item");
  for (std::size_t i = 0; i < pairing.size(); ++i)
    if (pairing[i] < 0 || pairing[i] >= ir.size() || ir.identity[pairing[i]] != rgb.identity[i])
      throw ContractError("pairing crosses identities at RGB item " + std::to_string(i));
  Var content = encode_content(model, ops::concat_rows({x_rgb, x_ir}));
  Var c_rgb = ops::slice_rows(content, 0, rgb.size());
  Var c_ir = ops::slice_rows(content, rgb.size(), rgb.size() + ir.size());
  Var s_rgb = encode_style(model, x_rgb, Modality::RGB);
  Var s_ir = encode_style(model, x_ir, Modality::IR);
  return exchange_from_codes(model, x_rgb, x_ir, c_rgb, c_ir, s_rgb, s_ir, rgb.identity, ir.identity, pairing);
}

Var recon_loss_from(const Var& x_rgb, const Var& rec_rgb, const Var& x_ir, const Var& rec_ir) {
  return ops::add(ops::l1_loss(x_rgb, rec_rgb), ops::l1_loss(x_ir, rec_ir));
}

Var recon_loss(GenerationModel& model, const data::ImageBatch& rgb, const data::ImageBatch& ir) {
  Var x_rgb(rgb.pixels), x_ir(ir.pixels);
  Var rec_rgb = decode(model, encode_content(model, x_rgb), encode_style(model, rgb, Modality::RGB), Modality::RGB);
  Var rec_ir = decode(model, encode_content(model, x_ir), encode_style(model, ir, Modality::IR), Modality::IR);
  return recon_loss_from(x_rgb, rec_rgb, x_ir, rec_ir);
}

Var cycle_loss_from(const Var& x_rgb, const Var& x_rgb2ir2rgb, const Var& x_ir, const Var& x_ir2rgb2ir) {
  return ops::add(ops::l1_loss(x_rgb, x_rgb2ir2rgb), ops::l1_loss(x_ir, x_ir2rgb2ir));
}

CycleOutputs cycle_forward(GenerationModel& model, const QuadBatch& q) {
  const int n = q.size();
  CycleOutputs out;
  Var content = encode_content(model, ops::concat_rows({q.x_ir2rgb, q.x_rgb2ir}));
  out.content_ir2rgb = ops::slice_rows(content, 0, n);
  out.content_rgb2ir = ops::slice_rows(content, n, 2 * n);
  Var style_ir_of_fake = encode_style(model, q.x_rgb2ir, Modality::IR);
  Var style_rgb_of_fake = encode_style(model, q.x_ir2rgb, Modality::RGB);
  out.x_ir2rgb2ir = decode(model, out.content_ir2rgb, style_ir_of_fake, Modality::IR);
  out.x_rgb2ir2rgb = decode(model, out.content_rgb2ir, style_rgb_of_fake, Modality::RGB);
  out.loss = cycle_loss_from(q.x_rgb, out.x_rgb2ir2rgb, q.x_ir, out.x_ir2rgb2ir);
  return out;
}

Var cycle_loss(GenerationModel& model, const QuadBatch& quads) { return cycle_forward(model, quads).loss; }

Var disc_loss_from_scores(const Var& real_scores, const Var& fake_scores, AdversarialForm form) {
  if (form == AdversarialForm::LeastSquares)
    return ops::add(ops::squared_error_to(real_scores, 1), ops::squared_error_to(fake_scores, 0));
  return ops::add(ops::bce_with_logits(real_scores, 1), ops::bce_with_logits(fake_scores, 0));
}

Var gen_loss_from_scores(const Var& fake_scores, AdversarialForm form) {
  return form == AdversarialForm::LeastSquares ? ops::squared_error_to(fake_scores, 1)
                                               : ops::bce_with_logits(fake_scores, 1);
}

AdversarialLosses adversarial_losses(GenerationModel& model, const Var& real_rgb, const Var& real_ir,
                                     const Var& fake_rgb, const Var& fake_ir, AdversarialForm form) {
  AdversarialLosses out;
  out.disc_loss = ops::add(disc_loss_from_scores(model.dis_rgb(real_rgb), model.dis_rgb(detach(fake_rgb)), form),
                           disc_loss_from_scores(model.dis_ir(real_ir), model.dis_ir(detach(fake_ir)), form));
  out.gen_loss = ops::add(gen_loss_from_scores(model.dis_rgb(fake_rgb), form),
                          gen_loss_from_scores(model.dis_ir(fake_ir), form));
  return out;
}

}  // namespace xmreid::gen
