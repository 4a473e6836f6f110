#include "xmreid/alignment.hpp"

#include <algorithm>
#include <limits>

namespace xmreid::align {

using nn::join_name;

InstanceEncoder::InstanceEncoder(int in_channels, const AlignArch& arch, std::mt19937_64& rng)
    : down_(in_channels, arch.instance_channels, 3, 2, 1, rng, false), bn_(arch.instance_channels) {
  for (int i = 0; i < arch.res_blocks; ++i) blocks_.emplace_back(arch.instance_channels, nn::BlockNorm::Batch, rng);
}

Var InstanceEncoder::operator()(const Var& mid, Mode mode) {
  Var h = ops::relu(bn_(down_(mid), mode));
  for (auto& b : blocks_) h = b(h, mode);
  return h;
}

void InstanceEncoder::collect(const std::string& prefix, std::vector<nn::NamedParam>& params,
                              std::vector<nn::NamedBuffer>& buffers) {
  down_.collect(join_name(prefix, "down"), params, buffers);
  bn_.collect(join_name(prefix, "bn"), params, buffers);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(join_name(prefix, "res" + std::to_string(i)), params, buffers);
}

Classifier::Classifier(int features, int classes, std::mt19937_64& rng)
    : bn_(features), fc_(features, classes, rng, false, 0.01) {}

Var Classifier::logits(const Var& pooled, Mode mode) { return fc_(bn_(pooled, mode)); }

void Classifier::collect(const std::string& prefix, std::vector<nn::NamedParam>& params,
                         std::vector<nn::NamedBuffer>& buffers) {
  bn_.collect(join_name(prefix, "bn"), params, buffers);
  fc_.collect(join_name(prefix, "fc"), params, buffers);
}

AlignmentModel::AlignmentModel(const AlignArch& a, std::shared_ptr<gen::ContentEncoder> sl, bool shared,
                               int content_channels, std::mt19937_64& rng)
    : arch(a),
      set_level(std::move(sl)),
      shares_set_level(shared),
      instance(content_channels, a, rng),
      classifier(a.instance_channels, a.num_classes, rng) {
  if (a.instance_channels < 1 || a.res_blocks < 0 || a.num_classes < 2)
    throw ContractError("invalid alignment architecture");
}

AlignmentModel AlignmentModel::shared_with(gen::GenerationModel& g, const AlignArch& arch, std::mt19937_64& rng) {
  return AlignmentModel(arch, g.content, true, g.arch.content_channels, rng);
}

AlignmentModel AlignmentModel::separate(const gen::GenArch& garch, const AlignArch& arch, std::mt19937_64& rng,
                                        gen::ContentEncoder* init_from) {
  auto sl = std::make_shared<gen::ContentEncoder>(garch, rng);
  if (init_from) sl->copy_values_from(*init_from);
  return AlignmentModel(arch, std::move(sl), false, garch.content_channels, rng);
}

void AlignmentModel::collect(std::vector<nn::NamedParam>& params, std::vector<nn::NamedBuffer>& buffers) {
  if (!shares_set_level) set_level->collect("align.set_level", params, buffers);
  instance.collect("align.instance", params, buffers);
  classifier.collect("align.classifier", params, buffers);
}

std::vector<nn::NamedParam> AlignmentModel::trainable_parameters() {
  std::vector<nn::NamedParam> params;
  std::vector<nn::NamedBuffer> buffers;
  if (shares_set_level) set_level->collect("gen.content", params, buffers);
  collect(params, buffers);
  return params;
}

// ---------------------------------------------------------------------------

Var encode_set_level(AlignmentModel& model, const Var& images) {
  if (images.value().ndim() != 4 || images.dim(1) != 3)
    throw ContractError("encode_set_level expects [N x 3 x H x W], got " + shape_string(images.shape()));
  return (*model.set_level)(images);
}

InstanceFeatures encode_instance_level(AlignmentModel& model, const Var& mid, Mode mode) {
  Var maps = model.instance(mid, mode);
  return {maps, ops::global_avg_pool(maps)};
}

Var classify_logits(AlignmentModel& model, const Var& pooled, Mode mode) {
  if (!all_finite(pooled.value())) throw NumericError("classify: non-finite feature values");
  return model.classifier.logits(pooled, mode);
}

Var classify(AlignmentModel& model, const Var& pooled, Mode mode) {
  return ops::softmax(classify_logits(model, pooled, mode));
}

FeatureSet forward_features(AlignmentModel& model, const Var& mid, Mode mode) {
  FeatureSet f;
  f.mid = mid;
  auto inst = encode_instance_level(model, mid, mode);
  f.maps = inst.maps;
  f.pooled = inst.pooled;
  f.logits = classify_logits(model, f.pooled, mode);
  f.probs = ops::softmax(f.logits);
  return f;
}

Var align_loss_from_probs(const Var& p_ir, const Var& p_ir2rgb, const Var& p_rgb2ir, const Var& p_rgb, Real eps) {
  return ops::add(ops::kl_rows(p_ir, p_ir2rgb, eps), ops::kl_rows(p_rgb2ir, p_rgb, eps));
}

Var align_loss(AlignmentModel& model, const gen::QuadBatch& q, Mode mode) {
  const int n = q.size();
  // Generated images get their own normalization pass so they never enter
  // the running statistics used at test time.
  Var real = forward_features(model, encode_set_level(model, ops::concat_rows({q.x_ir, q.x_rgb})), mode).probs;
  Var fake = forward_features(model, encode_set_level(model, ops::concat_rows({q.x_ir2rgb, q.x_rgb2ir})),
                              mode == Mode::Train ? Mode::TrainFrozenStats : mode)
                 .probs;
  return align_loss_from_probs(ops::slice_rows(real, 0, n), ops::slice_rows(fake, 0, n), ops::slice_rows(fake, n, 2 * n),
                               ops::slice_rows(real, n, 2 * n));
}

Var cls_loss_from_logits(const Var& logits, std::span<const int> labels) {
  if (logits.value().ndim() != 2 || static_cast<std::size_t>(logits.dim(0)) != labels.size())
    throw ContractError("cls_loss: one label per row required");
  const int classes = logits.dim(1);
  for (int l : labels)
    if (l < 0 || l >= classes)
      throw ContractError("cls_loss: label " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
  return ops::nll(ops::log_softmax(logits), labels);
}

Var cls_loss(AlignmentModel& model, const Var& pooled_real, std::span<const int> labels, Mode mode) {
  return cls_loss_from_logits(classify_logits(model, pooled_real, mode), labels);
}

Var triplet_loss(const Var& pooled, std::span<const int> labels, Real margin, Mining mining,
                 TripletConvention convention) {
  if (pooled.value().ndim() != 2 || static_cast<std::size_t>(pooled.dim(0)) != labels.size())
    throw ContractError("triplet_loss: one label per row required");
  const int n = pooled.dim(0);
  if (std::all_of(labels.begin(), labels.end(), [&](int l) { return l == labels[0]; }))
    throw ContractError("triplet_loss: batch has a single identity, no negatives");

  const bool distance = convention == TripletConvention::Distance;
  Var d = distance ? ops::pairwise_distance(pooled) : [&] {
    Var u = ops::normalize_rows(pooled);
    return ops::linear(u, u, Var());
  }();
  const Tensor& dv = d.value();
  // "Harder" means larger distance for positives and smaller for negatives;
  // similarity flips both.
  auto harder_pos = [&](Real a, Real b) { return distance ? a > b : a < b; };
  auto harder_neg = [&](Real a, Real b) { return distance ? a < b : a > b; };

  std::vector<std::size_t> pos_idx, neg_idx;
  for (int a = 0; a < n; ++a) {
    std::vector<int> pos, neg;
    for (int j = 0; j < n; ++j) {
      if (j == a) continue;
      (labels[j] == labels[a] ? pos : neg).push_back(j);
    }
    if (pos.empty() || neg.empty()) continue;
    auto flat = [&](int j) { return static_cast<std::size_t>(a) * n + j; };
    if (mining == Mining::BatchHard) {
      int p = pos[0], q = neg[0];
      for (int j : pos)
        if (harder_pos(dv.at(a, j), dv.at(a, p))) p = j;
      for (int j : neg)
        if (harder_neg(dv.at(a, j), dv.at(a, q))) q = j;
      pos_idx.push_back(flat(p));
      neg_idx.push_back(flat(q));
    } else {
      for (int p : pos)
        for (int q : neg) {
          pos_idx.push_back(flat(p));
          neg_idx.push_back(flat(q));
        }
    }
  }
  if (pos_idx.empty()) throw ContractError("triplet_loss: no anchor has a positive in the batch");
  Var dap = ops::take(d, pos_idx), dan = ops::take(d, neg_idx);
  Var gap = distance ? ops::sub(dap, dan) : ops::sub(dan, dap);
  return ops::mean(ops::relu(ops::add_scalar(gap, margin)));
}

Tensor extract_features(AlignmentModel& model, const Tensor& images, int chunk) {
  if (images.ndim() != 4) throw ContractError("extract_features expects [N x 3 x H x W]");
  if (chunk < 1) throw ContractError("extract_features: chunk must be positive");
  NoGradGuard guard;
  const int n = images.dim(0);
  std::vector<Tensor> parts;
  for (int begin = 0; begin < n; begin += chunk) {
    const int end = std::min(n, begin + chunk);
    Var mid = encode_set_level(model, Var(slice_rows(images, begin, end)));
    parts.push_back(encode_instance_level(model, mid, Mode::Eval).pooled.value());
  }
  if (parts.empty()) return Tensor({0, model.arch.instance_channels});
  return concat_rows(parts);
}

}  // namespace xmreid::align
