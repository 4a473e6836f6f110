#include "xmreid/training.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace xmreid::train {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;
using data::ConfigError;
using data::Modality;

void TrainConfig::validate() const {
  gen_arch.validate();
  for (auto [name, v] : {std::pair{"lambda_cyc", lambda_cyc}, std::pair{"lambda_gan", lambda_gan},
                         std::pair{"lambda_align", lambda_align}, std::pair{"lambda_reid", lambda_reid},
                         std::pair{"lambda_recon", lambda_recon}, std::pair{"margin", margin}})
    if (!(v >= 0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be a finite value >= 0");
  if (identities_per_batch < 2) throw ConfigError("identities_per_batch must be >= 2 for the triplet loss");
  if (images_per_identity < 1) throw ConfigError("images_per_identity must be >= 1");
  if (holdout_per_identity < 0) throw ConfigError("holdout_per_identity must be >= 0");
  if (flip_prob < 0 || flip_prob > 1) throw ConfigError("flip_prob must lie in [0, 1]");
  if (!(lr > 0) || beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("invalid optimizer settings");
  if (!(lr_decay > 0) || decay_at < 0 || decay_at > 1) throw ConfigError("invalid learning-rate schedule");
  if (pretrain_epochs < 0 || joint_epochs < 0 || steps_per_epoch < 0) throw ConfigError("epoch counts must be >= 0");
  if (align_arch.instance_channels < 1 || align_arch.res_blocks < 0) throw ConfigError("invalid alignment architecture");
  if (divergence_patience < 1) throw ConfigError("divergence_patience must be >= 1");
  if (feature_adversarial && set_level_sharing)
    throw ConfigError("feature_adversarial requires a separate set-level encoder (set_level_sharing = false)");
}

namespace {

std::string form_name(gen::AdversarialForm f) { return f == gen::AdversarialForm::LeastSquares ? "lsgan" : "log"; }

gen::AdversarialForm form_from(const std::string& s) {
  if (s == "lsgan") return gen::AdversarialForm::LeastSquares;
  if (s == "log") return gen::AdversarialForm::Log;
  throw ConfigError("adversarial must be 'lsgan' or 'log', got '" + s + "'");
}

ojson gen_arch_json(const gen::GenArch& a) {
  return {{"base_width", a.base_width},   {"content_channels", a.content_channels},
          {"style_dim", a.style_dim},     {"downsample", a.downsample},
          {"content_res_blocks", a.content_res_blocks}, {"decoder_res_blocks", a.decoder_res_blocks},
          {"mlp_hidden", a.mlp_hidden},   {"style_width", a.style_width},
          {"disc_width", a.disc_width},   {"first_kernel", a.first_kernel}};
}

template <class T>
void read_field(const json& j, const std::string& key, T& out, const std::string& where) {
  try {
    out = j.get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + key + ": wrong type (" + std::string(j.type_name()) + ")");
  }
}

}  // namespace

ojson to_json(const TrainConfig& c) {
  ojson j;
  j["gen_arch"] = gen_arch_json(c.gen_arch);
  j["align_arch"] = {{"instance_channels", c.align_arch.instance_channels}, {"res_blocks", c.align_arch.res_blocks}};
  j["lambda_cyc"] = c.lambda_cyc;
  j["lambda_gan"] = c.lambda_gan;
  j["lambda_align"] = c.lambda_align;
  j["lambda_reid"] = c.lambda_reid;
  j["lambda_recon"] = c.lambda_recon;
  j["recon_in_joint"] = c.recon_in_joint;
  j["margin"] = c.margin;
  j["identities_per_batch"] = c.identities_per_batch;
  j["images_per_identity"] = c.images_per_identity;
  j["holdout_per_identity"] = c.holdout_per_identity;
  j["flip_prob"] = c.flip_prob;
  j["lr"] = c.lr;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["lr_decay"] = c.lr_decay;
  j["decay_at"] = c.decay_at;
  j["pretrain_epochs"] = c.pretrain_epochs;
  j["joint_epochs"] = c.joint_epochs;
  j["steps_per_epoch"] = c.steps_per_epoch;
  j["seed"] = c.seed;
  j["set_level_sharing"] = c.set_level_sharing;
  j["instance_level_alignment"] = c.instance_level_alignment;
  j["stop_gradient_align"] = c.stop_gradient_align;
  j["feature_adversarial"] = c.feature_adversarial;
  j["separate_copy_init"] = c.separate_copy_init;
  j["adversarial"] = form_name(c.adversarial);
  j["divergence_patience"] = c.divergence_patience;
  return j;
}

void apply_json(TrainConfig& c, const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const json& v = it.value();
    if (k == "gen_arch" || k == "align_arch") {
      if (!v.is_object()) throw ConfigError(k + " must be an object");
      for (auto a = v.begin(); a != v.end(); ++a) {
        const std::string where = k + ".";
        auto& g = c.gen_arch;
        const std::string& f = a.key();
        if (k == "gen_arch") {
          if (f == "base_width") read_field(*a, f, g.base_width, where);
          else if (f == "content_channels") read_field(*a, f, g.content_channels, where);
          else if (f == "style_dim") read_field(*a, f, g.style_dim, where);
          else if (f == "downsample") read_field(*a, f, g.downsample, where);
          else if (f == "content_res_blocks") read_field(*a, f, g.content_res_blocks, where);
          else if (f == "decoder_res_blocks") read_field(*a, f, g.decoder_res_blocks, where);
          else if (f == "mlp_hidden") read_field(*a, f, g.mlp_hidden, where);
          else if (f == "style_width") read_field(*a, f, g.style_width, where);
          else if (f == "disc_width") read_field(*a, f, g.disc_width, where);
          else if (f == "first_kernel") read_field(*a, f, g.first_kernel, where);
          else throw ConfigError("unknown config key " + where + f);
        } else {
          if (f == "instance_channels") read_field(*a, f, c.align_arch.instance_channels, where);
          else if (f == "res_blocks") read_field(*a, f, c.align_arch.res_blocks, where);
          else throw ConfigError("unknown config key " + where + f);
        }
      }
    } else if (k == "lambda_cyc") read_field(v, k, c.lambda_cyc, "");
    else if (k == "lambda_gan") read_field(v, k, c.lambda_gan, "");
    else if (k == "lambda_align") read_field(v, k, c.lambda_align, "");
    else if (k == "lambda_reid") read_field(v, k, c.lambda_reid, "");
    else if (k == "lambda_recon") read_field(v, k, c.lambda_recon, "");
    else if (k == "recon_in_joint") read_field(v, k, c.recon_in_joint, "");
    else if (k == "margin") read_field(v, k, c.margin, "");
    else if (k == "identities_per_batch") read_field(v, k, c.identities_per_batch, "");
    else if (k == "images_per_identity") read_field(v, k, c.images_per_identity, "");
    else if (k == "holdout_per_identity") read_field(v, k, c.holdout_per_identity, "");
    else if (k == "flip_prob") read_field(v, k, c.flip_prob, "");
    else if (k == "lr") read_field(v, k, c.lr, "");
    else if (k == "beta1") read_field(v, k, c.beta1, "");
    else if (k == "beta2") read_field(v, k, c.beta2, "");
    else if (k == "lr_decay") read_field(v, k, c.lr_decay, "");
    else if (k == "decay_at") read_field(v, k, c.decay_at, "");
    else if (k == "pretrain_epochs") read_field(v, k, c.pretrain_epochs, "");
    else if (k == "joint_epochs") read_field(v, k, c.joint_epochs, "");
    else if (k == "steps_per_epoch") read_field(v, k, c.steps_per_epoch, "");
    else if (k == "seed") read_field(v, k, c.seed, "");
    else if (k == "set_level_sharing") read_field(v, k, c.set_level_sharing, "");
    else if (k == "instance_level_alignment") read_field(v, k, c.instance_level_alignment, "");
    else if (k == "stop_gradient_align") read_field(v, k, c.stop_gradient_align, "");
    else if (k == "feature_adversarial") read_field(v, k, c.feature_adversarial, "");
    else if (k == "separate_copy_init") read_field(v, k, c.separate_copy_init, "");
    else if (k == "divergence_patience") read_field(v, k, c.divergence_patience, "");
    else if (k == "adversarial") {
      std::string s;
      read_field(v, k, s, "");
      c.adversarial = form_from(s);
    } else {
      throw ConfigError("unknown config key " + k);
    }
  }
}

TrainConfig config_from_json(const json& j, TrainConfig base) {
  apply_json(base, j);
  base.validate();
  return base;
}

std::string pretrain_key(const TrainConfig& c) {
  ojson j;
  j["gen_arch"] = gen_arch_json(c.gen_arch);
  for (const char* k : {"lambda_cyc", "lambda_gan", "lambda_recon", "identities_per_batch", "images_per_identity",
                        "holdout_per_identity", "flip_prob", "lr", "beta1", "beta2", "pretrain_epochs",
                        "steps_per_epoch", "seed", "adversarial", "divergence_patience"})
    j[k] = to_json(c)[k];
  return j.dump();
}

// ---------------------------------------------------------------------------

namespace {

void require_nonnegative(Real v, const char* name) {
  if (v < 0) throw ContractError(std::string("total_loss: component ") + name + " is negative (" + std::to_string(v) + ")");
}

}  // namespace

Real total_loss(const LossValues& v, const TrainConfig& c, bool with_recon) {
  for (auto [name, x] : {std::pair{"cyc", v.cyc}, std::pair{"gan", v.gan}, std::pair{"align", v.align},
                         std::pair{"cls", v.cls}, std::pair{"triplet", v.triplet}, std::pair{"recon", v.recon}})
    require_nonnegative(x, name);
  Real t = c.lambda_cyc * v.cyc + c.lambda_gan * v.gan + c.lambda_align * v.align + c.lambda_reid * (v.cls + v.triplet);
  if (with_recon) t += c.lambda_recon * v.recon;
  return t;
}

Var total_loss(const LossVars& v, const TrainConfig& c, bool with_recon) {
  Var total;
  auto add = [&](const Var& term, Real weight, const char* name) {
    if (!term.defined()) return;
    require_nonnegative(term.item(), name);
    Var w = ops::scale(term, weight);
    total = total.defined() ? ops::add(total, w) : w;
  };
  add(v.cyc, c.lambda_cyc, "cyc");
  add(v.gan, c.lambda_gan, "gan");
  add(v.align, c.lambda_align, "align");
  add(v.cls, c.lambda_reid, "cls");
  add(v.triplet, c.lambda_reid, "triplet");
  if (with_recon) add(v.recon, c.lambda_recon, "recon");
  return total.defined() ? total : Var(Tensor::scalar(0));
}

// ---------------------------------------------------------------------------

FeatureDiscriminator::FeatureDiscriminator(int channels, int width, std::mt19937_64& rng)
    : conv1_(channels, width, 3, 1, 1, rng), out_(width, 1, 3, 1, 1, rng) {}

Var FeatureDiscriminator::operator()(const Var& mid) { return out_(ops::leaky_relu(conv1_(mid), 0.2)); }

void FeatureDiscriminator::collect(const std::string& prefix, std::vector<nn::NamedParam>& params,
                                   std::vector<nn::NamedBuffer>& buffers) {
  conv1_.collect(nn::join_name(prefix, "conv1"), params, buffers);
  out_.collect(nn::join_name(prefix, "out"), params, buffers);
}

std::string to_string(Stage s) { return s == Stage::Pretrain ? "pretrain" : "joint"; }

namespace {

Stage stage_from(const std::string& s) {
  if (s == "pretrain") return Stage::Pretrain;
  if (s == "joint") return Stage::Joint;
  throw std::runtime_error("unknown stage '" + s + "'");
}

optim::AdamOptions adam_options(const TrainConfig& c) { return {c.lr, c.beta1, c.beta2, 1e-8}; }

std::vector<nn::NamedParam> align_owned(align::AlignmentModel& a) {
  std::vector<nn::NamedParam> p;
  std::vector<nn::NamedBuffer> b;
  a.collect(p, b);
  return p;
}

}  // namespace

void TrainState::build_alignment() {
  align::AlignArch arch = config.align_arch;
  arch.num_classes = num_classes;
  std::mt19937_64 init(data::record_seed(config.seed, 3));
  align = std::make_unique<align::AlignmentModel>(
      config.set_level_sharing ? align::AlignmentModel::shared_with(*gen, arch, init)
                               : align::AlignmentModel::separate(config.gen_arch, arch, init,
                                                                 config.separate_copy_init ? gen->content.get() : nullptr));
  opt_align = optim::Adam(align_owned(*align), adam_options(config));
  feature_dis.reset();
  opt_feature_dis = optim::Adam();
  if (config.feature_adversarial) {
    std::mt19937_64 finit(data::record_seed(config.seed, 4));
    feature_dis = std::make_unique<FeatureDiscriminator>(config.gen_arch.content_channels, config.gen_arch.disc_width, finit);
    opt_feature_dis = optim::Adam(feature_dis->parameters("feature_dis"), adam_options(config));
  }
}

TrainState make_state(const TrainConfig& config, int num_classes) {
  config.validate();
  if (num_classes < 2) throw ConfigError("need at least two training identities");
  TrainState s;
  s.config = config;
  s.num_classes = num_classes;
  std::mt19937_64 init(data::record_seed(config.seed, 1));
  s.gen = std::make_unique<gen::GenerationModel>(config.gen_arch, init);
  s.opt_gen = optim::Adam(s.gen->generator_parameters(), adam_options(config));
  s.opt_dis = optim::Adam(s.gen->discriminator_parameters(), adam_options(config));
  s.rng.seed(data::record_seed(config.seed, 2));
  return s;
}

long steps_per_epoch(const TrainConfig& c, const data::Dataset& data) {
  if (c.steps_per_epoch > 0) return c.steps_per_epoch;
  const int ids = data.num_train_ids();
  return std::max(1, (ids + c.identities_per_batch - 1) / c.identities_per_batch);
}

Real joint_lr(const TrainConfig& c, int epoch) {
  const int decay_epoch = static_cast<int>(std::floor(c.decay_at * c.joint_epochs));
  return epoch >= decay_epoch && c.joint_epochs > 0 ? c.lr * c.lr_decay : c.lr;
}

// ---------------------------------------------------------------------------

namespace {

void clear_grads(optim::Adam& opt) {
  for (const auto& p : opt.params()) {
    Var v = p.var;
    v.grad().fill(0);
  }
}

bool finite_losses(const std::map<std::string, Real>& losses) {
  for (const auto& [k, v] : losses)
    if (!std::isfinite(v)) return false;
  return true;
}

// A finite loss can still carry NaN gradients, e.g. through a ReLU whose
// input is NaN.
bool finite_grads(const optim::Adam& opt) {
  for (const auto& p : opt.params())
    if (p.var.has_grad() && !all_finite(p.var.node()->grad)) return false;
  return true;
}

}  // namespace

StepRecord train_step(TrainState& state, const data::Dataset& data, Stage stage) {
  const TrainConfig& cfg = state.config;
  const bool joint = stage == Stage::Joint;
  if (joint && !state.align) state.build_alignment();
  const bool gen_active = !joint || cfg.generator_in_joint();
  const bool il = joint && cfg.effective_lambda_align() > 0;
  const bool feat_adv = joint && cfg.feature_adversarial;
  const long spe = steps_per_epoch(cfg, data);

  StepRecord rec;
  rec.stage = stage;
  rec.step = joint ? state.joint_step : state.pretrain_step;
  rec.epoch = static_cast<int>(rec.step / spe);
  rec.lr = joint ? joint_lr(cfg, rec.epoch) : cfg.lr;
  for (auto* opt : {&state.opt_gen, &state.opt_dis, &state.opt_align, &state.opt_feature_dis}) opt->set_lr(rec.lr);

  data::PKSampler sampler{cfg.identities_per_batch, cfg.images_per_identity, cfg.holdout_per_identity};
  auto [rgb, ir] = data::load_batch(data, sampler, state.rng, cfg.flip_prob);
  const gen::Pairing pairing = gen::intra_person_pairing(rgb, ir, state.rng);
  const int n = rgb.size();
  Var x_rgb(rgb.pixels), x_ir(ir.pixels);

  for (auto* opt : {&state.opt_gen, &state.opt_dis, &state.opt_align, &state.opt_feature_dis}) clear_grads(*opt);

  LossVars terms;
  Var disc_total, feat_dis_loss, feat_adv_loss;
  Var content;
  gen::QuadBatch quads;
  gen::CycleOutputs cyc;
  gen::GenerationModel& g = *state.gen;

  if (gen_active) {
    content = gen::encode_content(g, ops::concat_rows({x_rgb, x_ir}));
    Var c_rgb = ops::slice_rows(content, 0, n), c_ir = ops::slice_rows(content, n, 2 * n);
    Var s_rgb = gen::encode_style(g, x_rgb, Modality::RGB), s_ir = gen::encode_style(g, x_ir, Modality::IR);
    quads = gen::exchange_from_codes(g, x_rgb, x_ir, c_rgb, c_ir, s_rgb, s_ir, rgb.identity, ir.identity, pairing);
    cyc = gen::cycle_forward(g, quads);
    terms.cyc = cyc.loss;
    auto adv = gen::adversarial_losses(g, x_rgb, x_ir, quads.x_ir2rgb, quads.x_rgb2ir, cfg.adversarial);
    terms.gan = adv.gen_loss;
    disc_total = adv.disc_loss;
    if (!joint || cfg.recon_in_joint)
      terms.recon = gen::recon_loss_from(x_rgb, gen::decode(g, c_rgb, s_rgb, Modality::RGB), x_ir,
                                         gen::decode(g, c_ir, s_ir, Modality::IR));
  }

  if (joint) {
    align::AlignmentModel& a = *state.align;
    Var real_images = ops::concat_rows({x_rgb, x_ir});
    Var m_real = cfg.set_level_sharing && gen_active ? content : align::encode_set_level(a, real_images);
    Var m_fake;
    if (il) {
      Var fakes = ops::concat_rows({quads.x_ir2rgb, quads.x_rgb2ir});
      if (cfg.set_level_sharing && !cfg.stop_gradient_align)
        m_fake = ops::concat_rows({cyc.content_ir2rgb, cyc.content_rgb2ir});
      else
        m_fake = align::encode_set_level(a, cfg.stop_gradient_align ? detach(fakes) : fakes);
    }
    auto f = align::forward_features(a, m_real, nn::Mode::Train);
    std::vector<int> labels;
    for (int id : rgb.identity) labels.push_back(data.train_label(id));
    for (int id : ir.identity) labels.push_back(data.train_label(id));
    terms.cls = align::cls_loss_from_logits(f.logits, labels);
    terms.triplet = align::triplet_loss(f.pooled, labels, cfg.margin);
    if (il) {
      // Generated images are normalized in a pass of their own, so the real
      // batch's statistics and the test-time running statistics stay real-only.
      auto ff = align::forward_features(a, m_fake, nn::Mode::TrainFrozenStats);
      Var p_rgb = ops::slice_rows(f.probs, 0, n);
      Var p_ir = ops::gather_rows(ops::slice_rows(f.probs, n, 2 * n), pairing);
      Var p_ir2rgb = ops::slice_rows(ff.probs, 0, n);
      Var p_rgb2ir = ops::slice_rows(ff.probs, n, 2 * n);
      terms.align = align::align_loss_from_probs(p_ir, p_ir2rgb, p_rgb2ir, p_rgb);
    }
    if (feat_adv) {
      FeatureDiscriminator& fd = *state.feature_dis;
      Var m_rgb = ops::slice_rows(m_real, 0, n), m_ir = ops::slice_rows(m_real, n, 2 * n);
      // The encoder is rewarded for swapping the discriminator's modality labels.
      feat_adv_loss = gen::disc_loss_from_scores(fd(m_ir), fd(m_rgb), cfg.adversarial);
      feat_dis_loss = gen::disc_loss_from_scores(fd(detach(m_rgb)), fd(detach(m_ir)), cfg.adversarial);
    }
  }

  auto record = [&](const char* name, const Var& v) {
    if (v.defined()) rec.losses[name] = v.item();
  };
  record("cyc", terms.cyc);
  record("gan_gen", terms.gan);
  record("gan_dis", disc_total);
  record("recon", terms.recon);
  record("align", terms.align);
  record("cls", terms.cls);
  record("triplet", terms.triplet);
  record("feat_adv", feat_adv_loss);
  record("feat_dis", feat_dis_loss);

  if (!finite_losses(rec.losses)) {
    rec.skipped = true;
  } else {
    Var total;
    if (joint) {
      total = total_loss(terms, cfg, cfg.recon_in_joint);
    } else {
      // Pretraining objective: recon + cycle + adversarial.
      LossVars pre{terms.cyc, terms.gan, Var(), Var(), Var(), terms.recon};
      total = total_loss(pre, cfg, true);
    }
    if (feat_adv_loss.defined()) total = ops::add(total, ops::scale(feat_adv_loss, cfg.lambda_gan));
    rec.losses["total"] = total.item();
    backward(total);
    clear_grads(state.opt_dis);
    clear_grads(state.opt_feature_dis);
    rec.skipped = !finite_grads(state.opt_gen) || !finite_grads(state.opt_align);
  }
  if (rec.skipped) {
    ++state.nonfinite_streak;
  } else {
    state.nonfinite_streak = 0;
    if (gen_active) {
      state.opt_gen.step();
      ++state.gen_updates;
    }
    if (joint) state.opt_align.step();
    if (gen_active) {
      backward(disc_total);
      if (finite_grads(state.opt_dis)) {
        state.opt_dis.step();
        ++state.dis_updates;
      } else {
        clear_grads(state.opt_dis);
      }
    }
    if (feat_dis_loss.defined()) {
      backward(feat_dis_loss);
      state.opt_feature_dis.step();
    }
  }

  if (joint)
    ++state.joint_step;
  else
    ++state.pretrain_step;
  state.history.push_back(rec);
  return rec;
}

namespace {

std::string describe(const StepRecord& r) {
  std::ostringstream s;
  s << to_string(r.stage) << " step " << r.step << ":";
  for (const auto& [k, v] : r.losses) s << ' ' << k << '=' << v;
  return s.str();
}

void run_stage(TrainState& state, const data::Dataset& data, const TrainHooks& hooks, Stage stage) {
  const long spe = steps_per_epoch(state.config, data);
  const int epochs = stage == Stage::Pretrain ? state.config.pretrain_epochs : state.config.joint_epochs;
  const long total = spe * epochs;
  long& counter = stage == Stage::Pretrain ? state.pretrain_step : state.joint_step;
  long done = 0;
  auto epoch_start = std::chrono::steady_clock::now();
  while (counter < total && (hooks.max_steps < 0 || done < hooks.max_steps)) {
    const StepRecord rec = train_step(state, data, stage);
    ++done;
    if (hooks.on_step) hooks.on_step(rec);
    if (state.nonfinite_streak >= state.config.divergence_patience) {
      if (!hooks.dump_path.empty()) save_checkpoint(state, hooks.dump_path);
      throw DivergenceError("non-finite loss for " + std::to_string(state.nonfinite_streak) +
                            " consecutive steps; last " + describe(rec) +
                            (hooks.dump_path.empty() ? "" : "; state dumped to " + hooks.dump_path.string()));
    }
    if (counter % spe == 0 && hooks.on_epoch) {
      EpochSummary e;
      e.stage = stage;
      e.epoch = static_cast<int>(counter / spe) - 1;
      e.step = counter;
      e.lr = rec.lr;
      std::map<std::string, long> counts;
      const long first = static_cast<long>(state.history.size()) - spe;
      for (long i = std::max(0L, first); i < static_cast<long>(state.history.size()); ++i) {
        const auto& h = state.history[i];
        if (h.stage != stage || h.skipped) continue;
        for (const auto& [k, v] : h.losses) {
          e.mean_losses[k] += v;
          ++counts[k];
        }
      }
      for (auto& [k, v] : e.mean_losses) v /= counts[k];
      const auto now = std::chrono::steady_clock::now();
      e.wall_seconds = std::chrono::duration<double>(now - epoch_start).count();
      epoch_start = now;
      hooks.on_epoch(e);
    }
  }
}

}  // namespace

void pretrain_generator(TrainState& state, const data::Dataset& data, const TrainHooks& hooks) {
  run_stage(state, data, hooks, Stage::Pretrain);
}

TrainState pretrain_generator(const TrainConfig& config, const data::Dataset& data, const TrainHooks& hooks) {
  TrainState s = make_state(config, data.num_train_ids());
  pretrain_generator(s, data, hooks);
  return s;
}

void joint_train(TrainState& state, const data::Dataset& data, const TrainHooks& hooks) {
  if (!state.align) state.build_alignment();
  run_stage(state, data, hooks, Stage::Joint);
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'X', 'M', 'R', 'E', 'I', 'D', 'C', 'K'};

struct ArrayRef {
  std::string name;
  Tensor* tensor;
};

// Every array a state owns, in a fixed order.
std::vector<ArrayRef> state_arrays(TrainState& s) {
  std::vector<ArrayRef> out;
  std::vector<nn::NamedParam> params;
  std::vector<nn::NamedBuffer> buffers;
  s.gen->collect(params, buffers);
  if (s.align) s.align->collect(params, buffers);
  if (s.feature_dis) s.feature_dis->collect("feature_dis", params, buffers);
  for (auto& p : params) out.push_back({"param/" + p.name, &p.var.mutable_value()});
  for (auto& b : buffers) out.push_back({"buffer/" + b.name, b.tensor});
  auto moments = [&](optim::Adam& opt, const std::string& tag) {
    auto& m = opt.first_moments();
    auto& v = opt.second_moments();
    for (std::size_t i = 0; i < opt.params().size(); ++i) {
      out.push_back({"adam/" + tag + "/m/" + opt.params()[i].name, &m[i]});
      out.push_back({"adam/" + tag + "/v/" + opt.params()[i].name, &v[i]});
    }
  };
  moments(s.opt_gen, "gen");
  moments(s.opt_dis, "dis");
  moments(s.opt_align, "align");
  moments(s.opt_feature_dis, "feature_dis");
  return out;
}

ojson record_json(const StepRecord& r) {
  ojson j;
  j["stage"] = to_string(r.stage);
  j["epoch"] = r.epoch;
  j["step"] = r.step;
  j["lr"] = r.lr;
  j["skipped"] = r.skipped;
  j["losses"] = r.losses;
  return j;
}

StepRecord record_from(const json& j) {
  StepRecord r;
  r.stage = stage_from(j.at("stage").get<std::string>());
  r.epoch = j.at("epoch").get<int>();
  r.step = j.at("step").get<long>();
  r.lr = j.at("lr").get<Real>();
  r.skipped = j.at("skipped").get<bool>();
  r.losses = j.at("losses").get<std::map<std::string, Real>>();
  return r;
}

}  // namespace

void write_checkpoint(const TrainState& state, std::ostream& out) {
  auto& s = const_cast<TrainState&>(state);
  const auto arrays = state_arrays(s);
  ojson h;
  h["format"] = "xmreid-checkpoint";
  h["version"] = kCheckpointVersion;
  h["config"] = to_json(s.config);
  h["num_classes"] = s.num_classes;
  h["has_alignment"] = static_cast<bool>(s.align);
  h["has_feature_dis"] = static_cast<bool>(s.feature_dis);
  h["pretrain_step"] = s.pretrain_step;
  h["joint_step"] = s.joint_step;
  h["dis_updates"] = s.dis_updates;
  h["gen_updates"] = s.gen_updates;
  h["nonfinite_streak"] = s.nonfinite_streak;
  std::ostringstream rng;
  rng << s.rng;
  h["rng"] = rng.str();
  h["optimizer_steps"] = {{"gen", s.opt_gen.steps()},
                          {"dis", s.opt_dis.steps()},
                          {"align", s.opt_align.steps()},
                          {"feature_dis", s.opt_feature_dis.steps()}};
  ojson hist = ojson::array();
  for (const auto& r : s.history) hist.push_back(record_json(r));
  h["history"] = std::move(hist);
  ojson index = ojson::array();
  for (const auto& a : arrays) index.push_back({{"name", a.name}, {"shape", a.tensor->shape()}});
  h["arrays"] = std::move(index);

  const std::string header = h.dump();
  out.write(kMagic, 8);
  const std::uint32_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  const std::uint64_t len = header.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& a : arrays)
    out.write(reinterpret_cast<const char*>(a.tensor->data()), static_cast<std::streamsize>(a.tensor->size() * sizeof(Real)));
  if (!out) throw std::runtime_error("checkpoint write failed");
}

void save_checkpoint(const TrainState& state, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    write_checkpoint(state, out);
  }
  fs::rename(tmp, path);
}

TrainState read_checkpoint(std::istream& in, const std::string& origin) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw std::runtime_error(origin + ": not an xmreid checkpoint");
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (version != kCheckpointVersion)
    throw std::runtime_error(origin + ": unsupported checkpoint version " + std::to_string(version));
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error(origin + ": truncated checkpoint header");
  const json h = json::parse(header);

  TrainState s = make_state(config_from_json(h.at("config")), h.at("num_classes").get<int>());
  if (h.at("has_alignment").get<bool>()) s.build_alignment();
  if (h.at("has_feature_dis").get<bool>() != static_cast<bool>(s.feature_dis))
    throw std::runtime_error(origin + ": feature discriminator presence disagrees with its config");
  s.pretrain_step = h.at("pretrain_step").get<long>();
  s.joint_step = h.at("joint_step").get<long>();
  s.dis_updates = h.at("dis_updates").get<long>();
  s.gen_updates = h.at("gen_updates").get<long>();
  s.nonfinite_streak = h.at("nonfinite_streak").get<int>();
  std::istringstream rng(h.at("rng").get<std::string>());
  rng >> s.rng;
  const auto& steps = h.at("optimizer_steps");
  s.opt_gen.set_steps(steps.at("gen").get<long>());
  s.opt_dis.set_steps(steps.at("dis").get<long>());
  s.opt_align.set_steps(steps.at("align").get<long>());
  s.opt_feature_dis.set_steps(steps.at("feature_dis").get<long>());
  for (const auto& r : h.at("history")) s.history.push_back(record_from(r));

  auto arrays = state_arrays(s);
  const auto& index = h.at("arrays");
  if (index.size() != arrays.size())
    throw std::runtime_error(origin + ": checkpoint holds " + std::to_string(index.size()) + " arrays, model expects " +
                             std::to_string(arrays.size()));
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    const std::string name = index[i].at("name").get<std::string>();
    const Shape shape = index[i].at("shape").get<Shape>();
    if (name != arrays[i].name || shape != arrays[i].tensor->shape())
      throw std::runtime_error(origin + ": array " + name + " " + shape_string(shape) + " does not match " +
                               arrays[i].name + " " + shape_string(arrays[i].tensor->shape()));
    in.read(reinterpret_cast<char*>(arrays[i].tensor->data()),
            static_cast<std::streamsize>(arrays[i].tensor->size() * sizeof(Real)));
    if (!in) throw std::runtime_error(origin + ": truncated array data at " + name);
  }
  return s;
}

TrainState load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  return read_checkpoint(in, path.string());
}

TrainState clone_state(const TrainState& state) {
  std::stringstream buf;
  write_checkpoint(state, buf);
  return read_checkpoint(buf);
}

}  // namespace xmreid::train
