#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "xmreid/alignment.hpp"
#include "xmreid/optim.hpp"

// Generator pretraining and joint optimization of generation and alignment.
namespace xmreid::train {

struct TrainConfig {
  gen::GenArch gen_arch;
  align::AlignArch align_arch;  // num_classes is taken from the dataset

  Real lambda_cyc = 10;
  Real lambda_gan = 1;
  Real lambda_align = 1;
  Real lambda_reid = 1;
  Real lambda_recon = 10;
  bool recon_in_joint = false;
  Real margin = 0.3;

  int identities_per_batch = 4;  // P
  int images_per_identity = 2;   // K, per modality
  int holdout_per_identity = 1;  // train-identity images kept out of training
  Real flip_prob = 0.5;

  Real lr = 2e-4;
  Real beta1 = 0.5;
  Real beta2 = 0.999;
  Real lr_decay = 0.1;
  Real decay_at = 0.6;  // fraction of the joint epochs
  int pretrain_epochs = 30;
  int joint_epochs = 20;
  int steps_per_epoch = 0;  // 0: ceil(#train ids / P)

  std::uint64_t seed = 1;
  bool set_level_sharing = true;
  bool instance_level_alignment = true;
  bool stop_gradient_align = false;
  bool feature_adversarial = false;  // modality discriminator on a separate E^sl
  bool separate_copy_init = false;   // a separate E^sl starts from the pretrained E^i
  gen::AdversarialForm adversarial = gen::AdversarialForm::LeastSquares;
  int divergence_patience = 3;

  Real effective_lambda_align() const { return instance_level_alignment ? lambda_align : 0; }
  /// Generation and alignment are coupled only through a shared encoder or
  /// the alignment loss; otherwise the joint stage trains only the re-id side.
  bool generator_in_joint() const { return set_level_sharing || effective_lambda_align() > 0; }
  void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& c);
/// Overrides the fields present in `j`. Unknown keys and wrong types throw ConfigError.
void apply_json(TrainConfig& c, const nlohmann::json& j);
TrainConfig config_from_json(const nlohmann::json& j, TrainConfig base = {});
/// Fields the pretraining stage depends on; equal keys give identical pretrained states.
std::string pretrain_key(const TrainConfig& c);

struct LossValues {
  Real cyc = 0, gan = 0, align = 0, cls = 0, triplet = 0, recon = 0;
};
struct LossVars {
  Var cyc, gan, align, cls, triplet, recon;  // undefined terms are skipped
};

/// lambda_cyc*cyc + lambda_gan*gan + lambda_align*align + lambda_reid*(cls + triplet),
/// plus lambda_recon*recon when `with_recon`. Throws ContractError on a negative component.
Real total_loss(const LossValues& v, const TrainConfig& c, bool with_recon = false);
Var total_loss(const LossVars& v, const TrainConfig& c, bool with_recon = false);

/// Patch-style modality discriminator over set-level features (row 5 of the ablation).
class FeatureDiscriminator : public nn::Module {
 public:
  FeatureDiscriminator(int channels, int width, std::mt19937_64& rng);
  Var operator()(const Var& mid);
  void collect(const std::string& prefix, std::vector<nn::NamedParam>& params,
               std::vector<nn::NamedBuffer>& buffers) override;

 private:
  nn::Conv2d conv1_, out_;
};

enum class Stage { Pretrain, Joint };
std::string to_string(Stage s);

struct StepRecord {
  Stage stage = Stage::Pretrain;
  int epoch = 0;
  long step = 0;  // within the stage
  std::map<std::string, Real> losses;
  Real lr = 0;
  bool skipped = false;  // non-finite loss, no update
};

struct EpochSummary {
  Stage stage = Stage::Pretrain;
  int epoch = 0;
  long step = 0;
  std::map<std::string, Real> mean_losses;
  Real lr = 0;
  Real wall_seconds = 0;
};

struct TrainState {
  TrainConfig config;
  int num_classes = 0;
  std::unique_ptr<gen::GenerationModel> gen;
  std::unique_ptr<align::AlignmentModel> align;
  std::unique_ptr<FeatureDiscriminator> feature_dis;
  optim::Adam opt_gen, opt_dis, opt_align, opt_feature_dis;
  long pretrain_step = 0;
  long joint_step = 0;
  long dis_updates = 0;
  long gen_updates = 0;
  std::mt19937_64 rng;
  std::vector<StepRecord> history;
  int nonfinite_streak = 0;

  /// (Re)builds the alignment side for the current config. Parameters are
  /// drawn from a stream independent of the generator's.
  void build_alignment();
};

/// Fresh models and optimizers for `config`.
TrainState make_state(const TrainConfig& config, int num_classes);

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EpochSummary&)> on_epoch;
  long max_steps = -1;                  // stop after this many steps of this call
  std::filesystem::path dump_path;      // divergence dump
};

/// Thrown after `divergence_patience` consecutive non-finite steps.
class DivergenceError : public NumericError {
 public:
  using NumericError::NumericError;
};

long steps_per_epoch(const TrainConfig& c, const data::Dataset& data);

/// One alternating discriminator/generator step of the given stage.
StepRecord train_step(TrainState& state, const data::Dataset& data, Stage stage);

/// Runs (or resumes) pretraining until the configured number of epochs.
void pretrain_generator(TrainState& state, const data::Dataset& data, const TrainHooks& hooks = {});
TrainState pretrain_generator(const TrainConfig& config, const data::Dataset& data, const TrainHooks& hooks = {});
/// Runs (or resumes) joint training; builds the alignment side if absent.
void joint_train(TrainState& state, const data::Dataset& data, const TrainHooks& hooks = {});

Real joint_lr(const TrainConfig& c, int epoch);

// Checkpoints: magic, format version, a JSON header (config, counters, rng,
// history, array index) and raw little-endian float64 arrays.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
void write_checkpoint(const TrainState& state, std::ostream& out);
TrainState load_checkpoint(const std::filesystem::path& path);
TrainState read_checkpoint(std::istream& in, const std::string& origin = "<stream>");
/// Deep copy through the checkpoint format.
TrainState clone_state(const TrainState& state);

}  // namespace xmreid::train
