#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "xmreid/evaluation.hpp"
#include "xmreid/training.hpp"

// Multi-run experiments: the set-level / instance-level ablation and the
// alignment-weight sweep. Runs that share a seed and generator settings reuse
// one pretrained generator.
namespace xmreid::exp {

struct RunResult {
  int variant = 0;
  Real lambda_align = 0;
  std::uint64_t seed = 0;
  eval::EvalReport report;
  Real rank1() const { return report.rank(1); }
};

/// Pretrained states keyed by train::pretrain_key, and finished runs keyed by
/// their full config and evaluation settings. With a directory, pretrained
/// states are also kept on disk and reused by later processes.
class RunCache {
 public:
  explicit RunCache(std::filesystem::path dir = {}) : dir_(std::move(dir)) {}
  train::TrainState pretrained(const train::TrainConfig& config, const data::Dataset& data,
                               const train::TrainHooks& hooks = {});
  std::size_t pretrained_count() const { return states_.size(); }
  const RunResult* find_run(const std::string& key) const;
  void store_run(const std::string& key, const RunResult& r);

 private:
  std::filesystem::path dir_;
  std::map<std::string, std::string> states_;  // serialized checkpoints
  std::map<std::string, RunResult> runs_;
};

/// Pretrains (or reuses), then joint-trains `config`.
train::TrainState train_run(const train::TrainConfig& config, const data::Dataset& data, RunCache& cache,
                            const train::TrainHooks& hooks = {});

struct Variant {
  int index = 0;
  std::string name;
  bool set_level = false;
  bool instance_level = false;
  bool feature_adversarial = false;

  train::TrainConfig apply(train::TrainConfig base) const;
};

/// The five ablation rows: baseline, SL, IL, SL+IL, and a separate
/// adversarially aligned set-level encoder with IL.
std::vector<Variant> ablation_variants();

struct AblationRow {
  Variant variant;
  std::vector<RunResult> runs;  // one per seed
  Real rank1 = 0, rank10 = 0, rank20 = 0, map = 0;  // means over seeds
};

struct AblationTable {
  std::vector<AblationRow> rows;
  std::vector<std::uint64_t> seeds;
};

using RunCallback = std::function<void(const std::string& label, const RunResult&, train::TrainState&)>;

AblationTable ablation_suite(const train::TrainConfig& base, const data::Dataset& data,
                             const std::vector<std::uint64_t>& seeds, const eval::EvalOptions& eval_options,
                             RunCache& cache, const RunCallback& on_run = {});
/// index,name,SL,IL,R1,R10,R20,mAP,seeds (percentages).
std::string ablation_csv(const AblationTable& t);

struct SweepRow {
  Real lambda_align = 0;
  std::vector<RunResult> runs;
  Real rank1 = 0, map = 0;
};

struct SweepReport {
  std::vector<SweepRow> rows;
  std::vector<std::uint64_t> seeds;
};

/// One model per (value, seed), every other setting taken from `base`.
SweepReport sweep_lambda_align(const std::vector<Real>& values, const train::TrainConfig& base,
                               const data::Dataset& data, const std::vector<std::uint64_t>& seeds,
                               const eval::EvalOptions& eval_options, RunCache& cache,
                               const RunCallback& on_run = {});
std::string sweep_json(const SweepReport& r);
SweepReport sweep_from_json(const std::string& text);
std::string sweep_csv(const SweepReport& r);

}  // namespace xmreid::exp
