#include "xmreid/experiments.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace xmreid::exp {

using json = nlohmann::ordered_json;

namespace {

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void spit(const std::filesystem::path& p, const std::string& bytes) {
  const auto tmp = std::filesystem::path(p.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    out << bytes;
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, p);
}

}  // namespace

train::TrainState RunCache::pretrained(const train::TrainConfig& config, const data::Dataset& data,
                                       const train::TrainHooks& hooks) {
  const std::string key = train::pretrain_key(config);
  auto it = states_.find(key);
  const auto stem = dir_.empty() ? std::filesystem::path() : dir_ / fnv1a_hex(key);
  if (it == states_.end() && !dir_.empty() && std::filesystem::exists(stem.string() + ".key") &&
      slurp(stem.string() + ".key") == key && std::filesystem::exists(stem.string() + ".ckpt"))
    it = states_.emplace(key, slurp(stem.string() + ".ckpt")).first;
  if (it == states_.end()) {
    train::TrainState s = train::make_state(config, data.num_train_ids());
    train::pretrain_generator(s, data, hooks);
    std::ostringstream buf;
    train::write_checkpoint(s, buf);
    it = states_.emplace(key, buf.str()).first;
    if (!dir_.empty()) {
      std::filesystem::create_directories(dir_);
      spit(stem.string() + ".ckpt", it->second);
      spit(stem.string() + ".key", key);
    }
  }
  std::istringstream in(it->second);
  train::TrainState s = train::read_checkpoint(in, "pretrain cache");
  // Joint-stage settings come from the requested config.
  s.config = config;
  return s;
}

const RunResult* RunCache::find_run(const std::string& key) const {
  auto it = runs_.find(key);
  return it == runs_.end() ? nullptr : &it->second;
}

void RunCache::store_run(const std::string& key, const RunResult& r) { runs_[key] = r; }

train::TrainState train_run(const train::TrainConfig& config, const data::Dataset& data, RunCache& cache,
                            const train::TrainHooks& hooks) {
  train::TrainState s = cache.pretrained(config, data, hooks);
  train::joint_train(s, data, hooks);
  return s;
}

train::TrainConfig Variant::apply(train::TrainConfig base) const {
  base.set_level_sharing = set_level;
  base.instance_level_alignment = instance_level;
  base.feature_adversarial = feature_adversarial;
  return base;
}

std::vector<Variant> ablation_variants() {
  return {{1, "baseline", false, false, false},
          {2, "SL", true, false, false},
          {3, "IL", false, true, false},
          {4, "SL+IL", true, true, false},
          {5, "separate-adversarial+IL", false, true, true}};
}

namespace {

std::string run_key(const train::TrainConfig& c, const eval::EvalOptions& o) {
  // Runs that differ only in how the alignment term is switched off train identically.
  train::TrainConfig canon = c;
  if (canon.effective_lambda_align() == 0) {
    canon.instance_level_alignment = false;
    canon.lambda_align = 0;
  }
  json j;
  j["config"] = train::to_json(canon);
  j["eval"] = {{"shot", eval::to_string(o.shot)}, {"repeats", o.repeats}, {"seed", o.seed},
               {"max_rank", o.max_rank}, {"probe", data::to_string(o.probe)}};
  return j.dump();
}

RunResult run_one(const train::TrainConfig& config, const data::Dataset& data, const eval::EvalOptions& options,
                  RunCache& cache, int variant, const std::string& label, const RunCallback& on_run) {
  const std::string key = run_key(config, options);
  if (const RunResult* hit = cache.find_run(key)) {
    RunResult r = *hit;
    r.variant = variant;
    return r;
  }
  train::TrainState s = train_run(config, data, cache);
  RunResult r;
  r.variant = variant;
  r.lambda_align = config.effective_lambda_align();
  r.seed = config.seed;
  r.report = eval::evaluate_protocol(*s.align, data, options);
  cache.store_run(key, r);
  if (on_run) on_run(label, r, s);
  return r;
}

}  // namespace

AblationTable ablation_suite(const train::TrainConfig& base, const data::Dataset& data,
                             const std::vector<std::uint64_t>& seeds, const eval::EvalOptions& eval_options,
                             RunCache& cache, const RunCallback& on_run) {
  AblationTable t;
  t.seeds = seeds;
  for (const Variant& v : ablation_variants()) t.rows.push_back({v, {}, 0, 0, 0, 0});
  // Seed-major order keeps one pretrained generator hot per seed.
  for (std::uint64_t seed : seeds)
    for (auto& row : t.rows) {
      train::TrainConfig c = row.variant.apply(base);
      c.seed = seed;
      row.runs.push_back(run_one(c, data, eval_options, cache, row.variant.index,
                                 row.variant.name + "/seed" + std::to_string(seed), on_run));
    }
  for (auto& row : t.rows) {
    for (const auto& r : row.runs) {
      row.rank1 += r.report.rank(1);
      row.rank10 += r.report.rank(std::min(10, eval_options.max_rank));
      row.rank20 += r.report.rank(std::min(20, eval_options.max_rank));
      row.map += r.report.map;
    }
    const Real n = static_cast<Real>(row.runs.size());
    row.rank1 /= n;
    row.rank10 /= n;
    row.rank20 /= n;
    row.map /= n;
  }
  return t;
}

std::string ablation_csv(const AblationTable& t) {
  std::ostringstream s;
  s.precision(6);
  s << "index,name,SL,IL,R1,R10,R20,mAP,seeds\n";
  for (const auto& row : t.rows) {
    s << row.variant.index << ',' << row.variant.name << ',' << (row.variant.set_level ? 1 : 0) << ','
      << (row.variant.instance_level ? 1 : 0) << ',' << 100 * row.rank1 << ',' << 100 * row.rank10 << ','
      << 100 * row.rank20 << ',' << 100 * row.map << ',' << row.runs.size() << '\n';
  }
  return s.str();
}

SweepReport sweep_lambda_align(const std::vector<Real>& values, const train::TrainConfig& base,
                               const data::Dataset& data, const std::vector<std::uint64_t>& seeds,
                               const eval::EvalOptions& eval_options, RunCache& cache, const RunCallback& on_run) {
  for (Real v : values)
    if (!(v >= 0)) throw ContractError("sweep values must be nonnegative");
  SweepReport rep;
  rep.seeds = seeds;
  for (Real v : values) rep.rows.push_back({v, {}, 0, 0});
  for (std::uint64_t seed : seeds)
    for (auto& row : rep.rows) {
      train::TrainConfig c = base;
      c.lambda_align = row.lambda_align;
      c.instance_level_alignment = true;
      c.seed = seed;
      std::ostringstream label;
      label << "lambda" << row.lambda_align << "/seed" << seed;
      row.runs.push_back(run_one(c, data, eval_options, cache, 0, label.str(), on_run));
    }
  for (auto& row : rep.rows) {
    for (const auto& r : row.runs) {
      row.rank1 += r.report.rank(1);
      row.map += r.report.map;
    }
    row.rank1 /= static_cast<Real>(row.runs.size());
    row.map /= static_cast<Real>(row.runs.size());
  }
  return rep;
}

std::string sweep_json(const SweepReport& r) {
  json j;
  j["seeds"] = r.seeds;
  json rows = json::array();
  for (const auto& row : r.rows) {
    json runs = json::array();
    for (const auto& run : row.runs)
      runs.push_back({{"seed", run.seed}, {"lambda_align", run.lambda_align},
                      {"report", json::parse(eval::report_json(run.report))}});
    rows.push_back({{"lambda_align", row.lambda_align}, {"rank1", row.rank1}, {"map", row.map}, {"runs", runs}});
  }
  j["rows"] = rows;
  return j.dump(2);
}

SweepReport sweep_from_json(const std::string& text) {
  const json j = json::parse(text);
  SweepReport r;
  r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  for (const auto& row : j.at("rows")) {
    SweepRow sr;
    sr.lambda_align = row.at("lambda_align").get<Real>();
    sr.rank1 = row.at("rank1").get<Real>();
    sr.map = row.at("map").get<Real>();
    for (const auto& run : row.at("runs")) {
      RunResult rr;
      rr.seed = run.at("seed").get<std::uint64_t>();
      rr.lambda_align = run.at("lambda_align").get<Real>();
      rr.report = eval::report_from_json(run.at("report").dump());
      sr.runs.push_back(std::move(rr));
    }
    r.rows.push_back(std::move(sr));
  }
  return r;
}

std::string sweep_csv(const SweepReport& r) {
  std::ostringstream s;
  s.precision(6);
  s << "lambda_align,R1,mAP,seeds\n";
  for (const auto& row : r.rows)
    s << row.lambda_align << ',' << 100 * row.rank1 << ',' << 100 * row.map << ',' << row.runs.size() << '\n';
  return s.str();
}

}  // namespace xmreid::exp
