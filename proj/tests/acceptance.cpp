// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero if any criterion fails.
//
//   xmreid_acceptance [--work DIR] [--preset FILE] [--only 1,2,8]

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "oracles.hpp"
#include "support.hpp"
#include "xmreid/experiments.hpp"
#include "xmreid/optim.hpp"

using namespace xmreid;
using namespace xmreid::testing;
namespace fs = std::filesystem;
using json = nlohmann::json;
using data::Modality;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// ---------------------------------------------------------------------------
// 1. analytic vs central-difference gradients on a model under 1k parameters

Outcome gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(10);
  gen::GenArch arch = tiny_gen_arch();
  arch.mlp_hidden = 2;
  gen::GenerationModel m(arch, rng);
  align::AlignArch aarch = tiny_align_arch(3);
  aarch.res_blocks = 0;
  auto al = align::AlignmentModel::shared_with(m, aarch, rng);
  auto gp = m.generator_parameters();
  auto dp = m.discriminator_parameters();
  auto ap = al.trainable_parameters();
  const auto everything = optim::unique_params({gp, ap});
  const std::size_t n_params = count_parameters(optim::unique_params({gp, dp, ap}));

  const std::vector<int> ids{0, 0, 1, 2};
  const auto rgb = random_batch(ids, Modality::RGB, 8, 8, rng);
  const auto ir = random_batch(ids, Modality::IR, 8, 8, rng);
  const gen::Pairing pairing{1, 0, 2, 3};
  const Var x(rgb.pixels);
  auto quad = [&] { return gen::exchange_generate(m, rgb, ir, pairing); };
  auto pooled = [&] {
    return align::encode_instance_level(al, align::encode_set_level(al, x), align::Mode::Train).pooled;
  };

  struct Case {
    const char* name;
    const std::vector<nn::NamedParam>* params;
    std::function<Var()> loss;
  };
  const std::vector<Case> cases{
      {"recon", &gp, [&] { return gen::recon_loss(m, rgb, ir); }},
      {"cyc", &gp, [&] { return gen::cycle_loss(m, quad()); }},
      {"lsgan-dis", &dp,
       [&] {
         auto q = quad();
         return gen::adversarial_losses(m, q.x_rgb, q.x_ir, q.x_ir2rgb, q.x_rgb2ir).disc_loss;
       }},
      {"lsgan-gen", &gp,
       [&] {
         auto q = quad();
         return gen::adversarial_losses(m, q.x_rgb, q.x_ir, q.x_ir2rgb, q.x_rgb2ir).gen_loss;
       }},
      {"align", &everything, [&] { return align::align_loss(al, quad()); }},
      {"cls", &ap, [&] { return align::cls_loss(al, pooled(), ids); }},
      {"triplet", &ap, [&] { return align::triplet_loss(pooled(), ids, 0.3); }},
  };
  Real worst = 0;
  std::string worst_name, worst_entry, per_loss;
  std::size_t checked = 0;
  for (const auto& c : cases) {
    const auto r = check_gradients(*c.params, c.loss);
    checked += r.checked;
    per_loss += fmt(" %s=%.1e", c.name, r.max_rel);
    if (r.max_rel >= worst) {
      worst = r.max_rel;
      worst_name = c.name;
      worst_entry = r.worst;
    }
  }
  const double t = seconds_since(t0);
  Outcome o;
  o.pass = worst < 1e-4 && n_params <= 1000 && t < 60;
  o.detail = fmt("max rel err %.2e (%s) < 1e-4 over %zu entries, %zu params <= 1000, %.1fs < 60s;", worst,
                 worst_name.c_str(), checked, n_params, t) +
             per_loss;
  if (!o.pass) o.detail += "; worst entry " + worst_entry;
  return o;
}

// ---------------------------------------------------------------------------
// 2. retrieval metrics vs brute force, plus the two hand cases

Outcome metric_oracles() {
  std::mt19937_64 rng(99);
  Real worst = 0;
  int queries = 0, gallery = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto m = random_metric_instance(rng, trial);
    queries = std::max(queries, static_cast<int>(m.q.size()));
    gallery = std::max(gallery, static_cast<int>(m.g.size()));
    const Tensor st = to_tensor(m.sim);
    const auto got = eval::cmc(st, m.q, m.g, m.max_rank);
    const auto want = oracle_cmc(m.sim, m.q, m.g, m.max_rank);
    for (int k = 0; k < m.max_rank; ++k) worst = std::max(worst, std::abs(got[k] - want[k]));
    Real ap = 0;
    for (std::size_t i = 0; i < m.q.size(); ++i) ap += oracle_ap(m.sim[i], m.q[i], m.g);
    worst = std::max(worst, std::abs(eval::map_score(st, m.q, m.g) - ap / m.q.size()));
  }

  const Tensor sim({2, 3}, {0.9, 0.1, 0.2, 0.8, 0.3, 0.1});
  const auto hand = eval::cmc(sim, std::vector<int>{0, 1}, std::vector<int>{0, 1, 2}, 2);
  const std::vector<Real> s{0.9, 0.8, 0.7, 0.6, 0.5};
  const Real hand_ap = eval::average_precision(s, 7, std::vector<int>{7, 1, 7, 2, 3});
  const bool hand_ok = std::abs(hand[0] - 0.5) < 1e-12 && std::abs(hand[1] - 1.0) < 1e-12 &&
                       std::abs(hand_ap - 0.8333) < 5e-5;
  Outcome o;
  o.pass = worst <= 1e-12 && hand_ok && queries <= 20 && gallery <= 50;
  o.detail = fmt("200 instances (<=%d queries, <=%d gallery): max |diff| %.1e <= 1e-12; hand CMC [%.4f, %.4f], AP %.4f",
                 queries, gallery, worst, hand[0], hand[1], hand_ap);
  return o;
}

// ---------------------------------------------------------------------------
// 3. the set-level encoder is the content encoder, before and after training

Outcome weight_sharing() {
  const auto& ds = small_dataset();
  train::TrainConfig c;
  c.gen_arch = tiny_gen_arch();
  c.gen_arch.base_width = 4;
  c.gen_arch.content_channels = 4;
  c.align_arch = tiny_align_arch(ds.num_train_ids());
  c.set_level_sharing = true;
  c.lr = 1e-2;
  c.seed = 5;
  auto s = train::make_state(c, ds.num_train_ids());
  s.build_alignment();
  const Tensor x = ds.batch({0, 1, 2, 3, 4, 5}).pixels;

  auto max_diff = [&] {
    NoGradGuard guard;
    const Tensor a = align::encode_set_level(*s.align, Var(x)).value();
    const Tensor b = (*s.gen->content)(Var(x)).value();
    if (a.shape() != b.shape()) return std::numeric_limits<Real>::infinity();
    return max_abs_diff(a, b);
  };
  auto content_values = [&] {
    std::vector<nn::NamedParam> ps;
    std::vector<nn::NamedBuffer> bs;
    s.gen->content->collect("content", ps, bs);
    std::vector<Real> out;
    for (auto& p : ps) out.insert(out.end(), p.var.value().values().begin(), p.var.value().values().end());
    return out;
  };
  const Real before = max_diff();
  const auto w0 = content_values();
  const long updates0 = s.gen_updates;
  for (int i = 0; i < 10; ++i) train::train_step(s, ds, train::Stage::Joint);
  const Real after = max_diff();
  const bool moved = content_values() != w0;
  Outcome o;
  o.pass = before == 0 && after == 0 && moved && s.gen_updates - updates0 == 10;
  o.detail = fmt("max |E^sl(x) - E^i(x)| before %.1e, after %ld optimizer steps %.1e; shared weights moved: %s",
                 before, s.gen_updates - updates0, after, moved ? "yes" : "no");
  return o;
}

// ---------------------------------------------------------------------------
// 4-7. trained models on the default synthetic dataset

struct Preset {
  data::GenerateConfig dataset;
  train::TrainConfig config;
  std::vector<std::uint64_t> ablation_seeds, sweep_seeds;
  std::vector<Real> sweep_values;
  eval::EvalOptions eval;
  int hist_bins = 20;
};

Preset load_preset(const fs::path& path) {
  const json j = json::parse(slurp(path));
  Preset p;
  const auto& d = j.at("dataset");
  p.dataset.ids_train = d.at("ids_train");
  p.dataset.ids_test = d.at("ids_test");
  p.dataset.per_modality = d.at("per_modality");
  p.dataset.height = d.at("height");
  p.dataset.width = d.at("width");
  p.dataset.seed = d.at("seed");
  p.config = train::config_from_json(j.at("config"));
  p.ablation_seeds = j.at("ablation_seeds").get<std::vector<std::uint64_t>>();
  p.sweep_seeds = j.at("sweep_seeds").get<std::vector<std::uint64_t>>();
  p.sweep_values = j.at("sweep_values").get<std::vector<Real>>();
  p.eval.repeats = j.at("eval_repeats");
  p.eval.seed = j.at("eval_seed");
  p.hist_bins = j.at("hist_bins");
  return p;
}

data::Dataset ensure_dataset(const data::GenerateConfig& g, const fs::path& dir) {
  if (!fs::exists(dir / "dataset.json")) {
    data::GenerateConfig c = g;
    c.overwrite = true;
    data::generate_dataset(c, dir);
  }
  return data::Dataset::load(dir);
}

struct TrainedSuite {
  Outcome ablation, sweep, fidelity, histogram;
};

TrainedSuite trained_suite(const Preset& p, const fs::path& work, const std::set<int>& wanted) {
  TrainedSuite out;
  const auto t_data = std::chrono::steady_clock::now();
  const auto ds = ensure_dataset(p.dataset, work / "data");
  std::cout << fmt("  dataset ready (%d train identities) in %.0fs", ds.num_train_ids(), seconds_since(t_data))
            << std::endl;
  exp::RunCache cache(work / "pretrain_cache");
  const auto sl_il = exp::ablation_variants()[3];
  const std::string probe_label = sl_il.name + "/seed" + std::to_string(p.ablation_seeds.front());
  std::optional<eval::FidelityStats> fid;
  std::optional<Real> trained_gap;

  auto on_run = [&](const std::string& label, const exp::RunResult& r, train::TrainState& s) {
    std::cout << fmt("  run %-32s R1 %5.1f  mAP %5.1f", label.c_str(), 100 * r.rank1(), 100 * r.report.map)
              << std::endl;
    if (label != probe_label) return;
    const int hold = std::max(1, s.config.holdout_per_identity);
    const auto rgb = data::held_out_records(ds, Modality::RGB, hold);
    const auto ir = data::held_out_records(ds, Modality::IR, hold);
    fid = eval::generation_fidelity(*s.gen, ds, rgb, ir);
    const std::vector<int> rows(rgb.begin(), rgb.begin() + std::min<std::size_t>(8, rgb.size()));
    eval::write_quad_grid(*s.gen, ds, rows, ir, work / "quads.png");
    const auto h = eval::similarity_histograms(*s.align, ds, p.hist_bins);
    eval::write_histograms_png(h, work / "hist_trained.png");
    trained_gap = h.gap();
  };

  const auto t0 = std::chrono::steady_clock::now();
  if (wanted.count(4) || wanted.count(6) || wanted.count(7)) {
    const auto table = exp::ablation_suite(p.config, ds, p.ablation_seeds, p.eval, cache, on_run);
    const double t = seconds_since(t0);
    std::ofstream(work / "ablation.csv") << exp::ablation_csv(table);
    auto r1 = [&](int i) { return 100 * table.rows[i].rank1; };
    const Real base = r1(0), sl = r1(1), il = r1(2), both = r1(3);
    const bool order = both > sl && both > il && sl > base && il > base;
    out.ablation.pass = order && both - base >= 3;
    out.ablation.detail = fmt("mean R1 over %zu seeds: SL+IL %.2f, SL %.2f, IL %.2f, baseline %.2f; "
                              "ordering %s, SL+IL - baseline = %.2f (need >= 3); %.0f min on %u core(s)",
                              p.ablation_seeds.size(), both, sl, il, base, order ? "holds" : "violated",
                              both - base, t / 60, std::thread::hardware_concurrency());
  }
  if (wanted.count(5)) {
    train::TrainConfig base = sl_il.apply(p.config);
    const auto rep = exp::sweep_lambda_align(p.sweep_values, base, ds, p.sweep_seeds, p.eval, cache, on_run);
    std::ofstream(work / "sweep.csv") << exp::sweep_csv(rep);
    Real control = 0;
    for (const auto& row : rep.rows)
      if (row.lambda_align == 0) control = 100 * row.rank1;
    bool ok = true;
    std::string rows;
    for (const auto& row : rep.rows) {
      rows += fmt(" %g:%.2f", row.lambda_align, 100 * row.rank1);
      if (row.lambda_align > 0 && 100 * row.rank1 < control) ok = false;
    }
    out.sweep.pass = ok;
    out.sweep.detail = fmt("mean R1 over %zu seeds by lambda_align:", p.sweep_seeds.size()) + rows +
                       fmt("; every lambda > 0 %s the lambda = 0 control", ok ? ">=" : "NOT >=");
  }
  if (fid) {
    out.fidelity.pass = fid->ratio() < 0.5 && fid->recon_l1 < 0.05;
    out.fidelity.detail = fmt("x_ir2rgb color error %.4f vs gray passthrough %.4f: ratio %.3f (need < 0.5); "
                              "recon L1 %.4f (need < 0.05) on %d held-out train-identity pairs",
                              fid->color_error, fid->gray_error, fid->ratio(), fid->recon_l1, fid->pairs);
  } else {
    out.fidelity.detail = "no trained SL+IL model";
  }
  if (trained_gap) {
    train::TrainConfig c = sl_il.apply(p.config);
    c.seed = p.ablation_seeds.front();
    auto fresh = train::make_state(c, ds.num_train_ids());
    fresh.build_alignment();
    const auto h0 = eval::similarity_histograms(*fresh.align, ds, p.hist_bins);
    eval::write_histograms_png(h0, work / "hist_untrained.png");
    const Real gain = *trained_gap - h0.gap();
    out.histogram.pass = gain >= 0.2;
    out.histogram.detail = fmt("intra - inter cosine mean gap: trained %.4f, untrained %.4f, gain %.4f (need >= 0.2)",
                               *trained_gap, h0.gap(), gain);
  } else {
    out.histogram.detail = "no trained SL+IL model";
  }
  return out;
}

// ---------------------------------------------------------------------------
// 8. CLI reruns from the frozen config reproduce every metric bitwise

Outcome determinism(const fs::path& cli, const fs::path& work) {
  const fs::path dir = work / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path log = dir / "cli.log";
  auto run = [&](const std::string& args) {
    const std::string cmd = "OMP_NUM_THREADS=1 \"" + cli.string() + "\" " + args + " >>\"" + log.string() + "\" 2>&1";
    const int rc = std::system(cmd.c_str());
    if (rc != 0) throw std::runtime_error("command failed (" + std::to_string(rc) + "): " + args);
  };
  auto same = [&](const fs::path& a, const fs::path& b, std::vector<std::string>& mismatched) {
    if (!fs::exists(a) || !fs::exists(b) || slurp(a) != slurp(b))
      mismatched.push_back(fs::relative(a, dir).string());
  };

  std::vector<std::string> bad;
  int compared = 0;
  const std::string gen = "gen-data --ids-train 12 --ids-test 6 --per-modality 4 --size 32x16 --seed 5 --out ";
  run(gen + "\"" + (dir / "data1").string() + "\"");
  run(gen + "\"" + (dir / "data2").string() + "\"");
  for (const auto& e : fs::recursive_directory_iterator(dir / "data1")) {
    if (!e.is_regular_file()) continue;
    same(e.path(), dir / "data2" / fs::relative(e.path(), dir / "data1"), bad);
    ++compared;
  }

  train::TrainConfig c;
  c.gen_arch = tiny_gen_arch();
  c.gen_arch.base_width = 4;
  c.gen_arch.content_channels = 4;
  c.align_arch.instance_channels = 8;
  c.pretrain_epochs = 1;
  c.joint_epochs = 2;
  c.lr = 1e-3;
  c.seed = 11;
  std::ofstream(dir / "base.json") << train::to_json(c).dump(2);
  const std::string data = " --data \"" + (dir / "data1").string() + "\"";
  auto out = [&](const char* name) { return " --out \"" + (dir / name).string() + "\""; };
  run("train" + data + " --config \"" + (dir / "base.json").string() + "\" --eval --repeats 3" + out("train1"));
  run("train" + data + " --config \"" + (dir / "train1" / "config.json").string() + "\" --eval --repeats 3" +
      out("train2"));
  for (const char* f : {"report.json", "model.ckpt", "config.json"}) {
    same(dir / "train1" / f, dir / "train2" / f, bad);
    ++compared;
  }
  const std::string ckpt = " --checkpoint \"" + (dir / "train1" / "model.ckpt").string() + "\"";
  for (const char* name : {"eval1", "eval2"}) run("eval" + data + ckpt + " --fidelity --repeats 3" + out(name));
  for (const char* f : {"report.json", "fidelity.json"}) {
    same(dir / "eval1" / f, dir / "eval2" / f, bad);
    ++compared;
  }
  for (const char* name : {"hist1", "hist2"}) run("hist" + data + ckpt + out(name));
  same(dir / "hist1" / "hist.csv", dir / "hist2" / "hist.csv", bad);
  ++compared;
  // The rerun must report what the first run reported, not merely agree with itself.
  const json r1 = json::parse(slurp(dir / "train1" / "report.json"));
  const json e1 = json::parse(slurp(dir / "eval1" / "report.json"));
  if (r1 != e1) bad.push_back("train report vs eval report");

  Outcome o;
  o.pass = bad.empty();
  o.detail = fmt("gen-data, train --eval, eval --fidelity and hist rerun single-threaded: %d files compared, %zu differ",
                 compared, bad.size());
  for (const auto& b : bad) o.detail += " [" + b + "]";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xmreid acceptance checks"};
  fs::path work = fs::temp_directory_path() / "xmreid_acceptance";
  fs::path preset_path = XMREID_ACCEPTANCE_PRESET;
  fs::path cli = XMREID_CLI;
  std::string only;
  app.add_option("--work", work, "Working directory (dataset, caches, figures)");
  app.add_option("--preset", preset_path, "Training preset for criteria 4-7")->check(CLI::ExistingFile);
  app.add_option("--cli", cli, "Path to the xmreid executable");
  app.add_option("--only", only, "Comma-separated criteria to run");
  CLI11_PARSE(app, argc, argv);

  std::set<int> wanted{1, 2, 3, 4, 5, 6, 7, 8};
  if (!only.empty()) {
    wanted.clear();
    std::stringstream ss(only);
    for (std::string tok; std::getline(ss, tok, ',');) wanted.insert(std::stoi(tok));
  }
  fs::create_directories(work);
  const char* names[] = {"",
                         "gradient correctness",
                         "metric oracles",
                         "weight sharing",
                         "ablation ordering",
                         "lambda_align sweep",
                         "generation fidelity",
                         "similarity gap",
                         "determinism"};
  std::map<int, Outcome> results;
  auto guarded = [&](int id, const std::function<Outcome()>& f) {
    if (!wanted.count(id)) return;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      results[id] = f();
    } catch (const std::exception& e) {
      results[id] = {false, std::string("error: ") + e.what()};
    }
    std::cout << fmt("criterion %d %s  %-20s (%.0fs) ", id, results[id].pass ? "PASS" : "FAIL", names[id],
                     seconds_since(t0))
              << results[id].detail << std::endl;
  };

  guarded(1, gradient_correctness);
  guarded(2, metric_oracles);
  guarded(3, weight_sharing);
  guarded(8, [&] { return determinism(cli, work); });
  if (wanted.count(4) || wanted.count(5) || wanted.count(6) || wanted.count(7)) {
    const auto t0 = std::chrono::steady_clock::now();
    TrainedSuite suite;
    std::string failure;
    try {
      suite = trained_suite(load_preset(preset_path), work, wanted);
    } catch (const std::exception& e) {
      failure = std::string("error: ") + e.what();
    }
    const Outcome* parts[] = {&suite.ablation, &suite.sweep, &suite.fidelity, &suite.histogram};
    for (int id = 4; id <= 7; ++id) {
      if (!wanted.count(id)) continue;
      results[id] = *parts[id - 4];
      if (!failure.empty()) results[id] = {false, failure};
      std::cout << fmt("criterion %d %s  %-20s (%.0fs) ", id, results[id].pass ? "PASS" : "FAIL", names[id],
                       seconds_since(t0))
                << results[id].detail << std::endl;
    }
  }

  int passed = 0;
  json summary = json::object();
  for (const auto& [id, r] : results) {
    passed += r.pass;
    summary[std::to_string(id)] = {{"name", names[id]}, {"pass", r.pass}, {"detail", r.detail}};
  }
  std::ofstream(work / "acceptance.json") << summary.dump(2) << '\n';
  std::cout << fmt("acceptance: %d/%zu criteria passed", passed, results.size()) << std::endl;
  return passed == static_cast<int>(results.size()) ? 0 : 1;
}
