#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <set>
#include <sstream>

#include "support.hpp"
#include "xmreid/experiments.hpp"
#include "xmreid/training.hpp"

using namespace xmreid;
using namespace xmreid::train;
using data::ConfigError;
using xmreid::testing::small_dataset;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.gen_arch = xmreid::testing::tiny_gen_arch();
  c.align_arch = xmreid::testing::tiny_align_arch(2);
  c.pretrain_epochs = 1;
  c.joint_epochs = 2;
  c.seed = 7;
  return c;
}

std::vector<nn::NamedParam> all_gen_params(TrainState& s) {
  auto p = s.gen->generator_parameters();
  for (auto& d : s.gen->discriminator_parameters()) p.push_back(d);
  return p;
}

std::vector<Tensor> snapshot(TrainState& s) {
  std::vector<Tensor> out;
  for (auto& p : all_gen_params(s)) out.push_back(p.var.value());
  if (s.align)
    for (auto& p : s.align->trainable_parameters()) out.push_back(p.var.value());
  return out;
}

bool same_values(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a[i] == b[i])) return false;
  return true;
}

std::set<const void*> storage(const std::vector<nn::NamedParam>& ps) {
  std::set<const void*> s;
  for (const auto& p : ps) s.insert(&p.var.value());
  return s;
}

}  // namespace

TEST_CASE("total loss is the weighted sum of its components") {
  TrainConfig c;
  LossValues v{0.2, 0.5, 0.1, 0.6, 0.4, 0.3};
  CHECK(total_loss(v, c) == doctest::Approx(3.6).epsilon(1e-12));
  CHECK(total_loss(v, c, true) == doctest::Approx(3.6 + 10 * 0.3).epsilon(1e-12));

  TrainConfig d = c;
  d.lambda_cyc = 3;
  d.lambda_align = 0.5;
  d.lambda_reid = 2;
  CHECK(total_loss(v, d) == doctest::Approx(3 * 0.2 + 0.5 + 0.5 * 0.1 + 2 * 1.0).epsilon(1e-12));

  LossValues w{0.7, 0.1, 0.9, 0.2, 0.3, 0};
  LossValues sum{v.cyc + w.cyc, v.gan + w.gan, v.align + w.align, v.cls + w.cls, v.triplet + w.triplet, 0.3};
  CHECK(total_loss(sum, c) == doctest::Approx(total_loss(v, c) + total_loss(w, c)).epsilon(1e-12));

  LossValues bad = v;
  bad.align = -0.1;
  CHECK_THROWS_AS(total_loss(bad, c), ContractError);

  LossVars vars{Var(Tensor::scalar(0.2)), Var(Tensor::scalar(0.5)), Var(Tensor::scalar(0.1)), Var(Tensor::scalar(0.6)),
                Var(Tensor::scalar(0.4)), Var()};
  CHECK(total_loss(vars, c).item() == doctest::Approx(3.6).epsilon(1e-12));
}

TEST_CASE("config JSON round trip and strict parsing") {
  TrainConfig c = tiny_config();
  c.lambda_align = 0.5;
  c.stop_gradient_align = true;
  c.adversarial = gen::AdversarialForm::Log;
  c.set_level_sharing = false;
  const auto j = to_json(c);
  CHECK(to_json(config_from_json(j)).dump() == j.dump());

  TrainConfig d;
  CHECK_THROWS_AS(apply_json(d, nlohmann::json::parse(R"({"lamda_align": 1})")), ConfigError);
  CHECK_THROWS_AS(apply_json(d, nlohmann::json::parse(R"({"lr": "fast"})")), ConfigError);
  CHECK_THROWS_AS(apply_json(d, nlohmann::json::parse(R"({"gen_arch": {"bogus": 1}})")), ConfigError);
  apply_json(d, nlohmann::json::parse(R"({"lambda_align": 2, "gen_arch": {"style_dim": 4}})"));
  CHECK(d.lambda_align == 2);
  CHECK(d.gen_arch.style_dim == 4);
  CHECK(d.gen_arch.content_channels == TrainConfig{}.gen_arch.content_channels);

  TrainConfig e;
  e.lambda_gan = -1;
  CHECK_THROWS_AS(e.validate(), ConfigError);
  e = TrainConfig{};
  e.feature_adversarial = true;
  CHECK_THROWS_AS(e.validate(), ConfigError);
  e.set_level_sharing = false;
  CHECK_NOTHROW(e.validate());
}

TEST_CASE("pretraining key ignores joint-stage settings") {
  TrainConfig a = tiny_config(), b = a;
  b.lambda_align = 0.1;
  b.set_level_sharing = false;
  b.joint_epochs = 9;
  CHECK(pretrain_key(a) == pretrain_key(b));
  b.seed = 8;
  CHECK(pretrain_key(a) != pretrain_key(b));
  b = a;
  b.pretrain_epochs = 2;
  CHECK(pretrain_key(a) != pretrain_key(b));
}

TEST_CASE("learning-rate schedule and epoch length") {
  TrainConfig c;
  c.lr = 1e-3;
  CHECK(joint_lr(c, 0) == 1e-3);
  CHECK(joint_lr(c, 11) == 1e-3);
  CHECK(joint_lr(c, 12) == doctest::Approx(1e-4));
  CHECK(joint_lr(c, 19) == doctest::Approx(1e-4));
  CHECK(steps_per_epoch(tiny_config(), small_dataset()) == 3);  // 12 identities, P = 4
}

TEST_CASE("optimizers own disjoint parameter sets") {
  for (bool shared : {true, false}) {
    TrainConfig c = tiny_config();
    c.set_level_sharing = shared;
    TrainState s = make_state(c, small_dataset().num_train_ids());
    s.build_alignment();
    auto g = storage(s.opt_gen.params()), d = storage(s.opt_dis.params()), a = storage(s.opt_align.params());
    for (const void* p : d) {
      CHECK(g.count(p) == 0);
      CHECK(a.count(p) == 0);
    }
    for (const void* p : a) CHECK(g.count(p) == 0);
    CHECK(g.size() + d.size() == all_gen_params(s).size());
  }
}

TEST_CASE("discriminator and generator steps strictly alternate") {
  const auto& ds = small_dataset();
  TrainState s = make_state(tiny_config(), ds.num_train_ids());
  for (int i = 0; i < 4; ++i) {
    train_step(s, ds, Stage::Pretrain);
    CHECK(s.dis_updates == i + 1);
    CHECK(s.gen_updates == i + 1);
  }
  for (int i = 0; i < 3; ++i) train_step(s, ds, Stage::Joint);
  CHECK(s.dis_updates == 7);
  CHECK(s.gen_updates == 7);
  CHECK(s.opt_dis.steps() == s.opt_gen.steps());
  CHECK(s.opt_align.steps() == 3);
}

TEST_CASE("both sides receive gradients; the baseline leaves the generator frozen") {
  const auto& ds = small_dataset();
  TrainState s = make_state(tiny_config(), ds.num_train_ids());
  train_step(s, ds, Stage::Pretrain);
  auto dis = s.gen->discriminator_parameters();
  auto gen_p = s.gen->generator_parameters();
  std::vector<Tensor> dis_grads, gen_grads;
  for (auto& p : dis) dis_grads.push_back(p.var.grad());
  for (auto& p : gen_p) gen_grads.push_back(p.var.grad());
  Real dis_norm = 0, gen_norm = 0;
  for (auto& t : dis_grads)
    for (Real v : t.values()) dis_norm += v * v;
  for (auto& t : gen_grads)
    for (Real v : t.values()) gen_norm += v * v;
  CHECK(dis_norm > 0);
  CHECK(gen_norm > 0);

  // The baseline variant does not touch the generator at all in the joint stage.
  TrainConfig c = tiny_config();
  c.set_level_sharing = false;
  c.instance_level_alignment = false;
  TrainState b = make_state(c, ds.num_train_ids());
  train_step(b, ds, Stage::Pretrain);
  std::vector<Tensor> before;
  for (auto& p : all_gen_params(b)) before.push_back(p.var.value());
  for (int i = 0; i < 2; ++i) train_step(b, ds, Stage::Joint);
  std::vector<Tensor> after;
  for (auto& p : all_gen_params(b)) after.push_back(p.var.value());
  CHECK(same_values(before, after));
  CHECK(b.dis_updates == 1);
}

TEST_CASE("a shared set-level encoder stays aliased through training and checkpoints") {
  const auto& ds = small_dataset();
  TrainState s = make_state(tiny_config(), ds.num_train_ids());
  train_step(s, ds, Stage::Pretrain);
  Tensor e_before = s.gen->generator_parameters().front().var.value();
  for (int i = 0; i < 3; ++i) train_step(s, ds, Stage::Joint);
  REQUIRE(s.align->shares_set_level);
  CHECK(s.align->set_level.get() == s.gen->content.get());
  CHECK_FALSE(s.gen->generator_parameters().front().var.value() == e_before);

  TrainState c = clone_state(s);
  REQUIRE(c.align);
  CHECK(c.align->shares_set_level);
  CHECK(c.align->set_level.get() == c.gen->content.get());
  for (int i = 0; i < 2; ++i) train_step(c, ds, Stage::Joint);
  CHECK(c.align->set_level.get() == c.gen->content.get());

  TrainConfig sep = tiny_config();
  sep.set_level_sharing = false;
  TrainState t = make_state(sep, ds.num_train_ids());
  train_step(t, ds, Stage::Pretrain);
  train_step(t, ds, Stage::Joint);
  CHECK(t.align->set_level.get() != t.gen->content.get());
  TrainState tc = clone_state(t);
  CHECK(tc.align->set_level.get() != tc.gen->content.get());
}

TEST_CASE("same seed, same trajectory; resume from checkpoint is bitwise identical") {
  const auto& ds = small_dataset();
  TrainConfig c = tiny_config();
  c.pretrain_epochs = 1;
  c.joint_epochs = 2;

  TrainState a = pretrain_generator(c, ds);
  joint_train(a, ds);

  TrainState b = pretrain_generator(c, ds);
  TrainHooks stop;
  stop.max_steps = 2;
  joint_train(b, ds, stop);
  auto path = xmreid::testing::scratch_dir("ckpt") / "mid.ckpt";
  save_checkpoint(b, path);
  TrainState r = load_checkpoint(path);
  CHECK(r.joint_step == 2);
  joint_train(r, ds);

  CHECK(a.joint_step == r.joint_step);
  CHECK(same_values(snapshot(a), snapshot(r)));
  REQUIRE(a.history.size() == r.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) CHECK(a.history[i].losses == r.history[i].losses);

  // Optimizer moments and rng survive too: one more identical step each.
  train_step(a, ds, Stage::Joint);
  train_step(r, ds, Stage::Joint);
  CHECK(same_values(snapshot(a), snapshot(r)));

  std::stringstream bad("NOTACKPT");
  CHECK_THROWS(read_checkpoint(bad));
}

TEST_CASE("the joint learning rate decays on schedule") {
  const auto& ds = small_dataset();
  TrainConfig c = tiny_config();
  c.pretrain_epochs = 0;
  c.joint_epochs = 5;  // decay from epoch 3
  c.steps_per_epoch = 1;
  TrainState s = make_state(c, ds.num_train_ids());
  joint_train(s, ds);
  REQUIRE(s.history.size() == 5);
  for (int e = 0; e < 5; ++e) CHECK(s.history[e].lr == doctest::Approx(e < 3 ? c.lr : c.lr * 0.1));
}

TEST_CASE("divergence guard skips non-finite steps, then stops with a dump") {
  const auto& ds = small_dataset();
  TrainConfig c = tiny_config();
  c.divergence_patience = 2;
  TrainState s = make_state(c, ds.num_train_ids());
  train_step(s, ds, Stage::Pretrain);
  auto params = s.gen->generator_parameters();
  params.front().var.mutable_value()[0] = std::numeric_limits<Real>::quiet_NaN();
  const auto before = snapshot(s);

  auto dump = xmreid::testing::scratch_dir("diverge") / "dump.ckpt";
  TrainHooks h;
  h.dump_path = dump;
  CHECK_THROWS_AS(pretrain_generator(s, ds, h), DivergenceError);
  CHECK(std::filesystem::exists(dump));
  CHECK(s.history.back().skipped);
  CHECK(s.nonfinite_streak == 2);
  CHECK(s.gen_updates == 1);
  // Nothing was updated by the skipped steps (NaN compares unequal, so skip it).
  auto after = snapshot(s);
  for (std::size_t i = 1; i < after.size(); ++i) CHECK(after[i] == before[i]);
  TrainState d = load_checkpoint(dump);
  CHECK(d.nonfinite_streak == 2);
}

TEST_CASE("run cache shares pretraining across variants of one seed") {
  const auto& ds = small_dataset();
  TrainConfig c = tiny_config();
  c.joint_epochs = 1;
  exp::RunCache cache;
  auto variants = exp::ablation_variants();
  REQUIRE(variants.size() == 5);
  TrainState base = exp::train_run(variants[0].apply(c), ds, cache);
  TrainState both = exp::train_run(variants[3].apply(c), ds, cache);
  CHECK(cache.pretrained_count() == 1);
  CHECK_FALSE(base.align->shares_set_level);
  CHECK(both.align->shares_set_level);
  CHECK(both.pretrain_step == base.pretrain_step);
  c.seed = 8;
  exp::train_run(variants[0].apply(c), ds, cache);
  CHECK(cache.pretrained_count() == 2);
}

TEST_CASE("ablation variants map to the expected toggles") {
  auto v = exp::ablation_variants();
  TrainConfig c;
  auto cfg = [&](int i) { return v[i].apply(c); };
  CHECK(!cfg(0).set_level_sharing);
  CHECK(cfg(0).effective_lambda_align() == 0);
  CHECK(cfg(1).set_level_sharing);
  CHECK(cfg(1).effective_lambda_align() == 0);
  CHECK(!cfg(2).set_level_sharing);
  CHECK(cfg(2).effective_lambda_align() > 0);
  CHECK(cfg(3).set_level_sharing);
  CHECK(cfg(3).effective_lambda_align() > 0);
  CHECK(!cfg(4).set_level_sharing);
  CHECK(cfg(4).feature_adversarial);
  for (int i = 0; i < 5; ++i) CHECK_NOTHROW(cfg(i).validate());
}

TEST_CASE("sweep report JSON round trip") {
  exp::SweepReport r;
  r.seeds = {1, 2};
  for (Real l : {0.0, 0.5}) {
    exp::SweepRow row;
    row.lambda_align = l;
    for (std::uint64_t s : r.seeds) {
      exp::RunResult run;
      run.lambda_align = l;
      run.seed = s;
      run.variant = 3;
      run.report.cmc = {0.1 * s + l, 0.5, 0.9};
      run.report.map = 0.2 + l;
      run.report.num_queries = 10;
      run.report.repeats.push_back({run.report.cmc, run.report.map, 40});
      row.runs.push_back(run);
    }
    row.rank1 = 0.25;
    row.map = 0.2 + l;
    r.rows.push_back(row);
  }
  const std::string j = exp::sweep_json(r);
  CHECK(exp::sweep_json(exp::sweep_from_json(j)) == j);
  CHECK(exp::sweep_csv(r).find("0.5") != std::string::npos);
}
