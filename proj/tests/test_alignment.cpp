#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "support.hpp"
#include "xmreid/alignment.hpp"
#include "xmreid/optim.hpp"

using namespace xmreid;
using namespace xmreid::align;
using xmreid::testing::check_gradients;
using xmreid::testing::random_batch;
using xmreid::testing::random_tensor;
using data::Modality;

namespace {

// Independent oracle: every (anchor, positive, negative) triplet, hinge of the
// worst one per anchor, averaged over anchors that have both.
Real exhaustive_hardest_triplet(const Tensor& x, const std::vector<int>& labels, Real margin) {
  const int n = x.dim(0), d = x.dim(1);
  auto dist = [&](int i, int j) {
    Real s = 0;
    for (int k = 0; k < d; ++k) s += (x.at(i, k) - x.at(j, k)) * (x.at(i, k) - x.at(j, k));
    return std::sqrt(s + 1e-12);
  };
  Real total = 0;
  int anchors = 0;
  for (int a = 0; a < n; ++a) {
    Real worst = -1;
    for (int p = 0; p < n; ++p)
      for (int q = 0; q < n; ++q) {
        if (p == a || labels[p] != labels[a] || labels[q] == labels[a]) continue;
        worst = std::max(worst, std::max(Real(0), margin + dist(a, p) - dist(a, q)));
      }
    if (worst >= 0) {
      total += worst;
      ++anchors;
    }
  }
  return total / anchors;
}

struct Rig {
  std::mt19937_64 rng;
  gen::GenerationModel gen;
  AlignmentModel align;
  Rig(std::uint64_t seed, const gen::GenArch& garch, const AlignArch& aarch, bool shared)
      : rng(seed),
        gen(garch, rng),
        align(shared ? AlignmentModel::shared_with(gen, aarch, rng) : AlignmentModel::separate(garch, aarch, rng, gen.content.get())) {}
};

gen::GenArch small_arch() {
  gen::GenArch a;
  a.base_width = 4;
  a.content_channels = 8;
  a.content_res_blocks = 1;
  a.decoder_res_blocks = 1;
  a.mlp_hidden = 8;
  a.style_width = 4;
  a.disc_width = 4;
  a.first_kernel = 3;
  return a;
}

AlignArch small_align(int classes) {
  AlignArch a;
  a.instance_channels = 8;
  a.num_classes = classes;
  return a;
}

}  // namespace

TEST_CASE("set-level encoder aliases the content encoder") {
  Rig r(0, small_arch(), small_align(5), true);
  CHECK(r.align.shares_set_level);
  CHECK(r.align.set_level.get() == r.gen.content.get());
  Var x(random_tensor({3, 3, 16, 8}, r.rng, -1, 1));
  CHECK(encode_set_level(r.align, x).value() == gen::encode_content(r.gen, x).value());
  CHECK(encode_set_level(r.align, x).shape() == Shape{3, 8, 4, 2});

  // A step on a re-id loss moves E^i by exactly the same amount.
  optim::Adam opt(r.align.trainable_parameters(), {1e-2});
  const Tensor before = gen::encode_content(r.gen, x).value();
  for (int i = 0; i < 3; ++i) {
    opt.zero_grad();
    Var pooled = encode_instance_level(r.align, encode_set_level(r.align, x), Mode::Train).pooled;
    backward(cls_loss(r.align, pooled, std::vector<int>{0, 1, 2}));
    opt.step();
    CHECK(encode_set_level(r.align, x).value() == gen::encode_content(r.gen, x).value());
  }
  CHECK(max_abs_diff(before, gen::encode_content(r.gen, x).value()) > 0);
}

TEST_CASE("separate set-level encoder starts as a copy and diverges after the first step") {
  Rig r(1, small_arch(), small_align(5), false);
  CHECK_FALSE(r.align.shares_set_level);
  Var x(random_tensor({3, 3, 16, 8}, r.rng, -1, 1));
  optim::Adam opt(r.align.trainable_parameters(), {1e-2});
  const Tensor content_before = gen::encode_content(r.gen, x).value();
  CHECK(r.align.set_level.get() != r.gen.content.get());
  CHECK(encode_set_level(r.align, x).value() == content_before);
  opt.zero_grad();
  Var pooled = encode_instance_level(r.align, encode_set_level(r.align, x), Mode::Train).pooled;
  backward(cls_loss(r.align, pooled, std::vector<int>{0, 1, 2}));
  opt.step();
  CHECK(gen::encode_content(r.gen, x).value() == content_before);
  CHECK(max_abs_diff(encode_set_level(r.align, x).value(), content_before) > 0);
}

TEST_CASE("pooled features are the spatial mean of the instance maps") {
  Rig r(2, small_arch(), small_align(5), true);
  Var mid = encode_set_level(r.align, Var(random_tensor({4, 3, 16, 8}, r.rng)));
  InstanceFeatures f = encode_instance_level(r.align, mid, Mode::Eval);
  const Tensor& t = f.maps.value();
  REQUIRE(f.pooled.shape() == Shape{4, 8});
  const int hw = t.dim(2) * t.dim(3);
  for (int n = 0; n < 4; ++n)
    for (int c = 0; c < 8; ++c) {
      Real s = 0;
      for (int y = 0; y < t.dim(2); ++y)
        for (int x = 0; x < t.dim(3); ++x) s += t.at(n, c, y, x);
      CHECK(f.pooled.value().at(n, c) == doctest::Approx(s / hw).epsilon(1e-12));
    }
}

TEST_CASE("classifier probabilities are distributions; non-finite input is reported") {
  Rig r(3, small_arch(), small_align(7), true);
  CHECK(r.align.classifier.classes() == 7);
  Var pooled(random_tensor({5, 8}, r.rng, -3, 3));
  Tensor p = classify(r.align, pooled, Mode::Train).value();
  REQUIRE(p.shape() == Shape{5, 7});
  for (int i = 0; i < 5; ++i) {
    Real s = 0;
    for (int j = 0; j < 7; ++j) s += p.at(i, j);
    CHECK(std::abs(s - 1) < 1e-6);
  }
  Tensor bad = pooled.value();
  bad.at(2, 3) = std::nan("");
  CHECK_THROWS_AS(classify(r.align, Var(bad), Mode::Eval), NumericError);
}

TEST_CASE("alignment loss oracles") {
  Tensor p({1, 2}, {0.5, 0.5}), q({1, 2}, {0.25, 0.75});
  const Real one = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
  // Order matters: KL(p_ir || p_ir2rgb) + KL(p_rgb2ir || p_rgb).
  CHECK(align_loss_from_probs(Var(p), Var(q), Var(p), Var(p)).item() == doctest::Approx(one).epsilon(1e-12));
  CHECK(align_loss_from_probs(Var(p), Var(p), Var(p), Var(q)).item() == doctest::Approx(one).epsilon(1e-12));
  CHECK(align_loss_from_probs(Var(q), Var(q), Var(p), Var(p)).item() == 0);
}

TEST_CASE("classification loss: zero case, uniform case, monotonicity, label range") {
  Tensor confident({2, 3}, {800, 0, 0, 0, 0, 800});
  CHECK(cls_loss_from_logits(Var(confident), std::vector<int>{0, 2}).item() == doctest::Approx(0).epsilon(1e-12));
  CHECK(cls_loss_from_logits(Var(Tensor({4, 100}, 2.0)), std::vector<int>{0, 1, 2, 99}).item() ==
        doctest::Approx(std::log(100.0)));
  Tensor logits({1, 4}, {0.3, -0.1, 0.2, 0.7});
  Real prev = cls_loss_from_logits(Var(logits), std::vector<int>{1}).item();
  for (int i = 0; i < 5; ++i) {
    logits.at(0, 1) += 0.5;
    const Real now = cls_loss_from_logits(Var(logits), std::vector<int>{1}).item();
    CHECK(now < prev);
    prev = now;
  }
  CHECK_THROWS_AS(cls_loss_from_logits(Var(logits), std::vector<int>{4}), ContractError);
  CHECK_THROWS_AS(cls_loss_from_logits(Var(logits), std::vector<int>{-1}), ContractError);
}

TEST_CASE("triplet loss hinge cases") {
  // Items on a line: identities {0,0} at 0 and 0.1, identity 1 at 1.0 and 1.1.
  Tensor x({4, 1}, {0.0, 0.1, 1.0, 1.1});
  const std::vector<int> ids{0, 0, 1, 1};
  // Every D_ap = 0.1, nearest D_an = 0.9: [0.3 + 0.1 - 0.9]_+ = 0.
  CHECK(triplet_loss(Var(x), ids, 0.3).item() == doctest::Approx(0).epsilon(1e-9));
  // All items coincide: D_ap = D_an, loss = m.
  CHECK(triplet_loss(Var(Tensor({4, 3}, 0.2)), ids, 0.3).item() == doctest::Approx(0.3).epsilon(1e-5));
  CHECK_THROWS_AS(triplet_loss(Var(x), std::vector<int>{2, 2, 2, 2}, 0.3), ContractError);
  CHECK_THROWS_AS(triplet_loss(Var(x), std::vector<int>{0, 1, 2, 3}, 0.3), ContractError);
}

TEST_CASE("batch-hard triplet equals the exhaustive oracle on random batches") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> size(3, 8), label(0, 2);
  int checked = 0;
  for (int trial = 0; trial < 300; ++trial) {
    const int n = size(rng);
    std::vector<int> ids(n);
    for (auto& l : ids) l = label(rng);
    std::vector<int> sorted = ids;
    std::sort(sorted.begin(), sorted.end());
    const bool has_pair = std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end();
    if (!has_pair || sorted.front() == sorted.back()) continue;
    Tensor x = random_tensor({n, 4}, rng);
    REQUIRE(triplet_loss(Var(x), ids, 0.3).item() == doctest::Approx(exhaustive_hardest_triplet(x, ids, 0.3)).epsilon(1e-12));
    ++checked;
  }
  CHECK(checked > 100);
}

TEST_CASE("similarity convention uses cosine scores") {
  Tensor x({4, 2}, {1, 0, 1, 0.1, 0, 1, 0.1, 1});
  const std::vector<int> ids{0, 0, 1, 1};
  const Real v = triplet_loss(Var(x), ids, 0.3, Mining::BatchHard, TripletConvention::Similarity).item();
  // S_ap ~ 0.995, S_an ~ 0.0995 (hardest), loss [0.3 - 0.995 + 0.0995]_+ = 0.
  CHECK(v == doctest::Approx(0).epsilon(1e-9));
  Tensor y({4, 2}, {1, 0, 0, 1, 1, 0.05, 0, 1});
  CHECK(triplet_loss(Var(y), ids, 0.3, Mining::BatchHard, TripletConvention::Similarity).item() > 0.3);
}

TEST_CASE("alignment loss gradients match central differences") {
  Rig r(20, xmreid::testing::tiny_gen_arch(), xmreid::testing::tiny_align_arch(3), true);
  auto params = r.align.trainable_parameters();
  auto gen_params = r.gen.generator_parameters();
  std::vector<nn::NamedParam> everything = optim::unique_params({gen_params, params});
  CHECK(xmreid::testing::count_parameters(everything) <= 1000);
  const std::vector<int> ids{0, 0, 1, 2};
  auto rgb = random_batch(ids, Modality::RGB, 8, 8, r.rng);
  auto ir = random_batch(ids, Modality::IR, 8, 8, r.rng);
  const gen::Pairing pairing{1, 0, 2, 3};
  Var x(rgb.pixels);
  auto pooled = [&] { return encode_instance_level(r.align, encode_set_level(r.align, x), Mode::Train).pooled; };

  SUBCASE("align") {
    auto res = check_gradients(everything, [&] { return align_loss(r.align, gen::exchange_generate(r.gen, rgb, ir, pairing)); });
    INFO(res.worst);
    CHECK(res.max_rel < 1e-4);
  }
  SUBCASE("cls") {
    auto res = check_gradients(params, [&] { return cls_loss(r.align, pooled(), ids); });
    INFO(res.worst);
    CHECK(res.max_rel < 1e-4);
  }
  SUBCASE("triplet") {
    auto res = check_gradients(params, [&] { return triplet_loss(pooled(), ids, 0.3); });
    INFO(res.worst);
    CHECK(res.max_rel < 1e-4);
  }
}

TEST_CASE("feature extraction is deterministic and chunk independent") {
  Rig r(30, small_arch(), small_align(4), true);
  Tensor imgs = random_tensor({5, 3, 16, 8}, r.rng);
  // Duplicate row 1 into row 4.
  for (int i = 0; i < 3 * 16 * 8; ++i) imgs[4 * 384 + i] = imgs[384 + i];
  Tensor a = extract_features(r.align, imgs, 64), b = extract_features(r.align, imgs, 2);
  CHECK(a.shape() == Shape{5, 8});
  CHECK(max_abs_diff(a, b) < 1e-12);
  for (int c = 0; c < 8; ++c) CHECK(a.at(1, c) == a.at(4, c));
}
