#include <doctest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "support.hpp"
#include "xmreid/image_io.hpp"
#include "xmreid/synth_data.hpp"

using namespace xmreid;
using namespace xmreid::data;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Real region_mean(const Render& r, Region which, int channel) {
  const auto& shape = r.image.shape();
  const int plane = shape[1] * shape[2];
  Real sum = 0;
  int n = 0;
  for (int i = 0; i < plane; ++i)
    if (r.region[i] == static_cast<std::uint8_t>(which)) {
      sum += r.image[channel * plane + i];
      ++n;
    }
  REQUIRE(n > 0);
  return sum / n;
}

IdentitySpec fixed_spec(const Palette& p, const std::string& upper, const std::string& lower) {
  IdentitySpec s;
  s.body_shape = {12, 0.45, 2.5, 4};
  s.upper_color = p.index_of(upper);
  s.lower_color = p.index_of(lower);
  return s;
}

}  // namespace

TEST_CASE("default palette is one-to-many from IR to RGB") {
  const Palette p = default_palette();
  CHECK_NOTHROW(p.validate());
  std::map<int, int> per_bucket;
  for (const auto& c : p.colors) ++per_bucket[c.ir_bucket];
  for (const auto& [bucket, n] : per_bucket) CHECK(n >= 2);
  CHECK(p.colors[p.index_of("red")].ir_bucket == p.colors[p.index_of("dark-blue")].ir_bucket);
}

TEST_CASE("palettes with a singleton IR bucket are rejected") {
  Palette p = default_palette();
  p.colors[p.index_of("red")].ir_bucket = 0;  // leaves dark-blue alone in bucket 1
  CHECK_THROWS_AS(p.validate(), ConfigError);
  std::mt19937_64 rng(0);
  CHECK_THROWS_AS(sample_identity(rng, p, {}), ConfigError);
  Palette small = default_palette();
  small.colors.resize(3);
  CHECK_THROWS_AS(small.validate(), ConfigError);
}

TEST_CASE("sample_identity is deterministic and in range") {
  const Palette p = default_palette();
  std::mt19937_64 a(0), b(0);
  for (int i = 0; i < 20; ++i) {
    IdentitySpec x = sample_identity(a, p, {}, i), y = sample_identity(b, p, {}, i);
    CHECK(x == y);
    CHECK(x.upper_color >= 0);
    CHECK(x.upper_color < 8);
    CHECK(x.lower_color >= 0);
    CHECK(x.lower_color < 8);
  }
}

TEST_CASE("palette indices are uniform over 10000 identities") {
  const Palette p = default_palette();
  std::mt19937_64 rng(12345);
  const int n = 10000, k = p.size();
  std::vector<int> upper(k, 0), lower(k, 0);
  for (int i = 0; i < n; ++i) {
    IdentitySpec s = sample_identity(rng, p, {});
    ++upper[s.upper_color];
    ++lower[s.lower_color];
  }
  const Real expected = static_cast<Real>(n) / k;
  const Real sigma = std::sqrt(n * (1.0 / k) * (1 - 1.0 / k));
  Real chi2_upper = 0, chi2_lower = 0;
  for (int c = 0; c < k; ++c) {
    CHECK(std::abs(upper[c] - expected) < 3 * sigma);
    CHECK(std::abs(lower[c] - expected) < 3 * sigma);
    chi2_upper += (upper[c] - expected) * (upper[c] - expected) / expected;
    chi2_lower += (lower[c] - expected) * (lower[c] - expected) / expected;
  }
  // 99.9% quantile of chi-squared with 7 degrees of freedom
  CHECK(chi2_upper < 24.32);
  CHECK(chi2_lower < 24.32);
}

TEST_CASE("rgb render paints the palette color on the upper body") {
  const Palette p = default_palette();
  std::mt19937_64 rng(1);
  Render r = render_rgb(fixed_spec(p, "red", "black"), p, Jitter::none(), 0, 64, 32, rng);
  CHECK(r.image.shape() == Shape{3, 64, 32});
  const auto& red = p.colors[p.index_of("red")].rgb;
  const auto& black = p.colors[p.index_of("black")].rgb;
  for (int c = 0; c < 3; ++c) {
    CHECK(region_mean(r, Region::Upper, c) == doctest::Approx(2 * red[c] - 1).epsilon(0.03));
    CHECK(region_mean(r, Region::Lower, c) == doctest::Approx(2 * black[c] - 1).epsilon(0.03));
  }
  for (Real v : r.image.values()) {
    CHECK(v >= -1);
    CHECK(v <= 1);
  }
}

TEST_CASE("renders without jitter or noise are deterministic; jittered ones differ") {
  const Palette p = default_palette();
  const IdentitySpec s = fixed_spec(p, "orange", "dark-green");
  std::mt19937_64 r1(5), r2(77);
  CHECK(render_rgb(s, p, Jitter::none(), 1, 32, 16, r1).image == render_rgb(s, p, Jitter::none(), 1, 32, 16, r2).image);
  CHECK(render_ir(s, p, Jitter::none(), 4, 32, 16, r1).image == render_ir(s, p, Jitter::none(), 4, 32, 16, r2).image);

  std::mt19937_64 rng(9);
  Jitter j1 = sample_jitter(rng, {}), j2 = sample_jitter(rng, {});
  CHECK_FALSE(render_rgb(s, p, j1, 0, 32, 16, rng).image == render_rgb(s, p, j2, 0, 32, 16, rng).image);
}

TEST_CASE("ir render has one channel and cannot tell red from dark-blue") {
  const Palette p = default_palette();
  const IdentitySpec red = fixed_spec(p, "red", "black"), blue = fixed_spec(p, "dark-blue", "black");
  std::mt19937_64 rng(21);
  const int n = 100;
  std::vector<Real> a, b;
  for (int i = 0; i < n; ++i) {
    Jitter j = sample_jitter(rng, {});
    Render ra = render_ir(red, p, j, 4 + i % 2, 64, 32, rng);
    Render rb = render_ir(blue, p, j, 4 + i % 2, 64, 32, rng);
    REQUIRE(ra.image.shape() == Shape{1, 64, 32});
    a.push_back(region_mean(ra, Region::Upper, 0));
    b.push_back(region_mean(rb, Region::Upper, 0));
  }
  auto mean_var = [](const std::vector<Real>& v) {
    Real m = 0, s = 0;
    for (Real x : v) m += x;
    m /= v.size();
    for (Real x : v) s += (x - m) * (x - m);
    return std::pair{m, s / (v.size() - 1)};
  };
  auto [ma, va] = mean_var(a);
  auto [mb, vb] = mean_var(b);
  const Real se = std::sqrt(va / n + vb / n);
  CHECK(std::abs(ma - mb) < 4 * se + 1e-3);

  // The RGB sensor separates them easily.
  std::mt19937_64 r2(3);
  Render ca = render_rgb(red, p, Jitter::none(), 0, 64, 32, r2), cb = render_rgb(blue, p, Jitter::none(), 0, 64, 32, r2);
  CHECK(std::abs(region_mean(ca, Region::Upper, 0) - region_mean(cb, Region::Upper, 0)) > 0.5);
}

TEST_CASE("renderer rejects tiny images and wrong cameras") {
  const Palette p = default_palette();
  std::mt19937_64 rng(0);
  const IdentitySpec s = fixed_spec(p, "red", "black");
  CHECK_THROWS_AS(render_rgb(s, p, Jitter::none(), 0, 8, 32, rng), ContractError);
  CHECK_THROWS_AS(render_rgb(s, p, Jitter::none(), 4, 64, 32, rng), ContractError);
  CHECK_THROWS_AS(render_ir(s, p, Jitter::none(), 0, 64, 32, rng), ContractError);
}

TEST_CASE("generated dataset: counts, split disjointness, determinism, round trip") {
  GenerateConfig cfg = xmreid::testing::small_dataset_config();
  cfg.ids_train = 10;
  cfg.ids_test = 3;
  auto dir_a = xmreid::testing::scratch_dir("gen_a"), dir_b = xmreid::testing::scratch_dir("gen_b");
  DatasetManifest m = generate_dataset(cfg, dir_a);
  generate_dataset(cfg, dir_b);

  int train_records = 0;
  for (const auto& r : m.records) train_records += r.split == Split::Train;
  CHECK(train_records == 10 * 2 * cfg.per_modality);
  CHECK(m.records.size() == 13u * 2 * cfg.per_modality);

  std::set<int> train(m.train_ids.begin(), m.train_ids.end());
  for (int id : m.test_ids) CHECK(train.count(id) == 0);

  CHECK(slurp(dir_a / "manifest.jsonl") == slurp(dir_b / "manifest.jsonl"));
  for (std::size_t i = 0; i < m.records.size(); i += 7)
    CHECK(slurp(dir_a / m.records[i].path) == slurp(dir_b / m.records[i].path));

  // IR is single-channel on disk.
  for (const auto& r : m.records) {
    io::Raster ras = io::read_png(dir_a / r.path);
    CHECK(ras.channels == (r.modality == Modality::RGB ? 3 : 1));
    if (&r - m.records.data() > 40) break;
  }

  DatasetManifest back = read_manifest(dir_a);
  CHECK(manifest_jsonl(back) == manifest_jsonl(m));
  auto dir_c = xmreid::testing::scratch_dir("gen_c");
  write_manifest(back, dir_c);
  CHECK(slurp(dir_c / "manifest.jsonl") == slurp(dir_a / "manifest.jsonl"));

  CHECK_THROWS_AS(generate_dataset(cfg, dir_a), ConfigError);
  cfg.overwrite = true;
  CHECK_NOTHROW(generate_dataset(cfg, dir_a));
}

TEST_CASE("every identity has both modalities in its split") {
  const Dataset& ds = xmreid::testing::small_dataset();
  const auto& m = ds.manifest();
  for (const auto& ids : {m.train_ids, m.test_ids})
    for (int id : ids) {
      CHECK_FALSE(ds.records_of(id, Modality::RGB).empty());
      CHECK_FALSE(ds.records_of(id, Modality::IR).empty());
    }
}

TEST_CASE("loaded images are in range with IR replicated") {
  const Dataset& ds = xmreid::testing::small_dataset();
  const int ir = ds.records_of(ds.manifest().train_ids[0], Modality::IR)[0];
  const Tensor& img = ds.image(ir);
  REQUIRE(img.dim(0) == 3);
  const int plane = img.dim(1) * img.dim(2);
  for (int i = 0; i < plane; ++i) {
    CHECK(img[i] == img[plane + i]);
    CHECK(img[i] == img[2 * plane + i]);
  }
  for (std::size_t r = 0; r < ds.manifest().records.size(); ++r)
    for (Real v : ds.image(static_cast<int>(r)).values()) REQUIRE(std::abs(v) <= 1);
}

TEST_CASE("PK sampler") {
  const Dataset& ds = xmreid::testing::small_dataset();
  PKSampler s{4, 2, 0};
  std::mt19937_64 rng(0);
  auto [rgb, ir] = load_batch(ds, s, rng);
  CHECK(rgb.size() == 8);
  CHECK(ir.size() == 8);
  CHECK(rgb.identity == ir.identity);
  for (int i = 0; i < rgb.size(); ++i) {
    CHECK(rgb.modality[i] == Modality::RGB);
    CHECK(ir.modality[i] == Modality::IR);
  }

  SUBCASE("reproducible") {
    std::mt19937_64 a(4), b(4);
    auto x = load_batch(ds, s, a, 0.5), y = load_batch(ds, s, b, 0.5);
    CHECK(x.first.record == y.first.record);
    CHECK(x.first.pixels == y.first.pixels);
    CHECK(x.second.pixels == y.second.pixels);
  }
  SUBCASE("covers every train identity within 1000 draws") {
    std::set<int> seen;
    for (int i = 0; i < 1000; ++i) {
      auto [r, _] = load_batch(ds, s, rng);
      seen.insert(r.identity.begin(), r.identity.end());
    }
    CHECK(seen.size() == ds.manifest().train_ids.size());
  }
  SUBCASE("holdout records are never drawn") {
    PKSampler h{4, 2, 1};
    std::set<int> held;
    for (Modality m : {Modality::RGB, Modality::IR})
      for (int r : held_out_records(ds, m, 1)) held.insert(r);
    CHECK(held.size() == 2 * ds.manifest().train_ids.size());
    for (int i = 0; i < 300; ++i) {
      auto [r, q] = load_batch(ds, h, rng);
      for (int rec : r.record) REQUIRE(held.count(rec) == 0);
      for (int rec : q.record) REQUIRE(held.count(rec) == 0);
    }
    CHECK_THROWS_AS(sampled_records(ds, ds.manifest().train_ids[0], Modality::RGB, 4), ContractError);
  }
  SUBCASE("too many identities") {
    PKSampler big{100, 2, 0};
    CHECK_THROWS_AS(load_batch(ds, big, rng), ContractError);
  }
}
