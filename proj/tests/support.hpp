#pragma once

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "xmreid/alignment.hpp"
#include "xmreid/generation.hpp"

namespace xmreid::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, Real lo = -1, Real hi = 1) {
  std::uniform_real_distribution<Real> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = u(rng);
  return t;
}

// Small enough that every loss can be finite-differenced over all of its
// parameters in well under a second.
inline gen::GenArch tiny_gen_arch() {
  gen::GenArch a;
  a.base_width = 2;
  a.content_channels = 2;
  a.style_dim = 2;
  a.downsample = 1;
  a.content_res_blocks = 0;
  a.decoder_res_blocks = 1;
  a.mlp_hidden = 3;
  a.style_width = 1;
  a.disc_width = 1;
  a.first_kernel = 1;
  return a;
}

inline align::AlignArch tiny_align_arch(int classes) {
  align::AlignArch a;
  a.instance_channels = 2;
  a.res_blocks = 1;
  a.num_classes = classes;
  return a;
}

/// A batch of `ids.size()` random images of one modality. IR items hold
/// one channel replicated to three, like loaded data.
inline data::ImageBatch random_batch(const std::vector<int>& ids, data::Modality m, int h, int w,
                                     std::mt19937_64& rng) {
  data::ImageBatch b;
  const int n = static_cast<int>(ids.size());
  b.pixels = random_tensor({n, 3, h, w}, rng, -0.9, 0.9);
  if (m == data::Modality::IR)
    for (int i = 0; i < n; ++i)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) b.pixels.at(i, 1, y, x) = b.pixels.at(i, 2, y, x) = b.pixels.at(i, 0, y, x);
  b.identity = ids;
  b.modality.assign(n, m);
  b.camera.assign(n, m == data::Modality::RGB ? 0 : 4);
  for (int i = 0; i < n; ++i) b.record.push_back(i);
  return b;
}

struct GradCheck {
  Real max_rel = 0;      // worst elementwise |a - n| / max(|a|, |n|, floor)
  Real max_abs = 0;
  std::size_t checked = 0;
  std::string worst;
};

/// Compares the reverse-mode gradient of `loss` with central differences
/// for every element of every parameter. h near the cube root of machine
/// epsilon balances truncation against round-off. The floor keeps elements whose
/// true gradient is ~0 from turning round-off into large ratios. An entry that
/// disagrees is re-measured with h/10: a ReLU kink inside the +-h stencil
/// disappears at the smaller step, while a wrong derivative disagrees at both.
inline GradCheck check_gradients(const std::vector<nn::NamedParam>& params, const std::function<Var()>& loss,
                                 Real h = 1e-5, Real floor = 1e-5, Real retry_above = 1e-5) {
  for (auto p : params) p.var.zero_grad();
  backward(loss());
  GradCheck out;
  NoGradGuard guard;
  for (auto p : params) {
    const Tensor analytic = p.var.grad();
    Tensor& w = p.var.mutable_value();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const Real orig = w[i];
      auto central = [&](Real step) {
        w[i] = orig + step;
        const Real up = loss().item();
        w[i] = orig - step;
        const Real down = loss().item();
        w[i] = orig;
        return (up - down) / (2 * step);
      };
      auto rel_of = [&](Real numeric) {
        return std::abs(numeric - analytic[i]) / std::max({std::abs(numeric), std::abs(analytic[i]), floor});
      };
      Real numeric = central(h);
      if (rel_of(numeric) > retry_above) {
        const Real fine = central(h / 10);
        if (rel_of(fine) < rel_of(numeric)) numeric = fine;
      }
      const Real diff = std::abs(numeric - analytic[i]);
      const Real rel = rel_of(numeric);
      ++out.checked;
      out.max_abs = std::max(out.max_abs, diff);
      if (rel > out.max_rel) {
        out.max_rel = rel;
        out.worst = p.name + "[" + std::to_string(i) + "] analytic=" + std::to_string(analytic[i]) +
                    " numeric=" + std::to_string(numeric);
      }
    }
  }
  return out;
}

/// Fresh per-process scratch directory, removed at exit.
inline std::filesystem::path scratch_dir(const std::string& name) {
  namespace fs = std::filesystem;
  static const fs::path root = [] {
    fs::path p = fs::temp_directory_path() / ("xmreid_tests_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    std::atexit([] { std::error_code ec; fs::remove_all(fs::temp_directory_path() / ("xmreid_tests_" + std::to_string(::getpid())), ec); });
    return p;
  }();
  fs::path p = root / name;
  fs::create_directories(p);
  return p;
}

inline data::GenerateConfig small_dataset_config() {
  data::GenerateConfig c;
  c.ids_train = 12;
  c.ids_test = 6;
  c.per_modality = 4;
  c.height = 32;
  c.width = 16;
  c.seed = 3;
  return c;
}

/// A small generated dataset shared by the tests of one process.
inline const data::Dataset& small_dataset() {
  static const data::Dataset ds = [] {
    auto dir = scratch_dir("small_dataset");
    auto cfg = small_dataset_config();
    cfg.overwrite = true;
    data::generate_dataset(cfg, dir);
    return data::Dataset::load(dir);
  }();
  return ds;
}

inline std::size_t count_parameters(const std::vector<nn::NamedParam>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.var.size();
  return n;
}

}  // namespace xmreid::testing
