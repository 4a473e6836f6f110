#include "xmreid/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

#include "xmreid/image_io.hpp"

namespace xmreid::data {
namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

struct RgbCamera {
  std::array<Real, 3> tint;
  Real gain;
  std::array<Real, 3> background;
};

struct IrCamera {
  Real contrast;
  Real offset;
  Real background;
};

constexpr std::array<RgbCamera, kRgbCameras> kRgbCameraTable{{
    {{1.00, 1.00, 1.00}, 1.00, {0.45, 0.45, 0.42}},
    {{1.05, 0.98, 0.92}, 0.92, {0.52, 0.43, 0.35}},
    {{0.93, 0.98, 1.06}, 1.06, {0.35, 0.42, 0.52}},
    {{1.00, 1.04, 0.95}, 0.97, {0.40, 0.50, 0.38}},
}};

constexpr std::array<IrCamera, kIrCameras> kIrCameraTable{{
    {1.00, 0.00, 0.30},
    {0.90, 0.05, 0.40},
}};

constexpr std::array<Real, 3> kSkinRgb{0.85, 0.66, 0.52};
constexpr Real kSkinIr = 0.72;

Real uniform(std::mt19937_64& rng, Range r) { return std::uniform_real_distribution<Real>(r.lo, r.hi)(rng); }

Real texture(Real x, Real y, int height, int width, const std::array<Real, 3>& phase) {
  constexpr Real tau = 2 * std::numbers::pi;
  const Real u = x / width, v = y / height;
  return 0.06 * std::sin(tau * 1.5 * u + phase[0]) + 0.05 * std::sin(tau * 2.0 * v + phase[1]) +
         0.04 * std::sin(tau * 2.5 * (u + v) + phase[2]);
}

// Rasterizes the figure into Region labels.
std::vector<std::uint8_t> rasterize(const IdentitySpec& spec, const Jitter& jitter, int height, int width) {
  if (height < 16 || width < 16) throw ContractError("render: image must be at least 16x16");
  if (spec.body_shape.size() != 4) throw ContractError("render: body_shape must have 4 entries");
  const Real s = jitter.scale * height / 64.0;
  const Real torso_w = spec.body_shape[0] * s;
  const Real body_h = 46 * s;
  const Real torso_h = spec.body_shape[1] * body_h;
  const Real leg_h = body_h - torso_h;
  const Real gap = spec.body_shape[2] * s;
  const Real head_r = spec.body_shape[3] * s;
  const Real theta = (spec.base_pose_deg + jitter.pose_deg) * std::numbers::pi / 180;
  const Real cx = width / 2.0 + jitter.dx * width / 32.0;
  const Real cy = height * 0.96 + jitter.dy * height / 64.0;
  const Real cs = std::cos(theta), sn = std::sin(theta);
  const Real head_cy = -(leg_h + torso_h + head_r * 1.05);

  std::vector<std::uint8_t> region(static_cast<std::size_t>(height) * width, 0);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const Real px = x + 0.5 - cx, py = y + 0.5 - cy;
      const Real u = cs * px + sn * py;
      const Real v = -sn * px + cs * py;
      Region r = Region::Background;
      if (v <= 0 && v >= -leg_h && std::abs(u) >= gap / 2 && std::abs(u) <= torso_w / 2)
        r = Region::Lower;
      else if (v < -leg_h && v >= -(leg_h + torso_h) && std::abs(u) <= torso_w / 2)
        r = Region::Upper;
      else if (u * u + (v - head_cy) * (v - head_cy) <= head_r * head_r)
        r = Region::Head;
      region[static_cast<std::size_t>(y) * width + x] = static_cast<std::uint8_t>(r);
    }
  return region;
}

Render paint(const std::vector<std::uint8_t>& region, int channels, int height, int width, const Jitter& jitter,
             std::mt19937_64& rng, auto&& body_value, auto&& background_value) {
  Render out{Tensor({channels, height, width}), region};
  std::normal_distribution<Real> noise(0, jitter.noise_std > 0 ? jitter.noise_std : 1);
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * width + x;
        const auto r = static_cast<Region>(region[i]);
        Real v = r == Region::Background ? background_value(c, x + 0.5, y + 0.5) : body_value(c, r);
        v = 2 * v - 1;
        if (jitter.noise_std > 0) v += noise(rng);
        out.image[c * plane + i] = std::clamp(v, Real(-1), Real(1));
      }
  return out;
}

}  // namespace

std::string to_string(Modality m) { return m == Modality::RGB ? "RGB" : "IR"; }

Modality modality_from_string(const std::string& s) {
  if (s == "RGB" || s == "rgb") return Modality::RGB;
  if (s == "IR" || s == "ir") return Modality::IR;
  throw ContractError("unknown modality '" + s + "'");
}

std::string to_string(Split s) { return s == Split::Train ? "train" : "test"; }

void Palette::validate() const {
  if (colors.size() < 4) throw ConfigError("palette needs at least 4 colors");
  std::vector<int> per_bucket(bucket_intensity.size(), 0);
  for (const auto& c : colors) {
    if (c.ir_bucket < 0 || c.ir_bucket >= static_cast<int>(bucket_intensity.size()))
      throw ConfigError("palette color '" + c.name + "' has no IR bucket");
    ++per_bucket[c.ir_bucket];
  }
  for (std::size_t b = 0; b < per_bucket.size(); ++b)
    if (per_bucket[b] == 1)
      throw ConfigError("IR bucket " + std::to_string(b) + " holds a single color; the IR->RGB map must be one-to-many");
  if (std::none_of(per_bucket.begin(), per_bucket.end(), [](int n) { return n >= 2; }))
    throw ConfigError("palette has no shared IR bucket");
}

int Palette::index_of(const std::string& name) const {
  for (int i = 0; i < size(); ++i)
    if (colors[i].name == name) return i;
  throw ConfigError("no palette color named '" + name + "'");
}

Palette default_palette() {
  Palette p;
  p.bucket_intensity = {0.12, 0.38, 0.64, 0.9};
  p.colors = {
      {"black", {0.06, 0.06, 0.07}, 0},  {"dark-green", {0.10, 0.38, 0.14}, 0},
      {"red", {0.86, 0.12, 0.10}, 1},    {"dark-blue", {0.10, 0.14, 0.60}, 1},
      {"orange", {0.96, 0.58, 0.12}, 2}, {"purple", {0.62, 0.24, 0.76}, 2},
      {"white", {0.94, 0.94, 0.94}, 3},  {"yellow", {0.95, 0.90, 0.22}, 3},
  };
  return p;
}

IdentitySpec sample_identity(std::mt19937_64& rng, const Palette& palette, const ContentRanges& ranges,
                             int identity_id) {
  palette.validate();
  IdentitySpec spec;
  spec.identity_id = identity_id;
  spec.body_shape = {uniform(rng, ranges.torso_width), uniform(rng, ranges.torso_fraction),
                     uniform(rng, ranges.leg_gap), uniform(rng, ranges.head_radius)};
  spec.base_pose_deg = uniform(rng, ranges.base_pose_deg);
  std::uniform_int_distribution<int> color(0, palette.size() - 1);
  spec.upper_color = color(rng);
  spec.lower_color = color(rng);
  return spec;
}

Jitter sample_jitter(std::mt19937_64& rng, const JitterRanges& r) {
  Jitter j;
  j.dx = uniform(rng, {-r.shift_x, r.shift_x});
  j.dy = uniform(rng, {-r.shift_y, r.shift_y});
  j.scale = 1 + uniform(rng, {-r.scale, r.scale});
  j.pose_deg = uniform(rng, {-r.pose_deg, r.pose_deg});
  j.gain = 1 + uniform(rng, {-r.gain, r.gain});
  j.noise_std = r.noise_std;
  for (auto& ph : j.background_phase) ph = uniform(rng, {0, 2 * std::numbers::pi});
  return j;
}

bool is_ir_camera(int camera) { return camera >= kRgbCameras && camera < kRgbCameras + kIrCameras; }

Render render_rgb(const IdentitySpec& spec, const Palette& palette, const Jitter& jitter, int camera, int height,
                  int width, std::mt19937_64& rng) {
  if (camera < 0 || camera >= kRgbCameras) throw ContractError("render_rgb: camera " + std::to_string(camera) + " is not an RGB camera");
  const auto& cam = kRgbCameraTable[camera];
  const auto region = rasterize(spec, jitter, height, width);
  const auto& upper = palette.colors.at(spec.upper_color).rgb;
  const auto& lower = palette.colors.at(spec.lower_color).rgb;
  return paint(
      region, 3, height, width, jitter, rng,
      [&](int c, Region r) {
        const Real base = r == Region::Upper ? upper[c] : r == Region::Lower ? lower[c] : kSkinRgb[c];
        return base * cam.gain * cam.tint[c] * jitter.gain;
      },
      [&](int c, Real x, Real y) { return cam.background[c] + texture(x, y, height, width, jitter.background_phase); });
}

Render render_ir(const IdentitySpec& spec, const Palette& palette, const Jitter& jitter, int camera, int height,
                 int width, std::mt19937_64& rng) {
  if (!is_ir_camera(camera)) throw ContractError("render_ir: camera " + std::to_string(camera) + " is not an IR camera");
  const auto& cam = kIrCameraTable[camera - kRgbCameras];
  const auto region = rasterize(spec, jitter, height, width);
  const Real upper = palette.bucket_intensity.at(palette.colors.at(spec.upper_color).ir_bucket);
  const Real lower = palette.bucket_intensity.at(palette.colors.at(spec.lower_color).ir_bucket);
  return paint(
      region, 1, height, width, jitter, rng,
      [&](int, Region r) {
        const Real base = r == Region::Upper ? upper : r == Region::Lower ? lower : kSkinIr;
        return base * cam.contrast * jitter.gain + cam.offset;
      },
      [&](int, Real x, Real y) { return cam.background + texture(x, y, height, width, jitter.background_phase); });
}

// ---------------------------------------------------------------------------

std::uint64_t record_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finalizer over a golden-ratio spaced counter
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

ojson palette_json(const Palette& p) {
  ojson colors = ojson::array();
  for (const auto& c : p.colors)
    colors.push_back(ojson{{"name", c.name}, {"rgb", c.rgb}, {"ir_bucket", c.ir_bucket}});
  return ojson{{"bucket_intensity", p.bucket_intensity}, {"colors", colors}};
}

Palette palette_from_json(const ojson& j) {
  Palette p;
  p.bucket_intensity = j.at("bucket_intensity").get<std::vector<Real>>();
  for (const auto& c : j.at("colors"))
    p.colors.push_back({c.at("name").get<std::string>(), c.at("rgb").get<std::array<Real, 3>>(),
                        c.at("ir_bucket").get<int>()});
  return p;
}

ojson identity_json(const IdentitySpec& s) {
  return ojson{{"id", s.identity_id},
               {"body_shape", s.body_shape},
               {"base_pose_deg", s.base_pose_deg},
               {"upper", s.upper_color},
               {"lower", s.lower_color}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

std::string manifest_jsonl(const DatasetManifest& m) {
  std::string out;
  for (const auto& r : m.records) {
    ojson j{{"id", r.identity},
            {"modality", to_string(r.modality)},
            {"camera", r.camera},
            {"path", r.path},
            {"mask", r.mask_path},
            {"split", to_string(r.split)}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

void write_manifest(const DatasetManifest& m, const fs::path& root) {
  fs::create_directories(root);
  write_text(root / "manifest.jsonl", manifest_jsonl(m));
  write_text(root / "palette.json", palette_json(m.palette).dump(2) + "\n");
  ojson meta{{"format_version", 1},   {"seed", m.seed},         {"height", m.height},
             {"width", m.width},      {"per_modality", m.per_modality},
             {"train_ids", m.train_ids}, {"test_ids", m.test_ids}};
  write_text(root / "dataset.json", meta.dump(2) + "\n");
  std::string ids;
  for (const auto& s : m.identities) ids += identity_json(s).dump() + "\n";
  write_text(root / "identities.jsonl", ids);
}

DatasetManifest read_manifest(const fs::path& root) {
  if (!fs::exists(root / "manifest.jsonl")) throw std::runtime_error("no manifest.jsonl under " + root.string());
  DatasetManifest m;
  const ojson meta = ojson::parse(read_text(root / "dataset.json"));
  m.seed = meta.at("seed").get<std::uint64_t>();
  m.height = meta.at("height").get<int>();
  m.width = meta.at("width").get<int>();
  m.per_modality = meta.at("per_modality").get<int>();
  m.train_ids = meta.at("train_ids").get<std::vector<int>>();
  m.test_ids = meta.at("test_ids").get<std::vector<int>>();
  m.palette = palette_from_json(ojson::parse(read_text(root / "palette.json")));

  std::istringstream lines(read_text(root / "manifest.jsonl"));
  std::string line;
  std::set<int> train(m.train_ids.begin(), m.train_ids.end());
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    const ojson j = ojson::parse(line);
    ManifestRecord r;
    r.identity = j.at("id").get<int>();
    r.modality = modality_from_string(j.at("modality").get<std::string>());
    r.camera = j.at("camera").get<int>();
    r.path = j.at("path").get<std::string>();
    r.mask_path = j.value("mask", std::string{});
    r.split = j.at("split").get<std::string>() == "train" ? Split::Train : Split::Test;
    if ((r.split == Split::Train) != static_cast<bool>(train.count(r.identity)))
      throw std::runtime_error("manifest record split disagrees with dataset.json for id " + std::to_string(r.identity));
    m.records.push_back(std::move(r));
  }
  if (fs::exists(root / "identities.jsonl")) {
    std::istringstream ids(read_text(root / "identities.jsonl"));
    while (std::getline(ids, line)) {
      if (line.empty()) continue;
      const ojson j = ojson::parse(line);
      IdentitySpec s;
      s.identity_id = j.at("id").get<int>();
      s.body_shape = j.at("body_shape").get<std::vector<Real>>();
      s.base_pose_deg = j.at("base_pose_deg").get<Real>();
      s.upper_color = j.at("upper").get<int>();
      s.lower_color = j.at("lower").get<int>();
      m.identities.push_back(std::move(s));
    }
  }
  return m;
}

DatasetManifest generate_dataset(const GenerateConfig& cfg, const fs::path& out) {
  if (cfg.ids_train < 1 || cfg.ids_test < 1 || cfg.per_modality < 1)
    throw ConfigError("identity counts and images per modality must be positive");
  if (cfg.height < 16 || cfg.width < 16) throw ConfigError("image size must be at least 16x16");
  if (fs::exists(out) && !fs::is_directory(out)) throw ConfigError(out.string() + " exists and is not a directory");
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!cfg.overwrite)
      throw ConfigError("refusing to write into non-empty directory " + out.string() + " (pass overwrite)");
    for (const char* name : {"images", "masks", "manifest.jsonl", "palette.json", "dataset.json", "identities.jsonl"})
      fs::remove_all(out / name);
  }
  fs::create_directories(out / "images");
  fs::create_directories(out / "masks");

  DatasetManifest m;
  m.palette = default_palette();
  m.palette.validate();
  m.seed = cfg.seed;
  m.height = cfg.height;
  m.width = cfg.width;
  m.per_modality = cfg.per_modality;

  std::mt19937_64 rng(cfg.seed);
  const int total_ids = cfg.ids_train + cfg.ids_test;
  for (int id = 0; id < total_ids; ++id) {
    IdentitySpec s = sample_identity(rng, m.palette, cfg.content, id);
    // Identities must differ in some attribute; continuous draws make a
    // collision essentially impossible but it is cheap to rule out.
    while (std::any_of(m.identities.begin(), m.identities.end(), [&](const IdentitySpec& o) {
      return o.body_shape == s.body_shape && o.base_pose_deg == s.base_pose_deg &&
             o.upper_color == s.upper_color && o.lower_color == s.lower_color;
    }))
      s = sample_identity(rng, m.palette, cfg.content, id);
    m.identities.push_back(std::move(s));
    (id < cfg.ids_train ? m.train_ids : m.test_ids).push_back(id);
  }

  char name[32];
  for (int id = 0; id < total_ids; ++id) {
    const Split split = id < cfg.ids_train ? Split::Train : Split::Test;
    for (Modality mod : {Modality::RGB, Modality::IR})
      for (int k = 0; k < cfg.per_modality; ++k) {
        ManifestRecord r;
        r.identity = id;
        r.modality = mod;
        r.camera = mod == Modality::RGB ? k % kRgbCameras : kRgbCameras + k % kIrCameras;
        std::snprintf(name, sizeof(name), "%06zu.png", m.records.size());
        r.path = std::string("images/") + name;
        r.mask_path = std::string("masks/") + name;
        r.split = split;
        m.records.push_back(std::move(r));
      }
  }

  const auto n = static_cast<std::ptrdiff_t>(m.records.size());
  std::vector<std::string> errors(m.records.size());
#pragma omp parallel for schedule(dynamic, 8)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      const auto& r = m.records[i];
      std::mt19937_64 local(record_seed(cfg.seed, static_cast<std::uint64_t>(i)));
      const Jitter j = sample_jitter(local, cfg.jitter);
      const IdentitySpec& spec = m.identities[r.identity];
      Render img = r.modality == Modality::RGB ? render_rgb(spec, m.palette, j, r.camera, cfg.height, cfg.width, local)
                                               : render_ir(spec, m.palette, j, r.camera, cfg.height, cfg.width, local);
      io::write_png(out / r.path, io::to_raster(img.image));
      io::write_png(out / r.mask_path, io::Raster{cfg.width, cfg.height, 1, img.region});
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw std::runtime_error("dataset generation failed: " + e);

  write_manifest(m, out);
  return m;
}

// ---------------------------------------------------------------------------

Dataset::Dataset(DatasetManifest manifest, std::vector<Tensor> images, std::vector<std::vector<std::uint8_t>> masks)
    : manifest_(std::move(manifest)), images_(std::move(images)), masks_(std::move(masks)) {
  if (images_.size() != manifest_.records.size()) throw ContractError("Dataset: one image per record required");
  index();
}

Dataset Dataset::load(const fs::path& root) {
  DatasetManifest m = read_manifest(root);
  const auto n = static_cast<std::ptrdiff_t>(m.records.size());
  std::vector<Tensor> images(m.records.size());
  std::vector<std::vector<std::uint8_t>> masks(m.records.size());
  std::vector<std::string> errors(m.records.size());
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      const auto& r = m.records[i];
      io::Raster raster = io::read_png(root / r.path);
      const int expect = r.modality == Modality::RGB ? 3 : 1;
      if (raster.channels != expect || raster.width != m.width || raster.height != m.height)
        throw std::runtime_error(r.path + ": unexpected image shape");
      Tensor t = io::from_raster(raster);
      if (expect == 1) {
        const Tensor one = t;
        t = Tensor({3, m.height, m.width});
        for (int c = 0; c < 3; ++c) std::copy(one.values().begin(), one.values().end(), t.data() + c * one.size());
      }
      images[i] = std::move(t);
      if (!r.mask_path.empty() && fs::exists(root / r.mask_path)) masks[i] = io::read_png(root / r.mask_path).pixels;
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw std::runtime_error("dataset load failed: " + e);
  return Dataset(std::move(m), std::move(images), std::move(masks));
}

void Dataset::index() {
  int max_id = -1;
  for (const auto& r : manifest_.records) max_id = std::max(max_id, r.identity);
  for (int id : manifest_.train_ids) max_id = std::max(max_id, id);
  for (int id : manifest_.test_ids) max_id = std::max(max_id, id);
  by_identity_.assign(max_id + 1, {});
  for (std::size_t i = 0; i < manifest_.records.size(); ++i) {
    const auto& r = manifest_.records[i];
    by_identity_[r.identity][r.modality == Modality::RGB ? 0 : 1].push_back(static_cast<int>(i));
  }
  train_label_.assign(max_id + 1, -1);
  for (std::size_t k = 0; k < manifest_.train_ids.size(); ++k) train_label_[manifest_.train_ids[k]] = static_cast<int>(k);
}

const std::vector<int>& Dataset::records_of(int identity, Modality m) const {
  if (identity < 0 || identity >= static_cast<int>(by_identity_.size()))
    throw ContractError("unknown identity " + std::to_string(identity));
  return by_identity_[identity][m == Modality::RGB ? 0 : 1];
}

int Dataset::train_label(int identity) const {
  if (identity < 0 || identity >= static_cast<int>(train_label_.size()) || train_label_[identity] < 0)
    throw ContractError("identity " + std::to_string(identity) + " is not a training identity");
  return train_label_[identity];
}

ImageBatch Dataset::batch(const std::vector<int>& records, bool flip) const {
  ImageBatch b;
  if (records.empty()) throw ContractError("empty batch");
  const int h = manifest_.height, w = manifest_.width;
  b.pixels = Tensor({static_cast<int>(records.size()), 3, h, w});
  const std::size_t per = static_cast<std::size_t>(3) * h * w;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const Tensor& img = images_.at(records[i]);
    Real* dst = b.pixels.data() + per * i;
    if (!flip) {
      std::copy(img.values().begin(), img.values().end(), dst);
    } else {
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) dst[(c * h + y) * w + x] = img[(c * h + y) * w + (w - 1 - x)];
    }
    const auto& r = manifest_.records[records[i]];
    b.modality.push_back(r.modality);
    b.identity.push_back(r.identity);
    b.camera.push_back(r.camera);
    b.record.push_back(records[i]);
  }
  return b;
}

std::vector<int> sampled_records(const Dataset& data, int identity, Modality m, int holdout) {
  const auto& all = data.records_of(identity, m);
  const int keep = static_cast<int>(all.size()) - std::max(0, holdout);
  if (keep < 1)
    throw ContractError("holdout of " + std::to_string(holdout) + " leaves identity " + std::to_string(identity) +
                        " without " + to_string(m) + " training images");
  return {all.begin(), all.begin() + keep};
}

std::vector<int> held_out_records(const Dataset& data, Modality m, int holdout) {
  std::vector<int> out;
  for (int id : data.manifest().train_ids) {
    const auto& all = data.records_of(id, m);
    const int keep = static_cast<int>(all.size()) - std::max(0, holdout);
    for (int i = std::max(0, keep); i < static_cast<int>(all.size()); ++i) out.push_back(all[i]);
  }
  return out;
}

std::pair<ImageBatch, ImageBatch> load_batch(const Dataset& data, const PKSampler& sampler, std::mt19937_64& rng,
                                             Real flip_prob) {
  const auto& ids = data.manifest().train_ids;
  if (sampler.identities < 1 || sampler.per_modality < 1) throw ContractError("sampler sizes must be positive");
  if (sampler.identities > static_cast<int>(ids.size()))
    throw ContractError("sampler asks for " + std::to_string(sampler.identities) + " identities but only " +
                        std::to_string(ids.size()) + " are available");
  // Partial Fisher-Yates over the train identities.
  std::vector<int> pool = ids;
  for (int i = 0; i < sampler.identities; ++i) {
    std::uniform_int_distribution<int> pick(i, static_cast<int>(pool.size()) - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  auto choose = [&](const std::vector<int>& recs) {
    if (recs.empty()) throw ContractError("identity without images in one modality");
    std::vector<int> out;
    if (static_cast<int>(recs.size()) >= sampler.per_modality) {
      std::vector<int> p = recs;
      for (int i = 0; i < sampler.per_modality; ++i) {
        std::uniform_int_distribution<int> pick(i, static_cast<int>(p.size()) - 1);
        std::swap(p[i], p[pick(rng)]);
        out.push_back(p[i]);
      }
    } else {
      std::uniform_int_distribution<int> pick(0, static_cast<int>(recs.size()) - 1);
      for (int i = 0; i < sampler.per_modality; ++i) out.push_back(recs[pick(rng)]);
    }
    return out;
  };
  std::vector<int> rgb, ir;
  for (int i = 0; i < sampler.identities; ++i) {
    const int id = pool[i];
    for (int r : choose(sampled_records(data, id, Modality::RGB, sampler.holdout))) rgb.push_back(r);
    for (int r : choose(sampled_records(data, id, Modality::IR, sampler.holdout))) ir.push_back(r);
  }
  auto build = [&](const std::vector<int>& recs) {
    if (flip_prob <= 0) return data.batch(recs, false);
    std::bernoulli_distribution flip(flip_prob);
    ImageBatch b;
    std::vector<ImageBatch> parts;
    std::vector<Tensor> pix;
    for (int r : recs) {
      ImageBatch one = data.batch({r}, flip(rng));
      pix.push_back(one.pixels);
      b.modality.push_back(one.modality[0]);
      b.identity.push_back(one.identity[0]);
      b.camera.push_back(one.camera[0]);
      b.record.push_back(r);
    }
    b.pixels = concat_rows(pix);
    return b;
  };
  ImageBatch rgb_batch = build(rgb);
  ImageBatch ir_batch = build(ir);
  return {std::move(rgb_batch), std::move(ir_batch)};
}

}  // namespace xmreid::data
