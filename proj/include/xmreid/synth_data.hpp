#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "xmreid/tensor.hpp"

// Synthetic two-modality re-identification data. A person is a two-block
// figure whose geometry is the identity's content and whose upper/lower
// colors are its style. The IR sensor sees only an intensity bucket per
// color, and every bucket holds at least two colors, so IR -> RGB is
// one-to-many by construction.
namespace xmreid::data {

enum class Modality { RGB, IR };
std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

/// Thrown for invalid generator configuration (palette, sizes, counts).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct PaletteColor {
  std::string name;
  std::array<Real, 3> rgb;  // in [0, 1]
  int ir_bucket = 0;
};

struct Palette {
  std::vector<PaletteColor> colors;
  std::vector<Real> bucket_intensity;  // IR level per bucket, in [0, 1]

  int size() const { return static_cast<int>(colors.size()); }
  /// Throws ConfigError unless there are >= 4 colors and every bucket in use
  /// holds >= 2 colors.
  void validate() const;
  int index_of(const std::string& name) const;
};

/// Eight colors in four IR buckets; red and dark-blue share a bucket.
Palette default_palette();

struct Range {
  Real lo = 0;
  Real hi = 0;
};

/// Sampling ranges for the content attributes, in pixels at 64-pixel height.
struct ContentRanges {
  Range torso_width{9, 16};
  Range torso_fraction{0.36, 0.56};
  Range leg_gap{1, 4.5};
  Range head_radius{3, 5.2};
  Range base_pose_deg{-9, 9};
};

/// body_shape = {torso width, torso fraction of body height, leg gap, head radius}
struct IdentitySpec {
  int identity_id = 0;
  std::vector<Real> body_shape;
  Real base_pose_deg = 0;
  int upper_color = 0;
  int lower_color = 0;

  bool operator==(const IdentitySpec&) const = default;
};

IdentitySpec sample_identity(std::mt19937_64& rng, const Palette& palette, const ContentRanges& ranges,
                             int identity_id = 0);

/// Per-image nuisance parameters.
struct Jitter {
  Real dx = 0, dy = 0;   // pixels
  Real scale = 1;
  Real pose_deg = 0;     // added to the identity's base pose
  Real gain = 1;         // illumination (RGB) or sensor gain (IR)
  Real noise_std = 0;    // additive Gaussian noise, [-1, 1] units
  std::array<Real, 3> background_phase{0, 0, 0};

  static Jitter none() { return {}; }
};

struct JitterRanges {
  Real shift_x = 3, shift_y = 2;
  Real scale = 0.08;
  Real pose_deg = 4;
  Real gain = 0.08;
  Real noise_std = 0.015;
};

Jitter sample_jitter(std::mt19937_64& rng, const JitterRanges& ranges);

enum class Region : std::uint8_t { Background = 0, Upper = 1, Lower = 2, Head = 3 };

struct Render {
  Tensor image;                      // [C x H x W] in [-1, 1]
  std::vector<std::uint8_t> region;  // H*W Region labels (ground-truth mask)
};

/// RGB cameras are 0..3 and IR cameras 4..5; each has a fixed tint/offset
/// and background tone. Camera 0 and camera 4 are neutral.
inline constexpr int kRgbCameras = 4;
inline constexpr int kIrCameras = 2;
bool is_ir_camera(int camera);

Render render_rgb(const IdentitySpec& spec, const Palette& palette, const Jitter& jitter, int camera, int height,
                  int width, std::mt19937_64& rng);
Render render_ir(const IdentitySpec& spec, const Palette& palette, const Jitter& jitter, int camera, int height,
                 int width, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// On-disk dataset

enum class Split { Train, Test };
std::string to_string(Split s);

struct ManifestRecord {
  int identity = 0;
  Modality modality = Modality::RGB;
  int camera = 0;
  std::string path;       // relative to the dataset root
  std::string mask_path;  // relative; 8-bit Region labels
  Split split = Split::Train;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  std::vector<int> train_ids;
  std::vector<int> test_ids;
  std::vector<IdentitySpec> identities;  // indexed by identity id
  Palette palette;
  std::uint64_t seed = 0;
  int height = 64;
  int width = 32;
  int per_modality = 8;
};

struct GenerateConfig {
  int ids_train = 100;
  int ids_test = 50;
  int per_modality = 8;
  int height = 64;
  int width = 32;
  std::uint64_t seed = 0;
  bool overwrite = false;
  ContentRanges content;
  JitterRanges jitter;
};

/// Derives the independent generator stream of one record.
std::uint64_t record_seed(std::uint64_t seed, std::uint64_t index);

/// Renders every image and writes manifest.jsonl, palette.json, dataset.json,
/// identities.jsonl, images/ and masks/ under `out`. Refuses a non-empty
/// directory unless `overwrite`.
DatasetManifest generate_dataset(const GenerateConfig& config, const std::filesystem::path& out);

void write_manifest(const DatasetManifest& m, const std::filesystem::path& root);
DatasetManifest read_manifest(const std::filesystem::path& root);
/// Serialized manifest.jsonl text; stable for a given manifest.
std::string manifest_jsonl(const DatasetManifest& m);

// ---------------------------------------------------------------------------
// In-memory access

struct ImageBatch {
  Tensor pixels;  // [N x 3 x H x W]; IR replicated to 3 channels
  std::vector<Modality> modality;
  std::vector<int> identity;
  std::vector<int> camera;
  std::vector<int> record;  // manifest index of each item

  int size() const { return static_cast<int>(identity.size()); }
};

/// A manifest with every image (and mask) resident in memory.
class Dataset {
 public:
  Dataset() = default;
  static Dataset load(const std::filesystem::path& root);
  explicit Dataset(DatasetManifest manifest, std::vector<Tensor> images, std::vector<std::vector<std::uint8_t>> masks);

  const DatasetManifest& manifest() const { return manifest_; }
  /// [3 x H x W]; IR records are replicated from the stored single channel.
  const Tensor& image(int record) const { return images_.at(record); }
  const std::vector<std::uint8_t>& mask(int record) const { return masks_.at(record); }

  /// Records of one identity and modality, in manifest order.
  const std::vector<int>& records_of(int identity, Modality m) const;
  /// Position of a train identity in the classifier output.
  int train_label(int identity) const;
  int num_train_ids() const { return static_cast<int>(manifest_.train_ids.size()); }

  ImageBatch batch(const std::vector<int>& records, bool flip = false) const;

 private:
  void index();

  DatasetManifest manifest_;
  std::vector<Tensor> images_;
  std::vector<std::vector<std::uint8_t>> masks_;
  std::vector<std::array<std::vector<int>, 2>> by_identity_;
  std::vector<int> train_label_;
};

struct PKSampler {
  int identities = 4;  // P
  int per_modality = 2;  // K
  int holdout = 0;  // last records per identity and modality never sampled
};

/// Records of a train identity that the sampler may draw.
std::vector<int> sampled_records(const Dataset& data, int identity, Modality m, int holdout);
/// The records `holdout` reserves, over all train identities.
std::vector<int> held_out_records(const Dataset& data, Modality m, int holdout);

/// P distinct train identities, K images of each in both modalities, with the
/// same identity order in both batches. Samples with replacement when an
/// identity has fewer than K images. `flip_prob` applies random horizontal
/// flips at load time.
std::pair<ImageBatch, ImageBatch> load_batch(const Dataset& data, const PKSampler& sampler, std::mt19937_64& rng,
                                             Real flip_prob = 0);

}  // namespace xmreid::data
