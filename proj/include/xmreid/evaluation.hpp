#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "xmreid/alignment.hpp"
#include "xmreid/synth_data.hpp"

// Cross-modality retrieval: cosine matching, CMC, mAP, repeated random
// gallery splits, similarity histograms, and generation-fidelity statistics.
namespace xmreid::eval {

using data::Modality;

/// A query identity missing from the gallery, or a test identity without
/// gallery-modality images.
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// [|Q| x |G|] cosine similarities. Throws ContractError on a zero-norm row.
Tensor cosine_similarity_matrix(const Tensor& queries, const Tensor& gallery, Real eps = 1e-12);

/// Gallery order for one query: descending similarity, ties by gallery index.
std::vector<int> rank_gallery(std::span<const Real> similarities);

/// CMC(k) for k = 1..max_rank (entry k-1).
std::vector<Real> cmc(const Tensor& sim, std::span<const int> query_ids, std::span<const int> gallery_ids,
                      int max_rank);
Real average_precision(std::span<const Real> similarities, int query_id, std::span<const int> gallery_ids);
Real map_score(const Tensor& sim, std::span<const int> query_ids, std::span<const int> gallery_ids);

enum class Shot { Single, Multi };
std::string to_string(Shot s);
Shot shot_from_string(const std::string& s);

struct EvalOptions {
  Shot shot = Shot::Single;
  int repeats = 10;
  std::uint64_t seed = 0;
  int max_rank = 20;
  int multi_shot_per_camera = 10;
  Modality probe = Modality::IR;  // gallery is the other modality
};

struct RepeatResult {
  std::vector<Real> cmc;
  Real map = 0;
  int gallery_size = 0;
};

struct EvalReport {
  EvalOptions options;
  std::string mode = "all-search";
  int num_queries = 0;
  int num_identities = 0;
  std::vector<RepeatResult> repeats;
  std::vector<Real> cmc;  // mean over repeats
  Real map = 0;

  Real rank(int k) const { return cmc.at(k - 1); }
};

/// Test images of one split, features extracted once.
struct FeatureTable {
  Tensor features;  // [N x D]
  std::vector<int> record, identity, camera;
  std::vector<Modality> modality;
};

FeatureTable extract_split_features(align::AlignmentModel& model, const data::Dataset& data,
                                    data::Split split = data::Split::Test);

/// Samples one gallery: per identity and gallery-modality camera, one image
/// (single shot) or up to `multi_shot_per_camera` images (multi shot).
std::vector<int> sample_gallery(const FeatureTable& table, const EvalOptions& options, std::uint64_t repeat_seed);

EvalReport evaluate_features(const FeatureTable& table, const EvalOptions& options);
EvalReport evaluate_protocol(align::AlignmentModel& model, const data::Dataset& data, const EvalOptions& options);

struct Histogram {
  Real lo = -1, hi = 1;
  std::vector<long> counts;
  long total() const;
};

struct SimilarityHistograms {
  Histogram intra, inter;
  Real intra_mean = 0, inter_mean = 0;
  long intra_pairs = 0, inter_pairs = 0;
  Real gap() const { return intra_mean - inter_mean; }
};

/// Every (probe-modality, gallery-modality) pair, split by identity equality.
SimilarityHistograms similarity_histograms(const FeatureTable& table, int bins, Modality probe = Modality::IR);
SimilarityHistograms similarity_histograms(align::AlignmentModel& model, const data::Dataset& data, int bins);
void write_histograms_csv(const SimilarityHistograms& h, const std::filesystem::path& path);
/// Overlaid bar chart: intra in red, inter in blue.
void write_histograms_png(const SimilarityHistograms& h, const std::filesystem::path& path, int width = 480,
                          int height = 240);

/// Features as a NumPy .npy array plus a JSONL sidecar (one line per row).
void write_feature_dump(const FeatureTable& table, const data::Dataset& data, const std::filesystem::path& npy_path,
                        const std::filesystem::path& sidecar_path);
Tensor read_npy(const std::filesystem::path& path);

struct FidelityStats {
  Real color_error = 0;  // |region mean of x_ir2rgb - palette color|, upper and lower body
  Real gray_error = 0;   // same for the IR image passed through as gray
  Real recon_l1 = 0;     // mean per-pixel |x - D(E^i(x), E^s(x))| over both modalities
  int pairs = 0;
  Real ratio() const { return gray_error > 0 ? color_error / gray_error : 0; }
};

/// Pairs the i-th RGB record with the first IR record of the same identity in
/// `ir_records`; masks come from the IR image, whose content is kept.
FidelityStats generation_fidelity(gen::GenerationModel& model, const data::Dataset& data,
                                  std::span<const int> rgb_records, std::span<const int> ir_records);

/// One row per pair: x_rgb, x_ir, x_ir2rgb, x_rgb2ir, separated by white gutters.
/// Pairs are formed like generation_fidelity's.
void write_quad_grid(gen::GenerationModel& model, const data::Dataset& data, std::span<const int> rgb_records,
                     std::span<const int> ir_records, const std::filesystem::path& path);

std::string report_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);

}  // namespace xmreid::eval
