#include "xmreid/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "xmreid/image_io.hpp"

namespace xmreid::eval {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

Tensor cosine_similarity_matrix(const Tensor& queries, const Tensor& gallery, Real eps) {
  if (queries.ndim() != 2 || gallery.ndim() != 2 || queries.dim(1) != gallery.dim(1))
    throw ContractError("cosine_similarity_matrix: expected [Q x D] and [G x D], got " +
                        shape_string(queries.shape()) + " and " + shape_string(gallery.shape()));
  const int d = queries.dim(1);
  auto unit_rows = [&](const Tensor& x, const char* which) {
    Tensor u(x.shape());
    for (int i = 0; i < x.dim(0); ++i) {
      Real s = 0;
      for (int t = 0; t < d; ++t) s += x.at(i, t) * x.at(i, t);
      const Real norm = std::sqrt(s);
      if (!(norm > eps))
        throw ContractError(std::string("cosine_similarity_matrix: zero-norm ") + which + " row " + std::to_string(i));
      for (int t = 0; t < d; ++t) u.at(i, t) = x.at(i, t) / norm;
    }
    return u;
  };
  const Tensor q = unit_rows(queries, "query"), g = unit_rows(gallery, "gallery");
  Tensor sim({q.dim(0), g.dim(0)});
#pragma omp parallel for schedule(static)
  for (int i = 0; i < q.dim(0); ++i)
    for (int j = 0; j < g.dim(0); ++j) {
      Real s = 0;
      for (int t = 0; t < d; ++t) s += q.at(i, t) * g.at(j, t);
      sim.at(i, j) = std::clamp(s, Real(-1), Real(1));
    }
  return sim;
}

std::vector<int> rank_gallery(std::span<const Real> similarities) {
  std::vector<int> order(similarities.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return similarities[a] > similarities[b]; });
  return order;
}

namespace {

void check_protocol(const Tensor& sim, std::span<const int> query_ids, std::span<const int> gallery_ids) {
  if (sim.ndim() != 2 || static_cast<std::size_t>(sim.dim(0)) != query_ids.size() ||
      static_cast<std::size_t>(sim.dim(1)) != gallery_ids.size())
    throw ContractError("similarity matrix does not match the id lists");
  const std::set<int> present(gallery_ids.begin(), gallery_ids.end());
  std::set<int> missing;
  for (int q : query_ids)
    if (!present.count(q)) missing.insert(q);
  if (!missing.empty()) {
    std::string ids;
    for (int m : missing) ids += (ids.empty() ? "" : ",") + std::to_string(m);
    throw ProtocolError("query identities absent from the gallery: " + ids);
  }
}

std::span<const Real> row_of(const Tensor& sim, int i) {
  return {sim.data() + static_cast<std::size_t>(i) * sim.dim(1), static_cast<std::size_t>(sim.dim(1))};
}

int first_hit(std::span<const Real> sims, int query_id, std::span<const int> gallery_ids) {
  const auto order = rank_gallery(sims);
  for (std::size_t r = 0; r < order.size(); ++r)
    if (gallery_ids[order[r]] == query_id) return static_cast<int>(r) + 1;
  return 0;
}

}  // namespace

std::vector<Real> cmc(const Tensor& sim, std::span<const int> query_ids, std::span<const int> gallery_ids,
                      int max_rank) {
  if (max_rank < 1) throw ContractError("cmc: max_rank must be positive");
  check_protocol(sim, query_ids, gallery_ids);
  const int nq = static_cast<int>(query_ids.size());
  std::vector<int> hit(nq);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < nq; ++i) hit[i] = first_hit(row_of(sim, i), query_ids[i], gallery_ids);
  std::vector<long> at_rank(max_rank, 0);
  for (int h : hit)
    if (h <= max_rank) ++at_rank[h - 1];
  std::vector<Real> curve(max_rank);
  long cumulative = 0;
  for (int k = 0; k < max_rank; ++k) {
    cumulative += at_rank[k];
    curve[k] = nq == 0 ? 0 : static_cast<Real>(cumulative) / nq;
  }
  return curve;
}

Real average_precision(std::span<const Real> similarities, int query_id, std::span<const int> gallery_ids) {
  const auto order = rank_gallery(similarities);
  long hits = 0;
  Real sum = 0;
  for (std::size_t r = 0; r < order.size(); ++r)
    if (gallery_ids[order[r]] == query_id) {
      ++hits;
      sum += static_cast<Real>(hits) / static_cast<Real>(r + 1);
    }
  if (hits == 0) throw ProtocolError("query identity " + std::to_string(query_id) + " absent from the gallery");
  return sum / static_cast<Real>(hits);
}

Real map_score(const Tensor& sim, std::span<const int> query_ids, std::span<const int> gallery_ids) {
  check_protocol(sim, query_ids, gallery_ids);
  const int nq = static_cast<int>(query_ids.size());
  std::vector<Real> ap(nq);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < nq; ++i) ap[i] = average_precision(row_of(sim, i), query_ids[i], gallery_ids);
  Real total = 0;
  for (Real a : ap) total += a;
  return nq == 0 ? 0 : total / nq;
}

std::string to_string(Shot s) { return s == Shot::Single ? "single" : "multi"; }

Shot shot_from_string(const std::string& s) {
  if (s == "single") return Shot::Single;
  if (s == "multi") return Shot::Multi;
  throw ContractError("unknown shot setting '" + s + "' (expected single or multi)");
}

// ---------------------------------------------------------------------------

FeatureTable extract_split_features(align::AlignmentModel& model, const data::Dataset& data, data::Split split) {
  FeatureTable t;
  const auto& recs = data.manifest().records;
  for (int i = 0; i < static_cast<int>(recs.size()); ++i)
    if (recs[i].split == split) t.record.push_back(i);
  if (t.record.empty()) throw ProtocolError("split " + data::to_string(split) + " has no images");
  const auto& m = data.manifest();
  Tensor pixels({static_cast<int>(t.record.size()), 3, m.height, m.width});
  const std::size_t per = static_cast<std::size_t>(3) * m.height * m.width;
  for (std::size_t i = 0; i < t.record.size(); ++i) {
    const Tensor& img = data.image(t.record[i]);
    std::copy(img.values().begin(), img.values().end(), pixels.data() + per * i);
    const auto& r = recs[t.record[i]];
    t.identity.push_back(r.identity);
    t.camera.push_back(r.camera);
    t.modality.push_back(r.modality);
  }
  t.features = align::extract_features(model, pixels);
  return t;
}

std::vector<int> sample_gallery(const FeatureTable& table, const EvalOptions& options, std::uint64_t repeat_seed) {
  const Modality gallery_mod = options.probe == Modality::IR ? Modality::RGB : Modality::IR;
  std::map<std::pair<int, int>, std::vector<int>> groups;  // (identity, camera) -> rows
  for (int i = 0; i < static_cast<int>(table.record.size()); ++i)
    if (table.modality[i] == gallery_mod) groups[{table.identity[i], table.camera[i]}].push_back(i);
  std::mt19937_64 rng(repeat_seed);
  const int take = options.shot == Shot::Single ? 1 : options.multi_shot_per_camera;
  std::vector<int> gallery;
  for (auto& [key, rows] : groups) {
    const int n = std::min(take, static_cast<int>(rows.size()));
    for (int i = 0; i < n; ++i) {
      std::uniform_int_distribution<int> pick(i, static_cast<int>(rows.size()) - 1);
      std::swap(rows[i], rows[pick(rng)]);
      gallery.push_back(rows[i]);
    }
  }
  return gallery;
}

EvalReport evaluate_features(const FeatureTable& table, const EvalOptions& options) {
  if (options.repeats < 1) throw ContractError("repeats must be positive");
  if (options.max_rank < 1) throw ContractError("max_rank must be positive");
  EvalReport report;
  report.options = options;
  const Modality gallery_mod = options.probe == Modality::IR ? Modality::RGB : Modality::IR;

  std::vector<int> query_rows;
  std::set<int> query_identities, gallery_identities;
  for (int i = 0; i < static_cast<int>(table.record.size()); ++i) {
    if (table.modality[i] == options.probe) {
      query_rows.push_back(i);
      query_identities.insert(table.identity[i]);
    } else {
      gallery_identities.insert(table.identity[i]);
    }
  }
  std::string missing;
  for (int id : query_identities)
    if (!gallery_identities.count(id)) missing += (missing.empty() ? "" : ",") + std::to_string(id);
  if (!missing.empty())
    throw ProtocolError("identities without " + data::to_string(gallery_mod) + " test images: " + missing);
  if (query_rows.empty()) throw ProtocolError("no " + data::to_string(options.probe) + " probe images");

  const int d = table.features.dim(1);
  Tensor queries({static_cast<int>(query_rows.size()), d});
  std::vector<int> query_ids;
  for (std::size_t i = 0; i < query_rows.size(); ++i) {
    for (int t = 0; t < d; ++t) queries.at(static_cast<int>(i), t) = table.features.at(query_rows[i], t);
    query_ids.push_back(table.identity[query_rows[i]]);
  }
  report.num_queries = static_cast<int>(query_rows.size());
  report.num_identities = static_cast<int>(query_identities.size());

  report.cmc.assign(options.max_rank, 0);
  for (int rep = 0; rep < options.repeats; ++rep) {
    const auto rows = sample_gallery(table, options, data::record_seed(options.seed, rep));
    Tensor gallery({static_cast<int>(rows.size()), d});
    std::vector<int> gallery_ids;
    for (std::size_t j = 0; j < rows.size(); ++j) {
      for (int t = 0; t < d; ++t) gallery.at(static_cast<int>(j), t) = table.features.at(rows[j], t);
      gallery_ids.push_back(table.identity[rows[j]]);
    }
    const Tensor sim = cosine_similarity_matrix(queries, gallery);
    RepeatResult r;
    r.cmc = cmc(sim, query_ids, gallery_ids, options.max_rank);
    r.map = map_score(sim, query_ids, gallery_ids);
    r.gallery_size = static_cast<int>(rows.size());
    report.repeats.push_back(std::move(r));
  }
  for (const auto& r : report.repeats) {
    for (int k = 0; k < options.max_rank; ++k) report.cmc[k] += r.cmc[k];
    report.map += r.map;
  }
  for (Real& c : report.cmc) c /= options.repeats;
  report.map /= options.repeats;
  return report;
}

EvalReport evaluate_protocol(align::AlignmentModel& model, const data::Dataset& data, const EvalOptions& options) {
  return evaluate_features(extract_split_features(model, data), options);
}

// ---------------------------------------------------------------------------

long Histogram::total() const { return std::accumulate(counts.begin(), counts.end(), 0L); }

SimilarityHistograms similarity_histograms(const FeatureTable& table, int bins, Modality probe) {
  if (bins < 1) throw ContractError("histogram needs at least one bin");
  std::vector<int> probes, gallery;
  for (int i = 0; i < static_cast<int>(table.record.size()); ++i)
    (table.modality[i] == probe ? probes : gallery).push_back(i);
  auto rows = [&](const std::vector<int>& idx) {
    Tensor t({static_cast<int>(idx.size()), table.features.dim(1)});
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (int c = 0; c < table.features.dim(1); ++c) t.at(static_cast<int>(i), c) = table.features.at(idx[i], c);
    return t;
  };
  const Tensor sim = cosine_similarity_matrix(rows(probes), rows(gallery));

  SimilarityHistograms h;
  h.intra.counts.assign(bins, 0);
  h.inter.counts.assign(bins, 0);
  Real intra_sum = 0, inter_sum = 0;
  for (std::size_t i = 0; i < probes.size(); ++i)
    for (std::size_t j = 0; j < gallery.size(); ++j) {
      const Real s = sim.at(static_cast<int>(i), static_cast<int>(j));
      const int b = std::clamp(static_cast<int>(std::floor((s + 1) / 2 * bins)), 0, bins - 1);
      if (table.identity[probes[i]] == table.identity[gallery[j]]) {
        ++h.intra.counts[b];
        ++h.intra_pairs;
        intra_sum += s;
      } else {
        ++h.inter.counts[b];
        ++h.inter_pairs;
        inter_sum += s;
      }
    }
  h.intra_mean = h.intra_pairs ? intra_sum / h.intra_pairs : 0;
  h.inter_mean = h.inter_pairs ? inter_sum / h.inter_pairs : 0;
  return h;
}

SimilarityHistograms similarity_histograms(align::AlignmentModel& model, const data::Dataset& data, int bins) {
  return similarity_histograms(extract_split_features(model, data), bins);
}

void write_histograms_csv(const SimilarityHistograms& h, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "bin_lo,bin_hi,intra,inter\n";
  const int bins = static_cast<int>(h.intra.counts.size());
  const Real width = (h.intra.hi - h.intra.lo) / bins;
  for (int b = 0; b < bins; ++b)
    out << h.intra.lo + b * width << ',' << h.intra.lo + (b + 1) * width << ',' << h.intra.counts[b] << ','
        << h.inter.counts[b] << '\n';
}

void write_histograms_png(const SimilarityHistograms& h, const fs::path& path, int width, int height) {
  io::Raster r{width, height, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(width) * height * 3, 255)};
  const int bins = static_cast<int>(h.intra.counts.size());
  // Each histogram is drawn as a density so both are visible at any pair count.
  auto density = [](const Histogram& hist) {
    std::vector<Real> d(hist.counts.size());
    const Real total = std::max<long>(1, hist.total());
    for (std::size_t b = 0; b < d.size(); ++b) d[b] = hist.counts[b] / total;
    return d;
  };
  const auto di = density(h.intra), de = density(h.inter);
  const Real peak = std::max(*std::max_element(di.begin(), di.end()), *std::max_element(de.begin(), de.end()));
  const int margin = 8, plot_h = height - 2 * margin;
  auto paint = [&](int x, int y, int c, int v) {
    auto& px = r.pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
    px = static_cast<std::uint8_t>(std::min<int>(px, v));
  };
  for (int x = margin; x < width - margin; ++x) {
    const int b = std::min(bins - 1, (x - margin) * bins / (width - 2 * margin));
    const int top_i = height - margin - static_cast<int>(peak > 0 ? di[b] / peak * plot_h : 0);
    const int top_e = height - margin - static_cast<int>(peak > 0 ? de[b] / peak * plot_h : 0);
    for (int y = top_i; y < height - margin; ++y) {
      paint(x, y, 1, 120);
      paint(x, y, 2, 120);
    }
    for (int y = top_e; y < height - margin; ++y) {
      paint(x, y, 0, 120);
      paint(x, y, 1, 120);
    }
  }
  for (int x = margin; x < width - margin; ++x)
    for (int c = 0; c < 3; ++c) r.pixels[(static_cast<std::size_t>(height - margin) * width + x) * 3 + c] = 0;
  io::write_png(path, r);
}

// ---------------------------------------------------------------------------

void write_feature_dump(const FeatureTable& table, const data::Dataset& data, const fs::path& npy_path,
                        const fs::path& sidecar_path) {
  const int n = table.features.dim(0), d = table.features.dim(1);
  std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': (" + std::to_string(n) + ", " +
                       std::to_string(d) + "), }";
  const std::size_t prefix = 10;
  while ((prefix + header.size() + 1) % 64 != 0) header += ' ';
  header += '\n';
  std::ofstream out(npy_path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + npy_path.string());
  out.write("\x93NUMPY\x01\x00", 8);
  const auto len = static_cast<std::uint16_t>(header.size());
  const char len_bytes[2] = {static_cast<char>(len & 0xff), static_cast<char>(len >> 8)};
  out.write(len_bytes, 2);
  out << header;
  out.write(reinterpret_cast<const char*>(table.features.data()), static_cast<std::streamsize>(sizeof(Real)) * n * d);

  std::ofstream side(sidecar_path);
  if (!side) throw std::runtime_error("cannot write " + sidecar_path.string());
  for (int i = 0; i < n; ++i) {
    const auto& rec = data.manifest().records.at(table.record[i]);
    json j;
    j["row"] = i;
    j["record"] = table.record[i];
    j["id"] = table.identity[i];
    j["modality"] = data::to_string(table.modality[i]);
    j["camera"] = table.camera[i];
    j["path"] = rec.path;
    side << j.dump() << '\n';
  }
}

Tensor read_npy(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "\x93NUMPY", 6) != 0) throw std::runtime_error(path.string() + ": not an .npy file");
  unsigned char len_bytes[2];
  in.read(reinterpret_cast<char*>(len_bytes), 2);
  std::string header(len_bytes[0] | (len_bytes[1] << 8), '\0');
  in.read(header.data(), static_cast<std::streamsize>(header.size()));
  if (header.find("'<f8'") == std::string::npos || header.find("'fortran_order': False") == std::string::npos)
    throw std::runtime_error(path.string() + ": only little-endian float64 C-order arrays are supported");
  const auto open = header.find('('), close = header.find(')');
  Shape shape;
  std::stringstream dims(header.substr(open + 1, close - open - 1));
  std::string part;
  while (std::getline(dims, part, ','))
    if (part.find_first_not_of(' ') != std::string::npos) shape.push_back(std::stoi(part));
  Tensor t(shape);
  in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(sizeof(Real) * t.size()));
  if (!in) throw std::runtime_error(path.string() + ": truncated array data");
  return t;
}

// ---------------------------------------------------------------------------

FidelityStats generation_fidelity(gen::GenerationModel& model, const data::Dataset& data,
                                  std::span<const int> rgb_records, std::span<const int> ir_records) {
  NoGradGuard guard;
  const auto& m = data.manifest();
  const std::size_t plane = static_cast<std::size_t>(m.height) * m.width;
  FidelityStats stats;

  std::vector<int> rgb_side, ir_side;
  for (int r : rgb_records) {
    const int id = m.records.at(r).identity;
    for (int q : ir_records)
      if (m.records.at(q).identity == id) {
        rgb_side.push_back(r);
        ir_side.push_back(q);
        break;
      }
  }
  stats.pairs = static_cast<int>(rgb_side.size());

  long regions = 0;
  const int chunk = 32;
  for (int begin = 0; begin < stats.pairs; begin += chunk) {
    const int end = std::min(stats.pairs, begin + chunk);
    const std::vector<int> rgb(rgb_side.begin() + begin, rgb_side.begin() + end);
    const std::vector<int> ir(ir_side.begin() + begin, ir_side.begin() + end);
    Var x_rgb(data.batch(rgb).pixels), x_ir(data.batch(ir).pixels);
    const Tensor fake = gen::decode(model, gen::encode_content(model, x_ir),
                                    gen::encode_style(model, x_rgb, Modality::RGB), Modality::RGB)
                            .value();
    for (int i = 0; i < end - begin; ++i) {
      const auto& mask = data.mask(ir[i]);
      if (mask.size() != plane) throw ProtocolError("record " + std::to_string(ir[i]) + " has no region mask");
      const auto& spec = m.identities.at(m.records[ir[i]].identity);
      for (auto [region, color] : {std::pair{data::Region::Upper, spec.upper_color},
                                   std::pair{data::Region::Lower, spec.lower_color}}) {
        std::array<Real, 3> mean_fake{0, 0, 0}, mean_gray{0, 0, 0};
        long count = 0;
        for (std::size_t p = 0; p < plane; ++p) {
          if (mask[p] != static_cast<std::uint8_t>(region)) continue;
          ++count;
          for (int c = 0; c < 3; ++c) {
            mean_fake[c] += fake[(static_cast<std::size_t>(i) * 3 + c) * plane + p];
            mean_gray[c] += x_ir.value()[(static_cast<std::size_t>(i) * 3 + c) * plane + p];
          }
        }
        if (count == 0) continue;
        Real ef = 0, eg = 0;
        for (int c = 0; c < 3; ++c) {
          const Real target = 2 * m.palette.colors.at(color).rgb[c] - 1;
          ef += std::pow(mean_fake[c] / count - target, 2);
          eg += std::pow(mean_gray[c] / count - target, 2);
        }
        stats.color_error += std::sqrt(ef);
        stats.gray_error += std::sqrt(eg);
        ++regions;
      }
    }
  }
  if (regions > 0) {
    stats.color_error /= regions;
    stats.gray_error /= regions;
  }

  Real recon_sum = 0;
  long images = 0;
  for (auto [records, mod] : {std::pair{rgb_records, Modality::RGB}, std::pair{ir_records, Modality::IR}}) {
    for (std::size_t begin = 0; begin < records.size(); begin += chunk) {
      const std::size_t end = std::min(records.size(), begin + chunk);
      Var x(data.batch(std::vector<int>(records.begin() + begin, records.begin() + end)).pixels);
      Var rec = gen::decode(model, gen::encode_content(model, x), gen::encode_style(model, x, mod), mod);
      recon_sum += ops::l1_loss(x, rec).item() * static_cast<Real>(end - begin);
      images += static_cast<long>(end - begin);
    }
  }
  stats.recon_l1 = images ? recon_sum / images : 0;
  return stats;
}

void write_quad_grid(gen::GenerationModel& model, const data::Dataset& data, std::span<const int> rgb_records,
                     std::span<const int> ir_records, const fs::path& path) {
  NoGradGuard guard;
  const auto& m = data.manifest();
  std::vector<int> rgb, ir;
  for (int r : rgb_records)
    for (int q : ir_records)
      if (m.records.at(q).identity == m.records.at(r).identity) {
        rgb.push_back(r);
        ir.push_back(q);
        break;
      }
  if (rgb.empty()) throw ProtocolError("write_quad_grid: no RGB/IR pair of a common identity");

  const data::ImageBatch b_rgb = data.batch(rgb), b_ir = data.batch(ir);
  gen::Pairing identity_pairing(rgb.size());
  std::iota(identity_pairing.begin(), identity_pairing.end(), 0);
  const gen::QuadBatch q = gen::exchange_generate(model, b_rgb, b_ir, identity_pairing);

  const int h = m.height, w = m.width, gap = 2, n = static_cast<int>(rgb.size());
  io::Raster grid;
  grid.channels = 3;
  grid.width = 4 * w + 5 * gap;
  grid.height = n * h + (n + 1) * gap;
  grid.pixels.assign(static_cast<std::size_t>(grid.width) * grid.height * 3, 255);
  const Var* columns[4] = {&q.x_rgb, &q.x_ir, &q.x_ir2rgb, &q.x_rgb2ir};
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 4; ++c) {
      const io::Raster tile = io::to_raster(slice_rows(columns[c]->value(), i, i + 1).reshaped({3, h, w}));
      const int x0 = gap + c * (w + gap), y0 = gap + i * (h + gap);
      for (int y = 0; y < h; ++y)
        std::memcpy(&grid.pixels[(static_cast<std::size_t>(y0 + y) * grid.width + x0) * 3],
                    &tile.pixels[static_cast<std::size_t>(y) * w * 3], static_cast<std::size_t>(w) * 3);
    }
  io::write_png(path, grid);
}

// ---------------------------------------------------------------------------

std::string report_json(const EvalReport& r) {
  json j;
  j["mode"] = r.mode;
  j["shot"] = to_string(r.options.shot);
  j["repeats"] = r.options.repeats;
  j["seed"] = r.options.seed;
  j["max_rank"] = r.options.max_rank;
  j["multi_shot_per_camera"] = r.options.multi_shot_per_camera;
  j["probe"] = data::to_string(r.options.probe);
  j["num_queries"] = r.num_queries;
  j["num_identities"] = r.num_identities;
  j["cmc"] = r.cmc;
  j["map"] = r.map;
  json reps = json::array();
  for (const auto& p : r.repeats) reps.push_back({{"cmc", p.cmc}, {"map", p.map}, {"gallery_size", p.gallery_size}});
  j["per_repeat"] = reps;
  return j.dump(2);
}

EvalReport report_from_json(const std::string& text) {
  const json j = json::parse(text);
  EvalReport r;
  r.mode = j.at("mode").get<std::string>();
  r.options.shot = shot_from_string(j.at("shot").get<std::string>());
  r.options.repeats = j.at("repeats").get<int>();
  r.options.seed = j.at("seed").get<std::uint64_t>();
  r.options.max_rank = j.at("max_rank").get<int>();
  r.options.multi_shot_per_camera = j.at("multi_shot_per_camera").get<int>();
  r.options.probe = data::modality_from_string(j.at("probe").get<std::string>());
  r.num_queries = j.at("num_queries").get<int>();
  r.num_identities = j.at("num_identities").get<int>();
  r.cmc = j.at("cmc").get<std::vector<Real>>();
  r.map = j.at("map").get<Real>();
  for (const auto& p : j.at("per_repeat"))
    r.repeats.push_back({p.at("cmc").get<std::vector<Real>>(), p.at("map").get<Real>(), p.at("gallery_size").get<int>()});
  return r;
}

}  // namespace xmreid::eval
