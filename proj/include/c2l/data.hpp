#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "c2l/io.hpp"
#include "c2l/tensor.hpp"
#include "c2l/train.hpp"

namespace c2l {

// ---------------------------------------------------------------- records

struct SpotRecord {
  std::string spot_id;
  int row = 0;
  int col = 0;
  int cluster = -1;  // ground truth on toy slides, -1 when unknown
  std::string source_spot;   // synthetic records: the spot whose genes conditioned them
  std::vector<float> patch;  // [C, S, S] in [-1, 1]
  std::vector<float> genes;  // raw counts, or normalized profiles (see genes_kind)
};

enum class GenesKind { RawCounts, Normalized };
const char* to_string(GenesKind k);
GenesKind genes_kind_from_string(const std::string& s);

// Per-gene preprocessing state: selected gene indices (ascending) and the
// log1p mean/std of each selected gene over the adaptation subset.
struct GeneStats {
  std::vector<std::size_t> selected;
  std::vector<double> mean;
  std::vector<double> std;
  std::vector<std::size_t> floored;  // selected genes whose std hit the floor
  std::vector<std::string> fitted_on;  // spot ids used

  bool empty() const { return selected.empty(); }
  std::size_t dim() const { return selected.size(); }
  std::vector<float> apply(std::span<const float> raw) const;
  io::json to_json() const;
  static GeneStats from_json(const io::json& j);
};

struct SlideDataset {
  std::string slide_id;
  Shape patch_shape;  // [C, S, S]
  std::vector<std::string> gene_names;
  GenesKind genes_kind = GenesKind::RawCounts;
  std::string source = "real";  // or "synthetic"
  GeneStats stats;
  io::json meta = io::json::object();
  std::vector<SpotRecord> spots;

  std::size_t size() const { return spots.size(); }
  std::size_t gene_dim() const { return gene_names.size(); }
  std::size_t patch_numel() const { return shape_numel(patch_shape); }
  void validate() const;
  std::size_t index_of(const std::string& spot_id) const;
};

// On disk: <stem>.json header, <stem>.bin fixed-stride little-endian float32
// records (patch then genes), <stem>.index.csv with spot_id,row,col,cluster,source_spot.
void write_dataset(const std::filesystem::path& stem, const SlideDataset& ds);
SlideDataset read_dataset(const std::filesystem::path& stem);
std::filesystem::path dataset_header_path(const std::filesystem::path& stem);
std::filesystem::path dataset_records_path(const std::filesystem::path& stem);
std::filesystem::path dataset_index_path(const std::filesystem::path& stem);

// ---------------------------------------------------------------- toy slide

struct ToySlideSpec {
  std::string slide_id = "toy";
  std::uint64_t seed = 0;          // spot draws, noise and blob placement
  std::uint64_t mapping_seed = 0;  // gene readout; share it to share biology
  int n_spots = 400;
  int d_genes = 32;
  int latent_dim = 4;
  int patch_size = 16;
  double cluster_spread = 0.35;
  double gene_noise = 0.2;

  void validate() const;
  io::json to_json() const;
  static ToySlideSpec from_json(const io::json& j);
};

inline constexpr int kToyClusters = 4;

// Fixed generator parameters: cluster centers in latent space and the
// log-linear gene readout log E[count_g] = b_g + A_g . z.
struct ToyMapping {
  int latent_dim = 0;
  std::vector<std::vector<double>> centers;  // [4][L]
  std::vector<std::vector<double>> readout;  // A: [d][L]
  std::vector<double> baseline;              // b: [d]
};

ToyMapping make_toy_mapping(const ToySlideSpec& spec);

// Morphology from the first four latent coordinates: blob density, blob
// orientation, blob hue and background level. A zero latent renders a blank
// background. `placement_seed` positions the blobs.
std::vector<float> render_patch(std::span<const double> latent, int patch_size, std::uint64_t placement_seed);

// Noise-free expected counts exp(b + A z).
std::vector<double> expected_counts(const ToyMapping& m, std::span<const double> latent);

SlideDataset generate_toy_slide(const ToySlideSpec& spec);

// ---------------------------------------------------------------- oracle

// Decoder that knows the generator: cluster and latent from genes by least
// squares on log counts, and from patches via hand-built image features with
// a linear map calibrated on freshly rendered patches.
class OracleDecoder {
 public:
  OracleDecoder(const ToySlideSpec& spec, std::size_t calibration = 2000);

  std::vector<double> latent_from_counts(std::span<const float> counts) const;
  std::vector<double> latent_from_patch(std::span<const float> patch) const;
  int nearest_cluster(std::span<const double> latent) const;
  int cluster_from_counts(std::span<const float> counts) const { return nearest_cluster(latent_from_counts(counts)); }
  int cluster_from_patch(std::span<const float> patch) const { return nearest_cluster(latent_from_patch(patch)); }
  // log1p of the expected counts implied by the decoded latent.
  std::vector<double> log_genes_from_patch(std::span<const float> patch) const;

  const ToyMapping& mapping() const { return mapping_; }
  static std::vector<double> patch_features(std::span<const float> patch, int patch_size);

 private:
  ToyMapping mapping_;
  int patch_size_;
  std::vector<std::vector<double>> counts_pinv_;   // [L][d]
  std::vector<std::vector<double>> feature_map_;   // [L][F + 1], last column is the intercept
};

// ---------------------------------------------------------------- protocol

struct SplitResult {
  std::vector<std::size_t> adaptation;  // ascending record indices
  std::vector<std::size_t> test;
};

// Uniform random subset without replacement of round(fraction * n) records.
SplitResult split_sparse(std::size_t n, double fraction, std::uint64_t seed);

// log1p, then per-gene standardization with adaptation-subset statistics.
// Top-K genes by adaptation-subset mean raw count, ties to the lower index.
GeneStats fit_gene_stats(const SlideDataset& ds, std::span<const std::size_t> adaptation, std::size_t top_k);
inline constexpr double kStdFloor = 1e-6;

// Copy of `ds` restricted to `ids`, genes normalized with `stats`.
SlideDataset preprocess_genes(const SlideDataset& ds, std::span<const std::size_t> ids, const GeneStats& stats);

SlideDataset subset(const SlideDataset& ds, std::span<const std::size_t> ids);

// Training view of a dataset (patches and, if present, its genes).
TrainData to_train_data(const SlideDataset& ds);

// ---------------------------------------------------------------- fidelity

struct EmbeddingReport {
  double mean = 0;
  double std = 0;
  std::vector<double> similarities;  // per synthetic sample
  std::vector<std::size_t> nearest;  // index of the nearest real sample
  std::uint64_t projection_seed = 0;
  io::json to_json() const;
};

inline constexpr std::size_t kEmbeddingDim = 64;

// Fixed seeded Gaussian projection of 2x2-average-pooled, flattened patches.
class PatchEmbedder {
 public:
  PatchEmbedder(const Shape& patch_shape, std::uint64_t seed, std::size_t dim = kEmbeddingDim);
  std::vector<double> embed(std::span<const float> patch) const;
  std::size_t input_dim() const { return input_dim_; }

 private:
  Shape patch_shape_;
  std::size_t dim_, input_dim_;
  std::vector<double> proj_;  // [dim, input_dim]
};

EmbeddingReport embedding_similarity(const std::vector<std::vector<float>>& real,
                                     const std::vector<std::vector<float>>& synthetic, const Shape& patch_shape,
                                     std::uint64_t seed);

// Cosine similarity; 0 when either vector is zero.
double cosine(std::span<const double> a, std::span<const double> b);

}  // namespace c2l
