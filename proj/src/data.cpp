#include "c2l/data.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "c2l/error.hpp"
#include "c2l/rng.hpp"

namespace c2l {

namespace fs = std::filesystem;

const char* to_string(GenesKind k) { return k == GenesKind::Normalized ? "normalized" : "raw_counts"; }

GenesKind genes_kind_from_string(const std::string& s) {
  if (s == "normalized") return GenesKind::Normalized;
  if (s == "raw_counts") return GenesKind::RawCounts;
  fail(ErrorKind::Io, "unknown genes kind '" + s + "'");
}

// ---------------------------------------------------------------- stats

std::vector<float> GeneStats::apply(std::span<const float> raw) const {
  std::vector<float> out(selected.size());
  for (std::size_t k = 0; k < selected.size(); ++k) {
    require(selected[k] < raw.size(), ErrorKind::Dimension, "gene profile shorter than the selected gene set");
    out[k] = static_cast<float>((std::log1p(static_cast<double>(raw[selected[k]])) - mean[k]) / std[k]);
  }
  return out;
}

io::json GeneStats::to_json() const {
  return {{"selected", selected}, {"log1p_mean", mean}, {"log1p_std", std}, {"floored", floored}, {"fitted_on", fitted_on}};
}

GeneStats GeneStats::from_json(const io::json& j) {
  GeneStats s;
  if (j.is_null() || j.empty()) return s;
  s.selected = j.at("selected").get<std::vector<std::size_t>>();
  s.mean = j.at("log1p_mean").get<std::vector<double>>();
  s.std = j.at("log1p_std").get<std::vector<double>>();
  s.floored = j.value("floored", std::vector<std::size_t>{});
  s.fitted_on = j.value("fitted_on", std::vector<std::string>{});
  require(s.mean.size() == s.selected.size() && s.std.size() == s.selected.size(), ErrorKind::Io,
          "inconsistent preprocessing statistics");
  return s;
}

// ---------------------------------------------------------------- dataset

void SlideDataset::validate() const {
  require(patch_shape.size() == 3, ErrorKind::Dimension, "patch shape must be [C, S, S]");
  const std::size_t P = patch_numel(), d = gene_dim();
  std::unordered_set<std::string> ids;
  for (const auto& s : spots) {
    require(ids.insert(s.spot_id).second, ErrorKind::Integrity, "duplicate spot id " + s.spot_id);
    require(s.patch.size() == P, ErrorKind::Dimension, "spot " + s.spot_id + " has a patch of the wrong size");
    require(s.genes.size() == d, ErrorKind::Dimension, "spot " + s.spot_id + " has " +
                                                           std::to_string(s.genes.size()) + " genes, expected " +
                                                           std::to_string(d));
  }
}

std::size_t SlideDataset::index_of(const std::string& spot_id) const {
  for (std::size_t i = 0; i < spots.size(); ++i)
    if (spots[i].spot_id == spot_id) return i;
  fail(ErrorKind::Contract, "no spot named " + spot_id + " in " + slide_id);
}

fs::path dataset_header_path(const fs::path& stem) { return fs::path(stem.string() + ".json"); }
fs::path dataset_records_path(const fs::path& stem) { return fs::path(stem.string() + ".bin"); }
fs::path dataset_index_path(const fs::path& stem) { return fs::path(stem.string() + ".index.csv"); }

void write_dataset(const fs::path& stem, const SlideDataset& ds) {
  ds.validate();
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  const std::size_t P = ds.patch_numel(), d = ds.gene_dim();
  {
    auto out = io::open_out(dataset_records_path(stem));
    for (const auto& s : ds.spots) {
      io::write_f32(out, s.patch);
      io::write_f32(out, s.genes);
    }
  }
  {
    std::ostringstream csv;
    csv << "spot_id,row,col,cluster,source_spot\n";
    for (const auto& s : ds.spots) {
      require(s.spot_id.find_first_of(",\n") == std::string::npos &&
                  s.source_spot.find_first_of(",\n") == std::string::npos,
              ErrorKind::Contract, "spot ids may not contain commas or newlines");
      csv << s.spot_id << ',' << s.row << ',' << s.col << ',' << s.cluster << ',' << s.source_spot << '\n';
    }
    io::write_text(dataset_index_path(stem), csv.str());
  }
  io::json header = {{"format", "c2l-dataset"},
                     {"version", 1},
                     {"slide_id", ds.slide_id},
                     {"n", ds.size()},
                     {"d", d},
                     {"patch_shape", ds.patch_shape},
                     {"gene_names", ds.gene_names},
                     {"genes_kind", to_string(ds.genes_kind)},
                     {"source", ds.source},
                     {"dtype", "float32"},
                     {"byte_order", "little"},
                     {"record_floats", P + d},
                     {"record_bytes", (P + d) * sizeof(float)},
                     {"preprocessing", ds.stats.empty() ? io::json(nullptr) : ds.stats.to_json()},
                     {"records_sha256", io::sha256_file(dataset_records_path(stem))},
                     {"meta", ds.meta}};
  io::write_json(dataset_header_path(stem), header);
}

SlideDataset read_dataset(const fs::path& stem) {
  io::require_exists(dataset_header_path(stem), "dataset header");
  io::require_exists(dataset_records_path(stem), "dataset records");
  io::require_exists(dataset_index_path(stem), "dataset index");
  const io::json h = io::read_json(dataset_header_path(stem));
  require(h.value("format", "") == "c2l-dataset", ErrorKind::Io,
          dataset_header_path(stem).string() + " is not a dataset header");
  SlideDataset ds;
  ds.slide_id = h.at("slide_id").get<std::string>();
  ds.patch_shape = h.at("patch_shape").get<Shape>();
  ds.gene_names = h.at("gene_names").get<std::vector<std::string>>();
  ds.genes_kind = genes_kind_from_string(h.at("genes_kind").get<std::string>());
  ds.source = h.value("source", "real");
  ds.stats = GeneStats::from_json(h.value("preprocessing", io::json(nullptr)));
  ds.meta = h.value("meta", io::json::object());
  const auto n = h.at("n").get<std::size_t>();
  const std::size_t P = ds.patch_numel(), d = ds.gene_dim();
  require(h.at("record_floats").get<std::size_t>() == P + d, ErrorKind::Io, "dataset record stride mismatch");
  require(fs::file_size(dataset_records_path(stem)) == n * (P + d) * sizeof(float), ErrorKind::Io,
          "dataset record file has the wrong size");

  std::istringstream csv(io::read_text(dataset_index_path(stem)));
  std::string line;
  std::getline(csv, line);
  require(line == "spot_id,row,col,cluster,source_spot", ErrorKind::Io, "unexpected dataset index header");
  auto in = io::open_in(dataset_records_path(stem));
  ds.spots.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    require(static_cast<bool>(std::getline(csv, line)), ErrorKind::Io, "dataset index has fewer rows than records");
    SpotRecord r;
    std::istringstream row(line);
    std::string field;
    std::getline(row, r.spot_id, ',');
    std::getline(row, field, ',');
    r.row = std::stoi(field);
    std::getline(row, field, ',');
    r.col = std::stoi(field);
    std::getline(row, field, ',');
    r.cluster = std::stoi(field);
    std::getline(row, r.source_spot);
    r.patch = io::read_f32(in, P);
    r.genes = io::read_f32(in, d);
    ds.spots.push_back(std::move(r));
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------- toy slide

void ToySlideSpec::validate() const {
  require(n_spots > 0, ErrorKind::Config, "n_spots must be positive");
  require(latent_dim >= 1, ErrorKind::Config, "latent_dim must be positive");
  require(d_genes >= latent_dim, ErrorKind::Config, "d_genes must be at least latent_dim");
  require(patch_size >= 4 && patch_size % 2 == 0, ErrorKind::Config, "patch_size must be even and >= 4");
  require(cluster_spread >= 0 && gene_noise >= 0, ErrorKind::Config, "noise levels must be >= 0");
}

io::json ToySlideSpec::to_json() const {
  return {{"slide_id", slide_id},         {"seed", seed},
          {"mapping_seed", mapping_seed}, {"n_spots", n_spots},
          {"d_genes", d_genes},           {"latent_dim", latent_dim},
          {"patch_size", patch_size},     {"cluster_spread", cluster_spread},
          {"gene_noise", gene_noise}};
}

ToySlideSpec ToySlideSpec::from_json(const io::json& j) {
  ToySlideSpec s;
  s.slide_id = j.value("slide_id", s.slide_id);
  s.seed = j.value("seed", s.seed);
  s.mapping_seed = j.value("mapping_seed", s.mapping_seed);
  s.n_spots = j.value("n_spots", s.n_spots);
  s.d_genes = j.value("d_genes", s.d_genes);
  s.latent_dim = j.value("latent_dim", s.latent_dim);
  s.patch_size = j.value("patch_size", s.patch_size);
  s.cluster_spread = j.value("cluster_spread", s.cluster_spread);
  s.gene_noise = j.value("gene_noise", s.gene_noise);
  return s;
}

ToyMapping make_toy_mapping(const ToySlideSpec& spec) {
  spec.validate();
  const int L = spec.latent_dim;
  Rng rng(derive_seed(spec.mapping_seed, 0x70E));
  ToyMapping m;
  m.latent_dim = L;
  // Density, orientation, hue, background. Any two clusters differ in at
  // least two of the last three.
  static const double kCenters[kToyClusters][4] = {
      {1.2, 1.0, 1.0, 1.0}, {2.2, 1.0, -1.0, -1.0}, {1.2, -1.0, 1.0, -1.0}, {2.2, -1.0, -1.0, 1.0}};
  m.centers.assign(kToyClusters, std::vector<double>(static_cast<std::size_t>(L)));
  for (int k = 0; k < kToyClusters; ++k)
    for (int l = 0; l < L; ++l) m.centers[k][l] = l < 4 ? kCenters[k][l] : rng.normal();
  m.readout.assign(static_cast<std::size_t>(spec.d_genes), std::vector<double>(static_cast<std::size_t>(L)));
  m.baseline.resize(static_cast<std::size_t>(spec.d_genes));
  for (int g = 0; g < spec.d_genes; ++g) {
    m.baseline[g] = rng.uniform(0.5, 2.5);
    for (int l = 0; l < L; ++l) m.readout[g][l] = 0.6 * rng.normal();
  }
  return m;
}

std::vector<float> render_patch(std::span<const double> latent, int patch_size, std::uint64_t placement_seed) {
  double z[4] = {0, 0, 0, 0};
  for (std::size_t l = 0; l < std::min<std::size_t>(4, latent.size()); ++l) z[l] = latent[l];
  constexpr int kBlobs = 8;
  Rng rng(placement_seed);
  double cx[kBlobs], cy[kBlobs], mass[kBlobs];
  for (int j = 0; j < kBlobs; ++j) {
    cx[j] = rng.uniform(0.15, 0.85);
    cy[j] = rng.uniform(0.15, 0.85);
    mass[j] = std::clamp(z[0] - 0.3 * j, 0.0, 1.0);
  }
  const double theta = 0.9 * std::tanh(z[1]);
  const double ct = std::cos(theta), st = std::sin(theta);
  const double h = std::tanh(z[2]);
  const double bg = 0.4 + 0.35 * std::tanh(z[3]);
  const double bg_color[3] = {bg + 0.1, bg - 0.15, bg + 0.05};
  const double blob_color[3] = {-0.15 - 0.45 * h, -0.7 + 0.05 * h, 0.1 + 0.35 * h};
  constexpr double sa = 0.16, sb = 0.07;

  const std::size_t S = static_cast<std::size_t>(patch_size);
  std::vector<float> out(3 * S * S);
  for (std::size_t i = 0; i < S; ++i) {
    for (std::size_t j = 0; j < S; ++j) {
      const double y = (i + 0.5) / S, x = (j + 0.5) / S;
      double w = 0;
      for (int b = 0; b < kBlobs; ++b) {
        if (mass[b] == 0) continue;
        const double dx = x - cx[b], dy = y - cy[b];
        const double u = dx * ct + dy * st, v = -dx * st + dy * ct;
        w += mass[b] * std::exp(-0.5 * (u * u / (sa * sa) + v * v / (sb * sb)));
      }
      w = std::min(1.0, w);
      for (std::size_t c = 0; c < 3; ++c)
        out[(c * S + i) * S + j] = static_cast<float>((1 - w) * bg_color[c] + w * blob_color[c]);
    }
  }
  return out;
}

std::vector<double> expected_counts(const ToyMapping& m, std::span<const double> latent) {
  require(latent.size() == static_cast<std::size_t>(m.latent_dim), ErrorKind::Dimension, "latent size mismatch");
  std::vector<double> out(m.baseline.size());
  for (std::size_t g = 0; g < out.size(); ++g) {
    double r = m.baseline[g];
    for (std::size_t l = 0; l < latent.size(); ++l) r += m.readout[g][l] * latent[l];
    out[g] = std::exp(r);
  }
  return out;
}

SlideDataset generate_toy_slide(const ToySlideSpec& spec) {
  spec.validate();
  const ToyMapping m = make_toy_mapping(spec);
  const std::size_t L = static_cast<std::size_t>(spec.latent_dim), d = static_cast<std::size_t>(spec.d_genes);
  SlideDataset ds;
  ds.slide_id = spec.slide_id;
  ds.patch_shape = {3, static_cast<std::size_t>(spec.patch_size), static_cast<std::size_t>(spec.patch_size)};
  for (std::size_t g = 0; g < d; ++g) {
    std::ostringstream name;
    name << "G" << (g + 1 < 10 ? "0" : "") << g + 1;
    ds.gene_names.push_back(name.str());
  }
  ds.meta = {{"toy_spec", spec.to_json()}};
  const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(spec.n_spots))));
  Rng rng(spec.seed);
  for (int i = 0; i < spec.n_spots; ++i) {
    SpotRecord r;
    std::ostringstream id;
    id << spec.slide_id << "-" << i;
    r.spot_id = id.str();
    r.row = i / cols;
    r.col = i % cols;
    r.cluster = static_cast<int>(rng.below(kToyClusters));
    std::vector<double> z(L);
    for (std::size_t l = 0; l < L; ++l) z[l] = m.centers[r.cluster][l] + spec.cluster_spread * rng.normal();
    const auto mu = expected_counts(m, z);
    r.genes.resize(d);
    for (std::size_t g = 0; g < d; ++g)
      r.genes[g] = static_cast<float>(std::round(mu[g] * std::exp(spec.gene_noise * rng.normal())));
    r.patch = render_patch(z, spec.patch_size, rng.next_u64());
    ds.spots.push_back(std::move(r));
  }
  return ds;
}

// ---------------------------------------------------------------- oracle

std::vector<double> OracleDecoder::patch_features(std::span<const float> patch, int patch_size) {
  const std::size_t S = static_cast<std::size_t>(patch_size), A = S * S;
  require(patch.size() == 3 * A, ErrorKind::Dimension, "patch size does not match the decoder");
  std::vector<double> gray(A);
  for (std::size_t p = 0; p < A; ++p) gray[p] = (patch[p] + patch[A + p] + patch[2 * A + p]) / 3.0;
  std::vector<std::size_t> order(A);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return gray[a] < gray[b]; });
  const std::size_t q = std::max<std::size_t>(1, A / 4);

  std::vector<double> f;
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0, sq = 0;
    for (std::size_t p = 0; p < A; ++p) {
      mean += patch[c * A + p];
      sq += patch[c * A + p] * patch[c * A + p];
    }
    mean /= A;
    f.push_back(mean);
    f.push_back(std::sqrt(std::max(0.0, sq / A - mean * mean)));
  }
  for (std::size_t c = 0; c < 3; ++c) {
    double dark = 0, bright = 0;
    for (std::size_t k = 0; k < q; ++k) {
      dark += patch[c * A + order[k]];
      bright += patch[c * A + order[A - 1 - k]];
    }
    f.push_back(bright / q);
    f.push_back((dark - bright) / q);
  }
  double jxx = 0, jyy = 0, jxy = 0;
  for (std::size_t i = 1; i + 1 < S; ++i) {
    for (std::size_t j = 1; j + 1 < S; ++j) {
      const double gx = 0.5 * (gray[i * S + j + 1] - gray[i * S + j - 1]);
      const double gy = 0.5 * (gray[(i + 1) * S + j] - gray[(i - 1) * S + j]);
      jxx += gx * gx;
      jyy += gy * gy;
      jxy += gx * gy;
    }
  }
  const double energy = jxx + jyy + 1e-9;
  f.push_back((jxx - jyy) / energy);
  f.push_back(2 * jxy / energy);
  f.push_back(std::sqrt(energy / A));
  return f;
}

OracleDecoder::OracleDecoder(const ToySlideSpec& spec, std::size_t calibration)
    : mapping_(make_toy_mapping(spec)), patch_size_(spec.patch_size) {
  const std::size_t L = static_cast<std::size_t>(mapping_.latent_dim), d = mapping_.baseline.size();
  Eigen::MatrixXd A(d, L);
  for (std::size_t g = 0; g < d; ++g)
    for (std::size_t l = 0; l < L; ++l) A(g, l) = mapping_.readout[g][l];
  const Eigen::MatrixXd pinv = (A.transpose() * A).ldlt().solve(A.transpose());
  counts_pinv_.assign(L, std::vector<double>(d));
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t g = 0; g < d; ++g) counts_pinv_[l][g] = pinv(l, g);

  // Calibration patches drawn around the cluster centers with twice the
  // default spread, from a stream unrelated to any slide seed.
  Rng rng(derive_seed(spec.mapping_seed, 0xCA1B));
  const std::size_t F = patch_features(render_patch(std::vector<double>(L, 0.0), patch_size_, 0), patch_size_).size();
  Eigen::MatrixXd X(calibration, F + 1), Z(calibration, L);
  for (std::size_t n = 0; n < calibration; ++n) {
    const auto k = rng.below(kToyClusters);
    std::vector<double> z(L);
    for (std::size_t l = 0; l < L; ++l) z[l] = mapping_.centers[k][l] + 0.7 * rng.normal();
    const auto f = patch_features(render_patch(z, patch_size_, rng.next_u64()), patch_size_);
    for (std::size_t i = 0; i < F; ++i) X(n, i) = f[i];
    X(n, F) = 1.0;
    for (std::size_t l = 0; l < L; ++l) Z(n, l) = z[l];
  }
  Eigen::MatrixXd G = X.transpose() * X;
  G.diagonal().array() += 1e-6 * calibration;
  const Eigen::MatrixXd W = G.ldlt().solve(X.transpose() * Z);  // [F+1, L]
  feature_map_.assign(L, std::vector<double>(F + 1));
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t i = 0; i <= F; ++i) feature_map_[l][i] = W(i, l);
}

std::vector<double> OracleDecoder::latent_from_counts(std::span<const float> counts) const {
  const std::size_t d = mapping_.baseline.size();
  require(counts.size() == d, ErrorKind::Dimension, "count vector length mismatch");
  std::vector<double> y(d);
  for (std::size_t g = 0; g < d; ++g) y[g] = std::log(static_cast<double>(counts[g]) + 0.5) - mapping_.baseline[g];
  std::vector<double> z(counts_pinv_.size(), 0.0);
  for (std::size_t l = 0; l < z.size(); ++l)
    for (std::size_t g = 0; g < d; ++g) z[l] += counts_pinv_[l][g] * y[g];
  return z;
}

std::vector<double> OracleDecoder::latent_from_patch(std::span<const float> patch) const {
  const auto f = patch_features(patch, patch_size_);
  std::vector<double> z(feature_map_.size(), 0.0);
  for (std::size_t l = 0; l < z.size(); ++l) {
    z[l] = feature_map_[l].back();
    for (std::size_t i = 0; i < f.size(); ++i) z[l] += feature_map_[l][i] * f[i];
  }
  return z;
}

int OracleDecoder::nearest_cluster(std::span<const double> latent) const {
  // Patches only express the first four coordinates, so only those vote.
  const std::size_t dims = std::min<std::size_t>(4, latent.size());
  int best = 0;
  double best_d = INFINITY;
  for (int k = 0; k < kToyClusters; ++k) {
    double dist = 0;
    for (std::size_t l = 0; l < dims; ++l) dist += std::pow(latent[l] - mapping_.centers[k][l], 2);
    if (dist < best_d) {
      best_d = dist;
      best = k;
    }
  }
  return best;
}

std::vector<double> OracleDecoder::log_genes_from_patch(std::span<const float> patch) const {
  auto mu = expected_counts(mapping_, latent_from_patch(patch));
  for (auto& v : mu) v = std::log1p(v);
  return mu;
}

// ---------------------------------------------------------------- protocol

SplitResult split_sparse(std::size_t n, double fraction, std::uint64_t seed) {
  require(fraction > 0 && fraction < 1, ErrorKind::Config, "fraction must be in (0, 1)");
  const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  require(count > 0, ErrorKind::Config, "fraction " + std::to_string(fraction) + " of " + std::to_string(n) +
                                            " spots selects no adaptation spots");
  require(count < n, ErrorKind::Config, "fraction leaves no test spots");
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) std::swap(ids[i], ids[i + rng.below(n - i)]);
  SplitResult r;
  r.adaptation.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(count));
  r.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(count), ids.end());
  std::sort(r.adaptation.begin(), r.adaptation.end());
  std::sort(r.test.begin(), r.test.end());
  return r;
}

GeneStats fit_gene_stats(const SlideDataset& ds, std::span<const std::size_t> adaptation, std::size_t top_k) {
  require(!adaptation.empty(), ErrorKind::Contract, "gene statistics need at least one adaptation spot");
  require(ds.genes_kind == GenesKind::RawCounts, ErrorKind::Contract, "gene statistics are fitted on raw counts");
  const std::size_t d = ds.gene_dim(), n = adaptation.size();
  require(top_k >= 1 && top_k <= d, ErrorKind::Config, "top_k must be in [1, d]");
  std::vector<double> raw_mean(d, 0.0);
  for (auto i : adaptation) {
    require(i < ds.size(), ErrorKind::Contract, "adaptation index out of range");
    for (std::size_t g = 0; g < d; ++g) raw_mean[g] += ds.spots[i].genes[g];
  }
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return raw_mean[a] > raw_mean[b]; });
  GeneStats s;
  s.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top_k));
  std::sort(s.selected.begin(), s.selected.end());
  for (auto g : s.selected) {
    std::vector<double> v;
    v.reserve(n);
    for (auto i : adaptation) v.push_back(std::log1p(static_cast<double>(ds.spots[i].genes[g])));
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    // A constant gene keeps its exact value as mean so it normalizes to 0.
    const double mean = *lo == *hi ? *lo : std::accumulate(v.begin(), v.end(), 0.0) / n;
    double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    double sd = std::sqrt(ss / n);
    if (sd < kStdFloor) {
      sd = kStdFloor;
      s.floored.push_back(g);
    }
    s.mean.push_back(mean);
    s.std.push_back(sd);
  }
  for (auto i : adaptation) s.fitted_on.push_back(ds.spots[i].spot_id);
  return s;
}

SlideDataset subset(const SlideDataset& ds, std::span<const std::size_t> ids) {
  SlideDataset out = ds;
  out.spots.clear();
  for (auto i : ids) {
    require(i < ds.size(), ErrorKind::Contract, "record index out of range");
    out.spots.push_back(ds.spots[i]);
  }
  return out;
}

SlideDataset preprocess_genes(const SlideDataset& ds, std::span<const std::size_t> ids, const GeneStats& stats) {
  require(ds.genes_kind == GenesKind::RawCounts, ErrorKind::Contract, "genes are already preprocessed");
  require(!stats.empty(), ErrorKind::Contract, "preprocessing needs fitted statistics");
  SlideDataset out = subset(ds, ids);
  out.genes_kind = GenesKind::Normalized;
  out.stats = stats;
  out.gene_names.clear();
  for (auto g : stats.selected) out.gene_names.push_back(ds.gene_names.at(g));
  for (auto& s : out.spots) s.genes = stats.apply(s.genes);
  return out;
}

TrainData to_train_data(const SlideDataset& ds) {
  ds.validate();
  TrainData t;
  t.image_shape = ds.patch_shape;
  t.count = ds.size();
  t.images.reserve(t.count * ds.patch_numel());
  for (const auto& s : ds.spots) t.images.insert(t.images.end(), s.patch.begin(), s.patch.end());
  if (ds.genes_kind == GenesKind::Normalized) {
    t.gene_dim = ds.gene_dim();
    for (const auto& s : ds.spots) t.genes.insert(t.genes.end(), s.genes.begin(), s.genes.end());
  }
  return t;
}

// ---------------------------------------------------------------- fidelity

io::json EmbeddingReport::to_json() const {
  return {{"mean_cosine", mean}, {"std_cosine", std}, {"projection_seed", projection_seed},
          {"count", similarities.size()}, {"similarities", similarities}};
}

PatchEmbedder::PatchEmbedder(const Shape& patch_shape, std::uint64_t seed, std::size_t dim)
    : patch_shape_(patch_shape), dim_(dim) {
  require(patch_shape.size() == 3 && patch_shape[1] % 2 == 0 && patch_shape[2] % 2 == 0, ErrorKind::Dimension,
          "embedding expects [C, S, S] patches with even S");
  input_dim_ = patch_shape[0] * (patch_shape[1] / 2) * (patch_shape[2] / 2);
  Rng rng(seed);
  proj_.resize(dim_ * input_dim_);
  const double s = 1.0 / std::sqrt(static_cast<double>(input_dim_));
  for (auto& v : proj_) v = s * rng.normal();
}

std::vector<double> PatchEmbedder::embed(std::span<const float> patch) const {
  const std::size_t C = patch_shape_[0], H = patch_shape_[1], W = patch_shape_[2];
  require(patch.size() == C * H * W, ErrorKind::Dimension, "patch size does not match the embedder");
  std::vector<double> pooled(input_dim_);
  std::size_t k = 0;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H; i += 2)
      for (std::size_t j = 0; j < W; j += 2, ++k)
        pooled[k] = 0.25 * (patch[(c * H + i) * W + j] + patch[(c * H + i) * W + j + 1] +
                            patch[(c * H + i + 1) * W + j] + patch[(c * H + i + 1) * W + j + 1]);
  std::vector<double> out(dim_, 0.0);
  for (std::size_t r = 0; r < dim_; ++r)
    for (std::size_t i = 0; i < input_dim_; ++i) out[r] += proj_[r * input_dim_ + i] * pooled[i];
  return out;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorKind::Dimension, "cosine: size mismatch");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0 || bb == 0) return 0.0;
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

EmbeddingReport embedding_similarity(const std::vector<std::vector<float>>& real,
                                     const std::vector<std::vector<float>>& synthetic, const Shape& patch_shape,
                                     std::uint64_t seed) {
  require(!real.empty() && !synthetic.empty(), ErrorKind::Contract, "embedding similarity needs both sets non-empty");
  const PatchEmbedder emb(patch_shape, seed);
  std::vector<std::vector<double>> re;
  re.reserve(real.size());
  for (const auto& p : real) re.push_back(emb.embed(p));
  EmbeddingReport rep;
  rep.projection_seed = seed;
  for (const auto& p : synthetic) {
    const auto e = emb.embed(p);
    double best = -2;
    std::size_t arg = 0;
    for (std::size_t i = 0; i < re.size(); ++i) {
      const double c = cosine(e, re[i]);
      if (c > best) {
        best = c;
        arg = i;
      }
    }
    rep.similarities.push_back(best);
    rep.nearest.push_back(arg);
  }
  const double n = static_cast<double>(rep.similarities.size());
  rep.mean = std::accumulate(rep.similarities.begin(), rep.similarities.end(), 0.0) / n;
  double var = 0;
  for (double s : rep.similarities) var += (s - rep.mean) * (s - rep.mean);
  rep.std = std::sqrt(var / n);
  return rep;
}

}  // namespace c2l
