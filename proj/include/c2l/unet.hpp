#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "c2l/io.hpp"
#include "c2l/param_file.hpp"
#include "c2l/rng.hpp"
#include "c2l/tensor.hpp"

namespace c2l {

enum class Partition { Untagged, Backbone, Adapter };
const char* to_string(Partition p);
Partition partition_from_string(const std::string& s);

template <typename T>
struct Parameter {
  std::string name;
  Partition partition = Partition::Untagged;
  BasicTensor<T> tensor;
};

// Ordered parameter registry. Order is stable and defines checkpoint layout.
template <typename T>
class ParameterStore {
 public:
  BasicTensor<T>& add(const std::string& name, Partition partition, Shape shape, std::vector<T> values);
  std::vector<Parameter<T>>& items() { return items_; }
  const std::vector<Parameter<T>>& items() const { return items_; }
  std::size_t count() const;  // total scalar count

  std::vector<ParamEntry> to_entries() const;
  // Loads values by name; every stored parameter must be present.
  void load_entries(const std::vector<ParamEntry>& entries);

 private:
  std::vector<Parameter<T>> items_;
};

struct EpsNetConfig {
  int image_size = 16;
  int in_channels = 3;
  int base_channels = 16;
  std::vector<int> channel_mults{1, 2, 4};
  int res_blocks = 1;
  int norm_groups = 8;
  int time_embed_dim = 32;  // sinusoid width; the MLP widens to 4 * base
  double norm_eps = 1e-5;
  // Residual blocks receiving FiLM. Empty selects every block at the two
  // coarsest resolutions.
  std::vector<std::string> film_blocks;

  void validate() const;
  io::json to_json() const;
  static EpsNetConfig from_json(const io::json& j);
};

struct FilmTarget {
  std::string block;
  int channels = 0;
};

// Per-target (gamma, beta), each [N, C], aligned with EpsNet::film_targets().
template <typename T>
struct FilmModulation {
  std::vector<BasicTensor<T>> gamma;
  std::vector<BasicTensor<T>> beta;
};

// Attention-free residual U-Net predicting the added noise.
template <typename T>
class EpsNet {
 public:
  EpsNet(EpsNetConfig cfg, std::uint64_t seed);

  const EpsNetConfig& config() const { return cfg_; }
  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }
  const std::vector<FilmTarget>& film_targets() const { return film_targets_; }

  // xt: [N, C, S, S]; one timestep per sample. `film` may be null, which is
  // the unconditional pathway.
  BasicTensor<T> forward(const BasicTensor<T>& xt, std::span<const int> timesteps,
                         const FilmModulation<T>* film = nullptr) const;

 private:
  struct ResBlock {
    std::string name;
    int in_ch = 0, out_ch = 0;
    int film_index = -1;
    BasicTensor<T> norm1_w, norm1_b, conv1_w, conv1_b, temb_w, temb_b;
    BasicTensor<T> norm2_w, norm2_b, conv2_w, conv2_b;
    std::optional<BasicTensor<T>> skip_w, skip_b;
  };

  ResBlock make_block(const std::string& name, int in_ch, int out_ch, Rng& rng);
  BasicTensor<T> run_block(const ResBlock& b, const BasicTensor<T>& x, const BasicTensor<T>& temb,
                           const FilmModulation<T>* film) const;
  BasicTensor<T> norm_affine(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) const;

  EpsNetConfig cfg_;
  ParameterStore<T> store_;
  std::vector<FilmTarget> film_targets_;
  int temb_dim_ = 0;

  BasicTensor<T> time_w1_, time_b1_, time_w2_, time_b2_;
  BasicTensor<T> conv_in_w_, conv_in_b_;
  std::vector<ResBlock> down_blocks_;
  std::vector<BasicTensor<T>> down_w_, down_b_;  // stride-2 convs between levels
  ResBlock mid_;
  std::vector<ResBlock> up_blocks_;
  BasicTensor<T> out_norm_w_, out_norm_b_, out_conv_w_, out_conv_b_;
};

struct AdapterConfig {
  int gene_dim = 32;
  int embed_dim = 32;

  io::json to_json() const;
  static AdapterConfig from_json(const io::json& j);
};

// Gene-conditioned modulation: a one-layer projection G -> e = SiLU(W G + b)
// followed by bias-free heads e -> (1 + dgamma, beta) per target block. Heads
// start at zero, so a fresh adapter is the identity. The null condition is the
// all-zero embedding.
template <typename T>
class FilmAdapter {
 public:
  FilmAdapter(AdapterConfig cfg, std::vector<FilmTarget> targets, std::uint64_t seed);

  const AdapterConfig& config() const { return cfg_; }
  const std::vector<FilmTarget>& targets() const { return targets_; }
  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }

  // genes: [N, d]; keep[n] == 0 replaces sample n by the null embedding.
  BasicTensor<T> embed(const BasicTensor<T>& genes, std::span<const T> keep) const;
  FilmModulation<T> modulation(const BasicTensor<T>& embedding) const;

 private:
  AdapterConfig cfg_;
  std::vector<FilmTarget> targets_;
  ParameterStore<T> store_;
  BasicTensor<T> proj_w_, proj_b_;
  std::vector<BasicTensor<T>> gamma_w_, beta_w_;
};

// Network output with optional gene conditioning. cond == null (or no
// adapter) is the unconditional central model; keep may be empty (all kept).
template <typename T>
BasicTensor<T> eps_forward(const EpsNet<T>& net, const FilmAdapter<T>* adapter, const BasicTensor<T>& xt,
                           std::span<const int> timesteps, const BasicTensor<T>* cond,
                           std::span<const T> keep = {});

template <typename T>
struct PartitionedParams {
  std::vector<Parameter<T>*> backbone;
  std::vector<Parameter<T>*> adapter;
  std::size_t backbone_count = 0;  // scalars
  std::size_t adapter_count = 0;
};

// Disjoint, exhaustive split by partition tag; untagged or misplaced
// parameters are an integrity error.
template <typename T>
PartitionedParams<T> partition_parameters(EpsNet<T>& net, FilmAdapter<T>* adapter);

// SHA-256 over the raw bytes of every backbone parameter, in order.
template <typename T>
std::string backbone_checksum(const EpsNet<T>& net);

// Small MLP epsilon model for low-dimensional data (sanity diffusions).
template <typename T>
class MlpEpsNet {
 public:
  MlpEpsNet(int data_dim, int hidden, int time_embed_dim, std::uint64_t seed);
  ParameterStore<T>& parameters() { return store_; }
  // xt: [N, data_dim]
  BasicTensor<T> forward(const BasicTensor<T>& xt, std::span<const int> timesteps) const;

 private:
  int time_embed_dim_;
  ParameterStore<T> store_;
  BasicTensor<T> te_w_, te_b_, in_w_, in_b_, t1_w_, h_w_, h_b_, t2_w_, out_w_, out_b_;
};

}  // namespace c2l
