#include "c2l/unet.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "c2l/ops.hpp"

namespace c2l {

const char* to_string(Partition p) {
  switch (p) {
    case Partition::Backbone: return "backbone";
    case Partition::Adapter: return "adapter";
    case Partition::Untagged: break;
  }
  return "";
}

Partition partition_from_string(const std::string& s) {
  if (s == "backbone") return Partition::Backbone;
  if (s == "adapter") return Partition::Adapter;
  return Partition::Untagged;
}

// ---------------------------------------------------------------- store

template <typename T>
BasicTensor<T>& ParameterStore<T>::add(const std::string& name, Partition partition, Shape shape,
                                       std::vector<T> values) {
  for (const auto& p : items_) {
    require(p.name != name, ErrorKind::Integrity, "duplicate parameter name " + name);
  }
  items_.push_back({name, partition, BasicTensor<T>(std::move(shape), std::move(values), true)});
  return items_.back().tensor;
}

template <typename T>
std::size_t ParameterStore<T>::count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.tensor.numel();
  return n;
}

template <typename T>
std::vector<ParamEntry> ParameterStore<T>::to_entries() const {
  std::vector<ParamEntry> out;
  out.reserve(items_.size());
  for (const auto& p : items_) {
    auto v = p.tensor.values();
    out.push_back({p.name, p.tensor.shape(), to_string(p.partition), std::vector<float>(v.begin(), v.end())});
  }
  return out;
}

template <typename T>
void ParameterStore<T>::load_entries(const std::vector<ParamEntry>& entries) {
  std::unordered_map<std::string, const ParamEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  for (auto& p : items_) {
    auto it = by_name.find(p.name);
    require(it != by_name.end(), ErrorKind::Io, "checkpoint is missing parameter " + p.name);
    const ParamEntry& e = *it->second;
    require(e.shape == p.tensor.shape(), ErrorKind::Dimension,
            "parameter " + p.name + ": checkpoint shape " + shape_str(e.shape) + " vs model " +
                shape_str(p.tensor.shape()));
    if (!e.partition.empty()) {
      require(partition_from_string(e.partition) == p.partition, ErrorKind::Integrity,
              "parameter " + p.name + " stored under partition '" + e.partition + "'");
    }
    auto dst = p.tensor.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(e.values[i]);
  }
}

// ---------------------------------------------------------------- config

void EpsNetConfig::validate() const {
  require(image_size > 0 && in_channels > 0 && base_channels > 0 && res_blocks > 0, ErrorKind::Config,
          "network dimensions must be positive");
  require(!channel_mults.empty(), ErrorKind::Config, "channel_mults must not be empty");
  const int levels = static_cast<int>(channel_mults.size());
  require(image_size % (1 << (levels - 1)) == 0, ErrorKind::Config,
          "image size " + std::to_string(image_size) + " not divisible by 2^(levels-1)");
  require(time_embed_dim >= 2 && time_embed_dim % 2 == 0, ErrorKind::Config, "time_embed_dim must be even");
  require(norm_groups > 0, ErrorKind::Config, "norm_groups must be positive");
  for (int m : channel_mults) {
    require(m > 0, ErrorKind::Config, "channel multipliers must be positive");
    require((base_channels * m) % norm_groups == 0, ErrorKind::Config,
            "norm_groups must divide every channel width");
  }
}

io::json EpsNetConfig::to_json() const {
  return {{"image_size", image_size},         {"in_channels", in_channels}, {"base_channels", base_channels},
          {"channel_mults", channel_mults},   {"res_blocks", res_blocks},   {"norm_groups", norm_groups},
          {"time_embed_dim", time_embed_dim}, {"norm_eps", norm_eps},       {"film_blocks", film_blocks}};
}

EpsNetConfig EpsNetConfig::from_json(const io::json& j) {
  EpsNetConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.in_channels = j.value("in_channels", c.in_channels);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.channel_mults = j.value("channel_mults", c.channel_mults);
  c.res_blocks = j.value("res_blocks", c.res_blocks);
  c.norm_groups = j.value("norm_groups", c.norm_groups);
  c.time_embed_dim = j.value("time_embed_dim", c.time_embed_dim);
  c.norm_eps = j.value("norm_eps", c.norm_eps);
  c.film_blocks = j.value("film_blocks", c.film_blocks);
  return c;
}

io::json AdapterConfig::to_json() const { return {{"gene_dim", gene_dim}, {"embed_dim", embed_dim}}; }

AdapterConfig AdapterConfig::from_json(const io::json& j) {
  AdapterConfig c;
  c.gene_dim = j.value("gene_dim", c.gene_dim);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  return c;
}

// ---------------------------------------------------------------- init helpers

namespace {

template <typename T>
std::vector<T> uniform_init(Rng& rng, std::size_t n, double bound) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return v;
}

template <typename T>
BasicTensor<T> add_uniform(ParameterStore<T>& store, const std::string& name, Partition part, Shape shape,
                           std::size_t fan_in, Rng& rng) {
  const std::size_t n = shape_numel(shape);
  return store.add(name, part, std::move(shape), uniform_init<T>(rng, n, 1.0 / std::sqrt(static_cast<double>(fan_in))));
}

template <typename T>
BasicTensor<T> add_const(ParameterStore<T>& store, const std::string& name, Partition part, Shape shape, T value) {
  const std::size_t n = shape_numel(shape);
  return store.add(name, part, std::move(shape), std::vector<T>(n, value));
}

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

}  // namespace

// ---------------------------------------------------------------- EpsNet

template <typename T>
typename EpsNet<T>::ResBlock EpsNet<T>::make_block(const std::string& name, int in_ch, int out_ch, Rng& rng) {
  constexpr auto B = Partition::Backbone;
  ResBlock b;
  b.name = name;
  b.in_ch = in_ch;
  b.out_ch = out_ch;
  b.norm1_w = add_const<T>(store_, name + ".norm1.weight", B, {sz(in_ch)}, T(1));
  b.norm1_b = add_const<T>(store_, name + ".norm1.bias", B, {sz(in_ch)}, T(0));
  b.conv1_w = add_uniform<T>(store_, name + ".conv1.weight", B, {sz(out_ch), sz(in_ch), 3, 3}, sz(in_ch) * 9, rng);
  b.conv1_b = add_uniform<T>(store_, name + ".conv1.bias", B, {sz(out_ch)}, sz(in_ch) * 9, rng);
  b.temb_w = add_uniform<T>(store_, name + ".temb.weight", B, {sz(out_ch), sz(temb_dim_)}, sz(temb_dim_), rng);
  b.temb_b = add_uniform<T>(store_, name + ".temb.bias", B, {sz(out_ch)}, sz(temb_dim_), rng);
  b.norm2_w = add_const<T>(store_, name + ".norm2.weight", B, {sz(out_ch)}, T(1));
  b.norm2_b = add_const<T>(store_, name + ".norm2.bias", B, {sz(out_ch)}, T(0));
  b.conv2_w = add_uniform<T>(store_, name + ".conv2.weight", B, {sz(out_ch), sz(out_ch), 3, 3}, sz(out_ch) * 9, rng);
  b.conv2_b = add_uniform<T>(store_, name + ".conv2.bias", B, {sz(out_ch)}, sz(out_ch) * 9, rng);
  if (in_ch != out_ch) {
    b.skip_w = add_uniform<T>(store_, name + ".skip.weight", B, {sz(out_ch), sz(in_ch), 1, 1}, sz(in_ch), rng);
    b.skip_b = add_uniform<T>(store_, name + ".skip.bias", B, {sz(out_ch)}, sz(in_ch), rng);
  }
  return b;
}

template <typename T>
EpsNet<T>::EpsNet(EpsNetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  constexpr auto B = Partition::Backbone;
  Rng rng(seed);
  const int base = cfg_.base_channels;
  const int levels = static_cast<int>(cfg_.channel_mults.size());
  temb_dim_ = 4 * base;

  time_w1_ = add_uniform<T>(store_, "time.fc1.weight", B, {sz(temb_dim_), sz(cfg_.time_embed_dim)},
                            sz(cfg_.time_embed_dim), rng);
  time_b1_ = add_uniform<T>(store_, "time.fc1.bias", B, {sz(temb_dim_)}, sz(cfg_.time_embed_dim), rng);
  time_w2_ = add_uniform<T>(store_, "time.fc2.weight", B, {sz(temb_dim_), sz(temb_dim_)}, sz(temb_dim_), rng);
  time_b2_ = add_uniform<T>(store_, "time.fc2.bias", B, {sz(temb_dim_)}, sz(temb_dim_), rng);
  conv_in_w_ = add_uniform<T>(store_, "conv_in.weight", B, {sz(base), sz(cfg_.in_channels), 3, 3},
                              sz(cfg_.in_channels) * 9, rng);
  conv_in_b_ = add_uniform<T>(store_, "conv_in.bias", B, {sz(base)}, sz(cfg_.in_channels) * 9, rng);

  std::vector<std::pair<std::string, int>> block_levels;
  std::vector<int> skip_channels;
  int ch = base;
  for (int l = 0; l < levels; ++l) {
    const int out = base * cfg_.channel_mults[l];
    for (int i = 0; i < cfg_.res_blocks; ++i) {
      const std::string name = "down" + std::to_string(l) + "." + std::to_string(i);
      down_blocks_.push_back(make_block(name, ch, out, rng));
      block_levels.push_back({name, l});
      ch = out;
      skip_channels.push_back(ch);
    }
    if (l + 1 < levels) {
      const std::string name = "down" + std::to_string(l) + ".downsample";
      down_w_.push_back(add_uniform<T>(store_, name + ".weight", B, {sz(ch), sz(ch), 3, 3}, sz(ch) * 9, rng));
      down_b_.push_back(add_uniform<T>(store_, name + ".bias", B, {sz(ch)}, sz(ch) * 9, rng));
    }
  }
  mid_ = make_block("mid", ch, ch, rng);
  block_levels.push_back({"mid", levels - 1});
  for (int l = levels - 1; l >= 0; --l) {
    const int out = base * cfg_.channel_mults[l];
    for (int i = 0; i < cfg_.res_blocks; ++i) {
      const int skip = skip_channels.back();
      skip_channels.pop_back();
      const std::string name = "up" + std::to_string(l) + "." + std::to_string(i);
      up_blocks_.push_back(make_block(name, ch + skip, out, rng));
      block_levels.push_back({name, l});
      ch = out;
    }
  }
  out_norm_w_ = add_const<T>(store_, "out.norm.weight", B, {sz(ch)}, T(1));
  out_norm_b_ = add_const<T>(store_, "out.norm.bias", B, {sz(ch)}, T(0));
  out_conv_w_ = add_uniform<T>(store_, "out.conv.weight", B, {sz(cfg_.in_channels), sz(ch), 3, 3}, sz(ch) * 9, rng);
  out_conv_b_ = add_uniform<T>(store_, "out.conv.bias", B, {sz(cfg_.in_channels)}, sz(ch) * 9, rng);

  // FiLM target selection.
  std::set<std::string> wanted(cfg_.film_blocks.begin(), cfg_.film_blocks.end());
  for (const auto& w : wanted) {
    const bool known = std::any_of(block_levels.begin(), block_levels.end(), [&](auto& b) { return b.first == w; });
    require(known, ErrorKind::Config, "unknown FiLM block '" + w + "'");
  }
  const int min_level = std::max(0, levels - 2);
  auto assign = [&](ResBlock& b, int level) {
    const bool selected = wanted.empty() ? level >= min_level : wanted.count(b.name) > 0;
    if (!selected) return;
    b.film_index = static_cast<int>(film_targets_.size());
    film_targets_.push_back({b.name, b.out_ch});
  };
  std::size_t k = 0;
  for (auto& b : down_blocks_) assign(b, block_levels[k++].second);
  assign(mid_, block_levels[k++].second);
  for (auto& b : up_blocks_) assign(b, block_levels[k++].second);
}

template <typename T>
BasicTensor<T> EpsNet<T>::norm_affine(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) const {
  return ops::film_modulate(ops::group_norm(x, sz(cfg_.norm_groups), static_cast<T>(cfg_.norm_eps)), w, b);
}

template <typename T>
BasicTensor<T> EpsNet<T>::run_block(const ResBlock& b, const BasicTensor<T>& x, const BasicTensor<T>& temb,
                                    const FilmModulation<T>* film) const {
  auto h = ops::silu(norm_affine(x, b.norm1_w, b.norm1_b));
  h = ops::conv2d(h, b.conv1_w, &b.conv1_b, 1, 1);
  h = ops::add_channel_bias(h, ops::linear(temb, b.temb_w, &b.temb_b));
  h = norm_affine(h, b.norm2_w, b.norm2_b);
  if (film && b.film_index >= 0) {
    h = ops::film_modulate(h, film->gamma.at(sz(b.film_index)), film->beta.at(sz(b.film_index)));
  }
  h = ops::silu(h);
  h = ops::conv2d(h, b.conv2_w, &b.conv2_b, 1, 1);
  const BasicTensor<T> skip = b.skip_w ? ops::conv2d(x, *b.skip_w, &*b.skip_b, 1, 0) : x;
  return ops::add(skip, h);
}

template <typename T>
BasicTensor<T> EpsNet<T>::forward(const BasicTensor<T>& xt, std::span<const int> timesteps,
                                  const FilmModulation<T>* film) const {
  const Shape expect{xt.rank() ? xt.dim(0) : 0, sz(cfg_.in_channels), sz(cfg_.image_size), sz(cfg_.image_size)};
  require(xt.shape() == expect, ErrorKind::Dimension,
          "eps net input " + shape_str(xt.shape()) + ", expected " + shape_str(expect));
  require(timesteps.size() == xt.dim(0), ErrorKind::Dimension, "one timestep per sample required");
  if (film) {
    require(film->gamma.size() == film_targets_.size() && film->beta.size() == film_targets_.size(),
            ErrorKind::Dimension, "FiLM modulation does not match the network's targets");
  }
  auto temb = ops::embed_timestep<T>(timesteps, sz(cfg_.time_embed_dim));
  temb = ops::linear(temb, time_w1_, &time_b1_);
  temb = ops::linear(ops::silu(temb), time_w2_, &time_b2_);
  temb = ops::silu(temb);

  auto h = ops::conv2d(xt, conv_in_w_, &conv_in_b_, 1, 1);
  std::vector<BasicTensor<T>> skips;
  const int levels = static_cast<int>(cfg_.channel_mults.size());
  std::size_t bi = 0;
  for (int l = 0; l < levels; ++l) {
    for (int i = 0; i < cfg_.res_blocks; ++i) {
      h = run_block(down_blocks_[bi++], h, temb, film);
      skips.push_back(h);
    }
    if (l + 1 < levels) h = ops::conv2d(h, down_w_[sz(l)], &down_b_[sz(l)], 2, 1);
  }
  h = run_block(mid_, h, temb, film);
  bi = 0;
  for (int l = levels - 1; l >= 0; --l) {
    for (int i = 0; i < cfg_.res_blocks; ++i) {
      h = ops::concat_channels(h, skips.back());
      skips.pop_back();
      h = run_block(up_blocks_[bi++], h, temb, film);
    }
    if (l > 0) h = ops::upsample_nearest2x(h);
  }
  h = ops::silu(norm_affine(h, out_norm_w_, out_norm_b_));
  return ops::conv2d(h, out_conv_w_, &out_conv_b_, 1, 1);
}

// ---------------------------------------------------------------- adapter

template <typename T>
FilmAdapter<T>::FilmAdapter(AdapterConfig cfg, std::vector<FilmTarget> targets, std::uint64_t seed)
    : cfg_(cfg), targets_(std::move(targets)) {
  require(cfg_.gene_dim > 0 && cfg_.embed_dim > 0, ErrorKind::Config, "adapter dimensions must be positive");
  require(!targets_.empty(), ErrorKind::Config, "adapter has no FiLM targets");
  constexpr auto A = Partition::Adapter;
  Rng rng(seed);
  proj_w_ = add_uniform<T>(store_, "film.proj.weight", A, {sz(cfg_.embed_dim), sz(cfg_.gene_dim)},
                           sz(cfg_.gene_dim), rng);
  proj_b_ = add_uniform<T>(store_, "film.proj.bias", A, {sz(cfg_.embed_dim)}, sz(cfg_.gene_dim), rng);
  for (const auto& t : targets_) {
    gamma_w_.push_back(add_const<T>(store_, "film." + t.block + ".gamma.weight", A,
                                    {sz(t.channels), sz(cfg_.embed_dim)}, T(0)));
    beta_w_.push_back(add_const<T>(store_, "film." + t.block + ".beta.weight", A,
                                   {sz(t.channels), sz(cfg_.embed_dim)}, T(0)));
  }
}

template <typename T>
BasicTensor<T> FilmAdapter<T>::embed(const BasicTensor<T>& genes, std::span<const T> keep) const {
  require(genes.rank() == 2 && genes.dim(1) == sz(cfg_.gene_dim), ErrorKind::Dimension,
          "gene profile length " + (genes.rank() == 2 ? std::to_string(genes.dim(1)) : shape_str(genes.shape())) +
              " does not match adapter gene_dim " + std::to_string(cfg_.gene_dim));
  auto e = ops::silu(ops::linear(genes, proj_w_, &proj_b_));
  if (!keep.empty()) e = ops::scale_rows(e, keep);
  return e;
}

template <typename T>
FilmModulation<T> FilmAdapter<T>::modulation(const BasicTensor<T>& embedding) const {
  FilmModulation<T> m;
  const std::size_t N = embedding.dim(0);
  for (std::size_t i = 0; i < targets_.size(); ++i) {
    const auto ones = BasicTensor<T>::full({N, sz(targets_[i].channels)}, T(1));
    m.gamma.push_back(ops::add(ones, ops::linear(embedding, gamma_w_[i], static_cast<const BasicTensor<T>*>(nullptr))));
    m.beta.push_back(ops::linear(embedding, beta_w_[i], static_cast<const BasicTensor<T>*>(nullptr)));
  }
  return m;
}

template <typename T>
BasicTensor<T> eps_forward(const EpsNet<T>& net, const FilmAdapter<T>* adapter, const BasicTensor<T>& xt,
                           std::span<const int> timesteps, const BasicTensor<T>* cond, std::span<const T> keep) {
  if (!cond) return net.forward(xt, timesteps, nullptr);
  require(adapter != nullptr, ErrorKind::Config, "gene conditioning requires an adapter");
  require(cond->rank() == 2 && cond->dim(0) == xt.dim(0), ErrorKind::Dimension,
          "one gene profile per sample required");
  const auto film = adapter->modulation(adapter->embed(*cond, keep));
  return net.forward(xt, timesteps, &film);
}

template <typename T>
PartitionedParams<T> partition_parameters(EpsNet<T>& net, FilmAdapter<T>* adapter) {
  PartitionedParams<T> out;
  std::unordered_set<const void*> seen;
  auto take = [&](Parameter<T>& p, Partition expected, std::vector<Parameter<T>*>& dst, std::size_t& count) {
    require(p.partition != Partition::Untagged, ErrorKind::Integrity, "parameter " + p.name + " has no partition tag");
    require(p.partition == expected, ErrorKind::Integrity,
            "parameter " + p.name + " tagged '" + to_string(p.partition) + "' in the wrong module");
    require(seen.insert(p.tensor.node().get()).second, ErrorKind::Integrity,
            "parameter " + p.name + " is shared between partitions");
    dst.push_back(&p);
    count += p.tensor.numel();
  };
  for (auto& p : net.parameters().items()) take(p, Partition::Backbone, out.backbone, out.backbone_count);
  if (adapter) {
    for (auto& p : adapter->parameters().items()) take(p, Partition::Adapter, out.adapter, out.adapter_count);
  }
  return out;
}

template <typename T>
std::string backbone_checksum(const EpsNet<T>& net) {
  std::vector<unsigned char> bytes;
  for (const auto& p : net.parameters().items()) {
    if (p.partition != Partition::Backbone) continue;
    auto v = p.tensor.values();
    const auto* raw = reinterpret_cast<const unsigned char*>(v.data());
    bytes.insert(bytes.end(), raw, raw + v.size() * sizeof(T));
  }
  return io::sha256_hex(bytes);
}

// ---------------------------------------------------------------- MLP

template <typename T>
MlpEpsNet<T>::MlpEpsNet(int data_dim, int hidden, int time_embed_dim, std::uint64_t seed)
    : time_embed_dim_(time_embed_dim) {
  require(data_dim > 0 && hidden > 0, ErrorKind::Config, "MLP dimensions must be positive");
  constexpr auto B = Partition::Backbone;
  Rng rng(seed);
  te_w_ = add_uniform<T>(store_, "time.weight", B, {sz(hidden), sz(time_embed_dim)}, sz(time_embed_dim), rng);
  te_b_ = add_uniform<T>(store_, "time.bias", B, {sz(hidden)}, sz(time_embed_dim), rng);
  in_w_ = add_uniform<T>(store_, "in.weight", B, {sz(hidden), sz(data_dim)}, sz(data_dim), rng);
  in_b_ = add_uniform<T>(store_, "in.bias", B, {sz(hidden)}, sz(data_dim), rng);
  t1_w_ = add_uniform<T>(store_, "in.temb.weight", B, {sz(hidden), sz(hidden)}, sz(hidden), rng);
  h_w_ = add_uniform<T>(store_, "hidden.weight", B, {sz(hidden), sz(hidden)}, sz(hidden), rng);
  h_b_ = add_uniform<T>(store_, "hidden.bias", B, {sz(hidden)}, sz(hidden), rng);
  t2_w_ = add_uniform<T>(store_, "hidden.temb.weight", B, {sz(hidden), sz(hidden)}, sz(hidden), rng);
  out_w_ = add_uniform<T>(store_, "out.weight", B, {sz(data_dim), sz(hidden)}, sz(hidden), rng);
  out_b_ = add_uniform<T>(store_, "out.bias", B, {sz(data_dim)}, sz(hidden), rng);
}

template <typename T>
BasicTensor<T> MlpEpsNet<T>::forward(const BasicTensor<T>& xt, std::span<const int> timesteps) const {
  const BasicTensor<T>* none = nullptr;
  auto temb = ops::silu(ops::linear(ops::embed_timestep<T>(timesteps, sz(time_embed_dim_)), te_w_, &te_b_));
  auto h = ops::silu(ops::add(ops::linear(xt, in_w_, &in_b_), ops::linear(temb, t1_w_, none)));
  h = ops::silu(ops::add(ops::linear(h, h_w_, &h_b_), ops::linear(temb, t2_w_, none)));
  return ops::linear(h, out_w_, &out_b_);
}

#define C2L_INSTANTIATE(T)                                                                             \
  template class ParameterStore<T>;                                                                    \
  template class EpsNet<T>;                                                                            \
  template class FilmAdapter<T>;                                                                       \
  template class MlpEpsNet<T>;                                                                         \
  template BasicTensor<T> eps_forward(const EpsNet<T>&, const FilmAdapter<T>*, const BasicTensor<T>&, \
                                      std::span<const int>, const BasicTensor<T>*, std::span<const T>); \
  template PartitionedParams<T> partition_parameters(EpsNet<T>&, FilmAdapter<T>*);                     \
  template std::string backbone_checksum(const EpsNet<T>&);

C2L_INSTANTIATE(float)
C2L_INSTANTIATE(double)
#undef C2L_INSTANTIATE

}  // namespace c2l
