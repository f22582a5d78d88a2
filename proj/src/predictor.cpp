#include "c2l/predictor.hpp"

#include <cmath>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "c2l/error.hpp"
#include "c2l/ops.hpp"

namespace c2l {

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

template <typename T>
std::vector<T> uniform_values(Rng& rng, std::size_t n, double bound) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return v;
}

}  // namespace

void RegressorConfig::validate() const {
  require(in_channels > 0 && image_size > 0 && out_dim > 0 && norm_groups > 0, ErrorKind::Config,
          "regressor dimensions must be positive");
  require(!channels.empty(), ErrorKind::Config, "regressor needs at least one stage");
  for (int c : channels) require(c > 0, ErrorKind::Config, "stage widths must be positive");
  require(image_size % (1 << (channels.size() - 1)) == 0, ErrorKind::Config,
          "image size must be divisible by 2^(stages - 1)");
}

io::json RegressorConfig::to_json() const {
  return {{"in_channels", in_channels}, {"image_size", image_size}, {"channels", channels},
          {"norm_groups", norm_groups}, {"out_dim", out_dim}};
}

RegressorConfig RegressorConfig::from_json(const io::json& j) {
  RegressorConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  c.image_size = j.value("image_size", c.image_size);
  c.channels = j.value("channels", c.channels);
  c.norm_groups = j.value("norm_groups", c.norm_groups);
  c.out_dim = j.value("out_dim", c.out_dim);
  return c;
}

template <typename T>
Regressor<T>::Regressor(RegressorConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  constexpr auto U = Partition::Untagged;
  Rng rng(seed);
  int in = cfg_.in_channels;
  for (std::size_t s = 0; s < cfg_.channels.size(); ++s) {
    const int out = cfg_.channels[s];
    const std::string name = "stage" + std::to_string(s);
    const double bound = 1.0 / std::sqrt(9.0 * in);
    conv_w_.push_back(store_.add(name + ".conv.weight", U, {sz(out), sz(in), 3, 3},
                                 uniform_values<T>(rng, sz(out * in * 9), bound)));
    conv_b_.push_back(store_.add(name + ".conv.bias", U, {sz(out)}, uniform_values<T>(rng, sz(out), bound)));
    norm_w_.push_back(store_.add(name + ".norm.weight", U, {sz(out)}, std::vector<T>(sz(out), T(1))));
    norm_b_.push_back(store_.add(name + ".norm.bias", U, {sz(out)}, std::vector<T>(sz(out), T(0))));
    in = out;
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  head_w_ = store_.add("head.weight", U, {sz(cfg_.out_dim), sz(in)}, uniform_values<T>(rng, sz(cfg_.out_dim * in), bound));
  head_b_ = store_.add("head.bias", U, {sz(cfg_.out_dim)}, std::vector<T>(sz(cfg_.out_dim), T(0)));
}

template <typename T>
BasicTensor<T> Regressor<T>::forward(const BasicTensor<T>& x) const {
  require(x.rank() == 4 && x.shape()[1] == sz(cfg_.in_channels) && x.shape()[2] == sz(cfg_.image_size) &&
              x.shape()[3] == sz(cfg_.image_size),
          ErrorKind::Dimension, "regressor input must be [N, " + std::to_string(cfg_.in_channels) + ", " +
                                    std::to_string(cfg_.image_size) + ", " + std::to_string(cfg_.image_size) +
                                    "], got " + shape_str(x.shape()));
  BasicTensor<T> h = x;
  for (std::size_t s = 0; s < conv_w_.size(); ++s) {
    h = ops::conv2d(h, conv_w_[s], &conv_b_[s], s == 0 ? 1 : 2, 1);
    const auto groups = std::gcd(sz(cfg_.norm_groups), sz(cfg_.channels[s]));
    h = ops::silu(ops::film_modulate(ops::group_norm(h, groups, static_cast<T>(1e-5)), norm_w_[s], norm_b_[s]));
  }
  return ops::linear(ops::global_avg_pool(h), head_w_, &head_b_);
}

template class Regressor<float>;
template class Regressor<double>;

// ---------------------------------------------------------------- cotrain set

const char* to_string(CotrainMode m) {
  return m == CotrainMode::SyntheticOnly ? "synthetic_only" : "real_plus_synthetic";
}

CotrainSet build_cotrain_set(const SlideDataset& real, const SlideDataset* synthetic, int k, CotrainMode mode) {
  require(k >= 0 && k <= 10, ErrorKind::Config, "synthetic ratio k must be in [0, 10]");
  require(real.genes_kind == GenesKind::Normalized, ErrorKind::Contract, "real records must be preprocessed");
  require(real.size() > 0, ErrorKind::Contract, "no real records");
  require(mode == CotrainMode::RealPlusSynthetic || k >= 1, ErrorKind::Config, "synthetic-only training needs k >= 1");
  CotrainSet set;
  set.patch_shape = real.patch_shape;
  set.gene_dim = real.gene_dim();
  for (const auto& s : real.spots) set.training_spots.push_back(s.spot_id);

  if (mode == CotrainMode::RealPlusSynthetic) {
    for (const auto& s : real.spots) set.records.push_back({&s, false});
    set.n_real = real.size();
  }
  if (k == 0) return set;

  require(synthetic != nullptr, ErrorKind::MissingArtifact, "k > 0 needs a synthetic dataset");
  require(synthetic->genes_kind == GenesKind::Normalized && synthetic->gene_dim() == set.gene_dim &&
              synthetic->patch_shape == set.patch_shape,
          ErrorKind::Dimension, "synthetic records do not match the real records' layout");
  require(synthetic->size() >= static_cast<std::size_t>(k) * real.size(), ErrorKind::Contract,
          "insufficient synthetic pool: " + std::to_string(synthetic->size()) + " records for k = " +
              std::to_string(k) + " and " + std::to_string(real.size()) + " real spots");
  std::unordered_map<std::string, std::vector<const SpotRecord*>> by_source;
  for (const auto& s : synthetic->spots) by_source[s.source_spot].push_back(&s);
  for (const auto& r : real.spots) {
    const auto it = by_source.find(r.spot_id);
    const std::size_t have = it == by_source.end() ? 0 : it->second.size();
    require(have >= static_cast<std::size_t>(k), ErrorKind::Contract,
            "insufficient synthetic pool: spot " + r.spot_id + " has " + std::to_string(have) +
                " synthetic records, k = " + std::to_string(k));
    for (int j = 0; j < k; ++j) set.records.push_back({it->second[static_cast<std::size_t>(j)], true});
  }
  set.n_synthetic = static_cast<std::size_t>(k) * real.size();
  return set;
}

// ---------------------------------------------------------------- training

void PredictorTrainConfig::validate() const {
  require(epochs > 0 && batch_size > 0, ErrorKind::Config, "epochs and batch_size must be positive");
  require(lr > 0 && lr_floor >= 0 && lr_floor <= lr, ErrorKind::Config, "need 0 <= lr_floor <= lr, lr > 0");
  require(warmup_fraction >= 0 && warmup_fraction < 1, ErrorKind::Config, "warmup_fraction must be in [0, 1)");
  require(weight_decay >= 0, ErrorKind::Config, "weight_decay must be >= 0");
}

io::json PredictorTrainConfig::to_json() const {
  return {{"epochs", epochs}, {"batch_size", batch_size},           {"lr", lr},
          {"lr_floor", lr_floor}, {"warmup_fraction", warmup_fraction}, {"weight_decay", weight_decay}};
}

PredictorTrainConfig PredictorTrainConfig::from_json(const io::json& j) {
  PredictorTrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.lr_floor = j.value("lr_floor", c.lr_floor);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  return c;
}

PredictorRun train_predictor(Regressor<float>& model, const CotrainSet& set, const PredictorTrainConfig& cfg,
                             std::uint64_t seed) {
  cfg.validate();
  require(!set.records.empty(), ErrorKind::Contract, "cannot train on an empty set");
  require(set.gene_dim == static_cast<std::size_t>(model.config().out_dim), ErrorKind::Dimension,
          "regressor predicts " + std::to_string(model.config().out_dim) + " genes, training set has " +
              std::to_string(set.gene_dim));
  const std::size_t N = set.records.size(), B = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t P = shape_numel(set.patch_shape), d = set.gene_dim;
  const int per_epoch = static_cast<int>((N + B - 1) / B);
  const int total = cfg.epochs * per_epoch;
  const LrSchedule sched{LrKind::WarmupCosine, cfg.lr, cfg.lr_floor, warmup_steps_for(cfg.warmup_fraction, total),
                         total};
  std::vector<Parameter<float>*> params;
  for (auto& p : model.parameters().items()) {
    p.tensor.set_requires_grad(true);
    params.push_back(&p);
  }
  OptimState<float> optim(params, AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  Rng rng(seed);
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  PredictorRun run;
  for (int e = 0; e < cfg.epochs; ++e) {
    for (std::size_t i = N; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double epoch_loss = 0;
    for (std::size_t start = 0; start < N; start += B) {
      const std::size_t b = std::min(B, N - start);
      Buffer<float> x(b * P), y(b * d);
      for (std::size_t n = 0; n < b; ++n) {
        const SpotRecord& r = *set.records[order[start + n]].spot;
        std::copy(r.patch.begin(), r.patch.end(), x.begin() + n * P);
        std::copy(r.genes.begin(), r.genes.end(), y.begin() + n * d);
      }
      Shape xs{b};
      xs.insert(xs.end(), set.patch_shape.begin(), set.patch_shape.end());
      const Tensor xt(xs, std::move(x)), yt({b, d}, std::move(y));
      optim.zero_grad();
      const auto loss = ops::l1_loss(model.forward(xt), yt);
      require(std::isfinite(loss.item()), ErrorKind::Numeric,
              "non-finite predictor loss at step " + std::to_string(run.steps));
      loss.backward();
      optim.step(lr_at(run.steps, sched));
      epoch_loss += loss.item() * static_cast<double>(b);
      ++run.steps;
    }
    run.epoch_loss.push_back(epoch_loss / static_cast<double>(N));
  }
  optim.zero_grad();
  return run;
}

// ---------------------------------------------------------------- evaluation

io::json MaeReport::to_json() const {
  return {{"aggregate_mae", aggregate}, {"per_gene_mae", per_gene}, {"count", count}};
}

MaeReport mae(std::span<const float> pred, std::span<const float> truth, std::size_t n, std::size_t d) {
  require(pred.size() == n * d && truth.size() == n * d, ErrorKind::Dimension, "mae: size mismatch");
  require(n > 0 && d > 0, ErrorKind::Contract, "mae of an empty set");
  MaeReport r;
  r.count = n;
  r.per_gene.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t g = 0; g < d; ++g)
      r.per_gene[g] += std::abs(static_cast<double>(pred[i * d + g]) - static_cast<double>(truth[i * d + g]));
  for (auto& v : r.per_gene) v /= static_cast<double>(n);
  r.aggregate = std::accumulate(r.per_gene.begin(), r.per_gene.end(), 0.0) / static_cast<double>(d);
  return r;
}

std::vector<float> predict(const Regressor<float>& model, const SlideDataset& ds, std::size_t batch) {
  NoGradGuard ng;
  const std::size_t P = ds.patch_numel(), d = static_cast<std::size_t>(model.config().out_dim);
  std::vector<float> out;
  out.reserve(ds.size() * d);
  for (std::size_t start = 0; start < ds.size(); start += batch) {
    const std::size_t b = std::min(batch, ds.size() - start);
    Buffer<float> x(b * P);
    for (std::size_t n = 0; n < b; ++n) std::copy(ds.spots[start + n].patch.begin(), ds.spots[start + n].patch.end(), x.begin() + n * P);
    Shape xs{b};
    xs.insert(xs.end(), ds.patch_shape.begin(), ds.patch_shape.end());
    const auto y = model.forward(Tensor(xs, std::move(x)));
    out.insert(out.end(), y.values().begin(), y.values().end());
  }
  return out;
}

MaeReport evaluate_mae(const Regressor<float>& model, const SlideDataset& test, const CotrainSet* trained_on) {
  require(test.genes_kind == GenesKind::Normalized, ErrorKind::Contract, "test genes must be preprocessed");
  require(test.gene_dim() == static_cast<std::size_t>(model.config().out_dim), ErrorKind::Dimension,
          "test set has " + std::to_string(test.gene_dim()) + " genes, regressor predicts " +
              std::to_string(model.config().out_dim));
  if (trained_on != nullptr) {
    const std::unordered_set<std::string> seen(trained_on->training_spots.begin(), trained_on->training_spots.end());
    for (const auto& s : test.spots)
      require(!seen.contains(s.spot_id), ErrorKind::Integrity, "test spot " + s.spot_id + " was used in training");
  }
  const auto pred = predict(model, test);
  std::vector<float> truth;
  truth.reserve(test.size() * test.gene_dim());
  for (const auto& s : test.spots) truth.insert(truth.end(), s.genes.begin(), s.genes.end());
  return mae(pred, truth, test.size(), test.gene_dim());
}

}  // namespace c2l
