#include "c2l/train.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_map>

#include "c2l/ops.hpp"

namespace c2l {

const char* to_string(LrKind k) { return k == LrKind::WarmupCosine ? "warmup_cosine" : "warmup_constant"; }

LrKind lr_kind_from_string(const std::string& s) {
  if (s == "warmup_cosine") return LrKind::WarmupCosine;
  if (s == "warmup_constant") return LrKind::WarmupConstant;
  fail(ErrorKind::Config, "unknown learning-rate schedule '" + s + "'");
}

double lr_at(int step, const LrSchedule& s) {
  require(step >= 0, ErrorKind::Contract, "lr_at: negative step");
  if (s.warmup_steps > 0 && step < s.warmup_steps) return s.peak * step / s.warmup_steps;
  if (s.kind == LrKind::WarmupConstant) return s.peak;
  const int span = s.total_steps - 1 - s.warmup_steps;
  const double progress = span > 0 ? std::min(1.0, double(step - s.warmup_steps) / span) : 1.0;
  return s.floor + (s.peak - s.floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

int warmup_steps_for(double fraction, int total_steps) {
  return static_cast<int>(std::lround(fraction * total_steps));
}

// ---------------------------------------------------------------- AdamW

template <typename T>
OptimState<T>::OptimState(std::vector<Parameter<T>*> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  require(cfg_.beta1 >= 0 && cfg_.beta1 < 1 && cfg_.beta2 >= 0 && cfg_.beta2 < 1 && cfg_.eps > 0 &&
              cfg_.weight_decay >= 0,
          ErrorKind::Config, "invalid AdamW hyperparameters");
  for (auto* p : params_) {
    m_.emplace_back(p->tensor.numel(), T(0));
    v_.emplace_back(p->tensor.numel(), T(0));
  }
}

template <typename T>
void OptimState<T>::step(double lr) {
  const int t = step_ + 1;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& tensor = params_[k]->tensor;
    if (!tensor.has_grad()) continue;
    auto g = tensor.grad();
    auto p = tensor.mutable_values();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      const double vi = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps) + cfg_.weight_decay * p[i];
      p[i] = static_cast<T>(p[i] - lr * update);
    }
  }
  step_ = t;
  last_lr_ = lr;
}

template <typename T>
void OptimState<T>::zero_grad() {
  for (auto* p : params_) p->tensor.zero_grad();
}

template <typename T>
void OptimState<T>::require_only(Partition allowed) const {
  for (const auto* p : params_) {
    require(p->partition == allowed, ErrorKind::Integrity,
            std::string("optimizer state covers ") + to_string(p->partition) + " parameter " + p->name +
                "; only " + to_string(allowed) + " parameters may be optimized here");
  }
}

template <typename T>
std::vector<ParamEntry> OptimState<T>::to_entries() const {
  std::vector<ParamEntry> out;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const auto& p = *params_[k];
    out.push_back({p.name + ".m", p.tensor.shape(), "", std::vector<float>(m_[k].begin(), m_[k].end())});
    out.push_back({p.name + ".v", p.tensor.shape(), "", std::vector<float>(v_[k].begin(), v_[k].end())});
  }
  return out;
}

template <typename T>
void OptimState<T>::load_entries(const std::vector<ParamEntry>& entries, int step, double last_lr) {
  std::unordered_map<std::string, const ParamEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    for (auto* dst : {&m_[k], &v_[k]}) {
      const std::string name = params_[k]->name + (dst == &m_[k] ? ".m" : ".v");
      auto it = by_name.find(name);
      require(it != by_name.end(), ErrorKind::Io, "optimizer state is missing " + name);
      require(it->second->values.size() == dst->size(), ErrorKind::Dimension, "optimizer state size mismatch for " + name);
      std::copy(it->second->values.begin(), it->second->values.end(), dst->begin());
    }
  }
  step_ = step;
  last_lr_ = last_lr;
}

// ---------------------------------------------------------------- EMA

template <typename T>
EmaState<T>::EmaState(std::vector<Parameter<T>*> params, double decay) : params_(std::move(params)), decay_(decay) {
  require(decay >= 0.0 && decay < 1.0, ErrorKind::Config, "EMA decay must be in [0, 1)");
  for (auto* p : params_) shadow_.emplace_back(p->tensor.values().begin(), p->tensor.values().end());
}

template <typename T>
void EmaState<T>::update() {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto p = params_[k]->tensor.values();
    auto& s = shadow_[k];
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<T>(decay_ * s[i] + (1.0 - decay_) * p[i]);
  }
}

template <typename T>
void EmaState<T>::copy_to_params() const {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto dst = params_[k]->tensor.mutable_values();
    std::copy(shadow_[k].begin(), shadow_[k].end(), dst.begin());
  }
}

template <typename T>
std::vector<ParamEntry> EmaState<T>::to_entries() const {
  std::vector<ParamEntry> out;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const auto& p = *params_[k];
    out.push_back({p.name, p.tensor.shape(), to_string(p.partition),
                   std::vector<float>(shadow_[k].begin(), shadow_[k].end())});
  }
  return out;
}

template <typename T>
void EmaState<T>::load_entries(const std::vector<ParamEntry>& entries) {
  std::unordered_map<std::string, const ParamEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto it = by_name.find(params_[k]->name);
    require(it != by_name.end(), ErrorKind::Io, "EMA state is missing " + params_[k]->name);
    require(it->second->values.size() == shadow_[k].size(), ErrorKind::Dimension,
            "EMA state size mismatch for " + params_[k]->name);
    std::copy(it->second->values.begin(), it->second->values.end(), shadow_[k].begin());
  }
}

// ---------------------------------------------------------------- data

void TrainData::validate(bool need_genes) const {
  require(count > 0, ErrorKind::Contract, "training data is empty");
  require(image_shape.size() == 3, ErrorKind::Dimension, "image shape must be [C, S, S]");
  require(images.size() == count * image_numel(), ErrorKind::Dimension, "image buffer size does not match count");
  if (need_genes) {
    require(gene_dim > 0 && genes.size() == count * gene_dim, ErrorKind::Dimension,
            "conditional training needs one gene profile per image");
  }
}

template <typename T>
NoisedBatch<T> draw_batch(const TrainData& data, std::size_t batch, const NoiseSchedule& sched, Rng& rng,
                          bool conditional, double cond_dropout) {
  const std::size_t P = data.image_numel();
  Shape xshape{batch};
  xshape.insert(xshape.end(), data.image_shape.begin(), data.image_shape.end());
  Buffer<T> x(batch * P), eps(batch * P), genes;
  NoisedBatch<T> b;
  b.timesteps.resize(batch);
  std::vector<std::size_t> idx(batch);
  for (std::size_t n = 0; n < batch; ++n) {
    idx[n] = rng.below(data.count);
    b.timesteps[n] = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.steps())));
    std::copy_n(data.images.begin() + idx[n] * P, P, x.begin() + n * P);
  }
  for (auto& e : eps) e = static_cast<T>(rng.normal());
  b.x0 = BasicTensor<T>(xshape, std::move(x));
  b.eps = BasicTensor<T>(xshape, std::move(eps));
  if (conditional) {
    const std::size_t d = data.gene_dim;
    genes.resize(batch * d);
    for (std::size_t n = 0; n < batch; ++n) std::copy_n(data.genes.begin() + idx[n] * d, d, genes.begin() + n * d);
    b.genes = BasicTensor<T>({batch, d}, std::move(genes));
    b.keep.resize(batch);
    for (auto& k : b.keep) k = rng.uniform() < cond_dropout ? T(0) : T(1);
  }
  return b;
}

template <typename T>
double loss_backward(const EpsNet<T>& net, const FilmAdapter<T>* adapter, const NoisedBatch<T>& batch,
                     const NoiseSchedule& sched, const LossConfig& loss_cfg, double scale) {
  const std::span<const int> ts(batch.timesteps);
  const auto xt = q_sample(batch.x0, ts, batch.eps, sched);
  const auto pred = eps_forward<T>(net, adapter, xt, ts, batch.conditional() ? &batch.genes : nullptr,
                                   std::span<const T>(batch.keep));
  const auto loss = diffusion_loss(batch.eps, pred, ts, loss_cfg, sched);
  if (scale == 1.0) {
    loss.backward();
  } else {
    ops::scale(loss, static_cast<T>(scale)).backward();
  }
  return static_cast<double>(loss.item());
}

// ---------------------------------------------------------------- configs

void PretrainConfig::validate() const {
  require(steps > 0 && batch_size > 0 && grad_accum > 0, ErrorKind::Config,
          "pretrain steps, batch_size and grad_accum must be positive");
  require(lr > 0 && weight_decay >= 0 && snr_clip > 0, ErrorKind::Config, "invalid pretrain optimizer settings");
  require(ema_decay >= 0 && ema_decay < 1, ErrorKind::Config, "ema_decay must be in [0, 1)");
  require(warmup_fraction >= 0 && warmup_fraction < 1, ErrorKind::Config, "warmup_fraction must be in [0, 1)");
  require(checkpoint_every >= 0, ErrorKind::Config, "checkpoint_every must be >= 0");
}

io::json PretrainConfig::to_json() const {
  return {{"steps", steps},         {"batch_size", batch_size},     {"grad_accum", grad_accum},
          {"lr", lr},               {"weight_decay", weight_decay}, {"snr_clip", snr_clip},
          {"ema_decay", ema_decay}, {"warmup_fraction", warmup_fraction}, {"checkpoint_every", checkpoint_every}};
}

PretrainConfig PretrainConfig::from_json(const io::json& j) {
  PretrainConfig c;
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.grad_accum = j.value("grad_accum", c.grad_accum);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.snr_clip = j.value("snr_clip", c.snr_clip);
  c.ema_decay = j.value("ema_decay", c.ema_decay);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  return c;
}

void AdaptConfig::validate() const {
  require(steps > 0 && batch_size > 0 && grad_accum > 0, ErrorKind::Config,
          "adapt steps, batch_size and grad_accum must be positive");
  require(lr > 0 && weight_decay >= 0 && snr_clip > 0, ErrorKind::Config, "invalid adapt optimizer settings");
  require(cond_dropout >= 0 && cond_dropout < 1, ErrorKind::Config, "cond_dropout must be in [0, 1)");
  require(warmup_fraction >= 0 && warmup_fraction < 1, ErrorKind::Config, "warmup_fraction must be in [0, 1)");
  require(ema_decay >= 0 && ema_decay < 1, ErrorKind::Config, "ema_decay must be in [0, 1)");
  require(checkpoint_every >= 0, ErrorKind::Config, "checkpoint_every must be >= 0");
}

io::json AdaptConfig::to_json() const {
  return {{"steps", steps},
          {"batch_size", batch_size},
          {"grad_accum", grad_accum},
          {"lr", lr},
          {"weight_decay", weight_decay},
          {"snr_clip", snr_clip},
          {"cond_dropout", cond_dropout},
          {"warmup_fraction", warmup_fraction},
          {"ema_decay", ema_decay},
          {"checkpoint_every", checkpoint_every}};
}

AdaptConfig AdaptConfig::from_json(const io::json& j) {
  AdaptConfig c;
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.grad_accum = j.value("grad_accum", c.grad_accum);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.snr_clip = j.value("snr_clip", c.snr_clip);
  c.cond_dropout = j.value("cond_dropout", c.cond_dropout);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.ema_decay = j.value("ema_decay", c.ema_decay);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  return c;
}

std::string timestep_histogram(std::span<const int> ts, int T, int bins) {
  std::vector<int> counts(static_cast<std::size_t>(bins), 0);
  for (int t : ts) {
    const int b = std::clamp((t - 1) * bins / std::max(T, 1), 0, bins - 1);
    ++counts[static_cast<std::size_t>(b)];
  }
  std::ostringstream os;
  for (int b = 0; b < bins; ++b) {
    const int lo = 1 + b * T / bins, hi = (b + 1) * T / bins;
    os << (b ? " " : "") << '[' << lo << '-' << hi << "]:" << counts[static_cast<std::size_t>(b)];
  }
  return os.str();
}

namespace {

// Runs one accumulated optimizer step, turning non-finite values anywhere in
// the forward/backward pass into a diagnostic that names the step and the
// timesteps drawn for it.
template <typename T, typename MicroFn>
double accumulate(int step, int T_steps, int micro_batches, MicroFn&& micro) {
  std::vector<int> drawn;
  double total = 0;
  try {
    for (int a = 0; a < micro_batches; ++a) total += micro(drawn);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::Numeric) throw;
    fail(ErrorKind::Numeric, std::string(e.what()) + " at training step " + std::to_string(step) +
                                 "; timestep histogram " + timestep_histogram(drawn, T_steps));
  }
  if (!std::isfinite(total)) {
    fail(ErrorKind::Numeric, "non-finite loss at training step " + std::to_string(step) + "; timestep histogram " +
                                 timestep_histogram(drawn, T_steps));
  }
  return total / micro_batches;
}

template <typename T>
std::vector<Parameter<T>*> backbone_params(EpsNet<T>& net) {
  return partition_parameters<T>(net, nullptr).backbone;
}

template <typename T>
std::vector<Parameter<T>*> adapter_params(EpsNet<T>& net, FilmAdapter<T>& adapter) {
  return partition_parameters<T>(net, &adapter).adapter;
}

}  // namespace

// ---------------------------------------------------------------- pretrain

template <typename T>
Pretrainer<T>::Pretrainer(EpsNet<T>& net, NoiseSchedule sched, PretrainConfig cfg, std::uint64_t seed)
    : net_(net),
      sched_(std::move(sched)),
      cfg_((cfg.validate(), cfg)),
      lr_{LrKind::WarmupConstant, cfg.lr, cfg.lr, warmup_steps_for(cfg.warmup_fraction, cfg.steps), cfg.steps},
      optim_(backbone_params(net), AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay}),
      ema_(backbone_params(net), cfg.ema_decay),
      rng_(seed) {
  for (auto* p : optim_.params()) p->tensor.set_requires_grad(true);
}

template <typename T>
double Pretrainer<T>::step(const TrainData& data) {
  data.validate(false);
  const LossConfig loss{cfg_.snr_clip};
  const std::size_t B = static_cast<std::size_t>(cfg_.batch_size);
  optim_.zero_grad();
  const double mean_loss = accumulate<T>(step_, sched_.steps(), cfg_.grad_accum, [&](std::vector<int>& drawn) {
    const auto batch = draw_batch<T>(data, B, sched_, rng_, false, 0.0);
    drawn.insert(drawn.end(), batch.timesteps.begin(), batch.timesteps.end());
    return loss_backward<T>(net_, nullptr, batch, sched_, loss, 1.0 / cfg_.grad_accum);
  });
  optim_.step(lr_at(step_, lr_));
  optim_.zero_grad();
  ema_.update();
  ++step_;
  return mean_loss;
}

// ---------------------------------------------------------------- adapt

template <typename T>
AdaptTrainer<T>::AdaptTrainer(EpsNet<T>& net, FilmAdapter<T>& adapter, NoiseSchedule sched, AdaptConfig cfg,
                              std::uint64_t seed)
    : net_(net),
      adapter_(adapter),
      sched_(std::move(sched)),
      cfg_((cfg.validate(), cfg)),
      lr_{LrKind::WarmupConstant, cfg.lr, cfg.lr, warmup_steps_for(cfg.warmup_fraction, cfg.steps), cfg.steps},
      optim_(adapter_params(net, adapter), AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay}),
      ema_(adapter_params(net, adapter), cfg.ema_decay),
      rng_(seed) {
  optim_.require_only(Partition::Adapter);
  for (auto& p : net_.parameters().items()) {
    p.tensor.zero_grad();
    p.tensor.set_requires_grad(false);
  }
  for (auto* p : optim_.params()) p->tensor.set_requires_grad(true);
}

template <typename T>
double AdaptTrainer<T>::step(const TrainData& data) {
  data.validate(true);
  require(data.gene_dim == static_cast<std::size_t>(adapter_.config().gene_dim), ErrorKind::Dimension,
          "gene profiles have length " + std::to_string(data.gene_dim) + ", adapter expects " +
              std::to_string(adapter_.config().gene_dim));
  optim_.require_only(Partition::Adapter);
  const LossConfig loss{cfg_.snr_clip};
  const std::size_t B = static_cast<std::size_t>(cfg_.batch_size);
  optim_.zero_grad();
  const double mean_loss = accumulate<T>(step_, sched_.steps(), cfg_.grad_accum, [&](std::vector<int>& drawn) {
    const auto batch = draw_batch<T>(data, B, sched_, rng_, true, cfg_.cond_dropout);
    drawn.insert(drawn.end(), batch.timesteps.begin(), batch.timesteps.end());
    return loss_backward<T>(net_, &adapter_, batch, sched_, loss, 1.0 / cfg_.grad_accum);
  });
  for (const auto& p : net_.parameters().items()) {
    require(!p.tensor.has_grad(), ErrorKind::Integrity, "frozen backbone parameter " + p.name + " received a gradient");
  }
  optim_.step(lr_at(step_, lr_));
  optim_.zero_grad();
  ema_.update();
  ++step_;
  return mean_loss;
}

#define C2L_INSTANTIATE(T)                                                                                  \
  template class OptimState<T>;                                                                             \
  template class EmaState<T>;                                                                               \
  template class Pretrainer<T>;                                                                             \
  template class AdaptTrainer<T>;                                                                           \
  template NoisedBatch<T> draw_batch(const TrainData&, std::size_t, const NoiseSchedule&, Rng&, bool, double); \
  template double loss_backward(const EpsNet<T>&, const FilmAdapter<T>*, const NoisedBatch<T>&,            \
                                const NoiseSchedule&, const LossConfig&, double);

C2L_INSTANTIATE(float)
C2L_INSTANTIATE(double)
#undef C2L_INSTANTIATE

}  // namespace c2l
