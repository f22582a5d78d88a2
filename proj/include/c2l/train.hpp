#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "c2l/diffusion.hpp"
#include "c2l/rng.hpp"
#include "c2l/unet.hpp"

namespace c2l {

// ---------------------------------------------------------------- schedules

enum class LrKind { WarmupConstant, WarmupCosine };
const char* to_string(LrKind k);
LrKind lr_kind_from_string(const std::string& s);

struct LrSchedule {
  LrKind kind = LrKind::WarmupConstant;
  double peak = 1e-4;
  double floor = 1e-5;  // cosine only: value at the final step
  int warmup_steps = 0;
  int total_steps = 1;
};

// Linear warmup from 0 at step 0 to `peak` at `warmup_steps`, then constant or
// cosine decay reaching `floor` at step total_steps - 1.
double lr_at(int step, const LrSchedule& s);

// Warmup length for a fraction of the run, rounded to the nearest step.
int warmup_steps_for(double fraction, int total_steps);

// ---------------------------------------------------------------- optimizer

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// AdamW with decoupled weight decay over an explicit parameter list.
// Parameters without a gradient buffer are skipped for that step.
template <typename T>
class OptimState {
 public:
  OptimState(std::vector<Parameter<T>*> params, AdamWConfig cfg);

  void step(double lr);
  void zero_grad();

  int steps_taken() const { return step_; }
  double last_lr() const { return last_lr_; }
  const AdamWConfig& config() const { return cfg_; }
  const std::vector<Parameter<T>*>& params() const { return params_; }

  // Integrity error if any tracked parameter is not tagged `allowed`.
  void require_only(Partition allowed) const;

  std::vector<ParamEntry> to_entries() const;  // "<name>.m", "<name>.v"
  void load_entries(const std::vector<ParamEntry>& entries, int step, double last_lr);

 private:
  std::vector<Parameter<T>*> params_;
  AdamWConfig cfg_;
  std::vector<Buffer<T>> m_, v_;
  int step_ = 0;
  double last_lr_ = 0;
};

// Exponential moving average of a parameter list: shadow <- d*shadow + (1-d)*p.
template <typename T>
class EmaState {
 public:
  EmaState(std::vector<Parameter<T>*> params, double decay);

  void update();
  double decay() const { return decay_; }
  const std::vector<Parameter<T>*>& params() const { return params_; }
  std::span<const T> shadow(std::size_t i) const { return shadow_.at(i); }

  // Writes the shadow values into the tracked parameters.
  void copy_to_params() const;

  std::vector<ParamEntry> to_entries() const;  // same names/partitions as params
  void load_entries(const std::vector<ParamEntry>& entries);

 private:
  std::vector<Parameter<T>*> params_;
  double decay_;
  std::vector<Buffer<T>> shadow_;
};

// ---------------------------------------------------------------- data

// In-memory training examples: images [n, C, S, S] in [-1, 1] and, for
// conditional training, preprocessed gene profiles [n, d].
struct TrainData {
  Shape image_shape;  // [C, S, S]
  std::size_t count = 0;
  std::vector<float> images;
  std::size_t gene_dim = 0;
  std::vector<float> genes;

  std::size_t image_numel() const { return shape_numel(image_shape); }
  void validate(bool need_genes) const;
};

// One micro-batch with its noise draws made explicit, so gradient equivalence
// across batch layouts can be checked.
template <typename T>
struct NoisedBatch {
  BasicTensor<T> x0;
  std::vector<int> timesteps;
  BasicTensor<T> eps;
  BasicTensor<T> genes;   // empty shape when unconditional
  std::vector<T> keep;    // per-sample 1 (keep condition) or 0 (dropped)
  bool conditional() const { return genes.rank() == 2; }
};

// Samples `batch` indices with replacement, uniform t in {1..T}, Gaussian eps
// and (when cond_dropout is given) the per-sample keep mask.
template <typename T>
NoisedBatch<T> draw_batch(const TrainData& data, std::size_t batch, const NoiseSchedule& sched, Rng& rng,
                          bool conditional, double cond_dropout);

// Forward + backward of one micro-batch. The loss is multiplied by `scale`
// before backward (1/A for A-way accumulation); returns the unscaled loss.
template <typename T>
double loss_backward(const EpsNet<T>& net, const FilmAdapter<T>* adapter, const NoisedBatch<T>& batch,
                     const NoiseSchedule& sched, const LossConfig& loss, double scale);

// ---------------------------------------------------------------- loops

struct PretrainConfig {
  int steps = 3000;
  int batch_size = 32;
  int grad_accum = 4;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double snr_clip = 5.0;
  double ema_decay = 0.999;
  double warmup_fraction = 0.0;
  int checkpoint_every = 0;  // 0: only at the end

  void validate() const;
  io::json to_json() const;
  static PretrainConfig from_json(const io::json& j);
};

struct AdaptConfig {
  int steps = 1500;
  int batch_size = 32;
  int grad_accum = 8;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double snr_clip = 5.0;
  double cond_dropout = 0.1;
  double warmup_fraction = 0.03;
  double ema_decay = 0.999;
  int checkpoint_every = 0;

  void validate() const;
  io::json to_json() const;
  static AdaptConfig from_json(const io::json& j);
};

// Histogram of sampled timesteps in `bins` equal-width bins over [1, T].
std::string timestep_histogram(std::span<const int> ts, int T, int bins = 10);

// Central pretraining: unconditional, all backbone parameters trained.
template <typename T>
class Pretrainer {
 public:
  Pretrainer(EpsNet<T>& net, NoiseSchedule sched, PretrainConfig cfg, std::uint64_t seed);

  // One optimizer step over grad_accum micro-batches; returns the mean loss.
  double step(const TrainData& data);

  int step_index() const { return step_; }
  EpsNet<T>& net() { return net_; }
  OptimState<T>& optim() { return optim_; }
  EmaState<T>& ema() { return ema_; }
  Rng& rng() { return rng_; }
  const PretrainConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return sched_; }
  void set_step(int s) { step_ = s; }

 private:
  EpsNet<T>& net_;
  NoiseSchedule sched_;
  PretrainConfig cfg_;
  LrSchedule lr_;
  OptimState<T> optim_;
  EmaState<T> ema_;
  Rng rng_;
  int step_ = 0;
};

// Local adaptation: backbone frozen, only the FiLM adapter is optimized and
// EMA-tracked.
template <typename T>
class AdaptTrainer {
 public:
  AdaptTrainer(EpsNet<T>& net, FilmAdapter<T>& adapter, NoiseSchedule sched, AdaptConfig cfg, std::uint64_t seed);

  double step(const TrainData& data);

  int step_index() const { return step_; }
  EpsNet<T>& net() { return net_; }
  FilmAdapter<T>& adapter() { return adapter_; }
  OptimState<T>& optim() { return optim_; }
  EmaState<T>& ema() { return ema_; }
  Rng& rng() { return rng_; }
  const AdaptConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return sched_; }
  void set_step(int s) { step_ = s; }

 private:
  EpsNet<T>& net_;
  FilmAdapter<T>& adapter_;
  NoiseSchedule sched_;
  AdaptConfig cfg_;
  LrSchedule lr_;
  OptimState<T> optim_;
  EmaState<T> ema_;
  Rng rng_;
  int step_ = 0;
};

}  // namespace c2l
