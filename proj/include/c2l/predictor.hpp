#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "c2l/data.hpp"
#include "c2l/train.hpp"
#include "c2l/unet.hpp"

namespace c2l {

// Patch -> gene-profile regressor: conv stages (3x3 conv, GroupNorm, SiLU;
// every stage after the first halves the resolution), global average pool,
// linear head.
struct RegressorConfig {
  int in_channels = 3;
  int image_size = 16;
  std::vector<int> channels{16, 32, 64, 64};
  int norm_groups = 8;
  int out_dim = 32;

  void validate() const;
  io::json to_json() const;
  static RegressorConfig from_json(const io::json& j);
};

template <typename T>
class Regressor {
 public:
  Regressor(RegressorConfig cfg, std::uint64_t seed);

  const RegressorConfig& config() const { return cfg_; }
  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }

  // x: [N, C, S, S] -> [N, out_dim]
  BasicTensor<T> forward(const BasicTensor<T>& x) const;

 private:
  RegressorConfig cfg_;
  ParameterStore<T> store_;
  std::vector<BasicTensor<T>> conv_w_, conv_b_, norm_w_, norm_b_;
  BasicTensor<T> head_w_, head_b_;
};

enum class CotrainMode { RealPlusSynthetic, SyntheticOnly };
const char* to_string(CotrainMode m);

struct CotrainRecord {
  const SpotRecord* spot = nullptr;
  bool synthetic = false;
};

// Training set D_real + D_syn over borrowed records (the datasets must
// outlive it). With ratio k, each real record contributes exactly k synthetic
// records conditioned on its profile; k = 0 is real-only.
struct CotrainSet {
  Shape patch_shape;
  std::size_t gene_dim = 0;
  std::vector<CotrainRecord> records;
  std::size_t n_real = 0;
  std::size_t n_synthetic = 0;
  // Real spot ids whose data or profiles entered training.
  std::vector<std::string> training_spots;
};

CotrainSet build_cotrain_set(const SlideDataset& real, const SlideDataset* synthetic, int k,
                             CotrainMode mode = CotrainMode::RealPlusSynthetic);

struct PredictorTrainConfig {
  int epochs = 40;
  int batch_size = 32;
  double lr = 1e-3;
  double lr_floor = 1e-5;
  double warmup_fraction = 0.05;
  double weight_decay = 1e-4;

  void validate() const;
  io::json to_json() const;
  static PredictorTrainConfig from_json(const io::json& j);
};

struct PredictorRun {
  std::vector<double> epoch_loss;  // mean L1 per epoch
  int steps = 0;
};

// L1 regression with AdamW and warmup + cosine decay; records are reshuffled
// every epoch from `seed`.
PredictorRun train_predictor(Regressor<float>& model, const CotrainSet& set, const PredictorTrainConfig& cfg,
                             std::uint64_t seed);

struct MaeReport {
  std::vector<double> per_gene;
  double aggregate = 0;
  std::size_t count = 0;
  io::json to_json() const;
};

// Per-gene mean |pred - truth| over n rows of width d, and their mean.
MaeReport mae(std::span<const float> pred, std::span<const float> truth, std::size_t n, std::size_t d);

std::vector<float> predict(const Regressor<float>& model, const SlideDataset& ds, std::size_t batch = 64);

// Test spots must be disjoint from every spot that entered `trained_on`.
MaeReport evaluate_mae(const Regressor<float>& model, const SlideDataset& test, const CotrainSet* trained_on);

}  // namespace c2l
