#pragma once

#include <cstdint>

#include "c2l/checkpoint.hpp"
#include "c2l/data.hpp"
#include "c2l/sampler.hpp"

namespace c2l {

struct SynthesisConfig {
  int k = 10;                // samples per conditioning profile
  SamplerConfig sampler;     // sampler.seed is the base of every per-sample seed
  int gene_dropout = 0;      // genes zeroed in the conditioning copy only
  double jitter = 0.0;       // Gaussian noise std added to the conditioning copy
  int batch_size = 64;

  void validate(const NoiseSchedule& sched) const;
  io::json to_json() const;
  static SynthesisConfig from_json(const io::json& j);
};

// k generated patches per profile in `profiles` (normalized adaptation
// spots). Record i * k + j is "syn-<source id>-<j>", carries the source's
// profile verbatim, its grid position and cluster label, and is sampled from
// seed sample_seeds(sampler.seed, n * k)[i * k + j]. The seeds are listed in
// meta["seeds"].
SlideDataset generate_synthetic_pairs(const LoadedModel& model, const SlideDataset& profiles,
                                      const SynthesisConfig& cfg);

}  // namespace c2l
