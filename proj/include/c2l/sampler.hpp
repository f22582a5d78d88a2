#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "c2l/diffusion.hpp"
#include "c2l/unet.hpp"

namespace c2l {

enum class SamplerMethod { Ancestral, Ddim };
const char* to_string(SamplerMethod m);
SamplerMethod sampler_method_from_string(const std::string& s);

struct SamplerConfig {
  SamplerMethod method = SamplerMethod::Ddim;
  int ddim_steps = 50;
  double eta = 0.0;
  double guidance_scale = 3.0;
  std::uint64_t seed = 0;

  void validate(const NoiseSchedule& sched) const;
  io::json to_json() const;
  static SamplerConfig from_json(const io::json& j);
};

// eps_uncond + s * (eps_cond - eps_uncond); s == 0 and s == 1 return the
// corresponding input exactly.
template <typename T>
std::vector<T> guided_epsilon(std::span<const T> eps_cond, std::span<const T> eps_uncond, double s);

// Descending DDIM timesteps with uniform stride, always containing T and 1.
std::vector<int> ddim_timesteps(int T, int steps);

// One reverse step x_t -> x_{t_prev} is Gaussian with
// mean = c_x * x_t + c_eps * eps_hat and the given variance.
struct StepCoefs {
  double c_x = 0;
  double c_eps = 0;
  double variance = 0;
};

// Posterior-mean parameterization with variance beta~_t (t_prev = t - 1).
StepCoefs ancestral_coefs(int t, const NoiseSchedule& sched);
// DDIM update towards t_prev < t (t_prev == 0 is the final, clean step).
StepCoefs ddim_coefs(int t, int t_prev, double eta, const NoiseSchedule& sched);

// Predicts eps for a batch at one shared timestep.
template <typename T>
using EpsFn = std::function<BasicTensor<T>(const BasicTensor<T>& x, int t)>;

// Optional per-step observer, called before noise is added.
template <typename T>
struct StepRecord {
  int t = 0;
  int t_prev = 0;
  std::span<const T> x;
  std::span<const T> eps;
  std::span<const T> mean;
  double variance = 0;
};
template <typename T>
using StepObserver = std::function<void(const StepRecord<T>&)>;

// Samples one image per seed. Sample n draws its starting noise and every
// per-step noise from its own generator seeded with seeds[n], so results do
// not depend on the order of draws across the batch. Output is clamped to
// [-1, 1] after the last step only.
template <typename T>
BasicTensor<T> sample(const EpsFn<T>& eps_fn, const Shape& item_shape, std::span<const std::uint64_t> seeds,
                      const NoiseSchedule& sched, const SamplerConfig& cfg, const StepObserver<T>& observer = {},
                      bool clamp = true);

// Eps predictor for a U-Net with optional gene conditioning and
// classifier-free guidance at scale s. cond: [N, d] aligned with the batch.
// s == 0 runs only the null-condition pass, s == 1 only the conditional one.
template <typename T>
EpsFn<T> guided_eps_fn(const EpsNet<T>& net, const FilmAdapter<T>* adapter, const BasicTensor<T>* cond, double s);

// Per-sample seeds derived from one base seed.
std::vector<std::uint64_t> sample_seeds(std::uint64_t base, std::size_t count, std::uint64_t offset = 0);

}  // namespace c2l
