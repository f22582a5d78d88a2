#pragma once

#include <limits>
#include <span>
#include <vector>

#include "c2l/io.hpp"
#include "c2l/tensor.hpp"

namespace c2l {

// Variance schedule. Timesteps are 1-based: t in [1, T]; alpha_bar(0) == 1.
// Tables are kept in double regardless of model precision.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  int steps() const { return static_cast<int>(betas_.size()); }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }

  double beta(int t) const { return betas_.at(index(t)); }
  double alpha(int t) const { return alphas_.at(index(t)); }
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars_.at(index(t)); }
  double snr(int t) const;
  // beta~_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t; zero at t = 1.
  double posterior_variance(int t) const;

  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alphas() const { return alphas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }

  void check_timestep(int t) const;

  io::json to_json() const;
  static NoiseSchedule from_json(const io::json& j);

  friend NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end);

 private:
  std::size_t index(int t) const;

  double beta_start_ = 0;
  double beta_end_ = 0;
  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
};

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end);

// Linear schedule over `steps` whose endpoints are the 1e-4 -> 0.02 pair
// scaled by a common factor chosen so alpha_bar_T equals the value of the
// 1000-step schedule.
NoiseSchedule make_desk_schedule(int steps = 200);

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps with one timestep per sample
// (first axis). Produces a constant tensor.
template <typename T>
BasicTensor<T> q_sample(const BasicTensor<T>& x0, std::span<const int> timesteps, const BasicTensor<T>& eps,
                        const NoiseSchedule& sched);

template <typename T>
BasicTensor<T> q_sample(const BasicTensor<T>& x0, int t, const BasicTensor<T>& eps, const NoiseSchedule& sched);

template <typename T>
struct PosteriorStats {
  std::vector<T> mean;
  double variance = 0;
};

// Mean and variance of q(x_{t-1} | x_t, x_0).
template <typename T>
PosteriorStats<T> posterior(std::span<const T> x0, std::span<const T> xt, int t, const NoiseSchedule& sched);

struct LossConfig {
  double snr_clip = 5.0;  // +inf disables weighting
};

// min(SNR_t, clip) / SNR_t
double min_snr_weight(int t, const LossConfig& cfg, const NoiseSchedule& sched);

// Per-sample min-SNR-weighted epsilon MSE, averaged over the batch.
template <typename T>
BasicTensor<T> diffusion_loss(const BasicTensor<T>& eps_true, const BasicTensor<T>& eps_pred,
                              std::span<const int> timesteps, const LossConfig& cfg, const NoiseSchedule& sched);

}  // namespace c2l
