#include "c2l/diffusion.hpp"

#include <cmath>

#include "c2l/ops.hpp"

namespace c2l {

std::size_t NoiseSchedule::index(int t) const {
  check_timestep(t);
  return static_cast<std::size_t>(t - 1);
}

void NoiseSchedule::check_timestep(int t) const {
  if (t < 1 || t > steps()) {
    fail(ErrorKind::Contract, "timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
  }
}

double NoiseSchedule::snr(int t) const {
  const double ab = alpha_bar(t);
  return ab / (1.0 - ab);
}

double NoiseSchedule::posterior_variance(int t) const {
  require(t >= 1, ErrorKind::Contract, "posterior variance undefined for t = 0");
  if (t == 1) return 0.0;
  return (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t)) * beta(t);
}

io::json NoiseSchedule::to_json() const {
  return {{"kind", "linear"}, {"steps", steps()}, {"beta_start", beta_start_}, {"beta_end", beta_end_}};
}

NoiseSchedule NoiseSchedule::from_json(const io::json& j) {
  require(j.value("kind", "linear") == "linear", ErrorKind::Config, "only linear schedules are supported");
  return make_linear_schedule(j.at("steps").get<int>(), j.at("beta_start").get<double>(),
                              j.at("beta_end").get<double>());
}

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
  require(steps >= 1, ErrorKind::Config, "schedule needs at least one step");
  require(beta_start > 0 && beta_start <= beta_end && beta_end < 1, ErrorKind::Config,
          "schedule requires 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.beta_start_ = beta_start;
  s.beta_end_ = beta_end;
  s.betas_.resize(static_cast<std::size_t>(steps));
  s.alphas_.resize(s.betas_.size());
  s.alpha_bars_.resize(s.betas_.size());
  double abar = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    const double b = beta_start + (beta_end - beta_start) * frac;
    s.betas_[i] = b;
    s.alphas_[i] = 1.0 - b;
    abar *= s.alphas_[i];
    s.alpha_bars_[i] = abar;
  }
  return s;
}

NoiseSchedule make_desk_schedule(int steps) {
  constexpr double kStart = 1e-4, kEnd = 0.02;
  const double target = std::log(make_linear_schedule(1000, kStart, kEnd).alpha_bar(1000));
  auto log_abar = [&](double c) { return std::log(make_linear_schedule(steps, kStart * c, kEnd * c).alpha_bar(steps)); };
  // log abar_T is decreasing in the scale factor.
  double lo = 1e-3, hi = 0.999 / kEnd;
  require(log_abar(lo) >= target && log_abar(hi) <= target, ErrorKind::Config,
          "cannot match the reference alpha_bar with " + std::to_string(steps) + " steps");
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (log_abar(mid) > target ? lo : hi) = mid;
  }
  const double c = 0.5 * (lo + hi);
  return make_linear_schedule(steps, kStart * c, kEnd * c);
}

template <typename T>
BasicTensor<T> q_sample(const BasicTensor<T>& x0, std::span<const int> timesteps, const BasicTensor<T>& eps,
                        const NoiseSchedule& sched) {
  require(x0.shape() == eps.shape(), ErrorKind::Dimension,
          "q_sample: noise shape " + shape_str(eps.shape()) + " vs data " + shape_str(x0.shape()));
  require(x0.rank() >= 1 && x0.dim(0) == timesteps.size(), ErrorKind::Dimension,
          "q_sample: one timestep per sample required");
  const std::size_t N = timesteps.size();
  const std::size_t M = N ? x0.numel() / N : 0;
  std::vector<T> out(x0.numel());
  auto xv = x0.values(), ev = eps.values();
  for (std::size_t n = 0; n < N; ++n) {
    sched.check_timestep(timesteps[n]);
    const double ab = sched.alpha_bar(timesteps[n]);
    const T a = static_cast<T>(std::sqrt(ab));
    const T b = static_cast<T>(std::sqrt(1.0 - ab));
    for (std::size_t j = 0; j < M; ++j) out[n * M + j] = a * xv[n * M + j] + b * ev[n * M + j];
  }
  return BasicTensor<T>(x0.shape(), std::move(out));
}

template <typename T>
BasicTensor<T> q_sample(const BasicTensor<T>& x0, int t, const BasicTensor<T>& eps, const NoiseSchedule& sched) {
  const std::size_t N = x0.rank() >= 1 ? x0.dim(0) : 1;
  std::vector<int> ts(N, t);
  if (x0.rank() == 0) {
    auto r = q_sample(BasicTensor<T>(Shape{1}, {x0.item()}), std::span<const int>(ts),
                      BasicTensor<T>(Shape{1}, {eps.item()}), sched);
    return BasicTensor<T>(Shape{}, {r.item()});
  }
  return q_sample(x0, std::span<const int>(ts), eps, sched);
}

template <typename T>
PosteriorStats<T> posterior(std::span<const T> x0, std::span<const T> xt, int t, const NoiseSchedule& sched) {
  require(t >= 1, ErrorKind::Contract, "posterior requires t >= 1");
  sched.check_timestep(t);
  require(x0.size() == xt.size(), ErrorKind::Dimension, "posterior: x0 and x_t sizes differ");
  const double ab = sched.alpha_bar(t), ab_prev = sched.alpha_bar(t - 1), beta = sched.beta(t);
  const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
  const double ct = std::sqrt(sched.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab);
  PosteriorStats<T> out;
  out.mean.resize(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i)
    out.mean[i] = static_cast<T>(c0 * static_cast<double>(x0[i]) + ct * static_cast<double>(xt[i]));
  out.variance = sched.posterior_variance(t);
  return out;
}

double min_snr_weight(int t, const LossConfig& cfg, const NoiseSchedule& sched) {
  require(cfg.snr_clip > 0, ErrorKind::Config, "snr_clip must be positive");
  const double snr = sched.snr(t);
  if (std::isinf(cfg.snr_clip)) return 1.0;
  return std::min(snr, cfg.snr_clip) / snr;
}

template <typename T>
BasicTensor<T> diffusion_loss(const BasicTensor<T>& eps_true, const BasicTensor<T>& eps_pred,
                              std::span<const int> timesteps, const LossConfig& cfg, const NoiseSchedule& sched) {
  std::vector<T> w(timesteps.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(min_snr_weight(timesteps[i], cfg, sched));
  return ops::weighted_mse(eps_pred, eps_true, std::span<const T>(w));
}

#define C2L_INSTANTIATE(T)                                                                                 \
  template BasicTensor<T> q_sample(const BasicTensor<T>&, std::span<const int>, const BasicTensor<T>&,     \
                                   const NoiseSchedule&);                                                  \
  template BasicTensor<T> q_sample(const BasicTensor<T>&, int, const BasicTensor<T>&, const NoiseSchedule&); \
  template PosteriorStats<T> posterior(std::span<const T>, std::span<const T>, int, const NoiseSchedule&);  \
  template BasicTensor<T> diffusion_loss(const BasicTensor<T>&, const BasicTensor<T>&, std::span<const int>, \
                                         const LossConfig&, const NoiseSchedule&);

C2L_INSTANTIATE(float)
C2L_INSTANTIATE(double)
#undef C2L_INSTANTIATE

}  // namespace c2l
