#include "c2l/sampler.hpp"

#include <algorithm>
#include <cmath>

#include "c2l/error.hpp"
#include "c2l/rng.hpp"

namespace c2l {

const char* to_string(SamplerMethod m) { return m == SamplerMethod::Ancestral ? "ancestral" : "ddim"; }

SamplerMethod sampler_method_from_string(const std::string& s) {
  if (s == "ancestral") return SamplerMethod::Ancestral;
  if (s == "ddim") return SamplerMethod::Ddim;
  fail(ErrorKind::Config, "unknown sampler method '" + s + "' (expected ancestral or ddim)");
}

void SamplerConfig::validate(const NoiseSchedule& sched) const {
  if (method == SamplerMethod::Ddim) {
    require(ddim_steps >= 1 && ddim_steps <= sched.steps(), ErrorKind::Config,
            "ddim_steps must be in [1, " + std::to_string(sched.steps()) + "], got " + std::to_string(ddim_steps));
  }
  require(eta >= 0, ErrorKind::Config, "eta must be >= 0");
  require(guidance_scale >= 0, ErrorKind::Config, "guidance scale must be >= 0");
}

io::json SamplerConfig::to_json() const {
  return {{"method", to_string(method)},
          {"ddim_steps", ddim_steps},
          {"eta", eta},
          {"guidance_scale", guidance_scale},
          {"seed", seed}};
}

SamplerConfig SamplerConfig::from_json(const io::json& j) {
  SamplerConfig c;
  c.method = sampler_method_from_string(j.value("method", std::string(to_string(c.method))));
  c.ddim_steps = j.value("ddim_steps", c.ddim_steps);
  c.eta = j.value("eta", c.eta);
  c.guidance_scale = j.value("guidance_scale", c.guidance_scale);
  c.seed = j.value("seed", c.seed);
  return c;
}

template <typename T>
std::vector<T> guided_epsilon(std::span<const T> eps_cond, std::span<const T> eps_uncond, double s) {
  require(eps_cond.size() == eps_uncond.size(), ErrorKind::Dimension, "guided_epsilon: size mismatch");
  if (s == 1.0) return {eps_cond.begin(), eps_cond.end()};
  if (s == 0.0) return {eps_uncond.begin(), eps_uncond.end()};
  std::vector<T> out(eps_cond.size());
  const T st = static_cast<T>(s);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps_uncond[i] + st * (eps_cond[i] - eps_uncond[i]);
  return out;
}

std::vector<int> ddim_timesteps(int T, int steps) {
  require(steps >= 1 && steps <= T, ErrorKind::Config, "ddim steps must be in [1, T]");
  if (steps == 1) return {T};
  std::vector<int> ts(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    ts[static_cast<std::size_t>(i)] =
        static_cast<int>(std::lround(T - static_cast<double>(T - 1) * i / (steps - 1)));
  }
  return ts;
}

StepCoefs ancestral_coefs(int t, const NoiseSchedule& sched) {
  sched.check_timestep(t);
  const double a = sched.alpha(t), ab = sched.alpha_bar(t), b = sched.beta(t);
  return {1.0 / std::sqrt(a), -b / (std::sqrt(a) * std::sqrt(1.0 - ab)), sched.posterior_variance(t)};
}

StepCoefs ddim_coefs(int t, int t_prev, double eta, const NoiseSchedule& sched) {
  sched.check_timestep(t);
  require(t_prev >= 0 && t_prev < t, ErrorKind::Contract, "ddim step must move to an earlier timestep");
  const double ab = sched.alpha_bar(t), ab_prev = sched.alpha_bar(t_prev);
  const double var = eta * eta * (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev);
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - var));
  // x0_hat = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)
  const double c_x = std::sqrt(ab_prev) / std::sqrt(ab);
  const double c_eps = -c_x * std::sqrt(1.0 - ab) + dir;
  return {c_x, c_eps, var};
}

std::vector<std::uint64_t> sample_seeds(std::uint64_t base, std::size_t count, std::uint64_t offset) {
  std::vector<std::uint64_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = derive_seed(base, offset + i);
  return out;
}

template <typename T>
BasicTensor<T> sample(const EpsFn<T>& eps_fn, const Shape& item_shape, std::span<const std::uint64_t> seeds,
                      const NoiseSchedule& sched, const SamplerConfig& cfg, const StepObserver<T>& observer,
                      bool clamp) {
  cfg.validate(sched);
  require(!seeds.empty(), ErrorKind::Contract, "sample: no seeds given");
  NoGradGuard ng;
  const std::size_t N = seeds.size(), P = shape_numel(item_shape);
  Shape shape{N};
  shape.insert(shape.end(), item_shape.begin(), item_shape.end());

  std::vector<Rng> rngs;
  rngs.reserve(N);
  for (auto s : seeds) rngs.emplace_back(s);
  Buffer<T> x(N * P);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < P; ++i) x[n * P + i] = static_cast<T>(rngs[n].normal());

  std::vector<int> ts;
  if (cfg.method == SamplerMethod::Ancestral) {
    for (int t = sched.steps(); t >= 1; --t) ts.push_back(t);
  } else {
    ts = ddim_timesteps(sched.steps(), cfg.ddim_steps);
  }

  Buffer<T> mean(N * P);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const int t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
    const BasicTensor<T> xt(shape, x);
    const BasicTensor<T> eps = eps_fn(xt, t);
    require(eps.shape() == shape, ErrorKind::Dimension, "eps predictor returned shape " + shape_str(eps.shape()));
    const StepCoefs c = cfg.method == SamplerMethod::Ancestral ? ancestral_coefs(t, sched)
                                                               : ddim_coefs(t, t_prev, cfg.eta, sched);
    const auto e = eps.values();
    for (std::size_t i = 0; i < N * P; ++i) mean[i] = static_cast<T>(c.c_x * x[i] + c.c_eps * e[i]);
    if (observer) observer({t, t_prev, std::span<const T>(x), e, std::span<const T>(mean), c.variance});
    if (c.variance > 0) {
      const double sd = std::sqrt(c.variance);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < P; ++i)
          x[n * P + i] = static_cast<T>(mean[n * P + i] + sd * rngs[n].normal());
    } else {
      x = mean;
    }
    for (auto v : x) require(std::isfinite(static_cast<double>(v)), ErrorKind::Numeric,
                             "non-finite sample at t = " + std::to_string(t));
  }
  if (clamp)
    for (auto& v : x) v = std::clamp(v, T(-1), T(1));
  return BasicTensor<T>(shape, std::move(x));
}

template <typename T>
EpsFn<T> guided_eps_fn(const EpsNet<T>& net, const FilmAdapter<T>* adapter, const BasicTensor<T>* cond, double s) {
  require(s >= 0, ErrorKind::Config, "guidance scale must be >= 0");
  if (cond != nullptr) {
    require(adapter != nullptr, ErrorKind::Config, "conditional sampling needs a FiLM adapter");
  }
  return [&net, adapter, cond, s](const BasicTensor<T>& x, int t) {
    const std::vector<int> ts(x.shape()[0], t);
    if (cond == nullptr || s == 0.0) return eps_forward<T>(net, nullptr, x, ts, nullptr);
    require(cond->shape()[0] == x.shape()[0], ErrorKind::Dimension, "one gene profile per sample is required");
    const auto ec = eps_forward<T>(net, adapter, x, ts, cond);
    if (s == 1.0) return ec;
    const auto eu = eps_forward<T>(net, nullptr, x, ts, nullptr);
    auto g = guided_epsilon<T>(ec.values(), eu.values(), s);
    return BasicTensor<T>(x.shape(), g);
  };
}

#define C2L_INSTANTIATE(T)                                                                                      \
  template std::vector<T> guided_epsilon(std::span<const T>, std::span<const T>, double);                       \
  template BasicTensor<T> sample(const EpsFn<T>&, const Shape&, std::span<const std::uint64_t>,                 \
                                 const NoiseSchedule&, const SamplerConfig&, const StepObserver<T>&, bool);     \
  template EpsFn<T> guided_eps_fn(const EpsNet<T>&, const FilmAdapter<T>*, const BasicTensor<T>*, double);

C2L_INSTANTIATE(float)
C2L_INSTANTIATE(double)
#undef C2L_INSTANTIATE

}  // namespace c2l
