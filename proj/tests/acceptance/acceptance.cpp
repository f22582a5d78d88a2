// Acceptance suite: one PASS/FAIL line per criterion.
//
// Criteria 4, 6 and 9-12 run the desk pipeline (toy central slide, one
// pretrained central model, three local slides at two sampling fractions).
// The central checkpoint is cached under --work and reused while its
// configuration is unchanged; its measured training time still counts
// towards the criterion 9 runtime.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "c2l/checkpoint.hpp"
#include "c2l/data.hpp"
#include "c2l/diffusion.hpp"
#include "c2l/io.hpp"
#include "c2l/ops.hpp"
#include "c2l/pipeline.hpp"
#include "c2l/predictor.hpp"
#include "c2l/sampler.hpp"
#include "c2l/train.hpp"
#include "c2l/unet.hpp"

#ifndef C2L_CLI_PATH
#error "C2L_CLI_PATH must point at the CLI binary"
#endif
#ifndef C2L_UNIT_PATH
#error "C2L_UNIT_PATH must point at the unit test binary"
#endif

namespace fs = std::filesystem;
using c2l::io::json;
using namespace c2l;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

class Suite {
 public:
  void run(int id, const std::string& name, const std::function<Outcome()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = body();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    char head[96];
    std::snprintf(head, sizeof head, "[%s] %2d %s", o.pass ? "PASS" : "FAIL", id, name.c_str());
    std::cout << head << " | " << o.detail << " (" << fmt("%.1f", seconds_since(t0)) << " s)" << std::endl;
    failures_ += o.pass ? 0 : 1;
    ++count_;
  }
  int failures() const { return failures_; }
  int count() const { return count_; }

 private:
  int failures_ = 0;
  int count_ = 0;
};

// ------------------------------------------------------------ oracles

// Posterior q(x_{t-1} | x_t, x0) at x0_hat(x_t, eps), from the betas alone, in long double.
struct Posterior {
  long double mean;
  long double var;
};

Posterior posterior_oracle(long double x, long double eps, int t, const NoiseSchedule& s) {
  long double ab = 1, ab_prev = 1;
  for (int k = 1; k <= t; ++k) {
    ab_prev = ab;
    ab *= 1.0L - static_cast<long double>(s.betas()[static_cast<std::size_t>(k - 1)]);
  }
  const long double beta = s.betas()[static_cast<std::size_t>(t - 1)];
  const long double x0 = (x - std::sqrt(1 - ab) * eps) / std::sqrt(ab);
  const long double mean =
      std::sqrt(ab_prev) * beta / (1 - ab) * x0 + std::sqrt(1 - beta) * (1 - ab_prev) / (1 - ab) * x;
  return {mean, (1 - ab_prev) / (1 - ab) * beta};
}

template <typename T>
BasicTensor<T> randn(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(scale * rng.normal());
  return BasicTensor<T>(std::move(shape), std::move(v));
}

template <typename T>
bool bit_equal(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return a.numel() == b.numel() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

// Fourth-order central difference.
double central_difference(const std::function<double(double)>& f, double x, double h) {
  return (8 * (f(x + h) - f(x - h)) - (f(x + 2 * h) - f(x - 2 * h))) / (12 * h);
}

// --------------------------------------------------- property criteria

Outcome forward_moments() {
  const auto sched = make_desk_schedule();
  Rng rng(11);
  const std::size_t n = 10000;
  const auto x0 = randn<double>({n, 1}, rng), eps = randn<double>({n, 1}, rng);
  const auto xt = q_sample(x0, sched.steps(), eps, sched);
  double m = 0, v = 0;
  for (double x : xt.values()) m += x;
  m /= n;
  for (double x : xt.values()) v += (x - m) * (x - m);
  v /= n - 1;
  return {v >= 0.98 && v <= 1.02 && std::abs(m) < 0.02,
          "T=" + std::to_string(sched.steps()) + ", Var[x_T]=" + fmt("%.4f", v) + ", E[x_T]=" + fmt("%+.4f", m)};
}

Outcome gradient_fidelity() {
  EpsNet<double> net(EpsNetConfig{}, 1);
  FilmAdapter<double> adapter(AdapterConfig{}, net.film_targets(), 2);
  Rng rng(3);
  for (auto& p : adapter.parameters().items())
    for (auto& v : p.tensor.mutable_values()) v += 0.05 * rng.normal();
  const auto x = randn<double>({2, 3, 16, 16}, rng), target = randn<double>({2, 3, 16, 16}, rng);
  const auto g = randn<double>({2, 32}, rng);
  const std::vector<int> ts{7, 150};
  auto loss = [&] {
    auto d = ops::sub(eps_forward<double>(net, &adapter, x, ts, &g), target);
    return ops::mean(ops::mul(d, d));
  };

  std::vector<Parameter<double>*> params;
  std::size_t total = 0;
  for (auto& p : net.parameters().items()) params.push_back(&p);
  for (auto& p : adapter.parameters().items()) params.push_back(&p);
  for (auto* p : params) {
    p->tensor.zero_grad();
    total += p->tensor.numel();
  }
  loss().backward();

  // One entry of every tensor, then uniform draws over all scalars.
  std::vector<std::pair<std::size_t, std::size_t>> picks;
  for (std::size_t k = 0; k < params.size(); ++k) picks.emplace_back(k, rng.below(params[k]->tensor.numel()));
  while (picks.size() < params.size() + 200) {
    std::size_t flat = rng.below(total), k = 0;
    while (flat >= params[k]->tensor.numel()) flat -= params[k++]->tensor.numel();
    picks.emplace_back(k, flat);
  }
  double worst = 0;
  for (const auto& [k, i] : picks) {
    auto& t = params[k]->tensor;
    const double analytic = t.has_grad() ? t.grad()[i] : 0.0;
    auto vals = t.mutable_values();
    const double keep = vals[i];
    double numeric;
    {
      NoGradGuard ng;
      numeric = central_difference(
          [&](double v) {
            vals[i] = v;
            return loss().item();
          },
          keep, 1e-3);
    }
    vals[i] = keep;
    worst = std::max(worst, std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), 1e-8));
  }
  return {worst <= 1e-5, std::to_string(picks.size()) + " parameters across " + std::to_string(params.size()) +
                             " tensors, max relative error " + fmt("%.2e", worst)};
}

Outcome identity_at_init() {
  EpsNet<float> net(EpsNetConfig{}, 5);
  FilmAdapter<float> adapter(AdapterConfig{}, net.film_targets(), 6);
  Rng rng(7);
  NoGradGuard ng;
  int identical = 0;
  for (int chunk = 0; chunk < 5; ++chunk) {
    const auto x = randn<float>({20, 3, 16, 16}, rng);
    const auto g = randn<float>({20, 32}, rng);
    std::vector<int> ts(20);
    for (auto& t : ts) t = static_cast<int>(1 + rng.below(200));
    const auto c = eps_forward<float>(net, &adapter, x, ts, &g);
    const auto u = eps_forward<float>(net, &adapter, x, ts, nullptr);
    const auto plain = eps_forward<float>(net, nullptr, x, ts, nullptr);
    const std::size_t P = 3 * 16 * 16;
    for (std::size_t n = 0; n < 20; ++n) {
      const auto cb = c.values().begin() + n * P;
      identical += std::equal(cb, cb + P, u.values().begin() + n * P) &&
                   std::equal(cb, cb + P, plain.values().begin() + n * P);
    }
  }
  return {identical == 100, std::to_string(identical) + "/100 inputs bit-identical (conditional, null, no adapter)"};
}

Outcome guidance_algebra() {
  EpsNet<double> net(EpsNetConfig{}, 8);
  FilmAdapter<double> adapter(AdapterConfig{}, net.film_targets(), 9);
  Rng rng(10);
  for (auto& p : adapter.parameters().items())
    for (auto& v : p.tensor.mutable_values()) v += 0.05 * rng.normal();
  NoGradGuard ng;
  bool exact = true;
  double worst_affine = 0;
  for (int chunk = 0; chunk < 4; ++chunk) {
    const auto x = randn<double>({25, 3, 16, 16}, rng);
    const auto g = randn<double>({25, 32}, rng);
    const int t = static_cast<int>(1 + rng.below(200));
    const std::vector<int> ts(25, t);
    const auto c = eps_forward<double>(net, &adapter, x, ts, &g);
    const auto u = eps_forward<double>(net, nullptr, x, ts, nullptr);
    const auto g0 = guided_eps_fn<double>(net, &adapter, &g, 0.0)(x, t);
    const auto g1 = guided_eps_fn<double>(net, &adapter, &g, 1.0)(x, t);
    const auto g3 = guided_eps_fn<double>(net, &adapter, &g, 3.0)(x, t);
    exact &= bit_equal(g0, u) && bit_equal(g1, c);
    for (std::size_t i = 0; i < g3.numel(); ++i) exact &= g3.values()[i] == u.values()[i] + 3.0 * (c.values()[i] - u.values()[i]);
    for (double s : {0.5, 2.0, 5.0, 7.5}) {
      const auto gs = guided_eps_fn<double>(net, &adapter, &g, s)(x, t);
      for (std::size_t i = 0; i < gs.numel(); ++i) {
        const double affine = (1 - s) * g0.values()[i] + s * g1.values()[i];
        worst_affine = std::max(worst_affine, std::abs(gs.values()[i] - affine));
      }
    }
  }
  return {exact && worst_affine <= 1e-12, std::string("s in {0,1,3} ") + (exact ? "exact" : "NOT exact") +
                                              ", affine residual over 100 inputs " + fmt("%.2e", worst_affine)};
}

Outcome ddim_ancestral_consistency() {
  const auto sched = make_desk_schedule();
  SamplerConfig cfg;
  cfg.method = SamplerMethod::Ddim;
  cfg.ddim_steps = sched.steps();
  cfg.eta = 1.0;
  const EpsFn<double> stub = [](const Tensor64& x, int t) {
    Rng r(5000 + static_cast<std::uint64_t>(t));
    return randn<double>(x.shape(), r);
  };
  double worst_mean = 0, worst_var = 0;
  int steps = 0;
  bool consecutive = true;
  const StepObserver<double> check = [&](const StepRecord<double>& r) {
    ++steps;
    consecutive &= r.t_prev == r.t - 1;
    worst_var = std::max(worst_var, static_cast<double>(std::abs(r.variance - posterior_oracle(0, 0, r.t, sched).var)));
    for (std::size_t i = 0; i < r.x.size(); ++i)
      worst_mean = std::max(worst_mean,
                            static_cast<double>(std::abs(r.mean[i] - posterior_oracle(r.x[i], r.eps[i], r.t, sched).mean)));
  };
  const auto seeds = sample_seeds(3, 4);
  sample<double>(stub, {3, 4, 4}, seeds, sched, cfg, check, false);
  return {steps == sched.steps() && consecutive && worst_mean <= 1e-10 && worst_var <= 1e-10,
          std::to_string(steps) + " steps, max mean error " + fmt("%.2e", worst_mean) + ", max variance error " +
              fmt("%.2e", worst_var)};
}

// Small MLP eps-predictor for scalar data: input x and a sinusoidal timestep embedding.
class ScalarEpsNet {
 public:
  explicit ScalarEpsNet(std::uint64_t seed) {
    Rng rng(seed);
    auto dense = [&](const std::string& name, std::size_t out, std::size_t in) {
      std::vector<float> w(out * in);
      for (auto& v : w) v = static_cast<float>(rng.normal() / std::sqrt(double(in)));
      store_.add(name + ".weight", Partition::Backbone, {out, in}, std::move(w));
      store_.add(name + ".bias", Partition::Backbone, {out}, std::vector<float>(out, 0.f));
    };
    dense("in_x", kWidth, 1);
    dense("in_t", kWidth, kTemb);
    dense("h1", kWidth, kWidth);
    dense("h2", kWidth, kWidth);
    dense("out", 1, kWidth);
  }

  Tensor forward(const Tensor& x, std::span<const int> ts) const {
    const auto& p = store_.items();
    auto layer = [&](std::size_t k, const Tensor& in) { return ops::linear(in, p[2 * k].tensor, &p[2 * k + 1].tensor); };
    const auto temb = ops::embed_timestep<float>(ts, kTemb);
    auto h = ops::silu(ops::add(layer(0, x), layer(1, temb)));
    h = ops::silu(layer(2, h));
    h = ops::silu(layer(3, h));
    return layer(4, h);
  }

  std::vector<Parameter<float>*> parameters() {
    std::vector<Parameter<float>*> out;
    for (auto& p : store_.items()) out.push_back(&p);
    return out;
  }

 private:
  static constexpr std::size_t kWidth = 64;
  static constexpr std::size_t kTemb = 32;
  ParameterStore<float> store_;
};

Outcome two_point_diffusion() {
  const auto sched = make_desk_schedule();
  ScalarEpsNet net(21);
  OptimState<float> optim(net.parameters(), AdamWConfig{0.9, 0.999, 1e-8, 0.0});
  Rng rng(22);
  const std::size_t batch = 256;
  const int steps = 4000;
  const LrSchedule lr{LrKind::WarmupCosine, 3e-3, 1e-4, 100, steps};
  const auto t0 = std::chrono::steady_clock::now();
  for (int s = 0; s < steps; ++s) {
    std::vector<float> x0(batch), eps(batch);
    std::vector<int> ts(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      x0[i] = rng.below(2) == 0 ? -0.8f : 0.8f;
      eps[i] = static_cast<float>(rng.normal());
      ts[i] = static_cast<int>(1 + rng.below(static_cast<std::uint64_t>(sched.steps())));
    }
    const Tensor e({batch, 1}, eps);
    const auto xt = q_sample(Tensor({batch, 1}, x0), std::span<const int>(ts), e, sched);
    optim.zero_grad();
    const auto d = ops::sub(net.forward(xt, ts), e);
    ops::mean(ops::mul(d, d)).backward();
    optim.step(lr_at(s, lr));
  }
  const double train_s = seconds_since(t0);

  SamplerConfig cfg;
  cfg.method = SamplerMethod::Ancestral;
  const EpsFn<float> fn = [&](const Tensor& x, int t) {
    const std::vector<int> ts(x.shape()[0], t);
    return net.forward(x, ts);
  };
  NoGradGuard ng;
  const auto out = sample<float>(fn, {1}, sample_seeds(23, 500), sched, cfg);
  int near = 0;
  for (float v : out.values()) near += std::min(std::abs(v - 0.8f), std::abs(v + 0.8f)) <= 0.15f;
  const double frac = near / 500.0;
  return {frac >= 0.9 && train_s <= 120, fmt("%.1f%%", 100 * frac) + " of 500 samples within 0.15 of a mode, training " +
                                             fmt("%.1f s", train_s)};
}

// ------------------------------------------------- protocol exactness

template <typename T>
NoisedBatch<T> slice(const NoisedBatch<T>& b, std::size_t begin, std::size_t end) {
  const std::size_t P = b.x0.numel() / b.x0.shape()[0];
  Shape s = b.x0.shape();
  s[0] = end - begin;
  auto cut = [&](const BasicTensor<T>& t) {
    return BasicTensor<T>(s, std::vector<T>(t.values().begin() + begin * P, t.values().begin() + end * P));
  };
  NoisedBatch<T> out;
  out.x0 = cut(b.x0);
  out.eps = cut(b.eps);
  out.timesteps.assign(b.timesteps.begin() + begin, b.timesteps.begin() + end);
  return out;
}

std::vector<double> flat_grads(const std::vector<Parameter<double>*>& params) {
  std::vector<double> out;
  for (auto* p : params) {
    if (p->tensor.has_grad()) {
      out.insert(out.end(), p->tensor.grad().begin(), p->tensor.grad().end());
    } else {
      out.insert(out.end(), p->tensor.numel(), 0.0);
    }
  }
  return out;
}

std::string protocol_exactness(const SlideDataset& slide, std::vector<std::string>& failed) {
  std::ostringstream detail;
  // split_sparse: disjoint, exhaustive, exact size, seed-deterministic.
  int split_cases = 0;
  for (std::size_t n : {400, 1000, 2000})
    for (double f : {0.05, 0.1, 0.25, 0.5})
      for (std::uint64_t seed : {1, 2, 3}) {
        const auto s = split_sparse(n, f, seed);
        std::vector<std::size_t> all = s.adaptation;
        all.insert(all.end(), s.test.begin(), s.test.end());
        std::sort(all.begin(), all.end());
        std::vector<std::size_t> expect(n);
        std::iota(expect.begin(), expect.end(), 0);
        const bool ok = all == expect && s.adaptation.size() == static_cast<std::size_t>(std::llround(f * n)) &&
                        split_sparse(n, f, seed).adaptation == s.adaptation;
        if (!ok) failed.push_back("split n=" + std::to_string(n));
        ++split_cases;
      }
  detail << split_cases << " splits";

  // Preprocessing leakage: rewriting every test spot leaves the fitted stats unchanged.
  const auto split = split_sparse(slide.size(), 0.25, 4);
  const auto stats = fit_gene_stats(slide, split.adaptation, 16);
  auto scrambled = slide;
  Rng rng(5);
  for (auto i : split.test)
    for (auto& g : scrambled.spots[i].genes) g = static_cast<float>(rng.below(5000));
  const auto stats2 = fit_gene_stats(scrambled, split.adaptation, 16);
  if (stats2.selected != stats.selected || stats2.mean != stats.mean || stats2.std != stats.std)
    failed.push_back("stats depend on test spots");
  // Evaluating on a spot the predictor trained on is refused.
  const auto adapt = preprocess_genes(slide, split.adaptation, stats);
  const auto set = build_cotrain_set(adapt, nullptr, 0);
  RegressorConfig rc;
  rc.out_dim = 16;
  const Regressor<float> reg(rc, 1);
  bool refused = false;
  try {
    evaluate_mae(reg, adapt, &set);
  } catch (const Error& e) {
    refused = e.kind() == ErrorKind::Integrity;
  }
  if (!refused) failed.push_back("leakage guard");
  detail << ", leakage guards";

  // Top-K equals a full sort by adaptation-subset mean (ties to lower index).
  for (std::size_t K : {1, 4, 8, 16, 32}) {
    const auto st = fit_gene_stats(slide, split.adaptation, K);
    std::vector<std::pair<double, std::size_t>> by_mean;
    for (std::size_t g = 0; g < slide.gene_dim(); ++g) {
      double m = 0;
      for (auto i : split.adaptation) m += slide.spots[i].genes[g];
      by_mean.emplace_back(-m / static_cast<double>(split.adaptation.size()), g);
    }
    std::sort(by_mean.begin(), by_mean.end());
    std::set<std::size_t> oracle;
    for (std::size_t k = 0; k < K; ++k) oracle.insert(by_mean[k].second);
    if (std::set<std::size_t>(st.selected.begin(), st.selected.end()) != oracle)
      failed.push_back("top-" + std::to_string(K));
  }
  detail << ", top-K for K in {1,4,8,16,32}";

  // Gradient accumulation at 64-bit: 4 micro-batches of 2 versus one batch of 8.
  {
    EpsNetConfig nc;
    nc.image_size = 8;
    nc.base_channels = 8;
    nc.channel_mults = {1, 2};
    nc.norm_groups = 4;
    nc.time_embed_dim = 8;
    EpsNet<double> net(nc, 5);
    TrainData data;
    data.image_shape = {3, 8, 8};
    data.count = 6;
    data.images.resize(6 * data.image_numel());
    Rng r(2);
    for (auto& v : data.images) v = static_cast<float>(r.uniform(-1, 1));
    const auto sched = make_desk_schedule();
    Rng br(9);
    const auto big = draw_batch<double>(data, 8, sched, br, false, 0.0);
    auto params = partition_parameters<double>(net, nullptr).backbone;
    const LossConfig loss{5.0};
    for (auto* p : params) p->tensor.zero_grad();
    const double full = loss_backward<double>(net, nullptr, big, sched, loss, 1.0);
    const auto g_full = flat_grads(params);
    for (auto* p : params) p->tensor.zero_grad();
    double acc = 0;
    for (std::size_t a = 0; a < 4; ++a)
      acc += loss_backward<double>(net, nullptr, slice(big, 2 * a, 2 * a + 2), sched, loss, 0.25);
    const auto g_acc = flat_grads(params);
    double worst = std::abs(acc / 4 - full) / std::abs(full);
    for (std::size_t i = 0; i < g_full.size(); ++i)
      worst = std::max(worst, std::abs(g_full[i] - g_acc[i]) / std::max(std::abs(g_full[i]) + std::abs(g_acc[i]), 1e-8));
    if (worst > 1e-5) failed.push_back("accumulation " + fmt("%.2e", worst));
    detail << ", accumulation rel " << fmt("%.1e", worst);
  }

  // EMA: after k updates towards constant parameters the residual is decay^k times the initial gap.
  {
    ParameterStore<double> store;
    store.add("w", Partition::Backbone, {4}, {1.0, -2.0, 0.5, 3.0});
    auto& p = store.items()[0];
    const double d = 0.995;
    const int k = 500;
    EmaState<double> ema({&p}, d);
    const std::vector<double> s0(p.tensor.values().begin(), p.tensor.values().end());
    const std::vector<double> target{0.0, 1.0, -1.0, 2.5};
    std::copy(target.begin(), target.end(), p.tensor.mutable_values().begin());
    for (int i = 0; i < k; ++i) ema.update();
    double worst = 0;
    for (std::size_t i = 0; i < 4; ++i)
      worst = std::max(worst, std::abs((ema.shadow(0)[i] - target[i]) - std::pow(d, k) * (s0[i] - target[i])));
    if (worst > 1e-12) failed.push_back("EMA residual " + fmt("%.2e", worst));
    detail << ", EMA residual " << fmt("%.1e", worst);
  }
  return detail.str();
}

std::vector<char> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int run_process(const std::string& cmd) {
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

// ------------------------------------------------------------ pipeline

// Reduced-step desk profile.
const json kCentralToy = {{"out", "toy/central"}, {"slide_id", "central"}, {"spots", 2000}, {"seed", 1000}, {"preview", false}};
const json kPretrain = {
    {"data", "toy/central"},
    {"out", "central"},
    {"seed", 0},
    {"train", {{"steps", 4500}, {"batch_size", 32}, {"grad_accum", 1}, {"lr", 2e-3}, {"ema_decay", 0.995}}},
    {"preview", 40}};
constexpr int kAdaptSteps = 300;
const std::vector<int> kSeeds{1, 2, 3};

SamplerConfig synthesis_sampler(std::uint64_t seed, double scale) {
  SamplerConfig sc;
  sc.method = SamplerMethod::Ddim;
  sc.ddim_steps = 50;
  sc.eta = 1.0;
  sc.guidance_scale = scale;
  sc.seed = seed;
  return sc;
}

ToySlideSpec local_spec(int seed) {
  ToySlideSpec s;
  s.slide_id = "local" + std::to_string(seed);
  s.seed = static_cast<std::uint64_t>(seed);
  s.n_spots = 400;
  s.d_genes = 32;
  return s;
}

struct RunResult {
  int seed = 0;
  double fraction = 0;
  std::string center;
  double mae_real = 0;
  double mae_mixed = 0;
  double seconds = 0;
  double improvement() const { return (mae_real - mae_mixed) / mae_real; }
};

class Pipeline {
 public:
  explicit Pipeline(fs::path root) : root_(std::move(root)) {}

  json run(const std::string& cmd, json cfg) {
    if (pipeline::default_config(cmd).contains("force")) cfg["force"] = true;
    return pipeline::run(cmd, cfg);
  }

  // Returns the central training time in seconds, measured when it was trained.
  double ensure_central() {
    const fs::path stamp = root_ / "central.stamp.json";
    const json key = {{"toy", kCentralToy}, {"pretrain", kPretrain}};
    if (fs::exists(stamp)) {
      const auto s = io::read_json(stamp);
      if (s.at("key") == key) {
        try {
          load_model(root_ / "central");
          std::cout << "reusing cached central model (" << fmt("%.0f", s.at("seconds").get<double>())
                    << " s to train)" << std::endl;
          return s.at("seconds");
        } catch (const Error& e) {
          std::cout << "cached central model unusable: " << e.what() << std::endl;
        }
      }
    }
    std::cout << "training the central model (" << kPretrain["train"]["steps"] << " steps)" << std::endl;
    const auto t0 = std::chrono::steady_clock::now();
    run("toydata", kCentralToy);
    run("pretrain", kPretrain);
    const double secs = seconds_since(t0);
    io::write_json(stamp, {{"key", key}, {"seconds", secs}});
    return secs;
  }

  RunResult local_run(int seed, double fraction) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::string slide = "toy/local" + std::to_string(seed);
    const auto spec = local_spec(seed);
    run("toydata", {{"out", slide},
                    {"slide_id", spec.slide_id},
                    {"spots", spec.n_spots},
                    {"genes", spec.d_genes},
                    {"seed", spec.seed},
                    {"preview", false}});
    RunResult r;
    r.seed = seed;
    r.fraction = fraction;
    r.center = "centers/local" + std::to_string(seed) + "_f" + std::to_string(std::lround(fraction * 100));
    run("distribute", {{"central", "central"}, {"data", slide}, {"out", r.center}});
    run("adapt", {{"center", r.center},
                  {"fraction", fraction},
                  {"split_seed", seed},
                  {"seed", seed},
                  {"top_k", 32},
                  {"train", {{"steps", kAdaptSteps}, {"batch_size", 32}, {"grad_accum", 1}, {"lr", 3e-3}, {"ema_decay", 0.99}}}});
    run("generate", {{"center", r.center}, {"k", 10}, {"sampler", synthesis_sampler(100 + seed, 3.0).to_json()}});
    const auto real = run("cotrain", {{"center", r.center}, {"ratio", 0}, {"seed", 3}});
    const auto mixed = run("cotrain", {{"center", r.center}, {"ratio", 10}, {"seed", 3}});
    r.mae_real = real.at("report").at("aggregate_mae");
    r.mae_mixed = mixed.at("report").at("aggregate_mae");
    r.seconds = seconds_since(t0);
    std::cout << "  seed " << seed << " fraction " << fraction << ": MAE real " << fmt("%.4f", r.mae_real)
              << ", real+synthetic " << fmt("%.4f", r.mae_mixed) << " (" << fmt("%+.1f%%", 100 * r.improvement())
              << "), " << fmt("%.0f s", r.seconds) << std::endl;
    return r;
  }

  // Unconditional (s = 0) counterpart of a center's synthesis, one sample per profile.
  fs::path unguided(const RunResult& r) {
    const std::string out = r.center + "/synthetic_s0";
    run("generate", {{"center", r.center}, {"out", out}, {"k", 1}, {"preview", 0},
                     {"sampler", synthesis_sampler(200 + r.seed, 0.0).to_json()}});
    return root_ / out / "syn";
  }

  const fs::path& root() const { return root_; }

 private:
  fs::path root_;
};

double cluster_match(const SlideDataset& syn, const OracleDecoder& oracle) {
  std::size_t ok = 0;
  for (const auto& s : syn.spots) ok += oracle.cluster_from_patch(s.patch) == s.cluster;
  return static_cast<double>(ok) / static_cast<double>(syn.size());
}

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (const auto& p : parts) out += (out.empty() ? "" : ", ") + p;
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  std::string work = C2L_ACCEPTANCE_WORK;
  app.add_option("--work", work, "working directory (the central model is cached here)");
  CLI11_PARSE(app, argc, argv);

  fs::create_directories(work);
  const fs::path root = fs::canonical(work);
  ::setenv("C2L_OUTPUT_ROOT", root.c_str(), 1);
  Pipeline pipe(root);
  double central_s = 0;
  std::vector<RunResult> runs;
  std::string pipeline_error;
  try {
    central_s = pipe.ensure_central();
    for (int seed : kSeeds)
      for (double f : {0.25, 0.05}) runs.push_back(pipe.local_run(seed, f));
  } catch (const std::exception& e) {
    pipeline_error = e.what();
    std::cout << "pipeline failed: " << pipeline_error << std::endl;
  }
  const bool have_runs = runs.size() == 2 * kSeeds.size();
  auto runs_at = [&](double f) {
    std::vector<RunResult> out;
    for (const auto& r : runs)
      if (r.fraction == f) out.push_back(r);
    return out;
  };
  auto need_runs = [&] {
    if (!have_runs) throw std::runtime_error("pipeline did not complete: " + pipeline_error);
  };


  Suite suite;
  suite.run(1, "forward-process moments", [] {
    const auto t0 = std::chrono::steady_clock::now();
    auto o = forward_moments();
    o.pass &= seconds_since(t0) < 10;
    return o;
  });
  suite.run(2, "gradient fidelity", [] {
    const auto t0 = std::chrono::steady_clock::now();
    auto o = gradient_fidelity();
    o.pass &= seconds_since(t0) < 60;
    return o;
  });
  suite.run(3, "identity at initialization", identity_at_init);
  suite.run(4, "freeze invariance", [&] {
    need_runs();
    auto base = load_model(root / "central");
    const auto adapt = read_dataset(root / runs[0].center / "data" / "adapt");
    FilmAdapter<float> adapter(AdapterConfig{static_cast<int>(adapt.gene_dim()), 32}, base.net->film_targets(), 31);
    std::vector<std::vector<float>> before;
    for (const auto& p : adapter.parameters().items()) before.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
    const auto checksum = backbone_checksum(*base.net);
    AdaptConfig ac;
    ac.steps = 200;
    ac.grad_accum = 1;
    ac.lr = 3e-3;
    AdaptTrainer<float> trainer(*base.net, adapter, base.schedule, ac, 32);
    const auto data = to_train_data(adapt);
    for (int s = 0; s < 200; ++s) trainer.step(data);
    const bool frozen = backbone_checksum(*base.net) == checksum;
    std::size_t changed = 0, total = 0, tensors_changed = 0;
    const auto& items = adapter.parameters().items();
    for (std::size_t k = 0; k < items.size(); ++k) {
      std::size_t c = 0;
      for (std::size_t i = 0; i < before[k].size(); ++i) c += items[k].tensor.values()[i] != before[k][i];
      changed += c;
      total += before[k].size();
      tensors_changed += c == before[k].size();
    }
    return Outcome{frozen && changed == total, std::string("backbone checksum ") + (frozen ? "unchanged" : "CHANGED") +
                                                   ", adapter values changed " + std::to_string(changed) + "/" +
                                                   std::to_string(total) + " in " + std::to_string(tensors_changed) +
                                                   "/" + std::to_string(items.size()) + " tensors"};
  });

  suite.run(5, "guidance algebra", guidance_algebra);
  suite.run(6, "DDIM determinism across processes", [&] {
    need_runs();
    const auto center = root / runs[0].center;
    std::vector<fs::path> outs{root / "determinism/a", root / "determinism/b"};
    for (const auto& out : outs) {
      const std::string cmd = std::string(C2L_CLI_PATH) + " generate -q --force --center " + center.string() + " --out " +
                              out.string() + " --k 1 --method ddim --steps 50 --eta 0 --scale 3 --seed 7 --preview 0";
      if (run_process(cmd + " > /dev/null") != 0) return Outcome{false, "generate failed: " + cmd};
    }
    const auto a = file_bytes(outs[0] / "syn.bin"), b = file_bytes(outs[1] / "syn.bin");
    const auto n = read_dataset(outs[0] / "syn").size();
    return Outcome{!a.empty() && a == b, std::to_string(n) + " images, " + std::to_string(a.size()) + " bytes, " +
                                             (a == b ? "bit-identical" : "DIFFERENT")};
  });

  suite.run(7, "DDIM/ancestral consistency", ddim_ancestral_consistency);
  suite.run(8, "1-D two-point diffusion", two_point_diffusion);
  suite.run(9, "real+synthetic beats real-only at 25%", [&] {
    need_runs();
    const auto at = runs_at(0.25);
    int wins = 0;
    double mean_rel = 0, secs = central_s;
    std::string per;
    for (const auto& r : at) {
      wins += r.mae_mixed < r.mae_real;
      mean_rel += r.improvement() / static_cast<double>(at.size());
      secs += r.seconds;
      per += fmt(" %.4f", r.mae_real) + "->" + fmt("%.4f", r.mae_mixed);
    }
    return Outcome{wins == 3 && mean_rel >= 0.05 && secs < 1200,
                   std::to_string(wins) + "/3 seeds," + per + ", mean improvement " + fmt("%.1f%%", 100 * mean_rel) +
                       ", runtime " + fmt("%.0f s", secs) + " incl. central training"};
  });

  suite.run(10, "larger gain at 5% sampling", [&] {
    need_runs();
    const auto lo = runs_at(0.05), hi = runs_at(0.25);
    int wins = 0, larger = 0;
    std::string per;
    for (std::size_t i = 0; i < lo.size(); ++i) {
      wins += lo[i].mae_mixed < lo[i].mae_real;
      larger += lo[i].improvement() > hi[i].improvement();
      per += fmt(" %.1f%%", 100 * lo[i].improvement()) + fmt(" vs %.1f%%", 100 * hi[i].improvement()) + ";";
    }
    return Outcome{wins == 3 && larger >= 2, std::to_string(wins) + "/3 seeds improve at 5%, larger gain in " +
                                                 std::to_string(larger) + "/3 (5% vs 25%:" + per + ")"};
  });

  suite.run(11, "embedding fidelity", [&] {
    need_runs();
    const auto slide = read_dataset(root / "toy/local1");
    const auto syn = read_dataset(root / runs[0].center / "synthetic/syn");
    std::vector<std::vector<float>> real, gen, untrained;
    for (const auto& s : slide.spots) real.push_back(s.patch);
    for (std::size_t i = 0; i < 200; ++i) gen.push_back(syn.spots[i].patch);
    const auto model = load_model(root / "central");
    EpsNet<float> fresh(model.net->config(), 41);
    {
      NoGradGuard ng;
      const auto x = sample<float>(guided_eps_fn<float>(fresh, nullptr, nullptr, 0.0), slide.patch_shape,
                                   sample_seeds(42, 200), model.schedule, synthesis_sampler(42, 0.0));
      const std::size_t P = slide.patch_numel();
      for (std::size_t i = 0; i < 200; ++i)
        untrained.emplace_back(x.values().begin() + i * P, x.values().begin() + (i + 1) * P);
    }
    const double sim = embedding_similarity(real, gen, slide.patch_shape, 0).mean;
    const double base = embedding_similarity(real, untrained, slide.patch_shape, 0).mean;
    return Outcome{sim >= 0.5 && sim - base >= 0.2,
                   "generated " + fmt("%.3f", sim) + ", untrained baseline " + fmt("%.3f", base) + " over 200 patches"};
  });

  suite.run(12, "conditioning effectiveness", [&] {
    need_runs();
    bool ok = true;
    std::string per;
    for (const auto& r : runs_at(0.25)) {
      const OracleDecoder oracle(local_spec(r.seed));
      const double s3 = cluster_match(read_dataset(root / r.center / "synthetic/syn"), oracle);
      const double s0 = cluster_match(read_dataset(pipe.unguided(r)), oracle);
      ok &= s3 >= 0.7 && s3 > s0;
      per += " seed " + std::to_string(r.seed) + fmt(" s=3 %.1f%%", 100 * s3) + fmt(" s=0 %.1f%%;", 100 * s0);
    }
    return Outcome{ok, "oracle cluster match:" + per};
  });

  suite.run(13, "protocol exactness", [] {
    std::vector<std::string> failed;
    auto detail = protocol_exactness(generate_toy_slide(local_spec(1)), failed);
    const auto t0 = std::chrono::steady_clock::now();
    const int rc = run_process(std::string(C2L_UNIT_PATH) + " > /dev/null 2>&1");
    const double unit_s = seconds_since(t0);
    if (rc != 0) failed.push_back("unit suite exit " + std::to_string(rc));
    if (unit_s >= 300) failed.push_back("unit suite too slow");
    detail += ", unit suite " + fmt("%.0f s", unit_s);
    if (!failed.empty()) detail += "; failed: " + join(failed);
    return Outcome{failed.empty(), detail};
  });


  std::cout << suite.count() - suite.failures() << "/" << suite.count() << " criteria passed" << std::endl;
  return suite.failures() == 0 ? 0 : 1;
}
