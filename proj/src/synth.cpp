#include "c2l/synth.hpp"

#include <algorithm>
#include <numeric>

#include "c2l/error.hpp"

namespace c2l {

void SynthesisConfig::validate(const NoiseSchedule& sched) const {
  require(k >= 1, ErrorKind::Config, "synthesis needs k >= 1");
  require(gene_dropout >= 0, ErrorKind::Config, "gene_dropout must be >= 0");
  require(jitter >= 0, ErrorKind::Config, "jitter must be >= 0");
  require(batch_size > 0, ErrorKind::Config, "batch_size must be positive");
  sampler.validate(sched);
}

io::json SynthesisConfig::to_json() const {
  return {{"k", k}, {"sampler", sampler.to_json()}, {"gene_dropout", gene_dropout}, {"jitter", jitter},
          {"batch_size", batch_size}};
}

SynthesisConfig SynthesisConfig::from_json(const io::json& j) {
  SynthesisConfig c;
  c.k = j.value("k", c.k);
  if (j.contains("sampler")) c.sampler = SamplerConfig::from_json(j.at("sampler"));
  c.gene_dropout = j.value("gene_dropout", c.gene_dropout);
  c.jitter = j.value("jitter", c.jitter);
  c.batch_size = j.value("batch_size", c.batch_size);
  return c;
}

namespace {

std::vector<float> conditioning_copy(std::span<const float> profile, const SynthesisConfig& cfg, std::uint64_t seed) {
  std::vector<float> g(profile.begin(), profile.end());
  if (cfg.gene_dropout == 0 && cfg.jitter == 0) return g;
  Rng rng(derive_seed(seed, 1));
  if (cfg.jitter > 0)
    for (auto& v : g) v += static_cast<float>(cfg.jitter * rng.normal());
  std::vector<std::size_t> idx(g.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto drop = std::min(g.size(), static_cast<std::size_t>(cfg.gene_dropout));
  for (std::size_t i = 0; i < drop; ++i) {
    std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    g[idx[i]] = 0.f;
  }
  return g;
}

}  // namespace

SlideDataset generate_synthetic_pairs(const LoadedModel& model, const SlideDataset& profiles,
                                      const SynthesisConfig& cfg) {
  require(model.net != nullptr, ErrorKind::MissingArtifact, "no network loaded");
  require(model.adapter != nullptr, ErrorKind::MissingArtifact,
          "checkpoint has no adapter; synthesis needs an adapted checkpoint");
  cfg.validate(model.schedule);
  require(profiles.genes_kind == GenesKind::Normalized, ErrorKind::Contract,
          "conditioning profiles must be preprocessed");
  require(profiles.size() > 0, ErrorKind::Contract, "no conditioning profiles");
  const std::size_t d = profiles.gene_dim();
  require(d == static_cast<std::size_t>(model.adapter->config().gene_dim), ErrorKind::Dimension,
          "profiles have " + std::to_string(d) + " genes, adapter expects " +
              std::to_string(model.adapter->config().gene_dim));
  const auto& nc = model.net->config();
  const Shape item{static_cast<std::size_t>(nc.in_channels), static_cast<std::size_t>(nc.image_size),
                   static_cast<std::size_t>(nc.image_size)};
  require(profiles.patch_shape.empty() || profiles.patch_shape == item, ErrorKind::Dimension,
          "network generates " + shape_str(item) + " patches, dataset holds " + shape_str(profiles.patch_shape));

  const std::size_t k = static_cast<std::size_t>(cfg.k), total = profiles.size() * k;
  const auto seeds = sample_seeds(cfg.sampler.seed, total);

  SlideDataset out;
  out.slide_id = profiles.slide_id + "-syn";
  out.patch_shape = item;
  out.gene_names = profiles.gene_names;
  out.genes_kind = GenesKind::Normalized;
  out.source = "synthetic";
  out.stats = profiles.stats;
  out.meta = {{"synthesis", cfg.to_json()}, {"conditioning_slide", profiles.slide_id}, {"seeds", seeds}};
  if (model.header.contains("backbone_sha256")) out.meta["backbone_sha256"] = model.header.at("backbone_sha256");
  out.spots.reserve(total);

  const std::size_t B = static_cast<std::size_t>(cfg.batch_size), P = shape_numel(item);
  for (std::size_t start = 0; start < total; start += B) {
    const std::size_t b = std::min(B, total - start);
    std::vector<float> cond(b * d);
    for (std::size_t n = 0; n < b; ++n) {
      const auto& src = profiles.spots[(start + n) / k];
      const auto c = conditioning_copy(src.genes, cfg, seeds[start + n]);
      std::copy(c.begin(), c.end(), cond.begin() + static_cast<std::ptrdiff_t>(n * d));
    }
    const Tensor cond_t({b, d}, cond);
    const auto eps = guided_eps_fn(*model.net, model.adapter.get(), &cond_t, cfg.sampler.guidance_scale);
    const auto x = sample<float>(eps, item, std::span(seeds).subspan(start, b), model.schedule, cfg.sampler);
    const auto vals = x.values();
    for (std::size_t n = 0; n < b; ++n) {
      const std::size_t m = start + n;
      const auto& src = profiles.spots[m / k];
      SpotRecord r;
      r.spot_id = "syn-" + src.spot_id + "-" + std::to_string(m % k);
      r.row = src.row;
      r.col = src.col;
      r.cluster = src.cluster;
      r.source_spot = src.spot_id;
      r.patch.assign(vals.begin() + static_cast<std::ptrdiff_t>(n * P),
                     vals.begin() + static_cast<std::ptrdiff_t>((n + 1) * P));
      r.genes = src.genes;
      out.spots.push_back(std::move(r));
    }
  }
  out.validate();
  return out;
}

}  // namespace c2l
