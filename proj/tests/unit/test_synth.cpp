#include <cmath>
#include <set>

#include "testing.hpp"

#include "c2l/synth.hpp"

using namespace c2l;

namespace {

LoadedModel tiny_model(bool with_adapter) {
  EpsNetConfig c;
  c.image_size = 8;
  c.base_channels = 8;
  c.channel_mults = {1, 2};
  c.norm_groups = 4;
  c.time_embed_dim = 8;
  LoadedModel m;
  m.kind = with_adapter ? CheckpointKind::Adapted : CheckpointKind::Central;
  m.schedule = make_desk_schedule();
  m.net = std::make_unique<EpsNet<float>>(c, 1);
  if (with_adapter) {
    m.adapter = std::make_unique<FilmAdapter<float>>(AdapterConfig{4, 8}, m.net->film_targets(), 2);
    for (auto& p : m.adapter->parameters().items()) {
      auto v = p.tensor.mutable_values();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.3f * std::sin(float(i) + 1.f);
    }
  }
  return m;
}

SlideDataset profiles(int n) {
  SlideDataset ds;
  ds.slide_id = "center";
  ds.patch_shape = {3, 8, 8};
  ds.gene_names = {"g0", "g1", "g2", "g3"};
  ds.genes_kind = GenesKind::Normalized;
  Rng rng(8);
  for (int i = 0; i < n; ++i) {
    SpotRecord r;
    r.spot_id = "center-" + std::to_string(i);
    r.row = i;
    r.cluster = i % 4;
    r.patch.assign(192, 0.f);
    for (int g = 0; g < 4; ++g) r.genes.push_back(static_cast<float>(rng.normal()));
    ds.spots.push_back(r);
  }
  return ds;
}

SynthesisConfig fast(int k) {
  SynthesisConfig c;
  c.k = k;
  c.sampler.ddim_steps = 5;
  c.sampler.seed = 11;
  return c;
}

}  // namespace

TEST_CASE("synthetic pairs carry their source profiles") {
  const auto model = tiny_model(true);
  const auto src = profiles(10);
  const auto one = generate_synthetic_pairs(model, src, fast(1));
  REQUIRE(one.size() == 10);
  CHECK(one.source == "synthetic");
  CHECK(one.genes_kind == GenesKind::Normalized);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(one.spots[i].genes == src.spots[i].genes);
    CHECK(one.spots[i].source_spot == src.spots[i].spot_id);
    CHECK(one.spots[i].spot_id == "syn-" + src.spots[i].spot_id + "-0");
    CHECK(one.spots[i].cluster == src.spots[i].cluster);
    CHECK(one.spots[i].patch.size() == 192);
  }

  auto cfg = fast(10);
  const auto ten = generate_synthetic_pairs(model, profiles(4), cfg);
  CHECK(ten.size() == 40);
  const auto seeds = ten.meta.at("seeds").get<std::vector<std::uint64_t>>();
  CHECK(seeds.size() == 40);
  CHECK(std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() == 40);
  CHECK(seeds == sample_seeds(11, 40));

  // Per-sample seeds make the output independent of batching up to GEMM
  // blocking roundoff.
  cfg.batch_size = 7;
  const auto rebatched = generate_synthetic_pairs(model, profiles(4), cfg);
  double worst = 0;
  for (std::size_t i = 0; i < 40; ++i)
    for (std::size_t j = 0; j < 192; ++j)
      worst = std::max(worst, double(std::abs(rebatched.spots[i].patch[j] - ten.spots[i].patch[j])));
  MESSAGE("batch 7 vs 64 max diff " << worst);
  CHECK(worst < 1e-3);
  CHECK(generate_synthetic_pairs(model, profiles(4), fast(10)).spots[5].patch == ten.spots[5].patch);
}

TEST_CASE("gene dropout changes only the conditioning copy") {
  const auto model = tiny_model(true);
  const auto src = profiles(3);
  auto cfg = fast(2);
  const auto plain = generate_synthetic_pairs(model, src, cfg);
  cfg.gene_dropout = 2;
  const auto dropped = generate_synthetic_pairs(model, src, cfg);
  bool any_diff = false;
  for (std::size_t i = 0; i < plain.size(); ++i) {
    CHECK(dropped.spots[i].genes == plain.spots[i].genes);
    any_diff = any_diff || dropped.spots[i].patch != plain.spots[i].patch;
  }
  CHECK(any_diff);
}

TEST_CASE("synthesis errors") {
  const auto src = profiles(3);
  try {
    generate_synthetic_pairs(tiny_model(false), src, fast(1));
    FAIL("expected missing adapter");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::MissingArtifact);
  }
  const auto model = tiny_model(true);
  CHECK_THROWS_AS(generate_synthetic_pairs(model, src, fast(0)), Error);
  auto raw = src;
  raw.genes_kind = GenesKind::RawCounts;
  CHECK_THROWS_AS(generate_synthetic_pairs(model, raw, fast(1)), Error);
  auto wide = src;
  wide.gene_names.push_back("g4");
  for (auto& s : wide.spots) s.genes.push_back(0.f);
  CHECK_THROWS_AS(generate_synthetic_pairs(model, wide, fast(1)), Error);
}
