#include "testing.hpp"

#include "c2l/checkpoint.hpp"

using namespace c2l;
using c2l::testing::TempDir;

namespace {

EpsNetConfig small_net() {
  EpsNetConfig c;
  c.image_size = 8;
  c.base_channels = 8;
  c.channel_mults = {1, 2};
  c.norm_groups = 4;
  c.time_embed_dim = 8;
  return c;
}

TrainData small_data() {
  Rng rng(21);
  TrainData d;
  d.image_shape = {3, 8, 8};
  d.count = 5;
  d.images.resize(d.count * d.image_numel());
  for (auto& v : d.images) v = static_cast<float>(rng.uniform(-1, 1));
  d.gene_dim = 4;
  d.genes.resize(d.count * 4);
  for (auto& v : d.genes) v = static_cast<float>(rng.normal());
  return d;
}

std::vector<float> all_values(const ParameterStore<float>& store) {
  std::vector<float> out;
  for (const auto& p : store.items()) out.insert(out.end(), p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

PretrainConfig small_pretrain() {
  PretrainConfig pc;
  pc.batch_size = 3;
  pc.grad_accum = 2;
  pc.lr = 1e-3;
  pc.ema_decay = 0.9;
  return pc;
}

}  // namespace

TEST_CASE("pretraining resumes bit-exactly from a checkpoint") {
  TempDir tmp("resume-pre");
  const auto data = small_data();

  EpsNet<float> straight(small_net(), 1);
  Pretrainer<float> a(straight, make_desk_schedule(), small_pretrain(), 8);
  std::vector<double> trace_a;
  for (int s = 0; s < 6; ++s) trace_a.push_back(a.step(data));

  EpsNet<float> first(small_net(), 1);
  Pretrainer<float> b(first, make_desk_schedule(), small_pretrain(), 8);
  std::vector<double> trace_b;
  for (int s = 0; s < 3; ++s) trace_b.push_back(b.step(data));
  save_checkpoint(tmp.path(), b);

  EpsNet<float> second(small_net(), 99);
  Pretrainer<float> c(second, make_desk_schedule(), small_pretrain(), 12345);
  resume(tmp.path(), c);
  CHECK(c.step_index() == 3);
  for (int s = 0; s < 3; ++s) trace_b.push_back(c.step(data));

  CHECK(trace_a == trace_b);
  CHECK(all_values(straight.parameters()) == all_values(second.parameters()));
  for (std::size_t k = 0; k < a.ema().params().size(); ++k) {
    const auto x = a.ema().shadow(k), y = c.ema().shadow(k);
    CHECK(std::equal(x.begin(), x.end(), y.begin()));
  }
}

TEST_CASE("model loading: EMA versus raw weights, kinds and integrity") {
  TempDir tmp("load");
  const auto data = small_data();
  EpsNet<float> net(small_net(), 1);
  Pretrainer<float> pre(net, make_desk_schedule(), small_pretrain(), 3);
  for (int s = 0; s < 4; ++s) pre.step(data);
  const auto central = tmp.path() / "central";
  save_checkpoint(central, pre, {{"note", "test"}});

  const auto raw = load_model(central, false);
  const auto ema = load_model(central, true);
  CHECK(raw.kind == CheckpointKind::Central);
  CHECK(raw.adapter == nullptr);
  CHECK(raw.schedule.steps() == 200);
  CHECK(all_values(raw.net->parameters()) == all_values(net.parameters()));
  CHECK(all_values(ema.net->parameters()) != all_values(net.parameters()));
  CHECK(raw.header.at("extra").at("note") == "test");

  // Adaptation starts from the central EMA weights.
  FilmAdapter<float> adapter(AdapterConfig{4, 8}, ema.net->film_targets(), 5);
  AdaptConfig ac;
  ac.batch_size = 3;
  ac.grad_accum = 1;
  ac.steps = 4;
  AdaptTrainer<float> ad(*ema.net, adapter, ema.schedule, ac, 6);
  for (int s = 0; s < 2; ++s) ad.step(data);
  const auto adapted = tmp.path() / "adapted";
  save_checkpoint(adapted, ad);

  const auto loaded = load_model(adapted, false);
  REQUIRE(loaded.adapter != nullptr);
  CHECK(loaded.kind == CheckpointKind::Adapted);
  CHECK(backbone_checksum(*loaded.net) == backbone_checksum(*ema.net));
  CHECK(all_values(loaded.adapter->parameters()) == all_values(adapter.parameters()));
  const auto loaded_ema = load_model(adapted, true);
  CHECK(backbone_checksum(*loaded_ema.net) == backbone_checksum(*ema.net));
  CHECK(all_values(loaded_ema.adapter->parameters()) != all_values(adapter.parameters()));

  SUBCASE("adaptation resumes bit-exactly") {
    for (int s = 0; s < 2; ++s) ad.step(data);
    auto base = load_model(adapted, false);
    FilmAdapter<float> fresh(AdapterConfig{4, 8}, base.net->film_targets(), 77);
    AdaptTrainer<float> again(*base.net, fresh, base.schedule, ac, 0);
    resume(adapted, again);
    for (int s = 0; s < 2; ++s) again.step(data);
    CHECK(all_values(fresh.parameters()) == all_values(adapter.parameters()));
  }
  SUBCASE("tampered weights are rejected") {
    {
      std::fstream f(param_bin_path(adapted / "params"), std::ios::in | std::ios::out | std::ios::binary);
      f.seekp(8);
      const char junk[4] = {1, 2, 3, 4};
      f.write(junk, 4);
    }
    try {
      load_model(adapted);
      FAIL("expected an integrity error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Integrity);
    }
  }
  SUBCASE("missing checkpoint names the expected path") {
    try {
      load_model(tmp.path() / "nowhere");
      FAIL("expected a missing-artifact error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::MissingArtifact);
      CHECK(std::string(e.what()).find("nowhere") != std::string::npos);
    }
  }
  SUBCASE("resuming with the wrong kind is refused") {
    EpsNet<float> other(small_net(), 1);
    Pretrainer<float> p2(other, make_desk_schedule(), small_pretrain(), 1);
    CHECK_THROWS_AS(resume(adapted, p2), Error);
  }
}
