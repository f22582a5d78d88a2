#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "c2l.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

#ifndef C2L_CLI_PATH
#error "C2L_CLI_PATH must point at the CLI binary"
#endif

namespace {

struct Ctx {
  c2l_context* c = nullptr;
  Ctx() { REQUIRE(c2l_context_create(&c) == C2L_OK); }
  ~Ctx() { c2l_context_destroy(c); }
};

class Workspace {
 public:
  Workspace() {
    root_ = fs::temp_directory_path() / ("c2l-pipeline-" + std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    ::setenv("C2L_OUTPUT_ROOT", root_.c_str(), 1);
  }
  ~Workspace() {
    fs::remove_all(root_);
    ::unsetenv("C2L_OUTPUT_ROOT");
  }
  const fs::path& root() const { return root_; }

 private:
  fs::path root_;
};

int cli(const std::string& args) {
  const std::string cmd = std::string(C2L_CLI_PATH) + " " + args + " -q > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

json run(Ctx& ctx, const std::string& command, const json& cfg) {
  const c2l_status s = c2l_run(ctx.c, command.c_str(), cfg.dump().c_str());
  INFO(command << ": " << c2l_last_error(ctx.c));
  REQUIRE(s == C2L_OK);
  return json::parse(c2l_result(ctx.c));
}

const json kTinyNet = {{"base_channels", 8}, {"channel_mults", {1, 2}}, {"norm_groups", 4}, {"time_embed_dim", 8}};

json pretrain_cfg() {
  return {{"data", "toy/central"},
          {"out", "central"},
          {"net", kTinyNet},
          {"train", {{"steps", 12}, {"batch_size", 8}, {"grad_accum", 1}, {"lr", 1e-3}}},
          {"preview", 4}};
}

json adapt_cfg() {
  return {{"center", "centers/site"},
          {"fraction", 0.25},
          {"split_seed", 3},
          {"top_k", 8},
          {"train", {{"steps", 6}, {"batch_size", 8}, {"grad_accum", 1}}}};
}

json generate_cfg() {
  return {{"center", "centers/site"}, {"k", 3}, {"sampler", {{"ddim_steps", 4}, {"seed", 5}}}, {"preview", 0}};
}

json cotrain_cfg(int k) {
  return {{"center", "centers/site"}, {"ratio", k}, {"train", {{"epochs", 2}, {"batch_size", 16}}},
          {"regressor", {{"channels", {8, 8}}, {"norm_groups", 4}}}};
}

void build_site(Ctx& ctx) {
  run(ctx, "toydata", {{"out", "toy/central"}, {"spots", 64}, {"seed", 1}, {"preview", false}});
  run(ctx, "toydata", {{"out", "toy/site"}, {"slide_id", "site"}, {"spots", 48}, {"seed", 2}, {"preview", false}});
  run(ctx, "pretrain", pretrain_cfg());
  run(ctx, "distribute", {{"central", "central"}, {"data", "toy/site"}, {"out", "centers/site"}});
}

}  // namespace

TEST_CASE("full pipeline through the C API") {
  Workspace ws;
  Ctx ctx;
  build_site(ctx);
  CHECK(fs::exists(ws.root() / "central" / "preview.png"));
  CHECK(fs::exists(ws.root() / "centers/site/central/checkpoint.json"));

  const auto adapted = run(ctx, "adapt", adapt_cfg());
  // Locality: every file the adaptation run touched lies inside the center.
  const auto center = fs::canonical(ws.root() / "centers/site");
  for (const auto& p : adapted.at("opened_paths")) {
    const auto rel = fs::path(p.get<std::string>()).lexically_relative(center);
    CHECK(*rel.begin() != "..");
  }
  const auto split = json::parse(std::ifstream(ws.root() / "centers/site/split.json"));
  CHECK(split.at("adaptation").size() == 12);
  CHECK(split.at("test").size() == 36);

  const auto gen = run(ctx, "generate", generate_cfg());
  CHECK(gen.at("samples") == 36);

  c2l_dataset* syn = nullptr;
  REQUIRE(c2l_dataset_open(ctx.c, (ws.root() / "centers/site/synthetic/syn").c_str(), &syn) == C2L_OK);
  CHECK(c2l_dataset_size(syn) == 36);
  CHECK(c2l_dataset_gene_dim(syn) == 8);
  std::vector<float> patch(c2l_dataset_patch_numel(syn)), genes(8);
  CHECK(c2l_dataset_record(ctx.c, syn, 0, patch.data(), genes.data()) == C2L_OK);
  CHECK(c2l_dataset_record(ctx.c, syn, 36, patch.data(), nullptr) == C2L_ERR_CONTRACT);
  c2l_dataset_close(syn);

  const auto k0 = run(ctx, "cotrain", cotrain_cfg(0));
  const auto k3 = run(ctx, "cotrain", cotrain_cfg(3));
  for (const auto* m : {&k0, &k3}) {
    const auto& r = m->at("report");
    CHECK(r.at("dataset_id") == "site");
    CHECK(r.at("fraction") == 0.25);
    CHECK(r.at("per_gene_mae").size() == 8);
    double mean = 0;
    for (const auto& v : r.at("per_gene_mae")) mean += v.get<double>() / 8;
    CHECK(r.at("aggregate_mae").get<double>() == doctest::Approx(mean).epsilon(1e-12));
  }
  CHECK(k0.at("report").at("ratio_k") == 0);
  CHECK(k3.at("report").at("ratio_k") == 3);

  // evaluate --ratio 0 reproduces the real-only report of cotrain.
  const auto ev = run(ctx, "evaluate", {{"center", "centers/site"}, {"ratio", 0}, {"csv", "mae_k0.csv"}});
  CHECK(ev.at("report") == k0.at("report"));
  std::ifstream csv(ws.root() / "mae_k0.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "gene,mae");

  c2l_model* model = nullptr;
  REQUIRE(c2l_model_open(ctx.c, (ws.root() / "centers/site/adapted").c_str(), 1, &model) == C2L_OK);
  CHECK(c2l_model_is_adapted(model) == 1);
  CHECK(c2l_model_gene_dim(model) == 8);
  std::vector<float> g(2 * 8, 0.5f), a(2 * 768), b(2 * 768);
  const char* sampler = R"({"ddim_steps": 3, "seed": 9})";
  REQUIRE(c2l_model_sample(ctx.c, model, sampler, g.data(), 2, a.data()) == C2L_OK);
  REQUIRE(c2l_model_sample(ctx.c, model, sampler, g.data(), 2, b.data()) == C2L_OK);
  CHECK(a == b);
  c2l_model_close(model);
}

TEST_CASE("reruns from a resolved snapshot reproduce outputs") {
  Workspace ws;
  Ctx ctx;
  run(ctx, "toydata", {{"out", "toy/central"}, {"spots", 64}, {"seed", 1}, {"preview", false}});
  const auto first = run(ctx, "pretrain", pretrain_cfg());
  const auto snapshot = json::parse(std::ifstream(ws.root() / "central" / "config.resolved.json"));
  auto again = snapshot;
  again["out"] = "central_again";
  const auto second = run(ctx, "pretrain", again);
  CHECK(first.at("content_sha256") == second.at("content_sha256"));
  CHECK(first.at("outputs") == second.at("outputs"));
}

TEST_CASE("resumed pretraining matches an uninterrupted run") {
  Workspace ws;
  Ctx ctx;
  run(ctx, "toydata", {{"out", "toy/central"}, {"spots", 64}, {"seed", 1}, {"preview", false}});
  auto full = pretrain_cfg();
  full["preview"] = 0;
  const auto straight = run(ctx, "pretrain", full);
  auto part = full;
  part["out"] = "resumed";
  part["train"]["steps"] = 5;
  run(ctx, "pretrain", part);
  part["train"]["steps"] = 12;
  part["resume"] = true;
  const auto resumed = run(ctx, "pretrain", part);
  CHECK(straight.at("content_sha256") == resumed.at("content_sha256"));
}

TEST_CASE("C API errors") {
  Ctx ctx;
  CHECK(c2l_run(ctx.c, "nope", "{}") == C2L_ERR_CONFIG);
  CHECK(std::string(c2l_last_error(ctx.c)).find("unknown command") != std::string::npos);
  CHECK(c2l_run(ctx.c, "toydata", "{not json") == C2L_ERR_CONFIG);
  CHECK(c2l_run(ctx.c, "toydata", R"({"spots": "many"})") == C2L_ERR_CONFIG);
  CHECK(c2l_run(ctx.c, "toydata", R"({"train": {}})") == C2L_ERR_CONFIG);
  CHECK(c2l_run(nullptr, "toydata", "{}") == C2L_ERR_NULL_ARGUMENT);
  c2l_dataset* ds = nullptr;
  CHECK(c2l_dataset_open(ctx.c, "/nonexistent/stem", &ds) == C2L_ERR_MISSING_ARTIFACT);
  CHECK(ds == nullptr);
  CHECK(std::string(c2l_last_error(ctx.c)).find("/nonexistent/stem") != std::string::npos);
  REQUIRE(c2l_commands(ctx.c) == C2L_OK);
  CHECK(json::parse(c2l_result(ctx.c)).size() == 7);
}

TEST_CASE("CLI exit codes and guards") {
  Workspace ws;
  CHECK(cli("toydata --spots 0") == 2);
  CHECK(cli("toydata --spots 400 --genes 32 --seed 7 --out a/slide") == 0);
  CHECK(cli("toydata --spots 400 --genes 32 --seed 7 --out b/slide") == 0);
  Ctx ctx;
  const auto hash = [&](const fs::path& stem) {
    const auto m = json::parse(std::ifstream(ws.root() / (stem.string() + ".manifest.json")));
    return m.at("content_sha256").get<std::string>();
  };
  CHECK(hash("a/slide") == hash("b/slide"));
  CHECK(cli("toydata --seed 7 --out a/slide") == 2);
  CHECK(cli("toydata --seed 7 --out a/slide --force") == 0);
  CHECK(cli("toydata --no-such-flag") == 2);
  CHECK(cli("adapt --center missing") == 4);
  CHECK(cli("generate --center missing") == 4);

  // A center whose central checkpoint is a symlink to a directory outside it
  // is refused by the path guard.
  build_site(ctx);
  const auto outside = ws.root() / "outside_central";
  fs::rename(ws.root() / "centers/site/central", outside);
  fs::create_directory_symlink(outside, ws.root() / "centers/site/central");
  const std::string tiny = " --top-k 8 --steps 2 --batch 4 --accum 1";
  CHECK(cli("adapt --center centers/site" + tiny) == 3);
  fs::remove(ws.root() / "centers/site/central");
  fs::rename(outside, ws.root() / "centers/site/central");
  CHECK(cli("adapt --center centers/site" + tiny) == 0);
  CHECK(cli("adapt --center centers/site" + tiny) == 2);
  CHECK(cli("adapt --center centers/site --force" + tiny) == 0);
  CHECK(cli("cotrain --center centers/site --ratio 3") == 4);  // nothing generated yet

  // Tampering with the adapted checkpoint is an integrity failure.
  {
    std::fstream f(ws.root() / "centers/site/adapted/params.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(16);
    const char junk[4] = {1, 2, 3, 4};
    f.write(junk, 4);
  }
  CHECK(cli("generate --center centers/site --k 1 --steps 2") == 3);
}
