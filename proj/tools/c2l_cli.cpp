#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "c2l.h"
#include "json.hpp"

using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIntegrity = 3;
constexpr int kExitMissing = 4;

int exit_code(c2l_status s) {
  switch (s) {
    case C2L_OK: return kExitOk;
    case C2L_ERR_CONFIG:
    case C2L_ERR_NULL_ARGUMENT: return kExitUsage;
    case C2L_ERR_INTEGRITY: return kExitIntegrity;
    case C2L_ERR_MISSING_ARTIFACT: return kExitMissing;
    default: return kExitFailure;
  }
}

struct Context {
  c2l_context* ctx = nullptr;
  Context() {
    if (c2l_context_create(&ctx) != C2L_OK) throw std::runtime_error("cannot create context");
  }
  ~Context() { c2l_context_destroy(ctx); }
  Context(const Context&) = delete;
  Context& operator=(const Context&) = delete;
};

// A flag bound to a dotted key of the command's config.
struct Binding {
  std::string flag;
  std::string key;
  std::string help;
  bool is_switch = false;
};

struct Command {
  std::string name;
  std::string help;
  std::vector<Binding> bindings;
};

const std::vector<Command>& command_table() {
  static const std::vector<Command> t = {
      {"toydata",
       "generate a procedural toy slide",
       {{"--out", "out", "output dataset stem"},
        {"--slide-id", "slide_id", "slide identifier (spot ids are <slide>-<i>)"},
        {"--spots", "spots", "number of spots"},
        {"--genes", "genes", "number of genes"},
        {"--latent-dim", "latent_dim", "latent dimension (>= 4)"},
        {"--seed", "seed", "spot, noise and placement seed"},
        {"--mapping-seed", "mapping_seed", "gene readout seed; slides sharing it share biology"},
        {"--preview", "preview", "write a PNG preview (true/false)"}}},
      {"pretrain",
       "train the central unconditional model",
       {{"--data", "data", "training dataset stem"},
        {"--out", "out", "checkpoint directory"},
        {"--seed", "seed", "run seed"},
        {"--steps", "train.steps", "optimizer steps"},
        {"--batch", "train.batch_size", "micro-batch size"},
        {"--accum", "train.grad_accum", "gradient accumulation factor"},
        {"--lr", "train.lr", "learning rate"},
        {"--ema", "train.ema_decay", "EMA decay"},
        {"--checkpoint-every", "train.checkpoint_every", "intermediate checkpoint interval (0: end only)"},
        {"--preview", "preview", "number of preview samples (0: none)"},
        {"--resume", "resume", "continue from an existing checkpoint in --out", true}}},
      {"distribute",
       "set up a center directory with the central model and the local slide",
       {{"--central", "central", "central checkpoint directory"},
        {"--data", "data", "local slide dataset stem"},
        {"--out", "out", "center directory"}}},
      {"adapt",
       "split the local slide and train the FiLM adapter on a frozen backbone",
       {{"--center", "center", "center directory"},
        {"--fraction", "fraction", "fraction of spots used for adaptation"},
        {"--split-seed", "split_seed", "split seed"},
        {"--top-k", "top_k", "number of genes kept"},
        {"--seed", "seed", "run seed"},
        {"--steps", "train.steps", "optimizer steps"},
        {"--batch", "train.batch_size", "micro-batch size"},
        {"--accum", "train.grad_accum", "gradient accumulation factor"},
        {"--lr", "train.lr", "learning rate"},
        {"--cond-dropout", "train.cond_dropout", "conditional dropout probability"},
        {"--resume", "resume", "continue from an existing adapted checkpoint", true}}},
      {"generate",
       "sample synthetic patches conditioned on the adaptation profiles",
       {{"--center", "center", "center directory"},
        {"--out", "out", "output directory (default <center>/synthetic)"},
        {"--k", "k", "samples per profile"},
        {"--method", "sampler.method", "ddim or ancestral"},
        {"--steps", "sampler.ddim_steps", "DDIM steps"},
        {"--eta", "sampler.eta", "DDIM eta"},
        {"--scale", "sampler.guidance_scale", "guidance scale"},
        {"--seed", "sampler.seed", "base sampling seed"},
        {"--gene-dropout", "gene_dropout", "genes zeroed in the conditioning copy"},
        {"--jitter", "jitter", "Gaussian jitter std on the conditioning copy"},
        {"--batch", "batch_size", "sampling batch size"},
        {"--preview", "preview", "patches in the PNG preview (0: none)"}}},
      {"cotrain",
       "train the gene-expression regressor on real (+ synthetic) pairs and evaluate it",
       {{"--center", "center", "center directory"},
        {"--ratio", "ratio", "synthetic samples per real sample"},
        {"--mode", "mode", "real_plus_synthetic or synthetic_only"},
        {"--seed", "seed", "run seed"},
        {"--synthetic", "synthetic", "synthetic dataset stem (default <center>/synthetic/syn)"},
        {"--predictor", "predictor", "output directory (default <center>/predictor_k<ratio>)"},
        {"--epochs", "train.epochs", "epochs"},
        {"--batch", "train.batch_size", "batch size"},
        {"--lr", "train.lr", "peak learning rate"}}},
      {"evaluate",
       "report held-out MAE of a trained regressor",
       {{"--center", "center", "center directory"},
        {"--ratio", "ratio", "selects <center>/predictor_k<ratio>"},
        {"--predictor", "predictor", "regressor directory"},
        {"--test", "test", "test dataset stem (default <center>/data/test)"},
        {"--csv", "csv", "write per-gene MAE to this CSV"}}},
  };
  return t;
}

json* find_key(json& j, const std::string& dotted) {
  json* cur = &j;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!cur->is_object() || !cur->contains(part)) return nullptr;
    cur = &(*cur)[part];
  }
  return cur;
}

void set_key(json& j, const std::string& dotted, json value) {
  json* cur = &j;
  std::stringstream ss(dotted);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!cur->contains(parts[i]) || !(*cur)[parts[i]].is_object()) (*cur)[parts[i]] = json::object();
    cur = &(*cur)[parts[i]];
  }
  (*cur)[parts.back()] = std::move(value);
}

// Converts flag text to the JSON type of the default value at `key`.
json typed_value(const json& defaults, const std::string& key, const std::string& text) {
  const json* d = find_key(const_cast<json&>(defaults), key);
  if (d == nullptr) throw CLI::ValidationError(key, "not a config key of this command");
  if (d->is_string()) return text;
  try {
    const json v = json::parse(text);
    if (d->is_boolean() && !v.is_boolean()) throw CLI::ValidationError(key, "expects true or false");
    if (d->is_number() && !v.is_number()) throw CLI::ValidationError(key, "expects a number, got '" + text + "'");
    if (d->is_array() && !v.is_array()) throw CLI::ValidationError(key, "expects a JSON array");
    return v;
  } catch (const json::parse_error&) {
    throw CLI::ValidationError(key, "cannot parse '" + text + "'");
  }
}

void log_line(const char* line, void* user) {
  std::cerr << "[" << static_cast<const char*>(user) << "] " << line << "\n";
}

struct Parsed {
  std::string config_file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> values;
  std::map<std::string, bool> switches;
  bool force = false;
  bool print_config = false;
  bool json_out = false;
  bool quiet = false;
};

int run_command(const Command& cmd, const Parsed& p) {
  Context c;
  if (c2l_default_config(c.ctx, cmd.name.c_str()) != C2L_OK) {
    std::cerr << "error: " << c2l_last_error(c.ctx) << "\n";
    return kExitUsage;
  }
  const json defaults = json::parse(c2l_result(c.ctx));

  // defaults < file < flags; the library applies the defaults.
  json patch = json::object();
  if (!p.config_file.empty()) {
    std::ifstream in(p.config_file);
    if (!in) {
      std::cerr << "error: cannot read config file " << p.config_file << "\n";
      return kExitMissing;
    }
    try {
      patch = json::parse(in);
    } catch (const json::parse_error& e) {
      std::cerr << "error: " << p.config_file << ": " << e.what() << "\n";
      return kExitUsage;
    }
  }
  try {
    for (const auto& [key, text] : p.values) set_key(patch, key, typed_value(defaults, key, text));
    for (const auto& [key, on] : p.switches)
      if (on) set_key(patch, key, true);
    for (const auto& s : p.sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw CLI::ValidationError("--set", "expects key=value, got '" + s + "'");
      const auto key = s.substr(0, eq);
      set_key(patch, key, typed_value(defaults, key, s.substr(eq + 1)));
    }
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  if (p.force && defaults.contains("force")) patch["force"] = true;

  if (p.print_config) {
    std::cout << defaults.dump(2) << "\n";
    return kExitOk;
  }
  if (!p.quiet) c2l_context_set_log(c.ctx, log_line, const_cast<char*>(cmd.name.c_str()));
  const c2l_status s = c2l_run(c.ctx, cmd.name.c_str(), patch.dump().c_str());
  if (s != C2L_OK) {
    std::cerr << "error (" << c2l_status_name(s) << "): " << c2l_last_error(c.ctx) << "\n";
    return exit_code(s);
  }
  const json manifest = json::parse(c2l_result(c.ctx));
  if (p.json_out) {
    std::cout << manifest.dump(2) << "\n";
  } else if (manifest.contains("report")) {
    std::cout << manifest.at("report").dump(2) << "\n";
  } else {
    std::cout << cmd.name << ": " << manifest.at("outputs").size() << " files, content "
              << manifest.at("content_sha256").get<std::string>() << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Central-to-local diffusion pipeline for paired histology and gene expression"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(c2l_version()));
  app.footer("Relative paths resolve against $C2L_OUTPUT_ROOT (default: working directory).\n"
             "Exit codes: 0 ok, 1 failure, 2 usage, 3 integrity, 4 missing artifact.");

  std::map<std::string, Parsed> parsed;
  std::map<std::string, CLI::App*> subs;
  for (const auto& cmd : command_table()) {
    auto* sub = app.add_subcommand(cmd.name, cmd.help);
    auto& p = parsed[cmd.name];
    sub->add_option("--config", p.config_file, "JSON config file (overridden by flags)");
    sub->add_option("--set", p.sets, "override any config key: --set train.lr=0.002");
    sub->add_flag("--print-config", p.print_config, "print the default config and exit");
    sub->add_flag("--json", p.json_out, "print the full run manifest");
    sub->add_flag("-q,--quiet", p.quiet, "no progress output");
    if (cmd.name != "evaluate") sub->add_flag("--force", p.force, "overwrite existing outputs");
    for (const auto& b : cmd.bindings) {
      if (b.is_switch) {
        sub->add_flag(b.flag, p.switches[b.key], b.help);
      } else {
        sub->add_option(b.flag, p.values[b.key], b.help);
      }
    }
    subs[cmd.name] = sub;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }
  for (const auto& cmd : command_table()) {
    if (!subs[cmd.name]->parsed()) continue;
    auto p = parsed[cmd.name];
    // Drop options that were not given.
    for (auto it = p.values.begin(); it != p.values.end();) {
      const auto& b = *std::find_if(cmd.bindings.begin(), cmd.bindings.end(),
                                    [&](const Binding& x) { return x.key == it->first; });
      it = subs[cmd.name]->count(b.flag) == 0 ? p.values.erase(it) : std::next(it);
    }
    return run_command(cmd, p);
  }
  return kExitUsage;
}
