#include "c2l/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <sstream>

#include "c2l/checkpoint.hpp"
#include "c2l/data.hpp"
#include "c2l/error.hpp"
#include "c2l/param_file.hpp"
#include "c2l/predictor.hpp"
#include "c2l/preview.hpp"
#include "c2l/synth.hpp"

namespace c2l::pipeline {

namespace fs = std::filesystem;
using io::json;

namespace {

constexpr const char* kSnapshotFile = "config.resolved.json";
constexpr const char* kManifestFile = "manifest.json";

struct Ctx {
  const Logger& log;
  void say(const std::string& line) const {
    if (log) log(line);
  }
};

const char* type_name(const json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number()) return "number";
  return j.type_name();
}

json merge_at(const json& base, const json& patch, const std::string& where) {
  if (!base.is_object()) {
    const bool same = (base.is_number() && patch.is_number()) || base.type() == patch.type() || base.is_null();
    require(same, ErrorKind::Config,
            "config key '" + where + "' expects a " + type_name(base) + ", got " + type_name(patch));
    if (base.is_number_integer() && patch.is_number_float())
      require(patch.get<double>() == std::floor(patch.get<double>()), ErrorKind::Config,
              "config key '" + where + "' expects an integer");
    return patch;
  }
  require(patch.is_object(), ErrorKind::Config, "config key '" + where + "' expects an object");
  json out = base;
  for (const auto& [key, value] : patch.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    require(base.contains(key), ErrorKind::Config, "unknown config key '" + path + "'");
    out[key] = merge_at(base.at(key), value, path);
  }
  return out;
}

fs::path resolve(const std::string& p) {
  require(!p.empty(), ErrorKind::Config, "empty path in config");
  const fs::path path(p);
  return (path.is_absolute() ? path : output_root() / path).lexically_normal();
}

// Refuses to overwrite unless forced; with force the listed paths are removed.
void claim_outputs(const std::vector<fs::path>& paths, bool force) {
  for (const auto& p : paths) {
    if (!fs::exists(p)) continue;
    require(force, ErrorKind::Config, "output " + p.string() + " already exists (pass --force to overwrite)");
    fs::remove_all(p);
  }
}

// Regular files under p (or p itself), sorted.
std::vector<fs::path> files_under(const fs::path& p) {
  std::vector<fs::path> out;
  if (fs::is_regular_file(p)) {
    out.push_back(p);
  } else if (fs::is_directory(p)) {
    for (const auto& e : fs::recursive_directory_iterator(p))
      if (e.is_regular_file()) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Snapshot and manifest describe a run; they are not among its outputs.
bool is_record_file(const fs::path& p) {
  return p.filename() == kManifestFile || p.filename() == kSnapshotFile;
}

std::vector<fs::path> dataset_files(const fs::path& stem) {
  return {dataset_header_path(stem), dataset_records_path(stem), dataset_index_path(stem)};
}

json hash_list(const std::vector<fs::path>& files, const fs::path& base) {
  json out = json::array();
  for (const auto& f : files) {
    const auto rel = base.empty() ? f : f.lexically_relative(base);
    out.push_back({{"path", rel.generic_string()}, {"sha256", io::sha256_file(f)}});
  }
  return out;
}

// The manifest lists inputs and outputs with their hashes; the content hash
// covers the sorted "<sha256>  <relative path>" lines of the outputs.
json write_manifest(const fs::path& file, const std::string& command, const json& config, std::uint64_t seed,
                    const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs, const fs::path& base,
                    json extra = json::object()) {
  json outs = hash_list(outputs, base);
  std::sort(outs.begin(), outs.end(), [](const json& a, const json& b) { return a.at("path") < b.at("path"); });
  std::string lines;
  for (const auto& o : outs) lines += o.at("sha256").get<std::string>() + "  " + o.at("path").get<std::string>() + "\n";
  json m = {{"format", "c2l-manifest"},
            {"command", command},
            {"config_sha256", config_hash(config)},
            {"seed", seed},
            {"inputs", hash_list(inputs, {})},
            {"outputs", outs},
            {"content_sha256", io::sha256_hex(lines)}};
  for (auto& [k, v] : extra.items()) m[k] = v;
  io::write_json(file, m);
  return m;
}

std::vector<std::vector<float>> first_patches(const SlideDataset& ds, std::size_t n) {
  std::vector<std::vector<float>> out;
  for (std::size_t i = 0; i < std::min(n, ds.size()); ++i) out.push_back(ds.spots[i].patch);
  return out;
}

std::uint64_t seed_of(const json& cfg, const char* key = "seed") { return cfg.at(key).get<std::uint64_t>(); }

json report_json(const MaeReport& r, const SlideDataset& test, const json& split, int k, CotrainMode mode,
                 std::uint64_t seed) {
  return {{"dataset_id", test.slide_id},
          {"fraction", split.at("fraction")},
          {"ratio_k", k},
          {"mode", to_string(mode)},
          {"seed", seed},
          {"gene_names", test.gene_names},
          {"per_gene_mae", r.per_gene},
          {"aggregate_mae", r.aggregate},
          {"count", r.count}};
}

CotrainMode mode_from_string(const std::string& s) {
  if (s == "real_plus_synthetic") return CotrainMode::RealPlusSynthetic;
  if (s == "synthetic_only") return CotrainMode::SyntheticOnly;
  fail(ErrorKind::Config, "unknown co-training mode '" + s + "' (real_plus_synthetic, synthetic_only)");
}

// ---------------------------------------------------------------- commands

json toydata(json& cfg, const Ctx& ctx) {
  ToySlideSpec spec;
  spec.slide_id = cfg.at("slide_id");
  spec.seed = seed_of(cfg);
  spec.mapping_seed = seed_of(cfg, "mapping_seed");
  spec.n_spots = cfg.at("spots");
  spec.d_genes = cfg.at("genes");
  spec.latent_dim = cfg.at("latent_dim");
  spec.patch_size = cfg.at("patch_size");
  spec.cluster_spread = cfg.at("cluster_spread");
  spec.gene_noise = cfg.at("gene_noise");
  spec.validate();
  const fs::path stem = resolve(cfg.at("out"));
  auto outputs = dataset_files(stem);
  const fs::path preview = stem.string() + ".preview.png";
  const fs::path snapshot = stem.string() + ".config.json", manifest = stem.string() + ".manifest.json";
  auto claimed = outputs;
  claimed.insert(claimed.end(), {preview, snapshot, manifest});
  claim_outputs(claimed, cfg.at("force"));
  fs::create_directories(stem.parent_path());

  const auto ds = generate_toy_slide(spec);
  write_dataset(stem, ds);
  if (cfg.at("preview").get<bool>()) {
    write_png_grid(preview, first_patches(ds, 100), ds.patch_shape);
    outputs.push_back(preview);
  }
  std::vector<int> per_cluster(kToyClusters, 0);
  for (const auto& s : ds.spots) ++per_cluster[static_cast<std::size_t>(s.cluster)];
  ctx.say("wrote " + std::to_string(ds.size()) + " spots x " + std::to_string(ds.gene_dim()) + " genes to " +
          dataset_header_path(stem).string());
  io::write_json(snapshot, cfg);
  return write_manifest(manifest, "toydata", cfg, spec.seed, {}, outputs, stem.parent_path(),
                        {{"summary", {{"spots", ds.size()}, {"genes", ds.gene_dim()}, {"per_cluster", per_cluster}}}});
}

json pretrain(json& cfg, const Ctx& ctx) {
  const fs::path data = resolve(cfg.at("data")), out = resolve(cfg.at("out"));
  const auto net_cfg = EpsNetConfig::from_json(cfg.at("net"));
  const auto train_cfg = PretrainConfig::from_json(cfg.at("train"));
  net_cfg.validate();
  train_cfg.validate();
  cfg["net"] = net_cfg.to_json();
  cfg["train"] = train_cfg.to_json();
  const bool resuming = cfg.at("resume").get<bool>() && fs::exists(out / kCheckpointFile);
  if (!resuming) claim_outputs({out}, cfg.at("force"));
  const auto ds = read_dataset(data);
  const auto td = to_train_data(ds);
  const auto seed = seed_of(cfg);

  EpsNet<float> net(net_cfg, derive_seed(seed, 0));
  Pretrainer<float> trainer(net, make_desk_schedule(cfg.at("schedule_steps")), train_cfg, derive_seed(seed, 1));
  if (resuming) {
    resume(out, trainer);
    ctx.say("resumed " + out.string() + " at step " + std::to_string(trainer.step_index()));
  }
  fs::create_directories(out);
  const int log_every = cfg.at("log_every");
  const json extra = {{"data", data.filename().string()}, {"data_records_sha256", io::sha256_file(dataset_records_path(data))}};
  double window = 0;
  int in_window = 0;
  while (trainer.step_index() < train_cfg.steps) {
    window += trainer.step(td);
    ++in_window;
    const int s = trainer.step_index();
    if (log_every > 0 && (s % log_every == 0 || s == train_cfg.steps)) {
      std::ostringstream line;
      line << "step " << s << "/" << train_cfg.steps << " loss " << window / in_window << " lr "
           << trainer.optim().last_lr();
      ctx.say(line.str());
      window = 0;
      in_window = 0;
    }
    if (train_cfg.checkpoint_every > 0 && s % train_cfg.checkpoint_every == 0 && s < train_cfg.steps)
      save_checkpoint(out, trainer, extra);
  }
  save_checkpoint(out, trainer, extra);

  const int n_preview = cfg.at("preview");
  if (n_preview > 0) {
    const auto model = load_model(out);
    SamplerConfig sc;
    sc.method = SamplerMethod::Ancestral;
    sc.seed = derive_seed(seed, 2);
    const auto seeds = sample_seeds(sc.seed, static_cast<std::size_t>(n_preview));
    const auto x = sample<float>(guided_eps_fn<float>(*model.net, nullptr, nullptr, 0.0), ds.patch_shape, seeds,
                                 model.schedule, sc);
    std::vector<std::vector<float>> patches;
    const std::size_t P = ds.patch_numel();
    for (std::size_t i = 0; i < seeds.size(); ++i)
      patches.emplace_back(x.values().begin() + static_cast<std::ptrdiff_t>(i * P),
                           x.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * P));
    write_png_grid(out / "preview.png", patches, ds.patch_shape);
  }
  io::write_json(out / kSnapshotFile, cfg);
  auto outputs = files_under(out);
  std::erase_if(outputs, is_record_file);
  return write_manifest(out / kManifestFile, "pretrain", cfg, seed, dataset_files(data), outputs, out);
}

json distribute(json& cfg, const Ctx& ctx) {
  const fs::path central = resolve(cfg.at("central")), data = resolve(cfg.at("data")), out = resolve(cfg.at("out"));
  const auto header = read_checkpoint_header(central);
  require(checkpoint_kind(header) == CheckpointKind::Central, ErrorKind::Contract,
          central.string() + " is not a central checkpoint");
  claim_outputs({out}, cfg.at("force"));
  fs::create_directories(out / "central");
  fs::create_directories(out / "data");
  std::vector<fs::path> inputs{central / kCheckpointFile};
  for (const auto& stem : {"params", "ema", "optim"})
    for (const auto& f : {param_bin_path(central / stem), param_json_path(central / stem)}) {
      fs::copy_file(f, out / "central" / f.filename());
      inputs.push_back(f);
    }
  fs::copy_file(central / kCheckpointFile, out / "central" / kCheckpointFile);
  const fs::path slide = out / "data" / "slide";
  for (const auto& [from, to] : {std::pair{dataset_header_path(data), dataset_header_path(slide)},
                                 std::pair{dataset_records_path(data), dataset_records_path(slide)},
                                 std::pair{dataset_index_path(data), dataset_index_path(slide)}}) {
    fs::copy_file(from, to);
    inputs.push_back(from);
  }
  // Loading re-verifies every hash of the copy.
  load_model(out / "central");
  read_dataset(slide);
  ctx.say("center " + out.string() + " ready");
  io::write_json(out / kSnapshotFile, cfg);
  auto outputs = files_under(out);
  std::erase_if(outputs, is_record_file);
  return write_manifest(out / kManifestFile, "distribute", cfg, 0, inputs, outputs, out);
}

class GuardScope {
 public:
  explicit GuardScope(const fs::path& root) { io::set_path_guard(root); }
  ~GuardScope() { io::set_path_guard(std::nullopt); }
  GuardScope(const GuardScope&) = delete;
  GuardScope& operator=(const GuardScope&) = delete;
};

json adapt(json& cfg, const Ctx& ctx) {
  const fs::path center = resolve(cfg.at("center"));
  require(fs::is_directory(center), ErrorKind::MissingArtifact, "center directory " + center.string() + " not found");
  const GuardScope guard(fs::canonical(center));
  io::reset_opened_paths();
  const auto train_cfg = AdaptConfig::from_json(cfg.at("train"));
  train_cfg.validate();
  cfg["train"] = train_cfg.to_json();
  const fs::path adapted = center / "adapted", adapt_stem = center / "data" / "adapt",
                 test_stem = center / "data" / "test", split_file = center / "split.json";
  const bool resuming = cfg.at("resume").get<bool>() && fs::exists(adapted / kCheckpointFile);
  const auto seed = seed_of(cfg);

  io::require_exists(center / "central" / kCheckpointFile, "central checkpoint (run distribute first)");
  io::require_exists(dataset_header_path(center / "data" / "slide"), "center slide dataset (run distribute first)");
  auto base = load_model(center / "central", cfg.at("use_central_ema"));
  const auto slide = read_dataset(center / "data" / "slide");
  const double fraction = cfg.at("fraction");
  const auto split_seed = seed_of(cfg, "split_seed");
  const auto split = split_sparse(slide.size(), fraction, split_seed);
  const std::size_t top_k = std::min<std::size_t>(cfg.at("top_k").get<std::size_t>(), slide.gene_dim());
  cfg["top_k"] = top_k;
  const auto stats = fit_gene_stats(slide, split.adaptation, top_k);
  const auto adapt_ds = preprocess_genes(slide, split.adaptation, stats);
  const auto test_ds = preprocess_genes(slide, split.test, stats);

  if (!resuming) {
    auto claimed = dataset_files(adapt_stem);
    for (const auto& f : dataset_files(test_stem)) claimed.push_back(f);
    claimed.insert(claimed.end(), {split_file, adapted});
    claim_outputs(claimed, cfg.at("force"));
  }
  json split_json = {{"fraction", fraction}, {"split_seed", split_seed}, {"adaptation", json::array()},
                     {"test", json::array()}};
  for (auto i : split.adaptation) split_json["adaptation"].push_back(slide.spots[i].spot_id);
  for (auto i : split.test) split_json["test"].push_back(slide.spots[i].spot_id);
  io::write_json(split_file, split_json);
  write_dataset(adapt_stem, adapt_ds);
  write_dataset(test_stem, test_ds);
  ctx.say("split " + std::to_string(adapt_ds.size()) + " adaptation / " + std::to_string(test_ds.size()) +
          " test spots, " + std::to_string(top_k) + " genes");

  const AdapterConfig acfg{static_cast<int>(top_k), cfg.at("embed_dim")};
  FilmAdapter<float> adapter(acfg, base.net->film_targets(), derive_seed(seed, 0));
  AdaptTrainer<float> trainer(*base.net, adapter, base.schedule, train_cfg, derive_seed(seed, 1));
  if (resuming) {
    resume(adapted, trainer);
    ctx.say("resumed " + adapted.string() + " at step " + std::to_string(trainer.step_index()));
  }
  const auto td = to_train_data(adapt_ds);
  const json extra = {{"central_checkpoint_sha256", io::sha256_file(center / "central" / kCheckpointFile)},
                      {"fraction", fraction},
                      {"split_seed", split_seed}};
  const int log_every = cfg.at("log_every");
  double window = 0;
  int in_window = 0;
  while (trainer.step_index() < train_cfg.steps) {
    window += trainer.step(td);
    ++in_window;
    const int s = trainer.step_index();
    if (log_every > 0 && (s % log_every == 0 || s == train_cfg.steps)) {
      std::ostringstream line;
      line << "step " << s << "/" << train_cfg.steps << " loss " << window / in_window << " lr "
           << trainer.optim().last_lr();
      ctx.say(line.str());
      window = 0;
      in_window = 0;
    }
    if (train_cfg.checkpoint_every > 0 && s % train_cfg.checkpoint_every == 0 && s < train_cfg.steps)
      save_checkpoint(adapted, trainer, extra);
  }
  save_checkpoint(adapted, trainer, extra);

  io::write_json(adapted / kSnapshotFile, cfg);
  std::vector<fs::path> outputs = files_under(adapted);
  std::erase_if(outputs, is_record_file);
  for (const auto& f : dataset_files(adapt_stem)) outputs.push_back(f);
  for (const auto& f : dataset_files(test_stem)) outputs.push_back(f);
  outputs.push_back(split_file);
  std::vector<fs::path> inputs = dataset_files(center / "data" / "slide");
  inputs.push_back(center / "central" / kCheckpointFile);
  json opened = json::array();
  for (const auto& p : io::opened_paths()) opened.push_back(p.string());
  return write_manifest(adapted / kManifestFile, "adapt", cfg, seed, inputs, outputs, center,
                        {{"opened_paths", opened}});
}

json generate(json& cfg, const Ctx& ctx) {
  const fs::path center = resolve(cfg.at("center"));
  const fs::path out = cfg.at("out").get<std::string>().empty() ? center / "synthetic" : resolve(cfg.at("out"));
  cfg["out"] = out.string();
  SynthesisConfig sc;
  sc.k = cfg.at("k");
  sc.sampler = SamplerConfig::from_json(cfg.at("sampler"));
  sc.gene_dropout = cfg.at("gene_dropout");
  sc.jitter = cfg.at("jitter");
  sc.batch_size = cfg.at("batch_size");
  cfg["sampler"] = sc.sampler.to_json();
  io::require_exists(center / "adapted" / kCheckpointFile, "adapted checkpoint (run adapt first)");
  const auto model = load_model(center / "adapted", cfg.at("use_ema"));
  require(model.kind == CheckpointKind::Adapted, ErrorKind::MissingArtifact,
          (center / "adapted").string() + " holds no adapter");
  const auto profiles = read_dataset(center / "data" / "adapt");
  claim_outputs({out}, cfg.at("force"));
  fs::create_directories(out);
  ctx.say("sampling " + std::to_string(profiles.size() * static_cast<std::size_t>(sc.k)) + " patches (" +
          to_string(sc.sampler.method) + ", " + std::to_string(sc.sampler.ddim_steps) + " steps, scale " +
          std::to_string(sc.sampler.guidance_scale) + ")");
  const auto syn = generate_synthetic_pairs(model, profiles, sc);
  write_dataset(out / "syn", syn);
  const int n_preview = cfg.at("preview");
  if (n_preview > 0) write_png_grid(out / "preview.png", first_patches(syn, static_cast<std::size_t>(n_preview)), syn.patch_shape);
  io::write_json(out / kSnapshotFile, cfg);
  auto outputs = files_under(out);
  std::erase_if(outputs, is_record_file);
  std::vector<fs::path> inputs = dataset_files(center / "data" / "adapt");
  inputs.push_back(center / "adapted" / kCheckpointFile);
  return write_manifest(out / kManifestFile, "generate", cfg, sc.sampler.seed, inputs, outputs, out,
                        {{"samples", syn.size()}, {"source_profiles", profiles.size()}});
}

fs::path predictor_dir(const json& cfg, const fs::path& center) {
  const std::string given = cfg.at("predictor");
  return given.empty() ? center / ("predictor_k" + std::to_string(cfg.at("ratio").get<int>())) : resolve(given);
}

json synthesis_sampler() {
  SamplerConfig sc;
  sc.eta = 1.0;
  return sc.to_json();
}

json cotrain(json& cfg, const Ctx& ctx) {
  const fs::path center = resolve(cfg.at("center"));
  const fs::path out = predictor_dir(cfg, center);
  cfg["predictor"] = out.string();
  const int k = cfg.at("ratio");
  const auto mode = mode_from_string(cfg.at("mode"));
  const auto seed = seed_of(cfg);
  const auto real = read_dataset(center / "data" / "adapt");
  const auto test = read_dataset(center / "data" / "test");
  const auto split = io::read_json(center / "split.json");
  std::vector<fs::path> inputs = dataset_files(center / "data" / "adapt");
  std::optional<SlideDataset> syn;
  if (k > 0) {
    const fs::path syn_stem = cfg.at("synthetic").get<std::string>().empty() ? center / "synthetic" / "syn"
                                                                             : resolve(cfg.at("synthetic"));
    cfg["synthetic"] = syn_stem.string();
    io::require_exists(dataset_header_path(syn_stem), "synthetic dataset (run generate first)");
    syn = read_dataset(syn_stem);
    for (const auto& f : dataset_files(syn_stem)) inputs.push_back(f);
  }
  const auto set = build_cotrain_set(real, syn ? &*syn : nullptr, k, mode);

  auto rcfg = RegressorConfig::from_json(cfg.at("regressor"));
  rcfg.in_channels = static_cast<int>(real.patch_shape.at(0));
  rcfg.image_size = static_cast<int>(real.patch_shape.at(1));
  rcfg.out_dim = static_cast<int>(real.gene_dim());
  const auto tcfg = PredictorTrainConfig::from_json(cfg.at("train"));
  cfg["regressor"] = rcfg.to_json();
  cfg["train"] = tcfg.to_json();
  claim_outputs({out}, cfg.at("force"));
  fs::create_directories(out);

  Regressor<float> model(rcfg, derive_seed(seed, 0));
  ctx.say("training regressor on " + std::to_string(set.n_real) + " real + " + std::to_string(set.n_synthetic) +
          " synthetic records");
  const auto run_info = train_predictor(model, set, tcfg, derive_seed(seed, 1));
  std::ostringstream line;
  line << "final epoch loss " << run_info.epoch_loss.back() << " after " << run_info.steps << " steps";
  ctx.say(line.str());
  write_param_file(out / "regressor", model.parameters().to_entries(), {{"regressor", rcfg.to_json()}});
  io::write_json(out / "training_spots.json", set.training_spots);

  const auto report = report_json(evaluate_mae(model, test, &set), test, split, k, mode, seed);
  io::write_json(out / "report.json", report);
  ctx.say("held-out MAE " + std::to_string(report.at("aggregate_mae").get<double>()));
  io::write_json(out / kSnapshotFile, cfg);
  auto outputs = files_under(out);
  std::erase_if(outputs, is_record_file);
  return write_manifest(out / kManifestFile, "cotrain", cfg, seed, inputs, outputs, out,
                        {{"report", report}, {"epoch_loss", run_info.epoch_loss}});
}

json evaluate(json& cfg, const Ctx& ctx) {
  const fs::path center = resolve(cfg.at("center"));
  const fs::path pred = predictor_dir(cfg, center);
  cfg["predictor"] = pred.string();
  const fs::path test_stem = cfg.at("test").get<std::string>().empty() ? center / "data" / "test"
                                                                       : resolve(cfg.at("test"));
  cfg["test"] = test_stem.string();
  io::require_exists(param_bin_path(pred / "regressor"), "trained regressor (run cotrain first)");
  json meta;
  const auto entries = read_param_file(pred / "regressor", &meta);
  Regressor<float> model(RegressorConfig::from_json(meta.at("regressor")), 0);
  model.parameters().load_entries(entries);
  const auto trained = io::read_json(pred / "training_spots.json");
  CotrainSet seen;
  seen.training_spots = trained.get<std::vector<std::string>>();
  const auto test = read_dataset(test_stem);
  const auto training_cfg = io::read_json(pred / kSnapshotFile);
  const auto split = io::read_json(center / "split.json");
  const auto report =
      report_json(evaluate_mae(model, test, &seen), test, split, training_cfg.at("ratio"),
                  mode_from_string(training_cfg.at("mode")), training_cfg.at("seed").get<std::uint64_t>());
  const fs::path out = pred / "evaluation";
  claim_outputs({out}, true);
  fs::create_directories(out);
  io::write_json(out / "evaluation.json", report);
  const std::string csv = cfg.at("csv");
  std::vector<fs::path> outputs{out / "evaluation.json"};
  if (!csv.empty()) {
    std::ostringstream s;
    s.precision(17);
    s << "gene,mae\n";
    for (std::size_t g = 0; g < test.gene_dim(); ++g) s << test.gene_names[g] << "," << report.at("per_gene_mae")[g].get<double>() << "\n";
    const auto csv_path = resolve(csv);
    if (!csv_path.parent_path().empty()) fs::create_directories(csv_path.parent_path());
    io::write_text(csv_path, s.str());
    outputs.push_back(csv_path);
  }
  ctx.say("held-out MAE " + std::to_string(report.at("aggregate_mae").get<double>()) + " over " +
          std::to_string(test.size()) + " spots");
  io::write_json(out / kSnapshotFile, cfg);
  std::vector<fs::path> inputs = dataset_files(test_stem);
  inputs.push_back(param_bin_path(pred / "regressor"));
  return write_manifest(out / kManifestFile, "evaluate", cfg, 0, inputs, outputs, out, {{"report", report}});
}

using Command = json (*)(json&, const Ctx&);

const std::map<std::string, std::pair<Command, json>>& registry() {
  static const std::map<std::string, std::pair<Command, json>> r = {
      {"toydata",
       {toydata,
        {{"out", "toy/slide"}, {"slide_id", "toy"}, {"spots", 400}, {"genes", 32}, {"latent_dim", 4},
         {"patch_size", 16}, {"cluster_spread", 0.35}, {"gene_noise", 0.2}, {"seed", 0}, {"mapping_seed", 0},
         {"preview", true}, {"force", false}}}},
      {"pretrain",
       {pretrain,
        {{"data", "toy/central"}, {"out", "central"}, {"seed", 0}, {"net", EpsNetConfig{}.to_json()},
         {"train", PretrainConfig{}.to_json()}, {"schedule_steps", 200}, {"resume", false}, {"preview", 40},
         {"log_every", 100}, {"force", false}}}},
      {"distribute",
       {distribute, {{"central", "central"}, {"data", "toy/site"}, {"out", "centers/site"}, {"force", false}}}},
      {"adapt",
       {adapt,
        {{"center", "centers/site"}, {"fraction", 0.25}, {"split_seed", 0}, {"top_k", 32}, {"seed", 0},
         {"embed_dim", 32}, {"train", AdaptConfig{}.to_json()}, {"use_central_ema", true}, {"resume", false},
         {"log_every", 100}, {"force", false}}}},
      {"generate",
       {generate,
        {{"center", "centers/site"}, {"out", ""}, {"k", 10}, {"sampler", synthesis_sampler()},
         {"gene_dropout", 0}, {"jitter", 0.0}, {"batch_size", 64}, {"use_ema", true}, {"preview", 100},
         {"force", false}}}},
      {"cotrain",
       {cotrain,
        {{"center", "centers/site"}, {"ratio", 10}, {"mode", "real_plus_synthetic"}, {"seed", 0}, {"synthetic", ""},
         {"predictor", ""}, {"regressor", RegressorConfig{}.to_json()}, {"train", PredictorTrainConfig{}.to_json()},
         {"force", false}}}},
      {"evaluate",
       {evaluate, {{"center", "centers/site"}, {"ratio", 10}, {"predictor", ""}, {"test", ""}, {"csv", ""}}}},
  };
  return r;
}

const std::pair<Command, json>& lookup(const std::string& command) {
  const auto& r = registry();
  const auto it = r.find(command);
  if (it == r.end()) {
    std::string names;
    for (const auto& [name, _] : r) names += (names.empty() ? "" : ", ") + name;
    fail(ErrorKind::Config, "unknown command '" + command + "' (expected one of: " + names + ")");
  }
  return it->second;
}

}  // namespace

const std::vector<std::string>& commands() {
  static const std::vector<std::string> names{"toydata", "pretrain", "distribute", "adapt",
                                              "generate", "cotrain",  "evaluate"};
  return names;
}

json default_config(const std::string& command) { return lookup(command).second; }

fs::path output_root() {
  const char* env = std::getenv("C2L_OUTPUT_ROOT");
  return env != nullptr && *env != '\0' ? fs::path(env) : fs::current_path();
}

json merge(const json& base, const json& patch) {
  return merge_at(base, patch, "");
}

std::string config_hash(const json& config) { return io::sha256_hex(config.dump()); }

json run(const std::string& command, const json& config, const Logger& log) {
  const auto& [fn, defaults] = lookup(command);
  require(config.is_object(), ErrorKind::Config, "config must be a JSON object");
  json resolved = merge(defaults, config);
  const Ctx ctx{log};
  return fn(resolved, ctx);
}

}  // namespace c2l::pipeline
