#include "c2l/checkpoint.hpp"

#include "c2l/error.hpp"

namespace c2l {

namespace fs = std::filesystem;

const char* to_string(CheckpointKind k) { return k == CheckpointKind::Adapted ? "adapted" : "central"; }

namespace {

constexpr const char* kFiles[] = {"params", "ema", "optim"};

io::json file_hashes(const fs::path& dir) {
  io::json out = io::json::object();
  for (const char* stem : kFiles) {
    out[stem] = {{"bin", io::sha256_file(param_bin_path(dir / stem))},
                 {"json", io::sha256_file(param_json_path(dir / stem))}};
  }
  return out;
}

void verify_hashes(const fs::path& dir, const io::json& header) {
  const io::json& expected = header.at("files");
  for (const char* stem : kFiles) {
    for (const auto& [ext, path] : {std::pair{"bin", param_bin_path(dir / stem)},
                                    std::pair{"json", param_json_path(dir / stem)}}) {
      io::require_exists(path, std::string("checkpoint ") + stem + " file");
      require(io::sha256_file(path) == expected.at(stem).at(ext).get<std::string>(), ErrorKind::Integrity,
              "checkpoint file " + path.string() + " does not match the hash recorded in " + kCheckpointFile);
    }
  }
}

template <typename Trainer>
void write_common(const fs::path& dir, Trainer& trainer, io::json header, const std::vector<ParamEntry>& params) {
  fs::create_directories(dir);
  auto& optim = trainer.optim();
  write_param_file(dir / "params", params);
  write_param_file(dir / "ema", trainer.ema().to_entries(), {{"decay", trainer.ema().decay()}});
  write_param_file(dir / "optim", optim.to_entries());
  header["format"] = "c2l-checkpoint";
  header["version"] = 1;
  header["schedule"] = trainer.schedule().to_json();
  header["train"] = trainer.config().to_json();
  header["step"] = trainer.step_index();
  header["rng_state"] = trainer.rng().state();
  header["optim"] = {{"steps_taken", optim.steps_taken()},
                     {"last_lr", optim.last_lr()},
                     {"beta1", optim.config().beta1},
                     {"beta2", optim.config().beta2},
                     {"eps", optim.config().eps},
                     {"weight_decay", optim.config().weight_decay}};
  header["files"] = file_hashes(dir);
  io::write_json(dir / kCheckpointFile, header);
}

template <typename Trainer>
void restore_common(const fs::path& dir, const io::json& header, Trainer& trainer) {
  const int step = header.at("step").get<int>();
  trainer.ema().load_entries(read_param_file(dir / "ema"));
  trainer.optim().load_entries(read_param_file(dir / "optim"), header.at("optim").at("steps_taken").get<int>(),
                               header.at("optim").at("last_lr").get<double>());
  trainer.rng().set_state(header.at("rng_state").get<std::string>());
  trainer.set_step(step);
}

std::vector<ParamEntry> only_partition(const std::vector<ParamEntry>& entries, Partition p) {
  std::vector<ParamEntry> out;
  for (const auto& e : entries)
    if (e.partition == to_string(p)) out.push_back(e);
  return out;
}

}  // namespace

void save_checkpoint(const fs::path& dir, Pretrainer<float>& trainer, const io::json& extra) {
  io::json header = {{"kind", to_string(CheckpointKind::Central)},
                     {"net", trainer.net().config().to_json()},
                     {"extra", extra}};
  write_common(dir, trainer, header, trainer.net().parameters().to_entries());
}

void save_checkpoint(const fs::path& dir, AdaptTrainer<float>& trainer, const io::json& extra) {
  io::json header = {{"kind", to_string(CheckpointKind::Adapted)},
                     {"net", trainer.net().config().to_json()},
                     {"adapter", trainer.adapter().config().to_json()},
                     {"backbone_sha256", backbone_checksum(trainer.net())},
                     {"extra", extra}};
  auto params = trainer.net().parameters().to_entries();
  const auto adapter = trainer.adapter().parameters().to_entries();
  params.insert(params.end(), adapter.begin(), adapter.end());
  write_common(dir, trainer, header, params);
}

io::json read_checkpoint_header(const fs::path& dir) {
  const fs::path file = dir / kCheckpointFile;
  io::require_exists(file, "checkpoint");
  io::json header = io::read_json(file);
  require(header.value("format", "") == "c2l-checkpoint", ErrorKind::Io, file.string() + " is not a checkpoint");
  checkpoint_kind(header);
  return header;
}

CheckpointKind checkpoint_kind(const io::json& header) {
  const std::string kind = header.value("kind", "");
  if (kind == "central") return CheckpointKind::Central;
  if (kind == "adapted") return CheckpointKind::Adapted;
  fail(ErrorKind::Io, "unknown checkpoint kind '" + kind + "'");
}

LoadedModel load_model(const fs::path& dir, bool use_ema) {
  LoadedModel m;
  m.header = read_checkpoint_header(dir);
  verify_hashes(dir, m.header);
  m.kind = checkpoint_kind(m.header);
  m.schedule = NoiseSchedule::from_json(m.header.at("schedule"));
  m.net = std::make_unique<EpsNet<float>>(EpsNetConfig::from_json(m.header.at("net")), 0);
  const auto params = read_param_file(dir / "params");
  m.net->parameters().load_entries(only_partition(params, Partition::Backbone));
  if (m.kind == CheckpointKind::Adapted) {
    m.adapter = std::make_unique<FilmAdapter<float>>(AdapterConfig::from_json(m.header.at("adapter")),
                                                     m.net->film_targets(), 0);
    m.adapter->parameters().load_entries(only_partition(params, Partition::Adapter));
    require(backbone_checksum(*m.net) == m.header.value("backbone_sha256", ""), ErrorKind::Integrity,
            "backbone weights in " + dir.string() + " differ from the recorded checksum");
  }
  if (use_ema) {
    const auto ema = read_param_file(dir / "ema");
    if (m.kind == CheckpointKind::Adapted) {
      m.adapter->parameters().load_entries(ema);
    } else {
      m.net->parameters().load_entries(ema);
    }
  }
  return m;
}

void resume(const fs::path& dir, Pretrainer<float>& trainer) {
  const io::json header = read_checkpoint_header(dir);
  verify_hashes(dir, header);
  require(checkpoint_kind(header) == CheckpointKind::Central, ErrorKind::Config,
          "cannot resume pretraining from an adapted checkpoint");
  trainer.net().parameters().load_entries(read_param_file(dir / "params"));
  restore_common(dir, header, trainer);
}

void resume(const fs::path& dir, AdaptTrainer<float>& trainer) {
  const io::json header = read_checkpoint_header(dir);
  verify_hashes(dir, header);
  require(checkpoint_kind(header) == CheckpointKind::Adapted, ErrorKind::Config,
          "cannot resume adaptation from a central checkpoint");
  const auto params = read_param_file(dir / "params");
  trainer.net().parameters().load_entries(only_partition(params, Partition::Backbone));
  trainer.adapter().parameters().load_entries(only_partition(params, Partition::Adapter));
  require(backbone_checksum(trainer.net()) == header.value("backbone_sha256", ""), ErrorKind::Integrity,
          "backbone weights in " + dir.string() + " differ from the recorded checksum");
  restore_common(dir, header, trainer);
}

}  // namespace c2l
