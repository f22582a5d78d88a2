#pragma once

#include <filesystem>
#include <memory>

#include "c2l/train.hpp"

namespace c2l {

// A checkpoint is a directory:
//   checkpoint.json   kind, configs, schedule, step, RNG state, file hashes
//   params.{bin,json} raw backbone (+ adapter) weights
//   ema.{bin,json}    EMA shadows of the trained parameter set
//   optim.{bin,json}  AdamW moments
// Central checkpoints hold the pretraining state; adapted checkpoints hold
// the frozen backbone plus the adapter and its training state.
enum class CheckpointKind { Central, Adapted };
const char* to_string(CheckpointKind k);

inline constexpr const char* kCheckpointFile = "checkpoint.json";

void save_checkpoint(const std::filesystem::path& dir, Pretrainer<float>& trainer,
                     const io::json& extra = io::json::object());
void save_checkpoint(const std::filesystem::path& dir, AdaptTrainer<float>& trainer,
                     const io::json& extra = io::json::object());

// Reads and validates checkpoint.json; MissingArtifact names the expected path.
io::json read_checkpoint_header(const std::filesystem::path& dir);
CheckpointKind checkpoint_kind(const io::json& header);

struct LoadedModel {
  io::json header;
  CheckpointKind kind = CheckpointKind::Central;
  NoiseSchedule schedule;
  std::unique_ptr<EpsNet<float>> net;
  std::unique_ptr<FilmAdapter<float>> adapter;  // adapted checkpoints only
};

// Model for sampling or as the starting point of adaptation. With use_ema the
// EMA shadows replace the raw weights of the trained parameter set.
LoadedModel load_model(const std::filesystem::path& dir, bool use_ema = true);

// Restores weights, EMA, optimizer moments, RNG state and step counter into a
// trainer built from the checkpoint's own configs, so that continuing
// reproduces an uninterrupted run bit for bit.
void resume(const std::filesystem::path& dir, Pretrainer<float>& trainer);
void resume(const std::filesystem::path& dir, AdaptTrainer<float>& trainer);

}  // namespace c2l
