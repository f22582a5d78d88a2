#pragma once

#include <functional>
#include <string>
#include <vector>

#include "c2l/io.hpp"

namespace c2l::pipeline {

// Command pipeline over a simulated federation. Artifacts:
//
//   toydata     <out>.{json,bin,index.csv}   slide dataset (+ <out>.preview.png)
//   pretrain    <out>/                       central checkpoint
//   distribute  <center>/central/, <center>/data/slide.*
//   adapt       <center>/split.json, <center>/data/{adapt,test}.*, <center>/adapted/
//   generate    <center>/synthetic/syn.*
//   cotrain     <center>/predictor_k<k>/     regressor + report.json
//   evaluate    <predictor>/evaluation.json (+ optional per-gene CSV)
//
// Every run writes config.resolved.json and manifest.json next to its outputs
// (for toydata: <out>.config.json and <out>.manifest.json). Relative paths in
// a config resolve against the output root.

using Logger = std::function<void(const std::string&)>;

const std::vector<std::string>& commands();

// Defaults for every key the command reads.
io::json default_config(const std::string& command);

// Runs a command. `config` is merged over the defaults (unknown keys are a
// Config error). Returns the manifest, with the evaluation report under
// "report" for cotrain and evaluate.
io::json run(const std::string& command, const io::json& config, const Logger& log = {});

// Root for relative paths: $C2L_OUTPUT_ROOT, else the working directory.
std::filesystem::path output_root();

// RFC 7386 style merge limited to objects: keys of `patch` replace or recurse.
io::json merge(const io::json& base, const io::json& patch);

// SHA-256 of the canonical (sorted-key, compact) JSON dump.
std::string config_hash(const io::json& config);

}  // namespace c2l::pipeline
