#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "c2l/io.hpp"
#include "c2l/tensor.hpp"

namespace c2l {

// One named array in a parameter file. `partition` is "backbone", "adapter"
// or empty for state that belongs to neither (optimizer moments, etc.).
struct ParamEntry {
  std::string name;
  Shape shape;
  std::string partition;
  std::vector<float> values;
};

// Writes <stem>.bin (concatenated little-endian float32 arrays) and
// <stem>.json (sidecar listing name, shape, byte offset and partition of each
// array, plus caller metadata under "meta").
void write_param_file(const std::filesystem::path& stem, const std::vector<ParamEntry>& entries,
                      const io::json& meta = io::json::object());

std::vector<ParamEntry> read_param_file(const std::filesystem::path& stem, io::json* meta = nullptr);

std::filesystem::path param_bin_path(const std::filesystem::path& stem);
std::filesystem::path param_json_path(const std::filesystem::path& stem);

}  // namespace c2l
