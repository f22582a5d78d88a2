#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace c2l::io {

namespace fs = std::filesystem;
using nlohmann::json;

// Process-wide path guard. When a root is set, every file opened through this
// module must resolve inside it; anything else is an integrity error. Used to
// keep a center's adaptation run confined to its own directory.
void set_path_guard(std::optional<fs::path> root);
std::optional<fs::path> path_guard();
void check_path(const fs::path& p);
// Every path opened since the last reset (absolute, normalized).
std::vector<fs::path> opened_paths();
void reset_opened_paths();

std::ifstream open_in(const fs::path& p);
std::ofstream open_out(const fs::path& p);

std::string read_text(const fs::path& p);
void write_text(const fs::path& p, const std::string& text);
json read_json(const fs::path& p);
void write_json(const fs::path& p, const json& j);

std::vector<float> read_f32(std::ifstream& in, std::size_t count);
void write_f32(std::ofstream& out, std::span<const float> values);

std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_hex(const std::string& text);
std::string sha256_file(const fs::path& p);

// Throws MissingArtifact naming `what` when p does not exist.
void require_exists(const fs::path& p, const std::string& what);

}  // namespace c2l::io
