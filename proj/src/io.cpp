#include "c2l/io.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <mutex>
#include <sstream>

#include "c2l/error.hpp"

namespace c2l::io {

namespace {

std::mutex g_mutex;
std::optional<fs::path> g_root;
std::vector<fs::path> g_opened;

fs::path normalized(const fs::path& p) { return fs::weakly_canonical(fs::absolute(p)); }

bool is_within(const fs::path& p, const fs::path& root) {
  auto rel = p.lexically_relative(root);
  if (rel.empty()) return false;
  auto first = *rel.begin();
  return first != "..";
}

}  // namespace

void set_path_guard(std::optional<fs::path> root) {
  std::lock_guard lock(g_mutex);
  g_root = root ? std::optional<fs::path>(normalized(*root)) : std::nullopt;
}

std::optional<fs::path> path_guard() {
  std::lock_guard lock(g_mutex);
  return g_root;
}

void check_path(const fs::path& p) {
  const fs::path abs = normalized(p);
  std::lock_guard lock(g_mutex);
  g_opened.push_back(abs);
  if (g_root && !is_within(abs, *g_root)) {
    fail(ErrorKind::Integrity,
         "path guard: " + abs.string() + " is outside the allowed root " + g_root->string());
  }
}

std::vector<fs::path> opened_paths() {
  std::lock_guard lock(g_mutex);
  return g_opened;
}

void reset_opened_paths() {
  std::lock_guard lock(g_mutex);
  g_opened.clear();
}

void require_exists(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) fail(ErrorKind::MissingArtifact, what + " not found: expected " + p.string());
}

std::ifstream open_in(const fs::path& p) {
  check_path(p);
  require_exists(p, "file");
  std::ifstream in(p, std::ios::binary);
  require(in.good(), ErrorKind::Io, "cannot open " + p.string() + " for reading");
  return in;
}

std::ofstream open_out(const fs::path& p) {
  check_path(p);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::Io, "cannot open " + p.string() + " for writing");
  return out;
}

std::string read_text(const fs::path& p) {
  auto in = open_in(p);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  auto out = open_out(p);
  out << text;
  require(out.good(), ErrorKind::Io, "write failed: " + p.string());
}

json read_json(const fs::path& p) {
  try {
    return json::parse(read_text(p));
  } catch (const json::exception& e) {
    fail(ErrorKind::Io, "malformed JSON in " + p.string() + ": " + e.what());
  }
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

std::vector<float> read_f32(std::ifstream& in, std::size_t count) {
  std::vector<float> v(count);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * sizeof(float)));
  require(static_cast<std::size_t>(in.gcount()) == count * sizeof(float), ErrorKind::Io,
          "truncated float array");
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& f : v) f = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<std::uint32_t>(f)));
  }
  return v;
}

void write_f32(std::ofstream& out, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::big) {
    for (float f : values) {
      auto u = __builtin_bswap32(std::bit_cast<std::uint32_t>(f));
      out.write(reinterpret_cast<const char*>(&u), sizeof u);
    }
  } else {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(float)));
  }
  require(out.good(), ErrorKind::Io, "write of float array failed");
}

std::string sha256_hex(std::span<const unsigned char> bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  require(EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) == 1,
          ErrorKind::Io, "sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (unsigned i = 0; i < len; ++i) {
    s += hex[digest[i] >> 4];
    s += hex[digest[i] & 15];
  }
  return s;
}

std::string sha256_hex(const std::string& text) {
  return sha256_hex(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

std::string sha256_file(const fs::path& p) { return sha256_hex(read_text(p)); }

}  // namespace c2l::io
