#include "c2l/param_file.hpp"

#include "c2l/error.hpp"

namespace c2l {

std::filesystem::path param_bin_path(const std::filesystem::path& stem) {
  return std::filesystem::path(stem.string() + ".bin");
}

std::filesystem::path param_json_path(const std::filesystem::path& stem) {
  return std::filesystem::path(stem.string() + ".json");
}

void write_param_file(const std::filesystem::path& stem, const std::vector<ParamEntry>& entries,
                      const io::json& meta) {
  io::json index = io::json::array();
  std::size_t offset = 0;
  {
    auto out = io::open_out(param_bin_path(stem));
    for (const auto& e : entries) {
      require(shape_numel(e.shape) == e.values.size(), ErrorKind::Dimension,
              "param entry " + e.name + " has inconsistent shape");
      io::write_f32(out, e.values);
      index.push_back({{"name", e.name},
                       {"shape", e.shape},
                       {"offset", offset},
                       {"count", e.values.size()},
                       {"partition", e.partition}});
      offset += e.values.size() * sizeof(float);
    }
  }
  io::json sidecar = {{"format", "c2l-params"},
                      {"version", 1},
                      {"dtype", "float32"},
                      {"byte_order", "little"},
                      {"total_bytes", offset},
                      {"entries", index},
                      {"meta", meta}};
  io::write_json(param_json_path(stem), sidecar);
}

std::vector<ParamEntry> read_param_file(const std::filesystem::path& stem, io::json* meta) {
  io::require_exists(param_json_path(stem), "parameter sidecar");
  io::require_exists(param_bin_path(stem), "parameter array file");
  const io::json sidecar = io::read_json(param_json_path(stem));
  require(sidecar.value("format", "") == "c2l-params", ErrorKind::Io,
          "not a parameter sidecar: " + param_json_path(stem).string());
  require(sidecar.value("dtype", "") == "float32", ErrorKind::Io, "unsupported parameter dtype");
  auto in = io::open_in(param_bin_path(stem));
  std::vector<ParamEntry> entries;
  for (const auto& e : sidecar.at("entries")) {
    ParamEntry p;
    p.name = e.at("name").get<std::string>();
    p.shape = e.at("shape").get<Shape>();
    p.partition = e.value("partition", "");
    const auto offset = e.at("offset").get<std::size_t>();
    const auto count = e.at("count").get<std::size_t>();
    require(shape_numel(p.shape) == count, ErrorKind::Io, "param entry " + p.name + " shape/count mismatch");
    in.seekg(static_cast<std::streamoff>(offset));
    p.values = io::read_f32(in, count);
    entries.push_back(std::move(p));
  }
  if (meta) *meta = sidecar.value("meta", io::json::object());
  return entries;
}

}  // namespace c2l
