#include "c2l/preview.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "c2l/error.hpp"
#include "c2l/io.hpp"

namespace c2l {

void write_png_grid(const std::filesystem::path& path, const std::vector<std::vector<float>>& patches,
                    const Shape& patch_shape, std::size_t cols, std::size_t zoom) {
  require(!patches.empty(), ErrorKind::Contract, "no patches to preview");
  require(patch_shape.size() == 3 && cols > 0 && zoom > 0, ErrorKind::Dimension, "preview expects [C, S, S] patches");
  io::check_path(path);
  const std::size_t C = patch_shape[0], H = patch_shape[1], W = patch_shape[2];
  cols = std::min(cols, patches.size());
  const std::size_t rows = (patches.size() + cols - 1) / cols;
  const std::size_t width = cols * W * zoom, height = rows * H * zoom;
  std::vector<png_byte> image(width * height * 3, 255);
  for (std::size_t n = 0; n < patches.size(); ++n) {
    require(patches[n].size() == C * H * W, ErrorKind::Dimension, "preview patch has the wrong size");
    const std::size_t oy = (n / cols) * H * zoom, ox = (n % cols) * W * zoom;
    for (std::size_t i = 0; i < H * zoom; ++i) {
      for (std::size_t j = 0; j < W * zoom; ++j) {
        for (std::size_t c = 0; c < 3; ++c) {
          const float v = patches[n][(std::min(c, C - 1) * H + i / zoom) * W + j / zoom];
          const double byte = std::round((std::clamp(v, -1.f, 1.f) + 1.0) * 127.5);
          image[((oy + i) * width + ox + j) * 3 + c] = static_cast<png_byte>(byte);
        }
      }
    }
  }
  std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "wb"), &std::fclose);
  require(file != nullptr, ErrorKind::Io, "cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorKind::Io, "libpng failed while writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y) png_write_row(png, &image[y * width * 3]);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace c2l
