#pragma once

#include <filesystem>
#include <vector>

#include "c2l/tensor.hpp"

namespace c2l {

// Tiles [C, S, S] patches in [-1, 1] into one 8-bit RGB PNG, `cols` per row,
// each pixel repeated `zoom` times. Single-channel patches are drawn gray.
void write_png_grid(const std::filesystem::path& path, const std::vector<std::vector<float>>& patches,
                    const Shape& patch_shape, std::size_t cols = 10, std::size_t zoom = 4);

}  // namespace c2l
