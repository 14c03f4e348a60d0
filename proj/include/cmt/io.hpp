#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "cmt/tensor.hpp"

namespace cmt::io {

namespace fs = std::filesystem;

std::string read_file(const fs::path& path);
// Writes to a sibling temp file, then renames over `path`.
void write_file_atomic(const fs::path& path, std::string_view bytes);

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

// Image files with a supported extension (.png .pgm .ppm), sorted by name.
std::vector<fs::path> list_images(const fs::path& dir);
bool is_image_path(const fs::path& path);

// 8-bit image as [c,h,w] in [0,1], c = 1 (gray) or 3 (RGB); alpha is dropped.
Tensor read_image(const fs::path& path);
// Quantizes to 8 bits (clamped, round half to even) and writes by extension.
// PGM takes 1 channel, PPM 3, PNG either.
void write_image(const fs::path& path, const Tensor& image);

std::uint8_t quantize(double v);

// Bilinear resampling with half-pixel centers.
Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width);
// Gray -> 3 identical channels; RGB unchanged.
Tensor to_rgb(const Tensor& image);

}  // namespace cmt::io
