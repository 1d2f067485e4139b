#pragma once

#include <filesystem>

#include "sv4d/common.hpp"

namespace sv4d {

/// 8-bit PNG round trip. 3-channel images are written as RGB, 1-channel as
/// grayscale. Values are clamped to [0,1] and quantized to 255 levels.
void write_png(const Image& image, const std::filesystem::path& path);
Image read_png(const std::filesystem::path& path);

}  // namespace sv4d
