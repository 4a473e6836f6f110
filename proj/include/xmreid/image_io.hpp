#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "xmreid/tensor.hpp"

namespace xmreid::io {

/// 8-bit interleaved raster.
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> pixels;
};

void write_png(const std::filesystem::path& path, const Raster& raster);
Raster read_png(const std::filesystem::path& path);

/// [C x H x W] in [-1, 1] -> 8-bit raster (values clamped).
Raster to_raster(const Tensor& chw);
/// 8-bit raster -> [C x H x W] in [-1, 1].
Tensor from_raster(const Raster& raster);

}  // namespace xmreid::io
