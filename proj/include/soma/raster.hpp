#pragma once

#include <filesystem>

#include <torch/torch.h>

namespace soma {

/// Reads an 8/16-bit (or float) grayscale/RGB raster as (C, H, W) float32,
/// normalized to [0, 1]. Alpha channels are dropped.
torch::Tensor read_raster(const std::filesystem::path& path);

/// Writes (C, H, W) values in [0, 1]. PNG/JPEG get 8 bits, .tif/.tiff are
/// written losslessly as 32-bit float.
void write_raster(const std::filesystem::path& path, const torch::Tensor& image);

} // namespace soma
