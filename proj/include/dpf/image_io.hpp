// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>

#include "dpf/tensor.hpp"

namespace dpf {

// PNG + raw-grid image IO. RGB images move through the library as (3,H,W)
// tensors in [0,1]; depth maps as (H,W) tensors in native units.

Tensor read_rgb_png(const std::filesystem::path& path);
void write_rgb_png(const std::filesystem::path& path, const Tensor& rgb);

// Reads 8- or 16-bit single-channel PNG as raw counts (no scaling).
Tensor read_depth_png(const std::filesystem::path& path);
// Writes a 16-bit PNG; values are clamped to [0, 65535] after scaling.
void write_depth_png16(const std::filesystem::path& path, const Tensor& depth, double scale);

// Bare float32 grid: uint32 height, uint32 width, then h*w little-endian
// floats. Lossless enough for sensor passthrough round trips at desk scale.
Tensor read_depth_raw(const std::filesystem::path& path);
void write_depth_raw(const std::filesystem::path& path, const Tensor& depth);

// 8-bit grayscale PNG of a [0,1] map.
void write_gray_png(const std::filesystem::path& path, const Tensor& map01);

}  // namespace dpf
