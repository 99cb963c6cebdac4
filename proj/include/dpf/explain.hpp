// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "dpf/depth.hpp"
#include "dpf/training.hpp"

namespace dpf {

struct Heatmap {
  Tensor values;  // (H,W) in [0,1]; max is 1 unless degenerate
  std::string task;
  std::string dish_id;
  bool degenerate = false;  // all-zero gradient (constant head)
};

// Gradient-weighted activation map for one nutrient task at one pyramid
// level. layer in [0,4] selects a fused pyramid level (fusion modes only);
// layer < 0 selects the final feature F_4 in any mode. The map is ReLU'd,
// min-max normalized, and bilinearly upsampled to the input size. Model
// parameters are left untouched.
Heatmap grad_cam(FusionModel& model, const ModelExample& example, int task, int layer = -1);

// Five-stop perceptual colormap applied to a [0,1] map; returns (3,H,W). The
// green channel increases monotonically with the input value.
Tensor apply_colormap(const Tensor& map01);

// Colormapped rendering of a depth map (min-max normalized internally).
Tensor render_depth_image(const DepthMap& d);

// Horizontal panel concat; all panels (3,H,W) with equal H.
Tensor side_by_side(const std::vector<Tensor>& panels);

// Writes <dish_id>_<task>_cam.png: heatmap blended over the sample rgb.
std::filesystem::path write_heatmap_png(const std::filesystem::path& dir, const Heatmap& map,
                                        const Tensor* rgb_underlay = nullptr);

// Writes <dish_id>_depth.png: [rgb | predicted depth | optional sensor depth].
std::filesystem::path write_depth_render_png(const std::filesystem::path& dir,
                                             const std::string& dish_id, const DepthMap& depth,
                                             const Tensor* rgb = nullptr,
                                             const Tensor* sensor_depth = nullptr);

}  // namespace dpf
