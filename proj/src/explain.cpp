// SPDX-License-Identifier: Apache-2.0
#include "dpf/explain.hpp"

#include <algorithm>
#include <cmath>

#include "dpf/error.hpp"
#include "dpf/image_io.hpp"

namespace dpf {

Heatmap grad_cam(FusionModel& model, const ModelExample& example, int task, int layer) {
  if (task < 0 || task >= 5) throw LookupError("grad_cam: unknown task index " + std::to_string(task));
  if (layer > 4) throw LookupError("grad_cam: layer must be in [0,4] or negative for F_4");
  bool fusion_mode = model.config().ablation_mode == AblationMode::multiscale ||
                     model.config().ablation_mode == AblationMode::multiscale_cab;
  if (layer >= 0 && !fusion_mode) {
    throw LookupError("grad_cam: fused pyramid layers exist only in multi-scale modes");
  }

  bool was_training = model.is_training();
  model.set_training(false);

  int64_t h = example.rgb.dim(1), w = example.rgb.dim(2);
  Var rgb(example.rgb.reshaped({1, 3, h, w}));
  Var depth(example.depth3.reshaped({1, 3, h, w}));

  FusionModel::Trace trace;
  Var out = model.forward(rgb, depth, &trace);

  // Scalar objective: the raw head output for this task.
  Tensor onehot({1, 5});
  onehot(0, task) = 1.0;
  Var scalar = ops::scale(ops::mean_all(ops::mul(out, ops::constant(onehot))), 5.0);
  model.zero_grad();
  backward(scalar);
  model.set_training(was_training);

  Var target = layer >= 0 ? trace.fused[static_cast<size_t>(layer)] : trace.f4;
  const Tensor& activ = target.value();
  if (!target.node->grad.defined()) {
    // Constant head: no gradient reached the feature map.
    Heatmap degenerate{Tensor({h, w}), std::string(NutrientVector::names()[task]),
                       example.dish_id, true};
    return degenerate;
  }
  const Tensor& grad = target.node->grad;
  int64_t c = activ.dim(1), fh = activ.dim(2), fw = activ.dim(3);

  // Channel weights: spatially averaged gradients.
  std::vector<double> alpha(static_cast<size_t>(c), 0.0);
  for (int64_t ch = 0; ch < c; ++ch) {
    double acc = 0;
    for (int64_t j = 0; j < fh * fw; ++j) acc += grad.data()[ch * fh * fw + j];
    alpha[static_cast<size_t>(ch)] = acc / static_cast<double>(fh * fw);
  }

  Tensor cam({fh, fw});
  for (int64_t j = 0; j < fh * fw; ++j) {
    double acc = 0;
    for (int64_t ch = 0; ch < c; ++ch) acc += alpha[static_cast<size_t>(ch)] * activ.data()[ch * fh * fw + j];
    cam.data()[j] = std::max(0.0, acc);
  }

  Heatmap result;
  result.task = std::string(NutrientVector::names()[task]);
  result.dish_id = example.dish_id;
  double lo = cam.min(), hi = cam.max();
  if (hi - lo <= 0.0) {
    result.values = Tensor({h, w});
    result.degenerate = true;
    return result;
  }
  for (double& v : cam.vec()) v = (v - lo) / (hi - lo);
  result.values = bilinear_resize(cam, h, w);
  // Resampling cannot exceed [0,1], but renormalize the peak exactly.
  double peak = result.values.max();
  if (peak > 0) {
    for (double& v : result.values.vec()) v /= peak;
  }
  return result;
}

Tensor apply_colormap(const Tensor& map01) {
  if (map01.ndim() != 2) throw ShapeError("apply_colormap expects (H,W)");
  // Five viridis-like stops; green rises monotonically.
  static const double stops[5][3] = {{0.267, 0.005, 0.329},
                                     {0.229, 0.322, 0.546},
                                     {0.127, 0.566, 0.551},
                                     {0.369, 0.789, 0.383},
                                     {0.993, 0.906, 0.144}};
  int64_t h = map01.dim(0), w = map01.dim(1);
  Tensor out({3, h, w});
  for (int64_t j = 0; j < h * w; ++j) {
    double t = std::clamp(map01.data()[j], 0.0, 1.0) * 4.0;
    int k = std::min(3, static_cast<int>(t));
    double f = t - k;
    for (int c = 0; c < 3; ++c) {
      out.data()[c * h * w + j] = stops[k][c] + (stops[k + 1][c] - stops[k][c]) * f;
    }
  }
  return out;
}

Tensor render_depth_image(const DepthMap& d) {
  DepthMap n = d.normalized ? d : normalize_depth(d);
  return apply_colormap(n.values);
}

Tensor side_by_side(const std::vector<Tensor>& panels) {
  if (panels.empty()) throw ValueError("side_by_side: no panels");
  int64_t h = panels[0].dim(1);
  int64_t total_w = 0;
  for (const auto& p : panels) {
    if (p.ndim() != 3 || p.dim(0) != 3 || p.dim(1) != h) {
      throw ShapeError("side_by_side: panels must be (3,H,W) with equal H");
    }
    total_w += p.dim(2);
  }
  Tensor out({3, h, total_w});
  int64_t x_off = 0;
  for (const auto& p : panels) {
    int64_t w = p.dim(2);
    for (int c = 0; c < 3; ++c) {
      for (int64_t y = 0; y < h; ++y) {
        std::copy(p.data() + (c * h + y) * w, p.data() + (c * h + y) * w + w,
                  out.data() + (c * h + y) * total_w + x_off);
      }
    }
    x_off += w;
  }
  return out;
}

std::filesystem::path write_heatmap_png(const std::filesystem::path& dir, const Heatmap& map,
                                        const Tensor* rgb_underlay) {
  std::filesystem::create_directories(dir);
  auto path = dir / (map.dish_id + "_" + map.task + "_cam.png");
  Tensor colored = apply_colormap(map.values);
  if (rgb_underlay) {
    if (!rgb_underlay->same_shape(colored)) {
      throw ShapeError("heatmap underlay must match heatmap dims");
    }
    for (int64_t i = 0; i < colored.numel(); ++i) {
      colored.data()[i] = 0.5 * colored.data()[i] + 0.5 * rgb_underlay->data()[i];
    }
  }
  write_rgb_png(path, colored);
  return path;
}

std::filesystem::path write_depth_render_png(const std::filesystem::path& dir,
                                             const std::string& dish_id, const DepthMap& depth,
                                             const Tensor* rgb, const Tensor* sensor_depth) {
  std::filesystem::create_directories(dir);
  auto path = dir / (dish_id + "_depth.png");
  std::vector<Tensor> panels;
  if (rgb) panels.push_back(*rgb);
  panels.push_back(render_depth_image(depth));
  if (sensor_depth) {
    panels.push_back(render_depth_image(DepthMap{*sensor_depth, false}));
  }
  write_rgb_png(path, panels.size() == 1 ? panels[0] : side_by_side(panels));
  return path;
}

}  // namespace dpf
