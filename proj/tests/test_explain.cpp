// SPDX-License-Identifier: Apache-2.0
// Grad-CAM heatmaps and depth renderings.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "dpf/dataset.hpp"
#include "dpf/error.hpp"
#include "dpf/explain.hpp"
#include "dpf/image_io.hpp"
#include "test_util.hpp"

using namespace dpf;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model_config(uint64_t seed, AblationMode mode = AblationMode::multiscale_cab) {
  ModelConfig cfg;
  cfg.backbone = "micro";
  cfg.image_h = cfg.image_w = 32;
  cfg.head_hidden = 12;
  cfg.ablation_mode = mode;
  cfg.seed = seed;
  return cfg;
}

ModelExample one_example(uint64_t seed) {
  SyntheticSceneSpec spec;
  spec.seed = seed;
  spec.n_blobs = 2;
  spec.height = 32;
  spec.width = 32;
  spec.class_densities = SyntheticSceneSpec::default_densities();
  DepthProviderConfig pc;
  pc.kind = DepthProviderKind::synthetic_oracle;
  auto provider = make_depth_provider(pc);
  return prepare_example(generate_synthetic(spec), provider.get());
}

}  // namespace

TEST_CASE("grad_cam contract: shape, range, normalization, determinism") {
  FusionModel model(tiny_model_config(1));
  ModelExample ex = one_example(10);
  Heatmap cam = grad_cam(model, ex, /*task=*/0);
  CHECK(cam.values.shape() == std::vector<int64_t>{32, 32});
  CHECK(cam.values.min() >= 0.0);
  CHECK(cam.values.max() <= 1.0);
  if (!cam.degenerate) CHECK(cam.values.max() == doctest::Approx(1.0));
  CHECK(cam.task == "calories");

  Heatmap again = grad_cam(model, ex, 0);
  for (int64_t i = 0; i < cam.values.numel(); ++i) {
    CHECK(cam.values.data()[i] == again.values.data()[i]);
  }

  CHECK_THROWS_AS(grad_cam(model, ex, 9), LookupError);
  CHECK_THROWS_AS(grad_cam(model, ex, 0, 7), LookupError);
}

TEST_CASE("grad_cam works at every fused pyramid level") {
  FusionModel model(tiny_model_config(2));
  ModelExample ex = one_example(20);
  for (int layer = 0; layer < 5; ++layer) {
    Heatmap cam = grad_cam(model, ex, 2, layer);
    CHECK(cam.values.shape() == std::vector<int64_t>{32, 32});
  }
  // Fused layers do not exist in rgb_only mode; F_4 still does.
  FusionModel rgb_model(tiny_model_config(3, AblationMode::rgb_only));
  CHECK_THROWS_AS(grad_cam(rgb_model, ex, 0, 2), LookupError);
  Heatmap f4 = grad_cam(rgb_model, ex, 0, -1);
  CHECK(f4.values.shape() == std::vector<int64_t>{32, 32});
}

TEST_CASE("grad_cam never mutates parameters and flags degenerate gradients") {
  FusionModel model(tiny_model_config(4));
  // Constant head for task 3: zero weights and bias.
  for (auto& [name, p] : model.named_parameters()) {
    if (name.rfind("head3", 0) == 0) p->value().fill(0.0);
  }
  uint64_t before = model.state_hash();
  ModelExample ex = one_example(30);
  Heatmap degenerate = grad_cam(model, ex, 3);
  CHECK(degenerate.degenerate);
  CHECK(degenerate.values.max() == 0.0);
  // Layer 1 keeps real spatial extent (8x8 here); the final 1x1 map of an
  // untrained micro model collapses to a single ReLU'd value half the time.
  Heatmap live = grad_cam(model, ex, 0, /*layer=*/1);
  CHECK_FALSE(live.degenerate);
  CHECK(model.state_hash() == before);
}

TEST_CASE("five tasks yield generally distinct heatmaps") {
  FusionModel model(tiny_model_config(5));
  ModelExample ex = one_example(40);
  std::vector<Heatmap> cams;
  for (int task = 0; task < 5; ++task) cams.push_back(grad_cam(model, ex, task, /*layer=*/1));
  int distinct_pairs = 0;
  for (int a = 0; a < 5; ++a) {
    for (int b = a + 1; b < 5; ++b) {
      double max_diff = 0;
      for (int64_t i = 0; i < cams[static_cast<size_t>(a)].values.numel(); ++i) {
        max_diff = std::max(max_diff,
                            std::fabs(cams[static_cast<size_t>(a)].values.data()[i] -
                                      cams[static_cast<size_t>(b)].values.data()[i]));
      }
      if (max_diff > 0) ++distinct_pairs;
    }
  }
  CHECK(distinct_pairs == 10);
}

TEST_CASE("colormap: constant map renders uniform color, gradient is monotone in green") {
  Tensor flat = Tensor::full({4, 4}, 0.6);
  Tensor colored = apply_colormap(flat);
  CHECK(colored.shape() == std::vector<int64_t>{3, 4, 4});
  for (int c = 0; c < 3; ++c) {
    for (int64_t i = 1; i < 16; ++i) {
      CHECK(colored.data()[c * 16 + i] == colored.data()[c * 16]);
    }
  }

  Tensor ramp({1, 32});
  for (int64_t i = 0; i < 32; ++i) ramp(0, i) = i / 31.0;
  Tensor ramp_colored = apply_colormap(ramp);
  for (int64_t i = 1; i < 32; ++i) {
    CHECK(ramp_colored(1, 0, i) >= ramp_colored(1, 0, i - 1));  // green channel monotone
  }
}

TEST_CASE("render_depth handles raw maps and side-by-side layout sums widths") {
  DepthMap d{Tensor::from({2, 3}, {0, 1, 2, 3, 4, 5}), false};
  Tensor img = render_depth_image(d);
  CHECK(img.shape() == std::vector<int64_t>{3, 2, 3});

  Tensor a = Tensor::full({3, 2, 3}, 0.2);
  Tensor b = Tensor::full({3, 2, 5}, 0.4);
  Tensor c = Tensor::full({3, 2, 4}, 0.6);
  Tensor wide = side_by_side({a, b, c});
  CHECK(wide.shape() == std::vector<int64_t>{3, 2, 12});
  CHECK(wide(0, 0, 0) == 0.2);
  CHECK(wide(0, 0, 3) == 0.4);
  CHECK(wide(0, 0, 8) == 0.6);
  CHECK_THROWS_AS(side_by_side({a, Tensor::full({3, 3, 3}, 0.1)}), ShapeError);
}

TEST_CASE("explain outputs follow the naming scheme") {
  auto dir = fs::temp_directory_path() / "dpf_explain_out";
  fs::remove_all(dir);
  FusionModel model(tiny_model_config(6));
  ModelExample ex = one_example(50);
  Heatmap cam = grad_cam(model, ex, 4);
  auto cam_path = write_heatmap_png(dir, cam, &ex.rgb);
  CHECK(cam_path.filename().string() == ex.dish_id + "_protein_cam.png");
  CHECK(fs::exists(cam_path));

  DepthMap d{ex.depth3.reshaped({3, 32, 32}), false};
  DepthMap plain{Tensor::from({32, 32}, std::vector<double>(32 * 32, 1.0)), false};
  // rgb + rendered depth side by side.
  Tensor sensor = Tensor::full({32, 32}, 2.0);
  auto depth_path = write_depth_render_png(dir, ex.dish_id, plain, &ex.rgb, &sensor);
  CHECK(depth_path.filename().string() == ex.dish_id + "_depth.png");
  Tensor reloaded = read_rgb_png(depth_path);
  CHECK(reloaded.dim(2) == 3 * 32);  // three panels wide
  fs::remove_all(dir);
}
