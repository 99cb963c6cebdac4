// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "dpf/nn.hpp"

namespace dpf {

// ---- configuration ----------------------------------------------------------

// Five pyramid levels: the backbone stem output plus its four stages.
inline constexpr int kPyramidLevels = 5;
inline constexpr std::array<int64_t, kPyramidLevels> kPyramidStrides = {4, 4, 8, 16, 32};

struct BackboneSpec {
  std::string id;
  std::array<int64_t, kPyramidLevels> channels;
  std::array<int, 4> stage_blocks;
  bool bottleneck = true;
  int64_t stem_kernel = 7;

  // Registry: "resnet50", "resnet101", "small" (desk scale), "micro"
  // (gradient-check scale). Unknown ids throw ConfigError.
  static BackboneSpec lookup(const std::string& id);
};

enum class AblationMode { rgb_only, depth_only, direct_fusion, multiscale, multiscale_cab };

AblationMode ablation_mode_from_string(const std::string& s);
std::string to_string(AblationMode m);
// (a)..(e) row ids in ablation-table order.
const std::array<AblationMode, 5>& all_ablation_modes();
std::string ablation_row_id(AblationMode m);

struct ModelConfig {
  std::string backbone = "resnet101";
  int64_t image_h = 336;
  int64_t image_w = 448;
  int64_t head_hidden = 2048;
  AblationMode ablation_mode = AblationMode::multiscale_cab;
  bool head_relu = true;  // nonlinearity after the shared 2048-wide layer
  // Multi-scale recursion input: the previous fused map F_{i-1} (default) or
  // the previous cross-modal map C_{i-1}.
  enum class RecursionInput { fused, raw };
  RecursionInput recursion_input = RecursionInput::fused;
  uint64_t seed = 0;

  void validate() const;
};

// ---- building blocks --------------------------------------------------------

struct FeaturePyramid {
  std::array<Var, kPyramidLevels> levels;
};

class ResidualBlock : public nn::Module {
 public:
  ResidualBlock(int64_t in_ch, int64_t out_ch, int64_t stride, bool bottleneck, Rng& rng);
  Var forward(const Var& x);

 private:
  bool bottleneck_;
  std::unique_ptr<nn::Conv2d> conv1_, conv2_, conv3_, proj_;
  std::unique_ptr<nn::BatchNorm2d> bn1_, bn2_, bn3_, bn_proj_;
};

// Hierarchical feature extractor: stem (conv + maxpool, stride 4) followed by
// four residual stages. Emits the 5-level pyramid.
class Backbone : public nn::Module {
 public:
  Backbone(const BackboneSpec& spec, Rng& rng);
  FeaturePyramid forward(const Var& x);
  const BackboneSpec& spec() const { return spec_; }

 private:
  BackboneSpec spec_;
  std::unique_ptr<nn::Conv2d> stem_;
  std::unique_ptr<nn::BatchNorm2d> stem_bn_;
  std::vector<std::unique_ptr<ResidualBlock>> blocks_;  // flattened stages
  std::array<int, 4> stage_offsets_{};
};

// Cross-modal attention block. Channel and spatial attention are computed
// from the element-wise sum of the two modality features and applied to both
// before concatenation and 1x1 projection back to C channels.
class CabBlock : public nn::Module {
 public:
  CabBlock(int64_t channels, Rng& rng);

  struct Attention {
    Var ca;  // (N,C,1,1), entries in (0,1)
    Var sa;  // (N,1,H,W), entries in (0,1)
  };
  Attention attention(const Var& r, const Var& d);
  Var fuse(const Var& r, const Var& d);
  // Test/diagnostic hook: fuse with externally supplied attention maps.
  Var fuse_with(const Var& r, const Var& d, const Var& ca, const Var& sa);

  nn::Conv2d ca_conv;
  nn::BatchNorm2d ca_bn;
  nn::Conv2d sa_conv;
  nn::BatchNorm2d sa_bn;
  nn::Conv2d proj;
};

// Attention-free per-level fusion (ablation row (d)): concat + 1x1 conv.
class ConcatFuseBlock : public nn::Module {
 public:
  ConcatFuseBlock(int64_t channels, Rng& rng);
  Var fuse(const Var& r, const Var& d);

  nn::Conv2d proj;
};

// ---- the model ---------------------------------------------------------------

enum class Stream { rgb, depth };

class FusionModel : public nn::Module {
 public:
  explicit FusionModel(const ModelConfig& config);

  // Intermediate activations captured during a traced forward (Grad-CAM and
  // the oracle tests read these).
  struct Trace {
    std::array<Var, kPyramidLevels> fused;
    Var f4;
    Var pooled;
    Var out;
  };

  // rgb, depth3: (N,3,H,W). Depth input is ignored in rgb_only mode and rgb
  // in depth_only mode (pass any same-shape tensor). Returns raw (N,5) head
  // outputs; reporting clamps at zero.
  Var forward(const Var& rgb, const Var& depth3, Trace* trace = nullptr);

  // Per-stream pyramid (throws ContractError if the mode lacks the stream).
  FeaturePyramid extract_pyramid(const Var& x, Stream stream);

  // Convenience single/multi-sample inference without autograd.
  Tensor predict(const Tensor& rgb_nchw, const Tensor& depth3_nchw);

  const ModelConfig& config() const { return config_; }
  const BackboneSpec& backbone_spec() const { return backbone_spec_; }

  bool has_rgb_stream() const { return rgb_stream_ != nullptr; }
  bool has_depth_stream() const { return depth_stream_ != nullptr; }

 private:
  Var head_forward(const Var& pooled_features);

  ModelConfig config_;
  BackboneSpec backbone_spec_;
  std::unique_ptr<Backbone> rgb_stream_;
  std::unique_ptr<Backbone> depth_stream_;
  std::vector<std::unique_ptr<CabBlock>> cabs_;
  std::vector<std::unique_ptr<ConcatFuseBlock>> concat_fuse_;
  std::vector<std::unique_ptr<ResidualBlock>> res_fuse_;  // Res_1..Res_4
  std::unique_ptr<nn::Linear> shared_fc_;
  std::vector<std::unique_ptr<nn::Linear>> heads_;
};

// Reporting-layer clamp: negative estimates floor at zero.
Tensor clamp_nonnegative(Tensor values);

}  // namespace dpf
