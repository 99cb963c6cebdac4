// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "dpf/dataset.hpp"
#include "dpf/nn.hpp"
#include "dpf/tensor.hpp"

namespace dpf {

// ---- depth map -------------------------------------------------------------

struct DepthMap {
  Tensor values;  // (H,W), finite, >= 0
  bool normalized = false;
  void validate() const;
};

// Per-image min-max rescale to [0,1]; constant maps become all-zeros.
// Idempotent and scale-invariant on non-constant maps.
DepthMap normalize_depth(const DepthMap& d);

// Replicates a normalized map to 3 channels so the depth stream can reuse
// standard RGB backbones. Throws ContractError on unnormalized input.
Tensor depth_to_backbone_input(const DepthMap& d);

// ---- token reassembly (transformer-to-grid contracts) ----------------------

struct TokenGrid {
  Tensor tokens;  // (N_p, D)
  int64_t grid_h = 0;
  int64_t grid_w = 0;
  void validate() const;  // N_p == grid_h * grid_w, D > 0
};

struct ImageLikeFeature {
  Tensor values;  // (h, w, D)
};

// Places token n at its row-major grid cell: (N_p, D) -> (grid_h, grid_w, D).
// Values are copied, not transformed.
ImageLikeFeature reassemble_concatenate(const TokenGrid& tokens);

// Row-major flatten; exact inverse of reassemble_concatenate.
TokenGrid flatten_feature(const ImageLikeFeature& f);

// Resamples an (H/p, W/p, D) feature to (H/s, W/s, D') via a 1x1 channel
// projection plus a strided (transposed) convolution. p/s or s/p must be an
// integer factor.
class ResampleBlock {
 public:
  ResampleBlock(int64_t d_in, int64_t d_out, int64_t src_stride, int64_t target_stride,
                Rng& rng);
  // Shape-preserving configuration (s == p, D' == D) that also preserves
  // values exactly.
  static ResampleBlock identity(int64_t d, int64_t stride);

  ImageLikeFeature apply(const ImageLikeFeature& f) const;
  int64_t d_out() const { return d_out_; }

 private:
  ResampleBlock() = default;
  int64_t d_in_ = 0, d_out_ = 0;
  int64_t factor_ = 1;  // spatial scale factor
  bool upsample_ = false;
  Tensor projection_;  // (D', D, 1, 1)
  Tensor spatial_;     // conv (D',D',f,f) or convT (D',D',f,f); undefined when factor==1
};

// ---- providers --------------------------------------------------------------

enum class DepthProviderKind { pretrained, sensor_passthrough, synthetic_oracle };

DepthProviderKind depth_provider_kind_from_string(const std::string& s);
std::string to_string(DepthProviderKind k);

struct DepthProviderConfig {
  DepthProviderKind kind = DepthProviderKind::sensor_passthrough;
  std::optional<std::string> weights_path;
  bool fine_tune = false;
  void validate() const;  // weights_path required iff kind == pretrained
};

// Small convolutional encoder-decoder used behind the pretrained-provider
// adapter at desk scale. Fully convolutional; output is softplus-activated so
// predictions are non-negative. Input spatial dims should be multiples of 4;
// the provider resizes otherwise.
class DeskDepthNet : public nn::Module {
 public:
  explicit DeskDepthNet(uint64_t seed);
  Var forward(const Var& rgb);  // (N,3,H,W) -> (N,1,H,W)

 private:
  Rng rng_;

 public:
  nn::Conv2d enc1, enc2, enc3;
  nn::BatchNorm2d bn1, bn2, bn3;
  nn::ConvTranspose2d up1, up2;
  nn::BatchNorm2d bn4, bn5;
  nn::Conv2d head;
};

// Yields a depth map for a sample. Providers are read-only after
// construction and safe for concurrent predict() calls.
class DepthProvider {
 public:
  virtual ~DepthProvider() = default;
  virtual DepthMap predict(const RGBDSample& sample) const = 0;
  virtual std::string name() const = 0;
};

// Factory for the three provider kinds. For `pretrained`, weights_path must
// point at a DPFN checkpoint holding DeskDepthNet weights (see
// save_depth_weights); a missing or corrupt file throws.
std::unique_ptr<DepthProvider> make_depth_provider(const DepthProviderConfig& config);

void save_depth_weights(const std::filesystem::path& path, DeskDepthNet& net);
void load_depth_weights(const std::filesystem::path& path, DeskDepthNet& net);

// Optional on-disk cache for predicted maps, keyed by dish id, stored as raw
// float grids like sensor depth files.
class DepthCache {
 public:
  explicit DepthCache(std::filesystem::path dir);
  std::optional<Tensor> lookup(const std::string& dish_id) const;
  void store(const std::string& dish_id, const Tensor& depth) const;

 private:
  std::filesystem::path dir_;
};

// Depth-stage fine-tuning protocol: Adam, cosine-annealed learning rate
// lr_start -> lr_end, scale-invariant log loss on (rgb, sensor depth) pairs.
struct DepthFineTuneConfig {
  double lr_start = 1e-5;
  double lr_end = 1e-6;
  int epochs = 60;
  int batch = 8;
  uint64_t seed = 0;
  double silog_lambda = 0.5;
};

struct DepthFineTuneReport {
  std::vector<double> epoch_losses;
};

// Trains the net in place on samples that carry sensor depth. Samples
// without depth are rejected.
DepthFineTuneReport fine_tune_depth(DeskDepthNet& net, const std::vector<RGBDSample>& samples,
                                    const DepthFineTuneConfig& config);

}  // namespace dpf
