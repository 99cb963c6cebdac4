// SPDX-License-Identifier: Apache-2.0
#include "dpf/fusion.hpp"

#include <algorithm>

#include "dpf/error.hpp"

namespace dpf {

BackboneSpec BackboneSpec::lookup(const std::string& id) {
  if (id == "resnet50") {
    return {id, {64, 256, 512, 1024, 2048}, {3, 4, 6, 3}, true, 7};
  }
  if (id == "resnet101") {
    return {id, {64, 256, 512, 1024, 2048}, {3, 4, 23, 3}, true, 7};
  }
  if (id == "small") {
    return {id, {16, 24, 32, 48, 64}, {1, 1, 1, 1}, false, 3};
  }
  if (id == "micro") {
    return {id, {6, 8, 10, 12, 16}, {1, 1, 1, 1}, false, 3};
  }
  throw ConfigError("unknown backbone id '" + id + "'", "model.backbone");
}

AblationMode ablation_mode_from_string(const std::string& s) {
  if (s == "rgb_only") return AblationMode::rgb_only;
  if (s == "depth_only") return AblationMode::depth_only;
  if (s == "direct_fusion") return AblationMode::direct_fusion;
  if (s == "multiscale") return AblationMode::multiscale;
  if (s == "multiscale_cab") return AblationMode::multiscale_cab;
  throw ConfigError("unknown ablation mode '" + s + "'", "model.ablation_mode");
}

std::string to_string(AblationMode m) {
  switch (m) {
    case AblationMode::rgb_only: return "rgb_only";
    case AblationMode::depth_only: return "depth_only";
    case AblationMode::direct_fusion: return "direct_fusion";
    case AblationMode::multiscale: return "multiscale";
    case AblationMode::multiscale_cab: return "multiscale_cab";
  }
  return "?";
}

const std::array<AblationMode, 5>& all_ablation_modes() {
  static const std::array<AblationMode, 5> kModes = {
      AblationMode::rgb_only, AblationMode::depth_only, AblationMode::direct_fusion,
      AblationMode::multiscale, AblationMode::multiscale_cab};
  return kModes;
}

std::string ablation_row_id(AblationMode m) {
  switch (m) {
    case AblationMode::rgb_only: return "(a)";
    case AblationMode::depth_only: return "(b)";
    case AblationMode::direct_fusion: return "(c)";
    case AblationMode::multiscale: return "(d)";
    case AblationMode::multiscale_cab: return "(e)";
  }
  return "?";
}

void ModelConfig::validate() const {
  BackboneSpec::lookup(backbone);
  if (image_h < 16 || image_w < 16) throw ConfigError("image size too small", "model.image_h");
  if (head_hidden <= 0) throw ConfigError("head_hidden must be positive", "model.head_hidden");
}

// ---- residual blocks ---------------------------------------------------------

ResidualBlock::ResidualBlock(int64_t in_ch, int64_t out_ch, int64_t stride, bool bottleneck,
                             Rng& rng)
    : bottleneck_(bottleneck) {
  if (bottleneck) {
    int64_t mid = std::max<int64_t>(1, out_ch / 4);
    conv1_ = std::make_unique<nn::Conv2d>(in_ch, mid, 1, 1, 0, false, rng);
    bn1_ = std::make_unique<nn::BatchNorm2d>(mid);
    conv2_ = std::make_unique<nn::Conv2d>(mid, mid, 3, stride, 1, false, rng);
    bn2_ = std::make_unique<nn::BatchNorm2d>(mid);
    conv3_ = std::make_unique<nn::Conv2d>(mid, out_ch, 1, 1, 0, false, rng);
    bn3_ = std::make_unique<nn::BatchNorm2d>(out_ch);
  } else {
    conv1_ = std::make_unique<nn::Conv2d>(in_ch, out_ch, 3, stride, 1, false, rng);
    bn1_ = std::make_unique<nn::BatchNorm2d>(out_ch);
    conv2_ = std::make_unique<nn::Conv2d>(out_ch, out_ch, 3, 1, 1, false, rng);
    bn2_ = std::make_unique<nn::BatchNorm2d>(out_ch);
  }
  if (stride != 1 || in_ch != out_ch) {
    proj_ = std::make_unique<nn::Conv2d>(in_ch, out_ch, 1, stride, 0, false, rng);
    bn_proj_ = std::make_unique<nn::BatchNorm2d>(out_ch);
  }
  add_child("conv1", conv1_.get());
  add_child("bn1", bn1_.get());
  add_child("conv2", conv2_.get());
  add_child("bn2", bn2_.get());
  if (bottleneck) {
    add_child("conv3", conv3_.get());
    add_child("bn3", bn3_.get());
  }
  if (proj_) {
    add_child("proj", proj_.get());
    add_child("bn_proj", bn_proj_.get());
  }
}

Var ResidualBlock::forward(const Var& x) {
  Var out = ops::relu(bn1_->forward(conv1_->forward(x)));
  if (bottleneck_) {
    out = ops::relu(bn2_->forward(conv2_->forward(out)));
    out = bn3_->forward(conv3_->forward(out));
  } else {
    out = bn2_->forward(conv2_->forward(out));
  }
  Var skip = proj_ ? bn_proj_->forward(proj_->forward(x)) : x;
  return ops::relu(ops::add(out, skip));
}

// ---- backbone ------------------------------------------------------------------

Backbone::Backbone(const BackboneSpec& spec, Rng& rng) : spec_(spec) {
  stem_ = std::make_unique<nn::Conv2d>(3, spec.channels[0], spec.stem_kernel, 2,
                                       spec.stem_kernel / 2, false, rng);
  stem_bn_ = std::make_unique<nn::BatchNorm2d>(spec.channels[0]);
  add_child("stem", stem_.get());
  add_child("stem_bn", stem_bn_.get());
  int64_t in_ch = spec.channels[0];
  int block_idx = 0;
  for (int stage = 0; stage < 4; ++stage) {
    stage_offsets_[stage] = block_idx;
    int64_t out_ch = spec.channels[stage + 1];
    int64_t stage_stride = kPyramidStrides[stage + 1] / kPyramidStrides[stage];
    for (int b = 0; b < spec.stage_blocks[stage]; ++b) {
      int64_t stride = b == 0 ? stage_stride : 1;
      blocks_.push_back(
          std::make_unique<ResidualBlock>(b == 0 ? in_ch : out_ch, out_ch, stride,
                                          spec.bottleneck, rng));
      add_child("stage" + std::to_string(stage + 1) + ".block" + std::to_string(b),
                blocks_.back().get());
      ++block_idx;
    }
    in_ch = out_ch;
  }
}

FeaturePyramid Backbone::forward(const Var& x) {
  FeaturePyramid pyr;
  Var v = ops::relu(stem_bn_->forward(stem_->forward(x)));
  v = ops::maxpool2d(v, 3, 2, 1);
  pyr.levels[0] = v;
  int block_idx = 0;
  for (int stage = 0; stage < 4; ++stage) {
    for (int b = 0; b < spec_.stage_blocks[stage]; ++b) {
      v = blocks_[static_cast<size_t>(block_idx++)]->forward(v);
    }
    pyr.levels[static_cast<size_t>(stage + 1)] = v;
  }
  return pyr;
}

// ---- CAB --------------------------------------------------------------------

CabBlock::CabBlock(int64_t channels, Rng& rng)
    : ca_conv(channels, channels, 1, 1, 0, false, rng),
      ca_bn(channels),
      sa_conv(1, 1, 3, 1, 1, false, rng),
      sa_bn(1),
      proj(2 * channels, channels, 1, 1, 0, true, rng) {
  add_child("ca_conv", &ca_conv);
  add_child("ca_bn", &ca_bn);
  add_child("sa_conv", &sa_conv);
  add_child("sa_bn", &sa_bn);
  add_child("proj", &proj);
}

CabBlock::Attention CabBlock::attention(const Var& r, const Var& d) {
  if (!r.value().same_shape(d.value())) {
    throw ShapeError("CAB: modality features must share shape, got " + r.value().shape_str() +
                     " vs " + d.value().shape_str());
  }
  Var s = ops::add(r, d);
  Var ca = ops::sigmoid(ops::relu(ca_bn.forward(ca_conv.forward(ops::gap2d(s)))));
  Var sa = ops::sigmoid(ops::relu(sa_bn.forward(sa_conv.forward(ops::channel_mean(s)))));
  return {ca, sa};
}

Var CabBlock::fuse_with(const Var& r, const Var& d, const Var& ca, const Var& sa) {
  Var gated_r = ops::mul(ops::mul(r, ca), sa);
  Var gated_d = ops::mul(ops::mul(d, ca), sa);
  return proj.forward(ops::concat(gated_r, gated_d, 1));
}

Var CabBlock::fuse(const Var& r, const Var& d) {
  Attention att = attention(r, d);
  return fuse_with(r, d, att.ca, att.sa);
}

ConcatFuseBlock::ConcatFuseBlock(int64_t channels, Rng& rng)
    : proj(2 * channels, channels, 1, 1, 0, true, rng) {
  add_child("proj", &proj);
}

Var ConcatFuseBlock::fuse(const Var& r, const Var& d) {
  if (!r.value().same_shape(d.value())) throw ShapeError("concat fuse: shape mismatch");
  return proj.forward(ops::concat(r, d, 1));
}

// ---- model --------------------------------------------------------------------

FusionModel::FusionModel(const ModelConfig& config)
    : config_(config), backbone_spec_(BackboneSpec::lookup(config.backbone)) {
  config_.validate();
  Rng rng(mix64(config.seed, 0xd6f00dULL));
  const auto& ch = backbone_spec_.channels;
  bool needs_rgb = config.ablation_mode != AblationMode::depth_only;
  bool needs_depth = config.ablation_mode != AblationMode::rgb_only;
  bool multiscale = config.ablation_mode == AblationMode::multiscale ||
                    config.ablation_mode == AblationMode::multiscale_cab;

  if (needs_rgb) {
    rgb_stream_ = std::make_unique<Backbone>(backbone_spec_, rng);
    add_child("rgb_stream", rgb_stream_.get());
  }
  if (needs_depth) {
    depth_stream_ = std::make_unique<Backbone>(backbone_spec_, rng);
    add_child("depth_stream", depth_stream_.get());
  }
  if (config.ablation_mode == AblationMode::multiscale_cab) {
    for (int i = 0; i < kPyramidLevels; ++i) {
      cabs_.push_back(std::make_unique<CabBlock>(ch[static_cast<size_t>(i)], rng));
      add_child("cab" + std::to_string(i), cabs_.back().get());
    }
  }
  if (config.ablation_mode == AblationMode::multiscale) {
    for (int i = 0; i < kPyramidLevels; ++i) {
      concat_fuse_.push_back(std::make_unique<ConcatFuseBlock>(ch[static_cast<size_t>(i)], rng));
      add_child("fuse" + std::to_string(i), concat_fuse_.back().get());
    }
  }
  if (multiscale) {
    for (int i = 1; i < kPyramidLevels; ++i) {
      int64_t stride = kPyramidStrides[static_cast<size_t>(i)] /
                       kPyramidStrides[static_cast<size_t>(i - 1)];
      res_fuse_.push_back(std::make_unique<ResidualBlock>(
          ch[static_cast<size_t>(i - 1)], ch[static_cast<size_t>(i)], stride, true, rng));
      add_child("res_fuse" + std::to_string(i), res_fuse_.back().get());
    }
  }
  int64_t fc_in = config.ablation_mode == AblationMode::direct_fusion ? 2 * ch[4] : ch[4];
  shared_fc_ = std::make_unique<nn::Linear>(fc_in, config.head_hidden, true, rng);
  add_child("shared_fc", shared_fc_.get());
  for (int i = 0; i < 5; ++i) {
    heads_.push_back(std::make_unique<nn::Linear>(config.head_hidden, 1, true, rng));
    add_child("head" + std::to_string(i), heads_.back().get());
  }
}

FeaturePyramid FusionModel::extract_pyramid(const Var& x, Stream stream) {
  Backbone* bb = stream == Stream::rgb ? rgb_stream_.get() : depth_stream_.get();
  if (!bb) {
    throw ContractError("model in mode '" + to_string(config_.ablation_mode) +
                        "' has no " + (stream == Stream::rgb ? "rgb" : "depth") + " stream");
  }
  return bb->forward(x);
}

Var FusionModel::head_forward(const Var& pooled) {
  Var hidden = shared_fc_->forward(pooled);
  if (config_.head_relu) hidden = ops::relu(hidden);
  Var out = heads_[0]->forward(hidden);
  for (int i = 1; i < 5; ++i) out = ops::concat(out, heads_[static_cast<size_t>(i)]->forward(hidden), 1);
  return out;
}

Var FusionModel::forward(const Var& rgb, const Var& depth3, Trace* trace) {
  auto check_input = [&](const Var& v, const char* name) {
    const auto& s = v.value().shape();
    if (s.size() != 4 || s[1] != 3) {
      throw ContractError(std::string("model input ") + name + " must be (N,3,H,W), got " +
                          v.value().shape_str());
    }
  };

  auto pool_flat = [](const Var& feat) {
    Var pooled = ops::gap2d(feat);
    const auto& s = pooled.value().shape();
    return ops::reshape(pooled, {s[0], s[1]});
  };

  Var pooled;
  Var f4;
  switch (config_.ablation_mode) {
    case AblationMode::rgb_only: {
      check_input(rgb, "rgb");
      f4 = rgb_stream_->forward(rgb).levels[4];
      pooled = pool_flat(f4);
      break;
    }
    case AblationMode::depth_only: {
      check_input(depth3, "depth");
      f4 = depth_stream_->forward(depth3).levels[4];
      pooled = pool_flat(f4);
      break;
    }
    case AblationMode::direct_fusion: {
      check_input(rgb, "rgb");
      check_input(depth3, "depth");
      Var r4 = rgb_stream_->forward(rgb).levels[4];
      Var d4 = depth_stream_->forward(depth3).levels[4];
      f4 = r4;
      pooled = ops::concat(pool_flat(r4), pool_flat(d4), 1);
      break;
    }
    case AblationMode::multiscale:
    case AblationMode::multiscale_cab: {
      check_input(rgb, "rgb");
      check_input(depth3, "depth");
      FeaturePyramid rp = rgb_stream_->forward(rgb);
      FeaturePyramid dp = depth_stream_->forward(depth3);
      std::array<Var, kPyramidLevels> fused;
      for (int i = 0; i < kPyramidLevels; ++i) {
        auto idx = static_cast<size_t>(i);
        fused[idx] = config_.ablation_mode == AblationMode::multiscale_cab
                         ? cabs_[idx]->fuse(rp.levels[idx], dp.levels[idx])
                         : concat_fuse_[idx]->fuse(rp.levels[idx], dp.levels[idx]);
      }
      Var prev = fused[0];
      Var prev_raw = fused[0];
      for (int i = 1; i < kPyramidLevels; ++i) {
        auto idx = static_cast<size_t>(i);
        const Var& carried =
            config_.recursion_input == ModelConfig::RecursionInput::fused ? prev : prev_raw;
        Var res = res_fuse_[idx - 1]->forward(carried);
        Var fi = ops::add(fused[idx], res);
        prev_raw = fused[idx];
        prev = fi;
      }
      f4 = prev;
      pooled = pool_flat(f4);
      if (trace) trace->fused = fused;
      break;
    }
  }

  Var out = head_forward(pooled);
  if (trace) {
    trace->f4 = f4;
    trace->pooled = pooled;
    trace->out = out;
  }
  return out;
}

Tensor FusionModel::predict(const Tensor& rgb_nchw, const Tensor& depth3_nchw) {
  NoGradGuard guard;
  bool was_training = is_training();
  set_training(false);
  Var out = forward(Var(rgb_nchw), Var(depth3_nchw));
  set_training(was_training);
  return out.value();
}

Tensor clamp_nonnegative(Tensor values) {
  for (double& v : values.vec()) v = std::max(0.0, v);
  return values;
}

}  // namespace dpf
