// SPDX-License-Identifier: Apache-2.0
#include "dpf/depth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dpf/error.hpp"
#include "dpf/image_io.hpp"
#include "dpf/serialize.hpp"
#include "dpf/training.hpp"

namespace dpf {

void DepthMap::validate() const {
  if (values.ndim() != 2) throw ShapeError("depth map must be (H,W), got " + values.shape_str());
  if (!values.all_finite()) throw ValueError("depth map contains non-finite values");
  if (values.min() < 0) throw ValueError("depth map must be non-negative");
  if (normalized && values.max() > 1.0) {
    throw ValueError("normalized depth map exceeds 1");
  }
}

DepthMap normalize_depth(const DepthMap& d) {
  d.validate();
  DepthMap out;
  out.values = d.values;
  out.normalized = true;
  double lo = d.values.min(), hi = d.values.max();
  double range = hi - lo;
  if (range <= 0) {
    out.values.fill(0.0);  // constant maps carry no shape signal
    return out;
  }
  for (double& v : out.values.vec()) v = (v - lo) / range;
  return out;
}

Tensor depth_to_backbone_input(const DepthMap& d) {
  if (!d.normalized) {
    throw ContractError("depth_to_backbone_input requires a normalized depth map");
  }
  d.validate();
  int64_t h = d.values.dim(0), w = d.values.dim(1);
  Tensor out({3, h, w});
  for (int c = 0; c < 3; ++c) {
    std::copy(d.values.data(), d.values.data() + h * w, out.data() + c * h * w);
  }
  return out;
}

// ---- token reassembly ---------------------------------------------------------

void TokenGrid::validate() const {
  if (tokens.ndim() != 2) throw ShapeError("token grid must be (N_p, D)");
  if (grid_h <= 0 || grid_w <= 0) throw ShapeError("token grid dims must be positive");
  if (tokens.dim(0) != grid_h * grid_w) {
    throw ShapeError("token count " + std::to_string(tokens.dim(0)) + " != grid " +
                     std::to_string(grid_h) + "x" + std::to_string(grid_w));
  }
  if (tokens.dim(1) <= 0) throw ShapeError("token dimension must be positive");
}

ImageLikeFeature reassemble_concatenate(const TokenGrid& tokens) {
  tokens.validate();
  // Row-major placement is a pure copy: token n sits at cell (n / W, n % W).
  return {tokens.tokens.reshaped({tokens.grid_h, tokens.grid_w, tokens.tokens.dim(1)})};
}

TokenGrid flatten_feature(const ImageLikeFeature& f) {
  if (f.values.ndim() != 3) throw ShapeError("image-like feature must be (h,w,D)");
  TokenGrid out;
  out.grid_h = f.values.dim(0);
  out.grid_w = f.values.dim(1);
  out.tokens = f.values.reshaped({out.grid_h * out.grid_w, f.values.dim(2)});
  return out;
}

// ---- resample -------------------------------------------------------------------

namespace {

Tensor hwc_to_nchw(const Tensor& hwc) {
  int64_t h = hwc.dim(0), w = hwc.dim(1), c = hwc.dim(2);
  Tensor out({1, c, h, w});
  const double* src = hwc.data();
  double* dst = out.data();
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t ch = 0; ch < c; ++ch) dst[(ch * h + y) * w + x] = src[(y * w + x) * c + ch];
    }
  }
  return out;
}

Tensor nchw_to_hwc(const Tensor& nchw) {
  int64_t c = nchw.dim(1), h = nchw.dim(2), w = nchw.dim(3);
  Tensor out({h, w, c});
  const double* src = nchw.data();
  double* dst = out.data();
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t ch = 0; ch < c; ++ch) dst[(y * w + x) * c + ch] = src[(ch * h + y) * w + x];
    }
  }
  return out;
}

}  // namespace

ResampleBlock::ResampleBlock(int64_t d_in, int64_t d_out, int64_t src_stride,
                             int64_t target_stride, Rng& rng)
    : d_in_(d_in), d_out_(d_out) {
  if (d_in <= 0 || d_out <= 0) throw ValueError("resample: dims must be positive");
  if (src_stride <= 0 || target_stride <= 0) {
    throw ValueError("resample: strides must be positive");
  }
  if (src_stride == target_stride) {
    factor_ = 1;
  } else if (src_stride % target_stride == 0) {
    upsample_ = true;
    factor_ = src_stride / target_stride;
  } else if (target_stride % src_stride == 0) {
    upsample_ = false;
    factor_ = target_stride / src_stride;
  } else {
    throw ValueError("resample: target stride " + std::to_string(target_stride) +
                     " is not an integer factor of source stride " + std::to_string(src_stride));
  }
  projection_ = nn::he_normal({d_out, d_in, 1, 1}, d_in, rng);
  if (factor_ > 1) {
    if (upsample_) {
      spatial_ = nn::he_normal({d_out, d_out, factor_, factor_}, d_out, rng);
    } else {
      spatial_ = nn::he_normal({d_out, d_out, factor_, factor_}, d_out * factor_ * factor_, rng);
    }
  }
}

ResampleBlock ResampleBlock::identity(int64_t d, int64_t stride) {
  if (d <= 0 || stride <= 0) throw ValueError("resample identity: bad dims");
  ResampleBlock block;
  block.d_in_ = block.d_out_ = d;
  block.factor_ = 1;
  block.projection_ = Tensor({d, d, 1, 1});
  for (int64_t i = 0; i < d; ++i) block.projection_(i, i, 0, 0) = 1.0;
  return block;
}

ImageLikeFeature ResampleBlock::apply(const ImageLikeFeature& f) const {
  if (f.values.ndim() != 3) throw ShapeError("resample expects (h,w,D)");
  if (f.values.dim(2) != d_in_) {
    throw ShapeError("resample: feature has D=" + std::to_string(f.values.dim(2)) +
                     ", block expects " + std::to_string(d_in_));
  }
  NoGradGuard guard;
  Var x(hwc_to_nchw(f.values));
  Var w_proj(projection_);
  Var y = ops::conv2d(x, w_proj, nullptr, 1, 0);
  if (factor_ > 1) {
    if (upsample_) {
      // Transposed-conv weights layout is (Cin, Cout, f, f).
      Var w_sp(spatial_.reshaped({d_out_, d_out_, factor_, factor_}));
      y = ops::conv_transpose2d(y, w_sp, nullptr, factor_);
    } else {
      Var w_sp(spatial_);
      y = ops::conv2d(y, w_sp, nullptr, factor_, 0);
    }
  }
  return {nchw_to_hwc(y.value())};
}

// ---- DeskDepthNet -----------------------------------------------------------------

DeskDepthNet::DeskDepthNet(uint64_t seed)
    : rng_(mix64(seed, 0xdee9ULL)),
      enc1(3, 16, 3, 2, 1, false, rng_),
      enc2(16, 32, 3, 2, 1, false, rng_),
      enc3(32, 32, 3, 1, 1, false, rng_),
      bn1(16),
      bn2(32),
      bn3(32),
      up1(32, 16, 2, false, rng_),
      up2(16, 8, 2, false, rng_),
      bn4(16),
      bn5(8),
      head(8, 1, 1, 1, 0, true, rng_) {
  add_child("enc1", &enc1);
  add_child("bn1", &bn1);
  add_child("enc2", &enc2);
  add_child("bn2", &bn2);
  add_child("enc3", &enc3);
  add_child("bn3", &bn3);
  add_child("up1", &up1);
  add_child("bn4", &bn4);
  add_child("up2", &up2);
  add_child("bn5", &bn5);
  add_child("head", &head);
}

Var DeskDepthNet::forward(const Var& rgb) {
  Var v = ops::relu(bn1.forward(enc1.forward(rgb)));
  v = ops::relu(bn2.forward(enc2.forward(v)));
  v = ops::relu(bn3.forward(enc3.forward(v)));
  v = ops::relu(bn4.forward(up1.forward(v)));
  v = ops::relu(bn5.forward(up2.forward(v)));
  return ops::softplus(head.forward(v));
}

// ---- providers ----------------------------------------------------------------------

DepthProviderKind depth_provider_kind_from_string(const std::string& s) {
  if (s == "pretrained") return DepthProviderKind::pretrained;
  if (s == "sensor_passthrough") return DepthProviderKind::sensor_passthrough;
  if (s == "synthetic_oracle") return DepthProviderKind::synthetic_oracle;
  throw ConfigError("unknown depth provider '" + s + "'", "depth.provider");
}

std::string to_string(DepthProviderKind k) {
  switch (k) {
    case DepthProviderKind::pretrained: return "pretrained";
    case DepthProviderKind::sensor_passthrough: return "sensor_passthrough";
    case DepthProviderKind::synthetic_oracle: return "synthetic_oracle";
  }
  return "?";
}

void DepthProviderConfig::validate() const {
  if (kind == DepthProviderKind::pretrained && !weights_path) {
    throw ConfigError("pretrained depth provider requires weights_path", "depth.weights_path");
  }
  if (kind != DepthProviderKind::pretrained && weights_path) {
    throw ConfigError("weights_path only applies to the pretrained provider",
                      "depth.weights_path");
  }
}

namespace {

class StoredDepthProvider : public DepthProvider {
 public:
  StoredDepthProvider(std::string name, std::string missing_what)
      : name_(std::move(name)), missing_what_(std::move(missing_what)) {}

  DepthMap predict(const RGBDSample& sample) const override {
    if (!sample.depth) {
      throw LookupError(missing_what_ + " for dish '" + sample.dish_id + "'");
    }
    DepthMap d{*sample.depth, false};
    d.validate();
    return d;
  }

  std::string name() const override { return name_; }

 private:
  std::string name_;
  std::string missing_what_;
};

class PretrainedDepthProvider : public DepthProvider {
 public:
  explicit PretrainedDepthProvider(const std::string& weights_path) : net_(0) {
    load_depth_weights(weights_path, net_);
    net_.set_training(false);
  }

  DepthMap predict(const RGBDSample& sample) const override {
    const Tensor& rgb = sample.rgb;
    int64_t h = rgb.dim(1), w = rgb.dim(2);
    NoGradGuard guard;
    Var out = net_.forward(Var(rgb.reshaped({1, 3, h, w})));
    int64_t oh = out.value().dim(2), ow = out.value().dim(3);
    Tensor depth = out.value().reshaped({oh, ow});
    if (oh != h || ow != w) depth = bilinear_resize(depth, h, w);
    DepthMap d{std::move(depth), false};
    d.validate();
    return d;
  }

  std::string name() const override { return "pretrained"; }

 private:
  mutable DeskDepthNet net_;  // read-only after construction; forward is const-safe
};

}  // namespace

std::unique_ptr<DepthProvider> make_depth_provider(const DepthProviderConfig& config) {
  config.validate();
  switch (config.kind) {
    case DepthProviderKind::sensor_passthrough:
      return std::make_unique<StoredDepthProvider>("sensor_passthrough", "no sensor depth");
    case DepthProviderKind::synthetic_oracle:
      return std::make_unique<StoredDepthProvider>("synthetic_oracle", "no analytic depth");
    case DepthProviderKind::pretrained:
      return std::make_unique<PretrainedDepthProvider>(*config.weights_path);
  }
  throw ContractError("unreachable provider kind");
}

void save_depth_weights(const std::filesystem::path& path, DeskDepthNet& net) {
  CheckpointData data;
  data.model = net.state_dict();
  save_checkpoint_file(path, data);
}

void load_depth_weights(const std::filesystem::path& path, DeskDepthNet& net) {
  CheckpointData data = load_checkpoint_file(path);
  net.load_state_dict(data.model);
}

DepthCache::DepthCache(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
}

std::optional<Tensor> DepthCache::lookup(const std::string& dish_id) const {
  auto path = dir_ / (dish_id + ".depth.raw");
  if (!std::filesystem::exists(path)) return std::nullopt;
  return read_depth_raw(path);
}

void DepthCache::store(const std::string& dish_id, const Tensor& depth) const {
  write_depth_raw(dir_ / (dish_id + ".depth.raw"), depth);
}

// ---- fine-tuning ----------------------------------------------------------------------

DepthFineTuneReport fine_tune_depth(DeskDepthNet& net, const std::vector<RGBDSample>& samples,
                                    const DepthFineTuneConfig& config) {
  if (samples.empty()) throw ValueError("fine_tune_depth: no samples");
  for (const auto& s : samples) {
    if (!s.depth) throw ValueError("fine_tune_depth: sample '" + s.dish_id + "' has no depth");
    if (!s.rgb.same_shape(samples[0].rgb)) {
      throw ShapeError("fine_tune_depth: samples must share dims");
    }
  }
  if (config.epochs < 1 || config.batch < 1) throw ValueError("fine_tune_depth: bad config");

  net.set_training(true);
  Adam opt(net.parameters());
  auto n = static_cast<int64_t>(samples.size());
  int64_t h = samples[0].rgb.dim(1), w = samples[0].rgb.dim(2);
  constexpr double kLogEps = 1e-6;

  DepthFineTuneReport report;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    // Cosine annealing from lr_start to lr_end across the run.
    double t = config.epochs > 1 ? static_cast<double>(epoch) / (config.epochs - 1) : 0.0;
    double lr = config.lr_end +
                0.5 * (config.lr_start - config.lr_end) * (1.0 + std::cos(3.14159265358979 * t));

    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix64(config.seed, static_cast<uint64_t>(epoch), 0xdf1eULL));
    rng.shuffle(order);

    double epoch_loss = 0;
    int64_t seen = 0;
    for (int64_t base = 0; base < n; base += config.batch) {
      int64_t bs = std::min<int64_t>(config.batch, n - base);
      Tensor rgb({bs, 3, h, w});
      Tensor gt({bs, 1, h, w});
      for (int64_t b = 0; b < bs; ++b) {
        const RGBDSample& s = samples[static_cast<size_t>(order[base + b])];
        std::copy(s.rgb.data(), s.rgb.data() + s.rgb.numel(), rgb.data() + b * 3 * h * w);
        std::copy(s.depth->data(), s.depth->data() + h * w, gt.data() + b * h * w);
      }
      Var pred = net.forward(Var(std::move(rgb)));
      // Scale-invariant log loss: mean(d^2) - lambda * mean(d)^2 with
      // d = log(pred+eps) - log(gt+eps).
      Var d = ops::sub(ops::log_floor(pred, kLogEps),
                       ops::constant([&] {
                         Tensor lg = gt;
                         for (double& v : lg.vec()) v = std::log(std::max(v, kLogEps));
                         return lg;
                       }()));
      Var mean_sq = ops::mean_all(ops::mul(d, d));
      Var mean_d = ops::mean_all(d);
      Var loss = ops::sub(mean_sq, ops::scale(ops::mul(mean_d, mean_d), config.silog_lambda));
      if (!std::isfinite(loss.value()(0))) {
        throw ValueError("fine_tune_depth: non-finite loss at epoch " + std::to_string(epoch));
      }
      net.zero_grad();
      backward(loss);
      opt.step(lr);
      epoch_loss += loss.value()(0) * static_cast<double>(bs);
      seen += bs;
    }
    report.epoch_losses.push_back(epoch_loss / static_cast<double>(seen));
  }
  net.set_training(false);
  return report;
}

}  // namespace dpf
