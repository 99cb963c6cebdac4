// SPDX-License-Identifier: Apache-2.0
#include "dpf/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dpf/error.hpp"

namespace dpf {

const std::map<std::string, RunConfig::KeySpec>& RunConfig::schema() {
  using T = Type;
  static const std::map<std::string, KeySpec> kSchema = {
      {"run.seed", {T::integer, "0", "base seed for init, splits and shuffling"}},
      {"run.out", {T::string, "runs/out", "output directory for this run"}},

      {"dataset.root", {T::string, "", "dataset root with <dish_id>/rgb.png layout"}},
      {"dataset.totals", {T::string, "", "totals CSV; defaults to <root>/totals.csv"}},
      {"dataset.ingredients", {T::string, "", "optional ingredients CSV"}},
      {"dataset.depth_scale", {T::number, "1", "multiplier applied to stored depth values"}},
      {"dataset.depth_policy", {T::string, "sensor", "sensor | none"}},

      {"split.ratio_train", {T::integer, "5", "train part of the split ratio"}},
      {"split.ratio_test", {T::integer, "1", "test part of the split ratio"}},
      {"split.use_manifests", {T::boolean, "true", "load train_ids.txt/test_ids.txt when present"}},

      {"aug.enabled", {T::boolean, "false", "apply resize/crop/flip augmentation on load"}},
      {"aug.out_h", {T::integer, "336", "augmented output height"}},
      {"aug.out_w", {T::integer, "448", "augmented output width"}},
      {"aug.resize_h", {T::integer, "-1", "pre-crop resize height (-1: same as out)"}},
      {"aug.resize_w", {T::integer, "-1", "pre-crop resize width (-1: same as out)"}},
      {"aug.flip_prob", {T::number, "0.5", "horizontal flip probability at load time"}},

      {"model.backbone", {T::string, "resnet101", "backbone registry id"}},
      {"model.image_h", {T::integer, "336", "model input height"}},
      {"model.image_w", {T::integer, "448", "model input width"}},
      {"model.head_hidden", {T::integer, "2048", "shared fully-connected width"}},
      {"model.ablation_mode",
       {T::string, "multiscale_cab",
        "rgb_only | depth_only | direct_fusion | multiscale | multiscale_cab"}},
      {"model.head_relu", {T::boolean, "true", "nonlinearity after the shared layer"}},
      {"fusion.recursion_input", {T::string, "fused", "fused | raw multi-scale recursion input"}},

      {"depth.provider",
       {T::string, "sensor_passthrough", "pretrained | sensor_passthrough | synthetic_oracle"}},
      {"depth.weights_path", {T::string, "", "checkpoint for the pretrained provider"}},
      {"depth.fine_tune", {T::boolean, "false", "fine-tune the depth net before training"}},
      {"depth.cache_dir", {T::string, "", "optional predicted-depth cache directory"}},

      {"train.lr0", {T::number, "5e-5", "initial learning rate"}},
      {"train.decay", {T::number, "0.98", "exponential decay rate"}},
      {"train.decay_per", {T::string, "epoch", "epoch | step"}},
      {"train.epochs", {T::integer, "150", "training epochs"}},
      {"train.batch", {T::integer, "8", "batch size"}},
      {"train.loss_epsilon", {T::number, "1e-8", "geometric-loss floor"}},
      {"train.grad_clip", {T::number, "0", "global-norm gradient clip (0: off)"}},
      {"train.flip_prob", {T::number, "0", "per-epoch training flip probability"}},
      {"train.head_bias_warmup",
       {T::boolean, "false", "initialize head biases to train-set target means"}},
      {"train.checkpoint_every", {T::integer, "0", "epochs between checkpoints (0: final only)"}},

      {"eval.batch", {T::integer, "8", "evaluation batch size"}},
      {"ablate.seeds", {T::integer, "3", "number of seeds per ablation row"}},

      {"synth.n", {T::integer, "64", "synthetic dishes to generate"}},
      {"synth.img", {T::integer, "64", "synthetic image side length"}},
      {"synth.max_blobs", {T::integer, "3", "maximum blobs per synthetic dish"}},

      {"runtime.workers", {T::integer, "1", "worker parallelism bound"}},
  };
  return kSchema;
}

RunConfig::RunConfig() {
  for (const auto& [key, spec] : schema()) values_[key] = spec.default_value;
  if (const char* root = std::getenv("DPF_DATA_ROOT")) {
    if (*root) values_["dataset.root"] = root;
  }
  if (const char* cache = std::getenv("DPF_CACHE_DIR")) {
    if (*cache) values_["depth.cache_dir"] = cache;
  }
}

void RunConfig::set_checked(const std::string& key, const std::string& value,
                            const std::string& source) {
  auto it = schema().find(key);
  if (it == schema().end()) {
    throw ConfigError("unknown configuration key (" + source + ")", key);
  }
  values_[key] = value;
}

void RunConfig::apply_profile(const std::string& name) {
  if (name == "full") {
    // Full-scale protocol: defaults already encode it.
    return;
  }
  if (name == "desk") {
    // Minutes-scale synthetic preset: small backbone, oracle depth.
    static const std::vector<std::pair<const char*, const char*>> kDesk = {
        {"model.backbone", "small"},   {"model.image_h", "64"},
        {"model.image_w", "64"},       {"model.head_hidden", "64"},
        {"depth.provider", "synthetic_oracle"},
        {"train.lr0", "1e-2"},         {"train.decay", "0.995"},
        {"train.head_bias_warmup", "true"},
        {"train.epochs", "30"},
        {"train.batch", "8"},          {"aug.enabled", "false"},
        {"eval.batch", "8"},           {"dataset.depth_policy", "sensor"},
    };
    for (const auto& [k, v] : kDesk) set_checked(k, v, "profile desk");
    return;
  }
  throw ConfigError("unknown profile '" + name + "'", "profile");
}

void RunConfig::apply_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file: " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto trim = [](const std::string& s) {
      auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    std::string trimmed = trim(line);
    if (trimmed.empty()) continue;
    auto eq = trimmed.find('=');
    if (eq == std::string::npos) {
      throw ParseError("expected 'key = value' in " + path.string(), lineno);
    }
    set_checked(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)),
                path.string() + ":" + std::to_string(lineno));
  }
}

void RunConfig::apply_override(const std::string& key, const std::string& value) {
  set_checked(key, value, "flag override");
}

void RunConfig::apply_override_expr(const std::string& expr) {
  auto eq = expr.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("--set expects key=value", expr);
  }
  apply_override(expr.substr(0, eq), expr.substr(eq + 1));
}

namespace {

bool parse_bool(const std::string& s, bool& out) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") {
    out = true;
    return true;
  }
  if (s == "false" || s == "0" || s == "no" || s == "off") {
    out = false;
    return true;
  }
  return false;
}

}  // namespace

void RunConfig::finalize() const {
  for (const auto& [key, spec] : schema()) {
    const std::string& v = values_.at(key);
    switch (spec.type) {
      case Type::string:
        break;
      case Type::number: {
        double d;
        auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), d);
        if (ec != std::errc() || p != v.data() + v.size()) {
          throw ConfigError("expected a number, got '" + v + "'", key);
        }
        break;
      }
      case Type::integer: {
        int64_t i;
        auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), i);
        if (ec != std::errc() || p != v.data() + v.size()) {
          throw ConfigError("expected an integer, got '" + v + "'", key);
        }
        break;
      }
      case Type::boolean: {
        bool b;
        if (!parse_bool(v, b)) throw ConfigError("expected a boolean, got '" + v + "'", key);
        break;
      }
    }
  }
  // Cross-field checks delegated to the typed sub-config validators.
  model_config().validate();
  train_config().validate();
  depth_config().validate();
}

std::string RunConfig::str(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown configuration key", key);
  return it->second;
}

double RunConfig::num(const std::string& key) const {
  std::string v = str(key);
  double d;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), d);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("expected a number, got '" + v + "'", key);
  }
  return d;
}

int64_t RunConfig::integer(const std::string& key) const {
  std::string v = str(key);
  int64_t i;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), i);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("expected an integer, got '" + v + "'", key);
  }
  return i;
}

bool RunConfig::flag(const std::string& key) const {
  bool b;
  if (!parse_bool(str(key), b)) throw ConfigError("expected a boolean", key);
  return b;
}

std::string RunConfig::canonical_text() const {
  std::ostringstream os;
  for (const auto& [key, value] : values_) os << key << " = " << value << "\n";
  return os.str();
}

uint64_t RunConfig::model_hash() const {
  std::ostringstream os;
  for (const auto& [key, value] : values_) {
    if (key.rfind("model.", 0) == 0 || key.rfind("fusion.", 0) == 0) {
      os << key << "=" << value << "\n";
    }
  }
  return fnv1a(os.str());
}

std::string RunConfig::resolved_json() const {
  nlohmann::json j;
  for (const auto& [key, value] : values_) j[key] = value;
  return j.dump(2);
}

ModelConfig RunConfig::model_config() const {
  ModelConfig mc;
  mc.backbone = str("model.backbone");
  mc.image_h = integer("model.image_h");
  mc.image_w = integer("model.image_w");
  mc.head_hidden = integer("model.head_hidden");
  mc.ablation_mode = ablation_mode_from_string(str("model.ablation_mode"));
  mc.head_relu = flag("model.head_relu");
  std::string rec = str("fusion.recursion_input");
  if (rec == "fused") {
    mc.recursion_input = ModelConfig::RecursionInput::fused;
  } else if (rec == "raw") {
    mc.recursion_input = ModelConfig::RecursionInput::raw;
  } else {
    throw ConfigError("expected fused|raw, got '" + rec + "'", "fusion.recursion_input");
  }
  mc.seed = static_cast<uint64_t>(integer("run.seed"));
  return mc;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig tc;
  tc.lr0 = num("train.lr0");
  tc.decay = num("train.decay");
  std::string per = str("train.decay_per");
  if (per == "epoch") {
    tc.decay_per = TrainConfig::DecayPer::epoch;
  } else if (per == "step") {
    tc.decay_per = TrainConfig::DecayPer::step;
  } else {
    throw ConfigError("expected epoch|step, got '" + per + "'", "train.decay_per");
  }
  tc.epochs = static_cast<int>(integer("train.epochs"));
  tc.batch = static_cast<int>(integer("train.batch"));
  tc.seed = static_cast<uint64_t>(integer("run.seed"));
  tc.loss_epsilon = num("train.loss_epsilon");
  tc.grad_clip = num("train.grad_clip");
  tc.flip_prob = num("train.flip_prob");
  tc.head_bias_warmup = flag("train.head_bias_warmup");
  tc.checkpoint_every = static_cast<int>(integer("train.checkpoint_every"));
  return tc;
}

DepthProviderConfig RunConfig::depth_config() const {
  DepthProviderConfig dc;
  dc.kind = depth_provider_kind_from_string(str("depth.provider"));
  std::string wp = str("depth.weights_path");
  if (!wp.empty()) dc.weights_path = wp;
  dc.fine_tune = flag("depth.fine_tune");
  return dc;
}

AugmentConfig RunConfig::augment_config() const {
  AugmentConfig ac;
  ac.out_h = integer("aug.out_h");
  ac.out_w = integer("aug.out_w");
  ac.resize_h = integer("aug.resize_h");
  ac.resize_w = integer("aug.resize_w");
  ac.flip_prob = num("aug.flip_prob");
  return ac;
}

}  // namespace dpf
