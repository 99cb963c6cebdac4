// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dpf/dataset.hpp"
#include "dpf/depth.hpp"
#include "dpf/fusion.hpp"
#include "dpf/training.hpp"

namespace dpf {

// Flat-namespaced run configuration ("train.lr0 = 5e-5"). Every key is
// declared in a schema with a type and default; unknown keys are rejected
// with the offending field path. Resolution order: defaults, environment
// (DPF_DATA_ROOT, DPF_CACHE_DIR), profile, config file, flag overrides —
// later wins.
class RunConfig {
 public:
  enum class Type { string, number, integer, boolean };

  struct KeySpec {
    Type type;
    std::string default_value;
    std::string description;
  };

  static const std::map<std::string, KeySpec>& schema();

  RunConfig();  // defaults + environment

  void apply_profile(const std::string& name);  // "desk" | "full"
  void apply_file(const std::filesystem::path& path);
  void apply_override(const std::string& key, const std::string& value);
  // "key=value" form used by --set.
  void apply_override_expr(const std::string& expr);

  // Validates every value against its declared type.
  void finalize() const;

  std::string str(const std::string& key) const;
  double num(const std::string& key) const;
  int64_t integer(const std::string& key) const;
  bool flag(const std::string& key) const;

  // Sorted "key = value" lines of the resolved config.
  std::string canonical_text() const;
  // Hash over the architecture-relevant subtree (model.*, fusion.*),
  // embedded in checkpoints.
  uint64_t model_hash() const;
  std::string resolved_json() const;

  // Typed sub-configs assembled from the resolved keys.
  ModelConfig model_config() const;
  TrainConfig train_config() const;
  DepthProviderConfig depth_config() const;
  AugmentConfig augment_config() const;

 private:
  void set_checked(const std::string& key, const std::string& value, const std::string& source);
  std::map<std::string, std::string> values_;
};

}  // namespace dpf
