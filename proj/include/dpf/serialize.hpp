// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "dpf/tensor.hpp"

namespace dpf {

// Single-file binary container: magic "DPFN", little-endian, format_version
// first, FNV-1a checksum trailer. Used for model checkpoints and pretrained
// depth weights.
struct CheckpointData {
  uint32_t format_version = 1;
  uint64_t config_hash = 0;
  int64_t epoch = 0;
  std::map<std::string, Tensor> model;  // state-dict entries (param.* / buffer.*)
  bool has_optimizer = false;
  int64_t adam_step = 0;
  std::map<std::string, Tensor> adam_m;
  std::map<std::string, Tensor> adam_v;
  std::string rng_state;
};

inline constexpr uint32_t kCheckpointVersion = 1;

// Atomic: writes to a temp file and renames into place.
void save_checkpoint_file(const std::filesystem::path& path, const CheckpointData& data);

// Throws IoError on missing/truncated/corrupt files and ValueError on
// version mismatch. Never partially constructs: either a full CheckpointData
// or a throw.
CheckpointData load_checkpoint_file(const std::filesystem::path& path);

}  // namespace dpf
