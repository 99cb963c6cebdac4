// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dpf/dataset.hpp"
#include "dpf/fusion.hpp"
#include "dpf/serialize.hpp"

namespace dpf {

class DepthProvider;

// ---- losses -------------------------------------------------------------------

struct SubtaskLosses {
  double cal = 0, mass = 0, fat = 0, carb = 0, protein = 0;
  double operator[](int i) const;
  double& operator[](int i);
  void validate() const;  // finite and >= 0
};

// Mean absolute deviation. Throws on empty batches, length mismatch or
// non-finite inputs.
double subtask_loss(const std::vector<double>& pred, const std::vector<double>& truth);

// Geometric mean of the five subtask losses, each floored at epsilon.
// Evaluated in log space: exp(mean(log(max(L_k, eps)))).
double total_loss(const SubtaskLosses& l, double epsilon);

// Analytic gradient of total_loss wrt each subtask loss:
// T / (5 * L_k) where L_k > eps, else 0.
std::array<double, 5> total_loss_gradient(const SubtaskLosses& l, double epsilon);

// Graph-side total loss over five scalar loss nodes (training path).
Var total_loss_graph(const std::array<Var, 5>& subtask, double epsilon);

// ---- schedule / config ----------------------------------------------------------

struct TrainConfig {
  double lr0 = 5e-5;
  double decay = 0.98;
  enum class DecayPer { epoch, step };
  DecayPer decay_per = DecayPer::epoch;
  int epochs = 150;
  int batch = 8;
  uint64_t seed = 0;
  double loss_epsilon = 1e-8;
  double grad_clip = 0.0;       // global-norm clip; 0 disables
  double flip_prob = 0.0;       // per-(epoch,sample) horizontal flip
  // Initialize each task head's bias to the train-set target mean before the
  // first step. Pure data-dependent init; raw-unit L1 training is unchanged.
  bool head_bias_warmup = false;
  int checkpoint_every = 0;     // epochs between checkpoints; 0 = final only
  std::filesystem::path checkpoint_path;  // empty disables checkpointing
  std::filesystem::path log_path;         // JSONL; empty disables

  void validate() const;
};

// lr0 * decay^epoch
double lr_at(int64_t epoch, const TrainConfig& config);

// ---- optimizer -------------------------------------------------------------------

class Adam {
 public:
  explicit Adam(std::vector<Var*> params, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);
  void step(double lr);
  int64_t step_count() const { return t_; }

  void save_state(const std::vector<std::pair<std::string, Var*>>& named,
                  CheckpointData& out) const;
  void load_state(const std::vector<std::pair<std::string, Var*>>& named,
                  const CheckpointData& in);

 private:
  std::vector<Var*> params_;
  std::vector<Tensor> m_, v_;
  int64_t t_ = 0;
  double beta1_, beta2_, eps_;
};

// ---- model example preparation ----------------------------------------------------

// A sample materialized for the fusion model: normalized depth replicated to
// three channels (zeros when no provider/depth applies).
struct ModelExample {
  std::string dish_id;
  Tensor rgb;     // (3,H,W)
  Tensor depth3;  // (3,H,W)
  NutrientVector target;
};

ModelExample prepare_example(const RGBDSample& sample, const DepthProvider* provider);
std::vector<ModelExample> prepare_examples(const std::vector<RGBDSample>& samples,
                                           const DepthProvider* provider);

// ---- training loop -----------------------------------------------------------------

struct EpochStats {
  int64_t epoch = 0;
  double lr = 0;
  SubtaskLosses losses;
  double total = 0;
};

struct FitResult {
  std::vector<EpochStats> history;
};

uint64_t config_hash_of(const std::string& canonical_config_text);

// Checkpoint round trips for the fusion model (+ optional optimizer state).
void save_training_checkpoint(const std::filesystem::path& path, FusionModel& model,
                              const Adam* optimizer, int64_t epoch, uint64_t config_hash,
                              const std::string& rng_state);

struct LoadReport {
  int64_t epoch = 0;
  bool hash_mismatch_forced = false;
};

// Config-hash mismatch throws unless force; with force a warning goes to
// stderr and loading proceeds. Model/optimizer are untouched on any throw.
LoadReport load_training_checkpoint(const std::filesystem::path& path, FusionModel& model,
                                    Adam* optimizer, uint64_t expected_hash, bool force);

// Deterministic multi-task training. Resumes from start_epoch (0 for fresh
// runs); per-epoch randomness derives from (seed, epoch) so a resumed run is
// bit-identical to an uninterrupted one. Throws ValueError naming epoch and
// batch if the loss goes non-finite.
FitResult fit(FusionModel& model, const std::vector<ModelExample>& train,
              const TrainConfig& config, Adam* optimizer = nullptr, int64_t start_epoch = 0,
              uint64_t config_hash = 0,
              const std::function<void(const EpochStats&)>& on_epoch = {});

}  // namespace dpf
