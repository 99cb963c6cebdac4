// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dpf/training.hpp"

namespace dpf {

// ---- metrics ---------------------------------------------------------------

// Mean absolute error.
double mae(const std::vector<double>& pred, const std::vector<double>& truth);

// MAE divided by the mean ground-truth value (ratio of means, not mean of
// per-sample ratios). Throws when mean(truth) == 0: the metric is undefined.
double pmae(const std::vector<double>& pred, const std::vector<double>& truth);

struct NutrientMetrics {
  double mae = 0;
  double pmae = 0;  // fraction, not percent
};

struct MetricsReport {
  std::array<NutrientMetrics, 5> per_nutrient;  // calorie, mass, fat, carb, protein
  double mean_pmae = 0;
  int64_t n_samples = 0;
  std::string split_tag;
  std::vector<std::string> failures;  // per-sample errors (run continues)
  // Fairness metadata recorded with every ablation row.
  uint64_t seed = 0;
  int64_t train_epochs = 0;
};

// Batched deterministic evaluation on a frozen model. Metrics are computed on
// reported (non-negative-clamped) predictions in 64-bit. Samples whose shapes
// do not match the model are collected in `failures` and skipped.
MetricsReport evaluate(FusionModel& model, const std::vector<ModelExample>& test,
                       int64_t batch, const std::string& split_tag);

// ---- ablation matrix ----------------------------------------------------------

struct AblationConfig {
  ModelConfig model;  // base config; ablation_mode is overridden per row
  TrainConfig train;
  std::vector<uint64_t> seeds = {0, 1, 2};
};

struct AblationRun {
  uint64_t seed = 0;
  MetricsReport report;
  std::string error;  // non-empty when this variant crashed
};

struct AblationResult {
  // Keyed "(a)".."(e)"; each row holds one run per seed.
  std::map<std::string, std::vector<AblationRun>> rows;
};

// Trains and evaluates all five ablation variants under identical seeds and
// budgets. A crash in one variant is recorded in its row and does not affect
// the others.
AblationResult run_ablation(const std::vector<ModelExample>& train,
                            const std::vector<ModelExample>& test, const AblationConfig& config,
                            const std::function<void(const std::string&)>& log = {});

// ---- report serialization ------------------------------------------------------

// JSON round trips losslessly through parse_report_json.
std::string write_report_json(const MetricsReport& report);
MetricsReport parse_report_json(const std::string& text);

// CSV and text render the calorie, mass, fat, carb, protein, mean column
// order with "MAE / PMAE%" pairs (PMAE to one decimal percent).
std::string write_report_csv(const MetricsReport& report);
std::string write_report_text(const MetricsReport& report);

std::string write_ablation_csv(const AblationResult& result);
std::string write_ablation_text(const AblationResult& result);

// Writes report.json / report.csv / report.txt under dir.
void write_report_files(const std::filesystem::path& dir, const MetricsReport& report);

}  // namespace dpf
