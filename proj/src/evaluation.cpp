// SPDX-License-Identifier: Apache-2.0
#include "dpf/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dpf/error.hpp"

namespace dpf {

double mae(const std::vector<double>& pred, const std::vector<double>& truth) {
  if (pred.empty()) throw ValueError("mae: empty input");
  if (pred.size() != truth.size()) throw ValueError("mae: length mismatch");
  double acc = 0;
  for (size_t i = 0; i < pred.size(); ++i) acc += std::fabs(pred[i] - truth[i]);
  return acc / static_cast<double>(pred.size());
}

double pmae(const std::vector<double>& pred, const std::vector<double>& truth) {
  double m = mae(pred, truth);
  double mean_truth = 0;
  for (double v : truth) mean_truth += v;
  mean_truth /= static_cast<double>(truth.size());
  if (mean_truth == 0.0) {
    throw ValueError("pmae undefined: ground-truth mean is zero");
  }
  return m / mean_truth;
}

MetricsReport evaluate(FusionModel& model, const std::vector<ModelExample>& test,
                       int64_t batch, const std::string& split_tag) {
  if (test.empty()) throw ValueError("evaluate: empty test set");
  if (batch < 1) throw ValueError("evaluate: batch must be >= 1");
  bool was_training = model.is_training();
  model.set_training(false);

  // Per-nutrient absolute-error and truth accumulators in 64-bit.
  std::array<double, 5> abs_err{};
  std::array<double, 5> truth_sum{};
  int64_t counted = 0;
  MetricsReport report;
  report.split_tag = split_tag;

  auto n = static_cast<int64_t>(test.size());
  for (int64_t base = 0; base < n; base += batch) {
    int64_t bs = std::min<int64_t>(batch, n - base);
    // Validate shapes per sample; failures are recorded and skipped.
    std::vector<int64_t> ok;
    for (int64_t b = 0; b < bs; ++b) {
      const ModelExample& ex = test[static_cast<size_t>(base + b)];
      if (ex.rgb.ndim() != 3 || ex.rgb.dim(0) != 3 || !ex.rgb.same_shape(test[0].rgb) ||
          !ex.depth3.same_shape(test[0].depth3)) {
        report.failures.push_back("sample " + ex.dish_id + ": shape " + ex.rgb.shape_str());
        continue;
      }
      ok.push_back(base + b);
    }
    if (ok.empty()) continue;
    auto bn = static_cast<int64_t>(ok.size());
    int64_t h = test[0].rgb.dim(1), w = test[0].rgb.dim(2);
    Tensor rgb({bn, 3, h, w});
    Tensor depth({bn, 3, h, w});
    for (int64_t b = 0; b < bn; ++b) {
      const ModelExample& ex = test[static_cast<size_t>(ok[static_cast<size_t>(b)])];
      std::copy(ex.rgb.data(), ex.rgb.data() + ex.rgb.numel(), rgb.data() + b * 3 * h * w);
      std::copy(ex.depth3.data(), ex.depth3.data() + ex.depth3.numel(),
                depth.data() + b * 3 * h * w);
    }
    Tensor out = clamp_nonnegative(model.predict(rgb, depth));
    for (int64_t b = 0; b < bn; ++b) {
      const ModelExample& ex = test[static_cast<size_t>(ok[static_cast<size_t>(b)])];
      for (int i = 0; i < 5; ++i) {
        abs_err[static_cast<size_t>(i)] += std::fabs(out(b, i) - ex.target[i]);
        truth_sum[static_cast<size_t>(i)] += ex.target[i];
      }
    }
    counted += bn;
  }
  model.set_training(was_training);

  if (counted == 0) throw ValueError("evaluate: every sample failed shape validation");
  report.n_samples = counted;
  double pmae_acc = 0;
  for (int i = 0; i < 5; ++i) {
    auto idx = static_cast<size_t>(i);
    double m = abs_err[idx] / static_cast<double>(counted);
    double mean_truth = truth_sum[idx] / static_cast<double>(counted);
    if (mean_truth == 0.0) {
      throw ValueError("pmae undefined for nutrient " + std::string(NutrientVector::names()[i]) +
                       ": ground-truth mean is zero");
    }
    report.per_nutrient[idx].mae = m;
    report.per_nutrient[idx].pmae = m / mean_truth;
    pmae_acc += report.per_nutrient[idx].pmae;
  }
  report.mean_pmae = pmae_acc / 5.0;
  return report;
}

AblationResult run_ablation(const std::vector<ModelExample>& train,
                            const std::vector<ModelExample>& test, const AblationConfig& config,
                            const std::function<void(const std::string&)>& log) {
  AblationResult result;
  for (AblationMode mode : all_ablation_modes()) {
    std::string row = ablation_row_id(mode);
    for (uint64_t seed : config.seeds) {
      AblationRun run;
      run.seed = seed;
      try {
        ModelConfig mc = config.model;
        mc.ablation_mode = mode;
        mc.seed = seed;
        TrainConfig tc = config.train;
        tc.seed = seed;
        tc.checkpoint_path.clear();  // rows never clobber each other's files
        tc.log_path.clear();
        if (log) log("ablation " + row + " [" + to_string(mode) + "] seed " + std::to_string(seed));
        FusionModel model(mc);
        fit(model, train, tc);
        run.report = evaluate(model, test, config.train.batch, "test");
        run.report.seed = seed;
        run.report.train_epochs = tc.epochs;
      } catch (const std::exception& e) {
        run.error = e.what();
        if (log) log("ablation " + row + " seed " + std::to_string(seed) + " failed: " + run.error);
      }
      result.rows[row].push_back(std::move(run));
    }
  }
  return result;
}

// ---- serialization ---------------------------------------------------------------

namespace {

const std::array<const char*, 5> kColumns = {"calorie", "mass", "fat", "carb", "protein"};

std::string format_pmae_percent(double pmae_fraction) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f%%", pmae_fraction * 100.0);
  return buf;
}

std::string format_mae(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

double row_mean_pmae(const std::vector<AblationRun>& runs) {
  double acc = 0;
  int64_t n = 0;
  for (const auto& r : runs) {
    if (r.error.empty()) {
      acc += r.report.mean_pmae;
      ++n;
    }
  }
  return n ? acc / static_cast<double>(n) : std::nan("");
}

}  // namespace

std::string write_report_json(const MetricsReport& report) {
  nlohmann::json j;
  j["split"] = report.split_tag;
  j["n_samples"] = report.n_samples;
  j["seed"] = report.seed;
  j["train_epochs"] = report.train_epochs;
  for (int i = 0; i < 5; ++i) {
    auto idx = static_cast<size_t>(i);
    j["metrics"][kColumns[idx]] = {{"mae", report.per_nutrient[idx].mae},
                                   {"pmae", report.per_nutrient[idx].pmae}};
  }
  j["mean_pmae"] = report.mean_pmae;
  j["failures"] = report.failures;
  return j.dump(2);
}

MetricsReport parse_report_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  MetricsReport report;
  report.split_tag = j.at("split").get<std::string>();
  report.n_samples = j.at("n_samples").get<int64_t>();
  report.seed = j.at("seed").get<uint64_t>();
  report.train_epochs = j.at("train_epochs").get<int64_t>();
  for (int i = 0; i < 5; ++i) {
    auto idx = static_cast<size_t>(i);
    report.per_nutrient[idx].mae = j.at("metrics").at(kColumns[idx]).at("mae").get<double>();
    report.per_nutrient[idx].pmae = j.at("metrics").at(kColumns[idx]).at("pmae").get<double>();
  }
  report.mean_pmae = j.at("mean_pmae").get<double>();
  report.failures = j.at("failures").get<std::vector<std::string>>();
  return report;
}

std::string write_report_csv(const MetricsReport& report) {
  std::ostringstream os;
  os << "split,n_samples";
  for (const char* c : kColumns) os << "," << c << "_mae," << c << "_pmae";
  os << ",mean_pmae\n";
  os << report.split_tag << "," << report.n_samples;
  char buf[64];
  for (int i = 0; i < 5; ++i) {
    auto idx = static_cast<size_t>(i);
    std::snprintf(buf, sizeof(buf), ",%.17g,%.17g", report.per_nutrient[idx].mae,
                  report.per_nutrient[idx].pmae);
    os << buf;
  }
  std::snprintf(buf, sizeof(buf), ",%.17g\n", report.mean_pmae);
  os << buf;
  return os.str();
}

std::string write_report_text(const MetricsReport& report) {
  std::ostringstream os;
  os << "split: " << report.split_tag << "  (n=" << report.n_samples << ")\n";
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-10s %-16s %-16s %-16s %-16s %-16s %s\n", "", "Calorie",
                "Mass", "Fat", "Carb", "Protein", "Mean");
  os << buf;
  std::snprintf(buf, sizeof(buf), "%-10s %-16s %-16s %-16s %-16s %-16s %s\n", "", "MAE / PMAE",
                "MAE / PMAE", "MAE / PMAE", "MAE / PMAE", "MAE / PMAE", "PMAE");
  os << buf;
  os << "model      ";
  for (int i = 0; i < 5; ++i) {
    auto idx = static_cast<size_t>(i);
    std::string cell = format_mae(report.per_nutrient[idx].mae) + " / " +
                       format_pmae_percent(report.per_nutrient[idx].pmae);
    std::snprintf(buf, sizeof(buf), "%-17s", cell.c_str());
    os << buf;
  }
  os << format_pmae_percent(report.mean_pmae) << "\n";
  if (!report.failures.empty()) {
    os << "failures (" << report.failures.size() << "):\n";
    for (const auto& f : report.failures) os << "  " << f << "\n";
  }
  return os.str();
}

std::string write_ablation_csv(const AblationResult& result) {
  std::ostringstream os;
  os << "index,model,seed,train_epochs";
  for (const char* c : kColumns) os << "," << c << "_mae," << c << "_pmae";
  os << ",mean_pmae,error\n";
  static const std::map<std::string, std::string> kNames = {
      {"(a)", "RGB Stream"},
      {"(b)", "Depth Stream"},
      {"(c)", "(a)+(b)+direct fusion"},
      {"(d)", "(a)+(b)+multi-scale fusion"},
      {"(e)", "(d) + CAB"},
  };
  for (const auto& [row, runs] : result.rows) {
    for (const auto& run : runs) {
      os << row << "," << kNames.at(row) << "," << run.seed << "," << run.report.train_epochs;
      if (!run.error.empty()) {
        for (int i = 0; i < 11; ++i) os << ",";
        std::string msg = run.error;
        std::replace(msg.begin(), msg.end(), ',', ';');
        os << msg << "\n";
        continue;
      }
      char buf[64];
      for (int i = 0; i < 5; ++i) {
        auto idx = static_cast<size_t>(i);
        std::snprintf(buf, sizeof(buf), ",%.17g,%.17g", run.report.per_nutrient[idx].mae,
                      run.report.per_nutrient[idx].pmae);
        os << buf;
      }
      std::snprintf(buf, sizeof(buf), ",%.17g,\n", run.report.mean_pmae);
      os << buf;
    }
  }
  return os.str();
}

std::string write_ablation_text(const AblationResult& result) {
  std::ostringstream os;
  os << "Ablation (per-row mean over seeds)\n";
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-6s %-28s %s\n", "Index", "Model", "Mean PMAE");
  os << buf;
  static const std::map<std::string, std::string> kNames = {
      {"(a)", "RGB Stream"},
      {"(b)", "Depth Stream"},
      {"(c)", "(a)+(b)+direct fusion"},
      {"(d)", "(a)+(b)+multi-scale fusion"},
      {"(e)", "(d) + CAB"},
  };
  for (const auto& [row, runs] : result.rows) {
    double mean = row_mean_pmae(runs);
    std::string cell = std::isnan(mean) ? "failed" : format_pmae_percent(mean);
    std::snprintf(buf, sizeof(buf), "%-6s %-28s %s\n", row.c_str(), kNames.at(row).c_str(),
                  cell.c_str());
    os << buf;
  }
  return os.str();
}

void write_report_files(const std::filesystem::path& dir, const MetricsReport& report) {
  std::filesystem::create_directories(dir);
  auto dump = [&](const char* name, const std::string& content) {
    std::ofstream f(dir / name);
    if (!f) throw IoError("cannot write report file: " + (dir / name).string());
    f << content;
  };
  dump("report.json", write_report_json(report));
  dump("report.csv", write_report_csv(report));
  dump("report.txt", write_report_text(report));
}

}  // namespace dpf
