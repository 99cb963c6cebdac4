// SPDX-License-Identifier: Apache-2.0
#include "dpf/cli.hpp"

#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "dpf/config.hpp"
#include "dpf/dataset.hpp"
#include "dpf/depth.hpp"
#include "dpf/error.hpp"
#include "dpf/evaluation.hpp"
#include "dpf/explain.hpp"
#include "dpf/image_io.hpp"
#include "dpf/training.hpp"

namespace dpf {

namespace {

namespace fs = std::filesystem;

// Output-directory bookkeeping: every run leaves resolved_config.json and a
// manifest of produced files.
struct RunDir {
  fs::path dir;
  std::vector<std::string> files;

  explicit RunDir(const fs::path& d) : dir(d) { fs::create_directories(dir); }

  fs::path note(const fs::path& p) {
    files.push_back(p.string());
    return p;
  }

  void write_resolved_config(const RunConfig& cfg) {
    auto path = dir / "resolved_config.json";
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    f << cfg.resolved_json() << "\n";
    note(path);
  }

  void write_manifest() {
    nlohmann::json j;
    j["files"] = files;
    std::ofstream f(dir / "manifest.json");
    if (!f) throw IoError("cannot write manifest under " + dir.string());
    f << j.dump(2) << "\n";
  }
};

struct CommonFlags {
  std::string config_file;
  std::string profile;
  std::vector<std::string> sets;
  std::optional<int64_t> seed;
  std::string out;
  bool force = false;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_file, "configuration file (key = value lines)");
  cmd->add_option("--profile", flags.profile, "configuration preset: desk | full");
  cmd->add_option("--set", flags.sets, "override a configuration key (key=value)");
  cmd->add_option("--seed", flags.seed, "override run.seed");
  cmd->add_option("--out", flags.out, "override run.out output directory");
  cmd->add_flag("--force", flags.force, "proceed past config-hash mismatches");
}

RunConfig resolve_config(const CommonFlags& flags) {
  RunConfig cfg;
  if (!flags.profile.empty()) cfg.apply_profile(flags.profile);
  if (!flags.config_file.empty()) cfg.apply_file(flags.config_file);
  for (const auto& expr : flags.sets) cfg.apply_override_expr(expr);
  if (flags.seed) cfg.apply_override("run.seed", std::to_string(*flags.seed));
  if (!flags.out.empty()) cfg.apply_override("run.out", flags.out);
  cfg.finalize();
  return cfg;
}

SyntheticSceneSpec synth_proto(const RunConfig& cfg) {
  SyntheticSceneSpec proto;
  proto.n_blobs = static_cast<int>(cfg.integer("synth.max_blobs"));
  proto.height = cfg.integer("synth.img");
  proto.width = cfg.integer("synth.img");
  proto.class_densities = SyntheticSceneSpec::default_densities();
  return proto;
}

// Pretrained provider wrapped with the optional on-disk cache.
class CachingProvider : public DepthProvider {
 public:
  CachingProvider(std::unique_ptr<DepthProvider> inner, const fs::path& dir)
      : inner_(std::move(inner)), cache_(dir) {}

  DepthMap predict(const RGBDSample& sample) const override {
    if (auto hit = cache_.lookup(sample.dish_id)) {
      return DepthMap{std::move(*hit), false};
    }
    DepthMap d = inner_->predict(sample);
    cache_.store(sample.dish_id, d.values);
    return d;
  }

  std::string name() const override { return inner_->name() + "+cache"; }

 private:
  std::unique_ptr<DepthProvider> inner_;
  DepthCache cache_;
};

std::unique_ptr<DepthProvider> provider_for(const RunConfig& cfg, AblationMode mode) {
  if (mode == AblationMode::rgb_only) return nullptr;
  auto provider = make_depth_provider(cfg.depth_config());
  std::string cache_dir = cfg.str("depth.cache_dir");
  if (!cache_dir.empty() && cfg.depth_config().kind == DepthProviderKind::pretrained) {
    provider = std::make_unique<CachingProvider>(std::move(provider), cache_dir);
  }
  return provider;
}

struct LoadedData {
  std::vector<RGBDSample> train;
  std::vector<RGBDSample> test;
};

LoadedData load_dataset(const RunConfig& cfg) {
  std::string root_str = cfg.str("dataset.root");
  if (root_str.empty()) {
    throw LookupError("dataset.root is not set (flag --set dataset.root=... or DPF_DATA_ROOT)");
  }
  fs::path root = root_str;
  fs::path totals = cfg.str("dataset.totals").empty() ? root / "totals.csv"
                                                      : fs::path(cfg.str("dataset.totals"));
  std::optional<fs::path> ingredients;
  if (!cfg.str("dataset.ingredients").empty()) ingredients = cfg.str("dataset.ingredients");
  ParseStats stats;
  auto dishes = parse_metadata_files(totals, ingredients, &stats);
  for (const auto& m : stats.mismatches) {
    std::cerr << "warning: dish " << m.dish_id << " " << m.field << " ingredient sum differs by "
              << m.delta << "\n";
  }

  std::vector<std::string> ids;
  ids.reserve(dishes.size());
  for (const auto& d : dishes) ids.push_back(d.dish_id);
  SplitManifest split;
  bool manifests_present =
      fs::exists(root / "train_ids.txt") && fs::exists(root / "test_ids.txt");
  if (cfg.flag("split.use_manifests") && manifests_present) {
    split = load_split_manifests(ids, root / "train_ids.txt", root / "test_ids.txt");
  } else {
    split = build_split(ids,
                        {static_cast<int>(cfg.integer("split.ratio_train")),
                         static_cast<int>(cfg.integer("split.ratio_test"))},
                        static_cast<uint64_t>(cfg.integer("run.seed")));
  }

  std::map<std::string, const DishRecord*> by_id;
  for (const auto& d : dishes) by_id[d.dish_id] = &d;
  DepthPolicy policy =
      cfg.str("dataset.depth_policy") == "none" ? DepthPolicy::none : DepthPolicy::sensor;
  double depth_scale = cfg.num("dataset.depth_scale");
  bool augment_on = cfg.flag("aug.enabled");
  AugmentConfig aug = cfg.augment_config();
  auto seed = static_cast<uint64_t>(cfg.integer("run.seed"));

  auto load_ids = [&](const std::vector<std::string>& want, uint64_t stream) {
    std::vector<RGBDSample> out;
    out.reserve(want.size());
    uint64_t idx = 0;
    for (const auto& id : want) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw LookupError("split references unknown dish " + id);
      RGBDSample s = load_sample(*it->second, root, policy, depth_scale);
      if (augment_on) {
        Rng rng(mix64(seed, stream, idx));
        s = augment(s, aug, rng);
      }
      ++idx;
      out.push_back(std::move(s));
    }
    return out;
  };
  LoadedData data;
  data.train = load_ids(split.train_ids, 0xaa);
  data.test = load_ids(split.test_ids, 0xbb);
  return data;
}

FusionModel build_model(const RunConfig& cfg) { return FusionModel(cfg.model_config()); }

std::unique_ptr<DepthProvider> maybe_fine_tuned_provider(const RunConfig& cfg,
                                                         const std::vector<RGBDSample>& train,
                                                         RunDir& run, AblationMode mode) {
  DepthProviderConfig dc = cfg.depth_config();
  if (mode != AblationMode::rgb_only && dc.kind == DepthProviderKind::pretrained &&
      dc.fine_tune) {
    DeskDepthNet net(static_cast<uint64_t>(cfg.integer("run.seed")));
    load_depth_weights(*dc.weights_path, net);
    std::vector<RGBDSample> with_depth;
    for (const auto& s : train) {
      if (s.depth) with_depth.push_back(s);
    }
    if (with_depth.empty()) {
      throw LookupError("depth.fine_tune requires training samples with sensor depth");
    }
    DepthFineTuneConfig ft;
    ft.seed = static_cast<uint64_t>(cfg.integer("run.seed"));
    auto report = fine_tune_depth(net, with_depth, ft);
    std::cerr << "depth fine-tune: loss " << report.epoch_losses.front() << " -> "
              << report.epoch_losses.back() << "\n";
    auto path = run.note(run.dir / "depth_finetuned.dpfn");
    save_depth_weights(path, net);
    DepthProviderConfig tuned = dc;
    tuned.weights_path = path.string();
    tuned.fine_tune = false;
    return make_depth_provider(tuned);
  }
  return provider_for(cfg, mode);
}

int cmd_synth(const CommonFlags& flags, int n) {
  RunConfig cfg = resolve_config(flags);
  RunDir run(cfg.str("run.out"));
  auto seed = static_cast<uint64_t>(cfg.integer("run.seed"));
  int count = n > 0 ? n : static_cast<int>(cfg.integer("synth.n"));
  auto dishes = write_synthetic_dataset(
      run.dir, count, seed, synth_proto(cfg),
      {static_cast<int>(cfg.integer("split.ratio_train")),
       static_cast<int>(cfg.integer("split.ratio_test"))});
  run.note(run.dir / "totals.csv");
  run.note(run.dir / "train_ids.txt");
  run.note(run.dir / "test_ids.txt");
  for (const auto& d : dishes) {
    run.note(run.dir / d.dish_id / "rgb.png");
    run.note(run.dir / d.dish_id / "depth.raw");
  }
  run.write_resolved_config(cfg);
  run.write_manifest();
  nlohmann::json j = {{"dishes", dishes.size()}, {"out", run.dir.string()}, {"seed", seed}};
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_train(const CommonFlags& flags, const std::string& resume) {
  RunConfig cfg = resolve_config(flags);
  RunDir run(cfg.str("run.out"));
  run.write_resolved_config(cfg);
  LoadedData data = load_dataset(cfg);
  ModelConfig mc = cfg.model_config();
  auto provider = maybe_fine_tuned_provider(cfg, data.train, run, mc.ablation_mode);
  auto train_examples = prepare_examples(data.train, provider.get());

  FusionModel model(mc);
  Adam optimizer(model.parameters());
  TrainConfig tc = cfg.train_config();
  tc.checkpoint_path = run.note(run.dir / "model.dpfn");
  tc.log_path = run.note(run.dir / "train_log.jsonl");
  uint64_t hash = cfg.model_hash();
  int64_t start_epoch = 0;
  if (!resume.empty()) {
    auto report = load_training_checkpoint(resume, model, &optimizer, hash, flags.force);
    start_epoch = report.epoch;
    std::cerr << "resuming from epoch " << start_epoch << "\n";
  }
  auto result = fit(model, train_examples, tc, &optimizer, start_epoch, hash,
                    [](const EpochStats& s) {
                      std::cerr << "epoch " << s.epoch << " lr " << s.lr << " L_total " << s.total
                                << "\n";
                    });
  if (!result.history.empty()) {
    std::cout << "final L_total " << result.history.back().total << "\n";
  }
  run.write_manifest();
  return 0;
}

int cmd_evaluate(const CommonFlags& flags, const std::string& checkpoint,
                 const std::string& split) {
  RunConfig cfg = resolve_config(flags);
  RunDir run(cfg.str("run.out"));
  run.write_resolved_config(cfg);
  LoadedData data = load_dataset(cfg);
  const auto& samples = split == "train" ? data.train : data.test;
  ModelConfig mc = cfg.model_config();
  auto provider = provider_for(cfg, mc.ablation_mode);
  auto examples = prepare_examples(samples, provider.get());

  FusionModel model(mc);
  load_training_checkpoint(checkpoint, model, nullptr, cfg.model_hash(), flags.force);
  auto report = evaluate(model, examples, cfg.integer("eval.batch"), split);
  report.seed = static_cast<uint64_t>(cfg.integer("run.seed"));
  report.train_epochs = cfg.integer("train.epochs");
  write_report_files(run.dir, report);
  run.note(run.dir / "report.json");
  run.note(run.dir / "report.csv");
  run.note(run.dir / "report.txt");
  run.write_manifest();
  std::cout << write_report_text(report);
  return 0;
}

int cmd_predict(const CommonFlags& flags, const std::string& image, const std::string& depth_file,
                const std::string& checkpoint) {
  RunConfig cfg = resolve_config(flags);
  ModelConfig mc = cfg.model_config();
  FusionModel model(mc);
  if (!checkpoint.empty()) {
    load_training_checkpoint(checkpoint, model, nullptr, cfg.model_hash(), flags.force);
  } else {
    std::cerr << "warning: no --checkpoint given, predicting with untrained weights\n";
  }

  RGBDSample sample;
  sample.dish_id = fs::path(image).stem().string();
  sample.rgb = read_rgb_png(image);
  if (!depth_file.empty()) {
    Tensor d = fs::path(depth_file).extension() == ".raw" ? read_depth_raw(depth_file)
                                                          : read_depth_png(depth_file);
    d.scale_(cfg.num("dataset.depth_scale"));
    sample.depth = std::move(d);
  }

  Tensor depth3({3, sample.rgb.dim(1), sample.rgb.dim(2)});
  if (mc.ablation_mode != AblationMode::rgb_only) {
    std::unique_ptr<DepthProvider> provider;
    if (sample.depth) {
      DepthProviderConfig pc;
      pc.kind = DepthProviderKind::sensor_passthrough;
      provider = make_depth_provider(pc);
    } else if (cfg.depth_config().kind == DepthProviderKind::pretrained) {
      provider = provider_for(cfg, mc.ablation_mode);
    } else {
      throw LookupError(
          "model mode needs depth: pass --depth or configure depth.provider=pretrained");
    }
    DepthMap d = provider->predict(sample);
    depth3 = depth_to_backbone_input(normalize_depth(d));
  }

  Tensor out = clamp_nonnegative(
      model.predict(sample.rgb.reshaped({1, 3, sample.rgb.dim(1), sample.rgb.dim(2)}),
                    depth3.reshaped({1, 3, depth3.dim(1), depth3.dim(2)})));
  nlohmann::json j;
  for (int i = 0; i < 5; ++i) j[std::string(NutrientVector::names()[i])] = out(0, i);
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_ablate(const CommonFlags& flags, int seeds) {
  RunConfig cfg = resolve_config(flags);
  RunDir run(cfg.str("run.out"));
  run.write_resolved_config(cfg);
  LoadedData data = load_dataset(cfg);
  // The depth stream input comes from the configured provider for every
  // fusion row; rgb_only simply ignores it.
  auto provider = provider_for(cfg, AblationMode::multiscale_cab);
  auto train_examples = prepare_examples(data.train, provider.get());
  auto test_examples = prepare_examples(data.test, provider.get());

  AblationConfig ac;
  ac.model = cfg.model_config();
  ac.train = cfg.train_config();
  int n_seeds = seeds > 0 ? seeds : static_cast<int>(cfg.integer("ablate.seeds"));
  ac.seeds.clear();
  auto base_seed = static_cast<uint64_t>(cfg.integer("run.seed"));
  for (int i = 0; i < n_seeds; ++i) ac.seeds.push_back(mix64(base_seed, static_cast<uint64_t>(i)));

  auto result = run_ablation(train_examples, test_examples, ac,
                             [](const std::string& msg) { std::cerr << msg << "\n"; });
  {
    std::ofstream f(run.note(run.dir / "ablation_table.csv"));
    f << write_ablation_csv(result);
  }
  {
    std::ofstream f(run.note(run.dir / "ablation.txt"));
    f << write_ablation_text(result);
  }
  run.write_manifest();
  std::cout << write_ablation_text(result);
  return 0;
}

int cmd_explain(const CommonFlags& flags, const std::string& checkpoint, const std::string& dish,
                const std::string& task, int layer) {
  RunConfig cfg = resolve_config(flags);
  RunDir run(cfg.str("run.out"));
  run.write_resolved_config(cfg);
  LoadedData data = load_dataset(cfg);
  const RGBDSample* sample = nullptr;
  for (const auto& s : data.train) {
    if (s.dish_id == dish) sample = &s;
  }
  for (const auto& s : data.test) {
    if (s.dish_id == dish) sample = &s;
  }
  if (!sample) throw LookupError("dish '" + dish + "' not found in the dataset");

  ModelConfig mc = cfg.model_config();
  auto provider = provider_for(cfg, mc.ablation_mode);
  ModelExample ex = prepare_example(*sample, provider.get());

  FusionModel model(mc);
  if (!checkpoint.empty()) {
    load_training_checkpoint(checkpoint, model, nullptr, cfg.model_hash(), flags.force);
  }

  std::vector<int> tasks;
  if (task == "all") {
    tasks = {0, 1, 2, 3, 4};
  } else {
    const auto& names = NutrientVector::names();
    auto it = std::find(names.begin(), names.end(), task);
    if (it == names.end()) throw LookupError("unknown task '" + task + "'");
    tasks = {static_cast<int>(it - names.begin())};
  }
  for (int t : tasks) {
    Heatmap cam = grad_cam(model, ex, t, layer);
    auto path = write_heatmap_png(run.dir, cam, &ex.rgb);
    run.note(path);
    if (cam.degenerate) std::cerr << "note: degenerate (all-zero) CAM for task " << t << "\n";
  }
  if (provider) {
    DepthMap d = provider->predict(*sample);
    const Tensor* sensor = sample->depth ? &*sample->depth : nullptr;
    auto path = write_depth_render_png(run.dir, dish, d, &sample->rgb, sensor);
    run.note(path);
  }
  run.write_manifest();
  return 0;
}

int dispatch(int argc, char** argv) {
  CLI::App app{"DPF-Nutrition: depth-prediction + RGB-D fusion nutrition estimation"};
  app.require_subcommand(1);

  CommonFlags synth_flags, train_flags, eval_flags, predict_flags, ablate_flags, explain_flags;

  auto* synth = app.add_subcommand("synth", "generate a synthetic labeled dataset");
  int synth_n = 0;
  synth->add_option("--n", synth_n, "number of dishes");
  add_common(synth, synth_flags);

  auto* train = app.add_subcommand("train", "train the fusion model");
  std::string resume;
  train->add_option("--resume", resume, "checkpoint to resume from");
  add_common(train, train_flags);

  auto* evaluate_cmd = app.add_subcommand("evaluate", "evaluate a checkpoint on a split");
  std::string checkpoint, split = "test";
  evaluate_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  evaluate_cmd->add_option("--split", split, "train | test");
  add_common(evaluate_cmd, eval_flags);

  auto* predict = app.add_subcommand("predict", "estimate nutrients for one image");
  std::string image, depth_file, predict_ckpt;
  predict->add_option("--image", image, "RGB image (png)")->required();
  predict->add_option("--depth", depth_file, "optional depth file (png/raw)");
  predict->add_option("--checkpoint", predict_ckpt, "model checkpoint");
  add_common(predict, predict_flags);

  auto* ablate = app.add_subcommand("ablate", "run the five-row ablation matrix");
  int seeds = 0;
  ablate->add_option("--seeds", seeds, "number of seeds per row");
  add_common(ablate, ablate_flags);

  auto* explain_cmd = app.add_subcommand("explain", "emit ROI heatmaps and depth renders");
  std::string dish, task = "all";
  int layer = -1;
  std::string explain_ckpt;
  explain_cmd->add_option("--checkpoint", explain_ckpt, "model checkpoint");
  explain_cmd->add_option("--dish", dish, "dish id")->required();
  explain_cmd->add_option("--task", task, "nutrient name or 'all'");
  explain_cmd->add_option("--layer", layer, "fused pyramid level (default: final feature)");
  add_common(explain_cmd, explain_flags);

  CLI11_PARSE(app, argc, argv);

  if (app.got_subcommand(synth)) return cmd_synth(synth_flags, synth_n);
  if (app.got_subcommand(train)) return cmd_train(train_flags, resume);
  if (app.got_subcommand(evaluate_cmd)) return cmd_evaluate(eval_flags, checkpoint, split);
  if (app.got_subcommand(predict)) return cmd_predict(predict_flags, image, depth_file, predict_ckpt);
  if (app.got_subcommand(ablate)) return cmd_ablate(ablate_flags, seeds);
  if (app.got_subcommand(explain_cmd)) {
    return cmd_explain(explain_flags, explain_ckpt, dish, task, layer);
  }
  return 1;
}

}  // namespace

int cli_main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const LookupError& e) {
    std::cerr << "missing data: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace dpf
