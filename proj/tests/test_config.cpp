// SPDX-License-Identifier: Apache-2.0
// Run configuration: schema validation, precedence, profiles, hashing.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "dpf/config.hpp"
#include "dpf/error.hpp"

using namespace dpf;
namespace fs = std::filesystem;

TEST_CASE("defaults follow the published training protocol") {
  RunConfig cfg;
  cfg.finalize();
  CHECK(cfg.num("train.lr0") == 5e-5);
  CHECK(cfg.num("train.decay") == 0.98);
  CHECK(cfg.integer("train.epochs") == 150);
  CHECK(cfg.integer("train.batch") == 8);
  CHECK(cfg.integer("aug.out_h") == 336);
  CHECK(cfg.integer("aug.out_w") == 448);
  CHECK(cfg.str("model.backbone") == "resnet101");
  CHECK(cfg.integer("model.head_hidden") == 2048);
}

TEST_CASE("unknown keys are rejected with the field path") {
  RunConfig cfg;
  try {
    cfg.apply_override("train.lr_zero", "1");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "train.lr_zero");
  }
  CHECK_THROWS_AS(cfg.apply_override_expr("no_equals_sign"), ConfigError);
}

TEST_CASE("type validation happens at finalize") {
  RunConfig cfg;
  cfg.apply_override("train.lr0", "fast");
  CHECK_THROWS_AS(cfg.finalize(), ConfigError);

  RunConfig cfg2;
  cfg2.apply_override("train.epochs", "3.5");
  CHECK_THROWS_AS(cfg2.finalize(), ConfigError);

  RunConfig cfg3;
  cfg3.apply_override("aug.enabled", "maybe");
  CHECK_THROWS_AS(cfg3.finalize(), ConfigError);
}

TEST_CASE("file values load and flag overrides win") {
  auto dir = fs::temp_directory_path() / "dpf_cfg";
  fs::create_directories(dir);
  auto path = dir / "run.cfg";
  {
    std::ofstream f(path);
    f << "# comment\n";
    f << "train.lr0 = 1e-3\n";
    f << "model.backbone = small   # trailing comment\n";
  }
  RunConfig cfg;
  cfg.apply_file(path);
  CHECK(cfg.num("train.lr0") == 1e-3);
  CHECK(cfg.str("model.backbone") == "small");
  cfg.apply_override("train.lr0", "2e-3");
  CHECK(cfg.num("train.lr0") == 2e-3);

  {
    std::ofstream f(path);
    f << "train.unknown_key = 1\n";
  }
  RunConfig cfg2;
  CHECK_THROWS_AS(cfg2.apply_file(path), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("desk profile configures the synthetic minutes-scale preset") {
  RunConfig cfg;
  cfg.apply_profile("desk");
  cfg.finalize();
  CHECK(cfg.str("model.backbone") == "small");
  CHECK(cfg.integer("model.image_h") == 64);
  CHECK(cfg.str("depth.provider") == "synthetic_oracle");
  CHECK(cfg.integer("train.epochs") == 30);
  CHECK_THROWS_AS(cfg.apply_profile("gpu_cluster"), ConfigError);
}

TEST_CASE("model hash covers architecture keys only") {
  RunConfig a, b;
  CHECK(a.model_hash() == b.model_hash());
  b.apply_override("train.lr0", "1");  // training key: hash unchanged
  CHECK(a.model_hash() == b.model_hash());
  b.apply_override("model.head_hidden", "128");
  CHECK(a.model_hash() != b.model_hash());
  b.apply_override("model.head_hidden", "2048");
  b.apply_override("fusion.recursion_input", "raw");
  CHECK(a.model_hash() != b.model_hash());
}

TEST_CASE("canonical text is sorted and resolved json carries every key") {
  RunConfig cfg;
  std::string text = cfg.canonical_text();
  CHECK(text.find("train.lr0 = 5e-5") != std::string::npos);
  // Sorted: aug.* precedes train.*
  CHECK(text.find("aug.out_h") < text.find("train.lr0"));
  std::string json = cfg.resolved_json();
  CHECK(json.find("\"runtime.workers\"") != std::string::npos);
}

TEST_CASE("typed sub-configs materialize and validate") {
  RunConfig cfg;
  cfg.apply_profile("desk");
  cfg.apply_override("run.seed", "7");
  cfg.finalize();
  ModelConfig mc = cfg.model_config();
  CHECK(mc.backbone == "small");
  CHECK(mc.seed == 7);
  TrainConfig tc = cfg.train_config();
  CHECK(tc.epochs == 30);
  CHECK(tc.seed == 7);
  DepthProviderConfig dc = cfg.depth_config();
  CHECK(dc.kind == DepthProviderKind::synthetic_oracle);

  RunConfig bad;
  bad.apply_override("model.ablation_mode", "everything_at_once");
  CHECK_THROWS_AS(bad.finalize(), ConfigError);
}

TEST_CASE("environment variables seed the dataset root default") {
  setenv("DPF_DATA_ROOT", "/data/somewhere", 1);
  RunConfig cfg;
  CHECK(cfg.str("dataset.root") == "/data/somewhere");
  // Explicit values win over the environment.
  cfg.apply_override("dataset.root", "/other");
  CHECK(cfg.str("dataset.root") == "/other");
  unsetenv("DPF_DATA_ROOT");
}
