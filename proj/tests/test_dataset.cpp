// SPDX-License-Identifier: Apache-2.0
// Metadata parsing, splits, augmentation, image loading, synthetic scenes.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "dpf/dataset.hpp"
#include "dpf/error.hpp"
#include "dpf/image_io.hpp"
#include "test_util.hpp"

using namespace dpf;
namespace fs = std::filesystem;

namespace {

// Ingredient rows mirror published nutrition-fact examples for two dishes;
// the first dish's totals are exact column sums, the second's are rounded to
// one decimal (as upstream data does), which must surface as warnings only.
const char* kTotalsCsv =
    "dish_id,calories,mass,fat,carb,protein\n"
    "dish_1562788816,441,405,20.15,37.4,36.8\n"
    "dish_1557862783,443,330,24.9,3.9,50.4\n";

const char* kIngredientsCsv =
    "dish_id,name,calories,mass,fat,carb,protein\n"
    "dish_1562788816,Pork,231,115,13.6,0,25.3\n"
    "dish_1562788816,Corn,41,55,0.94,8.6,1.2\n"
    "dish_1562788816,Rice,133,120,0.31,28.8,2.8\n"
    "dish_1562788816,Fish,36,115,5.3,0,7.5\n"
    "dish_1557862783,Steak,320,160,22.4,0,29.5\n"
    "dish_1557862783,Chicken,104,95,2.3,0,19.5\n"
    "dish_1557862783,Cauliflower,19,75,0.23,3.9,1.4\n";

std::vector<DishRecord> parse_fixture(ParseStats* stats = nullptr) {
  std::istringstream totals(kTotalsCsv), ingredients(kIngredientsCsv);
  return parse_metadata(totals, &ingredients, stats);
}

fs::path temp_dir(const std::string& tag) {
  auto dir = fs::temp_directory_path() / ("dpf_test_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("parse_metadata joins ingredients and totals match column sums") {
  ParseStats stats;
  auto dishes = parse_fixture(&stats);
  REQUIRE(dishes.size() == 2);
  const auto& d = dishes[0];
  CHECK(d.dish_id == "dish_1562788816");
  REQUIRE(d.ingredients.size() == 4);
  CHECK(d.ingredients[0].name == "Pork");
  NutrientVector sum;
  for (const auto& ing : d.ingredients) sum += ing.nutrients;
  // Column-wise sums of the ingredient table.
  CHECK(sum.calories == doctest::Approx(441.0));
  CHECK(sum.fat == doctest::Approx(20.15));
  CHECK(sum.carb == doctest::Approx(37.4));
  CHECK(sum.protein == doctest::Approx(36.8));
  CHECK(d.totals.calories == doctest::Approx(441.0));
  CHECK(d.totals.fat == doctest::Approx(20.15));
  CHECK(d.totals.carb == doctest::Approx(37.4));
  CHECK(d.totals.protein == doctest::Approx(36.8));

  // Dish 1 sums exactly; dish 2 totals are rounded -> warnings, not failures.
  for (const auto& m : stats.mismatches) CHECK(m.dish_id == "dish_1557862783");
  CHECK(!stats.mismatches.empty());
  CHECK(stats.orphan_ingredient_ids.empty());
}

TEST_CASE("parse_metadata without ingredients file yields empty lists, no warnings") {
  std::istringstream totals(kTotalsCsv);
  ParseStats stats;
  auto dishes = parse_metadata(totals, nullptr, &stats);
  REQUIRE(dishes.size() == 2);
  CHECK(dishes[0].ingredients.empty());
  CHECK(dishes[1].ingredients.empty());
  CHECK(stats.mismatches.empty());
}

TEST_CASE("parse_metadata error paths") {
  SUBCASE("negative nutrient names field and line") {
    std::istringstream totals(
        "dish_id,calories,mass,fat,carb,protein\n"
        "dish_a,100,50,1,2,3\n"
        "dish_b,-5,50,1,2,3\n");
    try {
      parse_metadata(totals, nullptr);
      FAIL("expected ValueError");
    } catch (const ValueError& e) {
      std::string msg = e.what();
      CHECK(msg.find("calories") != std::string::npos);
      CHECK(msg.find("line 3") != std::string::npos);
    }
  }
  SUBCASE("duplicate dish_id") {
    std::istringstream totals(
        "dish_id,calories,mass,fat,carb,protein\n"
        "dish_a,100,50,1,2,3\n"
        "dish_a,90,40,1,2,3\n");
    CHECK_THROWS_AS(parse_metadata(totals, nullptr), DuplicateError);
  }
  SUBCASE("malformed row carries line number") {
    std::istringstream totals(
        "dish_id,calories,mass,fat,carb,protein\n"
        "dish_a,100,50,1,2\n");
    try {
      parse_metadata(totals, nullptr);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line() == 2);
    }
  }
  SUBCASE("bad header rejected") {
    std::istringstream totals("dish,kcal\n");
    CHECK_THROWS_AS(parse_metadata(totals, nullptr), ParseError);
  }
  SUBCASE("orphan ingredient ids are recorded, not fatal") {
    std::istringstream totals(
        "dish_id,calories,mass,fat,carb,protein\n"
        "dish_a,100,50,1,2,3\n");
    std::istringstream ing(
        "dish_id,name,calories,mass,fat,carb,protein\n"
        "dish_zz,Ghost,1,1,0,0,0\n");
    ParseStats stats;
    auto dishes = parse_metadata(totals, &ing, &stats);
    CHECK(dishes.size() == 1);
    REQUIRE(stats.orphan_ingredient_ids.size() == 1);
    CHECK(stats.orphan_ingredient_ids[0] == "dish_zz");
  }
}

TEST_CASE("metadata round trip: serialize(parse(file)) re-parses equal") {
  auto dishes = parse_fixture();
  std::ostringstream totals, ingredients;
  write_metadata(dishes, totals, &ingredients);
  std::istringstream t2(totals.str()), i2(ingredients.str());
  auto again = parse_metadata(t2, &i2);
  CHECK(again == dishes);
}

TEST_CASE("build_split hits the 5:1 ratio exactly or within one") {
  std::vector<std::string> ids;
  for (int i = 0; i < 600; ++i) ids.push_back("d" + std::to_string(i));
  auto split = build_split(ids, {5, 1}, 7);
  CHECK(split.train_ids.size() == 500);
  CHECK(split.test_ids.size() == 100);

  std::vector<std::string> big;
  for (int i = 0; i < 3500; ++i) big.push_back("d" + std::to_string(i));
  auto split2 = build_split(big, {5, 1}, 3);
  // floor/ceil of 3500*5/6 = 2916.67
  CHECK(split2.train_ids.size() >= 2916);
  CHECK(split2.train_ids.size() <= 2917);

  CHECK_THROWS_AS(build_split({"only"}, {5, 1}, 0), ValueError);
  CHECK_THROWS_AS(build_split({"a", "a", "b"}, {5, 1}, 0), DuplicateError);
}

TEST_CASE("split disjointness and coverage hold across seeds") {
  std::vector<std::string> ids;
  for (int i = 0; i < 97; ++i) ids.push_back("d" + std::to_string(i));
  for (uint64_t seed : {0ull, 1ull, 42ull, 1234567ull}) {
    auto split = build_split(ids, {5, 1}, seed);
    std::set<std::string> all(split.train_ids.begin(), split.train_ids.end());
    for (const auto& id : split.test_ids) {
      CHECK(all.count(id) == 0);
      all.insert(id);
    }
    CHECK(all.size() == ids.size());
    // Determinism.
    auto split_again = build_split(ids, {5, 1}, seed);
    CHECK(split.train_ids == split_again.train_ids);
  }
}

TEST_CASE("split manifests load verbatim and validate") {
  auto dir = temp_dir("split");
  {
    std::ofstream t(dir / "train_ids.txt"), e(dir / "test_ids.txt");
    t << "d2\nd0\n";
    e << "d1\n";
  }
  std::vector<std::string> known = {"d0", "d1", "d2"};
  auto split = load_split_manifests(known, dir / "train_ids.txt", dir / "test_ids.txt");
  CHECK(split.train_ids == std::vector<std::string>{"d2", "d0"});
  CHECK(split.test_ids == std::vector<std::string>{"d1"});

  {
    std::ofstream t(dir / "train_ids.txt");
    t << "d0\nunknown_id\n";
  }
  CHECK_THROWS_AS(load_split_manifests(known, dir / "train_ids.txt", dir / "test_ids.txt"),
                  LookupError);
  fs::remove_all(dir);
}

namespace {

RGBDSample make_sample(int64_t h, int64_t w, Rng& rng) {
  RGBDSample s;
  s.dish_id = "t";
  s.rgb = dpf::test::random_tensor({3, h, w}, rng, 0.0, 1.0);
  s.depth = dpf::test::random_tensor({h, w}, rng, 0.0, 5.0);
  s.target = {100, 50, 10, 20, 30};
  return s;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (int64_t i = 0; i < a.numel(); ++i) {
    if (a.data()[i] != b.data()[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("augment resizes 480x640 to 336x448 and keeps target") {
  Rng rng(5);
  auto s = make_sample(480, 640, rng);
  AugmentConfig cfg;
  Rng arng(9);
  auto out = augment(s, cfg, arng);
  CHECK(out.rgb.shape() == std::vector<int64_t>{3, 336, 448});
  REQUIRE(out.depth.has_value());
  CHECK(out.depth->shape() == std::vector<int64_t>{336, 448});
  CHECK(out.target == s.target);
}

TEST_CASE("augment with flip probability zero is the resized input") {
  Rng rng(6);
  auto s = make_sample(64, 64, rng);
  AugmentConfig cfg;
  cfg.out_h = 48;
  cfg.out_w = 48;
  cfg.flip_prob = 0.0;
  Rng a1(1);
  auto out = augment(s, cfg, a1);
  Tensor expected_rgb = center_crop(bilinear_resize(s.rgb, 48, 48), 48, 48);
  CHECK(tensors_equal(out.rgb, expected_rgb));
}

TEST_CASE("horizontal flip twice equals no flip, depth follows rgb") {
  Rng rng(7);
  auto s = make_sample(40, 52, rng);
  AugmentConfig cfg;
  cfg.out_h = 40;
  cfg.out_w = 52;
  cfg.flip_prob = 1.0;  // always flip
  Rng a1(1), a2(2);
  auto once = augment(s, cfg, a1);
  RGBDSample once_sample = once;
  auto twice = augment(once_sample, cfg, a2);
  cfg.flip_prob = 0.0;
  Rng a3(3);
  auto never = augment(s, cfg, a3);
  CHECK(tensors_equal(twice.rgb, never.rgb));
  CHECK(tensors_equal(*twice.depth, *never.depth));
  // Flip moved pixels identically in rgb and depth.
  CHECK(once.rgb(0, 3, 5) == never.rgb(0, 3, 52 - 1 - 5));
  CHECK((*once.depth)(3, 5) == (*never.depth)(3, 52 - 1 - 5));
}

TEST_CASE("augment rejects crop larger than resize target") {
  Rng rng(8);
  auto s = make_sample(64, 64, rng);
  AugmentConfig cfg;
  cfg.out_h = 48;
  cfg.out_w = 48;
  cfg.resize_h = 32;
  cfg.resize_w = 64;
  Rng arng(1);
  CHECK_THROWS_AS(augment(s, cfg, arng), ValueError);
}

TEST_CASE("load_sample policies and error contracts") {
  auto dir = temp_dir("load");
  Rng rng(11);
  DishRecord rec;
  rec.dish_id = "dish_x";
  rec.totals = {10, 20, 1, 2, 3};
  auto ddir = dir / rec.dish_id;
  fs::create_directories(ddir);
  Tensor rgb = dpf::test::random_tensor({3, 24, 30}, rng, 0.0, 1.0);
  write_rgb_png(ddir / "rgb.png", rgb);
  Tensor depth = dpf::test::random_tensor({24, 30}, rng, 0.0, 9.0);
  write_depth_raw(ddir / "depth.raw", depth);

  auto with_depth = load_sample(rec, dir, DepthPolicy::sensor);
  REQUIRE(with_depth.depth.has_value());
  CHECK(with_depth.rgb.shape() == std::vector<int64_t>{3, 24, 30});
  // Raw float grid reloads bit-identically after float32 quantization.
  Tensor expected = depth;
  for (int64_t i = 0; i < expected.numel(); ++i) {
    expected.data()[i] = static_cast<float>(expected.data()[i]);
  }
  CHECK(tensors_equal(*with_depth.depth, expected));

  auto without = load_sample(rec, dir, DepthPolicy::none);
  CHECK_FALSE(without.depth.has_value());

  fs::remove(ddir / "depth.raw");
  try {
    load_sample(rec, dir, DepthPolicy::sensor);
    FAIL("expected LookupError");
  } catch (const LookupError& e) {
    CHECK(std::string(e.what()).find("dish_x") != std::string::npos);
  }

  DishRecord missing;
  missing.dish_id = "nope";
  missing.totals = rec.totals;
  CHECK_THROWS_AS(load_sample(missing, dir, DepthPolicy::none), LookupError);
  fs::remove_all(dir);
}

TEST_CASE("depth png round trip is 16-bit quantized") {
  auto dir = temp_dir("png16");
  Tensor depth = Tensor::from({2, 3}, {0, 100, 200, 300, 400, 65535});
  write_depth_png16(dir / "d.png", depth, 1.0);
  Tensor back = read_depth_png(dir / "d.png");
  CHECK(tensors_equal(back, depth));
  fs::remove_all(dir);
}

TEST_CASE("synthetic scenes are deterministic and labeled by closed-form volume") {
  SyntheticSceneSpec spec;
  spec.seed = 77;
  spec.n_blobs = 3;
  spec.class_densities = SyntheticSceneSpec::default_densities();
  auto a = generate_synthetic(spec);
  auto b = generate_synthetic(spec);
  CHECK(tensors_equal(a.rgb, b.rgb));
  CHECK(tensors_equal(*a.depth, *b.depth));
  CHECK(a.target == b.target);

  // Depth is anchored by the fixed-height rim.
  CHECK(a.depth->max() == doctest::Approx(spec.rim_height));
  CHECK(a.depth->min() == 0.0);
  CHECK(a.rgb.min() >= 0.0);
  CHECK(a.rgb.max() <= 1.0);

  SyntheticSceneSpec bad = spec;
  bad.n_blobs = 0;
  CHECK_THROWS_AS(generate_synthetic(bad), ValueError);
}

TEST_CASE("zero-density class yields an all-zero target") {
  SyntheticSceneSpec spec;
  spec.seed = 5;
  spec.n_blobs = 1;
  spec.class_densities[0] = NutrientVector{};  // all-zero density
  auto s = generate_synthetic(spec);
  for (int i = 0; i < NutrientVector::kCount; ++i) CHECK(s.target[i] == 0.0);
}

TEST_CASE("hemisphere blob: closed-form volume matches voxel integration oracle") {
  // One hemisphere of radius r: volume = (2/3) pi r^3. The rendered depth is
  // the analytic heightfield, so summing it over the blob footprint is an
  // independent numeric integration of the same solid.
  SyntheticSceneSpec spec;
  spec.seed = 123;
  spec.n_blobs = 1;
  spec.height = 160;
  spec.width = 160;
  spec.plate_radius = 70;
  spec.min_blob_height = 12;
  spec.max_blob_height = 18;
  spec.rim_height = 25;
  NutrientVector density = {0.5, 0.25, 0.05, 0.02, 0.01};
  spec.class_densities[0] = density;

  auto scene = generate_synthetic_scene(spec);
  REQUIRE(scene.blobs.size() == 1);
  auto& blob = scene.blobs[0];

  double closed = half_ellipsoid_volume(blob.rx, blob.ry, blob.h);
  CHECK(scene.sample.target.calories == doctest::Approx(closed * density.calories));
  CHECK(scene.sample.target.protein == doctest::Approx(closed * density.protein));

  // Voxel oracle: sum depth over the blob footprint only (exclude the rim).
  const Tensor& depth = *scene.sample.depth;
  double voxel = 0.0;
  for (int64_t y = 0; y < spec.height; ++y) {
    for (int64_t x = 0; x < spec.width; ++x) {
      double nx = (x - blob.cx) / blob.rx, ny = (y - blob.cy) / blob.ry;
      if (nx * nx + ny * ny < 1.0) voxel += depth(y, x);
    }
  }
  CHECK(std::fabs(voxel - closed) / closed < 0.01);
}

TEST_CASE("synthetic target linearity: doubling volume doubles every field") {
  SyntheticSceneSpec spec;
  spec.seed = 99;
  spec.n_blobs = 2;
  spec.height = 160;
  spec.width = 160;
  spec.plate_radius = 70;
  spec.min_blob_height = 8;
  spec.max_blob_height = 11;
  spec.rim_height = 23;
  spec.class_densities = SyntheticSceneSpec::default_densities();
  auto base = generate_synthetic_scene(spec);

  SyntheticSceneSpec doubled = spec;
  doubled.min_blob_height = 16;
  doubled.max_blob_height = 22;
  auto scaled = generate_synthetic_scene(doubled);
  // Same seed draws identical footprints; height doubles, so volume doubles.
  REQUIRE(base.blobs.size() == scaled.blobs.size());
  for (size_t i = 0; i < base.blobs.size(); ++i) {
    CHECK(scaled.blobs[i].h == doctest::Approx(2.0 * base.blobs[i].h));
    CHECK(scaled.blobs[i].rx == doctest::Approx(base.blobs[i].rx));
  }
  for (int i = 0; i < NutrientVector::kCount; ++i) {
    if (base.sample.target[i] == 0.0) continue;
    CHECK(scaled.sample.target[i] / base.sample.target[i] == doctest::Approx(2.0).epsilon(1e-9));
  }
  // And the rendered depth confirms it within voxel-integration error.
  double sum_base = 0, sum_scaled = 0;
  double inner = spec.plate_radius - std::max(1.5, spec.plate_radius * 0.08);
  for (int64_t y = 0; y < spec.height; ++y) {
    for (int64_t x = 0; x < spec.width; ++x) {
      double dx = x - (spec.width - 1) / 2.0, dy = y - (spec.height - 1) / 2.0;
      if (std::sqrt(dx * dx + dy * dy) < inner) {
        sum_base += (*base.sample.depth)(y, x);
        sum_scaled += (*scaled.sample.depth)(y, x);
      }
    }
  }
  CHECK(sum_scaled / sum_base == doctest::Approx(2.0).epsilon(0.01));
}

TEST_CASE("write_synthetic_dataset lays out images, totals and manifests") {
  auto dir = temp_dir("synthds");
  SyntheticSceneSpec proto;
  proto.n_blobs = 2;
  proto.class_densities = SyntheticSceneSpec::default_densities();
  auto dishes = write_synthetic_dataset(dir, 6, 42, proto, {2, 1});
  CHECK(dishes.size() == 6);
  CHECK(fs::exists(dir / "totals.csv"));
  CHECK(fs::exists(dir / "train_ids.txt"));
  CHECK(fs::exists(dir / dishes[0].dish_id / "rgb.png"));
  CHECK(fs::exists(dir / dishes[0].dish_id / "depth.raw"));

  ParseStats stats;
  auto parsed = parse_metadata_files(dir / "totals.csv", std::nullopt, &stats);
  CHECK(parsed.size() == 6);
  // Totals round trip through CSV at full precision.
  for (size_t i = 0; i < parsed.size(); ++i) {
    CHECK(parsed[i].totals == dishes[i].totals);
  }
  auto sample = load_sample(parsed[0], dir, DepthPolicy::sensor);
  CHECK(sample.depth.has_value());
  fs::remove_all(dir);
}
