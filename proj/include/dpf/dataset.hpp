// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dpf/rng.hpp"
#include "dpf/tensor.hpp"

namespace dpf {

// The five regression targets. Calories in kcal, everything else in grams.
struct NutrientVector {
  double calories = 0;
  double mass = 0;
  double fat = 0;
  double carb = 0;
  double protein = 0;

  static constexpr int kCount = 5;
  static const std::array<std::string_view, kCount>& names();

  double operator[](int i) const;
  double& operator[](int i);

  NutrientVector& operator+=(const NutrientVector& o);
  friend NutrientVector operator*(NutrientVector v, double k) {
    for (int i = 0; i < kCount; ++i) v[i] *= k;
    return v;
  }
  friend bool operator==(const NutrientVector& a, const NutrientVector& b) {
    for (int i = 0; i < kCount; ++i) {
      if (a[i] != b[i]) return false;
    }
    return true;
  }

  // Throws ValueError unless every field is finite and >= 0. `line` > 0 adds
  // the source line to the message.
  void validate(const std::string& context, int line = -1) const;
};

struct IngredientRecord {
  std::string name;
  NutrientVector nutrients;
  friend bool operator==(const IngredientRecord&, const IngredientRecord&) = default;
};

struct DishRecord {
  std::string dish_id;
  NutrientVector totals;
  std::vector<IngredientRecord> ingredients;
  friend bool operator==(const DishRecord&, const DishRecord&) = default;
};

// Validation statistics accumulated while parsing. Ingredient/total
// disagreements are warnings, not failures: upstream data rounds.
struct ParseStats {
  struct Mismatch {
    std::string dish_id;
    std::string field;
    double delta = 0;
  };
  std::vector<Mismatch> mismatches;                // |sum(ingredients)-totals| > tol
  std::vector<std::string> orphan_ingredient_ids;  // ingredient rows with unknown dish
  double tolerance = 1e-9;
};

// Canonical CSV layouts:
//   totals:      dish_id,calories,mass,fat,carb,protein
//   ingredients: dish_id,name,calories,mass,fat,carb,protein
std::vector<DishRecord> parse_metadata(std::istream& totals, std::istream* ingredients,
                                       ParseStats* stats = nullptr);
std::vector<DishRecord> parse_metadata_files(const std::filesystem::path& totals,
                                             const std::optional<std::filesystem::path>& ingredients,
                                             ParseStats* stats = nullptr);
void write_metadata(const std::vector<DishRecord>& dishes, std::ostream& totals,
                    std::ostream* ingredients);

struct SplitManifest {
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
};

// Deterministic shuffled split. Sizes land within +-1 of ids.size()*a/(a+b),
// and both sides stay non-empty.
SplitManifest build_split(const std::vector<std::string>& ids, std::pair<int, int> ratio,
                          uint64_t seed);
// Loads predefined manifests verbatim (one id per line); every id must be
// known and the two sets disjoint and non-empty.
SplitManifest load_split_manifests(const std::vector<std::string>& known_ids,
                                   const std::filesystem::path& train_file,
                                   const std::filesystem::path& test_file);
void write_split_manifests(const SplitManifest& split, const std::filesystem::path& dir);

// Model-ready pair. rgb is (3,H,W) in [0,1]; depth, when present, is (H,W)
// non-negative in native units.
struct RGBDSample {
  std::string dish_id;
  Tensor rgb;
  std::optional<Tensor> depth;
  NutrientVector target;
};

void validate_sample(const RGBDSample& s);

struct AugmentConfig {
  int64_t out_h = 336;
  int64_t out_w = 448;
  // Pre-crop resize target; -1 means same as out (crop degenerates to identity).
  int64_t resize_h = -1;
  int64_t resize_w = -1;
  double flip_prob = 0.5;
};

// Resize -> center crop -> random horizontal flip. Depth gets the identical
// geometric ops; the target never changes.
RGBDSample augment(const RGBDSample& sample, const AugmentConfig& cfg, Rng& rng);

enum class DepthPolicy { sensor, none };

// Image layout: <root>/<dish_id>/rgb.png plus depth.png (16-bit counts) or
// depth.raw (float grid). depth_scale multiplies raw pixel values.
RGBDSample load_sample(const DishRecord& record, const std::filesystem::path& image_root,
                       DepthPolicy policy, double depth_scale = 1.0);

// --- synthetic scenes -------------------------------------------------------

// Colored half-ellipsoid blobs on a plate with a fixed-height rim ring. The
// rim pins the per-scene depth maximum, so per-image min-max normalization
// divides every scene by the same constant and volume remains recoverable.
struct SyntheticSceneSpec {
  uint64_t seed = 0;
  int n_blobs = 3;
  std::map<int, NutrientVector> class_densities;  // nutrients per unit volume (px^3)
  double plate_radius = 0;                        // pixels; <=0 picks 0.42*min(H,W)
  int64_t height = 64;
  int64_t width = 64;
  double rim_height = 24.0;      // strictly above max blob height
  double min_blob_height = 4.0;
  double max_blob_height = 20.0;

  static std::map<int, NutrientVector> default_densities();
  void validate() const;
};

struct SyntheticScene {
  struct Blob {
    double cx, cy, rx, ry, h;
    int cls;
  };
  RGBDSample sample;
  std::vector<Blob> blobs;
};

// Deterministic under spec.seed; target = sum over blobs of volume * density.
SyntheticScene generate_synthetic_scene(const SyntheticSceneSpec& spec);
RGBDSample generate_synthetic(const SyntheticSceneSpec& spec);

inline double half_ellipsoid_volume(double rx, double ry, double h) {
  return 2.0 / 3.0 * 3.14159265358979323846 * rx * ry * h;
}

// Renders n dishes to <dir>/<dish_id>/{rgb.png,depth.raw}, writes totals.csv
// and split manifests. Returns the dish records.
std::vector<DishRecord> write_synthetic_dataset(const std::filesystem::path& dir, int n,
                                                uint64_t base_seed,
                                                const SyntheticSceneSpec& proto,
                                                std::pair<int, int> split_ratio = {5, 1});

}  // namespace dpf
