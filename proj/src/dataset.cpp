// SPDX-License-Identifier: Apache-2.0
#include "dpf/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "dpf/error.hpp"
#include "dpf/image_io.hpp"

namespace dpf {

const std::array<std::string_view, NutrientVector::kCount>& NutrientVector::names() {
  static const std::array<std::string_view, kCount> kNames = {"calories", "mass", "fat",
                                                              "carb", "protein"};
  return kNames;
}

double NutrientVector::operator[](int i) const {
  switch (i) {
    case 0: return calories;
    case 1: return mass;
    case 2: return fat;
    case 3: return carb;
    case 4: return protein;
  }
  throw ValueError("nutrient index out of range");
}

double& NutrientVector::operator[](int i) {
  switch (i) {
    case 0: return calories;
    case 1: return mass;
    case 2: return fat;
    case 3: return carb;
    case 4: return protein;
  }
  throw ValueError("nutrient index out of range");
}

NutrientVector& NutrientVector::operator+=(const NutrientVector& o) {
  for (int i = 0; i < kCount; ++i) (*this)[i] += o[i];
  return *this;
}

void NutrientVector::validate(const std::string& context, int line) const {
  for (int i = 0; i < kCount; ++i) {
    double v = (*this)[i];
    std::string where = line > 0 ? " (line " + std::to_string(line) + ")" : "";
    if (!std::isfinite(v)) {
      throw ValueError(context + ": " + std::string(names()[i]) + " is not finite" + where);
    }
    if (v < 0) {
      throw ValueError(context + ": " + std::string(names()[i]) + " must be >= 0, got " +
                       std::to_string(v) + where);
    }
  }
}

namespace {

std::string trim(std::string_view s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_csv_row(const std::string& line) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    size_t pos = line.find(',', start);
    if (pos == std::string::npos) {
      out.push_back(trim(std::string_view(line).substr(start)));
      break;
    }
    out.push_back(trim(std::string_view(line).substr(start, pos - start)));
    start = pos + 1;
  }
  return out;
}

double parse_double_field(const std::string& s, const std::string& field, int line) {
  if (s.empty()) throw ParseError("empty " + field + " field", line);
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ParseError("cannot parse " + field + " value '" + s + "'", line);
  }
  return v;
}

NutrientVector parse_nutrients(const std::vector<std::string>& fields, size_t offset, int line,
                               const std::string& context) {
  NutrientVector n;
  for (int i = 0; i < NutrientVector::kCount; ++i) {
    n[i] = parse_double_field(fields[offset + i], std::string(NutrientVector::names()[i]), line);
  }
  n.validate(context, line);
  return n;
}

void expect_header(const std::string& got, const std::string& want, const char* what) {
  if (trim(got) != want) {
    throw ParseError(std::string(what) + " header must be '" + want + "', got '" + trim(got) +
                     "'", 1);
  }
}

constexpr const char* kTotalsHeader = "dish_id,calories,mass,fat,carb,protein";
constexpr const char* kIngredientsHeader = "dish_id,name,calories,mass,fat,carb,protein";

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::vector<DishRecord> parse_metadata(std::istream& totals, std::istream* ingredients,
                                       ParseStats* stats) {
  std::vector<DishRecord> dishes;
  std::unordered_map<std::string, size_t> index;

  std::string line;
  if (!std::getline(totals, line)) throw ParseError("totals file is empty", 1);
  expect_header(line, kTotalsHeader, "totals");
  int lineno = 1;
  while (std::getline(totals, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto fields = split_csv_row(line);
    if (fields.size() != 6) {
      throw ParseError("expected 6 fields, got " + std::to_string(fields.size()), lineno);
    }
    DishRecord rec;
    rec.dish_id = fields[0];
    if (rec.dish_id.empty()) throw ParseError("empty dish_id", lineno);
    if (index.count(rec.dish_id)) {
      throw DuplicateError("duplicate dish_id '" + rec.dish_id + "' (line " +
                           std::to_string(lineno) + ")");
    }
    rec.totals = parse_nutrients(fields, 1, lineno, "dish " + rec.dish_id);
    index.emplace(rec.dish_id, dishes.size());
    dishes.push_back(std::move(rec));
  }
  if (dishes.empty()) throw ParseError("totals file has no data rows", lineno);

  if (ingredients) {
    if (!std::getline(*ingredients, line)) throw ParseError("ingredients file is empty", 1);
    expect_header(line, kIngredientsHeader, "ingredients");
    lineno = 1;
    while (std::getline(*ingredients, line)) {
      ++lineno;
      if (trim(line).empty()) continue;
      auto fields = split_csv_row(line);
      if (fields.size() != 7) {
        throw ParseError("expected 7 fields, got " + std::to_string(fields.size()), lineno);
      }
      const std::string& id = fields[0];
      auto it = index.find(id);
      if (it == index.end()) {
        if (stats) stats->orphan_ingredient_ids.push_back(id);
        continue;
      }
      IngredientRecord ing;
      ing.name = fields[1];
      ing.nutrients = parse_nutrients(fields, 2, lineno, "ingredient " + ing.name);
      dishes[it->second].ingredients.push_back(std::move(ing));
    }
  }

  if (stats) {
    for (const auto& dish : dishes) {
      if (dish.ingredients.empty()) continue;
      NutrientVector sum;
      for (const auto& ing : dish.ingredients) sum += ing.nutrients;
      for (int i = 0; i < NutrientVector::kCount; ++i) {
        double delta = std::fabs(sum[i] - dish.totals[i]);
        if (delta > stats->tolerance) {
          stats->mismatches.push_back(
              {dish.dish_id, std::string(NutrientVector::names()[i]), delta});
        }
      }
    }
  }
  return dishes;
}

std::vector<DishRecord> parse_metadata_files(const std::filesystem::path& totals,
                                             const std::optional<std::filesystem::path>& ingredients,
                                             ParseStats* stats) {
  std::ifstream tf(totals);
  if (!tf) throw IoError("cannot open totals file: " + totals.string());
  if (ingredients) {
    std::ifstream inf(*ingredients);
    if (!inf) throw IoError("cannot open ingredients file: " + ingredients->string());
    return parse_metadata(tf, &inf, stats);
  }
  return parse_metadata(tf, nullptr, stats);
}

void write_metadata(const std::vector<DishRecord>& dishes, std::ostream& totals,
                    std::ostream* ingredients) {
  totals << kTotalsHeader << "\n";
  for (const auto& d : dishes) {
    totals << d.dish_id;
    for (int i = 0; i < NutrientVector::kCount; ++i) totals << "," << format_double(d.totals[i]);
    totals << "\n";
  }
  if (!ingredients) return;
  *ingredients << kIngredientsHeader << "\n";
  for (const auto& d : dishes) {
    for (const auto& ing : d.ingredients) {
      *ingredients << d.dish_id << "," << ing.name;
      for (int i = 0; i < NutrientVector::kCount; ++i) {
        *ingredients << "," << format_double(ing.nutrients[i]);
      }
      *ingredients << "\n";
    }
  }
}

SplitManifest build_split(const std::vector<std::string>& ids, std::pair<int, int> ratio,
                          uint64_t seed) {
  if (ratio.first <= 0 || ratio.second <= 0) throw ValueError("split ratio parts must be positive");
  if (ids.size() < 2) throw ValueError("need at least 2 ids to split");
  std::unordered_set<std::string> seen;
  for (const auto& id : ids) {
    if (!seen.insert(id).second) throw DuplicateError("duplicate id in split input: " + id);
  }
  auto n = static_cast<int64_t>(ids.size());
  double exact = static_cast<double>(n) * ratio.first / (ratio.first + ratio.second);
  auto train_n = static_cast<int64_t>(std::llround(exact));
  train_n = std::clamp<int64_t>(train_n, 1, n - 1);

  std::vector<std::string> shuffled = ids;
  Rng rng(seed);
  rng.shuffle(shuffled);
  SplitManifest split;
  split.train_ids.assign(shuffled.begin(), shuffled.begin() + train_n);
  split.test_ids.assign(shuffled.begin() + train_n, shuffled.end());
  std::sort(split.train_ids.begin(), split.train_ids.end());
  std::sort(split.test_ids.begin(), split.test_ids.end());
  return split;
}

namespace {

std::vector<std::string> read_id_lines(const std::filesystem::path& file) {
  std::ifstream f(file);
  if (!f) throw IoError("cannot open manifest: " + file.string());
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(f, line)) {
    std::string id = trim(line);
    if (!id.empty()) ids.push_back(std::move(id));
  }
  return ids;
}

}  // namespace

SplitManifest load_split_manifests(const std::vector<std::string>& known_ids,
                                   const std::filesystem::path& train_file,
                                   const std::filesystem::path& test_file) {
  std::unordered_set<std::string> known(known_ids.begin(), known_ids.end());
  SplitManifest split;
  split.train_ids = read_id_lines(train_file);
  split.test_ids = read_id_lines(test_file);
  if (split.train_ids.empty() || split.test_ids.empty()) {
    throw ValueError("split manifests must both be non-empty");
  }
  std::unordered_set<std::string> train_set;
  for (const auto& id : split.train_ids) {
    if (!known.count(id)) throw LookupError("manifest references unknown dish_id: " + id);
    if (!train_set.insert(id).second) throw DuplicateError("duplicate id in train manifest: " + id);
  }
  std::unordered_set<std::string> test_set;
  for (const auto& id : split.test_ids) {
    if (!known.count(id)) throw LookupError("manifest references unknown dish_id: " + id);
    if (!test_set.insert(id).second) throw DuplicateError("duplicate id in test manifest: " + id);
    if (train_set.count(id)) throw ValueError("id present in both splits: " + id);
  }
  return split;
}

void write_split_manifests(const SplitManifest& split, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream tf(dir / "train_ids.txt"), ef(dir / "test_ids.txt");
  if (!tf || !ef) throw IoError("cannot write split manifests under " + dir.string());
  for (const auto& id : split.train_ids) tf << id << "\n";
  for (const auto& id : split.test_ids) ef << id << "\n";
}

void validate_sample(const RGBDSample& s) {
  if (s.rgb.ndim() != 3 || s.rgb.dim(0) != 3) {
    throw ShapeError("sample rgb must be (3,H,W), got " + s.rgb.shape_str());
  }
  if (!s.rgb.all_finite()) throw ValueError("sample rgb contains non-finite values");
  if (s.depth) {
    if (s.depth->ndim() != 2 || s.depth->dim(0) != s.rgb.dim(1) ||
        s.depth->dim(1) != s.rgb.dim(2)) {
      throw ShapeError("depth shape " + s.depth->shape_str() + " does not match rgb " +
                       s.rgb.shape_str());
    }
    if (!s.depth->all_finite()) throw ValueError("sample depth contains non-finite values");
    if (s.depth->min() < 0) throw ValueError("sample depth must be non-negative");
  }
  s.target.validate("sample " + s.dish_id);
}

RGBDSample augment(const RGBDSample& sample, const AugmentConfig& cfg, Rng& rng) {
  validate_sample(sample);
  int64_t rh = cfg.resize_h > 0 ? cfg.resize_h : cfg.out_h;
  int64_t rw = cfg.resize_w > 0 ? cfg.resize_w : cfg.out_w;
  if (rh < cfg.out_h || rw < cfg.out_w) {
    throw ValueError("resize target " + std::to_string(rh) + "x" + std::to_string(rw) +
                     " is smaller than crop target " + std::to_string(cfg.out_h) + "x" +
                     std::to_string(cfg.out_w));
  }
  RGBDSample out;
  out.dish_id = sample.dish_id;
  out.target = sample.target;
  out.rgb = center_crop(bilinear_resize(sample.rgb, rh, rw), cfg.out_h, cfg.out_w);
  if (sample.depth) {
    out.depth = center_crop(bilinear_resize(*sample.depth, rh, rw), cfg.out_h, cfg.out_w);
  }
  bool flip = rng.bernoulli(cfg.flip_prob);
  if (flip) {
    out.rgb = hflip(out.rgb);
    if (out.depth) out.depth = hflip(*out.depth);
  }
  return out;
}

RGBDSample load_sample(const DishRecord& record, const std::filesystem::path& image_root,
                       DepthPolicy policy, double depth_scale) {
  RGBDSample s;
  s.dish_id = record.dish_id;
  s.target = record.totals;
  auto dir = image_root / record.dish_id;
  s.rgb = read_rgb_png(dir / "rgb.png");
  if (policy == DepthPolicy::sensor) {
    auto png = dir / "depth.png";
    auto raw = dir / "depth.raw";
    Tensor depth;
    if (std::filesystem::exists(png)) {
      depth = read_depth_png(png);
    } else if (std::filesystem::exists(raw)) {
      depth = read_depth_raw(raw);
    } else {
      throw LookupError("no depth file for dish " + record.dish_id + ": tried " + png.string() +
                        " and " + raw.string());
    }
    depth.scale_(depth_scale);
    s.depth = std::move(depth);
  }
  validate_sample(s);
  return s;
}

// --- synthetic scenes -------------------------------------------------------

std::map<int, NutrientVector> SyntheticSceneSpec::default_densities() {
  // Nutrients per px^3. Classes differ strongly per field so color carries
  // real signal: a depth-only model cannot separate them.
  std::map<int, NutrientVector> d;
  d[0] = {0.40, 0.22, 0.020, 0.001, 0.035};  // red, meat-like
  d[1] = {0.10, 0.28, 0.002, 0.020, 0.004};  // green, vegetable-like
  d[2] = {0.25, 0.24, 0.004, 0.055, 0.006};  // ochre, starch-like
  d[3] = {0.55, 0.20, 0.055, 0.004, 0.003};  // cream, fat-heavy
  return d;
}

void SyntheticSceneSpec::validate() const {
  if (n_blobs < 1) throw ValueError("n_blobs must be >= 1");
  if (height < 16 || width < 16) throw ValueError("scene must be at least 16x16");
  if (class_densities.empty()) throw ValueError("class_densities must be non-empty");
  for (const auto& [cls, den] : class_densities) {
    den.validate("class " + std::to_string(cls) + " density");
  }
  if (min_blob_height <= 0 || max_blob_height < min_blob_height) {
    throw ValueError("blob height range invalid");
  }
  if (rim_height <= max_blob_height) {
    throw ValueError("rim_height must exceed max blob height (depth scale anchor)");
  }
}

namespace {

struct Palette {
  double r, g, b;
};

Palette class_color(int cls) {
  static const Palette kPalette[] = {
      {0.82, 0.20, 0.16},  // red
      {0.22, 0.72, 0.28},  // green
      {0.78, 0.58, 0.18},  // ochre
      {0.92, 0.90, 0.72},  // cream
      {0.30, 0.40, 0.85},  // blue
      {0.75, 0.30, 0.78},  // purple
  };
  if (cls >= 0 && cls < 6) return kPalette[cls];
  uint64_t h = mix64(static_cast<uint64_t>(cls));
  return {0.3 + 0.6 * ((h & 0xff) / 255.0), 0.3 + 0.6 * (((h >> 8) & 0xff) / 255.0),
          0.3 + 0.6 * (((h >> 16) & 0xff) / 255.0)};
}

}  // namespace

SyntheticScene generate_synthetic_scene(const SyntheticSceneSpec& spec) {
  spec.validate();
  Rng rng(mix64(spec.seed, 0x5ce9e5u));
  int64_t H = spec.height, W = spec.width;
  double cx0 = (W - 1) / 2.0, cy0 = (H - 1) / 2.0;
  double plate_r = spec.plate_radius > 0 ? spec.plate_radius
                                         : 0.42 * static_cast<double>(std::min(H, W));
  double rim_w = std::max(1.5, plate_r * 0.08);
  double inner_r = plate_r - rim_w;

  std::vector<int> classes;
  for (const auto& [cls, den] : spec.class_densities) classes.push_back(cls);

  SyntheticScene scene;
  for (int b = 0; b < spec.n_blobs; ++b) {
    SyntheticScene::Blob blob{};
    double shrink = 1.0;
    for (int attempt = 0;; ++attempt) {
      double lo = 0.13 * inner_r * shrink, hi = 0.30 * inner_r * shrink;
      blob.rx = rng.uniform(lo, hi);
      blob.ry = rng.uniform(lo, hi);
      blob.h = rng.uniform(spec.min_blob_height, spec.max_blob_height);
      double rmax = std::max(blob.rx, blob.ry);
      // Zero-volume draws are regenerated, never emitted.
      if (half_ellipsoid_volume(blob.rx, blob.ry, blob.h) < 1e-9) continue;
      double theta = rng.uniform(0.0, 6.283185307179586);
      double rad = (inner_r - rmax - 1.0) * std::sqrt(rng.uniform());
      if (rad < 0) rad = 0;
      blob.cx = cx0 + rad * std::cos(theta);
      blob.cy = cy0 + rad * std::sin(theta);
      bool overlaps = false;
      for (const auto& other : scene.blobs) {
        double dx = blob.cx - other.cx, dy = blob.cy - other.cy;
        double min_dist = rmax + std::max(other.rx, other.ry) + 1.0;
        if (dx * dx + dy * dy < min_dist * min_dist) {
          overlaps = true;
          break;
        }
      }
      if (!overlaps) break;
      if (attempt > 0 && attempt % 50 == 0) shrink *= 0.85;  // crowded scene: shrink and retry
    }
    blob.cls = classes[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(classes.size())))];
    scene.blobs.push_back(blob);
  }

  RGBDSample& s = scene.sample;
  s.dish_id = "synth_" + std::to_string(spec.seed);
  s.rgb = Tensor({3, H, W});
  Tensor depth({H, W});
  double* pr = s.rgb.data();
  double* pg = pr + H * W;
  double* pb = pg + H * W;
  double* pd = depth.data();

  for (int64_t y = 0; y < H; ++y) {
    for (int64_t x = 0; x < W; ++x) {
      double dx = static_cast<double>(x) - cx0, dy = static_cast<double>(y) - cy0;
      double r = std::sqrt(dx * dx + dy * dy);
      int64_t i = y * W + x;
      double z = 0.0;
      double cr = 0.10, cg = 0.10, cb = 0.11;  // table background
      if (r <= plate_r) {
        if (r >= inner_r) {
          z = spec.rim_height;
          cr = cg = cb = 0.55;  // raised rim
        } else {
          cr = cg = cb = 0.78;  // plate face
        }
      }
      pd[i] = z;
      pr[i] = cr;
      pg[i] = cg;
      pb[i] = cb;
    }
  }

  NutrientVector target;
  for (const auto& blob : scene.blobs) {
    Palette col = class_color(blob.cls);
    int64_t x_lo = std::max<int64_t>(0, static_cast<int64_t>(blob.cx - blob.rx) - 1);
    int64_t x_hi = std::min<int64_t>(W - 1, static_cast<int64_t>(blob.cx + blob.rx) + 1);
    int64_t y_lo = std::max<int64_t>(0, static_cast<int64_t>(blob.cy - blob.ry) - 1);
    int64_t y_hi = std::min<int64_t>(H - 1, static_cast<int64_t>(blob.cy + blob.ry) + 1);
    for (int64_t y = y_lo; y <= y_hi; ++y) {
      for (int64_t x = x_lo; x <= x_hi; ++x) {
        double nx = (static_cast<double>(x) - blob.cx) / blob.rx;
        double ny = (static_cast<double>(y) - blob.cy) / blob.ry;
        double d2 = nx * nx + ny * ny;
        if (d2 >= 1.0) continue;
        double z = blob.h * std::sqrt(1.0 - d2);
        int64_t i = y * W + x;
        pd[i] = z;
        // Shading is normalized by the blob's own peak height so RGB carries
        // footprint and class but no absolute height information.
        double shade = 0.55 + 0.45 * (z / blob.h);
        pr[i] = col.r * shade;
        pg[i] = col.g * shade;
        pb[i] = col.b * shade;
      }
    }
    target += spec.class_densities.at(blob.cls) * half_ellipsoid_volume(blob.rx, blob.ry, blob.h);
  }
  s.depth = std::move(depth);
  s.target = target;
  validate_sample(s);
  return scene;
}

RGBDSample generate_synthetic(const SyntheticSceneSpec& spec) {
  return generate_synthetic_scene(spec).sample;
}

std::vector<DishRecord> write_synthetic_dataset(const std::filesystem::path& dir, int n,
                                                uint64_t base_seed,
                                                const SyntheticSceneSpec& proto,
                                                std::pair<int, int> split_ratio) {
  if (n < 2) throw ValueError("need at least 2 synthetic dishes");
  std::filesystem::create_directories(dir);
  std::vector<DishRecord> dishes;
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) {
    SyntheticSceneSpec spec = proto;
    spec.seed = mix64(base_seed, static_cast<uint64_t>(i));
    // Vary blob count deterministically per dish.
    Rng meta(mix64(spec.seed, 0xb10b5u));
    spec.n_blobs = 1 + static_cast<int>(meta.uniform_int(std::max(1, proto.n_blobs)));
    RGBDSample s = generate_synthetic(spec);
    s.dish_id = "dish_" + std::to_string(1000000 + i);
    auto ddir = dir / s.dish_id;
    std::filesystem::create_directories(ddir);
    write_rgb_png(ddir / "rgb.png", s.rgb);
    write_depth_raw(ddir / "depth.raw", *s.depth);
    DishRecord rec;
    rec.dish_id = s.dish_id;
    rec.totals = s.target;
    dishes.push_back(rec);
    ids.push_back(s.dish_id);
  }
  std::ofstream totals(dir / "totals.csv");
  if (!totals) throw IoError("cannot write totals.csv under " + dir.string());
  write_metadata(dishes, totals, nullptr);
  write_split_manifests(build_split(ids, split_ratio, base_seed), dir);
  return dishes;
}

}  // namespace dpf
