// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dpf/error.hpp"

namespace dpf {

// Dense row-major tensor of doubles, rank 1..4. Value semantics throughout;
// the library keeps all arithmetic in 64-bit so the finite-difference suites
// have headroom.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape);

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int64_t> shape, double v);
  static Tensor from(std::vector<int64_t> shape, std::vector<double> values);
  static Tensor scalar(double v) { return from({1}, {v}); }

  bool defined() const { return !shape_.empty(); }
  int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const;  // supports negative indices
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  std::string shape_str() const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator()(int64_t i) { return data_[i]; }
  double operator()(int64_t i) const { return data_[i]; }
  double& operator()(int64_t i, int64_t j) { return data_[i * shape_[1] + j]; }
  double operator()(int64_t i, int64_t j) const { return data_[i * shape_[1] + j]; }
  double& operator()(int64_t i, int64_t j, int64_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double operator()(int64_t i, int64_t j, int64_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double& operator()(int64_t i, int64_t j, int64_t k, int64_t l) {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }
  double operator()(int64_t i, int64_t j, int64_t k, int64_t l) const {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }

  void fill(double v);
  Tensor reshaped(std::vector<int64_t> shape) const;

  Tensor& add_(const Tensor& o, double scale = 1.0);
  Tensor& scale_(double k);

  double min() const;
  double max() const;
  double sum() const;
  double mean() const { return sum() / static_cast<double>(numel()); }
  double abs_max() const;
  bool all_finite() const;

 private:
  std::vector<int64_t> shape_;
  std::vector<double> data_;
};

// --- geometry helpers (no autodiff; used by augmentation, providers, CAM) ---

// Flip along the last (width) axis. Works for (H,W), (C,H,W), (N,C,H,W).
Tensor hflip(const Tensor& t);

// Bilinear resample of the spatial dims to oh x ow. Accepts (H,W) or (C,H,W).
// Uses half-pixel centers (align_corners = false).
Tensor bilinear_resize(const Tensor& t, int64_t oh, int64_t ow);

// Central spatial crop to oh x ow. Accepts (H,W) or (C,H,W).
Tensor center_crop(const Tensor& t, int64_t oh, int64_t ow);

// --- hashing (checkpoint integrity, config hashes, param-freeze checks) ---

inline constexpr uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

uint64_t fnv1a(const void* data, size_t n, uint64_t h = kFnvOffset);
uint64_t fnv1a(const std::string& s, uint64_t h = kFnvOffset);
uint64_t tensor_hash(const Tensor& t, uint64_t h = kFnvOffset);

}  // namespace dpf
