// SPDX-License-Identifier: Apache-2.0
#include "dpf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

namespace dpf {

namespace {

int64_t checked_numel(const std::vector<int64_t>& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dim");
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) throw ShapeError("tensor dims must be positive");
    n *= d;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<int64_t> shape) {
  int64_t n = checked_numel(shape);
  shape_ = std::move(shape);
  data_.assign(static_cast<size_t>(n), 0.0);
}

Tensor Tensor::full(std::vector<int64_t> shape, double v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

Tensor Tensor::from(std::vector<int64_t> shape, std::vector<double> values) {
  int64_t n = checked_numel(shape);
  if (n != static_cast<int64_t>(values.size())) {
    throw ShapeError("value count does not match shape");
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(values);
  return t;
}

int64_t Tensor::dim(int64_t i) const {
  int64_t nd = ndim();
  if (i < 0) i += nd;
  if (i < 0 || i >= nd) throw ShapeError("dim index out of range");
  return shape_[static_cast<size_t>(i)];
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
  os << ")";
  return os.str();
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(std::vector<int64_t> shape) const {
  if (checked_numel(shape) != numel()) {
    throw ShapeError("reshape changes element count");
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  return t;
}

Tensor& Tensor::add_(const Tensor& o, double scale) {
  if (!same_shape(o)) throw ShapeError("add_: shape mismatch " + shape_str() + " vs " + o.shape_str());
  const double* src = o.data();
  double* dst = data();
  int64_t n = numel();
  for (int64_t i = 0; i < n; ++i) dst[i] += scale * src[i];
  return *this;
}

Tensor& Tensor::scale_(double k) {
  for (double& v : data_) v *= k;
  return *this;
}

double Tensor::min() const {
  double m = std::numeric_limits<double>::infinity();
  for (double v : data_) m = std::min(m, v);
  return m;
}

double Tensor::max() const {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : data_) m = std::max(m, v);
  return m;
}

double Tensor::sum() const {
  double s = 0.0;
  for (double v : data_) s += v;
  return s;
}

double Tensor::abs_max() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::fabs(v));
  return m;
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor hflip(const Tensor& t) {
  Tensor out = t;
  int64_t w = t.dim(-1);
  int64_t rows = t.numel() / w;
  const double* src = t.data();
  double* dst = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < w; ++c) dst[r * w + c] = src[r * w + (w - 1 - c)];
  }
  return out;
}

Tensor bilinear_resize(const Tensor& t, int64_t oh, int64_t ow) {
  if (t.ndim() != 2 && t.ndim() != 3) {
    throw ShapeError("bilinear_resize expects (H,W) or (C,H,W), got " + t.shape_str());
  }
  if (oh <= 0 || ow <= 0) throw ValueError("resize target must be positive");
  int64_t ch = t.ndim() == 3 ? t.dim(0) : 1;
  int64_t ih = t.dim(-2), iw = t.dim(-1);
  std::vector<int64_t> oshape = t.ndim() == 3 ? std::vector<int64_t>{ch, oh, ow}
                                              : std::vector<int64_t>{oh, ow};
  Tensor out(oshape);
  double sy = static_cast<double>(ih) / static_cast<double>(oh);
  double sx = static_cast<double>(iw) / static_cast<double>(ow);
  const double* src = t.data();
  double* dst = out.data();
  for (int64_t y = 0; y < oh; ++y) {
    double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    fy = std::max(0.0, std::min(fy, static_cast<double>(ih - 1)));
    int64_t y0 = static_cast<int64_t>(fy);
    int64_t y1 = std::min(y0 + 1, ih - 1);
    double wy = fy - static_cast<double>(y0);
    for (int64_t x = 0; x < ow; ++x) {
      double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
      fx = std::max(0.0, std::min(fx, static_cast<double>(iw - 1)));
      int64_t x0 = static_cast<int64_t>(fx);
      int64_t x1 = std::min(x0 + 1, iw - 1);
      double wx = fx - static_cast<double>(x0);
      for (int64_t c = 0; c < ch; ++c) {
        const double* p = src + c * ih * iw;
        double v00 = p[y0 * iw + x0], v01 = p[y0 * iw + x1];
        double v10 = p[y1 * iw + x0], v11 = p[y1 * iw + x1];
        double top = v00 + (v01 - v00) * wx;
        double bot = v10 + (v11 - v10) * wx;
        dst[c * oh * ow + y * ow + x] = top + (bot - top) * wy;
      }
    }
  }
  return out;
}

Tensor center_crop(const Tensor& t, int64_t oh, int64_t ow) {
  if (t.ndim() != 2 && t.ndim() != 3) {
    throw ShapeError("center_crop expects (H,W) or (C,H,W), got " + t.shape_str());
  }
  int64_t ch = t.ndim() == 3 ? t.dim(0) : 1;
  int64_t ih = t.dim(-2), iw = t.dim(-1);
  if (oh > ih || ow > iw) {
    throw ValueError("crop target " + std::to_string(oh) + "x" + std::to_string(ow) +
                     " exceeds input " + std::to_string(ih) + "x" + std::to_string(iw));
  }
  int64_t y0 = (ih - oh) / 2, x0 = (iw - ow) / 2;
  std::vector<int64_t> oshape = t.ndim() == 3 ? std::vector<int64_t>{ch, oh, ow}
                                              : std::vector<int64_t>{oh, ow};
  Tensor out(oshape);
  const double* src = t.data();
  double* dst = out.data();
  for (int64_t c = 0; c < ch; ++c) {
    for (int64_t y = 0; y < oh; ++y) {
      std::memcpy(dst + (c * oh + y) * ow, src + (c * ih + (y + y0)) * iw + x0,
                  static_cast<size_t>(ow) * sizeof(double));
    }
  }
  return out;
}

uint64_t fnv1a(const void* data, size_t n, uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t fnv1a(const std::string& s, uint64_t h) { return fnv1a(s.data(), s.size(), h); }

uint64_t tensor_hash(const Tensor& t, uint64_t h) {
  h = fnv1a(t.shape().data(), t.shape().size() * sizeof(int64_t), h);
  return fnv1a(t.data(), static_cast<size_t>(t.numel()) * sizeof(double), h);
}

}  // namespace dpf
