// SPDX-License-Identifier: Apache-2.0
#include "dpf/image_io.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include <opencv2/imgcodecs.hpp>

#include "dpf/error.hpp"

namespace dpf {

namespace {

void require_exists(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw LookupError("image file not found: " + path.string());
  }
}

}  // namespace

Tensor read_rgb_png(const std::filesystem::path& path) {
  require_exists(path);
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (img.empty()) throw IoError("failed to decode image: " + path.string());
  int64_t h = img.rows, w = img.cols;
  Tensor out({3, h, w});
  double* po = out.data();
  for (int64_t y = 0; y < h; ++y) {
    const auto* row = img.ptr<cv::Vec3b>(static_cast<int>(y));
    for (int64_t x = 0; x < w; ++x) {
      // OpenCV loads BGR.
      po[0 * h * w + y * w + x] = row[x][2] / 255.0;
      po[1 * h * w + y * w + x] = row[x][1] / 255.0;
      po[2 * h * w + y * w + x] = row[x][0] / 255.0;
    }
  }
  return out;
}

void write_rgb_png(const std::filesystem::path& path, const Tensor& rgb) {
  if (rgb.ndim() != 3 || rgb.dim(0) != 3) {
    throw ShapeError("write_rgb_png expects (3,H,W), got " + rgb.shape_str());
  }
  int64_t h = rgb.dim(1), w = rgb.dim(2);
  cv::Mat img(static_cast<int>(h), static_cast<int>(w), CV_8UC3);
  const double* p = rgb.data();
  for (int64_t y = 0; y < h; ++y) {
    auto* row = img.ptr<cv::Vec3b>(static_cast<int>(y));
    for (int64_t x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        double v = std::clamp(p[c * h * w + y * w + x], 0.0, 1.0);
        row[x][2 - c] = static_cast<unsigned char>(v * 255.0 + 0.5);
      }
    }
  }
  if (!cv::imwrite(path.string(), img)) {
    throw IoError("failed to write image: " + path.string());
  }
}

Tensor read_depth_png(const std::filesystem::path& path) {
  require_exists(path);
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_UNCHANGED | cv::IMREAD_ANYDEPTH);
  if (img.empty()) throw IoError("failed to decode depth image: " + path.string());
  if (img.channels() != 1) throw IoError("depth PNG must be single-channel: " + path.string());
  int64_t h = img.rows, w = img.cols;
  Tensor out({h, w});
  double* po = out.data();
  if (img.depth() == CV_16U) {
    for (int64_t y = 0; y < h; ++y) {
      const auto* row = img.ptr<uint16_t>(static_cast<int>(y));
      for (int64_t x = 0; x < w; ++x) po[y * w + x] = row[x];
    }
  } else if (img.depth() == CV_8U) {
    for (int64_t y = 0; y < h; ++y) {
      const auto* row = img.ptr<uint8_t>(static_cast<int>(y));
      for (int64_t x = 0; x < w; ++x) po[y * w + x] = row[x];
    }
  } else {
    throw IoError("unsupported depth PNG bit depth: " + path.string());
  }
  return out;
}

void write_depth_png16(const std::filesystem::path& path, const Tensor& depth, double scale) {
  if (depth.ndim() != 2) throw ShapeError("write_depth_png16 expects (H,W)");
  int64_t h = depth.dim(0), w = depth.dim(1);
  cv::Mat img(static_cast<int>(h), static_cast<int>(w), CV_16UC1);
  const double* p = depth.data();
  for (int64_t y = 0; y < h; ++y) {
    auto* row = img.ptr<uint16_t>(static_cast<int>(y));
    for (int64_t x = 0; x < w; ++x) {
      double v = std::clamp(p[y * w + x] * scale, 0.0, 65535.0);
      row[x] = static_cast<uint16_t>(v + 0.5);
    }
  }
  if (!cv::imwrite(path.string(), img)) {
    throw IoError("failed to write depth image: " + path.string());
  }
}

Tensor read_depth_raw(const std::filesystem::path& path) {
  require_exists(path);
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  uint32_t h = 0, w = 0;
  f.read(reinterpret_cast<char*>(&h), 4);
  f.read(reinterpret_cast<char*>(&w), 4);
  if (!f || h == 0 || w == 0 || h > 1 << 20 || w > 1 << 20) {
    throw IoError("corrupt raw depth header: " + path.string());
  }
  std::vector<float> buf(static_cast<size_t>(h) * w);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
  if (!f) throw IoError("truncated raw depth file: " + path.string());
  Tensor out({static_cast<int64_t>(h), static_cast<int64_t>(w)});
  for (size_t i = 0; i < buf.size(); ++i) out.data()[i] = buf[i];
  return out;
}

void write_depth_raw(const std::filesystem::path& path, const Tensor& depth) {
  if (depth.ndim() != 2) throw ShapeError("write_depth_raw expects (H,W)");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  auto h = static_cast<uint32_t>(depth.dim(0));
  auto w = static_cast<uint32_t>(depth.dim(1));
  f.write(reinterpret_cast<const char*>(&h), 4);
  f.write(reinterpret_cast<const char*>(&w), 4);
  std::vector<float> buf(static_cast<size_t>(depth.numel()));
  for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(depth.data()[i]);
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
  if (!f) throw IoError("failed writing " + path.string());
}

void write_gray_png(const std::filesystem::path& path, const Tensor& map01) {
  if (map01.ndim() != 2) throw ShapeError("write_gray_png expects (H,W)");
  int64_t h = map01.dim(0), w = map01.dim(1);
  cv::Mat img(static_cast<int>(h), static_cast<int>(w), CV_8UC1);
  const double* p = map01.data();
  for (int64_t y = 0; y < h; ++y) {
    auto* row = img.ptr<uint8_t>(static_cast<int>(y));
    for (int64_t x = 0; x < w; ++x) {
      row[x] = static_cast<uint8_t>(std::clamp(p[y * w + x], 0.0, 1.0) * 255.0 + 0.5);
    }
  }
  if (!cv::imwrite(path.string(), img)) {
    throw IoError("failed to write image: " + path.string());
  }
}

}  // namespace dpf
