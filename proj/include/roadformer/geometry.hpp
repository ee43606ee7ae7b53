// SPDX-License-Identifier: Apache-2.0
//
// Disparity -> depth -> surface normals -> 3-channel normal image.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "roadformer/errors.hpp"
#include "roadformer/grid.hpp"
#include "roadformer/image_io.hpp"

namespace roadformer {

struct CameraIntrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  std::optional<double> baseline;  // meters; only needed for disparity input

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw ConfigError("intrinsics: focal lengths must be positive");
    if (baseline && !(*baseline > 0.0)) throw ConfigError("intrinsics: baseline must be positive");
  }

  /// Key-value text: one `key value` pair per line, keys fx fy cx cy [baseline].
  static CameraIntrinsics parse(std::istream& in, const std::string& source = "intrinsics") {
    std::map<std::string, double> kv;
    std::string line;
    while (std::getline(in, line)) {
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      std::istringstream ls(line);
      std::string key;
      double value = 0.0;
      if (!(ls >> key)) continue;
      if (!(ls >> value)) throw FormatError(source + ": missing value for '" + key + "'");
      kv[key] = value;
    }
    CameraIntrinsics k;
    for (const char* req : {"fx", "fy", "cx", "cy"})
      if (!kv.count(req)) throw ConfigError(source + ": missing key '" + req + "'");
    k.fx = kv["fx"];
    k.fy = kv["fy"];
    k.cx = kv["cx"];
    k.cy = kv["cy"];
    if (kv.count("baseline")) k.baseline = kv["baseline"];
    k.validate();
    return k;
  }

  static CameraIntrinsics load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open intrinsics file " + path);
    return parse(in, path);
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out.precision(17);
    out << "fx " << fx << "\nfy " << fy << "\ncx " << cx << "\ncy " << cy << '\n';
    if (baseline) out << "baseline " << *baseline << '\n';
  }
};

struct DepthMap {
  Grid<double> values;  // meters
  Mask valid;

  int height() const { return values.height; }
  int width() const { return values.width; }
};

struct NormalMap {
  Grid<double> values;  // 3 channels (x, y, z), camera frame, z forward
  Mask valid;

  int height() const { return values.height; }
  int width() const { return values.width; }
};

inline constexpr double kDisparityFloor = 1e-6;

/// depth = fx * baseline / disparity; disparities at or below the floor are invalid.
/// Pass expected dimensions to have mismatching inputs rejected.
inline DepthMap disparity_to_depth(const Grid<double>& disparity, const CameraIntrinsics& intr,
                                   int expected_height = -1, int expected_width = -1) {
  intr.validate();
  if (!intr.baseline) throw ConfigError("disparity_to_depth: intrinsics have no stereo baseline");
  if ((expected_height >= 0 && disparity.height != expected_height) ||
      (expected_width >= 0 && disparity.width != expected_width))
    throw InputError("disparity_to_depth: disparity is " + std::to_string(disparity.height) + "x" +
                     std::to_string(disparity.width) + ", expected " + std::to_string(expected_height) + "x" +
                     std::to_string(expected_width));
  DepthMap out{Grid<double>(disparity.height, disparity.width), Mask(disparity.height, disparity.width)};
  const double fb = intr.fx * *intr.baseline;
  for (std::size_t i = 0; i < disparity.data.size(); ++i) {
    const double d = disparity.data[i];
    if (d < 0.0 || std::isnan(d)) throw InputError("disparity_to_depth: negative disparity");
    if (d > kDisparityFloor) {
      out.values.data[i] = fb / d;
      out.valid.data[i] = 1;
    }
  }
  return out;
}

/// Least-squares plane through the back-projected 3x3 neighbourhood of every
/// interior pixel. Normals face the camera (z <= 0). Pixels with any invalid
/// neighbour, and the one-pixel border, are invalid.
inline NormalMap depth_to_normals(const DepthMap& depth, const CameraIntrinsics& intr) {
  intr.validate();
  const int h = depth.height(), w = depth.width();
  bool any_valid = false;
  for (std::size_t i = 0; i < depth.values.data.size(); ++i) {
    if (depth.valid.data[i]) {
      const double z = depth.values.data[i];
      if (!std::isfinite(z) || z <= 0.0) throw InputError("depth_to_normals: valid depth must be finite and > 0");
      any_valid = true;
    }
  }
  if (!any_valid) throw InputError("depth_to_normals: depth map has no valid pixels");

  NormalMap out{Grid<double>(h, w, 3), Mask(h, w)};
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver;
  for (int y = 1; y + 1 < h; ++y) {
    for (int x = 1; x + 1 < w; ++x) {
      Eigen::Vector3d pts[9];
      bool ok = true;
      int n = 0;
      for (int dy = -1; dy <= 1 && ok; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (!depth.valid.at(yy, xx)) {
            ok = false;
            break;
          }
          const double z = depth.values.at(yy, xx);
          pts[n++] = {(xx - intr.cx) / intr.fx * z, (yy - intr.cy) / intr.fy * z, z};
        }
      if (!ok) continue;
      Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
      for (const auto& p : pts) centroid += p;
      centroid /= 9.0;
      Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
      for (const auto& p : pts) {
        const Eigen::Vector3d d = p - centroid;
        cov += d * d.transpose();
      }
      solver.compute(cov);
      Eigen::Vector3d nrm = solver.eigenvectors().col(0).normalized();
      if (nrm.z() > 0.0) nrm = -nrm;
      for (int c = 0; c < 3; ++c) out.values.at(y, x, c) = nrm[c];
      out.valid.at(y, x) = 1;
    }
  }
  return out;
}

/// n -> (n + 1) / 2 per component; invalid pixels encode the zero vector (0.5).
inline Grid<double> normals_to_image(const NormalMap& normals) {
  Grid<double> img(normals.height(), normals.width(), 3, 0.5);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      if (!normals.valid.at(y, x)) continue;
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = (normals.values.at(y, x, c) + 1.0) * 0.5;
    }
  return img;
}

/// 16-bit millimetre depth; 0 marks invalid.
inline DepthMap load_depth_png(const std::string& path) {
  const auto raw = read_png_gray16(path);
  DepthMap d{Grid<double>(raw.height, raw.width), Mask(raw.height, raw.width)};
  for (std::size_t i = 0; i < raw.data.size(); ++i) {
    if (raw.data[i] == 0) continue;
    d.values.data[i] = raw.data[i] / 1000.0;
    d.valid.data[i] = 1;
  }
  return d;
}

inline void save_depth_png(const std::string& path, const DepthMap& depth) {
  Grid<std::uint16_t> raw(depth.height(), depth.width());
  for (std::size_t i = 0; i < raw.data.size(); ++i) {
    if (!depth.valid.data[i]) continue;
    const double mm = std::round(depth.values.data[i] * 1000.0);
    raw.data[i] = static_cast<std::uint16_t>(std::clamp(mm, 1.0, 65535.0));
  }
  write_png_gray16(path, raw);
}

/// 16-bit disparity scaled by 256; 0 marks invalid (returned as 0 disparity).
inline Grid<double> load_disparity_png(const std::string& path) {
  const auto raw = read_png_gray16(path);
  Grid<double> d(raw.height, raw.width);
  for (std::size_t i = 0; i < raw.data.size(); ++i) d.data[i] = raw.data[i] / 256.0;
  return d;
}

}  // namespace roadformer
