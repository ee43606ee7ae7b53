// SPDX-License-Identifier: Apache-2.0
//
// Procedural road scenes: a rough ground plane seen by a pitched camera, with
// bowl-shaped defects cut into it and box obstacles standing on it. Produces
// RGB, depth, normals and a 3-class label map, plus the on-disk dataset format
//
//   <root>/manifest, <root>/intrinsics,
//   <root>/<split>/<id>_{rgb,depth,label}.png
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "roadformer/geometry.hpp"
#include "roadformer/grid.hpp"
#include "roadformer/image_io.hpp"
#include "roadformer/nn.hpp"

namespace roadformer {

inline constexpr std::uint8_t kBackground = 0;
inline constexpr std::uint8_t kFreespace = 1;
inline constexpr std::uint8_t kDefect = 2;
inline constexpr std::uint8_t kIgnoreLabel = 255;

/// Classic 2-D gradient noise on the integer lattice; zero at lattice points.
class PerlinNoise {
 public:
  explicit PerlinNoise(std::uint64_t seed) {
    std::iota(perm_.begin(), perm_.begin() + 256, 0);
    Rng rng(seed);
    for (int i = 255; i > 0; --i) std::swap(perm_[static_cast<std::size_t>(i)], perm_[rng.below(static_cast<std::uint64_t>(i) + 1)]);
    for (int i = 0; i < 256; ++i) perm_[static_cast<std::size_t>(256 + i)] = perm_[static_cast<std::size_t>(i)];
  }

  double noise(double x, double y) const {
    const double fx = std::floor(x), fy = std::floor(y);
    const int xi = static_cast<int>(static_cast<std::int64_t>(fx) & 255), yi = static_cast<int>(static_cast<std::int64_t>(fy) & 255);
    const double dx = x - fx, dy = y - fy;
    const double u = fade(dx), v = fade(dy);
    const int aa = hash(xi, yi), ab = hash(xi, yi + 1), ba = hash(xi + 1, yi), bb = hash(xi + 1, yi + 1);
    const double x1 = lerp(grad(aa, dx, dy), grad(ba, dx - 1, dy), u);
    const double x2 = lerp(grad(ab, dx, dy - 1), grad(bb, dx - 1, dy - 1), u);
    return lerp(x1, x2, v);
  }

  /// Octave sum with halving amplitude and doubling frequency, normalized by
  /// the total amplitude and clamped to [-1, 1]. Zero octaves give 0.
  double fractal(double x, double y, int octaves) const {
    double sum = 0.0, amp = 1.0, norm = 0.0, freq = 1.0;
    for (int o = 0; o < octaves; ++o) {
      sum += amp * noise(x * freq + 17.0 * o, y * freq + 31.0 * o);
      norm += amp;
      amp *= 0.5;
      freq *= 2.0;
    }
    return norm > 0.0 ? std::clamp(sum / norm, -1.0, 1.0) : 0.0;
  }

 private:
  static double fade(double t) { return t * t * t * (t * (t * 6 - 15) + 10); }
  static double lerp(double a, double b, double t) { return a + t * (b - a); }
  static double grad(int h, double x, double y) {
    switch (h & 7) {
      case 0: return x + y;
      case 1: return -x + y;
      case 2: return x - y;
      case 3: return -x - y;
      case 4: return x;
      case 5: return -x;
      case 6: return y;
      default: return -y;
    }
  }
  int hash(int x, int y) const { return perm_[static_cast<std::size_t>(perm_[static_cast<std::size_t>(x & 255)] + (y & 255))]; }

  std::array<int, 512> perm_{};
};

/// h x w noise sampled at (x, y) / period.
inline Grid<double> perlin2d(int height, int width, int octaves, std::uint64_t seed, double period = 16.0) {
  if (height < 2 || width < 2) throw ConfigError("perlin2d: dimensions must be at least 2x2");
  PerlinNoise p(seed);
  Grid<double> g(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) g.at(y, x) = p.fractal(x / period, y / period, octaves);
  return g;
}

struct SceneSpec {
  int height = 64;
  int width = 96;
  double focal_scale = 0.8;  // fx = fy = focal_scale * width
  double camera_height = 1.5;
  double pitch_deg = 15.0;
  std::uint64_t seed = 0;

  int min_defects = 1;
  int max_defects = 2;
  double defect_depth_min = 0.05;
  double defect_depth_max = 0.15;
  double defect_radius_min = 0.6;
  double defect_radius_max = 1.3;
  double defect_z_min = 3.0;
  double defect_z_max = 5.5;
  double defect_x_range = 1.0;
  double rim_jitter = 0.3;
  int defect_retries = 20;

  int min_obstacles = 0;
  int max_obstacles = 2;

  int roughness_octaves = 3;
  double roughness_amplitude = 0.02;
  double roughness_period = 2.0;

  std::array<double, 3> light_direction{0.3, -1.0, -0.5};  // world, towards the light; y points down
  double max_depth = 60.0;
  double texture_amplitude = 0.08;
  double pixel_noise = 0.03;

  CameraIntrinsics intrinsics() const {
    CameraIntrinsics k;
    k.fx = k.fy = focal_scale * width;
    k.cx = width / 2.0 - 0.5;
    k.cy = height / 2.0 - 0.5;
    return k;
  }

  void validate() const {
    if (height <= 0 || width <= 0 || height % 32 != 0 || width % 32 != 0)
      throw ConfigError("scene: image size " + std::to_string(height) + "x" + std::to_string(width) +
                        " must be positive multiples of 32");
    if (min_defects < 0 || max_defects < min_defects || min_obstacles < 0 || max_obstacles < min_obstacles)
      throw ConfigError("scene: invalid defect/obstacle count range");
    if (!(defect_depth_min > 0) || defect_depth_max < defect_depth_min || !(defect_radius_min > 0) ||
        defect_radius_max < defect_radius_min || !(defect_z_min > 0) || defect_z_max < defect_z_min)
      throw ConfigError("scene: invalid defect size range");
    if (roughness_octaves < 0 || roughness_amplitude < 0 || !(camera_height > 0) || !(max_depth > 0))
      throw ConfigError("scene: invalid roughness or camera parameters");
  }
};

struct Sample {
  Grid<double> rgb;  // 3 channels in [0, 1], multiples of 1/255
  DepthMap depth;    // metres, multiples of 1 mm
  NormalMap normals;
  LabelMap label;
  CameraIntrinsics intrinsics;

  int height() const { return label.height; }
  int width() const { return label.width; }
};

namespace detail {

struct Defect {
  double x, z, rx, rz, depth, rim_phase;
};

struct Box {
  double x0, x1, y0, y1, z0, z1;
  std::array<double, 3> albedo;
};

/// Ray-box slab test; returns the entry parameter or +inf.
inline double ray_box(const std::array<double, 3>& dir, const Box& b) {
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  const double lo[3] = {b.x0, b.y0, b.z0}, hi[3] = {b.x1, b.y1, b.z1};
  for (int a = 0; a < 3; ++a) {
    if (std::abs(dir[static_cast<std::size_t>(a)]) < 1e-12) {
      if (0.0 < lo[a] || 0.0 > hi[a]) return std::numeric_limits<double>::infinity();
      continue;
    }
    double ta = lo[a] / dir[static_cast<std::size_t>(a)], tb = hi[a] / dir[static_cast<std::size_t>(a)];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return std::numeric_limits<double>::infinity();
  }
  return t0 > 0.0 ? t0 : std::numeric_limits<double>::infinity();
}

inline double quantize(double v, double step) { return std::round(v / step) * step; }

}  // namespace detail

/// Depth of the undisturbed ground plane along pixel (x, y), or +inf when
/// the ray does not reach it. Depth of a flat plane is independent of x.
inline double bare_plane_depth(const SceneSpec& spec, int /*x*/, int y) {
  const auto k = spec.intrinsics();
  const double th = spec.pitch_deg * std::numbers::pi / 180.0;
  const double yn = (y - k.cy) / k.fy;
  const double den = yn * std::cos(th) + std::sin(th);
  return den > 1e-9 ? spec.camera_height / den : std::numeric_limits<double>::infinity();
}

inline Sample generate_scene(const SceneSpec& spec) {
  spec.validate();
  const int h = spec.height, w = spec.width;
  const auto k = spec.intrinsics();
  const double th = spec.pitch_deg * std::numbers::pi / 180.0, ct = std::cos(th), st = std::sin(th);
  const double cam_h = spec.camera_height;
  Rng rng(spec.seed);
  const PerlinNoise rough(rng.next()), texture(rng.next()), rim(rng.next());

  auto project = [&](double xw, double zw, double& u, double& v) {
    const double yc = cam_h * ct - zw * st, zc = cam_h * st + zw * ct;
    u = k.fx * xw / zc + k.cx;
    v = k.fy * yc / zc + k.cy;
  };

  std::vector<detail::Defect> defects;
  const int n_defects = spec.min_defects + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_defects - spec.min_defects + 1)));
  for (int i = 0; i < n_defects; ++i) {
    for (int attempt = 0; attempt < spec.defect_retries; ++attempt) {
      detail::Defect d{rng.uniform(-spec.defect_x_range, spec.defect_x_range), rng.uniform(spec.defect_z_min, spec.defect_z_max),
                       rng.uniform(spec.defect_radius_min, spec.defect_radius_max),
                       rng.uniform(spec.defect_radius_min, spec.defect_radius_max),
                       rng.uniform(spec.defect_depth_min, spec.defect_depth_max), rng.uniform(0.0, 100.0)};
      const double reach = 1.0 + spec.rim_jitter;
      bool inside = d.z - d.rz * reach > 0.5;
      for (double sx : {-1.0, 1.0})
        for (double sz : {-1.0, 1.0}) {
          double u = 0, v = 0;
          project(d.x + sx * d.rx * reach, d.z + sz * d.rz * reach, u, v);
          inside = inside && u >= 1 && u <= w - 2 && v >= 1 && v <= h - 2;
        }
      for (const auto& o : defects)
        inside = inside && std::hypot(o.x - d.x, o.z - d.z) > (std::max(o.rx, o.rz) + std::max(d.rx, d.rz)) * reach;
      if (inside) {
        defects.push_back(d);
        break;
      }
    }
  }

  std::vector<detail::Box> boxes;
  const int n_boxes = spec.min_obstacles + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_obstacles - spec.min_obstacles + 1)));
  for (int i = 0; i < n_boxes; ++i) {
    const double bw = rng.uniform(0.5, 1.5), bh = rng.uniform(0.5, 1.8), bd = rng.uniform(0.5, 1.5);
    const double x0 = rng.uniform(-4.0, 3.0), z0 = rng.uniform(8.0, 20.0);
    boxes.push_back({x0, x0 + bw, cam_h - bh, cam_h, z0, z0 + bd,
                     {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)}});
  }

  // Ground displacement below the plane (positive = deeper) and the defect part of it.
  auto displacement = [&](double xw, double zw, double& defect_part) {
    defect_part = 0.0;
    for (const auto& d : defects) {
      const double ex = (xw - d.x) / d.rx, ez = (zw - d.z) / d.rz;
      const double phi = std::atan2(ez, ex);
      const double edge = 1.0 + spec.rim_jitter * rim.noise(2.0 * std::cos(phi) + d.rim_phase, 2.0 * std::sin(phi) + 0.5);
      const double r = std::hypot(ex, ez) / edge;
      if (r < 1.0) defect_part += d.depth * (1.0 - r * r);
    }
    const double rough_part =
        spec.roughness_amplitude * rough.fractal(xw / spec.roughness_period, zw / spec.roughness_period, spec.roughness_octaves);
    return defect_part + rough_part;
  };

  constexpr double kDefectThreshold = 0.005;
  Sample s;
  s.intrinsics = k;
  s.label = LabelMap(h, w);
  s.depth = {Grid<double>(h, w), Mask(h, w, 1, 1)};
  Grid<int> box_of(h, w, 1, -1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double xn = (x - k.cx) / k.fx, yn = (y - k.cy) / k.fy;
      const std::array<double, 3> dir{xn, yn * ct + st, -yn * st + ct};  // world direction, camera depth = 1
      const double den = dir[1];
      double depth = spec.max_depth;
      std::uint8_t label = kBackground;
      if (den > 1e-9 && cam_h / den < spec.max_depth) {
        double z = cam_h / den, dpart = 0.0, off = 0.0;
        for (int it = 0; it < 6; ++it) {
          off = displacement(z * dir[0], z * dir[2], dpart);
          z = (cam_h + off) / den;
        }
        if (z < spec.max_depth) {
          depth = z;
          label = (dpart > kDefectThreshold && off > kDefectThreshold) ? kDefect : kFreespace;
        }
      }
      for (std::size_t b = 0; b < boxes.size(); ++b) {
        const double t = detail::ray_box(dir, boxes[b]);
        if (t < depth) {
          depth = t;
          label = kBackground;
          box_of.at(y, x) = static_cast<int>(b);
        }
      }
      s.depth.values.at(y, x) = detail::quantize(depth, 1e-3);
      s.label.at(y, x) = label;
    }
  s.normals = depth_to_normals(s.depth, k);

  // Shading uses the recovered normals; invalid normals get ambient light only.
  std::array<double, 3> lw = spec.light_direction;
  const double ln = std::sqrt(lw[0] * lw[0] + lw[1] * lw[1] + lw[2] * lw[2]);
  for (auto& v : lw) v /= ln;
  const std::array<double, 3> lc{lw[0], lw[1] * ct - lw[2] * st, lw[1] * st + lw[2] * ct};
  const std::array<double, 3> road{0.42, 0.42, 0.44}, sky{0.55, 0.70, 0.90};
  s.rgb = Grid<double>(h, w, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double z = s.depth.values.at(y, x);
      const double xn = (x - k.cx) / k.fx, yn = (y - k.cy) / k.fy;
      const double xw = z * xn, zw = z * (-yn * st + ct);
      std::array<double, 3> albedo = road;
      const int b = box_of.at(y, x);
      const bool is_sky = b < 0 && s.label.at(y, x) == kBackground;
      if (b >= 0) albedo = boxes[static_cast<std::size_t>(b)].albedo;
      else if (is_sky) albedo = sky;
      else if (s.label.at(y, x) == kDefect) for (auto& a : albedo) a *= 0.93;
      double shade = 1.0;
      if (!is_sky) {
        double ndotl = 0.0;
        if (s.normals.valid.at(y, x))
          for (int c = 0; c < 3; ++c) ndotl += s.normals.values.at(y, x, c) * lc[static_cast<std::size_t>(c)];
        else
          ndotl = 0.7;
        shade = 0.35 + 0.65 * std::max(0.0, ndotl);
        if (b < 0) shade *= 1.0 + spec.texture_amplitude * texture.fractal(xw * 3.0, zw * 3.0, 3) / 0.5;
      }
      for (int c = 0; c < 3; ++c) {
        const double v = albedo[static_cast<std::size_t>(c)] * shade + spec.pixel_noise * rng.uniform(-1.0, 1.0);
        s.rgb.at(y, x, c) = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
      }
    }
  return s;
}

struct ClassInfo {
  int id;
  std::string name;
  Rgb8 color;
};

inline std::vector<ClassInfo> default_classes() {
  return {{0, "background", {0, 0, 0}}, {1, "freespace", {128, 0, 128}}, {2, "defect", {0, 255, 0}}};
}

inline std::vector<Rgb8> palette_of(const std::vector<ClassInfo>& classes) {
  std::vector<Rgb8> p;
  for (const auto& c : classes) {
    if (c.id >= static_cast<int>(p.size())) p.resize(static_cast<std::size_t>(c.id) + 1, Rgb8{255, 255, 255});
    p[static_cast<std::size_t>(c.id)] = c.color;
  }
  return p;
}

struct DatasetManifest {
  std::string root;
  std::vector<ClassInfo> classes = default_classes();
  std::map<std::string, std::vector<std::string>> splits;

  int num_classes() const { return static_cast<int>(classes.size()); }

  void validate() const {
    std::map<std::string, std::string> owner;
    for (const auto& [split, ids] : splits)
      for (const auto& id : ids) {
        auto [it, fresh] = owner.emplace(id, split);
        if (!fresh)
          throw ConfigError("manifest: sample '" + id + "' appears in splits '" + it->second + "' and '" + split + "'");
      }
  }

  const std::vector<std::string>& split(const std::string& name) const {
    auto it = splits.find(name);
    if (it == splits.end()) throw InputError("manifest: no split named '" + name + "'");
    return it->second;
  }

  std::string split_of(const std::string& id) const {
    for (const auto& [split, ids] : splits)
      if (std::find(ids.begin(), ids.end(), id) != ids.end()) return split;
    throw InputError("manifest: unknown sample id '" + id + "'");
  }

  std::string path(const std::string& split, const std::string& id, const std::string& kind) const {
    return (std::filesystem::path(root) / split / (id + "_" + kind + ".png")).string();
  }

  std::string intrinsics_path() const { return (std::filesystem::path(root) / "intrinsics").string(); }

  void save() const {
    validate();
    std::filesystem::create_directories(root);
    std::ofstream out(std::filesystem::path(root) / "manifest");
    if (!out) throw IoError("cannot write manifest in " + root);
    for (const auto& c : classes)
      out << "class " << c.id << ' ' << c.name << ' ' << int(c.color[0]) << ' ' << int(c.color[1]) << ' '
          << int(c.color[2]) << '\n';
    for (const auto& [split, ids] : splits)
      for (const auto& id : ids) out << "sample " << split << ' ' << id << '\n';
  }

  static DatasetManifest load(const std::string& root) {
    const auto file = std::filesystem::path(root) / "manifest";
    std::ifstream in(file);
    if (!in) throw IoError("cannot open " + file.string());
    DatasetManifest m;
    m.root = root;
    m.classes.clear();
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::istringstream ls(line);
      std::string kind;
      if (!(ls >> kind)) continue;
      if (kind == "class") {
        ClassInfo c;
        int r = 0, g = 0, b = 0;
        if (!(ls >> c.id >> c.name >> r >> g >> b)) throw FormatError(file.string() + ":" + std::to_string(lineno) + ": bad class line");
        c.color = {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(b)};
        m.classes.push_back(c);
      } else if (kind == "sample") {
        std::string split, id;
        if (!(ls >> split >> id)) throw FormatError(file.string() + ":" + std::to_string(lineno) + ": bad sample line");
        m.splits[split].push_back(id);
      } else {
        throw FormatError(file.string() + ":" + std::to_string(lineno) + ": unknown record '" + kind + "'");
      }
    }
    m.validate();
    return m;
  }
};

inline std::string sample_id(int index) {
  std::ostringstream s;
  s.width(6);
  s.fill('0');
  s << index;
  return s.str();
}

/// Deterministic shuffled partition of `n` ids into train/val/test.
inline DatasetManifest make_splits(int n, const std::array<double, 3>& ratios, std::uint64_t seed) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total - 1.0) > 1e-9 || ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0)
    throw ConfigError("make_splits: ratios must be non-negative and sum to 1");
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (int i = n - 1; i > 0; --i) std::swap(order[static_cast<std::size_t>(i)], order[rng.below(static_cast<std::uint64_t>(i) + 1)]);
  // Largest-remainder rounding of the split sizes.
  std::array<int, 3> sizes{};
  std::array<double, 3> rem{};
  int assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double exact = ratios[i] * n;
    sizes[i] = static_cast<int>(std::floor(exact + 1e-9));
    rem[i] = exact - sizes[i];
    assigned += sizes[i];
  }
  while (assigned < n) {
    const auto i = static_cast<std::size_t>(std::max_element(rem.begin(), rem.end()) - rem.begin());
    ++sizes[i];
    rem[i] = -1.0;
    ++assigned;
  }
  DatasetManifest m;
  const char* names[3] = {"train", "val", "test"};
  std::size_t pos = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    auto& ids = m.splits[names[i]];
    for (int j = 0; j < sizes[i]; ++j) ids.push_back(sample_id(order[pos++]));
  }
  return m;
}

inline void write_sample(const DatasetManifest& m, const std::string& split, const std::string& id, const Sample& s) {
  std::filesystem::create_directories(std::filesystem::path(m.root) / split);
  Grid<std::uint8_t> rgb(s.height(), s.width(), 3);
  for (std::size_t i = 0; i < rgb.data.size(); ++i)
    rgb.data[i] = static_cast<std::uint8_t>(std::lround(std::clamp(s.rgb.data[i], 0.0, 1.0) * 255.0));
  write_png_rgb8(m.path(split, id, "rgb"), rgb);
  save_depth_png(m.path(split, id, "depth"), s.depth);
  write_png_palette(m.path(split, id, "label"), s.label, palette_of(m.classes));
}

inline Sample load_sample(const DatasetManifest& m, const std::string& id) {
  const std::string split = m.split_of(id);
  const auto intr = CameraIntrinsics::load(m.intrinsics_path());
  Sample s;
  s.intrinsics = intr;
  const auto rgb = read_png_rgb8(m.path(split, id, "rgb"));
  s.depth = load_depth_png(m.path(split, id, "depth"));
  s.label = read_png_indices(m.path(split, id, "label"));
  if (!rgb.same_size(s.depth.values) || !rgb.same_size(s.label))
    throw FormatError("sample '" + id + "': rgb, depth and label dimensions differ");
  s.rgb = Grid<double>(rgb.height, rgb.width, 3);
  for (std::size_t i = 0; i < rgb.data.size(); ++i) s.rgb.data[i] = rgb.data[i] / 255.0;
  s.normals = depth_to_normals(s.depth, intr);
  return s;
}

/// Generates `count` scenes (scene seed = seed XOR index) into `root`.
inline DatasetManifest generate_dataset(const std::string& root, int count, std::uint64_t seed, SceneSpec spec,
                                        const std::array<double, 3>& ratios = {0.6, 0.2, 0.2}) {
  spec.validate();
  DatasetManifest m = make_splits(count, ratios, seed);
  m.root = root;
  std::filesystem::create_directories(root);
  spec.intrinsics().save(m.intrinsics_path());
  for (const auto& [split, ids] : m.splits)
    for (const auto& id : ids) {
      SceneSpec s = spec;
      s.seed = seed ^ static_cast<std::uint64_t>(std::stoi(id));
      write_sample(m, split, id, generate_scene(s));
    }
  m.save();
  return m;
}

}  // namespace roadformer
