#pragma once

// Pinhole Gaussian splatting on the CPU: EWA projection, a global depth sort
// and per-pixel front-to-back compositing. Camera frame is x right, y down,
// z forward; pixel (px, py) is sampled at its center (px + 0.5, py + 0.5).

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mishape/error.hpp"
#include "mishape/scene.hpp"

namespace mishape {

inline constexpr double kNearPlane = 1e-4;
inline constexpr double kCovarianceFloor = 1e-6;
inline constexpr double kAlphaMax = 0.999;
inline constexpr double kMinTransmittance = 1e-4;
inline constexpr double kMaskForeground = 0.5;

struct Camera {
  Vec3 position = Vec3(0, 0, 1);
  Vec3 look_at = Vec3::Zero();
  Vec3 up = Vec3(0, 1, 0);
  double focal = 128.0;
  int width = 128;
  int height = 128;
};

inline void validate(const Camera& cam) {
  const Vec3 fwd = cam.look_at - cam.position;
  if (!(fwd.norm() > 0.0)) fail(ErrorCategory::argument, "camera look_at equals position", "camera");
  if (!(fwd.normalized().cross(cam.up).norm() > 1e-9)) fail(ErrorCategory::argument, "camera up is parallel to the view direction", "camera");
  if (!(cam.focal > 0.0)) fail(ErrorCategory::argument, "camera focal must be positive", "camera");
  if (cam.width < 1 || cam.height < 1) fail(ErrorCategory::argument, "camera image size must be positive", "camera");
}

/// Rows of the returned matrix are the camera axes (right, down, forward) in world coordinates.
inline Mat3 camera_rotation(const Camera& cam) {
  const Vec3 f = (cam.look_at - cam.position).normalized();
  const Vec3 r = f.cross(cam.up).normalized();
  const Vec3 d = f.cross(r);
  Mat3 R;
  R.row(0) = r.transpose();
  R.row(1) = d.transpose();
  R.row(2) = f.transpose();
  return R;
}

inline Mat3 quaternion_matrix(const Vec4& q) {
  return Eigen::Quaterniond(q[0], q[1], q[2], q[3]).normalized().toRotationMatrix();
}

struct Projection {
  bool culled = true;
  Vec2 mean = Vec2::Zero();
  Mat2 cov = Mat2::Identity();
  double depth = 0.0;
};

inline Projection project(const Gaussian& g, const Camera& cam) {
  const Mat3 Rc = camera_rotation(cam);
  const Vec3 p = Rc * (g.x - cam.position);
  Projection out;
  out.depth = p.z();
  if (!(p.z() > kNearPlane)) return out;
  const Mat3 R = quaternion_matrix(g.q);
  const Mat3 sigma = R * g.s.cwiseAbs2().asDiagonal() * R.transpose();
  const Mat3 sigma_cam = Rc * sigma * Rc.transpose();
  const double z = p.z();
  Eigen::Matrix<double, 2, 3> J;
  J << cam.focal / z, 0.0, -cam.focal * p.x() / (z * z), 0.0, cam.focal / z, -cam.focal * p.y() / (z * z);
  out.cov = J * sigma_cam * J.transpose() + kCovarianceFloor * Mat2::Identity();
  out.mean = Vec2(cam.focal * p.x() / z + 0.5 * cam.width, cam.focal * p.y() / z + 0.5 * cam.height);
  out.culled = false;
  return out;
}

struct Contribution {
  int id = 0;
  double w = 0.0;
};

struct ContributionImage {
  int width = 0;
  int height = 0;
  std::vector<std::vector<Contribution>> pixels;  // row-major, front to back
  std::vector<double> transmittance;              // T_final per pixel

  const std::vector<Contribution>& at(int px, int py) const { return pixels[static_cast<std::size_t>(py) * width + px]; }
  double final_transmittance(int px, int py) const { return transmittance[static_cast<std::size_t>(py) * width + px]; }
};

/// Compositing weights w_i = alpha_i prod_{j<i} (1 - alpha_j) for every pixel.
inline ContributionImage contributions(const Scene& scene, const Camera& cam) {
  validate(cam);
  ContributionImage img;
  img.width = cam.width;
  img.height = cam.height;
  const std::size_t npx = static_cast<std::size_t>(cam.width) * cam.height;
  img.pixels.assign(npx, {});
  img.transmittance.assign(npx, 1.0);

  struct Splat {
    int index;
    Projection proj;
  };
  std::vector<Splat> splats;
  splats.reserve(scene.size());
  for (std::size_t i = 0; i < scene.size(); ++i) {
    Projection pr = project(scene.gaussians[i], cam);
    if (!pr.culled) splats.push_back({static_cast<int>(i), pr});
  }
  std::sort(splats.begin(), splats.end(), [&](const Splat& a, const Splat& b) {
    if (a.proj.depth != b.proj.depth) return a.proj.depth < b.proj.depth;
    return scene.gaussians[a.index].id < scene.gaussians[b.index].id;
  });

  for (const Splat& sp : splats) {
    const Gaussian& g = scene.gaussians[sp.index];
    if (g.o <= 0.0) continue;
    const Mat2 inv = sp.proj.cov.inverse();
    const double radius = 3.0 * std::sqrt(Eigen::SelfAdjointEigenSolver<Mat2>(sp.proj.cov).eigenvalues().maxCoeff());
    const int x0 = std::max(0, static_cast<int>(std::floor(sp.proj.mean.x() - radius - 0.5)));
    const int x1 = std::min(cam.width - 1, static_cast<int>(std::ceil(sp.proj.mean.x() + radius - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::floor(sp.proj.mean.y() - radius - 0.5)));
    const int y1 = std::min(cam.height - 1, static_cast<int>(std::ceil(sp.proj.mean.y() + radius - 0.5)));
    for (int py = y0; py <= y1; ++py) {
      for (int px = x0; px <= x1; ++px) {
        const std::size_t k = static_cast<std::size_t>(py) * cam.width + px;
        double& T = img.transmittance[k];
        if (T < kMinTransmittance) continue;
        const Vec2 d = Vec2(px + 0.5, py + 0.5) - sp.proj.mean;
        if (std::abs(d.x()) > radius || std::abs(d.y()) > radius) continue;
        const double alpha = std::clamp(g.o * std::exp(-0.5 * d.dot(inv * d)), 0.0, kAlphaMax);
        if (alpha <= 0.0) continue;
        img.pixels[k].push_back({g.id, alpha * T});
        T *= 1.0 - alpha;
      }
    }
  }
  return img;
}

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<Vec3> pixels;  // row-major, components in [0, 1]
};

/// Sum of c_i w_i per pixel over a white background.
inline RgbImage render_color(const Scene& scene, const Camera& cam) {
  const ContributionImage ci = contributions(scene, cam);
  std::vector<int> index_of(scene.size());
  for (std::size_t i = 0; i < scene.size(); ++i) index_of[scene.gaussians[i].id] = static_cast<int>(i);
  RgbImage img{cam.width, cam.height, std::vector<Vec3>(ci.pixels.size())};
  for (std::size_t k = 0; k < ci.pixels.size(); ++k) {
    Vec3 c = ci.transmittance[k] * Vec3::Ones();
    for (const auto& e : ci.pixels[k]) c += e.w * scene.gaussians[index_of[e.id]].c;
    img.pixels[k] = c;
  }
  return img;
}

struct MaskImage {
  int width = 0;
  int height = 0;
  std::vector<int> labels;  // row-major, 0 = background

  int at(int px, int py) const { return labels[static_cast<std::size_t>(py) * width + px]; }
  bool operator==(const MaskImage&) const = default;
};

/// Ground-truth masks: argmax over objects of summed weight, background when
/// the foreground weight is below one half.
inline MaskImage synth_masks(const Scene& scene, const Camera& cam) {
  for (const auto& g : scene.gaussians)
    if (!g.label) fail(ErrorCategory::argument, "synth_masks needs ground-truth labels", "gaussian " + std::to_string(g.id));
  const ContributionImage ci = contributions(scene, cam);
  std::vector<int> label_of(scene.size());
  for (const auto& g : scene.gaussians) label_of[g.id] = *g.label;
  MaskImage mask{cam.width, cam.height, std::vector<int>(ci.pixels.size(), 0)};
  std::vector<double> mass(static_cast<std::size_t>(scene.object_count) + 1);
  for (std::size_t k = 0; k < ci.pixels.size(); ++k) {
    std::fill(mass.begin(), mass.end(), 0.0);
    double fg = 0.0;
    for (const auto& e : ci.pixels[k]) {
      const int l = label_of[e.id];
      if (l <= 0) continue;
      if (static_cast<std::size_t>(l) >= mass.size()) mass.resize(static_cast<std::size_t>(l) + 1, 0.0);
      mass[l] += e.w;
      fg += e.w;
    }
    if (fg < kMaskForeground) continue;
    int best = 1;
    for (std::size_t l = 2; l < mass.size(); ++l)
      if (mass[l] > mass[best]) best = static_cast<int>(l);
    mask.labels[k] = best;
  }
  return mask;
}

struct CoarseLabels {
  std::vector<int> labels;    // indexed by Gaussian id
  std::vector<bool> flagged;  // true when the Gaussian never contributed to any pixel
  std::vector<double> best_weight;

  std::size_t flagged_count() const { return static_cast<std::size_t>(std::count(flagged.begin(), flagged.end(), true)); }
};

/// Each Gaussian takes the mask label at the (view, pixel) of its largest
/// compositing weight. First occurrence wins ties.
inline CoarseLabels coarse_mask_label(const Scene& scene, const std::vector<Camera>& cams,
                                      const std::vector<MaskImage>& masks) {
  if (cams.empty()) fail(ErrorCategory::argument, "coarse_mask_label needs at least one camera", "cams");
  if (cams.size() != masks.size()) fail(ErrorCategory::argument, "one mask per camera required", "masks");
  const std::size_t n = scene.size();
  CoarseLabels out{std::vector<int>(n, 0), std::vector<bool>(n, true), std::vector<double>(n, 0.0)};
  for (std::size_t v = 0; v < cams.size(); ++v) {
    if (masks[v].width != cams[v].width || masks[v].height != cams[v].height)
      fail(ErrorCategory::argument, "mask size does not match its camera", "masks[" + std::to_string(v) + "]");
    const ContributionImage ci = contributions(scene, cams[v]);
    for (std::size_t k = 0; k < ci.pixels.size(); ++k) {
      for (const auto& e : ci.pixels[k]) {
        if (e.w > out.best_weight[e.id]) {
          out.best_weight[e.id] = e.w;
          out.labels[e.id] = masks[v].labels[k];
          out.flagged[e.id] = false;
        }
      }
    }
  }
  return out;
}

inline nlohmann::json labels_to_json(const CoarseLabels& l) {
  std::vector<int> flagged;
  for (std::size_t i = 0; i < l.flagged.size(); ++i)
    if (l.flagged[i]) flagged.push_back(static_cast<int>(i));
  return {{"version", 1}, {"labels", l.labels}, {"flagged", flagged}};
}

inline std::vector<int> labels_from_json(const nlohmann::json& j, std::size_t n) {
  const auto& arr = detail::require(j, "labels", "labels");
  if (!arr.is_array() || arr.size() != n)
    fail(ErrorCategory::validation, "label count does not match the scene", "labels");
  std::vector<int> out;
  out.reserve(n);
  for (const auto& v : arr) {
    if (!v.is_number_integer() || v.get<int>() < 0) fail(ErrorCategory::parse, "labels must be non-negative integers", "labels");
    out.push_back(v.get<int>());
  }
  return out;
}

/// Cameras on a ring around the scene's bounding sphere, looking at its center.
inline std::vector<Camera> camera_ring(const Scene& scene, int views = 8, int width = 128, int height = 128,
                                       double elevation_deg = 30.0, double radius_factor = 2.5) {
  if (views < 1) fail(ErrorCategory::argument, "camera ring needs at least one view", "views");
  if (scene.size() == 0) fail(ErrorCategory::argument, "camera ring needs a non-empty scene", "scene");
  Vec3 lo = scene.gaussians.front().x, hi = lo;
  for (const auto& g : scene.gaussians) {
    lo = lo.cwiseMin(g.x);
    hi = hi.cwiseMax(g.x);
  }
  const Vec3 center = 0.5 * (lo + hi);
  double radius = 0.0;
  for (const auto& g : scene.gaussians) radius = std::max(radius, (g.x - center).norm());
  radius = std::max(radius, 1e-3);
  const double dist = radius_factor * radius;
  const double el = elevation_deg * std::numbers::pi / 180.0;
  // Fit the bounding sphere into the shorter image side with a small margin.
  const double half_angle = std::asin(1.0 / radius_factor);
  const double focal = 0.5 * std::min(width, height) / std::tan(half_angle) * 0.95;
  std::vector<Camera> cams;
  for (int v = 0; v < views; ++v) {
    const double az = 2.0 * std::numbers::pi * v / views;
    Camera c;
    c.position = center + dist * Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
    c.look_at = center;
    c.up = Vec3(0, 0, 1);
    c.focal = focal;
    c.width = width;
    c.height = height;
    cams.push_back(c);
  }
  return cams;
}

// ---------------------------------------------------------------------------
// Image files.

inline std::string encode_ppm(const RgbImage& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.reserve(out.size() + img.pixels.size() * 3);
  for (const auto& p : img.pixels)
    for (int c = 0; c < 3; ++c) out.push_back(static_cast<char>(static_cast<std::uint8_t>(std::lround(std::clamp(p[c], 0.0, 1.0) * 255.0))));
  return out;
}

inline std::string encode_pgm(const MaskImage& mask) {
  std::string out = "P5\n" + std::to_string(mask.width) + " " + std::to_string(mask.height) + "\n255\n";
  for (int l : mask.labels) out.push_back(static_cast<char>(static_cast<std::uint8_t>(std::clamp(l, 0, 255))));
  return out;
}

inline void write_ppm(const RgbImage& img, const std::string& path) { detail::write_file(path, encode_ppm(img)); }
inline void write_pgm(const MaskImage& mask, const std::string& path) { detail::write_file(path, encode_pgm(mask)); }

inline MaskImage read_pgm(const std::string& path) {
  const std::string data = detail::read_file(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < data.size() && (std::isspace(static_cast<unsigned char>(data[pos])) || data[pos] == '#')) {
      if (data[pos] == '#')
        while (pos < data.size() && data[pos] != '\n') ++pos;
      else
        ++pos;
    }
    const std::size_t start = pos;
    while (pos < data.size() && !std::isspace(static_cast<unsigned char>(data[pos]))) ++pos;
    return data.substr(start, pos - start);
  };
  if (token() != "P5") fail(ErrorCategory::parse, "not a binary PGM file", path);
  MaskImage m;
  try {
    m.width = std::stoi(token());
    m.height = std::stoi(token());
    if (std::stoi(token()) != 255) fail(ErrorCategory::parse, "only 8-bit PGM masks are supported", path);
  } catch (const std::logic_error&) {
    fail(ErrorCategory::parse, "malformed PGM header", path);
  }
  ++pos;
  const std::size_t n = static_cast<std::size_t>(m.width) * m.height;
  if (m.width < 1 || m.height < 1 || data.size() < pos + n) fail(ErrorCategory::parse, "truncated PGM data", path);
  m.labels.resize(n);
  for (std::size_t k = 0; k < n; ++k) m.labels[k] = static_cast<std::uint8_t>(data[pos + k]);
  return m;
}

}  // namespace mishape
