#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "mishape/motion_net.hpp"
#include "mishape/scene.hpp"
#include "mishape/shaping.hpp"

namespace mishape::support {

/// Three small objects, 60 Gaussians each.
inline SceneSpec small_spec(std::uint64_t seed = 3) {
  SceneSpec spec;
  spec.seed = seed;
  spec.objects = {
      {Primitive::sphere_shell, Vec3(-0.6, 0.0, 0.0), 0.2, 60, 0.8, 0.9, Vec3(1, 0, 0)},
      {Primitive::box, Vec3(0.0, 0.5, 0.0), 0.18, 60, 0.8, 0.9, Vec3(0, 1, 0)},
      {Primitive::torus, Vec3(0.55, -0.3, 0.0), 0.22, 60, 0.8, 0.9, Vec3(0, 0, 1)},
  };
  return spec;
}

inline NetConfig small_config(int width = 32, std::uint64_t seed = 5) {
  NetConfig c;
  c.width = width;
  c.frequencies = 4;
  c.seed = seed;
  return c;
}

/// Largest entry-wise relative error between grad_total and central
/// differences of evaluate_losses over every parameter.
inline double total_gradient_error(const MotionNet& net, const ShapingBatch& sb, const ShapingConfig& cfg) {
  const Gradients g = grad_total(net, sb, cfg);
  double scale = 0.0;
  for (const auto& m : g.dW) scale = std::max(scale, m.cwiseAbs().maxCoeff());
  for (const auto& v : g.db) scale = std::max(scale, v.cwiseAbs().maxCoeff());
  const double floor = 1e-5 * scale;
  const double eps = 1e-6;
  double worst = 0.0;
  auto probe = [&](double& slot, double analytic, MotionNet& work) {
    const double keep = slot;
    slot = keep + eps;
    const double up = evaluate_losses(work, sb, cfg).total;
    slot = keep - eps;
    const double down = evaluate_losses(work, sb, cfg).total;
    slot = keep;
    const double fd = (up - down) / (2 * eps);
    worst = std::max(worst, std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), floor}));
  };
  MotionNet work = net;
  for (std::size_t m = 0; m < work.layers.size(); ++m) {
    for (Eigen::Index i = 0; i < work.layers[m].W.size(); ++i) probe(work.layers[m].W.data()[i], g.dW[m].data()[i], work);
    for (Eigen::Index i = 0; i < work.layers[m].b.size(); ++i) probe(work.layers[m].b[i], g.db[m][i], work);
  }
  return worst;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("mishape_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace mishape::support
