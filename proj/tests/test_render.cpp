#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "mishape/render.hpp"
#include "support.hpp"

using namespace mishape;

namespace {

Gaussian splat(Vec3 x, double scale, double opacity, int id, int label = 1) {
  Gaussian g;
  g.x = x;
  g.s = Vec3::Constant(scale);
  g.o = opacity;
  g.id = id;
  g.label = label;
  return g;
}

Camera front_camera(int size = 32, double focal = 32.0) {
  Camera c;
  c.position = Vec3(0, 0, 2);
  c.look_at = Vec3::Zero();
  c.up = Vec3(0, 1, 0);
  c.focal = focal;
  c.width = size;
  c.height = size;
  return c;
}

}  // namespace

TEST(Render, WeightsAndTransmittanceSumToOne) {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    const Scene scene = generate_scene(support::small_spec(100 + trial));
    const auto cams = camera_ring(scene, 8, 40, 30, 10.0 + 40.0 * (u(rng) + 1.0));
    const Camera& cam = cams[trial % cams.size()];
    const ContributionImage ci = contributions(scene, cam);
    double worst = 0.0;
    std::size_t covered = 0;
    for (int py = 0; py < cam.height; ++py)
      for (int px = 0; px < cam.width; ++px) {
        double s = ci.final_transmittance(px, py);
        for (const auto& e : ci.at(px, py)) {
          EXPECT_GE(e.w, 0.0);
          s += e.w;
        }
        covered += !ci.at(px, py).empty();
        worst = std::max(worst, std::abs(s - 1.0));
      }
    EXPECT_LT(worst, 1e-9) << "trial " << trial;
    EXPECT_GT(covered, 0u);
  }
}

TEST(Render, SingleGaussianAlphaMatchesClosedForm) {
  Scene scene;
  scene.gaussians = {splat(Vec3::Zero(), 0.05, 0.7, 0)};
  const Camera cam = front_camera();
  const ContributionImage ci = contributions(scene, cam);
  // Isotropic splat at depth 2: screen sigma = focal * scale / depth.
  const double sigma2 = std::pow(32.0 * 0.05 / 2.0, 2) + kCovarianceFloor;
  for (int py = 10; py < 22; ++py)
    for (int px = 10; px < 22; ++px) {
      const double dx = px + 0.5 - 16.0, dy = py + 0.5 - 16.0;
      const double alpha = 0.7 * std::exp(-0.5 * (dx * dx + dy * dy) / sigma2);
      const auto& list = ci.at(px, py);
      if (list.empty()) {
        EXPECT_LT(alpha, 0.7 * std::exp(-4.5) + 1e-12);
        continue;
      }
      ASSERT_EQ(list.size(), 1u);
      EXPECT_NEAR(list[0].w, alpha, 1e-12);
      EXPECT_NEAR(ci.final_transmittance(px, py), 1.0 - alpha, 1e-12);
    }
}

TEST(Render, FrontToBackCompositing) {
  Scene scene;
  scene.gaussians = {splat(Vec3(0, 0, -0.5), 0.1, 0.6, 0, 1), splat(Vec3(0, 0, 0.5), 0.1, 0.5, 1, 2)};
  scene.object_count = 2;
  const ContributionImage ci = contributions(scene, front_camera());
  const auto& list = ci.at(16, 16);
  ASSERT_EQ(list.size(), 2u);
  EXPECT_EQ(list[0].id, 1);  // nearer to the camera at z = 2
  EXPECT_EQ(list[1].id, 0);
  Scene back_only;
  back_only.gaussians = {scene.gaussians[0]};
  const double a_back = contributions(back_only, front_camera()).at(16, 16)[0].w;
  const double a_front = list[0].w;
  EXPECT_NEAR(list[1].w, a_back * (1.0 - a_front), 1e-12);
  EXPECT_NEAR(ci.final_transmittance(16, 16), (1.0 - a_front) * (1.0 - a_back), 1e-12);
  EXPECT_EQ(synth_masks(scene, front_camera()).at(16, 16), 2);
}

TEST(Render, OpacityIsClampedAndBehindCameraCulled) {
  Scene scene;
  scene.gaussians = {splat(Vec3::Zero(), 0.2, 1.0, 0), splat(Vec3(0, 0, 3), 0.2, 1.0, 1)};
  const ContributionImage ci = contributions(scene, front_camera());
  ASSERT_EQ(ci.at(16, 16).size(), 1u);
  EXPECT_LE(ci.at(16, 16)[0].w, kAlphaMax);
  EXPECT_TRUE(project(scene.gaussians[1], front_camera()).culled);
}

TEST(Render, ColorOverWhiteBackground) {
  Scene scene;
  scene.gaussians = {splat(Vec3::Zero(), 0.05, 0.5, 0)};
  scene.gaussians[0].c = Vec3(1, 0, 0);
  const RgbImage img = render_color(scene, front_camera());
  const Vec3 corner = img.pixels.front();
  EXPECT_EQ(corner, Vec3::Ones());
  const ContributionImage ci = contributions(scene, front_camera());
  const double w = ci.at(16, 16)[0].w;
  EXPECT_NEAR(img.pixels[16 * 32 + 16].y(), 1.0 - w, 1e-12);
  EXPECT_NEAR(img.pixels[16 * 32 + 16].x(), 1.0, 1e-12);
}

TEST(Render, CameraValidation) {
  Camera c = front_camera();
  c.up = Vec3(0, 0, 1);
  EXPECT_THROW(validate(c), Error);
  c = front_camera();
  c.look_at = c.position;
  EXPECT_THROW(validate(c), Error);
  c = front_camera();
  c.width = 0;
  EXPECT_THROW(validate(c), Error);
  EXPECT_NO_THROW(validate(Camera{}));
}

TEST(Render, CameraRingFramesTheScene) {
  const Scene scene = generate_scene(support::small_spec());
  const auto cams = camera_ring(scene, 6, 64, 48);
  ASSERT_EQ(cams.size(), 6u);
  const double d0 = (cams[0].position - cams[0].look_at).norm();
  for (const auto& c : cams) {
    EXPECT_NEAR((c.position - c.look_at).norm(), d0, 1e-12);
    Gaussian center;
    center.x = c.look_at;
    const Projection p = project(center, c);
    EXPECT_NEAR(p.mean.x(), 32.0, 1e-9);
    EXPECT_NEAR(p.mean.y(), 24.0, 1e-9);
    for (const auto& g : scene.gaussians) {
      const Projection q = project(g, c);
      ASSERT_FALSE(q.culled);
      EXPECT_TRUE(q.mean.x() >= 0 && q.mean.x() < 64 && q.mean.y() >= 0 && q.mean.y() < 48);
    }
  }
  EXPECT_THROW(camera_ring(scene, 0), Error);
}

TEST(Labels, CoarseLabelsRecoverGroundTruth) {
  const Scene scene = generate_scene(support::small_spec());
  const auto cams = camera_ring(scene, 8, 96, 96);
  std::vector<MaskImage> masks;
  for (const auto& c : cams) masks.push_back(synth_masks(scene, c));
  const CoarseLabels cl = coarse_mask_label(scene, cams, masks);
  const std::vector<int> truth = labels_of(scene);
  std::size_t correct = 0, considered = 0;
  for (std::size_t i = 0; i < scene.size(); ++i) {
    if (cl.flagged[i]) continue;
    ++considered;
    correct += cl.labels[i] == truth[i];
  }
  EXPECT_GE(static_cast<double>(correct), 0.99 * static_cast<double>(considered));
  EXPECT_GE(considered, scene.size() * 9 / 10);

  const auto back = labels_from_json(labels_to_json(cl), scene.size());
  EXPECT_EQ(back, cl.labels);
  EXPECT_THROW(labels_from_json(labels_to_json(cl), scene.size() + 1), Error);
  masks.pop_back();
  EXPECT_THROW(coarse_mask_label(scene, cams, masks), Error);
}

TEST(Labels, GaussianThatNeverContributesIsFlagged) {
  Scene scene;
  scene.gaussians = {splat(Vec3::Zero(), 0.05, 0.9, 0), splat(Vec3(0, 0, 5), 0.05, 0.9, 1)};
  const Camera cam = front_camera();
  const CoarseLabels cl = coarse_mask_label(scene, {cam}, {synth_masks(scene, cam)});
  EXPECT_FALSE(cl.flagged[0]);
  EXPECT_EQ(cl.labels[0], 1);
  EXPECT_TRUE(cl.flagged[1]);
  EXPECT_EQ(cl.labels[1], 0);
  EXPECT_EQ(cl.flagged_count(), 1u);
}

TEST(Images, PgmRoundTripAndErrors) {
  support::TempDir dir("render");
  MaskImage m{5, 3, {0, 1, 2, 3, 0, 0, 0, 7, 7, 0, 1, 1, 1, 1, 255}};
  write_pgm(m, dir.file("m.pgm"));
  EXPECT_EQ(read_pgm(dir.file("m.pgm")), m);

  std::ofstream(dir.file("bad.pgm")) << "P2\n1 1\n255\n0\n";
  EXPECT_THROW(read_pgm(dir.file("bad.pgm")), Error);
  std::ofstream(dir.file("short.pgm"), std::ios::binary) << "P5\n4 4\n255\n" << std::string(3, '\0');
  try {
    read_pgm(dir.file("short.pgm"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::parse);
  }
  EXPECT_THROW(read_pgm(dir.file("missing.pgm")), Error);

  const RgbImage img{2, 1, {Vec3(1, 0, 0), Vec3(0.5, 2.0, -1.0)}};
  const std::string ppm = encode_ppm(img);
  EXPECT_EQ(ppm.substr(0, 11), "P6\n2 1\n255\n");
  EXPECT_EQ(static_cast<unsigned char>(ppm[11]), 255);
  EXPECT_EQ(static_cast<unsigned char>(ppm[14]), 128);
  EXPECT_EQ(static_cast<unsigned char>(ppm[15]), 255);
  EXPECT_EQ(static_cast<unsigned char>(ppm[16]), 0);
}

TEST(Images, SynthMasksNeedLabels) {
  Scene scene;
  scene.gaussians = {splat(Vec3::Zero(), 0.05, 0.9, 0)};
  scene.gaussians[0].label.reset();
  EXPECT_THROW(synth_masks(scene, front_camera()), Error);
}
