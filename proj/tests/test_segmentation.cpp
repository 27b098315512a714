#include <gtest/gtest.h>

#include <cmath>

#include "mishape/segmentation.hpp"
#include "mishape/shaping.hpp"
#include "support.hpp"

using namespace mishape;

namespace {

MaskImage grid(int w, int h, std::vector<int> labels) { return {w, h, std::move(labels)}; }

}  // namespace

TEST(Metrics, IdIou) {
  EXPECT_DOUBLE_EQ(iou_ids({1, 2, 3}, {2, 3, 4, 5}), 2.0 / 5.0);
  EXPECT_DOUBLE_EQ(iou_ids({1, 1, 2}, {1, 2}), 1.0);
  EXPECT_DOUBLE_EQ(iou_ids({}, {}), 1.0);
  EXPECT_DOUBLE_EQ(iou_ids({1}, {}), 0.0);
}

TEST(Metrics, MaskIouByHand) {
  // pred: label 1 on 3 pixels, label 2 on 1.  gt: label 1 on 2, label 2 on 2.
  const MaskImage pred = grid(3, 2, {1, 1, 1, 2, 0, 0});
  const MaskImage gt = grid(3, 2, {1, 1, 0, 2, 2, 0});
  EXPECT_DOUBLE_EQ(label_iou(pred, gt, 1), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(label_iou(pred, gt, 2), 1.0 / 2.0);
  EXPECT_DOUBLE_EQ(miou(pred, gt), (2.0 / 3.0 + 0.5) / 2.0);
  EXPECT_DOUBLE_EQ(miou(grid(2, 1, {0, 0}), grid(2, 1, {0, 0})), 1.0);
  EXPECT_THROW(miou(pred, grid(2, 3, gt.labels)), Error);
}

TEST(Metrics, BoundaryIouIgnoresInteriors) {
  // Two 9x9 squares in a 20x20 image, offset by one column.
  MaskImage a{20, 20, std::vector<int>(400, 0)}, b = a;
  for (int y = 5; y < 14; ++y)
    for (int x = 5; x < 14; ++x) {
      a.labels[y * 20 + x] = 1;
      b.labels[y * 20 + x + 1] = 1;
    }
  // r = 0: the band is the union of both inner boundaries (32 pixels each).
  // Boundary of a: x in {5,13} or y in {5,13}; of b: x in {6,14} or y in {5,13}.
  std::size_t inter = 0, uni = 0;
  auto on_a = [](int x, int y) { return x >= 5 && x < 14 && y >= 5 && y < 14 && (x == 5 || x == 13 || y == 5 || y == 13); };
  auto on_b = [](int x, int y) { return x >= 6 && x < 15 && y >= 5 && y < 14 && (x == 6 || x == 14 || y == 5 || y == 13); };
  auto in_a = [](int x, int y) { return x >= 5 && x < 14 && y >= 5 && y < 14; };
  auto in_b = [](int x, int y) { return x >= 6 && x < 15 && y >= 5 && y < 14; };
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 20; ++x) {
      if (!on_a(x, y) && !on_b(x, y)) continue;
      inter += in_a(x, y) && in_b(x, y);
      uni += in_a(x, y) || in_b(x, y);
    }
  EXPECT_DOUBLE_EQ(mbiou(a, b, 0), static_cast<double>(inter) / static_cast<double>(uni));
  EXPECT_LT(mbiou(a, b, 0), miou(a, b));
  EXPECT_DOUBLE_EQ(mbiou(a, a, 2), 1.0);
  EXPECT_THROW(mbiou(a, b, -1), Error);
  EXPECT_EQ(default_boundary_radius(128, 128), 1);
  EXPECT_EQ(default_boundary_radius(800, 600), 5);
}

TEST(Masks, ProjectedSelectionAndBinaryMask) {
  const Scene scene = generate_scene(support::small_spec());
  const auto cams = camera_ring(scene, 4, 64, 64);
  std::vector<int> all;
  for (const auto& g : scene.gaussians)
    if (*g.label == 2) all.push_back(g.id);
  for (const auto& cam : cams) {
    const MaskImage gt = binary_mask(synth_masks(scene, cam), 2);
    const MaskImage proj = project_mask(scene, all, cam, 2);
    EXPECT_GT(miou(proj, gt), 0.95);
    EXPECT_EQ(project_mask(scene, {}, cam, 2).labels, std::vector<int>(64 * 64, 0));
  }
  EXPECT_THROW(project_mask(scene, {-1}, cams[0]), Error);
  const MaskImage m = binary_mask(grid(3, 1, {1, 2, 3}), 2);
  EXPECT_EQ(m.labels, (std::vector<int>{0, 2, 0}));
}

TEST(Relevance, MatchesExplicitFlattenedCosine) {
  const Scene scene = generate_scene(support::small_spec());
  const auto xs = positions(scene);
  MotionNet net = init(support::small_config(16));
  warm_start_head(net, xs, 1);
  const std::vector<int> seeds = {4, 9};
  const RelevanceMap r = relevance(net, xs, seeds);
  // Seed direction: mean of the flattened full Jacobians.
  auto flat = [&](int id) {
    const JacobianRecord rec = jacobian_record(net, xs[id]);
    Vector v(rec.G.size() * rec.a.size());
    Eigen::Index k = 0;
    for (Eigen::Index o = 0; o < rec.G.rows(); ++o)
      for (Eigen::Index row = 0; row < rec.G.cols(); ++row)
        for (Eigen::Index c = 0; c < rec.a.size(); ++c) v[k++] = rec.G(o, row) * rec.a[c];
    return v;
  };
  const Vector seed = 0.5 * (flat(4) + flat(9));
  for (int id : {0, 4, 70, 150}) {
    const Vector j = flat(id);
    EXPECT_NEAR(r.scores[id], j.dot(seed) / (j.norm() * seed.norm()), 1e-10) << id;
  }
  EXPECT_EQ(select_by_relevance(r, 2.0).size(), 0u);
  EXPECT_EQ(select_by_relevance(r, -2.0).size(), xs.size() - static_cast<std::size_t>(std::count(r.flagged.begin(), r.flagged.end(), true)));
}

TEST(Segment, ThresholdAndSelection) {
  const Scene scene = generate_scene(support::small_spec());
  const auto xs = positions(scene);
  MotionNet net = init(support::small_config(16));
  warm_start_head(net, xs, 1);
  SegmentOptions opt;
  opt.tau = 0.4;
  const SegmentResult res = segment_by_perturbation(net, xs, {10}, opt);
  const double mx = *std::max_element(res.magnitude.begin(), res.magnitude.end());
  EXPECT_NEAR(mx, opt.auto_distance, 1e-6);
  EXPECT_DOUBLE_EQ(res.threshold, 0.4 * mx);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const bool in = std::find(res.selected.begin(), res.selected.end(), static_cast<int>(i)) != res.selected.end();
    EXPECT_EQ(in, res.magnitude[i] >= res.threshold);
  }
  opt.tau = 0.0;
  EXPECT_THROW(segment_by_perturbation(net, xs, {10}, opt), Error);
  opt.tau = 1.5;
  EXPECT_THROW(segment_by_perturbation(net, xs, {10}, opt), Error);
}

TEST(Segment, ReportFields) {
  const std::vector<ObjectSegmentation> objs = {{1, {3}, 0.9, 0.8, 0.6, 50}, {2, {70}, 1.0, 1.0, 0.8, 60}};
  const auto j = segmentation_report(objs, 0.5, 0.2);
  EXPECT_DOUBLE_EQ(j["miou"].get<double>(), 0.9);
  EXPECT_DOUBLE_EQ(j["mbiou"].get<double>(), 0.7);
  EXPECT_TRUE(j["entangled"].get<bool>());
  EXPECT_EQ(j["per_object_iou"]["2"]["selected"], 60);
  EXPECT_FALSE(segmentation_report(objs, 0.5).contains("entangled"));
}
