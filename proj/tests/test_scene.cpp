#include <gtest/gtest.h>

#include <algorithm>
#include <map>

#include "mishape/scene.hpp"
#include "support.hpp"

using namespace mishape;

TEST(Scene, CountsFollowSpec) {
  SceneSpec spec;
  spec.seed = 7;
  spec.objects = {{Primitive::sphere_shell, Vec3(-0.5, 0, 0), 0.2, 500, 0.8, 0.9, Vec3(1, 0, 0)},
                  {Primitive::sphere_shell, Vec3(0.5, 0, 0), 0.2, 500, 0.8, 0.9, Vec3(0, 1, 0)}};
  const Scene s = generate_scene(spec);
  ASSERT_EQ(s.size(), 1000u);
  std::map<int, int> counts;
  for (const auto& g : s.gaussians) ++counts[*g.label];
  EXPECT_EQ(counts[1], 500);
  EXPECT_EQ(counts[2], 500);
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(s.gaussians[i].id, static_cast<int>(i));
}

TEST(Scene, SameSeedSameScene) {
  EXPECT_EQ(generate_scene(default_scene_spec()), generate_scene(default_scene_spec()));
  EXPECT_NE(generate_scene(default_scene_spec(7)), generate_scene(default_scene_spec(8)));
}

TEST(Scene, EntangledObjectsInterpenetrate) {
  const SceneSpec spec = entangled_scene_spec();
  const Scene s = generate_scene(spec);
  // Brute-force scan: some Gaussian of object 1 lies closer to object 2's
  // center than object 2's own extent, and the centroids sit closer than
  // the sum of extents.
  Vec3 c1 = Vec3::Zero(), c2 = Vec3::Zero();
  int n1 = 0, n2 = 0;
  for (const auto& g : s.gaussians) {
    if (*g.label == 1) c1 += g.x, ++n1;
    else c2 += g.x, ++n2;
  }
  c1 /= n1;
  c2 /= n2;
  EXPECT_LT((c1 - c2).norm(), spec.objects[0].extent + spec.objects[1].extent);
  double closest = 1e9;
  for (const auto& a : s.gaussians)
    for (const auto& b : s.gaussians)
      if (*a.label != *b.label) closest = std::min(closest, (a.x - b.x).norm());
  EXPECT_LT(closest, 0.02);
}

TEST(Scene, RejectsOverlapWithPositiveSeparation) {
  SceneSpec spec = entangled_scene_spec();
  spec.separation = 0.05;
  try {
    generate_scene(spec);
    FAIL() << "expected a generation error";
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::generation);
  }
}

TEST(Scene, JsonRoundTripIsBitExact) {
  const Scene s = generate_scene(support::small_spec());
  const Scene back = scene_from_json(nlohmann::json::parse(scene_to_json(s).dump()));
  EXPECT_EQ(s, back);
  support::TempDir dir("scene");
  save_scene(s, dir.file("s.json"));
  EXPECT_EQ(load_scene(dir.file("s.json")), s);
}

TEST(Scene, ValidationNamesTheOffendingField) {
  nlohmann::json j = scene_to_json(generate_scene(support::small_spec()));
  j["gaussians"][3]["q"] = {0.0, 0.0, 0.0, 0.0};
  try {
    scene_from_json(j);
    FAIL() << "expected a validation error";
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::validation);
    EXPECT_NE(e.context().find("3"), std::string::npos);
  }
  nlohmann::json k = scene_to_json(generate_scene(support::small_spec()));
  k["gaussians"][0].erase("x");
  EXPECT_THROW(scene_from_json(k), Error);
}

TEST(Scene, MissingFileIsIoError) {
  try {
    load_scene("/nonexistent/scene.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::io);
  }
}

TEST(Scene, SpecJsonRoundTrip) {
  const SceneSpec spec = entangled_scene_spec();
  const SceneSpec back = spec_from_json(spec_to_json(spec));
  EXPECT_EQ(generate_scene(spec), generate_scene(back));
  EXPECT_EQ(spec_from_json(nlohmann::json::object()).objects.size(), 3u);
  EXPECT_THROW(spec_from_json({{"objects", {{{"primitive", "cone"}}}}}), Error);
}

TEST(Scene, KnnMatchesBruteForce) {
  const Scene s = generate_scene(support::small_spec());
  const int k = 8;
  const NeighborTable table = knn(s, k);
  for (std::size_t i = 0; i < s.size(); ++i) {
    std::vector<std::pair<double, int>> all;
    for (std::size_t j = 0; j < s.size(); ++j)
      if (j != i) all.push_back({(s.gaussians[i].x - s.gaussians[j].x).squaredNorm(), static_cast<int>(j)});
    std::sort(all.begin(), all.end());
    ASSERT_EQ(table[i].size(), static_cast<std::size_t>(k));
    for (int m = 0; m < k; ++m) EXPECT_EQ(table[i][m], all[m].second) << "point " << i;
  }
}

TEST(Scene, KnnTiesBreakById) {
  Scene s;
  for (int i = 0; i < 5; ++i) {
    Gaussian g;
    g.id = i;
    g.label = 1;
    s.gaussians.push_back(g);
  }
  s.gaussians[0].x = Vec3(0, 0, 0);
  s.gaussians[1].x = Vec3(1, 0, 0);
  s.gaussians[2].x = Vec3(-1, 0, 0);
  s.gaussians[3].x = Vec3(0, 1, 0);
  s.gaussians[4].x = Vec3(5, 0, 0);
  const NeighborTable t = knn(s, 3);
  EXPECT_EQ(t[0], (std::vector<int>{1, 2, 3}));
  EXPECT_THROW(knn(s, 5), Error);
  EXPECT_THROW(knn(s, 0), Error);
}

TEST(Scene, DisplacementMovesAndRenormalises) {
  Scene s = generate_scene(support::small_spec());
  DisplacementField d(s.size());
  d[2].dx = Vec3(0.1, 0, 0);
  d[2].dq = Vec4(0.5, 0, 0, 0);
  d[2].ds = Vec3::Constant(-1.0);
  const Scene m = apply_displacement(s, d);
  EXPECT_FALSE(m.canonical);
  EXPECT_EQ(m.gaussians[2].x, s.gaussians[2].x + Vec3(0.1, 0, 0));
  EXPECT_NEAR(m.gaussians[2].q.norm(), 1.0, 1e-15);
  EXPECT_EQ(m.gaussians[2].s, Vec3::Constant(kMinScale));
  EXPECT_EQ(m.gaussians[5], s.gaussians[5]);
  EXPECT_THROW(apply_displacement(s, DisplacementField(3)), Error);
}
