#include <gtest/gtest.h>

#include <cmath>

#include "mishape/verification.hpp"
#include "support.hpp"

using namespace mishape;

namespace {

struct World {
  Scene scene = generate_scene(support::small_spec());
  std::vector<Vec3> xs = positions(scene);
  std::vector<int> labels = labels_of(scene);
  MotionNet net = with_random_head(init(support::small_config(16)), 2);
};

}  // namespace

TEST(MutualInformation, FromCosine) {
  EXPECT_EQ(mi_from_cos(0.0), 0.0);
  EXPECT_NEAR(mi_from_cos(0.8), std::log(1.0 / 0.6), 1e-15);
  EXPECT_NEAR(mi_from_cos(0.8), 0.51083, 1e-5);
  EXPECT_EQ(mi_from_cos(-0.8), mi_from_cos(0.8));
  double prev = 0.0;
  for (double c = 0.05; c < 1.0; c += 0.05) {
    EXPECT_GT(mi_from_cos(c), prev);
    prev = mi_from_cos(c);
  }
  EXPECT_TRUE(std::isinf(mi_from_cos(1.0)));
  EXPECT_TRUE(std::isinf(mi_from_cos(-1.2)));
}

TEST(Report, EntriesAndExitCode) {
  EXPECT_TRUE(make_entry("a", 0.01, "<=", 0.05, 1).pass);
  EXPECT_FALSE(make_entry("a", 0.06, "<=", 0.05, 1).pass);
  EXPECT_TRUE(make_entry("a", 0.95, ">=", 0.9, 1).pass);
  EXPECT_FALSE(make_entry("a", std::nan(""), "<=", 0.05, 1).pass);
  EXPECT_TRUE(make_entry("a", 0.06, "<=", 0.05, 1, true).pass);
  EXPECT_FALSE(make_entry("a", 0.01, "<=", 0.05, 1, true).pass);

  VerifyReport rep;
  rep.checks.push_back(make_entry("z", 0.01, "<=", 0.05, 3));
  rep.checks.push_back(skipped_entry("m", "nothing to do"));
  rep.checks.push_back(make_entry("b.control", 0.01, "<=", 0.05, 3, true));
  EXPECT_TRUE(rep.passed());
  EXPECT_EQ(rep.exit_code(), 0);
  rep.sort();
  EXPECT_EQ(rep.checks.front().name, "b.control");
  const auto j = rep.to_json();
  EXPECT_TRUE(j["checks"][0]["negative_control"].get<bool>());
  EXPECT_FALSE(j["checks"][0]["pass"].get<bool>());
  EXPECT_EQ(j["checks"][1]["reason"], "nothing to do");
  EXPECT_NE(rep.to_table().find("SKIP"), std::string::npos);
  EXPECT_NE(rep.to_table().find("not <= 0.05"), std::string::npos);
  rep.checks.push_back(make_entry("y", 0.2, "<=", 0.05, 3));
  EXPECT_EQ(rep.exit_code(), 1);
  ASSERT_NE(rep.find("y"), nullptr);
  EXPECT_EQ(rep.find("nope"), nullptr);
}

TEST(Factorization, HoldsOnRandomNets) {
  const CheckEntry e = check_factorization(4, 3, 16, 7);
  EXPECT_TRUE(e.pass) << e.statistic;
  EXPECT_EQ(e.samples, 4 * 3 * 2);
  EXPECT_LT(e.statistic, kFactorizationTolerance);
  EXPECT_THROW(check_factorization(1, 1, 64), Error);

  const MotionNet zero = init(support::small_config(12));
  EXPECT_EQ(factorization_error(zero, Vec3(0.1, 0.2, 0.3), output_axis(0)), 0.0);
}

TEST(Cosines, ProbeMatchesExplicitJacobians) {
  World w;
  const std::vector<Vec3> xs(w.xs.begin(), w.xs.begin() + 5);
  const ProbeCosines pc = probe_cosines(w.net, xs);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) {
      const JacobianRecord ri = jacobian_record(w.net, xs[i]), rj = jacobian_record(w.net, xs[j]);
      EXPECT_NEAR(pc.activation(i, j), ri.a.dot(rj.a) / (ri.a.norm() * rj.a.norm()), 1e-12);
      // <G_i a_i^T, G_j a_j^T> over every output and weight entry.
      double dot = 0, ni = 0, nj = 0;
      for (Eigen::Index o = 0; o < ri.G.rows(); ++o)
        for (Eigen::Index r = 0; r < ri.G.cols(); ++r)
          for (Eigen::Index c = 0; c < ri.a.size(); ++c) {
            const double a = ri.G(o, r) * ri.a[c], b = rj.G(o, r) * rj.a[c];
            dot += a * b;
            ni += a * a;
            nj += b * b;
          }
      EXPECT_NEAR(pc.full(i, j), dot / std::sqrt(ni * nj), 1e-12);
    }
}

TEST(Cosines, StatsByHand) {
  Matrix cos(4, 4);
  cos << 1, 0.9, -0.2, 0.5,  //
      0.9, 1, 0.1, 0.3,      //
      -0.2, 0.1, 1, 0.7,     //
      0.5, 0.3, 0.7, 1;
  const CosineStats s = cosine_stats(cos, {1, 1, 2, 0});
  EXPECT_EQ(s.intra_pairs, 1);
  EXPECT_EQ(s.inter_pairs, 2);
  EXPECT_DOUBLE_EQ(s.intra_mean, 0.9);
  EXPECT_DOUBLE_EQ(s.inter_mean, 0.15);
  EXPECT_DOUBLE_EQ(s.inter_max_abs, 0.2);
}

TEST(PathConsistency, ZeroStepsHasNoDrift) {
  World w;
  const auto probe = sample_probe(w.labels, 30, 0);
  const CheckEntry e = check_path_consistency(w.net, w.xs, w.labels, probe, {5}, 0);
  EXPECT_EQ(e.statistic, 0.0);
  EXPECT_TRUE(e.pass);
  const DriftResult r = cosine_drift(w.net, w.xs, w.labels, probe, {5}, 2, 0.05, output_axis(2));
  ASSERT_EQ(r.max_drift.size(), 3u);
  EXPECT_EQ(r.max_drift[0], 0.0);
  EXPECT_GT(r.max_drift[2], 0.0);
}

TEST(Compositionality, ZeroSecondStepMatchesFirst) {
  World w;
  Perturbation p1 = make_perturbation(w.net, w.xs, {3}, output_axis(2), 0.2);
  Perturbation p2 = make_perturbation(w.net, w.xs, {90}, output_axis(2), 0.0);
  EXPECT_LT(composition_error(w.net, w.xs, w.scene, p1, p2), 1e-12);
  p2.scale = 0.2;
  EXPECT_GT(composition_error(w.net, w.xs, w.scene, p1, p2), 0.0);
}

TEST(Compositionality, SameObjectPairsAreSkipped) {
  World w;
  const CheckEntry e = check_compositionality(w.net, w.scene, w.labels, {{0, 1}, {2, 3}});
  EXPECT_TRUE(e.skipped);
  const CheckEntry f = check_compositionality(w.net, w.scene, w.labels, {{0, 1}, {0, 100}});
  EXPECT_FALSE(f.skipped);
  EXPECT_EQ(f.samples, 1);
}

TEST(Prompts, CentralAndAdjacent) {
  World w;
  const auto prompts = central_prompts(w.scene, w.labels);
  ASSERT_EQ(prompts.size(), 3u);
  for (int l = 1; l <= 3; ++l) {
    Vec3 c = Vec3::Zero();
    int n = 0;
    for (std::size_t i = 0; i < w.xs.size(); ++i)
      if (w.labels[i] == l) {
        c += w.xs[i];
        ++n;
      }
    c /= n;
    const int p = prompts[l - 1];
    EXPECT_EQ(w.labels[p], l);
    for (std::size_t i = 0; i < w.xs.size(); ++i)
      if (w.labels[i] == l) {
        EXPECT_LE((w.xs[p] - c).norm(), (w.xs[i] - c).norm());
      }
  }
  EXPECT_EQ(adjacent_pairs({4, 5, 6}), (std::vector<std::pair<int, int>>{{4, 5}, {5, 6}, {4, 6}}));
  EXPECT_EQ(adjacent_pairs({4, 5}), (std::vector<std::pair<int, int>>{{4, 5}}));
  EXPECT_TRUE(adjacent_pairs({4}).empty());
}

TEST(Run, SelectedChecksAndControls) {
  World w;
  VerifyOptions opt;
  opt.checks = {"wellshaped", "path_consistency"};
  opt.probe_size = 40;
  opt.steps = 1;
  const VerifyReport rep = run_verification(w.net, w.scene, w.labels, opt);
  EXPECT_NE(rep.find("wellshaped.intra"), nullptr);
  EXPECT_NE(rep.find("wellshaped.control.inter"), nullptr);
  ASSERT_NE(rep.find("path_consistency.control"), nullptr);
  EXPECT_TRUE(rep.find("path_consistency.control")->skipped);
  EXPECT_EQ(rep.find("factorization"), nullptr);
  EXPECT_TRUE(std::is_sorted(rep.checks.begin(), rep.checks.end(),
                             [](const CheckEntry& a, const CheckEntry& b) { return a.name < b.name; }));

  const VerifyReport with_base = run_verification(w.net, w.scene, w.labels, opt, &w.net);
  EXPECT_FALSE(with_base.find("path_consistency.control")->skipped);
  EXPECT_TRUE(with_base.find("path_consistency.control")->expect_fail);

  opt.checks = {"bogus"};
  EXPECT_THROW(run_verification(w.net, w.scene, w.labels, opt), Error);
  opt.checks = {"wellshaped"};
  EXPECT_THROW(run_verification(w.net, w.scene, std::vector<int>(3, 1), opt), Error);
}
