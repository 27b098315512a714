#pragma once

// Numerical checks of the shaped network: Jacobian factorisation against
// finite differences, cosine bands, drift of the cosine structure along a
// perturbation path, and additivity of perturbations on distinct objects.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mishape/error.hpp"
#include "mishape/motion_net.hpp"
#include "mishape/perturbation.hpp"
#include "mishape/scene.hpp"
#include "mishape/shaping.hpp"

namespace mishape {

inline constexpr double kFactorizationTolerance = 1e-4;
inline constexpr double kIntraCosMin = 0.9;
inline constexpr double kInterCosMax = 0.1;
inline constexpr double kDriftTolerance = 0.05;
inline constexpr double kCompositionTolerance = 0.05;
inline constexpr double kFiniteDifferenceStep = 1e-5;

/// log(1 / sqrt(1 - c^2)); +infinity once |c| reaches 1.
inline double mi_from_cos(double c) {
  if (!(std::abs(c) < 1.0)) return std::numeric_limits<double>::infinity();
  return -0.5 * std::log1p(-c * c);
}

struct CheckEntry {
  std::string name;
  double statistic = 0.0;
  double tolerance = 0.0;
  std::string relation = "<=";  // statistic relation tolerance must hold
  bool pass = false;
  long samples = 0;
  bool skipped = false;
  std::string reason;
  bool expect_fail = false;  // negative control: passes when the bound is violated
  nlohmann::json details = nlohmann::json::object();
};

inline bool holds(double stat, const std::string& relation, double tol) {
  if (!std::isfinite(stat)) return false;
  return relation == ">=" ? stat >= tol : stat <= tol;
}

inline CheckEntry make_entry(std::string name, double stat, std::string relation, double tol, long samples,
                             bool expect_fail = false) {
  CheckEntry e;
  e.name = std::move(name);
  e.statistic = stat;
  e.relation = std::move(relation);
  e.tolerance = tol;
  e.samples = samples;
  e.expect_fail = expect_fail;
  const bool ok = holds(stat, e.relation, tol);
  e.pass = expect_fail ? !ok : ok;
  return e;
}

inline CheckEntry skipped_entry(std::string name, std::string reason) {
  CheckEntry e;
  e.name = std::move(name);
  e.skipped = true;
  e.reason = std::move(reason);
  return e;
}

struct VerifyReport {
  std::vector<CheckEntry> checks;

  /// Negative controls are reported but do not decide the outcome: they
  /// judge the tolerance, not the checkpoint.
  bool passed() const {
    return std::all_of(checks.begin(), checks.end(),
                       [](const CheckEntry& c) { return c.skipped || c.expect_fail || c.pass; });
  }

  const CheckEntry* find(const std::string& name) const {
    for (const auto& c : checks)
      if (c.name == name) return &c;
    return nullptr;
  }
  int exit_code() const { return passed() ? 0 : 1; }

  void sort() {
    std::stable_sort(checks.begin(), checks.end(), [](const CheckEntry& a, const CheckEntry& b) { return a.name < b.name; });
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["version"] = 1;
    j["passed"] = passed();
    auto arr = nlohmann::json::array();
    for (const auto& c : checks) {
      nlohmann::json e{{"name", c.name}, {"skipped", c.skipped}};
      if (c.skipped) {
        e["reason"] = c.reason;
      } else {
        e["statistic"] = c.statistic;
        e["relation"] = c.relation;
        e["tolerance"] = c.tolerance;
        e["pass"] = c.pass;
        e["samples"] = c.samples;
        e["negative_control"] = c.expect_fail;
        if (!c.details.empty()) e["details"] = c.details;
      }
      arr.push_back(e);
    }
    j["checks"] = arr;
    return j;
  }

  std::string to_table() const {
    std::ostringstream out;
    out << std::left << std::setw(34) << "check" << std::setw(8) << "result" << std::setw(16) << "statistic"
        << std::setw(14) << "bound" << "samples\n";
    for (const auto& c : checks) {
      out << std::setw(34) << c.name;
      if (c.skipped) {
        out << std::setw(8) << "SKIP" << c.reason << '\n';
        continue;
      }
      std::ostringstream stat, bound;
      stat << std::setprecision(6) << c.statistic;
      bound << (c.expect_fail ? "not " : "") << c.relation << ' ' << c.tolerance;
      out << std::setw(8) << (c.pass ? "PASS" : "FAIL") << std::setw(16) << stat.str() << std::setw(14) << bound.str()
          << c.samples << '\n';
    }
    return out.str();
  }
};

// ---------------------------------------------------------------------------
// Factorisation.

namespace detail {

/// Smallest |h| over layers l..depth for one input; small values mean a
/// finite-difference step may cross a ReLU kink.
inline double kink_margin(const MotionNet& net, const Vec3& x) {
  const ForwardCache cache = forward(net, {x});
  double m = std::numeric_limits<double>::infinity();
  for (int layer = net.config.shaping_layer; layer <= net.config.depth; ++layer)
    m = std::min(m, cache.pre[layer - 1].col(0).cwiseAbs().minCoeff());
  return m;
}

inline double output_along(const MotionNet& net, const Vec3& x, const Vector& u) {
  return u.dot(forward(net, {x}).output.col(0));
}

}  // namespace detail

/// Central finite differences of u^T Phi(x) over every entry of W^(l).
/// Returns the largest entry-wise relative error, with the denominator
/// floored at 1e-6 of the largest analytic entry.
inline double factorization_error(const MotionNet& net, const Vec3& x, const Vector& u, double eps = kFiniteDifferenceStep) {
  const Matrix analytic = jacobian_phi(net, x, u);
  const double scale = analytic.cwiseAbs().maxCoeff();
  const double floor = std::max(scale * 1e-6, 1e-300);
  MotionNet probe = net;
  Matrix& W = probe.layers[probe.shaping_index()].W;
  double worst = 0.0;
  for (Eigen::Index c = 0; c < W.cols(); ++c)
    for (Eigen::Index r = 0; r < W.rows(); ++r) {
      const double keep = W(r, c);
      W(r, c) = keep + eps;
      const double up = detail::output_along(probe, x, u);
      W(r, c) = keep - eps;
      const double down = detail::output_along(probe, x, u);
      W(r, c) = keep;
      const double fd = (up - down) / (2.0 * eps);
      const double a = analytic(r, c);
      if (scale == 0.0) {
        worst = std::max(worst, std::abs(fd));
        continue;
      }
      worst = std::max(worst, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), floor}));
    }
  return worst;
}

/// Replaces the head with U(-sqrt(6/w), sqrt(6/w)) entries. Used for test
/// nets and for the unshaped negative controls.
inline MotionNet with_random_head(MotionNet net, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0xabcdefULL);
  Layer& head = net.layers.back();
  const double bound = std::sqrt(6.0 / net.config.width);
  for (Eigen::Index r = 0; r < head.W.rows(); ++r)
    for (Eigen::Index c = 0; c < head.W.cols(); ++c) head.W(r, c) = detail::uniform(rng, -bound, bound);
  return net;
}

/// A width-limited random network with a random (non-zero) head.
inline MotionNet random_test_net(int width, int shaping_layer, std::uint64_t seed) {
  NetConfig c;
  c.width = width;
  c.shaping_layer = shaping_layer;
  c.frequencies = 4;
  c.seed = seed;
  return with_random_head(init(c), seed);
}

inline Vector random_unit(int dim, std::mt19937_64& rng) {
  Vector u(dim);
  for (int i = 0; i < dim; ++i) u[i] = detail::normal(rng);
  return u.normalized();
}

/// nets x inputs random triples, each checked before and after a random
/// perturbation of the shaping layer.
inline CheckEntry check_factorization(int nets = 10, int inputs = 5, int width = 32, std::uint64_t seed = 1) {
  if (width > 32) fail(ErrorCategory::argument, "factorisation check runs on nets of width <= 32", "width");
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  long samples = 0, resampled = 0;
  for (int k = 0; k < nets; ++k) {
    const int layer = 1 + k % 4;
    MotionNet net = random_test_net(width, layer, seed * 1000 + static_cast<std::uint64_t>(k));
    Matrix noise(net.shaping_weight().rows(), net.shaping_weight().cols());
    for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = detail::normal(rng);
    const MotionNet moved = perturb_weights(net, noise / noise.norm(), 0.5);
    for (int s = 0; s < inputs; ++s) {
      for (const MotionNet* n : std::array<const MotionNet*, 2>{&net, &moved}) {
        Vec3 x;
        int tries = 0;
        do {
          x = Vec3(detail::uniform(rng, -1, 1), detail::uniform(rng, -1, 1), detail::uniform(rng, -1, 1));
          if (tries++ > 0) ++resampled;
        } while (detail::kink_margin(*n, x) < 1e-3 && tries < 100);
        const Vector u = random_unit(n->config.out_dim, rng);
        worst = std::max(worst, factorization_error(*n, x, u));
        ++samples;
      }
    }
  }
  CheckEntry e = make_entry("factorization", worst, "<=", kFactorizationTolerance, samples);
  e.details = {{"width", width}, {"epsilon", kFiniteDifferenceStep}, {"kink_resamples", resampled}};
  return e;
}

// ---------------------------------------------------------------------------
// Cosine structure.

struct CosineStats {
  double intra_mean = 0, intra_min = 1, inter_mean = 0, inter_max_abs = 0;
  long intra_pairs = 0, inter_pairs = 0;
};

/// Pairwise cosine matrices of a probe set: activation (dh) and full (dPhi).
struct ProbeCosines {
  Matrix activation;
  Matrix full;
};

inline ProbeCosines probe_cosines(const MotionNet& net, const std::vector<Vec3>& xs) {
  const JacobianBatch jb = jacobian_batch(net, xs);
  const Eigen::Index n = jb.size();
  const Vector an = jb.A.colwise().norm().transpose();
  const Vector gn = jb.G.colwise().norm().transpose();
  const Matrix ga = jb.A.transpose() * jb.A;
  const Matrix gg = jb.G.transpose() * jb.G;
  ProbeCosines pc{Matrix::Zero(n, n), Matrix::Zero(n, n)};
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      const double da = an[i] * an[j];
      const double dg = gn[i] * gn[j];
      if (da > 0) pc.activation(i, j) = ga(i, j) / da;
      if (da > 0 && dg > 0) pc.full(i, j) = gg(i, j) * ga(i, j) / (dg * da);
    }
  return pc;
}

inline CosineStats cosine_stats(const Matrix& cos, const std::vector<int>& probe_labels) {
  CosineStats s;
  double intra = 0, inter = 0;
  for (std::size_t i = 0; i < probe_labels.size(); ++i) {
    if (probe_labels[i] == 0) continue;
    for (std::size_t j = i + 1; j < probe_labels.size(); ++j) {
      if (probe_labels[j] == 0) continue;
      const double c = cos(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      if (probe_labels[i] == probe_labels[j]) {
        intra += c;
        s.intra_min = std::min(s.intra_min, c);
        ++s.intra_pairs;
      } else {
        inter += std::abs(c);
        s.inter_max_abs = std::max(s.inter_max_abs, std::abs(c));
        ++s.inter_pairs;
      }
    }
  }
  if (s.intra_pairs) s.intra_mean = intra / static_cast<double>(s.intra_pairs);
  if (s.inter_pairs) s.inter_mean = inter / static_cast<double>(s.inter_pairs);
  return s;
}

inline nlohmann::json stats_json(const CosineStats& s) {
  return {{"intra_mean", s.intra_mean}, {"intra_min", s.intra_min}, {"inter_mean_abs", s.inter_mean},
          {"inter_max_abs", s.inter_max_abs}, {"intra_pairs", s.intra_pairs}, {"inter_pairs", s.inter_pairs}};
}

/// Intra/inter bands on cos(dh) over the probe. Produces two entries.
inline std::vector<CheckEntry> check_wellshaped(const MotionNet& net, const std::vector<Vec3>& inputs,
                                                const std::vector<int>& labels, const std::vector<int>& probe,
                                                const std::string& prefix = "wellshaped", bool expect_fail = false) {
  std::vector<Vec3> xs;
  std::vector<int> pl;
  for (int id : probe) {
    xs.push_back(inputs[id]);
    pl.push_back(labels[id]);
  }
  const ProbeCosines pc = probe_cosines(net, xs);
  const CosineStats act = cosine_stats(pc.activation, pl);
  const CosineStats full = cosine_stats(pc.full, pl);
  CheckEntry intra = make_entry(prefix + ".intra", act.intra_mean, ">=", kIntraCosMin, act.intra_pairs, expect_fail);
  CheckEntry inter = make_entry(prefix + ".inter", act.inter_mean, "<=", kInterCosMax, act.inter_pairs, expect_fail);
  intra.details = inter.details = {{"activation", stats_json(act)}, {"full_jacobian", stats_json(full)}};
  return {intra, inter};
}

// ---------------------------------------------------------------------------
// Path consistency.

struct DriftResult {
  std::vector<double> max_drift;      // per step, against step 0
  std::vector<double> inter_max_abs;  // per step, largest |cos| across objects
};

/// Runs d refresh perturbations on the prompt (auto-scaled to `distance`) and
/// tracks how far the full-Jacobian cosines of probe pairs move.
inline DriftResult cosine_drift(const MotionNet& net, const std::vector<Vec3>& inputs, const std::vector<int>& labels,
                                const std::vector<int>& probe, const std::vector<int>& prompt, int d, double distance,
                                const Vector& u) {
  std::vector<Vec3> xs;
  std::vector<int> pl;
  for (int id : probe) {
    xs.push_back(inputs[id]);
    pl.push_back(labels[id]);
  }
  const Matrix base = probe_cosines(net, xs).full;
  DriftResult out;
  out.max_drift.push_back(0.0);
  out.inter_max_abs.push_back(cosine_stats(base, pl).inter_max_abs);
  MotionNet cur = net;
  const std::vector<int> region = prompt_region(labels, prompt);
  std::optional<double> scale;
  for (int step = 0; step < d; ++step) {
    const Matrix n = perturbation_direction(cur, inputs, prompt, u);
    if (!scale) scale = auto_scale(cur, inputs, region, n, distance);
    cur = perturb_weights(cur, n, *scale);
    const Matrix now = probe_cosines(cur, xs).full;
    out.max_drift.push_back((now - base).cwiseAbs().maxCoeff());
    out.inter_max_abs.push_back(cosine_stats(now, pl).inter_max_abs);
  }
  return out;
}

inline CheckEntry check_path_consistency(const MotionNet& net, const std::vector<Vec3>& inputs,
                                         const std::vector<int>& labels, const std::vector<int>& probe,
                                         const std::vector<int>& prompt, int d = 3, double distance = 0.1,
                                         const Vector& u = output_axis(2), const std::string& name = "path_consistency",
                                         bool expect_fail = false) {
  if (d == 0) return make_entry(name, 0.0, "<=", kDriftTolerance, 0, expect_fail);
  const DriftResult r = cosine_drift(net, inputs, labels, probe, prompt, d, distance, u);
  const double worst = *std::max_element(r.max_drift.begin(), r.max_drift.end());
  const long pairs = static_cast<long>(probe.size() * (probe.size() - 1) / 2);
  CheckEntry e = make_entry(name, worst, "<=", kDriftTolerance, pairs * d, expect_fail);
  e.details = {{"steps", d}, {"max_drift_per_step", r.max_drift}, {"inter_max_abs_per_step", r.inter_max_abs},
               {"auto_scale_distance", distance}, {"prompt", prompt}};
  return e;
}

// ---------------------------------------------------------------------------
// Compositionality.

/// ||(f(n1) + f(n1 | n2)) - f(n1 + n2)|| / ||f(n1) + f(n1 | n2)||, with the
/// second sequential direction re-derived after the first step.
inline double composition_error(const MotionNet& net, const std::vector<Vec3>& inputs, const Scene& scene,
                                const Perturbation& p1, const Perturbation& p2) {
  const Trajectory seq = run_sequence(net, inputs, scene, {{p1, true}, {p2, true}});
  const DisplacementField total = field_sum(seq.steps[1].displacement, seq.steps[2].displacement);
  const Applied comp = apply_perturbation(net, inputs, scene, compose(p1, p2));
  const double denom = field_norm(total);
  if (!(denom > 0.0)) return 0.0;
  return field_norm(field_difference(total, comp.displacement)) / denom;
}

inline CheckEntry check_compositionality(const MotionNet& net, const Scene& scene, const std::vector<int>& labels,
                                         const std::vector<std::pair<int, int>>& prompt_pairs, double distance = 0.1,
                                         const Vector& u = output_axis(2), const std::string& name = "compositionality",
                                         bool expect_fail = false) {
  const std::vector<Vec3> inputs = positions(scene);
  double worst = 0.0;
  long used = 0;
  nlohmann::json per = nlohmann::json::array();
  for (auto [a, b] : prompt_pairs) {
    if (labels[a] == labels[b]) continue;
    Perturbation p1 = make_perturbation(net, inputs, {a}, u, 0.0);
    p1.scale = auto_scale(net, inputs, prompt_region(labels, {a}), p1.n, distance);
    Perturbation p2 = make_perturbation(net, inputs, {b}, u, 0.0);
    p2.scale = auto_scale(net, inputs, prompt_region(labels, {b}), p2.n, distance);
    const double err = composition_error(net, inputs, scene, p1, p2);
    per.push_back({{"prompts", {a, b}}, {"relative_error", err}});
    worst = std::max(worst, err);
    ++used;
  }
  if (used == 0) return skipped_entry(name, "every prompt pair lies on a single object");
  CheckEntry e = make_entry(name, worst, "<=", kCompositionTolerance, used, expect_fail);
  e.details = {{"pairs", per}, {"auto_scale_distance", distance}};
  return e;
}

// ---------------------------------------------------------------------------
// Helpers for choosing prompts.

/// Per label, the Gaussian closest to the label's centroid (ties by id).
inline std::vector<int> central_prompts(const Scene& scene, const std::vector<int>& labels) {
  if (labels.size() != scene.size()) fail(ErrorCategory::argument, "one label per Gaussian required", "labels");
  const int max_label = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end());
  std::vector<Vec3> sum(static_cast<std::size_t>(max_label) + 1, Vec3::Zero());
  std::vector<int> count(sum.size(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    sum[labels[i]] += scene.gaussians[i].x;
    ++count[labels[i]];
  }
  std::vector<int> out;
  for (int l = 1; l <= max_label; ++l) {
    if (count[l] == 0) continue;
    const Vec3 c = sum[l] / count[l];
    int best = -1;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == l && (scene.gaussians[i].x - c).norm() < bd) {
        bd = (scene.gaussians[i].x - c).norm();
        best = static_cast<int>(i);
      }
    out.push_back(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Full run.

struct VerifyOptions {
  std::vector<std::string> checks = {"factorization", "wellshaped", "path_consistency", "compositionality"};
  int probe_size = 512;
  std::uint64_t probe_seed = 0;
  int steps = 3;
  double distance = 0.1;
  bool controls = true;
};

inline bool wants(const VerifyOptions& o, const std::string& name) {
  return std::find(o.checks.begin(), o.checks.end(), name) != o.checks.end();
}

inline std::vector<std::pair<int, int>> adjacent_pairs(const std::vector<int>& prompts) {
  std::vector<std::pair<int, int>> out;
  for (std::size_t i = 0; i + 1 < prompts.size(); ++i) out.emplace_back(prompts[i], prompts[i + 1]);
  if (prompts.size() > 2) out.emplace_back(prompts.front(), prompts.back());
  return out;
}

/// `baseline` is a net shaped with full-Jacobian cosines; without it the
/// path-consistency control is reported as skipped.
inline VerifyReport run_verification(const MotionNet& net, const Scene& scene, const std::vector<int>& labels,
                                     const VerifyOptions& opt = {}, const MotionNet* baseline = nullptr) {
  static const std::vector<std::string> known = {"factorization", "wellshaped", "path_consistency", "compositionality"};
  for (const auto& c : opt.checks)
    if (std::find(known.begin(), known.end(), c) == known.end()) fail(ErrorCategory::argument, "unknown check '" + c + "'", "checks");
  if (labels.size() != scene.size()) fail(ErrorCategory::argument, "one label per Gaussian required", "labels");
  if (net.layers.empty()) fail(ErrorCategory::validation, "empty network", "checkpoint");
  const std::vector<Vec3> inputs = positions(scene);
  const std::vector<int> probe = sample_probe(labels, opt.probe_size, opt.probe_seed);
  const std::vector<int> prompts = central_prompts(scene, labels);
  const MotionNet unshaped = with_random_head(init(net.config), net.config.seed);
  VerifyReport rep;

  if (wants(opt, "factorization")) rep.checks.push_back(check_factorization());

  if (wants(opt, "wellshaped")) {
    for (auto& e : check_wellshaped(net, inputs, labels, probe)) rep.checks.push_back(std::move(e));
    if (opt.controls)
      for (auto& e : check_wellshaped(unshaped, inputs, labels, probe, "wellshaped.control", true))
        rep.checks.push_back(std::move(e));
  }

  if (wants(opt, "path_consistency")) {
    if (prompts.empty()) {
      rep.checks.push_back(skipped_entry("path_consistency", "no labelled object to perturb"));
    } else {
      rep.checks.push_back(check_path_consistency(net, inputs, labels, probe, {prompts.front()}, opt.steps, opt.distance));
      if (opt.controls) {
        if (baseline)
          rep.checks.push_back(check_path_consistency(*baseline, inputs, labels, probe, {prompts.front()}, opt.steps,
                                                      opt.distance, output_axis(2), "path_consistency.control", true));
        else
          rep.checks.push_back(skipped_entry("path_consistency.control", "no full-Jacobian baseline checkpoint supplied"));
      }
    }
  }

  if (wants(opt, "compositionality")) {
    const auto pairs = adjacent_pairs(prompts);
    if (pairs.empty()) {
      rep.checks.push_back(skipped_entry("compositionality", "fewer than two labelled objects"));
    } else {
      rep.checks.push_back(check_compositionality(net, scene, labels, pairs, opt.distance));
      if (opt.controls)
        rep.checks.push_back(check_compositionality(unshaped, scene, labels, pairs, opt.distance, output_axis(2),
                                                    "compositionality.control", true));
    }
  }
  rep.sort();
  return rep;
}

}  // namespace mishape
