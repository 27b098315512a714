#pragma once

// Weight-space perturbations of the shaping layer and the scene motion they
// induce. The network always reads the canonical positions; displacement
// deltas are added onto whatever geometry the scene currently has.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "mishape/error.hpp"
#include "mishape/motion_net.hpp"
#include "mishape/render.hpp"
#include "mishape/scene.hpp"

namespace mishape {

inline constexpr int kAutoScaleIterations = 30;

struct Perturbation {
  Matrix n;            // direction, shaped like W^(l)
  double scale = 0.0;  // lambda_s
  int layer = 4;       // shaping layer the direction belongs to
  std::vector<int> ids;
  Vector u;
  std::optional<double> twist_deg;
};

/// The Gaussian with the largest compositing weight at a pixel.
inline int prompt_to_gaussian(const Scene& scene, const Camera& cam, int px, int py) {
  if (px < 0 || py < 0 || px >= cam.width || py >= cam.height)
    fail(ErrorCategory::argument, "prompt pixel out of bounds", std::to_string(px) + "," + std::to_string(py));
  const ContributionImage ci = contributions(scene, cam);
  const auto& list = ci.at(px, py);
  if (list.empty()) fail(ErrorCategory::no_target, "no Gaussian contributes to the prompt pixel", std::to_string(px) + "," + std::to_string(py));
  const Contribution* best = &list.front();
  for (const auto& c : list)
    if (c.w > best->w) best = &c;
  return best->id;
}

inline void require_ids(const std::vector<int>& ids, std::size_t n) {
  if (ids.empty()) fail(ErrorCategory::argument, "at least one Gaussian id required", "ids");
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= n) fail(ErrorCategory::argument, "Gaussian id out of range", std::to_string(id));
}

/// Unit-Frobenius direction: mean of d(u^T Phi)/dW^(l) over the prompt ids.
inline Matrix perturbation_direction(const MotionNet& net, const std::vector<Vec3>& inputs, const std::vector<int>& ids,
                                     const Vector& u) {
  require_ids(ids, inputs.size());
  require_unit(u);
  Matrix n = Matrix::Zero(net.shaping_weight().rows(), net.shaping_weight().cols());
  for (int id : ids) n += jacobian_phi(net, inputs[id], u);
  n /= static_cast<double>(ids.size());
  const double norm = n.norm();
  if (!(norm > 0.0)) fail(ErrorCategory::degenerate, "mean Jacobian of the prompt is zero", "ids");
  return n / norm;
}

inline Perturbation make_perturbation(const MotionNet& net, const std::vector<Vec3>& inputs, const std::vector<int>& ids,
                                      const Vector& u, double scale) {
  return {perturbation_direction(net, inputs, ids, u), scale, net.config.shaping_layer, ids, u, std::nullopt};
}

/// Phi'(X) - Phi(X) for the network perturbed by scale * n.
inline DisplacementField displacement_delta(const MotionNet& net, const std::vector<Vec3>& inputs, const Matrix& n,
                                            double scale) {
  const Matrix encoded = positional_encoding(inputs, net.config.frequencies);
  const Matrix before = forward_encoded(net, encoded).output;
  const Matrix after = forward_encoded(perturb_weights(net, n, scale), encoded).output;
  const Matrix delta = after - before;
  DisplacementField field(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) field[i] = to_displacement(delta.col(static_cast<Eigen::Index>(i)));
  return field;
}

/// Largest |dx| over `region` for the perturbation at the given scale.
inline double max_translation(const MotionNet& net, const std::vector<Vec3>& inputs, const std::vector<int>& region,
                              const Matrix& n, double scale) {
  std::vector<Vec3> xs;
  for (int id : region) xs.push_back(inputs[id]);
  const DisplacementField d = displacement_delta(net, xs, n, scale);
  double m = 0.0;
  for (const auto& e : d) m = std::max(m, e.dx.norm());
  return m;
}

/// Bisection on lambda_s so that the largest |dx| over `region` equals
/// `distance` (world units).
inline double auto_scale(const MotionNet& net, const std::vector<Vec3>& inputs, const std::vector<int>& region,
                         const Matrix& n, double distance) {
  if (!(distance > 0.0)) fail(ErrorCategory::argument, "auto-scale distance must be positive", "auto-scale");
  require_ids(region, inputs.size());
  double lo = 0.0, hi = 1e-3;
  for (int i = 0; max_translation(net, inputs, region, n, hi) < distance; ++i) {
    if (i > 80) fail(ErrorCategory::degenerate, "perturbation does not move the prompt region", "auto-scale");
    lo = hi;
    hi *= 2.0;
  }
  for (int it = 0; it < kAutoScaleIterations; ++it) {
    const double mid = 0.5 * (lo + hi);
    (max_translation(net, inputs, region, n, mid) < distance ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

/// Gaussians sharing a (non-zero) label with any prompt id; the ids themselves otherwise.
inline std::vector<int> prompt_region(const std::vector<int>& labels, const std::vector<int>& ids) {
  std::vector<int> wanted;
  for (int id : ids)
    if (labels[id] != 0) wanted.push_back(labels[id]);
  if (wanted.empty()) return ids;
  std::vector<int> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (std::find(wanted.begin(), wanted.end(), labels[i]) != wanted.end()) out.push_back(static_cast<int>(i));
  return out;
}

struct Applied {
  MotionNet net;
  Scene scene;
  DisplacementField displacement;
};

inline Applied apply_perturbation(const MotionNet& net, const std::vector<Vec3>& inputs, const Scene& scene,
                                  const Perturbation& p) {
  if (inputs.size() != scene.size()) fail(ErrorCategory::argument, "one canonical input per Gaussian required", "inputs");
  if (p.layer != net.config.shaping_layer) fail(ErrorCategory::argument, "perturbation targets a different layer", "layer");
  DisplacementField d = displacement_delta(net, inputs, p.n, p.scale);
  Scene moved = apply_displacement(scene, d);
  return {perturb_weights(net, p.n, p.scale), std::move(moved), std::move(d)};
}

struct SequenceStep {
  Perturbation p;
  bool refresh = true;  // re-derive the direction from the current network
};

struct TrajectoryStep {
  Perturbation p;
  Scene scene;
  DisplacementField displacement;
};

struct Trajectory {
  std::vector<TrajectoryStep> steps;  // steps[0] is the starting scene with an empty perturbation
  MotionNet net;                      // network after the last step

  std::size_t length() const { return steps.size(); }
};

inline Trajectory run_sequence(const MotionNet& net, const std::vector<Vec3>& inputs, const Scene& scene,
                               const std::vector<SequenceStep>& seq) {
  Trajectory t;
  t.net = net;
  t.steps.push_back({Perturbation{}, scene, DisplacementField(scene.size())});
  for (const auto& step : seq) {
    Perturbation p = step.p;
    if (step.refresh) p.n = perturbation_direction(t.net, inputs, p.ids, p.u);
    Applied a = apply_perturbation(t.net, inputs, t.steps.back().scene, p);
    t.net = std::move(a.net);
    t.steps.push_back({std::move(p), std::move(a.scene), std::move(a.displacement)});
  }
  return t;
}

/// Weight-level sum lambda_1 n_1 + lambda_2 n_2 as a single unit-scale perturbation.
inline Perturbation compose(const Perturbation& a, const Perturbation& b) {
  if (a.layer != b.layer || a.n.rows() != b.n.rows() || a.n.cols() != b.n.cols())
    fail(ErrorCategory::argument, "composed perturbations must target the same layer", "layer");
  Perturbation out;
  out.n = a.scale * a.n + b.scale * b.n;
  out.scale = 1.0;
  out.layer = a.layer;
  out.ids = a.ids;
  out.ids.insert(out.ids.end(), b.ids.begin(), b.ids.end());
  out.u = a.u;
  return out;
}

// ---------------------------------------------------------------------------
// Twist: rotate the direction inside its own support.

enum class TwistPartner {
  // g r^T: keeps the output factor g of n and draws r at random on the
  // column support of n, orthogonal to n's activation factor.
  activation,
  // Independent random entries on the full support of n.
  support,
};

/// Unit partner direction orthogonal to n and supported where n is non-zero.
inline Matrix twist_partner(const Matrix& n, std::uint64_t seed, TwistPartner mode = TwistPartner::activation) {
  std::mt19937_64 rng(seed);
  const double norm = n.norm();
  if (!(norm > 0.0)) fail(ErrorCategory::degenerate, "twist needs a non-zero direction", "n");
  const Matrix nn = n / norm;
  Matrix P = Matrix::Zero(n.rows(), n.cols());
  if (mode == TwistPartner::support) {
    Eigen::Index support = 0;
    for (Eigen::Index c = 0; c < n.cols(); ++c)
      for (Eigen::Index r = 0; r < n.rows(); ++r)
        if (n(r, c) != 0.0) {
          P(r, c) = detail::normal(rng);
          ++support;
        }
    if (support < 2) fail(ErrorCategory::degenerate, "direction support has fewer than two entries", "n");
  } else {
    // Leading singular pair by power iteration on n^T n.
    Vector v = nn.colwise().norm().transpose();
    for (int it = 0; it < 100; ++it) {
      const Vector next = nn.transpose() * (nn * v);
      if (!(next.norm() > 0.0)) break;
      v = next.normalized();
    }
    const Vector g = (nn * v).normalized();
    Vector r = Vector::Zero(n.cols());
    Eigen::Index support = 0;
    for (Eigen::Index c = 0; c < n.cols(); ++c)
      if (v[c] != 0.0) {
        r[c] = detail::normal(rng);
        ++support;
      }
    if (support < 2) fail(ErrorCategory::degenerate, "direction support has fewer than two columns", "n");
    r -= r.dot(v) * v;
    P = g * r.transpose();
    for (Eigen::Index c = 0; c < n.cols(); ++c)
      for (Eigen::Index rr = 0; rr < n.rows(); ++rr)
        if (n(rr, c) == 0.0) P(rr, c) = 0.0;
  }
  P -= (P.cwiseProduct(nn).sum()) * nn;
  const double pn = P.norm();
  if (!(pn > 0.0)) fail(ErrorCategory::degenerate, "partner direction vanished after orthogonalisation", "n");
  return P / pn;
}

struct TwistResult {
  double angle_deg = 0.0;
  Perturbation p;
  Scene scene;
  DisplacementField displacement;
};

/// Applies n(phi) = cos(phi) n + sin(phi) partner from the given scene for every angle.
inline std::vector<TwistResult> twist_sweep(const MotionNet& net, const std::vector<Vec3>& inputs, const Scene& scene,
                                            const Perturbation& p, const std::vector<double>& angles_deg,
                                            std::uint64_t seed, TwistPartner mode = TwistPartner::activation) {
  const Matrix base = p.n / p.n.norm();
  const Matrix partner = twist_partner(base, seed, mode);
  std::vector<TwistResult> out;
  for (double deg : angles_deg) {
    const double phi = deg * std::numbers::pi / 180.0;
    Perturbation q = p;
    q.n = std::cos(phi) * base + std::sin(phi) * partner;
    q.twist_deg = deg;
    Applied a = apply_perturbation(net, inputs, scene, q);
    out.push_back({deg, std::move(q), std::move(a.scene), std::move(a.displacement)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Displacement statistics.

/// Mean |dx| over the given ids.
inline double mean_translation(const DisplacementField& d, const std::vector<int>& ids) {
  if (ids.empty()) return 0.0;
  double s = 0.0;
  for (int id : ids) s += d[id].dx.norm();
  return s / static_cast<double>(ids.size());
}

/// Mean |dx| per label (index = label, entry 0 = background).
inline std::vector<double> mean_translation_by_label(const DisplacementField& d, const std::vector<int>& labels) {
  int max_label = 0;
  for (int l : labels) max_label = std::max(max_label, l);
  std::vector<double> sum(static_cast<std::size_t>(max_label) + 1, 0.0);
  std::vector<int> count(sum.size(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    sum[labels[i]] += d[i].dx.norm();
    ++count[labels[i]];
  }
  for (std::size_t l = 0; l < sum.size(); ++l)
    if (count[l] > 0) sum[l] /= count[l];
  return sum;
}

/// Euclidean norm of the stacked 10-channel field.
inline double field_norm(const DisplacementField& d) {
  double s = 0.0;
  for (const auto& e : d) s += e.dx.squaredNorm() + e.ds.squaredNorm() + e.dq.squaredNorm();
  return std::sqrt(s);
}

inline DisplacementField field_sum(const DisplacementField& a, const DisplacementField& b) {
  DisplacementField out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out[i].dx = a[i].dx + b[i].dx;
    out[i].ds = a[i].ds + b[i].ds;
    out[i].dq = a[i].dq + b[i].dq;
  }
  return out;
}

inline DisplacementField field_difference(const DisplacementField& a, const DisplacementField& b) {
  DisplacementField out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out[i].dx = a[i].dx - b[i].dx;
    out[i].ds = a[i].ds - b[i].ds;
    out[i].dq = a[i].dq - b[i].dq;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trajectory files.

inline nlohmann::json perturbation_to_json(const Perturbation& p, bool include_direction = false) {
  nlohmann::json j;
  j["scale"] = p.scale;
  j["layer"] = p.layer;
  j["ids"] = p.ids;
  j["u"] = std::vector<double>(p.u.data(), p.u.data() + p.u.size());
  j["frobenius_norm"] = p.n.size() ? p.n.norm() : 0.0;
  if (p.twist_deg) j["twist_deg"] = *p.twist_deg;
  if (include_direction && p.n.size()) {
    j["rows"] = p.n.rows();
    j["cols"] = p.n.cols();
    std::vector<double> flat;
    for (Eigen::Index r = 0; r < p.n.rows(); ++r)
      for (Eigen::Index c = 0; c < p.n.cols(); ++c) flat.push_back(p.n(r, c));
    j["n"] = flat;
  }
  return j;
}

inline nlohmann::json trajectory_to_json(const Trajectory& t, const std::vector<std::string>& snapshot_files) {
  nlohmann::json j;
  j["version"] = 1;
  j["steps"] = static_cast<int>(t.steps.size()) - 1;
  auto arr = nlohmann::json::array();
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    nlohmann::json e;
    e["index"] = i;
    if (i > 0) e["perturbation"] = perturbation_to_json(t.steps[i].p);
    e["mean_translation"] = mean_translation(t.steps[i].displacement, [&] {
      std::vector<int> all(t.steps[i].displacement.size());
      for (std::size_t k = 0; k < all.size(); ++k) all[k] = static_cast<int>(k);
      return all;
    }());
    if (i < snapshot_files.size()) e["scene"] = snapshot_files[i];
    arr.push_back(e);
  }
  j["trajectory"] = arr;
  return j;
}

}  // namespace mishape
