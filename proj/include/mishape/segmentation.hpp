#pragma once

// Object selection from the shaped tangent space: relevance maps (Jacobian
// cosines against a seed), selection by perturbation response, 2D mask
// projection and IoU metrics.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mishape/error.hpp"
#include "mishape/motion_net.hpp"
#include "mishape/perturbation.hpp"
#include "mishape/render.hpp"
#include "mishape/scene.hpp"

namespace mishape {

struct RelevanceMap {
  std::vector<double> scores;  // cos(dPhi_i, dPhi_seed), indexed by id
  std::vector<bool> flagged;   // zero-norm Jacobian, score forced to 0
};

/// Cosine of every Gaussian's flattened full Jacobian against the (mean)
/// seed Jacobian, via the rank-one closed form.
inline RelevanceMap relevance(const MotionNet& net, const std::vector<Vec3>& inputs, const std::vector<int>& seeds) {
  require_ids(seeds, inputs.size());
  const JacobianBatch jb = jacobian_batch(net, inputs);
  const Eigen::Index m = static_cast<Eigen::Index>(seeds.size());
  Matrix As(jb.A.rows(), m), Gs(jb.G.rows(), m);
  for (Eigen::Index k = 0; k < m; ++k) {
    As.col(k) = jb.A.col(seeds[k]);
    Gs.col(k) = jb.G.col(seeds[k]);
  }
  // <dPhi_j, dPhi_i> = <G_j, G_i> (a_j . a_i).
  const Matrix cross = (jb.G.transpose() * Gs).cwiseProduct(jb.A.transpose() * As);  // N x m
  const Matrix seed_gram = (Gs.transpose() * Gs).cwiseProduct(As.transpose() * As);
  const double seed_norm = std::sqrt(std::max(seed_gram.sum(), 0.0)) / static_cast<double>(m);
  RelevanceMap out{std::vector<double>(inputs.size(), 0.0), std::vector<bool>(inputs.size(), false)};
  for (std::size_t j = 0; j < inputs.size(); ++j) {
    const double nj = jb.norm(static_cast<Eigen::Index>(j));
    if (!(nj > 0.0) || !(seed_norm > 0.0)) {
      out.flagged[j] = true;
      continue;
    }
    const double dot = cross.row(static_cast<Eigen::Index>(j)).sum() / static_cast<double>(m);
    out.scores[j] = std::clamp(dot / (nj * seed_norm), -1.0, 1.0);
  }
  return out;
}

inline std::vector<int> select_by_relevance(const RelevanceMap& r, double threshold) {
  std::vector<int> out;
  for (std::size_t i = 0; i < r.scores.size(); ++i)
    if (!r.flagged[i] && r.scores[i] >= threshold) out.push_back(static_cast<int>(i));
  return out;
}

struct SegmentOptions {
  double tau = 0.5;
  Vector u = output_axis(2);
  std::optional<double> scale;    // raw lambda_s; otherwise auto-scaled
  double auto_distance = 0.05;    // world units for the largest |dx| over the scene
};

struct SegmentResult {
  std::vector<int> selected;
  std::vector<double> magnitude;  // |dx| per Gaussian
  double threshold = 0.0;         // absolute |dx| threshold = tau * max
  double tau = 0.5;
  double scale = 0.0;
  std::vector<int> prompt;
};

/// Perturbs from the prompt and keeps the Gaussians whose |dx| reaches
/// tau * max |dx|. Net and scene are left untouched.
inline SegmentResult segment_by_perturbation(const MotionNet& net, const std::vector<Vec3>& inputs,
                                             const std::vector<int>& prompt, const SegmentOptions& opt = {}) {
  if (!(opt.tau > 0.0 && opt.tau <= 1.0)) fail(ErrorCategory::argument, "tau must lie in (0, 1]", "tau");
  const Matrix n = perturbation_direction(net, inputs, prompt, opt.u);
  std::vector<int> all(inputs.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  const double scale = opt.scale ? *opt.scale : auto_scale(net, inputs, all, n, opt.auto_distance);
  const DisplacementField d = displacement_delta(net, inputs, n, scale);
  SegmentResult res;
  res.tau = opt.tau;
  res.scale = scale;
  res.prompt = prompt;
  res.magnitude.resize(d.size());
  double mx = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    res.magnitude[i] = d[i].dx.norm();
    mx = std::max(mx, res.magnitude[i]);
  }
  res.threshold = opt.tau * mx;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (mx > 0.0 && res.magnitude[i] >= res.threshold) res.selected.push_back(static_cast<int>(i));
  return res;
}

inline double iou_ids(const std::vector<int>& a, const std::vector<int>& b) {
  std::set<int> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::size_t inter = 0;
  for (int x : sa) inter += sb.count(x);
  const std::size_t uni = sa.size() + sb.size() - inter;
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double jaccard(const std::vector<int>& a, const std::vector<int>& b) { return iou_ids(a, b); }

/// Pixels where the selected Gaussians carry at least half of a foreground
/// weight that itself reaches the mask threshold. Selected pixels get `label`.
inline MaskImage project_mask(const Scene& scene, const std::vector<int>& ids, const Camera& cam, int label = 1) {
  const ContributionImage ci = contributions(scene, cam);
  std::vector<char> chosen(scene.size(), 0);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= scene.size()) fail(ErrorCategory::argument, "Gaussian id out of range", std::to_string(id));
    chosen[id] = 1;
  }
  std::vector<char> foreground(scene.size(), 1);
  for (const auto& g : scene.gaussians)
    if (g.label && *g.label == 0) foreground[g.id] = 0;
  MaskImage m{cam.width, cam.height, std::vector<int>(ci.pixels.size(), 0)};
  for (std::size_t k = 0; k < ci.pixels.size(); ++k) {
    double fg = 0.0, sel = 0.0;
    for (const auto& e : ci.pixels[k]) {
      if (!foreground[e.id]) continue;
      fg += e.w;
      if (chosen[e.id]) sel += e.w;
    }
    if (fg >= kMaskForeground && sel > 0.0 && sel >= 0.5 * fg) m.labels[k] = label;
  }
  return m;
}

inline MaskImage binary_mask(const MaskImage& m, int label) {
  MaskImage out{m.width, m.height, std::vector<int>(m.labels.size(), 0)};
  for (std::size_t k = 0; k < m.labels.size(); ++k) out.labels[k] = m.labels[k] == label ? label : 0;
  return out;
}

namespace detail {

inline void require_same_size(const MaskImage& a, const MaskImage& b) {
  if (a.width != b.width || a.height != b.height || a.labels.size() != b.labels.size())
    fail(ErrorCategory::argument, "mask dimensions differ", "mask");
}

inline std::vector<int> mask_labels(const MaskImage& a, const MaskImage& b) {
  std::set<int> s;
  for (int l : a.labels)
    if (l != 0) s.insert(l);
  for (int l : b.labels)
    if (l != 0) s.insert(l);
  return {s.begin(), s.end()};
}

/// Pixels within Euclidean distance r of the inner boundary of {mask == label}.
inline std::vector<char> boundary_band(const MaskImage& m, int label, int r) {
  const int W = m.width, H = m.height;
  auto in = [&](int x, int y) { return x >= 0 && y >= 0 && x < W && y < H && m.at(x, y) == label; };
  std::vector<char> band(m.labels.size(), 0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      if (!in(x, y)) continue;
      if (in(x - 1, y) && in(x + 1, y) && in(x, y - 1) && in(x, y + 1)) continue;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          if (dx * dx + dy * dy > r * r) continue;
          const int xx = x + dx, yy = y + dy;
          if (xx >= 0 && yy >= 0 && xx < W && yy < H) band[static_cast<std::size_t>(yy) * W + xx] = 1;
        }
    }
  return band;
}

}  // namespace detail

/// IoU of one label, optionally restricted to a pixel subset.
inline double label_iou(const MaskImage& pred, const MaskImage& gt, int label, const std::vector<char>* region = nullptr) {
  detail::require_same_size(pred, gt);
  std::size_t inter = 0, uni = 0;
  for (std::size_t k = 0; k < pred.labels.size(); ++k) {
    if (region && !(*region)[k]) continue;
    const bool p = pred.labels[k] == label, g = gt.labels[k] == label;
    inter += p && g;
    uni += p || g;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Mean IoU over every non-zero label present in either mask.
inline double miou(const MaskImage& pred, const MaskImage& gt) {
  detail::require_same_size(pred, gt);
  const auto labels = detail::mask_labels(pred, gt);
  if (labels.empty()) return 1.0;
  double s = 0.0;
  for (int l : labels) s += label_iou(pred, gt, l);
  return s / static_cast<double>(labels.size());
}

inline int default_boundary_radius(int width, int height) {
  const double diag = std::hypot(static_cast<double>(width), static_cast<double>(height));
  return std::max(1, static_cast<int>(std::lround(0.005 * diag)));
}

/// Boundary IoU: per-label IoU inside the band of pixels within r of either
/// mask's boundary, averaged over labels.
inline double mbiou(const MaskImage& pred, const MaskImage& gt, std::optional<int> r = std::nullopt) {
  detail::require_same_size(pred, gt);
  const int radius = r ? *r : default_boundary_radius(pred.width, pred.height);
  if (radius < 0) fail(ErrorCategory::argument, "boundary radius must be non-negative", "r");
  const auto labels = detail::mask_labels(pred, gt);
  if (labels.empty()) return 1.0;
  double s = 0.0;
  for (int l : labels) {
    std::vector<char> band = detail::boundary_band(pred, l, radius);
    const std::vector<char> band_gt = detail::boundary_band(gt, l, radius);
    for (std::size_t k = 0; k < band.size(); ++k) band[k] = band[k] || band_gt[k];
    s += label_iou(pred, gt, l, &band);
  }
  return s / static_cast<double>(labels.size());
}

// ---------------------------------------------------------------------------
// Reports.

struct ObjectSegmentation {
  int label = 0;
  std::vector<int> prompt;
  double iou_3d = 0.0;
  double miou_2d = 0.0;
  double mbiou_2d = 0.0;
  std::size_t selected = 0;
};

/// Segments one object and scores it against ground truth in id space and on
/// every camera (2D scores are averaged over views).
inline ObjectSegmentation evaluate_segmentation(const MotionNet& net, const Scene& scene, const std::vector<int>& prompt,
                                                int label, const std::vector<Camera>& cams, const SegmentOptions& opt = {}) {
  const std::vector<Vec3> inputs = positions(scene);
  const SegmentResult res = segment_by_perturbation(net, inputs, prompt, opt);
  std::vector<int> truth;
  for (const auto& g : scene.gaussians)
    if (g.label && *g.label == label) truth.push_back(g.id);
  ObjectSegmentation out{label, prompt, iou_ids(res.selected, truth), 0.0, 0.0, res.selected.size()};
  if (cams.empty()) return out;
  for (const auto& cam : cams) {
    const MaskImage gt = binary_mask(synth_masks(scene, cam), label);
    const MaskImage pred = project_mask(scene, res.selected, cam, label);
    out.miou_2d += miou(pred, gt);
    out.mbiou_2d += mbiou(pred, gt);
  }
  out.miou_2d /= static_cast<double>(cams.size());
  out.mbiou_2d /= static_cast<double>(cams.size());
  return out;
}

inline nlohmann::json segmentation_report(const std::vector<ObjectSegmentation>& objects, double tau,
                                          std::optional<double> inter_object_cos = std::nullopt) {
  nlohmann::json j;
  j["threshold"] = tau;
  nlohmann::json per = nlohmann::json::object();
  double m = 0.0, mb = 0.0;
  auto prompts = nlohmann::json::object();
  for (const auto& o : objects) {
    per[std::to_string(o.label)] = {{"iou_3d", o.iou_3d}, {"miou_2d", o.miou_2d}, {"mbiou_2d", o.mbiou_2d}, {"selected", o.selected}};
    prompts[std::to_string(o.label)] = o.prompt;
    m += o.miou_2d;
    mb += o.mbiou_2d;
  }
  j["per_object_iou"] = per;
  j["prompt"] = prompts;
  j["miou"] = objects.empty() ? 0.0 : m / static_cast<double>(objects.size());
  j["mbiou"] = objects.empty() ? 0.0 : mb / static_cast<double>(objects.size());
  if (inter_object_cos) {
    j["inter_object_cos"] = *inter_object_cos;
    j["entangled"] = *inter_object_cos > 0.1;
  }
  return j;
}

}  // namespace mishape
