#pragma once

// Gaussian scene data model: generation of labelled synthetic scenes,
// displacement application, exact kNN over centroids, and JSON persistence.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <optional>
#include <queue>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mishape/error.hpp"

namespace mishape {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kMinScale = 1e-6;
inline constexpr double kQuatTolerance = 1e-9;
inline constexpr int kSceneFormatVersion = 1;

/// One splat. Quaternions are stored (w, x, y, z).
struct Gaussian {
  Vec3 x = Vec3::Zero();
  Vec3 s = Vec3::Constant(0.01);
  Vec4 q = Vec4(1, 0, 0, 0);
  double o = 1.0;
  Vec3 c = Vec3::Constant(0.5);
  std::optional<int> label;
  int id = 0;

  bool operator==(const Gaussian& other) const {
    return x == other.x && s == other.s && q == other.q && o == other.o && c == other.c &&
           label == other.label && id == other.id;
  }
};

struct Scene {
  std::vector<Gaussian> gaussians;
  int object_count = 1;
  std::uint64_t seed = 0;
  bool canonical = true;

  std::size_t size() const { return gaussians.size(); }
  bool operator==(const Scene&) const = default;
};

enum class Primitive { sphere_shell, box, torus, blob };

inline std::string_view to_string(Primitive p) {
  switch (p) {
    case Primitive::sphere_shell: return "sphere-shell";
    case Primitive::box: return "box";
    case Primitive::torus: return "torus";
    case Primitive::blob: return "blob";
  }
  return "?";
}

inline Primitive primitive_from_string(const std::string& name) {
  if (name == "sphere-shell" || name == "sphere") return Primitive::sphere_shell;
  if (name == "box") return Primitive::box;
  if (name == "torus") return Primitive::torus;
  if (name == "blob") return Primitive::blob;
  fail(ErrorCategory::parse, "unknown primitive '" + name + "'", "primitive");
}

/// `extent` is the nominal radius of the object around `center` (half-width
/// for boxes); collision checks treat objects as spheres of that radius.
struct ObjectSpec {
  Primitive primitive = Primitive::sphere_shell;
  Vec3 center = Vec3::Zero();
  double extent = 0.25;
  int count = 1000;
  double opacity_min = 0.75;
  double opacity_max = 0.95;
  Vec3 color = Vec3::Constant(0.5);
};

struct SceneSpec {
  std::vector<ObjectSpec> objects;
  /// Minimum gap between object bounding spheres. Negative values allow
  /// objects to interpenetrate (entangled scenes).
  double separation = 0.05;
  double scale_min = 0.012;
  double scale_max = 0.022;
  std::uint64_t seed = 7;
};

/// Three well separated objects, 1000 Gaussians each.
inline SceneSpec default_scene_spec(std::uint64_t seed = 7) {
  SceneSpec spec;
  spec.seed = seed;
  spec.objects = {
      {Primitive::sphere_shell, Vec3(-0.62, -0.1, 0.0), 0.26, 1000, 0.75, 0.95, Vec3(0.85, 0.2, 0.2)},
      {Primitive::box, Vec3(0.05, 0.3, 0.0), 0.22, 1000, 0.75, 0.95, Vec3(0.2, 0.75, 0.25)},
      {Primitive::torus, Vec3(0.55, -0.35, 0.05), 0.27, 1000, 0.75, 0.95, Vec3(0.2, 0.35, 0.9)},
  };
  return spec;
}

/// Two boxes pushed 0.09 world units into each other.
inline SceneSpec entangled_scene_spec(std::uint64_t seed = 11) {
  SceneSpec spec;
  spec.seed = seed;
  spec.separation = -0.1;
  spec.objects = {
      {Primitive::box, Vec3(-0.205, 0.0, 0.0), 0.25, 600, 0.75, 0.95, Vec3(0.9, 0.6, 0.1)},
      {Primitive::box, Vec3(0.205, 0.0, 0.0), 0.25, 600, 0.75, 0.95, Vec3(0.1, 0.6, 0.9)},
  };
  return spec;
}

namespace detail {

inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

inline double normal(std::mt19937_64& rng) {
  // Box-Muller on our own uniforms keeps sampling identical across standard libraries.
  const double u1 = std::max(uniform01(rng), 1e-300);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline Vec3 unit_vector(std::mt19937_64& rng) {
  for (;;) {
    Vec3 v(normal(rng), normal(rng), normal(rng));
    const double n = v.norm();
    if (n > 1e-12) return v / n;
  }
}

inline Vec4 random_quaternion(std::mt19937_64& rng) {
  for (;;) {
    Vec4 q(normal(rng), normal(rng), normal(rng), normal(rng));
    const double n = q.norm();
    if (n > 1e-12) return q / n;
  }
}

inline Vec3 sample_on_primitive(const ObjectSpec& obj, std::mt19937_64& rng) {
  const double r = obj.extent;
  switch (obj.primitive) {
    case Primitive::sphere_shell:
      return obj.center + r * unit_vector(rng);
    case Primitive::box: {
      const double h = r;
      const int face = static_cast<int>(uniform01(rng) * 6.0) % 6;
      const int axis = face / 2;
      Vec3 p(uniform(rng, -h, h), uniform(rng, -h, h), uniform(rng, -h, h));
      p[axis] = (face % 2 == 0) ? -h : h;
      return obj.center + p;
    }
    case Primitive::torus: {
      const double major = 0.7 * r;
      const double minor = 0.3 * r;
      for (;;) {
        const double u = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        const double v = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        // Area element is proportional to (major + minor cos v).
        if (uniform01(rng) * (major + minor) > major + minor * std::cos(v)) continue;
        const double ring = major + minor * std::cos(v);
        return obj.center + Vec3(ring * std::cos(u), ring * std::sin(u), minor * std::sin(v));
      }
    }
    case Primitive::blob: {
      const double rad = r * std::cbrt(uniform01(rng));
      return obj.center + rad * unit_vector(rng);
    }
  }
  return obj.center;
}

}  // namespace detail

inline void validate(const ObjectSpec& obj, std::size_t index) {
  const std::string ctx = "objects[" + std::to_string(index) + "]";
  if (obj.count < 1) fail(ErrorCategory::validation, "gaussians-per-object must be >= 1", ctx);
  if (!(obj.extent > 0.0)) fail(ErrorCategory::validation, "extent must be positive", ctx);
  if (!(obj.opacity_min >= 0.0 && obj.opacity_max <= 1.0 && obj.opacity_min <= obj.opacity_max))
    fail(ErrorCategory::validation, "opacity range must lie in [0,1]", ctx);
  if ((obj.color.array() < 0.0).any() || (obj.color.array() > 1.0).any())
    fail(ErrorCategory::validation, "color must lie in [0,1]^3", ctx);
}

inline void validate(const SceneSpec& spec) {
  if (spec.objects.empty()) fail(ErrorCategory::validation, "scene spec has no objects", "objects");
  if (!(spec.scale_min > 0.0 && spec.scale_min <= spec.scale_max))
    fail(ErrorCategory::validation, "scale range must be positive and ordered", "scale");
  for (std::size_t i = 0; i < spec.objects.size(); ++i) validate(spec.objects[i], i);
}

/// Deterministic in `spec` (including its seed). Object labels are 1..K.
inline Scene generate_scene(const SceneSpec& spec) {
  validate(spec);
  for (std::size_t a = 0; a < spec.objects.size(); ++a) {
    for (std::size_t b = a + 1; b < spec.objects.size(); ++b) {
      const auto& A = spec.objects[a];
      const auto& B = spec.objects[b];
      const double gap = (A.center - B.center).norm() - (A.extent + B.extent);
      if (gap < spec.separation) {
        std::ostringstream msg;
        msg << "objects " << a + 1 << " and " << b + 1 << " collide (gap " << gap
            << " < separation " << spec.separation << ")";
        fail(ErrorCategory::generation, msg.str(), "objects");
      }
    }
  }

  std::mt19937_64 rng(spec.seed);
  Scene scene;
  scene.seed = spec.seed;
  scene.object_count = static_cast<int>(spec.objects.size());
  scene.canonical = true;
  int next_id = 0;
  for (std::size_t k = 0; k < spec.objects.size(); ++k) {
    const auto& obj = spec.objects[k];
    for (int i = 0; i < obj.count; ++i) {
      Gaussian g;
      g.x = detail::sample_on_primitive(obj, rng);
      for (int d = 0; d < 3; ++d) g.s[d] = detail::uniform(rng, spec.scale_min, spec.scale_max);
      g.q = detail::random_quaternion(rng);
      g.o = detail::uniform(rng, obj.opacity_min, obj.opacity_max);
      g.c = obj.color;
      g.label = static_cast<int>(k) + 1;
      g.id = next_id++;
      scene.gaussians.push_back(g);
    }
  }
  return scene;
}

/// Offsets produced by the motion network for one Gaussian.
struct Displacement {
  Vec3 dx = Vec3::Zero();
  Vec3 ds = Vec3::Zero();
  Vec4 dq = Vec4::Zero();
};

using DisplacementField = std::vector<Displacement>;

inline Scene apply_displacement(const Scene& scene, const DisplacementField& d) {
  if (d.size() != scene.size())
    fail(ErrorCategory::argument,
         "displacement count " + std::to_string(d.size()) + " != scene size " + std::to_string(scene.size()));
  Scene out = scene;
  out.canonical = false;
  for (std::size_t i = 0; i < d.size(); ++i) {
    Gaussian& g = out.gaussians[i];
    g.x += d[i].dx;
    g.s = (g.s + d[i].ds).cwiseMax(kMinScale);
    const Vec4 q = g.q + d[i].dq;
    const double n = q.norm();
    if (!(n >= 1e-9))
      fail(ErrorCategory::numeric, "degenerate rotation after displacement", "gaussian " + std::to_string(g.id));
    g.q = q / n;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exact k nearest neighbours over centroids (k-d tree, ties broken by id).

class KdTree {
 public:
  explicit KdTree(const std::vector<Vec3>& points) : pts_(points) {
    order_.resize(pts_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
    nodes_.reserve(pts_.size());
    if (!pts_.empty()) root_ = build(0, static_cast<int>(order_.size()), 0);
  }

  /// The k nearest points to `query` ordered by (distance, id), skipping `exclude`.
  std::vector<int> nearest(const Vec3& query, int k, int exclude = -1) const {
    Heap heap;
    if (root_ >= 0) search(root_, query, k, exclude, heap);
    std::vector<int> out(heap.size());
    for (std::size_t i = out.size(); i-- > 0;) {
      out[i] = heap.top().second;
      heap.pop();
    }
    return out;
  }

 private:
  struct Node {
    int point;
    int axis;
    int left = -1;
    int right = -1;
  };
  using Entry = std::pair<double, int>;  // (squared distance, id); max-heap on lexicographic order
  using Heap = std::priority_queue<Entry>;

  int build(int lo, int hi, int depth) {
    if (lo >= hi) return -1;
    const int axis = depth % 3;
    const int mid = (lo + hi) / 2;
    std::nth_element(order_.begin() + lo, order_.begin() + mid, order_.begin() + hi, [&](int a, int b) {
      return pts_[a][axis] < pts_[b][axis] || (pts_[a][axis] == pts_[b][axis] && a < b);
    });
    const int index = static_cast<int>(nodes_.size());
    nodes_.push_back({order_[mid], axis});
    const int left = build(lo, mid, depth + 1);
    const int right = build(mid + 1, hi, depth + 1);
    nodes_[index].left = left;
    nodes_[index].right = right;
    return index;
  }

  void search(int ni, const Vec3& q, int k, int exclude, Heap& heap) const {
    const Node& n = nodes_[ni];
    if (n.point != exclude) {
      const Entry e{(pts_[n.point] - q).squaredNorm(), n.point};
      if (static_cast<int>(heap.size()) < k) {
        heap.push(e);
      } else if (e < heap.top()) {
        heap.pop();
        heap.push(e);
      }
    }
    const double diff = q[n.axis] - pts_[n.point][n.axis];
    const int near = diff < 0 ? n.left : n.right;
    const int far = diff < 0 ? n.right : n.left;
    if (near >= 0) search(near, q, k, exclude, heap);
    // Equal plane distance may still hide a tie with a smaller id, so prune strictly.
    if (far >= 0 && (static_cast<int>(heap.size()) < k || diff * diff <= heap.top().first))
      search(far, q, k, exclude, heap);
  }

  std::vector<Vec3> pts_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

using NeighborTable = std::vector<std::vector<int>>;

inline NeighborTable knn(const Scene& scene, int k) {
  const int n = static_cast<int>(scene.size());
  if (k < 1 || k >= n)
    fail(ErrorCategory::argument, "knn requires 1 <= k < N (k=" + std::to_string(k) + ", N=" + std::to_string(n) + ")",
         "k");
  std::vector<Vec3> pts(n);
  for (int i = 0; i < n; ++i) pts[i] = scene.gaussians[i].x;
  KdTree tree(pts);
  NeighborTable table(n);
  for (int i = 0; i < n; ++i) table[i] = tree.nearest(pts[i], k, i);
  return table;
}

// ---------------------------------------------------------------------------
// Validation and persistence.

inline void validate(const Gaussian& g, const std::string& ctx) {
  auto finite = [](const auto& v) { return v.allFinite(); };
  if (!finite(g.x) || !finite(g.s) || !finite(g.q) || !finite(g.c) || !std::isfinite(g.o))
    fail(ErrorCategory::validation, "non-finite field", ctx);
  if (std::abs(g.q.norm() - 1.0) > kQuatTolerance)
    fail(ErrorCategory::validation, "quaternion is not unit length (|q| = " + std::to_string(g.q.norm()) + ")",
         ctx + ".q");
  if ((g.s.array() <= 0.0).any()) fail(ErrorCategory::validation, "scale must be strictly positive", ctx + ".s");
  if (g.o < 0.0 || g.o > 1.0) fail(ErrorCategory::validation, "opacity outside [0,1]", ctx + ".o");
  if ((g.c.array() < 0.0).any() || (g.c.array() > 1.0).any())
    fail(ErrorCategory::validation, "color outside [0,1]", ctx + ".c");
  if (g.label && *g.label < 0) fail(ErrorCategory::validation, "negative label", ctx + ".label");
}

inline void validate(const Scene& scene) {
  if (scene.object_count < 1) fail(ErrorCategory::validation, "object_count must be positive", "object_count");
  for (std::size_t i = 0; i < scene.size(); ++i) {
    const std::string ctx = "gaussians[" + std::to_string(i) + "]";
    const Gaussian& g = scene.gaussians[i];
    if (g.id != static_cast<int>(i)) fail(ErrorCategory::validation, "ids must be dense 0..N-1", ctx + ".id");
    validate(g, ctx);
    if (g.label && *g.label > scene.object_count)
      fail(ErrorCategory::validation, "label exceeds object_count", ctx + ".label");
  }
}

namespace detail {

template <int N>
nlohmann::json to_json_vec(const Eigen::Matrix<double, N, 1>& v) {
  auto arr = nlohmann::json::array();
  for (int i = 0; i < N; ++i) arr.push_back(v[i]);
  return arr;
}

template <int N>
Eigen::Matrix<double, N, 1> from_json_vec(const nlohmann::json& j, const std::string& ctx) {
  if (!j.is_array() || j.size() != static_cast<std::size_t>(N))
    fail(ErrorCategory::parse, "expected array of " + std::to_string(N) + " numbers", ctx);
  Eigen::Matrix<double, N, 1> v;
  for (int i = 0; i < N; ++i) {
    if (!j[i].is_number()) fail(ErrorCategory::parse, "expected number", ctx + "[" + std::to_string(i) + "]");
    v[i] = j[i].get<double>();
  }
  return v;
}

inline const nlohmann::json& require(const nlohmann::json& j, const char* key, const std::string& ctx) {
  if (!j.is_object() || !j.contains(key)) fail(ErrorCategory::parse, std::string("missing field '") + key + "'", ctx);
  return j.at(key);
}

inline double require_number(const nlohmann::json& j, const char* key, const std::string& ctx) {
  const auto& v = require(j, key, ctx);
  if (!v.is_number()) fail(ErrorCategory::parse, std::string("field '") + key + "' must be a number", ctx + "." + key);
  return v.get<double>();
}

inline nlohmann::json parse_json_text(const std::string& text, const std::string& source) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCategory::parse, e.what(), source);
  }
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCategory::io, "cannot open file", path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCategory::io, "cannot write file", path);
  out << text;
  if (!out) fail(ErrorCategory::io, "write failed", path);
}

}  // namespace detail

inline nlohmann::json scene_to_json(const Scene& scene) {
  nlohmann::json j;
  j["version"] = kSceneFormatVersion;
  j["seed"] = scene.seed;
  j["object_count"] = scene.object_count;
  j["canonical"] = scene.canonical;
  auto arr = nlohmann::json::array();
  for (const auto& g : scene.gaussians) {
    nlohmann::json e;
    e["id"] = g.id;
    e["x"] = detail::to_json_vec<3>(g.x);
    e["s"] = detail::to_json_vec<3>(g.s);
    e["q"] = detail::to_json_vec<4>(g.q);
    e["o"] = g.o;
    e["c"] = detail::to_json_vec<3>(g.c);
    e["label"] = g.label ? nlohmann::json(*g.label) : nlohmann::json(nullptr);
    arr.push_back(std::move(e));
  }
  j["gaussians"] = std::move(arr);
  return j;
}

/// Parses and validates; never returns a partially built scene.
inline Scene scene_from_json(const nlohmann::json& j) {
  const auto& version = detail::require(j, "version", "scene");
  if (!version.is_number_integer() || version.get<int>() != kSceneFormatVersion)
    fail(ErrorCategory::parse, "unsupported scene version " + version.dump(), "scene.version");
  Scene scene;
  const auto& seed = detail::require(j, "seed", "scene");
  if (!seed.is_number_unsigned() && !seed.is_number_integer())
    fail(ErrorCategory::parse, "seed must be an integer", "scene.seed");
  scene.seed = seed.get<std::uint64_t>();
  const auto& count = detail::require(j, "object_count", "scene");
  if (!count.is_number_integer()) fail(ErrorCategory::parse, "object_count must be an integer", "scene.object_count");
  scene.object_count = count.get<int>();
  scene.canonical = j.value("canonical", true);
  const auto& arr = detail::require(j, "gaussians", "scene");
  if (!arr.is_array()) fail(ErrorCategory::parse, "gaussians must be an array", "scene.gaussians");
  scene.gaussians.reserve(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string ctx = "gaussians[" + std::to_string(i) + "]";
    const auto& e = arr[i];
    Gaussian g;
    const auto& id = detail::require(e, "id", ctx);
    if (!id.is_number_integer()) fail(ErrorCategory::parse, "id must be an integer", ctx + ".id");
    g.id = id.get<int>();
    g.x = detail::from_json_vec<3>(detail::require(e, "x", ctx), ctx + ".x");
    g.s = detail::from_json_vec<3>(detail::require(e, "s", ctx), ctx + ".s");
    g.q = detail::from_json_vec<4>(detail::require(e, "q", ctx), ctx + ".q");
    g.o = detail::require_number(e, "o", ctx);
    g.c = detail::from_json_vec<3>(detail::require(e, "c", ctx), ctx + ".c");
    if (e.contains("label") && !e["label"].is_null()) {
      if (!e["label"].is_number_integer()) fail(ErrorCategory::parse, "label must be an integer", ctx + ".label");
      g.label = e["label"].get<int>();
    }
    scene.gaussians.push_back(g);
  }
  validate(scene);
  return scene;
}

inline nlohmann::json spec_to_json(const SceneSpec& spec) {
  auto objs = nlohmann::json::array();
  for (const auto& o : spec.objects)
    objs.push_back({{"primitive", to_string(o.primitive)}, {"center", detail::to_json_vec<3>(o.center)},
                    {"extent", o.extent}, {"count", o.count}, {"opacity_min", o.opacity_min},
                    {"opacity_max", o.opacity_max}, {"color", detail::to_json_vec<3>(o.color)}});
  return {{"seed", spec.seed}, {"separation", spec.separation}, {"scale_min", spec.scale_min},
          {"scale_max", spec.scale_max}, {"objects", objs}};
}

/// Missing fields keep their defaults; an absent object list means the
/// default three-object scene.
inline SceneSpec spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail(ErrorCategory::parse, "scene spec must be an object", "spec");
  SceneSpec spec = default_scene_spec();
  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned() && !j["seed"].is_number_integer())
      fail(ErrorCategory::parse, "seed must be an integer", "spec.seed");
    spec.seed = j["seed"].get<std::uint64_t>();
  }
  if (j.contains("separation")) spec.separation = detail::require_number(j, "separation", "spec");
  if (j.contains("scale_min")) spec.scale_min = detail::require_number(j, "scale_min", "spec");
  if (j.contains("scale_max")) spec.scale_max = detail::require_number(j, "scale_max", "spec");
  if (j.contains("objects")) {
    const auto& arr = j["objects"];
    if (!arr.is_array()) fail(ErrorCategory::parse, "objects must be an array", "spec.objects");
    spec.objects.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string ctx = "spec.objects[" + std::to_string(i) + "]";
      const auto& e = arr[i];
      ObjectSpec o;
      const auto& prim = detail::require(e, "primitive", ctx);
      if (!prim.is_string()) fail(ErrorCategory::parse, "primitive must be a string", ctx + ".primitive");
      o.primitive = primitive_from_string(prim.get<std::string>());
      o.center = detail::from_json_vec<3>(detail::require(e, "center", ctx), ctx + ".center");
      o.extent = detail::require_number(e, "extent", ctx);
      const auto& count = detail::require(e, "count", ctx);
      if (!count.is_number_integer()) fail(ErrorCategory::parse, "count must be an integer", ctx + ".count");
      o.count = count.get<int>();
      if (e.contains("opacity_min")) o.opacity_min = detail::require_number(e, "opacity_min", ctx);
      if (e.contains("opacity_max")) o.opacity_max = detail::require_number(e, "opacity_max", ctx);
      if (e.contains("color")) o.color = detail::from_json_vec<3>(e["color"], ctx + ".color");
      spec.objects.push_back(o);
    }
  }
  validate(spec);
  return spec;
}

inline void save_scene(const Scene& scene, const std::string& path) {
  detail::write_file(path, scene_to_json(scene).dump(1));
}

inline Scene load_scene(const std::string& path) {
  try {
    return scene_from_json(detail::parse_json_text(detail::read_file(path), path));
  } catch (const Error& e) {
    if (e.category() == ErrorCategory::io) throw;
    throw Error(e.category(), std::string(e.what()), path + ": " + e.context());
  }
}

inline std::vector<Vec3> positions(const Scene& scene) {
  std::vector<Vec3> out(scene.size());
  for (std::size_t i = 0; i < scene.size(); ++i) out[i] = scene.gaussians[i].x;
  return out;
}

/// Ground-truth (or assigned) labels as a flat vector; missing labels map to 0.
inline std::vector<int> labels_of(const Scene& scene) {
  std::vector<int> out(scene.size());
  for (std::size_t i = 0; i < scene.size(); ++i) out[i] = scene.gaussians[i].label.value_or(0);
  return out;
}

}  // namespace mishape
