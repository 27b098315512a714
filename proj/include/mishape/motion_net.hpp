#pragma once

// Motion MLP: positional encoding -> 4 ReLU layers -> linear head producing
// (dx, ds, dq). Jacobians with respect to the shaping layer's weight matrix
// use the rank-one factorisation dz/dW = (dz/dh) a^T, where a is the input
// activation of that layer.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mishape/error.hpp"
#include "mishape/scene.hpp"

namespace mishape {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr int kCheckpointVersion = 1;
inline constexpr int kOutDim = 10;  // dx(3) ds(3) dq(4)

struct NetConfig {
  int frequencies = 10;  // positional-encoding octaves L
  int width = 256;
  int depth = 4;  // hidden layers; fixed
  int shaping_layer = 4;  // 1-based index of the perturbed linear layer
  int out_dim = kOutDim;
  std::uint64_t seed = 0;

  int input_dim() const { return 6 * frequencies; }
  bool operator==(const NetConfig&) const = default;
};

inline void validate(const NetConfig& c) {
  if (c.frequencies < 1) fail(ErrorCategory::config, "frequencies must be positive", "frequencies");
  if (c.depth != 4) fail(ErrorCategory::config, "depth is fixed at 4 hidden layers", "depth");
  if (c.shaping_layer < 1 || c.shaping_layer > c.depth)
    fail(ErrorCategory::config, "shaping layer must lie in 1..4", "shaping_layer");
  if (c.out_dim != kOutDim) fail(ErrorCategory::config, "out_dim must be 10", "out_dim");
  if (c.width < c.out_dim) fail(ErrorCategory::config, "width must be >= out_dim", "width");
}

struct Layer {
  Matrix W;
  Vector b;
  bool operator==(const Layer& o) const { return W == o.W && b == o.b; }
};

/// Layers are stored 0-based: layers[m-1] holds W^(m), b^(m) for m = 1..5.
struct MotionNet {
  NetConfig config;
  std::vector<Layer> layers;

  int shaping_index() const { return config.shaping_layer - 1; }
  const Matrix& shaping_weight() const { return layers[shaping_index()].W; }
  bool operator==(const MotionNet&) const = default;
};

// ---------------------------------------------------------------------------
// Positional encoding.
//
// Entry order: for frequency k = 0..L-1, for coordinate d = 0..2, the pair
// (sin(2^k pi x_d), cos(2^k pi x_d)); index = 2 * (3k + d) + {0 sin, 1 cos}.
// Positions are treated as constants (no gradient flows into them).

inline Vector positional_encoding(const Vec3& x, int frequencies) {
  Vector out(6 * frequencies);
  for (int k = 0; k < frequencies; ++k) {
    const double w = std::ldexp(std::numbers::pi, k);
    for (int d = 0; d < 3; ++d) {
      out[2 * (3 * k + d)] = std::sin(w * x[d]);
      out[2 * (3 * k + d) + 1] = std::cos(w * x[d]);
    }
  }
  return out;
}

inline Matrix positional_encoding(const std::vector<Vec3>& xs, int frequencies) {
  Matrix out(6 * frequencies, static_cast<Eigen::Index>(xs.size()));
  for (std::size_t i = 0; i < xs.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = positional_encoding(xs[i], frequencies);
  return out;
}

// ---------------------------------------------------------------------------
// Initialisation.

/// Hidden layers: He-uniform weights, fan-in uniform biases. The output head
/// starts at exactly zero so an unshaped network produces no motion.
inline MotionNet init(const NetConfig& config) {
  validate(config);
  MotionNet net;
  net.config = config;
  std::mt19937_64 rng(config.seed);
  int fan_in = config.input_dim();
  for (int m = 1; m <= config.depth; ++m) {
    Layer layer{Matrix(config.width, fan_in), Vector(config.width)};
    const double wb = std::sqrt(6.0 / fan_in);
    const double bb = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Eigen::Index r = 0; r < layer.W.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.W.cols(); ++c) layer.W(r, c) = detail::uniform(rng, -wb, wb);
    for (Eigen::Index r = 0; r < layer.b.size(); ++r) layer.b[r] = detail::uniform(rng, -bb, bb);
    net.layers.push_back(std::move(layer));
    fan_in = config.width;
  }
  net.layers.push_back({Matrix::Zero(config.out_dim, config.width), Vector::Zero(config.out_dim)});
  return net;
}

inline void validate(const MotionNet& net) {
  validate(net.config);
  const auto& c = net.config;
  if (static_cast<int>(net.layers.size()) != c.depth + 1)
    fail(ErrorCategory::validation, "expected 5 layers", "layers");
  int in = c.input_dim();
  for (int m = 0; m <= c.depth; ++m) {
    const int out = (m == c.depth) ? c.out_dim : c.width;
    const auto& L = net.layers[m];
    const std::string ctx = "layers[" + std::to_string(m) + "]";
    if (L.W.rows() != out || L.W.cols() != in || L.b.size() != out)
      fail(ErrorCategory::validation, "layer shape mismatch", ctx);
    if (!L.W.allFinite() || !L.b.allFinite()) fail(ErrorCategory::validation, "non-finite weights", ctx);
    in = out;
  }
}

// ---------------------------------------------------------------------------
// Forward evaluation.

struct ForwardCache {
  Matrix input;              // positional encoding, one column per point
  std::vector<Matrix> pre;   // h^(m) for m = 1..4 (index m-1)
  std::vector<Matrix> post;  // relu(h^(m)) for m = 1..4
  Matrix output;             // out_dim x B

  /// Input activation of layer m (1-based): the encoding for m = 1, else relu(h^(m-1)).
  const Matrix& layer_input(int m) const { return m == 1 ? input : post[m - 2]; }
};

inline ForwardCache forward_encoded(const MotionNet& net, const Matrix& encoded) {
  ForwardCache cache;
  cache.input = encoded;
  const Matrix* x = &cache.input;
  for (int m = 0; m < net.config.depth; ++m) {
    Matrix h = net.layers[m].W * (*x);
    h.colwise() += net.layers[m].b;
    if (!h.allFinite()) fail(ErrorCategory::numeric, "non-finite activation", "layer " + std::to_string(m + 1));
    cache.post.push_back(h.cwiseMax(0.0));
    cache.pre.push_back(std::move(h));
    x = &cache.post.back();
  }
  const Layer& head = net.layers.back();
  cache.output = head.W * (*x);
  cache.output.colwise() += head.b;
  if (!cache.output.allFinite())
    fail(ErrorCategory::numeric, "non-finite output", "layer " + std::to_string(net.config.depth + 1));
  return cache;
}

inline ForwardCache forward(const MotionNet& net, const std::vector<Vec3>& xs) {
  return forward_encoded(net, positional_encoding(xs, net.config.frequencies));
}

inline Displacement to_displacement(const Eigen::Ref<const Vector>& out) {
  Displacement d;
  d.dx = out.segment<3>(0);
  d.ds = out.segment<3>(3);
  d.dq = out.segment<4>(6);
  return d;
}

inline DisplacementField displacements(const MotionNet& net, const std::vector<Vec3>& xs) {
  const ForwardCache cache = forward(net, xs);
  DisplacementField field(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) field[i] = to_displacement(cache.output.col(static_cast<Eigen::Index>(i)));
  return field;
}

// ---------------------------------------------------------------------------
// Jacobians with respect to the shaping-layer weight matrix.

/// a: input activation of the shaping layer. G: d(output)/d(h^(l)), out_dim x width.
/// The full Jacobian of output k is the outer product G.row(k)^T a^T.
struct JacobianRecord {
  Vector a;
  Matrix G;
};

namespace detail {

/// G for one column of a forward cache: W5 D4 W4 D3 ... W(l+1) D(l).
inline Matrix head_jacobian(const MotionNet& net, const ForwardCache& cache, Eigen::Index col) {
  const int depth = net.config.depth;
  const int l = net.config.shaping_layer;
  Matrix G = net.layers[depth].W;
  for (int m = depth; m >= l; --m) {
    const auto h = cache.pre[m - 1].col(col);
    for (Eigen::Index c = 0; c < G.cols(); ++c)
      if (!(h[c] > 0.0)) G.col(c).setZero();
    if (m > l) G = G * net.layers[m - 1].W;
  }
  return G;
}

inline bool touches_kink(const ForwardCache& cache, Eigen::Index col) {
  for (const auto& h : cache.pre)
    if ((h.col(col).array() == 0.0).any()) return true;
  return false;
}

}  // namespace detail

/// Evaluates the Jacobian record at a single position. Points landing exactly
/// on a ReLU kink are nudged by 1e-12 so the masks are locally constant.
inline JacobianRecord jacobian_record(const MotionNet& net, const Vec3& x) {
  ForwardCache cache = forward(net, {x});
  if (detail::touches_kink(cache, 0)) cache = forward(net, {Vec3(x.array() + 1e-12)});
  return {cache.layer_input(net.config.shaping_layer).col(0), detail::head_jacobian(net, cache, 0)};
}

/// Jacobian records for many points, stacked column-wise: A is in_dim x B, and
/// column i of G holds vec(G_i) (column-major, out_dim * width entries).
struct JacobianBatch {
  Matrix A;
  Matrix G;
  int out_dim = kOutDim;
  int width = 0;

  Eigen::Index size() const { return A.cols(); }
  Eigen::Map<const Matrix> g(Eigen::Index i) const { return {G.col(i).data(), out_dim, width}; }
  /// Frobenius norm of the full Jacobian, ||G_i|| ||a_i||.
  double norm(Eigen::Index i) const { return G.col(i).norm() * A.col(i).norm(); }
};

inline JacobianBatch jacobian_batch(const MotionNet& net, const std::vector<Vec3>& xs) {
  const int l = net.config.shaping_layer;
  const ForwardCache cache = forward(net, xs);
  JacobianBatch batch;
  batch.out_dim = net.config.out_dim;
  batch.width = static_cast<int>(net.layers[l - 1].W.rows());
  batch.A = cache.layer_input(l);
  batch.G.resize(static_cast<Eigen::Index>(batch.out_dim) * batch.width, batch.A.cols());
  for (Eigen::Index i = 0; i < batch.A.cols(); ++i) {
    Matrix G;
    if (detail::touches_kink(cache, i)) {
      const JacobianRecord r = jacobian_record(net, xs[static_cast<std::size_t>(i)]);
      batch.A.col(i) = r.a;
      G = r.G;
    } else {
      G = detail::head_jacobian(net, cache, i);
    }
    batch.G.col(i) = Eigen::Map<const Vector>(G.data(), G.size());
  }
  return batch;
}

/// Cosine of the flattened full Jacobians dPhi_i, dPhi_j via the rank-one
/// closed form; 0 when either Jacobian vanishes.
inline double jacobian_cosine(const JacobianBatch& b, Eigen::Index i, Eigen::Index j) {
  const double den = b.norm(i) * b.norm(j);
  if (!(den > 0.0)) return 0.0;
  return b.G.col(i).dot(b.G.col(j)) * b.A.col(i).dot(b.A.col(j)) / den;
}

/// Cosine of the shaping-layer activations (equivalently of dh^(l)/dW^(l)).
inline double activation_cosine(const JacobianBatch& b, Eigen::Index i, Eigen::Index j) {
  const double den = b.A.col(i).norm() * b.A.col(j).norm();
  if (!(den > 0.0)) return 0.0;
  return b.A.col(i).dot(b.A.col(j)) / den;
}

inline Vector jacobian_h(const MotionNet& net, const Vec3& x) { return jacobian_record(net, x).a; }

inline void require_unit(const Vector& u) {
  if (u.size() != kOutDim) fail(ErrorCategory::argument, "direction u must have 10 components", "u");
  if (std::abs(u.norm() - 1.0) > 1e-6) fail(ErrorCategory::argument, "direction u must be unit length", "u");
}

/// n = d(u^T Phi(x)) / dW^(l) = (G^T u) a^T, shaped like W^(l).
inline Matrix jacobian_phi(const MotionNet& net, const Vec3& x, const Vector& u) {
  require_unit(u);
  const JacobianRecord r = jacobian_record(net, x);
  return (r.G.transpose() * u) * r.a.transpose();
}

inline double jacobian_norm(const MotionNet& net, const Vec3& x) {
  const JacobianRecord r = jacobian_record(net, x);
  return r.G.norm() * r.a.norm();
}

/// Returns a new network with W^(l) <- W^(l) + scale * n.
inline MotionNet perturb_weights(const MotionNet& net, const Matrix& n, double scale) {
  const Matrix& W = net.shaping_weight();
  if (n.rows() != W.rows() || n.cols() != W.cols())
    fail(ErrorCategory::argument, "perturbation shape does not match the shaping layer", "n");
  MotionNet out = net;
  if (scale != 0.0) out.layers[out.shaping_index()].W += scale * n;
  return out;
}

/// Unit vector selecting one output channel (0..9). Channel 2 is dx_z, the height axis.
inline Vector output_axis(int channel) {
  Vector u = Vector::Zero(kOutDim);
  u[channel] = 1.0;
  return u;
}

/// Lifts a world-space motion direction onto the dx block of the output.
inline Vector direction_from_xyz(const Vec3& dir) {
  const double n = dir.norm();
  if (!(n > 0.0)) fail(ErrorCategory::argument, "direction must be non-zero", "u");
  Vector u = Vector::Zero(kOutDim);
  u.segment<3>(0) = dir / n;
  return u;
}

// ---------------------------------------------------------------------------
// Checkpoints.

inline nlohmann::json config_to_json(const NetConfig& c) {
  return {{"frequencies", c.frequencies}, {"width", c.width},       {"depth", c.depth},
          {"shaping_layer", c.shaping_layer}, {"out_dim", c.out_dim}, {"seed", c.seed}};
}

inline NetConfig config_from_json(const nlohmann::json& j) {
  NetConfig c;
  auto get_int = [&](const char* key, int& dst) {
    if (!j.contains(key)) return;
    if (!j[key].is_number_integer()) fail(ErrorCategory::parse, std::string(key) + " must be an integer", std::string("config.") + key);
    dst = j[key].get<int>();
  };
  get_int("frequencies", c.frequencies);
  get_int("width", c.width);
  get_int("depth", c.depth);
  get_int("shaping_layer", c.shaping_layer);
  get_int("out_dim", c.out_dim);
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  return c;
}

inline nlohmann::json net_to_json(const MotionNet& net) {
  nlohmann::json j;
  j["version"] = kCheckpointVersion;
  j["config"] = config_to_json(net.config);
  auto layers = nlohmann::json::array();
  for (const auto& L : net.layers) {
    nlohmann::json e;
    e["rows"] = L.W.rows();
    e["cols"] = L.W.cols();
    auto W = nlohmann::json::array();
    for (Eigen::Index r = 0; r < L.W.rows(); ++r)
      for (Eigen::Index c = 0; c < L.W.cols(); ++c) W.push_back(L.W(r, c));
    e["W"] = std::move(W);
    auto b = nlohmann::json::array();
    for (Eigen::Index r = 0; r < L.b.size(); ++r) b.push_back(L.b[r]);
    e["b"] = std::move(b);
    layers.push_back(std::move(e));
  }
  j["layers"] = std::move(layers);
  return j;
}

inline MotionNet net_from_json(const nlohmann::json& j) {
  const auto& version = detail::require(j, "version", "checkpoint");
  if (!version.is_number_integer() || version.get<int>() != kCheckpointVersion)
    fail(ErrorCategory::parse, "unsupported checkpoint version " + version.dump(), "checkpoint.version");
  MotionNet net;
  net.config = config_from_json(detail::require(j, "config", "checkpoint"));
  validate(net.config);
  const auto& layers = detail::require(j, "layers", "checkpoint");
  if (!layers.is_array()) fail(ErrorCategory::parse, "layers must be an array", "checkpoint.layers");
  int in = net.config.input_dim();
  for (std::size_t m = 0; m < layers.size(); ++m) {
    const std::string ctx = "layers[" + std::to_string(m) + "]";
    const auto& e = layers[m];
    const int out = (static_cast<int>(m) == net.config.depth) ? net.config.out_dim : net.config.width;
    const auto& W = detail::require(e, "W", ctx);
    const auto& b = detail::require(e, "b", ctx);
    if (!W.is_array() || W.size() != static_cast<std::size_t>(out) * in)
      fail(ErrorCategory::validation, "W has wrong number of entries", ctx + ".W");
    if (!b.is_array() || b.size() != static_cast<std::size_t>(out))
      fail(ErrorCategory::validation, "b has wrong number of entries", ctx + ".b");
    Layer L{Matrix(out, in), Vector(out)};
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < in; ++c) {
        const auto& v = W[static_cast<std::size_t>(r) * in + c];
        if (!v.is_number()) fail(ErrorCategory::parse, "expected number", ctx + ".W");
        L.W(r, c) = v.get<double>();
      }
    for (int r = 0; r < out; ++r) {
      if (!b[r].is_number()) fail(ErrorCategory::parse, "expected number", ctx + ".b");
      L.b[r] = b[r].get<double>();
    }
    net.layers.push_back(std::move(L));
    in = out;
  }
  validate(net);
  return net;
}

inline void save_net(const MotionNet& net, const std::string& path) {
  detail::write_file(path, net_to_json(net).dump());
}

inline MotionNet load_net(const std::string& path) {
  try {
    return net_from_json(detail::parse_json_text(detail::read_file(path), path));
  } catch (const Error& e) {
    if (e.category() == ErrorCategory::io) throw;
    throw Error(e.category(), std::string(e.what()), path + ": " + e.context());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCategory::parse, e.what(), path);
  }
}

}  // namespace mishape
