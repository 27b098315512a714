#pragma once

// Contrastive shaping of the motion network. Positive pairs (same object)
// have their shaping-layer activations pulled into alignment, negative pairs
// (different objects) pushed towards orthogonality, with a kNN smoothness term
// and a unit-norm penalty on the full Jacobian.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mishape/error.hpp"
#include "mishape/motion_net.hpp"
#include "mishape/scene.hpp"
#include "mishape/tape.hpp"

namespace mishape {

enum class MiMode {
  activation,     // cos(a_i, a_j): the shaping-layer activation (default)
  full_jacobian,  // cos(dPhi_i, dPhi_j): point-wise baseline
};

enum class RegMode {
  jacobian,  // cos of flattened full Jacobians
  output,    // cos of raw network outputs
};

struct ShapingConfig {
  double lambda_reg = 0.1;
  double lambda_norm = 1.0;
  double lr = 1e-3;
  int iterations = 400;
  int batch = 512;
  int k = 8;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  MiMode mi_mode = MiMode::activation;
  RegMode reg_mode = RegMode::jacobian;
  int probe_size = 512;
};

inline void validate(const ShapingConfig& c, std::size_t n) {
  if (!(c.lambda_reg >= 0.0) || !(c.lambda_norm >= 0.0))
    fail(ErrorCategory::config, "loss weights must be non-negative", "lambda");
  if (!(c.lr > 0.0)) fail(ErrorCategory::config, "learning rate must be positive", "lr");
  if (c.iterations < 0) fail(ErrorCategory::config, "iterations must be non-negative", "iterations");
  if (c.batch < 2 || static_cast<std::size_t>(c.batch) > n)
    fail(ErrorCategory::config, "batch must lie in 2..N", "batch");
  if (c.k < 1 || static_cast<std::size_t>(c.k) >= n) fail(ErrorCategory::config, "k must lie in 1..N-1", "k");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0 && c.beta2 >= 0.0 && c.beta2 < 1.0 && c.epsilon > 0.0))
    fail(ErrorCategory::config, "invalid Adam constants", "adam");
}

/// Config file: every field optional. A "net" object, when present, is read
/// by the caller as a NetConfig.
inline ShapingConfig shaping_config_from_json(const nlohmann::json& j, ShapingConfig c = {}) {
  if (!j.is_object()) fail(ErrorCategory::parse, "shaping config must be an object", "config");
  auto num = [&](const char* key, double& dst) {
    if (!j.contains(key)) return;
    if (!j[key].is_number()) fail(ErrorCategory::parse, std::string(key) + " must be a number", key);
    dst = j[key].get<double>();
  };
  auto integer = [&](const char* key, int& dst) {
    if (!j.contains(key)) return;
    if (!j[key].is_number_integer()) fail(ErrorCategory::parse, std::string(key) + " must be an integer", key);
    dst = j[key].get<int>();
  };
  num("lambda_reg", c.lambda_reg);
  num("lambda_norm", c.lambda_norm);
  num("lr", c.lr);
  num("beta1", c.beta1);
  num("beta2", c.beta2);
  num("epsilon", c.epsilon);
  integer("iterations", c.iterations);
  integer("batch", c.batch);
  integer("k", c.k);
  integer("probe_size", c.probe_size);
  if (j.contains("seed")) {
    if (!j["seed"].is_number_integer()) fail(ErrorCategory::parse, "seed must be an integer", "seed");
    c.seed = j["seed"].get<std::uint64_t>();
  }
  if (j.contains("mi_mode")) {
    const std::string m = j["mi_mode"].get<std::string>();
    if (m == "activation") c.mi_mode = MiMode::activation;
    else if (m == "full_jacobian" || m == "jacobigs") c.mi_mode = MiMode::full_jacobian;
    else fail(ErrorCategory::parse, "unknown mi_mode '" + m + "'", "mi_mode");
  }
  if (j.contains("reg_mode")) {
    const std::string m = j["reg_mode"].get<std::string>();
    if (m == "jacobian") c.reg_mode = RegMode::jacobian;
    else if (m == "output") c.reg_mode = RegMode::output;
    else fail(ErrorCategory::parse, "unknown reg_mode '" + m + "'", "reg_mode");
  }
  return c;
}

inline nlohmann::json shaping_config_to_json(const ShapingConfig& c) {
  return {{"lambda_reg", c.lambda_reg}, {"lambda_norm", c.lambda_norm}, {"lr", c.lr}, {"iterations", c.iterations},
          {"batch", c.batch}, {"k", c.k}, {"seed", c.seed}, {"beta1", c.beta1}, {"beta2", c.beta2},
          {"epsilon", c.epsilon}, {"mi_mode", c.mi_mode == MiMode::activation ? "activation" : "full_jacobian"},
          {"reg_mode", c.reg_mode == RegMode::jacobian ? "jacobian" : "output"}, {"probe_size", c.probe_size}};
}

// ---------------------------------------------------------------------------
// Pair sampling.

using IdPair = std::pair<int, int>;

struct PairSet {
  std::vector<IdPair> positive;
  std::vector<IdPair> negative;
};

/// Every positive and negative pair in a batch (pairs hold Gaussian ids,
/// i < j in batch order). Label 0 never participates.
inline PairSet enumerate_pairs(const std::vector<int>& batch, const std::vector<int>& labels) {
  PairSet out;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const int li = labels[batch[i]];
    if (li == 0) continue;
    for (std::size_t j = i + 1; j < batch.size(); ++j) {
      const int lj = labels[batch[j]];
      if (lj == 0) continue;
      (li == lj ? out.positive : out.negative).emplace_back(batch[i], batch[j]);
    }
  }
  return out;
}

namespace detail {

template <typename T>
void shuffle_prefix(std::vector<T>& v, std::size_t count, std::mt19937_64& rng) {
  count = std::min(count, v.size());
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(v.size() - i));
    std::swap(v[i], v[std::min(j, v.size() - 1)]);
  }
}

}  // namespace detail

/// Balanced positive/negative pairs for one batch, or nullopt when the batch
/// holds fewer than two distinct object labels (the caller resamples). When
/// both kinds exist each is subsampled to min(#positive, #negative).
inline std::optional<PairSet> sample_pairs(const std::vector<int>& batch, const std::vector<int>& labels,
                                           std::mt19937_64& rng) {
  std::vector<int> seen;
  for (int id : batch) {
    const int l = labels[id];
    if (l != 0 && std::find(seen.begin(), seen.end(), l) == seen.end()) seen.push_back(l);
  }
  if (seen.size() < 2) return std::nullopt;
  PairSet all = enumerate_pairs(batch, labels);
  if (!all.positive.empty() && !all.negative.empty()) {
    const std::size_t m = std::min(all.positive.size(), all.negative.size());
    detail::shuffle_prefix(all.positive, m, rng);
    detail::shuffle_prefix(all.negative, m, rng);
    all.positive.resize(m);
    all.negative.resize(m);
  }
  return all;
}

inline std::vector<int> sample_batch(std::size_t n, int batch, std::mt19937_64& rng) {
  std::vector<int> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<int>(i);
  detail::shuffle_prefix(ids, static_cast<std::size_t>(batch), rng);
  ids.resize(static_cast<std::size_t>(batch));
  return ids;
}

/// Draws a batch with at least two labelled objects, retrying up to 10 times.
inline std::pair<std::vector<int>, PairSet> draw_batch(std::size_t n, const std::vector<int>& labels, int batch,
                                                       std::mt19937_64& rng) {
  for (int attempt = 0; attempt <= 10; ++attempt) {
    auto ids = sample_batch(n, batch, rng);
    if (auto pairs = sample_pairs(ids, labels, rng)) return {std::move(ids), std::move(*pairs)};
  }
  fail(ErrorCategory::config, "batches keep containing fewer than two labelled objects after 10 resamples", "labels");
}

// ---------------------------------------------------------------------------
// Losses on the tape.

struct LossTerms {
  double mi = 0.0;
  double reg = 0.0;
  double norm = 0.0;
  double total = 0.0;
  int skipped_pairs = 0;
  bool negatives_empty = false;
};

namespace detail {

using autodiff::Var;

/// Cosine per pair between columns of X, given its column norms.
inline Var pair_cosine(Var X, Var norms, const std::vector<int>& I, const std::vector<int>& J) {
  using namespace autodiff;
  return div(pair_dot(X, I, J), mul(select(norms, I), select(norms, J)));
}

struct PairIndex {
  std::vector<int> I, J;
  bool empty() const { return I.empty(); }
};

}  // namespace detail

/// Contrastive term as a value to minimise:
///   mean_pos sp(-cos) + mean_neg sp(cos).
/// `cos_pos`/`cos_neg` are 1 x P rows on a tape; either may be absent.
inline autodiff::Var contrastive_loss(std::optional<autodiff::Var> cos_pos, std::optional<autodiff::Var> cos_neg,
                                      autodiff::Tape& tape) {
  using namespace autodiff;
  std::optional<Var> out;
  if (cos_pos) out = mean(softplus(scale(*cos_pos, -1.0)));
  if (cos_neg) {
    Var neg = mean(softplus(*cos_neg));
    out = out ? add(*out, neg) : neg;
  }
  if (!out) return tape.constant(Matrix::Zero(1, 1));
  return *out;
}

/// L_MI evaluated on plain activation vectors (one column per Gaussian id).
/// Pairs touching a zero vector are skipped and counted.
inline LossTerms loss_mi(const Matrix& activations, const PairSet& pairs) {
  autodiff::Tape tape;
  auto A = tape.constant(activations);
  auto norms = autodiff::col_norm(A);
  LossTerms terms;
  auto build = [&](const std::vector<IdPair>& list) -> std::optional<autodiff::Var> {
    detail::PairIndex idx;
    for (auto [i, j] : list) {
      if (tape.value(norms)(0, i) == 0.0 || tape.value(norms)(0, j) == 0.0) {
        ++terms.skipped_pairs;
        continue;
      }
      idx.I.push_back(i);
      idx.J.push_back(j);
    }
    if (idx.empty()) return std::nullopt;
    return detail::pair_cosine(A, norms, idx.I, idx.J);
  };
  auto pos = build(pairs.positive);
  auto neg = build(pairs.negative);
  terms.negatives_empty = !neg.has_value();
  terms.mi = tape.value(contrastive_loss(pos, neg, tape))(0, 0);
  terms.total = terms.mi;
  return terms;
}

struct Gradients {
  std::vector<Matrix> dW;
  std::vector<Vector> db;
  LossTerms terms;
};

/// Everything grad_total needs besides the network.
struct ShapingBatch {
  std::vector<Vec3> positions;   // all scene centroids (network inputs)
  std::vector<int> batch;        // Gaussian ids in the batch
  PairSet pairs;                 // contrastive pairs (ids)
  const NeighborTable* neighbors = nullptr;  // kNN table, required when lambda_reg > 0
};

namespace detail {

struct LossGraph {
  autodiff::Tape tape;
  std::vector<autodiff::Var> W, b;
  std::optional<autodiff::Var> mi, reg, norm;
  autodiff::Var total;
  LossTerms terms;
};

inline void build_loss_graph(LossGraph& g, const MotionNet& net, const ShapingBatch& sb, const ShapingConfig& cfg) {
  using namespace autodiff;
  Tape& tape = g.tape;
  const int l = net.config.shaping_layer;
  const int depth = net.config.depth;
  const bool need_reg = cfg.lambda_reg > 0.0;
  const bool need_norm = cfg.lambda_norm > 0.0;
  const bool need_head = need_norm || (need_reg && cfg.reg_mode == RegMode::jacobian) ||
                         cfg.mi_mode == MiMode::full_jacobian;
  if (need_reg && sb.neighbors == nullptr) fail(ErrorCategory::argument, "kNN table required for L_reg", "neighbors");

  // Column layout: every Gaussian touched by the batch, its pairs or its neighbours.
  std::unordered_map<int, int> column;
  std::vector<int> ids;
  auto col_of = [&](int id) {
    auto [it, inserted] = column.emplace(id, static_cast<int>(ids.size()));
    if (inserted) ids.push_back(id);
    return it->second;
  };
  for (int id : sb.batch) col_of(id);
  for (auto [i, j] : sb.pairs.positive) col_of(i), col_of(j);
  for (auto [i, j] : sb.pairs.negative) col_of(i), col_of(j);
  if (need_reg)
    for (int id : sb.batch)
      for (int nb : (*sb.neighbors)[id]) col_of(nb);

  std::vector<Vec3> xs(ids.size());
  for (std::size_t c = 0; c < ids.size(); ++c) xs[c] = sb.positions[ids[c]];
  Var X = tape.constant(positional_encoding(xs, net.config.frequencies));

  for (const auto& L : net.layers) {
    g.W.push_back(tape.parameter(L.W));
    g.b.push_back(tape.parameter(Matrix(L.b)));
  }

  for (int m = 1; m < l; ++m) X = relu(add_bias(matmul(g.W[m - 1], X), g.b[m - 1]));
  const Var A = X;
  const Var nA = col_norm(A);

  // Masks of layers l..depth, held constant.
  std::vector<Matrix> pre(depth + 1);
  {
    Matrix h = tape.value(A);
    for (int m = l; m <= depth; ++m) {
      Matrix z = net.layers[m - 1].W * h;
      z.colwise() += net.layers[m - 1].b;
      h = z.cwiseMax(0.0);
      pre[m] = std::move(z);
    }
  }

  // Head factor G of the full Jacobian: pairwise <G_i, G_j> and norms ||G_i||.
  std::function<Var(const std::vector<int>&, const std::vector<int>&)> head_dot;
  std::optional<Var> nG;
  if (need_head) {
    if (l == depth) {
      // G_i = W_head diag(mask_i): inner products reduce to weighted mask overlaps.
      Matrix mask = (pre[depth].array() > 0.0).cast<double>().matrix();
      Var Wh = g.W[depth];
      head_dot = [Wh, mask](const std::vector<int>& I, const std::vector<int>& J) {
        return masked_weight_dot(Wh, mask, I, J);
      };
      std::vector<int> all(ids.size());
      for (std::size_t c = 0; c < all.size(); ++c) all[c] = static_cast<int>(c);
      nG = safe_sqrt(head_dot(all, all));
    } else {
      std::vector<Var> weights;
      std::vector<Matrix> masks;
      for (int m = depth; m >= l; --m) {
        weights.push_back(g.W[m]);  // W^(m+1)
        masks.push_back((pre[m].array() > 0.0).cast<double>().matrix());
      }
      Var Gs = masked_chain(weights, std::move(masks));
      head_dot = [Gs](const std::vector<int>& I, const std::vector<int>& J) { return pair_dot(Gs, I, J); };
      nG = col_norm(Gs);
    }
  }

  auto full_norm = [&](int c) { return tape.value(nA)(0, c) * (nG ? tape.value(*nG)(0, c) : 1.0); };
  auto full_cosine = [&](const PairIndex& idx) {
    Var cos_g = div(head_dot(idx.I, idx.J), mul(select(*nG, idx.I), select(*nG, idx.J)));
    return mul(pair_cosine(A, nA, idx.I, idx.J), cos_g);
  };

  // Contrastive term.
  auto cosines = [&](const std::vector<IdPair>& list) -> std::optional<Var> {
    PairIndex idx;
    for (auto [i, j] : list) {
      const int ci = column.at(i), cj = column.at(j);
      const bool zero = cfg.mi_mode == MiMode::full_jacobian ? (full_norm(ci) == 0.0 || full_norm(cj) == 0.0)
                                                             : (tape.value(nA)(0, ci) == 0.0 || tape.value(nA)(0, cj) == 0.0);
      if (zero) {
        ++g.terms.skipped_pairs;
        continue;
      }
      idx.I.push_back(ci);
      idx.J.push_back(cj);
    }
    if (idx.empty()) return std::nullopt;
    return cfg.mi_mode == MiMode::full_jacobian ? full_cosine(idx) : pair_cosine(A, nA, idx.I, idx.J);
  };
  auto pos = cosines(sb.pairs.positive);
  auto neg = cosines(sb.pairs.negative);
  g.terms.negatives_empty = !neg.has_value();
  g.mi = contrastive_loss(pos, neg, tape);
  Var total = *g.mi;

  if (need_reg) {
    PairIndex idx;
    std::optional<Var> Y, nY;
    if (cfg.reg_mode == RegMode::output) {
      Var H = A;
      for (int m = l; m <= depth; ++m) H = relu(add_bias(matmul(g.W[m - 1], H), g.b[m - 1]));
      Y = add_bias(matmul(g.W[depth], H), g.b[depth]);
      nY = col_norm(*Y);
    }
    for (int id : sb.batch) {
      const int ci = column.at(id);
      for (int nb : (*sb.neighbors)[id]) {
        const int cj = column.at(nb);
        const bool zero = cfg.reg_mode == RegMode::output
                              ? (tape.value(*nY)(0, ci) == 0.0 || tape.value(*nY)(0, cj) == 0.0)
                              : (full_norm(ci) == 0.0 || full_norm(cj) == 0.0);
        if (zero) continue;
        idx.I.push_back(ci);
        idx.J.push_back(cj);
      }
    }
    if (!idx.empty()) {
      Var cos = cfg.reg_mode == RegMode::output ? pair_cosine(*Y, *nY, idx.I, idx.J) : full_cosine(idx);
      g.reg = mean(add_scalar(scale(cos, -1.0), 1.0));
      total = add(total, scale(*g.reg, cfg.lambda_reg));
    }
  }

  if (need_norm) {
    std::vector<int> cols;
    for (int id : sb.batch) cols.push_back(column.at(id));
    Var n = mul(select(nA, cols), select(*nG, cols));
    g.norm = mean(square(add_scalar(scale(n, -1.0), 1.0)));
    total = add(total, scale(*g.norm, cfg.lambda_norm));
  }

  g.total = total;
  g.terms.mi = tape.value(*g.mi)(0, 0);
  g.terms.reg = g.reg ? tape.value(*g.reg)(0, 0) : 0.0;
  g.terms.norm = g.norm ? tape.value(*g.norm)(0, 0) : 0.0;
  g.terms.total = tape.value(total)(0, 0);
}

inline bool grads_finite(const LossGraph& g) {
  for (auto v : g.W)
    if (!g.tape.grad(v).allFinite()) return false;
  for (auto v : g.b)
    if (!g.tape.grad(v).allFinite()) return false;
  return true;
}

}  // namespace detail

/// Loss values only (no backward sweep).
inline LossTerms evaluate_losses(const MotionNet& net, const ShapingBatch& sb, const ShapingConfig& cfg) {
  detail::LossGraph g;
  detail::build_loss_graph(g, net, sb, cfg);
  return g.terms;
}

/// Gradient of L_MI + lambda_reg L_reg + lambda_norm L_norm for every layer.
/// ReLU masks above the shaping layer's input are treated as constants.
inline Gradients grad_total(const MotionNet& net, const ShapingBatch& sb, const ShapingConfig& cfg) {
  detail::LossGraph g;
  detail::build_loss_graph(g, net, sb, cfg);
  const auto named = {std::pair{"L_MI", g.mi}, std::pair{"L_reg", g.reg}, std::pair{"L_norm", g.norm}};
  for (const auto& [name, term] : named)
    if (term && !std::isfinite(g.tape.value(*term)(0, 0)))
      fail(ErrorCategory::numeric, "non-finite loss value", name);

  g.tape.backward(g.total);
  if (!detail::grads_finite(g)) {
    for (const auto& [name, term] : named) {
      if (!term) continue;
      g.tape.backward(*term);
      if (!detail::grads_finite(g)) fail(ErrorCategory::numeric, "non-finite gradient", name);
    }
    fail(ErrorCategory::numeric, "non-finite gradient", "total");
  }
  Gradients out;
  out.terms = g.terms;
  for (std::size_t m = 0; m < g.W.size(); ++m) {
    out.dW.push_back(g.tape.grad(g.W[m]));
    out.db.push_back(g.tape.grad(g.b[m]).col(0));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam.

struct AdamState {
  std::vector<Matrix> mW, vW;
  std::vector<Vector> mb, vb;
  long step = 0;
};

inline AdamState adam_init(const MotionNet& net) {
  AdamState s;
  for (const auto& L : net.layers) {
    s.mW.push_back(Matrix::Zero(L.W.rows(), L.W.cols()));
    s.vW.push_back(Matrix::Zero(L.W.rows(), L.W.cols()));
    s.mb.push_back(Vector::Zero(L.b.size()));
    s.vb.push_back(Vector::Zero(L.b.size()));
  }
  return s;
}

namespace detail {

template <typename P, typename G>
void adam_update(P& param, P& m, P& v, const G& grad, const ShapingConfig& c, double bc1, double bc2) {
  m = c.beta1 * m + (1.0 - c.beta1) * grad;
  v = c.beta2 * v + (1.0 - c.beta2) * grad.cwiseAbs2();
  param.array() -= c.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + c.epsilon);
}

}  // namespace detail

/// One bias-corrected Adam step over every layer.
inline void adam_step(MotionNet& net, AdamState& state, const Gradients& grads, const ShapingConfig& cfg) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t m = 0; m < net.layers.size(); ++m) {
    detail::adam_update(net.layers[m].W, state.mW[m], state.vW[m], grads.dW[m], cfg, bc1, bc2);
    detail::adam_update(net.layers[m].b, state.mb[m], state.vb[m], grads.db[m], cfg, bc1, bc2);
  }
}

// ---------------------------------------------------------------------------
// Training loop.

struct TrainRecord {
  int iteration = 0;
  double mi = 0, reg = 0, norm = 0, total = 0;
  double intra_cos = 0, inter_cos = 0;
  int skipped_pairs = 0;
  bool negatives_empty = false;
};

struct TrainLog {
  std::vector<TrainRecord> records;

  std::string to_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "iteration,L_MI,L_reg,L_norm,total,intra_cos,inter_cos,skipped_pairs,negatives_empty\n";
    for (const auto& r : records)
      out << r.iteration << ',' << r.mi << ',' << r.reg << ',' << r.norm << ',' << r.total << ',' << r.intra_cos
          << ',' << r.inter_cos << ',' << r.skipped_pairs << ',' << (r.negatives_empty ? 1 : 0) << '\n';
    return out.str();
  }
};

struct ProbeStats {
  double intra_mean = 0, inter_mean = 0;
  double intra_min = 1, inter_max = 0;
  long intra_pairs = 0, inter_pairs = 0;
};

/// Mean |cos| of shaping-layer activations over all same-label and
/// different-label pairs of `ids` (label 0 ignored).
inline ProbeStats activation_probe(const MotionNet& net, const std::vector<Vec3>& positions,
                                   const std::vector<int>& labels, const std::vector<int>& ids) {
  std::vector<Vec3> xs;
  for (int id : ids) xs.push_back(positions[id]);
  const ForwardCache cache = forward(net, xs);
  Matrix A = cache.layer_input(net.config.shaping_layer);
  const Eigen::RowVectorXd norms = A.colwise().norm();
  const Matrix dots = A.transpose() * A;
  ProbeStats s;
  double intra = 0, inter = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (labels[ids[i]] == 0) continue;
    for (std::size_t j = i + 1; j < ids.size(); ++j) {
      if (labels[ids[j]] == 0) continue;
      const double den = norms[i] * norms[j];
      const double c = den > 0 ? std::abs(dots(i, j)) / den : 0.0;
      if (labels[ids[i]] == labels[ids[j]]) {
        intra += c;
        s.intra_min = std::min(s.intra_min, c);
        ++s.intra_pairs;
      } else {
        inter += c;
        s.inter_max = std::max(s.inter_max, c);
        ++s.inter_pairs;
      }
    }
  }
  s.intra_mean = s.intra_pairs ? intra / static_cast<double>(s.intra_pairs) : 0.0;
  s.inter_mean = s.inter_pairs ? inter / static_cast<double>(s.inter_pairs) : 0.0;
  return s;
}

/// A fixed probe set: `size` Gaussians with non-zero ground-truth label.
inline std::vector<int> sample_probe(const std::vector<int>& gt_labels, int size, std::uint64_t seed) {
  std::vector<int> candidates;
  for (std::size_t i = 0; i < gt_labels.size(); ++i)
    if (gt_labels[i] != 0) candidates.push_back(static_cast<int>(i));
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  detail::shuffle_prefix(candidates, static_cast<std::size_t>(size), rng);
  candidates.resize(std::min(candidates.size(), static_cast<std::size_t>(size)));
  std::sort(candidates.begin(), candidates.end());
  return candidates;
}

/// Gives an all-zero output head random weights scaled so the mean full
/// Jacobian norm over `sample` is one; a zero head has no usable gradient.
inline void warm_start_head(MotionNet& net, const std::vector<Vec3>& sample, std::uint64_t seed) {
  Layer& head = net.layers.back();
  if (!head.W.isZero(0.0)) return;
  std::mt19937_64 rng(seed ^ 0x5deece66dULL);
  for (Eigen::Index r = 0; r < head.W.rows(); ++r)
    for (Eigen::Index c = 0; c < head.W.cols(); ++c) head.W(r, c) = detail::uniform(rng, -1.0, 1.0);
  const JacobianBatch jb = jacobian_batch(net, sample);
  double mean_norm = 0;
  for (Eigen::Index i = 0; i < jb.size(); ++i) mean_norm += jb.norm(i);
  mean_norm /= static_cast<double>(std::max<Eigen::Index>(jb.size(), 1));
  if (mean_norm > 0) head.W /= mean_norm;
}

struct ShapeResult {
  MotionNet net;
  TrainLog log;
  bool diverged = false;
  std::string message;
};

/// Runs the shaping loop. `labels` supervise the pairs (coarse or ground
/// truth); `probe_labels` are ground truth and only feed the log.
inline ShapeResult shape(const MotionNet& initial, const Scene& scene, const std::vector<int>& labels,
                         const ShapingConfig& cfg, std::optional<std::vector<int>> probe_labels = std::nullopt) {
  if (labels.size() != scene.size()) fail(ErrorCategory::argument, "one label per Gaussian required", "labels");
  ShapeResult result{initial, {}, false, {}};
  if (cfg.iterations == 0) return result;
  validate(cfg, scene.size());

  const std::vector<Vec3> positions = mishape::positions(scene);
  const std::vector<int> gt = probe_labels ? *probe_labels : labels_of(scene);
  const NeighborTable neighbors = knn(scene, cfg.k);
  const std::vector<int> probe = sample_probe(gt, cfg.probe_size, cfg.seed);

  std::mt19937_64 rng(cfg.seed);
  MotionNet net = initial;
  {
    std::vector<Vec3> sample;
    for (int id : sample_batch(positions.size(), cfg.batch, rng)) sample.push_back(positions[id]);
    warm_start_head(net, sample, cfg.seed);
  }
  AdamState state = adam_init(net);
  MotionNet last_good = net;

  for (int it = 0; it < cfg.iterations; ++it) {
    auto [batch, pairs] = draw_batch(positions.size(), labels, cfg.batch, rng);
    ShapingBatch sb{positions, std::move(batch), std::move(pairs), &neighbors};
    Gradients grads;
    try {
      grads = grad_total(net, sb, cfg);
    } catch (const Error& e) {
      if (e.category() != ErrorCategory::numeric) throw;
      result.net = last_good;
      result.diverged = true;
      result.message = std::string("diverged at iteration ") + std::to_string(it) + ": " + e.what() + " (" + e.context() + ")";
      return result;
    }
    const ProbeStats ps = activation_probe(net, positions, gt, probe);
    result.log.records.push_back({it, grads.terms.mi, grads.terms.reg, grads.terms.norm, grads.terms.total,
                                  ps.intra_mean, ps.inter_mean, grads.terms.skipped_pairs,
                                  grads.terms.negatives_empty});
    last_good = net;
    adam_step(net, state, grads, cfg);
  }
  result.net = net;
  return result;
}

}  // namespace mishape
