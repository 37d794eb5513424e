#include "gos/graphops.hpp"

#include <cmath>

#include "gos/errors.hpp"
#include "gos/kernels.hpp"

namespace gos {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::zero:
      return "zero";
    case OpKind::identity:
      return "identity";
    case OpKind::feature_aggregation:
      return "feat_aggr";
    case OpKind::difference_propagation:
      return "diff_prop";
    case OpKind::temporal_convolution:
      return "temp_conv";
    case OpKind::background_incorporation:
      return "back_incor";
    case OpKind::node_attention:
      return "node_att";
  }
  return "?";
}

OpKind parse_op_kind(std::string_view name) {
  for (OpKind k : kAllOpKinds)
    if (op_name(k) == name) return k;
  throw ParseError("unknown graph operation '" + std::string(name) + "'");
}

bool has_activation(OpKind kind) {
  switch (kind) {
    case OpKind::feature_aggregation:
    case OpKind::difference_propagation:
    case OpKind::temporal_convolution:
    case OpKind::background_incorporation:
      return true;
    default:
      return false;
  }
}

void NodeSet::validate() const {
  if (frames == 0 || nodes_per_frame == 0) throw ConfigError("node set needs at least one frame and node");
  if (features.rank() != 2 || features.rows() != size())
    throw DimensionError("node features must be [T*K x C], got " + shape_string(features.shape()));
  if (features.cols() < 2) throw DimensionError("node features need C >= 2");
  if (positions.rank() != 2 || positions.rows() != size() || positions.cols() != 3)
    throw DimensionError("node positions must be [T*K x 3]");
  for (double p : positions.values())
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("node positions must lie in [0, 1]");
}

void BackgroundMap::validate() const {
  if (frames == 0 || cells() == 0) throw ConfigError("background map needs frames and cells");
  if (maps.rank() != 2 || maps.rows() != frames * cells())
    throw DimensionError("background map must be [T*h*w x C], got " + shape_string(maps.shape()));
}

namespace {

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

void add_activation_params(ParameterStore& store, OperationParams& p, std::size_t c, const std::string& prefix) {
  p.ln_gain = store.add(prefix + ".ln_gain", Tensor({1, c}, 1.0));
  p.ln_bias = store.add(prefix + ".ln_bias", Tensor({1, c}, 0.0));
}

}  // namespace

OperationParams create_operation_params(ParameterStore& store, OpKind kind, const OpDims& dims,
                                        const std::string& prefix, Rng& rng) {
  const std::size_t c = dims.channels;
  const double dc = static_cast<double>(c);
  OperationParams p;
  p.kind = kind;
  switch (kind) {
    case OpKind::zero:
    case OpKind::identity:
      break;
    case OpKind::feature_aggregation:
    case OpKind::difference_propagation:
      p.w = store.add(prefix + ".W", normal_tensor({c, c}, 1.0 / std::sqrt(dc), rng));
      p.u = store.add(prefix + ".U", normal_tensor({c, c}, 1.0 / dc, rng));
      break;
    case OpKind::temporal_convolution:
      if (dims.kernel_size % 2 == 0) throw ConfigError("temporal kernel size must be odd");
      p.w = store.add(prefix + ".W", normal_tensor({dims.kernel_size, c, c},
                                                   1.0 / std::sqrt(dc * static_cast<double>(dims.kernel_size)), rng));
      break;
    case OpKind::background_incorporation:
      {
        Tensor u = normal_tensor({c, c}, 1.0 / dc, rng);
        for (std::size_t i = 0; i < c; ++i) u(i, i) += 1.0;
        p.u = store.add(prefix + ".U", std::move(u));
      }
      p.v = store.add(prefix + ".V", normal_tensor({c, dims.cells}, 1.0 / std::sqrt(static_cast<double>(dims.cells)), rng));
      p.w = store.add(prefix + ".W", normal_tensor({c, c}, 1.0 / std::sqrt(dc), rng));
      break;
    case OpKind::node_attention:
      p.w = store.add(prefix + ".W", normal_tensor({1, 4 * dims.attention_m}, 0.01, rng));
      break;
  }
  if (has_activation(kind)) add_activation_params(store, p, c, prefix);
  return p;
}

Var channel_project(Var x, Var w) {
  if (w.cols() != x.cols())
    throw DimensionError("channel_project: W expects " + std::to_string(w.cols()) + " input channels, got " +
                         std::to_string(x.cols()));
  return matmul_nt(x, w);
}

Var feature_aggregation_pre(Var x, Var w, Var u) {
  Var logits = matmul_nt(matmul(x, u), x);
  Var affinity = row_softmax(logits);
  return matmul(affinity, matmul_nt(x, w));
}

Var difference_propagation_pre(Var x, Var w, Var u) {
  if (x.rows() < 2) return zero_op(x, w.rows());
  Var logits = matmul_nt(matmul(x, u), x);
  Var affinity = row_softmax(logits, /*exclude_diagonal=*/true);
  // Masked rows sum to one, so sum_{j!=i} a_ij W(x_i - x_j) = W x_i - sum_j a_ij W x_j.
  Var transformed = matmul_nt(x, w);
  return sub(transformed, matmul(affinity, transformed));
}

std::size_t nearest_in_frame(const Tensor& features, std::size_t node, std::size_t frame,
                             std::size_t nodes_per_frame) {
  const std::size_t c = features.cols();
  const double* xi = features.row_ptr(node);
  std::size_t best = frame * nodes_per_frame;
  double best_score = kernels::dot(xi, features.row_ptr(best), c);
  for (std::size_t k = 1; k < nodes_per_frame; ++k) {
    const std::size_t j = frame * nodes_per_frame + k;
    const double s = kernels::dot(xi, features.row_ptr(j), c);
    if (s > best_score) {
      best_score = s;
      best = j;
    }
  }
  return best;
}

Var temporal_convolution_pre(Var x, Var kernel, std::size_t frames, std::size_t nodes_per_frame) {
  const Tensor& kv = kernel.value();
  if (kv.rank() != 3) throw DimensionError("temporal kernel must be [k x C_out x C_in]");
  const std::size_t k = kv.shape()[0], c_out = kv.shape()[1], c_in = kv.shape()[2];
  if (k % 2 == 0) throw ConfigError("temporal kernel size must be odd, got " + std::to_string(k));
  if (x.cols() != c_in) throw DimensionError("temporal_convolution: channel mismatch");
  const std::size_t n = frames * nodes_per_frame;
  if (x.rows() != n) throw DimensionError("temporal_convolution: node count mismatch");

  const Tensor& xv = x.value();
  // sequence[i][tau] = nearest node of frame tau to node i
  std::vector<std::size_t> sequence(n * frames);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t tau = 0; tau < frames; ++tau)
      sequence[i * frames + tau] = nearest_in_frame(xv, i, tau, nodes_per_frame);

  Var flat = reshape(kernel, {k * c_out, c_in});
  const long pad = static_cast<long>(k / 2);
  std::optional<Var> out;
  std::vector<long> index(n);
  for (std::size_t m = 0; m < k; ++m) {
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
      const long tau = static_cast<long>(i / nodes_per_frame) + static_cast<long>(m) - pad;
      if (tau < 0 || tau >= static_cast<long>(frames)) {
        index[i] = -1;
      } else {
        index[i] = static_cast<long>(sequence[i * frames + static_cast<std::size_t>(tau)]);
        any = true;
      }
    }
    if (!any) continue;
    Var tap = matmul_nt(gather_rows(x, index), slice_rows(flat, m * c_out, c_out));
    out = out ? add(*out, tap) : tap;
  }
  return *out;  // the centre tap is always in range
}

Var background_incorporation_pre(Var x, Var background, Var u, Var v, Var w, std::size_t frames,
                                 std::size_t nodes_per_frame, std::size_t cells) {
  if (background.rows() != frames * cells)
    throw DimensionError("background_incorporation: background map has " + std::to_string(background.rows()) +
                         " cells, expected " + std::to_string(frames * cells));
  if (background.cols() != x.cols()) throw DimensionError("background_incorporation: channel mismatch");
  if (v.cols() != cells) throw DimensionError("background_incorporation: V_b must have one column per cell");
  Var xu = matmul(x, u);
  Var yw = matmul_nt(background, w);
  std::vector<Var> per_frame;
  per_frame.reserve(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    Var xu_t = frames == 1 ? xu : slice_rows(xu, t * nodes_per_frame, nodes_per_frame);
    Var y_t = frames == 1 ? background : slice_rows(background, t * cells, cells);
    Var yw_t = frames == 1 ? yw : slice_rows(yw, t * cells, cells);
    Var affinity = row_softmax(matmul_nt(xu_t, y_t));
    Var relation = matmul_nt(affinity, v);
    Var aggregated = matmul(affinity, yw_t);
    per_frame.push_back(add(relation, aggregated));
  }
  return frames == 1 ? per_frame[0] : concat_rows(per_frame);
}

namespace {

// The m highest-scoring nodes other than `node`, scores given by `score(j)`.
template <class Score>
std::vector<std::size_t> top_other_nodes(std::size_t n, std::size_t node, std::size_t m, Score score) {
  std::vector<double> scores;
  std::vector<std::size_t> ids;
  scores.reserve(n);
  ids.reserve(n);
  for (std::size_t j = 0; j < n; ++j) {
    if (j == node) continue;
    scores.push_back(score(j));
    ids.push_back(j);
  }
  std::vector<std::size_t> out;
  for (std::size_t r : top_k(scores, m)) out.push_back(ids[r]);
  return out;
}

}  // namespace

std::vector<std::size_t> attention_neighbors(const Tensor& features, std::size_t node, std::size_t m) {
  const std::size_t c = features.cols();
  return top_other_nodes(features.rows(), node, m, [&](std::size_t j) {
    return kernels::dot(features.row_ptr(node), features.row_ptr(j), c);
  });
}

Var node_attention(Var x, Var w, const Tensor& positions, std::size_t m) {
  const std::size_t n = x.rows();
  if (w.size() != 4 * m) throw DimensionError("node_attention: W_n must hold 4M values");
  if (positions.rows() != n || positions.cols() != 3) throw DimensionError("node_attention: positions must be [N x 3]");
  Var gram = matmul_nt(x, x);
  const Tensor& g = gram.value();
  std::vector<long> pick(n * m, -1);
  Tensor deltas({n, 3 * m});
  for (std::size_t i = 0; i < n; ++i) {
    const auto nbrs = top_other_nodes(n, i, m, [&](std::size_t j) { return g(i, j); });
    for (std::size_t r = 0; r < nbrs.size(); ++r) {
      pick[i * m + r] = static_cast<long>(i * n + nbrs[r]);
      for (std::size_t d = 0; d < 3; ++d) deltas(i, 3 * r + d) = positions(i, d) - positions(nbrs[r], d);
    }
  }
  Tape& tape = *x.tape();
  const Var parts[] = {gather_elements(gram, n, m, pick), tape.constant(std::move(deltas))};
  Var features = concat_cols(parts);
  Var gate = sigmoid(matmul_nt(features, w));
  return scale_rows(x, gate);
}

Var zero_op(Var x, std::size_t out_channels) {
  return x.tape()->constant(Tensor({x.rows(), out_channels}));
}

Var identity_op(Var x, double dropout_rate) { return dropout(x, dropout_rate); }

Var apply_operation(const OperationParams& op, const ParameterStore& store, Var x, const Geometry& geom,
                    const OpSettings& settings, bool trainable) {
  Tape& tape = *x.tape();
  auto p = [&](const std::optional<ParamId>& id) { return tape.param(store, *id, trainable); };
  Var pre;
  switch (op.kind) {
    case OpKind::zero:
      return zero_op(x, x.cols());
    case OpKind::identity:
      return identity_op(x, settings.dropout_rate);
    case OpKind::node_attention:
      if (!geom.positions) throw ConfigError("node_attention requires node positions");
      return node_attention(x, p(op.w), *geom.positions, settings.attention_m);
    case OpKind::feature_aggregation:
      pre = feature_aggregation_pre(x, p(op.w), p(op.u));
      break;
    case OpKind::difference_propagation:
      pre = difference_propagation_pre(x, p(op.w), p(op.u));
      break;
    case OpKind::temporal_convolution:
      pre = temporal_convolution_pre(x, p(op.w), geom.frames, geom.nodes_per_frame);
      break;
    case OpKind::background_incorporation:
      if (!geom.background) throw ConfigError("background_incorporation requires a background map");
      pre = background_incorporation_pre(x, *geom.background, p(op.u), p(op.v), p(op.w), geom.frames,
                                         geom.nodes_per_frame, geom.cells);
      break;
  }
  if (settings.bypass_activation) return pre;
  return layernorm_leakyrelu(pre, p(op.ln_gain), p(op.ln_bias), settings.leaky_slope, settings.ln_eps);
}

NodeSet run_operation(const OperationParams& op, const ParameterStore& store, const NodeSet& nodes,
                      const BackgroundMap* background, const OpSettings& settings) {
  nodes.validate();
  Tape tape(false);
  Geometry geom;
  geom.frames = nodes.frames;
  geom.nodes_per_frame = nodes.nodes_per_frame;
  geom.positions = &nodes.positions;
  if (background) {
    background->validate();
    if (background->frames != nodes.frames) throw DimensionError("background frame count differs from nodes");
    geom.background = tape.constant(background->maps);
    geom.cells = background->cells();
  }
  Var out = apply_operation(op, store, tape.constant(nodes.features), geom, settings, false);
  NodeSet result = nodes;
  result.features = out.value();
  return result;
}

}  // namespace gos
