#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gos/engine.hpp"

// Graph operations over the node-feature set of one sample.
//
// Nodes are stored frame-major: node i belongs to frame i / K, and every
// frame holds exactly K nodes. Each *_pre function returns the operation's
// pre-activation output; apply_operation() adds the LayerNorm + LeakyReLU
// activation where the operation has one.
namespace gos {

enum class OpKind {
  zero,
  identity,
  feature_aggregation,
  difference_propagation,
  temporal_convolution,
  background_incorporation,
  node_attention,
};

inline constexpr OpKind kAllOpKinds[] = {
    OpKind::zero,
    OpKind::identity,
    OpKind::feature_aggregation,
    OpKind::difference_propagation,
    OpKind::temporal_convolution,
    OpKind::background_incorporation,
    OpKind::node_attention,
};

std::string_view op_name(OpKind kind);
OpKind parse_op_kind(std::string_view name);
bool has_activation(OpKind kind);

struct NodeSet {
  Tensor features;   // [T*K x C]
  Tensor positions;  // [T*K x 3], normalized (x, y, t)
  std::size_t frames = 0;
  std::size_t nodes_per_frame = 0;

  std::size_t size() const { return frames * nodes_per_frame; }
  std::size_t channels() const { return features.cols(); }
  std::size_t frame_of(std::size_t node) const { return node / nodes_per_frame; }
  void validate() const;
  friend bool operator==(const NodeSet&, const NodeSet&) = default;
};

struct BackgroundMap {
  Tensor maps;  // [T*h*w x C], frame-major, cells row-major within a frame
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t cells() const { return height * width; }
  void validate() const;
  friend bool operator==(const BackgroundMap&, const BackgroundMap&) = default;
};

// Per-sample context shared by every supernode of the cell.
struct Geometry {
  std::size_t frames = 0;
  std::size_t nodes_per_frame = 0;
  const Tensor* positions = nullptr;
  std::optional<Var> background;  // [T*cells x C] in the cell's channel space
  std::size_t cells = 0;
};

struct OpSettings {
  std::size_t attention_m = 5;
  double dropout_rate = 0.3;
  double leaky_slope = 0.01;
  double ln_eps = 1e-5;
  // Skip LayerNorm + LeakyReLU (pre-activation probe for tests).
  bool bypass_activation = false;
};

struct OpDims {
  std::size_t channels = 256;
  std::size_t cells = 49;
  std::size_t attention_m = 5;
  std::size_t kernel_size = 7;
};

// Parameter handles of one operation instance. Unused slots stay empty.
struct OperationParams {
  OpKind kind = OpKind::zero;
  std::optional<ParamId> w;        // W_f, W_d, W_t kernel, W_b or W_n
  std::optional<ParamId> u;        // U_f, U_d, U_b
  std::optional<ParamId> v;        // V_b
  std::optional<ParamId> ln_gain;
  std::optional<ParamId> ln_bias;
};

OperationParams create_operation_params(ParameterStore& store, OpKind kind, const OpDims& dims,
                                        const std::string& prefix, Rng& rng);

// x_i^T U x_j over all pairs, row-softmax normalized, then aggregate W x_j.
Var feature_aggregation_pre(Var x, Var w, Var u);
// sum_{j != i} a_ij W (x_i - x_j) with the diagonal masked out of the affinity rows.
Var difference_propagation_pre(Var x, Var w, Var u);
// Convolves each node's nearest-node sequence with kernel [k x C_out x C_in]
// and reads the result at the node's own frame.
Var temporal_convolution_pre(Var x, Var kernel, std::size_t frames, std::size_t nodes_per_frame);
// Relation branch V_b a_i plus aggregation branch sum_j a_ij W_b y_j over the
// node's frame of the background map [T*cells x C].
Var background_incorporation_pre(Var x, Var background, Var u, Var v, Var w, std::size_t frames,
                                 std::size_t nodes_per_frame, std::size_t cells);
// Gates each node by sigmoid(W_n [a; ds]) from its top-M most similar nodes.
Var node_attention(Var x, Var w, const Tensor& positions, std::size_t m);
Var zero_op(Var x, std::size_t out_channels);
Var identity_op(Var x, double dropout_rate);
// Per-node linear map x W^T, W: [C_out x C_in].
Var channel_project(Var x, Var w);

// Index helpers shared with the operations above.
// For node i, the node of frame tau maximizing <x_i, x_j>; ties to the lower index.
std::size_t nearest_in_frame(const Tensor& features, std::size_t node, std::size_t frame,
                             std::size_t nodes_per_frame);
// Top-M most similar other nodes of `node` by inner product; ties to the lower index.
std::vector<std::size_t> attention_neighbors(const Tensor& features, std::size_t node, std::size_t m);

Var apply_operation(const OperationParams& op, const ParameterStore& store, Var x, const Geometry& geom,
                    const OpSettings& settings, bool trainable = true);

// Evaluation-mode convenience on plain data; positions and layout pass through.
NodeSet run_operation(const OperationParams& op, const ParameterStore& store, const NodeSet& nodes,
                      const BackgroundMap* background, const OpSettings& settings);

}  // namespace gos
