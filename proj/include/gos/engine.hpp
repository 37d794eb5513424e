#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "gos/tensor.hpp"

// Reverse-mode differentiation over dense tensors.
//
// A Tape records every operation of one forward pass in creation order, which
// is a topological order of the computation graph; backward() walks it in
// reverse exactly once. Parameters live in a ParameterStore and enter a tape
// as read-only leaves; after backward() their gradients are added into a
// GradStore, so several tapes (one per sample) can be reduced in a fixed
// order by the caller.
namespace gos {

using ParamId = std::size_t;
using Rng = std::mt19937_64;

class ParameterStore {
 public:
  ParamId add(std::string name, Tensor value);
  std::size_t size() const { return values_.size(); }
  const Tensor& value(ParamId id) const { return values_.at(id); }
  Tensor& value(ParamId id) { return values_.at(id); }
  const std::string& name(ParamId id) const { return names_.at(id); }
  std::optional<ParamId> find(std::string_view name) const;
  std::size_t scalar_count() const;

  friend bool operator==(const ParameterStore& a, const ParameterStore& b) {
    return a.names_ == b.names_ && a.values_ == b.values_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, ParamId> index_;
};

class GradStore {
 public:
  GradStore() = default;
  explicit GradStore(const ParameterStore& store);
  Tensor& operator[](ParamId id) { return grads_.at(id); }
  const Tensor& operator[](ParamId id) const { return grads_.at(id); }
  std::size_t size() const { return grads_.size(); }
  void zero();
  void add(const GradStore& other);
  void scale(double factor);

 private:
  std::vector<Tensor> grads_;
};

class Tape;

class Var {
 public:
  Var() = default;
  Tape* tape() const { return tape_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t size() const { return value().size(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

class Tape {
 public:
  // Receives the node's own forward value and the gradient flowing into it.
  using BackwardFn = std::function<void(Tape&, const Tensor& out, const Tensor& grad_out)>;

  explicit Tape(bool training = false, std::uint64_t seed = 0);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool training() const { return training_; }
  Rng& rng() { return rng_; }

  Var constant(Tensor value);
  // Leaf that collects a gradient (used for inputs under test).
  Var input(Tensor value);
  // Leaf referencing a stored parameter. Frozen parameters still flow
  // forward but accumulate no gradient.
  Var param(const ParameterStore& store, ParamId id, bool trainable = true);

  const Tensor& value(Var v) const;
  const Tensor& grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }
  const char* op_name(Var v) const { return nodes_.at(v.id()).op; }
  std::size_t size() const { return nodes_.size(); }

  void backward(Var loss);
  void zero_grad();
  // Adds the gradients of every trainable leaf of `store` into `grads`.
  void accumulate(const ParameterStore& store, GradStore& grads) const;

  // Op construction. Throws NumericError naming `op` if `value` is not
  // finite.
  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(const char* op, Tensor value, std::span<const Var> inputs, BackwardFn fn);
  // Gradient buffer of `v`, or nullptr when `v` needs no gradient.
  Tensor* grad_sink(Var v);

 private:
  struct Node {
    const char* op = "";
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
    const ParameterStore* store = nullptr;
    ParamId param = 0;
  };

  Var push(Node node);

  bool training_;
  Rng rng_;
  // A deque keeps references returned by value() valid while the tape grows.
  std::deque<Node> nodes_;
  std::map<std::pair<const ParameterStore*, ParamId>, std::uint32_t> param_nodes_;
};

// ---- primitives ----------------------------------------------------------
// Binary elementwise ops accept b with the same shape as a, a single element,
// or a single row broadcast over the rows of a.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);

// [m x k] * [k x n]
Var matmul(Var a, Var b);
// [m x k] * [n x k]^T
Var matmul_nt(Var a, Var b);
Var transpose(Var a);

Var sigmoid(Var a);
Var leaky_relu(Var a, double slope);
// Normalizes every row to zero mean / unit variance, then applies gain and
// bias (each holding cols(x) values).
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var layernorm_leakyrelu(Var x, Var gain, Var bias, double slope = 0.01, double eps = 1e-5);
// Softmax over each row. With exclude_diagonal the (i, i) entries are masked
// out and forced to zero; a row with no unmasked entry becomes all zero.
Var row_softmax(Var a, bool exclude_diagonal = false);

Var sum(Var a);
Var mean(Var a);
// Column sums / means: [m x n] -> [1 x n].
Var sum_rows(Var a);
Var mean_rows(Var a);
// Inner product of two equally sized tensors -> [1 x 1].
Var inner(Var a, Var b);

Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var reshape(Var a, Shape shape);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
// Row r of the result is row index[r] of a, or zeros when index[r] < 0.
Var gather_rows(Var a, std::span<const long> index);
// Result [rows x cols]; element k is a's flat element index[k] (zero if < 0).
Var gather_elements(Var a, std::size_t rows, std::size_t cols, std::span<const long> index);

// Zero-padded "same" 1-D convolution (cross-correlation).
// x: [T x C_in], kernel: [k x C_out x C_in] with odd k -> [T x C_out].
Var conv1d_same(Var x, Var kernel);
// y_i = w_i * x_i for x [N x C], w [N x 1].
Var scale_rows(Var x, Var w);
// sum_k weights[k] * terms[k]; weights is [1 x n].
Var weighted_sum(std::span<const Var> terms, Var weights);
// Inverted dropout in training tapes; identity otherwise.
Var dropout(Var a, double rate);
// -log softmax(logits)[label] for logits [1 x n].
Var softmax_cross_entropy(Var logits, std::size_t label);

// ---- non-differentiable helpers ------------------------------------------
// Indices of the k largest scores, descending; ties go to the lower index.
std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k);
std::size_t argmax(std::span<const double> values);
Tensor softmax_values(std::span<const double> logits);

}  // namespace gos
