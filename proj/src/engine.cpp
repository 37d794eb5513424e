#include "gos/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

#include "gos/errors.hpp"
#include "gos/kernels.hpp"

namespace gos {

// ---- ParameterStore / GradStore --------------------------------------------

ParamId ParameterStore::add(std::string name, Tensor value) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  if (!value.all_finite()) throw NumericError("parameter '" + name + "' is not finite");
  const ParamId id = values_.size();
  index_.emplace(name, id);
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return id;
}

std::optional<ParamId> ParameterStore::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

GradStore::GradStore(const ParameterStore& store) {
  grads_.reserve(store.size());
  for (ParamId i = 0; i < store.size(); ++i) grads_.emplace_back(store.value(i).shape());
}

void GradStore::zero() {
  for (auto& g : grads_) g.fill(0.0);
}

void GradStore::add(const GradStore& other) {
  if (other.grads_.size() != grads_.size()) throw DimensionError("GradStore size mismatch");
  for (std::size_t i = 0; i < grads_.size(); ++i) {
    auto& g = grads_[i];
    kernels::axpy(1.0, other.grads_[i].data(), g.data(), g.size());
  }
}

void GradStore::scale(double factor) {
  for (auto& g : grads_)
    for (double& v : g.values()) v *= factor;
}

// ---- Tape ------------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(*this); }
const Tensor& Var::grad() const { return tape_->grad(*this); }

Tape::Tape(bool training, std::uint64_t seed) : training_(training), rng_(seed) {
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) throw NumericError("non-finite value passed as constant");
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::input(Tensor value) {
  if (!value.all_finite()) throw NumericError("non-finite value passed as input");
  Node n;
  n.op = "input";
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::param(const ParameterStore& store, ParamId id, bool trainable) {
  const auto key = std::make_pair(&store, id);
  if (auto it = param_nodes_.find(key); it != param_nodes_.end()) return Var(this, it->second);
  Node n;
  n.op = "param";
  n.external = &store.value(id);
  n.requires_grad = trainable;
  n.store = &store;
  n.param = id;
  Var v = push(std::move(n));
  param_nodes_.emplace(key, v.id());
  return v;
}

const Tensor& Tape::value(Var v) const {
  const Node& n = nodes_.at(v.id());
  return n.external ? *n.external : n.value;
}

const Tensor& Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.empty()) {
    static thread_local Tensor zeros;
    zeros = Tensor(value(v).shape());
    return zeros;
  }
  return n.grad;
}

Tensor* Tape::grad_sink(Var v) {
  Node& n = nodes_[v.id()];
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad = Tensor((n.external ? *n.external : n.value).shape());
  return &n.grad;
}

Var Tape::record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(fn));
}

Var Tape::record(const char* op, Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  if (!value.all_finite())
    throw NumericError(std::string("non-finite value produced by ") + op);
  Node n;
  n.op = op;
  n.value = std::move(value);
  for (const Var& in : inputs) {
    if (in.tape() != this) throw ContractError(std::string(op) + ": input from another tape");
    n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
  if (value(loss).size() != 1)
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_string(value(loss).shape()));
  Tensor* seed = grad_sink(loss);
  if (!seed) return;
  (*seed)[0] += 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, n.external ? *n.external : n.value, n.grad);
  }
}

void Tape::zero_grad() {
  for (auto& n : nodes_) n.grad = Tensor();
}

void Tape::accumulate(const ParameterStore& store, GradStore& grads) const {
  for (const auto& n : nodes_) {
    if (n.store != &store || !n.requires_grad || n.grad.empty()) continue;
    Tensor& g = grads[n.param];
    kernels::axpy(1.0, n.grad.data(), g.data(), g.size());
  }
}

// ---- helpers -----------------------------------------------------------------

namespace {

enum class Broadcast { same, scalar, row };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::same;
  if (b.size() == 1) return Broadcast::scalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::row;
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(b.shape()) +
                       " onto " + shape_string(a.shape()));
}

// Reduces a full-shape gradient to b's broadcast shape and adds it to gb.
void reduce_into(const Tensor& g, Broadcast kind, Tensor& gb) {
  switch (kind) {
    case Broadcast::same:
      kernels::axpy(1.0, g.data(), gb.data(), g.size());
      break;
    case Broadcast::scalar: {
      double s = 0.0;
      for (double v : g.values()) s += v;
      gb[0] += s;
      break;
    }
    case Broadcast::row:
      for (std::size_t r = 0; r < g.rows(); ++r) kernels::axpy(1.0, g.row_ptr(r), gb.data(), g.cols());
      break;
  }
}

template <class F>
Tensor broadcast_apply(const Tensor& a, const Tensor& b, Broadcast kind, F f) {
  Tensor out(a.shape());
  const std::size_t cols = a.cols();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double bv = kind == Broadcast::same ? b[i] : kind == Broadcast::scalar ? b[0] : b[i % cols];
    out[i] = f(a[i], bv);
  }
  return out;
}

Tensor as_matrix_shape(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }

}  // namespace

// ---- elementwise -------------------------------------------------------------

Var add(Var a, Var b) {
  const Broadcast kind = broadcast_kind(a.value(), b.value(), "add");
  Tensor out(a.shape());
  if (kind == Broadcast::same)
    kernels::active().add(a.value().data(), b.value().data(), out.data(), out.size());
  else
    out = broadcast_apply(a.value(), b.value(), kind, [](double x, double y) { return x + y; });
  return a.tape()->record("add", std::move(out), {a, b},
                          [a, b, kind](Tape& tp, const Tensor&, const Tensor& g) {
                            if (Tensor* ga = tp.grad_sink(a)) kernels::axpy(1.0, g.data(), ga->data(), g.size());
                            if (Tensor* gb = tp.grad_sink(b)) reduce_into(g, kind, *gb);
                          });
}

Var sub(Var a, Var b) {
  const Broadcast kind = broadcast_kind(a.value(), b.value(), "sub");
  Tensor out = broadcast_apply(a.value(), b.value(), kind, [](double x, double y) { return x - y; });
  return a.tape()->record("sub", std::move(out), {a, b},
                          [a, b, kind](Tape& tp, const Tensor&, const Tensor& g) {
                            if (Tensor* ga = tp.grad_sink(a)) kernels::axpy(1.0, g.data(), ga->data(), g.size());
                            if (Tensor* gb = tp.grad_sink(b)) {
                              Tensor neg(g.shape());
                              for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
                              reduce_into(neg, kind, *gb);
                            }
                          });
}

Var mul(Var a, Var b) {
  const Broadcast kind = broadcast_kind(a.value(), b.value(), "mul");
  Tensor out = broadcast_apply(a.value(), b.value(), kind, [](double x, double y) { return x * y; });
  return a.tape()->record("mul", std::move(out), {a, b},
                          [a, b, kind](Tape& tp, const Tensor&, const Tensor& g) {
                            if (Tensor* ga = tp.grad_sink(a)) {
                              Tensor d = broadcast_apply(g, tp.value(b), kind,
                                                         [](double x, double y) { return x * y; });
                              kernels::axpy(1.0, d.data(), ga->data(), d.size());
                            }
                            if (Tensor* gb = tp.grad_sink(b)) {
                              Tensor d(g.shape());
                              kernels::active().mul(g.data(), tp.value(a).data(), d.data(), g.size());
                              reduce_into(d, kind, *gb);
                            }
                          });
}

Var scale(Var a, double c) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * av[i];
  return a.tape()->record("scale", std::move(out), {a}, [a, c](Tape& tp, const Tensor&, const Tensor& g) {
    if (Tensor* ga = tp.grad_sink(a)) kernels::axpy(c, g.data(), ga->data(), g.size());
  });
}

Var add_scalar(Var a, double c) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
  return a.tape()->record("add_scalar", std::move(out), {a}, [a](Tape& tp, const Tensor&, const Tensor& g) {
    if (Tensor* ga = tp.grad_sink(a)) kernels::axpy(1.0, g.data(), ga->data(), g.size());
  });
}

Var operator+(Var a, Var b) { return add(a, b); }
Var operator-(Var a, Var b) { return sub(a, b); }
Var operator*(Var a, Var b) { return mul(a, b); }

// ---- linear algebra ----------------------------------------------------------

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k)
    throw DimensionError("matmul: inner dimensions differ " + shape_string(av.shape()) + " x " +
                         shape_string(bv.shape()));
  Tensor out = as_matrix_shape(m, n);
  kernels::gemm_nn(m, n, k, av.data(), bv.data(), out.data(), false);
  return a.tape()->record("matmul", std::move(out), {a, b},
                          [a, b, m, n, k](Tape& tp, const Tensor&, const Tensor& g) {
                            if (Tensor* ga = tp.grad_sink(a))
                              kernels::gemm_nt(m, k, n, g.data(), tp.value(b).data(), ga->data(), true);
                            if (Tensor* gb = tp.grad_sink(b))
                              kernels::gemm_tn(k, n, m, tp.value(a).data(), g.data(), gb->data(), true);
                          });
}

Var matmul_nt(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  if (bv.cols() != k)
    throw DimensionError("matmul_nt: inner dimensions differ " + shape_string(av.shape()) + " x " +
                         shape_string(bv.shape()) + "^T");
  Tensor out = as_matrix_shape(m, n);
  kernels::gemm_nt(m, n, k, av.data(), bv.data(), out.data(), false);
  return a.tape()->record("matmul_nt", std::move(out), {a, b},
                          [a, b, m, n, k](Tape& tp, const Tensor&, const Tensor& g) {
                            if (Tensor* ga = tp.grad_sink(a))
                              kernels::gemm_nn(m, k, n, g.data(), tp.value(b).data(), ga->data(), true);
                            if (Tensor* gb = tp.grad_sink(b))
                              kernels::gemm_tn(n, k, m, g.data(), tp.value(a).data(), gb->data(), true);
                          });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  const std::size_t m = av.rows(), n = av.cols();
  Tensor out = as_matrix_shape(n, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(j, i) = av(i, j);
  return a.tape()->record("transpose", std::move(out), {a}, [a, m, n](Tape& tp, const Tensor&, const Tensor& g) {
    if (Tensor* ga = tp.grad_sink(a))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += g[j * m + i];
  });
}

// ---- nonlinearities ------------------------------------------------------------

Var sigmoid(Var a) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double x = av[i];
    out[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return a.tape()->record("sigmoid", std::move(out), {a}, [a](Tape& tp, const Tensor& y, const Tensor& g) {
    if (Tensor* ga = tp.grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var leaky_relu(Var a, double slope) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0 ? av[i] : slope * av[i];
  return a.tape()->record("leaky_relu", std::move(out), {a}, [a, slope](Tape& tp, const Tensor&, const Tensor& g) {
    if (Tensor* ga = tp.grad_sink(a)) {
      const Tensor& x = tp.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += x[i] > 0 ? g[i] : slope * g[i];
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), c = xv.cols();
  if (gain.size() != c || bias.size() != c)
    throw DimensionError("layer_norm: gain/bias must hold " + std::to_string(c) + " values");
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor normalized(xv.shape());
  Tensor inv_std({rows});
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.row_ptr(r);
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double xh = (xr[j] - mu) * is;
      normalized(r, j) = xh;
      out(r, j) = xh * gv[j] + bv[j];
    }
  }
  return x.tape()->record(
      "layer_norm", std::move(out), {x, gain, bias},
      [x, gain, bias, rows, c, normalized = std::move(normalized), inv_std = std::move(inv_std)](
          Tape& tp, const Tensor&, const Tensor& g) {
        if (Tensor* gg = tp.grad_sink(gain))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) (*gg)[j] += g(r, j) * normalized(r, j);
        if (Tensor* gb = tp.grad_sink(bias))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) (*gb)[j] += g(r, j);
        if (Tensor* gx = tp.grad_sink(x)) {
          const Tensor& gv = tp.value(gain);
          std::vector<double> dxh(c);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              dxh[j] = g(r, j) * gv[j];
              m1 += dxh[j];
              m2 += dxh[j] * normalized(r, j);
            }
            m1 /= static_cast<double>(c);
            m2 /= static_cast<double>(c);
            for (std::size_t j = 0; j < c; ++j)
              (*gx)(r, j) += inv_std[r] * (dxh[j] - m1 - normalized(r, j) * m2);
          }
        }
      });
}

Var layernorm_leakyrelu(Var x, Var gain, Var bias, double slope, double eps) {
  return leaky_relu(layer_norm(x, gain, bias, eps), slope);
}

Var row_softmax(Var a, bool exclude_diagonal) {
  const Tensor& av = a.value();
  const std::size_t rows = av.rows(), cols = av.cols();
  Tensor out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* ar = av.row_ptr(r);
    double* orow = out.row_ptr(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < cols; ++j)
      if (!(exclude_diagonal && j == r)) mx = std::max(mx, ar[j]);
    if (!std::isfinite(mx)) continue;  // fully masked row
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      if (exclude_diagonal && j == r) continue;
      orow[j] = std::exp(ar[j] - mx);
      z += orow[j];
    }
    for (std::size_t j = 0; j < cols; ++j) orow[j] /= z;
  }
  return a.tape()->record("row_softmax", std::move(out), {a},
                          [a, rows, cols](Tape& tp, const Tensor& y, const Tensor& g) {
                            Tensor* ga = tp.grad_sink(a);
                            if (!ga) return;
                            for (std::size_t r = 0; r < rows; ++r) {
                              const double* yr = y.row_ptr(r);
                              const double* gr = g.row_ptr(r);
                              const double s = kernels::dot(yr, gr, cols);
                              double* out = ga->row_ptr(r);
                              for (std::size_t j = 0; j < cols; ++j) out[j] += yr[j] * (gr[j] - s);
                            }
                          });
}

// ---- reductions ------------------------------------------------------------------

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape()->record("sum", Tensor::scalar(s), {a}, [a](Tape& tp, const Tensor&, const Tensor& g) {
    if (Tensor* ga = tp.grad_sink(a))
      for (double& v : ga->values()) v += g[0];
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.size());
  return scale(sum(a), 1.0 / n);
}

Var sum_rows(Var a) {
  const Tensor& av = a.value();
  const std::size_t rows = av.rows(), cols = av.cols();
  Tensor out({1, cols});
  for (std::size_t r = 0; r < rows; ++r) kernels::axpy(1.0, av.row_ptr(r), out.data(), cols);
  return a.tape()->record("sum_rows", std::move(out), {a}, [a, rows, cols](Tape& tp, const Tensor&, const Tensor& g) {
    if (Tensor* ga = tp.grad_sink(a))
      for (std::size_t r = 0; r < rows; ++r) kernels::axpy(1.0, g.data(), ga->row_ptr(r), cols);
  });
}

Var mean_rows(Var a) { return scale(sum_rows(a), 1.0 / static_cast<double>(a.rows())); }

Var inner(Var a, Var b) {
  if (a.size() != b.size()) throw DimensionError("inner: size mismatch");
  const double s = kernels::dot(a.value().data(), b.value().data(), a.size());
  return a.tape()->record("inner", Tensor::scalar(s), {a, b}, [a, b](Tape& tp, const Tensor&, const Tensor& g) {
    if (Tensor* ga = tp.grad_sink(a)) kernels::axpy(g[0], tp.value(b).data(), ga->data(), ga->size());
    if (Tensor* gb = tp.grad_sink(b)) kernels::axpy(g[0], tp.value(a).data(), gb->data(), gb->size());
  });
}

// ---- structural ------------------------------------------------------------------

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t rows = parts[0].rows();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row counts differ");
    offsets.push_back(total);
    total += p.cols();
  }
  Tensor out({rows, total});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::memcpy(out.row_ptr(r) + offsets[k], pv.row_ptr(r), sizeof(double) * pv.cols());
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return parts[0].tape()->record(
      "concat_cols", std::move(out), parts,
      [ins, offsets, rows, total](Tape& tp, const Tensor&, const Tensor& g) {
        for (std::size_t k = 0; k < ins.size(); ++k) {
          Tensor* gp = tp.grad_sink(ins[k]);
          if (!gp) continue;
          const std::size_t c = gp->cols();
          for (std::size_t r = 0; r < rows; ++r)
            kernels::axpy(1.0, g.data() + r * total + offsets[k], gp->row_ptr(r), c);
        }
      });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t cols = parts[0].cols();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw DimensionError("concat_rows: column counts differ");
    offsets.push_back(total);
    total += p.rows();
  }
  Tensor out({total, cols});
  for (std::size_t k = 0; k < parts.size(); ++k)
    std::memcpy(out.row_ptr(offsets[k]), parts[k].value().data(), sizeof(double) * parts[k].size());
  std::vector<Var> ins(parts.begin(), parts.end());
  return parts[0].tape()->record("concat_rows", std::move(out), parts,
                                 [ins, offsets, cols](Tape& tp, const Tensor&, const Tensor& g) {
                                   for (std::size_t k = 0; k < ins.size(); ++k)
                                     if (Tensor* gp = tp.grad_sink(ins[k]))
                                       kernels::axpy(1.0, g.row_ptr(offsets[k]), gp->data(), gp->size());
                                 });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape()->record("reshape", std::move(out), {a}, [a](Tape& tp, const Tensor&, const Tensor& g) {
    if (Tensor* ga = tp.grad_sink(a)) kernels::axpy(1.0, g.data(), ga->data(), g.size());
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const Tensor& av = a.value();
  if (count == 0 || begin + count > av.rows())
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") outside " + shape_string(av.shape()));
  const std::size_t cols = av.cols();
  Tensor out({count, cols});
  std::memcpy(out.data(), av.row_ptr(begin), sizeof(double) * count * cols);
  return a.tape()->record("slice_rows", std::move(out), {a}, [a, begin](Tape& tp, const Tensor&, const Tensor& g) {
    if (Tensor* ga = tp.grad_sink(a)) kernels::axpy(1.0, g.data(), ga->row_ptr(begin), g.size());
  });
}

Var gather_rows(Var a, std::span<const long> index) {
  const Tensor& av = a.value();
  const std::size_t cols = av.cols();
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  Tensor out({index.size(), cols});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0) continue;
    if (static_cast<std::size_t>(index[r]) >= av.rows()) throw DimensionError("gather_rows: index out of range");
    std::memcpy(out.row_ptr(r), av.row_ptr(static_cast<std::size_t>(index[r])), sizeof(double) * cols);
  }
  std::vector<long> idx(index.begin(), index.end());
  return a.tape()->record("gather_rows", std::move(out), {a},
                          [a, idx = std::move(idx), cols](Tape& tp, const Tensor&, const Tensor& g) {
                            Tensor* ga = tp.grad_sink(a);
                            if (!ga) return;
                            for (std::size_t r = 0; r < idx.size(); ++r)
                              if (idx[r] >= 0)
                                kernels::axpy(1.0, g.row_ptr(r), ga->row_ptr(static_cast<std::size_t>(idx[r])), cols);
                          });
}

Var gather_elements(Var a, std::size_t rows, std::size_t cols, std::span<const long> index) {
  const Tensor& av = a.value();
  if (index.size() != rows * cols) throw DimensionError("gather_elements: index size mismatch");
  Tensor out({rows, cols});
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] < 0) continue;
    if (static_cast<std::size_t>(index[k]) >= av.size()) throw DimensionError("gather_elements: index out of range");
    out[k] = av[static_cast<std::size_t>(index[k])];
  }
  std::vector<long> idx(index.begin(), index.end());
  return a.tape()->record("gather_elements", std::move(out), {a},
                          [a, idx = std::move(idx)](Tape& tp, const Tensor&, const Tensor& g) {
                            Tensor* ga = tp.grad_sink(a);
                            if (!ga) return;
                            for (std::size_t k = 0; k < idx.size(); ++k)
                              if (idx[k] >= 0) (*ga)[static_cast<std::size_t>(idx[k])] += g[k];
                          });
}

// ---- convolution / gating / mixing ---------------------------------------------

Var conv1d_same(Var x, Var kernel) {
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  if (kv.rank() != 3) throw DimensionError("conv1d_same: kernel must be [k x C_out x C_in]");
  const std::size_t k = kv.shape()[0], c_out = kv.shape()[1], c_in = kv.shape()[2];
  if (k % 2 == 0) throw ConfigError("conv1d_same: kernel size must be odd, got " + std::to_string(k));
  if (xv.cols() != c_in)
    throw DimensionError("conv1d_same: input has " + std::to_string(xv.cols()) + " channels, kernel expects " +
                         std::to_string(c_in));
  const std::size_t steps = xv.rows();
  const long pad = static_cast<long>(k / 2);
  Tensor out({steps, c_out});
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t m = 0; m < k; ++m) {
      const long src = static_cast<long>(t) + static_cast<long>(m) - pad;
      if (src < 0 || src >= static_cast<long>(steps)) continue;
      // out[t] += W[m] * x[src]
      kernels::gemm_nt(1, c_out, c_in, xv.row_ptr(static_cast<std::size_t>(src)), kv.data() + m * c_out * c_in,
                       out.row_ptr(t), true);
    }
  }
  return x.tape()->record(
      "conv1d_same", std::move(out), {x, kernel},
      [x, kernel, steps, k, c_out, c_in, pad](Tape& tp, const Tensor&, const Tensor& g) {
        Tensor* gx = tp.grad_sink(x);
        Tensor* gk = tp.grad_sink(kernel);
        const Tensor& xv = tp.value(x);
        const Tensor& kv = tp.value(kernel);
        for (std::size_t t = 0; t < steps; ++t) {
          for (std::size_t m = 0; m < k; ++m) {
            const long src = static_cast<long>(t) + static_cast<long>(m) - pad;
            if (src < 0 || src >= static_cast<long>(steps)) continue;
            const auto s = static_cast<std::size_t>(src);
            if (gx) kernels::gemm_nn(1, c_in, c_out, g.row_ptr(t), kv.data() + m * c_out * c_in, gx->row_ptr(s), true);
            if (gk) kernels::gemm_tn(c_out, c_in, 1, g.row_ptr(t), xv.row_ptr(s), gk->data() + m * c_out * c_in, true);
          }
        }
      });
}

Var scale_rows(Var x, Var w) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (wv.size() != rows) throw DimensionError("scale_rows: need one weight per row");
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols; ++j) out(r, j) = wv[r] * xv(r, j);
  return x.tape()->record("scale_rows", std::move(out), {x, w}, [x, w, rows, cols](Tape& tp, const Tensor&, const Tensor& g) {
    const Tensor& xv = tp.value(x);
    const Tensor& wv = tp.value(w);
    if (Tensor* gx = tp.grad_sink(x))
      for (std::size_t r = 0; r < rows; ++r) kernels::axpy(wv[r], g.row_ptr(r), gx->row_ptr(r), cols);
    if (Tensor* gw = tp.grad_sink(w))
      for (std::size_t r = 0; r < rows; ++r) (*gw)[r] += kernels::dot(g.row_ptr(r), xv.row_ptr(r), cols);
  });
}

Var weighted_sum(std::span<const Var> terms, Var weights) {
  if (terms.empty()) throw ContractError("weighted_sum: no terms");
  const Tensor& wv = weights.value();
  if (wv.size() != terms.size())
    throw DimensionError("weighted_sum: " + std::to_string(terms.size()) + " terms but " +
                         std::to_string(wv.size()) + " weights");
  Tensor out(terms[0].shape());
  for (std::size_t k = 0; k < terms.size(); ++k) {
    if (!terms[k].value().same_shape(out)) throw DimensionError("weighted_sum: term shapes differ");
    kernels::axpy(wv[k], terms[k].value().data(), out.data(), out.size());
  }
  std::vector<Var> ins(terms.begin(), terms.end());
  ins.push_back(weights);
  return weights.tape()->record("weighted_sum", std::move(out), ins, [ins](Tape& tp, const Tensor&, const Tensor& g) {
    const std::size_t n = ins.size() - 1;
    const Var w = ins.back();
    const Tensor& wv = tp.value(w);
    Tensor* gw = tp.grad_sink(w);
    for (std::size_t k = 0; k < n; ++k) {
      if (Tensor* gt = tp.grad_sink(ins[k])) kernels::axpy(wv[k], g.data(), gt->data(), g.size());
      if (gw) (*gw)[k] += kernels::dot(g.data(), tp.value(ins[k]).data(), g.size());
    }
  });
}

Var dropout(Var a, double rate) {
  Tape& t = *a.tape();
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
  if (!t.training() || rate == 0.0) return a;
  const Tensor& av = a.value();
  Tensor mask(av.shape());
  std::bernoulli_distribution keep(1.0 - rate);
  const double inv = 1.0 / (1.0 - rate);
  for (double& m : mask.values()) m = keep(t.rng()) ? inv : 0.0;
  Tensor out(av.shape());
  kernels::active().mul(av.data(), mask.data(), out.data(), out.size());
  return t.record("dropout", std::move(out), {a}, [a, mask = std::move(mask)](Tape& tp, const Tensor&, const Tensor& g) {
    if (Tensor* ga = tp.grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * mask[i];
  });
}

Var softmax_cross_entropy(Var logits, std::size_t label) {
  const Tensor& lv = logits.value();
  if (label >= lv.size())
    throw DimensionError("softmax_cross_entropy: label " + std::to_string(label) + " outside " +
                         std::to_string(lv.size()) + " classes");
  Tensor probs = softmax_values(lv.values());
  const double mx = *std::max_element(lv.values().begin(), lv.values().end());
  double z = 0.0;
  for (double v : lv.values()) z += std::exp(v - mx);
  const double loss = mx + std::log(z) - lv[label];
  return logits.tape()->record("softmax_cross_entropy", Tensor::scalar(loss), {logits},
                               [logits, label, probs = std::move(probs)](Tape& tp, const Tensor&, const Tensor& g) {
                                 if (Tensor* gl = tp.grad_sink(logits))
                                   for (std::size_t i = 0; i < probs.size(); ++i)
                                     (*gl)[i] += g[0] * (probs[i] - (i == label ? 1.0 : 0.0));
                               });
}

// ---- non-differentiable helpers --------------------------------------------------

std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, idx.size());
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(k);
  return idx;
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw ContractError("argmax of empty range");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

Tensor softmax_values(std::span<const double> logits) {
  Tensor out({1, logits.size()});
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += (out[i] = std::exp(logits[i] - mx));
  for (double& v : out.values()) v /= z;
  return out;
}

}  // namespace gos
