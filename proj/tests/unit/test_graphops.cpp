#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "gos/errors.hpp"
#include "gos/graphops.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace gos;
using gos::testing::check_inputs;
using gos::testing::random_tensor;

namespace {

struct Instance {
  std::size_t frames, per_frame, channels, cells;
  Tensor x, positions, background;
};

Instance random_instance(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> t_dist(1, 3);
  Instance in{};
  in.frames = t_dist(rng);
  std::uniform_int_distribution<std::size_t> k_dist(1, 6 / in.frames);
  in.per_frame = k_dist(rng);
  in.channels = std::uniform_int_distribution<std::size_t>(2, 4)(rng);
  in.cells = std::uniform_int_distribution<std::size_t>(1, 4)(rng);
  const std::size_t n = in.frames * in.per_frame;
  in.x = random_tensor({n, in.channels}, rng);
  in.positions = Tensor({n, 3});
  std::uniform_real_distribution<double> u(0, 1);
  for (double& p : in.positions.values()) p = u(rng);
  in.background = random_tensor({in.frames * in.cells, in.channels}, rng);
  return in;
}

// Two frames of three nodes with distinct random features.
NodeSet small_nodes(std::mt19937_64& rng, std::size_t frames = 2, std::size_t per_frame = 3, std::size_t c = 4) {
  NodeSet ns;
  ns.frames = frames;
  ns.nodes_per_frame = per_frame;
  ns.features = random_tensor({frames * per_frame, c}, rng);
  ns.positions = Tensor({frames * per_frame, 3});
  std::uniform_real_distribution<double> u(0, 1);
  for (double& p : ns.positions.values()) p = u(rng);
  return ns;
}

Tensor rows_permuted(const Tensor& t, const std::vector<std::size_t>& perm) {
  Tensor out(t.shape());
  for (std::size_t r = 0; r < perm.size(); ++r)
    std::copy(t.row_ptr(perm[r]), t.row_ptr(perm[r]) + t.cols(), out.row_ptr(r));
  return out;
}

}  // namespace

TEST_SUITE("graphops") {
  TEST_CASE("feature aggregation examples") {
    std::mt19937_64 rng(1);
    Tape tape;
    Tensor x = random_tensor({5, 3}, rng);
    Var out = feature_aggregation_pre(tape.constant(x), tape.constant(Tensor::identity(3)),
                                      tape.constant(Tensor({3, 3})));
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t c = 0; c < 3; ++c) {
        double m = 0;
        for (std::size_t j = 0; j < 5; ++j) m += x(j, c);
        CHECK(out.value()(i, c) == doctest::Approx(m / 5).epsilon(1e-12));
      }
    Tensor one = random_tensor({1, 3}, rng), w = random_tensor({3, 3}, rng), u = random_tensor({3, 3}, rng);
    Var single = feature_aggregation_pre(tape.constant(one), tape.constant(w), tape.constant(u));
    for (std::size_t o = 0; o < 3; ++o) {
      double s = 0;
      for (std::size_t c = 0; c < 3; ++c) s += w(o, c) * one[c];
      CHECK(single.value()[o] == doctest::Approx(s).epsilon(1e-12));
    }
  }

  TEST_CASE("difference propagation examples") {
    Tape tape;
    Tensor same({4, 3}, 0.7);
    Var z = difference_propagation_pre(tape.constant(same), tape.constant(Tensor::identity(3)),
                                       tape.constant(Tensor::identity(3)));
    for (double v : z.value().values()) CHECK(v == 0.0);

    Var two = difference_propagation_pre(tape.constant(Tensor::matrix(2, 2, {1, 0, 0, 1})),
                                         tape.constant(Tensor::identity(2)), tape.constant(Tensor({2, 2})));
    CHECK(two.value() == Tensor::matrix(2, 2, {1, -1, -1, 1}));

    Var lone = difference_propagation_pre(tape.constant(Tensor::row({1, 2})), tape.constant(Tensor::identity(2)),
                                          tape.constant(Tensor::identity(2)));
    CHECK(lone.value() == Tensor::row({0, 0}));
  }

  TEST_CASE("temporal convolution examples") {
    std::mt19937_64 rng(2);
    Tape tape;
    Tensor x = random_tensor({6, 3}, rng);
    Tensor delta({3, 3, 3});
    for (std::size_t c = 0; c < 3; ++c) delta[(1 * 3 + c) * 3 + c] = 1.0;
    // Feature rows with a dominant positive component keep each node its own argmax.
    for (std::size_t i = 0; i < 6; ++i) x(i, i % 3) += 10.0 + double(i);
    Var z = temporal_convolution_pre(tape.constant(x), tape.constant(delta), 3, 2);
    CHECK(max_abs_diff(z.value(), x) == 0.0);

    Tensor frame = random_tensor({2, 3}, rng);
    Tensor rep({6, 3});
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t k = 0; k < 2; ++k)
        for (std::size_t c = 0; c < 3; ++c) rep(t * 2 + k, c) = frame(k, c);
    Tensor avg({3, 3, 3});
    for (std::size_t m = 0; m < 3; ++m)
      for (std::size_t c = 0; c < 3; ++c) avg[(m * 3 + c) * 3 + c] = 1.0 / 3.0;
    Var y = temporal_convolution_pre(tape.constant(rep), tape.constant(avg), 3, 2);
    for (std::size_t k = 0; k < 2; ++k) {
      const std::size_t i = 2 + k;  // interior frame
      const std::size_t j = nearest_in_frame(rep, i, 1, 2);
      for (std::size_t c = 0; c < 3; ++c) CHECK(y.value()(i, c) == doctest::Approx(rep(j, c)).epsilon(1e-12));
    }
  }

  TEST_CASE("background incorporation examples") {
    std::mt19937_64 rng(3);
    Tape tape;
    const std::size_t frames = 2, per_frame = 2, cells = 3, c = 3;
    Tensor x = random_tensor({frames * per_frame, c}, rng);
    Tensor bg = random_tensor({frames * cells, c}, rng);
    Var z = background_incorporation_pre(tape.constant(x), tape.constant(bg), tape.constant(Tensor({c, c})),
                                         tape.constant(Tensor({c, cells})), tape.constant(Tensor::identity(c)),
                                         frames, per_frame, cells);
    for (std::size_t i = 0; i < frames * per_frame; ++i) {
      const std::size_t t = i / per_frame;
      for (std::size_t ch = 0; ch < c; ++ch) {
        double m = 0;
        for (std::size_t j = 0; j < cells; ++j) m += bg(t * cells + j, ch);
        CHECK(z.value()(i, ch) == doctest::Approx(m / cells).epsilon(1e-12));
      }
    }

    Tensor flat({frames * cells, c}, 0.4);
    Tensor w = random_tensor({c, c}, rng);
    auto aggregated = [&](const Tensor& u) {
      return background_incorporation_pre(tape.constant(x), tape.constant(flat), tape.constant(u),
                                          tape.constant(Tensor({c, cells})), tape.constant(w), frames, per_frame,
                                          cells)
          .value();
    };
    CHECK(max_abs_diff(aggregated(random_tensor({c, c}, rng)), aggregated(random_tensor({c, c}, rng))) <= 1e-12);
  }

  TEST_CASE("node attention examples") {
    std::mt19937_64 rng(4);
    NodeSet ns = small_nodes(rng);
    Tape tape;
    Var out = node_attention(tape.constant(ns.features), tape.constant(Tensor({1, 20})), ns.positions, 5);
    CHECK(max_abs_diff(out.value(), [&] {
            Tensor h = ns.features;
            for (double& v : h.values()) v *= 0.5;
            return h;
          }()) <= 1e-15);

    for (int rep = 0; rep < 10; ++rep) {
      Tensor w = random_tensor({1, 20}, rng, 3.0);
      auto gates = oracle::attention_gates(ns.features, w, ns.positions, 5);
      for (double g : gates) {
        CHECK(g > 0.0);
        CHECK(g < 1.0);
      }
    }
  }

  TEST_CASE("node attention clamps M when there are few nodes") {
    std::mt19937_64 rng(5);
    NodeSet ns = small_nodes(rng, 1, 3, 2);
    Tensor w = random_tensor({1, 20}, rng);
    Tape tape;
    Var out = node_attention(tape.constant(ns.features), tape.constant(w), ns.positions, 5);
    CHECK(max_abs_diff(out.value(), oracle::node_attention(ns.features, w, ns.positions, 5)) <= 1e-12);
    CHECK(attention_neighbors(ns.features, 0, 5).size() == 2);
  }

  TEST_CASE("zero, identity and channel projection") {
    std::mt19937_64 rng(6);
    Tensor x = random_tensor({4, 3}, rng);
    Tape eval;
    Var xv = eval.constant(x);
    for (double v : zero_op(xv, 5).value().values()) CHECK(v == 0.0);
    CHECK(zero_op(xv, 5).value().shape() == Shape{4, 5});
    CHECK(identity_op(xv, 0.3).value() == x);
    CHECK(channel_project(xv, eval.constant(Tensor::identity(3))).value() == x);
    for (double v : channel_project(xv, eval.constant(Tensor({2, 3}))).value().values()) CHECK(v == 0.0);
    CHECK_THROWS_AS(channel_project(xv, eval.constant(Tensor({2, 4}))), DimensionError);

    Tape train(true, 3);
    Tensor ones({1, 100000}, 1.0);
    Var y = identity_op(train.constant(ones), 0.3);
    double m = 0;
    for (double v : y.value().values()) m += v;
    CHECK(std::abs(m / 100000.0 - 1.0) <= 0.02);
  }

  TEST_CASE("pre-activation outputs equal the loop oracles") {
    std::mt19937_64 rng(20);
    for (int rep = 0; rep < 40; ++rep) {
      Instance in = random_instance(rng);
      const std::size_t c = in.channels;
      Tensor w = random_tensor({c, c}, rng), u = random_tensor({c, c}, rng);
      Tape tape;
      Var x = tape.constant(in.x);
      CAPTURE(rep);
      CHECK(max_abs_diff(feature_aggregation_pre(x, tape.constant(w), tape.constant(u)).value(),
                         oracle::feature_aggregation(in.x, w, u)) <= 1e-10);
      CHECK(max_abs_diff(difference_propagation_pre(x, tape.constant(w), tape.constant(u)).value(),
                         oracle::difference_propagation(in.x, w, u)) <= 1e-10);
      const std::size_t k = 2 * std::uniform_int_distribution<std::size_t>(0, 2)(rng) + 1;
      Tensor kernel = random_tensor({k, c, c}, rng);
      CHECK(max_abs_diff(temporal_convolution_pre(x, tape.constant(kernel), in.frames, in.per_frame).value(),
                         oracle::temporal_convolution(in.x, kernel, in.frames, in.per_frame)) <= 1e-10);
      Tensor v = random_tensor({c, in.cells}, rng);
      CHECK(max_abs_diff(background_incorporation_pre(x, tape.constant(in.background), tape.constant(u),
                                                      tape.constant(v), tape.constant(w), in.frames, in.per_frame,
                                                      in.cells)
                             .value(),
                         oracle::background_incorporation(in.x, in.background, u, v, w, in.frames, in.per_frame,
                                                          in.cells)) <= 1e-10);
      Tensor wn = random_tensor({1, 4 * 5}, rng);
      CHECK(max_abs_diff(node_attention(x, tape.constant(wn), in.positions, 5).value(),
                         oracle::node_attention(in.x, wn, in.positions, 5)) <= 1e-10);
      for (std::size_t i = 0; i < in.x.rows(); ++i) {
        CHECK(attention_neighbors(in.x, i, 5) == oracle::top_similar(in.x, i, 5));
        for (std::size_t tau = 0; tau < in.frames; ++tau)
          CHECK(nearest_in_frame(in.x, i, tau, in.per_frame) == oracle::nearest(in.x, i, tau, in.per_frame));
      }
    }
  }

  TEST_CASE("activated outputs equal oracle plus layernorm") {
    std::mt19937_64 rng(21);
    ParameterStore store;
    OpDims dims{4, 3, 5, 3};
    auto fa = create_operation_params(store, OpKind::feature_aggregation, dims, "fa", rng);
    store.value(*fa.ln_gain) = random_tensor({1, 4}, rng);
    store.value(*fa.ln_bias) = random_tensor({1, 4}, rng);
    NodeSet ns = small_nodes(rng, 2, 3, 4);
    NodeSet out = run_operation(fa, store, ns, nullptr, {});
    Tensor want = oracle::layernorm_leakyrelu(oracle::feature_aggregation(ns.features, store.value(*fa.w),
                                                                          store.value(*fa.u)),
                                              store.value(*fa.ln_gain), store.value(*fa.ln_bias), 0.01, 1e-5);
    CHECK(max_abs_diff(out.features, want) <= 1e-10);
    CHECK(out.positions == ns.positions);
  }

  TEST_CASE("affinity rows are normalized") {
    std::mt19937_64 rng(22);
    for (int rep = 0; rep < 20; ++rep) {
      Tensor x = random_tensor({5, 3}, rng, 3.0), u = random_tensor({3, 3}, rng);
      Tape tape;
      Var logits = matmul_nt(matmul(tape.constant(x), tape.constant(u)), tape.constant(x));
      for (bool mask : {false, true}) {
        const Tensor a = row_softmax(logits, mask).value();
        for (std::size_t r = 0; r < 5; ++r) {
          double s = 0;
          for (std::size_t c = 0; c < 5; ++c) s += a(r, c);
          CHECK(std::abs(s - 1.0) <= 1e-12);
        }
      }
    }
  }

  TEST_CASE("shape preservation through apply_operation") {
    std::mt19937_64 rng(23);
    ParameterStore store;
    OpDims dims{4, 4, 5, 3};
    NodeSet ns = small_nodes(rng, 3, 2, 4);
    BackgroundMap bg{random_tensor({12, 4}, rng), 3, 2, 2};
    for (OpKind kind : kAllOpKinds) {
      auto p = create_operation_params(store, kind, dims, std::string(op_name(kind)), rng);
      NodeSet out = run_operation(p, store, ns, &bg, {});
      CHECK(out.features.shape() == ns.features.shape());
      CHECK(out.positions == ns.positions);
      CHECK(out.frames == ns.frames);
    }
    auto bi = create_operation_params(store, OpKind::background_incorporation, dims, "bi2", rng);
    CHECK_THROWS_AS(run_operation(bi, store, ns, nullptr, {}), ConfigError);
  }

  TEST_CASE("node attention neighbour set is invariant to positive scaling") {
    std::mt19937_64 rng(24);
    for (int rep = 0; rep < 20; ++rep) {
      Tensor x = random_tensor({6, 3}, rng);
      Tensor scaled = x;
      for (double& v : scaled.values()) v *= 3.5;
      for (std::size_t i = 0; i < 6; ++i) CHECK(attention_neighbors(x, i, 5) == attention_neighbors(scaled, i, 5));
    }
  }

  TEST_CASE("permutation equivariance within a frame") {
    std::mt19937_64 rng(25);
    const std::size_t frames = 2, per_frame = 3, c = 4, cells = 2;
    ParameterStore store;
    OpDims dims{c, cells, 5, 3};
    NodeSet ns = small_nodes(rng, frames, per_frame, c);
    BackgroundMap bg{random_tensor({frames * cells, c}, rng), frames, 1, cells};
    std::vector<std::size_t> perm = {2, 0, 1, 4, 5, 3};
    NodeSet pns = ns;
    pns.features = rows_permuted(ns.features, perm);
    pns.positions = rows_permuted(ns.positions, perm);
    for (OpKind kind : kAllOpKinds) {
      if (kind == OpKind::zero || kind == OpKind::identity) continue;
      auto p = create_operation_params(store, kind, dims, "p" + std::string(op_name(kind)), rng);
      if (kind == OpKind::node_attention) store.value(*p.w) = random_tensor({1, 20}, rng);
      CAPTURE(op_name(kind));
      Tensor a = run_operation(p, store, ns, &bg, {}).features;
      Tensor b = run_operation(p, store, pns, &bg, {}).features;
      CHECK(max_abs_diff(rows_permuted(a, perm), b) <= 1e-12);
    }
  }

  TEST_CASE("gradient checks of every operation") {
    const OpKind kinds[] = {OpKind::feature_aggregation, OpKind::difference_propagation,
                            OpKind::temporal_convolution, OpKind::background_incorporation, OpKind::node_attention};
    for (OpKind kind : kinds) {
      for (bool bypass : {true, false}) {
        if (kind == OpKind::node_attention && !bypass) continue;
        CAPTURE(op_name(kind));
        CAPTURE(bypass);
        std::size_t kinks = 0, total = 0;
        for (int seed = 0; seed < 20; ++seed) {
          std::mt19937_64 rng(500 + seed);
          ParameterStore store;
          OpDims dims{3, 4, 3, 3};
          auto p = create_operation_params(store, kind, dims, "op", rng);
          if (kind == OpKind::node_attention) store.value(*p.w) = random_tensor({1, 12}, rng);
          if (p.ln_gain) store.value(*p.ln_gain) = random_tensor({1, 3}, rng, 1.0);
          NodeSet ns = small_nodes(rng, 2, 3, 3);
          Tensor bg = random_tensor({8, 3}, rng);
          OpSettings settings;
          settings.attention_m = 3;
          settings.bypass_activation = bypass;
          Tensor projection = random_tensor({6, 3}, rng);
          auto loss = [&](Tape& tape, Var x) {
            Geometry g{2, 3, &ns.positions, tape.constant(bg), 4};
            return inner(apply_operation(p, store, x, g, settings), tape.constant(projection));
          };
          const double tol = bypass ? 1e-4 : 1e-3;
          auto rs = gos::testing::check_store(store, [&](Tape& t) { return loss(t, t.constant(ns.features)); }, seed);
          auto ri = check_inputs({ns.features}, [&](Tape& t, std::span<const Var> v) { return loss(t, v[0]); }, seed);
          CAPTURE(rs.worst);
          CAPTURE(ri.worst);
          CHECK(rs.max_rel_error <= tol);
          CHECK(ri.max_rel_error <= tol);
          kinks += ri.nonsmooth + rs.nonsmooth;
          total += ri.nonsmooth + rs.nonsmooth + ri.checked + rs.checked;
        }
        // Index switches (nearest node, top-M) inside the stencil are rare.
        CHECK(double(kinks) <= 0.05 * double(total));
      }
    }
  }

  TEST_CASE("op names round trip") {
    for (OpKind k : kAllOpKinds) CHECK(parse_op_kind(op_name(k)) == k);
    CHECK_THROWS_AS(parse_op_kind("conv3d"), ParseError);
  }
}
