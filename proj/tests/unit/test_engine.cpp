#include <doctest.h>

#include <cmath>
#include <random>

#include "gos/errors.hpp"
#include "gos/engine.hpp"
#include "gos/optim.hpp"
#include "gradcheck.hpp"

using namespace gos;
using gos::testing::check_inputs;
using gos::testing::GradCheckOptions;
using gos::testing::random_tensor;

namespace {

constexpr int kSeeds = 20;

// Runs a gradient check over kSeeds random draws of the given input shapes.
void gradcheck_sweep(const std::vector<Shape>& shapes, const gos::testing::InputFunction& fn, double tol,
                     bool training = false) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    std::vector<Tensor> inputs;
    for (const auto& s : shapes) inputs.push_back(random_tensor(s, rng));
    auto rep = check_inputs(inputs, fn, seed, {}, training);
    CAPTURE(seed);
    CAPTURE(rep.worst);
    CHECK(rep.checked > 0);
    CHECK(rep.max_rel_error <= tol);
  }
}

}  // namespace

TEST_SUITE("engine") {
  TEST_CASE("matmul examples") {
    Tape tape;
    Var i2 = tape.constant(Tensor::identity(2));
    Var m = tape.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
    CHECK(matmul(i2, m).value() == Tensor::matrix(2, 2, {1, 2, 3, 4}));
    Var sel = tape.constant(Tensor::matrix(2, 2, {1, 0, 0, 0}));
    Var col = tape.constant(Tensor::matrix(2, 1, {5, 7}));
    CHECK(matmul(sel, col).value() == Tensor::matrix(2, 1, {5, 0}));
    CHECK_THROWS_AS(matmul(m, tape.constant(Tensor({3, 1}))), DimensionError);
  }

  TEST_CASE("row_softmax examples") {
    Tape tape;
    Var z = row_softmax(tape.constant(Tensor({1, 4})));
    for (double v : z.value().values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
    Var p = row_softmax(tape.constant(Tensor::row({10, 0})));
    CHECK(p.value()[0] >= 1 - 5e-5);

    std::mt19937_64 rng(3);
    for (int rep = 0; rep < 20; ++rep) {
      Tensor x = random_tensor({4, 6}, rng, 5.0);
      Tensor shifted = x;
      for (std::size_t c = 0; c < 6; ++c) shifted(2, c) += 123.25;
      Var a = row_softmax(tape.constant(x));
      Var b = row_softmax(tape.constant(shifted));
      CHECK(max_abs_diff(a.value(), b.value()) <= 1e-12);
      for (std::size_t r = 0; r < 4; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < 6; ++c) {
          CHECK(a.value()(r, c) > 0);
          s += a.value()(r, c);
        }
        CHECK(std::abs(s - 1) <= 1e-12);
      }
    }
  }

  TEST_CASE("row_softmax with masked diagonal") {
    Tape tape;
    Var z = row_softmax(tape.constant(Tensor::matrix(2, 2, {100, 0, 0, 100})), true);
    CHECK(z.value() == Tensor::matrix(2, 2, {0, 1, 1, 0}));
    Var single = row_softmax(tape.constant(Tensor::scalar(4)), true);
    CHECK(single.value()[0] == 0.0);
  }

  TEST_CASE("conv1d_same examples") {
    Tape tape;
    std::mt19937_64 rng(2);
    Tensor x = random_tensor({6, 3}, rng);
    Tensor delta({5, 3, 3});
    for (std::size_t c = 0; c < 3; ++c) delta[(2 * 3 + c) * 3 + c] = 1.0;
    Var y = conv1d_same(tape.constant(x), tape.constant(delta));
    CHECK(max_abs_diff(y.value(), x) == 0.0);

    Tensor avg({3, 1, 1}, 1.0 / 3.0);
    Var c = conv1d_same(tape.constant(Tensor({5, 1}, 2.0)), tape.constant(avg));
    CHECK(c.value()(0, 0) == doctest::Approx(2.0 * 2.0 / 3.0));
    for (std::size_t t = 1; t < 4; ++t) CHECK(c.value()(t, 0) == doctest::Approx(2.0));
    CHECK(c.value()(4, 0) == doctest::Approx(2.0 * 2.0 / 3.0));

    CHECK_THROWS_AS(conv1d_same(tape.constant(x), tape.constant(Tensor({4, 3, 3}))), ConfigError);
  }

  TEST_CASE("layernorm_leakyrelu examples") {
    Tape tape;
    const double slope = 0.01;
    Var g = tape.constant(Tensor::row({1, 1}));
    Var b0 = tape.constant(Tensor::row({0, 0}));
    Var y = layernorm_leakyrelu(tape.constant(Tensor::row({1, -1})), g, b0, slope);
    CHECK(y.value()[0] == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(y.value()[1] == doctest::Approx(-slope).epsilon(1e-5));

    Var bias = tape.constant(Tensor::row({0.5, -2, 0.25}));
    Var flat = layernorm_leakyrelu(tape.constant(Tensor({3, 3}, 7.0)), tape.constant(Tensor::row({1, 1, 1})), bias,
                                   slope);
    for (std::size_t r = 0; r < 3; ++r) {
      CHECK(flat.value()(r, 0) == doctest::Approx(0.5));
      CHECK(flat.value()(r, 1) == doctest::Approx(-0.02));
      CHECK(flat.value()(r, 2) == doctest::Approx(0.25));
    }
    Var one = layernorm_leakyrelu(tape.constant(Tensor::scalar(3)), tape.constant(Tensor::scalar(1)),
                                  tape.constant(Tensor::scalar(0.5)), slope);
    CHECK(one.value()[0] == doctest::Approx(0.5));
  }

  TEST_CASE("backward examples and contracts") {
    Tape tape;
    Var x = tape.input(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
    tape.backward(sum(x));
    for (double v : tape.grad(x).values()) CHECK(v == 1.0);

    Tape t2;
    Var s = t2.input(Tensor::scalar(3));
    t2.backward(mul(s, s));
    CHECK(t2.grad(s)[0] == 6.0);

    Tape t3;
    Var v = t3.input(Tensor::row({1, 2}));
    CHECK_THROWS_AS(t3.backward(v), ContractError);

    Tape t4;
    Var big = t4.input(Tensor::scalar(800));
    Var huge = scale(big, 1e305);
    CHECK_THROWS_WITH_AS(mul(huge, huge), doctest::Contains("mul"), NumericError);
  }

  TEST_CASE("repeated backward after zeroing is identical") {
    std::mt19937_64 rng(8);
    Tape tape;
    Var a = tape.input(random_tensor({3, 4}, rng));
    Var b = tape.input(random_tensor({4, 2}, rng));
    Var loss = sum(sigmoid(matmul(a, b)));
    tape.backward(loss);
    Tensor ga = tape.grad(a), gb = tape.grad(b);
    tape.zero_grad();
    tape.backward(loss);
    CHECK(tape.grad(a) == ga);
    CHECK(tape.grad(b) == gb);
  }

  TEST_CASE("frozen parameters collect no gradient") {
    ParameterStore store;
    ParamId w = store.add("w", Tensor::row({1, 2}));
    ParamId f = store.add("f", Tensor::row({3, 4}));
    Tape tape;
    Var loss = sum(mul(tape.param(store, w), tape.param(store, f, false)));
    tape.backward(loss);
    GradStore g(store);
    tape.accumulate(store, g);
    CHECK(g[w] == Tensor::row({3, 4}));
    CHECK(g[f] == Tensor::row({0, 0}));
  }

  TEST_CASE("gradient checks: elementwise, reductions and products") {
    gradcheck_sweep({{3, 4}, {3, 4}}, [](Tape&, std::span<const Var> v) { return add(v[0], v[1]); }, 1e-4);
    gradcheck_sweep({{3, 4}, {1, 4}}, [](Tape&, std::span<const Var> v) { return sub(v[0], v[1]); }, 1e-4);
    gradcheck_sweep({{3, 4}, {3, 4}}, [](Tape&, std::span<const Var> v) { return mul(v[0], v[1]); }, 1e-4);
    gradcheck_sweep({{3, 4}, {1, 1}}, [](Tape&, std::span<const Var> v) { return mul(v[0], v[1]); }, 1e-4);
    gradcheck_sweep({{3, 4}}, [](Tape&, std::span<const Var> v) { return add_scalar(scale(v[0], -2.5), 1.0); }, 1e-4);
    gradcheck_sweep({{3, 4}, {4, 2}}, [](Tape&, std::span<const Var> v) { return matmul(v[0], v[1]); }, 1e-4);
    gradcheck_sweep({{3, 4}, {5, 4}}, [](Tape&, std::span<const Var> v) { return matmul_nt(v[0], v[1]); }, 1e-4);
    gradcheck_sweep({{3, 4}}, [](Tape&, std::span<const Var> v) { return transpose(v[0]); }, 1e-4);
    gradcheck_sweep({{3, 4}}, [](Tape&, std::span<const Var> v) { return sigmoid(v[0]); }, 1e-4);
    gradcheck_sweep({{3, 4}}, [](Tape&, std::span<const Var> v) { return leaky_relu(v[0], 0.01); }, 1e-4);
    gradcheck_sweep({{3, 4}}, [](Tape&, std::span<const Var> v) { return sum(v[0]); }, 1e-4);
    gradcheck_sweep({{3, 4}}, [](Tape&, std::span<const Var> v) { return mean(v[0]); }, 1e-4);
    gradcheck_sweep({{3, 4}}, [](Tape&, std::span<const Var> v) { return sum_rows(v[0]); }, 1e-4);
    gradcheck_sweep({{3, 4}}, [](Tape&, std::span<const Var> v) { return mean_rows(v[0]); }, 1e-4);
    gradcheck_sweep({{3, 4}, {3, 4}}, [](Tape&, std::span<const Var> v) { return inner(v[0], v[1]); }, 1e-4);
    gradcheck_sweep({{4, 3}, {4, 1}}, [](Tape&, std::span<const Var> v) { return scale_rows(v[0], v[1]); }, 1e-4);
  }

  TEST_CASE("gradient checks: softmax, structure and losses") {
    gradcheck_sweep({{3, 5}}, [](Tape&, std::span<const Var> v) { return row_softmax(v[0]); }, 1e-4);
    gradcheck_sweep({{4, 4}}, [](Tape&, std::span<const Var> v) { return row_softmax(v[0], true); }, 1e-4);
    gradcheck_sweep({{1, 5}}, [](Tape&, std::span<const Var> v) { return softmax_cross_entropy(v[0], 2); }, 1e-4);
    gradcheck_sweep({{2, 3}, {2, 2}}, [](Tape&, std::span<const Var> v) {
      std::vector<Var> parts(v.begin(), v.end());
      return concat_cols(parts);
    }, 1e-4);
    gradcheck_sweep({{2, 3}, {1, 3}}, [](Tape&, std::span<const Var> v) {
      std::vector<Var> parts(v.begin(), v.end());
      return concat_rows(parts);
    }, 1e-4);
    gradcheck_sweep({{4, 3}}, [](Tape&, std::span<const Var> v) { return slice_rows(reshape(v[0], {3, 4}), 1, 2); },
                    1e-4);
    gradcheck_sweep({{4, 3}}, [](Tape&, std::span<const Var> v) {
      const long idx[] = {3, -1, 0, 0};
      return gather_rows(v[0], idx);
    }, 1e-4);
    gradcheck_sweep({{4, 3}}, [](Tape&, std::span<const Var> v) {
      const long idx[] = {11, 0, -1, 5, 5, 2};
      return gather_elements(v[0], 2, 3, idx);
    }, 1e-4);
    gradcheck_sweep({{3, 2}, {3, 2}, {1, 2}}, [](Tape&, std::span<const Var> v) {
      const Var terms[] = {v[0], v[1]};
      return weighted_sum(terms, v[2]);
    }, 1e-4);
    gradcheck_sweep({{9, 3}, {7, 2, 3}}, [](Tape&, std::span<const Var> v) { return conv1d_same(v[0], v[1]); }, 1e-4);
  }

  TEST_CASE("gradient checks: layer normalization") {
    gradcheck_sweep({{5, 8}, {1, 8}, {1, 8}},
                    [](Tape&, std::span<const Var> v) { return layer_norm(v[0], v[1], v[2]); }, 1e-3);
    gradcheck_sweep({{5, 8}, {1, 8}, {1, 8}},
                    [](Tape&, std::span<const Var> v) { return layernorm_leakyrelu(v[0], v[1], v[2]); }, 1e-3);
  }

  TEST_CASE("dropout: eval identity, train inverted scaling") {
    Tape eval;
    Tensor x({1, 10}, 2.0);
    CHECK(dropout(eval.constant(x), 0.3).value() == x);

    Tape train(true, 99);
    Tensor ones({1, 100000}, 1.0);
    Var y = dropout(train.constant(ones), 0.3);
    double m = 0;
    std::size_t zeros = 0;
    for (double v : y.value().values()) {
      m += v;
      if (v == 0.0) ++zeros;
      else CHECK(v == doctest::Approx(1.0 / 0.7));
    }
    m /= 100000.0;
    CHECK(std::abs(m - 1.0) <= 0.02);
    CHECK(std::abs(double(zeros) / 100000.0 - 0.3) <= 0.01);
    CHECK_THROWS_AS(dropout(train.constant(ones), 1.0), ConfigError);
  }

  TEST_CASE("top_k and argmax tie rules") {
    const double s[] = {1, 3, 3, 2, 3};
    CHECK(top_k(s, 3) == std::vector<std::size_t>{1, 2, 4});
    CHECK(top_k(s, 10).size() == 5);
    CHECK(argmax(s) == 1);
  }

  TEST_CASE("same seed gives bitwise identical updates") {
    auto run = [] {
      ParameterStore store;
      std::mt19937_64 rng(4);
      ParamId w = store.add("w", random_tensor({4, 3}, rng));
      Tensor x = random_tensor({5, 4}, rng);
      Tape tape(true, 17);
      Var h = dropout(matmul(tape.constant(x), tape.param(store, w)), 0.3);
      Var loss = softmax_cross_entropy(reshape(sum_rows(h), {1, 3}), 1);
      tape.backward(loss);
      GradStore g(store);
      tape.accumulate(store, g);
      Sgd(0.1).step(store, g);
      return store.value(w);
    };
    CHECK(run() == run());
  }
}

TEST_SUITE("optim") {
  TEST_CASE("sgd and adam steps") {
    ParameterStore store;
    ParamId w = store.add("w", Tensor::row({1.0, -2.0}));
    GradStore g(store);
    g[w] = Tensor::row({0.5, -1.0});
    Sgd sgd(0.1);
    sgd.step(store, g);
    CHECK(store.value(w)[0] == doctest::Approx(0.95));
    CHECK(store.value(w)[1] == doctest::Approx(-1.9));

    ParameterStore s2;
    ParamId v = s2.add("v", Tensor::row({0.0, 0.0}));
    Adam adam(1e-3);
    adam.step(s2, g);
    // The first bias-corrected Adam step has magnitude lr in every coordinate.
    CHECK(s2.value(v)[0] == doctest::Approx(-1e-3).epsilon(1e-6));
    CHECK(s2.value(v)[1] == doctest::Approx(1e-3).epsilon(1e-6));
    CHECK(adam.steps() == 1);
  }

  TEST_CASE("plateau schedule decays after five stagnant epochs and stops at the floor") {
    PlateauSchedule s(1e-3, 1e-4, 5);
    for (int e = 0; e < 5; ++e) CHECK_FALSE(s.observe(1.0));
    CHECK(s.lr() == doctest::Approx(1e-3));
    CHECK_FALSE(s.observe(1.0));
    CHECK(s.lr() == doctest::Approx(1e-4));
    for (int e = 0; e < 4; ++e) CHECK_FALSE(s.observe(1.0));
    CHECK(s.observe(1.0));
  }

  TEST_CASE("plateau schedule resets on improvement") {
    PlateauSchedule s(1e-3, 1e-4, 5);
    s.observe(1.0);
    for (int e = 0; e < 4; ++e) s.observe(1.0);
    s.observe(0.5);
    CHECK(s.improved_last());
    CHECK(s.stagnant_epochs() == 0);
    CHECK(s.lr() == doctest::Approx(1e-3));
  }
}
