#include <doctest.h>

#include <random>
#include <vector>

#include "gos/errors.hpp"
#include "gos/kernels.hpp"
#include "gos/tensor.hpp"

using namespace gos;
namespace k = gos::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

void naive_gemm(std::size_t m, std::size_t n, std::size_t kk, const std::vector<double>& a, bool ta,
                const std::vector<double>& b, bool tb, std::vector<double>& c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < kk; ++p) {
        const double av = ta ? a[p * m + i] : a[i * kk + p];
        const double bv = tb ? b[j * kk + p] : b[p * n + j];
        s += av * bv;
      }
      c[i * n + j] += s;
    }
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("construction checks element count") {
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
    Tensor t({2, 3}, 1.5);
    CHECK(t.size() == 6);
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 3);
    CHECK(t(1, 2) == 1.5);
  }

  TEST_CASE("rank-1 and rank-3 matrix views") {
    Tensor r = Tensor::row({1, 2, 3});
    CHECK(r.rows() == 1);
    CHECK(r.cols() == 3);
    Tensor t({2, 3, 4});
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 12);
  }

  TEST_CASE("reshape keeps data and rejects bad sizes") {
    Tensor m = Tensor::matrix(2, 2, {1, 2, 3, 4});
    Tensor r = m.reshaped({4, 1});
    CHECK(r(2, 0) == 3);
    CHECK_THROWS_AS(m.reshaped({3, 1}), DimensionError);
  }

  TEST_CASE("finiteness and diff helpers") {
    Tensor a = Tensor::row({1, 2});
    CHECK(a.all_finite());
    Tensor b = Tensor::row({1, std::numeric_limits<double>::infinity()});
    CHECK_FALSE(b.all_finite());
    CHECK(max_abs_diff(a, Tensor::row({1, 2.5})) == doctest::Approx(0.5));
    CHECK(max_abs(Tensor::row({-3, 2})) == 3);
    CHECK(Tensor::identity(3)(1, 1) == 1);
    CHECK(Tensor::identity(3)(1, 2) == 0);
  }
}

TEST_SUITE("kernels") {
  TEST_CASE("scalar backend is always supported and parse round trips") {
    CHECK(k::supported(k::Backend::scalar));
    for (auto b : k::supported_backends()) CHECK(k::parse_backend(k::backend_name(b)) == b);
    CHECK_THROWS_AS(k::parse_backend("sse9"), ConfigError);
  }

  TEST_CASE("vector kernels agree with the scalar reference for every length") {
    std::mt19937_64 rng(11);
    const auto& ref = k::table(k::Backend::scalar);
    for (auto backend : k::supported_backends()) {
      const auto& t = k::table(backend);
      CAPTURE(k::backend_name(backend));
      for (std::size_t n = 0; n <= 37; ++n) {
        auto a = random_vec(n, rng), b = random_vec(n, rng);
        const double d0 = ref.dot(a.data(), b.data(), n);
        const double d1 = t.dot(a.data(), b.data(), n);
        CHECK(std::abs(d0 - d1) <= 1e-12 * (1 + std::abs(d0)));

        auto y0 = b, y1 = b;
        ref.axpy(0.7, a.data(), y0.data(), n);
        t.axpy(0.7, a.data(), y1.data(), n);
        CHECK(max_diff(y0, y1) <= 1e-14);

        std::vector<double> m0(n), m1(n), s0(n), s1(n);
        ref.mul(a.data(), b.data(), m0.data(), n);
        t.mul(a.data(), b.data(), m1.data(), n);
        ref.add(a.data(), b.data(), s0.data(), n);
        t.add(a.data(), b.data(), s1.data(), n);
        CHECK(m0 == m1);
        CHECK(s0 == s1);
      }
    }
  }

  TEST_CASE("gemm variants agree with a naive triple loop") {
    std::mt19937_64 rng(5);
    const std::size_t shapes[][3] = {{1, 1, 1}, {3, 5, 7}, {8, 8, 8}, {13, 4, 9}, {2, 17, 3}, {16, 33, 5}, {0, 3, 2}, {4, 4, 0}};
    for (auto backend : k::supported_backends()) {
      const auto& t = k::table(backend);
      CAPTURE(k::backend_name(backend));
      for (const auto& s : shapes) {
        const std::size_t m = s[0], n = s[1], kk = s[2];
        auto a = random_vec(m * kk, rng), b = random_vec(kk * n, rng), c0 = random_vec(m * n, rng);
        for (bool acc : {false, true}) {
          std::vector<double> want = acc ? c0 : std::vector<double>(m * n, 0.0);
          std::vector<double> got;

          auto w = want;
          naive_gemm(m, n, kk, a, false, b, false, w);
          got = c0;
          t.gemm_nn(m, n, kk, a.data(), b.data(), got.data(), acc);
          CHECK(max_diff(w, got) <= 1e-12);

          w = want;
          naive_gemm(m, n, kk, a, false, b, true, w);
          got = c0;
          t.gemm_nt(m, n, kk, a.data(), b.data(), got.data(), acc);
          CHECK(max_diff(w, got) <= 1e-12);

          w = want;
          naive_gemm(m, n, kk, a, true, b, false, w);
          got = c0;
          t.gemm_tn(m, n, kk, a.data(), b.data(), got.data(), acc);
          CHECK(max_diff(w, got) <= 1e-12);
        }
      }
    }
  }

  TEST_CASE("scoped backend restores the previous selection") {
    const auto before = k::active().backend;
    {
      k::ScopedBackend s(k::Backend::scalar);
      CHECK(k::active().backend == k::Backend::scalar);
    }
    CHECK(k::active().backend == before);
  }
}
