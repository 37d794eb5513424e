// Compiled with -mavx2 -mfma. Only reached through the dispatch table after a
// runtime CPU check, so nothing here may be called from generic code.
#include <immintrin.h>

#include <cstring>

#include "variants.hpp"

namespace gos::kernels {
namespace avx2_impl {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

double dot(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  if (i + 4 <= n) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    i += 4;
  }
  double s = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void mul(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void add(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

// c[0..n) += a0*b0 + a1*b1 + a2*b2 + a3*b3, one pass over c.
inline void axpy4(const double* coef, const double* b0, const double* b1, const double* b2,
                  const double* b3, double* c, std::size_t n) {
  const __m256d v0 = _mm256_set1_pd(coef[0]);
  const __m256d v1 = _mm256_set1_pd(coef[1]);
  const __m256d v2 = _mm256_set1_pd(coef[2]);
  const __m256d v3 = _mm256_set1_pd(coef[3]);
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    __m256d acc = _mm256_loadu_pd(c + j);
    acc = _mm256_fmadd_pd(v0, _mm256_loadu_pd(b0 + j), acc);
    acc = _mm256_fmadd_pd(v1, _mm256_loadu_pd(b1 + j), acc);
    acc = _mm256_fmadd_pd(v2, _mm256_loadu_pd(b2 + j), acc);
    acc = _mm256_fmadd_pd(v3, _mm256_loadu_pd(b3 + j), acc);
    _mm256_storeu_pd(c + j, acc);
  }
  for (; j < n; ++j)
    c[j] += coef[0] * b0[j] + coef[1] * b1[j] + coef[2] * b2[j] + coef[3] * b3[j];
}

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(double) * m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    std::size_t p = 0;
    for (; p + 4 <= k; p += 4)
      axpy4(ai + p, b + p * n, b + (p + 1) * n, b + (p + 2) * n, b + (p + 3) * n, ci, n);
    for (; p < k; ++p) axpy(ai[p], b + p * n, ci, n);
  }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double s = dot(ai, b + j * k, k);
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(double) * m * n);
  std::size_t p = 0;
  double coef[4];
  for (; p + 4 <= k; p += 4) {
    for (std::size_t i = 0; i < m; ++i) {
      coef[0] = a[p * m + i];
      coef[1] = a[(p + 1) * m + i];
      coef[2] = a[(p + 2) * m + i];
      coef[3] = a[(p + 3) * m + i];
      axpy4(coef, b + p * n, b + (p + 1) * n, b + (p + 2) * n, b + (p + 3) * n, c + i * n, n);
    }
  }
  for (; p < k; ++p)
    for (std::size_t i = 0; i < m; ++i) axpy(a[p * m + i], b + p * n, c + i * n, n);
}

}  // namespace avx2_impl

const KernelTable& avx2_table() {
  static const KernelTable t{Backend::avx2, "avx2", avx2_impl::dot, avx2_impl::axpy, avx2_impl::mul,
                             avx2_impl::add, avx2_impl::gemm_nn, avx2_impl::gemm_nt, avx2_impl::gemm_tn};
  return t;
}

}  // namespace gos::kernels
