// Compiled with -mavx2 -mfma. Only reached after a CPUID check.

#include <immintrin.h>

#include <algorithm>
#include <cmath>

#include "unibf/simd/kernels.hpp"

namespace unibf::simd {
namespace {

constexpr std::size_t kMr = 6;
constexpr std::size_t kKc = 128;
constexpr std::size_t kNr = 8;

template <bool TransA>
inline const double* a_ptr(const double* a, std::size_t lda, std::size_t i,
                           std::size_t p) {
  return TransA ? &a[p * lda + i] : &a[i * lda + p];
}

// Rows [i0, i0+R) x columns [j0, j0+8).
template <bool TransA, std::size_t R>
void tile8(std::size_t i0, std::size_t j0, std::size_t k,
           const double* a, std::size_t lda, const double* b,
           std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  __m256d lo[R], hi[R];
  for (std::size_t r = 0; r < R; ++r) {
    if (accumulate) {
      lo[r] = _mm256_loadu_pd(c + (i0 + r) * ldc + j0);
      hi[r] = _mm256_loadu_pd(c + (i0 + r) * ldc + j0 + 4);
    } else {
      lo[r] = _mm256_setzero_pd();
      hi[r] = _mm256_setzero_pd();
    }
  }
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * ldb + j0;
    const __m256d b0 = _mm256_loadu_pd(brow);
    const __m256d b1 = _mm256_loadu_pd(brow + 4);
    for (std::size_t r = 0; r < R; ++r) {
      const __m256d av = _mm256_broadcast_sd(
          a_ptr<TransA>(a, lda, i0 + r, p));
      lo[r] = _mm256_fmadd_pd(av, b0, lo[r]);
      hi[r] = _mm256_fmadd_pd(av, b1, hi[r]);
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    _mm256_storeu_pd(c + (i0 + r) * ldc + j0, lo[r]);
    _mm256_storeu_pd(c + (i0 + r) * ldc + j0 + 4, hi[r]);
  }
}

template <bool TransA, std::size_t R>
void tile4(std::size_t i0, std::size_t j0, std::size_t k,
           const double* a, std::size_t lda, const double* b,
           std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  __m256d acc[R];
  for (std::size_t r = 0; r < R; ++r)
    acc[r] = accumulate ? _mm256_loadu_pd(c + (i0 + r) * ldc + j0)
                        : _mm256_setzero_pd();
  for (std::size_t p = 0; p < k; ++p) {
    const __m256d b0 = _mm256_loadu_pd(b + p * ldb + j0);
    for (std::size_t r = 0; r < R; ++r) {
      const __m256d av = _mm256_broadcast_sd(
          a_ptr<TransA>(a, lda, i0 + r, p));
      acc[r] = _mm256_fmadd_pd(av, b0, acc[r]);
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    _mm256_storeu_pd(c + (i0 + r) * ldc + j0, acc[r]);
}

template <bool TransA, std::size_t R>
void row_block(std::size_t i0, std::size_t n, std::size_t k,
               const double* a, std::size_t lda, const double* b,
               std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  std::size_t j = 0;
  for (; j + kNr <= n; j += kNr)
    tile8<TransA, R>(i0, j, k, a, lda, b, ldb, c, ldc, accumulate);
  for (; j + 4 <= n; j += 4)
    tile4<TransA, R>(i0, j, k, a, lda, b, ldb, c, ldc, accumulate);
  for (; j < n; ++j) {
    for (std::size_t r = 0; r < R; ++r) {
      double acc = accumulate ? c[(i0 + r) * ldc + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p)
        acc = std::fma(*a_ptr<TransA>(a, lda, i0 + r, p), b[p * ldb + j], acc);
      c[(i0 + r) * ldc + j] = acc;
    }
  }
}

template <bool TransA>
void gemm_block(std::size_t m, std::size_t n, std::size_t k, const double* a,
                std::size_t lda, const double* b, std::size_t ldb, double* c,
                std::size_t ldc, bool accumulate) {
  std::size_t i = 0;
  for (; i + kMr <= m; i += kMr)
    row_block<TransA, kMr>(i, n, k, a, lda, b, ldb, c, ldc, accumulate);
  switch (m - i) {
    case 5: row_block<TransA, 5>(i, n, k, a, lda, b, ldb, c, ldc, accumulate); break;
    case 4: row_block<TransA, 4>(i, n, k, a, lda, b, ldb, c, ldc, accumulate); break;
    case 3: row_block<TransA, 3>(i, n, k, a, lda, b, ldb, c, ldc, accumulate); break;
    case 2: row_block<TransA, 2>(i, n, k, a, lda, b, ldb, c, ldc, accumulate); break;
    case 1: row_block<TransA, 1>(i, n, k, a, lda, b, ldb, c, ldc, accumulate); break;
    default: break;
  }
}

// Single output row: B is streamed row by row and every C element still sees
// the same fused multiply-adds in ascending k.
template <std::size_t R>
void gemv_rows(std::size_t n, const double* a, std::size_t step,
               const double* b, std::size_t ldb, double* c) {
  __m256d av[R];
  const double* rows[R];
  for (std::size_t q = 0; q < R; ++q) {
    av[q] = _mm256_set1_pd(a[q * step]);
    rows[q] = b + q * ldb;
  }
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    __m256d y = _mm256_loadu_pd(c + j);
    for (std::size_t q = 0; q < R; ++q) y = _mm256_fmadd_pd(av[q], _mm256_loadu_pd(rows[q] + j), y);
    _mm256_storeu_pd(c + j, y);
  }
  for (; j < n; ++j) {
    double y = c[j];
    for (std::size_t q = 0; q < R; ++q) y = std::fma(a[q * step], rows[q][j], y);
    c[j] = y;
  }
}

void gemv(bool trans_a, std::size_t n, std::size_t k, const double* a,
          std::size_t lda, const double* b, std::size_t ldb, double* c,
          bool accumulate) {
  if (!accumulate) std::fill(c, c + n, 0.0);
  const std::size_t step = trans_a ? lda : 1;
  std::size_t p = 0;
  for (; p + 8 <= k; p += 8) gemv_rows<8>(n, a + p * step, step, b + p * ldb, ldb, c);
  for (; p < k; ++p) gemv_rows<1>(n, a + p * step, step, b + p * ldb, ldb, c);
}

// Panels of kKc reduction steps keep the B panel cache resident. Partial sums
// go through C, so each element still accumulates in ascending k.
void gemm_avx2(bool trans_a, std::size_t m, std::size_t n, std::size_t k,
               const double* a, std::size_t lda, const double* b,
               std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  if (m == 1) {
    gemv(trans_a, n, k, a, lda, b, ldb, c, accumulate);
    return;
  }
  for (std::size_t p0 = 0; p0 < k || p0 == 0; p0 += kKc) {
    const std::size_t kc = std::min(kKc, k - p0);
    const double* ap = trans_a ? a + p0 * lda : a + p0;
    const double* bp = b + p0 * ldb;
    const bool acc = accumulate || p0 > 0;
    if (trans_a)
      gemm_block<true>(m, n, kc, ap, lda, bp, ldb, c, ldc, acc);
    else
      gemm_block<false>(m, n, kc, ap, lda, bp, ldb, c, ldc, acc);
    if (k == 0) break;
  }
}

void relu_avx2(const double* x, double* y, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_loadu_pd(x + i);
    // Keeps strictly positive lanes; -0.0 and NaN map to 0 as in the reference.
    const __m256d mask = _mm256_cmp_pd(v, zero, _CMP_GT_OQ);
    _mm256_storeu_pd(y + i, _mm256_and_pd(mask, v));
  }
  for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward_avx2(const double* x, const double* dy, double* dx,
                        std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d mask =
        _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GT_OQ);
    _mm256_storeu_pd(dx + i, _mm256_and_pd(mask, _mm256_loadu_pd(dy + i)));
  }
  for (; i < n; ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
}

void adam_avx2(double* param, const double* grad, double* m, double* v,
               std::size_t n, const AdamCoeffs& c) {
  const double step = c.lr / c.bias1;
  const double inv_bias2 = 1.0 / c.bias2;
  const __m256d b1 = _mm256_set1_pd(c.beta1);
  const __m256d b2 = _mm256_set1_pd(c.beta2);
  const __m256d one_b1 = _mm256_set1_pd(1.0 - c.beta1);
  const __m256d one_b2 = _mm256_set1_pd(1.0 - c.beta2);
  const __m256d vstep = _mm256_set1_pd(step);
  const __m256d vib2 = _mm256_set1_pd(inv_bias2);
  const __m256d veps = _mm256_set1_pd(c.eps);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d g = _mm256_loadu_pd(grad + i);
    __m256d mi = _mm256_loadu_pd(m + i);
    __m256d vi = _mm256_loadu_pd(v + i);
    mi = _mm256_add_pd(_mm256_mul_pd(b1, mi), _mm256_mul_pd(one_b1, g));
    vi = _mm256_add_pd(_mm256_mul_pd(b2, vi),
                       _mm256_mul_pd(one_b2, _mm256_mul_pd(g, g)));
    const __m256d denom =
        _mm256_add_pd(_mm256_sqrt_pd(_mm256_mul_pd(vi, vib2)), veps);
    const __m256d upd = _mm256_div_pd(_mm256_mul_pd(vstep, mi), denom);
    _mm256_storeu_pd(param + i, _mm256_sub_pd(_mm256_loadu_pd(param + i), upd));
    _mm256_storeu_pd(m + i, mi);
    _mm256_storeu_pd(v + i, vi);
  }
  for (; i < n; ++i) {
    const double g = grad[i];
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * (g * g);
    param[i] -= step * m[i] / (std::sqrt(v[i] * inv_bias2) + c.eps);
  }
}

}  // namespace

namespace detail {
const KernelTable kAvx2Table{Isa::avx2, gemm_avx2, relu_avx2,
                             relu_backward_avx2, adam_avx2};
}

}  // namespace unibf::simd
