// Compiled with -mavx512f -mfma. Only reached after a CPUID check.

#include <immintrin.h>

#include <algorithm>
#include <cmath>

#include "unibf/simd/kernels.hpp"

namespace unibf::simd {
namespace {

constexpr std::size_t kMr = 8;
constexpr std::size_t kKc = 128;
constexpr std::size_t kNr = 16;

template <bool TransA>
inline const double* a_ptr(const double* a, std::size_t lda, std::size_t i,
                           std::size_t p) {
  return TransA ? &a[p * lda + i] : &a[i * lda + p];
}

template <bool TransA, std::size_t R>
void tile16(std::size_t i0, std::size_t j0, std::size_t k,
            const double* a, std::size_t lda, const double* b,
            std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  __m512d lo[R], hi[R];
  for (std::size_t r = 0; r < R; ++r) {
    if (accumulate) {
      lo[r] = _mm512_loadu_pd(c + (i0 + r) * ldc + j0);
      hi[r] = _mm512_loadu_pd(c + (i0 + r) * ldc + j0 + 8);
    } else {
      lo[r] = _mm512_setzero_pd();
      hi[r] = _mm512_setzero_pd();
    }
  }
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * ldb + j0;
    const __m512d b0 = _mm512_loadu_pd(brow);
    const __m512d b1 = _mm512_loadu_pd(brow + 8);
    for (std::size_t r = 0; r < R; ++r) {
      const __m512d av = _mm512_set1_pd(*a_ptr<TransA>(a, lda, i0 + r, p));
      lo[r] = _mm512_fmadd_pd(av, b0, lo[r]);
      hi[r] = _mm512_fmadd_pd(av, b1, hi[r]);
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    _mm512_storeu_pd(c + (i0 + r) * ldc + j0, lo[r]);
    _mm512_storeu_pd(c + (i0 + r) * ldc + j0 + 8, hi[r]);
  }
}

// Column tail narrower than 16: one masked vector of up to 8 lanes.
template <bool TransA, std::size_t R>
void tile_masked(std::size_t i0, std::size_t j0,
                 std::size_t width, std::size_t k, const double* a,
                 std::size_t lda, const double* b, std::size_t ldb, double* c,
                 std::size_t ldc, bool accumulate) {
  const __mmask8 mask = static_cast<__mmask8>((1u << width) - 1u);
  __m512d acc[R];
  for (std::size_t r = 0; r < R; ++r)
    acc[r] = accumulate ? _mm512_maskz_loadu_pd(mask, c + (i0 + r) * ldc + j0)
                        : _mm512_setzero_pd();
  for (std::size_t p = 0; p < k; ++p) {
    const __m512d b0 = _mm512_maskz_loadu_pd(mask, b + p * ldb + j0);
    for (std::size_t r = 0; r < R; ++r) {
      const __m512d av = _mm512_set1_pd(*a_ptr<TransA>(a, lda, i0 + r, p));
      acc[r] = _mm512_fmadd_pd(av, b0, acc[r]);
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    _mm512_mask_storeu_pd(c + (i0 + r) * ldc + j0, mask, acc[r]);
}

template <bool TransA, std::size_t R>
void row_block(std::size_t i0, std::size_t n, std::size_t k,
               const double* a, std::size_t lda, const double* b,
               std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  std::size_t j = 0;
  for (; j + kNr <= n; j += kNr)
    tile16<TransA, R>(i0, j, k, a, lda, b, ldb, c, ldc, accumulate);
  while (j < n) {
    const std::size_t width = n - j < 8 ? n - j : 8;
    tile_masked<TransA, R>(i0, j, width, k, a, lda, b, ldb, c, ldc,
                   accumulate);
    j += width;
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
    case 7: row_block<TransA, 7>(i, n, k, a, lda, b, ldb, c, ldc, accumulate); break;
    case 6: row_block<TransA, 6>(i, n, k, a, lda, b, ldb, c, ldc, accumulate); break;
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
  __m512d av[R];
  const double* rows[R];
  for (std::size_t q = 0; q < R; ++q) {
    av[q] = _mm512_set1_pd(a[q * step]);
    rows[q] = b + q * ldb;
  }
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    __m512d y = _mm512_loadu_pd(c + j);
    for (std::size_t q = 0; q < R; ++q) y = _mm512_fmadd_pd(av[q], _mm512_loadu_pd(rows[q] + j), y);
    _mm512_storeu_pd(c + j, y);
  }
  if (j < n) {
    const __mmask8 mask = static_cast<__mmask8>((1u << (n - j)) - 1u);
    __m512d y = _mm512_maskz_loadu_pd(mask, c + j);
    for (std::size_t q = 0; q < R; ++q)
      y = _mm512_fmadd_pd(av[q], _mm512_maskz_loadu_pd(mask, rows[q] + j), y);
    _mm512_mask_storeu_pd(c + j, mask, y);
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
void gemm_avx512(bool trans_a, std::size_t m, std::size_t n, std::size_t k,
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

void relu_avx512(const double* x, double* y, std::size_t n) {
  const __m512d zero = _mm512_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m512d v = _mm512_loadu_pd(x + i);
    const __mmask8 pos = _mm512_cmp_pd_mask(v, zero, _CMP_GT_OQ);
    _mm512_storeu_pd(y + i, _mm512_maskz_mov_pd(pos, v));
  }
  for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward_avx512(const double* x, const double* dy, double* dx,
                          std::size_t n) {
  const __m512d zero = _mm512_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __mmask8 pos =
        _mm512_cmp_pd_mask(_mm512_loadu_pd(x + i), zero, _CMP_GT_OQ);
    _mm512_storeu_pd(dx + i, _mm512_maskz_loadu_pd(pos, dy + i));
  }
  for (; i < n; ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
}

void adam_avx512(double* param, const double* grad, double* m, double* v,
                 std::size_t n, const AdamCoeffs& c) {
  const double step = c.lr / c.bias1;
  const double inv_bias2 = 1.0 / c.bias2;
  const __m512d b1 = _mm512_set1_pd(c.beta1);
  const __m512d b2 = _mm512_set1_pd(c.beta2);
  const __m512d one_b1 = _mm512_set1_pd(1.0 - c.beta1);
  const __m512d one_b2 = _mm512_set1_pd(1.0 - c.beta2);
  const __m512d vstep = _mm512_set1_pd(step);
  const __m512d vib2 = _mm512_set1_pd(inv_bias2);
  const __m512d veps = _mm512_set1_pd(c.eps);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m512d g = _mm512_loadu_pd(grad + i);
    __m512d mi = _mm512_loadu_pd(m + i);
    __m512d vi = _mm512_loadu_pd(v + i);
    mi = _mm512_add_pd(_mm512_mul_pd(b1, mi), _mm512_mul_pd(one_b1, g));
    vi = _mm512_add_pd(_mm512_mul_pd(b2, vi),
                       _mm512_mul_pd(one_b2, _mm512_mul_pd(g, g)));
    const __m512d denom =
        _mm512_add_pd(_mm512_sqrt_pd(_mm512_mul_pd(vi, vib2)), veps);
    const __m512d upd = _mm512_div_pd(_mm512_mul_pd(vstep, mi), denom);
    _mm512_storeu_pd(param + i, _mm512_sub_pd(_mm512_loadu_pd(param + i), upd));
    _mm512_storeu_pd(m + i, mi);
    _mm512_storeu_pd(v + i, vi);
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
const KernelTable kAvx512Table{Isa::avx512, gemm_avx512, relu_avx512,
                               relu_backward_avx512, adam_avx512};
}

}  // namespace unibf::simd
