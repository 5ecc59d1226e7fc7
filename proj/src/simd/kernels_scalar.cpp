#include <algorithm>
#include <cmath>

#include "unibf/simd/kernels.hpp"

namespace unibf::simd {
namespace {

void gemm_scalar(bool trans_a, std::size_t m, std::size_t n, std::size_t k,
                 const double* a, std::size_t lda, const double* b,
                 std::size_t ldb, double* c, std::size_t ldc,
                 bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * ldc;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = trans_a ? a[p * lda + i] : a[i * lda + p];
      const double* brow = b + p * ldb;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void relu_scalar(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward_scalar(const double* x, const double* dy, double* dx,
                          std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
}

void adam_scalar(double* param, const double* grad, double* m, double* v,
                 std::size_t n, const AdamCoeffs& c) {
  const double step = c.lr / c.bias1;
  const double inv_bias2 = 1.0 / c.bias2;
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad[i];
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * (g * g);
    param[i] -= step * m[i] / (std::sqrt(v[i] * inv_bias2) + c.eps);
  }
}

}  // namespace

namespace detail {
const KernelTable kScalarTable{Isa::scalar, gemm_scalar, relu_scalar,
                               relu_backward_scalar, adam_scalar};
}

}  // namespace unibf::simd
