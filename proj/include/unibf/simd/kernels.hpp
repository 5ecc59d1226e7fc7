#pragma once

// Dense real kernels used by the network trunk and the optimizer.
//
// Every kernel has a portable scalar reference implementation and, on x86-64,
// AVX2+FMA and AVX-512 variants compiled in separate translation units with
// their own target flags. The variant is chosen once at startup from CPUID
// (overridable with the UNIBF_ISA environment variable: scalar|avx2|avx512).
//
// All variants accumulate each output element in the same order (ascending
// reduction index), so they differ from the reference only by FMA rounding.

#include <cstddef>
#include <string_view>

namespace unibf::simd {

enum class Isa { scalar, avx2, avx512 };

std::string_view isa_name(Isa isa);

/// C = op(A) * B            (accumulate == false)
/// C = C + op(A) * B        (accumulate == true)
///
/// op(A) is A (m x k, row stride lda) or, with trans_a, the transpose of a
/// k x m matrix with row stride lda. B is k x n with row stride ldb and C is
/// m x n with row stride ldc. All matrices are row-major.
using GemmFn = void (*)(bool trans_a, std::size_t m, std::size_t n,
                        std::size_t k, const double* a, std::size_t lda,
                        const double* b, std::size_t ldb, double* c,
                        std::size_t ldc, bool accumulate);

/// y[i] = max(x[i], 0)
using ReluFn = void (*)(const double* x, double* y, std::size_t n);

/// dx[i] = x[i] > 0 ? dy[i] : 0
using ReluBackwardFn = void (*)(const double* x, const double* dy, double* dx,
                                std::size_t n);

struct AdamCoeffs {
  double lr;
  double beta1;
  double beta2;
  double eps;
  double bias1;  // 1 - beta1^t
  double bias2;  // 1 - beta2^t
};

/// In-place bias-corrected Adam update of n parameters.
using AdamFn = void (*)(double* param, const double* grad, double* m,
                        double* v, std::size_t n, const AdamCoeffs& c);

struct KernelTable {
  Isa isa;
  GemmFn gemm;
  ReluFn relu;
  ReluBackwardFn relu_backward;
  AdamFn adam;
};

bool isa_supported(Isa isa);

/// Kernel table for a specific ISA. Throws if the CPU lacks it.
const KernelTable& kernels_for(Isa isa);

/// Kernel table selected at startup.
const KernelTable& kernels();

/// Overrides the active ISA (tests, benchmarks). Throws if unsupported.
void set_active_isa(Isa isa);

Isa active_isa();

namespace detail {
extern const KernelTable kScalarTable;
#if defined(__x86_64__) || defined(_M_X64)
extern const KernelTable kAvx2Table;
extern const KernelTable kAvx512Table;
#endif
}  // namespace detail

}  // namespace unibf::simd
