#pragma once

// Complex vector/matrix arithmetic over split real/imaginary storage.
//
// Packed layout used throughout the library: a row holding n complex values
// stores all n real parts first, then all n imaginary parts. A stack of K
// vectors of length M packs as n = K*M values with entry (k, m) at k*M + m.

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace unibf::linalg {

using Complex = std::complex<double>;

struct CVec {
  std::vector<double> re;
  std::vector<double> im;

  CVec() = default;
  explicit CVec(std::size_t n) : re(n, 0.0), im(n, 0.0) {}
  CVec(std::vector<double> re_part, std::vector<double> im_part);

  std::size_t size() const noexcept { return re.size(); }
  Complex operator[](std::size_t i) const { return {re[i], im[i]}; }
  void set(std::size_t i, Complex z) {
    re[i] = z.real();
    im[i] = z.imag();
  }
  bool all_finite() const noexcept;

  friend bool operator==(const CVec&, const CVec&) = default;
};

/// Square complex matrix, row-major.
struct CMat {
  std::size_t n = 0;
  std::vector<double> re;
  std::vector<double> im;
  /// Set by constructors that guarantee A = A^H (e.g. gram_matrix).
  bool hermitian = false;

  CMat() = default;
  explicit CMat(std::size_t dim) : n(dim), re(dim * dim, 0.0), im(dim * dim, 0.0) {}

  static CMat identity(std::size_t dim, double scale = 1.0);

  Complex operator()(std::size_t i, std::size_t j) const {
    return {re[i * n + j], im[i * n + j]};
  }
  void set(std::size_t i, std::size_t j, Complex z) {
    re[i * n + j] = z.real();
    im[i * n + j] = z.imag();
  }
  /// max |A_ij - conj(A_ji)| <= tol
  bool is_hermitian(double tol = 1e-12) const;
  bool all_finite() const noexcept;
};

/// a^H b (conjugate-linear in a). Throws ShapeError on length mismatch.
Complex hdot(const CVec& a, const CVec& b);

/// sum |a_i|^2
double norm2(const CVec& a);

/// sigma2 * I + sum_j q_j h_j h_j^H. Throws DomainError if any q_j < 0 or
/// sigma2 <= 0, ShapeError on ragged h.
CMat gram_matrix(std::span<const CVec> h, std::span<const double> q,
                 double sigma2);

/// A x
CVec matvec(const CMat& a, const CVec& x);

/// Lower-triangular factor L with A = L L^H and real positive diagonal.
class Cholesky {
 public:
  /// Throws SingularMatrixError if A is not numerically positive definite,
  /// i.e. some pivot d_j fails d_j > rel_pivot_tol * A_jj.
  explicit Cholesky(const CMat& a, double rel_pivot_tol = 0.0);

  /// Solves A x = b using the stored factor.
  CVec solve(const CVec& b) const;

  std::size_t size() const noexcept { return l_.n; }
  const CMat& factor() const noexcept { return l_; }

 private:
  CMat l_;
};

/// Solves A x = b for Hermitian positive-definite A.
CVec hpd_solve(const CMat& a, const CVec& b);

/// Reads vector `index` of length m from a packed row holding `count`
/// vectors.
CVec unpack(std::span<const double> row, std::size_t count, std::size_t m,
            std::size_t index);

/// Writes `v` into slot `index` of a packed row holding `count` vectors.
void pack(const CVec& v, std::span<double> row, std::size_t count,
          std::size_t index);

/// Reads an n x n matrix from a packed row (re block then im block).
CMat unpack_matrix(std::span<const double> row, std::size_t n);

void pack_matrix(const CMat& a, std::span<double> row);

}  // namespace unibf::linalg
