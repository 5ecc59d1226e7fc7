#include "unibf/complex_linalg.hpp"

#include <cmath>
#include <string>

#include "unibf/error.hpp"

namespace unibf::linalg {

CVec::CVec(std::vector<double> re_part, std::vector<double> im_part)
    : re(std::move(re_part)), im(std::move(im_part)) {
  if (re.size() != im.size())
    throw ShapeError("CVec: real and imaginary parts differ in length");
}

bool CVec::all_finite() const noexcept {
  for (std::size_t i = 0; i < re.size(); ++i)
    if (!std::isfinite(re[i]) || !std::isfinite(im[i])) return false;
  return true;
}

CMat CMat::identity(std::size_t dim, double scale) {
  CMat a(dim);
  for (std::size_t i = 0; i < dim; ++i) a.re[i * dim + i] = scale;
  a.hermitian = true;
  return a;
}

bool CMat::is_hermitian(double tol) const {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j)
      if (std::abs((*this)(i, j) - std::conj((*this)(j, i))) > tol)
        return false;
  return true;
}

bool CMat::all_finite() const noexcept {
  for (std::size_t i = 0; i < re.size(); ++i)
    if (!std::isfinite(re[i]) || !std::isfinite(im[i])) return false;
  return true;
}

Complex hdot(const CVec& a, const CVec& b) {
  if (a.size() != b.size())
    throw ShapeError("hdot: length mismatch (" + std::to_string(a.size()) +
                     " vs " + std::to_string(b.size()) + ")");
  double sr = 0.0;
  double si = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    // conj(a_i) * b_i
    sr += a.re[i] * b.re[i] + a.im[i] * b.im[i];
    si += a.re[i] * b.im[i] - a.im[i] * b.re[i];
  }
  return {sr, si};
}

double norm2(const CVec& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    s += a.re[i] * a.re[i] + a.im[i] * a.im[i];
  return s;
}

CMat gram_matrix(std::span<const CVec> h, std::span<const double> q,
                 double sigma2) {
  if (h.size() != q.size())
    throw ShapeError("gram_matrix: " + std::to_string(h.size()) +
                     " channels but " + std::to_string(q.size()) + " weights");
  if (!(sigma2 > 0.0)) throw DomainError("gram_matrix: sigma2 must be > 0");
  if (h.empty()) throw ShapeError("gram_matrix: no channels");
  const std::size_t m = h.front().size();
  for (std::size_t j = 0; j < h.size(); ++j) {
    if (h[j].size() != m) throw ShapeError("gram_matrix: ragged channel rows");
    if (q[j] < 0.0)
      throw DomainError("gram_matrix: negative weight q[" + std::to_string(j) +
                        "]");
  }
  CMat a(m);
  for (std::size_t r = 0; r < m; ++r) {
    double diag = sigma2;
    for (std::size_t j = 0; j < h.size(); ++j)
      diag += q[j] * (h[j].re[r] * h[j].re[r] + h[j].im[r] * h[j].im[r]);
    a.re[r * m + r] = diag;
    for (std::size_t c = r + 1; c < m; ++c) {
      // sum_j q_j h_j[r] conj(h_j[c])
      double sr = 0.0;
      double si = 0.0;
      for (std::size_t j = 0; j < h.size(); ++j) {
        const double xr = h[j].re[r], xi = h[j].im[r];
        const double yr = h[j].re[c], yi = h[j].im[c];
        sr += q[j] * (xr * yr + xi * yi);
        si += q[j] * (xi * yr - xr * yi);
      }
      a.re[r * m + c] = sr;
      a.im[r * m + c] = si;
      a.re[c * m + r] = sr;
      a.im[c * m + r] = -si;
    }
  }
  a.hermitian = true;
  return a;
}

CVec matvec(const CMat& a, const CVec& x) {
  if (a.n != x.size()) throw ShapeError("matvec: dimension mismatch");
  CVec y(a.n);
  for (std::size_t i = 0; i < a.n; ++i) {
    Complex s{0.0, 0.0};
    for (std::size_t j = 0; j < a.n; ++j) s += a(i, j) * x[j];
    y.set(i, s);
  }
  return y;
}

Cholesky::Cholesky(const CMat& a, double rel_pivot_tol) : l_(a.n) {
  const std::size_t n = a.n;
  for (std::size_t j = 0; j < n; ++j) {
    double d = a.re[j * n + j];
    for (std::size_t k = 0; k < j; ++k)
      d -= l_.re[j * n + k] * l_.re[j * n + k] +
           l_.im[j * n + k] * l_.im[j * n + k];
    if (!(d > rel_pivot_tol * a.re[j * n + j]) || !std::isfinite(d))
      throw SingularMatrixError("Cholesky: non-positive pivot at column " +
                                std::to_string(j));
    const double ljj = std::sqrt(d);
    l_.re[j * n + j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      // (A_ij - sum_k L_ik conj(L_jk)) / L_jj
      double sr = a.re[i * n + j];
      double si = a.im[i * n + j];
      for (std::size_t k = 0; k < j; ++k) {
        const double pr = l_.re[i * n + k], pi = l_.im[i * n + k];
        const double qr = l_.re[j * n + k], qi = l_.im[j * n + k];
        sr -= pr * qr + pi * qi;
        si -= pi * qr - pr * qi;
      }
      l_.re[i * n + j] = sr / ljj;
      l_.im[i * n + j] = si / ljj;
    }
  }
}

CVec Cholesky::solve(const CVec& b) const {
  const std::size_t n = l_.n;
  if (b.size() != n) throw ShapeError("Cholesky::solve: dimension mismatch");
  CVec y(n);
  // L y = b
  for (std::size_t i = 0; i < n; ++i) {
    double sr = b.re[i];
    double si = b.im[i];
    for (std::size_t k = 0; k < i; ++k) {
      const double lr = l_.re[i * n + k], li = l_.im[i * n + k];
      sr -= lr * y.re[k] - li * y.im[k];
      si -= lr * y.im[k] + li * y.re[k];
    }
    const double d = l_.re[i * n + i];
    y.re[i] = sr / d;
    y.im[i] = si / d;
  }
  // L^H x = y
  CVec x(n);
  for (std::size_t ii = n; ii-- > 0;) {
    double sr = y.re[ii];
    double si = y.im[ii];
    for (std::size_t k = ii + 1; k < n; ++k) {
      // conj(L_k,ii) * x_k
      const double lr = l_.re[k * n + ii], li = l_.im[k * n + ii];
      sr -= lr * x.re[k] + li * x.im[k];
      si -= lr * x.im[k] - li * x.re[k];
    }
    const double d = l_.re[ii * n + ii];
    x.re[ii] = sr / d;
    x.im[ii] = si / d;
  }
  return x;
}

CVec hpd_solve(const CMat& a, const CVec& b) { return Cholesky(a).solve(b); }

CVec unpack(std::span<const double> row, std::size_t count, std::size_t m,
            std::size_t index) {
  if (row.size() != 2 * count * m || index >= count)
    throw ShapeError("unpack: packed row does not hold the requested vector");
  CVec v(m);
  const std::size_t off = index * m;
  const std::size_t im_off = count * m;
  for (std::size_t i = 0; i < m; ++i) {
    v.re[i] = row[off + i];
    v.im[i] = row[im_off + off + i];
  }
  return v;
}

void pack(const CVec& v, std::span<double> row, std::size_t count,
          std::size_t index) {
  const std::size_t m = v.size();
  if (row.size() != 2 * count * m || index >= count)
    throw ShapeError("pack: packed row cannot hold the vector");
  const std::size_t off = index * m;
  const std::size_t im_off = count * m;
  for (std::size_t i = 0; i < m; ++i) {
    row[off + i] = v.re[i];
    row[im_off + off + i] = v.im[i];
  }
}

CMat unpack_matrix(std::span<const double> row, std::size_t n) {
  if (row.size() != 2 * n * n) throw ShapeError("unpack_matrix: bad row size");
  CMat a(n);
  for (std::size_t i = 0; i < n * n; ++i) {
    a.re[i] = row[i];
    a.im[i] = row[n * n + i];
  }
  return a;
}

void pack_matrix(const CMat& a, std::span<double> row) {
  const std::size_t nn = a.n * a.n;
  if (row.size() != 2 * nn) throw ShapeError("pack_matrix: bad row size");
  for (std::size_t i = 0; i < nn; ++i) {
    row[i] = a.re[i];
    row[nn + i] = a.im[i];
  }
}

}  // namespace unibf::linalg
