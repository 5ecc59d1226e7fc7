#include <doctest.h>

#include <random>

#include "support.hpp"
#include "unibf/complex_linalg.hpp"
#include "unibf/error.hpp"

using namespace unibf;
using namespace unibf::linalg;
using unibf::testing::gauss_solve;
using unibf::testing::random_channels;
using unibf::testing::random_cvec;

TEST_CASE("hdot conjugates the first argument") {
  CVec a(1), b(1);
  a.set(0, {0.0, 1.0});
  b.set(0, {0.0, 1.0});
  CHECK(hdot(a, b) == Complex(1.0, 0.0));
  std::mt19937_64 rng(1);
  const auto x = random_cvec(rng, 7), y = random_cvec(rng, 7);
  CHECK(std::abs(hdot(x, y) - testing::naive_hdot(x, y)) < 1e-12);
  CHECK(std::abs(norm2(x) - hdot(x, x).real()) < 1e-12);
  CHECK_THROWS_AS(hdot(x, CVec(3)), ShapeError);
}

TEST_CASE("gram matrix is sigma2 I plus weighted outer products") {
  std::mt19937_64 rng(2);
  const auto h = random_channels(rng, 3, 4);
  const std::vector<double> q = {0.5, 2.0, 0.0};
  const CMat g = gram_matrix(h, q, 1.5);
  CHECK(g.hermitian);
  CHECK(g.is_hermitian());
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      Complex ref = i == j ? 1.5 : 0.0;
      for (std::size_t k = 0; k < 3; ++k) ref += q[k] * h[k][i] * std::conj(h[k][j]);
      CHECK(std::abs(g(i, j) - ref) < 1e-12);
    }
  const std::vector<double> neg = {1.0, -1.0, 1.0};
  CHECK_THROWS_AS(gram_matrix(h, neg, 1.0), DomainError);
  CHECK_THROWS_AS(gram_matrix(h, q, 0.0), DomainError);
}

TEST_CASE("Cholesky solve matches Gaussian elimination") {
  std::mt19937_64 rng(3);
  for (std::size_t n : {1u, 2u, 4u, 8u}) {
    for (int rep = 0; rep < 20; ++rep) {
      const auto h = random_channels(rng, n + 2, n);
      std::vector<double> q(n + 2);
      std::uniform_real_distribution<double> u(0.0, 10.0);
      for (auto& v : q) v = u(rng);
      const CMat a = gram_matrix(h, q, 1.0);
      const CVec b = random_cvec(rng, n);
      const CVec x = hpd_solve(a, b);
      const auto ref = gauss_solve(a, b);
      for (std::size_t i = 0; i < n; ++i)
        CHECK(std::abs(x[i] - ref[i]) <= 1e-10 * (1.0 + std::abs(ref[i])));
      const CVec ax = matvec(a, x);
      for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(ax[i] - b[i]) < 1e-9);
      const Cholesky ch(a);
      const CMat& l = ch.factor();
      for (std::size_t i = 0; i < n; ++i) {
        CHECK(l(i, i).imag() == 0.0);
        CHECK(l(i, i).real() > 0.0);
        for (std::size_t j = i + 1; j < n; ++j) CHECK(l(i, j) == Complex(0.0, 0.0));
      }
    }
  }
}

TEST_CASE("A = 2I halves the right-hand side") {
  std::mt19937_64 rng(4);
  const CVec b = random_cvec(rng, 5);
  const CVec x = hpd_solve(CMat::identity(5, 2.0), b);
  for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(x[i] - b[i] / 2.0) < 1e-15);
}

TEST_CASE("singular and indefinite matrices are rejected") {
  CMat z(3);
  CHECK_THROWS_AS(Cholesky{z}, SingularMatrixError);
  CMat ind = CMat::identity(2);
  ind.set(1, 1, {-1.0, 0.0});
  CHECK_THROWS_AS(Cholesky{ind}, SingularMatrixError);
  CMat tiny = CMat::identity(2);
  tiny.set(0, 1, {1.0 - 1e-14, 0.0});
  tiny.set(1, 0, {1.0 - 1e-14, 0.0});
  CHECK_NOTHROW(Cholesky{tiny});
  CHECK_THROWS_AS((Cholesky{tiny, 1e-12}), SingularMatrixError);
}

TEST_CASE("pack and unpack are inverse") {
  std::mt19937_64 rng(5);
  const auto h = random_channels(rng, 3, 4);
  std::vector<double> row(24);
  for (std::size_t k = 0; k < 3; ++k) pack(h[k], row, 3, k);
  CHECK(row[1 * 4 + 2] == h[1].re[2]);
  CHECK(row[12 + 1 * 4 + 2] == h[1].im[2]);
  for (std::size_t k = 0; k < 3; ++k) CHECK(unpack(row, 3, 4, k) == h[k]);
  CHECK_THROWS_AS(pack(h[0], std::span(row).first(10), 3, 0), ShapeError);

  CMat a = gram_matrix(h, std::vector<double>{1, 2, 3}, 1.0);
  std::vector<double> mrow(32);
  pack_matrix(a, mrow);
  const CMat b = unpack_matrix(mrow, 4);
  CHECK(b.re == a.re);
  CHECK(b.im == a.im);
}
