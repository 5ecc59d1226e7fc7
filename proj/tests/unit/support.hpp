#pragma once

#include <cmath>
#include <complex>
#include <random>
#include <vector>

#include "unibf/beams.hpp"
#include "unibf/channel.hpp"
#include "unibf/complex_linalg.hpp"

namespace unibf::testing {

using linalg::Complex;
using linalg::CVec;

inline CVec random_cvec(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  CVec v(n);
  for (std::size_t i = 0; i < n; ++i) v.set(i, {g(rng), g(rng)});
  return v;
}

inline std::vector<CVec> random_channels(std::mt19937_64& rng, std::size_t k,
                                         std::size_t m, double scale = 1.0) {
  std::vector<CVec> h;
  for (std::size_t i = 0; i < k; ++i) h.push_back(random_cvec(rng, m, scale));
  return h;
}

inline BeamStack random_beams(std::mt19937_64& rng, std::size_t k, std::size_t m) {
  BeamStack b;
  b.v = random_channels(rng, k, m);
  b.power = b.total_power();
  return b;
}

inline channel::ChannelSample sample_of(std::vector<CVec> h, double power_db) {
  channel::ChannelSample s;
  s.h = std::move(h);
  s.power_db = power_db;
  s.power = db_to_linear(power_db);
  return s;
}

/// Naive complex inner product a^H b.
inline Complex naive_hdot(const CVec& a, const CVec& b) {
  Complex s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::conj(a[i]) * b[i];
  return s;
}

// Gaussian elimination with partial pivoting on a dense std::complex copy.
inline std::vector<Complex> gauss_solve(const linalg::CMat& a, const CVec& b) {
  const std::size_t n = a.n;
  std::vector<std::vector<Complex>> m(n, std::vector<Complex>(n + 1));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) m[i][j] = a(i, j);
    m[i][n] = b[i];
  }
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(m[r][c]) > std::abs(m[piv][c])) piv = r;
    std::swap(m[c], m[piv]);
    for (std::size_t r = c + 1; r < n; ++r) {
      const Complex f = m[r][c] / m[c][c];
      for (std::size_t j = c; j <= n; ++j) m[r][j] -= f * m[c][j];
    }
  }
  std::vector<Complex> x(n);
  for (std::size_t i = n; i-- > 0;) {
    Complex s = m[i][n];
    for (std::size_t j = i + 1; j < n; ++j) s -= m[i][j] * x[j];
    x[i] = s / m[i][i];
  }
  return x;
}

inline double rel_err(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace unibf::testing
