#include "unibf/metrics.hpp"

#include <cmath>
#include <complex>

#include "unibf/error.hpp"

namespace unibf::metrics {

using linalg::CVec;

std::vector<double> sinr(std::span<const CVec> h, const BeamStack& v,
                         double noise_power) {
  const std::size_t k = h.size();
  if (v.v.size() != k)
    throw ShapeError("sinr: " + std::to_string(k) + " channels but " +
                     std::to_string(v.v.size()) + " beams");
  std::vector<double> out(k);
  for (std::size_t i = 0; i < k; ++i) {
    double signal = 0.0;
    double interference = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double g = std::norm(linalg::hdot(h[i], v.v[j]));
      if (j == i)
        signal = g;
      else
        interference += g;
    }
    out[i] = signal / (interference + noise_power);
  }
  return out;
}

double sum_rate(std::span<const CVec> h, const BeamStack& v, double noise_power) {
  double s = 0.0;
  for (double g : sinr(h, v, noise_power)) s += std::log2(1.0 + g);
  return s;
}

RateReport rate_report(std::span<const CVec> h, const BeamStack& v,
                       double noise_power) {
  RateReport r;
  r.sinr = sinr(h, v, noise_power);
  r.rate.reserve(r.sinr.size());
  for (double g : r.sinr) {
    r.rate.push_back(std::log2(1.0 + g));
    r.sum_rate += r.rate.back();
  }
  r.total_power = v.total_power();
  return r;
}

OmegaMatrix omega(std::span<const CVec> h, std::span<const CVec> d,
                  std::span<const double> gamma) {
  const std::size_t k = h.size();
  if (d.size() != k || gamma.size() != k)
    throw ShapeError("omega: h, d and gamma must all have K entries");
  OmegaMatrix w;
  w.k = k;
  w.gamma.assign(gamma.begin(), gamma.end());
  w.data.resize(k * k);
  for (std::size_t i = 0; i < k; ++i) {
    if (!(gamma[i] > 0.0))
      throw DomainError("omega: gamma_" + std::to_string(i) + " must be > 0");
    for (std::size_t j = 0; j < k; ++j) {
      const double g = std::norm(linalg::hdot(h[i], d[j]));
      w.data[i * k + j] = i == j ? -g / gamma[i] : g;
    }
  }
  return w;
}

double omega_symmetry_gap(const OmegaMatrix& w) {
  if (w.k < 2) throw DomainError("omega_symmetry_gap: needs K >= 2");
  double diag = 0.0;
  for (std::size_t i = 0; i < w.k; ++i) diag += std::abs(w(i, i));
  diag /= static_cast<double>(w.k);
  double gap = 0.0;
  for (std::size_t i = 0; i < w.k; ++i)
    for (std::size_t j = i + 1; j < w.k; ++j)
      gap = std::max(gap, std::abs(w(i, j) - w(j, i)));
  return gap / diag;
}

double omega_identity_residual(const OmegaMatrix& w, std::span<const double> p,
                               double noise_power) {
  if (p.size() != w.k) throw ShapeError("omega_identity_residual: p needs K entries");
  double worst = 0.0;
  for (std::size_t i = 0; i < w.k; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < w.k; ++j) s += w(i, j) * p[j];
    worst = std::max(worst, std::abs(s + noise_power));
  }
  return worst;
}

ad::Var sum_rate_graph(ad::Tape& tape, ad::Var h, ad::Var beams, std::size_t m,
                       std::size_t k, double noise_power) {
  const ad::Var g = ad::hdot(tape, h, beams, m);  // (r, s) = h_r^H v_s
  const ad::Var gains = ad::norm2(tape, g, 1);    // B x K^2
  std::vector<std::size_t> diag, off;
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t s = 0; s < k; ++s) (r == s ? diag : off).push_back(r * k + s);
  const ad::Var signal = ad::gather(tape, gains, std::move(diag));
  ad::Var denom;
  if (k > 1) {
    const ad::Var interference =
        ad::group_sum(tape, ad::gather(tape, gains, std::move(off)), k - 1);
    denom = ad::add_scalar(tape, interference, noise_power);
  } else {
    denom = tape.constant(
        ad::Tensor(tape.value(signal).rows, 1, noise_power));
  }
  const ad::Var ratio = ad::div(tape, signal, denom);
  const ad::Var rate = ad::log2(tape, ad::add_scalar(tape, ratio, 1.0));
  return ad::group_sum(tape, rate, k);
}

ad::Var negative_mean_rate(ad::Tape& tape, ad::Var sum_rates) {
  return ad::scale(tape, ad::mean(tape, sum_rates), -1.0);
}

}  // namespace unibf::metrics
