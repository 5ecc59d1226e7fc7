#pragma once

#include <span>
#include <vector>

#include "unibf/autodiff.hpp"
#include "unibf/beams.hpp"
#include "unibf/channel.hpp"

namespace unibf::metrics {

/// SINR_k = |h_k^H v_k|^2 / (sum_{j != k} |h_k^H v_j|^2 + sigma2)
std::vector<double> sinr(std::span<const linalg::CVec> h, const BeamStack& v,
                         double noise_power = kNoisePower);

double sum_rate(std::span<const linalg::CVec> h, const BeamStack& v,
                double noise_power = kNoisePower);

struct RateReport {
  std::vector<double> sinr;
  std::vector<double> rate;
  double sum_rate = 0.0;
  double total_power = 0.0;
};

RateReport rate_report(std::span<const linalg::CVec> h, const BeamStack& v,
                       double noise_power = kNoisePower);

/// Coupling matrix of the SINR-target power-control system:
///   [Omega]_kk = -|h_k^H d_k|^2 / gamma_k,  [Omega]_kj = |h_k^H d_j|^2.
struct OmegaMatrix {
  std::size_t k = 0;
  std::vector<double> data;  // row-major K x K
  std::vector<double> gamma;

  double operator()(std::size_t r, std::size_t c) const { return data[r * k + c]; }
};

/// Throws DomainError if some gamma_k <= 0, ShapeError on size mismatch.
OmegaMatrix omega(std::span<const linalg::CVec> h,
                  std::span<const linalg::CVec> d, std::span<const double> gamma);

/// max_{k != j} |Omega_kj - Omega_jk| / mean_k |Omega_kk|. Throws DomainError
/// for K < 2.
double omega_symmetry_gap(const OmegaMatrix& omega);

/// max_k |(Omega p)_k + sigma2|
double omega_identity_residual(const OmegaMatrix& omega, std::span<const double> p,
                               double noise_power = kNoisePower);

/// Per-sample sum rate (B x 1) of packed beams (B x 2KM) over channels
/// (B x 2KM), recorded on the tape.
ad::Var sum_rate_graph(ad::Tape& tape, ad::Var h, ad::Var beams, std::size_t m,
                       std::size_t k, double noise_power = kNoisePower);

/// -(1/B) sum_b sum_rate_b
ad::Var negative_mean_rate(ad::Tape& tape, ad::Var sum_rates);

}  // namespace unibf::metrics
