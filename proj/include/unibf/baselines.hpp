#pragma once

// Classical beamformers: WMMSE, zero-forcing with water-filling, and MRT
// with an optimized power split.

#include <cstdint>
#include <span>
#include <vector>

#include "unibf/beams.hpp"
#include "unibf/channel.hpp"

namespace unibf::baselines {

struct WmmseConfig {
  std::size_t max_iters = 500;
  double rate_tol = 1e-5;       // bps/Hz
  double bisection_tol = 1e-8;  // relative, on power
  double noise_power = kNoisePower;

  /// Throws ConfigError on non-positive tolerances or zero iterations.
  void validate() const;
};

struct WmmseResult {
  BeamStack beams;
  /// Sum rate of the initial point followed by one entry per iteration.
  std::vector<double> trace;
  std::size_t iterations = 0;
  bool converged = false;
};

/// Weighted-MMSE block-coordinate ascent from MRT directions with equal
/// power. Returns the best iterate; `converged` is false when max_iters was
/// hit first.
WmmseResult wmmse(std::span<const linalg::CVec> h, double power,
                  const WmmseConfig& cfg = {});

/// p_k = max(0, mu - 1/g_k) with sum p = power. Throws DomainError if some
/// g_k <= 0 or power <= 0.
std::vector<double> water_fill(std::span<const double> gains, double power);

/// Directions are the normalized columns of H^H (H H^H)^{-1}. Throws
/// DomainError if K > M and SingularMatrixError if H is rank deficient.
BeamStack zf_waterfilling(std::span<const linalg::CVec> h, double power,
                          double noise_power = kNoisePower);

struct MrtConfig {
  std::size_t restarts = 5;
  std::size_t iterations = 200;
  std::uint64_t seed = 0;
  double noise_power = kNoisePower;
};

/// Euclidean projection onto {p >= 0, sum p <= cap}.
std::vector<double> project_capped_simplex(std::span<const double> x, double cap);

/// Sum rate of beams sqrt(p_k) h_k/||h_k||.
double mrt_rate(std::span<const linalg::CVec> h, std::span<const double> p,
                double noise_power = kNoisePower);

/// MRT directions with the power vector found by multi-start projected
/// gradient ascent (first start: equal power). Throws DomainError on a zero
/// channel.
BeamStack mrt_poweropt(std::span<const linalg::CVec> h, double power,
                       const MrtConfig& cfg = {},
                       std::vector<double>* powers = nullptr);

}  // namespace unibf::baselines
