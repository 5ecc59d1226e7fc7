#pragma once

#include <vector>

#include "unibf/complex_linalg.hpp"

namespace unibf {

/// K beamforming vectors of length M transmitted under budget `power`.
struct BeamStack {
  std::vector<linalg::CVec> v;
  double power = 0.0;

  double total_power() const {
    double s = 0.0;
    for (const auto& vk : v) s += linalg::norm2(vk);
    return s;
  }
};

/// Downlink powers p and virtual uplink powers q, each summing to P.
struct DualityFeature {
  std::vector<double> p;
  std::vector<double> q;
};

}  // namespace unibf
