#include "unibf/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "unibf/error.hpp"
#include "unibf/metrics.hpp"

namespace unibf::baselines {

using linalg::CMat;
using linalg::Complex;
using linalg::CVec;

void WmmseConfig::validate() const {
  if (max_iters == 0) throw ConfigError("wmmse: max_iters must be positive");
  if (!(rate_tol > 0.0) || !(bisection_tol > 0.0))
    throw ConfigError("wmmse: tolerances must be positive");
  if (!(noise_power > 0.0)) throw ConfigError("wmmse: noise power must be > 0");
}

namespace {

void require_channels(std::span<const CVec> h, const char* who) {
  if (h.empty()) throw ShapeError(std::string(who) + ": no users");
  const std::size_t m = h.front().size();
  for (std::size_t k = 0; k < h.size(); ++k) {
    if (h[k].size() != m) throw ShapeError(std::string(who) + ": ragged channels");
    if (!(linalg::norm2(h[k]) > 0.0))
      throw DomainError(std::string(who) + ": channel of user " +
                        std::to_string(k) + " is zero");
  }
}

CVec scaled(const CVec& x, Complex s) {
  CVec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y.set(i, s * x[i]);
  return y;
}

/// sum_j q_j h_j h_j^H + mu I, without the positivity requirement on mu.
CMat weighted_outer(std::span<const CVec> h, std::span<const double> q, double mu) {
  const std::size_t m = h.front().size();
  CMat a(m);
  a.hermitian = true;
  for (std::size_t i = 0; i < m; ++i) a.re[i * m + i] = mu;
  for (std::size_t j = 0; j < h.size(); ++j)
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c <= r; ++c) {
        const Complex z = q[j] * h[j][r] * std::conj(h[j][c]);
        a.re[r * m + c] += z.real();
        a.im[r * m + c] += z.imag();
      }
  for (std::size_t r = 0; r < m; ++r) {
    a.im[r * m + r] = 0.0;
    for (std::size_t c = r + 1; c < m; ++c) {
      a.re[r * m + c] = a.re[c * m + r];
      a.im[r * m + c] = -a.im[c * m + r];
    }
  }
  return a;
}

struct Solved {
  std::vector<CVec> v;
  double power = 0.0;
};

Solved solve_beams(const CMat& a, std::span<const CVec> rhs, double rel_tol) {
  const linalg::Cholesky chol(a, rel_tol);
  Solved s;
  for (const CVec& b : rhs) {
    s.v.push_back(chol.solve(b));
    s.power += linalg::norm2(s.v.back());
  }
  return s;
}

CMat with_shift(const CMat& base, double mu) {
  CMat a = base;
  for (std::size_t i = 0; i < a.n; ++i) a.re[i * a.n + i] += mu;
  return a;
}

/// Smallest-shift feasible transmit beams for the WMMSE v-update.
std::vector<CVec> power_constrained_beams(std::span<const CVec> h,
                                          std::span<const double> q,
                                          std::span<const CVec> rhs,
                                          double power, double tol) {
  const CMat base = weighted_outer(h, q, 0.0);
  double diag_max = 0.0;
  for (std::size_t i = 0; i < base.n; ++i)
    diag_max = std::max(diag_max, base.re[i * base.n + i]);

  // Unconstrained stationary point (or its minimum-norm limit when the
  // weighted covariance is rank deficient).
  try {
    Solved s = solve_beams(base, rhs, 1e-12);
    if (s.power <= power) return std::move(s.v);
  } catch (const SingularMatrixError&) {
    const double eps = 1e-12 * std::max(diag_max, 1e-300);
    Solved s = solve_beams(with_shift(base, eps), rhs, 0.0);
    if (s.power <= power) return std::move(s.v);
  }

  double rhs_norm = 0.0;
  for (const CVec& b : rhs) rhs_norm += linalg::norm2(b);
  double lo = 0.0;
  double hi = std::sqrt(rhs_norm / power);
  Solved best = solve_beams(with_shift(base, hi), rhs, 0.0);
  for (int it = 0; it < 200; ++it) {
    if (power - best.power <= tol * power) break;
    const double mid = 0.5 * (lo + hi);
    if (!(mid > lo && mid < hi)) break;
    Solved s = solve_beams(with_shift(base, mid), rhs, 0.0);
    if (s.power > power) {
      lo = mid;
    } else {
      hi = mid;
      best = std::move(s);
    }
  }
  return std::move(best.v);
}

}  // namespace

WmmseResult wmmse(std::span<const CVec> h, double power, const WmmseConfig& cfg) {
  cfg.validate();
  require_channels(h, "wmmse");
  if (!(power > 0.0)) throw DomainError("wmmse: power must be > 0");
  const std::size_t k = h.size();

  BeamStack cur;
  cur.power = power;
  const double amp = std::sqrt(power / static_cast<double>(k));
  for (const CVec& hk : h)
    cur.v.push_back(scaled(hk, amp / std::sqrt(linalg::norm2(hk))));

  WmmseResult res;
  double rate = metrics::sum_rate(h, cur, cfg.noise_power);
  res.trace.push_back(rate);
  res.beams = cur;
  double best_rate = rate;

  std::vector<double> q(k);
  std::vector<CVec> rhs(k);
  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    for (std::size_t i = 0; i < k; ++i) {
      double total = cfg.noise_power;
      Complex own{};
      for (std::size_t j = 0; j < k; ++j) {
        const Complex g = linalg::hdot(h[i], cur.v[j]);
        total += std::norm(g);
        if (j == i) own = g;
      }
      const Complex a = own / total;                      // MMSE receiver
      const double w = total / (total - std::norm(own));  // 1 / MSE
      q[i] = w * std::norm(a);
      rhs[i] = scaled(h[i], w * a);
    }
    cur.v = power_constrained_beams(h, q, rhs, power, cfg.bisection_tol);
    const double next = metrics::sum_rate(h, cur, cfg.noise_power);
    res.trace.push_back(next);
    res.iterations = it + 1;
    if (next > best_rate) {
      best_rate = next;
      res.beams = cur;
    }
    if (std::abs(next - rate) < cfg.rate_tol) {
      res.converged = true;
      break;
    }
    rate = next;
  }
  return res;
}

std::vector<double> water_fill(std::span<const double> gains, double power) {
  if (!(power > 0.0)) throw DomainError("water_fill: power must be > 0");
  const std::size_t k = gains.size();
  std::vector<double> inv(k);
  for (std::size_t i = 0; i < k; ++i) {
    if (!(gains[i] > 0.0)) throw DomainError("water_fill: gains must be > 0");
    inv[i] = 1.0 / gains[i];
  }
  std::vector<double> sorted = inv;
  std::sort(sorted.begin(), sorted.end());
  double level = 0.0;
  double acc = 0.0;
  for (std::size_t n = 1; n <= k; ++n) {
    acc += sorted[n - 1];
    const double mu = (power + acc) / static_cast<double>(n);
    if (n == k || mu <= sorted[n]) {
      level = mu;
      break;
    }
  }
  std::vector<double> p(k);
  for (std::size_t i = 0; i < k; ++i) p[i] = std::max(0.0, level - inv[i]);
  return p;
}

BeamStack zf_waterfilling(std::span<const CVec> h, double power, double noise_power) {
  require_channels(h, "zf_waterfilling");
  if (!(power > 0.0)) throw DomainError("zf_waterfilling: power must be > 0");
  const std::size_t k = h.size();
  const std::size_t m = h.front().size();
  if (k > m)
    throw DomainError("zf_waterfilling: needs K <= M (K=" + std::to_string(k) +
                      ", M=" + std::to_string(m) + ")");
  CMat g(k);
  g.hermitian = true;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) g.set(i, j, linalg::hdot(h[i], h[j]));
  for (std::size_t i = 0; i < k; ++i) g.im[i * k + i] = 0.0;
  const linalg::Cholesky chol(g, 1e-12);

  std::vector<CVec> dirs;
  std::vector<double> gains(k);
  for (std::size_t c = 0; c < k; ++c) {
    CVec e(k);
    e.re[c] = 1.0;
    const CVec x = chol.solve(e);
    CVec w(m);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t r = 0; r < m; ++r) w.set(r, w[r] + x[i] * h[i][r]);
    const double n2 = linalg::norm2(w);
    gains[c] = 1.0 / (n2 * noise_power);
    dirs.push_back(scaled(w, 1.0 / std::sqrt(n2)));
  }
  const auto p = water_fill(gains, power);
  BeamStack b;
  b.power = power;
  for (std::size_t c = 0; c < k; ++c) b.v.push_back(scaled(dirs[c], std::sqrt(p[c])));
  return b;
}

std::vector<double> project_capped_simplex(std::span<const double> x, double cap) {
  std::vector<double> p(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    p[i] = std::max(0.0, x[i]);
    s += p[i];
  }
  if (s <= cap) return p;
  // Projection onto {p >= 0, sum p = cap}.
  std::vector<double> u(x.begin(), x.end());
  std::sort(u.begin(), u.end(), std::greater<>());
  double acc = 0.0;
  double theta = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    acc += u[j];
    const double t = (acc - cap) / static_cast<double>(j + 1);
    if (u[j] - t > 0.0) theta = t;
  }
  for (std::size_t i = 0; i < x.size(); ++i) p[i] = std::max(0.0, x[i] - theta);
  return p;
}

namespace {

struct MrtProblem {
  std::size_t k;
  std::vector<double> c;  // c[i*k+j] = |h_i^H d_j|^2
  double noise;

  double rate(std::span<const double> p) const {
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      double total = noise;
      for (std::size_t j = 0; j < k; ++j) total += p[j] * c[i * k + j];
      s += std::log2(total / (total - p[i] * c[i * k + i]));
    }
    return s;
  }

  std::vector<double> grad(std::span<const double> p) const {
    std::vector<double> g(k, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
      double total = noise;
      for (std::size_t j = 0; j < k; ++j) total += p[j] * c[i * k + j];
      const double interf = total - p[i] * c[i * k + i];
      for (std::size_t j = 0; j < k; ++j) {
        g[j] += c[i * k + j] / total;
        if (j != i) g[j] -= c[i * k + j] / interf;
      }
    }
    for (double& v : g) v /= std::numbers::ln2;
    return g;
  }
};

std::vector<double> ascend(const MrtProblem& prob, std::vector<double> p,
                           double cap, std::size_t iterations) {
  double f = prob.rate(p);
  double step = 0.0;
  for (std::size_t it = 0; it < iterations; ++it) {
    const auto g = prob.grad(p);
    double gmax = 0.0;
    for (double v : g) gmax = std::max(gmax, std::abs(v));
    if (!(gmax > 0.0)) break;
    if (step == 0.0) step = cap / gmax;
    bool moved = false;
    for (int bt = 0; bt < 60; ++bt) {
      std::vector<double> trial(p.size());
      for (std::size_t i = 0; i < p.size(); ++i) trial[i] = p[i] + step * g[i];
      trial = project_capped_simplex(trial, cap);
      double lin = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) lin += g[i] * (trial[i] - p[i]);
      const double ft = prob.rate(trial);
      if (ft >= f + 1e-4 * lin && lin >= 0.0) {
        moved = ft > f;
        p = std::move(trial);
        f = ft;
        break;
      }
      step *= 0.5;
    }
    if (!moved) break;
    step *= 2.0;
  }
  return p;
}

}  // namespace

double mrt_rate(std::span<const CVec> h, std::span<const double> p,
                double noise_power) {
  BeamStack b;
  for (std::size_t i = 0; i < h.size(); ++i)
    b.v.push_back(scaled(h[i], std::sqrt(p[i] / linalg::norm2(h[i]))));
  b.power = std::accumulate(p.begin(), p.end(), 0.0);
  return metrics::sum_rate(h, b, noise_power);
}

BeamStack mrt_poweropt(std::span<const CVec> h, double power, const MrtConfig& cfg,
                       std::vector<double>* powers) {
  require_channels(h, "mrt_poweropt");
  if (!(power > 0.0)) throw DomainError("mrt_poweropt: power must be > 0");
  const std::size_t k = h.size();

  std::vector<CVec> dirs;
  for (const CVec& hk : h) dirs.push_back(scaled(hk, 1.0 / std::sqrt(linalg::norm2(hk))));
  MrtProblem prob{k, std::vector<double>(k * k), cfg.noise_power};
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j)
      prob.c[i * k + j] = std::norm(linalg::hdot(h[i], dirs[j]));

  auto rng = channel::make_stream(cfg.seed, channel::streams::kBaseline);
  std::exponential_distribution<double> expo(1.0);
  std::vector<double> best;
  double best_rate = -1.0;
  const std::size_t starts = std::max<std::size_t>(cfg.restarts, 1);
  for (std::size_t s = 0; s < starts; ++s) {
    std::vector<double> p0(k, power / static_cast<double>(k));
    if (s > 0) {
      double tot = 0.0;
      for (double& v : p0) tot += (v = expo(rng));
      for (double& v : p0) v *= power / tot;
    }
    auto p = ascend(prob, std::move(p0), power, cfg.iterations);
    const double r = prob.rate(p);
    if (r > best_rate) {
      best_rate = r;
      best = std::move(p);
    }
  }

  BeamStack b;
  b.power = power;
  for (std::size_t i = 0; i < k; ++i) b.v.push_back(scaled(dirs[i], std::sqrt(best[i])));
  if (powers) *powers = best;
  return b;
}

}  // namespace unibf::baselines
