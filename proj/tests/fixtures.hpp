#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "qboltz/equilibrium.hpp"

namespace fixture {

// Strictly admissible random field: a Gaussian profile with random anisotropy and drift,
// modulated by lattice noise. Values stay in (0, 1) for fermions.
inline std::vector<double> random_admissible(const qboltz::VelocityGrid& g, int theta, std::mt19937_64& rng,
                                             double amplitude = 0.6) {
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  const double t0 = 0.7 + 0.6 * ud(rng), t1 = 0.7 + 0.6 * ud(rng), t2 = 0.7 + 0.6 * ud(rng);
  const qboltz::Vec3 drift{0.4 * (ud(rng) - 0.5), 0.4 * (ud(rng) - 0.5), 0.4 * (ud(rng) - 0.5)};
  const double peak = theta == -1 ? 0.9 * ud(rng) + 0.05 : 0.2 + 1.5 * ud(rng);
  std::vector<double> f(g.size());
  for (std::size_t n = 0; n < g.size(); ++n) {
    qboltz::Vec3 v = g.point(n);
    double e = (v[0] - drift[0]) * (v[0] - drift[0]) / t0 + (v[1] - drift[1]) * (v[1] - drift[1]) / t1 +
               (v[2] - drift[2]) * (v[2] - drift[2]) / t2;
    double noise = 1.0 + amplitude * (2.0 * ud(rng) - 1.0);
    double val = peak * std::exp(-e) * noise;
    if (theta == -1) val = std::min(val, 0.97);
    f[n] = std::max(val, 1e-300);
  }
  return f;
}

// Random drifted anisotropic Gaussian with a moderate peak, so bosonic data stays below condensation.
inline std::vector<double> random_relaxation_data(const qboltz::VelocityGrid& g, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  const double t0 = 0.6 + 0.8 * ud(rng), t1 = 0.6 + 0.8 * ud(rng), t2 = 0.6 + 0.8 * ud(rng);
  const qboltz::Vec3 drift{0.6 * (ud(rng) - 0.5), 0.6 * (ud(rng) - 0.5), 0.6 * (ud(rng) - 0.5)};
  const double peak = 0.2 + 0.5 * ud(rng);
  return g.sample([&](const qboltz::Vec3& v) {
    const qboltz::Vec3 d = qboltz::operator-(v, drift);
    return peak * std::exp(-(d[0] * d[0] / t0 + d[1] * d[1] / t1 + d[2] * d[2] / t2));
  });
}

// Smooth anisotropic two-bump initial data for relaxation runs.
inline std::vector<double> two_bump(const qboltz::VelocityGrid& g, int theta) {
  const double peak = theta == -1 ? 0.6 : 0.8;
  return g.sample([&](const qboltz::Vec3& v) {
    double a = std::exp(-((v[0] - 1.0) * (v[0] - 1.0) + v[1] * v[1] / 0.7 + v[2] * v[2]));
    double b = std::exp(-((v[0] + 1.0) * (v[0] + 1.0) / 0.8 + v[1] * v[1] + v[2] * v[2] / 0.6));
    return peak * (a + b) / (1.0 + (theta == -1 ? 0.8 * (a + b) : 0.0));
  });
}

inline double max_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace fixture
