#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "errors.hpp"
#include "geometry.hpp"

namespace qboltz {

// mu(v) = 1 / (exp(-(a + b.v + c|v|^2)) - theta)
struct QuantumMaxwellianParams {
  int theta = -1;
  double a = -1.0;
  Vec3 b{0.0, 0.0, 0.0};
  double c = -1.0;

  static QuantumMaxwellianParams isotropic(int theta, double rho) {
    if (!(rho > 0.0)) throw ParameterError("fugacity parameter rho must be positive");
    QuantumMaxwellianParams p;
    p.theta = theta;
    p.a = -std::log(rho);
    p.c = -1.0;
    p.validate();
    return p;
  }

  double rho() const { return std::exp(-a); }
  bool is_isotropic() const { return b[0] == 0.0 && b[1] == 0.0 && b[2] == 0.0 && c == -1.0; }

  // Largest value of a + b.v + c|v|^2 over R^3.
  double peak_exponent() const { return a - norm2(b) / (4.0 * c); }

  void validate() const {
    if (theta < -1 || theta > 1) throw ParameterError("statistics flag must be -1, 0 or +1");
    if (!(c < 0.0)) throw ParameterError("equilibrium needs c < 0");
    if (theta == 1 && !(peak_exponent() < 0.0))
      throw ParameterError("boson equilibrium needs a < 0 (rho > 1); denominator would vanish");
  }

  // exp(-(a + b.v + c|v|^2))
  double x_factor(const Vec3& v) const { return std::exp(-(a + dot(b, v) + c * norm2(v))); }
};

inline double mu(const Vec3& v, const QuantumMaxwellianParams& p) { return 1.0 / (p.x_factor(v) - p.theta); }

inline double mcal(const Vec3& v, const QuantumMaxwellianParams& p) {
  double m = mu(v, p);
  return m * (1.0 + p.theta * m);
}

// Closed form X / (X - theta)^2, equal to mcal algebraically.
inline double mcal_closed(const Vec3& v, const QuantumMaxwellianParams& p) {
  double x = p.x_factor(v);
  double d = x - p.theta;
  return x / (d * d);
}

struct GaussianBounds {
  double c_low;
  double c_high;
};

// Tightest c_low, c_high with c_low e^{-|v|^2} <= mu <= c_high e^{-|v|^2} over the lattice.
inline GaussianBounds gaussian_bounds_check(const QuantumMaxwellianParams& p, const VelocityGrid& g) {
  if (!p.is_isotropic()) throw ParameterError("gaussian bounds need isotropic parameters");
  p.validate();
  GaussianBounds out{std::numeric_limits<double>::infinity(), 0.0};
  for (std::size_t n = 0; n < g.size(); ++n) {
    Vec3 v = g.point(n);
    double r = mu(v, p) * std::exp(norm2(v));
    out.c_low = std::min(out.c_low, r);
    out.c_high = std::max(out.c_high, r);
  }
  return out;
}

struct MomentTriple {
  double mass = 0.0;
  Vec3 momentum{0.0, 0.0, 0.0};
  double energy = 0.0;

  std::array<double, 5> as_array() const { return {mass, momentum[0], momentum[1], momentum[2], energy}; }
};

// The five collision invariants 1, v1, v2, v3, |v|^2.
inline std::array<double, 5> invariants(const Vec3& v) { return {1.0, v[0], v[1], v[2], norm2(v)}; }

inline MomentTriple moments(const std::vector<double>& F, const VelocityGrid& g) {
  if (F.size() != g.size()) throw DimensionError("field size does not match velocity grid");
  std::array<double, 5> acc{};
  for (std::size_t n = 0; n < g.size(); ++n) {
    if (std::isnan(F[n])) throw NumericError("NaN in field at lattice site " + std::to_string(n));
    auto phi = invariants(g.point(n));
    for (int j = 0; j < 5; ++j) acc[j] += F[n] * phi[j];
  }
  double w = g.cell_volume();
  return {w * acc[0], {w * acc[1], w * acc[2], w * acc[3]}, w * acc[4]};
}

inline std::vector<double> sample_mu(const QuantumMaxwellianParams& p, const VelocityGrid& g) {
  return g.sample([&](const Vec3& v) { return mu(v, p); });
}

inline std::vector<double> sample_mcal(const QuantumMaxwellianParams& p, const VelocityGrid& g) {
  return g.sample([&](const Vec3& v) { return mcal(v, p); });
}

struct FitOptions {
  int max_iterations = 200;
  int max_halvings = 30;
  double tolerance = 1e-13;
};

// Damped Newton on (a, b, c) so that the lattice moments of mu match m.
inline QuantumMaxwellianParams fit_equilibrium(const MomentTriple& m, int theta, const VelocityGrid& g = VelocityGrid(),
                                               const FitOptions& opt = FitOptions()) {
  if (!(m.mass > 0.0) || !(m.energy > 0.0)) throw ParameterError("moments not realizable (mass and energy must be > 0)");
  const double w = g.cell_volume();
  const std::array<double, 5> target = m.as_array();
  const std::array<double, 5> scale = {m.mass, std::sqrt(m.mass * m.energy), std::sqrt(m.mass * m.energy),
                                       std::sqrt(m.mass * m.energy), m.energy};

  // Classical closed-form inverse as the starting point.
  Vec3 mean = (1.0 / m.mass) * m.momentum;
  double internal = m.energy / m.mass - norm2(mean);
  if (!(internal > 0.0)) throw ParameterError("moments not realizable (nonpositive internal energy)");
  QuantumMaxwellianParams p;
  p.theta = theta;
  p.c = -1.5 / internal;
  p.b = (-2.0 * p.c) * mean;
  p.a = std::log(m.mass) - 1.5 * std::log(std::numbers::pi / -p.c) + norm2(p.b) / (4.0 * p.c);
  if (theta == 1 && p.peak_exponent() >= 0.0) p.a -= p.peak_exponent() + 0.5;

  auto feasible = [&](const QuantumMaxwellianParams& q) {
    return q.c < 0.0 && (q.theta != 1 || q.peak_exponent() < 0.0);
  };
  auto evaluate = [&](const QuantumMaxwellianParams& q, Eigen::Matrix<double, 5, 1>& r, Eigen::Matrix<double, 5, 5>* J) {
    std::array<double, 5> mom{};
    Eigen::Matrix<double, 5, 5> jac = Eigen::Matrix<double, 5, 5>::Zero();
    for (std::size_t n = 0; n < g.size(); ++n) {
      Vec3 v = g.point(n);
      double f = mu(v, q);
      double dm = f * (1.0 + q.theta * f);
      auto phi = invariants(v);
      for (int j = 0; j < 5; ++j) {
        mom[j] += f * phi[j];
        if (J)
          for (int k = j; k < 5; ++k) jac(j, k) += dm * phi[j] * phi[k];
      }
    }
    for (int j = 0; j < 5; ++j) r(j) = (w * mom[j] - target[j]) / scale[j];
    if (J) {
      for (int j = 0; j < 5; ++j)
        for (int k = j; k < 5; ++k) {
          // columns: d/da, d/db_i, d/dc map onto invariants 0..4
          (*J)(j, k) = w * jac(j, k) / scale[j];
          (*J)(k, j) = w * jac(j, k) / scale[k];
        }
    }
    return r.norm();
  };

  Eigen::Matrix<double, 5, 1> r;
  Eigen::Matrix<double, 5, 5> J;
  double res = evaluate(p, r, &J);
  for (int it = 0; it < opt.max_iterations && res > opt.tolerance; ++it) {
    Eigen::Matrix<double, 5, 1> step = J.fullPivLu().solve(-r);
    double lambda = 1.0;
    bool accepted = false;
    for (int half = 0; half <= opt.max_halvings; ++half, lambda *= 0.5) {
      QuantumMaxwellianParams q = p;
      q.a += lambda * step(0);
      q.b = {p.b[0] + lambda * step(1), p.b[1] + lambda * step(2), p.b[2] + lambda * step(3)};
      q.c += lambda * step(4);
      if (!feasible(q)) continue;
      Eigen::Matrix<double, 5, 1> rq;
      double rn = evaluate(q, rq, nullptr);
      if (rn < res || (half == opt.max_halvings && rn <= res)) {
        p = q;
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    res = evaluate(p, r, &J);
  }
  if (res > 1e-9) {
    if (theta == 1 && p.peak_exponent() > -1e-6)
      throw InfeasibleError("boson fit pushed to a >= 0: data is near the condensation regime");
    throw FitError("equilibrium fit did not converge, residual " + std::to_string(res), res);
  }
  // A boson peak narrower than one lattice cell means the lattice is holding a condensate.
  const double h = g.spacing();
  if (theta == 1 && -p.peak_exponent() < -p.c * h * h)
    throw InfeasibleError("boson fit has a = " + std::to_string(p.peak_exponent()) +
                          ", peak unresolved by the lattice: data is near the condensation regime");
  return p;
}

}  // namespace qboltz
