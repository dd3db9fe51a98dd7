#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace qboltz {

using Vec3 = std::array<double, 3>;

inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm2(const Vec3& a) { return dot(a, a); }
inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }

// Uniform cube [-R, R]^3 with n points per axis, flat index (i*n + j)*n + k.
struct VelocityGrid {
  int n = 25;
  double radius = 5.0;

  VelocityGrid() = default;
  VelocityGrid(int points_per_axis, double truncation_radius) : n(points_per_axis), radius(truncation_radius) {
    if (n < 2 || !(radius > 0.0)) throw ContractError("velocity grid needs n >= 2 and R > 0");
  }

  double spacing() const { return 2.0 * radius / (n - 1); }
  double cell_volume() const { double h = spacing(); return h * h * h; }
  std::size_t size() const { return std::size_t(n) * n * n; }
  double coord(int i) const { return -radius + i * spacing(); }
  std::size_t index(int i, int j, int k) const { return (std::size_t(i) * n + j) * n + k; }
  Vec3 point(int i, int j, int k) const { return {coord(i), coord(j), coord(k)}; }
  Vec3 point(std::size_t flat) const {
    int k = int(flat % n), j = int((flat / n) % n), i = int(flat / (std::size_t(n) * n));
    return point(i, j, k);
  }
  std::array<int, 3> triple(std::size_t flat) const {
    return {int(flat / (std::size_t(n) * n)), int((flat / n) % n), int(flat % n)};
  }

  template <class Fn>
  std::vector<double> sample(Fn&& fn) const {
    std::vector<double> out(size());
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k) out[index(i, j, k)] = fn(point(i, j, k));
    return out;
  }
};

// Periodic spatial lattice; dimension 0 means one cell.
struct SpatialGrid {
  int dimension = 0;
  int n = 1;
  double period = 2.0 * std::numbers::pi;

  SpatialGrid() = default;
  SpatialGrid(int dim, int points, double side = 2.0 * std::numbers::pi) : dimension(dim), n(points), period(side) {
    if (dim != 0 && dim != 1 && dim != 3) throw ContractError("spatial dimension must be 0, 1 or 3");
    if (dim == 0) n = 1;
    if (n < 1 || !(period > 0.0)) throw ContractError("spatial grid needs n >= 1 and period > 0");
  }

  std::size_t cells() const {
    if (dimension == 0) return 1;
    return dimension == 1 ? std::size_t(n) : std::size_t(n) * n * n;
  }
  double spacing() const { return period / n; }
  double cell_volume() const {
    if (dimension == 0) return 1.0;
    return dimension == 1 ? spacing() : spacing() * spacing() * spacing();
  }
  int wrap(int i) const { int r = i % n; return r < 0 ? r + n : r; }
};

struct SphereNode {
  Vec3 omega;
  double weight;
};

struct SphereQuadrature {
  std::vector<SphereNode> nodes;
  int n_polar = 0;
  int n_azimuth = 0;

  double total_weight() const {
    double s = 0.0;
    for (const auto& nd : nodes) s += nd.weight;
    return s;
  }

  // One node per antipodal pair, weight doubled. Valid for integrands even in omega.
  std::vector<SphereNode> half() const {
    std::vector<SphereNode> out;
    for (const auto& nd : nodes) {
      const Vec3& w = nd.omega;
      bool keep = w[2] > 0.0 || (w[2] == 0.0 && (w[1] > 0.0 || (w[1] == 0.0 && w[0] > 0.0)));
      if (keep) out.push_back({w, 2.0 * nd.weight});
    }
    return out;
  }

  int exact_degree() const { return std::min(2 * n_polar - 1, n_azimuth - 1); }
};

// Gauss-Legendre nodes/weights on [-1, 1] by Newton iteration on P_n.
inline std::pair<std::vector<double>, std::vector<double>> gauss_legendre(int n) {
  std::vector<double> x(n), w(n);
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double z = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 1.0;
    for (int it = 0; it < 100; ++it) {
      double p1 = 1.0, p2 = 0.0;
      for (int j = 1; j <= n; ++j) {
        double p3 = p2;
        p2 = p1;
        p1 = ((2.0 * j - 1.0) * z * p2 - (j - 1.0) * p3) / j;
      }
      dp = n * (z * p1 - p2) / (z * z - 1.0);
      double step = p1 / dp;
      z -= step;
      if (std::abs(step) < 1e-16) break;
    }
    {
      double p1 = 1.0, p2 = 0.0;
      for (int j = 1; j <= n; ++j) {
        double p3 = p2;
        p2 = p1;
        p1 = ((2.0 * j - 1.0) * z * p2 - (j - 1.0) * p3) / j;
      }
      dp = n * (z * p1 - p2) / (z * z - 1.0);
    }
    x[i] = -z;
    x[n - 1 - i] = z;
    w[i] = w[n - 1 - i] = 2.0 / ((1.0 - z * z) * dp * dp);
  }
  if (n % 2 == 1) x[n / 2] = 0.0;
  return {x, w};
}

// Product rule: Gauss-Legendre in cos(polar) times midpoint-shifted uniform azimuth.
inline SphereQuadrature sphere_quadrature_build(int n_polar, int n_azimuth) {
  if (n_polar < 1 || n_azimuth < 2 || n_azimuth % 2 != 0 || n_polar > 64 || n_azimuth > 256)
    throw ConfigError("unsupported sphere rule " + std::to_string(n_polar) + "x" + std::to_string(n_azimuth) +
                      " (need 1<=n_polar<=64, even 2<=n_azimuth<=256)");
  auto [x, w] = gauss_legendre(n_polar);
  SphereQuadrature q;
  q.n_polar = n_polar;
  q.n_azimuth = n_azimuth;
  const double dphi = 2.0 * std::numbers::pi / n_azimuth;
  for (int i = 0; i < n_polar; ++i) {
    double st = std::sqrt(std::max(0.0, 1.0 - x[i] * x[i]));
    for (int a = 0; a < n_azimuth; ++a) {
      double phi = dphi * (a + 0.5);
      Vec3 om{st * std::cos(phi), st * std::sin(phi), x[i]};
      double len = std::sqrt(norm2(om));
      q.nodes.push_back({(1.0 / len) * om, w[i] * dphi});
    }
  }
  return q;
}

inline void require_unit(const Vec3& omega) {
  if (std::abs(std::sqrt(norm2(omega)) - 1.0) > 1e-12) throw ContractError("collision direction is not a unit vector");
}

// Returns (u', v') with u' = u + w (w.(v-u)), v' = v - w (w.(v-u)).
inline std::pair<Vec3, Vec3> post_collision(const Vec3& u, const Vec3& v, const Vec3& omega) {
  require_unit(omega);
  double s = dot(omega, v - u);
  return {u + s * omega, v - s * omega};
}

inline double kernel_q(const Vec3& omega, const Vec3& v_minus_u) {
  require_unit(omega);
  return std::abs(dot(omega, v_minus_u));
}

// Trilinear interpolation of lattice data; zero strictly outside the lattice hull.
inline double interpolate(const std::vector<double>& field, const VelocityGrid& g, const Vec3& p) {
  if (field.size() != g.size()) throw DimensionError("field size does not match velocity grid");
  const double h = g.spacing();
  int base[3];
  double frac[3];
  for (int a = 0; a < 3; ++a) {
    double s = (p[a] + g.radius) / h;
    if (!(s >= -1e-9 && s <= g.n - 1 + 1e-9)) {
      if (std::isnan(s)) throw NumericError("NaN interpolation point");
      return 0.0;
    }
    int b = int(std::floor(s));
    b = std::clamp(b, 0, g.n - 2);
    base[a] = b;
    frac[a] = s - b;
  }
  double acc = 0.0;
  for (int di = 0; di < 2; ++di)
    for (int dj = 0; dj < 2; ++dj)
      for (int dk = 0; dk < 2; ++dk) {
        double wgt = (di ? frac[0] : 1.0 - frac[0]) * (dj ? frac[1] : 1.0 - frac[1]) * (dk ? frac[2] : 1.0 - frac[2]);
        acc += wgt * field[g.index(base[0] + di, base[1] + dj, base[2] + dk)];
      }
  if (std::isnan(acc)) throw NumericError("NaN in interpolated field");
  return acc;
}

}  // namespace qboltz
