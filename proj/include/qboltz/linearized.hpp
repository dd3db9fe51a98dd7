#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "collision.hpp"
#include "equilibrium.hpp"
#include "errors.hpp"
#include "geometry.hpp"

namespace qboltz {

// Trilinear weights plus a second-difference correction per axis; reproduces every quadratic
// polynomial, so the collision invariants survive interpolation exactly.
struct QuadStencil {
  int count = 0;
  std::array<std::uint32_t, 11> idx{};
  std::array<double, 11> w{};

  double apply(const double* h) const {
    double s = 0.0;
    for (int i = 0; i < count; ++i) s += w[i] * h[idx[i]];
    return s;
  }
};

inline bool quad_stencil(const VelocityGrid& g, const Vec3& p, QuadStencil& st) {
  const int n = g.n;
  if (n < 3) throw ContractError("quadratic interpolation needs at least 3 points per axis");
  const double h = g.spacing();
  int b[3], c[3], m[3], extra[3];
  double s[3];
  for (int a = 0; a < 3; ++a) {
    const double t = (p[a] + g.radius) / h;
    if (!(t >= -1e-9 && t <= n - 1 + 1e-9)) {
      if (std::isnan(t)) throw NumericError("NaN interpolation point");
      return false;
    }
    b[a] = std::clamp(int(std::floor(t)), 0, n - 2);
    s[a] = t - b[a];
    c[a] = s[a] < 0.5 ? b[a] : b[a] + 1;
    m[a] = std::clamp(c[a], 1, n - 2);
    extra[a] = (m[a] - 1 < b[a]) ? m[a] - 1 : m[a] + 1;
  }
  double wt[11];
  for (int di = 0; di < 2; ++di)
    for (int dj = 0; dj < 2; ++dj)
      for (int dk = 0; dk < 2; ++dk)
        wt[di * 4 + dj * 2 + dk] =
            (di ? s[0] : 1.0 - s[0]) * (dj ? s[1] : 1.0 - s[1]) * (dk ? s[2] : 1.0 - s[2]);
  wt[8] = wt[9] = wt[10] = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double kappa = -0.5 * s[a] * (1.0 - s[a]);
    if (kappa == 0.0) continue;
    const double coef[3] = {kappa, -2.0 * kappa, kappa};
    for (int r = 0; r < 3; ++r) {
      const int pos = m[a] - 1 + r;
      int slot;
      if (pos == b[a] || pos == b[a] + 1) {
        int d[3];
        for (int e = 0; e < 3; ++e) d[e] = (e == a ? pos : c[e]) - b[e];
        slot = d[0] * 4 + d[1] * 2 + d[2];
      } else {
        slot = 8 + a;
      }
      wt[slot] += coef[r];
    }
  }
  st.count = 0;
  for (int di = 0; di < 2; ++di)
    for (int dj = 0; dj < 2; ++dj)
      for (int dk = 0; dk < 2; ++dk) {
        const int slot = di * 4 + dj * 2 + dk;
        st.idx[st.count] = std::uint32_t(g.index(b[0] + di, b[1] + dj, b[2] + dk));
        st.w[st.count++] = wt[slot];
      }
  for (int a = 0; a < 3; ++a) {
    if (wt[8 + a] == 0.0) continue;
    int q[3] = {c[0], c[1], c[2]};
    q[a] = extra[a];
    st.idx[st.count] = std::uint32_t(g.index(q[0], q[1], q[2]));
    st.w[st.count++] = wt[8 + a];
  }
  return true;
}

inline double quad_interpolate(const std::vector<double>& field, const VelocityGrid& g, const Vec3& p) {
  if (field.size() != g.size()) throw DimensionError("field size does not match velocity grid");
  QuadStencil st;
  if (!quad_stencil(g, p, st)) return 0.0;
  return st.apply(field.data());
}

// Lattice tables of mu, M = mu (1 + theta mu) and M^{+-1/2}.
struct EquilibriumTables {
  std::vector<double> mu, M, sqrtM, inv_sqrtM;

  EquilibriumTables(const QuantumMaxwellianParams& p, const VelocityGrid& g) {
    p.validate();
    mu = sample_mu(p, g);
    M.resize(g.size());
    sqrtM.resize(g.size());
    inv_sqrtM.resize(g.size());
    for (std::size_t n = 0; n < g.size(); ++n) {
      M[n] = mu[n] * (1.0 + p.theta * mu[n]);
      sqrtM[n] = std::sqrt(M[n]);
      inv_sqrtM[n] = 1.0 / sqrtM[n];
    }
  }
};

// F = mu + M^{1/2} f on the lattice.
inline std::vector<double> reconstruct_F(const std::vector<double>& f, const QuantumMaxwellianParams& p,
                                         const VelocityGrid& g) {
  if (f.size() != g.size()) throw DimensionError("perturbation size does not match velocity grid");
  EquilibriumTables t(p, g);
  std::vector<double> F(f.size());
  for (std::size_t n = 0; n < f.size(); ++n) F[n] = t.mu[n] + t.sqrtM[n] * f[n];
  return F;
}

namespace detail {

// One lattice pair (v, u) with one half-sphere direction, both post-collision velocities inside
// the hull. weight = |w.(v-u)| * w_omega * h^3.
struct CollisionSite {
  std::uint32_t iv, iu;
  Vec3 up, vp;
  QuadStencil su, sv;
  double weight;
};

template <class Visit>
void sweep_collisions(const VelocityGrid& g, const SphereQuadrature& sphere, Visit&& visit) {
  const std::size_t N = g.size();
  const auto half = sphere.half();
  const double w3 = g.cell_volume();
  std::vector<Vec3> pts(N);
  for (std::size_t n = 0; n < N; ++n) pts[n] = g.point(n);
  CollisionSite site;
  for (std::size_t iv = 0; iv < N; ++iv) {
    const Vec3& v = pts[iv];
    for (std::size_t iu = 0; iu < N; ++iu) {
      if (iu == iv) continue;
      const Vec3& u = pts[iu];
      const Vec3 gv = v - u;
      for (const auto& nd : half) {
        const double s = dot(nd.omega, gv);
        if (s == 0.0) continue;
        site.up = u + s * nd.omega;
        site.vp = v - s * nd.omega;
        if (!quad_stencil(g, site.up, site.su) || !quad_stencil(g, site.vp, site.sv)) continue;
        site.iv = std::uint32_t(iv);
        site.iu = std::uint32_t(iu);
        site.weight = std::abs(s) * nd.weight * w3;
        visit(site);
      }
    }
  }
}

// Runs body(lo, hi) once per thread; each thread owns output indices [lo, hi) and must write
// only there. Accumulation order per output is the sweep order, independent of thread count.
template <class Body>
void for_each_owned_range(std::size_t N, Body&& body) {
#ifdef _OPENMP
#pragma omp parallel
  {
    const std::size_t nt = std::size_t(omp_get_num_threads()), tid = std::size_t(omp_get_thread_num());
    body(N * tid / nt, N * (tid + 1) / nt);
  }
#else
  body(std::size_t(0), N);
#endif
}

// Scatter c * (delta_v + delta_u - S_u' - S_v') into out[lo, hi).
inline void scatter_difference(double* out, std::size_t lo, std::size_t hi, const CollisionSite& s, double c) {
  if (s.iv >= lo && s.iv < hi) out[s.iv] += c;
  if (s.iu >= lo && s.iu < hi) out[s.iu] += c;
  for (int i = 0; i < s.su.count; ++i)
    if (s.su.idx[i] >= lo && s.su.idx[i] < hi) out[s.su.idx[i]] -= c * s.su.w[i];
  for (int i = 0; i < s.sv.count; ++i)
    if (s.sv.idx[i] >= lo && s.sv.idx[i] < hi) out[s.sv.idx[i]] -= c * s.sv.w[i];
}

// mu(v) mu(u) (1 + theta mu(u')) (1 + theta mu(v')), with analytic mu off the lattice.
inline double detailed_balance_weight(const QuantumMaxwellianParams& p, double mu_v, double mu_u, const Vec3& up,
                                      const Vec3& vp) {
  const double a = mu(up, p), b = mu(vp, p);
  return mu_v * mu_u * (1.0 + p.theta * a) * (1.0 + p.theta * b);
}

}  // namespace detail

// nu(v) = sum over (u, omega) of q mu(u) mu(v) (1 + theta mu(u')) (1 + theta mu(v')) / M(v).
inline std::vector<double> compute_nu(const QuantumMaxwellianParams& p, const CollisionGeometry& geom) {
  const VelocityGrid& g = geom.grid;
  const std::size_t N = g.size();
  EquilibriumTables t(p, g);
  const auto nodes = geom.sphere.nodes;
  const double w3 = g.cell_volume();
  std::vector<double> nu(N, 0.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (std::ptrdiff_t iv = 0; iv < std::ptrdiff_t(N); ++iv) {
    const Vec3 v = g.point(std::size_t(iv));
    double acc = 0.0;
    for (std::size_t iu = 0; iu < N; ++iu) {
      const Vec3 u = g.point(iu);
      const Vec3 gv = v - u;
      for (const auto& nd : nodes) {
        const double s = dot(nd.omega, gv);
        if (s == 0.0) continue;
        acc += std::abs(s) * nd.weight * detail::detailed_balance_weight(p, t.mu[iv], t.mu[iu], u + s * nd.omega,
                                                                         v - s * nd.omega);
      }
    }
    nu[iv] = acc * w3 / t.M[iv];
  }
  return nu;
}

struct LinearizedOptions {
  std::size_t max_matrix_bytes = std::size_t(2) << 30;
};

struct MacroCoefficients {
  double a = 0.0;
  Vec3 b{0.0, 0.0, 0.0};
  double c = 0.0;
};

// Symmetric matrix of L in the lattice inner product <f, g> = h^3 sum f g:
// <L f, g> = 1/4 sum q D (h + h_* - h' - h'_*)(k + k_* - k' - k'_*), h = M^{-1/2} f, k = M^{-1/2} g.
inline Eigen::MatrixXd assemble_L(const QuantumMaxwellianParams& p, const CollisionGeometry& geom,
                                  const LinearizedOptions& opt = LinearizedOptions()) {
  const VelocityGrid& g = geom.grid;
  const std::size_t N = g.size();
  const double bytes = double(N) * double(N) * sizeof(double);
  if (bytes > double(opt.max_matrix_bytes))
    throw ContractError("linearized matrix for " + std::to_string(N) + " lattice points needs " +
                        std::to_string(bytes / (1 << 20)) + " MiB, above the configured limit");
  EquilibriumTables t(p, g);
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(Eigen::Index(N), Eigen::Index(N));
  double* data = L.data();
  detail::for_each_owned_range(N, [&](std::size_t lo, std::size_t hi) {
    std::uint32_t node[24];
    double coef[24];
    detail::sweep_collisions(g, geom.sphere, [&](const detail::CollisionSite& s) {
      int m = 0;
      node[m] = s.iv; coef[m++] = t.inv_sqrtM[s.iv];
      node[m] = s.iu; coef[m++] = t.inv_sqrtM[s.iu];
      for (int i = 0; i < s.su.count; ++i) { node[m] = s.su.idx[i]; coef[m++] = -s.su.w[i] * t.inv_sqrtM[s.su.idx[i]]; }
      for (int i = 0; i < s.sv.count; ++i) { node[m] = s.sv.idx[i]; coef[m++] = -s.sv.w[i] * t.inv_sqrtM[s.sv.idx[i]]; }
      const double c = 0.25 * s.weight * detail::detailed_balance_weight(p, t.mu[s.iv], t.mu[s.iu], s.up, s.vp);
      for (int a = 0; a < m; ++a) {
        if (node[a] < lo || node[a] >= hi) continue;
        double* col = data + std::size_t(node[a]) * N;
        const double ca = c * coef[a];
        for (int b = 0; b < m; ++b) col[node[b]] += ca * coef[b];
      }
    });
  });
  return L;
}

// Matrix-free L f by the same quadrature.
inline std::vector<double> apply_L_direct(const std::vector<double>& f, const QuantumMaxwellianParams& p,
                                          const CollisionGeometry& geom) {
  const VelocityGrid& g = geom.grid;
  const std::size_t N = g.size();
  if (f.size() != N) throw DimensionError("perturbation size does not match velocity grid");
  EquilibriumTables t(p, g);
  std::vector<double> h(N), out(N, 0.0);
  for (std::size_t n = 0; n < N; ++n) h[n] = t.inv_sqrtM[n] * f[n];
  detail::for_each_owned_range(N, [&](std::size_t lo, std::size_t hi) {
    detail::sweep_collisions(g, geom.sphere, [&](const detail::CollisionSite& s) {
      const double dh = h[s.iv] + h[s.iu] - s.su.apply(h.data()) - s.sv.apply(h.data());
      const double c = 0.25 * s.weight * detail::detailed_balance_weight(p, t.mu[s.iv], t.mu[s.iu], s.up, s.vp) * dh;
      detail::scatter_difference(out.data(), lo, hi, s, c);
    });
  });
  for (std::size_t n = 0; n < N; ++n) out[n] *= t.inv_sqrtM[n];
  return out;
}

// Pointwise (strong) L f(v) = M^{-1/2}(v) sum q D (h + h_* - h' - h'_*); agrees with the
// symmetric form only up to discretization error.
inline std::vector<double> apply_L_strong(const std::vector<double>& f, const QuantumMaxwellianParams& p,
                                          const CollisionGeometry& geom) {
  const VelocityGrid& g = geom.grid;
  const std::size_t N = g.size();
  if (f.size() != N) throw DimensionError("perturbation size does not match velocity grid");
  EquilibriumTables t(p, g);
  std::vector<double> h(N), out(N, 0.0);
  for (std::size_t n = 0; n < N; ++n) h[n] = t.inv_sqrtM[n] * f[n];
  const auto nodes = geom.sphere.nodes;
  const double w3 = g.cell_volume();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (std::ptrdiff_t iv = 0; iv < std::ptrdiff_t(N); ++iv) {
    const Vec3 v = g.point(std::size_t(iv));
    double acc = 0.0;
    for (std::size_t iu = 0; iu < N; ++iu) {
      const Vec3 u = g.point(iu);
      for (const auto& nd : nodes) {
        const double s = dot(nd.omega, v - u);
        if (s == 0.0) continue;
        const Vec3 up = u + s * nd.omega, vp = v - s * nd.omega;
        const double D = detail::detailed_balance_weight(p, t.mu[iv], t.mu[iu], up, vp);
        acc += std::abs(s) * nd.weight * D *
               (h[iv] + h[iu] - quad_interpolate(h, g, up) - quad_interpolate(h, g, vp));
      }
    }
    out[iv] = acc * w3 * t.inv_sqrtM[iv];
  }
  return out;
}

// Weak (scattered) cubic collision operator of F = mu + M^{1/2} f, with off-lattice values
// mu(p) + M(p) IQ[M^{-1/2} f](p). Returned in F units.
inline std::vector<double> collide_perturbed(const std::vector<double>& f, const QuantumMaxwellianParams& p,
                                             const CollisionGeometry& geom) {
  const VelocityGrid& g = geom.grid;
  const std::size_t N = g.size();
  if (f.size() != N) throw DimensionError("perturbation size does not match velocity grid");
  EquilibriumTables t(p, g);
  std::vector<double> h(N), F(N), out(N, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    h[n] = t.inv_sqrtM[n] * f[n];
    F[n] = t.mu[n] + t.sqrtM[n] * f[n];
  }
  const double th = p.theta;
  detail::for_each_owned_range(N, [&](std::size_t lo, std::size_t hi) {
    detail::sweep_collisions(g, geom.sphere, [&](const detail::CollisionSite& s) {
      const double mu1 = mu(s.up, p), mu2 = mu(s.vp, p);
      const double Fu1 = mu1 + mu1 * (1.0 + th * mu1) * s.su.apply(h.data());
      const double Fv1 = mu2 + mu2 * (1.0 + th * mu2) * s.sv.apply(h.data());
      const double Fv = F[s.iv], Fu = F[s.iu];
      const double G = Fu1 * Fv1 * (1.0 + th * (Fu + Fv)) - Fu * Fv * (1.0 + th * (Fu1 + Fv1));
      detail::scatter_difference(out.data(), lo, hi, s, 0.25 * s.weight * G);
    });
  });
  return out;
}

// Gamma[f1, f2; f3] = M^{-1/2} ( Qb[g1, g2] + theta ( Qt[g1, g2; mu] + Qt[g1, mu; g3] + Qt[mu, g2; g3]
// + Qt[g1, g2; g3] ) ), g_i = M^{1/2} f_i, with Qb, Qt the symmetrized bilinear and trilinear forms.
inline std::vector<double> apply_Gamma(const std::vector<double>& f1, const std::vector<double>& f2,
                                       const std::vector<double>& f3, const QuantumMaxwellianParams& p,
                                       const CollisionGeometry& geom) {
  const VelocityGrid& g = geom.grid;
  const std::size_t N = g.size();
  if (f1.size() != N || f2.size() != N || f3.size() != N)
    throw DimensionError("perturbation size does not match velocity grid");
  EquilibriumTables t(p, g);
  std::vector<double> h1(N), h2(N), h3(N), g1(N), g2(N), g3(N), out(N, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    h1[n] = t.inv_sqrtM[n] * f1[n];
    h2[n] = t.inv_sqrtM[n] * f2[n];
    h3[n] = t.inv_sqrtM[n] * f3[n];
    g1[n] = t.sqrtM[n] * f1[n];
    g2[n] = t.sqrtM[n] * f2[n];
    g3[n] = t.sqrtM[n] * f3[n];
  }
  const double th = p.theta;
  // Values at (u', v', u, v).
  struct Q4 { double a1, b1, a, b; };
  auto bil = [](const Q4& F, const Q4& G) { return 0.5 * (F.a1 * G.b1 + G.a1 * F.b1 - F.a * G.b - G.a * F.b); };
  auto tri = [](const Q4& F, const Q4& G, const Q4& H) {
    return 0.5 * ((F.a1 * G.b1 + G.a1 * F.b1) * (H.a + H.b) - (F.a * G.b + G.a * F.b) * (H.a1 + H.b1));
  };
  detail::for_each_owned_range(N, [&](std::size_t lo, std::size_t hi) {
    detail::sweep_collisions(g, geom.sphere, [&](const detail::CollisionSite& s) {
      const double mu1 = mu(s.up, p), mu2 = mu(s.vp, p);
      const double M1 = mu1 * (1.0 + th * mu1), M2 = mu2 * (1.0 + th * mu2);
      const Q4 m{mu1, mu2, t.mu[s.iu], t.mu[s.iv]};
      const Q4 a{M1 * s.su.apply(h1.data()), M2 * s.sv.apply(h1.data()), g1[s.iu], g1[s.iv]};
      const Q4 b{M1 * s.su.apply(h2.data()), M2 * s.sv.apply(h2.data()), g2[s.iu], g2[s.iv]};
      const Q4 c{M1 * s.su.apply(h3.data()), M2 * s.sv.apply(h3.data()), g3[s.iu], g3[s.iv]};
      double I = bil(a, b);
      if (th != 0.0) I += th * (tri(a, b, m) + tri(a, m, c) + tri(m, b, c) + tri(a, b, c));
      detail::scatter_difference(out.data(), lo, hi, s, 0.25 * s.weight * I);
    });
  });
  for (std::size_t n = 0; n < N; ++n) out[n] *= t.inv_sqrtM[n];
  return out;
}

inline double l2_norm(const std::vector<double>& f, const VelocityGrid& g) {
  double s = 0.0;
  for (double x : f) s += x * x;
  return std::sqrt(s * g.cell_volume());
}

inline double nu_norm(const std::vector<double>& f, const std::vector<double>& nu, const VelocityGrid& g) {
  if (f.size() != nu.size()) throw DimensionError("field and collision frequency sizes differ");
  double s = 0.0;
  for (std::size_t n = 0; n < f.size(); ++n) s += nu[n] * f[n] * f[n];
  return std::sqrt(s * g.cell_volume());
}

// M^{1/2} {1, v1, v2, v3, |v|^2} as columns.
inline Eigen::MatrixXd null_space_raw_basis(const QuantumMaxwellianParams& p, const VelocityGrid& g) {
  EquilibriumTables t(p, g);
  Eigen::MatrixXd E(Eigen::Index(g.size()), 5);
  for (std::size_t n = 0; n < g.size(); ++n) {
    auto phi = invariants(g.point(n));
    for (int j = 0; j < 5; ++j) E(Eigen::Index(n), j) = t.sqrtM[n] * phi[j];
  }
  return E;
}

struct LinearizedOperator {
  VelocityGrid grid;
  QuantumMaxwellianParams params;
  std::vector<double> nu;
  Eigen::MatrixXd K_matrix;    // K = diag(nu) - L
  Eigen::MatrixXd raw_basis;   // M^{1/2} {1, v, |v|^2}
  Eigen::MatrixXd null_basis;  // orthonormal in <f, g> = h^3 sum f g
  Eigen::Matrix<double, 5, 5> gram;
  double delta = 0.0;

  Eigen::MatrixXd L_matrix() const {
    Eigen::MatrixXd L = -K_matrix;
    for (std::size_t n = 0; n < nu.size(); ++n) L(Eigen::Index(n), Eigen::Index(n)) += nu[n];
    return L;
  }

  std::vector<double> apply_K(const std::vector<double>& f) const {
    check(f);
    Eigen::Map<const Eigen::VectorXd> x(f.data(), Eigen::Index(f.size()));
    Eigen::VectorXd y = K_matrix * x;
    return {y.data(), y.data() + y.size()};
  }

  std::vector<double> apply_L(const std::vector<double>& f) const {
    std::vector<double> k = apply_K(f);
    for (std::size_t n = 0; n < f.size(); ++n) k[n] = nu[n] * f[n] - k[n];
    return k;
  }

  std::vector<double> project_P(const std::vector<double>& f) const {
    check(f);
    Eigen::Map<const Eigen::VectorXd> x(f.data(), Eigen::Index(f.size()));
    const double w = grid.cell_volume();
    Eigen::VectorXd y = null_basis * (w * (null_basis.transpose() * x));
    return {y.data(), y.data() + y.size()};
  }

  // Pf = a M^{1/2} + b.v M^{1/2} + c |v|^2 M^{1/2}.
  MacroCoefficients coefficients_abc(const std::vector<double>& f) const {
    check(f);
    Eigen::Map<const Eigen::VectorXd> x(f.data(), Eigen::Index(f.size()));
    Eigen::Matrix<double, 5, 1> rhs = grid.cell_volume() * (raw_basis.transpose() * x);
    Eigen::Matrix<double, 5, 1> cf = gram.ldlt().solve(rhs);
    return {cf(0), {cf(1), cf(2), cf(3)}, cf(4)};
  }

  void check(const std::vector<double>& f) const {
    if (f.size() != grid.size()) throw DimensionError("perturbation size does not match velocity grid");
  }
};

inline LinearizedOperator build_linearized_operator(const QuantumMaxwellianParams& p, const CollisionGeometry& geom,
                                                    const LinearizedOptions& opt = LinearizedOptions()) {
  LinearizedOperator op;
  op.grid = geom.grid;
  op.params = p;
  op.nu = compute_nu(p, geom);
  op.K_matrix = -assemble_L(p, geom, opt);
  for (std::size_t n = 0; n < op.nu.size(); ++n) op.K_matrix(Eigen::Index(n), Eigen::Index(n)) += op.nu[n];
  op.raw_basis = null_space_raw_basis(p, geom.grid);
  const double w = geom.grid.cell_volume();
  op.gram = w * (op.raw_basis.transpose() * op.raw_basis);
  // Orthonormalize through the Cholesky factor of the Gram matrix: E L^{-T}.
  Eigen::LLT<Eigen::Matrix<double, 5, 5>> llt(op.gram);
  if (llt.info() != Eigen::Success) throw NumericError("null-space Gram matrix is not positive definite");
  Eigen::Matrix<double, 5, 5> Linv = llt.matrixL().solve(Eigen::Matrix<double, 5, 5>::Identity());
  op.null_basis = op.raw_basis * Linv.transpose();
  return op;
}

struct SpectrumReport {
  std::vector<double> eigenvalues;   // of L, ascending, plain lattice metric
  double complement_gap = 0.0;       // smallest eigenvalue of L on the complement of the null space
  int null_count = 0;                // eigenvalues below complement_gap / 100
  double max_principal_angle = 0.0;  // between the lowest five eigenvectors and the null basis
  double delta = 0.0;                // coercivity constant in the nu-weighted metric
};

namespace detail {
// Orthonormal (Euclidean) basis of the orthogonal complement of the null space, N x (N - 5).
inline Eigen::MatrixXd complement_basis(const LinearizedOperator& op) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(op.raw_basis);
  const Eigen::Index N = op.raw_basis.rows();
  Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(N, N);
  return Q.rightCols(N - 5);
}
}  // namespace detail

// delta = min over g orthogonal to the null space of <L g, g> / ||g||_nu^2.
inline double coercivity_gap(LinearizedOperator& op) {
  const Eigen::MatrixXd Z = detail::complement_basis(op);
  const Eigen::MatrixXd LZ = op.L_matrix() * Z;
  Eigen::MatrixXd A = Z.transpose() * LZ;
  A = 0.5 * (A + A.transpose()).eval();
  Eigen::VectorXd nu = Eigen::Map<const Eigen::VectorXd>(op.nu.data(), Eigen::Index(op.nu.size()));
  Eigen::MatrixXd B = Z.transpose() * nu.asDiagonal() * Z;
  B = 0.5 * (B + B.transpose()).eval();
  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> es(A, B, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NumericError("generalized eigen-solve failed");
  op.delta = es.eigenvalues().minCoeff();
  if (!(op.delta > 0.0))
    throw NumericError("nonpositive coercivity gap " + std::to_string(op.delta) + ": lattice too coarse");
  return op.delta;
}

inline SpectrumReport spectrum(LinearizedOperator& op) {
  SpectrumReport r;
  const Eigen::MatrixXd L = op.L_matrix();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(L);
  if (es.info() != Eigen::Success) throw NumericError("eigen-solve of L failed");
  const Eigen::VectorXd ev = es.eigenvalues();
  r.eigenvalues.assign(ev.data(), ev.data() + ev.size());

  const Eigen::MatrixXd Z = detail::complement_basis(op);
  Eigen::MatrixXd A = Z.transpose() * (L * Z);
  A = 0.5 * (A + A.transpose()).eval();
  r.complement_gap = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(A, Eigen::EigenvaluesOnly).eigenvalues().minCoeff();
  for (double e : r.eigenvalues)
    if (e < r.complement_gap / 100.0) ++r.null_count;

  const double w = op.grid.cell_volume();
  Eigen::MatrixXd E = std::sqrt(w) * op.null_basis;  // Euclidean-orthonormal
  Eigen::MatrixXd V = es.eigenvectors().leftCols(5);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(E.transpose() * V);
  const double smin = std::min(1.0, svd.singularValues().minCoeff());
  r.max_principal_angle = std::acos(smin);
  r.delta = coercivity_gap(op);
  return r;
}

// Carleman kernel of the gain part at (v, eta):
// k2 = M^{-1/2}(v) M^{-1/2}(eta) (2/|eta - v|) int_{V perp (eta - v)} mu(v) mu(eta + V) (1 + theta mu(v + V)) (1 + theta mu(eta)) dV,
// so that the gain part of K is 2 int k2(v, eta) f(eta) d eta.
inline double carleman_k2(const Vec3& v, const Vec3& eta, const QuantumMaxwellianParams& p, int radial_panels = 40,
                          int n_angle = 64) {
  p.validate();
  const Vec3 d = eta - v;
  const double len = std::sqrt(norm2(d));
  if (len == 0.0) throw DomainError("Carleman kernel is singular at eta = v");
  const Vec3 n = (1.0 / len) * d;
  Vec3 e1 = std::abs(n[0]) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
  e1 = e1 - dot(e1, n) * n;
  e1 = (1.0 / std::sqrt(norm2(e1))) * e1;
  const Vec3 e2{n[1] * e1[2] - n[2] * e1[1], n[2] * e1[0] - n[0] * e1[2], n[0] * e1[1] - n[1] * e1[0]};
  const double rmax = std::sqrt(norm2(v)) + std::sqrt(norm2(eta)) + 9.0;
  auto [x, w] = gauss_legendre(8);
  const double mv = mu(v, p), me = mu(eta, p);
  double acc = 0.0;
  const double dr = rmax / radial_panels;
  for (int pnl = 0; pnl < radial_panels; ++pnl) {
    for (int i = 0; i < 8; ++i) {
      const double r = dr * (pnl + 0.5 * (x[i] + 1.0));
      double ring = 0.0;
      for (int a = 0; a < n_angle; ++a) {
        const double phi = 2.0 * std::numbers::pi * a / n_angle;
        const Vec3 V = (r * std::cos(phi)) * e1 + (r * std::sin(phi)) * e2;
        ring += mu(eta + V, p) * (1.0 + p.theta * mu(v + V, p));
      }
      acc += 0.5 * dr * w[i] * r * ring * (2.0 * std::numbers::pi / n_angle);
    }
  }
  const double Mv = mv * (1.0 + p.theta * mv), Me = me * (1.0 + p.theta * me);
  return (2.0 / len) * mv * (1.0 + p.theta * me) * acc / std::sqrt(Mv * Me);
}

}  // namespace qboltz
