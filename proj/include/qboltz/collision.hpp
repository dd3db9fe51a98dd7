#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "equilibrium.hpp"
#include "errors.hpp"
#include "geometry.hpp"

namespace qboltz {

struct DistributionField {
  std::vector<double> values;
  int theta = 0;
  bool nonneg_asserted = false;

  DistributionField() = default;
  DistributionField(std::vector<double> v, int th, bool nonneg = false)
      : values(std::move(v)), theta(th), nonneg_asserted(nonneg) {}

  std::size_t size() const { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }

  void validate() const {
    for (std::size_t n = 0; n < values.size(); ++n) {
      double f = values[n];
      if (!std::isfinite(f)) throw NumericError("non-finite field value at lattice site " + std::to_string(n));
      if (nonneg_asserted) {
        if (f < -1e-12) throw DomainError("negative field value at lattice site " + std::to_string(n));
        if (theta == -1 && f > 1.0 + 1e-12) throw DomainError("fermion field exceeds 1 at lattice site " + std::to_string(n));
      }
    }
  }
};

// Off-lattice values are E(p) * trilinear(F/E). Kind::none gives plain trilinear.
// Kind::maxwellian uses E = 1/(X - theta_E), X = exp(-(a + b.p + c|p|^2)).
struct Envelope {
  enum class Kind { none, maxwellian };
  Kind kind = Kind::none;
  QuantumMaxwellianParams params;

  static Envelope plain() { return {}; }
  static Envelope maxwellian(const QuantumMaxwellianParams& p) {
    p.validate();
    return {Kind::maxwellian, p};
  }
  // X(p) - theta_E at a lattice or off-lattice point; 1 for the plain envelope.
  double inverse(const Vec3& p) const {
    if (kind == Kind::none) return 1.0;
    return params.x_factor(p) - params.theta;
  }
};

struct CollisionGeometry {
  VelocityGrid grid;
  SphereQuadrature sphere;
  Envelope envelope;
  // Pairs with |u|^2 + |v|^2 above this are skipped; only for Gaussian-decaying data.
  double pair_energy_cutoff = std::numeric_limits<double>::infinity();

  CollisionGeometry() : sphere(sphere_quadrature_build(8, 16)) {}
  CollisionGeometry(const VelocityGrid& g, int n_polar, int n_azimuth, Envelope env = Envelope::plain())
      : grid(g), sphere(sphere_quadrature_build(n_polar, n_azimuth)), envelope(env) {}

  void check(const DistributionField& F) const {
    if (F.size() != grid.size())
      throw DimensionError("field has " + std::to_string(F.size()) + " values, lattice has " + std::to_string(grid.size()));
  }
};

namespace detail {

// Per-axis interpolation data for a displacement d applied to every lattice coordinate.
struct AxisStencil {
  int offset = 0;            // lattice index i maps to base i + offset
  std::vector<double> w0;    // (1 - frac) * inside
  std::vector<double> w1;    // frac * inside
  std::vector<double> mask;  // 1 inside the hull, 0 outside
  std::vector<double> xf;    // per-axis envelope factor exp(-(b p + c p^2)) at p = v_i + d
};

inline void build_axis(AxisStencil& s, const VelocityGrid& g, double d, int axis, const Envelope& env) {
  const int n = g.n;
  const double h = g.spacing();
  const double t = d / h;
  const double fl = std::floor(t);
  s.offset = int(fl);
  const double frac = t - fl;
  s.w0.resize(n);
  s.w1.resize(n);
  s.mask.resize(n);
  for (int i = 0; i < n; ++i) {
    double pos = i + t;
    double in = (pos >= -1e-9 && pos <= n - 1 + 1e-9) ? 1.0 : 0.0;
    s.mask[i] = in;
    s.w0[i] = (1.0 - frac) * in;
    s.w1[i] = frac * in;
  }
  if (env.kind == Envelope::Kind::maxwellian) {
    // exp(-(b p + c p^2)) along p = v_i + d by a second-order geometric recurrence.
    s.xf.resize(n);
    const double b = env.params.b[axis], c = env.params.c;
    const double p0 = g.coord(0) + d;
    double val = std::exp(-(b * p0 + c * p0 * p0));
    double ratio = std::exp(-(b * h + c * (2.0 * p0 * h + h * h)));
    const double growth = std::exp(-2.0 * c * h * h);
    for (int i = 0; i < n; ++i) {
      s.xf[i] = val;
      val *= ratio;
      ratio *= growth;
    }
  }
}

// Lattice data divided by the envelope, with one zero layer on every side.
inline std::vector<double> padded_source(const std::vector<double>& F, const VelocityGrid& g, const Envelope& env) {
  const int n = g.n, np = n + 2;
  std::vector<double> P(std::size_t(np) * np * np, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        double e = env.inverse(g.point(i, j, k));
        P[(std::size_t(i + 1) * np + (j + 1)) * np + (k + 1)] = F[g.index(i, j, k)] * e;
      }
  return P;
}

struct RowInfo {
  double q;          // |w.g| * w_omega * h^3
  int i, j;          // output velocity row
  int gi, gj, gk;    // v - u in lattice steps
  int klo, khi;      // k range of this row
  const double* xu;  // interpolated source X at u' (indexed by k)
  const double* yv;  // interpolated source Y at v' (indexed by k)
  double mask_u_row, mask_v_row;
  const double* mask_u;  // hull mask of u' along k
  const double* mask_v;  // hull mask of v' along k
  const Vec3* d_v;   // v' - v
  const Vec3* d_u;   // u' - v
};

inline void interpolate_row(double* __restrict out, const double* __restrict P, int np, const AxisStencil& sx, const AxisStencil& sy,
                            const AxisStencil& sz, int i, int j, int klo, int khi, const Envelope& env) {
  const double a00 = sx.w0[i] * sy.w0[j], a01 = sx.w0[i] * sy.w1[j];
  const double a10 = sx.w1[i] * sy.w0[j], a11 = sx.w1[i] * sy.w1[j];
  const int bi = i + sx.offset + 1, bj = j + sy.offset + 1;
  if (a00 == 0.0 && a01 == 0.0 && a10 == 0.0 && a11 == 0.0) {
    for (int k = klo; k < khi; ++k) out[k] = 0.0;
    return;
  }
  const int shift = sz.offset + 1;
  const double* __restrict R00 = P + (std::size_t(bi) * np + bj) * np + shift;
  const double* __restrict R01 = R00 + np;
  const double* __restrict R10 = R00 + std::size_t(np) * np;
  const double* __restrict R11 = R10 + np;
  const double* __restrict z0 = sz.w0.data();
  const double* __restrict z1 = sz.w1.data();
  for (int k = klo; k < khi; ++k) {
    double lo = a00 * R00[k] + a01 * R01[k] + a10 * R10[k] + a11 * R11[k];
    double hi = a00 * R00[k + 1] + a01 * R01[k + 1] + a10 * R10[k + 1] + a11 * R11[k + 1];
    out[k] = z0[k] * lo + z1[k] * hi;
  }
  if (env.kind == Envelope::Kind::maxwellian) {
    const double exy = std::exp(-env.params.a) * sx.xf[i] * sy.xf[j];
    const double th = env.params.theta;
    const double* xz = sz.xf.data();
    for (int k = klo; k < khi; ++k) out[k] = out[k] / (exy * xz[k] - th);
  }
}

// Visits every (omega, v - u) pair family row by row for output rows i in [i_begin, i_end).
template <class RowOp>
void sweep_rows(const CollisionGeometry& geom, const std::vector<double>& PX, const std::vector<double>& PY, int i_begin,
                int i_end, RowOp&& op) {
  const VelocityGrid& g = geom.grid;
  const int n = g.n, np = n + 2;
  const double h = g.spacing(), w3 = g.cell_volume();
  const double ecut = geom.pair_energy_cutoff;
  const bool use_cut = std::isfinite(ecut);
  const auto half = geom.sphere.half();
  const bool same = &PX == &PY;
  AxisStencil su[3], sv[3];
  std::vector<double> xbuf(n), ybuf(n);
  std::vector<double> coord(n);
  for (int i = 0; i < n; ++i) coord[i] = g.coord(i);

  for (const auto& node : half) {
    const Vec3& om = node.omega;
    for (int gi = -(n - 1); gi < n; ++gi) {
      int ilo = std::max({0, gi, i_begin}), ihi = std::min({n, n + gi, i_end});
      if (ilo >= ihi) continue;
      for (int gj = -(n - 1); gj < n; ++gj)
        for (int gk = -(n - 1); gk < n; ++gk) {
          Vec3 gv{gi * h, gj * h, gk * h};
          if (use_cut && norm2(gv) > 2.0 * ecut) continue;
          const double s = dot(om, gv);
          const double q = std::abs(s) * node.weight * w3;
          if (q == 0.0) continue;
          const Vec3 dv{-om[0] * s, -om[1] * s, -om[2] * s};
          const Vec3 du{-gv[0] + om[0] * s, -gv[1] + om[1] * s, -gv[2] + om[2] * s};
          for (int a = 0; a < 3; ++a) {
            build_axis(sv[a], g, dv[a], a, geom.envelope);
            build_axis(su[a], g, du[a], a, geom.envelope);
          }
          const int jlo = std::max(0, gj), jhi = std::min(n, n + gj);
          const int klo0 = std::max(0, gk), khi0 = std::min(n, n + gk);
          for (int i = ilo; i < ihi; ++i)
            for (int j = jlo; j < jhi; ++j) {
              int klo = klo0, khi = khi0;
              if (use_cut) {
                // |v|^2 + |u|^2 <= E with v_k = x, u_k = x - gk h: 2x^2 - 2 gk h x + (gk h)^2 + rest <= E
                const double vi = coord[i], vj = coord[j], ui = coord[i - gi], uj = coord[j - gj];
                const double rest = vi * vi + vj * vj + ui * ui + uj * uj;
                const double gh = gk * h;
                const double disc = gh * gh - 2.0 * (gh * gh + rest - ecut);
                if (disc < 0.0) continue;
                const double sq = std::sqrt(disc);
                const double xlo = (gh - sq) / 2.0, xhi = (gh + sq) / 2.0;
                klo = std::max(klo, int(std::ceil((xlo + g.radius) / h - 1e-9)));
                khi = std::min(khi, int(std::floor((xhi + g.radius) / h + 1e-9)) + 1);
                if (klo >= khi) continue;
              }
              interpolate_row(xbuf.data(), PX.data(), np, su[0], su[1], su[2], i, j, klo, khi, geom.envelope);
              if (same)
                interpolate_row(ybuf.data(), PX.data(), np, sv[0], sv[1], sv[2], i, j, klo, khi, geom.envelope);
              else
                interpolate_row(ybuf.data(), PY.data(), np, sv[0], sv[1], sv[2], i, j, klo, khi, geom.envelope);
              RowInfo r{q, i, j, gi, gj, gk, klo, khi, xbuf.data(), ybuf.data(),
                        su[0].mask[i] * su[1].mask[j], sv[0].mask[i] * sv[1].mask[j],
                        su[2].mask.data(), sv[2].mask.data(), &dv, &du};
              op(r);
            }
        }
    }
  }
}

// Runs sweep_rows over contiguous slabs of output rows, one slab per thread. Every output
// velocity is owned by exactly one slab and accumulated in a fixed order, so results do not
// depend on the thread count.
template <class MakeOp>
void parallel_sweep(const CollisionGeometry& geom, const std::vector<double>& PX, const std::vector<double>& PY,
                    MakeOp&& make_op) {
  const int n = geom.grid.n;
#ifdef _OPENMP
#pragma omp parallel
  {
    const int nt = omp_get_num_threads(), tid = omp_get_thread_num();
    const int b = int((long long)n * tid / nt), e = int((long long)n * (tid + 1) / nt);
    auto op = make_op();
    if (b < e) sweep_rows(geom, PX, PY, b, e, op);
  }
#else
  auto op = make_op();
  sweep_rows(geom, PX, PY, 0, n, op);
#endif
}

}  // namespace detail

// Strong-form evaluation: out(v) = sum over (u, omega) of q * integrand.
// X is sampled at u', Y at v'; A and B are lattice fields sampled at u and v.
// integrand(x_u1, y_v1, a_u, a_v, b_u, b_v)
template <class Integrand>
std::vector<double> strong_integral(const CollisionGeometry& geom, const std::vector<double>& X,
                                    const std::vector<double>& Y, const std::vector<double>& A,
                                    const std::vector<double>& B, Integrand integrand) {
  const VelocityGrid& g = geom.grid;
  const int n = g.n;
  std::vector<double> out(g.size(), 0.0);
  std::vector<double> PX = detail::padded_source(X, g, geom.envelope);
  std::vector<double> PY;
  const bool same = &X == &Y;
  if (!same) PY = detail::padded_source(Y, g, geom.envelope);
  const std::vector<double>& PYref = same ? PX : PY;
  detail::parallel_sweep(geom, PX, PYref, [&]() {
    return [&](const detail::RowInfo& r) {
      const std::size_t vrow = g.index(r.i, r.j, 0);
      const std::size_t urow = g.index(r.i - r.gi, r.j - r.gj, 0);
      const double* __restrict av = A.data() + vrow;
      const double* __restrict bv = B.data() + vrow;
      const double* __restrict au = A.data() + urow - r.gk;
      const double* __restrict bu = B.data() + urow - r.gk;
      const double* __restrict xu = r.xu;
      const double* __restrict yv = r.yv;
      double* __restrict o = out.data() + vrow;
      const double q = r.q;
      for (int k = r.klo; k < r.khi; ++k) o[k] += q * integrand(xu[k], yv[k], au[k], av[k], bu[k], bv[k]);
    };
  });
  (void)n;
  return out;
}

inline std::vector<double> collide(const DistributionField& F, const CollisionGeometry& geom) {
  geom.check(F);
  F.validate();
  const double th = F.theta;
  const auto& f = F.values;
  return strong_integral(geom, f, f, f, f, [th](double fu1, double fv1, double fu, double fv, double, double) {
    return fu1 * fv1 * (1.0 + th * (fu + fv)) - fu * fv * (1.0 + th * (fu1 + fv1));
  });
}

inline std::vector<double> collide_gain(const DistributionField& F, const CollisionGeometry& geom) {
  geom.check(F);
  F.validate();
  const double th = F.theta;
  const auto& f = F.values;
  return strong_integral(geom, f, f, f, f, [th](double fu1, double fv1, double fu, double fv, double, double) {
    return fu1 * fv1 * (1.0 + th * (fu + fv));
  });
}

// R[G,H](v) = sum q G(u) (1 + theta H(u') + theta H(v'))
inline std::vector<double> loss_rate(const DistributionField& G, const DistributionField& H, const CollisionGeometry& geom) {
  geom.check(G);
  geom.check(H);
  G.validate();
  H.validate();
  const double th = H.theta;
  return strong_integral(geom, H.values, H.values, G.values, G.values,
                         [th](double hu1, double hv1, double gu, double, double, double) {
                           return gu * (1.0 + th * (hu1 + hv1));
                         });
}

inline std::vector<double> collide_loss(const DistributionField& F, const CollisionGeometry& geom) {
  std::vector<double> r = loss_rate(F, F, geom);
  for (std::size_t n = 0; n < r.size(); ++n) r[n] *= F.values[n];
  return r;
}

inline std::vector<double> collide_q1(const DistributionField& F, const CollisionGeometry& geom) {
  geom.check(F);
  F.validate();
  const auto& f = F.values;
  return strong_integral(geom, f, f, f, f, [](double fu1, double fv1, double fu, double fv, double, double) {
    return fu1 * fv1 - fu * fv;
  });
}

inline std::vector<double> collide_q2(const DistributionField& F, const CollisionGeometry& geom) {
  geom.check(F);
  F.validate();
  const auto& f = F.values;
  return strong_integral(geom, f, f, f, f, [](double fu1, double fv1, double fu, double fv, double, double) {
    return fu1 * fv1 * (fu + fv) - fu * fv * (fu1 + fv1);
  });
}

// Q_p[F,G;H](v) = sum q F(u') G(v') (1 + theta H(u))
inline std::vector<double> collide_p(const DistributionField& F, const DistributionField& G, const DistributionField& H,
                                     const CollisionGeometry& geom) {
  geom.check(F);
  geom.check(G);
  geom.check(H);
  const double th = H.theta;
  return strong_integral(geom, F.values, G.values, H.values, H.values,
                         [th](double fu1, double gv1, double hu, double, double, double) {
                           return fu1 * gv1 * (1.0 + th * hu);
                         });
}

// Q~_p[F,G](v) = sum q [-theta F(u') G(v') + F(u) (1 + theta G(u') + theta G(v'))]
inline std::vector<double> collide_p_tilde(const DistributionField& F, const DistributionField& G,
                                           const CollisionGeometry& geom) {
  geom.check(F);
  geom.check(G);
  const double th = G.theta;
  if (&F == &G || F.values == G.values) {
    const auto& f = F.values;
    return strong_integral(geom, f, f, f, f, [th](double fu1, double fv1, double fu, double, double, double) {
      return -th * fu1 * fv1 + fu * (1.0 + th * (fu1 + fv1));
    });
  }
  std::vector<double> cross = strong_integral(
      geom, F.values, G.values, F.values, F.values,
      [th](double fu1, double gv1, double, double, double, double) { return -th * fu1 * gv1; });
  std::vector<double> rate = loss_rate(F, G, geom);
  for (std::size_t n = 0; n < rate.size(); ++n) rate[n] += cross[n];
  return rate;
}

// Symmetrized quadruple form 1/4 sum q G (phi(v) + phi(u) - phi(u') - phi(v')) for K test
// functions at once. phi(p, f) receives the point and the (interpolated) field value there.
// Collisions whose post-collision velocities leave the lattice hull are omitted.
template <std::size_t K, class Phi>
std::array<double, K> weak_form_multi(const DistributionField& F, const CollisionGeometry& geom, Phi phi) {
  geom.check(F);
  F.validate();
  const VelocityGrid& g = geom.grid;
  const std::size_t N = g.size();
  const double th = F.theta;
  const auto& f = F.values;
  std::vector<std::array<double, K>> lattice_phi(N);
  for (std::size_t m = 0; m < N; ++m) lattice_phi[m] = phi(g.point(m), f[m]);
  // one accumulator per output row (i, j); each row belongs to a single slab
  const std::size_t n = std::size_t(g.n), rows = n * n;
  std::vector<double> acc(K * rows, 0.0);
  std::vector<double> PX = detail::padded_source(f, g, geom.envelope);
  std::vector<double> coord(g.n);
  for (int i = 0; i < g.n; ++i) coord[i] = g.coord(i);
  detail::parallel_sweep(geom, PX, PX, [&]() {
    return [&](const detail::RowInfo& r) {
      if (r.mask_u_row == 0.0 || r.mask_v_row == 0.0) return;
      const std::size_t vrow = g.index(r.i, r.j, 0);
      const std::size_t urow = g.index(r.i - r.gi, r.j - r.gj, 0);
      const Vec3& dv = *r.d_v;
      const Vec3& du = *r.d_u;
      const double vx = coord[r.i], vy = coord[r.j];
      std::array<double, K> row{};
      for (int k = r.klo; k < r.khi; ++k) {
        if (r.mask_u[k] == 0.0 || r.mask_v[k] == 0.0) continue;
        const double fv = f[vrow + k], fu = f[urow + k - r.gk];
        const double fu1 = r.xu[k], fv1 = r.yv[k];
        const double G = fu1 * fv1 * (1.0 + th * (fu + fv)) - fu * fv * (1.0 + th * (fu1 + fv1));
        const double vz = coord[k];
        const auto p_v1 = phi(Vec3{vx + dv[0], vy + dv[1], vz + dv[2]}, fv1);
        const auto p_u1 = phi(Vec3{vx + du[0], vy + du[1], vz + du[2]}, fu1);
        const auto& p_v = lattice_phi[vrow + k];
        const auto& p_u = lattice_phi[urow + k - r.gk];
        const double c = 0.25 * r.q * G;
        for (std::size_t t = 0; t < K; ++t) row[t] += c * (p_v[t] + p_u[t] - p_u1[t] - p_v1[t]);
      }
      for (std::size_t t = 0; t < K; ++t) acc[t * rows + std::size_t(r.i) * n + std::size_t(r.j)] += row[t];
    };
  });
  std::array<double, K> out{};
  for (std::size_t t = 0; t < K; ++t) {
    double s = 0.0;
    for (std::size_t m = 0; m < rows; ++m) s += acc[t * rows + m];
    out[t] = s * g.cell_volume();
  }
  return out;
}

template <class Phi>
double weak_form(const DistributionField& F, const CollisionGeometry& geom, Phi phi) {
  return weak_form_multi<1>(F, geom, [&](const Vec3& p, double fval) { return std::array<double, 1>{phi(p, fval)}; })[0];
}

// Weak forms of the five collision invariants.
inline std::array<double, 5> weak_form_invariants(const DistributionField& F, const CollisionGeometry& geom) {
  return weak_form_multi<5>(F, geom, [](const Vec3& p, double) { return invariants(p); });
}

// Rounding scale of the invariant weak forms: an upper bound on the magnitude of the summed
// terms. The field-independent part is 1/4 sum q (|phi(v)| + |phi(u)| + |phi(u')| + |phi(v')|).
inline std::array<double, 5> weak_form_invariants_weights(const CollisionGeometry& geom) {
  DistributionField one(std::vector<double>(geom.grid.size(), 1.0), 0);
  const VelocityGrid& g = geom.grid;
  const std::size_t N = g.size();
  std::vector<double> acc(5 * N, 0.0);
  std::vector<double> PX = detail::padded_source(one.values, g, Envelope::plain());
  CollisionGeometry plain = geom;
  plain.envelope = Envelope::plain();
  std::vector<double> coord(g.n);
  for (int i = 0; i < g.n; ++i) coord[i] = g.coord(i);
  detail::parallel_sweep(plain, PX, PX, [&]() {
    return [&](const detail::RowInfo& r) {
      if (r.mask_u_row == 0.0 || r.mask_v_row == 0.0) return;
      const std::size_t vrow = g.index(r.i, r.j, 0);
      const Vec3& dv = *r.d_v;
      const Vec3& du = *r.d_u;
      const double vx = coord[r.i], vy = coord[r.j];
      const double ux = coord[r.i - r.gi], uy = coord[r.j - r.gj];
      for (int k = r.klo; k < r.khi; ++k) {
        if (r.mask_u[k] == 0.0 || r.mask_v[k] == 0.0) continue;
        const double vz = coord[k], uz = coord[k - r.gk];
        auto a = invariants({vx, vy, vz});
        auto b = invariants({ux, uy, uz});
        auto c = invariants({vx + du[0], vy + du[1], vz + du[2]});
        auto d = invariants({vx + dv[0], vy + dv[1], vz + dv[2]});
        for (int t = 0; t < 5; ++t)
          acc[t * N + vrow + k] += 0.25 * r.q * (std::abs(a[t]) + std::abs(b[t]) + std::abs(c[t]) + std::abs(d[t]));
      }
    };
  });
  std::array<double, 5> out{};
  for (int t = 0; t < 5; ++t) {
    double s = 0.0;
    for (std::size_t m = 0; m < N; ++m) s += acc[t * N + m];
    out[t] = s * g.cell_volume();
  }
  return out;
}

// Weights times a bound on |G| for a field bounded by fmax.
inline std::array<double, 5> weak_form_invariants_scale(const std::array<double, 5>& weights, int theta, double fmax) {
  const double gbound = fmax * fmax * (1.0 + 2.0 * std::abs(theta) * fmax) * 2.0;
  std::array<double, 5> out = weights;
  for (double& x : out) x *= gbound;
  return out;
}

inline std::array<double, 5> weak_form_invariants_scale(const CollisionGeometry& geom, int theta, double fmax) {
  return weak_form_invariants_scale(weak_form_invariants_weights(geom), theta, fmax);
}

inline void require_entropy_domain(const DistributionField& F, const VelocityGrid& g) {
  for (std::size_t n = 0; n < F.size(); ++n) {
    double f = F.values[n];
    auto t = g.triple(n);
    std::string site = "(" + std::to_string(t[0]) + "," + std::to_string(t[1]) + "," + std::to_string(t[2]) + ")";
    if (!(f > 0.0)) throw DomainError("entropy needs F > 0; violated at lattice site " + site);
    if (F.theta == -1 && !(f < 1.0)) throw DomainError("fermion entropy needs F < 1; violated at lattice site " + site);
  }
}

// S[F] = F ln(1/F) - theta (1 + theta F) ln(1/(1 + theta F)), integrated over the lattice.
inline double entropy(const DistributionField& F, const VelocityGrid& g) {
  if (F.size() != g.size()) throw DimensionError("field size does not match velocity grid");
  require_entropy_domain(F, g);
  const double th = F.theta;
  double s = 0.0;
  for (double f : F.values) {
    double term = -f * std::log(f);
    if (th != 0.0) {
      double e = 1.0 + th * f;
      term += th * e * std::log(e);
    }
    s += term;
  }
  return s * g.cell_volume();
}

// 1/4 sum q Y (A - 1) ln A >= 0 with Y = F F_* (1 + theta F') (1 + theta F'_*), over collisions
// whose post-collision velocities stay in the lattice hull.
inline double entropy_dissipation(const DistributionField& F, const CollisionGeometry& geom) {
  geom.check(F);
  require_entropy_domain(F, geom.grid);
  const VelocityGrid& g = geom.grid;
  const std::size_t N = g.size();
  const double th = F.theta;
  const auto& f = F.values;
  std::vector<double> acc(N, 0.0);
  std::vector<double> PX = detail::padded_source(f, g, geom.envelope);
  detail::parallel_sweep(geom, PX, PX, [&]() {
    return [&](const detail::RowInfo& r) {
      if (r.mask_u_row == 0.0 || r.mask_v_row == 0.0) return;
      const std::size_t vrow = g.index(r.i, r.j, 0);
      const std::size_t urow = g.index(r.i - r.gi, r.j - r.gj, 0);
      for (int k = r.klo; k < r.khi; ++k) {
        if (r.mask_u[k] == 0.0 || r.mask_v[k] == 0.0) continue;
        const double fv = f[vrow + k], fu = f[urow + k - r.gk];
        const double fu1 = r.xu[k], fv1 = r.yv[k];
        const double num = fu1 * fv1 * (1.0 + th * fu) * (1.0 + th * fv);
        const double den = fu * fv * (1.0 + th * fu1) * (1.0 + th * fv1);
        if (!(num > 0.0) || !(den > 0.0)) continue;
        acc[vrow + k] += 0.25 * r.q * (num - den) * (std::log(num) - std::log(den));
      }
    };
  });
  double s = 0.0;
  for (double a : acc) s += a;
  return s * g.cell_volume();
}

}  // namespace qboltz
