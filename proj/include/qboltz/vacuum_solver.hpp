#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "collision.hpp"
#include "errors.hpp"
#include "geometry.hpp"

namespace qboltz {

// Near-vacuum problem in transported variables F#(t,x,v) = F(t,x+tv,v) on a finite box in x,
// a velocity lattice in v and uniform time nodes on [0, t_end].
struct VacuumOptions {
  int theta = 1;
  double beta = 0.5;
  int space_dim = 1;
  int nx = 17;
  double box_radius = 7.0;
  int nv = 7;
  double velocity_radius = 4.0;
  int n_polar = 2;
  int n_azimuth = 4;
  double t_end = 0.5;
  int nt = 10;
  double r0 = 0.2;
  double bc_margin = 1.25;
  int k_max = 40;
  double tolerance = 1e-12;
  double max_physical_cells = 20000;
};

struct VacuumBox {
  int dim = 1;
  int n = 17;
  double radius = 7.0;

  VacuumBox() = default;
  VacuumBox(int d, int points, double r) : dim(d), n(points), radius(r) {
    if (d != 1 && d != 3) throw ContractError("vacuum box dimension must be 1 or 3");
    if (n < 2 || !(r > 0.0)) throw ContractError("vacuum box needs n >= 2 and radius > 0");
  }

  double spacing() const { return 2.0 * radius / (n - 1); }
  double coord(int i) const { return -radius + i * spacing(); }
  std::size_t cells() const { return dim == 1 ? std::size_t(n) : std::size_t(n) * n * n; }
  std::array<int, 3> triple(std::size_t c) const {
    if (dim == 1) return {int(c), 0, 0};
    return {int(c / (std::size_t(n) * n)), int((c / n) % n), int(c % n)};
  }
  Vec3 point(std::size_t c) const {
    auto t = triple(c);
    if (dim == 1) return {coord(t[0]), 0.0, 0.0};
    return {coord(t[0]), coord(t[1]), coord(t[2])};
  }
  bool on_face(std::size_t c) const {
    auto t = triple(c);
    for (int a = 0; a < dim; ++a)
      if (t[a] == 0 || t[a] == n - 1) return true;
    return false;
  }
  // Same spacing and nodes, extended by pad nodes on every side.
  VacuumBox padded(int pad) const { return VacuumBox(dim, n + 2 * pad, radius + pad * spacing()); }
};

struct WeightedVacuumState {
  std::vector<double> values;  // [cell * Nv + velocity]
  double beta = 0.5;
  double t = 0.0;
};

// One state per time node.
using VacuumPath = std::vector<WeightedVacuumState>;

struct VacuumContext {
  VacuumOptions opt;
  VelocityGrid vgrid;
  VacuumBox box;
  CollisionGeometry geom;
  std::vector<double> times;

  explicit VacuumContext(const VacuumOptions& o)
      : opt(o), vgrid(o.nv, o.velocity_radius), box(o.space_dim, o.nx, o.box_radius),
        geom(vgrid, o.n_polar, o.n_azimuth, Envelope::maxwellian(gaussian_envelope(o.beta))) {
    if (o.theta < -1 || o.theta > 1) throw ParameterError("statistics flag must be -1, 0 or +1");
    if (!(o.beta > 0.0)) throw ParameterError("weight exponent beta must be positive");
    if (o.nt < 1 || !(o.t_end > 0.0)) throw ConfigError("vacuum time grid needs nt >= 1 and t_end > 0");
    if (!(o.r0 > 0.0)) throw ConfigError("vacuum.r0 must be positive");
    if (!(o.bc_margin >= 1.0)) throw ConfigError("vacuum.bc_margin must be at least 1");
    if (o.k_max < 1) throw ConfigError("vacuum.k_max must be at least 1");
    times.resize(o.nt + 1);
    for (int m = 0; m <= o.nt; ++m) times[m] = o.t_end * m / o.nt;
    double cost = 0.0;
    for (double t : times) cost += double(physical_box(t).cells());
    if (cost > o.max_physical_cells)
      throw ContractError("vacuum lattice needs " + std::to_string(long(cost)) +
                          " physical-cell collision evaluations per sweep (limit " +
                          std::to_string(long(o.max_physical_cells)) + ")");
  }

  static QuantumMaxwellianParams gaussian_envelope(double beta) {
    QuantumMaxwellianParams p;
    p.theta = 0;
    p.a = 0.0;
    p.c = -beta;
    return p;
  }

  double beta() const { return opt.beta; }
  double dt() const { return opt.t_end / opt.nt; }
  std::size_t nodes() const { return times.size(); }
  std::size_t velocity_size() const { return vgrid.size(); }
  std::size_t slice_size() const { return box.cells() * vgrid.size(); }
  double weight(const Vec3& x, const Vec3& v) const { return std::exp(opt.beta * (norm2(x) + norm2(v))); }

  // Physical positions y = x + t v needed at time t, on nodes aligned with the box.
  int pad(double t) const { return int(std::ceil(t * vgrid.radius / box.spacing() - 1e-9)); }
  VacuumBox physical_box(double t) const { return box.padded(pad(t)); }

  void check(const WeightedVacuumState& s) const {
    if (s.values.size() != slice_size())
      throw DimensionError("vacuum state has " + std::to_string(s.values.size()) + " values, lattice has " +
                           std::to_string(slice_size()));
  }
  void check(const VacuumPath& p) const {
    if (p.size() != nodes())
      throw DimensionError("vacuum path has " + std::to_string(p.size()) + " time nodes, grid has " +
                           std::to_string(nodes()));
    for (const auto& s : p) check(s);
  }
};

template <class Fn>
WeightedVacuumState sample_vacuum_state(const VacuumContext& ctx, Fn&& fn, double t = 0.0) {
  WeightedVacuumState s{std::vector<double>(ctx.slice_size()), ctx.beta(), t};
  const std::size_t Nv = ctx.velocity_size();
  for (std::size_t c = 0; c < ctx.box.cells(); ++c) {
    const Vec3 x = ctx.box.point(c);
    for (std::size_t v = 0; v < Nv; ++v) s.values[c * Nv + v] = fn(x, ctx.vgrid.point(v));
  }
  return s;
}

// c exp(-beta (|x|^2 + |v|^2))
inline WeightedVacuumState gaussian_vacuum_state(const VacuumContext& ctx, double amplitude) {
  const double b = ctx.beta();
  return sample_vacuum_state(ctx, [&](const Vec3& x, const Vec3& v) { return amplitude * std::exp(-b * (norm2(x) + norm2(v))); });
}

inline VacuumPath constant_path(const WeightedVacuumState& s, const VacuumContext& ctx) {
  ctx.check(s);
  VacuumPath p(ctx.nodes(), s);
  for (std::size_t m = 0; m < p.size(); ++m) p[m].t = ctx.times[m];
  return p;
}

inline VacuumPath zero_path(const VacuumContext& ctx) {
  return constant_path(WeightedVacuumState{std::vector<double>(ctx.slice_size(), 0.0), ctx.beta(), 0.0}, ctx);
}

inline double weighted_norm(const WeightedVacuumState& s, const VacuumContext& ctx) {
  ctx.check(s);
  const std::size_t Nv = ctx.velocity_size();
  double best = 0.0;
  for (std::size_t c = 0; c < ctx.box.cells(); ++c) {
    const Vec3 x = ctx.box.point(c);
    for (std::size_t v = 0; v < Nv; ++v) {
      const double f = s.values[c * Nv + v];
      if (!std::isfinite(f)) throw NumericError("non-finite vacuum state value");
      if (f != 0.0) best = std::max(best, ctx.weight(x, ctx.vgrid.point(v)) * std::abs(f));
    }
  }
  return best;
}

inline double weighted_norm(const VacuumPath& p, const VacuumContext& ctx) {
  double best = 0.0;
  for (const auto& s : p) best = std::max(best, weighted_norm(s, ctx));
  return best;
}

inline VacuumPath path_difference(const VacuumPath& a, const VacuumPath& b) {
  VacuumPath d = a;
  for (std::size_t m = 0; m < a.size(); ++m)
    for (std::size_t n = 0; n < a[m].values.size(); ++n) d[m].values[n] -= b[m].values[n];
  return d;
}

inline double weighted_distance(const VacuumPath& a, const VacuumPath& b, const VacuumContext& ctx) {
  ctx.check(a);
  ctx.check(b);
  return weighted_norm(path_difference(a, b), ctx);
}

// ---------------------------------------------------------------------------------------------
// Characteristics

struct PhysicalSlice {
  VacuumBox box;
  double t = 0.0;
  std::vector<double> values;  // [cell * Nv + velocity]
};

namespace detail {

struct BoxStencil {
  int count = 0;
  std::size_t cell[8];
  double weight[8];
};

// Multilinear weights of x on the box nodes; false strictly outside the box.
inline bool box_stencil(const VacuumBox& b, const Vec3& x, BoxStencil& s) {
  const double h = b.spacing();
  int base[3] = {0, 0, 0};
  double fr[3] = {0.0, 0.0, 0.0};
  for (int a = 0; a < b.dim; ++a) {
    const double r = (x[a] + b.radius) / h;
    if (!(r >= -1e-9 && r <= b.n - 1 + 1e-9)) return false;
    base[a] = std::clamp(int(std::floor(r)), 0, b.n - 2);
    fr[a] = std::clamp(r - base[a], 0.0, 1.0);
  }
  if (b.dim == 1) {
    s.count = 2;
    s.cell[0] = std::size_t(base[0]);
    s.cell[1] = std::size_t(base[0] + 1);
    s.weight[0] = 1.0 - fr[0];
    s.weight[1] = fr[0];
    return true;
  }
  s.count = 8;
  int c = 0;
  for (int di = 0; di < 2; ++di)
    for (int dj = 0; dj < 2; ++dj)
      for (int dk = 0; dk < 2; ++dk, ++c) {
        s.cell[c] = (std::size_t(base[0] + di) * b.n + (base[1] + dj)) * b.n + (base[2] + dk);
        s.weight[c] = (di ? fr[0] : 1.0 - fr[0]) * (dj ? fr[1] : 1.0 - fr[1]) * (dk ? fr[2] : 1.0 - fr[2]);
      }
  return true;
}

inline Vec3 spatial_part(const Vec3& v, int dim) { return dim == 1 ? Vec3{v[0], 0.0, 0.0} : v; }

}  // namespace detail

// F(t, y, v) = F#(t, y - t v, v) on the padded physical box. Values between transported nodes
// use linear interpolation of exp(beta |x|^2) F#, so Gaussians in x are reproduced exactly;
// positions outside the transported box contribute 0.
inline PhysicalSlice to_physical(const WeightedVacuumState& s, const VacuumContext& ctx) {
  ctx.check(s);
  const double t = s.t, beta = ctx.beta();
  const std::size_t Nv = ctx.velocity_size();
  std::vector<double> scaled(s.values.size());
  for (std::size_t c = 0; c < ctx.box.cells(); ++c) {
    const double e = std::exp(beta * norm2(ctx.box.point(c)));
    for (std::size_t v = 0; v < Nv; ++v) scaled[c * Nv + v] = e * s.values[c * Nv + v];
  }
  PhysicalSlice out{ctx.physical_box(t), t, {}};
  out.values.assign(out.box.cells() * Nv, 0.0);
  detail::BoxStencil st;
  for (std::size_t j = 0; j < out.box.cells(); ++j) {
    const Vec3 y = out.box.point(j);
    for (std::size_t v = 0; v < Nv; ++v) {
      const Vec3 x = y - t * detail::spatial_part(ctx.vgrid.point(v), ctx.box.dim);
      if (!detail::box_stencil(ctx.box, x, st)) continue;
      double acc = 0.0;
      for (int a = 0; a < st.count; ++a) acc += st.weight[a] * scaled[st.cell[a] * Nv + v];
      out.values[j * Nv + v] = std::exp(-beta * norm2(x)) * acc;
    }
  }
  return out;
}

// F#(t, x, v) = F(t, x + t v, v). With the envelope, interpolation in y acts on
// exp(beta |y - t v|^2) F, which suits quantities carried by the data (F, gain); bounded
// rates use plain linear interpolation.
inline WeightedVacuumState to_transported(const PhysicalSlice& p, const VacuumContext& ctx, bool envelope = true) {
  const double t = p.t, beta = ctx.beta();
  const std::size_t Nv = ctx.velocity_size();
  if (p.values.size() != p.box.cells() * Nv) throw DimensionError("physical slice size does not match its box");
  WeightedVacuumState out{std::vector<double>(ctx.slice_size(), 0.0), beta, t};
  detail::BoxStencil st;
  for (std::size_t c = 0; c < ctx.box.cells(); ++c) {
    const Vec3 x = ctx.box.point(c);
    for (std::size_t v = 0; v < Nv; ++v) {
      const Vec3 shift = t * detail::spatial_part(ctx.vgrid.point(v), ctx.box.dim);
      const Vec3 y = x + shift;
      if (!detail::box_stencil(p.box, y, st)) throw ContractError("physical box does not cover x + t v");
      double acc = 0.0;
      for (int a = 0; a < st.count; ++a) {
        const double f = p.values[st.cell[a] * Nv + v];
        if (f == 0.0) continue;
        acc += st.weight[a] * f * (envelope ? std::exp(beta * norm2(p.box.point(st.cell[a]) - shift)) : 1.0);
      }
      out.values[c * Nv + v] = envelope ? std::exp(-beta * norm2(x)) * acc : acc;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Collision terms

// Q_gain[F,F;H](v) = sum q F(u') F(v') (1 + theta H(u) + theta H(v))
inline std::vector<double> velocity_gain(const std::vector<double>& F, const std::vector<double>& H, int theta,
                                         const CollisionGeometry& geom) {
  const double th = theta;
  return strong_integral(geom, F, F, H, H, [th](double fu1, double fv1, double hu, double hv, double, double) {
    return fu1 * fv1 * (1.0 + th * (hu + hv));
  });
}

// R[G,H](v) = sum q G(u) (1 + theta H(u') + theta H(v'))
inline std::vector<double> velocity_rate(const std::vector<double>& G, const std::vector<double>& H, int theta,
                                         const CollisionGeometry& geom) {
  const double th = theta;
  return strong_integral(geom, H, H, G, G, [th](double hu1, double hv1, double gu, double, double, double) {
    return gu * (1.0 + th * (hu1 + hv1));
  });
}

namespace detail {

enum class Term { gain, rate };

// Evaluates gain#[A,A;B] or R#[A,B] at every time node through the physical frame.
inline VacuumPath transported_term(Term term, const VacuumPath& A, const VacuumPath& B, const VacuumContext& ctx) {
  ctx.check(A);
  ctx.check(B);
  const std::size_t Nv = ctx.velocity_size();
  const int th = ctx.opt.theta;
  VacuumPath out(A.size());
  std::vector<double> a(Nv), b(Nv);
  for (std::size_t m = 0; m < A.size(); ++m) {
    WeightedVacuumState sa = A[m], sb = B[m];
    sa.t = sb.t = ctx.times[m];
    const PhysicalSlice pa = to_physical(sa, ctx);
    const PhysicalSlice pb = (&A == &B) ? pa : to_physical(sb, ctx);
    PhysicalSlice res{pa.box, pa.t, std::vector<double>(pa.values.size(), 0.0)};
    for (std::size_t j = 0; j < pa.box.cells(); ++j) {
      bool any = false;
      for (std::size_t v = 0; v < Nv; ++v) {
        a[v] = pa.values[j * Nv + v];
        b[v] = pb.values[j * Nv + v];
        any = any || a[v] != 0.0;
      }
      if (!any) continue;
      const std::vector<double> r = term == Term::gain ? velocity_gain(a, b, th, ctx.geom) : velocity_rate(a, b, th, ctx.geom);
      std::copy(r.begin(), r.end(), res.values.begin() + std::ptrdiff_t(j * Nv));
    }
    out[m] = to_transported(res, ctx, term == Term::gain);
  }
  return out;
}

}  // namespace detail

inline VacuumPath transported_gain(const VacuumPath& F, const VacuumPath& H, const VacuumContext& ctx) {
  return detail::transported_term(detail::Term::gain, F, H, ctx);
}

inline VacuumPath transported_rate(const VacuumPath& G, const VacuumPath& H, const VacuumContext& ctx) {
  return detail::transported_term(detail::Term::rate, G, H, ctx);
}

// I(t_m) = trapezoid sum of Q over [0, t_m].
inline VacuumPath cumulative_integral(const VacuumPath& Q, const VacuumContext& ctx) {
  ctx.check(Q);
  VacuumPath out = Q;
  const double a = 0.5 * ctx.dt();
  std::fill(out[0].values.begin(), out[0].values.end(), 0.0);
  for (std::size_t m = 0; m + 1 < Q.size(); ++m)
    for (std::size_t n = 0; n < Q[m].values.size(); ++n)
      out[m + 1].values[n] = out[m].values[n] + a * (Q[m].values[n] + Q[m + 1].values[n]);
  return out;
}

// Largest |F#| on the faces of the box relative to the largest |F#| anywhere.
inline double boundary_weight(const VacuumPath& F, const VacuumContext& ctx) {
  ctx.check(F);
  const std::size_t Nv = ctx.velocity_size();
  double face = 0.0, all = 0.0;
  for (const auto& s : F)
    for (std::size_t c = 0; c < ctx.box.cells(); ++c) {
      const bool edge = ctx.box.on_face(c);
      for (std::size_t v = 0; v < Nv; ++v) {
        const double f = std::abs(s.values[c * Nv + v]);
        all = std::max(all, f);
        if (edge) face = std::max(face, f);
      }
    }
  return all > 0.0 ? face / all : 0.0;
}

inline constexpr double kBoundaryFlag = 1e-8;

struct MildIntegrals {
  VacuumPath gain;  // int_0^t Q#_gain[F,F;F]
  VacuumPath loss;  // int_0^t F# R#[F,F]
  double boundary_weight = 0.0;
  bool boundary_flag = false;
};

inline MildIntegrals mild_integrals(const VacuumPath& F, const VacuumContext& ctx) {
  MildIntegrals out;
  out.gain = cumulative_integral(transported_gain(F, F, ctx), ctx);
  VacuumPath loss = transported_rate(F, F, ctx);
  for (std::size_t m = 0; m < F.size(); ++m)
    for (std::size_t n = 0; n < F[m].values.size(); ++n) loss[m].values[n] *= F[m].values[n];
  out.loss = cumulative_integral(loss, ctx);
  out.boundary_weight = boundary_weight(F, ctx);
  out.boundary_flag = out.boundary_weight > kBoundaryFlag;
  return out;
}

inline VacuumPath mild_gain_integral(const VacuumPath& F, const VacuumContext& ctx) {
  return cumulative_integral(transported_gain(F, F, ctx), ctx);
}

inline VacuumPath mild_loss_integral(const VacuumPath& F, const VacuumContext& ctx) {
  VacuumPath loss = transported_rate(F, F, ctx);
  for (std::size_t m = 0; m < F.size(); ++m)
    for (std::size_t n = 0; n < F[m].values.size(); ++n) loss[m].values[n] *= F[m].values[n];
  return cumulative_integral(loss, ctx);
}

// ---------------------------------------------------------------------------------------------
// Fixed point of F# = F0 + int_0^t Q#[F,F;F]

// Returns F0 + int_0^t (gain - loss) along the path F.
inline VacuumPath fixed_point_step(const VacuumPath& F, const WeightedVacuumState& F0, const VacuumContext& ctx) {
  ctx.check(F0);
  const double n0 = weighted_norm(F0, ctx);
  if (n0 > 0.5 * ctx.opt.r0)
    throw ContractError("initial data norm " + std::to_string(n0) + " exceeds R0/2 = " + std::to_string(0.5 * ctx.opt.r0));
  VacuumPath Q = transported_gain(F, F, ctx);
  const VacuumPath R = transported_rate(F, F, ctx);
  for (std::size_t m = 0; m < F.size(); ++m)
    for (std::size_t n = 0; n < F[m].values.size(); ++n) Q[m].values[n] -= F[m].values[n] * R[m].values[n];
  VacuumPath out = cumulative_integral(Q, ctx);
  for (auto& s : out)
    for (std::size_t n = 0; n < s.values.size(); ++n) s.values[n] += F0.values[n];
  return out;
}

// Largest ratio d[k+1] / d[k] among entries above floor; Volterra-type iterations converge
// faster than geometrically, so this is the conservative per-step factor.
inline double worst_ratio(const std::vector<double>& d, double floor) {
  double r = 0.0;
  for (std::size_t k = 0; k + 1 < d.size(); ++k)
    if (d[k] > floor && d[k + 1] > floor) r = std::max(r, d[k + 1] / d[k]);
  return r;
}

struct PicardReport {
  VacuumPath solution;
  std::vector<double> differences;  // weighted norms of F^{k+1} - F^k
  double contraction_factor = 0.0;
  bool contracting = true;
  double solution_norm = 0.0;
  bool within_ball = true;
  int iterations = 0;
  std::string message;
};

inline PicardReport picard_iteration(const WeightedVacuumState& F0, const VacuumContext& ctx) {
  PicardReport r;
  VacuumPath F = constant_path(F0, ctx);
  const double scale = std::max(weighted_norm(F0, ctx), 1e-300);
  for (int k = 0; k < ctx.opt.k_max; ++k) {
    VacuumPath next = fixed_point_step(F, F0, ctx);
    const double d = weighted_distance(next, F, ctx);
    r.differences.push_back(d);
    F = std::move(next);
    r.iterations = k + 1;
    if (!std::isfinite(d) || d > 1e6 * scale) break;
    if (d <= ctx.opt.tolerance * scale) break;
  }
  r.solution = std::move(F);
  r.solution_norm = weighted_norm(r.solution, ctx);
  r.within_ball = r.solution_norm <= ctx.opt.r0;
  r.contraction_factor = worst_ratio(r.differences, 1e-3 * ctx.opt.tolerance * scale);
  r.contracting = r.contraction_factor < 1.0 && std::isfinite(r.differences.back());
  if (!r.contracting)
    r.message = "fixed-point map is not contracting (factor " + std::to_string(r.contraction_factor) + ", beta " +
                std::to_string(ctx.beta()) + ", |F0| " + std::to_string(scale) + ", R0 " + std::to_string(ctx.opt.r0) +
                "); data or R0 outside the small-data regime";
  return r;
}

// ---------------------------------------------------------------------------------------------
// Time-integrated dispersion

struct DispersionReport {
  int samples = 0;
  double max_ratio_corrected = 0.0;  // integral * |v-u| / sqrt(pi/beta)
  double max_ratio_printed = 0.0;    // integral * |v-u| / sqrt(beta/pi)
  int printed_failures = 0;
  bool corrected_holds = true;
  bool printed_holds = true;
  double identity_residual = 0.0;          // (v-u'), (v-v') form
  double printed_identity_residual = 0.0;  // (u-v'), (v-v') form, informational
  std::string verified_constant = "sqrt(pi/beta)";
};

// int_0^inf exp(-beta |x + tau z|^2) dtau by composite 8-point Gauss-Legendre on the support.
inline double gaussian_time_integral(const Vec3& x, const Vec3& z, double beta) {
  const double zz = norm2(z);
  if (!(zz > 0.0)) throw DomainError("time integral diverges for v = u");
  static const auto gl = gauss_legendre(8);
  const double sigma = 1.0 / std::sqrt(beta * zz);
  const double center = -dot(x, z) / zz;
  const double hi = std::max(center, 0.0) + 12.0 * sigma;
  const int panels = std::min(4000, int(std::ceil(hi / (0.5 * sigma))));
  const double w = hi / panels;
  double acc = 0.0;
  for (int p = 0; p < panels; ++p) {
    const double mid = (p + 0.5) * w;
    for (int i = 0; i < 8; ++i) {
      const double tau = mid + 0.5 * w * gl.first[i];
      acc += 0.5 * w * gl.second[i] * std::exp(-beta * norm2(x + tau * z));
    }
  }
  return acc;
}

inline DispersionReport dispersion_checks(int samples, std::uint64_t seed = 1) {
  if (samples < 1) throw ContractError("dispersion checks need at least one sample");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> box(-3.0, 3.0), tau_d(0.0, 5.0), logb(std::log(0.25), std::log(4.0));
  std::normal_distribution<double> gauss;
  DispersionReport r;
  r.samples = samples;
  for (int s = 0; s < samples; ++s) {
    const Vec3 x{box(rng), box(rng), box(rng)}, v{box(rng), box(rng), box(rng)}, u{box(rng), box(rng), box(rng)};
    Vec3 om{gauss(rng), gauss(rng), gauss(rng)};
    om = (1.0 / std::sqrt(norm2(om))) * om;
    const double tau = tau_d(rng), beta = std::exp(logb(rng));
    const auto [up, vp] = post_collision(u, v, om);

    const double rhs = norm2(x) + norm2(x + tau * (v - u));
    const double lhs = norm2(x + tau * (v - up)) + norm2(x + tau * (v - vp));
    const double printed = norm2(x + tau * (u - vp)) + norm2(x + tau * (v - vp));
    const double sc = std::max(1.0, rhs);
    r.identity_residual = std::max(r.identity_residual, std::abs(lhs - rhs) / sc);
    r.printed_identity_residual = std::max(r.printed_identity_residual, std::abs(printed - rhs) / sc);

    const Vec3 z = v - u;
    const double len = std::sqrt(norm2(z));
    const double I = gaussian_time_integral(x, z, beta);
    const double rc = I * len / std::sqrt(std::numbers::pi / beta);
    const double rp = I * len / std::sqrt(beta / std::numbers::pi);
    r.max_ratio_corrected = std::max(r.max_ratio_corrected, rc);
    r.max_ratio_printed = std::max(r.max_ratio_printed, rp);
    if (rp > 1.0) ++r.printed_failures;
  }
  r.corrected_holds = r.max_ratio_corrected <= 1.0 + 1e-12;
  r.printed_holds = r.printed_failures == 0;
  return r;
}

// ---------------------------------------------------------------------------------------------
// Upper start profile: fixed point W = psi + margin * S[W] in the velocity variable, where S
// bounds the time-integrated gain of u0#(x, v) = exp(-beta |x|^2) W(v) divided by exp(-beta |x|^2).

struct UpperProfile {
  std::vector<double> w;
  std::vector<double> psi;
  double margin = 1.0;
  double residual = 0.0;
  double contraction = 0.0;
  int iterations = 0;
};

// psi(v) = max_x exp(beta |x|^2) |F0(x, v)|
inline std::vector<double> sup_profile(const WeightedVacuumState& F0, const VacuumContext& ctx) {
  ctx.check(F0);
  const std::size_t Nv = ctx.velocity_size();
  std::vector<double> psi(Nv, 0.0);
  for (std::size_t c = 0; c < ctx.box.cells(); ++c) {
    const double e = std::exp(ctx.beta() * norm2(ctx.box.point(c)));
    for (std::size_t v = 0; v < Nv; ++v) psi[v] = std::max(psi[v], e * std::abs(F0.values[c * Nv + v]));
  }
  return psi;
}

namespace detail {

// sup over scalar x of int_0^T exp(-beta (alpha (x + tau z)^2 - tau^2 (z^2 - d^2) / 2)) dtau.
inline double dispersion_sup(double z, double d, double alpha, double beta, double T) {
  static const auto gl = gauss_legendre(8);
  z = std::abs(z);
  const double grow = 0.5 * (z * z - d * d);
  const int panels = std::max(2, int(std::ceil(4.0 * T * std::sqrt(alpha * beta) * z)));
  const double w = T / panels;
  auto J = [&](double x) {
    double acc = 0.0;
    for (int p = 0; p < panels; ++p)
      for (int i = 0; i < 8; ++i) {
        const double tau = (p + 0.5) * w + 0.5 * w * gl.first[i];
        const double y = x + tau * z;
        acc += 0.5 * w * gl.second[i] * std::exp(-beta * (alpha * y * y - tau * tau * grow));
      }
    return acc;
  };
  const double lo = -T * z - 2.0 / std::sqrt(beta), hi = 2.0 / std::sqrt(beta);
  const int nscan = 48;
  double best = -1.0, bx = 0.0;
  for (int k = 0; k <= nscan; ++k) {
    const double x = lo + (hi - lo) * k / nscan;
    const double v = J(x);
    if (v > best) best = v, bx = x;
  }
  double a = bx - (hi - lo) / nscan, b = bx + (hi - lo) / nscan;
  const double r = 0.5 * (std::sqrt(5.0) - 1.0);
  double c = b - r * (b - a), e = a + r * (b - a), fc = J(c), fe = J(e);
  for (int it = 0; it < 40; ++it) {
    if (fc > fe) {
      b = e, e = c, fe = fc, c = b - r * (b - a), fc = J(c);
    } else {
      a = c, c = e, fc = fe, e = a + r * (b - a), fe = J(e);
    }
  }
  return std::max({best, fc, fe});
}

// E(p) * trilinear(W / E) with the Gaussian velocity envelope of the context.
inline double envelope_interpolate(const std::vector<double>& scaled, const VelocityGrid& g, const Vec3& p, double beta) {
  const double f = interpolate(scaled, g, p);
  return f == 0.0 ? 0.0 : std::exp(-beta * norm2(p)) * f;
}

}  // namespace detail

// Dispersion factors for every half-sphere node and lattice difference v - u:
// kappa_a = sup_x exp(beta |x|^2) int_0^T exp(-beta (|a_x|^2 + |b_x|^2) - (a-1) beta |x + tau (v-u)_x|^2) dtau,
// a_x = x + tau (v - u')_x, b_x = x + tau (v - v')_x, a = 1 for the quadratic and 2 for the cubic term.
struct DispersionTable {
  int n = 0;
  std::vector<SphereNode> half;
  std::vector<double> k1, k2;  // [(node * m + gi) * m + gj) * m + gk], m = 2n - 1
  std::size_t at(std::size_t node, int gi, int gj, int gk) const {
    const int m = 2 * n - 1;
    return ((node * m + std::size_t(gi + n - 1)) * m + std::size_t(gj + n - 1)) * m + std::size_t(gk + n - 1);
  }
};

inline DispersionTable dispersion_table(const VacuumContext& ctx) {
  DispersionTable t;
  const VelocityGrid& g = ctx.vgrid;
  const double h = g.spacing(), beta = ctx.beta(), T = ctx.opt.t_end;
  t.n = g.n;
  t.half = ctx.geom.sphere.half();
  const int m = 2 * g.n - 1;
  t.k1.assign(t.half.size() * m * m * m, 0.0);
  t.k2 = t.k1;
  for (std::size_t a = 0; a < t.half.size(); ++a) {
    const Vec3& om = t.half[a].omega;
    for (int gi = -(g.n - 1); gi < g.n; ++gi)
      for (int gj = -(g.n - 1); gj < g.n; ++gj)
        for (int gk = -(g.n - 1); gk < g.n; ++gk) {
          const Vec3 z{gi * h, gj * h, gk * h};
          const double s = dot(om, z);
          double zs, ds;
          if (ctx.box.dim == 1) {
            zs = z[0];
            ds = z[0] - 2.0 * om[0] * s;
          } else {
            zs = ds = std::sqrt(norm2(z));
          }
          const std::size_t k = t.at(a, gi, gj, gk);
          t.k1[k] = detail::dispersion_sup(zs, ds, 1.0, beta, T);
          t.k2[k] = detail::dispersion_sup(zs, ds, 2.0, beta, T);
        }
  }
  return t;
}

// psi + margin * S[W], S[W](v) = sum q W(u') W(v') (kappa_1 (1 + theta W(v)) + theta kappa_2 W(u)).
// For fermions the lower slot of the first upper step is l0 = 0, so theta enters as 0.
inline std::vector<double> upper_profile_map(const std::vector<double>& W, const std::vector<double>& psi,
                                             const VacuumContext& ctx, const DispersionTable& tab, double margin) {
  const VelocityGrid& g = ctx.vgrid;
  const double beta = ctx.beta(), h = g.spacing(), w3 = g.cell_volume();
  const double th = ctx.opt.theta == 1 ? 1.0 : 0.0;
  std::vector<double> scaled(W.size());
  for (std::size_t v = 0; v < W.size(); ++v) scaled[v] = W[v] * std::exp(beta * norm2(g.point(v)));
  std::vector<double> out(W.size());
  const long N = long(g.size());
#pragma omp parallel for schedule(static)
  for (long vi = 0; vi < N; ++vi) {
    const auto iv = g.triple(std::size_t(vi));
    const Vec3 v = g.point(std::size_t(vi));
    double acc = 0.0;
    for (std::size_t a = 0; a < tab.half.size(); ++a) {
      const Vec3& om = tab.half[a].omega;
      const double wt = tab.half[a].weight * w3;
      for (std::size_t ui = 0; ui < g.size(); ++ui) {
        const auto iu = g.triple(ui);
        const Vec3 z{(iv[0] - iu[0]) * h, (iv[1] - iu[1]) * h, (iv[2] - iu[2]) * h};
        const double s = dot(om, z);
        if (s == 0.0) continue;
        const Vec3 u = g.point(ui);
        const double wu1 = detail::envelope_interpolate(scaled, g, u + s * om, beta);
        if (wu1 == 0.0) continue;
        const double wv1 = detail::envelope_interpolate(scaled, g, v - s * om, beta);
        const std::size_t k = tab.at(a, iv[0] - iu[0], iv[1] - iu[1], iv[2] - iu[2]);
        acc += std::abs(s) * wt * wu1 * wv1 * (tab.k1[k] * (1.0 + th * W[std::size_t(vi)]) + th * tab.k2[k] * W[ui]);
      }
    }
    out[std::size_t(vi)] = psi[std::size_t(vi)] + margin * acc;
  }
  return out;
}

inline UpperProfile solve_upper_profile(const WeightedVacuumState& F0, const VacuumContext& ctx, double margin) {
  UpperProfile p;
  p.margin = margin;
  p.psi = sup_profile(F0, ctx);
  p.w = p.psi;
  const VelocityGrid& g = ctx.vgrid;
  auto wnorm = [&](const std::vector<double>& f) {
    double b = 0.0;
    for (std::size_t v = 0; v < f.size(); ++v) b = std::max(b, std::exp(ctx.beta() * norm2(g.point(v))) * std::abs(f[v]));
    return b;
  };
  const double psi_norm = wnorm(p.psi);
  if (psi_norm == 0.0) return p;
  const DispersionTable tab = dispersion_table(ctx);
  std::vector<double> diffs;
  for (int it = 0; it < 500; ++it) {
    std::vector<double> next = upper_profile_map(p.w, p.psi, ctx, tab, margin);
    std::vector<double> d(next.size());
    for (std::size_t v = 0; v < d.size(); ++v) d[v] = next[v] - p.w[v];
    const double nn = wnorm(next);
    if (!std::isfinite(nn) || nn > 1e3 * psi_norm)
      throw NumericError("upper profile iteration diverges (norm " + std::to_string(nn) +
                         "); data too large for the near-vacuum regime");
    diffs.push_back(wnorm(d));
    p.w = std::move(next);
    p.iterations = it + 1;
    p.residual = diffs.back() / nn;
    if (p.residual <= 1e-14) break;
  }
  p.contraction = worst_ratio(diffs, 1e-15 * psi_norm);
  return p;
}

inline VacuumPath upper_start_path(const UpperProfile& p, const VacuumContext& ctx) {
  const double b = ctx.beta();
  const std::size_t Nv = ctx.velocity_size();
  WeightedVacuumState s{std::vector<double>(ctx.slice_size()), b, 0.0};
  for (std::size_t c = 0; c < ctx.box.cells(); ++c) {
    const double e = std::exp(-b * norm2(ctx.box.point(c)));
    for (std::size_t v = 0; v < Nv; ++v) s.values[c * Nv + v] = e * p.w[v];
  }
  return constant_path(s, ctx);
}

// ---------------------------------------------------------------------------------------------
// Monotone brackets

struct BracketRecord {
  int k = 0;
  double sup_gap = 0.0;
  double weighted_gap = 0.0;
  double min_lower = 0.0;
  double max_upper = 0.0;
  bool sandwich_ok = true;
};

struct BracketPair {
  VacuumPath lower;
  VacuumPath upper;
  int k = 0;
};

struct BracketReport {
  int theta = 1;
  std::vector<BracketRecord> records;
  BracketPair pair;
  UpperProfile profile;
  bool beginning_condition = true;
  bool sandwich_ok = true;
  double contraction_factor = 0.0;
  std::string violation;  // first violating site, empty when none

  VacuumPath limit() const {
    VacuumPath m = pair.lower;
    for (std::size_t a = 0; a < m.size(); ++a)
      for (std::size_t n = 0; n < m[a].values.size(); ++n)
        m[a].values[n] = 0.5 * (pair.lower[a].values[n] + pair.upper[a].values[n]);
    return m;
  }
};

inline constexpr double kSandwichTolerance = 1e-10;

// Crank-Nicolson form of d/dt f + f R = G with f(0) = F0: the same trapezoid rule as the
// cumulative Duhamel integral, so a common limit of the brackets is a fixed point of the
// discrete map F0 + int (gain - loss).
inline VacuumPath integrating_factor_solve(const WeightedVacuumState& F0, const VacuumPath& R, const VacuumPath& G,
                                           const VacuumContext& ctx) {
  ctx.check(R);
  ctx.check(G);
  const double a = 0.5 * ctx.dt();
  VacuumPath out = constant_path(F0, ctx);
  for (std::size_t m = 0; m + 1 < out.size(); ++m) {
    const auto& f = out[m].values;
    auto& g = out[m + 1].values;
    for (std::size_t n = 0; n < f.size(); ++n) {
      const double r0 = a * R[m].values[n], r1 = a * R[m + 1].values[n];
      if (r0 > 1.0 || r1 < -1.0)
        throw StepSizeError("dt * loss rate / 2 = " + std::to_string(std::max(r0, -r1)) +
                            " leaves the monotone range; reduce the time step");
      g[n] = (f[n] * (1.0 - r0) + a * (G[m].values[n] + G[m + 1].values[n])) / (1.0 + r1);
    }
  }
  return out;
}

namespace detail {

// Checks lo_k <= lo_{k+1} <= up_{k+1} <= up_k with weighted tolerance; returns the first violation.
inline std::string sandwich_violation(const VacuumPath& lo0, const VacuumPath& lo1, const VacuumPath& up1,
                                      const VacuumPath& up0, const VacuumContext& ctx, double tol, int k) {
  const std::size_t Nv = ctx.velocity_size();
  const char* names[3] = {"lower_k <= lower_k+1", "lower_k+1 <= upper_k+1", "upper_k+1 <= upper_k"};
  for (std::size_t m = 0; m < lo0.size(); ++m)
    for (std::size_t c = 0; c < ctx.box.cells(); ++c) {
      const Vec3 x = ctx.box.point(c);
      for (std::size_t v = 0; v < Nv; ++v) {
        const std::size_t n = c * Nv + v;
        const double w = ctx.weight(x, ctx.vgrid.point(v));
        const double gaps[3] = {lo0[m].values[n] - lo1[m].values[n], lo1[m].values[n] - up1[m].values[n],
                                up1[m].values[n] - up0[m].values[n]};
        for (int i = 0; i < 3; ++i)
          if (w * gaps[i] > tol)
            return "iteration " + std::to_string(k + 1) + ": " + names[i] + " fails by " + std::to_string(w * gaps[i]) +
                   " (weighted) at t = " + std::to_string(ctx.times[m]) + ", cell " + std::to_string(c) +
                   ", velocity " + std::to_string(v);
      }
    }
  return {};
}

inline BracketRecord bracket_record(int k, const VacuumPath& lo, const VacuumPath& up, const VacuumContext& ctx) {
  BracketRecord r;
  r.k = k;
  r.min_lower = std::numeric_limits<double>::infinity();
  r.max_upper = -std::numeric_limits<double>::infinity();
  for (std::size_t m = 0; m < lo.size(); ++m)
    for (std::size_t n = 0; n < lo[m].values.size(); ++n) {
      r.sup_gap = std::max(r.sup_gap, std::abs(up[m].values[n] - lo[m].values[n]));
      r.min_lower = std::min(r.min_lower, lo[m].values[n]);
      r.max_upper = std::max(r.max_upper, up[m].values[n]);
    }
  r.weighted_gap = weighted_distance(up, lo, ctx);
  return r;
}

}  // namespace detail

// Boson (theta = +1):   lower: R#[u,u],  gain#[l,l;l];  upper: R#[l,l],  gain#[u,u;u].
// Fermion (theta = -1): lower: R#[u,l],  gain#[l,l;u];  upper: R#[l,u],  gain#[u,u;l].
// Starts from l0 = 0 and u0# = exp(-beta |x|^2) W(v) with W the upper profile; when the
// beginning condition fails on the lattice the profile margin is doubled, at most three times.
inline BracketReport bracket_iteration(const WeightedVacuumState& F0, const VacuumContext& ctx) {
  const int th = ctx.opt.theta;
  if (th == 0) throw ParameterError("bracket iteration is defined for theta = +1 or -1");
  ctx.check(F0);
  for (double f : F0.values) {
    if (f < 0.0) throw DomainError("bracket iteration needs F0 >= 0");
    if (th == -1 && f > 1.0) throw DomainError("fermion data must lie in [0, 1]");
  }
  const double n0 = weighted_norm(F0, ctx);
  if (n0 > 0.5 * ctx.opt.r0)
    throw ContractError("initial data norm " + std::to_string(n0) + " exceeds R0/2 = " + std::to_string(0.5 * ctx.opt.r0));

  BracketReport rep;
  rep.theta = th;
  double margin = ctx.opt.bc_margin;
  for (int attempt = 0;; ++attempt) {
    rep = BracketReport{};
    rep.theta = th;
    rep.profile = solve_upper_profile(F0, ctx, margin);
    VacuumPath lo = zero_path(ctx), up = upper_start_path(rep.profile, ctx);
    const double scale = std::max(weighted_norm(up, ctx), 1e-300);
    const double tol = kSandwichTolerance * std::max(scale, 1.0);
    rep.records.push_back(detail::bracket_record(0, lo, up, ctx));
    bool retry = false;
    for (int k = 0; k < ctx.opt.k_max; ++k) {
      VacuumPath R_lo, G_lo, R_up, G_up;
      if (th == 1) {
        R_lo = transported_rate(up, up, ctx);
        G_lo = transported_gain(lo, lo, ctx);
        R_up = transported_rate(lo, lo, ctx);
        G_up = transported_gain(up, up, ctx);
      } else {
        R_lo = transported_rate(up, lo, ctx);
        G_lo = transported_gain(lo, up, ctx);
        R_up = transported_rate(lo, up, ctx);
        G_up = transported_gain(up, lo, ctx);
      }
      VacuumPath lo1 = integrating_factor_solve(F0, R_lo, G_lo, ctx);
      VacuumPath up1 = integrating_factor_solve(F0, R_up, G_up, ctx);
      const std::string bad = detail::sandwich_violation(lo, lo1, up1, up, ctx, tol, k);
      if (k == 0 && !bad.empty()) {
        rep.beginning_condition = false;
        if (attempt < 3) {
          margin *= 2.0;
          retry = true;
          break;
        }
      }
      BracketRecord rec = detail::bracket_record(k + 1, lo1, up1, ctx);
      rec.sandwich_ok = bad.empty();
      rep.records.push_back(rec);
      lo = std::move(lo1);
      up = std::move(up1);
      if (!bad.empty()) {
        rep.sandwich_ok = false;
        rep.violation = bad;
        break;
      }
      if (k == 0) rep.beginning_condition = true;
      if (rec.weighted_gap <= ctx.opt.tolerance * scale) break;
    }
    if (retry) continue;
    rep.pair = BracketPair{std::move(lo), std::move(up), rep.records.back().k};
    std::vector<double> gaps;
    for (const auto& r : rep.records) gaps.push_back(r.weighted_gap);
    rep.contraction_factor = worst_ratio(gaps, 1e-3 * ctx.opt.tolerance * scale);
    return rep;
  }
}

inline BracketReport boson_bracket_iteration(const WeightedVacuumState& F0, const VacuumContext& ctx) {
  if (ctx.opt.theta != 1) throw ParameterError("boson brackets need theta = +1");
  return bracket_iteration(F0, ctx);
}

inline BracketReport fermion_bracket_iteration(const WeightedVacuumState& F0, const VacuumContext& ctx) {
  if (ctx.opt.theta != -1) throw ParameterError("fermion brackets need theta = -1");
  return bracket_iteration(F0, ctx);
}

// ---------------------------------------------------------------------------------------------
// Measured constants of |int Q#_gain|, |int Q#_loss| <= C (|F|^2 + |F|^3) for stationary
// Gaussian data c exp(-beta (|x|^2 + |v|^2)).

struct BoundConstants {
  double beta = 0.0;
  double amplitude = 0.0;
  double data_norm = 0.0;
  double gain_norm = 0.0;
  double loss_norm = 0.0;
  double c_gain = 0.0;
  double c_loss = 0.0;
  double boundary_weight = 0.0;
  bool boundary_flag = false;
};

inline BoundConstants measure_bound_constants(const VacuumContext& ctx, double amplitude) {
  const WeightedVacuumState F0 = gaussian_vacuum_state(ctx, amplitude);
  const VacuumPath F = constant_path(F0, ctx);
  const MildIntegrals I = mild_integrals(F, ctx);
  BoundConstants b;
  b.beta = ctx.beta();
  b.amplitude = amplitude;
  b.data_norm = weighted_norm(F0, ctx);
  b.gain_norm = weighted_norm(I.gain, ctx);
  b.loss_norm = weighted_norm(I.loss, ctx);
  const double d = b.data_norm * b.data_norm + b.data_norm * b.data_norm * b.data_norm;
  b.c_gain = d > 0.0 ? b.gain_norm / d : 0.0;
  b.c_loss = d > 0.0 ? b.loss_norm / d : 0.0;
  b.boundary_weight = I.boundary_weight;
  b.boundary_flag = I.boundary_flag;
  return b;
}

// Same constants with the transported operators evaluated directly on the analytic Gaussian
// at every lattice site (no interpolation in x or v), integrated over u on the velocity lattice.
inline BoundConstants analytic_bound_constants(const VacuumContext& ctx, double amplitude) {
  const VelocityGrid& g = ctx.vgrid;
  const double beta = ctx.beta(), th = ctx.opt.theta, w3 = g.cell_volume(), c = amplitude;
  const int dim = ctx.box.dim;
  const auto half = ctx.geom.sphere.half();
  const std::size_t Nv = g.size(), sites = ctx.box.cells() * Nv;
  auto F = [&](const Vec3& x, const Vec3& v) { return c * std::exp(-beta * (norm2(x) + norm2(v))); };
  const double a = 0.5 * ctx.dt();
  double gain_best = 0.0, loss_best = 0.0;
#pragma omp parallel for schedule(dynamic, 16) reduction(max : gain_best, loss_best)
  for (long n = 0; n < long(sites); ++n) {
    const Vec3 x = ctx.box.point(std::size_t(n) / Nv), v = g.point(std::size_t(n) % Nv);
    double gi = 0.0, li = 0.0;
    for (std::size_t m = 0; m < ctx.nodes(); ++m) {
      const double tau = ctx.times[m];
      double gm = 0.0, lm = 0.0;
      for (const auto& node : half)
        for (std::size_t ui = 0; ui < Nv; ++ui) {
          const Vec3 u = g.point(ui);
          const double s = dot(node.omega, v - u);
          const double q = std::abs(s) * node.weight * w3;
          if (q == 0.0) continue;
          const Vec3 up = u + s * node.omega, vp = v - s * node.omega;
          const Vec3 xu = x + tau * detail::spatial_part(v - u, dim);
          const double fu = F(xu, u), fv = F(x, v);
          const double fu1 = F(x + tau * detail::spatial_part(v - up, dim), up);
          const double fv1 = F(x + tau * detail::spatial_part(v - vp, dim), vp);
          gm += q * fu1 * fv1 * (1.0 + th * (fu + fv));
          lm += q * fu * fv * (1.0 + th * (fu1 + fv1));
        }
      const double wgt = (m == 0 || m + 1 == ctx.nodes()) ? a : 2.0 * a;
      gi += wgt * gm;
      li += wgt * lm;
    }
    const double w = ctx.weight(x, v);
    gain_best = std::max(gain_best, w * gi);
    loss_best = std::max(loss_best, w * li);
  }
  BoundConstants b;
  b.beta = beta;
  b.amplitude = amplitude;
  b.data_norm = c;
  b.gain_norm = gain_best;
  b.loss_norm = loss_best;
  const double d = c * c + c * c * c;
  b.c_gain = d > 0.0 ? gain_best / d : 0.0;
  b.c_loss = d > 0.0 ? loss_best / d : 0.0;
  b.boundary_weight = std::exp(-beta * ctx.box.radius * ctx.box.radius);
  b.boundary_flag = b.boundary_weight > kBoundaryFlag;
  return b;
}

}  // namespace qboltz
