#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "collision.hpp"
#include "equilibrium.hpp"
#include "errors.hpp"
#include "geometry.hpp"
#include "linearized.hpp"

namespace qboltz {

// ---------------------------------------------------------------------------------------------
// Space-homogeneous dynamics

// collide(F) minus chi * sum_j alpha_j phi_j, chi = F (1 + theta F), with alpha chosen so the
// lattice moments of the result vanish.
inline std::vector<double> conservative_collide(const DistributionField& F, const CollisionGeometry& geom) {
  std::vector<double> Q = collide(F, geom);
  const VelocityGrid& g = geom.grid;
  const double w = g.cell_volume();
  const double th = F.theta;
  Eigen::Matrix<double, 5, 5> G = Eigen::Matrix<double, 5, 5>::Zero();
  Eigen::Matrix<double, 5, 1> m = Eigen::Matrix<double, 5, 1>::Zero();
  for (std::size_t n = 0; n < g.size(); ++n) {
    const auto phi = invariants(g.point(n));
    const double chi = F.values[n] * (1.0 + th * F.values[n]);
    for (int a = 0; a < 5; ++a) {
      m(a) += w * Q[n] * phi[a];
      for (int b = a; b < 5; ++b) G(a, b) += w * chi * phi[a] * phi[b];
    }
  }
  G = G.selfadjointView<Eigen::Upper>();
  const Eigen::Matrix<double, 5, 1> alpha = G.ldlt().solve(m);
  for (std::size_t n = 0; n < g.size(); ++n) {
    const auto phi = invariants(g.point(n));
    const double chi = F.values[n] * (1.0 + th * F.values[n]);
    double s = 0.0;
    for (int a = 0; a < 5; ++a) s += alpha(a) * phi[a];
    Q[n] -= chi * s;
  }
  return Q;
}

// One classical RK4 step of dF/dt = Q[F] with the conservative right-hand side.
inline DistributionField step_homogeneous(const DistributionField& F, double dt, const CollisionGeometry& geom) {
  if (!(dt > 0.0)) throw StepSizeError("time step must be positive");
  const std::vector<double> rate = loss_rate(F, F, geom);
  const double rmax = *std::max_element(rate.begin(), rate.end());
  if (dt * rmax > 1.0)
    throw StepSizeError("dt * max loss rate = " + std::to_string(dt * rmax) + " exceeds 1; reduce dt");
  const std::size_t N = F.size();
  auto shifted = [&](const std::vector<double>& k, double s) {
    std::vector<double> x(N);
    for (std::size_t n = 0; n < N; ++n) x[n] = F.values[n] + s * k[n];
    return DistributionField(std::move(x), F.theta);
  };
  const auto k1 = conservative_collide(F, geom);
  const auto k2 = conservative_collide(shifted(k1, 0.5 * dt), geom);
  const auto k3 = conservative_collide(shifted(k2, 0.5 * dt), geom);
  const auto k4 = conservative_collide(shifted(k3, dt), geom);
  std::vector<double> out(N);
  for (std::size_t n = 0; n < N; ++n) out[n] = F.values[n] + dt / 6.0 * (k1[n] + 2.0 * k2[n] + 2.0 * k3[n] + k4[n]);
  return DistributionField(std::move(out), F.theta, F.nonneg_asserted);
}

struct TrajectoryRow {
  double t = 0.0;
  double mass = 0.0;
  Vec3 momentum{0.0, 0.0, 0.0};
  double energy = 0.0;
  double entropy = 0.0;
  double l2_f = 0.0;
  double nu_f = 0.0;
  double sup_f = 0.0;
};

inline void write_trajectory_csv(const std::string& path, const std::vector<TrajectoryRow>& rows) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot open " + path + " for writing");
  os.precision(17);
  os << "t,mass,mom_x,mom_y,mom_z,energy,entropy,l2_f,nu_f,sup_f\n";
  for (const auto& r : rows)
    os << r.t << ',' << r.mass << ',' << r.momentum[0] << ',' << r.momentum[1] << ',' << r.momentum[2] << ','
       << r.energy << ',' << r.entropy << ',' << r.l2_f << ',' << r.nu_f << ',' << r.sup_f << '\n';
}

struct RelaxOptions {
  double dt = 0.01;
  double t_end = 0.8;
  int n_polar = 2;
  int n_azimuth = 4;
  double pair_energy_cutoff = 30.0;
  int record_every = 1;
  bool track_nu = true;
};

struct RelaxResult {
  QuantumMaxwellianParams equilibrium;
  DistributionField final_state;
  std::vector<TrajectoryRow> rows;
  double final_l2_error = 0.0;    // ||F - mu||_2 / ||mu||_2
  double moment_drift = 0.0;      // max over the five moments, relative to their natural scales
  double max_entropy_drop = 0.0;  // max over steps of S(t_k) - S(t_{k+1}), relative to |S(0)|
  int steps = 0;
};

// Integrates the homogeneous equation from F0 toward the equilibrium with F0's moments.
inline RelaxResult relax_homogeneous(const DistributionField& F0, const VelocityGrid& g,
                                     const RelaxOptions& opt = RelaxOptions()) {
  if (F0.size() != g.size()) throw DimensionError("initial field does not match velocity grid");
  RelaxResult res;
  const MomentTriple m0 = moments(F0.values, g);
  res.equilibrium = fit_equilibrium(m0, F0.theta, g);
  CollisionGeometry geom(g, opt.n_polar, opt.n_azimuth, Envelope::maxwellian(res.equilibrium));
  geom.pair_energy_cutoff = opt.pair_energy_cutoff;
  const EquilibriumTables eq(res.equilibrium, g);
  std::vector<double> nu;
  if (opt.track_nu) nu = compute_nu(res.equilibrium, geom);

  double mu_norm = 0.0;
  for (double x : eq.mu) mu_norm += x * x;
  mu_norm = std::sqrt(mu_norm);
  const double pscale = std::sqrt(m0.mass * m0.energy);
  const double S0 = entropy(F0, g);

  auto record = [&](const DistributionField& F, double t) {
    TrajectoryRow r;
    r.t = t;
    const MomentTriple m = moments(F.values, g);
    r.mass = m.mass;
    r.momentum = m.momentum;
    r.energy = m.energy;
    r.entropy = entropy(F, g);
    std::vector<double> f(g.size());
    for (std::size_t n = 0; n < g.size(); ++n) f[n] = eq.inv_sqrtM[n] * (F.values[n] - eq.mu[n]);
    r.l2_f = l2_norm(f, g);
    r.nu_f = opt.track_nu ? nu_norm(f, nu, g) : std::numeric_limits<double>::quiet_NaN();
    r.sup_f = 0.0;
    for (double x : f) r.sup_f = std::max(r.sup_f, std::abs(x));
    const double drift = std::max({std::abs(m.mass - m0.mass) / m0.mass,
                                   std::sqrt(norm2(m.momentum - m0.momentum)) / pscale,
                                   std::abs(m.energy - m0.energy) / m0.energy});
    res.moment_drift = std::max(res.moment_drift, drift);
    return r;
  };

  DistributionField F = F0;
  double t = 0.0, S_prev = S0;
  res.rows.push_back(record(F, t));
  const int nsteps = int(std::ceil(opt.t_end / opt.dt - 1e-9));
  for (int k = 0; k < nsteps; ++k) {
    F = step_homogeneous(F, opt.dt, geom);
    t += opt.dt;
    ++res.steps;
    const double S = entropy(F, g);
    res.max_entropy_drop = std::max(res.max_entropy_drop, (S_prev - S) / std::abs(S0));
    S_prev = S;
    if ((k + 1) % opt.record_every == 0 || k + 1 == nsteps) res.rows.push_back(record(F, t));
  }
  double err = 0.0;
  for (std::size_t n = 0; n < g.size(); ++n) err += (F.values[n] - eq.mu[n]) * (F.values[n] - eq.mu[n]);
  res.final_l2_error = std::sqrt(err) / mu_norm;
  res.final_state = std::move(F);
  return res;
}

// ---------------------------------------------------------------------------------------------
// Local iteration: dF^{n+1}/dt + F^{n+1} Q~_p[F^n, F^n] = Q_p[F^n, F^n; F^n], space-homogeneous.

struct LocalIterationOptions {
  double T = 0.5;
  int nt = 20;
  int n_max = 8;
};

struct LocalIterationReport {
  std::vector<std::vector<double>> final_values;  // F^n(T) for n = 0..n_done
  std::vector<double> differences;                // sup over (t, v) of |F^{n+1} - F^n|
  double contraction_factor = 0.0;                // largest ratio of successive differences
  bool contracting = false;
  double min_value = 0.0;  // over all iterates, times and velocities
  double max_value = 0.0;
};

inline LocalIterationReport local_iteration(const DistributionField& F0, const CollisionGeometry& geom,
                                            const LocalIterationOptions& opt = LocalIterationOptions()) {
  geom.check(F0);
  F0.validate();
  if (opt.nt < 1 || opt.n_max < 1 || !(opt.T > 0.0)) throw ContractError("local iteration needs T > 0, nt >= 1, n_max >= 1");
  const std::size_t N = F0.size();
  const double dt = opt.T / opt.nt;
  const int th = F0.theta;
  LocalIterationReport rep;
  std::vector<std::vector<double>> path(std::size_t(opt.nt) + 1, F0.values);
  rep.final_values.push_back(F0.values);
  rep.min_value = *std::min_element(F0.values.begin(), F0.values.end());
  rep.max_value = *std::max_element(F0.values.begin(), F0.values.end());

  for (int it = 0; it < opt.n_max; ++it) {
    std::vector<std::vector<double>> A(path.size()), B(path.size());
    for (std::size_t k = 0; k < path.size(); ++k) {
      DistributionField Fk(path[k], th);
      A[k] = collide_p_tilde(Fk, Fk, geom);
      B[k] = collide_p(Fk, Fk, Fk, geom);
    }
    std::vector<std::vector<double>> next(path.size());
    next[0] = F0.values;
    for (std::size_t k = 0; k + 1 < path.size(); ++k) {
      next[k + 1].resize(N);
      for (std::size_t n = 0; n < N; ++n) {
        const double a = 0.5 * (A[k][n] + A[k + 1][n]), b = 0.5 * (B[k][n] + B[k + 1][n]);
        const double e = std::exp(-a * dt);
        const double growth = a * dt > 1e-12 ? (1.0 - e) / a : dt;
        next[k + 1][n] = next[k][n] * e + b * growth;
      }
    }
    double diff = 0.0;
    for (std::size_t k = 0; k < path.size(); ++k)
      for (std::size_t n = 0; n < N; ++n) {
        diff = std::max(diff, std::abs(next[k][n] - path[k][n]));
        rep.min_value = std::min(rep.min_value, next[k][n]);
        rep.max_value = std::max(rep.max_value, next[k][n]);
      }
    rep.differences.push_back(diff);
    path = std::move(next);
    rep.final_values.push_back(path.back());
    if (diff == 0.0) break;
  }
  rep.contraction_factor = 0.0;
  for (std::size_t i = 1; i < rep.differences.size(); ++i)
    if (rep.differences[i - 1] > 0.0)
      rep.contraction_factor = std::max(rep.contraction_factor, rep.differences[i] / rep.differences[i - 1]);
  rep.contracting = rep.differences.size() < 2 ? rep.differences.empty() || rep.differences[0] == 0.0
                                               : rep.contraction_factor < 1.0;
  return rep;
}

// ---------------------------------------------------------------------------------------------
// Perturbation dynamics on the torus: df/dt + v.grad_x f + L f = Gamma[f, f; f].

// f[cell * Nv + velocity]; cells ordered (i, j, k) with k fastest in three dimensions.
struct TorusState {
  std::vector<double> f;
  double t = 0.0;
};

namespace detail {

// Periodic cubic Lagrange weights for sampling at i - s (in cells) for every node i.
inline std::array<double, 4> cubic_shift_weights(double s, int& base_offset) {
  const double y = -s;
  const double j = std::floor(y);
  const double r = y - j;
  base_offset = int(j) - 1;
  return {-r * (r - 1.0) * (r - 2.0) / 6.0, (r + 1.0) * (r - 1.0) * (r - 2.0) / 2.0,
          -(r + 1.0) * r * (r - 2.0) / 2.0, (r + 1.0) * r * (r - 1.0) / 6.0};
}

}  // namespace detail

class PerturbationSolver {
 public:
  PerturbationSolver(const QuantumMaxwellianParams& p, const SpatialGrid& space, const CollisionGeometry& geom,
                     const LinearizedOptions& opt = LinearizedOptions())
      : params_(p), space_(space), geom_(geom), tables_(p, geom.grid) {
    if (space.dimension != 1 && space.dimension != 3) throw ContractError("torus runs need spatial dimension 1 or 3");
    op_ = build_linearized_operator(p, geom, opt);
    Eigen::MatrixXd L = op_.L_matrix();
    L = 0.5 * (L + L.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(L);
    if (es.info() != Eigen::Success) throw NumericError("eigen-decomposition of L failed");
    lambda_ = es.eigenvalues().cwiseMax(0.0);
    V_ = es.eigenvectors();
  }

  const LinearizedOperator& op() const { return op_; }
  const SpatialGrid& space() const { return space_; }
  const VelocityGrid& velocity() const { return geom_.grid; }
  const CollisionGeometry& geometry() const { return geom_; }
  const QuantumMaxwellianParams& params() const { return params_; }
  std::size_t velocity_size() const { return geom_.grid.size(); }

  // Strang splitting: half transport, collision, half transport.
  void step(TorusState& s, double dt) {
    check(s);
    if (!(dt > 0.0)) throw StepSizeError("time step must be positive");
    transport(s.f, 0.5 * dt);
    collide_cells(s.f, dt);
    transport(s.f, 0.5 * dt);
    s.t += dt;
  }

  // Exact periodic shift f(x) <- f(x - v dt) along each spatial axis, cubic interpolation.
  void transport(std::vector<double>& f, double dt) const {
    const std::size_t Nv = velocity_size();
    const int n = space_.n;
    const double dx = space_.spacing();
    const int axes = space_.dimension;
    std::vector<double> line(std::size_t(n), 0.0);
    for (int axis = 0; axis < axes; ++axis) {
      const std::size_t stride = axes == 1 ? 1 : (axis == 0 ? std::size_t(n) * n : axis == 1 ? std::size_t(n) : 1);
      const std::size_t lines = space_.cells() / std::size_t(n);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) firstprivate(line)
#endif
      for (std::ptrdiff_t iv = 0; iv < std::ptrdiff_t(Nv); ++iv) {
        const double vel = geom_.grid.point(std::size_t(iv))[axis];
        int off = 0;
        const auto w = detail::cubic_shift_weights(vel * dt / dx, off);
        for (std::size_t l = 0; l < lines; ++l) {
          const std::size_t start = line_start(l, stride);
          for (int i = 0; i < n; ++i) line[std::size_t(i)] = f[(start + std::size_t(i) * stride) * Nv + std::size_t(iv)];
          for (int i = 0; i < n; ++i) {
            double acc = 0.0;
            for (int m = 0; m < 4; ++m) acc += w[std::size_t(m)] * line[std::size_t(space_.wrap(i + off + m))];
            f[(start + std::size_t(i) * stride) * Nv + std::size_t(iv)] = acc;
          }
        }
      }
    }
  }

  // Per cell: f <- exp(-L dt) f + dt phi1(-L dt) (I - P) Gamma[f, f; f], then the change is
  // projected off the null space so cell moments are untouched.
  void collide_cells(std::vector<double>& f, double dt) {
    prepare(dt);
    const std::size_t Nv = velocity_size(), cells = space_.cells();
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (std::ptrdiff_t c = 0; c < std::ptrdiff_t(cells); ++c) {
      std::vector<double> fc(f.begin() + c * std::ptrdiff_t(Nv), f.begin() + (c + 1) * std::ptrdiff_t(Nv));
      std::vector<double> G = apply_Gamma(fc, fc, fc, params_, geom_);
      Eigen::Map<Eigen::VectorXd> x(fc.data(), Eigen::Index(Nv)), g(G.data(), Eigen::Index(Nv));
      Eigen::VectorXd y = V_ * (expo_.asDiagonal() * (V_.transpose() * x)) + V_ * (phi_.asDiagonal() * (V_.transpose() * g));
      Eigen::VectorXd d = y - x;
      d -= op_.null_basis * (op_.grid.cell_volume() * (op_.null_basis.transpose() * d));
      for (std::size_t n = 0; n < Nv; ++n) f[std::size_t(c) * Nv + n] += d(Eigen::Index(n));
    }
  }

  double l2(const std::vector<double>& f) const {
    double s = 0.0;
    for (double x : f) s += x * x;
    return std::sqrt(s * geom_.grid.cell_volume() * space_.cell_volume());
  }

  double nu_weighted(const std::vector<double>& f) const {
    const std::size_t Nv = velocity_size();
    double s = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) s += op_.nu[i % Nv] * f[i] * f[i];
    return std::sqrt(s * geom_.grid.cell_volume() * space_.cell_volume());
  }

  // Integrals over x and v of f M^{1/2} {1, v, |v|^2}.
  std::array<double, 5> perturbation_moments(const std::vector<double>& f) const {
    const std::size_t Nv = velocity_size();
    std::array<double, 5> m{};
    for (std::size_t i = 0; i < f.size(); ++i) {
      const std::size_t n = i % Nv;
      const auto phi = invariants(geom_.grid.point(n));
      for (int j = 0; j < 5; ++j) m[std::size_t(j)] += f[i] * tables_.sqrtM[n] * phi[std::size_t(j)];
    }
    const double w = geom_.grid.cell_volume() * space_.cell_volume();
    for (auto& x : m) x *= w;
    return m;
  }

  void check(const TorusState& s) const {
    if (s.f.size() != space_.cells() * velocity_size())
      throw DimensionError("torus state has " + std::to_string(s.f.size()) + " values, expected " +
                           std::to_string(space_.cells() * velocity_size()));
    for (double x : s.f)
      if (!std::isfinite(x)) throw NumericError("non-finite value in torus state");
  }

 private:
  std::size_t line_start(std::size_t l, std::size_t stride) const {
    const std::size_t n = std::size_t(space_.n);
    if (space_.dimension == 1) return 0;
    if (stride == n * n) return l;              // lines along i: l enumerates (j, k)
    if (stride == n) return (l / n) * n * n + l % n;  // along j: l enumerates (i, k)
    return l * n;                               // along k: l enumerates (i, j)
  }

  void prepare(double dt) {
    if (dt == cached_dt_) return;
    cached_dt_ = dt;
    expo_.resize(lambda_.size());
    phi_.resize(lambda_.size());
    for (Eigen::Index i = 0; i < lambda_.size(); ++i) {
      const double z = lambda_(i) * dt;
      expo_(i) = std::exp(-z);
      phi_(i) = z > 1e-12 ? dt * (1.0 - expo_(i)) / z : dt;
    }
  }

  QuantumMaxwellianParams params_;
  SpatialGrid space_;
  CollisionGeometry geom_;
  EquilibriumTables tables_;
  LinearizedOperator op_;
  Eigen::VectorXd lambda_;
  Eigen::MatrixXd V_;
  Eigen::VectorXd expo_, phi_;
  double cached_dt_ = -1.0;
};

inline void step_perturbation(PerturbationSolver& solver, TorusState& s, double dt) { solver.step(s, dt); }

struct TorusRecord {
  double t = 0.0;
  double l2 = 0.0;
  double nu = 0.0;
  double sup = 0.0;
  std::array<double, 5> moments{};
};

struct TorusRun {
  std::vector<TorusRecord> records;
  std::vector<TorusState> snapshots;  // at the record times
};

inline TorusRun run_torus(PerturbationSolver& solver, TorusState s, double dt, double t_end, int record_every = 1,
                          bool keep_snapshots = true) {
  TorusRun run;
  auto rec = [&]() {
    TorusRecord r;
    r.t = s.t;
    r.l2 = solver.l2(s.f);
    r.nu = solver.nu_weighted(s.f);
    for (double x : s.f) r.sup = std::max(r.sup, std::abs(x));
    r.moments = solver.perturbation_moments(s.f);
    run.records.push_back(r);
    if (keep_snapshots) run.snapshots.push_back(s);
  };
  rec();
  const int nsteps = int(std::ceil(t_end / dt - 1e-9));
  for (int k = 0; k < nsteps; ++k) {
    solver.step(s, dt);
    if ((k + 1) % record_every == 0 || k + 1 == nsteps) rec();
  }
  return run;
}

// ---------------------------------------------------------------------------------------------
// Diagnostics

struct EnergyRecord {
  double t = 0.0;
  double triple_norm_sq = 0.0;
  double dissipation_integral = 0.0;
  std::array<double, 5> defects{};
};

namespace detail {

// Spectral derivative along one periodic spatial axis.
inline std::vector<double> spatial_derivative(const std::vector<double>& f, const SpatialGrid& sp, std::size_t Nv,
                                              int axis) {
  const int n = sp.n;
  const std::size_t nn = std::size_t(n);
  const std::size_t stride = sp.dimension == 1 ? 1 : (axis == 0 ? nn * nn : axis == 1 ? nn : 1);
  std::vector<double> out(f.size(), 0.0);
  const double kfac = 2.0 * std::numbers::pi / sp.period;
  std::vector<std::complex<double>> tw(nn * nn);
  for (std::size_t a = 0; a < nn; ++a)
    for (std::size_t b = 0; b < nn; ++b) tw[a * nn + b] = std::polar(1.0, -2.0 * std::numbers::pi * double(a * b % nn) / n);
  std::vector<std::complex<double>> hat(nn);
  for (std::size_t c0 = 0; c0 < sp.cells(); ++c0) {
    // c0 is the first cell of a line when its coordinate along the axis is zero
    if ((c0 / stride) % nn != 0) continue;
    for (std::size_t iv = 0; iv < Nv; ++iv) {
      for (std::size_t m = 0; m < nn; ++m) {
        std::complex<double> s = 0.0;
        for (std::size_t i = 0; i < nn; ++i) s += tw[m * nn + i] * f[(c0 + i * stride) * Nv + iv];
        const int km = int(m) <= n / 2 ? int(m) : int(m) - n;
        const bool nyquist = n % 2 == 0 && int(m) == n / 2;
        hat[m] = nyquist ? 0.0 : s * std::complex<double>(0.0, kfac * km);
      }
      for (std::size_t i = 0; i < nn; ++i) {
        std::complex<double> s = 0.0;
        for (std::size_t m = 0; m < nn; ++m) s += std::conj(tw[m * nn + i]) * hat[m];
        out[(c0 + i * stride) * Nv + iv] = s.real() / n;
      }
    }
  }
  return out;
}

// Centered differences along one velocity axis, second-order one-sided at the hull faces.
inline std::vector<double> velocity_derivative(const std::vector<double>& f, const VelocityGrid& g, int axis) {
  const std::size_t Nv = g.size();
  const double h = g.spacing();
  const int n = g.n;
  std::vector<double> out(f.size());
  for (std::size_t c = 0; c < f.size() / Nv; ++c) {
    const double* x = f.data() + c * Nv;
    double* y = out.data() + c * Nv;
    for (std::size_t idx = 0; idx < Nv; ++idx) {
      auto t = g.triple(idx);
      auto at = [&](int s) {
        auto q = t;
        q[std::size_t(axis)] = s;
        return x[g.index(q[0], q[1], q[2])];
      };
      const int i = t[std::size_t(axis)];
      if (i == 0) y[idx] = (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h);
      else if (i == n - 1) y[idx] = (3.0 * at(n - 1) - 4.0 * at(n - 2) + at(n - 3)) / (2.0 * h);
      else y[idx] = (at(i + 1) - at(i - 1)) / (2.0 * h);
    }
  }
  return out;
}

}  // namespace detail

// |||f|||^2 = sum over derivatives d_x^gamma d_v^beta with |gamma| + |beta| <= order of ||.||^2,
// and the running time integral of the nu-weighted version.
inline std::vector<EnergyRecord> energy_functional(const PerturbationSolver& solver,
                                                   const std::vector<TorusState>& trajectory, int derivative_order) {
  if (derivative_order < 0 || derivative_order > 2) throw ContractError("derivative order must be 0, 1 or 2");
  const SpatialGrid& sp = solver.space();
  const VelocityGrid& g = solver.velocity();
  const std::size_t Nv = g.size();
  const int d = sp.dimension;
  const int n_axes = d + 3;  // spatial axes first, then velocity axes
  auto deriv = [&](const std::vector<double>& f, int axis) {
    return axis < d ? detail::spatial_derivative(f, sp, Nv, axis) : detail::velocity_derivative(f, g, axis - d);
  };
  std::vector<EnergyRecord> out;
  double integral = 0.0, prev_nu = 0.0, prev_t = 0.0;
  for (std::size_t k = 0; k < trajectory.size(); ++k) {
    const auto& f = trajectory[k].f;
    solver.check(trajectory[k]);
    double norm_sq = 0.0, nu_sq = 0.0;
    auto add = [&](const std::vector<double>& x) {
      const double a = solver.l2(x), b = solver.nu_weighted(x);
      norm_sq += a * a;
      nu_sq += b * b;
    };
    add(f);
    if (derivative_order >= 1)
      for (int a = 0; a < n_axes; ++a) {
        const auto fa = deriv(f, a);
        add(fa);
        if (derivative_order >= 2)
          for (int b = a; b < n_axes; ++b) add(deriv(fa, b));
      }
    if (k > 0) integral += 0.5 * (trajectory[k].t - prev_t) * (nu_sq + prev_nu);
    prev_nu = nu_sq;
    prev_t = trajectory[k].t;
    EnergyRecord r;
    r.t = trajectory[k].t;
    r.triple_norm_sq = norm_sq;
    r.dissipation_integral = integral;
    r.defects = solver.perturbation_moments(f);
    out.push_back(r);
  }
  return out;
}

struct DecayFit {
  double k = 0.0;
  double r2 = 0.0;
  bool degenerate = false;
  std::size_t first = 0, last = 0;  // fitted window [first, last)
};

struct DecayOptions {
  double transient_fraction = 0.4;
  double floor = 0.0;  // discretization floor; samples below 10x floor are excluded
};

// Least-squares fit of log ||f(t)|| = log C - k t over the post-transient window.
inline DecayFit measure_decay(const std::vector<double>& t, const std::vector<double>& norms,
                              const DecayOptions& opt = DecayOptions()) {
  if (t.size() != norms.size()) throw DimensionError("time and norm series differ in length");
  DecayFit fit;
  const double top = norms.empty() ? 0.0 : *std::max_element(norms.begin(), norms.end());
  if (norms.size() < 3 || !(top > 0.0)) {
    fit.degenerate = true;
    return fit;
  }
  const double t0 = t.front() + opt.transient_fraction * (t.back() - t.front());
  fit.first = std::size_t(std::lower_bound(t.begin(), t.end(), t0) - t.begin());
  fit.last = fit.first;
  while (fit.last < norms.size() && norms[fit.last] > 10.0 * opt.floor && norms[fit.last] > 0.0) ++fit.last;
  const std::size_t m = fit.last - fit.first;
  if (m < 3) {
    fit.degenerate = true;
    return fit;
  }
  double st = 0.0, sy = 0.0;
  for (std::size_t i = fit.first; i < fit.last; ++i) {
    st += t[i];
    sy += std::log(norms[i]);
  }
  st /= double(m);
  sy /= double(m);
  double stt = 0.0, sty = 0.0, syy = 0.0;
  for (std::size_t i = fit.first; i < fit.last; ++i) {
    const double a = t[i] - st, b = std::log(norms[i]) - sy;
    stt += a * a;
    sty += a * b;
    syy += b * b;
  }
  const double slope = sty / stt;
  fit.k = -slope;
  fit.r2 = syy > 0.0 ? (sty * sty) / (stt * syy) : 1.0;
  return fit;
}

// Per-cell (a, b, c) of P f.
inline std::vector<MacroCoefficients> extract_macro_coefficients(const std::vector<double>& f,
                                                                 const LinearizedOperator& op) {
  const std::size_t Nv = op.grid.size();
  if (f.size() % Nv != 0) throw DimensionError("field size is not a multiple of the velocity lattice size");
  std::vector<MacroCoefficients> out;
  for (std::size_t c = 0; c < f.size() / Nv; ++c) {
    std::vector<double> fc(f.begin() + std::ptrdiff_t(c * Nv), f.begin() + std::ptrdiff_t((c + 1) * Nv));
    out.push_back(op.coefficients_abc(fc));
  }
  return out;
}

}  // namespace qboltz
