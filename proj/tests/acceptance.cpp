// Acceptance run: one PASS/FAIL line per criterion. Optional arguments select criteria by number.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "qboltz/linearized.hpp"
#include "qboltz/maxwellian_solver.hpp"
#include "qboltz/vacuum_solver.hpp"

using namespace qboltz;
using fixture::max_abs;

namespace {

// Tolerances and budgets.
constexpr double kOracleTol = 1e-13;
constexpr double kOracleSeconds = 10.0;
constexpr double kWeakTol = 1e-10;
constexpr double kWeakSeconds = 60.0;
constexpr double kAnnihilationOrder = 1.8;
constexpr double kAnnihilationRatio = 1e-3;
constexpr double kDissipationTol = 1e-10;
constexpr double kEntropyStepTol = 1e-8;
constexpr double kRelaxL2 = 1e-3;
constexpr double kRelaxDrift = 1e-7;
constexpr double kRelaxSeconds = 600.0;
constexpr double kSymmetryTol = 1e-8;
constexpr double kConsistencyTol = 1e-9;
constexpr double kDecayR2 = 0.95;
constexpr double kTorusSeconds = 1800.0;
constexpr double kHalving = 0.5;
constexpr double kBetaLawLo = 3.0, kBetaLawHi = 5.0;
constexpr double kSandwichTol = 1e-10;
constexpr double kSchemeTol = 1e-6;
constexpr double kIdentityTol = 1e-12;

struct Verdict {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok) { pass = pass && ok; }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double x) {
  char b[32];
  std::snprintf(b, sizeof b, "%.3g", x);
  return b;
}

double rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
  return fixture::max_abs_diff(a, b) / std::max(max_abs(b), 1e-300);
}

// 1. optimized collide vs quadruple loop
void oracle_equivalence(Verdict& v) {
  const auto t0 = std::chrono::steady_clock::now();
  VelocityGrid g(7, 4.0);
  CollisionGeometry geom(g, 2, 4);
  std::mt19937_64 rng(101);
  for (int theta : {-1, 0, 1}) {
    const auto f = fixture::random_admissible(g, theta, rng);
    const double e = rel_diff(collide(DistributionField(f, theta), geom), oracle::naive_collide(f, g, geom.sphere, theta));
    v.require(e <= kOracleTol);
    v.detail << "theta " << theta << " rel " << fmt(e) << "; ";
  }
  const double s = seconds_since(t0);
  v.require(s <= kOracleSeconds);
  v.detail << fmt(s) << " s";
}

// 2. conservation of the five invariants
void conservation(Verdict& v) {
  const auto t0 = std::chrono::steady_clock::now();
  VelocityGrid g(15, 5.0);
  CollisionGeometry geom(g, 2, 4);
  std::mt19937_64 rng(202);
  const auto weights = weak_form_invariants_weights(geom);
  for (int theta : {-1, 0, 1}) {
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
      DistributionField F(fixture::random_admissible(g, theta, rng), theta);
      const auto w = weak_form_invariants(F, geom);
      const auto sc = weak_form_invariants_scale(weights, theta, max_abs(F.values));
      for (int j = 0; j < 5; ++j) worst = std::max(worst, std::abs(w[std::size_t(j)]) / sc[std::size_t(j)]);
    }
    v.require(worst <= kWeakTol);
    v.detail << "theta " << theta << " max |weak|/scale " << fmt(worst) << "; ";
  }
  const double s = seconds_since(t0);
  v.require(s <= kWeakSeconds);
  v.detail << fmt(s) << " s";
}

// 3. equilibrium annihilation with plain trilinear lookups
void annihilation(Verdict& v) {
  const int theta = -1;
  const auto p = QuantumMaxwellianParams::isotropic(theta, std::numbers::e);
  std::vector<double> logh, logr;
  double ratio = 0.0;
  for (int n : {13, 19, 25}) {
    VelocityGrid g(n, 5.0);
    CollisionGeometry geom(g, 2, 4);
    const double r = max_abs(collide(DistributionField(sample_mu(p, g), theta), geom));
    logh.push_back(std::log(g.spacing()));
    logr.push_back(std::log(r));
    v.detail << "nv " << n << " |Q(mu)| " << fmt(r) << "; ";
    if (n == 25) {
      const auto bumped = g.sample([&](const Vec3& x) {
        return mu(x, p) + 0.15 * std::exp(-2.0 * ((x[0] - 0.8) * (x[0] - 0.8) + x[1] * x[1] + (x[2] + 0.4) * (x[2] + 0.4)));
      });
      ratio = r / max_abs(collide(DistributionField(bumped, theta), geom));
    }
  }
  double mh = 0.0, mr = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    mh += logh[i] / 3.0;
    mr += logr[i] / 3.0;
  }
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    sxy += (logh[i] - mh) * (logr[i] - mr);
    sxx += (logh[i] - mh) * (logh[i] - mh);
  }
  const double order = sxy / sxx;
  v.require(order >= kAnnihilationOrder);
  v.require(ratio <= kAnnihilationRatio);
  v.detail << "order " << fmt(order) << ", ratio at nv 25 " << fmt(ratio);
}

// 4. entropy dissipation sign and entropy growth along relaxation
void h_theorem(Verdict& v) {
  VelocityGrid g(11, 5.0);
  CollisionGeometry geom(g, 2, 4);
  std::mt19937_64 rng(404);
  double worst = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 200; ++k) {
    const int theta = k % 3 - 1;
    DistributionField F(fixture::random_admissible(g, theta, rng), theta, true);
    const auto m = moments(F.values, g);
    const double scale = m.mass * m.energy;
    worst = std::min(worst, entropy_dissipation(F, geom) / scale);
  }
  v.require(worst >= -kDissipationTol);
  v.detail << "min dissipation/scale " << fmt(worst) << "; ";
  double drop = 0.0;
  for (int theta : {-1, 0, 1}) {
    for (int run = 0; run < 3; ++run) {
      std::vector<double> F0 = run == 0 ? fixture::two_bump(g, theta) : fixture::random_relaxation_data(g, rng);
      RelaxOptions opt;
      opt.dt = 0.003;
      opt.t_end = 0.15;
      opt.track_nu = false;
      const RelaxResult r = relax_homogeneous(DistributionField(F0, theta), g, opt);
      drop = std::max(drop, r.max_entropy_drop);
    }
  }
  v.require(drop <= kEntropyStepTol);
  v.detail << "max per-step entropy drop/|S0| over 9 runs " << fmt(drop);
}

// 5. relaxation at nv = 25
void relaxation(Verdict& v) {
  VelocityGrid g(25, 5.0);
  const auto F0 = g.sample([](const Vec3& x) {
    const double e = std::exp(-(x[0] * x[0] / 1.6 + x[1] * x[1] / 0.8 + x[2] * x[2] / 0.7));
    const double b = std::exp(-((x[0] - 1.0) * (x[0] - 1.0) + x[1] * x[1] + x[2] * x[2]) / 0.5);
    return 0.35 * e + 0.2 * b;
  });
  for (int theta : {-1, 0, 1}) {
    const auto t0 = std::chrono::steady_clock::now();
    RelaxOptions opt;
    opt.dt = 0.01;
    opt.t_end = 0.8;
    opt.record_every = 10;
    opt.track_nu = false;
    const RelaxResult r = relax_homogeneous(DistributionField(F0, theta), g, opt);
    const double s = seconds_since(t0);
    v.require(r.final_l2_error <= kRelaxL2 && r.moment_drift <= kRelaxDrift && s <= kRelaxSeconds);
    v.detail << "theta " << theta << " L2 " << fmt(r.final_l2_error) << " drift " << fmt(r.moment_drift) << " "
             << fmt(s) << " s; ";
  }
}

// 6. linearized operator structure
void linearized(Verdict& v) {
  for (int theta : {-1, 0, 1}) {
    const auto p = QuantumMaxwellianParams::isotropic(theta, theta == 1 ? 2.0 : 1.0);
    CollisionGeometry geom(VelocityGrid(11, 5.0), 4, 8);
    LinearizedOperator op = build_linearized_operator(p, geom);
    const Eigen::MatrixXd L = op.L_matrix();
    const double asym = (L - L.transpose()).cwiseAbs().maxCoeff() / L.cwiseAbs().maxCoeff();
    const SpectrumReport sp = spectrum(op);
    const auto& g = op.grid;
    std::mt19937_64 rng(600 + theta);
    std::normal_distribution<double> nd;
    double coercive = INFINITY;
    for (int k = 0; k < 200; ++k) {
      std::vector<double> f(g.size());
      for (auto& x : f) x = nd(rng);
      const auto Pf = op.project_P(f);
      std::vector<double> w(f.size());
      for (std::size_t n = 0; n < f.size(); ++n) w[n] = f[n] - Pf[n];
      const auto Lf = op.apply_L(f);
      double lhs = 0.0;
      for (std::size_t n = 0; n < f.size(); ++n) lhs += Lf[n] * f[n];
      lhs *= g.cell_volume();
      const double rhs = op.delta * std::pow(nu_norm(w, op.nu, g), 2);
      coercive = std::min(coercive, lhs / rhs);
    }
    // perturbation of size 0.1 relative to sqrt(M)
    EquilibriumTables t(p, g);
    std::uniform_real_distribution<double> ud(-1.0, 1.0);
    std::vector<double> f(g.size());
    for (std::size_t n = 0; n < g.size(); ++n) {
      const Vec3 x = g.point(n);
      f[n] = 0.1 * t.sqrtM[n] * (ud(rng) + 0.5 * x[0] + 0.2 * x[1] * x[2] + 0.3 * std::sin(x[0] + 2.0 * x[2]));
    }
    const auto Q = collide_perturbed(f, p, geom);
    const auto Lf = apply_L_direct(f, p, geom);
    const auto G = apply_Gamma(f, f, f, p, geom);
    const double scale = std::max(max_abs(Lf), max_abs(G));
    double res = 0.0;
    for (std::size_t n = 0; n < f.size(); ++n) res = std::max(res, std::abs(t.inv_sqrtM[n] * Q[n] + Lf[n] - G[n]));
    const double pg = max_abs(op.project_P(G));
    const bool ok = asym <= kSymmetryTol && sp.null_count == 5 && sp.delta > 0.0 && coercive >= 1.0 - 1e-10 &&
                    res <= kConsistencyTol * scale && pg <= kConsistencyTol * scale;
    v.require(ok);
    v.detail << "theta " << theta << " asym " << fmt(asym) << " null " << sp.null_count << " delta " << fmt(sp.delta)
             << " min <Lf,f>/(delta|(I-P)f|^2) " << fmt(coercive) << " consistency " << fmt(res / scale) << " |P Gamma| "
             << fmt(pg / scale) << "; ";
  }
}

// 7. torus decay
void torus_decay(Verdict& v) {
  const auto t0 = std::chrono::steady_clock::now();
  for (int theta : {-1, 0, 1}) {
    const auto p = QuantumMaxwellianParams::isotropic(theta, theta == 1 ? 2.0 : 1.0);
    PerturbationSolver s(p, SpatialGrid(1, 16, 0.5 * std::numbers::pi), CollisionGeometry(VelocityGrid(9, 4.0), 4, 8));
    const auto& g = s.velocity();
    EquilibriumTables tab(p, g);
    std::mt19937_64 rng(700 + theta);
    std::uniform_real_distribution<double> ud(-1.0, 1.0);
    const double c[6] = {ud(rng), ud(rng), ud(rng), ud(rng), ud(rng), ud(rng)};
    std::vector<double> f(16 * g.size());
    for (std::size_t cell = 0; cell < 16; ++cell) {
      const double x = 2.0 * std::numbers::pi * double(cell) / 16.0;
      for (std::size_t n = 0; n < g.size(); ++n) {
        const Vec3 w = g.point(n);
        const double shape = c[0] + c[1] * w[0] + c[2] * norm2(w) + c[3] * w[0] * w[1] + c[4] * std::cos(w[2]);
        f[cell * g.size() + n] = 1e-2 * tab.sqrtM[n] * (std::sin(x) * shape + c[5] * std::cos(2.0 * x) * w[0]);
      }
    }
    const TorusRun run = run_torus(s, TorusState{f, 0.0}, 0.2, 8.0, 1, false);
    std::vector<double> t, y;
    for (const auto& r : run.records) {
      t.push_back(r.t);
      y.push_back(r.l2);
    }
    const DecayFit fit = measure_decay(t, y);
    v.require(!fit.degenerate && fit.k > 0.0 && fit.r2 >= kDecayR2);
    v.detail << "theta " << theta << " k " << fmt(fit.k) << " R2 " << fmt(fit.r2) << "; ";
  }
  const double sec = seconds_since(t0);
  v.require(sec <= kTorusSeconds);
  v.detail << fmt(sec) << " s";
}

// 8. local iteration
void local_iteration_check(Verdict& v) {
  VelocityGrid g(9, 5.0);
  CollisionGeometry geom(g, 2, 4);
  for (int theta : {-1, 0, 1}) {
    std::mt19937_64 rng(800 + theta);
    double factor = 0.0, lo = INFINITY, hi = -INFINITY;
    bool contracting = true;
    for (int trial = 0; trial < 3; ++trial) {
      auto F = fixture::random_relaxation_data(g, rng);
      const double m = max_abs(F);
      for (auto& x : F) x *= (theta == -1 ? 0.9 : 0.5) / m;
      LocalIterationOptions opt;
      opt.T = 0.02;
      opt.nt = 10;
      opt.n_max = 6;
      const auto rep = local_iteration(DistributionField(F, theta), geom, opt);
      contracting = contracting && rep.contracting;
      factor = std::max(factor, rep.contraction_factor);
      lo = std::min(lo, rep.min_value);
      hi = std::max(hi, rep.max_value);
    }
    v.require(contracting && factor < 1.0 && lo >= 0.0 && (theta != -1 || hi <= 1.0));
    v.detail << "theta " << theta << " factor " << fmt(factor) << " range [" << fmt(lo) << ", " << fmt(hi) << "]; ";
  }
}

// 9. vacuum fixed point
void vacuum_fixed_point(Verdict& v) {
  VacuumOptions o;
  o.theta = 1;
  const VacuumContext ctx(o);
  const PicardReport a = picard_iteration(gaussian_vacuum_state(ctx, 1e-3), ctx);
  const PicardReport b = picard_iteration(gaussian_vacuum_state(ctx, 5e-4), ctx);
  bool geometric = a.contracting && b.contracting;
  for (const auto* r : {&a, &b})
    for (std::size_t k = 1; k < r->differences.size(); ++k) geometric = geometric && r->differences[k] < r->differences[k - 1];
  const double halving = b.contraction_factor / a.contraction_factor;
  v.require(geometric);
  v.require(halving <= kHalving);
  v.detail << "factor " << fmt(a.contraction_factor) << " (c 1e-3, " << a.iterations << " it), " << fmt(b.contraction_factor)
           << " (c 5e-4, " << b.iterations << " it), factor ratio " << halving
           << " (halved: " << (halving <= kHalving ? "yes" : "no") << "); ";

  VacuumOptions o3 = o;
  o3.space_dim = 3;
  o3.nx = 5;
  VacuumOptions o3b = o3;
  o3b.beta = 2.0 * o3.beta;
  const BoundConstants lo = analytic_bound_constants(VacuumContext(o3), 1e-3);
  const BoundConstants hi = analytic_bound_constants(VacuumContext(o3b), 1e-3);
  const double rg = lo.c_gain / hi.c_gain, rl = lo.c_loss / hi.c_loss;
  v.require(rg >= kBetaLawLo && rg <= kBetaLawHi && rl >= kBetaLawLo && rl <= kBetaLawHi);
  v.detail << "beta 0.5 -> 1 gain constant ratio " << fmt(rg) << ", loss " << fmt(rl);
}

// 10. brackets
void brackets(Verdict& v) {
  for (int theta : {1, -1}) {
    VacuumOptions o;
    o.theta = theta;
    const VacuumContext ctx(o);
    const auto F0 = gaussian_vacuum_state(ctx, 1e-3);
    const BracketReport r = bracket_iteration(F0, ctx);
    const PicardReport p = picard_iteration(F0, ctx);
    const double d = weighted_distance(r.limit(), p.solution, ctx);
    bool sandwich = r.sandwich_ok;
    for (const auto& rec : r.records) sandwich = sandwich && rec.sandwich_ok;
    const auto& last = r.records.back();
    const bool bounds = last.min_lower >= 0.0 && (theta == 1 || last.max_upper <= 1.0);
    v.require(sandwich && r.contraction_factor < 1.0 && d <= kSchemeTol && bounds);
    v.detail << (theta == 1 ? "boson" : "fermion") << " k " << r.pair.k << " gap factor " << fmt(r.contraction_factor)
             << " sandwich(" << kSandwichTol << ") " << (sandwich ? "ok" : r.violation) << " |limit - picard| " << fmt(d)
             << " range [" << fmt(last.min_lower) << ", " << fmt(last.max_upper) << "]; ";
  }
}

// 11. dispersion identity and time-integral bound
void dispersion(Verdict& v) {
  const DispersionReport r = dispersion_checks(10000, 1100);
  v.require(r.identity_residual <= kIdentityTol && r.corrected_holds);
  v.detail << "identity residual " << fmt(r.identity_residual) << "; sqrt(pi/beta) bound max ratio "
           << fmt(r.max_ratio_corrected) << " (holds); sqrt(beta/pi) form fails on " << r.printed_failures << "/"
           << r.samples << " samples (max ratio " << fmt(r.max_ratio_printed) << ")";
}

}  // namespace

int main(int argc, char** argv) {
  std::setvbuf(stdout, nullptr, _IONBF, 0);
  const std::vector<std::pair<const char*, std::function<void(Verdict&)>>> criteria = {
      {"collision oracle equivalence", oracle_equivalence},
      {"conservation", conservation},
      {"equilibrium annihilation", annihilation},
      {"H-theorem", h_theorem},
      {"relaxation to quantum Maxwellian", relaxation},
      {"linearized operator", linearized},
      {"torus decay", torus_decay},
      {"local iteration", local_iteration_check},
      {"vacuum fixed point", vacuum_fixed_point},
      {"brackets", brackets},
      {"dispersion", dispersion},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = int(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Verdict v;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      criteria[i].second(v);
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail << "exception: " << e.what();
    }
    if (!v.pass) ++failed;
    std::printf("[%s] %2d %s: %s (%.1f s)\n", v.pass ? "PASS" : "FAIL", id, criteria[i].first, v.detail.str().c_str(),
                seconds_since(t0));
  }
  return failed == 0 ? 0 : 1;
}
