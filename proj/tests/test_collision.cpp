#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "fixtures.hpp"
#include "oracles.hpp"
#include "qboltz/collision.hpp"

using namespace qboltz;
using fixture::max_abs;
using fixture::max_abs_diff;

namespace {

constexpr double kE = std::numbers::e;

std::vector<double> mu_plus_bump(const VelocityGrid& g, int theta) {
  auto p = QuantumMaxwellianParams::isotropic(theta, kE);
  return g.sample([&](const Vec3& v) {
    double bump = 0.15 * std::exp(-2.0 * ((v[0] - 0.8) * (v[0] - 0.8) + v[1] * v[1] + (v[2] + 0.4) * (v[2] + 0.4)));
    return mu(v, p) + bump;
  });
}

}  // namespace

TEST(Collide, MatchesQuadrupleLoopOracle) {
  VelocityGrid g(7, 3.0);
  CollisionGeometry geom(g, 2, 4);
  std::mt19937_64 rng(5);
  for (int theta : {-1, 0, 1}) {
    for (auto f : {mu_plus_bump(g, theta), fixture::random_admissible(g, theta, rng)}) {
      auto fast = collide(DistributionField(f, theta), geom);
      auto ref = oracle::naive_collide(f, g, geom.sphere, theta);
      EXPECT_LE(max_abs_diff(fast, ref), 1e-13 * max_abs(ref)) << "theta " << theta;
    }
  }
}

TEST(Collide, ClassicalCaseIsBilinearPart) {
  VelocityGrid g(9, 4.0);
  CollisionGeometry geom(g, 4, 8);
  std::mt19937_64 rng(7);
  auto f = fixture::random_admissible(g, 0, rng);
  DistributionField F(f, 0);
  auto q = collide(F, geom), q1 = collide_q1(F, geom);
  EXPECT_LE(max_abs_diff(q, q1), 1e-15 * max_abs(q));
}

TEST(Collide, RejectsMismatchedLattice) {
  CollisionGeometry geom(VelocityGrid(7, 3.0), 2, 4);
  DistributionField F(std::vector<double>(27, 0.1), 0);
  EXPECT_THROW(collide(F, geom), DimensionError);
  EXPECT_THROW(loss_rate(F, F, geom), DimensionError);
}

TEST(Collide, EquilibriumVanishesWithMaxwellianEnvelope) {
  VelocityGrid g(11, 5.0);
  for (int theta : {-1, 0, 1}) {
    auto p = QuantumMaxwellianParams::isotropic(theta, kE);
    CollisionGeometry geom(g, 4, 8, Envelope::maxwellian(p));
    auto qmu = collide(DistributionField(sample_mu(p, g), theta), geom);
    auto qb = collide(DistributionField(mu_plus_bump(g, theta), theta), geom);
    EXPECT_LE(max_abs(qmu), 1e-10 * max_abs(qb)) << "theta " << theta;
  }
}

TEST(Collide, EquilibriumResidualShrinksUnderRefinementPlain) {
  // Plain trilinear: the residual is pure interpolation error and shrinks with h.
  double prev = 0.0;
  for (int n : {9, 13, 17}) {
    VelocityGrid g(n, 4.0);
    CollisionGeometry geom(g, 4, 8);
    auto p = QuantumMaxwellianParams::isotropic(-1, kE);
    double r = max_abs(collide(DistributionField(sample_mu(p, g), -1), geom));
    if (prev > 0.0) EXPECT_LT(r, prev);
    prev = r;
  }
}

TEST(GainLoss, SplitAndPositivity) {
  VelocityGrid g(9, 4.0);
  CollisionGeometry geom(g, 4, 8);
  std::mt19937_64 rng(9);
  for (int theta : {-1, 0, 1}) {
    for (int rep = 0; rep < 3; ++rep) {
      auto f = fixture::random_admissible(g, theta, rng);
      // Fermion gain F'F'_*(1 - F - F_*) is sign-definite only while F <= 1/2.
      if (theta == -1)
        for (double& x : f) x = std::min(x, 0.5);
      DistributionField F(f, theta, true);
      auto gain = collide_gain(F, geom), loss = collide_loss(F, geom), q = collide(F, geom);
      double scale = std::max(max_abs(gain), max_abs(loss));
      for (std::size_t n = 0; n < g.size(); ++n) {
        ASSERT_GE(gain[n], 0.0);
        ASSERT_GE(loss[n], 0.0);
        ASSERT_LE(std::abs(gain[n] - loss[n] - q[n]), 1e-12 * scale);
      }
      auto rate = loss_rate(F, F, geom);
      for (std::size_t n = 0; n < g.size(); ++n) ASSERT_NEAR(loss[n], F.values[n] * rate[n], 1e-14 * scale);
    }
  }
}

TEST(GainLoss, FermionGainCanBeNegativeAboveOneHalf) {
  VelocityGrid g(7, 3.0);
  CollisionGeometry geom(g, 2, 4);
  auto f = g.sample([](const Vec3& v) { return 0.95 * std::exp(-0.05 * norm2(v)); });
  auto gain = collide_gain(DistributionField(f, -1, true), geom);
  EXPECT_LT(*std::min_element(gain.begin(), gain.end()), 0.0);
}

TEST(GainLoss, ZeroFieldGivesZero) {
  VelocityGrid g(7, 3.0);
  CollisionGeometry geom(g, 2, 4);
  DistributionField Z(std::vector<double>(g.size(), 0.0), -1);
  EXPECT_EQ(max_abs(collide_gain(Z, geom)), 0.0);
  EXPECT_EQ(max_abs(collide_loss(Z, geom)), 0.0);
  EXPECT_EQ(max_abs(loss_rate(Z, DistributionField(std::vector<double>(g.size(), 0.5), -1), geom)), 0.0);
}

TEST(GainLoss, DetailedBalanceAtEquilibrium) {
  VelocityGrid g(11, 5.0);
  for (int theta : {-1, 1}) {
    auto p = QuantumMaxwellianParams::isotropic(theta, kE);
    CollisionGeometry geom(g, 4, 8, Envelope::maxwellian(p));
    DistributionField F(sample_mu(p, g), theta);
    auto gain = collide_gain(F, geom), loss = collide_loss(F, geom);
    EXPECT_LE(max_abs_diff(gain, loss), 1e-10 * max_abs(loss));
  }
}

TEST(LossRate, ClassicalGaussianMatchesRadialReference) {
  VelocityGrid g(13, 5.0);
  CollisionGeometry geom(g, 8, 16);
  auto gauss = g.sample([](const Vec3& v) { return std::exp(-norm2(v)); });
  DistributionField G(gauss, 0), H0(std::vector<double>(g.size(), 0.0), 0);
  auto r = loss_rate(G, H0, geom);
  for (int i : {6, 7, 8, 9, 10}) {
    std::size_t site = g.index(i, 6, 6);
    double s = std::abs(g.coord(i));
    double ref = oracle::classical_collision_frequency(s);
    // h = 5/6 lattice sum over the |v - u| kink plus the 8x16 sphere rule error
    EXPECT_NEAR(r[site], ref, 3e-2 * ref) << "speed " << s;
  }
  // Reference itself grows like 2 pi^{5/2} |v| at large speed.
  double far = oracle::classical_collision_frequency(8.0);
  EXPECT_NEAR(far / (8.0 * 2.0 * std::pow(std::numbers::pi, 2.5)), 1.0, 2e-2);
}

TEST(LossRate, VacuumBlockingFieldIsClassicalForAnyStatistics) {
  VelocityGrid g(9, 4.0);
  CollisionGeometry geom(g, 4, 8);
  std::mt19937_64 rng(13);
  auto gvals = fixture::random_admissible(g, 0, rng);
  auto ref = loss_rate(DistributionField(gvals, 0), DistributionField(std::vector<double>(g.size(), 0.0), 0), geom);
  for (int theta : {-1, 1}) {
    auto r = loss_rate(DistributionField(gvals, theta), DistributionField(std::vector<double>(g.size(), 0.0), theta), geom);
    EXPECT_LE(max_abs_diff(r, ref), 1e-15 * max_abs(ref));
  }
}

TEST(QSplit, BilinearPlusCubicEqualsFull) {
  VelocityGrid g(9, 4.0);
  CollisionGeometry geom(g, 4, 8);
  std::mt19937_64 rng(17);
  for (int theta : {-1, 1}) {
    DistributionField F(fixture::random_admissible(g, theta, rng), theta);
    auto q = collide(F, geom), q1 = collide_q1(F, geom), q2 = collide_q2(F, geom);
    double scale = max_abs(q1) + max_abs(q2);
    for (std::size_t n = 0; n < g.size(); ++n) ASSERT_LE(std::abs(q1[n] + theta * q2[n] - q[n]), 1e-12 * scale);
  }
}

TEST(QSplit, PartsCancelAtEquilibrium) {
  VelocityGrid g(11, 5.0);
  for (int theta : {-1, 1}) {
    auto p = QuantumMaxwellianParams::isotropic(theta, kE);
    CollisionGeometry geom(g, 4, 8, Envelope::maxwellian(p));
    DistributionField F(sample_mu(p, g), theta);
    auto q1 = collide_q1(F, geom), q2 = collide_q2(F, geom);
    for (std::size_t n = 0; n < g.size(); ++n) ASSERT_NEAR(q1[n], -theta * q2[n], 1e-10 * max_abs(q1));
  }
}

TEST(SplitOperators, PTildeMinusPIsNonnegativeLossAndMatchesFull) {
  // Q = Q_p - F Q~_p for a single field.
  VelocityGrid g(9, 4.0);
  CollisionGeometry geom(g, 4, 8);
  std::mt19937_64 rng(19);
  for (int theta : {-1, 0, 1}) {
    DistributionField F(fixture::random_admissible(g, theta, rng), theta);
    auto q = collide(F, geom), qp = collide_p(F, F, F, geom), qt = collide_p_tilde(F, F, geom);
    DistributionField Fcopy(F.values, theta);
    auto qt_cross = collide_p_tilde(Fcopy, F, geom);
    for (std::size_t n = 0; n < g.size(); ++n) {
      ASSERT_NEAR(qp[n] - F.values[n] * qt[n], q[n], 1e-12 * max_abs(qp));
      ASSERT_NEAR(qt_cross[n], qt[n], 1e-12 * max_abs(qt));
    }
  }
}

TEST(WeakForm, InvariantsCancelToRounding) {
  VelocityGrid g(11, 4.0);
  CollisionGeometry geom(g, 4, 8);
  std::mt19937_64 rng(23);
  for (int theta : {-1, 0, 1}) {
    for (int rep = 0; rep < 5; ++rep) {
      DistributionField F(fixture::random_admissible(g, theta, rng), theta);
      auto w = weak_form_invariants(F, geom);
      auto scale = weak_form_invariants_scale(geom, theta, max_abs(F.values));
      for (int t = 0; t < 5; ++t) EXPECT_LE(std::abs(w[t]), 1e-10 * scale[t]) << "theta " << theta << " invariant " << t;
    }
  }
}

TEST(WeakForm, CubicMomentIsNotConservedAndMatchesOracle) {
  VelocityGrid g(7, 3.0);
  CollisionGeometry geom(g, 2, 4);
  std::mt19937_64 rng(29);
  for (int theta : {-1, 0, 1}) {
    auto f = fixture::random_admissible(g, theta, rng);
    auto cube = [](const Vec3& v) { return v[0] * v[0] * v[0]; };
    double w = weak_form(DistributionField(f, theta), geom, [&](const Vec3& v, double) { return cube(v); });
    double ref = oracle::naive_weak_form(f, g, geom.sphere, theta, cube);
    EXPECT_GT(std::abs(ref), 1e-6);
    EXPECT_NEAR(w, ref, 1e-12 * std::abs(ref));
  }
}

TEST(Entropy, ClassicalGaussian) {
  VelocityGrid g(31, 5.0);
  auto f = g.sample([](const Vec3& v) { return std::exp(-norm2(v)); });
  // F ln(1/F) = |v|^2 e^{-|v|^2}, integral (3/2) pi^{3/2}
  EXPECT_NEAR(entropy(DistributionField(f, 0), g), 1.5 * std::pow(std::numbers::pi, 1.5), 1e-6);
}

TEST(Entropy, DomainErrorsNameTheSite) {
  VelocityGrid g(5, 1.0);
  std::vector<double> f(g.size(), 0.5);
  f[g.index(1, 2, 3)] = 0.0;
  try {
    entropy(DistributionField(f, 0), g);
    FAIL();
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("(1,2,3)"), std::string::npos);
  }
  f[g.index(1, 2, 3)] = 1.0;
  EXPECT_NO_THROW(entropy(DistributionField(f, 1), g));
  EXPECT_THROW(entropy(DistributionField(f, -1), g), DomainError);
  CollisionGeometry geom(g, 2, 4);
  EXPECT_THROW(entropy_dissipation(DistributionField(f, -1), geom), DomainError);
}

TEST(EntropyDissipation, ZeroAtEquilibrium) {
  VelocityGrid g(11, 5.0);
  for (int theta : {-1, 0, 1}) {
    auto p = QuantumMaxwellianParams::isotropic(theta, kE);
    CollisionGeometry geom(g, 4, 8, Envelope::maxwellian(p));
    DistributionField F(sample_mu(p, g), theta);
    std::mt19937_64 rng(31);
    DistributionField R(fixture::random_admissible(g, theta, rng), theta);
    double d = entropy_dissipation(F, geom);
    EXPECT_LE(std::abs(d), 1e-10 * entropy_dissipation(R, geom));
  }
}

TEST(EntropyDissipation, PositiveAndEqualsLogWeakForm) {
  VelocityGrid g(9, 4.0);
  CollisionGeometry geom(g, 4, 8);
  std::mt19937_64 rng(37);
  for (int theta : {-1, 0, 1}) {
    for (int rep = 0; rep < 4; ++rep) {
      DistributionField F(fixture::random_admissible(g, theta, rng), theta, true);
      double d = entropy_dissipation(F, geom);
      EXPECT_GT(d, 0.0);
      double w = weak_form(F, geom, [theta](const Vec3&, double f) { return std::log(f / (1.0 + theta * f)); });
      EXPECT_NEAR(-w, d, 1e-9 * d);
    }
  }
}

#ifdef _OPENMP
TEST(Collide, ThreadCountDoesNotChangeBits) {
  VelocityGrid g(9, 4.0);
  CollisionGeometry geom(g, 4, 8);
  std::mt19937_64 rng(41);
  DistributionField F(fixture::random_admissible(g, -1, rng), -1);
  int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  auto a = collide(F, geom);
  omp_set_num_threads(3);
  auto b = collide(F, geom);
  omp_set_num_threads(saved);
  EXPECT_EQ(a, b);
}
#endif
