#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "qboltz/harness.hpp"

using namespace qboltz;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "qboltz_harness_tests";
  fs::create_directories(dir);
  return dir / name;
}

Checkpoint random_checkpoint(unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ud(-1.0, 1.0);
  Checkpoint c;
  c.dims = {5, 7, 3};
  c.theta = -1;
  c.rho = 1.0 / 3.0;
  c.t = 0.1 + 0.2;
  c.payload.resize(c.expected_size());
  for (auto& x : c.payload) x = ud(rng) * std::exp(40.0 * ud(rng));
  c.payload[0] = -0.0;
  c.payload[1] = std::numeric_limits<double>::denorm_min();
  c.payload[2] = std::numeric_limits<double>::max();
  return c;
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

void write_bytes(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary);
  os << s;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(RunConfig, ParsesFlatKeysWithComments) {
  RunConfig c;
  c.merge_text("# sizes\ngrid.nv = 9   # per axis\n\n  eq.theta=1\nvacuum.beta = 0.25\neq.b = 0.1, 0, -0.2\n", "inline");
  EXPECT_EQ(c.integer("grid.nv"), 9);
  EXPECT_EQ(c.integer("eq.theta"), 1);
  EXPECT_DOUBLE_EQ(c.real("vacuum.beta"), 0.25);
  const Vec3 b = c.triple("eq.b");
  EXPECT_DOUBLE_EQ(b[0], 0.1);
  EXPECT_DOUBLE_EQ(b[2], -0.2);
}

TEST(RunConfig, UnknownKeyIsRejectedByName) {
  RunConfig c;
  try {
    c.merge_text("grid.nv = 7\ngrid.nvv = 9\n", "inline");
    FAIL() << "no error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("grid.nvv"), std::string::npos);
  }
  EXPECT_THROW(c.set("solver.nonexistent", "1"), ConfigError);
  EXPECT_THROW(c.merge_text("no equals sign\n", "inline"), ConfigError);
}

TEST(RunConfig, BadValuesAndMissingFiles) {
  RunConfig c;
  c.set("grid.nv", "seven");
  EXPECT_THROW(c.integer("grid.nv"), ConfigError);
  c.set("vacuum.beta", "0.5x");
  EXPECT_THROW(c.real("vacuum.beta"), ConfigError);
  EXPECT_THROW(c.merge_file(scratch("absent.cfg").string()), ConfigError);
  c.set("eq.theta", "2");
  EXPECT_THROW(c.equilibrium(), ConfigError);
}

TEST(RunConfig, ResolvedConfigRoundTrips) {
  RunConfig a;
  a.set("grid.nv", "11");
  a.set("vacuum.amplitude", "5e-4");
  a.set("eq.a", "-0.3");
  const fs::path p = scratch("resolved.cfg");
  a.write(p.string());
  RunConfig b;
  b.merge_file(p.string());
  EXPECT_EQ(a.resolved(), b.resolved());
  EXPECT_DOUBLE_EQ(b.equilibrium().a, -0.3);
}

TEST(RunConfig, BuildsVacuumOptions) {
  RunConfig c;
  c.set("vacuum.nt", "6");
  const VacuumOptions o = c.vacuum(-1);
  EXPECT_EQ(o.theta, -1);
  EXPECT_EQ(o.nt, 6);
  EXPECT_DOUBLE_EQ(o.beta, 0.5);
  c.set("vacuum.space_dim", "2");
  EXPECT_THROW(c.vacuum(1), ConfigError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const Checkpoint c = random_checkpoint(3);
  const fs::path p = scratch("round.ckpt");
  save_checkpoint(c, p.string());
  const Checkpoint d = load_checkpoint(p.string());
  EXPECT_EQ(d.dims, c.dims);
  EXPECT_EQ(d.theta, c.theta);
  EXPECT_TRUE(same_bits(d.rho, c.rho));
  EXPECT_TRUE(same_bits(d.t, c.t));
  ASSERT_EQ(d.payload.size(), c.payload.size());
  for (std::size_t n = 0; n < c.payload.size(); ++n) EXPECT_TRUE(same_bits(d.payload[n], c.payload[n])) << n;
}

TEST(Checkpoint, PayloadIsLittleEndianAfterHeader) {
  Checkpoint c;
  c.dims = {1};
  c.payload = {1.0};
  const fs::path p = scratch("one.ckpt");
  save_checkpoint(c, p.string());
  const std::string s = read_bytes(p);
  ASSERT_GE(s.size(), 8u);
  const std::string tail = s.substr(s.size() - 8);
  // 1.0 = 0x3ff0000000000000
  EXPECT_EQ(static_cast<unsigned char>(tail[7]), 0x3f);
  EXPECT_EQ(static_cast<unsigned char>(tail[6]), 0xf0);
  for (int b = 0; b < 6; ++b) EXPECT_EQ(tail[std::size_t(b)], '\0');
  EXPECT_EQ(s.rfind("qboltz-checkpoint\nschema 1\n", 0), 0u);
}

TEST(Checkpoint, TruncatedFileFailsToLoad) {
  const fs::path p = scratch("trunc.ckpt");
  save_checkpoint(random_checkpoint(5), p.string());
  const std::string s = read_bytes(p);
  write_bytes(p, s.substr(0, s.size() - 13));
  EXPECT_THROW(load_checkpoint(p.string()), LoadError);
  write_bytes(p, s.substr(0, 30));
  EXPECT_THROW(load_checkpoint(p.string()), LoadError);
}

TEST(Checkpoint, DimsMismatchFailsToLoad) {
  const fs::path p = scratch("dims.ckpt");
  save_checkpoint(random_checkpoint(7), p.string());
  std::string s = read_bytes(p);
  const auto at = s.find("dims 5 7 3");
  ASSERT_NE(at, std::string::npos);
  s.replace(at, 10, "dims 5 7 4");
  write_bytes(p, s);
  EXPECT_THROW(load_checkpoint(p.string()), LoadError);
}

TEST(Checkpoint, SchemaMismatchNamesBothVersions) {
  const fs::path p = scratch("schema.ckpt");
  save_checkpoint(random_checkpoint(9), p.string());
  std::string s = read_bytes(p);
  s.replace(s.find("schema 1"), 8, "schema 2");
  write_bytes(p, s);
  try {
    load_checkpoint(p.string());
    FAIL() << "no error";
  } catch (const LoadError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("schema 2"), std::string::npos);
    EXPECT_NE(m.find("schema 1"), std::string::npos);
  }
  write_bytes(p, "not a checkpoint\n");
  EXPECT_THROW(load_checkpoint(p.string()), LoadError);
}

TEST(Checkpoint, SaveRejectsInconsistentPayload) {
  Checkpoint c;
  c.dims = {2, 2};
  c.payload = {1.0, 2.0, 3.0};
  EXPECT_THROW(save_checkpoint(c, scratch("bad.ckpt").string()), DimensionError);
}

TEST(Reports, BracketJsonCarriesPerIterationRecords) {
  BracketReport r;
  r.theta = -1;
  r.records = {BracketRecord{0, 2.0, 3.0, 0.0, 2.0, true}, BracketRecord{1, 0.5, 0.7, 0.0, 1.5, true}};
  r.pair.k = 1;
  r.contraction_factor = 0.25;
  const Json j = to_json(r);
  ASSERT_EQ(j["records"].size(), 2u);
  for (const char* key : {"k", "sup_gap", "weighted_gap", "min_lower", "max_upper", "sandwich_ok"})
    EXPECT_TRUE(j["records"][0].contains(key)) << key;
  EXPECT_EQ(j["records"][1]["k"], 1);
  EXPECT_DOUBLE_EQ(j["summary"]["contraction_factor"].get<double>(), 0.25);
  const Json back = Json::parse(j.dump());
  EXPECT_EQ(back, j);
}

TEST(Reports, DispersionJsonIsDeterministicForASeed) {
  const Json a = to_json(dispersion_checks(300, 4)), b = to_json(dispersion_checks(300, 4));
  EXPECT_EQ(a.dump(), b.dump());
  EXPECT_EQ(a["verified_constant"], "sqrt(pi/beta)");
  EXPECT_FALSE(a["sqrt_beta_over_pi_holds"].get<bool>());
}

TEST(Reports, TrajectoryCsvHasDeclaredColumns) {
  const fs::path p = scratch("traj.csv");
  TrajectoryRow r;
  r.t = 0.5;
  r.mass = 1.25;
  write_trajectory_csv(p.string(), {r, r});
  std::ifstream in(p);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "t,mass,mom_x,mom_y,mom_z,energy,entropy,l2_f,nu_f,sup_f");
  EXPECT_EQ(row.rfind("0.5,1.25,", 0), 0u);
}
