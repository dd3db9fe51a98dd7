#pragma once

// Run configuration, checkpoints and JSON reports shared by the command-line tool.

#include <bit>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qboltz/linearized.hpp"
#include "qboltz/maxwellian_solver.hpp"
#include "qboltz/vacuum_solver.hpp"

namespace qboltz {

// ---------------------------------------------------------------------------------------------
// Configuration: flat "key = value" text, '#' starts a comment.

class RunConfig {
 public:
  RunConfig() {
    auto put = [&](const char* k, std::string v) { values_[k] = std::move(v); };
    put("experiment", "");
    put("seed", "1");
    put("out", ".");
    put("threads", "0");
    put("grid.nv", "7");
    put("grid.rv", "4");
    put("quad.n_polar", "2");
    put("quad.n_azimuth", "4");
    put("space.dim", "1");
    put("space.nx", "16");
    put("space.period", format(0.5 * std::numbers::pi));
    put("eq.theta", "-1");
    put("eq.rho", "1");
    put("eq.a", "");
    put("eq.b", "");
    put("eq.c", "");
    put("solver.dt", "0.02");
    put("solver.t_end", "0.8");
    put("solver.pair_energy_cutoff", "30");
    put("solver.eps", "0.01");
    put("solver.samples", "20");
    put("vacuum.beta", "0.5");
    put("vacuum.space_dim", "1");
    put("vacuum.nx", "17");
    put("vacuum.box_radius", "7");
    put("vacuum.nv", "7");
    put("vacuum.velocity_radius", "4");
    put("vacuum.t_end", "0.5");
    put("vacuum.nt", "10");
    put("vacuum.r0", "0.2");
    put("vacuum.bc_margin", "1.25");
    put("vacuum.k_max", "40");
    put("vacuum.tolerance", "1e-12");
    put("vacuum.amplitude", "1e-3");
    put("dispersion.samples", "1000");
  }

  bool known(const std::string& key) const { return values_.count(key) != 0; }

  void set(const std::string& key, const std::string& value) {
    if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  const std::string& text(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  bool has_value(const std::string& key) const { return !text(key).empty(); }

  double real(const std::string& key) const {
    const std::string& s = text(key);
    char* end = nullptr;
    const double x = std::strtod(s.c_str(), &end);
    if (s.empty() || *end != '\0') throw ConfigError("config key '" + key + "' expects a number, got '" + s + "'");
    return x;
  }

  long integer(const std::string& key) const {
    const std::string& s = text(key);
    char* end = nullptr;
    const long x = std::strtol(s.c_str(), &end, 10);
    if (s.empty() || *end != '\0') throw ConfigError("config key '" + key + "' expects an integer, got '" + s + "'");
    return x;
  }

  Vec3 triple(const std::string& key) const {
    std::stringstream ss(text(key));
    Vec3 v{0.0, 0.0, 0.0};
    std::string part;
    for (int i = 0; i < 3; ++i) {
      if (!std::getline(ss, part, ',')) throw ConfigError("config key '" + key + "' expects three comma-separated numbers");
      char* end = nullptr;
      v[i] = std::strtod(part.c_str(), &end);
      if (*end != '\0' && *end != ' ') throw ConfigError("config key '" + key + "' has a bad component '" + part + "'");
    }
    return v;
  }

  void merge_text(const std::string& body, const std::string& origin) {
    std::istringstream is(body);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      const std::string t = trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
      set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
  }

  void merge_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    merge_text(ss.str(), path);
  }

  std::string resolved() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  void write(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot open " + path + " for writing");
    os << resolved();
  }

  // Equilibrium from eq.theta with eq.rho, or from eq.a / eq.b / eq.c when eq.a is given.
  QuantumMaxwellianParams equilibrium() const {
    const int th = int(integer("eq.theta"));
    if (th < -1 || th > 1) throw ConfigError("eq.theta must be -1, 0 or 1");
    if (!has_value("eq.a")) {
      const double rho = real("eq.rho");
      if (!(rho > 0.0) || (th == 1 && rho <= 1.0)) throw ConfigError("eq.rho out of range for eq.theta");
      return QuantumMaxwellianParams::isotropic(th, rho);
    }
    QuantumMaxwellianParams p;
    p.theta = th;
    p.a = real("eq.a");
    p.b = has_value("eq.b") ? triple("eq.b") : Vec3{0.0, 0.0, 0.0};
    p.c = has_value("eq.c") ? real("eq.c") : -1.0;
    return p;
  }

  VelocityGrid velocity_grid() const { return VelocityGrid(int(integer("grid.nv")), real("grid.rv")); }

  VacuumOptions vacuum(int theta) const {
    VacuumOptions o;
    o.theta = theta;
    o.beta = real("vacuum.beta");
    o.space_dim = int(integer("vacuum.space_dim"));
    o.nx = int(integer("vacuum.nx"));
    o.box_radius = real("vacuum.box_radius");
    o.nv = int(integer("vacuum.nv"));
    o.velocity_radius = real("vacuum.velocity_radius");
    o.n_polar = int(integer("quad.n_polar"));
    o.n_azimuth = int(integer("quad.n_azimuth"));
    o.t_end = real("vacuum.t_end");
    o.nt = int(integer("vacuum.nt"));
    o.r0 = real("vacuum.r0");
    o.bc_margin = real("vacuum.bc_margin");
    o.k_max = int(integer("vacuum.k_max"));
    o.tolerance = real("vacuum.tolerance");
    if (o.space_dim != 1 && o.space_dim != 3) throw ConfigError("vacuum.space_dim must be 1 or 3");
    return o;
  }

  static std::string format(double x) {
    std::ostringstream os;
    os.precision(17);
    os << x;
    return os.str();
  }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return {};
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------------------------
// Checkpoints: text header, then the payload as little-endian float64 in row-major order.
//
//   qboltz-checkpoint
//   schema 1
//   dims 17 343
//   theta -1
//   rho 0x1p+0
//   t 0x0p+0
//   end

inline constexpr int kCheckpointSchema = 1;

struct Checkpoint {
  std::vector<std::size_t> dims;
  int theta = 0;
  double rho = 1.0;
  double t = 0.0;
  std::vector<double> payload;

  std::size_t expected_size() const {
    std::size_t n = dims.empty() ? 0 : 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  if (c.payload.size() != c.expected_size())
    throw DimensionError("checkpoint payload has " + std::to_string(c.payload.size()) + " values, dims give " +
                         std::to_string(c.expected_size()));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot open " + path + " for writing");
  std::ostringstream h;
  h << "qboltz-checkpoint\nschema " << kCheckpointSchema << "\ndims";
  for (auto d : c.dims) h << ' ' << d;
  h << "\ntheta " << c.theta << "\n" << std::hexfloat << "rho " << c.rho << "\nt " << c.t << "\nend\n";
  os << h.str();
  std::vector<unsigned char> bytes(8 * c.payload.size());
  for (std::size_t n = 0; n < c.payload.size(); ++n) {
    const auto bits = std::bit_cast<std::uint64_t>(c.payload[n]);
    for (int b = 0; b < 8; ++b) bytes[8 * n + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  os.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!os) throw ConfigError("write to " + path + " failed");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path);
  auto line = [&](const char* what) {
    std::string s;
    if (!std::getline(in, s)) throw LoadError("checkpoint " + path + " ends inside the header (" + what + ")");
    return s;
  };
  auto field = [&](const std::string& s, const std::string& key) {
    if (s.rfind(key + " ", 0) != 0 && s != key) throw LoadError("checkpoint " + path + ": expected '" + key + "', got '" + s + "'");
    return s.size() > key.size() ? s.substr(key.size() + 1) : std::string();
  };
  auto number = [&](const std::string& s, const std::string& key) {
    char* end = nullptr;
    const double x = std::strtod(s.c_str(), &end);
    if (s.empty() || *end != '\0') throw LoadError("checkpoint " + path + ": bad value for " + key);
    return x;
  };
  if (line("magic") != "qboltz-checkpoint") throw LoadError(path + " is not a checkpoint");
  const int schema = int(number(field(line("schema"), "schema"), "schema"));
  if (schema != kCheckpointSchema)
    throw LoadError("checkpoint schema " + std::to_string(schema) + " in " + path + ", reader supports schema " +
                    std::to_string(kCheckpointSchema));
  Checkpoint c;
  {
    std::istringstream ds(field(line("dims"), "dims"));
    long d;
    while (ds >> d) {
      if (d < 0) throw LoadError("checkpoint " + path + ": negative dimension");
      c.dims.push_back(std::size_t(d));
    }
    if (!ds.eof()) throw LoadError("checkpoint " + path + ": bad dims line");
  }
  c.theta = int(number(field(line("theta"), "theta"), "theta"));
  c.rho = number(field(line("rho"), "rho"), "rho");
  c.t = number(field(line("t"), "t"), "t");
  if (line("end") != "end") throw LoadError("checkpoint " + path + ": header not terminated");

  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % 8 != 0) throw LoadError("checkpoint " + path + " is truncated (" + std::to_string(bytes.size()) + " payload bytes)");
  const std::size_t n = bytes.size() / 8;
  if (n != c.expected_size())
    throw LoadError("checkpoint " + path + " holds " + std::to_string(n) + " values, header dims give " +
                    std::to_string(c.expected_size()));
  c.payload.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= std::uint64_t(bytes[8 * k + b]) << (8 * b);
    c.payload[k] = std::bit_cast<double>(bits);
  }
  return c;
}

// ---------------------------------------------------------------------------------------------
// JSON reports

using Json = nlohmann::ordered_json;

inline Json to_json(const BracketReport& r) {
  Json recs = Json::array();
  for (const auto& k : r.records)
    recs.push_back({{"k", k.k},
                    {"sup_gap", k.sup_gap},
                    {"weighted_gap", k.weighted_gap},
                    {"min_lower", k.min_lower},
                    {"max_upper", k.max_upper},
                    {"sandwich_ok", k.sandwich_ok}});
  return {{"theta", r.theta},
          {"records", recs},
          {"summary",
           {{"iterations", r.pair.k},
            {"contraction_factor", r.contraction_factor},
            {"beginning_condition", r.beginning_condition},
            {"sandwich_ok", r.sandwich_ok},
            {"profile_margin", r.profile.margin},
            {"profile_residual", r.profile.residual},
            {"violation", r.violation}}}};
}

inline Json to_json(const PicardReport& r) {
  return {{"iterations", r.iterations},
          {"differences", r.differences},
          {"contraction_factor", r.contraction_factor},
          {"contracting", r.contracting},
          {"solution_norm", r.solution_norm},
          {"within_ball", r.within_ball},
          {"message", r.message}};
}

inline Json to_json(const DispersionReport& r) {
  return {{"samples", r.samples},
          {"identity_residual", r.identity_residual},
          {"printed_identity_residual", r.printed_identity_residual},
          {"max_ratio_sqrt_pi_over_beta", r.max_ratio_corrected},
          {"max_ratio_sqrt_beta_over_pi", r.max_ratio_printed},
          {"sqrt_pi_over_beta_holds", r.corrected_holds},
          {"sqrt_beta_over_pi_holds", r.printed_holds},
          {"sqrt_beta_over_pi_failures", r.printed_failures},
          {"verified_constant", r.verified_constant}};
}

inline Json to_json(const SpectrumReport& r, const QuantumMaxwellianParams& p, int nv, int lowest = 12) {
  std::vector<double> ev(r.eigenvalues.begin(), r.eigenvalues.begin() + std::min<std::ptrdiff_t>(lowest, std::ptrdiff_t(r.eigenvalues.size())));
  return {{"theta", p.theta},
          {"rho", p.rho()},
          {"nv", nv},
          {"eigenvalues", ev},
          {"complement_gap", r.complement_gap},
          {"null_count", r.null_count},
          {"delta", r.delta}};
}

inline Json to_json(const BoundConstants& b) {
  return {{"beta", b.beta},        {"amplitude", b.amplitude}, {"gain_norm", b.gain_norm},
          {"loss_norm", b.loss_norm}, {"c_gain", b.c_gain},     {"c_loss", b.c_loss},
          {"boundary_weight", b.boundary_weight}, {"boundary_flag", b.boundary_flag}};
}

inline void write_json(const Json& j, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot open " + path + " for writing");
  os << j.dump(2) << "\n";
}

}  // namespace qboltz
