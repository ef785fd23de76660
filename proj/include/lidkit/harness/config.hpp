#pragma once

// Experiment configuration: an INI file with one experiment per file.
//
//   [manifold]    kind = circle | sphere | affine | swiss_roll | point_set | union
//   [density]     kind = uniform | gaussian | empirical (mixture for unions)
//   [component N] one section per union component (kind, weight, ...)
//   [schedule]    kind = ve | vp
//   [estimators]  list, trace mode, oracle options
//   [grid]        start/stop/step or values
//   [queries]     explicit points and/or sampled points
//   [run]         seed, out, format, jobs, timing
//
// Lists use commas; point lists separate points with ';'.

#include "lidkit/convolve.hpp"
#include "lidkit/estimators.hpp"
#include "lidkit/geometry.hpp"
#include "lidkit/schedule.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace lidkit {

/// Anything wrong with a configuration file or its values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

inline const std::vector<std::string>& known_estimators() {
  static const std::vector<std::string> names = {"flipd", "flipd_grid_mean", "gauss_slope", "uniform_slope", "lidl",
                                                 "ball_count"};
  return names;
}

enum class TraceChoice { Auto, Exact, FiniteDifference, Hutchinson };

struct EstimatorOptions {
  std::vector<std::string> names;
  TraceChoice trace = TraceChoice::Auto;
  std::size_t probes = 1000;
  ProbeDist probe_dist = ProbeDist::Rademacher;
  /// Relative FD step (times sigma(t)) of the numeric score field.
  double score_rel_step = 1e-2;
  OracleOptions oracle;
  /// Ball probabilities: exact where available, Monte Carlo bank otherwise.
  std::size_t ball_samples = 1000000;
  double uniform_step = 0.05;
  /// LIDL and ball-count rows regress over [delta, delta + span] on `points` nodes.
  double lidl_span = 3.0;
  int lidl_points = 4;
  double count_span = 1.5;
  int count_points = 7;
  std::size_t count_samples = 100000;
  std::size_t count_k_min = kMinBallCount;
  /// Grid for flipd_grid_mean: delta + offsets.
  std::vector<double> grid_mean_offsets = {-0.5, 0.0, 0.5};
};

struct RunOptions {
  std::uint64_t seed = 0;
  std::string out;
  std::string format = "csv";
  int jobs = 1;
  bool timing = true;
};

struct ExperimentConfig {
  DensitySpec density;
  ScheduleSpec schedule;
  EstimatorOptions estimators;
  std::vector<double> deltas;
  std::vector<QueryPoint> queries;
  RunOptions run;
};

namespace config_detail {

using boost::property_tree::ptree;

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double to_double(const std::string& s, const std::string& key) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": not a number: '" + s + "'");
  }
}

inline std::vector<double> parse_numbers(const std::string& s, const std::string& key) {
  std::vector<double> out;
  for (const auto& item : split(s, ',')) out.push_back(to_double(item, key));
  return out;
}

inline Point parse_point(const std::string& s, const std::string& key) {
  const auto v = parse_numbers(s, key);
  if (v.empty()) throw ConfigError(key + ": empty point");
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline Points parse_points(const std::string& s, const std::string& key) {
  Points out;
  for (const auto& item : split(s, ';')) out.push_back(parse_point(item, key));
  return out;
}

/// Rows separated by ';', entries by ','.
inline Eigen::MatrixXd parse_matrix(const std::string& s, const std::string& key) {
  const auto rows = split(s, ';');
  if (rows.empty()) throw ConfigError(key + ": empty matrix");
  std::vector<std::vector<double>> vals;
  for (const auto& r : rows) vals.push_back(parse_numbers(r, key));
  Eigen::MatrixXd m(vals.size(), vals.front().size());
  for (std::size_t i = 0; i < vals.size(); ++i) {
    if (vals[i].size() != vals.front().size()) throw ConfigError(key + ": ragged matrix");
    for (std::size_t j = 0; j < vals[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = vals[i][j];
  }
  return m;
}

class Section {
 public:
  Section(const ptree* tree, std::string name) : tree_(tree), name_(std::move(name)) {}

  bool has(const std::string& key) const { return tree_ && tree_->get_optional<std::string>(key).has_value(); }
  std::string str(const std::string& key) const {
    if (!has(key)) throw ConfigError("[" + name_ + "] missing key '" + key + "'");
    return trim(tree_->get<std::string>(key));
  }
  std::string str(const std::string& key, const std::string& fallback) const { return has(key) ? str(key) : fallback; }
  double num(const std::string& key) const { return to_double(str(key), qualified(key)); }
  double num(const std::string& key, double fallback) const { return has(key) ? num(key) : fallback; }
  long long integer(const std::string& key, long long fallback) const {
    if (!has(key)) return fallback;
    const double v = num(key);
    if (v != std::floor(v)) throw ConfigError(qualified(key) + ": expected an integer");
    return static_cast<long long>(v);
  }
  std::string qualified(const std::string& key) const { return "[" + name_ + "] " + key; }
  const std::string& name() const { return name_; }

 private:
  const ptree* tree_;
  std::string name_;
};

inline Section section(const ptree& root, const std::string& name) {
  const auto child = root.get_child_optional(ptree::path_type(name, '\0'));
  return Section(child ? &*child : nullptr, name);
}

inline ManifoldSpec parse_single_manifold(const Section& s, int ambient_dim) {
  const auto kind = s.str("kind");
  if (kind == "circle" || kind == "sphere") {
    const int d = kind == "circle" ? 1 : static_cast<int>(s.integer("intrinsic_dim", 2));
    const int D = static_cast<int>(s.integer("ambient_dim", ambient_dim > 0 ? ambient_dim : d + 1));
    std::optional<Point> center;
    if (s.has("center")) center = parse_point(s.str("center"), s.qualified("center"));
    return ManifoldSpec::sphere(s.num("radius", 1.0), d, D, center);
  }
  if (kind == "affine") {
    const int D = static_cast<int>(s.integer("ambient_dim", ambient_dim));
    if (s.has("basis")) {
      // One basis vector per ';'-separated entry.
      const Eigen::MatrixXd cols = parse_matrix(s.str("basis"), s.qualified("basis")).transpose();
      const Point offset = s.has("offset") ? parse_point(s.str("offset"), s.qualified("offset")) : Point::Zero(cols.rows());
      return ManifoldSpec::affine(cols, offset);
    }
    if (D < 1) throw ConfigError(s.qualified("ambient_dim") + " required for affine");
    const int d = static_cast<int>(s.integer("intrinsic_dim", 1));
    auto m = ManifoldSpec::coordinate_subspace(d, D);
    if (s.has("offset")) {
      const auto& a = *m.as<AffineSubspace>();
      return ManifoldSpec::affine(a.basis, parse_point(s.str("offset"), s.qualified("offset")));
    }
    return m;
  }
  if (kind == "swiss_roll") return ManifoldSpec::swiss_roll(static_cast<int>(s.integer("ambient_dim", 3)));
  if (kind == "point_set" || kind == "point") return ManifoldSpec::point_set(parse_points(s.str("points"), s.qualified("points")));
  throw ConfigError(s.qualified("kind") + ": unknown manifold kind '" + kind + "'");
}

/// A density for a non-union manifold; `s` holds the density keys and
/// `kind_key` names the key selecting the density kind.
inline DensitySpec parse_single_density(const ManifoldSpec& m, const Section& s, const std::string& kind_key,
                                        const std::string& fallback_kind) {
  const auto kind = s.str(kind_key, fallback_kind);
  if (kind == "uniform") return DensitySpec::uniform(m);
  if (kind == "empirical") return DensitySpec::empirical(m);
  if (kind == "gaussian") {
    const auto* a = m.as<AffineSubspace>();
    if (!a) throw ConfigError(s.qualified(kind_key) + ": gaussian needs an affine manifold");
    const auto d = a->basis.cols();
    Eigen::VectorXd mean = s.has("mean") ? parse_point(s.str("mean"), s.qualified("mean")) : Eigen::VectorXd::Zero(d);
    Eigen::MatrixXd cov = s.has("covariance") ? parse_matrix(s.str("covariance"), s.qualified("covariance"))
                                              : Eigen::MatrixXd::Identity(d, d);
    return DensitySpec::gaussian_on_affine(m, mean, cov);
  }
  throw ConfigError(s.qualified("density") + ": unknown density kind '" + kind + "'");
}

inline std::string default_density_kind(const ManifoldSpec& m) {
  if (m.as<PointSet>()) return "empirical";
  if (m.as<AffineSubspace>()) return "gaussian";
  return "uniform";
}

inline DensitySpec parse_density(const ptree& root) {
  const auto ms = section(root, "manifold");
  const auto ds = section(root, "density");
  const auto kind = ms.str("kind");
  if (kind != "union") {
    const auto m = parse_single_manifold(ms, static_cast<int>(ms.integer("ambient_dim", 0)));
    return parse_single_density(m, ds, "kind", default_density_kind(m));
  }
  const int D = static_cast<int>(ms.integer("ambient_dim", 0));
  std::vector<DensitySpec> parts;
  std::vector<double> weights;
  for (int j = 1;; ++j) {
    const auto cs = section(root, "component " + std::to_string(j));
    if (!cs.has("kind")) break;
    const auto m = parse_single_manifold(cs, D);
    parts.push_back(parse_single_density(m, cs, "density", default_density_kind(m)));
    weights.push_back(cs.num("weight"));
  }
  if (parts.empty()) throw ConfigError("[manifold] kind = union needs [component 1], [component 2], ...");
  return DensitySpec::mixture(std::move(parts), std::move(weights), ms.num("separation"));
}

inline ScheduleSpec parse_schedule(const ptree& root) {
  const auto s = section(root, "schedule");
  const auto kind = s.str("kind", "ve");
  if (kind == "ve") return ScheduleSpec::ve(s.num("sigma_min", 1e-4), s.num("sigma_max", 50.0));
  if (kind == "vp") return ScheduleSpec::vp(s.num("beta_min", 0.1), s.num("beta_max", 20.0));
  throw ConfigError(s.qualified("kind") + ": unknown schedule '" + kind + "'");
}

inline Method parse_method(const std::string& s, const std::string& key) {
  if (s == "auto") return Method::Auto;
  if (s == "closed_form") return Method::ClosedForm;
  if (s == "quadrature") return Method::Quadrature;
  if (s == "monte_carlo") return Method::MonteCarlo;
  throw ConfigError(key + ": unknown method '" + s + "'");
}

inline EstimatorOptions parse_estimators(const ptree& root, std::uint64_t seed) {
  const auto s = section(root, "estimators");
  EstimatorOptions e;
  e.names = split(s.str("list", "flipd"), ',');
  if (e.names.empty()) throw ConfigError(s.qualified("list") + ": no estimators");
  for (const auto& n : e.names)
    if (std::find(known_estimators().begin(), known_estimators().end(), n) == known_estimators().end())
      throw ConfigError(s.qualified("list") + ": unknown estimator '" + n + "'");
  const auto trace = s.str("trace_mode", "auto");
  if (trace == "auto") e.trace = TraceChoice::Auto;
  else if (trace == "exact") e.trace = TraceChoice::Exact;
  else if (trace == "fd") e.trace = TraceChoice::FiniteDifference;
  else if (trace == "hutchinson") e.trace = TraceChoice::Hutchinson;
  else throw ConfigError(s.qualified("trace_mode") + ": expected auto, exact, fd or hutchinson");
  e.probes = static_cast<std::size_t>(s.integer("probes", 1000));
  if (e.probes < 1) throw ConfigError(s.qualified("probes") + " must be >= 1");
  const auto dist = s.str("probe_dist", "rademacher");
  if (dist == "gaussian") e.probe_dist = ProbeDist::Gaussian;
  else if (dist != "rademacher") throw ConfigError(s.qualified("probe_dist") + ": expected rademacher or gaussian");
  e.score_rel_step = s.num("score_rel_step", e.score_rel_step);
  e.oracle.method = parse_method(s.str("method", "auto"), s.qualified("method"));
  e.oracle.min_nodes = static_cast<int>(s.integer("min_nodes", e.oracle.min_nodes));
  if (e.oracle.min_nodes < 16) throw ConfigError(s.qualified("min_nodes") + ": quadrature refused below 16 nodes");
  e.oracle.mc_samples = static_cast<std::size_t>(s.integer("mc_samples", static_cast<long long>(e.oracle.mc_samples)));
  e.oracle.seed = derive_seed(seed, 0xc0);
  e.ball_samples = static_cast<std::size_t>(s.integer("ball_samples", static_cast<long long>(e.ball_samples)));
  e.uniform_step = s.num("uniform_step", e.uniform_step);
  if (!(e.uniform_step > 0)) throw ConfigError(s.qualified("uniform_step") + " must be positive");
  e.lidl_span = s.num("lidl_span", e.lidl_span);
  e.lidl_points = static_cast<int>(s.integer("lidl_points", e.lidl_points));
  e.count_span = s.num("count_span", e.count_span);
  e.count_points = static_cast<int>(s.integer("count_points", e.count_points));
  if (e.lidl_points < 2 || e.count_points < 2 || !(e.lidl_span > 0) || !(e.count_span > 0))
    throw ConfigError("[estimators] regression windows need span > 0 and at least 2 points");
  e.count_samples = static_cast<std::size_t>(s.integer("count_samples", static_cast<long long>(e.count_samples)));
  e.count_k_min = static_cast<std::size_t>(s.integer("k_min", static_cast<long long>(e.count_k_min)));
  if (s.has("grid_mean_offsets")) e.grid_mean_offsets = parse_numbers(s.str("grid_mean_offsets"), s.qualified("grid_mean_offsets"));
  return e;
}

inline std::vector<double> parse_grid(const ptree& root, const ScheduleSpec& sched) {
  const auto s = section(root, "grid");
  std::vector<double> g;
  if (s.has("values")) {
    g = parse_numbers(s.str("values"), s.qualified("values"));
  } else {
    const double start = s.num("start"), stop = s.num("stop", start), step = s.num("step", 1.0);
    if (!(step > 0)) throw ConfigError(s.qualified("step") + " must be positive");
    for (long k = 0;; ++k) {
      const double v = start + static_cast<double>(k) * step;
      if (v > stop + 1e-9 * step) break;
      g.push_back(v);
    }
  }
  if (g.empty()) throw ConfigError("[grid] is empty");
  for (std::size_t i = 1; i < g.size(); ++i)
    if (!(g[i] > g[i - 1])) throw ConfigError("[grid] must be strictly increasing");
  const auto [lo, hi] = delta_range(sched);
  for (double d : g)
    if (!(d > lo && d <= hi))
      throw ConfigError("[grid] delta " + std::to_string(d) + " outside the schedule range (" + std::to_string(lo) +
                        ", " + std::to_string(hi) + "]");
  return g;
}

inline std::vector<QueryPoint> parse_queries(const ptree& root, const DensitySpec& dens, std::uint64_t seed) {
  const auto s = section(root, "queries");
  std::vector<QueryPoint> out;
  if (s.has("points")) {
    for (const auto& p : parse_points(s.str("points"), s.qualified("points"))) {
      if (p.size() != dens.ambient_dim()) throw ConfigError(s.qualified("points") + ": wrong dimension");
      try {
        out.push_back(make_query(dens.manifold(), p));
      } catch (const ProjectionError& e) {
        throw ConfigError(s.qualified("points") + ": " + e.what());
      }
    }
  }
  const auto n = s.integer("sample", 0);
  if (n < 0) throw ConfigError(s.qualified("sample") + " must be >= 0");
  if (n > 0) {
    const auto qseed = static_cast<std::uint64_t>(s.integer("seed", static_cast<long long>(derive_seed(seed, 0x9e))));
    for (auto& p : sample(dens, static_cast<std::size_t>(n), qseed)) out.push_back(make_query(dens.manifold(), std::move(p)));
  }
  if (out.empty()) throw ConfigError("[queries] needs points and/or sample = n");
  return out;
}

}  // namespace config_detail

inline ExperimentConfig parse_config_tree(const boost::property_tree::ptree& root) {
  using namespace config_detail;
  try {
    const auto rs = section(root, "run");
    RunOptions run;
    run.seed = static_cast<std::uint64_t>(rs.integer("seed", 0));
    run.out = rs.str("out", "");
    run.format = rs.str("format", "csv");
    if (run.format != "csv" && run.format != "json") throw ConfigError(rs.qualified("format") + ": expected csv or json");
    run.jobs = static_cast<int>(rs.integer("jobs", 1));
    if (run.jobs < 1) throw ConfigError(rs.qualified("jobs") + " must be >= 1");
    const auto timing = rs.str("timing", "true");
    if (timing != "true" && timing != "false") throw ConfigError(rs.qualified("timing") + ": expected true or false");
    run.timing = timing == "true";

    auto density = parse_density(root);
    auto schedule = parse_schedule(root);
    auto estimators = parse_estimators(root, run.seed);
    auto deltas = parse_grid(root, schedule);
    auto queries = parse_queries(root, density, run.seed);
    return ExperimentConfig{std::move(density), std::move(schedule), std::move(estimators), std::move(deltas),
                            std::move(queries), std::move(run)};
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  } catch (const boost::property_tree::ptree_error& e) {
    throw ConfigError(e.what());
  }
}

inline boost::property_tree::ptree read_config_tree(std::istream& in) {
  boost::property_tree::ptree root;
  try {
    boost::property_tree::ini_parser::read_ini(in, root);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  return root;
}

inline boost::property_tree::ptree load_config_tree(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return read_config_tree(in);
}

/// Only the manifold/density part of a config.
inline DensitySpec parse_density_tree(const boost::property_tree::ptree& root) {
  try {
    return config_detail::parse_density(root);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

/// Only the schedule part of a config.
inline ScheduleSpec parse_schedule_tree(const boost::property_tree::ptree& root) {
  try {
    return config_detail::parse_schedule(root);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

inline ExperimentConfig parse_config(std::istream& in) { return parse_config_tree(read_config_tree(in)); }

inline ExperimentConfig load_config(const std::string& path) { return parse_config_tree(load_config_tree(path)); }

inline ExperimentConfig parse_config_string(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

}  // namespace lidkit
