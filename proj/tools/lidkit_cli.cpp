#include "lidkit/harness/config.hpp"
#include "lidkit/harness/sde.hpp"
#include "lidkit/harness/sweep.hpp"
#include "lidkit/harness/verify.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <fstream>
#include <iostream>
#include <optional>

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitVerifyFailed = 3;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string format;
  std::optional<int> jobs;
};

/// Writes to --out when given, stdout otherwise.
template <class F>
void emit(const std::string& path, F&& write) {
  if (path.empty() || path == "-") {
    write(std::cout);
    return;
  }
  std::ofstream f(path);
  if (!f) throw lidkit::ConfigError("cannot open output file '" + path + "'");
  write(f);
}

std::string format_or(const Common& c, const std::string& fallback) { return c.format.empty() ? fallback : c.format; }

boost::property_tree::ptree require_tree(const Common& c) {
  if (c.config.empty()) throw lidkit::ConfigError("--config is required");
  return lidkit::load_config_tree(c.config);
}

std::uint64_t tree_seed(const boost::property_tree::ptree& t) {
  const auto s = t.get_optional<std::string>("run.seed");
  if (!s) return 0;
  try {
    return std::stoull(*s);
  } catch (const std::exception&) {
    throw lidkit::ConfigError("[run] seed: not an integer");
  }
}

int cmd_sample(const Common& c, std::size_t n) {
  const auto tree = require_tree(c);
  const auto dens = lidkit::parse_density_tree(tree);
  if (n < 1) throw lidkit::ConfigError("--n must be >= 1");
  const auto pts = lidkit::sample(dens, n, c.seed.value_or(tree_seed(tree)));
  const auto fmt = format_or(c, "csv");
  emit(c.out, [&](std::ostream& out) {
    if (fmt == "json") {
      auto arr = nlohmann::json::array();
      for (const auto& p : pts) arr.push_back(std::vector<double>(p.data(), p.data() + p.size()));
      out << nlohmann::json{{"density", dens.name()}, {"manifold", dens.manifold().name()}, {"points", arr}}.dump(2)
          << "\n";
      return;
    }
    out << "id";
    for (int k = 0; k < dens.ambient_dim(); ++k) out << ",x" << k;
    out << "\n";
    char buf[40];
    for (std::size_t i = 0; i < pts.size(); ++i) {
      out << i;
      for (Eigen::Index k = 0; k < pts[i].size(); ++k) {
        std::snprintf(buf, sizeof buf, "%.17g", pts[i][k]);
        out << ',' << buf;
      }
      out << "\n";
    }
  });
  return 0;
}

void write_sweep(const Common& c, const lidkit::SweepResult& r, const std::string& fallback_format) {
  const auto fmt = format_or(c, fallback_format);
  emit(c.out, [&](std::ostream& out) {
    if (fmt == "json") lidkit::write_json(r, out);
    else lidkit::write_csv(r, out);
  });
}

/// The seed goes into the tree before parsing so that sampled query points
/// and Monte Carlo banks follow it.
lidkit::ExperimentConfig config_with_overrides(boost::property_tree::ptree tree, const Common& c) {
  if (c.seed) tree.put("run.seed", std::to_string(*c.seed));
  auto cfg = lidkit::parse_config_tree(tree);
  if (c.jobs) cfg.run.jobs = *c.jobs;
  return cfg;
}

int cmd_sweep(const Common& c) {
  auto cfg = config_with_overrides(require_tree(c), c);
  const auto r = lidkit::run_sweep(cfg);
  Common out = c;
  if (out.out.empty()) out.out = cfg.run.out;
  write_sweep(out, r, cfg.run.format);
  return 0;
}

int cmd_estimate(const Common& c, const std::string& point, const std::string& estimator, double delta) {
  auto tree = require_tree(c);
  tree.put("queries.points", point);
  tree.get_child("queries").erase("sample");
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", delta);
  tree.put("grid.values", buf);
  tree.put("estimators.list", estimator);
  const auto cfg = config_with_overrides(tree, c);
  const auto r = lidkit::run_sweep(cfg);
  write_sweep(c, r, "csv");
  for (const auto& row : r.rows)
    if (!row.error.empty()) {
      std::cerr << "estimate failed: " << row.error << "\n";
      return 1;
    }
  return 0;
}

int cmd_verify(const Common& c, const std::vector<std::string>& suites, std::size_t sphere_samples) {
  lidkit::VerifyOptions opt;
  opt.seed = c.seed.value_or(0);
  opt.sphere_samples = sphere_samples;
  for (const auto& s : suites)
    if (std::find(lidkit::verify_suites().begin(), lidkit::verify_suites().end(), s) == lidkit::verify_suites().end())
      throw lidkit::ConfigError("unknown suite '" + s + "'");
  const auto rep = lidkit::verify_theorems(suites, opt);
  const auto fmt = format_or(c, "csv");
  emit(c.out, [&](std::ostream& out) {
    if (fmt == "json") out << lidkit::to_json(rep).dump(2) << "\n";
    else lidkit::write_csv(rep, out);
  });
  std::size_t failed = 0;
  for (const auto& ch : rep.checks) failed += !ch.passed;
  std::cerr << rep.checks.size() - failed << "/" << rep.checks.size() << " checks passed\n";
  return rep.all_passed() ? 0 : kExitVerifyFailed;
}

int cmd_demo_sde(const Common& c, lidkit::SdeDemoOptions opt) {
  const auto tree = require_tree(c);
  const auto dens = lidkit::parse_density_tree(tree);
  const auto sched = lidkit::parse_schedule_tree(tree);
  if (!dens.as<lidkit::Empirical>()) throw lidkit::ConfigError("demo-sde needs an empirical density (point_set manifold)");
  if (opt.steps < 100) throw lidkit::ConfigError("--steps must be at least 100");
  opt.seed = c.seed.value_or(tree_seed(tree));
  const auto rep = lidkit::reverse_sde_demo(dens, sched, opt);
  nlohmann::json j{{"steps", opt.steps},
                   {"n", opt.n},
                   {"t_stop", rep.t_stop},
                   {"target_variance", rep.target_variance},
                   {"distance_defined", rep.distance_defined},
                   {"sliced_w1", rep.distance_defined ? nlohmann::json(rep.sliced_w1) : nlohmann::json(nullptr)}};
  if (rep.samples.size() >= 2) {
    const auto m = lidkit::sample_moments(rep.samples);
    j["mean"] = std::vector<double>(m.mean.data(), m.mean.data() + m.mean.size());
    j["variance"] = std::vector<double>(m.variance.data(), m.variance.data() + m.variance.size());
  }
  const auto fmt = format_or(c, "json");
  emit(c.out, [&](std::ostream& out) {
    if (fmt == "json") {
      out << j.dump(2) << "\n";
      return;
    }
    out << "key,value\n";
    for (const auto& [k, v] : j.items()) out << k << ",\"" << v.dump() << "\"\n";
  });
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LID estimation toolkit: FLIPD, ball-slope and regression estimators on synthetic manifolds"};
  app.require_subcommand(1);
  app.fallthrough();
  Common c;
  app.add_option("--config", c.config, "experiment config file (INI)");
  app.add_option("--seed", c.seed, "base random seed (overrides [run] seed)");
  app.add_option("--out", c.out, "output path (default: stdout)");
  app.add_option("--format", c.format, "output format")->check(CLI::IsMember({"csv", "json"}));
  app.add_option("--jobs", c.jobs, "worker threads for sweep")->check(CLI::PositiveNumber);

  auto* sample = app.add_subcommand("sample", "draw samples from the configured density");
  std::size_t n = 1000;
  sample->add_option("--n", n, "number of samples");

  auto* estimate = app.add_subcommand("estimate", "one estimator at one point and delta");
  std::string point, estimator = "flipd";
  double delta = lidkit::kDefaultDelta0;
  estimate->add_option("--point", point, "query point, comma separated")->required();
  estimate->add_option("--estimator", estimator, "flipd, flipd_grid_mean, gauss_slope, uniform_slope, lidl, ball_count");
  estimate->add_option("--delta", delta, "log noise scale");

  auto* sweep = app.add_subcommand("sweep", "run every (point, delta, estimator) of the config");

  auto* verify = app.add_subcommand("verify", "run the convergence and identity suites");
  std::vector<std::string> suites;
  std::size_t sphere_samples = 1000000;
  verify->add_option("--suite", suites, "thm1 thm2 cor1 cor2 prop1 prop2 eq14 eq15 (default: all)");
  verify->add_option("--sphere-samples", sphere_samples, "Monte Carlo samples for the 2-sphere ball slope");

  auto* demo = app.add_subcommand("demo-sde", "reverse-SDE sampling with the exact mixture score");
  lidkit::SdeDemoOptions demo_opt;
  demo->add_option("--steps", demo_opt.steps, "Euler-Maruyama steps (>= 100)");
  demo->add_option("--n", demo_opt.n, "number of samples");
  demo->add_option("--t-stop", demo_opt.t_stop, "final diffusion time");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*sample) return cmd_sample(c, n);
    if (*estimate) return cmd_estimate(c, point, estimator, delta);
    if (*sweep) return cmd_sweep(c);
    if (*verify) return cmd_verify(c, suites, sphere_samples);
    if (*demo) return cmd_demo_sde(c, demo_opt);
  } catch (const lidkit::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
