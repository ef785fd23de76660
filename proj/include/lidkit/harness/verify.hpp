#pragma once

// Convergence and identity suites. Each suite appends checks carrying the
// observed value, its target, the tolerance and the remaining margin.

#include "lidkit/convolve.hpp"
#include "lidkit/estimators.hpp"
#include "lidkit/geometry.hpp"
#include "lidkit/schedule.hpp"
#include "lidkit/score.hpp"

#include "json.hpp"

#include <cstdio>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace lidkit {

struct Check {
  enum class Kind { Near, AtMost, AtLeast };
  std::string suite;
  std::string name;
  Kind kind = Kind::Near;
  double observed = 0.0;
  double target = 0.0;
  double tolerance = 0.0;
  /// Distance to failure; nonnegative on success.
  double margin = 0.0;
  bool passed = false;
};

struct VerifyReport {
  std::vector<Check> checks;
  bool all_passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
  }
};

struct VerifyOptions {
  std::uint64_t seed = 0;
  /// Sample count of the Monte Carlo ball-probability check on the 2-sphere.
  std::size_t sphere_samples = 1000000;
};

inline const std::vector<std::string>& verify_suites() {
  static const std::vector<std::string> names = {"thm1", "thm2", "cor1", "cor2", "prop1", "prop2", "eq14", "eq15"};
  return names;
}

namespace verify_detail {

class Recorder {
 public:
  Recorder(VerifyReport& r, std::string suite) : report_(r), suite_(std::move(suite)) {}

  /// |observed - target| < tolerance (<= when tolerance is 0).
  void near(const std::string& name, double observed, double target, double tolerance) {
    const double err = std::abs(observed - target);
    push(name, Check::Kind::Near, observed, target, tolerance, tolerance - err,
         tolerance == 0.0 ? err == 0.0 : err < tolerance);
  }
  /// observed <= target + tolerance.
  void at_most(const std::string& name, double observed, double target, double tolerance = 0.0) {
    const double m = target + tolerance - observed;
    push(name, Check::Kind::AtMost, observed, target, tolerance, m, m >= 0.0);
  }
  /// observed >= target - tolerance.
  void at_least(const std::string& name, double observed, double target, double tolerance = 0.0) {
    const double m = observed - (target - tolerance);
    push(name, Check::Kind::AtLeast, observed, target, tolerance, m, m >= 0.0);
  }
  /// Runs `body`; an exception becomes a failed check instead of aborting.
  void guard(const std::string& name, const std::function<void()>& body) {
    try {
      body();
    } catch (const std::exception& e) {
      push(name + " [error: " + e.what() + "]", Check::Kind::Near, std::nan(""), 0.0, 0.0, -kInf, false);
    }
  }

 private:
  void push(const std::string& name, Check::Kind kind, double obs, double target, double tol, double margin, bool ok) {
    if (std::isnan(obs)) ok = false;
    report_.checks.push_back({suite_, name, kind, obs, target, tol, margin, ok});
  }
  VerifyReport& report_;
  std::string suite_;
};

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

inline Point vec(std::initializer_list<double> v) {
  Point p(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) p[i++] = x;
  return p;
}

/// Unit circle plus two atoms at distance 4 from it, weights (1/2, 1/4, 1/4).
inline DensitySpec circle_and_atoms() {
  return DensitySpec::mixture({DensitySpec::uniform(ManifoldSpec::unit_circle()), DensitySpec::empirical(Points{vec({5.0, 0.0})}),
                               DensitySpec::empirical(Points{vec({-5.0, 0.0})})},
                              {0.5, 0.25, 0.25}, 4.0);
}

inline DensitySpec plane_gaussian() {
  return DensitySpec::gaussian_on_affine(ManifoldSpec::coordinate_subspace(2, 3), Eigen::VectorXd::Zero(2),
                                         Eigen::MatrixXd::Identity(2, 2));
}

/// Schedule wide enough for delta down to -8.
inline ScheduleSpec deep_ve() { return ScheduleSpec::ve(1e-4, 50.0); }
inline ScheduleSpec standard_vp() { return ScheduleSpec::vp(0.1, 20.0); }

struct RandomMixture {
  Points atoms;
  std::vector<double> weights;
};

inline RandomMixture random_mixture(std::size_t atoms, int D, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif(0.5, 1.5);
  RandomMixture m;
  double total = 0.0;
  for (std::size_t i = 0; i < atoms; ++i) {
    Point a(D);
    for (int k = 0; k < D; ++k) a[k] = normal(rng);
    m.atoms.push_back(a);
    m.weights.push_back(unif(rng));
    total += m.weights.back();
  }
  for (auto& w : m.weights) w /= total;
  return m;
}

/// Weighted atoms as a union of single-atom components.
inline DensitySpec atoms_density(const RandomMixture& m) {
  std::vector<DensitySpec> parts;
  for (const auto& a : m.atoms) parts.push_back(DensitySpec::empirical(Points{a}));
  double sep = kInf;
  for (std::size_t i = 0; i < m.atoms.size(); ++i)
    for (std::size_t j = i + 1; j < m.atoms.size(); ++j) sep = std::min(sep, (m.atoms[i] - m.atoms[j]).norm());
  return DensitySpec::mixture(std::move(parts), m.weights, 0.5 * sep);
}

// ---------------------------------------------------------------------------

inline void suite_thm1(VerifyReport& rep, const VerifyOptions&) {
  Recorder r(rep, "thm1");
  r.guard("circle quadrature", [&] {
    ConvolutionOracle o(DensitySpec::uniform(ManifoldSpec::unit_circle()), {Method::Quadrature});
    const Point x = vec({1.0, 0.0});
    double prev = kInf;
    int violations = 0;
    for (double d : {-2.0, -4.0, -6.0, -8.0}) {
      const double v = dlogrho_ddelta_gauss(o, x, d);
      const double err = std::abs(v + 1.0);
      if (!(err < prev)) ++violations;
      prev = err;
      if (d == -8.0) r.near("circle dlogrho at delta=-8 -> d-D", v, -1.0, 1e-3);
    }
    r.near("circle |error| decreases over delta=-2,-4,-6,-8 (violations)", violations, 0.0, 0.0);
  });
  r.guard("second moment", [&] {
    const auto dens = DensitySpec::uniform(ManifoldSpec::unit_circle());
    const auto c = second_moment(dens, make_query(dens.manifold(), vec({1.0, 0.0})));
    r.near("circle second moment finite and = pi^2/3", c.value, kPi * kPi / 3.0, 1e-6);
  });
  r.guard("plane gaussian", [&] {
    ConvolutionOracle o(plane_gaussian());
    const double v = dlogrho_ddelta_gauss(o, Point::Zero(3), -8.0);
    r.near("gaussian on 2-plane in R^3 dlogrho at delta=-8 -> d-D", v, -1.0, 1e-3);
  });
}

inline void suite_thm2(VerifyReport& rep, const VerifyOptions& opt) {
  Recorder r(rep, "thm2");
  const Point x = vec({1.0, 0.0});
  r.guard("circle analytic", [&] {
    const auto o = BallOracle::exact(DensitySpec::uniform(ManifoldSpec::unit_circle()));
    r.near("circle analytic ball slope at delta=-8 -> 1", uniform_slope(o, x, -8.0).value, 1.0, 1e-3);
    UniformSlopeOptions cd;
    cd.analytic = false;
    cd.step = 0.01;
    r.near("circle central-difference ball slope (h=0.01) at delta=-8 -> 1", uniform_slope(o, x, -8.0, cd).value, 1.0,
           1e-3);
  });
  r.guard("sphere", [&] {
    const auto dens = DensitySpec::uniform(ManifoldSpec::sphere(1.0, 2, 3));
    const Point p = vec({1.0, 0.0, 0.0});
    const auto exact = BallOracle::exact(dens);
    r.near("2-sphere exact cap slope at delta=-5 -> 2", uniform_slope(exact, p, -5.0).value, 2.0, 1e-9);
    UniformSlopeOptions so;
    so.analytic = false;
    const auto mc = BallOracle::local_monte_carlo(dens, p, std::exp(-5.0 + 2.0 * so.step), opt.sphere_samples,
                                                  derive_seed(opt.seed, 0x5f));
    r.near("2-sphere Monte Carlo ball slope (n=" + num(static_cast<double>(opt.sphere_samples)) + ") at delta=-5 -> 2",
           uniform_slope(mc, p, -5.0, so).value, 2.0, 0.1);
  });
}

inline void suite_cor1(VerifyReport& rep, const VerifyOptions&) {
  Recorder r(rep, "cor1");
  const auto dens = circle_and_atoms();
  const auto sched = deep_ve();
  r.guard("flipd", [&] {
    ConvolutionOracle o(dens);
    const auto field = convolution_score_field(o, sched);
    const auto mode = TraceMode::finite_difference();
    for (const auto& x : {vec({1.0, 0.0}), vec({0.0, 1.0}), vec({std::cos(2.0), std::sin(2.0)})})
      r.near("union flipd at delta0=-6 on circle (" + num(x[0]) + "," + num(x[1]) + ") -> 1",
             flipd(field, sched, x, -6.0, mode).value, 1.0, 0.01);
    for (const auto& x : {vec({5.0, 0.0}), vec({-5.0, 0.0})})
      r.near("union flipd at delta0=-6 at atom (" + num(x[0]) + ",0) -> 0", flipd(field, sched, x, -6.0, mode).value,
             0.0, 0.01);
  });
  r.guard("leakage", [&] {
    // Off-component kernel mass and weighted mass against the bounds used in
    // the union argument, for delta below min(log(xi/2)/2, log xi - log(D+2)/2).
    ConvolutionOracle o(dens);
    const double xi = 4.0;
    const int D = 2;
    const double limit = std::min(0.5 * std::log(xi / 2.0), std::log(xi) - 0.5 * std::log(D + 2.0));
    double worst_mass = 0.0, worst_weighted = 0.0;
    for (const auto& x : {vec({1.0, 0.0}), vec({-1.0, 0.0}), vec({0.0, 1.0}), vec({5.0, 0.0}), vec({-5.0, 0.0})}) {
      const auto home = make_query(dens.manifold(), x).component_index;
      for (double d : {-6.0, -3.0, -1.0, 0.0, limit - 1e-3}) {
        const double log_bound = log_gauss_const(D) - D * d - 0.5 * xi * xi * std::exp(-2.0 * d);
        const auto parts = component_kernel_integrals(o, x, d, D);
        for (std::size_t j = 0; j < parts.size(); ++j) {
          if (j == home) continue;
          worst_mass = std::max(worst_mass, std::exp(parts[j].log_value - log_bound));
          const double weighted = std::exp(parts[j].log_value - log_bound) * parts[j].scaled_sq;
          worst_weighted = std::max(worst_weighted, weighted / (xi * xi * std::exp(-2.0 * d)));
        }
      }
    }
    r.at_most("max off-component kernel mass / bound", worst_mass, 1.0, 1e-12);
    r.at_most("max off-component weighted mass / bound", worst_weighted, 1.0, 1e-12);
  });
}

inline void suite_cor2(VerifyReport& rep, const VerifyOptions&) {
  Recorder r(rep, "cor2");
  const auto dens = circle_and_atoms();
  const double xi = 4.0;
  r.guard("locality", [&] {
    const auto o = BallOracle::exact(dens);
    double worst_leak = 0.0;
    for (const auto& x : {vec({1.0, 0.0}), vec({0.0, -1.0}), vec({5.0, 0.0}), vec({-5.0, 0.0})}) {
      const auto home = make_query(dens.manifold(), x).component_index;
      for (double d : {-8.0, -4.0, -1.0, 0.0, std::log(xi) - 1e-9}) {
        const auto p = ball_probability(o, x, d);
        for (std::size_t j = 0; j < p.components.size(); ++j)
          if (j != home) worst_leak = std::max(worst_leak, p.components[j]);
      }
    }
    r.near("off-component ball mass for e^delta < xi (exactly zero)", worst_leak, 0.0, 0.0);
    const auto wide = ball_probability(o, vec({1.0, 0.0}), std::log(xi + 0.5));
    r.at_least("off-component ball mass for e^delta > xi is positive", wide.components[1], 1e-300);
  });
  r.guard("slopes", [&] {
    const auto o = BallOracle::exact(dens);
    r.near("union ball slope on circle at delta=-8 -> 1", uniform_slope(o, vec({1.0, 0.0}), -8.0).value, 1.0, 1e-3);
    for (const auto& x : {vec({5.0, 0.0}), vec({-5.0, 0.0})}) {
      r.near("union ball slope at atom (" + num(x[0]) + ",0), delta=-1 (exactly 0)", uniform_slope(o, x, -1.0).value, 0.0, 0.0);
      UniformSlopeOptions cd;
      cd.analytic = false;
      r.near("union central-difference ball slope at atom (" + num(x[0]) + ",0), delta=1 (exactly 0)",
             uniform_slope(o, x, 1.0, cd).value, 0.0, 0.0);
    }
  });
  r.guard("uniform scaling identity", [&] {
    const auto o = BallOracle::exact(dens);
    double worst = 0.0;
    const int D = 2;
    for (const auto& x : {vec({1.0, 0.0}), vec({5.0, 0.0})}) {
      const int d = make_query(dens.manifold(), x).true_lid;
      for (double dl : {-6.0, -2.0, 0.5}) {
        const double lhs = log_rho_uniform(o, x, dl);
        const double rhs = log_uniform_const(D) - log_uniform_const(d) + dl * (d - D) + log_uniform_aux_integral(o, x, dl);
        worst = std::max(worst, std::abs(lhs - rhs));
      }
    }
    r.near("rho_U = U_D / U_d e^{delta(d-D)} int p U_d (max log error)", worst, 0.0, 1e-10);
  });
}

inline void suite_prop1(VerifyReport& rep, const VerifyOptions&) {
  Recorder r(rep, "prop1");
  r.guard("circle", [&] {
    ConvolutionOracle o(DensitySpec::uniform(ManifoldSpec::unit_circle()), {Method::Quadrature});
    r.near("circle int p N_d at delta=-8 -> p(x) = 1/(2pi)", prop1_integral(o, vec({1.0, 0.0}), -8.0), 1.0 / (2.0 * kPi),
           1e-4);
  });
  r.guard("scaling identity", [&] {
    double worst = 0.0;
    auto probe = [&](const DensitySpec& dens, const Point& x) {
      ConvolutionOracle o(dens);
      const int D = dens.ambient_dim(), d = make_query(dens.manifold(), x).true_lid;
      for (double dl : {-8.0, -5.0, -2.0, 0.0}) {
        const double lhs = log_rho_gauss(o, x, dl);
        const double rhs = 0.5 * (d - D) * kLog2Pi + dl * (d - D) + std::log(prop1_integral(o, x, dl));
        worst = std::max(worst, std::abs(lhs - rhs));
      }
    };
    probe(DensitySpec::uniform(ManifoldSpec::unit_circle()), vec({0.0, 1.0}));
    probe(plane_gaussian(), vec({0.3, -0.2, 0.0}));
    probe(circle_and_atoms(), vec({-1.0, 0.0}));
    r.near("rho_N = (2pi)^{(d-D)/2} e^{delta(d-D)} int p N_d (max log error)", worst, 0.0, 1e-10);
  });
}

inline void suite_prop2(VerifyReport& rep, const VerifyOptions&) {
  Recorder r(rep, "prop2");
  r.guard("circle", [&] {
    ConvolutionOracle o(DensitySpec::uniform(ManifoldSpec::unit_circle()), {Method::Quadrature});
    r.near("circle e^{-2delta} int p |x-x'|^2 N_d at delta=-8 -> d p(x) = 1/(2pi)",
           prop2_integral(o, vec({1.0, 0.0}), -8.0), 1.0 / (2.0 * kPi), 1e-3);
  });
  r.guard("plane gaussian", [&] {
    ConvolutionOracle o(plane_gaussian());
    const Point x = Point::Zero(3);
    r.near("gaussian on 2-plane prop2/prop1 at delta=-8 -> d = 2", prop2_integral(o, x, -8.0) / prop1_integral(o, x, -8.0),
           2.0, 1e-6);
  });
}

/// Direct log density of sum_i w_i N(psi a_i, sigma^2 I) at y.
inline double diffused_mixture_log_density(const RandomMixture& m, const ScheduleSpec& s, const Point& y, double t) {
  const double ps = psi(s, t), sg = sigma(s, t);
  const int D = static_cast<int>(y.size());
  std::vector<double> terms;
  for (std::size_t i = 0; i < m.atoms.size(); ++i)
    terms.push_back(std::log(m.weights[i]) - 0.5 * D * kLog2Pi - D * std::log(sg) -
                    0.5 * (y - ps * m.atoms[i]).squaredNorm() / (sg * sg));
  return log_sum_exp(terms);
}

/// grad_x log rho_N(x, delta) for weighted atoms, in the delta parameterization.
inline Point atoms_log_rho_gradient(const RandomMixture& m, const Point& x, double delta) {
  const double inv = std::exp(-2.0 * delta);
  std::vector<double> logr;
  for (std::size_t i = 0; i < m.atoms.size(); ++i)
    logr.push_back(std::log(m.weights[i]) - 0.5 * (x - m.atoms[i]).squaredNorm() * inv);
  const double lse = log_sum_exp(logr);
  Point g = Point::Zero(x.size());
  for (std::size_t i = 0; i < m.atoms.size(); ++i) g -= std::exp(logr[i] - lse) * (x - m.atoms[i]) * inv;
  return g;
}

inline void suite_eq14(VerifyReport& rep, const VerifyOptions& opt) {
  Recorder r(rep, "eq14");
  for (const auto& sched : {deep_ve(), standard_vp()}) {
    r.guard(sched.name(), [&] {
      double worst_log = 0.0, worst_grad = 0.0;
      for (std::uint64_t k = 0; k < 3; ++k) {
        const auto mix = random_mixture(4, 3, derive_seed(opt.seed, 0xe14, k));
        ConvolutionOracle o(atoms_density(mix));
        const auto field = ScoreField::mixture(mix.atoms, mix.weights, sched);
        Rng rng(derive_seed(opt.seed, 0xe14a, k));
        std::normal_distribution<double> normal;
        for (double d : {-6.0, -3.0, -1.0, 0.0}) {
          Point x = mix.atoms[k % mix.atoms.size()];
          for (Eigen::Index i = 0; i < x.size(); ++i) x[i] += std::exp(d) * normal(rng);
          const double t = t_of_delta(sched, d);
          const double ps = psi(sched, t);
          const double lhs = log_rho_gauss(o, x, d);
          const double rhs = x.size() * std::log(ps) + diffused_mixture_log_density(mix, sched, ps * x, t);
          worst_log = std::max(worst_log, std::abs(lhs - rhs));
          const Point g = atoms_log_rho_gradient(mix, x, d);
          const Point s = ps * score(field, ps * x, t);
          worst_grad = std::max(worst_grad, (g - s).norm() / std::max(1.0, g.norm()));
        }
      }
      r.near(sched.name() + ": log rho_N = D log psi + log p(psi x, t(delta)) (max abs error)", worst_log, 0.0, 1e-9);
      r.near(sched.name() + ": grad log rho_N = psi s(psi x, t(delta)) (max relative error)", worst_grad, 0.0, 1e-8);
    });
  }
}

inline void suite_eq15(VerifyReport& rep, const VerifyOptions& opt) {
  Recorder r(rep, "eq15");
  for (const auto& sched : {deep_ve(), standard_vp()}) {
    r.guard(sched.name(), [&] {
      double worst = 0.0;
      for (std::uint64_t k = 0; k < 5; ++k) {
        const auto mix = random_mixture(5, 3, derive_seed(opt.seed, 0xe15, k));
        ConvolutionOracle o(atoms_density(mix));
        const auto field = ScoreField::mixture(mix.atoms, mix.weights, sched);
        Rng rng(derive_seed(opt.seed, 0xe15a, k));
        std::normal_distribution<double> normal;
        for (int i = 0; i <= 32; ++i) {
          const double d = -8.0 + 0.25 * i;
          // Query drawn from rho_N(., delta): an atom plus kernel-scale noise.
          Point x = mix.atoms[static_cast<std::size_t>(i) % mix.atoms.size()];
          for (Eigen::Index c = 0; c < x.size(); ++c) x[c] += std::exp(d) * normal(rng);
          const double n = nu(field, sched, x, d).value;
          const double g = dlogrho_ddelta_gauss(o, x, d);
          worst = std::max(worst, std::abs(n - g));
        }
      }
      r.near(sched.name() + ": |nu - d/d delta log rho_N| over 5 mixtures x 33 deltas in [-8,0]", worst, 0.0, 1e-6);
    });
  }
}

}  // namespace verify_detail

/// Runs the named suites (all when `suites` is empty).
inline VerifyReport verify_theorems(std::vector<std::string> suites, const VerifyOptions& opt = {}) {
  using namespace verify_detail;
  static const std::map<std::string, void (*)(VerifyReport&, const VerifyOptions&)> table = {
      {"thm1", suite_thm1}, {"thm2", suite_thm2}, {"cor1", suite_cor1}, {"cor2", suite_cor2},
      {"prop1", suite_prop1}, {"prop2", suite_prop2}, {"eq14", suite_eq14}, {"eq15", suite_eq15}};
  if (suites.empty()) suites = verify_suites();
  VerifyReport rep;
  for (const auto& s : suites) {
    const auto it = table.find(s);
    if (it == table.end()) throw DomainError("unknown verify suite '" + s + "'");
    it->second(rep, opt);
  }
  return rep;
}

inline nlohmann::json to_json(const VerifyReport& rep) {
  auto arr = nlohmann::json::array();
  for (const auto& c : rep.checks) {
    const char* kind = c.kind == Check::Kind::Near ? "near" : c.kind == Check::Kind::AtMost ? "at_most" : "at_least";
    auto safe = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    arr.push_back({{"suite", c.suite},
                   {"check", c.name},
                   {"kind", kind},
                   {"observed", safe(c.observed)},
                   {"target", c.target},
                   {"tolerance", c.tolerance},
                   {"margin", safe(c.margin)},
                   {"passed", c.passed}});
  }
  return {{"passed", rep.all_passed()}, {"checks", arr}};
}

inline void write_csv(const VerifyReport& rep, std::ostream& out) {
  out << "suite,check,observed,target,tolerance,margin,passed\n";
  auto q = [](const std::string& s) {
    std::string o = "\"";
    for (char c : s) {
      if (c == '"') o += '"';
      o += c;
    }
    return o + "\"";
  };
  char buf[64];
  auto f = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return std::string(buf);
  };
  for (const auto& c : rep.checks)
    out << c.suite << ',' << q(c.name) << ',' << f(c.observed) << ',' << f(c.target) << ',' << f(c.tolerance) << ','
        << f(c.margin) << ',' << (c.passed ? "PASS" : "FAIL") << "\n";
}

}  // namespace lidkit
