#pragma once

// Gaussian and uniform-ball convolutions of a manifold-supported density:
//
//   rho_N(x, delta) = int_M p(x') N_D(x - x'; 0, delta) dx'
//   rho_U(x, delta) = U_D e^{-D delta} P_{X~p}(|X - x| < e^delta)
//
// evaluated in closed form (Gaussians on affine subspaces, atoms), by
// trapezoid quadrature (1-d manifolds) or by Monte Carlo over a fixed bank.
// Everything is carried in log space.

#include "lidkit/common.hpp"
#include "lidkit/geometry.hpp"

#include <boost/math/special_functions/beta.hpp>

#include <algorithm>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace lidkit {

enum class Method { Auto, ClosedForm, Quadrature, MonteCarlo };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::Auto: return "auto";
    case Method::ClosedForm: return "closed_form";
    case Method::Quadrature: return "quadrature";
    case Method::MonteCarlo: return "monte_carlo";
  }
  return "?";
}

struct OracleOptions {
  Method method = Method::Auto;
  /// Lower bound on trapezoid nodes; the node count also grows like 64 e^{-delta}.
  int min_nodes = 1024;
  std::size_t mc_samples = 100000;
  std::uint64_t seed = 0;
};

/// Kernel integral I = int p(x') exp(log_norm - |x - x'|^2 e^{-2 delta} / 2) dx'
/// together with the kernel-weighted mean of |x - x'|^2 e^{-2 delta}.
struct KernelIntegral {
  double log_value = -kInf;
  double scaled_sq = 0.0;
  double log_value_se = 0.0;
  double scaled_sq_se = 0.0;
};

class ConvolutionOracle {
 public:
  explicit ConvolutionOracle(DensitySpec density, OracleOptions opt = {});

  const DensitySpec& density() const { return density_; }
  const OracleOptions& options() const { return opt_; }
  /// Resolved method (Auto for mixtures, whose parts resolve individually).
  Method method() const { return method_; }
  const std::vector<ConvolutionOracle>& parts() const { return parts_; }
  const Points& bank() const { return *bank_; }

 private:
  DensitySpec density_;
  OracleOptions opt_;
  Method method_ = Method::Auto;
  std::vector<ConvolutionOracle> parts_;
  std::shared_ptr<const Points> bank_;
};

namespace detail {

inline bool is_1d_quadrature_case(const DensitySpec& d) {
  const auto& m = d.manifold();
  if (const auto* s = m.as<Sphere>()) return s->intrinsic_dim == 1 && d.as<UniformOnCompact>();
  if (const auto* a = m.as<AffineSubspace>()) return a->basis.cols() == 1 && d.as<GaussianOnAffine>();
  return false;
}

inline bool closed_form_applies(const DensitySpec& d) { return d.as<Empirical>() || d.as<GaussianOnAffine>(); }

inline Method resolve_method(const DensitySpec& d, Method requested) {
  switch (requested) {
    case Method::ClosedForm:
      if (!closed_form_applies(d)) throw UnsupportedError("closed form unavailable for " + d.name() + " on " + d.manifold().name());
      return requested;
    case Method::Quadrature:
      if (!is_1d_quadrature_case(d)) throw UnsupportedError("quadrature needs a 1-dimensional manifold, got " + d.manifold().name());
      return requested;
    case Method::MonteCarlo:
      return requested;
    case Method::Auto:
      if (closed_form_applies(d)) return Method::ClosedForm;
      if (is_1d_quadrature_case(d)) return Method::Quadrature;
      return Method::MonteCarlo;
  }
  return Method::MonteCarlo;
}

inline Method resolve_part(const DensitySpec& d, Method requested) {
  if (requested == Method::ClosedForm && !closed_form_applies(d)) return resolve_method(d, Method::Auto);
  if (requested == Method::Quadrature && !is_1d_quadrature_case(d)) return resolve_method(d, Method::Auto);
  return resolve_method(d, requested);
}

}  // namespace detail

inline ConvolutionOracle::ConvolutionOracle(DensitySpec density, OracleOptions opt)
    : density_(std::move(density)), opt_(opt) {
  if (opt_.min_nodes < 16) throw DomainError("quadrature refused: node count below 16");
  if (const auto* mix = density_.as<Mixture>()) {
    for (std::size_t j = 0; j < mix->components.size(); ++j) {
      OracleOptions part = opt_;
      part.method = detail::resolve_part(mix->components[j], opt_.method);
      part.seed = derive_seed(opt_.seed, j + 1);
      parts_.emplace_back(mix->components[j], part);
    }
    method_ = Method::Auto;
    return;
  }
  method_ = detail::resolve_method(density_, opt_.method);
  if (method_ == Method::MonteCarlo) {
    if (opt_.mc_samples < 2) throw DomainError("monte carlo needs at least 2 samples");
    bank_ = std::make_shared<const Points>(sample(density_, opt_.mc_samples, opt_.seed));
  }
}

namespace detail {

inline void check_finite(const KernelIntegral& k, double max_exponent) {
  if (!std::isfinite(k.log_value) || !std::isfinite(k.scaled_sq))
    throw NumericalError("non-finite convolution value (max kernel exponent " + std::to_string(max_exponent) + ")");
}

inline int quadrature_nodes(const OracleOptions& opt, double length_scale, double delta) {
  const double wanted = 64.0 * length_scale * std::exp(-delta);
  if (wanted > 5e7) throw DomainError("quadrature refused: delta too negative for the node budget");
  return std::max(opt.min_nodes, static_cast<int>(std::ceil(wanted)));
}

/// Trapezoid rule over the full circle (periodic integrand, spectral accuracy).
inline KernelIntegral circle_quadrature(const Sphere& s, const OracleOptions& opt, const Point& x, double delta,
                                        double log_norm) {
  const int n = quadrature_nodes(opt, s.radius, delta);
  const double inv_var = std::exp(-2.0 * delta);
  const Point rel = x - s.center;
  const double rest = rel.tail(rel.size() - 2).squaredNorm();
  const double log_node = std::log(s.radius * 2.0 * kPi / n) - log_sphere_area(1, s.radius) + log_norm;
  LogWeightedMean acc;
  double max_exp = -kInf;
  for (int k = 0; k < n; ++k) {
    const double th = 2.0 * kPi * k / n;
    const double dx = rel[0] - s.radius * std::cos(th), dy = rel[1] - s.radius * std::sin(th);
    const double sq = (dx * dx + dy * dy + rest) * inv_var;
    max_exp = std::max(max_exp, -0.5 * sq);
    acc.add(log_node - 0.5 * sq, sq);
  }
  KernelIntegral out{acc.log_total(), acc.empty() ? 0.0 : acc.mean()};
  check_finite(out, max_exp);
  return out;
}

/// Trapezoid on the window where the product of the line Gaussian and the
/// kernel lives (posterior mean +- 14 posterior sd).
inline KernelIntegral line_quadrature(const DensitySpec& dens, const OracleOptions& opt, const Point& x,
                                      double delta, double log_norm) {
  const auto& a = *dens.manifold().as<AffineSubspace>();
  const auto& g = *dens.as<GaussianOnAffine>();
  const double m = g.mean[0], var = g.covariance(0, 0);
  const double u = affine_coords(a, x)[0];
  const double perp_sq = std::pow(detail::affine_residual(a, x), 2);
  const double inv_var = std::exp(-2.0 * delta);
  const double post_var = 1.0 / (1.0 / var + inv_var);
  const double post_mean = post_var * (m / var + u * inv_var);
  const double half = 14.0 * std::sqrt(post_var);
  const int n = std::max(opt.min_nodes, 8 * 28);
  const double h = 2.0 * half / (n - 1);
  LogWeightedMean acc;
  double max_exp = -kInf;
  for (int k = 0; k < n; ++k) {
    const double z = post_mean - half + k * h;
    const double wt = (k == 0 || k == n - 1) ? 0.5 * h : h;
    const double log_p = -0.5 * kLog2Pi - 0.5 * std::log(var) - 0.5 * (z - m) * (z - m) / var;
    const double sq = ((u - z) * (u - z) + perp_sq) * inv_var;
    max_exp = std::max(max_exp, -0.5 * sq);
    acc.add(std::log(wt) + log_p + log_norm - 0.5 * sq, sq);
  }
  KernelIntegral out{acc.log_total(), acc.mean()};
  check_finite(out, max_exp);
  return out;
}

inline KernelIntegral atoms_closed_form(const PointSet& ps, const Point& x, double delta, double log_norm) {
  const double inv_var = std::exp(-2.0 * delta);
  const double log_w = -std::log(static_cast<double>(ps.points.size())) + log_norm;
  LogWeightedMean acc;
  double max_exp = -kInf;
  for (const auto& p : ps.points) {
    const double sq = (x - p).squaredNorm() * inv_var;
    max_exp = std::max(max_exp, -0.5 * sq);
    acc.add(log_w - 0.5 * sq, sq);
  }
  KernelIntegral out{acc.log_total(), acc.mean()};
  check_finite(out, max_exp);
  return out;
}

/// Gaussian-on-affine, kernel normalized with k = `kernel_dim` (D for rho_N,
/// d for the auxiliary integral). Uses S = Sigma + e^{2 delta} I:
///   int p N_k = Z_k e^{-k delta} (2pi)^{d/2} e^{d delta} N_d(u; m, S) exp(-r_perp^2 e^{-2 delta}/2).
inline KernelIntegral gaussian_closed_form(const DensitySpec& dens, const Point& x, double delta, int kernel_dim) {
  const auto& a = *dens.manifold().as<AffineSubspace>();
  const auto& g = *dens.as<GaussianOnAffine>();
  const int d = static_cast<int>(g.mean.size());
  const double var = std::exp(2.0 * delta);
  const Eigen::VectorXd v = affine_coords(a, x) - g.mean;
  const double perp_sq = std::pow(detail::affine_residual(a, x), 2);
  const Eigen::MatrixXd S = g.covariance + var * Eigen::MatrixXd::Identity(d, d);
  const Eigen::LLT<Eigen::MatrixXd> llt(S);
  const double log_det = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  const Eigen::VectorXd Sv = llt.solve(v);
  const double trace_inv = llt.solve(Eigen::MatrixXd::Identity(d, d)).trace();
  KernelIntegral out;
  const double log_nd = -0.5 * d * kLog2Pi - 0.5 * log_det - 0.5 * v.dot(Sv);
  out.log_value = log_gauss_const(kernel_dim) - kernel_dim * delta + 0.5 * d * kLog2Pi + d * delta + log_nd -
                  0.5 * perp_sq / var;
  out.scaled_sq = perp_sq / var + var * Sv.squaredNorm() + d - var * trace_inv;
  check_finite(out, -0.5 * perp_sq / var);
  return out;
}

inline KernelIntegral bank_monte_carlo(const Points& bank, const Point& x, double delta, double log_norm) {
  const double inv_var = std::exp(-2.0 * delta);
  const std::size_t n = bank.size();
  std::vector<double> logw(n), sq(n);
  double hi = -kInf;
  for (std::size_t i = 0; i < n; ++i) {
    sq[i] = (x - bank[i]).squaredNorm() * inv_var;
    logw[i] = -0.5 * sq[i];
    hi = std::max(hi, logw[i]);
  }
  if (!std::isfinite(hi)) throw NumericalError("monte carlo: every kernel weight underflowed (max exponent " + std::to_string(hi) + ")");
  double s1 = 0.0, s2 = 0.0, m1 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = std::exp(logw[i] - hi);
    s1 += w;
    s2 += w * w;
    m1 += w * sq[i];
  }
  // One dominant sample makes the ratio variance vanish, which would read as an exact value.
  if (s1 * s1 < 2.0 * s2)
    throw NumericalError("monte carlo: effective sample size " + std::to_string(s1 * s1 / s2) + " below 2");
  const double mean_sq = m1 / s1;
  double ratio_var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = std::exp(logw[i] - hi) / s1;
    ratio_var += w * w * (sq[i] - mean_sq) * (sq[i] - mean_sq);
  }
  const double nn = static_cast<double>(n);
  const double mean_w = s1 / nn;
  const double var_w = std::max(0.0, s2 / nn - mean_w * mean_w) * nn / (nn - 1.0);
  KernelIntegral out;
  out.log_value = log_norm + hi + std::log(mean_w);
  out.scaled_sq = mean_sq;
  out.log_value_se = std::sqrt(var_w / nn) / mean_w;
  out.scaled_sq_se = std::sqrt(ratio_var);
  return out;
}

inline KernelIntegral merge_components(const std::vector<KernelIntegral>& parts, const std::vector<double>& weights) {
  LogWeightedMean acc;
  for (std::size_t j = 0; j < parts.size(); ++j) acc.add(std::log(weights[j]) + parts[j].log_value, parts[j].scaled_sq);
  KernelIntegral out{acc.log_total(), acc.empty() ? 0.0 : acc.mean()};
  // Standard errors combine as independent contributions weighted by share.
  double se_log = 0.0, se_sq = 0.0;
  for (std::size_t j = 0; j < parts.size(); ++j) {
    const double share = std::exp(std::log(weights[j]) + parts[j].log_value - out.log_value);
    se_log += std::pow(share * parts[j].log_value_se, 2);
    se_sq += std::pow(share * parts[j].scaled_sq_se, 2);
  }
  out.log_value_se = std::sqrt(se_log);
  out.scaled_sq_se = std::sqrt(se_sq);
  return out;
}

}  // namespace detail

/// Per-component kernel integrals (un-weighted by pi_j) for a mixture oracle;
/// a single entry otherwise. `kernel_dim` selects the N_k normalization.
inline std::vector<KernelIntegral> component_kernel_integrals(const ConvolutionOracle& oracle, const Point& x,
                                                              double delta, int kernel_dim) {
  if (!std::isfinite(delta)) throw DomainError("delta must be finite");
  if (x.size() != oracle.density().ambient_dim()) throw DomainError("point dimension does not match ambient dimension");
  if (!oracle.parts().empty()) {
    std::vector<KernelIntegral> out;
    for (const auto& part : oracle.parts()) out.push_back(component_kernel_integrals(part, x, delta, kernel_dim)[0]);
    return out;
  }
  const auto& dens = oracle.density();
  const double log_norm = log_gauss_const(kernel_dim) - kernel_dim * delta;
  switch (oracle.method()) {
    case Method::ClosedForm:
      if (const auto* ps = dens.manifold().as<PointSet>()) return {detail::atoms_closed_form(*ps, x, delta, log_norm)};
      return {detail::gaussian_closed_form(dens, x, delta, kernel_dim)};
    case Method::Quadrature:
      if (const auto* s = dens.manifold().as<Sphere>()) return {detail::circle_quadrature(*s, oracle.options(), x, delta, log_norm)};
      return {detail::line_quadrature(dens, oracle.options(), x, delta, log_norm)};
    case Method::MonteCarlo:
      return {detail::bank_monte_carlo(oracle.bank(), x, delta, log_norm)};
    case Method::Auto:
      break;
  }
  throw UnsupportedError("unresolved convolution method");
}

inline KernelIntegral kernel_integral(const ConvolutionOracle& oracle, const Point& x, double delta, int kernel_dim) {
  auto parts = component_kernel_integrals(oracle, x, delta, kernel_dim);
  if (oracle.parts().empty()) return parts.front();
  return detail::merge_components(parts, oracle.density().manifold().as<DisjointUnion>()->weights);
}

/// log rho_N(x, delta).
inline double log_rho_gauss(const ConvolutionOracle& oracle, const Point& x, double delta) {
  return kernel_integral(oracle, x, delta, oracle.density().ambient_dim()).log_value;
}

/// d/d delta log rho_N(x, delta) = -D + e^{-2 delta} E_w[|x - X'|^2], with the
/// expectation under the kernel-weighted density (same method as the value).
inline double dlogrho_ddelta_gauss(const ConvolutionOracle& oracle, const Point& x, double delta) {
  const int D = oracle.density().ambient_dim();
  const double v = -D + kernel_integral(oracle, x, delta, D).scaled_sq;
  if (std::isnan(v)) throw NumericalError("dlogrho_ddelta_gauss: NaN");
  return v;
}

namespace detail {

/// Intrinsic dimension of the component containing x (x must be on M).
inline int lid_at(const DensitySpec& dens, const Point& x) {
  return make_query(dens.manifold(), x).true_lid;
}

}  // namespace detail

/// int_M p(x') N_d(x - x'; 0, delta) dx' with the unnormalized d-dim kernel,
/// d the intrinsic dimension at x. Tends to p(x).
inline double prop1_integral(const ConvolutionOracle& oracle, const Point& x, double delta) {
  if (oracle.method() == Method::MonteCarlo) throw UnsupportedError("prop1 needs closed form or quadrature");
  const int d = detail::lid_at(oracle.density(), x);
  return std::exp(kernel_integral(oracle, x, delta, d).log_value);
}

/// e^{-2 delta} int_M p(x') |x - x'|^2 N_d(x - x'; 0, delta) dx'. Tends to d p(x).
inline double prop2_integral(const ConvolutionOracle& oracle, const Point& x, double delta) {
  if (oracle.method() == Method::MonteCarlo) throw UnsupportedError("prop2 needs closed form or quadrature");
  const int d = detail::lid_at(oracle.density(), x);
  const auto k = kernel_integral(oracle, x, delta, d);
  return std::exp(k.log_value) * k.scaled_sq;
}

// ---------------------------------------------------------------------------
// Ball probabilities and the uniform convolution.

enum class BallMethod { Exact, MonteCarlo, LocalMonteCarlo };

struct BallProbability {
  double value = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  double std_error = 0.0;
  std::size_t hits = 0;
  std::size_t trials = 0;
  bool exact = false;
  /// Monte Carlo saw no sample inside the ball.
  bool no_hits = false;
  /// Per-component probability mass (pi_j P_j); off-component entries are
  /// exactly zero whenever the ball cannot reach that component.
  std::vector<double> components;
};

/// Sample bank behind Monte Carlo ball counting; fixed per (density, seed) so
/// counts are monotone in delta.
class BallOracle {
 public:
  /// Exact cap/interval/atom arithmetic where available.
  static BallOracle exact(DensitySpec density) { return BallOracle(std::move(density), BallMethod::Exact); }
  /// Plain count fraction over n draws from p.
  static BallOracle monte_carlo(DensitySpec density, std::size_t n, std::uint64_t seed);
  /// Importance sampling from a local patch around `center` whose support
  /// covers every ball of radius <= max_radius centered there.
  static BallOracle local_monte_carlo(DensitySpec density, const Point& center, double max_radius, std::size_t n,
                                      std::uint64_t seed);

  const DensitySpec& density() const { return density_; }
  BallMethod method() const { return method_; }
  const Points& bank() const { return *bank_; }
  const std::vector<double>& log_weights() const { return *log_weights_; }
  const Point& center() const { return center_; }
  double max_radius() const { return max_radius_; }
  std::size_t patch_component() const { return patch_component_; }

 private:
  BallOracle(DensitySpec density, BallMethod m) : density_(std::move(density)), method_(m) {}
  DensitySpec density_;
  BallMethod method_;
  std::shared_ptr<const Points> bank_;
  std::shared_ptr<const std::vector<double>> log_weights_;
  Point center_;
  double max_radius_ = 0.0;
  std::size_t patch_component_ = 0;
};

inline BallOracle BallOracle::monte_carlo(DensitySpec density, std::size_t n, std::uint64_t seed) {
  BallOracle o(std::move(density), BallMethod::MonteCarlo);
  o.bank_ = std::make_shared<const Points>(sample(o.density_, n, seed));
  return o;
}

inline BallOracle BallOracle::local_monte_carlo(DensitySpec density, const Point& center, double max_radius,
                                                std::size_t n, std::uint64_t seed) {
  BallOracle o(std::move(density), BallMethod::LocalMonteCarlo);
  auto patch = sample_patch(o.density_.manifold(), center, max_radius, n, seed);
  const DensitySpec* comp = &o.density_;
  double log_pi = 0.0;
  if (const auto* mix = o.density_.as<Mixture>()) {
    comp = &mix->components[patch.component];
    log_pi = std::log(o.density_.manifold().as<DisjointUnion>()->weights[patch.component]);
  }
  std::vector<double> logw(patch.points.size());
  for (std::size_t i = 0; i < logw.size(); ++i)
    logw[i] = log_pi + log_density_at(*comp, patch.points[i]) - patch.log_q[i];
  o.bank_ = std::make_shared<const Points>(std::move(patch.points));
  o.log_weights_ = std::make_shared<const std::vector<double>>(std::move(logw));
  o.center_ = center;
  o.max_radius_ = max_radius;
  o.patch_component_ = patch.component;
  return o;
}

namespace detail {

/// Exact P(|X - x| < r) for a single (non-union) component, with its
/// derivative d log P / d delta (r = e^delta) when available.
struct ExactBall {
  double prob = 0.0;
  double dlog = 0.0;
};

inline ExactBall exact_component_ball(const DensitySpec& dens, const Point& x, double r) {
  const auto& m = dens.manifold();
  if (const auto* ps = m.as<PointSet>()) {
    std::size_t hits = 0;
    for (const auto& p : ps->points) hits += (x - p).norm() < r;
    return {static_cast<double>(hits) / static_cast<double>(ps->points.size()), 0.0};
  }
  const double dist = distance_to_support(m, x);
  if (dist >= r) return {0.0, 0.0};
  if (const auto* s = m.as<Sphere>(); s && dens.as<UniformOnCompact>()) {
    if (dist >= kOnManifoldTol) throw UnsupportedError("exact sphere ball probability needs x on the sphere");
    if (r >= 2.0 * s->radius) return {1.0, 0.0};
    const int d = s->intrinsic_dim;
    const double theta = 2.0 * std::asin(r / (2.0 * s->radius));
    const double full = boost::math::beta(0.5 * d, 0.5);
    const double frac = sin_power_integral(d - 1, theta) / full;
    const double dtheta_dr = 1.0 / (s->radius * std::sqrt(1.0 - r * r / (4.0 * s->radius * s->radius)));
    const double dfrac_dtheta = std::pow(std::sin(theta), d - 1) / full;
    return {frac, r * dfrac_dtheta * dtheta_dr / frac};
  }
  if (const auto* a = m.as<AffineSubspace>(); a && a->basis.cols() == 1 && dens.as<GaussianOnAffine>()) {
    const auto& g = *dens.as<GaussianOnAffine>();
    const double sd = std::sqrt(g.covariance(0, 0));
    const double u = affine_coords(*a, x)[0] - g.mean[0];
    const double w = std::sqrt(r * r - dist * dist);
    auto cdf = [](double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); };
    auto pdf = [](double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * kPi); };
    const double zb = (u + w) / sd, za = (u - w) / sd;
    const double prob = cdf(zb) - cdf(za);
    const double dprob_dw = (pdf(zb) + pdf(za)) / sd;
    return {prob, r * dprob_dw * (r / w) / prob};
  }
  throw UnsupportedError("no exact ball probability for " + dens.name() + " on " + m.name());
}

inline double wilson_half_width(double phat, double n, double z = 1.959963984540054) {
  return z * std::sqrt(phat * (1.0 - phat) / n + z * z / (4.0 * n * n)) / (1.0 + z * z / n);
}

}  // namespace detail

/// P_{X~p}(|X - x| < e^delta).
inline BallProbability ball_probability(const BallOracle& oracle, const Point& x, double delta) {
  if (!std::isfinite(delta)) throw DomainError("delta must be finite");
  const double r = std::exp(delta);
  const auto& dens = oracle.density();
  const auto* mix = dens.as<Mixture>();
  const auto* uni = dens.manifold().as<DisjointUnion>();
  const std::size_t ncomp = mix ? mix->components.size() : 1;
  BallProbability out;
  out.components.assign(ncomp, 0.0);

  switch (oracle.method()) {
    case BallMethod::Exact: {
      for (std::size_t j = 0; j < ncomp; ++j) {
        const DensitySpec& c = mix ? mix->components[j] : dens;
        const double pi = mix ? uni->weights[j] : 1.0;
        out.components[j] = pi * detail::exact_component_ball(c, x, r).prob;
        out.value += out.components[j];
      }
      out.lo = out.hi = out.value;
      out.exact = true;
      return out;
    }
    case BallMethod::MonteCarlo: {
      const auto& bank = oracle.bank();
      for (const auto& p : bank) {
        if ((p - x).norm() < r) {
          ++out.hits;
          std::size_t j = mix ? locate(dens.manifold(), p).component : 0;
          out.components[j] += 1.0;
        }
      }
      out.trials = bank.size();
      const double n = static_cast<double>(out.trials);
      for (auto& c : out.components) c /= n;
      out.value = static_cast<double>(out.hits) / n;
      const double centre = (out.value + 1.959963984540054 * 1.959963984540054 / (2.0 * n)) /
                            (1.0 + 1.959963984540054 * 1.959963984540054 / n);
      const double half = detail::wilson_half_width(out.value, n);
      out.lo = std::max(0.0, centre - half);
      out.hi = std::min(1.0, centre + half);
      out.std_error = std::sqrt(out.value * (1.0 - out.value) / n);
      out.no_hits = out.hits == 0;
      return out;
    }
    case BallMethod::LocalMonteCarlo: {
      if ((x - oracle.center()).norm() > 1e-12) throw DomainError("local monte carlo bank was built for another center");
      if (r > oracle.max_radius()) throw DomainError("ball radius exceeds the local patch radius");
      for (std::size_t j = 0; j < ncomp; ++j) {
        if (j == oracle.patch_component()) continue;
        const DensitySpec& c = mix->components[j];
        if (distance_to_support(c.manifold(), x) < r)
          throw UnsupportedError("local monte carlo: ball reaches another component");
      }
      const auto& bank = oracle.bank();
      const auto& logw = oracle.log_weights();
      const double n = static_cast<double>(bank.size());
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t i = 0; i < bank.size(); ++i) {
        if ((bank[i] - x).norm() < r) {
          const double w = std::exp(logw[i]);
          ++out.hits;
          s1 += w;
          s2 += w * w;
        }
      }
      out.trials = bank.size();
      out.value = s1 / n;
      out.std_error = std::sqrt(std::max(0.0, s2 / n - out.value * out.value) / n);
      out.lo = std::max(0.0, out.value - 1.959963984540054 * out.std_error);
      out.hi = std::min(1.0, out.value + 1.959963984540054 * out.std_error);
      out.components[oracle.patch_component()] = out.value;
      out.no_hits = out.hits == 0;
      return out;
    }
  }
  return out;
}

/// log rho_U(x, delta) = log U_D - D delta + log P(ball).
inline double log_rho_uniform(const BallOracle& oracle, const Point& x, double delta) {
  const int D = oracle.density().ambient_dim();
  return log_uniform_const(D) - D * delta + std::log(ball_probability(oracle, x, delta).value);
}

/// int_M p(x') U_d(x - x'; 0, delta) dx' with the unnormalized d-dimensional
/// ball kernel, d the intrinsic dimension at x.
inline double log_uniform_aux_integral(const BallOracle& oracle, const Point& x, double delta) {
  const int d = detail::lid_at(oracle.density(), x);
  return log_uniform_const(d) - d * delta + std::log(ball_probability(oracle, x, delta).value);
}

struct UniformSlopeOptions {
  /// Central-difference step in delta.
  double step = 0.05;
  /// Use the closed-form derivative when the oracle is exact and one exists.
  bool analytic = true;
  /// Report d/d delta log rho_U (= ball slope - D) instead of the ball slope.
  bool rho_form = false;
};

struct UniformSlope {
  double value = 0.0;
  double std_error = 0.0;
  bool analytic = false;
};

/// d/d delta log P(|X - x| < e^delta), or of log rho_U when rho_form is set.
inline UniformSlope dlogrho_ddelta_uniform(const BallOracle& oracle, const Point& x, double delta,
                                           UniformSlopeOptions opt = {}) {
  const int D = oracle.density().ambient_dim();
  const double offset = opt.rho_form ? -static_cast<double>(D) : 0.0;
  if (opt.analytic && oracle.method() == BallMethod::Exact) {
    const auto& dens = oracle.density();
    const double r = std::exp(delta);
    bool ok = true;
    double num = 0.0, den = 0.0;
    auto accumulate = [&](const DensitySpec& c, double pi) {
      try {
        const auto e = detail::exact_component_ball(c, x, r);
        num += pi * e.prob * e.dlog;
        den += pi * e.prob;
      } catch (const UnsupportedError&) {
        ok = false;
      }
    };
    if (const auto* mix = dens.as<Mixture>()) {
      const auto& w = dens.manifold().as<DisjointUnion>()->weights;
      for (std::size_t j = 0; j < mix->components.size(); ++j) accumulate(mix->components[j], w[j]);
    } else {
      accumulate(dens, 1.0);
    }
    if (ok) {
      if (!(den > 0)) throw DomainError("zero ball probability at delta " + std::to_string(delta));
      return {num / den + offset, 0.0, true};
    }
  }
  if (!(opt.step > 0)) throw DomainError("central difference step must be positive");
  const auto hi = ball_probability(oracle, x, delta + opt.step);
  const auto lo = ball_probability(oracle, x, delta - opt.step);
  if (!(hi.value > 0) || !(lo.value > 0))
    throw DomainError("zero ball probability on the central-difference stencil at delta " + std::to_string(delta));
  UniformSlope out;
  out.value = (std::log(hi.value) - std::log(lo.value)) / (2.0 * opt.step) + offset;
  if (!hi.exact) {
    // Nested balls over a shared bank: Var(log hi - log lo) ~ relvar(lo) - relvar(hi).
    const double rel = std::sqrt(std::max(0.0, std::pow(lo.std_error / lo.value, 2) - std::pow(hi.std_error / hi.value, 2)));
    out.std_error = rel / (2.0 * opt.step);
  }
  return out;
}

}  // namespace lidkit
