#pragma once

// LID estimators: FLIPD from a score field, the ball-probability slope,
// LIDL regression of log rho_N on delta, and the empirical ball-count slope.

#include "lidkit/common.hpp"
#include "lidkit/convolve.hpp"
#include "lidkit/geometry.hpp"
#include "lidkit/schedule.hpp"
#include "lidkit/score.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace lidkit {

/// FLIPD's default delta_0 for exact-score experiments.
inline constexpr double kDefaultDelta0 = -6.0;

struct LidDiagnostics {
  double score_norm_sq = 0.0;
  double trace = 0.0;
  std::optional<double> std_error;
};

/// A continuous dimension estimate; never clamped or rounded (negative
/// values are legitimate output of an imperfect score).
struct LidEstimate {
  double value = 0.0;
  std::string estimator;
  double delta_used = 0.0;
  std::vector<double> grid;
  LidDiagnostics diagnostics;
  /// Set on variants that are not the canonical single-delta estimator.
  bool non_canonical = false;
};

/// Optional post-processing: nearest integer, clamped at zero.
inline LidEstimate round_estimate(LidEstimate e) {
  e.value = std::max(0.0, std::round(e.value));
  return e;
}

struct RegressionFit {
  double slope = 0.0;
  double intercept = 0.0;
  double residual_rms = 0.0;
  std::vector<double> grid;
  /// max |X^T (y - X beta)|, scaled by the data magnitude.
  double normal_equation_residual = 0.0;
};

struct TraceMode {
  enum class Kind { Exact, FiniteDifference, Hutchinson };
  Kind kind = Kind::Exact;
  std::size_t probes = 1000;
  std::uint64_t seed = 0;
  ProbeDist dist = ProbeDist::Rademacher;
  /// 0 selects the field's own step (NumericFD) or the default JVP step.
  double step = 0.0;

  static TraceMode exact() { return {}; }
  static TraceMode finite_difference(double step = 0.0) { return {Kind::FiniteDifference, 0, 0, ProbeDist::Rademacher, step}; }
  static TraceMode hutchinson(std::size_t probes, std::uint64_t seed, ProbeDist dist = ProbeDist::Rademacher) {
    return {Kind::Hutchinson, probes, seed, dist, 0.0};
  }
};

struct NuResult {
  double value = 0.0;
  double time = 0.0;
  double score_norm_sq = 0.0;
  double trace = 0.0;
  double trace_std_error = 0.0;
};

namespace detail {

inline double field_step(const ScoreField& field, const Point& y, double t, double requested) {
  if (requested > 0) return requested;
  if (const auto* fd = std::get_if<NumericFD>(&field.source())) return fd->step(t);
  return default_jvp_step(y);
}

}  // namespace detail

/// nu(s, x, t(delta)) = sigma^2 (Tr grad s + |s|^2) evaluated at (psi x, t(delta)).
inline NuResult nu(const ScoreField& field, const ScheduleSpec& sched, const Point& x, double delta,
                   const TraceMode& mode = TraceMode::exact()) {
  if (x.size() != field.ambient_dim()) throw DomainError("nu: dimension mismatch");
  NuResult out;
  out.time = t_of_delta(sched, delta);
  const double ps = psi(sched, out.time), sg = sigma(sched, out.time);
  if (!(sg > 0)) throw DomainError("score undefined at t=0 (delta at the schedule's lower endpoint)");
  const Point y = ps * x;
  const Point s = score(field, y, out.time);
  out.score_norm_sq = s.squaredNorm();
  switch (mode.kind) {
    case TraceMode::Kind::Exact:
      out.trace = exact_trace(field, y, out.time);
      break;
    case TraceMode::Kind::FiniteDifference:
      out.trace = fd_trace(field, y, out.time, detail::field_step(field, y, out.time, mode.step)).value;
      break;
    case TraceMode::Kind::Hutchinson: {
      const auto est = hutchinson_trace(field, y, out.time, mode.probes, mode.seed, mode.dist,
                                        detail::field_step(field, y, out.time, mode.step));
      out.trace = est.value;
      out.trace_std_error = est.std_error;
      break;
    }
  }
  out.value = sg * sg * (out.trace + out.score_norm_sq);
  if (!std::isfinite(out.value)) throw NumericalError("nu: non-finite value");
  return out;
}

/// FLIPD(x, delta0) = D + nu(s, x, t(delta0)).
inline LidEstimate flipd(const ScoreField& field, const ScheduleSpec& sched, const Point& x,
                         double delta0 = kDefaultDelta0, const TraceMode& mode = TraceMode::exact()) {
  const auto n = nu(field, sched, x, delta0, mode);
  LidEstimate e;
  e.value = field.ambient_dim() + n.value;
  e.estimator = "flipd";
  e.delta_used = delta0;
  e.diagnostics.score_norm_sq = n.score_norm_sq;
  e.diagnostics.trace = n.trace;
  if (mode.kind == TraceMode::Kind::Hutchinson) {
    const double sg = sigma(sched, n.time);
    e.diagnostics.std_error = sg * sg * n.trace_std_error;
  }
  return e;
}

/// Mean of FLIPD over a delta grid. Not the canonical estimator.
inline LidEstimate flipd_grid_mean(const ScoreField& field, const ScheduleSpec& sched, const Point& x,
                                   const std::vector<double>& grid, const TraceMode& mode = TraceMode::exact()) {
  if (grid.empty()) throw DomainError("flipd_grid_mean: empty grid");
  LidEstimate e;
  for (double d : grid) e.value += flipd(field, sched, x, d, mode).value;
  e.value /= static_cast<double>(grid.size());
  e.estimator = "flipd_grid_mean";
  e.grid = grid;
  e.delta_used = grid.front();
  e.non_canonical = true;
  return e;
}

/// log p(y, t) of the diffused density, expressed through rho_N:
/// log p(y, t) = log rho_N(y / psi, log lambda(t)) - D log psi(t).
inline LogDensityFn diffused_log_density(std::shared_ptr<const ConvolutionOracle> oracle, const ScheduleSpec& sched) {
  return [oracle, sched](const Point& y, double t) {
    const double ps = psi(sched, t);
    const double lam = lambda(sched, t);
    return log_rho_gauss(*oracle, y / ps, std::log(lam)) - oracle->density().ambient_dim() * std::log(ps);
  };
}

/// Score field obtained by differencing the oracle's diffused log density with
/// step rel_step * sigma(t).
inline ScoreField convolution_score_field(const ConvolutionOracle& oracle, const ScheduleSpec& sched,
                                          double rel_step = 1e-2) {
  auto shared = std::make_shared<const ConvolutionOracle>(oracle);
  return ScoreField::numeric(
      diffused_log_density(shared, sched),
      [sched, rel_step](double t) { return rel_step * sigma(sched, t); }, oracle.density().ambient_dim());
}

/// Ball-probability slope d/d delta log P(|X - x| < e^delta) at delta0.
inline LidEstimate uniform_slope(const BallOracle& oracle, const Point& x, double delta0,
                                 UniformSlopeOptions opt = {}) {
  opt.rho_form = false;
  const auto slope = dlogrho_ddelta_uniform(oracle, x, delta0, opt);
  LidEstimate e;
  e.value = slope.value;
  e.estimator = "uniform_slope";
  e.delta_used = delta0;
  if (!slope.analytic) e.diagnostics.std_error = slope.std_error;
  return e;
}

/// Ordinary least squares y = intercept + slope * x.
inline RegressionFit least_squares(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw DomainError("least_squares: size mismatch");
  if (xs.size() < 2) throw DomainError("degenerate grid: need at least two points");
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  if (!(sxx > 0)) throw DomainError("degenerate grid: all delta values are equal");
  RegressionFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.grid = xs;
  double ss = 0.0, r0 = 0.0, r1 = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double r = ys[i] - fit.intercept - fit.slope * xs[i];
    ss += r * r;
    r0 += r;
    r1 += r * xs[i];
    scale += std::abs(ys[i]) * (1.0 + std::abs(xs[i]));
  }
  fit.residual_rms = std::sqrt(ss / n);
  fit.normal_equation_residual = std::max(std::abs(r0), std::abs(r1)) / std::max(scale, 1e-300);
  return fit;
}

struct RegressionEstimate {
  RegressionFit fit;
  LidEstimate estimate;
};

/// LIDL: regress log rho_N on delta; LID = slope + D.
inline RegressionEstimate lidl_regress(const std::vector<std::pair<double, double>>& log_densities, int ambient_dim) {
  std::vector<double> xs, ys;
  for (const auto& [d, v] : log_densities) {
    xs.push_back(d);
    ys.push_back(v);
  }
  RegressionEstimate out;
  out.fit = least_squares(xs, ys);
  out.estimate.value = out.fit.slope + ambient_dim;
  out.estimate.estimator = "lidl";
  out.estimate.grid = xs;
  out.estimate.delta_used = xs.front();
  return out;
}

inline constexpr std::size_t kMinBallCount = 20;

struct BallCountEstimate {
  RegressionFit fit;
  LidEstimate estimate;
  /// Grid values dropped because the ball held fewer than k_min samples.
  std::vector<double> trimmed;
};

/// Slope of log((count + 1/2) / n) against delta, where count is the number of
/// samples strictly inside B(x, e^delta).
inline BallCountEstimate ball_count_regress(const Points& samples, const Point& x, const std::vector<double>& grid,
                                            std::size_t k_min = kMinBallCount) {
  if (samples.empty()) throw DomainError("ball_count_regress: no samples");
  std::vector<double> dist(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) dist[i] = (samples[i] - x).norm();
  std::sort(dist.begin(), dist.end());
  const double n = static_cast<double>(samples.size());
  BallCountEstimate out;
  std::vector<double> xs, ys;
  for (double d : grid) {
    const double r = std::exp(d);
    const auto count = static_cast<std::size_t>(std::lower_bound(dist.begin(), dist.end(), r) - dist.begin());
    if (count < k_min) {
      out.trimmed.push_back(d);
      continue;
    }
    xs.push_back(d);
    ys.push_back(std::log((static_cast<double>(count) + 0.5) / n));
  }
  if (xs.size() < 2)
    throw DomainError("ball_count_regress: fewer than two grid values keep " + std::to_string(k_min) + " neighbours");
  out.fit = least_squares(xs, ys);
  out.estimate.value = out.fit.slope;
  out.estimate.estimator = "ball_count";
  out.estimate.grid = xs;
  out.estimate.delta_used = xs.front();
  return out;
}

}  // namespace lidkit
