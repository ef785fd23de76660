#pragma once

// Score fields s(y, t) = grad_y log p(y, t) of the diffused densities and
// their Jacobian traces (closed form, Hutchinson, finite differences).

#include "lidkit/common.hpp"
#include "lidkit/geometry.hpp"
#include "lidkit/schedule.hpp"

#include <functional>
#include <memory>
#include <utility>
#include <variant>

namespace lidkit {

/// p(., t) = sum_i w_i N(psi(t) a_i, sigma(t)^2 I) for atoms a_i.
struct MixtureAnalytic {
  Points atoms;
  std::vector<double> log_weights;
  ScheduleSpec schedule;
};

/// Diffused Gaussian on an affine subspace:
/// N(psi (o + B m), psi^2 B Sigma B^T + sigma^2 I).
struct AffineGaussianAnalytic {
  DensitySpec density;
  ScheduleSpec schedule;
};

using LogDensityFn = std::function<double(const Point&, double)>;
using StepFn = std::function<double(double)>;
using ScoreFn = std::function<Point(const Point&, double)>;

/// Score by central differences of a log density; step may depend on t.
struct NumericFD {
  LogDensityFn log_density;
  StepFn step;
};

/// Any other vector field (test fields, perturbed scores).
struct CallableScore {
  ScoreFn fn;
};

class ScoreField {
 public:
  using Source = std::variant<MixtureAnalytic, AffineGaussianAnalytic, NumericFD, CallableScore>;

  /// Exact score of an Empirical density diffused by `sched`.
  static ScoreField mixture(const DensitySpec& empirical, const ScheduleSpec& sched);
  static ScoreField mixture(Points atoms, std::vector<double> weights, const ScheduleSpec& sched);
  static ScoreField affine_gaussian(const DensitySpec& gaussian, const ScheduleSpec& sched);
  static ScoreField numeric(LogDensityFn log_density, StepFn step, int ambient_dim) {
    return ScoreField(NumericFD{std::move(log_density), std::move(step)}, ambient_dim);
  }
  static ScoreField callable(ScoreFn fn, int ambient_dim) { return ScoreField(CallableScore{std::move(fn)}, ambient_dim); }

  const Source& source() const { return source_; }
  int ambient_dim() const { return ambient_dim_; }
  bool is_analytic() const {
    return std::holds_alternative<MixtureAnalytic>(source_) || std::holds_alternative<AffineGaussianAnalytic>(source_);
  }

 private:
  ScoreField(Source s, int D) : source_(std::move(s)), ambient_dim_(D) {}
  Source source_;
  int ambient_dim_;
};

inline ScoreField ScoreField::mixture(const DensitySpec& empirical, const ScheduleSpec& sched) {
  const auto* ps = empirical.manifold().as<PointSet>();
  if (!ps || !empirical.as<Empirical>()) throw UnsupportedError("mixture score needs an empirical density");
  std::vector<double> w(ps->points.size(), 1.0 / static_cast<double>(ps->points.size()));
  return mixture(ps->points, std::move(w), sched);
}

inline ScoreField ScoreField::mixture(Points atoms, std::vector<double> weights, const ScheduleSpec& sched) {
  if (atoms.empty() || atoms.size() != weights.size()) throw DomainError("mixture score: one weight per atom");
  const int D = static_cast<int>(atoms.front().size());
  std::vector<double> logw;
  for (double w : weights) {
    if (!(w > 0)) throw DomainError("mixture score: weights must be positive");
    logw.push_back(std::log(w));
  }
  return ScoreField(MixtureAnalytic{std::move(atoms), std::move(logw), sched}, D);
}

inline ScoreField ScoreField::affine_gaussian(const DensitySpec& gaussian, const ScheduleSpec& sched) {
  if (!gaussian.as<GaussianOnAffine>()) throw UnsupportedError("affine gaussian score needs a GaussianOnAffine density");
  return ScoreField(AffineGaussianAnalytic{gaussian, sched}, gaussian.ambient_dim());
}

namespace detail {

/// Responsibility-weighted moments of the diffused mixture at y:
/// mean_diff = sum r_i (psi a_i - y), mean_sq = sum r_i |psi a_i - y|^2.
struct MixtureMoments {
  Point mean_diff;
  double mean_sq = 0.0;
  double var = 0.0;
};

inline MixtureMoments mixture_moments(const MixtureAnalytic& m, const Point& y, double t) {
  const double ps = psi(m.schedule, t), sg = sigma(m.schedule, t);
  if (!(sg > 0)) throw DomainError("score undefined at t=0");
  const double inv_var = 1.0 / (sg * sg);
  const std::size_t n = m.atoms.size();
  std::vector<double> logr(n);
  double hi = -kInf;
  for (std::size_t i = 0; i < n; ++i) {
    logr[i] = m.log_weights[i] - 0.5 * (ps * m.atoms[i] - y).squaredNorm() * inv_var;
    hi = std::max(hi, logr[i]);
  }
  double total = 0.0;
  for (auto& v : logr) total += (v = std::exp(v - hi));
  MixtureMoments out{Point::Zero(y.size()), 0.0, sg * sg};
  for (std::size_t i = 0; i < n; ++i) {
    const double r = logr[i] / total;
    const Point diff = ps * m.atoms[i] - y;
    out.mean_diff += r * diff;
    out.mean_sq += r * diff.squaredNorm();
  }
  return out;
}

struct AffineParts {
  Eigen::MatrixXd basis;
  Point residual_normal;  // (I - B B^T)(y - mu)
  Eigen::VectorXd tangent;  // B^T (y - mu)
  Eigen::LLT<Eigen::MatrixXd> tangent_cov;  // psi^2 Sigma + sigma^2 I
  double var = 0.0;
};

inline AffineParts affine_parts(const AffineGaussianAnalytic& a, const Point& y, double t) {
  const auto& sub = *a.density.manifold().as<AffineSubspace>();
  const auto& g = *a.density.as<GaussianOnAffine>();
  const double ps = psi(a.schedule, t), sg = sigma(a.schedule, t);
  if (!(sg > 0)) throw DomainError("score undefined at t=0");
  const Point mu = ps * (sub.offset + sub.basis * g.mean);
  const Point rel = y - mu;
  AffineParts out;
  out.basis = sub.basis;
  out.tangent = sub.basis.transpose() * rel;
  out.residual_normal = rel - sub.basis * out.tangent;
  const auto d = g.mean.size();
  out.tangent_cov.compute(ps * ps * g.covariance + sg * sg * Eigen::MatrixXd::Identity(d, d));
  out.var = sg * sg;
  return out;
}

}  // namespace detail

inline Point score(const ScoreField& field, const Point& y, double t) {
  if (y.size() != field.ambient_dim()) throw DomainError("score: dimension mismatch");
  return std::visit(
      [&](const auto& src) -> Point {
        using T = std::decay_t<decltype(src)>;
        if constexpr (std::is_same_v<T, MixtureAnalytic>) {
          const auto mm = detail::mixture_moments(src, y, t);
          return mm.mean_diff / mm.var;
        } else if constexpr (std::is_same_v<T, AffineGaussianAnalytic>) {
          const auto ap = detail::affine_parts(src, y, t);
          return -(ap.residual_normal / ap.var + ap.basis * ap.tangent_cov.solve(ap.tangent));
        } else if constexpr (std::is_same_v<T, NumericFD>) {
          const double h = src.step(t);
          if (!(h > 0)) throw DomainError("finite-difference step must be positive");
          Point g(y.size());
          Point yp = y;
          for (Eigen::Index k = 0; k < y.size(); ++k) {
            yp[k] = y[k] + h;
            const double fp = src.log_density(yp, t);
            yp[k] = y[k] - h;
            const double fm = src.log_density(yp, t);
            yp[k] = y[k];
            g[k] = (fp - fm) / (2.0 * h);
          }
          return g;
        } else {
          return src.fn(y, t);
        }
      },
      field.source());
}

/// Closed-form Tr(grad s) for analytic sources.
inline double exact_trace(const ScoreField& field, const Point& y, double t) {
  if (const auto* m = std::get_if<MixtureAnalytic>(&field.source())) {
    const auto mm = detail::mixture_moments(*m, y, t);
    const double D = static_cast<double>(y.size());
    return -D / mm.var + (mm.mean_sq - mm.mean_diff.squaredNorm()) / (mm.var * mm.var);
  }
  if (const auto* a = std::get_if<AffineGaussianAnalytic>(&field.source())) {
    const auto ap = detail::affine_parts(*a, y, t);
    const auto d = ap.tangent.size();
    const double normal_dims = static_cast<double>(y.size() - d);
    return -normal_dims / ap.var - ap.tangent_cov.solve(Eigen::MatrixXd::Identity(d, d)).trace();
  }
  throw UnsupportedError("exact_trace needs an analytic score; use fd_trace or hutchinson_trace");
}

enum class ProbeDist { Rademacher, Gaussian };

struct TraceEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

/// Directional-derivative step used by the stochastic and FD traces.
inline double default_jvp_step(const Point& y) { return 1e-4 * (1.0 + y.norm()); }

/// Unbiased estimate of Tr(grad s) as the mean of e^T J e over random probes,
/// J e taken by central differences of the score along e.
inline TraceEstimate hutchinson_trace(const ScoreField& field, const Point& y, double t, std::size_t probes,
                                      std::uint64_t seed, ProbeDist dist = ProbeDist::Rademacher,
                                      double step = 0.0) {
  if (probes < 1) throw DomainError("hutchinson_trace: need at least one probe");
  const double h = step > 0 ? step : default_jvp_step(y);
  Rng rng(derive_seed(seed, 0x7ace));
  std::normal_distribution<double> normal;
  std::bernoulli_distribution coin(0.5);
  const auto D = y.size();
  Point eps(D);
  double mean = 0.0, m2 = 0.0;
  for (std::size_t p = 0; p < probes; ++p) {
    for (Eigen::Index k = 0; k < D; ++k) eps[k] = dist == ProbeDist::Rademacher ? (coin(rng) ? 1.0 : -1.0) : normal(rng);
    const Point jv = (score(field, y + h * eps, t) - score(field, y - h * eps, t)) / (2.0 * h);
    const double v = eps.dot(jv);
    const double delta = v - mean;
    mean += delta / static_cast<double>(p + 1);
    m2 += delta * (v - mean);
  }
  TraceEstimate out{mean, 0.0};
  if (probes > 1) out.std_error = std::sqrt(m2 / static_cast<double>(probes - 1) / static_cast<double>(probes));
  return out;
}

struct FdTrace {
  double value = 0.0;
  /// Set when halving the step moves the result by more than 10%.
  bool unstable_step = false;
};

inline FdTrace fd_trace(const ScoreField& field, const Point& y, double t, double step) {
  if (!(step > 0)) throw DomainError("fd_trace: step must be positive");
  auto trace_at = [&](double h) {
    double acc = 0.0;
    Point yp = y;
    for (Eigen::Index k = 0; k < y.size(); ++k) {
      yp[k] = y[k] + h;
      const double sp = score(field, yp, t)[k];
      yp[k] = y[k] - h;
      const double sm = score(field, yp, t)[k];
      yp[k] = y[k];
      acc += (sp - sm) / (2.0 * h);
    }
    return acc;
  };
  FdTrace out{trace_at(step)};
  const double half = trace_at(0.5 * step);
  out.unstable_step = std::abs(half - out.value) > 0.1 * std::max(std::abs(out.value), 1e-300);
  return out;
}

/// s + amplitude * (A y + b) with A, b standard normal entries drawn from the
/// seed: a smooth stand-in for an imperfectly learned score.
inline ScoreField perturbed(ScoreField base, double amplitude, std::uint64_t seed) {
  const int D = base.ambient_dim();
  Rng rng(derive_seed(seed, 0xbad5c0));
  std::normal_distribution<double> normal;
  Eigen::MatrixXd A(D, D);
  Eigen::VectorXd b(D);
  for (int i = 0; i < D; ++i) {
    b[i] = normal(rng);
    for (int j = 0; j < D; ++j) A(i, j) = normal(rng);
  }
  auto shared = std::make_shared<const ScoreField>(std::move(base));
  return ScoreField::callable(
      [shared, A, b, amplitude](const Point& y, double t) -> Point {
        return score(*shared, y, t) + amplitude * (A * y + b);
      },
      D);
}

}  // namespace lidkit
