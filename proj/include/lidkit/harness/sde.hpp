#pragma once

// Forward and reverse diffusion SDE simulation by Euler-Maruyama.
//
//   forward:  dX = gamma(t) X dt + g(t) dW
//   backward: dY = [g^2(1-s) s(Y, 1-s) - gamma(1-s) Y] ds + g(1-s) dW

#include "lidkit/score.hpp"

#include <algorithm>

namespace lidkit {

struct SampleMoments {
  Point mean;
  /// Per-coordinate unbiased sample variance.
  Point variance;
  Point mean_se;
  Point variance_se;
};

inline SampleMoments sample_moments(const Points& xs) {
  if (xs.size() < 2) throw DomainError("sample_moments: need at least two samples");
  const auto D = xs.front().size();
  const double n = static_cast<double>(xs.size());
  SampleMoments m{Point::Zero(D), Point::Zero(D), Point::Zero(D), Point::Zero(D)};
  for (const auto& x : xs) m.mean += x;
  m.mean /= n;
  Point m4 = Point::Zero(D);
  for (const auto& x : xs) {
    const Eigen::ArrayXd c = (x - m.mean).array();
    m.variance += (c * c).matrix();
    m4 += (c * c * c * c).matrix();
  }
  m.variance /= (n - 1.0);
  m4 /= n;
  for (Eigen::Index k = 0; k < D; ++k) {
    m.mean_se[k] = std::sqrt(m.variance[k] / n);
    const double v = m.variance[k];
    m.variance_se[k] = std::sqrt(std::max(0.0, m4[k] - v * v * (n - 3.0) / (n - 1.0)) / n);
  }
  return m;
}

/// Simulates the forward SDE from x0 over [0, t_end] with `steps` uniform
/// Euler-Maruyama steps, n independent paths.
inline Points simulate_forward(const ScheduleSpec& sched, const Point& x0, double t_end, std::size_t steps,
                               std::size_t n, std::uint64_t seed) {
  if (steps < 1) throw DomainError("simulate_forward: need at least one step");
  detail::check_time(t_end);
  const double dt = t_end / static_cast<double>(steps);
  Rng rng(derive_seed(seed, 0xf02d));
  std::normal_distribution<double> normal;
  Points out(n, x0);
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = k * dt;
    const double gam = drift_coefficient(sched, t);
    const double noise = std::sqrt(diffusion_squared(sched, t) * dt);
    for (auto& x : out) {
      for (Eigen::Index i = 0; i < x.size(); ++i) x[i] += gam * x[i] * dt + noise * normal(rng);
    }
  }
  return out;
}

/// Draws from the diffused mixture p(., t) = sum_i w_i N(psi a_i, sigma^2 I).
inline Points sample_diffused_mixture(const Points& atoms, const std::vector<double>& weights,
                                      const ScheduleSpec& sched, double t, std::size_t n, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xd1ff));
  std::normal_distribution<double> normal;
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  const double ps = psi(sched, t), sg = sigma(sched, t);
  Points out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Point y = ps * atoms[pick(rng)];
    for (Eigen::Index k = 0; k < y.size(); ++k) y[k] += sg * normal(rng);
    out.push_back(std::move(y));
  }
  return out;
}

/// Mean over random unit directions of the 1-d Wasserstein-1 distance between
/// the projected samples. Both sets must have the same size.
inline double sliced_wasserstein(const Points& a, const Points& b, std::size_t directions, std::uint64_t seed) {
  if (a.size() != b.size() || a.empty()) throw DomainError("sliced_wasserstein: need equal, nonempty sample sets");
  const auto D = a.front().size();
  Rng rng(derive_seed(seed, 0x5111ce));
  std::normal_distribution<double> normal;
  std::vector<double> pa(a.size()), pb(b.size());
  double total = 0.0;
  for (std::size_t k = 0; k < directions; ++k) {
    Point dir(D);
    for (Eigen::Index i = 0; i < D; ++i) dir[i] = normal(rng);
    dir.normalize();
    for (std::size_t i = 0; i < a.size(); ++i) {
      pa[i] = a[i].dot(dir);
      pb[i] = b[i].dot(dir);
    }
    std::sort(pa.begin(), pa.end());
    std::sort(pb.begin(), pb.end());
    double w = 0.0;
    for (std::size_t i = 0; i < pa.size(); ++i) w += std::abs(pa[i] - pb[i]);
    total += w / static_cast<double>(pa.size());
  }
  return total / static_cast<double>(directions);
}

struct SdeDemoOptions {
  std::size_t steps = 1000;
  std::size_t n = 10000;
  std::uint64_t seed = 0;
  double t_stop = 1e-3;
  std::size_t directions = 64;
};

struct SdeDemoReport {
  Points samples;
  /// Fresh draws from p(., t_stop), the target law of the samples.
  Points reference;
  double sliced_w1 = 0.0;
  /// False when there are no samples to compare.
  bool distance_defined = false;
  double t_stop = 0.0;
  double target_variance = 0.0;
};

/// Integrates the backward SDE with the exact mixture score from t = 1 down to
/// t_stop, starting from exact draws of p(., 1).
inline SdeDemoReport reverse_sde_demo(const DensitySpec& empirical, const ScheduleSpec& sched,
                                      const SdeDemoOptions& opt = {}) {
  if (opt.steps < 100) throw DomainError("reverse_sde_demo: at least 100 steps required");
  if (!(opt.t_stop > 0 && opt.t_stop < 1)) throw DomainError("reverse_sde_demo: t_stop must lie in (0, 1)");
  const auto field = ScoreField::mixture(empirical, sched);
  const auto& mix = std::get<MixtureAnalytic>(field.source());
  SdeDemoReport rep;
  rep.t_stop = opt.t_stop;
  rep.target_variance = std::pow(sigma(sched, opt.t_stop), 2);
  if (opt.n == 0) return rep;

  std::vector<double> weights;
  for (double lw : mix.log_weights) weights.push_back(std::exp(lw));
  rep.samples = sample_diffused_mixture(mix.atoms, weights, sched, 1.0, opt.n, derive_seed(opt.seed, 1));
  const double ds = (1.0 - opt.t_stop) / static_cast<double>(opt.steps);
  Rng rng(derive_seed(opt.seed, 2));
  std::normal_distribution<double> normal;
  for (std::size_t k = 0; k < opt.steps; ++k) {
    const double t = 1.0 - k * ds;
    const double g2 = diffusion_squared(sched, t);
    const double gam = drift_coefficient(sched, t);
    const double noise = std::sqrt(g2 * ds);
    for (auto& y : rep.samples) {
      const Point drift = g2 * score(field, y, t) - gam * y;
      y += drift * ds;
      for (Eigen::Index i = 0; i < y.size(); ++i) y[i] += noise * normal(rng);
    }
  }
  rep.reference = sample_diffused_mixture(mix.atoms, weights, sched, opt.t_stop, opt.n, derive_seed(opt.seed, 3));
  rep.sliced_w1 = sliced_wasserstein(rep.samples, rep.reference, opt.directions, derive_seed(opt.seed, 4));
  rep.distance_defined = true;
  return rep;
}

}  // namespace lidkit
