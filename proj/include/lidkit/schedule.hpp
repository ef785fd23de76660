#pragma once

// Diffusion noise schedules. Forward SDE dX = gamma(t) X dt + g(t) dW has the
// Gaussian transition kernel N(psi(t) x0, sigma(t)^2 I).

#include "lidkit/common.hpp"

#include <string>
#include <utility>
#include <variant>

namespace lidkit {

/// Variance exploding: psi = 1, sigma(t) = sigma_min (sigma_max / sigma_min)^t.
struct VeSchedule {
  double sigma_min = 0.01;
  double sigma_max = 50.0;
};

/// Variance preserving with linear beta(t) = beta_min + t (beta_max - beta_min).
struct VpSchedule {
  double beta_min = 0.1;
  double beta_max = 20.0;
};

class ScheduleSpec {
 public:
  using Variant = std::variant<VeSchedule, VpSchedule>;

  static ScheduleSpec ve(double sigma_min, double sigma_max) {
    if (!(sigma_min > 0) || !(sigma_max > sigma_min)) throw DomainError("VE schedule needs 0 < sigma_min < sigma_max");
    return ScheduleSpec(VeSchedule{sigma_min, sigma_max});
  }
  static ScheduleSpec vp(double beta_min, double beta_max) {
    if (!(beta_min >= 0) || !(beta_max > beta_min)) throw DomainError("VP schedule needs 0 <= beta_min < beta_max");
    return ScheduleSpec(VpSchedule{beta_min, beta_max});
  }

  const Variant& variant() const { return variant_; }
  bool is_ve() const { return std::holds_alternative<VeSchedule>(variant_); }
  std::string name() const { return is_ve() ? "ve" : "vp"; }

 private:
  explicit ScheduleSpec(Variant v) : variant_(std::move(v)) {}
  Variant variant_;
};

namespace detail {

inline void check_time(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("time " + std::to_string(t) + " outside [0,1]");
}

/// int_0^t beta(s) ds for the linear VP schedule.
inline double vp_integral(const VpSchedule& vp, double t) {
  return vp.beta_min * t + 0.5 * (vp.beta_max - vp.beta_min) * t * t;
}

}  // namespace detail

inline double psi(const ScheduleSpec& s, double t) {
  detail::check_time(t);
  if (const auto* vp = std::get_if<VpSchedule>(&s.variant())) return std::exp(-0.5 * detail::vp_integral(*vp, t));
  return 1.0;
}

/// VE uses sigma(0) = 0 as a limit convention.
inline double sigma(const ScheduleSpec& s, double t) {
  detail::check_time(t);
  if (const auto* ve = std::get_if<VeSchedule>(&s.variant())) {
    if (t == 0.0) return 0.0;
    return ve->sigma_min * std::pow(ve->sigma_max / ve->sigma_min, t);
  }
  const auto& vp = std::get<VpSchedule>(s.variant());
  return std::sqrt(-std::expm1(-detail::vp_integral(vp, t)));
}

/// Noise-to-signal ratio sigma(t) / psi(t).
inline double lambda(const ScheduleSpec& s, double t) {
  detail::check_time(t);
  if (s.is_ve()) return sigma(s, t);
  const auto& vp = std::get<VpSchedule>(s.variant());
  return std::sqrt(std::expm1(detail::vp_integral(vp, t)));
}

/// Admissible interval of log lambda, i.e. the deltas t_of_delta accepts.
inline std::pair<double, double> delta_range(const ScheduleSpec& s) {
  if (const auto* ve = std::get_if<VeSchedule>(&s.variant()))
    return {std::log(ve->sigma_min), std::log(ve->sigma_max)};
  return {-kInf, std::log(lambda(s, 1.0))};
}

/// t(delta) = lambda^{-1}(e^delta). Closed form for VE; bisection for VP,
/// run until the bracket stops shrinking in floating point.
inline double t_of_delta(const ScheduleSpec& s, double delta) {
  const auto [lo, hi] = delta_range(s);
  if (!(delta >= lo && delta <= hi))
    throw DomainError("delta out of schedule range: " + std::to_string(delta) + " not in [" + std::to_string(lo) +
                      ", " + std::to_string(hi) + "]");
  if (const auto* ve = std::get_if<VeSchedule>(&s.variant()))
    return (delta - std::log(ve->sigma_min)) / (std::log(ve->sigma_max) - std::log(ve->sigma_min));
  const double target = std::exp(delta);
  double a = 0.0, b = 1.0;
  for (int it = 0; it < 2000; ++it) {
    const double mid = 0.5 * (a + b);
    if (mid <= a || mid >= b) break;
    if (lambda(s, mid) < target) a = mid; else b = mid;
  }
  return std::abs(lambda(s, a) - target) <= std::abs(lambda(s, b) - target) ? a : b;
}

/// Linear drift coefficient gamma(t) of the forward SDE.
inline double drift_coefficient(const ScheduleSpec& s, double t) {
  detail::check_time(t);
  if (const auto* vp = std::get_if<VpSchedule>(&s.variant()))
    return -0.5 * (vp->beta_min + t * (vp->beta_max - vp->beta_min));
  return 0.0;
}

/// Squared diffusion coefficient g(t)^2 of the forward SDE.
inline double diffusion_squared(const ScheduleSpec& s, double t) {
  detail::check_time(t);
  if (const auto* ve = std::get_if<VeSchedule>(&s.variant())) {
    const double sg = ve->sigma_min * std::pow(ve->sigma_max / ve->sigma_min, t);
    return 2.0 * sg * sg * std::log(ve->sigma_max / ve->sigma_min);
  }
  const auto& vp = std::get<VpSchedule>(s.variant());
  return vp.beta_min + t * (vp.beta_max - vp.beta_min);
}

}  // namespace lidkit
