#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lidkit {

using Point = Eigen::VectorXd;
using Points = std::vector<Point>;
using Rng = std::mt19937_64;

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kLog2Pi = 1.8378770664093454836;
inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Points farther than this from their manifold are rejected.
inline constexpr double kOnManifoldTol = 1e-9;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input outside an operation's domain (time outside [0,1], delta outside a
/// schedule's range, bad step sizes, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// The requested variant/method combination has no implementation.
class UnsupportedError : public Error {
 public:
  using Error::Error;
};

/// A point that was required to lie on a manifold does not.
class ProjectionError : public Error {
 public:
  ProjectionError(const std::string& what, double residual)
      : Error(what + " (projection residual " + std::to_string(residual) + ")"),
        residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

/// A numerical evaluation produced NaN/inf where a finite value is required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

inline double log_sum_exp(std::span<const double> terms) {
  double hi = -kInf;
  for (double v : terms) hi = std::max(hi, v);
  if (!std::isfinite(hi)) return hi;
  double acc = 0.0;
  for (double v : terms) acc += std::exp(v - hi);
  return hi + std::log(acc);
}

/// Streaming log-sum-exp with an attached weighted moment:
/// tracks log(sum_k e^{a_k}) and sum_k e^{a_k} f_k / sum_k e^{a_k}.
class LogWeightedMean {
 public:
  void add(double log_weight, double value) {
    if (log_weight == -kInf) return;
    if (log_weight <= max_) {
      double w = std::exp(log_weight - max_);
      sum_ += w;
      moment_ += w * value;
    } else {
      double scale = std::exp(max_ - log_weight);
      sum_ = sum_ * scale + 1.0;
      moment_ = moment_ * scale + value;
      max_ = log_weight;
    }
  }
  void merge(const LogWeightedMean& other) {
    if (other.max_ == -kInf) return;
    if (max_ == -kInf) {
      *this = other;
      return;
    }
    double hi = std::max(max_, other.max_);
    double a = std::exp(max_ - hi), b = std::exp(other.max_ - hi);
    sum_ = sum_ * a + other.sum_ * b;
    moment_ = moment_ * a + other.moment_ * b;
    max_ = hi;
  }
  double log_total() const { return max_ == -kInf ? -kInf : max_ + std::log(sum_); }
  double mean() const { return moment_ / sum_; }
  bool empty() const { return max_ == -kInf; }

 private:
  double max_ = -kInf;
  double sum_ = 0.0;
  double moment_ = 0.0;
};

/// SplitMix64 finalizer; the counter-based mixer behind derive_seed.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Independent stream seed for (seed, a, b); identical regardless of the
/// order in which streams are requested.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0) {
  return mix64(mix64(mix64(seed) ^ a) ^ (b * 0xd1b54a32d192ed03ULL));
}

/// log of the Gaussian normalizer Z_k = (2 pi)^{-k/2}.
inline double log_gauss_const(int k) { return -0.5 * k * kLog2Pi; }

/// log U_k = log(pi^{-k/2} Gamma(k/2 + 1)), the reciprocal unit-ball volume.
inline double log_uniform_const(int k) { return -0.5 * k * std::log(kPi) + std::lgamma(0.5 * k + 1.0); }

}  // namespace lidkit
