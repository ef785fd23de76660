#include "lidkit/convolve.hpp"

#include <gtest/gtest.h>

using namespace lidkit;

namespace {

Point vec(std::initializer_list<double> v) {
  Point p(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) p[i++] = x;
  return p;
}

DensitySpec circle() { return DensitySpec::uniform(ManifoldSpec::unit_circle()); }

DensitySpec plane_gaussian(int d, int D) {
  return DensitySpec::gaussian_on_affine(ManifoldSpec::coordinate_subspace(d, D), Eigen::VectorXd::Zero(d),
                                         Eigen::MatrixXd::Identity(d, d));
}

DensitySpec circle_and_atom() {
  return DensitySpec::mixture({circle(), DensitySpec::empirical(Points{vec({5.0, 0.0})})}, {0.5, 0.5}, 4.0);
}

/// Plain trapezoid over the circle angle with unnormalized k-dim kernel,
/// returning log of int p N_k and the weighted mean of scaled squared distance.
std::pair<double, double> circle_reference(const Point& x, double delta, int k, int nodes) {
  long double s = 0.0L, m = 0.0L;
  const double inv_var = std::exp(-2.0 * delta);
  for (int i = 0; i < nodes; ++i) {
    const double th = 2.0 * kPi * i / nodes;
    const double sq = (std::pow(x[0] - std::cos(th), 2) + std::pow(x[1] - std::sin(th), 2)) * inv_var;
    const long double w = std::exp(-0.5L * sq);
    s += w;
    m += w * sq;
  }
  const double log_int = std::log(static_cast<double>(s / nodes)) - 0.5 * k * std::log(2.0 * kPi) - k * delta;
  return {log_int, static_cast<double>(m / s)};
}

}  // namespace

TEST(LogRhoGauss, PointMass) {
  for (int D : {1, 2, 5}) {
    const ConvolutionOracle o(DensitySpec::empirical(Points{Point::Zero(D)}));
    for (double delta : {-8.0, -1.0, 2.0})
      EXPECT_NEAR(log_rho_gauss(o, Point::Zero(D), delta), -0.5 * D * std::log(2.0 * kPi) - D * delta, 1e-12);
  }
}

TEST(LogRhoGauss, GaussianOnAffine) {
  for (auto [d, D] : {std::pair{1, 2}, std::pair{2, 3}, std::pair{2, 5}}) {
    const ConvolutionOracle o(plane_gaussian(d, D));
    for (double delta : {-6.0, -3.0, 0.0, 1.0}) {
      const double e2 = std::exp(2.0 * delta);
      const double expect = -0.5 * d * std::log(2.0 * kPi * (1.0 + e2)) - 0.5 * (D - d) * std::log(2.0 * kPi * e2);
      EXPECT_NEAR(log_rho_gauss(o, Point::Zero(D), delta), expect, 1e-12);
    }
  }
}

TEST(LogRhoGauss, CircleQuadratureMatchesFineTrapezoid) {
  const ConvolutionOracle o(circle());
  EXPECT_EQ(o.method(), Method::Quadrature);
  const Point x = vec({1.0, 0.0});
  const auto ref = circle_reference(x, -2.0, 2, 1000000);
  EXPECT_NEAR(log_rho_gauss(o, x, -2.0), ref.first, 1e-8);
  const Point off = vec({0.3, -1.4});
  EXPECT_NEAR(log_rho_gauss(o, off, -1.0), circle_reference(off, -1.0, 2, 1000000).first, 1e-8);
}

TEST(LogRhoGauss, ClosedFormAndQuadratureAgreeOnALine) {
  const auto dens = DensitySpec::gaussian_on_affine(ManifoldSpec::coordinate_subspace(1, 3), vec({0.4}),
                                                    Eigen::MatrixXd::Constant(1, 1, 1.7));
  OracleOptions q;
  q.method = Method::Quadrature;
  const ConvolutionOracle closed(dens), quad(dens, q);
  for (const Point& x : {vec({0.0, 0.0, 0.0}), vec({1.3, 0.2, -0.1}), vec({-2.0, 0.0, 0.5})})
    for (double delta : {-5.0, -2.0, 0.0}) {
      EXPECT_NEAR(log_rho_gauss(closed, x, delta), log_rho_gauss(quad, x, delta), 1e-8);
      EXPECT_NEAR(dlogrho_ddelta_gauss(closed, x, delta), dlogrho_ddelta_gauss(quad, x, delta), 1e-8);
    }
}

TEST(LogRhoGauss, MonteCarloWithinThreeStandardErrors) {
  const auto dens = plane_gaussian(2, 3);
  OracleOptions mc;
  mc.method = Method::MonteCarlo;
  mc.mc_samples = 200000;
  mc.seed = 4;
  const ConvolutionOracle closed(dens), sampled(dens, mc);
  for (double delta : {-0.5, 0.0, 0.5}) {
    const Point x = vec({0.3, -0.2, 0.1});
    const auto a = kernel_integral(closed, x, delta, 3), b = kernel_integral(sampled, x, delta, 3);
    EXPECT_GT(b.log_value_se, 0.0);
    EXPECT_NEAR(b.log_value, a.log_value, 3.0 * b.log_value_se);
    EXPECT_NEAR(b.scaled_sq, a.scaled_sq, 3.0 * b.scaled_sq_se);
  }
}

TEST(LogRhoGauss, MonteCarloRefusesSingleDominantSample) {
  OracleOptions mc;
  mc.method = Method::MonteCarlo;
  mc.mc_samples = 100;
  mc.seed = 2;
  const ConvolutionOracle o(plane_gaussian(2, 3), mc);
  const Point x = vec({0.3, -0.2, 0.1});
  EXPECT_NO_THROW(kernel_integral(o, x, 0.0, 3));
  try {
    kernel_integral(o, x, -12.0, 3);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("effective sample size"), std::string::npos);
  }
}

// rho_N integrates to one: importance sampling from a wide Gaussian.
TEST(LogRhoGauss, IsANormalizedDensity) {
  const ConvolutionOracle o(circle());
  Rng rng(31);
  std::normal_distribution<double> z;
  const double s = 1.5, delta = -1.0;
  const int n = 40000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const Point y = vec({s * z(rng), s * z(rng)});
    const double log_q = -std::log(2.0 * kPi * s * s) - 0.5 * y.squaredNorm() / (s * s);
    const double w = std::exp(log_rho_gauss(o, y, delta) - log_q);
    sum += w;
    sum2 += w * w;
  }
  const double mean = sum / n, se = std::sqrt((sum2 / n - mean * mean) / n);
  EXPECT_NEAR(mean, 1.0, 3.0 * se);
}

TEST(LogRhoGauss, RefusesTinyNodeCounts) {
  OracleOptions o;
  o.min_nodes = 8;
  EXPECT_THROW(ConvolutionOracle(circle(), o), DomainError);
  o.min_nodes = 16;
  EXPECT_NO_THROW(ConvolutionOracle(circle(), o));
  OracleOptions q;
  q.method = Method::Quadrature;
  EXPECT_THROW(ConvolutionOracle(DensitySpec::uniform(ManifoldSpec::sphere(1.0, 2, 3)), q), UnsupportedError);
}

TEST(DlogrhoGauss, PointMassSlopeIsMinusD) {
  const ConvolutionOracle o(DensitySpec::empirical(Points{Point::Zero(4)}));
  for (double delta : {-9.0, 0.0, 3.0}) EXPECT_NEAR(dlogrho_ddelta_gauss(o, Point::Zero(4), delta), -4.0, 1e-12);
}

TEST(DlogrhoGauss, PlaneGaussian) {
  const ConvolutionOracle o(plane_gaussian(2, 3));
  const double delta = -3.0, e2 = std::exp(2.0 * delta);
  EXPECT_NEAR(dlogrho_ddelta_gauss(o, Point::Zero(3), delta), -1.0 - 2.0 * e2 / (1.0 + e2), 1e-12);
  EXPECT_NEAR(dlogrho_ddelta_gauss(o, Point::Zero(3), delta), -1.0049453, 1e-7);
  // Central difference of the log density.
  const double h = 1e-4;
  const double fd = (log_rho_gauss(o, vec({0.2, 0.1, 0.05}), delta + h) -
                     log_rho_gauss(o, vec({0.2, 0.1, 0.05}), delta - h)) / (2 * h);
  EXPECT_NEAR(dlogrho_ddelta_gauss(o, vec({0.2, 0.1, 0.05}), delta), fd, 1e-6);
}

TEST(DlogrhoGauss, CircleQuadrature) {
  const ConvolutionOracle o(circle());
  const Point x = vec({0.6, 0.8});
  EXPECT_NEAR(dlogrho_ddelta_gauss(o, x, -6.0), -1.0, 1e-3);
  const auto ref = circle_reference(x, -3.0, 2, 1000000);
  EXPECT_NEAR(dlogrho_ddelta_gauss(o, x, -3.0), -2.0 + ref.second, 1e-8);
}

TEST(DlogrhoGauss, MonotoneConvergenceOnCircle) {
  const ConvolutionOracle o(circle());
  double prev = kInf;
  for (double delta : {-2.0, -4.0, -6.0, -8.0}) {
    const double gap = std::abs(dlogrho_ddelta_gauss(o, vec({1.0, 0.0}), delta) + 1.0);
    EXPECT_LT(gap, prev) << delta;
    prev = gap;
  }
}

TEST(ScalingIdentity, GaussianKernel) {
  const Point x = vec({1.0, 0.0});
  const ConvolutionOracle o(circle());
  for (double delta : {-6.0, -3.0, -1.0}) {
    const double lhs = log_rho_gauss(o, x, delta);
    const double aux = kernel_integral(o, x, delta, 1).log_value;
    EXPECT_NEAR(lhs, -0.5 * std::log(2.0 * kPi) - delta + aux, 1e-10);
    EXPECT_NEAR(aux, circle_reference(x, delta, 1, 400000).first, 1e-9);
  }
  const ConvolutionOracle g(plane_gaussian(2, 4));
  const Point y = vec({0.5, -0.5, 0.0, 0.0});
  for (double delta : {-4.0, 0.0})
    EXPECT_NEAR(log_rho_gauss(g, y, delta), -std::log(2.0 * kPi) - 2.0 * delta + kernel_integral(g, y, delta, 2).log_value,
                1e-10);
}

TEST(ScalingIdentity, UniformKernel) {
  const auto oracle = BallOracle::exact(circle());
  const Point x = vec({0.0, 1.0});
  for (double delta : {-5.0, -2.0, 0.0}) {
    const double lhs = log_rho_uniform(oracle, x, delta);
    const double rhs = log_uniform_const(2) - log_uniform_const(1) - delta + log_uniform_aux_integral(oracle, x, delta);
    EXPECT_NEAR(lhs, rhs, 1e-10);
  }
}

TEST(Props, CircleLimits) {
  const ConvolutionOracle o(circle());
  const Point x = vec({1.0, 0.0});
  EXPECT_NEAR(prop1_integral(o, x, -8.0), 1.0 / (2.0 * kPi), 1e-4);
  EXPECT_NEAR(prop2_integral(o, x, -8.0), 1.0 / (2.0 * kPi), 1e-3);
}

TEST(Props, GaussianRatioIsIntrinsicDimension) {
  for (int d : {1, 2, 3}) {
    const ConvolutionOracle o(plane_gaussian(d, d + 2));
    const Point x = Point::Zero(d + 2);
    const double ratio = prop2_integral(o, x, -20.0) / prop1_integral(o, x, -20.0);
    EXPECT_NEAR(ratio, d, 1e-12);
    EXPECT_NEAR(prop1_integral(o, x, -20.0), std::pow(2.0 * kPi, -0.5 * d), 1e-12);
  }
}

TEST(Props, RefuseMonteCarlo) {
  OracleOptions mc;
  mc.method = Method::MonteCarlo;
  mc.mc_samples = 100;
  const ConvolutionOracle o(circle(), mc);
  EXPECT_THROW(prop1_integral(o, vec({1, 0}), -3.0), UnsupportedError);
}

// Off-component Gaussian mass stays below Z_D e^{-D delta} exp(-xi^2 e^{-2 delta} / 2).
TEST(Leakage, BoundHoldsBelowThreshold) {
  const ConvolutionOracle o(circle_and_atom());
  const double xi = 4.0;
  const int D = 2;
  const double threshold = std::min(0.5 * std::log(xi / 2.0), std::log(xi) - 0.5 * std::log(D + 2.0));
  for (const Point& x : {vec({1.0, 0.0}), vec({0.0, 1.0}), vec({-1.0, 0.0})})
    for (double delta : {-4.0, -2.0, -1.0, 0.0, threshold - 1e-3}) {
      const auto parts = component_kernel_integrals(o, x, delta, D);
      const double log_bound = log_gauss_const(D) - D * delta - 0.5 * xi * xi * std::exp(-2.0 * delta);
      EXPECT_LE(parts[1].log_value, log_bound + 1e-12) << delta;
    }
}

TEST(Leakage, UniformBallsStayLocal) {
  const auto oracle = BallOracle::exact(circle_and_atom());
  for (double delta : {-5.0, -1.0, std::log(4.0) - 1e-9}) {
    const auto p = ball_probability(oracle, vec({1.0, 0.0}), delta);
    EXPECT_EQ(p.components[1], 0.0);
  }
  const auto reach = ball_probability(oracle, vec({1.0, 0.0}), std::log(4.0) + 1e-6);
  EXPECT_GT(reach.components[1], 0.0);
}

TEST(BallProbability, CircleArcRatio) {
  const auto oracle = BallOracle::exact(circle());
  const Point x = vec({std::cos(0.3), std::sin(0.3)});
  EXPECT_NEAR(ball_probability(oracle, x, std::log(2.0)).value, 1.0, 1e-12);
  EXPECT_NEAR(ball_probability(oracle, x, std::log(3.0)).value, 1.0, 1e-12);
  for (double r : {0.01, 0.5, 1.0, 1.9})
    EXPECT_NEAR(ball_probability(oracle, x, std::log(r)).value, 2.0 * std::asin(r / 2.0) / kPi, 1e-12);
}

TEST(BallProbability, PointMassIsOne) {
  const auto oracle = BallOracle::exact(DensitySpec::empirical(Points{vec({2.0, 2.0, 2.0})}));
  for (double delta : {-10.0, 0.0}) EXPECT_EQ(ball_probability(oracle, vec({2.0, 2.0, 2.0}), delta).value, 1.0);
}

TEST(BallProbability, MonteCarloMatchesSphereCap) {
  const auto dens = DensitySpec::uniform(ManifoldSpec::sphere(1.0, 2, 3));
  const auto mc = BallOracle::monte_carlo(dens, 200000, 12);
  const auto ex = BallOracle::exact(dens);
  const Point x = vec({0.0, 0.0, 1.0});
  for (double r : {0.2, 0.7, 1.5}) {
    const auto p = ball_probability(mc, x, std::log(r));
    EXPECT_NEAR(ball_probability(ex, x, std::log(r)).value, r * r / 4.0, 1e-12);
    EXPECT_NEAR(p.value, r * r / 4.0, 3.0 * p.std_error);
    EXPECT_LE(p.lo, r * r / 4.0 + 1e-3);
    EXPECT_GE(p.hi, r * r / 4.0 - 1e-3);
  }
  const auto none = ball_probability(mc, x, -12.0);
  EXPECT_TRUE(none.no_hits);
  EXPECT_EQ(none.value, 0.0);
}

TEST(BallProbability, LocalMonteCarloMatchesSphereCap) {
  const auto dens = DensitySpec::uniform(ManifoldSpec::sphere(1.0, 2, 3));
  const Point x = vec({0.0, 0.0, 1.0});
  const auto local = BallOracle::local_monte_carlo(dens, x, 0.05, 200000, 3);
  for (double r : {0.005, 0.02, 0.04}) {
    const auto p = ball_probability(local, x, std::log(r));
    EXPECT_NEAR(p.value, r * r / 4.0, 3.0 * p.std_error + 1e-15);
  }
  EXPECT_THROW(ball_probability(local, x, std::log(0.1)), DomainError);
  EXPECT_THROW(ball_probability(local, vec({0.0, 1.0, 0.0}), -4.0), DomainError);
}

TEST(UniformSlope, CircleAnalytic) {
  const auto oracle = BallOracle::exact(circle());
  const Point x = vec({1.0, 0.0});
  const double r = std::exp(-2.0);
  const double expect = r / (2.0 * std::sqrt(1.0 - r * r / 4.0) * std::asin(r / 2.0));
  const auto s = dlogrho_ddelta_uniform(oracle, x, -2.0);
  EXPECT_TRUE(s.analytic);
  EXPECT_NEAR(s.value, expect, 1e-12);
  EXPECT_NEAR(s.value, 1.0015, 1e-4);
  UniformSlopeOptions rho;
  rho.rho_form = true;
  EXPECT_NEAR(dlogrho_ddelta_uniform(oracle, x, -2.0, rho).value, expect - 2.0, 1e-12);
}

TEST(UniformSlope, CircleCentralDifference) {
  const auto oracle = BallOracle::exact(circle());
  UniformSlopeOptions fd;
  fd.analytic = false;
  fd.step = 0.01;
  const auto s = dlogrho_ddelta_uniform(oracle, vec({0.0, -1.0}), -8.0, fd);
  EXPECT_FALSE(s.analytic);
  EXPECT_NEAR(s.value, 1.0, 1e-3);
  fd.step = 0.0;
  EXPECT_THROW(dlogrho_ddelta_uniform(oracle, vec({0.0, -1.0}), -8.0, fd), DomainError);
}

TEST(UniformSlope, PointMass) {
  const auto oracle = BallOracle::exact(DensitySpec::empirical(Points{vec({1.0, 1.0})}));
  EXPECT_EQ(dlogrho_ddelta_uniform(oracle, vec({1.0, 1.0}), -3.0).value, 0.0);
  UniformSlopeOptions rho;
  rho.rho_form = true;
  rho.analytic = false;
  EXPECT_NEAR(dlogrho_ddelta_uniform(oracle, vec({1.0, 1.0}), -3.0, rho).value, -2.0, 1e-12);
}

TEST(UniformSlope, SphereCapSlopeIsTwo) {
  const auto oracle = BallOracle::exact(DensitySpec::uniform(ManifoldSpec::sphere(1.0, 2, 3)));
  EXPECT_NEAR(dlogrho_ddelta_uniform(oracle, vec({1.0, 0.0, 0.0}), -5.0).value, 2.0, 1e-9);
}

TEST(UniformSlope, ZeroProbabilityOnStencilIsAnError) {
  const auto dens = DensitySpec::uniform(ManifoldSpec::sphere(1.0, 2, 3));
  const auto mc = BallOracle::monte_carlo(dens, 1000, 1);
  EXPECT_THROW(dlogrho_ddelta_uniform(mc, vec({0.0, 0.0, 1.0}), -10.0), DomainError);
}
