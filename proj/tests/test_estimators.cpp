#include "lidkit/estimators.hpp"

#include <gtest/gtest.h>

using namespace lidkit;

namespace {

Point vec(std::initializer_list<double> v) {
  Point p(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) p[i++] = x;
  return p;
}

const ScheduleSpec kVe = ScheduleSpec::ve(1e-4, 50.0);
const ScheduleSpec kVp = ScheduleSpec::vp(0.1, 20.0);

DensitySpec circle() { return DensitySpec::uniform(ManifoldSpec::unit_circle()); }

DensitySpec plane_gaussian(int d, int D) {
  return DensitySpec::gaussian_on_affine(ManifoldSpec::coordinate_subspace(d, D), Eigen::VectorXd::Zero(d),
                                         Eigen::MatrixXd::Identity(d, d));
}

DensitySpec four_atoms() {
  return DensitySpec::empirical(Points{vec({0.0, 0.0}), vec({1.0, 0.0}), vec({0.3, 1.2}), vec({-0.8, 0.5})});
}

}  // namespace

TEST(Nu, PointMassGivesMinusD) {
  const auto f = ScoreField::mixture(DensitySpec::empirical(Points{Point::Zero(3)}), kVe);
  for (double delta : {-8.0, -3.0, 1.0}) EXPECT_NEAR(nu(f, kVe, Point::Zero(3), delta).value, -3.0, 1e-10);
}

TEST(Nu, PlaneGaussian) {
  const auto f = ScoreField::affine_gaussian(plane_gaussian(2, 3), kVe);
  const double e2 = std::exp(-6.0);
  EXPECT_NEAR(nu(f, kVe, Point::Zero(3), -3.0).value, -1.0 - 2.0 * e2 / (1.0 + e2), 1e-10);
}

TEST(Nu, AtomOfFourAtomMixture) {
  const auto f = ScoreField::mixture(four_atoms(), kVe);
  EXPECT_NEAR(nu(f, kVe, vec({0.3, 1.2}), -6.0).value, -2.0, 1e-3);
}

TEST(Nu, OutOfRangeDelta) {
  const auto f = ScoreField::mixture(four_atoms(), kVe);
  EXPECT_THROW(nu(f, kVe, vec({0.0, 0.0}), -20.0), DomainError);
  EXPECT_THROW(nu(f, kVe, vec({0.0, 0.0, 0.0}), -2.0), DomainError);
}

TEST(Flipd, PointMassIsZero) {
  const auto f = ScoreField::mixture(DensitySpec::empirical(Points{vec({1.0, -1.0})}), kVp);
  const auto e = flipd(f, kVp, vec({1.0, -1.0}), -4.0);
  EXPECT_NEAR(e.value, 0.0, 1e-10);
  EXPECT_EQ(e.estimator, "flipd");
  EXPECT_EQ(e.delta_used, -4.0);
  EXPECT_FALSE(e.diagnostics.std_error.has_value());
}

TEST(Flipd, PlaneGaussianClosedForm) {
  for (const auto& sched : {kVe, kVp}) {
    const auto f = ScoreField::affine_gaussian(plane_gaussian(2, 3), sched);
    const double e2 = std::exp(-6.0);
    EXPECT_NEAR(flipd(f, sched, Point::Zero(3), -3.0).value, 2.0 - 2.0 * e2 / (1.0 + e2), 1e-10);
    EXPECT_NEAR(flipd(f, sched, Point::Zero(3), -3.0).value, 1.99505, 1e-5);
  }
}

TEST(Flipd, CircleThroughNumericScore) {
  const ConvolutionOracle oracle(circle());
  for (const auto& sched : {kVe, kVp}) {
    const auto f = convolution_score_field(oracle, sched);
    EXPECT_FALSE(f.is_analytic());
    for (const Point& x : {vec({1.0, 0.0}), vec({-0.6, 0.8})})
      EXPECT_NEAR(flipd(f, sched, x, -6.0, TraceMode::finite_difference()).value, 1.0, 5e-3);
  }
}

TEST(Flipd, HutchinsonReportsStandardError) {
  const auto f = ScoreField::mixture(four_atoms(), kVe);
  const Point x = vec({0.5, 0.5});
  const double exact = flipd(f, kVe, x, -1.0).value;
  const auto h = flipd(f, kVe, x, -1.0, TraceMode::hutchinson(20000, 3, ProbeDist::Gaussian));
  ASSERT_TRUE(h.diagnostics.std_error.has_value());
  EXPECT_GT(*h.diagnostics.std_error, 0.0);
  EXPECT_NEAR(h.value, exact, 3.0 * *h.diagnostics.std_error);
}

TEST(Flipd, NotClampedOrRounded) {
  // A perturbed score can push the estimate below zero; it is reported as is.
  const auto base = ScoreField::mixture(DensitySpec::empirical(Points{Point::Zero(2)}), kVe);
  const auto bad = ScoreField::callable([base](const Point& y, double t) { return Point(1.2 * score(base, y, t)); }, 2);
  const auto e = flipd(bad, kVe, Point::Zero(2), -5.0, TraceMode::finite_difference());
  EXPECT_LT(e.value, 0.0);
  EXPECT_NEAR(e.value, 2.0 - 2.4, 1e-6);
  EXPECT_EQ(round_estimate(e).value, 0.0);
  LidEstimate near_one;
  near_one.value = 0.97;
  EXPECT_EQ(round_estimate(near_one).value, 1.0);
}

TEST(Flipd, GridMeanIsFlaggedNonCanonical) {
  const auto f = ScoreField::affine_gaussian(plane_gaussian(1, 2), kVe);
  const auto e = flipd_grid_mean(f, kVe, Point::Zero(2), {-6.0, -5.0, -4.0});
  EXPECT_TRUE(e.non_canonical);
  const double expect = (flipd(f, kVe, Point::Zero(2), -6.0).value + flipd(f, kVe, Point::Zero(2), -5.0).value +
                         flipd(f, kVe, Point::Zero(2), -4.0).value) / 3.0;
  EXPECT_NEAR(e.value, expect, 1e-14);
  EXPECT_THROW(flipd_grid_mean(f, kVe, Point::Zero(2), {}), DomainError);
}

// nu equals d/d delta log rho_N for analytic fields across delta in [-8, 0].
TEST(Flipd, MatchesConvolutionSlope) {
  for (const auto& sched : {kVe, kVp}) {
    const auto dens = four_atoms();
    const auto f = ScoreField::mixture(dens, sched);
    const ConvolutionOracle oracle(dens);
    const auto g = plane_gaussian(2, 4);
    const auto fg = ScoreField::affine_gaussian(g, sched);
    const ConvolutionOracle og(g);
    for (int k = 0; k <= 32; ++k) {
      const double delta = -8.0 + 0.25 * k;
      const Point x = vec({0.3, 1.2}) + vec({0.4, -0.3}) * std::exp(delta);
      EXPECT_NEAR(nu(f, sched, x, delta).value, dlogrho_ddelta_gauss(oracle, x, delta), 1e-6);
      const Point y = vec({0.1, 0.2, 0.3, -0.1});
      EXPECT_NEAR(nu(fg, sched, y, delta).value, dlogrho_ddelta_gauss(og, y, delta), 1e-6);
    }
  }
}

TEST(Flipd, ScheduleIndependence) {
  const auto dens = four_atoms();
  const auto ve = ScoreField::mixture(dens, kVe), vp = ScoreField::mixture(dens, kVp);
  const auto g = plane_gaussian(1, 3);
  const auto gve = ScoreField::affine_gaussian(g, kVe), gvp = ScoreField::affine_gaussian(g, kVp);
  for (double delta : {-7.0, -5.0, -3.0, -1.0}) {
    const Point x = vec({0.2, 0.9});
    EXPECT_NEAR(flipd(ve, kVe, x, delta).value, flipd(vp, kVp, x, delta).value, 1e-6);
    EXPECT_NEAR(flipd(gve, kVe, vec({0.5, 0.1, 0.0}), delta).value, flipd(gvp, kVp, vec({0.5, 0.1, 0.0}), delta).value,
                1e-6);
  }
}

TEST(Flipd, MonotoneConvergenceOverCatalog) {
  struct Case {
    std::string name;
    ScoreField field;
    Point x;
    int lid;
    TraceMode mode;
  };
  const ConvolutionOracle circle_oracle(circle());
  const auto union_dens = DensitySpec::mixture(
      {circle(), DensitySpec::empirical(Points{vec({5.0, 0.0})}), DensitySpec::empirical(Points{vec({-5.0, 0.0})})},
      {0.5, 0.25, 0.25}, 4.0);
  const ConvolutionOracle union_oracle(union_dens);
  std::vector<Case> cases = {
      {"point mass", ScoreField::mixture(DensitySpec::empirical(Points{Point::Zero(2)}), kVe), Point::Zero(2), 0,
       TraceMode::exact()},
      {"atoms", ScoreField::mixture(four_atoms(), kVe), vec({1.0, 0.0}), 0, TraceMode::exact()},
      {"line", ScoreField::affine_gaussian(plane_gaussian(1, 2), kVe), vec({0.3, 0.0}), 1, TraceMode::exact()},
      {"plane", ScoreField::affine_gaussian(plane_gaussian(2, 3), kVe), Point::Zero(3), 2, TraceMode::exact()},
      {"circle", convolution_score_field(circle_oracle, kVe), vec({0.0, 1.0}), 1, TraceMode::finite_difference()},
      {"union circle", convolution_score_field(union_oracle, kVe), vec({1.0, 0.0}), 1, TraceMode::finite_difference()},
  };
  for (const auto& c : cases) {
    double prev = kInf;
    for (double delta : {-2.0, -4.0, -6.0, -8.0}) {
      const double gap = std::abs(flipd(c.field, kVe, c.x, delta, c.mode).value - c.lid);
      EXPECT_LE(gap, prev + 1e-9) << c.name << " at " << delta;
      prev = gap;
    }
  }
  // Sphere: ball-probability slope with exact caps.
  const auto sphere = BallOracle::exact(DensitySpec::uniform(ManifoldSpec::sphere(1.0, 2, 3)));
  double prev = kInf;
  for (double delta : {-0.5, -2.0, -4.0, -6.0}) {
    const double gap = std::abs(uniform_slope(sphere, vec({0.0, 1.0, 0.0}), delta).value - 2.0);
    EXPECT_LE(gap, prev + 1e-12);
    prev = gap;
  }
}

TEST(UniformSlope, CircleAndPointMass) {
  const auto c = BallOracle::exact(circle());
  const auto e = uniform_slope(c, vec({1.0, 0.0}), -8.0);
  EXPECT_NEAR(e.value, 1.0, 1e-3);
  EXPECT_EQ(e.estimator, "uniform_slope");
  EXPECT_FALSE(e.diagnostics.std_error.has_value());
  const auto p = BallOracle::exact(DensitySpec::empirical(Points{vec({0.0, 0.0, 0.0})}));
  EXPECT_EQ(uniform_slope(p, vec({0.0, 0.0, 0.0}), -3.0).value, 0.0);
}

TEST(UniformSlope, SphereLocalMonteCarlo) {
  const auto dens = DensitySpec::uniform(ManifoldSpec::sphere(1.0, 2, 3));
  const Point x = vec({0.0, 0.0, 1.0});
  const auto oracle = BallOracle::local_monte_carlo(dens, x, 2.0 * std::exp(-5.0), 1000000, 2);
  const auto e = uniform_slope(oracle, x, -5.0);
  ASSERT_TRUE(e.diagnostics.std_error.has_value());
  EXPECT_NEAR(e.value, 2.0, 0.1);
}

TEST(UniformSlope, UnionIsLocal) {
  const auto dens = DensitySpec::mixture(
      {circle(), DensitySpec::empirical(Points{vec({5.0, 0.0})}), DensitySpec::empirical(Points{vec({-5.0, 0.0})})},
      {0.5, 0.25, 0.25}, 4.0);
  const auto o = BallOracle::exact(dens);
  EXPECT_NEAR(uniform_slope(o, vec({1.0, 0.0}), -8.0).value, 1.0, 1e-3);
  EXPECT_EQ(uniform_slope(o, vec({5.0, 0.0}), 1.0).value, 0.0);
  EXPECT_EQ(uniform_slope(o, vec({-5.0, 0.0}), -4.0).value, 0.0);
}

TEST(LeastSquares, NormalEquationsHold) {
  Rng rng(2);
  std::normal_distribution<double> z;
  std::vector<double> xs, ys;
  for (int i = 0; i < 50; ++i) {
    xs.push_back(-8.0 + 0.1 * i);
    ys.push_back(1.7 * xs.back() - 0.4 + z(rng));
  }
  const auto fit = least_squares(xs, ys);
  EXPECT_LT(fit.normal_equation_residual, 1e-10);
  // Independent solve of the 2x2 normal equations.
  Eigen::MatrixXd X(50, 2);
  Eigen::VectorXd y(50);
  for (int i = 0; i < 50; ++i) {
    X(i, 0) = 1.0;
    X(i, 1) = xs[i];
    y[i] = ys[i];
  }
  const Eigen::Vector2d beta = (X.transpose() * X).ldlt().solve(X.transpose() * y);
  EXPECT_NEAR(fit.intercept, beta[0], 1e-10);
  EXPECT_NEAR(fit.slope, beta[1], 1e-10);
  EXPECT_THROW(least_squares({1.0, 1.0}, {2.0, 3.0}), DomainError);
  EXPECT_THROW(least_squares({1.0}, {2.0}), DomainError);
}

TEST(Lidl, ExactLine) {
  std::vector<std::pair<double, double>> pts;
  for (double d : {-4.0, -3.0, -2.0}) pts.emplace_back(d, -2.0 * d + 3.0);
  const auto r = lidl_regress(pts, 3);
  EXPECT_NEAR(r.fit.slope, -2.0, 1e-12);
  EXPECT_NEAR(r.estimate.value, 1.0, 1e-12);
  EXPECT_LT(r.fit.residual_rms, 1e-12);
}

TEST(Lidl, PointMassIsExactlyZero) {
  const ConvolutionOracle o(DensitySpec::empirical(Points{Point::Zero(3)}));
  std::vector<std::pair<double, double>> pts;
  for (double d : {-6.0, -5.0, -4.0}) pts.emplace_back(d, log_rho_gauss(o, Point::Zero(3), d));
  EXPECT_NEAR(lidl_regress(pts, 3).estimate.value, 0.0, 1e-12);
}

TEST(Lidl, CircleQuadrature) {
  const ConvolutionOracle o(circle());
  std::vector<std::pair<double, double>> pts;
  for (double d : {-7.0, -6.0, -5.0, -4.0}) pts.emplace_back(d, log_rho_gauss(o, vec({0.0, -1.0}), d));
  EXPECT_NEAR(lidl_regress(pts, 2).estimate.value, 1.0, 0.05);
  EXPECT_THROW(lidl_regress({{-3.0, 1.0}, {-3.0, 2.0}}, 2), DomainError);
}

TEST(BallCount, CircleSamples) {
  const auto samples = sample(circle(), 100000, 9);
  std::vector<double> grid;
  for (int k = 0; k <= 6; ++k) grid.push_back(-3.5 + 0.25 * k);
  const auto r = ball_count_regress(samples, vec({1.0, 0.0}), grid);
  EXPECT_NEAR(r.estimate.value, 1.0, 0.15);
  EXPECT_TRUE(r.trimmed.empty());
  // Expected counts from the arcsin oracle land on the same slope.
  std::vector<double> ys;
  for (double d : grid) ys.push_back(std::log(2.0 * std::asin(std::exp(d) / 2.0) / kPi));
  EXPECT_NEAR(least_squares(grid, ys).slope, 1.0, 0.01);
}

TEST(BallCount, AllSamplesAtX) {
  const Points samples(500, vec({2.0, 1.0}));
  const auto r = ball_count_regress(samples, vec({2.0, 1.0}), {-3.0, -2.0, -1.0});
  EXPECT_EQ(r.estimate.value, 0.0);
}

TEST(BallCount, TrimsSparseBallsAndReportsThem) {
  const auto samples = sample(circle(), 2000, 4);
  const auto r = ball_count_regress(samples, vec({1.0, 0.0}), {-8.0, -2.0, -1.5, -1.0});
  ASSERT_EQ(r.trimmed.size(), 1u);
  EXPECT_EQ(r.trimmed.front(), -8.0);
  EXPECT_EQ(r.fit.grid.size(), 3u);
  EXPECT_THROW(ball_count_regress(samples, vec({1.0, 0.0}), {-9.0, -8.0, -1.0}), DomainError);
}

TEST(BallCount, SwissRollInterior) {
  const auto dens = DensitySpec::uniform(ManifoldSpec::swiss_roll());
  const auto samples = sample(dens, 100000, 77);
  std::vector<double> grid;
  for (int k = 0; k < 6; ++k) grid.push_back(-1.0 + 0.25 * k);
  Rng rng(5);
  std::uniform_real_distribution<double> ut(2.0 * kPi, 4.0 * kPi), uh(2.0, 8.0);
  std::vector<double> values;
  for (int i = 0; i < 20; ++i) {
    const double t = ut(rng), h = uh(rng);
    values.push_back(ball_count_regress(samples, vec({t * std::cos(t), t * std::sin(t), h}), grid).estimate.value);
  }
  std::nth_element(values.begin(), values.begin() + 10, values.end());
  EXPECT_NEAR(values[10], 2.0, 0.3);
}
