#include "lidkit/convolve.hpp"
#include "lidkit/score.hpp"

#include <gtest/gtest.h>

using namespace lidkit;

namespace {

Point vec(std::initializer_list<double> v) {
  Point p(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) p[i++] = x;
  return p;
}

const ScheduleSpec kVe = ScheduleSpec::ve(0.01, 50.0);
const ScheduleSpec kVp = ScheduleSpec::vp(0.1, 20.0);

struct Mix {
  Points atoms;
  std::vector<double> weights;
};

Mix random_mixture(int k, int D, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> u(0.5, 2.0);
  Mix m;
  double total = 0.0;
  for (int i = 0; i < k; ++i) {
    Point a(D);
    for (int j = 0; j < D; ++j) a[j] = z(rng);
    m.atoms.push_back(a);
    m.weights.push_back(u(rng));
    total += m.weights.back();
  }
  for (auto& w : m.weights) w /= total;
  return m;
}

/// log sum_i w_i N(y; psi a_i, sigma^2 I), written out directly.
double mixture_log_density(const Mix& m, const ScheduleSpec& s, const Point& y, double t) {
  const double ps = psi(s, t), sg = sigma(s, t);
  const double D = static_cast<double>(y.size());
  std::vector<double> terms;
  for (std::size_t i = 0; i < m.atoms.size(); ++i)
    terms.push_back(std::log(m.weights[i]) - 0.5 * D * std::log(2.0 * kPi * sg * sg) -
                    (y - ps * m.atoms[i]).squaredNorm() / (2.0 * sg * sg));
  return log_sum_exp(terms);
}

Point fd_gradient(const std::function<double(const Point&)>& f, const Point& y, double h) {
  Point g(y.size());
  for (Eigen::Index k = 0; k < y.size(); ++k) {
    Point a = y, b = y;
    a[k] += h;
    b[k] -= h;
    g[k] = (f(a) - f(b)) / (2.0 * h);
  }
  return g;
}

double fd_laplacian(const std::function<double(const Point&)>& f, const Point& y, double h) {
  double acc = 0.0;
  const double f0 = f(y);
  for (Eigen::Index k = 0; k < y.size(); ++k) {
    Point a = y, b = y;
    a[k] += h;
    b[k] -= h;
    acc += (f(a) - 2.0 * f0 + f(b)) / (h * h);
  }
  return acc;
}

}  // namespace

TEST(Score, SinglePointMass) {
  const auto f = ScoreField::mixture(DensitySpec::empirical(Points{Point::Zero(3)}), kVe);
  const Point y = vec({0.3, -1.0, 2.0});
  for (double t : {0.1, 0.5, 0.9}) {
    const double s2 = std::pow(sigma(kVe, t), 2);
    EXPECT_LT((score(f, y, t) + y / s2).norm(), 1e-12 * y.norm() / s2);
  }
}

TEST(Score, SymmetricAtomsCancel) {
  const auto f = ScoreField::mixture(DensitySpec::empirical(Points{vec({1.0, 2.0}), vec({-1.0, -2.0})}), kVp);
  EXPECT_LT(score(f, Point::Zero(2), 0.3).norm(), 1e-15);
}

TEST(Score, UndefinedAtTimeZero) {
  const auto f = ScoreField::mixture(DensitySpec::empirical(Points{Point::Zero(2)}), kVe);
  EXPECT_THROW(score(f, Point::Zero(2), 0.0), DomainError);
}

// Score equals the gradient of the log density: max(1e-6, 1e-4 |s|) per component.
TEST(Score, MatchesFiniteDifferenceGradient) {
  for (const auto& sched : {kVe, kVp}) {
    const auto m = random_mixture(4, 3, 7);
    const auto f = ScoreField::mixture(m.atoms, m.weights, sched);
    Rng rng(3);
    std::normal_distribution<double> z;
    for (int rep = 0; rep < 20; ++rep) {
      const Point y = vec({z(rng), z(rng), z(rng)});
      const double t = 0.2 + 0.03 * rep;
      const Point s = score(f, y, t);
      const Point g = fd_gradient([&](const Point& p) { return mixture_log_density(m, sched, p, t); }, y,
                                  1e-5 * sigma(sched, t));
      for (Eigen::Index k = 0; k < 3; ++k) EXPECT_NEAR(s[k], g[k], std::max(1e-6, 1e-4 * s.norm()));
    }
  }
}

TEST(Score, AffineGaussianMatchesFiniteDifferenceGradient) {
  Eigen::MatrixXd basis(3, 1);
  basis << 0.6, 0.8, 0.0;
  Eigen::MatrixXd cov(1, 1);
  cov << 2.0;
  const auto dens =
      DensitySpec::gaussian_on_affine(ManifoldSpec::affine(basis, vec({0.0, 0.0, 1.0})), vec({0.5}), cov);
  const auto f = ScoreField::affine_gaussian(dens, kVp);
  const double t = 0.4, ps = psi(kVp, t), s2 = std::pow(sigma(kVp, t), 2);
  // Independent oracle: full-covariance Gaussian log density.
  const Eigen::Vector3d mu = ps * (vec({0.0, 0.0, 1.0}) + basis * vec({0.5}));
  const Eigen::Matrix3d C = ps * ps * basis * cov * basis.transpose() + s2 * Eigen::Matrix3d::Identity();
  const Eigen::Matrix3d P = C.inverse();
  const Point y = vec({0.4, -0.3, 0.9});
  const Point expect = -P * (y - mu);
  EXPECT_LT((score(f, y, t) - expect).norm(), 1e-10 * expect.norm());
  EXPECT_NEAR(exact_trace(f, y, t), -P.trace(), 1e-10 * P.trace());
}

TEST(ExactTrace, SinglePointMass) {
  const auto f = ScoreField::mixture(DensitySpec::empirical(Points{Point::Zero(4)}), kVe);
  const double t = 0.37;
  EXPECT_NEAR(exact_trace(f, vec({1.0, 2.0, 3.0, 4.0}), t), -4.0 / std::pow(sigma(kVe, t), 2), 1e-9);
}

TEST(ExactTrace, TwoAtomsOnALine) {
  const auto f = ScoreField::mixture(DensitySpec::empirical(Points{vec({1.0}), vec({-1.0})}), kVp);
  const double t = 0.25, ps = psi(kVp, t), s2 = std::pow(sigma(kVp, t), 2);
  EXPECT_NEAR(exact_trace(f, vec({0.0}), t), -1.0 / s2 + ps * ps / (s2 * s2), 1e-10);
}

TEST(ExactTrace, MatchesLaplacianOfLogDensity) {
  for (const auto& sched : {kVe, kVp}) {
    const auto m = random_mixture(5, 3, 21);
    const auto f = ScoreField::mixture(m.atoms, m.weights, sched);
    for (double t : {0.3, 0.6}) {
      const Point y = vec({0.2, -0.4, 0.7});
      const double ex = exact_trace(f, y, t);
      const double lap = fd_laplacian([&](const Point& p) { return mixture_log_density(m, sched, p, t); }, y,
                                      1e-3 * sigma(sched, t));
      EXPECT_NEAR(ex, lap, 1e-4 * std::abs(ex));
      const auto fd = fd_trace(f, y, t, 1e-4 * sigma(sched, t));
      EXPECT_NEAR(fd.value, ex, 1e-4 * std::abs(ex));
      EXPECT_FALSE(fd.unstable_step);
    }
  }
}

TEST(ExactTrace, RefusesNumericFields) {
  const auto f = ScoreField::callable([](const Point& y, double) { return Point(-y); }, 2);
  EXPECT_THROW(exact_trace(f, Point::Zero(2), 0.5), UnsupportedError);
}

// Jensen: sum r |psi a - y|^2 >= |sum r (psi a - y)|^2 at every point.
TEST(ExactTrace, VarianceTermIsNonnegative) {
  const auto m = random_mixture(6, 2, 5);
  const auto f = ScoreField::mixture(m.atoms, m.weights, kVe);
  const auto& src = std::get<MixtureAnalytic>(f.source());
  Rng rng(8);
  std::normal_distribution<double> z;
  for (int rep = 0; rep < 200; ++rep) {
    const Point y = vec({2.0 * z(rng), 2.0 * z(rng)});
    const double t = 0.05 + 0.004 * rep;
    const auto mm = detail::mixture_moments(src, y, t);
    EXPECT_GE(mm.mean_sq + 1e-12 * mm.mean_sq, mm.mean_diff.squaredNorm());
    EXPECT_GE(exact_trace(f, y, t), -2.0 / std::pow(sigma(kVe, t), 2) * (1.0 + 1e-12));
  }
}

TEST(Hutchinson, ConstantDiagonalJacobian) {
  const auto f = ScoreField::callable(
      [](const Point& y, double) {
        return Point(vec({1.0, 2.0, 3.0}).cwiseProduct(y));
      },
      3);
  const auto est = hutchinson_trace(f, vec({0.1, 0.2, 0.3}), 0.5, 10000, 1);
  EXPECT_NEAR(est.value, 6.0, std::max(3.0 * est.std_error, 1e-9));
  // Rademacher probes see a diagonal Jacobian exactly.
  EXPECT_NEAR(est.value, 6.0, 1e-8);
  const auto g = hutchinson_trace(f, vec({0.1, 0.2, 0.3}), 0.5, 10000, 1, ProbeDist::Gaussian);
  EXPECT_GT(g.std_error, 0.0);
  EXPECT_NEAR(g.value, 6.0, 3.0 * g.std_error);
}

TEST(Hutchinson, SingleProbeOnIsotropicScore) {
  const auto f = ScoreField::mixture(DensitySpec::empirical(Points{Point::Zero(5)}), kVe);
  const double t = 0.3;
  const auto est = hutchinson_trace(f, vec({0.5, 0.1, -0.2, 0.0, 1.0}), t, 1, 99);
  EXPECT_NEAR(est.value, -5.0 / std::pow(sigma(kVe, t), 2), 1e-6 * 5.0 / std::pow(sigma(kVe, t), 2));
  EXPECT_THROW(hutchinson_trace(f, Point::Zero(5), t, 0, 1), DomainError);
}

TEST(Hutchinson, MixtureWithinThreeStandardErrors) {
  const auto m = random_mixture(5, 3, 13);
  const auto f = ScoreField::mixture(m.atoms, m.weights, kVp);
  const Point y = vec({0.1, 0.3, -0.2});
  const double t = 0.3;
  for (auto dist : {ProbeDist::Rademacher, ProbeDist::Gaussian}) {
    const auto est = hutchinson_trace(f, y, t, 100000, 4, dist);
    EXPECT_NEAR(est.value, exact_trace(f, y, t), 3.0 * est.std_error);
  }
}

TEST(Hutchinson, UnbiasedAcrossSeeds) {
  const auto m = random_mixture(5, 3, 17);
  const auto f = ScoreField::mixture(m.atoms, m.weights, kVe);
  const Point y = vec({-0.4, 0.2, 0.5});
  const double t = 0.45;
  double sum = 0.0, sum2 = 0.0;
  const int seeds = 100;
  for (int s = 0; s < seeds; ++s) {
    const double v = hutchinson_trace(f, y, t, 50, static_cast<std::uint64_t>(s), ProbeDist::Gaussian).value;
    sum += v;
    sum2 += v * v;
  }
  const double mean = sum / seeds;
  const double se = std::sqrt((sum2 / seeds - mean * mean) / (seeds - 1));
  EXPECT_LT(std::abs(mean - exact_trace(f, y, t)), 4.0 * se);
}

TEST(FdTrace, QuadraticLogDensity) {
  Eigen::Matrix3d A;
  A << 2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 4.0;
  const auto f = ScoreField::callable([A](const Point& y, double) { return Point(-A * y); }, 3);
  EXPECT_NEAR(fd_trace(f, vec({1.0, -1.0, 0.5}), 0.5, 1e-3).value, -A.trace(), 1e-9);
  EXPECT_THROW(fd_trace(f, Point::Zero(3), 0.5, 0.0), DomainError);
}

TEST(FdTrace, SinglePointMass) {
  const auto f = ScoreField::mixture(DensitySpec::empirical(Points{Point::Zero(2)}), kVe);
  const double t = 0.5;
  EXPECT_NEAR(fd_trace(f, vec({0.3, 0.4}), t, 1e-3).value, -2.0 / std::pow(sigma(kVe, t), 2), 1e-8);
}

// grad log rho_N(x, delta) = psi s(psi x, t(delta)), with an independent
// gradient of the Gaussian-mixture convolution.
TEST(ScoreCorrespondence, MatchesConvolutionGradient) {
  for (const auto& sched : {ScheduleSpec::ve(1e-4, 50.0), kVp}) {
    const auto m = random_mixture(4, 2, 29);
    const auto f = ScoreField::mixture(m.atoms, m.weights, sched);
    for (double delta : {-3.0, -1.0, 0.5}) {
      const double t = t_of_delta(sched, delta);
      const double ps = psi(sched, t);
      const Point x = m.atoms[1] + vec({0.3, -0.2}) * std::exp(delta);
      const double var = std::exp(2.0 * delta);
      std::vector<double> lw;
      for (std::size_t i = 0; i < m.atoms.size(); ++i)
        lw.push_back(std::log(m.weights[i]) - (x - m.atoms[i]).squaredNorm() / (2.0 * var));
      const double lse = log_sum_exp(lw);
      Point grad = Point::Zero(2);
      for (std::size_t i = 0; i < m.atoms.size(); ++i) grad += std::exp(lw[i] - lse) * (m.atoms[i] - x) / var;
      const Point mapped = ps * score(f, ps * x, t);
      EXPECT_LT((mapped - grad).norm(), 1e-8 * std::max(1.0, grad.norm())) << delta;
    }
  }
}

TEST(Perturbed, IsDeterministicAndDiffersFromBase) {
  const auto base = ScoreField::mixture(DensitySpec::empirical(Points{Point::Zero(2)}), kVe);
  const auto a = perturbed(base, 0.1, 3), b = perturbed(base, 0.1, 3);
  const Point y = vec({0.2, 0.1});
  EXPECT_EQ(score(a, y, 0.5), score(b, y, 0.5));
  EXPECT_GT((score(a, y, 0.5) - score(base, y, 0.5)).norm(), 0.0);
}
