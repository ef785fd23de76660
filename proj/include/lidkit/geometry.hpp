#pragma once

// Synthetic embedded submanifolds of R^D with known intrinsic dimension,
// densities on them, exact samplers and closed-form geodesics.

#include "lidkit/common.hpp"

#include <boost/math/special_functions/beta.hpp>

#include <algorithm>
#include <cstddef>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace lidkit {

class ManifoldSpec;
class DensitySpec;

/// {offset + basis * z : z in R^d}; basis is D x d with orthonormal columns.
struct AffineSubspace {
  Eigen::MatrixXd basis;
  Point offset;
};

/// Round d-sphere of the given radius living in coordinates [0, d] of R^D,
/// translated by center.
struct Sphere {
  double radius = 1.0;
  int intrinsic_dim = 1;
  Point center;
};

/// (t cos t, t sin t, h) in the first three coordinates, t in [1.5pi, 4.5pi],
/// h in [0, 10]; remaining coordinates are zero.
struct SwissRoll {
  static constexpr double t_min = 1.5 * kPi;
  static constexpr double t_max = 4.5 * kPi;
  static constexpr double height = 10.0;
  int ambient_dim = 3;
};

/// Finitely many atoms; each atom is its own 0-dimensional component.
struct PointSet {
  Points points;
};

/// Finite disjoint union with mixing weights and a declared separation
/// (lower bound on the Euclidean gap between any two components).
struct DisjointUnion {
  std::vector<ManifoldSpec> components;
  std::vector<double> weights;
  double separation = 0.0;
};

class ManifoldSpec {
 public:
  using Variant = std::variant<AffineSubspace, Sphere, SwissRoll, PointSet, DisjointUnion>;

  static ManifoldSpec affine(Eigen::MatrixXd basis, Point offset);
  /// span(e_0..e_{d-1}) through the origin.
  static ManifoldSpec coordinate_subspace(int d, int ambient_dim);
  static ManifoldSpec sphere(double radius, int intrinsic_dim, int ambient_dim,
                             std::optional<Point> center = std::nullopt);
  static ManifoldSpec unit_circle() { return sphere(1.0, 1, 2); }
  static ManifoldSpec swiss_roll(int ambient_dim = 3);
  static ManifoldSpec point_set(Points points);
  static ManifoldSpec disjoint_union(std::vector<ManifoldSpec> components, std::vector<double> weights,
                                     double separation);

  int ambient_dim() const { return ambient_dim_; }
  const Variant& variant() const { return variant_; }
  template <class T>
  const T* as() const { return std::get_if<T>(&variant_); }

  /// Intrinsic dimension; for unions, of the given component.
  int intrinsic_dim(std::size_t component = 0) const;
  /// Number of top-level components (1 unless a union).
  std::size_t component_count() const;
  std::string name() const;

 private:
  ManifoldSpec(Variant v, int ambient_dim) : variant_(std::move(v)), ambient_dim_(ambient_dim) {}
  Variant variant_;
  int ambient_dim_;
};

/// Where a point sits: which top-level component, and how far off it is.
struct Location {
  std::size_t component = 0;
  double residual = kInf;
};

// ---------------------------------------------------------------------------
// Swiss-roll arc length helpers.

namespace swiss {

/// Arc length of the planar spiral r = t from 0 to t.
inline double arc_length(double t) { return 0.5 * (t * std::sqrt(1.0 + t * t) + std::asinh(t)); }

inline double total_length() { return arc_length(SwissRoll::t_max) - arc_length(SwissRoll::t_min); }

/// Inverse of arc_length on [t_min, t_max]; Newton from a bracketed start.
inline double t_of_arc(double s) {
  double lo = SwissRoll::t_min, hi = SwissRoll::t_max;
  double t = 0.5 * (lo + hi);
  for (int it = 0; it < 100; ++it) {
    double f = arc_length(t) - s;
    if (f > 0) hi = t; else lo = t;
    double next = t - f / std::sqrt(1.0 + t * t);
    if (next <= lo || next >= hi) next = 0.5 * (lo + hi);
    if (std::abs(next - t) < 1e-15 * std::max(1.0, t)) return next;
    t = next;
  }
  return t;
}

inline Point embed(double t, double h, int ambient_dim) {
  Point x = Point::Zero(ambient_dim);
  x[0] = t * std::cos(t);
  x[1] = t * std::sin(t);
  x[2] = h;
  return x;
}

}  // namespace swiss

// ---------------------------------------------------------------------------
// Construction.

inline ManifoldSpec ManifoldSpec::affine(Eigen::MatrixXd basis, Point offset) {
  const auto D = basis.rows();
  if (offset.size() != D) throw DomainError("affine subspace: offset dimension does not match basis rows");
  if (basis.cols() < 1 || basis.cols() >= D)
    throw DomainError("affine subspace: need 1 <= d < D columns");
  const Eigen::MatrixXd gram = basis.transpose() * basis;
  const double err = (gram - Eigen::MatrixXd::Identity(basis.cols(), basis.cols())).cwiseAbs().maxCoeff();
  if (err > 1e-12) throw DomainError("affine subspace: basis columns are not orthonormal (error " + std::to_string(err) + ")");
  return ManifoldSpec(AffineSubspace{std::move(basis), std::move(offset)}, static_cast<int>(D));
}

inline ManifoldSpec ManifoldSpec::coordinate_subspace(int d, int ambient_dim) {
  Eigen::MatrixXd basis = Eigen::MatrixXd::Zero(ambient_dim, d);
  for (int i = 0; i < d; ++i) basis(i, i) = 1.0;
  return affine(std::move(basis), Point::Zero(ambient_dim));
}

inline ManifoldSpec ManifoldSpec::sphere(double radius, int intrinsic_dim, int ambient_dim,
                                         std::optional<Point> center) {
  if (!(radius > 0)) throw DomainError("sphere: radius must be positive");
  if (intrinsic_dim < 1 || intrinsic_dim >= ambient_dim)
    throw DomainError("sphere: need 1 <= intrinsic_dim < ambient_dim");
  Point c = center.value_or(Point::Zero(ambient_dim));
  if (c.size() != ambient_dim) throw DomainError("sphere: center dimension mismatch");
  return ManifoldSpec(Sphere{radius, intrinsic_dim, std::move(c)}, ambient_dim);
}

inline ManifoldSpec ManifoldSpec::swiss_roll(int ambient_dim) {
  if (ambient_dim < 3) throw DomainError("swiss roll: ambient_dim must be >= 3");
  return ManifoldSpec(SwissRoll{ambient_dim}, ambient_dim);
}

inline ManifoldSpec ManifoldSpec::point_set(Points points) {
  if (points.empty()) throw DomainError("point set: need at least one point");
  const auto D = points.front().size();
  for (const auto& p : points)
    if (p.size() != D) throw DomainError("point set: inconsistent dimensions");
  return ManifoldSpec(PointSet{std::move(points)}, static_cast<int>(D));
}

inline ManifoldSpec ManifoldSpec::disjoint_union(std::vector<ManifoldSpec> components,
                                                 std::vector<double> weights, double separation) {
  if (components.empty()) throw DomainError("disjoint union: no components");
  if (components.size() != weights.size()) throw DomainError("disjoint union: one weight per component");
  const int D = components.front().ambient_dim();
  double total = 0.0;
  for (std::size_t j = 0; j < components.size(); ++j) {
    if (components[j].ambient_dim() != D) throw DomainError("disjoint union: ambient dimensions differ");
    if (components[j].as<DisjointUnion>()) throw UnsupportedError("disjoint union: nested unions are not supported");
    if (!(weights[j] > 0)) throw DomainError("disjoint union: weights must be positive");
    total += weights[j];
  }
  if (std::abs(total - 1.0) > 1e-12) throw DomainError("disjoint union: weights must sum to 1");
  if (!(separation > 0)) throw DomainError("disjoint union: separation must be positive");
  return ManifoldSpec(DisjointUnion{std::move(components), std::move(weights), separation}, D);
}

inline int ManifoldSpec::intrinsic_dim(std::size_t component) const {
  return std::visit(
      [&](const auto& m) -> int {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, AffineSubspace>) return static_cast<int>(m.basis.cols());
        else if constexpr (std::is_same_v<T, Sphere>) return m.intrinsic_dim;
        else if constexpr (std::is_same_v<T, SwissRoll>) return 2;
        else if constexpr (std::is_same_v<T, PointSet>) return 0;
        else return m.components.at(component).intrinsic_dim();
      },
      variant_);
}

inline std::size_t ManifoldSpec::component_count() const {
  if (const auto* u = as<DisjointUnion>()) return u->components.size();
  return 1;
}

inline std::string ManifoldSpec::name() const {
  return std::visit(
      [](const auto& m) -> std::string {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, AffineSubspace>) return "affine";
        else if constexpr (std::is_same_v<T, Sphere>) return "sphere";
        else if constexpr (std::is_same_v<T, SwissRoll>) return "swiss_roll";
        else if constexpr (std::is_same_v<T, PointSet>) return "point_set";
        else return "union";
      },
      variant_);
}

// ---------------------------------------------------------------------------
// Projection residuals.

namespace detail {

inline double sphere_residual(const Sphere& s, const Point& x) {
  const int k = s.intrinsic_dim + 1;
  const Point rel = x - s.center;
  const double radial = rel.head(k).norm() - s.radius;
  const double off = rel.tail(rel.size() - k).squaredNorm();
  return std::sqrt(radial * radial + off);
}

inline double affine_residual(const AffineSubspace& a, const Point& x) {
  const Point rel = x - a.offset;
  return (rel - a.basis * (a.basis.transpose() * rel)).norm();
}

/// Residual to the point rebuilt from recovered (t, h); zero iff on the roll.
inline double swiss_residual(const Point& x) {
  const double r = std::hypot(x[0], x[1]);
  const double t = std::clamp(r, SwissRoll::t_min, SwissRoll::t_max);
  const double h = std::clamp(x[2], 0.0, SwissRoll::height);
  Point rebuilt = swiss::embed(t, h, static_cast<int>(x.size()));
  return (x - rebuilt).norm();
}

inline double point_set_residual(const PointSet& ps, const Point& x, std::size_t* nearest = nullptr) {
  double best = kInf;
  for (std::size_t i = 0; i < ps.points.size(); ++i) {
    double dist = (x - ps.points[i]).norm();
    if (dist < best) {
      best = dist;
      if (nearest) *nearest = i;
    }
  }
  return best;
}

}  // namespace detail

/// Nearest component and residual. For a PointSet the component is the atom index.
inline Location locate(const ManifoldSpec& m, const Point& x) {
  if (x.size() != m.ambient_dim()) throw DomainError("point dimension does not match ambient dimension");
  return std::visit(
      [&](const auto& v) -> Location {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, AffineSubspace>) return {0, detail::affine_residual(v, x)};
        else if constexpr (std::is_same_v<T, Sphere>) return {0, detail::sphere_residual(v, x)};
        else if constexpr (std::is_same_v<T, SwissRoll>) return {0, detail::swiss_residual(x)};
        else if constexpr (std::is_same_v<T, PointSet>) {
          std::size_t idx = 0;
          double r = detail::point_set_residual(v, x, &idx);
          return {idx, r};
        } else {
          Location best;
          for (std::size_t j = 0; j < v.components.size(); ++j) {
            double r = locate(v.components[j], x).residual;
            if (r < best.residual) best = {j, r};
          }
          return best;
        }
      },
      m.variant());
}

inline double projection_residual(const ManifoldSpec& m, const Point& x) { return locate(m, x).residual; }

inline void require_on_manifold(const ManifoldSpec& m, const Point& x) {
  const double r = projection_residual(m, x);
  if (!(r < kOnManifoldTol)) throw ProjectionError("point is not on the " + m.name(), r);
}

/// Euclidean distance from x to the support of m (exact for all catalog variants
/// except the swiss roll, where a dense parameter scan refined by golden section
/// is used).
inline double distance_to_support(const ManifoldSpec& m, const Point& x) {
  return std::visit(
      [&](const auto& v) -> double {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, AffineSubspace>) return detail::affine_residual(v, x);
        else if constexpr (std::is_same_v<T, Sphere>) return detail::sphere_residual(v, x);
        else if constexpr (std::is_same_v<T, PointSet>) return detail::point_set_residual(v, x);
        else if constexpr (std::is_same_v<T, SwissRoll>) {
          const double hz = x[2] - std::clamp(x[2], 0.0, SwissRoll::height);
          const double rest = x.tail(x.size() - 3).squaredNorm();
          auto planar = [&](double t) { return std::hypot(x[0] - t * std::cos(t), x[1] - t * std::sin(t)); };
          const int n = 4096;
          const double step = (SwissRoll::t_max - SwissRoll::t_min) / n;
          int best = 0;
          double best_val = kInf;
          for (int i = 0; i <= n; ++i) {
            double val = planar(SwissRoll::t_min + i * step);
            if (val < best_val) { best_val = val; best = i; }
          }
          double a = SwissRoll::t_min + std::max(0, best - 1) * step;
          double b = SwissRoll::t_min + std::min(n, best + 1) * step;
          const double g = 0.5 * (std::sqrt(5.0) - 1.0);
          for (int it = 0; it < 100; ++it) {
            double c = b - g * (b - a), d = a + g * (b - a);
            if (planar(c) < planar(d)) b = d; else a = c;
          }
          const double pd = std::min(best_val, planar(0.5 * (a + b)));
          return std::sqrt(pd * pd + hz * hz + rest);
        } else {
          double best = kInf;
          for (const auto& c : v.components) best = std::min(best, distance_to_support(c, x));
          return best;
        }
      },
      m.variant());
}

// ---------------------------------------------------------------------------
// Geodesic distance.

/// Closed-form geodesic distance. Points on different connected components
/// are infinitely far apart (returned as +inf). Throws UnsupportedError when
/// no closed form exists and ProjectionError when a point is off the manifold.
inline double geodesic_distance(const ManifoldSpec& m, const Point& x, const Point& y) {
  require_on_manifold(m, x);
  require_on_manifold(m, y);
  return std::visit(
      [&](const auto& v) -> double {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, AffineSubspace>) return (x - y).norm();
        else if constexpr (std::is_same_v<T, Sphere>) {
          const Point u = (x - v.center) / v.radius, w = (y - v.center) / v.radius;
          return v.radius * 2.0 * std::atan2((u - w).norm(), (u + w).norm());
        } else if constexpr (std::is_same_v<T, SwissRoll>) {
          const double sx = swiss::arc_length(std::hypot(x[0], x[1]));
          const double sy = swiss::arc_length(std::hypot(y[0], y[1]));
          return std::hypot(sx - sy, x[2] - y[2]);
        } else if constexpr (std::is_same_v<T, PointSet>) {
          return (x - y).norm() < kOnManifoldTol ? 0.0 : kInf;
        } else {
          const auto lx = locate(m, x), ly = locate(m, y);
          if (lx.component != ly.component) return kInf;
          return geodesic_distance(v.components[lx.component], x, y);
        }
      },
      m.variant());
}

// ---------------------------------------------------------------------------
// Densities.

struct UniformOnCompact {};

/// Gaussian in the subspace coordinates z (x = offset + basis * z).
struct GaussianOnAffine {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

/// Equal mass on every listed point of a PointSet (duplicates add up).
struct Empirical {};

/// One density per component of a DisjointUnion manifold.
struct Mixture {
  std::vector<DensitySpec> components;
};

class DensitySpec {
 public:
  using Variant = std::variant<UniformOnCompact, GaussianOnAffine, Empirical, Mixture>;

  static DensitySpec uniform(ManifoldSpec m);
  static DensitySpec gaussian_on_affine(ManifoldSpec m, Eigen::VectorXd mean, Eigen::MatrixXd covariance);
  static DensitySpec empirical(ManifoldSpec m);
  static DensitySpec empirical(Points points) { return empirical(ManifoldSpec::point_set(std::move(points))); }
  /// Builds the DisjointUnion manifold from the component densities.
  static DensitySpec mixture(std::vector<DensitySpec> components, std::vector<double> weights, double separation);

  const ManifoldSpec& manifold() const { return manifold_; }
  const Variant& variant() const { return variant_; }
  template <class T>
  const T* as() const { return std::get_if<T>(&variant_); }
  int ambient_dim() const { return manifold_.ambient_dim(); }
  std::string name() const;

  /// Cholesky factor of the covariance (GaussianOnAffine only).
  const Eigen::LLT<Eigen::MatrixXd>& cholesky() const { return *chol_; }
  double log_det_covariance() const { return log_det_; }

 private:
  DensitySpec(ManifoldSpec m, Variant v) : manifold_(std::move(m)), variant_(std::move(v)) {}
  ManifoldSpec manifold_;
  Variant variant_;
  std::shared_ptr<const Eigen::LLT<Eigen::MatrixXd>> chol_;
  double log_det_ = 0.0;
};

inline DensitySpec DensitySpec::uniform(ManifoldSpec m) {
  if (!m.as<Sphere>() && !m.as<SwissRoll>())
    throw UnsupportedError("uniform density needs a compact manifold (sphere or swiss roll), got " + m.name());
  return DensitySpec(std::move(m), UniformOnCompact{});
}

inline DensitySpec DensitySpec::gaussian_on_affine(ManifoldSpec m, Eigen::VectorXd mean,
                                                   Eigen::MatrixXd covariance) {
  const auto* a = m.as<AffineSubspace>();
  if (!a) throw UnsupportedError("gaussian_on_affine needs an affine subspace, got " + m.name());
  const auto d = a->basis.cols();
  if (mean.size() != d || covariance.rows() != d || covariance.cols() != d)
    throw DomainError("gaussian_on_affine: mean/covariance must be d-dimensional");
  auto chol = std::make_shared<Eigen::LLT<Eigen::MatrixXd>>(covariance);
  if (chol->info() != Eigen::Success) throw DomainError("gaussian_on_affine: covariance is not SPD");
  DensitySpec out(std::move(m), GaussianOnAffine{std::move(mean), std::move(covariance)});
  out.log_det_ = 2.0 * chol->matrixL().toDenseMatrix().diagonal().array().log().sum();
  out.chol_ = std::move(chol);
  return out;
}

inline DensitySpec DensitySpec::empirical(ManifoldSpec m) {
  if (!m.as<PointSet>()) throw UnsupportedError("empirical density needs a point set, got " + m.name());
  return DensitySpec(std::move(m), Empirical{});
}

inline DensitySpec DensitySpec::mixture(std::vector<DensitySpec> components, std::vector<double> weights,
                                        double separation) {
  std::vector<ManifoldSpec> parts;
  parts.reserve(components.size());
  for (const auto& c : components) parts.push_back(c.manifold());
  auto m = ManifoldSpec::disjoint_union(std::move(parts), std::move(weights), separation);
  return DensitySpec(std::move(m), Mixture{std::move(components)});
}

inline std::string DensitySpec::name() const {
  return std::visit(
      [](const auto& v) -> std::string {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, UniformOnCompact>) return "uniform";
        else if constexpr (std::is_same_v<T, GaussianOnAffine>) return "gaussian";
        else if constexpr (std::is_same_v<T, Empirical>) return "empirical";
        else return "mixture";
      },
      variant_);
}

/// log of the Riemannian volume of the d-sphere of radius r.
inline double log_sphere_area(int d, double r) {
  return std::log(2.0) + 0.5 * (d + 1) * std::log(kPi) - std::lgamma(0.5 * (d + 1)) + d * std::log(r);
}

/// Subspace coordinates z = basis^T (x - offset).
inline Eigen::VectorXd affine_coords(const AffineSubspace& a, const Point& x) {
  return a.basis.transpose() * (x - a.offset);
}

namespace detail {

inline double gaussian_log_pdf(const DensitySpec& dens, const Eigen::VectorXd& z) {
  const auto& g = *dens.as<GaussianOnAffine>();
  const Eigen::VectorXd v = dens.cholesky().matrixL().solve(z - g.mean);
  return -0.5 * z.size() * kLog2Pi - 0.5 * dens.log_det_covariance() - 0.5 * v.squaredNorm();
}

}  // namespace detail

/// log p(x) with respect to the Riemannian measure (counting measure on atoms).
inline double log_density_at(const DensitySpec& dens, const Point& x) {
  require_on_manifold(dens.manifold(), x);
  return std::visit(
      [&](const auto& v) -> double {
        using T = std::decay_t<decltype(v)>;
        const auto& m = dens.manifold();
        if constexpr (std::is_same_v<T, UniformOnCompact>) {
          if (const auto* s = m.as<Sphere>()) return -log_sphere_area(s->intrinsic_dim, s->radius);
          return -std::log(swiss::total_length() * SwissRoll::height);
        } else if constexpr (std::is_same_v<T, GaussianOnAffine>) {
          return detail::gaussian_log_pdf(dens, affine_coords(*m.as<AffineSubspace>(), x));
        } else if constexpr (std::is_same_v<T, Empirical>) {
          const auto& pts = m.as<PointSet>()->points;
          std::size_t hits = 0;
          for (const auto& p : pts) hits += (x - p).norm() < kOnManifoldTol;
          return std::log(static_cast<double>(hits) / static_cast<double>(pts.size()));
        } else {
          const auto& u = *m.as<DisjointUnion>();
          const auto loc = locate(m, x);
          return std::log(u.weights[loc.component]) + log_density_at(v.components[loc.component], x);
        }
      },
      dens.variant());
}

inline double density_at(const DensitySpec& dens, const Point& x) { return std::exp(log_density_at(dens, x)); }

// ---------------------------------------------------------------------------
// Sampling.

namespace detail {

inline Point sample_one(const DensitySpec& dens, Rng& rng) {
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif;
  const auto& m = dens.manifold();
  return std::visit(
      [&](const auto& v) -> Point {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, UniformOnCompact>) {
          if (const auto* s = m.as<Sphere>()) {
            const int k = s->intrinsic_dim + 1;
            Eigen::VectorXd g(k);
            for (int i = 0; i < k; ++i) g[i] = normal(rng);
            Point x = s->center;
            x.head(k) += s->radius * g / g.norm();
            return x;
          }
          const double s0 = swiss::arc_length(SwissRoll::t_min);
          const double s = s0 + unif(rng) * swiss::total_length();
          const double h = unif(rng) * SwissRoll::height;
          return swiss::embed(swiss::t_of_arc(s), h, m.ambient_dim());
        } else if constexpr (std::is_same_v<T, GaussianOnAffine>) {
          const auto& a = *m.as<AffineSubspace>();
          Eigen::VectorXd g(v.mean.size());
          for (Eigen::Index i = 0; i < g.size(); ++i) g[i] = normal(rng);
          const Eigen::VectorXd z = v.mean + dens.cholesky().matrixL() * g;
          return a.offset + a.basis * z;
        } else if constexpr (std::is_same_v<T, Empirical>) {
          const auto& pts = m.as<PointSet>()->points;
          std::uniform_int_distribution<std::size_t> pick(0, pts.size() - 1);
          return pts[pick(rng)];
        } else {
          const auto& w = m.as<DisjointUnion>()->weights;
          std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
          return sample_one(v.components[pick(rng)], rng);
        }
      },
      dens.variant());
}

}  // namespace detail

/// n i.i.d. draws; deterministic for a fixed seed.
inline Points sample(const DensitySpec& dens, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw DomainError("sample: n must be >= 1");
  Rng rng(derive_seed(seed, 0x5a3b1e));
  Points out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(detail::sample_one(dens, rng));
  return out;
}

// ---------------------------------------------------------------------------
// Query points.

struct QueryPoint {
  Point coords;
  std::size_t component_index = 0;
  int true_lid = 0;
};

/// Validates that x lies on the manifold and fills in its component and LID.
/// Atoms of a PointSet report component 0 (the whole set is one component of
/// the enclosing union); their LID is 0.
inline QueryPoint make_query(const ManifoldSpec& m, Point x) {
  const auto loc = locate(m, x);
  if (!(loc.residual < kOnManifoldTol)) throw ProjectionError("query point is not on the " + m.name(), loc.residual);
  QueryPoint q;
  q.coords = std::move(x);
  q.component_index = m.as<DisjointUnion>() ? loc.component : 0;
  q.true_lid = m.intrinsic_dim(q.component_index);
  return q;
}

// ---------------------------------------------------------------------------
// Second moment C = int p(x') dist^2(x, x') dx'.

struct SecondMoment {
  double value = 0.0;
  double std_error = 0.0;
  /// False when C diverges (mass on another connected component).
  bool finite = true;
  std::string note;
};

struct SecondMomentOptions {
  int quadrature_nodes = 4096;
  std::size_t mc_samples = 200000;
  std::uint64_t seed = 0;
};

inline SecondMoment second_moment(const DensitySpec& dens, const QueryPoint& q, SecondMomentOptions opt = {}) {
  const auto& m = dens.manifold();
  const Point& x = q.coords;
  require_on_manifold(m, x);
  if (const auto* mix = dens.as<Mixture>()) {
    if (mix->components.size() > 1)
      return {kInf, 0.0, false, "assumption violated: mass on other components is at infinite geodesic distance"};
    return second_moment(mix->components.front(), q, opt);
  }
  if (dens.as<Empirical>()) {
    for (const auto& p : m.as<PointSet>()->points)
      if ((p - x).norm() >= kOnManifoldTol)
        return {kInf, 0.0, false, "assumption violated: atoms at infinite geodesic distance"};
    return {0.0, 0.0, true, "point mass"};
  }
  if (const auto* g = dens.as<GaussianOnAffine>()) {
    const Eigen::VectorXd z = affine_coords(*m.as<AffineSubspace>(), x);
    return {(z - g->mean).squaredNorm() + g->covariance.trace(), 0.0, true, "closed form"};
  }
  if (const auto* s = m.as<Sphere>(); s && s->intrinsic_dim == 1) {
    // Simpson in the angle phi relative to x; p is uniform so p = 1/(2 pi R).
    const int n = opt.quadrature_nodes + (opt.quadrature_nodes % 2);
    const double h = 2.0 * kPi / n;
    double acc = 0.0;
    for (int k = 0; k <= n; ++k) {
      const double phi = -kPi + k * h;
      const double wk = (k == 0 || k == n) ? 1.0 : (k % 2 ? 4.0 : 2.0);
      acc += wk * phi * phi;
    }
    const double r2 = s->radius * s->radius;
    return {r2 * acc * h / 3.0 / (2.0 * kPi), 0.0, true, "quadrature"};
  }
  const Points pts = sample(dens, opt.mc_samples, opt.seed);
  double mean = 0.0, m2 = 0.0;
  std::size_t k = 0;
  for (const auto& p : pts) {
    const double d2 = std::pow(geodesic_distance(m, x, p), 2);
    ++k;
    const double delta = d2 - mean;
    mean += delta / k;
    m2 += delta * (d2 - mean);
  }
  const double se = std::sqrt(m2 / (k - 1) / k);
  if (!std::isfinite(mean)) return {kInf, 0.0, false, "assumption violated: divergent estimate"};
  return {mean, se, true, "monte carlo"};
}

// ---------------------------------------------------------------------------
// Local patches: importance proposals concentrated around a point.

/// Samples from a proposal q supported on a neighbourhood of x inside the
/// component containing x, together with log q (w.r.t. the Riemannian
/// measure). Every manifold point of that component within Euclidean distance
/// `radius` of x lies in the support of q.
struct LocalPatch {
  Points points;
  std::vector<double> log_q;
  std::size_t component = 0;
};

namespace detail {

/// int_0^theta sin^k(phi) dphi for theta in [0, pi].
inline double sin_power_integral(int k, double theta) {
  if (k == 0) return theta;
  const double a = 0.5 * (k + 1), b = 0.5;
  const double full = boost::math::beta(a, b);
  if (theta <= 0.5 * kPi) return 0.5 * full * boost::math::ibeta(a, b, std::pow(std::sin(theta), 2));
  return full - 0.5 * full * boost::math::ibeta(a, b, std::pow(std::sin(theta), 2));
}

inline LocalPatch sphere_patch(const Sphere& s, const Point& x, double radius, std::size_t n, Rng& rng) {
  const int d = s.intrinsic_dim, k = d + 1;
  const double theta_max = radius >= 2.0 * s.radius ? kPi : 2.0 * std::asin(radius / (2.0 * s.radius));
  const double log_area = std::log(2.0) + 0.5 * d * std::log(kPi) - std::lgamma(0.5 * d) + d * std::log(s.radius) +
                          std::log(sin_power_integral(d - 1, theta_max));
  const Eigen::VectorXd u = (x - s.center).head(k) / s.radius;
  const double sin_cap = theta_max >= 0.5 * kPi ? 1.0 : std::sin(theta_max);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif;
  LocalPatch out;
  out.points.reserve(n);
  out.log_q.assign(n, -log_area);
  while (out.points.size() < n) {
    double theta;
    if (d == 1) {
      theta = (2.0 * unif(rng) - 1.0) * theta_max;
    } else {
      theta = unif(rng) * theta_max;
      if (unif(rng) > std::pow(std::sin(theta) / sin_cap, d - 1)) continue;
    }
    Eigen::VectorXd v(k);
    if (d == 1) {
      v << -u[1], u[0];
    } else {
      for (int i = 0; i < k; ++i) v[i] = normal(rng);
      v -= u * u.dot(v);
      v.normalize();
    }
    Point p = s.center;
    p.head(k) += s.radius * (std::cos(theta) * u + std::sin(theta) * v);
    out.points.push_back(std::move(p));
  }
  return out;
}

inline LocalPatch affine_patch(const AffineSubspace& a, const Point& x, double radius, std::size_t n, Rng& rng) {
  const int d = static_cast<int>(a.basis.cols());
  const Eigen::VectorXd z0 = affine_coords(a, x);
  const double log_vol = 0.5 * d * std::log(kPi) - std::lgamma(0.5 * d + 1.0) + d * std::log(radius);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif;
  LocalPatch out;
  out.log_q.assign(n, -log_vol);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::VectorXd g(d);
    for (int j = 0; j < d; ++j) g[j] = normal(rng);
    const double rr = radius * std::pow(unif(rng), 1.0 / d);
    out.points.push_back(a.offset + a.basis * (z0 + rr * g / g.norm()));
  }
  return out;
}

inline LocalPatch swiss_patch(const Point& x, double radius, std::size_t n, Rng& rng) {
  if (radius >= kPi) throw UnsupportedError("swiss roll patch: radius must stay below the layer gap (pi)");
  const double s0 = swiss::arc_length(SwissRoll::t_min), s1 = swiss::arc_length(SwissRoll::t_max);
  const double sx = swiss::arc_length(std::hypot(x[0], x[1]));
  // Arc length exceeds chord length by under 2% at the tightest turn for
  // chords below pi, so a 10% wider window covers the Euclidean ball.
  const double half_s = 1.1 * radius;
  const double lo_s = std::max(s0, sx - half_s), hi_s = std::min(s1, sx + half_s);
  const double lo_h = std::max(0.0, x[2] - radius), hi_h = std::min(SwissRoll::height, x[2] + radius);
  const double log_area = std::log((hi_s - lo_s) * (hi_h - lo_h));
  std::uniform_real_distribution<double> unif;
  LocalPatch out;
  out.log_q.assign(n, -log_area);
  for (std::size_t i = 0; i < n; ++i) {
    const double s = lo_s + unif(rng) * (hi_s - lo_s);
    const double h = lo_h + unif(rng) * (hi_h - lo_h);
    out.points.push_back(swiss::embed(swiss::t_of_arc(s), h, static_cast<int>(x.size())));
  }
  return out;
}

}  // namespace detail

inline LocalPatch sample_patch(const ManifoldSpec& m, const Point& x, double radius, std::size_t n,
                               std::uint64_t seed) {
  if (!(radius > 0)) throw DomainError("sample_patch: radius must be positive");
  require_on_manifold(m, x);
  Rng rng(derive_seed(seed, 0x9a7c4));
  return std::visit(
      [&](const auto& v) -> LocalPatch {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, AffineSubspace>) return detail::affine_patch(v, x, radius, n, rng);
        else if constexpr (std::is_same_v<T, Sphere>) return detail::sphere_patch(v, x, radius, n, rng);
        else if constexpr (std::is_same_v<T, SwissRoll>) return detail::swiss_patch(x, radius, n, rng);
        else if constexpr (std::is_same_v<T, PointSet>)
          throw UnsupportedError("sample_patch: atoms are counted exactly, no patch needed");
        else {
          const auto loc = locate(m, x);
          auto patch = sample_patch(v.components[loc.component], x, radius, n, seed);
          patch.component = loc.component;
          return patch;
        }
      },
      m.variant());
}

}  // namespace lidkit
