#pragma once

// Sweep execution: every (query point, delta, estimator) triple is one task;
// tasks run on a small worker pool and rows are sorted before emission.

#include "lidkit/harness/config.hpp"

#include "json.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <memory>
#include <ostream>
#include <thread>
#include <tuple>

namespace lidkit {

struct SweepRow {
  std::size_t point_id = 0;
  std::size_t component_index = 0;
  int true_lid = 0;
  double delta = 0.0;
  std::string estimator;
  double value = 0.0;
  double std_error = 0.0;
  /// Empty on success; the estimator's error message otherwise.
  std::string error;
  double runtime_ms = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
};

inline const std::vector<std::string>& sweep_columns() {
  static const std::vector<std::string> cols = {"point_id", "component_index", "true_lid", "delta",     "estimator",
                                                "value",    "stderr",          "error",    "runtime_ms"};
  return cols;
}

namespace sweep_detail {

inline bool exact_ball_supported(const DensitySpec& d) {
  if (const auto* mix = d.as<Mixture>()) {
    for (const auto& c : mix->components)
      if (!exact_ball_supported(c)) return false;
    return true;
  }
  const auto& m = d.manifold();
  if (m.as<PointSet>()) return true;
  if (m.as<Sphere>() && d.as<UniformOnCompact>()) return true;
  if (const auto* a = m.as<AffineSubspace>()) return a->basis.cols() == 1 && d.as<GaussianOnAffine>();
  return false;
}

inline bool wants(const EstimatorOptions& e, const std::string& name) {
  return std::find(e.names.begin(), e.names.end(), name) != e.names.end();
}

/// Read-only state shared by all tasks of one sweep.
struct Context {
  const ExperimentConfig& cfg;
  std::unique_ptr<ConvolutionOracle> conv;
  std::unique_ptr<ScoreField> field;
  std::unique_ptr<BallOracle> ball;
  Points count_bank;

  explicit Context(const ExperimentConfig& c) : cfg(c) {
    const auto& e = cfg.estimators;
    const bool need_conv = wants(e, "flipd") || wants(e, "flipd_grid_mean") || wants(e, "gauss_slope") ||
                           wants(e, "lidl");
    if (need_conv) {
      conv = std::make_unique<ConvolutionOracle>(cfg.density, e.oracle);
      if (cfg.density.as<Empirical>())
        field = std::make_unique<ScoreField>(ScoreField::mixture(cfg.density, cfg.schedule));
      else if (cfg.density.as<GaussianOnAffine>())
        field = std::make_unique<ScoreField>(ScoreField::affine_gaussian(cfg.density, cfg.schedule));
      else
        field = std::make_unique<ScoreField>(convolution_score_field(*conv, cfg.schedule, e.score_rel_step));
    }
    if (wants(e, "uniform_slope")) {
      ball = std::make_unique<BallOracle>(
          exact_ball_supported(cfg.density)
              ? BallOracle::exact(cfg.density)
              : BallOracle::monte_carlo(cfg.density, e.ball_samples, derive_seed(cfg.run.seed, 0xba11)));
    }
    if (wants(e, "ball_count")) count_bank = sample(cfg.density, e.count_samples, derive_seed(cfg.run.seed, 0xc0c0));
  }

  TraceMode trace_mode(std::size_t point_id, std::size_t delta_index) const {
    const auto& e = cfg.estimators;
    switch (e.trace) {
      case TraceChoice::Auto:
        return field->is_analytic() ? TraceMode::exact() : TraceMode::finite_difference();
      case TraceChoice::Exact:
        return TraceMode::exact();
      case TraceChoice::FiniteDifference:
        return TraceMode::finite_difference();
      case TraceChoice::Hutchinson:
        return TraceMode::hutchinson(e.probes, derive_seed(cfg.run.seed, point_id, delta_index), e.probe_dist);
    }
    return TraceMode::exact();
  }

  /// Monte Carlo standard error of the kernel-weighted derivative, zero for
  /// deterministic oracles.
  double conv_slope_se(const Point& x, double delta) const {
    return kernel_integral(*conv, x, delta, cfg.density.ambient_dim()).scaled_sq_se;
  }
};

inline std::vector<double> window(double delta, double span, int points) {
  std::vector<double> g(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i) g[static_cast<std::size_t>(i)] = delta + span * i / (points - 1);
  return g;
}

/// Standard error of an OLS slope from the residual scatter.
inline double ols_slope_se(const RegressionFit& fit) {
  const double n = static_cast<double>(fit.grid.size());
  if (n < 3) return 0.0;
  double mx = 0.0;
  for (double v : fit.grid) mx += v;
  mx /= n;
  double sxx = 0.0;
  for (double v : fit.grid) sxx += (v - mx) * (v - mx);
  return std::sqrt(fit.residual_rms * fit.residual_rms * n / (n - 2.0) / sxx);
}

inline std::pair<double, double> evaluate(const Context& ctx, const std::string& name, const QueryPoint& q,
                                          std::size_t point_id, double delta, std::size_t delta_index) {
  const auto& cfg = ctx.cfg;
  const auto& e = cfg.estimators;
  const int D = cfg.density.ambient_dim();
  if (name == "flipd") {
    const auto mode = ctx.trace_mode(point_id, delta_index);
    const auto est = flipd(*ctx.field, cfg.schedule, q.coords, delta, mode);
    double se = est.diagnostics.std_error.value_or(0.0);
    if (ctx.conv->method() == Method::MonteCarlo && !ctx.field->is_analytic()) se = ctx.conv_slope_se(q.coords, delta);
    return {est.value, se};
  }
  if (name == "flipd_grid_mean") {
    std::vector<double> grid;
    for (double o : e.grid_mean_offsets) grid.push_back(delta + o);
    return {flipd_grid_mean(*ctx.field, cfg.schedule, q.coords, grid, ctx.trace_mode(point_id, delta_index)).value, 0.0};
  }
  if (name == "gauss_slope") {
    const double v = D + dlogrho_ddelta_gauss(*ctx.conv, q.coords, delta);
    return {v, ctx.conv_slope_se(q.coords, delta)};
  }
  if (name == "uniform_slope") {
    UniformSlopeOptions opt;
    opt.step = e.uniform_step;
    const auto est = uniform_slope(*ctx.ball, q.coords, delta, opt);
    return {est.value, est.diagnostics.std_error.value_or(0.0)};
  }
  if (name == "lidl") {
    std::vector<std::pair<double, double>> pts;
    double se_num = 0.0, mx = 0.0, sxx = 0.0;
    const auto grid = window(delta, e.lidl_span, e.lidl_points);
    std::vector<double> ses;
    for (double d : grid) {
      const auto k = kernel_integral(*ctx.conv, q.coords, d, D);
      pts.emplace_back(d, k.log_value);
      ses.push_back(k.log_value_se);
      mx += d / static_cast<double>(grid.size());
    }
    for (std::size_t i = 0; i < grid.size(); ++i) {
      sxx += (grid[i] - mx) * (grid[i] - mx);
      se_num += std::pow((grid[i] - mx) * ses[i], 2);
    }
    return {lidl_regress(pts, D).estimate.value, std::sqrt(se_num) / sxx};
  }
  if (name == "ball_count") {
    const auto est = ball_count_regress(ctx.count_bank, q.coords, window(delta, e.count_span, e.count_points),
                                        e.count_k_min);
    return {est.estimate.value, ols_slope_se(est.fit)};
  }
  throw UnsupportedError("unknown estimator '" + name + "'");
}

}  // namespace sweep_detail

/// Runs every (point, delta, estimator) task of the config. Estimator errors
/// land in the row's error column. Output is independent of `jobs`.
inline SweepResult run_sweep(const ExperimentConfig& cfg, int jobs = 0) {
  if (jobs <= 0) jobs = cfg.run.jobs;
  const sweep_detail::Context ctx(cfg);
  struct Task {
    std::size_t point, delta, estimator;
  };
  std::vector<Task> tasks;
  for (std::size_t p = 0; p < cfg.queries.size(); ++p)
    for (std::size_t k = 0; k < cfg.deltas.size(); ++k)
      for (std::size_t e = 0; e < cfg.estimators.names.size(); ++e) tasks.push_back({p, k, e});

  SweepResult result;
  result.rows.resize(tasks.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      const auto& t = tasks[i];
      const auto& q = cfg.queries[t.point];
      auto& row = result.rows[i];
      row.point_id = t.point;
      row.component_index = q.component_index;
      row.true_lid = q.true_lid;
      row.delta = cfg.deltas[t.delta];
      row.estimator = cfg.estimators.names[t.estimator];
      const auto start = std::chrono::steady_clock::now();
      try {
        const auto [v, se] = sweep_detail::evaluate(ctx, row.estimator, q, t.point, row.delta, t.delta);
        if (!std::isfinite(v)) throw NumericalError("non-finite estimate");
        row.value = v;
        row.std_error = se;
      } catch (const std::exception& ex) {
        row.error = ex.what();
      }
      if (cfg.run.timing)
        row.runtime_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    }
  };
  std::vector<std::thread> pool;
  for (int j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();

  std::sort(result.rows.begin(), result.rows.end(), [](const SweepRow& a, const SweepRow& b) {
    return std::tie(a.point_id, a.delta, a.estimator) < std::tie(b.point_id, b.delta, b.estimator);
  });
  return result;
}

namespace sweep_detail {

inline std::string fmt(double v, const char* pattern = "%.15g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace sweep_detail

inline void write_csv(const SweepResult& r, std::ostream& out) {
  using sweep_detail::fmt;
  const auto& cols = sweep_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << "\n";
  for (const auto& row : r.rows) {
    const bool ok = row.error.empty();
    out << row.point_id << ',' << row.component_index << ',' << row.true_lid << ',' << fmt(row.delta) << ','
        << row.estimator << ',' << (ok ? fmt(row.value) : "") << ',' << (ok ? fmt(row.std_error) : "") << ','
        << sweep_detail::csv_escape(row.error) << ',' << fmt(row.runtime_ms, "%.3f") << "\n";
  }
}

inline nlohmann::json to_json(const SweepResult& r) {
  auto rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    const bool ok = row.error.empty();
    rows.push_back({{"point_id", row.point_id},
                    {"component_index", row.component_index},
                    {"true_lid", row.true_lid},
                    {"delta", row.delta},
                    {"estimator", row.estimator},
                    {"value", ok ? nlohmann::json(row.value) : nlohmann::json(nullptr)},
                    {"stderr", ok ? nlohmann::json(row.std_error) : nlohmann::json(nullptr)},
                    {"error", row.error},
                    {"runtime_ms", row.runtime_ms}});
  }
  return {{"rows", rows}};
}

inline void write_json(const SweepResult& r, std::ostream& out) { out << to_json(r).dump(2) << "\n"; }

}  // namespace lidkit
