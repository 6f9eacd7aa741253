#ifndef DLNMLPS_SIMHARNESS_HPP
#define DLNMLPS_SIMHARNESS_HPP

// Synthetic panels with known exposure-lag-response surfaces and spatial effects, plus the
// replicate scoring used by the simulation study.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "dlnmlps/fitengine.hpp"
#include "dlnmlps/model.hpp"
#include "dlnmlps/panel.hpp"
#include "dlnmlps/posterior.hpp"
#include "dlnmlps/spatial.hpp"

namespace dlnmlps {

/// True surface f(x, l), the contribution of exposure x at lag l to the log rate.
struct Scenario {
  std::string name;
  std::function<double(double, double)> f;
  double x0 = 0.0;
  double x_lo = 0.0;
  double x_hi = 10.0;
  int max_lag = 40;

  double overall(double x) const {
    double s = 0.0;
    for (int l = 0; l <= max_lag; ++l) s += f(x, l);
    return s;
  }
};

using ScenarioParams = std::map<std::string, double>;

namespace detail {

inline double param(const ScenarioParams& p, const std::string& key, double fallback) {
  const auto it = p.find(key);
  return it == p.end() ? fallback : it->second;
}

// Shifts h so that the surface vanishes at the reference exposure for every lag.
inline std::function<double(double, double)> anchored(std::function<double(double, double)> h, double x0) {
  return [h = std::move(h), x0](double x, double l) { return h(x, l) - h(x0, l); };
}

}  // namespace detail

/// Surface on a regular (x, lag) grid, interpolated bilinearly.
struct SurfaceGrid {
  std::vector<double> x;    // increasing
  std::vector<double> lag;  // increasing
  Eigen::MatrixXd values;   // x.size() x lag.size()

  double operator()(double xv, double lv) const {
    auto locate = [](const std::vector<double>& g, double v) {
      if (g.size() < 2) throw Error(ErrorKind::invalid_argument, "surface grid needs >= 2 points per axis");
      if (v < g.front() || v > g.back()) throw OutOfDomainError(0, v, g.front(), g.back());
      auto it = std::upper_bound(g.begin(), g.end(), v);
      auto i = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, it - g.begin() - 1));
      i = std::min(i, g.size() - 2);
      return std::pair{i, (v - g[i]) / (g[i + 1] - g[i])};
    };
    const auto [i, a] = locate(x, xv);
    const auto [k, b] = locate(lag, lv);
    const auto ii = static_cast<Eigen::Index>(i);
    const auto kk = static_cast<Eigen::Index>(k);
    return (1 - a) * (1 - b) * values(ii, kk) + a * (1 - b) * values(ii + 1, kk) + (1 - a) * b * values(ii, kk + 1) +
           a * b * values(ii + 1, kk + 1);
  }
};

/// Named scenarios on the standardized exposure scale [0, 10].
///   plane:        f = alpha (x - x0) (1 - l / (L + 1))
///   temp-like:    J-shaped in x around x0 (steeper on the hot side), exponential lag decay
///   complex-like: two exposure bumps with opposite lag profiles
///   custom:       bilinear interpolation of `grid`
inline Scenario make_scenario(const std::string& name, const ScenarioParams& p = {}, int max_lag = 40,
                              const SurfaceGrid* grid = nullptr) {
  Scenario s;
  s.name = name;
  s.max_lag = max_lag;
  const double L = max_lag;
  if (name == "plane") {
    s.x0 = detail::param(p, "x0", 0.0);
    const double alpha = detail::param(p, "alpha", 0.005);
    const double x0 = s.x0;
    s.f = [=](double x, double l) { return alpha * (x - x0) * (1.0 - l / (L + 1.0)); };
  } else if (name == "temp-like") {
    s.x0 = detail::param(p, "x0", 4.0);
    const double heat = detail::param(p, "heat", 0.02);
    const double cold = detail::param(p, "cold", 0.008);
    const double decay = detail::param(p, "decay", 4.0);
    double norm = 0.0;
    for (int l = 0; l <= max_lag; ++l) norm += std::exp(-l / decay);
    const double x0 = s.x0;
    s.f = [=](double x, double l) {
      const double d = x - x0;
      return (d > 0 ? heat : cold) * d * d * std::exp(-l / decay) / norm;
    };
  } else if (name == "complex-like") {
    s.x0 = detail::param(p, "x0", 5.0);
    const double amp = detail::param(p, "amplitude", 0.04);
    const double peak = L / 3.0;
    auto h = [=](double x, double l) {
      const double cold = std::exp(-0.5 * (x - 2.0) * (x - 2.0)) * std::exp(-0.5 * (l - peak) * (l - peak) / 16.0);
      const double hot = std::exp(-0.5 * (x - 8.0) * (x - 8.0)) * std::exp(-l / 3.0);
      return amp * (cold + 1.5 * hot);
    };
    s.f = detail::anchored(h, s.x0);
  } else if (name == "custom") {
    if (!grid) throw Error(ErrorKind::invalid_argument, "custom scenario requires a surface grid");
    s.x0 = detail::param(p, "x0", 0.0);
    s.f = detail::anchored(*grid, s.x0);
  } else {
    throw Error(ErrorKind::invalid_argument, "unknown scenario '" + name + "'");
  }
  return s;
}

struct ExposureOptions {
  double ar = 0.7;          // AR(1) coefficient of the daily anomaly
  double noise_sd = 1.0;    // innovation sd of the common anomaly
  double seasonal_amp = 3.0;
  double period = 365.0;
  double unit_sd = 0.3;     // unit-specific deviation from the common series
};

/// AR(1) anomaly plus a seasonal cycle, shared by all units with small unit deviations,
/// min-max scaled to [lo, hi] over the pooled panel. Returns n_units x length.
inline Eigen::MatrixXd synthetic_exposure(int n_units, int length, std::mt19937_64& rng,
                                          const ExposureOptions& o = {}, double lo = 0.0, double hi = 10.0) {
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif(0.0, 2.0 * M_PI);
  const double phase = unif(rng);
  Eigen::VectorXd common(length);
  double e = 0.0;
  for (int t = 0; t < length; ++t) {
    e = o.ar * e + o.noise_sd * normal(rng);
    common[t] = o.seasonal_amp * std::sin(2.0 * M_PI * t / o.period + phase) + e;
  }
  Eigen::MatrixXd x(n_units, length);
  for (int j = 0; j < n_units; ++j)
    for (int t = 0; t < length; ++t) x(j, t) = common[t] + o.unit_sd * normal(rng);
  const double mn = x.minCoeff();
  const double mx = x.maxCoeff();
  return ((x.array() - mn) / (mx - mn) * (hi - lo) + lo).matrix();
}

inline ModelConfig leroux_model() {
  ModelConfig m;
  m.spatial = SpatialKind::leroux;
  return m;
}

struct SimulationConfig {
  std::string scenario = "plane";
  ScenarioParams params;
  int grid_rows = 5;
  int grid_cols = 5;
  int length = 200;  // observations per unit, including the first L dropped by lagging
  int max_lag = 40;
  SpatialKind true_spatial = SpatialKind::leroux;
  double rho = 0.95;
  double variance = 0.5;  // 1 / tau
  double beta0 = std::log(5e-4);
  double pop_lo = 5000.0;
  double pop_hi = 15000.0;
  ExposureOptions exposure;
  ModelConfig model = leroux_model();  // fitted model; max_lag is overridden by the field above
  double level = 0.95;
};

/// Known truth behind a simulated panel.
struct Truth {
  double beta0 = 0.0;
  Eigen::VectorXd u;
  Eigen::VectorXd log_pop;
  double x0 = 0.0;
  std::function<double(double, double)> f;
};

struct SimulatedPanel {
  PanelData panel;
  AdjacencyGraph graph;
  Truth truth;
};

inline SimulatedPanel simulate_panel(const Scenario& scenario, const SimulationConfig& cfg, std::uint64_t seed) {
  if (cfg.true_spatial != SpatialKind::independent && cfg.true_spatial != SpatialKind::leroux)
    throw Error(ErrorKind::invalid_argument,
                std::string("cannot simulate from spatial prior ") + to_string(cfg.true_spatial));
  if (cfg.length <= scenario.max_lag) throw Error(ErrorKind::invalid_argument, "series length must exceed max lag");
  std::mt19937_64 rng(seed);
  SimulatedPanel out;
  out.graph = AdjacencyGraph::grid(cfg.grid_rows, cfg.grid_cols);
  const int J = out.graph.n_units;
  const int T = cfg.length;

  SpatialHypers h;
  h.tau = 1.0 / cfg.variance;
  if (cfg.true_spatial == SpatialKind::leroux) h.rho = cfg.rho;
  out.truth.u = sample_spatial_effect(SpatialStructure(cfg.true_spatial, out.graph), h, rng);
  out.truth.beta0 = cfg.beta0;
  out.truth.x0 = scenario.x0;
  out.truth.f = scenario.f;

  std::uniform_real_distribution<double> pop(cfg.pop_lo, cfg.pop_hi);
  out.truth.log_pop.resize(J);
  for (int j = 0; j < J; ++j) out.truth.log_pop[j] = std::log(pop(rng));

  const Eigen::MatrixXd x = synthetic_exposure(J, T, rng, cfg.exposure, scenario.x_lo, scenario.x_hi);

  // f tabulated per lag on the exposure values actually used.
  PanelData& p = out.panel;
  const auto n = static_cast<Eigen::Index>(J) * T;
  p.y.resize(n);
  p.exposure.resize(n);
  p.offset.resize(n);
  for (int j = 0; j < J; ++j) {
    p.unit_ids.push_back(std::to_string(j + 1));
    for (int t = 0; t < T; ++t) {
      const Eigen::Index r = static_cast<Eigen::Index>(j) * T + t;
      p.unit.push_back(j);
      p.t.push_back(t + 1);
      p.exposure[r] = x(j, t);
      p.offset[r] = out.truth.log_pop[j];
      double eta = out.truth.log_pop[j] + cfg.beta0 + out.truth.u[j];
      // Rows without a full lag history enter the panel but not the likelihood.
      if (t >= scenario.max_lag)
        for (int l = 0; l <= scenario.max_lag; ++l) eta += scenario.f(x(j, t - l), l);
      std::poisson_distribution<long> pois(std::exp(eta));
      p.y[r] = static_cast<double>(pois(rng));
    }
  }
  p.index_series();
  return out;
}

struct MetricPair {
  double rmse = 0.0;
  double coverage = 0.0;
};

struct ReplicateResult {
  int replicate = 0;
  std::uint64_t seed = 0;
  MetricPair lag_rr;
  MetricPair overall_rr;
  MetricPair re;
  MetricPair incidence;  // on the log scale
  double rho_hat = NAN;
  double var_hat = NAN;
  double runtime_seconds = 0.0;
  bool converged = false;
  std::string error;
};

namespace detail {

inline MetricPair accumulate_metric(const std::vector<double>& est, const std::vector<double>& lo,
                                    const std::vector<double>& hi, const std::vector<double>& truth) {
  if (est.size() != truth.size() || lo.size() != truth.size() || hi.size() != truth.size() || truth.empty())
    throw Error(ErrorKind::dimension_mismatch, "grid mismatch between estimates and truth");
  double sq = 0.0;
  std::size_t inside = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    sq += (est[i] - truth[i]) * (est[i] - truth[i]);
    if (truth[i] >= lo[i] && truth[i] <= hi[i]) ++inside;  // closed interval
  }
  return {std::sqrt(sq / static_cast<double>(truth.size())),
          static_cast<double>(inside) / static_cast<double>(truth.size())};
}

}  // namespace detail

/// RMSE and coverage on the log scale for lag-specific RR over the (grid x, integer lag) rectangle,
/// overall RR over grid x, centred random effects and log incidence per unit.
/// `widen` scales every interval half-width (1 = nominal).
inline ReplicateResult score_replicate(const LatentFit& fit, const DlnmBasis& basis, const Truth& truth,
                                       const RiskGrid& grid, double level = 0.95, double widen = 1.0) {
  if (std::abs(grid.x0 - truth.x0) > 1e-12) throw Error(ErrorKind::invalid_argument, "grid and truth use different x0");
  ReplicateResult r;
  const double z = normal_quantile(0.5 + level / 2.0) * widen;
  std::vector<double> est, lo, hi, tv;
  auto push = [&](double m, double sd, double t) {
    est.push_back(m);
    lo.push_back(m - z * sd);
    hi.push_back(m + z * sd);
    tv.push_back(t);
  };
  auto flush = [&] {
    const MetricPair m = detail::accumulate_metric(est, lo, hi, tv);
    est.clear();
    lo.clear();
    hi.clear();
    tv.clear();
    return m;
  };
  auto lin = [&](const Eigen::VectorXd& theta_contrast, double t) {
    const Eigen::VectorXd c = detail::embed_theta(fit, theta_contrast);
    push(c.dot(fit.mode()), std::sqrt(fit.quadform(c)), t);
  };

  for (double x : grid.exposures)
    for (int l = 0; l <= basis.max_lag; ++l)
      lin(predict_basis_row(x, grid.x0, basis.exposure_knots, basis.lag_knots, l), truth.f(x, l));
  r.lag_rr = flush();

  for (double x : grid.exposures) {
    double t = 0.0;
    for (int l = 0; l <= basis.max_lag; ++l) t += truth.f(x, l);
    lin(overall_contrast(x, grid.x0, basis), t);
  }
  r.overall_rr = flush();

  if (fit.spatial_kind) {
    // Random effects are scored as deviations from their mean: the mean itself is only
    // identified jointly with the intercept, which the incidence metric covers.
    const int J = fit.n_units;
    const bool conv = *fit.spatial_kind == SpatialKind::convolution;
    const double u_bar = truth.u.mean();
    for (int j = 0; j < J; ++j) {
      Eigen::VectorXd c = Eigen::VectorXd::Zero(fit.dim());
      for (int b = 0; b < (conv ? 2 : 1); ++b) {
        c.segment(fit.n_xz() + b * J, J).setConstant(-1.0 / J);
        c[fit.n_xz() + b * J + j] += 1.0;
      }
      push(c.dot(fit.mode()), std::sqrt(fit.quadform(c)), truth.u[j] - u_bar);
    }
    r.re = flush();
    for (const auto& s : incidence_summary(fit, basis, grid.x0, level))
      push(std::log(s.mean), s.sd * widen, truth.beta0 + truth.u[s.unit]);
    r.incidence = flush();
    const auto h = fit.hypers.spatial(*fit.spatial_kind);
    if (h.rho) r.rho_hat = *h.rho;
    if (h.tau) r.var_hat = 1.0 / *h.tau;
  }
  r.converged = fit.converged && fit.outer_converged;
  return r;
}

/// Per-replicate seed derived from the master seed (splitmix64 of master + index).
inline std::uint64_t replicate_seed(std::uint64_t master, std::uint64_t index) {
  std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Simulates, fits and scores one replicate.
inline ReplicateResult run_replicate(const SimulationConfig& cfg, int index, std::uint64_t master_seed,
                                     const FitOptions& fit_options = {}) {
  const auto seed = replicate_seed(master_seed, static_cast<std::uint64_t>(index));
  const Scenario scenario = make_scenario(cfg.scenario, cfg.params, cfg.max_lag);
  ReplicateResult r;
  const auto start = std::chrono::steady_clock::now();
  try {
    const SimulatedPanel sim = simulate_panel(scenario, cfg, seed);
    ModelConfig mc = cfg.model;
    mc.max_lag = cfg.max_lag;
    mc.exposure_lo = scenario.x_lo;
    mc.exposure_hi = scenario.x_hi;
    const BuiltModel model = build_model(sim.panel, mc, sim.graph);
    const LatentFit f = fit(model.spec, fit_options);
    const RiskGrid grid = RiskGrid::regular(scenario.x_lo, scenario.x_hi, 0.25, scenario.x0);
    r = score_replicate(f, model.basis, sim.truth, grid, cfg.level);
  } catch (const Error& e) {
    r.error = e.what();
  }
  r.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  r.replicate = index;
  r.seed = seed;
  return r;
}

/// Runs replicates 0..n-1 on `workers` threads. Results are ordered by replicate index and
/// do not depend on the number of workers.
inline std::vector<ReplicateResult> run_replicates(const SimulationConfig& cfg, int n, std::uint64_t master_seed,
                                                   int workers = 1, const FitOptions& fit_options = {},
                                                   const std::function<void(const ReplicateResult&)>& on_done = {}) {
  if (n < 0) throw Error(ErrorKind::invalid_argument, "replicate count must be nonnegative");
  std::vector<ReplicateResult> out(static_cast<std::size_t>(n));
  std::atomic<int> next{0};
  std::mutex done_mutex;
  auto work = [&] {
    for (int i = next++; i < n; i = next++) {
      out[static_cast<std::size_t>(i)] = run_replicate(cfg, i, master_seed, fit_options);
      if (on_done) {
        std::lock_guard<std::mutex> lock(done_mutex);
        on_done(out[static_cast<std::size_t>(i)]);
      }
    }
  };
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  return out;
}

inline double median(std::vector<double> v) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double d) { return !std::isfinite(d); }), v.end());
  if (v.empty()) return NAN;
  std::sort(v.begin(), v.end());
  const auto m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace dlnmlps

#endif  // DLNMLPS_SIMHARNESS_HPP
