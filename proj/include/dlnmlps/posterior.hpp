#ifndef DLNMLPS_POSTERIOR_HPP
#define DLNMLPS_POSTERIOR_HPP

// Epidemiological summaries of a Laplace fit: relative risks, attributable fractions,
// exceedance probabilities and random-effect maps.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include "dlnmlps/crossbasis.hpp"
#include "dlnmlps/error.hpp"
#include "dlnmlps/fitengine.hpp"
#include "dlnmlps/panel.hpp"

namespace dlnmlps {

/// The exposure and lag bases a fit was built with.
struct DlnmBasis {
  KnotSet exposure_knots;
  KnotSet lag_knots;
  int max_lag = 0;

  static DlnmBasis of(const CrossBasis& cb) { return {cb.exposure_knots, cb.lag_knots, cb.max_lag}; }
  int dim() const { return exposure_knots.n_basis() * lag_knots.n_basis(); }
};

struct RiskGrid {
  std::vector<double> exposures;
  double x0 = 0.0;

  /// lo, lo+step, ..., hi.
  static RiskGrid regular(double lo, double hi, double step, double x0) {
    RiskGrid g;
    g.x0 = x0;
    const auto n = static_cast<int>(std::floor((hi - lo) / step + 1e-9));
    for (int i = 0; i <= n; ++i) g.exposures.push_back(lo + i * step);
    return g;
  }
};

struct RiskPoint {
  double x = 0.0;
  double point = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

inline double normal_quantile(double p) { return boost::math::quantile(boost::math::normal(), p); }
inline double normal_cdf(double z) { return boost::math::cdf(boost::math::normal(), z); }

namespace detail {

// Embeds a theta-space contrast into xi-space.
inline Eigen::VectorXd embed_theta(const LatentFit& fit, const Eigen::VectorXd& c) {
  if (c.size() != fit.n_theta) throw Error(ErrorKind::dimension_mismatch, "contrast length differs from theta");
  Eigen::VectorXd full = Eigen::VectorXd::Zero(fit.dim());
  full.segment(fit.n_fixed, fit.n_theta) = c;
  return full;
}

inline void check_grid(const RiskGrid& grid, const DlnmBasis& basis) {
  const auto& k = basis.exposure_knots;
  if (!(grid.x0 >= k.lo && grid.x0 <= k.hi)) throw OutOfDomainError(0, grid.x0, k.lo, k.hi);
  for (std::size_t i = 0; i < grid.exposures.size(); ++i)
    if (!(grid.exposures[i] >= k.lo && grid.exposures[i] <= k.hi))
      throw OutOfDomainError(i, grid.exposures[i], k.lo, k.hi);
}

inline RiskPoint gaussian_exp_interval(double x, double mean, double sd, double level) {
  const double z = normal_quantile(0.5 + level / 2.0);
  return {x, std::exp(mean), std::exp(mean - z * sd), std::exp(mean + z * sd)};
}

}  // namespace detail

/// Contrast of a lag history against a constant history at x0:
/// sum_l (bx(x_{t-l}) - bx(x0)) (x) bl(l). Exactly zero when every entry equals x0.
inline Eigen::VectorXd lag_history_contrast(const Eigen::VectorXd& history, double x0, const DlnmBasis& basis) {
  if (history.size() != basis.max_lag + 1)
    throw Error(ErrorKind::dimension_mismatch, "lag history must have L+1 entries");
  const Eigen::MatrixXd bl = lag_basis(basis.lag_knots, basis.max_lag);
  const Eigen::RowVectorXd b0 = bspline_row(x0, basis.exposure_knots);
  const auto v_l = bl.cols();
  Eigen::VectorXd out = Eigen::VectorXd::Zero(b0.size() * v_l);
  for (Eigen::Index l = 0; l < history.size(); ++l) {
    const Eigen::RowVectorXd dx = bspline_row(history[l], basis.exposure_knots) - b0;
    for (Eigen::Index i = 0; i < dx.size(); ++i)
      if (dx[i] != 0.0) out.segment(i * v_l, v_l) += dx[i] * bl.row(l).transpose();
  }
  return out;
}

/// Log relative risk contrast at exposure x cumulated over all lags.
inline Eigen::VectorXd overall_contrast(double x, double x0, const DlnmBasis& basis) {
  return lag_history_contrast(Eigen::VectorXd::Constant(basis.max_lag + 1, x), x0, basis);
}

struct PosteriorDraws {
  Eigen::MatrixXd samples;  // n_draws x dim(xi)
  std::uint64_t seed = 0;

  Eigen::Index size() const { return samples.rows(); }
};

/// Draws from N(mode, Sigma) using the supplied standard-normal matrix (n_draws x dim).
inline PosteriorDraws draw_latent(const LatentFit& fit, const Eigen::MatrixXd& z) {
  if (z.cols() != fit.dim()) throw Error(ErrorKind::dimension_mismatch, "noise matrix has wrong width");
  PosteriorDraws d;
  d.samples.resize(z.rows(), fit.dim());
  for (Eigen::Index r = 0; r < z.rows(); ++r) d.samples.row(r) = fit.sample(z.row(r).transpose()).transpose();
  return d;
}

inline PosteriorDraws draw_latent(const LatentFit& fit, int n, std::uint64_t seed) {
  if (n < 1) throw Error(ErrorKind::invalid_argument, "number of draws must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd z(n, fit.dim());
  for (Eigen::Index r = 0; r < z.rows(); ++r)
    for (Eigen::Index c = 0; c < z.cols(); ++c) z(r, c) = normal(rng);
  PosteriorDraws d = draw_latent(fit, z);
  d.seed = seed;
  return d;
}

/// Lag-specific relative risk at lag l with Gaussian credible interval at `level`.
inline std::vector<RiskPoint> rr_lag(const LatentFit& fit, const DlnmBasis& basis, const RiskGrid& grid, double lag,
                                     double level = 0.95) {
  detail::check_grid(grid, basis);
  if (lag < 0 || lag > basis.max_lag) throw Error(ErrorKind::out_of_domain, "lag outside [0, L]");
  std::vector<RiskPoint> out;
  for (double x : grid.exposures) {
    const Eigen::VectorXd c =
        detail::embed_theta(fit, predict_basis_row(x, grid.x0, basis.exposure_knots, basis.lag_knots, lag));
    out.push_back(detail::gaussian_exp_interval(x, c.dot(fit.mode()), std::sqrt(fit.quadform(c)), level));
  }
  return out;
}

/// Overall (lag-cumulated) relative risk.
inline std::vector<RiskPoint> rr_overall(const LatentFit& fit, const DlnmBasis& basis, const RiskGrid& grid,
                                         double level = 0.95) {
  detail::check_grid(grid, basis);
  std::vector<RiskPoint> out;
  for (double x : grid.exposures) {
    const Eigen::VectorXd c = detail::embed_theta(fit, overall_contrast(x, grid.x0, basis));
    out.push_back(detail::gaussian_exp_interval(x, c.dot(fit.mode()), std::sqrt(fit.quadform(c)), level));
  }
  return out;
}

/// Forward attributable fraction: exposure x_t held over all future lags.
inline double af_forward(const Eigen::VectorXd& theta, const DlnmBasis& basis, const std::vector<double>& x,
                         std::size_t t, double x0) {
  if (t >= x.size()) throw Error(ErrorKind::out_of_domain, "time index outside the series");
  const Eigen::VectorXd c = overall_contrast(x[t], x0, basis);
  return 1.0 - std::exp(-c.dot(theta));
}

/// Backward attributable fraction: the exposure history x_t, ..., x_{t-L}.
inline double af_backward(const Eigen::VectorXd& theta, const DlnmBasis& basis, const std::vector<double>& x,
                          std::size_t t, double x0) {
  if (t >= x.size()) throw Error(ErrorKind::out_of_domain, "time index outside the series");
  if (t < static_cast<std::size_t>(basis.max_lag))
    throw Error(ErrorKind::out_of_domain, "insufficient history for backward attributable fraction");
  Eigen::VectorXd hist(basis.max_lag + 1);
  for (int l = 0; l <= basis.max_lag; ++l) hist[l] = x[t - static_cast<std::size_t>(l)];
  return 1.0 - std::exp(-lag_history_contrast(hist, x0, basis).dot(theta));
}

inline double af_forward(const LatentFit& fit, const DlnmBasis& basis, const std::vector<double>& x, std::size_t t,
                         double x0) {
  return af_forward(fit.theta(), basis, x, t, x0);
}

inline double af_backward(const LatentFit& fit, const DlnmBasis& basis, const std::vector<double>& x, std::size_t t,
                          double x0) {
  return af_backward(fit.theta(), basis, x, t, x0);
}

/// P(overall RR > threshold) per grid exposure, by Monte Carlo over the draws.
inline std::vector<double> exceedance_rr(const LatentFit& fit, const DlnmBasis& basis, const RiskGrid& grid,
                                         const PosteriorDraws& draws, double threshold = 1.0) {
  detail::check_grid(grid, basis);
  std::vector<double> out;
  for (double x : grid.exposures) {
    const Eigen::VectorXd c = detail::embed_theta(fit, overall_contrast(x, grid.x0, basis));
    const Eigen::VectorXd lin = draws.samples * c;
    const auto hits = (lin.array().exp() > threshold).count();
    out.push_back(static_cast<double>(hits) / static_cast<double>(draws.size()));
  }
  return out;
}

/// Closed time window of t_index values, inclusive.
struct TimeWindow {
  long first = 0;
  long last = 0;
};

/// Per-unit probability that the window-aggregated backward attributable fraction
/// sum_t AF_b(t) y_t / sum_t y_t exceeds `threshold`. Units with no events in the window
/// use the unweighted mean of AF_b. Time points without a full lag history are skipped.
inline std::vector<double> exceedance_af(const LatentFit& fit, const DlnmBasis& basis, const PanelData& panel,
                                         TimeWindow window, double x0, const PosteriorDraws& draws,
                                         double threshold = 0.0) {
  const Eigen::MatrixXd theta_draws = draws.samples.middleCols(fit.n_fixed, fit.n_theta);
  std::vector<double> out(static_cast<std::size_t>(panel.n_units()), 0.0);
  bool any = false;
  for (int j = 0; j < panel.n_units(); ++j) {
    const std::size_t first = panel.series_start[j] + static_cast<std::size_t>(basis.max_lag);
    std::vector<Eigen::VectorXd> rows;
    std::vector<double> counts;
    for (std::size_t r = first; r < panel.series_start[j + 1]; ++r) {
      if (panel.t[r] < window.first || panel.t[r] > window.last) continue;
      Eigen::VectorXd hist(basis.max_lag + 1);
      for (int l = 0; l <= basis.max_lag; ++l) hist[l] = panel.exposure[static_cast<Eigen::Index>(r) - l];
      rows.push_back(lag_history_contrast(hist, x0, basis));
      counts.push_back(panel.y[static_cast<Eigen::Index>(r)]);
    }
    if (rows.empty()) continue;
    any = true;
    Eigen::MatrixXd c(static_cast<Eigen::Index>(rows.size()), fit.n_theta);
    for (std::size_t i = 0; i < rows.size(); ++i) c.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    Eigen::VectorXd w = Eigen::Map<Eigen::VectorXd>(counts.data(), static_cast<Eigen::Index>(counts.size()));
    if (w.sum() <= 0.0) w.setOnes();
    w /= w.sum();
    const Eigen::MatrixXd af = 1.0 - (-(c * theta_draws.transpose())).array().exp();  // rows: t, cols: draws
    const Eigen::VectorXd agg = af.transpose() * w;
    out[static_cast<std::size_t>(j)] =
        static_cast<double>((agg.array() > threshold).count()) / static_cast<double>(draws.size());
  }
  if (!any) throw Error(ErrorKind::invalid_argument, "empty window: no time points with full lag history");
  return out;
}

struct UnitSummary {
  int unit = 0;
  double mean = 0.0;
  double sd = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

/// Marginal Gaussian summaries of the random effect of each unit (u1 + u2 for convolution).
inline std::vector<UnitSummary> random_effect_summary(const LatentFit& fit, double level = 0.95) {
  if (!fit.spatial_kind || fit.n_units == 0) throw Error(ErrorKind::invalid_argument, "model has no random effects");
  const double z = normal_quantile(0.5 + level / 2.0);
  std::vector<UnitSummary> out;
  const int base = fit.n_xz();
  for (int j = 0; j < fit.n_units; ++j) {
    Eigen::VectorXd c = Eigen::VectorXd::Zero(fit.dim());
    c[base + j] = 1.0;
    if (*fit.spatial_kind == SpatialKind::convolution) c[base + fit.n_units + j] = 1.0;
    const double m = c.dot(fit.mode());
    const double sd = std::sqrt(fit.quadform(c));
    out.push_back({j, m, sd, m - z * sd, m + z * sd});
  }
  return out;
}

/// Baseline incidence per unit at constant reference exposure x0: exp(beta0 + w_ref theta + u_j),
/// with the interval computed on the log scale. Requires an intercept in column 0.
inline std::vector<UnitSummary> incidence_summary(const LatentFit& fit, const DlnmBasis& basis, double x0,
                                                  double level = 0.95) {
  const double z = normal_quantile(0.5 + level / 2.0);
  const Eigen::VectorXd ref = constant_exposure_row(x0, basis.exposure_knots, basis.lag_knots, basis.max_lag);
  std::vector<UnitSummary> out;
  const int n = std::max(fit.n_units, 1);
  for (int j = 0; j < n; ++j) {
    Eigen::VectorXd c = detail::embed_theta(fit, ref);
    c[0] = 1.0;
    if (fit.spatial_kind) {
      c[fit.n_xz() + j] = 1.0;
      if (*fit.spatial_kind == SpatialKind::convolution) c[fit.n_xz() + fit.n_units + j] = 1.0;
    }
    const double m = c.dot(fit.mode());
    const double sd = std::sqrt(fit.quadform(c));
    out.push_back({j, std::exp(m), sd, std::exp(m - z * sd), std::exp(m + z * sd)});
  }
  return out;
}

}  // namespace dlnmlps

#endif  // DLNMLPS_POSTERIOR_HPP
