#ifndef DLNMLPS_CROSSBASIS_HPP
#define DLNMLPS_CROSSBASIS_HPP

// Lagged exposure matrices and the distributed-lag cross-basis.
//
// Coefficients are flattened with the lag index fastest: column i * v_l + k of W
// multiplies theta_{ik}, where i runs over exposure basis functions and k over lag
// basis functions. Row r of W equals
//
//     w_r[i * v_l + k] = sum_{l=0..L} bx_i(x_{t-l}) * bl_k(l).

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dlnmlps/basis.hpp"
#include "dlnmlps/error.hpp"
#include "dlnmlps/panel.hpp"

namespace dlnmlps {

struct LagWindow {
  int max_lag = 0;

  Eigen::VectorXd lag_values() const { return Eigen::VectorXd::LinSpaced(max_lag + 1, 0.0, max_lag); }
};

struct UsableRow {
  int unit;
  long t;
  std::size_t panel_row;
};

/// One row per usable observation: (x_t, x_{t-1}, ..., x_{t-L}).
struct LagMatrix {
  LagWindow window;
  Eigen::MatrixXd rows;
  std::vector<UsableRow> usable_index;

  Eigen::Index n_rows() const { return rows.rows(); }
};

inline LagMatrix build_lag_matrix(const PanelData& panel, int max_lag) {
  if (max_lag < 0) throw Error(ErrorKind::invalid_argument, "max lag must be nonnegative");
  panel.validate();
  const auto L = static_cast<std::size_t>(max_lag);
  std::size_t n_usable = 0;
  for (int j = 0; j < panel.n_units(); ++j) {
    const auto len = panel.series_length(j);
    if (len <= L)
      throw Error(ErrorKind::invalid_argument,
                  "series-too-short: unit " + panel.unit_ids[j] + " has " + std::to_string(len) +
                      " observations, need more than max lag " + std::to_string(max_lag));
    n_usable += len - L;
  }
  LagMatrix out;
  out.window.max_lag = max_lag;
  out.rows.resize(static_cast<Eigen::Index>(n_usable), max_lag + 1);
  out.usable_index.reserve(n_usable);
  Eigen::Index r = 0;
  for (int j = 0; j < panel.n_units(); ++j) {
    for (std::size_t row = panel.series_start[j] + L; row < panel.series_start[j + 1]; ++row, ++r) {
      for (std::size_t l = 0; l <= L; ++l) out.rows(r, static_cast<Eigen::Index>(l)) = panel.exposure[static_cast<Eigen::Index>(row - l)];
      out.usable_index.push_back({j, panel.t[row], row});
    }
  }
  return out;
}

struct CrossBasis {
  Eigen::MatrixXd W;
  KnotSet exposure_knots;
  KnotSet lag_knots;
  int v_x = 0;
  int v_l = 0;
  int max_lag = 0;

  int dim() const { return v_x * v_l; }
};

/// Lag basis evaluated once on 0..L, shape (L+1) x v_l.
inline Eigen::MatrixXd lag_basis(const KnotSet& lag_knots, int max_lag) {
  return bspline_eval(LagWindow{max_lag}.lag_values(), lag_knots).values;
}

namespace detail {

// Accumulates sum_l bx(q_l) (x) bl(l) into `out` (length v_x * v_l, zeroed by the caller).
template <typename Row, typename Out>
void accumulate_cross_row(const Row& q, const Eigen::MatrixXd& lag_values, const KnotSet& exposure_knots,
                          const std::vector<double>& full_knots, std::size_t index_for_errors, Out&& out) {
  const int v_l = static_cast<int>(lag_values.cols());
  const int nb = exposure_knots.n_basis();
  double nz[32];
  for (Eigen::Index l = 0; l < q.size(); ++l) {
    const double x = q[l];
    if (!(x >= exposure_knots.lo && x <= exposure_knots.hi))
      throw OutOfDomainError(index_for_errors, x, exposure_knots.lo, exposure_knots.hi);
    const int first = bspline_nonzero(x, full_knots, exposure_knots.degree, nb, std::span<double>(nz, 32));
    for (int a = 0; a <= exposure_knots.degree; ++a) {
      const double bx = nz[a];
      if (bx == 0.0) continue;
      const int base = (first + a) * v_l;
      for (int k = 0; k < v_l; ++k) out[base + k] += bx * lag_values(l, k);
    }
  }
}

}  // namespace detail

inline CrossBasis build_crossbasis(const LagMatrix& lagmat, const KnotSet& exposure_knots, const KnotSet& lag_knots) {
  exposure_knots.validate();
  lag_knots.validate();
  const int L = lagmat.window.max_lag;
  if (lag_knots.lo > 0.0 || lag_knots.hi < L)
    throw Error(ErrorKind::out_of_domain, "lag knots do not cover [0, L]");
  CrossBasis cb;
  cb.exposure_knots = exposure_knots;
  cb.lag_knots = lag_knots;
  cb.v_x = exposure_knots.n_basis();
  cb.v_l = lag_knots.n_basis();
  cb.max_lag = L;
  const Eigen::MatrixXd bl = lag_basis(lag_knots, L);
  const auto t = exposure_knots.full();
  // Filled row-major then copied: each row is written contiguously.
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> w =
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Zero(lagmat.n_rows(), cb.dim());
  for (Eigen::Index r = 0; r < lagmat.n_rows(); ++r) {
    const std::size_t src = lagmat.usable_index.empty() ? static_cast<std::size_t>(r)
                                                        : lagmat.usable_index[static_cast<std::size_t>(r)].panel_row;
    detail::accumulate_cross_row(lagmat.rows.row(r), bl, exposure_knots, t, src, w.row(r));
  }
  cb.W = w;
  return cb;
}

/// Cross-basis row for exposure x held at lag l: bx(x) (x) bl(l), length v_x * v_l.
inline Eigen::VectorXd basis_row(double x, double lag, const KnotSet& exposure_knots, const KnotSet& lag_knots) {
  const Eigen::RowVectorXd bx = bspline_row(x, exposure_knots);
  const Eigen::RowVectorXd bl = bspline_row(lag, lag_knots);
  Eigen::VectorXd out(bx.size() * bl.size());
  for (Eigen::Index i = 0; i < bx.size(); ++i)
    for (Eigen::Index k = 0; k < bl.size(); ++k) out[i * bl.size() + k] = bx[i] * bl[k];
  return out;
}

/// Contrast row (bx(x) - bx(x0)) (x) bl(l) for the lag-specific log relative risk.
inline Eigen::VectorXd predict_basis_row(double x, double x0, const KnotSet& exposure_knots,
                                         const KnotSet& lag_knots, double lag) {
  const Eigen::RowVectorXd dx = bspline_row(x, exposure_knots) - bspline_row(x0, exposure_knots);
  const Eigen::RowVectorXd bl = bspline_row(lag, lag_knots);
  Eigen::VectorXd out(dx.size() * bl.size());
  for (Eigen::Index i = 0; i < dx.size(); ++i)
    for (Eigen::Index k = 0; k < bl.size(); ++k) out[i * bl.size() + k] = dx[i] * bl[k];
  return out;
}

/// Contrast cumulated over lags 0..L (overall log relative risk).
inline Eigen::VectorXd overall_contrast_row(double x, double x0, const KnotSet& exposure_knots,
                                            const KnotSet& lag_knots, int max_lag) {
  const Eigen::RowVectorXd dx = bspline_row(x, exposure_knots) - bspline_row(x0, exposure_knots);
  const Eigen::RowVectorXd bl_sum = lag_basis(lag_knots, max_lag).colwise().sum();
  Eigen::VectorXd out(dx.size() * bl_sum.size());
  for (Eigen::Index i = 0; i < dx.size(); ++i)
    for (Eigen::Index k = 0; k < bl_sum.size(); ++k) out[i * bl_sum.size() + k] = dx[i] * bl_sum[k];
  return out;
}

/// Cross-basis row at constant exposure x over all lags: bx(x) (x) sum_l bl(l).
inline Eigen::VectorXd constant_exposure_row(double x, const KnotSet& exposure_knots, const KnotSet& lag_knots,
                                             int max_lag) {
  const Eigen::RowVectorXd bx = bspline_row(x, exposure_knots);
  const Eigen::RowVectorXd bl_sum = lag_basis(lag_knots, max_lag).colwise().sum();
  Eigen::VectorXd out(bx.size() * bl_sum.size());
  for (Eigen::Index i = 0; i < bx.size(); ++i)
    for (Eigen::Index k = 0; k < bl_sum.size(); ++k) out[i * bl_sum.size() + k] = bx[i] * bl_sum[k];
  return out;
}

}  // namespace dlnmlps

#endif  // DLNMLPS_CROSSBASIS_HPP
