#ifndef DLNMLPS_MODEL_HPP
#define DLNMLPS_MODEL_HPP

// Panel -> ModelSpec: lag windows, cross-basis, fixed-effect design and random-effect layout.

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dlnmlps/basis.hpp"
#include "dlnmlps/crossbasis.hpp"
#include "dlnmlps/fitengine.hpp"
#include "dlnmlps/panel.hpp"
#include "dlnmlps/penalty.hpp"
#include "dlnmlps/posterior.hpp"
#include "dlnmlps/spatial.hpp"

namespace dlnmlps {

struct ModelConfig {
  int v_x = 10;
  int v_l = 10;
  int max_lag = 7;
  int degree = 3;
  int diff_order = 2;
  bool ridge = true;
  double jitter = 1e-12;
  bool intercept = true;
  std::optional<SpatialKind> spatial;
  PriorConstants prior;
  // Exposure basis range; defaults to the pooled observed range.
  std::optional<double> exposure_lo;
  std::optional<double> exposure_hi;
};

struct BuiltModel {
  ModelSpec spec;
  DlnmBasis basis;
  std::vector<UsableRow> rows;  // likelihood row -> panel row
};

inline BuiltModel build_model(const PanelData& panel, const ModelConfig& cfg,
                              const std::optional<AdjacencyGraph>& graph = std::nullopt) {
  panel.validate();
  const LagMatrix lagmat = build_lag_matrix(panel, cfg.max_lag);
  const double lo = cfg.exposure_lo.value_or(panel.exposure_min());
  const double hi = cfg.exposure_hi.value_or(panel.exposure_max());
  if (!(lo < hi)) throw Error(ErrorKind::invalid_argument, "exposure range is degenerate; cannot place knots");
  const KnotSet ek = pspline_knots(lo, hi, cfg.v_x, cfg.degree);
  const KnotSet lk = pspline_knots(0.0, std::max(cfg.max_lag, 1), cfg.v_l, cfg.degree);
  CrossBasis cb = build_crossbasis(lagmat, ek, lk);

  const auto n = lagmat.n_rows();
  const int n_cov = static_cast<int>(panel.covariates.cols());
  Eigen::MatrixXd z(n, (cfg.intercept ? 1 : 0) + n_cov);
  Eigen::VectorXd y(n), offset(n);
  std::vector<int> unit(static_cast<std::size_t>(n));
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto src = static_cast<Eigen::Index>(lagmat.usable_index[static_cast<std::size_t>(r)].panel_row);
    Eigen::Index c = 0;
    if (cfg.intercept) z(r, c++) = 1.0;
    for (int k = 0; k < n_cov; ++k) z(r, c++) = panel.covariates(src, k);
    y[r] = panel.y[src];
    offset[r] = panel.offset[src];
    unit[static_cast<std::size_t>(r)] = panel.unit[static_cast<std::size_t>(src)];
  }

  std::optional<SpatialStructure> spatial;
  if (cfg.spatial) {
    if (!graph) throw Error(ErrorKind::invalid_argument, "spatial prior requested without an adjacency graph");
    if (graph->n_units != panel.n_units())
      throw Error(ErrorKind::dimension_mismatch, "adjacency has " + std::to_string(graph->n_units) +
                                                     " units, panel has " + std::to_string(panel.n_units()));
    spatial.emplace(*cfg.spatial, *graph);
  }

  BuiltModel out;
  out.basis = DlnmBasis::of(cb);
  out.spec = make_model_spec(z, cb.W, std::move(y), std::move(offset), std::move(unit),
                             make_dlnm_penalty(cb.v_x, cb.v_l, cfg.diff_order, cfg.jitter, cfg.ridge),
                             std::move(spatial), cfg.prior);
  if (cfg.intercept) out.spec.fixed_names.push_back("intercept");
  for (const auto& name : panel.covariate_names) out.spec.fixed_names.push_back(name);
  out.rows = lagmat.usable_index;
  return out;
}

}  // namespace dlnmlps

#endif  // DLNMLPS_MODEL_HPP
