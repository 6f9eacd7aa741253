#ifndef DLNMLPS_PANEL_HPP
#define DLNMLPS_PANEL_HPP

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dlnmlps/error.hpp"

namespace dlnmlps {

/// Long-format panel of counts. Rows are grouped by unit and ordered by time inside each unit;
/// `series_start[j]` .. `series_start[j+1]` is the row range of unit j.
struct PanelData {
  std::vector<std::string> unit_ids;
  std::vector<int> unit;
  std::vector<long> t;
  Eigen::VectorXd y;
  Eigen::VectorXd exposure;
  Eigen::VectorXd offset;  // log population (or any log-exposure term)
  Eigen::MatrixXd covariates;
  std::vector<std::string> covariate_names;
  std::vector<std::size_t> series_start;

  std::size_t n_rows() const { return unit.size(); }
  int n_units() const { return static_cast<int>(unit_ids.size()); }
  std::size_t series_length(int j) const { return series_start[j + 1] - series_start[j]; }

  double exposure_min() const { return exposure.minCoeff(); }
  double exposure_max() const { return exposure.maxCoeff(); }

  /// Checks grouping, contiguity of t inside each unit and column lengths.
  void validate() const {
    const auto n = n_rows();
    if (t.size() != n || static_cast<std::size_t>(y.size()) != n ||
        static_cast<std::size_t>(exposure.size()) != n || static_cast<std::size_t>(offset.size()) != n)
      throw Error(ErrorKind::dimension_mismatch, "panel columns have different lengths");
    if (covariates.size() > 0 && static_cast<std::size_t>(covariates.rows()) != n)
      throw Error(ErrorKind::dimension_mismatch, "covariate rows differ from panel rows");
    if (series_start.size() != unit_ids.size() + 1 || series_start.front() != 0 || series_start.back() != n)
      throw Error(ErrorKind::dimension_mismatch, "series boundaries inconsistent with rows");
    for (int j = 0; j < n_units(); ++j) {
      for (std::size_t r = series_start[j]; r < series_start[j + 1]; ++r) {
        if (unit[r] != j) throw Error(ErrorKind::invalid_argument, "panel rows not grouped by unit");
        if (r > series_start[j] && t[r] != t[r - 1] + 1)
          throw Error(ErrorKind::invalid_argument,
                      "non-contiguous t_index in unit " + unit_ids[j] + " at row " + std::to_string(r));
      }
    }
  }

  /// Rebuilds `series_start` from the `unit` column (rows must already be grouped).
  void index_series() {
    series_start.assign(unit_ids.size() + 1, 0);
    std::size_t r = 0;
    for (int j = 0; j < n_units(); ++j) {
      series_start[j] = r;
      while (r < unit.size() && unit[r] == j) ++r;
    }
    series_start[unit_ids.size()] = r;
  }
};

}  // namespace dlnmlps

#endif  // DLNMLPS_PANEL_HPP
