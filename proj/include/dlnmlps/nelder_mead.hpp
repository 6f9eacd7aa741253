#ifndef DLNMLPS_NELDER_MEAD_HPP
#define DLNMLPS_NELDER_MEAD_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

namespace dlnmlps {

struct NelderMeadOptions {
  double initial_step = 1.0;
  double diameter_tol = 1e-4;  // max distance of any vertex from the best one
  double spread_tol = 1e-6;    // max |f(vertex) - f(best)|
  int max_evals = 2000;
};

struct NelderMeadResult {
  Eigen::VectorXd argmin;
  double value = std::numeric_limits<double>::infinity();
  int evals = 0;
  bool converged = false;
  std::vector<Eigen::VectorXd> simplex;
  std::vector<double> simplex_values;
};

/// Minimises f by the Nelder-Mead simplex method with standard coefficients
/// (reflection 1, expansion 2, contraction 1/2, shrink 1/2). Non-finite values are
/// treated as +infinity. Stops when both the simplex diameter and the spread of
/// objective values are below tolerance, or when the evaluation budget is spent.
inline NelderMeadResult nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f,
                                    const Eigen::VectorXd& start, const NelderMeadOptions& opt = {}) {
  const Eigen::Index n = start.size();
  NelderMeadResult res;
  auto eval = [&](const Eigen::VectorXd& x) {
    ++res.evals;
    const double v = f(x);
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  };

  std::vector<Eigen::VectorXd> pts(n + 1, start);
  std::vector<double> vals(n + 1);
  vals[0] = eval(start);
  for (Eigen::Index i = 0; i < n; ++i) {
    pts[i + 1][i] += opt.initial_step;
    vals[i + 1] = eval(pts[i + 1]);
  }
  std::vector<std::size_t> order(n + 1);

  auto sort_simplex = [&] {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return vals[a] < vals[b]; });
    std::vector<Eigen::VectorXd> p2;
    std::vector<double> v2;
    for (auto i : order) {
      p2.push_back(pts[i]);
      v2.push_back(vals[i]);
    }
    pts.swap(p2);
    vals.swap(v2);
  };

  auto converged = [&] {
    double diameter = 0.0;
    double spread = 0.0;
    for (Eigen::Index i = 1; i <= n; ++i) {
      diameter = std::max(diameter, (pts[i] - pts[0]).cwiseAbs().maxCoeff());
      spread = std::max(spread, std::abs(vals[i] - vals[0]));
    }
    return diameter < opt.diameter_tol && spread < opt.spread_tol;
  };

  sort_simplex();
  while (n > 0 && !(res.converged = converged()) && res.evals < opt.max_evals) {
    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
    for (Eigen::Index i = 0; i < n; ++i) centroid += pts[i];
    centroid /= static_cast<double>(n);

    const Eigen::VectorXd xr = centroid + (centroid - pts[n]);
    const double fr = eval(xr);
    if (fr < vals[0]) {
      const Eigen::VectorXd xe = centroid + 2.0 * (centroid - pts[n]);
      const double fe = eval(xe);
      if (fe < fr) {
        pts[n] = xe;
        vals[n] = fe;
      } else {
        pts[n] = xr;
        vals[n] = fr;
      }
    } else if (fr < vals[n - 1]) {
      pts[n] = xr;
      vals[n] = fr;
    } else {
      const bool outside = fr < vals[n];
      const Eigen::VectorXd xc = outside ? Eigen::VectorXd(centroid + 0.5 * (xr - centroid))
                                         : Eigen::VectorXd(centroid + 0.5 * (pts[n] - centroid));
      const double fc = eval(xc);
      if (fc < (outside ? fr : vals[n])) {
        pts[n] = xc;
        vals[n] = fc;
      } else {
        for (Eigen::Index i = 1; i <= n; ++i) {
          pts[i] = pts[0] + 0.5 * (pts[i] - pts[0]);
          vals[i] = eval(pts[i]);
        }
      }
    }
    sort_simplex();
  }
  if (n == 0) res.converged = true;
  res.argmin = pts[0];
  res.value = vals[0];
  res.simplex = pts;
  res.simplex_values = vals;
  return res;
}

}  // namespace dlnmlps

#endif  // DLNMLPS_NELDER_MEAD_HPP
