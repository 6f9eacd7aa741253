#ifndef DLNMLPS_BASIS_HPP
#define DLNMLPS_BASIS_HPP

// B-spline and natural cubic spline bases.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dlnmlps/error.hpp"

namespace dlnmlps {

/// Knot grid of a B-spline basis: boundary interval plus interior breakpoints.
/// Clamped sets repeat each boundary degree+1 times in the full knot vector. Extended sets
/// continue the outermost knot spacing past each boundary (P-spline convention), so that
/// equally spaced knots give equally spaced Greville abscissae and the null space of a
/// difference penalty is exactly the polynomials of lower degree.
struct KnotSet {
  std::vector<double> interior;
  double lo = 0.0;
  double hi = 1.0;
  int degree = 3;
  bool extended = false;

  int n_basis() const { return static_cast<int>(interior.size()) + degree + 1; }

  std::vector<double> full() const {
    std::vector<double> t;
    t.reserve(interior.size() + 2 * (degree + 1));
    if (!extended) {
      t.insert(t.end(), degree + 1, lo);
      t.insert(t.end(), interior.begin(), interior.end());
      t.insert(t.end(), degree + 1, hi);
      return t;
    }
    const double h_lo = (interior.empty() ? hi : interior.front()) - lo;
    const double h_hi = hi - (interior.empty() ? lo : interior.back());
    for (int k = degree; k >= 1; --k) t.push_back(lo - k * h_lo);
    t.push_back(lo);
    t.insert(t.end(), interior.begin(), interior.end());
    t.push_back(hi);
    for (int k = 1; k <= degree; ++k) t.push_back(hi + k * h_hi);
    return t;
  }

  void validate() const {
    if (!(lo < hi)) throw Error(ErrorKind::invalid_argument, "invalid-range: knot boundary lo must be < hi");
    if (degree < 0) throw Error(ErrorKind::invalid_argument, "degree must be nonnegative");
    for (std::size_t i = 0; i < interior.size(); ++i) {
      if (!(interior[i] > lo && interior[i] < hi))
        throw Error(ErrorKind::invalid_argument, "interior knot outside (lo, hi)");
      if (i > 0 && interior[i] < interior[i - 1])
        throw Error(ErrorKind::invalid_argument, "interior knots must be nondecreasing");
    }
  }
};

struct BasisMatrix {
  Eigen::MatrixXd values;
  KnotSet domain;

  Eigen::Index columns() const { return values.cols(); }
};

inline KnotSet equidistant_knots(double lo, double hi, int n_basis, int degree = 3) {
  if (!(lo < hi)) throw Error(ErrorKind::invalid_argument, "invalid-range: lo must be < hi");
  if (degree < 0) throw Error(ErrorKind::invalid_argument, "degree must be nonnegative");
  if (n_basis <= degree)
    throw Error(ErrorKind::invalid_argument,
                "too-few-basis: n_basis (" + std::to_string(n_basis) + ") must exceed degree (" +
                    std::to_string(degree) + ")");
  KnotSet knots;
  knots.lo = lo;
  knots.hi = hi;
  knots.degree = degree;
  const int n_interior = n_basis - degree - 1;
  const double step = (hi - lo) / (n_interior + 1);
  for (int i = 1; i <= n_interior; ++i) knots.interior.push_back(lo + i * step);
  return knots;
}

/// Equidistant knots with the spacing continued beyond [lo, hi].
inline KnotSet pspline_knots(double lo, double hi, int n_basis, int degree = 3) {
  KnotSet k = equidistant_knots(lo, hi, n_basis, degree);
  k.extended = true;
  return k;
}

namespace detail {

// Knot span index s with t[s] <= x < t[s+1]; the right boundary maps to the last span.
inline int find_span(double x, const std::vector<double>& t, int degree, int n_basis) {
  if (x >= t[n_basis]) return n_basis - 1;
  auto it = std::upper_bound(t.begin() + degree, t.begin() + n_basis + 1, x);
  return static_cast<int>(it - t.begin()) - 1;
}

}  // namespace detail

/// Evaluates the degree+1 B-splines that are nonzero at x (Cox-de Boor, triangular scheme).
/// Writes them to `out` and returns the index of the first one. `x` must be inside the domain.
inline int bspline_nonzero(double x, const std::vector<double>& t, int degree, int n_basis,
                           std::span<double> out) {
  const int s = detail::find_span(x, t, degree, n_basis);
  double left[32];
  double right[32];
  out[0] = 1.0;
  for (int j = 1; j <= degree; ++j) {
    left[j] = x - t[s + 1 - j];
    right[j] = t[s + j] - x;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      const double denom = right[r + 1] + left[j - r];
      const double temp = denom > 0.0 ? out[r] / denom : 0.0;
      out[r] = saved + right[r + 1] * temp;
      saved = left[j - r] * temp;
    }
    out[j] = saved;
  }
  return s - degree;
}

/// Dense basis evaluation. Points outside [lo, hi] raise OutOfDomainError.
inline BasisMatrix bspline_eval(std::span<const double> points, const KnotSet& knots) {
  knots.validate();
  if (knots.degree > 30) throw Error(ErrorKind::invalid_argument, "degree too large");
  const int nb = knots.n_basis();
  const auto t = knots.full();
  BasisMatrix out{Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(points.size()), nb), knots};
  std::vector<double> nz(knots.degree + 1);
  for (std::size_t r = 0; r < points.size(); ++r) {
    const double x = points[r];
    if (!(x >= knots.lo && x <= knots.hi)) throw OutOfDomainError(r, x, knots.lo, knots.hi);
    const int first = bspline_nonzero(x, t, knots.degree, nb, nz);
    for (int j = 0; j <= knots.degree; ++j) out.values(static_cast<Eigen::Index>(r), first + j) = nz[j];
  }
  return out;
}

inline BasisMatrix bspline_eval(const Eigen::VectorXd& points, const KnotSet& knots) {
  return bspline_eval(std::span<const double>(points.data(), static_cast<std::size_t>(points.size())), knots);
}

/// Row vector of all basis values at a single point.
inline Eigen::RowVectorXd bspline_row(double x, const KnotSet& knots) {
  const double p[1] = {x};
  return bspline_eval(std::span<const double>(p, 1), knots).values.row(0);
}

namespace detail {

// Type-7 sample quantile.
inline double quantile(std::vector<double> sorted, double prob) {
  std::sort(sorted.begin(), sorted.end());
  const double h = (static_cast<double>(sorted.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline double cube_plus(double v) { return v > 0.0 ? v * v * v : 0.0; }

}  // namespace detail

/// Natural cubic spline knots: the boundary pair plus df-1 interior knots at sample quantiles
/// of the points that fall inside the boundary.
inline std::vector<double> natural_cubic_knots(std::span<const double> points, int df,
                                               std::pair<double, double> boundary) {
  if (df < 1) throw Error(ErrorKind::invalid_argument, "df must be >= 1");
  const auto [lo, hi] = boundary;
  if (!(lo < hi)) throw Error(ErrorKind::invalid_argument, "degenerate: boundary lo must be < hi");
  std::vector<double> inside;
  for (double p : points)
    if (p >= lo && p <= hi) inside.push_back(p);
  if (inside.empty()) throw Error(ErrorKind::invalid_argument, "degenerate: no points inside boundary");
  if (std::all_of(inside.begin(), inside.end(), [&](double v) { return v == inside.front(); }))
    throw Error(ErrorKind::invalid_argument, "degenerate: all points equal");
  std::vector<double> knots{lo};
  for (int k = 1; k < df; ++k) knots.push_back(detail::quantile(inside, static_cast<double>(k) / df));
  knots.push_back(hi);
  for (std::size_t k = 1; k < knots.size(); ++k)
    if (!(knots[k] > knots[k - 1]))
      throw Error(ErrorKind::invalid_argument, "degenerate: tied natural spline knots");
  return knots;
}

/// Natural cubic spline basis without intercept, evaluated at `points` with pre-computed knots
/// (boundary knots first and last). Linear beyond the boundary knots.
inline Eigen::MatrixXd natural_cubic_eval_knots(std::span<const double> points,
                                                const std::vector<double>& knots) {
  const double lo = knots.front();
  const double scale = knots.back() - lo;
  std::vector<double> z(knots.size());
  for (std::size_t k = 0; k < knots.size(); ++k) z[k] = (knots[k] - lo) / scale;
  const std::size_t K = z.size();
  const int df = static_cast<int>(K) - 1;
  auto d = [&](std::size_t k, double v) {
    return (detail::cube_plus(v - z[k]) - detail::cube_plus(v - z[K - 1])) / (z[K - 1] - z[k]);
  };
  Eigen::MatrixXd out(static_cast<Eigen::Index>(points.size()), df);
  for (std::size_t r = 0; r < points.size(); ++r) {
    const double v = (points[r] - lo) / scale;
    const auto row = static_cast<Eigen::Index>(r);
    out(row, 0) = v;
    for (std::size_t k = 0; k + 2 < K; ++k) out(row, static_cast<Eigen::Index>(k) + 1) = d(k, v) - d(K - 2, v);
  }
  return out;
}

/// Natural cubic spline basis with `df` columns (no intercept column).
inline BasisMatrix natural_cubic_eval(std::span<const double> points, int df,
                                      std::pair<double, double> boundary) {
  const auto knots = natural_cubic_knots(points, df, boundary);
  BasisMatrix out;
  out.values = natural_cubic_eval_knots(points, knots);
  out.domain.lo = boundary.first;
  out.domain.hi = boundary.second;
  out.domain.degree = 3;
  out.domain.interior.assign(knots.begin() + 1, knots.end() - 1);
  return out;
}

}  // namespace dlnmlps

#endif  // DLNMLPS_BASIS_HPP
