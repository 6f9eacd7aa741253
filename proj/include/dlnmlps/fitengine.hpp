#ifndef DLNMLPS_FITENGINE_HPP
#define DLNMLPS_FITENGINE_HPP

// Laplace-approximate inference for the Poisson DLNM with spatial random effects.
//
// Latent vector xi = (beta, theta, u) with linear predictor
//     log(mu) = Z beta + W theta + M u + offset
// and Gaussian prior precision Q = blkdiag(zeta I, P(lambda), G). For fixed
// hyperparameters the conditional posterior of xi is approximated by a Gaussian at its
// mode (Newton-Raphson). The hyperparameters are then set to the maximiser of the
// Laplace-approximate marginal posterior on the log / logit scale.

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "dlnmlps/crossbasis.hpp"
#include "dlnmlps/error.hpp"
#include "dlnmlps/nelder_mead.hpp"
#include "dlnmlps/penalty.hpp"
#include "dlnmlps/spatial.hpp"

namespace dlnmlps {

/// Gamma-Gamma robust prior constants (shared by all precision hyperparameters) and the
/// fixed-effect prior precision zeta.
struct PriorConstants {
  double nu = 3.0;
  double zeta = 1e-5;
  double a = 1e-5;
  double b = 1e-5;
};

struct ModelSpec {
  Eigen::VectorXd y;
  Eigen::VectorXd offset;
  Eigen::MatrixXd design;  // [Z : W]
  int n_fixed = 0;
  std::vector<int> unit;  // row -> spatial unit, the incidence matrix M
  PenaltyAssembly penalty;
  std::optional<SpatialStructure> spatial;
  PriorConstants prior;
  std::vector<std::string> fixed_names;

  Eigen::Index n_obs() const { return y.size(); }
  int n_theta() const { return static_cast<int>(design.cols()) - n_fixed; }
  int n_units() const { return spatial ? spatial->n_units() : 0; }
  int n_u() const { return spatial ? spatial->latent_dim() : 0; }
  int n_xz() const { return static_cast<int>(design.cols()); }
  int dim() const { return n_xz() + n_u(); }
  auto Z() const { return design.leftCols(n_fixed); }
  auto W() const { return design.rightCols(n_theta()); }

  bool has_intercept() const { return n_fixed > 0 && (design.col(0).array() == 1.0).all(); }

  void validate() const {
    const auto n = n_obs();
    if (offset.size() != n || design.rows() != n)
      throw Error(ErrorKind::dimension_mismatch, "rows of Z, W and offset must equal length of y");
    if (n_fixed < 0 || n_fixed > design.cols()) throw Error(ErrorKind::dimension_mismatch, "bad fixed-effect count");
    if (penalty.dim() != n_theta())
      throw Error(ErrorKind::dimension_mismatch, "penalty dimension differs from cross-basis columns");
    if (spatial) {
      if (static_cast<Eigen::Index>(unit.size()) != n)
        throw Error(ErrorKind::dimension_mismatch, "rows of M must equal length of y");
      for (int j : unit)
        if (j < 0 || j >= spatial->n_units()) throw Error(ErrorKind::dimension_mismatch, "unit index out of range");
    }
    if ((y.array() < 0.0).any()) throw Error(ErrorKind::invalid_argument, "counts must be nonnegative");
  }
};

/// Assembles a model from a fixed-effect design, a cross-basis and the random-effect layout.
inline ModelSpec make_model_spec(const Eigen::MatrixXd& Z, const Eigen::MatrixXd& W, Eigen::VectorXd y,
                                 Eigen::VectorXd offset, std::vector<int> unit, PenaltyAssembly penalty,
                                 std::optional<SpatialStructure> spatial, PriorConstants prior = {}) {
  if (Z.rows() != W.rows()) throw Error(ErrorKind::dimension_mismatch, "Z and W row counts differ");
  ModelSpec spec;
  spec.design.resize(Z.rows(), Z.cols() + W.cols());
  spec.design << Z, W;
  spec.n_fixed = static_cast<int>(Z.cols());
  spec.y = std::move(y);
  spec.offset = std::move(offset);
  spec.unit = std::move(unit);
  spec.penalty = std::move(penalty);
  spec.spatial = std::move(spatial);
  spec.prior = prior;
  spec.validate();
  return spec;
}

inline int n_omega(SpatialKind kind) {
  return kind == SpatialKind::independent || kind == SpatialKind::icar ? 1 : 2;
}

inline double logistic(double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); }
inline double softplus(double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

/// Transformed hyperparameters. v_lambda holds log penalties (one per penalty component);
/// v_omega is (log tau) for independent/ICAR, (log tau1, log tau2) for convolution and
/// (log tau, logit rho) for Leroux.
struct HyperVector {
  Eigen::VectorXd v_lambda;
  Eigen::VectorXd v_omega;

  static HyperVector zeros(const ModelSpec& spec) {
    return {Eigen::VectorXd::Zero(static_cast<Eigen::Index>(spec.penalty.size())),
            Eigen::VectorXd::Zero(spec.spatial ? n_omega(spec.spatial->kind()) : 0)};
  }

  static HyperVector unflatten(const ModelSpec& spec, const Eigen::VectorXd& v) {
    const auto nl = static_cast<Eigen::Index>(spec.penalty.size());
    const Eigen::Index no = spec.spatial ? n_omega(spec.spatial->kind()) : 0;
    if (v.size() != nl + no) throw Error(ErrorKind::dimension_mismatch, "hyperparameter vector has wrong length");
    return {v.head(nl), v.tail(no)};
  }

  Eigen::VectorXd flat() const {
    Eigen::VectorXd v(v_lambda.size() + v_omega.size());
    v << v_lambda, v_omega;
    return v;
  }

  Eigen::VectorXd lambda() const { return v_lambda.array().exp(); }

  SpatialHypers spatial(SpatialKind kind) const {
    SpatialHypers h;
    switch (kind) {
      case SpatialKind::independent:
      case SpatialKind::icar: h.tau = std::exp(v_omega[0]); break;
      case SpatialKind::convolution:
        h.tau1 = std::exp(v_omega[0]);
        h.tau2 = std::exp(v_omega[1]);
        break;
      case SpatialKind::leroux:
        h.tau = std::exp(v_omega[0]);
        h.rho = logistic(v_omega[1]);
        break;
    }
    return h;
  }

  static std::vector<std::string> names(const ModelSpec& spec) {
    std::vector<std::string> out;
    for (const auto& c : spec.penalty.components()) out.push_back("log_lambda_" + c.name);
    if (spec.spatial) {
      switch (spec.spatial->kind()) {
        case SpatialKind::independent:
        case SpatialKind::icar: out.push_back("log_tau"); break;
        case SpatialKind::convolution:
          out.push_back("log_tau1");
          out.push_back("log_tau2");
          break;
        case SpatialKind::leroux:
          out.push_back("log_tau");
          out.push_back("logit_rho");
          break;
      }
    }
    return out;
  }
};

/// Q = blkdiag(zeta I, P(lambda), G).
inline Eigen::SparseMatrix<double> build_Q(const ModelSpec& spec, const HyperVector& v) {
  if (static_cast<std::size_t>(v.v_lambda.size()) != spec.penalty.size())
    throw Error(ErrorKind::dimension_mismatch, "penalty hyperparameter count mismatch");
  const int d = spec.dim();
  std::vector<Eigen::Triplet<double>> trip;
  for (int i = 0; i < spec.n_fixed; ++i) trip.emplace_back(i, i, spec.prior.zeta);
  if (spec.n_theta() > 0) {
    const Eigen::MatrixXd p = assemble_penalty(spec.penalty, v.lambda());
    for (int j = 0; j < p.cols(); ++j)
      for (int i = 0; i < p.rows(); ++i)
        if (p(i, j) != 0.0) trip.emplace_back(spec.n_fixed + i, spec.n_fixed + j, p(i, j));
  }
  if (spec.spatial) {
    const auto g = precision(*spec.spatial, v.spatial(spec.spatial->kind()));
    for (int k = 0; k < g.outerSize(); ++k)
      for (Eigen::SparseMatrix<double>::InnerIterator it(g, k); it; ++it)
        trip.emplace_back(spec.n_xz() + it.row(), spec.n_xz() + it.col(), it.value());
  }
  Eigen::SparseMatrix<double> q(d, d);
  q.setFromTriplets(trip.begin(), trip.end());
  return q;
}

/// Z beta + W theta + M u + offset.
inline Eigen::VectorXd linear_predictor(const ModelSpec& spec, const Eigen::VectorXd& xi) {
  Eigen::VectorXd eta = spec.offset;
  if (spec.n_xz() > 0) eta.noalias() += spec.design * xi.head(spec.n_xz());
  if (spec.spatial) {
    const int base = spec.n_xz();
    const int J = spec.n_units();
    const bool conv = spec.spatial->kind() == SpatialKind::convolution;
    for (Eigen::Index r = 0; r < eta.size(); ++r) {
      const int j = spec.unit[static_cast<std::size_t>(r)];
      eta[r] += xi[base + j];
      if (conv) eta[r] += xi[base + J + j];
    }
  }
  return eta;
}

/// Linear predictors above this value are treated as overflow.
inline constexpr double kEtaOverflow = 700.0;

/// Poisson log likelihood sum(y * eta - mu) up to a constant; -inf on overflow.
inline double poisson_loglik(const ModelSpec& spec, const Eigen::VectorXd& eta) {
  if ((eta.array() > kEtaOverflow).any() || !eta.allFinite()) return -std::numeric_limits<double>::infinity();
  return (spec.y.array() * eta.array() - eta.array().exp()).sum();
}

inline double log_cond_posterior(const Eigen::VectorXd& xi, const ModelSpec& spec, const Eigen::SparseMatrix<double>& Q) {
  const double ll = poisson_loglik(spec, linear_predictor(spec, xi));
  if (!std::isfinite(ll)) return ll;
  return ll - 0.5 * xi.dot(Q * xi);
}

namespace detail {

// H'r for a residual-type vector r.
inline Eigen::VectorXd design_transpose_times(const ModelSpec& spec, const Eigen::VectorXd& r) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(spec.dim());
  if (spec.n_xz() > 0) out.head(spec.n_xz()).noalias() = spec.design.transpose() * r;
  if (spec.spatial) {
    const int base = spec.n_xz();
    const int J = spec.n_units();
    for (Eigen::Index i = 0; i < r.size(); ++i) out[base + spec.unit[static_cast<std::size_t>(i)]] += r[i];
    if (spec.spatial->kind() == SpatialKind::convolution) out.segment(base + J, J) = out.segment(base, J);
  }
  return out;
}

}  // namespace detail

/// H'(y - mu) - Q xi.
inline Eigen::VectorXd gradient(const Eigen::VectorXd& xi, const ModelSpec& spec, const Eigen::SparseMatrix<double>& Q) {
  const Eigen::VectorXd eta = linear_predictor(spec, xi);
  if ((eta.array() > kEtaOverflow).any())
    throw Error(ErrorKind::out_of_domain, "linear predictor overflow in gradient");
  const Eigen::VectorXd resid = spec.y - eta.array().exp().matrix();
  return detail::design_transpose_times(spec, resid) - Q * xi;
}

/// H' diag(mu) H, dense.
inline Eigen::MatrixXd data_information(const ModelSpec& spec, const Eigen::VectorXd& mu) {
  const int d = spec.dim();
  const int q = spec.n_xz();
  Eigen::MatrixXd info = Eigen::MatrixXd::Zero(d, d);
  if (q > 0) {
    const Eigen::MatrixXd xs = spec.design.array().colwise() * mu.array().sqrt();
    info.topLeftCorner(q, q).selfadjointView<Eigen::Lower>().rankUpdate(xs.transpose());
    info.topLeftCorner(q, q).triangularView<Eigen::StrictlyUpper>() =
        info.topLeftCorner(q, q).transpose().triangularView<Eigen::StrictlyUpper>();
  }
  if (spec.spatial) {
    const int J = spec.n_units();
    Eigen::MatrixXd cross = Eigen::MatrixXd::Zero(q, J);
    Eigen::VectorXd diag = Eigen::VectorXd::Zero(J);
    // Rows are usually grouped by unit; accumulate over runs of equal unit.
    Eigen::Index r = 0;
    const Eigen::Index n = spec.n_obs();
    while (r < n) {
      const int j = spec.unit[static_cast<std::size_t>(r)];
      Eigen::Index e = r;
      while (e < n && spec.unit[static_cast<std::size_t>(e)] == j) ++e;
      if (q > 0) cross.col(j).noalias() += spec.design.middleRows(r, e - r).transpose() * mu.segment(r, e - r);
      diag[j] += mu.segment(r, e - r).sum();
      r = e;
    }
    info.block(0, q, q, J) = cross;
    info.block(q, 0, J, q) = cross.transpose();
    info.block(q, q, J, J).diagonal() = diag;
    if (spec.spatial->kind() == SpatialKind::convolution) {
      info.block(0, q + J, q, J) = cross;
      info.block(q + J, 0, J, q) = cross.transpose();
      info.block(q + J, q + J, J, J).diagonal() = diag;
      info.block(q, q + J, J, J).diagonal() = diag;
      info.block(q + J, q, J, J).diagonal() = diag;
    }
  }
  return info;
}

inline void add_sparse(Eigen::MatrixXd& dense, const Eigen::SparseMatrix<double>& s) {
  for (int k = 0; k < s.outerSize(); ++k)
    for (Eigen::SparseMatrix<double>::InnerIterator it(s, k); it; ++it) dense(it.row(), it.col()) += it.value();
}

/// Hessian of the log conditional posterior: -(H'VH + Q).
inline Eigen::MatrixXd hessian(const Eigen::VectorXd& xi, const ModelSpec& spec, const Eigen::SparseMatrix<double>& Q) {
  const Eigen::VectorXd eta = linear_predictor(spec, xi);
  if ((eta.array() > kEtaOverflow).any())
    throw Error(ErrorKind::out_of_domain, "linear predictor overflow in hessian");
  Eigen::MatrixXd h = data_information(spec, eta.array().exp().matrix());
  add_sparse(h, Q);
  return -h;
}

/// Sum-to-zero constraints A xi = 0, one row per connected component of the intrinsic block.
inline Eigen::MatrixXd sum_to_zero_constraints(const ModelSpec& spec) {
  if (!spec.spatial || !spec.spatial->constrained()) return {};
  const auto& s = *spec.spatial;
  const int base = spec.n_xz() + (s.kind() == SpatialKind::convolution ? s.n_units() : 0);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(s.n_components(), spec.dim());
  for (int j = 0; j < s.n_units(); ++j) a(s.component()[static_cast<std::size_t>(j)], base + j) = 1.0;
  return a;
}

namespace detail {

// Removes the per-constraint mean (rows of A have disjoint 0/1 support).
inline void project_out(const Eigen::MatrixXd& a, Eigen::VectorXd& v) {
  for (Eigen::Index c = 0; c < a.rows(); ++c) {
    const double count = a.row(c).sum();
    const double mean = a.row(c).dot(v) / count;
    v -= mean * a.row(c).transpose();
  }
}

}  // namespace detail

struct NewtonOptions {
  double grad_tol = 1e-8;  // on ||grad||_inf / (1 + ||xi||_inf)
  int max_iter = 100;
  int max_halvings = 30;
  double refresh_ratio = 0.1;  // refresh the factor unless the gradient shrank by this factor
};

class NewtonError : public Error {
 public:
  NewtonError(const std::string& message, Eigen::VectorXd last, double grad_norm)
      : Error(ErrorKind::non_convergence, message), last_(std::move(last)), grad_norm_(grad_norm) {}

  const Eigen::VectorXd& last_iterate() const { return last_; }
  double grad_norm() const { return grad_norm_; }

 private:
  Eigen::VectorXd last_;
  double grad_norm_;
};

/// Result of the inner Newton-Raphson iteration.
struct InnerFit {
  Eigen::VectorXd mode;
  Eigen::VectorXd eta;
  Eigen::MatrixXd chol_lower;  // L with L L' = H'VH + Q (+ A'A under constraints) at the mode
  Eigen::MatrixXd info;        // H'VH at the mode
  int iterations = 0;
  double grad_norm = 0.0;
  double logpost = 0.0;
  std::vector<double> trace;  // log conditional posterior after each accepted step
};

inline Eigen::VectorXd default_start(const ModelSpec& spec) {
  Eigen::VectorXd xi = Eigen::VectorXd::Zero(spec.dim());
  if (spec.has_intercept()) {
    const double rate = (spec.y.array() / spec.offset.array().exp()).mean();
    xi[0] = std::log(std::max(rate, 1e-10));
  }
  return xi;
}

/// Newton-Raphson with step halving for the mode of the log conditional posterior.
///
/// The factor of H'VH + Q is refreshed only when the previous step did not shrink the
/// gradient by `refresh_ratio`; in between, steps reuse it (chord steps). `start_info`, when
/// given, is H'VH evaluated at `start` and saves the first data pass. The returned factor is
/// always evaluated at the returned mode.
inline InnerFit newton_mode(const ModelSpec& spec, const Eigen::SparseMatrix<double>& Q, const Eigen::VectorXd& start,
                            const NewtonOptions& opt = {}, const Eigen::MatrixXd* start_info = nullptr) {
  const Eigen::MatrixXd a = sum_to_zero_constraints(spec);
  InnerFit res;
  Eigen::VectorXd xi = start;
  if (xi.size() != spec.dim()) throw Error(ErrorKind::dimension_mismatch, "start vector has wrong length");
  if (!xi.allFinite()) throw Error(ErrorKind::invalid_argument, "start vector must be finite");
  if (a.rows() > 0) {
    const Eigen::VectorXd before = xi;
    detail::project_out(a, xi);
    if (xi != before) start_info = nullptr;
  }

  Eigen::VectorXd eta = linear_predictor(spec, xi);
  double f = poisson_loglik(spec, eta);
  if (!std::isfinite(f)) throw NewtonError("start point overflows the linear predictor", xi, INFINITY);
  f -= 0.5 * xi.dot(Q * xi);

  Eigen::MatrixXd info;
  bool info_fresh = false;  // info evaluated at the current xi
  if (start_info && start_info->rows() == spec.dim()) {
    info = *start_info;
    info_fresh = true;
  }
  Eigen::LLT<Eigen::MatrixXd> llt;
  bool have_factor = false;
  bool factor_current = false;  // factor built from info at the current xi
  auto refactor = [&] {
    if (!info_fresh) {
      info = data_information(spec, eta.array().exp().matrix());
      info_fresh = true;
    }
    Eigen::MatrixXd h = info;
    add_sparse(h, Q);
    // A'A leaves the Gaussian restricted to A xi = 0 unchanged and removes the near-null
    // direction shared by the intercept and an intrinsic random effect.
    if (a.rows() > 0) h.noalias() += a.transpose() * a;
    llt.compute(h);
    if (llt.info() != Eigen::Success)
      throw Error(ErrorKind::not_positive_definite, "H'VH + Q is not positive definite");
    have_factor = true;
    factor_current = true;
  };
  auto finish = [&](int iter) {
    if (!factor_current) refactor();
    res.mode = xi;
    res.eta = eta;
    res.chol_lower = llt.matrixL();
    res.info = info;
    res.iterations = iter;
    res.logpost = f;
    return res;
  };

  double last_grad = INFINITY;
  for (int iter = 0;; ++iter) {
    const Eigen::VectorXd mu = eta.array().exp();
    Eigen::VectorXd g = detail::design_transpose_times(spec, spec.y - mu) - Q * xi;
    if (a.rows() > 0) detail::project_out(a, g);
    res.grad_norm = g.lpNorm<Eigen::Infinity>();
    if (res.grad_norm < opt.grad_tol * (1.0 + xi.lpNorm<Eigen::Infinity>())) return finish(iter);
    if (iter >= opt.max_iter) {
      std::ostringstream msg;
      msg << "Newton-Raphson did not converge in " << opt.max_iter << " iterations (grad norm " << res.grad_norm << ")";
      throw NewtonError(msg.str(), xi, res.grad_norm);
    }
    if (!have_factor || (!factor_current && res.grad_norm > opt.refresh_ratio * last_grad)) refactor();
    last_grad = res.grad_norm;

    Eigen::VectorXd step = llt.solve(g);
    if (a.rows() > 0) {
      const Eigen::MatrixXd u = llt.solve(a.transpose());
      const Eigen::MatrixXd s = a * u;
      step -= u * s.ldlt().solve(a * step);
    }
    const double predicted = 0.5 * g.dot(step);
    const double roundoff = 1e-13 * (1.0 + std::abs(f));
    double scale = 1.0;
    bool accepted = false;
    for (int k = 0; k <= opt.max_halvings; ++k, scale *= 0.5) {
      Eigen::VectorXd cand = xi + scale * step;
      if (a.rows() > 0) detail::project_out(a, cand);
      Eigen::VectorXd cand_eta = linear_predictor(spec, cand);
      double fc = poisson_loglik(spec, cand_eta);
      if (std::isfinite(fc)) fc -= 0.5 * cand.dot(Q * cand);
      if (std::isfinite(fc) && (fc >= f || (k == 0 && predicted < roundoff && fc >= f - roundoff))) {
        xi = std::move(cand);
        eta = std::move(cand_eta);
        f = fc;
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      if (!factor_current) {
        // A stale factor can give a poor direction; retry with a fresh one.
        refactor();
        last_grad = INFINITY;
        continue;
      }
      if (predicted < roundoff) return finish(iter);  // at the mode up to rounding
      throw NewtonError("step halving failed to increase the log posterior", xi, res.grad_norm);
    }
    info_fresh = false;
    factor_current = false;
    res.trace.push_back(f);
  }
}

/// Terms of the approximate log marginal posterior of the transformed hyperparameters.
struct HyperTerms {
  double loglik = 0.0;
  double half_logdet_penalty = 0.0;
  double half_quad = 0.0;  // 0.5 xi' Q xi
  double half_logdet_sigma = 0.0;
  double penalty_prior = 0.0;
  double random_effect = 0.0;

  double total() const {
    return loglik + half_logdet_penalty - half_quad + half_logdet_sigma + penalty_prior + random_effect;
  }
};

/// Contribution of one precision parameter under the Gamma-Gamma prior with delta
/// integrated out, on the log scale, excluding the determinant exponent.
inline double robust_prior_term(double v, const PriorConstants& c) {
  return -(c.nu / 2.0 + c.a) * std::log(c.b + (c.nu / 2.0) * std::exp(v));
}

inline double penalty_prior_terms(const HyperVector& v, const PriorConstants& c) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < v.v_lambda.size(); ++i)
    s += (c.nu / 2.0) * v.v_lambda[i] + robust_prior_term(v.v_lambda[i], c);
  return s;
}

/// Random-effect hyperparameter contribution. For the intrinsic parts the exponent uses the
/// rank J - c of the structure matrix.
inline double random_effect_terms(const ModelSpec& spec, const HyperVector& v) {
  if (!spec.spatial) return 0.0;
  const auto& s = *spec.spatial;
  const auto& c = spec.prior;
  const double J = s.n_units();
  const double rank = J - s.n_components();
  const auto& w = v.v_omega;
  switch (s.kind()) {
    case SpatialKind::independent: return (c.nu + J) / 2.0 * w[0] + robust_prior_term(w[0], c);
    case SpatialKind::icar: return (c.nu + rank) / 2.0 * w[0] + robust_prior_term(w[0], c);
    case SpatialKind::convolution:
      return (c.nu + J) / 2.0 * w[0] + robust_prior_term(w[0], c) + (c.nu + rank) / 2.0 * w[1] +
             robust_prior_term(w[1], c);
    case SpatialKind::leroux:
      return c.nu / 2.0 * w[0] + robust_prior_term(w[0], c) + 0.5 * logdet_G(s, v.spatial(s.kind())) +
             0.5 * w[1] - softplus(w[1]);
  }
  return 0.0;
}

/// Evaluates the hyperparameter objective given a converged inner fit at v.
inline HyperTerms hyper_terms(const ModelSpec& spec, const HyperVector& v, const Eigen::SparseMatrix<double>& Q,
                              const InnerFit& inner) {
  HyperTerms t;
  t.loglik = poisson_loglik(spec, inner.eta);
  if (spec.n_theta() > 0) t.half_logdet_penalty = 0.5 * logdet_penalty(assemble_penalty(spec.penalty, v.lambda()));
  t.half_quad = 0.5 * inner.mode.dot(Q * inner.mode);
  t.half_logdet_sigma = -inner.chol_lower.diagonal().array().log().sum();
  const Eigen::MatrixXd a = sum_to_zero_constraints(spec);
  if (a.rows() > 0) {
    // Density of the constrained Gaussian: |Sigma_c|_+ = |Sigma| |AA'| / |A Sigma A'|, the same
    // for Sigma = (H'VH + Q)^{-1} and for the A'A-augmented factor.
    const Eigen::MatrixXd x = inner.chol_lower.triangularView<Eigen::Lower>().solve(a.transpose());
    Eigen::LLT<Eigen::MatrixXd> s(x.transpose() * x);
    t.half_logdet_sigma -= s.matrixLLT().diagonal().array().log().sum();
  }
  t.penalty_prior = penalty_prior_terms(v, spec.prior);
  t.random_effect = random_effect_terms(spec, v);
  return t;
}

/// Hyperparameter objective with warm-started inner fits. One instance per fit; not shared
/// between threads.
class HyperObjective {
 public:
  explicit HyperObjective(const ModelSpec& spec, NewtonOptions newton = {})
      : spec_(spec), newton_(newton), warm_(default_start(spec)) {}

  /// Log marginal posterior at v, or -inf when the inner problem fails.
  double operator()(const HyperVector& v) {
    try {
      return evaluate(v).total();
    } catch (const Error& e) {
      ++failures_;
      last_error_ = e.what();
      return -std::numeric_limits<double>::infinity();
    }
  }

  HyperTerms evaluate(const HyperVector& v) {
    const auto q = build_Q(spec_, v);
    InnerFit inner = newton_mode(spec_, q, warm_, newton_, warm_info_.size() > 0 ? &warm_info_ : nullptr);
    HyperTerms t = hyper_terms(spec_, v, q, inner);
    warm_ = inner.mode;
    warm_info_ = inner.info;
    newton_iters_ += inner.iterations;
    last_inner_ = std::move(inner);
    return t;
  }

  const InnerFit& last_inner() const { return last_inner_; }
  const Eigen::VectorXd& warm_start() const { return warm_; }
  void set_warm_start(Eigen::VectorXd xi) {
    warm_ = std::move(xi);
    warm_info_.resize(0, 0);
  }
  int failures() const { return failures_; }
  long newton_iterations() const { return newton_iters_; }
  const std::string& last_error() const { return last_error_; }

 private:
  const ModelSpec& spec_;
  NewtonOptions newton_;
  Eigen::VectorXd warm_;
  Eigen::MatrixXd warm_info_;
  InnerFit last_inner_;
  int failures_ = 0;
  long newton_iters_ = 0;
  std::string last_error_;
};

/// Cold-start evaluation of the hyperparameter log posterior (Laplace approximation).
inline double hyper_log_posterior(const HyperVector& v, const ModelSpec& spec, const NewtonOptions& newton = {}) {
  HyperObjective obj(spec, newton);
  return obj(v);
}

struct OptimizeResult {
  HyperVector hypers;
  double value = -std::numeric_limits<double>::infinity();
  int evals = 0;
  bool converged = false;
  std::vector<Eigen::VectorXd> simplex;
  std::vector<double> simplex_values;  // objective (log posterior) at the final vertices
};

struct FitOptions {
  NewtonOptions newton;
  NelderMeadOptions outer;
  std::optional<HyperVector> start;
  double hyper_bound = 15.0;  // search box |v_i| <= hyper_bound on the transformed scale
  std::function<void(const std::string&)> log;  // convergence log sink, may be empty
};

inline OptimizeResult optimize_hypers(const ModelSpec& spec, const HyperVector& start, const FitOptions& opt,
                                      HyperObjective& objective) {
  int evals = 0;
  auto negated = [&](const Eigen::VectorXd& flat) {
    if (flat.size() > 0 && flat.cwiseAbs().maxCoeff() > opt.hyper_bound) return std::numeric_limits<double>::infinity();
    const double val = objective(HyperVector::unflatten(spec, flat));
    ++evals;
    if (opt.log) {
      std::ostringstream line;
      line << "eval " << evals << " objective " << val << " grad_norm " << objective.last_inner().grad_norm
           << " newton_iters " << objective.last_inner().iterations << " v [";
      for (Eigen::Index i = 0; i < flat.size(); ++i) line << (i ? " " : "") << flat[i];
      line << "]";
      opt.log(line.str());
    }
    return -val;
  };
  const auto nm = nelder_mead(negated, start.flat(), opt.outer);
  OptimizeResult res;
  res.hypers = HyperVector::unflatten(spec, nm.argmin);
  res.value = -nm.value;
  res.evals = nm.evals;
  res.converged = nm.converged;
  res.simplex = nm.simplex;
  for (double s : nm.simplex_values) res.simplex_values.push_back(-s);
  return res;
}

inline OptimizeResult optimize_hypers(const ModelSpec& spec, const HyperVector& start, const FitOptions& opt = {}) {
  HyperObjective objective(spec, opt.newton);
  return optimize_hypers(spec, start, opt, objective);
}

/// Gaussian approximation N(mode, Sigma) of the latent field at fixed hyperparameters,
/// Sigma = (H'VH + Q)^{-1}, conditioned on the sum-to-zero constraints when present.
class LatentFit {
 public:
  LatentFit() = default;
  LatentFit(Eigen::VectorXd mode, Eigen::MatrixXd chol_lower, Eigen::MatrixXd constraints)
      : mode_(std::move(mode)), chol_(std::move(chol_lower)), a_(std::move(constraints)) {
    if (a_.rows() > 0) {
      kriging_ = solve(a_.transpose());
      kriging_llt_.compute(a_ * kriging_);
    }
  }

  const Eigen::VectorXd& mode() const { return mode_; }
  const Eigen::MatrixXd& chol_lower() const { return chol_; }
  const Eigen::MatrixXd& constraints() const { return a_; }
  Eigen::Index dim() const { return mode_.size(); }

  /// (H'VH + Q)^{-1} x, or (H'VH + Q + A'A)^{-1} x for constrained fits.
  Eigen::MatrixXd solve(const Eigen::MatrixXd& x) const {
    const auto l = chol_.triangularView<Eigen::Lower>();
    return l.transpose().solve(l.solve(x));
  }

  /// Sigma c with the constraint correction.
  Eigen::VectorXd covariance_times(const Eigen::VectorXd& c) const {
    Eigen::VectorXd out = solve(c);
    if (a_.rows() > 0) out -= kriging_ * kriging_llt_.solve(kriging_.transpose() * c);
    return out;
  }

  /// c' Sigma c.
  double quadform(const Eigen::VectorXd& c) const {
    const Eigen::VectorXd half = chol_.triangularView<Eigen::Lower>().solve(c);
    double q = half.squaredNorm();
    if (a_.rows() > 0) {
      const Eigen::VectorXd k = kriging_.transpose() * c;
      q -= k.dot(kriging_llt_.solve(k));
    }
    return std::max(q, 0.0);
  }

  /// Dense Sigma (small models only).
  Eigen::MatrixXd covariance() const {
    Eigen::MatrixXd s = solve(Eigen::MatrixXd::Identity(dim(), dim()));
    if (a_.rows() > 0) s -= kriging_ * kriging_llt_.solve(kriging_.transpose());
    return s;
  }

  /// mode + L'^{-1} z, then conditioned on A xi = 0 by kriging.
  Eigen::VectorXd sample(const Eigen::VectorXd& z) const {
    Eigen::VectorXd dev = chol_.triangularView<Eigen::Lower>().transpose().solve(z);
    if (a_.rows() > 0) dev -= kriging_ * kriging_llt_.solve(a_ * dev);
    return mode_ + dev;
  }

  // Layout and diagnostics.
  int n_fixed = 0;
  int n_theta = 0;
  int n_units = 0;
  std::optional<SpatialKind> spatial_kind;
  HyperVector hypers;
  double log_hyper_posterior = 0.0;
  double log_cond_posterior = 0.0;
  int newton_iters = 0;
  long total_newton_iters = 0;
  double grad_norm = 0.0;
  bool converged = false;
  int outer_evals = 0;
  bool outer_converged = false;

  int n_xz() const { return n_fixed + n_theta; }
  Eigen::VectorXd theta() const { return mode_.segment(n_fixed, n_theta); }
  Eigen::VectorXd beta() const { return mode_.head(n_fixed); }

 private:
  Eigen::VectorXd mode_;
  Eigen::MatrixXd chol_;
  Eigen::MatrixXd a_;
  Eigen::MatrixXd kriging_;
  Eigen::LLT<Eigen::MatrixXd> kriging_llt_;
};

/// Laplace fit at fixed hyperparameters.
inline LatentFit laplace_at(const ModelSpec& spec, const HyperVector& v, const Eigen::VectorXd& start,
                            const NewtonOptions& newton = {}) {
  const auto q = build_Q(spec, v);
  InnerFit inner = newton_mode(spec, q, start, newton);
  const HyperTerms terms = hyper_terms(spec, v, q, inner);
  LatentFit fit(inner.mode, inner.chol_lower, sum_to_zero_constraints(spec));
  fit.n_fixed = spec.n_fixed;
  fit.n_theta = spec.n_theta();
  fit.n_units = spec.n_units();
  if (spec.spatial) fit.spatial_kind = spec.spatial->kind();
  fit.hypers = v;
  fit.log_hyper_posterior = terms.total();
  fit.log_cond_posterior = inner.logpost;
  fit.newton_iters = inner.iterations;
  fit.grad_norm = inner.grad_norm;
  fit.converged = true;
  return fit;
}

/// Two-step fit: hyperparameter MAP by Nelder-Mead, then the Laplace approximation at the optimum.
inline LatentFit fit(const ModelSpec& spec, const FitOptions& opt = {}) {
  spec.validate();
  HyperObjective objective(spec, opt.newton);
  const HyperVector start = opt.start ? *opt.start : HyperVector::zeros(spec);
  const OptimizeResult best = optimize_hypers(spec, start, opt, objective);
  if (!std::isfinite(best.value))
    throw Error(ErrorKind::non_convergence, "hyperparameter objective not finite anywhere: " + objective.last_error());
  LatentFit out = laplace_at(spec, best.hypers, objective.warm_start(), opt.newton);
  out.outer_evals = best.evals;
  out.outer_converged = best.converged;
  out.total_newton_iters = objective.newton_iterations() + out.newton_iters;
  if (opt.log) {
    std::ostringstream line;
    line << "final objective " << out.log_hyper_posterior << " grad_norm " << out.grad_norm << " outer_evals "
         << best.evals << (best.converged ? " converged" : " NOT converged");
    opt.log(line.str());
  }
  return out;
}

}  // namespace dlnmlps

#endif  // DLNMLPS_FITENGINE_HPP
