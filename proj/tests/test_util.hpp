#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <unsupported/Eigen/KroneckerProduct>

#include "dlnmlps/basis.hpp"
#include "dlnmlps/fitengine.hpp"
#include "dlnmlps/model.hpp"
#include "dlnmlps/panel.hpp"
#include "dlnmlps/spatial.hpp"

namespace testutil {

using namespace dlnmlps;

// Panel with uniform exposures on [0, 10] and Poisson counts whose log rate is
// base + 0.05 * (x_t - 5) + unit shift.
inline PanelData random_panel(int J, int T, std::uint64_t seed, double base = 2.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(0.0, 10.0);
  std::normal_distribution<double> shift(0.0, 0.3);
  PanelData p;
  const auto n = static_cast<Eigen::Index>(J) * T;
  p.y.resize(n);
  p.exposure.resize(n);
  p.offset = Eigen::VectorXd::Zero(n);
  for (int j = 0; j < J; ++j) {
    p.unit_ids.push_back(std::to_string(j + 1));
    const double s = shift(rng);
    for (int t = 0; t < T; ++t) {
      const Eigen::Index r = static_cast<Eigen::Index>(j) * T + t;
      p.unit.push_back(j);
      p.t.push_back(t + 1);
      p.exposure[r] = ux(rng);
      std::poisson_distribution<int> pois(std::exp(base + 0.05 * (p.exposure[r] - 5.0) + s));
      p.y[r] = pois(rng);
    }
  }
  // Pin the pooled range to [0, 10] so knots do not depend on the draw.
  p.exposure[0] = 0.0;
  p.exposure[n - 1] = 10.0;
  p.index_series();
  return p;
}

inline BuiltModel small_model(std::optional<SpatialKind> kind, std::uint64_t seed, int J = 4, int T = 30,
                              int v = 4, int L = 3) {
  ModelConfig cfg;
  cfg.v_x = v;
  cfg.v_l = v;
  cfg.max_lag = L;
  cfg.spatial = kind;
  return build_model(random_panel(J, T, seed), cfg, AdjacencyGraph::grid(1, J));
}

// Independent B-spline oracle: Cox-de Boor recursion on the full knot vector. At the right
// boundary the last basis function takes the value 1 (left limit).
inline double cox_de_boor(const std::vector<double>& t, int i, int p, double x) {
  if (p == 0) {
    const double last = t[t.size() - 1];
    if (x == last) {
      // The last nonempty interval owns the right endpoint.
      std::size_t k = t.size() - 1;
      while (k > 0 && t[k - 1] == last) --k;
      return static_cast<std::size_t>(i) == k - 1 ? 1.0 : 0.0;
    }
    return (t[i] <= x && x < t[i + 1]) ? 1.0 : 0.0;
  }
  double left = 0.0, right = 0.0;
  if (t[i + p] != t[i]) left = (x - t[i]) / (t[i + p] - t[i]) * cox_de_boor(t, i, p - 1, x);
  if (t[i + p + 1] != t[i + 1]) right = (t[i + p + 1] - x) / (t[i + p + 1] - t[i + 1]) * cox_de_boor(t, i + 1, p - 1, x);
  return left + right;
}

inline std::vector<double> oracle_basis(const KnotSet& k, double x) {
  const auto t = k.full();
  std::vector<double> out(static_cast<std::size_t>(k.n_basis()));
  // Extended knots put [lo, hi] strictly inside the knot span, where the plain recursion is
  // continuous, so only the clamped right endpoint needs the special case above.
  for (int i = 0; i < k.n_basis(); ++i) out[static_cast<std::size_t>(i)] = cox_de_boor(t, i, k.degree, x);
  return out;
}

// s(x_t) = sum_l sum_i sum_k B_i(x_{t-l}) b_k(l) theta_{i v_l + k}, term by term.
inline double triple_sum(const Eigen::VectorXd& lag_row, const Eigen::VectorXd& theta, const KnotSet& ek,
                         const KnotSet& lk) {
  const int vl = lk.n_basis();
  double s = 0.0;
  for (Eigen::Index l = 0; l < lag_row.size(); ++l) {
    const auto bx = oracle_basis(ek, lag_row[l]);
    const auto bl = oracle_basis(lk, static_cast<double>(l));
    for (int i = 0; i < ek.n_basis(); ++i)
      for (int k = 0; k < vl; ++k)
        s += bx[static_cast<std::size_t>(i)] * bl[static_cast<std::size_t>(k)] * theta[i * vl + k];
  }
  return s;
}

// Dense m-th order difference matrix written out from binomial coefficients.
inline Eigen::MatrixXd oracle_diff(int order, int n) {
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(n - order, n);
  for (int r = 0; r < n - order; ++r) {
    double c = 1.0;
    for (int k = 0; k <= order; ++k) {
      d(r, r + order - k) = (k % 2 ? -1.0 : 1.0) * c;
      c = c * (order - k) / (k + 1);
    }
  }
  return d;
}

struct OracleSettings {
  int order = 2;
  double jitter = 1e-12;
  bool ridge = true;
};

// Log hyperparameter posterior written from the formula with dense linear algebra. Only the
// mode xi_hat comes from the engine. Returns the value and, through `grad_inf`, the
// (constraint-projected) sup norm of the log conditional posterior gradient at xi_hat.
inline double oracle_hyper_log_posterior(const ModelSpec& spec, const Eigen::VectorXd& v_flat,
                                         const Eigen::VectorXd& xi, OracleSettings os = {},
                                         double* grad_inf = nullptr) {
  const int vx = spec.penalty.v_x(), vl = spec.penalty.v_l();
  const int p = spec.n_fixed, q = vx * vl, J = spec.n_units();
  const int nu_dim = spec.n_u();
  const int d = p + q + nu_dim;
  const double nu = spec.prior.nu, a = spec.prior.a, b = spec.prior.b;
  const auto n = spec.n_obs();

  // H = [Z W M]
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(n, d);
  H.leftCols(p + q) = spec.design;
  const bool conv = spec.spatial && spec.spatial->kind() == SpatialKind::convolution;
  for (Eigen::Index r = 0; r < n; ++r) {
    if (!spec.spatial) break;
    const int j = spec.unit[static_cast<std::size_t>(r)];
    H(r, p + q + j) = 1.0;
    if (conv) H(r, p + q + J + j) = 1.0;
  }

  // Penalty
  const int nl = os.ridge ? 3 : 2;
  Eigen::VectorXd lam(nl);
  for (int c = 0; c < nl; ++c) lam[c] = std::exp(v_flat[c]);
  Eigen::MatrixXd Dx = oracle_diff(os.order, vx), Dl = oracle_diff(os.order, vl);
  Eigen::MatrixXd Sx = Dx.transpose() * Dx + os.jitter * Eigen::MatrixXd::Identity(vx, vx);
  Eigen::MatrixXd Sl = Dl.transpose() * Dl + os.jitter * Eigen::MatrixXd::Identity(vl, vl);
  Eigen::MatrixXd P = lam[0] * Eigen::kroneckerProduct(Sx, Eigen::MatrixXd::Identity(vl, vl)).eval() +
                      lam[1] * Eigen::kroneckerProduct(Eigen::MatrixXd::Identity(vx, vx), Sl).eval();
  if (os.ridge) {
    Eigen::MatrixXd R = Eigen::MatrixXd::Zero(vl, vl);
    for (int k = 0; k < vl; ++k) R(k, k) = k * k + os.jitter;
    P += lam[2] * Eigen::kroneckerProduct(Eigen::MatrixXd::Identity(vx, vx), R).eval();
  }

  // Random-effect precision and prior terms
  Eigen::MatrixXd G(nu_dim, nu_dim);
  double re_terms = 0.0;
  Eigen::MatrixXd A;  // sum-to-zero rows
  if (spec.spatial) {
    const auto& g = spec.spatial->graph();
    Eigen::MatrixXd lap = Eigen::MatrixXd::Zero(J, J);
    for (int j = 0; j < J; ++j)
      for (int h : g.neighbors[j]) {
        lap(j, j) += 1.0;
        lap(j, h) = -1.0;
      }
    const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(J, J);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(lap);
    int comps = 0;
    for (Eigen::Index i = 0; i < J; ++i)
      if (es.eigenvalues()[i] < 1e-9) ++comps;
    const double rank = J - comps;
    auto robust = [&](double w) { return -(nu / 2 + a) * std::log(b + nu / 2 * std::exp(w)); };
    const Eigen::VectorXd w = v_flat.tail(v_flat.size() - nl);
    switch (spec.spatial->kind()) {
      case SpatialKind::independent:
        G = std::exp(w[0]) * I;
        re_terms = (nu + J) / 2 * w[0] + robust(w[0]);
        break;
      case SpatialKind::icar:
        G = std::exp(w[0]) * lap;
        re_terms = (nu + rank) / 2 * w[0] + robust(w[0]);
        break;
      case SpatialKind::convolution:
        G.setZero();
        G.topLeftCorner(J, J) = std::exp(w[0]) * I;
        G.bottomRightCorner(J, J) = std::exp(w[1]) * lap;
        re_terms = (nu + J) / 2 * w[0] + robust(w[0]) + (nu + rank) / 2 * w[1] + robust(w[1]);
        break;
      case SpatialKind::leroux: {
        const double rho = 1.0 / (1.0 + std::exp(-w[1]));
        G = std::exp(w[0]) * (rho * lap + (1 - rho) * I);
        re_terms = nu / 2 * w[0] + robust(w[0]) + 0.5 * std::log(G.determinant()) + 0.5 * w[1] -
                   std::log(1 + std::exp(w[1]));
        break;
      }
    }
    if (spec.spatial->constrained()) {
      // One sum-to-zero row per connected component of the intrinsic block.
      std::vector<int> label(static_cast<std::size_t>(J), -1);
      int c = 0;
      for (int s0 = 0; s0 < J; ++s0) {
        if (label[static_cast<std::size_t>(s0)] >= 0) continue;
        std::vector<int> stack{s0};
        label[static_cast<std::size_t>(s0)] = c;
        while (!stack.empty()) {
          const int v = stack.back();
          stack.pop_back();
          for (int h : g.neighbors[v])
            if (label[static_cast<std::size_t>(h)] < 0) {
              label[static_cast<std::size_t>(h)] = c;
              stack.push_back(h);
            }
        }
        ++c;
      }
      A = Eigen::MatrixXd::Zero(c, d);
      const int base = p + q + (conv ? J : 0);
      for (int j = 0; j < J; ++j) A(label[static_cast<std::size_t>(j)], base + j) = 1.0;
    }
  }

  Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(d, d);
  Q.topLeftCorner(p, p) = spec.prior.zeta * Eigen::MatrixXd::Identity(p, p);
  Q.block(p, p, q, q) = P;
  if (nu_dim > 0) Q.bottomRightCorner(nu_dim, nu_dim) = G;

  const Eigen::VectorXd eta = H * xi + spec.offset;
  const Eigen::VectorXd mu = eta.array().exp();
  const double loglik = (spec.y.array() * eta.array() - mu.array()).sum();
  const Eigen::MatrixXd prec = H.transpose() * mu.asDiagonal() * H + Q;
  const Eigen::MatrixXd sigma = prec.inverse();
  double half_logdet_sigma = -0.5 * std::log(prec.determinant());
  if (A.rows() > 0) half_logdet_sigma -= 0.5 * std::log((A * sigma * A.transpose()).determinant());

  double prior_lambda = 0.0;
  for (int c = 0; c < nl; ++c)
    prior_lambda += nu / 2 * v_flat[c] - (nu / 2 + a) * std::log(b + nu / 2 * std::exp(v_flat[c]));

  if (grad_inf) {
    Eigen::VectorXd grad = H.transpose() * (spec.y - mu) - Q * xi;
    if (A.rows() > 0) grad -= A.transpose() * (A * A.transpose()).ldlt().solve(A * grad);
    *grad_inf = grad.cwiseAbs().maxCoeff();
  }
  return loglik + 0.5 * std::log(P.determinant()) - 0.5 * xi.dot(Q * xi) + half_logdet_sigma + prior_lambda +
         re_terms;
}

inline double max_rel_err(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const double scale = std::max(b.cwiseAbs().maxCoeff(), 1e-300);
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

}  // namespace testutil
