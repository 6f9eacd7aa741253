#ifndef DLNMLPS_PENALTY_HPP
#define DLNMLPS_PENALTY_HPP

// Difference penalties, the varying ridge lag penalty and the assembled prior precision
// of the cross-basis coefficients.

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dlnmlps/error.hpp"

namespace dlnmlps {

struct DiffMatrix {
  int order = 0;
  Eigen::MatrixXd values;  // (n - order) x n
};

/// m-th order difference matrix with +1 on the later index for m = 1.
inline DiffMatrix diff_matrix(int order, int n) {
  if (order < 1) throw Error(ErrorKind::invalid_argument, "difference order must be >= 1");
  if (n <= order)
    throw Error(ErrorKind::dimension_mismatch,
                "difference matrix needs n > order (n=" + std::to_string(n) + ", order=" + std::to_string(order) + ")");
  Eigen::MatrixXd d = Eigen::MatrixXd::Identity(n, n);
  for (int m = 0; m < order; ++m) {
    const Eigen::Index rows = d.rows() - 1;
    d = (d.bottomRows(rows) - d.topRows(rows)).eval();
  }
  return {order, d};
}

struct MarginalPenalty {
  Eigen::MatrixXd S;
  double jitter = 1e-12;
};

/// S = D'D + jitter * I.
inline MarginalPenalty marginal_penalty(const DiffMatrix& d, double jitter) {
  if (!(jitter > 0.0)) throw Error(ErrorKind::invalid_argument, "jitter must be positive");
  Eigen::MatrixXd s = d.values.transpose() * d.values;
  s.diagonal().array() += jitter;
  return {s, jitter};
}

/// Quadratic varying ridge penalty diag(0, 1, 4, ..., (v_l-1)^2) + jitter * I; shrinks
/// coefficients of late lag basis functions toward zero.
inline MarginalPenalty ridge_lag_penalty(int v_l, double jitter) {
  if (v_l < 1) throw Error(ErrorKind::invalid_argument, "v_l must be >= 1");
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(v_l, v_l);
  for (int k = 0; k < v_l; ++k) s(k, k) = static_cast<double>(k) * k + jitter;
  return {s, jitter};
}

/// Where a marginal matrix sits in the tensor product: S (x) I_{v_l} or I_{v_x} (x) S.
enum class Placement { exposure, lag };

struct PenaltyComponent {
  std::string name;
  Placement placement = Placement::exposure;
  MarginalPenalty marginal;
};

/// Penalty P(lambda) = sum_c lambda_c K_c over Kronecker-placed marginal matrices.
class PenaltyAssembly {
 public:
  PenaltyAssembly() = default;
  PenaltyAssembly(int v_x, int v_l) : v_x_(v_x), v_l_(v_l) {}

  void add(PenaltyComponent component) {
    const auto n = component.marginal.S.rows();
    const int expected = component.placement == Placement::exposure ? v_x_ : v_l_;
    if (n != expected || component.marginal.S.cols() != n)
      throw Error(ErrorKind::dimension_mismatch, "marginal penalty '" + component.name + "' has wrong size");
    placed_.push_back(place(component));
    components_.push_back(std::move(component));
  }

  int v_x() const { return v_x_; }
  int v_l() const { return v_l_; }
  int dim() const { return v_x_ * v_l_; }
  std::size_t size() const { return components_.size(); }
  const std::vector<PenaltyComponent>& components() const { return components_; }
  /// K_c, the component matrix at full dimension.
  const Eigen::MatrixXd& placed(std::size_t c) const { return placed_[c]; }

 private:
  Eigen::MatrixXd place(const PenaltyComponent& c) const {
    const Eigen::MatrixXd& s = c.marginal.S;
    Eigen::MatrixXd k = Eigen::MatrixXd::Zero(dim(), dim());
    if (c.placement == Placement::exposure) {
      for (int i = 0; i < v_x_; ++i)
        for (int i2 = 0; i2 < v_x_; ++i2)
          if (s(i, i2) != 0.0)
            for (int l = 0; l < v_l_; ++l) k(i * v_l_ + l, i2 * v_l_ + l) = s(i, i2);
    } else {
      for (int i = 0; i < v_x_; ++i) k.block(i * v_l_, i * v_l_, v_l_, v_l_) = s;
    }
    return k;
  }

  int v_x_ = 0;
  int v_l_ = 0;
  std::vector<PenaltyComponent> components_;
  std::vector<Eigen::MatrixXd> placed_;
};

/// The standard DLNM penalty: difference penalties in both dimensions, optionally the ridge
/// lag penalty as a third component.
inline PenaltyAssembly make_dlnm_penalty(int v_x, int v_l, int order = 2, double jitter = 1e-12,
                                         bool ridge = true) {
  PenaltyAssembly p(v_x, v_l);
  p.add({"exposure", Placement::exposure, marginal_penalty(diff_matrix(order, v_x), jitter)});
  p.add({"lag", Placement::lag, marginal_penalty(diff_matrix(order, v_l), jitter)});
  if (ridge) p.add({"lag_ridge", Placement::lag, ridge_lag_penalty(v_l, jitter)});
  return p;
}

inline Eigen::MatrixXd assemble_penalty(const PenaltyAssembly& assembly, const Eigen::VectorXd& lambda) {
  if (static_cast<std::size_t>(lambda.size()) != assembly.size())
    throw Error(ErrorKind::dimension_mismatch, "expected " + std::to_string(assembly.size()) +
                                                   " penalty parameters, got " + std::to_string(lambda.size()));
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(assembly.dim(), assembly.dim());
  for (std::size_t c = 0; c < assembly.size(); ++c) {
    if (!(lambda[static_cast<Eigen::Index>(c)] > 0.0))
      throw Error(ErrorKind::invalid_argument, "penalty parameters must be positive");
    p.noalias() += lambda[static_cast<Eigen::Index>(c)] * assembly.placed(c);
  }
  return p;
}

/// log|P| through the Cholesky factor.
inline double logdet_penalty(const Eigen::MatrixXd& p) {
  if (p.size() == 0) return 0.0;
  Eigen::LLT<Eigen::MatrixXd> llt(p);
  if (llt.info() != Eigen::Success)
    throw Error(ErrorKind::not_positive_definite, "penalty matrix is not positive definite");
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

}  // namespace dlnmlps

#endif  // DLNMLPS_PENALTY_HPP
