#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <unsupported/Eigen/KroneckerProduct>

#include "dlnmlps/penalty.hpp"

using namespace dlnmlps;

TEST(Penalty, DifferenceMatrixShapesAndSigns) {
  const auto d1 = diff_matrix(1, 4);
  ASSERT_EQ(d1.values.rows(), 3);
  EXPECT_EQ(d1.values(0, 0), -1.0);
  EXPECT_EQ(d1.values(0, 1), 1.0);
  const auto d2 = diff_matrix(2, 5);
  ASSERT_EQ(d2.values.rows(), 3);
  EXPECT_EQ(d2.values(1, 1), 1.0);
  EXPECT_EQ(d2.values(1, 2), -2.0);
  EXPECT_EQ(d2.values(1, 3), 1.0);
  EXPECT_THROW(diff_matrix(3, 3), Error);
  EXPECT_THROW(diff_matrix(0, 3), Error);
}

TEST(Penalty, NullSpaceIsLowOrderPolynomials) {
  for (int order : {1, 2, 3}) {
    const auto d = diff_matrix(order, 8).values;
    for (int p = 0; p < order; ++p) {
      Eigen::VectorXd v(8);
      for (int i = 0; i < 8; ++i) v[i] = std::pow(i, p);
      EXPECT_LT((d * v).cwiseAbs().maxCoeff(), 1e-10);
    }
    Eigen::VectorXd v(8);
    for (int i = 0; i < 8; ++i) v[i] = std::pow(i, order);
    EXPECT_GT((d * v).cwiseAbs().minCoeff(), 0.5);
  }
}

TEST(Penalty, MarginalHasJitterFloor) {
  const auto m = marginal_penalty(diff_matrix(2, 6), 1e-6);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m.S);
  EXPECT_GE(es.eigenvalues().minCoeff(), 1e-6 * (1 - 1e-6));
  EXPECT_THROW(marginal_penalty(diff_matrix(2, 6), 0.0), Error);
  const auto r = ridge_lag_penalty(4, 1e-12);
  EXPECT_DOUBLE_EQ(r.S(3, 3), 9.0 + 1e-12);
  EXPECT_DOUBLE_EQ(r.S(0, 0), 1e-12);
}

TEST(Penalty, KroneckerPlacementMatchesTensorProduct) {
  const int vx = 4, vl = 3;
  const auto p = make_dlnm_penalty(vx, vl, 2, 1e-8, true);
  ASSERT_EQ(p.size(), 3u);
  const Eigen::MatrixXd sx = marginal_penalty(diff_matrix(2, vx), 1e-8).S;
  const Eigen::MatrixXd sl = marginal_penalty(diff_matrix(2, vl), 1e-8).S;
  const Eigen::MatrixXd sr = ridge_lag_penalty(vl, 1e-8).S;
  const Eigen::MatrixXd ix = Eigen::MatrixXd::Identity(vx, vx);
  const Eigen::MatrixXd il = Eigen::MatrixXd::Identity(vl, vl);
  Eigen::MatrixXd want = 2.0 * Eigen::kroneckerProduct(sx, il) + 3.0 * Eigen::kroneckerProduct(ix, sl) +
                         0.5 * Eigen::kroneckerProduct(ix, sr);
  Eigen::VectorXd lambda(3);
  lambda << 2.0, 3.0, 0.5;
  const auto got = assemble_penalty(p, lambda);
  EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((got - got.transpose()).cwiseAbs().maxCoeff(), 0.0 + 1e-300);
}

TEST(Penalty, LogDetMatchesEigenvalues) {
  const auto p = make_dlnm_penalty(5, 5, 2, 1e-3, true);
  Eigen::VectorXd lambda(3);
  lambda << 10.0, 0.1, 2.0;
  const auto m = assemble_penalty(p, lambda);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  EXPECT_NEAR(logdet_penalty(m), es.eigenvalues().array().log().sum(), 1e-9);
}

TEST(Penalty, Errors) {
  const auto p = make_dlnm_penalty(4, 4);
  EXPECT_THROW(assemble_penalty(p, Eigen::VectorXd::Ones(2)), Error);
  Eigen::VectorXd bad = Eigen::VectorXd::Ones(3);
  bad[1] = -1.0;
  EXPECT_THROW(assemble_penalty(p, bad), Error);
  EXPECT_THROW(logdet_penalty(-Eigen::MatrixXd::Identity(3, 3)), Error);
  PenaltyAssembly a(3, 4);
  EXPECT_THROW(a.add({"x", Placement::exposure, ridge_lag_penalty(4, 1e-6)}), Error);
}
