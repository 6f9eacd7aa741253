#include <gtest/gtest.h>

#include <random>

#include "dlnmlps/crossbasis.hpp"
#include "test_util.hpp"

using namespace dlnmlps;

namespace {

PanelData tiny_panel(std::vector<int> lengths) {
  PanelData p;
  std::size_t n = 0;
  for (int len : lengths) n += static_cast<std::size_t>(len);
  p.y = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  p.exposure.resize(static_cast<Eigen::Index>(n));
  p.offset = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  Eigen::Index r = 0;
  for (std::size_t j = 0; j < lengths.size(); ++j) {
    p.unit_ids.push_back("u" + std::to_string(j));
    for (int t = 0; t < lengths[j]; ++t, ++r) {
      p.unit.push_back(static_cast<int>(j));
      p.t.push_back(t + 1);
      p.exposure[r] = 100.0 * static_cast<double>(j) + t;  // encodes (unit, t)
    }
  }
  p.index_series();
  return p;
}

}  // namespace

TEST(LagMatrix, RowsHoldLaggedExposureWithinUnit) {
  const auto p = tiny_panel({6, 5});
  const auto m = build_lag_matrix(p, 2);
  ASSERT_EQ(m.n_rows(), 4 + 3);
  ASSERT_EQ(m.rows.cols(), 3);
  // First usable row of unit 1 is t = 3: (x_3, x_2, x_1) = (102, 101, 100).
  EXPECT_EQ(m.rows(4, 0), 102.0);
  EXPECT_EQ(m.rows(4, 1), 101.0);
  EXPECT_EQ(m.rows(4, 2), 100.0);
  EXPECT_EQ(m.usable_index[4].unit, 1);
  EXPECT_EQ(m.usable_index[4].t, 3);
  // No row mixes units.
  for (Eigen::Index r = 0; r < m.n_rows(); ++r)
    EXPECT_EQ(std::floor(m.rows(r, 0) / 100.0), std::floor(m.rows(r, 2) / 100.0));
}

TEST(LagMatrix, SeriesTooShort) {
  const auto p = tiny_panel({6, 3});
  try {
    build_lag_matrix(p, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("series-too-short"), std::string::npos);
  }
  EXPECT_NO_THROW(build_lag_matrix(p, 2));
  EXPECT_THROW(build_lag_matrix(p, -1), Error);
}

TEST(CrossBasis, MatchesTripleSum) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g;
  for (int v : {4, 7}) {
    const int L = 5;
    const auto ek = pspline_knots(0.0, 1.0, v);
    const auto lk = equidistant_knots(0.0, L, v);
    LagMatrix m;
    m.window.max_lag = L;
    m.rows.resize(20, L + 1);
    for (Eigen::Index i = 0; i < m.rows.size(); ++i) m.rows.data()[i] = u(rng);
    m.rows(0, 0) = 0.0;
    m.rows(1, 3) = 1.0;
    const auto cb = build_crossbasis(m, ek, lk);
    ASSERT_EQ(cb.W.cols(), v * v);
    Eigen::VectorXd theta(v * v);
    for (auto& x : theta) x = g(rng);
    const Eigen::VectorXd s = cb.W * theta;
    for (Eigen::Index r = 0; r < m.n_rows(); ++r) {
      const double want = testutil::triple_sum(m.rows.row(r).transpose(), theta, ek, lk);
      EXPECT_NEAR(s[r], want, 1e-12 * std::max(1.0, std::abs(want)));
    }
  }
}

TEST(CrossBasis, OutOfDomainReportsPanelRow) {
  auto p = tiny_panel({5});
  const auto m = build_lag_matrix(p, 1);
  const auto ek = pspline_knots(0.0, 3.5, 4);
  const auto lk = equidistant_knots(0.0, 1.0, 4);
  try {
    build_crossbasis(m, ek, lk);
    FAIL();
  } catch (const OutOfDomainError& e) {
    EXPECT_EQ(e.index(), 4u);  // panel row of x = 4
    EXPECT_EQ(e.value(), 4.0);
  }
}

TEST(CrossBasis, ContrastRowsVanishAtReference) {
  const auto ek = pspline_knots(0.0, 10.0, 6);
  const auto lk = pspline_knots(0.0, 7.0, 5);
  EXPECT_EQ(predict_basis_row(3.3, 3.3, ek, lk, 2.0).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(overall_contrast_row(3.3, 3.3, ek, lk, 7).cwiseAbs().maxCoeff(), 0.0);
  // Overall contrast = sum of lag-specific contrasts.
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(30);
  for (int l = 0; l <= 7; ++l) sum += predict_basis_row(8.0, 3.3, ek, lk, l);
  EXPECT_LT((sum - overall_contrast_row(8.0, 3.3, ek, lk, 7)).cwiseAbs().maxCoeff(), 1e-13);
  EXPECT_LT((overall_contrast_row(8.0, 3.3, ek, lk, 7) -
             (constant_exposure_row(8.0, ek, lk, 7) - constant_exposure_row(3.3, ek, lk, 7)))
                .cwiseAbs()
                .maxCoeff(),
            1e-13);
}
