#include <gtest/gtest.h>

#include <random>

#include "dlnmlps/fitengine.hpp"
#include "dlnmlps/nelder_mead.hpp"
#include "test_util.hpp"

using namespace dlnmlps;
using testutil::small_model;

namespace {

const std::vector<std::optional<SpatialKind>> kAllPriors = {std::nullopt, SpatialKind::independent, SpatialKind::icar,
                                                            SpatialKind::convolution, SpatialKind::leroux};

HyperVector some_hypers(const ModelSpec& spec, double shift) {
  Eigen::VectorXd v = HyperVector::zeros(spec).flat();
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = 0.5 * std::sin(1.3 * i + shift) + 0.5;
  return HyperVector::unflatten(spec, v);
}

Eigen::VectorXd random_xi(const ModelSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 0.1);
  Eigen::VectorXd xi(spec.dim());
  for (auto& x : xi) x = g(rng);
  xi[0] += 2.0;
  return xi;
}

}  // namespace

TEST(FitEngine, GradientAndHessianMatchFiniteDifferences) {
  for (std::size_t k = 0; k < kAllPriors.size(); ++k) {
    const auto m = small_model(kAllPriors[k], 100 + k);
    const auto& spec = m.spec;
    const auto Q = build_Q(spec, some_hypers(spec, static_cast<double>(k)));
    const Eigen::VectorXd xi = random_xi(spec, k);
    const Eigen::VectorXd g = gradient(xi, spec, Q);
    const Eigen::MatrixXd h = hessian(xi, spec, Q);
    Eigen::VectorXd g_fd(spec.dim());
    Eigen::MatrixXd h_fd(spec.dim(), spec.dim());
    for (int i = 0; i < spec.dim(); ++i) {
      const double step = 1e-5;
      Eigen::VectorXd up = xi, dn = xi;
      up[i] += step;
      dn[i] -= step;
      g_fd[i] = (log_cond_posterior(up, spec, Q) - log_cond_posterior(dn, spec, Q)) / (2 * step);
      h_fd.col(i) = (gradient(up, spec, Q) - gradient(dn, spec, Q)) / (2 * step);
    }
    EXPECT_LT(testutil::max_rel_err(g, g_fd), 1e-6) << "prior " << k;
    EXPECT_LT(testutil::max_rel_err(h, h_fd), 1e-5) << "prior " << k;
  }
}

TEST(FitEngine, QLayout) {
  const auto m = small_model(SpatialKind::leroux, 3);
  const auto& spec = m.spec;
  const auto v = some_hypers(spec, 0.0);
  const Eigen::MatrixXd q = Eigen::MatrixXd(build_Q(spec, v));
  const int p = spec.n_fixed, t = spec.n_theta();
  EXPECT_DOUBLE_EQ(q(0, 0), spec.prior.zeta);
  EXPECT_LT((q.block(p, p, t, t) - assemble_penalty(spec.penalty, v.lambda())).cwiseAbs().maxCoeff(), 1e-12);
  const auto g = Eigen::MatrixXd(precision(*spec.spatial, v.spatial(SpatialKind::leroux)));
  EXPECT_LT((q.bottomRightCorner(spec.n_u(), spec.n_u()) - g).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_EQ(q.block(0, p, p, t).cwiseAbs().maxCoeff(), 0.0);
}

TEST(FitEngine, NewtonReachesFixedPoint) {
  for (std::size_t k = 0; k < kAllPriors.size(); ++k) {
    const auto m = small_model(kAllPriors[k], 200 + k);
    const auto& spec = m.spec;
    const auto v = some_hypers(spec, 1.0);
    const auto Q = build_Q(spec, v);
    const auto inner = newton_mode(spec, Q, default_start(spec));
    const double xnorm = inner.mode.lpNorm<Eigen::Infinity>();
    Eigen::VectorXd g = gradient(inner.mode, spec, Q);
    const Eigen::MatrixXd a = sum_to_zero_constraints(spec);
    if (a.rows() > 0) {
      EXPECT_LT((a * inner.mode).cwiseAbs().maxCoeff(), 1e-10);
      g -= a.transpose() * (a * a.transpose()).ldlt().solve(a * g);
    }
    EXPECT_LT(g.lpNorm<Eigen::Infinity>(), 1e-8 * (1 + xnorm)) << "prior " << k;
    const LatentFit fit(inner.mode, inner.chol_lower, a);
    Eigen::MatrixXd prec = -hessian(inner.mode, spec, Q);
    if (a.rows() > 0) prec += a.transpose() * a;
    EXPECT_LT((fit.solve(prec) - Eigen::MatrixXd::Identity(spec.dim(), spec.dim())).cwiseAbs().maxCoeff(), 1e-8);
    // Log posterior never decreases along the iteration.
    for (std::size_t i = 1; i < inner.trace.size(); ++i) EXPECT_GE(inner.trace[i], inner.trace[i - 1] - 1e-9);
  }
}

TEST(FitEngine, ConstrainedCovarianceRespectsConstraints) {
  const auto m = small_model(SpatialKind::icar, 7);
  const auto fit = laplace_at(m.spec, some_hypers(m.spec, 0.0), default_start(m.spec));
  const Eigen::MatrixXd s = fit.covariance();
  EXPECT_LT((fit.constraints() * s).cwiseAbs().maxCoeff(), 1e-10);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  Eigen::VectorXd z(fit.dim());
  for (auto& x : z) x = g(rng);
  EXPECT_LT((fit.constraints() * fit.sample(z)).cwiseAbs().maxCoeff(), 1e-10);
  Eigen::VectorXd c = Eigen::VectorXd::Zero(fit.dim());
  c[3] = 1.0;
  c[fit.dim() - 1] = -2.0;
  EXPECT_NEAR(fit.quadform(c), c.dot(s * c), 1e-10);
  EXPECT_LT((fit.covariance_times(c) - s * c).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(FitEngine, HyperObjectiveMatchesFormulaOracle) {
  for (std::size_t k = 0; k < kAllPriors.size(); ++k) {
    const auto m = small_model(kAllPriors[k], 300 + k, 3, 20);
    HyperObjective obj(m.spec);
    for (int i = 0; i < 5; ++i) {
      const auto v = some_hypers(m.spec, 0.7 * i);
      const double engine = obj.evaluate(v).total();
      double gi = 0.0;
      const double oracle =
          testutil::oracle_hyper_log_posterior(m.spec, v.flat(), obj.last_inner().mode, {}, &gi);
      EXPECT_NEAR(engine, oracle, 1e-8 * std::max(1.0, std::abs(oracle))) << "prior " << k << " point " << i;
      EXPECT_LT(gi, 1e-6);
    }
  }
}

TEST(FitEngine, WarmAndColdStartsAgree) {
  const auto m = small_model(SpatialKind::leroux, 17);
  HyperObjective warm(m.spec);
  for (int i = 0; i < 4; ++i) {
    const auto v = some_hypers(m.spec, 0.9 * i);
    const double a = warm(v);
    const double b = hyper_log_posterior(v, m.spec);
    EXPECT_NEAR(a, b, 1e-7 * std::abs(b));
  }
}

TEST(NelderMead, MinimisesRosenbrock) {
  auto f = [](const Eigen::VectorXd& x) {
    return 100 * std::pow(x[1] - x[0] * x[0], 2) + std::pow(1 - x[0], 2);
  };
  NelderMeadOptions o;
  o.diameter_tol = 1e-8;
  o.spread_tol = 1e-14;
  o.max_evals = 5000;
  const auto r = nelder_mead(f, Eigen::Vector2d(-1.2, 1.0), o);
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.argmin[0], 1.0, 1e-5);
  EXPECT_NEAR(r.argmin[1], 1.0, 1e-5);
}

TEST(NelderMead, TreatsNonFiniteAsInfinity) {
  auto f = [](const Eigen::VectorXd& x) { return x[0] < -1 ? NAN : (x[0] - 2) * (x[0] - 2); };
  const auto r = nelder_mead(f, Eigen::VectorXd::Constant(1, -0.5), {});
  EXPECT_NEAR(r.argmin[0], 2.0, 1e-3);
}

// Intercept plus an independent random effect: a single hyperparameter, so a dense grid is
// an exact enough oracle for the optimiser.
TEST(FitEngine, OptimiserMatchesGridSearch) {
  const int J = 8, T = 30;
  std::mt19937_64 rng(5);
  std::normal_distribution<double> shift(0.0, 0.4);
  std::vector<double> eff(J);
  for (auto& e : eff) e = shift(rng);
  Eigen::VectorXd y(J * T);
  std::vector<int> unit(J * T);
  for (int j = 0; j < J; ++j)
    for (int t = 0; t < T; ++t) {
      std::poisson_distribution<int> pois(std::exp(1.5 + eff[j]));
      y[j * T + t] = pois(rng);
      unit[j * T + t] = j;
    }
  const auto spec = make_model_spec(Eigen::MatrixXd::Ones(J * T, 1), Eigen::MatrixXd(J * T, 0), y,
                                    Eigen::VectorXd::Zero(J * T), unit, PenaltyAssembly(0, 0),
                                    SpatialStructure(SpatialKind::independent, AdjacencyGraph::grid(1, J)));
  HyperObjective obj(spec);
  double best = -INFINITY, arg = 0.0;
  for (int i = 0; i <= 2000; ++i) {
    const double v = -10.0 + 0.01 * i;
    const double f = obj(HyperVector::unflatten(spec, Eigen::VectorXd::Constant(1, v)));
    if (f > best) {
      best = f;
      arg = v;
    }
  }
  ASSERT_GT(arg, -9.9);
  ASSERT_LT(arg, 9.9);
  const auto res = optimize_hypers(spec, HyperVector::zeros(spec));
  EXPECT_TRUE(res.converged);
  EXPECT_NEAR(res.hypers.flat()[0], arg, 0.02);
  const auto again = optimize_hypers(spec, res.hypers);
  EXPECT_NEAR(again.value, res.value, 1e-6);
}

TEST(FitEngine, FitIsDeterministic) {
  const auto m = small_model(SpatialKind::leroux, 21);
  const auto a = fit(m.spec);
  const auto b = fit(m.spec);
  EXPECT_EQ(a.mode(), b.mode());
  EXPECT_EQ(a.chol_lower(), b.chol_lower());
  EXPECT_EQ(a.hypers.flat(), b.hypers.flat());
  EXPECT_TRUE(a.converged);
  EXPECT_EQ(a.grad_norm <= 1e-8 * (1 + a.mode().lpNorm<Eigen::Infinity>()), true);
}

TEST(FitEngine, SpecValidation) {
  auto m = small_model(SpatialKind::independent, 1);
  auto bad = m.spec;
  bad.y[0] = -1;
  EXPECT_THROW(bad.validate(), Error);
  bad = m.spec;
  bad.unit[0] = 99;
  EXPECT_THROW(bad.validate(), Error);
  bad = m.spec;
  bad.offset.resize(3);
  EXPECT_THROW(bad.validate(), Error);
  const auto Q = build_Q(m.spec, HyperVector::zeros(m.spec));
  Eigen::VectorXd huge = Eigen::VectorXd::Zero(m.spec.dim());
  huge[0] = 800.0;
  try {
    newton_mode(m.spec, Q, huge);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::non_convergence);
  }
  NewtonOptions tight;
  tight.max_iter = 0;
  EXPECT_THROW(newton_mode(m.spec, Q, default_start(m.spec), tight), NewtonError);
}
