#include <gtest/gtest.h>

#include <boost/multiprecision/cpp_int.hpp>

#include <cmath>
#include <random>
#include <sstream>

#include "costcast/estimators.hpp"

namespace costcast {
namespace {

using Rational = boost::multiprecision::cpp_rational;

// tau(x) = mu(x) x'beta, gamma(x) = mu(x) with mu(x) = exp(0.5 x1).
struct LinearDraw {
  Dataset data;
  std::vector<double> hy, hw, hc;  // true nuisances
};

LinearDraw linear_draw(std::size_t n, const std::vector<double>& beta, std::uint64_t seed, double noise = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::normal_distribution<double> eps(0.0, noise);
  std::bernoulli_distribution coin(0.5);
  const std::size_t p = beta.size();
  std::vector<std::vector<double>> rows(n, std::vector<double>(p));
  std::vector<int> w(n);
  std::vector<double> y(n), c(n);
  LinearDraw out;
  for (std::size_t i = 0; i < n; ++i) {
    double xb = 0;
    for (std::size_t j = 0; j < p; ++j) {
      rows[i][j] = u(rng);
      xb += rows[i][j] * beta[j];
    }
    const double mu = std::exp(0.5 * rows[i][0]);
    const double base = std::max(rows[i][0] + rows[i][p - 1], 0.0);
    w[i] = coin(rng);
    c[i] = w[i] ? static_cast<double>(std::poisson_distribution<int>(mu)(rng)) : 0.0;
    y[i] = base + w[i] * mu * xb + eps(rng);
    out.hy.push_back(base + 0.5 * mu * xb);
    out.hw.push_back(0.5);
    out.hc.push_back(0.5 * mu);
  }
  DatasetOptions opts;
  opts.zero_control_cost = true;
  opts.default_propensity = 0.5;
  out.data = make_dataset(rows, w, y, c, opts);
  return out;
}

NuisanceFit true_nuisances(const LinearDraw& d, int K, std::uint64_t seed) {
  NuisanceFit nu;
  nu.plan = make_folds(d.data, K, seed);
  nu.hy = d.hy;
  nu.hw = d.hw;
  nu.hc = d.hc;
  nu.known_propensity = true;
  return nu;
}

ForestConfig nuisance_cfg(std::size_t trees = 50) {
  ForestConfig cfg;
  cfg.num_trees = trees;
  cfg.seed = 3;
  return cfg;
}

TEST(Dml, NoiselessRecoversBetaExactly) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  std::bernoulli_distribution coin(0.5);
  const std::vector<double> beta{1.0, -2.0};
  std::vector<std::vector<double>> rows(400, std::vector<double>(2));
  std::vector<int> w(400);
  std::vector<double> y(400), c(400);
  NuisanceFit nu;
  for (std::size_t i = 0; i < 400; ++i) {
    rows[i] = {u(rng), u(rng)};
    w[i] = coin(rng);
    const double xb = rows[i][0] * beta[0] + rows[i][1] * beta[1];
    c[i] = w[i];
    y[i] = w[i] * xb;
    nu.hy.push_back(0.5 * xb);
    nu.hw.push_back(0.5);
    nu.hc.push_back(0.5);
  }
  const auto d = make_dataset(rows, w, y, c);
  nu.plan = make_folds(d, 5, 2);
  const auto fit = dml_from_nuisances(d, nu);
  EXPECT_NEAR(fit.beta(0), 1.0, 1e-8);
  EXPECT_NEAR(fit.beta(1), -2.0, 1e-8);
  ASSERT_EQ(fit.beta_per_fold.size(), 5u);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(2);
  for (const auto& b : fit.beta_per_fold) mean += b / 5.0;
  EXPECT_NEAR((mean - fit.beta).norm(), 0.0, 1e-15);
}

// K = 1 with zero nuisances is the just-identified IV estimator
// (sum x w c x')^{-1} sum x w y, solved here by Cramer's rule.
TEST(Dml, ZeroNuisanceSingleFoldIsIvEstimator) {
  const auto draw = linear_draw(300, {0.7, -0.3}, 4);
  const auto& d = draw.data;
  NuisanceFit nu;
  nu.plan.fold_assignment.assign(d.size(), 0);
  nu.plan.folds = 1;
  nu.hy.assign(d.size(), 0.0);
  nu.hw.assign(d.size(), 0.0);
  nu.hc.assign(d.size(), 0.0);
  const auto fit = dml_from_nuisances(d, nu);
  double a = 0, b = 0, cc = 0, r0 = 0, r1 = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double k = d.w()[i] * d.c()[i], x0 = d.x(i, 0), x1 = d.x(i, 1);
    a += k * x0 * x0;
    b += k * x0 * x1;
    cc += k * x1 * x1;
    r0 += d.w()[i] * d.y()[i] * x0;
    r1 += d.w()[i] * d.y()[i] * x1;
  }
  const double det = a * cc - b * b;
  EXPECT_NEAR(fit.beta(0), (r0 * cc - b * r1) / det, 1e-10);
  EXPECT_NEAR(fit.beta(1), (a * r1 - b * r0) / det, 1e-10);
}

TEST(Dml, VcovSymmetricPositiveSemidefinite) {
  const auto draw = linear_draw(2000, {1.0, -0.5}, 5);
  const auto fit = dml_from_nuisances(draw.data, true_nuisances(draw, 5, 1));
  EXPECT_NEAR((fit.vcov - fit.vcov.transpose()).norm(), 0.0, 1e-15);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(fit.vcov);
  EXPECT_GE(es.eigenvalues().minCoeff(), 0.0);
  EXPECT_EQ(fit.condition_per_fold.size(), 5u);
}

TEST(Dml, NullEffectWithinThreeStandardErrors) {
  int inside0 = 0, inside1 = 0;
  const int reps = 400;
  for (int r = 0; r < reps; ++r) {
    const auto draw = linear_draw(1000, {0.0, 0.0}, 100 + r);
    const auto fit = dml_from_nuisances(draw.data, true_nuisances(draw, 5, r));
    const auto se = fit.se();
    inside0 += std::abs(fit.beta(0)) < 3 * se(0);
    inside1 += std::abs(fit.beta(1)) < 3 * se(1);
  }
  EXPECT_GE(inside0, static_cast<int>(0.97 * reps));
  EXPECT_GE(inside1, static_cast<int>(0.97 * reps));
}

TEST(Dml, SandwichMatchesMonteCarloSpread) {
  const std::vector<double> beta{1.0, -0.5};
  const int reps = 300;
  std::vector<Eigen::VectorXd> est;
  Eigen::VectorXd mean_se = Eigen::VectorXd::Zero(2);
  for (int r = 0; r < reps; ++r) {
    const auto draw = linear_draw(4000, beta, 1000 + r);
    const auto fit = dml_from_nuisances(draw.data, true_nuisances(draw, 5, r));
    est.push_back(fit.beta);
    mean_se += fit.se() / reps;
  }
  for (int j = 0; j < 2; ++j) {
    double m = 0, v = 0;
    for (const auto& b : est) m += b(j) / reps;
    for (const auto& b : est) v += (b(j) - m) * (b(j) - m) / (reps - 1);
    EXPECT_NEAR(std::sqrt(v) / mean_se(j), 1.0, 0.10) << "coordinate " << j;
  }
}

TEST(Dml, ForestNuisancesAreCrossFitted) {
  const auto draw = linear_draw(600, {1.0, -0.5}, 6);
  const auto fit = fit_dml(draw.data, 3, nuisance_cfg(), 9);
  const auto& nu = fit.nuisances;
  ASSERT_EQ(nu.training_rows.size(), 3u);
  for (std::size_t i = 0; i < draw.data.size(); ++i) {
    const auto& rows = nu.training_rows[static_cast<std::size_t>(nu.plan.fold_assignment[i])];
    ASSERT_FALSE(std::binary_search(rows.begin(), rows.end(), i)) << "row " << i;
    ASSERT_EQ(nu.hw[i], 0.5);
  }
  EXPECT_TRUE(nu.known_propensity);
  EXPECT_LT(std::abs(fit.beta(0) - 1.0), 4 * fit.se()(0));
}

TEST(Dml, Errors) {
  // Second covariate is an exact multiple of the first.
  std::vector<std::vector<double>> rows;
  std::vector<int> w;
  std::vector<double> y, c;
  for (int i = 0; i < 40; ++i) {
    const double x = (i % 7) / 7.0;
    rows.push_back({x, 2 * x});
    w.push_back(i % 2);
    y.push_back(x * w.back());
    c.push_back(w.back());
  }
  const auto d = make_dataset(rows, w, y, c);
  NuisanceFit nu;
  nu.plan = make_folds(d, 2, 1);
  nu.hy.assign(40, 0.0);
  nu.hw.assign(40, 0.5);
  nu.hc.assign(40, 0.5);
  try {
    dml_from_nuisances(d, nu);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SingularMoment);
    EXPECT_NE(std::string(e.what()).find("fold"), std::string::npos);
  }
  const auto small = make_dataset({{1, 2, 3}, {2, 3, 1}, {3, 1, 2}, {1, 1, 1}}, {1, 0, 1, 0}, {1, 0, 1, 0}, {1, 0, 1, 0});
  NuisanceFit tiny;
  tiny.plan = make_folds(small, 2, 1);
  tiny.hy.assign(4, 0.0);
  tiny.hw.assign(4, 0.5);
  tiny.hc.assign(4, 0.5);
  try {
    dml_from_nuisances(small, tiny);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::FoldTooSmall);
  }
}

// Random finite support with rho(x) = x'beta exactly.
std::vector<SupportPoint<Rational>> random_support(std::mt19937_64& rng, const std::vector<Rational>& beta,
                                                   std::size_t points) {
  std::uniform_int_distribution<int> small(-4, 4), positive(1, 5), prob(1, 9);
  std::vector<SupportPoint<Rational>> support;
  for (std::size_t k = 0; k < points; ++k) {
    SupportPoint<Rational> s;
    Rational xb = 0;
    for (const auto& b : beta) {
      s.x.emplace_back(small(rng), positive(rng));
      xb += s.x.back() * b;
    }
    s.mass = Rational(1, static_cast<int>(points));
    s.e = Rational(prob(rng), 10);
    s.nu0 = Rational(positive(rng), 3);
    s.nu1 = s.nu0 + Rational(positive(rng), 2);
    s.mu0 = Rational(small(rng), positive(rng));
    s.mu1 = s.mu0 + xb * (s.nu1 - s.nu0);
    s.dy = Rational(small(rng), positive(rng));
    s.dw = Rational(small(rng), 10);
    s.dc = Rational(small(rng), positive(rng));
    support.push_back(s);
  }
  return support;
}

TEST(Orthogonality, PopulationDerivativeIsExactlyZero) {
  std::mt19937_64 rng(7);
  const std::vector<Rational> beta{Rational(3, 2), Rational(-1, 3)};
  for (int trial = 0; trial < 50; ++trial) {
    const auto base = random_support(rng, beta, 4);
    for (const Rational zero = 0; const auto& m : population_moment(base, beta, zero)) ASSERT_EQ(m, 0);
    for (int dir = 0; dir < 3; ++dir) {
      auto support = base;
      for (auto& s : support) {
        if (dir != 0) s.dy = 0;
        if (dir != 1) s.dw = 0;
        if (dir != 2) s.dc = 0;
      }
      const Rational h(1, 1000);
      const auto up = population_moment(support, beta, h);
      const auto down = population_moment(support, beta, Rational(-h));
      for (std::size_t j = 0; j < beta.size(); ++j) ASSERT_EQ((up[j] - down[j]) / (2 * h), 0) << "direction " << dir;
    }
  }
}

TEST(Orthogonality, ZeroPerturbationGivesZeroDrift) {
  const auto draw = linear_draw(500, {1.0, -0.5}, 8);
  const auto nu = true_nuisances(draw, 2, 1);
  const auto dir = random_directions(500, 3);
  const Eigen::Vector2d beta(1.0, -0.5);
  const auto m0 = empirical_moment(draw.data, beta, nu.hy, nu.hw, nu.hc);
  const auto m1 = perturbed_moment(draw.data, beta, nu, dir, 0.0, true, true, true);
  EXPECT_EQ((m1 - m0).norm(), 0.0);
  const auto rep = orthogonality_check(draw.data, beta, nu, 0.0);
  EXPECT_EQ(rep.d_y + rep.d_w + rep.d_c, 0.0);
}

TEST(Orthogonality, EmpiricalDerivativesAreSamplingNoise) {
  const auto draw = linear_draw(100000, {1.0, -0.5}, 9);
  const auto nu = true_nuisances(draw, 2, 1);
  const auto rep = orthogonality_check(draw.data, Eigen::Vector2d(1.0, -0.5), nu, 0.1, 4);
  // Each derivative is a mean of 1e5 zero-mean bounded terms.
  EXPECT_LT(rep.d_y, 0.02);
  EXPECT_LT(rep.d_w, 0.02);
  EXPECT_LT(rep.d_c, 0.02);
}

// Exact Cov(Y,W)/Cov(C,W) per cell equals delta_Y/delta_C.
TEST(RatioIdentity, CovarianceRatioEqualsEffectRatio) {
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<int> val(-6, 6), pos(1, 6), atoms(1, 4), prob(1, 9);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<PotentialAtom<Rational>> cell;
    const int k = atoms(rng);
    for (int a = 0; a < k; ++a) {
      PotentialAtom<Rational> atom;
      atom.mass = Rational(1, k);
      atom.y0 = Rational(val(rng), pos(rng));
      atom.y1 = Rational(val(rng), pos(rng));
      atom.c0 = Rational(pos(rng) - 1, pos(rng));
      atom.c1 = atom.c0 + Rational(pos(rng), pos(rng));
      cell.push_back(atom);
    }
    const Rational e(prob(rng), 10);
    EXPECT_EQ(cell_covariance_ratio(cell, e), cell_effect_ratio(cell));
  }
}

// ---------------------------------------------------------------------------
// Priority models

Dataset ratio_two_data(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::bernoulli_distribution coin(0.5);
  std::vector<std::vector<double>> rows(n, std::vector<double>(3));
  std::vector<int> w(n);
  std::vector<double> y(n), c(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& v : rows[i]) v = u(rng);
    w[i] = coin(rng);
    c[i] = w[i] * (1.0 + rows[i][0] * rows[i][0] + 0.5 * rows[i][1]);
    y[i] = std::max(rows[i][2], 0.0) + 2.0 * c[i];
  }
  DatasetOptions opts;
  opts.zero_control_cost = true;
  opts.default_propensity = 0.5;
  return make_dataset(rows, w, y, c, opts);
}

ForestConfig model_cfg(std::size_t trees = 100) {
  ForestConfig cfg;
  cfg.num_trees = trees;
  cfg.seed = 11;
  return cfg;
}

TEST(PriorityModels, IvForestRecoversConstantRatio) {
  const auto d = ratio_two_data(1500, 1);
  const auto m = fit_iv_forest(d, model_cfg());
  EXPECT_EQ(m.kind(), ModelKind::iv_forest);
  const auto test = ratio_two_data(100, 2);
  for (double s : score(m, test)) EXPECT_NEAR(s, 2.0, 0.1);
  EXPECT_EQ(score(fit_iv_forest(d, model_cfg()), test), score(m, test));
}

TEST(PriorityModels, IvWithCostBoundToTreatmentEqualsIgnoreCost) {
  const auto src = ratio_two_data(500, 3);
  std::vector<double> c(src.w().begin(), src.w().end());
  DatasetOptions opts;
  opts.default_propensity = 0.5;
  const Dataset d(src.dim(), std::vector<double>(src.covariates_colmajor().begin(), src.covariates_colmajor().end()),
                  std::vector<int>(src.w().begin(), src.w().end()), std::vector<double>(src.y().begin(), src.y().end()),
                  c, opts);
  const auto iv = score(fit_iv_forest(d, model_cfg(40)), src);
  const auto ign = score(fit_ignore_cost(d, model_cfg(40)), src);
  for (std::size_t i = 0; i < iv.size(); ++i) EXPECT_NEAR(iv[i], ign[i], 1e-12);
}

TEST(PriorityModels, DirectRatioConstant) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1, 1);
  std::normal_distribution<double> eps(0.0, 0.1);
  std::vector<std::vector<double>> rows(1000, std::vector<double>(2));
  std::vector<int> w(1000);
  std::vector<double> y(1000), c(1000);
  for (std::size_t i = 0; i < 1000; ++i) {
    rows[i] = {u(rng), u(rng)};
    w[i] = static_cast<int>(i % 2);
    c[i] = w[i];
    y[i] = 2.0 * w[i] + eps(rng);
  }
  DatasetOptions opts;
  opts.zero_control_cost = true;
  opts.default_propensity = 0.5;
  const auto d = make_dataset(rows, w, y, c, opts);
  const auto m = fit_direct_ratio(d, model_cfg());
  for (std::size_t i = 0; i < 20; ++i) EXPECT_NEAR(m.score(d.row(i)), 2.0, 0.1);
}

TEST(PriorityModels, DirectRatioGuardFlagsZeroCost) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.5, 1.0);
  std::vector<std::vector<double>> rows(800, std::vector<double>(1));
  std::vector<int> w(800);
  std::vector<double> y(800), c(800);
  for (std::size_t i = 0; i < 800; ++i) {
    rows[i][0] = (i % 4 < 2 ? -1.0 : 1.0) * u(rng);
    w[i] = static_cast<int>(i % 2);
    c[i] = (w[i] && rows[i][0] > 0) ? 1.0 : 0.0;
    y[i] = w[i] * 1.0 + 0.01 * u(rng);
  }
  DatasetOptions opts;
  opts.zero_control_cost = true;
  opts.default_propensity = 0.5;
  const auto d = make_dataset(rows, w, y, c, opts);
  const auto m = fit_direct_ratio(d, model_cfg(30));
  bool flagged = false;
  EXPECT_EQ(m.score(std::vector<double>{-0.8}, &flagged), PriorityModel::kLarge);
  EXPECT_TRUE(flagged);
  EXPECT_LT(m.score(std::vector<double>{0.8}, &flagged), 10.0);
  EXPECT_FALSE(flagged);
  const auto batch = m.score_all(d);
  EXPECT_EQ(batch.guarded[0], 1);
}

TEST(PriorityModels, DirectRatioErrors) {
  auto d = ratio_two_data(200, 6);
  std::vector<double> c(d.c().begin(), d.c().end());
  const Dataset flagless(d.dim(), std::vector<double>(d.covariates_colmajor().begin(), d.covariates_colmajor().end()),
                         std::vector<int>(d.w().begin(), d.w().end()), std::vector<double>(d.y().begin(), d.y().end()),
                         c);
  EXPECT_THROW(fit_direct_ratio(flagless, model_cfg(5)), Error);
  std::vector<int> one_treated(20, 0);
  one_treated[3] = 1;
  std::vector<std::vector<double>> rows(20, std::vector<double>{0.0});
  for (int i = 0; i < 20; ++i) rows[i][0] = i;
  std::vector<double> cost(20, 0.0);
  cost[3] = 1.0;
  DatasetOptions opts;
  opts.zero_control_cost = true;
  try {
    fit_direct_ratio(make_dataset(rows, one_treated, std::vector<double>(20, 0.0), cost, opts), model_cfg(5));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoTreatedUnits);
  }
}

TEST(PriorityModels, IgnoreCostNullEffect) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1, 1);
  std::normal_distribution<double> eps(0.0, 0.2);
  std::vector<std::vector<double>> rows(2000, std::vector<double>(2));
  std::vector<int> w(2000);
  std::vector<double> y(2000), c(2000);
  for (std::size_t i = 0; i < 2000; ++i) {
    rows[i] = {u(rng), u(rng)};
    w[i] = static_cast<int>(i % 2);
    y[i] = rows[i][0] + eps(rng);
    c[i] = w[i];
  }
  DatasetOptions opts;
  opts.default_propensity = 0.5;
  const auto d = make_dataset(rows, w, y, c, opts);
  const auto m = fit_ignore_cost(d, model_cfg());
  double mean_abs = 0;
  for (std::size_t i = 0; i < 100; ++i) mean_abs += std::abs(m.score(d.row(i))) / 100;
  EXPECT_LT(mean_abs, 0.1);
}

TEST(PriorityModels, BatchEqualsLoopAndDimensionCheck) {
  const auto d = ratio_two_data(400, 8);
  for (const auto& m : {fit_iv_forest(d, model_cfg(20)), fit_ignore_cost(d, model_cfg(20)),
                        fit_direct_ratio(d, model_cfg(20))}) {
    const auto batch = m.score_all(d, 4).scores;
    for (std::size_t i = 0; i < d.size(); ++i) ASSERT_NEAR(batch[i], m.score(d.row(i)), 1e-12);
    try {
      m.score(std::vector<double>{1.0});
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::DimensionMismatch);
    }
  }
}

TEST(PriorityModels, DmlModelScoresLinearly) {
  const auto draw = linear_draw(1000, {1.0, -0.5}, 12);
  const auto m = fit_dml_model(draw.data, 2, nuisance_cfg(20), 3);
  const std::vector<double> x{0.3, -0.2};
  EXPECT_NEAR(m.score(x), m.beta()[0] * 0.3 - m.beta()[1] * 0.2, 1e-15);
}

TEST(PriorityModels, SerializationRoundTrip) {
  const auto d = ratio_two_data(300, 9);
  const auto draw = linear_draw(300, {1.0, 0.5, 0.0}, 13);
  std::vector<PriorityModel> models{fit_iv_forest(d, model_cfg(10)), fit_ignore_cost(d, model_cfg(10)),
                                    fit_direct_ratio(d, model_cfg(10)),
                                    fit_dml_model(draw.data, 2, nuisance_cfg(10), 1)};
  for (const auto& m : models) {
    std::stringstream buf;
    m.serialize(buf);
    const std::string bytes = buf.str();
    EXPECT_EQ(bytes.substr(0, 8), "COSTCAST");
    const auto back = PriorityModel::deserialize(buf);
    EXPECT_EQ(back.kind(), m.kind());
    std::ostringstream again;
    back.serialize(again);
    EXPECT_EQ(again.str(), bytes);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(back.score(d.row(i)), m.score(d.row(i)));
  }
  std::istringstream junk("NOTAMODEL....");
  EXPECT_THROW(PriorityModel::deserialize(junk), Error);
}

}  // namespace
}  // namespace costcast
