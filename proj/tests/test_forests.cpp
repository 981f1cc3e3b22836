#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "costcast/forests.hpp"

namespace costcast {
namespace {

std::string bytes_of(const ForestModel& m) {
  std::ostringstream out;
  m.serialize(out);
  return out.str();
}

Dataset four_points() {
  return make_dataset({{0.1}, {0.2}, {0.3}, {0.4}}, {1, 0, 1, 0}, {2, 0, 2, 0}, {1, 0, 1, 0});
}

// Predictable-cost design: tau = exp(x1+x2+x3+x4), gamma = exp(x2+x3+x4+x5).
Dataset predictable(std::size_t n, std::uint64_t seed, std::size_t p = 6) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::normal_distribution<double> eps;
  std::bernoulli_distribution coin(0.5);
  std::vector<std::vector<double>> rows(n, std::vector<double>(p));
  std::vector<int> w(n);
  std::vector<double> y(n), c(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& v : rows[i]) v = u(rng);
    const auto& x = rows[i];
    w[i] = coin(rng);
    const double tau = std::exp(x[0] + x[1] + x[2] + x[3]);
    const double gamma = std::exp(x[1] + x[2] + x[3] + x[4]);
    y[i] = std::max(x[0] + x[2], 0.0) + std::max(x[4] + x[5], 0.0) + w[i] * tau + eps(rng);
    c[i] = w[i] ? static_cast<double>(std::poisson_distribution<int>(gamma)(rng)) : 0.0;
  }
  DatasetOptions opts;
  opts.zero_control_cost = true;
  opts.default_propensity = 0.5;
  return make_dataset(rows, w, y, c, opts);
}

ForestConfig small(ForestMode mode, std::size_t trees = 200) {
  ForestConfig cfg;
  cfg.mode = mode;
  cfg.num_trees = trees;
  cfg.seed = 17;
  return cfg;
}

TEST(Forest, ConstantResponsePredictsConstant) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<std::vector<double>> rows(300, std::vector<double>(3));
  std::vector<int> w(300);
  for (std::size_t i = 0; i < 300; ++i) {
    for (auto& v : rows[i]) v = u(rng);
    w[i] = static_cast<int>(i % 2);
  }
  const auto d = make_dataset(rows, w, std::vector<double>(300, 3.0), std::vector<double>(300, 5.0));
  const auto m = fit_forest(d, {}, small(ForestMode::regression, 50));
  for (const auto& t : m.trees())
    for (std::size_t k = 0; k < t.nodes.size(); ++k)
      if (t.nodes[k].is_leaf()) EXPECT_EQ(t.summaries[k].y, 3.0);
  const auto cost_model = fit_forest(d, {Role::cost}, small(ForestMode::regression, 50));
  EXPECT_EQ(predict_regression(cost_model, std::vector<double>{0.1, 0.2, 0.3}), 5.0);
}

TEST(Forest, DepthZeroTreeHoldsWholeEstimationHalf) {
  auto cfg = small(ForestMode::instrumental, 1);
  cfg.max_depth = 0;
  cfg.local_centering = false;
  const auto d = predictable(200, 3);
  const auto m = fit_forest(d, {}, cfg);
  ASSERT_EQ(m.trees().size(), 1u);
  const auto& t = m.trees()[0];
  ASSERT_EQ(t.nodes.size(), 1u);
  EXPECT_EQ(t.nodes[0].members, t.estimation_half);
  const auto wts = forest_weights(m, d.row(0));
  EXPECT_EQ(wts.entries.size(), t.estimation_half.size());
  for (const auto& [i, a] : wts.entries) EXPECT_DOUBLE_EQ(a, 1.0 / static_cast<double>(t.estimation_half.size()));
}

TEST(Forest, DuplicatedTreeGivesSameWeights) {
  const auto d = predictable(300, 4);
  const auto m = fit_forest(d, {}, small(ForestMode::instrumental, 3));
  const std::size_t one[] = {1}, two[] = {1, 1};
  const auto a = m.select_trees(one).weights(d.row(5)), b = m.select_trees(two).weights(d.row(5));
  ASSERT_EQ(a.entries.size(), b.entries.size());
  for (std::size_t k = 0; k < a.entries.size(); ++k) {
    EXPECT_EQ(a.entries[k].first, b.entries[k].first);
    EXPECT_NEAR(a.entries[k].second, b.entries[k].second, 1e-15);
  }
}

TEST(Forest, WeightsAreNonnegativeAndSumToOne) {
  const auto d = predictable(400, 5);
  for (auto mode : {ForestMode::regression, ForestMode::causal, ForestMode::instrumental}) {
    const auto m = fit_forest(d, {}, small(mode, 60));
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(-1.5, 1.5);
    for (int q = 0; q < 25; ++q) {
      std::vector<double> x(d.dim());
      for (auto& v : x) v = u(rng);
      const auto wts = m.weights(x);
      for (const auto& [i, a] : wts.entries) EXPECT_GT(a, 0.0);
      EXPECT_NEAR(wts.sum(), 1.0, 1e-12);
    }
  }
}

TEST(Forest, FourPointRatioAndCausal) {
  const auto d = four_points();
  for (auto mode : {ForestMode::instrumental, ForestMode::causal}) {
    auto cfg = small(mode, 5);
    cfg.max_depth = 0;
    cfg.subsample_fraction = 1.0;
    cfg.local_centering = false;
    const auto m = fit_forest(d, {}, cfg);
    EXPECT_NEAR(predict_ratio(m, std::vector<double>{0.25}), 2.0, 1e-12);
  }
}

// Weighted covariance ratio computed directly from the explicit weights.
double ratio_from_weights(const ForestModel& m, std::span<const double> x) {
  const auto wts = m.weights(x);
  double ybar = 0, wbar = 0, cbar = 0;
  for (const auto& [i, a] : wts.entries) {
    ybar += a * m.response()[i];
    wbar += a * m.instrument()[i];
    cbar += a * m.exposure()[i];
  }
  double num = 0, den = 0;
  for (const auto& [i, a] : wts.entries) {
    num += a * (m.response()[i] - ybar) * (m.instrument()[i] - wbar);
    den += a * (m.exposure()[i] - cbar) * (m.instrument()[i] - wbar);
  }
  return num / den;
}

TEST(Forest, PredictionMatchesExplicitWeightedCovariances) {
  const auto d = predictable(500, 6);
  const auto m = fit_forest(d, {}, small(ForestMode::instrumental, 100));
  for (std::size_t i = 0; i < 20; ++i) {
    const auto x = d.row(i);
    EXPECT_NEAR(m.predict_ratio(x), ratio_from_weights(m, x), 1e-9 * (1 + std::abs(m.predict_ratio(x))));
  }
}

TEST(Forest, HonestyAndLeafSizes) {
  const auto d = predictable(800, 7);
  const auto m = fit_forest(d, {}, small(ForestMode::instrumental, 20));
  const auto min_size = m.config().min_node_size;
  EXPECT_EQ(min_size, 10u);
  for (const auto& t : m.trees()) {
    std::vector<char> in_split(d.size(), 0);
    for (auto i : t.split_half) in_split[i] = 1;
    for (auto i : t.estimation_half) EXPECT_FALSE(in_split[i]);
    std::size_t members = 0;
    for (const auto& node : t.nodes) {
      if (!node.is_leaf()) continue;
      members += node.members.size();
      if (t.nodes.size() > 1) EXPECT_GE(node.members.size(), min_size);
    }
    EXPECT_EQ(members, t.estimation_half.size());
  }
}

TEST(Forest, ThreadCountDoesNotChangeModel) {
  const auto d = predictable(400, 8);
  for (auto mode : {ForestMode::regression, ForestMode::instrumental}) {
    auto cfg = small(mode, 40);
    cfg.threads = 1;
    const auto a = bytes_of(fit_forest(d, {}, cfg));
    cfg.threads = 8;
    const auto b = bytes_of(fit_forest(d, {}, cfg));
    EXPECT_EQ(a, b);
  }
}

TEST(Forest, SerializationRoundTrip) {
  const auto d = predictable(300, 9);
  const auto m = fit_forest(d, {}, small(ForestMode::instrumental, 30));
  std::istringstream in(bytes_of(m));
  const auto back = ForestModel::deserialize(in);
  EXPECT_EQ(bytes_of(back), bytes_of(m));
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(back.predict(d.row(i)), m.predict(d.row(i)));
  std::string truncated = bytes_of(m).substr(0, 100);
  std::istringstream bad(truncated);
  EXPECT_THROW(ForestModel::deserialize(bad), Error);
}

TEST(Forest, CausalEqualsInstrumentalWithCostBoundToTreatment) {
  auto d = predictable(600, 10);
  std::vector<double> wc(d.w().begin(), d.w().end());
  DatasetOptions opts;
  opts.default_propensity = 0.5;
  const Dataset bound(d.dim(), std::vector<double>(d.covariates_colmajor().begin(), d.covariates_colmajor().end()),
                      std::vector<int>(d.w().begin(), d.w().end()), std::vector<double>(d.y().begin(), d.y().end()),
                      wc, opts);
  for (bool centering : {false, true}) {
    auto ci = small(ForestMode::instrumental, 50), cc = small(ForestMode::causal, 50);
    ci.local_centering = cc.local_centering = centering;
    const auto mi = fit_forest(bound, {}, ci), mc = fit_forest(bound, {}, cc);
    for (std::size_t i = 0; i < 50; ++i)
      EXPECT_NEAR(mi.predict_ratio(bound.row(i)), mc.predict_ratio(bound.row(i)), 1e-12);
  }
}

TEST(Forest, KnownPropensityCentersTreatment) {
  const auto d = predictable(300, 11);
  const auto m = fit_forest(d, {}, small(ForestMode::instrumental, 20));
  for (std::size_t i = 0; i < d.size(); ++i) {
    ASSERT_EQ(m.instrument_center()[i], 0.5);
    ASSERT_EQ(m.instrument()[i], d.w()[i] - 0.5);
  }
}

TEST(Forest, StepFunctionRegression) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-1, 1);
  std::normal_distribution<double> eps(0.0, 0.1);
  const std::size_t n = 3000;
  std::vector<std::vector<double>> rows(n, std::vector<double>(2));
  std::vector<int> w(n);
  std::vector<double> y(n), c(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    rows[i] = {u(rng), u(rng)};
    w[i] = static_cast<int>(i % 2);
    y[i] = (rows[i][0] > 0 ? 4.0 : 1.0) + eps(rng);
  }
  const auto d = make_dataset(rows, w, y, c);
  const auto m = fit_forest(d, {}, small(ForestMode::regression, 200));
  EXPECT_NEAR(m.predict_regression(std::vector<double>{0.6, 0.0}), 4.0, 0.1);
  EXPECT_NEAR(m.predict_regression(std::vector<double>{-0.6, 0.3}), 1.0, 0.1);
}

// p = 1, rho jumps at x = 0. Each side's forest estimate is compared with the
// covariance ratio computed from that side's raw data.
TEST(Forest, LocalRatioMatchesSidewiseOracle) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(-1, 1);
  std::normal_distribution<double> eps(0.0, 0.5);
  std::bernoulli_distribution coin(0.5);
  const std::size_t n = 5000;
  std::vector<std::vector<double>> rows(n, std::vector<double>(1));
  std::vector<int> w(n);
  std::vector<double> y(n), c(n);
  for (std::size_t i = 0; i < n; ++i) {
    rows[i][0] = u(rng);
    w[i] = coin(rng);
    const double gamma = rows[i][0] > 0 ? 2.0 : 1.0;
    const double tau = rows[i][0] > 0 ? 1.0 : 3.0;
    c[i] = w[i] ? gamma + 0.2 * eps(rng) + 0.5 : 0.5;
    y[i] = w[i] * tau + eps(rng);
  }
  DatasetOptions opts;
  opts.default_propensity = 0.5;
  const auto d = make_dataset(rows, w, y, c, opts);
  auto side_ratio = [&](bool right) {
    double sy = 0, sw = 0, sc = 0, syw = 0, scw = 0, k = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if ((rows[i][0] > 0) != right) continue;
      sy += y[i];
      sw += w[i];
      sc += c[i];
      syw += y[i] * w[i];
      scw += c[i] * w[i];
      ++k;
    }
    return (syw / k - sy / k * sw / k) / (scw / k - sc / k * sw / k);
  };
  const auto m = fit_forest(d, {}, small(ForestMode::instrumental, 300));
  EXPECT_NEAR(m.predict_ratio(std::vector<double>{0.5}), side_ratio(true), 0.1);
  EXPECT_NEAR(m.predict_ratio(std::vector<double>{-0.5}), side_ratio(false), 0.1);
}

TEST(Forest, RatioErrorShrinksWithSampleSize) {
  auto mse = [](std::size_t n) {
    const auto d = predictable(n, 21);
    const auto m = fit_forest(d, {}, small(ForestMode::instrumental, 300));
    const auto test = predictable(500, 99);
    double err = 0, cov = 0, mp = 0, mt = 0, vp = 0, vt = 0;
    std::vector<double> pred(test.size()), truth(test.size());
    for (std::size_t i = 0; i < test.size(); ++i) {
      pred[i] = m.predict_ratio(test.row(i));
      truth[i] = std::exp(test.x(i, 0) - test.x(i, 4));
      err += (pred[i] - truth[i]) * (pred[i] - truth[i]);
      mp += pred[i];
      mt += truth[i];
    }
    mp /= test.size();
    mt /= test.size();
    for (std::size_t i = 0; i < test.size(); ++i) {
      cov += (pred[i] - mp) * (truth[i] - mt);
      vp += (pred[i] - mp) * (pred[i] - mp);
      vt += (truth[i] - mt) * (truth[i] - mt);
    }
    return std::pair{err / test.size(), cov / std::sqrt(vp * vt)};
  };
  const auto [mse_small, corr_small] = mse(500);
  const auto [mse_large, corr_large] = mse(2000);
  EXPECT_LT(mse_large, mse_small);
  EXPECT_GT(corr_large, 0.6);
  (void)corr_small;
}

TEST(Forest, Errors) {
  const auto d = predictable(100, 14);
  auto cfg = small(ForestMode::instrumental, 5);
  cfg.mtry = 50;
  EXPECT_THROW(fit_forest(d, {}, cfg), Error);
  cfg = small(ForestMode::instrumental, 0);
  EXPECT_THROW(fit_forest(d, {}, cfg), Error);
  cfg = small(ForestMode::instrumental, 5);
  cfg.subsample_fraction = 0.0;
  EXPECT_THROW(fit_forest(d, {}, cfg), Error);

  const auto m = fit_forest(d, {}, small(ForestMode::instrumental, 5));
  try {
    m.predict_ratio(std::vector<double>{0.0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DimensionMismatch);
  }

  // All-control rows, reached through an unchecked subset.
  std::vector<std::size_t> controls;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (!d.w()[i]) controls.push_back(i);
  try {
    fit_forest(d.subset(controls), {}, small(ForestMode::causal, 5));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateNode);
  }

  // No cost variation at all: the root denominator is zero.
  auto flat = d;
  std::vector<double> zero(d.size(), 0.0);
  const Dataset no_cost(d.dim(), std::vector<double>(d.covariates_colmajor().begin(), d.covariates_colmajor().end()),
                        std::vector<int>(d.w().begin(), d.w().end()), std::vector<double>(d.y().begin(), d.y().end()),
                        zero);
  auto nc = small(ForestMode::instrumental, 3);
  nc.local_centering = false;
  const auto mz = fit_forest(no_cost, {}, nc);
  try {
    mz.predict_ratio(d.row(0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ZeroDenominator);
  }
}

}  // namespace
}  // namespace costcast
