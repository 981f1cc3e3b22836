#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "costcast/core_data.hpp"
#include "costcast/error.hpp"
#include "costcast/estimators.hpp"
#include "costcast/evaluation.hpp"
#include "costcast/forests.hpp"
#include "costcast/rng.hpp"

namespace costcast {

enum class Design : std::uint8_t { unpredictable_cost, predictable_cost, linear_rho, custom };

inline std::string to_string(Design d) {
  switch (d) {
    case Design::unpredictable_cost: return "unpredictable";
    case Design::predictable_cost: return "predictable";
    case Design::linear_rho: return "linear_rho";
    case Design::custom: return "custom";
  }
  return "unknown";
}

inline Design parse_design(std::string_view s) {
  if (s == "unpredictable" || s == "unpredictable_cost") return Design::unpredictable_cost;
  if (s == "predictable" || s == "predictable_cost") return Design::predictable_cost;
  if (s == "linear_rho") return Design::linear_rho;
  fail(ErrorCode::ConfigInvalid, "unknown design '" + std::string(s) + "'");
}

struct SimConfig {
  Design design = Design::predictable_cost;
  std::size_t n_train = 1000;
  std::size_t n_test = 10000;
  double pi = 0.5;
  std::size_t replicates = 100;
  std::uint64_t seed = 1;
  std::size_t p = 12;
  // linear_rho: rho(x) = x' beta. Empty means (1, -0.5, 0, ...).
  std::vector<double> beta;
  // custom: baseline, effect, and incremental cost as functions of x.
  std::function<double(std::span<const double>)> base_fn, tau_fn, gamma_fn;

  void validate() const {
    if (!(pi > 0.0 && pi < 1.0)) fail(ErrorCode::ConfigInvalid, "pi must lie in (0,1)");
    if (replicates < 1) fail(ErrorCode::ConfigInvalid, "replicates must be >= 1");
    const std::size_t need = design == Design::linear_rho ? 1 : (design == Design::custom ? 1 : 6);
    if (p < need) fail(ErrorCode::ConfigInvalid, "design needs p >= " + std::to_string(need));
    if (design == Design::linear_rho && !beta.empty() && beta.size() != p)
      fail(ErrorCode::ConfigInvalid, "beta must have length p");
    if (design == Design::custom && (!base_fn || !tau_fn || !gamma_fn))
      fail(ErrorCode::ConfigInvalid, "custom design needs base, tau and gamma functions");
  }

  std::vector<double> linear_beta() const {
    if (!beta.empty()) return beta;
    std::vector<double> b(p, 0.0);
    b[0] = 1.0;
    if (p > 1) b[1] = -0.5;
    return b;
  }
};

// A simulated dataset with per-row truth.
struct TruthTagged {
  Dataset data;
  std::vector<double> tau, gamma, rho;
};

struct UnitTruth {
  double base = 0.0, tau = 0.0, gamma = 0.0;
};

// Linear-ratio truth: gamma = mu, tau = mu x'beta, rho = x'beta.
inline UnitTruth linear_rho_truth(std::span<const double> x, std::span<const double> beta, double mu) {
  double xb = 0.0;
  for (std::size_t j = 0; j < beta.size(); ++j) xb += x[j] * beta[j];
  return {0.0, mu * xb, mu};
}

inline UnitTruth design_truth(const SimConfig& cfg, std::span<const double> x) {
  switch (cfg.design) {
    case Design::unpredictable_cost:
    case Design::predictable_cost: {
      UnitTruth t;
      t.base = std::max(x[0] + x[2], 0.0) + std::max(x[4] + x[5], 0.0);
      t.tau = std::exp(x[0] + x[1] + x[2] + x[3]);
      t.gamma = cfg.design == Design::predictable_cost ? std::exp(x[1] + x[2] + x[3] + x[4]) : 1.0;
      return t;
    }
    case Design::linear_rho: {
      const auto beta = cfg.linear_beta();
      auto t = linear_rho_truth(x, beta, std::exp(0.5 * x[0]));
      t.base = std::max(x[0] + x[cfg.p - 1], 0.0);
      return t;
    }
    case Design::custom: return {cfg.base_fn(x), cfg.tau_fn(x), cfg.gamma_fn(x)};
  }
  return {};
}

// Draws n units: X ~ U(-1,1)^p, W ~ Bern(pi), Y = base(X) + W tau(X) + N(0,1),
// C = W Pois(gamma(X)). Control cost is zero and the propensity is pi.
inline TruthTagged generate(const SimConfig& cfg, std::uint64_t seed, std::size_t n) {
  cfg.validate();
  if (n < 2) fail(ErrorCode::ConfigInvalid, "need at least two rows");
  Rng rng = make_rng(seed, 0, 0x51);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t p = cfg.p;
  std::vector<double> x(n * p), y(n), c(n);
  std::vector<int> w(n);
  TruthTagged out;
  out.tau.resize(n);
  out.gamma.resize(n);
  out.rho.resize(n);
  std::vector<double> row(p);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p; ++j) {
      row[j] = 2.0 * uniform01(rng) - 1.0;
      x[j * n + i] = row[j];
    }
    const auto t = design_truth(cfg, row);
    if (!(t.gamma > 0.0)) fail(ErrorCode::ConfigInvalid, "incremental cost must be positive", i);
    w[i] = uniform01(rng) < cfg.pi ? 1 : 0;
    const double eps = noise(rng);
    const double cost = static_cast<double>(std::poisson_distribution<long>(t.gamma)(rng));
    y[i] = t.base + w[i] * t.tau + eps;
    c[i] = w[i] ? cost : 0.0;
    out.tau[i] = t.tau;
    out.gamma[i] = t.gamma;
    out.rho[i] = t.tau / t.gamma;
  }
  DatasetOptions opts;
  opts.zero_control_cost = true;
  opts.default_propensity = cfg.pi;
  opts.require_overlap = false;
  out.data = Dataset(p, std::move(x), std::move(w), std::move(y), std::move(c), std::move(opts));
  return out;
}

inline TruthTagged linear_rho_dgp(SimConfig cfg, std::uint64_t seed, std::size_t n) {
  cfg.design = Design::linear_rho;
  return generate(cfg, seed, n);
}

// Content hash of a dataset (FNV-1a over the bit patterns of every column).
inline std::uint64_t dataset_hash(const Dataset& d) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](std::uint64_t v) {
    for (int k = 0; k < 8; ++k) {
      h ^= (v >> (8 * k)) & 0xFF;
      h *= 0x100000001b3ULL;
    }
  };
  mix(d.size());
  mix(d.dim());
  for (double v : d.covariates_colmajor()) mix(std::bit_cast<std::uint64_t>(v));
  for (int v : d.w()) mix(static_cast<std::uint64_t>(v));
  for (double v : d.y()) mix(std::bit_cast<std::uint64_t>(v));
  for (double v : d.c()) mix(std::bit_cast<std::uint64_t>(v));
  for (double v : d.propensity()) mix(std::bit_cast<std::uint64_t>(v));
  return h;
}

// ---------------------------------------------------------------------------
// Replication study

struct StudyConfig {
  SimConfig sim;
  std::vector<ModelKind> methods{ModelKind::ignore_cost, ModelKind::direct_ratio, ModelKind::iv_forest};
  ForestConfig forest;
  int dml_folds = 5;
  std::vector<double> budgets{0.5};
  std::size_t grid_points = 201;
  bool keep_curves = false;
};

struct ReplicateResult {
  std::uint64_t train_seed = 0;
  std::vector<double> value_raw;         // per budget
  std::vector<double> value_normalized;  // per budget
  std::vector<double> averaged_reward;   // oracle curve on the grid (kept when keep_curves)
};

struct MethodReport {
  ModelKind kind = ModelKind::iv_forest;
  QiniCurve averaged;             // raw axes
  QiniCurve averaged_normalized;  // spend / total spend, reward / total reward
  std::vector<double> value_raw;
  std::vector<double> value_normalized;
  std::vector<ReplicateResult> replicates;
};

struct StudyReport {
  StudyConfig config;
  std::uint64_t test_hash = 0;
  double total_spend = 0.0;   // mean gamma on the test set
  double total_reward = 0.0;  // mean tau on the test set
  std::vector<double> grid, grid_normalized;
  std::vector<MethodReport> methods;

  const MethodReport& method(ModelKind k) const {
    for (const auto& m : methods)
      if (m.kind == k) return m;
    fail(ErrorCode::ConfigInvalid, "method not in report");
  }
};

inline PriorityModel fit_method(ModelKind kind, const Dataset& train, const ForestConfig& cfg, int dml_folds,
                                std::uint64_t seed) {
  ForestConfig c = cfg;
  c.seed = seed;
  switch (kind) {
    case ModelKind::iv_forest: return fit_iv_forest(train, c);
    case ModelKind::direct_ratio: return fit_direct_ratio(train, c);
    case ModelKind::ignore_cost: return fit_ignore_cost(train, c);
    case ModelKind::dml_linear: return fit_dml_model(train, dml_folds, c, seed);
  }
  fail(ErrorCode::ConfigInvalid, "unknown method");
}

// One shared test set; per replicate a fresh training set, every method
// fitted and scored, and the oracle curve of its ranking recorded. Curves are
// averaged on a common spend grid. Seeds depend on (seed, replicate, method),
// never on method order.
inline StudyReport run_study(const StudyConfig& cfg,
                             const std::function<void(std::size_t, ModelKind)>& progress = {}) {
  cfg.sim.validate();
  if (cfg.methods.empty()) fail(ErrorCode::ConfigInvalid, "no methods configured");
  StudyReport rep;
  rep.config = cfg;
  const auto test = generate(cfg.sim, derive_seed(cfg.sim.seed, 0, 0x7E57), cfg.sim.n_test);
  rep.test_hash = dataset_hash(test.data);
  for (std::size_t i = 0; i < test.tau.size(); ++i) {
    rep.total_spend += test.gamma[i];
    rep.total_reward += test.tau[i];
  }
  rep.total_spend /= static_cast<double>(test.tau.size());
  rep.total_reward /= static_cast<double>(test.tau.size());
  rep.grid = spend_grid(rep.total_spend, cfg.grid_points);
  rep.grid_normalized = spend_grid(1.0, cfg.grid_points);

  std::vector<std::vector<QiniCurve>> curves(cfg.methods.size());
  for (std::size_t m = 0; m < cfg.methods.size(); ++m) {
    rep.methods.emplace_back();
    rep.methods[m].kind = cfg.methods[m];
  }
  for (std::size_t r = 0; r < cfg.sim.replicates; ++r) {
    const std::uint64_t train_seed = derive_seed(cfg.sim.seed, r + 1, 0x7A1);
    const auto train = generate(cfg.sim, train_seed, cfg.sim.n_train);
    if (!train.data.has_overlap()) fail(ErrorCode::NoOverlap, "replicate " + std::to_string(r) + " lacks overlap");
    for (std::size_t m = 0; m < cfg.methods.size(); ++m) {
      const auto kind = cfg.methods[m];
      if (progress) progress(r, kind);
      const auto model =
          fit_method(kind, train.data, cfg.forest, cfg.dml_folds, derive_seed(train_seed, static_cast<std::uint64_t>(kind), 0x3E));
      if (dataset_hash(test.data) != rep.test_hash) fail(ErrorCode::Io, "shared test set changed during the study");
      const auto scores = model.score_all(test.data, cfg.forest.threads).scores;
      auto curve = oracle_curve(test.tau, test.gamma, scores);
      const auto norm = curve.normalized();
      ReplicateResult rr;
      rr.train_seed = train_seed;
      for (double b : cfg.budgets) {
        rr.value_raw.push_back(curve_value_at(curve, b));
        rr.value_normalized.push_back(curve_value_at(norm, b));
      }
      curve.scores.clear();
      curve.unit_reward.clear();
      curve.unit_spend.clear();
      curves[m].push_back(std::move(curve));
      if (cfg.keep_curves) {
        const QiniCurve one[] = {curves[m].back()};
        rr.averaged_reward = curve_average(one, rep.grid).reward;
      }
      rep.methods[m].replicates.push_back(std::move(rr));
    }
  }
  for (std::size_t m = 0; m < cfg.methods.size(); ++m) {
    auto& mr = rep.methods[m];
    mr.averaged = curve_average(curves[m], rep.grid);
    std::vector<QiniCurve> normalized;
    normalized.reserve(curves[m].size());
    for (const auto& c : curves[m]) normalized.push_back(c.normalized());
    mr.averaged_normalized = curve_average(normalized, rep.grid_normalized);
    for (double b : cfg.budgets) {
      mr.value_raw.push_back(curve_value_at(mr.averaged, b));
      mr.value_normalized.push_back(curve_value_at(mr.averaged_normalized, b));
    }
  }
  return rep;
}

}  // namespace costcast
