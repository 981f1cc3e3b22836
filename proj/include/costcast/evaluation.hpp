#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "costcast/core_data.hpp"
#include "costcast/error.hpp"
#include "costcast/forests.hpp"
#include "costcast/parallel.hpp"
#include "costcast/rng.hpp"

namespace costcast {

enum class EvalMode : std::uint8_t { ipw = 0, aipw = 1 };

// Arm-wise conditional means on the evaluation rows.
struct ArmNuisances {
  std::vector<double> y0, y1, c0, c1;
};

// Per-unit transforms whose means estimate the reward and spend of treating.
//   ipw:  (W/e - (1-W)/(1-e)) * obs
//   aipw: m1 - m0 + (W - e) / (e (1 - e)) * (obs - m_W)
struct EvalWeights {
  std::vector<double> reward;  // transform of Y
  std::vector<double> spend;   // transform of C
  EvalMode mode = EvalMode::ipw;
};

inline EvalWeights eval_weights(const HoldoutSet& test, EvalMode mode, const ArmNuisances* nuisances = nullptr) {
  const Dataset& d = test.data();
  if (!d.has_propensity()) fail(ErrorCode::MissingPropensity, "evaluation needs known propensities");
  const std::size_t n = d.size();
  if (mode == EvalMode::aipw) {
    if (!nuisances) fail(ErrorCode::NuisanceRequired, "aipw evaluation needs arm-wise regressions");
    if (nuisances->y0.size() != n || nuisances->y1.size() != n || nuisances->c0.size() != n ||
        nuisances->c1.size() != n)
      fail(ErrorCode::LengthMismatch, "arm-wise regressions do not align with the test rows");
  }
  EvalWeights out{std::vector<double>(n), std::vector<double>(n), mode};
  for (std::size_t i = 0; i < n; ++i) {
    const double e = d.propensity(i);
    const int w = d.w()[i];
    if (mode == EvalMode::ipw) {
      const double t = w ? 1.0 / e : -1.0 / (1.0 - e);
      out.reward[i] = t * d.y()[i];
      out.spend[i] = t * d.c()[i];
    } else {
      const auto& m = *nuisances;
      const double k = (w - e) / (e * (1.0 - e));
      out.reward[i] = m.y1[i] - m.y0[i] + k * (d.y()[i] - (w ? m.y1[i] : m.y0[i]));
      out.spend[i] = m.c1[i] - m.c0[i] + k * (d.c()[i] - (w ? m.c1[i] : m.c0[i]));
    }
  }
  return out;
}

// Cross-fitted arm-wise regression forests on the evaluation rows themselves,
// so evaluation never touches training data. Zero control costs are exact.
inline ArmNuisances fit_arm_nuisances(const HoldoutSet& test, int K, const ForestConfig& cfg, std::uint64_t seed) {
  const Dataset& d = test.data();
  const std::size_t n = d.size();
  ArmNuisances out{std::vector<double>(n), std::vector<double>(n), std::vector<double>(n), std::vector<double>(n)};
  const auto plan = make_folds(d, K, seed, true);
  for (int k = 0; k < K; ++k) {
    const auto held = plan.members(k);
    const Dataset target = d.subset(held);
    for (int arm = 0; arm <= 1; ++arm) {
      std::vector<std::size_t> rows;
      for (auto i : plan.complement(k))
        if (d.w()[i] == arm) rows.push_back(i);
      if (rows.size() < 2) fail(ErrorCode::TooFewSamples, "an arm has fewer than two rows outside fold " + std::to_string(k));
      const Dataset train = d.subset(rows);
      for (Role role : {Role::outcome, Role::cost}) {
        auto& dest = role == Role::outcome ? (arm ? out.y1 : out.y0) : (arm ? out.c1 : out.c0);
        if (role == Role::cost && arm == 0 && d.zero_control_cost()) continue;  // stays 0
        ForestConfig rc = cfg;
        rc.mode = ForestMode::regression;
        rc.seed = derive_seed(seed, static_cast<std::uint64_t>(k), 0xA0 + 2 * arm + (role == Role::cost));
        const auto pred = predict_all(fit_forest(train, {role}, rc), target, cfg.threads);
        for (std::size_t r = 0; r < held.size(); ++r) dest[held[r]] = pred[r];
      }
    }
  }
  return out;
}

// Cumulative (spend, reward) along a descending score ranking. Point 0 is
// (0, 0) with threshold +inf; point k treats every unit whose score is at least
// threshold[k]. Tied scores enter together.
struct QiniCurve {
  std::vector<double> threshold;
  std::vector<double> spend;
  std::vector<double> reward;
  std::vector<std::size_t> treated;  // units at or above threshold[k]
  double total_spend = 0.0;          // spend of treating everyone
  double total_reward = 0.0;

  // Per-unit inputs, kept for lift and bootstrap (empty for averaged curves).
  std::vector<double> scores;
  std::vector<double> unit_reward;
  std::vector<double> unit_spend;
  std::vector<std::int64_t> clusters;
  EvalMode mode = EvalMode::ipw;

  std::size_t size() const noexcept { return spend.size(); }

  // Spend and reward divided by their treat-everyone values.
  QiniCurve normalized() const {
    QiniCurve out = *this;
    for (auto& s : out.spend) s /= total_spend;
    for (auto& r : out.reward) r /= total_reward;
    out.total_spend = 1.0;
    out.total_reward = 1.0;
    return out;
  }
};

namespace detail {

inline std::vector<std::size_t> descending_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

// Curve points over the units with mask[i] != 0 (all when mask is empty),
// normalized by the number of included units.
inline void walk_curve(std::span<const std::size_t> order, std::span<const double> scores,
                       std::span<const double> unit_reward, std::span<const double> unit_spend,
                       std::span<const std::uint8_t> mask, QiniCurve& out) {
  std::size_t m = 0;
  if (mask.empty()) {
    m = order.size();
  } else {
    for (auto v : mask) m += v;
  }
  out.threshold.assign(1, std::numeric_limits<double>::infinity());
  out.spend.assign(1, 0.0);
  out.reward.assign(1, 0.0);
  out.treated.assign(1, 0);
  if (m == 0) return;
  const double inv = 1.0 / static_cast<double>(m);
  double sr = 0.0, ss = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < order.size();) {
    const double s = scores[order[k]];
    bool any = false;
    for (; k < order.size() && scores[order[k]] == s; ++k) {
      const auto i = order[k];
      if (!mask.empty() && !mask[i]) continue;
      sr += unit_reward[i];
      ss += unit_spend[i];
      ++count;
      any = true;
    }
    if (!any) continue;
    out.threshold.push_back(s);
    out.spend.push_back(ss * inv);
    out.reward.push_back(sr * inv);
    out.treated.push_back(count);
  }
  out.total_spend = out.spend.back();
  out.total_reward = out.reward.back();
}

inline void check_scores(std::span<const double> scores, std::size_t n) {
  if (scores.size() != n) fail(ErrorCode::LengthMismatch, "scores do not align with the rows");
  for (std::size_t i = 0; i < n; ++i)
    if (std::isnan(scores[i])) fail(ErrorCode::NonFiniteValue, "score is NaN", i);
}

}  // namespace detail

inline QiniCurve curve_from_units(std::vector<double> scores, std::vector<double> unit_reward,
                                  std::vector<double> unit_spend) {
  const std::size_t n = scores.size();
  detail::check_scores(scores, n);
  if (unit_reward.size() != n || unit_spend.size() != n)
    fail(ErrorCode::LengthMismatch, "per-unit columns differ in length");
  QiniCurve c;
  const auto order = detail::descending_order(scores);
  detail::walk_curve(order, scores, unit_reward, unit_spend, {}, c);
  c.scores = std::move(scores);
  c.unit_reward = std::move(unit_reward);
  c.unit_spend = std::move(unit_spend);
  return c;
}

// Estimated curve on held-out data:
//   B(s) = mean(T_i C_i [S_i >= s]),  R(s) = mean(T_i Y_i [S_i >= s])
// with T_i the inverse-propensity contrast (or its augmented form).
inline QiniCurve qini_curve(const HoldoutSet& test, std::span<const double> scores, EvalMode mode = EvalMode::ipw,
                            const ArmNuisances* nuisances = nullptr) {
  detail::check_scores(scores, test.size());
  auto wts = eval_weights(test, mode, nuisances);
  QiniCurve c = curve_from_units(std::vector<double>(scores.begin(), scores.end()), std::move(wts.reward),
                                 std::move(wts.spend));
  c.mode = mode;
  if (test.data().has_clusters()) c.clusters.assign(test.data().clusters().begin(), test.data().clusters().end());
  return c;
}

// Noiseless curve from true conditional effects tau and costs gamma.
inline QiniCurve oracle_curve(std::span<const double> tau, std::span<const double> gamma,
                              std::span<const double> scores) {
  if (tau.size() != scores.size() || gamma.size() != scores.size())
    fail(ErrorCode::LengthMismatch, "truth vectors do not align with scores");
  return curve_from_units(std::vector<double>(scores.begin(), scores.end()), std::vector<double>(tau.begin(), tau.end()),
                          std::vector<double>(gamma.begin(), gamma.end()));
}

// Reward at spend x by linear interpolation along the curve, using the first
// segment that reaches x. Beyond the last point the final reward is held.
inline double curve_value_at(const QiniCurve& c, double x) {
  if (c.size() == 0) fail(ErrorCode::EmptyInput, "empty curve");
  if (x <= c.spend.front()) return c.reward.front();
  for (std::size_t k = 0; k + 1 < c.size(); ++k) {
    const double s0 = c.spend[k], s1 = c.spend[k + 1];
    if (s0 <= x && x <= s1) {
      if (s1 == s0) return c.reward[k + 1];
      const double t = (x - s0) / (s1 - s0);
      return c.reward[k] + t * (c.reward[k + 1] - c.reward[k]);
    }
  }
  return c.reward.back();
}

// Interpolates each curve onto the grid and averages rewards pointwise.
inline QiniCurve curve_average(std::span<const QiniCurve> curves, std::span<const double> grid) {
  if (curves.empty()) fail(ErrorCode::EmptyInput, "no curves to average");
  if (grid.empty()) fail(ErrorCode::EmptyInput, "empty spend grid");
  QiniCurve out;
  out.spend.assign(grid.begin(), grid.end());
  out.reward.assign(grid.size(), 0.0);
  out.threshold.assign(grid.size(), std::numeric_limits<double>::quiet_NaN());
  for (const auto& c : curves)
    for (std::size_t g = 0; g < grid.size(); ++g) out.reward[g] += curve_value_at(c, grid[g]);
  for (auto& r : out.reward) r /= static_cast<double>(curves.size());
  out.total_spend = out.spend.back();
  out.total_reward = out.reward.back();
  return out;
}

inline std::vector<double> spend_grid(double hi, std::size_t points) {
  if (points < 2) fail(ErrorCode::ConfigInvalid, "grid needs at least two points");
  std::vector<double> g(points);
  for (std::size_t k = 0; k < points; ++k) g[k] = hi * static_cast<double>(k) / static_cast<double>(points - 1);
  return g;
}

// ---------------------------------------------------------------------------
// Lift

struct LiftOptions {
  double alpha = 0.05;
  std::size_t reps = 1000;
  std::uint64_t seed = 0;
  bool cluster = false;
  bool bootstrap = true;
  unsigned threads = 0;
};

struct BootstrapResult {
  double se = 0.0;
  double ci_lo = 0.0, ci_hi = 0.0;
  std::size_t valid_reps = 0;
  std::vector<double> deltas;  // replicate estimates, NaN when unusable
};

struct LiftEstimate {
  double b = 0.0;
  double q_hat = 0.0;
  double delta_hat = 0.0;
  double s_hat = 0.0;         // score threshold reached at budget b
  std::size_t s_index = 0;    // curve point index of s_hat
  double slope = 0.0;         // estimated dR/dB at s_hat
  std::vector<double> psi_q, psi_d;
  double se_if = 0.0;
  double wald_lo = 0.0, wald_hi = 0.0;
  std::optional<BootstrapResult> bootstrap;
  double ci_lo = 0.0, ci_hi = 0.0;  // bootstrap interval when run, else Wald

  double se() const { return bootstrap ? bootstrap->se : se_if; }
};

namespace detail {

// Largest curve index whose spend does not exceed b.
inline std::size_t budget_index(const QiniCurve& c, double b) {
  std::size_t k = 0;
  for (std::size_t j = 0; j < c.size(); ++j)
    if (c.spend[j] <= b) k = j;
  return k;
}

// Written so that b == total_spend yields exactly zero.
inline double lift_value(double q, double b, double total_spend, double total_reward) {
  return q - (b / total_spend) * total_reward;
}

inline double delta_on(const QiniCurve& c, double b) {
  if (!(c.total_spend > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  return lift_value(c.reward[budget_index(c, b)], b, c.total_spend, c.total_reward);
}

inline double normal_quantile(double p) {
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

// Type-7 sample quantile of sorted values.
inline double quantile_sorted(const std::vector<double>& v, double q) {
  const double h = (static_cast<double>(v.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace detail

// Half-sample bootstrap: each replicate keeps floor(n/2) units (or floor(G/2)
// whole clusters) drawn without replacement and recomputes the lift. The
// half-sample deviation from the full estimate already has the variance of
// the full-sample estimator, since m = n/2 gives 1/m - 1/n = 1/n.
inline BootstrapResult half_sample_bootstrap(const QiniCurve& curve, double b, std::size_t reps, std::uint64_t seed,
                                             bool cluster, double alpha = 0.05, unsigned threads = 0) {
  if (reps < 100) fail(ErrorCode::TooFewReps, "half-sample bootstrap needs at least 100 replicates");
  const std::size_t n = curve.scores.size();
  if (n < 2) fail(ErrorCode::TooFewSamples, "bootstrap needs per-unit data on at least two units");
  if (cluster && curve.clusters.size() != n) fail(ErrorCode::ConfigInvalid, "clustered bootstrap needs cluster ids");

  const double full = detail::delta_on(curve, b);
  const auto order = detail::descending_order(curve.scores);
  std::vector<std::vector<std::size_t>> groups;
  if (cluster) {
    std::map<std::int64_t, std::size_t> index;
    for (std::size_t i = 0; i < n; ++i) {
      auto [it, inserted] = index.emplace(curve.clusters[i], groups.size());
      if (inserted) groups.emplace_back();
      groups[it->second].push_back(i);
    }
  } else {
    groups.resize(n);
    for (std::size_t i = 0; i < n; ++i) groups[i] = {i};
  }
  const std::size_t g = groups.size(), half = g / 2;
  if (half == 0) fail(ErrorCode::TooFewSamples, "bootstrap needs at least two sampling units");

  BootstrapResult out;
  out.deltas.assign(reps, std::numeric_limits<double>::quiet_NaN());
  parallel_for(reps, resolve_threads(static_cast<int>(threads)), [&](std::size_t r) {
    Rng rng = make_rng(seed, r, 0xB5);
    std::vector<std::size_t> pick(g);
    std::iota(pick.begin(), pick.end(), std::size_t{0});
    for (std::size_t k = 0; k < half; ++k) std::swap(pick[k], pick[k + uniform_index(rng, g - k)]);
    std::vector<std::uint8_t> mask(n, 0);
    for (std::size_t k = 0; k < half; ++k)
      for (auto i : groups[pick[k]]) mask[i] = 1;
    QiniCurve sub;
    detail::walk_curve(order, curve.scores, curve.unit_reward, curve.unit_spend, mask, sub);
    out.deltas[r] = detail::delta_on(sub, b);
  });

  std::vector<double> dev;
  for (double v : out.deltas)
    if (std::isfinite(v)) dev.push_back(v - full);
  out.valid_reps = dev.size();
  if (dev.empty()) fail(ErrorCode::TooFewReps, "no bootstrap replicate had positive total spend");
  double ss = 0.0;
  for (double v : dev) ss += v * v;
  out.se = std::sqrt(ss / static_cast<double>(dev.size()));
  std::sort(dev.begin(), dev.end());
  out.ci_lo = std::min(full, full + detail::quantile_sorted(dev, alpha / 2));
  out.ci_hi = std::max(full, full + detail::quantile_sorted(dev, 1 - alpha / 2));
  return out;
}

// Lift over proportional random allocation at budget b:
//   Q(b) = R(s_hat),  Delta(b) = Q(b) - b R(0) / B(0),
// where s_hat is the furthest curve point whose spend stays within b. The
// influence records replace R'(s)/B'(s) by a symmetric difference over
// max(25, n/100) neighbouring curve points.
inline LiftEstimate lift_at_budget(const QiniCurve& curve, double b, const LiftOptions& opts = {}) {
  const std::size_t n = curve.scores.size();
  if (n == 0) fail(ErrorCode::EmptyInput, "curve carries no per-unit data");
  if (!(curve.total_spend > 0.0)) fail(ErrorCode::BudgetOutOfRange, "total spend is not positive");
  if (!(b > 0.0 && b <= curve.total_spend))
    fail(ErrorCode::BudgetOutOfRange, "budget must lie in (0, " + std::to_string(curve.total_spend) + "]");
  if (!(opts.alpha > 0.0 && opts.alpha < 1.0)) fail(ErrorCode::ConfigInvalid, "alpha must lie in (0,1)");

  LiftEstimate est;
  est.b = b;
  est.s_index = detail::budget_index(curve, b);
  est.s_hat = curve.threshold[est.s_index];
  est.q_hat = curve.reward[est.s_index];
  est.delta_hat = detail::lift_value(est.q_hat, b, curve.total_spend, curve.total_reward);

  const std::size_t last = curve.size() - 1;
  const std::size_t h = std::max<std::size_t>(25, n / 100);
  const std::size_t lo = est.s_index > h ? est.s_index - h : 0;
  const std::size_t hi = std::min(last, est.s_index + h);
  const double dspend = curve.spend[hi] - curve.spend[lo];
  est.slope = dspend != 0.0 ? (curve.reward[hi] - curve.reward[lo]) / dspend : 0.0;

  const double B0 = curve.total_spend, R0 = curve.total_reward;
  const double Rs = curve.reward[est.s_index], Bs = curve.spend[est.s_index];
  est.psi_q.resize(n);
  est.psi_d.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const bool in = curve.scores[i] >= est.s_hat;
    const double ri = in ? curve.unit_reward[i] : 0.0;
    const double bi = in ? curve.unit_spend[i] : 0.0;
    est.psi_q[i] = ri - Rs - est.slope * (bi - Bs);
    est.psi_d[i] = est.psi_q[i] - b * curve.unit_reward[i] / B0 + b * R0 * (curve.unit_spend[i] - B0) / (B0 * B0) +
                   b * R0 / B0;
  }
  double mean = 0.0;
  for (double v : est.psi_d) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : est.psi_d) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  est.se_if = std::sqrt(var / static_cast<double>(n));
  const double z = detail::normal_quantile(1 - opts.alpha / 2);
  est.wald_lo = est.delta_hat - z * est.se_if;
  est.wald_hi = est.delta_hat + z * est.se_if;
  est.ci_lo = est.wald_lo;
  est.ci_hi = est.wald_hi;
  if (opts.bootstrap) {
    est.bootstrap = half_sample_bootstrap(curve, b, opts.reps, opts.seed, opts.cluster, opts.alpha, opts.threads);
    est.ci_lo = est.bootstrap->ci_lo;
    est.ci_hi = est.bootstrap->ci_hi;
  }
  return est;
}

}  // namespace costcast
