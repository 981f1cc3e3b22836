#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "costcast/error.hpp"

namespace costcast {

struct ScoredUnit {
  double priority = 0.0;       // estimated benefit per unit of incremental cost
  double expected_cost = 0.0;  // estimated E[C(1) - C(0) | X], must be > 0
  std::int64_t unit_id = 0;
};

// Threshold rule: probability 1 above rho_b, a_b at rho_b, 0 below.
struct ThresholdPolicy {
  double rho_b = 0.0;
  double a_b = 0.0;
  std::vector<double> per_unit_prob;

  double prob_for(double priority) const {
    if (priority > rho_b) return 1.0;
    if (priority == rho_b) return a_b;
    return 0.0;
  }
};

// Optimal expected-budget allocation over a finite population.
//
// With units sorted by priority, spend_above(r) = mean(cost * [priority > r])
// is a nonincreasing step function. The threshold is
//   eta = inf { r : spend_above(r) <= budget },  rho_b = max(eta, 0),
// and the tied group at rho_b is treated with probability
//   a_b = min((budget - spend_above(rho_b)) / mean(cost * [priority == rho_b]), 1).
// When rho_b = 0 the budget is slack: everyone with positive priority is
// treated and a_b is 0, so zero- and negative-priority units are never treated.
//
// Free-to-treat units (expected_cost <= 0) are rejected; callers treat them by
// the sign of their effect before calling this.
inline ThresholdPolicy solve_policy(std::span<const ScoredUnit> units, double budget_per_capita) {
  if (!(budget_per_capita > 0.0) || !std::isfinite(budget_per_capita))
    fail(ErrorCode::NonpositiveBudget, "budget must be positive and finite");
  const std::size_t n = units.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (!(units[i].expected_cost > 0.0) || !std::isfinite(units[i].expected_cost))
      fail(ErrorCode::NonpositiveCost, "expected_cost must be positive", i);
    if (std::isnan(units[i].priority)) fail(ErrorCode::NonFiniteValue, "priority is NaN", i);
  }
  ThresholdPolicy policy;
  policy.per_unit_prob.assign(n, 0.0);
  if (n == 0) return policy;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return units[a].priority > units[b].priority; });

  // Work with total (not per-capita) cost to avoid repeated division.
  const double total_budget = budget_per_capita * static_cast<double>(n);
  double spend_above = 0.0;  // total cost of units strictly above the current group
  double eta = -std::numeric_limits<double>::infinity();
  double eta_spend_above = 0.0;
  double eta_group_cost = 0.0;
  bool found = false;
  for (std::size_t start = 0; start < n;) {
    std::size_t end = start;
    double group_cost = 0.0;
    const double r = units[order[start]].priority;
    while (end < n && units[order[end]].priority == r) group_cost += units[order[end++]].expected_cost;
    // spend_above(r) <= budget holds here by induction; r is a candidate for
    // eta if including this group overshoots.
    if (spend_above + group_cost > total_budget) {
      eta = r;
      eta_spend_above = spend_above;
      eta_group_cost = group_cost;
      found = true;
      break;
    }
    spend_above += group_cost;
    start = end;
  }

  if (!found || eta <= 0.0) {
    policy.rho_b = 0.0;
    policy.a_b = 0.0;
  } else {
    policy.rho_b = eta;
    policy.a_b = std::min((total_budget - eta_spend_above) / eta_group_cost, 1.0);
  }
  for (std::size_t i = 0; i < n; ++i) policy.per_unit_prob[i] = policy.prob_for(units[i].priority);
  return policy;
}

// Greedy out-of-sample allocation: walk units in descending score (ties by
// index) and treat each one while its realized cost fits in the remaining
// budget. Stops at the first unit that does not fit or whose score is <= 0.
inline std::vector<std::size_t> rank_and_allocate(std::span<const double> scores,
                                                  std::span<const double> realized_costs,
                                                  double total_budget) {
  if (scores.size() != realized_costs.size())
    fail(ErrorCode::LengthMismatch, "scores and costs differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> treated;
  double remaining = total_budget;
  for (std::size_t i : order) {
    if (!(scores[i] > 0.0)) break;
    if (realized_costs[i] > remaining) break;
    remaining -= realized_costs[i];
    treated.push_back(i);
  }
  return treated;
}

struct PolicyValue {
  double value = 0.0;
  double spend = 0.0;
};

// value = mean(prob * tau), spend = mean(prob * cost).
inline PolicyValue policy_value(std::span<const double> probs, std::span<const double> tau,
                                std::span<const double> cost) {
  if (probs.size() != tau.size() || probs.size() != cost.size())
    fail(ErrorCode::LengthMismatch, "policy_value inputs differ in length");
  PolicyValue out;
  if (probs.empty()) return out;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    out.value += probs[i] * tau[i];
    out.spend += probs[i] * cost[i];
  }
  const auto n = static_cast<double>(probs.size());
  out.value /= n;
  out.spend /= n;
  return out;
}

}  // namespace costcast
