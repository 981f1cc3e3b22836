#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <utility>
#include <vector>

#include "costcast/binary_io.hpp"
#include "costcast/core_data.hpp"
#include "costcast/error.hpp"
#include "costcast/parallel.hpp"
#include "costcast/rng.hpp"

namespace costcast {

// Honest generalized random forests.
//
//  * regression:   leaf estimate is the mean response.
//  * causal:       ratio forest with the exposure bound to the treatment, so the
//                  local estimate is Cov(Y, W) / Var(W).
//  * instrumental: local estimate Cov(Y, W) / Cov(C, W) with the treatment as
//                  the instrument and the cost as the endogenous exposure.
//
// Splits maximize the CART criterion on gradient pseudo-outcomes
//   r_i = (W_i - W̄) ((Y_i - Ȳ) - (C_i - C̄) θ) / Cov(C, W),  θ = Cov(Y, W) / Cov(C, W),
// computed once per parent node (regression uses r_i = Y_i - Ȳ). Each tree
// grows on one half of a subsample and is populated by the other half.

enum class ForestMode : std::uint8_t { regression = 0, causal = 1, instrumental = 2 };
enum class Role : std::uint8_t { outcome = 0, treatment = 1, cost = 2 };

struct ForestRoles {
  Role response = Role::outcome;      // Y, or the regression response
  Role instrument = Role::treatment;  // W
  Role exposure = Role::cost;         // C; causal mode binds it to the instrument
};

struct ForestConfig {
  std::size_t num_trees = 2000;
  double subsample_fraction = 0.5;
  double honesty_fraction = 0.5;
  std::size_t min_node_size = 0;  // 0: 5 for regression, 10 otherwise
  std::size_t mtry = 0;           // 0: min(p, ceil(sqrt(p)) + 3)
  std::optional<std::size_t> max_depth;
  std::uint64_t seed = 42;
  ForestMode mode = ForestMode::regression;
  bool local_centering = true;
  // Each child must hold at least max(1, alpha * parent) treated and control units.
  double alpha = 0.05;
  std::size_t centering_trees = 0;  // 0: max(50, num_trees / 4)
  unsigned threads = 0;             // 0: COSTCAST_THREADS or hardware

  ForestConfig resolved(std::size_t p) const {
    ForestConfig c = *this;
    if (c.min_node_size == 0) c.min_node_size = (mode == ForestMode::regression) ? 5 : 10;
    if (c.mtry == 0)
      c.mtry = std::min<std::size_t>(p, static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(p)))) + 3);
    if (c.centering_trees == 0) c.centering_trees = std::max<std::size_t>(50, num_trees / 4);
    return c;
  }

  void validate(std::size_t p) const {
    if (num_trees < 1) fail(ErrorCode::ConfigInvalid, "num_trees must be >= 1");
    if (!(subsample_fraction > 0.0 && subsample_fraction <= 1.0))
      fail(ErrorCode::ConfigInvalid, "subsample_fraction must lie in (0,1]");
    if (!(honesty_fraction > 0.0 && honesty_fraction < 1.0))
      fail(ErrorCode::ConfigInvalid, "honesty_fraction must lie in (0,1)");
    if (min_node_size < 1) fail(ErrorCode::ConfigInvalid, "min_node_size must be >= 1");
    if (mtry < 1 || mtry > p) fail(ErrorCode::ConfigInvalid, "mtry must lie in [1, p]");
    if (!(alpha >= 0.0 && alpha < 0.5)) fail(ErrorCode::ConfigInvalid, "alpha must lie in [0, 0.5)");
  }
};

struct TreeNode {
  std::int32_t split_feature = -1;  // -1 marks a leaf
  double split_value = 0.0;         // x[feature] <= split_value goes left
  std::uint32_t left = 0;
  std::uint32_t right = 0;
  std::vector<std::uint32_t> members;  // leaf only: estimation-half rows

  bool is_leaf() const noexcept { return split_feature < 0; }
};

// Leaf averages used to evaluate forest-weighted moments without
// materializing the weights.
struct LeafSummary {
  double y = 0.0, w = 0.0, c = 0.0, yw = 0.0, cw = 0.0;
};

struct Tree {
  std::vector<TreeNode> nodes;
  std::vector<std::uint32_t> split_half;
  std::vector<std::uint32_t> estimation_half;
  std::vector<LeafSummary> summaries;  // parallel to nodes, derived

  template <typename Row>
  std::uint32_t leaf_of(const Row& x) const {
    std::uint32_t k = 0;
    while (!nodes[k].is_leaf())
      k = (x[static_cast<std::size_t>(nodes[k].split_feature)] <= nodes[k].split_value) ? nodes[k].left
                                                                                         : nodes[k].right;
    return k;
  }
};

struct ForestWeights {
  std::vector<std::pair<std::uint32_t, double>> entries;

  double sum() const {
    double s = 0.0;
    for (const auto& [i, a] : entries) s += a;
    return s;
  }
};

class ForestModel {
 public:
  ForestMode mode() const noexcept { return config_.mode; }
  const ForestConfig& config() const noexcept { return config_; }
  const ForestRoles& roles() const noexcept { return roles_; }
  std::size_t dim() const noexcept { return p_; }
  std::size_t training_size() const noexcept { return n_; }
  const std::vector<Tree>& trees() const noexcept { return trees_; }

  // Values the trees were grown and evaluated on (raw minus centering).
  std::span<const double> response() const noexcept { return y_; }
  std::span<const double> instrument() const noexcept { return w_; }
  std::span<const double> exposure() const noexcept { return c_; }
  // Centering offsets per training row (zeros when centering is off).
  std::span<const double> response_center() const noexcept { return hy_; }
  std::span<const double> instrument_center() const noexcept { return hw_; }
  std::span<const double> exposure_center() const noexcept { return hc_; }

  ForestWeights weights(std::span<const double> x) const {
    check_dim(x);
    std::vector<double> dense(n_, 0.0);
    const double per_tree = 1.0 / static_cast<double>(trees_.size());
    for (const auto& t : trees_) {
      const auto& leaf = t.nodes[t.leaf_of(x)];
      const double share = per_tree / static_cast<double>(leaf.members.size());
      for (auto i : leaf.members) dense[i] += share;
    }
    ForestWeights out;
    for (std::uint32_t i = 0; i < n_; ++i)
      if (dense[i] > 0.0) out.entries.emplace_back(i, dense[i]);
    return out;
  }

  // Forest-weighted means of (y, w, c, yw, cw) at x.
  LeafSummary weighted_moments(std::span<const double> x) const {
    check_dim(x);
    LeafSummary acc;
    for (const auto& t : trees_) {
      const auto& s = t.summaries[t.leaf_of(x)];
      acc.y += s.y;
      acc.w += s.w;
      acc.c += s.c;
      acc.yw += s.yw;
      acc.cw += s.cw;
    }
    const double k = 1.0 / static_cast<double>(trees_.size());
    acc.y *= k;
    acc.w *= k;
    acc.c *= k;
    acc.yw *= k;
    acc.cw *= k;
    return acc;
  }

  double predict_regression(std::span<const double> x) const {
    if (mode() != ForestMode::regression) fail(ErrorCode::ConfigInvalid, "predict_regression needs a regression forest");
    return weighted_moments(x).y;
  }

  struct RatioParts {
    double numerator = 0.0;    // weighted Cov(Y, W)
    double denominator = 0.0;  // weighted Cov(C, W)
  };

  RatioParts ratio_parts(std::span<const double> x) const {
    if (mode() == ForestMode::regression) fail(ErrorCode::ConfigInvalid, "ratio prediction needs a causal or instrumental forest");
    const auto m = weighted_moments(x);
    return {m.yw - m.y * m.w, m.cw - m.c * m.w};
  }

  double predict_ratio(std::span<const double> x) const {
    const auto r = ratio_parts(x);
    if (!(std::abs(r.denominator) >= kMinCovariance))
      fail(ErrorCode::ZeroDenominator, "no local cost-treatment covariation at query point");
    return r.numerator / r.denominator;
  }

  // Mode-appropriate point prediction.
  double predict(std::span<const double> x) const {
    return mode() == ForestMode::regression ? predict_regression(x) : predict_ratio(x);
  }

  // Predictions for training rows from trees whose subsample excluded them;
  // rows in every subsample fall back to the full forest.
  std::vector<double> oob_predictions(const Dataset& d) const {
    if (d.size() != n_ || d.dim() != p_) fail(ErrorCode::DimensionMismatch, "dataset is not the training set");
    std::vector<double> sum(n_, 0.0);
    std::vector<std::uint32_t> count(n_, 0);
    std::vector<char> in_sample(n_);
    std::vector<double> x(p_);
    for (const auto& t : trees_) {
      std::fill(in_sample.begin(), in_sample.end(), 0);
      for (auto i : t.split_half) in_sample[i] = 1;
      for (auto i : t.estimation_half) in_sample[i] = 1;
      for (std::size_t i = 0; i < n_; ++i) {
        if (in_sample[i]) continue;
        for (std::size_t j = 0; j < p_; ++j) x[j] = d.x(i, j);
        sum[i] += t.summaries[t.leaf_of(x)].y;
        ++count[i];
      }
    }
    std::vector<double> out(n_);
    for (std::size_t i = 0; i < n_; ++i) {
      if (count[i] > 0) {
        out[i] = sum[i] / count[i];
      } else {
        const auto row = d.row(i);
        out[i] = weighted_moments(row).y;
      }
    }
    return out;
  }

  // Forest made of the listed trees; indices may repeat.
  ForestModel select_trees(std::span<const std::size_t> indices) const {
    if (indices.empty()) fail(ErrorCode::ConfigInvalid, "select_trees needs at least one tree");
    ForestModel m = *this;
    m.trees_.clear();
    for (auto t : indices) {
      if (t >= trees_.size()) fail(ErrorCode::ConfigInvalid, "tree index out of range");
      m.trees_.push_back(trees_[t]);
    }
    m.config_.num_trees = m.trees_.size();
    return m;
  }

  void serialize(std::ostream& out) const;
  static ForestModel deserialize(std::istream& in);

  static constexpr double kMinCovariance = 1e-12;

 private:
  friend struct ForestBuilder;

  void check_dim(std::span<const double> x) const {
    if (x.size() != p_) fail(ErrorCode::DimensionMismatch, "query has dimension " + std::to_string(x.size()) +
                                                               ", forest expects " + std::to_string(p_));
  }

  void summarize() {
    const bool ratio = mode() != ForestMode::regression;
    for (auto& t : trees_) {
      t.summaries.assign(t.nodes.size(), LeafSummary{});
      for (std::size_t k = 0; k < t.nodes.size(); ++k) {
        const auto& node = t.nodes[k];
        if (!node.is_leaf()) continue;
        if (node.members.empty()) fail(ErrorCode::ModelFormat, "empty leaf");
        LeafSummary s;
        for (auto i : node.members) {
          s.y += y_[i];
          if (ratio) {
            s.w += w_[i];
            s.c += c_[i];
            s.yw += y_[i] * w_[i];
            s.cw += c_[i] * w_[i];
          }
        }
        const double m = static_cast<double>(node.members.size());
        s.y /= m;
        s.w /= m;
        s.c /= m;
        s.yw /= m;
        s.cw /= m;
        t.summaries[k] = s;
      }
    }
  }

  ForestConfig config_;
  ForestRoles roles_;
  std::size_t p_ = 0;
  std::size_t n_ = 0;
  std::vector<double> x_;  // column-major training covariates
  std::vector<double> y_, w_, c_;
  std::vector<double> hy_, hw_, hc_;
  std::vector<std::uint8_t> treated_;
  std::vector<Tree> trees_;
};

namespace detail {

inline std::span<const double> role_column(const Dataset& d, Role r, std::vector<double>& scratch) {
  switch (r) {
    case Role::outcome: return d.y();
    case Role::cost: return d.c();
    case Role::treatment:
      scratch.assign(d.w().begin(), d.w().end());
      return scratch;
  }
  return d.y();
}

// Grows one honest tree. Split-half rows choose the splits; estimation-half
// rows populate the leaves. Candidate splits must leave at least
// min_node_size rows of each half on both sides, so every leaf's estimation
// membership meets the minimum (the root excepted when the half is smaller).
class TreeGrower {
 public:
  TreeGrower(const ForestConfig& cfg, std::size_t n, std::size_t p, std::span<const double> x,
             std::span<const double> y, std::span<const double> w, std::span<const double> c,
             std::span<const std::uint8_t> treated)
      : cfg_(cfg), n_(n), p_(p), x_(x), y_(y), w_(w), c_(c), treated_(treated) {}

  Tree grow(std::uint64_t tree_index) const {
    // Causal and instrumental modes share a stream so that binding the
    // exposure to the instrument reproduces the causal forest exactly.
    Rng rng = make_rng(cfg_.seed, tree_index, ratio_mode() ? 2 : 1);
    Tree tree;
    draw_halves(rng, tree);

    struct Pending {
      std::uint32_t node;
      std::vector<std::uint32_t> split_rows, est_rows;
      std::size_t depth;
    };
    tree.nodes.emplace_back();
    std::vector<Pending> stack;
    stack.push_back({0, tree.split_half, tree.estimation_half, 0});
    std::vector<double> pseudo(n_);
    while (!stack.empty()) {
      Pending cur = std::move(stack.back());
      stack.pop_back();
      auto split = find_split(rng, cur.split_rows, cur.est_rows, cur.depth, pseudo);
      if (!split) {
        tree.nodes[cur.node].members = std::move(cur.est_rows);
        std::sort(tree.nodes[cur.node].members.begin(), tree.nodes[cur.node].members.end());
        continue;
      }
      Pending lhs{static_cast<std::uint32_t>(tree.nodes.size()), {}, {}, cur.depth + 1};
      Pending rhs{static_cast<std::uint32_t>(tree.nodes.size() + 1), {}, {}, cur.depth + 1};
      const std::size_t f = split->feature;
      for (auto i : cur.split_rows) (xv(i, f) <= split->value ? lhs : rhs).split_rows.push_back(i);
      for (auto i : cur.est_rows) (xv(i, f) <= split->value ? lhs : rhs).est_rows.push_back(i);
      auto& node = tree.nodes[cur.node];
      node.split_feature = static_cast<std::int32_t>(f);
      node.split_value = split->value;
      node.left = lhs.node;
      node.right = rhs.node;
      tree.nodes.emplace_back();
      tree.nodes.emplace_back();
      stack.push_back(std::move(rhs));
      stack.push_back(std::move(lhs));
    }
    std::sort(tree.split_half.begin(), tree.split_half.end());
    std::sort(tree.estimation_half.begin(), tree.estimation_half.end());
    return tree;
  }

 private:
  struct Split {
    std::size_t feature;
    double value;
  };

  double xv(std::size_t i, std::size_t j) const { return x_[j * n_ + i]; }
  bool ratio_mode() const { return cfg_.mode != ForestMode::regression; }

  void draw_halves(Rng& rng, Tree& tree) const {
    const std::size_t s = std::max<std::size_t>(
        2, std::min(n_, static_cast<std::size_t>(std::floor(cfg_.subsample_fraction * static_cast<double>(n_)))));
    const std::size_t k = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(cfg_.honesty_fraction * static_cast<double>(s))), 1, s - 1);
    std::vector<std::uint32_t> perm(n_);
    std::iota(perm.begin(), perm.end(), 0u);
    for (int attempt = 0;; ++attempt) {
      for (std::size_t i = 0; i < s; ++i) std::swap(perm[i], perm[i + uniform_index(rng, n_ - i)]);
      tree.split_half.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k));
      tree.estimation_half.assign(perm.begin() + static_cast<std::ptrdiff_t>(k),
                                  perm.begin() + static_cast<std::ptrdiff_t>(s));
      if (!ratio_mode()) return;
      std::size_t t = 0;
      for (auto i : tree.split_half) t += treated_[i];
      if (t > 0 && t < tree.split_half.size()) return;
      if (attempt >= 100) fail(ErrorCode::DegenerateNode, "cannot draw a split half containing both arms");
    }
  }

  std::optional<Split> find_split(Rng& rng, const std::vector<std::uint32_t>& rows,
                                  const std::vector<std::uint32_t>& est, std::size_t depth,
                                  std::vector<double>& pseudo) const {
    const std::size_t m = rows.size();
    const std::size_t min_size = cfg_.min_node_size;
    if (cfg_.max_depth && depth >= *cfg_.max_depth) return std::nullopt;
    if (m < 2 * min_size || est.size() < 2 * min_size) return std::nullopt;

    // Pseudo-outcomes at the parent.
    double ybar = 0, wbar = 0, cbar = 0;
    for (auto i : rows) {
      ybar += y_[i];
      wbar += w_[i];
      cbar += c_[i];
    }
    ybar /= m;
    wbar /= m;
    cbar /= m;
    std::size_t treated = 0;
    if (ratio_mode()) {
      double cov_cw = 0, cov_yw = 0;
      for (auto i : rows) {
        cov_cw += (c_[i] - cbar) * (w_[i] - wbar);
        cov_yw += (y_[i] - ybar) * (w_[i] - wbar);
        treated += treated_[i];
      }
      cov_cw /= m;
      cov_yw /= m;
      if (std::abs(cov_cw) < ForestModel::kMinCovariance || treated == 0 || treated == m) return std::nullopt;
      const double theta = cov_yw / cov_cw;
      for (auto i : rows)
        pseudo[i] = (w_[i] - wbar) * ((y_[i] - ybar) - (c_[i] - cbar) * theta) / cov_cw;
    } else {
      for (auto i : rows) pseudo[i] = y_[i] - ybar;
    }
    const std::size_t min_arm = std::max<std::size_t>(1, static_cast<std::size_t>(cfg_.alpha * static_cast<double>(m)));

    double total = 0.0, sum_w = 0, sum_c = 0, sum_cw = 0;
    for (auto i : rows) {
      total += pseudo[i];
      sum_w += w_[i];
      sum_c += c_[i];
      sum_cw += c_[i] * w_[i];
    }
    const double parent_score = total * total / static_cast<double>(m);
    double best_score = parent_score + 1e-12 * std::max(1.0, std::abs(parent_score));
    std::optional<Split> best;

    // Sample mtry distinct features.
    std::vector<std::size_t> features(p_);
    std::iota(features.begin(), features.end(), std::size_t{0});
    for (std::size_t i = 0; i < cfg_.mtry; ++i) std::swap(features[i], features[i + uniform_index(rng, p_ - i)]);

    std::vector<std::pair<double, std::uint32_t>> sorted(m);
    std::vector<double> est_sorted(est.size());
    for (std::size_t fi = 0; fi < cfg_.mtry; ++fi) {
      const std::size_t f = features[fi];
      for (std::size_t k = 0; k < m; ++k) sorted[k] = {xv(rows[k], f), rows[k]};
      std::sort(sorted.begin(), sorted.end());
      if (sorted.front().first == sorted.back().first) continue;
      for (std::size_t k = 0; k < est.size(); ++k) est_sorted[k] = xv(est[k], f);
      std::sort(est_sorted.begin(), est_sorted.end());

      double left = 0, lw = 0, lc = 0, lcw = 0;
      std::size_t lt = 0, est_left = 0;
      for (std::size_t k = 0; k + 1 < m; ++k) {
        const auto i = sorted[k].second;
        left += pseudo[i];
        if (ratio_mode()) {
          lw += w_[i];
          lc += c_[i];
          lcw += c_[i] * w_[i];
          lt += treated_[i];
        }
        const std::size_t nl = k + 1, nr = m - nl;
        if (sorted[k].first == sorted[k + 1].first) continue;
        if (nl < min_size) continue;
        if (nr < min_size) break;
        const double value = midpoint(sorted[k].first, sorted[k + 1].first);
        while (est_left < est_sorted.size() && est_sorted[est_left] <= value) ++est_left;
        if (est_left < min_size) continue;
        if (est_sorted.size() - est_left < min_size) break;
        if (ratio_mode()) {
          const std::size_t rt = treated - lt;
          if (lt < min_arm || nl - lt < min_arm || rt < min_arm || nr - rt < min_arm) continue;
          const double dl = static_cast<double>(nl), dr = static_cast<double>(nr);
          const double cov_l = lcw / dl - (lc / dl) * (lw / dl);
          const double cov_r = (sum_cw - lcw) / dr - ((sum_c - lc) / dr) * ((sum_w - lw) / dr);
          if (std::abs(cov_l) < ForestModel::kMinCovariance || std::abs(cov_r) < ForestModel::kMinCovariance)
            continue;
        }
        const double right = total - left;
        const double score = left * left / static_cast<double>(nl) + right * right / static_cast<double>(nr);
        if (score > best_score) {
          best_score = score;
          best = Split{f, value};
        }
      }
    }
    return best;
  }

  static double midpoint(double a, double b) {
    const double mid = a + (b - a) / 2.0;
    return (mid < b) ? mid : a;
  }

  const ForestConfig& cfg_;
  std::size_t n_, p_;
  std::span<const double> x_, y_, w_, c_;
  std::span<const std::uint8_t> treated_;
};

}  // namespace detail

// Plain tree ensemble over fixed columns; no centering. Exposed for callers
// that supply their own residuals.
struct ForestBuilder {
  static ForestModel build(const Dataset& d, const ForestConfig& cfg, const ForestRoles& roles,
                           std::vector<double> y, std::vector<double> w, std::vector<double> c,
                           std::vector<double> hy, std::vector<double> hw, std::vector<double> hc) {
    ForestModel m;
    m.config_ = cfg;
    m.roles_ = roles;
    m.p_ = d.dim();
    m.n_ = d.size();
    m.x_.assign(d.covariates_colmajor().begin(), d.covariates_colmajor().end());
    m.y_ = std::move(y);
    m.w_ = std::move(w);
    m.c_ = std::move(c);
    m.hy_ = std::move(hy);
    m.hw_ = std::move(hw);
    m.hc_ = std::move(hc);
    m.treated_.resize(m.n_);
    for (std::size_t i = 0; i < m.n_; ++i) m.treated_[i] = static_cast<std::uint8_t>(d.w()[i]);
    if (m.n_ < 2) fail(ErrorCode::TooFewSamples, "forest needs at least two rows");
    if (m.n_ > std::numeric_limits<std::uint32_t>::max()) fail(ErrorCode::ConfigInvalid, "too many rows");

    detail::TreeGrower grower(m.config_, m.n_, m.p_, m.x_, m.y_, m.w_, m.c_, m.treated_);
    m.trees_.resize(cfg.num_trees);
    parallel_for(cfg.num_trees, resolve_threads(static_cast<int>(cfg.threads)),
                 [&](std::size_t t) { m.trees_[t] = grower.grow(t); });
    m.summarize();
    return m;
  }
};

// Out-of-bag regression-forest predictions of one column, used for centering.
inline std::vector<double> oob_center(const Dataset& d, Role column, const ForestConfig& cfg, std::uint64_t salt) {
  ForestConfig rc = cfg;
  rc.mode = ForestMode::regression;
  rc.num_trees = cfg.centering_trees;
  rc.min_node_size = 5;
  rc.seed = derive_seed(cfg.seed, salt, 0xC3);
  std::vector<double> scratch;
  auto col = detail::role_column(d, column, scratch);
  std::vector<double> y(col.begin(), col.end());
  const std::size_t n = d.size();
  auto model = ForestBuilder::build(d, rc, ForestRoles{column, Role::treatment, Role::cost}, y, std::vector<double>(n, 0.0),
                                    std::vector<double>(n, 0.0), std::vector<double>(n, 0.0),
                                    std::vector<double>(n, 0.0), std::vector<double>(n, 0.0));
  return model.oob_predictions(d);
}

// Fits a forest in the configured mode.
//
// With local centering, response, instrument, and exposure are residualized
// on out-of-bag regression-forest predictions before growing; a treatment
// instrument is centered on the dataset's known propensities when present.
inline ForestModel fit_forest(const Dataset& d, const ForestRoles& roles_in, const ForestConfig& cfg_in) {
  const ForestConfig cfg = cfg_in.resolved(d.dim());
  cfg.validate(d.dim());
  ForestRoles roles = roles_in;
  if (cfg.mode == ForestMode::causal) roles.exposure = roles.instrument;
  const std::size_t n = d.size();

  std::vector<double> scratch;
  auto ycol = detail::role_column(d, roles.response, scratch);
  std::vector<double> y(ycol.begin(), ycol.end());
  std::vector<double> hy(n, 0.0), hw(n, 0.0), hc(n, 0.0);

  if (cfg.mode == ForestMode::regression)
    return ForestBuilder::build(d, cfg, roles, std::move(y), std::vector<double>(n, 0.0), std::vector<double>(n, 0.0),
                                std::move(hy), std::move(hw), std::move(hc));

  if (roles.instrument == Role::treatment && !d.has_overlap())
    fail(ErrorCode::DegenerateNode, "no treatment variation in the training data");
  auto wcol = detail::role_column(d, roles.instrument, scratch);
  std::vector<double> w(wcol.begin(), wcol.end());
  auto ccol = detail::role_column(d, roles.exposure, scratch);
  std::vector<double> c(ccol.begin(), ccol.end());

  if (cfg.local_centering) {
    hy = oob_center(d, roles.response, cfg, 1);
    if (roles.instrument == Role::treatment && d.has_propensity()) {
      hw.assign(d.propensity().begin(), d.propensity().end());
    } else {
      hw = oob_center(d, roles.instrument, cfg, 2);
    }
    // An exposure column identical to the instrument shares its centering.
    hc = (roles.exposure == roles.instrument || c == w) ? hw : oob_center(d, roles.exposure, cfg, 3);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] -= hy[i];
      w[i] -= hw[i];
      c[i] -= hc[i];
    }
  }
  return ForestBuilder::build(d, cfg, roles, std::move(y), std::move(w), std::move(c), std::move(hy), std::move(hw),
                              std::move(hc));
}

inline ForestWeights forest_weights(const ForestModel& m, std::span<const double> x) { return m.weights(x); }
inline double predict_ratio(const ForestModel& m, std::span<const double> x) { return m.predict_ratio(x); }
inline double predict_regression(const ForestModel& m, std::span<const double> x) { return m.predict_regression(x); }

// Row-wise predictions for a whole dataset, parallel over rows.
inline std::vector<double> predict_all(const ForestModel& m, const Dataset& d, unsigned threads = 0) {
  if (d.dim() != m.dim()) fail(ErrorCode::DimensionMismatch, "dataset dimension differs from the forest's");
  std::vector<double> out(d.size());
  parallel_for(d.size(), resolve_threads(static_cast<int>(threads)), [&](std::size_t i) {
    const auto row = d.row(i);
    out[i] = m.predict(row);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Serialization: see docs/model_format.md.

inline void ForestModel::serialize(std::ostream& out) const {
  io::Writer wr(out);
  wr.bytes("CCFOREST", 8);
  wr.u32(1);  // layout version
  wr.u8(static_cast<std::uint8_t>(config_.mode));
  wr.u64(config_.num_trees);
  wr.f64(config_.subsample_fraction);
  wr.f64(config_.honesty_fraction);
  wr.u64(config_.min_node_size);
  wr.u64(config_.mtry);
  wr.boolean(config_.max_depth.has_value());
  wr.u64(config_.max_depth.value_or(0));
  wr.u64(config_.seed);
  wr.boolean(config_.local_centering);
  wr.f64(config_.alpha);
  wr.u64(config_.centering_trees);
  wr.u8(static_cast<std::uint8_t>(roles_.response));
  wr.u8(static_cast<std::uint8_t>(roles_.instrument));
  wr.u8(static_cast<std::uint8_t>(roles_.exposure));
  wr.u64(p_);
  wr.u64(n_);
  wr.f64s(x_);
  wr.f64s(y_);
  wr.f64s(w_);
  wr.f64s(c_);
  wr.f64s(hy_);
  wr.f64s(hw_);
  wr.f64s(hc_);
  wr.u64(treated_.size());
  for (auto t : treated_) wr.u8(t);
  wr.u64(trees_.size());
  for (const auto& t : trees_) {
    wr.u32s(t.split_half);
    wr.u32s(t.estimation_half);
    wr.u64(t.nodes.size());
    for (const auto& node : t.nodes) {
      wr.u32(static_cast<std::uint32_t>(node.split_feature));
      wr.f64(node.split_value);
      wr.u32(node.left);
      wr.u32(node.right);
      wr.u32s(node.members);
    }
  }
}

inline ForestModel ForestModel::deserialize(std::istream& in) {
  io::Reader rd(in);
  char magic[8];
  rd.bytes(magic, 8);
  if (std::string(magic, 8) != "CCFOREST") fail(ErrorCode::ModelFormat, "not a forest block");
  if (rd.u32() != 1) fail(ErrorCode::ModelFormat, "unsupported forest layout version");
  ForestModel m;
  const auto mode = rd.u8();
  if (mode > 2) fail(ErrorCode::ModelFormat, "unknown forest mode");
  m.config_.mode = static_cast<ForestMode>(mode);
  m.config_.num_trees = rd.u64();
  m.config_.subsample_fraction = rd.f64();
  m.config_.honesty_fraction = rd.f64();
  m.config_.min_node_size = rd.u64();
  m.config_.mtry = rd.u64();
  const bool has_depth = rd.boolean();
  const auto depth = rd.u64();
  if (has_depth) m.config_.max_depth = depth;
  m.config_.seed = rd.u64();
  m.config_.local_centering = rd.boolean();
  m.config_.alpha = rd.f64();
  m.config_.centering_trees = rd.u64();
  auto role = [&] {
    const auto r = rd.u8();
    if (r > 2) fail(ErrorCode::ModelFormat, "unknown role");
    return static_cast<Role>(r);
  };
  m.roles_.response = role();
  m.roles_.instrument = role();
  m.roles_.exposure = role();
  m.p_ = rd.u64();
  m.n_ = rd.u64();
  m.x_ = rd.f64s();
  m.y_ = rd.f64s();
  m.w_ = rd.f64s();
  m.c_ = rd.f64s();
  m.hy_ = rd.f64s();
  m.hw_ = rd.f64s();
  m.hc_ = rd.f64s();
  m.treated_.resize(rd.length());
  for (auto& t : m.treated_) t = rd.u8();
  const std::size_t n = m.n_;
  if (m.x_.size() != n * m.p_ || m.y_.size() != n || m.w_.size() != n || m.c_.size() != n || m.treated_.size() != n)
    fail(ErrorCode::ModelFormat, "inconsistent training columns");
  m.trees_.resize(rd.length());
  for (auto& t : m.trees_) {
    t.split_half = rd.u32s();
    t.estimation_half = rd.u32s();
    t.nodes.resize(rd.length());
    for (auto& node : t.nodes) {
      node.split_feature = static_cast<std::int32_t>(rd.u32());
      node.split_value = rd.f64();
      node.left = rd.u32();
      node.right = rd.u32();
      node.members = rd.u32s();
      if (!node.is_leaf() && (node.split_feature >= static_cast<std::int32_t>(m.p_) || node.left >= t.nodes.size() ||
                              node.right >= t.nodes.size()))
        fail(ErrorCode::ModelFormat, "corrupt tree node");
      for (auto i : node.members)
        if (i >= n) fail(ErrorCode::ModelFormat, "leaf member out of range");
    }
  }
  if (m.trees_.empty()) fail(ErrorCode::ModelFormat, "forest has no trees");
  m.summarize();
  return m;
}

}  // namespace costcast
