#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "costcast/csv.hpp"
#include "costcast/error.hpp"
#include "costcast/rng.hpp"

namespace costcast {

// One experimental unit, materialized on demand from a Dataset.
struct Sample {
  std::vector<double> x;
  int w = 0;
  double y = 0.0;
  double c = 0.0;
  std::optional<double> propensity;
  std::optional<std::int64_t> cluster_id;
};

struct DatasetOptions {
  bool zero_control_cost = false;
  std::optional<double> default_propensity;
  // Per-row propensities; NaN marks "use default". Empty means none given.
  std::vector<double> propensity;
  // Per-row cluster ids; empty means unclustered.
  std::vector<std::int64_t> clusters;
  std::vector<std::string> feature_names;
  // Ingested data must contain both arms. Derived subsets (folds, halves,
  // bootstrap draws) skip the check; consumers that need overlap check it.
  bool require_overlap = true;
};

// Immutable, validated, column-major collection of samples.
//
// Propensity resolution: if neither per-row values nor a default are given the
// dataset carries no propensity information and `has_propensity()` is false.
// Otherwise every row must resolve to a value in (0, 1).
class Dataset {
 public:
  Dataset() = default;

  Dataset(std::size_t p, std::vector<double> x_colmajor, std::vector<int> w,
          std::vector<double> y, std::vector<double> c, DatasetOptions opts = {})
      : p_(p),
        n_(w.size()),
        x_(std::move(x_colmajor)),
        w_(std::move(w)),
        y_(std::move(y)),
        c_(std::move(c)),
        zero_control_cost_(opts.zero_control_cost),
        default_propensity_(opts.default_propensity),
        clusters_(std::move(opts.clusters)),
        names_(std::move(opts.feature_names)) {
    if (p_ < 1) fail(ErrorCode::DimensionMismatch, "covariate dimension must be >= 1");
    if (x_.size() != n_ * p_ || y_.size() != n_ || c_.size() != n_)
      fail(ErrorCode::LengthMismatch, "column lengths disagree");
    if (!clusters_.empty() && clusters_.size() != n_)
      fail(ErrorCode::LengthMismatch, "cluster column length disagrees");
    if (!opts.propensity.empty() && opts.propensity.size() != n_)
      fail(ErrorCode::LengthMismatch, "propensity column length disagrees");
    if (names_.empty())
      for (std::size_t j = 0; j < p_; ++j) names_.push_back("x" + std::to_string(j + 1));
    if (names_.size() != p_) fail(ErrorCode::LengthMismatch, "feature name count disagrees");

    const bool any_propensity = !opts.propensity.empty() || default_propensity_.has_value();
    if (default_propensity_ && !(*default_propensity_ > 0.0 && *default_propensity_ < 1.0))
      fail(ErrorCode::PropensityOutOfRange, "default propensity must lie in (0,1)");
    if (any_propensity) propensity_.assign(n_, default_propensity_.value_or(std::nan("")));

    std::size_t treated = 0;
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t j = 0; j < p_; ++j)
        if (!std::isfinite(x_[j * n_ + i]))
          fail(ErrorCode::NonFiniteValue, "covariate '" + names_[j] + "' is not finite", i);
      if (w_[i] != 0 && w_[i] != 1) fail(ErrorCode::NonBinaryTreatment, "treatment must be 0 or 1", i);
      if (!std::isfinite(y_[i])) fail(ErrorCode::NonFiniteValue, "outcome is not finite", i);
      if (!std::isfinite(c_[i])) fail(ErrorCode::NonFiniteValue, "cost is not finite", i);
      if (c_[i] < 0.0) fail(ErrorCode::NegativeCost, "cost must be nonnegative", i);
      if (zero_control_cost_ && w_[i] == 0 && c_[i] != 0.0)
        fail(ErrorCode::ControlCostNonzero, "control cost must be 0 when zero_control_cost is set", i);
      if (!opts.propensity.empty() && !std::isnan(opts.propensity[i])) propensity_[i] = opts.propensity[i];
      if (any_propensity) {
        const double e = propensity_[i];
        if (std::isnan(e)) fail(ErrorCode::MissingPropensity, "row has no propensity and no default", i);
        if (!(e > 0.0 && e < 1.0)) fail(ErrorCode::PropensityOutOfRange, "propensity must lie in (0,1)", i);
      }
      treated += static_cast<std::size_t>(w_[i]);
    }
    if (opts.require_overlap && (treated == 0 || treated == n_))
      fail(ErrorCode::NoOverlap, "dataset needs at least one treated and one control unit");
  }

  std::size_t size() const noexcept { return n_; }
  std::size_t dim() const noexcept { return p_; }

  double x(std::size_t i, std::size_t j) const { return x_[j * n_ + i]; }
  std::span<const double> feature(std::size_t j) const { return {x_.data() + j * n_, n_}; }
  std::vector<double> row(std::size_t i) const {
    std::vector<double> r(p_);
    for (std::size_t j = 0; j < p_; ++j) r[j] = x(i, j);
    return r;
  }

  std::span<const int> w() const noexcept { return w_; }
  std::span<const double> y() const noexcept { return y_; }
  std::span<const double> c() const noexcept { return c_; }
  std::span<const double> covariates_colmajor() const noexcept { return x_; }

  bool zero_control_cost() const noexcept { return zero_control_cost_; }
  std::optional<double> default_propensity() const noexcept { return default_propensity_; }
  bool has_propensity() const noexcept { return !propensity_.empty(); }
  std::span<const double> propensity() const noexcept { return propensity_; }
  double propensity(std::size_t i) const {
    if (propensity_.empty()) fail(ErrorCode::MissingPropensity, "dataset has no propensity information");
    return propensity_[i];
  }
  // True when every row carries the same known propensity.
  std::optional<double> constant_propensity() const {
    if (propensity_.empty()) return std::nullopt;
    for (double e : propensity_)
      if (e != propensity_.front()) return std::nullopt;
    return propensity_.front();
  }

  bool has_clusters() const noexcept { return !clusters_.empty(); }
  std::span<const std::int64_t> clusters() const noexcept { return clusters_; }
  const std::vector<std::string>& feature_names() const noexcept { return names_; }

  std::size_t treated_count() const {
    return static_cast<std::size_t>(std::count(w_.begin(), w_.end(), 1));
  }
  bool has_overlap() const {
    const std::size_t t = treated_count();
    return t > 0 && t < n_;
  }

  Sample sample(std::size_t i) const {
    Sample s{row(i), w_[i], y_[i], c_[i], std::nullopt, std::nullopt};
    if (!propensity_.empty()) s.propensity = propensity_[i];
    if (!clusters_.empty()) s.cluster_id = clusters_[i];
    return s;
  }

  // Rows in the given order; validation reruns on the result.
  Dataset subset(std::span<const std::size_t> rows) const {
    const std::size_t m = rows.size();
    std::vector<double> x(m * p_), y(m), c(m);
    std::vector<int> w(m);
    DatasetOptions opts;
    opts.zero_control_cost = zero_control_cost_;
    opts.default_propensity = default_propensity_;
    opts.feature_names = names_;
    opts.require_overlap = false;
    if (!propensity_.empty()) opts.propensity.resize(m);
    if (!clusters_.empty()) opts.clusters.resize(m);
    for (std::size_t k = 0; k < m; ++k) {
      const std::size_t i = rows[k];
      for (std::size_t j = 0; j < p_; ++j) x[j * m + k] = x_[j * n_ + i];
      w[k] = w_[i];
      y[k] = y_[i];
      c[k] = c_[i];
      if (!propensity_.empty()) opts.propensity[k] = propensity_[i];
      if (!clusters_.empty()) opts.clusters[k] = clusters_[i];
    }
    return Dataset(p_, std::move(x), std::move(w), std::move(y), std::move(c), std::move(opts));
  }

 private:
  std::size_t p_ = 0;
  std::size_t n_ = 0;
  std::vector<double> x_;
  std::vector<int> w_;
  std::vector<double> y_;
  std::vector<double> c_;
  bool zero_control_cost_ = false;
  std::optional<double> default_propensity_;
  std::vector<double> propensity_;
  std::vector<std::int64_t> clusters_;
  std::vector<std::string> names_;
};

// Builds a dataset from row-major covariates.
inline Dataset make_dataset(const std::vector<std::vector<double>>& rows, std::vector<int> w,
                            std::vector<double> y, std::vector<double> c, DatasetOptions opts = {}) {
  if (rows.empty()) fail(ErrorCode::TooFewSamples, "no rows");
  const std::size_t n = rows.size(), p = rows.front().size();
  std::vector<double> x(n * p);
  for (std::size_t i = 0; i < n; ++i) {
    if (rows[i].size() != p) fail(ErrorCode::DimensionMismatch, "ragged covariate rows", i);
    for (std::size_t j = 0; j < p; ++j) x[j * n + i] = rows[i][j];
  }
  return Dataset(p, std::move(x), std::move(w), std::move(y), std::move(c), std::move(opts));
}

// Evaluation-only view of a dataset. Evaluation routines accept this type, so a
// training Dataset cannot be passed to them without an explicit wrap.
class HoldoutSet {
 public:
  explicit HoldoutSet(Dataset d) : data_(std::move(d)) {}
  const Dataset& data() const noexcept { return data_; }
  std::size_t size() const noexcept { return data_.size(); }

 private:
  Dataset data_;
};

// ---------------------------------------------------------------------------
// CSV ingestion

struct CsvSchema {
  // Empty: every column not bound to another role is a covariate.
  std::vector<std::string> covariates;
  std::string treatment = "w";
  std::string outcome = "y";
  std::string cost = "c";
  std::optional<std::string> propensity;
  std::optional<std::string> cluster;
  bool zero_control_cost = false;
  std::optional<double> default_propensity;
};

inline Dataset dataset_from_table(const csv::Table& table, const CsvSchema& schema) {
  const std::size_t wj = table.require_column(schema.treatment);
  const std::size_t yj = table.require_column(schema.outcome);
  const std::size_t cj = table.require_column(schema.cost);
  std::optional<std::size_t> ej, gj;
  if (schema.propensity) ej = table.require_column(*schema.propensity);
  if (schema.cluster) gj = table.require_column(*schema.cluster);

  std::vector<std::size_t> xcols;
  std::vector<std::string> names;
  if (schema.covariates.empty()) {
    for (std::size_t j = 0; j < table.header.size(); ++j) {
      if (j == wj || j == yj || j == cj || (ej && j == *ej) || (gj && j == *gj)) continue;
      xcols.push_back(j);
      names.push_back(table.header[j]);
    }
  } else {
    for (const auto& name : schema.covariates) {
      xcols.push_back(table.require_column(name));
      names.push_back(name);
    }
  }
  if (xcols.empty()) fail(ErrorCode::MissingColumn, "no covariate columns");

  const std::size_t n = table.rows.size(), p = xcols.size();
  if (n == 0) fail(ErrorCode::TooFewSamples, "no data rows");
  std::vector<double> x(n * p), y(n), c(n);
  std::vector<int> w(n);
  DatasetOptions opts;
  opts.zero_control_cost = schema.zero_control_cost;
  opts.default_propensity = schema.default_propensity;
  opts.feature_names = names;
  if (ej) opts.propensity.resize(n);
  if (gj) opts.clusters.resize(n);

  auto number = [&](std::size_t i, std::size_t j, const std::string& role) {
    const std::string& cell = table.rows[i][j];
    if (csv::trim(cell).empty()) fail(ErrorCode::MissingValue, "missing " + role + " ('" + table.header[j] + "')", i);
    double v;
    if (!csv::parse_double(cell, v))
      fail(ErrorCode::MalformedInput, "cannot parse '" + cell + "' in column '" + table.header[j] + "'", i);
    return v;
  };

  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < p; ++k) x[k * n + i] = number(i, xcols[k], "covariate");
    const double wv = number(i, wj, "treatment");
    if (wv != 0.0 && wv != 1.0) fail(ErrorCode::NonBinaryTreatment, "treatment value '" + table.rows[i][wj] + "'", i);
    w[i] = static_cast<int>(wv);
    y[i] = number(i, yj, "outcome");
    c[i] = number(i, cj, "cost");
    if (ej) opts.propensity[i] = number(i, *ej, "propensity");
    if (gj) {
      const double g = number(i, *gj, "cluster");
      if (g != std::floor(g) || !std::isfinite(g))
        fail(ErrorCode::MalformedInput, "cluster id must be an integer", i);
      opts.clusters[i] = static_cast<std::int64_t>(g);
    }
  }
  return Dataset(p, std::move(x), std::move(w), std::move(y), std::move(c), std::move(opts));
}

inline Dataset load_dataset(const std::string& path, const CsvSchema& schema = {}) {
  return dataset_from_table(csv::read_file(path), schema);
}

// Writes covariates, treatment, outcome, cost, and (when present) propensity
// and cluster columns. Doubles use the shortest round-tripping form.
inline void write_dataset(std::ostream& out, const Dataset& d, const CsvSchema& schema = {}) {
  std::vector<std::string> header = d.feature_names();
  header.push_back(schema.treatment);
  header.push_back(schema.outcome);
  header.push_back(schema.cost);
  if (d.has_propensity()) header.push_back(schema.propensity.value_or("propensity"));
  if (d.has_clusters()) header.push_back(schema.cluster.value_or("cluster"));
  csv::write_row(out, header);
  std::vector<std::string> cells;
  for (std::size_t i = 0; i < d.size(); ++i) {
    cells.clear();
    for (std::size_t j = 0; j < d.dim(); ++j) cells.push_back(csv::format_double(d.x(i, j)));
    cells.push_back(std::to_string(d.w()[i]));
    cells.push_back(csv::format_double(d.y()[i]));
    cells.push_back(csv::format_double(d.c()[i]));
    if (d.has_propensity()) cells.push_back(csv::format_double(d.propensity(i)));
    if (d.has_clusters()) cells.push_back(std::to_string(d.clusters()[i]));
    csv::write_row(out, cells);
  }
}

inline void write_dataset(const std::string& path, const Dataset& d, const CsvSchema& schema = {}) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot write '" + path + "'");
  write_dataset(out, d, schema);
}

// ---------------------------------------------------------------------------
// Splitting
//
// Random order comes from a keyed hash of each row's content (or its cluster
// id), not from the row's position, so permuting the rows permutes the
// assignment the same way.

namespace detail {

inline std::uint64_t row_key(const Dataset& d, std::size_t i, std::uint64_t seed) {
  std::uint64_t h = mix_seed(seed ^ 0x5bd1e995ULL);
  if (d.has_clusters()) return mix_seed(h ^ static_cast<std::uint64_t>(d.clusters()[i]));
  for (std::size_t j = 0; j < d.dim(); ++j) h = mix_seed(h ^ std::bit_cast<std::uint64_t>(d.x(i, j)));
  h = mix_seed(h ^ static_cast<std::uint64_t>(d.w()[i]));
  h = mix_seed(h ^ std::bit_cast<std::uint64_t>(d.y()[i]));
  h = mix_seed(h ^ std::bit_cast<std::uint64_t>(d.c()[i]));
  return h;
}

// Units that must stay together: a cluster, or a single row.
struct Block {
  std::uint64_t key = 0;
  std::vector<std::size_t> rows;
  std::size_t treated = 0;
};

inline std::vector<Block> make_blocks(const Dataset& d, std::uint64_t seed) {
  std::vector<Block> blocks;
  if (d.has_clusters()) {
    std::map<std::int64_t, std::size_t> index;
    for (std::size_t i = 0; i < d.size(); ++i) {
      auto [it, inserted] = index.emplace(d.clusters()[i], blocks.size());
      if (inserted) blocks.push_back(Block{row_key(d, i, seed), {}, 0});
      blocks[it->second].rows.push_back(i);
      blocks[it->second].treated += static_cast<std::size_t>(d.w()[i]);
    }
  } else {
    blocks.reserve(d.size());
    for (std::size_t i = 0; i < d.size(); ++i)
      blocks.push_back(Block{row_key(d, i, seed), {i}, static_cast<std::size_t>(d.w()[i])});
  }
  // Ties on the key (duplicate rows) fall back to the smallest member row.
  std::sort(blocks.begin(), blocks.end(), [](const Block& a, const Block& b) {
    return a.key != b.key ? a.key < b.key : a.rows.front() < b.rows.front();
  });
  return blocks;
}

// Interleaves treated-majority and control-majority blocks so that every
// prefix is approximately stratified on treatment.
inline std::vector<const Block*> stratified_order(const std::vector<Block>& blocks) {
  std::vector<const Block*> treated, control;
  for (const auto& b : blocks) (2 * b.treated >= b.rows.size() ? treated : control).push_back(&b);
  std::vector<std::pair<double, const Block*>> keyed;
  keyed.reserve(blocks.size());
  for (std::size_t r = 0; r < treated.size(); ++r)
    keyed.emplace_back((r + 0.5) / static_cast<double>(treated.size()), treated[r]);
  for (std::size_t r = 0; r < control.size(); ++r)
    keyed.emplace_back((r + 0.5) / static_cast<double>(control.size()), control[r]);
  std::stable_sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return a.second->key < b.second->key;
  });
  std::vector<const Block*> order;
  order.reserve(keyed.size());
  for (auto& [pos, b] : keyed) order.push_back(b);
  return order;
}

}  // namespace detail

struct SplitPlan {
  std::vector<int> fold_assignment;
  std::uint64_t seed = 0;
  bool stratified = false;
  int folds = 0;

  std::vector<std::size_t> members(int k) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold_assignment.size(); ++i)
      if (fold_assignment[i] == k) out.push_back(i);
    return out;
  }
  std::vector<std::size_t> complement(int k) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold_assignment.size(); ++i)
      if (fold_assignment[i] != k) out.push_back(i);
    return out;
  }
};

// K folds. Without clusters, fold sizes differ by at most one. Clusters are
// placed whole, each into the currently smallest fold.
inline SplitPlan make_folds(const Dataset& d, int K, std::uint64_t seed, bool stratify = false) {
  if (K < 2) fail(ErrorCode::ConfigInvalid, "need K >= 2 folds");
  if (static_cast<std::size_t>(K) > d.size())
    fail(ErrorCode::TooFewSamples, "K=" + std::to_string(K) + " exceeds n=" + std::to_string(d.size()));
  const auto blocks = detail::make_blocks(d, seed);
  std::vector<const detail::Block*> order;
  if (stratify) {
    order = detail::stratified_order(blocks);
  } else {
    for (const auto& b : blocks) order.push_back(&b);
  }

  SplitPlan plan{std::vector<int>(d.size(), -1), seed, stratify, K};
  if (!d.has_clusters()) {
    for (std::size_t r = 0; r < order.size(); ++r)
      plan.fold_assignment[order[r]->rows.front()] = static_cast<int>(r % static_cast<std::size_t>(K));
    return plan;
  }
  std::vector<std::size_t> sizes(static_cast<std::size_t>(K), 0);
  for (const auto* b : order) {
    const auto k = static_cast<std::size_t>(std::min_element(sizes.begin(), sizes.end()) - sizes.begin());
    sizes[k] += b->rows.size();
    for (std::size_t i : b->rows) plan.fold_assignment[i] = static_cast<int>(k);
  }
  return plan;
}

struct TrainTestSplit {
  Dataset train;
  HoldoutSet test;
};

// Treatment-stratified, cluster-coherent split. The test side targets
// ceil(n * test_fraction) rows; a cluster goes to the test side when that
// moves the test size closer to the target.
inline TrainTestSplit train_test_split(const Dataset& d, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    fail(ErrorCode::ConfigInvalid, "test_fraction must lie in (0,1)");
  if (d.size() < 2) fail(ErrorCode::TooFewSamples, "need at least two rows to split");
  const auto target = static_cast<std::size_t>(std::ceil(static_cast<double>(d.size()) * test_fraction));
  const auto blocks = detail::make_blocks(d, seed);
  const auto order = detail::stratified_order(blocks);

  std::vector<std::size_t> test_rows, train_rows;
  for (const auto* b : order) {
    const double now = std::abs(static_cast<double>(test_rows.size()) - static_cast<double>(target));
    const double after =
        std::abs(static_cast<double>(test_rows.size() + b->rows.size()) - static_cast<double>(target));
    auto& side = (after < now) ? test_rows : train_rows;
    side.insert(side.end(), b->rows.begin(), b->rows.end());
  }
  if (test_rows.empty() || train_rows.empty())
    fail(ErrorCode::TooFewSamples, "split leaves one side empty");
  std::sort(test_rows.begin(), test_rows.end());
  std::sort(train_rows.begin(), train_rows.end());
  return TrainTestSplit{d.subset(train_rows), HoldoutSet(d.subset(test_rows))};
}

}  // namespace costcast
