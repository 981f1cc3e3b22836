#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "costcast/binary_io.hpp"
#include "costcast/core_data.hpp"
#include "costcast/error.hpp"
#include "costcast/forests.hpp"
#include "costcast/rng.hpp"

namespace costcast {

// ---------------------------------------------------------------------------
// Cross-fitted nuisances

// Per-row nuisance values h_y = E[Y|X], h_w = E[W|X], h_c = E[C|X]. Row i's
// values come from models trained on the other folds only.
struct NuisanceFit {
  SplitPlan plan;
  std::vector<double> hy, hw, hc;
  bool known_propensity = false;
  // Rows each fold's regressors were trained on.
  std::vector<std::vector<std::size_t>> training_rows;
};

namespace detail {

inline ForestConfig nuisance_config(const ForestConfig& cfg, std::uint64_t seed, std::uint64_t fold,
                                    std::uint64_t column) {
  ForestConfig rc = cfg;
  rc.mode = ForestMode::regression;
  rc.local_centering = false;
  rc.seed = derive_seed(seed, fold, 0xD0 + column);
  return rc;
}

}  // namespace detail

// With known propensities h_w is the propensity itself. Under
// zero_control_cost, h_c = e(x) * E[C | X, W = 1] with the conditional mean
// fitted on treated rows only.
inline NuisanceFit fit_nuisances(const Dataset& d, int K, const ForestConfig& cfg, std::uint64_t seed) {
  NuisanceFit fit;
  fit.plan = make_folds(d, K, seed);
  const std::size_t n = d.size();
  fit.hy.assign(n, 0.0);
  fit.hw.assign(n, 0.0);
  fit.hc.assign(n, 0.0);
  fit.known_propensity = d.has_propensity();
  const bool treated_cost = d.zero_control_cost() && d.has_propensity();

  for (int k = 0; k < K; ++k) {
    const auto held = fit.plan.members(k);
    auto train_rows = fit.plan.complement(k);
    const Dataset train = d.subset(train_rows);
    const Dataset test = d.subset(held);
    auto predict_into = [&](const ForestModel& m, std::vector<double>& out) {
      const auto pred = predict_all(m, test, cfg.threads);
      for (std::size_t r = 0; r < held.size(); ++r) out[held[r]] = pred[r];
    };
    const auto fk = static_cast<std::uint64_t>(k);
    predict_into(fit_forest(train, {Role::outcome}, detail::nuisance_config(cfg, seed, fk, 0)), fit.hy);
    if (fit.known_propensity) {
      for (auto i : held) fit.hw[i] = d.propensity(i);
    } else {
      predict_into(fit_forest(train, {Role::treatment}, detail::nuisance_config(cfg, seed, fk, 1)), fit.hw);
    }
    if (treated_cost) {
      std::vector<std::size_t> treated;
      for (std::size_t r = 0; r < train.size(); ++r)
        if (train.w()[r]) treated.push_back(r);
      if (treated.size() < 2) fail(ErrorCode::NoTreatedUnits, "fold " + std::to_string(k) + " training side has too few treated rows");
      std::vector<double> gamma(n, 0.0);
      predict_into(fit_forest(train.subset(treated), {Role::cost}, detail::nuisance_config(cfg, seed, fk, 2)), gamma);
      for (auto i : held) fit.hc[i] = d.propensity(i) * gamma[i];
    } else {
      predict_into(fit_forest(train, {Role::cost}, detail::nuisance_config(cfg, seed, fk, 2)), fit.hc);
    }
    fit.training_rows.push_back(std::move(train_rows));
  }
  return fit;
}

// ---------------------------------------------------------------------------
// Cross-fitted linear ratio estimator

struct DmlFit {
  Eigen::VectorXd beta;
  std::vector<Eigen::VectorXd> beta_per_fold;
  Eigen::MatrixXd vcov;   // covariance of beta itself (already divided by n)
  Eigen::MatrixXd J;      // mean of A S'
  Eigen::MatrixXd Omega;  // mean of V V'
  std::vector<double> condition_per_fold;
  bool intercept = false;
  NuisanceFit nuisances;

  Eigen::VectorXd se() const { return vcov.diagonal().cwiseMax(0.0).cwiseSqrt(); }
};

struct DmlOptions {
  bool intercept = false;  // prepend a constant regressor
  static constexpr double kMaxCondition = 1e10;
};

namespace detail {

inline Eigen::VectorXd regressors(const Dataset& d, std::size_t i, bool intercept) {
  const auto p = static_cast<Eigen::Index>(d.dim());
  Eigen::VectorXd x(p + (intercept ? 1 : 0));
  Eigen::Index k = 0;
  if (intercept) x(k++) = 1.0;
  for (Eigen::Index j = 0; j < p; ++j) x(k++) = d.x(i, static_cast<std::size_t>(j));
  return x;
}

inline double condition_number(const Eigen::MatrixXd& m) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const auto& s = svd.singularValues();
  const double smin = s(s.size() - 1);
  return smin > 0.0 ? s(0) / smin : std::numeric_limits<double>::infinity();
}

}  // namespace detail

// Solves, per fold k,
//   sum_{i in k} (W - h_w)(C - h_c) x x' beta_k = sum_{i in k} (W - h_w)(Y - h_y) x,
// averages beta_k, and forms the sandwich covariance J^{-1} Omega J^{-T} / n
// with A = (W - h_w) x, S = (C - h_c) x, V = A (Y - h_y - S' beta).
inline DmlFit dml_from_nuisances(const Dataset& d, const NuisanceFit& nu, DmlOptions opts = {}) {
  const std::size_t n = d.size();
  if (nu.hy.size() != n || nu.hw.size() != n || nu.hc.size() != n || nu.plan.fold_assignment.size() != n)
    fail(ErrorCode::LengthMismatch, "nuisances do not align with the dataset");
  const Eigen::Index q = static_cast<Eigen::Index>(d.dim()) + (opts.intercept ? 1 : 0);
  DmlFit fit;
  fit.intercept = opts.intercept;
  fit.beta = Eigen::VectorXd::Zero(q);

  for (int k = 0; k < nu.plan.folds; ++k) {
    const auto rows = nu.plan.members(k);
    if (rows.size() < static_cast<std::size_t>(q))
      fail(ErrorCode::FoldTooSmall, "fold " + std::to_string(k) + " has " + std::to_string(rows.size()) +
                                        " rows for " + std::to_string(q) + " coefficients");
    Eigen::MatrixXd lhs = Eigen::MatrixXd::Zero(q, q);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(q);
    for (auto i : rows) {
      const auto x = detail::regressors(d, i, opts.intercept);
      const double wr = d.w()[i] - nu.hw[i];
      lhs.noalias() += wr * (d.c()[i] - nu.hc[i]) * x * x.transpose();
      rhs.noalias() += wr * (d.y()[i] - nu.hy[i]) * x;
    }
    const double cond = detail::condition_number(lhs);
    fit.condition_per_fold.push_back(cond);
    if (!(cond <= DmlOptions::kMaxCondition))
      fail(ErrorCode::SingularMoment,
           "fold " + std::to_string(k) + " moment matrix has condition number " + std::to_string(cond));
    Eigen::VectorXd bk = lhs.partialPivLu().solve(rhs);
    fit.beta += bk;
    fit.beta_per_fold.push_back(std::move(bk));
  }
  fit.beta /= static_cast<double>(nu.plan.folds);

  fit.J = Eigen::MatrixXd::Zero(q, q);
  fit.Omega = Eigen::MatrixXd::Zero(q, q);
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = detail::regressors(d, i, opts.intercept);
    const double wr = d.w()[i] - nu.hw[i];
    const double cr = d.c()[i] - nu.hc[i];
    const double e = wr * (d.y()[i] - nu.hy[i] - cr * x.dot(fit.beta));
    fit.J.noalias() += wr * cr * x * x.transpose();
    fit.Omega.noalias() += e * e * x * x.transpose();
  }
  fit.J /= static_cast<double>(n);
  fit.Omega /= static_cast<double>(n);
  const Eigen::MatrixXd Jinv = fit.J.inverse();
  fit.vcov = Jinv * fit.Omega * Jinv.transpose() / static_cast<double>(n);
  fit.vcov = 0.5 * (fit.vcov + fit.vcov.transpose());
  fit.nuisances = nu;
  return fit;
}

inline DmlFit fit_dml(const Dataset& d, int K, const ForestConfig& nuisance_cfg, std::uint64_t seed,
                      DmlOptions opts = {}) {
  if (K < 2) fail(ErrorCode::ConfigInvalid, "fit_dml needs K >= 2");
  if (!d.has_overlap()) fail(ErrorCode::NoOverlap, "fit_dml needs treated and control rows");
  return dml_from_nuisances(d, fit_nuisances(d, K, nuisance_cfg, seed), opts);
}

// ---------------------------------------------------------------------------
// Orthogonality diagnostics

// Mean of x_i e_i with e_i = (W - h_w)((Y - h_y) - (C - h_c) x' beta).
inline Eigen::VectorXd empirical_moment(const Dataset& d, const Eigen::VectorXd& beta, std::span<const double> hy,
                                        std::span<const double> hw, std::span<const double> hc,
                                        bool intercept = false) {
  const Eigen::Index q = static_cast<Eigen::Index>(d.dim()) + (intercept ? 1 : 0);
  if (beta.size() != q) fail(ErrorCode::DimensionMismatch, "beta has the wrong length");
  Eigen::VectorXd m = Eigen::VectorXd::Zero(q);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto x = detail::regressors(d, i, intercept);
    m += (d.w()[i] - hw[i]) * ((d.y()[i] - hy[i]) - (d.c()[i] - hc[i]) * x.dot(beta)) * x;
  }
  return m / static_cast<double>(d.size());
}

struct NuisanceDirections {
  std::vector<double> dy, dw, dc;
};

// Uniform(-1, 1) perturbation per row and nuisance.
inline NuisanceDirections random_directions(std::size_t n, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0, 0x0D);
  NuisanceDirections dir{std::vector<double>(n), std::vector<double>(n), std::vector<double>(n)};
  for (auto* v : {&dir.dy, &dir.dw, &dir.dc})
    for (auto& x : *v) x = 2.0 * uniform01(rng) - 1.0;
  return dir;
}

// Moment at h + eps * delta, perturbing the selected nuisances jointly.
inline Eigen::VectorXd perturbed_moment(const Dataset& d, const Eigen::VectorXd& beta, const NuisanceFit& nu,
                                        const NuisanceDirections& dir, double eps, bool py, bool pw, bool pc,
                                        bool intercept = false) {
  std::vector<double> hy = nu.hy, hw = nu.hw, hc = nu.hc;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (py) hy[i] += eps * dir.dy[i];
    if (pw) hw[i] += eps * dir.dw[i];
    if (pc) hc[i] += eps * dir.dc[i];
  }
  return empirical_moment(d, beta, hy, hw, hc, intercept);
}

struct OrthogonalityReport {
  double d_y = 0.0, d_w = 0.0, d_c = 0.0;  // norms of directional derivatives
};

// Central finite differences of the empirical moment along random bounded
// directions, one nuisance at a time. The moment is affine in each single
// nuisance, so the difference is the exact directional derivative.
inline OrthogonalityReport orthogonality_check(const Dataset& d, const Eigen::VectorXd& beta, const NuisanceFit& nu,
                                               double perturbation_scale, std::uint64_t seed = 0,
                                               bool intercept = false) {
  if (!(perturbation_scale > 0.0)) return {};
  const auto dir = random_directions(d.size(), seed);
  auto derivative = [&](bool py, bool pw, bool pc) {
    const auto up = perturbed_moment(d, beta, nu, dir, perturbation_scale, py, pw, pc, intercept);
    const auto down = perturbed_moment(d, beta, nu, dir, -perturbation_scale, py, pw, pc, intercept);
    return ((up - down) / (2.0 * perturbation_scale)).norm();
  };
  return {derivative(true, false, false), derivative(false, true, false), derivative(false, false, true)};
}

// Population moment over a finite covariate support, generic in the scalar
// type so that it can be evaluated in exact rational arithmetic.
template <typename T>
struct SupportPoint {
  std::vector<T> x;
  T mass;      // P(X = x)
  T e;         // P(W = 1 | X = x)
  T mu0, mu1;  // E[Y | X = x, W = w]
  T nu0, nu1;  // E[C | X = x, W = w]
  T dy, dw, dc;  // nuisance perturbation directions at x
};

// E[ x (W - h_w - eps dw)((Y - h_y - eps dy) - (C - h_c - eps dc) x' beta) ]
// at the true nuisances h_w = e, h_y = e mu1 + (1 - e) mu0, h_c likewise.
template <typename T>
std::vector<T> population_moment(const std::vector<SupportPoint<T>>& support, const std::vector<T>& beta, const T& eps) {
  std::vector<T> m(beta.size(), T(0));
  for (const auto& s : support) {
    T xb(0);
    for (std::size_t j = 0; j < beta.size(); ++j) xb += s.x[j] * beta[j];
    const T hw = s.e;
    const T hy = s.e * s.mu1 + (T(1) - s.e) * s.mu0;
    const T hc = s.e * s.nu1 + (T(1) - s.e) * s.nu0;
    T cell(0);
    for (int w = 0; w <= 1; ++w) {
      const T pw = w ? s.e : T(1) - s.e;
      const T mu = w ? s.mu1 : s.mu0;
      const T nu = w ? s.nu1 : s.nu0;
      cell += pw * (T(w) - hw - eps * s.dw) * ((mu - hy - eps * s.dy) - (nu - hc - eps * s.dc) * xb);
    }
    for (std::size_t j = 0; j < beta.size(); ++j) m[j] += s.mass * s.x[j] * cell;
  }
  return m;
}

// Within one covariate cell: potential outcomes drawn from finitely many atoms
// and W independent of them with P(W = 1) = e.
template <typename T>
struct PotentialAtom {
  T mass;
  T y0, y1, c0, c1;
};

// Cov(Y, W) / Cov(C, W) for the observed Y = Y(W), C = C(W), computed by
// enumerating the joint law of (atom, W).
template <typename T>
T cell_covariance_ratio(const std::vector<PotentialAtom<T>>& atoms, const T& e) {
  T ey(0), ec(0), ew(0), eyw(0), ecw(0);
  for (const auto& a : atoms) {
    for (int w = 0; w <= 1; ++w) {
      const T p = a.mass * (w ? e : T(1) - e);
      const T y = w ? a.y1 : a.y0;
      const T c = w ? a.c1 : a.c0;
      ey += p * y;
      ec += p * c;
      ew += p * T(w);
      eyw += p * y * T(w);
      ecw += p * c * T(w);
    }
  }
  const T den = ecw - ec * ew;
  if (den == T(0)) fail(ErrorCode::ZeroDenominator, "cell has no cost-treatment covariance");
  return (eyw - ey * ew) / den;
}

// delta_Y / delta_C for the same cell.
template <typename T>
T cell_effect_ratio(const std::vector<PotentialAtom<T>>& atoms) {
  T dy(0), dc(0);
  for (const auto& a : atoms) {
    dy += a.mass * (a.y1 - a.y0);
    dc += a.mass * (a.c1 - a.c0);
  }
  if (dc == T(0)) fail(ErrorCode::ZeroDenominator, "cell has zero incremental cost");
  return dy / dc;
}

// ---------------------------------------------------------------------------
// Priority models

enum class ModelKind : std::uint8_t { dml_linear = 0, iv_forest = 1, direct_ratio = 2, ignore_cost = 3 };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::dml_linear: return "dml";
    case ModelKind::iv_forest: return "iv_forest";
    case ModelKind::direct_ratio: return "direct_ratio";
    case ModelKind::ignore_cost: return "ignore_cost";
  }
  return "unknown";
}

inline ModelKind parse_model_kind(std::string_view s) {
  if (s == "dml" || s == "dml_linear") return ModelKind::dml_linear;
  if (s == "iv_forest") return ModelKind::iv_forest;
  if (s == "direct_ratio") return ModelKind::direct_ratio;
  if (s == "ignore_cost") return ModelKind::ignore_cost;
  fail(ErrorCode::ConfigInvalid, "unknown method '" + std::string(s) + "'");
}

struct ScoreBatch {
  std::vector<double> scores;
  std::vector<std::uint8_t> guarded;  // 1 where the direct-ratio guard fired
};

// A fitted scorer mapping covariates to a priority. Immutable once built.
class PriorityModel {
 public:
  static constexpr double kLarge = 1e300;
  static constexpr double kGuardFraction = 1e-6;
  static constexpr const char* kMagic = "COSTCAST";
  static constexpr std::uint32_t kVersionMajor = 1, kVersionMinor = 0, kVersionPatch = 0;

  ModelKind kind() const noexcept { return kind_; }
  std::size_t dim() const noexcept { return p_; }
  const std::vector<double>& beta() const noexcept { return beta_; }
  bool intercept() const noexcept { return intercept_; }
  const std::optional<ForestModel>& effect_forest() const noexcept { return effect_; }
  const std::optional<ForestModel>& cost_forest() const noexcept { return cost_; }
  double gamma_floor() const noexcept { return gamma_floor_; }

  double score(std::span<const double> x, bool* guarded = nullptr) const {
    if (x.size() != p_)
      fail(ErrorCode::DimensionMismatch, "covariate vector has " + std::to_string(x.size()) + " entries, model expects " + std::to_string(p_));
    if (guarded) *guarded = false;
    switch (kind_) {
      case ModelKind::dml_linear: {
        double s = 0.0;
        std::size_t k = 0;
        if (intercept_) s += beta_[k++];
        for (std::size_t j = 0; j < p_; ++j) s += beta_[k++] * x[j];
        return s;
      }
      case ModelKind::iv_forest:
      case ModelKind::ignore_cost: return effect_->predict_ratio(x);
      case ModelKind::direct_ratio: {
        const double tau = effect_->predict_ratio(x);
        const double gamma = cost_->predict_regression(x);
        if (gamma < gamma_floor_) {
          if (guarded) *guarded = true;
          return tau > 0 ? kLarge : (tau < 0 ? -kLarge : 0.0);
        }
        return tau / gamma;
      }
    }
    return 0.0;
  }

  // Row-wise scores of a dataset, parallel over rows.
  ScoreBatch score_all(const Dataset& d, unsigned threads = 0) const {
    if (d.dim() != p_)
      fail(ErrorCode::DimensionMismatch, "dataset has " + std::to_string(d.dim()) + " covariates, model expects " + std::to_string(p_));
    ScoreBatch out{std::vector<double>(d.size()), std::vector<std::uint8_t>(d.size(), 0)};
    parallel_for(d.size(), resolve_threads(static_cast<int>(threads)), [&](std::size_t i) {
      bool g = false;
      const auto row = d.row(i);
      out.scores[i] = score(row, &g);
      out.guarded[i] = g;
    });
    return out;
  }

  // Row-major batch of covariate vectors.
  std::vector<double> score_rows(const std::vector<std::vector<double>>& rows) const {
    std::vector<double> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(score(r));
    return out;
  }

  void serialize(std::ostream& out) const {
    io::Writer wr(out);
    wr.bytes(kMagic, 8);
    wr.u32(kVersionMajor);
    wr.u32(kVersionMinor);
    wr.u32(kVersionPatch);
    wr.u8(static_cast<std::uint8_t>(kind_));
    wr.u64(p_);
    wr.boolean(intercept_);
    wr.f64s(beta_);
    wr.f64(gamma_floor_);
    wr.boolean(effect_.has_value());
    if (effect_) effect_->serialize(out);
    wr.boolean(cost_.has_value());
    if (cost_) cost_->serialize(out);
  }

  static PriorityModel deserialize(std::istream& in) {
    io::Reader rd(in);
    char magic[8];
    rd.bytes(magic, 8);
    if (std::string(magic, 8) != kMagic) fail(ErrorCode::ModelFormat, "not a costcast model file");
    const auto major = rd.u32();
    rd.u32();
    rd.u32();
    if (major != kVersionMajor) fail(ErrorCode::ModelFormat, "unsupported model version " + std::to_string(major));
    PriorityModel m;
    const auto kind = rd.u8();
    if (kind > 3) fail(ErrorCode::ModelFormat, "unknown model kind");
    m.kind_ = static_cast<ModelKind>(kind);
    m.p_ = rd.u64();
    m.intercept_ = rd.boolean();
    m.beta_ = rd.f64s();
    m.gamma_floor_ = rd.f64();
    if (rd.boolean()) m.effect_ = ForestModel::deserialize(in);
    if (rd.boolean()) m.cost_ = ForestModel::deserialize(in);
    const bool ok = m.kind_ == ModelKind::dml_linear ? m.beta_.size() == m.p_ + (m.intercept_ ? 1 : 0)
                                                     : m.effect_.has_value() && m.effect_->dim() == m.p_ &&
                                                           (m.kind_ != ModelKind::direct_ratio || m.cost_.has_value());
    if (!ok) fail(ErrorCode::ModelFormat, "model payload does not match its kind");
    return m;
  }

  static PriorityModel from_dml(const DmlFit& fit, std::size_t p) {
    PriorityModel m;
    m.kind_ = ModelKind::dml_linear;
    m.p_ = p;
    m.intercept_ = fit.intercept;
    m.beta_.assign(fit.beta.data(), fit.beta.data() + fit.beta.size());
    return m;
  }

  static PriorityModel from_forest(ModelKind kind, ForestModel effect) {
    PriorityModel m;
    m.kind_ = kind;
    m.p_ = effect.dim();
    m.effect_ = std::move(effect);
    return m;
  }

  static PriorityModel from_ratio(ForestModel effect, ForestModel cost, double gamma_floor) {
    PriorityModel m = from_forest(ModelKind::direct_ratio, std::move(effect));
    m.cost_ = std::move(cost);
    m.gamma_floor_ = gamma_floor;
    return m;
  }

 private:
  ModelKind kind_ = ModelKind::dml_linear;
  std::size_t p_ = 0;
  bool intercept_ = false;
  std::vector<double> beta_;
  double gamma_floor_ = 0.0;
  std::optional<ForestModel> effect_;
  std::optional<ForestModel> cost_;
};

// Instrumental forest: W is the instrument, C the exposure, Y the response.
inline PriorityModel fit_iv_forest(const Dataset& d, ForestConfig cfg) {
  cfg.mode = ForestMode::instrumental;
  return PriorityModel::from_forest(ModelKind::iv_forest,
                                    fit_forest(d, ForestRoles{Role::outcome, Role::treatment, Role::cost}, cfg));
}

// Causal forest for tau; costs ignored.
inline PriorityModel fit_ignore_cost(const Dataset& d, ForestConfig cfg) {
  cfg.mode = ForestMode::causal;
  return PriorityModel::from_forest(ModelKind::ignore_cost, fit_forest(d, ForestRoles{}, cfg));
}

// tau-hat from a causal forest over a gamma-hat regression forest fit on
// treated rows. Requires zero control costs so that E[C | X, W = 1] is the
// incremental cost.
inline PriorityModel fit_direct_ratio(const Dataset& d, ForestConfig cfg) {
  if (!d.zero_control_cost())
    fail(ErrorCode::ConfigInvalid, "direct_ratio requires the zero_control_cost flag");
  std::vector<std::size_t> treated;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d.w()[i]) treated.push_back(i);
  const auto resolved = cfg.resolved(d.dim());
  if (treated.size() < std::max<std::size_t>(2, resolved.min_node_size))
    fail(ErrorCode::NoTreatedUnits, "direct_ratio needs at least " + std::to_string(resolved.min_node_size) + " treated rows");
  ForestConfig causal = cfg;
  causal.mode = ForestMode::causal;
  auto tau = fit_forest(d, ForestRoles{}, causal);
  ForestConfig reg = cfg;
  reg.mode = ForestMode::regression;
  reg.min_node_size = 0;
  reg.seed = derive_seed(cfg.seed, 0, 0xC0);
  const Dataset treated_rows = d.subset(treated);
  auto gamma = fit_forest(treated_rows, ForestRoles{Role::cost}, reg);
  double mean_gamma = 0.0;
  for (std::size_t i = 0; i < treated_rows.size(); ++i) mean_gamma += gamma.predict_regression(treated_rows.row(i));
  mean_gamma /= static_cast<double>(treated_rows.size());
  return PriorityModel::from_ratio(std::move(tau), std::move(gamma), PriorityModel::kGuardFraction * mean_gamma);
}

inline PriorityModel fit_dml_model(const Dataset& d, int K, const ForestConfig& nuisance_cfg, std::uint64_t seed,
                                   DmlOptions opts = {}) {
  return PriorityModel::from_dml(fit_dml(d, K, nuisance_cfg, seed, opts), d.dim());
}

inline std::vector<double> score(const PriorityModel& m, const Dataset& d, unsigned threads = 0) {
  return m.score_all(d, threads).scores;
}

}  // namespace costcast
