// costcast command-line interface.
//
// Exit codes: 0 success, 2 invalid input or flags, 1 anything else.
// Output files never depend on --threads, so the echoed configs omit it.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "costcast/costcast.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace costcast;

namespace {

struct SchemaFlags {
  std::string treatment = "w", outcome = "y", cost = "c";
  std::string propensity, cluster;
  std::vector<std::string> covariates;
  bool zero_control_cost = false;
  double default_propensity = 0.0;  // 0: unset

  void add(CLI::App* cmd) {
    cmd->add_option("--treatment", treatment, "Treatment column")->capture_default_str();
    cmd->add_option("--outcome", outcome, "Outcome column")->capture_default_str();
    cmd->add_option("--cost", cost, "Cost column")->capture_default_str();
    cmd->add_option("--propensity", propensity, "Propensity column");
    cmd->add_option("--cluster", cluster, "Cluster id column");
    cmd->add_option("--covariates", covariates, "Covariate columns (default: every other column)")->delimiter(',');
    cmd->add_flag("--zero-control-cost", zero_control_cost, "Control units incur no cost");
    cmd->add_option("--default-propensity", default_propensity, "Constant propensity when no column is given");
  }

  CsvSchema schema() const {
    CsvSchema s;
    s.treatment = treatment;
    s.outcome = outcome;
    s.cost = cost;
    if (!propensity.empty()) s.propensity = propensity;
    if (!cluster.empty()) s.cluster = cluster;
    s.covariates = covariates;
    s.zero_control_cost = zero_control_cost;
    if (default_propensity > 0.0) s.default_propensity = default_propensity;
    return s;
  }

  json to_json() const {
    return json{{"treatment", treatment},   {"outcome", outcome},
                {"cost", cost},             {"propensity", propensity},
                {"cluster", cluster},       {"covariates", covariates},
                {"zero_control_cost", zero_control_cost}, {"default_propensity", default_propensity}};
  }
};

// Columns written by `score` that must never be read back as covariates.
const std::vector<std::string> kDerivedColumns{"unit_id", "score", "expected_cost", "guarded"};

// Columns named "propensity" or "cluster" bind to their role unless a flag says otherwise.
CsvSchema with_default_covariates(CsvSchema s, const csv::Table& t, const std::string& score_column = "score") {
  if (!s.propensity && t.column("propensity")) s.propensity = "propensity";
  if (!s.cluster && t.column("cluster")) s.cluster = "cluster";
  if (!s.covariates.empty()) return s;
  for (const auto& h : t.header) {
    if (h == s.treatment || h == s.outcome || h == s.cost || h == score_column) continue;
    if ((s.propensity && h == *s.propensity) || (s.cluster && h == *s.cluster)) continue;
    if (std::find(kDerivedColumns.begin(), kDerivedColumns.end(), h) != kDerivedColumns.end()) continue;
    s.covariates.push_back(h);
  }
  return s;
}

std::vector<double> numeric_column(const csv::Table& t, const std::string& name) {
  const std::size_t j = t.require_column(name);
  std::vector<double> out(t.rows.size());
  for (std::size_t i = 0; i < t.rows.size(); ++i)
    if (!csv::parse_double(t.rows[i][j], out[i]))
      fail(ErrorCode::MalformedInput, "column '" + name + "' is not numeric", i);
  return out;
}

std::ofstream open_out(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  std::error_code ec;
  if (!parent.empty()) fs::create_directories(parent, ec);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot write '" + path + "'");
  return out;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorCode::Io, "cannot create directory '" + dir + "'");
}

fs::path parent_of(const std::string& path) {
  const auto p = fs::path(path).parent_path();
  return p.empty() ? fs::path(".") : p;
}

void echo_config(const fs::path& dir, const std::string& command, const json& cfg) {
  json doc{{"command", command}, {"version", "1.0.0"}, {"config", cfg}};
  auto out = open_out((dir / (command + ".config.json")).string());
  out << doc.dump(2) << '\n';
}

// Forest settings: optional JSON file, then command-line overrides.
struct ForestFlags {
  std::string config_path;
  std::size_t trees = 0;
  int folds = 5;
  bool intercept = false;

  void add(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON file with forest settings");
    cmd->add_option("--trees", trees, "Number of trees (overrides the config file)");
  }

  ForestConfig resolve(std::uint64_t seed, unsigned threads) {
    ForestConfig c;
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) fail(ErrorCode::Io, "cannot read '" + config_path + "'");
      json j;
      try {
        j = json::parse(in);
      } catch (const json::exception& e) {
        fail(ErrorCode::MalformedInput, "config '" + config_path + "': " + e.what());
      }
      if (!j.is_object()) fail(ErrorCode::ConfigInvalid, "config must be a JSON object");
      for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& k = it.key();
        const auto& v = it.value();
        try {
          if (k == "num_trees") c.num_trees = v.get<std::size_t>();
          else if (k == "subsample_fraction") c.subsample_fraction = v.get<double>();
          else if (k == "honesty_fraction") c.honesty_fraction = v.get<double>();
          else if (k == "min_node_size") c.min_node_size = v.get<std::size_t>();
          else if (k == "mtry") c.mtry = v.get<std::size_t>();
          else if (k == "max_depth") c.max_depth = v.is_null() ? std::nullopt : std::optional(v.get<std::size_t>());
          else if (k == "alpha") c.alpha = v.get<double>();
          else if (k == "local_centering") c.local_centering = v.get<bool>();
          else if (k == "centering_trees") c.centering_trees = v.get<std::size_t>();
          else if (k == "folds") folds = v.get<int>();
          else if (k == "intercept") intercept = v.get<bool>();
          else fail(ErrorCode::ConfigInvalid, "unknown config key '" + k + "'");
        } catch (const json::exception&) {
          fail(ErrorCode::ConfigInvalid, "config key '" + k + "' has the wrong type");
        }
      }
    }
    if (trees > 0) c.num_trees = trees;
    c.seed = seed;
    c.threads = threads;
    return c;
  }
};

json forest_json(const ForestConfig& c, int folds, bool intercept) {
  return json{{"num_trees", c.num_trees},
              {"subsample_fraction", c.subsample_fraction},
              {"honesty_fraction", c.honesty_fraction},
              {"min_node_size", c.min_node_size},
              {"mtry", c.mtry},
              {"max_depth", c.max_depth ? json(*c.max_depth) : json(nullptr)},
              {"alpha", c.alpha},
              {"local_centering", c.local_centering},
              {"centering_trees", c.centering_trees},
              {"folds", folds},
              {"intercept", intercept},
              {"seed", c.seed}};
}

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

void write_curve(const std::string& path, const QiniCurve& c) {
  auto out = open_out(path);
  csv::write_row(out, {"threshold", "spend", "reward"});
  for (std::size_t k = 0; k < c.size(); ++k)
    csv::write_row(out, {csv::format_double(c.threshold[k]), csv::format_double(c.spend[k]),
                         csv::format_double(c.reward[k])});
}

// ---------------------------------------------------------------------------

struct Common {
  std::uint64_t seed = 1;
  int threads = 0;
  unsigned resolved_threads() const { return resolve_threads(threads); }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  cmd->add_option("--threads", c.threads, "Worker threads (default: COSTCAST_THREADS or all cores)");
}

struct SimulateCmd {
  Common common;
  std::string design = "predictable", out;
  std::size_t n_train = 1000, n_test = 10000, p = 12;
  double pi = 0.5;
  std::vector<double> beta;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("simulate", "Draw a training and a test set from a synthetic design");
    add_common(cmd, common);
    cmd->add_option("--design", design, "unpredictable | predictable | linear_rho")->capture_default_str();
    cmd->add_option("--n-train", n_train)->capture_default_str();
    cmd->add_option("--n-test", n_test)->capture_default_str();
    cmd->add_option("--p", p, "Number of covariates")->capture_default_str();
    cmd->add_option("--pi", pi, "Treatment probability")->capture_default_str();
    cmd->add_option("--beta", beta, "Ratio coefficients for linear_rho")->delimiter(',');
    cmd->add_option("--out", out, "Output directory")->required();
    cmd->callback([this] { run(); });
  }

  void run() {
    SimConfig cfg;
    cfg.design = parse_design(design);
    cfg.n_train = n_train;
    cfg.n_test = n_test;
    cfg.p = p;
    cfg.pi = pi;
    cfg.seed = common.seed;
    cfg.beta = beta;
    cfg.validate();
    ensure_dir(out);
    const fs::path dir(out);
    const auto train = generate(cfg, derive_seed(cfg.seed, 1, 0x7A1), n_train);
    const auto test = generate(cfg, derive_seed(cfg.seed, 0, 0x7E57), n_test);
    write_dataset((dir / "train.csv").string(), train.data);
    write_dataset((dir / "test.csv").string(), test.data);
    for (const auto& [name, t] : {std::pair{"train_truth.csv", &train}, std::pair{"test_truth.csv", &test}}) {
      auto f = open_out((dir / name).string());
      csv::write_row(f, {"tau", "gamma", "rho"});
      for (std::size_t i = 0; i < t->tau.size(); ++i)
        csv::write_row(f, {csv::format_double(t->tau[i]), csv::format_double(t->gamma[i]), csv::format_double(t->rho[i])});
    }
    echo_config(dir, "simulate",
                json{{"design", to_string(cfg.design)}, {"n_train", n_train}, {"n_test", n_test}, {"p", p},
                     {"pi", pi}, {"beta", cfg.design == Design::linear_rho ? cfg.linear_beta() : beta},
                     {"seed", common.seed}, {"test_hash", dataset_hash(test.data)}});
  }
};

struct FitCmd {
  Common common;
  SchemaFlags schema;
  ForestFlags forest;
  std::string data, model, method = "iv_forest";

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("fit", "Fit a priority model and write it to a model file");
    add_common(cmd, common);
    schema.add(cmd);
    forest.add(cmd);
    cmd->add_option("--data", data, "Training CSV")->required();
    cmd->add_option("--method", method, "iv_forest | direct_ratio | ignore_cost | dml")->capture_default_str();
    cmd->add_option("--folds", forest.folds, "Cross-fitting folds for dml")->capture_default_str();
    cmd->add_flag("--intercept", forest.intercept, "Add an intercept to the dml ratio model");
    cmd->add_option("--model", model, "Output model file")->required();
    cmd->callback([this] { run(); });
  }

  void run() {
    const auto kind = parse_model_kind(method);
    const auto table = csv::read_file(data);
    const auto d = dataset_from_table(table, with_default_covariates(schema.schema(), table));
    const auto cfg = forest.resolve(common.seed, common.resolved_threads());
    PriorityModel m = [&] {
      if (kind == ModelKind::dml_linear) return fit_dml_model(d, forest.folds, cfg, common.seed, DmlOptions{forest.intercept});
      return fit_method(kind, d, cfg, forest.folds, common.seed);
    }();
    {
      auto out = open_out(model);
      m.serialize(out);
    }
    echo_config(parent_of(model), "fit",
                json{{"data", data}, {"model", model}, {"method", to_string(kind)}, {"schema", schema.to_json()},
                     {"forest", forest_json(cfg, forest.folds, forest.intercept)}});
  }
};

struct ScoreCmd {
  Common common;
  std::string model, data, out;
  std::vector<std::string> covariates;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("score", "Score a CSV with a fitted model; input columns are kept");
    add_common(cmd, common);
    cmd->add_option("--model", model, "Model file")->required();
    cmd->add_option("--data", data, "CSV with covariate columns")->required();
    cmd->add_option("--covariates", covariates, "Covariate columns in model order")->delimiter(',');
    cmd->add_option("--out", out, "Scored CSV")->required();
    cmd->callback([this] { run(); });
  }

  void run() {
    std::ifstream in(model, std::ios::binary);
    if (!in) fail(ErrorCode::Io, "cannot read '" + model + "'");
    const auto m = PriorityModel::deserialize(in);
    const auto table = csv::read_file(data);
    std::vector<std::size_t> cols;
    if (!covariates.empty()) {
      for (const auto& c : covariates) cols.push_back(table.require_column(c));
    } else {
      for (std::size_t j = 0; j < table.header.size(); ++j) {
        const auto& h = table.header[j];
        const bool role = h == "w" || h == "y" || h == "c" || h == "propensity" || h == "cluster" ||
                          std::find(kDerivedColumns.begin(), kDerivedColumns.end(), h) != kDerivedColumns.end();
        if (!role) cols.push_back(j);
      }
    }
    if (cols.size() != m.dim())
      fail(ErrorCode::DimensionMismatch,
           "found " + std::to_string(cols.size()) + " covariate columns, model expects " + std::to_string(m.dim()));
    const std::size_t n = table.rows.size();
    std::vector<double> x(n * cols.size());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < cols.size(); ++k)
        if (!csv::parse_double(table.rows[i][cols[k]], x[k * n + i]))
          fail(ErrorCode::MalformedInput, "covariate '" + table.header[cols[k]] + "' is not numeric", i);
    std::vector<double> scores(n), cost(n, 0.0);
    std::vector<std::uint8_t> guarded(n, 0);
    const bool has_cost = m.cost_forest().has_value();
    parallel_for(n, common.resolved_threads(), [&](std::size_t i) {
      std::vector<double> row(cols.size());
      for (std::size_t k = 0; k < cols.size(); ++k) row[k] = x[k * n + i];
      bool g = false;
      scores[i] = m.score(row, &g);
      guarded[i] = g;
      if (has_cost) cost[i] = m.cost_forest()->predict_regression(row);
    });
    const bool has_id = table.column("unit_id").has_value();
    auto f = open_out(out);
    std::vector<std::string> header;
    if (!has_id) header.push_back("unit_id");
    for (const auto& h : table.header)
      if (h != "score" && h != "expected_cost" && h != "guarded") header.push_back(h);
    header.push_back("score");
    if (has_cost) header.push_back("expected_cost");
    header.push_back("guarded");
    csv::write_row(f, header);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::string> cells;
      if (!has_id) cells.push_back(std::to_string(i));
      for (std::size_t j = 0; j < table.header.size(); ++j) {
        const auto& h = table.header[j];
        if (h != "score" && h != "expected_cost" && h != "guarded") cells.push_back(table.rows[i][j]);
      }
      cells.push_back(csv::format_double(scores[i]));
      if (has_cost) cells.push_back(csv::format_double(cost[i]));
      cells.push_back(std::to_string(guarded[i]));
      csv::write_row(f, cells);
    }
    echo_config(parent_of(out), "score",
                json{{"model", model}, {"data", data}, {"out", out}, {"covariates", covariates},
                     {"method", to_string(m.kind())}});
  }
};

// Shared by qini and lift: a scored CSV read as a holdout set.
struct EvalInput {
  SchemaFlags schema;
  ForestFlags forest;
  std::string data, score_column = "score", mode = "ipw";

  void add(CLI::App* cmd) {
    schema.add(cmd);
    forest.add(cmd);
    cmd->add_option("--data", data, "Scored test CSV")->required();
    cmd->add_option("--score-column", score_column)->capture_default_str();
    cmd->add_option("--mode", mode, "ipw | aipw")->capture_default_str();
    cmd->add_option("--folds", forest.folds, "Cross-fitting folds for aipw nuisances")->capture_default_str();
  }

  QiniCurve curve(const Common& common) {
    const auto table = csv::read_file(data);
    const auto scores = numeric_column(table, score_column);
    const HoldoutSet test(dataset_from_table(table, with_default_covariates(schema.schema(), table, score_column)));
    if (mode == "ipw") return qini_curve(test, scores, EvalMode::ipw);
    if (mode != "aipw") fail(ErrorCode::ConfigInvalid, "mode must be ipw or aipw");
    const auto cfg = forest.resolve(common.seed, common.resolved_threads());
    const auto nu = fit_arm_nuisances(test, forest.folds, cfg, common.seed);
    return qini_curve(test, scores, EvalMode::aipw, &nu);
  }

  json to_json(const Common& common) {
    json j{{"data", data}, {"score_column", score_column}, {"mode", mode}, {"schema", schema.to_json()}};
    if (mode == "aipw") j["forest"] = forest_json(forest.resolve(common.seed, 1), forest.folds, false);
    return j;
  }
};

struct QiniCmd {
  Common common;
  EvalInput input;
  std::string out, normalized_out;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("qini", "Estimate the cost-aware QINI curve of a scored test set");
    add_common(cmd, common);
    input.add(cmd);
    cmd->add_option("--out", out, "Curve CSV (threshold, spend, reward)")->required();
    cmd->add_option("--normalized-out", normalized_out, "Unit-free curve CSV");
    cmd->callback([this] { run(); });
  }

  void run() {
    const auto c = input.curve(common);
    write_curve(out, c);
    if (!normalized_out.empty()) write_curve(normalized_out, c.normalized());
    auto cfg = input.to_json(common);
    cfg["out"] = out;
    cfg["normalized_out"] = normalized_out;
    cfg["seed"] = common.seed;
    echo_config(parent_of(out), "qini", cfg);
  }
};

struct LiftCmd {
  Common common;
  EvalInput input;
  std::string out;
  double budget = 0.0, alpha = 0.05;
  std::size_t reps = 1000;
  bool cluster = false, no_bootstrap = false;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("lift", "Lift over random targeting at a per-capita budget, with confidence interval");
    add_common(cmd, common);
    input.add(cmd);
    cmd->add_option("--budget", budget, "Per-capita budget b, 0 < b <= total spend")->required();
    cmd->add_option("--alpha", alpha)->capture_default_str();
    cmd->add_option("--reps", reps, "Half-sample bootstrap replicates")->capture_default_str();
    cmd->add_flag("--cluster-bootstrap", cluster, "Resample whole clusters (needs --cluster)");
    cmd->add_flag("--no-bootstrap", no_bootstrap, "Use the influence-function interval only");
    cmd->add_option("--out", out, "Output JSON (default: stdout)");
    cmd->callback([this] { run(); });
  }

  void run() {
    const auto c = input.curve(common);
    LiftOptions lo;
    lo.alpha = alpha;
    lo.reps = reps;
    lo.seed = common.seed;
    lo.cluster = cluster;
    lo.bootstrap = !no_bootstrap;
    lo.threads = common.resolved_threads();
    const auto e = lift_at_budget(c, budget, lo);
    json j{{"b", e.b},
           {"q_hat", num(e.q_hat)},
           {"delta_hat", num(e.delta_hat)},
           {"se", num(e.se())},
           {"ci_lo", num(e.ci_lo)},
           {"ci_hi", num(e.ci_hi)},
           {"se_if", num(e.se_if)},
           {"wald_lo", num(e.wald_lo)},
           {"wald_hi", num(e.wald_hi)},
           {"s_hat", num(e.s_hat)},
           {"total_spend", num(c.total_spend)},
           {"total_reward", num(c.total_reward)}};
    if (e.bootstrap) j["bootstrap_valid_reps"] = e.bootstrap->valid_reps;
    if (out.empty()) {
      std::cout << j.dump(2) << '\n';
      return;
    }
    auto f = open_out(out);
    f << j.dump(2) << '\n';
    auto cfg = input.to_json(common);
    cfg["budget"] = budget;
    cfg["alpha"] = alpha;
    cfg["reps"] = reps;
    cfg["cluster_bootstrap"] = cluster;
    cfg["bootstrap"] = !no_bootstrap;
    cfg["seed"] = common.seed;
    cfg["out"] = out;
    echo_config(parent_of(out), "lift", cfg);
  }
};

struct PolicyCmd {
  std::string data, out, score_column = "score", cost_column = "expected_cost";
  double budget = 0.0;
  int threads = 0;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("policy", "Optimal treatment probabilities under a per-capita budget");
    cmd->add_option("--data", data, "CSV with unit_id, score and expected_cost")->required();
    cmd->add_option("--score-column", score_column)->capture_default_str();
    cmd->add_option("--cost-column", cost_column)->capture_default_str();
    cmd->add_option("--budget", budget, "Per-capita budget")->required();
    cmd->add_option("--out", out, "Output CSV (unit_id, probability)")->required();
    cmd->add_option("--threads", threads, "Accepted for a uniform interface; the solve is serial");
    cmd->callback([this] { run(); });
  }

  void run() {
    const auto table = csv::read_file(data);
    const auto scores = numeric_column(table, score_column);
    const auto costs = numeric_column(table, cost_column);
    const std::size_t idj = table.require_column("unit_id");
    std::vector<ScoredUnit> units(scores.size());
    for (std::size_t i = 0; i < units.size(); ++i) {
      units[i].priority = scores[i];
      units[i].expected_cost = costs[i];
      try {
        std::size_t used = 0;
        units[i].unit_id = std::stoll(table.rows[i][idj], &used);
        if (used != table.rows[i][idj].size()) throw std::invalid_argument("trailing");
      } catch (const std::logic_error&) {
        fail(ErrorCode::MalformedInput, "unit_id is not an integer", i);
      }
    }
    const auto pol = solve_policy(units, budget);
    auto f = open_out(out);
    csv::write_row(f, {"unit_id", "probability"});
    for (std::size_t i = 0; i < units.size(); ++i)
      csv::write_row(f, {std::to_string(units[i].unit_id), csv::format_double(pol.per_unit_prob[i])});
    echo_config(parent_of(out), "policy",
                json{{"data", data}, {"score_column", score_column}, {"cost_column", cost_column},
                     {"budget", budget}, {"out", out}, {"rho_b", pol.rho_b}, {"a_b", pol.a_b}});
  }
};

struct StudyCmd {
  Common common;
  ForestFlags forest;
  std::string design = "predictable", out, budget_scale = "raw";
  std::size_t n_train = 1000, n_test = 10000, p = 12, replicates = 100, grid = 201;
  double pi = 0.5;
  std::vector<double> budgets{0.5};
  std::vector<std::string> methods{"ignore_cost", "direct_ratio", "iv_forest"};
  bool quiet = false;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("study", "Replicated simulation study with averaged oracle curves");
    add_common(cmd, common);
    forest.add(cmd);
    cmd->add_option("--design", design)->capture_default_str();
    cmd->add_option("--n-train", n_train)->capture_default_str();
    cmd->add_option("--n-test", n_test)->capture_default_str();
    cmd->add_option("--p", p)->capture_default_str();
    cmd->add_option("--pi", pi)->capture_default_str();
    cmd->add_option("--replicates", replicates)->capture_default_str();
    cmd->add_option("--methods", methods)->delimiter(',')->capture_default_str();
    cmd->add_option("--budget", budgets, "Budgets at which to report value")->delimiter(',')->capture_default_str();
    cmd->add_option("--budget-scale", budget_scale, "raw | normalized")->capture_default_str();
    cmd->add_option("--grid-points", grid)->capture_default_str();
    cmd->add_flag("--quiet", quiet, "No progress on stderr");
    cmd->add_option("--out", out, "Output directory")->required();
    cmd->callback([this] { run(); });
  }

  void run() {
    if (budget_scale != "raw" && budget_scale != "normalized")
      fail(ErrorCode::ConfigInvalid, "budget-scale must be raw or normalized");
    StudyConfig sc;
    sc.sim.design = parse_design(design);
    sc.sim.n_train = n_train;
    sc.sim.n_test = n_test;
    sc.sim.p = p;
    sc.sim.pi = pi;
    sc.sim.replicates = replicates;
    sc.sim.seed = common.seed;
    sc.methods.clear();
    for (const auto& m : methods) sc.methods.push_back(parse_model_kind(m));
    sc.forest = forest.resolve(common.seed, common.resolved_threads());
    sc.dml_folds = forest.folds;
    sc.budgets = budgets;
    sc.grid_points = grid;
    ensure_dir(out);
    const fs::path dir(out);
    // Persist the shared test set; the study verifies its hash on every replicate.
    write_dataset((dir / "test_set.csv").string(), generate(sc.sim, derive_seed(sc.sim.seed, 0, 0x7E57), n_test).data);
    const auto rep = run_study(sc, [&](std::size_t r, ModelKind k) {
      if (!quiet) std::cerr << "replicate " << r + 1 << "/" << replicates << " " << to_string(k) << '\n';
    });
    const bool normalized = budget_scale == "normalized";
    std::ostringstream hash;
    hash << std::hex << std::setw(16) << std::setfill('0') << rep.test_hash;
    json report{{"design", to_string(sc.sim.design)},
                {"replicates", replicates},
                {"budget_scale", budget_scale},
                {"test_hash", hash.str()},
                {"total_spend", rep.total_spend},
                {"total_reward", rep.total_reward},
                {"methods", json::array()}};
    auto rows = open_out((dir / "replicates.csv").string());
    csv::write_row(rows, {"replicate", "method", "train_seed", "budget", "value_raw", "value_normalized"});
    for (const auto& m : rep.methods) {
      json mj{{"method", to_string(m.kind)}, {"values", json::array()}};
      for (std::size_t b = 0; b < budgets.size(); ++b)
        mj["values"].push_back(json{{"budget", budgets[b]},
                                    {"value", normalized ? m.value_normalized[b] : m.value_raw[b]},
                                    {"value_raw", m.value_raw[b]},
                                    {"value_normalized", m.value_normalized[b]}});
      report["methods"].push_back(mj);
      const auto name = to_string(m.kind);
      for (const auto& [suffix, c] : {std::pair{"", &m.averaged}, std::pair{"_normalized", &m.averaged_normalized}}) {
        auto f = open_out((dir / ("curve_" + name + suffix + ".csv")).string());
        csv::write_row(f, {"spend", "reward"});
        for (std::size_t k = 0; k < c->size(); ++k)
          csv::write_row(f, {csv::format_double(c->spend[k]), csv::format_double(c->reward[k])});
      }
      for (std::size_t r = 0; r < m.replicates.size(); ++r)
        for (std::size_t b = 0; b < budgets.size(); ++b)
          csv::write_row(rows, {std::to_string(r), name, std::to_string(m.replicates[r].train_seed),
                                csv::format_double(budgets[b]), csv::format_double(m.replicates[r].value_raw[b]),
                                csv::format_double(m.replicates[r].value_normalized[b])});
    }
    auto f = open_out((dir / "report.json").string());
    f << report.dump(2) << '\n';
    echo_config(dir, "study",
                json{{"design", design}, {"n_train", n_train}, {"n_test", n_test}, {"p", p}, {"pi", pi},
                     {"replicates", replicates}, {"methods", methods}, {"budgets", budgets},
                     {"budget_scale", budget_scale}, {"grid_points", grid},
                     {"forest", forest_json(sc.forest, forest.folds, false)}});
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"costcast: cost-aware treatment targeting"};
  app.require_subcommand(1);
  SimulateCmd simulate;
  FitCmd fit;
  ScoreCmd score_cmd;
  QiniCmd qini;
  LiftCmd lift;
  PolicyCmd policy;
  StudyCmd study;
  simulate.add(app);
  fit.add(app);
  score_cmd.add(app);
  qini.add(app);
  lift.add(app);
  policy.add(app);
  study.add(app);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const costcast::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
