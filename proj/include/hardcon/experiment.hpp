#pragma once

// Config-driven experiments: strict key = value configs, metrics.csv traces,
// resolved configs, JSON summaries and paired trace comparison.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hardcon/autodiff.hpp"
#include "hardcon/benchmarks.hpp"
#include "hardcon/krylov.hpp"
#include "hardcon/trainers.hpp"

namespace hardcon {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerical = 3;

inline constexpr const char* kOutRootEnv = "HARDCON_OUT_ROOT";

/// line is 0 when the error is not tied to a config line.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(int line, std::string field, const std::string& msg)
      : std::runtime_error(format(line, field, msg)), line_(line), field_(std::move(field)) {}
  int line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

 private:
  static std::string format(int line, const std::string& field, const std::string& msg) {
    std::string s;
    if (line > 0) s += "line " + std::to_string(line) + ": ";
    if (!field.empty()) s += field + ": ";
    return s + msg;
  }
  int line_;
  std::string field_;
};

// ---------------------------------------------------------------------------
// Number formatting and parsing. Shortest round-trip text keeps CSV output
// byte-stable across runs.

inline std::string format_double(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline double parse_double(const std::string& s) {
  double x = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), x);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(x))
    throw std::invalid_argument("expected a finite number, got '" + s + "'");
  return x;
}

inline std::uint64_t parse_u64(const std::string& s) {
  std::uint64_t x = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), x);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || s.empty())
    throw std::invalid_argument("expected a non-negative integer, got '" + s + "'");
  return x;
}

inline std::size_t parse_size(const std::string& s) { return static_cast<std::size_t>(parse_u64(s)); }

inline bool parse_bool(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw std::invalid_argument("expected true or false, got '" + s + "'");
}

inline std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_size(trim(item)));
  if (out.empty()) throw std::invalid_argument("expected a comma-separated list of integers");
  return out;
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline double positive(double x) {
  if (!(x > 0.0)) throw std::invalid_argument("must be positive");
  return x;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Config.

enum class ExperimentKind { spheres, toy_pose, solve_check };

inline const char* to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::spheres: return "spheres";
    case ExperimentKind::toy_pose: return "toy_pose";
    case ExperimentKind::solve_check: return "solve_check";
  }
  return "unknown";
}

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::spheres;
  /// A Method name, or "paired" (spheres only: hard_sgd and soft_sgd on shared streams).
  std::string method = "paired";
  TrainConfig train;
  std::optional<std::string> out_dir;

  // spheres
  std::size_t dim = 10000;
  std::size_t n_constraints = 200;
  double radius = 10.0;
  /// Soft learning rate of a paired run; empty means a grid search on heldout_seed.
  std::optional<double> soft_lr;
  std::optional<std::uint64_t> heldout_seed;

  // toy_pose
  ToyPoseSettings toy;
  /// Epochs of unconstrained soft_adam run before the configured method.
  std::size_t pretrain_epochs = 0;
  /// "random" or a checkpoint path.
  std::string init = "random";

  // solve_check
  double cond = 1e4;
  std::optional<std::size_t> rank;
  bool consistent = true;

  static ExperimentConfig defaults(ExperimentKind kind) {
    ExperimentConfig c;
    c.kind = kind;
    switch (kind) {
      case ExperimentKind::spheres:
        c.method = "paired";
        c.train.method = Method::hard_sgd;
        c.train.lr = 1.0;
        c.train.lambda = 100.0;
        c.train.epochs = 500;
        c.train.constraint_batch = 20;
        break;
      case ExperimentKind::toy_pose:
        c.method = "soft_adam";
        c.train.method = Method::soft_adam;
        c.train.lr = 1e-3;
        c.train.lambda = 1.0;
        c.train.epochs = 10;
        break;
      case ExperimentKind::solve_check:
        c.method = "minres_qlp";
        c.dim = 100;
        c.train.solver.reorthogonalize = true;
        break;
    }
    return c;
  }

  std::uint64_t resolved_heldout_seed() const { return heldout_seed.value_or(train.seed + 1000); }
  bool paired() const { return kind == ExperimentKind::spheres && method == "paired"; }
};

namespace detail {

using Setter = std::function<void(ExperimentConfig&, const std::string&)>;

struct KeySpec {
  std::vector<ExperimentKind> kinds;
  Setter set;
};

inline const std::map<std::string, KeySpec>& config_schema() {
  using K = ExperimentKind;
  const std::vector<K> all{K::spheres, K::toy_pose, K::solve_check};
  const std::vector<K> train{K::spheres, K::toy_pose};
  static const std::map<std::string, KeySpec> schema{
      {"out_dir", {all, [](ExperimentConfig& c, const std::string& v) { c.out_dir = v; }}},
      {"seed", {all, [](ExperimentConfig& c, const std::string& v) { c.train.seed = parse_u64(v); }}},
      {"method",
       {all,
        [](ExperimentConfig& c, const std::string& v) {
          if (c.kind == K::solve_check) {
            if (v != "minres_qlp" && v != "minres") throw std::invalid_argument("expected minres_qlp or minres");
            c.method = v;
            return;
          }
          if (c.kind == K::spheres && v == "paired") {
            c.method = v;
            c.train.method = Method::hard_sgd;
            return;
          }
          const auto m = parse_method(v);
          if (!m) throw std::invalid_argument("unknown method '" + v + "'");
          c.method = v;
          c.train.method = *m;
        }}},
      {"lr", {train, [](ExperimentConfig& c, const std::string& v) { c.train.lr = positive(parse_double(v)); }}},
      {"lambda",
       {train,
        [](ExperimentConfig& c, const std::string& v) {
          c.train.lambda = parse_double(v);
          if (c.train.lambda < 0.0) throw std::invalid_argument("must be >= 0");
        }}},
      {"iterations",
       {{K::spheres}, [](ExperimentConfig& c, const std::string& v) { c.train.epochs = parse_size(v); }}},
      {"epochs", {{K::toy_pose}, [](ExperimentConfig& c, const std::string& v) { c.train.epochs = parse_size(v); }}},
      {"n_active",
       {{K::spheres}, [](ExperimentConfig& c, const std::string& v) { c.train.constraint_batch = parse_size(v); }}},
      {"data_batch",
       {{K::toy_pose}, [](ExperimentConfig& c, const std::string& v) { c.train.data_batch = parse_size(v); }}},
      {"constraint_batch",
       {{K::toy_pose}, [](ExperimentConfig& c, const std::string& v) { c.train.constraint_batch = parse_size(v); }}},
      {"mining", {train, [](ExperimentConfig& c, const std::string& v) { c.train.mining = parse_bool(v); }}},
      {"mined_batch",
       {train, [](ExperimentConfig& c, const std::string& v) { c.train.mined_batch = parse_size(v); }}},
      {"keep_best",
       {{K::toy_pose}, [](ExperimentConfig& c, const std::string& v) { c.train.keep_best = parse_bool(v); }}},
      {"solver.rtol",
       {all, [](ExperimentConfig& c, const std::string& v) { c.train.solver.rtol = positive(parse_double(v)); }}},
      {"solver.max_iters",
       {all, [](ExperimentConfig& c, const std::string& v) { c.train.solver.max_iters = parse_size(v); }}},
      {"solver.breakdown_tol",
       {all,
        [](ExperimentConfig& c, const std::string& v) { c.train.solver.breakdown_tol = positive(parse_double(v)); }}},
      {"solver.reorthogonalize",
       {all, [](ExperimentConfig& c, const std::string& v) { c.train.solver.reorthogonalize = parse_bool(v); }}},
      {"adam.beta1",
       {train, [](ExperimentConfig& c, const std::string& v) { c.train.adam_defaults.beta1 = parse_double(v); }}},
      {"adam.beta2",
       {train, [](ExperimentConfig& c, const std::string& v) { c.train.adam_defaults.beta2 = parse_double(v); }}},
      {"adam.eps",
       {train,
        [](ExperimentConfig& c, const std::string& v) { c.train.adam_defaults.eps = positive(parse_double(v)); }}},
      {"dim",
       {{K::spheres, K::solve_check},
        [](ExperimentConfig& c, const std::string& v) { c.dim = parse_size(v); }}},
      {"n_constraints",
       {{K::spheres}, [](ExperimentConfig& c, const std::string& v) { c.n_constraints = parse_size(v); }}},
      {"radius",
       {{K::spheres}, [](ExperimentConfig& c, const std::string& v) { c.radius = positive(parse_double(v)); }}},
      {"soft_lr",
       {{K::spheres},
        [](ExperimentConfig& c, const std::string& v) {
          if (v == "tune")
            c.soft_lr.reset();
          else
            c.soft_lr = positive(parse_double(v));
        }}},
      {"heldout_seed",
       {{K::spheres}, [](ExperimentConfig& c, const std::string& v) { c.heldout_seed = parse_u64(v); }}},
      {"n_samples",
       {{K::toy_pose}, [](ExperimentConfig& c, const std::string& v) { c.toy.n_samples = parse_size(v); }}},
      {"train_fraction",
       {{K::toy_pose}, [](ExperimentConfig& c, const std::string& v) { c.toy.train_fraction = parse_double(v); }}},
      {"hidden",
       {{K::toy_pose}, [](ExperimentConfig& c, const std::string& v) { c.toy.hidden = parse_sizes(v); }}},
      {"asymmetry_bias",
       {{K::toy_pose}, [](ExperimentConfig& c, const std::string& v) { c.toy.asymmetry_bias = parse_double(v); }}},
      {"asymmetry_std",
       {{K::toy_pose},
        [](ExperimentConfig& c, const std::string& v) {
          c.toy.asymmetry_std = parse_double(v);
          if (c.toy.asymmetry_std < 0.0) throw std::invalid_argument("must be >= 0");
        }}},
      {"input_noise",
       {{K::toy_pose},
        [](ExperimentConfig& c, const std::string& v) {
          c.toy.input_noise = parse_double(v);
          if (c.toy.input_noise < 0.0) throw std::invalid_argument("must be >= 0");
        }}},
      {"pretrain_epochs",
       {{K::toy_pose}, [](ExperimentConfig& c, const std::string& v) { c.pretrain_epochs = parse_size(v); }}},
      {"init", {{K::toy_pose}, [](ExperimentConfig& c, const std::string& v) { c.init = v; }}},
      {"cond",
       {{K::solve_check},
        [](ExperimentConfig& c, const std::string& v) {
          c.cond = parse_double(v);
          if (!(c.cond >= 1.0)) throw std::invalid_argument("must be >= 1");
        }}},
      {"rank", {{K::solve_check}, [](ExperimentConfig& c, const std::string& v) { c.rank = parse_size(v); }}},
      {"consistent",
       {{K::solve_check}, [](ExperimentConfig& c, const std::string& v) { c.consistent = parse_bool(v); }}},
  };
  return schema;
}

inline ExperimentKind parse_kind(const std::string& v) {
  if (v == "spheres") return ExperimentKind::spheres;
  if (v == "toy_pose") return ExperimentKind::toy_pose;
  if (v == "solve_check") return ExperimentKind::solve_check;
  throw std::invalid_argument("expected spheres, toy_pose or solve_check, got '" + v + "'");
}

}  // namespace detail

/// Parses "key = value" lines; '#' starts a comment. The experiment key is
/// required and selects which other keys are legal. Unknown, inapplicable,
/// duplicate or malformed keys raise ConfigError with the line number.
inline ExperimentConfig parse_config(const std::string& text) {
  struct Entry {
    std::string value;
    int line;
  };
  std::vector<std::pair<std::string, Entry>> entries;
  std::map<std::string, int> seen;
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string line = detail::trim(std::string_view(raw).substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(lineno, "", "expected 'key = value'");
    const std::string key = detail::trim(std::string_view(line).substr(0, eq));
    const std::string value = detail::trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) throw ConfigError(lineno, "", "missing key");
    if (value.empty()) throw ConfigError(lineno, key, "missing value");
    if (auto it = seen.find(key); it != seen.end())
      throw ConfigError(lineno, key, "duplicate key (first set on line " + std::to_string(it->second) + ")");
    seen[key] = lineno;
    entries.push_back({key, {value, lineno}});
  }

  auto kind_it = seen.find("experiment");
  if (kind_it == seen.end()) throw ConfigError(0, "experiment", "required key is missing");
  ExperimentKind kind{};
  for (const auto& [k, e] : entries)
    if (k == "experiment") {
      try {
        kind = detail::parse_kind(e.value);
      } catch (const std::invalid_argument& err) {
        throw ConfigError(e.line, k, err.what());
      }
    }

  ExperimentConfig cfg = ExperimentConfig::defaults(kind);
  const auto& schema = detail::config_schema();
  for (const auto& [k, e] : entries) {
    if (k == "experiment") continue;
    const auto it = schema.find(k);
    if (it == schema.end()) throw ConfigError(e.line, k, "unknown key");
    const auto& kinds = it->second.kinds;
    if (std::find(kinds.begin(), kinds.end(), kind) == kinds.end())
      throw ConfigError(e.line, k, std::string("not valid for experiment ") + to_string(kind));
    try {
      it->second.set(cfg, e.value);
    } catch (const std::invalid_argument& err) {
      throw ConfigError(e.line, k, err.what());
    }
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError(0, "", "cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

/// The complete set of keys that apply to cfg.kind, one per line, in a form
/// parse_config accepts.
inline std::string resolved_config_text(const ExperimentConfig& c) {
  std::ostringstream os;
  auto kv = [&](const std::string& k, const std::string& v) { os << k << " = " << v << '\n'; };
  auto b = [](bool x) { return std::string(x ? "true" : "false"); };
  kv("experiment", to_string(c.kind));
  kv("method", c.method);
  kv("seed", std::to_string(c.train.seed));
  if (c.out_dir) kv("out_dir", *c.out_dir);
  const SolverConfig& s = c.train.solver;
  const auto solver = [&] {
    kv("solver.rtol", format_double(s.rtol));
    kv("solver.max_iters", std::to_string(s.max_iters));
    kv("solver.breakdown_tol", format_double(s.breakdown_tol));
    kv("solver.reorthogonalize", b(s.reorthogonalize));
  };
  const auto adam = [&] {
    kv("adam.beta1", format_double(c.train.adam_defaults.beta1));
    kv("adam.beta2", format_double(c.train.adam_defaults.beta2));
    kv("adam.eps", format_double(c.train.adam_defaults.eps));
  };
  switch (c.kind) {
    case ExperimentKind::spheres:
      kv("dim", std::to_string(c.dim));
      kv("n_constraints", std::to_string(c.n_constraints));
      kv("radius", format_double(c.radius));
      kv("iterations", std::to_string(c.train.epochs));
      kv("n_active", std::to_string(c.train.constraint_batch));
      kv("lr", format_double(c.train.lr));
      kv("lambda", format_double(c.train.lambda));
      kv("soft_lr", c.soft_lr ? format_double(*c.soft_lr) : "tune");
      kv("heldout_seed", std::to_string(c.resolved_heldout_seed()));
      kv("mining", b(c.train.mining));
      kv("mined_batch", std::to_string(c.train.mined_batch));
      solver();
      adam();
      break;
    case ExperimentKind::toy_pose:
      kv("n_samples", std::to_string(c.toy.n_samples));
      kv("train_fraction", format_double(c.toy.train_fraction));
      kv("hidden", detail::join_sizes(c.toy.hidden));
      kv("asymmetry_bias", format_double(c.toy.asymmetry_bias));
      kv("asymmetry_std", format_double(c.toy.asymmetry_std));
      kv("input_noise", format_double(c.toy.input_noise));
      kv("init", c.init);
      kv("pretrain_epochs", std::to_string(c.pretrain_epochs));
      kv("epochs", std::to_string(c.train.epochs));
      kv("lr", format_double(c.train.lr));
      kv("lambda", format_double(c.train.lambda));
      kv("data_batch", std::to_string(c.train.data_batch));
      kv("constraint_batch", std::to_string(c.train.constraint_batch));
      kv("mining", b(c.train.mining));
      kv("mined_batch", std::to_string(c.train.mined_batch));
      kv("keep_best", b(c.train.keep_best));
      solver();
      adam();
      break;
    case ExperimentKind::solve_check:
      kv("dim", std::to_string(c.dim));
      kv("cond", format_double(c.cond));
      kv("rank", std::to_string(c.rank.value_or(c.dim)));
      kv("consistent", b(c.consistent));
      solver();
      break;
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// metrics.csv

inline constexpr const char* kMetricsHeader =
    "iter,risk,pred_error,median_violation,active_delta,solver_iters,solver_status,step_norm";

inline std::string metrics_csv_row(const TrainRow& r) {
  return std::to_string(r.iter) + ',' + format_double(r.metrics.risk) + ',' + format_double(r.metrics.pred_error) +
         ',' + format_double(r.metrics.median_violation) + ',' + format_double(r.active_delta) + ',' +
         std::to_string(r.solver_iters) + ',' + r.solver_status + ',' + format_double(r.step_norm);
}

/// Rows as read back from metrics.csv.
struct MetricsTrace {
  std::vector<TrainRow> rows;
};

inline MetricsTrace read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  if (!std::getline(is, line) || detail::trim(line) != kMetricsHeader)
    throw std::runtime_error(path.string() + ": missing or unexpected header");
  MetricsTrace t;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(detail::trim(cell));
    if (cells.size() != 8)
      throw std::runtime_error(path.string() + ": line " + std::to_string(lineno) + ": expected 8 columns");
    try {
      TrainRow r;
      r.iter = detail::parse_size(cells[0]);
      r.metrics.risk = detail::parse_double(cells[1]);
      r.metrics.pred_error = detail::parse_double(cells[2]);
      r.metrics.median_violation = detail::parse_double(cells[3]);
      r.active_delta = detail::parse_double(cells[4]);
      r.solver_iters = detail::parse_size(cells[5]);
      r.solver_status = cells[6];
      r.step_norm = detail::parse_double(cells[7]);
      t.rows.push_back(std::move(r));
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error(path.string() + ": line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Paired comparison.

struct TraceStats {
  std::size_t iterations = 0;
  double final_violation = 0.0;
  /// Sample std of consecutive median-violation differences inside the window.
  double delta_std = 0.0;
  /// Fraction of iterations with active_delta > 0.
  double degradation_fraction = 0.0;
};

struct Comparison {
  TraceStats a;
  TraceStats b;
  std::size_t window_start = 0;
  double violation_difference = 0.0;  // a - b
  double violation_ratio = 1.0;       // a / b
  double smoothness_ratio = 1.0;      // delta_std a / b; below 1 means a is smoother
  double degradation_ratio = 1.0;
  std::string smoother = "tie";
};

namespace detail {

// x / y with 0 / 0 = 1.
inline double safe_ratio(double x, double y) {
  if (x == y) return 1.0;
  if (y == 0.0) return std::numeric_limits<double>::infinity();
  return x / y;
}

inline TraceStats trace_stats(const std::vector<TrainRow>& rows, std::size_t window_start) {
  TraceStats s;
  if (rows.empty()) throw std::invalid_argument("compare: empty trace");
  s.final_violation = rows.back().metrics.median_violation;
  std::size_t n_iter = 0, degraded = 0;
  std::vector<double> deltas;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].iter == 0) continue;
    ++n_iter;
    if (rows[i].active_delta > 0.0) ++degraded;
    if (i > 0 && rows[i].iter >= window_start)
      deltas.push_back(rows[i].metrics.median_violation - rows[i - 1].metrics.median_violation);
  }
  s.iterations = n_iter;
  s.degradation_fraction = n_iter ? static_cast<double>(degraded) / static_cast<double>(n_iter) : 0.0;
  if (deltas.size() >= 2) {
    double mean = 0.0;
    for (double d : deltas) mean += d;
    mean /= static_cast<double>(deltas.size());
    double ss = 0.0;
    for (double d : deltas) ss += (d - mean) * (d - mean);
    s.delta_std = std::sqrt(ss / static_cast<double>(deltas.size() - 1));
  }
  return s;
}

}  // namespace detail

/// The smoothness window starts at iteration max(1, n / 5), which is 100 for a
/// 500-iteration trace.
inline Comparison compare_traces(const std::vector<TrainRow>& a, const std::vector<TrainRow>& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("compare: traces differ in length (" + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + " rows)");
  if (a.empty()) throw std::invalid_argument("compare: empty traces");
  Comparison c;
  const std::size_t n_iter = a.back().iter;
  c.window_start = std::max<std::size_t>(1, n_iter / 5);
  c.a = detail::trace_stats(a, c.window_start);
  c.b = detail::trace_stats(b, c.window_start);
  c.violation_difference = c.a.final_violation - c.b.final_violation;
  c.violation_ratio = detail::safe_ratio(c.a.final_violation, c.b.final_violation);
  c.smoothness_ratio = detail::safe_ratio(c.a.delta_std, c.b.delta_std);
  c.degradation_ratio = detail::safe_ratio(c.a.degradation_fraction, c.b.degradation_fraction);
  if (c.a.delta_std < c.b.delta_std)
    c.smoother = "a";
  else if (c.b.delta_std < c.a.delta_std)
    c.smoother = "b";
  return c;
}

inline nlohmann::ordered_json to_json(const TraceStats& s) {
  nlohmann::ordered_json j;
  j["iterations"] = s.iterations;
  j["final_median_violation"] = s.final_violation;
  j["delta_std"] = s.delta_std;
  j["degradation_fraction"] = s.degradation_fraction;
  return j;
}

inline nlohmann::ordered_json to_json(const Comparison& c) {
  nlohmann::ordered_json j;
  j["a"] = to_json(c.a);
  j["b"] = to_json(c.b);
  j["window_start"] = c.window_start;
  j["violation_difference"] = c.violation_difference;
  j["violation_ratio"] = c.violation_ratio;
  j["smoothness_ratio"] = c.smoothness_ratio;
  j["degradation_ratio"] = c.degradation_ratio;
  j["smoother"] = c.smoother;
  return j;
}

inline nlohmann::ordered_json to_json(const Metrics& m) {
  nlohmann::ordered_json j;
  j["risk"] = m.risk;
  j["pred_error"] = m.pred_error;
  j["median_violation"] = m.median_violation;
  return j;
}

// ---------------------------------------------------------------------------
// Running.

/// Override order: flag, then the config's out_dir, then $HARDCON_OUT_ROOT/<stem>,
/// then runs/<stem>.
inline std::filesystem::path resolve_out_dir(const ExperimentConfig& cfg, const std::filesystem::path& config_path,
                                             const std::optional<std::string>& flag) {
  if (flag) return *flag;
  if (cfg.out_dir) return *cfg.out_dir;
  const char* root = std::getenv(kOutRootEnv);
  const std::filesystem::path base = (root && *root) ? std::filesystem::path(root) : std::filesystem::path("runs");
  return base / config_path.stem();
}

namespace detail {

class CsvSink {
 public:
  explicit CsvSink(const std::filesystem::path& path) : os_(path, std::ios::binary) {
    if (!os_) throw std::runtime_error("cannot write " + path.string());
    os_ << kMetricsHeader << '\n';
  }
  void operator()(const TrainRow& r, const Vector&) { os_ << metrics_csv_row(r) << '\n'; }

 private:
  std::ofstream os_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

inline nlohmann::ordered_json report_json(const TrainReport& r) {
  nlohmann::ordered_json j;
  j["iterations"] = r.rows.size();
  j["initial"] = to_json(r.initial);
  j["final"] = to_json(r.rows.empty() ? r.initial : r.rows.back().metrics);
  j["best_iter"] = r.best_iter;
  j["warnings"] = r.warnings;
  return j;
}

struct Prepared {
  ExperimentConfig cfg;
  std::unique_ptr<TrainingProblem> problem;
  Vector w0;
  std::optional<SymmetricSystem> system;
};

// Builds the problem and checks everything that can be checked before any
// output is written. Failures are config errors.
inline Prepared prepare(ExperimentConfig cfg) {
  Prepared p;
  try {
    switch (cfg.kind) {
      case ExperimentKind::spheres: {
        auto prob = std::make_unique<SphereTraining>(gen_spheres(cfg.dim, cfg.n_constraints, cfg.train.seed, cfg.radius));
        p.w0 = prob->problem().x0;
        cfg.train.validate(*prob);
        if (cfg.paired()) {
          TrainConfig soft = cfg.train;
          soft.method = Method::soft_sgd;
          soft.lr = cfg.soft_lr.value_or(1.0);
          soft.validate(*prob);
        }
        p.problem = std::move(prob);
        break;
      }
      case ExperimentKind::toy_pose: {
        auto prob = std::make_unique<ToyPoseProblem>(cfg.train.seed, cfg.toy);
        cfg.train.validate(*prob);
        if (cfg.init == "random")
          p.w0 = prob->initial_params();
        else
          p.w0 = load_checkpoint(cfg.init, prob->layout_hash());
        p.problem = std::move(prob);
        break;
      }
      case ExperimentKind::solve_check: {
        cfg.train.solver.validate();
        if (cfg.dim < 1 || cfg.dim > 2000) throw std::invalid_argument("dim must be in [1, 2000]");
        const std::size_t rank = cfg.rank.value_or(cfg.dim);
        p.system = gen_symmetric_system(cfg.dim, cfg.cond, rank, cfg.consistent, cfg.train.seed);
        break;
      }
    }
  } catch (const CheckpointError& e) {
    throw ConfigError(0, "init", e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(0, "", e.what());
  }
  p.cfg = std::move(cfg);
  return p;
}

inline int run_solve_check(const Prepared& p, const std::filesystem::path& out, std::ostream& log) {
  const ExperimentConfig& cfg = p.cfg;
  const SymmetricSystem& sys = *p.system;
  const LinearOperator op = dense_operator(sys.a);
  const KrylovSolution sol =
      cfg.method == "minres" ? minres(op, sys.b, cfg.train.solver) : minres_qlp(op, sys.b, cfg.train.solver);
  CsvSink csv(out / "metrics.csv");
  for (std::size_t k = 0; k < sol.residual_history.size(); ++k) {
    TrainRow r;
    r.iter = k;
    r.metrics.risk = sol.residual_history[k];
    r.solver_iters = k;
    r.solver_status = k + 1 == sol.residual_history.size() ? to_string(sol.status) : "running";
    csv(r, sol.x);
  }
  const Vector r = sys.b - op.apply(sol.x);
  nlohmann::ordered_json j;
  j["experiment"] = "solve_check";
  j["method"] = cfg.method;
  j["status"] = to_string(sol.status);
  j["iterations"] = sol.iters;
  j["residual_norm"] = norm(r.span());
  j["normal_residual_norm"] = norm(op.apply(r).span());
  j["rhs_norm"] = norm(sys.b.span());
  j["solution_norm"] = norm(sol.x.span());
  write_text(out / "summary", j.dump(2) + "\n");
  log << "solve_check: " << to_string(sol.status) << " after " << sol.iters << " iterations\n";
  return kExitOk;
}

}  // namespace detail

/// Runs one experiment into out. ConfigError escapes before anything is
/// written; numerical failures return kExitNumerical after saving the last
/// finite parameters to checkpoint.bin.
inline int run_experiment(ExperimentConfig cfg_in, const std::filesystem::path& out, std::ostream& log) {
  detail::Prepared p = detail::prepare(std::move(cfg_in));
  ExperimentConfig& cfg = p.cfg;

  std::filesystem::create_directories(out);
  if (cfg.kind == ExperimentKind::solve_check) {
    detail::write_text(out / "resolved_config", resolved_config_text(cfg));
    return detail::run_solve_check(p, out, log);
  }

  const TrainingProblem& prob = *p.problem;
  const std::uint64_t hash = prob.layout_hash();
  nlohmann::ordered_json summary;
  summary["experiment"] = to_string(cfg.kind);
  summary["method"] = cfg.method;
  summary["seed"] = cfg.train.seed;

  auto fail = [&](const TrainingFailure& e, const std::string& what) {
    save_checkpoint((out / "checkpoint.bin").string(), e.partial().final_params, hash);
    summary["status"] = "numerical_failure";
    summary["failed_run"] = what;
    summary["error"] = e.what();
    summary["partial"] = detail::report_json(e.partial());
    detail::write_text(out / "summary", summary.dump(2) + "\n");
    log << "numerical failure in " << what << ": " << e.what() << '\n';
    return kExitNumerical;
  };

  if (cfg.paired()) {
    const auto& spheres = dynamic_cast<const SphereTraining&>(prob);
    if (!cfg.soft_lr) {
      cfg.soft_lr = tune_soft_lr(cfg.dim, cfg.train.epochs, cfg.train.constraint_batch, cfg.resolved_heldout_seed(),
                                 default_soft_lr_grid(), cfg.n_constraints);
      log << "soft_lr tuned on seed " << cfg.resolved_heldout_seed() << ": " << format_double(*cfg.soft_lr) << '\n';
    }
    detail::write_text(out / "resolved_config", resolved_config_text(cfg));
    TrainConfig hard = cfg.train;
    hard.method = Method::hard_sgd;
    TrainConfig soft = cfg.train;
    soft.method = Method::soft_sgd;
    soft.lr = *cfg.soft_lr;
    TrainReport rh, rs;
    {
      detail::CsvSink csv(out / "metrics_hard.csv");
      try {
        rh = train(hard, prob, spheres.problem().x0, std::ref(csv));
      } catch (const TrainingFailure& e) {
        return fail(e, "hard");
      }
    }
    {
      detail::CsvSink csv(out / "metrics_soft.csv");
      try {
        rs = train(soft, prob, spheres.problem().x0, std::ref(csv));
      } catch (const TrainingFailure& e) {
        return fail(e, "soft");
      }
    }
    save_checkpoint((out / "checkpoint_hard.bin").string(), rh.final_params, hash);
    save_checkpoint((out / "checkpoint_soft.bin").string(), rs.final_params, hash);
    std::vector<TrainRow> th{TrainRow{}}, ts{TrainRow{}};
    th[0].metrics = rh.initial;
    ts[0].metrics = rs.initial;
    th.insert(th.end(), rh.rows.begin(), rh.rows.end());
    ts.insert(ts.end(), rs.rows.begin(), rs.rows.end());
    summary["status"] = "ok";
    summary["soft_lr"] = *cfg.soft_lr;
    summary["hard"] = detail::report_json(rh);
    summary["soft"] = detail::report_json(rs);
    summary["comparison_hard_vs_soft"] = to_json(compare_traces(th, ts));
    detail::write_text(out / "summary", summary.dump(2) + "\n");
    log << "spheres paired run: hard " << format_double(th.back().metrics.median_violation) << ", soft "
        << format_double(ts.back().metrics.median_violation) << " final median violation\n";
    return kExitOk;
  }

  detail::write_text(out / "resolved_config", resolved_config_text(cfg));
  Vector w0 = p.w0;
  if (cfg.kind == ExperimentKind::toy_pose && cfg.pretrain_epochs > 0) {
    TrainConfig pre = cfg.train;
    pre.method = Method::soft_adam;
    pre.lr = 1e-3;
    pre.lambda = 0.0;
    pre.epochs = cfg.pretrain_epochs;
    pre.mining = false;
    pre.keep_best = true;
    try {
      const TrainReport r = train(pre, prob, w0);
      w0 = r.best_params;
      save_checkpoint((out / "pretrained.bin").string(), w0, hash);
      summary["pretrain"] = detail::report_json(r);
    } catch (const TrainingFailure& e) {
      return fail(e, "pretrain");
    }
  }
  TrainReport report;
  {
    detail::CsvSink csv(out / "metrics.csv");
    try {
      report = train(cfg.train, prob, w0, std::ref(csv));
    } catch (const TrainingFailure& e) {
      return fail(e, cfg.method);
    }
  }
  save_checkpoint((out / "checkpoint.bin").string(), report.best_params, hash);
  summary["status"] = "ok";
  summary["run"] = detail::report_json(report);
  summary["checkpoint_metrics"] = to_json(prob.metrics(report.best_params));
  detail::write_text(out / "summary", summary.dump(2) + "\n");
  log << to_string(cfg.kind) << ' ' << cfg.method << ": final median violation "
      << format_double(report.rows.empty() ? report.initial.median_violation
                                           : report.rows.back().metrics.median_violation)
      << '\n';
  return kExitOk;
}

}  // namespace hardcon
