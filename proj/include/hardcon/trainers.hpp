#pragma once

// Outer optimization loops: Soft-SGD, Soft-Adam, Hard-SGD, Hard-GN, Hard-Adam.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hardcon/autodiff.hpp"
#include "hardcon/constraints.hpp"
#include "hardcon/kkt.hpp"
#include "hardcon/krylov.hpp"
#include "hardcon/linops.hpp"

namespace hardcon {

enum class Method { soft_sgd, soft_adam, hard_sgd, hard_gn, hard_adam };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::soft_sgd: return "soft_sgd";
    case Method::soft_adam: return "soft_adam";
    case Method::hard_sgd: return "hard_sgd";
    case Method::hard_gn: return "hard_gn";
    case Method::hard_adam: return "hard_adam";
  }
  return "unknown";
}

inline std::optional<Method> parse_method(const std::string& s) {
  for (Method m : {Method::soft_sgd, Method::soft_adam, Method::hard_sgd, Method::hard_gn, Method::hard_adam})
    if (s == to_string(m)) return m;
  return std::nullopt;
}

inline bool is_hard(Method m) {
  return m == Method::hard_sgd || m == Method::hard_gn || m == Method::hard_adam;
}

inline bool uses_adam(Method m) { return m == Method::soft_adam || m == Method::hard_adam; }

// ---------------------------------------------------------------------------
// Problems.

struct Metrics {
  double risk = 0.0;
  double pred_error = 0.0;
  double median_violation = 0.0;
};

/// What the training loop needs from a problem. Risk is the batch mean of a
/// per-sample loss; problems without training data ignore the batch.
class TrainingProblem {
 public:
  virtual ~TrainingProblem() = default;
  virtual std::size_t n_params() const = 0;
  virtual std::uint64_t layout_hash() const = 0;
  /// 0 when the risk does not depend on sampled data.
  virtual std::size_t n_train() const = 0;
  virtual std::size_t pool_size() const = 0;
  virtual std::size_t n_constraint_kinds() const = 0;
  virtual const std::vector<ConstraintKind>& constraint_kinds() const = 0;
  virtual DiffFunction risk(const std::vector<std::size_t>& batch) const = 0;
  /// r(w) with risk = |r|^2 / 2.
  virtual DiffFunction risk_residuals(const std::vector<std::size_t>& batch) const = 0;
  virtual DiffFunction constraints(const ActiveSet& active) const = 0;
  virtual ActiveSet select_mined(const Vector& w, std::size_t n_keep) const = 0;
  virtual Metrics metrics(const Vector& w) const = 0;
};

// ---------------------------------------------------------------------------
// Soft objective.

struct SoftWeights {
  /// One lambda per constraint kind j.
  std::vector<double> lambda;

  static SoftWeights uniform(std::size_t n_kinds, double value) {
    return {std::vector<double>(n_kinds, value)};
  }

  void validate(std::size_t n_kinds) const {
    check_length("SoftWeights", n_kinds, lambda.size());
    for (double l : lambda)
      if (!(l >= 0.0) || !std::isfinite(l)) throw std::invalid_argument("SoftWeights: lambda must be >= 0");
  }
};

/// Active set with satisfied inequalities removed.
inline ActiveSet drop_satisfied(const ActiveSet& active, const Vector& c,
                                const std::vector<ConstraintKind>& kinds) {
  ActiveSet out;
  for (std::size_t i = 0; i < active.size(); ++i) {
    const auto& e = active.entries[i];
    if (kinds.at(e.j) == ConstraintKind::inequality && c[i] <= 0.0) continue;
    out.entries.push_back(e);
  }
  return out;
}

/// R(w) on the batch plus sum_j lambda_j sum_k C_jk(w)^2 over the active set.
inline double soft_objective(const TrainingProblem& p, const Vector& w,
                             const std::vector<std::size_t>& data_batch, const ActiveSet& active,
                             const SoftWeights& weights) {
  weights.validate(p.n_constraint_kinds());
  double obj = p.risk(data_batch).value(w)[0];
  if (active.empty()) return obj;
  const Vector c = p.constraints(active).value(w);
  for (std::size_t i = 0; i < active.size(); ++i) obj += weights.lambda[active.entries[i].j] * c[i] * c[i];
  return obj;
}

/// Gradient of soft_objective.
inline Vector soft_gradient(const TrainingProblem& p, const Vector& w,
                            const std::vector<std::size_t>& data_batch, const ActiveSet& active,
                            const SoftWeights& weights) {
  Vector g = gradient(p.risk(data_batch), w);
  if (active.empty()) return g;
  const auto lin = p.constraints(active).linearize(w);
  const Vector& c = lin->value();
  Vector u(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) u[i] = 2.0 * weights.lambda[active.entries[i].j] * c[i];
  axpy(1.0, lin->lop(u), g);
  return g;
}

// ---------------------------------------------------------------------------
// Adam.

/// Folds grad into the moments and returns dw = -lr f m / (sqrt(v) + eps).
inline std::pair<AdamState, Vector> adam_update(const AdamState& state, const Vector& grad, double lr) {
  AdamState next = state.advanced(grad);
  const double f = next.bias_factor();
  Vector dw(grad.size());
  for (std::size_t i = 0; i < dw.size(); ++i) dw[i] = -lr * f * next.m[i] / (std::sqrt(next.v[i]) + next.eps);
  dw.ensure_finite("adam_update");
  return {std::move(next), std::move(dw)};
}

// ---------------------------------------------------------------------------
// Configuration and report.

struct TrainConfig {
  Method method = Method::soft_adam;
  double lr = 1e-3;
  double lambda = 1.0;
  /// Outer passes. An epoch is ceil(n_train / data_batch) iterations, or a
  /// single iteration when the risk takes no data.
  std::size_t epochs = 1;
  std::size_t data_batch = 128;
  std::size_t constraint_batch = 128;
  bool mining = false;
  std::size_t mined_batch = 16;
  SolverConfig solver;
  std::uint64_t seed = 0;
  /// Keep the parameters with the lowest pred_error seen at epoch ends.
  bool keep_best = false;
  AdamState adam_defaults;

  void validate(const TrainingProblem& p) const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("TrainConfig: lr must be positive");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("TrainConfig: lambda must be >= 0");
    if (p.n_train() > 0 && (data_batch < 1 || data_batch > p.n_train()))
      throw std::invalid_argument("TrainConfig: data_batch must be in [1, " + std::to_string(p.n_train()) + "]");
    const std::size_t cb = mining ? mined_batch : constraint_batch;
    if (cb < 1 || cb > p.pool_size())
      throw std::invalid_argument("TrainConfig: constraint batch must be in [1, " +
                                  std::to_string(p.pool_size()) + "]");
    solver.validate();
  }

  std::size_t iterations_per_epoch(const TrainingProblem& p) const {
    if (p.n_train() == 0) return 1;
    return (p.n_train() + data_batch - 1) / data_batch;
  }
};

struct TrainRow {
  std::size_t iter = 0;
  Metrics metrics;
  /// median |C| over the active set after the update minus before it.
  double active_delta = 0.0;
  double active_before = 0.0;
  double active_after = 0.0;
  std::size_t solver_iters = 0;
  std::string solver_status = "none";
  double step_norm = 0.0;
  std::uint64_t active_fingerprint = 0;
  std::size_t n_active = 0;
};

struct TrainReport {
  Metrics initial;
  std::vector<TrainRow> rows;
  Vector final_params;
  Vector best_params;
  std::size_t best_iter = 0;
  std::vector<std::string> warnings;
};

/// Raised when parameters or metrics stop being finite. Carries the report so
/// far and the last parameters that were finite.
class TrainingFailure : public NumericalError {
 public:
  TrainingFailure(const std::string& what, TrainReport partial)
      : NumericalError(what), partial_(std::move(partial)) {}
  const TrainReport& partial() const noexcept { return partial_; }

 private:
  TrainReport partial_;
};

// ---------------------------------------------------------------------------
// Single steps.

struct HardStep {
  Vector w;
  Vector multipliers;
  StepResult diagnostics;
};

/// One gradient step on the soft objective. Adam methods update adam in place.
inline Vector step_soft(Method method, const TrainingProblem& p, const Vector& w,
                        const std::vector<std::size_t>& data_batch, const ActiveSet& active,
                        const TrainConfig& cfg, AdamState& adam) {
  if (is_hard(method)) throw std::invalid_argument("step_soft: hard method");
  const SoftWeights weights = SoftWeights::uniform(p.n_constraint_kinds(), cfg.lambda);
  const Vector g = soft_gradient(p, w, data_batch, active, weights);
  if (method == Method::soft_sgd) return w - cfg.lr * g;
  auto [next, dw] = adam_update(adam, g, cfg.lr);
  adam = std::move(next);
  return w + dw;
}

/// Builds the variant's KKT state, solves it and applies w + dw.
inline HardStep step_hard(Method method, const TrainingProblem& p, const Vector& w,
                          const std::vector<std::size_t>& data_batch, const ActiveSet& active,
                          const TrainConfig& cfg, AdamState& adam) {
  if (!is_hard(method)) throw std::invalid_argument("step_hard: soft method");
  KktState s;
  s.w = w;
  s.damping = 1.0 / cfg.lr;
  if (!active.empty()) s.constraints = p.constraints(active).linearize(w);
  switch (method) {
    case Method::hard_sgd:
      s.variant = KktVariant::sgd;
      s.risk_grad = gradient(p.risk(data_batch), w);
      break;
    case Method::hard_gn:
      s.variant = KktVariant::gauss_newton;
      s.residuals = p.risk_residuals(data_batch).linearize(w);
      break;
    case Method::hard_adam:
      s.variant = KktVariant::adam;
      adam = adam.advanced(gradient(p.risk(data_batch), w));
      s.adam = adam;
      break;
    default: break;
  }
  HardStep out;
  out.diagnostics = solve_step(s, cfg.solver);
  out.w = w + out.diagnostics.dw;
  out.multipliers = out.diagnostics.multipliers;
  return out;
}

// ---------------------------------------------------------------------------
// The loop.

namespace detail {

inline double median_abs(const Vector& c) {
  std::vector<double> a(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) a[i] = std::abs(c[i]);
  return median(std::move(a));
}

// Independent streams for data batches and constraint batches, so that every
// method sees the same draws for a given seed.
struct Streams {
  std::mt19937_64 data;
  std::mt19937_64 constraints;
  explicit Streams(std::uint64_t seed)
      : data(seeded_engine(seed, 0x64617461)),
        constraints(seeded_engine(seed, 0x636f6e73)) {}
};

inline bool finite(const Metrics& m) {
  return std::isfinite(m.risk) && std::isfinite(m.pred_error) && std::isfinite(m.median_violation);
}

}  // namespace detail

using RowCallback = std::function<void(const TrainRow&, const Vector& w)>;

/// Runs cfg.epochs epochs. on_row, if set, sees the initial row (iter 0) and
/// every iteration's row as it is produced.
inline TrainReport train(const TrainConfig& cfg, const TrainingProblem& p, Vector w0,
                         const RowCallback& on_row = {}) {
  cfg.validate(p);
  check_length("train: initial parameters", p.n_params(), w0.size());

  TrainReport report;
  detail::Streams streams(cfg.seed);
  AdamState adam = cfg.adam_defaults;
  adam.m = Vector(p.n_params());
  adam.v = Vector(p.n_params());
  adam.t = 0;

  Vector w = std::move(w0);
  report.initial = p.metrics(w);
  if (!detail::finite(report.initial)) throw TrainingFailure("train: initial metrics not finite", report);
  report.best_params = w;
  double best_err = report.initial.pred_error;
  if (on_row) {
    TrainRow r0;
    r0.metrics = report.initial;
    on_row(r0, w);
  }

  const std::size_t per_epoch = cfg.iterations_per_epoch(p);
  std::vector<std::size_t> order(p.n_train());
  std::iota(order.begin(), order.end(), 0);
  std::size_t iter = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), streams.data);
    for (std::size_t b = 0; b < per_epoch; ++b) {
      ++iter;
      std::vector<std::size_t> batch;
      if (p.n_train() > 0) {
        const std::size_t lo = b * cfg.data_batch;
        const std::size_t hi = std::min(lo + cfg.data_batch, order.size());
        batch.assign(order.begin() + static_cast<std::ptrdiff_t>(lo),
                     order.begin() + static_cast<std::ptrdiff_t>(hi));
      }
      ActiveSet active =
          cfg.mining ? p.select_mined(w, cfg.mined_batch)
                     : ActiveSet::all_of(random_subset(p.pool_size(), cfg.constraint_batch, streams.constraints),
                                         p.n_constraint_kinds());

      TrainRow row;
      row.iter = iter;
      try {
        Vector c_before;
        if (!active.empty()) {
          c_before = p.constraints(active).value(w);
          active = drop_satisfied(active, c_before, p.constraint_kinds());
          if (!active.empty()) c_before = p.constraints(active).value(w);
        }
        row.active_fingerprint = active.fingerprint();
        row.n_active = active.size();

        Vector w_next;
        if (is_hard(cfg.method)) {
          HardStep hs = step_hard(cfg.method, p, w, batch, active, cfg, adam);
          row.solver_iters = hs.diagnostics.iters;
          row.solver_status = hs.diagnostics.accepted ? to_string(hs.diagnostics.status) : "skipped";
          if (!hs.diagnostics.warning.empty())
            report.warnings.push_back("iter " + std::to_string(iter) + ": " + hs.diagnostics.warning);
          w_next = std::move(hs.w);
        } else {
          w_next = step_soft(cfg.method, p, w, batch, active, cfg, adam);
        }
        row.step_norm = norm((w_next - w).span());
        if (!active.empty()) {
          row.active_before = detail::median_abs(c_before);
          row.active_after = detail::median_abs(p.constraints(active).value(w_next));
          row.active_delta = row.active_after - row.active_before;
        }
        row.metrics = p.metrics(w_next);
        if (!detail::finite(row.metrics) || !std::isfinite(row.step_norm))
          throw NumericalError("metrics not finite");
        w = std::move(w_next);
      } catch (const NumericalError& e) {
        report.final_params = w;
        throw TrainingFailure("train: iteration " + std::to_string(iter) + ": " + e.what(), report);
      }
      report.rows.push_back(row);
      if (on_row) on_row(row, w);
    }
    if (cfg.keep_best && report.rows.back().metrics.pred_error < best_err) {
      best_err = report.rows.back().metrics.pred_error;
      report.best_params = w;
      report.best_iter = iter;
    }
  }
  report.final_params = w;
  if (!cfg.keep_best) {
    report.best_params = w;
    report.best_iter = iter;
  }
  return report;
}

}  // namespace hardcon
