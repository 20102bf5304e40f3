#pragma once

// Linearized KKT systems as implicit symmetric operators.
//
//   sgd           [ eta I              J_C^T ] [dw]   [ -dR/dw ]
//                 [ J_C                0     ] [L ] = [ -C(w)  ]
//
//   gauss_newton  top-left J_r^T J_r + eta I,    top RHS -J_r^T r(w)
//   adam          top-left eta f diag(sqrt(v)+e), top RHS -m
//
// with f = sqrt(1 - beta2^t) / (1 - beta1^t) for moments after t updates.
// All Jacobian products go through Linearization::rop / lop.

#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>

#include "hardcon/autodiff.hpp"
#include "hardcon/krylov.hpp"
#include "hardcon/linops.hpp"

namespace hardcon {

/// Adam moment estimates after t updates.
struct AdamState {
  Vector m;
  Vector v;
  std::size_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState zeros(std::size_t n) { return {Vector(n), Vector(n)}; }

  /// m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,  t <- t+1.
  AdamState advanced(const Vector& grad) const {
    check_length("AdamState::advanced", m.size(), grad.size());
    AdamState next = *this;
    for (std::size_t i = 0; i < grad.size(); ++i) {
      next.m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
      next.v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
    }
    next.m.ensure_finite("AdamState::m");
    next.v.ensure_finite("AdamState::v");
    ++next.t;
    return next;
  }

  /// sqrt(1 - beta2^t) / (1 - beta1^t); requires t >= 1.
  double bias_factor() const {
    if (t == 0) throw std::logic_error("AdamState::bias_factor: no update yet");
    const double td = static_cast<double>(t);
    return std::sqrt(1.0 - std::pow(beta2, td)) / (1.0 - std::pow(beta1, td));
  }
};

enum class KktVariant { sgd, gauss_newton, adam };

inline const char* to_string(KktVariant v) {
  switch (v) {
    case KktVariant::sgd: return "sgd";
    case KktVariant::gauss_newton: return "gauss_newton";
    case KktVariant::adam: return "adam";
  }
  return "unknown";
}

struct KktState {
  Vector w;
  KktVariant variant = KktVariant::sgd;
  /// eta = 1 / lr.
  double damping = 1.0;
  /// dR/dw; used by the sgd variant.
  Vector risk_grad;
  /// r(w) with R = |r|^2 / 2; used by the gauss_newton variant.
  std::shared_ptr<const Linearization> residuals;
  /// Stacked active constraints; null means no constraints.
  std::shared_ptr<const Linearization> constraints;
  /// Moments after the current gradient was folded in; used by the adam variant.
  std::optional<AdamState> adam;

  std::size_t n_params() const noexcept { return w.size(); }
  std::size_t n_active() const noexcept { return constraints ? constraints->n_outputs() : 0; }
  std::size_t dim() const noexcept { return n_params() + n_active(); }

  void validate() const {
    if (w.empty()) throw std::invalid_argument("KktState: empty parameter vector");
    if (!(damping > 0.0) || !std::isfinite(damping))
      throw std::invalid_argument("KktState: damping must be positive and finite");
    if (constraints) check_length("KktState: constraint linearization", n_params(), constraints->n_params());
    switch (variant) {
      case KktVariant::sgd:
        check_length("KktState: risk_grad", n_params(), risk_grad.size());
        break;
      case KktVariant::gauss_newton:
        if (!residuals) throw std::invalid_argument("KktState: gauss_newton needs a residual model");
        check_length("KktState: residual linearization", n_params(), residuals->n_params());
        break;
      case KktVariant::adam:
        if (!adam) throw std::invalid_argument("KktState: adam needs moments");
        check_length("KktState: adam m", n_params(), adam->m.size());
        check_length("KktState: adam v", n_params(), adam->v.size());
        if (adam->t == 0) throw std::invalid_argument("KktState: adam moments have t = 0");
        break;
    }
  }
};

namespace detail {

// v2 -> J_C^T v2 and v1 -> J_C v1, or zeros when there are no constraints.
inline void add_constraint_blocks(const KktState& s, const Vector& v1, const Vector& v2,
                                  Vector& top, Vector& bottom) {
  if (s.n_active() == 0) return;
  axpy(1.0, s.constraints->lop(v2), top);
  bottom = s.constraints->rop(v1);
}

template <class TopLeft>
Vector kkt_apply(const KktState& s, const Vector& v, TopLeft top_left) {
  check_length("kkt matvec", s.dim(), v.size());
  auto [v1, v2] = split_at(v, s.n_params());
  Vector top = top_left(v1);
  Vector bottom(s.n_active());
  add_constraint_blocks(s, v1, v2, top, bottom);
  return concat(top, bottom);
}

inline void require_variant(const KktState& s, KktVariant v, const char* what) {
  if (s.variant != v)
    throw std::invalid_argument(std::string(what) + ": state variant is " + to_string(s.variant));
}

}  // namespace detail

/// (eta v1 + J_C^T v2, J_C v1)
inline Vector kkt_matvec_sgd(const KktState& s, const Vector& v) {
  return detail::kkt_apply(s, v, [&](const Vector& v1) { return s.damping * v1; });
}

/// (J_r^T J_r v1 + eta v1 + J_C^T v2, J_C v1)
inline Vector kkt_matvec_gn(const KktState& s, const Vector& v) {
  detail::require_variant(s, KktVariant::gauss_newton, "kkt_matvec_gn");
  if (!s.residuals) throw std::invalid_argument("kkt_matvec_gn: no residual model");
  return detail::kkt_apply(s, v, [&](const Vector& v1) {
    Vector top = s.residuals->lop(s.residuals->rop(v1));
    axpy(s.damping, v1, top);
    return top;
  });
}

/// (eta f (sqrt(v)+eps) o v1 + J_C^T v2, J_C v1)
inline Vector kkt_matvec_adam(const KktState& s, const Vector& v) {
  detail::require_variant(s, KktVariant::adam, "kkt_matvec_adam");
  if (!s.adam) throw std::invalid_argument("kkt_matvec_adam: no moments");
  const AdamState& a = *s.adam;
  const double scale = s.damping * a.bias_factor();
  return detail::kkt_apply(s, v, [&](const Vector& v1) {
    Vector top(v1.size());
    for (std::size_t i = 0; i < v1.size(); ++i) top[i] = scale * (std::sqrt(a.v[i]) + a.eps) * v1[i];
    top.ensure_finite("kkt_matvec_adam");
    return top;
  });
}

inline Vector kkt_matvec(const KktState& s, const Vector& v) {
  switch (s.variant) {
    case KktVariant::sgd: return kkt_matvec_sgd(s, v);
    case KktVariant::gauss_newton: return kkt_matvec_gn(s, v);
    case KktVariant::adam: return kkt_matvec_adam(s, v);
  }
  throw std::logic_error("kkt_matvec: unknown variant");
}

/// The state is captured by shared ownership, so the operator outlives the caller's copy.
inline LinearOperator kkt_operator(std::shared_ptr<const KktState> s) {
  s->validate();
  const std::size_t n = s->dim();
  return LinearOperator(n, [s = std::move(s)](const Vector& v) { return kkt_matvec(*s, v); });
}

inline LinearOperator kkt_operator(const KktState& s) {
  return kkt_operator(std::make_shared<const KktState>(s));
}

inline Vector kkt_rhs(const KktState& s) {
  s.validate();
  Vector top;
  switch (s.variant) {
    case KktVariant::sgd: top = -s.risk_grad; break;
    case KktVariant::gauss_newton: top = -s.residuals->lop(s.residuals->value()); break;
    case KktVariant::adam: top = -s.adam->m; break;
  }
  Vector bottom = s.n_active() > 0 ? -s.constraints->value() : Vector();
  return concat(top, bottom);
}

/// Thrown when the inner solve breaks down on both attempts.
class SolverBreakdown : public NumericalError {
 public:
  SolverBreakdown(const std::string& what, double residual, std::size_t iters)
      : NumericalError(what + " (residual " + std::to_string(residual) + ", " +
                       std::to_string(iters) + " iterations)"),
        residual_(residual),
        iters_(iters) {}
  double residual() const noexcept { return residual_; }
  std::size_t iters() const noexcept { return iters_; }

 private:
  double residual_;
  std::size_t iters_;
};

/// A non-converged solve is still accepted when |b - Bx| <= kAcceptRatio |b|.
inline constexpr double kAcceptRatio = 1e-3;

struct StepResult {
  Vector dw;
  Vector multipliers;
  SolverStatus status = SolverStatus::converged;
  std::size_t iters = 0;  // summed over attempts
  double residual_norm = 0.0;
  double rhs_norm = 0.0;
  int attempts = 0;
  /// False when both attempts failed the acceptance test; dw is then zero.
  bool accepted = true;
  std::string warning;
};

/// Solves the variant's system with minres_qlp and splits x at N_P into
/// (dw, multipliers). If the first solve is not accepted, eta is doubled
/// (halving the gradient part of the step) and the solve retried once;
/// a second failure skips the update.
inline StepResult solve_step(const KktState& state, const SolverConfig& cfg = {}) {
  state.validate();
  StepResult out;
  KktState s = state;
  for (int attempt = 1; attempt <= 2; ++attempt) {
    const Vector b = kkt_rhs(s);
    const KrylovSolution sol = minres_qlp(kkt_operator(s), b, cfg);
    out.attempts = attempt;
    out.iters += sol.iters;
    out.status = sol.status;
    out.residual_norm = sol.residual_norm;
    out.rhs_norm = norm(b.span());
    const bool ok = sol.status != SolverStatus::breakdown &&
                    (sol.status == SolverStatus::converged || sol.residual_norm <= kAcceptRatio * out.rhs_norm);
    if (ok) {
      auto [dw, lambda] = split_at(sol.x, s.n_params());
      out.dw = std::move(dw);
      out.multipliers = std::move(lambda);
      out.accepted = true;
      if (attempt > 1) out.warning = "accepted after halving the step";
      return out;
    }
    if (attempt == 2 && sol.status == SolverStatus::breakdown)
      throw SolverBreakdown("solve_step: inner solve broke down", sol.residual_norm, out.iters);
    s.damping *= 2.0;
  }
  out.dw = Vector(state.n_params());
  out.multipliers = Vector(state.n_active());
  out.accepted = false;
  out.warning = "inner solve rejected twice (residual " + std::to_string(out.residual_norm) +
                " vs |b| " + std::to_string(out.rhs_norm) + "); update skipped";
  return out;
}

}  // namespace hardcon
