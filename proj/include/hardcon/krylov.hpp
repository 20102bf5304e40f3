#pragma once

// Krylov solvers for symmetric, possibly indefinite and singular systems.
//
// minres      Paige-Saunders MINRES: Lanczos tridiagonalization plus a Givens
//             QR of the tridiagonal. Fine for nonsingular systems.
// minres_qlp  Choi-Paige-Saunders MINRES-QLP: the same Lanczos process, with
//             a QLP factorization of the tridiagonal once its estimated
//             condition number exceeds kTransferCondition. Returns the
//             minimum-length (least-squares) solution for singular systems.
//
// Neither solver restarts or preconditions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "hardcon/linops.hpp"

namespace hardcon {

struct SolverConfig {
  double rtol = 1e-8;
  /// 0 selects the default 4 * dim, capped at 2000.
  std::size_t max_iters = 0;
  double breakdown_tol = 1e-14;
  /// Re-orthogonalize each new Lanczos vector against all previous ones
  /// (two Gram-Schmidt passes). Costs O(k n) memory and work per iteration.
  bool reorthogonalize = false;

  std::size_t iteration_cap(std::size_t dim) const {
    if (max_iters > 0) return max_iters;
    return std::min<std::size_t>(4 * dim, 2000);
  }

  void validate() const {
    if (!(rtol > 0.0)) throw std::invalid_argument("SolverConfig: rtol must be positive");
    if (!(breakdown_tol > 0.0))
      throw std::invalid_argument("SolverConfig: breakdown_tol must be positive");
  }
};

enum class SolverStatus { converged, max_iters, singular_min_length, breakdown };

inline const char* to_string(SolverStatus s) {
  switch (s) {
    case SolverStatus::converged: return "converged";
    case SolverStatus::max_iters: return "max_iters";
    case SolverStatus::singular_min_length: return "singular_min_length";
    case SolverStatus::breakdown: return "breakdown";
  }
  return "unknown";
}

struct KrylovSolution {
  Vector x;
  /// |b - Bx| recomputed with one extra matvec after the iteration stops.
  double residual_norm = 0.0;
  /// The recurrence's own estimate of |b - Bx| at exit.
  double estimated_residual_norm = 0.0;
  std::size_t iters = 0;
  SolverStatus status = SolverStatus::max_iters;
  /// Recurrence residual estimate after each iteration (non-increasing).
  std::vector<double> residual_history;
};

namespace detail {

// Symmetric 2x2 reflection [c s; s -c] taking (a, b) to (r, 0).
struct Reflection {
  double c;
  double s;
  double r;
};

inline double sign(double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); }

inline Reflection sym_givens(double a, double b) {
  if (b == 0.0) return {a == 0.0 ? 1.0 : sign(a), 0.0, std::abs(a)};
  if (a == 0.0) return {0.0, sign(b), std::abs(b)};
  if (std::abs(b) > std::abs(a)) {
    const double t = a / b;
    const double s = sign(b) / std::sqrt(1.0 + t * t);
    const double c = s * t;
    return {c, s, b / s};
  }
  const double t = b / a;
  const double c = sign(a) / std::sqrt(1.0 + t * t);
  const double s = c * t;
  return {c, s, a / c};
}

inline double hypot3(double a, double b, double c) { return std::sqrt(a * a + b * b + c * c); }

// Two classical Gram-Schmidt passes of r against an orthonormal basis.
inline void orthogonalize(const std::vector<Vector>& basis, Vector& r) {
  for (int pass = 0; pass < 2; ++pass) {
    for (const Vector& q : basis) {
      const double h = dot(q.span(), r.span());
      for (std::size_t i = 0; i < r.size(); ++i) r[i] -= h * q[i];
    }
  }
}

inline KrylovSolution finish(const LinearOperator& op, const Vector& b, KrylovSolution sol,
                             double rtol, SolverStatus fallback) {
  if (!all_finite(sol.x.span())) {
    sol.status = SolverStatus::breakdown;
    sol.residual_norm = std::numeric_limits<double>::infinity();
    return sol;
  }
  try {
    sol.residual_norm = norm((b - op.apply(sol.x)).span());
  } catch (const NumericalError&) {
    sol.status = SolverStatus::breakdown;
    sol.residual_norm = std::numeric_limits<double>::infinity();
    return sol;
  }
  const double bnorm = norm(b.span());
  sol.status = sol.residual_norm <= rtol * bnorm ? SolverStatus::converged : fallback;
  return sol;
}

}  // namespace detail

/// Unpreconditioned MINRES. Stops when the recurrence residual drops below
/// rtol * |b| or after the iteration cap.
inline KrylovSolution minres(const LinearOperator& op, const Vector& b,
                             const SolverConfig& cfg = {}) {
  cfg.validate();
  check_length("minres", op.dim(), b.size());
  const std::size_t n = op.dim();
  const std::size_t cap = cfg.iteration_cap(n);

  KrylovSolution sol;
  sol.x = Vector(n);
  const double beta1 = norm(b.span());
  if (beta1 == 0.0) {
    sol.status = SolverStatus::converged;
    return sol;
  }

  Vector v_prev(n);
  Vector v = (1.0 / beta1) * b;
  Vector w(n), w_prev(n), w_prev2(n);
  double beta = 0.0;  // coupling between v_prev and v
  double c1 = 1.0, s1 = 0.0, c2 = 1.0, s2 = 0.0;
  double phibar = beta1;
  SolverStatus fallback = SolverStatus::max_iters;
  std::vector<Vector> basis;

  try {
    for (std::size_t k = 1; k <= cap; ++k) {
      Vector av = op.apply(v);
      const double alpha = dot(v.span(), av.span());
      for (std::size_t i = 0; i < n; ++i) av[i] -= alpha * v[i] + beta * v_prev[i];
      if (cfg.reorthogonalize) {
        basis.push_back(v);
        detail::orthogonalize(basis, av);
      }
      const double beta_next = norm(av.span());

      // Column k of the tridiagonal is (beta, alpha, beta_next) in rows k-1..k+1.
      const double eps = s2 * beta;
      const double tmp = c2 * beta;
      const double delta = c1 * tmp + s1 * alpha;
      const double gbar = -s1 * tmp + c1 * alpha;
      const double gamma = std::hypot(gbar, beta_next);
      sol.iters = k;
      if (gamma == 0.0) {
        fallback = SolverStatus::breakdown;
        break;
      }
      const double c = gbar / gamma;
      const double s = beta_next / gamma;
      const double t = c * phibar;
      phibar = -s * phibar;

      w_prev2 = std::move(w_prev);
      w_prev = std::move(w);
      w = Vector(n);
      for (std::size_t i = 0; i < n; ++i)
        w[i] = (v[i] - delta * w_prev[i] - eps * w_prev2[i]) / gamma;
      for (std::size_t i = 0; i < n; ++i) sol.x[i] += t * w[i];
      if (!all_finite(sol.x.span())) {
        fallback = SolverStatus::breakdown;
        break;
      }
      sol.residual_history.push_back(std::abs(phibar));

      c2 = c1;
      s2 = s1;
      c1 = c;
      s1 = s;
      if (std::abs(phibar) <= cfg.rtol * beta1) break;
      if (beta_next <= cfg.breakdown_tol * std::max(std::abs(alpha), beta)) break;  // invariant subspace

      v_prev = std::move(v);
      v = (1.0 / beta_next) * av;
      beta = beta_next;
    }
  } catch (const NumericalError&) {
    fallback = SolverStatus::breakdown;
  }
  sol.estimated_residual_norm = std::abs(phibar);
  return detail::finish(op, b, std::move(sol), cfg.rtol, fallback);
}

/// Condition-number estimate above which MINRES-QLP switches from MINRES
/// updates to QLP updates.
inline constexpr double kTransferCondition = 1e7;
/// Iteration stops once the condition estimate of the tridiagonal reaches this.
inline constexpr double kConditionLimit = 1e15;

/// See minres_qlp.
inline constexpr double kInconsistencyRatio = 1e-2;

namespace detail {

// One MINRES-QLP pass. The iterate for an inconsistent system is accurate
// only to O(|B r| / sigma_min^2); minres_qlp refines it.
inline KrylovSolution qlp_pass(const LinearOperator& op, const Vector& b,
                               const SolverConfig& cfg, double* norm_estimate = nullptr) {
  cfg.validate();
  check_length("minres_qlp", op.dim(), b.size());
  const std::size_t n = op.dim();
  const std::size_t cap = cfg.iteration_cap(n);
  const double rtol = cfg.rtol;

  KrylovSolution sol;
  sol.x = Vector(n);
  Vector& x = sol.x;
  const double beta1 = norm(b.span());
  if (beta1 == 0.0) {
    sol.status = SolverStatus::converged;
    return sol;
  }

  enum class Exit { running, residual, least_squares, rank_drop, condition, cap, eigvec, breakdown };
  Exit exit = Exit::running;

  // Lanczos state: r1, r2 hold the previous and current unnormalized vectors.
  Vector r1(n), r2 = b, r3 = b, v(n);
  double beta = 0.0, betan = beta1, betal = 0.0;

  // Left reflections Q_k.
  double cs = -1.0, sn = 0.0;
  double dltan = 0.0, eplnn = 0.0;
  double tau = 0.0, taul = 0.0, taul2 = 0.0;
  double phi = beta1;

  // Right reflections P_{k-2,k} (cr2, sr2) and P_{k-1,k} (cr1, sr1).
  double cr1 = -1.0, sr1 = 0.0, cr2 = -1.0, sr2 = 0.0;
  double gama = 0.0, gamal = 0.0, gamal2 = 0.0, gamal3 = 0.0;
  double eta = 0.0, etal = 0.0, etal2 = 0.0;
  double vepln = 0.0, veplnl = 0.0, veplnl2 = 0.0;
  double u = 0.0, ul = 0.0, ul2 = 0.0, ul3 = 0.0, ul4 = 0.0;

  // Saved at the end of each iteration for the MINRES -> QLP transfer.
  double gama_qlp = 0.0, gamal_qlp = 0.0, vepln_qlp = 0.0, u_qlp = 0.0, ul_qlp = 0.0;

  double anorm = 0.0, acond = 1.0, gmin = 0.0, gminl = 0.0, gminl2 = 0.0;
  double rnorm = beta1;
  std::size_t qlp_iter = 0;

  Vector w(n), wl(n), wl2(n), xl2(n);
  std::vector<Vector> basis;

  try {
    std::size_t iter = 0;
    while (exit == Exit::running && iter < cap) {
      ++iter;
      // Lanczos step.
      betal = beta;
      beta = betan;
      for (std::size_t i = 0; i < n; ++i) v[i] = r3[i] / beta;
      r3 = op.apply(v);
      if (iter > 1)
        for (std::size_t i = 0; i < n; ++i) r3[i] -= (beta / betal) * r1[i];
      const double alfa = dot(r3.span(), v.span());
      for (std::size_t i = 0; i < n; ++i) r3[i] -= (alfa / beta) * r2[i];
      if (cfg.reorthogonalize) {
        basis.push_back(v);
        detail::orthogonalize(basis, r3);
      }
      std::swap(r1, r2);
      r2 = r3;
      betan = norm(r3.span());
      sol.iters = iter;

      if (iter == 1 && betan <= cfg.breakdown_tol * std::abs(alfa)) {
        // b is an eigenvector.
        if (alfa == 0.0) {
          exit = Exit::rank_drop;
        } else {
          x = (1.0 / alfa) * b;
          rnorm = 0.0;
          exit = Exit::eigvec;
        }
        sol.residual_history.push_back(rnorm);
        break;
      }
      // Norm of column k of T_{k+1,k}: (beta_k, alpha_k, beta_{k+1}).
      const double pnorm = detail::hypot3(iter > 1 ? beta : 0.0, alfa, betan);

      // Previous left reflection Q_{k-1}.
      const double dbar = dltan;
      double dlta = cs * dbar + sn * alfa;
      const double epln = eplnn;
      const double gbar = sn * dbar - cs * alfa;
      eplnn = sn * betan;
      dltan = -cs * betan;
      const double dlta_qlp = dlta;

      // Current left reflection Q_k.
      gamal3 = gamal2;
      gamal2 = gamal;
      gamal = gama;
      {
        const auto q = detail::sym_givens(gbar, betan);
        cs = q.c;
        sn = q.s;
        gama = q.r;
      }
      const double gama_tmp = gama;
      taul2 = taul;
      taul = tau;
      tau = cs * phi;
      phi = sn * phi;

      // Previous right reflection P_{k-2,k}.
      if (iter > 2) {
        veplnl2 = veplnl;
        etal2 = etal;
        etal = eta;
        const double dlta_tmp = sr2 * vepln - cr2 * dlta;
        veplnl = cr2 * vepln + sr2 * dlta;
        dlta = dlta_tmp;
        eta = sr2 * gama;
        gama = -cr2 * gama;
      }
      // Current right reflection P_{k-1,k}.
      if (iter > 1) {
        const auto p = detail::sym_givens(gamal, dlta);
        cr1 = p.c;
        sr1 = p.s;
        gamal = p.r;
        vepln = sr1 * gama;
        gama = -cr1 * gama;
      }

      // Solution coefficients u (last three entries of L u = tau).
      ul4 = ul3;
      ul3 = ul2;
      if (iter > 2) ul2 = (taul2 - etal2 * ul4 - veplnl2 * ul3) / gamal2;
      if (iter > 1) ul = (taul - etal * ul3 - veplnl * ul2) / gamal;
      anorm = std::max({anorm, pnorm, std::abs(gamal), std::abs(gama)});
      bool dropped = false;
      if (std::abs(gama) > cfg.breakdown_tol * anorm) {
        u = (tau - eta * ul2 - vepln * ul) / gama;
      } else {
        u = 0.0;
        dropped = true;
      }

      if (acond < kTransferCondition && !dropped && qlp_iter == 0) {
        // MINRES update.
        std::swap(wl2, wl);
        std::swap(wl, w);
        for (std::size_t i = 0; i < n; ++i)
          w[i] = (v[i] - epln * wl2[i] - dlta_qlp * wl[i]) / gama_tmp;
        for (std::size_t i = 0; i < n; ++i) x[i] += tau * w[i];
      } else {
        // QLP update.
        ++qlp_iter;
        if (qlp_iter == 1) {
          std::fill(xl2.begin(), xl2.end(), 0.0);
          if (iter > 1) {
            // Rebuild w_{k-3}, w_{k-2}, w_{k-1} in the QLP basis.
            if (iter > 3)
              for (std::size_t i = 0; i < n; ++i)
                wl2[i] = gamal3 * wl2[i] + veplnl2 * wl[i] + etal * w[i];
            if (iter > 2)
              for (std::size_t i = 0; i < n; ++i) wl[i] = gamal_qlp * wl[i] + vepln_qlp * w[i];
            for (std::size_t i = 0; i < n; ++i) w[i] *= gama_qlp;
            for (std::size_t i = 0; i < n; ++i) xl2[i] = x[i] - wl[i] * ul_qlp - w[i] * u_qlp;
          }
        }
        if (iter == 1) {
          wl2 = wl;
          for (std::size_t i = 0; i < n; ++i) {
            wl[i] = v[i] * sr1;
            w[i] = -v[i] * cr1;
          }
        } else if (iter == 2) {
          wl2 = wl;
          for (std::size_t i = 0; i < n; ++i) {
            const double wi = w[i];
            wl[i] = wi * cr1 + v[i] * sr1;
            w[i] = wi * sr1 - v[i] * cr1;
          }
        } else {
          for (std::size_t i = 0; i < n; ++i) {
            const double a = wl[i];  // old w_{k-2}
            const double c = w[i];   // old w_{k-1}
            const double wnew = a * sr2 - v[i] * cr2;
            const double wl2new = a * cr2 + v[i] * sr2;
            wl2[i] = wl2new;
            wl[i] = c * cr1 + wnew * sr1;
            w[i] = c * sr1 - wnew * cr1;
          }
        }
        for (std::size_t i = 0; i < n; ++i) {
          xl2[i] += wl2[i] * ul2;
          x[i] = xl2[i] + wl[i] * ul + w[i] * u;
        }
      }
      if (!all_finite(x.span())) {
        exit = Exit::breakdown;
        break;
      }

      // Next right reflection P_{k-1,k+1}.
      const double gamal_tmp = gamal;
      {
        const auto p = detail::sym_givens(gamal, eplnn);
        cr2 = p.c;
        sr2 = p.s;
        gamal = p.r;
      }
      gamal_qlp = gamal_tmp;
      vepln_qlp = vepln;
      gama_qlp = gama;
      ul_qlp = ul;
      u_qlp = u;

      // Norm and condition estimates.
      const double abs_gama = std::abs(gama);
      anorm = std::max({anorm, pnorm, std::abs(gamal), abs_gama});
      if (iter == 1) {
        gmin = gama;
        gminl = gmin;
      } else {
        gminl2 = gminl;
        gminl = gmin;
        gmin = std::min({gminl2, std::abs(gamal), abs_gama});
      }
      acond = anorm / std::abs(gmin);
      if (!dropped) rnorm = std::abs(phi);
      sol.residual_history.push_back(rnorm);
      const double root = std::hypot(gbar, dltan);  // |B r_{k-1}| / |r_{k-1}|
      const double rel_ares = root / anorm;

      if (rnorm <= rtol * beta1) exit = Exit::residual;
      else if (rel_ares <= rtol) exit = Exit::least_squares;
      else if (dropped || betan <= cfg.breakdown_tol * anorm) exit = Exit::rank_drop;
      else if (acond >= kConditionLimit) exit = Exit::condition;
    }
    if (exit == Exit::running) exit = Exit::cap;
  } catch (const NumericalError&) {
    exit = Exit::breakdown;
  }

  sol.estimated_residual_norm = rnorm;
  if (norm_estimate) *norm_estimate = anorm;
  SolverStatus fallback = SolverStatus::singular_min_length;
  if (exit == Exit::cap) fallback = SolverStatus::max_iters;
  if (exit == Exit::breakdown) fallback = SolverStatus::breakdown;
  return detail::finish(op, b, std::move(sol), rtol, fallback);
}

}  // namespace detail

/// MINRES-QLP. For singular or inconsistent systems it returns the
/// minimum-length least-squares solution; the status then reads
/// singular_min_length unless |b - Bx| <= rtol |b| anyway.
///
/// Directions whose QLP diagonal |gamma| falls below breakdown_tol * est|B|
/// are treated as numerically null and excluded from x.
///
/// An inconsistent system is re-solved as two consistent ones: B y = B b
/// gives the range part y of b, then B x = y gives x. Both right-hand sides
/// lie in range(B), so the Krylov iterates never pick up null components.
/// The system counts as inconsistent when the first residual r is nearly
/// null, |B r| <= kInconsistencyRatio est|B| |r|; a residual left by a
/// nonsingular solve at its rounding floor is not.
inline KrylovSolution minres_qlp(const LinearOperator& op, const Vector& b,
                                 const SolverConfig& cfg = {}) {
  cfg.validate();
  check_length("minres_qlp", op.dim(), b.size());
  double anorm = 0.0;
  KrylovSolution first = detail::qlp_pass(op, b, cfg, &anorm);
  if (first.status != SolverStatus::singular_min_length) return first;

  try {
    const Vector r = b - op.apply(first.x);
    if (norm(op.apply(r).span()) > kInconsistencyRatio * anorm * norm(r.span())) return first;
    const KrylovSolution range_part = detail::qlp_pass(op, op.apply(b), cfg);
    if (range_part.status == SolverStatus::breakdown) return first;
    KrylovSolution second = detail::qlp_pass(op, range_part.x, cfg);
    if (second.status == SolverStatus::breakdown) return first;
    second.iters += first.iters + range_part.iters;
    second.residual_history = std::move(first.residual_history);
    return detail::finish(op, b, std::move(second), cfg.rtol, SolverStatus::singular_min_length);
  } catch (const NumericalError&) {
    return first;
  }
}

}  // namespace hardcon
