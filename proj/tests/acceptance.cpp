// Acceptance checks. One PASS/FAIL line per criterion; exit status 1 if any
// selected criterion fails.
//
//   acceptance              all criteria
//   acceptance --criterion N

#include <sys/wait.h>

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "hardcon/benchmarks.hpp"
#include "hardcon/experiment.hpp"
#include "hardcon/kkt.hpp"
#include "hardcon/krylov.hpp"
#include "mlp_oracle.hpp"
#include "support.hpp"

using namespace hardcon;
using testing_support::from_eigen;
using testing_support::gaussian;
using testing_support::rel_error;
using testing_support::to_eigen;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. Krylov conformance.

// B = Q diag(lambda) Q^T with Q from a Householder QR of a Gaussian matrix;
// |lambda| log-spaced between 1/cond and 1 with random signs. The oracle is
// pinv(B) b = Q diag(1/lambda on the range) Q^T b, exact by construction.
Verdict criterion_1() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(20240601);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_tight = 0.0, worst_loose = 0.0;
  int n_deficient = 0, n_high_cond = 0, n_fail = 0;
  std::string first_fail;
  for (int t = 0; t < 200; ++t) {
    const int n = 2 + static_cast<int>(u(rng) * 199.0);
    // Three families: inconsistent rank-deficient (cond <= 1e6), consistent
    // rank-deficient and full rank (cond <= 1e10).
    const int family = t % 3;
    const double max_log = family == 0 ? 6.0 : 10.0;
    const double lc = (t % 9 == 2 || t % 9 == 4) ? 8.0 + 2.0 * u(rng) : u(rng) * max_log;
    const double log_cond = std::min(lc, max_log);
    const int rank = family == 2 ? n : std::max(1, static_cast<int>(std::floor(n * (0.3 + 0.6 * u(rng)))));
    const bool rank_deficient = rank < n;

    const Eigen::MatrixXd m = Eigen::MatrixXd::NullaryExpr(n, n, [&] { return g(rng); });
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(m).householderQ();
    Eigen::VectorXd lam = Eigen::VectorXd::Zero(n);
    for (int i = 0; i < rank; ++i) {
      const double e = i == 0 ? 0.0 : (i == rank - 1 ? log_cond : u(rng) * log_cond);
      lam(i) = std::pow(10.0, -e) * (u(rng) < 0.5 ? -1.0 : 1.0);
    }
    Eigen::VectorXd coeff = Eigen::VectorXd::NullaryExpr(n, [&] { return g(rng); });
    if (family == 1) coeff.tail(n - rank).setZero();
    const Eigen::VectorXd b = q * coeff;
    Eigen::VectorXd inv = Eigen::VectorXd::Zero(n);
    for (int i = 0; i < rank; ++i) inv(i) = 1.0 / lam(i);
    const Eigen::VectorXd want = q * inv.asDiagonal() * coeff;

    const Eigen::MatrixXd bm = q * lam.asDiagonal() * q.transpose();
    const LinearOperator op(static_cast<std::size_t>(n), [&bm](const Vector& v) {
      return from_eigen(Eigen::VectorXd(bm * to_eigen(v)));
    });
    SolverConfig cfg;
    cfg.rtol = 1e-14;
    cfg.reorthogonalize = true;
    const KrylovSolution s = minres_qlp(op, from_eigen(b), cfg);
    const double err = (to_eigen(s.x) - want).norm() / want.norm();

    const bool tight = log_cond <= 6.0;
    const double bound = tight ? 1e-8 : 1e-6;
    (tight ? worst_tight : worst_loose) = std::max(tight ? worst_tight : worst_loose, err);
    n_deficient += rank_deficient;
    n_high_cond += log_cond >= 8.0;
    if (!(err <= bound)) {
      if (n_fail++ == 0)
        first_fail = fmt("; first failure: system %d n=%d rank=%d cond=%.1e err=%.2e", t, n, rank,
                         std::pow(10.0, log_cond), err);
    }
  }
  const double secs = seconds_since(t0);
  Verdict v;
  v.pass = n_fail == 0 && secs < 30.0 && n_deficient > 0 && n_high_cond > 0;
  v.detail = fmt(
      "200 systems (%d rank-deficient, %d with cond >= 1e8); worst rel err %.2e at cond <= 1e6 (bound 1e-8), "
      "%.2e above (bound 1e-6); %d failures; %.1f s (bound 30 s)",
      n_deficient, n_high_cond, worst_tight, worst_loose, n_fail, secs) + first_fail;
  return v;
}

// ---------------------------------------------------------------------------
// 2. Differentiation exactness.

// True when no hidden pre-activation changes sign or touches zero across the
// stencil w - h v, w, w + h v on any input, so the network is smooth there.
bool stencil_is_smooth(const std::vector<std::size_t>& widths, const std::vector<std::vector<double>>& xs,
                       const Vector& w, const Vector& v, double h) {
  std::vector<std::vector<double>> pre;
  for (double t : {-h, 0.0, h}) {
    std::vector<double> wt(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) wt[i] = w[i] + t * v[i];
    std::vector<double> all;
    for (const auto& x : xs) {
      const auto e = testing_support::oracle_forward(widths, x, wt).pre;
      all.insert(all.end(), e.begin(), e.end());
    }
    pre.push_back(std::move(all));
  }
  for (std::size_t i = 0; i < pre[0].size(); ++i) {
    if (pre[0][i] == 0.0 || pre[1][i] == 0.0 || pre[2][i] == 0.0) return false;
    if ((pre[0][i] > 0) != (pre[1][i] > 0) || (pre[1][i] > 0) != (pre[2][i] > 0)) return false;
  }
  return true;
}

Verdict criterion_2() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(424242);
  const double h = 1e-5;
  double worst_grad = 0.0, worst_rop = 0.0, worst_lop = 0.0, worst_adj = 0.0;
  int redraws = 0, trials = 0;
  while (trials < 1000) {
    const MlpSpec spec = testing_support::random_mlp_spec(rng, 8, 3, 64, 8);
    const Mlp mlp(spec);
    const Model model = mlp.model();
    std::vector<std::vector<double>> xs;
    for (int k = 0; k < 2; ++k) xs.push_back(gaussian(spec.n_inputs(), rng).values());
    const Vector w = mlp.init(rng()) + gaussian(mlp.n_params(), rng, 0.1);
    const Vector v = testing_support::unit_gaussian(w.size(), rng);
    if (!stencil_is_smooth(spec.widths, xs, w, v, h)) {
      ++redraws;
      continue;
    }
    const std::size_t n_out = spec.n_outputs() * xs.size();
    const DiffFunction f = DiffFunction::from_program(
        model.n_params, n_out,
        [model, xs]<class T>(std::span<const T> p) {
          std::vector<T> y;
          for (const auto& x : xs) {
            const std::vector<T> o = model(std::span<const double>(x), p);
            y.insert(y.end(), o.begin(), o.end());
          }
          return y;
        },
        "stacked outputs");
    const std::vector<double> target = gaussian(n_out, rng).values();
    const DiffFunction loss = DiffFunction::from_program(
        model.n_params, 1,
        [f, target]<class T>(std::span<const T> p) {
          const std::vector<T> y = f.program().get<T>()(p);
          T s = 0.0;
          for (std::size_t i = 0; i < y.size(); ++i) {
            const T d = y[i] - target[i];
            s += d * d;
          }
          return std::vector<T>{s * 0.5};
        },
        "squared loss");
    const Vector u = gaussian(n_out, rng);

    const Vector fp = value(f, w + h * v), fm = value(f, w - h * v);
    const Vector fd = (1.0 / (2.0 * h)) * (fp - fm);
    const double fd_loss = (value(loss, w + h * v)[0] - value(loss, w - h * v)[0]) / (2.0 * h);
    const Vector jv = rop(f, w, v);
    const Vector jtu = lop(f, w, u);

    worst_grad = std::max(worst_grad, rel_error(dot(gradient(loss, w).span(), v.span()), fd_loss));
    worst_rop = std::max(worst_rop, rel_error(jv, fd));
    worst_lop = std::max(worst_lop, rel_error(dot(jtu.span(), v.span()), dot(u.span(), fd.span())));
    worst_adj = std::max(worst_adj, rel_error(dot(u.span(), jv.span()), dot(jtu.span(), v.span())));
    ++trials;
  }
  const double secs = seconds_since(t0);
  Verdict r;
  r.pass = worst_grad <= 1e-5 && worst_rop <= 1e-5 && worst_lop <= 1e-5 && worst_adj <= 1e-10 && secs < 60.0;
  r.detail = fmt(
      "1000 random MLPs (<= 3 hidden layers, width <= 64; %d stencils redrawn across a ReLU kink); worst rel err "
      "gradient %.2e, rop %.2e, lop %.2e (bound 1e-5), adjoint %.2e (bound 1e-10); %.1f s (bound 60 s)",
      redraws, worst_grad, worst_rop, worst_lop, worst_adj, secs);
  return r;
}

// ---------------------------------------------------------------------------
// 3. KKT structural equivalence.

// C(w) = A w + B (w o w) - c has Jacobian A + 2 B diag(w); same form for r.
struct QuadMap {
  Eigen::MatrixXd a, b;
  Eigen::VectorXd c;

  DiffFunction fn() const {
    const QuadMap m = *this;
    return DiffFunction::from_program(
        static_cast<std::size_t>(a.cols()), static_cast<std::size_t>(a.rows()),
        [m]<class T>(std::span<const T> w) {
          std::vector<T> out;
          for (Eigen::Index i = 0; i < m.a.rows(); ++i) {
            T s = -m.c(i);
            for (Eigen::Index j = 0; j < m.a.cols(); ++j) {
              const T& x = w[static_cast<std::size_t>(j)];
              s += x * m.a(i, j) + x * x * m.b(i, j);
            }
            out.push_back(s);
          }
          return out;
        },
        "quadratic map");
  }

  Eigen::MatrixXd jacobian(const Eigen::VectorXd& w) const { return a + 2.0 * b * w.asDiagonal(); }
};

QuadMap random_quad(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  auto mat = [&](Eigen::Index r, Eigen::Index c) { return Eigen::MatrixXd::NullaryExpr(r, c, [&] { return g(rng); }); };
  return {mat(rows, cols), 0.3 * mat(rows, cols), mat(rows, 1)};
}

Verdict criterion_3() {
  std::mt19937_64 rng(31337);
  std::uniform_int_distribution<int> np(1, 50), na(0, 10), nr(1, 30);
  double worst[3] = {0, 0, 0};
  const KktVariant variants[3] = {KktVariant::sgd, KktVariant::gauss_newton, KktVariant::adam};
  int cases = 0;
  for (int t = 0; t < 60; ++t) {
    const int n = t < 3 ? 50 : np(rng);
    const int m = t < 3 ? 10 : na(rng);
    const KktVariant var = variants[t % 3];
    const Eigen::VectorXd w = Eigen::VectorXd::NullaryExpr(n, [&] { return std::normal_distribution<double>()(rng); });
    KktState s;
    s.w = from_eigen(w);
    s.variant = var;
    s.damping = std::exp(std::uniform_real_distribution<double>(-3, 3)(rng));
    Eigen::MatrixXd jc(0, n);
    if (m > 0) {
      const QuadMap c = random_quad(m, n, rng);
      s.constraints = c.fn().linearize(s.w);
      jc = c.jacobian(w);
    }
    Eigen::MatrixXd tl;
    switch (var) {
      case KktVariant::sgd:
        s.risk_grad = gaussian(static_cast<std::size_t>(n), rng);
        tl = s.damping * Eigen::MatrixXd::Identity(n, n);
        break;
      case KktVariant::gauss_newton: {
        const QuadMap r = random_quad(nr(rng), n, rng);
        s.residuals = r.fn().linearize(s.w);
        const Eigen::MatrixXd jr = r.jacobian(w);
        tl = jr.transpose() * jr + s.damping * Eigen::MatrixXd::Identity(n, n);
        break;
      }
      case KktVariant::adam: {
        AdamState a = AdamState::zeros(static_cast<std::size_t>(n));
        const int steps = 1 + t % 7;
        for (int k = 0; k < steps; ++k) a = a.advanced(gaussian(static_cast<std::size_t>(n), rng));
        s.adam = a;
        const double f = std::sqrt(1.0 - std::pow(0.999, steps)) / (1.0 - std::pow(0.9, steps));
        Eigen::VectorXd d(n);
        for (int i = 0; i < n; ++i) d(i) = s.damping * f * (std::sqrt(a.v[static_cast<std::size_t>(i)]) + 1e-8);
        tl = d.asDiagonal();
        break;
      }
    }
    Eigen::MatrixXd want = Eigen::MatrixXd::Zero(n + m, n + m);
    want.topLeftCorner(n, n) = tl;
    want.topRightCorner(n, m) = jc.transpose();
    want.bottomLeftCorner(m, n) = jc;
    const Eigen::MatrixXd got = to_eigen(materialize(kkt_operator(s)));
    double& wv = worst[t % 3];
    wv = std::max(wv, (got - want).cwiseAbs().maxCoeff());
    ++cases;
  }
  Verdict v;
  v.pass = worst[0] <= 1e-12 && worst[1] <= 1e-12 && worst[2] <= 1e-12;
  v.detail = fmt("%d systems, N_P <= 50, n_active <= 10; max entrywise deviation sgd %.2e, gn %.2e, adam %.2e "
                 "(bound 1e-12)",
                 cases, worst[0], worst[1], worst[2]);
  return v;
}

// ---------------------------------------------------------------------------
// 4. Hard-constraint exactness on linear constraints.

Verdict criterion_4() {
  std::mt19937_64 rng(4);
  double worst = 0.0;
  bool all_converged = true;
  for (int t = 0; t < 20; ++t) {
    const Eigen::Index n = 20;
    const Eigen::MatrixXd a = Eigen::MatrixXd::NullaryExpr(5, n, [&] { return std::normal_distribution<double>()(rng); });
    const Eigen::VectorXd b = Eigen::VectorXd::NullaryExpr(5, [&] { return std::normal_distribution<double>()(rng); });
    const Eigen::VectorXd target = Eigen::VectorXd::NullaryExpr(n, [&] { return std::normal_distribution<double>()(rng); });
    const testing_support::LinearProblem p(target, a, b);
    TrainConfig cfg;
    cfg.method = Method::hard_sgd;
    cfg.lr = 0.1;
    cfg.solver.rtol = 1e-14;
    AdamState adam = AdamState::zeros(static_cast<std::size_t>(n));
    const Vector w0 = gaussian(static_cast<std::size_t>(n), rng, 3.0);
    const HardStep h = step_hard(Method::hard_sgd, p, w0, {}, ActiveSet::all_of({0}, 5), cfg, adam);
    all_converged = all_converged && h.diagnostics.status == SolverStatus::converged && h.diagnostics.accepted;
    worst = std::max(worst, (a * to_eigen(h.w) - b).cwiseAbs().maxCoeff());
  }
  Verdict v;
  v.pass = all_converged && worst <= 1e-9;
  v.detail = fmt("20 problems, 20 parameters, 5 linear constraints, one Hard-SGD step each; inner solves %s; "
                 "max |C| after the step %.2e (bound 1e-9)",
                 all_converged ? "all converged" : "NOT all converged", worst);
  return v;
}

// ---------------------------------------------------------------------------
// 5. Fixed-set convergence on two circles.

Verdict criterion_5() {
  SphereProblem sp;
  sp.d = 2;
  sp.radius = 10.0;
  sp.centers = std::make_shared<std::vector<Vector>>(std::vector<Vector>{Vector{0, 0}, Vector{1, 0}});
  const Vector starts[] = {Vector{3, 20}, Vector{-4, -15}, Vector{0.2, 1}, Vector{12, 0.5}};
  double worst = 0.0;
  std::string per;
  for (const Vector& x0 : starts) {
    sp.x0 = x0;
    const SphereTraining prob(sp);
    TrainConfig cfg;
    cfg.method = Method::hard_sgd;
    cfg.lr = 1.0;
    cfg.epochs = 200;
    cfg.mining = true;
    cfg.mined_batch = 2;
    const TrainReport r = train(cfg, prob, x0);
    const Vector& w = r.final_params;
    const double y = std::sqrt(99.75);
    const double err = std::min(norm((w - Vector{0.5, y}).span()), norm((w - Vector{0.5, -y}).span()));
    worst = std::max(worst, err);
    per += fmt(" (%.3g, %.3g) -> (%.9f, %.9f);", x0[0], x0[1], w[0], w[1]);
  }
  Verdict v;
  v.pass = worst <= 1e-4;
  v.detail = fmt("200 Hard-SGD iterations, both circles active;%s worst distance to (0.5, +-sqrt(99.75)) %.2e "
                 "(bound 1e-4)",
                 per.c_str(), worst);
  return v;
}

// ---------------------------------------------------------------------------
// 6. Sphere comparison.

std::vector<TrainRow> with_initial(const TrainReport& r) {
  std::vector<TrainRow> rows{TrainRow{}};
  rows[0].metrics = r.initial;
  rows.insert(rows.end(), r.rows.begin(), r.rows.end());
  return rows;
}

Verdict criterion_6() {
  const auto t0 = Clock::now();
  const std::size_t d = 10000, iters = 500, n_active = 20;
  const std::uint64_t heldout = 1000;
  const double soft_lr = tune_soft_lr(d, iters, n_active, heldout, default_soft_lr_grid());
  SphereSettings settings;
  settings.soft_lr = soft_lr;
  int a_ok = 0, b_ok = 0, c_ok = 0;
  std::size_t degraded = 0, total = 0;
  std::string per;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const SpherePair pr = run_sphere_comparison(d, iters, n_active, seed, settings);
    const Comparison c = compare_traces(with_initial(pr.hard), with_initial(pr.soft));
    const bool a = c.b.final_violation <= c.a.final_violation;
    const bool b = c.b.delta_std < c.a.delta_std;
    const bool cc = c.a.degradation_fraction >= 0.10;
    a_ok += a;
    b_ok += b;
    c_ok += cc;
    for (const TrainRow& r : pr.hard.rows) degraded += r.active_delta > 0.0;
    total += pr.hard.rows.size();
    per += fmt(" seed %d: final hard %.3g soft %.3g, delta std hard %.3g soft %.3g, hard degradation %.1f%%;",
               static_cast<int>(seed), c.a.final_violation, c.b.final_violation, c.a.delta_std, c.b.delta_std,
               100.0 * c.a.degradation_fraction);
  }
  const double secs = seconds_since(t0);
  Verdict v;
  v.pass = a_ok >= 4 && b_ok >= 4 && c_ok >= 4 && secs < 600.0;
  v.detail = fmt("d=1e4, 200 spheres, 20 active, 500 iterations, soft lr %g tuned on held-out seed %d;",
                 soft_lr, static_cast<int>(heldout)) +
             per +
             fmt(" (a) soft final <= hard in %d/5, (b) soft smoother over iterations 100-500 in %d/5, (c) hard "
                 ">= 10%% degradation in %d/5 (pooled %.1f%%); quorum 4/5; %.0f s (bound 600 s)",
                 a_ok, b_ok, c_ok, 100.0 * static_cast<double>(degraded) / static_cast<double>(total), secs);
  return v;
}

// ---------------------------------------------------------------------------
// 7. Toy pose end to end.

Verdict criterion_7() {
  const auto t0 = Clock::now();
  const Method methods[3] = {Method::soft_adam, Method::soft_sgd, Method::hard_sgd};
  double base_err = 0.0, base_viol = 0.0;
  double err[3] = {0, 0, 0}, viol[3] = {0, 0, 0};
  const std::uint64_t seeds[3] = {11, 12, 13};
  for (std::uint64_t seed : seeds) {
    const ToyPoseProblem prob(seed);
    TrainConfig base;
    base.method = Method::soft_adam;
    base.lr = 1e-3;
    base.lambda = 0.0;
    base.epochs = 30;
    base.seed = seed;
    base.keep_best = true;
    const TrainReport rb = train(base, prob, prob.initial_params());
    const Metrics mb = prob.metrics(rb.best_params);
    base_err += mb.pred_error / 3.0;
    base_viol += mb.median_violation / 3.0;
    for (int i = 0; i < 3; ++i) {
      TrainConfig c;
      c.method = methods[i];
      c.lambda = 1.0;
      c.epochs = 10;
      c.seed = seed;
      switch (methods[i]) {
        case Method::soft_adam: c.lr = 1e-3; break;
        case Method::soft_sgd: c.lr = 1e-4; break;
        default:
          c.lr = 1.0;
          c.mining = true;
          c.mined_batch = 16;
      }
      const TrainReport r = train(c, prob, rb.best_params);
      const Metrics& m = r.rows.back().metrics;
      err[i] += m.pred_error / 3.0;
      viol[i] += m.median_violation / 3.0;
    }
  }
  const double secs = seconds_since(t0);
  bool ok = secs < 900.0;
  std::string per;
  for (int i = 0; i < 3; ++i) {
    const double reduction = base_viol / viol[i];
    const double err_ratio = err[i] / base_err;
    ok = ok && reduction >= 2.0 && err_ratio <= 1.10;
    per += fmt(" %s: violation %.3g (%.1fx lower), error %.4g (x%.3f);", to_string(methods[i]), viol[i], reduction,
               err[i], err_ratio);
  }
  Verdict v;
  v.pass = ok;
  v.detail = fmt("seeds 11-13, baseline (unconstrained) violation %.3g, error %.4g;", base_viol, base_err) + per +
             fmt(" bounds: >= 2x lower violation, error <= 1.1x baseline; %.0f s (bound 900 s)", secs);
  return v;
}

// ---------------------------------------------------------------------------
// 8. Mining optimality.

Verdict criterion_8() {
  std::mt19937_64 rng(8);
  const Mlp mlp(MlpSpec{{4, 12, kPoseSize}});
  const Model model = mlp.model();
  int subsets = 0, mismatches = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + static_cast<std::size_t>(rng() % 12);
    std::vector<Vector> xs;
    for (std::size_t k = 0; k < n; ++k) xs.push_back(gaussian(4, rng));
    const ConstraintPool pool(xs, symmetry_family());
    const Vector w = mlp.init(rng()) + gaussian(mlp.n_params(), rng, 0.1);
    // Per-sample medians from the model output and an independent distance loop.
    std::vector<double> med(n);
    const JointIndexTable tab = JointIndexTable::standard();
    for (std::size_t k = 0; k < n; ++k) {
      const Vector y = model.predict(xs[k].span(), w);
      auto dist = [&](std::size_t a, std::size_t b) {
        return (Eigen::Vector3d(y[3 * a], y[3 * a + 1], y[3 * a + 2]) -
                Eigen::Vector3d(y[3 * b], y[3 * b + 1], y[3 * b + 2]))
            .norm();
      };
      std::vector<double> c;
      for (std::size_t j = 0; j < 6; ++j) c.push_back(std::abs(dist(tab(j, 0), tab(j, 1)) - dist(tab(j, 2), tab(j, 3))));
      std::sort(c.begin(), c.end());
      med[k] = 0.5 * (c[2] + c[3]);
    }
    for (std::size_t keep = 1; keep <= n; ++keep) {
      double best = -1.0;
      for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
        if (static_cast<std::size_t>(std::popcount(mask)) != keep) continue;
        double s = 0.0;
        for (std::size_t k = 0; k < n; ++k)
          if (mask >> k & 1u) s += med[k];
        best = std::max(best, s);
      }
      const ActiveSet a = select_mined(pool, model, w, keep);
      double got = 0.0;
      for (std::size_t k : a.sample_indices()) got += med[k];
      ++subsets;
      if (a.sample_indices().size() != keep || std::abs(got - best) > 1e-12 * std::max(1.0, best)) ++mismatches;
    }
  }
  Verdict v;
  v.pass = mismatches == 0;
  v.detail = fmt("100 random pools of 1-12 samples, symmetry constraints on a random MLP; %d (pool, n_keep) cases "
                 "checked against exhaustive subset search; %d mismatches",
                 subsets, mismatches);
  return v;
}

// ---------------------------------------------------------------------------
// 9. Determinism through the command-line runner.

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Verdict criterion_9() {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "hardcon_acceptance_9";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::pair<const char*, const char*> configs[] = {
      {"spheres_paired", "experiment = spheres\ndim = 2000\niterations = 100\n"},
      {"spheres_hard_gn", "experiment = spheres\nmethod = hard_gn\ndim = 500\niterations = 40\nseed = 5\n"},
      {"toy_pose_hard", "experiment = toy_pose\nmethod = hard_sgd\nlr = 1\nepochs = 1\nmining = true\n"
                        "n_samples = 200\npretrain_epochs = 2\nseed = 3\n"},
      {"toy_pose_soft", "experiment = toy_pose\nmethod = soft_adam\nepochs = 2\nn_samples = 300\nseed = 4\n"},
      {"solve_check", "experiment = solve_check\ndim = 60\nrank = 45\nconsistent = false\ncond = 1e6\n"},
  };
  int identical = 0, files = 0, failures = 0;
  std::string problems;
  for (const auto& [name, text] : configs) {
    const fs::path cfg = dir / (std::string(name) + ".cfg");
    std::ofstream(cfg) << text;
    for (const char* run : {"a", "b"}) {
      const std::string cmd = std::string(HARDCON_CLI_PATH) + " run " + cfg.string() + " --out-dir " +
                              (dir / name / run).string() + " 2>/dev/null";
      const int status = std::system(cmd.c_str());
      if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
        ++failures;
        problems += fmt(" %s run %s exited %d;", name, run, WIFEXITED(status) ? WEXITSTATUS(status) : -1);
      }
    }
    for (const auto& entry : fs::directory_iterator(dir / name / "a")) {
      const std::string fname = entry.path().filename().string();
      if (fname.rfind("metrics", 0) != 0) continue;
      ++files;
      const std::string a = slurp(entry.path()), b = slurp(dir / name / "b" / fname);
      if (!a.empty() && a == b) {
        ++identical;
      } else {
        problems += fmt(" %s/%s differs;", name, fname.c_str());
      }
    }
  }
  fs::remove_all(dir);
  Verdict v;
  v.pass = failures == 0 && files > 0 && identical == files;
  v.detail = fmt("%d experiments run twice each through the runner; %d/%d metrics files byte-identical", 5,
                 identical, files) +
             problems;
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria = {
      {"krylov conformance", criterion_1},
      {"differentiation exactness", criterion_2},
      {"kkt structural equivalence", criterion_3},
      {"hard-constraint exactness", criterion_4},
      {"fixed-set convergence", criterion_5},
      {"sphere comparison", criterion_6},
      {"toy pose end to end", criterion_7},
      {"mining optimality", criterion_8},
      {"determinism", criterion_9},
  };
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--criterion" && i + 1 < argc) {
      only = std::atoi(argv[++i]);
    } else {
      std::fprintf(stderr, "usage: %s [--criterion N]\n", argv[0]);
      return 2;
    }
  }
  if (only < 0 || only > static_cast<int>(criteria.size())) {
    std::fprintf(stderr, "criterion must be in 1..%zu\n", criteria.size());
    return 2;
  }
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only != 0 && static_cast<int>(i) + 1 != only) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("exception: ") + e.what();
    }
    std::printf("criterion %zu (%s): %s: %s\n", i + 1, criteria[i].first, v.pass ? "PASS" : "FAIL", v.detail.c_str());
    std::fflush(stdout);
    all = all && v.pass;
  }
  return all ? 0 : 1;
}
