#pragma once

// Problem generators and metrics: the hypersphere intersection problem and a
// synthetic 17-joint pose regression task with bone-length symmetry.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hardcon/autodiff.hpp"
#include "hardcon/constraints.hpp"
#include "hardcon/linops.hpp"
#include "hardcon/mlp.hpp"
#include "hardcon/trainers.hpp"

namespace hardcon {

// ---------------------------------------------------------------------------
// Metrics.

/// Mean over samples of the mean per-joint Euclidean distance.
inline double prediction_error(const std::vector<Vector>& preds, const std::vector<Vector>& truths) {
  check_length("prediction_error: sample count", truths.size(), preds.size());
  if (preds.empty()) throw std::invalid_argument("prediction_error: no samples");
  double total = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    check_length("prediction_error: pose", kPoseSize, preds[i].size());
    check_length("prediction_error: pose", kPoseSize, truths[i].size());
    double s = 0.0;
    for (std::size_t m = 0; m < joint::count; ++m) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        const double d = preds[i][3 * m + c] - truths[i][3 * m + c];
        d2 += d * d;
      }
      s += std::sqrt(d2);
    }
    total += s / static_cast<double>(joint::count);
  }
  return total / static_cast<double>(preds.size());
}

inline double median_violation(const Vector& residuals) {
  if (residuals.empty()) throw std::invalid_argument("median_violation: empty input");
  std::vector<double> a(residuals.size());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::abs(residuals[i]);
  return median(std::move(a));
}

/// |pred - truth|^2 / 51
template <class T>
T squared_joint_loss(std::span<const T> pred, std::span<const double> truth) {
  check_length("squared_joint_loss", kPoseSize, pred.size());
  check_length("squared_joint_loss", kPoseSize, truth.size());
  T s = 0.0;
  for (std::size_t i = 0; i < kPoseSize; ++i) {
    const T d = pred[i] - truth[i];
    s += d * d;
  }
  return s / static_cast<double>(kPoseSize);
}

inline double squared_joint_loss(const Vector& pred, const Vector& truth) {
  return squared_joint_loss<double>(pred.span(), truth.span());
}

// ---------------------------------------------------------------------------
// Hyperspheres.

struct SphereProblem {
  std::size_t d = 0;
  Vector x0;
  std::shared_ptr<const std::vector<Vector>> centers;
  double radius = 10.0;
  double center_std = 0.1;
  double soft_lambda = 100.0;
  std::uint64_t seed = 0;

  std::size_t n_constraints() const { return centers->size(); }
};

inline constexpr double kSphereAnchorNorm = 20.0;

/// Centers ~ N(0, 0.01 I); x0 is a random direction scaled to norm 20.
inline SphereProblem gen_spheres(std::size_t d, std::size_t n_constraints, std::uint64_t seed,
                                 double radius = 10.0) {
  if (d < 2) throw std::invalid_argument("gen_spheres: d must be >= 2");
  if (n_constraints < 1) throw std::invalid_argument("gen_spheres: need at least one constraint");
  SphereProblem p;
  p.d = d;
  p.radius = radius;
  p.seed = seed;
  std::mt19937_64 rng = seeded_engine(seed, 0x73706865);
  std::normal_distribution<double> g(0.0, 1.0);
  auto centers = std::make_shared<std::vector<Vector>>();
  centers->reserve(n_constraints);
  for (std::size_t i = 0; i < n_constraints; ++i) {
    Vector c(d);
    for (double& x : c) x = p.center_std * g(rng);
    centers->push_back(std::move(c));
  }
  p.centers = std::move(centers);
  Vector x0(d);
  for (double& x : x0) x = g(rng);
  p.x0 = (kSphereAnchorNorm / norm(x0.span())) * x0;
  return p;
}

namespace detail {

// value |w - x0|^2 / 2, gradient w - x0.
class AnchorRiskLinearization final : public Linearization {
 public:
  AnchorRiskLinearization(const Vector& w, const Vector& x0) : g_(w - x0) {
    const double r = norm(g_.span());
    value_ = Vector{0.5 * r * r};
  }
  std::size_t n_params() const override { return g_.size(); }
  const Vector& value() const override { return value_; }
  Vector rop(const Vector& v) const override { return Vector{dot(g_.span(), v.span())}; }
  Vector lop(const Vector& u) const override {
    check_length("anchor risk lop", 1, u.size());
    return u[0] * g_;
  }

 private:
  Vector g_;
  Vector value_;
};

// r(w) = w - x0, J = I.
class AnchorResidualLinearization final : public Linearization {
 public:
  AnchorResidualLinearization(const Vector& w, const Vector& x0) : value_(w - x0) {}
  std::size_t n_params() const override { return value_.size(); }
  const Vector& value() const override { return value_; }
  Vector rop(const Vector& v) const override { return v; }
  Vector lop(const Vector& u) const override { return u; }

 private:
  Vector value_;
};

}  // namespace detail

/// min |w - x0|^2 / 2 subject to |w - c_i| = radius.
class SphereTraining final : public TrainingProblem {
 public:
  explicit SphereTraining(SphereProblem p) : p_(std::move(p)), kinds_{ConstraintKind::equality} {}

  const SphereProblem& problem() const noexcept { return p_; }
  std::size_t n_params() const override { return p_.d; }
  std::uint64_t layout_hash() const override {
    ParameterLayout l;
    l.add("w", p_.d);
    return l.hash();
  }
  std::size_t n_train() const override { return 0; }
  std::size_t pool_size() const override { return p_.n_constraints(); }
  std::size_t n_constraint_kinds() const override { return 1; }
  const std::vector<ConstraintKind>& constraint_kinds() const override { return kinds_; }

  DiffFunction risk(const std::vector<std::size_t>&) const override {
    const Vector x0 = p_.x0;
    return DiffFunction::analytic(
        p_.d, 1,
        [x0](const Vector& w) {
          const double r = norm((w - x0).span());
          return Vector{0.5 * r * r};
        },
        [x0](const Vector& w) -> std::shared_ptr<const Linearization> {
          return std::make_shared<detail::AnchorRiskLinearization>(w, x0);
        },
        "anchor risk");
  }

  DiffFunction risk_residuals(const std::vector<std::size_t>&) const override {
    const Vector x0 = p_.x0;
    return DiffFunction::analytic(
        p_.d, p_.d, [x0](const Vector& w) { return w - x0; },
        [x0](const Vector& w) -> std::shared_ptr<const Linearization> {
          return std::make_shared<detail::AnchorResidualLinearization>(w, x0);
        },
        "anchor residuals");
  }

  DiffFunction constraints(const ActiveSet& active) const override {
    return hypersphere_function(p_.centers, active.sample_indices(), p_.radius);
  }

  ActiveSet select_mined(const Vector& w, std::size_t n_keep) const override {
    const Vector c = hypersphere_residuals(w, *p_.centers, p_.radius);
    std::vector<double> score(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) score[i] = std::abs(c[i]);
    return ActiveSet::all_of(top_scores(score, n_keep), 1);
  }

  Metrics metrics(const Vector& w) const override {
    Metrics m;
    const double r = norm((w - p_.x0).span());
    m.risk = 0.5 * r * r;
    m.pred_error = r;
    m.median_violation = median_violation(hypersphere_residuals(w, *p_.centers, p_.radius));
    return m;
  }

 private:
  SphereProblem p_;
  std::vector<ConstraintKind> kinds_;
};

struct SphereSettings {
  double hard_lr = 1.0;
  double soft_lr = 1e-4;
  SolverConfig solver;
};

struct SpherePair {
  TrainReport hard;
  TrainReport soft;
};

inline TrainConfig sphere_config(Method method, double lr, double lambda, std::size_t iters,
                                 std::size_t n_active, std::uint64_t seed, const SolverConfig& solver) {
  TrainConfig c;
  c.method = method;
  c.lr = lr;
  c.lambda = lambda;
  c.epochs = iters;
  c.constraint_batch = n_active;
  c.seed = seed;
  c.solver = solver;
  return c;
}

/// Hard (KKT, sgd variant) and soft (plain SGD on the penalty) runs from x0,
/// drawing the same active sets.
inline SpherePair run_sphere_comparison(std::size_t d, std::size_t iters, std::size_t n_active,
                                        std::uint64_t seed, const SphereSettings& s = {},
                                        std::size_t n_constraints = 200) {
  const SphereTraining prob(gen_spheres(d, n_constraints, seed));
  const double lambda = prob.problem().soft_lambda;
  SpherePair out;
  out.hard = train(sphere_config(Method::hard_sgd, s.hard_lr, lambda, iters, n_active, seed, s.solver), prob,
                   prob.problem().x0);
  out.soft = train(sphere_config(Method::soft_sgd, s.soft_lr, lambda, iters, n_active, seed, s.solver), prob,
                   prob.problem().x0);
  return out;
}

inline const std::vector<double>& default_soft_lr_grid() {
  static const std::vector<double> grid{1e-5, 3e-5, 1e-4, 3e-4, 1e-3};
  return grid;
}

/// The grid point with the lowest final median violation of a soft run on
/// heldout_seed; runs that fail numerically are skipped.
inline double tune_soft_lr(std::size_t d, std::size_t iters, std::size_t n_active, std::uint64_t heldout_seed,
                           const std::vector<double>& grid = default_soft_lr_grid(),
                           std::size_t n_constraints = 200) {
  const SphereTraining prob(gen_spheres(d, n_constraints, heldout_seed));
  double best_lr = grid.at(0);
  double best = std::numeric_limits<double>::infinity();
  for (double lr : grid) {
    try {
      const TrainReport r = train(
          sphere_config(Method::soft_sgd, lr, prob.problem().soft_lambda, iters, n_active, heldout_seed, {}), prob,
          prob.problem().x0);
      const double v = r.rows.empty() ? r.initial.median_violation : r.rows.back().metrics.median_violation;
      if (v < best) {
        best = v;
        best_lr = lr;
      }
    } catch (const NumericalError&) {
    }
  }
  return best_lr;
}

// ---------------------------------------------------------------------------
// Synthetic pose regression.

struct ToyPoseSettings {
  std::size_t n_samples = 2000;
  double train_fraction = 0.8;
  /// Mean and spread of the relative over-length of left-side bones in the
  /// training labels. Validation truths are always symmetric.
  double asymmetry_bias = 0.15;
  double asymmetry_std = 0.05;
  double input_noise = 0.05;
  std::vector<std::size_t> hidden{32, 32};
};

struct PoseSample {
  Vector input;
  Vector truth;  // symmetric pose
  Vector label;  // pose with injected left/right asymmetry
};

/// Forward kinematics of the 17-joint skeleton.
class SkeletonGenerator {
 public:
  static constexpr std::size_t kAngles = 16;
  static constexpr std::size_t kFeatures = 1 + 2 * kAngles + 2;

  /// Bone lengths of the template skeleton at scale 1.
  struct Lengths {
    double hip = 0.12, thigh = 0.42, shin = 0.42, clavicle = 0.16, upper_arm = 0.28, forearm = 0.26;
    double spine = 0.22, chest = 0.25, neck = 0.10, head = 0.12;
  };

  /// Draws one pose. left_scale multiplies the six left bones covered by the
  /// symmetry table (pelvis-hip, thigh, shin, clavicle, upper arm, forearm).
  static PoseSample draw(std::mt19937_64& rng, const ToyPoseSettings& s) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> g(0.0, 1.0);
    const double pi = std::numbers::pi;
    const double scale = 0.9 + 0.2 * u(rng);
    const double yaw = -0.5 + u(rng);
    // (polar from straight down, azimuth) for 8 limb segments:
    // R thigh, R shin, L thigh, L shin, L upper arm, L forearm, R upper arm, R forearm.
    std::array<double, kAngles> ang{};
    const std::array<double, 8> max_polar{0.6, 0.6, 0.6, 0.6, 1.4, 1.2, 1.4, 1.2};
    for (std::size_t i = 0; i < 8; ++i) {
      ang[2 * i] = max_polar[i] * u(rng);
      ang[2 * i + 1] = -pi + 2.0 * pi * u(rng);
    }
    std::array<double, 6> left{};
    for (double& a : left) a = 1.0 + s.asymmetry_bias + s.asymmetry_std * g(rng);

    PoseSample out;
    out.truth = pose(scale, yaw, ang, {1, 1, 1, 1, 1, 1});
    out.label = pose(scale, yaw, ang, left);
    Vector x(kFeatures);
    std::size_t f = 0;
    x[f++] = (scale - 1.0) * 10.0;
    for (double a : ang) {
      x[f++] = std::cos(a);
      x[f++] = std::sin(a);
    }
    x[f++] = std::cos(yaw);
    x[f++] = std::sin(yaw);
    for (double& xi : x) xi += s.input_noise * g(rng);
    out.input = std::move(x);
    return out;
  }

  /// left: multipliers for (pelvis-hip, thigh, shin, clavicle, upper arm, forearm) on the left side.
  static Vector pose(double scale, double yaw, const std::array<double, kAngles>& ang,
                     const std::array<double, 6>& left) {
    using namespace joint;
    const Lengths L;
    std::array<std::array<double, 3>, joint::count> p{};
    auto dir = [&](std::size_t seg) {
      const double th = ang[2 * seg];
      const double ph = ang[2 * seg + 1];
      return std::array<double, 3>{std::sin(th) * std::cos(ph), -std::cos(th), std::sin(th) * std::sin(ph)};
    };
    auto place = [&](std::size_t child, std::size_t parent, std::array<double, 3> d, double len) {
      for (std::size_t c = 0; c < 3; ++c) p[child][c] = p[parent][c] + scale * len * d[c];
    };
    const double sh = 1.0 / std::sqrt(1.0 + 0.1 * 0.1);
    p[pelvis] = {0.0, 0.0, 0.0};
    place(r_hip, pelvis, {-1, 0, 0}, L.hip);
    place(l_hip, pelvis, {1, 0, 0}, L.hip * left[0]);
    place(r_knee, r_hip, dir(0), L.thigh);
    place(r_heel, r_knee, dir(1), L.shin);
    place(l_knee, l_hip, dir(2), L.thigh * left[1]);
    place(l_heel, l_knee, dir(3), L.shin * left[2]);
    place(spine, pelvis, {0, 1, 0}, L.spine);
    place(chest, spine, {0, 1, 0}, L.chest);
    place(neck, chest, {0, 1, 0}, L.neck);
    place(head, neck, {0, 1, 0}, L.head);
    place(l_shoulder, chest, {sh, -0.1 * sh, 0}, L.clavicle * left[3]);
    place(l_elbow, l_shoulder, dir(4), L.upper_arm * left[4]);
    place(l_hand, l_elbow, dir(5), L.forearm * left[5]);
    place(r_shoulder, chest, {-sh, -0.1 * sh, 0}, L.clavicle);
    place(r_elbow, r_shoulder, dir(6), L.upper_arm);
    place(r_hand, r_elbow, dir(7), L.forearm);

    const double cy = std::cos(yaw), sy = std::sin(yaw);
    Vector out(kPoseSize);
    for (std::size_t m = 0; m < joint::count; ++m) {
      out[3 * m + 0] = cy * p[m][0] + sy * p[m][2];
      out[3 * m + 1] = p[m][1];
      out[3 * m + 2] = -sy * p[m][0] + cy * p[m][2];
    }
    return out;
  }
};

/// Noisy features -> 51 joint coordinates, trained on asymmetric labels and
/// validated on symmetric truths. The unlabeled constraint pool is the set of
/// training inputs.
class ToyPoseProblem final : public TrainingProblem {
 public:
  ToyPoseProblem(std::uint64_t seed, ToyPoseSettings s = {})
      : settings_(std::move(s)), mlp_(make_spec(settings_)), model_(mlp_.model()), seed_(seed) {
    if (settings_.n_samples < 2) throw std::invalid_argument("ToyPoseProblem: need at least 2 samples");
    if (!(settings_.train_fraction > 0.0 && settings_.train_fraction < 1.0))
      throw std::invalid_argument("ToyPoseProblem: train_fraction must be in (0, 1)");
    std::mt19937_64 rng = seeded_engine(seed, 0x706f7365);
    const auto n_train = static_cast<std::size_t>(
        std::clamp<double>(std::round(settings_.train_fraction * static_cast<double>(settings_.n_samples)), 1.0,
                           static_cast<double>(settings_.n_samples - 1)));
    for (std::size_t i = 0; i < settings_.n_samples; ++i) {
      PoseSample ps = SkeletonGenerator::draw(rng, settings_);
      if (i < n_train) {
        train_.push_back(std::move(ps));
      } else {
        ps.label = ps.truth;
        val_.push_back(std::move(ps));
      }
    }
    std::vector<Vector> pool_samples;
    for (const PoseSample& ps : train_) pool_samples.push_back(ps.input);
    pool_ = std::make_shared<ConstraintPool>(std::move(pool_samples), symmetry_family());
    kinds_ = pool_->family().kinds;
  }

  static MlpSpec make_spec(const ToyPoseSettings& s) {
    MlpSpec spec;
    spec.widths.push_back(SkeletonGenerator::kFeatures);
    for (std::size_t h : s.hidden) spec.widths.push_back(h);
    spec.widths.push_back(kPoseSize);
    return spec;
  }

  const Mlp& mlp() const noexcept { return mlp_; }
  const Model& model() const noexcept { return model_; }
  const ConstraintPool& pool() const noexcept { return *pool_; }
  const std::vector<PoseSample>& train_set() const noexcept { return train_; }
  const std::vector<PoseSample>& validation_set() const noexcept { return val_; }
  Vector initial_params() const { return mlp_.init(seed_); }

  std::size_t n_params() const override { return mlp_.n_params(); }
  std::uint64_t layout_hash() const override { return mlp_.layout().hash(); }
  std::size_t n_train() const override { return train_.size(); }
  std::size_t pool_size() const override { return pool_->size(); }
  std::size_t n_constraint_kinds() const override { return pool_->n_constraints(); }
  const std::vector<ConstraintKind>& constraint_kinds() const override { return kinds_; }

  DiffFunction risk(const std::vector<std::size_t>& batch) const override {
    auto data = gather(batch);
    const Model model = model_;
    return DiffFunction::from_program(
        model_.n_params, 1,
        [model, data]<class T>(std::span<const T> w) {
          T total = 0.0;
          for (const auto& [x, y] : *data) {
            const std::vector<T> pred = model(std::span<const double>(x.span()), w);
            total += squared_joint_loss<T>(pred, y.span());
          }
          return std::vector<T>{total / static_cast<double>(data->size())};
        },
        "mean squared joint loss");
  }

  DiffFunction risk_residuals(const std::vector<std::size_t>& batch) const override {
    auto data = gather(batch);
    const Model model = model_;
    const double scale = std::sqrt(2.0 / (static_cast<double>(kPoseSize) * static_cast<double>(data->size())));
    return DiffFunction::from_program(
        model_.n_params, kPoseSize * data->size(),
        [model, data, scale]<class T>(std::span<const T> w) {
          std::vector<T> r;
          r.reserve(kPoseSize * data->size());
          for (const auto& [x, y] : *data) {
            const std::vector<T> pred = model(std::span<const double>(x.span()), w);
            for (std::size_t i = 0; i < kPoseSize; ++i) r.push_back((pred[i] - y[i]) * scale);
          }
          return r;
        },
        "scaled joint residuals");
  }

  DiffFunction constraints(const ActiveSet& active) const override {
    return constraint_function(*pool_, model_, active);
  }

  ActiveSet select_mined(const Vector& w, std::size_t n_keep) const override {
    return hardcon::select_mined(*pool_, model_, w, n_keep);
  }

  Metrics metrics(const Vector& w) const override {
    Metrics m;
    double risk = 0.0;
    for (const PoseSample& s : train_) risk += squared_joint_loss(model_.predict(s.input.span(), w), s.label);
    m.risk = risk / static_cast<double>(train_.size());
    std::vector<Vector> preds, truths;
    std::vector<double> viol;
    for (const PoseSample& s : val_) {
      preds.push_back(model_.predict(s.input.span(), w));
      truths.push_back(s.truth);
      for (double c : symmetry_residuals(preds.back(), JointIndexTable::standard())) viol.push_back(c);
    }
    m.pred_error = prediction_error(preds, truths);
    m.median_violation = median_violation(Vector(std::move(viol)));
    return m;
  }

 private:
  using Batch = std::vector<std::pair<Vector, Vector>>;

  std::shared_ptr<const Batch> gather(const std::vector<std::size_t>& batch) const {
    if (batch.empty()) throw std::invalid_argument("ToyPoseProblem: empty data batch");
    auto data = std::make_shared<Batch>();
    for (std::size_t i : batch) data->emplace_back(train_.at(i).input, train_.at(i).label);
    return data;
  }

  ToyPoseSettings settings_;
  Mlp mlp_;
  Model model_;
  std::uint64_t seed_;
  std::vector<PoseSample> train_;
  std::vector<PoseSample> val_;
  std::shared_ptr<ConstraintPool> pool_;
  std::vector<ConstraintKind> kinds_;
};

// ---------------------------------------------------------------------------
// Random symmetric systems for solver checks.

struct SymmetricSystem {
  DenseMatrix a;
  Vector b;
  std::vector<double> eigenvalues;
};

/// A = Q diag(lambda) Q^T with Q orthogonal and |lambda| log-spaced in
/// [1/cond, 1] with random signs; the last n - rank eigenvalues are zero.
/// A consistent right-hand side lies in range(A).
inline SymmetricSystem gen_symmetric_system(std::size_t n, double cond, std::size_t rank, bool consistent,
                                            std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("gen_symmetric_system: n must be >= 1");
  if (rank < 1 || rank > n) throw std::invalid_argument("gen_symmetric_system: rank must be in [1, n]");
  if (!(cond >= 1.0) || !std::isfinite(cond)) throw std::invalid_argument("gen_symmetric_system: cond must be >= 1");
  std::mt19937_64 rng = seeded_engine(seed, 0x73797374);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_int_distribution<int> coin(0, 1);

  // Columns of Q by modified Gram-Schmidt, two passes.
  std::vector<Vector> q;
  q.reserve(n);
  while (q.size() < n) {
    Vector v(n);
    for (double& x : v) x = g(rng);
    for (int pass = 0; pass < 2; ++pass)
      for (const Vector& u : q) axpy(-dot(u.span(), v.span()), u, v);
    const double nv = norm(v.span());
    if (nv < 1e-8) continue;
    q.push_back((1.0 / nv) * v);
  }

  SymmetricSystem out;
  out.eigenvalues.assign(n, 0.0);
  for (std::size_t i = 0; i < rank; ++i) {
    const double t = rank == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(rank - 1);
    out.eigenvalues[i] = std::pow(cond, -t) * (coin(rng) ? 1.0 : -1.0);
  }
  out.a = DenseMatrix(n, n);
  for (std::size_t k = 0; k < rank; ++k) {
    const double lk = out.eigenvalues[k];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) out.a(i, j) += lk * q[k][i] * q[k][j];
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) out.a(i, j) = out.a(j, i) = 0.5 * (out.a(i, j) + out.a(j, i));

  Vector b(n);
  if (consistent) {
    for (std::size_t k = 0; k < rank; ++k) axpy(g(rng), q[k], b);
  } else {
    for (double& x : b) x = g(rng);
  }
  out.b = std::move(b);
  return out;
}

}  // namespace hardcon
