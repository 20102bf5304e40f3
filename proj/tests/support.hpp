#pragma once

// Shared test fixtures: Eigen bridges, random draws and small training problems.

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <random>
#include <vector>

#include "hardcon/autodiff.hpp"
#include "hardcon/constraints.hpp"
#include "hardcon/linops.hpp"
#include "hardcon/mlp.hpp"
#include "hardcon/trainers.hpp"

namespace testing_support {

using hardcon::Vector;

inline Eigen::VectorXd to_eigen(const Vector& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline Vector from_eigen(const Eigen::VectorXd& v) {
  return Vector(std::vector<double>(v.data(), v.data() + v.size()));
}

inline Eigen::MatrixXd to_eigen(const hardcon::DenseMatrix& m) {
  Eigen::MatrixXd out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(i, j);
  return out;
}

inline hardcon::DenseMatrix from_eigen(const Eigen::MatrixXd& m) {
  hardcon::DenseMatrix out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out(i, j) = m(i, j);
  return out;
}

inline Vector gaussian(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Vector v(n);
  for (double& x : v) x = g(rng);
  return v;
}

inline Vector unit_gaussian(std::size_t n, std::mt19937_64& rng) {
  Vector v = gaussian(n, rng);
  return (1.0 / hardcon::norm(v.span())) * v;
}

/// Jacobian of f at w by central differences, one column per parameter.
inline Eigen::MatrixXd fd_jacobian(const hardcon::DiffFunction& f, const Vector& w, double h = 1e-6) {
  Eigen::MatrixXd J(f.n_outputs(), f.n_params());
  for (std::size_t i = 0; i < f.n_params(); ++i) {
    Vector wp = w, wm = w;
    wp[i] += h;
    wm[i] -= h;
    J.col(static_cast<Eigen::Index>(i)) = (to_eigen(f.value(wp)) - to_eigen(f.value(wm))) / (2.0 * h);
  }
  return J;
}

/// R(w) = |w - target|^2 / 2 subject to A w = b, one constraint kind per row
/// and a single pool "sample". Equalities by default.
class LinearProblem final : public hardcon::TrainingProblem {
 public:
  LinearProblem(Eigen::VectorXd target, Eigen::MatrixXd a, Eigen::VectorXd b,
                std::vector<hardcon::ConstraintKind> kinds = {})
      : target_(std::move(target)), a_(std::move(a)), b_(std::move(b)), kinds_(std::move(kinds)) {
    if (kinds_.empty()) kinds_.assign(static_cast<std::size_t>(a_.rows()), hardcon::ConstraintKind::equality);
  }

  std::size_t n_params() const override { return static_cast<std::size_t>(target_.size()); }
  std::uint64_t layout_hash() const override { return 7; }
  std::size_t n_train() const override { return 0; }
  std::size_t pool_size() const override { return 1; }
  std::size_t n_constraint_kinds() const override { return kinds_.size(); }
  const std::vector<hardcon::ConstraintKind>& constraint_kinds() const override { return kinds_; }

  hardcon::DiffFunction risk(const std::vector<std::size_t>&) const override {
    const Eigen::VectorXd t = target_;
    return hardcon::DiffFunction::from_program(
        n_params(), 1,
        [t]<class T>(std::span<const T> w) {
          T s = 0.0;
          for (std::size_t i = 0; i < w.size(); ++i) {
            const T d = w[i] - t(static_cast<Eigen::Index>(i));
            s += d * d;
          }
          return std::vector<T>{s * 0.5};
        },
        "quadratic");
  }

  hardcon::DiffFunction risk_residuals(const std::vector<std::size_t>&) const override {
    const Eigen::VectorXd t = target_;
    return hardcon::DiffFunction::from_program(
        n_params(), n_params(),
        [t]<class T>(std::span<const T> w) {
          std::vector<T> r;
          for (std::size_t i = 0; i < w.size(); ++i) r.push_back(w[i] - t(static_cast<Eigen::Index>(i)));
          return r;
        },
        "residuals");
  }

  hardcon::DiffFunction constraints(const hardcon::ActiveSet& active) const override {
    std::vector<Eigen::Index> rows;
    for (const auto& e : active.entries) rows.push_back(static_cast<Eigen::Index>(e.j));
    const Eigen::MatrixXd a = a_;
    const Eigen::VectorXd b = b_;
    return hardcon::DiffFunction::from_program(
        n_params(), rows.size(),
        [a, b, rows]<class T>(std::span<const T> w) {
          std::vector<T> c;
          for (Eigen::Index r : rows) {
            T s = -b(r);
            for (Eigen::Index i = 0; i < a.cols(); ++i) s += w[static_cast<std::size_t>(i)] * a(r, i);
            c.push_back(s);
          }
          return c;
        },
        "linear constraints");
  }

  hardcon::ActiveSet select_mined(const Vector&, std::size_t) const override {
    return hardcon::ActiveSet::all_of({0}, kinds_.size());
  }

  hardcon::Metrics metrics(const Vector& w) const override {
    const Eigen::VectorXd x = to_eigen(w);
    hardcon::Metrics m;
    m.risk = 0.5 * (x - target_).squaredNorm();
    m.pred_error = (x - target_).norm();
    const Eigen::VectorXd c = a_ * x - b_;
    m.median_violation = hardcon::median(std::vector<double>(c.data(), c.data() + c.size()));
    return m;
  }

  const Eigen::MatrixXd& a() const { return a_; }
  const Eigen::VectorXd& b() const { return b_; }

 private:
  Eigen::VectorXd target_;
  Eigen::MatrixXd a_;
  Eigen::VectorXd b_;
  std::vector<hardcon::ConstraintKind> kinds_;
};

/// Random MLP widths: input in [1, max_in], 1..max_hidden hidden layers of width
/// in [1, max_width], output in [1, max_out].
inline hardcon::MlpSpec random_mlp_spec(std::mt19937_64& rng, std::size_t max_in, std::size_t max_hidden,
                                        std::size_t max_width, std::size_t max_out) {
  std::uniform_int_distribution<std::size_t> in(1, max_in), hid(1, max_hidden), width(1, max_width),
      out(1, max_out);
  hardcon::MlpSpec s;
  s.widths.push_back(in(rng));
  const std::size_t h = hid(rng);
  for (std::size_t l = 0; l < h; ++l) s.widths.push_back(width(rng));
  s.widths.push_back(out(rng));
  return s;
}

}  // namespace testing_support
