#pragma once

// Dense vectors and implicit symmetric operators.
//
// Every solver and KKT assembly in hardcon talks to its system matrix only
// through LinearOperator::apply. DenseMatrix exists so that tests can
// materialize an operator and compare it against a hand-built block matrix.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hardcon {

/// Thrown when two objects that must agree in length do not.
class DimensionError : public std::invalid_argument {
 public:
  DimensionError(const std::string& what, std::size_t expected, std::size_t actual)
      : std::invalid_argument(what + ": expected length " + std::to_string(expected) +
                              ", got " + std::to_string(actual)),
        expected_(expected),
        actual_(actual) {}

  std::size_t expected() const noexcept { return expected_; }
  std::size_t actual() const noexcept { return actual_; }

 private:
  std::size_t expected_;
  std::size_t actual_;
};

/// Thrown when a computation produces NaN or Inf.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void check_length(const char* what, std::size_t expected, std::size_t actual) {
  if (expected != actual) throw DimensionError(what, expected, actual);
}

inline bool all_finite(std::span<const double> xs) noexcept {
  for (double x : xs)
    if (!std::isfinite(x)) return false;
  return true;
}

/// A dense vector of doubles whose entries are finite whenever the library
/// hands it out. Element writes through operator[] are not checked.
class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t n, double fill = 0.0) : data_(n, fill) { ensure_finite("Vector"); }
  Vector(std::initializer_list<double> xs) : data_(xs) { ensure_finite("Vector"); }
  explicit Vector(std::vector<double> xs) : data_(std::move(xs)) { ensure_finite("Vector"); }
  explicit Vector(std::span<const double> xs) : data_(xs.begin(), xs.end()) {
    ensure_finite("Vector");
  }

  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  std::span<double> span() noexcept { return data_; }
  std::span<const double> span() const noexcept { return data_; }
  operator std::span<const double>() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  void ensure_finite(const char* what) const {
    if (!all_finite(data_)) throw NumericalError(std::string(what) + ": non-finite entry");
  }

  static Vector unit(std::size_t n, std::size_t i) {
    Vector e(n);
    e[i] = 1.0;
    return e;
  }

  friend bool operator==(const Vector&, const Vector&) = default;

 private:
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Arithmetic. Results are checked for finiteness.

inline double dot(std::span<const double> a, std::span<const double> b) {
  check_length("dot", a.size(), b.size());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) {
  // Scaled to avoid overflow for very large entries.
  double scale = 0.0;
  for (double x : a) scale = std::max(scale, std::abs(x));
  if (scale == 0.0 || !std::isfinite(scale)) return scale;
  double s = 0.0;
  for (double x : a) {
    const double y = x / scale;
    s += y * y;
  }
  return scale * std::sqrt(s);
}

/// y += alpha * x
inline void axpy(double alpha, const Vector& x, Vector& y) {
  check_length("axpy", y.size(), x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
  y.ensure_finite("axpy");
}

inline Vector operator+(const Vector& a, const Vector& b) {
  check_length("operator+", a.size(), b.size());
  Vector r(a);
  for (std::size_t i = 0; i < a.size(); ++i) r[i] += b[i];
  r.ensure_finite("operator+");
  return r;
}

inline Vector operator-(const Vector& a, const Vector& b) {
  check_length("operator-", a.size(), b.size());
  Vector r(a);
  for (std::size_t i = 0; i < a.size(); ++i) r[i] -= b[i];
  r.ensure_finite("operator-");
  return r;
}

inline Vector operator-(const Vector& a) {
  Vector r(a);
  for (double& x : r) x = -x;
  return r;
}

inline Vector operator*(double s, const Vector& a) {
  Vector r(a);
  for (double& x : r) x *= s;
  r.ensure_finite("scale");
  return r;
}

inline Vector hadamard(const Vector& a, const Vector& b) {
  check_length("hadamard", a.size(), b.size());
  Vector r(a);
  for (std::size_t i = 0; i < a.size(); ++i) r[i] *= b[i];
  r.ensure_finite("hadamard");
  return r;
}

inline Vector concat(const Vector& a, const Vector& b) {
  Vector r(a.size() + b.size());
  std::copy(a.begin(), a.end(), r.begin());
  std::copy(b.begin(), b.end(), r.begin() + static_cast<std::ptrdiff_t>(a.size()));
  return r;
}

/// Splits v into its first n entries and the remainder.
inline std::pair<Vector, Vector> split_at(const Vector& v, std::size_t n) {
  if (n > v.size()) throw DimensionError("split_at", v.size(), n);
  return {Vector(std::span<const double>(v.data(), n)),
          Vector(std::span<const double>(v.data() + n, v.size() - n))};
}

inline double max_abs(std::span<const double> a) {
  double m = 0.0;
  for (double x : a) m = std::max(m, std::abs(x));
  return m;
}

// ---------------------------------------------------------------------------

/// Row-major dense matrix. Used only as a test oracle and for small problems.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols) {}

  static DenseMatrix identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

  Vector multiply(const Vector& x) const {
    check_length("DenseMatrix::multiply", cols_, x.size());
    Vector y(rows_);
    for (std::size_t i = 0; i < rows_; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < cols_; ++j) s += data_[i * cols_ + j] * x[j];
      y[i] = s;
    }
    y.ensure_finite("DenseMatrix::multiply");
    return y;
  }

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// An implicit square operator, symmetric by contract. Only matvec is exposed.
class LinearOperator {
 public:
  using Matvec = std::function<Vector(const Vector&)>;

  LinearOperator(std::size_t dim, Matvec matvec) : dim_(dim), matvec_(std::move(matvec)) {
    if (dim_ == 0) throw std::invalid_argument("LinearOperator: dimension must be positive");
  }

  std::size_t dim() const noexcept { return dim_; }

  Vector apply(const Vector& v) const {
    check_length("LinearOperator::apply", dim_, v.size());
    Vector out = matvec_(v);
    check_length("LinearOperator::apply result", dim_, out.size());
    out.ensure_finite("LinearOperator::apply");
    return out;
  }

  Vector operator()(const Vector& v) const { return apply(v); }

 private:
  std::size_t dim_;
  Matvec matvec_;
};

inline Vector apply(const LinearOperator& op, const Vector& v) { return op.apply(v); }

inline LinearOperator identity_operator(std::size_t n) {
  return LinearOperator(n, [](const Vector& v) { return v; });
}

inline LinearOperator zero_operator(std::size_t n) {
  return LinearOperator(n, [n](const Vector&) { return Vector(n); });
}

inline LinearOperator diagonal_operator(Vector diag) {
  const std::size_t n = diag.size();
  return LinearOperator(n, [d = std::move(diag)](const Vector& v) { return hadamard(d, v); });
}

/// Wraps a square dense matrix. The matrix is copied into the closure.
inline LinearOperator dense_operator(DenseMatrix a) {
  if (a.rows() != a.cols()) throw DimensionError("dense_operator (square)", a.rows(), a.cols());
  const std::size_t n = a.rows();
  return LinearOperator(n, [m = std::move(a)](const Vector& v) { return m.multiply(v); });
}

inline constexpr std::size_t kDefaultMaterializeCap = 2048;

/// Builds the dense matrix whose i-th column is op(e_i).
inline DenseMatrix materialize(const LinearOperator& op,
                               std::size_t cap = kDefaultMaterializeCap) {
  const std::size_t n = op.dim();
  if (n > cap)
    throw std::length_error("materialize: dimension " + std::to_string(n) + " exceeds cap " +
                            std::to_string(cap));
  DenseMatrix m(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    const Vector col = op.apply(Vector::unit(n, j));
    for (std::size_t i = 0; i < n; ++i) m(i, j) = col[i];
  }
  return m;
}

/// An engine seeded from (seed, tag), giving independent streams per tag.
inline std::mt19937_64 seeded_engine(std::uint64_t seed, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32)};
  return std::mt19937_64(seq);
}

/// Largest normalized asymmetry |<u,Bv> - <Bu,v>| / (|u||v| est|B|) over random
/// probes. est|B| is the largest |Bx|/|x| seen across the probes.
inline double symmetry_defect(const LinearOperator& op, int trials, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;
  const std::size_t n = op.dim();
  auto draw = [&] {
    Vector x(n);
    for (double& e : x) e = gauss(rng);
    return x;
  };
  double worst = 0.0;
  double est = 0.0;
  std::vector<std::pair<double, double>> raw;
  for (int t = 0; t < trials; ++t) {
    const Vector u = draw();
    const Vector v = draw();
    const Vector bu = op.apply(u);
    const Vector bv = op.apply(v);
    est = std::max({est, norm(bu) / norm(u), norm(bv) / norm(v)});
    raw.emplace_back(std::abs(dot(u, bv) - dot(bu, v)), norm(u) * norm(v));
  }
  if (est == 0.0) return 0.0;
  for (const auto& [diff, scale] : raw) worst = std::max(worst, diff / (scale * est));
  return worst;
}

}  // namespace hardcon
