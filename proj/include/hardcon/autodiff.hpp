#pragma once

// Differentiation over flat parameter vectors.
//
// A differentiable program is written once as a generic callable
//
//   [](std::span<const T> w) -> std::vector<T>
//
// and instantiated for three scalar types: double (plain evaluation), Dual
// (forward mode, gives J v) and Var (taped reverse mode, gives u^T J).
// Programs may branch on primal(x) but must not otherwise inspect T.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "hardcon/linops.hpp"

namespace hardcon {

// ---------------------------------------------------------------------------
// Forward mode.

/// v + d epsilon with epsilon^2 = 0.
struct Dual {
  double v = 0.0;
  double d = 0.0;

  constexpr Dual() = default;
  constexpr Dual(double value) : v(value) {}  // NOLINT: constants promote implicitly
  constexpr Dual(double value, double tangent) : v(value), d(tangent) {}

  Dual& operator+=(const Dual& o) { v += o.v; d += o.d; return *this; }
  Dual& operator-=(const Dual& o) { v -= o.v; d -= o.d; return *this; }
  Dual& operator*=(const Dual& o) { d = d * o.v + v * o.d; v *= o.v; return *this; }
};

inline Dual operator+(Dual a, const Dual& b) { return a += b; }
inline Dual operator-(Dual a, const Dual& b) { return a -= b; }
inline Dual operator*(Dual a, const Dual& b) { return a *= b; }
inline Dual operator/(const Dual& a, const Dual& b) {
  return {a.v / b.v, (a.d * b.v - a.v * b.d) / (b.v * b.v)};
}
inline Dual operator-(const Dual& a) { return {-a.v, -a.d}; }
inline Dual sqrt(const Dual& a) {
  const double s = std::sqrt(a.v);
  return {s, a.d / (2.0 * s)};
}
inline Dual relu(const Dual& a) { return a.v > 0.0 ? a : Dual{}; }
inline double primal(const Dual& a) { return a.v; }

// ---------------------------------------------------------------------------
// Reverse mode.

/// Linear record of elementary operations. Each node has at most two parents;
/// parent index -1 means "none". Nodes 0..n_inputs-1 are the independent
/// variables when the tape is built by a Linearization.
class Tape {
 public:
  struct Node {
    std::int32_t a;
    std::int32_t b;
    double da;
    double db;
  };

  std::int32_t push(std::int32_t a, double da, std::int32_t b, double db) {
    if (nodes_.size() >= static_cast<std::size_t>(INT32_MAX))
      throw std::length_error("Tape: too many nodes");
    nodes_.push_back({a, b, da, db});
    return static_cast<std::int32_t>(nodes_.size() - 1);
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() noexcept { nodes_.clear(); }
  void reserve(std::size_t n) { nodes_.reserve(n); }

  /// Reverse sweep. adj holds one adjoint per node, pre-seeded by the caller;
  /// on return adj[i] is d(seeded combination)/d(node i).
  void sweep(std::vector<double>& adj) const {
    for (std::size_t k = nodes_.size(); k-- > 0;) {
      const double g = adj[k];
      if (g == 0.0) continue;
      const Node& n = nodes_[k];
      if (n.a >= 0) adj[static_cast<std::size_t>(n.a)] += n.da * g;
      if (n.b >= 0) adj[static_cast<std::size_t>(n.b)] += n.db * g;
    }
  }

 private:
  std::vector<Node> nodes_;
};

namespace detail {
inline thread_local Tape* active_tape = nullptr;
}

/// Makes a tape the recording target on this thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& t) : prev_(detail::active_tape) { detail::active_tape = &t; }
  ~TapeScope() { detail::active_tape = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

/// A taped scalar. id < 0 marks a constant, which never touches the tape.
struct Var {
  double v = 0.0;
  std::int32_t id = -1;

  constexpr Var() = default;
  constexpr Var(double value) : v(value) {}  // NOLINT: constants promote implicitly
  constexpr Var(double value, std::int32_t node) : v(value), id(node) {}

  static Var independent(double value) {
    return {value, tape().push(-1, 0.0, -1, 0.0)};
  }

  static Tape& tape() {
    if (detail::active_tape == nullptr) throw std::logic_error("Var: no active tape");
    return *detail::active_tape;
  }

  Var& operator+=(const Var& o);
  Var& operator-=(const Var& o);
  Var& operator*=(const Var& o);
};

namespace detail {
inline Var unary(double value, const Var& a, double da) {
  if (a.id < 0) return Var(value);
  return {value, Var::tape().push(a.id, da, -1, 0.0)};
}
inline Var binary(double value, const Var& a, double da, const Var& b, double db) {
  if (a.id < 0) return unary(value, b, db);
  if (b.id < 0) return unary(value, a, da);
  return {value, Var::tape().push(a.id, da, b.id, db)};
}
}  // namespace detail

inline Var operator+(const Var& a, const Var& b) { return detail::binary(a.v + b.v, a, 1.0, b, 1.0); }
inline Var operator-(const Var& a, const Var& b) { return detail::binary(a.v - b.v, a, 1.0, b, -1.0); }
inline Var operator*(const Var& a, const Var& b) { return detail::binary(a.v * b.v, a, b.v, b, a.v); }
inline Var operator/(const Var& a, const Var& b) {
  const double q = a.v / b.v;
  return detail::binary(q, a, 1.0 / b.v, b, -q / b.v);
}
inline Var operator-(const Var& a) { return detail::unary(-a.v, a, -1.0); }
inline Var sqrt(const Var& a) {
  const double s = std::sqrt(a.v);
  return detail::unary(s, a, 0.5 / s);
}
inline Var relu(const Var& a) { return a.v > 0.0 ? a : Var{}; }
inline double primal(const Var& a) { return a.v; }

inline Var& Var::operator+=(const Var& o) { return *this = *this + o; }
inline Var& Var::operator-=(const Var& o) { return *this = *this - o; }
inline Var& Var::operator*=(const Var& o) { return *this = *this * o; }

// The double instantiation.
inline double relu(double a) { return a > 0.0 ? a : 0.0; }
inline double primal(double a) { return a; }
using std::sqrt;

/// Euclidean norm of a generic vector slice.
template <class T>
T euclidean_norm(std::span<const T> xs) {
  T s = 0.0;
  for (const T& x : xs) s += x * x;
  return sqrt(s);
}

// ---------------------------------------------------------------------------
// Type-erased programs.

template <template <class> class Sig>
struct Polymorphic {
  std::function<Sig<double>> f64;
  std::function<Sig<Dual>> fwd;
  std::function<Sig<Var>> rev;

  template <class F>
  static Polymorphic from(F f) {
    return {f, f, f};
  }

  template <class T>
  const std::function<Sig<T>>& get() const {
    if constexpr (std::is_same_v<T, double>) return f64;
    else if constexpr (std::is_same_v<T, Dual>) return fwd;
    else return rev;
  }
};

template <class T>
using ParamProgram = std::vector<T>(std::span<const T>);

/// f(w) at a fixed w: the value and both Jacobian products.
class Linearization {
 public:
  virtual ~Linearization() = default;
  virtual std::size_t n_params() const = 0;
  virtual const Vector& value() const = 0;
  /// J v
  virtual Vector rop(const Vector& v) const = 0;
  /// J^T u
  virtual Vector lop(const Vector& u) const = 0;
  std::size_t n_outputs() const { return value().size(); }
};

/// A map from N_P parameters to n_outputs values.
class DiffFunction {
 public:
  using LinearizeFn = std::function<std::shared_ptr<const Linearization>(const Vector&)>;

  /// Builds from a generic program. The program's output length must equal n_outputs.
  template <class Program>
  static DiffFunction from_program(std::size_t n_params, std::size_t n_outputs, Program p,
                                   std::string structure = "program") {
    DiffFunction f(n_params, n_outputs, std::move(structure));
    f.program_ = std::make_shared<Polymorphic<ParamProgram>>(Polymorphic<ParamProgram>::from(p));
    return f;
  }

  /// Builds from a plain evaluator plus a closed-form linearization.
  static DiffFunction analytic(std::size_t n_params, std::size_t n_outputs,
                               std::function<Vector(const Vector&)> eval, LinearizeFn linearize,
                               std::string structure) {
    DiffFunction f(n_params, n_outputs, std::move(structure));
    f.eval_ = std::move(eval);
    f.linearize_ = std::move(linearize);
    return f;
  }

  std::size_t n_params() const noexcept { return n_params_; }
  std::size_t n_outputs() const noexcept { return n_outputs_; }
  const std::string& structure() const noexcept { return structure_; }
  bool has_program() const noexcept { return program_ != nullptr; }

  Vector value(const Vector& w) const {
    check_length("DiffFunction::value", n_params_, w.size());
    Vector out;
    if (program_) {
      std::vector<double> y = program_->f64(w.span());
      check_length("DiffFunction::value output", n_outputs_, y.size());
      out = Vector(std::move(y));
    } else {
      out = eval_(w);
      check_length("DiffFunction::value output", n_outputs_, out.size());
    }
    return out;
  }

  /// J v by forward propagation of dual numbers.
  Vector rop(const Vector& w, const Vector& v) const {
    check_length("rop: w", n_params_, w.size());
    check_length("rop: v", n_params_, v.size());
    if (!program_) return linearize(w)->rop(v);
    std::vector<Dual> wd(n_params_);
    for (std::size_t i = 0; i < n_params_; ++i) wd[i] = Dual(w[i], v[i]);
    const std::vector<Dual> y = program_->fwd(wd);
    check_length("rop output", n_outputs_, y.size());
    Vector out(n_outputs_);
    for (std::size_t i = 0; i < n_outputs_; ++i) out[i] = y[i].d;
    out.ensure_finite("rop");
    return out;
  }

  std::shared_ptr<const Linearization> linearize(const Vector& w) const;

  const Polymorphic<ParamProgram>& program() const {
    if (!program_) throw std::logic_error("DiffFunction: no generic program (" + structure_ + ")");
    return *program_;
  }

 private:
  DiffFunction(std::size_t n_params, std::size_t n_outputs, std::string structure)
      : n_params_(n_params), n_outputs_(n_outputs), structure_(std::move(structure)) {}

  std::size_t n_params_;
  std::size_t n_outputs_;
  std::string structure_;
  std::shared_ptr<const Polymorphic<ParamProgram>> program_;
  std::function<Vector(const Vector&)> eval_;
  LinearizeFn linearize_;
};

/// Records the program once on a private tape; lop replays it backwards and
/// rop re-runs the program on duals. Safe to query from several threads.
class TapeLinearization final : public Linearization {
 public:
  TapeLinearization(const DiffFunction& f, const Vector& w) : f_(f), w_(w) {
    check_length("linearize", f.n_params(), w.size());
    TapeScope scope(tape_);
    std::vector<Var> wv;
    wv.reserve(w.size());
    for (double x : w) wv.push_back(Var::independent(x));
    const std::vector<Var> y = f.program().rev(wv);
    check_length("linearize output", f.n_outputs(), y.size());
    std::vector<double> vals(y.size());
    outputs_.resize(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
      vals[i] = y[i].v;
      outputs_[i] = y[i].id;
    }
    value_ = Vector(std::move(vals));
  }

  std::size_t n_params() const override { return w_.size(); }
  const Vector& value() const override { return value_; }
  Vector rop(const Vector& v) const override { return f_.rop(w_, v); }

  Vector lop(const Vector& u) const override {
    check_length("lop: u", outputs_.size(), u.size());
    std::vector<double> adj(tape_.size(), 0.0);
    for (std::size_t i = 0; i < outputs_.size(); ++i)
      if (outputs_[i] >= 0) adj[static_cast<std::size_t>(outputs_[i])] += u[i];
    tape_.sweep(adj);
    Vector g(std::span<const double>(adj.data(), w_.size()));
    g.ensure_finite("lop");
    return g;
  }

  std::size_t tape_size() const noexcept { return tape_.size(); }

 private:
  DiffFunction f_;
  Vector w_;
  Tape tape_;
  std::vector<std::int32_t> outputs_;
  Vector value_;
};

inline std::shared_ptr<const Linearization> DiffFunction::linearize(const Vector& w) const {
  check_length("linearize", n_params_, w.size());
  if (program_) return std::make_shared<TapeLinearization>(*this, w);
  auto lin = linearize_(w);
  check_length("linearize output", n_outputs_, lin->n_outputs());
  return lin;
}

inline Vector value(const DiffFunction& f, const Vector& w) { return f.value(w); }

inline Vector rop(const DiffFunction& f, const Vector& w, const Vector& v) { return f.rop(w, v); }

inline Vector lop(const DiffFunction& f, const Vector& w, const Vector& u) {
  check_length("lop: u", f.n_outputs(), u.size());
  return f.linearize(w)->lop(u);
}

inline Vector gradient(const DiffFunction& f, const Vector& w) {
  if (f.n_outputs() != 1)
    throw std::invalid_argument("gradient: function has " + std::to_string(f.n_outputs()) +
                                " outputs, expected 1");
  return lop(f, w, Vector{1.0});
}

/// The scalar value and gradient from a single taped evaluation.
inline std::pair<double, Vector> value_and_gradient(const DiffFunction& f, const Vector& w) {
  if (f.n_outputs() != 1) throw std::invalid_argument("value_and_gradient: non-scalar function");
  const auto lin = f.linearize(w);
  return {lin->value()[0], lin->lop(Vector{1.0})};
}

// ---------------------------------------------------------------------------
// Parameter layout and checkpoints.

/// Named contiguous slices of the flat parameter vector.
class ParameterLayout {
 public:
  struct Slice {
    std::string name;
    std::size_t offset;
    std::size_t size;
  };

  std::size_t add(std::string name, std::size_t size) {
    slices_.push_back({std::move(name), total_, size});
    total_ += size;
    return slices_.back().offset;
  }

  std::size_t size() const noexcept { return total_; }
  const std::vector<Slice>& slices() const noexcept { return slices_; }

  const Slice& find(const std::string& name) const {
    for (const Slice& s : slices_)
      if (s.name == name) return s;
    throw std::out_of_range("ParameterLayout: no slice named " + name);
  }

  /// FNV-1a over names and sizes; stable across runs and platforms.
  std::uint64_t hash() const noexcept {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t n) {
      const auto* bytes = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ull;
      }
    };
    for (const Slice& s : slices_) {
      mix(s.name.data(), s.name.size());
      const std::uint64_t n = s.size;
      mix(&n, sizeof n);
    }
    return h;
  }

 private:
  std::vector<Slice> slices_;
  std::size_t total_ = 0;
};

inline constexpr char kCheckpointMagic[8] = {'H', 'C', 'O', 'N', 'P', 'A', 'R', '1'};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class U>
void write_le(std::ostream& os, U value) {
  unsigned char buf[sizeof(U)];
  std::memcpy(buf, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <class U>
U read_le(std::istream& is) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw CheckpointError("checkpoint: truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
  U value;
  std::memcpy(&value, buf, sizeof(U));
  return value;
}
}  // namespace detail

/// Layout: 8-byte magic, uint64 N_P, uint64 layout hash, N_P float64. All little-endian.
inline void save_checkpoint(const std::string& path, const Vector& w, std::uint64_t layout_hash) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("checkpoint: cannot open " + path + " for writing");
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::write_le<std::uint64_t>(os, w.size());
  detail::write_le<std::uint64_t>(os, layout_hash);
  for (double x : w) detail::write_le<double>(os, x);
  if (!os) throw CheckpointError("checkpoint: write failed for " + path);
}

inline Vector load_checkpoint(const std::string& path, std::uint64_t expected_hash) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot open " + path);
  char magic[sizeof kCheckpointMagic];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw CheckpointError("checkpoint: bad magic in " + path);
  const auto n = detail::read_le<std::uint64_t>(is);
  const auto hash = detail::read_le<std::uint64_t>(is);
  if (hash != expected_hash) throw CheckpointError("checkpoint: layout hash mismatch in " + path);
  std::vector<double> w(n);
  for (auto& x : w) x = detail::read_le<double>(is);
  if (is.peek() != std::char_traits<char>::eof())
    throw CheckpointError("checkpoint: trailing bytes in " + path);
  return Vector(std::move(w));
}

}  // namespace hardcon
