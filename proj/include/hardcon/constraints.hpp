#pragma once

// Data-dependent constraints C_jk(w) = C_j(phi(x'_k; w)), active-set
// selection and the two concrete constraint families (bone-length symmetry,
// hyperspheres).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hardcon/autodiff.hpp"
#include "hardcon/linops.hpp"
#include "hardcon/mlp.hpp"

namespace hardcon {

/// Median; for an even count, the mean of the two central values.
inline double median(std::vector<double> xs) {
  if (xs.empty()) throw std::invalid_argument("median: empty input");
  const std::size_t n = xs.size();
  const auto mid = xs.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(xs.begin(), mid, xs.end());
  const double hi = *mid;
  if (n % 2 == 1) return hi;
  const double lo = *std::max_element(xs.begin(), mid);
  return 0.5 * (lo + hi);
}

enum class ConstraintKind { equality, inequality };

template <class T>
using FamilyProgram = std::vector<T>(std::span<const T>);

/// N_C constraint functions of one model output. Inequalities follow C <= 0.
struct ConstraintFamily {
  std::string name;
  std::size_t n_inputs = 0;
  std::vector<ConstraintKind> kinds;
  Polymorphic<FamilyProgram> program;

  std::size_t size() const noexcept { return kinds.size(); }

  template <class T>
  std::vector<T> operator()(std::span<const T> y) const {
    check_length("ConstraintFamily input", n_inputs, y.size());
    std::vector<T> c = program.get<T>()(y);
    check_length("ConstraintFamily output", kinds.size(), c.size());
    return c;
  }
};

/// Unlabeled samples x'_k plus the family evaluated on each.
class ConstraintPool {
 public:
  ConstraintPool(std::vector<Vector> samples, ConstraintFamily family)
      : samples_(std::move(samples)), family_(std::move(family)) {
    if (samples_.empty()) throw std::invalid_argument("ConstraintPool: no samples");
    if (family_.size() == 0) throw std::invalid_argument("ConstraintPool: no constraints");
    for (const Vector& s : samples_) check_length("ConstraintPool sample", samples_[0].size(), s.size());
  }

  /// One sample per row; comma-separated numbers. Blank lines and lines
  /// starting with '#' are skipped; a non-numeric first row is a header.
  static ConstraintPool load_csv(const std::string& path, ConstraintFamily family) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("ConstraintPool: cannot open " + path);
    std::vector<Vector> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      std::vector<double> vals;
      std::stringstream ss(line);
      std::string cell;
      bool numeric = true;
      while (std::getline(ss, cell, ',')) {
        std::size_t used = 0;
        double x = 0.0;
        try {
          x = std::stod(cell, &used);
        } catch (const std::exception&) {
          numeric = false;
          break;
        }
        if (cell.find_first_not_of(" \t\r", used) != std::string::npos) {
          numeric = false;
          break;
        }
        vals.push_back(x);
      }
      if (!numeric) {
        if (rows.empty() && lineno == 1) continue;
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": non-numeric cell");
      }
      if (!rows.empty() && vals.size() != rows[0].size())
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected " +
                                 std::to_string(rows[0].size()) + " columns, got " +
                                 std::to_string(vals.size()));
      try {
        rows.emplace_back(std::move(vals));
      } catch (const NumericalError&) {
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": non-finite value");
      }
    }
    return ConstraintPool(std::move(rows), std::move(family));
  }

  std::size_t size() const noexcept { return samples_.size(); }
  std::size_t n_constraints() const noexcept { return family_.size(); }
  const Vector& sample(std::size_t k) const { return samples_.at(k); }
  const std::vector<Vector>& samples() const noexcept { return samples_; }
  const ConstraintFamily& family() const noexcept { return family_; }

 private:
  std::vector<Vector> samples_;
  ConstraintFamily family_;
};

/// Selected (sample k, constraint j) pairs, k-major then j ascending.
struct ActiveSet {
  struct Entry {
    std::size_t k;
    std::size_t j;
    friend bool operator==(const Entry&, const Entry&) = default;
  };
  std::vector<Entry> entries;

  /// Every constraint of each listed sample. samples must be sorted ascending.
  static ActiveSet all_of(const std::vector<std::size_t>& samples, std::size_t n_constraints) {
    ActiveSet a;
    for (std::size_t k : samples)
      for (std::size_t j = 0; j < n_constraints; ++j) a.entries.push_back({k, j});
    return a;
  }

  std::size_t size() const noexcept { return entries.size(); }
  bool empty() const noexcept { return entries.empty(); }

  std::vector<std::size_t> sample_indices() const {
    std::vector<std::size_t> ks;
    for (const Entry& e : entries)
      if (ks.empty() || ks.back() != e.k) ks.push_back(e.k);
    return ks;
  }

  /// FNV-1a over the entries, for logging.
  std::uint64_t fingerprint() const noexcept {
    std::uint64_t h = 1469598103934665603ull;
    for (const Entry& e : entries) {
      for (std::uint64_t x : {static_cast<std::uint64_t>(e.k), static_cast<std::uint64_t>(e.j)}) {
        for (int b = 0; b < 8; ++b) {
          h ^= (x >> (8 * b)) & 0xffu;
          h *= 1099511628211ull;
        }
      }
    }
    return h;
  }

  void validate(const ConstraintPool& pool) const {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const Entry& e = entries[i];
      if (e.k >= pool.size() || e.j >= pool.n_constraints())
        throw std::out_of_range("ActiveSet: entry (" + std::to_string(e.k) + ", " +
                                std::to_string(e.j) + ") outside pool of " +
                                std::to_string(pool.size()) + " samples x " +
                                std::to_string(pool.n_constraints()) + " constraints");
      if (i > 0) {
        const Entry& p = entries[i - 1];
        if (p.k > e.k || (p.k == e.k && p.j >= e.j))
          throw std::invalid_argument("ActiveSet: entries not in k-major order");
      }
    }
  }
};

/// The stacked active residuals as a function of w.
inline DiffFunction constraint_function(const ConstraintPool& pool, const Model& model,
                                        const ActiveSet& active) {
  active.validate(pool);
  check_length("constraint_function: family input vs model output", pool.family().n_inputs,
               model.n_outputs);
  struct Group {
    std::size_t k;
    std::vector<std::size_t> js;
  };
  auto groups = std::make_shared<std::vector<Group>>();
  for (const auto& e : active.entries) {
    if (groups->empty() || groups->back().k != e.k) groups->push_back({e.k, {}});
    groups->back().js.push_back(e.j);
  }
  auto samples = std::make_shared<std::vector<Vector>>();
  for (const Group& g : *groups) samples->push_back(pool.sample(g.k));
  const ConstraintFamily family = pool.family();
  return DiffFunction::from_program(
      model.n_params, active.size(),
      [model, family, groups, samples]<class T>(std::span<const T> w) {
        std::vector<T> out;
        for (std::size_t g = 0; g < groups->size(); ++g) {
          const std::vector<T> y = model(std::span<const double>((*samples)[g].span()), w);
          const std::vector<T> c = family(std::span<const T>(y));
          for (std::size_t j : (*groups)[g].js) out.push_back(c[j]);
        }
        return out;
      },
      "constraints[" + family.name + "]");
}

/// C_jk(w) over active, stacked k-major.
inline Vector evaluate(const ConstraintPool& pool, const Model& model, const Vector& w,
                       const ActiveSet& active) {
  if (active.empty()) {
    active.validate(pool);
    return Vector();
  }
  return constraint_function(pool, model, active).value(w);
}

/// All N_C residuals of sample k.
inline Vector sample_residuals(const ConstraintPool& pool, const Model& model, const Vector& w,
                               std::size_t k) {
  const Vector y = model.predict(pool.sample(k).span(), w);
  return Vector(pool.family()(y.span()));
}

/// batch distinct indices from [0, n), uniformly, sorted ascending.
inline std::vector<std::size_t> random_subset(std::size_t n, std::size_t batch, std::mt19937_64& rng) {
  if (batch < 1 || batch > n)
    throw std::out_of_range("random subset: batch " + std::to_string(batch) + " outside [1, " +
                            std::to_string(n) + "]");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates with an explicit draw so the stream is portable.
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t r = i + static_cast<std::size_t>(rng() % (n - i));
    std::swap(idx[i], idx[r]);
  }
  idx.resize(batch);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// batch samples drawn uniformly without replacement, every constraint of each.
inline ActiveSet select_random(const ConstraintPool& pool, std::size_t batch, std::mt19937_64& rng) {
  return ActiveSet::all_of(random_subset(pool.size(), batch, rng), pool.n_constraints());
}

inline ActiveSet select_random(const ConstraintPool& pool, std::size_t batch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return select_random(pool, batch, rng);
}

/// Per-sample median over j of |C_jk(w)|.
inline std::vector<double> sample_violations(const ConstraintPool& pool, const Model& model,
                                             const Vector& w) {
  std::vector<double> med(pool.size());
  for (std::size_t k = 0; k < pool.size(); ++k) {
    const Vector c = sample_residuals(pool, model, w, k);
    std::vector<double> a(c.size());
    for (std::size_t j = 0; j < c.size(); ++j) a[j] = std::abs(c[j]);
    med[k] = median(std::move(a));
  }
  return med;
}

/// Indices of the n_keep largest scores, ties to the lower index, sorted ascending.
inline std::vector<std::size_t> top_scores(const std::vector<double>& score, std::size_t n_keep) {
  if (n_keep < 1 || n_keep > score.size())
    throw std::out_of_range("select_mined: n_keep " + std::to_string(n_keep) + " outside [1, " +
                            std::to_string(score.size()) + "]");
  std::vector<std::size_t> idx(score.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  idx.resize(n_keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// The n_keep samples with the largest per-sample median violation. The
/// objective is a sum of per-sample terms, so the top-n_keep choice is optimal.
inline ActiveSet select_mined(const ConstraintPool& pool, const Model& model, const Vector& w,
                              std::size_t n_keep) {
  return ActiveSet::all_of(top_scores(sample_violations(pool, model, w), n_keep), pool.n_constraints());
}

/// Drops inequality pairs with C_jk(w) <= 0.
inline ActiveSet filter_inequalities(const ConstraintPool& pool, const Model& model, const Vector& w,
                                     const ActiveSet& active) {
  active.validate(pool);
  const auto& kinds = pool.family().kinds;
  if (std::none_of(kinds.begin(), kinds.end(),
                   [](ConstraintKind k) { return k == ConstraintKind::inequality; }))
    return active;
  const Vector c = evaluate(pool, model, w, active);
  ActiveSet out;
  for (std::size_t i = 0; i < active.size(); ++i) {
    const auto& e = active.entries[i];
    if (kinds[e.j] == ConstraintKind::inequality && c[i] <= 0.0) continue;
    out.entries.push_back(e);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bone-length symmetry.

/// Joint order of the 17-joint skeleton.
namespace joint {
inline constexpr std::size_t pelvis = 0, r_hip = 1, r_knee = 2, r_heel = 3, l_hip = 4, l_knee = 5,
                             l_heel = 6, spine = 7, chest = 8, neck = 9, head = 10, l_shoulder = 11,
                             l_elbow = 12, l_hand = 13, r_shoulder = 14, r_elbow = 15, r_hand = 16;
inline constexpr std::size_t count = 17;
}  // namespace joint

/// Row j compares |joint(j,0) - joint(j,1)| with |joint(j,2) - joint(j,3)|.
struct JointIndexTable {
  std::array<std::array<std::size_t, 4>, 6> rows;

  static JointIndexTable standard() {
    using namespace joint;
    return {{{
        {l_shoulder, l_elbow, r_shoulder, r_elbow},
        {l_elbow, l_hand, r_elbow, r_hand},
        {l_hip, l_knee, r_hip, r_knee},
        {l_knee, l_heel, r_knee, r_heel},
        {chest, l_shoulder, chest, r_shoulder},
        {pelvis, l_hip, pelvis, r_hip},
    }}};
  }

  std::size_t operator()(std::size_t j, std::size_t m) const { return rows.at(j).at(m); }
};

inline constexpr std::size_t kPoseSize = 3 * joint::count;

template <class T>
T joint_distance(std::span<const T> pose, std::size_t a, std::size_t b) {
  T s = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    const T d = pose[3 * a + c] - pose[3 * b + c];
    s += d * d;
  }
  return sqrt(s);
}

template <class T>
std::vector<T> symmetry_residuals(std::span<const T> pose, const JointIndexTable& table) {
  check_length("symmetry_residuals", kPoseSize, pose.size());
  std::vector<T> out(table.rows.size());
  for (std::size_t j = 0; j < table.rows.size(); ++j) {
    const auto& r = table.rows[j];
    out[j] = joint_distance(pose, r[0], r[1]) - joint_distance(pose, r[2], r[3]);
  }
  return out;
}

inline Vector symmetry_residuals(const Vector& pose, const JointIndexTable& table) {
  return Vector(symmetry_residuals<double>(pose.span(), table));
}

inline ConstraintFamily symmetry_family(const JointIndexTable& table = JointIndexTable::standard()) {
  ConstraintFamily f;
  f.name = "symmetry";
  f.n_inputs = kPoseSize;
  f.kinds.assign(table.rows.size(), ConstraintKind::equality);
  f.program = Polymorphic<FamilyProgram>::from(
      [table]<class T>(std::span<const T> y) { return symmetry_residuals<T>(y, table); });
  return f;
}

// ---------------------------------------------------------------------------
// Hyperspheres |w - c_i| - radius = 0.

inline Vector hypersphere_residuals(const Vector& w, const std::vector<Vector>& centers, double radius) {
  if (!(radius > 0.0)) throw std::invalid_argument("hypersphere_residuals: radius must be positive");
  Vector out(centers.size());
  for (std::size_t i = 0; i < centers.size(); ++i) out[i] = norm((w - centers[i]).span()) - radius;
  return out;
}

/// Jacobian rows u_i = (w - c_i) / |w - c_i| held densely.
class HypersphereLinearization final : public Linearization {
 public:
  HypersphereLinearization(const Vector& w, const std::vector<const Vector*>& centers, double radius)
      : n_(w.size()) {
    Vector val(centers.size());
    rows_.reserve(centers.size());
    for (std::size_t i = 0; i < centers.size(); ++i) {
      Vector d = w - *centers[i];
      const double r = norm(d.span());
      if (r == 0.0) throw NumericalError("hypersphere: w coincides with a center");
      val[i] = r - radius;
      rows_.push_back((1.0 / r) * d);
    }
    value_ = std::move(val);
  }

  std::size_t n_params() const override { return n_; }
  const Vector& value() const override { return value_; }

  Vector rop(const Vector& v) const override {
    check_length("hypersphere rop", n_, v.size());
    Vector out(rows_.size());
    for (std::size_t i = 0; i < rows_.size(); ++i) out[i] = dot(rows_[i].span(), v.span());
    return out;
  }

  Vector lop(const Vector& u) const override {
    check_length("hypersphere lop", rows_.size(), u.size());
    Vector out(n_);
    for (std::size_t i = 0; i < rows_.size(); ++i)
      for (std::size_t p = 0; p < n_; ++p) out[p] += u[i] * rows_[i][p];
    out.ensure_finite("hypersphere lop");
    return out;
  }

 private:
  std::size_t n_;
  std::vector<Vector> rows_;
  Vector value_;
};

/// The listed spheres as a DiffFunction of w, with a closed-form Jacobian.
inline DiffFunction hypersphere_function(std::shared_ptr<const std::vector<Vector>> centers,
                                         std::vector<std::size_t> indices, double radius) {
  if (centers->empty()) throw std::invalid_argument("hypersphere_function: no centers");
  const std::size_t d = (*centers)[0].size();
  for (std::size_t i : indices)
    if (i >= centers->size()) throw std::out_of_range("hypersphere_function: index out of range");
  auto idx = std::make_shared<const std::vector<std::size_t>>(std::move(indices));
  auto pick = [centers, idx] {
    std::vector<const Vector*> cs;
    for (std::size_t i : *idx) cs.push_back(&(*centers)[i]);
    return cs;
  };
  return DiffFunction::analytic(
      d, idx->size(),
      [pick, radius, d](const Vector& w) {
        check_length("hypersphere", d, w.size());
        const auto cs = pick();
        Vector out(cs.size());
        for (std::size_t i = 0; i < cs.size(); ++i) out[i] = norm((w - *cs[i]).span()) - radius;
        return out;
      },
      [pick, radius](const Vector& w) -> std::shared_ptr<const Linearization> {
        return std::make_shared<HypersphereLinearization>(w, pick(), radius);
      },
      "hyperspheres");
}

}  // namespace hardcon
