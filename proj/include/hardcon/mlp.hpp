#pragma once

// Dense ReLU networks and the per-sample model phi(x; w).

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hardcon/autodiff.hpp"

namespace hardcon {

/// Layer widths from input to output. ReLU sits between consecutive affine
/// layers, never after the last one.
struct MlpSpec {
  std::vector<std::size_t> widths;

  void validate() const {
    if (widths.size() < 2) throw std::invalid_argument("MlpSpec: need input and output widths");
    for (std::size_t w : widths)
      if (w < 1) throw std::invalid_argument("MlpSpec: widths must be >= 1");
  }

  std::size_t n_inputs() const { return widths.front(); }
  std::size_t n_outputs() const { return widths.back(); }
  std::size_t n_layers() const { return widths.size() - 1; }

  std::size_t n_params() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) n += (widths[l] + 1) * widths[l + 1];
    return n;
  }
};

template <class T>
using ModelProgram = std::vector<T>(std::span<const double>, std::span<const T>);

/// phi(x; w): a differentiable map of the parameters, evaluated per sample.
struct Model {
  std::size_t n_params = 0;
  std::size_t n_inputs = 0;
  std::size_t n_outputs = 0;
  ParameterLayout layout;
  Polymorphic<ModelProgram> program;

  template <class T>
  std::vector<T> operator()(std::span<const double> x, std::span<const T> w) const {
    return program.get<T>()(x, w);
  }

  Vector predict(std::span<const double> x, const Vector& w) const {
    check_length("Model::predict input", n_inputs, x.size());
    check_length("Model::predict params", n_params, w.size());
    return Vector(program.f64(x, w.span()));
  }
};

class Mlp {
 public:
  explicit Mlp(MlpSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    for (std::size_t l = 0; l < spec_.n_layers(); ++l) {
      layout_.add("W" + std::to_string(l), spec_.widths[l] * spec_.widths[l + 1]);
      layout_.add("b" + std::to_string(l), spec_.widths[l + 1]);
    }
  }

  const MlpSpec& spec() const noexcept { return spec_; }
  const ParameterLayout& layout() const noexcept { return layout_; }
  std::size_t n_params() const noexcept { return layout_.size(); }

  /// W_l is out x in, row-major, followed by b_l.
  template <class T>
  std::vector<T> forward(std::span<const double> x, std::span<const T> w) const {
    check_length("Mlp::forward input", spec_.n_inputs(), x.size());
    check_length("Mlp::forward params", n_params(), w.size());
    std::size_t off = 0;
    const std::size_t n0 = spec_.widths[0];
    const std::size_t n1 = spec_.widths[1];
    // The first layer multiplies plain doubles, so it is written separately
    // to avoid promoting x.
    std::vector<T> h(n1);
    for (std::size_t o = 0; o < n1; ++o) {
      T s = w[off + n0 * n1 + o];
      for (std::size_t i = 0; i < n0; ++i) s += w[off + o * n0 + i] * x[i];
      h[o] = s;
    }
    off += (n0 + 1) * n1;
    for (std::size_t l = 1; l < spec_.n_layers(); ++l) {
      for (T& z : h) z = relu(z);
      const std::size_t in = spec_.widths[l];
      const std::size_t out = spec_.widths[l + 1];
      std::vector<T> next(out);
      for (std::size_t o = 0; o < out; ++o) {
        T s = w[off + in * out + o];
        for (std::size_t i = 0; i < in; ++i) s += w[off + o * in + i] * h[i];
        next[o] = s;
      }
      off += (in + 1) * out;
      h = std::move(next);
    }
    return h;
  }

  /// He-normal weights, zero biases.
  Vector init(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    Vector w(n_params());
    std::size_t off = 0;
    for (std::size_t l = 0; l < spec_.n_layers(); ++l) {
      const std::size_t in = spec_.widths[l];
      const std::size_t out = spec_.widths[l + 1];
      std::normal_distribution<double> g(0.0, std::sqrt(2.0 / static_cast<double>(in)));
      for (std::size_t i = 0; i < in * out; ++i) w[off + i] = g(rng);
      off += (in + 1) * out;
    }
    return w;
  }

  Model model() const {
    Model m;
    m.n_params = n_params();
    m.n_inputs = spec_.n_inputs();
    m.n_outputs = spec_.n_outputs();
    m.layout = layout_;
    const Mlp self = *this;
    m.program = Polymorphic<ModelProgram>::from(
        [self]<class T>(std::span<const double> x, std::span<const T> w) { return self.forward<T>(x, w); });
    return m;
  }

 private:
  MlpSpec spec_;
  ParameterLayout layout_;
};

}  // namespace hardcon
