#pragma once

#include <string>
#include <vector>

#include "ftn/ops.hpp"
#include "ftn/random.hpp"

namespace ftn {

inline constexpr double kInitStd = 0.02;

// Dotted parameter path; an empty prefix yields just the leaf name.
inline std::string scoped(const std::string& prefix, const std::string& leaf) {
  return prefix.empty() ? leaf : prefix + "." + leaf;
}

// Parameter leaf initialized from double-precision draws, so float and double
// instantiations built from the same seed agree up to rounding.
template <class T>
BasicTensor<T> trunc_normal_param(Shape shape, Rng& rng, double std = kInitStd) {
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(rng.trunc_normal(std));
  return BasicTensor<T>(std::move(shape), std::move(v), true);
}

template <class T>
BasicTensor<T> constant_param(Shape shape, T value) {
  return BasicTensor<T>::full(std::move(shape), value, true);
}

// Fully connected layer; weight is stored [in, out].
template <class T>
struct Linear {
  BasicTensor<T> weight;
  BasicTensor<T> bias;
  bool has_bias = true;

  static Linear create(std::size_t in, std::size_t out, Rng& rng, bool bias = true) {
    Linear l;
    l.weight = trunc_normal_param<T>({in, out}, rng);
    l.has_bias = bias;
    if (bias) l.bias = constant_param<T>({out}, T(0));
    return l;
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return linear(x, weight, has_bias ? &bias : nullptr); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(scoped(prefix, "weight"), weight);
    if (has_bias) f(scoped(prefix, "bias"), bias);
  }
};

template <class T>
struct LayerNorm {
  BasicTensor<T> gamma;
  BasicTensor<T> beta;

  static LayerNorm create(std::size_t c) {
    return {constant_param<T>({c}, T(1)), constant_param<T>({c}, T(0))};
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return layer_norm(x, gamma, beta); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(scoped(prefix, "weight"), gamma);
    f(scoped(prefix, "bias"), beta);
  }
};

// Two-layer feed-forward network with GELU.
template <class T>
struct Mlp {
  Linear<T> fc1;
  Linear<T> fc2;

  static Mlp create(std::size_t dim, std::size_t ratio, Rng& rng) {
    Mlp m;
    m.fc1 = Linear<T>::create(dim, dim * ratio, rng);
    m.fc2 = Linear<T>::create(dim * ratio, dim, rng);
    return m;
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return fc2(gelu(fc1(x))); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    fc1.visit(scoped(prefix, "fc1"), f);
    fc2.visit(scoped(prefix, "fc2"), f);
  }
};

// Collects (name, tensor) pairs from anything exposing visit().
template <class T, class Module>
std::vector<std::pair<std::string, BasicTensor<T>>> named_parameters(Module& m, const std::string& prefix = "") {
  std::vector<std::pair<std::string, BasicTensor<T>>> out;
  m.visit(prefix, [&](const std::string& name, BasicTensor<T>& t) { out.emplace_back(name, t); });
  return out;
}

template <class T, class Module>
std::size_t parameter_count(Module& m) {
  std::size_t n = 0;
  m.visit("", [&](const std::string&, BasicTensor<T>& t) { n += t.numel(); });
  return n;
}

template <class T, class Module>
void zero_parameters(Module& m) {
  m.visit("", [](const std::string&, BasicTensor<T>& t) {
    for (auto& v : t.mutable_data()) v = T(0);
  });
}

}  // namespace ftn
