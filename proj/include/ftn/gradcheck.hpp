#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ftn/random.hpp"
#include "ftn/tensor.hpp"

namespace ftn {

inline constexpr double kFiniteDiffStep = 1e-3;

// Central differences of a scalar function with respect to x, evaluated by
// perturbing x in place (x is restored afterwards). Only the listed flat
// coordinates are probed; the others are left at zero in the result.
template <class T>
BasicTensor<T> finite_diff_grad(const std::function<T(const BasicTensor<T>&)>& f, BasicTensor<T> x,
                                const std::vector<std::size_t>& coords, double h = kFiniteDiffStep) {
  if (h <= 0) throw ParameterError("finite_diff_grad: step must be positive");
  NoGradGuard no_grad;
  std::vector<T> out(x.numel(), T(0));
  auto d = x.mutable_data();
  for (std::size_t c : coords) {
    if (c >= d.size()) throw DimensionError("finite_diff_grad: coordinate out of range");
    const T orig = d[c];
    d[c] = orig + static_cast<T>(h);
    const T fp = f(x);
    d[c] = orig - static_cast<T>(h);
    const T fm = f(x);
    d[c] = orig;
    out[c] = (fp - fm) / static_cast<T>(2 * h);
  }
  return BasicTensor<T>(x.shape(), std::move(out));
}

template <class T>
BasicTensor<T> finite_diff_grad(const std::function<T(const BasicTensor<T>&)>& f, BasicTensor<T> x,
                                double h = kFiniteDiffStep) {
  std::vector<std::size_t> all(x.numel());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return finite_diff_grad(f, std::move(x), all, h);
}

// |a - n| / max(|a|, |n|, floor). The floor keeps coordinates whose true
// derivative vanishes from dominating through truncation noise.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

// Picks `count` distinct flat coordinates of a tensor with n elements.
inline std::vector<std::size_t> sample_coordinates(std::size_t n, std::size_t count, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (count >= n) return idx;
  for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.index(n - i)]);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace ftn
