#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "ftn/tensor.hpp"

namespace ftn {

namespace detail {

template <class T>
using NodeRef = std::shared_ptr<Node<T>>;

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// C[M,N] += A[M,K] * B[K,N]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// dA[M,K] += G[M,N] * B[K,N]^T
template <class T>
void gemm_nt(const T* g, const T* b, T* da, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      da[i * k + p] += acc;
    }
  }
}

// dB[K,N] += A[M,K]^T * G[M,N]
template <class T>
void gemm_tn(const T* a, const T* g, T* db, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      T* drow = db + p * n;
      for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
    }
  }
}

// Iterates a multi-index over `shape` in row-major order.
struct IndexCounter {
  explicit IndexCounter(const Shape& s) : shape(s), idx(s.size(), 0) {}
  void next() {
    for (std::size_t d = shape.size(); d-- > 0;) {
      if (++idx[d] < shape[d]) return;
      idx[d] = 0;
    }
  }
  const Shape& shape;
  std::vector<std::size_t> idx;
};

inline std::size_t normalize_axis(long axis, std::size_t rank, const char* op) {
  long r = static_cast<long>(rank);
  if (axis < -r || axis >= r)
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank " +
                         std::to_string(rank));
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Element-wise arithmetic

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  return detail::make_result<T>("add", a.shape(), std::move(out), {a.node(), b.node()},
                                [](detail::Node<T>& self) {
                                  for (auto& in : self.inputs)
                                    if (in->requires_grad)
                                      for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
                                });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  return detail::make_result<T>("sub", a.shape(), std::move(out), {a.node(), b.node()},
                                [](detail::Node<T>& self) {
                                  auto& x = *self.inputs[0];
                                  auto& y = *self.inputs[1];
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                    if (x.requires_grad) x.grad[i] += self.grad[i];
                                    if (y.requires_grad) y.grad[i] -= self.grad[i];
                                  }
                                });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return detail::make_result<T>("mul", a.shape(), std::move(out), {a.node(), b.node()},
                                [](detail::Node<T>& self) {
                                  auto& x = *self.inputs[0];
                                  auto& y = *self.inputs[1];
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                    if (x.requires_grad) x.grad[i] += self.grad[i] * y.data[i];
                                    if (y.requires_grad) y.grad[i] += self.grad[i] * x.data[i];
                                  }
                                });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * s;
  return detail::make_result<T>("scale", a.shape(), std::move(out), {a.node()},
                                [s](detail::Node<T>& self) {
                                  auto& x = *self.inputs[0];
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += self.grad[i] * s;
                                });
}

// Multiplies every element of batch item b (leading axis) by factors[b].
template <class T>
BasicTensor<T> scale_batch(const BasicTensor<T>& a, std::vector<T> factors) {
  if (a.rank() == 0 || factors.size() != a.dim(0))
    throw DimensionError("scale_batch: need one factor per batch item of " + shape_str(a.shape()));
  const std::size_t per = a.numel() / a.dim(0);
  std::vector<T> out(a.numel());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * factors[i / per];
  return detail::make_result<T>("scale_batch", a.shape(), std::move(out), {a.node()},
                                [factors = std::move(factors), per](detail::Node<T>& self) {
                                  auto& x = *self.inputs[0];
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    x.grad[i] += self.grad[i] * factors[i / per];
                                });
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  return detail::make_result<T>("sum", Shape{}, {acc}, {a.node()}, [](detail::Node<T>& self) {
    auto& x = *self.inputs[0];
    for (auto& g : x.grad) g += self.grad[0];
  });
}

// Mean over the listed axes; reduced axes are removed from the shape.
template <class T>
BasicTensor<T> mean_over(const BasicTensor<T>& x, std::vector<long> axes) {
  const Shape& in_shape = x.shape();
  std::vector<bool> reduced(in_shape.size(), false);
  for (long a : axes) {
    std::size_t ax = detail::normalize_axis(a, in_shape.size(), "mean_over");
    if (reduced[ax]) throw DimensionError("mean_over: axis listed twice");
    reduced[ax] = true;
  }
  Shape out_shape, keep_shape;
  std::size_t count = 1;
  for (std::size_t d = 0; d < in_shape.size(); ++d) {
    if (reduced[d]) {
      count *= in_shape[d];
      keep_shape.push_back(1);
    } else {
      out_shape.push_back(in_shape[d]);
      keep_shape.push_back(in_shape[d]);
    }
  }
  // Map each input element to its output slot.
  Shape keep_strides = strides_of(keep_shape);
  std::vector<std::size_t> target(x.numel());
  detail::IndexCounter it(in_shape);
  for (std::size_t i = 0; i < x.numel(); ++i, it.next()) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < in_shape.size(); ++d)
      if (!reduced[d]) off += it.idx[d] * keep_strides[d];
    target[i] = off;
  }
  std::vector<T> out(numel_of(out_shape), T(0));
  auto xd = x.data();
  for (std::size_t i = 0; i < xd.size(); ++i) out[target[i]] += xd[i];
  const T inv = T(1) / static_cast<T>(count);
  for (auto& v : out) v *= inv;
  return detail::make_result<T>("mean_over", out_shape, std::move(out), {x.node()},
                                [target = std::move(target), inv](detail::Node<T>& self) {
                                  auto& in = *self.inputs[0];
                                  for (std::size_t i = 0; i < target.size(); ++i)
                                    in.grad[i] += self.grad[target[i]] * inv;
                                });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::make_result<T>("reshape", std::move(shape), std::move(out), {x.node()},
                                [](detail::Node<T>& self) {
                                  auto& in = *self.inputs[0];
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
                                });
}

template <class T>
BasicTensor<T> permute(const BasicTensor<T>& x, std::vector<std::size_t> perm) {
  const Shape& in_shape = x.shape();
  if (perm.size() != in_shape.size())
    throw DimensionError("permute: axis list length " + std::to_string(perm.size()) + " for rank " +
                         std::to_string(in_shape.size()));
  std::vector<bool> seen(perm.size(), false);
  for (auto p : perm) {
    if (p >= perm.size() || seen[p]) throw DimensionError("permute: not a permutation of axes");
    seen[p] = true;
  }
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = in_shape[perm[i]];
  Shape in_strides = strides_of(in_shape);
  std::vector<std::size_t> source(x.numel());
  detail::IndexCounter it(out_shape);
  for (std::size_t i = 0; i < source.size(); ++i, it.next()) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < perm.size(); ++d) off += it.idx[d] * in_strides[perm[d]];
    source[i] = off;
  }
  std::vector<T> out(source.size());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[source[i]];
  return detail::make_result<T>("permute", out_shape, std::move(out), {x.node()},
                                [source = std::move(source)](detail::Node<T>& self) {
                                  auto& in = *self.inputs[0];
                                  for (std::size_t i = 0; i < source.size(); ++i) in.grad[source[i]] += self.grad[i];
                                });
}

// Concatenation along the last axis; all other extents must agree.
template <class T>
BasicTensor<T> concat_last(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_last: no inputs");
  Shape lead = parts[0].shape();
  if (lead.empty()) throw DimensionError("concat_last: scalar input");
  lead.pop_back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.empty()) throw DimensionError("concat_last: scalar input");
    widths.push_back(s.back());
    total += s.back();
    s.pop_back();
    if (s != lead)
      throw DimensionError("concat_last: leading extents differ: " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
  }
  const std::size_t rows = numel_of(lead);
  std::vector<T> out(rows * total);
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto d = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(d.begin() + r * widths[k], widths[k], out.begin() + r * total + col);
    col += widths[k];
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  std::vector<detail::NodeRef<T>> inputs;
  for (const auto& p : parts) inputs.push_back(p.node());
  return detail::make_result<T>("concat_last", out_shape, std::move(out), std::move(inputs),
                                [widths, rows, total](detail::Node<T>& self) {
                                  std::size_t c = 0;
                                  for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                                    auto& in = *self.inputs[k];
                                    if (in.requires_grad)
                                      for (std::size_t r = 0; r < rows; ++r)
                                        for (std::size_t j = 0; j < widths[k]; ++j)
                                          in.grad[r * widths[k] + j] += self.grad[r * total + c + j];
                                    c += widths[k];
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Contractions

// Batched matrix product [..,M,K] x [..,K,N] -> [..,M,N]. Leading batch axes
// broadcast numpy-style (extent 1 or missing axes repeat).
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  auto mismatch = [&] {
    return DimensionError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  };
  if (as.size() < 2 || bs.size() < 2) throw mismatch();
  const std::size_t m = as[as.size() - 2], k = as.back(), n = bs.back();
  if (bs[bs.size() - 2] != k) throw mismatch();
  const std::size_t abr = as.size() - 2, bbr = bs.size() - 2;
  const std::size_t br = std::max(abr, bbr);
  Shape batch(br), a_batch(br, 1), b_batch(br, 1);
  for (std::size_t i = 0; i < abr; ++i) a_batch[br - abr + i] = as[i];
  for (std::size_t i = 0; i < bbr; ++i) b_batch[br - bbr + i] = bs[i];
  for (std::size_t i = 0; i < br; ++i) {
    if (a_batch[i] != b_batch[i] && a_batch[i] != 1 && b_batch[i] != 1) throw mismatch();
    batch[i] = std::max(a_batch[i], b_batch[i]);
  }
  Shape as_str = strides_of(a_batch), bs_str = strides_of(b_batch);
  const std::size_t nb = numel_of(batch);
  std::vector<std::size_t> a_off(nb), b_off(nb);
  detail::IndexCounter it(batch);
  for (std::size_t i = 0; i < nb; ++i, it.next()) {
    std::size_t ao = 0, bo = 0;
    for (std::size_t d = 0; d < br; ++d) {
      if (a_batch[d] != 1) ao += it.idx[d] * as_str[d];
      if (b_batch[d] != 1) bo += it.idx[d] * bs_str[d];
    }
    a_off[i] = ao * m * k;
    b_off[i] = bo * k * n;
  }
  std::vector<T> out(nb * m * n, T(0));
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < nb; ++i)
    detail::gemm_nn(ad.data() + a_off[i], bd.data() + b_off[i], out.data() + i * m * n, m, k, n);
  MacCounter::record(static_cast<std::uint64_t>(nb) * m * k * n);
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  return detail::make_result<T>(
      "matmul", out_shape, std::move(out), {a.node(), b.node()},
      [a_off = std::move(a_off), b_off = std::move(b_off), m, k, n](detail::Node<T>& self) {
        auto& x = *self.inputs[0];
        auto& y = *self.inputs[1];
        for (std::size_t i = 0; i < a_off.size(); ++i) {
          const T* g = self.grad.data() + i * m * n;
          if (x.requires_grad) detail::gemm_nt(g, y.data.data() + b_off[i], x.grad.data() + a_off[i], m, k, n);
          if (y.requires_grad) detail::gemm_tn(x.data.data() + a_off[i], g, y.grad.data() + b_off[i], m, k, n);
        }
      });
}

// x[.., in] * W[in, out] + bias[out]. Pass an empty bias tensor pointer for
// no bias.
template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>* bias) {
  if (x.rank() < 1 || weight.rank() != 2 || x.shape().back() != weight.dim(0))
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  const std::size_t in = weight.dim(0), outc = weight.dim(1);
  if (bias && (bias->rank() != 1 || bias->dim(0) != outc))
    throw DimensionError("linear: bias " + shape_str(bias->shape()) + " for " + std::to_string(outc) + " outputs");
  const std::size_t rows = x.numel() / in;
  std::vector<T> out(rows * outc, T(0));
  if (bias) {
    auto bd = bias->data();
    for (std::size_t r = 0; r < rows; ++r) std::copy(bd.begin(), bd.end(), out.begin() + r * outc);
  }
  detail::gemm_nn(x.data().data(), weight.data().data(), out.data(), rows, in, outc);
  MacCounter::record(static_cast<std::uint64_t>(rows) * in * outc);
  Shape out_shape = x.shape();
  out_shape.back() = outc;
  std::vector<detail::NodeRef<T>> inputs{x.node(), weight.node()};
  if (bias) inputs.push_back(bias->node());
  return detail::make_result<T>("linear", out_shape, std::move(out), std::move(inputs),
                                [rows, in, outc](detail::Node<T>& self) {
                                  auto& xn = *self.inputs[0];
                                  auto& wn = *self.inputs[1];
                                  if (xn.requires_grad)
                                    detail::gemm_nt(self.grad.data(), wn.data.data(), xn.grad.data(), rows, in, outc);
                                  if (wn.requires_grad)
                                    detail::gemm_tn(xn.data.data(), self.grad.data(), wn.grad.data(), rows, in, outc);
                                  if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
                                    auto& bg = self.inputs[2]->grad;
                                    for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t j = 0; j < outc; ++j) bg[j] += self.grad[r * outc + j];
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Normalizers and activations

template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& x, long axis = -1) {
  const Shape& s = x.shape();
  const std::size_t ax = detail::normalize_axis(axis, s.size(), "softmax");
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= s[d];
  for (std::size_t d = ax + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t len = s[ax];
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = xd[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xd[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < len; ++j) {
        T e = std::exp(xd[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] *= inv;
    }
  return detail::make_result<T>("softmax", s, std::move(out), {x.node()},
                                [outer, inner, len](detail::Node<T>& self) {
                                  auto& xn = *self.inputs[0];
                                  const auto& y = self.data;
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t in = 0; in < inner; ++in) {
                                      const std::size_t base = o * len * inner + in;
                                      T dot = 0;
                                      for (std::size_t j = 0; j < len; ++j)
                                        dot += self.grad[base + j * inner] * y[base + j * inner];
                                      for (std::size_t j = 0; j < len; ++j) {
                                        const std::size_t p = base + j * inner;
                                        xn.grad[p] += y[p] * (self.grad[p] - dot);
                                      }
                                    }
                                });
}

inline constexpr double kLayerNormEps = 1e-5;

// Normalizes over the last axis, then applies the per-channel affine.
template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          double eps = kLayerNormEps) {
  if (eps <= 0) throw ParameterError("layer_norm: eps must be positive");
  if (x.rank() < 1) throw DimensionError("layer_norm: scalar input");
  const std::size_t c = x.shape().back();
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c})
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()) +
                         " and beta " + shape_str(beta.shape()));
  const std::size_t rows = x.numel() / c;
  std::vector<T> out(x.numel()), xhat(x.numel()), rstd(rows);
  auto xd = x.data(), gd = gamma.data(), bd = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * c;
    T mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(c);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
    rstd[r] = rs;
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (row[j] - mean) * rs;
      xhat[r * c + j] = h;
      out[r * c + j] = h * gd[j] + bd[j];
    }
  }
  return detail::make_result<T>(
      "layer_norm", x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
      [xhat = std::move(xhat), rstd = std::move(rstd), rows, c](detail::Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& gn = *self.inputs[1];
        auto& bn = *self.inputs[2];
        for (std::size_t r = 0; r < rows; ++r) {
          const T* g = self.grad.data() + r * c;
          const T* h = xhat.data() + r * c;
          if (gn.requires_grad)
            for (std::size_t j = 0; j < c; ++j) gn.grad[j] += g[j] * h[j];
          if (bn.requires_grad)
            for (std::size_t j = 0; j < c; ++j) bn.grad[j] += g[j];
          if (xn.requires_grad) {
            T m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < c; ++j) {
              const T d = g[j] * gn.data[j];
              m1 += d;
              m2 += d * h[j];
            }
            m1 /= static_cast<T>(c);
            m2 /= static_cast<T>(c);
            for (std::size_t j = 0; j < c; ++j)
              xn.grad[r * c + j] += rstd[r] * (g[j] * gn.data[j] - m1 - h[j] * m2);
          }
        }
      });
}

// tanh approximation of GELU.
template <class T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = xd[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(T(kC) * (v + T(kA) * v * v * v)));
  }
  return detail::make_result<T>("gelu", x.shape(), std::move(out), {x.node()}, [](detail::Node<T>& self) {
    auto& xn = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T v = xn.data[i];
      const T t = std::tanh(T(kC) * (v + T(kA) * v * v * v));
      const T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * T(kC) * (T(1) + T(3 * kA) * v * v);
      xn.grad[i] += self.grad[i] * d;
    }
  });
}

// ---------------------------------------------------------------------------
// Spatial operations on channels-last maps [B,H,W,C]

namespace detail {

struct Interp {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

// align_corners=false source coordinates for an integer upscale.
inline std::vector<Interp> upsample_table(std::size_t in, std::size_t factor) {
  std::vector<Interp> t(in * factor);
  for (std::size_t o = 0; o < t.size(); ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    std::size_t i1 = std::min(i0 + 1, in - 1);
    t[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return t;
}

inline void require_bhwc(const Shape& s, const char* op) {
  if (s.size() != 4) throw DimensionError(std::string(op) + ": expected [B,H,W,C], got " + shape_str(s));
}

}  // namespace detail

template <class T>
BasicTensor<T> bilinear_upsample(const BasicTensor<T>& x, long factor) {
  if (factor < 1) throw ParameterError("bilinear_upsample: factor must be >= 1, got " + std::to_string(factor));
  detail::require_bhwc(x.shape(), "bilinear_upsample");
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const auto f = static_cast<std::size_t>(factor);
  const std::size_t oh = h * f, ow = w * f;
  auto ty = detail::upsample_table(h, f);
  auto tx = detail::upsample_table(w, f);
  std::vector<T> out(b * oh * ow * c);
  auto xd = x.data();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const auto& iy = ty[y];
        const auto& ix = tx[xx];
        const T wy1 = static_cast<T>(iy.w1), wy0 = T(1) - wy1;
        const T wx1 = static_cast<T>(ix.w1), wx0 = T(1) - wx1;
        const T* p00 = xd.data() + ((n * h + iy.i0) * w + ix.i0) * c;
        const T* p01 = xd.data() + ((n * h + iy.i0) * w + ix.i1) * c;
        const T* p10 = xd.data() + ((n * h + iy.i1) * w + ix.i0) * c;
        const T* p11 = xd.data() + ((n * h + iy.i1) * w + ix.i1) * c;
        T* o = out.data() + ((n * oh + y) * ow + xx) * c;
        for (std::size_t ch = 0; ch < c; ++ch)
          o[ch] = wy0 * (wx0 * p00[ch] + wx1 * p01[ch]) + wy1 * (wx0 * p10[ch] + wx1 * p11[ch]);
      }
  return detail::make_result<T>(
      "bilinear_upsample", Shape{b, oh, ow, c}, std::move(out), {x.node()},
      [ty = std::move(ty), tx = std::move(tx), b, h, w, c, oh, ow](detail::Node<T>& self) {
        auto& g = self.inputs[0]->grad;
        for (std::size_t n = 0; n < b; ++n)
          for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xx = 0; xx < ow; ++xx) {
              const auto& iy = ty[y];
              const auto& ix = tx[xx];
              const T wy1 = static_cast<T>(iy.w1), wy0 = T(1) - wy1;
              const T wx1 = static_cast<T>(ix.w1), wx0 = T(1) - wx1;
              const T* go = self.grad.data() + ((n * oh + y) * ow + xx) * c;
              T* g00 = g.data() + ((n * h + iy.i0) * w + ix.i0) * c;
              T* g01 = g.data() + ((n * h + iy.i0) * w + ix.i1) * c;
              T* g10 = g.data() + ((n * h + iy.i1) * w + ix.i0) * c;
              T* g11 = g.data() + ((n * h + iy.i1) * w + ix.i1) * c;
              for (std::size_t ch = 0; ch < c; ++ch) {
                g00[ch] += go[ch] * wy0 * wx0;
                g01[ch] += go[ch] * wy0 * wx1;
                g10[ch] += go[ch] * wy1 * wx0;
                g11[ch] += go[ch] * wy1 * wx1;
              }
            }
      });
}

// Per-channel 3x3 aggregation with zero padding: weight [3,3,C], bias [C].
template <class T>
BasicTensor<T> depthwise_conv3x3(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  detail::require_bhwc(x.shape(), "depthwise_conv3x3");
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (weight.shape() != Shape{3, 3, c} || bias.shape() != Shape{c})
    throw DimensionError("depthwise_conv3x3: weight " + shape_str(weight.shape()) + " / bias " +
                         shape_str(bias.shape()) + " for " + std::to_string(c) + " channels");
  std::vector<T> out(x.numel());
  auto xd = x.data(), wd = weight.data(), bd = bias.data();
  MacCounter::record(static_cast<std::uint64_t>(b) * h * w * 9 * c);  // full 3x3 taps, padding included
  const auto H = static_cast<long>(h), W = static_cast<long>(w);
  for (std::size_t n = 0; n < b; ++n)
    for (long y = 0; y < H; ++y)
      for (long xx = 0; xx < W; ++xx) {
        T* o = out.data() + ((n * h + y) * w + xx) * c;
        std::copy(bd.begin(), bd.end(), o);
        for (long dy = -1; dy <= 1; ++dy)
          for (long dx = -1; dx <= 1; ++dx) {
            const long sy = y + dy, sx = xx + dx;
            if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
            const T* src = xd.data() + ((n * h + sy) * w + sx) * c;
            const T* k = wd.data() + ((dy + 1) * 3 + (dx + 1)) * c;
            for (std::size_t ch = 0; ch < c; ++ch) o[ch] += k[ch] * src[ch];
          }
      }
  return detail::make_result<T>(
      "depthwise_conv3x3", x.shape(), std::move(out), {x.node(), weight.node(), bias.node()},
      [b, h, w, c](detail::Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& wn = *self.inputs[1];
        auto& bn = *self.inputs[2];
        const auto H = static_cast<long>(h), W = static_cast<long>(w);
        for (std::size_t n = 0; n < b; ++n)
          for (long y = 0; y < H; ++y)
            for (long xx = 0; xx < W; ++xx) {
              const T* go = self.grad.data() + ((n * h + y) * w + xx) * c;
              if (bn.requires_grad)
                for (std::size_t ch = 0; ch < c; ++ch) bn.grad[ch] += go[ch];
              for (long dy = -1; dy <= 1; ++dy)
                for (long dx = -1; dx <= 1; ++dx) {
                  const long sy = y + dy, sx = xx + dx;
                  if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                  const std::size_t so = ((n * h + sy) * w + sx) * c;
                  const std::size_t ko = ((dy + 1) * 3 + (dx + 1)) * c;
                  for (std::size_t ch = 0; ch < c; ++ch) {
                    if (xn.requires_grad) xn.grad[so + ch] += go[ch] * wn.data[ko + ch];
                    if (wn.requires_grad) wn.grad[ko + ch] += go[ch] * xn.data[so + ch];
                  }
                }
            }
      });
}

// Zero-pads [B,H,W,C] on the bottom/right to [B,out_h,out_w,C].
template <class T>
BasicTensor<T> pad_bottom_right(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require_bhwc(x.shape(), "pad_bottom_right");
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (out_h < h || out_w < w) throw LayoutError("pad_bottom_right: target smaller than input");
  if (out_h == h && out_w == w) return x;
  std::vector<T> out(b * out_h * out_w * c, T(0));
  auto xd = x.data();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(xd.begin() + ((n * h + y) * w) * c, w * c, out.begin() + ((n * out_h + y) * out_w) * c);
  return detail::make_result<T>("pad_bottom_right", Shape{b, out_h, out_w, c}, std::move(out), {x.node()},
                                [b, h, w, c, out_h, out_w](detail::Node<T>& self) {
                                  auto& g = self.inputs[0]->grad;
                                  for (std::size_t n = 0; n < b; ++n)
                                    for (std::size_t y = 0; y < h; ++y)
                                      for (std::size_t j = 0; j < w * c; ++j)
                                        g[(n * h + y) * w * c + j] += self.grad[((n * out_h + y) * out_w) * c + j];
                                });
}

// Gathers each non-overlapping r x r cell of [B,H,W,C] into one token of
// r*r*C values ordered (row-in-cell, col-in-cell, channel).
template <class T>
BasicTensor<T> space_to_depth(const BasicTensor<T>& x, std::size_t r) {
  detail::require_bhwc(x.shape(), "space_to_depth");
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (r == 0 || h % r != 0 || w % r != 0)
    throw LayoutError("space_to_depth: " + std::to_string(h) + "x" + std::to_string(w) + " map is not divisible into " +
                      std::to_string(r) + "x" + std::to_string(r) + " cells");
  auto cells = reshape(x, Shape{b, h / r, r, w / r, r, c});
  cells = permute(cells, {0, 1, 3, 2, 4, 5});
  return reshape(cells, Shape{b, h / r, w / r, r * r * c});
}

// ---------------------------------------------------------------------------
// Losses

// Mean cross-entropy of logits [.., K] against integer labels (one per row).
template <class T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() < 1) throw DimensionError("cross_entropy: scalar logits");
  const std::size_t k = logits.shape().back();
  const std::size_t rows = logits.numel() / k;
  if (labels.size() != rows)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) +
                         " rows of " + shape_str(logits.shape()));
  for (std::size_t r = 0; r < rows; ++r)
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k)
      throw DataError("label " + std::to_string(labels[r]) + " at position " + std::to_string(r) +
                      " outside [0," + std::to_string(k) + ")");
  auto ld = logits.data();
  std::vector<T> probs(logits.numel());
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = ld.data() + r * k;
    T mx = *std::max_element(row, row + k);
    T s = 0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
    const T lse = mx + std::log(s);
    total += lse - row[labels[r]];
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] = std::exp(row[j] - lse);
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return detail::make_result<T>("cross_entropy", Shape{}, {total / static_cast<T>(rows)}, {logits.node()},
                                [probs = std::move(probs), lab = std::move(lab), rows, k](detail::Node<T>& self) {
                                  auto& g = self.inputs[0]->grad;
                                  const T s = self.grad[0] / static_cast<T>(rows);
                                  for (std::size_t r = 0; r < rows; ++r)
                                    for (std::size_t j = 0; j < k; ++j)
                                      g[r * k + j] += s * (probs[r * k + j] - (static_cast<int>(j) == lab[r] ? T(1) : T(0)));
                                });
}

}  // namespace ftn
