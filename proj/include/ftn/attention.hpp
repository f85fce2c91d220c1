#pragma once

#include <cmath>
#include <string>

#include "ftn/nn.hpp"

namespace ftn {

struct AttentionSpec {
  std::size_t heads = 1;
  std::size_t head_dim = 32;
  std::size_t groups = 1;
  bool qkv_bias = true;

  std::size_t model_dim() const { return heads * head_dim; }

  void validate() const {
    if (heads == 0 || head_dim == 0) throw ParameterError("attention needs positive heads and head_dim");
    if (groups == 0) throw ParameterError("attention group count must be positive");
    const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(groups))));
    if (g * g != groups)
      throw LayoutError("group count " + std::to_string(groups) + " is not a perfect square");
  }
};

// How a [B,H,W,C] map is tiled into sqrt(G) x sqrt(G) groups.
struct GridLayout {
  std::size_t batch = 0, height = 0, width = 0, channels = 0;
  std::size_t grid_side = 1;
  std::size_t group_h = 0, group_w = 0;

  std::size_t groups() const { return grid_side * grid_side; }
  std::size_t tokens_per_group() const { return group_h * group_w; }

  static GridLayout make(const Shape& shape, std::size_t groups) {
    if (shape.size() != 4) throw DimensionError("grid layout needs [B,H,W,C], got " + shape_str(shape));
    AttentionSpec{1, 1, groups}.validate();
    GridLayout l;
    l.batch = shape[0];
    l.height = shape[1];
    l.width = shape[2];
    l.channels = shape[3];
    l.grid_side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(groups))));
    if (l.height % l.grid_side != 0 || l.width % l.grid_side != 0)
      throw LayoutError("cannot split H=" + std::to_string(l.height) + ", W=" + std::to_string(l.width) + " into G=" +
                        std::to_string(groups) + " groups (" + std::to_string(l.grid_side) + "x" +
                        std::to_string(l.grid_side) + " grid)");
    l.group_h = l.height / l.grid_side;
    l.group_w = l.width / l.grid_side;
    return l;
  }
};

// [B,H,W,C] -> [B*G, H/g * W/g, C]; row b*G + gy*g + gx holds the tokens of
// grid cell (gy, gx) in raster order.
template <class T>
BasicTensor<T> grid_partition(const BasicTensor<T>& x, std::size_t groups) {
  const auto l = GridLayout::make(x.shape(), groups);
  const std::size_t g = l.grid_side;
  auto t = reshape(x, Shape{l.batch, g, l.group_h, g, l.group_w, l.channels});
  t = permute(t, {0, 1, 3, 2, 4, 5});
  return reshape(t, Shape{l.batch * l.groups(), l.tokens_per_group(), l.channels});
}

template <class T>
BasicTensor<T> grid_unpartition(const BasicTensor<T>& x, const GridLayout& l) {
  const std::size_t g = l.grid_side;
  if (x.shape() != Shape{l.batch * l.groups(), l.tokens_per_group(), l.channels})
    throw DimensionError("grid_unpartition: " + shape_str(x.shape()) + " does not match the layout");
  auto t = reshape(x, Shape{l.batch, g, g, l.group_h, l.group_w, l.channels});
  t = permute(t, {0, 1, 3, 2, 4, 5});
  return reshape(t, Shape{l.batch, l.height, l.width, l.channels});
}

template <class T>
struct AttentionParams {
  Linear<T> q, k, v, proj;

  static AttentionParams create(const AttentionSpec& spec, Rng& rng) {
    spec.validate();
    const std::size_t c = spec.model_dim();
    AttentionParams p;
    p.q = Linear<T>::create(c, c, rng, spec.qkv_bias);
    p.k = Linear<T>::create(c, c, rng, spec.qkv_bias);
    p.v = Linear<T>::create(c, c, rng, spec.qkv_bias);
    p.proj = Linear<T>::create(c, c, rng);
    return p;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    q.visit(scoped(prefix, "q"), f);
    k.visit(scoped(prefix, "k"), f);
    v.visit(scoped(prefix, "v"), f);
    proj.visit(scoped(prefix, "proj"), f);
  }
};

// Scaled dot-product attention of queries from q_src [N,L,C] over keys and
// values from kv_src [N,M,C], split into heads and re-projected.
template <class T>
BasicTensor<T> attend(const BasicTensor<T>& q_src, const BasicTensor<T>& kv_src, const AttentionParams<T>& p,
                      const AttentionSpec& spec) {
  const std::size_t c = spec.model_dim();
  if (q_src.rank() != 3 || q_src.dim(2) != c || kv_src.rank() != 3 || kv_src.dim(2) != c ||
      kv_src.dim(0) != q_src.dim(0))
    throw DimensionError("attention over " + shape_str(q_src.shape()) + " / " + shape_str(kv_src.shape()) +
                         " with model dim " + std::to_string(c));
  const std::size_t n = q_src.dim(0), l = q_src.dim(1), m = kv_src.dim(1);
  const std::size_t h = spec.heads, d = spec.head_dim;

  BasicTensor<T> q, k, v;
  {
    MacLabel label("attn.qkv");
    q = permute(reshape(p.q(q_src), Shape{n, l, h, d}), {0, 2, 1, 3});
    k = permute(reshape(p.k(kv_src), Shape{n, m, h, d}), {0, 2, 3, 1});
    v = permute(reshape(p.v(kv_src), Shape{n, m, h, d}), {0, 2, 1, 3});
  }
  BasicTensor<T> scores;
  {
    MacLabel label("attn.scores");
    scores = scale(matmul(q, k), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
  }
  auto weights = softmax(scores, -1);
  BasicTensor<T> ctx;
  {
    MacLabel label("attn.context");
    ctx = matmul(weights, v);
  }
  ctx = reshape(permute(ctx, {0, 2, 1, 3}), Shape{n, l, c});
  MacLabel label("attn.proj");
  return p.proj(ctx);
}

template <class T>
BasicTensor<T> multi_head_attention(const BasicTensor<T>& x, const AttentionParams<T>& p, const AttentionSpec& spec) {
  return attend(x, x, p, spec);
}

// Grouped self-attention: tokens attend only within their own grid cell.
// One set of projection weights is shared by every group.
template <class T>
BasicTensor<T> pg_msa(const BasicTensor<T>& x, const AttentionParams<T>& p, const AttentionSpec& spec) {
  const auto layout = GridLayout::make(x.shape(), spec.groups);
  if (layout.channels != spec.model_dim())
    throw DimensionError("pg_msa: input " + shape_str(x.shape()) + " with model dim " +
                         std::to_string(spec.model_dim()));
  auto grouped = grid_partition(x, spec.groups);
  return grid_unpartition(multi_head_attention(grouped, p, spec), layout);
}

// ---------------------------------------------------------------------------
// Spatial-reduction attention

template <class T>
struct SRAttentionParams {
  AttentionParams<T> attn;
  std::size_t ratio = 1;
  Linear<T> reduce;  // [R*R*C -> C], only when ratio > 1
  LayerNorm<T> reduce_norm;

  static SRAttentionParams create(const AttentionSpec& spec, std::size_t ratio, Rng& rng) {
    if (ratio < 1) throw ParameterError("spatial reduction ratio must be >= 1");
    SRAttentionParams p;
    p.attn = AttentionParams<T>::create(spec, rng);
    p.ratio = ratio;
    if (ratio > 1) {
      const std::size_t c = spec.model_dim();
      p.reduce = Linear<T>::create(ratio * ratio * c, c, rng);
      p.reduce_norm = LayerNorm<T>::create(c);
    }
    return p;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    attn.visit(prefix, f);
    if (ratio > 1) {
      reduce.visit(scoped(prefix, "sr"), f);
      reduce_norm.visit(scoped(prefix, "sr_norm"), f);
    }
  }
};

inline std::size_t reduced_extent(std::size_t extent, std::size_t ratio) { return (extent + ratio - 1) / ratio; }

// Merges each R x R cell into one key/value token: [B,H,W,C] -> [B, M, C]
// with M = ceil(H/R) * ceil(W/R). Maps that R does not divide are zero-padded
// on the bottom/right first.
template <class T>
BasicTensor<T> spatial_reduce(const BasicTensor<T>& x, const SRAttentionParams<T>& p) {
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3), r = p.ratio;
  if (r == 1) return reshape(x, Shape{b, h * w, c});
  const std::size_t rh = reduced_extent(h, r), rw = reduced_extent(w, r);
  auto padded = pad_bottom_right(x, rh * r, rw * r);
  BasicTensor<T> merged;
  {
    MacLabel label("attn.sr");
    merged = p.reduce(space_to_depth(padded, r));
  }
  return reshape(p.reduce_norm(merged), Shape{b, rh * rw, c});
}

template <class T>
BasicTensor<T> sr_msa(const BasicTensor<T>& x, const SRAttentionParams<T>& p, const AttentionSpec& spec) {
  detail::require_bhwc(x.shape(), "sr_msa");
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (c != spec.model_dim())
    throw DimensionError("sr_msa: input " + shape_str(x.shape()) + " with model dim " +
                         std::to_string(spec.model_dim()));
  auto queries = reshape(x, Shape{b, h * w, c});
  auto kv = spatial_reduce(x, p);
  return reshape(attend(queries, kv, p.attn, spec), Shape{b, h, w, c});
}

// ---------------------------------------------------------------------------
// Conditional position encoding: x + per-channel 3x3 aggregation of x.

template <class T>
struct PositionEncoding {
  BasicTensor<T> weight;  // [3,3,C]
  BasicTensor<T> bias;    // [C]

  static PositionEncoding create(std::size_t c, Rng& rng) {
    return {trunc_normal_param<T>({3, 3, c}, rng), constant_param<T>({c}, T(0))};
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(scoped(prefix, "weight"), weight);
    f(scoped(prefix, "bias"), bias);
  }
};

template <class T>
BasicTensor<T> cpe(const BasicTensor<T>& x, const PositionEncoding<T>& peg) {
  MacLabel label("cpe");
  return add(x, depthwise_conv3x3(x, peg.weight, peg.bias));
}

}  // namespace ftn
