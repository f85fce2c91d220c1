#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "ftn/attention.hpp"

namespace ftn {

// Per-stage hyperparameters of a Pyramid Group Transformer encoder. Index i
// holds stage i+1.
struct PGTConfig {
  using PerStage = std::array<std::size_t, 4>;

  PerStage patch{4, 2, 2, 2};   // token-reduction side of the stage's patch transform
  PerStage dims{};              // token dimension C_i
  PerStage depths{};            // number of blocks N_i
  PerStage groups{64, 16, 1, 1};
  PerStage heads{};
  PerStage mlp_ratios{4, 4, 4, 4};
  std::size_t in_channels = 3;
  std::size_t num_classes = 1000;  // classification head width; 0 disables the head
  double drop_path = 0.0;          // stochastic depth rate of every block

  // Channel-doubling config with a fixed per-head width.
  static PGTConfig from_width(std::size_t c1, PerStage depths, std::size_t head_dim = 32,
                              PerStage groups = {64, 16, 1, 1}, std::size_t mlp_ratio = 4,
                              std::size_t num_classes = 1000) {
    PGTConfig c;
    for (std::size_t i = 0; i < 4; ++i) {
      c.dims[i] = c1 << i;
      c.heads[i] = c.dims[i] / head_dim;
      c.mlp_ratios[i] = mlp_ratio;
    }
    c.depths = depths;
    c.groups = groups;
    c.num_classes = num_classes;
    return c;
  }

  std::size_t head_dim() const { return heads[0] ? dims[0] / heads[0] : 0; }

  AttentionSpec attention(std::size_t stage) const { return {heads[stage], dims[stage] / heads[stage], groups[stage]}; }

  void validate() const {
    static constexpr PerStage kPatch{4, 2, 2, 2};
    if (patch != kPatch) throw ConfigError("patch transform sides must be 4,2,2,2");
    if (in_channels == 0) throw ConfigError("in_channels must be positive");
    if (dims[0] == 0) throw ConfigError("stage 1 dimension must be positive");
    for (std::size_t i = 0; i < 4; ++i) {
      const std::string stage = "stage " + std::to_string(i + 1);
      if (dims[i] != (dims[0] << i))
        throw ConfigError(stage + ": dimension " + std::to_string(dims[i]) + " breaks channel doubling from C_1=" +
                          std::to_string(dims[0]));
      if (heads[i] == 0 || dims[i] % heads[i] != 0)
        throw ConfigError(stage + ": " + std::to_string(heads[i]) + " heads do not divide dimension " +
                          std::to_string(dims[i]));
      if (dims[i] / heads[i] != head_dim()) throw ConfigError(stage + ": head width differs from stage 1");
      if (depths[i] == 0) throw ConfigError(stage + ": needs at least one block");
      if (mlp_ratios[i] == 0) throw ConfigError(stage + ": MLP ratio must be positive");
      try {
        attention(i).validate();
      } catch (const Error& e) {
        throw ConfigError(stage + ": " + e.what());
      }
    }
    if (drop_path < 0.0 || drop_path >= 1.0) throw ConfigError("drop_path must lie in [0, 1)");
  }

  // Head width 32, MLP ratio 4 and groups 64-16-1-1 in every published variant.
  bool follows_published_rules() const {
    static constexpr PerStage kGroups{64, 16, 1, 1};
    if (groups != kGroups || head_dim() != 32) return false;
    for (auto e : mlp_ratios)
      if (e != 4) return false;
    return true;
  }

  std::size_t stride(std::size_t stage) const { return std::size_t{4} << stage; }

  // Throws unless an H x W input tiles every stage and every stage's grid.
  void check_geometry(std::size_t h, std::size_t w) const {
    for (std::size_t i = 0; i < 4; ++i) {
      const std::size_t s = stride(i);
      const std::string stage = "stage " + std::to_string(i + 1);
      if (h % s != 0 || w % s != 0)
        throw LayoutError(stage + ": input " + std::to_string(h) + "x" + std::to_string(w) +
                          " is not divisible by stride " + std::to_string(s));
      try {
        GridLayout::make({1, h / s, w / s, 1}, groups[i]);
      } catch (const Error& e) {
        throw LayoutError(stage + ": " + e.what());
      }
    }
  }

  bool operator==(const PGTConfig&) const = default;
};

inline const std::array<std::string_view, 4>& variant_names() {
  static const std::array<std::string_view, 4> names{"T", "S", "B", "L"};
  return names;
}

// The four published sizes. Widths and depths are the result of
// derive_variants() (analysis.hpp) and are re-verified by the test suite.
inline PGTConfig variant(std::string_view name) {
  if (name == "T" || name == "PGT-T") return PGTConfig::from_width(64, {1, 3, 6, 2});
  if (name == "S" || name == "PGT-S") return PGTConfig::from_width(96, {1, 3, 6, 2});
  if (name == "B" || name == "PGT-B") return PGTConfig::from_width(96, {1, 3, 18, 2});
  if (name == "L" || name == "PGT-L") return PGTConfig::from_width(128, {1, 3, 18, 2});
  throw ParameterError("unknown variant '" + std::string(name) + "' (expected T, S, B or L)");
}

// ---------------------------------------------------------------------------

// Training-time switches threaded through forward passes.
struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;
};

template <class T>
struct FeaturePyramid {
  static constexpr std::array<std::size_t, 4> kStrides{4, 8, 16, 32};
  std::array<BasicTensor<T>, 4> levels;

  const BasicTensor<T>& operator[](std::size_t i) const { return levels[i]; }
};

template <class T>
struct PatchEmbed {
  Linear<T> proj;  // [P*P*in -> C_1]
  LayerNorm<T> norm;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    proj.visit(scoped(prefix, "proj"), f);
    norm.visit(scoped(prefix, "norm"), f);
  }
};

template <class T>
struct PatchMerge {
  LayerNorm<T> norm;  // over the 4C gathered values
  Linear<T> proj;     // [4C -> 2C]

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    norm.visit(scoped(prefix, "norm"), f);
    proj.visit(scoped(prefix, "proj"), f);
  }
};

// Flattens each non-overlapping 4x4 patch, projects it to C_1 and normalizes.
template <class T>
BasicTensor<T> patch_transform_stage1(const BasicTensor<T>& img, const PatchEmbed<T>& embed, std::size_t patch = 4) {
  MacLabel label("patch_embed");
  return embed.norm(embed.proj(space_to_depth(img, patch)));
}

// Concatenates each 2x2 cell, normalizes, and projects 4C -> 2C.
template <class T>
BasicTensor<T> patch_merge(const BasicTensor<T>& x, const PatchMerge<T>& merge) {
  MacLabel label("patch_merge");
  return merge.proj(merge.norm(space_to_depth(x, 2)));
}

// Stochastic depth on a residual branch: in training, each sample's branch is
// dropped with probability `rate` and survivors are rescaled.
template <class T>
BasicTensor<T> drop_path(const BasicTensor<T>& branch, double rate, const ForwardContext& ctx) {
  if (!ctx.training || rate <= 0.0) return branch;
  if (!ctx.rng) throw UsageError("drop_path in training mode needs an rng");
  std::vector<T> keep(branch.dim(0));
  for (auto& k : keep) k = ctx.rng->uniform() < rate ? T(0) : static_cast<T>(1.0 / (1.0 - rate));
  return scale_batch(branch, std::move(keep));
}

template <class T>
struct PGTBlock {
  AttentionSpec spec;
  double drop_rate = 0.0;
  LayerNorm<T> norm1;
  AttentionParams<T> attn;
  LayerNorm<T> norm2;
  Mlp<T> mlp;

  static PGTBlock create(const AttentionSpec& spec, std::size_t mlp_ratio, double drop_rate, Rng& rng) {
    PGTBlock b;
    b.spec = spec;
    b.drop_rate = drop_rate;
    const std::size_t c = spec.model_dim();
    b.norm1 = LayerNorm<T>::create(c);
    b.attn = AttentionParams<T>::create(spec, rng);
    b.norm2 = LayerNorm<T>::create(c);
    b.mlp = Mlp<T>::create(c, mlp_ratio, rng);
    return b;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    norm1.visit(scoped(prefix, "norm1"), f);
    attn.visit(scoped(prefix, "attn"), f);
    norm2.visit(scoped(prefix, "norm2"), f);
    mlp.visit(scoped(prefix, "mlp"), f);
  }
};

// Two pre-norm residual sub-layers: grouped attention, then the MLP.
template <class T>
BasicTensor<T> pgt_block(const BasicTensor<T>& z, const PGTBlock<T>& block, const ForwardContext& ctx = {}) {
  auto attended = add(z, drop_path(pg_msa(block.norm1(z), block.attn, block.spec), block.drop_rate, ctx));
  BasicTensor<T> mlp_out;
  {
    MacLabel label("mlp");
    mlp_out = block.mlp(block.norm2(attended));
  }
  return add(attended, drop_path(mlp_out, block.drop_rate, ctx));
}

template <class T>
struct PGTStage {
  PatchEmbed<T> embed;  // stage 1 only
  PatchMerge<T> merge;  // stages 2-4
  std::vector<PGTBlock<T>> blocks;
  PositionEncoding<T> peg;  // applied once, after the first block
  bool first = false;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    if (first)
      embed.visit(scoped(prefix, "patch"), f);
    else
      merge.visit(scoped(prefix, "patch"), f);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      blocks[i].visit(scoped(prefix, "blocks." + std::to_string(i)), f);
      if (i == 0) peg.visit(scoped(prefix, "cpe"), f);
    }
  }
};

template <class T>
struct PGTEncoder {
  PGTConfig config;
  std::array<PGTStage<T>, 4> stages;
  Linear<T> head;  // present when config.num_classes > 0

  static PGTEncoder create(const PGTConfig& config, Rng& rng) {
    config.validate();
    PGTEncoder e;
    e.config = config;
    for (std::size_t i = 0; i < 4; ++i) {
      auto& st = e.stages[i];
      const std::size_t c = config.dims[i];
      st.first = i == 0;
      if (i == 0) {
        const std::size_t p = config.patch[0];
        st.embed.proj = Linear<T>::create(p * p * config.in_channels, c, rng);
        st.embed.norm = LayerNorm<T>::create(c);
      } else {
        const std::size_t prev = config.dims[i - 1];
        st.merge.norm = LayerNorm<T>::create(4 * prev);
        st.merge.proj = Linear<T>::create(4 * prev, c, rng);
      }
      for (std::size_t n = 0; n < config.depths[i]; ++n) {
        st.blocks.push_back(PGTBlock<T>::create(config.attention(i), config.mlp_ratios[i], config.drop_path, rng));
        if (n == 0) st.peg = PositionEncoding<T>::create(c, rng);
      }
    }
    if (config.num_classes > 0) e.head = Linear<T>::create(config.dims[3], config.num_classes, rng);
    return e;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < 4; ++i) stages[i].visit(scoped(prefix, "stage" + std::to_string(i + 1)), f);
    if (config.num_classes > 0) head.visit(scoped(prefix, "head"), f);
  }
};

template <class T>
BasicTensor<T> run_stage(const BasicTensor<T>& x, const PGTStage<T>& stage, const ForwardContext& ctx) {
  auto z = stage.first ? patch_transform_stage1(x, stage.embed) : patch_merge(x, stage.merge);
  for (std::size_t i = 0; i < stage.blocks.size(); ++i) {
    z = pgt_block(z, stage.blocks[i], ctx);
    if (i == 0) z = cpe(z, stage.peg);
  }
  return z;
}

// Image [B,H,W,in] -> the four stage outputs at strides 4, 8, 16, 32.
template <class T>
FeaturePyramid<T> run_encoder(const BasicTensor<T>& img, const PGTEncoder<T>& encoder, const ForwardContext& ctx = {}) {
  const auto& cfg = encoder.config;
  if (img.rank() != 4 || img.dim(3) != cfg.in_channels)
    throw DimensionError("encoder input must be [B,H,W," + std::to_string(cfg.in_channels) + "], got " +
                         shape_str(img.shape()));
  cfg.check_geometry(img.dim(1), img.dim(2));
  FeaturePyramid<T> out;
  BasicTensor<T> x = img;
  for (std::size_t i = 0; i < 4; ++i) {
    MacLabel label("stage" + std::to_string(i + 1));
    x = run_stage(x, encoder.stages[i], ctx);
    out.levels[i] = x;
  }
  return out;
}

// Average-pools the stage-4 tokens and maps the pooled token to class logits.
template <class T>
BasicTensor<T> classification_head(const BasicTensor<T>& f4, const Linear<T>& head) {
  if (f4.rank() != 4) throw DimensionError("classification head expects [B,H,W,C], got " + shape_str(f4.shape()));
  MacLabel label("head");
  return head(mean_over(f4, {1, 2}));
}

}  // namespace ftn
