#pragma once

#include <array>
#include <string>
#include <vector>

#include "ftn/encoder.hpp"

namespace ftn {

enum class Fusion { Sum, Concat };

inline std::string to_string(Fusion f) { return f == Fusion::Sum ? "sum" : "concat"; }

inline Fusion parse_fusion(const std::string& s) {
  if (s == "sum" || s == "add") return Fusion::Sum;
  if (s == "concat") return Fusion::Concat;
  throw ConfigError("unknown fusion mode '" + s + "' (expected sum or concat)");
}

// Feature Pyramid Transformer settings. depths/sr_ratios are indexed by
// refinement stride: [0] = 32, [1] = 16, [2] = 8.
struct FPTConfig {
  static constexpr std::array<std::size_t, 3> kStrides{32, 16, 8};

  std::size_t embed_dim = 512;
  std::array<std::size_t, 3> depths{1, 1, 1};
  std::array<std::size_t, 3> sr_ratios{2, 2, 2};
  Fusion fusion = Fusion::Sum;
  std::size_t num_classes = 60;
  std::size_t head_dim = 32;
  std::size_t mlp_ratio = 4;

  AttentionSpec attention() const { return {embed_dim / head_dim, head_dim, 1}; }

  static std::size_t stride_slot(std::size_t stride) {
    for (std::size_t i = 0; i < kStrides.size(); ++i)
      if (kStrides[i] == stride) return i;
    throw ParameterError("no refinement stage at stride " + std::to_string(stride));
  }

  void validate() const {
    if (embed_dim == 0) throw ConfigError("decoder embed_dim must be positive");
    if (head_dim == 0 || embed_dim % head_dim != 0)
      throw ConfigError("decoder head_dim " + std::to_string(head_dim) + " does not divide embed_dim " +
                        std::to_string(embed_dim));
    for (auto r : sr_ratios)
      if (r < 1) throw ConfigError("decoder SR ratios must be >= 1");
    if (num_classes == 0) throw ConfigError("decoder needs at least one class");
    if (mlp_ratio == 0) throw ConfigError("decoder MLP ratio must be positive");
  }

  bool operator==(const FPTConfig&) const = default;
};

// Pre-norm residual block with spatial-reduction attention.
template <class T>
struct SRBlock {
  AttentionSpec spec;
  LayerNorm<T> norm1;
  SRAttentionParams<T> attn;
  LayerNorm<T> norm2;
  Mlp<T> mlp;

  static SRBlock create(const FPTConfig& cfg, std::size_t ratio, Rng& rng) {
    SRBlock b;
    b.spec = cfg.attention();
    b.norm1 = LayerNorm<T>::create(cfg.embed_dim);
    b.attn = SRAttentionParams<T>::create(b.spec, ratio, rng);
    b.norm2 = LayerNorm<T>::create(cfg.embed_dim);
    b.mlp = Mlp<T>::create(cfg.embed_dim, cfg.mlp_ratio, rng);
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

template <class T>
BasicTensor<T> sr_block(const BasicTensor<T>& x, const SRBlock<T>& block) {
  auto y = add(x, sr_msa(block.norm1(x), block.attn, block.spec));
  MacLabel label("mlp");
  return add(y, block.mlp(block.norm2(y)));
}

template <class T>
struct Lateral {
  Linear<T> proj;
  LayerNorm<T> norm;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    proj.visit(scoped(prefix, "proj"), f);
    norm.visit(scoped(prefix, "norm"), f);
  }
};

// One refinement pipeline. steps[j] holds the blocks applied at stride
// 2^(stage+1) / 2^j before the j-th x2 upsample.
template <class T>
struct DecoderBranch {
  std::size_t stage = 1;  // 1-based source stage
  std::vector<std::vector<SRBlock<T>>> steps;

  std::size_t start_stride() const { return std::size_t{2} << stage; }
  std::size_t upsample_steps() const { return stage - 1; }

  static DecoderBranch create(std::size_t stage, const FPTConfig& cfg, Rng& rng) {
    DecoderBranch b;
    b.stage = stage;
    for (std::size_t stride = b.start_stride(); stride >= 8; stride /= 2) {
      const std::size_t slot = FPTConfig::stride_slot(stride);
      std::vector<SRBlock<T>> blocks;
      for (std::size_t n = 0; n < cfg.depths[slot]; ++n)
        blocks.push_back(SRBlock<T>::create(cfg, cfg.sr_ratios[slot], rng));
      b.steps.push_back(std::move(blocks));
    }
    return b;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t j = 0; j < steps.size(); ++j) {
      const std::string at = scoped(prefix, "s" + std::to_string(start_stride() >> j));
      for (std::size_t n = 0; n < steps[j].size(); ++n) steps[j][n].visit(scoped(at, std::to_string(n)), f);
    }
  }
};

template <class T>
struct FPTDecoder {
  FPTConfig config;
  std::array<Lateral<T>, 4> laterals;
  std::array<DecoderBranch<T>, 4> branches;
  Linear<T> fuse;  // [4D -> D], concat fusion only
  Linear<T> seg;   // [D -> K]
  std::array<Linear<T>, 4> aux;

  static FPTDecoder create(const FPTConfig& config, const PGTConfig::PerStage& encoder_dims, Rng& rng) {
    config.validate();
    FPTDecoder d;
    d.config = config;
    const std::size_t dim = config.embed_dim;
    for (std::size_t i = 0; i < 4; ++i) {
      d.laterals[i].proj = Linear<T>::create(encoder_dims[i], dim, rng);
      d.laterals[i].norm = LayerNorm<T>::create(dim);
    }
    for (std::size_t i = 0; i < 4; ++i) d.branches[i] = DecoderBranch<T>::create(i + 1, config, rng);
    if (config.fusion == Fusion::Concat) d.fuse = Linear<T>::create(4 * dim, dim, rng);
    d.seg = Linear<T>::create(dim, config.num_classes, rng);
    for (auto& a : d.aux) a = Linear<T>::create(dim, config.num_classes, rng);
    return d;
  }

  // Inference parameters only; auxiliary heads are visited by visit_aux.
  template <class F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < 4; ++i) laterals[i].visit(scoped(prefix, "lateral" + std::to_string(i + 1)), f);
    for (std::size_t i = 0; i < 4; ++i) branches[i].visit(scoped(prefix, "branch" + std::to_string(i + 1)), f);
    if (config.fusion == Fusion::Concat) fuse.visit(scoped(prefix, "fuse"), f);
    seg.visit(scoped(prefix, "seg"), f);
  }

  template <class F>
  void visit_aux(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < 4; ++i) aux[i].visit(scoped(prefix, "aux" + std::to_string(i + 1)), f);
  }
};

template <class T>
BasicTensor<T> lateral_project(const BasicTensor<T>& feature, const Lateral<T>& lateral) {
  MacLabel label("lateral");
  return lateral.norm(lateral.proj(feature));
}

// Upsamples the coarser map x2 and adds the finer lateral.
template <class T>
BasicTensor<T> top_down_merge(const BasicTensor<T>& coarser, const BasicTensor<T>& finer) {
  if (coarser.rank() != 4 || finer.rank() != 4 || finer.dim(1) != 2 * coarser.dim(1) ||
      finer.dim(2) != 2 * coarser.dim(2) || finer.dim(0) != coarser.dim(0) || finer.dim(3) != coarser.dim(3))
    throw LayoutError("top_down_merge: " + shape_str(coarser.shape()) + " is not the x2-coarser partner of " +
                      shape_str(finer.shape()));
  return add(bilinear_upsample(coarser, 2), finer);
}

// Runs the branch's SR blocks at each stride, upsampling x2 after each stride
// until the map reaches stride 4.
template <class T>
BasicTensor<T> refine_branch(const BasicTensor<T>& merged, const DecoderBranch<T>& branch) {
  BasicTensor<T> x = merged;
  for (const auto& blocks : branch.steps) {
    for (const auto& b : blocks) x = sr_block(x, b);
    x = bilinear_upsample(x, 2);
  }
  return x;
}

template <class T>
BasicTensor<T> fuse_branches(const std::array<BasicTensor<T>, 4>& branches, Fusion mode, const Linear<T>* fuse = nullptr) {
  for (const auto& b : branches)
    if (b.shape() != branches[0].shape())
      throw LayoutError("fuse_branches: branch shapes differ: " + shape_str(branches[0].shape()) + " vs " +
                        shape_str(b.shape()));
  if (mode == Fusion::Sum) return add(add(add(branches[0], branches[1]), branches[2]), branches[3]);
  if (!fuse) throw UsageError("concat fusion needs its projection layer");
  MacLabel label("fuse");
  return (*fuse)(concat_last<T>({branches[0], branches[1], branches[2], branches[3]}));
}

// Per-token class scores, bilinearly upsampled x4 to input resolution.
template <class T>
BasicTensor<T> seg_head(const BasicTensor<T>& fused, const Linear<T>& head) {
  MacLabel label("seg_head");
  return bilinear_upsample(head(fused), 4);
}

// Per-pixel argmax over the class axis; ties go to the lowest class index.
template <class T>
std::vector<int> argmax_labels(const BasicTensor<T>& logits) {
  const std::size_t k = logits.shape().back();
  const std::size_t rows = logits.numel() / k;
  std::vector<int> out(rows);
  auto d = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (d[r * k + j] > d[r * k + best]) best = j;
    out[r] = static_cast<int>(best);
  }
  return out;
}

template <class T>
struct DecoderOutput {
  BasicTensor<T> logits;
  std::array<BasicTensor<T>, 4> branches;
  std::vector<BasicTensor<T>> aux_logits;  // filled when auxiliary heads run
};

template <class T>
std::vector<BasicTensor<T>> aux_heads(const std::array<BasicTensor<T>, 4>& branches, const FPTDecoder<T>& dec) {
  std::vector<BasicTensor<T>> out;
  for (std::size_t i = 0; i < 4; ++i) out.push_back(seg_head(branches[i], dec.aux[i]));
  return out;
}

template <class T>
DecoderOutput<T> run_decoder(const FeaturePyramid<T>& pyramid, const FPTDecoder<T>& dec, bool with_aux = false) {
  std::array<BasicTensor<T>, 4> lat;
  for (std::size_t i = 0; i < 4; ++i) lat[i] = lateral_project(pyramid[i], dec.laterals[i]);
  std::array<BasicTensor<T>, 4> merged;
  merged[3] = lat[3];
  for (std::size_t i = 3; i-- > 0;) merged[i] = top_down_merge(merged[i + 1], lat[i]);

  DecoderOutput<T> out;
  {
    MacLabel label("refine");
    for (std::size_t i = 0; i < 4; ++i) out.branches[i] = refine_branch(merged[i], dec.branches[i]);
  }
  out.logits = seg_head(fuse_branches(out.branches, dec.config.fusion, &dec.fuse), dec.seg);
  if (with_aux) out.aux_logits = aux_heads(out.branches, dec);
  return out;
}

}  // namespace ftn
